mod cmd;
mod corpus;
mod opts;

use std::process::ExitCode;

use clap::Parser;

use opts::{Cli, Command, UsageError};

fn run(cli: Cli) -> anyhow::Result<()> {
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(opts::usage("--threads must be >= 1"));
        }
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    }
    match cli.command {
        Command::Gen(o) => cmd::gen(o),
        Command::Label(o) => cmd::label(o),
        Command::Train(o) => cmd::train_cmd(o),
        Command::Mask(o) => cmd::mask(o),
        Command::Compare(o) => cmd::compare_cmd(o),
        Command::Gradcheck(o) => cmd::gradcheck(o),
    }
}

fn exit_code(e: &anyhow::Error) -> u8 {
    if e.downcast_ref::<UsageError>().is_some() {
        2
    } else {
        1
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
