//! Central-difference verification of the analytic gradient.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

use super::loss::FocalParams;
use super::model::{loss_with_branches, sequence_loss_and_grad, Example};
use super::PredictorParams;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GradCheckConfig {
    pub step: f64,
    /// Below this magnitude both gradients count as zero.
    pub abs_tol: f64,
    pub samples_per_block: usize,
    pub seed: u64,
    /// Multiplies the analytic gradient before comparison; anything but 1
    /// must make the check fail.
    pub gradient_scale: f64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self { step: 1e-4, abs_tol: 1e-8, samples_per_block: 24, seed: 0, gradient_scale: 1.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub worst_block: String,
    pub worst_index: usize,
    pub checked: usize,
    /// Samples whose perturbation crossed a ReLU, `|x|` or clamp kink,
    /// where the derivative is undefined.
    pub skipped_kinks: usize,
}

fn rel_error(a: f64, n: f64, abs_tol: f64) -> f64 {
    let scale = a.abs().max(n.abs());
    if scale < abs_tol {
        0.0
    } else {
        (a - n).abs() / scale
    }
}

/// Compares the analytic gradient of the summed batch loss against central
/// differences on a seeded sample of weights from every block.
pub fn grad_check(
    params: &PredictorParams,
    batch: &[Example],
    focal: &FocalParams,
    cfg: &GradCheckConfig,
) -> Result<GradCheckReport> {
    if batch.is_empty() {
        return Err(Error::InvalidArgument("gradient check needs at least one example".into()));
    }
    let mut analytic = vec![0.0; params.flat().len()];
    for ex in batch {
        sequence_loss_and_grad(params, ex, focal, &mut analytic)?;
    }
    let (_, base_branches) = loss_with_branches(params, batch, focal)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut probe = params.clone();
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst_block: String::new(),
        worst_index: 0,
        checked: 0,
        skipped_kinks: 0,
    };
    for (name, range) in params.layout().blocks() {
        if range.is_empty() {
            continue;
        }
        for _ in 0..cfg.samples_per_block {
            let idx = rng.random_range(range.clone());
            let orig = params.flat()[idx];
            probe.flat_mut()[idx] = orig + cfg.step;
            let (plus, bp) = loss_with_branches(&probe, batch, focal)?;
            probe.flat_mut()[idx] = orig - cfg.step;
            let (minus, bm) = loss_with_branches(&probe, batch, focal)?;
            probe.flat_mut()[idx] = orig;
            if bp != base_branches || bm != base_branches {
                report.skipped_kinks += 1;
                continue;
            }
            let numeric = (plus - minus) / (2.0 * cfg.step);
            let err = rel_error(analytic[idx] * cfg.gradient_scale, numeric, cfg.abs_tol);
            report.checked += 1;
            if err > report.max_rel_error {
                report.max_rel_error = err;
                report.worst_block = name.to_string();
                report.worst_index = idx - range.start;
            }
        }
    }
    Ok(report)
}
