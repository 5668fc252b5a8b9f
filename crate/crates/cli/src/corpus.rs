//! On-disk planted corpus: `corpus.json` plus one directory of tensors per
//! sequence. Per-head matrices are stacked along rows (head-major).

use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use dhsa::harness::{PlantedCorpusSpec, PlantedSequence};
use dhsa::labeling::AttentionMatrix;
use dhsa::tensor::{read_dht, write_dht};
use dhsa::{BoundarySet, Matrix, TokenSequence};
use serde::{Deserialize, Serialize};

pub const MANIFEST: &str = "corpus.json";

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub spec: PlantedCorpusSpec,
    pub sequences: Vec<SequenceEntry>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SequenceEntry {
    pub id: usize,
    pub dir: String,
    pub boundaries: BoundarySet,
}

pub struct Corpus {
    pub spec: PlantedCorpusSpec,
    pub sequences: Vec<PlantedSequence>,
}

fn seq_dir_name(i: usize) -> String {
    format!("seq_{i:04}")
}

fn stack(mats: &[&Matrix]) -> Result<Matrix> {
    let cols = mats[0].cols();
    let rows = mats.iter().map(|m| m.rows()).sum();
    let data = mats.iter().flat_map(|m| m.data().iter().copied()).collect();
    Ok(Matrix::from_vec(rows, cols, data)?)
}

fn unstack(m: &Matrix, parts: usize) -> Result<Vec<Matrix>> {
    if parts == 0 || !m.rows().is_multiple_of(parts) {
        bail!("{} rows do not split into {parts} heads", m.rows());
    }
    let rows = m.rows() / parts;
    let width = rows * m.cols();
    m.data()
        .chunks(width)
        .map(|c| Ok(Matrix::from_vec(rows, m.cols(), c.to_vec())?))
        .collect()
}

fn write_tensor(path: &Path, m: &Matrix) -> Result<()> {
    let mut w = BufWriter::new(File::create(path).with_context(|| format!("creating {}", path.display()))?);
    write_dht(m, &mut w)?;
    w.flush()?;
    Ok(())
}

fn read_tensor(path: &Path) -> Result<Matrix> {
    let r = BufReader::new(File::open(path).with_context(|| format!("opening {}", path.display()))?);
    read_dht(r).with_context(|| format!("reading {}", path.display()))
}

pub fn write_corpus(dir: &Path, spec: &PlantedCorpusSpec, seqs: &[PlantedSequence]) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut entries = Vec::with_capacity(seqs.len());
    for (i, s) in seqs.iter().enumerate() {
        let name = seq_dir_name(i);
        let sd = dir.join(&name);
        fs::create_dir_all(&sd)?;
        write_tensor(&sd.join("attention.dht"), s.attention.matrix())?;
        let q: Vec<&Matrix> = s.heads.iter().map(|h| &h.queries).collect();
        let k: Vec<&Matrix> = s.heads.iter().map(|h| &h.keys).collect();
        let v: Vec<&Matrix> = s.heads.iter().map(|h| &h.values).collect();
        write_tensor(&sd.join("queries.dht"), &stack(&q)?)?;
        write_tensor(&sd.join("keys.dht"), &stack(&k)?)?;
        write_tensor(&sd.join("values.dht"), &stack(&v)?)?;
        entries.push(SequenceEntry { id: i, dir: name, boundaries: s.boundaries.clone() });
    }
    let manifest = Manifest { spec: *spec, sequences: entries };
    fs::write(dir.join(MANIFEST), serde_json::to_string_pretty(&manifest)? + "\n")?;
    Ok(())
}

pub fn manifest_path(dir: &Path) -> PathBuf {
    dir.join(MANIFEST)
}

pub fn read_corpus(dir: &Path) -> Result<Corpus> {
    let path = manifest_path(dir);
    let text = fs::read_to_string(&path).with_context(|| format!("reading {}", path.display()))?;
    let manifest: Manifest = serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
    let heads = manifest.spec.heads;
    let mut sequences = Vec::with_capacity(manifest.sequences.len());
    for e in manifest.sequences {
        let sd = dir.join(&e.dir);
        let attention = AttentionMatrix::new(read_tensor(&sd.join("attention.dht"))?)?;
        let q = unstack(&read_tensor(&sd.join("queries.dht"))?, heads)?;
        let k = unstack(&read_tensor(&sd.join("keys.dht"))?, heads)?;
        let v = unstack(&read_tensor(&sd.join("values.dht"))?, heads)?;
        let heads = q
            .into_iter()
            .zip(k)
            .zip(v)
            .map(|((q, k), v)| Ok(TokenSequence::new(q, k, v)?))
            .collect::<Result<Vec<_>>>()?;
        if e.boundaries.seq_len() != attention.len() {
            bail!("sequence {}: boundaries cover {} tokens, attention has {}", e.id, e.boundaries.seq_len(), attention.len());
        }
        sequences.push(PlantedSequence { heads, boundaries: e.boundaries, attention });
    }
    Ok(Corpus { spec: manifest.spec, sequences })
}
