//! Dataset manifests and deterministic train/test splits.

use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One line of a manifest file.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub sketch: PathBuf,
    pub photo: PathBuf,
    pub id: String,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetManifest {
    pub entries: Vec<ManifestEntry>,
    pub split_seed: u64,
    pub split_ratio: f64,
}

impl DatasetManifest {
    pub fn new(entries: Vec<ManifestEntry>) -> Self {
        Self {
            entries,
            split_seed: 0,
            split_ratio: 0.9,
        }
    }

    /// Reads newline-delimited JSON; relative paths resolve against the
    /// manifest's directory.
    pub fn read(path: &Path) -> Result<Self> {
        let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let base = path.parent().unwrap_or(Path::new("."));
        let mut entries = Vec::new();
        for (i, line) in BufReader::new(file).lines().enumerate() {
            let line = line.map_err(|e| Error::io(path, e))?;
            if line.trim().is_empty() {
                continue;
            }
            let mut e: ManifestEntry = serde_json::from_str(&line).map_err(|err| {
                Error::Validation(format!("{}:{}: {err}", path.display(), i + 1))
            })?;
            if e.id.is_empty() {
                return Err(Error::Validation(format!(
                    "{}:{}: empty identity id",
                    path.display(),
                    i + 1
                )));
            }
            if e.sketch.is_relative() {
                e.sketch = base.join(&e.sketch);
            }
            if e.photo.is_relative() {
                e.photo = base.join(&e.photo);
            }
            entries.push(e);
        }
        Ok(Self::new(entries))
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        for e in &self.entries {
            writeln!(f, "{}", serde_json::to_string(e)?).map_err(|err| Error::io(path, err))?;
        }
        Ok(())
    }
}

/// Number of training items for `n` entries at `ratio` (floored).
pub fn train_count(n: usize, ratio: f64) -> usize {
    (ratio * n as f64 + 1e-9).floor() as usize
}

/// Seeded shuffle, then the first `floor(ratio·N)` entries train.
pub fn split_dataset<T: Clone>(items: &[T], ratio: f64, seed: u64) -> Result<(Vec<T>, Vec<T>)> {
    if !(ratio > 0.0 && ratio < 1.0) {
        return Err(Error::Config(format!("split ratio {ratio} outside (0, 1)")));
    }
    if items.len() < 2 {
        return Err(Error::Validation(format!(
            "need at least 2 entries to split, got {}",
            items.len()
        )));
    }
    let n_train = train_count(items.len(), ratio);
    if n_train == 0 {
        return Err(Error::Config(format!(
            "ratio {ratio} leaves no training entries out of {}",
            items.len()
        )));
    }
    let mut order: Vec<usize> = (0..items.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let train = order[..n_train].iter().map(|&i| items[i].clone()).collect();
    let test = order[n_train..].iter().map(|&i| items[i].clone()).collect();
    Ok((train, test))
}

pub fn split_manifest(m: &DatasetManifest) -> Result<(Vec<ManifestEntry>, Vec<ManifestEntry>)> {
    split_dataset(&m.entries, m.split_ratio, m.split_seed)
}
