//! Small helpers shared by the training loops.

use std::path::{Path, PathBuf};

use rand::seq::index::sample;
use rand::Rng;
use serde::Serialize;
use sha2::{Digest, Sha256};

use s2i_tensor::{ParamStore, Tensor};

use crate::error::{Error, Result};

/// Rows `idx` of a `[N, ...]` tensor, in the given order.
pub fn gather(t: &Tensor, idx: &[usize]) -> Tensor {
    let parts: Vec<Tensor> = idx.iter().map(|&i| t.slice_batch(i, 1)).collect();
    Tensor::cat_batch(&parts)
}

/// Minibatch indices: everything when the set fits, otherwise a sorted
/// sample without replacement.
pub fn batch_indices(n: usize, batch: usize, rng: &mut impl Rng) -> Vec<usize> {
    if n <= batch {
        return (0..n).collect();
    }
    let mut v = sample(rng, n, batch).into_vec();
    v.sort_unstable();
    v
}

/// Lower-case hex SHA-256 of a value's JSON form, truncated to 16 chars.
pub fn fingerprint<T: Serialize>(value: &T) -> String {
    let json = serde_json::to_vec(value).expect("config serializes");
    hex16(&json)
}

pub fn hex16(bytes: &[u8]) -> String {
    Sha256::digest(bytes)
        .iter()
        .take(8)
        .map(|b| format!("{b:02x}"))
        .collect()
}

pub fn ensure_finite(stage: &str, step: usize, name: &str, value: f64) -> Result<()> {
    if value.is_finite() {
        Ok(())
    } else {
        Err(Error::Divergence {
            stage: stage.to_string(),
            step,
            detail: format!("{name} loss became {value}"),
        })
    }
}

pub fn epoch_path(dir: &Path, epoch: usize) -> PathBuf {
    dir.join(format!("epoch_{epoch}.ckpt"))
}

/// Highest `k` among `epoch_k.ckpt` files in `dir`.
pub fn latest_epoch(dir: &Path) -> Option<usize> {
    std::fs::read_dir(dir)
        .ok()?
        .filter_map(|e| {
            let name = e.ok()?.file_name().into_string().ok()?;
            name.strip_prefix("epoch_")?
                .strip_suffix(".ckpt")?
                .parse::<usize>()
                .ok()
        })
        .max()
}

/// Merges `other` into `store` with `prefix` prepended to every name.
pub fn merge_prefixed(store: &mut ParamStore, other: &ParamStore, prefix: &str) {
    for (k, v) in other.iter() {
        store.insert(format!("{prefix}{k}"), v.clone());
    }
}

/// Entries of `store` under `prefix`, with the prefix stripped.
pub fn strip_prefixed(store: &ParamStore, prefix: &str) -> ParamStore {
    let mut out = ParamStore::new();
    for (k, v) in store.iter() {
        if let Some(rest) = k.strip_prefix(prefix) {
            out.insert(rest.to_string(), v.clone());
        }
    }
    out
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    if let Some(p) = path.parent() {
        std::fs::create_dir_all(p).map_err(|e| Error::io(p, e))?;
    }
    let s = serde_json::to_string_pretty(value)?;
    std::fs::write(path, s).map_err(|e| Error::io(path, e))
}

pub fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let s = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_str(&s)?)
}
