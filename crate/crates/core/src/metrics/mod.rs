//! Evaluation metrics and the report they are collected into.
//!
//! Distributional metrics use the fixed random feature pyramid from
//! [`crate::losses`] as their embedder, so absolute values are only
//! comparable between runs of this crate.

mod distribution;
mod image;
mod retrieval;

use std::collections::BTreeMap;
use std::path::Path;

use nalgebra::DMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use s2i_tensor::{Tensor, Var};

use crate::error::{Error, Result};
use crate::losses::{Embedder, FeatureExtractor};

pub use distribution::{fid, fid_from_moments, inception_score, kid, EmbeddingSet, FID_EPS};
pub use image::{lpips, psnr, ssim};
pub use retrieval::{mos_preferences, rank_gallery, top_k_hit_score};

/// Caveat attached to every report.
pub const EMBEDDER_NOTE: &str =
    "fid/kid/is/lpips use a fixed random feature pyramid, not Inception or VGG; values are not comparable to published numbers";

/// Metric name → value. Infinite values are written as the string `"inf"`.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    #[serde(with = "inf_map")]
    pub metrics: BTreeMap<String, f64>,
    pub fingerprint: String,
    pub timestamp: String,
    pub note: String,
}

mod inf_map {
    use std::collections::BTreeMap;

    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    #[derive(Serialize, Deserialize)]
    #[serde(untagged)]
    enum Value {
        Num(f64),
        Text(String),
    }

    pub fn serialize<S: Serializer>(m: &BTreeMap<String, f64>, s: S) -> Result<S::Ok, S::Error> {
        m.iter()
            .map(|(k, &v)| {
                let v = match v {
                    v if v == f64::INFINITY => Value::Text("inf".into()),
                    v if v == f64::NEG_INFINITY => Value::Text("-inf".into()),
                    v => Value::Num(v),
                };
                (k, v)
            })
            .collect::<BTreeMap<_, _>>()
            .serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<BTreeMap<String, f64>, D::Error> {
        BTreeMap::<String, Value>::deserialize(d)?
            .into_iter()
            .map(|(k, v)| match v {
                Value::Num(x) => Ok((k, x)),
                Value::Text(t) if t == "inf" => Ok((k, f64::INFINITY)),
                Value::Text(t) if t == "-inf" => Ok((k, f64::NEG_INFINITY)),
                Value::Text(t) => Err(serde::de::Error::custom(format!("bad metric value {t:?}"))),
            })
            .collect()
    }
}

impl MetricReport {
    pub fn new(fingerprint: impl Into<String>) -> Self {
        Self {
            metrics: BTreeMap::new(),
            fingerprint: fingerprint.into(),
            timestamp: chrono::Utc::now().to_rfc3339(),
            note: EMBEDDER_NOTE.into(),
        }
    }

    pub fn get(&self, name: &str) -> Option<f64> {
        self.metrics.get(name).copied()
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// JSON with the timestamp blanked, for comparing runs.
    pub fn canonical_json(&self) -> Result<String> {
        let mut r = self.clone();
        r.timestamp.clear();
        r.to_json()
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        crate::util::write_json(path, self)
    }

    pub fn read(path: &Path) -> Result<Self> {
        crate::util::read_json(path)
    }
}

/// Spatially mean-pooled feature taps, concatenated per image.
pub fn pooled_embeddings(images: &Tensor, extractor: &dyn FeatureExtractor) -> Result<EmbeddingSet> {
    if images.rank() != 4 {
        return Err(Error::Shape(format!("expected [N,C,H,W] images, got {:?}", images.shape())));
    }
    let n = images.dim(0);
    let taps = extractor.features(&Var::constant(images.clone()));
    let mut rows = vec![Vec::new(); n];
    for t in &taps {
        let v = t.value();
        let (c, hw) = (v.dim(1), v.dim(2) * v.dim(3));
        for (i, row) in rows.iter_mut().enumerate() {
            for ch in 0..c {
                let s = &v.data()[(i * c + ch) * hw..(i * c + ch + 1) * hw];
                row.push(s.iter().sum::<f64>() / hw as f64);
            }
        }
    }
    EmbeddingSet::from_rows(&rows)
}

/// Fixed random linear softmax head used as the IS classifier.
#[derive(Clone, Debug)]
pub struct RandomClassifier {
    weights: DMatrix<f64>,
}

impl RandomClassifier {
    pub fn new(dim: usize, classes: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let scale = 4.0 / (dim as f64).sqrt();
        Self {
            weights: DMatrix::from_fn(dim, classes, |_, _| {
                let z: f64 = StandardNormal.sample(&mut rng);
                z * scale
            }),
        }
    }

    /// Row-stochastic class probabilities for standardized embeddings.
    pub fn probabilities(&self, emb: &EmbeddingSet) -> Result<DMatrix<f64>> {
        if emb.dim() != self.weights.nrows() {
            return Err(Error::Shape(format!("classifier expects width {}, got {}", self.weights.nrows(), emb.dim())));
        }
        let logits = &emb.data * &self.weights;
        Ok(DMatrix::from_fn(logits.nrows(), logits.ncols(), |i, j| {
            let row = logits.row(i);
            let m = row.max();
            let z: f64 = row.iter().map(|v| (v - m).exp()).sum();
            (logits[(i, j)] - m).exp() / z
        }))
    }
}

pub const IS_CLASSES: usize = 10;

/// Inputs to [`evaluate_images`]: generated and real `[N, 3, H, W]` images
/// paired by index.
pub struct EvalInputs<'a> {
    pub fake: &'a Tensor,
    pub real: &'a Tensor,
    /// Identity of each pair, enabling the top-3 hit score.
    pub labels: Option<&'a [String]>,
    pub identity: Option<&'a dyn Embedder>,
    /// Labelled real images to rank against; defaults to `real`.
    pub gallery: Option<(&'a Tensor, &'a [String])>,
    pub extractor: &'a dyn FeatureExtractor,
}

fn rows_of(t: &Tensor) -> Result<EmbeddingSet> {
    let n = t.dim(0);
    let d = t.numel() / n.max(1);
    EmbeddingSet::new(DMatrix::from_row_slice(n, d, t.data()))
}

/// All metrics that the inputs support; distributional metrics need at
/// least two images.
pub fn evaluate_images(inputs: &EvalInputs, fingerprint: &str) -> Result<MetricReport> {
    let (fake, real) = (inputs.fake, inputs.real);
    if fake.shape() != real.shape() || fake.rank() != 4 || fake.dim(0) == 0 {
        return Err(Error::Shape(format!("evaluation needs matching [N,3,H,W] sets, got {:?} and {:?}", fake.shape(), real.shape())));
    }
    let n = fake.dim(0);
    let mut report = MetricReport::new(fingerprint);
    let pairs: Vec<(Tensor, Tensor)> = (0..n).map(|i| (fake.slice_batch(i, 1), real.slice_batch(i, 1))).collect();
    let mut ssim_sum = 0.0;
    let mut psnr_sum = 0.0;
    for (f, r) in &pairs {
        ssim_sum += ssim(f, r)?;
        psnr_sum += psnr(f, r)?;
    }
    report.metrics.insert("ssim".into(), ssim_sum / n as f64);
    report.metrics.insert("psnr".into(), psnr_sum / n as f64);
    let taps = inputs.extractor.num_taps();
    report
        .metrics
        .insert("lpips".into(), lpips(fake, real, inputs.extractor, &vec![1.0 / taps as f64; taps])?);
    if n >= 2 {
        let ef = pooled_embeddings(fake, inputs.extractor)?;
        let er = pooled_embeddings(real, inputs.extractor)?;
        report.metrics.insert("fid".into(), fid(&er, &ef)?);
        report.metrics.insert("kid".into(), kid(&er, &ef)?);
        let (mu, sd) = {
            let m = er.data.row_mean();
            let v = er.data.row_variance().map(|v| v.sqrt().max(1e-8));
            (m, v)
        };
        let standardized = DMatrix::from_fn(n, ef.dim(), |i, j| (ef.data[(i, j)] - mu[j]) / sd[j]);
        let clf = RandomClassifier::new(ef.dim(), IS_CLASSES, 0x15);
        let probs = clf.probabilities(&EmbeddingSet::new(standardized)?)?;
        report.metrics.insert("is".into(), inception_score(&probs)?);
    }
    if let (Some(labels), Some(eta)) = (inputs.labels, inputs.identity) {
        let q = rows_of(eta.embed(&Var::constant(fake.clone())).value())?.with_labels(labels.to_vec())?;
        let (gi, gl) = inputs.gallery.unwrap_or((real, labels));
        let g = rows_of(eta.embed(&Var::constant(gi.clone())).value())?.with_labels(gl.to_vec())?;
        report.metrics.insert("top3_hit".into(), top_k_hit_score(&q, &g, 3)?);
    }
    Ok(report)
}
