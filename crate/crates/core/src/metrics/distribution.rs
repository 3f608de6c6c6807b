//! Distribution-level metrics over embedding sets.

use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::error::{Error, Result};

/// Covariance regularization added to both sides of the Fréchet distance.
pub const FID_EPS: f64 = 1e-6;

/// `n × d` embeddings with optional identity labels.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingSet {
    pub data: DMatrix<f64>,
    pub labels: Option<Vec<String>>,
}

impl EmbeddingSet {
    pub fn new(data: DMatrix<f64>) -> Result<Self> {
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::Validation("embedding set contains non-finite values".into()));
        }
        Ok(Self { data, labels: None })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let d = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != d) {
            return Err(Error::Shape("embedding rows differ in width".into()));
        }
        Self::new(DMatrix::from_fn(rows.len(), d, |i, j| rows[i][j]))
    }

    pub fn with_labels(mut self, labels: Vec<String>) -> Result<Self> {
        if labels.len() != self.len() {
            return Err(Error::Shape(format!("{} labels for {} embeddings", labels.len(), self.len())));
        }
        self.labels = Some(labels);
        Ok(self)
    }

    pub fn len(&self) -> usize {
        self.data.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.data.ncols()
    }

    pub fn mean(&self) -> DVector<f64> {
        self.data.row_mean().transpose()
    }

    /// Unbiased sample covariance.
    pub fn covariance(&self) -> DMatrix<f64> {
        let mu = self.data.row_mean();
        let mut c = self.data.clone();
        for mut row in c.row_iter_mut() {
            row -= &mu;
        }
        c.transpose() * &c / (self.len() as f64 - 1.0)
    }
}

fn require_pair(a: &EmbeddingSet, b: &EmbeddingSet, what: &str) -> Result<()> {
    if a.len() < 2 || b.len() < 2 {
        return Err(Error::Validation(format!(
            "{what} needs at least two embeddings per set, got {} and {}",
            a.len(),
            b.len()
        )));
    }
    if a.dim() != b.dim() {
        return Err(Error::Shape(format!("{what}: embedding widths {} and {}", a.dim(), b.dim())));
    }
    Ok(())
}

fn sym_sqrt(m: &DMatrix<f64>) -> DMatrix<f64> {
    let e = SymmetricEigen::new(m.clone());
    let d = DMatrix::from_diagonal(&e.eigenvalues.map(|v| v.max(0.0).sqrt()));
    &e.eigenvectors * d * e.eigenvectors.transpose()
}

/// Fréchet distance between two Gaussians.
pub fn fid_from_moments(mu1: &DVector<f64>, s1: &DMatrix<f64>, mu2: &DVector<f64>, s2: &DMatrix<f64>) -> Result<f64> {
    let d = mu1.len();
    if mu2.len() != d || s1.shape() != (d, d) || s2.shape() != (d, d) {
        return Err(Error::Shape("moment dimensions disagree".into()));
    }
    let reg = DMatrix::<f64>::identity(d, d) * FID_EPS;
    let (s1, s2) = (s1 + &reg, s2 + &reg);
    let r = sym_sqrt(&s1);
    let mut m = &r * &s2 * &r;
    m = (&m + m.transpose()) * 0.5;
    let cross: f64 = SymmetricEigen::new(m).eigenvalues.iter().map(|v| v.max(0.0).sqrt()).sum();
    Ok((mu1 - mu2).norm_squared() + s1.trace() + s2.trace() - 2.0 * cross)
}

pub fn fid(real: &EmbeddingSet, fake: &EmbeddingSet) -> Result<f64> {
    require_pair(real, fake, "fid")?;
    fid_from_moments(&real.mean(), &real.covariance(), &fake.mean(), &fake.covariance())
}

fn poly_kernel(x: &DMatrix<f64>, y: &DMatrix<f64>) -> DMatrix<f64> {
    let d = x.ncols() as f64;
    (x * y.transpose()).map(|v| (v / d + 1.0).powi(3))
}

fn off_diagonal_mean(k: &DMatrix<f64>) -> f64 {
    let n = k.nrows() as f64;
    (k.sum() - k.trace()) / (n * (n - 1.0))
}

/// Unbiased MMD² with the cubic polynomial kernel.
pub fn kid(real: &EmbeddingSet, fake: &EmbeddingSet) -> Result<f64> {
    require_pair(real, fake, "kid")?;
    let (x, y) = (&real.data, &fake.data);
    Ok(off_diagonal_mean(&poly_kernel(x, x)) + off_diagonal_mean(&poly_kernel(y, y))
        - 2.0 * poly_kernel(x, y).mean())
}

/// `exp(mean KL(p(y|x) ‖ p(y)))` over the rows of a probability matrix.
pub fn inception_score(probs: &DMatrix<f64>) -> Result<f64> {
    if probs.nrows() == 0 || probs.ncols() == 0 {
        return Err(Error::Validation("inception score needs a non-empty probability matrix".into()));
    }
    for (i, row) in probs.row_iter().enumerate() {
        if row.iter().any(|&p| !(0.0..=1.0 + 1e-12).contains(&p)) || (row.sum() - 1.0).abs() > 1e-6 {
            return Err(Error::Validation(format!("row {i} is not a probability distribution")));
        }
    }
    let marginal = probs.row_mean();
    let kl: f64 = probs
        .row_iter()
        .map(|row| {
            row.iter()
                .zip(marginal.iter())
                .filter(|(p, _)| **p > 0.0)
                .map(|(p, m)| p * (p / m).ln())
                .sum::<f64>()
        })
        .sum::<f64>()
        / probs.nrows() as f64;
    Ok(kl.exp())
}
