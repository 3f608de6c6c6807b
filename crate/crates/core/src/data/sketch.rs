//! Line-sketch synthesis by extended difference-of-Gaussians thresholding.

use serde::{Deserialize, Serialize};

use s2i_tensor::Tensor;

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SketchParams {
    /// Inner Gaussian scale.
    pub sigma: f64,
    /// Outer scale multiplier (outer σ = k·σ).
    pub k: f64,
    /// Weight of the outer Gaussian in the difference.
    pub tau: f64,
    /// Sharpness of the soft threshold below zero response.
    pub phi: f64,
}

impl Default for SketchParams {
    fn default() -> Self {
        Self {
            sigma: 1.0,
            k: 1.6,
            tau: 0.8,
            phi: 10.0,
        }
    }
}

/// Normalized 1-D Gaussian taps with radius `ceil(3σ)`.
pub fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let r = (3.0 * sigma).ceil() as isize;
    let mut k: Vec<f64> = (-r..=r)
        .map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let s: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= s);
    k
}

/// Separable Gaussian blur of an `H × W` plane with edge replication.
pub fn gaussian_blur(plane: &[f64], h: usize, w: usize, sigma: f64) -> Vec<f64> {
    let k = gaussian_kernel(sigma);
    let r = (k.len() / 2) as isize;
    let clamp = |v: isize, n: usize| v.clamp(0, n as isize - 1) as usize;
    let mut tmp = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            tmp[y * w + x] = k
                .iter()
                .enumerate()
                .map(|(i, kv)| kv * plane[y * w + clamp(x as isize + i as isize - r, w)])
                .sum();
        }
    }
    let mut out = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            out[y * w + x] = k
                .iter()
                .enumerate()
                .map(|(i, kv)| kv * tmp[clamp(y as isize + i as isize - r, h) * w + x])
                .sum();
        }
    }
    out
}

/// Rec. 601 luminance of a `[C, H, W]` image (1 or 3 channels).
pub fn luminance(img: &Tensor) -> Result<Vec<f64>> {
    if img.rank() != 3 {
        return Err(Error::Shape(format!("expected [C,H,W], got {:?}", img.shape())));
    }
    let plane = img.dim(1) * img.dim(2);
    let d = img.data();
    match img.dim(0) {
        1 => Ok(d.to_vec()),
        3 => Ok((0..plane)
            .map(|i| 0.299 * d[i] + 0.587 * d[plane + i] + 0.114 * d[2 * plane + i])
            .collect()),
        c => Err(Error::Shape(format!("unsupported channel count {c}"))),
    }
}

/// Renders a single-channel line sketch of `photo` (`[C, H, W]`, values in
/// `[0, 1]`): white where the DoG response is non-negative, a tanh ramp to
/// black where it dips below zero.
pub fn synthesize_sketch(photo: &Tensor, params: &SketchParams) -> Result<Tensor> {
    if !photo.is_finite() {
        return Err(Error::Validation("photo contains non-finite values".into()));
    }
    if params.sigma <= 0.0 || params.k <= 0.0 {
        return Err(Error::Config("sketch sigma and k must be positive".into()));
    }
    let lum = luminance(photo)?;
    let (h, w) = (photo.dim(1), photo.dim(2));
    let g1 = gaussian_blur(&lum, h, w, params.sigma);
    let g2 = gaussian_blur(&lum, h, w, params.k * params.sigma);
    let out = g1
        .iter()
        .zip(&g2)
        .map(|(a, b)| {
            let d = a - params.tau * b;
            let t = if d >= 0.0 { 1.0 } else { 1.0 + (params.phi * d).tanh() };
            t.clamp(0.0, 1.0)
        })
        .collect();
    Ok(Tensor::from_vec(&[1, h, w], out))
}
