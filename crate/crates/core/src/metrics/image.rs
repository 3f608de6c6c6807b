//! Paired image-quality metrics.

use s2i_tensor::{par, Tensor, Var};

use crate::error::{Error, Result};
use crate::losses::FeatureExtractor;

const SSIM_WINDOW: usize = 11;
const SSIM_SIGMA: f64 = 1.5;
const K1: f64 = 0.01;
const K2: f64 = 0.03;

fn same_shape(a: &Tensor, b: &Tensor, what: &str) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::Shape(format!("{what}: {:?} vs {:?}", a.shape(), b.shape())));
    }
    if a.rank() < 2 {
        return Err(Error::Shape(format!("{what}: expected an image, got {:?}", a.shape())));
    }
    Ok(())
}

fn window() -> Vec<f64> {
    let r = (SSIM_WINDOW / 2) as f64;
    let mut k: Vec<f64> = (0..SSIM_WINDOW)
        .map(|i| {
            let d = i as f64 - r;
            (-d * d / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp()
        })
        .collect();
    let s: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= s);
    k
}

/// Separable "valid" Gaussian filtering of an `h × w` plane.
fn filter_valid(p: &[f64], h: usize, w: usize, k: &[f64]) -> Vec<f64> {
    let n = k.len();
    let (oh, ow) = (h - n + 1, w - n + 1);
    let mut tmp = vec![0.0; h * ow];
    for y in 0..h {
        for x in 0..ow {
            tmp[y * ow + x] = k.iter().enumerate().map(|(i, kv)| kv * p[y * w + x + i]).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = k.iter().enumerate().map(|(i, kv)| kv * tmp[(y + i) * ow + x]).sum();
        }
    }
    out
}

fn ssim_formula(ma: f64, mb: f64, va: f64, vb: f64, cov: f64) -> f64 {
    let (c1, c2) = (K1 * K1, K2 * K2);
    ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2))
}

/// Mean SSIM map of one plane.
fn ssim_plane(a: &[f64], b: &[f64], h: usize, w: usize) -> f64 {
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        let n = a.len() as f64;
        let ma = a.iter().sum::<f64>() / n;
        let mb = b.iter().sum::<f64>() / n;
        let va = a.iter().map(|v| (v - ma).powi(2)).sum::<f64>() / n;
        let vb = b.iter().map(|v| (v - mb).powi(2)).sum::<f64>() / n;
        let cov = a.iter().zip(b).map(|(x, y)| (x - ma) * (y - mb)).sum::<f64>() / n;
        return ssim_formula(ma, mb, va, vb, cov);
    }
    let k = window();
    let prod = |f: &dyn Fn(f64, f64) -> f64| -> Vec<f64> { a.iter().zip(b).map(|(&x, &y)| f(x, y)).collect() };
    let mu_a = filter_valid(a, h, w, &k);
    let mu_b = filter_valid(b, h, w, &k);
    let aa = filter_valid(&prod(&|x, _| x * x), h, w, &k);
    let bb = filter_valid(&prod(&|_, y| y * y), h, w, &k);
    let ab = filter_valid(&prod(&|x, y| x * y), h, w, &k);
    let n = mu_a.len();
    (0..n)
        .map(|i| {
            let (ma, mb) = (mu_a[i], mu_b[i]);
            ssim_formula(ma, mb, aa[i] - ma * ma, bb[i] - mb * mb, ab[i] - ma * mb)
        })
        .sum::<f64>()
        / n as f64
}

/// Gaussian-windowed SSIM averaged over every channel plane of `[.., H, W]`
/// images.
pub fn ssim(a: &Tensor, b: &Tensor) -> Result<f64> {
    same_shape(a, b, "ssim")?;
    let s = a.shape();
    let (h, w) = (s[s.len() - 2], s[s.len() - 1]);
    let planes = a.numel() / (h * w);
    if planes == 0 || h * w == 0 {
        return Err(Error::Shape("ssim on an empty image".into()));
    }
    if a.data() == b.data() {
        return Ok(1.0);
    }
    let vals = par::map_range(planes, |i| {
        let r = i * h * w..(i + 1) * h * w;
        ssim_plane(&a.data()[r.clone()], &b.data()[r], h, w)
    });
    Ok(vals.iter().sum::<f64>() / planes as f64)
}

/// `10·log10(1 / MSE)` for unit dynamic range; `+∞` on identical inputs.
pub fn psnr(a: &Tensor, b: &Tensor) -> Result<f64> {
    same_shape(a, b, "psnr")?;
    let mse = a.zip_map(b, |x, y| (x - y) * (x - y)).mean();
    if mse == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (1.0 / mse).log10())
}

/// Weighted sum over taps of the spatially averaged squared distance
/// between channel-normalized features.
pub fn lpips(a: &Tensor, b: &Tensor, extractor: &dyn FeatureExtractor, weights: &[f64]) -> Result<f64> {
    same_shape(a, b, "lpips")?;
    if a.rank() != 4 {
        return Err(Error::Shape(format!("lpips expects [N,C,H,W], got {:?}", a.shape())));
    }
    if weights.len() != extractor.num_taps() {
        return Err(Error::Validation(format!(
            "{} lpips weights for {} taps",
            weights.len(),
            extractor.num_taps()
        )));
    }
    if a.data() == b.data() {
        return Ok(0.0);
    }
    let fa = extractor.features(&Var::constant(a.clone()));
    let fb = extractor.features(&Var::constant(b.clone()));
    let mut total = 0.0;
    for ((x, y), w) in fa.iter().zip(&fb).zip(weights) {
        let (x, y) = (x.value(), y.value());
        let s = x.shape();
        let (n, c, hw) = (s[0], s[1], s[2] * s[3]);
        let mut acc = 0.0;
        for i in 0..n {
            for p in 0..hw {
                let at = |t: &Tensor, ch: usize| t.data()[(i * c + ch) * hw + p];
                let na = (0..c).map(|ch| at(x, ch).powi(2)).sum::<f64>().sqrt() + 1e-10;
                let nb = (0..c).map(|ch| at(y, ch).powi(2)).sum::<f64>().sqrt() + 1e-10;
                acc += (0..c).map(|ch| (at(x, ch) / na - at(y, ch) / nb).powi(2)).sum::<f64>();
            }
        }
        total += w * acc / (n * hw) as f64;
    }
    Ok(total)
}
