//! Training objectives: pixel L1, adversarial, perceptual, Gram-matrix and
//! identity losses, all differentiable through [`Var`].

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use s2i_tensor::{Binder, PadMode, ParamStore, Tensor, Var};

use crate::blocks::{lrelu, Conv2d};
use crate::error::{Error, Result};

/// Probability clamp used inside logarithms.
pub const PROB_EPS: f64 = 1e-7;

fn same_shape(a: &Var, b: &Var, what: &str) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::Shape(format!(
            "{what}: {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    Ok(())
}

/// Mean absolute difference over all elements.
pub fn l1_loss(generated: &Var, real: &Var) -> Result<Var> {
    same_shape(generated, real, "l1 loss")?;
    Ok(generated.sub(real).abs().mean())
}

fn log_prob(p: &Var) -> Var {
    p.clamp(PROB_EPS, 1.0 - PROB_EPS).ln()
}

/// `E[log d(real)] + E[log(1 − d(fake))]`, the quantity the discriminator
/// maximizes. Always ≤ 0.
pub fn gan_loss_d(d_real: &Var, d_fake: &Var) -> Var {
    let one = Var::constant(Tensor::scalar(1.0));
    log_prob(d_real)
        .mean()
        .add(&log_prob(&one.sub(d_fake)).mean())
}

/// Non-saturating generator loss `−E[log d(fake)]`.
pub fn gan_loss_g(d_fake: &Var) -> Var {
    log_prob(d_fake).mean().neg()
}

/// Fixed mapping from an image batch to an ordered list of feature taps.
pub trait FeatureExtractor {
    fn features(&self, x: &Var) -> Vec<Var>;

    fn num_taps(&self) -> usize;
}

/// Returns the input itself as the only tap.
#[derive(Clone, Copy, Debug, Default)]
pub struct IdentityExtractor;

impl FeatureExtractor for IdentityExtractor {
    fn features(&self, x: &Var) -> Vec<Var> {
        vec![x.clone()]
    }

    fn num_taps(&self) -> usize {
        1
    }
}

/// Fixed-seed random convolutional pyramid: stride-2 conv + leaky ReLU
/// stages, one tap after each stage.
#[derive(Clone, Debug)]
pub struct RandomPyramid {
    store: ParamStore,
    stages: Vec<Conv2d>,
    pub in_ch: usize,
}

impl RandomPyramid {
    pub fn new(in_ch: usize, widths: &[usize], seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let mut prev = in_ch;
        let stages = widths
            .iter()
            .enumerate()
            .map(|(i, &w)| {
                let c = Conv2d::new(&mut store, &mut rng, &format!("pyr{i}"), prev, w, 3, 2, PadMode::Reflect);
                prev = w;
                c
            })
            .collect();
        Self {
            store,
            stages,
            in_ch,
        }
    }

    /// The default 4-tap pyramid over RGB images.
    pub fn default_rgb() -> Self {
        Self::new(3, &[8, 16, 16, 16], 0x5eed)
    }

    /// Tap widths, in order.
    pub fn widths(&self) -> Vec<usize> {
        self.stages.iter().map(|s| s.out_ch).collect()
    }
}

impl FeatureExtractor for RandomPyramid {
    fn features(&self, x: &Var) -> Vec<Var> {
        let b = Binder::eval(&self.store);
        let mut h = x.clone();
        self.stages
            .iter()
            .map(|s| {
                h = lrelu(&s.forward(&b, &h));
                h.clone()
            })
            .collect()
    }

    fn num_taps(&self) -> usize {
        self.stages.len()
    }
}

/// Mean over taps of the root-mean-square feature difference.
pub fn perceptual_loss(generated: &Var, real: &Var, f: &dyn FeatureExtractor) -> Result<Var> {
    same_shape(generated, real, "perceptual loss")?;
    let fg = f.features(generated);
    let fr = f.features(real);
    let terms: Vec<Var> = fg
        .iter()
        .zip(&fr)
        .map(|(a, b)| a.sub(b).square().mean().sqrt())
        .collect();
    Ok(mean_of(&terms))
}

fn mean_of(terms: &[Var]) -> Var {
    let n = terms.len() as f64;
    let mut acc = terms[0].clone();
    for t in &terms[1..] {
        acc = acc.add(t);
    }
    acc.scale(1.0 / n)
}

/// Channel correlation `XᵀX / (h·w·C)` of `[N, C, H, W]` features, per
/// sample: `[N, C, C]`.
pub fn gram_matrix(features: &Var) -> Var {
    let s = features.shape();
    assert_eq!(s.len(), 4, "gram_matrix expects [N,C,H,W]");
    let (n, c, hw) = (s[0], s[1], s[2] * s[3]);
    let x = features.reshape(&[n, c, hw]);
    x.bmm(false, &x, true).scale(1.0 / (hw * c) as f64)
}

/// Per-tap weights `α_l` for the Gram loss.
#[derive(Clone, Debug, PartialEq)]
pub struct GramWeights(pub Vec<f64>);

impl GramWeights {
    pub fn uniform(taps: usize) -> Self {
        Self(vec![1.0 / taps as f64; taps])
    }
}

/// `(1/L) Σ_l α_l ‖M_l(G) − M_l(R)‖_F`, averaged over the batch.
pub fn gram_loss(
    generated: &Var,
    real: &Var,
    f: &dyn FeatureExtractor,
    weights: &GramWeights,
) -> Result<Var> {
    same_shape(generated, real, "gram loss")?;
    if weights.0.len() != f.num_taps() {
        return Err(Error::Config(format!(
            "{} gram weights for {} taps",
            weights.0.len(),
            f.num_taps()
        )));
    }
    if weights.0.iter().any(|&a| a < 0.0) {
        return Err(Error::Config("gram weights must be non-negative".into()));
    }
    let fg = f.features(generated);
    let fr = f.features(real);
    let terms: Vec<Var> = fg
        .iter()
        .zip(&fr)
        .zip(&weights.0)
        .map(|((a, b), &alpha)| {
            gram_matrix(a)
                .sub(&gram_matrix(b))
                .square()
                .sum_keep(&[1, 2])
                .sqrt()
                .mean()
                .scale(alpha)
        })
        .collect();
    Ok(mean_of(&terms))
}

/// Differentiable image → identity-embedding map.
pub trait Embedder {
    /// `[N, C, H, W]` → `[N, D]`.
    fn embed(&self, x: &Var) -> Var;

    fn dim(&self) -> usize;
}

/// Flattens each image; embedding width equals the pixel count.
#[derive(Clone, Copy, Debug)]
pub struct FlattenEmbedder {
    pub dim: usize,
}

impl Embedder for FlattenEmbedder {
    fn embed(&self, x: &Var) -> Var {
        let n = x.shape()[0];
        x.reshape(&[n, x.value().numel() / n])
    }

    fn dim(&self) -> usize {
        self.dim
    }
}

/// `λ · ‖η(refined) − η(real)‖₁`, averaged over the batch.
pub fn identity_loss(refined: &Var, real: &Var, embedder: &dyn Embedder, lambda: f64) -> Result<Var> {
    same_shape(refined, real, "identity loss")?;
    let (a, b) = (embedder.embed(refined), embedder.embed(real));
    if a.shape() != b.shape() || a.shape()[1] != embedder.dim() {
        return Err(Error::Shape(format!(
            "embedding widths differ: {:?} vs {:?} (embedder width {})",
            a.shape(),
            b.shape(),
            embedder.dim()
        )));
    }
    let n = a.shape()[0] as f64;
    Ok(a.sub(&b).abs().sum().scale(lambda / n))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn c(shape: &[usize], v: Vec<f64>) -> Var {
        Var::constant(Tensor::from_vec(shape, v))
    }

    #[test]
    fn l1_arithmetic() {
        let g = c(&[2], vec![0.5, 0.0]);
        let r = c(&[2], vec![0.0, 1.0]);
        assert_eq!(l1_loss(&g, &r).unwrap().item(), 0.75);
        let ones = Var::constant(Tensor::ones(&[1, 3, 4, 4]));
        let zeros = Var::constant(Tensor::zeros(&[1, 3, 4, 4]));
        assert_eq!(l1_loss(&ones, &zeros).unwrap().item(), 1.0);
        assert_eq!(l1_loss(&ones, &ones).unwrap().item(), 0.0);
        assert!(l1_loss(&ones, &c(&[1], vec![0.0])).is_err());
    }

    #[test]
    fn gan_arithmetic() {
        let half = c(&[1], vec![0.5]);
        assert!((gan_loss_d(&half, &half).item() - 2.0 * 0.5f64.ln()).abs() < 1e-12);
        let v = gan_loss_d(&c(&[2], vec![0.9, 0.9]), &c(&[2], vec![0.1, 0.1])).item();
        assert!((v - 2.0 * 0.9f64.ln()).abs() < 1e-12);
        assert!((gan_loss_g(&half).item() - 2f64.ln()).abs() < 1e-12);
        // perfect separation sits at the top of the range
        let near = gan_loss_d(&c(&[1], vec![1.0]), &c(&[1], vec![0.0])).item();
        assert!(near < 0.0 && near > -1e-6);
        assert!(gan_loss_g(&c(&[1], vec![1.0 - 1e-9])).item() < 1e-6);
        assert!(gan_loss_g(&c(&[1], vec![0.3])).item() > gan_loss_g(&c(&[1], vec![0.4])).item());
    }

    #[test]
    fn perceptual_rms_convention() {
        let g = Var::constant(Tensor::full(&[1, 1, 2, 2], 0.8));
        let r = Var::constant(Tensor::full(&[1, 1, 2, 2], 0.5));
        let v = perceptual_loss(&g, &r, &IdentityExtractor).unwrap().item();
        assert!((v - 0.3).abs() < 1e-12);
        assert_eq!(perceptual_loss(&r, &g, &IdentityExtractor).unwrap().item(), v);
    }

    #[test]
    fn gram_arithmetic() {
        assert_eq!(gram_matrix(&Var::constant(Tensor::zeros(&[1, 3, 2, 2]))).value().max_abs(), 0.0);
        let m = gram_matrix(&Var::constant(Tensor::full(&[1, 1, 3, 5], 0.7)));
        assert!((m.item() - 0.49).abs() < 1e-15);
        let g = Var::constant(Tensor::ones(&[1, 1, 3, 3]));
        let r = Var::constant(Tensor::zeros(&[1, 1, 3, 3]));
        let w = GramWeights(vec![1.0]);
        assert_eq!(gram_loss(&g, &r, &IdentityExtractor, &w).unwrap().item(), 1.0);
        let w2 = GramWeights(vec![2.0]);
        assert_eq!(gram_loss(&g, &r, &IdentityExtractor, &w2).unwrap().item(), 2.0);
        assert_eq!(gram_loss(&g, &g, &IdentityExtractor, &w).unwrap().item(), 0.0);
    }

    #[test]
    fn identity_loss_arithmetic() {
        let e = FlattenEmbedder { dim: 2 };
        let a = c(&[1, 1, 1, 2], vec![0.2, 0.9]);
        let b = c(&[1, 1, 1, 2], vec![0.1, 0.5]);
        let v = identity_loss(&a, &b, &e, 1.0).unwrap().item();
        assert!((v - 0.5).abs() < 1e-15);
        assert!((identity_loss(&a, &b, &e, 2.0).unwrap().item() - 1.0).abs() < 1e-15);
        assert_eq!(identity_loss(&a, &a, &e, 1.0).unwrap().item(), 0.0);
        let wrong = FlattenEmbedder { dim: 3 };
        assert!(identity_loss(&a, &b, &wrong, 1.0).is_err());
    }

    #[test]
    fn pyramid_is_deterministic() {
        let p = RandomPyramid::default_rgb();
        let q = RandomPyramid::default_rgb();
        let x = Var::constant(Tensor::full(&[1, 3, 16, 16], 0.4));
        let (a, b) = (p.features(&x), q.features(&x));
        assert_eq!(a.len(), 4);
        for (u, v) in a.iter().zip(&b) {
            assert_eq!(u.value(), v.value());
        }
        assert_eq!(a[3].shape(), &[1, 16, 1, 1]);
    }
}
