//! Differentiable building blocks shared by every network in the pipeline.

use rand::Rng;

use s2i_tensor::{Binder, PadMode, ParamStore, Tensor, Var};

use crate::error::{Error, Result};

pub const LEAKY_SLOPE: f64 = 0.2;

pub fn lrelu(x: &Var) -> Var {
    x.leaky_relu(LEAKY_SLOPE)
}

fn he_std(fan_in: usize) -> f64 {
    (2.0 / ((1.0 + LEAKY_SLOPE * LEAKY_SLOPE) * fan_in as f64)).sqrt()
}

fn check_channels(x: &Var, expected: usize, what: &str) -> Result<()> {
    if x.shape().len() != 4 {
        return Err(Error::Shape(format!("{what}: expected [N,C,H,W], got {:?}", x.shape())));
    }
    if x.shape()[1] != expected {
        return Err(Error::Shape(format!(
            "{what}: expected {expected} channels, got {}",
            x.shape()[1]
        )));
    }
    Ok(())
}

/// 2-D convolution with "same"-style padding (`k / 2`) and optional stride.
#[derive(Clone, Debug)]
pub struct Conv2d {
    pub weight: String,
    pub bias: String,
    pub in_ch: usize,
    pub out_ch: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad_mode: PadMode,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        rng: &mut impl Rng,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        pad_mode: PadMode,
    ) -> Self {
        let fan_in = in_ch * kernel * kernel;
        let weight = format!("{name}.weight");
        let bias = format!("{name}.bias");
        store.insert(
            weight.clone(),
            Tensor::randn(&[out_ch, in_ch, kernel, kernel], he_std(fan_in), rng),
        );
        store.insert(bias.clone(), Tensor::zeros(&[out_ch]));
        Self {
            weight,
            bias,
            in_ch,
            out_ch,
            kernel,
            stride,
            pad_mode,
        }
    }

    pub fn forward(&self, b: &Binder, x: &Var) -> Var {
        let w = b.param(&self.weight);
        self.forward_with_weight(b, x, &w)
    }

    /// Same convolution with a caller-supplied (e.g. demodulated) weight.
    pub fn forward_with_weight(&self, b: &Binder, x: &Var, w: &Var) -> Var {
        let bias = b.param(&self.bias).reshape(&[1, self.out_ch, 1, 1]);
        x.pad2d(self.kernel / 2, self.pad_mode)
            .conv2d(w, self.stride)
            .add(&bias)
    }

    pub fn try_forward(&self, b: &Binder, x: &Var) -> Result<Var> {
        check_channels(x, self.in_ch, &self.weight)?;
        Ok(self.forward(b, x))
    }

    /// Weight scaled to unit L2 norm per output filter.
    pub fn demodulated_weight(&self, b: &Binder) -> Var {
        let w = b.param(&self.weight);
        let norm = w.square().sum_keep(&[1, 2, 3]).add_scalar(1e-8).sqrt();
        w.div(&norm)
    }
}

/// Fully connected layer on `[N, in]` inputs.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: String,
    pub bias: String,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new(store: &mut ParamStore, rng: &mut impl Rng, name: &str, in_dim: usize, out_dim: usize) -> Self {
        let weight = format!("{name}.weight");
        let bias = format!("{name}.bias");
        store.insert(
            weight.clone(),
            Tensor::randn(&[in_dim, out_dim], (1.0 / in_dim as f64).sqrt(), rng),
        );
        store.insert(bias.clone(), Tensor::zeros(&[out_dim]));
        Self {
            weight,
            bias,
            in_dim,
            out_dim,
        }
    }

    pub fn forward(&self, b: &Binder, x: &Var) -> Var {
        x.matmul(&b.param(&self.weight))
            .add(&b.param(&self.bias).reshape(&[1, self.out_dim]))
    }
}

/// Static normalized pixel-coordinate grid.
#[derive(Clone, Debug, PartialEq)]
pub struct CoordinateMap {
    /// `[1, 2, n_y, n_x]`; channel 0 is x (column), channel 1 is y (row).
    pub tensor: Tensor,
}

fn linspace(n: usize, i: usize) -> f64 {
    if n == 1 {
        0.0
    } else {
        -1.0 + 2.0 * i as f64 / (n - 1) as f64
    }
}

/// Coordinates in `[-1, 1]` for an `n_x`-wide, `n_y`-tall feature map.
pub fn make_coordinate_map(n_x: usize, n_y: usize) -> Result<CoordinateMap> {
    if n_x == 0 || n_y == 0 {
        return Err(Error::Validation(format!(
            "coordinate map needs positive dims, got {n_x}x{n_y}"
        )));
    }
    let mut t = Tensor::zeros(&[1, 2, n_y, n_x]);
    for y in 0..n_y {
        for x in 0..n_x {
            t.set(&[0, 0, y, x], linspace(n_x, x));
            t.set(&[0, 1, y, x], linspace(n_y, y));
        }
    }
    Ok(CoordinateMap { tensor: t })
}

impl CoordinateMap {
    pub fn n_x(&self) -> usize {
        self.tensor.dim(3)
    }

    pub fn n_y(&self) -> usize {
        self.tensor.dim(2)
    }

    /// `(x, y)` at `(row, col)`.
    pub fn at(&self, row: usize, col: usize) -> (f64, f64) {
        (self.tensor.get(&[0, 0, row, col]), self.tensor.get(&[0, 1, row, col]))
    }

    /// The map repeated over a batch of `n`.
    pub fn batched(&self, n: usize) -> Tensor {
        Tensor::cat_batch(&vec![self.tensor.clone(); n])
    }
}

/// Coordinate-augmented 3×3 convolution with reflect padding.
#[derive(Clone, Debug)]
pub struct SpConv {
    pub conv: Conv2d,
    pub in_ch: usize,
}

impl SpConv {
    pub fn new(store: &mut ParamStore, rng: &mut impl Rng, name: &str, in_ch: usize, out_ch: usize) -> Self {
        Self {
            conv: Conv2d::new(store, rng, name, in_ch + 2, out_ch, 3, 1, PadMode::Reflect),
            in_ch,
        }
    }

    pub fn forward(&self, b: &Binder, x: &Var) -> Result<Var> {
        check_channels(x, self.in_ch, "spconv")?;
        if !x.value().is_finite() {
            return Err(Error::Validation("spconv input is not finite".into()));
        }
        let s = x.shape();
        let coords = make_coordinate_map(s[3], s[2])?.batched(s[0]);
        let xc = Var::concat(&[x.clone(), Var::constant(coords)], 1);
        Ok(self.conv.forward(b, &xc))
    }
}

/// Gating network: coordinate map → one-channel mask in `(0, 1)`.
#[derive(Clone, Debug)]
pub struct GateNet {
    pub conv1: Conv2d,
    pub conv2: Conv2d,
}

impl GateNet {
    pub fn new(store: &mut ParamStore, rng: &mut impl Rng, name: &str, hidden: usize) -> Self {
        Self {
            conv1: Conv2d::new(store, rng, &format!("{name}.conv1"), 2, hidden, 3, 1, PadMode::Reflect),
            conv2: Conv2d::new(store, rng, &format!("{name}.conv2"), hidden, 1, 3, 1, PadMode::Reflect),
        }
    }

    /// `[1, 1, n_y, n_x]` mask.
    pub fn forward(&self, b: &Binder, coords: &CoordinateMap) -> Var {
        let c = Var::constant(coords.tensor.clone());
        self.conv2
            .forward(b, &lrelu(&self.conv1.forward(b, &c)))
            .sigmoid()
    }
}

/// Position-wise gating: every channel of `h_out` at position `i` is scaled
/// by `gate_mask` at `i`.
pub fn gated_fuse(h_out: &Var, gate_mask: &Var) -> Result<Var> {
    let (hs, gs) = (h_out.shape(), gate_mask.shape());
    if hs.len() != 4 || gs.len() != 4 || hs[2..] != gs[2..] {
        return Err(Error::Shape(format!(
            "gate mask {gs:?} is not spatially aligned with features {hs:?}"
        )));
    }
    if gs[1] != 1 || (gs[0] != 1 && gs[0] != hs[0]) {
        return Err(Error::Shape(format!("gate mask must be [1|N, 1, H, W], got {gs:?}")));
    }
    Ok(h_out.mul(gate_mask))
}

/// Dot-product self-attention over spatial positions with a learned
/// residual scale `gamma` (initialized to zero).
#[derive(Clone, Debug)]
pub struct SelfAttention {
    pub query: Conv2d,
    pub key: Conv2d,
    pub value: Conv2d,
    pub gamma: String,
    pub channels: usize,
    pub key_dim: usize,
}

impl SelfAttention {
    pub fn new(store: &mut ParamStore, rng: &mut impl Rng, name: &str, channels: usize) -> Self {
        let key_dim = (channels / 8).max(1);
        let gamma = format!("{name}.gamma");
        store.insert(gamma.clone(), Tensor::zeros(&[1]));
        Self {
            query: Conv2d::new(store, rng, &format!("{name}.query"), channels, key_dim, 1, 1, PadMode::Zero),
            key: Conv2d::new(store, rng, &format!("{name}.key"), channels, key_dim, 1, 1, PadMode::Zero),
            value: Conv2d::new(store, rng, &format!("{name}.value"), channels, channels, 1, 1, PadMode::Zero),
            gamma,
            channels,
            key_dim,
        }
    }

    /// Returns the output and the `[N, HW, HW]` attention weights (row `i`
    /// is the distribution position `i` attends with).
    pub fn forward_with_weights(&self, b: &Binder, x: &Var) -> Result<(Var, Var)> {
        check_channels(x, self.channels, "self-attention")?;
        if !x.value().is_finite() {
            return Err(Error::Validation("self-attention input is not finite".into()));
        }
        let s = x.shape().to_vec();
        let (n, c, hw) = (s[0], s[1], s[2] * s[3]);
        let q = self.query.forward(b, x).reshape(&[n, self.key_dim, hw]);
        let k = self.key.forward(b, x).reshape(&[n, self.key_dim, hw]);
        let v = self.value.forward(b, x).reshape(&[n, c, hw]);
        let scores = q
            .bmm(true, &k, false)
            .scale(1.0 / (self.key_dim as f64).sqrt());
        let attn = scores.softmax_last();
        let out = v.bmm(false, &attn, true).reshape(&s);
        let gamma = b.param(&self.gamma).reshape(&[1, 1, 1, 1]);
        Ok((x.add(&out.mul(&gamma)), attn))
    }

    pub fn forward(&self, b: &Binder, x: &Var) -> Result<Var> {
        Ok(self.forward_with_weights(b, x)?.0)
    }
}

/// `x + conv2(lrelu(conv1(x)))`.
#[derive(Clone, Debug)]
pub struct ResidualBlock {
    pub conv1: Conv2d,
    pub conv2: Conv2d,
}

impl ResidualBlock {
    pub fn new(store: &mut ParamStore, rng: &mut impl Rng, name: &str, channels: usize) -> Self {
        Self {
            conv1: Conv2d::new(store, rng, &format!("{name}.conv1"), channels, channels, 3, 1, PadMode::Reflect),
            conv2: Conv2d::new(store, rng, &format!("{name}.conv2"), channels, channels, 3, 1, PadMode::Reflect),
        }
    }

    pub fn forward(&self, b: &Binder, x: &Var) -> Result<Var> {
        let h = lrelu(&self.conv1.try_forward(b, x)?);
        Ok(x.add(&self.conv2.forward(b, &h)))
    }
}

/// Spatial feature transform: `γ(cond) ⊙ features + β(cond)` with 1×1
/// convolution heads. The γ head's bias starts at one.
#[derive(Clone, Debug)]
pub struct SftLayer {
    pub shared: Conv2d,
    pub gamma: Conv2d,
    pub beta: Conv2d,
    pub feat_ch: usize,
    pub cond_ch: usize,
}

impl SftLayer {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut impl Rng,
        name: &str,
        cond_ch: usize,
        feat_ch: usize,
        hidden: usize,
    ) -> Self {
        let shared = Conv2d::new(store, rng, &format!("{name}.shared"), cond_ch, hidden, 1, 1, PadMode::Zero);
        let gamma = Conv2d::new(store, rng, &format!("{name}.gamma"), hidden, feat_ch, 1, 1, PadMode::Zero);
        let beta = Conv2d::new(store, rng, &format!("{name}.beta"), hidden, feat_ch, 1, 1, PadMode::Zero);
        for head in [&gamma.weight, &beta.weight] {
            let w = store.get_mut(head).expect("just inserted");
            *w = w.map(|v| v * 0.1);
        }
        *store.get_mut(&gamma.bias).expect("just inserted") = Tensor::ones(&[feat_ch]);
        Self {
            shared,
            gamma,
            beta,
            feat_ch,
            cond_ch,
        }
    }

    /// `(γ, β)` maps for a condition.
    pub fn affine(&self, b: &Binder, condition: &Var) -> (Var, Var) {
        let h = lrelu(&self.shared.forward(b, condition));
        (self.gamma.forward(b, &h), self.beta.forward(b, &h))
    }

    pub fn forward(&self, b: &Binder, features: &Var, condition: &Var) -> Result<Var> {
        check_channels(features, self.feat_ch, "sft features")?;
        check_channels(condition, self.cond_ch, "sft condition")?;
        let (fs, cs) = (features.shape(), condition.shape());
        if fs[2..] != cs[2..] || fs[0] != cs[0] {
            return Err(Error::Shape(format!(
                "sft condition {cs:?} is not aligned with features {fs:?}"
            )));
        }
        let (g, be) = self.affine(b, condition);
        Ok(g.mul(features).add(&be))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn coordinate_map_corners() {
        let m = make_coordinate_map(2, 2).unwrap();
        assert_eq!(m.at(0, 0), (-1.0, -1.0));
        assert_eq!(m.at(0, 1), (1.0, -1.0));
        assert_eq!(m.at(1, 0), (-1.0, 1.0));
        assert_eq!(m.at(1, 1), (1.0, 1.0));
        assert_eq!(make_coordinate_map(3, 3).unwrap().at(1, 1), (0.0, 0.0));
        let thin = make_coordinate_map(1, 5).unwrap();
        assert!((0..5).all(|r| thin.at(r, 0).0 == 0.0));
        assert!(make_coordinate_map(0, 3).is_err());
    }

    #[test]
    fn coordinate_map_is_monotone_and_axis_constant() {
        let m = make_coordinate_map(7, 5).unwrap();
        for r in 0..5 {
            for c in 0..7 {
                let (x, y) = m.at(r, c);
                if c > 0 {
                    assert!(x > m.at(r, c - 1).0);
                }
                if r > 0 {
                    assert!(y > m.at(r - 1, c).1);
                    assert_eq!(x, m.at(r - 1, c).0);
                }
            }
        }
        assert_eq!(m.at(4, 6), (1.0, 1.0));
    }

    #[test]
    fn gated_fuse_arithmetic() {
        let h = Var::constant(Tensor::full(&[1, 1, 1, 1], 2.0));
        let g = Var::constant(Tensor::full(&[1, 1, 1, 1], 0.25));
        assert_eq!(gated_fuse(&h, &g).unwrap().item(), 0.5);
        let h = Var::constant(Tensor::full(&[2, 3, 4, 4], 1.5));
        let bad = Var::constant(Tensor::ones(&[1, 1, 3, 4]));
        assert!(matches!(gated_fuse(&h, &bad), Err(Error::Shape(_))));
    }

    #[test]
    fn spconv_shape_and_channel_check() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut s = ParamStore::new();
        let sp = SpConv::new(&mut s, &mut rng, "sp", 3, 5);
        let b = Binder::eval(&s);
        let x = Var::constant(Tensor::zeros(&[2, 3, 8, 8]));
        assert_eq!(sp.forward(&b, &x).unwrap().shape(), &[2, 5, 8, 8]);
        let wrong = Var::constant(Tensor::zeros(&[2, 4, 8, 8]));
        assert!(sp.forward(&b, &wrong).is_err());
    }

    #[test]
    fn residual_and_attention_identities() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut s = ParamStore::new();
        let rb = ResidualBlock::new(&mut s, &mut rng, "rb", 8);
        let sa = SelfAttention::new(&mut s, &mut rng, "sa", 8);
        for n in [&rb.conv2.weight, &rb.conv2.bias] {
            let t = s.get_mut(n).unwrap();
            *t = Tensor::zeros(t.shape());
        }
        let x = Tensor::uniform(&[1, 8, 16, 16], -1.0, 1.0, &mut rng);
        let b = Binder::eval(&s);
        let xv = Var::constant(x.clone());
        assert_eq!(rb.forward(&b, &xv).unwrap().value(), &x);
        let (y, attn) = sa.forward_with_weights(&b, &xv).unwrap();
        assert_eq!(y.value(), &x);
        for row in attn.value().data().chunks(256) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn sft_forced_heads() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut s = ParamStore::new();
        let sft = SftLayer::new(&mut s, &mut rng, "sft", 3, 4, 8);
        for n in [&sft.gamma.weight, &sft.beta.weight, &sft.beta.bias] {
            let t = s.get_mut(n).unwrap();
            *t = Tensor::zeros(t.shape());
        }
        *s.get_mut(&sft.gamma.bias).unwrap() = Tensor::ones(&[4]);
        let f = Tensor::uniform(&[2, 4, 5, 5], -1.0, 1.0, &mut rng);
        let c = Var::constant(Tensor::uniform(&[2, 3, 5, 5], -1.0, 1.0, &mut rng));
        {
            let b = Binder::eval(&s);
            assert_eq!(sft.forward(&b, &Var::constant(f.clone()), &c).unwrap().value(), &f);
        }
        // γ ≡ 0 leaves only β(condition)
        *s.get_mut(&sft.gamma.bias).unwrap() = Tensor::zeros(&[4]);
        *s.get_mut(&sft.beta.bias).unwrap() = Tensor::full(&[4], 0.3);
        let b = Binder::eval(&s);
        let out = sft.forward(&b, &Var::constant(f), &c).unwrap();
        assert!(out.value().data().iter().all(|&v| v == 0.3));
        let misaligned = Var::constant(Tensor::zeros(&[2, 3, 4, 5]));
        assert!(sft
            .forward(&b, &Var::constant(Tensor::zeros(&[2, 4, 5, 5])), &misaligned)
            .is_err());
    }
}
