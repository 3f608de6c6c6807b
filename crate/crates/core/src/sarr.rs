//! Refinement stage: a UNet whose decoder blocks use weight-demodulated
//! convolutions modulated by SFT layers conditioned on the matching skip
//! features, applied iteratively with shared weights.

use std::path::{Path, PathBuf};

use log::info;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use s2i_tensor::io::{load_checkpoint, save_checkpoint};
use s2i_tensor::{Adam, AdamConfig, Binder, PadMode, ParamStore, Tensor, Var};

use crate::afig::{write_losses_csv, Discriminator, LossRecord, Stage2Trainer};
use crate::blocks::{lrelu, Conv2d, Linear, SftLayer};
use crate::config::{EmbedderConfig, LossWeights, StageSchedule};
use crate::data::sketch::SketchParams;
use crate::data::synthetic::synthetic_pairs;
use crate::data::{batch, ImagePair};
use crate::error::{Error, Result};
use crate::losses::{gan_loss_d, gan_loss_g, identity_loss, l1_loss, perceptual_loss, Embedder, RandomPyramid};
use crate::util;

/// Clamp applied before taking the logit of the previous estimate.
const LOGIT_EPS: f64 = 1e-4;
const LEVELS: usize = 4;

/// Architecture of a [`SarrModel`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SarrSpec {
    pub size: (usize, usize),
    pub width: usize,
    pub iters: usize,
}

impl SarrSpec {
    fn channels(&self, level: usize) -> usize {
        self.width << level.min(2)
    }
}

/// How the SFT layers are evaluated.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SftMode {
    Learned,
    /// γ = 1, β = 0: the decoder ignores the skip features.
    Forced,
}

#[derive(Clone, Debug)]
pub struct SarrModel {
    pub spec: SarrSpec,
    enc: Vec<Conv2d>,
    bottleneck: Conv2d,
    dec: Vec<Conv2d>,
    sft: Vec<SftLayer>,
    head: Conv2d,
}

impl SarrModel {
    /// Registers parameters under `sarr.`. The output head starts at zero so
    /// an untrained model returns its input.
    pub fn new(store: &mut ParamStore, rng: &mut impl Rng, spec: SarrSpec) -> Result<Self> {
        let f = 1 << (LEVELS - 1);
        if spec.iters == 0 {
            return Err(Error::Config("refinement needs at least one iteration".into()));
        }
        if spec.size.0 % f != 0 || spec.size.1 % f != 0 || spec.size.0 == 0 || spec.size.1 == 0 {
            return Err(Error::Config(format!(
                "refinement input {:?} must be a positive multiple of {f}",
                spec.size
            )));
        }
        let mut enc = Vec::new();
        let mut prev = 4;
        for l in 0..LEVELS {
            let c = spec.channels(l);
            let stride = if l == 0 { 1 } else { 2 };
            enc.push(Conv2d::new(store, rng, &format!("sarr.enc{l}"), prev, c, 3, stride, PadMode::Reflect));
            prev = c;
        }
        let bottleneck = Conv2d::new(store, rng, "sarr.mid", prev, prev, 3, 1, PadMode::Reflect);
        let mut dec = Vec::new();
        let mut sft = Vec::new();
        for l in (0..LEVELS).rev() {
            let c = spec.channels(l);
            dec.push(Conv2d::new(store, rng, &format!("sarr.dec{l}"), prev, c, 3, 1, PadMode::Reflect));
            sft.push(SftLayer::new(store, rng, &format!("sarr.sft{l}"), c, c, c));
            prev = c;
        }
        let head = Conv2d::new(store, rng, "sarr.head", prev, 3, 3, 1, PadMode::Reflect);
        *store.get_mut(&head.weight).expect("registered") = Tensor::zeros(&[3, prev, 3, 3]);
        Ok(Self {
            spec,
            enc,
            bottleneck,
            dec,
            sft,
            head,
        })
    }

    fn check_inputs(&self, prev: &Var, sketch: &Var) -> Result<()> {
        let (p, s) = (prev.shape(), sketch.shape());
        let (h, w) = self.spec.size;
        if p.len() != 4 || p[1] != 3 || p[2] != h || p[3] != w {
            return Err(Error::Shape(format!("refinement expects [N,3,{h},{w}] images, got {p:?}")));
        }
        if s.len() != 4 || s[1] != 1 || s[0] != p[0] || s[2..] != p[2..] {
            return Err(Error::Shape(format!("sketch {s:?} is not aligned with image {p:?}")));
        }
        Ok(())
    }

    /// One encoder-decoder pass.
    pub fn pass(&self, b: &Binder, prev: &Var, sketch: &Var, mode: SftMode) -> Result<Var> {
        self.check_inputs(prev, sketch)?;
        let mut skips = Vec::with_capacity(LEVELS);
        let mut h = Var::concat(&[prev.clone(), sketch.clone()], 1);
        for c in &self.enc {
            h = lrelu(&c.forward(b, &h));
            skips.push(h.clone());
        }
        h = lrelu(&self.bottleneck.forward(b, &h));
        for (i, (conv, sft)) in self.dec.iter().zip(&self.sft).enumerate() {
            let level = LEVELS - 1 - i;
            if level != LEVELS - 1 {
                h = h.upsample_nearest(2);
            }
            h = lrelu(&conv.forward_with_weight(b, &h, &conv.demodulated_weight(b)));
            if mode == SftMode::Learned {
                h = sft.forward(b, &h, &skips[level])?;
            }
        }
        let delta = self.head.forward(b, &h);
        let p = prev.clamp(LOGIT_EPS, 1.0 - LOGIT_EPS);
        let logit = p.div(&p.neg().add_scalar(1.0)).ln();
        Ok(logit.add(&delta).sigmoid())
    }

    /// `iters` feedback iterations with shared weights.
    pub fn refine(&self, b: &Binder, coarse: &Var, sketch: &Var, iters: usize, mode: SftMode) -> Result<Var> {
        if iters == 0 {
            return Err(Error::Validation("refinement needs at least one iteration".into()));
        }
        let mut x = coarse.clone();
        for _ in 0..iters {
            x = self.pass(b, &x, sketch, mode)?;
        }
        Ok(x)
    }
}

/// Refines coarse images with the model's configured feedback depth.
pub fn sarr_forward(b: &Binder, coarse: &Var, sketch: &Var, model: &SarrModel) -> Result<Var> {
    model.refine(b, coarse, sketch, model.spec.iters, SftMode::Learned)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EmbedderSpec {
    pub size: (usize, usize),
    pub dim: usize,
    pub width: usize,
}

/// Small convolutional identity embedder with unit-norm outputs; frozen once
/// trained.
#[derive(Clone, Debug)]
pub struct IdentityEmbedder {
    pub spec: EmbedderSpec,
    pub params: ParamStore,
    convs: Vec<Conv2d>,
    fc: Linear,
    flat: usize,
}

impl IdentityEmbedder {
    pub fn new(spec: EmbedderSpec, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let widths = [spec.width, 2 * spec.width, 4 * spec.width, 4 * spec.width];
        let mut prev = 3;
        let (mut h, mut w) = spec.size;
        let convs = widths
            .iter()
            .enumerate()
            .map(|(i, &c)| {
                let conv = Conv2d::new(&mut params, &mut rng, &format!("eta.conv{i}"), prev, c, 3, 2, PadMode::Reflect);
                prev = c;
                h = h.div_ceil(2);
                w = w.div_ceil(2);
                conv
            })
            .collect();
        let flat = prev * h * w;
        let fc = Linear::new(&mut params, &mut rng, "eta.fc", flat, spec.dim);
        Self {
            spec,
            params,
            convs,
            fc,
            flat,
        }
    }

    pub fn forward(&self, b: &Binder, x: &Var) -> Var {
        let n = x.shape()[0];
        let mut h = x.clone();
        for c in &self.convs {
            h = lrelu(&c.forward(b, &h));
        }
        let e = self.fc.forward(b, &h.reshape(&[n, self.flat]));
        let norm = e.square().sum_keep(&[1]).add_scalar(1e-12).sqrt();
        e.div(&norm)
    }
}

impl Embedder for IdentityEmbedder {
    fn embed(&self, x: &Var) -> Var {
        self.forward(&Binder::eval(&self.params), x)
    }

    fn dim(&self) -> usize {
        self.spec.dim
    }
}

/// Margin contrastive objective over all pairs of a batch: squared distance
/// for matching labels, squared hinge `max(0, margin − d)` otherwise.
pub fn contrastive_loss(emb: &Var, labels: &[usize], margin: f64) -> Var {
    let n = labels.len();
    let d = emb.shape()[1];
    let diff = emb.reshape(&[n, 1, d]).sub(&emb.reshape(&[1, n, d]));
    let d2 = diff.square().sum_keep(&[2]).reshape(&[n, n]);
    let dist = d2.add_scalar(1e-12).sqrt();
    let mut same = Tensor::zeros(&[n, n]);
    let mut other = Tensor::zeros(&[n, n]);
    let mut pairs = 0.0f64;
    for i in 0..n {
        for j in i + 1..n {
            pairs += 1.0;
            if labels[i] == labels[j] {
                same.set(&[i, j], 1.0);
            } else {
                other.set(&[i, j], 1.0);
            }
        }
    }
    let hinge = dist.neg().add_scalar(margin).leaky_relu(0.0).square();
    d2.mul(&Var::constant(same))
        .add(&hinge.mul(&Var::constant(other)))
        .sum()
        .scale(1.0 / pairs.max(1.0))
}

/// Trains the identity embedder on rendered toy identities and returns it
/// with its loss history.
pub fn train_embedder(size: usize, dim: usize, cfg: &EmbedderConfig, seed: u64) -> Result<(IdentityEmbedder, Vec<f64>)> {
    if cfg.identities < 2 {
        return Err(Error::Config("identity embedder needs at least two identities".into()));
    }
    let pairs = synthetic_pairs(cfg.identities, cfg.per_identity.max(1), size, seed, &SketchParams::default())?;
    let mut names: Vec<&str> = pairs.iter().map(|p| p.identity_id.as_str()).collect();
    names.dedup();
    let labels: Vec<usize> = pairs
        .iter()
        .map(|p| names.iter().position(|n| *n == p.identity_id).expect("listed"))
        .collect();
    let photos = Tensor::stack(&pairs.iter().map(|p| p.photo.clone()).collect::<Vec<_>>());
    let mut emb = IdentityEmbedder::new(
        EmbedderSpec {
            size: (size, size),
            dim,
            width: 8,
        },
        seed,
    );
    let mut opt = Adam::new(AdamConfig {
        lr: cfg.lr,
        beta1: 0.9,
        ..AdamConfig::default()
    });
    let x = Var::constant(photos);
    let mut history = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let (v, grads) = {
            let b = Binder::train(&emb.params);
            let loss = contrastive_loss(&emb.forward(&b, &x), &labels, cfg.margin);
            loss.backward();
            (loss.item(), b.grads())
        };
        util::ensure_finite("sarr/embedder", step, "contrastive", v)?;
        history.push(v);
        opt.step(&mut emb.params, &grads);
    }
    Ok((emb, history))
}

/// Settings for [`train_sarr`].
#[derive(Clone, Debug)]
pub struct SarrOptions<'a> {
    pub width: usize,
    pub iters: usize,
    pub embed_dim: usize,
    pub disc_width: usize,
    pub disc_conditional: bool,
    pub schedule: &'a StageSchedule,
    pub weights: &'a LossWeights,
    pub embedder: &'a EmbedderConfig,
    /// Reused instead of training a new embedder.
    pub pretrained_embedder: Option<&'a IdentityEmbedder>,
    pub seed: u64,
    pub fingerprint: String,
    pub out_dir: Option<&'a Path>,
}

/// Refinement state, trained or loaded.
pub struct SarrCheckpoint {
    pub model: SarrModel,
    pub params: ParamStore,
    pub disc: Discriminator,
    pub disc_params: ParamStore,
    pub opt: Adam,
    pub disc_opt: Adam,
    pub embedder: IdentityEmbedder,
    pub epoch: usize,
    pub losses: Vec<LossRecord>,
    /// Train-set L1 of the refined output after each epoch.
    pub history: Vec<f64>,
    pub fingerprint: String,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SarrMeta {
    pub fingerprint: String,
    pub epoch: usize,
    pub spec: SarrSpec,
    pub embedder: EmbedderSpec,
    pub disc_width: usize,
    pub disc_conditional: bool,
    pub history: Vec<f64>,
}

pub fn sarr_dir(out: &Path) -> PathBuf {
    out.join("sarr")
}

impl SarrCheckpoint {
    /// Refined images for aligned coarse images and sketches.
    pub fn refine(&self, coarse: &Tensor, sketch: &Tensor, iters: usize) -> Result<Tensor> {
        let b = Binder::eval(&self.params);
        Ok(self
            .model
            .refine(&b, &Var::constant(coarse.clone()), &Var::constant(sketch.clone()), iters, SftMode::Learned)?
            .value()
            .clone())
    }

    /// Weighted refinement objective and its breakdown.
    fn objective(&self, b: &Binder, coarse: &Var, sketch: &Var, real: &Var, w: &LossWeights, ext: &RandomPyramid) -> Result<(Var, LossRecord)> {
        let refined = sarr_forward(b, coarse, sketch, &self.model)?;
        let db = Binder::eval(&self.disc_params);
        let d_fake = self.disc.discriminate(&db, &refined, Some(sketch))?;
        let l1 = l1_loss(&refined, real)?;
        let gan = gan_loss_g(&d_fake);
        let perc = perceptual_loss(&refined, real, ext)?;
        let id = identity_loss(&refined, real, &self.embedder, w.id)?;
        let total = l1
            .scale(w.l1)
            .add(&gan.scale(w.gan))
            .add(&perc.scale(w.perc))
            .add(&id);
        let rec = LossRecord {
            step: 0,
            l1: l1.item(),
            gan_g: gan.item(),
            gan_d: f64::NAN,
            perc: perc.item(),
            gram: None,
            id: Some(id.item()),
        };
        Ok((total, rec))
    }

    /// Discriminator update then refinement-network update on one batch.
    pub fn step(&mut self, coarse: &Tensor, sketch: &Tensor, real: &Tensor, w: &LossWeights, ext: &RandomPyramid, step: usize) -> Result<LossRecord> {
        let (c, s, r) = (
            Var::constant(coarse.clone()),
            Var::constant(sketch.clone()),
            Var::constant(real.clone()),
        );
        let fake = sarr_forward(&Binder::eval(&self.params), &c, &s, &self.model)?.detach();
        let (gan_d, dgrads) = {
            let db = Binder::train(&self.disc_params);
            let v = gan_loss_d(&self.disc.discriminate(&db, &r, Some(&s))?, &self.disc.discriminate(&db, &fake, Some(&s))?);
            v.neg().backward();
            (v.item(), db.grads())
        };
        util::ensure_finite("sarr", step, "discriminator", gan_d)?;
        self.disc_opt.step(&mut self.disc_params, &dgrads);
        let (mut rec, grads) = {
            let b = Binder::train(&self.params);
            let (total, rec) = self.objective(&b, &c, &s, &r, w, ext)?;
            total.backward();
            (rec, b.grads())
        };
        for (name, v) in [("L1", rec.l1), ("GAN_g", rec.gan_g), ("perc", rec.perc), ("id", rec.id.unwrap_or(0.0))] {
            util::ensure_finite("sarr", step, name, v)?;
        }
        self.opt.step(&mut self.params, &grads);
        rec.step = step;
        rec.gan_d = gan_d;
        Ok(rec)
    }

    /// Weighted identity term of the current model on a batch.
    pub fn identity_term(&self, coarse: &Tensor, sketch: &Tensor, real: &Tensor, lambda: f64) -> Result<f64> {
        let refined = self.refine(coarse, sketch, self.model.spec.iters)?;
        Ok(identity_loss(&Var::constant(refined), &Var::constant(real.clone()), &self.embedder, lambda)?.item())
    }
}

fn save_sarr(dir: &Path, ck: &SarrCheckpoint) -> Result<()> {
    let meta = SarrMeta {
        fingerprint: ck.fingerprint.clone(),
        epoch: ck.epoch,
        spec: ck.model.spec.clone(),
        embedder: ck.embedder.spec.clone(),
        disc_width: ck.disc_width(),
        disc_conditional: ck.disc.conditional,
        history: ck.history.clone(),
    };
    let mut store = ParamStore::new();
    util::merge_prefixed(&mut store, &ck.params, "");
    util::merge_prefixed(&mut store, &ck.disc_params, "");
    util::merge_prefixed(&mut store, &ck.embedder.params, "");
    util::merge_prefixed(&mut store, &ck.opt.to_store(), "adam_s.");
    util::merge_prefixed(&mut store, &ck.disc_opt.to_store(), "adam_d.");
    save_checkpoint(&util::epoch_path(dir, ck.epoch), &serde_json::to_string(&meta)?, &store)?;
    util::write_json(&dir.join("meta.json"), &meta)?;
    write_losses_csv(&dir.join("losses.csv"), &ck.losses)
}

impl SarrCheckpoint {
    fn disc_width(&self) -> usize {
        self.disc_params
            .get("disc.conv0.bias")
            .map(|t| t.numel())
            .unwrap_or(0)
    }
}

fn take(store: &ParamStore, prefix: &str) -> ParamStore {
    ParamStore::from_map(
        store
            .iter()
            .filter(|(k, _)| k.starts_with(prefix))
            .map(|(k, v)| (k.to_string(), v.clone()))
            .collect(),
    )
}

/// Loads the latest refinement checkpoint from `dir` (the `sarr` directory).
pub fn load_sarr(dir: &Path, lr: f64) -> Result<SarrCheckpoint> {
    let epoch = util::latest_epoch(dir)
        .ok_or_else(|| Error::Validation(format!("no refinement checkpoint in {}", dir.display())))?;
    let (json, store) = load_checkpoint(&util::epoch_path(dir, epoch))?;
    let meta: SarrMeta = serde_json::from_str(&json)?;
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut fresh = ParamStore::new();
    let model = SarrModel::new(&mut fresh, &mut rng, meta.spec.clone())?;
    let mut dfresh = ParamStore::new();
    let disc = Discriminator::new(&mut dfresh, &mut rng, "disc.", meta.disc_width, meta.disc_conditional);
    let mut embedder = IdentityEmbedder::new(meta.embedder.clone(), 0);
    let params = take(&store, "sarr.");
    let disc_params = take(&store, "disc.");
    let eta = take(&store, "eta.");
    if params.names().ne(fresh.names()) || disc_params.names().ne(dfresh.names()) || eta.names().ne(embedder.params.names()) {
        return Err(Error::Config(format!("refinement checkpoint in {} does not match its architecture", dir.display())));
    }
    embedder.params = eta;
    let adam = AdamConfig {
        lr,
        ..AdamConfig::default()
    };
    Ok(SarrCheckpoint {
        model,
        params,
        disc,
        disc_params,
        opt: Adam::from_store(adam, &util::strip_prefixed(&store, "adam_s.")),
        disc_opt: Adam::from_store(adam, &util::strip_prefixed(&store, "adam_d.")),
        embedder,
        epoch,
        losses: Vec::new(),
        history: meta.history,
        fingerprint: meta.fingerprint,
    })
}

/// Fresh refinement state with a newly trained identity embedder.
pub fn init_sarr(size: (usize, usize), opts: &SarrOptions) -> Result<SarrCheckpoint> {
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed ^ 0x5A22);
    let mut params = ParamStore::new();
    let model = SarrModel::new(
        &mut params,
        &mut rng,
        SarrSpec {
            size,
            width: opts.width,
            iters: opts.iters,
        },
    )?;
    let mut disc_params = ParamStore::new();
    let disc = Discriminator::new(&mut disc_params, &mut rng, "disc.", opts.disc_width, opts.disc_conditional);
    if size.0 != size.1 {
        return Err(Error::Config(format!("refinement canvas must be square, got {size:?}")));
    }
    let embedder = match opts.pretrained_embedder {
        Some(e) if e.spec.size == size => e.clone(),
        Some(e) => {
            return Err(Error::Config(format!(
                "identity embedder expects {:?} images, refinement runs at {size:?}",
                e.spec.size
            )))
        }
        None => {
            let (e, hist) = train_embedder(size.0, opts.embed_dim, opts.embedder, opts.seed ^ 0xE7A)?;
            if let (Some(a), Some(b)) = (hist.first(), hist.last()) {
                info!("sarr: identity embedder contrastive loss {a:.4} -> {b:.4}");
            }
            e
        }
    };
    let adam = AdamConfig {
        lr: opts.schedule.lr,
        ..AdamConfig::default()
    };
    Ok(SarrCheckpoint {
        model,
        params,
        disc,
        disc_params,
        opt: Adam::new(adam),
        disc_opt: Adam::new(adam),
        embedder,
        epoch: 0,
        losses: Vec::new(),
        history: Vec::new(),
        fingerprint: opts.fingerprint.clone(),
    })
}

/// Trains the refinement network on coarse outputs of the frozen stage-2
/// generator, computed once up front.
pub fn train_sarr(pairs: &[ImagePair], stage2: &Stage2Trainer, opts: &SarrOptions) -> Result<SarrCheckpoint> {
    if pairs.is_empty() {
        return Err(Error::Validation("refinement needs at least one training pair".into()));
    }
    let (sketches, photos) = batch(pairs);
    let coarse = stage2.generate(&sketches)?;
    train_sarr_cached(&sketches, &photos, &coarse, opts)
}

/// [`train_sarr`] on precomputed coarse images.
pub fn train_sarr_cached(sketches: &Tensor, photos: &Tensor, coarse: &Tensor, opts: &SarrOptions) -> Result<SarrCheckpoint> {
    let sched = opts.schedule;
    sched.validate("sarr")?;
    opts.weights.validate()?;
    let size = (photos.dim(2), photos.dim(3));
    let dir = opts.out_dir.map(sarr_dir);
    let mut ck = match dir.as_deref().filter(|d| sched.resume && util::latest_epoch(d).is_some()) {
        Some(d) => {
            let ck = load_sarr(d, sched.lr)?;
            info!("sarr: resuming after epoch {}", ck.epoch);
            ck
        }
        None => init_sarr(size, opts)?,
    };
    let ext = RandomPyramid::default_rgb();
    let n = photos.dim(0);
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed ^ 0x5A22_0000 ^ (ck.epoch as u64) << 20);
    for epoch in ck.epoch + 1..=sched.epochs {
        for s in 0..sched.steps_per_epoch {
            let idx = util::batch_indices(n, sched.batch_size, &mut rng);
            let step = (epoch - 1) * sched.steps_per_epoch + s;
            let rec = ck.step(
                &util::gather(coarse, &idx),
                &util::gather(sketches, &idx),
                &util::gather(photos, &idx),
                opts.weights,
                &ext,
                step,
            )?;
            ck.losses.push(rec);
        }
        let refined = ck.refine(coarse, sketches, ck.model.spec.iters)?;
        let l1 = refined.zip_map(photos, |a, b| (a - b).abs()).mean();
        ck.history.push(l1);
        ck.epoch = epoch;
        info!("sarr: epoch {epoch} train L1 {l1:.5}");
        if let Some(d) = &dir {
            save_sarr(d, &ck)?;
        }
        if sched.stop_below.is_some_and(|t| l1 < t) {
            break;
        }
    }
    Ok(ck)
}

#[cfg(test)]
mod tests {
    use super::*;
    use s2i_tensor::gradcheck::check_gradient_at;

    fn model(size: usize, iters: usize, seed: u64) -> (SarrModel, ParamStore) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let m = SarrModel::new(
            &mut store,
            &mut rng,
            SarrSpec {
                size: (size, size),
                width: 4,
                iters,
            },
        )
        .unwrap();
        (m, store)
    }

    fn randomize_head(m: &SarrModel, store: &mut ParamStore, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let w = store.get_mut(&m.head.weight).unwrap();
        *w = Tensor::randn(w.shape(), 0.2, &mut rng);
    }

    fn inputs(size: usize, seed: u64) -> (Var, Var) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (
            Var::constant(Tensor::uniform(&[1, 3, size, size], 0.05, 0.95, &mut rng)),
            Var::constant(Tensor::uniform(&[1, 1, size, size], 0.0, 1.0, &mut rng)),
        )
    }

    #[test]
    fn output_shape_matches_input() {
        let (m, store) = model(64, 2, 0);
        let (c, s) = inputs(64, 1);
        let y = sarr_forward(&Binder::eval(&store), &c, &s, &m).unwrap();
        assert_eq!(y.shape(), &[1, 3, 64, 64]);
    }

    #[test]
    fn untrained_model_passes_input_through() {
        let (m, store) = model(16, 2, 0);
        let (c, s) = inputs(16, 1);
        let y = sarr_forward(&Binder::eval(&store), &c, &s, &m).unwrap();
        assert!(y.value().zip_map(c.value(), |a, b| (a - b).abs()).max_abs() < 1e-12);
    }

    #[test]
    fn iterations_unroll_to_single_passes() {
        let (m, mut store) = model(16, 3, 0);
        randomize_head(&m, &mut store, 9);
        let b = Binder::eval(&store);
        let (c, s) = inputs(16, 1);
        let full = m.refine(&b, &c, &s, 3, SftMode::Learned).unwrap();
        let mut x = c.clone();
        for _ in 0..3 {
            x = m.pass(&b, &x, &s, SftMode::Learned).unwrap();
        }
        assert_eq!(full.value(), x.value());
        let one = m.refine(&b, &c, &s, 1, SftMode::Learned).unwrap();
        assert_eq!(one.value(), m.pass(&b, &c, &s, SftMode::Learned).unwrap().value());
        assert!(m.refine(&b, &c, &s, 0, SftMode::Learned).is_err());
        let again = m.refine(&b, &c, &s, 3, SftMode::Learned).unwrap();
        assert_eq!(full.value(), again.value());
    }

    #[test]
    fn forced_sft_ignores_skip_features() {
        let (m, mut store) = model(16, 1, 0);
        randomize_head(&m, &mut store, 3);
        for sft in &m.sft {
            for head in [&sft.gamma, &sft.beta] {
                let w = store.get_mut(&head.weight).unwrap();
                *w = w.map(|_| 0.0);
            }
            let beta_b = store.get_mut(&sft.beta.bias).unwrap();
            *beta_b = beta_b.map(|_| 0.0);
            let gamma_b = store.get_mut(&sft.gamma.bias).unwrap();
            *gamma_b = gamma_b.map(|_| 1.0);
        }
        let b = Binder::eval(&store);
        let (c, s) = inputs(16, 2);
        let learned = m.pass(&b, &c, &s, SftMode::Learned).unwrap();
        let forced = m.pass(&b, &c, &s, SftMode::Forced).unwrap();
        assert!(learned.value().zip_map(forced.value(), |a, b| (a - b).abs()).max_abs() < 1e-12);
    }

    #[test]
    fn gradient_wrt_coarse_image() {
        let (m, mut store) = model(16, 2, 0);
        randomize_head(&m, &mut store, 4);
        let (c, s) = inputs(16, 5);
        let coords = [3, 16 * 16 + 77, 2 * 16 * 16 + 200];
        let r = check_gradient_at(
            |x| {
                let b = Binder::eval(&store);
                sarr_forward(&b, x, &s, &m).unwrap().square().sum()
            },
            c.value(),
            1e-5,
            Some(&coords),
        );
        assert!(r.relative_error() < 1e-3, "{}", r.relative_error());
    }

    #[test]
    fn misaligned_inputs_rejected() {
        let (m, store) = model(16, 1, 0);
        let b = Binder::eval(&store);
        let (c, _) = inputs(16, 1);
        let s = Var::constant(Tensor::zeros(&[1, 1, 8, 8]));
        assert!(sarr_forward(&b, &c, &s, &m).is_err());
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let bad = SarrSpec {
            size: (12, 12),
            width: 4,
            iters: 1,
        };
        assert!(SarrModel::new(&mut ParamStore::new(), &mut rng, bad).is_err());
    }

    #[test]
    fn contrastive_loss_on_known_embeddings() {
        // two identical points with the same label, one point at distance 0.5
        let e = Var::constant(Tensor::from_vec(&[3, 2], vec![0., 0., 0., 0., 0.3, 0.4]));
        let v = contrastive_loss(&e, &[0, 0, 1], 1.0).item();
        assert!((v - (0.25 + 0.25) / 3.0).abs() < 1e-9, "{v}");
    }

    #[test]
    fn embedder_separates_identities() {
        let cfg = EmbedderConfig {
            steps: 60,
            identities: 4,
            per_identity: 2,
            ..EmbedderConfig::default()
        };
        let (emb, hist) = train_embedder(32, 16, &cfg, 1).unwrap();
        assert!(hist.last().unwrap() < &(0.5 * hist[0]), "{hist:?}");
        let x = Var::constant(Tensor::uniform(&[2, 3, 32, 32], 0.0, 1.0, &mut ChaCha8Rng::seed_from_u64(0)));
        let e = emb.embed(&x);
        assert_eq!(e.shape(), &[2, 16]);
        assert_eq!(e.value(), emb.embed(&x).value());
        assert!(identity_loss(&x, &x, &emb, 1.0).unwrap().item() == 0.0);
    }

    #[test]
    fn zero_identity_weight_logs_zero_and_checkpoint_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let sched = StageSchedule {
            epochs: 1,
            steps_per_epoch: 2,
            batch_size: 2,
            ..StageSchedule::default()
        };
        let weights = LossWeights {
            id: 0.0,
            ..LossWeights::default()
        };
        let emb_cfg = EmbedderConfig {
            steps: 2,
            identities: 2,
            per_identity: 1,
            ..EmbedderConfig::default()
        };
        let opts = SarrOptions {
            width: 4,
            iters: 2,
            embed_dim: 8,
            disc_width: 4,
            disc_conditional: true,
            schedule: &sched,
            weights: &weights,
            embedder: &emb_cfg,
            pretrained_embedder: None,
            seed: 0,
            fingerprint: "x".into(),
            out_dir: Some(dir.path()),
        };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let photos = Tensor::uniform(&[2, 3, 16, 16], 0.1, 0.9, &mut rng);
        let coarse = Tensor::uniform(&[2, 3, 16, 16], 0.1, 0.9, &mut rng);
        let sketches = Tensor::uniform(&[2, 1, 16, 16], 0.0, 1.0, &mut rng);
        let ck = train_sarr_cached(&sketches, &photos, &coarse, &opts).unwrap();
        assert!(ck.losses.iter().all(|r| r.id == Some(0.0)));
        let loaded = load_sarr(&sarr_dir(dir.path()), sched.lr).unwrap();
        assert_eq!(ck.refine(&coarse, &sketches, 2).unwrap(), loaded.refine(&coarse, &sketches, 2).unwrap());
        assert_eq!(loaded.embedder.params, ck.embedder.params);
        assert!(loaded.disc.conditional);
    }
}
