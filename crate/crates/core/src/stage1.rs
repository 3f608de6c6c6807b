//! Component autoencoders: one encoder/decoder pair per facial region plus
//! the remainder, all emitting latents of the same width.

use std::path::{Path, PathBuf};

use log::{info, warn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use s2i_tensor::io::{load_checkpoint, save_checkpoint};
use s2i_tensor::{par, Adam, AdamConfig, Binder, PadMode, ParamStore, Tensor, Var};

use crate::blocks::{lrelu, Conv2d, Linear, SelfAttention};
use crate::config::{ModelConfig, StageSchedule};
use crate::data::layout::{split_batch, RegionLayout, REMAINDER};
use crate::data::ImagePair;
use crate::error::{Error, Result};
use crate::util;

/// Architecture of one component autoencoder.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AutoencoderSpec {
    pub component: String,
    /// `(h, w)` of the single-channel component image.
    pub input: (usize, usize),
    pub latent_dim: usize,
    pub width: usize,
    pub stages: usize,
    pub attention: bool,
}

impl AutoencoderSpec {
    /// Four downsampling stages for a region, five for the full-canvas
    /// remainder.
    pub fn for_component(component: &str, input: (usize, usize), model: &ModelConfig, attention: bool) -> Self {
        Self {
            component: component.to_string(),
            input,
            latent_dim: model.latent_dim,
            width: model.base_width,
            stages: if component == REMAINDER { 5 } else { 4 },
            attention,
        }
    }

    fn channels(&self, stage: usize) -> usize {
        self.width * (1 << stage.min(2))
    }

    /// Spatial size after all downsampling stages.
    pub fn deepest(&self) -> (usize, usize) {
        shrink(self.input, self.stages)
    }

    /// Grid the decoder's fully connected layer projects onto.
    pub fn decoder_start(&self) -> (usize, usize) {
        shrink(self.input, DECODER_UPSAMPLES)
    }
}

/// Nearest-neighbour upsampling steps in every decoder.
pub const DECODER_UPSAMPLES: usize = 2;

fn shrink(mut s: (usize, usize), times: usize) -> (usize, usize) {
    for _ in 0..times {
        s = (s.0.div_ceil(2), s.1.div_ceil(2));
    }
    s
}

#[derive(Clone, Debug)]
pub struct ComponentAutoencoder {
    pub spec: AutoencoderSpec,
    enc: Vec<Conv2d>,
    attn: Option<SelfAttention>,
    enc_fc: Linear,
    dec_fc: Linear,
    dec: Vec<Conv2d>,
    out: Conv2d,
}

impl ComponentAutoencoder {
    /// Registers parameters under `prefix` (e.g. `"nose."`).
    pub fn new(store: &mut ParamStore, rng: &mut impl Rng, prefix: &str, spec: AutoencoderSpec) -> Self {
        let mut enc = Vec::new();
        let mut prev = 1;
        for i in 0..spec.stages {
            let c = spec.channels(i);
            enc.push(Conv2d::new(store, rng, &format!("{prefix}enc.conv{i}"), prev, c, 3, 2, PadMode::Reflect));
            prev = c;
        }
        let attn = spec
            .attention
            .then(|| SelfAttention::new(store, rng, &format!("{prefix}enc.attn"), prev));
        let (dh, dw) = spec.deepest();
        let enc_fc = Linear::new(store, rng, &format!("{prefix}enc.fc"), prev * dh * dw, spec.latent_dim);
        let (sh, sw) = spec.decoder_start();
        prev = spec.channels(DECODER_UPSAMPLES);
        let dec_fc = Linear::new(store, rng, &format!("{prefix}dec.fc"), spec.latent_dim, prev * sh * sw);
        let mut dec = Vec::new();
        for i in (0..DECODER_UPSAMPLES).rev() {
            let c = spec.channels(i.saturating_sub(1));
            dec.push(Conv2d::new(store, rng, &format!("{prefix}dec.conv{i}"), prev, c, 3, 1, PadMode::Reflect));
            prev = c;
        }
        let out = Conv2d::new(store, rng, &format!("{prefix}dec.out"), prev, 1, 3, 1, PadMode::Reflect);
        Self {
            spec,
            enc,
            attn,
            enc_fc,
            dec_fc,
            dec,
            out,
        }
    }

    /// `[N, 1, h, w]` → `[N, latent_dim]`.
    pub fn encode(&self, b: &Binder, x: &Var) -> Result<Var> {
        let (h, w) = self.spec.input;
        let s = x.shape();
        if s.len() != 4 || s[1] != 1 || s[2] != h || s[3] != w {
            return Err(Error::Shape(format!(
                "{} encoder expects [N,1,{h},{w}], got {s:?}",
                self.spec.component
            )));
        }
        let mut hcur = x.clone();
        for c in &self.enc {
            hcur = lrelu(&c.forward(b, &hcur));
        }
        if let Some(a) = &self.attn {
            hcur = a.forward(b, &hcur)?;
        }
        let n = s[0];
        let flat = hcur.value().numel() / n;
        Ok(self.enc_fc.forward(b, &hcur.reshape(&[n, flat])))
    }

    /// `[N, latent_dim]` → `[N, 1, h, w]` in `(0, 1)`.
    pub fn decode(&self, b: &Binder, z: &Var) -> Result<Var> {
        let s = z.shape();
        if s.len() != 2 || s[1] != self.spec.latent_dim {
            return Err(Error::Shape(format!(
                "{} decoder expects [N,{}], got {s:?}",
                self.spec.component, self.spec.latent_dim
            )));
        }
        let (dh, dw) = self.spec.decoder_start();
        let c = self.spec.channels(DECODER_UPSAMPLES);
        let mut h = lrelu(&self.dec_fc.forward(b, z)).reshape(&[s[0], c, dh, dw]);
        for conv in &self.dec {
            h = lrelu(&conv.forward(b, &h.upsample_nearest(2)));
        }
        let (ih, iw) = self.spec.input;
        Ok(self.out.forward(b, &h.crop2d(0, ih, 0, iw)).sigmoid())
    }

    pub fn reconstruct(&self, b: &Binder, x: &Var) -> Result<Var> {
        self.decode(b, &self.encode(b, x)?)
    }
}

/// A trained (or partially trained) component model.
#[derive(Clone, Debug)]
pub struct TrainedComponent {
    pub model: ComponentAutoencoder,
    pub params: ParamStore,
    pub optimizer: Adam,
    pub seed: u64,
    /// Training-set L1 after each completed epoch.
    pub history: Vec<f64>,
}

/// Everything stage 1 produces.
#[derive(Clone, Debug)]
pub struct Stage1Checkpoint {
    pub components: Vec<TrainedComponent>,
    /// Last completed epoch (1-based; 0 before any training).
    pub epoch: usize,
    pub fingerprint: String,
    pub layout: RegionLayout,
}

impl Stage1Checkpoint {
    pub fn component(&self, name: &str) -> Option<&TrainedComponent> {
        self.components.iter().find(|c| c.model.spec.component == name)
    }

    /// Per-component training L1 from the final epoch evaluation.
    pub fn final_losses(&self) -> Vec<(String, f64)> {
        self.components
            .iter()
            .map(|c| {
                (
                    c.model.spec.component.clone(),
                    c.history.last().copied().unwrap_or(f64::NAN),
                )
            })
            .collect()
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct ComponentMeta {
    spec: AutoencoderSpec,
    epoch: usize,
    seed: u64,
    fingerprint: String,
    history: Vec<f64>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Stage1Meta {
    pub fingerprint: String,
    pub epoch: usize,
    pub components: Vec<String>,
    pub seeds: Vec<u64>,
    pub layout: RegionLayout,
}

/// Seed of component `i` derived from the run seed.
pub fn component_seed(seed: u64, i: usize) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15)
        .wrapping_add(0x1000 + i as u64)
}

/// Freshly initialized autoencoders for every component of `layout`.
pub fn init_components(layout: &RegionLayout, model: &ModelConfig, attention: bool, seed: u64) -> Vec<TrainedComponent> {
    layout
        .component_names()
        .into_iter()
        .zip(layout.component_shapes())
        .enumerate()
        .map(|(i, (name, shape))| {
            let cseed = component_seed(seed, i);
            let mut rng = ChaCha8Rng::seed_from_u64(cseed);
            let mut params = ParamStore::new();
            let spec = AutoencoderSpec::for_component(&name, shape, model, attention);
            let model = ComponentAutoencoder::new(&mut params, &mut rng, &format!("{name}."), spec);
            TrainedComponent {
                model,
                params,
                optimizer: Adam::new(AdamConfig::default()),
                seed: cseed,
                history: Vec::new(),
            }
        })
        .collect()
}

/// Where stage-1 artifacts live under a run directory.
pub fn stage1_dir(out: &Path) -> PathBuf {
    out.join("stage1")
}

/// Per-component `[N, 1, h, w]` inputs cut from the training sketches.
pub fn component_inputs(pairs: &[ImagePair], layout: &RegionLayout) -> Result<Vec<Tensor>> {
    let sketches: Vec<Tensor> = pairs.iter().map(|p| p.sketch.clone()).collect();
    let x = Var::constant(Tensor::stack(&sketches));
    if x.shape()[1] != 1 || (x.shape()[2], x.shape()[3]) != layout.canvas {
        return Err(Error::Shape(format!(
            "sketch batch {:?} does not match layout canvas {:?}",
            x.shape(),
            layout.canvas
        )));
    }
    Ok(split_batch(&x, layout).iter().map(|v| v.value().clone()).collect())
}

/// Mean reconstruction L1 of one component over `inputs`.
pub fn reconstruction_l1(c: &TrainedComponent, inputs: &Tensor) -> Result<f64> {
    let b = Binder::eval(&c.params);
    let x = Var::constant(inputs.clone());
    Ok(c.model.reconstruct(&b, &x)?.sub(&x).abs().mean().item())
}

fn save_component(dir: &Path, c: &TrainedComponent, epoch: usize, fingerprint: &str) -> Result<()> {
    let meta = ComponentMeta {
        spec: c.model.spec.clone(),
        epoch,
        seed: c.seed,
        fingerprint: fingerprint.to_string(),
        history: c.history.clone(),
    };
    let mut store = c.params.clone();
    util::merge_prefixed(&mut store, &c.optimizer.to_store(), "adam.");
    let path = util::epoch_path(&dir.join(&c.model.spec.component), epoch);
    save_checkpoint(&path, &serde_json::to_string(&meta)?, &store)?;
    Ok(())
}

fn load_component(dir: &Path, c: &mut TrainedComponent, lr: f64) -> Result<usize> {
    let cdir = dir.join(&c.model.spec.component);
    let epoch = util::latest_epoch(&cdir).ok_or_else(|| {
        Error::Validation(format!("no stage-1 checkpoint for {} in {}", c.model.spec.component, cdir.display()))
    })?;
    let (meta, store) = load_checkpoint(&util::epoch_path(&cdir, epoch))?;
    let meta: ComponentMeta = serde_json::from_str(&meta)?;
    if meta.spec != c.model.spec {
        return Err(Error::Config(format!(
            "stage-1 checkpoint for {} was trained with a different architecture",
            c.model.spec.component
        )));
    }
    let params = ParamStore::from_map(
        store
            .iter()
            .filter(|(k, _)| !k.starts_with("adam."))
            .map(|(k, v)| (k.to_string(), v.clone()))
            .collect(),
    );
    if params.names().ne(c.params.names()) {
        return Err(Error::Config(format!(
            "stage-1 checkpoint for {} has a different parameter set",
            c.model.spec.component
        )));
    }
    c.params = params;
    c.optimizer = Adam::from_store(
        AdamConfig {
            lr,
            ..AdamConfig::default()
        },
        &util::strip_prefixed(&store, "adam."),
    );
    c.history = meta.history;
    c.seed = meta.seed;
    Ok(epoch)
}

/// Loads the latest stage-1 checkpoint written under `dir` (the `stage1`
/// directory itself).
pub fn load_stage1(dir: &Path, model: &ModelConfig, attention: bool) -> Result<Stage1Checkpoint> {
    let meta: Stage1Meta = util::read_json(&dir.join("meta.json"))?;
    let mut components = init_components(&meta.layout, model, attention, 0);
    let mut epoch = usize::MAX;
    for c in &mut components {
        epoch = epoch.min(load_component(dir, c, AdamConfig::default().lr)?);
    }
    Ok(Stage1Checkpoint {
        components,
        epoch,
        fingerprint: meta.fingerprint,
        layout: meta.layout,
    })
}

/// Everything `train_stage1` needs besides the data.
#[derive(Clone, Debug)]
pub struct Stage1Options<'a> {
    pub model: &'a ModelConfig,
    pub schedule: &'a StageSchedule,
    pub attention: bool,
    pub seed: u64,
    pub fingerprint: String,
    /// Run directory; checkpoints go to `<out>/stage1`.
    pub out_dir: Option<&'a Path>,
}

fn train_component(
    c: &mut TrainedComponent,
    inputs: &Tensor,
    opts: &Stage1Options,
    first_epoch: usize,
    dir: Option<&Path>,
) -> Result<usize> {
    let sched = opts.schedule;
    let n = inputs.dim(0);
    let mut rng = ChaCha8Rng::seed_from_u64(c.seed ^ (first_epoch as u64).wrapping_mul(0xA5A5));
    let name = c.model.spec.component.clone();
    let mut last = first_epoch - 1;
    for epoch in first_epoch..=sched.epochs {
        for s in 0..sched.steps_per_epoch {
            let idx = util::batch_indices(n, sched.batch_size, &mut rng);
            let grads = {
                let b = Binder::train(&c.params);
                let x = Var::constant(util::gather(inputs, &idx));
                let loss = c.model.reconstruct(&b, &x)?.sub(&x).abs().mean();
                let step = (epoch - 1) * sched.steps_per_epoch + s;
                util::ensure_finite(&format!("stage1/{name}"), step, "reconstruction", loss.item())?;
                loss.backward();
                b.grads()
            };
            c.optimizer.step(&mut c.params, &grads);
        }
        let l1 = reconstruction_l1(c, inputs)?;
        util::ensure_finite(&format!("stage1/{name}"), epoch * sched.steps_per_epoch, "evaluation", l1)?;
        if let Some(&prev) = c.history.last() {
            if l1 > prev * 1.05 {
                warn!("stage1/{name}: epoch {epoch} L1 {l1:.5} regressed from {prev:.5}");
            }
        }
        c.history.push(l1);
        info!("stage1/{name}: epoch {epoch} train L1 {l1:.5}");
        if let Some(d) = dir {
            save_component(d, c, epoch, &opts.fingerprint)?;
        }
        last = epoch;
        if sched.stop_below.is_some_and(|t| l1 < t) {
            break;
        }
    }
    Ok(last)
}

/// Trains every component autoencoder on the pair sketches. Components run
/// in parallel, each with its own seed, so the result does not depend on
/// scheduling.
pub fn train_stage1(pairs: &[ImagePair], layout: &RegionLayout, opts: &Stage1Options) -> Result<Stage1Checkpoint> {
    if pairs.is_empty() {
        return Err(Error::Validation("stage 1 needs at least one training pair".into()));
    }
    layout.validate()?;
    opts.schedule.validate("stage1")?;
    let inputs = component_inputs(pairs, layout)?;
    let mut components = init_components(layout, opts.model, opts.attention, opts.seed);
    let lr = opts.schedule.lr;
    for c in &mut components {
        c.optimizer.config.lr = lr;
    }
    let dir = opts.out_dir.map(stage1_dir);
    let mut first_epoch = 1;
    if opts.schedule.resume {
        if let Some(d) = dir.as_deref().filter(|d| d.join("meta.json").exists()) {
            let mut resumed = usize::MAX;
            for c in &mut components {
                resumed = resumed.min(load_component(d, c, lr)?);
            }
            info!("stage1: resuming after epoch {resumed}");
            first_epoch = resumed + 1;
        }
    }
    let names = layout.component_names();
    let write_meta = |epoch: usize, comps: &[TrainedComponent]| -> Result<()> {
        match &dir {
            Some(d) => util::write_json(
                &d.join("meta.json"),
                &Stage1Meta {
                    fingerprint: opts.fingerprint.clone(),
                    epoch,
                    components: names.clone(),
                    seeds: comps.iter().map(|c| c.seed).collect(),
                    layout: layout.clone(),
                },
            ),
            None => Ok(()),
        }
    };
    write_meta(first_epoch - 1, &components)?;
    let results: Vec<Result<(TrainedComponent, usize)>> = par::map_range(components.len(), |i| {
        let mut c = components[i].clone();
        let e = train_component(&mut c, &inputs[i], opts, first_epoch, dir.as_deref())
            .map_err(|e| e.in_stage(&format!("stage1/{}", names[i])))?;
        Ok((c, e))
    });
    let mut trained = Vec::with_capacity(results.len());
    let mut epoch = usize::MAX;
    for r in results {
        let (c, e) = r?;
        epoch = epoch.min(e);
        trained.push(c);
    }
    let ckpt = Stage1Checkpoint {
        components: trained,
        epoch,
        fingerprint: opts.fingerprint.clone(),
        layout: layout.clone(),
    };
    write_meta(ckpt.epoch, &ckpt.components)?;
    Ok(ckpt)
}
