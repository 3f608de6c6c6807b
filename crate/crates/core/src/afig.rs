//! Stage 2: feature mapping of component latents onto a shared canvas, the
//! coordinate-gated fusion generator, the patch discriminator and the
//! adversarial training loop.

use std::path::{Path, PathBuf};

use log::{info, warn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use s2i_tensor::io::{load_checkpoint, save_checkpoint};
use s2i_tensor::{Adam, AdamConfig, Binder, PadMode, ParamStore, Tensor, Var};

use crate::blocks::{gated_fuse, lrelu, make_coordinate_map, Conv2d, GateNet, Linear, ResidualBlock, SpConv};
use crate::config::{LossWeights, ModelConfig, StageSchedule};
use crate::data::layout::{split_batch, Rect, RegionLayout, REMAINDER};
use crate::data::{batch, ImagePair};
use crate::error::{Error, Result};
use crate::losses::{gan_loss_d, gan_loss_g, gram_loss, l1_loss, perceptual_loss, GramWeights, RandomPyramid};
use crate::stage1::{AutoencoderSpec, ComponentAutoencoder, Stage1Checkpoint};
use crate::util;

/// Spatial feature maps of every component with their canvas placement.
#[derive(Clone, Debug)]
pub struct FeatureMapSet {
    /// `(component, [N, C_f, h, w] map, placement)`; the remainder spans the
    /// whole feature canvas.
    pub maps: Vec<(String, Var, Rect)>,
}

/// One latent-to-feature-map decoder.
#[derive(Clone, Debug)]
struct FmDecoder {
    fc: Linear,
    convs: Vec<Conv2d>,
    seed: (usize, usize),
    target: (usize, usize),
    channels: usize,
}

const FM_UPSAMPLES: usize = 2;

impl FmDecoder {
    fn new(store: &mut ParamStore, rng: &mut impl Rng, name: &str, latent: usize, channels: usize, target: (usize, usize)) -> Self {
        let f = 1 << FM_UPSAMPLES;
        let seed = (target.0.div_ceil(f), target.1.div_ceil(f));
        let fc = Linear::new(store, rng, &format!("{name}.fc"), latent, channels * seed.0 * seed.1);
        let convs = (0..FM_UPSAMPLES)
            .map(|i| Conv2d::new(store, rng, &format!("{name}.conv{i}"), channels, channels, 3, 1, PadMode::Reflect))
            .collect();
        Self {
            fc,
            convs,
            seed,
            target,
            channels,
        }
    }

    fn forward(&self, b: &Binder, z: &Var) -> Var {
        let n = z.shape()[0];
        let mut h = lrelu(&self.fc.forward(b, z)).reshape(&[n, self.channels, self.seed.0, self.seed.1]);
        let last = self.convs.len() - 1;
        for (i, c) in self.convs.iter().enumerate() {
            h = c.forward(b, &h.upsample_nearest(2));
            if i != last {
                h = lrelu(&h);
            }
        }
        h.crop2d(0, self.target.0, 0, self.target.1)
    }
}

/// Feature Mapping: one independent decoder per component.
#[derive(Clone, Debug)]
pub struct FeatureMapper {
    decoders: Vec<(String, Rect, FmDecoder)>,
    pub latent_dim: usize,
    pub channels: usize,
    pub feature_layout: RegionLayout,
}

impl FeatureMapper {
    pub fn new(store: &mut ParamStore, rng: &mut impl Rng, feature_layout: &RegionLayout, latent_dim: usize, channels: usize) -> Self {
        let (fh, fw) = feature_layout.canvas;
        let decoders = feature_layout
            .regions
            .iter()
            .map(|r| (r.name.clone(), r.rect))
            .chain(std::iter::once((REMAINDER.to_string(), Rect::new(0, 0, fw, fh))))
            .map(|(name, rect)| {
                let d = FmDecoder::new(store, rng, &format!("fm.{name}"), latent_dim, channels, (rect.height(), rect.width()));
                (name, rect, d)
            })
            .collect();
        Self {
            decoders,
            latent_dim,
            channels,
            feature_layout: feature_layout.clone(),
        }
    }

    /// Maps one `[N, latent_dim]` latent per component (layout order,
    /// remainder last) to placed feature maps.
    pub fn project(&self, b: &Binder, latents: &[Var]) -> Result<FeatureMapSet> {
        if latents.len() != self.decoders.len() {
            return Err(Error::Shape(format!(
                "{} latents for {} components",
                latents.len(),
                self.decoders.len()
            )));
        }
        let mut maps = Vec::with_capacity(latents.len());
        for ((name, rect, d), z) in self.decoders.iter().zip(latents) {
            if z.shape().len() != 2 || z.shape()[1] != self.latent_dim {
                return Err(Error::Shape(format!(
                    "{name} latent has shape {:?}, expected [N,{}]",
                    z.shape(),
                    self.latent_dim
                )));
            }
            maps.push((name.clone(), d.forward(b, z), *rect));
        }
        Ok(FeatureMapSet { maps })
    }
}

/// Writes every map into its rectangle and the remainder map into the
/// uncovered cells. Returns the `[N, C, H, W]` canvas and the `[H, W]`
/// write-count mask. Overlapping regions are only accepted when the layout
/// allows it; later regions then own the shared cells.
pub fn assemble_canvas(maps: &FeatureMapSet, layout: &RegionLayout) -> Result<(Var, Tensor)> {
    layout.validate()?;
    let (h, w) = layout.canvas;
    if maps.maps.len() != layout.regions.len() + 1 {
        return Err(Error::Shape(format!(
            "{} maps for {} regions plus remainder",
            maps.maps.len(),
            layout.regions.len()
        )));
    }
    if layout.has_overlap() {
        warn!("feature canvas regions overlap; later regions overwrite earlier ones");
    }
    let owners = layout.ownership_masks();
    let mut count = Tensor::zeros(&[h, w]);
    let mut canvas: Option<Var> = None;
    let mut add = |v: Var, mask: &Tensor, count: &mut Tensor| {
        count.add_assign(mask);
        let part = v.mul(&Var::constant(mask.reshape(&[1, 1, h, w])));
        canvas = Some(match canvas.take() {
            Some(c) => c.add(&part),
            None => part,
        });
    };
    for ((name, map, rect), (region, owner)) in maps.maps.iter().zip(layout.regions.iter().zip(&owners)) {
        if *name != region.name || *rect != region.rect {
            return Err(Error::Layout(format!("map {name} at {rect:?} does not match region {}", region.name)));
        }
        let s = map.shape();
        if s.len() != 4 || s[2] != rect.height() || s[3] != rect.width() || rect.x1 > w || rect.y1 > h {
            return Err(Error::Layout(format!("map {name} {s:?} does not fit {rect:?}")));
        }
        add(map.embed2d(h, w, rect.y0, rect.x0), owner, &mut count);
    }
    let (_, rem, _) = maps.maps.last().expect("non-empty");
    if rem.shape().len() != 4 || rem.shape()[2..] != [h, w] {
        return Err(Error::Layout(format!("remainder map {:?} does not cover the {h}x{w} canvas", rem.shape())));
    }
    let rem_mask = owners.iter().fold(Tensor::ones(&[h, w]), |acc, m| acc.zip_map(m, |a, b| a - b));
    add(rem.clone(), &rem_mask, &mut count);
    Ok((canvas.expect("at least the remainder"), count))
}

/// How the fusion gate is evaluated.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GateMode {
    /// The learned gating network `g(C)`.
    Learned,
    /// Mask replaced by ones.
    ForceOnes,
    /// Mask replaced by zeros.
    ForceZeros,
    /// No gating at all.
    Bypass,
}

/// Coordinate-preserving gated fusion generator.
#[derive(Clone, Debug)]
pub struct CgfGenerator {
    spconv: SpConv,
    gate: GateNet,
    blocks: Vec<ResidualBlock>,
    aux: Conv2d,
    head1: Conv2d,
    head2: Conv2d,
    pub channels: usize,
    pub upscale: usize,
}

impl CgfGenerator {
    pub fn new(store: &mut ParamStore, rng: &mut impl Rng, channels: usize, gate_hidden: usize, residual_blocks: usize, upscale: usize) -> Self {
        let blocks = (0..residual_blocks.max(1))
            .map(|i| ResidualBlock::new(store, rng, &format!("cgf.res{i}"), channels))
            .collect();
        let half = (channels / 2).max(1);
        Self {
            spconv: SpConv::new(store, rng, "cgf.spconv", channels, channels),
            gate: GateNet::new(store, rng, "cgf.gate", gate_hidden),
            blocks,
            aux: Conv2d::new(store, rng, "cgf.aux", 2 * channels, channels, 1, 1, PadMode::Zero),
            head1: Conv2d::new(store, rng, "cgf.head1", channels, half, 3, 1, PadMode::Reflect),
            head2: Conv2d::new(store, rng, "cgf.head2", half, 3, 3, 1, PadMode::Reflect),
            channels,
            upscale,
        }
    }

    /// The gate mask `[1, 1, H, W]` for an `H × W` feature canvas.
    pub fn gate_mask(&self, b: &Binder, h: usize, w: usize, mode: GateMode) -> Result<Option<Var>> {
        Ok(match mode {
            GateMode::Learned => Some(self.gate.forward(b, &make_coordinate_map(w, h)?)),
            GateMode::ForceOnes => Some(Var::constant(Tensor::ones(&[1, 1, h, w]))),
            GateMode::ForceZeros => Some(Var::constant(Tensor::zeros(&[1, 1, h, w]))),
            GateMode::Bypass => None,
        })
    }

    /// SPConv features after gating.
    pub fn fuse(&self, b: &Binder, canvas: &Var, mode: GateMode) -> Result<Var> {
        let h = self.spconv.forward(b, canvas)?;
        let s = h.shape().to_vec();
        match self.gate_mask(b, s[2], s[3], mode)? {
            Some(mask) => gated_fuse(&h, &mask),
            None => Ok(h),
        }
    }

    /// `[N, C, h, w]` canvas → `[N, 3, h·upscale, w·upscale]` image.
    pub fn generate(&self, b: &Binder, canvas: &Var, mode: GateMode) -> Result<Var> {
        let fused = self.fuse(b, canvas, mode)?;
        let mut x = fused.clone();
        let last = self.blocks.len() - 1;
        for (i, blk) in self.blocks.iter().enumerate() {
            if i == last {
                x = self.aux.forward(b, &Var::concat(&[x, fused.clone()], 1));
            }
            x = blk.forward(b, &x)?;
        }
        let up = if self.upscale > 1 { x.upsample_nearest(self.upscale) } else { x };
        Ok(self
            .head2
            .forward(b, &lrelu(&self.head1.forward(b, &up)))
            .sigmoid())
    }
}

/// AFIG-off fallback: all latents concatenated and decoded to the image by
/// one convolutional decoder.
#[derive(Clone, Debug)]
pub struct MonolithicDecoder {
    fc: Linear,
    convs: Vec<Conv2d>,
    out: Conv2d,
    seed: usize,
    channels: usize,
    size: usize,
}

impl MonolithicDecoder {
    pub fn new(store: &mut ParamStore, rng: &mut impl Rng, in_dim: usize, width: usize, size: usize) -> Self {
        let ups = 4;
        let seed = size.div_ceil(1 << ups);
        let channels = 4 * width;
        let widths = [4 * width, 2 * width, 2 * width, width];
        let mut prev = channels;
        let convs = widths
            .iter()
            .enumerate()
            .map(|(i, &c)| {
                let conv = Conv2d::new(store, rng, &format!("mono.conv{i}"), prev, c, 3, 1, PadMode::Reflect);
                prev = c;
                conv
            })
            .collect();
        Self {
            fc: Linear::new(store, rng, "mono.fc", in_dim, channels * seed * seed),
            convs,
            out: Conv2d::new(store, rng, "mono.out", prev, 3, 3, 1, PadMode::Reflect),
            seed,
            channels,
            size,
        }
    }

    pub fn generate(&self, b: &Binder, latents: &[Var]) -> Result<Var> {
        let z = Var::concat(latents, 1);
        if z.shape()[1] != self.fc.in_dim {
            return Err(Error::Shape(format!(
                "monolithic decoder expects {} latent values, got {}",
                self.fc.in_dim,
                z.shape()[1]
            )));
        }
        let n = z.shape()[0];
        let mut h = lrelu(&self.fc.forward(b, &z)).reshape(&[n, self.channels, self.seed, self.seed]);
        for c in &self.convs {
            h = lrelu(&c.forward(b, &h.upsample_nearest(2)));
        }
        Ok(self
            .out
            .forward(b, &h.crop2d(0, self.size, 0, self.size))
            .sigmoid())
    }
}

/// Patch discriminator: four stride-2 convolutions to a realness map.
#[derive(Clone, Debug)]
pub struct Discriminator {
    convs: Vec<Conv2d>,
    pub in_ch: usize,
    pub conditional: bool,
}

impl Discriminator {
    /// Parameters are registered under `prefix` (e.g. `"disc."`).
    pub fn new(store: &mut ParamStore, rng: &mut impl Rng, prefix: &str, width: usize, conditional: bool) -> Self {
        let in_ch = 3 + usize::from(conditional);
        let widths = [width, 2 * width, 4 * width, 1];
        let mut prev = in_ch;
        let convs = widths
            .iter()
            .enumerate()
            .map(|(i, &c)| {
                let conv = Conv2d::new(store, rng, &format!("{prefix}conv{i}"), prev, c, 3, 2, PadMode::Zero);
                prev = c;
                conv
            })
            .collect();
        Self {
            convs,
            in_ch,
            conditional,
        }
    }

    /// `[N, 3, H, W]` image (plus the `[N, 1, H, W]` sketch when
    /// conditional) → `[N, 1, H/16, W/16]` probabilities.
    pub fn discriminate(&self, b: &Binder, image: &Var, sketch: Option<&Var>) -> Result<Var> {
        let x = match (self.conditional, sketch) {
            (true, Some(s)) => Var::concat(&[image.clone(), s.clone()], 1),
            (true, None) => return Err(Error::Shape("conditional discriminator needs the sketch".into())),
            (false, _) => image.clone(),
        };
        let s = x.shape();
        if s.len() != 4 || s[1] != self.in_ch {
            return Err(Error::Shape(format!("discriminator expects {} channels, got {s:?}", self.in_ch)));
        }
        let mut h = x;
        let last = self.convs.len() - 1;
        for (i, c) in self.convs.iter().enumerate() {
            h = c.forward(b, &h);
            if i != last {
                h = lrelu(&h);
            }
        }
        Ok(h.sigmoid())
    }
}

/// What turns component latents into an image.
#[derive(Clone, Debug)]
pub enum GeneratorBody {
    Afig { fm: FeatureMapper, cgf: CgfGenerator },
    Monolithic(MonolithicDecoder),
}

/// Full stage-2 generator: stage-1 encoders plus the image synthesis body.
#[derive(Clone, Debug)]
pub struct Generator {
    pub encoders: Vec<ComponentAutoencoder>,
    pub body: GeneratorBody,
    pub layout: RegionLayout,
    pub size: usize,
}

/// Parameter-name prefix of component `c`'s encoder.
pub fn encoder_prefix(component: &str) -> String {
    format!("{component}.enc.")
}

/// Architecture description sufficient to rebuild a [`Generator`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GeneratorSpec {
    pub encoders: Vec<AutoencoderSpec>,
    pub layout: RegionLayout,
    pub afig: bool,
    pub model: ModelConfig,
}

impl Generator {
    /// Builds the generator; encoder parameters are initialized randomly and
    /// normally overwritten from a stage-1 checkpoint via
    /// [`Generator::from_stage1`].
    pub fn new(store: &mut ParamStore, rng: &mut impl Rng, spec: &GeneratorSpec) -> Result<Self> {
        let layout = &spec.layout;
        let (size, w) = layout.canvas;
        if size != w {
            return Err(Error::Config(format!("canvas must be square, got {size}x{w}")));
        }
        let m = &spec.model;
        let encoders: Vec<ComponentAutoencoder> = spec
            .encoders
            .iter()
            .map(|s| {
                let mut scratch = ParamStore::new();
                let ae = ComponentAutoencoder::new(&mut scratch, rng, &format!("{}.", s.component), s.clone());
                for (k, v) in scratch.iter() {
                    if k.starts_with(&encoder_prefix(&s.component)) {
                        store.insert(k.to_string(), v.clone());
                    }
                }
                ae
            })
            .collect();
        let body = if spec.afig {
            let fl = layout.downscale(m.feature_stride)?;
            GeneratorBody::Afig {
                fm: FeatureMapper::new(store, rng, &fl, m.latent_dim, m.feature_channels),
                cgf: CgfGenerator::new(store, rng, m.feature_channels, m.gate_hidden, m.residual_blocks, m.feature_stride),
            }
        } else {
            GeneratorBody::Monolithic(MonolithicDecoder::new(
                store,
                rng,
                m.latent_dim * encoders.len(),
                m.base_width,
                size,
            ))
        };
        Ok(Self {
            encoders,
            body,
            layout: layout.clone(),
            size,
        })
    }

    /// Generator whose encoders start from the trained stage-1 weights.
    pub fn from_stage1(stage1: &Stage1Checkpoint, model: &ModelConfig, afig: bool, seed: u64) -> Result<(Self, ParamStore)> {
        let spec = GeneratorSpec {
            encoders: stage1.components.iter().map(|c| c.model.spec.clone()).collect(),
            layout: stage1.layout.clone(),
            afig,
            model: model.clone(),
        };
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let g = Self::new(&mut store, &mut rng, &spec)?;
        for c in &stage1.components {
            for (k, v) in c.params.iter() {
                if k.starts_with(&encoder_prefix(&c.model.spec.component)) {
                    *store.get_mut(k).expect("encoder parameter registered") = v.clone();
                }
            }
        }
        Ok((g, store))
    }

    pub fn is_encoder_param(&self, name: &str) -> bool {
        self.encoders
            .iter()
            .any(|e| name.starts_with(&encoder_prefix(&e.spec.component)))
    }

    /// Component latents of a `[N, 1, H, W]` sketch batch.
    pub fn encode(&self, b: &Binder, sketch: &Var) -> Result<Vec<Var>> {
        let s = sketch.shape();
        if s.len() != 4 || s[1] != 1 || (s[2], s[3]) != self.layout.canvas {
            return Err(Error::Shape(format!(
                "generator expects [N,1,{},{}] sketches, got {s:?}",
                self.size, self.size
            )));
        }
        split_batch(sketch, &self.layout)
            .iter()
            .zip(&self.encoders)
            .map(|(x, e)| e.encode(b, x))
            .collect()
    }

    /// Image from component latents.
    pub fn generate_from_latents(&self, b: &Binder, latents: &[Var], mode: GateMode) -> Result<Var> {
        match &self.body {
            GeneratorBody::Afig { fm, cgf } => {
                let maps = fm.project(b, latents)?;
                let (canvas, _) = assemble_canvas(&maps, &fm.feature_layout)?;
                cgf.generate(b, &canvas, mode)
            }
            GeneratorBody::Monolithic(m) => m.generate(b, latents),
        }
    }

    /// `[N, 1, H, W]` sketches → `[N, 3, H, W]` images in `(0, 1)`.
    pub fn forward(&self, b: &Binder, sketch: &Var, mode: GateMode) -> Result<Var> {
        let z = self.encode(b, sketch)?;
        self.generate_from_latents(b, &z, mode)
    }
}

/// Unweighted loss terms of one training step.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub step: usize,
    pub l1: f64,
    pub gan_g: f64,
    pub gan_d: f64,
    pub perc: f64,
    /// Absent when the Gram term is switched off.
    pub gram: Option<f64>,
    /// Only recorded by the refinement stage.
    pub id: Option<f64>,
}

/// Writes loss records as CSV. Optional columns appear only if some record
/// carries them.
pub fn write_losses_csv(path: &Path, records: &[LossRecord]) -> Result<()> {
    let with_gram = records.iter().any(|r| r.gram.is_some());
    let with_id = records.iter().any(|r| r.id.is_some());
    if let Some(p) = path.parent() {
        std::fs::create_dir_all(p).map_err(|e| Error::io(p, e))?;
    }
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::Serde(e.to_string()))?;
    let mut header = vec!["step", "L1", "GAN_g", "GAN_d", "perc"];
    if with_gram {
        header.push("gram");
    }
    if with_id {
        header.push("id");
    }
    w.write_record(&header).map_err(|e| Error::Serde(e.to_string()))?;
    for r in records {
        let mut row = vec![
            r.step.to_string(),
            r.l1.to_string(),
            r.gan_g.to_string(),
            r.gan_d.to_string(),
            r.perc.to_string(),
        ];
        if with_gram {
            row.push(r.gram.map(|v| v.to_string()).unwrap_or_default());
        }
        if with_id {
            row.push(r.id.map(|v| v.to_string()).unwrap_or_default());
        }
        w.write_record(&row).map_err(|e| Error::Serde(e.to_string()))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Settings for [`Stage2Trainer`] and [`train_stage2`].
#[derive(Clone, Debug)]
pub struct Stage2Options<'a> {
    pub model: &'a ModelConfig,
    pub schedule: &'a StageSchedule,
    pub weights: &'a LossWeights,
    pub afig: bool,
    pub gram: bool,
    pub joint_finetune: bool,
    pub seed: u64,
    pub fingerprint: String,
    pub out_dir: Option<&'a Path>,
}

/// Adversarial stage-2 training state.
pub struct Stage2Trainer {
    pub gen: Generator,
    pub spec: GeneratorSpec,
    pub gen_params: ParamStore,
    pub disc: Discriminator,
    pub disc_params: ParamStore,
    pub gen_opt: Adam,
    pub disc_opt: Adam,
    pub weights: LossWeights,
    pub gram: bool,
    pub joint_finetune: bool,
    extractor: RandomPyramid,
    gram_weights: GramWeights,
}

impl Stage2Trainer {
    pub fn new(stage1: &Stage1Checkpoint, opts: &Stage2Options) -> Result<Self> {
        let (gen, gen_params) = Generator::from_stage1(stage1, opts.model, opts.afig, opts.seed)?;
        let spec = GeneratorSpec {
            encoders: gen.encoders.iter().map(|e| e.spec.clone()).collect(),
            layout: gen.layout.clone(),
            afig: opts.afig,
            model: opts.model.clone(),
        };
        let mut rng = ChaCha8Rng::seed_from_u64(opts.seed ^ 0xD15C);
        let mut disc_params = ParamStore::new();
        let disc = Discriminator::new(&mut disc_params, &mut rng, "disc.", opts.model.disc_width, opts.model.disc_conditional);
        let extractor = RandomPyramid::default_rgb();
        let gram_weights = match &opts.weights.gram_taps {
            Some(a) => GramWeights(a.clone()),
            None => GramWeights::uniform(extractor.widths().len()),
        };
        let adam = AdamConfig {
            lr: opts.schedule.lr,
            ..AdamConfig::default()
        };
        Ok(Self {
            gen,
            spec,
            gen_params,
            disc,
            disc_params,
            gen_opt: Adam::new(adam),
            disc_opt: Adam::new(adam),
            weights: opts.weights.clone(),
            gram: opts.gram,
            joint_finetune: opts.joint_finetune,
            extractor,
            gram_weights,
        })
    }

    fn gen_binder(&self) -> Binder<'_> {
        let joint = self.joint_finetune;
        let gen = &self.gen;
        Binder::with_filter(&self.gen_params, move |n| joint || !gen.is_encoder_param(n))
    }

    /// Composite generator objective on a batch against the current
    /// discriminator, with its unweighted terms.
    pub fn generator_objective(&self, b: &Binder, sketch: &Var, photo: &Var) -> Result<(Var, Var, LossRecord)> {
        let fake = self.gen.forward(b, sketch, GateMode::Learned)?;
        let db = Binder::eval(&self.disc_params);
        let d_fake = self.disc.discriminate(&db, &fake, Some(sketch))?;
        let w = &self.weights;
        let l1 = l1_loss(&fake, photo)?;
        let gan = gan_loss_g(&d_fake);
        let perc = perceptual_loss(&fake, photo, &self.extractor)?;
        let mut total = l1.scale(w.l1).add(&gan.scale(w.gan)).add(&perc.scale(w.perc));
        let mut gram_v = None;
        if self.gram {
            let g = gram_loss(&fake, photo, &self.extractor, &self.gram_weights)?;
            gram_v = Some(g.item());
            total = total.add(&g.scale(w.gram));
        }
        let rec = LossRecord {
            step: 0,
            l1: l1.item(),
            gan_g: gan.item(),
            gan_d: f64::NAN,
            perc: perc.item(),
            gram: gram_v,
            id: None,
        };
        Ok((total, fake, rec))
    }

    /// Value of the composite generator objective (no update).
    pub fn generator_loss_value(&self, sketch: &Tensor, photo: &Tensor) -> Result<f64> {
        let b = Binder::eval(&self.gen_params);
        let (total, _, _) = self.generator_objective(&b, &Var::constant(sketch.clone()), &Var::constant(photo.clone()))?;
        Ok(total.item())
    }

    /// One generator-only update with the discriminator frozen.
    pub fn generator_step(&mut self, sketch: &Tensor, photo: &Tensor) -> Result<LossRecord> {
        let (rec, grads) = {
            let b = self.gen_binder();
            let (total, _, rec) = self.generator_objective(&b, &Var::constant(sketch.clone()), &Var::constant(photo.clone()))?;
            total.backward();
            (rec, b.grads())
        };
        self.gen_opt.step(&mut self.gen_params, &grads);
        Ok(rec)
    }

    /// Discriminator update followed by a generator update.
    pub fn step(&mut self, sketch: &Tensor, photo: &Tensor, step: usize) -> Result<LossRecord> {
        let sk = Var::constant(sketch.clone());
        let real = Var::constant(photo.clone());
        let fake = {
            let b = Binder::eval(&self.gen_params);
            self.gen.forward(&b, &sk, GateMode::Learned)?.detach()
        };
        let (gan_d, dgrads) = {
            let db = Binder::train(&self.disc_params);
            let d_real = self.disc.discriminate(&db, &real, Some(&sk))?;
            let d_fake = self.disc.discriminate(&db, &fake, Some(&sk))?;
            let v = gan_loss_d(&d_real, &d_fake);
            v.neg().backward();
            (v.item(), db.grads())
        };
        util::ensure_finite("stage2", step, "discriminator", gan_d)?;
        self.disc_opt.step(&mut self.disc_params, &dgrads);
        let mut rec = self.generator_step(sketch, photo)?;
        for (name, v) in [("L1", rec.l1), ("GAN_g", rec.gan_g), ("perc", rec.perc), ("gram", rec.gram.unwrap_or(0.0))] {
            util::ensure_finite("stage2", step, name, v)?;
        }
        rec.step = step;
        rec.gan_d = gan_d;
        Ok(rec)
    }

    /// Generated images for a sketch batch (inference, learned gate).
    pub fn generate(&self, sketch: &Tensor) -> Result<Tensor> {
        let b = Binder::eval(&self.gen_params);
        Ok(self.gen.forward(&b, &Var::constant(sketch.clone()), GateMode::Learned)?.value().clone())
    }

    /// Mean L1 between generated and real photos over `pairs`.
    pub fn train_l1(&self, pairs: &[ImagePair]) -> Result<f64> {
        let (s, p) = batch(pairs);
        let g = self.generate(&s)?;
        Ok(g.zip_map(&p, |a, b| (a - b).abs()).mean())
    }
}

/// Stage-2 outcome.
pub struct Stage2Checkpoint {
    pub trainer: Stage2Trainer,
    pub epoch: usize,
    pub losses: Vec<LossRecord>,
    /// Training-set L1 after each epoch.
    pub history: Vec<f64>,
    pub fingerprint: String,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Stage2Meta {
    pub fingerprint: String,
    pub epoch: usize,
    pub spec: GeneratorSpec,
    pub gram: bool,
    pub joint_finetune: bool,
    pub history: Vec<f64>,
}

pub fn stage2_dir(out: &Path) -> PathBuf {
    out.join("stage2")
}

fn save_stage2(dir: &Path, ck: &Stage2Checkpoint) -> Result<()> {
    let t = &ck.trainer;
    let meta = Stage2Meta {
        fingerprint: ck.fingerprint.clone(),
        epoch: ck.epoch,
        spec: t.spec.clone(),
        gram: t.gram,
        joint_finetune: t.joint_finetune,
        history: ck.history.clone(),
    };
    let mut store = ParamStore::new();
    util::merge_prefixed(&mut store, &t.gen_params, "gen.");
    util::merge_prefixed(&mut store, &t.disc_params, "");
    util::merge_prefixed(&mut store, &t.gen_opt.to_store(), "adam_g.");
    util::merge_prefixed(&mut store, &t.disc_opt.to_store(), "adam_d.");
    let json = serde_json::to_string(&meta)?;
    save_checkpoint(&util::epoch_path(dir, ck.epoch), &json, &store)?;
    util::write_json(&dir.join("meta.json"), &meta)?;
    write_losses_csv(&dir.join("losses.csv"), &ck.losses)
}

/// Rebuilds the stage-2 generator and discriminator from the latest
/// checkpoint in `dir` (the `stage2` directory itself).
pub fn load_stage2(dir: &Path, weights: &LossWeights, lr: f64) -> Result<Stage2Checkpoint> {
    let epoch = util::latest_epoch(dir)
        .ok_or_else(|| Error::Validation(format!("no stage-2 checkpoint in {}", dir.display())))?;
    let (json, store) = load_checkpoint(&util::epoch_path(dir, epoch))?;
    let meta: Stage2Meta = serde_json::from_str(&json)?;
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut fresh = ParamStore::new();
    let gen = Generator::new(&mut fresh, &mut rng, &meta.spec)?;
    let mut dfresh = ParamStore::new();
    let m = &meta.spec.model;
    let disc = Discriminator::new(&mut dfresh, &mut rng, "disc.", m.disc_width, m.disc_conditional);
    let gen_params = util::strip_prefixed(&store, "gen.");
    let disc_params = ParamStore::from_map(
        store
            .iter()
            .filter(|(k, _)| k.starts_with("disc."))
            .map(|(k, v)| (k.to_string(), v.clone()))
            .collect(),
    );
    if gen_params.names().ne(fresh.names()) || disc_params.names().ne(dfresh.names()) {
        return Err(Error::Config(format!("stage-2 checkpoint in {} does not match its architecture", dir.display())));
    }
    let adam = AdamConfig {
        lr,
        ..AdamConfig::default()
    };
    let extractor = RandomPyramid::default_rgb();
    let gram_weights = match &weights.gram_taps {
        Some(a) => GramWeights(a.clone()),
        None => GramWeights::uniform(extractor.widths().len()),
    };
    let trainer = Stage2Trainer {
        gen,
        spec: meta.spec.clone(),
        gen_params,
        disc,
        disc_params,
        gen_opt: Adam::from_store(adam, &util::strip_prefixed(&store, "adam_g.")),
        disc_opt: Adam::from_store(adam, &util::strip_prefixed(&store, "adam_d.")),
        weights: weights.clone(),
        gram: meta.gram,
        joint_finetune: meta.joint_finetune,
        extractor,
        gram_weights,
    };
    Ok(Stage2Checkpoint {
        trainer,
        epoch,
        losses: Vec::new(),
        history: meta.history,
        fingerprint: meta.fingerprint,
    })
}

/// Adversarial training of the generator (and, with joint fine-tuning, the
/// stage-1 encoders) against a fresh discriminator.
pub fn train_stage2(pairs: &[ImagePair], stage1: &Stage1Checkpoint, opts: &Stage2Options) -> Result<Stage2Checkpoint> {
    if pairs.is_empty() {
        return Err(Error::Validation("stage 2 needs at least one training pair".into()));
    }
    if stage1.components.len() != stage1.layout.num_components() {
        return Err(Error::Validation("stage-1 checkpoint does not match its layout".into()));
    }
    let sched = opts.schedule;
    sched.validate("stage2")?;
    opts.weights.validate()?;
    let dir = opts.out_dir.map(stage2_dir);
    let mut ck = match dir.as_deref().filter(|d| sched.resume && util::latest_epoch(d).is_some()) {
        Some(d) => {
            let ck = load_stage2(d, opts.weights, sched.lr)?;
            info!("stage2: resuming after epoch {}", ck.epoch);
            ck
        }
        None => Stage2Checkpoint {
            trainer: Stage2Trainer::new(stage1, opts)?,
            epoch: 0,
            losses: Vec::new(),
            history: Vec::new(),
            fingerprint: opts.fingerprint.clone(),
        },
    };
    let (sketches, photos) = batch(pairs);
    let n = pairs.len();
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed ^ 0x5712 ^ (ck.epoch as u64) << 20);
    for epoch in ck.epoch + 1..=sched.epochs {
        for s in 0..sched.steps_per_epoch {
            let idx = util::batch_indices(n, sched.batch_size, &mut rng);
            let step = (epoch - 1) * sched.steps_per_epoch + s;
            let rec = ck
                .trainer
                .step(&util::gather(&sketches, &idx), &util::gather(&photos, &idx), step)?;
            ck.losses.push(rec);
        }
        let l1 = ck.trainer.train_l1(pairs)?;
        ck.history.push(l1);
        ck.epoch = epoch;
        info!("stage2: epoch {epoch} train L1 {l1:.5}");
        if let Some(d) = &dir {
            save_stage2(d, &ck)?;
        }
        if sched.stop_below.is_some_and(|t| l1 < t) {
            break;
        }
    }
    Ok(ck)
}
