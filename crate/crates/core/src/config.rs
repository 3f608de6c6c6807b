//! Experiment configuration, read from TOML.
//!
//! Every section and key is optional; missing values take the desk-scale
//! defaults below. `SKETCH2IMG_SEED` in the environment overrides `seed`.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::layout::{ComponentLayout, Rect, RegionLayout};
use crate::data::SketchParams;
use crate::error::{Error, Result};

pub const SEED_ENV: &str = "SKETCH2IMG_SEED";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub name: String,
    pub seed: u64,
    pub output_dir: PathBuf,
    pub deterministic: bool,
    pub data: DataConfig,
    pub model: ModelConfig,
    pub loss: LossWeights,
    pub toggles: Toggles,
    pub train: TrainConfig,
    pub saliency: SaliencyConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            name: "experiment".into(),
            seed: 7,
            output_dir: PathBuf::from("runs/experiment"),
            deterministic: true,
            data: DataConfig::default(),
            model: ModelConfig::default(),
            loss: LossWeights::default(),
            toggles: Toggles::all_on(),
            train: TrainConfig::default(),
            saliency: SaliencyConfig::default(),
        }
    }
}

/// Explicit rectangles `[x0, y0, x1, y1]` for the four facial regions.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LayoutConfig {
    pub left_eye: [usize; 4],
    pub right_eye: [usize; 4],
    pub nose: [usize; 4],
    pub mouth: [usize; 4],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub target_size: usize,
    pub split_ratio: f64,
    pub split_seed: u64,
    /// NDJSON manifest; when absent, procedural faces are generated.
    pub manifest: Option<PathBuf>,
    pub synthetic_identities: usize,
    pub synthetic_per_identity: usize,
    pub layout: Option<LayoutConfig>,
    /// Region JSON written by `adapt-nonfacial`; switches to non-facial mode.
    pub regions_file: Option<PathBuf>,
    pub sketch: SketchParams,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            target_size: 64,
            split_ratio: 0.9,
            split_seed: 0,
            manifest: None,
            synthetic_identities: 10,
            synthetic_per_identity: 1,
            layout: None,
            regions_file: None,
            sketch: SketchParams::default(),
        }
    }
}

impl DataConfig {
    /// The region layout for a square canvas of `target_size`.
    pub fn region_layout(&self) -> Result<RegionLayout> {
        let s = self.target_size;
        let layout = if let Some(path) = &self.regions_file {
            crate::util::read_json::<RegionLayout>(path)?
        } else if let Some(l) = &self.layout {
            ComponentLayout {
                left_eye: Rect::from_array(l.left_eye),
                right_eye: Rect::from_array(l.right_eye),
                nose: Rect::from_array(l.nose),
                mouth: Rect::from_array(l.mouth),
                canvas: (s, s),
            }
            .to_regions()
        } else {
            ComponentLayout::default_for(s, s).to_regions()
        };
        if layout.canvas != (s, s) {
            return Err(Error::Layout(format!(
                "layout canvas {:?} does not match target size {s}",
                layout.canvas
            )));
        }
        layout.validate()?;
        Ok(layout)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub latent_dim: usize,
    /// Channel width of the first autoencoder stage.
    pub base_width: usize,
    /// Channels `C_f` of the assembled feature canvas.
    pub feature_channels: usize,
    /// Photo-to-feature-canvas downscale.
    pub feature_stride: usize,
    pub gate_hidden: usize,
    pub residual_blocks: usize,
    pub disc_width: usize,
    pub disc_conditional: bool,
    pub sarr_width: usize,
    pub sarr_iters: usize,
    pub embed_dim: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            latent_dim: 64,
            base_width: 8,
            feature_channels: 32,
            feature_stride: 2,
            gate_hidden: 16,
            residual_blocks: 2,
            disc_width: 16,
            disc_conditional: false,
            sarr_width: 16,
            sarr_iters: 2,
            embed_dim: 128,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    pub l1: f64,
    pub gan: f64,
    pub perc: f64,
    pub gram: f64,
    pub id: f64,
    /// Per-tap `α_l`; uniform when absent.
    pub gram_taps: Option<Vec<f64>>,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            l1: 100.0,
            gan: 1.0,
            perc: 1.0,
            gram: 50.0,
            id: 1.0,
            gram_taps: None,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [self.l1, self.gan, self.perc, self.gram, self.id];
        let taps = self.gram_taps.iter().flatten();
        if all.iter().chain(taps).any(|w| !w.is_finite() || *w < 0.0) {
            return Err(Error::Config("loss weights must be finite and non-negative".into()));
        }
        Ok(())
    }
}

/// The four ablation switches.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Toggles {
    pub sa: bool,
    pub afig: bool,
    pub gm: bool,
    pub sarr: bool,
}

impl Default for Toggles {
    fn default() -> Self {
        Self::all_on()
    }
}

impl Toggles {
    pub const fn all_on() -> Self {
        Self {
            sa: true,
            afig: true,
            gm: true,
            sarr: true,
        }
    }

    pub const fn none() -> Self {
        Self {
            sa: false,
            afig: false,
            gm: false,
            sarr: false,
        }
    }

    /// Short label such as `SA+AFIG+GM`, or `baseline` when all are off.
    pub fn label(&self) -> String {
        let names: Vec<&str> = [
            (self.sa, "SA"),
            (self.afig, "AFIG"),
            (self.gm, "GM"),
            (self.sarr, "SARR"),
        ]
        .iter()
        .filter(|(on, _)| *on)
        .map(|(_, n)| *n)
        .collect();
        if names.is_empty() {
            "baseline".into()
        } else {
            names.join("+")
        }
    }
}

/// Schedule and optimizer settings for one training stage. An epoch is
/// `steps_per_epoch` optimizer steps.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StageSchedule {
    pub epochs: usize,
    pub steps_per_epoch: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Stop at an epoch boundary once the training L1 falls below this.
    pub stop_below: Option<f64>,
    pub resume: bool,
}

impl Default for StageSchedule {
    fn default() -> Self {
        Self {
            epochs: 10,
            steps_per_epoch: 100,
            batch_size: 8,
            lr: 2e-4,
            stop_below: None,
            resume: false,
        }
    }
}

impl StageSchedule {
    pub fn total_steps(&self) -> usize {
        self.epochs * self.steps_per_epoch
    }

    pub fn validate(&self, stage: &str) -> Result<()> {
        if self.steps_per_epoch == 0 || self.batch_size == 0 {
            return Err(Error::Config(format!("{stage}: steps_per_epoch and batch_size must be positive")));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("{stage}: learning rate must be positive")));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EmbedderConfig {
    pub steps: usize,
    pub lr: f64,
    pub margin: f64,
    pub identities: usize,
    pub per_identity: usize,
}

impl Default for EmbedderConfig {
    fn default() -> Self {
        Self {
            steps: 300,
            lr: 1e-3,
            margin: 1.0,
            identities: 8,
            per_identity: 3,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub stage1: StageSchedule,
    pub stage2: StageSchedule,
    pub sarr: StageSchedule,
    pub embedder: EmbedderConfig,
    /// Update the stage-1 encoders jointly with the stage-2 generator.
    pub joint_finetune: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            stage1: StageSchedule::default(),
            stage2: StageSchedule {
                batch_size: 4,
                ..StageSchedule::default()
            },
            sarr: StageSchedule {
                batch_size: 4,
                ..StageSchedule::default()
            },
            embedder: EmbedderConfig::default(),
            joint_finetune: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SaliencyConfig {
    pub quantiles: Vec<f64>,
    /// Bands at or above this index feed the clustering.
    pub min_band: usize,
    pub eps: f64,
    pub min_pts: usize,
    pub max_components: usize,
    pub margin: f64,
    pub smoothing_sigma: f64,
    /// Directory of sketch images to adapt.
    pub input_dir: Option<PathBuf>,
}

impl Default for SaliencyConfig {
    fn default() -> Self {
        Self {
            quantiles: vec![0.5, 0.75, 0.9],
            min_band: 2,
            eps: 2.5,
            min_pts: 8,
            max_components: 4,
            margin: 0.1,
            smoothing_sigma: 1.0,
            input_dir: None,
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml_str(s: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(s).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads a config file, resolves relative data paths against its
    /// directory and applies the seed override.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Self::from_toml_str(&text)?;
        let base = path.parent().unwrap_or(Path::new("."));
        for p in [&mut cfg.data.manifest, &mut cfg.data.regions_file, &mut cfg.saliency.input_dir]
            .into_iter()
            .flatten()
        {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        cfg.apply_env_seed()?;
        Ok(cfg)
    }

    pub fn apply_env_seed(&mut self) -> Result<()> {
        if let Ok(v) = std::env::var(SEED_ENV) {
            self.seed = v
                .trim()
                .parse()
                .map_err(|_| Error::Config(format!("{SEED_ENV}={v:?} is not an unsigned integer")))?;
        }
        Ok(())
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        let d = &self.data;
        if !(d.split_ratio > 0.0 && d.split_ratio < 1.0) {
            return Err(Error::Config(format!("split_ratio {} outside (0, 1)", d.split_ratio)));
        }
        if d.target_size < 16 {
            return Err(Error::Config("target_size must be at least 16".into()));
        }
        let m = &self.model;
        if m.latent_dim == 0 || m.base_width == 0 || m.feature_channels == 0 || m.embed_dim == 0 {
            return Err(Error::Config("model widths must be positive".into()));
        }
        if m.feature_stride == 0 || d.target_size % m.feature_stride != 0 {
            return Err(Error::Config("feature_stride must divide target_size".into()));
        }
        if m.sarr_iters == 0 {
            return Err(Error::Config("sarr_iters must be at least 1".into()));
        }
        self.loss.validate()?;
        self.train.stage1.validate("stage1")?;
        self.train.stage2.validate("stage2")?;
        self.train.sarr.validate("sarr")?;
        Ok(())
    }

    /// Content hash of the full configuration.
    pub fn fingerprint(&self) -> String {
        crate::util::fingerprint(self)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_through_toml() {
        let c = ExperimentConfig::default();
        let back = ExperimentConfig::from_toml_str(&c.to_toml_string()).unwrap();
        assert_eq!(c, back);
    }

    #[test]
    fn partial_config_fills_defaults() {
        let c = ExperimentConfig::from_toml_str(
            "seed = 3\n[toggles]\ngm = false\n[train]\njoint_finetune = false\n[train.stage2]\nepochs = 2\n",
        )
        .unwrap();
        assert_eq!(c.seed, 3);
        assert!(!c.toggles.gm && c.toggles.sa);
        assert_eq!(c.train.stage2.epochs, 2);
        assert!(!c.train.joint_finetune);
        assert_eq!(c.model.latent_dim, 64);
    }

    #[test]
    fn rejects_bad_values() {
        assert!(ExperimentConfig::from_toml_str("[data]\nsplit_ratio = 1.0").is_err());
        assert!(ExperimentConfig::from_toml_str("[loss]\nl1 = -1.0").is_err());
        assert!(ExperimentConfig::from_toml_str("bogus = 1").is_err());
    }

    #[test]
    fn explicit_layout_is_validated() {
        let ok = "[data.layout]\nleft_eye=[8,16,32,32]\nright_eye=[34,16,56,32]\nnose=[24,32,40,42]\nmouth=[19,44,45,52]\n";
        let c = ExperimentConfig::from_toml_str(ok).unwrap();
        assert_eq!(c.data.region_layout().unwrap().regions[0].rect, Rect::new(8, 16, 32, 32));
        let bad = ok.replace("nose=[24,32,40,42]", "nose=[24,30,40,42]");
        let c = ExperimentConfig::from_toml_str(&bad).unwrap();
        assert!(c.data.region_layout().is_err());
    }

    #[test]
    fn labels() {
        assert_eq!(Toggles::none().label(), "baseline");
        assert_eq!(Toggles::all_on().label(), "SA+AFIG+GM+SARR");
    }
}
