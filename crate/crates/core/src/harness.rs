//! End-to-end experiment orchestration: data preparation, the three training
//! stages, evaluation, report emission and the ablation suite.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use log::{info, warn};
use serde::{Deserialize, Serialize};

use s2i_tensor::io::load_checkpoint;
use s2i_tensor::{par, Tensor};

use crate::afig::{stage2_dir, train_stage2, LossRecord, Stage2Options, Stage2Trainer};
use crate::config::{ExperimentConfig, LossWeights, Toggles};
use crate::data::io::{load_pair, save_png, to_rgb};
use crate::data::split::{split_dataset, DatasetManifest};
use crate::data::synthetic::synthetic_pairs;
use crate::data::{batch, ImagePair};
use crate::error::{Error, Result};
use crate::losses::RandomPyramid;
use crate::metrics::{evaluate_images, EvalInputs, MetricReport};
use crate::sarr::{sarr_dir, train_embedder, train_sarr_cached, IdentityEmbedder, SarrCheckpoint, SarrOptions};
use crate::stage1::{stage1_dir, train_stage1, Stage1Checkpoint, Stage1Options};
use crate::util;

/// Content hash of the crate sources this binary was built from.
pub const CODE_HASH: &str = env!("SKETCH2IMG_CODE_HASH");

/// Column order of the metric tables.
pub const METRIC_COLUMNS: [&str; 6] = ["fid", "is", "kid", "ssim", "psnr", "lpips"];

/// The seven toggle rows of the ablation table, in table order.
pub const ABLATION_ROWS: [Toggles; 7] = [
    Toggles::none(),
    Toggles {
        sa: true,
        afig: false,
        gm: false,
        sarr: false,
    },
    Toggles {
        sa: true,
        afig: true,
        gm: false,
        sarr: false,
    },
    Toggles {
        sa: true,
        afig: true,
        gm: false,
        sarr: true,
    },
    Toggles {
        sa: true,
        afig: true,
        gm: true,
        sarr: false,
    },
    Toggles {
        sa: true,
        afig: false,
        gm: false,
        sarr: true,
    },
    Toggles::all_on(),
];

/// Test-split tensors kept for the image grid.
#[derive(Clone, Debug, Default)]
pub struct EvalSamples {
    pub sketches: Option<Tensor>,
    pub reals: Option<Tensor>,
    pub coarse: Option<Tensor>,
    pub refined: Option<Tensor>,
}

/// One stage's per-step loss breakdown.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct StageLosses {
    pub stage: String,
    pub records: Vec<LossRecord>,
}

/// Everything a finished experiment produced.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RunRecord {
    pub name: String,
    pub label: String,
    pub toggles: Toggles,
    pub fingerprint: String,
    pub code_hash: String,
    /// Per-component train L1 after each stage-1 epoch.
    pub stage1_curves: BTreeMap<String, Vec<f64>>,
    /// Train L1 after each stage-2 / refinement epoch.
    pub stage2_curve: Vec<f64>,
    pub sarr_curve: Vec<f64>,
    pub losses: Vec<StageLosses>,
    /// Last value of every tracked loss, keyed `stage/term`.
    pub final_losses: BTreeMap<String, f64>,
    pub report: MetricReport,
    pub wall_clock_secs: f64,
    pub output_dir: PathBuf,
    #[serde(skip)]
    pub samples: EvalSamples,
}

/// Tiny settings that run every stage for a couple of steps at 32 px.
pub fn smoke_config(name: &str, output_dir: &Path) -> ExperimentConfig {
    let mut cfg = ExperimentConfig {
        name: name.into(),
        output_dir: output_dir.to_path_buf(),
        ..ExperimentConfig::default()
    };
    cfg.data.target_size = 32;
    cfg.data.synthetic_identities = 4;
    cfg.data.synthetic_per_identity = 2;
    cfg.data.split_ratio = 0.75;
    cfg.model = crate::config::ModelConfig {
        latent_dim: 8,
        base_width: 4,
        feature_channels: 8,
        feature_stride: 2,
        gate_hidden: 4,
        residual_blocks: 1,
        disc_width: 4,
        disc_conditional: false,
        sarr_width: 4,
        sarr_iters: 1,
        embed_dim: 8,
    };
    for s in [&mut cfg.train.stage1, &mut cfg.train.stage2, &mut cfg.train.sarr] {
        s.epochs = 1;
        s.steps_per_epoch = 2;
        s.batch_size = 2;
    }
    cfg.train.embedder.steps = 2;
    cfg.train.embedder.identities = 3;
    cfg.train.embedder.per_identity = 2;
    cfg
}

/// Train and test pairs for a config: read from the manifest when given,
/// otherwise rendered synthetic faces.
pub fn prepare_pairs(cfg: &ExperimentConfig) -> Result<(Vec<ImagePair>, Vec<ImagePair>)> {
    let d = &cfg.data;
    let pairs = match &d.manifest {
        Some(path) => {
            let m = DatasetManifest::read(path)?;
            m.entries
                .iter()
                .map(|e| load_pair(&e.sketch, &e.photo, d.target_size, &e.id))
                .collect::<Result<Vec<_>>>()?
        }
        None => synthetic_pairs(d.synthetic_identities, d.synthetic_per_identity, d.target_size, cfg.seed, &d.sketch)?,
    };
    split_dataset(&pairs, d.split_ratio, d.split_seed)
}

/// Writes the synthetic dataset as PNGs plus a manifest under `dir`.
pub fn write_synthetic_dataset(cfg: &ExperimentConfig, dir: &Path) -> Result<PathBuf> {
    let d = &cfg.data;
    let pairs = synthetic_pairs(d.synthetic_identities, d.synthetic_per_identity, d.target_size, cfg.seed, &d.sketch)?;
    let mut entries = Vec::with_capacity(pairs.len());
    for (i, p) in pairs.iter().enumerate() {
        let sketch = PathBuf::from(format!("sketches/{i:04}.png"));
        let photo = PathBuf::from(format!("photos/{i:04}.png"));
        save_png(&p.sketch, &dir.join(&sketch))?;
        save_png(&p.photo, &dir.join(&photo))?;
        entries.push(crate::data::split::ManifestEntry {
            sketch,
            photo,
            id: p.identity_id.clone(),
        });
    }
    let path = dir.join("manifest.jsonl");
    DatasetManifest::new(entries).write(&path)?;
    Ok(path)
}

/// Loss weights actually used for a toggle row: the perceptual term belongs
/// to the feature-mapping generator and is dropped without it.
pub fn effective_weights(w: &LossWeights, toggles: &Toggles) -> LossWeights {
    let mut w = w.clone();
    if !toggles.afig {
        w.perc = 0.0;
    }
    w
}

fn record_finals(out: &mut BTreeMap<String, f64>, stage: &str, r: &LossRecord) {
    for (k, v) in [("L1", Some(r.l1)), ("GAN_g", Some(r.gan_g)), ("GAN_d", Some(r.gan_d)), ("perc", Some(r.perc)), ("gram", r.gram), ("id", r.id)] {
        if let Some(v) = v {
            out.insert(format!("{stage}/{k}"), v);
        }
    }
}

fn stage_err(stage: &'static str) -> impl Fn(Error) -> Error {
    move |e| match e {
        e @ Error::Stage { .. } => e,
        e => e.in_stage(stage),
    }
}

/// Identity embedder used for evaluation and refinement.
pub fn run_embedder(cfg: &ExperimentConfig) -> Result<IdentityEmbedder> {
    let (e, _) = train_embedder(cfg.data.target_size, cfg.model.embed_dim, &cfg.train.embedder, cfg.seed ^ 0xE7A)?;
    Ok(e)
}

pub fn sarr_options<'a>(cfg: &'a ExperimentConfig, weights: &'a LossWeights, embedder: Option<&'a IdentityEmbedder>, out: Option<&'a Path>) -> SarrOptions<'a> {
    SarrOptions {
        width: cfg.model.sarr_width,
        iters: cfg.model.sarr_iters,
        embed_dim: cfg.model.embed_dim,
        disc_width: cfg.model.disc_width,
        disc_conditional: cfg.model.disc_conditional,
        schedule: &cfg.train.sarr,
        weights,
        embedder: &cfg.train.embedder,
        pretrained_embedder: embedder,
        seed: cfg.seed,
        fingerprint: cfg.fingerprint(),
        out_dir: out,
    }
}

pub fn stage2_options<'a>(cfg: &'a ExperimentConfig, weights: &'a LossWeights, out: Option<&'a Path>) -> Stage2Options<'a> {
    Stage2Options {
        model: &cfg.model,
        schedule: &cfg.train.stage2,
        weights,
        afig: cfg.toggles.afig,
        gram: cfg.toggles.gm,
        joint_finetune: cfg.train.joint_finetune,
        seed: cfg.seed,
        fingerprint: cfg.fingerprint(),
        out_dir: out,
    }
}

/// Generates (and optionally refines) the test split and scores it.
pub fn evaluate_split(
    cfg: &ExperimentConfig,
    stage2: &Stage2Trainer,
    sarr: Option<&SarrCheckpoint>,
    embedder: &IdentityEmbedder,
    train: &[ImagePair],
    test: &[ImagePair],
) -> Result<(MetricReport, EvalSamples)> {
    if test.is_empty() {
        return Err(Error::Validation("the test split is empty".into()));
    }
    let (sketches, reals) = batch(test);
    let coarse = stage2.generate(&sketches)?;
    let refined = match sarr {
        Some(s) => Some(s.refine(&coarse, &sketches, s.model.spec.iters)?),
        None => None,
    };
    let out = refined.as_ref().unwrap_or(&coarse);
    let labels: Vec<String> = test.iter().map(|p| p.identity_id.clone()).collect();
    let mut gallery_pairs: Vec<&ImagePair> = Vec::new();
    for p in test.iter().chain(train) {
        if !gallery_pairs.iter().any(|g| g.identity_id == p.identity_id) {
            gallery_pairs.push(p);
        }
    }
    let gallery = Tensor::stack(&gallery_pairs.iter().map(|p| p.photo.clone()).collect::<Vec<_>>());
    let gallery_labels: Vec<String> = gallery_pairs.iter().map(|p| p.identity_id.clone()).collect();
    let ext = RandomPyramid::default_rgb();
    let report = evaluate_images(
        &EvalInputs {
            fake: out,
            real: &reals,
            labels: Some(&labels),
            identity: Some(embedder),
            gallery: Some((&gallery, &gallery_labels)),
            extractor: &ext,
        },
        &cfg.fingerprint(),
    )?;
    Ok((
        report,
        EvalSamples {
            sketches: Some(sketches),
            reals: Some(reals),
            coarse: Some(coarse),
            refined,
        },
    ))
}

/// Stage 1 → stage 2 → refinement (when toggled) → evaluation on the test
/// split. Artifacts land in `cfg.output_dir`.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<RunRecord> {
    cfg.validate()?;
    let start = Instant::now();
    let out = cfg.output_dir.clone();
    std::fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
    let mut saved = cfg.clone();
    for p in [&mut saved.data.manifest, &mut saved.data.regions_file, &mut saved.saliency.input_dir]
        .into_iter()
        .flatten()
    {
        *p = std::path::absolute(&*p).map_err(|e| Error::io(&*p, e))?;
    }
    std::fs::write(out.join("config.toml"), saved.to_toml_string()).map_err(|e| Error::io(&out, e))?;
    let fingerprint = cfg.fingerprint();
    let (train, test) = prepare_pairs(cfg).map_err(stage_err("data"))?;
    let layout = cfg.data.region_layout().map_err(stage_err("data"))?;
    info!("{}: {} train / {} test pairs, fingerprint {fingerprint}", cfg.name, train.len(), test.len());

    let s1 = train_stage1(
        &train,
        &layout,
        &Stage1Options {
            model: &cfg.model,
            schedule: &cfg.train.stage1,
            attention: cfg.toggles.sa,
            seed: cfg.seed,
            fingerprint: fingerprint.clone(),
            out_dir: Some(&out),
        },
    )
    .map_err(stage_err("stage1"))?;
    let weights = effective_weights(&cfg.loss, &cfg.toggles);
    let s2 = train_stage2(&train, &s1, &stage2_options(cfg, &weights, Some(&out))).map_err(stage_err("stage2"))?;
    let embedder = run_embedder(cfg).map_err(stage_err("sarr"))?;
    let sarr = if cfg.toggles.sarr {
        let (sk, ph) = batch(&train);
        let coarse = s2.trainer.generate(&sk).map_err(stage_err("sarr"))?;
        let opts = sarr_options(cfg, &weights, Some(&embedder), Some(&out));
        Some(train_sarr_cached(&sk, &ph, &coarse, &opts).map_err(stage_err("sarr"))?)
    } else {
        None
    };
    let (report, samples) =
        evaluate_split(cfg, &s2.trainer, sarr.as_ref(), &embedder, &train, &test).map_err(stage_err("evaluate"))?;

    let mut final_losses = BTreeMap::new();
    let mut stage1_curves = BTreeMap::new();
    for c in &s1.components {
        let name = c.model.spec.component.clone();
        if let Some(&v) = c.history.last() {
            final_losses.insert(format!("stage1/{name}"), v);
        }
        stage1_curves.insert(name, c.history.clone());
    }
    let mut losses = vec![StageLosses {
        stage: "stage2".into(),
        records: s2.losses.clone(),
    }];
    if let Some(r) = s2.losses.last() {
        record_finals(&mut final_losses, "stage2", r);
    }
    if let Some(s) = &sarr {
        if let Some(r) = s.losses.last() {
            record_finals(&mut final_losses, "sarr", r);
        }
        losses.push(StageLosses {
            stage: "sarr".into(),
            records: s.losses.clone(),
        });
    }
    let record = RunRecord {
        name: cfg.name.clone(),
        label: cfg.toggles.label(),
        toggles: cfg.toggles,
        fingerprint,
        code_hash: CODE_HASH.into(),
        stage1_curves,
        stage2_curve: s2.history.clone(),
        sarr_curve: sarr.as_ref().map(|s| s.history.clone()).unwrap_or_default(),
        losses,
        final_losses,
        report,
        wall_clock_secs: start.elapsed().as_secs_f64(),
        output_dir: out.clone(),
        samples,
    };
    emit_report(&record, &out).map_err(stage_err("report"))?;
    Ok(record)
}

/// Files written by [`emit_report`].
#[derive(Clone, Debug)]
pub struct ReportFiles {
    pub report_json: PathBuf,
    pub losses_csv: PathBuf,
    pub metrics_csv: PathBuf,
    pub grid_png: Option<PathBuf>,
    pub record_json: PathBuf,
}

fn csv_err(e: csv::Error) -> Error {
    Error::Serde(e.to_string())
}

fn metric_cell(report: &MetricReport, name: &str) -> String {
    match report.get(name) {
        Some(v) if v == f64::INFINITY => "inf".into(),
        Some(v) => v.to_string(),
        None => String::new(),
    }
}

/// Writes the metric table (header `config,fid,is,kid,ssim,psnr,lpips`).
pub fn write_metric_table(path: &Path, rows: &[(String, Option<&MetricReport>)]) -> Result<()> {
    if let Some(p) = path.parent() {
        std::fs::create_dir_all(p).map_err(|e| Error::io(p, e))?;
    }
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    let mut header = vec!["config"];
    header.extend(METRIC_COLUMNS);
    w.write_record(&header).map_err(csv_err)?;
    for (label, report) in rows {
        let mut row = vec![label.clone()];
        row.extend(METRIC_COLUMNS.iter().map(|m| report.map(|r| metric_cell(r, m)).unwrap_or_default()));
        w.write_record(&row).map_err(csv_err)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Per-step losses of every stage in one CSV; optional terms get a column
/// only when some stage logged them.
pub fn write_combined_losses(path: &Path, stages: &[StageLosses]) -> Result<()> {
    let all = || stages.iter().flat_map(|s| s.records.iter().map(move |r| (&s.stage, r)));
    let with_gram = all().any(|(_, r)| r.gram.is_some());
    let with_id = all().any(|(_, r)| r.id.is_some());
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    let mut header = vec!["stage", "step", "L1", "GAN_g", "GAN_d", "perc"];
    if with_gram {
        header.push("gram");
    }
    if with_id {
        header.push("id");
    }
    w.write_record(&header).map_err(csv_err)?;
    for (stage, r) in all() {
        let mut row = vec![
            stage.clone(),
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
        w.write_record(&row).map_err(csv_err)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Rows of `sketch | ground truth | stage-2 output | refined output`.
pub fn image_grid(samples: &EvalSamples) -> Option<Tensor> {
    let (s, r, c) = (samples.sketches.as_ref()?, samples.reals.as_ref()?, samples.coarse.as_ref()?);
    let f = samples.refined.as_ref().unwrap_or(c);
    let (n, h, w) = (r.dim(0), r.dim(2), r.dim(3));
    let mut grid = Tensor::zeros(&[3, n * h, 4 * w]);
    for i in 0..n {
        let cells = [to_rgb(&s.slice_batch(i, 1).reshape(&[1, h, w])), r.slice_batch(i, 1).reshape(&[3, h, w]), c.slice_batch(i, 1).reshape(&[3, h, w]), f.slice_batch(i, 1).reshape(&[3, h, w])];
        for (col, cell) in cells.iter().enumerate() {
            for ch in 0..3 {
                for y in 0..h {
                    for x in 0..w {
                        grid.set(&[ch, i * h + y, col * w + x], cell.get(&[ch, y, x]));
                    }
                }
            }
        }
    }
    Some(grid)
}

/// Materializes a record under `out_dir`. Checkpoints are only read.
pub fn emit_report(record: &RunRecord, out_dir: &Path) -> Result<ReportFiles> {
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let files = ReportFiles {
        report_json: out_dir.join("report.json"),
        losses_csv: out_dir.join("losses.csv"),
        metrics_csv: out_dir.join("metrics.csv"),
        grid_png: image_grid(&record.samples).map(|_| out_dir.join("grid.png")),
        record_json: out_dir.join("run_record.json"),
    };
    record.report.write(&files.report_json)?;
    write_combined_losses(&files.losses_csv, &record.losses)?;
    write_metric_table(&files.metrics_csv, &[(record.label.clone(), Some(&record.report))])?;
    if let (Some(path), Some(grid)) = (&files.grid_png, image_grid(&record.samples)) {
        save_png(&grid, path)?;
    }
    let json = serde_json::to_string_pretty(record)?;
    std::fs::write(&files.record_json, json).map_err(|e| Error::io(&files.record_json, e))?;
    Ok(files)
}

/// Outcome of one ablation row.
pub struct AblationRow {
    pub toggles: Toggles,
    pub fingerprint: String,
    pub result: Result<RunRecord>,
}

/// Config of ablation row `toggles` derived from `base`.
pub fn ablation_config(base: &ExperimentConfig, toggles: Toggles) -> ExperimentConfig {
    let mut cfg = base.clone();
    cfg.toggles = toggles;
    cfg.name = format!("{}-{}", base.name, toggles.label());
    cfg.output_dir = base.output_dir.join("ablation").join(toggles.label());
    cfg
}

/// Runs the seven ablation rows with shared seeds and writes
/// `ablation.csv`. Failed rows are kept with their error and empty cells.
/// Rows run concurrently unless the config is in deterministic mode.
pub fn run_ablation_suite(base: &ExperimentConfig) -> Result<Vec<AblationRow>> {
    base.validate()?;
    let configs: Vec<ExperimentConfig> = ABLATION_ROWS.iter().map(|t| ablation_config(base, *t)).collect();
    let run = |i: usize| {
        let cfg = &configs[i];
        let result = run_experiment(cfg);
        if let Err(e) = &result {
            warn!("ablation row {} failed: {e}", cfg.toggles.label());
        }
        AblationRow {
            toggles: cfg.toggles,
            fingerprint: cfg.fingerprint(),
            result,
        }
    };
    let rows: Vec<AblationRow> = if base.deterministic {
        (0..configs.len()).map(run).collect()
    } else {
        par::map_range(configs.len(), run)
    };
    let table: Vec<(String, Option<&MetricReport>)> = rows
        .iter()
        .map(|r| (r.toggles.label(), r.result.as_ref().ok().map(|rec| &rec.report)))
        .collect();
    write_metric_table(&base.output_dir.join("ablation.csv"), &table)?;
    let errors: BTreeMap<String, String> = rows
        .iter()
        .filter_map(|r| r.result.as_ref().err().map(|e| (r.toggles.label(), e.to_string())))
        .collect();
    util::write_json(&base.output_dir.join("ablation_errors.json"), &errors)?;
    Ok(rows)
}

/// Parameter names and loss columns found in a run directory.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct CheckpointSummary {
    pub stage1_params: Vec<String>,
    pub stage2_params: Vec<String>,
    pub sarr_params: Vec<String>,
    pub stage2_loss_columns: Vec<String>,
}

fn latest_names(dir: &Path) -> Result<Vec<String>> {
    match util::latest_epoch(dir) {
        Some(k) => {
            let (_, store) = load_checkpoint(&util::epoch_path(dir, k))?;
            Ok(store.names().map(str::to_string).collect())
        }
        None => Ok(Vec::new()),
    }
}

/// Reads the latest checkpoints of a run directory without modifying them.
pub fn inspect_checkpoints(out_dir: &Path) -> Result<CheckpointSummary> {
    let mut s = CheckpointSummary::default();
    let s1 = stage1_dir(out_dir);
    if let Ok(entries) = std::fs::read_dir(&s1) {
        let mut dirs: Vec<PathBuf> = entries.flatten().map(|e| e.path()).filter(|p| p.is_dir()).collect();
        dirs.sort();
        for d in dirs {
            s.stage1_params.extend(latest_names(&d)?);
        }
    }
    s.stage2_params = latest_names(&stage2_dir(out_dir))?;
    s.sarr_params = latest_names(&sarr_dir(out_dir))?;
    let losses = stage2_dir(out_dir).join("losses.csv");
    if losses.exists() {
        let mut r = csv::Reader::from_path(&losses).map_err(csv_err)?;
        s.stage2_loss_columns = r.headers().map_err(csv_err)?.iter().map(str::to_string).collect();
    }
    Ok(s)
}

/// Stage-1 checkpoint of a finished run, for resuming later stages.
pub fn load_run_stage1(cfg: &ExperimentConfig) -> Result<Stage1Checkpoint> {
    crate::stage1::load_stage1(&stage1_dir(&cfg.output_dir), &cfg.model, cfg.toggles.sa)
}

/// Trained models of a finished run directory.
pub struct LoadedRun {
    pub stage2: crate::afig::Stage2Checkpoint,
    pub sarr: Option<SarrCheckpoint>,
}

/// Loads the latest stage-2 and (when present) refinement checkpoints.
pub fn load_run(cfg: &ExperimentConfig, stage2: &Path, sarr: Option<&Path>) -> Result<LoadedRun> {
    let weights = effective_weights(&cfg.loss, &cfg.toggles);
    let stage2 = crate::afig::load_stage2(stage2, &weights, cfg.train.stage2.lr).map_err(stage_err("stage2"))?;
    let sarr = match sarr {
        Some(d) => Some(crate::sarr::load_sarr(d, cfg.train.sarr.lr).map_err(stage_err("sarr"))?),
        None => None,
    };
    Ok(LoadedRun { stage2, sarr })
}

/// Scores the test split of `cfg` with already trained models.
pub fn evaluate_run(cfg: &ExperimentConfig, run: &LoadedRun) -> Result<(MetricReport, EvalSamples)> {
    let (train, test) = prepare_pairs(cfg).map_err(stage_err("data"))?;
    let embedder = match &run.sarr {
        Some(s) => s.embedder.clone(),
        None => run_embedder(cfg).map_err(stage_err("evaluate"))?,
    };
    evaluate_split(cfg, &run.stage2.trainer, run.sarr.as_ref(), &embedder, &train, &test).map_err(stage_err("evaluate"))
}

/// Re-reads `run_record.json` of a run directory and regenerates the grid
/// samples from its checkpoints.
pub fn reload_record(run_dir: &Path) -> Result<RunRecord> {
    let mut record: RunRecord = util::read_json(&run_dir.join("run_record.json"))?;
    let cfg = ExperimentConfig::load(&run_dir.join("config.toml"))?;
    let sarr = sarr_dir(run_dir);
    let sarr = util::latest_epoch(&sarr).map(|_| sarr);
    let run = load_run(&cfg, &stage2_dir(run_dir), sarr.as_deref())?;
    record.samples = evaluate_run(&cfg, &run)?.1;
    Ok(record)
}
