use std::fmt;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use log::info;

use sketch2img::afig::train_stage2;
use sketch2img::config::ExperimentConfig;
use sketch2img::data::io::{load_image, save_png};
use sketch2img::data::split::{DatasetManifest, ManifestEntry};
use sketch2img::data::{batch, ImagePair};
use sketch2img::error::Error;
use sketch2img::harness::{self, effective_weights, prepare_pairs, sarr_options, stage2_options};
use sketch2img::saliency::{adapt_nonfacial, GradientSaliency};
use sketch2img::sarr::{load_sarr, train_sarr};
use sketch2img::stage1::{load_stage1, train_stage1, Stage1Options};
use sketch2img::util;

#[derive(Parser)]
#[command(name = "sketch2img", version, about = "Component-based sketch-to-image training and evaluation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Render the synthetic dataset (or split an existing manifest) into train/test manifests.
    PrepareData {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the per-component autoencoders.
    TrainStage1 {
        #[arg(long)]
        config: PathBuf,
    },
    /// Train the image generator on top of a stage-1 checkpoint directory.
    TrainStage2 {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        stage1: PathBuf,
    },
    /// Train the refinement network on top of a stage-2 checkpoint directory.
    TrainSarr {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        stage2: PathBuf,
    },
    /// Score the test split and write report.json plus a metric row.
    Evaluate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        stage2: PathBuf,
        #[arg(long)]
        sarr: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Refine one coarse image with a trained refinement checkpoint.
    Refine {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        sketch: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        iters: usize,
        #[arg(long)]
        sarr: PathBuf,
    },
    /// Run the seven-row ablation suite.
    Ablate {
        #[arg(long)]
        config: PathBuf,
    },
    /// Derive component regions for non-facial sketches from saliency clusters.
    AdaptNonfacial {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run the full pipeline, or re-emit the report of an existing run.
    Report {
        #[arg(long, required_unless_present = "run")]
        config: Option<PathBuf>,
        #[arg(long, conflicts_with = "config")]
        run: Option<PathBuf>,
    },
}

impl Command {
    fn stage(&self) -> &'static str {
        match self {
            Command::PrepareData { .. } => "prepare-data",
            Command::TrainStage1 { .. } => "stage1",
            Command::TrainStage2 { .. } => "stage2",
            Command::TrainSarr { .. } => "sarr",
            Command::Evaluate { .. } => "evaluate",
            Command::Refine { .. } => "refine",
            Command::Ablate { .. } => "ablate",
            Command::AdaptNonfacial { .. } => "adapt-nonfacial",
            Command::Report { .. } => "report",
        }
    }
}

struct Failure {
    stage: String,
    message: String,
}

impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "error[{}]: {}", self.stage, self.message)
    }
}

impl Failure {
    fn from_error(default_stage: &str, e: Error) -> Self {
        match e {
            Error::Stage { stage, source } => Failure {
                stage,
                message: source.to_string(),
            },
            e => Failure {
                stage: default_stage.to_string(),
                message: e.to_string(),
            },
        }
    }
}

type CmdResult = Result<(), Error>;

fn load_config(path: &Path) -> Result<ExperimentConfig, Error> {
    ExperimentConfig::load(path).map_err(|e| e.in_stage("config"))
}

fn prepare_data(config: &Path, out: &Path) -> CmdResult {
    let cfg = load_config(config)?;
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let manifest = match &cfg.data.manifest {
        Some(m) => m.clone(),
        None => harness::write_synthetic_dataset(&cfg, out)?,
    };
    let m = DatasetManifest::read(&manifest)?;
    let (train, test) = sketch2img::data::split::split_dataset(&m.entries, cfg.data.split_ratio, cfg.data.split_seed)?;
    let write = |name: &str, entries: Vec<ManifestEntry>| DatasetManifest::new(entries).write(&out.join(name));
    info!("{} train / {} test entries", train.len(), test.len());
    write("train.jsonl", train)?;
    write("test.jsonl", test)
}

fn train_stage1_cmd(config: &Path) -> CmdResult {
    let cfg = load_config(config)?;
    let (train, _) = prepare_pairs(&cfg).map_err(|e| e.in_stage("data"))?;
    let layout = cfg.data.region_layout().map_err(|e| e.in_stage("data"))?;
    let s1 = train_stage1(
        &train,
        &layout,
        &Stage1Options {
            model: &cfg.model,
            schedule: &cfg.train.stage1,
            attention: cfg.toggles.sa,
            seed: cfg.seed,
            fingerprint: cfg.fingerprint(),
            out_dir: Some(&cfg.output_dir),
        },
    )?;
    for c in &s1.components {
        println!("{}\t{:.6}", c.model.spec.component, c.history.last().copied().unwrap_or(f64::NAN));
    }
    Ok(())
}

fn train_stage2_cmd(config: &Path, stage1: &Path) -> CmdResult {
    let cfg = load_config(config)?;
    let (train, _) = prepare_pairs(&cfg).map_err(|e| e.in_stage("data"))?;
    let s1 = load_stage1(stage1, &cfg.model, cfg.toggles.sa).map_err(|e| e.in_stage("stage1"))?;
    let weights = effective_weights(&cfg.loss, &cfg.toggles);
    let s2 = train_stage2(&train, &s1, &stage2_options(&cfg, &weights, Some(&cfg.output_dir)))?;
    println!("stage2 train L1 {:.6}", s2.history.last().copied().unwrap_or(f64::NAN));
    Ok(())
}

fn train_sarr_cmd(config: &Path, stage2: &Path) -> CmdResult {
    let cfg = load_config(config)?;
    let (train, _) = prepare_pairs(&cfg).map_err(|e| e.in_stage("data"))?;
    let run = harness::load_run(&cfg, stage2, None)?;
    let weights = effective_weights(&cfg.loss, &cfg.toggles);
    let embedder = harness::run_embedder(&cfg)?;
    let opts = sarr_options(&cfg, &weights, Some(&embedder), Some(&cfg.output_dir));
    let s = train_sarr(&train, &run.stage2.trainer, &opts)?;
    println!("sarr train L1 {:.6}", s.history.last().copied().unwrap_or(f64::NAN));
    Ok(())
}

fn evaluate_cmd(config: &Path, stage2: &Path, sarr: Option<&Path>, out: &Path) -> CmdResult {
    let cfg = load_config(config)?;
    let run = harness::load_run(&cfg, stage2, sarr)?;
    let (report, _) = harness::evaluate_run(&cfg, &run)?;
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    report.write(&out.join("report.json"))?;
    harness::write_metric_table(&out.join("metrics.csv"), &[(cfg.toggles.label(), Some(&report))])?;
    println!("{}", report.to_json()?);
    Ok(())
}

fn refine_cmd(input: &Path, sketch: &Path, out: &Path, iters: usize, sarr: &Path) -> CmdResult {
    let s = load_sarr(sarr, 1e-4)?;
    let (h, w) = s.model.spec.size;
    if h != w {
        return Err(Error::Validation(format!("checkpoint canvas {h}x{w} is not square")));
    }
    let coarse = load_image(input, h, 3)?.reshape(&[1, 3, h, w]);
    let sk = load_image(sketch, h, 1)?.reshape(&[1, 1, h, w]);
    let refined = s.refine(&coarse, &sk, iters)?;
    save_png(&refined.reshape(&[3, h, w]), out)
}

fn ablate_cmd(config: &Path) -> CmdResult {
    let cfg = load_config(config)?;
    let rows = harness::run_ablation_suite(&cfg)?;
    let mut failed = 0;
    for r in &rows {
        match &r.result {
            Ok(rec) => println!("{}\tok\t{:.1}s", r.toggles.label(), rec.wall_clock_secs),
            Err(e) => {
                failed += 1;
                println!("{}\tfailed\t{e}", r.toggles.label());
            }
        }
    }
    if failed > 0 {
        return Err(Error::Validation(format!("{failed} of {} ablation rows failed", rows.len())));
    }
    Ok(())
}

fn sketch_files(dir: &Path) -> Result<Vec<PathBuf>, Error> {
    let mut files: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .flatten()
        .map(|e| e.path())
        .filter(|p| {
            p.extension()
                .and_then(|e| e.to_str())
                .is_some_and(|e| matches!(e.to_ascii_lowercase().as_str(), "png" | "jpg" | "jpeg"))
        })
        .collect();
    files.sort();
    Ok(files)
}

fn adapt_cmd(config: &Path, out: Option<&Path>) -> CmdResult {
    let cfg = load_config(config)?;
    let size = cfg.data.target_size;
    let (names, sketches): (Vec<String>, Vec<_>) = match &cfg.saliency.input_dir {
        Some(dir) => {
            let files = sketch_files(dir)?;
            let mut names = Vec::new();
            let mut sketches = Vec::new();
            for f in files {
                names.push(f.file_stem().unwrap_or_default().to_string_lossy().into_owned());
                sketches.push(load_image(&f, size, 1)?);
            }
            (names, sketches)
        }
        None => {
            let (train, _): (Vec<ImagePair>, _) = prepare_pairs(&cfg)?;
            let (sk, _) = batch(&train);
            (0..train.len()).map(|i| (format!("{i:04}"), sk.slice_batch(i, 1).reshape(&[1, size, size]))).unzip()
        }
    };
    let provider = GradientSaliency {
        sigma: cfg.saliency.smoothing_sigma,
    };
    let layouts = adapt_nonfacial(&sketches, &provider, &cfg.saliency)?;
    let out = out.map(Path::to_path_buf).unwrap_or_else(|| cfg.output_dir.clone());
    for (name, layout) in names.iter().zip(&layouts.per_image) {
        util::write_json(&out.join("regions").join(format!("{name}.json")), layout)?;
    }
    util::write_json(&out.join("regions.json"), &layouts.shared)?;
    println!(
        "{} sketches; shared layout has {} components",
        sketches.len(),
        layouts.shared.num_components()
    );
    Ok(())
}

fn report_cmd(config: Option<&Path>, run: Option<&Path>) -> CmdResult {
    let (record, dir) = match (config, run) {
        (_, Some(dir)) => (harness::reload_record(dir)?, dir.to_path_buf()),
        (Some(c), None) => {
            let cfg = load_config(c)?;
            let rec = harness::run_experiment(&cfg)?;
            let dir = cfg.output_dir.clone();
            (rec, dir)
        }
        (None, None) => return Err(Error::Config("either --config or --run is required".into())),
    };
    let files = harness::emit_report(&record, &dir)?;
    println!("{}", files.report_json.display());
    println!("{}", files.metrics_csv.display());
    Ok(())
}

fn run(cmd: &Command) -> CmdResult {
    match cmd {
        Command::PrepareData { config, out } => prepare_data(config, out),
        Command::TrainStage1 { config } => train_stage1_cmd(config),
        Command::TrainStage2 { config, stage1 } => train_stage2_cmd(config, stage1),
        Command::TrainSarr { config, stage2 } => train_sarr_cmd(config, stage2),
        Command::Evaluate {
            config,
            stage2,
            sarr,
            out,
        } => evaluate_cmd(config, stage2, sarr.as_deref(), out),
        Command::Refine {
            input,
            sketch,
            out,
            iters,
            sarr,
        } => refine_cmd(input, sketch, out, *iters, sarr),
        Command::Ablate { config } => ablate_cmd(config),
        Command::AdaptNonfacial { config, out } => adapt_cmd(config, out.as_deref()),
        Command::Report { config, run } => report_cmd(config.as_deref(), run.as_deref()),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(&cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}", Failure::from_error(cli.command.stage(), e));
            ExitCode::FAILURE
        }
    }
}

