use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use deepgcn::ablation::{grid_csv, run_grid, worker_count, GridSpec};
use deepgcn::check::{
    all_passed, check_gradients, check_knn, check_layers, check_stochastic, CheckReport,
};
use deepgcn::config::{
    describe_keys, RunConfig, MODEL_KEYS, REQUIRED_TRAIN_KEYS, SYNTH_KEYS, TRAIN_KEYS,
};
use deepgcn::data::{load_dataset, save_dataset, synth_dataset, Split, SynthSpec};
use deepgcn::model::{Model, ModelConfig};
use deepgcn::train::{
    evaluate, metrics_csv, save_checkpoint, train_model, write_log, EpochLog, TrainConfig,
};
use deepgcn::Error;

/// `println!` that ignores a closed stdout (e.g. piping into `head`).
macro_rules! out {
    ($($arg:tt)*) => {{
        use std::io::Write as _;
        let _ = writeln!(std::io::stdout(), $($arg)*);
    }};
}

/// Exit status for failed checks or ablation cells.
const EXIT_CHECK_FAILED: u8 = 1;
/// Exit status for usage, configuration, data and I/O errors.
const EXIT_USAGE: u8 = 2;
/// Exit status for non-finite losses.
const EXIT_NUMERIC: u8 = 3;

#[derive(Parser)]
#[command(
    name = "deepgcn",
    version,
    about = "Deep graph convolutional networks for point cloud segmentation"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic labeled point-block dataset.
    #[command(after_help = synth_help())]
    Synth(SynthArgs),
    /// Train a model and write a checkpoint.
    #[command(after_help = train_help())]
    Train(TrainArgs),
    /// Evaluate a checkpoint: OA, per-class IoU and mIoU.
    Eval(EvalArgs),
    /// Run the built-in numerical self-checks.
    Check(CheckArgs),
    /// Train and evaluate every cell of a configuration grid.
    #[command(after_help = ablate_help())]
    Ablate(AblateArgs),
}

fn synth_help() -> String {
    describe_keys("Spec file keys (key = value, # comments)", SYNTH_KEYS)
}

fn train_help() -> String {
    format!(
        "{}\n{}\nRequired keys: {}",
        describe_keys("Model keys", MODEL_KEYS),
        describe_keys("Training keys", TRAIN_KEYS),
        REQUIRED_TRAIN_KEYS.join(", ")
    )
}

fn ablate_help() -> String {
    format!(
        "Grid syntax: key=v1,v2,... per axis; single values are fixed settings.\n\
         Worker threads are capped by the DGCN_THREADS environment variable.\n\n{}\n{}",
        describe_keys("Model keys", MODEL_KEYS),
        describe_keys("Training keys", TRAIN_KEYS)
    )
}

#[derive(Args)]
struct SynthArgs {
    /// Spec file of synthesis keys; flags override it.
    #[arg(long)]
    spec: Option<PathBuf>,
    /// Output directory for block files and the manifest.
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    blocks: Option<usize>,
    #[arg(long)]
    points: Option<usize>,
    #[arg(long)]
    classes: Option<usize>,
    /// Gaussian coordinate noise sigma.
    #[arg(long)]
    noise: Option<f64>,
    /// Cluster,plane,bar weights, e.g. 1,1,1.
    #[arg(long)]
    shape_mix: Option<String>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, value_enum, default_value_t = SplitArg::Train)]
    split: SplitArg,
}

#[derive(Clone, Copy, ValueEnum)]
enum SplitArg {
    Train,
    Test,
}

#[derive(Args)]
struct TrainArgs {
    /// Run configuration (key = value lines).
    #[arg(long)]
    config: PathBuf,
    /// Training dataset manifest.
    #[arg(long)]
    data: PathBuf,
    /// Checkpoint path; the architecture is written to `<out>.cfg`.
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Per-epoch CSV log: epoch,step,lr,loss,train_oa.
    #[arg(long)]
    log: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// CSV report: metric,value rows for oa, miou and iou_<class>.
    #[arg(long)]
    report: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum CheckKind {
    /// Finite-difference sweeps over ops, layers and small models.
    Gradients,
    /// Dilated k-NN against an exhaustive sort, plus stochastic dilation statistics.
    Knn,
    /// Layer forwards against per-vertex loop implementations.
    Layers,
    All,
}

#[derive(Args)]
struct CheckArgs {
    #[arg(value_enum)]
    kind: CheckKind,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct AblateArgs {
    /// Grid file, or the grid itself inline.
    #[arg(long)]
    grid: String,
    /// Training dataset manifest.
    #[arg(long)]
    data: PathBuf,
    /// Evaluation manifest (defaults to the training data).
    #[arg(long)]
    test: Option<PathBuf>,
    /// Output CSV.
    #[arg(long)]
    out: PathBuf,
    /// Epochs per cell unless the grid sets `epochs`.
    #[arg(long)]
    epochs: Option<usize>,
    /// Seed per cell unless the grid sets `seed`.
    #[arg(long)]
    seed: Option<u64>,
}

/// A failure carrying its exit status.
struct Failure {
    code: u8,
    msg: String,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match e {
            Error::NonFinite { .. } => EXIT_NUMERIC,
            _ => EXIT_USAGE,
        };
        Failure {
            code,
            msg: e.to_string(),
        }
    }
}

type CmdResult = std::result::Result<(), Failure>;

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Synth(a) => synth(a),
        Command::Train(a) => train(a),
        Command::Eval(a) => eval(a),
        Command::Check(a) => check(a),
        Command::Ablate(a) => ablate(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.msg);
            ExitCode::from(f.code)
        }
    }
}

fn synth(a: SynthArgs) -> CmdResult {
    let mut rc = match &a.spec {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    rc.reject_unknown(&[SYNTH_KEYS])?;
    let flags = [
        ("blocks", a.blocks.map(|v| v.to_string())),
        ("points", a.points.map(|v| v.to_string())),
        ("classes", a.classes.map(|v| v.to_string())),
        ("noise", a.noise.map(|v| v.to_string())),
        ("shape_mix", a.shape_mix.clone()),
        ("seed", a.seed.map(|v| v.to_string())),
    ];
    for (k, v) in flags {
        if let Some(v) = v {
            rc.set(k, v);
        }
    }
    let spec = rc.synth_spec(SynthSpec::default())?;
    let split = match a.split {
        SplitArg::Train => Split::Train,
        SplitArg::Test => Split::Test,
    };
    let data = synth_dataset(&spec, split)?;
    let manifest = save_dataset(&data, &a.out)?;
    out!(
        "wrote {} blocks x {} points ({} classes) to {}",
        data.blocks.len(),
        data.points_per_block(),
        data.num_classes,
        manifest.display()
    );
    Ok(())
}

fn train(a: TrainArgs) -> CmdResult {
    let rc = RunConfig::load(&a.config)?;
    rc.reject_unknown(&[MODEL_KEYS, TRAIN_KEYS])?;
    rc.require(REQUIRED_TRAIN_KEYS)?;
    let data = load_dataset(&a.data)?;
    let base = ModelConfig {
        num_classes: data.num_classes,
        aux_dim: data.aux_dim(),
        ..ModelConfig::default()
    };
    let cfg = rc.model_config(base)?;
    let mut tc = rc.train_config(TrainConfig::default())?;
    if let Some(e) = a.epochs {
        tc.epochs = e;
    }
    if let Some(s) = a.seed {
        tc.seed = s;
    }
    let mut model = Model::new(cfg, tc.seed)?;
    eprintln!(
        "training {} {} depth {} width {} k {} ({} parameters) on {} blocks",
        model.cfg.backbone,
        model.cfg.aggregator,
        model.cfg.depth,
        model.cfg.width,
        model.cfg.k,
        model.num_params(),
        data.blocks.len()
    );
    let logs = train_model(&mut model, &data, &tc, |log: &EpochLog, _| {
        eprintln!(
            "epoch {:>4}  step {:>7}  lr {:.3e}  loss {:.6}  train_oa {:.4}",
            log.epoch, log.step, log.lr, log.loss, log.train_oa
        );
        Ok(())
    })?;
    save_checkpoint(&model, &a.out)?;
    if let Some(p) = &a.log {
        write_log(p, &logs)?;
    }
    match logs.last() {
        Some(l) => out!("final train loss {:.6}", l.loss),
        None => out!("final train loss n/a (0 epochs)"),
    }
    Ok(())
}

fn eval(a: EvalArgs) -> CmdResult {
    let mut model = deepgcn::train::load_checkpoint(&a.ckpt)?;
    let data = load_dataset(&a.data)?;
    let (m, _) = evaluate(&mut model, &data)?;
    out!("OA   {:.6}", m.overall_accuracy);
    for (c, v) in m.per_class_iou.iter().enumerate() {
        match v {
            Some(v) => out!("IoU[{c}] {v:.6}"),
            None => out!("IoU[{c}] n/a (class absent)"),
        }
    }
    out!("mIoU {:.6}", m.mean_iou);
    if let Some(p) = &a.report {
        write_file(p, &metrics_csv(&m))?;
    }
    Ok(())
}

fn check(a: CheckArgs) -> CmdResult {
    let mut reports: Vec<CheckReport> = Vec::new();
    let (knn, grads, layers) = match a.kind {
        CheckKind::Knn => (true, false, false),
        CheckKind::Gradients => (false, true, false),
        CheckKind::Layers => (false, false, true),
        CheckKind::All => (true, true, true),
    };
    if knn {
        reports.extend(check_knn(100, a.seed)?);
        reports.extend(check_stochastic(1000, 10_000, a.seed)?);
    }
    if grads {
        reports.extend(check_gradients(a.seed)?);
    }
    if layers {
        reports.extend(check_layers(20, a.seed)?);
    }
    for r in &reports {
        out!("{r}");
    }
    if all_passed(&reports) {
        Ok(())
    } else {
        let bad: Vec<&str> = reports
            .iter()
            .filter(|r| !r.passed())
            .map(|r| r.name.as_str())
            .collect();
        Err(Failure {
            code: EXIT_CHECK_FAILED,
            msg: format!("failed checks: {}", bad.join("; ")),
        })
    }
}

fn ablate(a: AblateArgs) -> CmdResult {
    let text = if Path::new(&a.grid).is_file() {
        fs::read_to_string(&a.grid).map_err(|e| Failure {
            code: EXIT_USAGE,
            msg: format!("{}: {e}", a.grid),
        })?
    } else {
        a.grid.clone()
    };
    let grid = GridSpec::parse(&text)?;
    let train_data = load_dataset(&a.data)?;
    let test_data = match &a.test {
        Some(p) => load_dataset(p)?,
        None => train_data.clone(),
    };
    let base = ModelConfig {
        num_classes: train_data.num_classes,
        aux_dim: train_data.aux_dim(),
        ..ModelConfig::default()
    };
    let mut tc = TrainConfig::default();
    if let Some(e) = a.epochs {
        tc.epochs = e;
    }
    if let Some(s) = a.seed {
        tc.seed = s;
    }
    let workers = worker_count();
    eprintln!("running {} cells on {workers} worker(s)", grid.len());
    let rows = run_grid(&grid, &base, &tc, &train_data, &test_data, workers);
    write_file(&a.out, &grid_csv(&rows))?;
    let failed: Vec<String> = rows
        .iter()
        .enumerate()
        .filter_map(|(i, (_, r))| r.outcome.as_ref().err().map(|e| format!("cell {i}: {e}")))
        .collect();
    out!(
        "{} cells, {} failed; results in {}",
        rows.len(),
        failed.len(),
        a.out.display()
    );
    if failed.is_empty() {
        Ok(())
    } else {
        for f in &failed {
            eprintln!("{f}");
        }
        Err(Failure {
            code: EXIT_CHECK_FAILED,
            msg: format!("{} ablation cell(s) failed", failed.len()),
        })
    }
}

fn write_file(path: &Path, text: &str) -> CmdResult {
    fs::write(path, text).map_err(|e| Failure {
        code: EXIT_USAGE,
        msg: format!("{}: {e}", path.display()),
    })
}
