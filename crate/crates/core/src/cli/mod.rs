//! The `amos` command line: train, predict, eval, selfteach, synth,
//! gradcheck and paramcount.
//!
//! Exit codes: 0 success, 1 usage or configuration error, 2 runtime
//! failure, 3 a check that ran but did not pass.

mod config;

use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use log::{info, warn};

use crate::audio::{frame_waveform, normalize_duration, read_wav, FrameMatrix};
use crate::data::{synth_generate, Manifest, SYNTH_MANIFEST};
use crate::error::{Error, Result};
use crate::eval::EvalReport;
use crate::model::{load_checkpoint, save_checkpoint, Model, ModelConfig};
use crate::training::{
    check_labels, evaluate, model_gradcheck, predict_all, sustain_run, train, Example,
    GradcheckRun, Precision,
};

pub use config::{Paths, RunConfig};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_RUNTIME: i32 = 2;
pub const EXIT_CHECK: i32 = 3;

/// Parameter budget the default configuration is held to.
pub const PARAM_BUDGET: (usize, usize) = (80_000, 92_000);

#[derive(Debug, Parser)]
#[command(
    name = "amos",
    version,
    about = "Speech quality (MOS) prediction from raw waveforms"
)]
pub struct Cli {
    /// Only log warnings and errors.
    #[arg(long, global = true)]
    pub quiet: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct RunArgs {
    /// Run configuration (`key=value` lines).
    #[arg(long)]
    pub config: PathBuf,
    /// Overrides `train.seed`.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Overrides `paths.out_dir`.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Overrides `paths.train_manifest`.
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    /// Overrides `paths.checkpoint`.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a model; writes a checkpoint and a per-epoch history CSV.
    Train(RunArgs),
    /// Print `path,prediction` for WAV files or a manifest.
    Predict {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, conflicts_with = "wavs")]
        manifest: Option<PathBuf>,
        /// Clamp predictions to [1, 5].
        #[arg(long)]
        clamp: bool,
        wavs: Vec<PathBuf>,
    },
    /// Print MSE, PCC and SRCC of a checkpoint on a manifest.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        clamp: bool,
        /// Also write the report as CSV.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Sequential self-teaching: one checkpoint per stage and a stage table.
    Selfteach(RunArgs),
    /// Generate the synthetic tone-in-noise dataset.
    Synth {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Overrides `synth.seed`.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Compare backward-pass gradients against finite differences.
    Gradcheck {
        /// Model config to check; the tiny configuration when absent.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value = "f64")]
        precision: Precision,
        #[arg(long, default_value_t = 240)]
        coords: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Scales one analytic gradient; for testing the checker itself.
        #[arg(long, hide = true)]
        corrupt_gradient: Option<f64>,
    },
    /// Count trainable parameters.
    Paramcount {
        #[arg(long)]
        config: Option<PathBuf>,
    },
}

fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config(_) | Error::Parse { .. } | Error::LabelQuality(_) | Error::Schedule(_) => {
            EXIT_USAGE
        }
        _ => EXIT_RUNTIME,
    }
}

/// Parses `args` (including the program name), runs the command and
/// returns the process exit code. Results go to `out`; diagnostics to the
/// log and standard error.
pub fn run<I, T>(args: I, out: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    init_logging(cli.quiet);
    match dispatch(cli.command, out) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

fn init_logging(quiet: bool) {
    let level = if quiet { "warn" } else { "info" };
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level))
        .format_timestamp(None)
        .is_test(cfg!(test))
        .try_init();
}

fn dispatch(cmd: Command, out: &mut dyn Write) -> Result<i32> {
    match cmd {
        Command::Train(a) => cmd_train(&a, out),
        Command::Predict {
            checkpoint,
            manifest,
            clamp,
            wavs,
        } => cmd_predict(&checkpoint, manifest.as_deref(), &wavs, clamp, out),
        Command::Eval {
            checkpoint,
            manifest,
            clamp,
            out: csv,
        } => cmd_eval(&checkpoint, &manifest, clamp, csv.as_deref(), out),
        Command::Selfteach(a) => cmd_selfteach(&a, out),
        Command::Synth {
            config,
            out: dir,
            seed,
        } => cmd_synth(config.as_deref(), &dir, seed, out),
        Command::Gradcheck {
            config,
            precision,
            coords,
            seed,
            corrupt_gradient,
        } => cmd_gradcheck(
            config.as_deref(),
            precision,
            coords,
            seed,
            corrupt_gradient,
            out,
        ),
        Command::Paramcount { config } => cmd_paramcount(config.as_deref(), out),
    }
}

fn io(e: std::io::Error) -> Error {
    Error::Io(e)
}

/// Run config with command-line overrides applied. Override paths are
/// taken relative to the working directory.
fn load_run(a: &RunArgs) -> Result<RunConfig> {
    let mut cfg = RunConfig::read(&a.config)?;
    let cwd = |p: &Path| {
        std::env::current_dir()
            .map(|d| d.join(p))
            .unwrap_or_else(|_| p.to_path_buf())
    };
    if let Some(s) = a.seed {
        cfg.train.seed = s;
    }
    if let Some(o) = &a.out {
        cfg.paths.out_dir = Some(cwd(o));
    }
    if let Some(m) = &a.manifest {
        cfg.paths.train_manifest = Some(cwd(m));
    }
    if let Some(c) = &a.checkpoint {
        cfg.paths.checkpoint = Some(cwd(c));
    }
    Ok(cfg)
}

fn out_dir(cfg: &RunConfig) -> Result<PathBuf> {
    let dir = cfg.resolve(cfg.paths.out_dir.as_deref().unwrap_or(Path::new("out")));
    std::fs::create_dir_all(&dir)?;
    Ok(dir)
}

fn load_manifest_examples(path: &Path, model: &ModelConfig) -> Result<Vec<Example>> {
    let m = Manifest::read(path, None)?;
    if m.is_empty() {
        return Err(Error::config(format!(
            "{} lists no utterances",
            path.display()
        )));
    }
    info!("loading {} utterances from {}", m.len(), path.display());
    m.load_examples(model)
}

struct Sets {
    train: Vec<Example>,
    dev: Option<Vec<Example>>,
}

fn load_sets(cfg: &RunConfig) -> Result<Sets> {
    let train_path = cfg.paths.train_manifest.as_deref().ok_or_else(|| {
        Error::config("no training manifest (paths.train_manifest or --manifest)")
    })?;
    let train = load_manifest_examples(&cfg.resolve(train_path), &cfg.model)?;
    let dev = match &cfg.paths.dev_manifest {
        Some(p) => Some(load_manifest_examples(&cfg.resolve(p), &cfg.model)?),
        None => None,
    };
    Ok(Sets { train, dev })
}

fn cmd_train(a: &RunArgs, out: &mut dyn Write) -> Result<i32> {
    let cfg = load_run(a)?;
    let dir = out_dir(&cfg)?;
    let sets = load_sets(&cfg)?;
    check_labels(&sets.train, &cfg.loss)?;

    let model = Model::<f32>::new(cfg.model.clone(), cfg.train.seed)?;
    info!(
        "training {} parameters on {} utterances",
        model.param_count(),
        sets.train.len()
    );
    let trained = train(
        model,
        &sets.train,
        None,
        &cfg.loss,
        &cfg.train,
        sets.dev.as_deref(),
    )?;

    let ckpt = cfg
        .paths
        .checkpoint
        .as_deref()
        .map_or_else(|| dir.join("model.ckpt"), |p| cfg.resolve(p));
    save_checkpoint(&trained.model, &ckpt)?;
    std::fs::write(dir.join("history.csv"), trained.history.to_csv())?;
    writeln!(out, "checkpoint: {}", ckpt.display()).map_err(io)?;
    match &sets.dev {
        Some(dev) => {
            let r = evaluate(&trained.model, dev)?;
            writeln!(out, "dev: {r}").map_err(io)?;
        }
        None => {
            let r = evaluate(&trained.model, &sets.train)?;
            writeln!(out, "train: {r}").map_err(io)?;
        }
    }
    Ok(EXIT_OK)
}

fn frames_for(model: &Model<f32>, path: &Path) -> Result<FrameMatrix> {
    let cfg = model.config();
    let w = read_wav(path)?;
    let w = normalize_duration(&w, cfg.duration_s);
    frame_waveform(&w, cfg.frame_ms(), cfg.hop_ms())
}

fn present(y: f64, clamp: bool) -> f64 {
    if clamp {
        y.clamp(1.0, 5.0)
    } else {
        y
    }
}

fn cmd_predict(
    checkpoint: &Path,
    manifest: Option<&Path>,
    wavs: &[PathBuf],
    clamp: bool,
    out: &mut dyn Write,
) -> Result<i32> {
    let model = load_checkpoint(checkpoint, None)?;
    let (names, frames): (Vec<String>, Vec<FrameMatrix>) = match manifest {
        Some(m) => {
            let ex = Manifest::read(m, None)?.load_examples(model.config())?;
            ex.into_iter().map(|e| (e.name, e.frames)).unzip()
        }
        None => {
            if wavs.is_empty() {
                return Err(Error::config("give WAV paths or --manifest"));
            }
            let frames = wavs
                .iter()
                .map(|p| frames_for(&model, p))
                .collect::<Result<Vec<_>>>()?;
            (
                wavs.iter().map(|p| p.display().to_string()).collect(),
                frames,
            )
        }
    };
    let refs: Vec<&FrameMatrix> = frames.iter().collect();
    let preds = model.predict_batch(&refs)?;
    for (name, y) in names.iter().zip(preds) {
        writeln!(out, "{name},{:.6}", present(y, clamp)).map_err(io)?;
    }
    Ok(EXIT_OK)
}

fn cmd_eval(
    checkpoint: &Path,
    manifest: &Path,
    clamp: bool,
    csv: Option<&Path>,
    out: &mut dyn Write,
) -> Result<i32> {
    let model = load_checkpoint(checkpoint, None)?;
    let ex = load_manifest_examples(manifest, model.config())?;
    let y: Vec<f64> = predict_all(&model, &ex)?
        .into_iter()
        .map(|y| present(y, clamp))
        .collect();
    let mu: Vec<f64> = ex.iter().map(|e| e.mu).collect();
    let report = EvalReport::compute(&y, &mu)?;
    writeln!(out, "{report}").map_err(io)?;
    if let Some(p) = csv {
        std::fs::write(
            p,
            format!("{}\n{}\n", EvalReport::CSV_HEADER, report.to_csv()),
        )?;
    }
    Ok(EXIT_OK)
}

fn stage_name(m: usize) -> String {
    if m == 0 {
        "Base".to_string()
    } else {
        format!("m={m}")
    }
}

fn cmd_selfteach(a: &RunArgs, out: &mut dyn Write) -> Result<i32> {
    let cfg = load_run(a)?;
    let schedule = cfg
        .sustain
        .clone()
        .ok_or_else(|| Error::config("selfteach needs sustain.schedule in the config"))?;
    let dir = out_dir(&cfg)?;
    let sets = load_sets(&cfg)?;
    check_labels(&sets.train, &cfg.loss)?;

    let stages = sustain_run(
        &cfg.model,
        &sets.train,
        &cfg.loss,
        &schedule,
        &cfg.train,
        sets.dev.as_deref(),
    )?;
    let (table_set, set_name) = match &sets.dev {
        Some(d) => (d.as_slice(), "dev"),
        None => (sets.train.as_slice(), "train"),
    };

    let mut table = format!("stage,{}\n", EvalReport::CSV_HEADER);
    let mut labels = String::from("path,mos");
    for m in 0..stages.len() {
        labels.push_str(&format!(",stage_{m}"));
    }
    labels.push('\n');
    for (i, e) in sets.train.iter().enumerate() {
        labels.push_str(&format!("{},{}", e.name, e.mu));
        for s in &stages {
            labels.push_str(&format!(",{}", s.labels[i]));
        }
        labels.push('\n');
    }

    writeln!(out, "{set_name} metrics by stage:").map_err(io)?;
    for (m, s) in stages.iter().enumerate() {
        let path = dir.join(format!("stage_{m}.ckpt"));
        save_checkpoint(&s.model, &path)?;
        std::fs::write(
            dir.join(format!("history_stage_{m}.csv")),
            s.history.to_csv(),
        )?;
        let r = evaluate(&s.model, table_set)?;
        table.push_str(&format!("{},{}\n", stage_name(m), r.to_csv()));
        writeln!(out, "{:>5}  {r}", stage_name(m)).map_err(io)?;
    }
    std::fs::write(dir.join("stages.csv"), table)?;
    std::fs::write(dir.join("stage_labels.csv"), labels)?;
    Ok(EXIT_OK)
}

fn cmd_synth(
    config: Option<&Path>,
    dir: &Path,
    seed: Option<u64>,
    out: &mut dyn Write,
) -> Result<i32> {
    let run = match config {
        Some(p) => RunConfig::read(p)?,
        None => RunConfig {
            model: ModelConfig::desk(),
            ..RunConfig::default()
        },
    };
    let mut synth = run.synth.clone();
    if let Some(s) = seed {
        synth.seed = s;
    }
    synth.validate(Some(&run.model))?;
    let set = synth_generate(&synth, dir)?;
    writeln!(
        out,
        "wrote {} utterances and {}",
        set.manifest.len(),
        dir.join(SYNTH_MANIFEST).display()
    )
    .map_err(io)?;
    Ok(EXIT_OK)
}

fn cmd_gradcheck(
    config: Option<&Path>,
    precision: Precision,
    coords: usize,
    seed: u64,
    corrupt: Option<f64>,
    out: &mut dyn Write,
) -> Result<i32> {
    let model = match config {
        Some(p) => RunConfig::read(p)?.model,
        None => ModelConfig::tiny(),
    };
    let run = GradcheckRun {
        coords,
        seed,
        corrupt,
        ..GradcheckRun::new(model, precision)
    };
    let report = model_gradcheck(&run)?;
    writeln!(
        out,
        "gradcheck {precision}: {} coordinates over {} parameters, max relative error {:.3e} (tolerance {:.0e})",
        report.checked,
        report.params_covered().len(),
        report.max_rel_err,
        report.tol
    )
    .map_err(io)?;
    for f in report.failures().take(10) {
        writeln!(
            out,
            "  {}[{}]: analytic {:.6e}, numeric {:.6e}, rel err {:.3e}",
            f.name, f.index, f.analytic, f.numeric, f.rel_err
        )
        .map_err(io)?;
    }
    if report.passed() {
        writeln!(out, "PASS").map_err(io)?;
        Ok(EXIT_OK)
    } else {
        writeln!(out, "FAIL").map_err(io)?;
        Ok(EXIT_CHECK)
    }
}

fn cmd_paramcount(config: Option<&Path>, out: &mut dyn Write) -> Result<i32> {
    let model_cfg = match config {
        Some(p) => RunConfig::read(p)?.model,
        None => ModelConfig::default(),
    };
    let model = Model::<f32>::new(model_cfg.clone(), 0)?;
    let n = model.param_count();
    writeln!(out, "trainable parameters: {n}").map_err(io)?;
    if model_cfg == ModelConfig::default() {
        let (lo, hi) = PARAM_BUDGET;
        if (lo..=hi).contains(&n) {
            writeln!(out, "PASS: within [{lo}, {hi}]").map_err(io)?;
        } else {
            writeln!(out, "FAIL: outside [{lo}, {hi}]").map_err(io)?;
            return Ok(EXIT_CHECK);
        }
    } else {
        warn!("not the default configuration; no budget check");
    }
    Ok(EXIT_OK)
}
