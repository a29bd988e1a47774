//! Command-line front end: `preprocess`, `train`, `evaluate`, `predict`.

use std::ffi::OsString;
use std::fmt;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::augment::{fit_stats, NormStats};
use crate::config::{require_dir, PreprocessConfig, RunConfig, CONFIG_ENV};
use crate::dataset::{class_counts, list_class_files, read_images, Sample, CLASS_NAMES};
use crate::error::Error;
use crate::eval::{batch_report, bracketed, ModelScorer, Prediction, Scorer};
use crate::imgproc::Image;
use crate::model::{load_model, save_model, vgg16_transfer, Architecture, ModelGraph};
use crate::{par, rng, train};

const STREAM_INIT: u64 = 0x494e;

pub const EXIT_OK: u8 = 0;
pub const EXIT_USAGE: u8 = 1;
pub const EXIT_DATA: u8 = 2;
pub const EXIT_ARTIFACT: u8 = 3;

#[derive(Debug, Parser)]
#[command(name = "fundus", version, about = "Fundus-photograph screening for proliferative diabetic retinopathy")]
pub struct Cli {
    /// Run config (TOML).
    #[arg(long, global = true, env = CONFIG_ENV)]
    pub config: Option<PathBuf>,

    /// Overrides the config seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,

    /// Run every kernel on one thread.
    #[arg(long, global = true)]
    pub serial: bool,

    /// Raise log verbosity (repeatable).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    pub verbose: u8,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Mirror a class-layout corpus with the selected image operations applied.
    Preprocess(PreprocessArgs),
    /// Train a model as described by the run config.
    Train,
    /// Score a class-layout test directory and report the confusion matrix.
    Evaluate(EvaluateArgs),
    /// Score a single image.
    Predict(PredictArgs),
}

#[derive(Debug, Args)]
pub struct PreprocessArgs {
    pub input: PathBuf,
    pub output: PathBuf,
    /// Apply CLAHE to the L channel.
    #[arg(long)]
    pub clahe: bool,
    /// CLAHE clip limit.
    #[arg(long, default_value_t = crate::imgproc::DEFAULT_CLIP_LIMIT)]
    pub clip: f64,
    /// CLAHE tiles along x and y.
    #[arg(long, num_args = 2, value_names = ["X", "Y"], default_values_t = [8, 8])]
    pub grid: Vec<usize>,
    /// Apply the blur enhancement with this sigma.
    #[arg(long)]
    pub blur_sigma: Option<f64>,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    /// Model artifact; defaults to `paths.model_out`.
    #[arg(long)]
    pub model: Option<PathBuf>,
    /// Test root; defaults to `paths.test_dir`.
    #[arg(long)]
    pub test_dir: Option<PathBuf>,
    /// JSON report path; defaults to `report.json` in `paths.output_dir`.
    #[arg(long)]
    pub report: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct PredictArgs {
    pub image: PathBuf,
    /// Model artifact; defaults to `paths.model_out`.
    #[arg(long)]
    pub model: Option<PathBuf>,
}

/// An error with the process exit code it maps to.
#[derive(Debug)]
pub struct Failure {
    pub code: u8,
    pub message: String,
}

impl Failure {
    pub fn usage(message: impl Into<String>) -> Self {
        Failure {
            code: EXIT_USAGE,
            message: message.into(),
        }
    }

    pub fn data(message: impl Into<String>) -> Self {
        Failure {
            code: EXIT_DATA,
            message: message.into(),
        }
    }

    /// Any failure while reading or writing a model file.
    pub fn artifact(err: Error) -> Self {
        Failure {
            code: EXIT_ARTIFACT,
            message: err.to_string(),
        }
    }
}

impl From<Error> for Failure {
    fn from(err: Error) -> Self {
        let code = match &err {
            Error::Config(_) => EXIT_USAGE,
            e if e.is_artifact() => EXIT_ARTIFACT,
            _ => EXIT_DATA,
        };
        Failure {
            code,
            message: err.to_string(),
        }
    }
}

impl From<std::io::Error> for Failure {
    fn from(err: std::io::Error) -> Self {
        Failure::from(Error::Io(err))
    }
}

impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}

type CliResult<T = ()> = std::result::Result<T, Failure>;

/// Parse `args`, run, and return the exit code. Output goes to `out`;
/// diagnostics go to stderr.
pub fn run_from<I, T>(args: I, out: &mut dyn std::io::Write) -> u8
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    init_logging(cli.verbose);
    match run(&cli, out) {
        Ok(()) => EXIT_OK,
        Err(f) => {
            eprintln!("error: {f}");
            f.code
        }
    }
}

fn init_logging(verbose: u8) {
    let level = match verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).try_init();
}

pub fn run(cli: &Cli, out: &mut dyn std::io::Write) -> CliResult {
    par::set_enabled(!cli.serial);
    match &cli.command {
        Command::Preprocess(args) => cmd_preprocess(args, out),
        Command::Train => {
            let cfg = load_config(cli, true)?;
            cmd_train(&cfg, out)
        }
        Command::Evaluate(args) => {
            let cfg = load_config(cli, args.model.is_none())?;
            cmd_evaluate(&cfg, args, out)
        }
        Command::Predict(args) => {
            let cfg = load_config(cli, args.model.is_none())?;
            cmd_predict(&cfg, args, out)
        }
    }
}

/// The config named by `--config` or the environment, else defaults unless
/// `required`.
fn load_config(cli: &Cli, required: bool) -> CliResult<RunConfig> {
    let cfg = match &cli.config {
        Some(path) => RunConfig::load(path)?,
        None if required => {
            return Err(Failure::usage(format!(
                "no run config given; pass --config or set {CONFIG_ENV}"
            )))
        }
        None => RunConfig::default().resolved(),
    };
    let cfg = match cli.seed {
        Some(seed) => cfg.with_seed(seed),
        None => cfg,
    };
    cfg.validate()?;
    Ok(cfg)
}

fn emit(out: &mut dyn std::io::Write, text: &str) -> CliResult {
    out.write_all(text.as_bytes())
        .map_err(|e| Failure::data(format!("cannot write output: {e}")))
}

pub fn cmd_preprocess(args: &PreprocessArgs, out: &mut dyn std::io::Write) -> CliResult {
    let pre = PreprocessConfig {
        blur_enabled: args.blur_sigma.is_some(),
        blur_sigma: args.blur_sigma.unwrap_or(crate::config::DEFAULT_BLUR_SIGMA),
        clahe_enabled: args.clahe,
        clahe_clip: args.clip,
        clahe_grid: [args.grid[0], args.grid[1]],
    };
    pre.validate()?;
    let files = list_class_files(&args.input)?;
    for class in CLASS_NAMES {
        std::fs::create_dir_all(args.output.join(class)).map_err(|e| Error::file(args.output.join(class), e))?;
    }
    let results = par::map_collect(files.len(), |i| {
        let (src, label) = &files[i];
        let dst = args.output.join(CLASS_NAMES[*label]).join(src.file_name().unwrap_or_default());
        process_file(&pre, src, &dst).map_err(|e| (src.clone(), e))
    });
    let mut failed = 0;
    for result in results {
        if let Err((path, e)) = result {
            log::warn!("{}: {e}", path.display());
            eprintln!("failed: {}: {e}", path.display());
            failed += 1;
        }
    }
    emit(
        out,
        &format!("processed {} of {} files into {}\n", files.len() - failed, files.len(), args.output.display()),
    )?;
    if failed > 0 {
        return Err(Failure::data(format!("{failed} file(s) could not be processed")));
    }
    Ok(())
}

fn process_file(pre: &PreprocessConfig, src: &Path, dst: &Path) -> crate::Result<()> {
    if pre.is_identity() {
        std::fs::copy(src, dst).map_err(|e| Error::file(src, e))?;
        return Ok(());
    }
    pre.apply(&Image::load(src)?)?.save(dst)
}

fn load_split(cfg: &RunConfig, field: &str, dir: &Path) -> CliResult<Vec<Sample>> {
    require_dir(field, dir)?;
    let outcome = read_images(dir, cfg.input_size())?;
    if !outcome.failures.is_empty() {
        eprintln!("{field}: {} unreadable file(s) skipped", outcome.failures.len());
    }
    if outcome.samples.is_empty() {
        return Err(Failure::data(format!("{field}: no readable images under {}", dir.display())));
    }
    let mut samples = outcome.samples;
    if !cfg.preprocess.is_identity() {
        let processed = par::map_collect(samples.len(), |i| cfg.preprocess.apply(&samples[i].image));
        for (s, img) in samples.iter_mut().zip(processed) {
            s.image = img?;
        }
    }
    Ok(samples)
}

/// Fresh graph for the configured architecture, frozen per the config.
pub fn build_model(cfg: &RunConfig) -> CliResult<ModelGraph> {
    let mut init_rng = rng::derive(cfg.seed, &[STREAM_INIT]);
    let size = cfg.input_size();
    let freeze = cfg.freeze_policy();
    let graph = match cfg.architecture {
        Architecture::Vgg16Transfer => {
            vgg16_transfer(size, cfg.pretrained.as_deref(), &freeze, &mut init_rng).map_err(|e| match e {
                Error::Config(_) | Error::Dimension(_) => Failure::from(e),
                other => Failure::artifact(other),
            })?
        }
        arch => {
            let spec = arch.spec(size, size)?;
            for lint in &spec.lint {
                log::warn!("{}: {lint}", spec.name);
            }
            let mut graph = ModelGraph::init(&spec, &mut init_rng)?;
            graph.freeze(&freeze)?;
            graph
        }
    };
    Ok(graph)
}

pub fn cmd_train(cfg: &RunConfig, out: &mut dyn std::io::Write) -> CliResult {
    let train_set = load_split(cfg, "paths.train_dir", &cfg.paths.train_dir)?;
    let valid_set = load_split(cfg, "paths.valid_dir", &cfg.paths.valid_dir)?;
    let output_dir = &cfg.paths.output_dir;
    cfg.echo()?;

    let stats = if cfg.augment.featurewise_std_normalization {
        fit_stats(train_set.iter().map(|s| &s.image))?
    } else {
        NormStats::identity()
    };
    let mut graph = build_model(cfg)?;
    let [tn, tp] = class_counts(&train_set);
    let [vn, vp] = class_counts(&valid_set);
    let manifest = format!(
        "seed={}\ntrain: total={} nonPdr={tn} pdr={tp}\nvalid: total={} nonPdr={vn} pdr={vp}\nparams: total={} trainable={}\n",
        cfg.seed,
        train_set.len(),
        valid_set.len(),
        graph.param_count(),
        graph.trainable_param_count()
    );
    std::fs::write(output_dir.join("manifest.txt"), &manifest)?;
    emit(out, &manifest)?;

    let mut lines = Vec::new();
    let history = train::fit(
        &mut graph,
        &train_set,
        &valid_set,
        &stats,
        &cfg.augment,
        &cfg.train,
        |r| {
            lines.push(format!(
                "epoch {}: loss {:.4} acc {:.4} val_loss {:.4} val_acc {:.4}\n",
                r.epoch, r.train_loss, r.train_acc, r.val_loss, r.val_acc
            ));
        },
    )?;
    for line in &lines {
        emit(out, line)?;
    }
    let mut log_text = format!("# seed={}\n", cfg.seed);
    log_text.push_str(&history.to_log());
    std::fs::write(output_dir.join("history.log"), log_text)?;
    std::fs::write(output_dir.join("history.json"), history.to_json())?;
    save_model(&graph, &stats, &cfg.paths.model_out).map_err(Failure::artifact)?;
    emit(
        out,
        &format!(
            "stopped: {:?} after {} epoch(s), best epoch {}\nmodel written to {}\n",
            history.stop_reason,
            history.records.len(),
            history.best_epoch,
            cfg.paths.model_out.display()
        ),
    )
}

fn scorer_for<'a>(cfg: &RunConfig, graph: &'a ModelGraph, stats: &'a NormStats) -> CliResult<ModelScorer<'a>> {
    let mut scorer = ModelScorer::new(graph, stats).map_err(Failure::artifact)?;
    scorer.augment = cfg.augment.clone();
    scorer.preprocess = cfg.preprocess.clone();
    Ok(scorer)
}

pub fn cmd_evaluate(cfg: &RunConfig, args: &EvaluateArgs, out: &mut dyn std::io::Write) -> CliResult {
    let model_path = args.model.as_ref().unwrap_or(&cfg.paths.model_out);
    let (graph, stats) = load_model(model_path).map_err(Failure::artifact)?;
    let scorer = scorer_for(cfg, &graph, &stats)?;
    let test_dir = args.test_dir.as_ref().unwrap_or(&cfg.paths.test_dir);
    let report = batch_report(&scorer, test_dir)?;
    emit(out, &report.to_text())?;
    let json_path = match &args.report {
        Some(p) => p.clone(),
        None => {
            std::fs::create_dir_all(&cfg.paths.output_dir)?;
            cfg.paths.output_dir.join("report.json")
        }
    };
    std::fs::write(&json_path, report.to_json()).map_err(|e| Error::file(&json_path, e))?;
    if !report.failures.is_empty() {
        return Err(Failure::data(format!("{} image(s) could not be read", report.failures.len())));
    }
    Ok(())
}

pub fn cmd_predict(cfg: &RunConfig, args: &PredictArgs, out: &mut dyn std::io::Write) -> CliResult {
    let model_path = args.model.as_ref().unwrap_or(&cfg.paths.model_out);
    let (graph, stats) = load_model(model_path).map_err(Failure::artifact)?;
    let scorer = scorer_for(cfg, &graph, &stats)?;
    let img = Image::load(&args.image)?;
    let p = Prediction::new(&args.image, scorer.score(&img)?, None);
    let name = args.image.file_name().unwrap_or_default().to_string_lossy();
    emit(
        out,
        &format!(
            "{} >>> {name}\n{}\nclass: {}\n",
            p.predicted_class().to_uppercase(),
            bracketed(p.score),
            p.predicted_class()
        ),
    )
}
