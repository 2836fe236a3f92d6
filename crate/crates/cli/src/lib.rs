//! Command-line pipelines over the `vidalign` library.
//!
//! Every subcommand derives all randomness from `--seed`, never writes into
//! its input dataset directory, and reports failures as a single line
//! `error: <module>: <message>` with exit code 1. Usage errors exit with 2.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use vidalign::alignment::{CoarseForm, InitConfig, ModelParams, Variant};
use vidalign::embedding_store::{load_dataset, save_dataset, EmbeddingDataset};
use vidalign::eval::protocols::{candidate_group_count, stratified_split};
use vidalign::eval::{
    class_subset, evaluate, few_shot_split, generate_synthetic, run_ablation,
    tpp_correlation_study, write_profiles_csv, zero_shot_eval, SyntheticConfig, TrainedModel,
};
use vidalign::subtext_metrics::{select_subtext_set, Scaler, TppConfig};
use vidalign::training::gradcheck::{grad_check, GradCheckConfig, GradFixture};
use vidalign::training::{train, write_history_csv, TrainConfig};
use vidalign::Error;

/// Environment variable naming the default dataset directory.
pub const DATA_ENV: &str = "VIDALIGN_DATA";

#[derive(Debug, Parser)]
#[command(
    name = "vidalign",
    version,
    about = "Multi-granularity video-text alignment"
)]
struct Cli {
    /// Seed for every random choice.
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    /// Worker threads (default: all cores). Results do not depend on it.
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// TOML file whose values override command-line flags.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct DataArg {
    /// Dataset directory.
    #[arg(long, env = DATA_ENV)]
    data: PathBuf,
}

#[derive(Debug, Args, Clone)]
struct TrainFlags {
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    weight_decay: Option<f64>,
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long)]
    tau: Option<f64>,
    /// baseline | coarse | fine | full
    #[arg(long)]
    variant: Option<Variant>,
    /// Coarse weights as exp(sim) / sum(sim) instead of a per-token softmax.
    #[arg(long)]
    literal_coarse: bool,
}

#[derive(Debug, Args, Clone)]
struct TppFlags {
    /// Scaler applied to sigma: identity | one-minus | power:<p>
    #[arg(long, default_value = "identity")]
    alpha: Scaler,
    /// Scaler applied to delta.
    #[arg(long, default_value = "identity")]
    beta: Scaler,
}

#[derive(Debug, Args)]
struct SynthFlags {
    #[arg(long)]
    classes: Option<usize>,
    #[arg(long)]
    atomics: Option<usize>,
    #[arg(long)]
    shared_fraction: Option<f64>,
    #[arg(long)]
    frames: Option<usize>,
    #[arg(long)]
    dim: Option<usize>,
    #[arg(long)]
    noise: Option<f64>,
    #[arg(long)]
    concentration: Option<f64>,
    #[arg(long)]
    videos_per_class: Option<usize>,
    #[arg(long)]
    candidate_groups: Option<usize>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Check a dataset directory and print the validation report.
    Validate(DataArg),
    /// Write a planted synthetic dataset.
    GenSynth {
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        synth: SynthFlags,
    },
    /// Score candidate sub-text groups and pick one per class.
    SelectSubtexts {
        #[command(flatten)]
        data: DataArg,
        #[command(flatten)]
        tpp: TppFlags,
    },
    /// Train on every video and write model.json and history.csv.
    Train {
        #[command(flatten)]
        data: DataArg,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        train: TrainFlags,
    },
    /// Evaluate a trained model.
    Eval {
        #[command(flatten)]
        data: DataArg,
        #[arg(long)]
        model: PathBuf,
        /// Also write per-frame importance profiles as CSV.
        #[arg(long)]
        profiles: Option<PathBuf>,
    },
    /// Train all four variants on a split and compare them.
    Ablate {
        #[command(flatten)]
        data: DataArg,
        #[arg(long, default_value_t = 0.5)]
        train_fraction: f64,
        /// Write the table as CSV here as well.
        #[arg(long)]
        out: Option<PathBuf>,
        #[command(flatten)]
        train: TrainFlags,
    },
    /// Evaluate on classes unseen during training.
    ZeroShot {
        #[command(flatten)]
        data: DataArg,
        /// Frozen model to evaluate; its classes must not appear in the data.
        #[arg(long, conflicts_with = "seen")]
        model: Option<PathBuf>,
        /// Train on the first N classes and evaluate on the rest.
        #[arg(long)]
        seen: Option<usize>,
        #[command(flatten)]
        train: TrainFlags,
    },
    /// Train on a few videos per class and evaluate on the remainder.
    FewShot {
        #[command(flatten)]
        data: DataArg,
        #[arg(long)]
        shots: usize,
        #[command(flatten)]
        train: TrainFlags,
    },
    /// Correlate sub-text group TPP with accuracy after training.
    TppStudy {
        #[command(flatten)]
        data: DataArg,
        #[arg(long, default_value_t = 0.5)]
        train_fraction: f64,
        /// Write the (tpp, top1) pairs as CSV here as well.
        #[arg(long)]
        out: Option<PathBuf>,
        #[command(flatten)]
        tpp: TppFlags,
        #[command(flatten)]
        train: TrainFlags,
    },
    /// Compare analytic gradients with central differences on a fixture.
    GradCheck {
        #[arg(long, default_value_t = 1e-5)]
        h: f64,
        /// Sampled coordinates per parameter tensor.
        #[arg(long, default_value_t = 40)]
        per_tensor: usize,
        /// Check every coordinate.
        #[arg(long)]
        full: bool,
    },
}

/// Overrides read from `--config`.
#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct ConfigFile {
    seed: Option<u64>,
    threads: Option<usize>,
    train: Option<toml::Table>,
    synth: Option<toml::Table>,
    tpp: Option<TppSection>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct TppSection {
    alpha: Option<String>,
    beta: Option<String>,
    epsilon: Option<f64>,
}

#[derive(Debug)]
enum Failure {
    Module(Error),
    Other(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Module(e)
    }
}

impl Failure {
    fn line(&self) -> String {
        match self {
            Failure::Module(e) => format!("error: {}: {}", e.module(), single_line(&e.to_string())),
            Failure::Other(m) => format!("error: cli: {}", single_line(m)),
        }
    }
}

fn single_line(s: &str) -> String {
    s.split('\n')
        .map(str::trim)
        .filter(|l| !l.is_empty())
        .collect::<Vec<_>>()
        .join("; ")
}

type CliResult<T> = std::result::Result<T, Failure>;

fn other(msg: impl Into<String>) -> Failure {
    Failure::Other(msg.into())
}

fn overlay<T: Serialize + for<'de> Deserialize<'de>>(
    base: T,
    table: Option<&toml::Table>,
    invalid: fn(String) -> Error,
) -> CliResult<T> {
    let Some(table) = table else { return Ok(base) };
    let mut merged = toml::Table::try_from(&base).map_err(|e| invalid(e.to_string()))?;
    for (k, v) in table {
        merged.insert(k.clone(), v.clone());
    }
    Ok(merged
        .try_into()
        .map_err(|e: toml::de::Error| invalid(e.message().to_string()))?)
}

struct Context {
    seed: u64,
    file: ConfigFile,
}

impl Context {
    fn train_config(&self, flags: &TrainFlags) -> CliResult<TrainConfig> {
        let mut cfg = TrainConfig::default();
        if let Some(v) = flags.epochs {
            cfg.epochs = v;
        }
        if let Some(v) = flags.batch_size {
            cfg.batch_size = v;
        }
        if let Some(v) = flags.lr {
            cfg.lr = v;
        }
        if let Some(v) = flags.weight_decay {
            cfg.weight_decay = v;
        }
        if let Some(v) = flags.lambda {
            cfg.lambda = v;
        }
        if let Some(v) = flags.tau {
            cfg.tau = v;
        }
        if let Some(v) = flags.variant {
            cfg.variant = v;
        }
        if flags.literal_coarse {
            cfg.coarse_form = CoarseForm::Literal;
        }
        let cfg = overlay(cfg, self.file.train.as_ref(), Error::TrainConfigInvalid)?;
        cfg.check()?;
        Ok(cfg)
    }

    fn synth_config(&self, flags: &SynthFlags) -> CliResult<SyntheticConfig> {
        let d = SyntheticConfig::default();
        let cfg = SyntheticConfig {
            classes: flags.classes.unwrap_or(d.classes),
            atomics: flags.atomics.unwrap_or(d.atomics),
            shared_fraction: flags.shared_fraction.unwrap_or(d.shared_fraction),
            frames: flags.frames.unwrap_or(d.frames),
            dim: flags.dim.unwrap_or(d.dim),
            semantic_dim: flags.dim.map(|dim| dim / 2).unwrap_or(d.semantic_dim),
            noise: flags.noise.unwrap_or(d.noise),
            concentration: flags.concentration.unwrap_or(d.concentration),
            videos_per_class: flags.videos_per_class.unwrap_or(d.videos_per_class),
            candidate_groups: flags.candidate_groups.unwrap_or(d.candidate_groups),
            seed: self.seed,
            ..d
        };
        let cfg = overlay(cfg, self.file.synth.as_ref(), Error::ConfigInvalid)?;
        cfg.check()?;
        Ok(cfg)
    }

    fn tpp_config(&self, flags: &TppFlags) -> CliResult<TppConfig> {
        let mut cfg = TppConfig {
            alpha: flags.alpha,
            beta: flags.beta,
            ..TppConfig::default()
        };
        if let Some(sec) = &self.file.tpp {
            if let Some(a) = &sec.alpha {
                cfg.alpha = a.parse()?;
            }
            if let Some(b) = &sec.beta {
                cfg.beta = b.parse()?;
            }
            if let Some(e) = sec.epsilon {
                cfg.epsilon = e;
            }
        }
        cfg.check()?;
        Ok(cfg)
    }
}

fn load(data: &DataArg) -> CliResult<EmbeddingDataset> {
    Ok(load_dataset(&data.data)?)
}

fn to_json<T: Serialize>(v: &T) -> String {
    serde_json::to_string_pretty(v).expect("plain data serializes")
}

/// Refuses output locations inside the input dataset directory.
fn guard_output(data: &Path, out: &Path) -> CliResult<()> {
    let data = fs::canonicalize(data).map_err(|e| other(format!("{}: {e}", data.display())))?;
    let mut probe = out.to_path_buf();
    // resolve the nearest existing ancestor of a path that may not exist yet
    let resolved = loop {
        if let Ok(p) = fs::canonicalize(&probe) {
            break Some(p);
        }
        if !probe.pop() || probe.as_os_str().is_empty() {
            break fs::canonicalize(".").ok();
        }
    };
    if let Some(r) = resolved {
        let full = r.join(out.strip_prefix(&probe).unwrap_or(Path::new("")));
        if full.starts_with(&data) {
            return Err(other(format!(
                "output {} lies inside the input dataset {}",
                out.display(),
                data.display()
            )));
        }
    }
    Ok(())
}

fn write_file(path: &Path, bytes: &[u8]) -> CliResult<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| other(format!("{}: {e}", dir.display())))?;
    }
    fs::write(path, bytes).map_err(|e| other(format!("{}: {e}", path.display())))
}

fn untrained_params(dim: usize, variant: Variant, seed: u64) -> CliResult<ModelParams> {
    use rand::SeedableRng;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let mut p = ModelParams::init(dim, &InitConfig::default(), &mut rng)?;
    p.variant = variant;
    Ok(p)
}

#[derive(Serialize)]
struct Selection {
    class: String,
    chosen: usize,
    tpp: Vec<f64>,
    sigma: Vec<Vec<f64>>,
    delta: Vec<Vec<f64>>,
}

fn dispatch(cmd: Command, ctx: &Context, out: &mut Vec<u8>) -> CliResult<()> {
    let mut say = |s: String| -> CliResult<()> {
        writeln!(out, "{s}").map_err(|e| other(format!("stdout: {e}")))
    };
    match cmd {
        Command::Validate(data) => {
            let ds = load(&data)?;
            say(format!(
                "valid: {} videos, {} classes, dimension {}",
                ds.videos.len(),
                ds.classes.len(),
                ds.dim
            ))?;
        }
        Command::GenSynth { out: dir, synth } => {
            let cfg = ctx.synth_config(&synth)?;
            let ds = generate_synthetic(&cfg)?;
            save_dataset(&ds, &dir)?;
            say(format!(
                "wrote {} videos, {} classes to {}",
                ds.videos.len(),
                ds.classes.len(),
                dir.display()
            ))?;
        }
        Command::SelectSubtexts { data, tpp } => {
            let ds = load(&data)?;
            let cfg = ctx.tpp_config(&tpp)?;
            if ds.candidates.is_empty() {
                return Err(other("dataset has no candidate sub-text groups"));
            }
            let mut rows = Vec::new();
            for cs in &ds.candidates {
                let global = &ds.classes[cs.class_id].global;
                let sel =
                    select_subtext_set(cs, global, &cfg).map_err(Error::in_class(cs.class_id))?;
                rows.push(Selection {
                    class: ds.classes[cs.class_id].class_name.clone(),
                    chosen: sel.chosen,
                    tpp: sel.scores.iter().map(|s| s.tpp).collect(),
                    sigma: sel.scores.iter().map(|s| s.sigma.clone()).collect(),
                    delta: sel.scores.iter().map(|s| s.delta.clone()).collect(),
                });
            }
            say(to_json(&rows))?;
        }
        Command::Train {
            data,
            out: dir,
            train: flags,
        } => {
            guard_output(&data.data, &dir)?;
            let ds = load(&data)?;
            let cfg = ctx.train_config(&flags)?;
            let result = train(&ds, &cfg, ctx.seed)?;
            let model = TrainedModel {
                params: result.params,
                classes: ds.class_names(),
            };
            let mut model_json = to_json(&model);
            model_json.push('\n');
            write_file(&dir.join("model.json"), model_json.as_bytes())?;
            let mut csv = Vec::new();
            write_history_csv(&result.history, &mut csv)?;
            write_file(&dir.join("history.csv"), &csv)?;
            let last = result.history.last().expect("history has the initial row");
            say(format!(
                "trained {} epochs: loss {:.6}, train top-1 {:.4} (initial {:.4})",
                cfg.epochs, last.total, last.train_top1, result.history[0].train_top1
            ))?;
        }
        Command::Eval {
            data,
            model,
            profiles,
        } => {
            if let Some(p) = &profiles {
                guard_output(&data.data, p)?;
            }
            let ds = load(&data)?;
            let model = read_model(&model)?;
            let report = evaluate(&ds, &model.params)?;
            if let Some(p) = profiles {
                let mut buf = Vec::new();
                write_profiles_csv(&ds, &model.params, &mut buf)?;
                write_file(&p, &buf)?;
            }
            say(to_json(&report))?;
        }
        Command::Ablate {
            data,
            train_fraction,
            out: csv_out,
            train: flags,
        } => {
            if let Some(p) = &csv_out {
                guard_output(&data.data, p)?;
            }
            let ds = load(&data)?;
            let cfg = ctx.train_config(&flags)?;
            let (tr, ev) = stratified_split(&ds, train_fraction, ctx.seed)?;
            let table = run_ablation(&tr, &ev, &cfg, ctx.seed)?;
            if let Some(p) = csv_out {
                let mut buf = Vec::new();
                table.write_csv(&mut buf)?;
                write_file(&p, &buf)?;
            }
            say(to_json(&table))?;
        }
        Command::ZeroShot {
            data,
            model,
            seen,
            train: flags,
        } => {
            let ds = load(&data)?;
            match (model, seen) {
                (Some(path), _) => {
                    let model = read_model(&path)?;
                    say(to_json(&zero_shot_eval(&model, &ds)?))?;
                }
                (None, Some(n)) => {
                    if n == 0 || n >= ds.classes.len() {
                        return Err(other(format!(
                            "--seen must lie in 1..{} for {} classes",
                            ds.classes.len(),
                            ds.classes.len()
                        )));
                    }
                    let cfg = ctx.train_config(&flags)?;
                    let seen_ds = class_subset(&ds, &(0..n).collect::<Vec<_>>())?;
                    let unseen = class_subset(&ds, &(n..ds.classes.len()).collect::<Vec<_>>())?;
                    let result = train(&seen_ds, &cfg, ctx.seed)?;
                    let model = TrainedModel {
                        params: result.params,
                        classes: seen_ds.class_names(),
                    };
                    let trained = zero_shot_eval(&model, &unseen)?;
                    let base = evaluate(
                        &unseen,
                        &untrained_params(ds.dim, Variant::MeanPool, ctx.seed)?,
                    )?;
                    say(to_json(&serde_json::json!({
                        "trained": trained,
                        "untrained_baseline_top1": base.top1,
                        "gain": trained.top1 - base.top1,
                    })))?;
                }
                (None, None) => return Err(other("zero-shot needs --model or --seen")),
            }
        }
        Command::FewShot {
            data,
            shots,
            train: flags,
        } => {
            let ds = load(&data)?;
            let cfg = ctx.train_config(&flags)?;
            let (tr, ev) = few_shot_split(&ds, shots, ctx.seed)?;
            let result = train(&tr, &cfg, ctx.seed)?;
            let report = evaluate(&ev, &result.params)?;
            say(to_json(&serde_json::json!({
                "train_videos": tr.videos.len(),
                "eval_videos": ev.videos.len(),
                "report": report,
            })))?;
        }
        Command::TppStudy {
            data,
            train_fraction,
            out: csv_out,
            tpp,
            train: flags,
        } => {
            if let Some(p) = &csv_out {
                guard_output(&data.data, p)?;
            }
            let ds = load(&data)?;
            let cfg = ctx.train_config(&flags)?;
            let tcfg = ctx.tpp_config(&tpp)?;
            let (tr, ev) = stratified_split(&ds, train_fraction, ctx.seed)?;
            let study = tpp_correlation_study(&tr, &ev, &cfg, &tcfg, ctx.seed)?;
            if let Some(p) = csv_out {
                let mut buf = Vec::new();
                study.write_csv(&mut buf)?;
                write_file(&p, &buf)?;
            }
            let sign = if study.pearson_r > 0.0 {
                "positive"
            } else if study.pearson_r < 0.0 {
                "negative"
            } else {
                "zero"
            };
            say(to_json(&serde_json::json!({
                "groups": candidate_group_count(&tr),
                "points": study.points,
                "pearson_r": study.pearson_r,
                "sign": sign,
            })))?;
        }
        Command::GradCheck {
            h,
            per_tensor,
            full,
        } => {
            let fx = GradFixture::standard(ctx.seed)?;
            let cfg = GradCheckConfig {
                h,
                per_tensor: if full { None } else { Some(per_tensor) },
                seed: ctx.seed,
            };
            let report = grad_check(&fx.objective(), &fx.params, &cfg)?;
            for t in &report.tensors {
                say(format!(
                    "{:<24} {:>5} coords  max rel err {:.3e}",
                    t.name, t.coords, t.max_rel_error
                ))?;
            }
            say(format!(
                "max relative error {:.3e} over {} coordinates",
                report.max_rel_error, report.coords_checked
            ))?;
            if !(report.max_rel_error < 1e-4) {
                return Err(other(format!(
                    "gradient check failed: {:.3e} >= 1e-4",
                    report.max_rel_error
                )));
            }
        }
    }
    Ok(())
}

fn read_model(path: &Path) -> CliResult<TrainedModel> {
    let text = fs::read_to_string(path).map_err(|e| other(format!("{}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| other(format!("{}: {e}", path.display())))
}

/// Runs the CLI with explicit output streams; returns the exit code.
pub fn run_with<I, T>(argv: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => {
                    let _ = write!(out, "{e}");
                    0
                }
                _ => {
                    let _ = write!(err, "{}", e.render());
                    2
                }
            };
        }
    };
    let result = (|| -> CliResult<()> {
        let file = match &cli.config {
            Some(path) => {
                let text = fs::read_to_string(path)
                    .map_err(|e| other(format!("{}: {e}", path.display())))?;
                toml::from_str(&text)
                    .map_err(|e: toml::de::Error| other(format!("config: {}", e.message())))?
            }
            None => ConfigFile::default(),
        };
        let ctx = Context {
            seed: file.seed.unwrap_or(cli.seed),
            file,
        };
        let threads = ctx.file.threads.or(cli.threads);
        let mut builder = rayon::ThreadPoolBuilder::new();
        if let Some(n) = threads {
            builder = builder.num_threads(n);
        }
        let pool = builder
            .build()
            .map_err(|e| other(format!("thread pool: {e}")))?;
        let mut buf = Vec::new();
        let outcome = pool.install(|| dispatch(cli.command, &ctx, &mut buf));
        out.write_all(&buf)
            .map_err(|e| other(format!("stdout: {e}")))?;
        outcome
    })();
    match result {
        Ok(()) => 0,
        Err(f) => {
            let _ = writeln!(err, "{}", f.line());
            1
        }
    }
}

/// Runs the CLI against the process's standard streams.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let stdout = std::io::stdout();
    let stderr = std::io::stderr();
    run_with(argv, &mut stdout.lock(), &mut stderr.lock())
}
