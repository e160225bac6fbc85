//! Command-line front end.
//!
//! Every subcommand writes its reports into `--out`. Settings come from
//! flags first, then the TOML file named by `--config`, then built-in
//! defaults; the effective values are echoed into each report. Wall-clock
//! data goes to `run_meta.json` so the reports themselves are reproducible.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use clap::error::ErrorKind;
use clap::{Args, CommandFactory, FromArgMatches, Parser, Subcommand, ValueEnum};
use serde::Serialize;
use serde_json::{json, Value};

use crate::capacity::{self, Baseline, Exponents, PlanQuery};
use crate::crossover::{self, CROSSOVER_SCHEMA_VERSION};
use crate::error::{Error, Result};
use crate::fitter::{self, FitConfig};
use crate::forest::ForestConfig;
use crate::holdout_eval::{self, Axis, SplitSpec};
use crate::laws::{LawDocument, LawSpec, Variant};
use crate::run_data::{self, CorpusCatalog, Format, RunSet, ValidationConfig};
use crate::synth::{self, SynthDesign};
use crate::transfer::{self, CurveBank, TRANSFER_SCHEMA_VERSION};

pub const FAILED_MARKER: &str = "FAILED";
pub const META_FILE: &str = "run_meta.json";
pub const THREADS_ENV: &str = "ATLAS_KIT_THREADS";

#[derive(Parser, Debug)]
#[command(name = "atlas-kit", version, about = "Fit, evaluate, and apply multilingual scaling laws")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Fit a scaling law for one target language.
    Fit(FitArgs),
    /// Held-out R² of one or more law variants along the evaluation axes.
    Eval(EvalArgs),
    /// Transfer scores from learning curves, with forest estimates for unmeasured pairs.
    Transfer(TransferArgs),
    /// Model/data multipliers for serving more languages at equal loss.
    Plan(PlanArgs),
    /// Pretrain-versus-finetune crossover points and the compute law.
    Crossover(CrossoverArgs),
    /// Generate synthetic runs or curves from a known law.
    Synth(SynthArgs),
}

#[derive(Args, Debug)]
struct Common {
    /// Output directory (created if missing).
    #[arg(long)]
    out: PathBuf,
    /// TOML file with default values; flags take precedence.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Also write CSVs shaped for plotting.
    #[arg(long)]
    emit_plot_data: bool,
}

#[derive(Args, Debug)]
struct FitTuning {
    #[arg(long)]
    random_starts: Option<usize>,
    #[arg(long)]
    local_starts: Option<usize>,
    #[arg(long)]
    max_iters: Option<usize>,
    #[arg(long)]
    huber_delta: Option<f64>,
    /// Allowed relative gap between summed per-language tokens and total_tokens.
    #[arg(long, default_value_t = 1e-6)]
    token_slack: f64,
}

impl FitTuning {
    fn config(&self, seed: u64) -> Result<FitConfig> {
        let d = FitConfig::default();
        let c = FitConfig {
            n_random_starts: self.random_starts.unwrap_or(d.n_random_starts),
            local_starts: self.local_starts.unwrap_or(d.local_starts),
            max_iters: self.max_iters.unwrap_or(d.max_iters),
            huber_delta: self.huber_delta.unwrap_or(d.huber_delta),
            seed,
            ..d
        };
        c.validate()?;
        Ok(c)
    }

    fn validation(&self) -> ValidationConfig {
        ValidationConfig {
            token_slack_rel: self.token_slack,
        }
    }
}

#[derive(Args, Debug)]
struct FitArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    runs: PathBuf,
    /// Unique-token counts; not needed for `bsl`.
    #[arg(long)]
    catalog: Option<PathBuf>,
    #[arg(long, default_value = "atlas_full")]
    law: Variant,
    #[arg(long)]
    target: String,
    /// Explicit transfer languages; otherwise the most co-sampled ones.
    #[arg(long, value_delimiter = ',')]
    transfer_set: Vec<String>,
    #[arg(long, default_value_t = 3)]
    k_transfer: usize,
    #[command(flatten)]
    tuning: FitTuning,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    runs: PathBuf,
    #[arg(long)]
    catalog: Option<PathBuf>,
    #[arg(long, value_delimiter = ',', default_value = "atlas_full")]
    law: Vec<Variant>,
    /// Target languages; defaults to every eval language in the runs.
    #[arg(long, value_delimiter = ',')]
    targets: Vec<String>,
    #[arg(long, value_delimiter = ',', default_value = "random,n,d,c,m")]
    axes: Vec<Axis>,
    #[arg(long, default_value_t = 3)]
    k_transfer: usize,
    /// Hold-out fraction for the random, d, and c axes.
    #[arg(long)]
    fraction: Option<f64>,
    #[arg(long, value_delimiter = ',')]
    held_scales: Vec<u64>,
    #[arg(long, value_delimiter = ',')]
    held_mixtures: Vec<String>,
    /// Also report R² over all languages' hold-out points together.
    #[arg(long)]
    pooled: bool,
    #[command(flatten)]
    tuning: FitTuning,
}

#[derive(Args, Debug)]
struct TransferArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    curves: PathBuf,
    /// Monolingual token count at which BTS is measured.
    #[arg(long)]
    d_mono: f64,
    /// Finetuning horizon for FAS and baseline deviation.
    #[arg(long)]
    d_max: f64,
    /// Language grid; defaults to languages with a self-finetuning curve.
    #[arg(long, value_delimiter = ',')]
    languages: Vec<String>,
    /// Model size suffix (`@N`) of the curves to use.
    #[arg(long)]
    n_params: Option<u64>,
    #[arg(long, default_value_t = 300)]
    trees: usize,
    #[arg(long, default_value_t = 5)]
    cv_folds: usize,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum BaselineKind {
    ComputeOptimal,
    Explicit,
}

#[derive(Args, Debug)]
struct PlanArgs {
    #[command(flatten)]
    common: Common,
    /// Language-count ratio K'/K.
    #[arg(long)]
    r: f64,
    #[arg(long, allow_hyphen_values = true)]
    phi_alpha: Option<f64>,
    #[arg(long, allow_hyphen_values = true)]
    psi_beta: Option<f64>,
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    beta: Option<f64>,
    #[arg(long, allow_hyphen_values = true)]
    phi: Option<f64>,
    #[arg(long, allow_hyphen_values = true)]
    psi: Option<f64>,
    /// Fit the capacity law to uniform-mixture runs first.
    #[arg(long)]
    runs: Option<PathBuf>,
    /// Restrict the capacity fit to one eval language (default: pooled).
    #[arg(long)]
    language: Option<String>,
    #[arg(long, value_enum, default_value = "compute-optimal")]
    baseline: BaselineKind,
    #[arg(long)]
    k: Option<f64>,
    #[arg(long)]
    n: Option<f64>,
    #[arg(long)]
    d_t: Option<f64>,
    /// Model multipliers for the frontier; default is a 64-point sweep.
    #[arg(long, value_delimiter = ',')]
    sweep: Vec<f64>,
    #[command(flatten)]
    tuning: FitTuning,
}

#[derive(Args, Debug)]
struct CrossoverArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    curves: PathBuf,
    /// Compute budget for a pretrain-or-finetune decision.
    #[arg(long)]
    budget_c: Option<f64>,
    /// Model size for the decision.
    #[arg(long)]
    n: Option<f64>,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Preset {
    Atlas,
    Capacity,
    Curves,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum OutFormat {
    Csv,
    Jsonl,
}

#[derive(Args, Debug)]
struct SynthArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long, value_enum, default_value = "atlas")]
    preset: Preset,
    /// Design file (TOML or JSON) replacing the preset grid; `--seed` still applies.
    #[arg(long)]
    design: Option<PathBuf>,
    /// Catalog for a design file; defaults to the built-in catalog.
    #[arg(long)]
    catalog: Option<PathBuf>,
    #[arg(long)]
    noise: Option<f64>,
    #[arg(long, value_enum, default_value = "jsonl")]
    format: OutFormat,
}

const DEFAULT_NOISE: f64 = 0.01;

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::Fit(_) => "fit",
            Command::Eval(_) => "eval",
            Command::Transfer(_) => "transfer",
            Command::Plan(_) => "plan",
            Command::Crossover(_) => "crossover",
            Command::Synth(_) => "synth",
        }
    }

    fn common(&self) -> &Common {
        match self {
            Command::Fit(a) => &a.common,
            Command::Eval(a) => &a.common,
            Command::Transfer(a) => &a.common,
            Command::Plan(a) => &a.common,
            Command::Crossover(a) => &a.common,
            Command::Synth(a) => &a.common,
        }
    }

    /// Cross-flag requirements clap cannot express.
    fn check_usage(&self) -> std::result::Result<(), String> {
        match self {
            Command::Fit(a) if a.catalog.is_none() && a.law != Variant::Bsl => {
                Err(format!("--catalog is required for law `{}`", a.law))
            }
            Command::Eval(a) if a.catalog.is_none() && a.law.iter().any(|v| *v != Variant::Bsl) => {
                Err("--catalog is required unless every law is `bsl`".into())
            }
            Command::Plan(a) => {
                let exps = [a.alpha, a.beta, a.phi, a.psi];
                let full = exps.iter().all(Option::is_some);
                let ratios = a.phi_alpha.is_some() && a.psi_beta.is_some();
                let sources = usize::from(a.runs.is_some()) + usize::from(full) + usize::from(ratios);
                if exps.iter().any(Option::is_some) && !full {
                    return Err("--alpha, --beta, --phi and --psi must be given together".into());
                }
                if a.phi_alpha.is_some() != a.psi_beta.is_some() {
                    return Err("--phi-alpha and --psi-beta must be given together".into());
                }
                if sources != 1 {
                    return Err("give exactly one of --runs, the four exponents, or --phi-alpha/--psi-beta".into());
                }
                if let BaselineKind::Explicit = a.baseline {
                    if a.runs.is_none() {
                        return Err("an explicit baseline needs --runs to fit term coefficients".into());
                    }
                    if a.k.is_none() || a.n.is_none() || a.d_t.is_none() {
                        return Err("an explicit baseline needs --k, --n and --d-t".into());
                    }
                }
                if ratios && !a.sweep.is_empty() {
                    return Err("--sweep needs individual exponents, not ratios".into());
                }
                Ok(())
            }
            Command::Crossover(a) if a.budget_c.is_some() != a.n.is_some() => {
                Err("--budget-c and --n must be given together".into())
            }
            Command::Synth(a) if a.design.is_some() && matches!(a.preset, Preset::Curves) => {
                Err("--design applies to the atlas and capacity presets only".into())
            }
            Command::Synth(a) if a.catalog.is_some() && a.design.is_none() => {
                Err("--catalog is only used with --design".into())
            }
            _ => Ok(()),
        }
    }
}

/// Run the CLI: 0 on success, 1 on a data or fit error, 2 on a usage error.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString>,
{
    let argv: Vec<OsString> = argv.into_iter().map(Into::into).collect();
    let argv = match merge_config_file(argv) {
        Ok(a) => a,
        Err(msg) => {
            eprintln!("error: {msg}");
            return 2;
        }
    };
    let matches = match Cli::command().try_get_matches_from(&argv) {
        Ok(m) => m,
        Err(e) => {
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 2,
            };
            let _ = e.print();
            return code;
        }
    };
    let cli = match Cli::from_arg_matches(&matches) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return 2;
        }
    };
    if let Err(msg) = cli.command.check_usage() {
        eprintln!("error: {msg}");
        return 2;
    }
    let threads = match std::env::var(THREADS_ENV) {
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n > 0 => n,
            _ => {
                eprintln!("error: {THREADS_ENV} must be a positive integer, got `{v}`");
                return 2;
            }
        },
        Err(_) => 0,
    };
    let effective = match matches.subcommand() {
        Some((_, sub)) => effective_config(&Cli::command(), cli.command.name(), sub),
        None => Value::Null,
    };
    let out = cli.command.common().out.clone();
    if let Err(e) = fs::create_dir_all(&out) {
        eprintln!("error: cannot create {}: {e}", out.display());
        return 1;
    }
    let marker = out.join(FAILED_MARKER);
    if let Err(e) = fs::write(&marker, "in progress\n") {
        eprintln!("error: cannot write {}: {e}", marker.display());
        return 1;
    }
    let started = unix_seconds();
    let result = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| Error::invalid(e.to_string()))
        .and_then(|pool| pool.install(|| execute(&cli.command, &effective)));
    match result {
        Ok(written) => {
            let meta = json!({
                "command": cli.command.name(),
                "argv": argv.iter().map(|a| a.to_string_lossy().into_owned()).collect::<Vec<_>>(),
                "version": env!("CARGO_PKG_VERSION"),
                "started_unix": started,
                "finished_unix": unix_seconds(),
                "threads": if threads == 0 { rayon::current_num_threads() } else { threads },
                "outputs": written,
            });
            if let Err(e) = write_json(&out, META_FILE, &meta) {
                eprintln!("error: {e}");
                let _ = fs::write(&marker, format!("{e}\n"));
                return 1;
            }
            let _ = fs::remove_file(&marker);
            0
        }
        Err(e) => {
            eprintln!("error: {e}");
            let _ = fs::write(&marker, format!("{e}\n"));
            1
        }
    }
}

fn unix_seconds() -> f64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs_f64()).unwrap_or(0.0)
}

/// Append `--key value` for config-file keys not already given as flags.
/// Top-level keys apply to any subcommand that accepts them; a table named
/// after the subcommand must contain only keys it accepts.
fn merge_config_file(mut argv: Vec<OsString>) -> std::result::Result<Vec<OsString>, String> {
    let strs: Vec<String> = argv.iter().map(|a| a.to_string_lossy().into_owned()).collect();
    let mut path = None;
    for (i, a) in strs.iter().enumerate() {
        if a == "--config" {
            path = strs.get(i + 1).cloned();
        } else if let Some(p) = a.strip_prefix("--config=") {
            path = Some(p.to_string());
        }
    }
    let Some(path) = path else { return Ok(argv) };
    let Some(sub_name) = strs.iter().skip(1).find(|a| !a.starts_with('-')).cloned() else {
        return Ok(argv);
    };
    let root = Cli::command();
    let Some(sub) = root.find_subcommand(&sub_name) else { return Ok(argv) };
    let text = fs::read_to_string(&path).map_err(|e| format!("cannot read config {path}: {e}"))?;
    let table: toml::Table = text.parse().map_err(|e| format!("config {path}: {e}"))?;
    let known: BTreeMap<String, bool> = sub
        .get_arguments()
        .filter_map(|a| {
            let long = a.get_long()?.to_string();
            let is_flag = !a.get_action().takes_values();
            Some((long, is_flag))
        })
        .collect();
    let given = |long: &str| strs.iter().any(|a| a == &format!("--{long}") || a.starts_with(&format!("--{long}=")));
    let mut entries: Vec<(String, toml::Value, bool)> = Vec::new();
    for (k, v) in &table {
        if let toml::Value::Table(section) = v {
            if k == &sub_name {
                for (sk, sv) in section {
                    entries.push((sk.clone(), sv.clone(), true));
                }
            }
        } else {
            entries.push((k.clone(), v.clone(), false));
        }
    }
    let mut resolved: BTreeMap<String, toml::Value> = BTreeMap::new();
    for (k, v, strict) in entries {
        let long = k.replace('_', "-");
        if !known.contains_key(&long) || long == "config" {
            if strict {
                return Err(format!("config {path}: `{sub_name}` has no setting `{k}`"));
            }
            continue;
        }
        // Section values override top-level ones.
        if strict || !resolved.contains_key(&long) {
            resolved.insert(long, v);
        }
    }
    for (long, v) in resolved {
        if given(&long) {
            continue;
        }
        if known[&long] {
            match v {
                toml::Value::Boolean(true) => argv.push(format!("--{long}").into()),
                toml::Value::Boolean(false) => {}
                _ => return Err(format!("config {path}: `{long}` must be true or false")),
            }
            continue;
        }
        let text = match v {
            toml::Value::String(s) => s,
            toml::Value::Integer(i) => i.to_string(),
            toml::Value::Float(f) => format!("{f:?}"),
            toml::Value::Boolean(b) => b.to_string(),
            toml::Value::Array(items) => items
                .iter()
                .map(|i| match i {
                    toml::Value::String(s) => s.clone(),
                    other => other.to_string(),
                })
                .collect::<Vec<_>>()
                .join(","),
            other => return Err(format!("config {path}: unsupported value for `{long}`: {other}")),
        };
        argv.push(format!("--{long}={text}").into());
    }
    Ok(argv)
}

/// Every argument of the subcommand with its final raw value(s).
fn effective_config(root: &clap::Command, sub_name: &str, m: &clap::ArgMatches) -> Value {
    let mut out = serde_json::Map::new();
    if let Some(sub) = root.find_subcommand(sub_name) {
        for arg in sub.get_arguments() {
            let id = arg.get_id().as_str();
            if matches!(id, "help" | "version") {
                continue;
            }
            let Ok(Some(raw)) = m.try_get_raw(id) else {
                out.insert(id.to_string(), Value::Null);
                continue;
            };
            let vals: Vec<String> = raw.map(|v| v.to_string_lossy().into_owned()).collect();
            let v = if arg.get_num_args().is_some_and(|n| n.max_values() > 1) || arg.get_value_delimiter().is_some() {
                Value::from(vals)
            } else {
                Value::from(vals.into_iter().next().unwrap_or_default())
            };
            out.insert(id.to_string(), v);
        }
    }
    Value::Object(out)
}

fn io_at(path: &Path, e: std::io::Error) -> Error {
    Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display())))
}

fn open(path: &Path) -> Result<BufReader<File>> {
    File::open(path).map(BufReader::new).map_err(|e| io_at(path, e))
}

fn read_runs(path: &Path, validation: &ValidationConfig) -> Result<RunSet> {
    run_data::parse_runs(open(path)?, Format::from_path(path), validation)
}

fn read_catalog(path: Option<&PathBuf>) -> Result<CorpusCatalog> {
    match path {
        Some(p) => run_data::parse_catalog(open(p)?),
        None => Ok(CorpusCatalog::default()),
    }
}

fn read_bank(path: &Path) -> Result<CurveBank> {
    CurveBank::new(run_data::parse_curves(open(path)?, Format::from_path(path))?)
}

fn create(dir: &Path, name: &str) -> Result<BufWriter<File>> {
    let path = dir.join(name);
    File::create(&path).map(BufWriter::new).map_err(|e| io_at(&path, e))
}

fn write_json(dir: &Path, name: &str, value: &impl Serialize) -> Result<()> {
    let mut w = create(dir, name)?;
    serde_json::to_writer_pretty(&mut w, value)?;
    w.write_all(b"\n")?;
    w.flush()?;
    Ok(())
}

struct Outputs<'a> {
    dir: &'a Path,
    written: Vec<String>,
}

impl Outputs<'_> {
    fn json(&mut self, name: &str, value: &impl Serialize) -> Result<()> {
        write_json(self.dir, name, value)?;
        self.written.push(name.to_string());
        Ok(())
    }

    fn with(&mut self, name: &str, f: impl FnOnce(&mut BufWriter<File>) -> Result<()>) -> Result<()> {
        let mut w = create(self.dir, name)?;
        f(&mut w)?;
        w.flush()?;
        self.written.push(name.to_string());
        Ok(())
    }
}

fn report(schema: &str, command: &str, config: &Value, body: Value) -> Value {
    let mut m = serde_json::Map::new();
    m.insert("schema_version".into(), Value::from(schema));
    m.insert("command".into(), Value::from(command));
    m.insert("config".into(), config.clone());
    if let Value::Object(b) = body {
        m.extend(b);
    }
    Value::Object(m)
}

fn execute(cmd: &Command, config: &Value) -> Result<Vec<String>> {
    let common = cmd.common();
    let mut out = Outputs {
        dir: &common.out,
        written: Vec::new(),
    };
    match cmd {
        Command::Fit(a) => run_fit(a, config, &mut out)?,
        Command::Eval(a) => run_eval(a, config, &mut out)?,
        Command::Transfer(a) => run_transfer(a, config, &mut out)?,
        Command::Plan(a) => run_plan(a, config, &mut out)?,
        Command::Crossover(a) => run_crossover(a, config, &mut out)?,
        Command::Synth(a) => run_synth(a, config, &mut out)?,
    }
    Ok(out.written)
}

pub const FIT_SCHEMA_VERSION: &str = "atlas-kit.fit/1";
pub const EVAL_SCHEMA_VERSION: &str = "atlas-kit.eval/1";
pub const SYNTH_SCHEMA_VERSION: &str = "atlas-kit.synth/1";

fn run_fit(a: &FitArgs, config: &Value, out: &mut Outputs) -> Result<()> {
    let fit_config = a.tuning.config(a.common.seed)?;
    let all = read_runs(&a.runs, &a.tuning.validation())?;
    let catalog = read_catalog(a.catalog.as_ref())?;
    let runs = all.filter(|r| r.eval_language == a.target);
    if runs.is_empty() {
        return Err(Error::invalid(format!("no runs are evaluated on `{}`", a.target)));
    }
    let transfer_set = if !a.law.uses_transfer() {
        Vec::new()
    } else if a.transfer_set.is_empty() {
        run_data::select_transfer_set(&runs, &a.target, a.k_transfer)
    } else {
        a.transfer_set.clone()
    };
    let spec = LawSpec::new(a.law, a.target.clone(), transfer_set)?;
    let result = fitter::fit(&runs, &spec, &catalog, &fit_config)?;
    let law = LawDocument::new(spec.clone(), result.params.clone());
    out.json("law.json", &law)?;
    let body = json!({
        "law": law,
        "objective": result.objective,
        "n_starts_tried": result.n_starts_tried,
        "best_start_index": result.best_start_index,
        "converged": result.converged,
        "train_r2": result.train_r2,
        "n_observations": result.n_observations,
    });
    out.json("fit.json", &report(FIT_SCHEMA_VERSION, "fit", config, body))?;
    out.with("residuals.csv", |w| fitter::write_residuals_csv(&result.params, &spec, &runs, &catalog, w))?;
    if a.common.emit_plot_data {
        out.with("plot_scaling.csv", |w| fitter::write_residuals_csv(&result.params, &spec, &runs, &catalog, w))?;
    }
    Ok(())
}

fn run_eval(a: &EvalArgs, config: &Value, out: &mut Outputs) -> Result<()> {
    let fit_config = a.tuning.config(a.common.seed)?;
    let runs = read_runs(&a.runs, &a.tuning.validation())?;
    let catalog = read_catalog(a.catalog.as_ref())?;
    let targets = if a.targets.is_empty() { runs.eval_languages() } else { a.targets.clone() };
    let splits: Vec<SplitSpec> = a
        .axes
        .iter()
        .map(|&axis| {
            let mut s = SplitSpec::for_axis(axis, a.common.seed);
            if let (Some(f), true) = (a.fraction, s.fraction.is_some()) {
                s.fraction = Some(f);
            }
            if axis == Axis::N {
                s.held_scales = a.held_scales.clone();
            }
            if axis == Axis::M {
                s.held_mixtures = a.held_mixtures.clone();
            }
            s
        })
        .collect();
    let mut reports = Vec::new();
    for &variant in &a.law {
        let k = if variant.uses_transfer() { a.k_transfer } else { 0 };
        reports.push(holdout_eval::evaluate_languages(&runs, variant, &targets, k, &catalog, &fit_config, &splits, a.pooled)?);
    }
    let table = holdout_eval::format_table(&reports);
    out.json("eval.json", &report(EVAL_SCHEMA_VERSION, "eval", config, json!({ "reports": reports })))?;
    out.with("eval_table.txt", |w| Ok(w.write_all(table.as_bytes())?))?;
    if a.common.emit_plot_data {
        out.with("plot_eval.csv", |w| {
            let mut c = csv::Writer::from_writer(w);
            c.write_record(["variant", "language", "axis", "r2"])?;
            for r in &reports {
                for l in &r.languages {
                    for (axis, res) in &l.axes {
                        c.write_record([r.variant.as_str(), &l.language, axis.as_str(), &format!("{:?}", res.r2)])?;
                    }
                }
            }
            c.flush()?;
            Ok(())
        })?;
    }
    Ok(())
}

fn run_transfer(a: &TransferArgs, config: &Value, out: &mut Outputs) -> Result<()> {
    let bank = read_bank(&a.curves)?;
    let languages = if a.languages.is_empty() {
        bank.finetune_languages(a.n_params)
    } else {
        a.languages.clone()
    };
    let (all_measured, mut skipped) = transfer::measured_bts(&bank, a.d_mono)?;
    let in_grid = |l: &String| languages.contains(l);
    let measured: BTreeMap<_, _> = all_measured
        .into_iter()
        .filter(|((s, t), _)| in_grid(s) && in_grid(t))
        .collect();
    skipped.retain(|p| in_grid(&p.source) && in_grid(&p.target));
    let baselines = transfer::baselines_from_bank(&bank, a.n_params);
    let forest = ForestConfig {
        n_trees: a.trees,
        seed: a.common.seed,
        ..Default::default()
    };
    let build = transfer::transfer_matrix(&languages, &measured, &bank, &baselines, a.d_max, a.n_params, &forest, a.cv_folds)?;
    let measured_list: Vec<Value> = measured
        .iter()
        .map(|((s, t), v)| json!({ "source": s, "target": t, "bts": v }))
        .collect();
    let body = json!({
        "languages": languages,
        "measured": measured_list,
        "skipped": skipped,
        "gains": build.features.as_ref().map(|f| &f.gains),
        "cross_validation": build.cv.as_ref().map(|c| json!({ "r2": c.r2, "spearman": c.spearman, "k": c.k, "n": c.n })),
        "matrix": build.matrix,
    });
    out.json("transfer.json", &report(TRANSFER_SCHEMA_VERSION, "transfer", config, body))?;
    out.with("transfer_matrix.csv", |w| build.matrix.write_csv(w))?;
    out.json("transfer_provenance.json", &build.matrix.provenance_json())?;
    if a.common.emit_plot_data {
        out.with("plot_transfer_heatmap.csv", |w| build.matrix.write_plot_csv(w))?;
    }
    Ok(())
}

fn run_plan(a: &PlanArgs, config: &Value, out: &mut Outputs) -> Result<()> {
    let mut body = serde_json::Map::new();
    let (exps, params) = if let Some(path) = &a.runs {
        let runs = read_runs(path, &a.tuning.validation())?;
        let obs = capacity::capacity_observations(&runs, a.language.as_deref());
        if obs.is_empty() {
            return Err(Error::invalid("no uniform-mixture runs to fit the capacity law"));
        }
        let fit = capacity::fit_capacity(obs, &a.tuning.config(a.common.seed)?)?;
        body.insert("capacity_fit".into(), serde_json::to_value(&fit)?);
        (Some(fit.params.exponents()), Some(fit.params))
    } else if let (Some(alpha), Some(beta), Some(phi), Some(psi)) = (a.alpha, a.beta, a.phi, a.psi) {
        (Some(Exponents { alpha, beta, phi, psi }), None)
    } else {
        (None, None)
    };
    let multipliers = match &exps {
        Some(e) => {
            let baseline = match a.baseline {
                BaselineKind::ComputeOptimal => Baseline::ComputeOptimal,
                BaselineKind::Explicit => Baseline::Explicit {
                    k: a.k.unwrap_or_default(),
                    n: a.n.unwrap_or_default(),
                    d_t: a.d_t.unwrap_or_default(),
                },
            };
            let query = PlanQuery {
                r: a.r,
                baseline,
                sweep: (!a.sweep.is_empty()).then(|| a.sweep.clone()),
            };
            let plan = capacity::plan(e, params.as_ref(), &query)?;
            out.with("frontier.csv", |w| capacity::write_frontier_csv(&plan.frontier, w))?;
            let m = plan.optimum;
            body.insert("plan".into(), serde_json::to_value(&plan)?);
            m
        }
        None => capacity::multipliers_from_ratios(a.phi_alpha.unwrap_or_default(), a.psi_beta.unwrap_or_default(), a.r)?,
    };
    body.insert("multipliers".into(), serde_json::to_value(multipliers)?);
    body.insert("per_language_data_saving".into(), Value::from(1.0 - multipliers.d_t_ratio));
    out.json("plan.json", &report(capacity::PLAN_SCHEMA_VERSION, "plan", config, Value::Object(body)))?;
    Ok(())
}

fn run_crossover(a: &CrossoverArgs, config: &Value, out: &mut Outputs) -> Result<()> {
    let bank = read_bank(&a.curves)?;
    let rows = crossover::crossover_report(&bank)?;
    let points = crossover::law_points(&rows);
    let (fit, fit_error) = match crossover::fit_crossover_law(&points) {
        Ok(f) => (Some(f), None),
        Err(e) => (None, Some(e.to_string())),
    };
    let decision = match (a.budget_c, a.n) {
        (Some(c), Some(n)) => {
            let f = fit.as_ref().ok_or_else(|| Error::invalid(format!("cannot decide without a crossover fit: {}", fit_error.clone().unwrap_or_default())))?;
            Some(crossover::decide(f, n, c)?)
        }
        _ => None,
    };
    let body = json!({ "rows": rows, "law_fit": fit, "law_fit_error": fit_error, "decision": decision });
    out.json("crossover.json", &report(CROSSOVER_SCHEMA_VERSION, "crossover", config, body))?;
    out.with("crossover.csv", |w| crossover::write_report_csv(&rows, w))?;
    if a.common.emit_plot_data {
        let curves: Vec<_> = bank
            .iter()
            .filter(|(r, c)| {
                matches!(r, transfer::Regime::Scratch { lang, .. } if *lang == c.eval_language)
                    || matches!(r, transfer::Regime::Finetune { source, n: Some(_) } if *source == c.eval_language)
            })
            .map(|(_, c)| c)
            .collect();
        out.with("plot_crossover_curves.csv", |w| run_data::write_curves(curves, w))?;
    }
    Ok(())
}

fn read_design(path: &Path) -> Result<SynthDesign> {
    let text = fs::read_to_string(path).map_err(|e| io_at(path, e))?;
    if path.extension().is_some_and(|e| e.eq_ignore_ascii_case("json")) {
        Ok(serde_json::from_str(&text)?)
    } else {
        toml::from_str(&text).map_err(|e| Error::invalid(format!("{}: {e}", path.display())))
    }
}

fn run_synth(a: &SynthArgs, config: &Value, out: &mut Outputs) -> Result<()> {
    let seed = a.common.seed;
    let (fmt, runs_name) = match a.format {
        OutFormat::Csv => (Format::Csv, "runs.csv"),
        OutFormat::Jsonl => (Format::Jsonl, "runs.jsonl"),
    };
    if let Preset::Curves = a.preset {
        let (curves, truth) = synth::desk_curve_bank(a.noise.unwrap_or(DEFAULT_NOISE), seed)?;
        out.with("curves.csv", |w| run_data::write_curves(&curves, w))?;
        out.json("truth.json", &report(SYNTH_SCHEMA_VERSION, "synth", config, json!({ "curve_bank": truth })))?;
        return Ok(());
    }
    let (mut design, catalog) = match (&a.design, a.preset) {
        (Some(p), _) => (read_design(p)?, match &a.catalog {
            Some(c) => run_data::parse_catalog(open(c)?)?,
            None => synth::desk_catalog(),
        }),
        (None, Preset::Atlas) => (synth::desk_atlas_design(DEFAULT_NOISE, seed), synth::desk_catalog()),
        (None, _) => (synth::desk_capacity_design(DEFAULT_NOISE, seed), synth::desk_catalog()),
    };
    design.seed = seed;
    if let Some(noise) = a.noise {
        design.noise_sigma = noise;
    }
    let runs = synth::generate_runs(&design, &catalog)?;
    out.with(runs_name, |w| run_data::write_runs(&runs, w, fmt))?;
    if matches!(design.truth, synth::GroundTruth::Atlas { .. }) {
        out.with("catalog.csv", |w| run_data::write_catalog(&catalog, w))?;
    }
    out.json("truth.json", &report(SYNTH_SCHEMA_VERSION, "synth", config, json!({ "design": design })))?;
    Ok(())
}
