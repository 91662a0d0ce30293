//! Command-line front end: `generate`, `run`, `ablation`, `gradcheck`,
//! `export-embeddings` and `predict`.
//!
//! Exit codes: 0 success, 2 bad config or usage, 3 I/O, 4 training failure,
//! 5 gradient check failure.

mod config;

pub use config::{RunConfig, CONFIG_FORMAT_VERSION};

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use log::info;
use thiserror::Error;

use crate::autodiff::OpKind;
use crate::data::{generate_synthetic, load_dataset, load_segment, save_dataset, DataError, Dataset, GeneratorConfig};
use crate::eval::{
    evaluate, evaluate_variants, export_embeddings, AblationReport, EvalError, EvalReport, NoiseSweepColumn,
    AGE_GROUP_NAMES,
};
use crate::gradsuite::run_suite;
use crate::pipeline::{
    finetune, load_bundle, pretrain_vm, save_bundle, FinetuneConfig, ModelBundle, ModelVariant, PipelineError,
    PredictInput, PretrainConfig,
};
use crate::seed::derive_seed;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),
    #[error("i/o error: {0}")]
    Io(String),
    #[error("{0}")]
    Training(String),
    #[error("gradient check failed: {0}")]
    GradCheck(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Io(_) => 3,
            CliError::Training(_) => 4,
            CliError::GradCheck(_) => 5,
        }
    }
}

impl From<DataError> for CliError {
    fn from(e: DataError) -> Self {
        match e {
            DataError::InvalidConfig(_) => CliError::Config(e.to_string()),
            _ => CliError::Io(e.to_string()),
        }
    }
}

impl From<PipelineError> for CliError {
    fn from(e: PipelineError) -> Self {
        match e {
            PipelineError::Io { .. } | PipelineError::InvalidBundle(_) => CliError::Io(e.to_string()),
            PipelineError::InvalidConfig(_) => CliError::Config(e.to_string()),
            PipelineError::Data(d) => d.into(),
            _ => CliError::Training(e.to_string()),
        }
    }
}

impl From<EvalError> for CliError {
    fn from(e: EvalError) -> Self {
        match e {
            EvalError::Io { .. } => CliError::Io(e.to_string()),
            EvalError::Pipeline(p) => p.into(),
            EvalError::InvalidConfig(_)
            | EvalError::TooFewSessions { .. }
            | EvalError::TooFewSubjects(_) => CliError::Config(e.to_string()),
            _ => CliError::Training(e.to_string()),
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "hlvar", version, about = "Hearing-loss detection from facial-expression variation")]
pub struct Cli {
    /// Log progress to stderr (repeat for more detail).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    pub verbose: u8,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a synthetic dataset to a directory.
    Generate(GenerateArgs),
    /// Cross-validate one variant and write report.json plus one file per seed.
    Run(RunArgs),
    /// Evaluate the whole variant ladder on shared splits.
    Ablation(RunArgs),
    /// Finite-difference check of every operator and the full training loss.
    Gradcheck(GradcheckArgs),
    /// Dump variation embeddings of a trained anchor-variant bundle as CSV.
    ExportEmbeddings(ExportArgs),
    /// Score one segment with a trained bundle.
    Predict(PredictArgs),
}

#[derive(Debug, Args)]
pub struct GenerateArgs {
    /// Run config whose [generator] table is used; defaults apply otherwise.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub subjects: Option<usize>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct RunArgs {
    #[arg(long)]
    pub config: PathBuf,
    /// Comma-separated seed list, replacing `seeds`.
    #[arg(long, value_delimiter = ',')]
    pub seeds: Option<Vec<u64>>,
    #[arg(long, value_parser = parse_variant)]
    pub variant: Option<ModelVariant>,
    /// Output directory, replacing `output_dir`.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Worker threads; results do not depend on it.
    #[arg(long, default_value_t = 1)]
    pub jobs: usize,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    #[arg(long, default_value_t = 20)]
    pub instances: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, hide = true)]
    pub inject_fault: Option<String>,
}

#[derive(Debug, Args)]
pub struct ExportArgs {
    #[arg(long)]
    pub bundle: PathBuf,
    /// Dataset directory.
    #[arg(long)]
    pub dataset: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct PredictArgs {
    #[arg(long)]
    pub bundle: PathBuf,
    /// Segment JSON file.
    #[arg(long)]
    pub current: PathBuf,
    /// Quiet anchor segment, for anchor variants.
    #[arg(long)]
    pub anchor: Option<PathBuf>,
    /// Age in years, for the age-input variant.
    #[arg(long)]
    pub age: Option<f64>,
}

fn parse_variant(s: &str) -> Result<ModelVariant, String> {
    ModelVariant::parse(s).ok_or_else(|| {
        let names: Vec<_> = ModelVariant::LADDER.iter().map(|v| v.name()).collect();
        format!("unknown variant {s:?}; expected one of {}", names.join(", "))
    })
}

/// Parses arguments, runs the command and returns the process exit code.
pub fn main() -> i32 {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    let level = match cli.verbose {
        0 => log::LevelFilter::Warn,
        1 => log::LevelFilter::Info,
        _ => log::LevelFilter::Debug,
    };
    let _ = env_logger::Builder::new().filter_level(level).format_timestamp(None).try_init();
    match run_command(cli.command) {
        Ok(text) => {
            print!("{text}");
            0
        }
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

/// Executes one command; the returned text is what goes to stdout.
pub fn run_command(command: Command) -> Result<String, CliError> {
    match command {
        Command::Generate(a) => cmd_generate(a),
        Command::Run(a) => cmd_run(a),
        Command::Ablation(a) => cmd_ablation(a),
        Command::Gradcheck(a) => cmd_gradcheck(a),
        Command::ExportEmbeddings(a) => cmd_export(a),
        Command::Predict(a) => cmd_predict(a),
    }
}

fn write_file(path: &Path, contents: &str) -> Result<(), CliError> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| CliError::Io(format!("{}: {e}", parent.display())))?;
    }
    fs::write(path, contents).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))
}

fn cmd_generate(a: GenerateArgs) -> Result<String, CliError> {
    let mut cfg = match &a.config {
        Some(p) => RunConfig::load(p)?
            .generator
            .ok_or_else(|| CliError::Config(format!("{} has no [generator] table", p.display())))?,
        None => GeneratorConfig::default(),
    };
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    if let Some(n) = a.subjects {
        cfg.subjects = n;
    }
    let ds = generate_synthetic(&cfg)?;
    save_dataset(&ds, &a.out)?;
    Ok(format!(
        "wrote {}: {} subjects, {} sessions, {} segments, feature_dim {}\n",
        a.out.display(),
        ds.subjects.len(),
        ds.sessions.len(),
        ds.segments.len(),
        ds.manifest.feature_dim
    ))
}

/// Loads the config and applies command-line overrides.
fn resolve(a: &RunArgs) -> Result<RunConfig, CliError> {
    let mut cfg = RunConfig::load(&a.config)?;
    if let Some(s) = &a.seeds {
        cfg.seeds = s.clone();
    }
    if let Some(v) = a.variant {
        cfg.variant = v;
    }
    if let Some(o) = &a.out {
        cfg.output_dir = o.clone();
    }
    if a.jobs == 0 {
        return Err(CliError::Config("--jobs must be at least 1".into()));
    }
    cfg.validate()?;
    Ok(cfg)
}

fn dataset_of(cfg: &RunConfig) -> Result<Dataset, CliError> {
    match (&cfg.dataset_path, &cfg.generator) {
        (Some(p), _) => Ok(load_dataset(p)?),
        (None, Some(g)) => Ok(generate_synthetic(g)?),
        (None, None) => Err(CliError::Config("no dataset source".into())),
    }
}

fn summary(report: &EvalReport) -> String {
    let mut s = String::new();
    let f = &report.overall_f1;
    let _ = writeln!(
        s,
        "{}: F1 {:.4} ± {:.4} over {} seeds (k={}, noise filter {})",
        report.variant,
        f.mean,
        f.std,
        report.seeds.len(),
        report.k,
        report.noise_filter
    );
    for (name, g) in AGE_GROUP_NAMES.iter().zip(&report.group_f1) {
        match &g.f1 {
            Some(m) => {
                let _ = writeln!(s, "  {name:<5} ages {}-{}: F1 {:.4} ± {:.4}", g.min_age, g.max_age, m.mean, m.std);
            }
            None => {
                let _ = writeln!(s, "  {name:<5} ages {}-{}: F1 undefined", g.min_age, g.max_age);
            }
        }
    }
    if let Some(b) = &report.bias {
        let _ = writeln!(
            s,
            "  age probe |r| {:.4} ± {:.4} (significant in {} of {} seeds)",
            b.abs_r.mean,
            b.abs_r.std,
            b.significant_seeds,
            report.seeds.len()
        );
    }
    let _ = writeln!(
        s,
        "  segments {} evaluated, {} skipped; protocol {}",
        report.counts.eligible_segments,
        report.counts.skipped_segments,
        if report.protocol_ok { "ok" } else { "VIOLATED" }
    );
    s
}

/// Trains one model on the whole dataset with the first seed's sub-streams.
fn train_final(ds: &Dataset, cfg: &RunConfig) -> Result<ModelBundle, CliError> {
    let seed = cfg.seeds[0];
    let protocol = cfg.protocol();
    let encoder = if cfg.variant.uses_pretraining() {
        let pcfg = PretrainConfig {
            seed: derive_seed(seed, "final-pretrain", 0),
            ..protocol.pretrain.clone()
        };
        Some(pretrain_vm(ds, &pcfg)?.encoder)
    } else {
        None
    };
    let fcfg = FinetuneConfig {
        seed: derive_seed(seed, "final-finetune", 0),
        ..protocol.finetune.clone()
    };
    Ok(finetune(ds, encoder, cfg.variant, &fcfg)?.bundle)
}

fn cmd_run(a: RunArgs) -> Result<String, CliError> {
    let cfg = resolve(&a)?;
    let ds = dataset_of(&cfg)?;
    let out = &cfg.output_dir;
    info!("evaluating {} on {} segments", cfg.variant, ds.segments.len());
    let evaluation = evaluate(&ds, cfg.variant, &cfg.protocol(), a.jobs)?;
    write_file(&out.join("report.json"), &evaluation.report.to_json())?;
    for s in &evaluation.seeds {
        write_file(&out.join(format!("seed_{}.json", s.summary.seed)), &s.to_json())?;
    }
    let mut text = summary(&evaluation.report);
    if cfg.save_bundle || cfg.export_embeddings {
        let bundle = train_final(&ds, &cfg)?;
        if cfg.save_bundle {
            let path = out.join("bundle.json");
            save_bundle(&bundle, &path)?;
            let _ = writeln!(text, "wrote {}", path.display());
        }
        if cfg.export_embeddings {
            if cfg.variant.uses_anchor() {
                let path = out.join("embeddings.csv");
                let rows = export_embeddings(&bundle, &ds, &path)?;
                let _ = writeln!(text, "wrote {} ({rows} rows)", path.display());
            } else {
                let _ = writeln!(text, "embedding export skipped: {} has no anchor", cfg.variant);
            }
        }
    }
    let _ = writeln!(text, "wrote {}", out.join("report.json").display());
    Ok(text)
}

fn cmd_ablation(a: RunArgs) -> Result<String, CliError> {
    let cfg = resolve(&a)?;
    let ds = dataset_of(&cfg)?;
    let out = &cfg.output_dir;
    let protocol = cfg.protocol();
    let evaluations = evaluate_variants(&ds, &ModelVariant::LADDER, &protocol, a.jobs)?;
    let reports: Vec<EvalReport> = evaluations.into_iter().map(|e| e.report).collect();
    let mut sweep = Vec::with_capacity(cfg.noise_sweep.len());
    for filter in &cfg.noise_sweep {
        let mut p = protocol.clone();
        p.pretrain.noise_filter = filter.clone();
        p.bias_probe = false;
        let r = evaluate(&ds, ModelVariant::AnchorVm, &p, a.jobs)?.report;
        sweep.push(NoiseSweepColumn {
            noise_filter: filter.clone(),
            variant: ModelVariant::AnchorVm,
            overall_f1: r.overall_f1,
        });
    }
    for r in &reports {
        write_file(&out.join(format!("report_{}.json", r.variant)), &r.to_json())?;
    }
    let ablation = AblationReport::from_reports(&reports, sweep)?;
    let table = ablation.table();
    write_file(&out.join("ablation.json"), &ablation.to_json())?;
    write_file(&out.join("ablation.txt"), &table)?;
    Ok(format!("{table}wrote {}\n", out.join("ablation.json").display()))
}

fn cmd_gradcheck(a: GradcheckArgs) -> Result<String, CliError> {
    if a.instances == 0 {
        return Err(CliError::Config("--instances must be at least 1".into()));
    }
    let fault = match &a.inject_fault {
        Some(name) => {
            Some(OpKind::from_name(name).ok_or_else(|| CliError::Config(format!("unknown operator {name:?}")))?)
        }
        None => None,
    };
    let report = run_suite(a.instances, a.seed, fault);
    let mut text = String::new();
    for c in &report.checks {
        let _ = writeln!(
            text,
            "{} {:<28} max_rel_error {:.3e} (rtol {:.0e}, {} instances){}",
            if c.passed { "PASS" } else { "FAIL" },
            c.name,
            c.max_rel_error,
            c.rtol,
            c.instances,
            c.error.as_deref().map(|e| format!(": {e}")).unwrap_or_default()
        );
    }
    if report.passed {
        Ok(text)
    } else {
        print!("{text}");
        let names: Vec<&str> = report.failures().map(|c| c.name.as_str()).collect();
        Err(CliError::GradCheck(names.join(", ")))
    }
}

fn cmd_export(a: ExportArgs) -> Result<String, CliError> {
    let bundle = load_bundle(&a.bundle)?;
    let ds = load_dataset(&a.dataset)?;
    if !bundle.variant.uses_anchor() {
        return Err(CliError::Config(format!("{} bundles have no variation embedding", bundle.variant)));
    }
    let rows = export_embeddings(&bundle, &ds, &a.out)?;
    Ok(format!("wrote {} ({rows} rows)\n", a.out.display()))
}

fn cmd_predict(a: PredictArgs) -> Result<String, CliError> {
    let bundle = load_bundle(&a.bundle)?;
    let current = load_segment(&a.current)?;
    let anchor = a.anchor.as_deref().map(load_segment).transpose()?;
    let input = match (bundle.variant, &anchor, a.age) {
        (ModelVariant::Single, None, None) => PredictInput::Single { current: &current.frames },
        (ModelVariant::SingleWithAge, None, Some(age)) => PredictInput::WithAge {
            current: &current.frames,
            age,
        },
        (v, Some(anchor), None) if v.uses_anchor() => PredictInput::Anchored {
            current: &current.frames,
            anchor: &anchor.frames,
        },
        (v, _, _) => {
            let need = if v.uses_anchor() {
                "--anchor"
            } else if v.uses_age_input() {
                "--age"
            } else {
                "neither --anchor nor --age"
            };
            return Err(CliError::Config(format!("{v} bundles take {need}")));
        }
    };
    let p = bundle.predict(input)?;
    Ok(format!(
        "segment {} probability {p:.6} prediction {}\n",
        current.segment_id,
        u8::from(p >= 0.5)
    ))
}
