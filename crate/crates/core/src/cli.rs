// SPDX-License-Identifier: MIT OR Apache-2.0

//! Command-line front end. `factum --help` lists the subcommands.
//!
//! Exit status: 0 on success, 1 for data errors (unreadable or invalid
//! traces, unlabeled input), 2 for configuration errors (bad flags, missing
//! input paths).

use std::path::{Path, PathBuf};

use anyhow::Context;
use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use crate::classify::{compare_variants, make_folds, run_cv, write_cv_report, write_table1, CvConfig, CvReport, LogRegConfig};
use crate::features::{assemble, fit_features, write_features_csv, write_ranking_json, FeatureConfig, Variant};
use crate::manifest::{load_dataset, write_dataset, ManifestError};
use crate::oracle::{permute_labels_within_reports, synth_dataset, toy_forward_trace, PlantedSpec, ToyConfig, ToyTransformerWeights};
use crate::scores::{score_dataset, write_scores_csv, write_scores_json, ScoredCitation};
use crate::signatures::{run_signatures, write_signature_csv, SignatureConfig, SignatureSplit};
use crate::trace::{attach_labels, validate_report, LabelFile, ReportTrace};

#[derive(Debug, Parser)]
#[command(name = "factum", version, about = "Citation-hallucination detection from captured transformer internals")]
pub struct Cli {
    /// Worker threads for parallel stages (default: all cores).
    #[arg(long, global = true, env = "FACTUM_THREADS")]
    pub threads: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Check every trace in a dataset against the format invariants.
    Validate(InputArgs),
    /// Compute per-citation scores (and fitted features) for labeled citations.
    Score {
        #[command(flatten)]
        input: InputArgs,
        #[arg(long, default_value_t = 100.0)]
        k: f64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Report-grouped cross-validation of one or more detector variants.
    Run(RunArgs),
    /// Direction and significance of each score's class difference.
    Signatures {
        #[command(flatten)]
        input: InputArgs,
        #[arg(long, default_value_t = 100.0)]
        k: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Choose and test features on the same rows instead of disjoint report halves.
        #[arg(long)]
        in_sample: bool,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write a labeled synthetic dataset with planted class differences.
    GenSynthetic {
        /// JSON recipe; defaults to 40 reports, 200 + 200 citations, BAS and PFS shifted by -1.5 sd.
        #[arg(long)]
        spec: Option<PathBuf>,
        /// Overrides the recipe's seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Shuffle labels within each report with this seed (null data).
        #[arg(long)]
        permute_labels: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the toy decoder and write its traces (unlabeled).
    ToyTrace {
        #[arg(long, default_value_t = 1)]
        count: usize,
        #[arg(long, default_value_t = 24)]
        prompt_length: usize,
        /// Citation positions, at or after the prompt length.
        #[arg(long, value_delimiter = ',', default_values_t = [26usize, 30])]
        positions: Vec<usize>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 0)]
        weights_seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Debug, Clone, Args)]
pub struct InputArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    /// Label file; entries override labels stored in the traces.
    #[arg(long)]
    pub labels: Option<PathBuf>,
}

#[derive(Debug, Clone, Args)]
pub struct RunArgs {
    #[command(flatten)]
    pub input: InputArgs,
    /// Variant name, repeatable, or `all`. The first one is the reference for significance tests.
    #[arg(long, default_values_t = [String::from("factum")])]
    pub variant: Vec<String>,
    #[arg(long, default_value_t = 100.0)]
    pub k: f64,
    #[arg(long, default_value_t = 1e-2)]
    pub lambda: f64,
    #[arg(long, default_value_t = 10)]
    pub folds: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug)]
pub enum CliError {
    Config(String),
    Data(anyhow::Error),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Data(_) => 1,
            CliError::Config(_) => 2,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Config(m) => write!(f, "configuration error: {m}"),
            CliError::Data(e) => write!(f, "{e:#}"),
        }
    }
}

impl std::error::Error for CliError {}

impl From<anyhow::Error> for CliError {
    fn from(e: anyhow::Error) -> Self {
        CliError::Data(e)
    }
}

fn config(msg: impl Into<String>) -> CliError {
    CliError::Config(msg.into())
}

pub fn parse_variants(names: &[String]) -> Result<Vec<Variant>, CliError> {
    let mut out = Vec::new();
    for n in names {
        let add: Vec<Variant> = if n == "all" {
            Variant::ALL.to_vec()
        } else {
            let v = Variant::parse(n).ok_or_else(|| {
                let known: Vec<&str> = Variant::ALL.iter().map(|v| v.name()).collect();
                config(format!("unknown variant {n:?} (expected one of {} or all)", known.join(", ")))
            })?;
            vec![v]
        };
        for v in add {
            if !out.contains(&v) {
                out.push(v);
            }
        }
    }
    Ok(out)
}

fn check_k(k: f64) -> Result<(), CliError> {
    if k > 0.0 && k <= 100.0 {
        Ok(())
    } else {
        Err(config(format!("--k must be in (0, 100], got {k}")))
    }
}

fn require_file(path: &Path, what: &str) -> Result<(), CliError> {
    if path.is_file() {
        Ok(())
    } else {
        Err(config(format!("{what} {} does not exist", path.display())))
    }
}

fn create_out(dir: &Path) -> Result<(), CliError> {
    std::fs::create_dir_all(dir).map_err(|e| config(format!("cannot create output directory {}: {e}", dir.display())))
}

fn load(input: &InputArgs) -> Result<Vec<ReportTrace<f32>>, CliError> {
    require_file(&input.manifest, "manifest")?;
    let mut traces = load_dataset(&input.manifest).map_err(|e| CliError::Data(e.into()))?;
    if let Some(path) = &input.labels {
        require_file(path, "label file")?;
        let labels = LabelFile::load(path).map_err(|e| CliError::Data(e.into()))?;
        attach_labels(&mut traces, &labels).map_err(|e| CliError::Data(e.into()))?;
    }
    Ok(traces)
}

fn load_scored(input: &InputArgs) -> Result<Vec<ScoredCitation<f64>>, CliError> {
    let traces: Vec<ReportTrace<f64>> = load(input)?.iter().map(|t| t.cast()).collect();
    Ok(score_dataset(&traces).context("scoring failed")?)
}

/// Config-echo lines written at the top of every output file.
fn header(command: &str, input: Option<&InputArgs>, cfg: &impl Serialize) -> Vec<String> {
    let mut h = vec![format!("factum {} {command}", env!("CARGO_PKG_VERSION"))];
    if let Some(i) = input {
        h.push(format!("manifest: {}", i.manifest.display()));
        if let Some(l) = &i.labels {
            h.push(format!("labels: {}", l.display()));
        }
    }
    h.push(format!("config: {}", serde_json::to_string(cfg).unwrap_or_default()));
    h
}

fn io_ctx<T>(r: std::io::Result<T>, path: &Path) -> Result<T, CliError> {
    r.map_err(|e| CliError::Data(anyhow::anyhow!("cannot write {}: {e}", path.display())))
}

fn cmd_validate(input: &InputArgs) -> Result<(), CliError> {
    let traces = load(input)?;
    let mut bad = 0;
    for t in &traces {
        let report = validate_report(t);
        if !report.is_valid() {
            bad += 1;
            println!("{}: {report}", t.report_id);
        }
    }
    let citations: usize = traces.iter().map(|t| t.citations.len()).sum();
    if bad > 0 {
        return Err(CliError::Data(anyhow::anyhow!("{bad} of {} reports violate trace invariants", traces.len())));
    }
    println!("ok: {} reports, {citations} citations", traces.len());
    Ok(())
}

fn cmd_score(input: &InputArgs, k: f64, out: &Path) -> Result<(), CliError> {
    check_k(k)?;
    let rows = load_scored(input)?;
    create_out(out)?;
    let fc = FeatureConfig { k, ..FeatureConfig::default() };
    let h = header("score", Some(input), &fc);
    let p = out.join("scores.csv");
    io_ctx(write_scores_csv(&p, &rows, &h), &p)?;
    let p = out.join("scores.json");
    io_ctx(write_scores_json(&p, &rows, &h), &p)?;
    let refs: Vec<&ScoredCitation<f64>> = rows.iter().collect();
    match fit_features(&refs, Variant::Factum, &fc) {
        Ok(plan) => {
            let m = assemble(&refs, &plan).context("feature assembly failed")?;
            let mut fh = h.clone();
            fh.push("features chosen on all listed rows (descriptive only; `run` refits inside each fold)".into());
            let p = out.join("features.csv");
            io_ctx(write_features_csv(&p, &m, &fh), &p)?;
            let p = out.join("ranking.json");
            io_ctx(write_ranking_json(&p, &plan, &fh), &p)?;
        }
        Err(e) => eprintln!("features skipped: {e}"),
    }
    println!("scored {} citations into {}", rows.len(), out.display());
    Ok(())
}

#[derive(Serialize)]
struct RunEcho<'a> {
    variants: Vec<&'a str>,
    k: f64,
    lambda: f64,
    folds: usize,
    seed: u64,
}

/// Runs cross-validation for every requested variant; returns the reports.
pub fn cmd_run(args: &RunArgs) -> Result<Vec<CvReport>, CliError> {
    let variants = parse_variants(&args.variant)?;
    check_k(args.k)?;
    if !(args.lambda >= 0.0 && args.lambda.is_finite()) {
        return Err(config(format!("--lambda must be a finite value >= 0, got {}", args.lambda)));
    }
    if args.folds < 2 {
        return Err(config(format!("--folds must be at least 2, got {}", args.folds)));
    }
    let rows = load_scored(&args.input)?;
    let groups: Vec<String> = rows.iter().map(|r| r.key.report_id.clone()).collect();
    let labels: Vec<bool> = rows.iter().map(|r| r.hallucinated).collect();
    let plan = make_folds(&groups, &labels, args.folds, args.seed).context("cannot build folds")?;
    let features = FeatureConfig { k: args.k, ..FeatureConfig::default() };
    let logreg = LogRegConfig { lambda: args.lambda, ..LogRegConfig::default() };
    let mut reports = Vec::with_capacity(variants.len());
    for &variant in &variants {
        let cfg = CvConfig { variant, features, logreg, n_folds: args.folds, seed: args.seed, ..CvConfig::default() };
        let r = run_cv(&rows, &plan, &cfg).with_context(|| format!("variant {}", variant.name()))?;
        reports.push(r);
    }
    let comparisons = compare_variants(&reports);

    create_out(&args.out)?;
    let echo = RunEcho {
        variants: variants.iter().map(|v| v.name()).collect(),
        k: args.k,
        lambda: args.lambda,
        folds: args.folds,
        seed: args.seed,
    };
    let h = header("run", Some(&args.input), &echo);
    let p = args.out.join("table1.csv");
    io_ctx(write_table1(&p, &reports, &comparisons, &h), &p)?;
    let p = args.out.join("cv_report.json");
    io_ctx(write_cv_report(&p, &reports, &comparisons), &p)?;
    for r in reports.iter().filter(|r| r.config.variant.confidence().is_none()) {
        let models: Vec<_> = r.folds.iter().map(|f| (f.fold, &f.features, &f.model)).collect();
        let text = serde_json::json!({ "header": h, "variant": r.config.variant.name(), "folds": models });
        let p = args.out.join(format!("model_{}.json", r.config.variant.name()));
        io_ctx(std::fs::write(&p, serde_json::to_string_pretty(&text).unwrap_or_default() + "\n"), &p)?;
    }
    for r in &reports {
        println!("{:<12} auc {}", r.config.variant.display_name(), r.mean.auc.map_or("NA".into(), |a| format!("{a:.4}")));
    }
    Ok(reports)
}

fn cmd_signatures(input: &InputArgs, k: f64, seed: u64, in_sample: bool, out: &Path) -> Result<(), CliError> {
    check_k(k)?;
    let rows = load_scored(input)?;
    let cfg = SignatureConfig {
        features: FeatureConfig { k, ..FeatureConfig::default() },
        split: if in_sample { SignatureSplit::InSample } else { SignatureSplit::HeldOut },
        seed,
    };
    let run = run_signatures(&rows, &cfg).map_err(|e| CliError::Data(e.into()))?;
    create_out(out)?;
    let mut h = header("signatures", Some(input), &cfg);
    h.push(format!("selection rows: {}, test rows: {}", run.n_selection, run.n_test));
    h.push("single detector column: features come from the logistic-regression pipeline".into());
    let p = out.join("table2.csv");
    io_ctx(write_signature_csv(&p, &run, &h), &p)?;
    for r in &run.table.rows {
        println!("{:<4} {} {:<8} {}", r.score.name(), r.direction.arrow(), r.tier.label(), r.feature);
    }
    Ok(())
}

fn cmd_gen_synthetic(spec: Option<&Path>, seed: Option<u64>, permute: Option<u64>, out: &Path) -> Result<(), CliError> {
    let mut s = match spec {
        Some(p) => {
            require_file(p, "spec")?;
            let text = std::fs::read_to_string(p).map_err(|e| config(format!("cannot read {}: {e}", p.display())))?;
            serde_json::from_str(&text).map_err(|e| config(format!("malformed spec {}: {e}", p.display())))?
        }
        None => PlantedSpec::standard(0),
    };
    if let Some(seed) = seed {
        s.seed = seed;
    }
    s.validate().map_err(|e| config(e.to_string()))?;
    let mut ds = synth_dataset(&s).map_err(|e| config(e.to_string()))?;
    if let Some(p) = permute {
        permute_labels_within_reports(&mut ds.traces, p);
        ds.labels = LabelFile::from_traces(&ds.traces);
    }
    create_out(out)?;
    let m = write_dataset(out, &ds.traces).map_err(|e| CliError::Data(e.into()))?;
    let p = out.join("labels.json");
    io_ctx(ds.labels.save(&p), &p)?;
    let p = out.join("spec.json");
    let echo = serde_json::json!({ "spec": s, "permute_labels": permute });
    io_ctx(std::fs::write(&p, serde_json::to_string_pretty(&echo).unwrap_or_default() + "\n"), &p)?;
    println!("wrote {} reports, {} labels to {}", m.reports.len(), ds.labels.entries.len(), out.display());
    Ok(())
}

fn cmd_toy_trace(count: usize, prompt_length: usize, positions: &[usize], seed: u64, weights_seed: u64, out: &Path) -> Result<(), CliError> {
    if count == 0 {
        return Err(config("--count must be positive"));
    }
    let weights = ToyTransformerWeights::<f32>::try_random(&ToyConfig::default(), weights_seed).map_err(|e| config(e.to_string()))?;
    let traces = (0..count as u64)
        .map(|i| toy_forward_trace(&weights, prompt_length, positions, seed + i).map(|r| r.trace))
        .collect::<Result<Vec<_>, _>>()
        .map_err(|e| config(e.to_string()))?;
    create_out(out)?;
    write_dataset(out, &traces).map_err(|e: ManifestError| CliError::Data(e.into()))?;
    println!("wrote {count} toy traces to {}", out.display());
    Ok(())
}

fn dispatch(command: &Command) -> Result<(), CliError> {
    match command {
        Command::Validate(input) => cmd_validate(input),
        Command::Score { input, k, out } => cmd_score(input, *k, out),
        Command::Run(args) => cmd_run(args).map(|_| ()),
        Command::Signatures { input, k, seed, in_sample, out } => cmd_signatures(input, *k, *seed, *in_sample, out),
        Command::GenSynthetic { spec, seed, permute_labels, out } => {
            cmd_gen_synthetic(spec.as_deref(), *seed, *permute_labels, out)
        }
        Command::ToyTrace { count, prompt_length, positions, seed, weights_seed, out } => {
            cmd_toy_trace(*count, *prompt_length, positions, *seed, *weights_seed, out)
        }
    }
}

/// Executes a parsed command line, honoring the thread cap.
pub fn execute(cli: &Cli) -> Result<(), CliError> {
    match cli.threads {
        Some(0) => Err(config("thread count must be positive")),
        Some(n) => {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(n)
                .build()
                .map_err(|e| config(format!("cannot start {n} threads: {e}")))?;
            pool.install(|| dispatch(&cli.command))
        }
        None => dispatch(&cli.command),
    }
}

/// Entry point for the binary: parses `args`, runs, and returns the exit code.
pub fn main_with_args<I, S>(args: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match execute(&cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
