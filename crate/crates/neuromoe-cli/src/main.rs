//! Command-line front end: cohort generation, training, evaluation, the
//! ablation matrix, and expert-utilization reports.
//!
//! Every run is deterministic for a given dataset, seed, and configuration,
//! and every subcommand that produces results writes both a machine-readable
//! file and a human-readable summary.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use neuromoe::config::{parse_kv_lines, ExpertKind, GatingMode, ModelConfig, TrainConfig};
use neuromoe::data::{
    apply_preprocess, fit_preprocess, generate_cohort, load_dataset, save_dataset, split_cohort,
    split_hash, CohortSpec, PreparedRecord, PreprocessStats, SubjectRecord,
};
use neuromoe::evaluation::{
    evaluate, render_metrics, run_ablation, utilization_report, write_ablation_csv,
    write_history_csv, write_utilization_csv, write_utilization_svg, AblationCell, AblationResult,
    AblationRun, Metrics,
};
use neuromoe::training::{load_checkpoint, save_checkpoint, train};
use neuromoe::{Error, Result};

#[derive(Parser)]
#[command(
    name = "neuromoe",
    version,
    about = "Multi-modal mixture-of-experts classifier (PD / iRBD / HC)"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a synthetic cohort and write it as a dataset container.
    GenData(GenDataArgs),
    /// Train a model; write checkpoint, history, metrics, and reports.
    Train(TrainArgs),
    /// Evaluate a saved checkpoint on a dataset's held-out split.
    Eval(EvalArgs),
    /// Train the ablation matrix (full, no-gate, each expert removed).
    Ablate(AblateArgs),
    /// Expert-utilization report (CSV + bar-chart SVG) for a checkpoint.
    Report(ReportArgs),
}

// ── Shared flags ──

/// Configuration overrides shared by every model-building subcommand.
#[derive(Args)]
struct ConfigArgs {
    /// `key = value` file overriding model/training defaults.
    #[arg(long, value_name = "FILE")]
    config: Option<PathBuf>,
    /// Gate mode: learned weights or a static uniform average.
    #[arg(long, value_parser = ["gated", "uniform"])]
    mode: Option<String>,
    /// Remove an expert (repeatable): fmri | amri | dti | clinical.
    #[arg(long, value_name = "EXPERT")]
    drop: Vec<String>,
    /// Balance-regularizer weight.
    #[arg(long)]
    lambda: Option<f64>,
}

/// Model + training configuration after all overrides, plus which keys the
/// override file pinned explicitly (those are never auto-adjusted).
struct Resolved {
    model: ModelConfig,
    train: TrainConfig,
    pinned: Vec<String>,
}

impl ConfigArgs {
    fn resolve(&self) -> Result<Resolved> {
        let mut model = ModelConfig::default();
        let mut train = TrainConfig::default();
        let mut pinned = Vec::new();
        if let Some(path) = &self.config {
            let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
            for (key, value) in parse_kv_lines(&text)? {
                let used = model.set(&key, &value)? || train.set(&key, &value)?;
                if !used {
                    return Err(Error::Config(format!(
                        "unknown configuration key '{key}' in {}",
                        path.display()
                    )));
                }
                pinned.push(key);
            }
        }
        if let Some(mode) = &self.mode {
            model.gating = match mode.as_str() {
                "uniform" => GatingMode::Uniform,
                _ => GatingMode::Gated,
            };
        }
        for token in &self.drop {
            let kind = expert_from_token(token)?;
            model.experts.retain(|&k| k != kind);
            if model.experts.is_empty() {
                return Err(Error::Config(
                    "every expert was dropped; at least one must remain".into(),
                ));
            }
        }
        if let Some(lambda) = self.lambda {
            train.lambda_balance = lambda;
        }
        Ok(Resolved {
            model,
            train,
            pinned,
        })
    }
}

fn expert_from_token(token: &str) -> Result<ExpertKind> {
    ExpertKind::ALL
        .into_iter()
        .find(|k| k.token() == token)
        .ok_or_else(|| {
            Error::Usage(format!(
                "unknown expert '{token}' (expected fmri, amri, dti, or clinical)"
            ))
        })
}

/// Short run descriptor used in metrics rows: "full" for the reference
/// model, otherwise the ablation-style names joined with '+'.
fn config_name(model: &ModelConfig) -> String {
    let mut parts = Vec::new();
    if model.gating == GatingMode::Uniform {
        parts.push("no_gate".to_string());
    }
    for kind in ExpertKind::ALL {
        if !model.has_expert(kind) {
            parts.push(format!("no_{}", kind.token()));
        }
    }
    if parts.is_empty() {
        "full".to_string()
    } else {
        parts.join("+")
    }
}

// ── Dataset plumbing ──

fn load_records(path: &Path) -> Result<Vec<SubjectRecord>> {
    let records = load_dataset(path)?;
    if records.is_empty() {
        return Err(Error::Data(format!(
            "dataset {} contains no subjects",
            path.display()
        )));
    }
    Ok(records)
}

/// Align config fields that are properties of the data, unless the override
/// file pinned them: the volume shape comes from the first subject and the
/// feature length from the fitted preprocessing.
fn align_to_data(
    resolved: &mut Resolved,
    records: &[SubjectRecord],
    stats: Option<&PreprocessStats>,
) {
    if !resolved.pinned.iter().any(|k| k == "volume_shape") {
        let shape = records[0].amri.shape();
        resolved.model.volume_shape = [shape[0], shape[1], shape[2]];
    }
    if let Some(stats) = stats {
        resolved.model.feature_dim = stats.feature_dim();
    }
}

struct PreparedSplit {
    train: Vec<PreparedRecord>,
    test: Vec<PreparedRecord>,
    digest: String,
    stats: PreprocessStats,
}

/// Split, fit preprocessing on the training side only, and prepare both.
fn prepare_split(
    records: Vec<SubjectRecord>,
    train_fraction: f64,
    seed: u64,
) -> Result<PreparedSplit> {
    let (train_raw, test_raw) = split_cohort(records, train_fraction, seed)?;
    let digest = split_hash(&train_raw, &test_raw);
    let stats = fit_preprocess(&train_raw)?;
    let prep = |rs: &[SubjectRecord]| -> Result<Vec<PreparedRecord>> {
        rs.iter().map(|r| apply_preprocess(r, &stats)).collect()
    };
    Ok(PreparedSplit {
        train: prep(&train_raw)?,
        test: prep(&test_raw)?,
        digest,
        stats,
    })
}

fn print_warnings(stats: &PreprocessStats) {
    for w in &stats.warnings {
        eprintln!("warning: {w}");
    }
}

fn ensure_out_dir(path: &Path) -> Result<()> {
    std::fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

// ── gen-data ──

#[derive(Args)]
struct GenDataArgs {
    /// Output dataset path.
    #[arg(long, value_name = "FILE")]
    out: PathBuf,
    /// Generation seed.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Subjects per class as PD,iRBD,HC.
    #[arg(long, value_name = "N,N,N")]
    subjects: Option<String>,
    /// Volume dimensions as X,Y,Z.
    #[arg(long, value_name = "X,Y,Z")]
    volume_shape: Option<String>,
    /// Frames per diffusion volume.
    #[arg(long)]
    dti_frames: Option<usize>,
    /// Frames per functional volume.
    #[arg(long)]
    fmri_frames: Option<usize>,
    /// Per-feature probability of masking a tabular value missing.
    #[arg(long)]
    missing_rate: Option<f64>,
    /// SD of the iid voxel noise.
    #[arg(long)]
    noise_sd: Option<f64>,
}

fn parse_triple(what: &str, text: &str) -> Result<[usize; 3]> {
    let parts: Vec<_> = text.split(',').collect();
    if parts.len() != 3 {
        return Err(Error::Usage(format!(
            "{what} must be three comma-separated integers, got '{text}'"
        )));
    }
    let mut out = [0usize; 3];
    for (slot, part) in out.iter_mut().zip(&parts) {
        *slot = part
            .trim()
            .parse()
            .map_err(|_| Error::Usage(format!("{what}: '{part}' is not an integer")))?;
    }
    Ok(out)
}

fn cmd_gen_data(args: GenDataArgs) -> Result<()> {
    let mut spec = CohortSpec {
        seed: args.seed,
        ..CohortSpec::default()
    };
    if let Some(text) = &args.subjects {
        spec.counts = parse_triple("--subjects", text)?;
    }
    if let Some(text) = &args.volume_shape {
        spec.volume_shape = parse_triple("--volume-shape", text)?;
    }
    if let Some(n) = args.dti_frames {
        spec.dti_frames = n;
    }
    if let Some(n) = args.fmri_frames {
        spec.fmri_frames = n;
    }
    if let Some(p) = args.missing_rate {
        spec.missing_rate = p;
    }
    if let Some(sd) = args.noise_sd {
        spec.noise_sd = sd;
    }
    let records = generate_cohort(&spec)?;
    save_dataset(&records, &args.out)?;
    println!(
        "wrote {} subjects (PD {}, iRBD {}, HC {}) to {}",
        records.len(),
        spec.counts[0],
        spec.counts[1],
        spec.counts[2],
        args.out.display()
    );
    Ok(())
}

// ── train ──

#[derive(Args)]
struct TrainArgs {
    /// Input dataset.
    #[arg(long, value_name = "FILE")]
    data: PathBuf,
    /// Output directory for checkpoint, history, metrics, and reports.
    #[arg(long, value_name = "DIR")]
    out: PathBuf,
    /// Split/shuffle/initialization seed.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Fraction of each class assigned to the training split.
    #[arg(long, default_value_t = 0.8)]
    train_fraction: f64,
    #[command(flatten)]
    cfg: ConfigArgs,
}

/// Single-run metrics in the shared `(config, seed)` CSV schema.
fn single_run_csv(
    name: &str,
    seed: u64,
    metrics: &Metrics,
    best_epoch: usize,
    digest: &str,
) -> AblationRun {
    AblationRun {
        results: vec![AblationResult {
            name: name.to_string(),
            cells: vec![AblationCell {
                seed,
                metrics: metrics.clone(),
                best_epoch,
                split_hash: digest.to_string(),
            }],
            mean_accuracy: metrics.accuracy,
            sd_accuracy: 0.0,
            mean_f1_macro: metrics.f1_macro,
            sd_f1_macro: 0.0,
        }],
        splits: vec![(seed, digest.to_string())],
    }
}

fn run_summary(
    name: &str,
    seed: u64,
    split: &PreparedSplit,
    best_epoch: usize,
    metrics: &Metrics,
) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "configuration: {name}");
    let _ = writeln!(s, "seed: {seed}");
    let _ = writeln!(
        s,
        "split: {} train / {} test (hash {})",
        split.train.len(),
        split.test.len(),
        split.digest
    );
    let _ = writeln!(s, "best epoch: {best_epoch}");
    s.push('\n');
    s.push_str(&render_metrics(metrics));
    s.push('\n');
    s.push_str(
        "note: following the replicated protocol, the best epoch is selected by\n\
         accuracy on the held-out split itself, so the reported accuracy is an\n\
         optimistic estimate rather than an unbiased one.\n",
    );
    if !split.stats.warnings.is_empty() {
        s.push('\n');
        for w in &split.stats.warnings {
            let _ = writeln!(s, "warning: {w}");
        }
    }
    s
}

fn cmd_train(args: TrainArgs) -> Result<()> {
    let records = load_records(&args.data)?;
    let mut resolved = args.cfg.resolve()?;
    let split = prepare_split(records.clone(), args.train_fraction, args.seed)?;
    print_warnings(&split.stats);
    align_to_data(&mut resolved, &records, Some(&split.stats));
    drop(records);

    let outcome = train(
        &split.train,
        &split.test,
        &resolved.model,
        &resolved.train,
        args.seed,
    )?;
    let metrics = evaluate(&outcome.model, &outcome.store, &split.test)?;
    let report = utilization_report(&outcome.model, &outcome.store, &split.test)?;

    ensure_out_dir(&args.out)?;
    let name = config_name(&resolved.model);
    save_checkpoint(
        &outcome.store,
        &resolved.model,
        &args.out.join("best.nmck"),
    )?;
    write_history_csv(
        &outcome.history,
        &resolved.model.experts,
        &args.out.join("history.csv"),
    )?;
    let csv = single_run_csv(
        &name,
        args.seed,
        &metrics,
        outcome.history.best_epoch,
        &split.digest,
    );
    write_ablation_csv(&csv, &args.out.join("metrics.csv"))?;
    write_utilization_csv(&report, &args.out.join("utilization.csv"))?;
    write_utilization_svg(&report, &args.out.join("utilization.svg"))?;
    let summary = run_summary(
        &name,
        args.seed,
        &split,
        outcome.history.best_epoch,
        &metrics,
    );
    write_text(&args.out.join("summary.txt"), &summary)?;

    print!("{summary}");
    println!("\nartifacts in {}", args.out.display());
    Ok(())
}

// ── eval ──

#[derive(Args)]
struct EvalArgs {
    /// Trained checkpoint to load.
    #[arg(long, value_name = "FILE")]
    checkpoint: PathBuf,
    /// Input dataset.
    #[arg(long, value_name = "FILE")]
    data: PathBuf,
    /// Seed that produced the checkpoint's train/test split.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Fraction of each class assigned to the training split.
    #[arg(long, default_value_t = 0.8)]
    train_fraction: f64,
    /// Optional output directory for metrics files.
    #[arg(long, value_name = "DIR")]
    out: Option<PathBuf>,
    #[command(flatten)]
    cfg: ConfigArgs,
}

fn cmd_eval(args: EvalArgs) -> Result<()> {
    let records = load_records(&args.data)?;
    let mut resolved = args.cfg.resolve()?;
    let split = prepare_split(records.clone(), args.train_fraction, args.seed)?;
    print_warnings(&split.stats);
    align_to_data(&mut resolved, &records, Some(&split.stats));
    drop(records);

    let (store, model) = load_checkpoint(&args.checkpoint, &resolved.model)?;
    let metrics = evaluate(&model, &store, &split.test)?;

    let mut text = String::new();
    let _ = writeln!(
        text,
        "checkpoint: {}\nsplit: {} train / {} test (hash {})\n",
        args.checkpoint.display(),
        split.train.len(),
        split.test.len(),
        split.digest
    );
    text.push_str(&render_metrics(&metrics));
    print!("{text}");

    if let Some(out) = &args.out {
        ensure_out_dir(out)?;
        let mut csv = String::from("accuracy,f1_macro,f1_weighted,subjects,split_hash\n");
        let _ = writeln!(
            csv,
            "{:.6},{:.6},{:.6},{},{}",
            metrics.accuracy, metrics.f1_macro, metrics.f1_weighted, metrics.n, split.digest
        );
        write_text(&out.join("metrics.csv"), &csv)?;
        write_text(&out.join("summary.txt"), &text)?;
        println!("\nartifacts in {}", out.display());
    }
    Ok(())
}

// ── ablate ──

#[derive(Args)]
struct AblateArgs {
    /// Input dataset.
    #[arg(long, value_name = "FILE")]
    data: PathBuf,
    /// Output directory for the comparison table.
    #[arg(long, value_name = "DIR")]
    out: PathBuf,
    /// Seeds, one independent run per seed and configuration.
    #[arg(long, value_delimiter = ',', required = true, value_name = "S,S,...")]
    seeds: Vec<u64>,
    /// Fraction of each class assigned to the training split.
    #[arg(long, default_value_t = 0.8)]
    train_fraction: f64,
    #[command(flatten)]
    cfg: ConfigArgs,
}

fn cmd_ablate(args: AblateArgs) -> Result<()> {
    let records = load_records(&args.data)?;
    let mut resolved = args.cfg.resolve()?;
    // Feature length depends only on the training split's PSG categories;
    // fit once on the first seed's split to size the model.
    let split = prepare_split(records.clone(), args.train_fraction, args.seeds[0])?;
    print_warnings(&split.stats);
    align_to_data(&mut resolved, &records, Some(&split.stats));
    drop(split);

    let run = run_ablation(
        &records,
        &resolved.model,
        &resolved.train,
        args.train_fraction,
        &args.seeds,
    )?;

    ensure_out_dir(&args.out)?;
    write_ablation_csv(&run, &args.out.join("ablation.csv"))?;

    let mut table = String::from("config          accuracy (mean ± sd)   f1_macro (mean ± sd)\n");
    for r in &run.results {
        let _ = writeln!(
            table,
            "{:<15} {:.4} ± {:.4}        {:.4} ± {:.4}",
            r.name, r.mean_accuracy, r.sd_accuracy, r.mean_f1_macro, r.sd_f1_macro
        );
    }
    let _ = writeln!(
        table,
        "\n{} seeds, shared split per seed across configurations:",
        run.splits.len()
    );
    for (seed, digest) in &run.splits {
        let _ = writeln!(table, "  seed {seed}: split {digest}");
    }
    write_text(&args.out.join("summary.txt"), &table)?;
    print!("{table}");
    println!("\nartifacts in {}", args.out.display());
    Ok(())
}

// ── report ──

#[derive(Args)]
struct ReportArgs {
    /// Trained checkpoint to load.
    #[arg(long, value_name = "FILE")]
    checkpoint: PathBuf,
    /// Input dataset.
    #[arg(long, value_name = "FILE")]
    data: PathBuf,
    /// Seed that produced the checkpoint's train/test split.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Fraction of each class assigned to the training split.
    #[arg(long, default_value_t = 0.8)]
    train_fraction: f64,
    /// Output directory for the utilization table and chart.
    #[arg(long, value_name = "DIR")]
    out: PathBuf,
    #[command(flatten)]
    cfg: ConfigArgs,
}

fn cmd_report(args: ReportArgs) -> Result<()> {
    let records = load_records(&args.data)?;
    let mut resolved = args.cfg.resolve()?;
    // Preprocessing statistics come from the training split, as in training;
    // gate weights are then collected over the whole cohort.
    let split = prepare_split(records.clone(), args.train_fraction, args.seed)?;
    print_warnings(&split.stats);
    align_to_data(&mut resolved, &records, Some(&split.stats));

    let (store, model) = load_checkpoint(&args.checkpoint, &resolved.model)?;
    let prepared: Vec<PreparedRecord> = records
        .iter()
        .map(|r| apply_preprocess(r, &split.stats))
        .collect::<Result<_>>()?;
    let report = utilization_report(&model, &store, &prepared)?;

    ensure_out_dir(&args.out)?;
    write_utilization_csv(&report, &args.out.join("utilization.csv"))?;
    write_utilization_svg(&report, &args.out.join("utilization.svg"))?;

    println!("mean gate weight per expert over {} subjects:", prepared.len());
    for (kind, mean) in report.experts.iter().zip(&report.means) {
        println!("  {:<15} {:.4}", kind.label(), mean);
    }
    if report.static_uniform {
        println!("  (static uniform gate: every weight is exactly 1/E)");
    }
    println!("\nartifacts in {}", args.out.display());
    Ok(())
}

// ── Entry point ──

fn run(cli: Cli) -> Result<()> {
    match cli.cmd {
        Cmd::GenData(args) => cmd_gen_data(args),
        Cmd::Train(args) => cmd_train(args),
        Cmd::Eval(args) => cmd_eval(args),
        Cmd::Ablate(args) => cmd_ablate(args),
        Cmd::Report(args) => cmd_report(args),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
