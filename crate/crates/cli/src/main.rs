//! Operator surface for the search engine.
//!
//! Subcommands: `gen-data` (write a deterministic synthetic dataset),
//! `search` (run one architecture search), `bench` (exhaustively train every
//! genotype into a lookup table), `report` (compare search results against
//! the bench).
//!
//! Exit codes are a stable contract for scripting: 0 success, 2 usage or
//! config error, 3 numerical abort.

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};
use spdarts_core::bench::{build_bench, percentile_of, regret, BenchTrainConfig, MicroBench};
use spdarts_core::data::{generate, read_dataset_file, write_dataset_file, DataSpec, Dataset};
use spdarts_core::seeding::json_digest;
use spdarts_core::space::{build_space, SearchSpaceSpec, DEFAULT_ENUMERATION_CAP};
use spdarts_core::trainer::{metrics_csv, MetricsRow, SearchConfig, SearchRun, TrainError};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

const EXIT_USAGE: u8 = 2;
const EXIT_NUMERIC: u8 = 3;

#[derive(Debug)]
enum CliError {
    Usage(String),
    Numeric(String),
}

impl CliError {
    fn code(&self) -> u8 {
        match self {
            CliError::Usage(_) => EXIT_USAGE,
            CliError::Numeric(_) => EXIT_NUMERIC,
        }
    }

    fn message(&self) -> &str {
        match self {
            CliError::Usage(m) | CliError::Numeric(m) => m,
        }
    }
}

fn usage<E: std::fmt::Display>(context: &str) -> impl FnOnce(E) -> CliError + '_ {
    move |e| CliError::Usage(format!("{context}: {e}"))
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::Diverged { .. } => CliError::Numeric(e.to_string()),
            other => CliError::Usage(other.to_string()),
        }
    }
}

#[derive(Parser)]
#[command(
    name = "spdarts",
    version,
    about = "Sparse-regularized differentiable architecture search with an exhaustive oracle bench"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a deterministic synthetic classification dataset
    GenData(GenDataArgs),
    /// Run one architecture search and write metrics plus the found genotype
    Search(SearchArgs),
    /// Exhaustively train every genotype in a space into a bench JSON
    Bench(BenchArgs),
    /// Compare search results against a bench
    Report(ReportArgs),
}

#[derive(Args)]
struct GenDataArgs {
    /// Output dataset file
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 8)]
    feature_dim: usize,
    #[arg(long, default_value_t = 4)]
    classes: usize,
    #[arg(long, default_value_t = 2048)]
    train: usize,
    #[arg(long, default_value_t = 1024)]
    val: usize,
    #[arg(long, default_value_t = 1024)]
    test: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct SearchArgs {
    /// Search config JSON; missing fields take defaults
    #[arg(long)]
    config: PathBuf,
    /// Dataset file written by gen-data
    #[arg(long)]
    data: PathBuf,
    /// Output directory for metrics.csv, result.json, checkpoints
    #[arg(long)]
    out: PathBuf,
    /// Overrides the seed from the config file
    #[arg(long)]
    seed: Option<u64>,
    /// Skip per-epoch checkpoint files
    #[arg(long, default_value_t = false)]
    no_checkpoints: bool,
}

#[derive(Args)]
struct BenchArgs {
    /// Bench config JSON: space, training settings, enumeration cap
    #[arg(long)]
    config: PathBuf,
    /// Dataset file written by gen-data
    #[arg(long)]
    data: PathBuf,
    /// Output bench JSON
    #[arg(long)]
    out: PathBuf,
    /// Comma-separated run seeds; one bench entry per genotype per seed
    #[arg(long, default_value = "1")]
    seeds: String,
    /// Parallel training jobs
    #[arg(long, default_value_t = 1)]
    jobs: usize,
    /// Keep entries already present in the output file
    #[arg(long, default_value_t = false)]
    resume: bool,
}

#[derive(Args)]
struct ReportArgs {
    /// Bench JSON to look genotypes up in
    #[arg(long)]
    bench: PathBuf,
    /// Optional output prefix: writes <out>.csv and <out>.txt
    #[arg(long)]
    out: Option<PathBuf>,
    /// Search result JSONs
    #[arg(required = true)]
    results: Vec<PathBuf>,
}

/// Schema of the bench config file.
#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct BenchFileConfig {
    space: SearchSpaceSpec,
    #[serde(default)]
    train: BenchTrainConfig,
    #[serde(default = "default_cap")]
    enumeration_cap: usize,
}

fn default_cap() -> usize {
    DEFAULT_ENUMERATION_CAP
}

/// Search result document; `rows` mirrors the metrics CSV.
#[derive(Debug, Serialize, Deserialize)]
struct ResultDoc {
    genotype: String,
    final_ies: f64,
    rows: Vec<MetricsRow>,
    config_digest: String,
    method_digest: String,
    method_label: String,
    space: SearchSpaceSpec,
    seed: u64,
    sparse_steps: usize,
}

/// Provenance record written next to every search run.
#[derive(Debug, Serialize, Deserialize)]
struct RunManifest {
    tool_version: String,
    config: SearchConfig,
    config_digest: String,
    seeds: Vec<u64>,
    dataset: DataSpec,
    outputs: Vec<String>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let outcome = match cli.command {
        Command::GenData(args) => cmd_gen_data(args),
        Command::Search(args) => cmd_search(args),
        Command::Bench(args) => cmd_bench(args),
        Command::Report(args) => cmd_report(args),
    };
    match outcome {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e.message());
            ExitCode::from(e.code())
        }
    }
}

fn cmd_gen_data(args: GenDataArgs) -> Result<(), CliError> {
    let spec = DataSpec {
        feature_dim: args.feature_dim,
        num_classes: args.classes,
        train_size: args.train,
        val_size: args.val,
        test_size: args.test,
        seed: args.seed,
    };
    let dataset = generate(&spec).map_err(usage("generating dataset"))?;
    write_dataset_file(&dataset, &args.out)
        .map_err(usage(&format!("writing {}", args.out.display())))?;
    println!(
        "wrote {} ({} train / {} val / {} test, dim {}, {} classes, seed {})",
        args.out.display(),
        spec.train_size,
        spec.val_size,
        spec.test_size,
        spec.feature_dim,
        spec.num_classes,
        spec.seed
    );
    Ok(())
}

fn load_dataset(path: &Path) -> Result<Dataset, CliError> {
    read_dataset_file(path).map_err(|e| CliError::Usage(format!("reading {}: {e}", path.display())))
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T, CliError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::Usage(format!("reading {}: {e}", path.display())))?;
    serde_json::from_str(&text)
        .map_err(|e| CliError::Usage(format!("parsing {}: {e}", path.display())))
}

fn write_text(path: &Path, text: &str) -> Result<(), CliError> {
    std::fs::write(path, text)
        .map_err(|e| CliError::Usage(format!("writing {}: {e}", path.display())))
}

fn cmd_search(args: SearchArgs) -> Result<(), CliError> {
    let mut config: SearchConfig = read_json(&args.config)?;
    if let Some(seed) = args.seed {
        config.seed = seed;
    }
    config.validate()?;
    let dataset = load_dataset(&args.data)?;

    std::fs::create_dir_all(&args.out)
        .map_err(|e| CliError::Usage(format!("creating {}: {e}", args.out.display())))?;
    let ckpt_dir = args.out.join("checkpoints");
    if !args.no_checkpoints {
        std::fs::create_dir_all(&ckpt_dir)
            .map_err(|e| CliError::Usage(format!("creating {}: {e}", ckpt_dir.display())))?;
    }

    let mut run = SearchRun::new(&config, &dataset)?;
    while !run.is_finished() {
        let row = run.run_epoch()?;
        let epoch = row.epoch;
        if !args.no_checkpoints {
            let path = ckpt_dir.join(format!("epoch_{epoch:04}.ckpt"));
            std::fs::write(&path, run.checkpoint())
                .map_err(|e| CliError::Usage(format!("writing {}: {e}", path.display())))?;
        }
    }
    let result = run.finish()?;

    let csv_path = args.out.join("metrics.csv");
    write_text(&csv_path, &metrics_csv(&result.metrics))?;

    let doc = ResultDoc {
        genotype: result.final_genotype.key(),
        final_ies: result.final_ies(),
        rows: result.metrics.clone(),
        config_digest: config.digest(),
        method_digest: config.method_digest(),
        method_label: config.method_label(),
        space: config.space.clone(),
        seed: config.seed,
        sparse_steps: result.sparse_steps,
    };
    let result_path = args.out.join("result.json");
    write_text(
        &result_path,
        &serde_json::to_string_pretty(&doc).expect("result serializes"),
    )?;

    let manifest = RunManifest {
        tool_version: env!("CARGO_PKG_VERSION").to_string(),
        config: config.clone(),
        config_digest: config.digest(),
        seeds: vec![config.seed],
        dataset: dataset.spec.clone(),
        outputs: vec![
            csv_path.display().to_string(),
            result_path.display().to_string(),
        ],
    };
    write_text(
        &args.out.join("run_manifest.json"),
        &serde_json::to_string_pretty(&manifest).expect("manifest serializes"),
    )?;

    println!(
        "search done: genotype {} final_ies {:.4} ({})",
        doc.genotype, doc.final_ies, doc.method_label
    );
    Ok(())
}

fn parse_seeds(text: &str) -> Result<Vec<u64>, CliError> {
    text.split(',')
        .map(|s| {
            s.trim()
                .parse::<u64>()
                .map_err(|_| CliError::Usage(format!("bad seed {s:?}")))
        })
        .collect()
}

fn cmd_bench(args: BenchArgs) -> Result<(), CliError> {
    let config: BenchFileConfig = read_json(&args.config)?;
    config.space.validate().map_err(usage("bench config"))?;
    let dataset = load_dataset(&args.data)?;
    if dataset.spec.feature_dim != config.space.feature_dim {
        return Err(CliError::Usage(format!(
            "dataset feature_dim {} != space feature_dim {}",
            dataset.spec.feature_dim, config.space.feature_dim
        )));
    }
    let seeds = parse_seeds(&args.seeds)?;
    let space = build_space(&config.space).map_err(usage("bench config"))?;

    let existing = if args.resume && args.out.exists() {
        let text = std::fs::read_to_string(&args.out)
            .map_err(|e| CliError::Usage(format!("reading {}: {e}", args.out.display())))?;
        Some(MicroBench::from_json(&text).map_err(usage("resume file"))?)
    } else {
        None
    };

    let (bench, newly) = build_bench(
        &space,
        &dataset,
        &config.train,
        &seeds,
        config.enumeration_cap,
        args.jobs.max(1),
        existing,
    )
    .map_err(|e| CliError::Usage(e.to_string()))?;

    write_text(&args.out, &bench.to_json())?;
    println!(
        "bench complete: {} genotypes, {} newly trained, wrote {}",
        bench.entries.len(),
        newly,
        args.out.display()
    );
    Ok(())
}

struct MethodRow {
    label: String,
    n: usize,
    mean_test_acc: f64,
    std_test_acc: f64,
    mean_percentile: f64,
    mean_regret: f64,
    mean_final_ies: f64,
}

fn cmd_report(args: ReportArgs) -> Result<(), CliError> {
    let bench_text = std::fs::read_to_string(&args.bench)
        .map_err(|e| CliError::Usage(format!("reading {}: {e}", args.bench.display())))?;
    let bench = MicroBench::from_json(&bench_text).map_err(usage("bench file"))?;
    let bench_space_digest = json_digest(&bench.space);

    // group results by method digest
    let mut groups: Vec<(String, String, Vec<ResultDoc>)> = Vec::new();
    for path in &args.results {
        let doc: ResultDoc = read_json(path)?;
        if json_digest(&doc.space) != bench_space_digest {
            return Err(CliError::Usage(format!(
                "{}: search space does not match the bench",
                path.display()
            )));
        }
        if !bench.entries.contains_key(&doc.genotype) {
            return Err(CliError::Usage(format!(
                "{}: genotype {} absent from bench",
                path.display(),
                doc.genotype
            )));
        }
        match groups.iter_mut().find(|(d, _, _)| *d == doc.method_digest) {
            Some((_, _, docs)) => docs.push(doc),
            None => {
                let digest = doc.method_digest.clone();
                let label = doc.method_label.clone();
                groups.push((digest, label, vec![doc]));
            }
        }
    }
    groups.sort_by(|a, b| a.1.cmp(&b.1).then(a.0.cmp(&b.0)));

    let mut rows = Vec::new();
    for (_, label, docs) in &groups {
        let accs: Vec<f64> = docs
            .iter()
            .map(|d| bench.mean_test_acc(&d.genotype).expect("checked above"))
            .collect();
        let pcts: Vec<f64> = docs
            .iter()
            .map(|d| percentile_of(&bench, &d.genotype).expect("checked above"))
            .collect();
        let regs: Vec<f64> = docs
            .iter()
            .map(|d| regret(&bench, &d.genotype).expect("checked above"))
            .collect();
        let iess: Vec<f64> = docs.iter().map(|d| d.final_ies).collect();
        let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
        let m = mean(&accs);
        let std = (mean(&accs.iter().map(|a| (a - m) * (a - m)).collect::<Vec<_>>())).sqrt();
        rows.push(MethodRow {
            label: label.clone(),
            n: docs.len(),
            mean_test_acc: m,
            std_test_acc: std,
            mean_percentile: mean(&pcts),
            mean_regret: mean(&regs),
            mean_final_ies: mean(&iess),
        });
    }

    let mut csv = String::from(
        "method,n,mean_test_acc,std_test_acc,mean_percentile,mean_regret,mean_final_ies\n",
    );
    for r in &rows {
        csv.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            r.label,
            r.n,
            r.mean_test_acc,
            r.std_test_acc,
            r.mean_percentile,
            r.mean_regret,
            r.mean_final_ies
        ));
    }

    // the text table shows exactly the CSV numbers
    let mut text = format!(
        "{:<24} {:>3} {:>22} {:>16} {:>16} {:>22}\n",
        "method", "n", "test_acc (mean±std)", "percentile", "regret", "final_ies"
    );
    for r in &rows {
        text.push_str(&format!(
            "{:<24} {:>3} {:>22} {:>16} {:>16} {:>22}\n",
            r.label,
            r.n,
            format!("{}±{}", r.mean_test_acc, r.std_test_acc),
            r.mean_percentile,
            r.mean_regret,
            r.mean_final_ies
        ));
    }

    print!("{text}");
    if let Some(prefix) = &args.out {
        let csv_path = prefix.with_extension("csv");
        let txt_path = prefix.with_extension("txt");
        write_text(&csv_path, &csv)?;
        write_text(&txt_path, &text)?;
        println!("wrote {} and {}", csv_path.display(), txt_path.display());
    }
    Ok(())
}
