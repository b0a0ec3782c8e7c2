use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use serde_json::json;

use debias_core::corpus::{
    generate_corpus, save_jsonl, stratified_split, Attribute, SplitManifest,
};
use debias_core::exec::default_workers;
use debias_core::experiment::{load_corpus, sweep, write_json, Ablation, CorpusSource, ExperimentConfig};
use debias_core::fairmetrics::BiasMeasure;
use debias_core::report::{build_report, load_records, write_report};
use debias_core::{Error, Result};

/// Continual debiasing experiments: corpus generation, splitting, training
/// sweeps and reports.
#[derive(Debug, Parser)]
#[command(name = "debias", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, clap::Args)]
struct Common {
    /// Experiment configuration (JSON). Defaults apply when omitted.
    #[arg(long, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Output directory; overrides `out_dir` from the configuration.
    #[arg(long, value_name = "DIR")]
    out: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate the synthetic corpus as JSON Lines plus a manifest.
    Gen {
        #[command(flatten)]
        common: Common,
    },
    /// Split the training corpus into one sub-dataset per attribute.
    Split {
        #[command(flatten)]
        common: Common,
    },
    /// Train every (sequence, seed) job and write one result file per job.
    Run {
        #[command(flatten)]
        common: Common,
        /// Comma-separated seeds; overrides the configuration.
        #[arg(long, value_name = "LIST", value_delimiter = ',')]
        seeds: Option<Vec<u64>>,
        /// Worker threads (default: available parallelism).
        #[arg(long, value_name = "N")]
        parallel: Option<usize>,
        /// Disable a component of the replay learner.
        #[arg(long, value_name = "bir|replay|none")]
        ablate: Option<Ablation>,
    },
    /// Aggregate result files into summary.csv, bc.csv and report.json.
    Report {
        #[command(flatten)]
        common: Common,
        /// Directory holding result files (default: the output directory).
        #[arg(long, value_name = "DIR")]
        results: Option<PathBuf>,
        /// Per-attribute quantity used for bias change.
        #[arg(long, value_name = "fped|fpr", default_value = "fped")]
        bias_measure: String,
    },
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::Gen { .. } => "gen",
            Command::Split { .. } => "split",
            Command::Run { .. } => "run",
            Command::Report { .. } => "report",
        }
    }
}

fn load_config(common: &Common) -> Result<(ExperimentConfig, PathBuf)> {
    let mut config = match &common.config {
        Some(path) => ExperimentConfig::load(path)?,
        None => ExperimentConfig::default(),
    };
    if let Some(out) = &common.out {
        config.out_dir = Some(out.clone());
    }
    let out = config
        .out_dir
        .clone()
        .ok_or_else(|| Error::Config("no output directory: pass --out or set out_dir".into()))?;
    Ok((config, out))
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn cmd_gen(common: &Common) -> Result<serde_json::Value> {
    let (config, out) = load_config(common)?;
    let CorpusSource::Synthetic(synth) = &config.corpus else {
        return Err(Error::Config("gen needs a synthetic corpus source".into()));
    };
    let corpus = generate_corpus(synth)?;
    create_dir(&out)?;
    let mut files = Vec::new();
    for (name, samples) in [
        ("train.jsonl", &corpus.train),
        ("validation.jsonl", &corpus.validation),
        ("test.jsonl", &corpus.test),
    ] {
        let path = out.join(name);
        save_jsonl(samples, &path)?;
        files.push(path);
    }
    let manifest = out.join("manifest.json");
    write_json(&manifest, &corpus.manifest(synth))?;
    files.push(manifest);
    Ok(json!({ "command": "gen", "files": files }))
}

fn cmd_split(common: &Common) -> Result<serde_json::Value> {
    let (config, out) = load_config(common)?;
    let (train, _, _, _) = load_corpus(&config.corpus)?;
    let subsets = stratified_split(&train, Attribute::ALL.len(), &Attribute::ALL, config.split_seed)?;
    create_dir(&out)?;
    let mut files = Vec::new();
    for (i, d) in subsets.iter().enumerate() {
        let path = out.join(format!("subset-{}-{}.jsonl", i + 1, d.focus.key()));
        save_jsonl(&d.samples, &path)?;
        files.push(path);
    }
    let manifest = out.join("split_manifest.json");
    write_json(&manifest, &SplitManifest::describe(&subsets, config.split_seed))?;
    files.push(manifest);
    Ok(json!({ "command": "split", "files": files }))
}

fn cmd_run(
    common: &Common,
    seeds: &Option<Vec<u64>>,
    parallel: Option<usize>,
    ablate: Option<Ablation>,
) -> Result<serde_json::Value> {
    let (mut config, out) = load_config(common)?;
    if let Some(seeds) = seeds {
        config.seeds = seeds.clone();
    }
    if let Some(a) = ablate {
        config.ablate = a;
    }
    let workers = parallel.unwrap_or_else(default_workers);
    if workers == 0 {
        return Err(Error::Config("--parallel must be at least 1".into()));
    }
    config.validate()?;
    create_dir(&out)?;
    let summary = sweep(&config, &out, workers)?;
    Ok(json!({
        "command": "run",
        "written": summary.written,
        "skipped": summary.skipped,
    }))
}

fn cmd_report(common: &Common, results: &Option<PathBuf>, measure: &str) -> Result<serde_json::Value> {
    let out = match (&common.out, &common.config) {
        (Some(o), _) => o.clone(),
        (None, Some(_)) => load_config(common)?.1,
        (None, None) => return Err(Error::Config("no output directory: pass --out".into())),
    };
    let measure = match measure {
        "fped" => BiasMeasure::Fped,
        "fpr" => BiasMeasure::Fpr,
        other => {
            return Err(Error::Config(format!(
                "unknown bias measure `{other}` (expected fped or fpr)"
            )))
        }
    };
    let records = load_records(results.as_deref().unwrap_or(&out))?;
    let report = build_report(&records, measure)?;
    let files = write_report(&report, &out)?;
    Ok(json!({ "command": "report", "runs": records.len(), "files": files }))
}

fn dispatch(command: &Command) -> Result<serde_json::Value> {
    match command {
        Command::Gen { common } => cmd_gen(common),
        Command::Split { common } => cmd_split(common),
        Command::Run {
            common,
            seeds,
            parallel,
            ablate,
        } => cmd_run(common, seeds, *parallel, *ablate),
        Command::Report {
            common,
            results,
            bias_measure,
        } => cmd_report(common, results, bias_measure),
    }
}

fn error_record(command: &str, kind: &str, message: &str) -> String {
    json!({ "error": { "command": command, "kind": kind, "message": message } }).to_string()
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                print!("{e}");
                return ExitCode::SUCCESS;
            }
            eprintln!("{}", error_record("", "usage", e.to_string().trim()));
            return ExitCode::from(2);
        }
    };
    match dispatch(&cli.command) {
        Ok(summary) => {
            println!("{summary}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("{}", error_record(cli.command.name(), e.kind(), &e.to_string()));
            ExitCode::FAILURE
        }
    }
}
