//! Command-line workflows: dataset generation and labelling, two-stage
//! training, solving, and gap evaluation.
//!
//! Exit codes: 0 on success, 2 for usage or input problems, 3 for runtime
//! failures.  Every command is deterministic given its flags and seed.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use rand::Rng;
use serde::Serialize;

use diffroute::archive::ParameterArchive;
use diffroute::config::TrainConfig;
use diffroute::dataset::{read_dataset, write_atomic, write_dataset, DatasetRecord};
use diffroute::error::{Error, Result};
use diffroute::instance::generate_batch;
use diffroute::oracles::{brute_force_solve, savings_solve};
use diffroute::pipeline::{evaluate, solve, write_eval_csv, write_eval_json};
use diffroute::rng::{indexed_label, substream};
use diffroute::training::{train_diffusion, train_policy, TrainReport};

/// Largest instance the exhaustive reference solver accepts.
const BRUTE_LIMIT: usize = 12;

#[derive(Parser)]
#[command(
    name = "diffroute",
    version,
    about = "Diffusion-guided constructive solver for capacitated vehicle routing"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a random instance dataset (JSONL, one record per line).
    Gen {
        /// Customers per instance.
        #[arg(long)]
        n: usize,
        /// Number of instances.
        #[arg(long)]
        count: usize,
        /// Master seed; instances draw from per-index substreams.
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Output JSONL path.
        #[arg(long)]
        out: PathBuf,
    },
    /// Attach reference routes to every record of a dataset.
    Label {
        /// Input JSONL path.
        #[arg(long = "in")]
        input: PathBuf,
        /// Reference solver to run.
        #[arg(long, value_enum)]
        solver: SolverKind,
        /// Output JSONL path.
        #[arg(long)]
        out: PathBuf,
    },
    /// Fit the diffusion stage to a labelled dataset.
    TrainDiffusion {
        /// Labelled training dataset (JSONL).
        #[arg(long)]
        data: PathBuf,
        /// TOML configuration; defaults apply when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Master seed.
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Checkpoint output path.
        #[arg(long)]
        ckpt_out: PathBuf,
        /// Report JSON path; defaults to `<ckpt-out>.report.json`.
        #[arg(long)]
        report_out: Option<PathBuf>,
    },
    /// Fit the policy stage on top of a diffusion checkpoint.
    TrainPolicy {
        /// Unlabelled training dataset (JSONL).
        #[arg(long)]
        data: PathBuf,
        /// Diffusion-stage checkpoint to build on.
        #[arg(long)]
        ckpt: PathBuf,
        /// TOML configuration; defaults to the checkpoint's snapshot.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Master seed.
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Checkpoint output path.
        #[arg(long)]
        ckpt_out: PathBuf,
        /// Report JSON path; defaults to `<ckpt-out>.report.json`.
        #[arg(long)]
        report_out: Option<PathBuf>,
    },
    /// Solve every instance of a dataset with a trained checkpoint.
    Solve {
        /// Trained checkpoint with all four sections.
        #[arg(long)]
        ckpt: PathBuf,
        /// Input JSONL path.
        #[arg(long = "in")]
        input: PathBuf,
        /// Dihedral augmentations to try.
        #[arg(long, default_value_t = 8, value_parser = clap::value_parser!(u8).range(1..=8))]
        aug: u8,
        /// Cap on start nodes per instance.
        #[arg(long, default_value_t = 100)]
        starts: usize,
        /// Master seed.
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Output JSON path.
        #[arg(long)]
        out: PathBuf,
    },
    /// Solve a dataset and report gaps against reference objectives.
    Eval {
        /// Trained checkpoint with all four sections.
        #[arg(long)]
        ckpt: PathBuf,
        /// Input JSONL path.
        #[arg(long = "in")]
        input: PathBuf,
        /// Dihedral augmentations to try.
        #[arg(long, default_value_t = 8, value_parser = clap::value_parser!(u8).range(1..=8))]
        aug: u8,
        /// Cap on start nodes per instance.
        #[arg(long, default_value_t = 100)]
        starts: usize,
        /// Master seed.
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Where reference objectives come from.
        #[arg(long = "ref", value_enum, default_value_t = RefKind::Labels)]
        reference: RefKind,
        /// Output path prefix; writes `<out>.csv` and `<out>.json`.
        #[arg(long)]
        out: PathBuf,
    },
}

/// Reference solvers for `label`.
#[derive(Clone, Copy, ValueEnum)]
enum SolverKind {
    /// Exhaustive optimum; refuses instances with more than 12 customers.
    Brute,
    /// Savings construction heuristic.
    Savings,
}

/// Reference objective source for `eval`.
#[derive(Clone, Copy, ValueEnum)]
enum RefKind {
    /// Routes already attached to the records.
    Labels,
    /// Run the savings heuristic on each instance.
    Savings,
    /// Run the exhaustive solver on each instance (12 customers at most).
    Brute,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::from(if err.is_usage() { 2 } else { 3 })
        }
    }
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::Gen { n, count, seed, out } => gen(n, count, seed, &out),
        Command::Label { input, solver, out } => label(&input, solver, &out),
        Command::TrainDiffusion {
            data,
            config,
            seed,
            ckpt_out,
            report_out,
        } => run_train_diffusion(&data, config.as_deref(), seed, &ckpt_out, report_out.as_deref()),
        Command::TrainPolicy {
            data,
            ckpt,
            config,
            seed,
            ckpt_out,
            report_out,
        } => run_train_policy(
            &data,
            &ckpt,
            config.as_deref(),
            seed,
            &ckpt_out,
            report_out.as_deref(),
        ),
        Command::Solve {
            ckpt,
            input,
            aug,
            starts,
            seed,
            out,
        } => run_solve(&ckpt, &input, aug as usize, starts, seed, &out),
        Command::Eval {
            ckpt,
            input,
            aug,
            starts,
            seed,
            reference,
            out,
        } => run_eval(&ckpt, &input, aug as usize, starts, seed, reference, &out),
    }
}

fn gen(n: usize, count: usize, seed: u64, out: &Path) -> Result<()> {
    if n == 0 {
        return Err(Error::InvalidArgument("--n must be at least 1".into()));
    }
    let records: Vec<DatasetRecord> = generate_batch(n, count, seed)?
        .into_iter()
        .map(|instance| DatasetRecord {
            instance,
            solution: None,
        })
        .collect();
    write_dataset(out, &records)?;
    println!("wrote {} records to {}", records.len(), out.display());
    Ok(())
}

fn label(input: &Path, solver: SolverKind, out: &Path) -> Result<()> {
    let mut records = read_dataset(input)?;
    if matches!(solver, SolverKind::Brute) {
        for (idx, record) in records.iter().enumerate() {
            let n = record.instance.customer_count();
            if n > BRUTE_LIMIT {
                return Err(Error::InvalidArgument(format!(
                    "brute solver handles at most {BRUTE_LIMIT} customers, record {idx} has {n}"
                )));
            }
        }
    }
    for record in &mut records {
        let solution = match solver {
            SolverKind::Brute => brute_force_solve(&record.instance)?,
            SolverKind::Savings => savings_solve(&record.instance)?,
        };
        record.solution = Some(solution);
    }
    write_dataset(out, &records)?;
    println!("labelled {} records to {}", records.len(), out.display());
    Ok(())
}

/// Default report path: the checkpoint path with `.report.json` appended.
fn report_path(ckpt_out: &Path, report_out: Option<&Path>) -> PathBuf {
    match report_out {
        Some(path) => path.to_path_buf(),
        None => {
            let mut name = ckpt_out.as_os_str().to_os_string();
            name.push(".report.json");
            PathBuf::from(name)
        }
    }
}

fn write_report(path: &Path, report: &TrainReport) -> Result<()> {
    let json = serde_json::to_string_pretty(report)?;
    write_atomic(path, json.as_bytes())
}

fn run_train_diffusion(
    data: &Path,
    config: Option<&Path>,
    seed: u64,
    ckpt_out: &Path,
    report_out: Option<&Path>,
) -> Result<()> {
    let config = match config {
        Some(path) => TrainConfig::load(path)?,
        None => TrainConfig::default(),
    };
    let records = read_dataset(data)?;
    let (params, report) = train_diffusion(&records, &config, seed)?;
    ParameterArchive::new(config, params).save(ckpt_out)?;
    let report_file = report_path(ckpt_out, report_out);
    write_report(&report_file, &report)?;
    println!(
        "checkpoint {} report {}",
        ckpt_out.display(),
        report_file.display()
    );
    if let Some(auc) = report.train_auc {
        println!("train auc {auc:.4}");
    }
    Ok(())
}

fn run_train_policy(
    data: &Path,
    ckpt: &Path,
    config: Option<&Path>,
    seed: u64,
    ckpt_out: &Path,
    report_out: Option<&Path>,
) -> Result<()> {
    let archive = ParameterArchive::load(ckpt)?;
    archive.require_sections(&["gat", "denoiser"])?;
    let config = match config {
        Some(path) => TrainConfig::load(path)?,
        None => archive.config.clone(),
    };
    let records = read_dataset(data)?;
    let (params, report) = train_policy(&records, &archive.params, &config, seed)?;
    ParameterArchive::new(config, params).save(ckpt_out)?;
    let report_file = report_path(ckpt_out, report_out);
    write_report(&report_file, &report)?;
    println!(
        "checkpoint {} report {}",
        ckpt_out.display(),
        report_file.display()
    );
    if let Some(objective) = report.validation_objective {
        println!("validation objective {objective:.4}");
    }
    Ok(())
}

/// JSON image of one solved instance.
#[derive(Serialize)]
struct SolveRow {
    instance: usize,
    objective: f64,
    variant: usize,
    start: usize,
    routes: Vec<Vec<usize>>,
    per_variant: Vec<SolveVariantRow>,
}

#[derive(Serialize)]
struct SolveVariantRow {
    variant: usize,
    start: usize,
    objective: f64,
}

fn load_full_checkpoint(ckpt: &Path) -> Result<ParameterArchive> {
    let archive = ParameterArchive::load(ckpt)?;
    archive.require_sections(&["gat", "denoiser", "masked_encoder", "decoder"])?;
    Ok(archive)
}

fn run_solve(
    ckpt: &Path,
    input: &Path,
    aug: usize,
    starts: usize,
    seed: u64,
    out: &Path,
) -> Result<()> {
    let archive = load_full_checkpoint(ckpt)?;
    let records = read_dataset(input)?;
    let mut rows = Vec::with_capacity(records.len());
    for (idx, record) in records.iter().enumerate() {
        let instance_seed = substream(seed, &indexed_label("solve", idx)).gen();
        let outcome = solve(
            &record.instance,
            &archive.params,
            &archive.config,
            aug,
            starts,
            instance_seed,
        )?;
        rows.push(SolveRow {
            instance: idx,
            objective: outcome.objective,
            variant: outcome.variant,
            start: outcome.start,
            routes: outcome.solution.routes,
            per_variant: outcome
                .per_variant
                .into_iter()
                .map(|v| SolveVariantRow {
                    variant: v.variant,
                    start: v.start,
                    objective: v.objective,
                })
                .collect(),
        });
    }
    let json = serde_json::to_string_pretty(&rows)?;
    write_atomic(out, json.as_bytes())?;
    println!("solved {} instances to {}", rows.len(), out.display());
    Ok(())
}

fn run_eval(
    ckpt: &Path,
    input: &Path,
    aug: usize,
    starts: usize,
    seed: u64,
    reference: RefKind,
    out: &Path,
) -> Result<()> {
    let archive = load_full_checkpoint(ckpt)?;
    let mut records = read_dataset(input)?;
    match reference {
        RefKind::Labels => {}
        RefKind::Savings => {
            for record in &mut records {
                record.solution = Some(savings_solve(&record.instance)?);
            }
        }
        RefKind::Brute => {
            for (idx, record) in records.iter().enumerate() {
                let n = record.instance.customer_count();
                if n > BRUTE_LIMIT {
                    return Err(Error::InvalidArgument(format!(
                        "brute reference handles at most {BRUTE_LIMIT} customers, record {idx} has {n}"
                    )));
                }
            }
            for record in &mut records {
                record.solution = Some(brute_force_solve(&record.instance)?);
            }
        }
    }
    let report = evaluate(&records, &archive.params, &archive.config, aug, starts, seed)?;
    let csv_path = suffixed(out, ".csv");
    let json_path = suffixed(out, ".json");
    write_eval_csv(&csv_path, &report)?;
    write_eval_json(&json_path, &report)?;
    match report.aggregate.mean_gap {
        Some(gap) => println!(
            "mean gap {gap:.2}% over {} referenced instances",
            report.aggregate.count
        ),
        None => println!("no referenced instances"),
    }
    println!("rows {} json {}", csv_path.display(), json_path.display());
    Ok(())
}

fn suffixed(base: &Path, suffix: &str) -> PathBuf {
    let mut name = base.as_os_str().to_os_string();
    name.push(suffix);
    PathBuf::from(name)
}
