//! `madcn`: train, evaluate, explain and benchmark tabular regressors from
//! the command line.
//!
//! Exit codes: 0 success, 1 other failure, 2 input or I/O error, 3 schema
//! mismatch, 4 exact attribution over capacity, 5 training divergence.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use madcn_core::training::EpochRecord;
use madcn_core::workflow::{self, DependencePair, ExplainMethod, Partition, RunConfig};
use madcn_core::Error;

#[derive(Parser)]
#[command(
    name = "madcn",
    version,
    about = "Attention deep & cross networks for panel regression"
)]
struct Cli {
    /// JSON run configuration; unknown keys are rejected.
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,

    /// Root seed; replaces any seeds in the config.
    #[arg(long, global = true, value_name = "INT")]
    seed: Option<u64>,

    /// Output directory.
    #[arg(long, global = true, value_name = "DIR", default_value = "madcn-out")]
    out: PathBuf,

    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Inputs {
    /// Feature schema JSON.
    #[arg(long, value_name = "PATH")]
    schema: Option<PathBuf>,

    /// Panel CSV.
    #[arg(long, value_name = "PATH")]
    data: Option<PathBuf>,
}

#[derive(Args)]
struct ModelInputs {
    #[command(flatten)]
    inputs: Inputs,

    /// Saved model file.
    #[arg(long, value_name = "PATH")]
    model: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum MethodArg {
    Exact,
    Permutation,
}

#[derive(Clone, Copy, ValueEnum)]
enum PartitionArg {
    Train,
    Test,
    All,
}

#[derive(Subcommand)]
enum Command {
    /// Fit a network and write the model, its report and the resolved config.
    Train(Inputs),
    /// Print train and test metrics of a saved model as JSON.
    Evaluate(ModelInputs),
    /// Write predictions for every row of the data file.
    Predict(ModelInputs),
    /// Shapley attributions for selected rows.
    Explain {
        #[command(flatten)]
        inputs: ModelInputs,
        #[arg(long, value_enum)]
        method: Option<MethodArg>,
        #[arg(long)]
        n_permutations: Option<usize>,
        #[arg(long)]
        background_size: Option<usize>,
        /// Dataset rows to explain.
        #[arg(long, value_delimiter = ',')]
        rows: Vec<usize>,
        #[arg(long, value_enum)]
        partition: Option<PartitionArg>,
        #[arg(long)]
        max_samples: Option<usize>,
        /// Fields left out of the attribution.
        #[arg(long, value_delimiter = ',')]
        exclude: Vec<String>,
        #[arg(long)]
        target: Option<String>,
        /// Dependence export as FEATURE:COLOR; repeatable.
        #[arg(long, value_name = "FEATURE:COLOR")]
        dependence: Vec<String>,
    },
    /// Rank features by mean |φ| from an explanation table.
    Importance {
        #[arg(long, value_name = "PATH")]
        explanations: PathBuf,
    },
    /// Export (value, φ, color value) records for one feature pair.
    Dependence {
        #[arg(long, value_name = "PATH")]
        explanations: PathBuf,
        #[arg(long)]
        feature: String,
        #[arg(long)]
        color: String,
    },
    /// Fit and score LR, KNN, DNN, DCN and MADCN on one split.
    Benchmark(Inputs),
    /// Finite-difference gradient checks of every layer type.
    Gradcheck,
}

fn exit_code(err: &Error) -> u8 {
    match err.root() {
        Error::Io { .. }
        | Error::Csv(_)
        | Error::Json(_)
        | Error::Argument(_)
        | Error::Format(_)
        | Error::Encoding(_) => 2,
        Error::Schema(_) => 3,
        Error::Capacity { .. } => 4,
        Error::Divergence { .. } => 5,
        _ => 1,
    }
}

fn apply_inputs(cfg: &mut RunConfig, inputs: &Inputs) {
    if let Some(p) = &inputs.schema {
        cfg.schema = Some(p.clone());
    }
    if let Some(p) = &inputs.data {
        cfg.data = Some(p.clone());
    }
}

fn apply_model_inputs(cfg: &mut RunConfig, inputs: &ModelInputs) {
    apply_inputs(cfg, &inputs.inputs);
    if let Some(p) = &inputs.model {
        cfg.model_path = Some(p.clone());
    }
}

fn parse_pair(s: &str) -> Result<DependencePair, Error> {
    match s.split_once(':') {
        Some((f, c)) if !f.is_empty() && !c.is_empty() => Ok(DependencePair {
            feature: f.to_string(),
            color: c.to_string(),
        }),
        _ => Err(Error::Argument(format!(
            "--dependence expects FEATURE:COLOR, got `{s}`"
        ))),
    }
}

fn log(msg: &str) {
    eprintln!("{}", msg.trim_end());
}

fn print_json(value: &impl serde::Serialize) -> Result<(), Error> {
    println!("{}", serde_json::to_string_pretty(value)?);
    Ok(())
}

fn run(cli: Cli) -> Result<(), Error> {
    let mut cfg = match &cli.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    let out: &Path = &cli.out;
    match &cli.command {
        Command::Train(inputs) => {
            apply_inputs(&mut cfg, inputs);
            let cfg = cfg.resolve(cli.seed)?;
            let mut progress = |r: &EpochRecord| {
                if r.epoch == 1 {
                    eprintln!("epoch,train_loss,val_loss");
                }
                eprintln!("{}", r.csv_line());
            };
            let trained = workflow::train_run(&cfg, out, &mut log, &mut progress)?;
            let test = &trained.report.test_metrics;
            for (name, m) in trained.report.target_names.iter().zip(test) {
                eprintln!("test {name}: mse {} mae {} r2 {}", m.mse, m.mae, m.r2);
            }
            println!("{}", trained.model_path.display());
        }
        Command::Evaluate(inputs) => {
            apply_model_inputs(&mut cfg, inputs);
            let cfg = cfg.resolve(cli.seed)?;
            print_json(&workflow::evaluate_run(&cfg, out, &mut log)?)?;
        }
        Command::Predict(inputs) => {
            apply_model_inputs(&mut cfg, inputs);
            let cfg = cfg.resolve(cli.seed)?;
            println!("{}", workflow::predict_run(&cfg, out, &mut log)?.display());
        }
        Command::Explain {
            inputs,
            method,
            n_permutations,
            background_size,
            rows,
            partition,
            max_samples,
            exclude,
            target,
            dependence,
        } => {
            apply_model_inputs(&mut cfg, inputs);
            let ec = &mut cfg.explain;
            if let Some(m) = method {
                ec.method = match m {
                    MethodArg::Exact => ExplainMethod::Exact,
                    MethodArg::Permutation => ExplainMethod::Permutation,
                };
            }
            if let Some(p) = partition {
                ec.partition = match p {
                    PartitionArg::Train => Partition::Train,
                    PartitionArg::Test => Partition::Test,
                    PartitionArg::All => Partition::All,
                };
            }
            ec.n_permutations = n_permutations.unwrap_or(ec.n_permutations);
            ec.background_size = background_size.unwrap_or(ec.background_size);
            ec.max_samples = max_samples.unwrap_or(ec.max_samples);
            if !rows.is_empty() {
                ec.rows = rows.clone();
            }
            if !exclude.is_empty() {
                ec.exclude = exclude.clone();
            }
            if target.is_some() {
                ec.target = target.clone();
            }
            for pair in dependence {
                ec.dependence.push(parse_pair(pair)?);
            }
            let cfg = cfg.resolve(cli.seed)?;
            for path in workflow::explain_run(&cfg, out, &mut log)?.files {
                println!("{}", path.display());
            }
        }
        Command::Importance { explanations } => {
            let path = workflow::importance_run(explanations, out)?;
            print!(
                "{}",
                std::fs::read_to_string(&path).map_err(|e| Error::Io { path, source: e })?
            );
        }
        Command::Dependence {
            explanations,
            feature,
            color,
        } => {
            println!(
                "{}",
                workflow::dependence_run(explanations, feature, color, out)?.display()
            );
        }
        Command::Benchmark(inputs) => {
            apply_inputs(&mut cfg, inputs);
            let cfg = cfg.resolve(cli.seed)?;
            let rows = workflow::benchmark_run(&cfg, out, &mut log)?;
            workflow::write_benchmark_csv(std::io::stdout().lock(), &rows)?;
        }
        Command::Gradcheck => {
            let cfg = cfg.resolve(cli.seed)?;
            print_json(&workflow::gradcheck_run(&cfg, out)?)?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::from(exit_code(&err))
        }
    }
}
