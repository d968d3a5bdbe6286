use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::json;

use priorboost::bagging::sorted_consecutive_bags;
use priorboost::data::{generate_dataset, save};
use priorboost::experiment::{run_bag_size_sweep, run_experiment, ExperimentSpec};
use priorboost::{
    glm_gradient_moments, glm_gradient_upper_bound, linear_risk_decomposition,
    linear_risk_upper_bound, random_bagging, solve_constrained_kmeans, Algorithm, DataGenConfig,
    Error, GlmFamily, Task,
};

#[derive(Parser)]
#[command(name = "priorboost", version, about = "Learning from aggregate responses with curated bags")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
#[allow(clippy::large_enum_variant)]
enum Command {
    /// Run an experiment sweep and write CSV curves.
    Run(RunArgs),
    /// Print the analytic risk decomposition for a synthetic design.
    Risk(RiskArgs),
    /// Cluster a file of values into bags of at least k.
    Bags(BagsArgs),
    /// Write a synthetic dataset (.csv or .bin).
    Gen(GenArgs),
}

#[derive(Args)]
struct RunArgs {
    /// JSON experiment spec; flags override its fields.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    name: Option<String>,
    #[arg(long)]
    task: Option<Task>,
    #[arg(long)]
    n: Option<usize>,
    #[arg(long)]
    d: Option<usize>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    sigma: Option<f64>,
    /// Minimum bag sizes, comma separated.
    #[arg(long, value_delimiter = ',')]
    k: Option<Vec<usize>>,
    /// Privacy budgets, comma separated (logistic only).
    #[arg(long, value_delimiter = ',')]
    epsilon: Option<Vec<f64>>,
    #[arg(long, value_delimiter = ',')]
    algorithm: Option<Vec<Algorithm>>,
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long)]
    repeats: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    test_size: Option<usize>,
    #[arg(long)]
    threads: Option<usize>,
    /// Run the bag-size grid over these training sizes instead of a sweep.
    #[arg(long, value_delimiter = ',')]
    n_list: Option<Vec<usize>>,
    /// Write the final parameters of every cell to this JSON file.
    #[arg(long)]
    dump_model: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum Bagging {
    Random,
    Curated,
}

#[derive(Args)]
struct RiskArgs {
    #[arg(long, default_value = "linear")]
    task: Task,
    #[arg(long, default_value_t = 1024)]
    n: usize,
    #[arg(long, default_value_t = 8)]
    d: usize,
    #[arg(long, default_value_t = 4)]
    k: usize,
    #[arg(long, default_value_t = 0.1)]
    sigma: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, value_enum, default_value = "random")]
    bagging: Bagging,
    /// Print JSON instead of a table.
    #[arg(long)]
    json: bool,
}

#[derive(Args)]
struct BagsArgs {
    /// Text file with one value per line.
    input: PathBuf,
    #[arg(long)]
    k: usize,
    /// Write the partition JSON here instead of stdout.
    #[arg(long)]
    dump_bags: Option<PathBuf>,
}

#[derive(Args)]
struct GenArgs {
    #[arg(long, default_value = "linear")]
    task: Task,
    #[arg(long)]
    n: usize,
    #[arg(long, default_value_t = 8)]
    d: usize,
    #[arg(long, default_value_t = 0.1)]
    sigma: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

fn build_spec(a: &RunArgs) -> priorboost::Result<ExperimentSpec> {
    let mut spec = match &a.config {
        Some(path) => ExperimentSpec::load(path)?,
        None => ExperimentSpec::default(),
    };
    macro_rules! set {
        ($($field:ident <- $flag:expr),* $(,)?) => {
            $(if let Some(v) = $flag.clone() { spec.$field = v; })*
        };
    }
    set!(
        name <- a.name, task <- a.task, n <- a.n, d <- a.d, steps <- a.steps,
        sigma <- a.sigma, k_list <- a.k, algorithms <- a.algorithm,
        l2_lambda <- a.lambda, repeats <- a.repeats, seed <- a.seed, output_dir <- a.out,
    );
    if a.epsilon.is_some() {
        spec.epsilon_list = a.epsilon.clone();
    }
    if a.test_size.is_some() {
        spec.test_size = a.test_size;
    }
    if a.threads.is_some() {
        spec.threads = a.threads;
    }
    spec.validate()?;
    Ok(spec)
}

fn cmd_run(a: RunArgs) -> priorboost::Result<i32> {
    let spec = build_spec(&a)?;
    if let Some(n_list) = &a.n_list {
        let (path, rows, skipped) = run_bag_size_sweep(&spec, n_list)?;
        println!("wrote {} rows to {}", rows.len(), path.display());
        return Ok(if skipped > 0 { 3 } else { 0 });
    }
    let outcome = run_experiment(&spec)?;
    println!("curves:   {}", outcome.curves_path.display());
    println!("final:    {}", outcome.final_path.display());
    println!("manifest: {}", outcome.manifest_path.display());
    println!(
        "{} cells finished, {} skipped, {} diverged",
        outcome.cells_run, outcome.cells_skipped, outcome.cells_diverged
    );
    if let Some(path) = &a.dump_model {
        let models: Vec<_> = outcome
            .models
            .iter()
            .map(|(cell, theta)| json!({"cell": cell, "theta": theta}))
            .collect();
        fs::write(path, serde_json::to_string_pretty(&models)? + "\n")?;
    }
    Ok(outcome.exit_code())
}

fn cmd_risk(a: RiskArgs) -> priorboost::Result<i32> {
    let ds = generate_dataset(&DataGenConfig::new(a.n, a.d, a.sigma, a.task, a.seed))?;
    let truth = ds.truth.clone().expect("generated data has a truth");
    let partition = match a.bagging {
        Bagging::Random => random_bagging(a.n, a.k, a.seed)?,
        Bagging::Curated => {
            let signal: Vec<f64> = (&ds.features * nalgebra::DVector::from_column_slice(&truth))
                .iter()
                .copied()
                .collect();
            sorted_consecutive_bags(&signal, a.k)?
        }
    };
    let (mut report, label) = match a.task {
        Task::Linear => (
            linear_risk_decomposition(&ds.features, &partition, &truth, a.sigma)?,
            "estimator risk",
        ),
        Task::Logistic => (
            glm_gradient_moments(&ds.features, &partition, &truth, &GlmFamily::bernoulli_logit())?,
            "score second moment",
        ),
    };
    report.upper_bound = Some(match a.task {
        Task::Linear => linear_risk_upper_bound(&ds.features, &partition, &truth, a.sigma)?,
        Task::Logistic => {
            glm_gradient_upper_bound(&ds.features, &partition, &truth, &GlmFamily::bernoulli_logit())?
        }
    });
    if a.json {
        println!("{}", report.to_json());
    } else {
        println!("{label} (n={}, d={}, k={}, bags={})", a.n, a.d, a.k, partition.num_bags());
        println!("{:<12} {:>14.6e}", "bias_sq", report.bias_sq);
        println!("{:<12} {:>14.6e}", "variance", report.variance);
        println!("{:<12} {:>14.6e}", "total", report.total);
        println!("{:<12} {:>14.6e}", "upper_bound", report.upper_bound.unwrap_or(f64::NAN));
    }
    Ok(0)
}

fn read_values(path: &Path) -> priorboost::Result<Vec<f64>> {
    fs::read_to_string(path)?
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty())
        .map(|l| {
            l.parse::<f64>()
                .ok()
                .filter(|v| v.is_finite())
                .ok_or_else(|| Error::Format(format!("not a finite number: {l:?}")))
        })
        .collect()
}

fn cmd_bags(a: BagsArgs) -> priorboost::Result<i32> {
    let values = read_values(&a.input)?;
    let solution = solve_constrained_kmeans(&values, a.k)?;
    let json = solution.original_partition().to_json();
    eprintln!("bags: {}, objective: {}", solution.partition.num_bags(), solution.objective);
    match &a.dump_bags {
        Some(path) => fs::write(path, json + "\n")?,
        None => println!("{json}"),
    }
    Ok(0)
}

fn cmd_gen(a: GenArgs) -> priorboost::Result<i32> {
    let ds = generate_dataset(&DataGenConfig::new(a.n, a.d, a.sigma, a.task, a.seed))?;
    save(&ds, &a.out)?;
    Ok(0)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Run(a) => cmd_run(a),
        Command::Risk(a) => cmd_risk(a),
        Command::Bags(a) => cmd_bags(a),
        Command::Gen(a) => cmd_gen(a),
    };
    match result {
        Ok(code) => ExitCode::from(code as u8),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(match e {
                Error::Config(_) | Error::InvalidArgument(_) | Error::Json(_) => 2,
                _ => 1,
            })
        }
    }
}
