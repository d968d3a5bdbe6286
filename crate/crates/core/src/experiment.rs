//! Seeded sweeps over algorithms, bag sizes, privacy budgets and repeats.
//!
//! Every cell draws its train/test data and its run seed from the master
//! seed and the repeat index alone, so cells that differ only in algorithm,
//! `k` or `epsilon` see the same data and the same bagging randomness, and
//! the value of a cell never depends on which other cells are in the sweep.
//! Cells run on a bounded rayon pool; rows are written afterwards in cell
//! order by a single writer.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::adaptive::{run, Algorithm, PenaltyScale, RunConfig, RunTrace};
use crate::data::{generate_dataset, generate_with_truth, DataGenConfig, Dataset, Task};
use crate::error::{Error, Result};
use crate::glm::{FitConfig, GlmFamily, ModelParams};
use crate::oracle::DpParams;
use crate::rng::derive_seed;

const TRAIN_TAG: u64 = 0x0074_7261_696e;
const TEST_TAG: u64 = 0x7465_7374;
const RUN_TAG: u64 = 0x0072_756e;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentSpec {
    pub name: String,
    pub task: Task,
    pub n: usize,
    pub d: usize,
    #[serde(alias = "T")]
    pub steps: usize,
    pub sigma: f64,
    pub k_list: Vec<usize>,
    pub epsilon_list: Option<Vec<f64>>,
    pub algorithms: Vec<Algorithm>,
    /// Ridge penalty on the summed training loss.
    pub l2_lambda: f64,
    pub repeats: usize,
    pub seed: u64,
    pub output_dir: PathBuf,
    /// Test-set size; defaults to `n`.
    pub test_size: Option<usize>,
    /// Worker threads; defaults to the number of cores.
    pub threads: Option<usize>,
    /// Label bound used by the Laplace mechanism.
    pub dp_bound: f64,
}

impl Default for ExperimentSpec {
    fn default() -> Self {
        ExperimentSpec {
            name: "experiment".into(),
            task: Task::Linear,
            n: 1 << 16,
            d: 8,
            steps: 16,
            sigma: 0.1,
            k_list: vec![1, 4, 16],
            epsilon_list: None,
            algorithms: vec![Algorithm::PriorBoost, Algorithm::OneShot, Algorithm::PbPrefix],
            l2_lambda: 0.0,
            repeats: 3,
            seed: 0,
            output_dir: PathBuf::from("out"),
            test_size: None,
            threads: None,
            dp_bound: 1.0,
        }
    }
}

impl ExperimentSpec {
    pub fn from_json(text: &str) -> Result<Self> {
        let spec: ExperimentSpec = serde_json::from_str(text)?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&fs::read_to_string(path)?)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.name.is_empty() || self.name.contains(['/', '\\']) {
            return bad("name must be a nonempty file stem");
        }
        if self.n == 0 || self.d == 0 || self.steps == 0 {
            return bad("n, d and steps must be positive");
        }
        if !(self.sigma >= 0.0 && self.sigma.is_finite()) {
            return bad("sigma must be finite and nonnegative");
        }
        if self.k_list.is_empty() || self.k_list.contains(&0) {
            return bad("k_list must be nonempty with positive entries");
        }
        if self.algorithms.is_empty() {
            return bad("algorithms must be nonempty");
        }
        if self.repeats == 0 {
            return bad("repeats must be at least 1");
        }
        if !(self.l2_lambda >= 0.0 && self.l2_lambda.is_finite()) {
            return bad("l2_lambda must be finite and nonnegative");
        }
        if self.test_size == Some(0) || self.threads == Some(0) {
            return bad("test_size and threads must be positive");
        }
        if let Some(eps) = &self.epsilon_list {
            if self.task != Task::Logistic {
                return bad("epsilon_list requires task = logistic");
            }
            if eps.is_empty() || eps.iter().any(|e| !(*e > 0.0 && e.is_finite())) {
                return bad("epsilon_list entries must be positive and finite");
            }
            if !(self.dp_bound > 0.0 && self.dp_bound.is_finite()) {
                return bad("dp_bound must be positive");
            }
        }
        Ok(())
    }

    fn data_config(&self, n: usize, seed: u64) -> DataGenConfig {
        DataGenConfig::new(n, self.d, self.sigma, self.task, seed)
    }

    /// Train and test sets for one repeat at train size `n`.
    pub fn datasets(&self, n: usize, repeat: usize) -> Result<(Dataset, Dataset)> {
        let r = repeat as u64;
        let test_n = self.test_size.unwrap_or(n);
        let train = generate_dataset(&self.data_config(n, derive_seed(self.seed, &[TRAIN_TAG, r])))?;
        let truth = train.truth.clone().expect("generated data has a truth");
        let test_cfg = self.data_config(test_n, derive_seed(self.seed, &[TEST_TAG, r]));
        let test = generate_with_truth(&test_cfg, &truth)?;
        Ok((train, test))
    }

    pub fn run_config(&self, algorithm: Algorithm, k: usize, epsilon: Option<f64>, repeat: usize) -> RunConfig {
        let seed = derive_seed(self.seed, &[RUN_TAG, repeat as u64]);
        let mut cfg = match self.task {
            Task::Linear => RunConfig::linear(algorithm, self.steps, k, seed),
            Task::Logistic => RunConfig::logistic(algorithm, self.steps, k, self.l2_lambda, seed),
        };
        if self.task == Task::Linear {
            cfg.family = GlmFamily::gaussian();
            cfg.fit = FitConfig::with_lambda(self.l2_lambda);
            cfg.penalty = PenaltyScale::Summed;
        }
        cfg.dp = epsilon.map(|epsilon| DpParams {
            epsilon,
            bound: self.dp_bound,
        });
        cfg
    }

    fn epsilons(&self) -> Vec<Option<f64>> {
        match &self.epsilon_list {
            Some(list) => list.iter().map(|&e| Some(e)).collect(),
            None => vec![None],
        }
    }

    fn is_feasible(&self, n: usize, algorithm: Algorithm, k: usize) -> bool {
        let steps = if algorithm == Algorithm::OneShot || k == 1 { 1 } else { self.steps };
        n / steps >= k
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Cell {
    pub algorithm: Algorithm,
    pub k: usize,
    pub epsilon: Option<f64>,
    pub repeat: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub enum CellOutcome {
    Finished(RunTrace),
    Diverged { step: usize },
    Skipped,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentOutcome {
    pub curves_path: PathBuf,
    pub final_path: PathBuf,
    pub manifest_path: PathBuf,
    pub cells_run: usize,
    pub cells_skipped: usize,
    pub cells_diverged: usize,
    /// Final parameters of every finished cell, in sweep order.
    pub models: Vec<(Cell, ModelParams)>,
}

impl ExperimentOutcome {
    /// 0 when every cell finished, 3 when some were skipped or diverged.
    pub fn exit_code(&self) -> i32 {
        if self.cells_skipped + self.cells_diverged > 0 {
            3
        } else {
            0
        }
    }
}

/// Cells in sweep order: algorithm, then k, then epsilon, then repeat.
pub fn cells(spec: &ExperimentSpec) -> Vec<Cell> {
    let mut out = Vec::new();
    for &algorithm in &spec.algorithms {
        for &k in &spec.k_list {
            for epsilon in spec.epsilons() {
                for repeat in 0..spec.repeats {
                    out.push(Cell { algorithm, k, epsilon, repeat });
                }
            }
        }
    }
    out
}

fn pool(threads: Option<usize>) -> Result<rayon::ThreadPool> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads.unwrap_or(0))
        .build()
        .map_err(|e| Error::Config(format!("worker pool: {e}")))
}

fn run_cell(spec: &ExperimentSpec, data: &[(Dataset, Dataset)], cell: &Cell) -> Result<CellOutcome> {
    if !spec.is_feasible(spec.n, cell.algorithm, cell.k) {
        log::warn!(
            "skipping {} k={} (fewer than k samples per step)",
            cell.algorithm.name(),
            cell.k
        );
        return Ok(CellOutcome::Skipped);
    }
    let (train, test) = &data[cell.repeat];
    let cfg = spec.run_config(cell.algorithm, cell.k, cell.epsilon, cell.repeat);
    match run(train, test, &cfg) {
        Ok(trace) => Ok(CellOutcome::Finished(trace)),
        Err(Error::AtStep { step, source }) if source.is_divergence() => {
            log::warn!("{} k={} repeat={} diverged at step {step}", cell.algorithm.name(), cell.k, cell.repeat);
            Ok(CellOutcome::Diverged { step })
        }
        Err(e) => Err(e),
    }
}

/// Runs every cell of the sweep. Output rows are identical regardless of
/// thread count or which other cells are present.
pub fn run_cells(spec: &ExperimentSpec, cells: &[Cell]) -> Result<Vec<CellOutcome>> {
    spec.validate()?;
    let pool = pool(spec.threads)?;
    pool.install(|| {
        let data = (0..spec.repeats)
            .into_par_iter()
            .map(|r| spec.datasets(spec.n, r))
            .collect::<Result<Vec<_>>>()?;
        cells
            .par_iter()
            .map(|cell| run_cell(spec, &data, cell))
            .collect()
    })
}

fn fmt_eps(e: Option<f64>) -> String {
    e.map(|v| v.to_string()).unwrap_or_default()
}

pub fn curves_csv(cells: &[Cell], outcomes: &[CellOutcome]) -> String {
    let mut out = String::from("algorithm,k,epsilon,repeat,step,test_loss,diverged\n");
    for (cell, outcome) in cells.iter().zip(outcomes) {
        let prefix = format!(
            "{},{},{},{}",
            cell.algorithm.name(),
            cell.k,
            fmt_eps(cell.epsilon),
            cell.repeat
        );
        match outcome {
            CellOutcome::Finished(trace) => {
                for s in &trace.per_step {
                    out.push_str(&format!("{prefix},{},{},0\n", s.step, s.test_loss));
                }
            }
            CellOutcome::Diverged { step } => out.push_str(&format!("{prefix},{step},NaN,1\n")),
            CellOutcome::Skipped => {}
        }
    }
    out
}

/// Mean and standard error (sample standard deviation over `sqrt(r)`).
pub fn mean_stderr(values: &[f64]) -> (f64, f64) {
    let r = values.len() as f64;
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let mean = values.iter().sum::<f64>() / r;
    if values.len() == 1 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (r - 1.0);
    (mean, (var / r).sqrt())
}

pub fn final_csv(cells: &[Cell], outcomes: &[CellOutcome]) -> String {
    let mut out = String::from("algorithm,k,epsilon,repeats,mean_loss,stderr,diverged\n");
    let mut i = 0;
    while i < cells.len() {
        let head = cells[i];
        let mut j = i;
        let mut losses = Vec::new();
        let mut diverged = 0;
        let mut skipped = false;
        while j < cells.len()
            && cells[j].algorithm == head.algorithm
            && cells[j].k == head.k
            && cells[j].epsilon == head.epsilon
        {
            match &outcomes[j] {
                CellOutcome::Finished(t) => losses.push(t.final_loss()),
                CellOutcome::Diverged { .. } => diverged += 1,
                CellOutcome::Skipped => skipped = true,
            }
            j += 1;
        }
        if !skipped {
            let (mean, se) = mean_stderr(&losses);
            out.push_str(&format!(
                "{},{},{},{},{},{},{}\n",
                head.algorithm.name(),
                head.k,
                fmt_eps(head.epsilon),
                losses.len(),
                mean,
                se,
                diverged
            ));
        }
        i = j;
    }
    out
}

#[derive(Serialize)]
struct Manifest<'a> {
    spec: &'a ExperimentSpec,
    library_version: &'a str,
    cells_run: usize,
    cells_skipped: usize,
    cells_diverged: usize,
}

fn write_file(path: &Path, contents: &str) -> Result<()> {
    let mut f = fs::File::create(path)?;
    f.write_all(contents.as_bytes())?;
    Ok(())
}

/// Runs the full sweep and writes `<name>_curves.csv`, `<name>_final.csv`
/// and `<name>_manifest.json` into `spec.output_dir`.
pub fn run_experiment(spec: &ExperimentSpec) -> Result<ExperimentOutcome> {
    spec.validate()?;
    let cells = cells(spec);
    let outcomes = run_cells(spec, &cells)?;
    let count = |f: fn(&CellOutcome) -> bool| outcomes.iter().filter(|o| f(o)).count();
    let cells_run = count(|o| matches!(o, CellOutcome::Finished(_)));
    let cells_skipped = count(|o| matches!(o, CellOutcome::Skipped));
    let cells_diverged = count(|o| matches!(o, CellOutcome::Diverged { .. }));

    fs::create_dir_all(&spec.output_dir)?;
    let dir = &spec.output_dir;
    let curves_path = dir.join(format!("{}_curves.csv", spec.name));
    let final_path = dir.join(format!("{}_final.csv", spec.name));
    let manifest_path = dir.join(format!("{}_manifest.json", spec.name));
    write_file(&curves_path, &curves_csv(&cells, &outcomes))?;
    write_file(&final_path, &final_csv(&cells, &outcomes))?;
    let manifest = Manifest {
        spec,
        library_version: env!("CARGO_PKG_VERSION"),
        cells_run,
        cells_skipped,
        cells_diverged,
    };
    write_file(&manifest_path, &(serde_json::to_string_pretty(&manifest)? + "\n"))?;
    let models = cells
        .iter()
        .zip(&outcomes)
        .filter_map(|(c, o)| match o {
            CellOutcome::Finished(t) => Some((*c, t.final_theta.clone())),
            _ => None,
        })
        .collect();
    log::info!("{cells_run} cells finished, {cells_skipped} skipped, {cells_diverged} diverged");
    Ok(ExperimentOutcome {
        curves_path,
        final_path,
        manifest_path,
        cells_run,
        cells_skipped,
        cells_diverged,
        models,
    })
}

/// One row of the bag-size grid.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BagSizeRow {
    pub n: usize,
    pub k: usize,
    pub repeat: usize,
    pub priorboost_loss: f64,
    pub oneshot_loss: f64,
}

/// Final PriorBoost and OneShot losses for every `(n, k, repeat)`; writes
/// `<name>_bag_sizes.csv`. Infeasible `(n, k)` pairs are skipped.
pub fn run_bag_size_sweep(spec: &ExperimentSpec, n_list: &[usize]) -> Result<(PathBuf, Vec<BagSizeRow>, usize)> {
    spec.validate()?;
    if spec.task != Task::Logistic {
        return Err(Error::Config("bag-size sweeps use task = logistic".into()));
    }
    let epsilon = match spec.epsilon_list.as_deref() {
        None => None,
        Some([e]) => Some(*e),
        Some(_) => return Err(Error::Config("bag-size sweeps take a single epsilon".into())),
    };
    if n_list.is_empty() || n_list.contains(&0) {
        return Err(Error::Config("n_list must be nonempty with positive entries".into()));
    }
    let mut grid = Vec::new();
    for &n in n_list {
        for &k in &spec.k_list {
            for repeat in 0..spec.repeats {
                grid.push((n, k, repeat));
            }
        }
    }
    let pool = pool(spec.threads)?;
    let results: Vec<Option<BagSizeRow>> = pool.install(|| {
        grid.par_iter()
            .map(|&(n, k, repeat)| -> Result<Option<BagSizeRow>> {
                if !spec.is_feasible(n, Algorithm::PriorBoost, k) {
                    log::warn!("skipping n={n} k={k} (fewer than k samples per step)");
                    return Ok(None);
                }
                let sized = ExperimentSpec {
                    seed: derive_seed(spec.seed, &[n as u64]),
                    ..spec.clone()
                };
                let (train, test) = sized.datasets(n, repeat)?;
                let loss = |alg| -> Result<f64> {
                    Ok(run(&train, &test, &sized.run_config(alg, k, epsilon, repeat))?.final_loss())
                };
                Ok(Some(BagSizeRow {
                    n,
                    k,
                    repeat,
                    priorboost_loss: loss(Algorithm::PriorBoost)?,
                    oneshot_loss: loss(Algorithm::OneShot)?,
                }))
            })
            .collect::<Result<Vec<_>>>()
    })?;
    let skipped = results.iter().filter(|r| r.is_none()).count();
    let rows: Vec<BagSizeRow> = results.into_iter().flatten().collect();

    let mut csv = String::from("n,k,repeat,priorboost_loss,oneshot_loss\n");
    for r in &rows {
        csv.push_str(&format!("{},{},{},{},{}\n", r.n, r.k, r.repeat, r.priorboost_loss, r.oneshot_loss));
    }
    fs::create_dir_all(&spec.output_dir)?;
    let path = spec.output_dir.join(format!("{}_bag_sizes.csv", spec.name));
    write_file(&path, &csv)?;
    Ok((path, rows, skipped))
}
