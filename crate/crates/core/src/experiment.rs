//! Experiment orchestration: configuration, datasets on disk, training runs,
//! ensembles and persisted artifacts.
//!
//! An output directory holds
//!
//! ```text
//! dataset.csv               shared dataset (or dataset-seed{N}.csv per run)
//! model-seed{N}.json        trained parameters; byte-identical across reruns
//! history-seed{N}.csv       optimizer trace
//! run-seed{N}.json          run summary with evaluation and wall-clock time
//! ensemble.json             ensemble statistics
//! ```

use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::evaluate::{
    ensemble_report, evaluate_model, problem_grid, write_grid_csv, EnsembleReport, EvalError,
    EvalReport, GridEvaluation,
};
use crate::neuralnet::{NetworkSpec, ParameterVector};
use crate::optimize::{
    bfgs_minimize, lagrangian_descent, BfgsConfig, LagrangianConfig, OptimError, OptimOutcome,
    Termination,
};
use crate::problems::{Architecture, CollocationLoss, LossVariant, Model, Problem, ProblemError};
use crate::sampling::{Dataset, SamplingError};

pub const MODEL_FORMAT: &str = "pdenet-model/1";

#[derive(Debug, thiserror::Error)]
pub enum ExperimentError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("cannot parse {path}: {source}")]
    Parse {
        path: PathBuf,
        source: toml::de::Error,
    },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("dataset {0} not found (run `sample` first)")]
    MissingDataset(PathBuf),
    #[error("invalid model file {path}: {source}")]
    ModelFile {
        path: PathBuf,
        source: serde_json::Error,
    },
    #[error(transparent)]
    Sampling(#[from] SamplingError),
    #[error(transparent)]
    Problem(#[from] ProblemError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Optim(#[from] OptimError),
    #[error("numerical failure: {0}")]
    Numerical(String),
}

impl ExperimentError {
    /// 2 for numerical failures, 1 for everything else.
    pub fn exit_code(&self) -> i32 {
        match self {
            ExperimentError::Numerical(_)
            | ExperimentError::Optim(OptimError::NonFiniteStart(_))
            | ExperimentError::Optim(OptimError::NotDescent(_))
            | ExperimentError::Eval(EvalError::NonFinite) => 2,
            _ => 1,
        }
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> ExperimentError + '_ {
    move |source| ExperimentError::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn default_width() -> usize {
    16
}

fn default_seeds() -> Vec<u64> {
    (42..=51).collect()
}

fn default_jobs() -> usize {
    1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArchitectureConfig {
    /// Hidden layers per network: `[n]` for Poisson, `[velocity, pressure]`
    /// for Kovasznay.
    pub hidden_layers: Vec<usize>,
    #[serde(default = "default_width")]
    pub width: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetConfig {
    pub interior: usize,
    pub boundary: usize,
    /// Seed of the shared dataset.
    #[serde(default)]
    pub seed: u64,
    /// Draw a fresh dataset for every run, seeded with the run seed.
    #[serde(default)]
    pub resample_per_run: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EnsembleConfig {
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    /// Members trained concurrently.
    #[serde(default = "default_jobs")]
    pub jobs: usize,
}

impl Default for EnsembleConfig {
    fn default() -> Self {
        Self {
            seeds: default_seeds(),
            jobs: default_jobs(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub name: String,
    pub problem: String,
    /// Defaults to `runs/<name>`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output_dir: Option<PathBuf>,
    pub loss: LossVariant,
    /// Replaces plain BFGS by the Lagrangian outer loop; requires the plain loss.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lagrangian: Option<LagrangianConfig>,
    pub architecture: ArchitectureConfig,
    pub dataset: DatasetConfig,
    #[serde(default)]
    pub ensemble: EnsembleConfig,
    #[serde(default)]
    pub bfgs: BfgsConfig,
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str, origin: &Path) -> Result<Self, ExperimentError> {
        toml::from_str(text).map_err(|source| ExperimentError::Parse {
            path: origin.to_path_buf(),
            source,
        })
    }

    pub fn load(path: &Path) -> Result<Self, ExperimentError> {
        let text = fs::read_to_string(path).map_err(io_err(path))?;
        Self::from_toml_str(&text, path)
    }

    pub fn architecture(&self, problem: &Problem) -> Result<Architecture, ExperimentError> {
        let a = &self.architecture;
        let arch = match (problem, a.hidden_layers.as_slice()) {
            (Problem::Poisson(_), &[h]) => Architecture::poisson(h, a.width),
            (Problem::Kovasznay(_), &[v, p]) => Architecture::kovasznay(v, p, a.width),
            _ => {
                return Err(ExperimentError::Config(format!(
                    "{} expects {} hidden_layers entries, got {:?}",
                    problem.id(),
                    problem.solution_components().min(2),
                    a.hidden_layers
                )))
            }
        };
        arch.validate_for(problem)?;
        Ok(arch)
    }

    fn validate(&self) -> Result<(Problem, Architecture), ExperimentError> {
        let problem = Problem::from_id(&self.problem)?;
        let arch = self.architecture(&problem)?;
        self.loss.validate()?;
        if self.loss.uses_corners() && matches!(problem, Problem::Kovasznay(_)) {
            return Err(ExperimentError::Config(format!(
                "loss {} is only defined for the Poisson problem",
                self.loss.label()
            )));
        }
        if let Some(lag) = &self.lagrangian {
            lag.validate()?;
            if self.loss != LossVariant::Plain {
                return Err(ExperimentError::Config(
                    "the lagrangian outer loop builds its own penalized loss; set loss.kind = \"plain\""
                        .into(),
                ));
            }
        }
        self.bfgs.validate()?;
        if self.dataset.interior == 0 || self.dataset.boundary == 0 {
            return Err(ExperimentError::Config(
                "dataset sizes must be positive".into(),
            ));
        }
        let seeds = &self.ensemble.seeds;
        if seeds.is_empty() {
            return Err(ExperimentError::Config("ensemble.seeds is empty".into()));
        }
        let mut sorted = seeds.clone();
        sorted.sort_unstable();
        sorted.dedup();
        if sorted.len() != seeds.len() {
            return Err(ExperimentError::Config(
                "ensemble seeds must be distinct".into(),
            ));
        }
        if self.ensemble.jobs == 0 {
            return Err(ExperimentError::Config("ensemble.jobs must be >= 1".into()));
        }
        Ok((problem, arch))
    }
}

/// Persisted trained model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelFile {
    pub format: String,
    pub problem: String,
    pub loss: LossVariant,
    pub networks: Vec<NetworkSpec>,
    pub seed: u64,
    pub dataset_seed: u64,
    pub iterations: usize,
    pub termination: Termination,
    pub final_loss: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lambda_history: Option<Vec<f64>>,
    pub theta: ParameterVector,
}

impl ModelFile {
    pub fn load(path: &Path) -> Result<Self, ExperimentError> {
        let file = File::open(path).map_err(io_err(path))?;
        let model: Self = serde_json::from_reader(BufReader::new(file)).map_err(|source| {
            ExperimentError::ModelFile {
                path: path.to_path_buf(),
                source,
            }
        })?;
        if model.format != MODEL_FORMAT {
            return Err(ExperimentError::Config(format!(
                "{}: unsupported model format {:?}",
                path.display(),
                model.format
            )));
        }
        Ok(model)
    }

    pub fn save(&self, path: &Path) -> Result<(), ExperimentError> {
        write_json(path, self)
    }

    pub fn problem(&self) -> Result<Problem, ExperimentError> {
        Ok(Problem::from_id(&self.problem)?)
    }

    pub fn model(&self) -> Result<Model, ExperimentError> {
        let architecture = Architecture {
            networks: self.networks.clone(),
        };
        architecture.validate_for(&self.problem()?)?;
        Model::new(architecture, self.theta.clone())
            .map_err(|e| ExperimentError::Problem(ProblemError::Net(e)))
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), ExperimentError> {
    let file = File::create(path).map_err(io_err(path))?;
    let mut out = BufWriter::new(file);
    serde_json::to_writer_pretty(&mut out, value).map_err(|e| ExperimentError::Io {
        path: path.to_path_buf(),
        source: e.into(),
    })?;
    writeln!(out).map_err(io_err(path))?;
    out.flush().map_err(io_err(path))
}

/// Summary of one training run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunArtifact {
    pub name: String,
    pub seed: u64,
    pub model_file: PathBuf,
    pub history_file: PathBuf,
    pub iterations: usize,
    pub evaluations: usize,
    pub termination: Termination,
    pub initial_loss: f64,
    pub final_loss: f64,
    pub final_grad_norm: f64,
    pub report: EvalReport,
    pub wall_clock_seconds: f64,
    pub config: ExperimentConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MemberFailure {
    pub seed: u64,
    pub error: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnsembleSummary {
    pub name: String,
    /// Seeds of the members included in `report`, in order.
    pub seeds: Vec<u64>,
    pub model_files: Vec<PathBuf>,
    pub failures: Vec<MemberFailure>,
    pub report: EnsembleReport,
    pub wall_clock_seconds: f64,
}

/// A validated configuration bound to an output directory.
#[derive(Debug, Clone)]
pub struct Experiment {
    pub config: ExperimentConfig,
    pub problem: Problem,
    pub architecture: Architecture,
    pub out_dir: PathBuf,
}

impl Experiment {
    pub fn new(config: ExperimentConfig, out_override: Option<PathBuf>) -> Result<Self, ExperimentError> {
        let (problem, architecture) = config.validate()?;
        let out_dir = out_override
            .or_else(|| config.output_dir.clone())
            .unwrap_or_else(|| Path::new("runs").join(&config.name));
        Ok(Self {
            config,
            problem,
            architecture,
            out_dir,
        })
    }

    pub fn from_file(path: &Path, out_override: Option<PathBuf>) -> Result<Self, ExperimentError> {
        Self::new(ExperimentConfig::load(path)?, out_override)
    }

    fn dataset_seed(&self, run_seed: u64) -> u64 {
        if self.config.dataset.resample_per_run {
            run_seed
        } else {
            self.config.dataset.seed
        }
    }

    pub fn dataset_path(&self, run_seed: u64) -> PathBuf {
        if self.config.dataset.resample_per_run {
            self.out_dir.join(format!("dataset-seed{run_seed}.csv"))
        } else {
            self.out_dir.join("dataset.csv")
        }
    }

    pub fn model_path(&self, seed: u64) -> PathBuf {
        self.out_dir.join(format!("model-seed{seed}.json"))
    }

    fn ensure_out_dir(&self) -> Result<(), ExperimentError> {
        fs::create_dir_all(&self.out_dir).map_err(io_err(&self.out_dir))
    }

    /// Writes the dataset(s) used by the given run seeds; identical inputs
    /// give identical files.
    pub fn sample(&self, run_seeds: &[u64]) -> Result<Vec<PathBuf>, ExperimentError> {
        self.ensure_out_dir()?;
        let mut written: Vec<PathBuf> = Vec::new();
        for &seed in run_seeds {
            let path = self.dataset_path(seed);
            if written.contains(&path) {
                continue;
            }
            let ds_seed = self.dataset_seed(seed);
            let dataset = Dataset::generate(
                self.problem.domain(),
                self.config.dataset.interior,
                self.config.dataset.boundary,
                ds_seed,
                self.config.loss.uses_corners(),
                format!("{}-seed{ds_seed}", self.config.name),
            )?;
            let file = File::create(&path).map_err(io_err(&path))?;
            let mut out = BufWriter::new(file);
            dataset.write_csv(&mut out)?;
            out.flush().map_err(io_err(&path))?;
            log::info!("wrote {}", path.display());
            written.push(path);
        }
        Ok(written)
    }

    pub fn load_dataset(&self, run_seed: u64) -> Result<Dataset, ExperimentError> {
        let path = self.dataset_path(run_seed);
        if !path.exists() {
            return Err(ExperimentError::MissingDataset(path));
        }
        let file = File::open(&path).map_err(io_err(&path))?;
        let dataset = Dataset::read_csv(BufReader::new(file))?;
        if self.config.loss.uses_corners() && dataset.corners.is_empty() {
            return Err(ExperimentError::Config(format!(
                "{} has no corner points but the loss needs them; re-run `sample`",
                path.display()
            )));
        }
        Ok(dataset)
    }

    /// Trains the model for `seed` on its dataset and writes the model
    /// file, history and run summary.
    pub fn train(&self, seed: u64) -> Result<RunArtifact, ExperimentError> {
        let dataset = self.load_dataset(seed)?;
        self.ensure_out_dir()?;
        let started = Instant::now();
        log::info!("{}: training seed {seed}", self.config.name);

        let loss = CollocationLoss::new(&self.problem, self.config.loss, &dataset, &self.architecture)?;
        let theta0 = self.architecture.init_xavier(seed);
        let (theta, trace) = match &self.config.lagrangian {
            None => {
                let out = bfgs_minimize(&loss, &theta0.0, &self.config.bfgs)?;
                (out.theta.clone(), Trace::Bfgs(out))
            }
            Some(lag) => {
                let out = lagrangian_descent(&loss, &theta0.0, lag, &self.config.bfgs)?;
                (out.theta.clone(), Trace::Lagrangian(out))
            }
        };

        let model_file = ModelFile {
            format: MODEL_FORMAT.to_string(),
            problem: self.problem.id().to_string(),
            loss: self.config.loss,
            networks: self.architecture.networks.clone(),
            seed,
            dataset_seed: self.dataset_seed(seed),
            iterations: trace.iterations(),
            termination: trace.termination(),
            final_loss: trace.final_loss(),
            lambda_history: trace.lambda_history(),
            theta: ParameterVector(theta),
        };
        let model_path = self.model_path(seed);
        model_file.save(&model_path)?;
        let history_path = self.out_dir.join(format!("history-seed{seed}.csv"));
        trace.write_history(&history_path)?;

        let model = model_file.model()?;
        let report = evaluate_model(&self.problem, &model, &problem_grid(&self.problem)?, false)?;
        let artifact = RunArtifact {
            name: self.config.name.clone(),
            seed,
            model_file: model_path,
            history_file: history_path,
            iterations: model_file.iterations,
            evaluations: trace.evaluations(),
            termination: model_file.termination,
            initial_loss: trace.initial_loss(),
            final_loss: model_file.final_loss,
            final_grad_norm: trace.final_grad_norm(),
            report,
            wall_clock_seconds: started.elapsed().as_secs_f64(),
            config: self.config.clone(),
        };
        write_json(&self.out_dir.join(format!("run-seed{seed}.json")), &artifact)?;
        log::info!(
            "{}: seed {seed} done after {} iterations ({}), error {:.3e}",
            self.config.name,
            artifact.iterations,
            artifact.termination.as_str(),
            artifact.report.fd_solution_error
        );
        Ok(artifact)
    }

    /// Trains every ensemble seed on a pool of `jobs` workers (the config
    /// value when `None`) and writes `ensemble.json`.
    pub fn ensemble(&self, jobs: Option<usize>) -> Result<EnsembleSummary, ExperimentError> {
        let seeds = self.config.ensemble.seeds.clone();
        let missing: Vec<u64> = seeds
            .iter()
            .copied()
            .filter(|&s| !self.dataset_path(s).exists())
            .collect();
        self.sample(&missing)?;
        let started = Instant::now();
        let jobs = jobs.unwrap_or(self.config.ensemble.jobs).max(1);
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(jobs)
            .build()
            .map_err(|e| ExperimentError::Config(format!("cannot start worker pool: {e}")))?;
        let results: Vec<(u64, Result<RunArtifact, ExperimentError>)> =
            pool.install(|| seeds.par_iter().map(|&s| (s, self.train(s))).collect());

        let mut ok_seeds = Vec::new();
        let mut model_files = Vec::new();
        let mut failures = Vec::new();
        for (seed, result) in results {
            match result {
                Ok(artifact) if artifact.termination != Termination::NonFinite => {
                    ok_seeds.push(seed);
                    model_files.push(artifact.model_file);
                }
                Ok(_) => failures.push(MemberFailure {
                    seed,
                    error: "optimizer produced non-finite values".into(),
                }),
                Err(e) => {
                    log::warn!("{}: seed {seed} failed: {e}", self.config.name);
                    failures.push(MemberFailure {
                        seed,
                        error: e.to_string(),
                    });
                }
            }
        }
        if model_files.is_empty() {
            return Err(ExperimentError::Numerical(format!(
                "all {} ensemble members failed",
                seeds.len()
            )));
        }
        let report = evaluate_model_files(&model_files)?;
        let summary = EnsembleSummary {
            name: self.config.name.clone(),
            seeds: ok_seeds,
            model_files,
            failures,
            report,
            wall_clock_seconds: started.elapsed().as_secs_f64(),
        };
        write_json(&self.out_dir.join("ensemble.json"), &summary)?;
        Ok(summary)
    }
}

enum Trace {
    Bfgs(OptimOutcome),
    Lagrangian(crate::optimize::LagrangianOutcome),
}

impl Trace {
    fn last(&self) -> &OptimOutcome {
        match self {
            Trace::Bfgs(o) => o,
            Trace::Lagrangian(l) => l.inner.last().expect("at least one outer iteration"),
        }
    }

    fn first(&self) -> &OptimOutcome {
        match self {
            Trace::Bfgs(o) => o,
            Trace::Lagrangian(l) => &l.inner[0],
        }
    }

    fn iterations(&self) -> usize {
        match self {
            Trace::Bfgs(o) => o.iterations,
            Trace::Lagrangian(l) => l.iterations(),
        }
    }

    fn evaluations(&self) -> usize {
        match self {
            Trace::Bfgs(o) => o.evaluations,
            Trace::Lagrangian(l) => l.inner.iter().map(|o| o.evaluations).sum(),
        }
    }

    fn termination(&self) -> Termination {
        self.last().termination
    }

    fn final_loss(&self) -> f64 {
        self.last().final_loss()
    }

    fn initial_loss(&self) -> f64 {
        self.first().loss_history[0]
    }

    fn final_grad_norm(&self) -> f64 {
        self.last().final_grad_norm()
    }

    fn lambda_history(&self) -> Option<Vec<f64>> {
        match self {
            Trace::Bfgs(_) => None,
            Trace::Lagrangian(l) => Some(l.lambda_history.clone()),
        }
    }

    fn write_history(&self, path: &Path) -> Result<(), ExperimentError> {
        let file = File::create(path).map_err(io_err(path))?;
        let mut out = BufWriter::new(file);
        match self {
            Trace::Bfgs(o) => o.write_history_csv(&mut out).map_err(io_err(path))?,
            Trace::Lagrangian(l) => {
                writeln!(out, "outer,lambda,sqrt,iteration,loss,grad_norm,step").map_err(io_err(path))?;
                for (i, o) in l.inner.iter().enumerate() {
                    let (lam, sqrt) = (l.lambda_history[i], l.used_sqrt[i]);
                    writeln!(
                        out,
                        "{i},{lam:.16e},{sqrt},0,{:.16e},{:.16e},0",
                        o.loss_history[0], o.initial_grad_norm
                    )
                    .map_err(io_err(path))?;
                    for s in &o.steps {
                        writeln!(
                            out,
                            "{i},{lam:.16e},{sqrt},{},{:.16e},{:.16e},{:.16e}",
                            s.iteration, s.loss, s.grad_norm, s.step
                        )
                        .map_err(io_err(path))?;
                    }
                }
            }
        }
        out.flush().map_err(io_err(path))
    }
}

/// Ensemble statistics recomputed from persisted model files, which must all
/// belong to the same problem.
pub fn evaluate_model_files(paths: &[PathBuf]) -> Result<EnsembleReport, ExperimentError> {
    let files = paths
        .iter()
        .map(|p| ModelFile::load(p))
        .collect::<Result<Vec<_>, _>>()?;
    let first = files
        .first()
        .ok_or_else(|| ExperimentError::Config("no model files given".into()))?;
    if let Some(other) = files.iter().find(|f| f.problem != first.problem) {
        return Err(ExperimentError::Config(format!(
            "model files mix problems {} and {}",
            first.problem, other.problem
        )));
    }
    let problem = first.problem()?;
    let grid = problem_grid(&problem)?;
    let evals = files
        .iter()
        .map(|f| Ok(GridEvaluation::compute(&problem, &f.model()?, &grid)?))
        .collect::<Result<Vec<_>, ExperimentError>>()?;
    Ok(ensemble_report(&problem, &evals)?)
}

/// Writes `<stem>-error.csv` (`|u - û|`, Euclidean over components) and
/// `<stem>-residual.csv` (Euclidean norm of the pointwise residual vector)
/// on the problem's measurement grid.
pub fn export_grid(model_path: &Path, out_dir: &Path) -> Result<(PathBuf, PathBuf), ExperimentError> {
    let file = ModelFile::load(model_path)?;
    let problem = file.problem()?;
    let grid = problem_grid(&problem)?;
    let eval = GridEvaluation::compute(&problem, &file.model()?, &grid)?;
    let errors: Vec<f64> = eval
        .exact
        .iter()
        .zip(&eval.predicted)
        .map(|(e, p)| e.iter().zip(p).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt())
        .collect();
    let residuals: Vec<f64> = eval
        .residuals
        .iter()
        .map(|r| r.iter().map(|v| v * v).sum::<f64>().sqrt())
        .collect();
    fs::create_dir_all(out_dir).map_err(io_err(out_dir))?;
    let stem = model_path
        .file_stem()
        .and_then(|s| s.to_str())
        .unwrap_or("model");
    let mut written = Vec::new();
    for (suffix, values) in [("error", &errors), ("residual", &residuals)] {
        let path = out_dir.join(format!("{stem}-{suffix}.csv"));
        let f = File::create(&path).map_err(io_err(&path))?;
        let mut out = BufWriter::new(f);
        write_grid_csv(&eval.points, values, &mut out)?;
        out.flush().map_err(io_err(&path))?;
        written.push(path);
    }
    let residual = written.pop().expect("two files");
    let error = written.pop().expect("two files");
    Ok((error, residual))
}
