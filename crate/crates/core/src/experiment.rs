//! Multi-trial experiments described by a TOML file.
//!
//! Trial `i` splits the data with `seed + i` and initializes its network with
//! `seed + 10000 + i`. Trials run on a rayon pool; outputs are written after
//! all trials finish, in trial order, so reruns produce identical files.

use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::data::{load_csv, read_binary, synth_graded_features, synth_overfit_prone, synth_planted_features, Dataset};
use crate::error::{Error, Result};
use crate::fselect::{prepare_trial, select_logged, Protocol, SelectionRequest, SelectionResult, DEFAULT_BUDGET, DEFAULT_LAMBDA0};
use crate::mask::MaskHyper;
use crate::metrics::TrialAggregate;
use crate::nn::gradcheck::{gradcheck_suite, SuiteReport};
use crate::nn::{Activation, LossKind, MlpSpec};
use crate::train::{build_network, train, weight_norm_report, write_metrics_csv, EpochMetrics, EvalSets, Regularizer, TrainConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    Sparsify,
    SelectFeatures,
    RegularizeCompare,
}

impl Task {
    pub fn name(self) -> &'static str {
        match self {
            Task::Sparsify => "sparsify",
            Task::SelectFeatures => "select_features",
            Task::RegularizeCompare => "regularize_compare",
        }
    }

    pub fn default_trials(self) -> usize {
        match self {
            Task::Sparsify => 4,
            Task::SelectFeatures | Task::RegularizeCompare => 8,
        }
    }

    pub fn default_train(self) -> TrainConfig {
        match self {
            Task::Sparsify => TrainConfig {
                regularizer: Regularizer::BinMask { lambda: 1e-4 },
                ..TrainConfig::default()
            },
            Task::SelectFeatures => TrainConfig {
                mask: MaskHyper::feature_selection(),
                ..TrainConfig::default()
            },
            Task::RegularizeCompare => TrainConfig::adamw_tabular(),
        }
    }

    pub fn default_protocol(self) -> Protocol {
        match self {
            Task::Sparsify => Protocol {
                min_batches: 1,
                ..Protocol::default()
            },
            Task::SelectFeatures => Protocol::default(),
            Task::RegularizeCompare => Protocol {
                test_fraction: 0.15,
                validation_fraction: 0.10,
                min_batches: 30,
            },
        }
    }
}

fn default_true() -> bool {
    true
}

fn default_sparse_rate() -> f64 {
    0.94
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DataSource {
    Planted {
        n: usize,
        d: usize,
        k: usize,
        #[serde(default)]
        noise: f64,
    },
    Graded {
        n: usize,
        d: usize,
        decay: f64,
        #[serde(default)]
        noise: f64,
    },
    OverfitProne {
        n: usize,
        d: usize,
        #[serde(default = "default_sparse_rate")]
        sparse_rate: f64,
    },
    /// Labels default to the last column.
    Csv {
        path: PathBuf,
        #[serde(default)]
        label_column: Option<usize>,
        #[serde(default = "default_true")]
        header: bool,
    },
    Binary {
        path: PathBuf,
    },
}

impl DataSource {
    /// Synthetic sources are generated from `seed`.
    pub fn load(&self, seed: u64) -> Result<Dataset> {
        match self {
            DataSource::Planted { n, d, k, noise } => synth_planted_features(*n, *d, *k, *noise, seed),
            DataSource::Graded { n, d, decay, noise } => synth_graded_features(*n, *d, *decay, *noise, seed),
            DataSource::OverfitProne { n, d, sparse_rate } => synth_overfit_prone(*n, *d, *sparse_rate, seed),
            DataSource::Csv {
                path,
                label_column,
                header,
            } => load_csv(path, *label_column, *header),
            DataSource::Binary { path } => read_binary(path),
        }
    }

    fn rebase(&mut self, dir: &Path) {
        if let DataSource::Csv { path, .. } | DataSource::Binary { path } = self {
            if path.is_relative() {
                *path = dir.join(&*path);
            }
        }
    }
}

/// Hidden layers of the MLP; input and output widths come from the data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NetworkConfig {
    pub hidden: Vec<usize>,
    pub activation: Activation,
    pub batch_norm: bool,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        Self {
            hidden: vec![64, 20],
            activation: Activation::Tanh,
            batch_norm: false,
        }
    }
}

impl NetworkConfig {
    pub fn mlp(&self, data: &Dataset, loss: LossKind) -> MlpSpec {
        MlpSpec {
            input_dim: data.n_features(),
            hidden: self.hidden.clone(),
            output_dim: match loss {
                LossKind::SigmoidBce => 1,
                LossKind::SoftmaxCrossEntropy => data.n_classes(),
            },
            activation: self.activation,
            batch_norm: self.batch_norm,
            dropout: None,
        }
    }
}

/// Either `lambda` or `k`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SelectConfig {
    #[serde(default)]
    pub lambda: Option<f64>,
    #[serde(default)]
    pub k: Option<usize>,
    #[serde(default = "default_lambda0")]
    pub lambda0: f64,
    #[serde(default = "default_budget")]
    pub budget: usize,
    /// Retrain an unmasked network on the selected features and report its test metrics.
    #[serde(default = "default_true")]
    pub retrain: bool,
}

fn default_lambda0() -> f64 {
    DEFAULT_LAMBDA0
}

fn default_budget() -> usize {
    DEFAULT_BUDGET
}

impl SelectConfig {
    pub fn request(&self) -> Result<SelectionRequest> {
        match (self.lambda, self.k) {
            (Some(l), None) if l >= 0.0 => Ok(SelectionRequest::Lambda(l)),
            (Some(l), None) => Err(Error::Config(format!("select.lambda: must be non-negative, got {l}"))),
            (None, Some(k)) if k > 0 && self.lambda0 > 0.0 && self.budget > 0 => Ok(SelectionRequest::Count {
                k,
                lambda0: self.lambda0,
                budget: self.budget,
            }),
            (None, Some(_)) => Err(Error::Config(
                "select: k, lambda0 and budget must all be positive".into(),
            )),
            _ => Err(Error::Config("select: set exactly one of `lambda` and `k`".into())),
        }
    }
}

/// Penalty strengths to compare. Every value becomes one arm.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RegularizeGrid {
    /// Include an arm with no regularizer and no weight decay.
    pub baseline: bool,
    pub binmask: Vec<f64>,
    pub l1: Vec<f64>,
    pub l2: Vec<f64>,
    pub dropout: Vec<f64>,
}

impl Default for RegularizeGrid {
    fn default() -> Self {
        Self {
            baseline: true,
            binmask: vec![3e-4, 1e-3, 3e-3],
            l1: vec![3e-4, 1e-3, 3e-3],
            l2: Vec::new(),
            dropout: vec![0.5],
        }
    }
}

/// One configuration of the regularization comparison.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Arm {
    pub name: String,
    /// `none`, `binmask`, `l1`, `l2` or `dropout`.
    pub method: String,
    pub regularizer: Regularizer,
}

impl RegularizeGrid {
    pub fn arms(&self) -> Vec<Arm> {
        let mut out = Vec::new();
        if self.baseline {
            out.push(Arm {
                name: "none".into(),
                method: "none".into(),
                regularizer: Regularizer::None,
            });
        }
        type Group<'a> = (&'a str, &'a [f64], fn(f64) -> Regularizer);
        let groups: [Group; 4] = [
            ("binmask", &self.binmask, |lambda| Regularizer::BinMask { lambda }),
            ("l1", &self.l1, |lambda| Regularizer::L1 { lambda }),
            ("l2", &self.l2, |lambda| Regularizer::L2 { lambda }),
            ("dropout", &self.dropout, |p| Regularizer::Dropout { p }),
        ];
        for (method, values, make) in groups {
            for &v in values {
                out.push(Arm {
                    name: format!("{method}_{v}"),
                    method: method.into(),
                    regularizer: make(v),
                });
            }
        }
        out
    }
}

/// The experiment file. `train` and `protocol` overlay the task defaults key by key.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default)]
    pub task: Option<Task>,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub trials: Option<usize>,
    pub data: DataSource,
    #[serde(default)]
    pub network: NetworkConfig,
    #[serde(default)]
    pub train: Option<toml::Table>,
    #[serde(default)]
    pub protocol: Option<toml::Table>,
    #[serde(default)]
    pub select: Option<SelectConfig>,
    #[serde(default)]
    pub regularize: Option<RegularizeGrid>,
    #[serde(default)]
    pub out: Option<PathBuf>,
}

fn overlay<T: Clone + Serialize + DeserializeOwned>(base: &T, table: Option<&toml::Table>, section: &str) -> Result<T> {
    let Some(table) = table else {
        return Ok(base.clone());
    };
    let mut merged = toml::Table::try_from(base).map_err(|e| Error::Config(format!("{section}: {e}")))?;
    for (k, v) in table {
        merged.insert(k.clone(), v.clone());
    }
    toml::Value::Table(merged)
        .try_into()
        .map_err(|e| Error::Config(format!("{section}: {e}")))
}

impl ExperimentConfig {
    pub fn from_toml_str(s: &str) -> Result<Self> {
        toml::from_str(s).map_err(|e| Error::Config(e.to_string()))
    }

    /// Reads a config file; relative paths in it are taken from its directory.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Self::from_toml_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        if let Some(dir) = path.parent() {
            cfg.data.rebase(dir);
            if let Some(out) = cfg.out.as_mut().filter(|o| o.is_relative()) {
                *out = dir.join(&*out);
            }
        }
        Ok(cfg)
    }

    pub fn task(&self) -> Result<Task> {
        self.task.ok_or_else(|| Error::Config("task: missing".into()))
    }

    pub fn trials(&self) -> Result<usize> {
        Ok(self.trials.unwrap_or(self.task()?.default_trials()))
    }

    pub fn train_config(&self) -> Result<TrainConfig> {
        let cfg = overlay(&self.task()?.default_train(), self.train.as_ref(), "train")?;
        cfg.validate().map_err(|e| Error::Config(format!("train: {e}")))?;
        Ok(cfg)
    }

    pub fn protocol(&self) -> Result<Protocol> {
        overlay(&self.task()?.default_protocol(), self.protocol.as_ref(), "protocol")
    }

    pub fn validate(&self) -> Result<()> {
        let task = self.task()?;
        if self.trials()? == 0 {
            return Err(Error::Config("trials: must be at least 1".into()));
        }
        if self.network.hidden.contains(&0) {
            return Err(Error::Config("network.hidden: widths must be positive".into()));
        }
        let train = self.train_config()?;
        let p = self.protocol()?;
        if p.min_batches == 0 {
            return Err(Error::Config("protocol.min_batches: must be at least 1".into()));
        }
        match task {
            Task::Sparsify | Task::RegularizeCompare if self.select.is_some() => {
                return Err(Error::Config("select: only valid for select_features".into()));
            }
            Task::Sparsify | Task::SelectFeatures if self.regularize.is_some() => {
                return Err(Error::Config("regularize: only valid for regularize_compare".into()));
            }
            Task::SelectFeatures => {
                self.select
                    .as_ref()
                    .ok_or_else(|| Error::Config("select: missing".into()))?
                    .request()?;
            }
            Task::RegularizeCompare => {
                if self.grid().arms().is_empty() {
                    return Err(Error::Config("regularize: no arms to compare".into()));
                }
                if train.early_stopping && p.validation_fraction == 0.0 {
                    return Err(Error::Config(
                        "protocol.validation_fraction: early stopping needs a validation split".into(),
                    ));
                }
            }
            Task::Sparsify => {}
        }
        if train.early_stopping && task != Task::RegularizeCompare && p.validation_fraction == 0.0 {
            return Err(Error::Config(
                "protocol.validation_fraction: early stopping needs a validation split".into(),
            ));
        }
        Ok(())
    }

    fn grid(&self) -> RegularizeGrid {
        self.regularize.clone().unwrap_or_default()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialFailure {
    pub trial: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub arm: Option<String>,
    pub error: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialSelection {
    pub trial: usize,
    pub result: SelectionResult,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArmSummary {
    #[serde(flatten)]
    pub arm: Arm,
    pub aggregates: Vec<TrialAggregate>,
}

impl ArmSummary {
    pub fn mean(&self, metric: &str) -> Option<f64> {
        self.aggregates.iter().find(|a| a.metric == metric).map(|a| a.mean)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub task: Task,
    pub seed: u64,
    pub trials: usize,
    /// Some trial failed; aggregates cover the rest.
    pub partial: bool,
    pub failures: Vec<TrialFailure>,
    pub aggregates: Vec<TrialAggregate>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub selection: Option<Vec<TrialSelection>>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub arms: Vec<ArmSummary>,
    /// Per method, the arm with the highest mean validation AUC.
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub best_by_validation: BTreeMap<String, String>,
}

impl Summary {
    pub fn aggregate(&self, metric: &str) -> Option<&TrialAggregate> {
        self.aggregates.iter().find(|a| a.metric == metric)
    }

    pub fn arm(&self, name: &str) -> Option<&ArmSummary> {
        self.arms.iter().find(|a| a.arm.name == name)
    }
}

struct TrialOutput {
    metrics: Vec<EpochMetrics>,
    values: Vec<(&'static str, f64)>,
    selection: Option<SelectionResult>,
}

struct Job {
    trial: usize,
    arm: Option<Arm>,
}

struct Context {
    data: Dataset,
    task: Task,
    seed: u64,
    train: TrainConfig,
    protocol: Protocol,
    network: NetworkConfig,
    select: Option<SelectionRequest>,
    retrain: bool,
}

impl Context {
    fn run(&self, job: &Job) -> Result<TrialOutput> {
        let i = job.trial as u64;
        let (tr, va, te) = prepare_trial(&self.data, &self.protocol, self.seed + i, self.train.batch_size)?;
        let mut cfg = TrainConfig {
            seed: self.seed + 10_000 + i,
            ..self.train.clone()
        };
        let mlp = self.network.mlp(&self.data, cfg.loss);
        let eval = EvalSets {
            test: Some(&te),
            validation: va.as_ref(),
        };
        match self.task {
            Task::Sparsify => {
                let model = train(build_network(&mlp, &cfg)?, &tr, eval, &cfg)?;
                let ev = model.evaluate(&te)?;
                let last = model.metrics.last().expect("at least one epoch");
                let mut values = vec![
                    ("test_accuracy", ev.accuracy),
                    ("test_loss", ev.loss),
                    ("train_loss", last.train_loss),
                    ("weight_l0", weight_norm_report(&model)?.mean_l0),
                ];
                if let Some(s) = model.mask_state() {
                    values.push(("sparsity", s.sparsity()));
                }
                Ok(TrialOutput {
                    metrics: model.metrics,
                    values,
                    selection: None,
                })
            }
            Task::SelectFeatures => {
                let request = self.select.expect("validated");
                let (sel, metrics) = select_logged(&tr, &mlp, &cfg, request, eval)?;
                let mut values = vec![
                    ("n_selected", sel.selected.len() as f64),
                    ("lambda_star", sel.lambda_star),
                    ("search_steps", sel.search_steps as f64),
                    ("converged", f64::from(u8::from(sel.converged))),
                ];
                if self.retrain && !sel.selected.is_empty() {
                    let sub_tr = tr.select_features(&sel.selected)?;
                    let sub_te = te.select_features(&sel.selected)?;
                    let cfg = TrainConfig {
                        regularizer: Regularizer::None,
                        early_stopping: false,
                        ..cfg.clone()
                    };
                    let model = train(
                        build_network(&mlp.with_input_dim(sel.selected.len()), &cfg)?,
                        &sub_tr,
                        EvalSets::default(),
                        &cfg,
                    )?;
                    let ev = model.evaluate(&sub_te)?;
                    values.push(("retrained_test_accuracy", ev.accuracy));
                    values.push(("retrained_test_loss", ev.loss));
                }
                Ok(TrialOutput {
                    metrics,
                    values,
                    selection: Some(sel),
                })
            }
            Task::RegularizeCompare => {
                let arm = job.arm.as_ref().expect("comparison jobs carry an arm");
                cfg.regularizer = arm.regularizer;
                if arm.regularizer == Regularizer::None {
                    cfg.weight_decay = 0.0;
                }
                let model = train(build_network(&mlp, &cfg)?, &tr, eval, &cfg)?;
                let auc_of = |ds: &Dataset| -> Result<f64> {
                    model
                        .evaluate(ds)?
                        .auc
                        .ok_or_else(|| Error::Input("AUC needs two-class data with both classes present".into()))
                };
                let norms = weight_norm_report(&model)?;
                let mut values = vec![("test_auc", auc_of(&te)?), ("train_auc", auc_of(&tr)?)];
                if let Some(v) = &va {
                    values.push(("val_auc", auc_of(v)?));
                }
                values.extend([
                    ("weight_l0", norms.mean_l0),
                    ("weight_l1", norms.mean_l1),
                    ("weight_l2", norms.mean_l2),
                ]);
                Ok(TrialOutput {
                    metrics: model.metrics,
                    values,
                    selection: None,
                })
            }
        }
    }
}

fn aggregates(outputs: &[&TrialOutput]) -> Result<Vec<TrialAggregate>> {
    let Some(first) = outputs.first() else {
        return Ok(Vec::new());
    };
    let mut out = Vec::new();
    for (name, _) in &first.values {
        let vals: Vec<f64> = outputs
            .iter()
            .filter_map(|o| o.values.iter().find(|v| v.0 == *name).map(|v| v.1))
            .collect();
        out.push(TrialAggregate::new(*name, vals)?);
    }
    Ok(out)
}

fn pool(jobs: usize) -> Result<rayon::ThreadPool> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(jobs)
        .build()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))
}

fn write_csv(path: &Path, rows: &[EpochMetrics]) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let f = File::create(path).map_err(|e| Error::io(path, e))?;
    write_metrics_csv(BufWriter::new(f), rows).map_err(|e| Error::io(path, e))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let f = File::create(path).map_err(|e| Error::io(path, e))?;
    serde_json::to_writer_pretty(BufWriter::new(f), value)?;
    Ok(())
}

/// Runs every trial on up to `jobs` threads (0 = rayon's default) and writes
/// `trial_<i>.csv`, `summary.json` and, for feature selection,
/// `selection.json` under `out`. Comparison arms each get a subdirectory.
pub fn run_experiment(cfg: &ExperimentConfig, out: &Path, jobs: usize) -> Result<Summary> {
    cfg.validate()?;
    let task = cfg.task()?;
    let trials = cfg.trials()?;
    let select = cfg.select.as_ref().map(SelectConfig::request).transpose()?;
    let ctx = Context {
        data: cfg.data.load(cfg.seed)?,
        task,
        seed: cfg.seed,
        train: cfg.train_config()?,
        protocol: cfg.protocol()?,
        network: cfg.network.clone(),
        select,
        retrain: cfg.select.as_ref().is_none_or(|s| s.retrain),
    };
    let arms = if task == Task::RegularizeCompare { cfg.grid().arms() } else { Vec::new() };
    let jobs_list: Vec<Job> = if arms.is_empty() {
        (0..trials).map(|trial| Job { trial, arm: None }).collect()
    } else {
        arms.iter()
            .flat_map(|a| (0..trials).map(|trial| Job { trial, arm: Some(a.clone()) }))
            .collect()
    };

    let results: Vec<Result<TrialOutput>> = pool(jobs)?.install(|| jobs_list.par_iter().map(|j| ctx.run(j)).collect());

    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let mut failures = Vec::new();
    let mut ok: Vec<(&Job, TrialOutput)> = Vec::new();
    for (job, r) in jobs_list.iter().zip(results) {
        match r {
            Ok(o) => ok.push((job, o)),
            Err(e) => failures.push(TrialFailure {
                trial: job.trial,
                arm: job.arm.as_ref().map(|a| a.name.clone()),
                error: e.to_string(),
            }),
        }
    }
    for (job, o) in &ok {
        let file = format!("trial_{}.csv", job.trial);
        let path = match &job.arm {
            Some(a) => out.join(&a.name).join(file),
            None => out.join(file),
        };
        write_csv(&path, &o.metrics)?;
    }

    let mut summary = Summary {
        task,
        seed: cfg.seed,
        trials,
        partial: !failures.is_empty(),
        failures,
        aggregates: Vec::new(),
        selection: None,
        arms: Vec::new(),
        best_by_validation: BTreeMap::new(),
    };
    if arms.is_empty() {
        let outputs: Vec<&TrialOutput> = ok.iter().map(|(_, o)| o).collect();
        summary.aggregates = aggregates(&outputs)?;
        if task == Task::SelectFeatures {
            let sel: Vec<TrialSelection> = ok
                .iter()
                .filter_map(|(j, o)| {
                    o.selection.clone().map(|result| TrialSelection { trial: j.trial, result })
                })
                .collect();
            write_json(&out.join("selection.json"), &sel)?;
            summary.selection = Some(sel);
        }
    } else {
        for arm in &arms {
            let outputs: Vec<&TrialOutput> = ok
                .iter()
                .filter(|(j, _)| j.arm.as_ref().is_some_and(|a| a.name == arm.name))
                .map(|(_, o)| o)
                .collect();
            if outputs.is_empty() {
                continue;
            }
            summary.arms.push(ArmSummary {
                arm: arm.clone(),
                aggregates: aggregates(&outputs)?,
            });
        }
        for a in &summary.arms {
            let Some(v) = a.mean("val_auc") else { continue };
            let better = match summary.best_by_validation.get(&a.arm.method) {
                Some(name) => summary.arm(name).and_then(|b| b.mean("val_auc")).is_none_or(|b| v > b),
                None => true,
            };
            if better {
                summary.best_by_validation.insert(a.arm.method.clone(), a.arm.name.clone());
            }
        }
    }
    write_json(&out.join("summary.json"), &summary)?;
    Ok(summary)
}

/// Settings for the `gradcheck` task.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GradcheckConfig {
    pub cases: usize,
    pub seed: u64,
    pub rel_tol: f64,
    pub abs_floor: f64,
}

impl Default for GradcheckConfig {
    fn default() -> Self {
        Self {
            cases: 50,
            seed: 0,
            rel_tol: 1e-4,
            abs_floor: 1e-8,
        }
    }
}

impl GradcheckConfig {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }
}

/// Runs [`gradcheck_suite`] on up to `jobs` threads and writes
/// `gradcheck.json` under `out` when given.
pub fn run_gradcheck(cfg: &GradcheckConfig, out: Option<&Path>, jobs: usize) -> Result<SuiteReport> {
    let report = pool(jobs)?.install(|| gradcheck_suite(cfg.cases, cfg.seed, cfg.rel_tol, cfg.abs_floor))?;
    if let Some(dir) = out {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        write_json(&dir.join("gradcheck.json"), &report)?;
    }
    Ok(report)
}
