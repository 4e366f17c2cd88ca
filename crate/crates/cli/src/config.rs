//! Strict JSON experiment configuration.
//!
//! Top-level keys: `version`, `kind`, `seed`, `out_dir`, `task`, `solver`,
//! `outer`. Any other top-level key is treated as a task key, so
//! `{"kind": "diagnostic", "ds": [10], "N": 100}` is accepted. Unknown keys
//! anywhere are rejected.

use bilevel_kfac::bilevel::{InnerConfig, OuterLoopConfig};
use bilevel_kfac::curvature::PiConvention;
use bilevel_kfac::nn::Activation;
use bilevel_kfac::solvers::{NeumannScale, SolverSpec};
use bilevel_kfac::tasks::{DiagnosticConfig, DiagnosticMethod};
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use std::path::{Path, PathBuf};

pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Read { path: PathBuf, source: std::io::Error },
    #[error("malformed config: {0}")]
    Malformed(String),
    #[error("invalid value for {key}: must satisfy {constraint} (got {got})")]
    Range { key: String, constraint: String, got: String },
}

fn range(key: &str, constraint: &str, got: impl std::fmt::Display) -> ConfigError {
    ConfigError::Range {
        key: key.into(),
        constraint: constraint.into(),
        got: got.to_string(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Kind {
    Diagnostic,
    Hyperclean,
    #[serde(alias = "toy")]
    ToyQuadratic,
    #[serde(alias = "sweep")]
    BatchSweep,
}

impl Kind {
    pub fn name(self) -> &'static str {
        match self {
            Kind::Diagnostic => "diagnostic",
            Kind::Hyperclean => "hyperclean",
            Kind::ToyQuadratic => "toy-quadratic",
            Kind::BatchSweep => "batch-sweep",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Eta {
    Fixed(f64),
    Named(EtaName),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EtaName {
    Auto,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SolverKind {
    Exact,
    Cg,
    Neumann,
    Identity,
    Kfac,
    Ekfac,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SolverConfig {
    pub kind: SolverKind,
    #[serde(rename = "T", default = "d_cg_iters")]
    pub t: usize,
    #[serde(rename = "K", default = "d_neumann_terms")]
    pub k: usize,
    #[serde(default = "d_eta")]
    pub eta: Eta,
    #[serde(default = "d_solver_lambda")]
    pub lambda: f64,
    #[serde(default = "d_tol")]
    pub tol: f64,
    #[serde(default)]
    pub pi: PiConvention,
}

fn d_cg_iters() -> usize {
    10
}
fn d_neumann_terms() -> usize {
    10
}
fn d_eta() -> Eta {
    Eta::Named(EtaName::Auto)
}
fn d_solver_lambda() -> f64 {
    1e-3
}
fn d_tol() -> f64 {
    1e-10
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            kind: SolverKind::Kfac,
            t: d_cg_iters(),
            k: d_neumann_terms(),
            eta: d_eta(),
            lambda: d_solver_lambda(),
            tol: d_tol(),
            pi: PiConvention::Literal,
        }
    }
}

impl SolverConfig {
    pub fn spec(&self) -> SolverSpec {
        let lambda = self.lambda;
        match self.kind {
            SolverKind::Exact => SolverSpec::Exact { lambda },
            SolverKind::Cg => SolverSpec::Cg {
                iters: self.t,
                tol: self.tol,
                lambda,
            },
            SolverKind::Neumann => SolverSpec::Neumann {
                terms: self.k,
                eta: match self.eta {
                    Eta::Fixed(e) => NeumannScale::Fixed(e),
                    Eta::Named(EtaName::Auto) => NeumannScale::Auto,
                },
                lambda,
            },
            SolverKind::Identity => SolverSpec::Identity,
            SolverKind::Kfac => SolverSpec::Ikvp { lambda },
            SolverKind::Ekfac => SolverSpec::Ekfac { lambda },
        }
    }

    fn validate(&self, prefix: &str) -> Result<(), ConfigError> {
        let key = |k: &str| format!("{prefix}.{k}");
        if !(self.lambda >= 0.0) || !self.lambda.is_finite() {
            return Err(range(&key("lambda"), "lambda ≥ 0", self.lambda));
        }
        if self.t < 1 {
            return Err(range(&key("T"), "T ≥ 1", self.t));
        }
        if !(self.tol > 0.0) {
            return Err(range(&key("tol"), "tol > 0", self.tol));
        }
        if let Eta::Fixed(e) = self.eta {
            if !(e > 0.0) {
                return Err(range(&key("eta"), "eta > 0 or \"auto\"", e));
            }
        }
        if self.spec().needs_factors() && self.lambda == 0.0 {
            return Err(range(
                &key("lambda"),
                "lambda > 0 for Kronecker-factored solvers",
                self.lambda,
            ));
        }
        Ok(())
    }

    pub fn label(&self) -> String {
        self.spec().label()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OuterConfig {
    #[serde(default = "d_iters")]
    pub iters: usize,
    #[serde(default = "d_inner_steps")]
    pub inner_steps: usize,
    #[serde(default = "d_inner_lr")]
    pub inner_lr: f64,
    #[serde(default)]
    pub inner_momentum: f64,
    #[serde(default = "d_outer_lr")]
    pub outer_lr: f64,
    #[serde(default)]
    pub outer_momentum: f64,
    #[serde(default = "d_tau")]
    pub tau: usize,
    #[serde(default)]
    pub ema_beta: f64,
    #[serde(default = "d_true")]
    pub warm_start: bool,
    #[serde(default)]
    pub independent_batch: bool,
}

fn d_iters() -> usize {
    100
}
fn d_inner_steps() -> usize {
    10
}
fn d_inner_lr() -> f64 {
    0.1
}
fn d_outer_lr() -> f64 {
    1.0
}
fn d_tau() -> usize {
    1
}
fn d_true() -> bool {
    true
}

impl Default for OuterConfig {
    fn default() -> Self {
        serde_json::from_value(Value::Object(Map::new())).expect("all outer keys have defaults")
    }
}

impl OuterConfig {
    fn validate(&self) -> Result<(), ConfigError> {
        if !(self.inner_lr > 0.0) {
            return Err(range("outer.inner_lr", "inner_lr > 0", self.inner_lr));
        }
        if !(self.outer_lr > 0.0) {
            return Err(range("outer.outer_lr", "outer_lr > 0", self.outer_lr));
        }
        if !(0.0..1.0).contains(&self.inner_momentum) {
            return Err(range("outer.inner_momentum", "0 ≤ inner_momentum < 1", self.inner_momentum));
        }
        if !(0.0..1.0).contains(&self.outer_momentum) {
            return Err(range("outer.outer_momentum", "0 ≤ outer_momentum < 1", self.outer_momentum));
        }
        if self.tau < 1 {
            return Err(range("outer.tau", "tau ≥ 1", self.tau));
        }
        if !(0.0..1.0).contains(&self.ema_beta) {
            return Err(range("outer.ema_beta", "0 ≤ ema_beta < 1", self.ema_beta));
        }
        Ok(())
    }

    pub fn loop_config(&self, solver: &SolverConfig, batch_size: Option<usize>, seed: u64) -> OuterLoopConfig {
        OuterLoopConfig {
            outer_iters: self.iters,
            inner: InnerConfig {
                steps: self.inner_steps,
                lr: self.inner_lr,
                momentum: self.inner_momentum,
                batch_size,
            },
            outer_lr: self.outer_lr,
            outer_momentum: self.outer_momentum,
            solver: solver.spec(),
            tau: self.tau,
            ema_beta: self.ema_beta,
            pi_convention: solver.pi,
            seed,
            warm_start: self.warm_start,
            independent_curvature_batch: self.independent_batch,
            freeze_outer: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DiagnosticTask {
    #[serde(default = "d_ds")]
    pub ds: Vec<usize>,
    #[serde(rename = "N", default = "d_n")]
    pub n: usize,
    #[serde(default = "d_diag_lambda")]
    pub lambda: f64,
    #[serde(default = "d_num_seeds")]
    pub num_seeds: usize,
    #[serde(default = "d_methods")]
    pub methods: Vec<String>,
    #[serde(default = "d_one")]
    pub mc_samples: usize,
    #[serde(default = "d_cg_tol")]
    pub cg_tol: f64,
    #[serde(default = "d_eta")]
    pub neumann_eta: Eta,
    #[serde(default)]
    pub pi: PiConvention,
}

fn d_ds() -> Vec<usize> {
    vec![10, 100, 500]
}
fn d_n() -> usize {
    100
}
fn d_diag_lambda() -> f64 {
    1e-5
}
fn d_num_seeds() -> usize {
    5
}
fn d_methods() -> Vec<String> {
    DiagnosticMethod::standard().iter().map(|m| m.to_string()).collect()
}
fn d_one() -> usize {
    1
}
fn d_cg_tol() -> f64 {
    1e-14
}

impl DiagnosticTask {
    fn validate(&self) -> Result<(), ConfigError> {
        if self.n < 1 {
            return Err(range("N", "N ≥ 1", self.n));
        }
        if self.ds.is_empty() {
            return Err(range("ds", "at least one dimension", "[]"));
        }
        if let Some(&d) = self
            .ds
            .iter()
            .find(|&&d| !(1..=bilevel_kfac::tasks::MAX_DIAGNOSTIC_DIM).contains(&d))
        {
            return Err(range(
                "ds",
                &format!("1 ≤ d ≤ {}", bilevel_kfac::tasks::MAX_DIAGNOSTIC_DIM),
                d,
            ));
        }
        if !(self.lambda > 0.0) {
            return Err(range("lambda", "lambda > 0", self.lambda));
        }
        if self.num_seeds < 1 {
            return Err(range("num_seeds", "num_seeds ≥ 1", self.num_seeds));
        }
        if self.mc_samples < 1 {
            return Err(range("mc_samples", "mc_samples ≥ 1", self.mc_samples));
        }
        if !(self.cg_tol > 0.0) {
            return Err(range("cg_tol", "cg_tol > 0", self.cg_tol));
        }
        if let Eta::Fixed(e) = self.neumann_eta {
            if !(e > 0.0) {
                return Err(range("neumann_eta", "neumann_eta > 0 or \"auto\"", e));
            }
        }
        for m in &self.methods {
            m.parse::<DiagnosticMethod>().map_err(|_| {
                range(
                    "methods",
                    "known method label (Exact, KFAC, KFAC-exact, KFAC-damped, Neu-K, CG-T, Identity)",
                    m,
                )
            })?;
        }
        Ok(())
    }

    pub fn study_config(&self, seed: u64) -> DiagnosticConfig {
        DiagnosticConfig {
            ds: self.ds.clone(),
            n: self.n,
            lambda: self.lambda,
            seeds: (0..self.num_seeds as u64).map(|i| seed.wrapping_add(i)).collect(),
            methods: self.methods.iter().map(|m| m.parse().expect("validated")).collect(),
            mc_samples: self.mc_samples,
            cg_tol: self.cg_tol,
            neumann_eta: match self.neumann_eta {
                Eta::Fixed(e) => NeumannScale::Fixed(e),
                Eta::Named(EtaName::Auto) => NeumannScale::Auto,
            },
            pi_convention: self.pi,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DataSource {
    Synthetic,
    Idx,
    Tensor,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HypercleanTaskConfig {
    #[serde(default = "d_source")]
    pub source: DataSource,
    #[serde(default = "d_n_train")]
    pub n_train: usize,
    #[serde(default = "d_n_val")]
    pub n_val: usize,
    #[serde(default = "d_n_test")]
    pub n_test: usize,
    #[serde(default = "d_classes")]
    pub classes: usize,
    #[serde(default = "d_input_dim")]
    pub input_dim: usize,
    #[serde(default = "d_separation")]
    pub separation: f64,
    #[serde(default = "d_noise")]
    pub noise_ratio: f64,
    #[serde(default = "d_alpha")]
    pub alpha: f64,
    #[serde(default)]
    pub hidden: Vec<usize>,
    #[serde(default = "d_activation")]
    pub activation: Activation,
    #[serde(default)]
    pub batch_size: Option<usize>,
    #[serde(default = "d_init_lambda")]
    pub init_lambda: f64,
    #[serde(default = "d_true")]
    pub bias: bool,
    /// Train with all weights fixed at `init_lambda` (no outer updates).
    #[serde(default)]
    pub baseline: bool,
    #[serde(default)]
    pub idx_images: Option<PathBuf>,
    #[serde(default)]
    pub idx_labels: Option<PathBuf>,
    #[serde(default)]
    pub tensor_path: Option<PathBuf>,
    #[serde(default)]
    pub save_dataset: Option<PathBuf>,
}

fn d_source() -> DataSource {
    DataSource::Synthetic
}
fn d_n_train() -> usize {
    300
}
fn d_n_val() -> usize {
    300
}
fn d_n_test() -> usize {
    1000
}
fn d_classes() -> usize {
    3
}
fn d_input_dim() -> usize {
    5
}
fn d_separation() -> f64 {
    3.0
}
fn d_noise() -> f64 {
    0.5
}
fn d_alpha() -> f64 {
    1e-3
}
fn d_activation() -> Activation {
    Activation::Tanh
}
fn d_init_lambda() -> f64 {
    1.0
}

impl Default for HypercleanTaskConfig {
    fn default() -> Self {
        serde_json::from_value(Value::Object(Map::new())).expect("all hyperclean keys have defaults")
    }
}

impl HypercleanTaskConfig {
    fn validate(&self) -> Result<(), ConfigError> {
        if self.classes < 2 {
            return Err(range("classes", "classes ≥ 2", self.classes));
        }
        for (k, v) in [("n_train", self.n_train), ("n_val", self.n_val), ("n_test", self.n_test)] {
            if v < self.classes {
                return Err(range(k, &format!("{k} ≥ classes ({})", self.classes), v));
            }
        }
        if self.source == DataSource::Synthetic && self.input_dim < self.classes {
            return Err(range("input_dim", "input_dim ≥ classes", self.input_dim));
        }
        if !(self.separation >= 0.0) {
            return Err(range("separation", "separation ≥ 0", self.separation));
        }
        if !(0.0..=1.0).contains(&self.noise_ratio) {
            return Err(range("noise_ratio", "0 ≤ noise_ratio ≤ 1", self.noise_ratio));
        }
        if !(self.alpha >= 0.0) {
            return Err(range("alpha", "alpha ≥ 0", self.alpha));
        }
        if let Some(&h) = self.hidden.iter().find(|&&h| h == 0) {
            return Err(range("hidden", "every hidden width ≥ 1", h));
        }
        if self.batch_size == Some(0) {
            return Err(range("batch_size", "batch_size ≥ 1 or null", 0));
        }
        if !(0.0..=1.0).contains(&self.init_lambda) {
            return Err(range("init_lambda", "0 ≤ init_lambda ≤ 1", self.init_lambda));
        }
        match self.source {
            DataSource::Idx if self.idx_images.is_none() || self.idx_labels.is_none() => Err(range(
                "idx_images",
                "idx_images and idx_labels set when source = \"idx\"",
                "missing",
            )),
            DataSource::Tensor if self.tensor_path.is_none() => {
                Err(range("tensor_path", "tensor_path set when source = \"tensor\"", "missing"))
            }
            _ => Ok(()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ToyTask {
    /// Inner dimension; 1 gives the scalar toy `½(θ − λ)²`, `½θ²`.
    #[serde(default = "d_one")]
    pub d: usize,
    /// Outer dimension (ignored when `d = 1`).
    #[serde(default = "d_one")]
    pub m: usize,
    #[serde(default = "d_condition")]
    pub condition: f64,
    #[serde(default = "d_lambda0")]
    pub lambda0: f64,
}

fn d_condition() -> f64 {
    10.0
}
fn d_lambda0() -> f64 {
    2.0
}

impl ToyTask {
    fn validate(&self) -> Result<(), ConfigError> {
        if self.d < 1 {
            return Err(range("d", "d ≥ 1", self.d));
        }
        if self.m < 1 {
            return Err(range("m", "m ≥ 1", self.m));
        }
        if !(self.condition >= 1.0) {
            return Err(range("condition", "condition ≥ 1", self.condition));
        }
        if !self.lambda0.is_finite() {
            return Err(range("lambda0", "finite lambda0", self.lambda0));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepTask {
    /// `null` means full batch.
    #[serde(default = "d_batch_sizes")]
    pub batch_sizes: Vec<Option<usize>>,
    #[serde(default = "d_sweep_solvers")]
    pub solvers: Vec<SolverConfig>,
    #[serde(default = "d_sweep_seeds")]
    pub num_seeds: usize,
    #[serde(default)]
    pub hyperclean: HypercleanTaskConfig,
}

fn d_batch_sizes() -> Vec<Option<usize>> {
    vec![Some(16), Some(64), None]
}
fn d_sweep_solvers() -> Vec<SolverConfig> {
    vec![
        SolverConfig::default(),
        SolverConfig {
            kind: SolverKind::Cg,
            t: 3,
            ..SolverConfig::default()
        },
    ]
}
fn d_sweep_seeds() -> usize {
    3
}

impl SweepTask {
    fn validate(&self) -> Result<(), ConfigError> {
        if self.num_seeds < 1 {
            return Err(range("num_seeds", "num_seeds ≥ 1", self.num_seeds));
        }
        if self.batch_sizes.contains(&Some(0)) {
            return Err(range("batch_sizes", "every batch size ≥ 1 or null", 0));
        }
        for (i, s) in self.solvers.iter().enumerate() {
            s.validate(&format!("solvers[{i}]"))?;
        }
        self.hyperclean.validate()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum TaskConfig {
    Diagnostic(DiagnosticTask),
    Hyperclean(HypercleanTaskConfig),
    ToyQuadratic(ToyTask),
    BatchSweep(SweepTask),
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ExperimentConfig {
    pub version: u32,
    pub kind: Kind,
    pub seed: u64,
    pub out_dir: PathBuf,
    pub task: Value,
    pub solver: SolverConfig,
    pub outer: OuterConfig,
    #[serde(skip)]
    pub parsed_task: TaskConfig,
}

const TOP_LEVEL: &[&str] = &["version", "kind", "seed", "out_dir", "task", "solver", "outer"];

fn from_value<T: serde::de::DeserializeOwned>(v: Value, what: &str) -> Result<T, ConfigError> {
    serde_json::from_value(v).map_err(|e| ConfigError::Malformed(format!("{what}: {e}")))
}

impl ExperimentConfig {
    /// Parse a document; `kind_hint` fills in `kind` when the document has
    /// none and must agree with it otherwise.
    pub fn from_json_str(text: &str, kind_hint: Option<Kind>) -> Result<Self, ConfigError> {
        let doc: Value = serde_json::from_str(text).map_err(|e| ConfigError::Malformed(e.to_string()))?;
        Self::from_value(doc, kind_hint)
    }

    pub fn from_value(doc: Value, kind_hint: Option<Kind>) -> Result<Self, ConfigError> {
        let Value::Object(mut top) = doc else {
            return Err(ConfigError::Malformed("config must be a JSON object".into()));
        };
        let version = match top.remove("version") {
            None => FORMAT_VERSION,
            Some(v) => from_value::<u32>(v, "version")?,
        };
        if version != FORMAT_VERSION {
            return Err(range("version", &format!("version = {FORMAT_VERSION}"), version));
        }
        let kind = match (top.remove("kind"), kind_hint) {
            (Some(k), hint) => {
                let k: Kind = from_value(k, "kind")?;
                if let Some(h) = hint {
                    if h != k {
                        return Err(range("kind", &format!("kind = \"{}\" for this verb", h.name()), k.name()));
                    }
                }
                k
            }
            (None, Some(h)) => h,
            (None, None) => return Err(ConfigError::Malformed("missing key `kind`".into())),
        };
        let seed = match top.remove("seed") {
            None => 0,
            Some(v) => from_value(v, "seed")?,
        };
        let out_dir = match top.remove("out_dir") {
            None => PathBuf::from("runs").join(kind.name()),
            Some(v) => from_value(v, "out_dir")?,
        };
        let solver: SolverConfig = match top.remove("solver") {
            None if kind == Kind::ToyQuadratic => from_value(serde_json::json!({"kind": "exact"}), "solver")?,
            None => SolverConfig::default(),
            Some(v) => from_value(v, "solver")?,
        };
        let outer: OuterConfig = match top.remove("outer") {
            None => OuterConfig::default(),
            Some(v) => from_value(v, "outer")?,
        };
        let mut task = match top.remove("task") {
            None => Map::new(),
            Some(Value::Object(m)) => m,
            Some(_) => return Err(ConfigError::Malformed("`task` must be an object".into())),
        };
        for (k, v) in top {
            debug_assert!(!TOP_LEVEL.contains(&k.as_str()));
            if task.contains_key(&k) {
                return Err(ConfigError::Malformed(format!(
                    "key `{k}` given both inline and under `task`"
                )));
            }
            task.insert(k, v);
        }
        let tagged = {
            let mut t = task.clone();
            t.insert("kind".into(), Value::String(kind.name().into()));
            Value::Object(t)
        };
        let parsed_task: TaskConfig = from_value(tagged, "task")?;
        let cfg = Self {
            version,
            kind,
            seed,
            out_dir,
            task: Value::Object(Map::new()),
            solver,
            outer,
            parsed_task,
        };
        cfg.validate()?;
        Ok(cfg.with_effective_task())
    }

    pub fn from_path(path: &Path, kind_hint: Option<Kind>) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Read {
            path: path.to_path_buf(),
            source,
        })?;
        Self::from_json_str(&text, kind_hint)
    }

    /// Default configuration for a kind.
    pub fn defaults(kind: Kind) -> Self {
        Self::from_value(Value::Object(Map::new()), Some(kind)).expect("defaults are valid")
    }

    fn with_effective_task(mut self) -> Self {
        let mut v = serde_json::to_value(&self.parsed_task).expect("task serializes");
        if let Value::Object(m) = &mut v {
            m.remove("kind");
        }
        self.task = v;
        self
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        self.solver.validate("solver")?;
        if self.kind == Kind::ToyQuadratic && matches!(self.solver.kind, SolverKind::Kfac | SolverKind::Ekfac) {
            return Err(range(
                "solver.kind",
                "exact, cg, neumann or identity for the toy task",
                self.solver.label(),
            ));
        }
        self.outer.validate()?;
        match &self.parsed_task {
            TaskConfig::Diagnostic(t) => t.validate(),
            TaskConfig::Hyperclean(t) => t.validate(),
            TaskConfig::ToyQuadratic(t) => t.validate(),
            TaskConfig::BatchSweep(t) => t.validate(),
        }
    }

    /// Fully-defaulted configuration as JSON; parsing it again yields an
    /// equal structure.
    pub fn effective_json(&self) -> Value {
        serde_json::to_value(self).expect("config serializes")
    }

    pub fn set_seed(&mut self, seed: u64) {
        self.seed = seed;
    }
}
