//! Experiment configuration: a TOML-serializable description of cases,
//! algorithms, step-size resolution, and trial counts.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Covariance, ModelConfig, SignalRule};
use crate::network::{TopologyKind, WeightRule};
use crate::solvers::AlgorithmKind;

/// Whole experiment: either solver cases or a round-count table.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub name: String,
    pub trials: usize,
    pub base_seed: u64,
    /// Worker threads for trial-level parallelism; 0 means one per core.
    #[serde(default)]
    pub workers: usize,
    #[serde(default, rename = "case")]
    pub cases: Vec<CaseConfig>,
    /// Present only for round-table experiments (no solver runs).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub round_table: Option<RoundTableConfig>,
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        if self.trials == 0 && self.round_table.is_none() {
            return Err(Error::Config("trials must be at least 1".into()));
        }
        if self.cases.is_empty() && self.round_table.is_none() {
            return Err(Error::Config("experiment has neither cases nor a round table".into()));
        }
        for case in &self.cases {
            case.validate()?;
        }
        Ok(())
    }

    pub fn from_toml_str(text: &str) -> Result<ExperimentConfig> {
        let cfg: ExperimentConfig =
            toml::from_str(text).map_err(|e| Error::Config(format!("config parse error: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }
}

/// One problem instance family plus the algorithms to run on it.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CaseConfig {
    pub label: String,
    pub model: ModelSpec,
    /// Communication topology; omit for purely centralized cases.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub topology: Option<TopologySpec>,
    #[serde(default = "default_weight_rule")]
    pub weight_rule: WeightRule,
    #[serde(rename = "run")]
    pub runs: Vec<RunSpec>,
    #[serde(default)]
    pub radius: RadiusSpec,
    /// Fixed-point tolerance for the reference solve.
    #[serde(default = "default_reference_tol")]
    pub reference_tol: f64,
    /// Whether to compute the reference solution per trial.
    #[serde(default = "default_true")]
    pub compute_reference: bool,
}

fn default_weight_rule() -> WeightRule {
    WeightRule::LazyMetropolis
}

fn default_reference_tol() -> f64 {
    1e-9
}

fn default_true() -> bool {
    true
}

impl CaseConfig {
    pub fn validate(&self) -> Result<()> {
        if self.runs.is_empty() {
            return Err(Error::Config(format!("case '{}' has no runs", self.label)));
        }
        let needs_network = self
            .runs
            .iter()
            .any(|r| matches!(r.algorithm, AlgorithmKind::Dgd | AlgorithmKind::NetLasso));
        if needs_network && self.topology.is_none() {
            return Err(Error::Config(format!(
                "case '{}' runs a decentralized algorithm but has no topology",
                self.label
            )));
        }
        let mut labels = std::collections::BTreeSet::new();
        for run in &self.runs {
            if !labels.insert(run.label()) {
                return Err(Error::Config(format!(
                    "case '{}' has duplicate run label '{}'",
                    self.label,
                    run.label()
                )));
            }
        }
        Ok(())
    }

    /// Model config for one trial; trial i draws from seed base_seed + i.
    pub fn model_for_trial(&self, base_seed: u64, trial: usize) -> ModelConfig {
        self.model.to_config(base_seed.wrapping_add(trial as u64))
    }
}

/// Model parameters without a seed (the runner assigns per-trial seeds).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub d: usize,
    pub s: usize,
    pub m: usize,
    pub n: usize,
    pub sigma_noise: f64,
    #[serde(default = "default_covariance")]
    pub covariance: Covariance,
    #[serde(default)]
    pub signal_rule: SignalRule,
}

fn default_covariance() -> Covariance {
    Covariance::Identity
}

impl ModelSpec {
    pub fn to_config(&self, seed: u64) -> ModelConfig {
        ModelConfig {
            d: self.d,
            s: self.s,
            m: self.m,
            n: self.n,
            sigma_noise: self.sigma_noise,
            covariance: self.covariance,
            signal_rule: self.signal_rule,
            seed,
        }
    }

    pub fn alpha(&self) -> f64 {
        self.s as f64 * (self.d as f64).ln() / (self.m * self.n) as f64
    }
}

/// Topology with an optional dedicated seed (defaults to the experiment
/// base seed, so the graph is shared across trials).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TopologySpec {
    #[serde(flatten)]
    pub kind: TopologyKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
}

/// ℓ1-ball radius used by every run of a case.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(tag = "rule", rename_all = "snake_case")]
pub enum RadiusSpec {
    /// r = ‖θ*‖₁ of the trial instance.
    #[default]
    TruthL1,
    Fixed {
        value: f64,
    },
}

/// One algorithm execution inside a case.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunSpec {
    pub algorithm: AlgorithmKind,
    /// Distinguishes multiple runs of the same algorithm; defaults to the
    /// algorithm name.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<String>,
    pub gamma: GammaSpec,
    pub iterations: usize,
    #[serde(default = "default_rounds")]
    pub consensus_rounds: usize,
    #[serde(default)]
    pub chebyshev: bool,
    #[serde(default)]
    pub stop: StopSpec,
    /// Stride for the expensive tracking-residual metric (0 disables).
    #[serde(default)]
    pub tracking_stride: usize,
    /// Stride for the δᵗ metric (0 disables).
    #[serde(default)]
    pub delta_stride: usize,
}

fn default_rounds() -> usize {
    1
}

impl RunSpec {
    pub fn label(&self) -> String {
        self.label.clone().unwrap_or_else(|| self.algorithm.to_string())
    }
}

/// How the step-size parameter is chosen. Grid variants run on trial 0's
/// instance and the winner is frozen for all trials. "Prox" factors are
/// multiples of the Lipschitz estimate L̂ (γ is a proximal weight, step
/// 1/γ); "step" factors are multiples of 1/L̂ (γ multiplies the gradient
/// directly, the DGD convention).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum GammaSpec {
    Fixed { value: f64 },
    RelProx { factor: f64 },
    RelStep { factor: f64 },
    GridProx { factors: Vec<f64>, probe_iterations: usize },
    GridStep { factors: Vec<f64>, probe_iterations: usize },
}

/// Stop rule in config form.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(tag = "rule", rename_all = "snake_case")]
pub enum StopSpec {
    #[default]
    Fixed,
    Residual {
        tol: f64,
    },
}

/// Round-count table request: smallest k with ρᵏ ≤ m^(−target_exponent)
/// per (topology family, m, weight rule).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RoundTableConfig {
    pub m_values: Vec<usize>,
    /// Edge probability of the Erdős–Rényi column.
    pub er_p: f64,
    pub include_line: bool,
    pub rules: Vec<WeightRule>,
    pub target_exponent: f64,
}
