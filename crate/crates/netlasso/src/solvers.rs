//! The iterative solvers: centralized projected gradient descent (PGD),
//! distributed gradient descent (DGD), the gradient-tracking NetLASSO
//! algorithm, a star-topology push-pull executor, and step-size grid search.
//!
//! Conventions. PGD, NetLASSO, and the push-pull executor use γ as a
//! proximal weight: the local subproblem
//! `argmin_{‖θ‖₁ ≤ r} gᵀ(θ − θᵗ) + (γ/2)‖θ − θᵗ‖²` has the closed form
//! `P(θᵗ − g/γ)`, i.e. gradient step 1/γ. DGD uses γ as a direct step
//! multiplier: `θᵢ⁺ = P(Σⱼ wᵢⱼθⱼ − γ∇Lᵢ(θᵢ))`.
//!
//! Agent-stacked matrices are stored with one agent per column (d × m), so
//! each agent's iterate is contiguous; mixing acts on the agent dimension
//! from the right, which for symmetric W equals the usual row-stacked form.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::diagnostics::{self, MetricsOptions, MetricsRecord};
use crate::error::{Error, Result};
use crate::model::LinearModel;
use crate::network::{
    comm_cost, star_pushpull_cost, CommCost, Graph, MixingMatrix, MixingOperator, MixingScratch,
    Protocol,
};
use crate::numerics::project_l1_ball_in_place;

/// Default iterate-magnitude bound beyond which a run is declared diverged.
pub const DIVERGENCE_LIMIT: f64 = 1e12;

/// Algorithm tags used by run configs, traces, and the experiment layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AlgorithmKind {
    Pgd,
    Dgd,
    NetLasso,
    StarPushPull,
}

impl std::fmt::Display for AlgorithmKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            AlgorithmKind::Pgd => write!(f, "pgd"),
            AlgorithmKind::Dgd => write!(f, "dgd"),
            AlgorithmKind::NetLasso => write!(f, "netlasso"),
            AlgorithmKind::StarPushPull => write!(f, "star_pushpull"),
        }
    }
}

/// A communication graph paired with its mixing matrix.
#[derive(Debug, Clone)]
pub struct Network {
    graph: Option<Graph>,
    mixing: MixingMatrix,
}

impl Network {
    pub fn new(graph: Graph, mixing: MixingMatrix) -> Result<Network> {
        if graph.node_count() != mixing.node_count() {
            return Err(Error::invalid("graph and mixing matrix disagree on the agent count"));
        }
        Ok(Network { graph: Some(graph), mixing })
    }

    /// A mixing matrix without an explicit graph; channel use is not
    /// accounted (reductions and synthetic-W tests).
    pub fn from_mixing(mixing: MixingMatrix) -> Network {
        Network { graph: None, mixing }
    }

    pub fn single_agent() -> Network {
        Network { graph: None, mixing: MixingMatrix::single_agent() }
    }

    pub fn graph(&self) -> Option<&Graph> {
        self.graph.as_ref()
    }

    pub fn mixing(&self) -> &MixingMatrix {
        &self.mixing
    }

    pub fn rho(&self) -> f64 {
        self.mixing.rho()
    }

    pub fn node_count(&self) -> usize {
        self.mixing.node_count()
    }

    fn per_round_cost(&self) -> CommCost {
        match &self.graph {
            Some(g) => comm_cost(g, 1, Protocol::Mesh),
            None => CommCost::default(),
        }
    }
}

/// When a run stops before its iteration cap.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum StopRule {
    /// Always run the full iteration budget.
    FixedIterations,
    /// Stop once the prox-step movement max_i ‖θᵢ^{t+1/2} − θᵢᵗ‖ drops to
    /// `tol` (for DGD, the iterate movement).
    Residual { tol: f64 },
}

/// Options shared by all run functions.
#[derive(Debug, Clone)]
pub struct RunOptions {
    pub stop: StopRule,
    /// Reference solution θ̂ enabling optimization-error and δᵗ metrics.
    pub reference: Option<DVector<f64>>,
    pub metrics: MetricsOptions,
    /// Keep a copy of every half-step iterate (tests and small runs only).
    pub record_half_iterates: bool,
    pub divergence_limit: f64,
}

impl Default for RunOptions {
    fn default() -> Self {
        RunOptions {
            stop: StopRule::FixedIterations,
            reference: None,
            metrics: MetricsOptions::default(),
            record_half_iterates: false,
            divergence_limit: DIVERGENCE_LIMIT,
        }
    }
}

/// Stacked iterates of one solver run.
#[derive(Debug, Clone)]
pub struct SolverState {
    /// Agent iterates Θᵗ, one agent per column (d × m).
    pub theta: DMatrix<f64>,
    /// Half-step iterates Θ^{t+1/2} after the local prox step; every column
    /// lies in the ℓ1 ball.
    pub theta_half: DMatrix<f64>,
    /// Gradient-tracking columns Gᵗ (NetLASSO only).
    pub tracking: Option<DMatrix<f64>>,
    pub t: usize,
    pub gamma: f64,
}

/// Full record of a run.
#[derive(Debug, Clone)]
pub struct RunTrace {
    pub algorithm: AlgorithmKind,
    pub gamma: f64,
    /// One record per iteration, starting at t = 0.
    pub records: Vec<MetricsRecord>,
    /// Iterations actually executed.
    pub iterations: usize,
    pub final_state: SolverState,
    /// Half-step history when requested via options.
    pub half_iterates: Option<Vec<DMatrix<f64>>>,
    /// Largest observed violation of the tracking conservation identity
    /// (1/m)Σᵢgᵢ = (1/m)Σᵢ∇Lᵢ(θᵢ), measured in the ∞-norm relative to the
    /// largest stacked-gradient magnitude seen so far. Zero for non-tracking
    /// algorithms.
    pub conservation_violation: f64,
    /// Whether the residual stop rule fired before the iteration cap.
    pub stopped_by_residual: bool,
}

impl RunTrace {
    pub fn final_estimation_error(&self) -> f64 {
        self.records.last().map(|r| r.avg_estimation_error).unwrap_or(f64::INFINITY)
    }

    /// Normalized estimation-error series indexed by iteration.
    pub fn estimation_error_norm_series(&self) -> Vec<f64> {
        self.records.iter().map(|r| r.avg_estimation_error_norm).collect()
    }

    /// First iteration whose normalized estimation error is ≤ `level`.
    pub fn first_iteration_below(&self, level: f64) -> Option<usize> {
        self.records.iter().find(|r| r.avg_estimation_error_norm <= level).map(|r| r.t)
    }
}

fn ensure_gamma(gamma: f64) -> Result<()> {
    if !(gamma > 0.0 && gamma.is_finite()) {
        return Err(Error::invalid(format!("step-size parameter must be positive, got {gamma}")));
    }
    Ok(())
}

fn check_divergence(theta: &DMatrix<f64>, t: usize, limit: f64, algorithm: AlgorithmKind) -> Result<()> {
    let mut worst = 0.0_f64;
    for &v in theta.iter() {
        if !v.is_finite() {
            return Err(Error::Divergence { iteration: t, context: format!("{algorithm}: non-finite iterate") });
        }
        worst = worst.max(v.abs());
    }
    if worst > limit {
        return Err(Error::Divergence {
            iteration: t,
            context: format!("{algorithm}: iterate magnitude {worst:e} exceeds {limit:e}"),
        });
    }
    Ok(())
}

/// Writes the per-agent local gradients of `theta_cols` into `out`.
fn stacked_local_gradients(
    model: &LinearModel,
    theta_cols: &DMatrix<f64>,
    out: &mut DMatrix<f64>,
    residual: &mut DVector<f64>,
) {
    let n = model.config.n;
    let inv_n = 1.0 / n as f64;
    for i in 0..model.agent_count() {
        let a = &model.agents[i];
        residual.gemv(1.0, &a.x, &theta_cols.column(i), 0.0);
        *residual -= &a.y;
        let mut col = out.column_mut(i);
        col.gemv_tr(inv_n, &a.x, residual, 0.0);
    }
}

struct Recorder<'a> {
    model: &'a LinearModel,
    options: &'a RunOptions,
    records: Vec<MetricsRecord>,
    half_iterates: Option<Vec<DMatrix<f64>>>,
    cumulative_comm: CommCost,
}

impl<'a> Recorder<'a> {
    fn new(model: &'a LinearModel, options: &'a RunOptions) -> Recorder<'a> {
        Recorder {
            model,
            options,
            records: Vec::new(),
            half_iterates: options.record_half_iterates.then(Vec::new),
            cumulative_comm: CommCost::default(),
        }
    }

    fn record(&mut self, state: &SolverState, comm_this_iter: CommCost) {
        self.cumulative_comm.accumulate(&comm_this_iter);
        let record = diagnostics::compute_metrics_with(
            state,
            self.model,
            self.options.reference.as_ref(),
            self.cumulative_comm,
            &self.options.metrics,
        );
        self.records.push(record);
        if let Some(history) = self.half_iterates.as_mut() {
            history.push(state.theta_half.clone());
        }
    }
}

/// Centralized PGD: θᵗ⁺¹ = P(θᵗ − ∇L(θᵗ)/γ) from θ⁰ = 0.
pub fn pgd_run(model: &LinearModel, radius: f64, gamma: f64, iterations: usize) -> Result<RunTrace> {
    pgd_run_with(model, radius, gamma, iterations, &RunOptions::default())
}

pub fn pgd_run_with(
    model: &LinearModel,
    radius: f64,
    gamma: f64,
    iterations: usize,
    options: &RunOptions,
) -> Result<RunTrace> {
    centralized_run(model, radius, gamma, iterations, options, AlgorithmKind::Pgd)
}

/// The star push-pull executor: identical iterates to [`pgd_run`], with
/// broadcast-plus-upload channel accounting attached per round.
pub fn star_pushpull_run(model: &LinearModel, radius: f64, gamma: f64, iterations: usize) -> Result<RunTrace> {
    star_pushpull_run_with(model, radius, gamma, iterations, &RunOptions::default())
}

pub fn star_pushpull_run_with(
    model: &LinearModel,
    radius: f64,
    gamma: f64,
    iterations: usize,
    options: &RunOptions,
) -> Result<RunTrace> {
    centralized_run(model, radius, gamma, iterations, options, AlgorithmKind::StarPushPull)
}

fn centralized_run(
    model: &LinearModel,
    radius: f64,
    gamma: f64,
    iterations: usize,
    options: &RunOptions,
    algorithm: AlgorithmKind,
) -> Result<RunTrace> {
    ensure_gamma(gamma)?;
    if iterations == 0 {
        return Err(Error::invalid("iteration budget must be at least 1"));
    }
    let d = model.dimension();
    let per_iter = match algorithm {
        AlgorithmKind::StarPushPull => star_pushpull_cost(model.agent_count(), 1),
        _ => CommCost::default(),
    };

    let mut state = SolverState {
        theta: DMatrix::zeros(d, 1),
        theta_half: DMatrix::zeros(d, 1),
        tracking: None,
        t: 0,
        gamma,
    };
    let mut recorder = Recorder::new(model, options);
    recorder.record(&state, CommCost::default());

    let mut scratch = Vec::new();
    let mut stopped_by_residual = false;
    let mut executed = 0;
    for t in 1..=iterations {
        let theta_vec = state.theta.column(0).clone_owned();
        let grad = model.global_gradient(&theta_vec);
        let mut next = theta_vec - grad / gamma;
        project_l1_ball_in_place(next.as_mut_slice(), radius, &mut scratch)?;
        let movement = (&next - state.theta.column(0)).norm();
        state.theta.column_mut(0).copy_from(&next);
        state.theta_half.column_mut(0).copy_from(&next);
        state.t = t;
        executed = t;
        check_divergence(&state.theta, t, options.divergence_limit, algorithm)?;
        recorder.record(&state, per_iter);
        if let StopRule::Residual { tol } = options.stop {
            if movement <= tol {
                stopped_by_residual = true;
                break;
            }
        }
    }

    Ok(RunTrace {
        algorithm,
        gamma,
        records: recorder.records,
        iterations: executed,
        final_state: state,
        half_iterates: recorder.half_iterates,
        conservation_violation: 0.0,
        stopped_by_residual,
    })
}

/// DGD: θᵢᵗ⁺¹ = P(Σⱼ wᵢⱼθⱼᵗ − γ∇Lᵢ(θᵢᵗ)) from Θ⁰ = 0, one consensus round
/// per iteration, γ as a direct step multiplier.
pub fn dgd_run(
    model: &LinearModel,
    network: &Network,
    radius: f64,
    gamma: f64,
    iterations: usize,
) -> Result<RunTrace> {
    dgd_run_with(model, network, radius, gamma, iterations, &RunOptions::default())
}

pub fn dgd_run_with(
    model: &LinearModel,
    network: &Network,
    radius: f64,
    gamma: f64,
    iterations: usize,
    options: &RunOptions,
) -> Result<RunTrace> {
    ensure_gamma(gamma)?;
    if iterations == 0 {
        return Err(Error::invalid("iteration budget must be at least 1"));
    }
    let m = model.agent_count();
    if network.node_count() != m {
        return Err(Error::invalid(format!(
            "network has {} nodes but the model has {m} agents",
            network.node_count()
        )));
    }
    let d = model.dimension();
    let w = network.mixing().matrix();
    let per_iter = network.per_round_cost();

    let mut state = SolverState {
        theta: DMatrix::zeros(d, m),
        theta_half: DMatrix::zeros(d, m),
        tracking: None,
        t: 0,
        gamma,
    };
    let mut recorder = Recorder::new(model, options);
    recorder.record(&state, CommCost::default());

    let mut mixed = DMatrix::zeros(d, m);
    let mut grads = DMatrix::zeros(d, m);
    let mut residual_buf = DVector::zeros(model.config.n);
    let mut scratch = Vec::new();
    let mut stopped_by_residual = false;
    let mut executed = 0;
    for t in 1..=iterations {
        mixed.gemm(1.0, &state.theta, w, 0.0);
        stacked_local_gradients(model, &state.theta, &mut grads, &mut residual_buf);
        mixed.zip_apply(&grads, |m, g| *m -= gamma * g);
        for i in 0..m {
            let mut col = mixed.column_mut(i);
            project_l1_ball_in_place(col.as_mut_slice(), radius, &mut scratch)?;
        }
        let mut movement = 0.0_f64;
        for i in 0..m {
            movement = movement.max((mixed.column(i) - state.theta.column(i)).norm());
        }
        state.theta.copy_from(&mixed);
        state.theta_half.copy_from(&mixed);
        state.t = t;
        executed = t;
        check_divergence(&state.theta, t, options.divergence_limit, AlgorithmKind::Dgd)?;
        recorder.record(&state, per_iter);
        if let StopRule::Residual { tol } = options.stop {
            if movement <= tol {
                stopped_by_residual = true;
                break;
            }
        }
    }

    Ok(RunTrace {
        algorithm: AlgorithmKind::Dgd,
        gamma,
        records: recorder.records,
        iterations: executed,
        final_state: state,
        half_iterates: recorder.half_iterates,
        conservation_violation: 0.0,
        stopped_by_residual,
    })
}

/// NetLASSO (gradient tracking). Per iteration:
/// Θᵗ = W(Θᵗ⁻¹ + ΔΘᵗ⁻¹), Gᵗ = W(Gᵗ⁻¹ + ∇L(Θᵗ) − ∇L(Θᵗ⁻¹)), then
/// θᵢ^{t+1/2} = P(θᵢᵗ − gᵢᵗ/γ). W is applied as `consensus_rounds` plain
/// rounds of the base matrix, or its Chebyshev polynomial when `chebyshev`
/// is set. Initialization: Θ⁰ = Θ^{1/2} = 0, G⁰ = ∇L(0).
pub fn netlasso_run(
    model: &LinearModel,
    network: &Network,
    radius: f64,
    gamma: f64,
    iterations: usize,
    consensus_rounds: usize,
    chebyshev: bool,
) -> Result<RunTrace> {
    netlasso_run_with(
        model,
        network,
        radius,
        gamma,
        iterations,
        consensus_rounds,
        chebyshev,
        &RunOptions::default(),
    )
}

#[allow(clippy::too_many_arguments)]
pub fn netlasso_run_with(
    model: &LinearModel,
    network: &Network,
    radius: f64,
    gamma: f64,
    iterations: usize,
    consensus_rounds: usize,
    chebyshev: bool,
    options: &RunOptions,
) -> Result<RunTrace> {
    ensure_gamma(gamma)?;
    if iterations == 0 {
        return Err(Error::invalid("iteration budget must be at least 1"));
    }
    let m = model.agent_count();
    if network.node_count() != m {
        return Err(Error::invalid(format!(
            "mixing operator is {}×{0} but the model has {m} agents",
            network.node_count()
        )));
    }
    let d = model.dimension();
    let op = if chebyshev {
        MixingOperator::chebyshev(network.mixing().clone(), consensus_rounds)?
    } else {
        MixingOperator::power(network.mixing().clone(), consensus_rounds)?
    };
    let rounds = op.rounds_per_application() as u64;
    let per_iter = match network.graph() {
        Some(g) => comm_cost(g, rounds, Protocol::Mesh),
        None => CommCost::default(),
    };

    let mut state = SolverState {
        theta: DMatrix::zeros(d, m),
        theta_half: DMatrix::zeros(d, m),
        tracking: None,
        t: 0,
        gamma,
    };
    let mut grads = DMatrix::zeros(d, m);
    let mut residual_buf = DVector::zeros(model.config.n);
    stacked_local_gradients(model, &state.theta, &mut grads, &mut residual_buf);
    let mut tracking = grads.clone();
    state.tracking = Some(tracking.clone());

    let mut recorder = Recorder::new(model, options);
    recorder.record(&state, CommCost::default());

    let mut mix_scratch = MixingScratch::new(d, m);
    let mut grads_new = DMatrix::zeros(d, m);
    let mut proj_scratch = Vec::new();
    let mut conservation_violation = 0.0_f64;
    let mut gradient_scale = column_amax(&grads);
    let mut stopped_by_residual = false;
    let mut executed = 0;

    for t in 1..=iterations {
        // [S.1] consensus on θ: Θᵗ = W·Θ^{t−1/2}.
        state.theta.copy_from(&state.theta_half);
        op.apply(&mut state.theta, &mut mix_scratch);

        // Refresh gradients at the mixed iterates and track:
        // Gᵗ = W(Gᵗ⁻¹ + ∇L(Θᵗ) − ∇L(Θᵗ⁻¹)).
        stacked_local_gradients(model, &state.theta, &mut grads_new, &mut residual_buf);
        tracking += &grads_new;
        tracking -= &grads;
        op.apply(&mut tracking, &mut mix_scratch);
        std::mem::swap(&mut grads, &mut grads_new);

        // Conservation of the tracked average: column means of Gᵗ equal the
        // mean local gradient at Θᵗ, up to roundoff accumulated on the scale
        // of the largest gradients seen so far.
        gradient_scale = gradient_scale.max(column_amax(&grads));
        let violation = mean_column_gap(&tracking, &grads) / gradient_scale.max(f64::MIN_POSITIVE);
        conservation_violation = conservation_violation.max(violation);
        debug_assert!(violation <= 1e-10, "tracking conservation broke: {violation:e} at t={t}");

        // [S.2] local prox step: θᵢ^{t+1/2} = P(θᵢᵗ − gᵢᵗ/γ).
        state.theta_half.copy_from(&state.theta);
        let inv_gamma = 1.0 / gamma;
        state.theta_half.zip_apply(&tracking, |h, g| *h -= inv_gamma * g);
        let mut movement = 0.0_f64;
        for i in 0..m {
            let mut col = state.theta_half.column_mut(i);
            project_l1_ball_in_place(col.as_mut_slice(), radius, &mut proj_scratch)?;
            movement = movement.max((state.theta_half.column(i) - state.theta.column(i)).norm());
        }

        state.t = t;
        executed = t;
        check_divergence(&state.theta_half, t, options.divergence_limit, AlgorithmKind::NetLasso)?;
        state.tracking.as_mut().expect("tracking allocated").copy_from(&tracking);
        recorder.record(&state, per_iter);
        if let StopRule::Residual { tol } = options.stop {
            if movement <= tol {
                stopped_by_residual = true;
                break;
            }
        }
    }

    Ok(RunTrace {
        algorithm: AlgorithmKind::NetLasso,
        gamma,
        records: recorder.records,
        iterations: executed,
        final_state: state,
        half_iterates: recorder.half_iterates,
        conservation_violation,
        stopped_by_residual,
    })
}

fn column_amax(m: &DMatrix<f64>) -> f64 {
    m.iter().fold(0.0_f64, |acc, &v| acc.max(v.abs()))
}

/// ∞-norm gap between the column means of two stacked matrices.
fn mean_column_gap(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    let m = a.ncols() as f64;
    let mut worst = 0.0_f64;
    for r in 0..a.nrows() {
        let mut sa = 0.0;
        let mut sb = 0.0;
        for c in 0..a.ncols() {
            sa += a[(r, c)];
            sb += b[(r, c)];
        }
        worst = worst.max(((sa - sb) / m).abs());
    }
    worst
}

/// Runs `t_probe` iterations per candidate γ and returns the one with the
/// lowest final average estimation error. Diverged candidates are excluded;
/// exact ties break toward the larger γ.
pub fn grid_search_gamma(
    model: &LinearModel,
    network: Option<&Network>,
    algorithm: AlgorithmKind,
    candidates: &[f64],
    t_probe: usize,
    radius: f64,
) -> Result<f64> {
    if candidates.is_empty() {
        return Err(Error::SearchFailure("empty candidate list".into()));
    }
    let mut best: Option<(f64, f64)> = None; // (error, gamma)
    for &gamma in candidates {
        let trace = match algorithm {
            AlgorithmKind::Pgd => pgd_run(model, radius, gamma, t_probe),
            AlgorithmKind::StarPushPull => star_pushpull_run(model, radius, gamma, t_probe),
            AlgorithmKind::Dgd => {
                let net = network.ok_or_else(|| Error::invalid("dgd grid search needs a network"))?;
                dgd_run(model, net, radius, gamma, t_probe)
            }
            AlgorithmKind::NetLasso => {
                let net = network.ok_or_else(|| Error::invalid("netlasso grid search needs a network"))?;
                netlasso_run(model, net, radius, gamma, t_probe, 1, false)
            }
        };
        let err = match trace {
            Ok(t) => t.final_estimation_error(),
            Err(Error::Divergence { .. }) => continue,
            Err(e) => return Err(e),
        };
        if !err.is_finite() {
            continue;
        }
        best = match best {
            None => Some((err, gamma)),
            Some((be, bg)) => {
                if err < be || (err == be && gamma > bg) {
                    Some((err, gamma))
                } else {
                    Some((be, bg))
                }
            }
        };
    }
    best.map(|(_, g)| g).ok_or_else(|| Error::SearchFailure("every candidate diverged".into()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{generate_model, Covariance, ModelConfig, SignalRule};
    use crate::network::{metropolis_weights, MixingMatrix, TopologyKind, WeightRule};
    use crate::numerics::l1_norm;

    fn cfg(d: usize, s: usize, m: usize, n: usize, sigma: f64, seed: u64) -> ModelConfig {
        ModelConfig {
            d,
            s,
            m,
            n,
            sigma_noise: sigma,
            covariance: Covariance::Identity,
            signal_rule: SignalRule::StandardNormal,
            seed,
        }
    }

    fn complete_uniform(m: usize) -> Network {
        let g = Graph::build(TopologyKind::Complete, m, 0).unwrap();
        let w = MixingMatrix::build(&g, WeightRule::UniformComplete).unwrap();
        Network::new(g, w).unwrap()
    }

    fn radius_of(model: &LinearModel) -> f64 {
        l1_norm(model.theta_star.as_slice())
    }

    #[test]
    fn pgd_zero_radius_keeps_origin() {
        let model = generate_model(&cfg(6, 2, 1, 8, 0.1, 1)).unwrap();
        let trace = pgd_run(&model, 0.0, 2.0, 5).unwrap();
        assert!(trace.final_state.theta.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn pgd_exact_recovery_noiseless() {
        let model = generate_model(&cfg(40, 3, 2, 60, 0.0, 2)).unwrap();
        let gamma = 1.05 * model.lipschitz_estimate(1e-6).unwrap();
        let trace = pgd_run(&model, radius_of(&model), gamma, 4000).unwrap();
        assert!(trace.final_estimation_error() <= 1e-10, "err = {:e}", trace.final_estimation_error());
    }

    #[test]
    fn pgd_matches_hand_stepped_oracle() {
        let model = generate_model(&cfg(3, 2, 1, 6, 0.3, 3)).unwrap();
        let gamma = 3.0;
        let r = 0.8;
        let opts = RunOptions { record_half_iterates: true, ..RunOptions::default() };
        let trace = pgd_run_with(&model, r, gamma, 5, &opts).unwrap();
        let history = trace.half_iterates.as_ref().unwrap();
        // Hand-stepped oracle: explicit projection per step.
        let mut theta = DVector::zeros(3);
        let mut scratch = Vec::new();
        for t in 1..=5 {
            let mut next = &theta - model.global_gradient(&theta) / gamma;
            project_l1_ball_in_place(next.as_mut_slice(), r, &mut scratch).unwrap();
            theta = next;
            assert!((history[t].column(0) - &theta).amax() <= 1e-12, "iteration {t}");
        }
    }

    #[test]
    fn star_pushpull_matches_pgd_with_star_accounting() {
        let model = generate_model(&cfg(12, 3, 4, 10, 0.2, 4)).unwrap();
        let gamma = 2.0;
        let pgd = pgd_run(&model, 1.0, gamma, 30).unwrap();
        let star = star_pushpull_run(&model, 1.0, gamma, 30).unwrap();
        assert!((&star.final_state.theta - &pgd.final_state.theta).amax() <= 1e-14);
        let last = star.records.last().unwrap();
        // 2(m−1) channel uses per round: broadcast down plus uploads.
        assert_eq!(last.comm.channel_use_per_round, 6);
        assert_eq!(last.comm.total_channel_use, 6 * 30);
        let pgd_last = pgd.records.last().unwrap();
        assert_eq!(pgd_last.comm.total_channel_use, 0);
    }

    #[test]
    fn star_pushpull_single_agent_zero_comm() {
        let model = generate_model(&cfg(6, 2, 1, 8, 0.1, 5)).unwrap();
        let star = star_pushpull_run(&model, 0.7, 2.0, 10).unwrap();
        assert_eq!(star.records.last().unwrap().comm.total_channel_use, 0);
    }

    #[test]
    fn dgd_uniform_weights_identical_agents_collapse_to_pgd() {
        // With W = J and every agent holding the same data, DGD reduces to
        // PGD with direct step γ.
        let base = generate_model(&cfg(10, 2, 1, 12, 0.2, 6)).unwrap();
        let mut model = base.clone();
        model.config.m = 4;
        model.agents = vec![base.agents[0].clone(); 4];
        let gamma = 0.2;
        let net = complete_uniform(4);
        let dgd = dgd_run(&model, &net, 0.9, gamma, 40).unwrap();
        // PGD with direct multiplier γ is the proximal form with weight 1/γ.
        let pgd = pgd_run(&base, 0.9, 1.0 / gamma, 40).unwrap();
        for i in 0..4 {
            assert!((dgd.final_state.theta.column(i) - pgd.final_state.theta.column(0)).amax() <= 1e-12);
        }
    }

    #[test]
    fn dgd_single_agent_equals_pgd() {
        let model = generate_model(&cfg(15, 3, 1, 20, 0.3, 7)).unwrap();
        let gamma = 0.15;
        let dgd = dgd_run(&model, &Network::single_agent(), 1.2, gamma, 60).unwrap();
        let pgd = pgd_run(&model, 1.2, 1.0 / gamma, 60).unwrap();
        assert!((&dgd.final_state.theta - &pgd.final_state.theta).amax() <= 1e-13);
    }

    #[test]
    fn netlasso_single_agent_equals_pgd() {
        let model = generate_model(&cfg(15, 3, 1, 20, 0.3, 8)).unwrap();
        let gamma = 4.0;
        let nl = netlasso_run(&model, &Network::single_agent(), 1.2, gamma, 60, 1, false).unwrap();
        let pgd = pgd_run(&model, 1.2, gamma, 60).unwrap();
        assert!((&nl.final_state.theta_half - &pgd.final_state.theta).amax() <= 1e-13);
    }

    #[test]
    fn netlasso_uniform_complete_matches_pgd_per_iterate() {
        let model = generate_model(&cfg(30, 4, 6, 8, 0.25, 9)).unwrap();
        let gamma = 1.1 * model.lipschitz_estimate(1e-6).unwrap();
        let r = radius_of(&model);
        let opts = RunOptions { record_half_iterates: true, ..RunOptions::default() };
        let nl = netlasso_run_with(&model, &complete_uniform(6), r, gamma, 100, 1, false, &opts).unwrap();
        let pgd = pgd_run_with(&model, r, gamma, 100, &opts).unwrap();
        let nl_halves = nl.half_iterates.as_ref().unwrap();
        let pgd_halves = pgd.half_iterates.as_ref().unwrap();
        // Half-iterate t+1 of the tracker equals PGD iterate t+1; all agent
        // columns stay identical because W = J keeps them consensual.
        let mut worst = 0.0_f64;
        for t in 1..=100 {
            let reference = pgd_halves[t].column(0);
            for i in 0..6 {
                worst = worst.max((nl_halves[t].column(i) - reference).amax());
            }
        }
        assert!(worst <= 1e-9, "max deviation {worst:e}");
        assert!(nl.conservation_violation <= 1e-10);
    }

    #[test]
    fn netlasso_tracking_conservation_and_feasibility() {
        let model = generate_model(&cfg(25, 3, 5, 10, 0.3, 10)).unwrap();
        let g = Graph::build(TopologyKind::ErdosRenyi { p: 0.5 }, 5, 3).unwrap();
        let w = metropolis_weights(&g, true).unwrap();
        let net = Network::new(g, w).unwrap();
        let r = radius_of(&model);
        let gamma = 1.2 * model.lipschitz_estimate(1e-6).unwrap();
        let opts = RunOptions { record_half_iterates: true, ..RunOptions::default() };
        let trace = netlasso_run_with(&model, &net, r, gamma, 150, 1, false, &opts).unwrap();
        assert!(trace.conservation_violation <= 1e-10, "violation {:e}", trace.conservation_violation);
        for halves in trace.half_iterates.as_ref().unwrap() {
            for i in 0..5 {
                let l1: f64 = halves.column(i).iter().map(|v| v.abs()).sum();
                assert!(l1 <= r * (1.0 + 1e-12), "l1 = {l1}, r = {r}");
            }
        }
    }

    #[test]
    fn netlasso_consensus_error_recursion() {
        // Θ⊥ᵗ = (W − J)(Θ⊥ᵗ⁻¹ + ΔΘᵗ⁻¹), reproduced from recorded states.
        let model = generate_model(&cfg(12, 2, 4, 6, 0.2, 11)).unwrap();
        let g = Graph::build(TopologyKind::Line, 4, 0).unwrap();
        let w = metropolis_weights(&g, true).unwrap();
        let wmat = w.matrix().clone();
        let wj = &wmat - DMatrix::from_element(4, 4, 0.25);
        let net = Network::new(g, w).unwrap();
        let gamma = 1.2 * model.lipschitz_estimate(1e-6).unwrap();
        let opts = RunOptions { record_half_iterates: true, ..RunOptions::default() };
        let trace =
            netlasso_run_with(&model, &net, radius_of(&model), gamma, 30, 1, false, &opts).unwrap();
        let halves = trace.half_iterates.as_ref().unwrap();

        let perp = |mat: &DMatrix<f64>| {
            let mean = mat.column_mean();
            let mut out = mat.clone();
            for mut c in out.column_iter_mut() {
                c -= &mean;
            }
            out
        };
        // Rebuild Θᵗ from Θ^{t−1/2} and compare disagreement components.
        let mut prev_half = DMatrix::zeros(12, 4); // Θ^{1/2} = 0
        for t in 1..halves.len() {
            let theta_t = &prev_half * &wmat;
            let lhs = perp(&theta_t);
            let rhs = perp(&prev_half) * &wj;
            assert!((lhs - rhs).amax() <= 1e-12, "t = {t}");
            prev_half = halves[t].clone();
        }
    }

    #[test]
    fn divergence_is_reported_with_iteration() {
        let model = generate_model(&cfg(10, 2, 3, 4, 0.2, 12)).unwrap();
        let g = Graph::build(TopologyKind::Line, 3, 0).unwrap();
        let w = metropolis_weights(&g, false).unwrap();
        let net = Network::new(g, w).unwrap();
        // A huge DGD step with an effectively unconstrained ball blows up.
        let result = dgd_run(&model, &net, 1e30, 1e8, 200);
        match result {
            Err(Error::Divergence { iteration, .. }) => assert!(iteration > 0),
            other => panic!("expected divergence, got {other:?}"),
        }
    }

    #[test]
    fn grid_search_prefers_working_gamma() {
        let model = generate_model(&cfg(20, 3, 4, 10, 0.2, 13)).unwrap();
        let lip = model.lipschitz_estimate(1e-6).unwrap();
        let net = complete_uniform(4);
        let good = 1.2 * lip;
        let stalled = 1e6 * lip;
        let got = grid_search_gamma(
            &model,
            Some(&net),
            AlgorithmKind::NetLasso,
            &[good, stalled],
            80,
            radius_of(&model),
        )
        .unwrap();
        assert_eq!(got, good);

        let single = grid_search_gamma(&model, None, AlgorithmKind::Pgd, &[2.5 * lip], 10, 1.0).unwrap();
        assert_eq!(single, 2.5 * lip);
        assert!(grid_search_gamma(&model, None, AlgorithmKind::Pgd, &[], 10, 1.0).is_err());
    }

    #[test]
    fn traces_are_deterministic() {
        let model = generate_model(&cfg(18, 3, 4, 8, 0.25, 14)).unwrap();
        let g = Graph::build(TopologyKind::ErdosRenyi { p: 0.6 }, 4, 9).unwrap();
        let w = metropolis_weights(&g, true).unwrap();
        let net = Network::new(g, w).unwrap();
        let a = netlasso_run(&model, &net, 1.0, 3.0, 50, 2, false).unwrap();
        let b = netlasso_run(&model, &net, 1.0, 3.0, 50, 2, false).unwrap();
        assert_eq!(a.records, b.records);
    }
}
