//! Per-iteration metrics and closed-form theory quantities: the linear rate,
//! the residual error split into network-dependent and network-independent
//! parts, tuning conditions, and slope fitting for empirical traces.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::LinearModel;
use crate::network::CommCost;
use crate::numerics::l1_norm;
use crate::solvers::SolverState;

/// One row of a run trace.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub t: usize,
    /// (1/m) Σᵢ ‖θᵢ − θ*‖².
    pub avg_estimation_error: f64,
    /// Estimation error divided by ‖θ*‖².
    pub avg_estimation_error_norm: f64,
    /// (1/m) Σᵢ ‖θᵢ − θ̂‖², when a reference solution is available.
    pub avg_optimization_error: Option<f64>,
    pub avg_optimization_error_norm: Option<f64>,
    /// ‖Θ − J Θ‖²_F, squared Frobenius disagreement.
    pub consensus_error: f64,
    /// maxᵢ ‖gᵢ − ∇L(θᵢ)‖₂; costs m extra full-gradient evaluations, so the
    /// solvers compute it on a configurable stride.
    pub tracking_residual: Option<f64>,
    /// Σᵢ (∇L(θᵢ) − gᵢ)ᵀ(θᵢ^{+1/2} − θ̂).
    pub delta_t: Option<f64>,
    /// Cumulative channel use up to and including iteration t.
    pub comm: CommCost,
}

/// Which optional (expensive) metrics a solver computes, and how often.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MetricsOptions {
    /// Compute the tracking residual every `stride` iterations; 0 disables.
    pub tracking_stride: usize,
    /// Same for δᵗ (needs the reference solution).
    pub delta_stride: usize,
}

impl Default for MetricsOptions {
    fn default() -> Self {
        MetricsOptions { tracking_stride: 0, delta_stride: 0 }
    }
}

impl MetricsOptions {
    pub fn full() -> Self {
        MetricsOptions { tracking_stride: 1, delta_stride: 1 }
    }

    pub(crate) fn tracking_due(&self, t: usize) -> bool {
        self.tracking_stride > 0 && t % self.tracking_stride == 0
    }

    pub(crate) fn delta_due(&self, t: usize) -> bool {
        self.delta_stride > 0 && t % self.delta_stride == 0
    }
}

/// Computes every metric the state supports, including the expensive
/// tracking terms. Pure function of its inputs.
pub fn compute_metrics(
    state: &SolverState,
    model: &LinearModel,
    theta_hat: Option<&DVector<f64>>,
    comm: CommCost,
) -> MetricsRecord {
    compute_metrics_with(state, model, theta_hat, comm, &MetricsOptions::full())
}

pub(crate) fn compute_metrics_with(
    state: &SolverState,
    model: &LinearModel,
    theta_hat: Option<&DVector<f64>>,
    comm: CommCost,
    opts: &MetricsOptions,
) -> MetricsRecord {
    let theta = &state.theta;
    let m = theta.ncols();
    let truth_sq = model.theta_star.norm_squared();

    let mut est = 0.0;
    let mut opt = theta_hat.map(|_| 0.0);
    for i in 0..m {
        let col = theta.column(i);
        est += (col - &model.theta_star).norm_squared();
        if let (Some(acc), Some(hat)) = (opt.as_mut(), theta_hat) {
            *acc += (col - hat).norm_squared();
        }
    }
    est /= m as f64;
    if let Some(acc) = opt.as_mut() {
        *acc /= m as f64;
    }

    let consensus_error = consensus_error_sq(theta);

    let tracking_residual = match (&state.tracking, opts.tracking_due(state.t)) {
        (Some(g), true) => {
            let mut worst = 0.0_f64;
            for i in 0..m {
                let full = model.global_gradient(&theta.column(i).clone_owned());
                worst = worst.max((g.column(i) - full).norm());
            }
            Some(worst)
        }
        _ => None,
    };

    let delta_t = match (&state.tracking, theta_hat, opts.delta_due(state.t)) {
        (Some(g), Some(hat), true) => {
            let mut sum = 0.0;
            for i in 0..m {
                let full = model.global_gradient(&state.theta.column(i).clone_owned());
                let err = full - g.column(i).clone_owned();
                let dir = state.theta_half.column(i).clone_owned() - hat;
                sum += err.dot(&dir);
            }
            Some(sum)
        }
        _ => None,
    };

    MetricsRecord {
        t: state.t,
        avg_estimation_error: est,
        avg_estimation_error_norm: est / truth_sq,
        avg_optimization_error: opt,
        avg_optimization_error_norm: opt.map(|o| o / truth_sq),
        consensus_error,
        tracking_residual,
        delta_t,
        comm,
    }
}

/// ‖(I − J)Θ‖²_F for agent-per-column data.
pub fn consensus_error_sq(theta_cols: &DMatrix<f64>) -> f64 {
    let m = theta_cols.ncols();
    let mut mean = DVector::zeros(theta_cols.nrows());
    for i in 0..m {
        mean += theta_cols.column(i);
    }
    mean /= m as f64;
    (0..m).map(|i| (theta_cols.column(i) - &mean).norm_squared()).sum()
}

/// Feasible-set geometry check: for feasible θ and an active-constraint
/// reference θ̂, ‖θ − θ̂‖₁ ≤ 2√s‖θ − θ̂‖ + ν with ν = 2‖Δ*‖₁ + 2√s‖Δ*‖ and
/// Δ* = θ̂ − θ*. Returns the slack (≥ 0 means the bound holds).
pub fn cone_bound_margin(
    theta: &DVector<f64>,
    theta_hat: &DVector<f64>,
    theta_star: &DVector<f64>,
    s: usize,
) -> f64 {
    let diff = theta - theta_hat;
    let delta_star = theta_hat - theta_star;
    let nu = 2.0 * l1_norm(delta_star.as_slice()) + 2.0 * (s as f64).sqrt() * delta_star.norm();
    2.0 * (s as f64).sqrt() * diff.norm() + nu - l1_norm(diff.as_slice())
}

/// ν = 2‖θ̂ − θ*‖₁ + 2√s‖θ̂ − θ*‖.
pub fn nu_from_reference(theta_hat: &DVector<f64>, theta_star: &DVector<f64>, s: usize) -> f64 {
    let delta = theta_hat - theta_star;
    2.0 * l1_norm(delta.as_slice()) + 2.0 * (s as f64).sqrt() * delta.norm()
}

/// Inputs to the closed-form rate and residual formulas.
///
/// The universal constants default to 1 and are configurable; every output
/// derived from them is "up to universal constants".
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TheoryParams {
    /// Restricted strong-convexity modulus of the global loss.
    pub mu_sigma: f64,
    /// Restricted smoothness modulus of the global loss.
    pub l_sigma: f64,
    /// Restricted smoothness modulus of the local losses.
    pub ell_sigma: f64,
    /// ℓ1² tolerance of the strong-convexity bound.
    pub tau_mu: f64,
    /// ℓ1² tolerance of the global smoothness bound.
    pub tau_g: f64,
    /// ℓ1² tolerance of the local smoothness bound.
    pub tau_ell: f64,
    pub s: usize,
    pub m: usize,
    /// Network contraction factor ‖W − J‖₂.
    pub rho: f64,
    /// ℓ∞ mixing constant; the √m bound is used when nothing tighter is
    /// known.
    pub c_m: f64,
    /// Cone-bound offset ν = 2‖Δ*‖₁ + 2√s‖Δ*‖.
    pub nu: f64,
    pub c1: f64,
    pub c2: f64,
    /// Constant of the high-probability connectivity condition.
    pub c6: f64,
}

impl TheoryParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.mu_sigma > 0.0 && self.mu_sigma <= self.l_sigma && self.l_sigma <= self.ell_sigma) {
            return Err(Error::invalid(format!(
                "need 0 < mu <= L <= ell, got mu={} L={} ell={}",
                self.mu_sigma, self.l_sigma, self.ell_sigma
            )));
        }
        if self.tau_mu < 0.0 || self.tau_g < 0.0 || self.tau_ell < 0.0 {
            return Err(Error::invalid("tolerance parameters must be nonnegative"));
        }
        if !(0.0..1.0).contains(&self.rho) {
            return Err(Error::invalid(format!("contraction factor must be in [0, 1), got {}", self.rho)));
        }
        Ok(())
    }

    /// Restricted condition number κ = L_Σ/μ_Σ.
    pub fn kappa(&self) -> f64 {
        self.l_sigma / self.mu_sigma
    }

    /// Parameters for a Σ-Gaussian ensemble instance: μ_Σ = σ_min(Σ)/2,
    /// L_Σ = 2σ_max(Σ), ℓ_Σ = 16m·σ_max(Σ), τ_μ = τ_g = c₁ζ·log d/N, and
    /// τ_ℓ = c₁ζ·m·log d/n.
    pub fn gaussian_ensemble(model: &LinearModel, rho: f64, nu: f64, c1: f64, c2: f64) -> TheoryParams {
        let cfg = &model.config;
        let zeta = model.zeta();
        let log_d = (cfg.d as f64).ln();
        let big_n = model.total_samples() as f64;
        let tau = c1 * zeta * log_d / big_n;
        TheoryParams {
            mu_sigma: 0.5 * cfg.covariance.sigma_min(),
            l_sigma: 2.0 * cfg.covariance.sigma_max(),
            ell_sigma: 16.0 * cfg.m as f64 * cfg.covariance.sigma_max(),
            tau_mu: tau,
            tau_g: tau,
            tau_ell: c1 * zeta * cfg.m as f64 * log_d / cfg.n as f64,
            s: cfg.s,
            m: cfg.m,
            rho,
            c_m: (cfg.m as f64).sqrt(),
            nu,
            c1,
            c2,
            c6: 1.0,
        }
    }
}

/// Rate formula output.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RateReport {
    pub lambda: f64,
    /// False when λ ≥ 1: the formula is outside its contraction regime for
    /// these parameters (reported, not an error).
    pub contractive: bool,
}

/// Linear rate λ = (1 − (2κ)⁻¹ + C₁s(τ_μ+τ_g)/L_Σ) / (1 − 2C₁s τ_g/L_Σ).
pub fn theoretical_rate(p: &TheoryParams) -> Result<RateReport> {
    p.validate()?;
    let s = p.s as f64;
    let denominator = 1.0 - 2.0 * p.c1 * s * p.tau_g / p.l_sigma;
    if denominator <= 0.0 {
        return Err(Error::PreconditionViolation(format!(
            "rate denominator 1 - 2·C1·s·tau_g/L = {denominator} must be positive"
        )));
    }
    let numerator = 1.0 - 0.5 / p.kappa() + p.c1 * s * (p.tau_mu + p.tau_g) / p.l_sigma;
    let lambda = numerator / denominator;
    Ok(RateReport { lambda, contractive: lambda < 1.0 })
}

/// Residual error Δ_stat: a network-dependent term scaling with ρ plus a
/// network-independent term scaling with τ_μ + τ_g.
pub fn delta_stat(p: &TheoryParams) -> Result<f64> {
    p.validate()?;
    let network = p.rho / (2.0 * p.l_sigma)
        * (p.ell_sigma / p.mu_sigma)
        * (5.0 * p.c2 * p.c2 * p.c_m * p.c_m / (1.0 - p.rho).powi(2))
        * p.tau_ell
        * p.nu
        * p.nu;
    let intrinsic = p.c1 * (p.tau_mu + p.tau_g) * p.nu * p.nu / p.l_sigma;
    Ok(network + intrinsic)
}

/// Step-size choice γ = L_Σ + 4·(ℓ_Σ²/μ_Σ)·c_m²√ρ/(1−ρ)⁴ behind the rate
/// guarantee; usually conservative compared to a tuned γ.
pub fn theoretical_gamma(p: &TheoryParams) -> Result<f64> {
    p.validate()?;
    Ok(p.l_sigma
        + 4.0 * (p.ell_sigma * p.ell_sigma / p.mu_sigma) * p.c_m * p.c_m * p.rho.sqrt()
            / (1.0 - p.rho).powi(4))
}

/// One tuning condition with its margin (≥ 0 iff it holds).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConditionOutcome {
    pub holds: bool,
    pub lhs: f64,
    pub rhs: f64,
    pub margin: f64,
}

fn outcome(lhs: f64, rhs: f64) -> ConditionOutcome {
    ConditionOutcome { holds: lhs < rhs, lhs, rhs, margin: rhs - lhs }
}

/// The conditions under which the rate guarantee applies.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConditionReport {
    /// 36·C₁·s·(τ_μ + τ_g) < μ_Σ.
    pub curvature: ConditionOutcome,
    /// ρ below the connectivity threshold {2(75c_m²C₂²ℓ²/μ² + 6C₂²c_m²sτ_ℓ·ℓ/μ²)}⁻².
    pub connectivity: ConditionOutcome,
    /// c₆·ρ·m⁸·κ⁴ < 1, the ensemble-level connectivity requirement.
    pub ensemble_connectivity: ConditionOutcome,
}

impl ConditionReport {
    pub fn all_hold(&self) -> bool {
        self.curvature.holds && self.connectivity.holds && self.ensemble_connectivity.holds
    }
}

/// Evaluates the tuning conditions with margins. These are sufficient
/// conditions; runs frequently converge well outside them.
pub fn condition_check(p: &TheoryParams) -> Result<ConditionReport> {
    p.validate()?;
    let s = p.s as f64;
    let curvature = outcome(36.0 * p.c1 * s * (p.tau_mu + p.tau_g), p.mu_sigma);

    let ratio = p.ell_sigma / p.mu_sigma;
    let inner = 75.0 * p.c_m * p.c_m * p.c2 * p.c2 * ratio * ratio
        + (p.ell_sigma / (p.mu_sigma * p.mu_sigma)) * 6.0 * p.c2 * p.c2 * p.c_m * p.c_m * s * p.tau_ell;
    let rho_bound = (2.0 * inner).powi(-2);
    let connectivity = outcome(p.rho, rho_bound);

    let kappa = p.kappa();
    let ensemble = outcome(p.c6 * p.rho * (p.m as f64).powi(8) * kappa.powi(4), 1.0);

    Ok(ConditionReport { curvature, connectivity, ensemble_connectivity: ensemble })
}

/// c_g = max_j ‖∇L_j(θ*)‖_∞ + ‖∇L(θ*)‖_∞ evaluated on the instance.
pub fn c_g_estimate(model: &LinearModel) -> f64 {
    let mut worst_local = 0.0_f64;
    for i in 0..model.agent_count() {
        let g = model.local_gradient(i, &model.theta_star).expect("valid index");
        worst_local = worst_local.max(g.amax());
    }
    let global = model.global_gradient(&model.theta_star);
    worst_local + global.amax()
}

/// Linear-phase fit of a decaying error trace.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SlopeFit {
    /// Least-squares slope of log(error) against iteration index.
    pub slope: f64,
    /// Plateau level: median of the final quarter of the trace.
    pub plateau: f64,
    /// Window of iterations the slope was fitted on.
    pub window: (usize, usize),
}

/// Fits the pre-plateau decay rate of `series`.
///
/// The window defaults to the leading iterations where the value exceeds
/// 4× the plateau level; a caller-supplied window overrides the detection.
pub fn slope_fit(series: &[f64], window: Option<(usize, usize)>) -> Result<SlopeFit> {
    if series.is_empty() {
        return Err(Error::InsufficientData("empty series".into()));
    }
    let plateau = {
        let tail_start = series.len() - (series.len() / 4).max(1);
        let mut tail: Vec<f64> = series[tail_start..].to_vec();
        tail.sort_unstable_by(|a, b| a.partial_cmp(b).expect("finite values"));
        tail[tail.len() / 2]
    };
    let (start, end) = match window {
        Some(w) => w,
        None => {
            let cut = series.iter().position(|&v| v <= 4.0 * plateau).unwrap_or(series.len());
            (0, cut)
        }
    };
    if end > series.len() || start >= end {
        return Err(Error::invalid(format!("bad slope window {start}..{end}")));
    }
    if end - start < 10 {
        return Err(Error::InsufficientData(format!(
            "slope window {start}..{end} has fewer than 10 points"
        )));
    }
    let pts: Vec<(f64, f64)> = (start..end)
        .filter(|&t| series[t] > 0.0)
        .map(|t| (t as f64, series[t].ln()))
        .collect();
    if pts.len() < 10 {
        return Err(Error::InsufficientData("fewer than 10 positive points in window".into()));
    }
    let n = pts.len() as f64;
    let (sx, sy) = pts.iter().fold((0.0, 0.0), |(a, b), (x, y)| (a + x, b + y));
    let (sxx, sxy) = pts.iter().fold((0.0, 0.0), |(a, b), (x, y)| (a + x * x, b + x * y));
    let slope = (n * sxy - sx * sy) / (n * sxx - sx * sx);
    Ok(SlopeFit { slope, plateau, window: (start, end) })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn base_params() -> TheoryParams {
        TheoryParams {
            mu_sigma: 0.5,
            l_sigma: 2.0,
            ell_sigma: 4.0,
            tau_mu: 0.0,
            tau_g: 0.0,
            tau_ell: 0.0,
            s: 10,
            m: 20,
            rho: 0.2,
            c_m: 20.0_f64.sqrt(),
            nu: 1.0,
            c1: 1.0,
            c2: 1.0,
            c6: 1.0,
        }
    }

    #[test]
    fn rate_reduces_to_condition_number_limit() {
        let p = base_params();
        let r = theoretical_rate(&p).unwrap();
        assert!((r.lambda - (1.0 - 1.0 / (2.0 * p.kappa()))).abs() < 1e-15);
        assert!(r.contractive);

        let mut p = base_params();
        p.l_sigma = 0.5;
        p.ell_sigma = 0.5;
        let r = theoretical_rate(&p).unwrap();
        assert!((r.lambda - 0.5).abs() < 1e-15);
    }

    #[test]
    fn rate_formula_cross_check() {
        // Independent re-evaluation at the Gaussian-ensemble values for a
        // d=5000, N=3050, m=50 identity-covariance instance with c1 = 1.
        let d = 5000.0_f64;
        let n_total = 3050.0;
        let s = 71.0;
        let tau = d.ln() / n_total;
        let p = TheoryParams {
            mu_sigma: 0.5,
            l_sigma: 2.0,
            ell_sigma: 16.0 * 50.0,
            tau_mu: tau,
            tau_g: tau,
            tau_ell: 50.0 * d.ln() / 61.0,
            s: 71,
            m: 50,
            rho: 0.18,
            c_m: 50.0_f64.sqrt(),
            nu: 1.0,
            c1: 1.0,
            c2: 1.0,
            c6: 1.0,
        };
        let kappa: f64 = 4.0;
        let expected = (1.0 - 1.0 / (2.0 * kappa) + s * 2.0 * tau / 2.0) / (1.0 - 2.0 * s * tau / 2.0);
        let r = theoretical_rate(&p).unwrap();
        assert!((r.lambda - expected).abs() < 1e-12);
        // At these desk-scale tolerances the formula sits outside its
        // contraction regime, and that is reported rather than hidden.
        assert!(!r.contractive);
    }

    #[test]
    fn rate_denominator_guard() {
        let mut p = base_params();
        p.tau_g = 1.0;
        assert!(matches!(theoretical_rate(&p), Err(Error::PreconditionViolation(_))));
    }

    #[test]
    fn rate_monotone_in_tolerances_and_curvature() {
        let mut lambdas = Vec::new();
        for k in 0..5 {
            let mut p = base_params();
            p.tau_mu = 1e-3 * k as f64;
            p.tau_g = 5e-4 * k as f64;
            lambdas.push(theoretical_rate(&p).unwrap().lambda);
        }
        assert!(lambdas.windows(2).all(|w| w[0] < w[1]));

        let mut prev = f64::INFINITY;
        for mu in [0.1, 0.2, 0.4, 0.5] {
            let mut p = base_params();
            p.mu_sigma = mu;
            let lambda = theoretical_rate(&p).unwrap().lambda;
            assert!(lambda < prev);
            prev = lambda;
        }
    }

    #[test]
    fn delta_stat_limits() {
        let mut p = base_params();
        p.tau_mu = 1e-3;
        p.tau_g = 2e-3;
        p.tau_ell = 5e-3;
        p.rho = 0.0;
        let d = delta_stat(&p).unwrap();
        let intrinsic = p.c1 * (p.tau_mu + p.tau_g) * p.nu * p.nu / p.l_sigma;
        assert!((d - intrinsic).abs() < 1e-15);

        p.tau_mu = 0.0;
        p.tau_g = 0.0;
        p.tau_ell = 0.0;
        p.rho = 0.3;
        assert_eq!(delta_stat(&p).unwrap(), 0.0);
    }

    #[test]
    fn delta_stat_monotone_in_rho() {
        let mut prev = -1.0;
        for k in 0..100 {
            let mut p = base_params();
            p.tau_mu = 1e-4;
            p.tau_g = 1e-4;
            p.tau_ell = 1e-3;
            p.rho = 0.99 * k as f64 / 99.0;
            let d = delta_stat(&p).unwrap();
            assert!(d >= prev, "rho = {}", p.rho);
            prev = d;
        }
    }

    #[test]
    fn conditions_pass_in_the_clean_limit_and_fail_at_high_rho() {
        let mut p = base_params();
        p.rho = 0.0;
        p.ell_sigma = p.l_sigma; // best-conditioned local losses
        let report = condition_check(&p).unwrap();
        assert!(report.curvature.holds);
        assert!(report.connectivity.holds);
        assert!(report.ensemble_connectivity.holds);

        let mut p = base_params();
        p.rho = 0.99;
        p.m = 50;
        let report = condition_check(&p).unwrap();
        // The connectivity bound is below 1/(2·75)² for any parameters.
        assert!(report.connectivity.rhs < (2.0_f64 * 75.0).powi(-2) * 1.0001);
        assert!(!report.connectivity.holds);
        assert!(!report.ensemble_connectivity.holds);
    }

    #[test]
    fn slope_fit_recovers_geometric_decay() {
        let lambda: f64 = 0.9;
        let series: Vec<f64> = (0..200).map(|t| 3.0 * lambda.powi(t)).collect();
        let fit = slope_fit(&series, Some((0, 150))).unwrap();
        assert!((fit.slope - lambda.ln()).abs() < 1e-10);
    }

    #[test]
    fn slope_fit_constant_series() {
        let series = vec![2.0; 64];
        let fit = slope_fit(&series, Some((0, 64))).unwrap();
        assert!(fit.slope.abs() < 1e-12);
        assert!((fit.plateau - 2.0).abs() < 1e-12);
    }

    #[test]
    fn slope_fit_window_too_short() {
        let series = vec![1.0; 30];
        assert!(matches!(slope_fit(&series, Some((0, 5))), Err(Error::InsufficientData(_))));
    }

    #[test]
    fn slope_fit_auto_window_skips_plateau() {
        let lambda: f64 = 0.8;
        let plateau = 1e-6;
        let series: Vec<f64> = (0..300).map(|t| (lambda.powi(t)).max(plateau)).collect();
        let fit = slope_fit(&series, None).unwrap();
        assert!((fit.slope - lambda.ln()).abs() < 0.02 * lambda.ln().abs());
        assert!(fit.plateau <= 2.0 * plateau);
    }

    #[test]
    fn cone_margin_zero_vector_case() {
        let theta_hat = DVector::from_vec(vec![0.6, -0.4, 0.0]);
        let theta_star = DVector::from_vec(vec![0.5, -0.5, 0.0]);
        let theta = DVector::from_vec(vec![0.0, 1.0, 0.0]);
        let margin = cone_bound_margin(&theta, &theta_hat, &theta_star, 2);
        assert!(margin >= -1e-8);
    }
}
