//! Synthetic sparse linear-regression instances distributed over agents.
//!
//! Each agent i owns a design block Xᵢ (n × d) with i.i.d. N(0, Σ) rows and
//! observations yᵢ = Xᵢθ* + nᵢ. The ground truth θ* has exactly `s` nonzero
//! entries in its first `s` coordinates. Everything is a deterministic
//! function of the config seed; the signal, design, and noise draws come
//! from separate streams so they can be varied independently.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use nalgebra::storage::Storage;
use nalgebra::{DMatrix, DVector, Dyn, Vector, U1};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{self, power_iteration_psd, project_l1_ball_in_place};
use crate::rng::{stream_rng, Stream};

/// Row covariance Σ of the design.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case")]
pub enum Covariance {
    Identity,
    /// Diagonal with entries ramping linearly from 1 to `zeta` (so
    /// ζ = max_j Σ_jj is the supplied value).
    Diagonal { zeta: f64 },
    /// Σ_ij = r^|i−j|, the stationary AR(1) covariance.
    Toeplitz { r: f64 },
}

impl Covariance {
    pub fn validate(&self) -> Result<()> {
        match *self {
            Covariance::Identity => Ok(()),
            Covariance::Diagonal { zeta } => {
                if zeta >= 1.0 && zeta.is_finite() {
                    Ok(())
                } else {
                    Err(Error::invalid(format!("diagonal covariance needs zeta >= 1, got {zeta}")))
                }
            }
            Covariance::Toeplitz { r } => {
                if (0.0..1.0).contains(&r) {
                    Ok(())
                } else {
                    Err(Error::invalid(format!("toeplitz covariance needs r in [0, 1), got {r}")))
                }
            }
        }
    }

    /// ζ = max_j Σ_jj.
    pub fn zeta(&self) -> f64 {
        match *self {
            Covariance::Identity => 1.0,
            Covariance::Diagonal { zeta } => zeta,
            Covariance::Toeplitz { .. } => 1.0,
        }
    }

    /// Smallest eigenvalue of Σ (asymptotic spectral-density bound for the
    /// Toeplitz family).
    pub fn sigma_min(&self) -> f64 {
        match *self {
            Covariance::Identity => 1.0,
            Covariance::Diagonal { .. } => 1.0,
            Covariance::Toeplitz { r } => (1.0 - r) / (1.0 + r),
        }
    }

    /// Largest eigenvalue of Σ (asymptotic bound for Toeplitz).
    pub fn sigma_max(&self) -> f64 {
        match *self {
            Covariance::Identity => 1.0,
            Covariance::Diagonal { zeta } => zeta,
            Covariance::Toeplitz { r } => (1.0 + r) / (1.0 - r),
        }
    }

    fn diagonal_entry(&self, j: usize, d: usize) -> f64 {
        match *self {
            Covariance::Diagonal { zeta } if d > 1 => 1.0 + (zeta - 1.0) * j as f64 / (d - 1) as f64,
            Covariance::Diagonal { zeta } => zeta,
            _ => 1.0,
        }
    }

    /// Draws one design row in place. `row` receives d correlated entries.
    fn sample_row(&self, rng: &mut impl Rng, row: &mut [f64]) {
        match *self {
            Covariance::Identity => {
                for x in row.iter_mut() {
                    *x = rng.sample(StandardNormal);
                }
            }
            Covariance::Diagonal { .. } => {
                let d = row.len();
                for (j, x) in row.iter_mut().enumerate() {
                    let z: f64 = rng.sample(StandardNormal);
                    *x = z * self.diagonal_entry(j, d).sqrt();
                }
            }
            Covariance::Toeplitz { r } => {
                // AR(1) recursion reproduces Σ_ij = r^|i−j| exactly.
                let scale = (1.0 - r * r).sqrt();
                let mut prev = 0.0;
                for (j, x) in row.iter_mut().enumerate() {
                    let z: f64 = rng.sample(StandardNormal);
                    prev = if j == 0 { z } else { r * prev + scale * z };
                    *x = prev;
                }
            }
        }
    }

    /// ‖Σ^{1/2} u‖² = uᵀΣu, in O(d).
    pub fn quadratic_form(&self, u: &DVector<f64>) -> f64 {
        match *self {
            Covariance::Identity => u.norm_squared(),
            Covariance::Diagonal { .. } => {
                let d = u.len();
                u.iter().enumerate().map(|(j, &x)| self.diagonal_entry(j, d) * x * x).sum()
            }
            Covariance::Toeplitz { r } => {
                // uᵀΣu = Σ_i u_i (f_i + b_i) with forward/backward r-sums.
                let d = u.len();
                let mut forward = vec![0.0; d];
                let mut acc = 0.0;
                for i in 0..d {
                    acc = r * acc + u[i];
                    forward[i] = acc;
                }
                let mut total = 0.0;
                let mut back = 0.0;
                for i in (0..d).rev() {
                    total += u[i] * (forward[i] + back);
                    back = r * (back + u[i]);
                }
                total
            }
        }
    }

    fn tag(&self) -> (u8, f64) {
        match *self {
            Covariance::Identity => (0, 0.0),
            Covariance::Diagonal { zeta } => (1, zeta),
            Covariance::Toeplitz { r } => (2, r),
        }
    }

    fn from_tag(tag: u8, param: f64) -> Result<Covariance> {
        match tag {
            0 => Ok(Covariance::Identity),
            1 => Ok(Covariance::Diagonal { zeta: param }),
            2 => Ok(Covariance::Toeplitz { r: param }),
            other => Err(Error::invalid(format!("unknown covariance tag {other}"))),
        }
    }
}

/// How the `s` nonzero entries of θ* are drawn.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SignalRule {
    /// i.i.d. standard normal values.
    #[default]
    StandardNormal,
    /// Unit magnitudes with i.i.d. uniform signs.
    UniformSign,
}

/// Full description of a synthetic instance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Ambient dimension.
    pub d: usize,
    /// Number of nonzeros in θ*.
    pub s: usize,
    /// Number of agents.
    pub m: usize,
    /// Samples per agent (total N = m·n).
    pub n: usize,
    /// Observation noise standard deviation.
    pub sigma_noise: f64,
    #[serde(default = "default_covariance")]
    pub covariance: Covariance,
    #[serde(default)]
    pub signal_rule: SignalRule,
    pub seed: u64,
}

fn default_covariance() -> Covariance {
    Covariance::Identity
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.s < 1 || self.s > self.d {
            return Err(Error::invalid(format!("sparsity must satisfy 1 <= s <= d, got s={} d={}", self.s, self.d)));
        }
        if self.n < 1 || self.m < 1 {
            return Err(Error::invalid("need at least one agent and one sample per agent"));
        }
        if !(self.sigma_noise >= 0.0) {
            return Err(Error::invalid(format!("noise level must be nonnegative, got {}", self.sigma_noise)));
        }
        self.covariance.validate()
    }

    pub fn total_samples(&self) -> usize {
        self.m * self.n
    }

    /// Sample-complexity ratio α = s·log d / N.
    pub fn alpha(&self) -> f64 {
        self.s as f64 * (self.d as f64).ln() / self.total_samples() as f64
    }
}

/// One agent's data block.
#[derive(Debug, Clone, PartialEq)]
pub struct AgentData {
    /// n × d design block.
    pub x: DMatrix<f64>,
    /// Observations y = Xθ* + noise.
    pub y: DVector<f64>,
    /// The noise realization, kept so y is reconstructible.
    pub noise: DVector<f64>,
}

/// A generated instance: per-agent blocks plus the ground truth.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearModel {
    pub config: ModelConfig,
    pub theta_star: DVector<f64>,
    pub agents: Vec<AgentData>,
}

/// Draws the instance described by `cfg`. Deterministic in `cfg.seed`.
pub fn generate_model(cfg: &ModelConfig) -> Result<LinearModel> {
    cfg.validate()?;
    let ModelConfig { d, s, m, n, sigma_noise, covariance, signal_rule, seed } = cfg.clone();

    let mut theta_star = DVector::zeros(d);
    let mut signal_rng = stream_rng(seed, Stream::Signal);
    for j in 0..s {
        theta_star[j] = match signal_rule {
            SignalRule::StandardNormal => signal_rng.sample(StandardNormal),
            SignalRule::UniformSign => {
                if signal_rng.random::<bool>() {
                    1.0
                } else {
                    -1.0
                }
            }
        };
    }

    let mut design_rng = stream_rng(seed, Stream::Design);
    let mut noise_rng = stream_rng(seed, Stream::Noise);
    let mut agents = Vec::with_capacity(m);
    let mut row = vec![0.0; d];
    for _ in 0..m {
        let mut x = DMatrix::zeros(n, d);
        for r in 0..n {
            covariance.sample_row(&mut design_rng, &mut row);
            for (c, &v) in row.iter().enumerate() {
                x[(r, c)] = v;
            }
        }
        let noise = DVector::from_fn(n, |_, _| {
            let z: f64 = noise_rng.sample(StandardNormal);
            sigma_noise * z
        });
        let y = &x * &theta_star + &noise;
        agents.push(AgentData { x, y, noise });
    }

    Ok(LinearModel { config: cfg.clone(), theta_star, agents })
}

impl LinearModel {
    pub fn agent_count(&self) -> usize {
        self.agents.len()
    }

    pub fn dimension(&self) -> usize {
        self.config.d
    }

    pub fn total_samples(&self) -> usize {
        self.config.total_samples()
    }

    /// ζ = max_j Σ_jj of the design covariance.
    pub fn zeta(&self) -> f64 {
        self.config.covariance.zeta()
    }

    fn check_agent(&self, i: usize) -> Result<()> {
        if i >= self.agents.len() {
            return Err(Error::invalid(format!("agent index {i} out of range (m = {})", self.agents.len())));
        }
        Ok(())
    }

    /// Local least-squares loss Lᵢ(θ) = ‖yᵢ − Xᵢθ‖² / (2n).
    pub fn local_loss(&self, i: usize, theta: &DVector<f64>) -> Result<f64> {
        self.check_agent(i)?;
        let a = &self.agents[i];
        let r = &a.y - &a.x * theta;
        Ok(r.norm_squared() / (2.0 * self.config.n as f64))
    }

    /// ∇Lᵢ(θ) = Xᵢᵀ(Xᵢθ − yᵢ) / n.
    pub fn local_gradient(&self, i: usize, theta: &DVector<f64>) -> Result<DVector<f64>> {
        self.check_agent(i)?;
        let mut out = DVector::zeros(self.config.d);
        let mut residual = DVector::zeros(self.config.n);
        self.local_gradient_into(i, theta, &mut out, &mut residual);
        Ok(out)
    }

    /// Allocation-free gradient kernel used by the solver loops; accepts
    /// both owned vectors and matrix-column views.
    pub(crate) fn local_gradient_into<S: Storage<f64, Dyn, U1>>(
        &self,
        i: usize,
        theta: &Vector<f64, Dyn, S>,
        out: &mut DVector<f64>,
        residual: &mut DVector<f64>,
    ) {
        let a = &self.agents[i];
        residual.gemv(1.0, &a.x, theta, 0.0);
        *residual -= &a.y;
        out.gemv_tr(1.0 / self.config.n as f64, &a.x, residual, 0.0);
    }

    /// Global loss L(θ) = (1/m) Σᵢ Lᵢ(θ).
    pub fn global_loss(&self, theta: &DVector<f64>) -> f64 {
        let total: f64 = (0..self.agents.len()).map(|i| self.local_loss(i, theta).expect("valid index")).sum();
        total / self.agents.len() as f64
    }

    /// ∇L(θ) = (1/m) Σᵢ ∇Lᵢ(θ).
    pub fn global_gradient(&self, theta: &DVector<f64>) -> DVector<f64> {
        let mut acc = DVector::zeros(self.config.d);
        let mut g = DVector::zeros(self.config.d);
        let mut residual = DVector::zeros(self.config.n);
        for i in 0..self.agents.len() {
            self.local_gradient_into(i, theta, &mut g, &mut residual);
            acc += &g;
        }
        acc / self.agents.len() as f64
    }

    /// Largest eigenvalue of XᵀX/N by power iteration (a Lipschitz constant
    /// for ∇L).
    pub fn lipschitz_estimate(&self, tol: f64) -> Result<f64> {
        let d = self.config.d;
        let n_total = self.total_samples() as f64;
        let mut tmp: Vec<DVector<f64>> = self.agents.iter().map(|a| DVector::zeros(a.x.nrows())).collect();
        power_iteration_psd(
            |v, out| {
                out.fill(0.0);
                for (a, t) in self.agents.iter().zip(tmp.iter_mut()) {
                    t.gemv(1.0, &a.x, v, 0.0);
                    out.gemv_tr(1.0 / n_total, &a.x, t, 1.0);
                }
            },
            d,
            tol,
            10 * d.max(100),
        )
    }

    /// Binary export. Layout (all little-endian): magic `NLMODEL1`, u64
    /// {d, s, m, n, seed}, u8 covariance tag + f64 parameter, u8 signal
    /// rule, f64 sigma_noise, then θ* (d doubles) and per agent the design
    /// block in row-major order (n·d), y (n), and the noise draw (n).
    pub fn write_binary(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        w.write_all(b"NLMODEL1")?;
        let cfg = &self.config;
        for v in [cfg.d as u64, cfg.s as u64, cfg.m as u64, cfg.n as u64, cfg.seed] {
            w.write_all(&v.to_le_bytes())?;
        }
        let (tag, param) = cfg.covariance.tag();
        w.write_all(&[tag])?;
        w.write_all(&param.to_le_bytes())?;
        w.write_all(&[match cfg.signal_rule {
            SignalRule::StandardNormal => 0u8,
            SignalRule::UniformSign => 1u8,
        }])?;
        w.write_all(&cfg.sigma_noise.to_le_bytes())?;
        write_f64s(&mut w, self.theta_star.iter().copied())?;
        for a in &self.agents {
            for r in 0..a.x.nrows() {
                write_f64s(&mut w, a.x.row(r).iter().copied())?;
            }
            write_f64s(&mut w, a.y.iter().copied())?;
            write_f64s(&mut w, a.noise.iter().copied())?;
        }
        w.flush()?;
        Ok(())
    }

    /// Reads a model written by [`LinearModel::write_binary`].
    pub fn read_binary(path: &Path) -> Result<LinearModel> {
        let mut r = BufReader::new(File::open(path)?);
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != b"NLMODEL1" {
            return Err(Error::invalid("not a model container (bad magic)"));
        }
        let d = read_u64(&mut r)? as usize;
        let s = read_u64(&mut r)? as usize;
        let m = read_u64(&mut r)? as usize;
        let n = read_u64(&mut r)? as usize;
        let seed = read_u64(&mut r)?;
        let tag = read_u8(&mut r)?;
        let param = read_f64(&mut r)?;
        let covariance = Covariance::from_tag(tag, param)?;
        let signal_rule = match read_u8(&mut r)? {
            0 => SignalRule::StandardNormal,
            1 => SignalRule::UniformSign,
            other => return Err(Error::invalid(format!("unknown signal rule tag {other}"))),
        };
        let sigma_noise = read_f64(&mut r)?;
        let config = ModelConfig { d, s, m, n, sigma_noise, covariance, signal_rule, seed };
        config.validate()?;

        let theta_star = read_vec(&mut r, d)?;
        let mut agents = Vec::with_capacity(m);
        for _ in 0..m {
            let mut x = DMatrix::zeros(n, d);
            for row in 0..n {
                for col in 0..d {
                    x[(row, col)] = read_f64(&mut r)?;
                }
            }
            let y = read_vec(&mut r, n)?;
            let noise = read_vec(&mut r, n)?;
            agents.push(AgentData { x, y, noise });
        }
        Ok(LinearModel { config, theta_star, agents })
    }
}

fn write_f64s(w: &mut BufWriter<File>, values: impl Iterator<Item = f64>) -> Result<()> {
    for v in values {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

fn read_u8(r: &mut BufReader<File>) -> Result<u8> {
    let mut buf = [0u8; 1];
    r.read_exact(&mut buf)?;
    Ok(buf[0])
}

fn read_u64(r: &mut BufReader<File>) -> Result<u64> {
    let mut buf = [0u8; 8];
    r.read_exact(&mut buf)?;
    Ok(u64::from_le_bytes(buf))
}

fn read_f64(r: &mut BufReader<File>) -> Result<f64> {
    let mut buf = [0u8; 8];
    r.read_exact(&mut buf)?;
    Ok(f64::from_le_bytes(buf))
}

fn read_vec(r: &mut BufReader<File>, len: usize) -> Result<DVector<f64>> {
    let mut v = DVector::zeros(len);
    for i in 0..len {
        v[i] = read_f64(r)?;
    }
    Ok(v)
}

/// Output of [`reference_solution`].
#[derive(Debug, Clone)]
pub struct ReferenceSolution {
    pub theta_hat: DVector<f64>,
    /// Whether ‖θ̂‖₁ = r to within 1e-8 (the constraint is active).
    pub constraint_active: bool,
    /// Final fixed-point residual ‖θ − P(θ − ∇L(θ)/γ)‖₂.
    pub residual: f64,
    pub iterations: usize,
    /// Proximal parameter used (1.05 × largest eigenvalue of XᵀX/N).
    pub gamma: f64,
}

impl ReferenceSolution {
    /// Statistical precision ‖θ̂ − θ*‖².
    pub fn statistical_error(&self, model: &LinearModel) -> f64 {
        (&self.theta_hat - &model.theta_star).norm_squared()
    }
}

/// Default iteration cap for the reference solve.
pub const REFERENCE_MAX_ITERS: usize = 200_000;

/// Centralized solve of the constrained problem to fixed-point residual
/// `tol`, used as the optimization-error reference θ̂.
pub fn reference_solution(model: &LinearModel, radius: f64, tol: f64) -> Result<ReferenceSolution> {
    reference_solution_capped(model, radius, tol, REFERENCE_MAX_ITERS)
}

pub fn reference_solution_capped(
    model: &LinearModel,
    radius: f64,
    tol: f64,
    max_iters: usize,
) -> Result<ReferenceSolution> {
    if !(radius > 0.0) {
        return Err(Error::invalid(format!("reference solve needs r > 0, got {radius}")));
    }
    let gamma = 1.05 * model.lipschitz_estimate(1e-6)?;
    let d = model.dimension();
    let mut theta = DVector::zeros(d);
    let mut scratch = Vec::new();
    let mut residual = f64::INFINITY;
    for it in 1..=max_iters {
        let grad = model.global_gradient(&theta);
        let mut next = &theta - grad / gamma;
        project_l1_ball_in_place(next.as_mut_slice(), radius, &mut scratch)?;
        residual = (&next - &theta).norm();
        theta = next;
        if residual <= tol {
            let l1 = numerics::l1_norm(theta.as_slice());
            return Ok(ReferenceSolution {
                theta_hat: theta,
                constraint_active: (l1 - radius).abs() <= 1e-8,
                residual,
                iterations: it,
                gamma,
            });
        }
    }
    Err(Error::ConvergenceFailure { iterations: max_iters, last_estimate: residual })
}

/// Direction families probed by [`rsc_rsm_probe`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DirectionClass {
    /// k-sparse with random support and Gaussian values.
    Sparse(usize),
    /// Dense Gaussian.
    Dense,
}

/// Margins of the four curvature inequalities for one direction, all
/// normalized so that "≥ 0" means satisfied at the given c₁.
#[derive(Debug, Clone, Copy)]
pub struct DirectionMargins {
    /// ‖Xu‖²/N − (½‖Σ^{1/2}u‖² − c₁ζ·(log d/N)·‖u‖₁²)
    pub ensemble_lower: f64,
    /// (2‖Σ^{1/2}u‖² + c₁ζ·(log d/N)·‖u‖₁²) − ‖Xu‖²/N
    pub ensemble_upper: f64,
    /// ‖Xu‖²/N − (½σ_min(Σ)‖u‖² − c₁ζ·(log d/N)·‖u‖₁²)
    pub curvature_lower: f64,
    /// min over agents of (16m‖Σ^{1/2}u‖² + c₁ζ·(m log d/n)·‖u‖₁²) − ‖Xᵢu‖²/n
    pub local_upper: f64,
}

impl DirectionMargins {
    pub fn all_satisfied(&self) -> bool {
        self.ensemble_lower >= 0.0
            && self.ensemble_upper >= 0.0
            && self.curvature_lower >= 0.0
            && self.local_upper >= 0.0
    }
}

/// Per-class probe summary.
#[derive(Debug, Clone)]
pub struct ClassReport {
    pub class: DirectionClass,
    pub count: usize,
    /// Fraction of directions in this class satisfying all four
    /// inequalities at c₁ = 1.
    pub satisfaction_at_unit_c1: f64,
    /// Fraction satisfying only the ensemble lower bound at c₁ = 1.
    pub lower_satisfaction_at_unit_c1: f64,
    pub worst_margins: DirectionMargins,
}

/// Result of an empirical restricted-curvature probe.
#[derive(Debug, Clone)]
pub struct ProbeReport {
    pub directions: usize,
    /// Smallest c₁ ≥ 0 making every sampled direction satisfy all four
    /// inequalities.
    pub fitted_c1: f64,
    /// Fraction of all sampled directions satisfying the inequalities at
    /// c₁ = 1.
    pub satisfaction_at_unit_c1: f64,
    pub classes: Vec<ClassReport>,
}

/// Samples sparse and dense directions and evaluates the restricted
/// strong-convexity / smoothness inequalities on the instance.
///
/// The default direction mix is k-sparse for k ∈ {1, s, 2s} plus dense
/// Gaussian, splitting `n_dirs` evenly.
pub fn rsc_rsm_probe(model: &LinearModel, n_dirs: usize, seed: u64) -> Result<ProbeReport> {
    let s = model.config.s;
    let d = model.config.d;
    let classes = [
        DirectionClass::Sparse(1),
        DirectionClass::Sparse(s.min(d)),
        DirectionClass::Sparse((2 * s).min(d)),
        DirectionClass::Dense,
    ];
    let base = n_dirs / classes.len();
    let mut counts = [base; 4];
    counts[0] += n_dirs - base * classes.len();
    let spec: Vec<(DirectionClass, usize)> = classes.iter().copied().zip(counts).collect();
    rsc_rsm_probe_with_classes(model, &spec, seed)
}

/// Probe restricted to explicit direction classes.
pub fn rsc_rsm_probe_with_classes(
    model: &LinearModel,
    classes: &[(DirectionClass, usize)],
    seed: u64,
) -> Result<ProbeReport> {
    let total: usize = classes.iter().map(|(_, c)| c).sum();
    if total == 0 {
        return Err(Error::invalid("probe needs at least one direction"));
    }
    let cfg = &model.config;
    let d = cfg.d;
    let n = cfg.n as f64;
    let m = cfg.m as f64;
    let big_n = model.total_samples() as f64;
    let zeta = model.zeta();
    let log_d = (d as f64).ln();
    let tau_global = zeta * log_d / big_n;
    let tau_local = zeta * m * log_d / n;
    let sigma_min = cfg.covariance.sigma_min();

    let mut rng = stream_rng(seed, Stream::Directions);
    let mut fitted_c1 = 0.0_f64;
    let mut satisfied = 0usize;
    let mut reports = Vec::new();
    let mut xu = DVector::zeros(cfg.n);

    for &(class, count) in classes {
        let mut class_satisfied = 0usize;
        let mut lower_satisfied = 0usize;
        let mut worst = DirectionMargins {
            ensemble_lower: f64::INFINITY,
            ensemble_upper: f64::INFINITY,
            curvature_lower: f64::INFINITY,
            local_upper: f64::INFINITY,
        };
        for _ in 0..count {
            let u = sample_direction(&mut rng, d, class);
            let sigma_u = cfg.covariance.quadratic_form(&u);
            let l1_sq = numerics::l1_norm(u.as_slice()).powi(2);
            let u_sq = u.norm_squared();

            let mut global_q = 0.0;
            let mut worst_local = f64::INFINITY;
            for a in &model.agents {
                xu.gemv(1.0, &a.x, &u, 0.0);
                let q_i = xu.norm_squared() / n;
                global_q += xu.norm_squared();
                let margin = (16.0 * m * sigma_u + tau_local * l1_sq) - q_i;
                worst_local = worst_local.min(margin);
            }
            global_q /= big_n;

            let margins = DirectionMargins {
                ensemble_lower: global_q - (0.5 * sigma_u - tau_global * l1_sq),
                ensemble_upper: (2.0 * sigma_u + tau_global * l1_sq) - global_q,
                curvature_lower: global_q - (0.5 * sigma_min * u_sq - tau_global * l1_sq),
                local_upper: worst_local,
            };
            if margins.all_satisfied() {
                satisfied += 1;
                class_satisfied += 1;
            }
            if margins.ensemble_lower >= 0.0 {
                lower_satisfied += 1;
            }
            worst.ensemble_lower = worst.ensemble_lower.min(margins.ensemble_lower);
            worst.ensemble_upper = worst.ensemble_upper.min(margins.ensemble_upper);
            worst.curvature_lower = worst.curvature_lower.min(margins.curvature_lower);
            worst.local_upper = worst.local_upper.min(margins.local_upper);

            // The c₁ each inequality would need; the fitted constant is the
            // max over everything sampled.
            if l1_sq > 0.0 {
                let needs = [
                    (0.5 * sigma_u - global_q) / (tau_global * l1_sq),
                    (global_q - 2.0 * sigma_u) / (tau_global * l1_sq),
                    (0.5 * sigma_min * u_sq - global_q) / (tau_global * l1_sq),
                ];
                for need in needs {
                    fitted_c1 = fitted_c1.max(need);
                }
                for a in &model.agents {
                    xu.gemv(1.0, &a.x, &u, 0.0);
                    let q_i = xu.norm_squared() / n;
                    fitted_c1 = fitted_c1.max((q_i - 16.0 * m * sigma_u) / (tau_local * l1_sq));
                }
            }
        }
        reports.push(ClassReport {
            class,
            count,
            satisfaction_at_unit_c1: if count > 0 { class_satisfied as f64 / count as f64 } else { 1.0 },
            lower_satisfaction_at_unit_c1: if count > 0 { lower_satisfied as f64 / count as f64 } else { 1.0 },
            worst_margins: worst,
        });
    }

    Ok(ProbeReport {
        directions: total,
        fitted_c1: fitted_c1.max(0.0),
        satisfaction_at_unit_c1: satisfied as f64 / total as f64,
        classes: reports,
    })
}

fn sample_direction(rng: &mut impl Rng, d: usize, class: DirectionClass) -> DVector<f64> {
    let mut u = DVector::zeros(d);
    match class {
        DirectionClass::Dense => {
            for x in u.iter_mut() {
                *x = rng.sample(StandardNormal);
            }
        }
        DirectionClass::Sparse(k) => {
            let k = k.max(1).min(d);
            // Floyd's sampling of k distinct coordinates.
            let mut support = std::collections::BTreeSet::new();
            for j in d - k..d {
                let t = rng.random_range(0..=j);
                if !support.insert(t) {
                    support.insert(j);
                }
            }
            for idx in support {
                u[idx] = rng.sample(StandardNormal);
            }
        }
    }
    let norm = u.norm();
    if norm > 0.0 {
        u /= norm;
    } else {
        u[0] = 1.0;
    }
    u
}
