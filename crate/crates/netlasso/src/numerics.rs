//! Dense numeric kernels: ℓ1-ball projection and spectral-norm estimation.
//!
//! Everything here is pure and allocation-conscious; the projection sits in
//! the inner loop of every solver step. All accumulation is in f64.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// Multiplicative slack accepted on the ℓ1 feasibility test. A vector with
/// `‖v‖₁ ≤ r·(1 + L1_FEASIBILITY_SLACK)` is treated as already feasible, so
/// projecting twice returns the first output bit-for-bit.
pub const L1_FEASIBILITY_SLACK: f64 = 1e-12;

/// Dimension up to which symmetric spectral norms use a full
/// eigendecomposition instead of power iteration.
pub const EXACT_EIGEN_LIMIT: usize = 4096;

fn ensure_finite_slice(xs: &[f64], what: &str) -> Result<()> {
    if xs.iter().any(|x| !x.is_finite()) {
        return Err(Error::invalid(format!("{what} contains non-finite entries")));
    }
    Ok(())
}

/// Euclidean projection of `v` onto `{x : ‖x‖₁ ≤ radius}`.
///
/// Uses the O(d log d) sort-then-threshold rule: when `‖v‖₁ > r` the result
/// is `sign(vᵢ)·max(|vᵢ| − τ, 0)` for the unique τ ≥ 0 with `‖p‖₁ = r`.
/// Already-feasible inputs are returned unchanged.
pub fn project_l1_ball(v: &DVector<f64>, radius: f64) -> Result<DVector<f64>> {
    let mut out = v.clone();
    let mut scratch = Vec::new();
    project_l1_ball_in_place(out.as_mut_slice(), radius, &mut scratch)?;
    Ok(out)
}

/// In-place variant of [`project_l1_ball`]; `scratch` is reused across calls
/// to avoid per-row allocation in solver loops.
pub fn project_l1_ball_in_place(xs: &mut [f64], radius: f64, scratch: &mut Vec<f64>) -> Result<()> {
    if !radius.is_finite() || radius < 0.0 {
        return Err(Error::invalid(format!("projection radius must be nonnegative, got {radius}")));
    }
    ensure_finite_slice(xs, "projection input")?;

    let l1: f64 = xs.iter().map(|x| x.abs()).sum();
    if l1 <= radius * (1.0 + L1_FEASIBILITY_SLACK) {
        return Ok(());
    }
    if radius == 0.0 {
        xs.fill(0.0);
        return Ok(());
    }

    scratch.clear();
    scratch.extend(xs.iter().map(|x| x.abs()));
    scratch.sort_unstable_by(|a, b| b.partial_cmp(a).expect("finite magnitudes"));

    // Largest k with u_k > (Σ_{j≤k} u_j − r)/k determines the threshold.
    let mut cumulative = 0.0;
    let mut tau = 0.0;
    for (k, &u) in scratch.iter().enumerate() {
        cumulative += u;
        let candidate = (cumulative - radius) / (k + 1) as f64;
        if u > candidate {
            tau = candidate;
        } else {
            break;
        }
    }

    for x in xs.iter_mut() {
        let shrunk = (x.abs() - tau).max(0.0);
        *x = if *x < 0.0 { -shrunk } else { shrunk };
    }
    Ok(())
}

/// PSD operator's largest eigenvalue by power iteration.
///
/// `apply` must implement `y = B x` for a symmetric positive semidefinite B.
/// The start vector is all ones with small index-dependent offsets so that
/// structured operators whose dominant eigenvector is orthogonal to the
/// constant vector do not stall. Stops when successive Rayleigh quotients
/// agree to `tol` relative, or errs after `cap` iterations.
pub fn power_iteration_psd(
    mut apply: impl FnMut(&DVector<f64>, &mut DVector<f64>),
    dim: usize,
    tol: f64,
    cap: usize,
) -> Result<f64> {
    if dim == 0 {
        return Err(Error::invalid("power iteration on empty operator"));
    }
    let mut x = DVector::from_fn(dim, |i, _| 1.0 + 1e-3 * (i + 1) as f64 / dim as f64);
    x /= x.norm();
    let mut y = DVector::zeros(dim);
    let mut last = f64::NAN;
    for it in 0..cap {
        apply(&x, &mut y);
        let lambda = x.dot(&y).max(0.0);
        let norm = y.norm();
        if norm == 0.0 {
            return Ok(0.0);
        }
        if !lambda.is_finite() {
            return Err(Error::invalid("power iteration produced non-finite values"));
        }
        if it > 0 && (lambda - last).abs() <= tol * lambda.max(f64::MIN_POSITIVE) {
            return Ok(lambda);
        }
        last = lambda;
        y /= norm;
        std::mem::swap(&mut x, &mut y);
    }
    Err(Error::ConvergenceFailure { iterations: cap, last_estimate: last })
}

/// Largest singular value of `m`, i.e. the operator 2-norm.
///
/// Power iteration on MᵀM with a deterministic start; `tol` is relative and
/// must lie in (0, 1e-3]. Symmetric inputs are better served by
/// [`symmetric_spectral_norm`], which is exact.
pub fn spectral_norm(m: &DMatrix<f64>, tol: f64) -> Result<f64> {
    if !(tol > 0.0 && tol <= 1e-3) {
        return Err(Error::invalid(format!("spectral norm tolerance must be in (0, 1e-3], got {tol}")));
    }
    ensure_finite_slice(m.as_slice(), "matrix")?;
    let dim = m.ncols();
    if dim == 0 || m.nrows() == 0 {
        return Ok(0.0);
    }
    let mut mx = DVector::zeros(m.nrows());
    // Successive Rayleigh quotients of MᵀM; the 0.25 factor keeps the
    // eigenvalue-level test below the requested singular-value tolerance.
    let cap = 10 * dim.max(m.nrows()).max(100);
    let lambda = power_iteration_psd(
        |x, y| {
            mx.gemv(1.0, m, x, 0.0);
            y.gemv_tr(1.0, m, &mx, 0.0);
        },
        dim,
        0.25 * tol,
        cap,
    )
    .map_err(|e| match e {
        Error::ConvergenceFailure { iterations, last_estimate } => {
            Error::ConvergenceFailure { iterations, last_estimate: last_estimate.max(0.0).sqrt() }
        }
        other => other,
    })?;
    Ok(lambda.sqrt())
}

/// Exact spectral norm (largest |eigenvalue|) of a symmetric matrix via full
/// eigendecomposition. Intended for matrices up to [`EXACT_EIGEN_LIMIT`].
pub fn symmetric_spectral_norm(m: &DMatrix<f64>) -> Result<f64> {
    if m.nrows() != m.ncols() {
        return Err(Error::invalid("symmetric spectral norm requires a square matrix"));
    }
    ensure_finite_slice(m.as_slice(), "matrix")?;
    let eigenvalues = m.clone().symmetric_eigenvalues();
    Ok(eigenvalues.iter().fold(0.0_f64, |acc, &e| acc.max(e.abs())))
}

/// All eigenvalues of a symmetric matrix, ascending.
pub fn symmetric_eigenvalues_sorted(m: &DMatrix<f64>) -> Result<Vec<f64>> {
    if m.nrows() != m.ncols() {
        return Err(Error::invalid("eigendecomposition requires a square matrix"));
    }
    ensure_finite_slice(m.as_slice(), "matrix")?;
    let mut eigenvalues: Vec<f64> = m.clone().symmetric_eigenvalues().iter().copied().collect();
    eigenvalues.sort_unstable_by(|a, b| a.partial_cmp(b).expect("finite eigenvalues"));
    Ok(eigenvalues)
}

pub(crate) fn l1_norm(xs: &[f64]) -> f64 {
    xs.iter().map(|x| x.abs()).sum()
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Independent oracle: bisection on the threshold τ solving
    /// Σ max(|vᵢ|−τ, 0) = r.
    pub(crate) fn project_l1_bisection_oracle(v: &DVector<f64>, radius: f64) -> DVector<f64> {
        let l1: f64 = v.iter().map(|x| x.abs()).sum();
        if l1 <= radius {
            return v.clone();
        }
        if radius == 0.0 {
            return DVector::zeros(v.len());
        }
        let (mut lo, mut hi) = (0.0, v.iter().fold(0.0_f64, |a, &x| a.max(x.abs())));
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            let mass: f64 = v.iter().map(|x| (x.abs() - mid).max(0.0)).sum();
            if mass > radius {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        let tau = 0.5 * (lo + hi);
        v.map(|x| x.signum() * (x.abs() - tau).max(0.0))
    }

    #[test]
    fn projection_identity_when_feasible() {
        let v = DVector::from_vec(vec![0.5, -0.3]);
        let p = project_l1_ball(&v, 2.0).unwrap();
        assert_eq!(p, v);
    }

    #[test]
    fn projection_zero_radius() {
        let v = DVector::from_vec(vec![3.0, 1.0]);
        let p = project_l1_ball(&v, 0.0).unwrap();
        assert_eq!(p, DVector::from_vec(vec![0.0, 0.0]));
    }

    #[test]
    fn projection_matches_bisection_and_grid_oracle() {
        let v = DVector::from_vec(vec![3.0, 1.0]);
        let p = project_l1_ball(&v, 2.0).unwrap();
        assert!((p[0] - 2.0).abs() < 1e-12 && p[1].abs() < 1e-12);

        let oracle = project_l1_bisection_oracle(&v, 2.0);
        assert!((&p - &oracle).norm() < 1e-9);

        // Exhaustive check over a fine grid of feasible points: nothing on the
        // ball is closer to v than p.
        let dist_p = (&v - &p).norm();
        let steps = 400;
        for i in 0..=steps {
            let a = -2.0 + 4.0 * i as f64 / steps as f64;
            let rem = 2.0 - a.abs();
            for sign in [-1.0, 1.0] {
                let q = DVector::from_vec(vec![a, sign * rem]);
                assert!(dist_p <= (&v - &q).norm() + 1e-10);
            }
        }
    }

    #[test]
    fn projection_rejects_bad_input() {
        let v = DVector::from_vec(vec![1.0, f64::NAN]);
        assert!(matches!(project_l1_ball(&v, 1.0), Err(Error::InvalidArgument(_))));
        let v = DVector::from_vec(vec![1.0, 2.0]);
        assert!(matches!(project_l1_ball(&v, -1.0), Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn spectral_norm_zero_and_identity() {
        let zero = DMatrix::<f64>::zeros(3, 3);
        assert_eq!(spectral_norm(&zero, 1e-6).unwrap(), 0.0);
        let eye = DMatrix::<f64>::identity(4, 4);
        let sigma = spectral_norm(&eye, 1e-6).unwrap();
        assert!((sigma - 1.0).abs() <= 1e-6);
    }

    #[test]
    fn spectral_norm_line_graph_contraction() {
        // Lazy-Metropolis weights on the 3-node line graph; eigenvalues of W
        // are {1, 3/4, 1/4} in closed form, so ‖W − J‖₂ = 3/4.
        let w = DMatrix::from_row_slice(3, 3, &[0.75, 0.25, 0.0, 0.25, 0.5, 0.25, 0.0, 0.25, 0.75]);
        let j = DMatrix::from_element(3, 3, 1.0 / 3.0);
        let diff = &w - &j;
        let sigma = spectral_norm(&diff, 1e-6).unwrap();
        assert!((sigma - 0.75).abs() <= 0.75 * 1e-5, "sigma = {sigma}");
        let exact = symmetric_spectral_norm(&diff).unwrap();
        assert!((exact - 0.75).abs() <= 1e-12);
    }

    #[test]
    fn spectral_norm_matches_svd_oracle() {
        use rand::Rng;
        let mut rng = crate::rng::stream_rng(42, crate::rng::Stream::Directions);
        for _ in 0..20 {
            let m = DMatrix::from_fn(5, 5, |_, _| rng.random_range(-1.0..1.0));
            let sigma = spectral_norm(&m, 1e-6).unwrap();
            let svd = m.clone().svd(false, false);
            let top = svd.singular_values.max();
            assert!((sigma - top).abs() <= 1e-6 * top.max(1e-12), "{sigma} vs {top}");
        }
    }

    #[test]
    fn spectral_norm_rejects_bad_tolerance() {
        let eye = DMatrix::<f64>::identity(2, 2);
        assert!(spectral_norm(&eye, 0.0).is_err());
        assert!(spectral_norm(&eye, 1e-2).is_err());
    }
}
