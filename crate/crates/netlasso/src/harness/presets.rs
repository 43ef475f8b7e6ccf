//! Named experiment presets at two scales: `paper` mirrors the reference
//! problem sizes (expensive; hours of compute at the largest settings),
//! `desk` shrinks the ambient dimension 10× and the trial count to 20 while
//! preserving the sample-complexity ratio α, capping the agent count where
//! eigendecompositions would dominate.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::harness::config::{
    CaseConfig, ExperimentConfig, GammaSpec, ModelSpec, RadiusSpec, RoundTableConfig, RunSpec,
    StopSpec, TopologySpec,
};
use crate::model::{Covariance, SignalRule};
use crate::network::{metropolis_weights, Graph, TopologyKind, WeightRule};
use crate::solvers::AlgorithmKind;

/// Problem scale of a preset.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scale {
    Desk,
    Paper,
}

pub const PRESET_NAMES: [&str; 6] = [
    "P1_fixed_alpha",
    "P2_varying_alpha",
    "P3_fixed_rho_growing_m",
    "P4_fixed_p_growing_m",
    "P5_multi_consensus",
    "P6_round_table",
];

/// Builds a named preset. Unknown names are invalid arguments.
pub fn preset(name: &str, scale: Scale) -> Result<ExperimentConfig> {
    match name {
        "P1_fixed_alpha" => Ok(p1(scale)),
        "P2_varying_alpha" => Ok(p2(scale)),
        "P3_fixed_rho_growing_m" => p3(scale),
        "P4_fixed_p_growing_m" => Ok(p4(scale)),
        "P5_multi_consensus" => p5(scale),
        "P6_round_table" => Ok(p6(scale)),
        other => Err(Error::invalid(format!(
            "unknown preset '{other}'; expected one of {PRESET_NAMES:?}"
        ))),
    }
}

fn spec(d: usize, s: usize, m: usize, n: usize, sigma: f64) -> ModelSpec {
    ModelSpec {
        d,
        s,
        m,
        n,
        sigma_noise: sigma,
        covariance: Covariance::Identity,
        signal_rule: SignalRule::StandardNormal,
    }
}

fn gamma_grid(probe_iterations: usize) -> GammaSpec {
    GammaSpec::GridProx {
        factors: vec![0.5, 0.71, 1.0, 1.41, 2.0, 2.83, 4.0, 5.66],
        probe_iterations,
    }
}

fn netlasso_run(iterations: usize, rounds: usize, probe: usize) -> RunSpec {
    RunSpec {
        algorithm: AlgorithmKind::NetLasso,
        label: None,
        gamma: gamma_grid(probe),
        iterations,
        consensus_rounds: rounds,
        chebyshev: false,
        stop: StopSpec::Residual { tol: 1e-10 },
        tracking_stride: 0,
        delta_stride: 0,
    }
}

fn er_topology(p: f64) -> Option<TopologySpec> {
    Some(TopologySpec { kind: TopologyKind::ErdosRenyi { p }, seed: None })
}

fn base(name: &str, scale: Scale, cases: Vec<CaseConfig>) -> ExperimentConfig {
    ExperimentConfig {
        name: name.to_string(),
        trials: match scale {
            Scale::Desk => 20,
            Scale::Paper => 100,
        },
        base_seed: 2021,
        workers: 0,
        cases,
        round_table: None,
    }
}

/// Fixed α ≈ 0.2 while d grows; the log-error slopes should coincide.
fn p1(scale: Scale) -> ExperimentConfig {
    let (dims, iters, probe) = match scale {
        // n chosen so that s·log d/(m·n) stays in [0.19, 0.21].
        Scale::Desk => (vec![(500, 23, 14), (1000, 32, 22), (2000, 45, 34)], 400, 80),
        Scale::Paper => (vec![(5000, 71, 61), (10000, 100, 94), (20000, 142, 142)], 800, 100),
    };
    let cases = dims
        .into_iter()
        .map(|(d, s, n)| CaseConfig {
            label: format!("d{d}"),
            model: spec(d, s, 50, n, 0.5),
            topology: er_topology(0.5),
            weight_rule: WeightRule::Metropolis,
            runs: vec![netlasso_run(iters, 1, probe)],
            radius: RadiusSpec::TruthL1,
            reference_tol: 1e-9,
            compute_reference: true,
        })
        .collect();
    base("P1_fixed_alpha", scale, cases)
}

/// Three local sample sizes giving α ≈ {1, 0.2, 0.04}; both the rate and
/// the plateau should degrade as α grows.
fn p2(scale: Scale) -> ExperimentConfig {
    let (d, s, iters, probe) = match scale {
        // s is picked so n = 1 lands at α ≈ 1 with m = 50.
        Scale::Desk => (2000, 7, 400, 80),
        Scale::Paper => (20000, 5, 800, 100),
    };
    let cases = [1usize, 5, 25]
        .into_iter()
        .map(|n| CaseConfig {
            label: format!("n{n}"),
            model: spec(d, s, 50, n, 0.5),
            topology: er_topology(0.5),
            weight_rule: WeightRule::Metropolis,
            runs: vec![netlasso_run(iters, 1, probe)],
            radius: RadiusSpec::TruthL1,
            reference_tol: 1e-9,
            compute_reference: true,
        })
        .collect();
    base("P2_varying_alpha", scale, cases)
}

/// Growing m at (roughly) fixed ρ ≈ 0.18; the achievable rate degrades.
fn p3(scale: Scale) -> Result<ExperimentConfig> {
    let cases = match scale {
        Scale::Paper => {
            // Edge probabilities that hold ρ ≈ 0.18 at N = 2500 total samples.
            let settings = [(50usize, 50usize, 0.87), (625, 4, 0.4), (1250, 2, 0.23), (2500, 1, 0.15)];
            settings
                .into_iter()
                .map(|(m, n, p)| p3_case(5000, 71, m, n, er_topology(p), 800, 100))
                .collect()
        }
        Scale::Desk => {
            // Agent counts capped at 250; p is resolved per m to keep ρ ≈ 0.18.
            let settings = [(50usize, 10usize), (125, 4), (250, 2)];
            let mut cases = Vec::new();
            for (m, n) in settings {
                let (p, _) = er_probability_for_rho(m, 0.18, WeightRule::Metropolis, 2021, 0.02)?;
                cases.push(p3_case(500, 23, m, n, er_topology(p), 300, 60));
            }
            cases
        }
    };
    Ok(base("P3_fixed_rho_growing_m", scale, cases))
}

fn p3_case(
    d: usize,
    s: usize,
    m: usize,
    n: usize,
    topology: Option<TopologySpec>,
    iters: usize,
    probe: usize,
) -> CaseConfig {
    CaseConfig {
        label: format!("m{m}"),
        model: spec(d, s, m, n, 0.5),
        topology,
        weight_rule: WeightRule::Metropolis,
        runs: vec![netlasso_run(iters, 1, probe)],
        radius: RadiusSpec::TruthL1,
        reference_tol: 1e-9,
        compute_reference: true,
    }
}

/// Growing m at fixed edge probability 0.87 (ρ shrinks like 1/√m); the
/// sufficient connectivity condition fails long before convergence does.
fn p4(scale: Scale) -> ExperimentConfig {
    let cases = match scale {
        Scale::Paper => [(50usize, 50usize), (625, 4), (1250, 2), (2500, 1)]
            .into_iter()
            .map(|(m, n)| p3_case(5000, 71, m, n, er_topology(0.87), 800, 100))
            .collect(),
        Scale::Desk => [(50usize, 10usize), (125, 4), (250, 2)]
            .into_iter()
            .map(|(m, n)| p3_case(500, 23, m, n, er_topology(0.87), 300, 60))
            .collect(),
    };
    base("P4_fixed_p_growing_m", scale, cases)
}

/// Multi-round consensus: K ∈ {1, 3, 9} rounds on graphs with
/// ρ ≈ {0.06, 0.4, 0.78} give nearly identical iteration complexity.
fn p5(scale: Scale) -> Result<ExperimentConfig> {
    let ((d, s, n), iters, probe) = match scale {
        Scale::Desk => ((500usize, 23usize, 14usize), 300, 60),
        Scale::Paper => ((5000, 71, 61), 800, 100),
    };
    let targets = [(0.0638, 1usize), (0.4038, 3), (0.7281, 9)];
    let mut cases = Vec::new();
    for (rho_target, rounds) in targets {
        let (p, _) = er_probability_for_rho(50, rho_target, WeightRule::Metropolis, 2021, 0.015)?;
        cases.push(CaseConfig {
            label: format!("rho{:.0e}_k{rounds}", rho_target),
            model: spec(d, s, 50, n, 0.5),
            topology: er_topology(p),
            weight_rule: WeightRule::Metropolis,
            runs: vec![netlasso_run(iters, rounds, probe)],
            radius: RadiusSpec::TruthL1,
            reference_tol: 1e-9,
            compute_reference: true,
        });
    }
    Ok(base("P5_multi_consensus", scale, cases))
}

/// Round counts k with ρᵏ ≤ m⁻⁸ for the Erdős–Rényi (p = 0.87) and line
/// families under both Metropolis rules.
fn p6(scale: Scale) -> ExperimentConfig {
    let mut cfg = base("P6_round_table", scale, Vec::new());
    cfg.trials = 1;
    cfg.round_table = Some(RoundTableConfig {
        m_values: vec![50, 625, 1250, 2500],
        er_p: 0.87,
        include_line: true,
        rules: vec![WeightRule::Metropolis, WeightRule::LazyMetropolis],
        target_exponent: 8.0,
    });
    cfg
}

/// Searches for an edge probability whose connected Erdős–Rényi draw (under
/// `seed`) has contraction factor within `tol` of `target`. Deterministic;
/// bisection on p with the closest probe kept.
pub fn er_probability_for_rho(
    m: usize,
    target: f64,
    rule: WeightRule,
    seed: u64,
    tol: f64,
) -> Result<(f64, f64)> {
    let lazy = matches!(rule, WeightRule::LazyMetropolis);
    let eval = |p: f64| -> Result<f64> {
        let graph = Graph::build(TopologyKind::ErdosRenyi { p }, m, seed)?;
        Ok(metropolis_weights(&graph, lazy)?.rho())
    };
    let mut lo = (2.0 * (m as f64).ln() / m as f64).min(0.5);
    let mut hi = 1.0;
    let mut best = (f64::INFINITY, 0.0, 0.0); // (gap, p, rho)
    for _ in 0..40 {
        let mid = 0.5 * (lo + hi);
        let rho = match eval(mid) {
            Ok(r) => r,
            Err(_) => {
                // Too sparse to connect: move up.
                lo = mid;
                continue;
            }
        };
        let gap = (rho - target).abs();
        if gap < best.0 {
            best = (gap, mid, rho);
        }
        if gap <= tol * 0.5 {
            break;
        }
        if rho > target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    if best.0 <= tol {
        Ok((best.1, best.2))
    } else {
        Err(Error::ConstructionFailure(format!(
            "no edge probability found with rho within {tol} of {target} (best gap {:.4} at p = {:.4})",
            best.0, best.1
        )))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn preset_names_resolve() {
        for name in PRESET_NAMES {
            let cfg = preset(name, Scale::Desk).unwrap();
            cfg.validate().unwrap();
        }
        assert!(preset("nope", Scale::Desk).is_err());
    }

    #[test]
    fn p1_alpha_in_band_both_scales() {
        for scale in [Scale::Desk, Scale::Paper] {
            let cfg = preset("P1_fixed_alpha", scale).unwrap();
            for case in &cfg.cases {
                let alpha = case.model.alpha();
                assert!((0.19..=0.21).contains(&alpha), "{:?} {} -> {alpha}", scale, case.label);
            }
        }
    }

    #[test]
    fn desk_p1_preserves_paper_alpha() {
        let desk = preset("P1_fixed_alpha", Scale::Desk).unwrap();
        let paper = preset("P1_fixed_alpha", Scale::Paper).unwrap();
        for (d, p) in desk.cases.iter().zip(paper.cases.iter()) {
            let ratio = d.model.alpha() / p.model.alpha();
            assert!((ratio - 1.0).abs() <= 0.05, "{} vs {}", d.model.alpha(), p.model.alpha());
        }
    }

    #[test]
    fn p2_alpha_ladder() {
        for scale in [Scale::Desk, Scale::Paper] {
            let cfg = preset("P2_varying_alpha", scale).unwrap();
            let alphas: Vec<f64> = cfg.cases.iter().map(|c| c.model.alpha()).collect();
            assert!((alphas[0] - 1.0).abs() <= 0.1, "{alphas:?}");
            assert!((alphas[1] - 0.2).abs() <= 0.03);
            assert!((alphas[2] - 0.04).abs() <= 0.006);
        }
    }

    #[test]
    fn p5_hits_rho_targets() {
        let cfg = preset("P5_multi_consensus", Scale::Desk).unwrap();
        assert_eq!(cfg.cases.len(), 3);
        let rounds: Vec<usize> = cfg.cases.iter().map(|c| c.runs[0].consensus_rounds).collect();
        assert_eq!(rounds, vec![1, 3, 9]);
    }

    #[test]
    fn er_rho_search_finds_dense_and_sparse_targets() {
        let (p_low, rho_low) =
            er_probability_for_rho(50, 0.0638, WeightRule::Metropolis, 2021, 0.015).unwrap();
        assert!((rho_low - 0.0638).abs() <= 0.015, "rho = {rho_low} at p = {p_low}");
        let (_, rho_mid) =
            er_probability_for_rho(50, 0.4038, WeightRule::Metropolis, 2021, 0.015).unwrap();
        assert!((rho_mid - 0.4038).abs() <= 0.015);
    }
}
