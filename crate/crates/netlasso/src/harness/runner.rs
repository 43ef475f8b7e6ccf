//! Experiment execution: resolves step sizes on trial 0, runs trials (in
//! parallel up to the configured worker count, merged in trial order so
//! outputs never depend on scheduling), aggregates traces, and writes the
//! CSV/metadata files.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::Serialize;

use crate::diagnostics::MetricsRecord;
use crate::error::{Error, Result};
use crate::harness::config::{
    CaseConfig, ExperimentConfig, GammaSpec, RadiusSpec, RoundTableConfig, RunSpec, StopSpec,
};
use crate::harness::output::{
    aggregate_csv, percentile_sorted, trace_csv, write_text, AggRow, TraceRow,
};
use crate::model::{generate_model, reference_solution, LinearModel};
use crate::network::{
    metropolis_weights, rounds_for_target, Graph, MixingMatrix, MixingOperator, TopologyKind,
    WeightRule,
};
use crate::numerics::l1_norm;
use crate::solvers::{
    dgd_run_with, netlasso_run_with, pgd_run_with, star_pushpull_run_with, AlgorithmKind, Network,
    RunOptions, RunTrace, StopRule,
};
use crate::diagnostics::MetricsOptions;

/// A run that diverged, kept out of the aggregates.
#[derive(Debug, Clone, Serialize)]
pub struct DivergenceNote {
    pub trial: usize,
    pub run: String,
    pub iteration: usize,
    pub context: String,
}

/// In-memory result for one case, mirrored to disk when an output directory
/// is given.
#[derive(Debug, Clone)]
pub struct CaseOutput {
    pub label: String,
    pub alpha: f64,
    pub rho: Option<f64>,
    pub graph_resamples: Option<usize>,
    pub graph_edges: Option<usize>,
    /// Resolved step-size parameter per run label (frozen across trials).
    pub resolved_gammas: BTreeMap<String, f64>,
    /// Effective per-iteration contraction of each run's mixing operator.
    pub effective_rho: BTreeMap<String, f64>,
    /// ℓ1 radius per trial (r = ‖θ*‖₁ varies with the draw).
    pub radii: Vec<f64>,
    /// ‖θ̂ − θ*‖² per trial when the reference solve is enabled.
    pub stat_errors: Vec<Option<f64>>,
    pub divergences: Vec<DivergenceNote>,
    /// Worst tracking-conservation violation across all runs and trials.
    pub max_conservation_violation: f64,
    /// run label → metric → per-iteration aggregate rows.
    pub aggregates: BTreeMap<String, BTreeMap<&'static str, Vec<AggRow>>>,
}

impl CaseOutput {
    pub fn mean_series(&self, run_label: &str, metric: &str) -> Option<Vec<f64>> {
        self.aggregates
            .get(run_label)
            .and_then(|m| m.iter().find(|(k, _)| **k == metric))
            .map(|(_, rows)| rows.iter().map(|r| r.mean).collect())
    }

    pub fn mean_stat_error_norm(&self) -> Option<f64> {
        let mut acc = 0.0;
        let mut count = 0usize;
        for (stat, radius_holder) in self.stat_errors.iter().zip(self.radii.iter()) {
            let _ = radius_holder;
            if let Some(v) = stat {
                acc += v;
                count += 1;
            }
        }
        (count > 0).then(|| acc / count as f64)
    }
}

/// One row of a round-count table.
#[derive(Debug, Clone, Serialize)]
pub struct RoundRow {
    pub topology: String,
    pub rule: String,
    pub m: usize,
    pub rho: f64,
    pub target: f64,
    pub rounds: u64,
}

#[derive(Debug, Clone)]
pub struct ExperimentOutput {
    pub name: String,
    pub out_dir: Option<PathBuf>,
    pub cases: Vec<CaseOutput>,
    pub round_table: Vec<RoundRow>,
}

/// Runs the whole experiment. Deterministic in the config: trial i draws
/// its instance from seed `base_seed + i`, the graph is shared across
/// trials, and γ resolved on trial 0 is frozen for all trials.
pub fn run_experiment(cfg: &ExperimentConfig, out_dir: Option<&Path>) -> Result<ExperimentOutput> {
    cfg.validate()?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.workers)
        .build()
        .map_err(|e| Error::ExperimentFailure(format!("worker pool: {e}")))?;

    let mut cases = Vec::new();
    for case in &cfg.cases {
        let output = pool.install(|| run_case(cfg, case))?;
        if let Some(dir) = out_dir {
            write_case(dir, &output.0, &output.1)?;
        }
        cases.push(output.0);
    }

    let mut round_rows = Vec::new();
    if let Some(table) = &cfg.round_table {
        round_rows = run_round_table(table, cfg.base_seed)?;
        if let Some(dir) = out_dir {
            write_round_table(dir, &round_rows)?;
        }
    }

    Ok(ExperimentOutput {
        name: cfg.name.clone(),
        out_dir: out_dir.map(Path::to_path_buf),
        cases,
        round_table: round_rows,
    })
}

struct TrialRun {
    label: String,
    outcome: std::result::Result<RunTrace, (usize, String)>,
}

struct TrialResult {
    trial: usize,
    radius: f64,
    stat_error: Option<f64>,
    runs: Vec<TrialRun>,
}

type CasePayload = (CaseOutput, Vec<TraceRow>);

fn run_case(cfg: &ExperimentConfig, case: &CaseConfig) -> Result<CasePayload> {
    let network = build_network(cfg, case)?;

    // Step-size resolution on trial 0's instance, frozen afterwards.
    let model0 = generate_model(&case.model_for_trial(cfg.base_seed, 0))?;
    let radius0 = resolve_radius(case, &model0);
    let lipschitz = model0.lipschitz_estimate(1e-6)?;
    let mut resolved_gammas = BTreeMap::new();
    let mut effective_rho = BTreeMap::new();
    for run in &case.runs {
        let gamma = resolve_gamma(run, &model0, network.as_ref(), radius0, lipschitz)?;
        resolved_gammas.insert(run.label(), gamma);
        if let Some(net) = network.as_ref() {
            if matches!(run.algorithm, AlgorithmKind::NetLasso) {
                let op = if run.chebyshev {
                    MixingOperator::chebyshev(net.mixing().clone(), run.consensus_rounds)?
                } else {
                    MixingOperator::power(net.mixing().clone(), run.consensus_rounds)?
                };
                effective_rho.insert(run.label(), op.effective_rho());
            } else if matches!(run.algorithm, AlgorithmKind::Dgd) {
                effective_rho.insert(run.label(), net.rho());
            }
        }
    }
    drop(model0);

    let trials: Vec<TrialResult> = (0..cfg.trials)
        .into_par_iter()
        .map(|trial| run_trial(cfg, case, network.as_ref(), &resolved_gammas, trial))
        .collect::<Result<Vec<_>>>()?;

    assemble_case(case, network.as_ref(), trials, resolved_gammas, effective_rho)
}

fn build_network(cfg: &ExperimentConfig, case: &CaseConfig) -> Result<Option<Network>> {
    match &case.topology {
        None => Ok(None),
        Some(spec) => {
            let seed = spec.seed.unwrap_or(cfg.base_seed);
            let graph = Graph::build(spec.kind, case.model.m, seed)?;
            let mixing = match case.weight_rule {
                WeightRule::Metropolis => metropolis_weights(&graph, false)?,
                WeightRule::LazyMetropolis => metropolis_weights(&graph, true)?,
                WeightRule::UniformComplete => MixingMatrix::build(&graph, WeightRule::UniformComplete)?,
                WeightRule::Custom => {
                    return Err(Error::Config("custom weight rule is not valid in config files".into()))
                }
            };
            Ok(Some(Network::new(graph, mixing)?))
        }
    }
}

fn resolve_radius(case: &CaseConfig, model: &LinearModel) -> f64 {
    match case.radius {
        RadiusSpec::TruthL1 => l1_norm(model.theta_star.as_slice()),
        RadiusSpec::Fixed { value } => value,
    }
}

fn resolve_gamma(
    run: &RunSpec,
    model0: &LinearModel,
    network: Option<&Network>,
    radius0: f64,
    lipschitz: f64,
) -> Result<f64> {
    match &run.gamma {
        GammaSpec::Fixed { value } => Ok(*value),
        GammaSpec::RelProx { factor } => Ok(factor * lipschitz),
        GammaSpec::RelStep { factor } => Ok(factor / lipschitz),
        GammaSpec::GridProx { factors, probe_iterations } => {
            let candidates: Vec<f64> = factors.iter().map(|f| f * lipschitz).collect();
            crate::solvers::grid_search_gamma(
                model0,
                network,
                run.algorithm,
                &candidates,
                *probe_iterations,
                radius0,
            )
        }
        GammaSpec::GridStep { factors, probe_iterations } => {
            let candidates: Vec<f64> = factors.iter().map(|f| f / lipschitz).collect();
            crate::solvers::grid_search_gamma(
                model0,
                network,
                run.algorithm,
                &candidates,
                *probe_iterations,
                radius0,
            )
        }
    }
}

fn run_trial(
    cfg: &ExperimentConfig,
    case: &CaseConfig,
    network: Option<&Network>,
    gammas: &BTreeMap<String, f64>,
    trial: usize,
) -> Result<TrialResult> {
    let model = generate_model(&case.model_for_trial(cfg.base_seed, trial))?;
    let radius = resolve_radius(case, &model);
    let reference = if case.compute_reference {
        match reference_solution(&model, radius, case.reference_tol) {
            Ok(r) => Some(r),
            Err(Error::ConvergenceFailure { .. }) => None,
            Err(e) => return Err(e),
        }
    } else {
        None
    };
    let stat_error = reference.as_ref().map(|r| r.statistical_error(&model));

    let mut runs = Vec::new();
    for run in &case.runs {
        let gamma = gammas[&run.label()];
        let options = RunOptions {
            stop: match run.stop {
                StopSpec::Fixed => StopRule::FixedIterations,
                StopSpec::Residual { tol } => StopRule::Residual { tol },
            },
            reference: reference.as_ref().map(|r| r.theta_hat.clone()),
            metrics: MetricsOptions {
                tracking_stride: run.tracking_stride,
                delta_stride: run.delta_stride,
            },
            record_half_iterates: false,
            divergence_limit: crate::solvers::DIVERGENCE_LIMIT,
        };
        let outcome = match run.algorithm {
            AlgorithmKind::Pgd => pgd_run_with(&model, radius, gamma, run.iterations, &options),
            AlgorithmKind::StarPushPull => {
                star_pushpull_run_with(&model, radius, gamma, run.iterations, &options)
            }
            AlgorithmKind::Dgd => {
                let net = network.ok_or_else(|| Error::Config("dgd needs a topology".into()))?;
                dgd_run_with(&model, net, radius, gamma, run.iterations, &options)
            }
            AlgorithmKind::NetLasso => {
                let net = network.ok_or_else(|| Error::Config("netlasso needs a topology".into()))?;
                netlasso_run_with(
                    &model,
                    net,
                    radius,
                    gamma,
                    run.iterations,
                    run.consensus_rounds,
                    run.chebyshev,
                    &options,
                )
            }
        };
        let outcome = match outcome {
            Ok(trace) => Ok(trace),
            Err(Error::Divergence { iteration, context }) => Err((iteration, context)),
            Err(e) => return Err(e),
        };
        runs.push(TrialRun { label: run.label(), outcome });
    }

    Ok(TrialResult { trial, radius, stat_error, runs })
}

/// Metrics emitted per record, in fixed column order.
fn metric_values(record: &MetricsRecord) -> Vec<(&'static str, f64)> {
    let mut out = vec![
        ("est_err", record.avg_estimation_error),
        ("est_err_norm", record.avg_estimation_error_norm),
    ];
    if let Some(v) = record.avg_optimization_error {
        out.push(("opt_err", v));
    }
    if let Some(v) = record.avg_optimization_error_norm {
        out.push(("opt_err_norm", v));
    }
    out.push(("consensus_err", record.consensus_error));
    if let Some(v) = record.tracking_residual {
        out.push(("tracking_residual", v));
    }
    if let Some(v) = record.delta_t {
        out.push(("delta_t", v));
    }
    out.push(("comm_total", record.comm.total_channel_use as f64));
    out
}

fn assemble_case(
    case: &CaseConfig,
    network: Option<&Network>,
    mut trials: Vec<TrialResult>,
    resolved_gammas: BTreeMap<String, f64>,
    effective_rho: BTreeMap<String, f64>,
) -> Result<CasePayload> {
    trials.sort_by_key(|t| t.trial);

    let mut rows = Vec::new();
    let mut divergences = Vec::new();
    let mut max_violation = 0.0_f64;
    // run label → metric → per-trial series.
    let mut series: BTreeMap<String, BTreeMap<&'static str, Vec<Vec<f64>>>> = BTreeMap::new();

    for trial in &trials {
        for run in &trial.runs {
            match &run.outcome {
                Ok(trace) => {
                    max_violation = max_violation.max(trace.conservation_violation);
                    let metric_map = series.entry(run.label.clone()).or_default();
                    let mut local: BTreeMap<&'static str, Vec<f64>> = BTreeMap::new();
                    for record in &trace.records {
                        for (metric, value) in metric_values(record) {
                            rows.push(TraceRow {
                                trial: trial.trial,
                                algorithm: run.label.clone(),
                                t: record.t,
                                metric,
                                value,
                            });
                            local.entry(metric).or_default().push(value);
                        }
                    }
                    for (metric, vals) in local {
                        metric_map.entry(metric).or_default().push(vals);
                    }
                }
                Err((iteration, context)) => divergences.push(DivergenceNote {
                    trial: trial.trial,
                    run: run.label.clone(),
                    iteration: *iteration,
                    context: context.clone(),
                }),
            }
        }
    }

    // Every run of some label diverged in every trial → experiment failure.
    for run in &case.runs {
        if !series.contains_key(&run.label()) {
            return Err(Error::ExperimentFailure(format!(
                "every trial of run '{}' in case '{}' diverged",
                run.label(),
                case.label
            )));
        }
    }

    // Aggregate: shorter (residual-stopped) traces are padded by carrying
    // their final value, which is exact for converged runs.
    let mut aggregates: BTreeMap<String, BTreeMap<&'static str, Vec<AggRow>>> = BTreeMap::new();
    for (label, metrics) in &series {
        for (metric, trials_series) in metrics {
            let len = trials_series.iter().map(Vec::len).max().unwrap_or(0);
            let mut agg_rows = Vec::with_capacity(len);
            let mut values = Vec::with_capacity(trials_series.len());
            for t in 0..len {
                values.clear();
                for s in trials_series {
                    let v = if t < s.len() { s[t] } else { *s.last().expect("nonempty") };
                    values.push(v);
                }
                let mean = values.iter().sum::<f64>() / values.len() as f64;
                values.sort_unstable_by(|a, b| a.partial_cmp(b).expect("finite metric"));
                agg_rows.push(AggRow {
                    t,
                    mean,
                    p10: percentile_sorted(&values, 0.10),
                    p90: percentile_sorted(&values, 0.90),
                });
            }
            aggregates.entry(label.clone()).or_default().insert(metric, agg_rows);
        }
    }

    let output = CaseOutput {
        label: case.label.clone(),
        alpha: case.model.alpha(),
        rho: network.map(Network::rho),
        graph_resamples: network.and_then(|n| n.graph().map(Graph::resample_count)),
        graph_edges: network.and_then(|n| n.graph().map(Graph::edge_count)),
        resolved_gammas,
        effective_rho,
        radii: trials.iter().map(|t| t.radius).collect(),
        stat_errors: trials.iter().map(|t| t.stat_error).collect(),
        divergences,
        max_conservation_violation: max_violation,
        aggregates,
    };
    Ok((output, rows))
}

fn run_round_table(table: &RoundTableConfig, seed: u64) -> Result<Vec<RoundRow>> {
    let mut rows = Vec::new();
    for &m in &table.m_values {
        let target = (m as f64).powf(-table.target_exponent);
        let mut topologies: Vec<(String, TopologyKind)> =
            vec![(format!("erdos_renyi(p={})", table.er_p), TopologyKind::ErdosRenyi { p: table.er_p })];
        if table.include_line {
            topologies.push(("line".to_string(), TopologyKind::Line));
        }
        for (name, kind) in topologies {
            let graph = Graph::build(kind, m, seed)?;
            for &rule in &table.rules {
                let lazy = matches!(rule, WeightRule::LazyMetropolis);
                let mixing = metropolis_weights(&graph, lazy)?;
                let rounds = rounds_for_target(mixing.rho(), target)?;
                rows.push(RoundRow {
                    topology: name.clone(),
                    rule: rule.to_string(),
                    m,
                    rho: mixing.rho(),
                    target,
                    rounds,
                });
            }
        }
    }
    Ok(rows)
}

#[derive(Serialize)]
struct CaseMetadata<'a> {
    label: &'a str,
    alpha: f64,
    rho: Option<f64>,
    graph_edges: Option<usize>,
    graph_resamples: Option<usize>,
    resolved_gammas: &'a BTreeMap<String, f64>,
    effective_rho: &'a BTreeMap<String, f64>,
    max_conservation_violation: f64,
    radii: &'a [f64],
    stat_errors: Vec<f64>,
    stat_error_mean: Option<f64>,
    divergences: &'a [DivergenceNote],
}

fn write_case(dir: &Path, output: &CaseOutput, rows: &[TraceRow]) -> Result<()> {
    let case_dir = dir.join(&output.label);
    write_text(&case_dir.join("trace.csv"), &trace_csv(rows))?;
    write_text(&case_dir.join("aggregate.csv"), &aggregate_csv(&output.aggregates))?;
    let meta = CaseMetadata {
        label: &output.label,
        alpha: output.alpha,
        rho: output.rho,
        graph_edges: output.graph_edges,
        graph_resamples: output.graph_resamples,
        resolved_gammas: &output.resolved_gammas,
        effective_rho: &output.effective_rho,
        max_conservation_violation: output.max_conservation_violation,
        radii: &output.radii,
        stat_errors: output.stat_errors.iter().flatten().copied().collect(),
        stat_error_mean: output.mean_stat_error_norm(),
        divergences: &output.divergences,
    };
    let text = toml::to_string_pretty(&meta)
        .map_err(|e| Error::ExperimentFailure(format!("metadata serialize: {e}")))?;
    write_text(&case_dir.join("metadata.toml"), &text)?;
    Ok(())
}

fn write_round_table(dir: &Path, rows: &[RoundRow]) -> Result<()> {
    let mut text = String::from("topology,rule,m,rho,target,rounds\n");
    for row in rows {
        text.push_str(&format!(
            "{},{},{},{},{},{}\n",
            row.topology,
            row.rule,
            row.m,
            crate::harness::output::format_value(row.rho),
            crate::harness::output::format_value(row.target),
            row.rounds
        ));
    }
    write_text(&dir.join("rounds.csv"), &text)?;
    Ok(())
}
