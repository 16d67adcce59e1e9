//! Benchmark driver: both modes, serial and parallel, with a determinism gate.

use std::fmt::Write as _;

use serde::Serialize;
use thiserror::Error;

use crate::assembly::DecoupledModel;
use crate::case_io::{NetworkCase, Report, ReportTimings};
use crate::estimator::{estimate, EstimateError, EstimationMode, EstimationOptions, EstimationResult};
use crate::measurement::{generate_measurements, MeasurementError, NoiseSigmas, PartitionedMeasurements, SystemState};
use crate::network::{build_graph, NetworkError};

#[derive(Debug, Clone, PartialEq)]
pub struct BenchConfig {
    pub noise: NoiseSigmas,
    pub seed: u64,
    pub tol: f64,
    pub max_iter: usize,
    pub worker_counts: Vec<usize>,
    pub decoupled_model: DecoupledModel,
}

impl Default for BenchConfig {
    fn default() -> Self {
        let defaults = EstimationOptions::default();
        BenchConfig {
            noise: NoiseSigmas::default(),
            seed: 0,
            tol: defaults.tol,
            max_iter: defaults.max_iter,
            worker_counts: vec![1, max_workers()],
            decoupled_model: defaults.decoupled_model,
        }
    }
}

pub fn max_workers() -> usize {
    std::thread::available_parallelism().map_or(1, |n| n.get())
}

#[derive(Debug, Error)]
pub enum BenchError {
    #[error(transparent)]
    Network(#[from] NetworkError),
    #[error(transparent)]
    Measurement(#[from] MeasurementError),
    #[error(transparent)]
    Estimate(#[from] EstimateError),
    #[error("{mode} results with {workers} workers differ from the {baseline}-worker run")]
    Nondeterministic {
        mode: &'static str,
        workers: usize,
        baseline: usize,
    },
}

#[derive(Debug, Clone, Serialize)]
pub struct LevelSummary {
    pub system: &'static str,
    pub dim: usize,
    pub l_nnz: usize,
    pub levels: usize,
    pub widest_level: usize,
}

#[derive(Debug, Clone, Serialize)]
pub struct BenchRow {
    pub workers: usize,
    pub report: Report,
}

#[derive(Debug, Clone, Serialize)]
pub struct BenchReport {
    pub buses: usize,
    pub branches: usize,
    pub measurements: usize,
    pub seed: u64,
    pub rows: Vec<BenchRow>,
    pub levels: Vec<LevelSummary>,
}

fn mode_name(mode: EstimationMode) -> &'static str {
    match mode {
        EstimationMode::FullNewton => "full",
        EstimationMode::FastDecoupled => "decoupled",
    }
}

/// Generates seeded measurements from the case truth state and runs every
/// mode at every worker count. Fails if any run differs numerically from the
/// first worker count's run of the same mode.
pub fn run_benchmark(case: &NetworkCase, config: &BenchConfig) -> Result<BenchReport, BenchError> {
    let graph = build_graph(case)?;
    let set = generate_measurements(&graph, &SystemState::truth(case), config.noise, config.seed);
    let pm = PartitionedMeasurements::bind(&graph, &set)?;
    let mut rows = Vec::new();
    let mut levels = Vec::new();
    for mode in [EstimationMode::FastDecoupled, EstimationMode::FullNewton] {
        let mut baseline: Option<(usize, EstimationResult)> = None;
        for &workers in &config.worker_counts {
            let opts = EstimationOptions {
                mode,
                tol: config.tol,
                max_iter: config.max_iter,
                workers,
                decoupled_model: config.decoupled_model,
            };
            let result = estimate(&graph, &pm, &opts)?;
            match &baseline {
                Some((base_workers, base)) if !base.numerically_identical(&result) => {
                    return Err(BenchError::Nondeterministic {
                        mode: mode_name(mode),
                        workers,
                        baseline: *base_workers,
                    })
                }
                Some(_) => {}
                None => {
                    levels.extend(result.level_stats.iter().map(|(system, s)| LevelSummary {
                        system,
                        dim: s.dim,
                        l_nnz: s.l_nnz,
                        levels: s.levels,
                        widest_level: s.widest_level,
                    }));
                }
            }
            rows.push(BenchRow {
                workers,
                report: Report::from_result(&result),
            });
            if baseline.is_none() {
                baseline = Some((workers, result));
            }
        }
    }
    Ok(BenchReport {
        buses: graph.vertex_count(),
        branches: graph.edge_count(),
        measurements: pm.len(),
        seed: config.seed,
        rows,
        levels,
    })
}

impl BenchReport {
    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("bench report serializes");
        s.push('\n');
        s
    }

    pub fn to_table(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(
            out,
            "{} buses, {} branches, {} measurements, seed {}",
            self.buses, self.branches, self.measurements, self.seed
        );
        let _ = writeln!(
            out,
            "{:<10} {:>7} {:>5} {:>5} {:>11} {:>10} {:>10} {:>12} {:>10} {:>10}",
            "mode", "workers", "iter", "conv", "mse", "gain_ms", "factor_ms", "resid+sub_ms", "rhs_ms", "total_ms"
        );
        for row in &self.rows {
            let r = &row.report;
            let ReportTimings {
                gain_formulation,
                factorization,
                residual_and_substitution_per_iter,
                rhs_per_iter,
                total,
            } = r.timings_ms;
            let _ = writeln!(
                out,
                "{:<10} {:>7} {:>5} {:>5} {:>11.3e} {:>10.3} {:>10.3} {:>12.3} {:>10.3} {:>10.3}",
                r.mode,
                row.workers,
                r.iterations,
                if r.converged { "yes" } else { "no" },
                r.mse,
                gain_formulation,
                factorization,
                residual_and_substitution_per_iter,
                rhs_per_iter,
                total
            );
        }
        let _ = writeln!(out, "(residual+substitution and RHS columns are per iteration)");
        for l in &self.levels {
            let _ = writeln!(
                out,
                "{:<4} dim {:>4}  nnz(L) {:>6}  levels {:>4}  widest {:>4}",
                l.system, l.dim, l.l_nnz, l.levels, l.widest_level
            );
        }
        out
    }
}
