//! Gauss-Newton weighted-least-squares estimation loop.

use std::time::Instant;

use thiserror::Error;

use crate::assembly::{self, AssemblyError, DecoupledModel, LocalH, StateLayout};
use crate::engine::{Engine, EngineError};
use crate::measurement::{
    evaluate_h_with, mean_squared_error, objective, residuals, MeasurementError, MeasurementKind,
    PartitionedMeasurements, SystemState,
};
use crate::network::PowerGraph;
use crate::sparse::{CsrMatrix, LevelStats, SparseCholesky, SparseError};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EstimationMode {
    /// Jacobian and gain rebuilt and refactorized every iteration.
    FullNewton,
    /// Constant angle- and magnitude-side gains, factorized once.
    FastDecoupled,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EstimationOptions {
    pub mode: EstimationMode,
    /// Convergence threshold on max |Δx|.
    pub tol: f64,
    pub max_iter: usize,
    pub workers: usize,
    /// Only consulted in fast-decoupled mode.
    pub decoupled_model: DecoupledModel,
}

impl Default for EstimationOptions {
    fn default() -> Self {
        EstimationOptions {
            mode: EstimationMode::FastDecoupled,
            tol: 1e-6,
            max_iter: 50,
            workers: 1,
            decoupled_model: DecoupledModel::default(),
        }
    }
}

/// Accumulated wall time per stage, milliseconds.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct StageTimings {
    pub gain_formulation_ms: f64,
    pub factorization_ms: f64,
    /// h(x), residuals, substitution and state update, summed over iterations.
    pub residual_and_substitution_ms: f64,
    /// RHS formation, summed over iterations.
    pub rhs_ms: f64,
    pub total_ms: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct FactorizationCounts {
    pub symbolic: usize,
    pub numeric: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EstimationResult {
    pub mode: EstimationMode,
    pub state: SystemState,
    pub iterations: usize,
    pub converged: bool,
    /// Mean squared measurement residual at the final state.
    pub mse: f64,
    pub objective: f64,
    pub initial_objective: f64,
    pub max_voltage_residual: f64,
    pub timings: StageTimings,
    /// Per gain system (`G` for full Newton, `G_P` and `G_Q` for decoupled).
    pub factorizations: Vec<(&'static str, FactorizationCounts)>,
    pub level_stats: Vec<(&'static str, LevelStats)>,
}

impl EstimationResult {
    /// Equality of every numeric output, bit for bit, ignoring timings.
    pub fn numerically_identical(&self, other: &EstimationResult) -> bool {
        let bits = |v: &[f64]| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
        self.mode == other.mode
            && self.iterations == other.iterations
            && self.converged == other.converged
            && bits(&self.state.v) == bits(&other.state.v)
            && bits(&self.state.theta) == bits(&other.state.theta)
            && self.mse.to_bits() == other.mse.to_bits()
            && self.objective.to_bits() == other.objective.to_bits()
            && self.max_voltage_residual.to_bits() == other.max_voltage_residual.to_bits()
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EstimateError {
    #[error("invalid options: {0}")]
    InvalidOptions(String),
    #[error("state has {found} buses, graph has {expected}")]
    StateDimension { expected: usize, found: usize },
    #[error(transparent)]
    Measurement(#[from] MeasurementError),
    #[error(transparent)]
    Assembly(#[from] AssemblyError),
    #[error(transparent)]
    Sparse(#[from] SparseError),
    #[error(transparent)]
    Engine(#[from] EngineError),
}

impl EstimateError {
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            EstimateError::Sparse(SparseError::NotPositiveDefinite { .. })
                | EstimateError::Assembly(AssemblyError::Sparse(SparseError::NotPositiveDefinite { .. }))
        )
    }
}

pub fn flat_start(graph: &PowerGraph) -> SystemState {
    SystemState::flat(graph.vertex_count())
}

pub fn check_convergence(dx: &[f64], tol: f64) -> bool {
    max_abs(dx) < tol
}

fn max_abs(v: &[f64]) -> f64 {
    v.iter().fold(0.0, |m, x| m.max(x.abs()))
}

fn ms(since: Instant) -> f64 {
    since.elapsed().as_secs_f64() * 1e3
}

pub fn estimate(
    graph: &PowerGraph,
    pm: &PartitionedMeasurements,
    opts: &EstimationOptions,
) -> Result<EstimationResult, EstimateError> {
    estimate_from(graph, pm, opts, flat_start(graph))
}

/// Runs the estimator from an explicit initial state.
pub fn estimate_from(
    graph: &PowerGraph,
    pm: &PartitionedMeasurements,
    opts: &EstimationOptions,
    initial: SystemState,
) -> Result<EstimationResult, EstimateError> {
    if !opts.tol.is_finite() || opts.tol <= 0.0 {
        return Err(EstimateError::InvalidOptions("tol must be positive".into()));
    }
    if opts.max_iter == 0 {
        return Err(EstimateError::InvalidOptions("max_iter must be at least 1".into()));
    }
    if initial.len() != graph.vertex_count() || initial.theta.len() != initial.len() {
        return Err(EstimateError::StateDimension {
            expected: graph.vertex_count(),
            found: initial.len(),
        });
    }
    if pm.node_count() != graph.vertex_count() {
        return Err(MeasurementError::DimensionMismatch {
            expected: graph.vertex_count(),
            found: pm.node_count(),
        }
        .into());
    }
    if pm.is_empty() {
        return Err(MeasurementError::Empty.into());
    }
    let engine = Engine::new(opts.workers)?;
    let started = Instant::now();
    let mut run = Run {
        graph,
        pm,
        engine: &engine,
        weights: pm.weights(),
        timings: StageTimings::default(),
    };
    let initial_objective = run.objective_at(&initial)?;
    let outcome = match opts.mode {
        EstimationMode::FullNewton => run.full_newton(initial, opts)?,
        EstimationMode::FastDecoupled => run.fast_decoupled(initial, opts)?,
    };

    let h = evaluate_h_with(&engine, graph, &outcome.state, pm);
    let r = residuals(pm, &h)?;
    let max_voltage_residual = pm
        .items()
        .iter()
        .zip(&r)
        .filter(|(m, _)| m.kind == MeasurementKind::Voltage)
        .fold(0.0, |acc: f64, (_, r)| acc.max(r.abs()));
    let mut timings = run.timings;
    timings.total_ms = ms(started);
    Ok(EstimationResult {
        mode: opts.mode,
        state: outcome.state,
        iterations: outcome.iterations,
        converged: outcome.converged,
        mse: mean_squared_error(&r)?,
        objective: objective(&r, pm),
        initial_objective,
        max_voltage_residual,
        timings,
        factorizations: outcome.factorizations,
        level_stats: outcome.level_stats,
    })
}

struct Outcome {
    state: SystemState,
    iterations: usize,
    converged: bool,
    factorizations: Vec<(&'static str, FactorizationCounts)>,
    level_stats: Vec<(&'static str, LevelStats)>,
}

struct Run<'a> {
    graph: &'a PowerGraph,
    pm: &'a PartitionedMeasurements,
    engine: &'a Engine,
    weights: Vec<f64>,
    timings: StageTimings,
}

impl Run<'_> {
    fn objective_at(&self, x: &SystemState) -> Result<f64, EstimateError> {
        let h = evaluate_h_with(self.engine, self.graph, x, self.pm);
        Ok(objective(&residuals(self.pm, &h)?, self.pm))
    }

    fn residual_at(&self, x: &SystemState) -> Result<Vec<f64>, EstimateError> {
        let h = evaluate_h_with(self.engine, self.graph, x, self.pm);
        Ok(residuals(self.pm, &h)?)
    }

    /// Residuals for a decoupled half-step; with `normalize` every power
    /// residual is divided by the voltage of the bus that owns it.
    fn decoupled_residual(&self, x: &SystemState, normalize: bool) -> Result<Vec<f64>, EstimateError> {
        let mut r = self.residual_at(x)?;
        if normalize {
            for (i, &v) in x.v.iter().enumerate() {
                for k in self.pm.node_range(i) {
                    if self.pm.items()[k].kind != MeasurementKind::Voltage {
                        r[k] /= v;
                    }
                }
            }
        }
        Ok(r)
    }

    fn rhs(&self, layout: &StateLayout, local_h: &[LocalH], r: &[f64]) -> Result<Vec<f64>, EstimateError> {
        Ok(assembly::build_rhs(
            self.engine,
            self.graph,
            layout,
            local_h,
            &self.weights,
            r,
        )?)
    }

    fn factor(
        &mut self,
        solver: &mut Option<SparseCholesky>,
        counts: &mut FactorizationCounts,
        gain: &CsrMatrix,
    ) -> Result<(), EstimateError> {
        let t = Instant::now();
        if solver.is_none() {
            *solver = Some(SparseCholesky::analyze(gain, None)?);
            counts.symbolic += 1;
        }
        let chol = solver.as_mut().expect("analyzed above");
        chol.factorize(gain, self.engine)?;
        counts.numeric += 1;
        self.timings.factorization_ms += ms(t);
        Ok(())
    }

    fn full_newton(&mut self, mut x: SystemState, opts: &EstimationOptions) -> Result<Outcome, EstimateError> {
        let n = self.graph.vertex_count();
        let layout = StateLayout::full(n, self.graph.slack_index);
        let mut solver = None;
        let mut counts = FactorizationCounts::default();
        let mut iterations = 0;
        let mut converged = false;

        while iterations < opts.max_iter {
            iterations += 1;
            let t = Instant::now();
            let (local_h, gains) = assembly::full_blocks(self.engine, self.graph, &x, self.pm, &self.weights);
            let gain = assembly::assemble_gain(self.engine, &layout, &gains)?;
            self.timings.gain_formulation_ms += ms(t);

            self.factor(&mut solver, &mut counts, &gain)?;

            let t = Instant::now();
            let r = self.residual_at(&x)?;
            self.timings.residual_and_substitution_ms += ms(t);

            let t = Instant::now();
            let rhs = self.rhs(&layout, &local_h, &r)?;
            self.timings.rhs_ms += ms(t);

            let t = Instant::now();
            let dx = solver.as_ref().expect("factorized").solve(&rhs)?;
            layout.apply(&mut x, &dx);
            self.timings.residual_and_substitution_ms += ms(t);

            if check_convergence(&dx, opts.tol) {
                converged = true;
                break;
            }
        }
        let stats = solver
            .map(|s| s.symbolic().stats())
            .into_iter()
            .map(|s| ("G", s))
            .collect();
        Ok(Outcome {
            state: x,
            iterations,
            converged,
            factorizations: vec![("G", counts)],
            level_stats: stats,
        })
    }

    fn fast_decoupled(&mut self, mut x: SystemState, opts: &EstimationOptions) -> Result<Outcome, EstimateError> {
        let n = self.graph.vertex_count();
        let p_layout = StateLayout::angles(n, Some(self.graph.slack_index));
        let q_layout = StateLayout::magnitudes(n);

        let t = Instant::now();
        let model = opts.decoupled_model;
        let normalize = model == DecoupledModel::Xb;
        let (hp, hq, gp, gq) = assembly::decoupled_blocks(self.engine, self.graph, self.pm, &self.weights, model);
        let gain_p = assembly::assemble_gain(self.engine, &p_layout, &gp)?;
        let gain_q = assembly::assemble_gain(self.engine, &q_layout, &gq)?;
        self.timings.gain_formulation_ms += ms(t);

        let (mut solver_p, mut solver_q) = (None, None);
        let (mut counts_p, mut counts_q) = (FactorizationCounts::default(), FactorizationCounts::default());
        self.factor(&mut solver_p, &mut counts_p, &gain_p)?;
        self.factor(&mut solver_q, &mut counts_q, &gain_q)?;
        let solver_p = solver_p.expect("factorized");
        let solver_q = solver_q.expect("factorized");

        let mut iterations = 0;
        let mut converged = false;
        while iterations < opts.max_iter {
            iterations += 1;

            // Angle half-step.
            let t = Instant::now();
            let r = self.decoupled_residual(&x, normalize)?;
            self.timings.residual_and_substitution_ms += ms(t);
            let t = Instant::now();
            let rhs_p = self.rhs(&p_layout, &hp, &r)?;
            self.timings.rhs_ms += ms(t);
            let t = Instant::now();
            let d_theta = solver_p.solve(&rhs_p)?;
            p_layout.apply(&mut x, &d_theta);

            // Magnitude half-step on residuals at the updated angles.
            let r = self.decoupled_residual(&x, normalize)?;
            self.timings.residual_and_substitution_ms += ms(t);
            let t = Instant::now();
            let rhs_q = self.rhs(&q_layout, &hq, &r)?;
            self.timings.rhs_ms += ms(t);
            let t = Instant::now();
            let d_v = solver_q.solve(&rhs_q)?;
            q_layout.apply(&mut x, &d_v);
            self.timings.residual_and_substitution_ms += ms(t);

            if check_convergence(&d_theta, opts.tol) && check_convergence(&d_v, opts.tol) {
                converged = true;
                break;
            }
        }
        Ok(Outcome {
            state: x,
            iterations,
            converged,
            factorizations: vec![("G_P", counts_p), ("G_Q", counts_q)],
            level_stats: vec![
                ("G_P", solver_p.symbolic().stats()),
                ("G_Q", solver_q.symbolic().stats()),
            ],
        })
    }
}
