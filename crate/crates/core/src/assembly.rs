//! Node-based Jacobian, gain and right-hand-side assembly.
//!
//! Every vertex builds dense blocks over its closed neighborhood (itself and
//! its 1-step neighbors). Gain blocks are split into rows, routed to the
//! global row they belong to and summed there; the merged rows form the CSR
//! gain matrix. Local blocks always carry the slack angle column. The
//! [`StateLayout`] used for scattering decides whether it survives.

use thiserror::Error;

use crate::engine::{Accumulator, Engine, EngineError, VertexStage};
use crate::measurement::{BoundMeasurement, MeasurementKind, PartitionedMeasurements, SystemState, Target};
use crate::network::{closed_neighborhood, reactance_only, BranchEnd, PowerGraph};
use crate::sparse::{CsrMatrix, SparseError};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AssemblyError {
    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error(transparent)]
    Engine(#[from] EngineError),
    #[error(transparent)]
    Sparse(#[from] SparseError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum StateVar {
    Angle(usize),
    Magnitude(usize),
}

/// Maps bus state variables to positions in a global state vector.
#[derive(Debug, Clone, PartialEq)]
pub struct StateLayout {
    angle: Vec<Option<usize>>,
    magnitude: Vec<Option<usize>>,
    dim: usize,
}

impl StateLayout {
    fn build(n: usize, slack: Option<usize>, angles: bool, magnitudes: bool) -> Self {
        let mut next = 0;
        let mut angle = vec![None; n];
        if angles {
            for (k, slot) in angle.iter_mut().enumerate() {
                if Some(k) != slack {
                    *slot = Some(next);
                    next += 1;
                }
            }
        }
        let mut magnitude = vec![None; n];
        if magnitudes {
            for slot in magnitude.iter_mut() {
                *slot = Some(next);
                next += 1;
            }
        }
        StateLayout {
            angle,
            magnitude,
            dim: next,
        }
    }

    /// Non-slack angles followed by all magnitudes: 2n - 1 unknowns.
    pub fn full(n: usize, slack: usize) -> Self {
        Self::build(n, Some(slack), true, true)
    }

    /// Every angle and magnitude, slack included (2n).
    pub fn full_with_slack(n: usize) -> Self {
        Self::build(n, None, true, true)
    }

    /// Angle-side system of the decoupled model.
    pub fn angles(n: usize, slack: Option<usize>) -> Self {
        Self::build(n, slack, true, false)
    }

    /// Magnitude-side system of the decoupled model.
    pub fn magnitudes(n: usize) -> Self {
        Self::build(n, None, false, true)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn index(&self, var: StateVar) -> Option<usize> {
        match var {
            StateVar::Angle(k) => self.angle[k],
            StateVar::Magnitude(k) => self.magnitude[k],
        }
    }

    /// Adds `dx` onto `state` wherever this layout has a position.
    pub fn apply(&self, state: &mut SystemState, dx: &[f64]) {
        for k in 0..state.len() {
            if let Some(g) = self.angle[k] {
                state.theta[k] += dx[g];
            }
            if let Some(g) = self.magnitude[k] {
                state.v[k] += dx[g];
            }
        }
    }
}

/// Dense Jacobian block of one node: rows are positions in the partitioned
/// measurement vector, columns are state variables.
#[derive(Debug, Clone, PartialEq)]
pub struct LocalH {
    pub vertex: usize,
    pub rows: Vec<usize>,
    pub cols: Vec<StateVar>,
    /// Row-major `rows.len() x cols.len()`.
    pub values: Vec<f64>,
}

impl LocalH {
    pub fn shape(&self) -> (usize, usize) {
        (self.rows.len(), self.cols.len())
    }

    pub fn at(&self, r: usize, c: usize) -> f64 {
        self.values[r * self.cols.len() + c]
    }

    pub fn col_position(&self, var: StateVar) -> Option<usize> {
        self.cols.iter().position(|&c| c == var)
    }
}

/// Dense symmetric gain block of one node over `cols`.
#[derive(Debug, Clone, PartialEq)]
pub struct LocalGain {
    pub vertex: usize,
    pub cols: Vec<StateVar>,
    pub values: Vec<f64>,
}

impl LocalGain {
    pub fn size(&self) -> usize {
        self.cols.len()
    }

    pub fn at(&self, r: usize, c: usize) -> f64 {
        self.values[r * self.cols.len() + c]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DecoupledPair {
    /// P injections and P flows against angle columns.
    pub p: LocalH,
    /// V, Q injections and Q flows against magnitude columns.
    pub q: LocalH,
}

fn full_columns(graph: &PowerGraph, i: usize) -> Vec<StateVar> {
    let nbhd = closed_neighborhood(graph, i);
    nbhd.iter()
        .map(|&k| StateVar::Angle(k))
        .chain(nbhd.iter().map(|&k| StateVar::Magnitude(k)))
        .collect()
}

/// Analytic partial derivatives of one measurement. Entries may repeat a
/// variable; callers add them up.
pub fn jacobian_entries(graph: &PowerGraph, x: &SystemState, m: &BoundMeasurement) -> Vec<(StateVar, f64)> {
    use StateVar::Magnitude;
    match (m.kind, m.target) {
        (MeasurementKind::Voltage, Target::Bus(i)) => vec![(Magnitude(i), 1.0)],
        (kind @ (MeasurementKind::PInjection | MeasurementKind::QInjection), Target::Bus(i)) => {
            let active = kind == MeasurementKind::PInjection;
            let vi = x.v[i];
            let diag = if active {
                2.0 * vi * graph.vertices[i].g_ii
            } else {
                -2.0 * vi * graph.vertices[i].b_ii
            };
            let mut out = vec![(Magnitude(i), diag)];
            for &(j, e) in &graph.adjacency[i] {
                let end = if graph.edges[e].from == i {
                    BranchEnd::From
                } else {
                    BranchEnd::To
                };
                let (_, _, g, b, _) = graph.edges[e].end_terms(end);
                mutual_derivatives(&mut out, x, i, j, g, b, active);
            }
            out
        }
        (kind @ (MeasurementKind::PFlow | MeasurementKind::QFlow), Target::Flow { edge, end }) => {
            let active = kind == MeasurementKind::PFlow;
            let (gs, bs, g, b, j) = graph.edges[edge].end_terms(end);
            let i = graph.edges[edge].near(end);
            let vi = x.v[i];
            let self_term = if active { 2.0 * vi * gs } else { -2.0 * vi * bs };
            let mut out = vec![(Magnitude(i), self_term)];
            mutual_derivatives(&mut out, x, i, j, g, b, active);
            out
        }
        _ => unreachable!("bound measurements pair bus kinds with bus targets"),
    }
}

/// Derivatives of `vi vj (g cos t + b sin t)` (active) or
/// `vi vj (g sin t - b cos t)` (reactive), `t = θi - θj`.
fn mutual_derivatives(
    out: &mut Vec<(StateVar, f64)>,
    x: &SystemState,
    i: usize,
    j: usize,
    g: f64,
    b: f64,
    active: bool,
) {
    let (vi, vj) = (x.v[i], x.v[j]);
    let (s, c) = (x.theta[i] - x.theta[j]).sin_cos();
    let (value, d_angle) = if active {
        (g * c + b * s, vi * vj * (-g * s + b * c))
    } else {
        (g * s - b * c, vi * vj * (g * c + b * s))
    };
    out.push((StateVar::Angle(i), d_angle));
    out.push((StateVar::Angle(j), -d_angle));
    out.push((StateVar::Magnitude(i), vj * value));
    out.push((StateVar::Magnitude(j), vi * value));
}

fn dense_block(
    graph: &PowerGraph,
    x: &SystemState,
    pm: &PartitionedMeasurements,
    i: usize,
    rows: Vec<usize>,
    cols: Vec<StateVar>,
) -> LocalH {
    let width = cols.len();
    let mut values = vec![0.0; rows.len() * width];
    for (r, &row) in rows.iter().enumerate() {
        for (var, d) in jacobian_entries(graph, x, &pm.items()[row]) {
            // Variables outside `cols` only occur for the decoupled split.
            if let Some(c) = cols.iter().position(|&v| v == var) {
                values[r * width + c] += d;
            }
        }
    }
    LocalH {
        vertex: i,
        rows,
        cols,
        values,
    }
}

pub fn local_h_full(graph: &PowerGraph, x: &SystemState, pm: &PartitionedMeasurements, i: usize) -> LocalH {
    dense_block(graph, x, pm, i, pm.node_range(i).collect(), full_columns(graph, i))
}

/// Constant decoupled blocks: the exact Jacobian at flat start, restricted to
/// (P rows, angle columns) and (V/Q rows, magnitude columns).
pub fn local_h_decoupled(graph: &PowerGraph, pm: &PartitionedMeasurements, i: usize) -> DecoupledPair {
    local_h_decoupled_split(graph, graph, pm, i)
}

/// Decoupled blocks with the P side taken from `p_graph` and the Q side from
/// `q_graph`, both evaluated at flat start. The graphs must share topology.
pub fn local_h_decoupled_split(
    p_graph: &PowerGraph,
    q_graph: &PowerGraph,
    pm: &PartitionedMeasurements,
    i: usize,
) -> DecoupledPair {
    let flat = SystemState::flat(q_graph.vertex_count());
    let nbhd = closed_neighborhood(q_graph, i);
    let (p_rows, q_rows): (Vec<usize>, Vec<usize>) = pm.node_range(i).partition(|&r| pm.items()[r].kind.is_active());
    let p = dense_block(
        p_graph,
        &flat,
        pm,
        i,
        p_rows,
        nbhd.iter().map(|&k| StateVar::Angle(k)).collect(),
    );
    let q = dense_block(
        q_graph,
        &flat,
        pm,
        i,
        q_rows,
        nbhd.iter().map(|&k| StateVar::Magnitude(k)).collect(),
    );
    DecoupledPair { p, q }
}

/// `Hᵀ diag(w) H` over the block's columns; `weights` is indexed by global
/// measurement position.
pub fn local_gain(h: &LocalH, weights: &[f64]) -> LocalGain {
    let (nr, nc) = h.shape();
    let mut values = vec![0.0; nc * nc];
    for a in 0..nc {
        for b in a..nc {
            let mut s = 0.0;
            for r in 0..nr {
                s += h.at(r, a) * weights[h.rows[r]] * h.at(r, b);
            }
            values[a * nc + b] = s;
            values[b * nc + a] = s;
        }
    }
    LocalGain {
        vertex: h.vertex,
        cols: h.cols.clone(),
        values,
    }
}

/// Row contributions of each gain block under `layout`.
pub fn gain_contributions(layout: &StateLayout, gains: &[LocalGain]) -> Vec<Accumulator> {
    let mut out = Vec::new();
    for gain in gains {
        let map: Vec<Option<usize>> = gain.cols.iter().map(|&v| layout.index(v)).collect();
        for (a, ga) in map.iter().enumerate() {
            let Some(row) = *ga else { continue };
            let entries = map
                .iter()
                .enumerate()
                .filter_map(|(b, gb)| gb.map(|col| (col, gain.at(a, b))))
                .collect();
            out.push(Accumulator {
                contributor: gain.vertex,
                row,
                entries,
            });
        }
    }
    out
}

/// System gain matrix `Σ G_i`, merged row by row.
pub fn assemble_gain(engine: &Engine, layout: &StateLayout, gains: &[LocalGain]) -> Result<CsrMatrix, AssemblyError> {
    let rows = engine.accumulate_rows(layout.dim(), &gain_contributions(layout, gains))?;
    Ok(CsrMatrix::from_rows(layout.dim(), &rows)?)
}

/// `Σ H_iᵀ R_i⁻¹ r_i` in the layout's state space. Local products run as a
/// vertex stage; the scatter adds them in vertex order.
pub fn build_rhs(
    engine: &Engine,
    graph: &PowerGraph,
    layout: &StateLayout,
    local_h: &[LocalH],
    weights: &[f64],
    r: &[f64],
) -> Result<Vec<f64>, AssemblyError> {
    if r.len() != weights.len() {
        return Err(AssemblyError::DimensionMismatch {
            expected: weights.len(),
            found: r.len(),
        });
    }
    if local_h.len() != graph.vertex_count() {
        return Err(AssemblyError::DimensionMismatch {
            expected: graph.vertex_count(),
            found: local_h.len(),
        });
    }
    let stage = VertexStage::new("rhs", |i, _: &PowerGraph, r: &[f64]| {
        let h: &LocalH = &local_h[i];
        let (nr, nc) = h.shape();
        (0..nc)
            .map(|c| {
                let mut s = 0.0;
                for k in 0..nr {
                    let row = h.rows[k];
                    s += h.at(k, c) * weights[row] * r[row];
                }
                s
            })
            .collect::<Vec<f64>>()
    });
    let locals = engine.vertex_map(graph, r, &stage);
    let mut rhs = vec![0.0; layout.dim()];
    for (h, local) in local_h.iter().zip(locals) {
        for (&var, value) in h.cols.iter().zip(local) {
            if let Some(g) = layout.index(var) {
                rhs[g] += value;
            }
        }
    }
    Ok(rhs)
}

/// Runs `local_h_full` and `local_gain` as one vertex stage.
pub fn full_blocks(
    engine: &Engine,
    graph: &PowerGraph,
    x: &SystemState,
    pm: &PartitionedMeasurements,
    weights: &[f64],
) -> (Vec<LocalH>, Vec<LocalGain>) {
    let stage = VertexStage::new("local_h_full", |i, g: &PowerGraph, x: &SystemState| {
        let h = local_h_full(g, x, pm, i);
        let gain = local_gain(&h, weights);
        (h, gain)
    });
    engine.vertex_map(graph, x, &stage).into_iter().unzip()
}

/// How the constant decoupled blocks are formed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum DecoupledModel {
    /// Both sides are the exact Jacobian at flat start.
    FlatStart,
    /// P side built from series reactances only (r neglected), Q side exact
    /// at flat start; power residuals are divided by the owning bus voltage.
    /// Converges markedly faster on branches with a high R/X ratio.
    #[default]
    Xb,
}

/// Decoupled blocks for every vertex: `(P blocks, Q blocks, P gains, Q gains)`.
pub fn decoupled_blocks(
    engine: &Engine,
    graph: &PowerGraph,
    pm: &PartitionedMeasurements,
    weights: &[f64],
    model: DecoupledModel,
) -> (Vec<LocalH>, Vec<LocalH>, Vec<LocalGain>, Vec<LocalGain>) {
    let p_graph = match model {
        DecoupledModel::FlatStart => None,
        DecoupledModel::Xb => Some(reactance_only(graph)),
    };
    let p_graph = p_graph.as_ref().unwrap_or(graph);
    let stage = VertexStage::new("local_h_decoupled", |i, g: &PowerGraph, _: &()| {
        let pair = local_h_decoupled_split(p_graph, g, pm, i);
        let gp = local_gain(&pair.p, weights);
        let gq = local_gain(&pair.q, weights);
        (pair, gp, gq)
    });
    let mut hp = Vec::new();
    let mut hq = Vec::new();
    let mut gp = Vec::new();
    let mut gq = Vec::new();
    for (pair, p, q) in engine.vertex_map(graph, &(), &stage) {
        hp.push(pair.p);
        hq.push(pair.q);
        gp.push(p);
        gq.push(q);
    }
    (hp, hq, gp, gq)
}
