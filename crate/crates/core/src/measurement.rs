//! Measurement model: types, node partition, h(x) evaluation, synthesis and
//! residual statistics.

use std::ops::Range;

use rand::rngs::StdRng;
use rand::SeedableRng;
use rand_distr::{Distribution, StandardNormal};
use thiserror::Error;

use crate::case_io::{BusType, NetworkCase};
use crate::engine::{Engine, VertexStage};
use crate::network::{BranchEnd, PowerGraph};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum MeasurementKind {
    Voltage,
    PInjection,
    QInjection,
    PFlow,
    QFlow,
}

impl MeasurementKind {
    pub const ALL: [MeasurementKind; 5] = [
        MeasurementKind::Voltage,
        MeasurementKind::PInjection,
        MeasurementKind::QInjection,
        MeasurementKind::PFlow,
        MeasurementKind::QFlow,
    ];

    pub fn code(self) -> &'static str {
        match self {
            MeasurementKind::Voltage => "V",
            MeasurementKind::PInjection => "PI",
            MeasurementKind::QInjection => "QI",
            MeasurementKind::PFlow => "PF",
            MeasurementKind::QFlow => "QF",
        }
    }

    pub fn from_code(code: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|k| k.code() == code)
    }

    pub fn is_bus_quantity(self) -> bool {
        matches!(
            self,
            MeasurementKind::Voltage | MeasurementKind::PInjection | MeasurementKind::QInjection
        )
    }

    /// Active-power quantities form the angle side of the decoupled model.
    pub fn is_active(self) -> bool {
        matches!(self, MeasurementKind::PInjection | MeasurementKind::PFlow)
    }
}

/// Where a measurement is taken, in external bus ids.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Location {
    Bus(u32),
    /// Flow measured at `from` looking towards `to`; `circuit` (1-based)
    /// picks among parallel branches.
    Branch {
        from: u32,
        to: u32,
        circuit: u32,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct Measurement {
    pub kind: MeasurementKind,
    pub location: Location,
    pub value: f64,
    pub sigma2: f64,
}

/// Measurements as read from or written to a file, in file order.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct MeasurementSet {
    measurements: Vec<Measurement>,
}

impl MeasurementSet {
    pub fn new(measurements: Vec<Measurement>) -> Self {
        MeasurementSet { measurements }
    }

    pub fn len(&self) -> usize {
        self.measurements.len()
    }

    pub fn is_empty(&self) -> bool {
        self.measurements.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Measurement> {
        self.measurements.iter()
    }

    pub fn measurements(&self) -> &[Measurement] {
        &self.measurements
    }

    pub fn count_of(&self, kind: MeasurementKind) -> usize {
        self.iter().filter(|m| m.kind == kind).count()
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MeasurementError {
    #[error("measurement {index}: location {location:?} does not exist in the network")]
    UnresolvableLocation { index: usize, location: Location },
    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("empty residual vector")]
    Empty,
}

/// Resolved measurement location in internal indices.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Target {
    Bus(usize),
    Flow { edge: usize, end: BranchEnd },
}

#[derive(Debug, Clone, PartialEq)]
pub struct BoundMeasurement {
    pub kind: MeasurementKind,
    pub target: Target,
    pub value: f64,
    pub sigma2: f64,
    /// Position in the originating [`MeasurementSet`].
    pub source: usize,
}

impl BoundMeasurement {
    pub fn weight(&self) -> f64 {
        1.0 / self.sigma2
    }
}

/// A measurement set bound to a graph and laid out node by node: the
/// measurements owned by vertex `i` occupy `node_range(i)`.
///
/// Within a node the order is V, P injection, Q injection, P flows, Q flows,
/// flows sorted by `(neighbor, edge)`; equal keys keep file order.
#[derive(Debug, Clone, PartialEq)]
pub struct PartitionedMeasurements {
    items: Vec<BoundMeasurement>,
    offsets: Vec<usize>,
}

impl PartitionedMeasurements {
    pub fn bind(graph: &PowerGraph, set: &MeasurementSet) -> Result<Self, MeasurementError> {
        let n = graph.vertex_count();
        // (owner, kind, neighbor, edge, source)
        let mut keyed = Vec::with_capacity(set.len());
        for (index, m) in set.iter().enumerate() {
            let unresolved = || MeasurementError::UnresolvableLocation {
                index,
                location: m.location,
            };
            let (owner, target, neighbor, edge) = match m.location {
                Location::Bus(id) => {
                    let i = graph.index_of(id).ok_or_else(unresolved)?;
                    (i, Target::Bus(i), 0, 0)
                }
                Location::Branch { from, to, circuit } => {
                    let a = graph.index_of(from).ok_or_else(unresolved)?;
                    let b = graph.index_of(to).ok_or_else(unresolved)?;
                    let (edge, end) = graph.find_branch(a, b, circuit).ok_or_else(unresolved)?;
                    (a, Target::Flow { edge, end }, b, edge)
                }
            };
            keyed.push(((owner, m.kind, neighbor, edge, index), target));
        }
        keyed.sort_by_key(|&(key, _)| key);

        let mut offsets = vec![0; n + 1];
        for &((owner, ..), _) in &keyed {
            offsets[owner + 1] += 1;
        }
        for i in 0..n {
            offsets[i + 1] += offsets[i];
        }
        let items = keyed
            .into_iter()
            .map(|((_, kind, _, _, source), target)| {
                let m = &set.measurements[source];
                BoundMeasurement {
                    kind,
                    target,
                    value: m.value,
                    sigma2: m.sigma2,
                    source,
                }
            })
            .collect();
        Ok(PartitionedMeasurements { items, offsets })
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn items(&self) -> &[BoundMeasurement] {
        &self.items
    }

    pub fn node_count(&self) -> usize {
        self.offsets.len() - 1
    }

    pub fn node_range(&self, i: usize) -> Range<usize> {
        self.offsets[i]..self.offsets[i + 1]
    }

    pub fn node(&self, i: usize) -> &[BoundMeasurement] {
        &self.items[self.node_range(i)]
    }

    /// The z_i slices as indices into the originating set.
    pub fn node_partition(&self) -> Vec<Vec<usize>> {
        (0..self.node_count())
            .map(|i| self.node(i).iter().map(|m| m.source).collect())
            .collect()
    }

    pub fn values(&self) -> Vec<f64> {
        self.items.iter().map(|m| m.value).collect()
    }

    pub fn weights(&self) -> Vec<f64> {
        self.items.iter().map(BoundMeasurement::weight).collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SystemState {
    pub v: Vec<f64>,
    pub theta: Vec<f64>,
}

impl SystemState {
    pub fn flat(n: usize) -> Self {
        SystemState {
            v: vec![1.0; n],
            theta: vec![0.0; n],
        }
    }

    /// Truth state of a case with angles referenced to the slack bus.
    pub fn truth(case: &NetworkCase) -> Self {
        let reference = case
            .buses
            .iter()
            .find(|b| b.bus_type == BusType::Slack)
            .map_or(0.0, |b| b.theta_true);
        SystemState {
            v: case.buses.iter().map(|b| b.v_true).collect(),
            theta: case.buses.iter().map(|b| b.theta_true - reference).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.v.len()
    }

    pub fn is_empty(&self) -> bool {
        self.v.is_empty()
    }

    pub fn max_abs_diff(&self, other: &SystemState) -> (f64, f64) {
        let max = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
        (max(&self.v, &other.v), max(&self.theta, &other.theta))
    }
}

/// Mutual-admittance term of an edge as seen from `end`: `(g, b, far)`.
fn mutual(graph: &PowerGraph, edge: usize, end: BranchEnd) -> (f64, f64, usize) {
    let (_, _, g, b, far) = graph.edges[edge].end_terms(end);
    (g, b, far)
}

fn end_at(graph: &PowerGraph, edge: usize, i: usize) -> BranchEnd {
    if graph.edges[edge].from == i {
        BranchEnd::From
    } else {
        BranchEnd::To
    }
}

pub fn p_injection(graph: &PowerGraph, x: &SystemState, i: usize) -> f64 {
    let vi = x.v[i];
    let mut p = vi * vi * graph.vertices[i].g_ii;
    for &(_, e) in &graph.adjacency[i] {
        let (g, b, j) = mutual(graph, e, end_at(graph, e, i));
        let t = x.theta[i] - x.theta[j];
        p += vi * x.v[j] * (g * t.cos() + b * t.sin());
    }
    p
}

pub fn q_injection(graph: &PowerGraph, x: &SystemState, i: usize) -> f64 {
    let vi = x.v[i];
    let mut q = -vi * vi * graph.vertices[i].b_ii;
    for &(_, e) in &graph.adjacency[i] {
        let (g, b, j) = mutual(graph, e, end_at(graph, e, i));
        let t = x.theta[i] - x.theta[j];
        q += vi * x.v[j] * (g * t.sin() - b * t.cos());
    }
    q
}

/// `(P, Q)` flowing into the branch at `end`.
pub fn branch_flow(graph: &PowerGraph, x: &SystemState, edge: usize, end: BranchEnd) -> (f64, f64) {
    let (gs, bs, g, b, j) = graph.edges[edge].end_terms(end);
    let i = graph.edges[edge].near(end);
    let (vi, vj) = (x.v[i], x.v[j]);
    let t = x.theta[i] - x.theta[j];
    let (s, c) = t.sin_cos();
    let p = vi * vi * gs + vi * vj * (g * c + b * s);
    let q = -vi * vi * bs + vi * vj * (g * s - b * c);
    (p, q)
}

pub fn measurement_value(graph: &PowerGraph, x: &SystemState, kind: MeasurementKind, target: Target) -> f64 {
    match (kind, target) {
        (MeasurementKind::Voltage, Target::Bus(i)) => x.v[i],
        (MeasurementKind::PInjection, Target::Bus(i)) => p_injection(graph, x, i),
        (MeasurementKind::QInjection, Target::Bus(i)) => q_injection(graph, x, i),
        (MeasurementKind::PFlow, Target::Flow { edge, end }) => branch_flow(graph, x, edge, end).0,
        (MeasurementKind::QFlow, Target::Flow { edge, end }) => branch_flow(graph, x, edge, end).1,
        _ => unreachable!("binding pairs bus kinds with bus targets"),
    }
}

pub fn evaluate_h(graph: &PowerGraph, x: &SystemState, pm: &PartitionedMeasurements) -> Vec<f64> {
    evaluate_h_with(&Engine::serial(), graph, x, pm)
}

/// h(x) in partition order, one vertex stage producing each node's slice.
pub fn evaluate_h_with(engine: &Engine, graph: &PowerGraph, x: &SystemState, pm: &PartitionedMeasurements) -> Vec<f64> {
    let stage = VertexStage::new("evaluate_h", |i, g: &PowerGraph, x: &SystemState| {
        pm.node(i)
            .iter()
            .map(|m| measurement_value(g, x, m.kind, m.target))
            .collect::<Vec<f64>>()
    });
    engine.vertex_map(graph, x, &stage).concat()
}

/// Per-kind noise standard deviations, p.u.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NoiseSigmas {
    pub voltage: f64,
    pub injection: f64,
    pub flow: f64,
}

impl NoiseSigmas {
    pub const ZERO: NoiseSigmas = NoiseSigmas {
        voltage: 0.0,
        injection: 0.0,
        flow: 0.0,
    };

    pub fn uniform(sigma: f64) -> Self {
        NoiseSigmas {
            voltage: sigma,
            injection: sigma,
            flow: sigma,
        }
    }

    pub fn for_kind(&self, kind: MeasurementKind) -> f64 {
        match kind {
            MeasurementKind::Voltage => self.voltage,
            MeasurementKind::PInjection | MeasurementKind::QInjection => self.injection,
            MeasurementKind::PFlow | MeasurementKind::QFlow => self.flow,
        }
    }
}

impl Default for NoiseSigmas {
    fn default() -> Self {
        NoiseSigmas {
            voltage: 0.004,
            injection: 0.01,
            flow: 0.008,
        }
    }
}

pub const MIN_VARIANCE: f64 = 1e-8;

/// Full measurement set (n voltages, 2n injections, 4m flows) at `truth`,
/// each value perturbed by seeded zero-mean Gaussian noise.
pub fn generate_measurements(graph: &PowerGraph, truth: &SystemState, noise: NoiseSigmas, seed: u64) -> MeasurementSet {
    let mut rng = StdRng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(3 * graph.vertex_count() + 4 * graph.edge_count());
    for i in 0..graph.vertex_count() {
        let id = graph.bus_ids[i];
        let mut targets = vec![
            (MeasurementKind::Voltage, Location::Bus(id), Target::Bus(i)),
            (MeasurementKind::PInjection, Location::Bus(id), Target::Bus(i)),
            (MeasurementKind::QInjection, Location::Bus(id), Target::Bus(i)),
        ];
        for kind in [MeasurementKind::PFlow, MeasurementKind::QFlow] {
            for &(j, edge) in &graph.adjacency[i] {
                let location = Location::Branch {
                    from: id,
                    to: graph.bus_ids[j],
                    circuit: graph.circuit_of(edge),
                };
                let end = end_at(graph, edge, i);
                targets.push((kind, location, Target::Flow { edge, end }));
            }
        }
        for (kind, location, target) in targets {
            let sigma = noise.for_kind(kind);
            let z: f64 = StandardNormal.sample(&mut rng);
            let exact = measurement_value(graph, truth, kind, target);
            let value = if sigma > 0.0 { exact + sigma * z } else { exact };
            out.push(Measurement {
                kind,
                location,
                value,
                sigma2: (sigma * sigma).max(MIN_VARIANCE),
            });
        }
    }
    MeasurementSet::new(out)
}

pub fn residuals(pm: &PartitionedMeasurements, h: &[f64]) -> Result<Vec<f64>, MeasurementError> {
    if h.len() != pm.len() {
        return Err(MeasurementError::DimensionMismatch {
            expected: pm.len(),
            found: h.len(),
        });
    }
    Ok(pm.items().iter().zip(h).map(|(m, h)| m.value - h).collect())
}

/// Weighted sum of squared residuals, J = Σ r² / σ².
pub fn objective(r: &[f64], pm: &PartitionedMeasurements) -> f64 {
    r.iter().zip(pm.items()).map(|(r, m)| r * r / m.sigma2).sum()
}

pub fn mean_squared_error(r: &[f64]) -> Result<f64, MeasurementError> {
    if r.is_empty() {
        return Err(MeasurementError::Empty);
    }
    Ok(r.iter().map(|x| x * x).sum::<f64>() / r.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::case_io::parse_case;
    use crate::network::build_graph;

    const TWO_BUS: &str = "BASE_MVA 100\nBUS\n1 slack 1.0 0 0 0\n2 pq 1.0 -0.1 0 0\nBRANCH\n1 2 0 0.1 0 1\n";

    fn two_bus() -> (PowerGraph, SystemState) {
        let case = parse_case(TWO_BUS).unwrap();
        (build_graph(&case).unwrap(), SystemState::truth(&case))
    }

    #[test]
    fn flow_over_lossless_line() {
        let (g, x) = two_bus();
        let (p, _) = branch_flow(&g, &x, 0, BranchEnd::From);
        // -b sin(0.1) with b = -10
        assert!((p - 10.0 * 0.1f64.sin()).abs() < 1e-14);
        assert!((p - 0.998_334_166_468_281_5).abs() < 1e-14);
    }

    #[test]
    fn flat_state_is_balanced() {
        let (g, _) = two_bus();
        let flat = SystemState::flat(2);
        let set = generate_measurements(&g, &flat, NoiseSigmas::ZERO, 1);
        let pm = PartitionedMeasurements::bind(&g, &set).unwrap();
        let h = evaluate_h(&g, &flat, &pm);
        for (m, v) in pm.items().iter().zip(&h) {
            let want = if m.kind == MeasurementKind::Voltage { 1.0 } else { 0.0 };
            assert!((v - want).abs() < 1e-15, "{:?} {}", m.kind, v);
        }
    }

    #[test]
    fn census_and_partition() {
        let (g, x) = two_bus();
        let set = generate_measurements(&g, &x, NoiseSigmas::default(), 3);
        assert_eq!(set.len(), 3 * 2 + 4);
        let pm = PartitionedMeasurements::bind(&g, &set).unwrap();
        let parts = pm.node_partition();
        assert_eq!(parts.iter().map(Vec::len).sum::<usize>(), set.len());
        let kinds: Vec<_> = pm.node(0).iter().map(|m| m.kind).collect();
        assert_eq!(
            kinds,
            vec![
                MeasurementKind::Voltage,
                MeasurementKind::PInjection,
                MeasurementKind::QInjection,
                MeasurementKind::PFlow,
                MeasurementKind::QFlow
            ]
        );
        for m in pm.node(1) {
            if let Target::Flow { edge, end } = m.target {
                assert_eq!(g.edges[edge].near(end), 1);
            }
        }
    }

    #[test]
    fn noiseless_and_seeded() {
        let (g, x) = two_bus();
        let clean = generate_measurements(&g, &x, NoiseSigmas::ZERO, 9);
        let pm = PartitionedMeasurements::bind(&g, &clean).unwrap();
        assert_eq!(pm.values(), evaluate_h(&g, &x, &pm));
        assert!(clean.iter().all(|m| m.sigma2 == MIN_VARIANCE));
        let a = generate_measurements(&g, &x, NoiseSigmas::default(), 42);
        let b = generate_measurements(&g, &x, NoiseSigmas::default(), 42);
        let c = generate_measurements(&g, &x, NoiseSigmas::default(), 43);
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn generator_standard_deviation() {
        let (g, x) = two_bus();
        let noise = NoiseSigmas {
            voltage: 0.01,
            injection: 0.0,
            flow: 0.0,
        };
        let samples: Vec<f64> = (0..10_000)
            .map(|seed| generate_measurements(&g, &x, noise, seed).measurements()[0].value - 1.0)
            .collect();
        let mean = samples.iter().sum::<f64>() / samples.len() as f64;
        let var = samples.iter().map(|s| (s - mean).powi(2)).sum::<f64>() / (samples.len() - 1) as f64;
        let std = var.sqrt();
        assert!((0.009..=0.011).contains(&std), "std = {std}");
    }

    #[test]
    fn unknown_location_is_unresolvable() {
        let (g, _) = two_bus();
        let set = MeasurementSet::new(vec![Measurement {
            kind: MeasurementKind::PFlow,
            location: Location::Branch {
                from: 2,
                to: 7,
                circuit: 1,
            },
            value: 0.0,
            sigma2: 1.0,
        }]);
        assert!(matches!(
            PartitionedMeasurements::bind(&g, &set),
            Err(MeasurementError::UnresolvableLocation { index: 0, .. })
        ));
    }

    #[test]
    fn residual_and_statistics() {
        let (g, x) = two_bus();
        let set = generate_measurements(&g, &x, NoiseSigmas::ZERO, 0);
        let pm = PartitionedMeasurements::bind(&g, &set).unwrap();
        let h = evaluate_h(&g, &x, &pm);
        let r = residuals(&pm, &h).unwrap();
        assert!(r.iter().all(|&v| v == 0.0));
        let mut shifted = h.clone();
        shifted[3] -= 0.5;
        let r = residuals(&pm, &shifted).unwrap();
        for (k, v) in r.iter().enumerate() {
            assert_eq!(*v, if k == 3 { 0.5 } else { 0.0 });
        }
        assert!(matches!(
            residuals(&pm, &h[..3]),
            Err(MeasurementError::DimensionMismatch { expected: 10, found: 3 })
        ));
        assert_eq!(objective(&vec![0.0; pm.len()], &pm), 0.0);
        assert_eq!(mean_squared_error(&[0.0; 7]).unwrap(), 0.0);
        assert!((mean_squared_error(&[0.3, 0.4]).unwrap() - 0.125).abs() < 1e-16);
        assert_eq!(mean_squared_error(&[]), Err(MeasurementError::Empty));
    }

    #[test]
    fn single_weighted_residual() {
        let (g, _) = two_bus();
        let set = MeasurementSet::new(vec![Measurement {
            kind: MeasurementKind::Voltage,
            location: Location::Bus(1),
            value: 1.1,
            sigma2: 0.01,
        }]);
        let pm = PartitionedMeasurements::bind(&g, &set).unwrap();
        assert!((objective(&[0.1], &pm) - 1.0).abs() < 1e-15);
    }
}
