#![allow(dead_code, clippy::needless_range_loop)]

use gse_core::assembly::StateVar;
use gse_core::assembly::{jacobian_entries, LocalGain, StateLayout};
use gse_core::measurement::{evaluate_h, generate_measurements, NoiseSigmas};
use gse_core::{build_graph, parse_case, NetworkCase, PartitionedMeasurements, PowerGraph, SystemState};
use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};

pub const FIXTURES: [&str; 4] = ["case2", "case5", "ieee14", "ieee118"];

pub fn load(name: &str) -> NetworkCase {
    let path = format!("{}/fixtures/{name}.case", env!("CARGO_MANIFEST_DIR"));
    let text = std::fs::read_to_string(&path).unwrap_or_else(|e| panic!("{path}: {e}"));
    parse_case(&text).unwrap_or_else(|e| panic!("{path}: {e}"))
}

pub struct Fixture {
    pub case: NetworkCase,
    pub graph: PowerGraph,
    pub truth: SystemState,
}

pub fn fixture(name: &str) -> Fixture {
    let case = load(name);
    let graph = build_graph(&case).unwrap();
    let truth = SystemState::truth(&case);
    Fixture { case, graph, truth }
}

impl Fixture {
    pub fn measurements(&self, noise: NoiseSigmas, seed: u64) -> PartitionedMeasurements {
        let set = generate_measurements(&self.graph, &self.truth, noise, seed);
        PartitionedMeasurements::bind(&self.graph, &set).unwrap()
    }
}

/// Random state with v in [0.9, 1.1], angles in [-0.5, 0.5] and the slack at 0.
pub fn random_state(graph: &PowerGraph, rng: &mut StdRng) -> SystemState {
    let n = graph.vertex_count();
    let mut x = SystemState {
        v: (0..n).map(|_| rng.gen_range(0.9..1.1)).collect(),
        theta: (0..n).map(|_| rng.gen_range(-0.5..0.5)).collect(),
    };
    x.theta[graph.slack_index] = 0.0;
    x
}

pub fn rng(seed: u64) -> StdRng {
    StdRng::seed_from_u64(seed)
}

/// Dense `H` (measurements x layout) straight from the analytic entries.
pub fn dense_h(
    graph: &PowerGraph,
    x: &SystemState,
    pm: &PartitionedMeasurements,
    layout: &StateLayout,
) -> Vec<Vec<f64>> {
    pm.items()
        .iter()
        .map(|m| {
            let mut row = vec![0.0; layout.dim()];
            for (var, d) in jacobian_entries(graph, x, m) {
                if let Some(c) = layout.index(var) {
                    row[c] += d;
                }
            }
            row
        })
        .collect()
}

/// Dense `Hᵀ diag(w) H`.
pub fn dense_gain(h: &[Vec<f64>], w: &[f64]) -> Vec<Vec<f64>> {
    let dim = h.first().map_or(0, Vec::len);
    let mut g = vec![vec![0.0; dim]; dim];
    for (row, &wk) in h.iter().zip(w) {
        for a in 0..dim {
            if row[a] == 0.0 {
                continue;
            }
            for b in 0..dim {
                g[a][b] += row[a] * wk * row[b];
            }
        }
    }
    g
}

/// Every local block added straight into a dense matrix.
pub fn scatter_sum(layout: &StateLayout, gains: &[LocalGain]) -> Vec<Vec<f64>> {
    let dim = layout.dim();
    let mut g = vec![vec![0.0; dim]; dim];
    for block in gains {
        for (a, &va) in block.cols.iter().enumerate() {
            let Some(r) = layout.index(va) else { continue };
            for (b, &vb) in block.cols.iter().enumerate() {
                if let Some(c) = layout.index(vb) {
                    g[r][c] += block.at(a, b);
                }
            }
        }
    }
    g
}

pub fn frobenius(a: &[Vec<f64>]) -> f64 {
    a.iter().flatten().map(|v| v * v).sum::<f64>().sqrt()
}

pub fn relative_frobenius(a: &[Vec<f64>], b: &[Vec<f64>]) -> f64 {
    let diff: Vec<Vec<f64>> = a
        .iter()
        .zip(b)
        .map(|(ra, rb)| ra.iter().zip(rb).map(|(x, y)| x - y).collect())
        .collect();
    frobenius(&diff) / frobenius(b)
}

/// Brute-force symbolic Cholesky on a dense boolean pattern: the lower
/// pattern of L (row-wise, ascending, diagonal included) and the etree.
pub fn brute_force_symbolic(pattern: &[Vec<bool>]) -> (Vec<Vec<usize>>, Vec<Option<usize>>) {
    let n = pattern.len();
    let mut filled = pattern.to_vec();
    for k in 0..n {
        let below: Vec<usize> = (k + 1..n).filter(|&i| filled[i][k]).collect();
        for &i in &below {
            for &j in &below {
                filled[i][j] = true;
            }
        }
    }
    let rows = (0..n)
        .map(|i| (0..=i).filter(|&j| j == i || filled[i][j]).collect())
        .collect();
    let parent = (0..n).map(|k| (k + 1..n).find(|&i| filled[i][k])).collect();
    (rows, parent)
}

/// Random symmetric pattern with a full diagonal.
pub fn random_pattern(rng: &mut StdRng, n: usize, density: f64) -> Vec<Vec<bool>> {
    let mut p = vec![vec![false; n]; n];
    for i in 0..n {
        p[i][i] = true;
        for j in 0..i {
            if rng.gen_bool(density) {
                p[i][j] = true;
                p[j][i] = true;
            }
        }
    }
    p
}

/// Diagonally dominant SPD matrix on `pattern`.
pub fn spd_on_pattern(rng: &mut StdRng, pattern: &[Vec<bool>]) -> Vec<Vec<f64>> {
    let n = pattern.len();
    let mut a = vec![vec![0.0; n]; n];
    for i in 0..n {
        for j in 0..i {
            if pattern[i][j] {
                let v = rng.gen_range(-1.0..1.0);
                a[i][j] = v;
                a[j][i] = v;
            }
        }
    }
    for i in 0..n {
        a[i][i] = 1.0 + a[i].iter().map(|v: &f64| v.abs()).sum::<f64>();
    }
    a
}

/// Dense Cholesky, row-oriented.
pub fn dense_cholesky(a: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let n = a.len();
    let mut l = vec![vec![0.0; n]; n];
    for i in 0..n {
        for j in 0..=i {
            let s: f64 = (0..j).map(|k| l[i][k] * l[j][k]).sum();
            if i == j {
                l[i][i] = (a[i][i] - s).sqrt();
            } else {
                l[i][j] = (a[i][j] - s) / l[j][j];
            }
        }
    }
    l
}

/// Largest entry-wise deviation between analytic and central-difference
/// derivatives, relative to max(|analytic|, 1).
pub fn jacobian_fd_error(name: &str, seed: u64) -> f64 {
    let f = fixture(name);
    let pm = f.measurements(NoiseSigmas::ZERO, 0);
    let x = random_state(&f.graph, &mut rng(seed));
    let n = f.graph.vertex_count();
    let step = 1e-6;
    let mut worst: f64 = 0.0;
    let vars: Vec<StateVar> = (0..n)
        .flat_map(|k| [StateVar::Angle(k), StateVar::Magnitude(k)])
        .collect();
    let analytic: Vec<Vec<(StateVar, f64)>> = pm.items().iter().map(|m| jacobian_entries(&f.graph, &x, m)).collect();
    for var in vars {
        let shifted = |d: f64| {
            let mut y = x.clone();
            match var {
                StateVar::Angle(k) => y.theta[k] += d,
                StateVar::Magnitude(k) => y.v[k] += d,
            }
            evaluate_h(&f.graph, &y, &pm)
        };
        let (hp, hm) = (shifted(step), shifted(-step));
        for (row, entries) in analytic.iter().enumerate() {
            let a: f64 = entries.iter().filter(|(v, _)| *v == var).map(|(_, d)| d).sum();
            let fd = (hp[row] - hm[row]) / (2.0 * step);
            worst = worst.max((a - fd).abs() / a.abs().max(1.0));
        }
    }
    worst
}
