//! Attributed power network graph: buses as vertices, branches as edges.

use std::collections::HashMap;

use thiserror::Error;

use crate::case_io::{BusType, NetworkCase, RawBranch};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NetworkError {
    #[error("branch {from}-{to} has zero series impedance")]
    SingularBranch { from: u32, to: u32 },
}

/// Per-bus admittance data. `g_ii + j b_ii` is the Y-bus diagonal entry.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct VertexAttr {
    pub g_ii: f64,
    pub b_ii: f64,
    pub gs: f64,
    pub bs: f64,
}

/// Pi-model of one branch plus its Y-bus contributions.
///
/// `g_ff + j b_ff` and `g_tt + j b_tt` are the branch's own contributions to
/// the from- and to-bus diagonals (series plus charging, tap applied);
/// `g_ft + j b_ft` and `g_tf + j b_tf` are the off-diagonal Y-bus entries.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EdgeAttr {
    pub from: usize,
    pub to: usize,
    pub g_ij: f64,
    pub b_ij: f64,
    pub b_sh: f64,
    pub tap: f64,
    pub g_ff: f64,
    pub b_ff: f64,
    pub g_tt: f64,
    pub b_tt: f64,
    pub g_ft: f64,
    pub b_ft: f64,
    pub g_tf: f64,
    pub b_tf: f64,
}

impl EdgeAttr {
    /// Terms of the flow measured at `end` looking into the branch:
    /// `(g_self, b_self, g_mutual, b_mutual, far_end)`.
    pub fn end_terms(&self, end: BranchEnd) -> (f64, f64, f64, f64, usize) {
        match end {
            BranchEnd::From => (self.g_ff, self.b_ff, self.g_ft, self.b_ft, self.to),
            BranchEnd::To => (self.g_tt, self.b_tt, self.g_tf, self.b_tf, self.from),
        }
    }

    pub fn near(&self, end: BranchEnd) -> usize {
        match end {
            BranchEnd::From => self.from,
            BranchEnd::To => self.to,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum BranchEnd {
    From,
    To,
}

pub fn branch_pi_model(branch: &RawBranch) -> Result<EdgeAttr, NetworkError> {
    let z2 = branch.r * branch.r + branch.x * branch.x;
    if z2 == 0.0 {
        return Err(NetworkError::SingularBranch {
            from: branch.from,
            to: branch.to,
        });
    }
    let g = branch.r / z2;
    let b = -branch.x / z2;
    let b_sh = branch.b_charging / 2.0;
    let tap = branch.tap;
    let t2 = tap * tap;
    Ok(EdgeAttr {
        from: 0,
        to: 0,
        g_ij: g,
        b_ij: b,
        b_sh,
        tap,
        g_ff: g / t2,
        b_ff: (b + b_sh) / t2,
        g_tt: g,
        b_tt: b + b_sh,
        g_ft: -g / tap,
        b_ft: -b / tap,
        g_tf: -g / tap,
        b_tf: -b / tap,
    })
}

/// Copy of `graph` in which every series susceptance is replaced by `-1/x`,
/// keeping taps, charging and shunts. Purely resistive branches are left as
/// they are.
pub fn reactance_only(graph: &PowerGraph) -> PowerGraph {
    let mut out = graph.clone();
    for e in &mut out.edges {
        if e.b_ij == 0.0 {
            continue;
        }
        let b = (e.g_ij * e.g_ij + e.b_ij * e.b_ij) / e.b_ij;
        let d = b - e.b_ij;
        let t2 = e.tap * e.tap;
        e.b_ij = b;
        e.b_ff += d / t2;
        e.b_tt += d;
        e.b_ft -= d / e.tap;
        e.b_tf -= d / e.tap;
        out.vertices[e.from].b_ii += d / t2;
        out.vertices[e.to].b_ii += d;
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct PowerGraph {
    pub vertices: Vec<VertexAttr>,
    pub edges: Vec<EdgeAttr>,
    /// Sorted by `(neighbor, edge)`; parallel branches appear once per edge.
    pub adjacency: Vec<Vec<(usize, usize)>>,
    pub slack_index: usize,
    pub bus_ids: Vec<u32>,
    index_of: HashMap<u32, usize>,
}

impl PowerGraph {
    pub fn vertex_count(&self) -> usize {
        self.vertices.len()
    }

    pub fn edge_count(&self) -> usize {
        self.edges.len()
    }

    pub fn index_of(&self, bus_id: u32) -> Option<usize> {
        self.index_of.get(&bus_id).copied()
    }

    pub fn degree(&self, i: usize) -> usize {
        self.adjacency[i].len()
    }

    /// Edge index of the `circuit`-th (1-based) branch joining `a` and `b`,
    /// with the end of the branch that sits at `a`.
    pub fn find_branch(&self, a: usize, b: usize, circuit: u32) -> Option<(usize, BranchEnd)> {
        let edge = self.adjacency[a]
            .iter()
            .filter(|&&(n, _)| n == b)
            .map(|&(_, e)| e)
            .nth(circuit.checked_sub(1)? as usize)?;
        let end = if self.edges[edge].from == a {
            BranchEnd::From
        } else {
            BranchEnd::To
        };
        Some((edge, end))
    }

    /// 1-based ordinal of `edge` among branches joining the same bus pair.
    pub fn circuit_of(&self, edge: usize) -> u32 {
        let e = &self.edges[edge];
        self.adjacency[e.from]
            .iter()
            .filter(|&&(n, _)| n == e.to)
            .position(|&(_, k)| k == edge)
            .map(|p| p as u32 + 1)
            .expect("edge is present in its endpoint's adjacency")
    }

    /// Dense complex Y-bus as `(G, B)` row-major matrices.
    pub fn dense_ybus(&self) -> (Vec<Vec<f64>>, Vec<Vec<f64>>) {
        let n = self.vertex_count();
        let mut g = vec![vec![0.0; n]; n];
        let mut b = vec![vec![0.0; n]; n];
        for (i, v) in self.vertices.iter().enumerate() {
            g[i][i] = v.g_ii;
            b[i][i] = v.b_ii;
        }
        for e in &self.edges {
            g[e.from][e.to] += e.g_ft;
            b[e.from][e.to] += e.b_ft;
            g[e.to][e.from] += e.g_tf;
            b[e.to][e.from] += e.b_tf;
        }
        (g, b)
    }
}

pub fn build_graph(case: &NetworkCase) -> Result<PowerGraph, NetworkError> {
    let n = case.buses.len();
    let index_of: HashMap<u32, usize> = case.buses.iter().enumerate().map(|(i, bus)| (bus.id, i)).collect();
    let mut vertices: Vec<VertexAttr> = case
        .buses
        .iter()
        .map(|bus| VertexAttr {
            g_ii: bus.gs,
            b_ii: bus.bs,
            gs: bus.gs,
            bs: bus.bs,
        })
        .collect();
    let mut edges = Vec::with_capacity(case.branches.len());
    let mut adjacency = vec![Vec::new(); n];

    for (k, branch) in case.branches.iter().enumerate() {
        let mut edge = branch_pi_model(branch)?;
        edge.from = index_of[&branch.from];
        edge.to = index_of[&branch.to];
        vertices[edge.from].g_ii += edge.g_ff;
        vertices[edge.from].b_ii += edge.b_ff;
        vertices[edge.to].g_ii += edge.g_tt;
        vertices[edge.to].b_ii += edge.b_tt;
        adjacency[edge.from].push((edge.to, k));
        adjacency[edge.to].push((edge.from, k));
        edges.push(edge);
    }
    for list in &mut adjacency {
        list.sort_unstable();
    }
    let slack_index = case
        .buses
        .iter()
        .position(|bus| bus.bus_type == BusType::Slack)
        .expect("validated case has a slack bus");

    Ok(PowerGraph {
        vertices,
        edges,
        adjacency,
        slack_index,
        bus_ids: case.buses.iter().map(|bus| bus.id).collect(),
        index_of,
    })
}

/// Vertices reachable from `i` in at most `k` steps, excluding `i`, ascending.
pub fn neighbors_within(graph: &PowerGraph, i: usize, k: usize) -> Vec<usize> {
    let mut seen = vec![false; graph.vertex_count()];
    seen[i] = true;
    let mut frontier = vec![i];
    let mut found = Vec::new();
    for _ in 0..k {
        let mut next = Vec::new();
        for &v in &frontier {
            for &(u, _) in &graph.adjacency[v] {
                if !seen[u] {
                    seen[u] = true;
                    next.push(u);
                    found.push(u);
                }
            }
        }
        frontier = next;
    }
    found.sort_unstable();
    found
}

/// `i` together with its distinct 1-step neighbors, ascending.
pub fn closed_neighborhood(graph: &PowerGraph, i: usize) -> Vec<usize> {
    let mut set: Vec<usize> = graph.adjacency[i].iter().map(|&(n, _)| n).collect();
    set.push(i);
    set.sort_unstable();
    set.dedup();
    set
}
