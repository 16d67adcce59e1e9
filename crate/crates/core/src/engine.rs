//! Bulk-synchronous vertex execution with deterministic accumulation.
//!
//! A stage runs one kernel per vertex. Kernels see the vertex index, the
//! immutable graph and the immutable previous-superstep state; there is no
//! handle to the outputs being produced in the current superstep, so peer
//! reads within a superstep cannot be expressed. A stage returns only after
//! every vertex has finished, which is the barrier between supersteps.
//!
//! Outputs are collected in vertex order and row accumulation adds
//! contributions in ascending contributor order, so results are bit-identical
//! for any worker count.

use rayon::prelude::*;
use thiserror::Error;

use crate::network::PowerGraph;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EngineError {
    #[error("cannot build a worker pool with {0} workers")]
    Workers(usize),
    #[error("stage `{stage}` failed at vertex {vertex}: {message}")]
    Stage {
        stage: &'static str,
        vertex: usize,
        message: String,
    },
    #[error("contribution from vertex {contributor} targets ({row}, {col}) outside a {dim}x{dim} matrix")]
    OutOfRange {
        contributor: usize,
        row: usize,
        col: usize,
        dim: usize,
    },
}

pub struct VertexStage<F> {
    pub name: &'static str,
    pub kernel: F,
}

impl<F> VertexStage<F> {
    pub fn new(name: &'static str, kernel: F) -> Self {
        VertexStage { name, kernel }
    }
}

/// Row contribution produced by one vertex: `(column, value)` pairs for `row`.
#[derive(Debug, Clone, PartialEq)]
pub struct Accumulator {
    pub contributor: usize,
    pub row: usize,
    pub entries: Vec<(usize, f64)>,
}

pub struct Engine {
    pool: Option<rayon::ThreadPool>,
    workers: usize,
}

impl Engine {
    pub fn new(workers: usize) -> Result<Self, EngineError> {
        if workers == 0 {
            return Err(EngineError::Workers(0));
        }
        let pool = if workers == 1 {
            None
        } else {
            Some(
                rayon::ThreadPoolBuilder::new()
                    .num_threads(workers)
                    .build()
                    .map_err(|_| EngineError::Workers(workers))?,
            )
        };
        Ok(Engine { pool, workers })
    }

    pub fn serial() -> Self {
        Engine { pool: None, workers: 1 }
    }

    pub fn workers(&self) -> usize {
        self.workers
    }

    /// Maps `f` over `0..n`, in parallel when the engine has more than one
    /// worker. Output order always follows the index.
    pub fn map_indexed<T, F>(&self, n: usize, f: F) -> Vec<T>
    where
        T: Send,
        F: Fn(usize) -> T + Sync + Send,
    {
        match &self.pool {
            None => (0..n).map(f).collect(),
            Some(pool) => pool.install(|| (0..n).into_par_iter().map(f).collect()),
        }
    }

    pub fn vertex_map<S, T, F>(&self, graph: &PowerGraph, prev: &S, stage: &VertexStage<F>) -> Vec<T>
    where
        S: Sync + ?Sized,
        T: Send,
        F: Fn(usize, &PowerGraph, &S) -> T + Sync + Send,
    {
        let kernel = &stage.kernel;
        self.map_indexed(graph.vertex_count(), |i| kernel(i, graph, prev))
    }

    /// Like [`Engine::vertex_map`] for fallible kernels. On failure the error of
    /// the lowest failing vertex is reported, independent of scheduling.
    pub fn try_vertex_map<S, T, E, F>(
        &self,
        graph: &PowerGraph,
        prev: &S,
        stage: &VertexStage<F>,
    ) -> Result<Vec<T>, EngineError>
    where
        S: Sync + ?Sized,
        T: Send,
        E: std::fmt::Display + Send,
        F: Fn(usize, &PowerGraph, &S) -> Result<T, E> + Sync + Send,
    {
        let kernel = &stage.kernel;
        let results = self.map_indexed(graph.vertex_count(), |i| kernel(i, graph, prev));
        let mut out = Vec::with_capacity(results.len());
        for (vertex, r) in results.into_iter().enumerate() {
            match r {
                Ok(v) => out.push(v),
                Err(e) => {
                    return Err(EngineError::Stage {
                        stage: stage.name,
                        vertex,
                        message: e.to_string(),
                    })
                }
            }
        }
        Ok(out)
    }

    /// Merges row contributions into `dim` rows of sorted `(column, value)`
    /// lists. Values sharing a column are summed in ascending contributor
    /// order (ties keep input order).
    pub fn accumulate_rows(
        &self,
        dim: usize,
        contributions: &[Accumulator],
    ) -> Result<Vec<Vec<(usize, f64)>>, EngineError> {
        for c in contributions {
            let bad_col = c.entries.iter().map(|&(col, _)| col).find(|&col| col >= dim);
            if c.row >= dim || bad_col.is_some() {
                return Err(EngineError::OutOfRange {
                    contributor: c.contributor,
                    row: c.row,
                    col: bad_col.unwrap_or(0),
                    dim,
                });
            }
        }
        let mut order: Vec<usize> = (0..contributions.len()).collect();
        order.sort_by_key(|&k| contributions[k].contributor);

        let mut buckets: Vec<Vec<(usize, usize, f64)>> = vec![Vec::new(); dim];
        for k in order {
            let c = &contributions[k];
            let bucket = &mut buckets[c.row];
            for &(col, value) in &c.entries {
                bucket.push((col, c.contributor, value));
            }
        }

        let merge = |bucket: &Vec<(usize, usize, f64)>| {
            let mut entries = bucket.clone();
            entries.sort_by_key(|&(col, contributor, _)| (col, contributor));
            let mut row: Vec<(usize, f64)> = Vec::new();
            for (col, _, value) in entries {
                match row.last_mut() {
                    Some((last, sum)) if *last == col => *sum += value,
                    _ => row.push((col, value)),
                }
            }
            row
        };
        Ok(match &self.pool {
            None => buckets.iter().map(merge).collect(),
            Some(pool) => pool.install(|| buckets.par_iter().map(merge).collect()),
        })
    }
}

impl Default for Engine {
    fn default() -> Self {
        Engine::serial()
    }
}
