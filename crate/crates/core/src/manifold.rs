use std::f64::consts::TAU;
use std::sync::{Arc, Mutex};

use crate::calculus::{build_calculus, FunctionalCalculus, DENSE_LIMIT};
use crate::error::{Error, Result};
use crate::geometry::{build_cache, build_grid, GeometryCache, MetricGrid, MetricSpec};
use crate::operators::{assemble_laplacian, LaplaceOperator};

/// A geometry plus lazily built Laplacians and functional calculi for ranks 0 to 2.
pub struct Manifold {
    pub cache: Arc<GeometryCache>,
    pub label: String,
    pub dense_limit: usize,
    ops: [Mutex<Option<Arc<LaplaceOperator>>>; 3],
    calc: [Mutex<Option<Arc<dyn FunctionalCalculus>>>; 3],
}

impl Manifold {
    pub fn new(grid: &MetricGrid, label: impl Into<String>) -> Self {
        Manifold {
            cache: Arc::new(build_cache(grid)),
            label: label.into(),
            dense_limit: DENSE_LIMIT,
            ops: Default::default(),
            calc: Default::default(),
        }
    }

    /// Square `2 pi`-periodic torus with `n x n` nodes.
    pub fn torus(n: usize, spec: &MetricSpec, label: impl Into<String>) -> Result<Self> {
        Ok(Self::new(&build_grid(n, n, TAU, TAU, spec)?, label))
    }

    pub fn with_dense_limit(mut self, limit: usize) -> Self {
        self.dense_limit = limit;
        self
    }

    pub fn n(&self) -> usize {
        self.cache.n1()
    }

    pub fn laplacian(&self, rank: usize) -> Result<Arc<LaplaceOperator>> {
        if rank > 2 {
            return Err(Error::RankTooHigh(rank));
        }
        let mut slot = self.ops[rank].lock().unwrap();
        if let Some(op) = slot.as_ref() {
            return Ok(op.clone());
        }
        let op = Arc::new(assemble_laplacian(self.cache.clone(), rank)?);
        *slot = Some(op.clone());
        Ok(op)
    }

    pub fn calculus(&self, rank: usize) -> Result<Arc<dyn FunctionalCalculus>> {
        if rank > 2 {
            return Err(Error::RankTooHigh(rank));
        }
        let op = self.laplacian(rank)?;
        let mut slot = self.calc[rank].lock().unwrap();
        if let Some(c) = slot.as_ref() {
            return Ok(c.clone());
        }
        let c = build_calculus(op, self.dense_limit)?;
        *slot = Some(c.clone());
        Ok(c)
    }

    /// Drop a cached calculus to free its memory.
    pub fn release(&self, rank: usize) {
        if rank <= 2 {
            *self.calc[rank].lock().unwrap() = None;
        }
    }
}
