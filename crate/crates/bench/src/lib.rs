//! Shared fixtures for the benchmarks.

use std::sync::Arc;

use geolp::field::TensorField;
use geolp::geometry::{build_cache, build_grid, GeometryCache, MetricSpec};
use geolp::sample::fourier_field;

/// Conformal torus of side `n` used by every benchmark.
pub fn cache(n: usize) -> Arc<GeometryCache> {
    let grid = build_grid(n, n, std::f64::consts::TAU, std::f64::consts::TAU, &MetricSpec::conformal_cos(0.3))
        .expect("valid grid");
    Arc::new(build_cache(&grid))
}

pub fn field(cache: &GeometryCache, rank: usize) -> TensorField {
    fourier_field(cache, rank, 7, 0, 4, 1.1)
}
