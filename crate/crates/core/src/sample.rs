//! Seeded random tensor fields.

use std::f64::consts::PI;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::calculus::FunctionalCalculus;
use crate::error::{Error, Result};
use crate::field::{ncomp, TensorField};
use crate::geometry::GeometryCache;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Synthesis {
    /// Eigenfield coefficients `z_i * lambda_i^{-decay/2}` (weight 1 on the kernel),
    /// optionally dropping modes above `band_limit`.
    Eigen { band_limit: Option<f64> },
    /// Trigonometric polynomial with integer wave vectors `|k| <= max_wavenumber`
    /// and amplitudes `|k|^{-decay}`; the same continuum field on every grid.
    Fourier { max_wavenumber: u32 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SampleSpec {
    pub seed: u64,
    pub count: usize,
    pub rank: usize,
    pub spectral_decay: f64,
    pub synthesis: Synthesis,
}

impl SampleSpec {
    pub fn new(seed: u64, count: usize, rank: usize, synthesis: Synthesis) -> Self {
        SampleSpec { seed, count, rank, spectral_decay: 1.1, synthesis }
    }
    pub fn fourier(seed: u64, count: usize, rank: usize, max_wavenumber: u32) -> Self {
        Self::new(seed, count, rank, Synthesis::Fourier { max_wavenumber })
    }
    pub fn eigen(seed: u64, count: usize, rank: usize) -> Self {
        Self::new(seed, count, rank, Synthesis::Eigen { band_limit: None })
    }
    pub fn decay(mut self, d: f64) -> Self {
        self.spectral_decay = d;
        self
    }
}

fn rng_for(seed: u64, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64 + 1);
    rng
}

/// Trigonometric polynomial field with the given wave content, evaluated on the grid.
pub fn fourier_field(cache: &GeometryCache, rank: usize, seed: u64, index: usize, kmax: u32, decay: f64) -> TensorField {
    let g = &cache.grid;
    let nc = ncomp(rank);
    let mut rng = rng_for(seed, index);
    let k = kmax as i32;
    let mut modes: Vec<(i32, i32, usize, f64, f64)> = vec![];
    for c in 0..nc {
        let z: f64 = StandardNormal.sample(&mut rng);
        modes.push((0, 0, c, z, 0.0));
        for k1 in 0..=k {
            for k2 in -k..=k {
                if (k1 == 0 && k2 <= 0) || k1 * k1 + k2 * k2 > k * k {
                    continue;
                }
                let amp = ((k1 * k1 + k2 * k2) as f64).powf(-decay / 2.0);
                let a: f64 = StandardNormal.sample(&mut rng);
                let b: f64 = StandardNormal.sample(&mut rng);
                modes.push((k1, k2, c, a * amp, b * amp));
            }
        }
    }
    let (w1, w2) = (2.0 * PI / g.l1, 2.0 * PI / g.l2);
    let mut f = TensorField::zeros(rank, g.n1, g.n2);
    for p in 0..g.nodes() {
        let (x, y) = g.coords(p);
        for &(k1, k2, c, a, b) in &modes {
            let th = k1 as f64 * w1 * x + k2 as f64 * w2 * y;
            f.data[p * nc + c] += a * th.cos() + b * th.sin();
        }
    }
    f
}

/// Eigen-synthesized field. Without a full eigenbasis, mass-white noise is filtered by
/// `(1 + lambda)^{-decay/2}` instead, with a smooth taper at the band limit.
pub fn eigen_field(calc: &dyn FunctionalCalculus, seed: u64, index: usize, decay: f64, band: Option<f64>) -> Result<TensorField> {
    let mut rng = rng_for(seed, index);
    let Some(basis) = calc.basis().filter(|b| b.is_complete()) else {
        let op = calc.operator();
        let z: Vec<f64> = (0..op.dim()).map(|_| StandardNormal.sample(&mut rng)).collect();
        let noise = op.field(op.chol_inv_t_apply(&z));
        let b = band.unwrap_or(f64::INFINITY);
        return calc.apply(&|l: f64| (1.0 + l).powf(-decay / 2.0) * (-(l / b).powi(2)).exp(), &noise);
    };
    let c: Vec<f64> = basis
        .eigenvalues
        .iter()
        .map(|&l| {
            let z: f64 = StandardNormal.sample(&mut rng);
            if band.is_some_and(|b| l > b) {
                0.0
            } else if l == 0.0 {
                z
            } else {
                z * l.powf(-decay / 2.0)
            }
        })
        .collect();
    Ok(basis.synthesize(&c))
}

/// All fields described by `spec`; `calc` must have the same rank for eigen synthesis.
pub fn generate(cache: &GeometryCache, calc: Option<&dyn FunctionalCalculus>, spec: &SampleSpec) -> Result<Vec<TensorField>> {
    (0..spec.count)
        .map(|i| match spec.synthesis {
            Synthesis::Fourier { max_wavenumber } => {
                Ok(fourier_field(cache, spec.rank, spec.seed, i, max_wavenumber, spec.spectral_decay))
            }
            Synthesis::Eigen { band_limit } => {
                let calc = calc.ok_or(Error::RequiresBasis)?;
                if calc.rank() != spec.rank {
                    return Err(Error::RankMismatch { expected: spec.rank, found: calc.rank() });
                }
                eigen_field(calc, spec.seed, i, spec.spectral_decay, band_limit)
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{build_cache, build_grid, MetricSpec};
    use std::f64::consts::TAU;

    #[test]
    fn fourier_fields_agree_across_resolutions() {
        let c32 = build_cache(&build_grid(32, 32, TAU, TAU, &MetricSpec::Flat).unwrap());
        let c64 = build_cache(&build_grid(64, 64, TAU, TAU, &MetricSpec::Flat).unwrap());
        let a = fourier_field(&c32, 1, 7, 3, 4, 1.1);
        let b = fourier_field(&c64, 1, 7, 3, 4, 1.1);
        for i in 0..32 {
            for j in 0..32 {
                for c in 0..2 {
                    let u = a.data[(i * 32 + j) * 2 + c];
                    let v = b.data[(2 * i * 64 + 2 * j) * 2 + c];
                    assert!((u - v).abs() < 1e-12);
                }
            }
        }
        assert_ne!(fourier_field(&c32, 0, 7, 3, 4, 1.1), fourier_field(&c32, 0, 7, 4, 4, 1.1));
        assert_eq!(fourier_field(&c32, 0, 7, 3, 4, 1.1), fourier_field(&c32, 0, 7, 3, 4, 1.1));
    }

    #[test]
    fn filtered_noise_without_basis() {
        use crate::calculus::ChebyshevCalculus;
        use crate::geometry::l2_norm;
        use crate::operators::assemble_laplacian;
        use std::sync::Arc;
        let cache = Arc::new(build_cache(&build_grid(16, 16, TAU, TAU, &MetricSpec::conformal_cos(0.3)).unwrap()));
        let op = Arc::new(assemble_laplacian(cache.clone(), 1).unwrap());
        let calc = ChebyshevCalculus::new(op);
        let a = eigen_field(&calc, 3, 0, 1.1, None).unwrap();
        assert_eq!(a, eigen_field(&calc, 3, 0, 1.1, None).unwrap());
        assert_ne!(a, eigen_field(&calc, 3, 1, 1.1, None).unwrap());
        let tapered = eigen_field(&calc, 3, 0, 1.1, Some(4.0)).unwrap();
        assert!(l2_norm(&cache, &tapered) < l2_norm(&cache, &a));
        assert!(l2_norm(&cache, &tapered) > 0.0);
    }
}
