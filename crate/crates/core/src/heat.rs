//! The heat semigroup `U(tau) = exp(tau Delta)` and its smoothing estimates.

use std::f64::consts::FRAC_1_SQRT_2;

use serde::{Deserialize, Serialize};

use crate::calculus::FunctionalCalculus;
use crate::error::{Error, Result};
use crate::field::TensorField;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::geometry::{inner_product, l2_norm, lp_norm};
use crate::sample::{generate, SampleSpec};
use crate::linalg;
use crate::manifold::Manifold;
use crate::operators::{covariant_derivative, LaplaceOperator};
use crate::report::EstimateReport;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeatBackend {
    Spectral,
    CrankNicolson,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HeatConfig {
    pub backend: HeatBackend,
    pub steps_per_decade: usize,
    pub spectral_count: Option<usize>,
}

impl Default for HeatConfig {
    fn default() -> Self {
        HeatConfig { backend: HeatBackend::Spectral, steps_per_decade: 64, spectral_count: None }
    }
}

impl HeatConfig {
    pub fn crank_nicolson(steps_per_decade: usize) -> Self {
        HeatConfig { backend: HeatBackend::CrankNicolson, steps_per_decade, spectral_count: None }
    }
}

/// Decades below `tau` covered by the geometric Crank-Nicolson time grid.
const CN_DECADES: f64 = 8.0;

/// `U(tau) F`.
pub fn heat_apply(
    f: &TensorField,
    tau: f64,
    op: &LaplaceOperator,
    calc: Option<&dyn FunctionalCalculus>,
    cfg: &HeatConfig,
) -> Result<TensorField> {
    op.check(f)?;
    if !(tau >= 0.0 && tau.is_finite()) {
        return Err(Error::DomainError(format!("heat time {tau}")));
    }
    if cfg.steps_per_decade < 16 {
        return Err(Error::DomainError(format!("steps_per_decade {} < 16", cfg.steps_per_decade)));
    }
    if tau == 0.0 {
        return Ok(f.clone());
    }
    match cfg.backend {
        HeatBackend::Spectral => {
            let calc = calc.ok_or_else(|| Error::BackendMismatch("spectral heat flow without a spectral basis".into()))?;
            if calc.rank() != op.rank || calc.operator().dim() != op.dim() {
                return Err(Error::BackendMismatch("basis built for another operator".into()));
            }
            let m = move |l: f64| (-tau * l).exp();
            match (cfg.spectral_count, calc.basis()) {
                (Some(k), Some(b)) if k < b.count() => b.truncated(k).apply(&m, f),
                _ => calc.apply(&m, f),
            }
        }
        HeatBackend::CrankNicolson => crank_nicolson(op, f, tau, cfg.steps_per_decade),
    }
}

/// Crank-Nicolson on a geometric time grid, `steps_per_decade` steps per factor of ten,
/// starting `CN_DECADES` decades below `tau`.
fn crank_nicolson(op: &LaplaceOperator, f: &TensorField, tau: f64, spd: usize) -> Result<TensorField> {
    let ratio = 10f64.powf(1.0 / spd as f64);
    let steps = (CN_DECADES * spd as f64).round() as i32;
    let mut times = vec![0.0];
    for s in (0..=steps).rev() {
        times.push(tau / ratio.powi(s));
    }
    let mass_diag = op.mass_diag();
    let stiff_diag = op.stiffness.diagonal();
    let mut x = f.data.clone();
    let n = x.len();
    let mut sx = vec![0.0; n];
    for w in times.windows(2) {
        let half = 0.5 * (w[1] - w[0]);
        op.stiffness.matvec(&x, &mut sx);
        let mx = op.mass_apply(&x);
        let rhs: Vec<f64> = mx.iter().zip(&sx).map(|(m, s)| m - half * s).collect();
        let diag: Vec<f64> = mass_diag.iter().zip(&stiff_diag).map(|(m, s)| m + half * s).collect();
        let apply = |v: &[f64], out: &mut [f64]| {
            op.stiffness.matvec(v, out);
            let mv = op.mass_apply(v);
            for k in 0..v.len() {
                out[k] = mv[k] + half * out[k];
            }
        };
        linalg::conjugate_gradient(apply, &diag, &rhs, &mut x, 1e-13, 20_000)?;
    }
    Ok(op.field(x))
}

/// Log-spaced heat times.
pub fn tau_grid(lo: f64, hi: f64, count: usize) -> Vec<f64> {
    let (a, b) = (lo.ln(), hi.ln());
    (0..count).map(|k| (a + (b - a) * k as f64 / (count - 1).max(1) as f64).exp()).collect()
}

pub fn default_taus() -> Vec<f64> {
    tau_grid(1e-3, 10.0, 40)
}

/// Check the L2 heat-flow estimates and the Lp contraction on the given fields.
///
/// Gradient norms of `U F` use the Dirichlet energy of the assembled Laplacian,
/// so the spectral forms of the first four estimates are exact; the last one
/// applies the rank `r + 1` flow to the centered covariant derivative.
pub fn verify_heat_estimates(m: &Manifold, fields: &[TensorField], taus: &[f64]) -> Result<Vec<EstimateReport>> {
    let rank = fields.first().map_or(0, |f| f.rank);
    let op = m.laplacian(rank)?;
    let calc = m.calculus(rank)?;
    let up = if rank < 2 { Some(m.calculus(rank + 1)?) } else { None };
    let cache = &m.cache;
    let nf = fields.len();
    let mut r = vec![vec![]; 5];
    let ps = [1.0, 4.0, f64::INFINITY];
    let mut lp: Vec<Vec<f64>> = vec![vec![]; ps.len()];
    for f in fields {
        let norm = l2_norm(cache, f);
        let grad = op.energy(f).sqrt();
        let w: Vec<Box<dyn Fn(f64) -> f64 + Sync>> = taus
            .iter()
            .flat_map(|&t| {
                let a: Box<dyn Fn(f64) -> f64 + Sync> = Box::new(move |l: f64| (-2.0 * t * l).exp());
                let b: Box<dyn Fn(f64) -> f64 + Sync> = Box::new(move |l: f64| l * (-2.0 * t * l).exp());
                let c: Box<dyn Fn(f64) -> f64 + Sync> = Box::new(move |l: f64| l * l * (-2.0 * t * l).exp());
                [a, b, c]
            })
            .collect();
        let refs: Vec<&(dyn Fn(f64) -> f64 + Sync)> = w.iter().map(|b| b.as_ref()).collect();
        let q = calc.quadratic_forms(&refs, f)?;
        let gq = match &up {
            Some(up) => {
                let g = covariant_derivative(cache, f)?;
                let hw: Vec<Box<dyn Fn(f64) -> f64 + Sync>> = taus
                    .iter()
                    .map(|&t| Box::new(move |l: f64| (-2.0 * t * l).exp()) as Box<dyn Fn(f64) -> f64 + Sync>)
                    .collect();
                let hr: Vec<&(dyn Fn(f64) -> f64 + Sync)> = hw.iter().map(|b| b.as_ref()).collect();
                Some(up.quadratic_forms(&hr, &g)?)
            }
            None => None,
        };
        for (k, &t) in taus.iter().enumerate() {
            let (u2, gu2, lu2) = (q[3 * k].max(0.0), q[3 * k + 1].max(0.0), q[3 * k + 2].max(0.0));
            r[0].push(u2.sqrt() / norm);
            if grad > 1e-12 * norm {
                r[1].push(gu2.sqrt() / grad);
            }
            r[2].push(gu2.sqrt() / (FRAC_1_SQRT_2 * t.powf(-0.5) * norm));
            r[3].push(lu2.sqrt() / (FRAC_1_SQRT_2 / t * norm));
            if let Some(gq) = &gq {
                r[4].push(gq[k].max(0.0).sqrt() / (FRAC_1_SQRT_2 * t.powf(-0.5) * norm));
            }
        }
        let sub: Vec<f64> = taus.iter().step_by(4).cloned().collect();
        let hw: Vec<Box<dyn Fn(f64) -> f64 + Sync>> =
            sub.iter().map(|&t| Box::new(move |l: f64| (-t * l).exp()) as Box<dyn Fn(f64) -> f64 + Sync>).collect();
        let hr: Vec<&(dyn Fn(f64) -> f64 + Sync)> = hw.iter().map(|b| b.as_ref()).collect();
        let flows = calc.apply_many(&hr, f)?;
        for (pi, &p) in ps.iter().enumerate() {
            let base = lp_norm(cache, f, p);
            for u in &flows {
                lp[pi].push(lp_norm(cache, u, p) / base);
            }
        }
    }
    let names = [
        "heat/l2_contraction",
        "heat/gradient_nonincreasing",
        "heat/gradient_smoothing",
        "heat/laplacian_smoothing",
        "heat/flow_of_gradient",
    ];
    let tol = 1.0 + 1e-6;
    let mut out: Vec<EstimateReport> = names
        .iter()
        .zip(r)
        .filter(|(_, v)| !v.is_empty())
        .map(|(n, v)| EstimateReport::new(*n, nf, v).bounded_by(tol).param("rank", rank).param("metric", m.label.as_str()))
        .collect();
    let lp_tol = if rank == 0 && m.cache.grid.is_flat() { 1.0 + 1e-6 } else { 1.0 + 1e-3 };
    for (pi, &p) in ps.iter().enumerate() {
        let name = if p.is_infinite() { "heat/lp_contraction_pinf".to_string() } else { format!("heat/lp_contraction_p{p}") };
        out.push(
            EstimateReport::new(name, nf, std::mem::take(&mut lp[pi]))
                .bounded_by(lp_tol)
                .param("rank", rank)
                .param("metric", m.label.as_str()),
        );
    }
    Ok(out)
}

/// Semigroup law `U(t1) U(t2) = U(t1 + t2)` and symmetry `<U F, G> = <F, U G>` on
/// `spec.count` triples `(F, G, t1, t2)`; the heat times are drawn from the sample seed.
pub fn verify_semigroup(m: &Manifold, spec: &SampleSpec, cfg: &HeatConfig) -> Result<Vec<EstimateReport>> {
    let op = m.laplacian(spec.rank)?;
    let calc = m.calculus(spec.rank)?;
    let cache = &m.cache;
    let pairs = SampleSpec { count: 2 * spec.count, ..*spec };
    let fields = generate(cache, Some(calc.as_ref()), &pairs)?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let u = |f: &TensorField, t: f64| heat_apply(f, t, &op, Some(calc.as_ref()), cfg);
    let (mut law, mut sym) = (Vec::new(), Vec::new());
    for pair in fields.chunks(2) {
        let t1 = 10f64.powf(rng.gen_range(-3.0..0.5));
        let t2 = 10f64.powf(rng.gen_range(-3.0..0.5));
        let (f, g) = (&pair[0], &pair[1]);
        let nf = l2_norm(cache, f);
        let lhs = u(&u(f, t2)?, t1)?;
        let rhs = u(f, t1 + t2)?;
        law.push(l2_norm(cache, &lhs.sub(&rhs)) / nf);
        let a = inner_product(cache, &u(f, t1)?, g)?;
        let b = inner_product(cache, f, &u(g, t1)?)?;
        sym.push((a - b).abs() / (nf * l2_norm(cache, g)));
    }
    let n = spec.count;
    Ok(vec![
        EstimateReport::new("heat/semigroup", n, law).bounded_by(1e-10).param("rank", spec.rank),
        EstimateReport::new("heat/self_adjoint", n, sym).bounded_by(1e-10).param("rank", spec.rank),
    ])
}
