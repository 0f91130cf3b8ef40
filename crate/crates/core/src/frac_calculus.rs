//! Special functions, fractional powers `Lambda^a = (I - Delta)^{a/2}` and `D^a = (-Delta)^{a/2}`,
//! and Sobolev / Besov norms.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::calculus::{FunctionalCalculus, Multiplier};
use crate::error::{Error, Result};
use crate::field::TensorField;
use crate::geometry::{l2_norm, lp_norm};
use crate::heat::{heat_apply, HeatConfig};
use crate::lp::{base_symbol, normalize_bank, pow4, spectrum_points, LpBank, Normalization};
use crate::manifold::Manifold;
use crate::report::EstimateReport;
use crate::sample::{generate, SampleSpec};

pub fn gamma_fn(z: f64) -> Result<f64> {
    if !(z > 0.0) || !z.is_finite() {
        return Err(Error::DomainError(format!("gamma at {z}")));
    }
    Ok(statrs::function::gamma::gamma(z))
}

pub fn beta_fn(a: f64, b: f64) -> Result<f64> {
    if !(a > 0.0 && b > 0.0) || !(a + b).is_finite() {
        return Err(Error::DomainError(format!("beta at ({a}, {b})")));
    }
    Ok((statrs::function::gamma::ln_gamma(a) + statrs::function::gamma::ln_gamma(b)
        - statrs::function::gamma::ln_gamma(a + b))
    .exp())
}

/// `j_a(lambda) = lambda^{-a-1} / Gamma(-a)` for `a < 0`, zero for `lambda <= 0`.
pub fn j_kernel(a: f64, lambda: f64) -> Result<f64> {
    if !(a < 0.0) {
        return Err(Error::DomainError(format!("j kernel needs a < 0, got {a}")));
    }
    if lambda <= 0.0 {
        return Ok(0.0);
    }
    Ok(lambda.powf(-a - 1.0) / gamma_fn(-a)?)
}

/// `int_0^c t^p g(t) dt` for `p > -1`, after `t = w^{1/(p+1)}` removes the endpoint singularity.
fn singular_integral(p: f64, c: f64, g: impl Fn(f64) -> f64, tol: f64) -> (f64, f64) {
    let q = p + 1.0;
    let out = quadrature::integrate(|w: f64| g(w.powf(1.0 / q)) / q, 0.0, c.powf(q), tol);
    (out.integral, out.error_estimate)
}

/// `(j_a * j_b)(lambda)` by quadrature against the closed form `j_{a+b}(lambda)`;
/// the ratio is the relative error.
pub fn j_convolve_check(a: f64, b: f64, lambda: f64) -> Result<EstimateReport> {
    if !(a < 0.0 && b < 0.0 && lambda > 0.0) {
        return Err(Error::DomainError(format!("j convolution at ({a}, {b}, {lambda})")));
    }
    let (ga, gb) = (gamma_fn(-a)?, gamma_fn(-b)?);
    let half = 0.5 * lambda;
    // t^{-a-1} (lambda - t)^{-b-1} split at the midpoint, one singular end per half
    let (left, e1) = singular_integral(-a - 1.0, half, |t| (lambda - t).powf(-b - 1.0), 1e-14);
    let (right, e2) = singular_integral(-b - 1.0, half, |s| (lambda - s).powf(-a - 1.0), 1e-14);
    let quad = (left + right) / (ga * gb);
    let exact = j_kernel(a + b, lambda)?;
    let err = ((quad - exact) / exact).abs();
    Ok(EstimateReport::new("frac/j_convolution", 1, vec![err])
        .bounded_by(1e-8)
        .param("a", a)
        .param("b", b)
        .param("lambda", lambda)
        .param("quadrature", quad)
        .param("closed_form", exact)
        .param("error_estimate", (e1 + e2) / (ga * gb)))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FracKind {
    Lambda,
    D,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FracExponent {
    pub a: f64,
    pub kind: FracKind,
}

impl FracExponent {
    pub fn lambda(a: f64) -> Self {
        FracExponent { a, kind: FracKind::Lambda }
    }
    pub fn d(a: f64) -> Self {
        FracExponent { a, kind: FracKind::D }
    }

    /// Spectral multiplier; the kernel of `D^a` maps to zero for `a != 0`.
    pub fn multiplier(&self, lambda: f64) -> f64 {
        match self.kind {
            FracKind::Lambda => (1.0 + lambda).powf(0.5 * self.a),
            FracKind::D if self.a == 0.0 => 1.0,
            FracKind::D if lambda <= 0.0 => 0.0,
            FracKind::D => lambda.powf(0.5 * self.a),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum FracBackend {
    Spectral,
    /// `tau = e^u` trapezoid against the heat flow, negative exponents only.
    GammaIntegral { nodes: usize, u_min: f64, u_max: f64, heat: HeatConfig },
}

impl FracBackend {
    pub fn gamma_integral() -> Self {
        FracBackend::GammaIntegral { nodes: 400, u_min: -30.0, u_max: 5.0, heat: HeatConfig::default() }
    }
}

/// Relative size of the kernel component, which `D^a` with `a < 0` cannot act on.
pub const KERNEL_TOLERANCE: f64 = 1e-8;

fn remove_kernel(calc: &dyn FunctionalCalculus, f: &TensorField) -> Result<TensorField> {
    let basis = calc.basis().ok_or(Error::RequiresBasis)?;
    let cache = &calc.operator().cache;
    let kernel = basis.apply(&|l: f64| if l == 0.0 { 1.0 } else { 0.0 }, f)?;
    let ratio = l2_norm(cache, &kernel) / l2_norm(cache, f).max(f64::MIN_POSITIVE);
    if ratio > KERNEL_TOLERANCE {
        return Err(Error::KernelComponentPresent(ratio));
    }
    Ok(f.sub(&kernel))
}

pub fn frac_apply(m: &Manifold, f: &TensorField, exp: FracExponent, backend: &FracBackend) -> Result<TensorField> {
    let calc = m.calculus(f.rank)?;
    if exp.a == 0.0 {
        calc.operator().check(f)?;
        return Ok(f.clone());
    }
    let f = if exp.kind == FracKind::D && exp.a < 0.0 { remove_kernel(calc.as_ref(), f)? } else { f.clone() };
    match backend {
        FracBackend::Spectral => {
            if exp.kind == FracKind::D && exp.a < 0.0 && calc.basis().is_none() {
                return Err(Error::RequiresBasis);
            }
            calc.apply(&|l| exp.multiplier(l), &f)
        }
        FracBackend::GammaIntegral { nodes, u_min, u_max, heat } => {
            if exp.a > 0.0 {
                return Err(Error::DomainError("Gamma-integral backend takes negative exponents".into()));
            }
            let op = m.laplacian(f.rank)?;
            let alpha = -0.5 * exp.a;
            let damp = exp.kind == FracKind::Lambda;
            let h = (u_max - u_min) / *nodes as f64;
            let mut acc = TensorField::zeros(f.rank, f.shape().0, f.shape().1);
            for i in 0..=*nodes {
                let u = u_min + i as f64 * h;
                let tau = u.exp();
                let mut w = h * (alpha * u).exp();
                if damp {
                    w *= (-tau).exp();
                }
                if i == 0 {
                    // lattice nodes below u_min, where U(tau) F = F to O(tau)
                    let r = (-alpha * h).exp();
                    w *= 1.0 + r / (1.0 - r);
                }
                acc.axpy(w, &heat_apply(&f, tau, &op, Some(calc.as_ref()), heat)?);
            }
            Ok(acc.scaled(1.0 / gamma_fn(alpha)?))
        }
    }
}

/// `||Lambda^a F||_2`
pub fn sobolev_norm(m: &Manifold, f: &TensorField, a: f64) -> Result<f64> {
    let calc = m.calculus(f.rank)?;
    let q = calc.quadratic_forms(&[&|l: f64| (1.0 + l).powf(a)], f)?;
    Ok(q[0].max(0.0).sqrt())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BesovSpec {
    pub a: f64,
    pub p: f64,
    /// `f64::INFINITY` gives the sup over bands.
    pub q: f64,
}

impl BesovSpec {
    pub fn new(a: f64, p: f64, q: f64) -> Self {
        BesovSpec { a, p, q }
    }
}

/// Highest band carrying non-negligible weight below the spectral radius.
pub fn top_band(bank: &LpBank, calc: &dyn FunctionalCalculus) -> i32 {
    bank.covering_range(1.0, calc.spectral_radius(), 1e-17).1.max(0)
}

/// `(sum_{k >= 0} 2^{a q k} ||P_k F||_p^q)^{1/q} + ||F||_p`
pub fn besov_norm(m: &Manifold, f: &TensorField, spec: BesovSpec, bank: &LpBank) -> Result<f64> {
    if bank.mode != Normalization::SquaresToIdentity {
        return Err(Error::RequiresPartition);
    }
    let calc = m.calculus(f.rank)?;
    let bands = band_norms(calc.as_ref(), f, bank, spec.p)?;
    Ok(besov_from_bands(&bands, spec) + lp_norm(&m.cache, f, spec.p))
}

/// `||P_k F||_p` for `k = 0..=top_band`.
pub fn band_norms(calc: &dyn FunctionalCalculus, f: &TensorField, bank: &LpBank, p: f64) -> Result<Vec<f64>> {
    let top = top_band(bank, calc);
    let cache = &calc.operator().cache;
    if p == 2.0 {
        let ms: Vec<Box<dyn Fn(f64) -> f64 + Sync + '_>> =
            (0..=top).map(|k| Box::new(move |l: f64| bank.multiplier(k, l).powi(2)) as Box<dyn Fn(f64) -> f64 + Sync>).collect();
        let refs: Vec<Multiplier> = ms.iter().map(|b| b.as_ref()).collect();
        return Ok(calc.quadratic_forms(&refs, f)?.into_iter().map(|v| v.max(0.0).sqrt()).collect());
    }
    let ms: Vec<Box<dyn Fn(f64) -> f64 + Sync + '_>> =
        (0..=top).map(|k| Box::new(move |l: f64| bank.multiplier(k, l)) as Box<dyn Fn(f64) -> f64 + Sync>).collect();
    let refs: Vec<Multiplier> = ms.iter().map(|b| b.as_ref()).collect();
    Ok(calc.apply_many(&refs, f)?.iter().map(|g| lp_norm(cache, g, p)).collect())
}

/// Weighted `l^q` sum of band norms, `bands[k]` for `k >= 0`.
pub fn besov_from_bands(bands: &[f64], spec: BesovSpec) -> f64 {
    let terms = bands.iter().enumerate().map(|(k, v)| 2f64.powf(spec.a * k as f64) * v);
    if spec.q.is_infinite() {
        terms.fold(0.0, f64::max)
    } else {
        terms.map(|t| t.powf(spec.q)).sum::<f64>().powf(1.0 / spec.q)
    }
}

fn rel(num: f64, den: f64) -> f64 {
    if den > 0.0 {
        num / den
    } else {
        0.0
    }
}

/// `binom(a/2, i)`: coefficients of `(1 + lambda)^{a/2} = sum_i c_i lambda^{a/2 - i}`.
pub fn expansion_coefficients(a: f64, count: usize) -> Vec<f64> {
    let mut c = vec![1.0];
    for i in 1..count {
        let prev = c[i - 1];
        c.push(prev * (0.5 * a - (i - 1) as f64) / i as f64);
    }
    c
}

const GROUP_PAIRS: [(f64, f64); 3] = [(0.6, 0.9), (-0.5, 1.2), (0.4, -1.1)];
pub const GAMMA_EXPONENTS: [f64; 3] = [-0.5, -1.0, -1.5];

pub fn verify_frac_properties(m: &Manifold, spec: &SampleSpec) -> Result<Vec<EstimateReport>> {
    let calc = m.calculus(spec.rank)?;
    let op = m.laplacian(spec.rank)?;
    let cache = &m.cache;
    let fields = generate(cache, Some(calc.as_ref()), spec)?;
    let sp = FracBackend::Spectral;
    let gi = FracBackend::gamma_integral();
    let n = fields.len();
    let (mut group, mut powers, mut interp, mut domination, mut gamma_err, mut expansion) =
        (Vec::new(), Vec::new(), Vec::new(), Vec::new(), Vec::new(), Vec::new());
    let (ea, em) = (0.7, 2usize);
    let coeffs = expansion_coefficients(ea, em + 1);
    for f in &fields {
        let nf = l2_norm(cache, f);
        for (a, b) in GROUP_PAIRS {
            let ab = frac_apply(m, &frac_apply(m, f, FracExponent::lambda(b), &sp)?, FracExponent::lambda(a), &sp)?;
            let direct = frac_apply(m, f, FracExponent::lambda(a + b), &sp)?;
            group.push(rel(l2_norm(cache, &ab.sub(&direct)), l2_norm(cache, &direct)));
        }
        let lap = op.apply(f)?;
        let l2 = frac_apply(m, f, FracExponent::lambda(2.0), &sp)?;
        let d2 = frac_apply(m, f, FracExponent::d(2.0), &sp)?;
        let scale = nf + l2_norm(cache, &lap);
        powers.push(rel(l2_norm(cache, &l2.sub(&f.sub(&lap))), scale));
        powers.push(rel(l2_norm(cache, &d2.add(&lap)), scale));

        let (a, b) = (0.5, 1.5);
        let na = sobolev_norm(m, f, a)?;
        let nb = sobolev_norm(m, f, b)?;
        interp.push(rel(na, nb.powf(a / b) * nf.powf(1.0 - a / b)));

        let d = frac_apply(m, f, FracExponent::d(0.8), &sp)?;
        domination.push(rel(l2_norm(cache, &d), sobolev_norm(m, f, 0.8)?));

        for a in GAMMA_EXPONENTS {
            let s = frac_apply(m, f, FracExponent::lambda(a), &sp)?;
            let g = frac_apply(m, f, FracExponent::lambda(a), &gi)?;
            gamma_err.push(rel(l2_norm(cache, &s.sub(&g)), l2_norm(cache, &s)));
        }

        // remainder of the c_i expansion against D^{a - 2(m+1)}, off the kernel
        let remainder = |l: f64| {
            if l <= 0.0 {
                return 0.0;
            }
            (1.0 + l).powf(0.5 * ea) - coeffs.iter().enumerate().map(|(i, c)| c * l.powf(0.5 * ea - i as f64)).sum::<f64>()
        };
        let lower = FracExponent::d(ea - 2.0 * (em as f64 + 1.0));
        let q = calc.quadratic_forms(&[&|l: f64| remainder(l).powi(2), &|l: f64| lower.multiplier(l).powi(2)], f)?;
        expansion.push(rel(q[0].max(0.0).sqrt(), q[1].max(0.0).sqrt()));
    }
    let mut reports = vec![
        EstimateReport::new("frac/group_law", n, group).bounded_by(1e-10),
        EstimateReport::new("frac/integer_powers", n, powers).bounded_by(1e-10),
        EstimateReport::new("frac/interpolation", n, interp).bounded_by(1.0 + 1e-10).param("a", 0.5).param("b", 1.5),
        EstimateReport::new("frac/d_below_lambda", n, domination).bounded_by(1.0 + 1e-12).param("a", 0.8),
        EstimateReport::new("frac/gamma_integral", n, gamma_err).bounded_by(1e-6).param("exponents", GAMMA_EXPONENTS.to_vec()),
        EstimateReport::new("frac/expansion", n, expansion).finite().param("a", ea).param("terms", em as u64 + 1),
    ];
    let half = gamma_fn(0.5)?;
    reports.push(
        EstimateReport::new("frac/gamma_half", 1, vec![((half - std::f64::consts::PI.sqrt()) / half).abs()]).bounded_by(1e-12),
    );
    reports.push(j_convolve_check(-0.5, -0.7, 2.0)?);
    reports.push(j_convolve_check(-1.0, -1.0, 2.0)?);
    Ok(reports.into_iter().map(|r| r.param("rank", spec.rank).param("n", m.n())).collect())
}

pub const SOBOLEV_EXPONENTS: [f64; 3] = [0.5, 1.0, 1.5];

/// Dyadic characterizations of `L^2`, `H^a` and the Besov embeddings. `bank` supplies the
/// symbol; the squares-normalized bank is derived from it.
pub fn verify_norm_equivalences(m: &Manifold, bank: &LpBank, spec: &SampleSpec) -> Result<Vec<EstimateReport>> {
    let base = base_symbol(&bank.symbol);
    let sq = normalize_bank(base, Normalization::SquaresToIdentity, bank.k_min, bank.k_max)?;
    let calc = m.calculus(spec.rank)?;
    let op = m.laplacian(spec.rank)?;
    let cache = &m.cache;
    let fields = generate(cache, Some(calc.as_ref()), spec)?;
    let spectrum = spectrum_points(calc.as_ref());
    let lo = spectrum.iter().copied().fold(f64::INFINITY, f64::min).min(1.0);
    let (c_lo, c_hi) = sq.covering_range(lo, calc.spectral_radius(), 1e-17);
    let cover: Vec<i32> = (c_lo..=c_hi).collect();
    let n = fields.len();

    let mut plancherel = Vec::new();
    let mut sob: Vec<Vec<f64>> = vec![Vec::new(); SOBOLEV_EXPONENTS.len()];
    let mut grad = Vec::new();
    let mut commute = Vec::new();
    let mut embed = Vec::new();
    let mut lp_embed = Vec::new();
    let mut b022 = Vec::new();
    for f in &fields {
        let nf = l2_norm(cache, f);
        let ms: Vec<Box<dyn Fn(f64) -> f64 + Sync + '_>> = cover
            .iter()
            .map(|&k| {
                let sq = &sq;
                Box::new(move |l: f64| sq.multiplier(k, l).powi(2)) as Box<dyn Fn(f64) -> f64 + Sync>
            })
            .chain(std::iter::once(Box::new(|l: f64| if l == 0.0 { 1.0 } else { 0.0 }) as Box<dyn Fn(f64) -> f64 + Sync>))
            .chain(SOBOLEV_EXPONENTS.iter().map(|&a| Box::new(move |l: f64| if l > 0.0 { l.powf(a) } else { 0.0 }) as Box<dyn Fn(f64) -> f64 + Sync>))
            .collect();
        let refs: Vec<Multiplier> = ms.iter().map(|b| b.as_ref()).collect();
        let q = calc.quadratic_forms(&refs, f)?;
        let bands = &q[..cover.len()];
        let kernel = q[cover.len()];
        let d_norms = &q[cover.len() + 1..];
        plancherel.push(rel((bands.iter().sum::<f64>() + kernel - nf * nf).abs(), nf * nf));
        for (i, &a) in SOBOLEV_EXPONENTS.iter().enumerate() {
            let weighted: f64 = cover.iter().zip(bands).map(|(&k, e)| 2f64.powf(2.0 * a * k as f64) * e).sum();
            sob[i].push(rel(weighted, d_norms[i]));
            if a == 1.0 {
                grad.push(rel(weighted, op.energy(f)));
            }
        }

        // P_k D^a F = 2^{ak} Pbar_k F with the rescaled multiplier h(s) s^{a/2}
        for &a in &SOBOLEV_EXPONENTS {
            let da = frac_apply(m, f, FracExponent::d(a), &FracBackend::Spectral)?;
            let scale = l2_norm(cache, &da).max(nf);
            for k in 0..=4 {
                let lhs = calc.apply(&|l| sq.multiplier(k, l), &da)?;
                let bar = |l: f64| {
                    let s = l * pow4(-k);
                    sq.symbol.eval(s) * s.max(0.0).powf(0.5 * a)
                };
                let rhs = calc.apply(&bar, f)?.scaled(2f64.powf(a * k as f64));
                commute.push(rel(l2_norm(cache, &lhs.sub(&rhs)), 2f64.powf(a * k as f64) * scale));
            }
        }

        let half = BesovSpec::new(0.5, 2.0, 1.0);
        embed.push(rel(sobolev_norm(m, f, 0.5)?, besov_norm(m, f, half, &sq)?));
        let p = 4.0;
        lp_embed.push(rel(lp_norm(cache, f, p), besov_norm(m, f, BesovSpec::new(1.0 - 2.0 / p, 2.0, 1.0), &sq)?));
        b022.push(rel(besov_norm(m, f, BesovSpec::new(0.0, 2.0, 2.0), &sq)?.powi(2), nf * nf));
    }
    let mut reports = vec![EstimateReport::new("norms/l2_plancherel", n, plancherel).bounded_by(1e-10)];
    for (i, &a) in SOBOLEV_EXPONENTS.iter().enumerate() {
        reports.push(two_sided(format!("norms/sobolev_a{a}"), sob[i].clone(), 10.0).param("a", a));
    }
    reports.push(two_sided("norms/gradient_a1".into(), grad, 10.0));
    reports.push(EstimateReport::new("norms/dyadic_commutation", n, commute).bounded_by(1e-10));
    reports.push(EstimateReport::new("norms/h_half_below_b_half", n, embed).finite());
    reports.push(EstimateReport::new("norms/l4_below_besov", n, lp_embed).finite().param("p", 4.0));
    reports.push(two_sided("norms/b0_22_vs_l2".into(), b022, 4.0));
    Ok(reports.into_iter().map(|r| r.param("rank", spec.rank).param("n", m.n())).collect())
}

/// Two-sided equivalence: pass iff `max / min <= spread` over the samples.
pub fn two_sided(name: String, ratios: Vec<f64>, spread: f64) -> EstimateReport {
    let lo = ratios.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = ratios.iter().copied().fold(0.0, f64::max);
    let n = ratios.len();
    let pass = lo > 0.0 && hi.is_finite() && hi / lo <= spread;
    EstimateReport::new(name, n, ratios)
        .with_pass(pass)
        .param("lower", lo)
        .param("upper", hi)
        .param("spread", hi / lo)
        .param("max_spread", spread)
}

/// One row of a norm table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormRow {
    pub field_id: usize,
    pub space: String,
    pub a: f64,
    pub p: f64,
    pub q: f64,
    pub value: f64,
}

pub fn write_norm_table(rows: &[NormRow], out: &mut impl Write) -> Result<()> {
    writeln!(out, "field_id,space,a,p,q,value")?;
    for r in rows {
        writeln!(out, "{},{},{},{},{},{:.12e}", r.field_id, r.space, r.a, r.p, r.q, r.value)?;
    }
    Ok(())
}
