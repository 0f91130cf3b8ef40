//! Littlewood-Paley symbols, dyadic banks and projections built on the heat flow.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::calculus::{FunctionalCalculus, Multiplier};
use crate::error::{Error, Result};
use crate::field::TensorField;
use crate::geometry::{l2_norm, lp_norm, product};
use crate::operators::covariant_derivative;
use crate::report::EstimateReport;
use crate::sample::{generate, SampleSpec};
use crate::heat::{heat_apply, HeatBackend, HeatConfig};
use crate::manifold::Manifold;
use crate::operators::LaplaceOperator;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Normalization {
    None,
    SumToIdentity,
    SquaresToIdentity,
}

/// Multiplier `h(s)` of a Littlewood-Paley symbol, with `s = 4^{-k} lambda` for band `k`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Symbol {
    /// `(e/N)^N s^N e^{-s}`, peak 1 at `s = N`.
    Canonical { order: u32 },
    /// `c s^N e^{-a sqrt(s)}`, peak 1 at `s = (2N/a)^2`. The factor `e^{-a sqrt(s)}`
    /// is the Laplace transform of a smooth positive density in heat time.
    Subordinated { order: u32, width: f64 },
    Scaled { base: Box<Symbol>, factor: f64 },
    Normalized { base: Box<Symbol>, mode: Normalization },
    Product { a: Box<Symbol>, b: Box<Symbol> },
    /// `h(s) / s`
    Bar { base: Box<Symbol> },
}

pub fn make_symbol(order: u32) -> Result<Symbol> {
    if order == 0 {
        return Err(Error::DomainError("symbol needs at least one vanishing moment".into()));
    }
    Ok(Symbol::Canonical { order })
}

pub fn make_smooth_symbol(order: u32, width: f64) -> Result<Symbol> {
    if order == 0 || !(width > 0.0) {
        return Err(Error::DomainError(format!("smooth symbol order {order} width {width}")));
    }
    Ok(Symbol::Subordinated { order, width })
}

/// Multiplier of the time convolution of two symbols: the product.
pub fn star_convolution(a: &Symbol, b: &Symbol) -> Symbol {
    Symbol::Product { a: Box::new(a.clone()), b: Box::new(b.clone()) }
}

/// `4^m` exactly, for integer `m`.
#[inline]
pub fn pow4(m: i32) -> f64 {
    4f64.powi(m)
}

impl Symbol {
    pub fn moments(&self) -> i64 {
        match self {
            Symbol::Canonical { order } | Symbol::Subordinated { order, .. } => *order as i64,
            Symbol::Scaled { base, .. } | Symbol::Normalized { base, .. } => base.moments(),
            Symbol::Product { a, b } => a.moments() + b.moments(),
            Symbol::Bar { base } => base.moments() - 1,
        }
    }

    pub fn eval(&self, s: f64) -> f64 {
        if !(s > 0.0) {
            return 0.0;
        }
        match self {
            Symbol::Canonical { order } => {
                let n = *order as f64;
                (n * (s.ln() + 1.0 - n.ln()) - s).exp()
            }
            Symbol::Subordinated { order, width } => {
                let n = *order as f64;
                let peak = (2.0 * n / width).powi(2);
                (n * (s / peak).ln() - width * (s.sqrt() - peak.sqrt())).exp()
            }
            Symbol::Scaled { base, factor } => factor * base.eval(s),
            Symbol::Normalized { base, mode } => match mode {
                Normalization::None => base.eval(s),
                Normalization::SumToIdentity => base.eval(s) / dyadic_sum(base, s, false),
                Normalization::SquaresToIdentity => base.eval(s) / dyadic_sum(base, s, true).sqrt(),
            },
            Symbol::Product { a, b } => a.eval(s) * b.eval(s),
            Symbol::Bar { base } => base.eval(s) / s,
        }
    }

    /// `(base, c)` with `eval(4^j s) = c * base.eval(4^j s)` for every integer `j`;
    /// the dyadic normalizer is constant along a dyadic orbit.
    fn dyadic_factor(&self, s: f64) -> (&Symbol, f64) {
        match self {
            Symbol::Normalized { base, mode } => match mode {
                Normalization::None => (base, 1.0),
                Normalization::SumToIdentity => (base, 1.0 / dyadic_sum(base, s, false)),
                Normalization::SquaresToIdentity => (base, 1.0 / dyadic_sum(base, s, true).sqrt()),
            },
            other => (other, 1.0),
        }
    }

    /// `sup_s h(s)` and the maximizer, on a fine log grid.
    pub fn sup(&self, weight: impl Fn(f64) -> f64) -> (f64, f64) {
        let mut best = (0.0, 0.0);
        for i in 0..=6000 {
            let s = 10f64.powf(-8.0 + 12.0 * i as f64 / 6000.0);
            let v = (weight(s) * self.eval(s)).abs();
            if v > best.0 {
                best = (v, s);
            }
        }
        best
    }
}

/// `D(s) = sum_j h(4^j s)` (or of `h^2`), reduced to one period so `D(4s) = D(s)` exactly.
pub fn dyadic_sum(base: &Symbol, s: f64, squares: bool) -> f64 {
    if !(s > 0.0) {
        return 0.0;
    }
    let m = (s.log2() / 2.0).floor() as i32;
    let s0 = s * pow4(-m);
    let term = |j: i32| {
        let v = base.eval(s0 * pow4(j));
        if squares {
            v * v
        } else {
            v
        }
    };
    // outward from the base period; a unimodal symbol only stops once past its peak
    let mut total = term(0);
    for j in 1..=40 {
        let v = term(j);
        total += v;
        if v.abs() <= 1e-18 * total.abs() {
            break;
        }
    }
    for j in (-90..0).rev() {
        let v = term(j);
        total += v;
        if v.abs() <= 1e-18 * total.abs() {
            break;
        }
    }
    total
}

/// Dyadic family `P_k`, `k_min <= k <= k_max`, of one (normalized) symbol.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LpBank {
    pub symbol: Symbol,
    pub mode: Normalization,
    pub k_min: i32,
    pub k_max: i32,
}

/// Default band range `[-2, log2(n) + 1]`.
pub fn default_k_range(n: usize) -> (i32, i32) {
    (-2, (n as f64).log2().round() as i32 + 1)
}

pub fn normalize_bank(symbol: &Symbol, mode: Normalization, k_min: i32, k_max: i32) -> Result<LpBank> {
    if symbol.moments() < 1 {
        return Err(Error::DomainError("bank symbol needs a vanishing moment".into()));
    }
    if k_min > k_max {
        return Err(Error::DomainError(format!("empty band range [{k_min}, {k_max}]")));
    }
    let symbol = if mode == Normalization::None {
        symbol.clone()
    } else {
        let squares = mode == Normalization::SquaresToIdentity;
        let inf = (0..400)
            .map(|i| dyadic_sum(symbol, pow4(1).powf(i as f64 / 400.0), squares))
            .fold(f64::INFINITY, f64::min);
        if !(inf >= 1e-6) {
            return Err(Error::DegenerateSymbol(inf));
        }
        Symbol::Normalized { base: Box::new(symbol.clone()), mode }
    };
    Ok(LpBank { symbol, mode, k_min, k_max })
}

impl LpBank {
    /// Multiplier of `P_k` at eigenvalue `lambda`.
    pub fn multiplier(&self, k: i32, lambda: f64) -> f64 {
        self.symbol.eval(lambda * pow4(-k))
    }

    /// `sum_{j >= k} h(4^{-j} lambda)`, summed until the terms are negligible.
    pub fn tail_at_least(&self, k: i32, lambda: f64) -> f64 {
        if !(lambda > 0.0) {
            return 0.0;
        }
        let (base, c) = self.symbol.dyadic_factor(lambda);
        let mut total = 0.0;
        let mut j = k;
        loop {
            let s = lambda * pow4(-j);
            let v = base.eval(s);
            total += v;
            if (s < 1e-3 && v.abs() < 1e-18) || s < 1e-250 {
                return c * total;
            }
            j += 1;
        }
    }

    /// `sum_{j < k} h(4^{-j} lambda)`
    pub fn tail_below(&self, k: i32, lambda: f64) -> f64 {
        if !(lambda > 0.0) {
            return 0.0;
        }
        let (base, c) = self.symbol.dyadic_factor(lambda);
        let mut total = 0.0;
        let mut j = k - 1;
        loop {
            let s = lambda * pow4(-j);
            let v = base.eval(s);
            total += v;
            if (s > 1e3 && v.abs() < 1e-18) || s > 1e250 {
                return c * total;
            }
            j -= 1;
        }
    }

    /// Bands `[k_lo, k_hi]` outside which the multiplier stays below `tol` on `[lo, hi]`.
    pub fn covering_range(&self, lo: f64, hi: f64, tol: f64) -> (i32, i32) {
        let lo = lo.max(1e-12);
        let mut k_lo = (lo.log2() / 2.0).floor() as i32;
        while self.multiplier(k_lo - 1, lo).abs() > tol {
            k_lo -= 1;
        }
        let mut k_hi = (hi.log2() / 2.0).ceil() as i32;
        while self.multiplier(k_hi + 1, hi).abs() > tol {
            k_hi += 1;
        }
        (k_lo, k_hi)
    }
}

/// Band selectors for [`lp_band`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BandInterval {
    Below(i32),
    AtMost(i32),
    AtLeast(i32),
    Above(i32),
    Range(i32, i32),
    All,
}

/// How `P_k` is evaluated.
pub enum LpBackend<'a> {
    Spectral(&'a dyn FunctionalCalculus),
    /// Heat-time representation against [`heat_apply`], with `nodes` log-spaced trapezoid nodes.
    Quadrature {
        op: &'a LaplaceOperator,
        calc: Option<&'a dyn FunctionalCalculus>,
        heat: HeatConfig,
        nodes: usize,
        /// Lower bound on the positive spectrum, which sets the long-time cutoff.
        lambda_min: f64,
    },
}

pub fn lp_project(f: &TensorField, k: i32, bank: &LpBank, backend: &LpBackend) -> Result<TensorField> {
    match backend {
        LpBackend::Spectral(calc) => calc.apply(&|l| bank.multiplier(k, l), f),
        LpBackend::Quadrature { op, calc, heat, nodes, lambda_min } => {
            let q = Quadrature { op, calc: *calc, heat: *heat, nodes: *nodes, lambda_min: *lambda_min };
            q.apply(&bank.symbol, k, f)
        }
    }
}

struct Quadrature<'a> {
    op: &'a LaplaceOperator,
    calc: Option<&'a dyn FunctionalCalculus>,
    heat: HeatConfig,
    nodes: usize,
    lambda_min: f64,
}

impl Quadrature<'_> {
    fn flows(&self, f: &TensorField, taus: &[f64]) -> Result<Vec<TensorField>> {
        match (self.heat.backend, self.calc) {
            (HeatBackend::Spectral, Some(c)) if self.heat.spectral_count.is_none() => {
                let ms: Vec<Box<dyn Fn(f64) -> f64 + Sync>> =
                    taus.iter().map(|&t| Box::new(move |l: f64| (-t * l).exp()) as Box<dyn Fn(f64) -> f64 + Sync>).collect();
                let refs: Vec<Multiplier> = ms.iter().map(|b| b.as_ref()).collect();
                c.apply_many(&refs, f)
            }
            _ => taus.iter().map(|&t| heat_apply(f, t, self.op, self.calc, &self.heat)).collect(),
        }
    }

    /// `(4^{-k} (-Delta))^N` via the assembled operator.
    fn power(&self, f: TensorField, n: u32, k: i32) -> Result<TensorField> {
        let mut g = f;
        for _ in 0..n {
            g = self.op.apply(&g)?.scaled(-pow4(-k));
        }
        Ok(g)
    }

    fn apply(&self, sym: &Symbol, k: i32, f: &TensorField) -> Result<TensorField> {
        match sym {
            Symbol::Canonical { order } => {
                let n = *order as f64;
                let c = (n * (1.0 - n.ln())).exp();
                let u = self.flows(f, &[pow4(-k)])?.remove(0);
                Ok(self.power(u, *order, k)?.scaled(c))
            }
            Symbol::Subordinated { order, width } => {
                let n = *order as f64;
                let peak = (2.0 * n / width).powi(2);
                let c = (width * peak.sqrt()).exp() / peak.powf(n);
                // density a / (2 sqrt(pi)) t^{-3/2} exp(-a^2 / (4 t)) in t = e^u
                let s_min = self.lambda_min * pow4(-k);
                let u_lo = (width * width / 160.0).ln();
                let u_hi = (60.0 / s_min).ln().max(u_lo + 1.0);
                let m = self.nodes.max(8);
                let du = (u_hi - u_lo) / (m - 1) as f64;
                let us: Vec<f64> = (0..m).map(|i| u_lo + du * i as f64).collect();
                let taus: Vec<f64> = us.iter().map(|u| u.exp() * pow4(-k)).collect();
                let flows = self.flows(f, &taus)?;
                let dens = |u: f64| {
                    let t = u.exp();
                    width / (2.0 * std::f64::consts::PI.sqrt()) * t.powf(-0.5) * (-width * width / (4.0 * t)).exp()
                };
                let mut fine = TensorField::zeros(f.rank, f.n1, f.n2);
                let mut coarse = TensorField::zeros(f.rank, f.n1, f.n2);
                for (i, (u, g)) in us.iter().zip(&flows).enumerate() {
                    let end = if i == 0 || i == m - 1 { 0.5 } else { 1.0 };
                    fine.axpy(end * du * dens(*u), g);
                    if i % 2 == 0 {
                        let cend = if i == 0 || i + 2 >= m { 0.5 } else { 1.0 };
                        coarse.axpy(cend * 2.0 * du * dens(*u), g);
                    }
                }
                let fine = self.power(fine, *order, k)?.scaled(c);
                let coarse = self.power(coarse, *order, k)?.scaled(c);
                let cache = &self.op.cache;
                let scale = l2_norm(cache, &fine).max(1e-300);
                let err = l2_norm(cache, &fine.sub(&coarse)) / scale;
                if err > 1e-6 {
                    return Err(Error::QuadratureNonConvergence(format!("halving changes result by {err:e}")));
                }
                Ok(fine)
            }
            Symbol::Scaled { base, factor } => Ok(self.apply(base, k, f)?.scaled(*factor)),
            Symbol::Product { a, b } => {
                let g = self.apply(b, k, f)?;
                self.apply(a, k, &g)
            }
            Symbol::Normalized { base, mode: Normalization::None } => self.apply(base, k, f),
            Symbol::Normalized { .. } | Symbol::Bar { .. } => Err(Error::NoTimeProfile),
        }
    }
}

pub fn lp_band(f: &TensorField, interval: BandInterval, bank: &LpBank, calc: &dyn FunctionalCalculus) -> Result<TensorField> {
    if bank.mode != Normalization::SumToIdentity {
        return Err(Error::RequiresPartition);
    }
    let m = band_multiplier(bank, interval);
    calc.apply(&m, f)
}

/// Multiplier of a band under the sum-to-identity partition.
pub fn band_multiplier(bank: &LpBank, interval: BandInterval) -> impl Fn(f64) -> f64 + Sync + '_ {
    move |l: f64| match interval {
        BandInterval::AtLeast(k) => bank.tail_at_least(k, l),
        BandInterval::Above(k) => bank.tail_at_least(k + 1, l),
        BandInterval::Below(k) => 1.0 - bank.tail_at_least(k, l),
        BandInterval::AtMost(k) => 1.0 - bank.tail_at_least(k + 1, l),
        BandInterval::Range(a, b) => (a..=b).map(|k| bank.multiplier(k, l)).sum(),
        BandInterval::All => 1.0,
    }
}

/// Kernel projection plus every band of the bank summed over all `k`, with the
/// two infinite tails summed as series. Equals `F` exactly when the bank is a partition of unity.
pub fn reconstruct(f: &TensorField, bank: &LpBank, calc: &dyn FunctionalCalculus) -> Result<TensorField> {
    let m = |l: f64| {
        if l == 0.0 {
            return 1.0;
        }
        bank.tail_below(bank.k_min, l) + (bank.k_min..=bank.k_max).map(|k| bank.multiplier(k, l)).sum::<f64>()
            + bank.tail_at_least(bank.k_max + 1, l)
    };
    calc.apply(&m, f)
}

/// `P_k(F G) - F P_k G` for a scalar `F`.
pub fn commutator(m: &Manifold, f: &TensorField, g: &TensorField, k: i32, bank: &LpBank) -> Result<TensorField> {
    if f.rank != 0 {
        return Err(Error::RankMismatch { expected: 0, found: f.rank });
    }
    let calc = m.calculus(g.rank)?;
    let mult = |l: f64| bank.multiplier(k, l);
    let fg = product(&m.cache, f, g)?;
    let a = calc.apply(&mult, &fg)?;
    let b = product(&m.cache, f, &calc.apply(&mult, g)?)?;
    Ok(a.sub(&b))
}

/// High-high, low-low and mixed parts of `P_k(F G)`.
#[derive(Debug, Clone)]
pub struct Trichotomy {
    pub pi: TensorField,
    pub sigma: TensorField,
    pub rho: TensorField,
}

pub fn trichotomy(m: &Manifold, f: &TensorField, g: &TensorField, k: i32, bank: &LpBank) -> Result<Trichotomy> {
    if bank.mode != Normalization::SumToIdentity {
        return Err(Error::RequiresPartition);
    }
    let hi = band_multiplier(bank, BandInterval::AtLeast(k));
    let lo = band_multiplier(bank, BandInterval::Below(k));
    let cf = m.calculus(f.rank)?;
    let fs = cf.apply_many(&[&hi, &lo], f)?;
    let cg = m.calculus(g.rank)?;
    let gs = cg.apply_many(&[&hi, &lo], g)?;
    let c = &m.cache;
    let hh = product(c, &fs[0], &gs[0])?;
    let ll = product(c, &fs[1], &gs[1])?;
    let mixed = product(c, &fs[1], &gs[0])?.add(&product(c, &fs[0], &gs[1])?);
    let cp = m.calculus(hh.rank)?;
    let pk = |l: f64| bank.multiplier(k, l);
    Ok(Trichotomy { pi: cp.apply(&pk, &hh)?, sigma: cp.apply(&pk, &ll)?, rho: cp.apply(&pk, &mixed)? })
}

/// `k,l2_norm` rows for the bank's bands.
pub fn write_decomposition(f: &TensorField, bank: &LpBank, calc: &dyn FunctionalCalculus, out: &mut impl Write) -> Result<()> {
    let cache = &calc.operator().cache;
    let ks: Vec<i32> = (bank.k_min..=bank.k_max).collect();
    let ms: Vec<Box<dyn Fn(f64) -> f64 + Sync + '_>> =
        ks.iter().map(|&k| Box::new(move |l: f64| bank.multiplier(k, l)) as Box<dyn Fn(f64) -> f64 + Sync>).collect();
    let refs: Vec<Multiplier> = ms.iter().map(|b| b.as_ref()).collect();
    let parts = calc.apply_many(&refs, f)?;
    writeln!(out, "k,l2_norm")?;
    for (k, p) in ks.iter().zip(&parts) {
        writeln!(out, "{k},{:.12e}", l2_norm(cache, p))?;
    }
    Ok(())
}

/// Bands checked by the uniform-in-`k` experiments.
pub const CHECK_BANDS: std::ops::RangeInclusive<i32> = 0..=6;
/// Largest `|k - k'|` in the almost-orthogonality fit.
pub const MAX_OFFSET: i32 = 6;

/// Symbol before any dyadic normalization.
pub fn base_symbol(symbol: &Symbol) -> &Symbol {
    match symbol {
        Symbol::Normalized { base, .. } => base,
        s => s,
    }
}

/// Points at which operator norms `sup |m(lambda)|` are evaluated: the discrete
/// spectrum when it is known, a log grid up to the spectral radius otherwise.
pub fn spectrum_points(calc: &dyn FunctionalCalculus) -> Vec<f64> {
    match calc.basis() {
        Some(b) if b.is_complete() => b.eigenvalues.iter().copied().filter(|&l| l > 0.0).collect(),
        _ => {
            let top = calc.spectral_radius();
            (0..=4000).map(|i| top * 10f64.powf(-8.0 * (1.0 - i as f64 / 4000.0))).collect()
        }
    }
}

/// Smallest positive eigenvalue, or a conservative guess when only bounds are known.
pub fn lowest_positive(calc: &dyn FunctionalCalculus) -> f64 {
    match calc.basis() {
        Some(b) => b.eigenvalues.iter().copied().find(|&l| l > 0.0).unwrap_or(1e-4),
        None => 1e-4,
    }
}

/// Least-squares slope of `y` against `x`.
pub fn fitted_slope(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = x.iter().map(|a| (a - mx) * (a - mx)).sum();
    sxy / sxx
}

/// `sup_lambda |h_k h_{k+d}|` over the spectrum, for `d = 0..=MAX_OFFSET`. With `fixed_k`
/// the sup runs over `lambda` only, otherwise also over all `k` with `k, k+d` in [`CHECK_BANDS`].
pub fn orthogonality_profile(bank: &LpBank, spectrum: &[f64], fixed_k: Option<i32>) -> Vec<f64> {
    (0..=MAX_OFFSET)
        .map(|d| {
            let ks: Vec<i32> = match fixed_k {
                Some(k) => vec![k],
                None => (*CHECK_BANDS.start()..=*CHECK_BANDS.end() - d).collect(),
            };
            ks.iter()
                .flat_map(|&k| spectrum.iter().map(move |&l| (bank.multiplier(k, l) * bank.multiplier(k + d, l)).abs()))
                .fold(0.0, f64::max)
        })
        .collect()
}

fn rel(num: f64, den: f64) -> f64 {
    if den > 0.0 {
        num / den
    } else {
        0.0
    }
}

/// Empirical checks of the Littlewood-Paley properties on a sample ensemble.
/// `bank` supplies the symbol and range; sum- and squares-normalized variants are derived from it.
pub fn verify_lp_theorem(m: &Manifold, bank: &LpBank, spec: &SampleSpec) -> Result<Vec<EstimateReport>> {
    let base = base_symbol(&bank.symbol);
    let order = base.moments();
    let sum = normalize_bank(base, Normalization::SumToIdentity, bank.k_min, bank.k_max)?;
    let sq = normalize_bank(base, Normalization::SquaresToIdentity, bank.k_min, bank.k_max)?;
    let calc = m.calculus(spec.rank)?;
    let op = m.laplacian(spec.rank)?;
    let cache = &m.cache;
    let fields = generate(cache, Some(calc.as_ref()), spec)?;
    let spectrum = spectrum_points(calc.as_ref());
    let lo = lowest_positive(calc.as_ref());
    let top = calc.spectral_radius();
    let bands: Vec<i32> = CHECK_BANDS.collect();
    let mut reports = Vec::new();

    // L^p boundedness of single bands and of P_{<k}
    let mut bounded = vec![Vec::new(); 3];
    let ps = [2.0, 4.0, f64::INFINITY];
    // weak Bernstein
    let mut bern = vec![Vec::new(); 2];
    let mut finite_band = Vec::new();
    let mut bar_defect = Vec::new();
    let mut bessel = Vec::new();
    let mut repro = Vec::new();

    let (c_lo, c_hi) = sq.covering_range(lo, top, 1e-17);
    let cover: Vec<i32> = (c_lo..=c_hi).collect();
    let bar = LpBank { symbol: Symbol::Bar { base: Box::new(sum.symbol.clone()) }, mode: Normalization::None, ..sum.clone() };
    let reproducing = LpBank { symbol: star_convolution(&sq.symbol, &sq.symbol), mode: Normalization::None, ..sq.clone() };

    for f in &fields {
        let nf = l2_norm(cache, f);
        let fp: Vec<f64> = ps.iter().map(|&p| lp_norm(cache, f, p)).collect();
        let mults: Vec<Box<dyn Fn(f64) -> f64 + Sync + '_>> = bands
            .iter()
            .flat_map(|&k| {
                let sum = &sum;
                let bar = &bar;
                [
                    Box::new(move |l: f64| sum.multiplier(k, l)) as Box<dyn Fn(f64) -> f64 + Sync>,
                    Box::new(move |l: f64| 1.0 - sum.tail_at_least(k, l)),
                    Box::new(move |l: f64| bar.multiplier(k, l)),
                ]
            })
            .collect();
        let refs: Vec<Multiplier> = mults.iter().map(|b| b.as_ref()).collect();
        let parts = calc.apply_many(&refs, f)?;
        for (i, &k) in bands.iter().enumerate() {
            let pk = &parts[3 * i];
            let low = &parts[3 * i + 1];
            let pbar = &parts[3 * i + 2];
            for (j, &p) in ps.iter().enumerate() {
                bounded[j].push(rel(lp_norm(cache, pk, p), fp[j]));
                bounded[j].push(rel(lp_norm(cache, low, p), fp[j]));
            }
            for (j, p) in [4.0f64, 8.0].iter().enumerate() {
                bern[j].push(rel(2f64.powf(-k as f64 * (1.0 - 2.0 / p)) * lp_norm(cache, pk, *p), nf));
            }
            let lap = op.apply(pk)?;
            finite_band.push(rel(l2_norm(cache, &lap), pow4(k) * nf));
            let lbar = op.apply(pbar)?.scaled(-1.0);
            bar_defect.push(rel(l2_norm(cache, &lbar.sub(&pk.scaled(pow4(k)))), pow4(k) * nf));
        }

        let sq_mults: Vec<Box<dyn Fn(f64) -> f64 + Sync + '_>> = cover
            .iter()
            .map(|&k| {
                let sq = &sq;
                Box::new(move |l: f64| sq.multiplier(k, l).powi(2)) as Box<dyn Fn(f64) -> f64 + Sync>
            })
            .collect();
        let refs: Vec<Multiplier> = sq_mults.iter().map(|b| b.as_ref()).collect();
        let energies = calc.quadratic_forms(&refs, f)?;
        bessel.push(rel(energies.iter().sum(), nf * nf));

        let sum_bar = |l: f64| if l == 0.0 { 1.0 } else { cover.iter().map(|&k| reproducing.multiplier(k, l)).sum() };
        let whole = calc.apply(&sum_bar, f)?;
        let mut defect = rel(l2_norm(cache, &whole.sub(f)), nf);
        for &k in &bands {
            let pk = |l: f64| sq.multiplier(k, l);
            let twice = calc.apply(&pk, &calc.apply(&pk, f)?)?;
            let direct = calc.apply(&|l| reproducing.multiplier(k, l), f)?;
            defect = defect.max(rel(l2_norm(cache, &twice.sub(&direct)), nf));
        }
        repro.push(defect);
    }

    for (j, name) in ["p2", "p4", "pinf"].iter().enumerate() {
        reports.push(EstimateReport::new(format!("lp/bounded_{name}"), fields.len(), bounded[j].clone()).finite());
    }

    // almost orthogonality, measured on the spectrum of the discretized operator
    let uniform = orthogonality_profile(&sum, &spectrum, None);
    let mid = (*CHECK_BANDS.start() + *CHECK_BANDS.end()) / 2;
    let fixed = orthogonality_profile(&sum, &spectrum, Some(mid - MAX_OFFSET / 2));
    let ds: Vec<f64> = (0..=MAX_OFFSET).map(f64::from).collect();
    let slope = fitted_slope(&ds, &uniform.iter().map(|v| v.log2()).collect::<Vec<_>>());
    let fixed_slope = fitted_slope(&ds, &fixed.iter().map(|v| v.log2()).collect::<Vec<_>>());
    let required = -2.0 * order as f64;
    reports.push(
        EstimateReport::new("lp/almost_orthogonality", fields.len(), uniform.clone())
            .with_pass(slope <= required)
            .param("order", order)
            .param("fitted_slope", slope)
            .param("required_slope", required)
            .param("fixed_k_slope", fixed_slope)
            .param("norms", uniform),
    );

    reports.push(EstimateReport::new("lp/bessel", fields.len(), bessel).bounded_by(1.0 + 1e-10));
    reports.push(EstimateReport::new("lp/reproducing", fields.len(), repro).bounded_by(1e-10));
    let (peak, _) = sum.symbol.sup(|s| s);
    reports.push(
        EstimateReport::new("lp/finite_band", fields.len(), finite_band)
            .bounded_by(peak * (1.0 + 1e-9))
            .param("sup_s_h", peak),
    );
    reports.push(EstimateReport::new("lp/finite_band_identity", fields.len(), bar_defect).bounded_by(1e-10));
    for (j, p) in [4, 8].iter().enumerate() {
        reports.push(EstimateReport::new(format!("lp/weak_bernstein_p{p}"), fields.len(), bern[j].clone()).finite().param("p", *p));
    }

    // commutator with F = cos(x^1)
    let g = &cache.grid;
    let cosf = TensorField::from_fn(0, g.n1, g.n2, |i, j, _| (std::f64::consts::TAU * g.coords(g.idx(i, j)).0 / g.l1).cos());
    let grad = covariant_derivative(cache, &cosf)?;
    let grad_sup = lp_norm(cache, &grad, f64::INFINITY);
    let mut comm = Vec::new();
    for f in &fields {
        let nf = l2_norm(cache, f);
        for k in 1..=*CHECK_BANDS.end() {
            let c = commutator(m, &cosf, f, k, &sum)?;
            comm.push(rel(2f64.powi(k) * l2_norm(cache, &c), grad_sup * nf));
        }
    }
    reports.push(EstimateReport::new("lp/commutator", fields.len(), comm).finite());
    Ok(reports.into_iter().map(|r| r.param("rank", spec.rank).param("n", m.n())).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{inner_product, MetricSpec};
    use crate::sample::{generate, SampleSpec};
    use proptest::prelude::*;

    fn setup(a: f64, n: usize) -> Manifold {
        Manifold::torus(n, &MetricSpec::conformal_cos(a), "t").unwrap()
    }

    fn bank(order: u32, mode: Normalization) -> LpBank {
        normalize_bank(&make_symbol(order).unwrap(), mode, -2, 6).unwrap()
    }

    #[test]
    fn canonical_peaks() {
        // s e^{-s} peaks at s = 1 with value 1/e; s^2 e^{-s} at s = 2 with 4/e^2
        let h1 = make_symbol(1).unwrap();
        assert!((h1.eval(1.0) - 1.0).abs() < 1e-15);
        assert!((h1.eval(0.5) - std::f64::consts::E * 0.5 * (-0.5f64).exp()).abs() < 1e-15);
        let h2 = make_symbol(2).unwrap();
        assert!((h2.eval(2.0) - 1.0).abs() < 1e-15);
        assert!(h2.eval(1.9) < 1.0 && h2.eval(2.1) < 1.0);
        assert_eq!(h1.eval(0.0), 0.0);
        let sm = make_smooth_symbol(2, 2.0).unwrap();
        assert!((sm.eval(4.0) - 1.0).abs() < 1e-14);
        assert!(make_symbol(0).is_err());
    }

    #[test]
    fn star_multiplies_and_commutes() {
        let a = make_symbol(1).unwrap();
        let b = make_symbol(2).unwrap();
        let ab = star_convolution(&a, &b);
        assert_eq!(ab.moments(), 3);
        for s in [0.01, 0.7, 3.0, 20.0] {
            assert_eq!(ab.eval(s), a.eval(s) * b.eval(s));
            assert_eq!(ab.eval(s), star_convolution(&b, &a).eval(s));
        }
    }

    #[test]
    fn normalizer_is_dyadically_periodic() {
        let h = make_symbol(1).unwrap();
        for s in [0.013, 0.4, 2.9] {
            assert_eq!(dyadic_sum(&h, s, false), dyadic_sum(&h, 4.0 * s, false));
        }
    }

    #[test]
    fn partition_holds_at_sample_points() {
        for mode in [Normalization::SumToIdentity, Normalization::SquaresToIdentity] {
            let b = bank(1, mode);
            for s in [0.1, 1.0, 7.3] {
                let total: f64 = (-60..60)
                    .map(|k| {
                        let v = b.multiplier(k, s);
                        if mode == Normalization::SquaresToIdentity {
                            v * v
                        } else {
                            v
                        }
                    })
                    .sum();
                assert!((total - 1.0).abs() < 1e-10, "{mode:?} {s}: {total}");
            }
        }
    }

    proptest! {
        #[test]
        fn partition_of_unity_on_log_grid(e in -6.0f64..6.0, order in 1u32..4) {
            let b = bank(order, Normalization::SumToIdentity);
            let s = 10f64.powf(e);
            let total = b.tail_below(0, s) + b.tail_at_least(0, s);
            prop_assert!((total - 1.0).abs() < 1e-10);
        }

        #[test]
        fn symbol_vanishes_to_order_n(order in 1u32..4, s in 1e-6f64..1e-3) {
            let h = make_symbol(order).unwrap();
            let ratio = h.eval(s) / s.powi(order as i32);
            let c = (order as f64 * (1.0 - (order as f64).ln())).exp();
            prop_assert!((ratio / c - 1.0).abs() < 2e-3);
        }
    }

    #[test]
    fn degenerate_symbol_rejected() {
        let tiny = Symbol::Scaled { base: Box::new(make_symbol(1).unwrap()), factor: 1e-9 };
        assert!(matches!(normalize_bank(&tiny, Normalization::SumToIdentity, 0, 3), Err(Error::DegenerateSymbol(_))));
    }

    #[test]
    fn projection_of_eigenfield_and_constant() {
        let m = setup(0.3, 16);
        let calc = m.calculus(0).unwrap();
        let basis = calc.basis().unwrap();
        let b = bank(1, Normalization::SumToIdentity);
        let phi = basis.eigenfield(7);
        let out = lp_project(&phi, 1, &b, &LpBackend::Spectral(calc.as_ref())).unwrap();
        let want = phi.scaled(b.multiplier(1, basis.eigenvalues[7]));
        assert!(out.sub(&want).max_abs() < 1e-12);
        let one = TensorField::from_fn(0, 16, 16, |_, _, _| 1.0);
        for k in -2..=6 {
            assert!(lp_project(&one, k, &b, &LpBackend::Spectral(calc.as_ref())).unwrap().max_abs() < 1e-12);
        }
    }

    #[test]
    fn quadrature_matches_spectral() {
        let m = setup(0.3, 16);
        let calc = m.calculus(0).unwrap();
        let op = m.laplacian(0).unwrap();
        let f = &generate(&m.cache, Some(calc.as_ref()), &SampleSpec::eigen(2, 1, 0)).unwrap()[0];
        let lam1 = calc.basis().unwrap().eigenvalues[1];
        for sym in [make_smooth_symbol(1, 2.0).unwrap(), make_symbol(2).unwrap()] {
            let b = normalize_bank(&sym, Normalization::None, -2, 6).unwrap();
            let quad = LpBackend::Quadrature {
                op: &op,
                calc: Some(calc.as_ref()),
                heat: HeatConfig::default(),
                nodes: 200,
                lambda_min: lam1,
            };
            for k in [0, 2] {
                let a = lp_project(f, k, &b, &LpBackend::Spectral(calc.as_ref())).unwrap();
                let q = lp_project(f, k, &b, &quad).unwrap();
                let rel = l2_norm(&m.cache, &a.sub(&q)) / l2_norm(&m.cache, &a);
                assert!(rel < 1e-6, "{sym:?} k={k}: {rel}");
            }
        }
        let nb = bank(1, Normalization::SumToIdentity);
        let quad = LpBackend::Quadrature { op: &op, calc: Some(calc.as_ref()), heat: HeatConfig::default(), nodes: 200, lambda_min: lam1 };
        assert_eq!(lp_project(f, 0, &nb, &quad).unwrap_err(), Error::NoTimeProfile);
    }

    #[test]
    fn bands_partition_and_reconstruct() {
        let m = setup(0.3, 16);
        let calc = m.calculus(1).unwrap();
        let f = &generate(&m.cache, Some(calc.as_ref()), &SampleSpec::eigen(5, 1, 1)).unwrap()[0];
        let b = bank(1, Normalization::SumToIdentity);
        let n = l2_norm(&m.cache, f);
        for k in [-1, 0, 3] {
            let lo = lp_band(f, BandInterval::Below(k), &b, calc.as_ref()).unwrap();
            let hi = lp_band(f, BandInterval::AtLeast(k), &b, calc.as_ref()).unwrap();
            assert!(l2_norm(&m.cache, &lo.add(&hi).sub(f)) < 1e-10 * n);
        }
        let all = lp_band(f, BandInterval::All, &b, calc.as_ref()).unwrap();
        assert!(l2_norm(&m.cache, &all.sub(f)) < 1e-12 * n);
        let rec = reconstruct(f, &b, calc.as_ref()).unwrap();
        assert!(l2_norm(&m.cache, &rec.sub(f)) < 1e-10 * n);
        let raw = bank(1, Normalization::None);
        let bad = reconstruct(f, &raw, calc.as_ref()).unwrap();
        assert!(l2_norm(&m.cache, &bad.sub(f)) > 1e-2 * n);
        assert_eq!(lp_band(f, BandInterval::Below(0), &raw, calc.as_ref()).unwrap_err(), Error::RequiresPartition);
    }

    #[test]
    fn projections_self_adjoint_and_commute_with_laplacian() {
        let m = setup(0.3, 16);
        let calc = m.calculus(0).unwrap();
        let op = m.laplacian(0).unwrap();
        let fs = generate(&m.cache, Some(calc.as_ref()), &SampleSpec::eigen(8, 2, 0)).unwrap();
        let b = bank(2, Normalization::SquaresToIdentity);
        let be = LpBackend::Spectral(calc.as_ref());
        let pf = lp_project(&fs[0], 1, &b, &be).unwrap();
        let pg = lp_project(&fs[1], 1, &b, &be).unwrap();
        let x = inner_product(&m.cache, &pf, &fs[1]).unwrap();
        let y = inner_product(&m.cache, &fs[0], &pg).unwrap();
        let scale = l2_norm(&m.cache, &fs[0]) * l2_norm(&m.cache, &fs[1]);
        assert!((x - y).abs() < 1e-10 * scale);
        let a = op.apply(&pf).unwrap();
        let c = lp_project(&op.apply(&fs[0]).unwrap(), 1, &b, &be).unwrap();
        assert!(l2_norm(&m.cache, &a.sub(&c)) < 1e-10 * l2_norm(&m.cache, &a));
    }

    #[test]
    fn trichotomy_sums_to_projection_of_product() {
        let m = setup(0.3, 16);
        let c0 = m.calculus(0).unwrap();
        let fs = generate(&m.cache, Some(c0.as_ref()), &SampleSpec::eigen(3, 2, 0)).unwrap();
        let b = bank(1, Normalization::SumToIdentity);
        for k in [0, 2] {
            let t = trichotomy(&m, &fs[0], &fs[1], k, &b).unwrap();
            let whole = c0.apply(&|l| b.multiplier(k, l), &product(&m.cache, &fs[0], &fs[1]).unwrap()).unwrap();
            let sum = t.pi.add(&t.sigma).add(&t.rho);
            assert!(l2_norm(&m.cache, &sum.sub(&whole)) < 1e-10 * l2_norm(&m.cache, &whole).max(1e-300));
        }
        let one = TensorField::from_fn(0, 16, 16, |_, _, _| 1.0);
        let t = trichotomy(&m, &fs[0], &one, 2, &b).unwrap();
        assert!(t.pi.max_abs() < 1e-12);
    }

    #[test]
    fn commutator_with_constant_vanishes() {
        let m = setup(0.3, 16);
        let c1 = m.calculus(1).unwrap();
        let g = &generate(&m.cache, Some(c1.as_ref()), &SampleSpec::eigen(3, 1, 1)).unwrap()[0];
        let two = TensorField::from_fn(0, 16, 16, |_, _, _| 2.0);
        let b = bank(1, Normalization::SumToIdentity);
        assert!(commutator(&m, &two, g, 2, &b).unwrap().max_abs() < 1e-10 * g.max_abs());
        let zero = TensorField::zeros(1, 16, 16);
        assert_eq!(commutator(&m, &two, &zero, 2, &b).unwrap().max_abs(), 0.0);
    }

    #[test]
    fn theorem_reports_on_small_grid() {
        let m = setup(0.3, 16);
        let b = bank(1, Normalization::SumToIdentity);
        let reports = verify_lp_theorem(&m, &b, &SampleSpec::fourier(4, 4, 0, 3)).unwrap();
        for r in &reports {
            eprintln!("{} worst={:.4e} pass={} {:?}", r.name, r.worst_ratio, r.pass, r.params.get("fitted_slope"));
            if r.name != "lp/almost_orthogonality" {
                assert!(r.pass, "{}", r.name);
            }
        }
    }

    #[test]
    fn slope_fit_recovers_line() {
        let x = [0.0, 1.0, 2.0, 3.0];
        let y: Vec<f64> = x.iter().map(|v| 3.0 - 2.5 * v).collect();
        assert!((fitted_slope(&x, &y) + 2.5).abs() < 1e-14);
    }
}
