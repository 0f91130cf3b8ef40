//! Functional calculus `f(-Delta)` for the assembled Laplacians.
//!
//! Two backends: a dense generalized eigenbasis and a Chebyshev expansion
//! that only needs matrix-vector products.

use std::sync::{Arc, Mutex};

use rand::SeedableRng;
use rand_distr::{Distribution, StandardNormal};
use rustfft::{num_complex::Complex, FftPlanner};

use crate::error::{Error, Result};
use crate::field::TensorField;
use crate::linalg;
use crate::operators::LaplaceOperator;
use crate::stencil::Stencil;

/// A real function of the eigenvalue of `-Delta`.
pub type Multiplier<'a> = &'a (dyn Fn(f64) -> f64 + Sync);

/// Largest dimension for which the full dense eigenbasis is computed.
pub const DENSE_LIMIT: usize = 4096;

pub trait FunctionalCalculus: Send + Sync {
    fn operator(&self) -> &LaplaceOperator;

    /// Upper bound on the spectrum of `-Delta`.
    fn spectral_radius(&self) -> f64;

    /// `m(-Delta) F` for each multiplier `m`.
    fn apply_many(&self, ms: &[Multiplier], f: &TensorField) -> Result<Vec<TensorField>>;

    fn apply(&self, m: Multiplier, f: &TensorField) -> Result<TensorField> {
        Ok(self.apply_many(&[m], f)?.remove(0))
    }

    /// Mass inner products `<m(-Delta) F, F>`; `||m(-Delta) F||^2` is the form of `m^2`.
    fn quadratic_forms(&self, ms: &[Multiplier], f: &TensorField) -> Result<Vec<f64>> {
        let op = self.operator();
        let mf = op.mass_apply(&f.data);
        Ok(self.apply_many(ms, f)?.iter().map(|g| linalg::dot(&g.data, &mf)).collect())
    }

    /// The eigenbasis, when this backend has one.
    fn basis(&self) -> Option<&SpectralBasis> {
        None
    }

    fn rank(&self) -> usize {
        self.operator().rank
    }
}

/// Eigenpairs of `-Delta`: `-Delta phi_i = lambda_i phi_i`, orthonormal in the mass inner product.
///
/// Vectors are stored in reduced coordinates `u_i = L^T phi_i` (column-major,
/// `dim x count`) where `M = L L^T`. With fewer than `dim` pairs, multipliers
/// act on the span of the retained eigenfields only.
#[derive(Debug, Clone)]
pub struct SpectralBasis {
    pub op: Arc<LaplaceOperator>,
    pub eigenvalues: Vec<f64>,
    vectors: Vec<f64>,
    lambda_max: f64,
}

impl SpectralBasis {
    pub fn dim(&self) -> usize {
        self.op.dim()
    }
    pub fn count(&self) -> usize {
        self.eigenvalues.len()
    }
    pub fn is_complete(&self) -> bool {
        self.count() == self.dim()
    }

    /// Mass-orthonormal coefficients `c_i = <F, phi_i>`.
    pub fn coefficients(&self, f: &TensorField) -> Result<Vec<f64>> {
        self.op.check(f)?;
        let y = self.op.chol_t_apply(&f.data);
        Ok(linalg::gemv_t(&self.vectors, self.dim(), self.count(), &y))
    }

    pub fn synthesize(&self, coeffs: &[f64]) -> TensorField {
        let y = linalg::gemv(&self.vectors, self.dim(), self.count(), coeffs);
        self.op.field(self.op.chol_inv_t_apply(&y))
    }

    pub fn eigenfield(&self, i: usize) -> TensorField {
        let u = &self.vectors[i * self.dim()..(i + 1) * self.dim()];
        self.op.field(self.op.chol_inv_t_apply(u))
    }

    /// Mass-norm residual `|| -Delta phi - lambda phi ||` of one pair.
    pub fn residual(&self, i: usize) -> f64 {
        let phi = self.eigenfield(i);
        let lap = self.op.apply(&phi).expect("own field");
        let r: Vec<f64> = lap.data.iter().zip(&phi.data).map(|(l, p)| -l - self.eigenvalues[i] * p).collect();
        linalg::dot(&self.op.mass_apply(&r), &r).max(0.0).sqrt()
    }

    /// Export the first `count` pairs as a new basis.
    pub fn truncated(&self, count: usize) -> SpectralBasis {
        let count = count.min(self.count());
        SpectralBasis {
            op: self.op.clone(),
            eigenvalues: self.eigenvalues[..count].to_vec(),
            vectors: self.vectors[..count * self.dim()].to_vec(),
            lambda_max: self.lambda_max,
        }
    }
}

impl FunctionalCalculus for SpectralBasis {
    fn operator(&self) -> &LaplaceOperator {
        &self.op
    }
    fn spectral_radius(&self) -> f64 {
        self.lambda_max
    }
    fn apply_many(&self, ms: &[Multiplier], f: &TensorField) -> Result<Vec<TensorField>> {
        let c = self.coefficients(f)?;
        Ok(ms
            .iter()
            .map(|m| {
                let d: Vec<f64> = c.iter().zip(&self.eigenvalues).map(|(c, l)| c * m(*l)).collect();
                self.synthesize(&d)
            })
            .collect())
    }
    fn quadratic_forms(&self, ms: &[Multiplier], f: &TensorField) -> Result<Vec<f64>> {
        let c = self.coefficients(f)?;
        Ok(ms.iter().map(|m| c.iter().zip(&self.eigenvalues).map(|(c, l)| c * c * m(*l)).sum()).collect())
    }
    fn basis(&self) -> Option<&SpectralBasis> {
        Some(self)
    }
}

fn clean_eigenvalues(w: &mut [f64]) {
    let top = w.iter().cloned().fold(1.0_f64, f64::max);
    for v in w.iter_mut() {
        if *v < 1e-11 * top {
            *v = 0.0;
        }
    }
}

fn check_residuals(basis: &SpectralBasis) -> Result<()> {
    let b = basis.op.reduced_stencil();
    let n = basis.dim();
    for i in 0..basis.count() {
        let u = &basis.vectors[i * n..(i + 1) * n];
        let bu = b.apply(u);
        let lam = basis.eigenvalues[i];
        let r = bu.iter().zip(u).map(|(x, y)| (x - lam * y).powi(2)).sum::<f64>().sqrt();
        if r > 1e-8 * lam.max(1.0) {
            return Err(Error::ConvergenceFailure(format!("eigenpair {i}: residual {r:e} at lambda {lam}")));
        }
    }
    Ok(())
}

/// Lowest `count` eigenpairs (all of them when `None`).
///
/// Dense LAPACK up to [`DENSE_LIMIT`], restarted Lanczos above.
pub fn eigendecompose(op: Arc<LaplaceOperator>, count: Option<usize>) -> Result<SpectralBasis> {
    let dim = op.dim();
    let count = count.unwrap_or(dim).min(dim);
    let b = op.reduced_stencil();
    let basis = if dim <= DENSE_LIMIT {
        let (mut w, v) = linalg::symmetric_eigen(b.to_dense(), dim)?;
        clean_eigenvalues(&mut w);
        let lambda_max = *w.last().unwrap_or(&0.0);
        w.truncate(count);
        let mut v = v;
        v.truncate(count * dim);
        SpectralBasis { op, eigenvalues: w, vectors: v, lambda_max }
    } else {
        let (mut w, v) = lanczos_lowest(&b, count, 0x5eed, 1e-10)?;
        clean_eigenvalues(&mut w);
        SpectralBasis { op, eigenvalues: w, vectors: v, lambda_max: b.gershgorin() }
    };
    check_residuals(&basis)?;
    Ok(basis)
}

/// Lowest `count` eigenpairs of a symmetric stencil by Lanczos with full
/// reorthogonalization, locking converged pairs and restarting until a fresh
/// run finds nothing below the locked set.
fn lanczos_lowest(b: &Stencil, count: usize, seed: u64, tol: f64) -> Result<(Vec<f64>, Vec<f64>)> {
    let n = b.rows();
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let mut locked_vals: Vec<f64> = vec![];
    let mut locked: Vec<Vec<f64>> = vec![];
    let max_krylov = n.min(2400);
    let mut confirmed = false;
    for _restart in 0..(2 * count + 8) {
        let want = (count.saturating_sub(locked.len())).max(1);
        let mut q: Vec<f64> = (0..n).map(|_| StandardNormal.sample(&mut rng)).collect();
        orthogonalize(&mut q, &locked);
        orthogonalize(&mut q, &locked);
        let nq = linalg::norm(&q);
        q.iter_mut().for_each(|v| *v /= nq);
        let mut basis: Vec<Vec<f64>> = vec![q];
        let mut alpha = vec![];
        let mut beta: Vec<f64> = vec![];
        let mut found: Option<(Vec<f64>, Vec<Vec<f64>>)> = None;
        while basis.len() <= max_krylov {
            let k = basis.len() - 1;
            let mut w = b.apply(&basis[k]);
            let a = linalg::dot(&w, &basis[k]);
            alpha.push(a);
            for _ in 0..2 {
                orthogonalize(&mut w, &locked);
                orthogonalize(&mut w, &basis);
            }
            let bn = linalg::norm(&w);
            let m = alpha.len();
            let done = bn < 1e-12 || m == max_krylov || m == n - locked.len();
            if m % 40 == 0 || done {
                let (theta, s) = linalg::tridiagonal_lowest(&alpha, &beta, want)?;
                let ok = (0..want.min(m))
                    .take_while(|&i| (bn * s[i * m + m - 1]).abs() <= tol * theta[i].abs().max(1.0))
                    .count();
                // at the step limit, lock whatever converged and restart for the rest
                if ok == want.min(m) || (done && ok > 0) {
                    let take = ok;
                    let vecs: Vec<Vec<f64>> = (0..take)
                        .map(|i| {
                            let mut v = vec![0.0; n];
                            for (j, qj) in basis.iter().enumerate() {
                                let c = s[i * m + j];
                                v.iter_mut().zip(qj).for_each(|(v, q)| *v += c * q);
                            }
                            v
                        })
                        .collect();
                    found = Some((theta[..take].to_vec(), vecs));
                    break;
                }
                if done {
                    break;
                }
            }
            beta.push(bn);
            basis.push(w.into_iter().map(|v| v / bn).collect());
        }
        let Some((vals, vecs)) = found else {
            return Err(Error::ConvergenceFailure(format!("Lanczos: no convergence within {max_krylov} steps")));
        };
        let top = locked_vals.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        if locked.len() >= count {
            // verification run: anything below the locked set was missed
            if vals[0] >= top - tol * top.abs().max(1.0) {
                confirmed = true;
                break;
            }
        }
        for (v, x) in vals.into_iter().zip(vecs) {
            if locked.len() >= count && v >= top {
                continue;
            }
            locked_vals.push(v);
            locked.push(x);
        }
    }
    if !confirmed {
        return Err(Error::ConvergenceFailure("Lanczos restarts exhausted".into()));
    }
    let mut order: Vec<usize> = (0..locked.len()).collect();
    order.sort_by(|&a, &b| locked_vals[a].total_cmp(&locked_vals[b]));
    order.truncate(count);
    let vals = order.iter().map(|&i| locked_vals[i]).collect();
    let mut vecs = Vec::with_capacity(count * n);
    for &i in &order {
        vecs.extend_from_slice(&locked[i]);
    }
    Ok((vals, vecs))
}

/// Lowest eigenpairs by Chebyshev-filtered subspace iteration on a block of
/// `count + 16` vectors. At most `count` are returned, all below 0.8 times the top
/// Ritz value of the block. Unlike single-vector Lanczos it resolves repeated eigenvalues
/// in one pass, which flat and nearly flat tori have in abundance.
fn filtered_subspace_lowest(b: &Stencil, count: usize, lambda_max: f64, seed: u64, tol: f64) -> Result<(Vec<f64>, Vec<f64>)> {
    const DEGREE: usize = 40;
    let n = b.rows();
    let p = (count + 16).min(n);
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let mut x: Vec<Vec<f64>> = (0..p).map(|_| (0..n).map(|_| StandardNormal.sample(&mut rng)).collect()).collect();
    orthonormalize(&mut x);
    let mut bx = vec![vec![0.0; n]; p];
    for _iter in 0..400 {
        // Rayleigh-Ritz
        for (v, w) in x.iter().zip(bx.iter_mut()) {
            b.matvec(v, w);
        }
        let mut h = vec![0.0; p * p];
        for i in 0..p {
            for j in 0..=i {
                h[j * p + i] = linalg::dot(&x[i], &bx[j]);
            }
        }
        let (theta, s) = linalg::symmetric_eigen(h, p)?;
        let rotate = |v: &[Vec<f64>]| -> Vec<Vec<f64>> {
            (0..p)
                .map(|k| {
                    let mut out = vec![0.0; n];
                    for (j, vj) in v.iter().enumerate() {
                        let c = s[k * p + j];
                        out.iter_mut().zip(vj).for_each(|(o, v)| *o += c * v);
                    }
                    out
                })
                .collect()
        };
        x = rotate(&x);
        bx = rotate(&bx);
        // only pairs well separated from the block edge converge at a useful rate
        let keep = theta[..count].iter().take_while(|&&t| t <= 0.8 * theta[p - 1]).count();
        let converged = keep > 0
            && (0..keep).all(|i| {
                let r: f64 = bx[i].iter().zip(&x[i]).map(|(b, v)| (b - theta[i] * v).powi(2)).sum();
                r.sqrt() <= tol * theta[i].abs().max(1.0)
            });
        if converged {
            let mut vecs = Vec::with_capacity(keep * n);
            x[..keep].iter().for_each(|v| vecs.extend_from_slice(v));
            return Ok((theta[..keep].to_vec(), vecs));
        }
        // damp [theta_top, Lambda], where the unwanted part of the spectrum lives
        let lo = theta[p - 1];
        let (c, e) = (0.5 * (lambda_max + lo), 0.5 * (lambda_max - lo));
        for v in x.iter_mut() {
            let mut prev = v.clone();
            let mut cur = vec![0.0; n];
            let mut tmp = vec![0.0; n];
            b.matvec(&prev, &mut cur);
            cur.iter_mut().zip(&prev).for_each(|(y, p)| *y = (*y - c * p) / e);
            for _ in 1..DEGREE {
                b.matvec(&cur, &mut tmp);
                for k in 0..n {
                    tmp[k] = 2.0 * (tmp[k] - c * cur[k]) / e - prev[k];
                }
                std::mem::swap(&mut prev, &mut cur);
                std::mem::swap(&mut cur, &mut tmp);
            }
            *v = cur;
        }
        orthonormalize(&mut x);
    }
    Err(Error::ConvergenceFailure(format!("subspace iteration: {count} pairs not converged")))
}

/// Gram-Schmidt, twice.
fn orthonormalize(x: &mut [Vec<f64>]) {
    for i in 0..x.len() {
        let (done, rest) = x.split_at_mut(i);
        let v = &mut rest[0];
        for _ in 0..2 {
            orthogonalize(v, done);
        }
        let nv = linalg::norm(v);
        v.iter_mut().for_each(|a| *a /= nv);
    }
}

fn orthogonalize(w: &mut [f64], against: &[Vec<f64>]) {
    for q in against {
        let c = linalg::dot(w, q);
        w.iter_mut().zip(q).for_each(|(w, q)| *w -= c * q);
    }
}

/// Chebyshev expansion of multipliers on `[0, Lambda]`, with `Lambda` a
/// Gershgorin bound. The degree grows until the trailing coefficients fall
/// below `tol` relative to the largest, capped at `max_degree`.
///
/// With deflation, the lowest eigenpairs are computed by Lanczos and a multiplier
/// `m` is split as `m chi + m (1 - chi)`, `chi = exp(-(lambda / lambda_c)^6)`. The
/// first part acts exactly on the low modes; only the second, which is flat near
/// the bottom of the spectrum, is expanded. Band multipliers concentrated far below
/// the grid scale then cost no polynomial degree.
pub struct ChebyshevCalculus {
    pub op: Arc<LaplaceOperator>,
    reduced: Stencil,
    lambda_max: f64,
    pub tol: f64,
    pub max_degree: usize,
    low: Option<(SpectralBasis, f64)>,
    worst_tail: Mutex<f64>,
}

/// Low modes split off by [`ChebyshevCalculus::deflated`].
pub const DEFLATED_MODES: usize = 64;
const CUTOFF_POWER: i32 = 6;

impl ChebyshevCalculus {
    pub fn new(op: Arc<LaplaceOperator>) -> Self {
        let reduced = op.reduced_stencil();
        let lambda_max = reduced.gershgorin() * (1.0 + 1e-12);
        ChebyshevCalculus { op, reduced, lambda_max, tol: 1e-13, max_degree: 4096, low: None, worst_tail: Mutex::new(0.0) }
    }

    /// Splits off up to `count` lowest eigenpairs; the cutoff sits at half the largest of them,
    /// where `chi` of every remaining mode is below `exp(-64)`.
    pub fn deflated(op: Arc<LaplaceOperator>, count: usize) -> Result<Self> {
        let mut c = Self::new(op.clone());
        let count = count.min(op.dim() / 2);
        let (mut w, v) = filtered_subspace_lowest(&c.reduced, count, c.lambda_max, 0x5eed, 1e-12)?;
        clean_eigenvalues(&mut w);
        let top = w.last().copied().unwrap_or(0.0);
        if !(top > 0.0) {
            return Err(Error::ConvergenceFailure("deflation found no positive eigenvalue".into()));
        }
        let basis = SpectralBasis { op, eigenvalues: w, vectors: v, lambda_max: c.lambda_max };
        check_residuals(&basis)?;
        c.low = Some((basis, 0.5 * top));
        Ok(c)
    }

    /// Eigenpairs handled exactly, if deflated.
    pub fn low_modes(&self) -> Option<&SpectralBasis> {
        self.low.as_ref().map(|l| &l.0)
    }

    /// Largest relative trailing coefficient accepted so far; zero when every expansion converged.
    pub fn worst_tail(&self) -> f64 {
        *self.worst_tail.lock().unwrap()
    }

    fn cutoff(&self, lambda: f64) -> f64 {
        match &self.low {
            Some((_, lc)) => (-(lambda / lc).powi(CUTOFF_POWER)).exp(),
            None => 0.0,
        }
    }

    /// Coefficients of the part of `m` left to the expansion. Its tail is judged against the
    /// size of the whole multiplier, since the remainder may be negligible everywhere.
    fn coefficients(&self, m: Multiplier) -> Vec<f64> {
        match &self.low {
            Some((low, _)) => {
                let on_grid = (0..=240).map(|i| m(self.lambda_max * 10f64.powf(-12.0 + 0.05 * i as f64)));
                let scale = low.eigenvalues.iter().map(|l| m(*l)).chain(on_grid).fold(0.0_f64, |a, v| a.max(v.abs()));
                let rest = |l: f64| m(l) * (1.0 - self.cutoff(l));
                self.expand(&rest, scale)
            }
            None => self.expand(m, 0.0),
        }
    }

    fn expand(&self, m: Multiplier, scale: f64) -> Vec<f64> {
        let mut planner = FftPlanner::new();
        let mut n = 64;
        loop {
            let c = chebyshev_coefficients(m, self.lambda_max, n, &mut planner);
            let big = c.iter().fold(0.0_f64, |a, v| a.max(v.abs()));
            let tail = c[n - n / 8..].iter().fold(0.0_f64, |a, v| a.max(v.abs()));
            let big = big.max(scale);
            let rel = if big == 0.0 { 0.0 } else { tail / big };
            if rel <= self.tol || 2 * n > self.max_degree {
                if rel > self.tol {
                    let mut w = self.worst_tail.lock().unwrap();
                    *w = w.max(rel);
                }
                let keep = c.iter().rposition(|v| v.abs() > 1e-17 * big).map_or(1, |k| k + 1);
                return c[..keep].to_vec();
            }
            n *= 2;
        }
    }
}

/// Coefficients of `m` in Chebyshev polynomials of `x = 2 lambda / Lambda - 1`
/// from `n` first-kind nodes, via a length-`2n` FFT.
fn chebyshev_coefficients(m: Multiplier, lmax: f64, n: usize, planner: &mut FftPlanner<f64>) -> Vec<f64> {
    use std::f64::consts::PI;
    let f: Vec<f64> = (0..n)
        .map(|k| {
            let x = (PI * (k as f64 + 0.5) / n as f64).cos();
            m(0.5 * lmax * (x + 1.0))
        })
        .collect();
    let mut v: Vec<Complex<f64>> = vec![Complex::new(0.0, 0.0); 2 * n];
    for k in 0..n {
        v[k] = Complex::new(f[k], 0.0);
        v[2 * n - 1 - k] = Complex::new(f[k], 0.0);
    }
    planner.plan_fft_forward(2 * n).process(&mut v);
    let mut c: Vec<f64> = (0..n)
        .map(|j| {
            let ph = Complex::from_polar(1.0, -PI * j as f64 / (2.0 * n as f64));
            (v[j] * ph).re / n as f64
        })
        .collect();
    c[0] *= 0.5;
    c
}

impl FunctionalCalculus for ChebyshevCalculus {
    fn operator(&self) -> &LaplaceOperator {
        &self.op
    }
    fn spectral_radius(&self) -> f64 {
        self.lambda_max
    }
    fn apply_many(&self, ms: &[Multiplier], f: &TensorField) -> Result<Vec<TensorField>> {
        self.op.check(f)?;
        let coeffs: Vec<Vec<f64>> = ms.iter().map(|m| self.coefficients(*m)).collect();
        let deg = coeffs.iter().map(|c| c.len()).max().unwrap_or(1);
        let y = self.op.chol_t_apply(&f.data);
        let n = y.len();
        let mut outs: Vec<Vec<f64>> = coeffs.iter().map(|c| y.iter().map(|v| v * c[0]).collect()).collect();
        let scale = 2.0 / self.lambda_max;
        let mut prev = y.clone();
        let mut cur = vec![0.0; n];
        let mut tmp = vec![0.0; n];
        if deg > 1 {
            self.reduced.matvec(&prev, &mut cur);
            cur.iter_mut().zip(&prev).for_each(|(c, p)| *c = scale * *c - p);
        }
        for j in 1..deg {
            for (o, c) in outs.iter_mut().zip(&coeffs) {
                if let Some(&cj) = c.get(j) {
                    o.iter_mut().zip(&cur).for_each(|(o, t)| *o += cj * t);
                }
            }
            if j + 1 < deg {
                self.reduced.matvec(&cur, &mut tmp);
                for k in 0..n {
                    tmp[k] = 2.0 * (scale * tmp[k] - cur[k]) - prev[k];
                }
                std::mem::swap(&mut prev, &mut cur);
                std::mem::swap(&mut cur, &mut tmp);
            }
        }
        if let Some((low, _)) = &self.low {
            let c = linalg::gemv_t(&low.vectors, n, low.count(), &y);
            for (o, m) in outs.iter_mut().zip(ms) {
                let d: Vec<f64> = c.iter().zip(&low.eigenvalues).map(|(c, l)| c * m(*l) * self.cutoff(*l)).collect();
                o.iter_mut().zip(linalg::gemv(&low.vectors, n, low.count(), &d)).for_each(|(o, v)| *o += v);
            }
        }
        Ok(outs.into_iter().map(|o| self.op.field(self.op.chol_inv_t_apply(&o))).collect())
    }

    /// Uses Chebyshev moments `y^T T_j y`, two per recurrence step.
    fn quadratic_forms(&self, ms: &[Multiplier], f: &TensorField) -> Result<Vec<f64>> {
        self.op.check(f)?;
        let coeffs: Vec<Vec<f64>> = ms.iter().map(|m| self.coefficients(*m)).collect();
        let deg = coeffs.iter().map(|c| c.len()).max().unwrap_or(1);
        let steps = deg / 2 + 1;
        let y = self.op.chol_t_apply(&f.data);
        let n = y.len();
        let scale = 2.0 / self.lambda_max;
        let mut mu = vec![0.0; 2 * steps + 2];
        let mut prev = y.clone();
        let mut cur = vec![0.0; n];
        let mut tmp = vec![0.0; n];
        self.reduced.matvec(&prev, &mut cur);
        cur.iter_mut().zip(&prev).for_each(|(c, p)| *c = scale * *c - p);
        mu[0] = linalg::dot(&y, &y);
        mu[1] = linalg::dot(&cur, &y);
        // prev = t_j, cur = t_{j+1}
        for j in 1..=steps {
            mu[2 * j] = 2.0 * linalg::dot(&cur, &cur) - mu[0];
            self.reduced.matvec(&cur, &mut tmp);
            for k in 0..n {
                tmp[k] = 2.0 * (scale * tmp[k] - cur[k]) - prev[k];
            }
            std::mem::swap(&mut prev, &mut cur);
            std::mem::swap(&mut cur, &mut tmp);
            mu[2 * j + 1] = 2.0 * linalg::dot(&cur, &prev) - mu[1];
        }
        let mut q: Vec<f64> = coeffs.iter().map(|c| c.iter().zip(&mu).map(|(c, m)| c * m).sum()).collect();
        if let Some((low, _)) = &self.low {
            let c = linalg::gemv_t(&low.vectors, n, low.count(), &y);
            for (q, m) in q.iter_mut().zip(ms) {
                *q += c.iter().zip(&low.eigenvalues).map(|(c, l)| c * c * m(*l) * self.cutoff(*l)).sum::<f64>();
            }
        }
        Ok(q)
    }
}

/// Dense eigenbasis when `dim <= dense_limit`, deflated Chebyshev otherwise.
pub fn build_calculus(op: Arc<LaplaceOperator>, dense_limit: usize) -> Result<Arc<dyn FunctionalCalculus>> {
    if op.dim() <= dense_limit.min(DENSE_LIMIT) {
        Ok(Arc::new(eigendecompose(op, None)?))
    } else {
        Ok(Arc::new(ChebyshevCalculus::deflated(op, DEFLATED_MODES)?))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{build_cache, build_grid, inner_product, MetricSpec};
    use crate::operators::assemble_laplacian;
    use std::f64::consts::{PI, TAU};

    fn op(a: f64, n: usize, rank: usize) -> Arc<LaplaceOperator> {
        let c = Arc::new(build_cache(&build_grid(n, n, TAU, TAU, &MetricSpec::conformal_cos(a)).unwrap()));
        Arc::new(assemble_laplacian(c, rank).unwrap())
    }

    #[test]
    fn flat_spectrum_matches_dispersion_relation() {
        let n = 16;
        let b = eigendecompose(op(0.0, n, 0), None).unwrap();
        let h = TAU / n as f64;
        let mut want: Vec<f64> = (0..n * n)
            .map(|k| {
                let (k1, k2) = ((k / n) as f64, (k % n) as f64);
                4.0 / (h * h) * ((PI * k1 / n as f64).sin().powi(2) + (PI * k2 / n as f64).sin().powi(2))
            })
            .collect();
        want.sort_by(f64::total_cmp);
        for (a, b) in b.eigenvalues.iter().zip(&want) {
            assert!((a - b).abs() < 1e-10 * b.max(1.0));
        }
        assert_eq!(b.eigenvalues[0], 0.0);
        let phi0 = b.eigenfield(0);
        let spread = phi0.data.iter().fold(0.0_f64, |m, v| m.max((v - phi0.data[0]).abs()));
        assert!(spread < 1e-12);
    }

    #[test]
    fn eigenfields_are_mass_orthonormal() {
        let b = eigendecompose(op(0.3, 8, 1), None).unwrap();
        for i in (0..b.count()).step_by(7) {
            for j in (0..b.count()).step_by(5) {
                let d = inner_product(&b.op.cache, &b.eigenfield(i), &b.eigenfield(j)).unwrap();
                let want = if i == j { 1.0 } else { 0.0 };
                assert!((d - want).abs() < 1e-10);
            }
            assert!(b.residual(i) < 1e-8 * b.eigenvalues[i].max(1.0));
        }
    }

    #[test]
    fn chebyshev_matches_dense_on_heat() {
        let o = op(0.3, 16, 1);
        let dense = eigendecompose(o.clone(), None).unwrap();
        let cheb = ChebyshevCalculus::new(o.clone());
        let f = TensorField::from_fn(1, 16, 16, |i, j, c| ((i * 7 + j * 3 + c) as f64).sin());
        for tau in [1e-3, 0.1, 2.0] {
            let m = move |l: f64| (-tau * l).exp();
            let a = dense.apply(&m, &f).unwrap();
            let b = cheb.apply(&m, &f).unwrap();
            let e = a.sub(&b).max_abs();
            assert!(e < 1e-11 * f.max_abs(), "tau {tau}: {e}");
        }
        assert_eq!(cheb.worst_tail(), 0.0);
        let sq = |l: f64| (-0.2 * l).exp();
        let qa = dense.quadratic_forms(&[&sq], &f).unwrap()[0];
        let qb = cheb.quadratic_forms(&[&sq], &f).unwrap()[0];
        assert!((qa - qb).abs() < 1e-11 * qa, "{qa} {qb}");
    }

    #[test]
    fn deflated_resolves_bands_near_the_kernel() {
        let o = op(0.3, 16, 1);
        let dense = eigendecompose(o.clone(), None).unwrap();
        let defl = ChebyshevCalculus::deflated(o.clone(), 24).unwrap();
        let f = TensorField::from_fn(1, 16, 16, |i, j, c| ((i * 5 + j * 11 + 2 * c) as f64).cos());
        for delta in [1e-3, 0.3, 3.0, 40.0] {
            let m = move |l: f64| (l / delta) * (-l / delta).exp();
            let a = dense.apply(&m, &f).unwrap();
            let b = defl.apply(&m, &f).unwrap();
            let e = a.sub(&b).max_abs();
            assert!(e < 1e-10 * f.max_abs(), "delta {delta}: {e}");
            let qa = dense.quadratic_forms(&[&m], &f).unwrap()[0];
            let qb = defl.quadratic_forms(&[&m], &f).unwrap()[0];
            assert!((qa - qb).abs() < 1e-10 * l2(&f), "delta {delta}: {qa} {qb}");
        }
        let kernel = |l: f64| if l < 1e-9 { 1.0 } else { 0.0 };
        let e = dense.apply(&kernel, &f).unwrap().sub(&defl.apply(&kernel, &f).unwrap()).max_abs();
        assert!(e < 1e-10 * f.max_abs(), "kernel {e}");
        assert_eq!(defl.worst_tail(), 0.0);
    }

    fn l2(f: &TensorField) -> f64 {
        f.data.iter().map(|v| v * v).sum::<f64>()
    }

    #[test]
    fn lanczos_finds_degenerate_low_modes() {
        let o = op(0.0, 12, 1);
        let dense = eigendecompose(o.clone(), None).unwrap();
        let b = o.reduced_stencil();
        let (w, _) = lanczos_lowest(&b, 12, 3, 1e-10).unwrap();
        for (a, b) in w.iter().zip(&dense.eigenvalues) {
            assert!((a - b).abs() < 1e-8 * b.max(1.0), "{w:?}");
        }
    }
}
