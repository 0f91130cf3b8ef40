//! Covariant differential operators and the assembled connection Laplacian.

use std::io::Write;
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::field::{ncomp, TensorField};
use crate::geometry::{kron_power, GeometryCache};
use crate::stencil::{offset_index, Stencil};

/// Replace the index in `slot` (0 = leftmost) of a rank-`rank` component by `c`.
#[inline]
fn set_slot(comp: usize, rank: usize, slot: usize, c: usize) -> usize {
    let bit = rank - 1 - slot;
    (comp & !(1 << bit)) | (c << bit)
}

#[inline]
fn slot(comp: usize, rank: usize, slot: usize) -> usize {
    (comp >> (rank - 1 - slot)) & 1
}

/// Centered covariant gradient from rank `rank` to `rank + 1` as a stencil.
pub(crate) fn centered_gradient(cache: &GeometryCache, rank: usize) -> Stencil {
    let nc = ncomp(rank);
    let (n1, n2) = (cache.n1(), cache.n2());
    let h = [cache.grid.h1(), cache.grid.h2()];
    let mut st = Stencil::zeros(n1, n2, 2 * nc, nc);
    let flat = cache.grid.is_flat();
    for p in 0..cache.nodes() {
        for a in 0..2 {
            let (fwd, bwd) = if a == 0 { (offset_index(1, 0), offset_index(-1, 0)) } else { (offset_index(0, 1), offset_index(0, -1)) };
            for comp in 0..nc {
                let row = a * nc + comp;
                st.add(p, row, fwd, comp, 0.5 / h[a]);
                st.add(p, row, bwd, comp, -0.5 / h[a]);
                if flat {
                    continue;
                }
                for s in 0..rank {
                    let b = slot(comp, rank, s);
                    for c in 0..2 {
                        st.add(p, row, offset_index(0, 0), set_slot(comp, rank, s, c), -cache.gamma(p, c, a, b));
                    }
                }
            }
        }
    }
    st
}

/// Centered covariant derivative `nabla_a F_b = D_a F_b - Gamma^c_ab F_c`.
pub fn covariant_derivative(cache: &GeometryCache, f: &TensorField) -> Result<TensorField> {
    if f.rank > 1 {
        return Err(Error::RankTooHigh(f.rank));
    }
    cache.check_field(f)?;
    let g = centered_gradient(cache, f.rank);
    TensorField::from_data(f.rank + 1, f.n1, f.n2, g.apply(&f.data))
}

fn mass_blocks(cache: &GeometryCache, rank: usize, inverse: bool) -> Vec<f64> {
    let mut out = Vec::with_capacity(cache.nodes() * ncomp(rank) * ncomp(rank));
    for p in 0..cache.nodes() {
        let (m, s) = if inverse { (cache.metric(p), 1.0 / cache.weight[p]) } else { (cache.inv(p), cache.weight[p]) };
        out.extend(kron_power(&m, rank).into_iter().map(|v| v * s));
    }
    out
}

fn block_apply(blocks: &[f64], nc: usize, x: &[f64], transpose: bool) -> Vec<f64> {
    let mut y = vec![0.0; x.len()];
    let b2 = nc * nc;
    for p in 0..x.len() / nc {
        let blk = &blocks[p * b2..(p + 1) * b2];
        for r in 0..nc {
            let mut s = 0.0;
            for c in 0..nc {
                let m = if transpose { blk[c * nc + r] } else { blk[r * nc + c] };
                s += m * x[p * nc + c];
            }
            y[p * nc + r] = s;
        }
    }
    y
}

/// `nabla nabla f` of a scalar from two centered covariant derivatives.
pub fn second_covariant_derivative(cache: &GeometryCache, f: &TensorField) -> Result<TensorField> {
    if f.rank > 0 {
        return Err(Error::RankTooHigh(f.rank + 2));
    }
    cache.check_field(f)?;
    let (_, g2) = second_derivative(cache, f);
    TensorField::from_data(2, f.n1, f.n2, g2)
}

/// `L^p` norm of `nabla nabla F` for rank 0 or 1; `p = f64::INFINITY` gives the grid maximum.
pub fn second_derivative_norm(cache: &GeometryCache, f: &TensorField, p: f64) -> Result<f64> {
    if f.rank > 1 {
        return Err(Error::RankTooHigh(f.rank + 2));
    }
    cache.check_field(f)?;
    let (_, g2) = second_derivative(cache, f);
    let pw = (0..cache.nodes()).map(|q| raw_norm2(cache, &g2, f.rank + 2, q).max(0.0).sqrt());
    if p.is_infinite() {
        return Ok(pw.fold(0.0, f64::max));
    }
    Ok(pw.enumerate().map(|(q, v)| cache.weight[q] * v.powf(p)).sum::<f64>().powf(1.0 / p))
}

/// Divergence on the first slot, defined as minus the adjoint of the centered covariant derivative.
pub fn divergence(cache: &GeometryCache, f: &TensorField) -> Result<TensorField> {
    if f.rank == 0 {
        return Err(Error::RankMismatch { expected: 1, found: 0 });
    }
    cache.check_field(f)?;
    let r = f.rank - 1;
    let g = centered_gradient(cache, r);
    let mf = block_apply(&mass_blocks(cache, f.rank, false), f.ncomp(), &f.data, false);
    let gt = g.apply_t(&mf);
    let mut out = block_apply(&mass_blocks(cache, r, true), ncomp(r), &gt, false);
    out.iter_mut().for_each(|v| *v = -*v);
    TensorField::from_data(r, f.n1, f.n2, out)
}

/// `curl F = (D_1 F_2 - D_2 F_1) / sqrt(det gamma)` with centered differences.
pub fn curl(cache: &GeometryCache, f: &TensorField) -> Result<TensorField> {
    if f.rank != 1 {
        return Err(Error::RankMismatch { expected: 1, found: f.rank });
    }
    cache.check_field(f)?;
    let g = &cache.grid;
    let (h1, h2) = (g.h1(), g.h2());
    let data = (0..g.nodes())
        .map(|p| {
            let d1f2 = (f.at(g.shift(p, 1, 0), 1) - f.at(g.shift(p, -1, 0), 1)) / (2.0 * h1);
            let d2f1 = (f.at(g.shift(p, 0, 1), 0) - f.at(g.shift(p, 0, -1), 0)) / (2.0 * h2);
            (d1f2 - d2f1) / cache.sqrt_det[p]
        })
        .collect();
    TensorField::from_data(0, f.n1, f.n2, data)
}

/// Connection Laplacian on rank-`rank` covariant fields, `Delta = -M^{-1} S`.
///
/// `S` is the average of the energies of the forward and backward one-sided
/// covariant gradients, so it is symmetric positive semidefinite and reduces to
/// the 5-point Laplacian on a flat grid. `M` is the block mass
/// `w * (gamma^{-1})^{(x) rank}` at each node.
#[derive(Debug, Clone)]
pub struct LaplaceOperator {
    pub rank: usize,
    pub cache: Arc<GeometryCache>,
    pub stiffness: Stencil,
    mass: Vec<f64>,
    mass_inv: Vec<f64>,
    chol: Vec<f64>,
    chol_inv: Vec<f64>,
}

fn chol2(m: &[f64; 4]) -> [f64; 4] {
    let l11 = m[0].sqrt();
    let l21 = m[2] / l11;
    let l22 = (m[3] - l21 * l21).sqrt();
    [l11, 0.0, l21, l22]
}

fn inv_lower2(l: &[f64; 4]) -> [f64; 4] {
    [1.0 / l[0], 0.0, -l[2] / (l[0] * l[3]), 1.0 / l[3]]
}

pub fn assemble_laplacian(cache: Arc<GeometryCache>, rank: usize) -> Result<LaplaceOperator> {
    if rank > 2 {
        return Err(Error::RankTooHigh(rank));
    }
    let nc = ncomp(rank);
    let no = 2 * nc;
    let (n1, n2) = (cache.n1(), cache.n2());
    let h = [cache.grid.h1(), cache.grid.h2()];
    let mut st = Stencil::zeros(n1, n2, nc, nc);
    let ncol = 3 * nc;
    let mut gl = vec![0.0; no * ncol];
    let mut wg = vec![0.0; no * ncol];
    for p in 0..cache.nodes() {
        let wblk: Vec<f64> = kron_power(&cache.inv(p), rank + 1).into_iter().map(|v| v * cache.weight[p]).collect();
        for sigma in [1isize, -1] {
            let offs = [(0isize, 0isize), (sigma, 0), (0, sigma)];
            gl.iter_mut().for_each(|v| *v = 0.0);
            for a in 0..2 {
                for comp in 0..nc {
                    let row = a * nc + comp;
                    gl[row * ncol + (a + 1) * nc + comp] += sigma as f64 / h[a];
                    gl[row * ncol + comp] -= sigma as f64 / h[a];
                    for s in 0..rank {
                        let b = slot(comp, rank, s);
                        for c in 0..2 {
                            gl[row * ncol + set_slot(comp, rank, s, c)] -= cache.gamma(p, c, a, b);
                        }
                    }
                }
            }
            // wg = W * G
            for r in 0..no {
                for col in 0..ncol {
                    let mut s = 0.0;
                    for k in 0..no {
                        s += wblk[r * no + k] * gl[k * ncol + col];
                    }
                    wg[r * ncol + col] = s;
                }
            }
            for (u, &(ui, uj)) in offs.iter().enumerate() {
                let node_u = cache.grid.shift(p, ui, uj);
                for (v, &(vi, vj)) in offs.iter().enumerate() {
                    let off = offset_index(vi - ui, vj - uj);
                    for d in 0..nc {
                        for e in 0..nc {
                            let mut s = 0.0;
                            for r in 0..no {
                                s += gl[r * ncol + u * nc + d] * wg[r * ncol + v * nc + e];
                            }
                            if s != 0.0 {
                                st.add(node_u, d, off, e, 0.5 * s);
                            }
                        }
                    }
                }
            }
        }
    }
    st.symmetrize();
    let mut chol = Vec::with_capacity(cache.nodes() * nc * nc);
    let mut chol_inv = Vec::with_capacity(cache.nodes() * nc * nc);
    for p in 0..cache.nodes() {
        let c = chol2(&cache.inv(p));
        let ci = inv_lower2(&c);
        let sw = cache.weight[p].sqrt();
        chol.extend(kron_power(&c, rank).into_iter().map(|v| v * sw));
        chol_inv.extend(kron_power(&ci, rank).into_iter().map(|v| v / sw));
    }
    Ok(LaplaceOperator {
        rank,
        mass: mass_blocks(&cache, rank, false),
        mass_inv: mass_blocks(&cache, rank, true),
        cache,
        stiffness: st,
        chol,
        chol_inv,
    })
}

impl LaplaceOperator {
    pub fn ncomp(&self) -> usize {
        ncomp(self.rank)
    }
    pub fn dim(&self) -> usize {
        self.cache.nodes() * self.ncomp()
    }
    pub fn n1(&self) -> usize {
        self.cache.n1()
    }
    pub fn n2(&self) -> usize {
        self.cache.n2()
    }

    pub fn check(&self, f: &TensorField) -> Result<()> {
        self.cache.check_field(f)?;
        if f.rank != self.rank {
            return Err(Error::RankMismatch { expected: self.rank, found: f.rank });
        }
        Ok(())
    }

    pub fn field(&self, data: Vec<f64>) -> TensorField {
        TensorField { rank: self.rank, n1: self.n1(), n2: self.n2(), data }
    }

    /// `Delta F`
    pub fn apply(&self, f: &TensorField) -> Result<TensorField> {
        self.check(f)?;
        let sx = self.stiffness.apply(&f.data);
        let mut y = self.mass_inv_apply(&sx);
        y.iter_mut().for_each(|v| *v = -*v);
        Ok(self.field(y))
    }

    /// Dirichlet energy `<-Delta F, F>`, the squared norm of the gradient pair.
    pub fn energy(&self, f: &TensorField) -> f64 {
        let sx = self.stiffness.apply(&f.data);
        crate::linalg::dot(&sx, &f.data).max(0.0)
    }

    pub fn mass_apply(&self, x: &[f64]) -> Vec<f64> {
        block_apply(&self.mass, self.ncomp(), x, false)
    }
    pub fn mass_inv_apply(&self, x: &[f64]) -> Vec<f64> {
        block_apply(&self.mass_inv, self.ncomp(), x, false)
    }
    /// `L^T x` where `M = L L^T` blockwise.
    pub fn chol_t_apply(&self, x: &[f64]) -> Vec<f64> {
        block_apply(&self.chol, self.ncomp(), x, true)
    }
    /// `L^{-T} y`
    pub fn chol_inv_t_apply(&self, y: &[f64]) -> Vec<f64> {
        block_apply(&self.chol_inv, self.ncomp(), y, true)
    }
    pub fn mass_diag(&self) -> Vec<f64> {
        let nc = self.ncomp();
        (0..self.dim()).map(|k| self.mass[(k / nc) * nc * nc + (k % nc) * nc + k % nc]).collect()
    }

    /// Symmetric `L^{-1} S L^{-T}`, whose spectrum is that of `-Delta`.
    pub fn reduced_stencil(&self) -> Stencil {
        let nc = self.ncomp();
        let s = &self.stiffness;
        let mut b = Stencil::zeros(self.n1(), self.n2(), nc, nc);
        let li = &self.chol_inv;
        for p in 0..self.cache.nodes() {
            let lp = &li[p * nc * nc..(p + 1) * nc * nc];
            for off in 0..9 {
                let q = s.neighbor(p, off);
                let lq = &li[q * nc * nc..(q + 1) * nc * nc];
                for r in 0..nc {
                    for c in 0..nc {
                        let mut v = 0.0;
                        for r2 in 0..nc {
                            if lp[r * nc + r2] == 0.0 {
                                continue;
                            }
                            for c2 in 0..nc {
                                v += lp[r * nc + r2] * s.get(p, r2, off, c2) * lq[c * nc + c2];
                            }
                        }
                        b.add(p, r, off, c, v);
                    }
                }
            }
        }
        b.symmetrize();
        b
    }
}

/// Pointwise `|T|^2` for raw rank-`rank` data at a node.
fn raw_norm2(cache: &GeometryCache, data: &[f64], rank: usize, node: usize) -> f64 {
    let nc = ncomp(rank);
    let m = cache.inv_power(node, rank);
    let x = &data[node * nc..(node + 1) * nc];
    let mut s = 0.0;
    for r in 0..nc {
        for c in 0..nc {
            s += x[r] * m[r * nc + c] * x[c];
        }
    }
    s
}

fn integral_norm2(cache: &GeometryCache, data: &[f64], rank: usize) -> f64 {
    (0..cache.nodes()).map(|p| cache.weight[p] * raw_norm2(cache, data, rank, p)).sum()
}

/// Sides of a Bochner identity and the relative residual `|lhs - rhs| / lhs`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BochnerResidual {
    pub lhs: f64,
    pub rhs: f64,
    pub residual: f64,
}

pub(crate) fn second_derivative(cache: &GeometryCache, f: &TensorField) -> (Vec<f64>, Vec<f64>) {
    let g1 = centered_gradient(cache, f.rank).apply(&f.data);
    let g2 = centered_gradient(cache, f.rank + 1).apply(&g1);
    (g1, g2)
}

/// `int |nabla^2 f|^2 = int |Delta f|^2 - int K |nabla f|^2`
pub fn bochner_residual_scalar(op: &LaplaceOperator, f: &TensorField) -> Result<BochnerResidual> {
    op.check(f)?;
    if f.rank != 0 {
        return Err(Error::RankMismatch { expected: 0, found: f.rank });
    }
    let c = &op.cache;
    let (g1, g2) = second_derivative(c, f);
    let lhs = integral_norm2(c, &g2, 2);
    let lap = op.apply(f)?;
    let mut rhs = integral_norm2(c, &lap.data, 0);
    rhs -= (0..c.nodes()).map(|p| c.weight[p] * c.gauss_k[p] * raw_norm2(c, &g1, 1, p)).sum::<f64>();
    Ok(BochnerResidual { lhs, rhs, residual: (lhs - rhs).abs() / lhs })
}

/// `int |nabla^2 F|^2 = int |Delta F|^2 - int K (2|nabla F|^2 - |div F|^2 - |curl F|^2) + int K^2 |F|^2`
pub fn bochner_residual_vector(op: &LaplaceOperator, f: &TensorField) -> Result<BochnerResidual> {
    op.check(f)?;
    if f.rank != 1 {
        return Err(Error::RankMismatch { expected: 1, found: f.rank });
    }
    let c = &op.cache;
    let (g1, g2) = second_derivative(c, f);
    let lhs = integral_norm2(c, &g2, 3);
    let lap = op.apply(f)?;
    let div = divergence_centered_trace(c, &g1);
    let cu = curl(c, f)?;
    let mut rhs = integral_norm2(c, &lap.data, 1);
    for p in 0..c.nodes() {
        let k = c.gauss_k[p];
        let w = c.weight[p];
        let grad2 = raw_norm2(c, &g1, 2, p);
        rhs -= w * k * (2.0 * grad2 - div[p] * div[p] - cu.data[p] * cu.data[p]);
        rhs += w * k * k * c.pointwise_dot(f, f, p);
    }
    Ok(BochnerResidual { lhs, rhs, residual: (lhs - rhs).abs() / lhs })
}

/// `gamma^{ab} nabla_a F_b` from the already computed centered derivative.
fn divergence_centered_trace(cache: &GeometryCache, grad: &[f64]) -> Vec<f64> {
    (0..cache.nodes())
        .map(|p| {
            let m = cache.inv(p);
            let t = &grad[p * 4..p * 4 + 4];
            m[0] * t[0] + m[1] * (t[1] + t[2]) + m[3] * t[3]
        })
        .collect()
}

/// Writes `index,eigenvalue` rows.
pub fn write_spectrum(values: &[f64], out: &mut impl Write) -> Result<()> {
    writeln!(out, "index,eigenvalue")?;
    for (k, v) in values.iter().enumerate() {
        writeln!(out, "{k},{v:.12e}")?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{build_cache, build_grid, inner_product, MetricSpec};
    use std::f64::consts::TAU;

    fn cache(a: f64, n: usize) -> Arc<GeometryCache> {
        Arc::new(build_cache(&build_grid(n, n, TAU, TAU, &MetricSpec::conformal_cos(a)).unwrap()))
    }

    fn smooth(rank: usize, n: usize) -> TensorField {
        let h = TAU / n as f64;
        TensorField::from_fn(rank, n, n, |i, j, c| {
            let (x, y) = (i as f64 * h, j as f64 * h);
            (x + 0.3 * c as f64).sin() * (2.0 * y).cos() + 0.5 * (x - y + c as f64).cos()
        })
    }

    #[test]
    fn flat_scalar_laplacian_is_five_point() {
        let c = cache(0.0, 16);
        let op = assemble_laplacian(c.clone(), 0).unwrap();
        let f = smooth(0, 16);
        let lap = op.apply(&f).unwrap();
        let g = &c.grid;
        let h2 = g.h1() * g.h1();
        for p in 0..g.nodes() {
            let want = (f.data[g.shift(p, 1, 0)] + f.data[g.shift(p, -1, 0)] + f.data[g.shift(p, 0, 1)]
                + f.data[g.shift(p, 0, -1)]
                - 4.0 * f.data[p])
                / h2;
            assert!((lap.data[p] - want).abs() < 1e-10 * (1.0 + want.abs()));
        }
    }

    #[test]
    fn laplacian_is_self_adjoint_and_dissipative() {
        let c = cache(0.3, 16);
        for rank in 0..3 {
            let op = assemble_laplacian(c.clone(), rank).unwrap();
            let f = smooth(rank, 16);
            let g = TensorField::from_fn(rank, 16, 16, |i, j, k| ((i * 3 + j * 7 + k) as f64).sin());
            let a = inner_product(&c, &op.apply(&f).unwrap(), &g).unwrap();
            let b = inner_product(&c, &f, &op.apply(&g).unwrap()).unwrap();
            assert!((a - b).abs() < 1e-10 * a.abs().max(1.0), "rank {rank}: {a} {b}");
            let e = inner_product(&c, &op.apply(&f).unwrap(), &f).unwrap();
            assert!(e <= 0.0);
            assert!((e + op.energy(&f)).abs() < 1e-10 * e.abs());
        }
    }

    #[test]
    fn divergence_is_minus_adjoint_of_gradient() {
        let c = cache(0.3, 16);
        for rank in 0..2 {
            let f = smooth(rank, 16);
            let t = TensorField::from_fn(rank + 1, 16, 16, |i, j, k| ((i * 5 + j * 2 + k) as f64).cos());
            let a = inner_product(&c, &covariant_derivative(&c, &f).unwrap(), &t).unwrap();
            let b = inner_product(&c, &f, &divergence(&c, &t).unwrap()).unwrap();
            assert!((a + b).abs() < 1e-10 * a.abs().max(1.0));
        }
    }

    #[test]
    fn rank_limits() {
        let c = cache(0.0, 8);
        let t = TensorField::zeros(2, 8, 8);
        assert_eq!(covariant_derivative(&c, &t).unwrap_err(), Error::RankTooHigh(2));
        let op = assemble_laplacian(c, 0).unwrap();
        assert!(matches!(op.apply(&TensorField::zeros(0, 16, 16)), Err(Error::GridMismatch { .. })));
    }

    #[test]
    fn constants_are_harmonic_and_flat_gradient_of_constant_vanishes() {
        let c = cache(0.6, 16);
        let op = assemble_laplacian(c.clone(), 0).unwrap();
        let one = TensorField::from_fn(0, 16, 16, |_, _, _| 1.0);
        assert!(op.apply(&one).unwrap().max_abs() < 1e-10);
        let flat = cache(0.0, 16);
        let op1 = assemble_laplacian(flat, 1).unwrap();
        let v = TensorField::from_fn(1, 16, 16, |_, _, k| k as f64 + 1.0);
        assert!(op1.apply(&v).unwrap().max_abs() < 1e-12);
    }

    #[test]
    fn curl_of_gradient_vanishes() {
        let c = cache(0.3, 16);
        let f = smooth(0, 16);
        // centered differences commute, so this is exact up to rounding
        let g = covariant_derivative(&c, &f).unwrap();
        assert!(curl(&c, &g).unwrap().max_abs() < 1e-11);
    }

    #[test]
    fn scalar_laplacian_converges_to_conformal_formula() {
        // Delta f = exp(-2 phi) * flat Laplacian of f on conformal metrics
        let mut errs = vec![];
        for n in [32, 64] {
            let c = cache(0.3, n);
            let op = assemble_laplacian(c.clone(), 0).unwrap();
            let h = TAU / n as f64;
            let f = TensorField::from_fn(0, n, n, |i, j, _| (i as f64 * h).sin() * (2.0 * j as f64 * h).cos());
            let lap = op.apply(&f).unwrap();
            let mut e = 0.0_f64;
            for p in 0..c.nodes() {
                let (x, y) = c.grid.coords(p);
                let phi = 0.3 * x.cos() * y.cos();
                let want = (-2.0 * phi).exp() * (-5.0 * x.sin() * (2.0 * y).cos());
                e = e.max((lap.data[p] - want).abs());
            }
            errs.push(e);
        }
        assert!((errs[0] / errs[1]).log2() > 1.9, "{errs:?}");
    }

    fn band_limited(rank: usize, n: usize) -> TensorField {
        let h = TAU / n as f64;
        TensorField::from_fn(rank, n, n, |i, j, c| {
            let (x, y) = (i as f64 * h, j as f64 * h);
            (x + 0.3 * c as f64).sin() * y.cos() + 0.5 * (x - y + c as f64).cos()
        })
    }

    #[test]
    fn bochner_scalar_residual_shrinks() {
        let mut res = vec![];
        for n in [32, 64] {
            let c = cache(0.3, n);
            let op = assemble_laplacian(c, 0).unwrap();
            res.push(bochner_residual_scalar(&op, &band_limited(0, n)).unwrap().residual);
        }
        assert!(res[1] < 1e-2 && res[0] / res[1] > 3.5, "{res:?}");
    }

    #[test]
    fn bochner_vector_residual_shrinks() {
        let mut res = vec![];
        for n in [32, 64] {
            let c = cache(0.3, n);
            let op = assemble_laplacian(c, 1).unwrap();
            res.push(bochner_residual_vector(&op, &band_limited(1, n)).unwrap().residual);
        }
        assert!(res[1] < 1e-2 && res[0] / res[1] > 3.5, "{res:?}");
    }
}
