//! Periodic metric grids and the derived geometric quantities.

use std::f64::consts::PI;
use std::io::{BufRead, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::field::TensorField;

/// Which trig factor multiplies each coordinate in a [`TrigTerm`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Trig {
    Cos,
    Sin,
}

/// `coef * t1(k1 * 2pi x1 / L1) * t2(k2 * 2pi x2 / L2)`
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrigTerm {
    pub coef: f64,
    pub k1: i32,
    pub k2: i32,
    pub t1: Trig,
    pub t2: Trig,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct TrigPoly {
    pub terms: Vec<TrigTerm>,
}

fn trig_eval(t: Trig, x: f64) -> (f64, f64, f64) {
    // value, first and second derivative in x
    match t {
        Trig::Cos => (x.cos(), -x.sin(), -x.cos()),
        Trig::Sin => (x.sin(), x.cos(), -x.sin()),
    }
}

impl TrigPoly {
    pub fn single(coef: f64, k1: i32, k2: i32, t1: Trig, t2: Trig) -> Self {
        TrigPoly { terms: vec![TrigTerm { coef, k1, k2, t1, t2 }] }
    }

    /// Value, gradient and Hessian `[f, f1, f2, f11, f12, f22]` at a point.
    pub fn jet(&self, x1: f64, x2: f64, l1: f64, l2: f64) -> [f64; 6] {
        let mut out = [0.0; 6];
        for t in &self.terms {
            let w1 = 2.0 * PI * t.k1 as f64 / l1;
            let w2 = 2.0 * PI * t.k2 as f64 / l2;
            let (a, da, dda) = trig_eval(t.t1, w1 * x1);
            let (b, db, ddb) = trig_eval(t.t2, w2 * x2);
            out[0] += t.coef * a * b;
            out[1] += t.coef * w1 * da * b;
            out[2] += t.coef * a * w2 * db;
            out[3] += t.coef * w1 * w1 * dda * b;
            out[4] += t.coef * w1 * da * w2 * db;
            out[5] += t.coef * a * w2 * w2 * ddb;
        }
        out
    }

    pub fn value(&self, x1: f64, x2: f64, l1: f64, l2: f64) -> f64 {
        self.jet(x1, x2, l1, l2)[0]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum MetricSpec {
    Flat,
    /// `exp(2 phi) * delta`
    Conformal { phi: TrigPoly },
    /// Node values in row-major order.
    Table { g11: Vec<f64>, g12: Vec<f64>, g22: Vec<f64> },
}

impl MetricSpec {
    /// `phi = amplitude * cos x1 * cos x2` in units of the box.
    pub fn conformal_cos(amplitude: f64) -> Self {
        if amplitude == 0.0 {
            return MetricSpec::Flat;
        }
        MetricSpec::Conformal { phi: TrigPoly::single(amplitude, 1, 1, Trig::Cos, Trig::Cos) }
    }
}

/// Doubly periodic grid carrying a metric at every node.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricGrid {
    pub n1: usize,
    pub n2: usize,
    pub l1: f64,
    pub l2: f64,
    pub g11: Vec<f64>,
    pub g12: Vec<f64>,
    pub g22: Vec<f64>,
    pub spec: MetricSpec,
}

impl MetricGrid {
    pub fn h1(&self) -> f64 {
        self.l1 / self.n1 as f64
    }
    pub fn h2(&self) -> f64 {
        self.l2 / self.n2 as f64
    }
    pub fn nodes(&self) -> usize {
        self.n1 * self.n2
    }
    #[inline]
    pub fn idx(&self, i: usize, j: usize) -> usize {
        i * self.n2 + j
    }
    /// Periodic neighbor `(i + di, j + dj)`.
    #[inline]
    pub fn shift(&self, node: usize, di: isize, dj: isize) -> usize {
        let i = node / self.n2;
        let j = node % self.n2;
        let ii = (i as isize + di).rem_euclid(self.n1 as isize) as usize;
        let jj = (j as isize + dj).rem_euclid(self.n2 as isize) as usize;
        ii * self.n2 + jj
    }
    pub fn coords(&self, node: usize) -> (f64, f64) {
        ((node / self.n2) as f64 * self.h1(), (node % self.n2) as f64 * self.h2())
    }
    pub fn is_flat(&self) -> bool {
        matches!(self.spec, MetricSpec::Flat)
    }
}

pub fn build_grid(n1: usize, n2: usize, l1: f64, l2: f64, spec: &MetricSpec) -> Result<MetricGrid> {
    if n1 < 8 || n2 < 8 {
        return Err(Error::BadDimensions(format!("grid {n1}x{n2} needs n >= 8")));
    }
    if !(l1 > 0.0 && l2 > 0.0 && l1.is_finite() && l2.is_finite()) {
        return Err(Error::BadDimensions(format!("box lengths {l1}, {l2}")));
    }
    let n = n1 * n2;
    let (h1, h2) = (l1 / n1 as f64, l2 / n2 as f64);
    let (g11, g12, g22) = match spec {
        MetricSpec::Flat => (vec![1.0; n], vec![0.0; n], vec![1.0; n]),
        MetricSpec::Conformal { phi } => {
            let mut g = Vec::with_capacity(n);
            for i in 0..n1 {
                for j in 0..n2 {
                    g.push((2.0 * phi.value(i as f64 * h1, j as f64 * h2, l1, l2)).exp());
                }
            }
            (g.clone(), vec![0.0; n], g)
        }
        MetricSpec::Table { g11, g12, g22 } => {
            if g11.len() != n || g12.len() != n || g22.len() != n {
                return Err(Error::BadDimensions(format!(
                    "metric table has {} rows for {n1}x{n2}",
                    g11.len()
                )));
            }
            (g11.clone(), g12.clone(), g22.clone())
        }
    };
    for node in 0..n {
        let det = g11[node] * g22[node] - g12[node] * g12[node];
        let ok = g11[node].is_finite() && g22[node].is_finite() && g12[node].is_finite();
        if !ok || g11[node] <= 0.0 || det <= 0.0 {
            return Err(Error::NonPositiveDefiniteMetric { i: node / n2, j: node % n2 });
        }
    }
    Ok(MetricGrid { n1, n2, l1, l2, g11, g12, g22, spec: spec.clone() })
}

/// Reads `# n1 n2 L1 L2` then `i,j,g11,g12,g22` rows.
pub fn read_metric_table(path: &Path) -> Result<MetricGrid> {
    let file = std::fs::File::open(path)?;
    let mut reader = std::io::BufReader::new(file);
    let mut first = String::new();
    reader.read_line(&mut first)?;
    let head: Vec<&str> = first.trim_start_matches('#').split_whitespace().collect();
    if !first.starts_with('#') || head.len() != 4 {
        return Err(Error::Parse(format!("metric table header: {:?}", first.trim())));
    }
    let p = |s: &str| s.parse::<f64>().map_err(|e| Error::Parse(format!("{s}: {e}")));
    let n1 = p(head[0])? as usize;
    let n2 = p(head[1])? as usize;
    let (l1, l2) = (p(head[2])?, p(head[3])?);
    if n1 < 8 || n2 < 8 {
        return Err(Error::BadDimensions(format!("grid {n1}x{n2} needs n >= 8")));
    }
    let n = n1 * n2;
    let (mut g11, mut g12, mut g22) = (vec![f64::NAN; n], vec![f64::NAN; n], vec![f64::NAN; n]);
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let mut seen = 0usize;
    for rec in rdr.records() {
        let rec = rec?;
        if rec.len() != 5 {
            return Err(Error::Parse(format!("metric row has {} columns", rec.len())));
        }
        let i = p(&rec[0])? as usize;
        let j = p(&rec[1])? as usize;
        if i >= n1 || j >= n2 {
            return Err(Error::BadDimensions(format!("row index ({i}, {j}) outside grid")));
        }
        let node = i * n2 + j;
        g11[node] = p(&rec[2])?;
        g12[node] = p(&rec[3])?;
        g22[node] = p(&rec[4])?;
        seen += 1;
    }
    if seen != n {
        return Err(Error::BadDimensions(format!("metric table has {seen} rows for {n1}x{n2}")));
    }
    build_grid(n1, n2, l1, l2, &MetricSpec::Table { g11, g12, g22 })
}

pub fn write_metric_table(grid: &MetricGrid, out: &mut impl Write) -> Result<()> {
    writeln!(out, "# {} {} {:e} {:e}", grid.n1, grid.n2, grid.l1, grid.l2)?;
    writeln!(out, "i,j,g11,g12,g22")?;
    for node in 0..grid.nodes() {
        writeln!(
            out,
            "{},{},{:e},{:e},{:e}",
            node / grid.n2,
            node % grid.n2,
            grid.g11[node],
            grid.g12[node],
            grid.g22[node]
        )?;
    }
    Ok(())
}

/// Metric-derived quantities at every node.
#[derive(Debug, Clone)]
pub struct GeometryCache {
    pub grid: MetricGrid,
    pub inv11: Vec<f64>,
    pub inv12: Vec<f64>,
    pub inv22: Vec<f64>,
    pub sqrt_det: Vec<f64>,
    /// `sqrt(det) * h1 * h2`, the quadrature weight of each node.
    pub weight: Vec<f64>,
    /// `christoffel[node][a*4 + b*2 + c]` is `Gamma^a_{bc}`.
    pub christoffel: Vec<[f64; 8]>,
    pub gauss_k: Vec<f64>,
}

fn centered(grid: &MetricGrid, v: &[f64], node: usize, dir: usize) -> f64 {
    if dir == 0 {
        (v[grid.shift(node, 1, 0)] - v[grid.shift(node, -1, 0)]) / (2.0 * grid.h1())
    } else {
        (v[grid.shift(node, 0, 1)] - v[grid.shift(node, 0, -1)]) / (2.0 * grid.h2())
    }
}

pub fn build_cache(grid: &MetricGrid) -> GeometryCache {
    let n = grid.nodes();
    let (h1, h2) = (grid.h1(), grid.h2());
    let mut inv11 = vec![0.0; n];
    let mut inv12 = vec![0.0; n];
    let mut inv22 = vec![0.0; n];
    let mut sqrt_det = vec![0.0; n];
    let mut weight = vec![0.0; n];
    for p in 0..n {
        let det = grid.g11[p] * grid.g22[p] - grid.g12[p] * grid.g12[p];
        inv11[p] = grid.g22[p] / det;
        inv12[p] = -grid.g12[p] / det;
        inv22[p] = grid.g11[p] / det;
        sqrt_det[p] = det.sqrt();
        weight[p] = sqrt_det[p] * h1 * h2;
    }
    let g = [&grid.g11, &grid.g12, &grid.g22];
    let lower = |a: usize, b: usize| -> &Vec<f64> { g[a + b] };
    let inv = |p: usize, a: usize, b: usize| match a + b {
        0 => inv11[p],
        1 => inv12[p],
        _ => inv22[p],
    };
    let mut christoffel = vec![[0.0; 8]; n];
    if !grid.is_flat() {
        for p in 0..n {
            // dg[d][b][c] = d_d g_bc
            let mut dg = [[[0.0; 2]; 2]; 2];
            for d in 0..2 {
                for b in 0..2 {
                    for c in 0..2 {
                        dg[d][b][c] = centered(grid, lower(b, c), p, d);
                    }
                }
            }
            for b in 0..2 {
                for c in 0..2 {
                    let first: [f64; 2] =
                        std::array::from_fn(|d| 0.5 * (dg[b][d][c] + dg[c][d][b] - dg[d][b][c]));
                    for a in 0..2 {
                        christoffel[p][a * 4 + b * 2 + c] = inv(p, a, 0) * first[0] + inv(p, a, 1) * first[1];
                    }
                }
            }
        }
    }
    let mut gauss_k = vec![0.0; n];
    if !grid.is_flat() {
        let comp: Vec<Vec<f64>> = (0..8).map(|s| christoffel.iter().map(|c| c[s]).collect()).collect();
        let gam = |p: usize, a: usize, b: usize, c: usize| christoffel[p][a * 4 + b * 2 + c];
        for p in 0..n {
            // R^a_{212} = d_1 G^a_22 - d_2 G^a_12 + G^a_1e G^e_22 - G^a_2e G^e_12
            let mut r = [0.0; 2];
            for (a, ra) in r.iter_mut().enumerate() {
                let mut v = centered(grid, &comp[a * 4 + 3], p, 0) - centered(grid, &comp[a * 4 + 1], p, 1);
                for e in 0..2 {
                    v += gam(p, a, 0, e) * gam(p, e, 1, 1) - gam(p, a, 1, e) * gam(p, e, 0, 1);
                }
                *ra = v;
            }
            let r1212 = grid.g11[p] * r[0] + grid.g12[p] * r[1];
            gauss_k[p] = r1212 / (sqrt_det[p] * sqrt_det[p]);
        }
    }
    GeometryCache { grid: grid.clone(), inv11, inv12, inv22, sqrt_det, weight, christoffel, gauss_k }
}

impl GeometryCache {
    pub fn n1(&self) -> usize {
        self.grid.n1
    }
    pub fn n2(&self) -> usize {
        self.grid.n2
    }
    pub fn nodes(&self) -> usize {
        self.grid.nodes()
    }
    #[inline]
    pub fn gamma(&self, node: usize, a: usize, b: usize, c: usize) -> f64 {
        self.christoffel[node][a * 4 + b * 2 + c]
    }
    #[inline]
    pub fn inv(&self, node: usize) -> [f64; 4] {
        [self.inv11[node], self.inv12[node], self.inv12[node], self.inv22[node]]
    }
    #[inline]
    pub fn metric(&self, node: usize) -> [f64; 4] {
        let g = &self.grid;
        [g.g11[node], g.g12[node], g.g12[node], g.g22[node]]
    }

    /// `(gamma^{-1})^{tensor rank}` at a node as a row-major `ncomp x ncomp` block.
    pub fn inv_power(&self, node: usize, rank: usize) -> Vec<f64> {
        kron_power(&self.inv(node), rank)
    }

    pub fn check_field(&self, f: &TensorField) -> Result<()> {
        if f.shape() != (self.n1(), self.n2()) {
            return Err(Error::GridMismatch { expected: (self.n1(), self.n2()), found: f.shape() });
        }
        Ok(())
    }

    /// Pointwise `<F, G>_gamma` at a node.
    pub fn pointwise_dot(&self, f: &TensorField, g: &TensorField, node: usize) -> f64 {
        let nc = f.ncomp();
        let fa = &f.data[node * nc..(node + 1) * nc];
        let ga = &g.data[node * nc..(node + 1) * nc];
        match f.rank {
            0 => fa[0] * ga[0],
            1 => {
                let m = self.inv(node);
                fa[0] * (m[0] * ga[0] + m[1] * ga[1]) + fa[1] * (m[2] * ga[0] + m[3] * ga[1])
            }
            _ => {
                let m = self.inv_power(node, f.rank);
                let mut s = 0.0;
                for r in 0..nc {
                    let mut t = 0.0;
                    for c in 0..nc {
                        t += m[r * nc + c] * ga[c];
                    }
                    s += fa[r] * t;
                }
                s
            }
        }
    }

    pub fn pointwise_norm(&self, f: &TensorField, node: usize) -> f64 {
        self.pointwise_dot(f, f, node).max(0.0).sqrt()
    }

    pub fn integrate(&self, values: &[f64]) -> f64 {
        values.iter().zip(&self.weight).map(|(v, w)| v * w).sum()
    }

    pub fn volume(&self) -> f64 {
        self.weight.iter().sum()
    }
}

/// Kronecker power of a row-major 2x2 matrix.
pub fn kron_power(m: &[f64; 4], rank: usize) -> Vec<f64> {
    let mut out = vec![1.0];
    let mut dim = 1;
    for _ in 0..rank {
        let nd = dim * 2;
        let mut next = vec![0.0; nd * nd];
        for r1 in 0..dim {
            for c1 in 0..dim {
                for r2 in 0..2 {
                    for c2 in 0..2 {
                        next[(r1 * 2 + r2) * nd + c1 * 2 + c2] = out[r1 * dim + c1] * m[r2 * 2 + c2];
                    }
                }
            }
        }
        out = next;
        dim = nd;
    }
    out
}

/// `(c, gamma_l2)`: metric ellipticity and the coordinate L2 mass of the Christoffel symbols.
pub fn wr_constants(cache: &GeometryCache) -> (f64, f64) {
    let g = &cache.grid;
    let mut c = 1.0_f64;
    for p in 0..g.nodes() {
        let tr = g.g11[p] + g.g22[p];
        let det = g.g11[p] * g.g22[p] - g.g12[p] * g.g12[p];
        let disc = ((0.25 * tr * tr - det).max(0.0)).sqrt();
        let mu_max = 0.5 * tr + disc;
        let mu_min = det / mu_max;
        c = c.max(mu_max).max(1.0 / mu_min);
    }
    let cell = g.h1() * g.h2();
    let gamma_l2 = cache
        .christoffel
        .iter()
        .map(|ch| ch.iter().map(|v| v * v).sum::<f64>())
        .sum::<f64>()
        * cell;
    (c, gamma_l2)
}

pub fn inner_product(cache: &GeometryCache, f: &TensorField, g: &TensorField) -> Result<f64> {
    f.check_like(g)?;
    cache.check_field(f)?;
    Ok((0..cache.nodes()).map(|p| cache.weight[p] * cache.pointwise_dot(f, g, p)).sum())
}

pub fn l2_norm(cache: &GeometryCache, f: &TensorField) -> f64 {
    (0..cache.nodes())
        .map(|p| cache.weight[p] * cache.pointwise_dot(f, f, p))
        .sum::<f64>()
        .max(0.0)
        .sqrt()
}

/// `L^p` norm of the pointwise metric norm; `p = f64::INFINITY` gives the grid maximum.
pub fn lp_norm(cache: &GeometryCache, f: &TensorField, p: f64) -> f64 {
    if p.is_infinite() {
        return (0..cache.nodes()).map(|q| cache.pointwise_norm(f, q)).fold(0.0, f64::max);
    }
    if p == 2.0 {
        return l2_norm(cache, f);
    }
    let s: f64 = (0..cache.nodes()).map(|q| cache.weight[q] * cache.pointwise_norm(f, q).powf(p)).sum();
    s.powf(1.0 / p)
}

/// Pointwise product: scalar times tensor, or the full metric contraction of two tensors of equal rank.
pub fn product(cache: &GeometryCache, f: &TensorField, g: &TensorField) -> Result<TensorField> {
    cache.check_field(f)?;
    cache.check_field(g)?;
    if f.shape() != g.shape() {
        return Err(Error::GridMismatch { expected: f.shape(), found: g.shape() });
    }
    let (n1, n2) = f.shape();
    if f.rank == 0 || g.rank == 0 {
        let (s, t) = if f.rank == 0 { (f, g) } else { (g, f) };
        let nc = t.ncomp();
        let data = t.data.iter().enumerate().map(|(k, v)| v * s.data[k / nc]).collect();
        return TensorField::from_data(t.rank, n1, n2, data);
    }
    if f.rank != g.rank {
        return Err(Error::RankMismatch { expected: f.rank, found: g.rank });
    }
    let data = (0..cache.nodes()).map(|p| cache.pointwise_dot(f, g, p)).collect();
    TensorField::from_data(0, n1, n2, data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::TAU;

    fn conformal(a: f64, n: usize) -> GeometryCache {
        build_cache(&build_grid(n, n, TAU, TAU, &MetricSpec::conformal_cos(a)).unwrap())
    }

    #[test]
    fn flat_has_zero_connection_and_curvature() {
        let c = build_cache(&build_grid(16, 12, 3.0, 5.0, &MetricSpec::Flat).unwrap());
        assert!(c.christoffel.iter().all(|g| g.iter().all(|v| *v == 0.0)));
        assert!(c.gauss_k.iter().all(|k| *k == 0.0));
        assert_eq!(wr_constants(&c), (1.0, 0.0));
    }

    #[test]
    fn rejects_small_grids_and_bad_metrics() {
        assert!(matches!(build_grid(4, 16, 1.0, 1.0, &MetricSpec::Flat), Err(Error::BadDimensions(_))));
        let n = 8 * 8;
        let mut g11 = vec![1.0; n];
        g11[8 * 2 + 5] = -1.0;
        let spec = MetricSpec::Table { g11, g12: vec![0.0; n], g22: vec![1.0; n] };
        assert_eq!(
            build_grid(8, 8, 1.0, 1.0, &spec).unwrap_err(),
            Error::NonPositiveDefiniteMetric { i: 2, j: 5 }
        );
    }

    // Independent closed form: K = -exp(-2 phi) * flat Laplacian of phi.
    fn curvature_error(a: f64, n: usize) -> f64 {
        let c = conformal(a, n);
        let mut err = 0.0_f64;
        for p in 0..c.nodes() {
            let (x, y) = c.grid.coords(p);
            let phi = a * x.cos() * y.cos();
            let lap = -2.0 * phi;
            let k = -(-2.0 * phi).exp() * lap;
            err = err.max((c.gauss_k[p] - k).abs());
        }
        err
    }

    #[test]
    fn conformal_curvature_converges_second_order() {
        let e: Vec<f64> = [32, 64, 128].iter().map(|&n| curvature_error(0.3, n)).collect();
        let order = |a: f64, b: f64| (a / b).log2();
        assert!(order(e[0], e[1]) >= 1.9, "{e:?}");
        assert!(order(e[1], e[2]) >= 1.9, "{e:?}");
    }

    #[test]
    fn total_curvature_vanishes_on_torus() {
        let i32 = conformal(0.3, 32);
        let i64 = conformal(0.3, 64);
        let t32 = i32.integrate(&i32.gauss_k).abs();
        let t64 = i64.integrate(&i64.gauss_k).abs();
        assert!(t32 < 1e-2 && t64 <= (t32 / 3.0).max(1e-12), "{t32} {t64}");
    }

    #[test]
    fn christoffel_matches_conformal_formula() {
        // Gamma^a_bc = d^a_b phi_c + d^a_c phi_b - d_bc phi_a
        let a = 0.3;
        let mut errs = vec![];
        for n in [32, 64] {
            let c = conformal(a, n);
            let mut err = 0.0_f64;
            for p in 0..c.nodes() {
                let (x, y) = c.grid.coords(p);
                let dphi = [-a * x.sin() * y.cos(), -a * x.cos() * y.sin()];
                for i in 0..2 {
                    for j in 0..2 {
                        for k in 0..2 {
                            let d = |u: usize, v: usize| if u == v { 1.0 } else { 0.0 };
                            let exact = d(i, j) * dphi[k] + d(i, k) * dphi[j] - d(j, k) * dphi[i];
                            err = err.max((c.gamma(p, i, j, k) - exact).abs());
                        }
                    }
                }
            }
            errs.push(err);
        }
        assert!(errs[0] < 5e-3 && (errs[0] / errs[1]).log2() > 1.9, "{errs:?}");
    }

    #[test]
    fn wr_constants_match_trapezoid_oracle() {
        let a = 0.3;
        let n = 64;
        let c = conformal(a, n);
        let (ell, gl2) = wr_constants(&c);
        let h = TAU / n as f64;
        let mut want_c = 1.0_f64;
        let mut want_g = 0.0;
        for i in 0..n {
            for j in 0..n {
                let (x, y) = (i as f64 * h, j as f64 * h);
                let phi = a * x.cos() * y.cos();
                want_c = want_c.max((2.0 * phi).exp()).max((-2.0 * phi).exp());
                let g1 = a * x.sin() * y.cos();
                let g2 = a * x.cos() * y.sin();
                // four symbols are +-phi_1, four are +-phi_2
                want_g += 4.0 * (g1 * g1 + g2 * g2) * h * h;
            }
        }
        assert!((ell - want_c).abs() < 1e-12);
        assert!((gl2 - want_g).abs() / want_g < 5e-3, "{gl2} {want_g}");
    }

    #[test]
    fn norms_of_simple_fields() {
        let c = build_cache(&build_grid(32, 32, TAU, TAU, &MetricSpec::Flat).unwrap());
        let one = TensorField::from_fn(0, 32, 32, |_, _, _| 1.0);
        assert!((l2_norm(&c, &one) - TAU).abs() < 1e-12);
        assert!((lp_norm(&c, &one, 1.0) - TAU * TAU).abs() < 1e-10);
        assert_eq!(lp_norm(&c, &one, f64::INFINITY), 1.0);
        let v = TensorField::from_fn(1, 32, 32, |_, _, k| if k == 0 { 3.0 } else { 4.0 });
        assert!((lp_norm(&c, &v, f64::INFINITY) - 5.0).abs() < 1e-14);
        let s = TensorField::zeros(0, 32, 32);
        assert!(matches!(inner_product(&c, &one, &v), Err(Error::RankMismatch { .. })));
        assert_eq!(inner_product(&c, &one, &s).unwrap(), 0.0);
    }

    #[test]
    fn metric_table_round_trip() {
        let g = build_grid(8, 10, 2.0, 3.0, &MetricSpec::conformal_cos(0.2)).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.csv");
        let mut f = std::fs::File::create(&path).unwrap();
        write_metric_table(&g, &mut f).unwrap();
        drop(f);
        let back = read_metric_table(&path).unwrap();
        assert_eq!(back.g11, g.g11);
        assert_eq!(back.n2, 10);
    }
}
