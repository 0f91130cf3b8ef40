//! Block 3x3 stencil matrices on the periodic grid.

/// Offsets `(di, dj)` in row-major order; index `(di + 1) * 3 + (dj + 1)`.
pub const OFFSETS: [(isize, isize); 9] =
    [(-1, -1), (-1, 0), (-1, 1), (0, -1), (0, 0), (0, 1), (1, -1), (1, 0), (1, 1)];

#[inline]
pub fn offset_index(di: isize, dj: isize) -> usize {
    ((di + 1) * 3 + (dj + 1)) as usize
}

/// Sparse operator coupling each node to its 3x3 neighborhood.
///
/// Rows are `(node, r)` with `r < nr`, columns `(node', c)` with `c < nc`;
/// the coefficient of `(node + off, c)` in row `(node, r)` sits at
/// `vals[((node * nr + r) * 9 + off) * nc + c]`.
#[derive(Debug, Clone)]
pub struct Stencil {
    pub n1: usize,
    pub n2: usize,
    pub nr: usize,
    pub nc: usize,
    pub vals: Vec<f64>,
    nbr: Vec<usize>,
}

impl Stencil {
    pub fn zeros(n1: usize, n2: usize, nr: usize, nc: usize) -> Self {
        let n = n1 * n2;
        let mut nbr = Vec::with_capacity(n * 9);
        for node in 0..n {
            let (i, j) = ((node / n2) as isize, (node % n2) as isize);
            for &(di, dj) in &OFFSETS {
                let ii = (i + di).rem_euclid(n1 as isize) as usize;
                let jj = (j + dj).rem_euclid(n2 as isize) as usize;
                nbr.push(ii * n2 + jj);
            }
        }
        Stencil { n1, n2, nr, nc, vals: vec![0.0; n * nr * 9 * nc], nbr }
    }

    pub fn nodes(&self) -> usize {
        self.n1 * self.n2
    }
    pub fn rows(&self) -> usize {
        self.nodes() * self.nr
    }
    pub fn cols(&self) -> usize {
        self.nodes() * self.nc
    }

    #[inline]
    pub fn neighbor(&self, node: usize, off: usize) -> usize {
        self.nbr[node * 9 + off]
    }

    #[inline]
    pub fn add(&mut self, node: usize, r: usize, off: usize, c: usize, v: f64) {
        self.vals[((node * self.nr + r) * 9 + off) * self.nc + c] += v;
    }

    #[inline]
    pub fn get(&self, node: usize, r: usize, off: usize, c: usize) -> f64 {
        self.vals[((node * self.nr + r) * 9 + off) * self.nc + c]
    }

    pub fn matvec(&self, x: &[f64], y: &mut [f64]) {
        debug_assert_eq!(x.len(), self.cols());
        let (nr, nc) = (self.nr, self.nc);
        for node in 0..self.nodes() {
            for r in 0..nr {
                let base = (node * nr + r) * 9 * nc;
                let mut s = 0.0;
                for off in 0..9 {
                    let q = self.nbr[node * 9 + off] * nc;
                    let row = &self.vals[base + off * nc..base + off * nc + nc];
                    for c in 0..nc {
                        s += row[c] * x[q + c];
                    }
                }
                y[node * nr + r] = s;
            }
        }
    }

    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        let mut y = vec![0.0; self.rows()];
        self.matvec(x, &mut y);
        y
    }

    /// `y = A^T x`
    pub fn apply_t(&self, x: &[f64]) -> Vec<f64> {
        let (nr, nc) = (self.nr, self.nc);
        let mut y = vec![0.0; self.cols()];
        for node in 0..self.nodes() {
            for r in 0..nr {
                let xv = x[node * nr + r];
                if xv == 0.0 {
                    continue;
                }
                let base = (node * nr + r) * 9 * nc;
                for off in 0..9 {
                    let q = self.nbr[node * 9 + off] * nc;
                    for c in 0..nc {
                        y[q + c] += self.vals[base + off * nc + c] * xv;
                    }
                }
            }
        }
        y
    }

    pub fn diagonal(&self) -> Vec<f64> {
        assert_eq!(self.nr, self.nc);
        let center = offset_index(0, 0);
        (0..self.rows()).map(|row| self.get(row / self.nr, row % self.nr, center, row % self.nr)).collect()
    }

    /// Replace a square stencil by `(A + A^T) / 2`.
    pub fn symmetrize(&mut self) {
        assert_eq!(self.nr, self.nc);
        let nc = self.nc;
        let old = self.vals.clone();
        for node in 0..self.nodes() {
            for (off, &(di, dj)) in OFFSETS.iter().enumerate() {
                let q = self.nbr[node * 9 + off];
                let back = offset_index(-di, -dj);
                for r in 0..nc {
                    for c in 0..nc {
                        let a = old[((node * nc + r) * 9 + off) * nc + c];
                        let b = old[((q * nc + c) * 9 + back) * nc + r];
                        self.vals[((node * nc + r) * 9 + off) * nc + c] = 0.5 * (a + b);
                    }
                }
            }
        }
    }

    /// Maximum absolute row sum, an upper bound on the spectral radius.
    pub fn gershgorin(&self) -> f64 {
        let w = 9 * self.nc;
        self.vals.chunks(w).map(|r| r.iter().map(|v| v.abs()).sum::<f64>()).fold(0.0, f64::max)
    }

    /// Column-major dense copy; small grids wrap neighbors onto the same node, which accumulates correctly.
    pub fn to_dense(&self) -> Vec<f64> {
        let (rows, cols) = (self.rows(), self.cols());
        let mut a = vec![0.0; rows * cols];
        for node in 0..self.nodes() {
            for r in 0..self.nr {
                let row = node * self.nr + r;
                for off in 0..9 {
                    let q = self.nbr[node * 9 + off];
                    for c in 0..self.nc {
                        a[(q * self.nc + c) * rows + row] += self.get(node, r, off, c);
                    }
                }
            }
        }
        a
    }
}
