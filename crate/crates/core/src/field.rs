use std::io::{BufRead, Write};

use crate::error::{Error, Result};

/// Covariant tensor field of rank 0, 1 or 2 sampled at grid nodes.
///
/// Storage is node-major: `data[node * ncomp + c]` with `node = i * n2 + j`.
/// For rank 2 the component index is `a * 2 + b`.
#[derive(Debug, Clone, PartialEq)]
pub struct TensorField {
    pub rank: usize,
    pub n1: usize,
    pub n2: usize,
    pub data: Vec<f64>,
}

pub fn ncomp(rank: usize) -> usize {
    1 << rank
}

impl TensorField {
    pub fn zeros(rank: usize, n1: usize, n2: usize) -> Self {
        TensorField { rank, n1, n2, data: vec![0.0; n1 * n2 * ncomp(rank)] }
    }

    pub fn from_data(rank: usize, n1: usize, n2: usize, data: Vec<f64>) -> Result<Self> {
        if rank > 2 {
            return Err(Error::RankTooHigh(rank));
        }
        if data.len() != n1 * n2 * ncomp(rank) {
            return Err(Error::BadDimensions(format!(
                "field data length {} for rank {rank} on {n1}x{n2}",
                data.len()
            )));
        }
        Ok(TensorField { rank, n1, n2, data })
    }

    /// Build from a closure `f(i, j, component)`.
    pub fn from_fn(rank: usize, n1: usize, n2: usize, f: impl Fn(usize, usize, usize) -> f64) -> Self {
        let nc = ncomp(rank);
        let mut data = Vec::with_capacity(n1 * n2 * nc);
        for i in 0..n1 {
            for j in 0..n2 {
                for c in 0..nc {
                    data.push(f(i, j, c));
                }
            }
        }
        TensorField { rank, n1, n2, data }
    }

    pub fn ncomp(&self) -> usize {
        ncomp(self.rank)
    }

    pub fn nodes(&self) -> usize {
        self.n1 * self.n2
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.n1, self.n2)
    }

    #[inline]
    pub fn at(&self, node: usize, c: usize) -> f64 {
        self.data[node * self.ncomp() + c]
    }

    pub fn check_like(&self, other: &TensorField) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(Error::GridMismatch { expected: self.shape(), found: other.shape() });
        }
        if self.rank != other.rank {
            return Err(Error::RankMismatch { expected: self.rank, found: other.rank });
        }
        Ok(())
    }

    pub fn scaled(&self, s: f64) -> Self {
        let mut out = self.clone();
        out.data.iter_mut().for_each(|v| *v *= s);
        out
    }

    /// `self += s * other`; shapes must agree.
    pub fn axpy(&mut self, s: f64, other: &TensorField) {
        debug_assert_eq!(self.data.len(), other.data.len());
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += s * b;
        }
    }

    pub fn add(&self, other: &TensorField) -> Self {
        let mut out = self.clone();
        out.axpy(1.0, other);
        out
    }

    pub fn sub(&self, other: &TensorField) -> Self {
        let mut out = self.clone();
        out.axpy(-1.0, other);
        out
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0_f64, |m, v| m.max(v.abs()))
    }
}

/// Header tag of the field CSV format.
pub const FIELD_FORMAT: &str = "geolp-field v1";

/// Writes `# geolp-field v1 n1 n2 rank`, then `i,j,c0,..` rows.
pub fn write_field_csv(f: &TensorField, out: &mut impl Write) -> Result<()> {
    writeln!(out, "# {FIELD_FORMAT} {} {} {}", f.n1, f.n2, f.rank)?;
    let cols: Vec<String> = (0..f.ncomp()).map(|c| format!("c{c}")).collect();
    writeln!(out, "i,j,{}", cols.join(","))?;
    for node in 0..f.nodes() {
        write!(out, "{},{}", node / f.n2, node % f.n2)?;
        for c in 0..f.ncomp() {
            write!(out, ",{:e}", f.at(node, c))?;
        }
        writeln!(out)?;
    }
    Ok(())
}

pub fn read_field_csv(input: impl BufRead) -> Result<TensorField> {
    let mut input = input;
    let mut first = String::new();
    input.read_line(&mut first)?;
    let rest = first
        .trim()
        .strip_prefix('#')
        .map(str::trim)
        .and_then(|h| h.strip_prefix(FIELD_FORMAT))
        .ok_or_else(|| Error::Parse(format!("field header: {:?}", first.trim())))?;
    let head: Vec<usize> = rest
        .split_whitespace()
        .map(|t| t.parse().map_err(|e| Error::Parse(format!("field header {t}: {e}"))))
        .collect::<Result<_>>()?;
    let [n1, n2, rank] = head[..] else {
        return Err(Error::Parse(format!("field header: {:?}", first.trim())));
    };
    if rank > 2 {
        return Err(Error::RankTooHigh(rank));
    }
    let nc = ncomp(rank);
    let mut data = vec![f64::NAN; n1 * n2 * nc];
    let mut seen = vec![false; n1 * n2];
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(input);
    let p = |s: &str| s.parse::<f64>().map_err(|e| Error::Parse(format!("{s}: {e}")));
    for rec in rdr.records() {
        let rec = rec?;
        if rec.len() != 2 + nc {
            return Err(Error::Parse(format!("field row has {} columns, rank {rank} needs {}", rec.len(), 2 + nc)));
        }
        let i: usize = rec[0].parse().map_err(|e| Error::Parse(format!("row index {}: {e}", &rec[0])))?;
        let j: usize = rec[1].parse().map_err(|e| Error::Parse(format!("row index {}: {e}", &rec[1])))?;
        if i >= n1 || j >= n2 {
            return Err(Error::BadDimensions(format!("row index ({i}, {j}) outside {n1}x{n2}")));
        }
        let node = i * n2 + j;
        seen[node] = true;
        for c in 0..nc {
            data[node * nc + c] = p(&rec[2 + c])?;
        }
    }
    if let Some(node) = seen.iter().position(|s| !s) {
        return Err(Error::BadDimensions(format!("field missing node ({}, {})", node / n2, node % n2)));
    }
    TensorField::from_data(rank, n1, n2, data)
}
