use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{mismatch, Result};

/// A set of input locations, stored row-major (one point per row).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Points {
    n: usize,
    dim: usize,
    data: Vec<f64>,
}

impl Points {
    pub fn new(n: usize, dim: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != n * dim {
            return Err(mismatch(format!(
                "{} values cannot form {} points of dimension {}",
                data.len(),
                n,
                dim
            )));
        }
        Ok(Self { n, dim, data })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let dim = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * dim);
        for r in rows {
            if r.len() != dim {
                return Err(mismatch("ragged rows"));
            }
            data.extend_from_slice(r);
        }
        Ok(Self {
            n: rows.len(),
            dim,
            data,
        })
    }

    /// Points on a line, one coordinate each.
    pub fn from_1d(xs: &[f64]) -> Self {
        Self {
            n: xs.len(),
            dim: 1,
            data: xs.to_vec(),
        }
    }

    pub fn empty(dim: usize) -> Self {
        Self {
            n: 0,
            dim,
            data: Vec::new(),
        }
    }

    pub fn from_matrix(m: &DMatrix<f64>) -> Self {
        let (n, dim) = m.shape();
        let mut data = Vec::with_capacity(n * dim);
        for i in 0..n {
            data.extend(m.row(i).iter());
        }
        Self { n, dim, data }
    }

    pub fn to_matrix(&self) -> DMatrix<f64> {
        DMatrix::from_row_slice(self.n, self.dim, &self.data)
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f64]> {
        self.data.chunks(self.dim.max(1)).take(self.n)
    }

    /// Subset of rows by index.
    pub fn select(&self, idx: &[usize]) -> Self {
        let mut data = Vec::with_capacity(idx.len() * self.dim);
        for &i in idx {
            data.extend_from_slice(self.row(i));
        }
        Self {
            n: idx.len(),
            dim: self.dim,
            data,
        }
    }

    /// Keeps only the listed columns.
    pub fn columns(&self, cols: &[usize]) -> Result<Self> {
        if let Some(&c) = cols.iter().find(|&&c| c >= self.dim) {
            return Err(mismatch(format!(
                "column {} out of range for dimension {}",
                c, self.dim
            )));
        }
        let mut data = Vec::with_capacity(self.n * cols.len());
        for r in self.rows() {
            data.extend(cols.iter().map(|&c| r[c]));
        }
        Ok(Self {
            n: self.n,
            dim: cols.len(),
            data,
        })
    }

    /// Per-column (min, max).
    pub fn bounds(&self) -> Vec<(f64, f64)> {
        (0..self.dim)
            .map(|d| {
                self.rows().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), r| {
                    (lo.min(r[d]), hi.max(r[d]))
                })
            })
            .collect()
    }

    /// Median Euclidean distance over distinct pairs; 1.0 when fewer than two points.
    pub fn median_pairwise_distance(&self) -> f64 {
        let mut dists = Vec::with_capacity(self.n * self.n.saturating_sub(1) / 2);
        for i in 0..self.n {
            for j in (i + 1)..self.n {
                let d2: f64 = self
                    .row(i)
                    .iter()
                    .zip(self.row(j))
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum();
                dists.push(d2.sqrt());
            }
        }
        if dists.is_empty() {
            return 1.0;
        }
        dists.sort_by(|a, b| a.total_cmp(b));
        let mid = dists.len() / 2;
        if dists.len() % 2 == 1 {
            dists[mid]
        } else {
            0.5 * (dists[mid - 1] + dists[mid])
        }
    }
}
