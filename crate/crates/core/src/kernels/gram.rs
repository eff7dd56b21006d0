//! Gram matrix assembly and its reverse-mode counterpart.

use nalgebra::DMatrix;

use super::{KernelSpec, LatentRows, Pair, PairGrad};
use crate::error::{mismatch, Error, Result};
use crate::par;
use crate::points::Points;

/// A kernel evaluated on two sets of inputs.
#[derive(Clone, Debug)]
pub struct GramMatrix {
    pub values: DMatrix<f64>,
    /// Set when rows and columns were the same inputs; `values` is then exactly symmetric.
    pub symmetric: bool,
}

/// Adjoint of a Gram matrix pulled back onto kernel hyperparameters, input
/// coordinates and latent values. All per-input buffers are row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct GramGrad {
    pub hyper: Vec<f64>,
    pub rows_x: Vec<f64>,
    pub cols_x: Vec<f64>,
    pub rows_latent: Vec<f64>,
    pub cols_latent: Vec<f64>,
}

impl GramGrad {
    fn zeros(n_hyper: usize, nr: usize, nc: usize, dim: usize, width: usize) -> Self {
        Self {
            hyper: vec![0.0; n_hyper],
            rows_x: vec![0.0; nr * dim],
            cols_x: vec![0.0; nc * dim],
            rows_latent: vec![0.0; nr * width],
            cols_latent: vec![0.0; nc * width],
        }
    }

    fn merge(mut self, other: Self) -> Self {
        add_into(&mut self.hyper, &other.hyper);
        add_into(&mut self.rows_x, &other.rows_x);
        add_into(&mut self.cols_x, &other.cols_x);
        add_into(&mut self.rows_latent, &other.rows_latent);
        add_into(&mut self.cols_latent, &other.cols_latent);
        self
    }
}

fn add_into(a: &mut [f64], b: &[f64]) {
    for (x, y) in a.iter_mut().zip(b) {
        *x += y;
    }
}

/// Checks that the latent rows match what the kernel needs; returns the
/// per-input latent width (0 for stationary kernels).
fn check_latent(spec: &KernelSpec, x: &Points, lat: Option<&LatentRows>) -> Result<usize> {
    match spec.latent_requirement()? {
        None => Ok(0),
        Some((kind, p)) => {
            let lat = lat.ok_or(Error::MissingLatentContext)?;
            if lat.kind() != kind || lat.p() != p {
                return Err(mismatch(format!(
                    "kernel needs {kind:?} latent values of width {p}, got {:?} of width {}",
                    lat.kind(),
                    lat.p()
                )));
            }
            if lat.len() != x.len() {
                return Err(mismatch(format!(
                    "{} latent rows for {} inputs",
                    lat.len(),
                    x.len()
                )));
            }
            Ok(lat.width())
        }
    }
}

fn pair<'a>(
    rows: &'a Points,
    cols: &'a Points,
    lat_rows: Option<&'a LatentRows>,
    lat_cols: Option<&'a LatentRows>,
    i: usize,
    j: usize,
    width: usize,
) -> Pair<'a> {
    Pair {
        xi: rows.row(i),
        xj: cols.row(j),
        li: if width > 0 { lat_rows.map(|l| l.row(i)) } else { None },
        lj: if width > 0 { lat_cols.map(|l| l.row(j)) } else { None },
    }
}

fn same_inputs(
    rows: &Points,
    cols: &Points,
    lat_rows: Option<&LatentRows>,
    lat_cols: Option<&LatentRows>,
) -> bool {
    let lat_same = match (lat_rows, lat_cols) {
        (None, None) => true,
        (Some(a), Some(b)) => std::ptr::eq(a, b),
        _ => false,
    };
    std::ptr::eq(rows, cols) && lat_same
}

fn finish(values: DMatrix<f64>, symmetric: bool) -> Result<GramMatrix> {
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::NotPositiveDefinite { jitter: 0.0 });
    }
    Ok(GramMatrix { values, symmetric })
}

fn assemble<M>(
    spec: &KernelSpec,
    rows: &Points,
    cols: &Points,
    lat_rows: Option<&LatentRows>,
    lat_cols: Option<&LatentRows>,
    map: M,
) -> Result<GramMatrix>
where
    M: Fn(usize, &(dyn Fn(usize) -> Vec<f64> + Sync + Send)) -> Vec<Vec<f64>>,
{
    if rows.dim() != cols.dim() {
        return Err(mismatch(format!(
            "row inputs have dimension {}, column inputs {}",
            rows.dim(),
            cols.dim()
        )));
    }
    let width = check_latent(spec, rows, lat_rows)?;
    check_latent(spec, cols, lat_cols)?;
    let symmetric = same_inputs(rows, cols, lat_rows, lat_cols);
    let nc = cols.len();
    let row_fn = |i: usize| -> Vec<f64> {
        let start = if symmetric { i } else { 0 };
        (start..nc)
            .map(|j| spec.value(&pair(rows, cols, lat_rows, lat_cols, i, j, width)))
            .collect()
    };
    let computed = map(rows.len(), &row_fn);
    let mut values = DMatrix::zeros(rows.len(), nc);
    for (i, row) in computed.into_iter().enumerate() {
        let start = if symmetric { i } else { 0 };
        for (k, v) in row.into_iter().enumerate() {
            values[(i, start + k)] = v;
            if symmetric {
                values[(start + k, i)] = v;
            }
        }
    }
    finish(values, symmetric)
}

/// Evaluates `spec` on every (row, column) pair. Rows are computed in
/// parallel when the `parallel` feature is enabled.
///
/// Passing the same `Points` (and latent rows) for both sides yields an
/// exactly symmetric matrix with `symmetric = true`.
pub fn gram(
    spec: &KernelSpec,
    rows: &Points,
    cols: &Points,
    lat_rows: Option<&LatentRows>,
    lat_cols: Option<&LatentRows>,
) -> Result<GramMatrix> {
    assemble(spec, rows, cols, lat_rows, lat_cols, |n, f| par::map_range(n, f))
}

/// Single-threaded [`gram`], independent of the `parallel` feature.
pub fn gram_serial(
    spec: &KernelSpec,
    rows: &Points,
    cols: &Points,
    lat_rows: Option<&LatentRows>,
    lat_cols: Option<&LatentRows>,
) -> Result<GramMatrix> {
    assemble(spec, rows, cols, lat_rows, lat_cols, |n, f| par::map_range_serial(n, f))
}

/// Kernel values `k(x_i, x_i)`.
pub fn gram_diag(spec: &KernelSpec, x: &Points, lat: Option<&LatentRows>) -> Result<Vec<f64>> {
    let width = check_latent(spec, x, lat)?;
    let out = par::map_range(x.len(), |i| spec.value(&pair(x, x, lat, lat, i, i, width)));
    if out.iter().any(|v| !v.is_finite()) {
        return Err(Error::NotPositiveDefinite { jitter: 0.0 });
    }
    Ok(out)
}

/// Pulls the adjoint `∂L/∂K` of a Gram block back through the kernel.
///
/// `adjoint` is treated entrywise: for a symmetric block pass the full
/// matrix and read the total input gradient as `rows_* + cols_*`.
pub fn gram_backward(
    spec: &KernelSpec,
    rows: &Points,
    cols: &Points,
    lat_rows: Option<&LatentRows>,
    lat_cols: Option<&LatentRows>,
    adjoint: &DMatrix<f64>,
) -> Result<GramGrad> {
    if adjoint.shape() != (rows.len(), cols.len()) {
        return Err(mismatch(format!(
            "adjoint is {}x{}, Gram block is {}x{}",
            adjoint.nrows(),
            adjoint.ncols(),
            rows.len(),
            cols.len()
        )));
    }
    if rows.dim() != cols.dim() {
        return Err(mismatch("row and column inputs differ in dimension"));
    }
    let width = check_latent(spec, rows, lat_rows)?;
    check_latent(spec, cols, lat_cols)?;
    let dim = rows.dim();
    let n_hyper = spec.n_hyperparameters();
    let (nr, nc) = (rows.len(), cols.len());
    let grad = par::fold_range(
        nr,
        || GramGrad::zeros(n_hyper, nr, nc, dim, width),
        |mut acc, i| {
            for j in 0..nc {
                let w = adjoint[(i, j)];
                if w == 0.0 {
                    continue;
                }
                let p = pair(rows, cols, lat_rows, lat_cols, i, j, width);
                let (rx, cx) = (&mut acc.rows_x, &mut acc.cols_x);
                let (rl, cl) = (&mut acc.rows_latent, &mut acc.cols_latent);
                let mut g = PairGrad {
                    hyper: &mut acc.hyper,
                    dxi: &mut rx[i * dim..(i + 1) * dim],
                    dxj: &mut cx[j * dim..(j + 1) * dim],
                    dli: &mut rl[i * width..(i + 1) * width],
                    dlj: &mut cl[j * width..(j + 1) * width],
                };
                spec.backward(&p, w, 0, &mut g);
            }
            acc
        },
        GramGrad::merge,
    );
    Ok(grad)
}

/// Backward pass for [`gram_diag`]. Gradients for each input (both kernel
/// arguments combined) land in `rows_x` / `rows_latent`.
pub fn diag_backward(
    spec: &KernelSpec,
    x: &Points,
    lat: Option<&LatentRows>,
    adjoint: &[f64],
) -> Result<GramGrad> {
    if adjoint.len() != x.len() {
        return Err(mismatch("diagonal adjoint length differs from input count"));
    }
    let width = check_latent(spec, x, lat)?;
    let dim = x.dim();
    let n = x.len();
    let n_hyper = spec.n_hyperparameters();
    let grad = par::fold_range(
        n,
        || GramGrad::zeros(n_hyper, n, 0, dim, width),
        |mut acc, i| {
            let w = adjoint[i];
            if w != 0.0 {
                let p = pair(x, x, lat, lat, i, i, width);
                let mut dxj = vec![0.0; dim];
                let mut dlj = vec![0.0; width];
                let mut g = PairGrad {
                    hyper: &mut acc.hyper,
                    dxi: &mut acc.rows_x[i * dim..(i + 1) * dim],
                    dxj: &mut dxj,
                    dli: &mut acc.rows_latent[i * width..(i + 1) * width],
                    dlj: &mut dlj,
                };
                spec.backward(&p, w, 0, &mut g);
                add_into(&mut acc.rows_x[i * dim..(i + 1) * dim], &dxj);
                add_into(&mut acc.rows_latent[i * width..(i + 1) * width], &dlj);
            }
            acc
        },
        GramGrad::merge,
    );
    Ok(grad)
}
