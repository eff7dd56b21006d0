//! Lloyd's k-means with k-means++ seeding.

use rand::Rng;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::points::Points;
use crate::rng::substream;

pub const MAX_LLOYD_ITERS: usize = 100;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct KMeans {
    pub centroids: Points,
    pub labels: Vec<usize>,
    /// Within-cluster sum of squares after seeding and after each Lloyd update.
    pub objective_trace: Vec<f64>,
    pub converged: bool,
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn nearest(x: &[f64], centroids: &Points) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (c, row) in centroids.rows().enumerate() {
        let d = sq_dist(x, row);
        if d < best.1 {
            best = (c, d);
        }
    }
    best
}

fn count_distinct(data: &Points) -> usize {
    let mut rows: Vec<&[f64]> = data.rows().collect();
    rows.sort_by(|a, b| {
        a.iter()
            .zip(b.iter())
            .map(|(x, y)| x.total_cmp(y))
            .find(|o| o.is_ne())
            .unwrap_or(std::cmp::Ordering::Equal)
    });
    rows.dedup();
    rows.len()
}

/// Clusters the rows of `data` into `k` groups. Deterministic under `seed`.
pub fn kmeans(data: &Points, k: usize, seed: u64) -> Result<KMeans> {
    if data.is_empty() {
        return Err(Error::EmptyDataset);
    }
    if k == 0 {
        return Err(Error::InvalidConfig("k must be at least 1".into()));
    }
    let cells = count_distinct(data);
    if k > cells {
        return Err(Error::KTooLarge { k, cells });
    }
    let n = data.len();
    let mut rng = substream(seed, "kmeans");

    // k-means++ seeding
    let mut chosen = vec![rng.gen_range(0..n)];
    let mut d2: Vec<f64> = data.rows().map(|r| sq_dist(r, data.row(chosen[0]))).collect();
    while chosen.len() < k {
        let total: f64 = d2.iter().sum();
        let mut target = rng.gen::<f64>() * total;
        let mut pick = None;
        for (i, &w) in d2.iter().enumerate() {
            if w > 0.0 {
                pick = Some(i);
                if target < w {
                    break;
                }
                target -= w;
            }
        }
        let next = pick.expect("distinct rows remain");
        chosen.push(next);
        for (i, r) in data.rows().enumerate() {
            d2[i] = d2[i].min(sq_dist(r, data.row(next)));
        }
    }
    let mut centroids = data.select(&chosen);

    let assign = |centroids: &Points| -> (Vec<usize>, f64) {
        let mut ss = 0.0;
        let labels = data
            .rows()
            .map(|r| {
                let (c, d) = nearest(r, centroids);
                ss += d;
                c
            })
            .collect();
        (labels, ss)
    };
    let (mut labels, ss) = assign(&centroids);
    let mut objective_trace = vec![ss];
    let mut converged = false;
    let dim = data.dim();
    for _ in 0..MAX_LLOYD_ITERS {
        let mut sums = vec![0.0; k * dim];
        let mut counts = vec![0usize; k];
        for (i, &c) in labels.iter().enumerate() {
            counts[c] += 1;
            for (s, v) in sums[c * dim..(c + 1) * dim].iter_mut().zip(data.row(i)) {
                *s += v;
            }
        }
        for c in 0..k {
            // an empty cluster keeps its centroid
            if counts[c] > 0 {
                let row = centroids.row_mut(c);
                for d in 0..dim {
                    row[d] = sums[c * dim + d] / counts[c] as f64;
                }
            }
        }
        let (new_labels, ss) = assign(&centroids);
        objective_trace.push(ss);
        if new_labels == labels {
            converged = true;
            break;
        }
        labels = new_labels;
    }
    Ok(KMeans {
        centroids,
        labels,
        objective_trace,
        converged,
    })
}
