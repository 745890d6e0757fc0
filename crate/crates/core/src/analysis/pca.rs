use nalgebra::{DMatrix, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Eigenvalues below this fraction of the largest count as zero.
const RANK_TOL: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Pca {
    pub mean: Vec<f64>,
    /// Row-major `k × d` principal directions, strongest first.
    pub components: Vec<f64>,
    pub explained_variance_ratio: Vec<f64>,
    /// Row-major `n × k` projections of the centered input.
    pub projected: Vec<f64>,
    pub dims: usize,
}

/// Projects `n × d` row-major `data` onto its top `out_dims` principal
/// directions. Directions with (numerically) zero variance are dropped, so
/// `dims` may come out smaller than requested.
pub fn pca_reduce(data: &[f64], d: usize, out_dims: usize) -> Result<Pca> {
    if d == 0 || !data.len().is_multiple_of(d) {
        return Err(Error::shape(format!("{} values do not form rows of {d}", data.len())));
    }
    let n = data.len() / d;
    if out_dims == 0 || out_dims > d {
        return Err(Error::invalid(format!("cannot reduce {d} dims to {out_dims}")));
    }
    if n <= out_dims {
        return Err(Error::invalid(format!("PCA to {out_dims} dims needs more than {out_dims} samples, got {n}")));
    }
    let mut mean = vec![0.0; d];
    for row in data.chunks(d) {
        mean.iter_mut().zip(row).for_each(|(m, v)| *m += v);
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);
    let centered: Vec<f64> = data
        .chunks(d)
        .flat_map(|row| row.iter().zip(&mean).map(|(v, m)| v - m))
        .collect();
    let x = DMatrix::from_row_slice(n, d, &centered);
    let cov = (x.transpose() * &x) / (n - 1) as f64;
    let eig = SymmetricEigen::new(cov);
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let total: f64 = eig.eigenvalues.iter().map(|v| v.max(0.0)).sum();
    let top = eig.eigenvalues[order[0]].max(0.0);
    // Always keep the leading direction, even for constant data.
    let kept: Vec<usize> = order
        .iter()
        .take(out_dims)
        .enumerate()
        .take_while(|&(r, &i)| r == 0 || eig.eigenvalues[i] > RANK_TOL * top)
        .map(|(_, &i)| i)
        .collect();
    let k = kept.len();
    let mut components = Vec::with_capacity(k * d);
    for &i in &kept {
        let col = eig.eigenvectors.column(i);
        // Sign convention: the largest-magnitude entry is positive.
        let pivot = col.iter().copied().max_by(|a, b| a.abs().total_cmp(&b.abs())).unwrap_or(1.0);
        let s = if pivot < 0.0 { -1.0 } else { 1.0 };
        components.extend(col.iter().map(|v| s * v));
    }
    let explained_variance_ratio = kept
        .iter()
        .map(|&i| if total > 0.0 { eig.eigenvalues[i].max(0.0) / total } else { 0.0 })
        .collect();
    let mut projected = vec![0.0; n * k];
    crate::tensor::kernels::gemm(n, d, k, &centered, false, &components, true, 0.0, &mut projected);
    Ok(Pca {
        mean,
        components,
        explained_variance_ratio,
        projected,
        dims: k,
    })
}

/// Per-column z-score in place; constant columns are only centered.
pub fn standardize(data: &mut [f64], d: usize) {
    let n = data.len() / d;
    if n == 0 {
        return;
    }
    for j in 0..d {
        let mean = data.iter().skip(j).step_by(d).sum::<f64>() / n as f64;
        let var = data.iter().skip(j).step_by(d).map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64;
        let sd = var.sqrt();
        for v in data.iter_mut().skip(j).step_by(d) {
            *v -= mean;
            if sd > 0.0 {
                *v /= sd;
            }
        }
    }
}
