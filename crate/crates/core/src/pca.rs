//! Batch PCA through a thin SVD of the centred data.

use nalgebra::DMatrix;

use crate::error::{shape_err, Error, Result};
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub struct PcaBasis {
    /// Column means of the fitted batch.
    pub mean: Vec<f64>,
    /// `d x k`, orthonormal columns ordered by descending variance.
    pub components: Tensor<f64>,
    /// Variance captured by each component.
    pub explained_variance: Vec<f64>,
}

impl PcaBasis {
    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn k(&self) -> usize {
        self.components.dims()[1]
    }

    /// Component `j` as a vector.
    pub fn component(&self, j: usize) -> Vec<f64> {
        let k = self.k();
        (0..self.dim()).map(|i| self.components.data()[i * k + j]).collect()
    }
}

/// Fits the top-`k` principal axes of the rows of `data`.
///
/// Each component's sign is fixed so its largest-magnitude entry is
/// positive.
pub fn fit<T: Scalar>(data: &Tensor<T>, k: usize) -> Result<PcaBasis> {
    data.expect_rank(2, "pca_fit")?;
    let (n, d) = (data.dims()[0], data.dims()[1]);
    if n < 2 {
        return Err(Error::InvalidArgument(format!("PCA needs at least 2 rows, got {n}")));
    }
    if k == 0 || k > (n - 1).min(d) {
        return Err(Error::InvalidArgument(format!(
            "PCA rank {k} outside 1..={} for {n} rows of width {d}",
            (n - 1).min(d)
        )));
    }
    let mut mean = vec![0.0; d];
    for row in data.data().chunks(d) {
        for (m, &v) in mean.iter_mut().zip(row) {
            *m += v.as_f64();
        }
    }
    for m in &mut mean {
        *m /= n as f64;
    }
    let centered = DMatrix::from_fn(n, d, |i, j| data.data()[i * d + j].as_f64() - mean[j]);
    if centered.iter().all(|&v| v == 0.0) {
        return Err(Error::Degenerate("PCA input has zero variance".into()));
    }

    let svd = centered.svd(false, true);
    let v_t = svd.v_t.expect("right singular vectors requested");
    let mut order: Vec<usize> = (0..svd.singular_values.len()).collect();
    order.sort_by(|&a, &b| svd.singular_values[b].total_cmp(&svd.singular_values[a]));

    let mut comps = vec![0.0; d * k];
    let mut explained = Vec::with_capacity(k);
    for (j, &src) in order.iter().take(k).enumerate() {
        let mut col: Vec<f64> = (0..d).map(|i| v_t[(src, i)]).collect();
        let pivot = col
            .iter()
            .copied()
            .fold(0.0f64, |best, v| if v.abs() > best.abs() { v } else { best });
        if pivot < 0.0 {
            col.iter_mut().for_each(|v| *v = -*v);
        }
        for (i, v) in col.into_iter().enumerate() {
            comps[i * k + j] = v;
        }
        let s = svd.singular_values[src];
        explained.push(s * s / (n as f64 - 1.0));
    }
    Ok(PcaBasis {
        mean,
        components: Tensor::new(vec![d, k], comps)?,
        explained_variance: explained,
    })
}

/// `(x - mean) @ components`.
pub fn project<T: Scalar>(x: &Tensor<T>, basis: &PcaBasis) -> Result<Tensor<T>> {
    x.expect_rank(2, "pca_project")?;
    let (n, d) = (x.dims()[0], x.dims()[1]);
    if d != basis.dim() {
        return Err(shape_err(
            "pca_project",
            format!("rows of width {d}, basis of width {}", basis.dim()),
        ));
    }
    let k = basis.k();
    let c = basis.components.data();
    let mut out = Vec::with_capacity(n * k);
    for row in x.data().chunks(d) {
        let centered: Vec<f64> = row
            .iter()
            .zip(&basis.mean)
            .map(|(&v, &m)| v.as_f64() - m)
            .collect();
        for j in 0..k {
            let mut acc = 0.0;
            for (i, &v) in centered.iter().enumerate() {
                acc += v * c[i * k + j];
            }
            out.push(T::of(acc));
        }
    }
    Tensor::new(vec![n, k], out)
}
