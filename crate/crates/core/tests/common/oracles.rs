//! Independent reference implementations used only by tests.

use mse2d::Tensor;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

pub type Mat = Vec<Vec<f64>>;

pub fn random_mat(rng: &mut ChaCha8Rng, n: usize, d: usize) -> Mat {
    (0..n).map(|_| (0..d).map(|_| rng.random_range(-1.0..1.0)).collect()).collect()
}

pub fn covariance(x: &Mat) -> (Vec<f64>, Mat) {
    let (n, d) = (x.len(), x[0].len());
    let mean: Vec<f64> = (0..d).map(|j| x.iter().map(|r| r[j]).sum::<f64>() / n as f64).collect();
    let mut c = vec![vec![0.0; d]; d];
    for r in x {
        for i in 0..d {
            for j in 0..d {
                c[i][j] += (r[i] - mean[i]) * (r[j] - mean[j]) / (n as f64 - 1.0);
            }
        }
    }
    (mean, c)
}

/// Eigenpairs of a symmetric matrix, sorted by descending eigenvalue.
pub fn jacobi_eigen(a: &Mat) -> Vec<(f64, Vec<f64>)> {
    let d = a.len();
    let mut a = a.clone();
    let mut v: Mat = (0..d).map(|i| (0..d).map(|j| f64::from(u8::from(i == j))).collect()).collect();
    for _ in 0..100 {
        let off: f64 = (0..d).flat_map(|i| (0..d).filter(move |&j| j != i).map(move |j| (i, j))).map(|(i, j)| a[i][j].powi(2)).sum();
        if off < 1e-30 {
            break;
        }
        for p in 0..d {
            for q in p + 1..d {
                if a[p][q].abs() < 1e-300 {
                    continue;
                }
                let theta = (a[q][q] - a[p][p]) / (2.0 * a[p][q]);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..d {
                    let (akp, akq) = (a[k][p], a[k][q]);
                    a[k][p] = c * akp - s * akq;
                    a[k][q] = s * akp + c * akq;
                }
                for k in 0..d {
                    let (apk, aqk) = (a[p][k], a[q][k]);
                    a[p][k] = c * apk - s * aqk;
                    a[q][k] = s * apk + c * aqk;
                }
                for row in v.iter_mut() {
                    let (vp, vq) = (row[p], row[q]);
                    row[p] = c * vp - s * vq;
                    row[q] = s * vp + c * vq;
                }
            }
        }
    }
    let mut pairs: Vec<(f64, Vec<f64>)> = (0..d).map(|j| (a[j][j], v.iter().map(|r| r[j]).collect())).collect();
    pairs.sort_by(|x, y| y.0.total_cmp(&x.0));
    pairs
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Largest principal angle between the spans of two orthonormal sets.
pub fn subspace_angle(u: &[Vec<f64>], w: &[Vec<f64>]) -> f64 {
    // Frobenius norm of the residual of u after projecting onto span(w)
    // bounds sin of the largest angle from above.
    let mut res = 0.0;
    for a in u {
        let mut r = a.clone();
        for b in w {
            let c = dot(a, b);
            r.iter_mut().zip(b).for_each(|(x, y)| *x -= c * y);
        }
        res += dot(&r, &r);
    }
    res.sqrt().min(1.0).asin()
}

pub fn tensor(x: &Mat) -> Tensor<f64> {
    Tensor::from_f64_rows(x).unwrap()
}

pub fn reconstruction_error(x: &Mat, mean: &[f64], basis: &[Vec<f64>]) -> f64 {
    x.iter()
        .map(|r| {
            let c: Vec<f64> = r.iter().zip(mean).map(|(a, m)| a - m).collect();
            let mut res = c.clone();
            for b in basis {
                let p = dot(&c, b);
                res.iter_mut().zip(b).for_each(|(x, y)| *x -= p * y);
            }
            dot(&res, &res)
        })
        .sum()
}

pub fn random_orthonormal(rng: &mut ChaCha8Rng, d: usize, k: usize) -> Vec<Vec<f64>> {
    let mut out: Vec<Vec<f64>> = Vec::new();
    while out.len() < k {
        let mut v: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
        for b in &out {
            let c = dot(&v, b);
            v.iter_mut().zip(b).for_each(|(x, y)| *x -= c * y);
        }
        let n = dot(&v, &v).sqrt();
        if n > 1e-6 {
            out.push(v.into_iter().map(|x| x / n).collect());
        }
    }
    out
}

/// Rank of each element: 1 + number strictly smaller + half the other ties.
pub fn oracle_ranks(xs: &[f64]) -> Vec<f64> {
    xs.iter()
        .map(|&x| {
            let less = xs.iter().filter(|&&y| y < x).count() as f64;
            let eq = xs.iter().filter(|&&y| y == x).count() as f64;
            1.0 + less + (eq - 1.0) / 2.0
        })
        .collect()
}

pub fn oracle_pearson(a: &[f64], b: &[f64]) -> Option<f64> {
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let cov: f64 = a.iter().zip(b).map(|(x, y)| (x - ma) * (y - mb)).sum();
    let va: f64 = a.iter().map(|x| (x - ma).powi(2)).sum();
    let vb: f64 = b.iter().map(|y| (y - mb).powi(2)).sum();
    (va > 0.0 && vb > 0.0).then(|| cov / (va * vb).sqrt())
}
