//! Independent numerical oracles shared by the integration tests.

#![allow(dead_code)]

use ndarray::{Array1, Array2};

use fedadmm::model::ClientShard;

/// Solve `M x = b` for symmetric positive definite `M` by Cholesky.
pub fn cholesky_solve(m: &Array2<f64>, b: &Array1<f64>) -> Array1<f64> {
    let n = b.len();
    let mut l = Array2::<f64>::zeros((n, n));
    for i in 0..n {
        for j in 0..=i {
            let mut sum = m[[i, j]];
            for k in 0..j {
                sum -= l[[i, k]] * l[[j, k]];
            }
            if i == j {
                assert!(sum > 0.0, "matrix is not positive definite");
                l[[i, i]] = sum.sqrt();
            } else {
                l[[i, j]] = sum / l[[j, j]];
            }
        }
    }
    let mut y = Array1::<f64>::zeros(n);
    for i in 0..n {
        let mut sum = b[i];
        for k in 0..i {
            sum -= l[[i, k]] * y[k];
        }
        y[i] = sum / l[[i, i]];
    }
    let mut x = Array1::<f64>::zeros(n);
    for i in (0..n).rev() {
        let mut sum = y[i];
        for k in i + 1..n {
            sum -= l[[k, i]] * x[k];
        }
        x[i] = sum / l[[i, i]];
    }
    x
}

/// `(AᵀA/d, Aᵀb/d)` of a least-squares shard, computed entry by entry.
pub fn normal_equations(shard: &ClientShard) -> (Array2<f64>, Array1<f64>) {
    let a = shard.features();
    let b = shard.labels();
    let (d, n) = a.dim();
    let mut h = Array2::<f64>::zeros((n, n));
    let mut c = Array1::<f64>::zeros(n);
    for t in 0..d {
        for p in 0..n {
            c[p] += a[[t, p]] * b[t] / d as f64;
            for q in 0..n {
                h[[p, q]] += a[[t, p]] * a[[t, q]] / d as f64;
            }
        }
    }
    (h, c)
}

/// Central-difference gradient with step `h`.
pub fn fd_gradient(f: impl Fn(&Array1<f64>) -> f64, x: &Array1<f64>, h: f64) -> Array1<f64> {
    let mut g = Array1::zeros(x.len());
    for j in 0..x.len() {
        let mut plus = x.clone();
        let mut minus = x.clone();
        plus[j] += h;
        minus[j] -= h;
        g[j] = (f(&plus) - f(&minus)) / (2.0 * h);
    }
    g
}

pub fn norm(v: &Array1<f64>) -> f64 {
    v.dot(v).sqrt()
}

/// `||a - b|| / max(||b||, floor)`.
pub fn rel_err(a: &Array1<f64>, b: &Array1<f64>, floor: f64) -> f64 {
    norm(&(a - b)) / norm(b).max(floor)
}
