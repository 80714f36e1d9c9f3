//! Scalar kernels shared by the graph ops and the cached inference path.
//!
//! Every reduction accumulates in `f64` with a fixed loop order.

use std::f64::consts::{FRAC_1_SQRT_2, PI};

pub const LAYER_NORM_EPS: f64 = 1e-5;

/// `c[m×n] = a[m×k] · b[k×n]`
pub fn matmul(a: &[f32], b: &[f32], m: usize, k: usize, n: usize) -> Vec<f32> {
    let mut out = vec![0.0f32; m * n];
    let mut acc = vec![0.0f64; n];
    for i in 0..m {
        acc.iter_mut().for_each(|v| *v = 0.0);
        let a_row = &a[i * k..(i + 1) * k];
        for (p, &a_ip) in a_row.iter().enumerate() {
            let a_ip = f64::from(a_ip);
            let b_row = &b[p * n..(p + 1) * n];
            for (slot, &b_pj) in acc.iter_mut().zip(b_row) {
                *slot += a_ip * f64::from(b_pj);
            }
        }
        for (o, &v) in out[i * n..(i + 1) * n].iter_mut().zip(&acc) {
            *o = v as f32;
        }
    }
    out
}

/// `c[k×n] = aᵀ · b` for `a[m×k]`, `b[m×n]`.
pub fn matmul_tn(a: &[f32], b: &[f32], m: usize, k: usize, n: usize) -> Vec<f32> {
    let mut acc = vec![0.0f64; k * n];
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        let b_row = &b[i * n..(i + 1) * n];
        for (p, &a_ip) in a_row.iter().enumerate() {
            let a_ip = f64::from(a_ip);
            for (slot, &b_ij) in acc[p * n..(p + 1) * n].iter_mut().zip(b_row) {
                *slot += a_ip * f64::from(b_ij);
            }
        }
    }
    acc.into_iter().map(|v| v as f32).collect()
}

/// `c[m×n] = a · bᵀ` for `a[m×k]`, `b[n×k]`.
pub fn matmul_nt(a: &[f32], b: &[f32], m: usize, k: usize, n: usize) -> Vec<f32> {
    matmul(a, &transpose(b, n, k), m, k, n)
}

/// Transpose of a `rows×cols` matrix.
pub fn transpose(a: &[f32], rows: usize, cols: usize) -> Vec<f32> {
    let mut out = vec![0.0f32; rows * cols];
    for i in 0..rows {
        for j in 0..cols {
            out[j * rows + i] = a[i * cols + j];
        }
    }
    out
}

/// `y = W·x` for `W[rows×cols]`.
pub fn matvec(w: &[f32], x: &[f32], rows: usize, cols: usize) -> Vec<f32> {
    (0..rows)
        .map(|i| dot(&w[i * cols..(i + 1) * cols], x) as f32)
        .collect()
}

pub fn dot(a: &[f32], b: &[f32]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(&x, &y)| f64::from(x) * f64::from(y))
        .sum()
}

pub fn gelu(x: f32) -> f32 {
    let x = f64::from(x);
    (0.5 * x * (1.0 + libm::erf(x * FRAC_1_SQRT_2))) as f32
}

/// d/dx of the exact GELU: `Φ(x) + x·φ(x)`.
pub fn gelu_grad(x: f32) -> f32 {
    let x = f64::from(x);
    let cdf = 0.5 * (1.0 + libm::erf(x * FRAC_1_SQRT_2));
    let pdf = (-0.5 * x * x).exp() / (2.0 * PI).sqrt();
    (cdf + x * pdf) as f32
}

/// Normalizes one row in place and returns `(x̂, 1/σ)`.
pub fn layer_norm_row(x: &[f32]) -> (Vec<f32>, f64) {
    let d = x.len() as f64;
    let mean = x.iter().map(|&v| f64::from(v)).sum::<f64>() / d;
    let var = x
        .iter()
        .map(|&v| {
            let c = f64::from(v) - mean;
            c * c
        })
        .sum::<f64>()
        / d;
    let inv_std = 1.0 / (var + LAYER_NORM_EPS).sqrt();
    let xhat = x
        .iter()
        .map(|&v| ((f64::from(v) - mean) * inv_std) as f32)
        .collect();
    (xhat, inv_std)
}

/// Softmax over `row[..len]`; entries past `len` are set to zero.
pub fn softmax_prefix(row: &mut [f32], len: usize) {
    let max = row[..len]
        .iter()
        .fold(f32::NEG_INFINITY, |m, &v| m.max(v));
    let mut denom = 0.0f64;
    let exps: Vec<f64> = row[..len]
        .iter()
        .map(|&v| {
            let e = f64::from(v - max).exp();
            denom += e;
            e
        })
        .collect();
    for (slot, e) in row[..len].iter_mut().zip(exps) {
        *slot = (e / denom) as f32;
    }
    row[len..].iter_mut().for_each(|v| *v = 0.0);
}

/// `log Σ exp(row)` with max subtraction.
pub fn log_sum_exp(row: &[f32]) -> f64 {
    let max = row.iter().fold(f32::NEG_INFINITY, |m, &v| m.max(v));
    let max = f64::from(max);
    let s: f64 = row.iter().map(|&v| (f64::from(v) - max).exp()).sum();
    max + s.ln()
}
