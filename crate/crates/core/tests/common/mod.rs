//! Brute-force oracles shared by the integration tests. Everything here is
//! written with explicit index loops so it shares no code path with the
//! library's matrix formulation.

#![allow(dead_code, clippy::needless_range_loop)]

use attnlab::datagen::Sample;
use attnlab::model::ModelParams;
use nalgebra::{DMatrix, DVector};

fn column(z: &DMatrix<f64>, j: usize) -> Vec<f64> {
    (0..z.nrows()).map(|r| z[(r, j)]).collect()
}

fn bilinear(a: &[f64], w: &DMatrix<f64>, b: &[f64]) -> f64 {
    let mut acc = 0.0;
    for r in 0..a.len() {
        for c in 0..b.len() {
            acc += a[r] * w[(r, c)] * b[c];
        }
    }
    acc
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// `S[j', j] = exp(z_{j'}^T W z_j) / sum_k exp(z_k^T W z_j)`.
pub fn scores(z: &DMatrix<f64>, w: &DMatrix<f64>) -> Vec<Vec<f64>> {
    let g = z.ncols();
    let cols: Vec<_> = (0..g).map(|j| column(z, j)).collect();
    let mut s = vec![vec![0.0; g]; g];
    for j in 0..g {
        let logits: Vec<f64> = (0..g).map(|k| bilinear(&cols[k], w, &cols[j])).collect();
        let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let total: f64 = logits.iter().map(|l| (l - max).exp()).sum();
        for jp in 0..g {
            s[jp][j] = (logits[jp] - max).exp() / total;
        }
    }
    s
}

/// `f = sum_j sum_{j'} (v^T z_{j'}) S[j', j]`.
pub fn output(z: &DMatrix<f64>, v: &DVector<f64>, w: &DMatrix<f64>) -> f64 {
    let g = z.ncols();
    let s = scores(z, w);
    let vv: Vec<f64> = v.iter().copied().collect();
    let mut f = 0.0;
    for j in 0..g {
        for jp in 0..g {
            f += dot(&vv, &column(z, jp)) * s[jp][j];
        }
    }
    f
}

pub fn loss(a: f64) -> f64 {
    (1.0 + (-a).exp()).ln()
}

pub fn loss_derivative(a: f64) -> f64 {
    -1.0 / (1.0 + a.exp())
}

pub fn dataset_loss(samples: &[Sample], v: &DVector<f64>, w: &DMatrix<f64>) -> f64 {
    samples.iter().map(|s| loss(s.y() * output(s.z(), v, w))).sum::<f64>() / samples.len() as f64
}

/// Per-sample gradient in the triple-sum form
/// `grad_W = l' y sum_j sum_{j'} (v^T z_{j'}) S[j', j] (z_{j'} - sum_k S[k, j] z_k) z_j^T`.
pub fn triple_sum_grad(z: &DMatrix<f64>, y: f64, v: &DVector<f64>, w: &DMatrix<f64>) -> (DVector<f64>, DMatrix<f64>) {
    let (m, g) = z.shape();
    let s = scores(z, w);
    let cols: Vec<_> = (0..g).map(|j| column(z, j)).collect();
    let vv: Vec<f64> = v.iter().copied().collect();
    let c = loss_derivative(y * output(z, v, w)) * y;
    let mut gv = DVector::zeros(m);
    let mut gw = DMatrix::zeros(m, m);
    for j in 0..g {
        let mut mean = vec![0.0; m];
        for k in 0..g {
            for r in 0..m {
                mean[r] += s[k][j] * cols[k][r];
            }
        }
        for jp in 0..g {
            let weight = dot(&vv, &cols[jp]) * s[jp][j];
            for r in 0..m {
                gv[r] += c * s[jp][j] * cols[jp][r];
                for q in 0..m {
                    gw[(r, q)] += c * weight * (cols[jp][r] - mean[r]) * cols[j][q];
                }
            }
        }
    }
    (gv, gw)
}

/// Central differences of [`dataset_loss`] with a fixed absolute step.
pub fn central_differences(samples: &[Sample], params: &ModelParams, h: f64) -> (DVector<f64>, DMatrix<f64>) {
    let mut v = params.v().clone();
    let mut w = params.w().clone();
    let m = v.len();
    let mut gv = DVector::zeros(m);
    let mut gw = DMatrix::zeros(m, m);
    for i in 0..m {
        let orig = v[i];
        v[i] = orig + h;
        let up = dataset_loss(samples, &v, &w);
        v[i] = orig - h;
        let down = dataset_loss(samples, &v, &w);
        v[i] = orig;
        gv[i] = (up - down) / (2.0 * h);
    }
    for r in 0..m {
        for c in 0..m {
            let orig = w[(r, c)];
            w[(r, c)] = orig + h;
            let up = dataset_loss(samples, &v, &w);
            w[(r, c)] = orig - h;
            let down = dataset_loss(samples, &v, &w);
            w[(r, c)] = orig;
            gw[(r, c)] = (up - down) / (2.0 * h);
        }
    }
    (gv, gw)
}

/// `||a - b|| / ||b||` over the concatenated `(v, W)` entries.
pub fn relative_error(a: (&DVector<f64>, &DMatrix<f64>), b: (&DVector<f64>, &DMatrix<f64>)) -> f64 {
    let diff = (a.0 - b.0).norm_squared() + (a.1 - b.1).norm_squared();
    let base = b.0.norm_squared() + b.1.norm_squared();
    (diff / base).sqrt()
}

/// Sine positional encoding entry `p_j[k]` with 1-based `j`, `k`.
pub fn sine_entry(k: usize, j: usize, groups: usize) -> f64 {
    (k as f64 * j as f64 * std::f64::consts::PI / (groups as f64 + 1.0)).sin()
}
