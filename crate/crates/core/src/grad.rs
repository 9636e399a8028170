//! Hand-derived gradients of the logistic loss with respect to `v` and `W`.
//!
//! Per sample, with `u = Z^T v`, `r = S 1_D`, `c = l'(y f) y` and
//! `M[k, j] = S[k, j] (u_k - sum_i u_i S[i, j])`:
//!
//! ```text
//! grad_v = c Z r
//! grad_W = c Z M Z^T
//! ```
//!
//! Batch gradients split `Z = [X; P]` and accumulate only the parts that
//! depend on the sample (`X r`, `r`, `M`, `X M`, `X M^T`, `X M X^T`). The
//! shared positional block `P` is applied once per batch. Accumulation uses
//! a fixed binary tree over sample indices whose left subtrees always have
//! power-of-two size, so adjacent antithetic partners `(2i, 2i + 1)` are
//! summed with each other before anything else and their odd terms cancel
//! exactly.

use nalgebra::{DMatrix, DMatrixView, DVector};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::datagen::{antithetic_expand, GroupSparseTask, Sample};
use crate::error::{Error, Result};
use crate::model::{
    forward, logistic_loss, logistic_loss_derivative, loss_on_dataset, softmax_columns,
    ModelParams,
};

/// Gradient with respect to `(v, W)`.
#[derive(Debug, Clone, PartialEq)]
pub struct GradPair {
    pub gv: DVector<f64>,
    pub gw: DMatrix<f64>,
}

impl GradPair {
    pub fn zeros(dim: usize) -> Self {
        Self { gv: DVector::zeros(dim), gw: DMatrix::zeros(dim, dim) }
    }

    /// Euclidean norm of the concatenated `(gv, vec(gW))`.
    pub fn norm(&self) -> f64 {
        (self.gv.norm_squared() + self.gw.norm_squared()).sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.gv.iter().chain(self.gw.iter()).all(|x| x.is_finite())
    }

    /// `||self - reference|| / (1 + ||self||)`.
    pub fn relative_error(&self, reference: &GradPair) -> f64 {
        let dv = (&self.gv - &reference.gv).norm_squared();
        let dw = (&self.gw - &reference.gw).norm_squared();
        (dv + dw).sqrt() / (1.0 + self.norm())
    }

    /// Largest absolute entrywise difference.
    pub fn max_abs_diff(&self, other: &GradPair) -> f64 {
        self.gv
            .iter()
            .zip(other.gv.iter())
            .chain(self.gw.iter().zip(other.gw.iter()))
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

/// Gradient of `l(y f(Z))` for one sample, in the factored form
/// `grad_W = Z (c M) Z^T`.
pub fn grad_sample(z: &DMatrix<f64>, y: f64, params: &ModelParams) -> Result<GradPair> {
    let out = forward(z, params)?;
    let s = &out.scores;
    let c = logistic_loss_derivative(y * out.output) * y;
    let u = z.tr_mul(params.v());
    let us = s.tr_mul(&u);
    let groups = s.ncols();
    let cm = DMatrix::from_fn(groups, groups, |k, j| c * s[(k, j)] * (u[k] - us[j]));
    let gv = z * (s.column_sum() * c);
    let gw = z * cm * z.transpose();
    let grad = GradPair { gv, gw };
    if !grad.is_finite() {
        return Err(Error::non_finite("per-sample gradient"));
    }
    Ok(grad)
}

/// How per-sample contributions are combined.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Reduction {
    /// Fixed binary tree over sample indices. Bitwise reproducible for any
    /// thread count.
    #[default]
    Tree,
    /// Work-stealing reduction; combination order depends on scheduling.
    Unordered,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BatchOptions {
    pub want_grad: bool,
    /// 1-based label-relevant group for attention statistics.
    pub j_star: Option<usize>,
    pub reduction: Reduction,
}

impl Default for BatchOptions {
    fn default() -> Self {
        Self { want_grad: true, j_star: None, reduction: Reduction::Tree }
    }
}

/// Loss, gradient and attention statistics of one pass over a batch.
#[derive(Debug, Clone)]
pub struct BatchEvaluation {
    pub grad: Option<GradPair>,
    pub loss: f64,
    /// Mean over samples and columns of `S[j*, j]`; NaN without `j_star`.
    pub attn_mean_jstar: f64,
    /// Minimum over samples and columns of `S[j*, j]`; NaN without `j_star`.
    pub attn_min_jstar: f64,
    pub max_abs_output: f64,
    pub count: usize,
}

const PARALLEL_CUTOFF: usize = 64;

struct BatchContext<'a> {
    d: usize,
    groups: usize,
    p: DMatrixView<'a, f64>,
    w11: DMatrix<f64>,
    w12p: DMatrix<f64>,
    ptw21: DMatrix<f64>,
    ptw22p: DMatrix<f64>,
    v1: DVector<f64>,
    ptv2: DVector<f64>,
    opts: BatchOptions,
}

#[derive(Debug, Clone)]
struct Accum {
    xr: DVector<f64>,
    r: DVector<f64>,
    m: DMatrix<f64>,
    xm: DMatrix<f64>,
    xmt: DMatrix<f64>,
    xmx: DMatrix<f64>,
    loss: f64,
    attn_sum: f64,
    attn_min: f64,
    max_abs_f: f64,
    count: usize,
}

impl Accum {
    fn merge(mut self, other: Accum) -> Accum {
        self.xr += other.xr;
        self.r += other.r;
        self.m += other.m;
        self.xm += other.xm;
        self.xmt += other.xmt;
        self.xmx += other.xmx;
        self.loss += other.loss;
        self.attn_sum += other.attn_sum;
        self.attn_min = self.attn_min.min(other.attn_min);
        self.max_abs_f = self.max_abs_f.max(other.max_abs_f);
        self.count += other.count;
        self
    }
}

impl<'a> BatchContext<'a> {
    fn new(params: &ModelParams, first: &'a Sample, opts: BatchOptions) -> Result<Self> {
        params.check_input(first.z())?;
        let (d, groups) = (params.feature_dim(), params.groups());
        if let Some(j) = opts.j_star {
            if j == 0 || j > groups {
                return Err(Error::InvalidArgument(format!("j_star = {j} outside 1..={groups}")));
            }
        }
        let p = first.z().rows(d, groups);
        let w12p = params.w12() * p;
        let ptw21 = p.tr_mul(&params.w21());
        let ptw22p = p.tr_mul(&(params.w22() * p));
        let ptv2 = p.tr_mul(&params.v2());
        Ok(Self {
            d,
            groups,
            p,
            w11: params.w11().into_owned(),
            w12p,
            ptw21,
            ptw22p,
            v1: params.v1().into_owned(),
            ptv2,
            opts,
        })
    }

    fn leaf(&self, sample: &Sample) -> Result<Accum> {
        let (d, g) = (self.d, self.groups);
        let z = sample.z();
        if z.shape() != (d + g, g) {
            return Err(Error::DimensionMismatch(format!("sample input is {:?}", z.shape())));
        }
        if z.rows(d, g) != self.p {
            return Err(Error::DimensionMismatch(
                "samples in a batch must share one positional block".into(),
            ));
        }
        let x = z.rows(0, d);

        // logits: X^T W11 X + X^T W12 P + P^T W21 X + P^T W22 P
        let w11x = &self.w11 * x;
        let mut s = DMatrix::zeros(g, g);
        s.gemm_tr(1.0, &x, &w11x, 0.0);
        s.gemm_tr(1.0, &x, &self.w12p, 1.0);
        s.gemm(1.0, &self.ptw21, &x, 1.0);
        s += &self.ptw22p;
        softmax_columns(&mut s)?;

        let mut u = self.ptv2.clone();
        u.gemv_tr(1.0, &x, &self.v1, 1.0);
        let r = s.column_sum();
        let f = u.dot(&r);
        if !f.is_finite() {
            return Err(Error::non_finite("model output"));
        }
        let y = sample.y();
        let margin = y * f;
        let loss = logistic_loss(margin);

        let (attn_sum, attn_min) = match self.opts.j_star {
            Some(j) => {
                let row = s.row(j - 1);
                (row.sum(), row.min())
            }
            None => (0.0, f64::INFINITY),
        };

        let mut acc = Accum {
            xr: DVector::zeros(d),
            r: DVector::zeros(g),
            m: DMatrix::zeros(g, g),
            xm: DMatrix::zeros(d, g),
            xmt: DMatrix::zeros(d, g),
            xmx: DMatrix::zeros(d, d),
            loss,
            attn_sum,
            attn_min,
            max_abs_f: f.abs(),
            count: 1,
        };
        if !self.opts.want_grad {
            return Ok(acc);
        }

        let c = logistic_loss_derivative(margin) * y;
        let us = s.tr_mul(&u);
        let cm = DMatrix::from_fn(g, g, |k, j| c * (s[(k, j)] * (u[k] - us[j])));
        acc.xr.gemv(c, &x, &r, 0.0);
        acc.r = r * c;
        acc.xm.gemm(1.0, &x, &cm, 0.0);
        acc.xmt.gemm(1.0, &x, &cm.transpose(), 0.0);
        acc.xmx.gemm(1.0, &acc.xm, &x.transpose(), 0.0);
        acc.m = cm;
        Ok(acc)
    }

    fn reduce_tree(&self, samples: &[Sample]) -> Result<Accum> {
        match samples.len() {
            0 => unreachable!("empty batches are rejected before reduction"),
            1 => self.leaf(&samples[0]),
            len => {
                // largest power of two strictly below len
                let split = 1usize << (usize::BITS - 1 - (len - 1).leading_zeros());
                let (left, right) = samples.split_at(split);
                let (a, b) = if len >= PARALLEL_CUTOFF {
                    rayon::join(|| self.reduce_tree(left), || self.reduce_tree(right))
                } else {
                    (self.reduce_tree(left), self.reduce_tree(right))
                };
                Ok(a?.merge(b?))
            }
        }
    }

    fn reduce_unordered(&self, samples: &[Sample]) -> Result<Accum> {
        use rayon::prelude::*;
        samples
            .par_iter()
            .map(|s| self.leaf(s))
            .reduce_with(|a, b| Ok(a?.merge(b?)))
            .expect("non-empty batch")
    }

    fn finish(&self, acc: Accum) -> BatchEvaluation {
        let n = acc.count as f64;
        let grad = self.opts.want_grad.then(|| {
            let (d, g) = (self.d, self.groups);
            let mut gv = DVector::zeros(d + g);
            gv.rows_mut(0, d).copy_from(&acc.xr);
            gv.rows_mut(d, g).copy_from(&(self.p * &acc.r));
            let mut gw = DMatrix::zeros(d + g, d + g);
            gw.view_mut((0, 0), (d, d)).copy_from(&acc.xmx);
            gw.view_mut((0, d), (d, g)).copy_from(&(&acc.xm * self.p.transpose()));
            gw.view_mut((d, 0), (g, d)).copy_from(&(self.p * acc.xmt.transpose()));
            gw.view_mut((d, d), (g, g)).copy_from(&(self.p * &acc.m * self.p.transpose()));
            GradPair { gv: gv / n, gw: gw / n }
        });
        let (attn_mean, attn_min) = if self.opts.j_star.is_some() {
            (acc.attn_sum / (n * self.groups as f64), acc.attn_min)
        } else {
            (f64::NAN, f64::NAN)
        };
        BatchEvaluation {
            grad,
            loss: acc.loss / n,
            attn_mean_jstar: attn_mean,
            attn_min_jstar: attn_min,
            max_abs_output: acc.max_abs_f,
            count: acc.count,
        }
    }
}

/// One pass over a batch producing mean loss, attention statistics and
/// (optionally) the mean gradient.
pub fn evaluate_batch(
    samples: &[Sample],
    params: &ModelParams,
    opts: BatchOptions,
) -> Result<BatchEvaluation> {
    let first = samples.first().ok_or(Error::Empty("gradient over an empty batch"))?;
    let ctx = BatchContext::new(params, first, opts)?;
    let acc = match opts.reduction {
        Reduction::Tree => ctx.reduce_tree(samples)?,
        Reduction::Unordered => ctx.reduce_unordered(samples)?,
    };
    let eval = ctx.finish(acc);
    if let Some(g) = &eval.grad {
        if !g.is_finite() {
            return Err(Error::non_finite("batch gradient"));
        }
    }
    Ok(eval)
}

/// Mean gradient over the batch with the default deterministic reduction.
pub fn grad_batch(samples: &[Sample], params: &ModelParams) -> Result<GradPair> {
    let eval = evaluate_batch(samples, params, BatchOptions::default())?;
    Ok(eval.grad.expect("gradient requested"))
}

/// Fresh population batch of `b` draws, interleaved with antithetic partners
/// when requested.
pub fn draw_population_batch<R: Rng + ?Sized>(
    task: &GroupSparseTask,
    b: usize,
    antithetic: bool,
    rng: &mut R,
) -> Vec<Sample> {
    let base = task.sample_many(b, rng);
    if antithetic {
        antithetic_expand(&base)
    } else {
        base
    }
}

/// Monte-Carlo estimate of the population gradient from `b` fresh draws
/// (`2b` samples with antithetic pairing).
pub fn population_grad_mc<R: Rng + ?Sized>(
    task: &GroupSparseTask,
    params: &ModelParams,
    b: usize,
    antithetic: bool,
    rng: &mut R,
) -> Result<GradPair> {
    if b == 0 {
        return Err(Error::InvalidArgument("Monte-Carlo batch size must be >= 1".into()));
    }
    let batch = draw_population_batch(task, b, antithetic, rng);
    grad_batch(&batch, params)
}

/// Central finite differences of [`loss_on_dataset`], one coordinate at a
/// time, with step `h (1 + |theta_i|)`.
pub fn fd_grad(samples: &[Sample], params: &ModelParams, h: f64) -> Result<GradPair> {
    if !(h > 0.0 && h.is_finite()) {
        return Err(Error::InvalidArgument(format!("finite-difference step must be positive, got {h}")));
    }
    if samples.is_empty() {
        return Err(Error::Empty("finite differences over an empty dataset"));
    }
    let m = params.dim();
    let mut out = GradPair::zeros(m);
    let mut probe = params.clone();
    for i in 0..m {
        let orig = params.v()[i];
        let step = h * (1.0 + orig.abs());
        probe.v_mut()[i] = orig + step;
        let plus = loss_on_dataset(&probe, samples)?;
        probe.v_mut()[i] = orig - step;
        let minus = loss_on_dataset(&probe, samples)?;
        probe.v_mut()[i] = orig;
        out.gv[i] = (plus - minus) / (2.0 * step);
    }
    for c in 0..m {
        for r in 0..m {
            let orig = params.w()[(r, c)];
            let step = h * (1.0 + orig.abs());
            probe.w_mut()[(r, c)] = orig + step;
            let plus = loss_on_dataset(&probe, samples)?;
            probe.w_mut()[(r, c)] = orig - step;
            let minus = loss_on_dataset(&probe, samples)?;
            probe.w_mut()[(r, c)] = orig;
            out.gw[(r, c)] = (plus - minus) / (2.0 * step);
        }
    }
    Ok(out)
}
