//! Structural diagnostics of trained parameters: alignment of `v1` with
//! `v*`, rank-one structure of `W11` and `W22`, attention concentration on
//! the label-relevant group, growth rate of the alignment coefficient and
//! the two-sided output bounds.

use std::io::Write;

use nalgebra::{DMatrix, DVector, Dim, Matrix, RawStorage, U1};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::datagen::{GroupSparseTask, PositionalEncodingSet, Sample};
use crate::error::{Error, Result};
use crate::grad::grad_sample;
use crate::linalg::spectral_norm;
use crate::model::{forward, ModelParams};

/// `v1 = alpha v* + err` with `<err, v*> = 0`.
#[derive(Debug, Clone, PartialEq)]
pub struct AlphaDecomposition {
    pub alpha: f64,
    pub error: DVector<f64>,
    pub error_norm: f64,
}

/// Expects `v_star` to be a unit vector.
pub fn alpha_decomposition<S1, S2>(
    v1: &Matrix<f64, nalgebra::Dyn, U1, S1>,
    v_star: &Matrix<f64, nalgebra::Dyn, U1, S2>,
) -> AlphaDecomposition
where
    S1: RawStorage<f64, nalgebra::Dyn, U1>,
    S2: RawStorage<f64, nalgebra::Dyn, U1>,
{
    let v1 = DVector::from_fn(v1.nrows(), |i, _| v1[i]);
    let v_star = DVector::from_fn(v_star.nrows(), |i, _| v_star[i]);
    let alpha = v1.dot(&v_star);
    let error = v1 - &v_star * alpha;
    let error_norm = error.norm();
    AlphaDecomposition { alpha, error, error_norm }
}

/// Least-squares coefficient onto a rank-one direction plus the spectral
/// norm of what is left over.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Projection {
    pub beta: f64,
    pub resid_norm: f64,
}

fn to_owned<R: Dim, C: Dim, S: RawStorage<f64, R, C>>(m: &Matrix<f64, R, C, S>) -> DMatrix<f64> {
    DMatrix::from_fn(m.nrows(), m.ncols(), |r, c| m[(r, c)])
}

/// `beta1 = v*^T W11 v*`, residual `||W11 - beta1 v* v*^T||_2`.
pub fn w11_projection<R: Dim, C: Dim, S: RawStorage<f64, R, C>>(
    w11: &Matrix<f64, R, C, S>,
    v_star: &DVector<f64>,
) -> Projection {
    let w11 = to_owned(w11);
    let beta = v_star.dot(&(&w11 * v_star));
    let resid = w11 - v_star * v_star.transpose() * beta;
    Projection { beta, resid_norm: spectral_norm(&resid) }
}

/// Directions of the rank-one positional component:
/// `u = sum_{j != j*} (p_{j*} - p_j)`, `q = sum_j p_j`.
#[derive(Debug, Clone, PartialEq)]
pub struct ProjectionBasis {
    pub u: DVector<f64>,
    pub q: DVector<f64>,
}

impl ProjectionBasis {
    pub fn new(encodings: &PositionalEncodingSet, j_star: usize) -> Result<Self> {
        let groups = encodings.groups();
        if groups < 2 {
            return Err(Error::InvalidArgument("positional projection needs D >= 2".into()));
        }
        if j_star == 0 || j_star > groups {
            return Err(Error::InvalidArgument(format!("j_star = {j_star} outside 1..={groups}")));
        }
        let p = encodings.matrix();
        let q = p.column_sum();
        let u = p.column(j_star - 1) * groups as f64 - &q;
        Ok(Self { u, q })
    }
}

/// `beta2 = <W22, u q^T>_F / (|u|^2 |q|^2)`, residual `||W22 - beta2 u q^T||_2`.
pub fn w22_projection<R: Dim, C: Dim, S: RawStorage<f64, R, C>>(
    w22: &Matrix<f64, R, C, S>,
    basis: &ProjectionBasis,
) -> Projection {
    let w22 = to_owned(w22);
    let direction = &basis.u * basis.q.transpose();
    let beta = w22.dot(&direction) / (basis.u.norm_squared() * basis.q.norm_squared());
    let resid = w22 - direction * beta;
    Projection { beta, resid_norm: spectral_norm(&resid) }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Concentration {
    /// `min_j S[j*, j]`
    pub min_jstar: f64,
    /// `max_{j' != j*, j} S[j', j]`
    pub max_offtarget: f64,
}

pub fn attention_concentration(scores: &DMatrix<f64>, j_star: usize) -> Concentration {
    let target = j_star - 1;
    let min_jstar = scores.row(target).min();
    let mut max_offtarget = 0.0f64;
    for (r, row) in scores.row_iter().enumerate() {
        if r != target {
            max_offtarget = max_offtarget.max(row.max());
        }
    }
    Concentration { min_jstar, max_offtarget }
}

/// Least-squares slope of `log alpha` against `log t`.
pub fn growth_fit(points: &[(f64, f64)]) -> Result<f64> {
    if points.len() < 10 {
        return Err(Error::InvalidArgument(format!(
            "growth fit needs at least 10 points, got {}",
            points.len()
        )));
    }
    if let Some(&(t, a)) = points.iter().find(|&&(t, a)| t.is_nan() || a.is_nan() || t <= 0.0 || a <= 0.0) {
        return Err(Error::InvalidArgument(format!(
            "growth fit needs positive t and alpha, got ({t}, {a})"
        )));
    }
    let (t_min, t_max) = points
        .iter()
        .fold((f64::INFINITY, 0.0f64), |(lo, hi), &(t, _)| (lo.min(t), hi.max(t)));
    if t_max < 10.0 * t_min {
        return Err(Error::InvalidArgument(format!(
            "growth fit window [{t_min}, {t_max}] spans less than a decade"
        )));
    }
    let n = points.len() as f64;
    let (sx, sy) = points
        .iter()
        .fold((0.0, 0.0), |(sx, sy), &(t, a)| (sx + t.ln(), sy + a.ln()));
    let (mx, my) = (sx / n, sy / n);
    let (mut sxy, mut sxx) = (0.0, 0.0);
    for &(t, a) in points {
        let dx = t.ln() - mx;
        sxy += dx * (a.ln() - my);
        sxx += dx * dx;
    }
    Ok(sxy / sxx)
}

/// [`growth_fit`] restricted to `t_lo <= t <= t_hi`.
pub fn growth_fit_window(points: &[(f64, f64)], t_lo: f64, t_hi: f64) -> Result<f64> {
    let window: Vec<_> = points.iter().copied().filter(|&(t, _)| t >= t_lo && t <= t_hi).collect();
    growth_fit(&window)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SandwichOutcome {
    Pass,
    Fail,
    /// Attention not concentrated for this sample; excluded from pass rates.
    NotApplicable,
}

/// Two-sided output bound for a concentrated sample:
/// `(D alpha / 2) a - 1 <= y f <= D alpha a + 1` with `a = y <v*, x_{j*}>`.
/// Concentrated means `S[j*, j] >= 1 - 1/D` for every `j`.
pub fn sandwich_check(
    sample: &Sample,
    params: &ModelParams,
    v_star: &DVector<f64>,
    j_star: usize,
    alpha: f64,
) -> Result<SandwichOutcome> {
    let out = forward(sample.z(), params)?;
    let groups = sample.groups() as f64;
    let threshold = 1.0 - 1.0 / groups;
    if out.scores.row(j_star - 1).iter().any(|&s| s < threshold) {
        return Ok(SandwichOutcome::NotApplicable);
    }
    let y = sample.y();
    let a = y * sample.group(j_star).dot(v_star);
    let yf = y * out.output;
    let lower = groups * alpha / 2.0 * a - 1.0;
    let upper = groups * alpha * a + 1.0;
    Ok(if lower <= yf && yf <= upper { SandwichOutcome::Pass } else { SandwichOutcome::Fail })
}

/// Unconditional lower bound
/// `y f >= -D |alpha| sqrt(sum_j <v*, x_j>^2) - D |err| sqrt(sum_j <e, x_j>^2)`
/// with `e = err / |err|`.
pub fn cauchy_schwarz_lower_bound(
    sample: &Sample,
    params: &ModelParams,
    v_star: &DVector<f64>,
) -> Result<bool> {
    let out = forward(sample.z(), params)?;
    let decomposition = alpha_decomposition(&params.v1(), v_star);
    let groups = sample.groups() as f64;
    let x = sample.features();
    let along: f64 = x.tr_mul(v_star).norm();
    let across = if decomposition.error_norm > 0.0 {
        x.tr_mul(&(&decomposition.error / decomposition.error_norm)).norm()
    } else {
        0.0
    };
    let bound = -groups * decomposition.alpha.abs() * along - groups * decomposition.error_norm * across;
    Ok(sample.y() * out.output >= bound)
}

/// Monte-Carlo estimate of `-grad_{v1} L` at zero parameters against its
/// closed form `sigma_x / sqrt(2 pi) v*`.
#[derive(Debug, Clone, PartialEq)]
pub struct FirstStepEstimate {
    pub estimate: DVector<f64>,
    pub target: DVector<f64>,
    pub std_err: DVector<f64>,
    pub z_scores: DVector<f64>,
    pub samples: usize,
}

pub fn first_step_target(task: &GroupSparseTask) -> DVector<f64> {
    task.v_star() * (task.sigma_x() / (2.0 * std::f64::consts::PI).sqrt())
}

pub fn first_step_oracle<R: Rng + ?Sized>(
    task: &GroupSparseTask,
    n: usize,
    rng: &mut R,
) -> Result<FirstStepEstimate> {
    if n < 1000 {
        return Err(Error::InvalidArgument(format!("first-step oracle needs N >= 1000, got {n}")));
    }
    let d = task.d();
    let params = ModelParams::zeros(d, task.groups());
    let mut mean = DVector::zeros(d);
    let mut m2 = DVector::zeros(d);
    for i in 0..n {
        let s = task.sample(rng);
        let g = grad_sample(s.z(), s.y(), &params)?;
        let value = -g.gv.rows(0, d);
        // Welford update
        let delta = &value - &mean;
        mean += &delta / (i + 1) as f64;
        m2 += delta.component_mul(&(value - &mean));
    }
    let std_err = m2.map(|s| (s / (n - 1) as f64 / n as f64).sqrt());
    let target = first_step_target(task);
    let z_scores = (&mean - &target).component_div(&std_err);
    Ok(FirstStepEstimate { estimate: mean, target, std_err, z_scores, samples: n })
}

/// Mean of the attention matrices over the samples.
pub fn mean_attention(params: &ModelParams, samples: &[Sample]) -> Result<DMatrix<f64>> {
    if samples.is_empty() {
        return Err(Error::Empty("mean attention over no samples"));
    }
    let g = params.groups();
    let mut total = DMatrix::zeros(g, g);
    for s in samples {
        total += forward(s.z(), params)?.scores;
    }
    Ok(total / samples.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ZeroBlockNorms {
    pub norm_v2: f64,
    pub norm_w12: f64,
    pub norm_w21: f64,
}

impl ZeroBlockNorms {
    pub fn of(params: &ModelParams) -> Self {
        Self {
            norm_v2: params.v2().norm(),
            norm_w12: params.w12().norm(),
            norm_w21: params.w21().norm(),
        }
    }

    pub fn max(&self) -> f64 {
        self.norm_v2.max(self.norm_w12).max(self.norm_w21)
    }
}

/// Snapshot of every structural quantity for one parameter set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TheoryReport {
    pub d: usize,
    pub groups: usize,
    pub j_star: usize,
    pub prop1: ZeroBlockNorms,
    pub alpha: f64,
    pub v1_err_norm: f64,
    pub cos_sim: f64,
    pub beta1: f64,
    pub w11_resid: f64,
    pub beta2: Option<f64>,
    /// `beta2 * D^2`
    pub beta2_scaled: Option<f64>,
    pub w22_resid: Option<f64>,
    pub attn_min_jstar: f64,
    pub attn_max_offtarget: f64,
    pub growth_slope: Option<f64>,
    pub sandwich_pass_rate: Option<f64>,
    pub sandwich_applicable: usize,
    pub cauchy_schwarz_pass_rate: f64,
    pub eval_samples: usize,
}

/// Cosine of the angle between `a` and `b`; zero when either vanishes.
pub fn cosine(a: &DVector<f64>, b: &DVector<f64>) -> f64 {
    let denom = a.norm() * b.norm();
    if denom == 0.0 {
        0.0
    } else {
        a.dot(b) / denom
    }
}

/// Build the report for `params` on held-out samples drawn from `task`.
/// Returns it together with the mean attention matrix.
pub fn theory_report(
    params: &ModelParams,
    task: &GroupSparseTask,
    eval_samples: &[Sample],
    growth_slope: Option<f64>,
) -> Result<(TheoryReport, DMatrix<f64>)> {
    if params.feature_dim() != task.d() || params.groups() != task.groups() {
        return Err(Error::DimensionMismatch(format!(
            "parameters are (d, D) = ({}, {}), task is ({}, {})",
            params.feature_dim(),
            params.groups(),
            task.d(),
            task.groups()
        )));
    }
    let v_star = task.v_star();
    let j_star = task.j_star();
    let decomposition = alpha_decomposition(&params.v1(), v_star);
    let w11 = w11_projection(&params.w11(), v_star);
    let w22 = match ProjectionBasis::new(task.encodings(), j_star) {
        Ok(basis) => Some(w22_projection(&params.w22(), &basis)),
        Err(_) => None,
    };
    let attention = mean_attention(params, eval_samples)?;
    let concentration = attention_concentration(&attention, j_star);

    let (mut applicable, mut passed, mut cs_passed) = (0usize, 0usize, 0usize);
    for s in eval_samples {
        match sandwich_check(s, params, v_star, j_star, decomposition.alpha)? {
            SandwichOutcome::Pass => {
                applicable += 1;
                passed += 1;
            }
            SandwichOutcome::Fail => applicable += 1,
            SandwichOutcome::NotApplicable => {}
        }
        if cauchy_schwarz_lower_bound(s, params, v_star)? {
            cs_passed += 1;
        }
    }
    let groups = task.groups();
    let report = TheoryReport {
        d: task.d(),
        groups,
        j_star,
        prop1: ZeroBlockNorms::of(params),
        alpha: decomposition.alpha,
        v1_err_norm: decomposition.error_norm,
        cos_sim: cosine(&params.v1().into_owned(), v_star),
        beta1: w11.beta,
        w11_resid: w11.resid_norm,
        beta2: w22.map(|p| p.beta),
        beta2_scaled: w22.map(|p| p.beta * (groups * groups) as f64),
        w22_resid: w22.map(|p| p.resid_norm),
        attn_min_jstar: concentration.min_jstar,
        attn_max_offtarget: concentration.max_offtarget,
        growth_slope,
        sandwich_pass_rate: (applicable > 0).then(|| passed as f64 / applicable as f64),
        sandwich_applicable: applicable,
        cauchy_schwarz_pass_rate: cs_passed as f64 / eval_samples.len() as f64,
        eval_samples: eval_samples.len(),
    };
    Ok((report, attention))
}

/// `D x D` grid, one CSV row per matrix row, no header.
pub fn write_heatmap_csv<W: Write>(grid: &DMatrix<f64>, writer: W) -> Result<()> {
    let mut out = csv::WriterBuilder::new().has_headers(false).from_writer(writer);
    for row in grid.row_iter() {
        out.write_record(row.iter().map(|v| format!("{v}")))?;
    }
    out.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::make_positional_encodings;
    use crate::rng::SeedTree;
    use rand::Rng;

    fn unit(v: Vec<f64>) -> DVector<f64> {
        DVector::from_vec(v).normalize()
    }

    // Golden-section search for the minimizer of a unimodal function.
    fn golden_min(f: impl Fn(f64) -> f64, mut lo: f64, mut hi: f64) -> f64 {
        let ratio = (5f64.sqrt() - 1.0) / 2.0;
        for _ in 0..200 {
            let a = hi - ratio * (hi - lo);
            let b = lo + ratio * (hi - lo);
            if f(a) < f(b) {
                hi = b;
            } else {
                lo = a;
            }
        }
        (lo + hi) / 2.0
    }

    #[test]
    fn alpha_of_scaled_and_orthogonal_vectors() {
        let v_star = unit(vec![1.0, 2.0, -2.0]);
        let dec = alpha_decomposition(&(&v_star * 3.0), &v_star);
        assert!((dec.alpha - 3.0).abs() < 1e-12 && dec.error_norm < 1e-12);

        let perp = unit(vec![2.0, -1.0, 0.0]) * 2.0;
        let dec = alpha_decomposition(&perp, &v_star);
        assert!(dec.alpha.abs() < 1e-12 && (dec.error_norm - 2.0).abs() < 1e-12);
    }

    #[test]
    fn alpha_reconstructs_v1() {
        let mut rng = SeedTree::new(1).stream("test");
        for _ in 0..50 {
            let v_star = crate::datagen::random_unit_vector(5, &mut rng);
            let v1 = DVector::from_fn(5, |_, _| rng.random_range(-3.0..3.0));
            let dec = alpha_decomposition(&v1, &v_star);
            let rebuilt = &v_star * dec.alpha + &dec.error;
            assert!((rebuilt - &v1).norm() <= 1e-12);
            assert!(dec.error.dot(&v_star).abs() <= 1e-12 * v1.norm());
        }
    }

    #[test]
    fn w11_projection_cases() {
        let v_star = unit(vec![0.6, 0.8]);
        let p = w11_projection(&(&v_star * v_star.transpose() * 3.0), &v_star);
        assert!((p.beta - 3.0).abs() < 1e-12 && p.resid_norm < 1e-9);
        let p = w11_projection(&DMatrix::<f64>::identity(2, 2), &v_star);
        assert!((p.beta - 1.0).abs() < 1e-12 && (p.resid_norm - 1.0).abs() < 1e-9);
    }

    #[test]
    fn w11_beta_minimizes_frobenius_residual() {
        let mut rng = SeedTree::new(2).stream("test");
        for _ in 0..10 {
            let v_star = crate::datagen::random_unit_vector(4, &mut rng);
            let a = DMatrix::from_fn(4, 4, |_, _| rng.random_range(-1.0..1.0));
            let w11 = &a + a.transpose();
            let dir = &v_star * v_star.transpose();
            let resid = |b: f64| (&w11 - &dir * b).norm();
            let best = golden_min(resid, -20.0, 20.0);
            let beta = w11_projection(&w11, &v_star).beta;
            assert!((beta - best).abs() < 1e-6, "{beta} vs {best}");
            assert!(resid(beta + 1e-3) > resid(beta) && resid(beta - 1e-3) > resid(beta));
        }
    }

    #[test]
    fn w22_projection_cases() {
        let pe = make_positional_encodings(5).unwrap();
        let basis = ProjectionBasis::new(&pe, 2).unwrap();
        let w22 = &basis.u * basis.q.transpose() * 5.0;
        let p = w22_projection(&w22, &basis);
        assert!((p.beta - 5.0).abs() < 1e-12 && p.resid_norm < 1e-8);

        // orthogonal in the Frobenius sense: a ⊥ u gives <a q^T, u q^T> = 0
        let mut a = DVector::from_fn(5, |i, _| (i as f64 + 1.0).sin());
        a -= &basis.u * (a.dot(&basis.u) / basis.u.norm_squared());
        let p = w22_projection(&(a * basis.q.transpose()), &basis);
        assert!(p.beta.abs() < 1e-12);
    }

    #[test]
    fn w22_beta_minimizes_frobenius_residual() {
        let mut rng = SeedTree::new(3).stream("test");
        let pe = make_positional_encodings(6).unwrap();
        let basis = ProjectionBasis::new(&pe, 2).unwrap();
        let dir = &basis.u * basis.q.transpose();
        for _ in 0..10 {
            let w22 = DMatrix::from_fn(6, 6, |_, _| rng.random_range(-1.0..1.0)) + &dir * 0.01;
            let resid = |b: f64| (&w22 - &dir * b).norm();
            let best = golden_min(resid, -1.0, 1.0);
            let beta = w22_projection(&w22, &basis).beta;
            assert!((beta - best).abs() < 1e-7, "{beta} vs {best}");
            assert!(resid(beta + 1e-3) > resid(beta) && resid(beta - 1e-3) > resid(beta));
        }
    }

    #[test]
    fn basis_requires_two_groups() {
        let pe = make_positional_encodings(1).unwrap();
        assert!(ProjectionBasis::new(&pe, 1).is_err());
        let pe = make_positional_encodings(4).unwrap();
        let b = ProjectionBasis::new(&pe, 3).unwrap();
        assert!(b.u.norm() > 0.0 && b.q.norm() > 0.0);
    }

    #[test]
    fn concentration_extremes() {
        let mut one_hot = DMatrix::zeros(4, 4);
        one_hot.row_mut(1).fill(1.0);
        let c = attention_concentration(&one_hot, 2);
        assert_eq!((c.min_jstar, c.max_offtarget), (1.0, 0.0));
        let uniform = DMatrix::from_element(4, 4, 0.25);
        let c = attention_concentration(&uniform, 2);
        assert_eq!((c.min_jstar, c.max_offtarget), (0.25, 0.25));
    }

    #[test]
    fn growth_fit_power_laws() {
        let cube: Vec<_> = (1..=100).map(|i| {
            let t = 10.0 * i as f64;
            (t, t.cbrt())
        }).collect();
        assert!((growth_fit(&cube).unwrap() - 1.0 / 3.0).abs() < 1e-6);
        let flat: Vec<_> = (1..=20).map(|i| (i as f64, 4.2)).collect();
        assert!(growth_fit(&flat).unwrap().abs() < 1e-12);
    }

    #[test]
    fn growth_fit_rejects_bad_windows() {
        let mut pts: Vec<_> = (1..=20).map(|i| (i as f64, i as f64)).collect();
        assert!(growth_fit(&pts[..5]).is_err());
        pts[3].1 = -1.0;
        assert!(growth_fit(&pts).is_err());
        let narrow: Vec<_> = (100..120).map(|i| (i as f64, 1.0)).collect();
        assert!(growth_fit(&narrow).is_err());
        let wide: Vec<_> = (1..=1000).map(|i| (i as f64, (i as f64).sqrt())).collect();
        let slope = growth_fit_window(&wide, 100.0, 1000.0).unwrap();
        assert!((slope - 0.5).abs() < 1e-9);
    }

    fn concentrated_params(d: usize, groups: usize, j_star: usize, v_star: &DVector<f64>, alpha: f64) -> ModelParams {
        let pe = make_positional_encodings(groups).unwrap();
        let mut params = ModelParams::zeros(d, groups);
        params.v1_mut().copy_from(&(v_star * alpha));
        // W22 = c * p_{j*} q^T / |p|^2 |q|^2-ish: logits p_{j'}^T W22 p_j peak at j' = j*
        let pj = pe.column(j_star).into_owned();
        let w22 = &pj * pe.matrix().column_sum().transpose() * 200.0;
        params.w22_mut().copy_from(&w22);
        params
    }

    #[test]
    fn sandwich_in_the_one_hot_limit() {
        let mut rng = SeedTree::new(4).stream("test");
        let task = GroupSparseTask::random(3, 5, 2, 0.25, &mut rng).unwrap();
        let alpha = 2.0;
        let params = concentrated_params(3, 5, 2, task.v_star(), alpha);
        for s in task.sample_many(200, &mut rng) {
            let out = forward(s.z(), &params).unwrap();
            assert!(out.scores.row(1).iter().all(|&x| x > 1.0 - 1e-12));
            let a = s.y() * s.group(2).dot(task.v_star());
            assert!((s.y() * out.output - 5.0 * alpha * a).abs() < 1e-9);
            let outcome = sandwich_check(&s, &params, task.v_star(), 2, alpha).unwrap();
            assert_eq!(outcome, SandwichOutcome::Pass);
            assert!(cauchy_schwarz_lower_bound(&s, &params, task.v_star()).unwrap());
        }
    }

    #[test]
    fn sandwich_not_applicable_without_concentration() {
        let mut rng = SeedTree::new(5).stream("test");
        let task = GroupSparseTask::random(3, 5, 2, 0.25, &mut rng).unwrap();
        let params = ModelParams::zeros(3, 5);
        let s = task.sample(&mut rng);
        let outcome = sandwich_check(&s, &params, task.v_star(), 2, 1.0).unwrap();
        assert_eq!(outcome, SandwichOutcome::NotApplicable);
    }

    #[test]
    fn cauchy_schwarz_bound_holds_for_random_params() {
        let mut rng = SeedTree::new(6).stream("test");
        let task = GroupSparseTask::random(4, 6, 2, 0.25, &mut rng).unwrap();
        for _ in 0..20 {
            let mut params = ModelParams::zeros(4, 6);
            params.v1_mut().copy_from(&DVector::from_fn(4, |_, _| rng.random_range(-3.0..3.0)));
            params.w_mut().copy_from(&DMatrix::from_fn(10, 10, |_, _| rng.random_range(-2.0..2.0)));
            for s in task.sample_many(50, &mut rng) {
                assert!(cauchy_schwarz_lower_bound(&s, &params, task.v_star()).unwrap());
            }
        }
    }

    #[test]
    fn first_step_oracle_hits_closed_form() {
        let tree = SeedTree::new(7);
        let task = GroupSparseTask::random(4, 6, 2, 0.25, &mut tree.stream("v")).unwrap();
        let est = first_step_oracle(&task, 200_000, &mut tree.stream("mc")).unwrap();
        assert!(est.z_scores.iter().all(|z| z.abs() <= 3.0), "{:?}", est.z_scores);
        assert!((est.target.norm() - 0.25 / (2.0 * std::f64::consts::PI).sqrt()).abs() < 1e-15);
    }

    #[test]
    fn first_step_off_axis_coordinates_vanish() {
        let tree = SeedTree::new(8);
        let mut e1 = DVector::zeros(4);
        e1[0] = 1.0;
        let task = GroupSparseTask::new(6, 2, e1, 0.25).unwrap();
        let est = first_step_oracle(&task, 50_000, &mut tree.stream("mc")).unwrap();
        for k in 1..4 {
            assert!(est.estimate[k].abs() <= 3.0 * est.std_err[k], "coord {k}");
        }
        assert!(first_step_oracle(&task, 999, &mut tree.stream("mc")).is_err());
    }

    #[test]
    fn standard_error_shrinks_by_root_two() {
        let tree = SeedTree::new(9);
        let task = GroupSparseTask::random(3, 4, 1, 0.25, &mut tree.stream("v")).unwrap();
        let a = first_step_oracle(&task, 20_000, &mut tree.stream("a")).unwrap();
        let b = first_step_oracle(&task, 40_000, &mut tree.stream("b")).unwrap();
        for k in 0..3 {
            let ratio = a.std_err[k] / b.std_err[k];
            assert!((ratio - 2f64.sqrt()).abs() < 0.05, "ratio {ratio}");
        }
    }

    #[test]
    fn report_on_zero_params() {
        let tree = SeedTree::new(10);
        let task = GroupSparseTask::random(2, 4, 2, 0.25, &mut tree.stream("v")).unwrap();
        let samples = task.sample_many(50, &mut tree.stream("eval"));
        let (report, heat) = theory_report(&ModelParams::zeros(2, 4), &task, &samples, None).unwrap();
        assert!(heat.iter().all(|&x| (x - 0.25).abs() < 1e-15));
        assert_eq!(report.prop1.max(), 0.0);
        assert_eq!(report.sandwich_pass_rate, None);
        assert_eq!(report.sandwich_applicable, 0);
        let json = serde_json::to_string(&report).unwrap();
        assert!(json.contains("\"growth_slope\":null"));
    }

    #[test]
    fn heatmap_csv_shape() {
        let grid = DMatrix::from_row_slice(2, 2, &[0.5, 0.25, 0.5, 0.75]);
        let mut buf = Vec::new();
        write_heatmap_csv(&grid, &mut buf).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap(), "0.5,0.25\n0.5,0.75\n");
    }
}
