//! Group-sparse data: positional encodings, pretraining and downstream
//! sample generators, antithetic pairing and CSV export.

use std::io::Write;

use nalgebra::{DMatrix, DMatrixView, DVector, DVectorView};
use rand::Rng;
use rand_distr::{Distribution, Normal, StandardNormal, Uniform};

use crate::error::{Error, Result};

/// Sine-basis positional encodings. Column `j` (1-based) holds
/// `sin(k j pi / (D + 1))` for `k = 1..=D`.
#[derive(Debug, Clone, PartialEq)]
pub struct PositionalEncodingSet {
    p: DMatrix<f64>,
}

impl PositionalEncodingSet {
    pub fn groups(&self) -> usize {
        self.p.ncols()
    }

    /// The `D x D` matrix `P = [p_1, ..., p_D]`.
    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.p
    }

    /// Column `p_j` for a 1-based group index.
    pub fn column(&self, j: usize) -> DVectorView<'_, f64> {
        self.p.column(j - 1)
    }

    /// Squared norm shared by every column.
    pub fn squared_norm(&self) -> f64 {
        (self.groups() as f64 + 1.0) / 2.0
    }
}

pub fn make_positional_encodings(groups: usize) -> Result<PositionalEncodingSet> {
    if groups == 0 {
        return Err(Error::InvalidArgument("positional encodings need D >= 1".into()));
    }
    let step = std::f64::consts::PI / (groups as f64 + 1.0);
    let p = DMatrix::from_fn(groups, groups, |k, j| {
        let (k, j) = ((k + 1) as f64, (j + 1) as f64);
        (k * j * step).sin()
    });
    Ok(PositionalEncodingSet { p })
}

/// `sign` with the tie at zero resolved to `+1`.
#[inline]
pub fn label_sign(score: f64) -> f64 {
    if score >= 0.0 {
        1.0
    } else {
        -1.0
    }
}

/// One labelled input. `z` stacks the `d x D` features above the `D x D`
/// positional block, column `j` being `[x_j; p_j]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    z: DMatrix<f64>,
    y: f64,
    d: usize,
}

impl Sample {
    pub fn new(features: &DMatrix<f64>, y: f64, encodings: &PositionalEncodingSet) -> Result<Self> {
        if features.ncols() != encodings.groups() {
            return Err(Error::DimensionMismatch(format!(
                "features have {} groups, encodings {}",
                features.ncols(),
                encodings.groups()
            )));
        }
        if y != 1.0 && y != -1.0 {
            return Err(Error::InvalidArgument(format!("label must be +1 or -1, got {y}")));
        }
        Ok(Self { z: assemble_input(features, encodings), y, d: features.nrows() })
    }

    pub fn z(&self) -> &DMatrix<f64> {
        &self.z
    }

    pub fn y(&self) -> f64 {
        self.y
    }

    pub fn feature_dim(&self) -> usize {
        self.d
    }

    pub fn groups(&self) -> usize {
        self.z.ncols()
    }

    /// The `d x D` feature block `X`.
    pub fn features(&self) -> DMatrixView<'_, f64> {
        self.z.rows(0, self.d)
    }

    /// Feature vector of group `j` (1-based).
    pub fn group(&self, j: usize) -> DVectorView<'_, f64> {
        self.z.generic_view((0, j - 1), (nalgebra::Dyn(self.d), nalgebra::U1))
    }

    /// The `(-X, -y)` partner sharing this sample's positional block.
    pub fn antithetic(&self) -> Self {
        let mut z = self.z.clone();
        z.rows_mut(0, self.d).neg_mut();
        Self { z, y: -self.y, d: self.d }
    }
}

/// Stack features over positional encodings column by column.
pub fn assemble_input(features: &DMatrix<f64>, encodings: &PositionalEncodingSet) -> DMatrix<f64> {
    let (d, groups) = features.shape();
    let mut z = DMatrix::zeros(d + groups, groups);
    z.rows_mut(0, d).copy_from(features);
    z.rows_mut(d, groups).copy_from(encodings.matrix());
    z
}

fn check_unit(v: &DVector<f64>, what: &str) -> Result<()> {
    let norm = v.norm();
    if (norm - 1.0).abs() > 1e-12 {
        return Err(Error::InvalidArgument(format!("{what} must have unit norm, got {norm}")));
    }
    Ok(())
}

fn check_group_index(j_star: usize, groups: usize) -> Result<()> {
    if j_star == 0 || j_star > groups {
        return Err(Error::InvalidArgument(format!("j_star = {j_star} outside 1..={groups}")));
    }
    Ok(())
}

/// Draw a uniformly random unit direction in `R^d`.
pub fn random_unit_vector<R: Rng + ?Sized>(d: usize, rng: &mut R) -> DVector<f64> {
    loop {
        let v = DVector::from_fn(d, |_, _| StandardNormal.sample(rng));
        let norm: f64 = v.norm();
        if norm > 1e-8 {
            return v / norm;
        }
    }
}

/// Pretraining distribution: i.i.d. Gaussian groups, label given by the
/// sign of `<x_{j*}, v*>`.
#[derive(Debug, Clone)]
pub struct GroupSparseTask {
    d: usize,
    j_star: usize,
    v_star: DVector<f64>,
    sigma_x: f64,
    encodings: PositionalEncodingSet,
}

impl GroupSparseTask {
    pub fn new(groups: usize, j_star: usize, v_star: DVector<f64>, sigma_x: f64) -> Result<Self> {
        let encodings = make_positional_encodings(groups)?;
        check_group_index(j_star, groups)?;
        if v_star.is_empty() {
            return Err(Error::InvalidArgument("v_star must be non-empty".into()));
        }
        check_unit(&v_star, "v_star")?;
        if !(sigma_x > 0.0 && sigma_x.is_finite()) {
            return Err(Error::InvalidArgument(format!("sigma_x must be positive, got {sigma_x}")));
        }
        Ok(Self { d: v_star.len(), j_star, v_star, sigma_x, encodings })
    }

    /// Task with a freshly drawn unit `v*`.
    pub fn random<R: Rng + ?Sized>(
        d: usize,
        groups: usize,
        j_star: usize,
        sigma_x: f64,
        rng: &mut R,
    ) -> Result<Self> {
        if d == 0 {
            return Err(Error::InvalidArgument("d must be >= 1".into()));
        }
        Self::new(groups, j_star, random_unit_vector(d, rng), sigma_x)
    }

    pub fn d(&self) -> usize {
        self.d
    }
    pub fn groups(&self) -> usize {
        self.encodings.groups()
    }
    pub fn j_star(&self) -> usize {
        self.j_star
    }
    pub fn v_star(&self) -> &DVector<f64> {
        &self.v_star
    }
    pub fn sigma_x(&self) -> f64 {
        self.sigma_x
    }
    pub fn encodings(&self) -> &PositionalEncodingSet {
        &self.encodings
    }

    /// Label that this task assigns to a feature matrix.
    pub fn label(&self, features: &DMatrix<f64>) -> f64 {
        label_sign(features.column(self.j_star - 1).dot(&self.v_star))
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Sample {
        let noise = Normal::new(0.0, self.sigma_x).expect("sigma_x validated");
        let x = DMatrix::from_fn(self.d, self.groups(), |_, _| noise.sample(rng));
        let y = self.label(&x);
        Sample { z: assemble_input(&x, &self.encodings), y, d: self.d }
    }

    pub fn sample_many<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> Vec<Sample> {
        (0..n).map(|_| self.sample(rng)).collect()
    }
}

pub fn sample_pretrain<R: Rng + ?Sized>(task: &GroupSparseTask, rng: &mut R) -> Sample {
    task.sample(rng)
}

/// Interleave every sample with its `(-X, -y)` partner:
/// `[s0, s0', s1, s1', ...]`. Partners sit next to each other so that a
/// pairwise reduction cancels their odd-symmetric terms exactly.
pub fn antithetic_expand(samples: &[Sample]) -> Vec<Sample> {
    let mut out = Vec::with_capacity(2 * samples.len());
    for s in samples {
        out.push(s.clone());
        out.push(s.antithetic());
    }
    out
}

/// Entry distribution for downstream features.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FeatureNoise {
    /// `N(0, scale^2)`.
    #[default]
    Gaussian,
    /// Uniform on `[-sqrt(3) scale, sqrt(3) scale]` (variance `scale^2`).
    Uniform,
}

/// Downstream distribution: linearly separable with margin `gamma` along
/// `v_tilde` in group `j*`.
#[derive(Debug, Clone)]
pub struct DownstreamTask {
    d: usize,
    j_star: usize,
    v_tilde: DVector<f64>,
    gamma: f64,
    sigma_tilde: f64,
    noise: FeatureNoise,
    encodings: PositionalEncodingSet,
}

impl DownstreamTask {
    pub fn new(
        groups: usize,
        j_star: usize,
        v_tilde: DVector<f64>,
        gamma: f64,
        sigma_tilde: f64,
    ) -> Result<Self> {
        let encodings = make_positional_encodings(groups)?;
        check_group_index(j_star, groups)?;
        if v_tilde.is_empty() {
            return Err(Error::InvalidArgument("v_tilde must be non-empty".into()));
        }
        check_unit(&v_tilde, "v_tilde")?;
        if !(gamma > 0.0 && gamma.is_finite()) {
            return Err(Error::InvalidArgument(format!("gamma must be positive, got {gamma}")));
        }
        if !(sigma_tilde > 0.0 && sigma_tilde.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "sigma_tilde must be positive, got {sigma_tilde}"
            )));
        }
        Ok(Self {
            d: v_tilde.len(),
            j_star,
            v_tilde,
            gamma,
            sigma_tilde,
            noise: FeatureNoise::Gaussian,
            encodings,
        })
    }

    pub fn with_noise(mut self, noise: FeatureNoise) -> Self {
        self.noise = noise;
        self
    }

    pub fn d(&self) -> usize {
        self.d
    }
    pub fn groups(&self) -> usize {
        self.encodings.groups()
    }
    pub fn j_star(&self) -> usize {
        self.j_star
    }
    pub fn v_tilde(&self) -> &DVector<f64> {
        &self.v_tilde
    }
    pub fn gamma(&self) -> f64 {
        self.gamma
    }
    pub fn sigma_tilde(&self) -> f64 {
        self.sigma_tilde
    }
    pub fn encodings(&self) -> &PositionalEncodingSet {
        &self.encodings
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Sample {
        let mut x = match self.noise {
            FeatureNoise::Gaussian => {
                let noise = Normal::new(0.0, self.sigma_tilde).expect("sigma validated");
                DMatrix::from_fn(self.d, self.groups(), |_, _| noise.sample(rng))
            }
            FeatureNoise::Uniform => {
                let half = 3f64.sqrt() * self.sigma_tilde;
                let noise = Uniform::new_inclusive(-half, half).expect("finite bounds");
                DMatrix::from_fn(self.d, self.groups(), |_, _| noise.sample(rng))
            }
        };
        let mut relevant: DVector<f64> = x.column(self.j_star - 1).into_owned();
        let y = label_sign(relevant.dot(&self.v_tilde));
        enforce_margin(&mut relevant, &self.v_tilde, y, self.gamma);
        x.set_column(self.j_star - 1, &relevant);
        Sample { z: assemble_input(&x, &self.encodings), y, d: self.d }
    }

    pub fn sample_many<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> Vec<Sample> {
        (0..n).map(|_| self.sample(rng)).collect()
    }
}

pub fn sample_downstream<R: Rng + ?Sized>(task: &DownstreamTask, rng: &mut R) -> Sample {
    task.sample(rng)
}

/// Minimal-norm shift of `x` along `y v` so that `y <v, x> >= gamma`.
///
/// The shift is re-applied on the rare occasions rounding leaves the
/// margin a few ulps short, so the post-condition holds exactly.
pub fn enforce_margin(x: &mut DVector<f64>, v: &DVector<f64>, y: f64, gamma: f64) {
    let vv = v.norm_squared();
    for attempt in 0..8 {
        let margin = y * v.dot(x);
        if margin >= gamma {
            return;
        }
        let mut step = (gamma - margin) / vv;
        if attempt > 0 {
            // rounding left us a few ulps short: overshoot slightly
            step = step.max(4.0 * f64::EPSILON * gamma.max(margin.abs()) / vv);
        }
        x.axpy(step * y, v, 1.0);
    }
}

/// Write samples as CSV: `y` then `X` flattened column-major, headed
/// `y, x_1_1, x_1_2, ...` where `x_j_k` is coordinate `k` of group `j`.
pub fn write_dataset_csv<W: Write>(samples: &[Sample], writer: W) -> Result<()> {
    let mut out = csv::Writer::from_writer(writer);
    let Some(first) = samples.first() else {
        out.flush()?;
        return Ok(());
    };
    let (d, groups) = (first.feature_dim(), first.groups());
    let mut header = vec!["y".to_string()];
    for j in 1..=groups {
        for k in 1..=d {
            header.push(format!("x_{j}_{k}"));
        }
    }
    out.write_record(&header)?;
    for s in samples {
        if s.feature_dim() != d || s.groups() != groups {
            return Err(Error::DimensionMismatch("mixed sample shapes in dataset".into()));
        }
        let mut record = Vec::with_capacity(1 + d * groups);
        record.push(format!("{}", s.y()));
        // nalgebra storage is column-major already
        record.extend(s.features().iter().map(|v| format!("{v}")));
        out.write_record(&record)?;
    }
    out.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SeedTree;

    fn brute_gram(groups: usize) -> DMatrix<f64> {
        let n = groups as f64 + 1.0;
        DMatrix::from_fn(groups, groups, |a, b| {
            let (ja, jb) = ((a + 1) as f64, (b + 1) as f64);
            let mut acc = 0.0;
            for k in 1..=groups {
                let k = k as f64;
                acc += (k * ja * std::f64::consts::PI / n).sin() * (k * jb * std::f64::consts::PI / n).sin();
            }
            acc
        })
    }

    #[test]
    fn single_group_encoding_is_one() {
        let pe = make_positional_encodings(1).unwrap();
        assert!((pe.matrix()[(0, 0)] - 1.0).abs() < 1e-15);
        assert!((pe.column(1).norm() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn zero_groups_rejected() {
        assert!(make_positional_encodings(0).is_err());
    }

    #[test]
    fn six_groups_orthogonal_with_common_norm() {
        let pe = make_positional_encodings(6).unwrap();
        let expected = (3.5f64).sqrt();
        for j in 1..=6 {
            assert!((pe.column(j).norm() - expected).abs() < 1e-9);
            for k in (j + 1)..=6 {
                assert!(pe.column(j).dot(&pe.column(k)).abs() <= 1e-9);
            }
        }
    }

    #[test]
    fn gram_matches_double_loop_sum() {
        let pe = make_positional_encodings(4).unwrap();
        let gram = pe.matrix().transpose() * pe.matrix();
        let brute = brute_gram(4);
        for (a, b) in gram.iter().zip(brute.iter()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn label_follows_first_coordinate_for_e1() {
        let task = GroupSparseTask::new(3, 2, DVector::from_vec(vec![1.0, 0.0]), 0.25).unwrap();
        let x = DMatrix::from_column_slice(2, 3, &[0.4, 0.1, -0.3, 0.9, 1.0, -1.0]);
        assert_eq!(task.label(&x), -1.0);
    }

    #[test]
    fn tie_breaks_to_plus_one() {
        assert_eq!(label_sign(0.0), 1.0);
        assert_eq!(label_sign(-0.0), 1.0);
    }

    #[test]
    fn task_validation() {
        let v = DVector::from_vec(vec![1.0, 0.0]);
        assert!(GroupSparseTask::new(3, 0, v.clone(), 0.25).is_err());
        assert!(GroupSparseTask::new(3, 4, v.clone(), 0.25).is_err());
        assert!(GroupSparseTask::new(3, 1, v.clone(), 0.0).is_err());
        assert!(GroupSparseTask::new(3, 1, DVector::from_vec(vec![1.0, 1.0]), 0.25).is_err());
        assert!(GroupSparseTask::new(3, 3, v, 0.25).is_ok());
    }

    #[test]
    fn label_mean_and_feature_variance() {
        let mut rng = SeedTree::new(11).stream("test");
        let task = GroupSparseTask::random(3, 4, 2, 0.25, &mut rng).unwrap();
        let n = 100_000;
        let samples = task.sample_many(n, &mut rng);
        let mean_y = samples.iter().map(|s| s.y()).sum::<f64>() / n as f64;
        assert!(mean_y.abs() < 0.02, "mean y = {mean_y}");
        for k in 0..3 {
            for j in 0..4 {
                let m = samples.iter().map(|s| s.z()[(k, j)]).sum::<f64>() / n as f64;
                let var = samples.iter().map(|s| (s.z()[(k, j)] - m).powi(2)).sum::<f64>() / (n - 1) as f64;
                assert!((var - 0.0625).abs() < 0.002, "var[{k},{j}] = {var}");
            }
        }
    }

    #[test]
    fn pretrain_labels_agree_with_margin_sign() {
        let mut rng = SeedTree::new(3).stream("test");
        let task = GroupSparseTask::random(4, 6, 2, 0.25, &mut rng).unwrap();
        for s in task.sample_many(500, &mut rng) {
            assert!(s.y() * s.group(2).dot(task.v_star()) >= 0.0);
            assert_eq!(s.z().rows(4, 6), task.encodings().matrix().rows(0, 6));
        }
    }

    #[test]
    fn antithetic_pairs() {
        let mut rng = SeedTree::new(5).stream("test");
        let task = GroupSparseTask::random(2, 3, 1, 0.25, &mut rng).unwrap();
        let base = task.sample_many(7, &mut rng);
        let expanded = antithetic_expand(&base);
        assert_eq!(expanded.len(), 14);
        assert_eq!(expanded.iter().map(|s| s.y()).sum::<f64>(), 0.0);
        for (i, pair) in expanded.chunks(2).enumerate() {
            assert_eq!(pair[0], base[i]);
            assert_eq!(pair[1].y(), -pair[0].y());
            assert_eq!(pair[1].features(), -pair[0].features());
            assert_eq!(pair[1].z().rows(2, 3), pair[0].z().rows(2, 3));
            // partner label is what the task would assign to -X
            let neg_x = pair[1].features().into_owned();
            assert_eq!(task.label(&neg_x), pair[1].y());
        }
    }

    #[test]
    fn margin_shift_rules() {
        let v = DVector::from_vec(vec![1.0, 0.0]);
        let mut x = DVector::from_vec(vec![0.2, 0.7]);
        enforce_margin(&mut x, &v, 1.0, 1.0);
        assert!(v.dot(&x) >= 1.0);
        assert!((v.dot(&x) - 1.0).abs() < 1e-12);
        assert_eq!(x[1], 0.7);

        let mut x = DVector::from_vec(vec![-2.5, 0.3]);
        let y = label_sign(v.dot(&x));
        assert_eq!(y, -1.0);
        let before = x.clone();
        enforce_margin(&mut x, &v, y, 1.0);
        assert_eq!(x, before);
    }

    #[test]
    fn downstream_margin_holds_on_every_sample() {
        let tree = SeedTree::new(9);
        let mut rng = tree.stream("test");
        let v = random_unit_vector(4, &mut rng);
        for noise in [FeatureNoise::Gaussian, FeatureNoise::Uniform] {
            let task = DownstreamTask::new(6, 2, v.clone(), 1.0, 1.0).unwrap().with_noise(noise);
            let samples = task.sample_many(10_000, &mut rng);
            let min = samples
                .iter()
                .map(|s| s.y() * s.group(2).dot(task.v_tilde()))
                .fold(f64::INFINITY, f64::min);
            assert!(min >= 1.0, "min margin {min}");
        }
    }

    #[test]
    fn same_seed_same_dataset() {
        let draw = || {
            let tree = SeedTree::new(42);
            let task = GroupSparseTask::random(4, 6, 2, 0.25, &mut tree.stream("v")).unwrap();
            task.sample_many(20, &mut tree.stream("data"))
        };
        assert_eq!(draw(), draw());
    }

    #[test]
    fn csv_layout() {
        let pe = make_positional_encodings(2).unwrap();
        let x = DMatrix::from_column_slice(2, 2, &[1.0, 2.0, 3.0, 4.0]);
        let s = Sample::new(&x, -1.0, &pe).unwrap();
        let mut buf = Vec::new();
        write_dataset_csv(&[s], &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text, "y,x_1_1,x_1_2,x_2_1,x_2_2\n-1,1,2,3,4\n");
    }
}
