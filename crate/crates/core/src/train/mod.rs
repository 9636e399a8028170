//! Gradient-descent pretraining from zero initialization, online-SGD
//! fine-tuning on a downstream task, metric logging and checkpoints.

mod checkpoint;

use std::io::Write;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

pub use checkpoint::{
    load_checkpoint, load_sidecar, save_checkpoint, save_checkpoint_with_sidecar, sidecar_path,
    Checkpoint, Sidecar, FORMAT_VERSION, MAGIC,
};

use crate::datagen::{antithetic_expand, DownstreamTask, GroupSparseTask, Sample};
use crate::diagnostics::{
    alpha_decomposition, cosine, w11_projection, w22_projection, ProjectionBasis,
};
use crate::error::{Error, Result};
use crate::grad::{draw_population_batch, evaluate_batch, BatchOptions, GradPair, Reduction};
use crate::model::{forward, logistic_loss, ModelParams};
use crate::rng::{SeedTree, DOWNSTREAM_DATA, PRETRAIN_DATA, SHUFFLE, V_STAR};

/// Model outputs beyond this magnitude abort training.
pub const DIVERGENCE_THRESHOLD: f64 = 1e6;
/// Fresh draws per step in population mode when not configured.
pub const DEFAULT_MC_PAIRS: usize = 4096;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LossMode {
    /// Fixed dataset of `n` samples drawn once.
    #[default]
    Empirical,
    /// Fresh Monte-Carlo batch every step.
    PopulationMc,
}

impl std::fmt::Display for LossMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            LossMode::Empirical => "empirical",
            LossMode::PopulationMc => "population-mc",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub d: usize,
    #[serde(rename = "D")]
    pub groups: usize,
    /// Dataset size in empirical mode.
    pub n: usize,
    pub sigma_x: f64,
    pub eta: f64,
    /// Number of parameter updates.
    pub iters: usize,
    pub seed: u64,
    pub j_star: usize,
    pub mode: LossMode,
    /// Pair every sample with its `(-X, -y)` partner.
    pub antithetic: bool,
    pub log_every: usize,
    /// Draws per step in population mode (pairs when antithetic);
    /// [`DEFAULT_MC_PAIRS`] when unset.
    pub mc_pairs: Option<usize>,
    /// Minibatch SGD over the empirical dataset with reshuffling each epoch.
    pub batch_size: Option<usize>,
    pub reduction: Reduction,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            d: 4,
            groups: 6,
            n: 500,
            sigma_x: 0.25,
            eta: 0.5,
            iters: 400,
            seed: 0,
            j_star: 2,
            mode: LossMode::Empirical,
            antithetic: false,
            log_every: 1,
            mc_pairs: None,
            batch_size: None,
            reduction: Reduction::Tree,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidArgument(msg));
        if self.d == 0 || self.groups == 0 {
            return bad(format!("d and D must be >= 1, got ({}, {})", self.d, self.groups));
        }
        if self.j_star == 0 || self.j_star > self.groups {
            return bad(format!("j_star = {} outside 1..={}", self.j_star, self.groups));
        }
        if self.n == 0 {
            return bad("n must be >= 1".into());
        }
        if !(self.sigma_x > 0.0 && self.sigma_x.is_finite()) {
            return bad(format!("sigma_x must be positive, got {}", self.sigma_x));
        }
        if !(self.eta > 0.0 && self.eta.is_finite()) {
            return bad(format!("eta must be positive, got {}", self.eta));
        }
        if self.iters == 0 {
            return bad("iters must be >= 1".into());
        }
        if self.log_every == 0 {
            return bad("log_every must be >= 1".into());
        }
        if self.mc_pairs == Some(0) {
            return bad("mc_pairs must be >= 1".into());
        }
        match (self.batch_size, self.mode) {
            (Some(0), _) => return bad("batch_size must be >= 1".into()),
            (Some(_), LossMode::PopulationMc) => {
                return bad("batch_size applies to empirical mode only".into())
            }
            _ => {}
        }
        Ok(())
    }

    pub fn mc_pairs(&self) -> usize {
        self.mc_pairs.unwrap_or(DEFAULT_MC_PAIRS)
    }

    /// The pretraining task: `v*` drawn from the seed's `V_STAR` stream.
    pub fn task(&self) -> Result<GroupSparseTask> {
        let mut rng = SeedTree::new(self.seed).stream(V_STAR);
        GroupSparseTask::random(self.d, self.groups, self.j_star, self.sigma_x, &mut rng)
    }
}

/// `v <- v - eta gv`, `W <- W - eta gW`.
pub fn gd_step(params: &ModelParams, grad: &GradPair, eta: f64) -> ModelParams {
    assert_eq!(params.v().len(), grad.gv.len(), "gradient shape");
    assert_eq!(params.w().shape(), grad.gw.shape(), "gradient shape");
    let mut next = params.clone();
    next.v_mut().axpy(-eta, &grad.gv, 1.0);
    next.w_mut().zip_apply(&grad.gw, |w, g| *w -= eta * g);
    next
}

/// One logged line of a pretraining run. Row `iter` describes the
/// parameters after `iter` updates; `loss` and the attention statistics are
/// measured on the batch used at that iterate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub iter: usize,
    pub loss: f64,
    pub alpha: f64,
    pub v1_err_norm: f64,
    pub cos_sim: f64,
    pub norm_v1: f64,
    pub norm_v2: f64,
    #[serde(rename = "norm_W12")]
    pub norm_w12: f64,
    #[serde(rename = "norm_W21")]
    pub norm_w21: f64,
    pub mean_attn_jstar: f64,
    pub min_attn_jstar: f64,
    pub beta1: f64,
    /// Absent when `D = 1`.
    pub beta2: Option<f64>,
    pub w11_resid: f64,
    pub w22_resid: Option<f64>,
    /// `|v2| / |v1|`; absent while `v1 = 0`.
    pub ratio_v2_v1: Option<f64>,
    /// `|v1| / |v2|`; absent while `v2 = 0`.
    pub ratio_v1_v2: Option<f64>,
}

fn ratio(a: f64, b: f64) -> Option<f64> {
    (b > 0.0).then(|| a / b)
}

impl MetricsRow {
    fn measure(
        iter: usize,
        params: &ModelParams,
        task: &GroupSparseTask,
        basis: Option<&ProjectionBasis>,
        loss: f64,
        mean_attn_jstar: f64,
        min_attn_jstar: f64,
    ) -> Self {
        let v_star = task.v_star();
        let v1 = params.v1().into_owned();
        let decomposition = alpha_decomposition(&v1, v_star);
        let w11 = w11_projection(&params.w11(), v_star);
        let w22 = basis.map(|b| w22_projection(&params.w22(), b));
        let norm_v1 = v1.norm();
        let norm_v2 = params.v2().norm();
        Self {
            iter,
            loss,
            alpha: decomposition.alpha,
            v1_err_norm: decomposition.error_norm,
            cos_sim: cosine(&v1, v_star),
            norm_v1,
            norm_v2,
            norm_w12: params.w12().norm(),
            norm_w21: params.w21().norm(),
            mean_attn_jstar,
            min_attn_jstar,
            beta1: w11.beta,
            beta2: w22.map(|p| p.beta),
            w11_resid: w11.resid_norm,
            w22_resid: w22.map(|p| p.resid_norm),
            ratio_v2_v1: ratio(norm_v2, norm_v1),
            ratio_v1_v2: ratio(norm_v1, norm_v2),
        }
    }

    /// Largest of `|v2|`, `|W12|_F`, `|W21|_F`.
    pub fn max_zero_block_norm(&self) -> f64 {
        self.norm_v2.max(self.norm_w12).max(self.norm_w21)
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub metrics: Vec<MetricsRow>,
    pub checkpoint: Checkpoint,
    pub task: GroupSparseTask,
    /// Loss of the final parameters (on the full dataset in empirical mode).
    pub final_loss: f64,
}

fn guard(iteration: usize, loss: f64, max_abs_output: f64) -> Result<()> {
    if !loss.is_finite() {
        return Err(Error::Diverged { iteration, reason: format!("loss is {loss}") });
    }
    if max_abs_output > DIVERGENCE_THRESHOLD {
        return Err(Error::Diverged {
            iteration,
            reason: format!("|f| = {max_abs_output:e} exceeds {DIVERGENCE_THRESHOLD:e}"),
        });
    }
    Ok(())
}

enum Source {
    Full(Vec<Sample>),
    /// `unit` is 2 with antithetic pairing so partners stay adjacent.
    Minibatch { data: Vec<Sample>, order: Vec<usize>, cursor: usize, units: usize, unit: usize },
    Population { pairs: usize },
}

/// Run `config.iters` gradient steps from `v = 0, W = 0`.
pub fn train(config: &TrainConfig) -> Result<TrainOutcome> {
    config.validate()?;
    let task = config.task()?;
    train_on_task(config, task)
}

/// [`train`] on a caller-supplied task whose shape must match the config.
pub fn train_on_task(config: &TrainConfig, task: GroupSparseTask) -> Result<TrainOutcome> {
    config.validate()?;
    if task.d() != config.d || task.groups() != config.groups || task.j_star() != config.j_star {
        return Err(Error::DimensionMismatch(format!(
            "task is (d, D, j*) = ({}, {}, {}), config is ({}, {}, {})",
            task.d(),
            task.groups(),
            task.j_star(),
            config.d,
            config.groups,
            config.j_star
        )));
    }
    let tree = SeedTree::new(config.seed);
    let mut data_rng = tree.stream(PRETRAIN_DATA);
    let mut shuffle_rng = tree.stream(SHUFFLE);
    let expand = |s: Vec<Sample>| if config.antithetic { antithetic_expand(&s) } else { s };

    let mut source = match (config.mode, config.batch_size) {
        (LossMode::Empirical, None) => Source::Full(expand(task.sample_many(config.n, &mut data_rng))),
        (LossMode::Empirical, Some(size)) => {
            let unit = if config.antithetic { 2 } else { 1 };
            let units = (size / unit).clamp(1, config.n);
            let data = expand(task.sample_many(config.n, &mut data_rng));
            Source::Minibatch { data, order: Vec::new(), cursor: 0, units, unit }
        }
        (LossMode::PopulationMc, _) => Source::Population { pairs: config.mc_pairs() },
    };
    let basis = ProjectionBasis::new(task.encodings(), task.j_star()).ok();
    let opts = BatchOptions { want_grad: true, j_star: Some(task.j_star()), reduction: config.reduction };

    let mut params = ModelParams::zeros(config.d, config.groups);
    let mut metrics = Vec::new();
    let mut drawn;
    for t in 0..config.iters {
        let batch: &[Sample] = match &mut source {
            Source::Full(data) => data,
            Source::Minibatch { data, order, cursor, units, unit } => {
                if *cursor + *units > order.len() {
                    *order = (0..data.len() / *unit).collect();
                    order.shuffle(&mut shuffle_rng);
                    *cursor = 0;
                }
                drawn = order[*cursor..*cursor + *units]
                    .iter()
                    .flat_map(|&i| data[i * *unit..(i + 1) * *unit].iter().cloned())
                    .collect::<Vec<_>>();
                *cursor += *units;
                &drawn
            }
            Source::Population { pairs } => {
                drawn = draw_population_batch(&task, *pairs, config.antithetic, &mut data_rng);
                &drawn
            }
        };
        let eval = evaluate_batch(batch, &params, opts).map_err(|e| e.at_iteration(t))?;
        guard(t, eval.loss, eval.max_abs_output)?;
        if t > 0 && t % config.log_every == 0 {
            metrics.push(MetricsRow::measure(
                t,
                &params,
                &task,
                basis.as_ref(),
                eval.loss,
                eval.attn_mean_jstar,
                eval.attn_min_jstar,
            ));
        }
        let grad = eval.grad.expect("gradient requested");
        params = gd_step(&params, &grad, config.eta);
        if !params.is_finite() {
            return Err(Error::Diverged { iteration: t + 1, reason: "non-finite parameters".into() });
        }
    }

    let final_opts = BatchOptions { want_grad: false, ..opts };
    let final_eval = match &source {
        Source::Full(data) | Source::Minibatch { data, .. } => evaluate_batch(data, &params, final_opts),
        Source::Population { pairs } => {
            let batch = draw_population_batch(&task, *pairs, config.antithetic, &mut data_rng);
            evaluate_batch(&batch, &params, final_opts)
        }
    }
    .map_err(|e| e.at_iteration(config.iters))?;
    guard(config.iters, final_eval.loss, final_eval.max_abs_output)?;
    metrics.push(MetricsRow::measure(
        config.iters,
        &params,
        &task,
        basis.as_ref(),
        final_eval.loss,
        final_eval.attn_mean_jstar,
        final_eval.attn_min_jstar,
    ));

    Ok(TrainOutcome {
        metrics,
        checkpoint: Checkpoint::new(params, task.j_star())?,
        final_loss: final_eval.loss,
        task,
    })
}

pub fn write_metrics_csv<W: Write>(rows: &[MetricsRow], writer: W) -> Result<()> {
    let mut out = csv::Writer::from_writer(writer);
    for row in rows {
        out.serialize(row)?;
    }
    out.flush()?;
    Ok(())
}

/// Fraction of samples with `y f > 0`; a zero margin counts as an error.
pub fn evaluate_accuracy(params: &ModelParams, samples: &[Sample]) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::Empty("accuracy over an empty set"));
    }
    let mut correct = 0usize;
    for s in samples {
        if s.y() * forward(s.z(), params)?.output > 0.0 {
            correct += 1;
        }
    }
    Ok(correct as f64 / samples.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FinetuneSettings {
    pub steps: usize,
    pub eta_tilde: f64,
    pub log_every: usize,
}

/// One logged line of a fine-tuning run, after `step` updates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FinetuneRow {
    pub step: usize,
    /// Loss on the sample consumed by this step, before the update.
    pub train_loss: f64,
    pub test_accuracy: f64,
    /// Running mean of `test_accuracy` over the logged rows so far.
    pub mean_test_accuracy: f64,
}

/// Online SGD from `v = 0` and the checkpoint's `W`, one fresh sample from
/// `rng` per step.
pub fn finetune_online_sgd<R: Rng + ?Sized>(
    checkpoint: &Checkpoint,
    task: &DownstreamTask,
    settings: FinetuneSettings,
    rng: &mut R,
    test_set: &[Sample],
) -> Result<(Vec<FinetuneRow>, ModelParams)> {
    if checkpoint.d() != task.d() || checkpoint.groups() != task.groups() {
        return Err(Error::DimensionMismatch(format!(
            "checkpoint has (d, D) = ({}, {}), downstream task has ({}, {})",
            checkpoint.d(),
            checkpoint.groups(),
            task.d(),
            task.groups()
        )));
    }
    if !(settings.eta_tilde >= 0.0 && settings.eta_tilde.is_finite()) {
        return Err(Error::InvalidArgument(format!(
            "eta_tilde must be non-negative, got {}",
            settings.eta_tilde
        )));
    }
    if settings.steps == 0 || settings.log_every == 0 {
        return Err(Error::InvalidArgument("steps and log_every must be >= 1".into()));
    }
    if test_set.is_empty() {
        return Err(Error::Empty("fine-tuning test set"));
    }
    let mut params = checkpoint.params.clone();
    params.v_mut().fill(0.0);

    let mut rows = Vec::new();
    let mut accuracy_sum = 0.0;
    for step in 1..=settings.steps {
        let sample = task.sample(rng);
        let out = forward(sample.z(), &params).map_err(|e| e.at_iteration(step))?;
        let margin = sample.y() * out.output;
        let train_loss = logistic_loss(margin);
        guard(step, train_loss, out.output.abs())?;
        if settings.eta_tilde > 0.0 {
            let grad = crate::grad::grad_sample(sample.z(), sample.y(), &params)
                .map_err(|e| e.at_iteration(step))?;
            params = gd_step(&params, &grad, settings.eta_tilde);
        }
        if step % settings.log_every == 0 || step == settings.steps {
            let test_accuracy = evaluate_accuracy(&params, test_set)?;
            accuracy_sum += test_accuracy;
            rows.push(FinetuneRow {
                step,
                train_loss,
                test_accuracy,
                mean_test_accuracy: accuracy_sum / (rows.len() + 1) as f64,
            });
        }
    }
    Ok((rows, params))
}

/// Downstream stream of fresh training samples for a seed.
pub fn downstream_rng(seed: u64) -> crate::rng::StreamRng {
    SeedTree::new(seed).stream(DOWNSTREAM_DATA)
}

pub fn write_finetune_csv<W: Write>(rows: &[FinetuneRow], writer: W) -> Result<()> {
    let mut out = csv::Writer::from_writer(writer);
    for row in rows {
        out.serialize(row)?;
    }
    out.flush()?;
    Ok(())
}
