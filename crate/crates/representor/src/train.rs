//! Training: label-smoothed likelihood over the selected direction set,
//! Adam with the inverse-square-root warmup schedule, and the step loop.
//!
//! The loss is a per-token mean within each direction, summed across the
//! directions present, so the multi-direction objectives decompose exactly
//! into their single-direction terms. Optimizer moments exist per physical
//! tensor: tied parameters share optimizer state by construction.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;

use crate::checkpoint::{self, CheckpointError};
use crate::data::{self, Batch, Objective, Order, Task, TokenPair};
use crate::model::{DropoutCtx, ModelError, ParamStore, Representor};
use crate::tensor::{Tensor, TensorError};
use crate::vocab::{SharedVocabulary, PAD};

#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub objective: Objective,
    pub warmup_steps: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub label_smoothing: f64,
    pub batch_size: usize,
    pub max_steps: usize,
    pub seed: u64,
    /// Steps between intermediate checkpoints; 0 writes only the final one.
    pub checkpoint_every: usize,
    pub grad_clip: Option<f64>,
    pub dropout: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            objective: Objective::Cfp,
            warmup_steps: 4000,
            beta1: 0.9,
            beta2: 0.98,
            adam_eps: 1e-9,
            label_smoothing: 0.1,
            batch_size: 64,
            max_steps: 1000,
            seed: 1,
            checkpoint_every: 0,
            grad_clip: None,
            dropout: 0.0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        if !(0.0..1.0).contains(&self.label_smoothing) {
            return Err(TrainError::BadConfig(format!(
                "label_smoothing {} must be in [0, 1)",
                self.label_smoothing
            )));
        }
        if self.warmup_steps == 0 || self.batch_size == 0 || self.max_steps == 0 {
            return Err(TrainError::BadConfig(
                "warmup_steps, batch_size and max_steps must be positive".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug)]
pub enum TrainError {
    BadConfig(String),
    Model(ModelError),
    Tensor(TensorError),
    /// Every position in the batch was masked out.
    AllMasked,
    /// A batch carried a direction tag outside the objective's set.
    TagMismatch { task: Task, order: Order, objective: Objective },
    NonFiniteLoss { step: usize },
    NonFiniteGrad { tensor: String },
    Checkpoint(CheckpointError),
    Io(std::io::Error),
}

impl fmt::Display for TrainError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TrainError::BadConfig(msg) => write!(f, "bad train config: {msg}"),
            TrainError::Model(e) => write!(f, "{e}"),
            TrainError::Tensor(e) => write!(f, "{e}"),
            TrainError::AllMasked => write!(f, "loss over an entirely masked batch"),
            TrainError::TagMismatch { task, order, objective } => write!(
                f,
                "batch tagged ({task:?}, {order:?}) is outside objective {objective}"
            ),
            TrainError::NonFiniteLoss { step } => {
                write!(f, "non-finite loss at step {step}")
            }
            TrainError::NonFiniteGrad { tensor } => {
                write!(f, "non-finite gradient in {tensor}")
            }
            TrainError::Checkpoint(e) => write!(f, "{e}"),
            TrainError::Io(e) => write!(f, "train io error: {e}"),
        }
    }
}

impl std::error::Error for TrainError {}

impl From<ModelError> for TrainError {
    fn from(e: ModelError) -> Self {
        TrainError::Model(e)
    }
}

impl From<TensorError> for TrainError {
    fn from(e: TensorError) -> Self {
        TrainError::Tensor(e)
    }
}

impl From<CheckpointError> for TrainError {
    fn from(e: CheckpointError) -> Self {
        TrainError::Checkpoint(e)
    }
}

impl From<std::io::Error> for TrainError {
    fn from(e: std::io::Error) -> Self {
        TrainError::Io(e)
    }
}

/// Inverse-square-root schedule with linear warmup:
/// `d^-0.5 * min(step^-0.5, step * warmup^-1.5)`.
pub fn lr(step: usize, model_dim: usize, warmup: usize) -> f64 {
    assert!(step >= 1, "schedule starts at step 1");
    let s = step as f64;
    let w = warmup as f64;
    (model_dim as f64).powf(-0.5) * (s.powf(-0.5)).min(s * w.powf(-1.5))
}

/// Label-smoothed negative log-likelihood per position, as a graph tensor of
/// shape [N]. The smoothing mass spreads uniformly over every class except
/// `<pad>`.
fn smoothed_per_position(
    logits: &Tensor,
    targets: &[usize],
    eps_ls: f64,
) -> Result<Tensor, TrainError> {
    let shape = logits.shape();
    let v = *shape.last().expect("logits need a vocabulary axis");
    let n: usize = shape[..shape.len() - 1].iter().product();
    let logp = logits.reshape(&[n, v])?.log_softmax(1)?;
    let nll_target = logp.pick(targets)?.scale(-(1.0 - eps_ls));
    if eps_ls == 0.0 {
        return Ok(nll_target);
    }
    let valid = (v - 1) as f64;
    let mut vocab_mask = vec![1.0; v];
    vocab_mask[PAD] = 0.0;
    let vm = Tensor::new(vocab_mask, &[v])?;
    let smooth = logp.mul(&vm)?.sum_axis(1)?.scale(-eps_ls / valid);
    Ok(nll_target.add(&smooth)?)
}

/// Mean label-smoothed negative log-likelihood over unmasked positions.
/// At `eps_ls == 0` this is exactly the mean NLL.
pub fn loss(
    logits: &Tensor,
    targets: &[usize],
    mask: &[bool],
    eps_ls: f64,
) -> Result<Tensor, TrainError> {
    let per_pos = smoothed_per_position(logits, targets, eps_ls)?;
    masked_mean(&per_pos, mask)
}

fn masked_mean(per_pos: &Tensor, mask: &[bool]) -> Result<Tensor, TrainError> {
    let count = mask.iter().filter(|&&m| m).count();
    if count == 0 {
        return Err(TrainError::AllMasked);
    }
    let weights: Vec<f64> = mask.iter().map(|&m| if m { 1.0 } else { 0.0 }).collect();
    let w = Tensor::new(weights, &[mask.len()])?;
    Ok(per_pos.mul(&w)?.sum().scale(1.0 / count as f64))
}

/// Per-direction loss values of one step, for the metrics log.
#[derive(Debug, Clone, Default)]
pub struct DirectionLosses {
    pub s2t_l2r: Option<f64>,
    pub s2t_r2l: Option<f64>,
    pub t2s_l2r: Option<f64>,
    pub t2s_r2l: Option<f64>,
}

impl DirectionLosses {
    fn set(&mut self, task: Task, order: Order, value: f64) {
        match (task, order) {
            (Task::S2T, Order::L2R) => self.s2t_l2r = Some(value),
            (Task::S2T, Order::R2L) => self.s2t_r2l = Some(value),
            (Task::T2S, Order::L2R) => self.t2s_l2r = Some(value),
            (Task::T2S, Order::R2L) => self.t2s_r2l = Some(value),
        }
    }
}

/// Loss for one batch under an objective: per-token mean within each
/// direction present, summed across directions. All terms share one forward
/// pass and one parameter set.
pub fn objective_loss(
    model: &Representor,
    batch: &Batch,
    objective: Objective,
    eps_ls: f64,
    dropout: &mut Option<DropoutCtx>,
) -> Result<(Tensor, DirectionLosses), TrainError> {
    let allowed = objective.directions();
    for &(task, order) in &batch.directions {
        if !allowed.contains(&(task, order)) {
            return Err(TrainError::TagMismatch { task, order, objective });
        }
    }
    let logits = model.forward_train(batch, dropout)?;
    let per_pos = smoothed_per_position(&logits, &batch.decoder_target_ids, eps_ls)?;

    let t = batch.tgt_len;
    let mut total: Option<Tensor> = None;
    let mut by_direction = DirectionLosses::default();
    for &(task, order) in allowed {
        let mut dir_mask = vec![false; batch.size * t];
        let mut any = false;
        for (row, &tag) in batch.directions.iter().enumerate() {
            if tag == (task, order) {
                for j in 0..t {
                    dir_mask[row * t + j] = batch.target_mask[row * t + j];
                }
                any = true;
            }
        }
        if !any {
            continue;
        }
        let dir_loss = masked_mean(&per_pos, &dir_mask)?;
        by_direction.set(task, order, dir_loss.item());
        total = Some(match total {
            Some(acc) => acc.add(&dir_loss)?,
            None => dir_loss,
        });
    }
    let total = total.ok_or(TrainError::AllMasked)?;
    Ok((total, by_direction))
}

/// Adam moments per physical tensor plus the shared step counter.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub first_moment: BTreeMap<String, Vec<f64>>,
    pub second_moment: BTreeMap<String, Vec<f64>>,
    pub step: u64,
}

impl OptimizerState {
    pub fn new(store: &ParamStore) -> Self {
        let mut first = BTreeMap::new();
        let mut second = BTreeMap::new();
        for (name, t) in store.physical_iter() {
            first.insert(name.clone(), vec![0.0; t.numel()]);
            second.insert(name.clone(), vec![0.0; t.numel()]);
        }
        OptimizerState { first_moment: first, second_moment: second, step: 0 }
    }
}

/// One bias-corrected Adam update over every physical tensor, consuming and
/// clearing the accumulated gradients.
pub fn adam_step(
    store: &ParamStore,
    state: &mut OptimizerState,
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
) -> Result<(), TrainError> {
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - beta1.powi(t);
    let bc2 = 1.0 - beta2.powi(t);
    for (name, tensor) in store.physical_iter() {
        let grad = tensor.grad().unwrap_or_else(|| vec![0.0; tensor.numel()]);
        if grad.iter().any(|g| !g.is_finite()) {
            return Err(TrainError::NonFiniteGrad { tensor: name.clone() });
        }
        let m = state.first_moment.get_mut(name).expect("moment missing");
        let v = state.second_moment.get_mut(name).expect("moment missing");
        let mut values = tensor.value_vec();
        for i in 0..values.len() {
            m[i] = beta1 * m[i] + (1.0 - beta1) * grad[i];
            v[i] = beta2 * v[i] + (1.0 - beta2) * grad[i] * grad[i];
            let m_hat = m[i] / bc1;
            let v_hat = v[i] / bc2;
            values[i] -= lr * m_hat / (v_hat.sqrt() + eps);
        }
        tensor.set_values(&values);
    }
    store.zero_grad();
    Ok(())
}

/// Scales all gradients so their global L2 norm is at most `threshold`.
/// Returns the pre-clip norm.
pub fn clip_gradients(store: &ParamStore, threshold: f64) -> f64 {
    let mut sq = 0.0;
    for (_, t) in store.physical_iter() {
        if let Some(g) = t.grad() {
            sq += g.iter().map(|x| x * x).sum::<f64>();
        }
    }
    let norm = sq.sqrt();
    if norm > threshold && norm > 0.0 {
        let scale = threshold / norm;
        for (_, t) in store.physical_iter() {
            if let Some(g) = t.grad() {
                let scaled: Vec<f64> = g.iter().map(|x| x * scale).collect();
                t.zero_grad();
                t.add_to_grad(&scaled);
            }
        }
    }
    norm
}

pub const METRICS_HEADER: &str =
    "step,lr,loss_total,loss_s2t_l2r,loss_s2t_r2l,loss_t2s_l2r,loss_t2s_r2l";

fn metrics_line(step: usize, lr: f64, total: f64, dirs: &DirectionLosses) -> String {
    let cell = |v: Option<f64>| match v {
        Some(x) => format!("{x:.6}"),
        None => "nan".to_string(),
    };
    format!(
        "{step},{lr:.8},{total:.6},{},{},{},{}",
        cell(dirs.s2t_l2r),
        cell(dirs.s2t_r2l),
        cell(dirs.t2s_l2r),
        cell(dirs.t2s_r2l)
    )
}

#[derive(Debug)]
pub struct TrainReport {
    pub steps: usize,
    pub final_loss: f64,
    pub metrics: String,
    pub checkpoint_path: Option<PathBuf>,
    pub skipped_pairs: usize,
}

/// Runs the whole loop: augment, batch, forward, loss, backward, Adam.
/// Writes `metrics.csv` and checkpoints under `out_dir` when given. Pass the
/// optimizer state and step from a loaded checkpoint to resume.
pub fn train(
    model: &mut Representor,
    pairs: &[TokenPair],
    vocab: &SharedVocabulary,
    cfg: &TrainConfig,
    out_dir: Option<&Path>,
    resume: Option<OptimizerState>,
) -> Result<TrainReport, TrainError> {
    cfg.validate()?;
    let (examples, stats) = data::prepare_examples(pairs, vocab, cfg.objective);
    if examples.is_empty() {
        return Err(TrainError::BadConfig("no usable training pairs".into()));
    }
    let vocab_hash = vocab.sha256_hex();
    let mut opt = resume.unwrap_or_else(|| OptimizerState::new(&model.store));
    let mut step = opt.step as usize;
    let mut metrics = String::from(METRICS_HEADER);
    metrics.push('\n');
    let mut dropout_rng = ChaCha12Rng::seed_from_u64(cfg.seed.wrapping_add(0x5eed));
    let mut final_loss = f64::NAN;

    if let Some(dir) = out_dir {
        std::fs::create_dir_all(dir)?;
    }

    let mut epoch = 0u64;
    'outer: loop {
        let batches = make_epoch_batches(&examples, cfg, epoch);
        for batch in &batches {
            if step >= cfg.max_steps {
                break 'outer;
            }
            step += 1;
            let rate = lr(step, model.hyper.model_dim, cfg.warmup_steps);
            model.store.zero_grad();
            let mut dropout = (cfg.dropout > 0.0).then(|| DropoutCtx {
                rate: cfg.dropout,
                rng: &mut dropout_rng,
            });
            let (total, dirs) =
                objective_loss(model, batch, cfg.objective, cfg.label_smoothing, &mut dropout)?;
            drop(dropout);
            let total_val = total.item();
            if !total_val.is_finite() {
                return Err(TrainError::NonFiniteLoss { step });
            }
            total.backward()?;
            if let Some(threshold) = cfg.grad_clip {
                clip_gradients(&model.store, threshold);
            }
            adam_step(&model.store, &mut opt, rate, cfg.beta1, cfg.beta2, cfg.adam_eps)?;
            final_loss = total_val;
            metrics.push_str(&metrics_line(step, rate, total_val, &dirs));
            metrics.push('\n');

            if let Some(dir) = out_dir {
                if cfg.checkpoint_every > 0 && step % cfg.checkpoint_every == 0 {
                    opt.step = step as u64;
                    let path = dir.join(format!("checkpoint-{step}.bin"));
                    checkpoint::save(model, &vocab_hash, Some(&opt), step as u64, &path)?;
                    std::fs::write(dir.join("metrics.csv"), &metrics)?;
                }
            }
        }
        epoch += 1;
    }

    opt.step = step as u64;
    let mut checkpoint_path = None;
    if let Some(dir) = out_dir {
        let path = dir.join("checkpoint.bin");
        checkpoint::save(model, &vocab_hash, Some(&opt), step as u64, &path)?;
        std::fs::write(dir.join("metrics.csv"), &metrics)?;
        checkpoint_path = Some(path);
    }
    Ok(TrainReport {
        steps: step,
        final_loss,
        metrics,
        checkpoint_path,
        skipped_pairs: stats.skipped_blank + stats.skipped_long,
    })
}

fn make_epoch_batches(
    examples: &[data::DirectedExample],
    cfg: &TrainConfig,
    epoch: u64,
) -> Vec<Batch> {
    data::make_batches(examples, cfg.batch_size, cfg.seed.wrapping_add(epoch))
}
