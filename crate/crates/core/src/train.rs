//! Multitask training, evaluation and few-shot adaptation.

use rand::seq::index::sample;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::ibp::{ibp_regularizer, IbpConfig};
use crate::model::{AllocMode, AllocationState, Model, ModelKind, Parameterisation};
use crate::optim::{build_two_speed_groups, ParamId, ParamRole};
use crate::tensor::Tensor;
use crate::world::{stream_rng, Split, TaskKind, TaskSpec};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    /// Total optimiser steps; when absent, `epochs` passes over the pooled
    /// training examples at `batch_size`.
    pub steps: Option<usize>,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr_z: f64,
    pub lr_phi: f64,
    pub tau: f64,
    /// Geometric annealing target for the temperature; constant when absent.
    pub tau_final: Option<f64>,
    pub ibp: IbpConfig,
    /// Deterministic train/dev evaluation period in steps; 0 evaluates only at the end.
    pub eval_every: usize,
    /// Keep the parameters with the lowest dev loss seen at an evaluation.
    pub select_by_dev: bool,
    /// Steps-to-threshold uses `threshold_factor` times the best loss a
    /// single shared linear predictor can reach.
    pub threshold_factor: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            steps: None,
            epochs: 30,
            batch_size: 32,
            lr_z: 1e-1,
            lr_phi: 1e-3,
            tau: 1.0,
            tau_final: None,
            ibp: IbpConfig::default(),
            eval_every: 100,
            select_by_dev: true,
            threshold_factor: 1.5,
        }
    }
}

impl TrainConfig {
    pub fn total_steps(&self, tasks: &[TaskSpec]) -> usize {
        self.steps.unwrap_or_else(|| {
            let pooled: usize = tasks.iter().map(|t| t.train.len()).sum();
            self.epochs * pooled.div_ceil(self.batch_size.max(1))
        })
    }

    pub fn tau_at(&self, step: usize, total: usize) -> f64 {
        match self.tau_final {
            Some(end) if total > 1 => {
                let frac = step as f64 / (total - 1) as f64;
                self.tau * (end / self.tau).powf(frac)
            }
            _ => self.tau,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::contract("batch_size must be positive"));
        }
        for (name, v) in [("lr_z", self.lr_z), ("lr_phi", self.lr_phi), ("tau", self.tau)] {
            if !(v > 0.0) || !v.is_finite() {
                return Err(Error::domain(format!("{name} must be positive, got {v}")));
            }
        }
        if let Some(t) = self.tau_final {
            if !(t > 0.0) || !t.is_finite() {
                return Err(Error::domain(format!("tau_final must be positive, got {t}")));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdaptConfig {
    pub k_shot: usize,
    pub steps: usize,
    pub batch_size: usize,
    /// Steps at the start during which only the new task's allocation row
    /// (or embedding) is trained.
    pub z_only_steps: usize,
    /// Also train skills (or generators) after the first phase.
    pub train_phi: bool,
    pub resamples: usize,
}

impl Default for AdaptConfig {
    fn default() -> Self {
        AdaptConfig {
            k_shot: 16,
            steps: 1000,
            batch_size: 8,
            z_only_steps: 100,
            train_phi: true,
            resamples: 5,
        }
    }
}

/// Upper bound on few-shot training examples.
pub const MAX_K_SHOT: usize = 32;

impl AdaptConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k_shot > MAX_K_SHOT {
            return Err(Error::contract(format!(
                "k_shot {} exceeds {MAX_K_SHOT}",
                self.k_shot
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::contract("adaptation batch_size must be positive"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub task: usize,
    pub loss: f64,
    pub reg_loss: f64,
    pub lr_z: f64,
    pub lr_phi: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    /// Number of optimiser steps taken when evaluated.
    pub step: usize,
    pub train_loss: f64,
    pub dev_loss: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct History {
    pub steps: Vec<StepRecord>,
    pub evals: Vec<EvalRecord>,
    /// Evaluation step whose parameters were kept, when selecting by dev loss.
    pub selected_step: Option<usize>,
}

impl History {
    /// First evaluated step whose mean train loss is at or below `threshold`.
    pub fn steps_to_threshold(&self, threshold: f64) -> Option<usize> {
        self.evals
            .iter()
            .find(|e| e.train_loss <= threshold)
            .map(|e| e.step)
    }

    /// CSV with columns `step, task_id, loss, reg_loss, lr_z, lr_phi`.
    pub fn to_csv(&self, task_names: &[String]) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["step", "task_id", "loss", "reg_loss", "lr_z", "lr_phi"])?;
        for r in &self.steps {
            let name = task_names.get(r.task).cloned().unwrap_or_else(|| r.task.to_string());
            w.write_record([
                r.step.to_string(),
                name,
                r.loss.to_string(),
                r.reg_loss.to_string(),
                r.lr_z.to_string(),
                r.lr_phi.to_string(),
            ])?;
        }
        let bytes = w.into_inner().map_err(|e| Error::Io(e.into_error()))?;
        Ok(String::from_utf8(bytes).expect("csv writer emits utf-8"))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainedModel {
    pub model: Model,
    pub history: History,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalMetrics {
    pub loss: f64,
    pub mse: Option<f64>,
    pub accuracy: Option<f64>,
}

fn sample_batch<R: Rng>(rng: &mut R, n: usize, batch: usize) -> Vec<usize> {
    (0..batch).map(|_| rng.random_range(0..n)).collect()
}

/// Loss (task plus regulariser) for one batch recorded on a fresh tape.
struct StepOutcome {
    tape: Tape,
    vars: Vec<Var>,
    total: Var,
    loss: f64,
    reg: f64,
}

fn step_loss(
    model: &Model,
    task: usize,
    batch: &Split,
    mode: &mut AllocMode<'_>,
    ibp: Option<&IbpConfig>,
) -> Result<StepOutcome> {
    let mut tape = Tape::new();
    let vars = model.params.record(&mut tape);
    let weights = model.task_weights(&mut tape, &vars, task, mode)?;
    let x = tape.leaf(&batch.x()?);
    let f = model.forward(&mut tape, &vars, task, x, &weights)?;
    let loss = model.loss_on_tape(&mut tape, f, &batch.y)?;
    let mut total = loss;
    let mut reg = 0.0;
    if let Some(cfg) = ibp.filter(|c| c.strength > 0.0) {
        for &zhat in &weights.relaxed {
            let r = ibp_regularizer(&mut tape, zhat, cfg)?;
            reg += tape.item(r);
            total = tape.add(total, r)?;
        }
    }
    let loss_v = tape.item(loss);
    Ok(StepOutcome {
        tape,
        vars,
        total,
        loss: loss_v,
        reg,
    })
}

fn mean_loss<'a>(model: &Model, tasks: impl Iterator<Item = (usize, &'a Split)>) -> Result<f64> {
    let mut sum = 0.0;
    let mut n = 0usize;
    for (i, split) in tasks {
        if split.is_empty() {
            continue;
        }
        sum += model.split_loss(i, split)?;
        n += 1;
    }
    Ok(if n == 0 { f64::NAN } else { sum / n as f64 })
}

/// Mean deterministic loss over the training tasks' train splits.
pub fn mean_train_loss(model: &Model, tasks: &[TaskSpec]) -> Result<f64> {
    mean_loss(model, tasks.iter().enumerate().map(|(i, t)| (i, &t.train)))
}

pub fn mean_dev_loss(model: &Model, tasks: &[TaskSpec]) -> Result<f64> {
    mean_loss(model, tasks.iter().enumerate().map(|(i, t)| (i, &t.dev)))
}

/// Trains `model` on `tasks`, whose order must match the model's task list.
pub fn multitask_train(
    mut model: Model,
    tasks: &[TaskSpec],
    cfg: &TrainConfig,
    seed: u64,
) -> Result<TrainedModel> {
    cfg.validate()?;
    if tasks.is_empty() {
        return Err(Error::contract("multitask training needs at least one task"));
    }
    let names: Vec<&str> = tasks.iter().map(|t| t.id.as_str()).collect();
    if names != model.task_names.iter().map(String::as_str).collect::<Vec<_>>() {
        return Err(Error::contract("task list does not match the model's tasks"));
    }
    if let Some(t) = tasks.iter().find(|t| t.train.is_empty()) {
        return Err(Error::contract(format!("task `{}` has no training examples", t.id)));
    }
    let total_steps = cfg.total_steps(tasks);
    let mut sampler = stream_rng(seed, 2);
    let mut gumbel = stream_rng(seed, 3);
    let mut opt = build_two_speed_groups(&model.params, cfg.lr_z, cfg.lr_phi)?;
    let warmup = match model.parameterisation {
        Parameterisation::Sparse { warmup_steps, .. } if model.is_sparse() => Some(warmup_steps),
        _ => None,
    };
    let phi_start = model.skill_tensors();

    let mut history = History::default();
    let mut best: Option<(f64, Model)> = None;
    let evaluate_now = |m: &Model, step: usize, history: &mut History| -> Result<f64> {
        let train_loss = mean_train_loss(m, tasks)?;
        let dev_loss = mean_dev_loss(m, tasks)?;
        history.evals.push(EvalRecord {
            step,
            train_loss,
            dev_loss,
        });
        Ok(dev_loss)
    };

    if cfg.eval_every > 0 {
        evaluate_now(&model, 0, &mut history)?;
    }
    for step in 0..total_steps {
        if warmup == Some(step) {
            model.select_masks(&phi_start)?;
        }
        model.tau = cfg.tau_at(step, total_steps);
        let task = sampler.random_range(0..tasks.len());
        let idx = sample_batch(&mut sampler, tasks[task].train.len(), cfg.batch_size);
        let batch = tasks[task].train.select(&idx);
        let mut out = step_loss(&model, task, &batch, &mut AllocMode::Sample(&mut gumbel), Some(&cfg.ibp))?;
        if !out.loss.is_finite() || !out.reg.is_finite() {
            return Err(Error::NonFinite {
                step,
                task: tasks[task].id.clone(),
                loss: out.loss,
                reg_loss: out.reg,
            });
        }
        out.tape.backward(out.total)?;
        model.params.collect_grads(&out.tape, &out.vars)?;
        opt.step(&mut model.params)?;
        if model.masks_selected() && model.is_sparse() {
            model.apply_masks();
        }
        history.steps.push(StepRecord {
            step,
            task,
            loss: out.loss,
            reg_loss: out.reg,
            lr_z: cfg.lr_z,
            lr_phi: cfg.lr_phi,
        });
        let done = step + 1;
        let due = cfg.eval_every > 0 && (done % cfg.eval_every == 0 || done == total_steps);
        if due || (cfg.eval_every == 0 && done == total_steps) {
            let dev = evaluate_now(&model, done, &mut history)?;
            if cfg.select_by_dev && dev.is_finite() && best.as_ref().is_none_or(|b| dev < b.0) {
                best = Some((dev, model.clone()));
                history.selected_step = Some(done);
            }
        }
    }
    if let Some((_, m)) = best {
        model = m;
    }
    if !model.params.all_finite() {
        return Err(Error::NonFinite {
            step: total_steps,
            task: String::from("<parameters>"),
            loss: f64::NAN,
            reg_loss: f64::NAN,
        });
    }
    Ok(TrainedModel { model, history })
}

/// Deterministic metrics of `model` on `split` for task index `task`.
pub fn evaluate_split(model: &Model, task: usize, split: &Split) -> Result<EvalMetrics> {
    if split.is_empty() {
        return Err(Error::contract("evaluation split is empty"));
    }
    let preds = model.predict(task, &split.x()?)?;
    let loss = model.split_loss(task, split)?;
    Ok(match model.task_kind {
        TaskKind::Regression => EvalMetrics {
            loss,
            mse: Some(loss),
            accuracy: None,
        },
        TaskKind::BinaryClassification => {
            let correct = preds
                .iter()
                .zip(&split.y)
                .filter(|(p, y)| (**p > 0.0) == (**y > 0.5))
                .count();
            EvalMetrics {
                loss,
                mse: None,
                accuracy: Some(correct as f64 / split.len() as f64),
            }
        }
    })
}

/// Metrics on the task's eval split.
pub fn evaluate(model: &Model, task: &TaskSpec) -> Result<EvalMetrics> {
    let idx = model.task_index(&task.id)?;
    evaluate_split(model, idx, &task.eval)
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdaptOutcome {
    pub model: Model,
    pub task_index: usize,
    pub pre: EvalMetrics,
    pub post: EvalMetrics,
    pub losses: Vec<f64>,
}

/// Which roles train in each adaptation phase. The base parameters stay
/// frozen throughout.
fn adapt_roles(kind: ModelKind, fixed: bool, train_phi: bool, first_phase: bool) -> Vec<ParamRole> {
    let mut roles = Vec::new();
    match kind {
        ModelKind::Hypernet => {
            roles.push(ParamRole::Embedding);
            if train_phi && !first_phase {
                roles.push(ParamRole::Generator);
            }
        }
        _ if !fixed => {
            roles.push(ParamRole::Allocation);
            if train_phi && !first_phase {
                roles.push(ParamRole::Skill);
            }
        }
        _ => {
            if train_phi {
                roles.push(ParamRole::Skill);
            }
        }
    }
    roles
}

/// Adds an unseen task to a copy of `model` and fits it on `k_shot` examples
/// drawn from the task's training split.
pub fn few_shot_adapt(
    model: &Model,
    task: &TaskSpec,
    adapt: &AdaptConfig,
    train: &TrainConfig,
    seed: u64,
) -> Result<AdaptOutcome> {
    adapt.validate()?;
    train.validate()?;
    if model.task_names.contains(&task.id) {
        return Err(Error::contract(format!("task `{}` was seen during training", task.id)));
    }
    if adapt.k_shot > task.train.len() {
        return Err(Error::contract(format!(
            "k_shot {} exceeds the {} available examples",
            adapt.k_shot,
            task.train.len()
        )));
    }
    let mut m = model.clone();
    let logit_init = 0.0;
    let t = m.add_task(&task.id, logit_init)?;
    let pre = evaluate_split(&m, t, &task.eval)?;
    if adapt.k_shot == 0 || adapt.steps == 0 {
        return Ok(AdaptOutcome {
            model: m,
            task_index: t,
            pre,
            post: pre,
            losses: Vec::new(),
        });
    }
    let mut rng = stream_rng(seed, 4);
    let shots: Vec<usize> = sample(&mut rng, task.train.len(), adapt.k_shot).into_vec();
    let support = task.train.select(&shots);
    let fixed = matches!(m.allocation, AllocationState::Fixed(_));
    let frozen_before: Vec<bool> = m.params.iter().map(|(_, p)| p.frozen).collect();
    let mut gumbel = stream_rng(seed, 5);
    let mut opt = build_two_speed_groups(&m.params, train.lr_z, train.lr_phi)?;
    let mut losses = Vec::with_capacity(adapt.steps);
    let mut phase: Option<bool> = None;
    for step in 0..adapt.steps {
        let first = step < adapt.z_only_steps;
        if phase != Some(first) {
            let roles = adapt_roles(m.kind, fixed, adapt.train_phi, first);
            m.params.set_frozen_where(true, |_| true);
            m.params.set_frozen_where(false, |p| roles.contains(&p.role));
            phase = Some(first);
        }
        let idx = sample_batch(&mut rng, support.len(), adapt.batch_size);
        let batch = support.select(&idx);
        let mut out = step_loss(&m, t, &batch, &mut AllocMode::Sample(&mut gumbel), None)?;
        if !out.loss.is_finite() {
            return Err(Error::NonFinite {
                step,
                task: task.id.clone(),
                loss: out.loss,
                reg_loss: 0.0,
            });
        }
        out.tape.backward(out.total)?;
        m.params.collect_grads(&out.tape, &out.vars)?;
        opt.step(&mut m.params)?;
        if m.masks_selected() && m.is_sparse() {
            m.apply_masks();
        }
        losses.push(out.loss);
    }
    for (id, f) in frozen_before.into_iter().enumerate() {
        m.params.get_mut(ParamId(id)).frozen = f;
    }
    let post = evaluate_split(&m, t, &task.eval)?;
    Ok(AdaptOutcome {
        model: m,
        task_index: t,
        pre,
        post,
        losses,
    })
}

/// Snapshot of every parameter value, for freeze assertions.
pub fn parameter_values(model: &Model) -> Vec<(String, Tensor)> {
    model
        .params
        .iter()
        .map(|(_, p)| (p.name.clone(), p.value.clone()))
        .collect()
}
