//! Planted synthetic benchmark.
//!
//! Each task's target is a linear function of its input whose coefficient
//! vector is a shared base plus the mean of the task's active ground-truth
//! skills. Because the generating allocation is known, learned allocations
//! can be scored against it exactly.

use std::collections::BTreeSet;

use nalgebra::{DMatrix, DVector};
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::allocation::BinaryAllocation;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Resampling budget for a valid ground-truth allocation.
pub const MAX_WORLD_RESAMPLES: usize = 1000;

/// Independent RNG stream `stream` derived from the top-level `seed`.
pub fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    Regression,
    BinaryClassification,
}

/// Examples of one split, stored row-major so that an empty split is representable.
#[derive(Clone, Debug, PartialEq)]
pub struct Split {
    pub dim: usize,
    /// `len() * dim` input values.
    pub inputs: Vec<f64>,
    pub y: Vec<f64>,
}

impl Split {
    pub fn new(dim: usize, inputs: Vec<f64>, y: Vec<f64>) -> Result<Split> {
        if dim == 0 || inputs.len() != y.len() * dim {
            return Err(Error::shape(format!(
                "{} input values for {} targets of dimension {dim}",
                inputs.len(),
                y.len()
            )));
        }
        Ok(Split { dim, inputs, y })
    }

    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.inputs[i * self.dim..(i + 1) * self.dim]
    }

    /// Inputs as an `[n, dim]` tensor; a shape error when empty.
    pub fn x(&self) -> Result<Tensor> {
        Tensor::from_vec(&[self.len(), self.dim], self.inputs.clone())
    }

    /// Rows `idx` as a new split.
    pub fn select(&self, idx: &[usize]) -> Split {
        let mut inputs = Vec::with_capacity(idx.len() * self.dim);
        for &i in idx {
            inputs.extend_from_slice(self.row(i));
        }
        Split {
            dim: self.dim,
            inputs,
            y: idx.iter().map(|&i| self.y[i]).collect(),
        }
    }
}

/// One task with disjoint train, dev and eval examples.
#[derive(Clone, Debug, PartialEq)]
pub struct TaskSpec {
    pub id: String,
    pub kind: TaskKind,
    pub train: Split,
    pub dev: Split,
    pub eval: Split,
    pub planted_skills: Option<Vec<usize>>,
}

impl TaskSpec {
    pub fn input_dim(&self) -> usize {
        self.train.dim
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct WorldConfig {
    pub num_tasks: usize,
    pub num_true_skills: usize,
    pub input_dim: usize,
    pub examples_per_task: usize,
    pub dev_per_task: usize,
    pub eval_per_task: usize,
    pub noise_sigma: f64,
    /// Inclusive `[min, max]` number of active skills per task.
    pub skills_per_task: [usize; 2],
    pub num_heldout: usize,
    pub task_kind: TaskKind,
}

impl Default for WorldConfig {
    fn default() -> Self {
        WorldConfig {
            num_tasks: 16,
            num_true_skills: 4,
            input_dim: 16,
            examples_per_task: 64,
            dev_per_task: 32,
            eval_per_task: 128,
            noise_sigma: 0.0,
            skills_per_task: [1, 3],
            num_heldout: 4,
            task_kind: TaskKind::Regression,
        }
    }
}

impl WorldConfig {
    pub fn validate(&self) -> Result<()> {
        let [lo, hi] = self.skills_per_task;
        if self.num_tasks == 0 || self.num_true_skills == 0 || self.input_dim == 0 {
            return Err(Error::contract("tasks, skills and input_dim must be positive"));
        }
        if self.num_true_skills > self.num_tasks {
            return Err(Error::contract(format!(
                "{} true skills exceed {} tasks",
                self.num_true_skills, self.num_tasks
            )));
        }
        if lo == 0 || lo > hi || hi > self.num_true_skills {
            return Err(Error::contract(format!(
                "skills_per_task [{lo}, {hi}] not within [1, {}]",
                self.num_true_skills
            )));
        }
        if self.examples_per_task == 0 || self.eval_per_task == 0 {
            return Err(Error::contract("train and eval splits must be non-empty"));
        }
        if !(self.noise_sigma >= 0.0) {
            return Err(Error::domain("noise_sigma must be non-negative"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticWorld {
    pub true_z: BinaryAllocation,
    /// `[num_true_skills, input_dim]`, unit-norm rows.
    pub true_skills: Tensor,
    /// `[input_dim]`, unit norm.
    pub true_base: Vec<f64>,
    /// Planted subsets of the held-out tasks, `[num_heldout, num_true_skills]`.
    pub heldout_z: BinaryAllocation,
    pub noise_sigma: f64,
    pub seed: u64,
}

impl SyntheticWorld {
    /// `θ0* + mean of the active true skills`.
    pub fn coefficients(&self, subset: &[u8]) -> Vec<f64> {
        let d = self.true_base.len();
        let active: Vec<usize> = (0..subset.len()).filter(|&j| subset[j] == 1).collect();
        let mut theta = self.true_base.clone();
        for &j in &active {
            for (t, s) in theta.iter_mut().zip(self.true_skills.row(j)) {
                *t += s / active.len() as f64;
            }
        }
        debug_assert_eq!(theta.len(), d);
        theta
    }
}

fn unit_vector<R: Rng>(rng: &mut R, d: usize) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..d).map(|_| StandardNormal.sample(rng)).collect();
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 1e-12 {
            return v.into_iter().map(|x| x / n).collect();
        }
    }
}

/// No empty row, no empty column, pairwise distinct columns.
pub fn is_valid_allocation(z: &BinaryAllocation) -> bool {
    let rows_ok = (0..z.num_tasks()).all(|i| z.row(i).contains(&1));
    let cols: Vec<Vec<u8>> = (0..z.num_skills()).map(|j| z.column(j)).collect();
    let cols_ok = cols.iter().all(|c| c.contains(&1));
    let distinct = cols.iter().collect::<BTreeSet<_>>().len() == cols.len();
    rows_ok && cols_ok && distinct
}

fn random_row<R: Rng>(rng: &mut R, s: usize, lo: usize, hi: usize) -> Vec<u8> {
    let k = rng.random_range(lo..=hi);
    let mut row = vec![0u8; s];
    for j in sample(rng, s, k) {
        row[j] = 1;
    }
    row
}

fn sample_true_z<R: Rng>(rng: &mut R, cfg: &WorldConfig) -> Result<BinaryAllocation> {
    let [lo, hi] = cfg.skills_per_task;
    for _ in 0..MAX_WORLD_RESAMPLES {
        let rows: Vec<Vec<u8>> = (0..cfg.num_tasks)
            .map(|_| random_row(rng, cfg.num_true_skills, lo, hi))
            .collect();
        let z = BinaryAllocation::from_rows(&rows)?;
        if is_valid_allocation(&z) {
            return Ok(z);
        }
    }
    Err(Error::Generation(format!(
        "no valid {}x{} allocation after {MAX_WORLD_RESAMPLES} resamples",
        cfg.num_tasks, cfg.num_true_skills
    )))
}

/// Held-out subsets are unions of two training subsets, preferring unions
/// that no training task uses.
fn sample_heldout<R: Rng>(rng: &mut R, z: &BinaryAllocation, n: usize) -> Result<BinaryAllocation> {
    let t = z.num_tasks();
    let s = z.num_skills();
    let seen: BTreeSet<Vec<u8>> = (0..t).map(|i| z.row(i).to_vec()).collect();
    let mut rows = Vec::with_capacity(n);
    for _ in 0..n {
        let mut fallback = None;
        let mut chosen = None;
        for _ in 0..MAX_WORLD_RESAMPLES {
            let a = rng.random_range(0..t);
            let b = rng.random_range(0..t);
            let u: Vec<u8> = (0..s).map(|j| z.row(a)[j] | z.row(b)[j]).collect();
            if !seen.contains(&u) {
                chosen = Some(u);
                break;
            }
            fallback.get_or_insert(u);
        }
        rows.push(chosen.or(fallback).expect("at least one draw"));
    }
    if rows.is_empty() {
        return Ok(BinaryAllocation::zeros(0, s));
    }
    BinaryAllocation::from_rows(&rows)
}

fn make_split<R: Rng>(
    rng: &mut R,
    n: usize,
    theta: &[f64],
    noise: &Normal<f64>,
    kind: TaskKind,
) -> Split {
    let d = theta.len();
    let mut x = Vec::with_capacity(n * d);
    let mut y = Vec::with_capacity(n);
    for _ in 0..n {
        let row: Vec<f64> = (0..d).map(|_| StandardNormal.sample(rng)).collect();
        let clean: f64 = row.iter().zip(theta).map(|(a, b)| a * b).sum();
        let v = clean + noise.sample(rng);
        y.push(match kind {
            TaskKind::Regression => v,
            TaskKind::BinaryClassification => f64::from(u8::from(v > 0.0)),
        });
        x.extend(row);
    }
    Split { dim: d, inputs: x, y }
}

pub fn task_name(i: usize) -> String {
    format!("task-{i:02}")
}

pub fn heldout_name(i: usize) -> String {
    format!("heldout-{i:02}")
}

/// Planted world plus its training tasks and held-out tasks, in that order.
pub fn generate_synthetic_benchmark(
    seed: u64,
    cfg: &WorldConfig,
) -> Result<(SyntheticWorld, Vec<TaskSpec>, Vec<TaskSpec>)> {
    cfg.validate()?;
    let mut rng = stream_rng(seed, 0);
    let true_skills: Vec<f64> = (0..cfg.num_true_skills)
        .flat_map(|_| unit_vector(&mut rng, cfg.input_dim))
        .collect();
    let world_base = unit_vector(&mut rng, cfg.input_dim);
    let true_z = sample_true_z(&mut rng, cfg)?;
    let heldout_z = sample_heldout(&mut rng, &true_z, cfg.num_heldout)?;
    let world = SyntheticWorld {
        true_z,
        true_skills: Tensor::from_vec(&[cfg.num_true_skills, cfg.input_dim], true_skills)?,
        true_base: world_base,
        heldout_z,
        noise_sigma: cfg.noise_sigma,
        seed,
    };
    let noise = Normal::new(0.0, cfg.noise_sigma).map_err(|e| Error::domain(e.to_string()))?;
    let mut build = |name: String, subset: &[u8]| {
        let theta = world.coefficients(subset);
        TaskSpec {
            id: name,
            kind: cfg.task_kind,
            train: make_split(&mut rng, cfg.examples_per_task, &theta, &noise, cfg.task_kind),
            dev: make_split(&mut rng, cfg.dev_per_task, &theta, &noise, cfg.task_kind),
            eval: make_split(&mut rng, cfg.eval_per_task, &theta, &noise, cfg.task_kind),
            planted_skills: Some((0..subset.len()).filter(|&j| subset[j] == 1).collect()),
        }
    };
    let train: Vec<TaskSpec> = (0..cfg.num_tasks)
        .map(|i| build(task_name(i), world.true_z.row(i)))
        .collect();
    let heldout: Vec<TaskSpec> = (0..cfg.num_heldout)
        .map(|i| build(heldout_name(i), world.heldout_z.row(i)))
        .collect();
    Ok((world, train, heldout))
}

/// Mean squared error of `x·θ` on a split.
pub fn linear_mse(split: &Split, theta: &[f64]) -> f64 {
    let n = split.len();
    (0..n)
        .map(|r| {
            let p: f64 = split.row(r).iter().zip(theta).map(|(a, b)| a * b).sum();
            (p - split.y[r]).powi(2)
        })
        .sum::<f64>()
        / n as f64
}

/// Best attainable mean train MSE over the tasks by one affine predictor
/// shared across all of them (ordinary least squares on the pooled data,
/// tasks weighted equally).
pub fn shared_oracle_loss(tasks: &[TaskSpec]) -> Result<f64> {
    if tasks.is_empty() {
        return Err(Error::contract("shared oracle needs at least one task"));
    }
    let d = tasks[0].input_dim();
    let mut rows = Vec::new();
    let mut ys = Vec::new();
    for t in tasks {
        let w = (1.0 / t.train.len() as f64).sqrt();
        for r in 0..t.train.len() {
            rows.extend(t.train.row(r).iter().map(|v| v * w));
            rows.push(w);
            ys.push(t.train.y[r] * w);
        }
    }
    let a = DMatrix::from_row_slice(ys.len(), d + 1, &rows);
    let b = DVector::from_vec(ys);
    let sol = a
        .clone()
        .svd(true, true)
        .solve(&b, 1e-12)
        .map_err(|e| Error::Degenerate(e.to_string()))?;
    let resid = &a * &sol - &b;
    Ok(resid.norm_squared() / tasks.len() as f64)
}
