//! The learnable task-skill allocation.
//!
//! Each cell of the `[tasks, skills]` logits matrix parameterises a relaxed
//! Bernoulli variable. Training draws a Gumbel-sigmoid sample
//! `σ((z + logit(u)) / τ)`; evaluation uses the deterministic `u = 0.5` path
//! `σ(z / τ)`. Rows are normalised before parameters are composed.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{sigmoid, ReduceOp, Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::{Fill, Tensor};

/// Uniform draws are clamped to `[UNIFORM_EPS, 1 - UNIFORM_EPS]`.
pub const UNIFORM_EPS: f64 = 1e-7;

/// Row sums below this are treated as degenerate by [`normalize_rows`].
pub const MIN_ROW_SUM: f64 = 1e-12;

#[derive(Clone, Debug, PartialEq)]
pub struct AllocationLogits {
    pub z: Tensor,
    pub layer_id: usize,
}

impl AllocationLogits {
    pub fn num_tasks(&self) -> usize {
        self.z.rows()
    }

    pub fn num_skills(&self) -> usize {
        self.z.cols()
    }

    pub fn is_finite(&self) -> bool {
        self.z.is_finite()
    }

    /// Appends a row of `init_value` logits for a new task; returns its index.
    pub fn push_task(&mut self, init_value: f64) -> usize {
        let (t, s) = (self.num_tasks(), self.num_skills());
        let mut data = self.z.data().to_vec();
        data.extend(std::iter::repeat_n(init_value, s));
        let rg = self.z.requires_grad();
        self.z = Tensor::from_vec(&[t + 1, s], data)
            .expect("row length matches")
            .with_requires_grad(rg);
        t
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RelaxedAllocation {
    /// `[tasks, skills]`, entries strictly inside `(0, 1)` when produced by sampling.
    pub z_hat: Tensor,
    pub tau: f64,
    /// The clamped uniform draws, one per cell; `None` on the expected path.
    pub draws: Option<Vec<f64>>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BinaryAllocation {
    rows: usize,
    cols: usize,
    bits: Vec<u8>,
}

impl BinaryAllocation {
    pub fn from_rows(rows: &[Vec<u8>]) -> Result<Self> {
        let r = rows.len();
        let c = rows.first().map_or(0, Vec::len);
        if r == 0 || c == 0 {
            return Err(Error::shape("binary allocation needs at least one cell"));
        }
        if rows.iter().any(|row| row.len() != c) {
            return Err(Error::shape("ragged binary allocation"));
        }
        if rows.iter().flatten().any(|&b| b > 1) {
            return Err(Error::domain("binary allocation entries must be 0 or 1"));
        }
        Ok(BinaryAllocation {
            rows: r,
            cols: c,
            bits: rows.concat(),
        })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        BinaryAllocation {
            rows,
            cols,
            bits: vec![0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut b = Self::zeros(n, n);
        for i in 0..n {
            b.set(i, i, true);
        }
        b
    }

    pub fn ones(rows: usize, cols: usize) -> Self {
        BinaryAllocation {
            rows,
            cols,
            bits: vec![1; rows * cols],
        }
    }

    pub fn num_tasks(&self) -> usize {
        self.rows
    }

    pub fn num_skills(&self) -> usize {
        self.cols
    }

    pub fn get(&self, task: usize, skill: usize) -> bool {
        self.bits[task * self.cols + skill] == 1
    }

    pub fn set(&mut self, task: usize, skill: usize, on: bool) {
        self.bits[task * self.cols + skill] = u8::from(on);
    }

    pub fn row(&self, task: usize) -> &[u8] {
        &self.bits[task * self.cols..(task + 1) * self.cols]
    }

    pub fn column(&self, skill: usize) -> Vec<u8> {
        (0..self.rows).map(|i| self.bits[i * self.cols + skill]).collect()
    }

    pub fn column_sums(&self) -> Vec<usize> {
        (0..self.cols)
            .map(|j| (0..self.rows).filter(|&i| self.get(i, j)).count())
            .collect()
    }

    pub fn to_rows(&self) -> Vec<Vec<u8>> {
        (0..self.rows).map(|i| self.row(i).to_vec()).collect()
    }

    /// As a `[tasks, skills]` real matrix of zeros and ones.
    pub fn to_tensor(&self) -> Tensor {
        Tensor::from_vec(
            &[self.rows, self.cols],
            self.bits.iter().map(|&b| f64::from(b)).collect(),
        )
        .expect("dims are nonzero by construction")
    }

    /// Reorders columns: output column `k` is input column `perm[k]`.
    pub fn permute_columns(&self, perm: &[usize]) -> Self {
        let mut out = Self::zeros(self.rows, self.cols);
        for i in 0..self.rows {
            for (k, &j) in perm.iter().enumerate() {
                out.set(i, k, self.get(i, j));
            }
        }
        out
    }

    /// Appends the rows of `other` (same column count).
    pub fn stack(&self, other: &BinaryAllocation) -> Result<Self> {
        if other.cols != self.cols {
            return Err(Error::shape("stacking allocations with different skill counts"));
        }
        let mut bits = self.bits.clone();
        bits.extend_from_slice(&other.bits);
        Ok(BinaryAllocation {
            rows: self.rows + other.rows,
            cols: self.cols,
            bits,
        })
    }

    /// CSV with one line per task and one column per skill.
    pub fn to_csv(&self) -> String {
        let mut s = String::new();
        for i in 0..self.rows {
            let line: Vec<&str> = self
                .row(i)
                .iter()
                .map(|&b| if b == 1 { "1" } else { "0" })
                .collect();
            s.push_str(&line.join(","));
            s.push('\n');
        }
        s
    }
}

pub fn init_logits(num_tasks: usize, num_skills: usize, init_value: f64) -> Result<AllocationLogits> {
    if num_tasks == 0 || num_skills == 0 {
        return Err(Error::shape(format!(
            "allocation needs at least one task and one skill, got {num_tasks}x{num_skills}"
        )));
    }
    Ok(AllocationLogits {
        z: Tensor::new(&[num_tasks, num_skills], Fill::Constant(init_value))?,
        layer_id: 0,
    })
}

fn check_tau(tau: f64) -> Result<()> {
    if !(tau > 0.0) || !tau.is_finite() {
        return Err(Error::domain(format!("temperature must be positive, got {tau}")));
    }
    Ok(())
}

/// Draws `n` uniforms clamped away from 0 and 1.
pub fn draw_uniforms<R: Rng + ?Sized>(rng: &mut R, n: usize) -> Vec<f64> {
    (0..n)
        .map(|_| rng.random::<f64>().clamp(UNIFORM_EPS, 1.0 - UNIFORM_EPS))
        .collect()
}

/// Records `σ((z + logit(u)) / τ)` on the tape for fixed draws `u`.
///
/// The closed form is algebraically equal to
/// `σ((1/τ) · log[σ(z) u / ((1 − σ(z))(1 − u))])` since `log(σ(z)/(1−σ(z))) = z`.
pub fn gumbel_sigmoid_on_tape(tape: &mut Tape, z: Var, tau: f64, draws: &[f64]) -> Result<Var> {
    check_tau(tau)?;
    if draws.len() != tape.value(z).len() {
        return Err(Error::shape(format!(
            "{} draws for {} logits",
            draws.len(),
            tape.value(z).len()
        )));
    }
    let noise: Vec<f64> = draws.iter().map(|&u| (u / (1.0 - u)).ln()).collect();
    let shape = tape.shape(z).to_vec();
    let noise = tape.constant(&shape, noise)?;
    let shifted = tape.add(z, noise)?;
    let scaled = tape.scale(shifted, 1.0 / tau);
    tape.sigmoid(scaled)
}

/// Records the deterministic `σ(z / τ)` path.
pub fn expected_on_tape(tape: &mut Tape, z: Var, tau: f64) -> Result<Var> {
    check_tau(tau)?;
    let scaled = tape.scale(z, 1.0 / tau);
    tape.sigmoid(scaled)
}

pub fn gumbel_sigmoid_sample(logits: &AllocationLogits, tau: f64, seed: u64) -> Result<RelaxedAllocation> {
    check_tau(tau)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let draws = draw_uniforms(&mut rng, logits.z.numel());
    gumbel_sigmoid_with_draws(logits, tau, draws)
}

/// Gumbel-sigmoid sample for explicitly supplied uniforms (clamped).
pub fn gumbel_sigmoid_with_draws(
    logits: &AllocationLogits,
    tau: f64,
    draws: Vec<f64>,
) -> Result<RelaxedAllocation> {
    let draws: Vec<f64> = draws
        .into_iter()
        .map(|u| u.clamp(UNIFORM_EPS, 1.0 - UNIFORM_EPS))
        .collect();
    let mut tape = Tape::new();
    let z = tape.leaf(&logits.z);
    let out = gumbel_sigmoid_on_tape(&mut tape, z, tau, &draws)?;
    Ok(RelaxedAllocation {
        z_hat: tape.to_tensor(out),
        tau,
        draws: Some(draws),
    })
}

pub fn expected_allocation(logits: &AllocationLogits, tau: f64) -> Result<RelaxedAllocation> {
    check_tau(tau)?;
    let inv = 1.0 / tau;
    let data = logits.z.data().iter().map(|&z| sigmoid(z * inv)).collect();
    Ok(RelaxedAllocation {
        z_hat: Tensor::from_vec(logits.z.shape(), data)?,
        tau,
        draws: None,
    })
}

/// Divides every row by its sum; records the operation on the tape.
pub fn normalize_rows_on_tape(tape: &mut Tape, z_hat: Var) -> Result<Var> {
    let shape = tape.shape(z_hat).to_vec();
    if shape.len() != 2 {
        return Err(Error::shape(format!("row normalisation of shape {shape:?}")));
    }
    let (t, s) = (shape[0], shape[1]);
    let sums = tape.reduce(ReduceOp::Sum, z_hat, Some(1))?;
    if let Some(bad) = tape.value(sums).iter().position(|&v| v.abs() < MIN_ROW_SUM) {
        return Err(Error::Degenerate(format!("row {bad} sums to zero")));
    }
    // [t] -> [t, 1] -> broadcast over skills by dividing the transpose
    let sums_col = tape.reshape(sums, &[t, 1])?;
    let ones = tape.constant(&[1, s], vec![1.0; s])?;
    let denom = tape.matmul(sums_col, ones)?;
    tape.div(z_hat, denom)
}

pub fn normalize_rows(z_hat: &RelaxedAllocation) -> Result<Tensor> {
    normalize_matrix(&z_hat.z_hat)
}

/// Row normalisation of a plain `[tasks, skills]` matrix.
pub fn normalize_matrix(m: &Tensor) -> Result<Tensor> {
    let mut tape = Tape::new();
    let v = tape.leaf(m);
    let out = normalize_rows_on_tape(&mut tape, v)?;
    Ok(tape.to_tensor(out))
}

/// Rounds each cell at 0.5 (0.5 rounds up).
pub fn harden(z_hat: &RelaxedAllocation) -> BinaryAllocation {
    harden_matrix(&z_hat.z_hat)
}

pub fn harden_matrix(m: &Tensor) -> BinaryAllocation {
    let (r, c) = (m.rows(), m.cols());
    let bits = m.data().iter().map(|&v| u8::from(v >= 0.5)).collect();
    BinaryAllocation { rows: r, cols: c, bits }
}

fn check_unit_interval(m: &Tensor) -> Result<()> {
    if m.rank() != 2 {
        return Err(Error::shape(format!("metrics need a matrix, got {:?}", m.shape())));
    }
    if let Some(bad) = m.data().iter().find(|v| !(0.0..=1.0).contains(*v)) {
        return Err(Error::domain(format!("entry {bad} outside [0, 1]")));
    }
    Ok(())
}

/// Binary entropy in nats, with `H(0) = H(1) = 0`.
fn binary_entropy(p: f64) -> f64 {
    let term = |q: f64| if q > 0.0 { -q * q.ln() } else { 0.0 };
    term(p) + term(1.0 - p)
}

/// Mean normalised binary entropy of the cells: 0 for a binary matrix, 1 when
/// every cell is 0.5.
pub fn metric_discreteness(z_hat: &Tensor) -> Result<f64> {
    check_unit_interval(z_hat)?;
    let n = z_hat.numel() as f64;
    Ok(z_hat.data().iter().map(|&p| binary_entropy(p)).sum::<f64>() / (n * 2f64.ln()))
}

/// Fraction of cells that round to 1.
pub fn metric_sparsity(z_hat: &Tensor) -> Result<f64> {
    check_unit_interval(z_hat)?;
    let on = z_hat.data().iter().filter(|&&v| v >= 0.5).count();
    Ok(on as f64 / z_hat.numel() as f64)
}

/// Normalised entropy of the column-sum distribution.
pub fn metric_usage(z_hat: &Tensor) -> Result<f64> {
    check_unit_interval(z_hat)?;
    let (t, s) = (z_hat.rows(), z_hat.cols());
    let cols: Vec<f64> = (0..s)
        .map(|j| (0..t).map(|i| z_hat.data()[i * s + j]).sum())
        .collect();
    let total: f64 = cols.iter().sum();
    if !(total > 0.0) {
        return Err(Error::Degenerate("usage of an all-zero matrix".into()));
    }
    if s == 1 {
        return Ok(1.0);
    }
    let h: f64 = cols
        .iter()
        .map(|&c| c / total)
        .filter(|&p| p > 0.0)
        .map(|p| -p * p.ln())
        .sum();
    Ok(h / (s as f64).ln())
}

/// Summary of an allocation matrix for reports.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AllocationMetrics {
    pub discreteness: f64,
    pub sparsity: f64,
    pub usage: f64,
}

pub fn allocation_metrics(z_hat: &Tensor) -> Result<AllocationMetrics> {
    Ok(AllocationMetrics {
        discreteness: metric_discreteness(z_hat)?,
        sparsity: metric_sparsity(z_hat)?,
        usage: metric_usage(z_hat)?,
    })
}

/// On-disk form of one layer's allocation.
///
/// `binary` is always present. `logits` is present for learned allocations
/// and absent for fixed ones.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AllocationFile {
    pub tasks: Vec<String>,
    pub skills: usize,
    pub layer: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub logits: Option<Vec<Vec<f64>>>,
    pub binary: Vec<Vec<u8>>,
}

fn check_names(tasks: &[String], rows: usize) -> Result<()> {
    if tasks.len() != rows {
        return Err(Error::shape(format!(
            "{} task names for {rows} allocation rows",
            tasks.len()
        )));
    }
    Ok(())
}

impl AllocationFile {
    pub fn new(logits: &AllocationLogits, tasks: &[String]) -> Result<Self> {
        check_names(tasks, logits.num_tasks())?;
        Ok(AllocationFile {
            tasks: tasks.to_vec(),
            skills: logits.num_skills(),
            layer: logits.layer_id,
            logits: Some(logits.z.to_rows()),
            binary: harden(&expected_allocation(logits, 1.0)?).to_rows(),
        })
    }

    pub fn fixed(matrix: &BinaryAllocation, tasks: &[String], layer: usize) -> Result<Self> {
        check_names(tasks, matrix.num_tasks())?;
        Ok(AllocationFile {
            tasks: tasks.to_vec(),
            skills: matrix.num_skills(),
            layer,
            logits: None,
            binary: matrix.to_rows(),
        })
    }

    pub fn to_logits(&self) -> Result<AllocationLogits> {
        let rows = self
            .logits
            .as_ref()
            .ok_or_else(|| Error::State("fixed allocation has no logits".into()))?;
        if rows.len() != self.tasks.len() || rows.iter().any(|r| r.len() != self.skills) {
            return Err(Error::shape("allocation file rows do not match tasks x skills"));
        }
        let z = Tensor::from_rows(rows)?;
        if !z.is_finite() {
            return Err(Error::domain("allocation logits must be finite"));
        }
        Ok(AllocationLogits {
            z,
            layer_id: self.layer,
        })
    }

    /// Hardened matrix. With logits, `σ(z/τ) ≥ 0.5` iff `z ≥ 0` whatever the
    /// temperature, so the result agrees with `binary` as written.
    pub fn hardened(&self) -> Result<BinaryAllocation> {
        if self.logits.is_some() {
            let logits = self.to_logits()?;
            return Ok(harden(&expected_allocation(&logits, 1.0)?));
        }
        if self.binary.len() != self.tasks.len() || self.binary.iter().any(|r| r.len() != self.skills) {
            return Err(Error::shape("allocation file rows do not match tasks x skills"));
        }
        BinaryAllocation::from_rows(&self.binary)
    }
}
