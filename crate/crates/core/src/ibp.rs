//! Indian Buffet Process prior over binary task-skill matrices.
//!
//! `log p(Z | α) = |S⁺| log α − Σ_h log K_h! − α Σ_i H_i
//!                + Σ_{j: m_j>0} [log (T − m_j)! + log (m_j − 1)! − log T!]`
//!
//! where `m_j` is the number of tasks using skill `j`, `K_h` the number of
//! columns sharing binary history `h`, `H_i` the `i`-th harmonic number and
//! `|S⁺|` the count of non-empty columns. Empty columns are left out: the
//! process only generates matrices whose columns are used at least once.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use statrs::function::gamma::ln_gamma;

use crate::allocation::{harden_matrix, BinaryAllocation};
use crate::autodiff::{ReduceOp, Tape, UnaryOp, Var};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IbpConfig {
    #[serde(default = "default_alpha")]
    pub alpha: f64,
    /// Coefficient on the negated log-prior added to the loss; 0 disables it.
    #[serde(default)]
    pub strength: f64,
}

fn default_alpha() -> f64 {
    5.0
}

impl Default for IbpConfig {
    fn default() -> Self {
        IbpConfig {
            alpha: default_alpha(),
            strength: 0.0,
        }
    }
}

fn check_alpha(alpha: f64) -> Result<()> {
    if !(alpha > 0.0) || !alpha.is_finite() {
        return Err(Error::domain(format!("IBP concentration must be positive, got {alpha}")));
    }
    Ok(())
}

fn ln_factorial(n: f64) -> f64 {
    ln_gamma(n + 1.0)
}

fn harmonic_sum(num_tasks: usize) -> f64 {
    // Σ_{i=1..T} H_i
    let mut h = 0.0;
    let mut total = 0.0;
    for i in 1..=num_tasks {
        h += 1.0 / i as f64;
        total += h;
    }
    total
}

/// `Σ_h log K_h!` over the non-empty column histories, grouped by the
/// actual column bit patterns.
fn history_term(z: &BinaryAllocation) -> f64 {
    let mut counts: BTreeMap<Vec<u8>, usize> = BTreeMap::new();
    for j in 0..z.num_skills() {
        let col = z.column(j);
        if col.contains(&1) {
            *counts.entry(col).or_default() += 1;
        }
    }
    counts.values().map(|&k| ln_factorial(k as f64)).sum()
}

/// Terms of the log-prior that do not depend on the column sums.
fn constant_terms(z: &BinaryAllocation, alpha: f64) -> (f64, usize) {
    let active = z.column_sums().iter().filter(|&&m| m > 0).count();
    let t = z.num_tasks();
    let c = active as f64 * alpha.ln() - history_term(z) - alpha * harmonic_sum(t)
        - active as f64 * ln_factorial(t as f64);
    (c, active)
}

pub fn ibp_log_prob(z: &BinaryAllocation, alpha: f64) -> Result<f64> {
    check_alpha(alpha)?;
    let t = z.num_tasks() as f64;
    let (c, _) = constant_terms(z, alpha);
    // sorted so the value does not depend on column order, bit for bit
    let mut sums = z.column_sums();
    sums.sort_unstable();
    let per_skill: f64 = sums
        .into_iter()
        .filter(|&m| m > 0)
        .map(|m| {
            let m = m as f64;
            ln_factorial(t - m) + ln_factorial(m - 1.0)
        })
        .sum();
    Ok(c + per_skill)
}

/// Relaxed log-prior of a continuous `[tasks, skills]` matrix on the tape.
///
/// Column sums are taken from the continuous entries and the factorials
/// continued through `ln Γ(x + 1)`. Which columns count as used, and the
/// history term, come from the hardened matrix and carry no gradient. On a
/// binary input this equals [`ibp_log_prob`].
pub fn ibp_log_prob_relaxed_on_tape(tape: &mut Tape, z_hat: Var, alpha: f64) -> Result<Var> {
    check_alpha(alpha)?;
    let shape = tape.shape(z_hat).to_vec();
    if shape.len() != 2 {
        return Err(Error::shape(format!("IBP prior of shape {shape:?}")));
    }
    let t = shape[0] as f64;
    let hard = harden_matrix(&tape.to_tensor(z_hat));
    let (c, _) = constant_terms(&hard, alpha);
    let active: Vec<usize> = hard
        .column_sums()
        .iter()
        .enumerate()
        .filter(|(_, &m)| m > 0)
        .map(|(j, _)| j)
        .collect();
    let constant = tape.scalar(c);
    if active.is_empty() {
        return Ok(constant);
    }
    let sums = tape.reduce(ReduceOp::Sum, z_hat, Some(0))?;
    let parts: Vec<Var> = active
        .iter()
        .map(|&j| tape.slice(sums, j, &[1]))
        .collect::<Result<_>>()?;
    let m = tape.concat(&parts)?;
    // ln (T − m)! = ln Γ(T − m + 1)
    let neg = tape.scale(m, -1.0);
    let shift = tape.constant(&[1], vec![t + 1.0])?;
    let rest = tape.add(neg, shift)?;
    let lg_rest = tape.unary(UnaryOp::LnGamma, rest)?;
    // ln (m − 1)! = ln Γ(m)
    let lg_m = tape.unary(UnaryOp::LnGamma, m)?;
    let s1 = tape.sum(lg_rest)?;
    let s2 = tape.sum(lg_m)?;
    let s = tape.add(s1, s2)?;
    tape.add(s, constant)
}

/// `−strength · log p̃(Ẑ | α)`, the term added to the training loss.
pub fn ibp_regularizer(tape: &mut Tape, z_hat: Var, cfg: &IbpConfig) -> Result<Var> {
    if !(cfg.strength >= 0.0) {
        return Err(Error::domain(format!(
            "IBP strength must be non-negative, got {}",
            cfg.strength
        )));
    }
    if cfg.strength == 0.0 {
        return Ok(tape.scalar(0.0));
    }
    let lp = ibp_log_prob_relaxed_on_tape(tape, z_hat, cfg.alpha)?;
    Ok(tape.scale(lp, -cfg.strength))
}
