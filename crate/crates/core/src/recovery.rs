//! Agreement between a learned allocation and the planted one, up to a
//! relabelling of skills.

use pathfinding::kuhn_munkres::kuhn_munkres;
use pathfinding::matrix::Matrix;
use serde::{Deserialize, Serialize};

use crate::allocation::BinaryAllocation;
use crate::error::{Error, Result};

/// Largest planted inventory scored by exhaustive search under `Auto`.
pub const EXACT_MAX_TRUE_SKILLS: usize = 8;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RecoveryMethod {
    Auto,
    Exact,
    Hungarian,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RecoveryScore {
    /// `best_permutation[j]` is the learned column matched to true column `j`.
    pub best_permutation: Vec<usize>,
    /// Fraction of the `T x |S*|` matched cells that agree.
    pub cell_accuracy: f64,
}

/// `agree[j][c]`: rows on which true column `j` and learned column `c` agree.
fn agreement(learned: &BinaryAllocation, truth: &BinaryAllocation) -> Vec<Vec<i64>> {
    (0..truth.num_skills())
        .map(|j| {
            (0..learned.num_skills())
                .map(|c| {
                    (0..truth.num_tasks())
                        .filter(|&i| truth.get(i, j) == learned.get(i, c))
                        .count() as i64
                })
                .collect()
        })
        .collect()
}

/// Dynamic programme over learned columns and the set of true columns
/// already matched.
fn exact(agree: &[Vec<i64>], learned: usize) -> (i64, Vec<usize>) {
    let k = agree.len();
    let full = 1usize << k;
    const NONE: i64 = i64::MIN / 2;
    // best[c][mask]: best score using learned columns c.. with `mask` matched
    let mut best = vec![vec![NONE; full]; learned + 1];
    best[learned][full - 1] = 0;
    for c in (0..learned).rev() {
        for mask in 0..full {
            let mut v = best[c + 1][mask];
            for j in 0..k {
                if mask & (1 << j) == 0 {
                    let nxt = best[c + 1][mask | (1 << j)];
                    if nxt > NONE {
                        v = v.max(nxt + agree[j][c]);
                    }
                }
            }
            best[c][mask] = v;
        }
    }
    let mut perm = vec![usize::MAX; k];
    let mut mask = 0usize;
    for c in 0..learned {
        let target = best[c][mask];
        if best[c + 1][mask] == target {
            continue;
        }
        let j = (0..k)
            .find(|&j| mask & (1 << j) == 0 && best[c + 1][mask | (1 << j)] + agree[j][c] == target)
            .expect("a consistent choice exists");
        perm[j] = c;
        mask |= 1 << j;
    }
    (best[0][0], perm)
}

fn hungarian(agree: &[Vec<i64>]) -> Result<(i64, Vec<usize>)> {
    let m = Matrix::from_rows(agree.iter().cloned()).map_err(|e| Error::shape(e.to_string()))?;
    let (total, perm) = kuhn_munkres(&m);
    Ok((total, perm))
}

pub fn skill_recovery_score(learned: &BinaryAllocation, truth: &BinaryAllocation) -> Result<RecoveryScore> {
    skill_recovery_score_with(learned, truth, RecoveryMethod::Auto)
}

pub fn skill_recovery_score_with(
    learned: &BinaryAllocation,
    truth: &BinaryAllocation,
    method: RecoveryMethod,
) -> Result<RecoveryScore> {
    if learned.num_tasks() != truth.num_tasks() {
        return Err(Error::shape(format!(
            "learned allocation has {} tasks, planted {}",
            learned.num_tasks(),
            truth.num_tasks()
        )));
    }
    let (s, k) = (learned.num_skills(), truth.num_skills());
    if s < k {
        return Err(Error::contract(format!(
            "{s} learned skills cannot cover {k} planted skills"
        )));
    }
    let agree = agreement(learned, truth);
    let use_exact = match method {
        RecoveryMethod::Exact => true,
        RecoveryMethod::Hungarian => false,
        RecoveryMethod::Auto => k <= EXACT_MAX_TRUE_SKILLS,
    };
    let (total, perm) = if use_exact {
        if k > 20 {
            return Err(Error::contract(format!("exhaustive search over {k} skills")));
        }
        exact(&agree, s)
    } else {
        hungarian(&agree)?
    };
    let cells = (truth.num_tasks() * k) as f64;
    Ok(RecoveryScore {
        best_permutation: perm,
        cell_accuracy: if cells == 0.0 { 1.0 } else { total as f64 / cells },
    })
}
