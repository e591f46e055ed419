//! Comparison systems: fixed allocations (private, shared, expert) and a
//! hypernetwork that generates per-task low-rank deltas from task embeddings.

use std::collections::BTreeMap;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Uniform};
use serde::{Deserialize, Serialize};

use crate::allocation::BinaryAllocation;
use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::{Fill, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FixedKind {
    Private,
    Shared,
    Expert,
}

/// A task-skill matrix that is never trained.
#[derive(Clone, Debug, PartialEq)]
pub struct FixedAllocation {
    pub kind: FixedKind,
    pub matrix: BinaryAllocation,
}

fn check_tasks(num_tasks: usize) -> Result<()> {
    if num_tasks == 0 {
        return Err(Error::contract("at least one task is required"));
    }
    Ok(())
}

/// One skill per task: `Z = I`.
pub fn allocation_private(num_tasks: usize) -> Result<FixedAllocation> {
    check_tasks(num_tasks)?;
    Ok(FixedAllocation {
        kind: FixedKind::Private,
        matrix: BinaryAllocation::identity(num_tasks),
    })
}

/// A single skill shared by every task: `Z = 1` of shape `[T, 1]`.
pub fn allocation_shared(num_tasks: usize) -> Result<FixedAllocation> {
    check_tasks(num_tasks)?;
    Ok(FixedAllocation {
        kind: FixedKind::Shared,
        matrix: BinaryAllocation::ones(num_tasks, 1),
    })
}

/// Hand-specified mapping from task name to active skill indices.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExpertTable {
    pub tasks: BTreeMap<String, Vec<usize>>,
    pub num_skills: usize,
}

impl ExpertTable {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Ok(serde_json::from_str(&text)?)
    }

    pub fn from_allocation(z: &BinaryAllocation, names: &[String]) -> Result<Self> {
        if names.len() != z.num_tasks() {
            return Err(Error::shape(format!(
                "{} names for {} tasks",
                names.len(),
                z.num_tasks()
            )));
        }
        let tasks = names
            .iter()
            .enumerate()
            .map(|(i, n)| {
                let skills = (0..z.num_skills()).filter(|&j| z.get(i, j)).collect();
                (n.clone(), skills)
            })
            .collect();
        Ok(ExpertTable {
            tasks,
            num_skills: z.num_skills(),
        })
    }

    pub fn skills_of(&self, task: &str) -> Result<&[usize]> {
        self.tasks
            .get(task)
            .map(Vec::as_slice)
            .ok_or_else(|| Error::Lookup(format!("task `{task}` is not in the expert table")))
    }

    /// Binary row for `task`, validated against the table's skill count.
    pub fn row(&self, task: &str) -> Result<Vec<u8>> {
        let skills = self.skills_of(task)?;
        if skills.is_empty() {
            return Err(Error::contract(format!("task `{task}` has an empty skill set")));
        }
        let mut row = vec![0u8; self.num_skills];
        for &j in skills {
            if j >= self.num_skills {
                return Err(Error::contract(format!(
                    "task `{task}` lists skill {j} but only {} exist",
                    self.num_skills
                )));
            }
            row[j] = 1;
        }
        Ok(row)
    }
}

/// Matrix with a 1 at each listed `(task, skill)` cell, rows in `task_order`.
pub fn allocation_expert(table: &ExpertTable, task_order: &[String]) -> Result<FixedAllocation> {
    check_tasks(task_order.len())?;
    let rows = task_order
        .iter()
        .map(|t| table.row(t))
        .collect::<Result<Vec<_>>>()?;
    Ok(FixedAllocation {
        kind: FixedKind::Expert,
        matrix: BinaryAllocation::from_rows(&rows)?,
    })
}

/// `f(e) = W2 · ReLU(W1 · e)`.
#[derive(Clone, Debug, PartialEq)]
pub struct Generator {
    /// `[hidden, embed]`
    pub w1: Tensor,
    /// `[out, hidden]`
    pub w2: Tensor,
}

/// Generators for one linear layer `out x in` at rank `rank`.
#[derive(Clone, Debug, PartialEq)]
pub struct HyperLayer {
    pub out_dim: usize,
    pub in_dim: usize,
    pub rank: usize,
    pub gen_a: Generator,
    pub gen_b: Generator,
}

#[derive(Clone, Debug, PartialEq)]
pub struct HyperNet {
    /// `[num_tasks, embed]`
    pub task_embeddings: Tensor,
    pub layers: Vec<HyperLayer>,
}

/// Embedding entries start uniform in `[-1, 1]`.
pub fn init_embedding(embed: usize, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dist = Uniform::new_inclusive(-1.0, 1.0).expect("valid range");
    (0..embed).map(|_| dist.sample(&mut rng)).collect()
}

impl HyperLayer {
    /// The `A` generator's output weights start at zero so generated deltas
    /// vanish at initialisation.
    pub fn new(out_dim: usize, in_dim: usize, rank: usize, embed: usize, seed: u64) -> Result<Self> {
        if rank == 0 || rank > out_dim.min(in_dim) {
            return Err(Error::shape(format!(
                "rank {rank} outside [1, min({out_dim}, {in_dim})]"
            )));
        }
        let hidden = embed;
        Ok(HyperLayer {
            out_dim,
            in_dim,
            rank,
            gen_a: Generator {
                w1: Tensor::new(&[hidden, embed], Fill::KaimingUniform { seed })?,
                w2: Tensor::new(&[out_dim * rank, hidden], Fill::Zeros)?,
            },
            gen_b: Generator {
                w1: Tensor::new(&[hidden, embed], Fill::KaimingUniform { seed: seed ^ 0x51 })?,
                w2: Tensor::new(&[rank * in_dim, hidden], Fill::KaimingUniform { seed: seed ^ 0xa3 })?,
            },
        })
    }

    pub fn scalar_count(&self) -> usize {
        self.gen_a.w1.numel() + self.gen_a.w2.numel() + self.gen_b.w1.numel() + self.gen_b.w2.numel()
    }
}

impl HyperNet {
    pub fn num_tasks(&self) -> usize {
        self.task_embeddings.rows()
    }

    pub fn embed_dim(&self) -> usize {
        self.task_embeddings.cols()
    }

    /// Appends a fresh embedding row and returns its index.
    pub fn push_task(&mut self, seed: u64) -> usize {
        let e = self.embed_dim();
        let t = self.num_tasks();
        let mut data = self.task_embeddings.data().to_vec();
        data.extend(init_embedding(e, seed));
        self.task_embeddings = Tensor::from_vec(&[t + 1, e], data).expect("consistent shape");
        t
    }
}

/// `W2 · ReLU(W1 · e)` with `e: [embed]`, returned as `[out]`.
pub fn generator_on_tape(tape: &mut Tape, e: Var, w1: Var, w2: Var) -> Result<Var> {
    let embed = tape.shape(e).iter().product::<usize>();
    let ecol = tape.reshape(e, &[embed, 1])?;
    let h = tape.matmul(w1, ecol)?;
    let h = tape.relu(h)?;
    let out = tape.matmul(w2, h)?;
    let n = tape.shape(out)[0];
    tape.reshape(out, &[n])
}

/// Generated `(A: [out, rank], B: [rank, in])` on the tape. The generator
/// output vectors are read row-major.
#[allow(clippy::too_many_arguments)]
pub fn generate_on_tape(
    tape: &mut Tape,
    e: Var,
    gen_a: (Var, Var),
    gen_b: (Var, Var),
    out_dim: usize,
    rank: usize,
    in_dim: usize,
) -> Result<(Var, Var)> {
    let fa = generator_on_tape(tape, e, gen_a.0, gen_a.1)?;
    let fb = generator_on_tape(tape, e, gen_b.0, gen_b.1)?;
    let a = tape.reshape(fa, &[out_dim, rank])?;
    let b = tape.reshape(fb, &[rank, in_dim])?;
    Ok((a, b))
}

/// Per-task LoRA factors for layer `layer` of `net`.
pub fn hypernet_generate(net: &HyperNet, task: usize, layer: usize) -> Result<(Tensor, Tensor)> {
    if task >= net.num_tasks() {
        return Err(Error::Lookup(format!(
            "task {task} has no embedding ({} known)",
            net.num_tasks()
        )));
    }
    let hl = net
        .layers
        .get(layer)
        .ok_or_else(|| Error::Lookup(format!("hypernetwork has no layer {layer}")))?;
    let mut tape = Tape::new();
    let e = tape.constant(&[net.embed_dim()], net.task_embeddings.row(task).to_vec())?;
    let ga = (tape.leaf(&hl.gen_a.w1), tape.leaf(&hl.gen_a.w2));
    let gb = (tape.leaf(&hl.gen_b.w1), tape.leaf(&hl.gen_b.w2));
    let (a, b) = generate_on_tape(&mut tape, e, ga, gb, hl.out_dim, hl.rank, hl.in_dim)?;
    Ok((tape.to_tensor(a), tape.to_tensor(b)))
}

/// Generator parameters for the four attention projections of `layers`
/// layers of width `hidden` with embedding size `embed`: `4·l·(2·h·e + 2·e)·e`.
/// This equals the weights of [`HyperLayer`] generators when the generated
/// rank and the generator hidden size both equal `embed`.
pub fn param_count_hyperformer(layers: u64, hidden: u64, embed: u64) -> u64 {
    4 * layers * (2 * hidden * embed + 2 * embed) * embed
}
