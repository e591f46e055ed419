//! Per-task feed-forward networks whose layer parameters come from a skill
//! inventory (or, for the hypernetwork baseline, from generators).

use std::fmt;
use std::str::FromStr;

use rand::{Rng, RngCore};
use serde::{Deserialize, Serialize};

use crate::allocation::{
    draw_uniforms, expected_on_tape, gumbel_sigmoid_on_tape, harden_matrix, init_logits,
    normalize_rows_on_tape, AllocationFile, AllocationLogits, BinaryAllocation,
};
use crate::autodiff::{Tape, UnaryOp, Var};
use crate::baselines::{
    allocation_expert, allocation_private, allocation_shared, generate_on_tape, init_embedding,
    ExpertTable, FixedAllocation, FixedKind, HyperLayer,
};
use crate::error::{Error, Result};
use crate::optim::{ParamId, ParamRole, ParamSet};
use crate::skills::{compose_on_tape, keep_count, lora_on_tape, select_sparse_mask};
use crate::tensor::{Fill, Tensor};
use crate::world::{stream_rng, Split, TaskKind};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    Skilled,
    Private,
    Shared,
    Expert,
    Hypernet,
}

impl ModelKind {
    pub const ALL: [ModelKind; 5] = [
        ModelKind::Skilled,
        ModelKind::Shared,
        ModelKind::Private,
        ModelKind::Expert,
        ModelKind::Hypernet,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            ModelKind::Skilled => "skilled",
            ModelKind::Private => "private",
            ModelKind::Shared => "shared",
            ModelKind::Expert => "expert",
            ModelKind::Hypernet => "hypernet",
        }
    }
}

impl fmt::Display for ModelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ModelKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        ModelKind::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| Error::Lookup(format!("unknown model kind `{s}`")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum Parameterisation {
    Dense {},
    /// Dense for `warmup_steps`, then restricted to the top entries by change.
    Sparse {
        sparsity: f64,
        #[serde(default = "default_warmup")]
        warmup_steps: usize,
    },
    /// Low-rank skills on each layer's weight; the rank is capped at
    /// `min(out, in)` per layer.
    LowRank { rank: usize },
}

fn default_warmup() -> usize {
    100
}

impl Default for Parameterisation {
    fn default() -> Self {
        Parameterisation::Dense {}
    }
}

/// Initial values of dense skill rows. Low-rank `A` factors always start at zero.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SkillInit {
    /// Kaiming-uniform weights and zero biases, like the base parameters.
    #[default]
    Kaiming,
    /// Every skill starts as a zero delta on the base.
    Zeros,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub kind: ModelKind,
    /// Inventory size for the learned allocation; the fixed baselines derive theirs.
    pub num_skills: usize,
    pub parameterisation: Parameterisation,
    /// Width of the hidden layer; 0 gives a single linear layer.
    pub hidden_dim: usize,
    pub skill_init: SkillInit,
    /// Separate allocation per layer rather than one for the whole network.
    pub per_layer_allocation: bool,
    pub logit_init: f64,
    pub hyper_embedding_dim: usize,
    /// Rank of generated deltas, capped at `min(out, in)` per layer.
    pub hyper_rank: usize,
    /// Fixed allocation for the expert baseline; the planted one is used when absent.
    pub expert_table: Option<ExpertTable>,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            kind: ModelKind::Skilled,
            num_skills: 4,
            parameterisation: Parameterisation::Dense {},
            hidden_dim: 32,
            skill_init: SkillInit::Kaiming,
            per_layer_allocation: true,
            logit_init: 0.0,
            hyper_embedding_dim: 8,
            hyper_rank: 4,
            expert_table: None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerDims {
    pub out_dim: usize,
    pub in_dim: usize,
}

impl LayerDims {
    /// Flattened weight plus bias.
    pub fn flat_len(&self) -> usize {
        self.out_dim * self.in_dim + self.out_dim
    }
}

pub fn layer_dims(input_dim: usize, hidden_dim: usize) -> Vec<LayerDims> {
    if hidden_dim == 0 {
        vec![LayerDims { out_dim: 1, in_dim: input_dim }]
    } else {
        vec![
            LayerDims { out_dim: hidden_dim, in_dim: input_dim },
            LayerDims { out_dim: 1, in_dim: hidden_dim },
        ]
    }
}

#[derive(Clone, Debug, PartialEq)]
enum LayerParams {
    /// Flat `[d]` base and `[S, d]` skills; also used by the sparse form.
    Dense { base: ParamId, phi: ParamId },
    LowRank { w0: ParamId, b0: ParamId, a: ParamId, b: ParamId },
    Hyper {
        w0: ParamId,
        b0: ParamId,
        gen_a: (ParamId, ParamId),
        gen_b: (ParamId, ParamId),
        rank: usize,
    },
}

#[derive(Clone, Debug, PartialEq)]
pub enum AllocationState {
    /// One logits parameter per layer, or a single one shared by all layers.
    Learned(Vec<ParamId>),
    Fixed(FixedAllocation),
    /// The hypernetwork has no allocation.
    Absent,
}

/// Sampling source for the relaxed allocation.
pub enum AllocMode<'a> {
    Expected,
    Sample(&'a mut dyn RngCore),
}

/// Per-layer skill weights for one task plus the full relaxed matrices.
pub struct TaskWeightVars {
    pub per_layer: Vec<Option<Var>>,
    pub relaxed: Vec<Var>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub kind: ModelKind,
    pub parameterisation: Parameterisation,
    pub layers: Vec<LayerDims>,
    pub task_names: Vec<String>,
    pub task_kind: TaskKind,
    pub params: ParamSet,
    pub allocation: AllocationState,
    pub num_skills: usize,
    pub tau: f64,
    layer_params: Vec<LayerParams>,
    /// Sparse form only: per-layer `[S, d]` 0/1 masks once selected.
    masks: Vec<Option<Tensor>>,
    embedding: Option<ParamId>,
    expert_table: Option<ExpertTable>,
    init_seed: u64,
}

fn flat_init(dims: LayerDims, seed: u64) -> Result<Vec<f64>> {
    let mut v = Tensor::new(&[dims.out_dim, dims.in_dim], Fill::KaimingUniform { seed })?.into_data();
    v.extend(std::iter::repeat_n(0.0, dims.out_dim));
    Ok(v)
}

fn skill_rows(n: usize, dims: LayerDims, rng: &mut impl RngCore) -> Result<Tensor> {
    let mut data = Vec::with_capacity(n * dims.flat_len());
    for _ in 0..n {
        data.extend(flat_init(dims, rng.next_u64())?);
    }
    Tensor::from_vec(&[n, dims.flat_len()], data)
}

fn append_rows(t: &Tensor, extra: &[f64]) -> Result<Tensor> {
    let shape = t.shape();
    let row: usize = shape[1..].iter().product();
    if !extra.len().is_multiple_of(row) {
        return Err(Error::shape("appended rows do not match row size"));
    }
    let mut new_shape = shape.to_vec();
    new_shape[0] += extra.len() / row;
    let mut data = t.data().to_vec();
    data.extend_from_slice(extra);
    Tensor::from_vec(&new_shape, data)
}

impl Model {
    pub fn new(
        cfg: &ModelConfig,
        input_dim: usize,
        task_names: &[String],
        task_kind: TaskKind,
        expert_table: Option<ExpertTable>,
        seed: u64,
    ) -> Result<Model> {
        if task_names.is_empty() {
            return Err(Error::contract("a model needs at least one task"));
        }
        if input_dim == 0 {
            return Err(Error::contract("input_dim must be positive"));
        }
        let t = task_names.len();
        let layers = layer_dims(input_dim, cfg.hidden_dim);
        let mut params = ParamSet::new();
        let mut rng = stream_rng(seed, 1);
        let table = cfg.expert_table.clone().or(expert_table);

        let (allocation, num_skills) = match cfg.kind {
            ModelKind::Skilled => {
                if cfg.num_skills == 0 {
                    return Err(Error::contract("num_skills must be positive"));
                }
                let n_alloc = if cfg.per_layer_allocation { layers.len() } else { 1 };
                let ids = (0..n_alloc)
                    .map(|l| {
                        let z = init_logits(t, cfg.num_skills, cfg.logit_init)?.z;
                        Ok(params.add(format!("z.{l}"), ParamRole::Allocation, z))
                    })
                    .collect::<Result<Vec<_>>>()?;
                (AllocationState::Learned(ids), cfg.num_skills)
            }
            ModelKind::Private => (AllocationState::Fixed(allocation_private(t)?), t),
            ModelKind::Shared => (AllocationState::Fixed(allocation_shared(t)?), 1),
            ModelKind::Expert => {
                let table = table
                    .as_ref()
                    .ok_or_else(|| Error::contract("expert model needs an expert table"))?;
                (
                    AllocationState::Fixed(allocation_expert(table, task_names)?),
                    table.num_skills,
                )
            }
            ModelKind::Hypernet => (AllocationState::Absent, 0),
        };

        let mut embedding = None;
        if cfg.kind == ModelKind::Hypernet {
            let e = cfg.hyper_embedding_dim;
            if e == 0 {
                return Err(Error::contract("hyper_embedding_dim must be positive"));
            }
            let mut data = Vec::with_capacity(t * e);
            for _ in 0..t {
                data.extend(init_embedding(e, rng.next_u64()));
            }
            embedding = Some(params.add(
                "embedding",
                ParamRole::Embedding,
                Tensor::from_vec(&[t, e], data)?,
            ));
        }

        let mut layer_params = Vec::with_capacity(layers.len());
        for (l, &dims) in layers.iter().enumerate() {
            let (o, i) = (dims.out_dim, dims.in_dim);
            let lp = match (cfg.kind, cfg.parameterisation) {
                (ModelKind::Hypernet, _) => {
                    let rank = cfg.hyper_rank.clamp(1, o.min(i));
                    let w0 = Tensor::new(&[o, i], Fill::KaimingUniform { seed: rng.next_u64() })?;
                    let hl = HyperLayer::new(o, i, rank, cfg.hyper_embedding_dim, rng.next_u64())?;
                    LayerParams::Hyper {
                        w0: params.add(format!("w0.{l}"), ParamRole::Base, w0),
                        b0: params.add(format!("b0.{l}"), ParamRole::Base, Tensor::new(&[o], Fill::Zeros)?),
                        gen_a: (
                            params.add(format!("gen_a.w1.{l}"), ParamRole::Generator, hl.gen_a.w1),
                            params.add(format!("gen_a.w2.{l}"), ParamRole::Generator, hl.gen_a.w2),
                        ),
                        gen_b: (
                            params.add(format!("gen_b.w1.{l}"), ParamRole::Generator, hl.gen_b.w1),
                            params.add(format!("gen_b.w2.{l}"), ParamRole::Generator, hl.gen_b.w2),
                        ),
                        rank,
                    }
                }
                (_, Parameterisation::LowRank { rank }) => {
                    if rank == 0 {
                        return Err(Error::contract("low-rank skills need rank >= 1"));
                    }
                    let r = rank.min(o.min(i));
                    let w0 = Tensor::new(&[o, i], Fill::KaimingUniform { seed: rng.next_u64() })?;
                    let b = Tensor::new(&[num_skills, r, i], Fill::KaimingUniform { seed: rng.next_u64() })?;
                    LayerParams::LowRank {
                        w0: params.add(format!("w0.{l}"), ParamRole::Base, w0),
                        b0: params.add(format!("b0.{l}"), ParamRole::Base, Tensor::new(&[o], Fill::Zeros)?),
                        a: params.add(
                            format!("a.{l}"),
                            ParamRole::Skill,
                            Tensor::new(&[num_skills, o, r], Fill::Zeros)?,
                        ),
                        b: params.add(format!("b.{l}"), ParamRole::Skill, b),
                    }
                }
                (_, p) => {
                    if let Parameterisation::Sparse { sparsity, .. } = p {
                        if !(0.0..1.0).contains(&sparsity) {
                            return Err(Error::contract(format!("sparsity {sparsity} outside [0, 1)")));
                        }
                    }
                    let base = Tensor::from_vec(&[dims.flat_len()], flat_init(dims, rng.next_u64())?)?;
                    let phi = skill_rows(num_skills, dims, &mut rng)?;
                    let phi = match cfg.skill_init {
                        SkillInit::Kaiming => phi,
                        SkillInit::Zeros => Tensor::new(phi.shape(), Fill::Zeros)?,
                    };
                    LayerParams::Dense {
                        base: params.add(format!("base.{l}"), ParamRole::Base, base),
                        phi: params.add(format!("phi.{l}"), ParamRole::Skill, phi),
                    }
                }
            };
            layer_params.push(lp);
        }

        Ok(Model {
            kind: cfg.kind,
            parameterisation: cfg.parameterisation,
            masks: vec![None; layers.len()],
            layers,
            task_names: task_names.to_vec(),
            task_kind,
            params,
            allocation,
            num_skills,
            tau: 1.0,
            layer_params,
            embedding,
            expert_table: table,
            init_seed: seed,
        })
    }

    pub fn num_tasks(&self) -> usize {
        self.task_names.len()
    }

    pub fn task_index(&self, name: &str) -> Result<usize> {
        self.task_names
            .iter()
            .position(|n| n == name)
            .ok_or_else(|| Error::Lookup(format!("task `{name}` is unknown to the model")))
    }

    pub fn expert_table(&self) -> Option<&ExpertTable> {
        self.expert_table.as_ref()
    }

    /// Replaces the allocation by a fixed matrix; any logits stay in the
    /// parameter set but are frozen and no longer read.
    pub fn freeze_allocation(&mut self, matrix: BinaryAllocation) -> Result<()> {
        if matrix.num_tasks() != self.num_tasks() || matrix.num_skills() != self.num_skills {
            return Err(Error::shape(format!(
                "fixed allocation {}x{} for a model with {} tasks and {} skills",
                matrix.num_tasks(),
                matrix.num_skills(),
                self.num_tasks(),
                self.num_skills
            )));
        }
        if let AllocationState::Learned(ids) = &self.allocation {
            for &id in ids {
                self.params.get_mut(id).frozen = true;
            }
        }
        let kind = if matrix == BinaryAllocation::identity(self.num_tasks()) {
            FixedKind::Private
        } else if matrix.num_skills() == 1 {
            FixedKind::Shared
        } else {
            FixedKind::Expert
        };
        self.allocation = AllocationState::Fixed(FixedAllocation { kind, matrix });
        Ok(())
    }

    fn logits_for_layer(&self, ids: &[ParamId], layer: usize) -> ParamId {
        ids[layer.min(ids.len() - 1)]
    }

    /// Number of distinct allocation matrices (1 when shared across layers).
    pub fn num_allocations(&self) -> usize {
        match &self.allocation {
            AllocationState::Learned(ids) => ids.len(),
            AllocationState::Fixed(_) => 1,
            AllocationState::Absent => 0,
        }
    }

    pub fn logits(&self, index: usize) -> Option<AllocationLogits> {
        match &self.allocation {
            AllocationState::Learned(ids) => ids.get(index).map(|&id| AllocationLogits {
                z: self.params.value(id).clone(),
                layer_id: index,
            }),
            _ => None,
        }
    }

    /// Deterministic relaxed allocation `σ(z/τ)`, or the fixed binary matrix.
    pub fn expected_allocation(&self, index: usize) -> Option<Tensor> {
        match &self.allocation {
            AllocationState::Learned(_) => {
                let l = self.logits(index)?;
                let inv = 1.0 / self.tau;
                let data = l.z.data().iter().map(|&z| 1.0 / (1.0 + (-z * inv).exp())).collect();
                Some(Tensor::from_vec(l.z.shape(), data).expect("same shape"))
            }
            AllocationState::Fixed(f) if index == 0 => Some(f.matrix.to_tensor()),
            _ => None,
        }
    }

    pub fn hardened_allocation(&self, index: usize) -> Option<BinaryAllocation> {
        match &self.allocation {
            AllocationState::Fixed(f) if index == 0 => Some(f.matrix.clone()),
            _ => self.expected_allocation(index).map(|t| harden_matrix(&t)),
        }
    }

    pub fn allocation_file(&self, index: usize) -> Result<Option<AllocationFile>> {
        match &self.allocation {
            AllocationState::Learned(_) => match self.logits(index) {
                Some(l) => Ok(Some(AllocationFile::new(&l, &self.task_names)?)),
                None => Ok(None),
            },
            AllocationState::Fixed(f) if index == 0 => {
                Ok(Some(AllocationFile::fixed(&f.matrix, &self.task_names, 0)?))
            }
            _ => Ok(None),
        }
    }

    /// Skill weights for `task` in every layer; `None` for the hypernetwork.
    pub fn task_weights(
        &self,
        tape: &mut Tape,
        vars: &[Var],
        task: usize,
        mode: &mut AllocMode<'_>,
    ) -> Result<TaskWeightVars> {
        let n_layers = self.layers.len();
        match &self.allocation {
            AllocationState::Absent => Ok(TaskWeightVars {
                per_layer: vec![None; n_layers],
                relaxed: Vec::new(),
            }),
            AllocationState::Fixed(f) => {
                let row = f.matrix.row(task);
                let k = row.iter().filter(|&&b| b == 1).count();
                if k == 0 {
                    return Err(Error::Degenerate(format!("task {task} has no active skill")));
                }
                let w: Vec<f64> = row.iter().map(|&b| f64::from(b) / k as f64).collect();
                let wv = tape.constant(&[w.len()], w)?;
                Ok(TaskWeightVars {
                    per_layer: vec![Some(wv); n_layers],
                    relaxed: Vec::new(),
                })
            }
            AllocationState::Learned(ids) => {
                let mut relaxed = Vec::with_capacity(ids.len());
                let mut rows = Vec::with_capacity(ids.len());
                for &id in ids {
                    let z = vars[id.0];
                    let zhat = match mode {
                        AllocMode::Expected => expected_on_tape(tape, z, self.tau)?,
                        AllocMode::Sample(rng) => {
                            let draws = draw_uniforms(&mut **rng, tape.value(z).len());
                            gumbel_sigmoid_on_tape(tape, z, self.tau, &draws)?
                        }
                    };
                    let s = tape.shape(zhat)[1];
                    let row = tape.row(zhat, task)?;
                    let row = tape.reshape(row, &[1, s])?;
                    let w = normalize_rows_on_tape(tape, row)?;
                    rows.push(tape.reshape(w, &[s])?);
                    relaxed.push(zhat);
                }
                let per_layer = (0..n_layers)
                    .map(|l| Some(rows[self.logits_index(ids, l)]))
                    .collect();
                Ok(TaskWeightVars { per_layer, relaxed })
            }
        }
    }

    fn logits_index(&self, ids: &[ParamId], layer: usize) -> usize {
        let id = self.logits_for_layer(ids, layer);
        ids.iter().position(|&x| x == id).expect("id from list")
    }

    /// Network output `[n]` for inputs `x: [n, in]` given per-layer weights.
    pub fn forward(
        &self,
        tape: &mut Tape,
        vars: &[Var],
        task: usize,
        x: Var,
        weights: &TaskWeightVars,
    ) -> Result<Var> {
        let n = tape.shape(x)[0];
        let mut h = x;
        let last = self.layers.len() - 1;
        for (l, (lp, dims)) in self.layer_params.iter().zip(&self.layers).enumerate() {
            let (o, i) = (dims.out_dim, dims.in_dim);
            h = match lp {
                LayerParams::Dense { base, phi } => {
                    let w = weights.per_layer[l].ok_or_else(|| Error::State("missing skill weights".into()))?;
                    let mut phi_v = vars[phi.0];
                    if let Some(mask) = &self.masks[l] {
                        let m = tape.leaf(mask);
                        phi_v = tape.mul(phi_v, m)?;
                    }
                    let theta = compose_on_tape(tape, vars[base.0], phi_v, w)?;
                    let wmat = tape.slice(theta, 0, &[o, i])?;
                    let bias = tape.slice(theta, o * i, &[o])?;
                    let wt = tape.transpose(wmat)?;
                    let y = tape.matmul(h, wt)?;
                    tape.add(y, bias)?
                }
                LayerParams::LowRank { w0, b0, a, b } => {
                    let w = weights.per_layer[l].ok_or_else(|| Error::State("missing skill weights".into()))?;
                    lora_on_tape(tape, h, vars[w0.0], vars[b0.0], vars[a.0], vars[b.0], w)?
                }
                LayerParams::Hyper { w0, b0, gen_a, gen_b, rank } => {
                    let emb = self.embedding.ok_or_else(|| Error::State("hypernetwork without embeddings".into()))?;
                    let e = tape.row(vars[emb.0], task)?;
                    let (a, b) = generate_on_tape(
                        tape,
                        e,
                        (vars[gen_a.0 .0], vars[gen_a.1 .0]),
                        (vars[gen_b.0 .0], vars[gen_b.1 .0]),
                        o,
                        *rank,
                        i,
                    )?;
                    let w0t = tape.transpose(vars[w0.0])?;
                    let y = tape.matmul(h, w0t)?;
                    let bt = tape.transpose(b)?;
                    let xb = tape.matmul(h, bt)?;
                    let at = tape.transpose(a)?;
                    let d = tape.matmul(xb, at)?;
                    let y = tape.add(y, d)?;
                    tape.add(y, vars[b0.0])?
                }
            };
            if l < last {
                h = tape.relu(h)?;
            }
        }
        tape.reshape(h, &[n])
    }

    /// Mean task loss of predictions `f: [n]` against `targets`.
    pub fn loss_on_tape(&self, tape: &mut Tape, f: Var, targets: &[f64]) -> Result<Var> {
        let t = tape.constant(&[targets.len()], targets.to_vec())?;
        match self.task_kind {
            TaskKind::Regression => {
                let d = tape.sub(f, t)?;
                let sq = tape.unary(UnaryOp::Square, d)?;
                tape.mean(sq)
            }
            TaskKind::BinaryClassification => {
                // −log-likelihood of a Bernoulli with logit f
                let sp = tape.unary(UnaryOp::Softplus, f)?;
                let tf = tape.mul(t, f)?;
                let nll = tape.sub(sp, tf)?;
                tape.mean(nll)
            }
        }
    }

    /// Deterministic predictions for a split.
    pub fn predict(&self, task: usize, x: &Tensor) -> Result<Vec<f64>> {
        let mut tape = Tape::new();
        let vars = self.record_constants(&mut tape);
        let w = self.task_weights(&mut tape, &vars, task, &mut AllocMode::Expected)?;
        let xv = tape.leaf(x);
        let out = self.forward(&mut tape, &vars, task, xv, &w)?;
        Ok(tape.value(out).to_vec())
    }

    /// Deterministic mean loss on a split.
    pub fn split_loss(&self, task: usize, split: &Split) -> Result<f64> {
        let mut tape = Tape::new();
        let vars = self.record_constants(&mut tape);
        let w = self.task_weights(&mut tape, &vars, task, &mut AllocMode::Expected)?;
        let xv = tape.leaf(&split.x()?);
        let out = self.forward(&mut tape, &vars, task, xv, &w)?;
        let loss = self.loss_on_tape(&mut tape, out, &split.y)?;
        Ok(tape.item(loss))
    }

    fn record_constants(&self, tape: &mut Tape) -> Vec<Var> {
        self.params
            .iter()
            .map(|(_, p)| tape.leaf(&p.value.clone().with_requires_grad(false)))
            .collect()
    }

    pub fn is_sparse(&self) -> bool {
        matches!(self.parameterisation, Parameterisation::Sparse { .. })
            && self.layer_params.iter().any(|lp| matches!(lp, LayerParams::Dense { .. }))
    }

    pub fn masks_selected(&self) -> bool {
        self.masks.iter().all(Option::is_some)
    }

    pub fn mask(&self, layer: usize) -> Option<&Tensor> {
        self.masks.get(layer).and_then(Option::as_ref)
    }

    /// Current skill tensors of the dense/sparse form, in layer order.
    pub fn skill_tensors(&self) -> Vec<Tensor> {
        self.layer_params
            .iter()
            .filter_map(|lp| match lp {
                LayerParams::Dense { phi, .. } => Some(self.params.value(*phi).clone()),
                _ => None,
            })
            .collect()
    }

    /// Selects the sparse masks from the change since `before` and zeroes
    /// every dropped entry.
    pub fn select_masks(&mut self, before: &[Tensor]) -> Result<()> {
        let Parameterisation::Sparse { sparsity, .. } = self.parameterisation else {
            return Err(Error::State("mask selection on a non-sparse model".into()));
        };
        let mut k = 0;
        for l in 0..self.layer_params.len() {
            if let LayerParams::Dense { phi, .. } = self.layer_params[l] {
                let after = self.params.value(phi);
                let keep = keep_count(after.cols(), sparsity);
                let mask = select_sparse_mask(&before[k], after, keep)?;
                self.masks[l] = Some(mask);
                k += 1;
            }
        }
        self.apply_masks();
        Ok(())
    }

    /// `Φ ← Φ ⊙ M` for every selected mask.
    pub fn apply_masks(&mut self) {
        for l in 0..self.layer_params.len() {
            if let (LayerParams::Dense { phi, .. }, Some(mask)) = (&self.layer_params[l], &self.masks[l]) {
                let p = self.params.get_mut(*phi);
                for (v, m) in p.value.data_mut().iter_mut().zip(mask.data()) {
                    *v *= m;
                }
            }
        }
    }

    pub fn skill_param_ids(&self) -> Vec<ParamId> {
        self.params
            .iter()
            .filter(|(_, p)| p.role == ParamRole::Skill)
            .map(|(id, _)| id)
            .collect()
    }

    /// Appends a new task. Learned allocations get a logits row of
    /// `logit_init`; the private baseline gets a fresh zero skill (so the new
    /// task starts at the base parameters); the shared baseline reuses its
    /// skill; the expert baseline reads its row from the table; the
    /// hypernetwork gets a fresh embedding. Returns the task index.
    pub fn add_task(&mut self, name: &str, logit_init: f64) -> Result<usize> {
        if self.task_names.iter().any(|n| n == name) {
            return Err(Error::contract(format!("task `{name}` already exists")));
        }
        let idx = self.num_tasks();
        match self.allocation.clone() {
            AllocationState::Learned(ids) => {
                for id in ids {
                    let mut l = AllocationLogits {
                        z: self.params.value(id).clone(),
                        layer_id: 0,
                    };
                    l.push_task(logit_init);
                    self.params.get_mut(id).value = l.z;
                }
            }
            AllocationState::Fixed(f) => {
                let matrix = match f.kind {
                    FixedKind::Private => {
                        self.grow_skills()?;
                        BinaryAllocation::identity(idx + 1)
                    }
                    FixedKind::Shared => BinaryAllocation::ones(idx + 1, f.matrix.num_skills()),
                    FixedKind::Expert => {
                        let table = self
                            .expert_table
                            .as_ref()
                            .ok_or_else(|| Error::State("expert model without a table".into()))?;
                        let row = table.row(name)?;
                        f.matrix.stack(&BinaryAllocation::from_rows(&[row])?)?
                    }
                };
                self.allocation = AllocationState::Fixed(FixedAllocation { kind: f.kind, matrix });
            }
            AllocationState::Absent => {
                let emb = self.embedding.ok_or_else(|| Error::State("hypernetwork without embeddings".into()))?;
                let e = self.params.value(emb).cols();
                let seed = stream_rng(self.init_seed, 100 + idx as u64).random();
                let grown = append_rows(self.params.value(emb), &init_embedding(e, seed))?;
                self.params.get_mut(emb).value = grown;
            }
        }
        self.task_names.push(name.to_string());
        Ok(idx)
    }

    /// One more skill in every layer: zero dense row, zero `A` with a fresh `B`.
    fn grow_skills(&mut self) -> Result<()> {
        let mut rng = stream_rng(self.init_seed, 200 + self.num_skills as u64);
        for l in 0..self.layer_params.len() {
            match self.layer_params[l].clone() {
                LayerParams::Dense { phi, .. } => {
                    let d = self.params.value(phi).cols();
                    let grown = append_rows(self.params.value(phi), &vec![0.0; d])?;
                    self.params.get_mut(phi).value = grown;
                    if let Some(mask) = &self.masks[l] {
                        self.masks[l] = Some(append_rows(mask, &vec![1.0; d])?);
                    }
                }
                LayerParams::LowRank { a, b, .. } => {
                    let sa = self.params.value(a).shape().to_vec();
                    let sb = self.params.value(b).shape().to_vec();
                    let ga = append_rows(self.params.value(a), &vec![0.0; sa[1] * sa[2]])?;
                    let fresh = Tensor::new(&[1, sb[1], sb[2]], Fill::KaimingUniform { seed: rng.random() })?;
                    let gb = append_rows(self.params.value(b), fresh.data())?;
                    self.params.get_mut(a).value = ga;
                    self.params.get_mut(b).value = gb;
                }
                LayerParams::Hyper { .. } => {}
            }
        }
        self.num_skills += 1;
        Ok(())
    }

    /// Scalars by role, for parameter accounting.
    pub fn scalar_count(&self, role: ParamRole) -> usize {
        self.params.scalar_count_where(|p| p.role == role)
    }
}
