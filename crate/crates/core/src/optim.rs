//! Named parameters and a two-group Adam optimiser.
//!
//! Allocation logits live in one group, everything else (skills, base
//! parameters, hypernetwork weights) in the other, each with its own learning
//! rate. A faster rate on the logits lets allocations move before the skill
//! parameters settle into a task-agnostic solution.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ParamId(pub usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamRole {
    Allocation,
    Skill,
    Base,
    Embedding,
    Generator,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Parameter {
    pub name: String,
    pub role: ParamRole,
    pub value: Tensor,
    /// Frozen parameters enter the tape as constants and are skipped by the optimiser.
    pub frozen: bool,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamSet {
    params: Vec<Parameter>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, role: ParamRole, value: Tensor) -> ParamId {
        self.params.push(Parameter {
            name: name.into(),
            role,
            value,
            frozen: false,
        });
        ParamId(self.params.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Parameter {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter {
        &mut self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].value
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Parameter)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn set_frozen_where(&mut self, frozen: bool, pred: impl Fn(&Parameter) -> bool) {
        for p in &mut self.params {
            if pred(p) {
                p.frozen = frozen;
            }
        }
    }

    /// Number of scalar values across all parameters.
    pub fn scalar_count(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }

    pub fn scalar_count_where(&self, pred: impl Fn(&Parameter) -> bool) -> usize {
        self.params.iter().filter(|p| pred(p)).map(|p| p.value.numel()).sum()
    }

    /// Records every parameter on the tape, frozen ones without gradient.
    pub fn record(&self, tape: &mut Tape) -> Vec<Var> {
        self.params
            .iter()
            .map(|p| {
                if p.frozen {
                    tape.leaf(&p.value.clone().with_requires_grad(false))
                } else {
                    tape.param(&p.value)
                }
            })
            .collect()
    }

    /// Moves gradients from the tape into each parameter's buffer.
    pub fn collect_grads(&mut self, tape: &Tape, vars: &[Var]) -> Result<()> {
        for (p, &v) in self.params.iter_mut().zip(vars) {
            if !p.frozen {
                tape.accumulate_grad_into(v, &mut p.value)?;
            }
        }
        Ok(())
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.params {
            p.value.zero_grad();
        }
    }

    pub fn all_finite(&self) -> bool {
        self.params.iter().all(|p| p.value.is_finite())
    }
}

#[derive(Clone, Debug, PartialEq)]
struct AdamState {
    m: Vec<f64>,
    v: Vec<f64>,
    t: u32,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamGroup {
    pub lr: f64,
    pub params: Vec<ParamId>,
}

/// Adam with separate learning rates for allocation logits and for the rest.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerGroups {
    pub group_z: ParamGroup,
    pub group_phi: ParamGroup,
    state: Vec<Option<AdamState>>,
}

impl OptimizerGroups {
    /// Groups must partition `0..num_params` exactly.
    pub fn new(
        z_params: Vec<ParamId>,
        phi_params: Vec<ParamId>,
        lr_z: f64,
        lr_phi: f64,
        num_params: usize,
    ) -> Result<Self> {
        for (name, lr) in [("lr_z", lr_z), ("lr_phi", lr_phi)] {
            if !(lr > 0.0) || !lr.is_finite() {
                return Err(Error::domain(format!("{name} must be positive, got {lr}")));
            }
        }
        let mut seen = vec![0u8; num_params];
        for id in z_params.iter().chain(&phi_params) {
            let slot = seen
                .get_mut(id.0)
                .ok_or_else(|| Error::contract(format!("unknown parameter {id:?}")))?;
            *slot += 1;
        }
        if let Some(i) = seen.iter().position(|&c| c > 1) {
            return Err(Error::contract(format!("parameter {i} assigned to more than one group")));
        }
        if let Some(i) = seen.iter().position(|&c| c == 0) {
            return Err(Error::contract(format!("parameter {i} assigned to no group")));
        }
        Ok(OptimizerGroups {
            group_z: ParamGroup {
                lr: lr_z,
                params: z_params,
            },
            group_phi: ParamGroup {
                lr: lr_phi,
                params: phi_params,
            },
            state: vec![None; num_params],
        })
    }

    pub fn lr_for(&self, id: ParamId) -> f64 {
        if self.group_z.params.contains(&id) {
            self.group_z.lr
        } else {
            self.group_phi.lr
        }
    }

    /// One Adam update of every non-frozen parameter holding a gradient;
    /// gradients are cleared afterwards.
    pub fn step(&mut self, params: &mut ParamSet) -> Result<()> {
        if params.len() > self.state.len() {
            self.state.resize(params.len(), None);
        }
        for (group, lr) in [(&self.group_z.params, self.group_z.lr), (&self.group_phi.params, self.group_phi.lr)] {
            for &id in group {
                let p = params.get_mut(id);
                if p.frozen {
                    continue;
                }
                let Some(g) = p.value.grad().map(<[f64]>::to_vec) else {
                    continue;
                };
                let n = g.len();
                let st = self.state[id.0].get_or_insert_with(|| AdamState {
                    m: vec![0.0; n],
                    v: vec![0.0; n],
                    t: 0,
                });
                if st.m.len() != n {
                    // parameter was resized (a task or skill was appended); restart its moments
                    *st = AdamState {
                        m: vec![0.0; n],
                        v: vec![0.0; n],
                        t: 0,
                    };
                }
                st.t += 1;
                let bc1 = 1.0 - ADAM_BETA1.powi(st.t as i32);
                let bc2 = 1.0 - ADAM_BETA2.powi(st.t as i32);
                let data = p.value.data_mut();
                for k in 0..n {
                    st.m[k] = ADAM_BETA1 * st.m[k] + (1.0 - ADAM_BETA1) * g[k];
                    st.v[k] = ADAM_BETA2 * st.v[k] + (1.0 - ADAM_BETA2) * g[k] * g[k];
                    let mhat = st.m[k] / bc1;
                    let vhat = st.v[k] / bc2;
                    data[k] -= lr * mhat / (vhat.sqrt() + ADAM_EPS);
                }
            }
        }
        params.zero_grads();
        Ok(())
    }
}

/// Routes allocation logits to the fast group and all other parameters to
/// the slow group.
pub fn build_two_speed_groups(params: &ParamSet, lr_z: f64, lr_phi: f64) -> Result<OptimizerGroups> {
    let mut z = Vec::new();
    let mut phi = Vec::new();
    for (id, p) in params.iter() {
        if p.role == ParamRole::Allocation {
            z.push(id);
        } else {
            phi.push(id);
        }
    }
    OptimizerGroups::new(z, phi, lr_z, lr_phi, params.len())
}
