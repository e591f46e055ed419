//! Skill inventories and their composition into per-task parameters.
//!
//! A task's parameters are the shared base plus the weighted average of the
//! skill rows it activates: `θ_i = θ_0 + Σ_j w_j Φ_j` with `w` on the simplex.
//! Three storage forms are supported: dense rows, dense rows under a frozen
//! top-k mask, and per-skill low-rank factors of a linear layer.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Tolerance on `Σ w = 1` for [`TaskWeights`].
pub const WEIGHT_SUM_TOL: f64 = 1e-12;

#[derive(Clone, Debug, PartialEq)]
pub struct DenseSkills {
    /// `[num_skills, d]`
    pub phi: Tensor,
    /// `[d]`
    pub base: Tensor,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SparseSkills {
    pub phi: Tensor,
    /// 0/1 matrix shaped like `phi`; `None` until selected.
    pub mask: Option<Tensor>,
    /// Target fraction of zeros per skill row.
    pub sparsity: f64,
    pub base: Tensor,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LowRankSkills {
    /// `[num_skills, out, rank]`
    pub a: Tensor,
    /// `[num_skills, rank, in]`
    pub b: Tensor,
    /// `[out, in]`
    pub w0: Tensor,
    /// `[out]`
    pub b0: Tensor,
}

/// Non-negative skill weights for one task, summing to one.
#[derive(Clone, Debug, PartialEq)]
pub struct TaskWeights {
    w: Vec<f64>,
}

impl TaskWeights {
    pub fn new(w: Vec<f64>) -> Result<Self> {
        if w.is_empty() {
            return Err(Error::shape("task weights need at least one skill"));
        }
        if w.iter().any(|&x| !(x >= 0.0)) {
            return Err(Error::domain("task weights must be non-negative"));
        }
        let s: f64 = w.iter().sum();
        if (s - 1.0).abs() > WEIGHT_SUM_TOL {
            return Err(Error::domain(format!("task weights sum to {s}, not 1")));
        }
        Ok(TaskWeights { w })
    }

    /// Weight vector with all mass on skill `j`.
    pub fn one_hot(num_skills: usize, j: usize) -> Self {
        let mut w = vec![0.0; num_skills];
        w[j] = 1.0;
        TaskWeights { w }
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.w
    }

    pub fn len(&self) -> usize {
        self.w.len()
    }

    pub fn is_empty(&self) -> bool {
        self.w.is_empty()
    }
}

impl SparseSkills {
    /// Per-row count of retained entries for the configured sparsity.
    pub fn keep_per_row(&self) -> usize {
        keep_count(self.phi.cols(), self.sparsity)
    }

    /// Selects and stores the mask from the change since `phi_before`.
    pub fn select_mask(&mut self, phi_before: &Tensor) -> Result<()> {
        let k = self.keep_per_row();
        self.mask = Some(select_sparse_mask(phi_before, &self.phi, k)?);
        Ok(())
    }

    /// Coordinate form `(skill, index, value)` of the masked entries.
    pub fn to_coo(&self) -> Result<Vec<(usize, usize, f64)>> {
        let mask = self
            .mask
            .as_ref()
            .ok_or_else(|| Error::State("sparse mask has not been selected".into()))?;
        let d = self.phi.cols();
        Ok(mask
            .data()
            .iter()
            .enumerate()
            .filter(|(_, &m)| m != 0.0)
            .map(|(k, _)| (k / d, k % d, self.phi.data()[k]))
            .collect())
    }
}

/// `round((1 - sparsity) * d)`, at least one.
pub fn keep_count(d: usize, sparsity: f64) -> usize {
    (((1.0 - sparsity) * d as f64).round() as usize).clamp(1, d)
}

/// `θ = base + wᵀ Φ` on the tape. `base: [d]`, `phi: [S, d]`, `w: [S]`.
pub fn compose_on_tape(tape: &mut Tape, base: Var, phi: Var, w: Var) -> Result<Var> {
    let (sp, sb, sw) = (
        tape.shape(phi).to_vec(),
        tape.shape(base).to_vec(),
        tape.shape(w).to_vec(),
    );
    if sp.len() != 2 || sb != [sp[1]] || sw != [sp[0]] {
        return Err(Error::shape(format!(
            "compose of base {sb:?}, skills {sp:?}, weights {sw:?}"
        )));
    }
    let w_row = tape.reshape(w, &[1, sp[0]])?;
    let agg = tape.matmul(w_row, phi)?;
    let agg = tape.reshape(agg, &[sp[1]])?;
    tape.add(base, agg)
}

fn check_weights(num_skills: usize, w: &TaskWeights) -> Result<()> {
    if w.len() != num_skills {
        return Err(Error::shape(format!(
            "{} weights for {num_skills} skills",
            w.len()
        )));
    }
    Ok(())
}

pub fn compose_dense(skills: &DenseSkills, w: &TaskWeights) -> Result<Tensor> {
    check_weights(skills.phi.rows(), w)?;
    let mut tape = Tape::new();
    let base = tape.leaf(&skills.base);
    let phi = tape.leaf(&skills.phi);
    let wv = tape.constant(&[w.len()], w.as_slice().to_vec())?;
    let out = compose_on_tape(&mut tape, base, phi, wv)?;
    Ok(tape.to_tensor(out))
}

/// Top-`k` entries per skill row by `|after - before|`; ties go to the lower index.
pub fn select_sparse_mask(phi_before: &Tensor, phi_after: &Tensor, k: usize) -> Result<Tensor> {
    if phi_before.shape() != phi_after.shape() || phi_after.rank() != 2 {
        return Err(Error::shape(format!(
            "mask selection on {:?} vs {:?}",
            phi_before.shape(),
            phi_after.shape()
        )));
    }
    let (s, d) = (phi_after.rows(), phi_after.cols());
    if k == 0 || k > d {
        return Err(Error::contract(format!("k = {k} outside [1, {d}]")));
    }
    let mut mask = vec![0.0; s * d];
    let mut idx: Vec<usize> = Vec::with_capacity(d);
    for j in 0..s {
        let (b, a) = (phi_before.row(j), phi_after.row(j));
        idx.clear();
        idx.extend(0..d);
        // stable sort keeps lower indices first among equal deltas
        idx.sort_by(|&x, &y| {
            let dx = (a[x] - b[x]).abs();
            let dy = (a[y] - b[y]).abs();
            dy.total_cmp(&dx)
        });
        for &c in &idx[..k] {
            mask[j * d + c] = 1.0;
        }
    }
    Tensor::from_vec(&[s, d], mask)
}

pub fn compose_sparse(skills: &SparseSkills, w: &TaskWeights) -> Result<Tensor> {
    check_weights(skills.phi.rows(), w)?;
    let mask = skills
        .mask
        .as_ref()
        .ok_or_else(|| Error::State("sparse mask has not been selected".into()))?;
    let mut tape = Tape::new();
    let base = tape.leaf(&skills.base);
    let phi = tape.leaf(&skills.phi);
    let m = tape.leaf(mask);
    let masked = tape.mul(phi, m)?;
    let wv = tape.constant(&[w.len()], w.as_slice().to_vec())?;
    let out = compose_on_tape(&mut tape, base, masked, wv)?;
    Ok(tape.to_tensor(out))
}

/// Low-rank skill layer on a batch: `x: [n, in]` to `[n, out]`.
///
/// Computes `x W0ᵀ + Σ_j w_j (x B_jᵀ) A_jᵀ + b0` without materialising the
/// `[out, in]` delta.
pub fn lora_on_tape(
    tape: &mut Tape,
    x: Var,
    w0: Var,
    b0: Var,
    a: Var,
    b: Var,
    w: Var,
) -> Result<Var> {
    let (sa, sb, sw0) = (
        tape.shape(a).to_vec(),
        tape.shape(b).to_vec(),
        tape.shape(w0).to_vec(),
    );
    if sa.len() != 3 || sb.len() != 3 || sw0.len() != 2 {
        return Err(Error::shape("low-rank factors must be rank 3, base rank 2"));
    }
    let (s, o, r) = (sa[0], sa[1], sa[2]);
    let i = sw0[1];
    if sb != [s, r, i] || sw0[0] != o || tape.shape(w).to_vec() != [s] {
        return Err(Error::shape(format!(
            "inconsistent low-rank dims A {sa:?}, B {sb:?}, W0 {sw0:?}"
        )));
    }
    let w0t = tape.transpose(w0)?;
    let mut y = tape.matmul(x, w0t)?;
    for j in 0..s {
        let aj = tape.slice(a, j * o * r, &[o, r])?;
        let bj = tape.slice(b, j * r * i, &[r, i])?;
        let bjt = tape.transpose(bj)?;
        let xb = tape.matmul(x, bjt)?;
        let ajt = tape.transpose(aj)?;
        let d = tape.matmul(xb, ajt)?;
        let wj = tape.slice(w, j, &[1])?;
        let d = tape.mul(d, wj)?;
        y = tape.add(y, d)?;
    }
    tape.add(y, b0)
}

/// `Σ_j w_j A_j B_j`, the `[out, in]` delta, on the tape.
pub fn lora_delta_on_tape(tape: &mut Tape, a: Var, b: Var, w: Var) -> Result<Var> {
    let (sa, sb) = (tape.shape(a).to_vec(), tape.shape(b).to_vec());
    if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] || sa[2] != sb[1] {
        return Err(Error::shape(format!("low-rank factors {sa:?} and {sb:?}")));
    }
    let (s, o, r, i) = (sa[0], sa[1], sa[2], sb[2]);
    let mut delta: Option<Var> = None;
    for j in 0..s {
        let aj = tape.slice(a, j * o * r, &[o, r])?;
        let bj = tape.slice(b, j * r * i, &[r, i])?;
        let ab = tape.matmul(aj, bj)?;
        let wj = tape.slice(w, j, &[1])?;
        let term = tape.mul(ab, wj)?;
        delta = Some(match delta {
            Some(acc) => tape.add(acc, term)?,
            None => term,
        });
    }
    delta.ok_or_else(|| Error::shape("low-rank layer with no skills"))
}

fn lora_inputs(tape: &mut Tape, x: &Tensor, skills: &LowRankSkills, w: &TaskWeights) -> Result<[Var; 6]> {
    let s = skills.a.shape().first().copied().unwrap_or(0);
    check_weights(s, w)?;
    let r = skills.a.shape().get(2).copied().unwrap_or(0);
    let (o, i) = (skills.w0.rows(), skills.w0.cols());
    if r > o.min(i) {
        return Err(Error::shape(format!("rank {r} exceeds min({o}, {i})")));
    }
    if x.numel() != i {
        return Err(Error::shape(format!("input of length {} for in_dim {i}", x.numel())));
    }
    let xv = tape.constant(&[1, i], x.data().to_vec())?;
    let w0 = tape.leaf(&skills.w0);
    let b0 = tape.leaf(&skills.b0);
    let a = tape.leaf(&skills.a);
    let b = tape.leaf(&skills.b);
    let wv = tape.constant(&[w.len()], w.as_slice().to_vec())?;
    Ok([xv, w0, b0, a, b, wv])
}

/// `y = (W0 + Σ_j w_j A_j B_j) x + b0` for a single input vector, factored path.
pub fn lora_forward(x: &Tensor, skills: &LowRankSkills, w: &TaskWeights) -> Result<Tensor> {
    let mut tape = Tape::new();
    let [xv, w0, b0, a, b, wv] = lora_inputs(&mut tape, x, skills, w)?;
    let y = lora_on_tape(&mut tape, xv, w0, b0, a, b, wv)?;
    let o = skills.w0.rows();
    tape.to_tensor(y).reshape(&[o])
}

/// Same map as [`lora_forward`] with the delta formed explicitly.
pub fn lora_forward_materialized(x: &Tensor, skills: &LowRankSkills, w: &TaskWeights) -> Result<Tensor> {
    let mut tape = Tape::new();
    let [xv, w0, b0, a, b, wv] = lora_inputs(&mut tape, x, skills, w)?;
    let delta = lora_delta_on_tape(&mut tape, a, b, wv)?;
    let wfull = tape.add(w0, delta)?;
    let wt = tape.transpose(wfull)?;
    let y = tape.matmul(xv, wt)?;
    let y = tape.add(y, b0)?;
    let o = skills.w0.rows();
    tape.to_tensor(y).reshape(&[o])
}

/// Parameters added by low-rank skills on the four attention projections of
/// `layers` layers: `4·l·(2·h·r + |T|)·|S|`.
pub fn param_count_lora(layers: u64, hidden: u64, rank: u64, num_tasks: u64, num_skills: u64) -> u64 {
    4 * layers * (2 * hidden * rank + num_tasks) * num_skills
}

const CHECKPOINT_MAGIC: &[u8; 8] = b"SKMXCKPT";
const CHECKPOINT_VERSION: u32 = 1;

/// Metadata sidecar written next to a binary checkpoint.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub format_version: u32,
    pub tensors: Vec<CheckpointEntry>,
    #[serde(default)]
    pub extra: serde_json::Value,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointEntry {
    pub name: String,
    pub shape: Vec<usize>,
}

/// Encodes named tensors.
///
/// Layout (little endian): magic `SKMXCKPT`, `u32` version, `u32` count, then
/// per tensor `u32` name length, UTF-8 name, `u32` rank, `rank × u64` dims and
/// `numel × f64` row-major values.
pub fn encode_checkpoint(tensors: &[(&str, &Tensor)]) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for (name, t) in tensors {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
        for &d in t.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<Vec<(String, Tensor)>> {
    let mut cur = bytes;
    let mut take = |n: usize| -> Result<&[u8]> {
        if cur.len() < n {
            return Err(Error::State("truncated checkpoint".into()));
        }
        let (head, tail) = cur.split_at(n);
        cur = tail;
        Ok(head)
    };
    if take(8)? != CHECKPOINT_MAGIC {
        return Err(Error::State("not a skill checkpoint".into()));
    }
    let u32_at = |b: &[u8]| u32::from_le_bytes(b.try_into().expect("4 bytes"));
    let version = u32_at(take(4)?);
    if version != CHECKPOINT_VERSION {
        return Err(Error::State(format!("unsupported checkpoint version {version}")));
    }
    let count = u32_at(take(4)?) as usize;
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let len = u32_at(take(4)?) as usize;
        let name = String::from_utf8(take(len)?.to_vec())
            .map_err(|_| Error::State("checkpoint name is not UTF-8".into()))?;
        let rank = u32_at(take(4)?) as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(u64::from_le_bytes(take(8)?.try_into().expect("8 bytes")) as usize);
        }
        let n: usize = shape.iter().product();
        let raw = take(n * 8)?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        out.push((name, Tensor::from_vec(&shape, data)?));
    }
    Ok(out)
}

pub fn write_checkpoint(
    path: &std::path::Path,
    tensors: &[(&str, &Tensor)],
    extra: serde_json::Value,
) -> Result<()> {
    std::fs::write(path, encode_checkpoint(tensors))?;
    let meta = CheckpointMeta {
        format_version: CHECKPOINT_VERSION,
        tensors: tensors
            .iter()
            .map(|(n, t)| CheckpointEntry {
                name: n.to_string(),
                shape: t.shape().to_vec(),
            })
            .collect(),
        extra,
    };
    std::fs::write(path.with_extension("json"), serde_json::to_string_pretty(&meta)?)?;
    Ok(())
}

pub fn read_checkpoint(path: &std::path::Path) -> Result<Vec<(String, Tensor)>> {
    decode_checkpoint(&std::fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::grad_check;
    use crate::tensor::Fill;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::from_vec(shape, data.to_vec()).unwrap()
    }

    #[test]
    fn compose_dense_examples() {
        let skills = DenseSkills {
            phi: t(&[2, 2], &[2.0, 0.0, 0.0, 4.0]),
            base: t(&[2], &[0.0, 0.0]),
        };
        let w = TaskWeights::new(vec![0.5, 0.5]).unwrap();
        assert_eq!(compose_dense(&skills, &w).unwrap().data(), &[1.0, 2.0]);

        let skills = DenseSkills {
            phi: t(&[3, 2], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]),
            base: t(&[2], &[0.25, -1.0]),
        };
        let theta = compose_dense(&skills, &TaskWeights::one_hot(3, 1)).unwrap();
        assert_eq!(theta.data(), &[3.25, 3.0]);

        let zeros = DenseSkills {
            phi: Tensor::new(&[3, 2], Fill::Zeros).unwrap(),
            base: t(&[2], &[0.25, -1.0]),
        };
        let w = TaskWeights::new(vec![0.2, 0.3, 0.5]).unwrap();
        assert_eq!(compose_dense(&zeros, &w).unwrap().data(), &[0.25, -1.0]);

        let w = TaskWeights::new(vec![0.5, 0.5]).unwrap();
        assert!(matches!(compose_dense(&skills, &w), Err(Error::Shape(_))));
    }

    #[test]
    fn task_weights_validation() {
        assert!(TaskWeights::new(vec![0.5, 0.6]).is_err());
        assert!(TaskWeights::new(vec![-0.5, 1.5]).is_err());
        assert!(TaskWeights::new(vec![]).is_err());
    }

    #[test]
    fn mask_examples() {
        let before = t(&[1, 3], &[0.0, 0.0, 0.0]);
        let after = t(&[1, 3], &[0.0, 5.0, 1.0]);
        assert_eq!(select_sparse_mask(&before, &after, 1).unwrap().data(), &[0.0, 1.0, 0.0]);

        let after = t(&[1, 4], &[2.0, -2.0, 2.0, 2.0]);
        let before = Tensor::new(&[1, 4], Fill::Zeros).unwrap();
        assert_eq!(
            select_sparse_mask(&before, &after, 2).unwrap().data(),
            &[1.0, 1.0, 0.0, 0.0]
        );
        assert!(matches!(select_sparse_mask(&before, &after, 0), Err(Error::Contract(_))));
        assert!(matches!(select_sparse_mask(&before, &after, 5), Err(Error::Contract(_))));
    }

    #[test]
    fn compose_sparse_examples() {
        let phi = Tensor::new(&[2, 3], Fill::Uniform { low: -1.0, high: 1.0, seed: 5 }).unwrap();
        let base = t(&[3], &[0.1, 0.2, 0.3]);
        let w = TaskWeights::new(vec![0.25, 0.75]).unwrap();
        let mut sp = SparseSkills {
            phi: phi.clone(),
            mask: None,
            sparsity: 0.0,
            base: base.clone(),
        };
        assert!(matches!(compose_sparse(&sp, &w), Err(Error::State(_))));

        sp.mask = Some(Tensor::new(&[2, 3], Fill::Constant(1.0)).unwrap());
        let dense = compose_dense(&DenseSkills { phi, base: base.clone() }, &w).unwrap();
        assert_eq!(compose_sparse(&sp, &w).unwrap(), dense);

        sp.mask = Some(Tensor::new(&[2, 3], Fill::Zeros).unwrap());
        assert_eq!(compose_sparse(&sp, &w).unwrap().data(), base.data());
    }

    #[test]
    fn ninety_percent_sparsity_keeps_ten_of_hundred() {
        let before = Tensor::new(&[3, 100], Fill::Zeros).unwrap();
        let after = Tensor::new(&[3, 100], Fill::Uniform { low: -1.0, high: 1.0, seed: 2 }).unwrap();
        let mut sp = SparseSkills {
            phi: after,
            mask: None,
            sparsity: 0.9,
            base: Tensor::new(&[100], Fill::Zeros).unwrap(),
        };
        assert_eq!(sp.keep_per_row(), 10);
        sp.select_mask(&before).unwrap();
        let mask = sp.mask.as_ref().unwrap();
        for j in 0..3 {
            assert_eq!(mask.row(j).iter().sum::<f64>(), 10.0);
        }
        assert_eq!(sp.to_coo().unwrap().len(), 30);
    }

    #[test]
    fn lora_examples() {
        let skills = LowRankSkills {
            a: t(&[1, 1, 1], &[2.0]),
            b: t(&[1, 1, 1], &[3.0]),
            w0: t(&[1, 1], &[1.0]),
            b0: t(&[1], &[0.0]),
        };
        let w = TaskWeights::new(vec![1.0]).unwrap();
        assert_eq!(lora_forward(&t(&[1], &[1.0]), &skills, &w).unwrap().data(), &[7.0]);

        let zero_a = LowRankSkills {
            a: Tensor::new(&[2, 3, 2], Fill::Zeros).unwrap(),
            b: Tensor::new(&[2, 2, 4], Fill::KaimingUniform { seed: 1 }).unwrap(),
            w0: Tensor::new(&[3, 4], Fill::KaimingUniform { seed: 2 }).unwrap(),
            b0: t(&[3], &[0.5, -0.5, 1.0]),
        };
        let x = t(&[4], &[1.0, -2.0, 0.5, 3.0]);
        let w = TaskWeights::new(vec![0.3, 0.7]).unwrap();
        let y = lora_forward(&x, &zero_a, &w).unwrap();
        for k in 0..3 {
            let expect: f64 = (0..4).map(|c| zero_a.w0.row(k)[c] * x.data()[c]).sum::<f64>()
                + zero_a.b0.data()[k];
            assert!((y.data()[k] - expect).abs() < 1e-15);
        }
    }

    #[test]
    fn lora_rank_too_large() {
        let skills = LowRankSkills {
            a: Tensor::new(&[1, 2, 3], Fill::Zeros).unwrap(),
            b: Tensor::new(&[1, 3, 2], Fill::Zeros).unwrap(),
            w0: Tensor::new(&[2, 2], Fill::Zeros).unwrap(),
            b0: Tensor::new(&[2], Fill::Zeros).unwrap(),
        };
        let w = TaskWeights::new(vec![1.0]).unwrap();
        let x = t(&[2], &[1.0, 1.0]);
        assert!(matches!(lora_forward(&x, &skills, &w), Err(Error::Shape(_))));
    }

    #[test]
    fn param_count_examples() {
        assert_eq!(param_count_lora(24, 1024, 16, 120, 1), 3_157_248);
        assert_eq!(param_count_lora(1, 1, 1, 0, 1), 8);
        assert_eq!(
            param_count_lora(24, 1024, 16, 120, 4),
            4 * param_count_lora(24, 1024, 16, 120, 1)
        );
    }

    #[test]
    fn composition_gradient_matches_finite_differences() {
        let phi = Tensor::new(&[3, 4], Fill::Uniform { low: -1.0, high: 1.0, seed: 8 }).unwrap();
        let target = [0.3, -0.2, 0.9, 0.1];
        let err = grad_check(
            |tape, w| {
                let base = tape.constant(&[4], vec![0.1; 4])?;
                let p = tape.leaf(&phi);
                let th = compose_on_tape(tape, base, p, w)?;
                let tg = tape.constant(&[4], target.to_vec())?;
                let d = tape.sub(th, tg)?;
                let sq = tape.mul(d, d)?;
                tape.sum(sq)
            },
            &t(&[3], &[0.2, 0.5, 0.3]),
            1e-6,
        )
        .unwrap();
        assert!(err < 1e-6, "{err}");
    }

    #[test]
    fn checkpoint_round_trip_and_truncation() {
        let a = Tensor::new(&[2, 3], Fill::KaimingUniform { seed: 3 }).unwrap();
        let b = t(&[1], &[f64::MIN_POSITIVE]);
        let bytes = encode_checkpoint(&[("phi", &a), ("b", &b)]);
        let back = decode_checkpoint(&bytes).unwrap();
        assert_eq!(back[0].0, "phi");
        assert_eq!(back[0].1, a);
        assert_eq!(back[1].1, b);
        assert!(decode_checkpoint(&bytes[..bytes.len() - 1]).is_err());
        assert!(decode_checkpoint(b"NOTACKPT").is_err());
    }
}
