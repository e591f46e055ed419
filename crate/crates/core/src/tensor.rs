//! Dense row-major `f64` tensors.
//!
//! A [`Tensor`] is a value: a shape, a flat data buffer and an optional
//! gradient buffer. Differentiation happens on a [`crate::autodiff::Tape`],
//! which copies leaf values in and hands gradients back out.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Uniform};

use crate::error::{Error, Result};

/// Initialisation rule for [`Tensor::new`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Fill {
    Zeros,
    Constant(f64),
    /// Uniform on `[low, high)`, deterministic for a given seed.
    Uniform { low: f64, high: f64, seed: u64 },
    /// Uniform on `±sqrt(6 / fan_in)` where `fan_in` is the last dimension.
    KaimingUniform { seed: u64 },
}

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
    requires_grad: bool,
    grad: Option<Vec<f64>>,
}

pub(crate) fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

fn check_dims(shape: &[usize]) -> Result<()> {
    if let Some(d) = shape.iter().find(|&&d| d == 0) {
        return Err(Error::shape(format!(
            "dimension {d} in {shape:?} must be at least 1"
        )));
    }
    Ok(())
}

/// `sqrt(6 / fan_in)`, the Kaiming-uniform bound used throughout.
pub fn kaiming_bound(fan_in: usize) -> f64 {
    (6.0 / fan_in as f64).sqrt()
}

impl Tensor {
    pub fn new(shape: &[usize], fill: Fill) -> Result<Self> {
        check_dims(shape)?;
        let n = numel(shape);
        let data = match fill {
            Fill::Zeros => vec![0.0; n],
            Fill::Constant(c) => vec![c; n],
            Fill::Uniform { low, high, seed } => {
                if !(low < high) {
                    return Err(Error::domain(format!(
                        "uniform fill needs low < high, got [{low}, {high})"
                    )));
                }
                sample_uniform(n, low, high, seed)
            }
            Fill::KaimingUniform { seed } => {
                let fan_in = *shape.last().unwrap_or(&1);
                let bound = kaiming_bound(fan_in);
                sample_uniform(n, -bound, bound, seed)
            }
        };
        Ok(Tensor {
            shape: shape.to_vec(),
            data,
            requires_grad: false,
            grad: None,
        })
    }

    pub fn from_vec(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        check_dims(shape)?;
        if numel(shape) != data.len() {
            return Err(Error::shape(format!(
                "shape {shape:?} holds {} values, got {}",
                numel(shape),
                data.len()
            )));
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data,
            requires_grad: false,
            grad: None,
        })
    }

    /// Rank-0 tensor.
    pub fn scalar(value: f64) -> Self {
        Tensor {
            shape: Vec::new(),
            data: vec![value],
            requires_grad: false,
            grad: None,
        }
    }

    /// Builds a `[rows, cols]` tensor from nested rows.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let r = rows.len();
        let c = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|row| row.len() != c) {
            return Err(Error::shape("ragged rows"));
        }
        Tensor::from_vec(&[r, c], rows.concat())
    }

    pub fn with_requires_grad(mut self, requires_grad: bool) -> Self {
        self.requires_grad = requires_grad;
        self
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn set_requires_grad(&mut self, requires_grad: bool) {
        self.requires_grad = requires_grad;
    }

    pub fn grad(&self) -> Option<&[f64]> {
        self.grad.as_deref()
    }

    pub fn zero_grad(&mut self) {
        self.grad = None;
    }

    /// Adds `g` into the gradient buffer, allocating it on first use.
    pub fn accumulate_grad(&mut self, g: &[f64]) -> Result<()> {
        if g.len() != self.data.len() {
            return Err(Error::shape(format!(
                "gradient of length {} for tensor of shape {:?}",
                g.len(),
                self.shape
            )));
        }
        let buf = self.grad.get_or_insert_with(|| vec![0.0; g.len()]);
        for (b, x) in buf.iter_mut().zip(g) {
            *b += x;
        }
        Ok(())
    }

    /// Value at a multi-index.
    pub fn get(&self, index: &[usize]) -> Result<f64> {
        if index.len() != self.shape.len() {
            return Err(Error::shape(format!(
                "index {index:?} has wrong rank for shape {:?}",
                self.shape
            )));
        }
        let mut flat = 0;
        for (&i, &d) in index.iter().zip(&self.shape) {
            if i >= d {
                return Err(Error::shape(format!(
                    "index {index:?} out of bounds for shape {:?}",
                    self.shape
                )));
            }
            flat = flat * d + i;
        }
        Ok(self.data[flat])
    }

    /// Row `i` of a rank-2 tensor.
    pub fn row(&self, i: usize) -> &[f64] {
        let cols = self.shape[1];
        &self.data[i * cols..(i + 1) * cols]
    }

    pub fn rows(&self) -> usize {
        self.shape[0]
    }

    pub fn cols(&self) -> usize {
        self.shape[1]
    }

    pub fn to_rows(&self) -> Vec<Vec<f64>> {
        (0..self.rows()).map(|i| self.row(i).to_vec()).collect()
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        check_dims(shape)?;
        if numel(shape) != self.data.len() {
            return Err(Error::shape(format!(
                "cannot reshape {:?} into {shape:?}",
                self.shape
            )));
        }
        self.shape = shape.to_vec();
        self.grad = None;
        Ok(self)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }
}

fn sample_uniform(n: usize, low: f64, high: f64, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dist = Uniform::new(low, high).expect("bounds checked by caller");
    (0..n).map(|_| dist.sample(&mut rng)).collect()
}
