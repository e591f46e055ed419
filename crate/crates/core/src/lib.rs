// `!(x > 0.0)` style checks are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod allocation;
pub mod autodiff;
pub mod baselines;
pub mod error;
pub mod experiment;
pub mod hierarchy;
pub mod ibp;
pub mod model;
pub mod optim;
pub mod recovery;
pub mod report;
pub mod skills;
pub mod tensor;
pub mod train;
pub mod world;

pub use error::{Error, Result};
