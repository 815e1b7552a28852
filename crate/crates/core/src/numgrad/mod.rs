//! Reverse-mode differentiation over dense `f64` arrays, limited to the
//! operations the fusion pipeline needs, plus a finite-difference checker.

mod check;
mod ops;
mod params;
mod tensor;
mod value;
pub mod vxf;

pub use check::{grad_check, grad_check_split};
pub use ops::{GatherPlan, NORM_EPS};
pub use params::{glorot_uniform, BoundParams, LinearMap, ParamId, ParamStore, Sgd};
pub use tensor::{pairwise_sum, Tensor};
pub use value::{BackwardFn, Value};
