//! Selective state-space blocks over serialized point sequences.

pub mod block;
pub mod loan;
pub mod scan;

pub use block::{mamba_block, BlockConfig, BlockParams, Combine, ScanLayout, SsmParams};
pub use crate::nn::Direction;
pub use loan::{loan, LOAN_EPS};
pub use scan::{
    discretize, discretize_scalar, selective_scan, selective_scan_backward, Discretized, ScanInputs, ScanOutput,
};
