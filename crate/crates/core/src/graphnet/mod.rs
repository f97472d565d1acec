//! GraphNet blocks, Graph Independent layers and encode-process-decode
//! stacks, all evaluated on an autodiff tape over a [`GraphBatch`].
//!
//! Modules hold only configuration and parameter names; values live in a
//! [`rvae_autodiff::ParameterStore`], so a single store can serve several
//! tapes and be checkpointed independently.

mod block;
mod epd;
mod mlp;

use std::str::FromStr;

use rvae_autodiff::{SegmentMode, Tape, Var};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::GraphBatch;

pub use block::{BlockConfig, EdgeInputs, GlobalInputs, GnBlock, NodeInputs, UpdateSpec};
pub use epd::{EncodeProcessDecode, EpdConfig, GlobalFlow};
pub use mlp::{Mlp, MlpInput};

/// Permutation-invariant reduction ρ.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Aggregator {
    Mean,
    Max,
    Min,
    Sum,
    /// `mean ‖ max ‖ min`, in that channel order.
    Composite,
}

impl Aggregator {
    pub fn out_dim(self, d: usize) -> usize {
        match self {
            Self::Composite => 3 * d,
            _ => d,
        }
    }

    /// Reduces the rows of `v` into `num_segments` rows grouped by `ids`.
    pub fn apply(self, tape: &mut Tape, v: Var, ids: &[usize], num_segments: usize) -> Result<Var> {
        let single = |tape: &mut Tape, mode| tape.segment_aggregate(v, ids, num_segments, mode);
        Ok(match self {
            Self::Mean => single(tape, SegmentMode::Mean)?,
            Self::Max => single(tape, SegmentMode::Max)?,
            Self::Min => single(tape, SegmentMode::Min)?,
            Self::Sum => single(tape, SegmentMode::Sum)?,
            Self::Composite => {
                let parts = [
                    single(tape, SegmentMode::Mean)?,
                    single(tape, SegmentMode::Max)?,
                    single(tape, SegmentMode::Min)?,
                ];
                tape.concat(&parts)?
            }
        })
    }
}

impl FromStr for Aggregator {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mean" => Ok(Self::Mean),
            "max" => Ok(Self::Max),
            "min" => Ok(Self::Min),
            "sum" => Ok(Self::Sum),
            "composite" => Ok(Self::Composite),
            other => Err(Error::Config(format!("unknown aggregator {other:?}"))),
        }
    }
}

/// Attribute widths at the node, edge and global level.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct GraphDims {
    pub node: usize,
    pub edge: usize,
    pub global: usize,
}

impl GraphDims {
    pub fn new(node: usize, edge: usize, global: usize) -> Self {
        Self { node, edge, global }
    }

    pub fn of_batch(batch: &GraphBatch) -> Self {
        Self::new(batch.nodes.cols(), batch.edges.cols(), batch.globals.cols())
    }
}

/// Attribute matrices of a batch recorded on a tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GraphVars {
    pub nodes: Var,
    pub edges: Var,
    pub globals: Var,
}

impl GraphVars {
    pub fn constants(tape: &mut Tape, batch: &GraphBatch) -> Self {
        Self {
            nodes: tape.constant(batch.nodes.clone()),
            edges: tape.constant(batch.edges.clone()),
            globals: tape.constant(batch.globals.clone()),
        }
    }

    /// Like [`GraphVars::constants`] but every level is differentiable.
    pub fn variables(tape: &mut Tape, batch: &GraphBatch) -> Self {
        Self {
            nodes: tape.variable(batch.nodes.clone()),
            edges: tape.variable(batch.edges.clone()),
            globals: tape.variable(batch.globals.clone()),
        }
    }

    pub fn dims(&self, tape: &Tape) -> GraphDims {
        GraphDims::new(
            tape.value(self.nodes).cols(),
            tape.value(self.edges).cols(),
            tape.value(self.globals).cols(),
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rvae_autodiff::Tensor;

    #[test]
    fn composite_is_mean_max_min() {
        let mut tape = Tape::new();
        let v = tape.constant(Tensor::from_rows(&[vec![1.0, -4.0], vec![3.0, 2.0], vec![7.0, 0.0]], 2).unwrap());
        let out = Aggregator::Composite.apply(&mut tape, v, &[0, 0, 1], 2).unwrap();
        let out = tape.value(out);
        assert_eq!(out.shape(), &[2, 6]);
        assert_eq!(out.row(0), &[2.0, -1.0, 3.0, 2.0, 1.0, -4.0]);
        assert_eq!(out.row(1), &[7.0, 0.0, 7.0, 0.0, 7.0, 0.0]);
        assert_eq!(Aggregator::Composite.out_dim(4), 12);
    }

    #[test]
    fn parses_names() {
        assert_eq!("composite".parse::<Aggregator>().unwrap(), Aggregator::Composite);
        assert!("median".parse::<Aggregator>().is_err());
    }
}
