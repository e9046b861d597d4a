//! Inference-cost accounting.
//!
//! Convention: convolutions and dense layers cost 2 FLOPs per
//! multiply-accumulate plus one FLOP per bias add; a convolution's MAC
//! count uses the full kernel footprint at every output position (padding
//! taps included). Pooling costs one FLOP per input element. ReLU, batch
//! norm, residual adds, softmax, and concatenation are excluded. Costs are
//! per sample and attributed to the block (common / early-exit / final)
//! the layer belongs to.

use crate::graph::{Block, GraphModel};
use crate::tensor::Scalar;

/// Per-block FLOP counts for one sample.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FlopsBreakdown {
    pub common: u64,
    pub ee: u64,
    pub final_block: u64,
}

impl FlopsBreakdown {
    /// Cost of taking the early exit: common + early-exit block.
    pub fn early_path(&self) -> u64 {
        self.common + self.ee
    }

    /// Cost of taking the final exit: the early path plus the final block
    /// (the early-exit block runs before the decision either way).
    pub fn final_path(&self) -> u64 {
        self.early_path() + self.final_block
    }

    pub fn total(&self) -> u64 {
        self.common + self.ee + self.final_block
    }
}

/// Count stored parameter scalars (kernels, biases, batch-norm
/// scale/shift and running statistics).
pub fn count_params<T: Scalar>(model: &GraphModel<T>) -> u64 {
    model.params().count_scalars()
}

/// Per-block FLOP counts for `model`.
pub fn count_flops<T: Scalar>(model: &GraphModel<T>) -> FlopsBreakdown {
    let mut out = FlopsBreakdown { common: 0, ee: 0, final_block: 0 };
    for (block, flops) in model.layer_costs() {
        match block {
            Block::Common => out.common += flops,
            Block::EarlyExit => out.ee += flops,
            Block::Final => out.final_block += flops,
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn path_costs_compose() {
        let f = FlopsBreakdown { common: 10, ee: 3, final_block: 20 };
        assert_eq!(f.early_path(), 13);
        assert_eq!(f.final_path(), 33);
        assert_eq!(f.total(), 33);
    }
}
