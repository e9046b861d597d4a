//! Forward kernels and their adjoints for every layer type the bundled
//! models need. All kernels are plain loops over NHWC buffers with the
//! innermost loop running over a contiguous axis; adjoints are hand
//! derived and validated against central finite differences in the test
//! suite.

mod conv;
mod dense;
mod loss;
mod norm;
mod pool;

pub use conv::{
    conv2d, conv2d_backward, depthwise_conv2d, depthwise_conv2d_backward, pointwise_conv2d,
    pointwise_conv2d_backward,
};
pub use dense::{dense, dense_backward, flatten, flatten_backward};
pub use loss::{
    cross_entropy, cross_entropy_backward, joint_loss, softmax, softmax_backward,
    softmax_cross_entropy_grad, CE_CLAMP,
};
pub use norm::{
    batch_norm_backward, batch_norm_infer, batch_norm_train, relu, relu_backward, BnCache,
    BN_EPSILON, BN_MOMENTUM,
};
pub use pool::{global_avg_pool, global_avg_pool_backward};

use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};

/// Spatial padding rule for convolutions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Padding {
    /// Zero padding, output dim `ceil(in / stride)`, padding split
    /// floor-left / ceil-right.
    Same,
    /// No padding, output dim `floor((in - k) / stride) + 1`.
    Valid,
}

impl Padding {
    /// Output extent and left padding for one spatial axis.
    pub fn out_and_pad(self, input: usize, kernel: usize, stride: usize) -> Result<(usize, usize)> {
        if stride == 0 {
            return Err(Error::op("padding", "stride must be >= 1"));
        }
        match self {
            Padding::Same => {
                let out = input.div_ceil(stride);
                let needed = (out - 1) * stride + kernel;
                let total = needed.saturating_sub(input);
                Ok((out, total / 2))
            }
            Padding::Valid => {
                if input < kernel {
                    return Err(Error::op(
                        "padding",
                        format!("valid padding needs input {input} >= kernel {kernel}"),
                    ));
                }
                Ok(((input - kernel) / stride + 1, 0))
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_padding_shape_rule() {
        // 4 wide, kernel 3, stride 2 -> out ceil(4/2)=2, needed (2-1)*2+3=5, pad 1, left 0
        assert_eq!(Padding::Same.out_and_pad(4, 3, 2).unwrap(), (2, 0));
        // 32 wide, kernel 3, stride 1 -> out 32, pad total 2, left 1
        assert_eq!(Padding::Same.out_and_pad(32, 3, 1).unwrap(), (32, 1));
        // 49 wide, kernel 10, stride 2 -> out 25, needed 58, pad 9, left 4
        assert_eq!(Padding::Same.out_and_pad(49, 10, 2).unwrap(), (25, 4));
    }

    #[test]
    fn valid_padding_shape_rule() {
        assert_eq!(Padding::Valid.out_and_pad(3, 3, 1).unwrap(), (1, 0));
        assert_eq!(Padding::Valid.out_and_pad(8, 3, 2).unwrap(), (3, 0));
        assert!(Padding::Valid.out_and_pad(2, 3, 1).is_err());
    }
}
