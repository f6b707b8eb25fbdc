//! Differentiable primitives. Each has a pure forward on [`Tensor`] and a
//! tape method that records its vector-Jacobian product.
//!
//! [`Tensor`]: crate::tensor::Tensor

mod activation;
mod attention;
mod conv;
mod elementwise;
mod linalg;
mod loss;
mod norm;
mod pool;

pub use activation::{activation, sigmoid, softplus, Activation};
pub use attention::{
    ca_hidden_width, channel_attention, ChannelAttentionVars, ChannelAttentionWeights,
    CA_HIDDEN_ACTIVATION, CA_REDUCTION,
};
pub use conv::{conv2d, depthwise_conv2d, ConvGeometry};
pub use elementwise::gather_rows;
pub(crate) use elementwise::scatter_rows;
pub use linalg::{linear, matmul, pointwise_conv};
pub use loss::{cross_entropy, softmax_rows};
pub use norm::{layer_norm, LN_EPS};
pub use pool::global_avg_pool;
