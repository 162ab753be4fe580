//! Forward ops and their hand-written reverse-mode gradients.

pub mod activation;
pub mod conv;
mod conv_direct;
pub mod dense;
pub mod loss;
pub mod norm;
pub mod pool;

pub use activation::{activation, activation_backward, sigmoid, Activation};
pub use conv::{conv3d, conv3d_backward, conv3d_backward_with, conv3d_with, output_extent, Conv3dGrads, ConvStrategy};
pub use dense::{dense, dense_backward, DenseGrads};
pub use loss::{bce_loss, CLAMP_EPS};
pub use norm::{batch_norm, batch_norm_backward, BatchNormGrads, BatchNormTrace, Mode, RunningStats};
pub use pool::{pool3d, pool3d_backward, PoolKind, PoolTrace};
