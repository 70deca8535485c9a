//! Differentiable neural layers: convolutions (strided, padded, dilated,
//! asymmetric), transposed convolutions, max pooling with index export,
//! index-based unpooling, batch normalization, and activations.

pub mod act;
pub mod conv;
pub mod norm;
pub mod pool;

pub use act::Activation;
pub use conv::ConvSpec;
pub use norm::BnMode;
pub use pool::PoolIndices;
