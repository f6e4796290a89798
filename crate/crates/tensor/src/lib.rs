//! A small CPU tensor engine for the convolutional layers used by the
//! scene network: convolutions (strided, dilated, asymmetric), transposed
//! convolutions, batch normalization, PReLU, max pooling with indices and
//! unpooling. Network code is written once against [`Exec`] and runs either
//! eagerly ([`Eager`]) or on a recording [`Graph`] that can be differentiated.

mod exec;
mod graph;
mod kernels;
mod optim;
mod params;
mod tensor;

pub use exec::{BatchNormIds, Eager, Exec};
pub use graph::{BnUpdate, Grads, Graph, Var};
pub use kernels::{Conv2dSpec, ConvTranspose2dSpec, PoolIndices, BN_EPS};
pub use optim::Adam;
pub use params::{ParamEntry, ParamId, ParamKind, ParamStore};
pub use tensor::Tensor;
