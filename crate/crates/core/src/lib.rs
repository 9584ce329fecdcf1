//! Synchronous data-parallel training on a define-by-run autodiff core.
//!
//! The pieces, bottom up:
//!
//! * [`autograd`]: tensors, the operation tape and backward propagation.
//! * [`models`]: the MLP classifier and its checkpoint format.
//! * [`optim`]: SGD and Adam.
//! * [`comm`]: the [`Communicator`] with ring allreduce, scatter, broadcast
//!   and barrier over in-process or TCP transports.
//! * [`distrib`]: [`MultiNodeOptimizer`] and [`scatter_dataset`].
//! * [`trainer`]: the forward / backward / allreduce / optimize loop.

pub mod autograd;
pub mod comm;
pub mod dataset;
pub mod distrib;
pub mod element;
pub mod error;
pub mod models;
pub mod optim;
pub mod trainer;

pub use autograd::Tensor;
pub use comm::{Communicator, ReduceOp};
pub use dataset::Dataset;
pub use distrib::{scatter_dataset, MultiNodeOptimizer, Shuffle};
pub use element::{DType, Element};
pub use error::{Error, Result};
