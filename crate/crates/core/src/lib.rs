//! Video embeddings in a shared text-video space.
//!
//! Per-frame visual embeddings are fused into a single unit-norm video
//! embedding by one of several temporal heads, trained by dot-product
//! classification against frozen class prototypes, and served through an
//! encode-once/query-many retrieval index.

pub mod analysis;
pub mod autodiff;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod heads;
pub mod optim;
pub mod retrieval;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::{Real, Tensor};
