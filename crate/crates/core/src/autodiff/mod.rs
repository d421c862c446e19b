//! Minimal reverse-mode differentiation.
//!
//! A [`Graph`] records one forward pass over dense `f64` [`Tensor`]s.
//! Parameters live in a [`ParamStore`] that the graph only reads; after
//! [`Graph::backward`], [`Graph::gradients`] returns the parameter gradients as
//! a separate [`Gradients`] value so several graphs can run against one store
//! and be reduced afterwards.

pub mod archive;
mod graph;
mod layers;
mod params;
mod tensor;

pub use archive::{ArchiveEntry, TensorArchive};
pub use graph::{CustomOp, Graph, Var};
pub use layers::{bigru_forward, linear_forward, uniform_init, BiGruLayer, GruCell, LinearLayer};
pub use params::{Gradients, ParamId, ParamStore};
pub use tensor::Tensor;
