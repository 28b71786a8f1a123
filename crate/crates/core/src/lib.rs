//! Desk-scale vertical federated learning simulator.
//!
//! Two clients hold disjoint feature views (images and tabular records) of
//! the same samples; the server holds only labels. Clients encode their
//! rows into invariant and specific embeddings, the server aligns the
//! invariant pair with a cosine consistency term, fuses all four embeddings
//! with a transformer encoder and classifies. Gradients for the transmitted
//! embeddings travel back over an explicit, byte-accounted wire protocol.

pub mod autodiff;
pub mod data;
pub mod encoders;
pub mod error;
pub mod experiment;
pub mod federation;
pub mod fusion;
pub mod gradcheck;
pub mod metrics;
pub mod nn;
pub mod tensor;

pub use autodiff::{Gradients, Graph, NodeId};
pub use error::{Error, Result};
pub use tensor::Tensor;
