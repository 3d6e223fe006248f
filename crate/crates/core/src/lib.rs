//! Low-rank quantization error compensation for small causal decoders.
//!
//! The crate quantizes the decoder-layer weights of a byte-level GPT-style
//! model to 2–4 bits, attaches LoRA adapters to every linear module, and
//! tunes those adapters against discrepancy objectives of increasing scope:
//! the weight residual (alternating SVD), each linear module's output, each
//! layer's output, and the final layer's output combined with next-token
//! cross-entropy. The [`analysis`] module measures how sensitive each scope is
//! to the adapter rank.

pub mod analysis;
pub mod data;
pub mod error;
pub mod linalg;
pub mod lqec;
pub mod model;
pub mod optim;
pub mod quant;
pub mod rng;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::{Graph, Tensor, Var};
