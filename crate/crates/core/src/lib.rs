//! Liquid temporal feature evolution at desk scale.
//!
//! A feature map is progressively blurred and perturbed ([`perturb`]), the
//! resulting sequence is summarized by an LSTM ([`temporal`]), the encodings
//! drive an ODE over convolution-kernel weights ([`liquid`]), and the evolved
//! kernels adjust the original features, which are tied back to the
//! originals by alignment losses ([`align`]). [`pipeline`] wires these into a
//! toy detector with training, inference and a synthetic domain-shift
//! benchmark.

pub mod align;
pub mod diffcore;
pub mod error;
pub mod liquid;
pub mod perturb;
pub mod pipeline;
pub mod temporal;

pub use error::{LtfeError, Result};
