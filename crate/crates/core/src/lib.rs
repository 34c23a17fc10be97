//! Knowledge-grounded response selection.
//!
//! Given a dialogue context, a set of background knowledge entries and 20
//! candidate responses, the model ranks the candidates. Context and
//! knowledge representations are first filtered against each other with a
//! global cross-attention block, irrelevant knowledge entries are gated out,
//! and the response then refers to the filtered representations over several
//! iterations before per-iteration matching features are aggregated and
//! scored.
//!
//! Everything runs on a built-in reverse-mode tape ([`tape::Tape`]), so the
//! training stack (Adam, label-smoothed multi-iteration loss, checkpointing)
//! has no external ML dependencies and is verifiable against central finite
//! differences at f64.

pub mod error;
pub mod gradcheck;
pub mod params;
pub mod rng;
pub mod scalar;
pub mod tape;
pub mod tensor;

pub use error::{Error, Result};
pub use params::{Gradients, Param, ParamId, ParamSet};
pub use rng::Rng;
pub use scalar::Scalar;
pub use tape::{PoolMode, Tape, Var};
pub use tensor::Tensor;
