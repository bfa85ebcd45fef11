//! CTC training objectives for end-to-end sequence recognition: plain CTC,
//! self-conditioned intermediate CTC, hierarchical conditional CTC over a
//! ladder of subword vocabularies, and parallel multi-granularity CTC.

pub mod ctc;
pub mod encoder;
pub mod error;
pub mod harness;
pub mod numerics;
pub mod objectives;
pub mod subword;

pub use error::{Error, Result};
