//! Semantic data sourcing: find the data sources whose content matches a
//! task query, pick which of them upload over a shared fading uplink, and
//! measure how often the chosen uploads miss the target.
//!
//! - [`embeddings`]: query/key vectors, synthetic generation, file I/O,
//!   query quantization, domain statistics.
//! - [`matching`]: cosine/dot scoring, Gaussian KL domain matching, expert
//!   gateway and server polling rankings.
//! - [`channel`]: Rayleigh power gains, Shannon rates, upload accounting.
//! - [`selection`]: JSCM, BSS, BCS, RS and threshold selection.
//! - [`protocol`]: one query/score/select/upload round with a message trace.
//! - [`harness`]: paired-world Monte-Carlo experiments and CSV output.

pub mod channel;
pub mod embeddings;
pub mod error;
pub mod harness;
pub mod matching;
pub mod protocol;
pub mod selection;

pub use error::{Error, Result};
