//! Simultaneous translation with prefix-to-prefix policies.
//!
//! The crate covers fixed read/write schedules ([`policy`]), latency
//! metrics ([`latency`]), a small Transformer trained and decoded under a
//! schedule ([`model`], [`training`], [`decoding`]), synthetic parallel data
//! ([`data`]) and evaluation ([`eval`], [`experiment`]).

pub mod data;
pub mod decoding;
mod error;
pub mod eval;
pub mod experiment;
pub mod latency;
mod matrix;
pub mod model;
pub mod policy;
mod tape;
pub mod training;

pub use error::{Error, Result};
pub use matrix::Matrix;
pub use policy::{Catchup, PolicyKind, PolicySchedule};
pub use tape::AttentionMask;
