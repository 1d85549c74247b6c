//! Probabilistic circuits with structural marginal determinism.
//!
//! This crate implements layered probabilistic circuits whose support
//! properties are specified by *md-vtrees*: vtrees carrying a per-node label
//! that records which marginal determinism every sum layer must satisfy.
//! On top of that representation it provides:
//!
//! * the six basic circuit operations (marginalize, instantiate, product,
//!   power, max, log) with sound md-vtree propagation ([`ops`]);
//! * forward and backward tractability analysis of operation pipelines,
//!   including derivation of sufficient marginal-determinism requirements
//!   on the inputs ([`calculus`]);
//! * the MDNet architecture: randomly wired circuits that conform to a
//!   regular md-vtree by construction, with MLE/EM parameter learning
//!   ([`mdnet`]);
//! * ready-made causal-inference pipelines (backdoor, frontdoor, extended
//!   napkin) expressed as compositions of the basic operations ([`causal`]);
//! * a dense joint-table oracle used to cross-check every operation and
//!   estimand by exhaustive enumeration ([`oracle`]).
//!
//! Everything is deterministic given explicit seeds. Values are immutable
//! after construction; transforms return new values, so sharing across
//! threads needs no synchronization.

pub mod bench;
pub mod bn;
pub mod calculus;
pub mod causal;
pub mod circuit;
pub mod dataset;
pub mod error;
pub mod io;
pub mod label;
pub mod mdnet;
pub mod mdvtree;
pub mod ops;
pub mod oracle;
pub mod vars;
pub mod vtree;

pub use error::Error;
pub use label::Label;
pub use mdvtree::MdVtree;
pub use vars::{Assignment, VarId, VarSet, VariableSpace};
pub use vtree::{Vtree, VtreeNodeId};
