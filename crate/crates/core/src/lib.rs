//! Desk-scale simulator for federated continual novel-class learning.
//!
//! A federation of participants first learns a labelled set of known classes
//! (cross-entropy plus a prototype-contrastive term, FedAvg aggregation).
//! Unlabelled novel-class data then arrives; each participant filters it into
//! a bounded memory, clusters it into local prototypes, and the server merges
//! those prototypes by sweeping a density clustering over a rising radius to
//! estimate the global novel class count. The estimated prototypes initialise
//! new classifier rows, local training aligns representations to them with a
//! semantic-weighted distance loss, and an exponential moving average pulls
//! the feature extractor back toward its known-stage snapshot so known-class
//! accuracy survives.
//!
//! Every stage of the pipeline is deterministic given the experiment seed.
//! See the `guide` module (rendered by the mdbook sources in `book/`) for a
//! narrative walk-through.

pub mod clustering;
pub mod dataset;
mod error;
pub mod eval;
pub mod experiment;
pub mod federation;
pub mod guide;
pub mod losses;
pub mod model;
pub mod numcore;

pub use error::{Error, Result};
