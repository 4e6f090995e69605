//! Geometry-aware molecular graph transformer toolkit: runtime angle and
//! dihedral aggregation, vector-scalar interaction, biased attention,
//! conformer-modality distillation and trimmed-mean ensembling.

pub mod distill;
pub mod ensemble;
pub mod error;
pub mod geom;
pub mod graph2d;
pub mod io;
pub mod model;
pub mod numcore;
pub mod rgc;
pub mod synth;

pub use error::{Error, Result};
