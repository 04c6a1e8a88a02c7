//! Core library for the string-edit length-generalization lab: dataset
//! generation, a RASP-subset interpreter used as the gold oracle, a
//! compiler from those programs to fixed transformer weights, a trainable
//! minimal encoder-decoder transformer with analytic backpropagation, and
//! the error-indicator evaluation layer.

pub mod indicators;
pub mod model;
pub mod rasp;
pub mod rng;
pub mod taskgen;
pub mod tensor;
pub mod tensorfile;
pub mod vocab;
