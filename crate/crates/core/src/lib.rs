//! Grouped weight sharing for text classification.
//!
//! Words that an external resource (a sentiment lexicon, Brown clusters, a
//! MeSH tree) places in the same group are made to share a subset of their
//! embedding coordinates. Each coordinate `(i, j)` of the shared embedding
//! matrix is a signed copy of coordinate `j` of one of the groups word `i`
//! belongs to, chosen by hashing. The shared matrix feeds the second channel
//! of a two-channel convolutional classifier whose first channel reads
//! ordinary pretrained vectors.
//!
//! Module map:
//!
//! * [`corpus`]: vocabularies, datasets and embedding file IO.
//! * [`groups`]: resource adapters compiling into a [`groups::GroupTable`].
//! * [`hashshare`]: hashing, shared-matrix synchronization and gradient
//!   aggregation.
//! * [`nnet`]: convolution, pooling, softmax, dropout and Adadelta kernels.
//! * [`model`]: the two-channel CNN, its trainer and checkpoints.
//! * [`eval`]: folds, downsampling, metrics and the replicated CV harness.
//! * [`config`]: the TOML run configuration.
//! * [`cli`]: the `grouptie` command line.

pub mod cli;
pub mod config;
pub mod corpus;
pub mod eval;
pub mod groups;
pub mod hashshare;
pub mod model;
pub mod nnet;
pub mod seed;

mod error;

pub use error::{Error, Result};
