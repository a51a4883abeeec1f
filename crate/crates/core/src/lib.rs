//! Unsupervised speaker representation learning at desk scale.
//!
//! The pipeline bootstraps pseudo-labels from a classical i-vector
//! generative model (GMM-UBM + total-variability factor analysis), clusters
//! the vectors, trains a convolutional speaker encoder on the pseudo-labels
//! and iterates: each round the freshly trained encoder re-embeds the
//! corpus, the embeddings are re-clustered, and a new encoder is trained on
//! the refreshed labels. Verification quality is tracked with cosine
//! scoring and equal error rate.
//!
//! Module map:
//! - [`corpus`]: synthetic corpora (feature-space and waveform) and manifests
//! - [`features`]: framing, Mel filterbanks, MFCC, deltas, CMVN
//! - [`gmm`]: universal background model (EM) and Baum-Welch statistics
//! - [`ivector`]: total-variability training and i-vector extraction
//! - [`cluster`]: k-means, average-linkage cosine AHC, cluster metrics
//! - [`encoder`]: dilated-conv encoder, AM-softmax, manual backprop, Adam
//! - [`augment`]: cropping, additive noise at a target SNR, reverberation
//! - [`ipl`]: the iterative pseudo-labeling loop and ablation matrix
//! - [`eval`]: trial scoring and EER
//! - [`config`]: the TOML run configuration shared by the CLI stages

pub mod augment;
pub mod binio;
pub mod cluster;
pub mod config;
pub mod corpus;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod features;
pub mod gmm;
pub mod ipl;
pub mod ivector;
pub mod pipeline;
pub mod seed;

pub use error::{Error, Result};
