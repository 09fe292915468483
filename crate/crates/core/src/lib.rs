//! Core library for sketch-conditioned video colourization at desk scale:
//! a causal 3D video VAE, a patch-token diffusion transformer conditioned by
//! channel-concatenated reference and sketch latents, low-rank adapters plus
//! a duplicated-branch baseline, a deterministic DDIM sampler, the synthetic
//! data pipeline, and the evaluation metric suite.

pub mod adapters;
pub mod checkpoint;
pub mod config;
pub mod dataset;
pub mod denoiser;
pub mod diffusion;
pub mod error;
pub mod graph;
pub mod metrics;
pub mod nn;
pub mod rng;
pub mod sketcher;
pub mod stats;
pub mod tensor;
pub mod train;
pub mod video;
pub mod videovae;

pub use error::{Error, Result};
pub use tensor::Tensor;
pub use video::{LatentTensor, VideoTensor};
