//! Analytical diffusion-model machinery without neural networks.
//!
//! A training set `{y_i}` defines an empirical delta mixture. Under any
//! Gaussian perturbation kernel the optimal noise predictor for that mixture
//! has a closed form ([`denoiser::OptimalDenoiser`]). Integrating the
//! probability-flow ODE with it ([`sampler`]) gives a deterministic map from
//! noise to images and back. The remaining modules measure how reproducible
//! and how novel those images are ([`metrics`]), probe the geometry of the
//! noise-to-image map ([`experiments`]) and solve inpainting problems by
//! deterministic posterior sampling ([`inverse`]).
//!
//! See the guide in `book/` for a narrative tour.

pub mod dataset;
pub mod denoiser;
pub mod error;
pub mod experiments;
pub mod image;
pub mod inverse;
pub mod metrics;
pub mod rng;
pub mod sampler;
pub mod schedule;
pub mod tensor_file;

pub use dataset::{load_dataset, Dataset};
pub use denoiser::{NoisePredictor, OptimalDenoiser, PosteriorStats, Prediction};
pub use error::{Error, Result};
pub use image::{Image, Shape};
pub use metrics::{
    gl_score, mae_score, rp_between, rp_cond, rp_score, score_matrix, BackendKind, EmbeddingTable,
    Metric, SampleSet, ScoreMatrix, SimilarityBackend,
};
pub use rng::{sample_standard_normal, SeededRng};
pub use sampler::{encode, generate, Grid, Method, SamplerConfig};
pub use schedule::{Schedule, ScheduleKind, ScheduleSample};
pub use tensor_file::{read_tensor, write_tensor, Tensor};

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/schedules.md")]
    mod schedules {}
    #[doc = include_str!("../../../book/src/denoiser.md")]
    mod denoiser {}
    #[doc = include_str!("../../../book/src/sampling.md")]
    mod sampling {}
    #[doc = include_str!("../../../book/src/metrics.md")]
    mod metrics {}
    #[doc = include_str!("../../../book/src/experiments.md")]
    mod experiments {}
    #[doc = include_str!("../../../book/src/inpainting.md")]
    mod inpainting {}
    #[doc = include_str!("../../../book/src/cli.md")]
    mod cli {}
}
