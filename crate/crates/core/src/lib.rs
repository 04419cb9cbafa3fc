//! Detection of localized temporal flicker in video clips via pixel-wise
//! temporal-frequency analysis.
//!
//! The pipeline: frames are loaded and grayscaled ([`ingest`]), dominant
//! spatial content is removed per frame ([`preprocess`]), every pixel's
//! intensity track is Fourier-transformed along time ([`spectrum`]), a
//! learned attention-proposal module crops suspicious regions with
//! differentiable soft masks ([`apm`]), frequency features are blended into a
//! frozen spatio-temporal context stack ([`blend`]), spatial and temporal
//! transformer encoders fuse the result ([`transformer`]), and a two-phase
//! loss trains the small parameter set ([`train`]). Synthetic flicker clips
//! with known ground truth ([`synth`]) drive evaluation end to end.
//!
//! Data-parallel inner loops (per-pixel transforms, per-frame filtering,
//! batch evaluation) run on rayon when the default `parallel` feature is
//! enabled and fall back to sequential loops otherwise; results are
//! bit-identical either way.

pub mod apm;
pub mod blend;
pub mod config;
pub mod error;
pub mod ingest;
pub mod model;
pub mod par;
pub mod preprocess;
pub mod spectrum;
pub mod stacks;
pub mod synth;
pub mod tensor;
pub mod train;
pub mod transformer;

pub use error::{Error, Result};
pub use tensor::FeatureTensor;
