//! Unpaired video-to-video translation with spatiotemporal consistency
//! learned from synthetic optical flow.
//!
//! Two single-frame generators `G_Y: X -> Y` and `G_X: Y -> X` are trained
//! adversarially. Instead of estimating motion between real frames, each
//! training step draws a random smooth flow field, warps a real frame with it
//! to simulate the next frame, and asks the generators to commute with that
//! warp (spatial loss) and to reconstruct the warped frame after a round trip
//! (recycle loss).

pub mod error;
pub mod flowsynth;
pub mod gradsuite;
pub mod seed;
pub mod warp;

pub use error::{Error, Result};
pub use flowsynth::{FlowField, FlowMode, FlowPair, FlowSpec, NoiseSharing, NoiseSpec};
pub use warp::{Border, OcclusionMask};
pub mod models;
pub use models::{build_discriminator, build_generator, DiscriminatorConfig, GeneratorConfig, Network, Translator};
pub mod losses;
pub use losses::{AdversarialForm, LossBreakdown, LossWeights, SuppressionFlags};
pub mod dataio;
pub use dataio::{Domain, SceneConfig, Split, VideoSequence};
pub mod evalmetrics;
pub use evalmetrics::{evaluate_run, segmentation_scores, warping_error, EvalReport};
pub mod trainer;
pub use trainer::{train, translate_sequence, TrainConfig, TrainData, Trainer};
pub mod experiment;
