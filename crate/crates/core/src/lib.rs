//! Generative cooperative networks.
//!
//! A conditional generator maps one-hot (or blended) feature vectors to
//! images. A multi-task classifier predicts every feature back from the
//! image. Both are trained on one shared objective: the generator is pushed
//! toward ground-truth pixels and toward images the classifier labels
//! correctly, while the classifier learns from the generator's output.

pub mod augment;
pub mod autograd;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod layers;
pub mod models;
pub mod optim;
pub mod schema;
pub mod tensor;
pub mod train;

pub use autograd::{GradBuffer, Gradients, Graph, Var};
pub use checkpoint::Checkpoint;
pub use error::{GcnError, Result};
pub use config::ExperimentConfig;
pub use models::{ClassifierArch, ClassifierModel, ClassifierSpec, GeneratorArch, GeneratorModel, GeneratorSpec, Scale};
pub use optim::{adam_step, lr_schedule, AdamHyper, AdamState};
pub use schema::{Feature, FeatureSchema};
pub use tensor::{Init, RngState, Scalar, Tensor};
