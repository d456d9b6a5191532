//! Concept-grounded similarity reasoning: concept head, local concept vectors,
//! contrastive multi-prototype learning, prototype-based prediction with operator
//! interaction, and evaluation.

pub(crate) mod checkpoint;
pub mod concept_head;
pub mod concept_vectors;
pub mod data;
pub mod error;
pub mod eval;
pub mod geometry;
pub mod gradcheck;
pub mod pipeline;
pub mod prototypes;
pub mod reasoning;
pub mod tensor;

pub use concept_head::{CamPooling, ConceptHead, TrainConfig};
pub use concept_vectors::LocalConceptVector;
pub use error::{CsrError, Result};
pub use geometry::{ImageSize, PixelBox};
pub use prototypes::{Atlas, ContrastiveConfig, Projector, PrototypeId};
pub use reasoning::{CsrModel, ExplanationBundle, InteractionSpec, Prediction, TaskHead, TaskHeadConfig};
pub use tensor::{DenseVector, FeatureMap, Grid};
