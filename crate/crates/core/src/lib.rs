//! Open-vocabulary scene captioning with a hot-swappable definition store.

pub mod autodiff;
pub mod captioner;
pub mod error;
pub mod knowledge;
pub mod losses;
pub mod matching;
pub mod metrics;
pub mod model;
pub mod retrieval;
pub mod synthgen;
pub mod tensor;
pub mod trainer;
pub mod vocab;

pub use captioner::{Caption, Captioner, DecodeConfig};
pub use error::{Error, Result};
pub use knowledge::{DefinitionRecord, KnowledgeEntry, KnowledgeStore, SharedStore, NO_OBJECT};
pub use matching::{Assignment, TargetLabel, TargetSet};
pub use metrics::{ClassF1, EvalReport};
pub use model::{load_checkpoint, save_checkpoint, Activation, Checkpoint, ModelConfig, ModelParams, RoiVector};
pub use retrieval::{RegionFeature, RetrievalResult, ScoredTerm};
pub use synthgen::{generate_world, Scene, World, WorldConfig};
pub use tensor::Matrix;
pub use trainer::{Evaluation, Scenario, ScenarioReport, StepLog, TrainConfig, TrainOutcome};
pub use vocab::Vocabulary;
