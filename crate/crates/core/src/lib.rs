//! Text-to-CAD retrieval: encoders for text, CAD construction sequences and
//! point clouds, a masked-feature reconstruction decoder used only during
//! training, contrastive objectives, a trainer, and retrieval evaluation.

pub mod checkpoint;
pub mod corpus;
pub mod decoder;
pub mod diagnostics;
pub mod encoders;
pub mod error;
pub mod eval;
pub mod fusion;
pub mod graph;
pub mod layers;
pub mod model;
pub mod objectives;
pub mod params;
pub mod seed;
pub mod synthetic;
pub mod text;
pub mod trainer;

pub use checkpoint::{Checkpoint, InferenceModel};
pub use corpus::{CadSequence, Corpus, CorpusRecord, PointCloud, Split};
pub use encoders::FeatureMap;
pub use error::{Error, Result};
pub use eval::{GalleryIndex, MetricReport, RetrievalResult};
pub use fusion::{FusionStrategy, JointEmbedding};
pub use graph::Mat;
pub use model::{Ablation, Model, ModelConfig};
pub use objectives::{LossReport, Temperature};
pub use params::ParamStore;
pub use text::{ProviderSpec, TextEmbeddingProvider, TextQuery};
pub use trainer::{TrainConfig, Trainer};
