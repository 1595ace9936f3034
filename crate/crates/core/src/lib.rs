//! Masked generative modeling over multi-level token grids.

pub mod codegram;
pub mod error;
pub mod metrics;
pub mod model;
pub mod sampler;
pub mod scheduler;
pub mod seed;
pub mod selector;
pub mod synth;
pub mod tensor;
pub mod train;

pub use codegram::{apply_mask, embed_sum, CodebookSpec, Codegram, EmbeddingTable, MaskTensor, MaskedCodegram};
pub use error::{Error, Result};
pub use metrics::{cosine_semantic, frechet_distance, mfcc_like, novelty_score, EmbeddingSet, GaussianStats};
pub use model::{ConditioningBundle, LogitsGrid, MaskModel, ModelConfig, Stream, StreamRole, StreamSpec, Structure};
pub use sampler::{sample, sample_beams, SamplerConfig, TokenModel};
pub use scheduler::{build_sample_schedule, draw_train_mask, SampleSchedule};
pub use selector::{scav_contrastive_loss, scav_distance, select_best, Scav, ScavConfig, ScavPair};
pub use tensor::Mat;
pub use train::{LossBreakdown, TrainConfig, TrainExample, Trainer};
