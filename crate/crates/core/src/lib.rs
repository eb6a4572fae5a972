//! Few-shot image recognition with prompt-conditioned feature extraction.
//!
//! A patch-transformer encoder whose feature extraction can be conditioned on
//! class-name embeddings through two mechanisms: appending a projected
//! embedding to the token sequence so self-attention mixes it with patches
//! (spatial interaction), and adding a sigmoid-gated vector computed from the
//! embedding plus patch context to every token (channel interaction). Models
//! are trained in two stages (supervised pre-training, then episodic
//! meta-training of encoder and projectors) and evaluated with
//! prototype-based N-way K-shot episodes.
//!
//! Everything runs on a small reverse-mode tape in double precision, so every
//! backward pass can be validated against central finite differences.

pub mod autodiff;
pub mod checkpoint;
pub mod data;
pub mod embeddings;
pub mod encoder;
pub mod error;
pub mod evaluation;
pub mod nn;
pub mod prompt;
pub mod tensor;
pub mod training;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
pub use data::{DatasetRecord, Episode, Prototype, Split, SplitDataset};
pub use embeddings::ClassEmbeddingTable;
pub use encoder::{Encoder, ModelConfig, TokenSequence};
pub use error::{Error, Result};
pub use evaluation::{Classifier, EvalReport};
pub use nn::{Activation, AttentionConfig, Parameter};
pub use prompt::{Mechanism, Pooling, ProjectorKind, PromptConfig, PromptModule};
pub use tensor::Tensor;
pub use training::{ClassifierHead, OptimizerKind, TrainConfig};
