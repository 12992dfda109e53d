//! Semantic product matching with a Siamese bag-of-tokens model.
//!
//! Queries and products are tokenized into a combined bag of word unigrams,
//! word n-grams and character trigrams (with hashed out-of-vocabulary bins),
//! embedded by average pooling over a shared embedding table, normalized and
//! compared by cosine similarity. The crate covers the full loop: vocabulary
//! building, log preprocessing into fixed-width record files, hinge-loss
//! training with sparse ADAM, exact top-k retrieval, IR metrics, and a
//! simulated model-parallel cosine that only exchanges three scalars per
//! shard.
//!
//! Data-parallel loops run on rayon when the `parallel` feature is enabled
//! (the default) and fall back to plain iterators otherwise. Results are
//! identical either way.

pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod index;
pub mod losses;
pub mod model;
pub mod par;
pub mod pipeline;
pub mod rng;
pub mod shard;
pub mod tokenizer;
pub mod training;

pub use error::{Error, Result};
pub use losses::{Label3, LossKind, LossSpec};
pub use model::{Arm, EmbeddingModel, ModelConfig, Normalization, Phase};
pub use tokenizer::{Side, TokenBag, TokenClass, TokenizerConfig, Vocabulary};
