//! Personalized natural-language recommendation over fixed multimodal
//! embeddings. Queries act as translations from users toward items in a
//! shared latent space; per-modality item embeddings are aggregated by
//! averaging, cross-attention, or a sparse noisy top-k gate; training is
//! pairwise ranking (BPR) with AdamW and cosine annealing.
//!
//! Modules:
//! - [`linalg`]: dense f32 matrices/vectors, stable scalar ops, seeded RNG
//! - [`data`]: embedding tables, catalogs, triplets, chronological split
//! - [`synth`]: planted-structure synthetic worlds for verification
//! - [`model`]: projections, mixers, scoring, catalog ranking
//! - [`baselines`]: Random, Pop, TwoTower, pairwise-contrastive retriever
//! - [`train`]: BPR training loop, exact gradients, AdamW, early stopping
//! - [`eval`]: Recall@K / NDCG@K over the full catalog, seed aggregation
//! - [`checkpoint`]: model container file (JSON header + JAMB blocks)

pub mod baselines;
pub mod checkpoint;
pub mod data;
pub mod error;
pub mod eval;
pub mod linalg;
pub mod model;
pub mod synth;
pub mod train;

pub use error::{JamError, Result};
