//! Vector math, the two-tower encoder, and the contrastive losses.

pub mod encoder;
pub mod gradcheck;
pub mod loss;
pub mod vector;

pub use encoder::{Architecture, EncoderParameters, Layer, Tower};
pub use gradcheck::finite_difference_check;
pub use loss::{
    batch_loss, info_nce, total_loss, triplet_margin, Batch, BatchItem, Gradients, LossConfig,
    LossTerms,
};
pub use vector::{cosine_similarity, Vector};
