//! Token vocabulary, CBOW word vectors and fixed-shape input assembly.

mod cbow;
mod encoding;
mod vocab;

pub use cbow::{train_cbow, CbowConfig, CbowRun, EmbeddingMatrix};
pub use encoding::{assemble, expand_repeat, positional_encoding, AssembleOptions, RepeatMode};
pub use vocab::{Vocabulary, PAD, PAD_TOKEN, UNK, UNK_TOKEN};
