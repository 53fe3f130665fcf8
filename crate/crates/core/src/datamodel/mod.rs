//! Catalogs, interaction logs, dataset preparation, leave-one-out splits and
//! the `SFUB` embedding file format.

mod catalog;
mod embfile;
mod prepare;
mod split;
pub mod synth;

pub use catalog::{
    load_interactions, load_items, write_interactions, write_items, Catalog, InteractionLog, Item,
};
pub use embfile::{
    decode_embeddings, encode_embeddings, read_embeddings, write_embeddings, EmbeddingMatrix,
    Stage, EMBEDDING_MAGIC, EMBEDDING_VERSION,
};
pub use prepare::{prepare_dataset, stratified_sample, StrataBounds, DEFAULT_MIN_LEN, COLD_START_MIN_LEN};
pub use split::{leave_one_out, SplitSet, UserSplit};
pub use synth::{synth_embeddings, SynthSpec};
