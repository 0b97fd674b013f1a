//! Logical-form trees, dataset ingestion, vocabularies and delexicalisation.

mod dataset;
pub mod delex;
mod tree;
mod vocab;

pub use dataset::{
    intent_root, load_dataset, load_task_registry, parse_dataset, parse_overnight_line,
    parse_slu_line, parse_slu_tagged, split_by_hash, write_overnight, Example, Format, Split,
    TaskSource,
};
pub use delex::{delexicalize, relexicalize, relexicalize_tree, Alignment, Gazetteer};
pub use tree::{convert_slu, parse_logical_form, Tree};
pub use vocab::{
    build_input_vocab, build_output_vocab, build_vocab, InputVocab, OutputVocab, Vocab, VocabSet,
    UNK,
};
