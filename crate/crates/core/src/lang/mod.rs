//! Instructions, corpora, synthetic tasks and demonstrations.

pub mod corpus;
pub mod demo;
pub mod synth;
pub mod vocab;

pub use corpus::{
    format_corpus, load_corpus, parse_corpus, save_corpus, CorpusRecord, TaskExample,
};
pub use demo::{make_demonstration, Execution};
pub use synth::{
    generate_synthetic, split_dataset, template_vocabulary, TemplateFamily, TemplateSet,
};
pub use vocab::{tokenize, Instruction, Vocabulary, PAD, UNK};
