//! Vocabularies, file formats and the synthetic grammar.

pub mod grammar;
pub mod io;
mod vocab;

pub use grammar::{
    generate_corpus, AlignmentLink, Language, ModifierLimits, ParallelPair, Role, SyntheticCorpus,
    SyntheticGrammar,
};
pub use vocab::{Vocab, BOS, EOS, PAD, RESERVED, UNK};
