//! Compositional lexical constraints for text generation.
//!
//! The crate covers the whole pipeline at desk scale: trait lexicons and
//! synthetic datasets ([`lexicon`]), the AND/OR acceptance automaton
//! ([`constraint`]), a pluggable language-model contract with a bundled
//! n-gram model ([`lm`]), constrained beam search and generate-and-filter
//! ([`decoder`]), iterative nullspace projection ([`inlp`]), toy supervised
//! and preference training ([`preference`]) and the evaluation suite
//! ([`metrics`]).

pub mod constraint;
pub mod decoder;
pub mod inlp;
pub mod lexicon;
pub mod lm;
pub mod metrics;
pub mod preference;
pub mod text;
