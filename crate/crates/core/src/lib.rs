//! Weakly supervised temporal segmentation.
//!
//! A recurrent frame classifier is trained from `(features, transcript)` pairs
//! only. Every training step decodes the sequence with a length-aware,
//! grammar-constrained Viterbi search and uses the decoded frame labels as the
//! cross-entropy targets. The trained model can then segment unseen sequences
//! under an estimated grammar or align them to a given transcript.

pub mod cli;
pub mod dataio;
pub mod decoder;
pub mod error;
pub mod eval;
pub mod grammar;
pub mod network;
pub mod stats;
pub mod trainer;

pub use decoder::{
    brute_force_decode, expand_framewise, viterbi_decode, DurationModel, FlatDuration,
    ScoreMatrix, Segmentation,
};
pub use error::{Error, Result};
pub use grammar::{estimate_grammar, linear_grammar_from_transcript, Grammar, Nonterminal, Rule};
pub use network::{FrameSequence, NetParams, PosteriorMatrix};
pub use stats::{ClassPrior, LengthModel};

/// Class index into the label map.
pub type ClassId = usize;

/// Ordered class labels of a sequence, without timing.
pub type Transcript = Vec<ClassId>;
