//! Few-shot nested named entity recognition by in-context learning.
//!
//! The pipeline samples a k-shot support set, ranks its sentences as
//! demonstrations for each test sentence with a contrastively trained
//! retriever (semantic, POS-sequence and constituency-tree encoders), renders
//! a four-part prompt, completes it with a frozen generative LM, parses the
//! reply back into spans, and scores them with strict span F1.

pub mod boundary;
pub mod cli;
pub mod corpus;
pub mod encoders;
pub mod eval;
pub mod lmclient;
pub mod prompt;
pub mod retriever;
