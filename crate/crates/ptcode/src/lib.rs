//! Hierarchical context-dependent encoder (CoDE) with conversation-completion
//! pre-training and transfer to utterance-level emotion recognition (ULER).
//!
//! The pipeline has three stages, each usable on its own:
//!
//! 1. [`subtitles`] turns raw subtitle documents into train/val/test
//!    conversation datasets plus pre-sampled noise pools.
//! 2. [`trainer`] pre-trains the two-level encoder ([`encoder`]) on the
//!    conversation-completion task ([`coco`]): mask one utterance, pick it
//!    out of a candidate set using the surrounding context.
//! 3. [`uler`] fine-tunes the pre-trained encoder for per-utterance emotion
//!    classification.
//!
//! All trainable paths run through the recording tape in [`tape`], and every
//! gradient is certified against central finite differences ([`gradcheck`]).

pub mod checkpoint;
pub mod coco;
pub mod corpus;
pub mod encoder;
pub mod error;
pub mod gradcheck;
pub mod optim;
pub mod params;
pub mod rng;
pub mod subtitles;
pub mod synth;
pub mod tape;
pub mod trainer;
pub mod uler;

pub use error::{Error, Result};
