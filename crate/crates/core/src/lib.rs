//! BIO sequence tagging for patient-experience and PIO entities in health
//! forum posts.
//!
//! The crate covers the whole experiment loop: span-annotated corpora
//! ([`corpus`]), sentence segmentation and BIO alignment ([`tokenize`]),
//! disease/chemical marker augmentation ([`augment`]), trainable taggers
//! ([`backend`]), token/sentence metrics and the paired bootstrap test
//! ([`evaluation`]), and run orchestration ([`pipeline`]).

pub mod augment;
pub mod backend;
pub mod corpus;
pub mod error;
pub mod evaluation;
pub mod pipeline;
pub mod tokenize;

pub use error::{Error, Result};
