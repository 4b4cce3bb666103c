//! Discovers the attributes a text-to-image model fills in the same way for
//! every image of a prompt, then expands the prompt along those attributes.

pub mod cache;
pub mod config;
pub mod embedding;
pub mod error;
pub mod evaluation;
pub mod expansion;
pub mod filtering;
pub mod generation;
pub mod hdi;
pub mod inversion;
pub mod lexicon;
pub mod linalg;
pub mod llm;
pub mod personalization;
pub mod pipeline;
pub mod remote;
pub mod scenarios;
pub mod scorer;
pub mod synthetic_image;
pub mod synthetic_llm;
pub mod templates;
pub mod vocab;

pub use error::{Error, Result};
