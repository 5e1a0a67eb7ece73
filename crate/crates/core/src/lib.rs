//! Mining commonsense knowledge triples from dictionary term definitions.
//!
//! The crate is organised as a sequence of stages. Definitions and reference
//! graphs are ingested ([`corpus`]), tagged with universal part-of-speech labels
//! ([`tagging`]), per-relation tag patterns are mined from the reference graph
//! ([`patterns`]) and matched against definitions to build candidate triples
//! ([`extract`]). Candidates are scored ([`scoring`]), checked for novelty against
//! reference triples ([`novelty`]) and summarised ([`analysis`]). Human judgments
//! on sampled triples are collected through [`annotation`], and [`pipeline`]
//! wires every stage into a resumable run directory.

pub mod analysis;
pub mod annotation;
pub mod corpus;
pub mod embedding;
pub mod error;
pub mod extract;
pub mod novelty;
pub mod patterns;
pub mod pipeline;
pub mod scoring;
pub mod tagging;
pub mod tsv;

pub use error::{Error, Result};
