//! diffmot: joint people detection and tracking with latent diffusion refinement.
//!
//! The pipeline noises latent box embeddings, refines them with a
//! track-conditioned transformer decoder, manages track lifecycles, and is
//! trained with a bipartite set-prediction loss. Everything runs on
//! deterministic synthetic crowd sequences and is evaluated with CLEAR MOT
//! metrics against a SORT baseline.

pub mod assign;
pub mod baseline;
pub mod cli;
pub mod clearmot;
pub mod config;
pub mod diffusion;
pub mod geom;
pub mod ndgrad;
pub mod nets;
pub mod synthworld;
pub mod tracker;
pub mod trainer;
