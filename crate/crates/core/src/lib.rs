//! Desk-scale laboratory for cross-architecture knowledge distillation.
//!
//! The crate is organized around a small reverse-mode tensor engine
//! ([`tensor`]), toy staged backbones with attachable exit branches ([`nn`]),
//! the distillation loss family ([`losses`]), linear CKA feature-similarity
//! analysis ([`cka`]), a deterministic procedural dataset ([`data`]) and a
//! seeded training harness ([`trainer`]). The `ofakd` binary in [`cli`]
//! exposes all of it as subcommands.

pub mod cka;
pub mod cli;
pub mod data;
pub mod losses;
pub mod nn;
pub mod tensor;
pub mod trainer;

mod error;

pub use error::{Error, Result};
pub use tensor::{Elem, Tensor};
