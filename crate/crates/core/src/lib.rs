//! Curriculum-scheduled multi-teacher knowledge distillation for sequential
//! recommenders.
//!
//! The crate trains small teacher recommenders (or reads precomputed teacher
//! score matrices), distills their consistency-weighted in-batch score
//! distributions into a compact student under an easy-to-hard curriculum,
//! and evaluates with leave-one-out full ranking.

// `!(x >= 0.0)` checks reject NaN along with negatives.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod config;
pub mod curriculum;
pub mod data;
pub mod distill;
pub mod error;
pub mod eval;
pub mod model;
pub mod numerics;
pub mod optim;
pub mod pipeline;
pub mod seeding;
pub mod teacher;

pub use error::{Error, Result};
