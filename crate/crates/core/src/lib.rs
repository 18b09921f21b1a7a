//! Skeleton-based gait emotion recognition.
//!
//! The crate pairs a small reverse-mode autodiff engine with a dual-stream
//! network that models body posture and joint motion separately, couples the
//! streams with a bidirectional fusion module, and classifies walking
//! sequences into four emotion categories. It ships with a synthetic gait
//! generator so the full pipeline can be trained and evaluated without any
//! external dataset.

pub mod attention;
pub mod block;
pub mod checkpoint;
pub mod complexity;
pub mod contrastive;
pub mod data;
pub mod eval;
pub mod fusion;
pub mod graph;
pub mod model;
pub mod rng;
pub mod tensor;
pub mod train;
