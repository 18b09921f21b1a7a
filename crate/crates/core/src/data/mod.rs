//! Skeleton sequence types, dataset I/O, and feature extraction.

mod affective;
mod io;
mod motion;
mod preprocess;
mod synthetic;

pub use affective::{compute_affective, AFFECTIVE_DIM};
pub use io::{load_jsonl, save_jsonl};
pub use motion::{motion_stream, root_centered, MOTION_CHANNELS};
pub use preprocess::{augment, resample, sequence_tensor, stack_batch};
pub use synthetic::{generate, generate_dataset, ClassParams, GeneratorConfig};

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Number of joints in the skeleton layout.
pub const JOINT_COUNT: usize = 16;

/// Number of emotion classes.
pub const NUM_CLASSES: usize = 4;

/// One pose: `[joint][x, y, z]` in meters.
pub type Frame = [[f64; 3]; JOINT_COUNT];

/// Joint indices, named for readability in feature code.
pub mod joint {
    pub const ROOT: usize = 0;
    pub const SPINE: usize = 1;
    pub const NECK: usize = 2;
    pub const HEAD: usize = 3;
    pub const L_SHOULDER: usize = 4;
    pub const L_ELBOW: usize = 5;
    pub const L_HAND: usize = 6;
    pub const R_SHOULDER: usize = 7;
    pub const R_ELBOW: usize = 8;
    pub const R_HAND: usize = 9;
    pub const L_HIP: usize = 10;
    pub const L_KNEE: usize = 11;
    pub const L_FOOT: usize = 12;
    pub const R_HIP: usize = 13;
    pub const R_KNEE: usize = 14;
    pub const R_FOOT: usize = 15;
}

/// Parent of each joint; the root is its own parent.
pub const PARENTS: [usize; JOINT_COUNT] = [0, 0, 1, 2, 2, 4, 5, 2, 7, 8, 0, 10, 11, 0, 13, 14];

/// The 15 tree edges as (child, parent) pairs.
pub fn edges() -> Vec<(usize, usize)> {
    (1..JOINT_COUNT).map(|j| (j, PARENTS[j])).collect()
}

/// Hop distance from each joint to the root.
pub fn joint_depths() -> [usize; JOINT_COUNT] {
    let mut depth = [0usize; JOINT_COUNT];
    for j in 1..JOINT_COUNT {
        depth[j] = depth[PARENTS[j]] + 1;
    }
    depth
}

/// Emotion categories, ordered by class index.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EmotionLabel {
    Happy,
    Sad,
    Angry,
    Neutral,
}

impl EmotionLabel {
    pub const ALL: [EmotionLabel; NUM_CLASSES] =
        [EmotionLabel::Happy, EmotionLabel::Sad, EmotionLabel::Angry, EmotionLabel::Neutral];

    pub fn index(self) -> usize {
        match self {
            EmotionLabel::Happy => 0,
            EmotionLabel::Sad => 1,
            EmotionLabel::Angry => 2,
            EmotionLabel::Neutral => 3,
        }
    }

    pub fn from_index(i: usize) -> Option<EmotionLabel> {
        Self::ALL.get(i).copied()
    }

    pub fn as_str(self) -> &'static str {
        match self {
            EmotionLabel::Happy => "happy",
            EmotionLabel::Sad => "sad",
            EmotionLabel::Angry => "angry",
            EmotionLabel::Neutral => "neutral",
        }
    }
}

impl std::fmt::Display for EmotionLabel {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// A labeled motion-capture sequence.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SkeletonSequence {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub id: Option<String>,
    pub label: EmotionLabel,
    /// `[frame][joint][x, y, z]` coordinates in meters.
    pub frames: Vec<Frame>,
}

impl SkeletonSequence {
    /// Validates basic well-formedness: at least one frame, finite values.
    pub fn validate(&self) -> Result<(), String> {
        if self.frames.is_empty() {
            return Err("sequence has no frames".to_string());
        }
        for (t, frame) in self.frames.iter().enumerate() {
            for (j, p) in frame.iter().enumerate() {
                if p.iter().any(|v| !v.is_finite()) {
                    return Err(format!("non-finite coordinate at frame {t}, joint {j}"));
                }
            }
        }
        Ok(())
    }
}

/// Errors raised while loading, validating, or generating sequences.
#[derive(Debug, Error)]
pub enum DataError {
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("line {line}: {msg}")]
    Line { line: usize, msg: String },
    #[error("{0}")]
    Invalid(String),
}
