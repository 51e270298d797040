//! AuthGuard: a desk-scale deepfake detector that pairs a discriminative
//! classifier with uncertainty-aware image-text contrastive learning, plus a
//! small instruction-tuned reasoning head on top of the trained encoder.
//!
//! Module map:
//! - [`synthface`]: procedural real/fake face corpus.
//! - [`datagen`]: label-conditioned captioning and instruction synthesis.
//! - [`encoder`]: vision backbone, probabilistic head, statistical branch, gate.
//! - [`objectives`]: contrastive, BCE and KL losses with analytic gradients.
//! - [`train`]: stage-one training loop and ablation presets.
//! - [`reasoning`]: projector + toy language model (stage two).
//! - [`metrics`]: AUC, accuracy and caption metrics.

pub mod datagen;
pub mod encoder;
mod error;
pub mod io;
pub mod metrics;
pub mod objectives;
pub mod reasoning;
pub mod report;
pub mod seed;
pub mod synthface;
pub mod train;

pub use error::{Error, Result};

use serde::{Deserialize, Serialize};

/// Binary ground truth. `Fake` is the positive class (score 1).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Label {
    Real,
    Fake,
}

impl Label {
    pub fn as_str(self) -> &'static str {
        match self {
            Label::Real => "real",
            Label::Fake => "fake",
        }
    }

    pub fn target(self) -> f64 {
        match self {
            Label::Real => 0.0,
            Label::Fake => 1.0,
        }
    }

    pub fn from_target(y: u8) -> Option<Self> {
        match y {
            0 => Some(Label::Real),
            1 => Some(Label::Fake),
            _ => None,
        }
    }
}

impl std::fmt::Display for Label {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}
