//! Toolkit for analysing Alzheimer's-disease speech transcripts with language
//! model representations.
//!
//! - [`chat`]: CHAT (`.cha`) transcript parsing with byte-exact round-trip.
//! - [`markers`]: the 10-pattern disfluency/annotation marker set.
//! - [`actv`]: the `.actv` binary activation-dump format.
//! - [`probe`]: ridge-regression linear probes and the layer sweep.
//! - [`lens`]: token-level probe projections, fine-tuned vs. vanilla diffs,
//!   highlight reports and value distributions.
//! - [`loss`]: reference SFT losses with analytic gradients and
//!   finite-difference checks.
//! - [`dataprep`]: manifests, stratified splits and plain/marked pairs.

pub mod actv;
pub mod chat;
pub mod dataprep;
pub mod lens;
pub mod loss;
pub mod markers;
pub mod probe;

pub use nalgebra;

use std::fmt;

use serde::{Deserialize, Serialize};

/// Binary diagnosis label. AD is the positive class.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(try_from = "u8", into = "u8")]
pub enum Label {
    Control,
    Ad,
}

impl Label {
    pub fn as_u8(self) -> u8 {
        match self {
            Label::Control => 0,
            Label::Ad => 1,
        }
    }

    pub fn as_f64(self) -> f64 {
        f64::from(self.as_u8())
    }
}

impl From<Label> for u8 {
    fn from(l: Label) -> u8 {
        l.as_u8()
    }
}

impl TryFrom<u8> for Label {
    type Error = String;

    fn try_from(v: u8) -> Result<Self, Self::Error> {
        match v {
            0 => Ok(Label::Control),
            1 => Ok(Label::Ad),
            other => Err(format!("label must be 0 or 1, got {other}")),
        }
    }
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Label::Control => "control",
            Label::Ad => "ad",
        })
    }
}
