use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::Error;

/// The five recording postures.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Posture {
    HighSitting,
    LowSitting,
    Standing,
    StandingHandsBehindHead,
    Lying,
}

impl Posture {
    pub const ALL: [Posture; 5] = [
        Posture::HighSitting,
        Posture::LowSitting,
        Posture::Standing,
        Posture::StandingHandsBehindHead,
        Posture::Lying,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Posture::HighSitting => "high_sitting",
            Posture::LowSitting => "low_sitting",
            Posture::Standing => "standing",
            Posture::StandingHandsBehindHead => "standing_hands_behind_head",
            Posture::Lying => "lying",
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }

    /// Coarse three-way grouping: both sittings merge, both standings merge.
    pub fn merged(self) -> CoarsePosture {
        match self {
            Posture::HighSitting | Posture::LowSitting => CoarsePosture::Sitting,
            Posture::Standing | Posture::StandingHandsBehindHead => CoarsePosture::Standing,
            Posture::Lying => CoarsePosture::Lying,
        }
    }
}

impl fmt::Display for Posture {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Posture {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Posture::ALL
            .into_iter()
            .find(|p| p.as_str() == s)
            .ok_or_else(|| Error::UnknownLabel(format!("posture {s:?}")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CoarsePosture {
    Sitting,
    Standing,
    Lying,
}

impl CoarsePosture {
    pub const ALL: [CoarsePosture; 3] = [
        CoarsePosture::Sitting,
        CoarsePosture::Standing,
        CoarsePosture::Lying,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            CoarsePosture::Sitting => "sitting",
            CoarsePosture::Standing => "standing",
            CoarsePosture::Lying => "lying",
        }
    }
}
