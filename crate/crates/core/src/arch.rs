use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::Error;

/// Tuple architecture of a similarity model.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Architecture {
    Siamese,
    Triplet,
    Quadruplet,
}

impl Architecture {
    /// Number of images per tuple.
    pub fn arity(self) -> usize {
        match self {
            Architecture::Siamese => 2,
            Architecture::Triplet => 3,
            Architecture::Quadruplet => 4,
        }
    }

    pub fn all() -> [Architecture; 3] {
        [Architecture::Siamese, Architecture::Triplet, Architecture::Quadruplet]
    }
}

impl fmt::Display for Architecture {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Architecture::Siamese => "siamese",
            Architecture::Triplet => "triplet",
            Architecture::Quadruplet => "quadruplet",
        })
    }
}

impl FromStr for Architecture {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "siamese" => Ok(Architecture::Siamese),
            "triplet" => Ok(Architecture::Triplet),
            "quadruplet" => Ok(Architecture::Quadruplet),
            other => Err(Error::invalid("architecture", format!("unknown architecture `{other}`"))),
        }
    }
}
