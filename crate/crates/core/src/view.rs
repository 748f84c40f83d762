use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::Error;

/// One of the two radiographic projections.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum View {
    Frontal,
    Lateral,
}

impl View {
    pub fn name(self) -> &'static str {
        match self {
            View::Frontal => "frontal",
            View::Lateral => "lateral",
        }
    }

    pub fn mode(self) -> ViewMode {
        match self {
            View::Frontal => ViewMode::FrontalOnly,
            View::Lateral => ViewMode::LateralOnly,
        }
    }
}

impl fmt::Display for View {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for View {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "frontal" => Ok(View::Frontal),
            "lateral" => Ok(View::Lateral),
            other => Err(Error::Config(format!("unknown view `{other}` (expected frontal or lateral)"))),
        }
    }
}

/// Which views are available to a run, for scoring or for inference.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ViewMode {
    #[serde(rename = "frontal")]
    FrontalOnly,
    #[serde(rename = "lateral")]
    LateralOnly,
    Both,
}

impl ViewMode {
    pub const ALL: [ViewMode; 3] = [ViewMode::Both, ViewMode::FrontalOnly, ViewMode::LateralOnly];

    pub fn name(self) -> &'static str {
        match self {
            ViewMode::FrontalOnly => "frontal",
            ViewMode::LateralOnly => "lateral",
            ViewMode::Both => "both",
        }
    }

    pub fn uses_frontal(self) -> bool {
        self != ViewMode::LateralOnly
    }

    pub fn uses_lateral(self) -> bool {
        self != ViewMode::FrontalOnly
    }
}

impl fmt::Display for ViewMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ViewMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "frontal" | "frontal-only" => Ok(ViewMode::FrontalOnly),
            "lateral" | "lateral-only" => Ok(ViewMode::LateralOnly),
            "both" => Ok(ViewMode::Both),
            other => Err(Error::Config(format!(
                "unknown view mode `{other}` (expected frontal, lateral or both)"
            ))),
        }
    }
}

/// The model head that produced a prediction.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SourceBranch {
    Frontal,
    Lateral,
    Merge,
}

impl SourceBranch {
    pub fn name(self) -> &'static str {
        match self {
            SourceBranch::Frontal => "frontal",
            SourceBranch::Lateral => "lateral",
            SourceBranch::Merge => "merge",
        }
    }
}

impl fmt::Display for SourceBranch {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for SourceBranch {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "frontal" => Ok(SourceBranch::Frontal),
            "lateral" => Ok(SourceBranch::Lateral),
            "merge" => Ok(SourceBranch::Merge),
            other => Err(Error::Config(format!("unknown source branch `{other}`"))),
        }
    }
}
