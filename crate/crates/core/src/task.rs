use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

/// The four toy collection-prediction tasks.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    Points,
    Line,
    Gates,
    Polygons,
}

impl Task {
    pub const ALL: [Task; 4] = [Task::Points, Task::Line, Task::Gates, Task::Polygons];

    pub fn as_str(&self) -> &'static str {
        match self {
            Task::Points => "points",
            Task::Line => "line",
            Task::Gates => "gates",
            Task::Polygons => "polygons",
        }
    }

    /// Vertices carried by one object token (`n` in the token layout).
    pub fn vertices_per_token(&self) -> usize {
        match self {
            Task::Gates => 4,
            _ => 1,
        }
    }

    /// Tasks scored by IoU rather than by L1 distance.
    pub fn is_region_task(&self) -> bool {
        matches!(self, Task::Gates | Task::Polygons)
    }
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParseTaskError(pub String);

impl fmt::Display for ParseTaskError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "unknown task {:?} (expected points, line, gates or polygons)",
            self.0
        )
    }
}

impl std::error::Error for ParseTaskError {}

impl FromStr for Task {
    type Err = ParseTaskError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim() {
            "points" => Ok(Task::Points),
            "line" => Ok(Task::Line),
            "gates" => Ok(Task::Gates),
            "polygons" => Ok(Task::Polygons),
            other => Err(ParseTaskError(other.to_string())),
        }
    }
}
