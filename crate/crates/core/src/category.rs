use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

/// Six-way benchmark taxonomy.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskCategory {
    BasicCircuits,
    Qml,
    Protocols,
    ChemSim,
    Algorithms,
    CompilationNoise,
}

impl TaskCategory {
    pub const ALL: [TaskCategory; 6] = [
        TaskCategory::BasicCircuits,
        TaskCategory::Qml,
        TaskCategory::Protocols,
        TaskCategory::ChemSim,
        TaskCategory::Algorithms,
        TaskCategory::CompilationNoise,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            TaskCategory::BasicCircuits => "basic_circuits",
            TaskCategory::Qml => "qml",
            TaskCategory::Protocols => "protocols",
            TaskCategory::ChemSim => "chem_sim",
            TaskCategory::Algorithms => "algorithms",
            TaskCategory::CompilationNoise => "compilation_noise",
        }
    }
}

impl fmt::Display for TaskCategory {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("unknown task category `{0}`")]
pub struct UnknownCategory(pub String);

impl FromStr for TaskCategory {
    type Err = UnknownCategory;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        TaskCategory::ALL
            .into_iter()
            .find(|c| c.as_str() == s)
            .ok_or_else(|| UnknownCategory(s.to_string()))
    }
}
