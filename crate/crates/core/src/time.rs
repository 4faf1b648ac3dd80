use std::cmp::Ordering;
use std::fmt;

use serde::{Deserialize, Serialize};

/// Index into a novel's ordered timeline.
pub type Ordinal = u32;

/// A point on the diegetic timeline. Ordering is by ordinal only.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct StoryTime {
    pub ordinal: Ordinal,
    pub label: String,
}

impl StoryTime {
    pub fn new(ordinal: Ordinal, label: impl Into<String>) -> Self {
        Self { ordinal, label: label.into() }
    }
}

impl PartialOrd for StoryTime {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for StoryTime {
    fn cmp(&self, other: &Self) -> Ordering {
        self.ordinal.cmp(&other.ordinal).then_with(|| self.label.cmp(&other.label))
    }
}

impl fmt::Display for StoryTime {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "t={} ({})", self.ordinal, self.label)
    }
}
