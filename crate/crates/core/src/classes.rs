use serde::{Deserialize, Serialize};
use std::fmt;

/// Number of output classes (three margin types plus lesion-free tissue).
pub const NUM_CLASSES: usize = 4;

/// Mass-margin label. The discriminant is the logit / matrix index.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MarginClass {
    Circumscribed = 0,
    Indistinct = 1,
    Spiculated = 2,
    Negative = 3,
}

impl MarginClass {
    pub const ALL: [MarginClass; NUM_CLASSES] = [
        MarginClass::Circumscribed,
        MarginClass::Indistinct,
        MarginClass::Spiculated,
        MarginClass::Negative,
    ];

    /// The three lesion classes, excluding [`MarginClass::Negative`].
    pub const MARGINS: [MarginClass; 3] = [
        MarginClass::Circumscribed,
        MarginClass::Indistinct,
        MarginClass::Spiculated,
    ];

    #[inline]
    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Self> {
        Self::ALL.get(i).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            MarginClass::Circumscribed => "circumscribed",
            MarginClass::Indistinct => "indistinct",
            MarginClass::Spiculated => "spiculated",
            MarginClass::Negative => "negative",
        }
    }
}

impl fmt::Display for MarginClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}
