use serde::{Deserialize, Serialize};

/// Binary preference label.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Label {
    Chosen,
    Rejected,
}

impl Label {
    pub fn from_bool(chosen: bool) -> Self {
        if chosen {
            Label::Chosen
        } else {
            Label::Rejected
        }
    }

    pub fn is_chosen(self) -> bool {
        matches!(self, Label::Chosen)
    }
}

/// Scope of a labeled completion: a whole response or one sentence of it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Granularity {
    Response,
    Sentence,
}

/// Where a record or item came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Source {
    #[default]
    Factuality,
    General,
}
