use serde::{Deserialize, Serialize};
use std::fmt;
use std::str::FromStr;

use crate::error::Error;

/// ATOMIC-style commonsense relation. Declaration order is the canonical
/// serialization order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Relation {
    #[serde(rename = "xAttr")]
    XAttr,
    #[serde(rename = "xEffect")]
    XEffect,
    #[serde(rename = "xIntent")]
    XIntent,
    #[serde(rename = "xNeed")]
    XNeed,
    #[serde(rename = "xReact")]
    XReact,
    #[serde(rename = "xWant")]
    XWant,
    #[serde(rename = "oEffect")]
    OEffect,
    #[serde(rename = "oReact")]
    OReact,
    #[serde(rename = "oWant")]
    OWant,
}

impl Relation {
    pub const ALL: [Relation; 9] = [
        Relation::XAttr,
        Relation::XEffect,
        Relation::XIntent,
        Relation::XNeed,
        Relation::XReact,
        Relation::XWant,
        Relation::OEffect,
        Relation::OReact,
        Relation::OWant,
    ];

    /// The agent-centric subset used by default.
    pub const PERSONAL: [Relation; 6] = [
        Relation::XAttr,
        Relation::XEffect,
        Relation::XIntent,
        Relation::XNeed,
        Relation::XReact,
        Relation::XWant,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Relation::XAttr => "xAttr",
            Relation::XEffect => "xEffect",
            Relation::XIntent => "xIntent",
            Relation::XNeed => "xNeed",
            Relation::XReact => "xReact",
            Relation::XWant => "xWant",
            Relation::OEffect => "oEffect",
            Relation::OReact => "oReact",
            Relation::OWant => "oWant",
        }
    }

    pub fn open_token(self) -> String {
        format!("[{}]", self.name().to_uppercase())
    }

    pub fn close_token(self) -> String {
        format!("[/{}]", self.name().to_uppercase())
    }
}

impl fmt::Display for Relation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Relation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Relation::ALL
            .into_iter()
            .find(|r| r.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::invalid(format!("unknown relation `{s}`")))
    }
}
