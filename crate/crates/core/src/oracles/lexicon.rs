use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use super::Relation;
use crate::error::{Error, Result};
use crate::util;

/// Data file driving the stub oracles: synonym groups and antonym pairs for
/// NLI, and a keyword → relation → attributes table for expansion.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Lexicon {
    #[serde(default)]
    pub synonym_groups: Vec<Vec<String>>,
    #[serde(default)]
    pub antonyms: Vec<[String; 2]>,
    #[serde(default)]
    pub expansions: BTreeMap<String, BTreeMap<Relation, Vec<String>>>,
}

impl Lexicon {
    pub fn load(path: &Path) -> Result<Self> {
        let lex: Lexicon = serde_json::from_slice(&std::fs::read(path)?)?;
        lex.validate()?;
        Ok(lex)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        util::atomic_write(path, &serde_json::to_vec_pretty(self)?)
    }

    pub fn validate(&self) -> Result<()> {
        let mut owner: HashMap<&str, usize> = HashMap::new();
        for (i, g) in self.synonym_groups.iter().enumerate() {
            for w in g {
                if let Some(j) = owner.insert(w.as_str(), i) {
                    if j != i {
                        return Err(Error::data(format!("word `{w}` belongs to two synonym groups")));
                    }
                }
            }
        }
        Ok(())
    }

    pub fn digest(&self) -> String {
        util::sha256_hex(&serde_json::to_vec(self).expect("lexicon serializes"))
    }
}
