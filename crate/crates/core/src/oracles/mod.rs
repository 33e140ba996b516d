//! External-knowledge oracles: natural language inference and commonsense
//! expansion. Each has a deterministic lexicon-driven stub, an HTTP backend,
//! and a content-addressed result cache that can wrap either.

mod cache;
mod lexicon;
mod relation;
mod remote;
mod stub;

pub use cache::{CachedExpander, CachedNli, OracleCache};
pub use lexicon::Lexicon;
pub use relation::Relation;
pub use remote::{RemoteExpander, RemoteNli};
pub use stub::{content_words, StubExpander, StubNli};

use serde::{Deserialize, Serialize};
use std::fmt;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NliClass {
    Entailment,
    Contradiction,
    Neutral,
}

impl fmt::Display for NliClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            NliClass::Entailment => "entailment",
            NliClass::Contradiction => "contradiction",
            NliClass::Neutral => "neutral",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NliLabel {
    #[serde(rename = "label")]
    pub class: NliClass,
    pub confidence: f64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Expansion {
    pub relation: Relation,
    pub attributes: Vec<String>,
}

pub trait NliBackend: Send + Sync {
    /// Stable identity used in cache keys.
    fn backend_id(&self) -> String;

    fn classify(&self, premise: &str, hypothesis: &str) -> Result<NliLabel>;
}

pub trait Expander: Send + Sync {
    fn backend_id(&self) -> String;

    fn expand(&self, text: &str, relations: &[Relation], max_attrs: usize) -> Result<Vec<Expansion>>;
}

impl<T: NliBackend + ?Sized> NliBackend for &T {
    fn backend_id(&self) -> String {
        (**self).backend_id()
    }
    fn classify(&self, premise: &str, hypothesis: &str) -> Result<NliLabel> {
        (**self).classify(premise, hypothesis)
    }
}

impl<T: Expander + ?Sized> Expander for &T {
    fn backend_id(&self) -> String {
        (**self).backend_id()
    }
    fn expand(&self, text: &str, relations: &[Relation], max_attrs: usize) -> Result<Vec<Expansion>> {
        (**self).expand(text, relations, max_attrs)
    }
}

impl<T: NliBackend + ?Sized> NliBackend for std::sync::Arc<T> {
    fn backend_id(&self) -> String {
        (**self).backend_id()
    }
    fn classify(&self, premise: &str, hypothesis: &str) -> Result<NliLabel> {
        (**self).classify(premise, hypothesis)
    }
}

impl<T: Expander + ?Sized> Expander for std::sync::Arc<T> {
    fn backend_id(&self) -> String {
        (**self).backend_id()
    }
    fn expand(&self, text: &str, relations: &[Relation], max_attrs: usize) -> Result<Vec<Expansion>> {
        (**self).expand(text, relations, max_attrs)
    }
}

/// Classifies whether `hypothesis` (a persona) follows from `premise` (an utterance).
pub fn nli_classify(premise: &str, hypothesis: &str, backend: &dyn NliBackend) -> Result<NliLabel> {
    if premise.trim().is_empty() || hypothesis.trim().is_empty() {
        return Err(Error::invalid("NLI inputs must be non-empty"));
    }
    let label = backend.classify(premise, hypothesis)?;
    if !(0.0..=1.0).contains(&label.confidence) {
        return Err(Error::MalformedResponse(format!("confidence {} outside [0, 1]", label.confidence)));
    }
    Ok(label)
}

/// Expands `text` along `relations`, returning at most `max_attrs` trimmed,
/// lowercase attributes per relation in canonical relation order. Relations
/// without attributes are omitted.
pub fn expand(text: &str, relations: &[Relation], backend: &dyn Expander, max_attrs: usize) -> Result<Vec<Expansion>> {
    if max_attrs == 0 {
        return Err(Error::invalid("max_attrs must be at least 1"));
    }
    let raw = backend.expand(text, relations, max_attrs)?;
    let mut out: Vec<Expansion> = Vec::new();
    for rel in Relation::ALL.into_iter().filter(|r| relations.contains(r)) {
        let mut attrs: Vec<String> = Vec::new();
        for e in raw.iter().filter(|e| e.relation == rel) {
            for a in &e.attributes {
                let a = a.trim().to_lowercase();
                if !a.is_empty() && !attrs.contains(&a) && attrs.len() < max_attrs {
                    attrs.push(a);
                }
            }
        }
        if !attrs.is_empty() {
            out.push(Expansion { relation: rel, attributes: attrs });
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    struct Noisy;
    impl Expander for Noisy {
        fn backend_id(&self) -> String {
            "noisy".into()
        }
        fn expand(&self, _: &str, _: &[Relation], _: usize) -> Result<Vec<Expansion>> {
            Ok(vec![
                Expansion { relation: Relation::OWant, attributes: vec!["x".into()] },
                Expansion { relation: Relation::XAttr, attributes: vec![" Kind ".into(), "kind".into(), "brave".into()] },
            ])
        }
    }

    #[test]
    fn expand_filters_and_orders() {
        let out = expand("t", &[Relation::XAttr], &Noisy, 1).unwrap();
        assert_eq!(out, vec![Expansion { relation: Relation::XAttr, attributes: vec!["kind".into()] }]);
        let out = expand("t", &Relation::ALL, &Noisy, 5).unwrap();
        assert_eq!(out.len(), 2);
        assert_eq!(out[0].relation, Relation::XAttr);
        assert_eq!(out[0].attributes, vec!["kind", "brave"]);
        assert!(expand("t", &Relation::ALL, &Noisy, 0).is_err());
    }

    #[test]
    fn relation_names_parse() {
        for r in Relation::ALL {
            assert_eq!(r.name().parse::<Relation>().unwrap(), r);
        }
        assert!("xFoo".parse::<Relation>().is_err());
        assert_eq!(Relation::XAttr.open_token(), "[XATTR]");
        assert_eq!(Relation::OWant.close_token(), "[/OWANT]");
    }
}
