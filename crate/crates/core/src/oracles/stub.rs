//! Rule-based stand-ins for the NLI classifier and the commonsense expander.
//!
//! The NLI stub works on content groups. Text is split into clauses, each
//! clause takes negative polarity when it holds an odd number of negation
//! cues, stopwords and cues are dropped, and every remaining token maps to its
//! synonym group (or to itself when the lexicon has no group for it). Then:
//!
//! 1. the hypothesis must have at least one content group, otherwise Neutral;
//! 2. Entailment when every (group, polarity) of the hypothesis occurs in the premise;
//! 3. Contradiction when a shared group appears with a polarity the premise
//!    never uses, or when an antonym pair straddles the two sides;
//! 4. Neutral otherwise.

use std::collections::{BTreeMap, BTreeSet, HashMap};

use super::{Expander, Expansion, Lexicon, NliBackend, NliClass, NliLabel, Relation};
use crate::error::Result;

const NEGATION_CUES: [&str; 5] = ["not", "don't", "dont", "never", "no"];

const STOPWORDS: &[&str] = &[
    "a", "about", "after", "all", "also", "an", "and", "any", "are", "as", "at", "be", "been", "but", "by", "can",
    "could", "did", "do", "does", "for", "from", "had", "has", "he", "her", "here", "him", "his", "how", "i", "i'm",
    "if", "in", "into", "is", "it", "it's", "its", "just", "me", "mine", "more", "much", "my", "myself", "now", "of",
    "oh", "ok", "okay", "on", "or", "our", "out", "really", "she", "so", "some", "than", "that", "the", "their",
    "them", "then", "there", "these", "they", "this", "those", "to", "too", "up", "us", "very", "was", "we", "well",
    "were", "what", "when", "where", "which", "who", "why", "will", "with", "would", "yes", "you", "your",
];

fn words(text: &str) -> Vec<Vec<String>> {
    let mut clauses = vec![Vec::new()];
    let mut word = String::new();
    let chars: Vec<char> = text.chars().collect();
    let flush = |word: &mut String, clauses: &mut Vec<Vec<String>>| {
        if !word.is_empty() {
            let w = std::mem::take(word);
            if w == "but" {
                clauses.push(Vec::new());
            } else {
                clauses.last_mut().unwrap().push(w);
            }
        }
    };
    for (i, &c) in chars.iter().enumerate() {
        if c.is_alphanumeric() {
            word.extend(c.to_lowercase());
        } else if c == '\'' && !word.is_empty() && chars.get(i + 1).is_some_and(|n| n.is_alphabetic()) {
            word.push(c);
        } else {
            flush(&mut word, &mut clauses);
            if matches!(c, '.' | ',' | ';' | '!' | '?') {
                clauses.push(Vec::new());
            }
        }
    }
    flush(&mut word, &mut clauses);
    clauses.retain(|c| !c.is_empty());
    clauses
}

/// Lowercased tokens that the stub treats as content: no stopwords, no
/// negation cues.
pub fn content_words(text: &str) -> Vec<String> {
    words(text)
        .concat()
        .into_iter()
        .filter(|w| !NEGATION_CUES.contains(&w.as_str()) && !STOPWORDS.contains(&w.as_str()))
        .collect()
}

pub struct StubNli {
    group_of: HashMap<String, String>,
    antonyms: Vec<(String, String)>,
    digest: String,
}

impl StubNli {
    pub fn new(lexicon: &Lexicon) -> Self {
        let mut group_of = HashMap::new();
        for (i, g) in lexicon.synonym_groups.iter().enumerate() {
            for w in g {
                group_of.insert(w.to_lowercase(), format!("g{i}"));
            }
        }
        let mut stub = StubNli { group_of, antonyms: Vec::new(), digest: lexicon.digest() };
        stub.antonyms = lexicon.antonyms.iter().map(|[a, b]| (stub.group(a), stub.group(b))).collect();
        stub
    }

    fn group(&self, word: &str) -> String {
        let w = word.to_lowercase();
        self.group_of.get(&w).cloned().unwrap_or_else(|| format!("w:{w}"))
    }

    /// Content groups with the polarities they occur under (`true` = negated).
    fn content(&self, text: &str) -> BTreeMap<String, BTreeSet<bool>> {
        let mut out: BTreeMap<String, BTreeSet<bool>> = BTreeMap::new();
        for clause in words(text) {
            let negated = clause.iter().filter(|w| NEGATION_CUES.contains(&w.as_str())).count() % 2 == 1;
            for w in clause {
                if NEGATION_CUES.contains(&w.as_str()) || STOPWORDS.contains(&w.as_str()) {
                    continue;
                }
                out.entry(self.group(&w)).or_default().insert(negated);
            }
        }
        out
    }

    pub fn label(&self, premise: &str, hypothesis: &str) -> NliClass {
        let p = self.content(premise);
        let h = self.content(hypothesis);
        if h.is_empty() {
            return NliClass::Neutral;
        }
        let entailed = h.iter().all(|(g, pols)| p.get(g).is_some_and(|pp| pols.is_subset(pp)));
        if entailed {
            return NliClass::Entailment;
        }
        let conflict = h.iter().any(|(g, pols)| p.get(g).is_some_and(|pp| !pols.is_subset(pp)));
        let antonym = self.antonyms.iter().any(|(a, b)| {
            (h.contains_key(a) && p.contains_key(b)) || (h.contains_key(b) && p.contains_key(a))
        });
        if conflict || antonym {
            NliClass::Contradiction
        } else {
            NliClass::Neutral
        }
    }
}

impl NliBackend for StubNli {
    fn backend_id(&self) -> String {
        format!("stub-nli:{}", &self.digest[..16])
    }

    fn classify(&self, premise: &str, hypothesis: &str) -> Result<NliLabel> {
        Ok(NliLabel { class: self.label(premise, hypothesis), confidence: 1.0 })
    }
}

/// Keyword lookup over the lexicon's expansion table. Keywords may span
/// several words; matches are collected in order of first occurrence.
pub struct StubExpander {
    rules: Vec<(Vec<String>, BTreeMap<Relation, Vec<String>>)>,
    digest: String,
}

impl StubExpander {
    pub fn new(lexicon: &Lexicon) -> Self {
        let rules = lexicon
            .expansions
            .iter()
            .map(|(k, v)| (words(k).concat(), v.clone()))
            .filter(|(k, _)| !k.is_empty())
            .collect();
        StubExpander { rules, digest: lexicon.digest() }
    }
}

impl Expander for StubExpander {
    fn backend_id(&self) -> String {
        format!("stub-expander:{}", &self.digest[..16])
    }

    fn expand(&self, text: &str, relations: &[Relation], max_attrs: usize) -> Result<Vec<Expansion>> {
        let tokens: Vec<String> = words(text).concat();
        let mut hits: Vec<(usize, usize)> = Vec::new();
        for (r, (kw, _)) in self.rules.iter().enumerate() {
            if let Some(pos) = tokens.windows(kw.len()).position(|w| w == kw.as_slice()) {
                hits.push((pos, r));
            }
        }
        hits.sort_unstable();
        let mut out = Vec::new();
        for rel in Relation::ALL.into_iter().filter(|r| relations.contains(r)) {
            let mut attrs: Vec<String> = Vec::new();
            for &(_, r) in &hits {
                for a in self.rules[r].1.get(&rel).into_iter().flatten() {
                    let a = a.trim().to_lowercase();
                    if attrs.len() < max_attrs && !a.is_empty() && !attrs.contains(&a) {
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
}
