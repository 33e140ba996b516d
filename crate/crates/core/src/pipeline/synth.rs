//! Synthetic persona-chat corpora with a planted lexical bias.
//!
//! Every episode draws a few concepts from a fixed bank. Each concept has two
//! paraphrased persona sentences, a differently worded "side" sentence, and
//! mention utterances that share no content words with any of them. Agent
//! turns about a concept either copy the profile wording (probability `beta`)
//! or use a mention, which only the commonsense lexicon can tie back to the
//! persona. One concept per episode is hidden from the profile but still
//! talked about.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, HashSet};

use crate::corpus::{ChatDataset, DialogueEpisode, Speaker, Split};
use crate::error::{Error, Result};
use crate::linkdata::GoldLink;
use crate::oracles::{content_words, Lexicon, NliClass, Relation, StubExpander, StubNli};
use crate::oracles::{expand, Expander};
use crate::util;

const BANK_JSON: &str = include_str!("../../data/concepts.json");

#[derive(Debug, Clone, Deserialize)]
pub struct Concept {
    pub name: String,
    pub heads: [String; 2],
    pub synonyms: Vec<String>,
    pub side: String,
    pub side_keywords: Vec<String>,
    pub mentions: Vec<String>,
    pub mention_keywords: Vec<String>,
    pub attributes: BTreeMap<Relation, Vec<String>>,
}

#[derive(Debug, Clone, Deserialize)]
pub struct ConceptBank {
    pub verb_groups: Vec<Vec<String>>,
    pub antonyms: Vec<[String; 2]>,
    pub user_turns: Vec<String>,
    pub copy_suffixes: Vec<String>,
    pub concepts: Vec<Concept>,
}

impl ConceptBank {
    pub fn builtin() -> Self {
        serde_json::from_str(BANK_JSON).expect("bundled concept bank parses")
    }

    /// Synonym groups, antonyms and a keyword table that maps every head
    /// noun, side keyword and mention keyword to its concept's attributes.
    pub fn lexicon(&self) -> Lexicon {
        let mut lex = Lexicon { synonym_groups: self.verb_groups.clone(), antonyms: self.antonyms.clone(), ..Default::default() };
        for c in &self.concepts {
            lex.synonym_groups.push(c.synonyms.clone());
            for k in c.synonyms.iter().chain(&c.side_keywords).chain(&c.mention_keywords) {
                lex.expansions.insert(k.clone(), c.attributes.clone());
            }
        }
        lex
    }

    fn conflicts(&self, a: usize, b: usize) -> bool {
        let (na, nb) = (&self.concepts[a].synonyms[0], &self.concepts[b].synonyms[0]);
        self.antonyms.iter().any(|[x, y]| (x == na && y == nb) || (x == nb && y == na))
    }

    /// Checks the properties the generator relies on. Returns a list of
    /// problems; empty means the bank is usable.
    pub fn problems(&self) -> Vec<String> {
        let lex = self.lexicon();
        let mut out = Vec::new();
        if let Err(e) = lex.validate() {
            out.push(e.to_string());
        }
        let nli = StubNli::new(&lex);
        let ex = StubExpander::new(&lex);
        let personas: Vec<(usize, &str)> = self
            .concepts
            .iter()
            .enumerate()
            .flat_map(|(i, c)| c.heads.iter().map(move |h| (i, h.as_str())).chain(std::iter::once((i, c.side.as_str()))))
            .collect();
        let expands = |t: &str| expand(t, &Relation::PERSONAL, &ex as &dyn Expander, 1).map(|e| !e.is_empty()).unwrap_or(false);
        for (ci, c) in self.concepts.iter().enumerate() {
            let own: HashSet<String> = c.heads.iter().chain(std::iter::once(&c.side)).flat_map(|p| content_words(p)).collect();
            for head in &c.heads {
                for suffix in &self.copy_suffixes {
                    let copy = format!("{head}{suffix}");
                    for &(pj, p) in &personas {
                        let entailed = nli.label(&copy, p) == NliClass::Entailment;
                        let want = pj == ci && p != c.side;
                        if entailed != want {
                            out.push(format!("copy `{copy}` vs persona `{p}`: entailment {entailed}"));
                        }
                    }
                }
            }
            for m in &c.mentions {
                if !expands(m) {
                    out.push(format!("mention `{m}` has no expander keyword"));
                }
                if let Some(w) = content_words(m).into_iter().find(|w| own.contains(w)) {
                    out.push(format!("mention `{m}` shares `{w}` with its personas"));
                }
                for &(_, p) in &personas {
                    if nli.label(m, p) == NliClass::Entailment {
                        out.push(format!("mention `{m}` entails `{p}`"));
                    }
                }
            }
            if !expands(&c.side) {
                out.push(format!("side persona `{}` has no expander keyword", c.side));
            }
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticSpec {
    pub train_episodes: usize,
    pub dev_episodes: usize,
    pub test_episodes: usize,
    /// Profile size per episode.
    pub personas_per_episode: usize,
    /// Concepts discussed but left out of the profile.
    pub hidden_personas: usize,
    /// Agent turns for each hidden concept.
    pub hidden_mentions: usize,
    /// Agent turns per episode; each follows a user turn.
    pub agent_turns: usize,
    /// Probability that an agent turn copies its persona's wording.
    pub beta: f64,
    /// Probability that a profile slot uses the side wording, which is never copied.
    pub zero_shot_fraction: f64,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            train_episodes: 1000,
            dev_episodes: 100,
            test_episodes: 150,
            personas_per_episode: 2,
            hidden_personas: 2,
            hidden_mentions: 2,
            agent_turns: 8,
            beta: 0.8,
            zero_shot_fraction: 0.3,
            seed: 0,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self, bank: &ConceptBank) -> Result<()> {
        if !(0.0..=1.0).contains(&self.beta) {
            return Err(Error::invalid(format!("beta {} outside [0, 1]", self.beta)));
        }
        if !(0.0..=1.0).contains(&self.zero_shot_fraction) {
            return Err(Error::invalid("zero_shot_fraction outside [0, 1]"));
        }
        if self.personas_per_episode == 0 || self.agent_turns == 0 || self.train_episodes == 0 {
            return Err(Error::invalid("need at least one persona, agent turn and training episode"));
        }
        let per_ep = self.personas_per_episode + self.hidden_personas;
        if per_ep > bank.concepts.len() / 2 {
            return Err(Error::invalid(format!(
                "lexicon too small: {} concepts per episode needs at least {} concepts, bank has {}",
                per_ep,
                per_ep * 2,
                bank.concepts.len()
            )));
        }
        Ok(())
    }
}

/// What the generator produced: three splits, the lexicon that drives the
/// stub oracles, and gold links for the test split.
#[derive(Debug, Clone)]
pub struct SyntheticCorpus {
    pub train: ChatDataset,
    pub dev: ChatDataset,
    pub test: ChatDataset,
    pub lexicon: Lexicon,
    pub gold_links: Vec<GoldLink>,
}

enum Variant {
    Head(usize),
    Side,
}

struct Episode {
    ep: DialogueEpisode,
    /// (utterance, gold persona text) for agent turns about profile concepts.
    links: Vec<(String, String)>,
}

fn gen_episode(bank: &ConceptBank, spec: &SyntheticSpec, id: String, rng: &mut impl Rng) -> Episode {
    let n = spec.personas_per_episode + spec.hidden_personas;
    let chosen: Vec<usize> = loop {
        let pick: Vec<usize> = rand::seq::index::sample(rng, bank.concepts.len(), n).into_vec();
        let clash = pick.iter().enumerate().any(|(i, &a)| pick[i + 1..].iter().any(|&b| bank.conflicts(a, b)));
        if !clash {
            break pick;
        }
    };
    let (visible, hidden) = chosen.split_at(spec.personas_per_episode);

    let mut slots: Vec<(usize, Variant)> = Vec::new();
    for &c in visible {
        let v = if rng.gen_bool(spec.zero_shot_fraction) { Variant::Side } else { Variant::Head(rng.gen_range(0..2)) };
        slots.push((c, v));
    }
    for &c in hidden {
        slots.push((c, Variant::Head(rng.gen_range(0..2))));
    }
    let text_of = |(c, v): &(usize, Variant)| -> String {
        match v {
            Variant::Head(h) => bank.concepts[*c].heads[*h].clone(),
            Variant::Side => bank.concepts[*c].side.clone(),
        }
    };
    let personas: Vec<String> = slots[..visible.len()].iter().map(text_of).collect();

    let mut schedule: Vec<usize> = (0..visible.len()).collect();
    for h in 0..hidden.len() {
        schedule.extend(std::iter::repeat(visible.len() + h).take(spec.hidden_mentions));
    }
    while schedule.len() < spec.agent_turns {
        schedule.push(rng.gen_range(0..slots.len()));
    }
    schedule.shuffle(rng);
    schedule.truncate(spec.agent_turns);

    let mut used: HashSet<(usize, usize)> = HashSet::new();
    let mut turns: Vec<(Speaker, String)> = Vec::new();
    let mut links = Vec::new();
    for s in schedule {
        turns.push((Speaker::User, bank.user_turns.choose(rng).expect("user turns").clone()));
        let (c, variant) = &slots[s];
        let concept = &bank.concepts[*c];
        let text = match variant {
            Variant::Head(h) if rng.gen_bool(spec.beta) => {
                format!("{}{}", concept.heads[*h], bank.copy_suffixes.choose(rng).expect("suffixes"))
            }
            _ => {
                let fresh: Vec<usize> = (0..concept.mentions.len()).filter(|m| !used.contains(&(*c, *m))).collect();
                let m = match fresh.choose(rng) {
                    Some(&m) => m,
                    None => rng.gen_range(0..concept.mentions.len()),
                };
                used.insert((*c, m));
                concept.mentions[m].clone()
            }
        };
        if s < visible.len() {
            links.push((text.clone(), text_of(&slots[s])));
        }
        turns.push((Speaker::Agent, text));
    }
    let persona_refs: Vec<&str> = personas.iter().map(String::as_str).collect();
    let turn_refs: Vec<(Speaker, &str)> = turns.iter().map(|(s, t)| (*s, t.as_str())).collect();
    Episode { ep: DialogueEpisode::new(id, &persona_refs, &turn_refs), links }
}

fn gen_split(bank: &ConceptBank, spec: &SyntheticSpec, split: Split, n: usize, stream: u64) -> Result<(ChatDataset, Vec<Episode>)> {
    let mut rng = util::rng(spec.seed, stream);
    let eps: Vec<Episode> = (0..n).map(|i| gen_episode(bank, spec, format!("{split}-{i:05}"), &mut rng)).collect();
    let ds = ChatDataset::new(split, eps.iter().map(|e| e.ep.clone()).collect())?;
    Ok((ds, eps))
}

pub fn gen_synthetic_corpus(spec: &SyntheticSpec) -> Result<SyntheticCorpus> {
    gen_synthetic_corpus_with(&ConceptBank::builtin(), spec)
}

pub fn gen_synthetic_corpus_with(bank: &ConceptBank, spec: &SyntheticSpec) -> Result<SyntheticCorpus> {
    spec.validate(bank)?;
    let (train, _) = gen_split(bank, spec, Split::Train, spec.train_episodes, 0x501)?;
    let (dev, _) = gen_split(bank, spec, Split::Dev, spec.dev_episodes.max(1), 0x502)?;
    let (test, test_eps) = gen_split(bank, spec, Split::Test, spec.test_episodes.max(1), 0x503)?;

    // Identical utterances from different episodes pool their gold ids; links
    // to personas the training split never shows are dropped.
    let known: HashSet<&str> = train.episodes.iter().flat_map(|e| e.personas.iter().map(|p| p.id.as_str())).collect();
    let mut gold: Vec<GoldLink> = Vec::new();
    let mut at: BTreeMap<String, usize> = BTreeMap::new();
    for (u, p) in test_eps.iter().flat_map(|e| e.links.iter()) {
        let pid = crate::corpus::persona_id(p);
        if !known.contains(pid.as_str()) {
            continue;
        }
        match at.get(u) {
            Some(&i) => {
                if !gold[i].gold_p_ids.contains(&pid) {
                    gold[i].gold_p_ids.push(pid);
                }
            }
            None => {
                at.insert(u.clone(), gold.len());
                gold.push(GoldLink { u: u.clone(), gold_p_ids: vec![pid] });
            }
        }
    }
    Ok(SyntheticCorpus { train, dev, test, lexicon: bank.lexicon(), gold_links: gold })
}
