//! Persona-Chat style corpora: episodes of (agent profile, tagged turns), the
//! persona knowledge base built from the training split, and the pair
//! enumeration that feeds link supervision.

use rand::seq::index;
use serde::{Deserialize, Serialize};
use std::collections::HashSet;
use std::fmt;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::util;

/// Lowercase, collapse whitespace and strip trailing punctuation.
pub fn normalize(text: &str) -> String {
    let collapsed = text.split_whitespace().collect::<Vec<_>>().join(" ").to_lowercase();
    collapsed
        .trim_end_matches(|c: char| c.is_ascii_punctuation() || c.is_whitespace())
        .to_string()
}

/// Content-derived persona identifier. Two sentences with the same normalized
/// text share an id across splits and files.
pub fn persona_id(text: &str) -> String {
    let digest = util::sha256_hex(normalize(text).as_bytes());
    format!("p{}", &digest[..12])
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct PersonaSentence {
    pub id: String,
    pub text: String,
}

impl PersonaSentence {
    pub fn new(text: impl Into<String>) -> Self {
        let text = text.into();
        PersonaSentence { id: persona_id(&text), text }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Speaker {
    User,
    Agent,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Utterance {
    pub speaker: Speaker,
    pub turn: usize,
    pub text: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Provenance {
    Original,
    Augmented,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProfileEntry {
    pub persona: PersonaSentence,
    pub provenance: Provenance,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DialogueEpisode {
    pub id: String,
    pub personas: Vec<PersonaSentence>,
    pub utterances: Vec<Utterance>,
    pub augmented_personas: Vec<ProfileEntry>,
}

impl DialogueEpisode {
    pub fn new(id: impl Into<String>, personas: &[&str], turns: &[(Speaker, &str)]) -> Self {
        DialogueEpisode {
            id: id.into(),
            personas: personas.iter().map(|p| PersonaSentence::new(*p)).collect(),
            utterances: turns
                .iter()
                .enumerate()
                .map(|(turn, (speaker, text))| Utterance { speaker: *speaker, turn, text: text.to_string() })
                .collect(),
            augmented_personas: Vec::new(),
        }
    }

    /// Original personas followed by augmented ones, in insertion order.
    pub fn full_profile(&self) -> Vec<&PersonaSentence> {
        let mut out: Vec<&PersonaSentence> = self.personas.iter().collect();
        let mut seen: HashSet<&str> = out.iter().map(|p| p.id.as_str()).collect();
        for entry in &self.augmented_personas {
            if entry.provenance == Provenance::Augmented && seen.insert(entry.persona.id.as_str()) {
                out.push(&entry.persona);
            }
        }
        out
    }

    pub fn has_persona(&self, id: &str) -> bool {
        self.personas.iter().any(|p| p.id == id) || self.augmented_personas.iter().any(|e| e.persona.id == id)
    }

    fn validate(&self) -> Result<()> {
        let bad = |what: &str| Error::data(format!("episode `{}`: {what}", self.id));
        if self.id.trim().is_empty() {
            return Err(Error::data("episode with empty id"));
        }
        if self.utterances.is_empty() {
            return Err(bad("no utterances"));
        }
        for (i, u) in self.utterances.iter().enumerate() {
            if u.text.trim().is_empty() {
                return Err(bad(&format!("empty utterance at turn {i}")));
            }
            if i > 0 && u.turn <= self.utterances[i - 1].turn {
                return Err(bad("turn indices not strictly increasing"));
            }
        }
        if self.personas.iter().any(|p| p.text.trim().is_empty()) {
            return Err(bad("empty persona sentence"));
        }
        let mut ids = HashSet::new();
        for e in &self.augmented_personas {
            if !ids.insert(e.persona.id.as_str()) {
                return Err(bad(&format!("duplicate augmented persona `{}`", e.persona.text)));
            }
            if e.provenance == Provenance::Original && !self.personas.iter().any(|p| p.id == e.persona.id) {
                return Err(bad("original entry missing from personas"));
            }
            if !e.score.is_finite() {
                return Err(bad("non-finite augmentation score"));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Dev,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Dev => "dev",
            Split::Test => "test",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ChatDataset {
    pub split: Split,
    pub episodes: Vec<DialogueEpisode>,
}

impl ChatDataset {
    pub fn new(split: Split, episodes: Vec<DialogueEpisode>) -> Result<Self> {
        let ds = ChatDataset { split, episodes };
        ds.validate()?;
        Ok(ds)
    }

    pub fn validate(&self) -> Result<()> {
        if self.episodes.is_empty() {
            return Err(Error::data("empty dataset"));
        }
        let mut ids = HashSet::new();
        for ep in &self.episodes {
            ep.validate()?;
            if !ids.insert(ep.id.as_str()) {
                return Err(Error::data(format!("duplicate episode id `{}`", ep.id)));
            }
        }
        Ok(())
    }

    pub fn agent_utterances(&self) -> impl Iterator<Item = (&DialogueEpisode, &Utterance)> {
        self.episodes
            .iter()
            .flat_map(|ep| ep.utterances.iter().filter(|u| u.speaker == Speaker::Agent).map(move |u| (ep, u)))
    }
}

// ---------------------------------------------------------------------------
// JSONL
// ---------------------------------------------------------------------------

#[derive(Serialize, Deserialize)]
struct TurnRecord {
    speaker: Speaker,
    text: String,
}

#[derive(Serialize, Deserialize)]
struct AugmentedRecord {
    text: String,
    score: f64,
    #[serde(default = "default_provenance", skip_serializing_if = "is_augmented")]
    provenance: Provenance,
}

fn default_provenance() -> Provenance {
    Provenance::Augmented
}

fn is_augmented(p: &Provenance) -> bool {
    *p == Provenance::Augmented
}

#[derive(Serialize, Deserialize)]
struct EpisodeRecord {
    id: String,
    personas: Vec<String>,
    turns: Vec<TurnRecord>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    augmented: Vec<AugmentedRecord>,
}

impl From<&DialogueEpisode> for EpisodeRecord {
    fn from(ep: &DialogueEpisode) -> Self {
        EpisodeRecord {
            id: ep.id.clone(),
            personas: ep.personas.iter().map(|p| p.text.clone()).collect(),
            turns: ep.utterances.iter().map(|u| TurnRecord { speaker: u.speaker, text: u.text.clone() }).collect(),
            augmented: ep
                .augmented_personas
                .iter()
                .map(|e| AugmentedRecord { text: e.persona.text.clone(), score: e.score, provenance: e.provenance })
                .collect(),
        }
    }
}

impl From<EpisodeRecord> for DialogueEpisode {
    fn from(r: EpisodeRecord) -> Self {
        DialogueEpisode {
            id: r.id,
            personas: r.personas.into_iter().map(PersonaSentence::new).collect(),
            utterances: r
                .turns
                .into_iter()
                .enumerate()
                .map(|(turn, t)| Utterance { speaker: t.speaker, turn, text: t.text })
                .collect(),
            augmented_personas: r
                .augmented
                .into_iter()
                .map(|a| ProfileEntry { persona: PersonaSentence::new(a.text), provenance: a.provenance, score: a.score })
                .collect(),
        }
    }
}

pub fn load_chat_dataset(path: &Path, split: Split) -> Result<ChatDataset> {
    let file = std::fs::File::open(path)?;
    let mut episodes = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: EpisodeRecord = serde_json::from_str(&line).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            msg: e.to_string(),
        })?;
        episodes.push(DialogueEpisode::from(rec));
    }
    ChatDataset::new(split, episodes)
}

pub fn save_chat_dataset(dataset: &ChatDataset, path: &Path) -> Result<()> {
    dataset.validate()?;
    let mut buf = Vec::new();
    for ep in &dataset.episodes {
        serde_json::to_writer(&mut buf, &EpisodeRecord::from(ep))?;
        buf.write_all(b"\n")?;
    }
    util::atomic_write(path, &buf)
}

// ---------------------------------------------------------------------------
// Persona knowledge base
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Pkb {
    pub personas: Vec<PersonaSentence>,
}

impl Pkb {
    pub fn len(&self) -> usize {
        self.personas.len()
    }

    pub fn is_empty(&self) -> bool {
        self.personas.is_empty()
    }

    pub fn contains(&self, id: &str) -> bool {
        self.personas.iter().any(|p| p.id == id)
    }

    pub fn ids(&self) -> HashSet<&str> {
        self.personas.iter().map(|p| p.id.as_str()).collect()
    }

    pub fn get(&self, id: &str) -> Option<&PersonaSentence> {
        self.personas.iter().find(|p| p.id == id)
    }

    /// Keeps a seeded uniform subset of `cap` entries, preserving order.
    pub fn capped(&self, cap: usize, seed: u64) -> Pkb {
        if cap >= self.len() {
            return self.clone();
        }
        let mut rng = util::rng(seed, 0x9b);
        let mut keep = index::sample(&mut rng, self.len(), cap).into_vec();
        keep.sort_unstable();
        Pkb { personas: keep.into_iter().map(|i| self.personas[i].clone()).collect() }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        util::atomic_write(path, &serde_json::to_vec_pretty(self)?)
    }

    pub fn load(path: &Path) -> Result<Pkb> {
        let pkb: Pkb = serde_json::from_slice(&std::fs::read(path)?)?;
        for p in &pkb.personas {
            if p.id != persona_id(&p.text) {
                return Err(Error::data(format!("persona `{}` has a non-canonical id", p.text)));
            }
        }
        Ok(pkb)
    }
}

/// Union of all training profiles, deduplicated by normalized text in order of
/// first occurrence.
pub fn build_pkb(dataset: &ChatDataset) -> Result<Pkb> {
    if dataset.split != Split::Train {
        return Err(Error::invalid(format!("persona knowledge base must come from the train split, got {}", dataset.split)));
    }
    let mut seen = HashSet::new();
    let mut personas = Vec::new();
    for ep in &dataset.episodes {
        for p in &ep.personas {
            if seen.insert(p.id.clone()) {
                personas.push(p.clone());
            }
        }
    }
    Ok(Pkb { personas })
}

// ---------------------------------------------------------------------------
// Pair enumeration
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MatchMode {
    InDialogue,
    OutDialogue,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Side {
    #[default]
    AgentOnly,
    Both,
}

impl Side {
    fn admits(self, speaker: Speaker) -> bool {
        self == Side::Both || speaker == Speaker::Agent
    }
}

#[derive(Debug, Clone, Copy)]
pub struct Pair<'a> {
    pub episode: &'a str,
    pub utterance: &'a Utterance,
    pub persona: &'a PersonaSentence,
}

/// Streams (utterance, persona) candidates.
///
/// In-dialogue pairs an utterance with its own episode's profile; out-dialogue
/// pairs every admitted utterance with every PKB entry. Utterances with
/// identical text are emitted once.
pub fn enumerate_pairs<'a>(
    dataset: &'a ChatDataset,
    pkb: &'a Pkb,
    mode: MatchMode,
    side: Side,
) -> impl Iterator<Item = Pair<'a>> + 'a {
    let mut seen_pairs: HashSet<(&'a str, &'a str)> = HashSet::new();
    let mut seen_utts: HashSet<&'a str> = HashSet::new();
    dataset
        .episodes
        .iter()
        .flat_map(move |ep| {
            ep.utterances.iter().filter(move |u| side.admits(u.speaker)).map(move |u| (ep, u))
        })
        .filter(move |(_, u)| mode == MatchMode::InDialogue || seen_utts.insert(u.text.as_str()))
        .flat_map(move |(ep, u)| {
            let personas: &'a [PersonaSentence] = match mode {
                MatchMode::InDialogue => &ep.personas,
                MatchMode::OutDialogue => &pkb.personas,
            };
            personas.iter().map(move |p| Pair { episode: ep.id.as_str(), utterance: u, persona: p })
        })
        .filter(move |pair| seen_pairs.insert((pair.utterance.text.as_str(), pair.persona.id.as_str())))
}

// ---------------------------------------------------------------------------
// Persona removal
// ---------------------------------------------------------------------------

/// Keeps `round(keep_fraction * m)` personas per episode, chosen uniformly with a
/// seeded RNG. Order of the kept personas is preserved.
pub fn remove_personas(dataset: &ChatDataset, keep_fraction: f64, seed: u64) -> Result<ChatDataset> {
    if !(0.0..=1.0).contains(&keep_fraction) {
        return Err(Error::invalid(format!("keep_fraction {keep_fraction} outside [0, 1]")));
    }
    let mut rng = util::rng(seed, 0x52);
    let mut out = dataset.clone();
    for ep in &mut out.episodes {
        let m = ep.personas.len();
        let k = (keep_fraction * m as f64).round() as usize;
        let mut keep = index::sample(&mut rng, m, k.min(m)).into_vec();
        keep.sort_unstable();
        ep.personas = keep.into_iter().map(|i| ep.personas[i].clone()).collect();
        let kept: HashSet<String> = ep.personas.iter().map(|p| p.id.clone()).collect();
        ep.augmented_personas.retain(|e| e.provenance == Provenance::Augmented || kept.contains(&e.persona.id));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use Speaker::{Agent, User};

    fn ep(id: &str, personas: &[&str], turns: &[(Speaker, &str)]) -> DialogueEpisode {
        DialogueEpisode::new(id, personas, turns)
    }

    #[test]
    fn load_single_episode() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.jsonl");
        std::fs::write(
            &path,
            r#"{"id":"e1","personas":["i like dogs.","i am a doctor."],"turns":[{"speaker":"user","text":"hi"},{"speaker":"agent","text":"hello"}]}"#,
        )
        .unwrap();
        let ds = load_chat_dataset(&path, Split::Train).unwrap();
        assert_eq!(ds.episodes.len(), 1);
        assert_eq!(ds.episodes[0].personas.len(), 2);
        assert_eq!(ds.episodes[0].utterances.len(), 2);
        assert_eq!(ds.episodes[0].utterances[1].speaker, Agent);
    }

    #[test]
    fn load_rejects_empty_and_duplicates() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("empty.jsonl");
        std::fs::write(&path, "").unwrap();
        let err = load_chat_dataset(&path, Split::Train).unwrap_err();
        assert!(err.to_string().contains("empty dataset"));

        let line = r#"{"id":"dup","personas":[],"turns":[{"speaker":"agent","text":"x"}]}"#;
        std::fs::write(&path, format!("{line}\n{line}\n")).unwrap();
        let err = load_chat_dataset(&path, Split::Train).unwrap_err();
        assert!(err.to_string().contains("dup"));

        std::fs::write(&path, "{not json\n").unwrap();
        match load_chat_dataset(&path, Split::Train).unwrap_err() {
            Error::Parse { line, .. } => assert_eq!(line, 1),
            e => panic!("unexpected {e}"),
        }
    }

    #[test]
    fn save_writes_augmented_field() {
        let mut e = ep("e1", &["i like dogs"], &[(Agent, "dogs are great")]);
        e.augmented_personas.push(ProfileEntry {
            persona: PersonaSentence::new("i have a puppy"),
            provenance: Provenance::Augmented,
            score: 0.5,
        });
        let ds = ChatDataset::new(Split::Train, vec![e]).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("o.jsonl");
        save_chat_dataset(&ds, &path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.contains("\"augmented\""));
        assert_eq!(load_chat_dataset(&path, Split::Train).unwrap(), ds);

        let bad = dir.path().join("missing").join("nested\0/x.jsonl");
        assert!(save_chat_dataset(&ds, &bad).is_err());
    }

    #[test]
    fn pkb_union_and_normalized_dedup() {
        let ds = ChatDataset::new(
            Split::Train,
            vec![ep("a", &["A one", "B two"], &[(Agent, "x")]), ep("b", &["b  TWO.", "C three"], &[(Agent, "y")])],
        )
        .unwrap();
        let pkb = build_pkb(&ds).unwrap();
        assert_eq!(pkb.len(), 3);
        assert_eq!(pkb.personas[1].text, "B two");

        let ds = ChatDataset::new(Split::Train, vec![ep("a", &["I like dogs.", "i like  dogs."], &[(Agent, "x")])]).unwrap();
        assert_eq!(build_pkb(&ds).unwrap().len(), 1);

        let dev = ChatDataset { split: Split::Dev, ..ds };
        assert!(build_pkb(&dev).is_err());
    }

    #[test]
    fn pair_counts() {
        let one = ChatDataset::new(
            Split::Train,
            vec![ep("a", &["p1", "p2"], &[(User, "hi"), (Agent, "u1"), (User, "ok"), (Agent, "u2")])],
        )
        .unwrap();
        let pkb = build_pkb(&one).unwrap();
        assert_eq!(enumerate_pairs(&one, &pkb, MatchMode::InDialogue, Side::AgentOnly).count(), 4);
        assert_eq!(enumerate_pairs(&one, &pkb, MatchMode::InDialogue, Side::Both).count(), 8);

        let two = ChatDataset::new(
            Split::Train,
            vec![ep("a", &["p1"], &[(Agent, "u1")]), ep("b", &["p2"], &[(Agent, "u2")])],
        )
        .unwrap();
        let pkb = build_pkb(&two).unwrap();
        assert_eq!(enumerate_pairs(&two, &pkb, MatchMode::OutDialogue, Side::AgentOnly).count(), 4);
        assert_eq!(enumerate_pairs(&two, &pkb, MatchMode::InDialogue, Side::AgentOnly).count(), 2);
    }

    #[test]
    fn removal_fractions() {
        let ds = ChatDataset::new(
            Split::Test,
            vec![ep("a", &["p1", "p2", "p3", "p4", "p5"], &[(Agent, "u")]), ep("b", &["q1", "q2"], &[(Agent, "v")])],
        )
        .unwrap();
        assert_eq!(remove_personas(&ds, 1.0, 3).unwrap(), ds);
        let none = remove_personas(&ds, 0.0, 3).unwrap();
        assert!(none.episodes.iter().all(|e| e.personas.is_empty()));
        let a = remove_personas(&ds, 0.8, 11).unwrap();
        let b = remove_personas(&ds, 0.8, 11).unwrap();
        assert_eq!(a.episodes[0].personas.len(), 4);
        assert_eq!(a.episodes[1].personas.len(), 2);
        assert_eq!(a, b);
        assert!(remove_personas(&ds, 1.5, 0).is_err());
    }

    #[test]
    fn normalization() {
        assert_eq!(normalize("  I like   Dogs!! "), "i like dogs");
        assert_eq!(persona_id("I like dogs."), persona_id("i like  dogs"));
        assert_ne!(persona_id("i like dogs"), persona_id("i like cats"));
    }
}
