//! Interactive chat sessions: response retrieval from a response bank with
//! live persona linking after every agent reply.
//!
//! The engine is synchronous and holds no session table; state transitions
//! are plain functions of (session, user text) so a transcript replays to
//! the same state. The HTTP layer owns storage and locking.

use rand::seq::index;
use serde::{Deserialize, Serialize};
use std::collections::HashSet;
use std::path::Path;
use std::sync::Arc;

use crate::corpus::{PersonaSentence, Pkb, Speaker};
use crate::encoder::{tokenize, BiEncoderParams, Role, TowerKind};
use crate::error::{Error, Result};
use crate::linalg::dot;
use crate::retrieval::Linker;
use crate::training::serialize_context;
use crate::util;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EntryKind {
    Original,
    /// Dropped at creation; invisible to the agent, kept for display.
    Removed,
    Augmented,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionPersona {
    pub id: String,
    pub text: String,
    pub kind: EntryKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub score: Option<f64>,
    /// History index of the agent reply that triggered the link.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub turn: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Turn {
    pub speaker: Speaker,
    pub text: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelDigests {
    pub chat: String,
    pub link: String,
    pub index: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum PoolSource {
    /// Score the whole bank.
    Bank,
    /// A fresh seeded sample of `size` bank entries per turn.
    Sample { size: usize },
}

impl Default for PoolSource {
    fn default() -> Self {
        PoolSource::Bank
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatSession {
    pub id: String,
    pub profile: Vec<SessionPersona>,
    pub history: Vec<Turn>,
    pub models: ModelDigests,
    pub pool_source: PoolSource,
    pub augmentation: bool,
    pub seed: u64,
    pub created_at: chrono::DateTime<chrono::Utc>,
}

impl ChatSession {
    /// Personas the agent conditions on.
    pub fn active_personas(&self) -> impl Iterator<Item = &SessionPersona> {
        self.profile.iter().filter(|p| p.kind != EntryKind::Removed)
    }
}

fn d_keep() -> f64 {
    1.0
}
fn d_true() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CreateRequest {
    /// Ids looked up in the persona index.
    #[serde(default)]
    pub persona_ids: Vec<String>,
    #[serde(default)]
    pub persona_texts: Vec<String>,
    #[serde(default = "d_keep")]
    pub keep_fraction: f64,
    #[serde(default = "d_true")]
    pub augmentation: bool,
    #[serde(default)]
    pub pool_source: PoolSource,
    #[serde(default)]
    pub seed: u64,
}

impl Default for CreateRequest {
    fn default() -> Self {
        serde_json::from_str("{}").expect("all fields have defaults")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Candidate {
    pub text: String,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TurnResult {
    pub response: String,
    pub candidates: Vec<Candidate>,
    pub newly_augmented: Vec<SessionPersona>,
    pub profile: Vec<SessionPersona>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EngineSettings {
    pub context_tokens: usize,
    pub max_tokens: usize,
    /// Rows returned in `candidates`.
    pub shown_candidates: usize,
    /// Link with "user turn + reply" instead of the reply alone.
    pub query_includes_user: bool,
}

impl Default for EngineSettings {
    fn default() -> Self {
        EngineSettings { context_tokens: 256, max_tokens: 64, shown_candidates: 20, query_includes_user: false }
    }
}

pub struct Engine {
    chat: Arc<BiEncoderParams>,
    linker: Linker,
    bank: Vec<String>,
    bank_vectors: Vec<Vec<f64>>,
    settings: EngineSettings,
    digests: ModelDigests,
}

impl Engine {
    /// `pkb`, when given, must contain every indexed persona.
    pub fn new(chat: Arc<BiEncoderParams>, linker: Linker, bank: Vec<String>, pkb: Option<&Pkb>, settings: EngineSettings) -> Result<Self> {
        if chat.role != Role::Chat {
            return Err(Error::invalid("the chat checkpoint has the wrong role"));
        }
        if bank.is_empty() {
            return Err(Error::data("empty response bank"));
        }
        if settings.shown_candidates == 0 || settings.context_tokens == 0 || settings.max_tokens == 0 {
            return Err(Error::invalid("engine settings must be positive"));
        }
        if let Some(pkb) = pkb {
            linker.index.check_within(pkb)?;
        }
        let bank_vectors = bank
            .iter()
            .map(|t| chat.encode(TowerKind::Candidate, &tokenize(t, &chat.vocab, settings.max_tokens)))
            .collect::<Result<_>>()?;
        let index_digest = util::sha256_hex(&serde_json::to_vec(linker.index.as_ref())?);
        let digests = ModelDigests { chat: chat.digest(), link: linker.params.digest(), index: index_digest };
        Ok(Engine { chat, linker, bank, bank_vectors, settings, digests })
    }

    pub fn digests(&self) -> &ModelDigests {
        &self.digests
    }

    pub fn bank_len(&self) -> usize {
        self.bank.len()
    }

    pub fn create(&self, id: String, req: &CreateRequest, created_at: chrono::DateTime<chrono::Utc>) -> Result<ChatSession> {
        if !(0.0..=1.0).contains(&req.keep_fraction) {
            return Err(Error::invalid(format!("keep_fraction {} outside [0, 1]", req.keep_fraction)));
        }
        if let PoolSource::Sample { size } = req.pool_source {
            if size == 0 || size > self.bank.len() {
                return Err(Error::invalid(format!("sample size {size} not in 1..={}", self.bank.len())));
            }
        }
        let index = &self.linker.index;
        let mut personas: Vec<PersonaSentence> = Vec::new();
        for pid in &req.persona_ids {
            let i = index.position(pid).ok_or_else(|| Error::invalid(format!("unknown persona id `{pid}`")))?;
            personas.push(index.persona(i));
        }
        for t in &req.persona_texts {
            if t.trim().is_empty() {
                return Err(Error::invalid("empty persona text"));
            }
            personas.push(PersonaSentence::new(t.as_str()));
        }
        let mut seen = HashSet::new();
        personas.retain(|p| seen.insert(p.id.clone()));

        // same rule as corpus removal: keep round(f * m), chosen by the seed
        let m = personas.len();
        let k = ((req.keep_fraction * m as f64).round() as usize).min(m);
        let kept: HashSet<usize> = index::sample(&mut util::rng(req.seed, 0x52), m, k).into_iter().collect();
        let profile = personas
            .into_iter()
            .enumerate()
            .map(|(i, p)| SessionPersona {
                id: p.id,
                text: p.text,
                kind: if kept.contains(&i) { EntryKind::Original } else { EntryKind::Removed },
                score: None,
                turn: None,
            })
            .collect();
        Ok(ChatSession {
            id,
            profile,
            history: Vec::new(),
            models: self.digests.clone(),
            pool_source: req.pool_source,
            augmentation: req.augmentation,
            seed: req.seed,
            created_at,
        })
    }

    fn pool(&self, session: &ChatSession) -> Vec<usize> {
        match session.pool_source {
            PoolSource::Bank => (0..self.bank.len()).collect(),
            PoolSource::Sample { size } => {
                let mut rng = util::rng(session.seed, 0x700 + session.history.len() as u64);
                let mut ix = index::sample(&mut rng, self.bank.len(), size.min(self.bank.len())).into_vec();
                ix.sort_unstable();
                ix
            }
        }
    }

    /// Ranks the pool for the current state without mutating it.
    pub fn rank(&self, session: &ChatSession, history: &[&str]) -> Result<Vec<Candidate>> {
        let personas: Vec<&str> = session.active_personas().map(|p| p.text.as_str()).collect();
        let context = serialize_context(&personas, history, self.settings.context_tokens);
        let q = self.chat.encode(TowerKind::Context, &tokenize(&context, &self.chat.vocab, self.settings.context_tokens))?;
        let mut scored: Vec<(usize, f64)> = self.pool(session).into_iter().map(|i| (i, dot(&q, &self.bank_vectors[i]))).collect();
        // descending score, ties by bank position
        scored.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
        Ok(scored.into_iter().map(|(i, score)| Candidate { text: self.bank[i].clone(), score }).collect())
    }

    /// One exchange: pick a reply, append both turns, then link personas
    /// from the reply when augmentation is on.
    pub fn post_user_turn(&self, session: &mut ChatSession, text: &str) -> Result<TurnResult> {
        let text = text.trim();
        if text.is_empty() {
            return Err(Error::invalid("empty user turn"));
        }
        let mut history: Vec<&str> = session.history.iter().map(|t| t.text.as_str()).collect();
        history.push(text);
        let mut ranked = self.rank(session, &history)?;
        let response = ranked[0].text.clone();

        session.history.push(Turn { speaker: Speaker::User, text: text.to_string() });
        session.history.push(Turn { speaker: Speaker::Agent, text: response.clone() });
        let reply_turn = session.history.len() - 1;

        let mut newly = Vec::new();
        if session.augmentation {
            let query = if self.settings.query_includes_user { format!("{text} {response}") } else { response.clone() };
            let present: HashSet<String> = session.active_personas().map(|p| p.id.clone()).collect();
            for (id, score) in self.linker.link(&query)?.entries {
                if present.contains(&id) {
                    continue;
                }
                let p = self.linker.index.persona(self.linker.index.position(&id).expect("ranked ids come from the index"));
                newly.push(SessionPersona { id: p.id, text: p.text, kind: EntryKind::Augmented, score: Some(score), turn: Some(reply_turn) });
            }
            session.profile.extend(newly.iter().cloned());
        }
        ranked.truncate(self.settings.shown_candidates);
        Ok(TurnResult { response, candidates: ranked, newly_augmented: newly, profile: session.profile.clone() })
    }

    /// Augmented ids not in `pkb`.
    pub fn violations(session: &ChatSession, pkb: &Pkb) -> Vec<String> {
        session.profile.iter().filter(|p| p.kind == EntryKind::Augmented && !pkb.contains(&p.id)).map(|p| p.id.clone()).collect()
    }
}

/// One reply per line, or a chat JSONL split whose agent turns are taken.
/// Blank lines and duplicates are dropped; `cap` keeps the first entries.
pub fn load_response_bank(path: &Path, cap: Option<usize>) -> Result<Vec<String>> {
    let raw = std::fs::read_to_string(path)?;
    let first = raw.lines().find(|l| !l.trim().is_empty()).unwrap_or("");
    let texts: Vec<String> = if first.trim_start().starts_with('{') {
        let ds = crate::corpus::load_chat_dataset(path, crate::corpus::Split::Train)?;
        ds.agent_utterances().map(|(_, u)| u.text.clone()).collect()
    } else {
        raw.lines().map(|l| l.trim().to_string()).filter(|l| !l.is_empty()).collect()
    };
    let mut seen = HashSet::new();
    let mut bank: Vec<String> = texts.into_iter().filter(|t| seen.insert(t.clone())).collect();
    if let Some(c) = cap {
        bank.truncate(c);
    }
    if bank.is_empty() {
        return Err(Error::data(format!("no responses in `{}`", path.display())));
    }
    Ok(bank)
}
