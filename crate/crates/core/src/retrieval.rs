//! Persona knowledge base index, persona linking, response selection, lexical
//! and embedding baselines, and corpus augmentation with linked personas.

use rand::seq::index;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, HashMap, HashSet};
use std::io::{BufRead, BufReader, Write};
use std::path::Path;
use std::sync::Arc;

use crate::corpus::{ChatDataset, DialogueEpisode, PersonaSentence, Pkb, ProfileEntry, Provenance, Speaker, Split};
use crate::encoder::{split_tokens, tokenize, BiEncoderParams, Role, TowerKind};
use crate::error::{Error, Result};
use crate::linalg::{dot, norm, Matrix};
use crate::linkdata::ExpansionPolicy;
use crate::oracles::Expander;
use crate::training::serialize_context;
use crate::util;

/// `(id, score)` pairs sorted by descending score, ties by ascending id.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankedList {
    pub entries: Vec<(String, f64)>,
}

impl RankedList {
    pub fn from_scores(ids: impl IntoIterator<Item = String>, scores: impl IntoIterator<Item = f64>) -> Self {
        let mut entries: Vec<(String, f64)> = ids.into_iter().zip(scores).collect();
        entries.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        RankedList { entries }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// 1-based rank of `id`.
    pub fn rank_of(&self, id: &str) -> Option<usize> {
        self.entries.iter().position(|(x, _)| x == id).map(|i| i + 1)
    }

    pub fn ids(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|(id, _)| id.as_str())
    }

    pub fn truncated(mut self, k: usize, threshold: f64) -> Self {
        self.entries.retain(|(_, s)| *s >= threshold);
        self.entries.truncate(k);
        self
    }
}

fn is_term(tok: &str) -> bool {
    tok.chars().any(char::is_alphanumeric)
}

/// Lowercased word tokens with punctuation dropped.
pub fn terms(text: &str) -> Vec<String> {
    split_tokens(text).into_iter().filter(|t| is_term(t)).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Bm25Stats {
    pub df: BTreeMap<String, usize>,
    pub tf: Vec<BTreeMap<String, usize>>,
    pub doc_len: Vec<usize>,
    pub avgdl: f64,
}

impl Bm25Stats {
    pub fn build<'a>(docs: impl IntoIterator<Item = &'a str>) -> Self {
        let mut df: BTreeMap<String, usize> = BTreeMap::new();
        let mut tf = Vec::new();
        let mut doc_len = Vec::new();
        for d in docs {
            let toks = terms(d);
            let mut counts: BTreeMap<String, usize> = BTreeMap::new();
            for t in &toks {
                *counts.entry(t.clone()).or_default() += 1;
            }
            for t in counts.keys() {
                *df.entry(t.clone()).or_default() += 1;
            }
            doc_len.push(toks.len());
            tf.push(counts);
        }
        let avgdl = if doc_len.is_empty() { 0.0 } else { doc_len.iter().sum::<usize>() as f64 / doc_len.len() as f64 };
        Bm25Stats { df, tf, doc_len, avgdl }
    }

    pub fn idf(&self, term: &str) -> f64 {
        let n = self.tf.len() as f64;
        let df = *self.df.get(term).unwrap_or(&0) as f64;
        (1.0 + (n - df + 0.5) / (df + 0.5)).ln()
    }

    /// Okapi BM25 of every document against `query`; each distinct query
    /// term contributes once.
    pub fn scores(&self, query: &str, k1: f64, b: f64) -> Vec<f64> {
        let mut q = terms(query);
        q.sort();
        q.dedup();
        (0..self.tf.len())
            .map(|d| {
                let norm = k1 * (1.0 - b + b * self.doc_len[d] as f64 / self.avgdl.max(f64::MIN_POSITIVE));
                q.iter()
                    .filter_map(|t| self.tf[d].get(t).map(|&f| (t, f as f64)))
                    .map(|(t, f)| self.idf(t) * f * (k1 + 1.0) / (f + norm))
                    .sum()
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PkbIndex {
    pub ids: Vec<String>,
    pub texts: Vec<String>,
    /// Texts as fed to the candidate tower (expanded for the student).
    pub encoded_texts: Vec<String>,
    pub embeddings: Matrix,
    pub bm25: Bm25Stats,
    pub params_digest: String,
    pub max_tokens: usize,
}

impl PkbIndex {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn persona(&self, i: usize) -> PersonaSentence {
        PersonaSentence { id: self.ids[i].clone(), text: self.texts[i].clone() }
    }

    pub fn position(&self, id: &str) -> Option<usize> {
        self.ids.iter().position(|x| x == id)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        util::atomic_write(path, &serde_json::to_vec(self)?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Ok(serde_json::from_slice(&std::fs::read(path)?)?)
    }

    /// Every indexed id must belong to the training knowledge base.
    pub fn check_within(&self, pkb: &Pkb) -> Result<()> {
        let ids = pkb.ids();
        match self.ids.iter().find(|id| !ids.contains(id.as_str())) {
            Some(id) => Err(Error::data(format!("index persona `{id}` is not in the training knowledge base"))),
            None => Ok(()),
        }
    }
}

/// Candidate-tower embeddings of every persona plus BM25 statistics.
pub fn index_pkb(pkb: &Pkb, params: &BiEncoderParams, max_tokens: usize) -> Result<PkbIndex> {
    index_pkb_with(pkb, params, max_tokens, None)
}

pub fn index_pkb_with(
    pkb: &Pkb,
    params: &BiEncoderParams,
    max_tokens: usize,
    expansion: Option<(&dyn Expander, &ExpansionPolicy)>,
) -> Result<PkbIndex> {
    if pkb.is_empty() {
        return Err(Error::data("cannot index an empty knowledge base"));
    }
    if params.role != Role::Link {
        return Err(Error::invalid("persona index needs link-role parameters"));
    }
    let texts: Vec<String> = pkb.personas.iter().map(|p| p.text.clone()).collect();
    let encoded_texts: Vec<String> = match expansion {
        Some((ex, policy)) => texts.par_iter().map(|t| policy.apply(t, ex)).collect::<Result<_>>()?,
        None => texts.clone(),
    };
    let rows: Vec<Vec<f64>> = encoded_texts
        .par_iter()
        .map(|t| params.encode(TowerKind::Candidate, &tokenize(t, &params.vocab, max_tokens)))
        .collect::<Result<_>>()?;
    Ok(PkbIndex {
        ids: pkb.personas.iter().map(|p| p.id.clone()).collect(),
        bm25: Bm25Stats::build(texts.iter().map(String::as_str)),
        texts,
        encoded_texts,
        embeddings: Matrix::from_rows(&rows),
        params_digest: params.digest(),
        max_tokens,
    })
}

fn rank_by_vector(index: &PkbIndex, query: &[f64]) -> RankedList {
    let scores = (0..index.len()).map(|i| dot(query, index.embeddings.row(i)));
    RankedList::from_scores(index.ids.iter().cloned(), scores)
}

/// Top-`k` personas scoring at least `threshold` against the query under the
/// context tower.
pub fn link_personas(query: &str, index: &PkbIndex, params: &BiEncoderParams, k: usize, threshold: f64) -> Result<RankedList> {
    if k == 0 {
        return Err(Error::invalid("k must be at least 1"));
    }
    if params.digest() != index.params_digest {
        return Err(Error::data("index was built with different link parameters"));
    }
    let q = params.encode(TowerKind::Context, &tokenize(query, &params.vocab, index.max_tokens))?;
    Ok(rank_by_vector(index, &q).truncated(k, threshold))
}

pub fn bm25_rank(query: &str, index: &PkbIndex, k1: f64, b: f64) -> Result<RankedList> {
    if index.is_empty() {
        return Err(Error::data("empty index"));
    }
    if !(k1 > 0.0) || !(0.0..=1.0).contains(&b) {
        return Err(Error::invalid("BM25 needs k1 > 0 and b in [0, 1]"));
    }
    Ok(RankedList::from_scores(index.ids.iter().cloned(), index.bm25.scores(query, k1, b)))
}

/// Token → vector table for the cosine baseline.
pub type TokenVectors = HashMap<String, Vec<f64>>;

/// Embedding rows of one tower keyed by token.
pub fn token_vectors(params: &BiEncoderParams, kind: TowerKind) -> TokenVectors {
    let tower = params.tower(kind);
    let d = params.dim;
    params
        .vocab
        .tokens()
        .iter()
        .enumerate()
        .map(|(i, t)| (t.clone(), tower.embeddings[i * d..(i + 1) * d].to_vec()))
        .collect()
}

fn mean_vector(text: &str, table: &TokenVectors) -> Option<Vec<f64>> {
    let vecs: Vec<&Vec<f64>> = split_tokens(text).iter().filter_map(|t| table.get(t)).collect();
    let first = vecs.first()?;
    let mut out = vec![0.0; first.len()];
    for v in &vecs {
        out.iter_mut().zip(v.iter()).for_each(|(a, b)| *a += b);
    }
    out.iter_mut().for_each(|x| *x /= vecs.len() as f64);
    Some(out)
}

/// Cosine between mean token vectors; tokens missing from the table are
/// skipped and a zero vector scores 0.
pub fn cosine_similarity(a: &str, b: &str, table: &TokenVectors) -> f64 {
    match (mean_vector(a, table), mean_vector(b, table)) {
        (Some(x), Some(y)) => {
            let d = norm(&x) * norm(&y);
            if d == 0.0 {
                0.0
            } else {
                dot(&x, &y) / d
            }
        }
        _ => 0.0,
    }
}

pub fn cosine_rank(query: &str, index: &PkbIndex, table: &TokenVectors) -> RankedList {
    let scores: Vec<f64> = index.texts.iter().map(|t| cosine_similarity(query, t, table)).collect();
    RankedList::from_scores(index.ids.iter().cloned(), scores)
}

// ---------------------------------------------------------------------------
// Response selection
// ---------------------------------------------------------------------------

/// Gold reply plus distractors; the gold sits at `gold_index` among the
/// candidates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidatePool {
    pub gold: String,
    pub distractors: Vec<String>,
    pub gold_index: usize,
    pub episode: String,
    pub turn: usize,
    pub split: Split,
}

impl CandidatePool {
    pub fn len(&self) -> usize {
        self.distractors.len() + 1
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn candidates(&self) -> Vec<&str> {
        let mut out: Vec<&str> = self.distractors.iter().map(String::as_str).collect();
        out.insert(self.gold_index.min(out.len()), &self.gold);
        out
    }

    pub fn candidate_id(i: usize) -> String {
        format!("c{i:03}")
    }

    pub fn gold_id(&self) -> String {
        Self::candidate_id(self.gold_index)
    }
}

pub fn save_pools(pools: &[CandidatePool], path: &Path) -> Result<()> {
    let mut buf = Vec::new();
    for p in pools {
        serde_json::to_writer(&mut buf, p)?;
        buf.write_all(b"\n")?;
    }
    util::atomic_write(path, &buf)
}

pub fn load_pools(path: &Path) -> Result<Vec<CandidatePool>> {
    let file = std::fs::File::open(path)?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line?;
        if !line.trim().is_empty() {
            out.push(serde_json::from_str(&line).map_err(|e| Error::Parse { path: path.to_path_buf(), line: i + 1, msg: e.to_string() })?);
        }
    }
    Ok(out)
}

/// Places `gold` among `distractors` at a seeded position.
pub fn make_pool(gold: String, distractors: Vec<String>, episode: &str, turn: usize, split: Split, rng: &mut impl Rng) -> CandidatePool {
    let gold_index = rng.gen_range(0..=distractors.len());
    CandidatePool { gold, distractors, gold_index, episode: episode.to_string(), turn, split }
}

/// Scores every pool candidate against the serialized (personas, history)
/// context.
pub fn select_response(
    personas: &[&str],
    history: &[&str],
    pool: &CandidatePool,
    params: &BiEncoderParams,
    context_tokens: usize,
    max_tokens: usize,
) -> Result<RankedList> {
    if params.role != Role::Chat {
        return Err(Error::invalid("response selection needs chat-role parameters"));
    }
    let context = serialize_context(personas, history, context_tokens);
    let cands = pool.candidates();
    rank_candidates(&context, &cands, params, context_tokens, max_tokens)
}

pub fn rank_candidates(
    context: &str,
    candidates: &[&str],
    params: &BiEncoderParams,
    context_tokens: usize,
    max_tokens: usize,
) -> Result<RankedList> {
    let q = params.encode(TowerKind::Context, &tokenize(context, &params.vocab, context_tokens))?;
    let scores: Vec<f64> = candidates
        .iter()
        .map(|c| params.encode(TowerKind::Candidate, &tokenize(c, &params.vocab, max_tokens)).map(|r| dot(&q, &r)))
        .collect::<Result<_>>()?;
    Ok(RankedList::from_scores((0..candidates.len()).map(CandidatePool::candidate_id), scores))
}

// ---------------------------------------------------------------------------
// Linking policy and augmentation
// ---------------------------------------------------------------------------

fn d_k() -> usize {
    1
}
fn d_threshold() -> f64 {
    f64::NEG_INFINITY
}
fn d_window() -> usize {
    1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AugmentPolicy {
    #[serde(default = "d_k")]
    pub k_per_turn: usize,
    /// Minimum link score; `null` in JSON means no threshold.
    #[serde(default = "d_threshold", with = "threshold_serde")]
    pub threshold: f64,
    /// Number of turns, ending at the triggering agent turn, joined into the query.
    #[serde(default = "d_window")]
    pub history_window: usize,
}

impl Default for AugmentPolicy {
    fn default() -> Self {
        AugmentPolicy { k_per_turn: d_k(), threshold: d_threshold(), history_window: d_window() }
    }
}

mod threshold_serde {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        if v.is_finite() {
            s.serialize_f64(*v)
        } else if *v > 0.0 {
            s.serialize_str("inf")
        } else {
            s.serialize_none()
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum T {
            Num(f64),
            Str(String),
        }
        Ok(match Option::<T>::deserialize(d)? {
            None => f64::NEG_INFINITY,
            Some(T::Num(x)) => x,
            Some(T::Str(s)) if s == "inf" || s == "+inf" => f64::INFINITY,
            Some(T::Str(s)) if s == "-inf" => f64::NEG_INFINITY,
            Some(T::Str(s)) => return Err(serde::de::Error::custom(format!("bad threshold `{s}`"))),
        })
    }
}

/// A link model bound to its persona index, with optional query expansion
/// (needed when the model was trained on expanded text).
#[derive(Clone)]
pub struct Linker {
    pub params: Arc<BiEncoderParams>,
    pub index: Arc<PkbIndex>,
    pub policy: AugmentPolicy,
    pub expansion: Option<(Arc<dyn Expander>, ExpansionPolicy)>,
}

impl Linker {
    pub fn new(
        params: Arc<BiEncoderParams>,
        index: Arc<PkbIndex>,
        policy: AugmentPolicy,
        expansion: Option<(Arc<dyn Expander>, ExpansionPolicy)>,
    ) -> Result<Self> {
        if params.role != Role::Link {
            return Err(Error::invalid("linker needs link-role parameters"));
        }
        if params.digest() != index.params_digest {
            return Err(Error::data("index was built with different link parameters"));
        }
        if policy.k_per_turn == 0 || policy.history_window == 0 {
            return Err(Error::invalid("k_per_turn and history_window must be at least 1"));
        }
        Ok(Linker { params, index, policy, expansion })
    }

    /// Full ranking of the index for a raw query.
    pub fn rank(&self, query: &str) -> Result<RankedList> {
        let text = match &self.expansion {
            Some((ex, policy)) => policy.apply(query, ex.as_ref())?,
            None => query.to_string(),
        };
        let q = self.params.encode(TowerKind::Context, &tokenize(&text, &self.params.vocab, self.index.max_tokens))?;
        Ok(rank_by_vector(&self.index, &q))
    }

    /// Policy-filtered links for a query.
    pub fn link(&self, query: &str) -> Result<RankedList> {
        Ok(self.rank(query)?.truncated(self.policy.k_per_turn, self.policy.threshold))
    }

    /// Query for the agent turn at `turn`: the window of turns ending there.
    pub fn query_at(&self, utterances: &[&str], turn: usize) -> String {
        let lo = (turn + 1).saturating_sub(self.policy.history_window);
        utterances[lo..=turn].join(" ")
    }

    /// Links personas for the turn and appends the unseen ones to the
    /// episode profile. Returns the added entries.
    pub fn augment_turn(&self, ep: &mut DialogueEpisode, turn: usize) -> Result<Vec<ProfileEntry>> {
        let texts: Vec<&str> = ep.utterances.iter().map(|u| u.text.as_str()).collect();
        let query = self.query_at(&texts, turn);
        self.add_links(ep, &query)
    }

    pub fn add_links(&self, ep: &mut DialogueEpisode, query: &str) -> Result<Vec<ProfileEntry>> {
        let mut added = Vec::new();
        for (id, score) in self.link(query)?.entries {
            if ep.has_persona(&id) {
                continue;
            }
            let i = self.index.position(&id).expect("ranked ids come from the index");
            let entry = ProfileEntry { persona: self.index.persona(i), provenance: Provenance::Augmented, score };
            ep.augmented_personas.push(entry.clone());
            added.push(entry);
        }
        Ok(added)
    }
}

/// Adds linked personas for every agent turn, querying with the gold
/// utterances. Original personas are untouched; existing entries are never
/// duplicated, so a second pass is a no-op.
pub fn augment_dataset(dataset: &ChatDataset, linker: &Linker, train_pkb: &Pkb) -> Result<ChatDataset> {
    linker.index.check_within(train_pkb)?;
    let episodes = dataset
        .episodes
        .par_iter()
        .map(|ep| {
            let mut ep = ep.clone();
            for t in 0..ep.utterances.len() {
                if ep.utterances[t].speaker == Speaker::Agent {
                    linker.augment_turn(&mut ep, t)?;
                }
            }
            Ok(ep)
        })
        .collect::<Result<Vec<_>>>()?;
    let out = ChatDataset { split: dataset.split, episodes };
    out.validate()?;
    Ok(out)
}

/// Augmented persona ids that are not in the training knowledge base.
pub fn pkb_violations<'a>(episodes: impl IntoIterator<Item = &'a DialogueEpisode>, train_pkb: &Pkb) -> Vec<String> {
    let ids: HashSet<&str> = train_pkb.ids();
    episodes
        .into_iter()
        .flat_map(|ep| ep.augmented_personas.iter())
        .filter(|e| e.provenance == Provenance::Augmented && !ids.contains(e.persona.id.as_str()))
        .map(|e| e.persona.id.clone())
        .collect()
}

/// One pool per agent turn with a preceding turn: the gold reply and
/// `size - 1` distinct distractors drawn from the split's other agent replies.
pub fn build_candidate_pools(split: &ChatDataset, size: usize, seed: u64) -> Result<Vec<CandidatePool>> {
    if size < 2 {
        return Err(Error::invalid("pool size must be at least 2"));
    }
    let replies: Vec<&str> = split.agent_utterances().map(|(_, u)| u.text.as_str()).collect();
    let mut distinct: Vec<&str> = Vec::new();
    let mut seen = HashSet::new();
    for r in &replies {
        if seen.insert(*r) {
            distinct.push(r);
        }
    }
    if distinct.len() < size {
        return Err(Error::data(format!("need at least {size} distinct agent utterances, found {}", distinct.len())));
    }
    let mut rng = util::rng(seed, 0x90);
    let mut pools = Vec::new();
    for ep in &split.episodes {
        for (t, u) in ep.utterances.iter().enumerate() {
            if u.speaker != Speaker::Agent || t == 0 {
                continue;
            }
            let others: Vec<&str> = distinct.iter().copied().filter(|d| *d != u.text).collect();
            let picks = index::sample(&mut rng, others.len(), size - 1);
            let distractors = picks.into_iter().map(|i| others[i].to_string()).collect();
            pools.push(make_pool(u.text.clone(), distractors, &ep.id, t, split.split, &mut rng));
        }
    }
    Ok(pools)
}
