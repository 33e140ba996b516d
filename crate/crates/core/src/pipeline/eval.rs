//! Evaluation harnesses: response selection with optional persona removal and
//! test-time linking, persona linking against a gold file, and the lexical
//! bias of link positives.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use std::collections::{BTreeMap, HashMap};

use crate::corpus::{remove_personas, ChatDataset, MatchMode, Pkb, Side, Speaker};
use crate::error::{Error, Result};
use crate::linkdata::{build_seed_linkset, GoldLink, LinkDataset};
use crate::metrics::{bucketed_recall, contradict_at_1, mean_jaccard, Buckets, EvalReport};
use crate::oracles::NliBackend;
use crate::retrieval::{bm25_rank, cosine_rank, select_response, CandidatePool, Linker, PkbIndex, RankedList, TokenVectors};
use crate::encoder::BiEncoderParams;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatEvalOptions {
    pub keep_fraction: f64,
    pub removal_seed: u64,
    pub context_tokens: usize,
    pub max_tokens: usize,
}

impl Default for ChatEvalOptions {
    fn default() -> Self {
        ChatEvalOptions { keep_fraction: 1.0, removal_seed: 0, context_tokens: 256, max_tokens: 64 }
    }
}

/// Report plus the episodes as the model saw them at the end of each
/// dialogue (after removal and any test-time links).
#[derive(Debug, Clone)]
pub struct ChatEval {
    pub report: EvalReport,
    pub observed: ChatDataset,
}

/// Response selection over `pools`. Personas are removed first; with a
/// linker, each agent turn's gold text is linked after that turn is scored,
/// so later turns see the added personas. Contradictions are checked
/// against the episode's original profile.
pub fn eval_chat(
    params: &BiEncoderParams,
    dataset: &ChatDataset,
    pools: &[CandidatePool],
    linker: Option<&Linker>,
    options: &ChatEvalOptions,
    nli: Option<&dyn NliBackend>,
) -> Result<ChatEval> {
    if pools.is_empty() {
        return Err(Error::data("no candidate pools"));
    }
    let reduced = remove_personas(dataset, options.keep_fraction, options.removal_seed)?;
    let position: HashMap<&str, usize> = reduced.episodes.iter().enumerate().map(|(i, e)| (e.id.as_str(), i)).collect();
    let mut by_turn: HashMap<(usize, usize), usize> = HashMap::new();
    for (k, pool) in pools.iter().enumerate() {
        let misaligned = || Error::data(format!("pool {k} (episode `{}`, turn {}) is misaligned with the dataset", pool.episode, pool.turn));
        let &e = position.get(pool.episode.as_str()).ok_or_else(misaligned)?;
        let u = reduced.episodes[e].utterances.get(pool.turn).ok_or_else(misaligned)?;
        if u.speaker != Speaker::Agent || u.text != pool.gold || pool.turn == 0 {
            return Err(misaligned());
        }
        by_turn.insert((e, pool.turn), k);
    }

    let results: Vec<(crate::corpus::DialogueEpisode, Vec<(usize, usize, String)>)> = reduced
        .episodes
        .par_iter()
        .enumerate()
        .map(|(e, ep)| {
            let mut ep = ep.clone();
            let mut out = Vec::new();
            for t in 0..ep.utterances.len() {
                if ep.utterances[t].speaker != Speaker::Agent {
                    continue;
                }
                if let Some(&k) = by_turn.get(&(e, t)) {
                    let profile: Vec<&str> = ep.full_profile().iter().map(|p| p.text.as_str()).collect();
                    let history: Vec<&str> = ep.utterances[..t].iter().map(|u| u.text.as_str()).collect();
                    let ranked = select_response(&profile, &history, &pools[k], params, options.context_tokens, options.max_tokens)?;
                    let rank = ranked.rank_of(&pools[k].gold_id()).expect("gold is in its pool");
                    let top: usize = ranked.entries[0].0[1..].parse().expect("candidate ids are c###");
                    out.push((k, rank, pools[k].candidates()[top].to_string()));
                }
                if let Some(l) = linker {
                    l.augment_turn(&mut ep, t)?;
                }
            }
            Ok((ep, out))
        })
        .collect::<Result<_>>()?;

    let mut ranks = vec![0usize; pools.len()];
    let mut top1: Vec<(String, Vec<String>)> = vec![(String::new(), Vec::new()); pools.len()];
    let mut episodes = Vec::with_capacity(results.len());
    for (e, (ep, out)) in results.into_iter().enumerate() {
        let original: Vec<String> = dataset.episodes[e].personas.iter().map(|p| p.text.clone()).collect();
        for (k, rank, text) in out {
            ranks[k] = rank;
            top1[k] = (text, original.clone());
        }
        episodes.push(ep);
    }
    let config = json!({
        "task": "chat",
        "keep_fraction": options.keep_fraction,
        "removal_seed": options.removal_seed,
        "linking": linker.is_some(),
        "pool_size": pools[0].len(),
    });
    let mut report = EvalReport::from_ranks(&ranks, options.removal_seed, config)?;
    if let Some(nli) = nli {
        report.contradict_at_1 = Some(contradict_at_1(&top1, nli)?);
    }
    Ok(ChatEval { report, observed: ChatDataset { split: dataset.split, episodes } })
}

/// Anything that ranks the persona index for a query.
pub enum LinkRanker<'a> {
    BiEncoder(&'a Linker),
    Bm25 { index: &'a PkbIndex, k1: f64, b: f64 },
    Cosine { index: &'a PkbIndex, table: &'a TokenVectors },
}

impl LinkRanker<'_> {
    pub fn index(&self) -> &PkbIndex {
        match self {
            LinkRanker::BiEncoder(l) => &l.index,
            LinkRanker::Bm25 { index, .. } | LinkRanker::Cosine { index, .. } => index,
        }
    }

    pub fn rank(&self, query: &str) -> Result<RankedList> {
        match self {
            LinkRanker::BiEncoder(l) => l.rank(query),
            LinkRanker::Bm25 { index, k1, b } => bm25_rank(query, index, *k1, *b),
            LinkRanker::Cosine { index, table } => Ok(cosine_rank(query, index, table)),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            LinkRanker::BiEncoder(_) => "bi-encoder",
            LinkRanker::Bm25 { .. } => "bm25",
            LinkRanker::Cosine { .. } => "cosine",
        }
    }
}

/// Positive-pair count per persona id in a link set.
pub fn persona_train_counts(linkset: &LinkDataset) -> HashMap<String, usize> {
    let mut counts = HashMap::new();
    for e in linkset.positives() {
        *counts.entry(e.persona_id.clone()).or_insert(0) += 1;
    }
    counts
}

/// Recall@{1,5,10} and MRR over a gold file. An utterance with several gold
/// personas counts at its best-ranked one and is bucketed by the most
/// frequently trained of them.
pub fn eval_link(
    ranker: &LinkRanker,
    gold: &[GoldLink],
    counts: Option<(&HashMap<String, usize>, &Buckets)>,
    bucket_k: usize,
    seed: u64,
) -> Result<EvalReport> {
    if gold.is_empty() {
        return Err(Error::data("empty gold file"));
    }
    let index = ranker.index();
    for g in gold {
        if g.gold_p_ids.is_empty() {
            return Err(Error::data(format!("gold entry `{}` has no persona ids", g.u)));
        }
        if let Some(id) = g.gold_p_ids.iter().find(|id| index.position(id).is_none()) {
            return Err(Error::data(format!("unknown gold id `{id}`")));
        }
    }
    let rows: Vec<(usize, String)> = gold
        .par_iter()
        .map(|g| {
            let ranked = ranker.rank(&g.u)?;
            let rank = g.gold_p_ids.iter().filter_map(|id| ranked.rank_of(id)).min().expect("gold ids are indexed");
            let key = match counts {
                Some((c, _)) => g.gold_p_ids.iter().max_by_key(|id| (c.get(*id).copied().unwrap_or(0), std::cmp::Reverse(*id))).unwrap().clone(),
                None => g.gold_p_ids[0].clone(),
            };
            Ok((rank, key))
        })
        .collect::<Result<_>>()?;
    let ranks: Vec<usize> = rows.iter().map(|r| r.0).collect();
    let config = json!({"task": "link", "ranker": ranker.name(), "index_size": index.len(), "bucket_k": bucket_k});
    let mut report = EvalReport::from_ranks(&ranks, seed, config)?;
    if let Some((c, buckets)) = counts {
        let inst: Vec<(String, usize)> = rows.into_iter().map(|(r, k)| (k, r)).collect();
        report.set_buckets(bucketed_recall(&inst, c, bucket_k, buckets)?);
    }
    Ok(report)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BiasSide {
    pub positives: usize,
    pub mean_jaccard: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BiasReport {
    pub in_dialogue: BiasSide,
    pub out_dialogue: BiasSide,
}

impl BiasReport {
    pub fn to_value(&self) -> Value {
        serde_json::to_value(self).expect("bias report serializes")
    }
}

fn positives_jaccard(ls: &LinkDataset) -> Result<BiasSide> {
    let pairs: Vec<(&str, &str)> = ls.positives().map(|e| (e.utterance.as_str(), e.persona.as_str())).collect();
    Ok(BiasSide { positives: pairs.len(), mean_jaccard: mean_jaccard(&pairs)? })
}

/// Mean token Jaccard of NLI-positive pairs under both matching modes.
pub fn analyze_bias(dataset: &ChatDataset, pkb: &Pkb, nli: &dyn NliBackend, side: Side) -> Result<BiasReport> {
    let inn = build_seed_linkset(dataset, pkb, nli, MatchMode::InDialogue, side, 1.0, 0)?;
    let out = build_seed_linkset(dataset, pkb, nli, MatchMode::OutDialogue, side, 1.0, 0)?;
    Ok(BiasReport { in_dialogue: positives_jaccard(&inn)?, out_dialogue: positives_jaccard(&out)? })
}

/// Reports keyed by name, in a stable order.
pub type ReportSet = BTreeMap<String, EvalReport>;
