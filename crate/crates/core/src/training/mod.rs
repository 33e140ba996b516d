//! Training loops for the link teacher, the distilled link student and the
//! response-selection model. All three share one in-batch trainer.

mod loss;
mod optim;

pub use loss::{distill_loss, inbatch_ce_loss, inbatch_ce_loss_with_extra};
pub use optim::{clip_global_norm, AdamW};

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use std::path::Path;
use std::sync::Arc;
use std::time::Instant;

use crate::corpus::{ChatDataset, Speaker};
use crate::encoder::vocab::{HISTORY_TAG, PERSONA_TAG};
use crate::encoder::{score_matrix, grad_score, split_tokens, tokenize, BiEncoderParams, Role, Vocab};
use crate::error::{Error, Result};
use crate::linkdata::LinkDataset;
use crate::util;

fn d_lr() -> f64 {
    5e-5
}
fn d_batch() -> usize {
    100
}
fn d_max_tokens() -> usize {
    64
}
fn d_epochs() -> usize {
    10
}
fn d_wd() -> f64 {
    0.01
}
fn d_eps() -> f64 {
    1e-8
}
fn d_clip() -> f64 {
    1.0
}
fn d_one() -> f64 {
    1.0
}
fn d_dim() -> usize {
    64
}
fn d_context_tokens() -> usize {
    256
}
fn d_true() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    #[serde(default = "d_lr")]
    pub learning_rate: f64,
    #[serde(default = "d_batch")]
    pub batch_size: usize,
    /// Per-side token cap for link encoders and for chat candidates.
    #[serde(default = "d_max_tokens")]
    pub max_tokens: usize,
    #[serde(default = "d_epochs")]
    pub epochs: usize,
    #[serde(default = "d_wd")]
    pub weight_decay: f64,
    #[serde(default = "d_eps")]
    pub adam_epsilon: f64,
    #[serde(default = "d_clip")]
    pub grad_clip: f64,
    #[serde(default = "d_one")]
    pub lambda: f64,
    #[serde(default = "d_one")]
    pub temperature: f64,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "d_dim")]
    pub dim: usize,
    /// Token cap for serialized chat contexts.
    #[serde(default = "d_context_tokens")]
    pub context_tokens: usize,
    #[serde(default = "d_true")]
    pub init_from_teacher: bool,
    /// Append explicit negatives to each batch's candidate side.
    #[serde(default = "d_true")]
    pub use_negatives: bool,
    /// Record a parameter digest after every optimizer step.
    #[serde(default)]
    pub trace_steps: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        serde_json::from_str("{}").expect("all fields have defaults")
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::invalid(format!("train config: {m}")));
        if !(self.learning_rate >= 0.0) || !self.learning_rate.is_finite() {
            return bad("learning_rate must be non-negative");
        }
        if self.batch_size == 0 || self.max_tokens == 0 || self.context_tokens == 0 {
            return bad("batch_size, max_tokens and context_tokens must be positive");
        }
        if !(self.weight_decay >= 0.0) || !(self.adam_epsilon > 0.0) || !(self.grad_clip > 0.0) {
            return bad("weight_decay must be non-negative, adam_epsilon and grad_clip positive");
        }
        if !(self.lambda >= 0.0) || !self.lambda.is_finite() {
            return bad("lambda must be non-negative");
        }
        if !(self.temperature > 0.0) {
            return bad("temperature must be positive");
        }
        if self.dim < 2 {
            return bad("dim must be at least 2");
        }
        Ok(())
    }

    /// Reads a JSON object or `key = value` lines (`#` starts a comment).
    pub fn parse(text: &str) -> Result<Self> {
        let value = if text.trim_start().starts_with('{') {
            serde_json::from_str(text)?
        } else {
            let mut map = Map::new();
            for (i, line) in text.lines().enumerate() {
                let line = line.split('#').next().unwrap_or("").trim();
                if line.is_empty() {
                    continue;
                }
                let (k, v) = line
                    .split_once('=')
                    .ok_or_else(|| Error::Parse { path: "<config>".into(), line: i + 1, msg: "expected key = value".into() })?;
                let v = v.trim();
                let parsed = serde_json::from_str::<Value>(v).unwrap_or_else(|_| Value::String(v.to_string()));
                map.insert(k.trim().to_string(), parsed);
            }
            Value::Object(map)
        };
        let config: TrainConfig = serde_json::from_value(value)?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub ce: f64,
    pub distill: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dev_metric: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub role: Role,
    pub examples: usize,
    pub steps: u64,
    pub epochs: Vec<EpochStats>,
    pub wall_time_secs: f64,
    pub final_digest: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub best_epoch: Option<usize>,
    pub config: TrainConfig,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub step_digests: Vec<String>,
}

impl TrainReport {
    pub fn save(&self, path: &Path) -> Result<()> {
        util::atomic_write(path, &serde_json::to_vec_pretty(self)?)
    }

    /// Digest of the report with the wall-clock field zeroed.
    pub fn stable_digest(&self) -> String {
        let mut r = self.clone();
        r.wall_time_secs = 0.0;
        util::sha256_hex(&serde_json::to_vec(&r).expect("report serializes"))
    }
}

/// Tokenized training material: gold (context, candidate) pairs plus extra
/// candidates that only ever appear as negatives.
#[derive(Debug, Clone, Default)]
pub struct TrainData {
    pub pairs: Vec<(Vec<u32>, Vec<u32>)>,
    pub negatives: Vec<Vec<u32>>,
}

/// Seeded batch plan for one epoch: a shuffled partition of the anchors into
/// chunks of `batch_size`, each paired with an even share of the shuffled
/// negatives.
pub fn plan_batches(n: usize, n_neg: usize, batch_size: usize, seed: u64, epoch: usize) -> Vec<(Vec<usize>, Vec<usize>)> {
    let bs = batch_size.max(1);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut util::rng(seed, 0x1000 + epoch as u64));
    let mut neg: Vec<usize> = (0..n_neg).collect();
    neg.shuffle(&mut util::rng(seed, 0x2000 + epoch as u64));
    let nb = n.div_ceil(bs);
    let per = if nb == 0 { 0 } else { n_neg.div_ceil(nb) };
    order
        .chunks(bs)
        .enumerate()
        .map(|(b, chunk)| {
            let lo = (b * per).min(n_neg);
            let hi = ((b + 1) * per).min(n_neg);
            (chunk.to_vec(), neg[lo..hi].to_vec())
        })
        .collect()
}

/// Per-epoch dev score used to keep the best checkpoint (higher is better).
pub type Monitor<'a> = &'a mut dyn FnMut(&BiEncoderParams) -> Result<f64>;

/// In-batch trainer shared by every model. With a teacher and `lambda > 0`
/// the loss gains `lambda · KL(teacher ‖ student)` over the same batch.
pub fn fit(
    init: BiEncoderParams,
    data: &TrainData,
    teacher: Option<&BiEncoderParams>,
    config: &TrainConfig,
    mut monitor: Option<Monitor>,
) -> Result<(BiEncoderParams, TrainReport)> {
    config.validate()?;
    if data.pairs.is_empty() {
        return Err(Error::data("no training pairs"));
    }
    if let Some(t) = teacher {
        if t.vocab.digest() != init.vocab.digest() {
            return Err(Error::data("student and teacher vocabularies differ"));
        }
        if t.dim != init.dim {
            return Err(Error::Shape(format!("teacher dim {} vs student dim {}", t.dim, init.dim)));
        }
    }
    let started = Instant::now();
    let mut params = init;
    let mut opt = AdamW::new(&params, config.learning_rate, config.adam_epsilon, config.weight_decay);
    let negatives: &[Vec<u32>] = if config.use_negatives { &data.negatives } else { &[] };
    let mut epochs = Vec::with_capacity(config.epochs);
    let mut step_digests = Vec::new();
    let mut best: Option<(f64, usize, BiEncoderParams)> = None;

    for epoch in 0..config.epochs {
        let (mut ce_sum, mut kl_sum, mut n_steps) = (0.0, 0.0, 0usize);
        for (batch, neg) in plan_batches(data.pairs.len(), negatives.len(), config.batch_size, config.seed, epoch) {
            let ctx: Vec<Vec<u32>> = batch.iter().map(|&i| data.pairs[i].0.clone()).collect();
            let mut cand: Vec<Vec<u32>> = batch.iter().map(|&i| data.pairs[i].1.clone()).collect();
            cand.extend(neg.iter().map(|&k| negatives[k].clone()));

            let s = score_matrix(&params, &ctx, &cand)?;
            let (ce, mut upstream) = inbatch_ce_loss_with_extra(&s)?;
            let mut kl = 0.0;
            if let Some(t) = teacher {
                let st = score_matrix(t, &ctx, &cand)?;
                let (value, g) = distill_loss(&s, &st, config.temperature)?;
                kl = value;
                if config.lambda != 0.0 {
                    for (u, gk) in upstream.data.iter_mut().zip(&g.data) {
                        *u += config.lambda * gk;
                    }
                }
            }
            let mut grads = grad_score(&params, &ctx, &cand, &upstream)?;
            clip_global_norm(&mut grads, config.grad_clip);
            opt.update(&mut params, &grads);
            if !ce.is_finite() || !kl.is_finite() {
                return Err(Error::data(format!("non-finite loss at epoch {epoch}")));
            }
            ce_sum += ce;
            kl_sum += kl;
            n_steps += 1;
            if config.trace_steps {
                step_digests.push(params.digest());
            }
        }
        let dev_metric = match monitor.as_mut() {
            Some(m) => Some(m(&params)?),
            None => None,
        };
        if let Some(score) = dev_metric {
            if best.as_ref().is_none_or(|(b, _, _)| score > *b) {
                best = Some((score, epoch, params.clone()));
            }
        }
        let n = n_steps.max(1) as f64;
        epochs.push(EpochStats { epoch, ce: ce_sum / n, distill: kl_sum / n, dev_metric });
    }
    if !params.is_finite() {
        return Err(Error::data("training produced non-finite parameters"));
    }
    let best_epoch = best.as_ref().map(|b| b.1);
    if let Some((_, _, p)) = best {
        params = p;
    }
    let report = TrainReport {
        role: params.role,
        examples: data.pairs.len(),
        steps: opt.steps(),
        epochs,
        wall_time_secs: started.elapsed().as_secs_f64(),
        final_digest: params.digest(),
        best_epoch,
        config: config.clone(),
        step_digests,
    };
    Ok((params, report))
}

/// Tokenized positives and explicit negative candidates of a link set.
pub fn link_train_data(linkset: &LinkDataset, vocab: &Vocab, max_tokens: usize) -> TrainData {
    let mut data = TrainData::default();
    for e in &linkset.examples {
        let cand = tokenize(e.candidate_text(), vocab, max_tokens);
        if e.label == 1 {
            data.pairs.push((tokenize(e.context_text(), vocab, max_tokens), cand));
        } else {
            data.negatives.push(cand);
        }
    }
    data
}

/// Cross-entropy training of a link model from fresh parameters.
pub fn train_link_teacher(
    linkset: &LinkDataset,
    vocab: Arc<Vocab>,
    config: &TrainConfig,
    monitor: Option<Monitor>,
) -> Result<(BiEncoderParams, TrainReport)> {
    vocab.check_reserved()?;
    let init = BiEncoderParams::init(Role::Link, vocab, config.dim, config.seed)?;
    train_link_teacher_from(init, linkset, config, monitor)
}

/// Cross-entropy training of a link model from given parameters.
pub fn train_link_teacher_from(
    init: BiEncoderParams,
    linkset: &LinkDataset,
    config: &TrainConfig,
    monitor: Option<Monitor>,
) -> Result<(BiEncoderParams, TrainReport)> {
    if init.role != Role::Link {
        return Err(Error::invalid("link training needs link-role parameters"));
    }
    let data = link_train_data(linkset, &init.vocab, config.max_tokens);
    if data.pairs.is_empty() {
        return Err(Error::data("link set has no positive examples"));
    }
    fit(init, &data, None, config, monitor)
}

/// Distilled student: warm-started from the teacher unless the config says
/// otherwise, trained on the expanded link set with the frozen teacher.
pub fn train_link_student(
    expanded: &LinkDataset,
    teacher: &BiEncoderParams,
    config: &TrainConfig,
    monitor: Option<Monitor>,
) -> Result<(BiEncoderParams, TrainReport)> {
    let init = if config.init_from_teacher {
        teacher.clone()
    } else {
        BiEncoderParams::init(Role::Link, teacher.vocab.clone(), teacher.dim, config.seed)?
    };
    train_link_student_from(init, expanded, teacher, config, monitor)
}

pub fn train_link_student_from(
    init: BiEncoderParams,
    expanded: &LinkDataset,
    teacher: &BiEncoderParams,
    config: &TrainConfig,
    monitor: Option<Monitor>,
) -> Result<(BiEncoderParams, TrainReport)> {
    if init.role != Role::Link || teacher.role != Role::Link {
        return Err(Error::invalid("student training needs link-role parameters"));
    }
    if init.vocab.digest() != teacher.vocab.digest() {
        return Err(Error::data("student vocabulary digest differs from the teacher's"));
    }
    let data = link_train_data(expanded, &init.vocab, config.max_tokens);
    if data.pairs.is_empty() {
        return Err(Error::data("expanded link set has no positive examples"));
    }
    fit(init, &data, Some(teacher), config, monitor)
}

/// `[P] p1 [P] p2 [H] h1 [H] h2`, fitted to `budget` tokens. Personas come
/// first and are dropped from the end when they alone overflow; history then
/// keeps its most recent turns.
pub fn serialize_context(personas: &[&str], history: &[&str], budget: usize) -> String {
    let mut used = 0;
    let mut parts: Vec<String> = Vec::new();
    for p in personas {
        let seg = format!("{PERSONA_TAG} {p}");
        let n = split_tokens(&seg).len();
        if used + n > budget {
            break;
        }
        used += n;
        parts.push(seg);
    }
    let mut hist: Vec<String> = Vec::new();
    for h in history.iter().rev() {
        let seg = format!("{HISTORY_TAG} {h}");
        let n = split_tokens(&seg).len();
        if used + n > budget {
            break;
        }
        used += n;
        hist.push(seg);
    }
    hist.reverse();
    parts.extend(hist);
    parts.join(" ")
}

/// One (context, gold reply) text pair per agent turn that has at least one
/// preceding turn. The profile is originals followed by augmentations.
pub fn chat_instances(dataset: &ChatDataset, context_tokens: usize) -> Vec<(String, String)> {
    let mut out = Vec::new();
    for ep in &dataset.episodes {
        let profile: Vec<&str> = ep.full_profile().iter().map(|p| p.text.as_str()).collect();
        for (t, u) in ep.utterances.iter().enumerate() {
            if u.speaker != Speaker::Agent || t == 0 {
                continue;
            }
            let history: Vec<&str> = ep.utterances[..t].iter().map(|x| x.text.as_str()).collect();
            out.push((serialize_context(&profile, &history, context_tokens), u.text.clone()));
        }
    }
    out
}

pub fn chat_train_data(dataset: &ChatDataset, vocab: &Vocab, config: &TrainConfig) -> TrainData {
    let pairs = chat_instances(dataset, config.context_tokens)
        .into_iter()
        .map(|(c, r)| (tokenize(&c, vocab, config.context_tokens), tokenize(&r, vocab, config.max_tokens)))
        .collect();
    TrainData { pairs, negatives: Vec::new() }
}

/// Response-selection model trained with in-batch negatives.
pub fn train_chat(
    dataset: &ChatDataset,
    vocab: Arc<Vocab>,
    config: &TrainConfig,
    monitor: Option<Monitor>,
) -> Result<(BiEncoderParams, TrainReport)> {
    let data = chat_train_data(dataset, &vocab, config);
    if data.pairs.is_empty() {
        return Err(Error::data("no agent turn with a preceding turn to train on"));
    }
    let init = BiEncoderParams::init(Role::Chat, vocab, config.dim, config.seed)?;
    fit(init, &data, None, config, monitor)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{DialogueEpisode, PersonaSentence, ProfileEntry, Provenance, Split};
    use crate::encoder::build_vocab;
    use crate::linkdata::{LinkConfig, LinkExample};
    use crate::corpus::{MatchMode, Side};

    fn toy_linkset(pairs: &[(&str, &str)]) -> LinkDataset {
        LinkDataset {
            examples: pairs
                .iter()
                .map(|(u, p)| LinkExample {
                    utterance: u.to_string(),
                    persona: p.to_string(),
                    persona_id: crate::corpus::persona_id(p),
                    label: 1,
                    origin: MatchMode::OutDialogue,
                    utterance_expanded: None,
                    persona_expanded: None,
                    soft_label: None,
                })
                .collect(),
            config: LinkConfig { mode: MatchMode::OutDialogue, side: Side::AgentOnly, neg_ratio: 1.0, seed: 0, relations: None, budget: None },
        }
    }

    fn small_config() -> TrainConfig {
        TrainConfig { learning_rate: 0.05, batch_size: 4, epochs: 2, dim: 8, seed: 7, ..TrainConfig::default() }
    }

    #[test]
    fn defaults() {
        let c = TrainConfig::default();
        assert_eq!((c.learning_rate, c.batch_size, c.max_tokens, c.epochs), (5e-5, 100, 64, 10));
        assert_eq!((c.weight_decay, c.adam_epsilon, c.grad_clip, c.lambda, c.temperature), (0.01, 1e-8, 1.0, 1.0, 1.0));
        assert_eq!(c.context_tokens, 256);
    }

    #[test]
    fn parse_both_formats() {
        let kv = TrainConfig::parse("learning_rate = 0.01\n# note\nbatch_size=8\nlambda = 0\n").unwrap();
        let js = TrainConfig::parse(r#"{"learning_rate": 0.01, "batch_size": 8, "lambda": 0}"#).unwrap();
        assert_eq!(kv, js);
        assert_eq!(kv.lambda, 0.0);
        assert!(TrainConfig::parse("lambda = -1").is_err());
        assert!(TrainConfig::parse("nonsense").is_err());
    }

    #[test]
    fn batch_plan_partitions() {
        let plan = plan_batches(10, 7, 4, 3, 0);
        assert_eq!(plan.len(), 3);
        let mut all: Vec<usize> = plan.iter().flat_map(|b| b.0.clone()).collect();
        all.sort_unstable();
        assert_eq!(all, (0..10).collect::<Vec<_>>());
        let mut negs: Vec<usize> = plan.iter().flat_map(|b| b.1.clone()).collect();
        negs.sort_unstable();
        assert_eq!(negs, (0..7).collect::<Vec<_>>());
        assert_eq!(plan, plan_batches(10, 7, 4, 3, 0));
        assert_ne!(plan, plan_batches(10, 7, 4, 3, 1));
    }

    #[test]
    fn teacher_is_deterministic_and_learns() {
        let ls = toy_linkset(&[("i like dogs", "dogs are great"), ("i fly planes", "i am a pilot"), ("cats purr", "i own a cat")]);
        let texts: Vec<&str> = ls.examples.iter().flat_map(|e| [e.utterance.as_str(), e.persona.as_str()]).collect();
        let vocab = Arc::new(build_vocab(texts, 1));
        let config = TrainConfig { epochs: 30, ..small_config() };
        let (p1, r1) = train_link_teacher(&ls, vocab.clone(), &config, None).unwrap();
        let (p2, r2) = train_link_teacher(&ls, vocab, &config, None).unwrap();
        assert_eq!(p1.digest(), p2.digest());
        assert_eq!(r1.stable_digest(), r2.stable_digest());
        assert!(r1.epochs.iter().all(|e| e.distill == 0.0));
        assert!(r1.epochs.last().unwrap().ce < r1.epochs[0].ce);
    }

    #[test]
    fn student_with_zero_lambda_matches_teacher_steps() {
        let ls = toy_linkset(&[("a b", "c d"), ("e f", "g h"), ("a e", "c g")]);
        let vocab = Arc::new(build_vocab(["a b c d e f g h"], 1));
        let config = TrainConfig { lambda: 0.0, trace_steps: true, batch_size: 2, ..small_config() };
        let (teacher, _) = train_link_teacher(&ls, vocab, &small_config(), None).unwrap();
        let (s, rs) = train_link_student(&ls, &teacher, &config, None).unwrap();
        let (t, rt) = train_link_teacher_from(teacher.clone(), &ls, &config, None).unwrap();
        assert_eq!(rs.step_digests, rt.step_digests);
        assert_eq!(s, t);
    }

    #[test]
    fn student_rejects_foreign_vocab() {
        let ls = toy_linkset(&[("a", "b")]);
        let teacher = BiEncoderParams::init(Role::Link, Arc::new(build_vocab(["a b"], 1)), 4, 0).unwrap();
        let other = BiEncoderParams::init(Role::Link, Arc::new(build_vocab(["a b c"], 1)), 4, 0).unwrap();
        assert!(train_link_student_from(other, &ls, &teacher, &small_config(), None).is_err());
    }

    #[test]
    fn context_serialization() {
        assert_eq!(serialize_context(&["A", "B"], &["h1"], 256), "[P] A [P] B [H] h1");
        assert_eq!(serialize_context(&["a b"], &["one", "two three", "four"], 7), "[P] a b [H] four");
        assert_eq!(serialize_context(&["a b c", "d e f"], &["x"], 5), "[P] a b c");
        assert_eq!(serialize_context(&[], &[], 8), "");
    }

    #[test]
    fn chat_instances_include_augmented_after_originals() {
        let mut ep = DialogueEpisode::new("e", &["i am a", "i am b"], &[(Speaker::User, "hi"), (Speaker::Agent, "yo")]);
        ep.augmented_personas.push(ProfileEntry {
            persona: PersonaSentence::new("i am c"),
            provenance: Provenance::Augmented,
            score: 0.5,
        });
        let ds = ChatDataset::new(Split::Train, vec![ep]).unwrap();
        let inst = chat_instances(&ds, 256);
        assert_eq!(inst, vec![("[P] i am a [P] i am b [P] i am c [H] hi".to_string(), "yo".to_string())]);
        let lonely = ChatDataset::new(Split::Train, vec![DialogueEpisode::new("e", &[], &[(Speaker::Agent, "yo")])]).unwrap();
        assert!(train_chat(&lonely, Arc::new(build_vocab(["yo"], 1)), &small_config(), None).is_err());
    }
}
