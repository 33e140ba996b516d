//! Utterance-persona link supervision: entailment-filtered seed pairs, their
//! commonsense-expanded counterparts and teacher soft labels.

use rand::seq::index;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::collections::HashSet;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use crate::corpus::{enumerate_pairs, ChatDataset, MatchMode, Pkb, Side};
use crate::encoder::{score_matrix, split_tokens, tokenize, BiEncoderParams};
use crate::error::{Error, Result};
use crate::linalg::softmax;
use crate::oracles::{expand, nli_classify, Expander, Expansion, NliBackend, NliClass, Relation};
use crate::training::plan_batches;
use crate::util;

pub const DEFAULT_BUDGET: usize = 64;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinkExample {
    #[serde(rename = "u")]
    pub utterance: String,
    #[serde(rename = "p")]
    pub persona: String,
    #[serde(rename = "p_id")]
    pub persona_id: String,
    #[serde(rename = "y")]
    pub label: u8,
    pub origin: MatchMode,
    #[serde(rename = "u_exp", default, skip_serializing_if = "Option::is_none")]
    pub utterance_expanded: Option<String>,
    #[serde(rename = "p_exp", default, skip_serializing_if = "Option::is_none")]
    pub persona_expanded: Option<String>,
    #[serde(rename = "soft", default, skip_serializing_if = "Option::is_none")]
    pub soft_label: Option<f64>,
}

impl LinkExample {
    pub fn is_expanded(&self) -> bool {
        self.utterance_expanded.is_some() && self.persona_expanded.is_some()
    }

    /// Text fed to the context tower: the expanded utterance when present.
    pub fn context_text(&self) -> &str {
        self.utterance_expanded.as_deref().unwrap_or(&self.utterance)
    }

    pub fn candidate_text(&self) -> &str {
        self.persona_expanded.as_deref().unwrap_or(&self.persona)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinkConfig {
    pub mode: MatchMode,
    #[serde(default)]
    pub side: Side,
    pub neg_ratio: f64,
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub relations: Option<Vec<Relation>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub budget: Option<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LinkDataset {
    pub examples: Vec<LinkExample>,
    pub config: LinkConfig,
}

impl LinkDataset {
    pub fn positives(&self) -> impl Iterator<Item = &LinkExample> {
        self.examples.iter().filter(|e| e.label == 1)
    }

    pub fn positives_count(&self) -> usize {
        self.positives().count()
    }

    pub fn negatives_count(&self) -> usize {
        self.examples.len() - self.positives_count()
    }

    pub fn is_expanded(&self) -> bool {
        !self.examples.is_empty() && self.examples.iter().all(LinkExample::is_expanded)
    }

    pub fn validate(&self) -> Result<()> {
        let mut seen = HashSet::new();
        for (i, e) in self.examples.iter().enumerate() {
            if e.label > 1 {
                return Err(Error::data(format!("record {i}: label {} is not 0/1", e.label)));
            }
            if !seen.insert((e.utterance.as_str(), e.persona_id.as_str())) {
                return Err(Error::data(format!("record {i}: duplicate pair ({}, {})", e.utterance, e.persona_id)));
            }
            if let Some(s) = e.soft_label {
                if !(0.0..=1.0).contains(&s) {
                    return Err(Error::data(format!("record {i}: soft label {s} outside [0, 1]")));
                }
            }
        }
        Ok(())
    }

    /// Writes the records as JSONL and the config snapshot next to them.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut buf = Vec::new();
        for e in &self.examples {
            serde_json::to_writer(&mut buf, e)?;
            buf.write_all(b"\n")?;
        }
        util::atomic_write(path, &buf)?;
        util::atomic_write(&config_path(path), &serde_json::to_vec_pretty(&self.config)?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = std::fs::File::open(path)?;
        let mut examples = Vec::new();
        for (i, line) in BufReader::new(file).lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            examples.push(serde_json::from_str(&line).map_err(|e| Error::Parse {
                path: path.to_path_buf(),
                line: i + 1,
                msg: e.to_string(),
            })?);
        }
        let config = match std::fs::read(config_path(path)) {
            Ok(bytes) => serde_json::from_slice(&bytes)?,
            Err(_) => LinkConfig { mode: MatchMode::OutDialogue, side: Side::AgentOnly, neg_ratio: 1.0, seed: 0, relations: None, budget: None },
        };
        let ds = LinkDataset { examples, config };
        ds.validate()?;
        Ok(ds)
    }
}

fn config_path(path: &Path) -> std::path::PathBuf {
    let mut name = path.file_name().unwrap_or_default().to_os_string();
    name.push(".config.json");
    path.with_file_name(name)
}

/// Labels every enumerated pair with the NLI oracle (utterance as premise,
/// persona as hypothesis). Entailments become positives; `neg_ratio`
/// negatives per positive are sampled from the remaining pairs.
pub fn build_seed_linkset(
    dataset: &ChatDataset,
    pkb: &Pkb,
    nli: &dyn NliBackend,
    mode: MatchMode,
    side: Side,
    neg_ratio: f64,
    seed: u64,
) -> Result<LinkDataset> {
    if !(neg_ratio > 0.0) {
        return Err(Error::invalid("neg_ratio must be positive"));
    }
    let pairs: Vec<_> = enumerate_pairs(dataset, pkb, mode, side).collect();
    let labels: Vec<NliClass> = pairs
        .par_iter()
        .map(|p| nli_classify(&p.utterance.text, &p.persona.text, nli).map(|l| l.class))
        .collect::<Result<_>>()?;
    let make = |i: usize, label: u8| LinkExample {
        utterance: pairs[i].utterance.text.clone(),
        persona: pairs[i].persona.text.clone(),
        persona_id: pairs[i].persona.id.clone(),
        label,
        origin: mode,
        utterance_expanded: None,
        persona_expanded: None,
        soft_label: None,
    };
    let pos: Vec<usize> = (0..pairs.len()).filter(|&i| labels[i] == NliClass::Entailment).collect();
    if pos.is_empty() {
        return Err(Error::data(format!(
            "no entailed pairs among {} candidates; check the lexicon or NLI backend",
            pairs.len()
        )));
    }
    let neg_pool: Vec<usize> = (0..pairs.len()).filter(|&i| labels[i] != NliClass::Entailment).collect();
    let want = ((pos.len() as f64 * neg_ratio).round() as usize).min(neg_pool.len());
    let mut rng = util::rng(seed, 0x11);
    let mut chosen: Vec<usize> = index::sample(&mut rng, neg_pool.len(), want).into_iter().map(|k| neg_pool[k]).collect();
    chosen.extend(&pos);
    chosen.sort_unstable();
    let examples = chosen.into_iter().map(|i| make(i, u8::from(labels[i] == NliClass::Entailment))).collect();
    Ok(LinkDataset {
        examples,
        config: LinkConfig { mode, side, neg_ratio, seed, relations: None, budget: None },
    })
}

/// Appends one `[REL] a | b [/REL]` block per relation in canonical order.
/// Blocks that would push the token count past `budget` are skipped whole.
pub fn serialize_expansion(text: &str, expansions: &[Expansion], budget: usize) -> Result<String> {
    let mut used = split_tokens(text).len();
    if used > budget {
        return Err(Error::invalid(format!("text has {used} tokens, over the budget of {budget}")));
    }
    let mut out = text.to_string();
    for rel in Relation::ALL {
        let Some(e) = expansions.iter().find(|e| e.relation == rel) else { continue };
        if e.attributes.is_empty() {
            continue;
        }
        let block = format!("{} {} {}", rel.open_token(), e.attributes.join(" | "), rel.close_token());
        let cost = split_tokens(&block).len();
        if used + cost <= budget {
            out.push(' ');
            out.push_str(&block);
            used += cost;
        }
    }
    Ok(out)
}

/// Inverse of [`serialize_expansion`]: the original text and each block.
pub fn parse_expansion(serialized: &str) -> Result<(String, Vec<Expansion>)> {
    let first = Relation::ALL.iter().filter_map(|r| serialized.find(&format!(" {}", r.open_token()))).min();
    let (text, mut rest) = match first {
        Some(i) => (&serialized[..i], &serialized[i..]),
        None => return Ok((serialized.to_string(), Vec::new())),
    };
    let mut out = Vec::new();
    while !rest.trim().is_empty() {
        let trimmed = rest.trim_start();
        let rel = Relation::ALL
            .into_iter()
            .find(|r| trimmed.starts_with(&r.open_token()))
            .ok_or_else(|| Error::data(format!("expected a relation block at `{trimmed}`")))?;
        let body = &trimmed[rel.open_token().len()..];
        let end = body.find(&rel.close_token()).ok_or_else(|| Error::data(format!("unclosed {} block", rel.name())))?;
        let attributes = body[..end].split(" | ").map(|a| a.trim().to_string()).collect();
        out.push(Expansion { relation: rel, attributes });
        rest = &body[end + rel.close_token().len()..];
    }
    Ok((text.to_string(), out))
}

/// How texts are expanded before they reach a link encoder.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExpansionPolicy {
    pub relations: Vec<Relation>,
    pub max_attrs: usize,
    pub budget: usize,
}

impl Default for ExpansionPolicy {
    fn default() -> Self {
        ExpansionPolicy { relations: Relation::PERSONAL.to_vec(), max_attrs: 4, budget: DEFAULT_BUDGET }
    }
}

impl ExpansionPolicy {
    pub fn apply(&self, text: &str, expander: &dyn Expander) -> Result<String> {
        let exps = expand(text, &self.relations, expander, self.max_attrs)?;
        serialize_expansion(text, &exps, self.budget.max(split_tokens(text).len()))
    }
}

/// Expands both sides of every record. Labels and order are carried over.
pub fn expand_linkset(linkset: &LinkDataset, expander: &dyn Expander, policy: &ExpansionPolicy) -> Result<LinkDataset> {
    let examples = linkset
        .examples
        .par_iter()
        .enumerate()
        .map(|(i, e)| {
            let u = policy.apply(&e.utterance, expander).map_err(|err| Error::data(format!("record {i}: {err}")))?;
            let p = policy.apply(&e.persona, expander).map_err(|err| Error::data(format!("record {i}: {err}")))?;
            Ok(LinkExample { utterance_expanded: Some(u), persona_expanded: Some(p), soft_label: None, ..e.clone() })
        })
        .collect::<Result<Vec<_>>>()?;
    let mut config = linkset.config.clone();
    config.relations = Some(policy.relations.clone());
    config.budget = Some(policy.budget);
    Ok(LinkDataset { examples, config })
}

/// Positive records of a link set as (context ids, candidate ids), truncated
/// to `max_tokens`.
pub fn tokenized_positives(linkset: &LinkDataset, params: &BiEncoderParams, max_tokens: usize) -> Vec<(Vec<u32>, Vec<u32>)> {
    linkset
        .positives()
        .map(|e| (tokenize(e.context_text(), &params.vocab, max_tokens), tokenize(e.candidate_text(), &params.vocab, max_tokens)))
        .collect()
}

/// Sets each positive's soft label to the teacher's in-batch softmax
/// probability of its own persona, using the batching of the first student
/// epoch. Negatives keep no soft label.
pub fn annotate_soft_labels(
    expanded: &LinkDataset,
    teacher: &BiEncoderParams,
    batch_size: usize,
    max_tokens: usize,
    seed: u64,
) -> Result<LinkDataset> {
    teacher.vocab.check_reserved()?;
    let pos_idx: Vec<usize> = (0..expanded.examples.len()).filter(|&i| expanded.examples[i].label == 1).collect();
    let pairs = tokenized_positives(expanded, teacher, max_tokens);
    let mut out = expanded.clone();
    for (batch, _) in plan_batches(pairs.len(), 0, batch_size, seed, 0) {
        let ctx: Vec<Vec<u32>> = batch.iter().map(|&i| pairs[i].0.clone()).collect();
        let cand: Vec<Vec<u32>> = batch.iter().map(|&i| pairs[i].1.clone()).collect();
        let s = score_matrix(teacher, &ctx, &cand)?;
        for (row, &i) in batch.iter().enumerate() {
            out.examples[pos_idx[i]].soft_label = Some(softmax(s.row(row))[row]);
        }
    }
    Ok(out)
}

/// One line of a gold link evaluation file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GoldLink {
    pub u: String,
    pub gold_p_ids: Vec<String>,
}

pub fn load_gold_links(path: &Path) -> Result<Vec<GoldLink>> {
    let file = std::fs::File::open(path)?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            msg: e.to_string(),
        })?);
    }
    if out.is_empty() {
        return Err(Error::data(format!("{}: empty gold file", path.display())));
    }
    Ok(out)
}

pub fn save_gold_links(gold: &[GoldLink], path: &Path) -> Result<()> {
    let mut buf = Vec::new();
    for g in gold {
        serde_json::to_writer(&mut buf, g)?;
        buf.write_all(b"\n")?;
    }
    util::atomic_write(path, &buf)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{build_pkb, DialogueEpisode, Speaker::*, Split};
    use crate::encoder::{build_vocab, Role};
    use crate::oracles::{Lexicon, StubExpander, StubNli};
    use std::sync::Arc;

    fn lexicon() -> Lexicon {
        serde_json::from_str(
            r#"{"synonym_groups": [["like", "love"]],
                "expansions": {"meat": {"xAttr": ["carnivorous"]}, "dogs": {"xAttr": ["caring"], "xWant": ["to walk"]}}}"#,
        )
        .unwrap()
    }

    fn corpus() -> ChatDataset {
        ChatDataset::new(
            Split::Train,
            vec![
                DialogueEpisode::new("e1", &["i love dogs", "i am a pilot"], &[(User, "hi"), (Agent, "i like dogs a lot")]),
                DialogueEpisode::new("e2", &["i eat meat"], &[(User, "hey"), (Agent, "i fly planes")]),
            ],
        )
        .unwrap()
    }

    #[test]
    fn seed_linkset_in_dialogue() {
        let ds = corpus();
        let pkb = build_pkb(&ds).unwrap();
        let nli = StubNli::new(&lexicon());
        let ls = build_seed_linkset(&ds, &pkb, &nli, MatchMode::InDialogue, Side::AgentOnly, 1.0, 3).unwrap();
        assert_eq!(ls.positives_count(), 1);
        assert_eq!(ls.negatives_count(), 1);
        let pos = ls.positives().next().unwrap();
        assert_eq!((pos.utterance.as_str(), pos.persona.as_str()), ("i like dogs a lot", "i love dogs"));

        let out = build_seed_linkset(&ds, &pkb, &nli, MatchMode::OutDialogue, Side::AgentOnly, 10.0, 3).unwrap();
        assert_eq!(out.positives_count(), 1);
        // 2 utterances × 3 personas, one entailed
        assert_eq!(out.negatives_count(), 5);
        assert!(out.examples.iter().all(|e| e.origin == MatchMode::OutDialogue));
    }

    #[test]
    fn zero_positives_is_an_error() {
        let ds = ChatDataset::new(Split::Train, vec![DialogueEpisode::new("e", &["i am a pilot"], &[(Agent, "hello")])]).unwrap();
        let pkb = build_pkb(&ds).unwrap();
        let err = build_seed_linkset(&ds, &pkb, &StubNli::new(&lexicon()), MatchMode::InDialogue, Side::AgentOnly, 1.0, 0);
        assert!(err.unwrap_err().to_string().contains("lexicon"));
    }

    #[test]
    fn serialization_format_and_budget() {
        let e = |r, a: &[&str]| Expansion { relation: r, attributes: a.iter().map(|s| s.to_string()).collect() };
        assert_eq!(
            serialize_expansion("i eat a lot of meat", &[e(Relation::XAttr, &["carnivorous"])], 64).unwrap(),
            "i eat a lot of meat [XATTR] carnivorous [/XATTR]"
        );
        assert_eq!(serialize_expansion("plain text", &[], 64).unwrap(), "plain text");
        // 2 text tokens + 3 for the first block fit in 6; the second needs 5 more.
        let two = [e(Relation::XWant, &["to run", "rest"]), e(Relation::XAttr, &["fit"])];
        assert_eq!(serialize_expansion("i run", &two, 6).unwrap(), "i run [XATTR] fit [/XATTR]");
        assert!(serialize_expansion("one two three", &[], 2).is_err());
        let full = serialize_expansion("i run", &two, 64).unwrap();
        assert_eq!(full, "i run [XATTR] fit [/XATTR] [XWANT] to run | rest [/XWANT]");
        let (text, blocks) = parse_expansion(&full).unwrap();
        assert_eq!(text, "i run");
        assert_eq!(blocks, vec![e(Relation::XAttr, &["fit"]), e(Relation::XWant, &["to run", "rest"])]);
    }

    #[test]
    fn expansion_keeps_count_and_labels() {
        let ds = corpus();
        let pkb = build_pkb(&ds).unwrap();
        let lex = lexicon();
        let ls = build_seed_linkset(&ds, &pkb, &StubNli::new(&lex), MatchMode::OutDialogue, Side::AgentOnly, 10.0, 3).unwrap();
        let ex = expand_linkset(&ls, &StubExpander::new(&lex), &ExpansionPolicy::default()).unwrap();
        assert_eq!(ex.examples.len(), ls.examples.len());
        let labels = |d: &LinkDataset| d.examples.iter().map(|e| e.label).collect::<Vec<_>>();
        assert_eq!(labels(&ex), labels(&ls));
        let meat = ex.examples.iter().find(|e| e.persona == "i eat meat").unwrap();
        assert_eq!(meat.candidate_text(), "i eat meat [XATTR] carnivorous [/XATTR]");
        let fly = ex.examples.iter().find(|e| e.utterance == "i fly planes").unwrap();
        assert_eq!(fly.context_text(), "i fly planes");
        assert!(ex.is_expanded());
    }

    #[test]
    fn soft_labels_match_hand_softmax() {
        let vocab = Arc::new(build_vocab(["a b"], 1));
        let mut teacher = BiEncoderParams::zeros(Role::Link, vocab.clone(), 2);
        let rec = |u: &str, p: &str| LinkExample {
            utterance: u.into(),
            persona: p.into(),
            persona_id: crate::corpus::persona_id(p),
            label: 1,
            origin: MatchMode::OutDialogue,
            utterance_expanded: Some(u.into()),
            persona_expanded: Some(p.into()),
            soft_label: None,
        };
        let cfg = LinkConfig { mode: MatchMode::OutDialogue, side: Side::AgentOnly, neg_ratio: 1.0, seed: 0, relations: None, budget: None };
        let one = LinkDataset { examples: vec![rec("a", "b")], config: cfg.clone() };
        assert_eq!(annotate_soft_labels(&one, &teacher, 4, 64, 0).unwrap().examples[0].soft_label, Some(1.0));
        let two = LinkDataset { examples: vec![rec("a", "a"), rec("b", "b")], config: cfg };
        let tied = annotate_soft_labels(&two, &teacher, 2, 64, 0).unwrap();
        assert!(tied.examples.iter().all(|e| e.soft_label == Some(0.5)));
        // Score margin Δ = 1.5 for the diagonal.
        let (a, b) = (vocab.id("a") as usize, vocab.id("b") as usize);
        teacher.context.projection = vec![1.0, 0.0, 0.0, 1.0];
        teacher.candidate.projection = vec![1.0, 0.0, 0.0, 1.0];
        teacher.context.embeddings[a * 2] = 1.5;
        teacher.candidate.embeddings[a * 2] = 1.0;
        teacher.context.embeddings[b * 2 + 1] = 1.5;
        teacher.candidate.embeddings[b * 2 + 1] = 1.0;
        let soft = annotate_soft_labels(&two, &teacher, 2, 64, 0).unwrap();
        let want = 1.5f64.exp() / (1.5f64.exp() + 1.0);
        for e in &soft.examples {
            assert!((e.soft_label.unwrap() - want).abs() < 1e-12);
        }
    }

    #[test]
    fn save_load_round_trip() {
        let ds = corpus();
        let pkb = build_pkb(&ds).unwrap();
        let ls = build_seed_linkset(&ds, &pkb, &StubNli::new(&lexicon()), MatchMode::OutDialogue, Side::AgentOnly, 2.0, 1).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("link.jsonl");
        ls.save(&path).unwrap();
        assert_eq!(LinkDataset::load(&path).unwrap(), ls);
        let gold = vec![GoldLink { u: "x".into(), gold_p_ids: vec!["p1".into()] }];
        save_gold_links(&gold, &dir.path().join("g.jsonl")).unwrap();
        assert_eq!(load_gold_links(&dir.path().join("g.jsonl")).unwrap(), gold);
    }
}
