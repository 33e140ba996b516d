//! Ranking metrics, the contradiction rate of top-1 replies, lexical overlap,
//! and recall bucketed by how often a gold persona was seen in training.

use serde::{Deserialize, Serialize};
use serde_json::Value;
use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::path::Path;

use crate::encoder::split_tokens;
use crate::error::{Error, Result};
use crate::oracles::{nli_classify, NliBackend, NliClass};
use crate::retrieval::RankedList;
use crate::util;

/// 1-based rank of each gold id; errors when a gold id is missing.
pub fn gold_ranks(rankings: &[(String, RankedList)]) -> Result<Vec<usize>> {
    rankings
        .iter()
        .enumerate()
        .map(|(i, (gold, list))| list.rank_of(gold).ok_or_else(|| Error::data(format!("instance {i}: gold `{gold}` not ranked"))))
        .collect()
}

/// Fraction of instances whose gold is within the top `k`. A missing gold
/// counts as a miss.
pub fn recall_at_k(rankings: &[(String, RankedList)], k: usize) -> Result<f64> {
    if rankings.is_empty() {
        return Err(Error::data("no ranking instances"));
    }
    if k == 0 {
        return Err(Error::invalid("k must be at least 1"));
    }
    let hits = rankings.iter().filter(|(g, l)| l.rank_of(g).is_some_and(|r| r <= k)).count();
    Ok(hits as f64 / rankings.len() as f64)
}

pub fn mrr(rankings: &[(String, RankedList)]) -> Result<f64> {
    if rankings.is_empty() {
        return Err(Error::data("no ranking instances"));
    }
    mrr_from_ranks(&gold_ranks(rankings)?)
}

pub fn recall_from_ranks(ranks: &[usize], k: usize) -> Result<f64> {
    if ranks.is_empty() {
        return Err(Error::data("no ranking instances"));
    }
    if k == 0 {
        return Err(Error::invalid("k must be at least 1"));
    }
    Ok(ranks.iter().filter(|&&r| r <= k).count() as f64 / ranks.len() as f64)
}

pub fn mrr_from_ranks(ranks: &[usize]) -> Result<f64> {
    if ranks.is_empty() {
        return Err(Error::data("no ranking instances"));
    }
    Ok(ranks.iter().map(|&r| 1.0 / r as f64).sum::<f64>() / ranks.len() as f64)
}

/// An instance is contradictory when the reply (premise) contradicts any
/// persona (hypothesis) of its profile.
pub fn contradict_at_1(top1: &[(String, Vec<String>)], nli: &dyn NliBackend) -> Result<f64> {
    if top1.is_empty() {
        return Err(Error::data("no responses"));
    }
    let mut bad = 0usize;
    for (response, profile) in top1 {
        for p in profile {
            if nli_classify(response, p, nli)?.class == NliClass::Contradiction {
                bad += 1;
                break;
            }
        }
    }
    Ok(bad as f64 / top1.len() as f64)
}

pub fn jaccard(a: &str, b: &str) -> f64 {
    let x: BTreeSet<String> = split_tokens(a).into_iter().collect();
    let y: BTreeSet<String> = split_tokens(b).into_iter().collect();
    let union = x.union(&y).count();
    if union == 0 {
        return 0.0;
    }
    x.intersection(&y).count() as f64 / union as f64
}

pub fn mean_jaccard<S: AsRef<str>>(pairs: &[(S, S)]) -> Result<f64> {
    if pairs.is_empty() {
        return Err(Error::data("no pairs"));
    }
    Ok(pairs.iter().map(|(a, b)| jaccard(a.as_ref(), b.as_ref())).sum::<f64>() / pairs.len() as f64)
}

/// Frequency buckets given by ascending lower bounds starting at 0; the last
/// bucket is open-ended.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Buckets {
    pub lower_bounds: Vec<usize>,
}

impl Default for Buckets {
    fn default() -> Self {
        Buckets { lower_bounds: vec![0, 1, 3, 10] }
    }
}

impl Buckets {
    pub fn new(lower_bounds: Vec<usize>) -> Result<Self> {
        if lower_bounds.first() != Some(&0) || lower_bounds.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::invalid("bucket bounds must start at 0 and increase strictly"));
        }
        Ok(Buckets { lower_bounds })
    }

    fn index(&self, count: usize) -> usize {
        self.lower_bounds.iter().rposition(|&lo| count >= lo).unwrap_or(0)
    }

    pub fn label(&self, i: usize) -> String {
        let lo = self.lower_bounds[i];
        match self.lower_bounds.get(i + 1) {
            Some(&next) if next == lo + 1 => lo.to_string(),
            Some(&next) => format!("{lo}-{}", next - 1),
            None => format!("{lo}+"),
        }
    }

    pub fn label_of(&self, count: usize) -> String {
        self.label(self.index(count))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BucketStat {
    pub recall: f64,
    pub count: usize,
}

/// Recall@k per bucket of training-pair frequency of the gold persona.
/// Instances are `(gold persona id, gold rank)`; ids absent from `counts`
/// have frequency 0. Empty buckets are left out.
pub fn bucketed_recall(
    instances: &[(String, usize)],
    counts: &HashMap<String, usize>,
    k: usize,
    buckets: &Buckets,
) -> Result<BTreeMap<String, BucketStat>> {
    if k == 0 {
        return Err(Error::invalid("k must be at least 1"));
    }
    let mut groups: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (id, rank) in instances {
        groups.entry(buckets.index(*counts.get(id).unwrap_or(&0))).or_default().push(*rank);
    }
    groups
        .into_iter()
        .map(|(b, ranks)| Ok((buckets.label(b), BucketStat { recall: recall_from_ranks(&ranks, k)?, count: ranks.len() })))
        .collect()
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub r_at_1: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub r_at_5: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub r_at_10: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mrr: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub contradict_at_1: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mean_jaccard: Option<f64>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub buckets: BTreeMap<String, f64>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub bucket_counts: BTreeMap<String, usize>,
    pub count: usize,
    pub seed: u64,
    #[serde(default)]
    pub config: Value,
}

impl EvalReport {
    pub fn from_ranks(ranks: &[usize], seed: u64, config: Value) -> Result<Self> {
        Ok(EvalReport {
            r_at_1: Some(recall_from_ranks(ranks, 1)?),
            r_at_5: Some(recall_from_ranks(ranks, 5)?),
            r_at_10: Some(recall_from_ranks(ranks, 10)?),
            mrr: Some(mrr_from_ranks(ranks)?),
            count: ranks.len(),
            seed,
            config,
            ..EvalReport::default()
        })
    }

    pub fn set_buckets(&mut self, stats: BTreeMap<String, BucketStat>) {
        self.buckets = stats.iter().map(|(k, v)| (k.clone(), v.recall)).collect();
        self.bucket_counts = stats.into_iter().map(|(k, v)| (k, v.count)).collect();
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        util::atomic_write(path, &serde_json::to_vec_pretty(self)?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Ok(serde_json::from_slice(&std::fs::read(path)?)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::oracles::{Lexicon, StubNli};

    fn ranking_with_gold_at(rank: usize, n: usize) -> (String, RankedList) {
        let ids: Vec<String> = (0..n).map(|i| format!("x{i:02}")).collect();
        let scores: Vec<f64> = (0..n).map(|i| -(i as f64)).collect();
        (ids[rank - 1].clone(), RankedList::from_scores(ids, scores))
    }

    #[test]
    fn recall_and_mrr_hand_cases() {
        let all_first: Vec<_> = (0..4).map(|_| ranking_with_gold_at(1, 20)).collect();
        assert_eq!(recall_at_k(&all_first, 1).unwrap(), 1.0);
        assert_eq!(mrr(&all_first).unwrap(), 1.0);
        let late: Vec<_> = (0..3).map(|_| ranking_with_gold_at(6, 20)).collect();
        assert_eq!(recall_at_k(&late, 5).unwrap(), 0.0);
        let mixed = vec![ranking_with_gold_at(1, 20), ranking_with_gold_at(3, 20), ranking_with_gold_at(6, 20)];
        assert_eq!(recall_at_k(&mixed, 5).unwrap(), 2.0 / 3.0);
        let m = vec![ranking_with_gold_at(1, 20), ranking_with_gold_at(2, 20), ranking_with_gold_at(4, 20)];
        assert!((mrr(&m).unwrap() - 1.75 / 3.0).abs() < 1e-15);
        assert_eq!(mrr(&[ranking_with_gold_at(20, 20)]).unwrap(), 0.05);
        assert!(recall_at_k(&[], 1).is_err());
        let missing = vec![("nope".to_string(), ranking_with_gold_at(1, 3).1)];
        assert!(mrr(&missing).is_err());
    }

    #[test]
    fn jaccard_hand_case() {
        assert_eq!(jaccard("i am a doctor", "i work as a doctor"), 0.5);
        assert_eq!(jaccard("same text", "same text"), 1.0);
        assert_eq!(jaccard("a b", "c d"), 0.0);
        assert_eq!(jaccard("b a", "a b"), 1.0);
        assert_eq!(mean_jaccard(&[("a", "a"), ("a", "b")]).unwrap(), 0.5);
    }

    #[test]
    fn contradiction_rate() {
        let lex: Lexicon = serde_json::from_str(r#"{"antonyms": [["vegan", "carnivore"]]}"#).unwrap();
        let nli = StubNli::new(&lex);
        let empty = vec![("anything".to_string(), vec![]), ("else".to_string(), vec![])];
        assert_eq!(contradict_at_1(&empty, &nli).unwrap(), 0.0);
        let mixed = vec![
            ("i don't eat meat".to_string(), vec!["i eat meat".to_string()]),
            ("i eat meat".to_string(), vec!["i eat meat".to_string()]),
        ];
        assert_eq!(contradict_at_1(&mixed, &nli).unwrap(), 0.5);
    }

    #[test]
    fn bucket_labels_and_partition() {
        let b = Buckets::default();
        assert_eq!((0..4).map(|i| b.label(i)).collect::<Vec<_>>(), vec!["0", "1-2", "3-9", "10+"]);
        assert_eq!(b.label_of(2), "1-2");
        assert_eq!(b.label_of(57), "10+");
        let counts: HashMap<String, usize> = [("seen".to_string(), 4)].into();
        let inst = vec![("new".to_string(), 1), ("new".to_string(), 12), ("seen".to_string(), 3)];
        let r = bucketed_recall(&inst, &counts, 10, &b).unwrap();
        assert_eq!(r.len(), 2);
        assert_eq!(r["0"], BucketStat { recall: 0.5, count: 2 });
        assert_eq!(r["3-9"], BucketStat { recall: 1.0, count: 1 });
        assert!(Buckets::new(vec![1, 2]).is_err());
    }

    #[test]
    fn report_schema() {
        let rep = EvalReport::from_ranks(&[1, 2], 3, Value::Null).unwrap();
        let v = serde_json::to_value(&rep).unwrap();
        for key in ["r_at_1", "r_at_5", "r_at_10", "mrr", "count", "seed"] {
            assert!(v.get(key).is_some(), "{key}");
        }
    }
}
