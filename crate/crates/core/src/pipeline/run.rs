//! The five-step debiasing run plus evaluation. Each stage reads its inputs
//! from and writes its outputs to the run directory, so stages can be run one
//! at a time and still reproduce a full run.

use serde::{Deserialize, Serialize};
use serde_json::json;
use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::Arc;

use super::config::{LinkerChoice, Oracles, PipelineConfig};
use super::eval::{analyze_bias, eval_chat, eval_link, persona_train_counts, ChatEvalOptions, LinkRanker, ReportSet};
use crate::corpus::{build_pkb, load_chat_dataset, save_chat_dataset, ChatDataset, Pkb, Split};
use crate::encoder::{build_vocab, load_checkpoint, save_checkpoint, Role, Vocab};
use crate::error::{Error, Result};
use crate::linkdata::{annotate_soft_labels, build_seed_linkset, expand_linkset, load_gold_links, LinkDataset};
use crate::metrics::EvalReport;
use crate::retrieval::{augment_dataset, build_candidate_pools, index_pkb, index_pkb_with, load_pools, pkb_violations, save_pools, Linker, PkbIndex};
use crate::training::{train_chat, train_link_student, train_link_teacher, TrainReport};
use crate::util;

pub const PKB: &str = "pkb.json";
pub const LINKSET: &str = "d_link.jsonl";
pub const LINKSET_EXPANDED: &str = "d_link_expanded.jsonl";
pub const LINKSET_SOFT: &str = "d_link_soft.jsonl";
pub const VOCAB: &str = "vocab.txt";
pub const TEACHER: &str = "teacher.ckpt";
pub const STUDENT: &str = "student.ckpt";
pub const INDEX: &str = "pkb_index.json";
pub const CHAT_AUGMENTED: &str = "d_chat_augmented.jsonl";
pub const CHAT_RAW: &str = "chat_raw.ckpt";
pub const CHAT_DEBIASED: &str = "chat_debiased.ckpt";
pub const POOLS: &str = "pools_test.jsonl";
pub const REPORTS: &str = "reports";
pub const MANIFEST: &str = "manifest.json";

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Stage {
    BuildLinkdata,
    Expand,
    TrainTeacher,
    TrainStudent,
    IndexPkb,
    Augment,
    TrainChat,
    Evaluate,
}

impl Stage {
    pub const ALL: [Stage; 8] = [
        Stage::BuildLinkdata,
        Stage::Expand,
        Stage::TrainTeacher,
        Stage::TrainStudent,
        Stage::IndexPkb,
        Stage::Augment,
        Stage::TrainChat,
        Stage::Evaluate,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Stage::BuildLinkdata => "build_linkdata",
            Stage::Expand => "expand",
            Stage::TrainTeacher => "train_teacher",
            Stage::TrainStudent => "train_student",
            Stage::IndexPkb => "index_pkb",
            Stage::Augment => "augment",
            Stage::TrainChat => "train_chat",
            Stage::Evaluate => "evaluate",
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Stage {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Stage::ALL.into_iter().find(|st| st.name() == s).ok_or_else(|| Error::invalid(format!("unknown stage `{s}`")))
    }
}

/// Config, seed and sha256 of every artifact in the run directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub seed: u64,
    pub config: PipelineConfig,
    pub stages: Vec<String>,
    pub artifacts: BTreeMap<String, String>,
}

pub struct PipelineOutput {
    pub augmented_chat: PathBuf,
    pub chat_checkpoint: PathBuf,
    pub reports: ReportSet,
    pub manifest: Manifest,
}

fn out(cfg: &PipelineConfig, name: &str) -> PathBuf {
    cfg.paths.out_dir.join(name)
}

fn load_pkb(cfg: &PipelineConfig) -> Result<Pkb> {
    Pkb::load(&out(cfg, PKB))
}

fn load_vocab(cfg: &PipelineConfig) -> Result<Arc<Vocab>> {
    Ok(Arc::new(Vocab::load(&out(cfg, VOCAB))?))
}

fn save_report(cfg: &PipelineConfig, name: &str, report: &TrainReport) -> Result<()> {
    report.save(&out(cfg, &format!("{name}_report.json")))
}

/// Training PKB and the NLI-filtered seed link set.
fn stage_build_linkdata(cfg: &PipelineConfig, oracles: &Oracles) -> Result<()> {
    let train = load_chat_dataset(&cfg.paths.train, Split::Train)?;
    let mut pkb = build_pkb(&train)?;
    if let Some(cap) = cfg.pkb_cap {
        pkb = pkb.capped(cap, cfg.seed);
    }
    pkb.save(&out(cfg, PKB))?;
    let seed = build_seed_linkset(&train, &pkb, oracles.nli.as_ref(), cfg.link.mode, cfg.link.side, cfg.link.neg_ratio, cfg.seed)?;
    seed.save(&out(cfg, LINKSET))
}

/// Expanded link set and the vocabulary shared by every model.
fn stage_expand(cfg: &PipelineConfig, oracles: &Oracles) -> Result<()> {
    let train = load_chat_dataset(&cfg.paths.train, Split::Train)?;
    let pkb = load_pkb(cfg)?;
    let seed = LinkDataset::load(&out(cfg, LINKSET))?;
    let expanded = expand_linkset(&seed, oracles.expander.as_ref(), &cfg.expansion)?;
    expanded.save(&out(cfg, LINKSET_EXPANDED))?;

    let pkb_expanded: Vec<String> =
        pkb.personas.iter().map(|p| cfg.expansion.apply(&p.text, oracles.expander.as_ref())).collect::<Result<_>>()?;
    let mut texts: Vec<&str> = Vec::new();
    for ep in &train.episodes {
        texts.extend(ep.personas.iter().map(|p| p.text.as_str()));
        texts.extend(ep.utterances.iter().map(|u| u.text.as_str()));
    }
    texts.extend(expanded.examples.iter().flat_map(|e| [e.context_text(), e.candidate_text()]));
    texts.extend(pkb_expanded.iter().map(String::as_str));
    build_vocab(texts, cfg.vocab_min_count).save(&out(cfg, VOCAB))
}

fn stage_train_teacher(cfg: &PipelineConfig) -> Result<()> {
    let seed = LinkDataset::load(&out(cfg, LINKSET))?;
    let (teacher, report) = train_link_teacher(&seed, load_vocab(cfg)?, &cfg.teacher, None)?;
    save_checkpoint(&teacher, &out(cfg, TEACHER))?;
    save_report(cfg, "teacher", &report)
}

fn stage_train_student(cfg: &PipelineConfig) -> Result<()> {
    let expanded = LinkDataset::load(&out(cfg, LINKSET_EXPANDED))?;
    let teacher = load_checkpoint(&out(cfg, TEACHER), Some(Role::Link))?;
    let soft = annotate_soft_labels(&expanded, &teacher, cfg.student.batch_size, cfg.student.max_tokens, cfg.student.seed)?;
    soft.save(&out(cfg, LINKSET_SOFT))?;
    let (student, report) = train_link_student(&soft, &teacher, &cfg.student, None)?;
    save_checkpoint(&student, &out(cfg, STUDENT))?;
    save_report(cfg, "student", &report)
}

fn student_linker(cfg: &PipelineConfig, oracles: &Oracles) -> Result<Linker> {
    let student = Arc::new(load_checkpoint(&out(cfg, STUDENT), Some(Role::Link))?);
    let index = Arc::new(PkbIndex::load(&out(cfg, INDEX))?);
    Linker::new(student, index, cfg.augment.clone(), Some((oracles.expander.clone(), cfg.expansion.clone())))
}

fn teacher_linker(cfg: &PipelineConfig, pkb: &Pkb) -> Result<Linker> {
    let teacher = load_checkpoint(&out(cfg, TEACHER), Some(Role::Link))?;
    let index = index_pkb(pkb, &teacher, cfg.teacher.max_tokens)?;
    Linker::new(Arc::new(teacher), Arc::new(index), cfg.augment.clone(), None)
}

fn check_pkb(episodes: &ChatDataset, pkb: &Pkb, what: &str) -> Result<()> {
    let bad = pkb_violations(&episodes.episodes, pkb);
    if bad.is_empty() {
        Ok(())
    } else {
        Err(Error::data(format!("{what}: {} augmented personas outside the training PKB (first `{}`)", bad.len(), bad[0])))
    }
}

/// Student embeddings of the expanded PKB.
fn stage_index_pkb(cfg: &PipelineConfig, oracles: &Oracles) -> Result<()> {
    let pkb = load_pkb(cfg)?;
    let student = load_checkpoint(&out(cfg, STUDENT), Some(Role::Link))?;
    let index = index_pkb_with(&pkb, &student, cfg.student.max_tokens, Some((oracles.expander.as_ref(), &cfg.expansion)))?;
    index.save(&out(cfg, INDEX))
}

/// Training split with student-linked personas added.
fn stage_augment(cfg: &PipelineConfig, oracles: &Oracles) -> Result<()> {
    let pkb = load_pkb(cfg)?;
    let linker = student_linker(cfg, oracles)?;
    let train = load_chat_dataset(&cfg.paths.train, Split::Train)?;
    let augmented = augment_dataset(&train, &linker, &pkb)?;
    check_pkb(&augmented, &pkb, "augmented training split")?;
    save_chat_dataset(&augmented, &out(cfg, CHAT_AUGMENTED))
}

/// Chat models on the raw and on the augmented training split.
fn stage_train_chat(cfg: &PipelineConfig) -> Result<()> {
    let vocab = load_vocab(cfg)?;
    let raw = load_chat_dataset(&cfg.paths.train, Split::Train)?;
    let (m, report) = train_chat(&raw, vocab.clone(), &cfg.chat, None)?;
    save_checkpoint(&m, &out(cfg, CHAT_RAW))?;
    save_report(cfg, "chat_raw", &report)?;
    let augmented = load_chat_dataset(&out(cfg, CHAT_AUGMENTED), Split::Train)?;
    let (m, report) = train_chat(&augmented, vocab, &cfg.chat, None)?;
    save_checkpoint(&m, &out(cfg, CHAT_DEBIASED))?;
    save_report(cfg, "chat_debiased", &report)
}

fn keep_label(k: f64) -> String {
    format!("{:03}", (k * 100.0).round() as u32)
}

/// Writes the test candidate pools and returns them as read back.
pub fn write_pools(cfg: &PipelineConfig) -> Result<Vec<crate::retrieval::CandidatePool>> {
    let test = load_chat_dataset(&cfg.paths.test, Split::Test)?;
    let pools = build_candidate_pools(&test, cfg.eval.pool_size, cfg.seed)?;
    save_pools(&pools, &out(cfg, POOLS))?;
    load_pools(&out(cfg, POOLS))
}

fn save_reports(cfg: &PipelineConfig, reports: &ReportSet) -> Result<()> {
    let dir = out(cfg, REPORTS);
    std::fs::create_dir_all(&dir)?;
    for (name, r) in reports {
        r.save(&dir.join(format!("{name}.json")))?;
    }
    Ok(())
}

/// Response selection: raw and debiased models, then the black-box grid of
/// persona retention with linking off and on.
pub fn chat_reports(cfg: &PipelineConfig, oracles: &Oracles) -> Result<ReportSet> {
    let pkb = load_pkb(cfg)?;
    let test = load_chat_dataset(&cfg.paths.test, Split::Test)?;
    let pools = write_pools(cfg)?;
    let raw = load_checkpoint(&out(cfg, CHAT_RAW), Some(Role::Chat))?;
    let debiased = load_checkpoint(&out(cfg, CHAT_DEBIASED), Some(Role::Chat))?;
    let student = student_linker(cfg, oracles)?;
    let teacher;
    let blackbox = match cfg.eval.blackbox_linker {
        LinkerChoice::Student => &student,
        LinkerChoice::Teacher => {
            teacher = teacher_linker(cfg, &pkb)?;
            &teacher
        }
    };
    let nli = Some(oracles.nli.as_ref());
    let opts = |keep: f64| ChatEvalOptions {
        keep_fraction: keep,
        removal_seed: cfg.seed,
        context_tokens: cfg.chat.context_tokens,
        max_tokens: cfg.chat.max_tokens,
    };

    let mut reports = ReportSet::new();
    let mut record = |name: String, ev: super::eval::ChatEval| -> Result<()> {
        check_pkb(&ev.observed, &pkb, &name)?;
        reports.insert(name, ev.report);
        Ok(())
    };
    record("chat_raw".into(), eval_chat(&raw, &test, &pools, None, &opts(1.0), nli)?)?;
    record("chat_debiased".into(), eval_chat(&debiased, &test, &pools, Some(&student), &opts(1.0), nli)?)?;
    for &keep in &cfg.eval.keep_fractions {
        let k = keep_label(keep);
        record(format!("blackbox_keep{k}_off"), eval_chat(&raw, &test, &pools, None, &opts(keep), nli)?)?;
        record(format!("blackbox_keep{k}_on"), eval_chat(&raw, &test, &pools, Some(blackbox), &opts(keep), nli)?)?;
    }
    save_reports(cfg, &reports)?;
    Ok(reports)
}

/// Teacher, student and BM25 against the gold links; empty without a gold file.
pub fn link_reports(cfg: &PipelineConfig, oracles: &Oracles) -> Result<ReportSet> {
    let mut reports = ReportSet::new();
    let Some(path) = &cfg.paths.gold_links else {
        log::warn!("no gold links configured; skipping link evaluation");
        return Ok(reports);
    };
    let pkb = load_pkb(cfg)?;
    let student = student_linker(cfg, oracles)?;
    let teacher = teacher_linker(cfg, &pkb)?;
    let gold = load_gold_links(path)?;
    let counts = persona_train_counts(&LinkDataset::load(&out(cfg, LINKSET))?);
    let b = Some((&counts, &cfg.eval.buckets));
    reports.insert("link_teacher".into(), eval_link(&LinkRanker::BiEncoder(&teacher), &gold, b, cfg.eval.bucket_k, cfg.seed)?);
    reports.insert("link_student".into(), eval_link(&LinkRanker::BiEncoder(&student), &gold, b, cfg.eval.bucket_k, cfg.seed)?);
    let bm25 = LinkRanker::Bm25 { index: &teacher.index, k1: cfg.eval.bm25_k1, b: cfg.eval.bm25_b };
    reports.insert("link_bm25".into(), eval_link(&bm25, &gold, b, cfg.eval.bucket_k, cfg.seed)?);
    save_reports(cfg, &reports)?;
    Ok(reports)
}

/// Mean Jaccard of in-dialogue and out-dialogue positives on the train split.
pub fn bias_reports(cfg: &PipelineConfig, oracles: &Oracles) -> Result<ReportSet> {
    let pkb = load_pkb(cfg)?;
    let train = load_chat_dataset(&cfg.paths.train, Split::Train)?;
    let bias = analyze_bias(&train, &pkb, oracles.nli.as_ref(), cfg.link.side)?;
    let mut reports = ReportSet::new();
    for (name, side) in [("bias_in_dialogue", &bias.in_dialogue), ("bias_out_dialogue", &bias.out_dialogue)] {
        let report = EvalReport {
            mean_jaccard: Some(side.mean_jaccard),
            count: side.positives,
            seed: cfg.seed,
            config: json!({"task": "bias"}),
            ..EvalReport::default()
        };
        reports.insert(name.into(), report);
    }
    save_reports(cfg, &reports)?;
    Ok(reports)
}

fn stage_evaluate(cfg: &PipelineConfig, oracles: &Oracles) -> Result<ReportSet> {
    let mut reports = chat_reports(cfg, oracles)?;
    reports.extend(link_reports(cfg, oracles)?);
    reports.extend(bias_reports(cfg, oracles)?);
    Ok(reports)
}

/// Runs one stage, reading earlier stages' artifacts from the run directory.
pub fn run_stage(cfg: &PipelineConfig, oracles: &Oracles, stage: Stage) -> Result<Option<ReportSet>> {
    std::fs::create_dir_all(&cfg.paths.out_dir).map_err(|e| Error::from(e).in_stage(stage.name()))?;
    log::info!("stage {stage}");
    let res = match stage {
        Stage::BuildLinkdata => stage_build_linkdata(cfg, oracles).map(|_| None),
        Stage::Expand => stage_expand(cfg, oracles).map(|_| None),
        Stage::TrainTeacher => stage_train_teacher(cfg).map(|_| None),
        Stage::TrainStudent => stage_train_student(cfg).map(|_| None),
        Stage::IndexPkb => stage_index_pkb(cfg, oracles).map(|_| None),
        Stage::Augment => stage_augment(cfg, oracles).map(|_| None),
        Stage::TrainChat => stage_train_chat(cfg).map(|_| None),
        Stage::Evaluate => stage_evaluate(cfg, oracles).map(Some),
    };
    res.map_err(|e| e.in_stage(stage.name()))
}

/// Digest of every file under the run directory except the manifest itself.
/// Training reports are digested without their wall-clock field.
pub fn artifact_digests(out_dir: &Path) -> Result<BTreeMap<String, String>> {
    let mut files = Vec::new();
    let mut stack = vec![out_dir.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in std::fs::read_dir(&dir)? {
            let path = entry?.path();
            if path.is_dir() {
                stack.push(path);
            } else {
                files.push(path);
            }
        }
    }
    let mut out = BTreeMap::new();
    for path in files {
        let rel = path.strip_prefix(out_dir).expect("walked from out_dir").to_string_lossy().replace('\\', "/");
        if rel == MANIFEST {
            continue;
        }
        let digest = if rel.ends_with("_report.json") {
            let r: TrainReport = serde_json::from_slice(&std::fs::read(&path)?)?;
            r.stable_digest()
        } else {
            util::file_digest(&path)?
        };
        out.insert(rel, digest);
    }
    Ok(out)
}

pub fn write_manifest(cfg: &PipelineConfig, stages: &[Stage]) -> Result<Manifest> {
    let manifest = Manifest {
        seed: cfg.seed,
        config: cfg.clone(),
        stages: stages.iter().map(|s| s.name().to_string()).collect(),
        artifacts: artifact_digests(&cfg.paths.out_dir)?,
    };
    util::atomic_write(&out(cfg, MANIFEST), &serde_json::to_vec_pretty(&manifest)?)?;
    Ok(manifest)
}

/// Manifest after running `done` on top of whatever an earlier manifest in
/// the run directory recorded.
pub fn update_manifest(cfg: &PipelineConfig, done: &[Stage]) -> Result<Manifest> {
    let mut stages: Vec<Stage> = match std::fs::read(out(cfg, MANIFEST)) {
        Ok(bytes) => {
            let m: Manifest = serde_json::from_slice(&bytes)?;
            m.stages.iter().filter_map(|s| s.parse().ok()).collect()
        }
        Err(_) => Vec::new(),
    };
    stages.extend_from_slice(done);
    stages.sort();
    stages.dedup();
    write_manifest(cfg, &stages)
}

/// All stages in order, then the manifest.
pub fn run_pipeline(cfg: &PipelineConfig) -> Result<PipelineOutput> {
    cfg.validate()?;
    let oracles = cfg.oracles()?;
    let mut reports = ReportSet::new();
    for stage in Stage::ALL {
        if let Some(r) = run_stage(cfg, &oracles, stage)? {
            reports = r;
        }
    }
    let manifest = write_manifest(cfg, &Stage::ALL)?;
    Ok(PipelineOutput {
        augmented_chat: out(cfg, CHAT_AUGMENTED),
        chat_checkpoint: out(cfg, CHAT_DEBIASED),
        reports,
        manifest,
    })
}

/// Writes a generated corpus as `train.jsonl`, `dev.jsonl`, `test.jsonl`,
/// `lexicon.json` and `gold_links.jsonl` and returns a config pointing at
/// them with its run directory under `dir/run`.
pub fn write_synthetic(corpus: &super::SyntheticCorpus, dir: &Path) -> Result<PipelineConfig> {
    std::fs::create_dir_all(dir)?;
    save_chat_dataset(&corpus.train, &dir.join("train.jsonl"))?;
    save_chat_dataset(&corpus.dev, &dir.join("dev.jsonl"))?;
    save_chat_dataset(&corpus.test, &dir.join("test.jsonl"))?;
    corpus.lexicon.save(&dir.join("lexicon.json"))?;
    crate::linkdata::save_gold_links(&corpus.gold_links, &dir.join("gold_links.jsonl"))?;
    let mut cfg = PipelineConfig::new(super::config::Paths {
        train: dir.join("train.jsonl"),
        dev: Some(dir.join("dev.jsonl")),
        test: dir.join("test.jsonl"),
        lexicon: Some(dir.join("lexicon.json")),
        gold_links: Some(dir.join("gold_links.jsonl")),
        cache_dir: None,
        out_dir: dir.join("run"),
    });
    synthetic_training(&mut cfg);
    Ok(cfg)
}

/// Small-model settings that suit the synthetic corpus: the default
/// hyperparameters are sized for pretrained-scale runs.
pub fn synthetic_training(cfg: &mut PipelineConfig) {
    for c in [&mut cfg.teacher, &mut cfg.student, &mut cfg.chat] {
        c.learning_rate = 0.01;
        c.batch_size = 32;
        c.dim = 32;
        c.epochs = 10;
    }
    cfg.chat.epochs = 20;
    cfg.chat.context_tokens = 128;
}
