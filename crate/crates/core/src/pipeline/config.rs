use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use crate::corpus::{MatchMode, Side};
use crate::error::{Error, Result};
use crate::linkdata::ExpansionPolicy;
use crate::metrics::Buckets;
use crate::oracles::{CachedExpander, CachedNli, Expander, Lexicon, NliBackend, OracleCache, RemoteExpander, RemoteNli};
use crate::oracles::{StubExpander, StubNli};
use crate::retrieval::AugmentPolicy;
use crate::training::TrainConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Paths {
    pub train: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dev: Option<PathBuf>,
    pub test: PathBuf,
    /// Required by the stub oracles.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lexicon: Option<PathBuf>,
    /// Gold utterance → persona links for link evaluation.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gold_links: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cache_dir: Option<PathBuf>,
    pub out_dir: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Backend {
    #[default]
    Stub,
    Remote,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct OracleConfig {
    #[serde(default)]
    pub backend: Backend,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub nli_url: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub expander_url: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinkBuildConfig {
    #[serde(default = "d_mode")]
    pub mode: MatchMode,
    #[serde(default)]
    pub side: Side,
    #[serde(default = "d_one")]
    pub neg_ratio: f64,
}

fn d_mode() -> MatchMode {
    MatchMode::OutDialogue
}
fn d_one() -> f64 {
    1.0
}

impl Default for LinkBuildConfig {
    fn default() -> Self {
        LinkBuildConfig { mode: d_mode(), side: Side::AgentOnly, neg_ratio: 1.0 }
    }
}

/// Which link model supplies test-time personas in the black-box runs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LinkerChoice {
    #[default]
    Student,
    Teacher,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    pub pool_size: usize,
    /// Persona retention levels for the black-box runs.
    pub keep_fractions: Vec<f64>,
    pub blackbox_linker: LinkerChoice,
    pub buckets: Buckets,
    /// k of the bucketed link recall.
    pub bucket_k: usize,
    pub bm25_k1: f64,
    pub bm25_b: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            pool_size: 20,
            keep_fractions: vec![0.0, 0.8],
            blackbox_linker: LinkerChoice::Student,
            buckets: Buckets::default(),
            bucket_k: 10,
            bm25_k1: 1.2,
            bm25_b: 0.75,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineConfig {
    pub paths: Paths,
    #[serde(default)]
    pub oracle: OracleConfig,
    #[serde(default)]
    pub link: LinkBuildConfig,
    #[serde(default)]
    pub expansion: ExpansionPolicy,
    #[serde(default)]
    pub teacher: TrainConfig,
    #[serde(default)]
    pub student: TrainConfig,
    #[serde(default)]
    pub chat: TrainConfig,
    #[serde(default)]
    pub augment: AugmentPolicy,
    #[serde(default)]
    pub eval: EvalConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pkb_cap: Option<usize>,
    /// Seed for negative sampling, pools, persona removal and the PKB cap.
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "d_min_count")]
    pub vocab_min_count: usize,
}

fn d_min_count() -> usize {
    1
}

impl PipelineConfig {
    /// Defaults everywhere except the paths.
    pub fn new(paths: Paths) -> Self {
        PipelineConfig {
            paths,
            oracle: OracleConfig::default(),
            link: LinkBuildConfig::default(),
            expansion: ExpansionPolicy::default(),
            teacher: TrainConfig::default(),
            student: TrainConfig::default(),
            chat: TrainConfig::default(),
            augment: AugmentPolicy::default(),
            eval: EvalConfig::default(),
            pkb_cap: None,
            seed: 0,
            vocab_min_count: 1,
        }
    }

    /// Reads JSON; relative paths are taken relative to the file's directory.
    pub fn load(path: &Path) -> Result<Self> {
        let mut cfg: PipelineConfig = serde_json::from_slice(&std::fs::read(path)?)?;
        if let Some(base) = path.parent() {
            cfg.paths.rebase(base);
        }
        Ok(cfg)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        crate::util::atomic_write(path, &serde_json::to_vec_pretty(self)?)
    }

    /// One seed for everything: sampling, pools and every model.
    pub fn set_seed(&mut self, seed: u64) {
        self.seed = seed;
        self.teacher.seed = seed;
        self.student.seed = seed;
        self.chat.seed = seed;
    }

    pub fn validate(&self) -> Result<()> {
        let p = &self.paths;
        let mut required = vec![&p.train, &p.test];
        required.extend(p.dev.iter());
        required.extend(p.gold_links.iter());
        required.extend(p.lexicon.iter());
        for path in required {
            if !path.exists() {
                return Err(Error::invalid(format!("path `{}` does not exist", path.display())));
            }
        }
        match self.oracle.backend {
            Backend::Stub if p.lexicon.is_none() => return Err(Error::invalid("the stub oracles need paths.lexicon")),
            Backend::Remote if self.oracle.nli_url.is_none() || self.oracle.expander_url.is_none() => {
                return Err(Error::invalid("the remote oracles need nli_url and expander_url"))
            }
            _ => {}
        }
        if self.eval.pool_size < 2 {
            return Err(Error::invalid("pool size must be at least 2"));
        }
        if self.eval.keep_fractions.iter().any(|k| !(0.0..=1.0).contains(k)) {
            return Err(Error::invalid("keep fractions must lie in [0, 1]"));
        }
        if !(self.link.neg_ratio > 0.0) {
            return Err(Error::invalid("neg_ratio must be positive"));
        }
        if self.pkb_cap == Some(0) {
            return Err(Error::invalid("pkb_cap must be positive"));
        }
        for c in [&self.teacher, &self.student, &self.chat] {
            c.validate()?;
        }
        Ok(())
    }

    /// Builds the configured oracles, wrapped in the result cache when a
    /// cache directory is set.
    pub fn oracles(&self) -> Result<Oracles> {
        let (nli, expander): (Arc<dyn NliBackend>, Arc<dyn Expander>) = match self.oracle.backend {
            Backend::Stub => {
                let path = self.paths.lexicon.as_ref().ok_or_else(|| Error::invalid("the stub oracles need paths.lexicon"))?;
                let lex = Lexicon::load(path)?;
                match &self.paths.cache_dir {
                    Some(dir) => {
                        let cache = OracleCache::new(dir)?;
                        (Arc::new(CachedNli::new(StubNli::new(&lex), cache.clone())), Arc::new(CachedExpander::new(StubExpander::new(&lex), cache)))
                    }
                    None => (Arc::new(StubNli::new(&lex)), Arc::new(StubExpander::new(&lex))),
                }
            }
            Backend::Remote => {
                let nli = RemoteNli::new(self.oracle.nli_url.as_deref().unwrap_or_default())?;
                let ex = RemoteExpander::new(self.oracle.expander_url.as_deref().unwrap_or_default())?;
                match &self.paths.cache_dir {
                    Some(dir) => {
                        let cache = OracleCache::new(dir)?;
                        (Arc::new(CachedNli::new(nli, cache.clone())), Arc::new(CachedExpander::new(ex, cache)))
                    }
                    None => (Arc::new(nli), Arc::new(ex)),
                }
            }
        };
        Ok(Oracles { nli, expander })
    }
}

impl Paths {
    fn rebase(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        fix(&mut self.train);
        fix(&mut self.test);
        fix(&mut self.out_dir);
        for p in [&mut self.dev, &mut self.lexicon, &mut self.gold_links, &mut self.cache_dir].into_iter().flatten() {
            fix(p);
        }
    }
}

#[derive(Clone)]
pub struct Oracles {
    pub nli: Arc<dyn NliBackend>,
    pub expander: Arc<dyn Expander>,
}
