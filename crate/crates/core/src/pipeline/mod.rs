//! End-to-end orchestration, evaluation harnesses and synthetic corpora.

pub mod config;
pub mod eval;
pub mod run;
pub mod synth;

pub use synth::{gen_synthetic_corpus, ConceptBank, SyntheticCorpus, SyntheticSpec};
pub use eval::{analyze_bias, eval_chat, eval_link, persona_train_counts, BiasReport, ChatEval, ChatEvalOptions, LinkRanker};
pub use config::{PipelineConfig, Paths};
pub use run::{
    bias_reports, chat_reports, link_reports, run_pipeline, run_stage, synthetic_training, update_manifest, write_manifest, write_pools,
    write_synthetic, Manifest, PipelineOutput, Stage,
};
