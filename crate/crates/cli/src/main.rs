use clap::{Args, Parser, Subcommand};
use std::io::{BufRead, Write};
use std::path::PathBuf;
use std::process::ExitCode;

use personalink::pipeline::{
    bias_reports, chat_reports, gen_synthetic_corpus, link_reports, run_pipeline, run_stage, update_manifest, write_pools,
    write_synthetic, PipelineConfig, Stage, SyntheticSpec,
};
use personalink::service::{CreateRequest, EntryKind};
use personalink::Error;
use personalink_server::{load_engine, ServeOpts};

#[derive(Parser)]
#[command(name = "personalink", version, about = "Persona linking and dataset debiasing for persona-grounded chat")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args, Clone)]
struct Common {
    /// Pipeline config (JSON).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides every seed in the config.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Run directory; for gen-synth, where the corpus goes.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a synthetic corpus, lexicon, gold links and a config.
    GenSynth(SynthArgs),
    /// Training PKB and the NLI-filtered seed link set.
    BuildLinkdata,
    /// Commonsense expansion of the link set; builds the vocabulary.
    Expand,
    /// Teacher link model on the seed link set.
    TrainLink,
    /// Soft labels from the teacher, then the student on expanded data.
    TrainStudent,
    /// Student embeddings of the PKB.
    IndexPkb,
    /// Link personas into the training split.
    Augment,
    /// Chat models on the raw and the augmented training split.
    TrainChat,
    /// Response selection reports.
    EvalChat,
    /// Link reports against the gold links.
    EvalLink,
    /// Lexical overlap of in- and out-dialogue positives.
    AnalyzeBias,
    /// Test candidate pools.
    Pools,
    /// HTTP session API.
    Serve(ServeArgs),
    /// Interactive terminal chat.
    Chat(ChatArgs),
    /// Every stage, then the manifest.
    RunAll,
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long)]
    train_episodes: Option<usize>,
    #[arg(long)]
    dev_episodes: Option<usize>,
    #[arg(long)]
    test_episodes: Option<usize>,
    #[arg(long)]
    personas_per_episode: Option<usize>,
    #[arg(long)]
    hidden_personas: Option<usize>,
    #[arg(long)]
    agent_turns: Option<usize>,
    /// Probability that an agent turn copies its persona.
    #[arg(long)]
    beta: Option<f64>,
}

#[derive(Args, Clone)]
struct ModelPaths {
    #[arg(long)]
    chat_ckpt: Option<PathBuf>,
    #[arg(long)]
    link_ckpt: Option<PathBuf>,
    #[arg(long)]
    pkb_index: Option<PathBuf>,
    #[arg(long)]
    response_bank: Option<PathBuf>,
    #[arg(long)]
    lexicon: Option<PathBuf>,
    #[arg(long)]
    bank_cap: Option<usize>,
    #[arg(long)]
    context_tokens: Option<usize>,
    #[arg(long)]
    query_includes_user: bool,
}

#[derive(Args)]
struct ServeArgs {
    #[command(flatten)]
    models: ModelPaths,
    #[arg(long, default_value_t = 8080)]
    port: u16,
    #[arg(long, default_value = "127.0.0.1")]
    host: String,
    #[arg(long)]
    cors_origin: Option<String>,
    #[arg(long)]
    static_dir: Option<PathBuf>,
}

#[derive(Args)]
struct ChatArgs {
    #[command(flatten)]
    models: ModelPaths,
    /// Persona sentence; repeatable.
    #[arg(long = "persona")]
    personas: Vec<String>,
    /// Persona id from the index; repeatable.
    #[arg(long = "persona-id")]
    persona_ids: Vec<String>,
    #[arg(long, default_value_t = 1.0)]
    keep_fraction: f64,
    #[arg(long)]
    no_augment: bool,
}

enum Failure {
    Usage(String),
    Core(Error),
    Other(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Core(e)
    }
}

type CliResult<T> = Result<T, Failure>;

fn usage<T>(msg: impl Into<String>) -> CliResult<T> {
    Err(Failure::Usage(msg.into()))
}

fn load_config(c: &Common) -> CliResult<PipelineConfig> {
    let Some(path) = &c.config else {
        return usage("this command needs --config");
    };
    let mut cfg = PipelineConfig::load(path)?;
    if let Some(out) = &c.out {
        cfg.paths.out_dir = out.clone();
    }
    if let Some(seed) = c.seed {
        cfg.set_seed(seed);
    }
    cfg.validate()?;
    Ok(cfg)
}

fn print_json(v: &serde_json::Value) -> CliResult<()> {
    println!("{}", serde_json::to_string_pretty(v).map_err(Error::from)?);
    Ok(())
}

fn stage(c: &Common, st: Stage) -> CliResult<()> {
    let cfg = load_config(c)?;
    let oracles = cfg.oracles()?;
    run_stage(&cfg, &oracles, st)?;
    update_manifest(&cfg, &[st])?;
    eprintln!("{st} done in {}", cfg.paths.out_dir.display());
    Ok(())
}

fn gen_synth(c: &Common, a: &SynthArgs) -> CliResult<()> {
    let Some(dir) = &c.out else {
        return usage("gen-synth needs --out");
    };
    let mut spec = SyntheticSpec::default();
    let set = |dst: &mut usize, v: Option<usize>| {
        if let Some(v) = v {
            *dst = v;
        }
    };
    set(&mut spec.train_episodes, a.train_episodes);
    set(&mut spec.dev_episodes, a.dev_episodes);
    set(&mut spec.test_episodes, a.test_episodes);
    set(&mut spec.personas_per_episode, a.personas_per_episode);
    set(&mut spec.hidden_personas, a.hidden_personas);
    set(&mut spec.agent_turns, a.agent_turns);
    if let Some(b) = a.beta {
        spec.beta = b;
    }
    spec.seed = c.seed.unwrap_or(0);
    let corpus = gen_synthetic_corpus(&spec)?;
    let mut cfg = write_synthetic(&corpus, dir)?;
    cfg.set_seed(spec.seed);
    let path = dir.join("config.json");
    cfg.save(&path)?;
    std::fs::write(dir.join("spec.json"), serde_json::to_vec_pretty(&spec).map_err(Error::from)?).map_err(Error::from)?;
    println!("{}", path.display());
    Ok(())
}

fn serve_opts(c: &Common, m: &ModelPaths) -> CliResult<(ServeOpts, Option<PipelineConfig>)> {
    let cfg = if c.config.is_some() { Some(load_config(c)?) } else { None };
    let run = cfg.as_ref().map(|c| c.paths.out_dir.clone()).or_else(|| c.out.clone());
    let pick = |given: &Option<PathBuf>, name: &str, flag: &str| -> CliResult<PathBuf> {
        match (given, &run) {
            (Some(p), _) => Ok(p.clone()),
            (None, Some(dir)) => Ok(dir.join(name)),
            (None, None) => usage(format!("{flag} is required without --config or --out")),
        }
    };
    let bank = match (&m.response_bank, &cfg) {
        (Some(p), _) => p.clone(),
        (None, Some(c)) => c.paths.train.clone(),
        (None, None) => return usage("--response-bank is required without --config"),
    };
    let pkb = run.as_ref().map(|d| d.join("pkb.json")).filter(|p| p.exists());
    let opts = ServeOpts {
        chat_ckpt: pick(&m.chat_ckpt, "chat_debiased.ckpt", "--chat-ckpt")?,
        link_ckpt: pick(&m.link_ckpt, "student.ckpt", "--link-ckpt")?,
        pkb_index: pick(&m.pkb_index, "pkb_index.json", "--pkb-index")?,
        response_bank: bank,
        port: 8080,
        host: "127.0.0.1".into(),
        pkb,
        lexicon: m.lexicon.clone().or_else(|| cfg.as_ref().and_then(|c| c.paths.lexicon.clone())),
        bank_cap: m.bank_cap,
        context_tokens: m.context_tokens,
        query_includes_user: m.query_includes_user,
        cors_origin: None,
        static_dir: None,
    };
    Ok((opts, cfg))
}

fn serve(c: &Common, a: &ServeArgs) -> CliResult<()> {
    let (mut opts, cfg) = serve_opts(c, &a.models)?;
    opts.port = a.port;
    opts.host = a.host.clone();
    opts.cors_origin = a.cors_origin.clone();
    opts.static_dir = a.static_dir.clone();
    let rt = tokio::runtime::Runtime::new().map_err(|e| Failure::Other(e.to_string()))?;
    rt.block_on(personalink_server::serve(opts, cfg)).map_err(|e| match e.downcast::<Error>() {
        Ok(core) => Failure::Core(*core),
        Err(other) => Failure::Other(other.to_string()),
    })
}

fn chat(c: &Common, a: &ChatArgs) -> CliResult<()> {
    let (opts, cfg) = serve_opts(c, &a.models)?;
    let engine = load_engine(&opts, cfg.as_ref())?;
    let req = CreateRequest {
        persona_ids: a.persona_ids.clone(),
        persona_texts: a.personas.clone(),
        keep_fraction: a.keep_fraction,
        augmentation: !a.no_augment,
        seed: c.seed.unwrap_or(0),
        ..Default::default()
    };
    let mut session = engine.create("repl".into(), &req, chrono::Utc::now())?;
    eprintln!("type a message; :profile, :aug on|off, :quit");
    let stdin = std::io::stdin();
    let mut out = std::io::stdout();
    loop {
        print!("you> ");
        let _ = out.flush();
        let mut line = String::new();
        if stdin.lock().read_line(&mut line).map_err(Error::from)? == 0 {
            break;
        }
        match line.trim() {
            "" => continue,
            ":quit" | ":q" => break,
            ":profile" => {
                for p in &session.profile {
                    let kind = match p.kind {
                        EntryKind::Original => " ",
                        EntryKind::Removed => "-",
                        EntryKind::Augmented => "+",
                    };
                    match p.score {
                        Some(s) => println!("{kind} {} ({s:.3})", p.text),
                        None => println!("{kind} {}", p.text),
                    }
                }
            }
            ":aug on" => session.augmentation = true,
            ":aug off" => session.augmentation = false,
            text => {
                let r = engine.post_user_turn(&mut session, text)?;
                println!("bot> {}", r.response);
                for p in &r.newly_augmented {
                    println!("  + {} ({:.3})", p.text, p.score.unwrap_or(f64::NAN));
                }
            }
        }
    }
    Ok(())
}

fn summarize(reports: &personalink::pipeline::eval::ReportSet) {
    for (name, r) in reports {
        let f = |x: Option<f64>| x.map(|v| format!("{v:.4}")).unwrap_or_else(|| "-".into());
        println!("{name:<24} r@1 {}  r@10 {}  mrr {}  jaccard {}  n {}", f(r.r_at_1), f(r.r_at_10), f(r.mrr), f(r.mean_jaccard), r.count);
    }
}

fn run(cli: Cli) -> CliResult<()> {
    let c = &cli.common;
    match &cli.cmd {
        Cmd::GenSynth(a) => gen_synth(c, a),
        Cmd::BuildLinkdata => stage(c, Stage::BuildLinkdata),
        Cmd::Expand => stage(c, Stage::Expand),
        Cmd::TrainLink => stage(c, Stage::TrainTeacher),
        Cmd::TrainStudent => stage(c, Stage::TrainStudent),
        Cmd::IndexPkb => stage(c, Stage::IndexPkb),
        Cmd::Augment => stage(c, Stage::Augment),
        Cmd::TrainChat => stage(c, Stage::TrainChat),
        Cmd::EvalChat | Cmd::EvalLink | Cmd::AnalyzeBias => {
            let cfg = load_config(c)?;
            let oracles = cfg.oracles()?;
            let reports = match cli.cmd {
                Cmd::EvalChat => chat_reports(&cfg, &oracles),
                Cmd::EvalLink => link_reports(&cfg, &oracles),
                _ => bias_reports(&cfg, &oracles),
            }
            .map_err(|e| e.in_stage(Stage::Evaluate.name()))?;
            update_manifest(&cfg, &[])?;
            summarize(&reports);
            Ok(())
        }
        Cmd::Pools => {
            let cfg = load_config(c)?;
            let pools = write_pools(&cfg)?;
            update_manifest(&cfg, &[])?;
            println!("{} pools of {} in {}", pools.len(), cfg.eval.pool_size, cfg.paths.out_dir.join("pools_test.jsonl").display());
            Ok(())
        }
        Cmd::Serve(a) => serve(c, a),
        Cmd::Chat(a) => chat(c, a),
        Cmd::RunAll => {
            let cfg = load_config(c)?;
            let out = run_pipeline(&cfg)?;
            summarize(&out.reports);
            print_json(&serde_json::json!({
                "augmented_chat": out.augmented_chat,
                "chat_checkpoint": out.chat_checkpoint,
                "manifest": cfg.paths.out_dir.join("manifest.json"),
            }))
        }
    }
}

fn exit_for(f: Failure) -> ExitCode {
    match f {
        Failure::Usage(m) => {
            eprintln!("usage error: {m}");
            ExitCode::from(1)
        }
        Failure::Core(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
        Failure::Other(m) => {
            eprintln!("error: {m}");
            ExitCode::from(2)
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => exit_for(f),
    }
}
