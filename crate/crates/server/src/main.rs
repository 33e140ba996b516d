use clap::Parser;
use std::path::PathBuf;

use personalink::pipeline::PipelineConfig;
use personalink_server::{serve, ServeOpts};

#[derive(Parser)]
#[command(name = "personalink-server", about = "Chat session API with live persona linking")]
struct Cli {
    #[command(flatten)]
    opts: ServeOpts,
    /// Pipeline config supplying token budgets, link policy and oracles.
    #[arg(long)]
    config: Option<PathBuf>,
}

#[tokio::main]
async fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let cfg = match cli.config.as_deref().map(PipelineConfig::load).transpose() {
        Ok(c) => c,
        Err(e) => {
            eprintln!("error: {e}");
            std::process::exit(e.exit_code());
        }
    };
    if let Err(e) = serve(cli.opts, cfg).await {
        eprintln!("error: {e}");
        let code = e.downcast_ref::<personalink::Error>().map(|e| e.exit_code()).unwrap_or(3);
        std::process::exit(code);
    }
}
