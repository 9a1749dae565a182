use clap::Parser;
use notesearch_service::cli::{run, Cli};

fn main() -> anyhow::Result<()> {
    // NOTESEARCH_LOG takes a level name: error, warn, info, debug or trace
    let level = std::env::var("NOTESEARCH_LOG").ok().and_then(|l| l.parse().ok()).unwrap_or(tracing::Level::INFO);
    tracing_subscriber::fmt().with_max_level(level).with_writer(std::io::stderr).init();
    run(Cli::parse())
}
