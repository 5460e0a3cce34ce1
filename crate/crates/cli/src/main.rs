use std::net::SocketAddr;
use std::path::PathBuf;

use anyhow::Result;
use clap::{Args, Parser, Subcommand};

use semsplat_cli::commands::{self, IngestArgs, MetricsArgs, QueryArgs, RenderArgs, SynthArgs, TrainArgs};
use semsplat_cli::service;

#[derive(Parser)]
#[command(name = "semsplat", version, about = "Semantic Gaussian splatting pipeline")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ServeArgs {
    #[arg(long)]
    project: PathBuf,
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long, default_value = "127.0.0.1:8080")]
    bind: SocketAddr,
    /// Directory of a built web viewer, served at `/`.
    #[arg(long)]
    static_dir: Option<PathBuf>,
}



#[derive(Subcommand)]
enum Command {
    /// Import a COLMAP sparse model into a project.
    Ingest(IngestArgs),
    /// Generate a synthetic project with known ground truth.
    Synth(SynthArgs),
    /// Train the Gaussian scene against images and feature maps.
    Train(TrainArgs),
    /// Render one view of a trained scene.
    Render(RenderArgs),
    /// Run a text-embedding query against a rendered view.
    Query(QueryArgs),
    /// Score held-out views.
    Metrics(MetricsArgs),
    /// Serve the query API over HTTP.
    Serve(ServeArgs),
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match Cli::parse().command {
        Command::Ingest(a) => {
            let m = commands::ingest(&a)?;
            println!("{} train / {} test views ({})", m.num_train, m.num_test, m.split_rule);
        }
        Command::Synth(a) => {
            let m = commands::synth(&a)?;
            println!("wrote {} views to {}", m.views.len(), a.project.display());
        }
        Command::Train(a) => {
            let s = commands::train_cmd(&a)?;
            println!(
                "{} gaussians, final loss {}, checkpoint {}",
                s.num_gaussians,
                s.final_loss.map_or("n/a".into(), |l| format!("{l:.6}")),
                s.checkpoint.display()
            );
        }
        Command::Render(a) => {
            for p in commands::render_cmd(&a)? {
                println!("{}", p.display());
            }
        }
        Command::Query(mut a) => {
            a.prompt = commands::resolve_prompt(&a.project, &a.prompt);
            let out = commands::query_cmd(&a)?;
            println!("{}", out.point.to_json());
        }
        Command::Metrics(a) => {
            let (_, path) = commands::metrics_cmd(&a)?;
            print!("{}", std::fs::read_to_string(&path)?);
        }
        Command::Serve(a) => {
            let state = service::AppState::load(&a.project, a.checkpoint.as_deref())?;
            let rt = tokio::runtime::Runtime::new()?;
            rt.block_on(service::serve(state, a.bind, a.static_dir))?;
        }
    }
    Ok(())
}
