//! Command-line front end: one subcommand per pipeline stage.

use std::io::Write;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use objfind_core::eval::EvalSplit;
use objfind_core::labeler::PromptKind;

use crate::config::{PipelineConfig, ServiceConfig};
use crate::pipeline::{self, Ctx, EvalArgs, HeadsChoice, StageError};
use crate::service::{self, AppState};

#[derive(Debug, Parser)]
#[command(name = "objfind", version, about = "Label, associate and search 3D object collections")]
pub struct Cli {
    #[command(flatten)]
    pub global: GlobalArgs,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct GlobalArgs {
    /// Pipeline configuration file (TOML).
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Overrides the split and training seeds.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Validate inputs and report what would be written, without writing.
    #[arg(long, global = true)]
    pub dry_run: bool,
    /// Redo work even when outputs are up to date.
    #[arg(long, global = true)]
    pub force: bool,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Read a capture manifest into a catalog.
    Ingest {
        #[arg(long)]
        manifest: Option<PathBuf>,
    },
    /// Assign objects to train and validation splits.
    Split {
        #[arg(long)]
        train_fraction: Option<f64>,
    },
    /// Describe every object with the vision-language backend.
    Label {
        #[arg(long)]
        kind: Option<PromptKind>,
    },
    /// Compute base image and text embeddings.
    Encode,
    /// Train the projection heads.
    Train,
    /// Project every object and write the search index.
    Index,
    /// Self-retrieval MRR and top-k accuracy.
    Eval {
        #[arg(long, default_value = "complete")]
        split: EvalSplit,
        #[arg(long, default_value = "model")]
        model_tag: String,
        #[arg(long)]
        visual_focus: Option<f64>,
        /// Evaluate these heads instead of the trained ones.
        #[arg(long, conflicts_with = "identity_heads")]
        heads: Option<PathBuf>,
        /// Evaluate untrained identity heads (baseline).
        #[arg(long)]
        identity_heads: bool,
        /// Also write the report as JSON.
        #[arg(long)]
        json: Option<PathBuf>,
    },
    /// Export the text-image similarity matrix as a grayscale image.
    Heatmap {
        #[arg(long)]
        limit: Option<usize>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Text search over the index.
    Search {
        #[arg(long)]
        query: String,
        #[arg(long, default_value_t = service::DEFAULT_K)]
        k: usize,
        #[arg(long, default_value_t = service::DEFAULT_VISUAL_FOCUS)]
        visual_focus: f64,
        #[arg(long)]
        json: bool,
    },
    /// Objects that look like a given one.
    SearchSimilar {
        #[arg(long)]
        id: String,
        #[arg(long, default_value_t = service::DEFAULT_K)]
        k: usize,
        #[arg(long)]
        json: bool,
    },
    /// Run the HTTP API.
    Serve {
        #[arg(long)]
        bind: Option<String>,
    },
}

fn load_config(global: &GlobalArgs) -> Result<PipelineConfig, StageError> {
    let mut config = PipelineConfig::load(global.config.as_deref()).map_err(|e| StageError::validation(e.to_string()))?;
    if let Some(seed) = global.seed {
        config.split.seed = seed;
        config.train.seed = seed;
    }
    config.validate().map_err(|e| StageError::validation(e.to_string()))?;
    Ok(config)
}

/// Runs one subcommand, writing progress to `out`.
pub fn run(cli: Cli, out: &mut dyn Write) -> Result<(), StageError> {
    let config = load_config(&cli.global)?;
    if let Command::Serve { bind } = &cli.command {
        return serve(config, bind.clone(), cli.global.dry_run, out);
    }
    let mut ctx = Ctx {
        config,
        force: cli.global.force,
        dry_run: cli.global.dry_run,
        out,
    };
    match cli.command {
        Command::Ingest { manifest } => pipeline::ingest(&mut ctx, manifest.as_deref()),
        Command::Split { train_fraction } => pipeline::split(&mut ctx, train_fraction),
        Command::Label { kind } => pipeline::label(&mut ctx, kind),
        Command::Encode => pipeline::encode(&mut ctx),
        Command::Train => pipeline::train(&mut ctx),
        Command::Index => pipeline::index(&mut ctx),
        Command::Eval {
            split,
            model_tag,
            visual_focus,
            heads,
            identity_heads,
            json,
        } => {
            let heads = match (heads, identity_heads) {
                (Some(path), _) => HeadsChoice::File(path),
                (None, true) => HeadsChoice::Identity,
                (None, false) => HeadsChoice::Trained,
            };
            let args = EvalArgs {
                split,
                model_tag,
                visual_focus,
                heads,
                json,
            };
            pipeline::evaluate(&mut ctx, &args).map(|_| ())
        }
        Command::Heatmap { limit, out } => pipeline::heatmap(&mut ctx, limit, out),
        Command::Search {
            query,
            k,
            visual_focus,
            json,
        } => pipeline::search(&mut ctx, &query, k, visual_focus, json).map(|_| ()),
        Command::SearchSimilar { id, k, json } => pipeline::search_similar(&mut ctx, &id, k, json).map(|_| ()),
        Command::Serve { .. } => unreachable!("handled above"),
    }
}

fn serve(config: PipelineConfig, bind: Option<String>, dry_run: bool, out: &mut dyn Write) -> Result<(), StageError> {
    let mut service_config = ServiceConfig::from_pipeline(&config);
    service_config
        .apply_env(|k| std::env::var(k).ok())
        .map_err(|e| StageError::validation(e.to_string()))?;
    if let Some(b) = bind {
        service_config.bind = b;
    }
    let missing = service_config.missing_paths();
    if !missing.is_empty() {
        let names: Vec<String> = missing.iter().map(|p| p.display().to_string()).collect();
        return Err(StageError::prerequisite(format!("cannot serve, missing: {}", names.join(", "))));
    }
    let (state, err) = AppState::from_config(service_config.clone());
    if let Some(e) = err {
        return Err(StageError::validation(format!("cannot load artifacts: {e}")));
    }
    if dry_run {
        writeln!(out, "serve: artifacts load; would listen on {}", service_config.bind)?;
        return Ok(());
    }
    let runtime = tokio::runtime::Runtime::new()?;
    runtime.block_on(service::serve(state, &service_config.bind))?;
    Ok(())
}
