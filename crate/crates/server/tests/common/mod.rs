#![allow(dead_code)]

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::sync::Arc;

use objfind_core::associate::ProjectionHeads;
use objfind_core::catalog::DatasetCatalog;
use objfind_core::encoder::{Encoder, MockEncoder};
use objfind_core::index::{build_index, SearchIndex};
use objfind_core::synthetic::SyntheticCorpus;
use objfind_server::service::Engine;
use tempfile::TempDir;

pub const ASSET_BASE: &str = "https://assets.example.org/chairs";

pub fn fixture_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures/chairs20")
}

/// A scratch directory holding the 20-object fixture manifest and config.
pub fn workspace() -> TempDir {
    let dir = tempfile::tempdir().unwrap();
    for name in ["manifest.jsonl", "config.toml"] {
        fs::copy(fixture_dir().join(name), dir.path().join(name)).unwrap();
    }
    dir
}

pub fn objfind(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_objfind"))
        .arg("--config")
        .arg(dir.join("config.toml"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("spawn objfind")
}

pub fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

pub fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

pub const PIPELINE: [&[&str]; 6] = [&["ingest"], &["split"], &["label"], &["encode"], &["train"], &["index"]];

/// Runs ingest through index, panicking on the first failure.
pub fn run_pipeline(dir: &Path) {
    for args in PIPELINE {
        let o = objfind(dir, args);
        assert!(o.status.success(), "{args:?}: {}{}", stdout(&o), stderr(&o));
    }
}

/// Synthetic catalog, heads and index at production widths.
pub fn synthetic_parts(n: usize, seed: u64) -> (DatasetCatalog, SearchIndex, ProjectionHeads) {
    let corpus = SyntheticCorpus::standard(n, 0.05, seed);
    let heads = ProjectionHeads::random_standard(seed);
    let catalog = corpus.catalog();
    let index = build_index(&catalog, &corpus.bases(), &heads).unwrap();
    (catalog, index, heads)
}

pub fn synthetic_engine(n: usize, seed: u64) -> Engine {
    let (catalog, index, heads) = synthetic_parts(n, seed);
    let encoder: Arc<dyn Encoder> = Arc::new(MockEncoder::new(0));
    Engine::new(catalog, index, heads, encoder, ASSET_BASE).unwrap()
}

/// Writes a config that reads user-supplied tables for a labeled catalog.
pub fn precomputed_workspace(n: usize) -> tempfile::TempDir {
    let ws = tempfile::tempdir().unwrap();
    let dir = ws.path();
    let corpus = SyntheticCorpus::standard(n, 0.05, 11);
    let bases = corpus.bases();
    fs::create_dir(dir.join("user")).unwrap();
    bases.images.write_to(fs::File::create(dir.join("user/images.emb")).unwrap()).unwrap();
    bases.texts.write_to(fs::File::create(dir.join("user/texts.emb")).unwrap()).unwrap();
    fs::write(dir.join("catalog.json"), corpus.catalog().to_json()).unwrap();
    fs::write(
        dir.join("config.toml"),
        "[split]\ntrain_fraction = 0.8\n\n[encoder]\nkind = \"precomputed\"\nembedding_file = \"user/images.emb\"\ntext_embedding_file = \"user/texts.emb\"\n\n[train]\nepochs = 20\nwarmup_steps = 5\npeak_lr = 1.0\ntemperature = 0.07\n",
    )
    .unwrap();
    ws
}
