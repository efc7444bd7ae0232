//! Pipeline stages behind the CLI subcommands.
//!
//! Each stage reads its prerequisites from disk, refuses inputs produced
//! under a different configuration, skips work whose output is already up to
//! date, and writes its artifact atomically.

use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{BufReader, Write};
use std::path::{Path, PathBuf};

use objfind_core::associate::{self, AssociateError, BaseEmbeddings, ProjectionHeads};
use objfind_core::catalog::{assign_splits, ingest_manifest, DatasetCatalog};
use objfind_core::digest::json_digest;
use objfind_core::embfile::EmbeddingTable;
use objfind_core::encoder::{encoder_from_config, Encoder, EncoderError};
use objfind_core::eval::{self, EvalError, EvalOptions, EvalSplit, MetricsReport};
use objfind_core::index::{build_index, IndexError, RankedResult, SearchIndex, SearchQuery};
use objfind_core::labeler::{
    builtin_template, vlm_from_config, Labeler, PromptKind, PromptTemplate, SystemClock, WhitespaceCounter,
};
use objfind_core::{IMAGE_DIM, SHARED_DIM, TEXT_DIM};
use serde::Serialize;

use crate::config::PipelineConfig;

/// Process exit statuses.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ExitKind {
    Other = 1,
    Validation = 2,
    Backend = 3,
    Prerequisite = 4,
}

#[derive(Debug)]
pub struct StageError {
    pub kind: ExitKind,
    pub message: String,
}

impl std::fmt::Display for StageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.message)
    }
}

impl std::error::Error for StageError {}

impl StageError {
    pub fn validation(message: impl Into<String>) -> Self {
        Self {
            kind: ExitKind::Validation,
            message: message.into(),
        }
    }

    pub fn backend(message: impl Into<String>) -> Self {
        Self {
            kind: ExitKind::Backend,
            message: message.into(),
        }
    }

    pub fn prerequisite(message: impl Into<String>) -> Self {
        Self {
            kind: ExitKind::Prerequisite,
            message: message.into(),
        }
    }

    pub fn other(message: impl Into<String>) -> Self {
        Self {
            kind: ExitKind::Other,
            message: message.into(),
        }
    }

    pub fn code(&self) -> i32 {
        self.kind as i32
    }
}

impl From<std::io::Error> for StageError {
    fn from(e: std::io::Error) -> Self {
        Self::other(format!("io: {e}"))
    }
}

impl From<EncoderError> for StageError {
    fn from(e: EncoderError) -> Self {
        match e {
            EncoderError::Config(_) => Self::validation(format!("encoder: {e}")),
            _ => Self::backend(format!("encoder: {e}")),
        }
    }
}

impl From<IndexError> for StageError {
    fn from(e: IndexError) -> Self {
        match e {
            IndexError::Encoder(inner) => inner.into(),
            IndexError::MissingEmbeddings(_) => Self::prerequisite(e.to_string()),
            IndexError::File(_) => Self::other(e.to_string()),
            _ => Self::validation(e.to_string()),
        }
    }
}

impl From<EvalError> for StageError {
    fn from(e: EvalError) -> Self {
        match e {
            EvalError::Index(inner) => inner.into(),
            EvalError::Unlabeled(_) | EvalError::NotIndexed(_) => Self::prerequisite(e.to_string()),
            EvalError::Io(_) | EvalError::Dump(_) => Self::other(e.to_string()),
            _ => Self::validation(e.to_string()),
        }
    }
}

impl From<AssociateError> for StageError {
    fn from(e: AssociateError) -> Self {
        match e {
            AssociateError::MissingEmbeddings(_) | AssociateError::Catalog(_) => Self::prerequisite(e.to_string()),
            AssociateError::Io(_) => Self::other(e.to_string()),
            _ => Self::validation(e.to_string()),
        }
    }
}

/// Global flags and the output sink shared by all stages.
pub struct Ctx<'a> {
    pub config: PipelineConfig,
    pub force: bool,
    pub dry_run: bool,
    pub out: &'a mut dyn Write,
}

macro_rules! say {
    ($ctx:expr, $($arg:tt)*) => {
        writeln!($ctx.out, $($arg)*)?
    };
}

/// Writes through a sibling temp file and renames it into place; the temp
/// file is removed if writing fails.
pub fn write_atomic(path: &Path, write: impl FnOnce(&mut File) -> Result<(), StageError>) -> Result<(), StageError> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    let name = path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
    let tmp = path.with_file_name(format!(".{name}.tmp-{}", std::process::id()));
    let result = (|| {
        let mut file = File::create(&tmp)?;
        write(&mut file)?;
        file.sync_all()?;
        fs::rename(&tmp, path)?;
        Ok(())
    })();
    if result.is_err() {
        let _ = fs::remove_file(&tmp);
    }
    result
}

fn require(path: &Path, produced_by: &str) -> Result<(), StageError> {
    if !path.exists() {
        return Err(StageError::prerequisite(format!(
            "{} not found; run `objfind {produced_by}` first",
            path.display()
        )));
    }
    Ok(())
}

pub fn load_catalog(path: &Path) -> Result<DatasetCatalog, StageError> {
    require(path, "ingest")?;
    let text = fs::read_to_string(path)?;
    DatasetCatalog::from_json(&text).map_err(|e| StageError::validation(format!("{}: {e}", path.display())))
}

fn save_catalog(path: &Path, catalog: &DatasetCatalog) -> Result<(), StageError> {
    write_atomic(path, |f| Ok(f.write_all(catalog.to_json().as_bytes())?))
}

fn load_table(path: &Path) -> Result<EmbeddingTable, StageError> {
    require(path, "encode")?;
    EmbeddingTable::read_from(BufReader::new(File::open(path)?))
        .map_err(|e| StageError::validation(format!("{}: {e}", path.display())))
}

pub fn load_heads(path: &Path) -> Result<(ProjectionHeads, String), StageError> {
    require(path, "train")?;
    ProjectionHeads::read_from(BufReader::new(File::open(path)?))
        .map_err(|e| StageError::validation(format!("{}: {e}", path.display())))
}

pub fn load_index(path: &Path) -> Result<SearchIndex, StageError> {
    require(path, "index")?;
    SearchIndex::read_from(BufReader::new(File::open(path)?))
        .map_err(|e| StageError::validation(format!("{}: {e}", path.display())))
}

fn encoder(config: &PipelineConfig) -> Result<Box<dyn Encoder>, StageError> {
    Ok(encoder_from_config(&config.encoder_config())?)
}

const ENCODER_DIGEST: &str = "encoder_digest";
const DESCRIPTIONS_DIGEST: &str = "descriptions_digest";
const HEADS_DIGEST: &str = "heads_config_digest";

/// The text each object is embedded and queried with.
fn query_texts(catalog: &DatasetCatalog, kind: PromptKind) -> Result<BTreeMap<String, String>, StageError> {
    let mut texts = BTreeMap::new();
    let mut missing = Vec::new();
    for id in catalog.ids() {
        match catalog.description_text(id, Some(kind)) {
            Some(t) => {
                texts.insert(id.to_owned(), t.to_owned());
            }
            None => missing.push(id.to_owned()),
        }
    }
    if !missing.is_empty() {
        return Err(StageError::prerequisite(format!(
            "objects without descriptions: {}; run `objfind label` first",
            missing.join(", ")
        )));
    }
    Ok(texts)
}

pub fn ingest(ctx: &mut Ctx, manifest: Option<&Path>) -> Result<(), StageError> {
    let path = manifest
        .map(Path::to_owned)
        .or_else(|| ctx.config.paths.manifest.as_ref().map(|p| ctx.config.resolve(p)))
        .ok_or_else(|| StageError::validation("no manifest given; pass --manifest or set paths.manifest"))?;
    if !path.exists() {
        return Err(StageError::prerequisite(format!("manifest {} not found", path.display())));
    }
    let manifest = ingest_manifest(&fs::read_to_string(&path)?)
        .map_err(|e| StageError::validation(format!("{}: {e}", path.display())))?;
    let out = ctx.config.catalog_path();
    if out.exists() && !ctx.force {
        let existing = load_catalog(&out)?;
        if existing.manifest == manifest {
            say!(ctx, "ingest: catalog up to date ({} objects)", manifest.len());
            return Ok(());
        }
        return Err(StageError::validation(format!(
            "{} holds a different manifest; pass --force to replace it",
            out.display()
        )));
    }
    if ctx.dry_run {
        say!(ctx, "ingest: would write {} with {} objects", out.display(), manifest.len());
        return Ok(());
    }
    let n = manifest.len();
    save_catalog(&out, &DatasetCatalog::new(manifest))?;
    say!(ctx, "ingest: wrote {} ({n} objects)", out.display());
    Ok(())
}

pub fn split(ctx: &mut Ctx, train_fraction: Option<f64>) -> Result<(), StageError> {
    let path = ctx.config.catalog_path();
    let catalog = load_catalog(&path)?;
    let fraction = train_fraction.unwrap_or(ctx.config.split.train_fraction);
    let next = assign_splits(&catalog, fraction, ctx.config.split.seed).map_err(|e| StageError::validation(e.to_string()))?;
    if next.split_assignment == catalog.split_assignment {
        say!(ctx, "split: assignment up to date");
        return Ok(());
    }
    if !catalog.split_assignment.is_empty() && !ctx.force {
        return Err(StageError::validation(
            "catalog already has a different split; pass --force to reassign",
        ));
    }
    let n_train = next.ids_in(objfind_core::Split::Train).len();
    if ctx.dry_run {
        say!(ctx, "split: would assign {n_train} of {} objects to train", next.len());
        return Ok(());
    }
    save_catalog(&path, &next)?;
    say!(ctx, "split: {n_train} train, {} validation", next.len() - n_train);
    Ok(())
}

pub fn label(ctx: &mut Ctx, kind: Option<PromptKind>) -> Result<(), StageError> {
    let path = ctx.config.catalog_path();
    let mut catalog = load_catalog(&path)?;
    let kind = kind.unwrap_or(ctx.config.labeler.prompt_kind);
    let mut template: PromptTemplate = builtin_template(kind);
    template.max_description_tokens = ctx.config.labeler.max_description_tokens;
    let backend_config = &ctx.config.labeler.backend;
    let backend = vlm_from_config(backend_config).map_err(|e| StageError::validation(format!("labeler: {e}")))?;
    if ctx.force {
        for list in catalog.descriptions.values_mut() {
            list.retain(|d| d.kind != kind);
        }
    }
    let todo = catalog.ids().filter(|id| !catalog.has_description(id, kind)).count();
    if todo == 0 {
        say!(ctx, "label: every object already has a {kind} description");
        return Ok(());
    }
    if ctx.dry_run {
        say!(ctx, "label: would request {todo} {kind} descriptions from {}", backend.backend_id());
        return Ok(());
    }
    let counter = WhitespaceCounter::default();
    let clock = SystemClock;
    let mut labeler = Labeler::new(backend.as_ref(), backend_config, &counter, &clock)
        .map_err(|e| StageError::validation(format!("labeler: {e}")))?;
    let (next, report) = labeler
        .batch_label(&catalog, &template)
        .map_err(|e| StageError::validation(e.to_string()))?;
    if !report.labeled.is_empty() {
        save_catalog(&path, &next)?;
    }
    say!(
        ctx,
        "label: {} labeled, {} already labeled, {} failed, {} backend calls",
        report.labeled.len(),
        report.skipped.len(),
        report.failed.len(),
        report.backend_calls
    );
    if !report.failed.is_empty() {
        let detail: Vec<String> = report.failed.iter().map(|(id, e)| format!("{id}: {e}")).collect();
        return Err(StageError::backend(format!(
            "labeling failed for {} objects (progress saved; rerun to resume):\n  {}",
            report.failed.len(),
            detail.join("\n  ")
        )));
    }
    Ok(())
}

pub fn encode(ctx: &mut Ctx) -> Result<(), StageError> {
    let catalog = load_catalog(&ctx.config.catalog_path())?;
    let texts = query_texts(&catalog, ctx.config.labeler.prompt_kind)?;
    let encoder_digest = ctx.config.encoder_digest();
    let descriptions_digest = json_digest(&texts);
    let (img_path, txt_path) = (ctx.config.image_embeddings_path(), ctx.config.text_embeddings_path());
    let reusable = |path: &Path| -> Option<EmbeddingTable> {
        let table = EmbeddingTable::read_from(BufReader::new(File::open(path).ok()?)).ok()?;
        (table.meta.get(ENCODER_DIGEST) == Some(&encoder_digest)).then_some(table)
    };
    let old_images = if ctx.force { None } else { reusable(&img_path) };
    let old_texts = if ctx.force {
        None
    } else {
        reusable(&txt_path).filter(|t| t.meta.get(DESCRIPTIONS_DIGEST) == Some(&descriptions_digest))
    };
    let covers = |t: &Option<EmbeddingTable>| t.as_ref().is_some_and(|t| catalog.ids().all(|id| t.contains(id)));
    if covers(&old_images) && covers(&old_texts) {
        say!(ctx, "encode: embeddings up to date ({} objects)", catalog.len());
        return Ok(());
    }
    if ctx.dry_run {
        say!(ctx, "encode: would embed {} objects into {} and {}", catalog.len(), img_path.display(), txt_path.display());
        return Ok(());
    }
    let encoder = encoder(&ctx.config)?;
    let mut images = EmbeddingTable::new(IMAGE_DIM);
    let mut text_table = EmbeddingTable::new(TEXT_DIM);
    let mut fresh = 0;
    for record in &catalog.manifest.records {
        let id = &record.object_id;
        let image = match old_images.as_ref().and_then(|t| t.get(id)) {
            Some(v) => v.to_vec(),
            None => {
                fresh += 1;
                encoder.encode_image(id, &record.image_ref)?.vector
            }
        };
        images.push(id.clone(), &image).map_err(|e| StageError::backend(e.to_string()))?;
        let text = match old_texts.as_ref().and_then(|t| t.get(id)) {
            Some(v) => v.to_vec(),
            None => encoder.encode_text(id, &texts[id])?.vector,
        };
        text_table.push(id.clone(), &text).map_err(|e| StageError::backend(e.to_string()))?;
    }
    for t in [&mut images, &mut text_table] {
        t.meta.insert(ENCODER_DIGEST.into(), encoder_digest.clone());
        t.meta.insert("backend_id".into(), encoder.backend_id());
    }
    text_table.meta.insert(DESCRIPTIONS_DIGEST.into(), descriptions_digest);
    write_atomic(&img_path, |f| images.write_to(f).map_err(|e| StageError::other(e.to_string())))?;
    write_atomic(&txt_path, |f| text_table.write_to(f).map_err(|e| StageError::other(e.to_string())))?;
    say!(ctx, "encode: {} objects ({fresh} new images) with {}", catalog.len(), encoder.backend_id());
    Ok(())
}

/// Both tables, checked against the current encoder and descriptions.
fn load_bases(ctx: &Ctx, catalog: &DatasetCatalog) -> Result<BaseEmbeddings, StageError> {
    let images = load_table(&ctx.config.image_embeddings_path())?;
    let texts = load_table(&ctx.config.text_embeddings_path())?;
    let want = ctx.config.encoder_digest();
    for (name, t) in [("image", &images), ("text", &texts)] {
        if t.meta.get(ENCODER_DIGEST) != Some(&want) {
            return Err(StageError::validation(format!(
                "{name} embeddings were produced by a different encoder configuration; rerun `objfind encode --force`"
            )));
        }
    }
    let current = json_digest(&query_texts(catalog, ctx.config.labeler.prompt_kind)?);
    if texts.meta.get(DESCRIPTIONS_DIGEST) != Some(&current) {
        return Err(StageError::prerequisite(
            "text embeddings are stale for the current descriptions; rerun `objfind encode`",
        ));
    }
    Ok(BaseEmbeddings { images, texts })
}

#[derive(Serialize)]
struct HeadsProvenance<'a> {
    train: &'a associate::TrainConfig,
    encoder_digest: String,
    descriptions_digest: &'a str,
    split: &'a BTreeMap<String, objfind_core::Split>,
}

fn sibling(path: &Path, suffix: &str) -> PathBuf {
    let stem = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    let ext = path.extension().map(|e| format!(".{}", e.to_string_lossy())).unwrap_or_default();
    path.with_file_name(format!("{stem}.{suffix}{ext}"))
}

pub fn train(ctx: &mut Ctx) -> Result<(), StageError> {
    let catalog = load_catalog(&ctx.config.catalog_path())?;
    query_texts(&catalog, ctx.config.labeler.prompt_kind)?;
    if catalog.split_assignment.is_empty() {
        return Err(StageError::prerequisite("catalog has no split assignment; run `objfind split` first"));
    }
    let bases = load_bases(ctx, &catalog)?;
    let config = &ctx.config.train;
    config.validate()?;
    let provenance = HeadsProvenance {
        train: config,
        encoder_digest: ctx.config.encoder_digest(),
        descriptions_digest: bases.texts.meta.get(DESCRIPTIONS_DIGEST).map_or("", String::as_str),
        split: &catalog.split_assignment,
    };
    let digest = json_digest(&provenance);
    let heads_path = ctx.config.heads_path();
    if !ctx.force && heads_path.exists() {
        if let Ok((_, existing)) = load_heads(&heads_path) {
            if existing == digest {
                say!(ctx, "train: heads up to date ({digest})");
                return Ok(());
            }
        }
    }
    if ctx.dry_run {
        say!(ctx, "train: would train heads into {} (config {digest})", heads_path.display());
        return Ok(());
    }
    let init = ProjectionHeads::random(bases.images.dimension(), bases.texts.dimension(), SHARED_DIM, config.seed);
    let outcome = match associate::train(&catalog, &bases, config, Some(init)) {
        Ok(o) => o,
        Err(AssociateError::Diverged { step, reason, last_good }) => {
            let rescue = sibling(&heads_path, "last_good");
            write_atomic(&rescue, |f| last_good.write_to(f, &digest).map_err(StageError::from))?;
            return Err(StageError::validation(format!(
                "training diverged at step {step} ({reason}); last good heads saved to {}",
                rescue.display()
            )));
        }
        Err(e) => return Err(e.into()),
    };
    write_atomic(&sibling(&heads_path, "best_train"), |f| {
        outcome.best_train.write_to(f, &digest).map_err(StageError::from)
    })?;
    if let Some(best_val) = &outcome.best_val {
        write_atomic(&sibling(&heads_path, "best_val"), |f| best_val.write_to(f, &digest).map_err(StageError::from))?;
    }
    let history = serde_json::to_string_pretty(&outcome.history).expect("history serializes");
    write_atomic(&ctx.config.history_path(), |f| Ok(f.write_all(history.as_bytes())?))?;
    write_atomic(&heads_path, |f| outcome.heads.write_to(f, &digest).map_err(StageError::from))?;
    let h = &outcome.history;
    say!(
        ctx,
        "train: {} steps, loss {:.4} -> {:.4}, heads {}",
        h.total_steps,
        h.initial_train_loss,
        h.final_train_loss(),
        outcome.heads.version
    );
    Ok(())
}

pub fn index(ctx: &mut Ctx) -> Result<(), StageError> {
    let catalog = load_catalog(&ctx.config.catalog_path())?;
    let (heads, heads_digest) = load_heads(&ctx.config.heads_path())?;
    let bases = load_bases(ctx, &catalog)?;
    let out = ctx.config.index_path();
    let encoder_digest = ctx.config.encoder_digest();
    if !ctx.force && out.exists() {
        if let Ok(existing) = load_index(&out) {
            let same_ids = existing.len() == catalog.len() && catalog.ids().all(|id| existing.contains(id));
            if existing.heads_version() == heads.version
                && existing.meta.get(ENCODER_DIGEST) == Some(&encoder_digest)
                && same_ids
            {
                say!(ctx, "index: up to date ({} entries, heads {})", existing.len(), heads.version);
                return Ok(());
            }
        }
    }
    if ctx.dry_run {
        say!(ctx, "index: would index {} objects into {}", catalog.len(), out.display());
        return Ok(());
    }
    let mut index = build_index(&catalog, &bases, &heads)?;
    index.meta.insert(ENCODER_DIGEST.into(), encoder_digest);
    index.meta.insert(HEADS_DIGEST.into(), heads_digest);
    write_atomic(&out, |f| index.write_to(f).map_err(StageError::from))?;
    say!(ctx, "index: {} entries, heads {}", index.len(), heads.version);
    Ok(())
}

/// Which heads an evaluation uses.
pub enum HeadsChoice {
    Trained,
    File(PathBuf),
    Identity,
}

pub struct EvalArgs {
    pub split: EvalSplit,
    pub model_tag: String,
    pub visual_focus: Option<f64>,
    pub heads: HeadsChoice,
    pub json: Option<PathBuf>,
}

/// Index and heads for evaluation: the stored index for the trained heads,
/// otherwise a fresh in-memory index over the stored base embeddings.
fn eval_engine(ctx: &Ctx, catalog: &DatasetCatalog, choice: &HeadsChoice) -> Result<(SearchIndex, ProjectionHeads), StageError> {
    let heads = match choice {
        HeadsChoice::Trained => {
            let (heads, _) = load_heads(&ctx.config.heads_path())?;
            let index = load_index(&ctx.config.index_path())?;
            if index.heads_version() != heads.version {
                return Err(StageError::validation(format!(
                    "index was built with heads {}, current heads are {}; rerun `objfind index`",
                    index.heads_version(),
                    heads.version
                )));
            }
            return Ok((index, heads));
        }
        HeadsChoice::File(path) => load_heads(path)?.0,
        HeadsChoice::Identity => ProjectionHeads::identity(IMAGE_DIM, TEXT_DIM, SHARED_DIM),
    };
    let bases = load_bases(ctx, catalog)?;
    Ok((build_index(catalog, &bases, &heads)?, heads))
}

pub fn evaluate(ctx: &mut Ctx, args: &EvalArgs) -> Result<MetricsReport, StageError> {
    let catalog = load_catalog(&ctx.config.catalog_path())?;
    let (index, heads) = eval_engine(ctx, &catalog, &args.heads)?;
    let encoder = encoder(&ctx.config)?;
    let options = EvalOptions {
        visual_focus: args.visual_focus.unwrap_or(ctx.config.eval.visual_focus),
        model_tag: args.model_tag.clone(),
        prompt_kind: Some(ctx.config.labeler.prompt_kind),
    };
    let report = eval::evaluate(&index, &catalog, args.split, &heads, encoder.as_ref(), &options)?;
    write!(ctx.out, "{}", eval::format_table(std::slice::from_ref(&report)))?;
    if let Some(path) = &args.json {
        if ctx.dry_run {
            say!(ctx, "eval: would write {}", path.display());
        } else {
            let text = serde_json::to_string_pretty(&report).expect("report serializes");
            write_atomic(path, |f| Ok(f.write_all(text.as_bytes())?))?;
        }
    }
    Ok(report)
}

pub fn heatmap(ctx: &mut Ctx, limit: Option<usize>, out: Option<PathBuf>) -> Result<(), StageError> {
    let catalog = load_catalog(&ctx.config.catalog_path())?;
    let (index, _) = eval_engine(ctx, &catalog, &HeadsChoice::Trained)?;
    let mut ids: Vec<String> = index.entries().iter().map(|e| e.object_id.clone()).collect();
    ids.sort();
    ids.truncate(limit.unwrap_or(ctx.config.eval.heatmap_limit));
    let matrix = eval::similarity_matrix(&index, &ids)?;
    let out = out.unwrap_or_else(|| ctx.config.reports_dir().join("heatmap.pgm"));
    if ctx.dry_run {
        say!(ctx, "heatmap: would write {}x{} heatmap to {}", ids.len(), ids.len(), out.display());
        return Ok(());
    }
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    let dump = eval::export_heatmap(&matrix, &out)?;
    match matrix.diagonal_margin() {
        Some(m) => say!(ctx, "heatmap: {} and {} (diagonal margin {m:.4})", out.display(), dump.display()),
        None => say!(ctx, "heatmap: {} and {}", out.display(), dump.display()),
    }
    Ok(())
}

fn print_results(ctx: &mut Ctx, results: &[RankedResult], json: bool) -> Result<(), StageError> {
    if json {
        say!(ctx, "{}", serde_json::to_string_pretty(results).expect("results serialize"));
    } else {
        for r in results {
            say!(ctx, "{}\t{}\t{:.6}", r.rank, r.object_id, r.score);
        }
    }
    Ok(())
}

fn search_engine(ctx: &Ctx) -> Result<(SearchIndex, ProjectionHeads), StageError> {
    let catalog = load_catalog(&ctx.config.catalog_path())?;
    eval_engine(ctx, &catalog, &HeadsChoice::Trained)
}

pub fn search(ctx: &mut Ctx, text: &str, k: usize, visual_focus: f64, json: bool) -> Result<Vec<RankedResult>, StageError> {
    let query = SearchQuery::new(text, k, visual_focus)?;
    let (index, heads) = search_engine(ctx)?;
    let encoder = encoder(&ctx.config)?;
    let results = index.search_text(&query, &heads, encoder.as_ref())?;
    print_results(ctx, &results, json)?;
    Ok(results)
}

pub fn search_similar(ctx: &mut Ctx, object_id: &str, k: usize, json: bool) -> Result<Vec<RankedResult>, StageError> {
    if !(1..=objfind_core::index::MAX_K).contains(&k) {
        return Err(StageError::validation(format!("k must be between 1 and {}", objfind_core::index::MAX_K)));
    }
    let (index, _) = search_engine(ctx)?;
    let results = index.search_similar(object_id, k).map_err(|e| match e {
        IndexError::UnknownId(_) => StageError::validation(e.to_string()),
        other => other.into(),
    })?;
    print_results(ctx, &results, json)?;
    Ok(results)
}
