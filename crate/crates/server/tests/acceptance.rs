//! One line per acceptance criterion. Exits non-zero if any criterion fails.

mod common;

use std::io::{BufRead, BufReader};
use std::process::{Command, Stdio};
use std::time::Instant;

use objfind_core::associate::{train, Contrastive, ProjectionHeads, TrainConfig, TrainingBatch};
use objfind_core::catalog::assign_splits;
use objfind_core::encoder::{MockEncoder, PrecomputedEncoder};
use objfind_core::eval::{
    evaluate, export_heatmap, metrics_from_ranks, read_value_dump, reciprocal_rank, similarity_matrix, EvalOptions,
    EvalSplit, MetricsReport,
};
use objfind_core::index::{build_index, RankedResult, SearchIndex, SearchQuery};
use objfind_core::synthetic::SyntheticCorpus;
use objfind_server::service::{router, AppState};
use common::{objfind, precomputed_workspace, run_pipeline, stderr, stdout, synthetic_engine, workspace};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = Result<String, String>;

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn gradient_check() -> Outcome {
    let started = Instant::now();
    let h = 1e-4;
    let mut worst: f64 = 0.0;
    let mut batches = 0;
    for n in [2, 4, 8] {
        for seed in 0..20u64 {
            let corpus = SyntheticCorpus::generate(n, 6, 5, 0.5, seed);
            let batch = TrainingBatch::new(corpus.images.clone(), corpus.texts.clone(), corpus.ids()).unwrap();
            let heads = ProjectionHeads::random(6, 5, 4, seed + 100);
            let loss = Contrastive::new(if seed % 2 == 0 { 1.0 } else { 0.5 }).unwrap();
            let (_, grads) = loss.loss_and_gradients(&batch, &heads).unwrap();
            let at = |heads: &ProjectionHeads| loss.loss(&batch, heads).unwrap().value;
            for image in [true, false] {
                let analytic = if image { &grads.image } else { &grads.text };
                for ((i, j), &g) in analytic.indexed_iter() {
                    let mut plus = heads.clone();
                    let mut minus = heads.clone();
                    let (p, m) = if image {
                        (&mut plus.image, &mut minus.image)
                    } else {
                        (&mut plus.text, &mut minus.text)
                    };
                    p[[i, j]] += h;
                    m[[i, j]] -= h;
                    let numeric = (at(&plus) - at(&minus)) / (2.0 * h);
                    let rel = (g - numeric).abs() / g.abs().max(numeric.abs()).max(1e-3);
                    worst = worst.max(rel);
                }
            }
            batches += 1;
        }
    }
    let secs = started.elapsed().as_secs_f64();
    check(
        worst < 1e-4 && secs < 10.0,
        format!("{batches} batches, max relative error {worst:.2e}, {secs:.1} s"),
    )
}

fn closed_forms() -> Outcome {
    let mut worst: f64 = 0.0;
    let mut notes = Vec::new();
    for n in [2usize, 4, 32] {
        let rows: Vec<Vec<f32>> = (0..n).map(|_| vec![1.0, 0.5, -0.25]).collect();
        let refs: Vec<&[f32]> = rows.iter().map(Vec::as_slice).collect();
        let ids = (0..n).map(|i| format!("o{i}")).collect();
        let batch = TrainingBatch::from_rows(&refs, &refs, ids).unwrap();
        let heads = ProjectionHeads::identity(3, 3, 3);
        let value = Contrastive::default().loss(&batch, &heads).unwrap().value;
        let err = (value - 2.0 * (n as f64).ln()).abs();
        worst = worst.max(err);
        notes.push(format!("N={n} err {err:.1e}"));
    }
    let rows: [&[f32]; 2] = [&[1.0, 0.0], &[-1.0, 0.0]];
    let batch = TrainingBatch::from_rows(&rows, &rows, vec!["a".into(), "b".into()]).unwrap();
    let separated = Contrastive::default()
        .loss(&batch, &ProjectionHeads::identity(2, 2, 2))
        .unwrap()
        .value;
    let ok = worst < 1e-9 && (separated - 0.2538).abs() < 1e-4;
    check(ok, format!("uniform {}; separated N=2 {separated:.6}", notes.join(", ")))
}

fn self_retrieval(corpus: &SyntheticCorpus, heads: &ProjectionHeads) -> (SearchIndex, MetricsReport) {
    let bases = corpus.bases();
    let catalog = corpus.catalog();
    let index = build_index(&catalog, &bases, heads).unwrap();
    let encoder = PrecomputedEncoder::new(Some(bases.images), Some(bases.texts)).unwrap();
    let report = evaluate(&index, &catalog, EvalSplit::Complete, heads, &encoder, &EvalOptions::default()).unwrap();
    (index, report)
}

fn desk_corpus() -> SyntheticCorpus {
    SyntheticCorpus::standard(200, 0.05, 2024)
}

fn desk_run(config: &TrainConfig) -> Result<(SearchIndex, MetricsReport, f64, f64), String> {
    let started = Instant::now();
    let corpus = desk_corpus();
    let catalog = assign_splits(&corpus.catalog(), 1.0, 0).unwrap();
    let outcome = train(&catalog, &corpus.bases(), config, None).map_err(|e| format!("training failed: {e}"))?;
    let ratio = outcome.history.final_train_loss() / outcome.history.initial_train_loss;
    let (index, report) = self_retrieval(&corpus, &outcome.heads);
    Ok((index, report, ratio, started.elapsed().as_secs_f64()))
}

fn desk_verdict(run: &Result<(SearchIndex, MetricsReport, f64, f64), String>) -> Outcome {
    let (_, r, ratio, secs) = run.as_ref().map_err(Clone::clone)?;
    let (ratio, secs) = (*ratio, *secs);
    check(
        ratio < 0.1 && r.mrr >= 0.8 && r.top1_accuracy >= 60.0 && r.top10_accuracy >= 95.0 && secs < 120.0,
        format!(
            "loss ratio {ratio:.4}, MRR {:.4}, top-1 {:.1}%, top-10 {:.1}%, {secs:.1} s",
            r.mrr, r.top1_accuracy, r.top10_accuracy
        ),
    )
}

fn random_baseline() -> Outcome {
    let seeds = 200u64;
    let mut total = 0.0;
    for seed in 0..seeds {
        let corpus = SyntheticCorpus::standard(100, 0.05, seed);
        let heads = ProjectionHeads::random_standard(10_000 + seed);
        total += self_retrieval(&corpus, &heads).1.mrr;
    }
    let mean = total / seeds as f64;
    check((mean - 0.05).abs() <= 0.02, format!("mean MRR {mean:.4} over {seeds} seeds"))
}

fn oracle(index: &SearchIndex, q: &[f64], k: usize, alpha: f64, skip: Option<&str>) -> Vec<RankedResult> {
    let dot = |v: &[f32]| q.iter().zip(v).map(|(a, &b)| a * b as f64).sum::<f64>().clamp(-1.0, 1.0);
    let mut all: Vec<RankedResult> = index
        .entries()
        .iter()
        .filter(|e| Some(e.object_id.as_str()) != skip)
        .map(|e| {
            let (image_score, text_score) = (dot(&e.shared_image), dot(&e.shared_text));
            RankedResult {
                object_id: e.object_id.clone(),
                score: alpha * image_score + (1.0 - alpha) * text_score,
                rank: 0,
                image_score,
                text_score,
            }
        })
        .collect();
    all.sort_by(|a, b| b.score.total_cmp(&a.score).then_with(|| a.object_id.cmp(&b.object_id)));
    all.truncate(k);
    for (i, r) in all.iter_mut().enumerate() {
        r.rank = i + 1;
    }
    all
}

fn same_bits(a: &[RankedResult], b: &[RankedResult]) -> bool {
    a.len() == b.len()
        && a.iter().zip(b).all(|(x, y)| {
            x.object_id == y.object_id
                && x.rank == y.rank
                && x.score.to_bits() == y.score.to_bits()
                && x.image_score.to_bits() == y.image_score.to_bits()
                && x.text_score.to_bits() == y.text_score.to_bits()
        })
}

fn search_exactness() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let encoder = MockEncoder::new(0);
    let mut ties = 0;
    let mut mismatches = Vec::new();
    for instance in 0..100 {
        let n = rng.random_range(1..=1000);
        let mut corpus = SyntheticCorpus::generate(n, 16, objfind_core::TEXT_DIM, 0.05, instance);
        if n > 1 && instance % 3 == 0 {
            for _ in 0..n / 10 + 1 {
                let (src, dst) = (rng.random_range(0..n), rng.random_range(0..n));
                let row = corpus.images.row(src).to_owned();
                corpus.images.row_mut(dst).assign(&row);
                let row = corpus.texts.row(src).to_owned();
                corpus.texts.row_mut(dst).assign(&row);
                ties += 1;
            }
        }
        let heads = ProjectionHeads::random(16, objfind_core::TEXT_DIM, 16, instance + 7);
        let index = build_index(&corpus.catalog(), &corpus.bases(), &heads).unwrap();
        let k = rng.random_range(1..=10);
        let alpha = match instance % 5 {
            0 => 0.0,
            1 => 1.0,
            2 => 0.1,
            _ => rng.random_range(0.0..=1.0),
        };
        let text = format!("query {instance} {}", rng.random::<u32>());
        let query = SearchQuery::new(text.clone(), k, alpha).unwrap();
        let got = index.search_text(&query, &heads, &encoder).unwrap();
        let q = index.embed_query("query", &text, &heads, &encoder).unwrap();
        if !same_bits(&got, &oracle(&index, &q, k, alpha, None)) {
            mismatches.push(format!("text #{instance}"));
        }
        let boundary_ok = got.iter().all(|r| {
            (alpha != 0.0 || r.score.to_bits() == r.text_score.to_bits())
                && (alpha != 1.0 || r.score.to_bits() == r.image_score.to_bits())
        });
        if !boundary_ok {
            mismatches.push(format!("fusion boundary #{instance}"));
        }
        let target = SyntheticCorpus::id(rng.random_range(0..n));
        let similar = index.search_similar(&target, k).unwrap();
        let e = index.get(&target).unwrap();
        let q: Vec<f64> = e.shared_image.iter().map(|&x| x as f64).collect();
        if !same_bits(&similar, &oracle(&index, &q, k, 1.0, Some(&target))) {
            mismatches.push(format!("similar #{instance}"));
        }
    }
    check(
        mismatches.is_empty(),
        format!("100 instances ({ties} planted duplicates), mismatches: {mismatches:?}"),
    )
}

fn permutations(n: usize) -> Vec<Vec<usize>> {
    if n == 0 {
        return vec![Vec::new()];
    }
    let mut out = Vec::new();
    for p in permutations(n - 1) {
        for slot in 0..=p.len() {
            let mut q = p.clone();
            q.insert(slot, n - 1);
            out.push(q);
        }
    }
    out
}

fn metric_oracle() -> Outcome {
    let mut cases = 0usize;
    let mut worst: f64 = 0.0;
    for n in 1..=8usize {
        for perm in permutations(n) {
            for keep in [n, n.saturating_sub(1).max(1)] {
                let listed: Vec<String> = perm[..keep].iter().map(|i| format!("o{i}")).collect();
                let mut ranks = Vec::new();
                let (mut rr_sum, mut hit1, mut hit10) = (0.0, 0.0, 0.0);
                for t in 0..n {
                    let truth = format!("o{t}");
                    let mut rank = None;
                    for (pos, id) in listed.iter().enumerate() {
                        if *id == truth {
                            rank = Some(pos + 1);
                            break;
                        }
                    }
                    let expected_rr = match rank {
                        Some(r) => 1.0 / r as f64,
                        None => 0.0,
                    };
                    worst = worst.max((reciprocal_rank(&listed, &truth) - expected_rr).abs());
                    rr_sum += expected_rr;
                    if rank == Some(1) {
                        hit1 += 1.0;
                    }
                    if rank.is_some_and(|r| r <= 10) {
                        hit10 += 1.0;
                    }
                    ranks.push(rank);
                }
                let (mrr, top1, top10) = metrics_from_ranks(&ranks);
                let nf = n as f64;
                worst = worst
                    .max((mrr - rr_sum / nf).abs())
                    .max((top1 - 100.0 * hit1 / nf).abs())
                    .max((top10 - 100.0 * hit10 / nf).abs());
                cases += 1;
            }
        }
    }
    check(worst < 1e-12, format!("{cases} rankings, max deviation {worst:.1e}"))
}

fn heatmap_diagonal(trained: &SearchIndex) -> Outcome {
    let ids: Vec<String> = (0..100).map(SyntheticCorpus::id).collect();
    let matrix = similarity_matrix(trained, &ids).map_err(|e| e.to_string())?;
    let margin = matrix.diagonal_margin().unwrap();
    let dir = tempfile::tempdir().unwrap();
    let pgm = dir.path().join("heatmap.pgm");
    let dump_path = export_heatmap(&matrix, &pgm).map_err(|e| e.to_string())?;
    let bytes = std::fs::read(&pgm).unwrap();
    let pixels = &bytes[bytes.len() - 100 * 100..];
    let (mut diag, mut off) = (0.0, 0.0);
    for (i, &p) in pixels.iter().enumerate() {
        if i / 100 == i % 100 {
            diag += p as f64 / 100.0;
        } else {
            off += p as f64 / 9900.0;
        }
    }
    let dump = read_value_dump(&dump_path).map_err(|e| e.to_string())?;
    let corpus = desk_corpus();
    let (control_index, _) = self_retrieval(&corpus, &ProjectionHeads::random_standard(77));
    let control = similarity_matrix(&control_index, &ids).unwrap().diagonal_margin().unwrap();
    check(
        margin > 0.2 && control.abs() < 0.05 && diag > off && dump.row_ids == ids,
        format!("trained margin {margin:.4}, untrained {control:.4}, mean pixel diagonal {diag:.0} vs {off:.0}"),
    )
}

fn percentile(sorted: &[f64], p: f64) -> f64 {
    let idx = ((p * sorted.len() as f64).ceil() as usize).clamp(1, sorted.len()) - 1;
    sorted[idx]
}

fn end_to_end() -> Outcome {
    let ws = workspace();
    let dir = ws.path();
    run_pipeline(dir);
    let report_path = dir.join("report.json");
    let o = objfind(dir, &["eval", "--json", report_path.to_str().unwrap()]);
    if !o.status.success() {
        return Err(format!("eval failed: {}", stderr(&o)));
    }
    let report: MetricsReport = serde_json::from_str(&std::fs::read_to_string(&report_path).unwrap()).unwrap();

    let mut child = Command::new(env!("CARGO_BIN_EXE_objfind"))
        .arg("--config")
        .arg(dir.join("config.toml"))
        .arg("serve")
        .env("RUST_LOG", "warn")
        .stdout(Stdio::piped())
        .stderr(Stdio::null())
        .spawn()
        .unwrap();
    let mut line = String::new();
    BufReader::new(child.stdout.take().unwrap()).read_line(&mut line).unwrap();
    let base = line.trim().strip_prefix("listening on ").unwrap_or_default().to_owned();
    let served = ureq::post(format!("{base}/api/search"))
        .send_json(serde_json::json!({ "query": "height adjustable office chair", "k": 8 }))
        .ok()
        .and_then(|mut r| r.body_mut().read_json::<serde_json::Value>().ok())
        .map_or(0, |v| v["results"].as_array().map_or(0, Vec::len));
    child.kill().unwrap();
    child.wait().unwrap();

    let latencies = latency_over_synthetic_index(6778, 200);
    let p95 = percentile(&latencies, 0.95);
    check(
        report.top1_accuracy == 100.0 && served == 8 && p95 < 250.0,
        format!(
            "fixture top-1 {:.1}%, served {served} results, p95 search latency {p95:.1} ms over 6778 entries",
            report.top1_accuracy
        ),
    )
}

/// Sequential HTTP search latencies in milliseconds against an in-process server.
fn latency_over_synthetic_index(n: usize, requests: usize) -> Vec<f64> {
    let state = AppState::new(Some(synthetic_engine(n, 9)), None, 8);
    let runtime = tokio::runtime::Runtime::new().unwrap();
    let listener = runtime.block_on(tokio::net::TcpListener::bind("127.0.0.1:0")).unwrap();
    let addr = listener.local_addr().unwrap();
    runtime.spawn(async move { axum::serve(listener, router(state)).await });
    let agent = ureq::Agent::new_with_defaults();
    let mut out = Vec::with_capacity(requests);
    for i in 0..requests {
        let body = serde_json::json!({ "query": format!("chair with {i} legs"), "k": 8, "visual_focus": 0.5 });
        let started = Instant::now();
        let mut resp = agent.post(format!("http://{addr}/api/search")).send_json(&body).unwrap();
        let _: serde_json::Value = resp.body_mut().read_json().unwrap();
        out.push(started.elapsed().as_secs_f64() * 1e3);
    }
    runtime.shutdown_background();
    out.sort_by(f64::total_cmp);
    out
}

fn real_data_path() -> Outcome {
    let ws = precomputed_workspace(60);
    let dir = ws.path();
    for args in [&["--force", "split"][..], &["encode"], &["train"], &["index"]] {
        let o = objfind(dir, args);
        if !o.status.success() {
            return Err(format!("{args:?}: {}", stderr(&o)));
        }
    }
    let mut table = String::new();
    for args in [&["eval", "--identity-heads", "--model-tag", "baseline"][..], &["eval", "--split", "test"]] {
        let o = objfind(dir, args);
        if !o.status.success() {
            return Err(format!("{args:?}: {}", stderr(&o)));
        }
        table.push_str(&stdout(&o));
    }
    let header = ["Model", "Split", "N", "MRR (0-1)", "Top-1 Acc (%)", "Top-10 Acc (%)"];
    let ok = header.iter().all(|h| table.lines().next().unwrap_or("").contains(h));
    let rows: Vec<&str> = table.lines().filter(|l| !l.starts_with("Model")).collect();
    check(ok && rows.len() == 2, format!("report rows: {}", rows.join(" | ")))
}

fn main() {
    let mut failed = 0;
    let mut report = |name: &str, outcome: Outcome| {
        let (tag, detail) = match outcome {
            Ok(d) => ("PASS", d),
            Err(d) => {
                failed += 1;
                ("FAIL", d)
            }
        };
        println!("[{tag}] {name}: {detail}");
    };
    report("gradient correctness", gradient_check());
    report("loss closed forms", closed_forms());
    report(
        "desk-scale associate/search, default TrainConfig",
        desk_verdict(&desk_run(&TrainConfig::default())),
    );
    let desk = desk_run(&TrainConfig::desk_scale());
    report("desk-scale associate/search, desk_scale preset (supplementary)", desk_verdict(&desk));
    report("random baseline", random_baseline());
    report("search exactness", search_exactness());
    report("metric oracle equivalence", metric_oracle());
    match &desk {
        Ok((index, ..)) => report("heatmap diagonal", heatmap_diagonal(index)),
        Err(e) => report("heatmap diagonal", Err(e.clone())),
    }
    report("end-to-end pipeline", end_to_end());
    report("real-data report path (optional)", real_data_path());
    if failed > 0 {
        println!("{failed} acceptance criteria failed");
        std::process::exit(1);
    }
}
