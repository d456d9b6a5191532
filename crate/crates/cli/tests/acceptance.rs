//! Acceptance suite: one line per criterion, non-zero exit if any fails.
//!
//! Trained models are shared between criteria: the clean benchmark model serves the
//! end-to-end, pointing-game, interaction and service checks (the distractor set only
//! alters test samples, so its training split is the clean one).

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, ExitCode};
use std::time::{Duration, Instant};

use axum::body::Body;
use axum::http::{header, Request, StatusCode};
use axum::Router;
use csr_core::concept_head::train_concept_head;
use csr_core::concept_vectors::{extract_all, intra_inter_stats, PairMode};
use csr_core::data::{synthesize, LoadedDataset, Split, SyntheticConfig};
use csr_core::eval::{
    evaluate, off_box_prototypes, oracle_interaction_eval, pointing_game_eval, ORACLE_ALPHA, ORACLE_THRESHOLD,
};
use csr_core::gradcheck::{concept_head_instance, contrastive_instance, task_head_instance, TOLERANCE};
use csr_core::pipeline::{retrain_task_head, train_pipeline, StageConfigs, TrainedPipeline};
use csr_core::prototypes::{assignment, link_prototype_images, loss_multi, loss_single, train_prototypes};
use csr_core::reasoning::{apply_interaction, refine_atlas, similarity_scores};
use csr_core::tensor::l2_normalize;
use csr_core::{
    Atlas, CamPooling, ContrastiveConfig, CsrModel, DenseVector, ImageSize, InteractionSpec, PixelBox, PrototypeId,
    TrainConfig,
};
use csr_service::{router, AppState, ModelPaths, ServiceConfig};
use http_body_util::BodyExt;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::{json, Value};
use tower::ServiceExt;

const SEED: u64 = 7;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Result<Outcome, String> {
    Ok(Outcome { pass, detail: detail.into() })
}

fn err<E: std::fmt::Display>(e: E) -> String {
    e.to_string()
}

fn secs(d: Duration) -> f64 {
    d.as_secs_f64()
}

// ---------------------------------------------------------------- gradients

fn gradient_fidelity() -> Result<Outcome, String> {
    let t = Instant::now();
    let mut worst: BTreeMap<&str, f64> = BTreeMap::new();
    let mut bump = |name, e: f64| {
        let w = worst.entry(name).or_insert(0.0);
        *w = w.max(e);
    };
    for seed in 0..100 {
        bump("concept head (max)", concept_head_instance(seed, CamPooling::Max).map_err(err)?);
        bump(
            "concept head (lse)",
            concept_head_instance(seed, CamPooling::LogSumExp { sharpness: 10.0 }).map_err(err)?,
        );
        let c = contrastive_instance(seed).map_err(err)?;
        bump("prototypes", c.prototypes);
        bump("projector", c.projector);
        bump("task head", task_head_instance(seed).map_err(err)?);
    }
    let elapsed = t.elapsed();
    let max = worst.values().copied().fold(0.0, f64::max);
    let parts: Vec<String> = worst.iter().map(|(k, v)| format!("{k} {v:.1e}")).collect();
    outcome(
        max < TOLERANCE && elapsed < Duration::from_secs(60),
        format!(
            "max rel err {max:.1e} < {TOLERANCE:.0e} over 100 instances each [{}]; {:.1} s < 60 s",
            parts.join(", "),
            secs(elapsed)
        ),
    )
}

// ---------------------------------------------------------------- losses

fn random_unit(rng: &mut ChaCha8Rng, d: usize) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
        if v.iter().map(|x| x * x).sum::<f64>() > 1e-3 {
            return l2_normalize(&v).unwrap().into_vec();
        }
    }
}

fn reduction_identity() -> Result<Outcome, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(SEED);
    let mut worst = 0.0f64;
    for _ in 0..1000 {
        let (k, d) = (rng.random_range(1..=6), rng.random_range(1..=8));
        let protos: Vec<Vec<f64>> = (0..k).map(|_| random_unit(&mut rng, d)).collect();
        let v = random_unit(&mut rng, d);
        let target = rng.random_range(0..k);
        let cfg = ContrastiveConfig {
            lambda: rng.random_range(1.01..20.0),
            gamma: rng.random_range(1.01..20.0),
            delta: 0.0,
            num_prototypes: 1,
            ..ContrastiveConfig::default()
        };
        let atlas = Atlas::new(k, 1, protos).map_err(err)?;
        let multi = loss_multi(&atlas, &v, target, &cfg).map_err(err)?;
        let single = loss_single(atlas.prototypes(), &v, target, cfg.lambda).map_err(err)?;
        worst = worst.max((multi - single).abs());
    }
    outcome(worst <= 1e-12, format!("max |multi - single| {worst:.1e} <= 1e-12 over 1000 instances"))
}

fn closed_forms() -> Result<Outcome, String> {
    let mut worst_ln = 0.0f64;
    for k in 1..=8usize {
        let protos: Vec<DenseVector> = (0..k)
            .map(|i| {
                let mut e = vec![0.0; 9];
                e[i] = 1.0;
                DenseVector::new(e).unwrap()
            })
            .collect();
        let mut v = vec![0.0; 9];
        v[8] = 1.0;
        for target in 0..k {
            let l = loss_single(&protos, &v, target, 10.0).map_err(err)?;
            worst_ln = worst_ln.max((l - (k as f64).ln()).abs());
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(SEED);
    let mut k1_max = 0.0f64;
    let mut sum_err = 0.0f64;
    for _ in 0..500 {
        let (m, d) = (rng.random_range(1..=4), rng.random_range(1..=6));
        let atlas = Atlas::new(1, m, (0..m).map(|_| random_unit(&mut rng, d)).collect()).map_err(err)?;
        let v = random_unit(&mut rng, d);
        let cfg =
            ContrastiveConfig { num_prototypes: m, delta: rng.random_range(0.0..0.5), ..ContrastiveConfig::default() };
        k1_max = k1_max.max(loss_multi(&atlas, &v, 0, &cfg).map_err(err)?.abs());
        k1_max = k1_max.max(loss_single(&atlas.prototypes()[..1], &v, 0, cfg.lambda).map_err(err)?.abs());
        let sims: Vec<f64> = (0..rng.random_range(1..=8)).map(|_| rng.random_range(-1.0..1.0)).collect();
        let q = assignment(&sims, rng.random_range(1.01..30.0)).map_err(err)?;
        sum_err = sum_err.max((q.iter().sum::<f64>() - 1.0).abs());
    }
    outcome(
        worst_ln <= 1e-12 && k1_max == 0.0 && sum_err <= 1e-12,
        format!("|uniform - ln K| {worst_ln:.1e}; K=1 losses max {k1_max:.1e}; |sum q - 1| {sum_err:.1e}"),
    )
}

// ---------------------------------------------------------------- similarity gap

fn intra_inter_gap() -> Result<Outcome, String> {
    let t = Instant::now();
    let data = synthesize(&SyntheticConfig::default(), SEED).map_err(err)?;
    let train = data.subset(Split::Train);
    let head = train_concept_head(&train, &TrainConfig { seed: SEED, ..TrainConfig::default() }).map_err(err)?;
    let vectors = extract_all(&train, &head.head).map_err(err)?;
    let cfg = ContrastiveConfig { seed: SEED, ..ContrastiveConfig::default() };
    let protos = train_prototypes(&vectors, train.manifest.num_concepts, &cfg).map_err(err)?;
    let raw = intra_inter_stats(&vectors, &train, None, PairMode::Vector).map_err(err)?;
    let projected = intra_inter_stats(&vectors, &train, Some(&protos.projector), PairMode::Vector).map_err(err)?;
    let elapsed = t.elapsed();
    outcome(
        projected.gap() >= 0.2 && raw.gap() < projected.gap() && elapsed < Duration::from_secs(300),
        format!(
            "N=200 K=6 M={} C=64 sigma=0.1: projected gap {:.4} >= 0.2, raw gap {:.4} < projected; {:.1} s < 300 s",
            cfg.num_prototypes,
            projected.gap(),
            raw.gap(),
            secs(elapsed)
        ),
    )
}

// ---------------------------------------------------------------- trained benchmarks

struct Benchmark {
    train: LoadedDataset,
    test: LoadedDataset,
    pipeline: TrainedPipeline,
    elapsed: Duration,
}

fn benchmark(cfg: &SyntheticConfig) -> Result<Benchmark, String> {
    let t = Instant::now();
    let data = synthesize(cfg, SEED).map_err(err)?;
    let train = data.subset(Split::Train);
    let test = data.subset(Split::Test);
    let pipeline = train_pipeline(&train, &StageConfigs::benchmark().with_seed(SEED)).map_err(err)?;
    Ok(Benchmark { train, test, pipeline, elapsed: t.elapsed() })
}

fn end_to_end(b: &Benchmark) -> Result<Outcome, String> {
    let t = Instant::now();
    let report = evaluate(&b.pipeline.model, &b.test).map_err(err)?;
    let elapsed = b.elapsed + t.elapsed();
    outcome(
        report.macro_f1 >= 0.95 && elapsed < Duration::from_secs(600),
        format!(
            "held-out macro F1 {:.4} >= 0.95 ({} test samples, {} prototypes refined away); {:.1} s < 600 s",
            report.macro_f1,
            report.samples,
            b.pipeline.discarded.len(),
            secs(elapsed)
        ),
    )
}

/// Replaces a refined-away prototype of a shortcut-class concept with the projected
/// shortcut direction, relinks it and retrains the head, so the model demonstrably
/// relies on the shortcut. Returns the model and the planted id.
fn plant_shortcut(b: &Benchmark, cfg: &SyntheticConfig) -> Result<(CsrModel, PrototypeId), String> {
    let sc = cfg.shortcut.as_ref().ok_or("no shortcut configured")?;
    let model = &b.pipeline.model;
    let slot = b
        .pipeline
        .discarded
        .iter()
        .copied()
        .find(|id| cfg.class_of_concept[id.k] == sc.class)
        .ok_or("no refined-away prototype of a shortcut-class concept to plant into")?;
    let mut direction = vec![0.0; cfg.channels];
    direction[sc.channel] = 1.0;
    let planted = model.projector.project(&direction).map_err(err)?.into_vec();
    let index = model.atlas.index(slot).map_err(err)?;
    let vectors: Vec<Vec<f64>> = (0..model.atlas.len())
        .map(|i| if i == index { planted.clone() } else { model.atlas.prototype(i).as_slice().to_vec() })
        .collect();
    let others: Vec<PrototypeId> = b.pipeline.discarded.iter().copied().filter(|&id| id != slot).collect();
    let atlas = Atlas::new(model.atlas.num_concepts(), model.atlas.per_concept(), vectors)
        .and_then(|a| a.with_discarded(&others, true))
        .and_then(|a| link_prototype_images(&a, &b.pipeline.vectors, &model.projector, &b.train))
        .map_err(err)?;
    let mut out = model.clone();
    out.atlas = atlas;
    out.head = retrain_task_head(&out, &b.train, &StageConfigs::benchmark().with_seed(SEED).task_head).map_err(err)?;
    Ok((out, slot))
}

fn pointing_game(clean: &Benchmark, shortcut_cfg: &SyntheticConfig) -> Result<Outcome, String> {
    let pg = pointing_game_eval(&clean.pipeline.model, &clean.test).map_err(err)?;
    let sc = benchmark(shortcut_cfg)?;
    let (planted_model, planted) = plant_shortcut(&sc, shortcut_cfg)?;
    let before = pointing_game_eval(&planted_model, &sc.test).map_err(err)?;
    let flagged = off_box_prototypes(&planted_model.atlas, &sc.train.manifest).map_err(err)?;
    let mut refined = planted_model.clone();
    refined.atlas = refine_atlas(&refined.atlas, &flagged).map_err(err)?;
    let after = pointing_game_eval(&refined, &sc.test).map_err(err)?;
    let natural = pointing_game_eval(&sc.pipeline.model, &sc.test).map_err(err)?;
    let caught = flagged.contains(&planted);
    let flagged_s: Vec<String> = flagged.iter().map(ToString::to_string).collect();
    outcome(
        pg.hit_rate >= 0.90 && caught && after.hit_rate >= before.hit_rate,
        format!(
            "clean PG {:.4} >= 0.90 ({}/{}); shortcut split: planted {planted} flagged [{}], PG {:.4} -> {:.4} after refine_atlas (trained model {:.4}, {} prototypes refined in training)",
            pg.hit_rate,
            pg.hits,
            pg.evaluated,
            flagged_s.join(", "),
            before.hit_rate,
            after.hit_rate,
            natural.hit_rate,
            sc.pipeline.discarded.len()
        ),
    )
}

// ---------------------------------------------------------------- interaction

fn random_box(rng: &mut ChaCha8Rng, image: ImageSize) -> PixelBox {
    let x1 = rng.random_range(0..image.width);
    let y1 = rng.random_range(0..image.height);
    PixelBox::new(x1, y1, rng.random_range(x1 + 1..=image.width), rng.random_range(y1 + 1..=image.height))
}

fn model_bytes(model: &CsrModel, dir: &Path) -> Result<Vec<Vec<u8>>, String> {
    let paths = [dir.join("p.json"), dir.join("a.json"), dir.join("h.json")];
    model.projector.save(&paths[0]).map_err(err)?;
    model.atlas.save(&paths[1]).map_err(err)?;
    model.head.save(&paths[2]).map_err(err)?;
    paths.iter().map(|p| fs::read(p).map_err(err)).collect()
}

fn interaction(clean: &Benchmark, distractor: &LoadedDataset) -> Result<Outcome, String> {
    let model = &clean.pipeline.model;
    let tmp = tempfile::tempdir().map_err(err)?;
    let before = model_bytes(model, tmp.path())?;
    let mut rng = ChaCha8Rng::seed_from_u64(SEED);
    let (mut a_ok, mut b_ok, mut c_ok) = (true, true, true);
    let mut checks = 0;
    for data in [&clean.test, distractor] {
        for (sample, f) in data.iter() {
            let (maps, _) = model.predict(f).map_err(err)?;
            let image = sample.image_size;
            let base = similarity_scores(&maps);
            let full = InteractionSpec {
                positive_boxes: vec![PixelBox::new(0, 0, image.width, image.height)],
                ..InteractionSpec::default()
            };
            let out = apply_interaction(&maps, &full, &model.head, image).map_err(err)?;
            for (i, map) in maps.maps.iter().enumerate() {
                if model.atlas.is_discarded(i) || base.as_slice()[i] < 0.0 {
                    continue;
                }
                a_ok &= out.scores[i] == base.as_slice()[i] && out.maps[i].argmax().0 == map.argmax().0;
            }
            for _ in 0..5 {
                let without = InteractionSpec {
                    positive_boxes: (0..rng.random_range(0..3)).map(|_| random_box(&mut rng, image)).collect(),
                    alpha: rng.random_range(0.0..1.0),
                    ..InteractionSpec::default()
                };
                let with = InteractionSpec {
                    negative_boxes: (0..rng.random_range(1..4)).map(|_| random_box(&mut rng, image)).collect(),
                    ..without.clone()
                };
                let x = apply_interaction(&maps, &without, &model.head, image).map_err(err)?;
                let y = apply_interaction(&maps, &with, &model.head, image).map_err(err)?;
                b_ok &= x.scores.iter().zip(&y.scores).all(|(p, q)| q <= p);
                checks += 1;
            }
            let reject =
                InteractionSpec { rejected_concepts: (0..maps.num_concepts).collect(), ..InteractionSpec::default() };
            let r = apply_interaction(&maps, &reject, &model.head, image).map_err(err)?;
            c_ok &= r.prediction.logits == model.head.biases;
        }
    }
    let clean_gain = oracle_interaction_eval(model, &clean.test, ORACLE_ALPHA, ORACLE_THRESHOLD).map_err(err)?;
    let gain = oracle_interaction_eval(model, distractor, ORACLE_ALPHA, ORACLE_THRESHOLD).map_err(err)?;
    let after = model_bytes(model, tmp.path())?;
    let e_ok = before == after;
    outcome(
        a_ok && b_ok && c_ok && gain.gain > 0.0 && e_ok,
        format!(
            "(a) {} (b) {} over {checks} box sets (c) {} (d) distractor gain {:+.4} > 0 (F1 {:.4} -> {:.4}, {} interacted; clean split {:+.4}) (e) {}",
            if a_ok { "ok" } else { "FAIL" },
            if b_ok { "ok" } else { "FAIL" },
            if c_ok { "ok" } else { "FAIL" },
            gain.gain,
            gain.baseline.macro_f1,
            gain.interactive.macro_f1,
            gain.interacted,
            clean_gain.gain,
            if e_ok { "checkpoints unchanged" } else { "checkpoints CHANGED" },
        ),
    )
}

// ---------------------------------------------------------------- determinism

const SMALL: &str = "seed = 5
[synthetic]
n_train = 60
n_test = 30
[contrastive]
epochs = 60
[concept_head]
epochs = 80
[task_head]
epochs = 300
";

fn tree(root: &Path) -> Result<BTreeMap<PathBuf, Vec<u8>>, String> {
    let mut out = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in fs::read_dir(&dir).map_err(err)? {
            let path = entry.map_err(err)?.path();
            if path.is_dir() {
                stack.push(path);
            } else {
                out.insert(path.strip_prefix(root).unwrap().to_path_buf(), fs::read(&path).map_err(err)?);
            }
        }
    }
    Ok(out)
}

fn determinism() -> Result<Outcome, String> {
    let stages: [&[&str]; 7] = [
        &["gen-synthetic"],
        &["train-concepts"],
        &["extract-vectors"],
        &["learn-prototypes"],
        &["train-head"],
        &["refine", "--auto"],
        &["train-head"],
    ];
    let mut trees = Vec::new();
    for _ in 0..2 {
        let dir = tempfile::tempdir().map_err(err)?;
        fs::write(dir.path().join("csr.toml"), SMALL).map_err(err)?;
        let mut snapshots = Vec::new();
        for args in stages {
            let out = Command::new(env!("CARGO_BIN_EXE_csr"))
                .current_dir(dir.path())
                .env("CSR_LOG", "warn")
                .args(["--config", "csr.toml"])
                .args(args)
                .output()
                .map_err(err)?;
            if !out.status.success() {
                return Err(format!("csr {args:?}: {}", String::from_utf8_lossy(&out.stderr)));
            }
            snapshots.push(tree(dir.path())?);
        }
        trees.push(snapshots);
    }
    let files = trees[0].last().map_or(0, BTreeMap::len);
    let diverged: Vec<String> = stages
        .iter()
        .zip(trees[0].iter().zip(&trees[1]))
        .filter(|(_, (a, b))| a != b)
        .map(|(s, _)| s.join(" "))
        .collect();
    outcome(
        diverged.is_empty(),
        if diverged.is_empty() {
            format!(
                "{} CLI stages run twice from scratch: all {files} files byte-identical after every stage",
                stages.len()
            )
        } else {
            format!("diverged after: {}", diverged.join(", "))
        },
    )
}

// ---------------------------------------------------------------- service

async fn call(app: &Router, method: &str, uri: &str, body: Option<Value>) -> (StatusCode, Value) {
    let mut req = Request::builder().method(method).uri(uri);
    let body = match body {
        Some(v) => {
            req = req.header(header::CONTENT_TYPE, "application/json");
            Body::from(v.to_string())
        }
        None => Body::empty(),
    };
    let resp = app.clone().oneshot(req.body(body).unwrap()).await.unwrap();
    let status = resp.status();
    let bytes = resp.into_body().collect().await.unwrap().to_bytes();
    let value = if bytes.is_empty() { Value::Null } else { serde_json::from_slice(&bytes).unwrap_or(Value::Null) };
    (status, value)
}

async fn service_checks(clean: &Benchmark, distractor: &LoadedDataset) -> Result<Vec<(&'static str, bool)>, String> {
    let model = &clean.pipeline.model;
    let tmp = tempfile::tempdir().map_err(err)?;
    let paths = ModelPaths {
        projector: tmp.path().join("projector.json"),
        atlas: tmp.path().join("atlas.json"),
        task_head: tmp.path().join("task_head.json"),
    };
    model.projector.save(&paths.projector).map_err(err)?;
    model.atlas.save(&paths.atlas).map_err(err)?;
    model.head.save(&paths.task_head).map_err(err)?;
    let checkpoint = |p: &ModelPaths| -> Vec<Vec<u8>> {
        [&p.projector, &p.atlas, &p.task_head].iter().map(|f| fs::read(f).unwrap()).collect()
    };
    let original = checkpoint(&paths);
    let config = ServiceConfig { atlas_edits: Some(tmp.path().join("atlas_edits.json")), ..ServiceConfig::default() };
    let start = |with_model: bool| -> Result<Router, String> {
        let model = if with_model { paths.load()? } else { None };
        Ok(router(AppState::new(config.clone(), distractor.clone(), model)?))
    };
    let app = start(true)?;
    let mut checks = Vec::new();

    let (s, list) = call(&app, "GET", "/api/v1/samples", None).await;
    let ids: Vec<String> = list
        .as_array()
        .map(|a| a.iter().filter_map(|x| x["id"].as_str().map(String::from)).collect())
        .unwrap_or_default();
    let mut sorted = ids.clone();
    sorted.sort();
    checks.push(("samples listed and sorted", s == StatusCode::OK && ids.len() == distractor.len() && ids == sorted));

    let (s, body) = call(&app, "POST", "/api/v1/predict", Some(json!({"sample_id": "nope"}))).await;
    checks.push((
        "404 unknown sample",
        s == StatusCode::NOT_FOUND && body["code"].is_string() && body["message"].is_string(),
    ));
    let (s, _) = call(&app, "GET", "/api/v1/sessions/s999999", None).await;
    checks.push(("404 unknown session", s == StatusCode::NOT_FOUND));
    let (s, _) = call(&start(false)?, "POST", "/api/v1/predict", Some(json!({"sample_id": ids[0]}))).await;
    checks.push(("409 without a model", s == StatusCode::CONFLICT));

    // A corrupted sample the oracle box fixes, found with the library directly.
    let mut flip = None;
    for (sample, f) in distractor.iter().filter(|(s, _)| s.split == Split::Test && !s.concept_boxes.is_empty()) {
        let (maps, pred) = model.predict(f).map_err(err)?;
        let spec = InteractionSpec { positive_boxes: sample.all_boxes(), ..InteractionSpec::default() };
        let out = apply_interaction(&maps, &spec, &model.head, sample.image_size).map_err(err)?;
        if pred.predicted_class != sample.target_class && out.prediction.predicted_class == sample.target_class {
            flip = Some(sample.clone());
            break;
        }
    }
    let sample = flip.ok_or("no corrupted sample is fixed by its oracle box")?;
    let (s, pred) = call(&app, "POST", "/api/v1/predict", Some(json!({"sample_id": sample.id}))).await;
    checks.push((
        "predict bundle",
        s == StatusCode::OK
            && pred["explanation"]["concepts"].as_array().is_some_and(|c| c.len() == distractor.manifest.num_concepts),
    ));

    let (_, session) =
        call(&app, "POST", "/api/v1/sessions", Some(json!({"sample_id": sample.id, "idempotency_key": "k1"}))).await;
    let sid = session["id"].as_str().unwrap_or_default().to_string();
    let (_, again) =
        call(&app, "POST", "/api/v1/sessions", Some(json!({"sample_id": sample.id, "idempotency_key": "k1"}))).await;
    checks.push(("idempotent session creation", !sid.is_empty() && again["id"] == session["id"]));

    let bad = json!({"positive_boxes": [[0, 0, 10_000, 5]]});
    let (s, body) = call(&app, "POST", &format!("/api/v1/sessions/{sid}/interact"), Some(bad)).await;
    checks.push((
        "422 invalid spec with field",
        s == StatusCode::UNPROCESSABLE_ENTITY
            && body["field"].as_str().is_some_and(|f| f.starts_with("positive_boxes")),
    ));

    let boxes: Vec<Value> = sample.all_boxes().iter().map(|b| serde_json::to_value(b).unwrap()).collect();
    let specs = [json!({"rejected_concepts": [0]}), json!({"positive_boxes": boxes})];
    let mut responses = Vec::new();
    for spec in &specs {
        let (s, r) = call(&app, "POST", &format!("/api/v1/sessions/{sid}/interact"), Some(spec.clone())).await;
        if s != StatusCode::OK {
            return Err(format!("interact failed: {r}"));
        }
        responses.push(r);
    }
    checks.push((
        "oracle box flips to the target",
        responses[1]["prediction"]["predicted_class"] == json!(sample.target_class),
    ));
    let (_, stored) = call(&app, "GET", &format!("/api/v1/sessions/{sid}"), None).await;
    let (_, replay) = call(&app, "POST", "/api/v1/sessions", Some(json!({"sample_id": sample.id}))).await;
    let rid = replay["id"].as_str().unwrap_or_default().to_string();
    let mut replayed = Vec::new();
    for spec in stored["interaction_history"].as_array().cloned().unwrap_or_default() {
        let (_, r) = call(&app, "POST", &format!("/api/v1/sessions/{rid}/interact"), Some(spec)).await;
        replayed.push(r);
    }
    let strip = |v: &Value| {
        let mut v = v.clone();
        v.as_object_mut().map(|o| o.remove("session_id"));
        v
    };
    checks.push((
        "history replays to identical responses",
        replayed.len() == responses.len() && replayed.iter().zip(&responses).all(|(a, b)| strip(a) == strip(b)),
    ));

    let (s, _) = call(&app, "POST", "/api/v1/atlas/discard", Some(json!({"prototype_ids": ["99:0"]}))).await;
    checks.push(("422 unknown prototype", s == StatusCode::UNPROCESSABLE_ENTITY));
    let live = (0..model.atlas.len()).find(|&i| !model.atlas.is_discarded(i)).unwrap();
    let id = model.atlas.id_of(live).to_string();
    let (_, d1) = call(&app, "POST", "/api/v1/atlas/discard", Some(json!({"prototype_ids": [id]}))).await;
    let (_, d2) = call(&app, "POST", "/api/v1/atlas/discard", Some(json!({"prototype_ids": [id]}))).await;
    checks.push(("discard is idempotent", d1["version"].is_u64() && d1 == d2));
    let restarted = start(true)?;
    let (_, atlas) = call(&restarted, "GET", "/api/v1/atlas", None).await;
    let flagged = atlas["prototypes"]
        .as_array()
        .and_then(|ps| ps.iter().find(|p| p["id"] == json!(id)))
        .is_some_and(|p| p["discarded"] == json!(true));
    checks.push(("atlas edits survive a restart", flagged && atlas["version"] == d1["version"]));
    checks.push(("checkpoints untouched", checkpoint(&paths) == original));
    Ok(checks)
}

fn service_contract(clean: &Benchmark, distractor: &LoadedDataset) -> Result<Outcome, String> {
    let rt = tokio::runtime::Runtime::new().map_err(err)?;
    let checks = rt.block_on(service_checks(clean, distractor))?;
    let failed: Vec<&str> = checks.iter().filter(|(_, ok)| !ok).map(|(n, _)| *n).collect();
    outcome(
        failed.is_empty(),
        if failed.is_empty() {
            format!("{} contract checks against the trained model (404/409/422, replay, restart)", checks.len())
        } else {
            format!("failed: {}", failed.join("; "))
        },
    )
}

// ---------------------------------------------------------------- runner

fn main() -> ExitCode {
    let mut results: Vec<(&str, Result<Outcome, String>)> = Vec::new();
    let mut line = |name: &'static str, r: Result<Outcome, String>| {
        match &r {
            Ok(o) => println!("{} {name}: {}", if o.pass { "PASS" } else { "FAIL" }, o.detail),
            Err(e) => println!("FAIL {name}: error: {e}"),
        }
        results.push((name, r));
    };
    line("gradient fidelity", gradient_fidelity());
    line("reduction identity", reduction_identity());
    line("closed-form values", closed_forms());
    line("intra/inter similarity gap", intra_inter_gap());

    let clean = benchmark(&SyntheticConfig::benchmark());
    let distractor = synthesize(&SyntheticConfig::benchmark_distractor(), SEED).map_err(err);
    let shared = match (&clean, &distractor) {
        (Ok(c), Ok(d)) if d.subset(Split::Train).features == c.train.features => Ok((c, d.subset(Split::Test))),
        (Ok(_), Ok(_)) => Err("distractor set does not share the clean training split".to_string()),
        (Err(e), _) | (_, Err(e)) => Err(e.clone()),
    };
    match &shared {
        Ok((c, d)) => {
            line("end-to-end diagnosis", end_to_end(c));
            line("pointing game", pointing_game(c, &SyntheticConfig::benchmark_shortcut()));
            line("interaction invariants", interaction(c, d));
        }
        Err(e) => {
            for name in ["end-to-end diagnosis", "pointing game", "interaction invariants"] {
                line(name, Err(e.clone()));
            }
        }
    }
    line("determinism", determinism());
    match &shared {
        Ok((c, d)) => line("service contract", service_contract(c, d)),
        Err(e) => line("service contract", Err(e.clone())),
    }

    let failed = results.iter().filter(|(_, r)| !matches!(r, Ok(o) if o.pass)).count();
    println!("{} of {} criteria passed", results.len() - failed, results.len());
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
