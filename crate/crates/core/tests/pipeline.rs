//! Small end-to-end runs of the in-memory pipeline.

use std::fs;
use std::path::Path;

use csr_core::concept_vectors::write_vectors_jsonl;
use csr_core::data::{synthesize, write_synthetic, Split, SyntheticConfig};
use csr_core::eval::{evaluate, oracle_interaction_eval, pointing_game_eval};
use csr_core::pipeline::{train_pipeline, RefineConfig, StageConfigs, TrainedPipeline};
use csr_core::reasoning::apply_interaction;
use csr_core::{ContrastiveConfig, InteractionSpec, PixelBox, TaskHeadConfig, TrainConfig};
use sha2::{Digest, Sha256};

fn small() -> SyntheticConfig {
    SyntheticConfig { n_train: 80, n_test: 40, ..SyntheticConfig::default() }
}

fn stages(seed: u64) -> StageConfigs {
    StageConfigs {
        concept_head: TrainConfig { epochs: 100, ..TrainConfig::default() },
        contrastive: ContrastiveConfig { learning_rate: 0.5, epochs: 200, ..ContrastiveConfig::default() },
        task_head: TaskHeadConfig { epochs: 400, ..TaskHeadConfig::default() },
        refine: Some(RefineConfig::default()),
    }
    .with_seed(seed)
}

fn digest(path: &Path) -> String {
    Sha256::digest(fs::read(path).unwrap()).iter().map(|b| format!("{b:02x}")).collect()
}

/// Hash of every checkpoint a run produces, in stage order.
fn checkpoint_digests(p: &TrainedPipeline, dir: &Path) -> Vec<String> {
    let files = ["concept_head.json", "vectors.jsonl", "projector.json", "atlas.json", "task_head.json"];
    p.concept_head.save(dir.join(files[0])).unwrap();
    write_vectors_jsonl(dir.join(files[1]), &p.vectors).unwrap();
    p.model.projector.save(dir.join(files[2])).unwrap();
    p.model.atlas.save(dir.join(files[3])).unwrap();
    p.model.head.save(dir.join(files[4])).unwrap();
    files.iter().map(|f| digest(&dir.join(f))).collect()
}

#[test]
fn small_pipeline_learns_the_generator() {
    let data = synthesize(&small(), 5).unwrap();
    let (train, test) = (data.subset(Split::Train), data.subset(Split::Test));
    let p = train_pipeline(&train, &stages(5)).unwrap();
    assert!(p.concept_losses.last() < p.concept_losses.first());
    assert!(p.prototype_losses.last() < p.prototype_losses.first());
    let report = evaluate(&p.model, &test).unwrap();
    assert!(report.macro_f1 > 0.8, "macro F1 {}", report.macro_f1);
    assert_eq!(report.explanation_size, 6);
    for id in &p.discarded {
        assert!(p.model.atlas.is_discarded(p.model.atlas.index(*id).unwrap()));
    }
    assert!(pointing_game_eval(&p.model, &test).unwrap().hit_rate > 0.8);
}

#[test]
fn every_stage_reproduces_identical_checkpoints() {
    let cfg = small();
    let runs: Vec<(Vec<String>, Vec<String>)> = (0..2)
        .map(|_| {
            let dir = tempfile::tempdir().unwrap();
            let data = synthesize(&cfg, 9).unwrap();
            write_synthetic(&data, dir.path().join("data")).unwrap();
            let mut features: Vec<_> =
                fs::read_dir(dir.path().join("data/features")).unwrap().map(|e| e.unwrap().path()).collect();
            features.sort();
            let mut data_digests: Vec<String> = features.iter().map(|p| digest(p)).collect();
            data_digests.push(digest(&dir.path().join("data/manifest.json")));
            let p = train_pipeline(&data.subset(Split::Train), &stages(9)).unwrap();
            (data_digests, checkpoint_digests(&p, dir.path()))
        })
        .collect();
    assert_eq!(runs[0].0, runs[1].0);
    assert_eq!(runs[0].1, runs[1].1);

    let dir = tempfile::tempdir().unwrap();
    let data = synthesize(&cfg, 9).unwrap();
    let other = train_pipeline(&data.subset(Split::Train), &stages(10)).unwrap();
    assert_ne!(checkpoint_digests(&other, dir.path())[0], runs[0].1[0]);
}

#[test]
fn interaction_leaves_checkpoints_untouched() {
    let data = synthesize(&small(), 3).unwrap();
    let (train, test) = (data.subset(Split::Train), data.subset(Split::Test));
    let p = train_pipeline(&train, &stages(3)).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let before = checkpoint_digests(&p, dir.path());
    let model = p.model.clone();
    oracle_interaction_eval(&model, &test, 0.2, 0.3).unwrap();
    for (sample, f) in test.iter() {
        let (maps, _) = model.predict(f).unwrap();
        let spec = InteractionSpec {
            positive_boxes: sample.all_boxes(),
            negative_boxes: vec![PixelBox::new(0, 0, 32, 32)],
            rejected_concepts: [1].into(),
            ..InteractionSpec::default()
        };
        apply_interaction(&maps, &spec, &model.head, sample.image_size).unwrap();
    }
    let mut after_pipeline = p.clone();
    after_pipeline.model = model;
    assert_eq!(checkpoint_digests(&after_pipeline, dir.path()), before);
}

#[test]
fn benchmark_variants_share_the_training_split() {
    let clean = synthesize(&SyntheticConfig { n_test: 5, ..SyntheticConfig::benchmark() }, 1).unwrap();
    let corrupted = synthesize(&SyntheticConfig { n_test: 5, ..SyntheticConfig::benchmark_distractor() }, 1).unwrap();
    let (a, b) = (clean.subset(Split::Train), corrupted.subset(Split::Train));
    assert_eq!(a.manifest.samples, b.manifest.samples);
    assert_eq!(a.features, b.features);
    assert_ne!(clean.subset(Split::Test).features, corrupted.subset(Split::Test).features);
}
