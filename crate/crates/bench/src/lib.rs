//! Fixtures shared by the benchmarks.

use csr_core::concept_head::train_concept_head;
use csr_core::concept_vectors::extract_all;
use csr_core::data::{synthesize, LoadedDataset, Split, SyntheticConfig};
use csr_core::pipeline::{score_dataset, StageConfigs};
use csr_core::prototypes::{link_prototype_images, train_prototypes};
use csr_core::reasoning::train_task_head;
use csr_core::{ConceptHead, CsrModel, LocalConceptVector, TrainConfig};

pub struct Fixture {
    pub train: LoadedDataset,
    pub concept_head: ConceptHead,
    pub vectors: Vec<LocalConceptVector>,
    pub model: CsrModel,
}

/// A briefly trained model on the benchmark synthetic set. Quality is irrelevant here,
/// only shapes and realistic values.
pub fn fixture(n_train: usize) -> Fixture {
    let cfg = SyntheticConfig { n_train, n_test: 0, ..SyntheticConfig::benchmark() };
    let train = synthesize(&cfg, 1).expect("synthetic set").subset(Split::Train);
    let mut stages = StageConfigs::benchmark().with_seed(1);
    stages.contrastive.epochs = 20;
    stages.task_head.epochs = 50;
    let head = train_concept_head(&train, &TrainConfig { epochs: 20, ..stages.concept_head.clone() })
        .expect("concept head")
        .head;
    let vectors = extract_all(&train, &head).expect("vectors");
    let protos = train_prototypes(&vectors, train.manifest.num_concepts, &stages.contrastive).expect("prototypes");
    let atlas = link_prototype_images(&protos.atlas, &vectors, &protos.projector, &train).expect("link");
    let (scores, targets) = score_dataset((&protos.projector, &atlas), &train).expect("scores");
    let task = train_task_head(&scores, &targets, train.manifest.num_classes, &stages.task_head).expect("task head");
    let model = CsrModel::new(protos.projector, atlas, task.head).expect("model");
    Fixture { train, concept_head: head, vectors, model }
}
