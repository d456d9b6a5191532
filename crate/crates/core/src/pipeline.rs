//! The training pipeline run in memory: concept head, local vectors, prototypes, linking,
//! task head.

use serde::{Deserialize, Serialize};

use crate::concept_head::{train_concept_head, ConceptHead, TrainConfig};
use crate::concept_vectors::{extract_all, LocalConceptVector};
use crate::data::{DatasetManifest, LoadedDataset};
use crate::error::{CsrError, Result};
use crate::eval::off_box_prototypes;
use crate::prototypes::{link_prototype_images, train_prototypes, Atlas, ContrastiveConfig, PrototypeId};
use crate::reasoning::{refine_atlas, similarity_scores, train_task_head, CsrModel, TaskHead, TaskHeadConfig};

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StageConfigs {
    pub concept_head: TrainConfig,
    pub contrastive: ContrastiveConfig,
    pub task_head: TaskHeadConfig,
    /// Automatic atlas refinement after linking; skipped when absent.
    pub refine: Option<RefineConfig>,
}

/// Rules for discarding prototypes without a human in the loop.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RefineConfig {
    /// Prototypes whose best same-concept training vector is less similar than this never
    /// moved toward any real example and are dropped.
    pub min_link_similarity: f64,
    /// Drop prototypes whose highlight on their source sample lies outside every box of
    /// their concept.
    pub discard_off_box: bool,
}

impl Default for RefineConfig {
    fn default() -> Self {
        Self { min_link_similarity: 0.5, discard_off_box: true }
    }
}

impl RefineConfig {
    pub fn validate(&self) -> Result<()> {
        if !(-1.0..=1.0).contains(&self.min_link_similarity) {
            return Err(CsrError::InvalidConfig(format!(
                "min_link_similarity must lie in [-1, 1], got {}",
                self.min_link_similarity
            )));
        }
        Ok(())
    }
}

impl StageConfigs {
    /// Settings used by the synthetic benchmarks: a longer, faster prototype schedule and
    /// automatic refinement.
    pub fn benchmark() -> Self {
        Self {
            contrastive: ContrastiveConfig { learning_rate: 0.5, epochs: 1000, ..ContrastiveConfig::default() },
            refine: Some(RefineConfig::default()),
            ..Self::default()
        }
    }

    /// Same configs with every stage seed replaced.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.concept_head.seed = seed;
        self.contrastive.seed = seed;
        self.task_head.seed = seed;
        self
    }
}

#[derive(Debug, Clone)]
pub struct TrainedPipeline {
    pub concept_head: ConceptHead,
    pub vectors: Vec<LocalConceptVector>,
    pub model: CsrModel,
    pub concept_losses: Vec<f64>,
    pub prototype_losses: Vec<f64>,
    pub task_losses: Vec<f64>,
    /// Prototypes removed by the refine stage, in atlas order.
    pub discarded: Vec<PrototypeId>,
}

/// Score vectors and targets of a dataset under a model, in sample order.
pub fn score_dataset(
    model_parts: (&crate::prototypes::Projector, &crate::prototypes::Atlas),
    data: &LoadedDataset,
) -> Result<(Vec<Vec<f64>>, Vec<usize>)> {
    let (projector, atlas) = model_parts;
    let mut scores = Vec::with_capacity(data.len());
    let mut targets = Vec::with_capacity(data.len());
    for (sample, f) in data.iter() {
        let maps = crate::reasoning::projected_similarity_maps(f, projector, atlas)?;
        scores.push(similarity_scores(&maps).into_vec());
        targets.push(sample.target_class);
    }
    Ok((scores, targets))
}

/// Trains every stage on `train` (which should hold the training split only).
pub fn train_pipeline(train: &LoadedDataset, cfg: &StageConfigs) -> Result<TrainedPipeline> {
    let head = train_concept_head(train, &cfg.concept_head)?;
    let vectors = extract_all(train, &head.head)?;
    let protos = train_prototypes(&vectors, train.manifest.num_concepts, &cfg.contrastive)?;
    let atlas = link_prototype_images(&protos.atlas, &vectors, &protos.projector, train)?;
    let (scores, targets) = score_dataset((&protos.projector, &atlas), train)?;
    let task = train_task_head(&scores, &targets, train.manifest.num_classes, &cfg.task_head)?;
    let mut model = CsrModel::new(protos.projector, atlas, task.head)?;
    let mut task_losses = task.losses;
    let mut discarded = Vec::new();
    if let Some(refine) = &cfg.refine {
        discarded = refine_candidates(&model.atlas, &train.manifest, refine)?;
        if !discarded.is_empty() {
            model.atlas = refine_atlas(&model.atlas, &discarded)?;
            let (scores, targets) = score_dataset((&model.projector, &model.atlas), train)?;
            let task = train_task_head(&scores, &targets, train.manifest.num_classes, &cfg.task_head)?;
            model.head = task.head;
            task_losses = task.losses;
        }
    }
    Ok(TrainedPipeline {
        concept_head: head.head,
        vectors,
        model,
        concept_losses: head.losses,
        prototype_losses: protos.losses,
        task_losses,
        discarded,
    })
}

/// Live prototypes the refine rules would discard, in atlas order.
pub fn refine_candidates(atlas: &Atlas, manifest: &DatasetManifest, cfg: &RefineConfig) -> Result<Vec<PrototypeId>> {
    cfg.validate()?;
    let off_box = if cfg.discard_off_box { off_box_prototypes(atlas, manifest)? } else { Vec::new() };
    Ok((0..atlas.len())
        .filter(|&i| !atlas.is_discarded(i))
        .filter(|&i| {
            let weak = atlas.provenance(i).is_some_and(|p| p.similarity_at_link < cfg.min_link_similarity);
            weak || off_box.contains(&atlas.id_of(i))
        })
        .map(|i| atlas.id_of(i))
        .collect())
}

/// Retrains only the task head against a (possibly refined) atlas.
pub fn retrain_task_head(model: &CsrModel, train: &LoadedDataset, cfg: &TaskHeadConfig) -> Result<TaskHead> {
    let (scores, targets) = score_dataset((&model.projector, &model.atlas), train)?;
    Ok(train_task_head(&scores, &targets, train.manifest.num_classes, cfg)?.head)
}
