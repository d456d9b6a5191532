//! Metrics and experiment harnesses: macro F1, pointing game, explanation size and the
//! oracle interaction protocol.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::data::{DatasetManifest, LoadedDataset};
use crate::error::{CsrError, Result};
use crate::geometry::{GridGeometry, PixelBox};
use crate::prototypes::{Atlas, PrototypeId};
use crate::reasoning::{
    apply_interaction_with_threshold, similarity_scores, CsrModel, InteractionSpec, Prediction, SimilarityMaps,
    TaskHead, DEFAULT_ALPHA, INDECISION_THRESHOLD,
};
use crate::tensor::Grid;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct F1Scores {
    pub macro_f1: f64,
    pub per_class: Vec<f64>,
}

/// One-vs-rest F1 per class (0 for classes never seen nor predicted) and their mean.
pub fn macro_f1(predictions: &[usize], targets: &[usize], num_classes: usize) -> Result<F1Scores> {
    if predictions.is_empty() {
        return Err(CsrError::Empty("macro F1 needs at least one prediction".into()));
    }
    if predictions.len() != targets.len() {
        return Err(CsrError::shape("targets", predictions.len(), targets.len()));
    }
    if num_classes == 0 {
        return Err(CsrError::InvalidConfig("macro F1 needs L >= 1".into()));
    }
    let mut tp = vec![0usize; num_classes];
    let mut fp = vec![0usize; num_classes];
    let mut fn_ = vec![0usize; num_classes];
    for (&p, &t) in predictions.iter().zip(targets) {
        if p >= num_classes || t >= num_classes {
            return Err(CsrError::OutOfRange(format!("class index {} out of range for L = {num_classes}", p.max(t))));
        }
        if p == t {
            tp[p] += 1;
        } else {
            fp[p] += 1;
            fn_[t] += 1;
        }
    }
    let per_class: Vec<f64> = (0..num_classes)
        .map(|c| {
            let denom = 2 * tp[c] + fp[c] + fn_[c];
            if denom == 0 {
                0.0
            } else {
                2.0 * tp[c] as f64 / denom as f64
            }
        })
        .collect();
    Ok(F1Scores { macro_f1: per_class.iter().sum::<f64>() / num_classes as f64, per_class })
}

/// Whether the map's argmax cell centre lies in any box; `None` without boxes.
pub fn pointing_game(map: &Grid, boxes: &[PixelBox], geometry: &GridGeometry) -> Option<bool> {
    if boxes.is_empty() {
        return None;
    }
    let ((h, w), _) = map.argmax();
    Some(boxes.iter().any(|b| geometry.cell_in_box(h, w, b)))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PgSelection {
    pub prototype: PrototypeId,
    pub map: Grid,
    /// No prototype contributed positively, so the highest raw score was used.
    pub fallback: bool,
}

/// The map of the prototype with the largest contribution `s * w[class, (k, m)]`.
pub fn select_pg_map(maps: &SimilarityMaps, head: &TaskHead, predicted_class: usize) -> Result<PgSelection> {
    if predicted_class >= head.num_classes() {
        return Err(CsrError::OutOfRange(format!("class {predicted_class}")));
    }
    let scores = similarity_scores(maps);
    if scores.dim() != head.num_features() {
        return Err(CsrError::shape("score vector", head.num_features(), scores.dim()));
    }
    let weights = head.weights.row(predicted_class);
    let contributions: Vec<f64> = scores.iter().zip(weights).map(|(s, w)| s * w).collect();
    let best = crate::tensor::argmax(&contributions);
    let (index, fallback) =
        if contributions[best] > 0.0 { (best, false) } else { (crate::tensor::argmax(&scores), true) };
    Ok(PgSelection {
        prototype: PrototypeId::new(index / maps.per_concept, index % maps.per_concept),
        map: maps.maps[index].clone(),
        fallback,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PgReport {
    pub hit_rate: f64,
    pub hits: usize,
    pub evaluated: usize,
    pub fallbacks: usize,
}

/// Pointing game over every sample with boxes, scoring the map picked by [`select_pg_map`]
/// against all of the sample's concept boxes.
pub fn pointing_game_eval(model: &CsrModel, data: &LoadedDataset) -> Result<PgReport> {
    let mut hits = 0;
    let mut evaluated = 0;
    let mut fallbacks = 0;
    for (sample, f) in data.iter() {
        let boxes = sample.all_boxes();
        if boxes.is_empty() {
            continue;
        }
        let (maps, pred) = model.predict(f)?;
        let sel = select_pg_map(&maps, &model.head, pred.predicted_class)?;
        fallbacks += usize::from(sel.fallback);
        let geo = data.manifest.geometry(sample)?;
        if pointing_game(&sel.map, &boxes, &geo) == Some(true) {
            hits += 1;
        }
        evaluated += 1;
    }
    if evaluated == 0 {
        return Err(CsrError::Empty("no samples carry concept boxes".into()));
    }
    Ok(PgReport { hit_rate: hits as f64 / evaluated as f64, hits, evaluated, fallbacks })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InteractionReport {
    pub alpha: f64,
    pub threshold: f64,
    pub baseline: F1Scores,
    pub interactive: F1Scores,
    pub gain: f64,
    pub indecisive: usize,
    pub interacted: usize,
}

/// Baseline pass, then for indecisive samples only a positive-box interaction with the
/// sample's ground-truth boxes; reports the change in macro F1.
pub fn oracle_interaction_eval(
    model: &CsrModel,
    data: &LoadedDataset,
    alpha: f64,
    threshold: f64,
) -> Result<InteractionReport> {
    if !data.manifest.samples.iter().any(|s| !s.concept_boxes.is_empty()) {
        return Err(CsrError::Empty("dataset carries no concept boxes".into()));
    }
    let mut targets = Vec::with_capacity(data.len());
    let mut base = Vec::with_capacity(data.len());
    let mut after = Vec::with_capacity(data.len());
    let mut indecisive = 0;
    let mut interacted = 0;
    for (sample, f) in data.iter() {
        let maps = model.maps(f)?;
        let pred =
            crate::reasoning::predict_with_threshold(&model.head, similarity_scores(&maps).as_slice(), threshold)?;
        targets.push(sample.target_class);
        base.push(pred.predicted_class);
        let boxes = sample.all_boxes();
        if pred.indecisive {
            indecisive += 1;
        }
        if !pred.indecisive || boxes.is_empty() {
            after.push(pred.predicted_class);
            continue;
        }
        let spec = InteractionSpec { positive_boxes: boxes, alpha, ..InteractionSpec::default() };
        let out = apply_interaction_with_threshold(&maps, &spec, &model.head, sample.image_size, threshold)?;
        after.push(out.prediction.predicted_class);
        interacted += 1;
    }
    let l = data.manifest.num_classes;
    let baseline = macro_f1(&base, &targets, l)?;
    let interactive = macro_f1(&after, &targets, l)?;
    Ok(InteractionReport {
        alpha,
        threshold,
        gain: interactive.macro_f1 - baseline.macro_f1,
        baseline,
        interactive,
        indecisive,
        interacted,
    })
}

/// Concepts with at least one live prototype.
pub fn explanation_size(atlas: &Atlas) -> usize {
    (0..atlas.num_concepts()).filter(|&k| atlas.live_in_concept(k) > 0).count()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub samples: usize,
    pub accuracy: f64,
    pub macro_f1: f64,
    pub per_class_f1: Vec<f64>,
    pub explanation_size: usize,
    pub indecisive: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub pg_hit_rate: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub interaction_gain: Option<f64>,
}

impl EvalReport {
    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("report serialises");
        s.push('\n');
        s
    }

    /// Plain-text table; `class_names` label the per-class rows when given.
    pub fn to_text(&self, class_names: &[String]) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "{:<22}{:>10}", "metric", "value");
        let _ = writeln!(out, "{:<22}{:>10}", "samples", self.samples);
        let _ = writeln!(out, "{:<22}{:>10.4}", "accuracy", self.accuracy);
        let _ = writeln!(out, "{:<22}{:>10.4}", "macro_f1", self.macro_f1);
        let _ = writeln!(out, "{:<22}{:>10}", "explanation_size", self.explanation_size);
        let _ = writeln!(out, "{:<22}{:>10}", "indecisive", self.indecisive);
        if let Some(pg) = self.pg_hit_rate {
            let _ = writeln!(out, "{:<22}{:>10.4}", "pg_hit_rate", pg);
        }
        if let Some(g) = self.interaction_gain {
            let _ = writeln!(out, "{:<22}{:>+10.4}", "interaction_gain", g);
        }
        for (c, f1) in self.per_class_f1.iter().enumerate() {
            let name = class_names.get(c).cloned().unwrap_or_else(|| format!("class {c}"));
            let _ = writeln!(out, "{:<22}{:>10.4}", format!("f1[{name}]"), f1);
        }
        out
    }
}

/// Predicts every sample in order.
pub fn predict_all(model: &CsrModel, data: &LoadedDataset) -> Result<Vec<Prediction>> {
    data.features.iter().map(|f| Ok(model.predict(f)?.1)).collect()
}

pub fn evaluate(model: &CsrModel, data: &LoadedDataset) -> Result<EvalReport> {
    if data.is_empty() {
        return Err(CsrError::Empty("evaluation set is empty".into()));
    }
    let preds = predict_all(model, data)?;
    let predicted: Vec<usize> = preds.iter().map(|p| p.predicted_class).collect();
    let targets: Vec<usize> = data.manifest.samples.iter().map(|s| s.target_class).collect();
    let f1 = macro_f1(&predicted, &targets, data.manifest.num_classes)?;
    let correct = predicted.iter().zip(&targets).filter(|(a, b)| a == b).count();
    Ok(EvalReport {
        samples: data.len(),
        accuracy: correct as f64 / data.len() as f64,
        macro_f1: f1.macro_f1,
        per_class_f1: f1.per_class,
        explanation_size: explanation_size(&model.atlas),
        indecisive: preds.iter().filter(|p| p.indecisive).count(),
        pg_hit_rate: None,
        interaction_gain: None,
    })
}

/// Linked prototypes whose highlighted cell falls outside every box of their own concept
/// on the source sample: candidates for discarding as shortcuts.
pub fn off_box_prototypes(atlas: &Atlas, manifest: &DatasetManifest) -> Result<Vec<PrototypeId>> {
    let mut out = Vec::new();
    for index in 0..atlas.len() {
        if atlas.is_discarded(index) {
            continue;
        }
        let Some(prov) = atlas.provenance(index) else {
            continue;
        };
        let id = atlas.id_of(index);
        let sample = manifest.sample(&prov.source_sample_id).ok_or_else(|| {
            CsrError::InvalidConfig(format!("provenance sample {} not in manifest", prov.source_sample_id))
        })?;
        let boxes: Vec<&PixelBox> = sample.boxes_for(id.k).collect();
        if boxes.is_empty() {
            continue;
        }
        let geo = manifest.geometry(sample)?;
        let (h, w) = prov.source_cell;
        if !boxes.iter().any(|b| geo.cell_in_box(h, w, b)) {
            out.push(id);
        }
    }
    Ok(out)
}

pub const ORACLE_ALPHA: f64 = DEFAULT_ALPHA;
pub const ORACLE_THRESHOLD: f64 = INDECISION_THRESHOLD;
