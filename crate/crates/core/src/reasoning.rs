//! Prototype similarity scoring, the linear task head, explanations, and operator
//! interaction (importance maps, concept rejection, atlas refinement).

use std::collections::BTreeSet;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{CsrError, Result};
use crate::geometry::{GridGeometry, ImageSize, PixelBox};
use crate::prototypes::{prototype_similarity_map, Atlas, Projector, PrototypeId};
use crate::tensor::{argmax, clip_nonneg, log_sum_exp, softmax, DenseVector, FeatureMap, Grid, Matrix};

/// A prediction is indecisive when the top-two probability gap is below this.
pub const INDECISION_THRESHOLD: f64 = 0.3;
/// Weight of cells outside every operator box.
pub const DEFAULT_ALPHA: f64 = 0.2;

/// The `M * K` similarity maps of one sample, k-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimilarityMaps {
    pub num_concepts: usize,
    pub per_concept: usize,
    pub maps: Vec<Grid>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub warnings: Vec<String>,
}

impl SimilarityMaps {
    pub fn get(&self, id: PrototypeId) -> &Grid {
        &self.maps[id.k * self.per_concept + id.m]
    }

    pub fn grid_shape(&self) -> (usize, usize) {
        self.maps.first().map_or((0, 0), Grid::shape)
    }
}

/// `S(h, w) = <p, normalize(P f(:, h, w))>` per prototype; discarded prototypes give zero maps.
pub fn projected_similarity_maps(f: &FeatureMap, projector: &Projector, atlas: &Atlas) -> Result<SimilarityMaps> {
    if projector.dim() != atlas.dim() {
        return Err(CsrError::shape("projector output vs atlas", atlas.dim(), projector.dim()));
    }
    let cells = projector.project_cells(f)?;
    let degenerate = cells.iter().filter(|c| c.is_none()).count();
    let mut warnings = Vec::new();
    if degenerate > 0 {
        let msg = format!("{degenerate} cell(s) project to zero and score 0");
        log::warn!("{msg}");
        warnings.push(msg);
    }
    let (h, w) = (f.height(), f.width());
    let maps = (0..atlas.len())
        .map(|i| {
            if atlas.is_discarded(i) {
                Grid::filled(h, w, 0.0)
            } else {
                prototype_similarity_map(atlas.prototype(i), &cells, h, w)
            }
        })
        .collect();
    Ok(SimilarityMaps { num_concepts: atlas.num_concepts(), per_concept: atlas.per_concept(), maps, warnings })
}

/// Max of every map, k-major then m.
pub fn similarity_scores(maps: &SimilarityMaps) -> DenseVector {
    DenseVector::from_vec_unchecked(maps.maps.iter().map(Grid::max).collect())
}

#[derive(Debug, Clone, PartialEq)]
pub struct TaskHead {
    /// `L x MK`.
    pub weights: Matrix,
    pub biases: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct TaskHeadCheckpoint {
    #[serde(rename = "L")]
    l: usize,
    #[serde(rename = "MK")]
    mk: usize,
    weights: Vec<f64>,
    biases: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub logits: Vec<f64>,
    pub probabilities: Vec<f64>,
    pub predicted_class: usize,
    pub indecisive: bool,
}

impl Prediction {
    /// Top-1 minus top-2 probability (1 for a single class).
    pub fn margin(&self) -> f64 {
        top_two_gap(&self.probabilities)
    }
}

fn top_two_gap(p: &[f64]) -> f64 {
    let mut first = f64::NEG_INFINITY;
    let mut second = f64::NEG_INFINITY;
    for &x in p {
        if x > first {
            second = first;
            first = x;
        } else if x > second {
            second = x;
        }
    }
    if second.is_finite() {
        first - second
    } else {
        1.0
    }
}

impl TaskHead {
    pub fn new(weights: Matrix, biases: Vec<f64>) -> Result<Self> {
        if biases.len() != weights.rows() {
            return Err(CsrError::shape("task head biases", weights.rows(), biases.len()));
        }
        if biases.iter().any(|b| !b.is_finite()) {
            return Err(CsrError::Domain("non-finite task head bias".into()));
        }
        Ok(Self { weights, biases })
    }

    pub fn num_classes(&self) -> usize {
        self.weights.rows()
    }

    pub fn num_features(&self) -> usize {
        self.weights.cols()
    }

    pub fn logits(&self, s: &[f64]) -> Result<Vec<f64>> {
        if s.len() != self.num_features() {
            return Err(CsrError::shape("score vector", self.num_features(), s.len()));
        }
        Ok(self.weights.matvec(s).into_iter().zip(&self.biases).map(|(a, b)| a + b).collect())
    }

    /// Softmax cross-entropy for one sample and its gradient.
    pub fn ce_loss_and_grad(&self, s: &[f64], target: usize) -> Result<(f64, TaskHeadGradient)> {
        if target >= self.num_classes() {
            return Err(CsrError::OutOfRange(format!("target {target} out of range for L = {}", self.num_classes())));
        }
        let z = self.logits(s)?;
        let loss = log_sum_exp(&z) - z[target];
        let mut p = softmax(&z);
        p[target] -= 1.0;
        let mut weights = Matrix::zeros(self.num_classes(), self.num_features());
        for (l, dl) in p.iter().enumerate() {
            for (dst, x) in weights.row_mut(l).iter_mut().zip(s) {
                *dst = dl * x;
            }
        }
        Ok((loss, TaskHeadGradient { weights, biases: p }))
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        crate::checkpoint::write_json(
            path,
            &TaskHeadCheckpoint {
                l: self.num_classes(),
                mk: self.num_features(),
                weights: self.weights.data().to_vec(),
                biases: self.biases.clone(),
            },
        )
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let ck: TaskHeadCheckpoint = crate::checkpoint::read_json(path)?;
        TaskHead::new(Matrix::new(ck.l, ck.mk, ck.weights)?, ck.biases)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TaskHeadGradient {
    pub weights: Matrix,
    pub biases: Vec<f64>,
}

pub fn predict_with_threshold(head: &TaskHead, s: &[f64], threshold: f64) -> Result<Prediction> {
    let logits = head.logits(s)?;
    let probabilities = softmax(&logits);
    Ok(Prediction {
        predicted_class: argmax(&probabilities),
        indecisive: top_two_gap(&probabilities) < threshold,
        logits,
        probabilities,
    })
}

pub fn predict(head: &TaskHead, s: &[f64]) -> Result<Prediction> {
    predict_with_threshold(head, s, INDECISION_THRESHOLD)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TaskHeadConfig {
    pub learning_rate: f64,
    pub epochs: usize,
    pub seed: u64,
    /// Defaults to `1 / sqrt(MK)`.
    pub weight_init_scale: Option<f64>,
    /// Train on z-scored features and fold the scaling into the returned weights.
    pub standardize: bool,
    /// L2 penalty on the (standardised) weights.
    pub weight_decay: f64,
    /// Project weights onto `w >= 0` after every step, so a score can only add evidence.
    pub nonnegative: bool,
}

impl Default for TaskHeadConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1.0,
            epochs: 1000,
            seed: 0,
            weight_init_scale: None,
            standardize: true,
            weight_decay: 0.0,
            nonnegative: false,
        }
    }
}

#[derive(Debug, Clone)]
pub struct TaskHeadTraining {
    pub head: TaskHead,
    /// Mean loss before each epoch, then after the last one.
    pub losses: Vec<f64>,
}

fn mean_ce(head: &TaskHead, scores: &[Vec<f64>], targets: &[usize]) -> Result<f64> {
    let mut total = 0.0;
    for (s, &t) in scores.iter().zip(targets) {
        total += head.ce_loss_and_grad(s, t)?.0;
    }
    Ok(total / scores.len() as f64)
}

/// Full-batch gradient descent on softmax cross-entropy.
pub fn train_task_head(
    scores: &[Vec<f64>],
    targets: &[usize],
    num_classes: usize,
    cfg: &TaskHeadConfig,
) -> Result<TaskHeadTraining> {
    if scores.is_empty() {
        return Err(CsrError::Empty("task head training set is empty".into()));
    }
    if scores.len() != targets.len() {
        return Err(CsrError::shape("targets", scores.len(), targets.len()));
    }
    if !(cfg.learning_rate > 0.0 && cfg.learning_rate.is_finite()) {
        return Err(CsrError::InvalidConfig("learning_rate must be positive".into()));
    }
    let features = scores[0].len();
    if let Some(bad) = scores.iter().find(|s| s.len() != features) {
        return Err(CsrError::shape("score vector", features, bad.len()));
    }
    let (mean, std) =
        if cfg.standardize { feature_moments(scores) } else { (vec![0.0; features], vec![1.0; features]) };
    let z: Vec<Vec<f64>> =
        scores.iter().map(|s| s.iter().zip(&mean).zip(&std).map(|((x, m), d)| (x - m) / d).collect()).collect();

    let scale = cfg.weight_init_scale.unwrap_or(1.0 / (features.max(1) as f64).sqrt());
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let weights = (0..num_classes * features).map(|_| rng.random_range(-scale..=scale)).collect();
    let mut head = TaskHead::new(Matrix::new(num_classes, features, weights)?, vec![0.0; num_classes])?;
    if cfg.nonnegative {
        head.weights.data_mut().iter_mut().for_each(|w| *w = w.abs());
    }
    let lr = cfg.learning_rate / scores.len() as f64;
    let mut losses = Vec::with_capacity(cfg.epochs + 1);
    for _ in 0..cfg.epochs {
        let mut gw = Matrix::zeros(num_classes, features);
        let mut gb = vec![0.0; num_classes];
        let mut loss = 0.0;
        for (s, &t) in z.iter().zip(targets) {
            let (l, g) = head.ce_loss_and_grad(s, t)?;
            loss += l;
            for (a, b) in gw.data_mut().iter_mut().zip(g.weights.data()) {
                *a += b;
            }
            for (a, b) in gb.iter_mut().zip(&g.biases) {
                *a += b;
            }
        }
        losses.push(loss / scores.len() as f64);
        if cfg.weight_decay > 0.0 {
            let n = scores.len() as f64;
            for (g, w) in gw.data_mut().iter_mut().zip(head.weights.data()) {
                *g += n * cfg.weight_decay * w;
            }
        }
        head.weights.descend(&gw, lr);
        if cfg.nonnegative {
            head.weights.data_mut().iter_mut().for_each(|w| *w = w.max(0.0));
        }
        for (b, g) in head.biases.iter_mut().zip(&gb) {
            *b -= lr * g;
        }
    }
    // Fold the standardisation back so the head acts on raw scores.
    for l in 0..num_classes {
        let row = head.weights.row_mut(l);
        let mut shift = 0.0;
        for ((w, m), d) in row.iter_mut().zip(&mean).zip(&std) {
            *w /= d;
            shift += *w * m;
        }
        head.biases[l] -= shift;
    }
    losses.push(mean_ce(&head, scores, targets)?);
    Ok(TaskHeadTraining { head, losses })
}

/// Per-feature mean and standard deviation; near-constant features keep unit scale.
fn feature_moments(scores: &[Vec<f64>]) -> (Vec<f64>, Vec<f64>) {
    let n = scores.len() as f64;
    let features = scores[0].len();
    let mut mean = vec![0.0; features];
    for s in scores {
        for (m, x) in mean.iter_mut().zip(s) {
            *m += x / n;
        }
    }
    let mut var = vec![0.0; features];
    for s in scores {
        for ((v, x), m) in var.iter_mut().zip(s).zip(&mean) {
            *v += (x - m) * (x - m) / n;
        }
    }
    let std = var.into_iter().map(|v| if v.sqrt() > 1e-6 { v.sqrt() } else { 1.0 }).collect();
    (mean, std)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrototypeReference {
    pub sample_id: String,
    pub highlight_cell: (usize, usize),
    pub image_path: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConceptExplanation {
    pub concept: usize,
    pub best_prototype: PrototypeId,
    pub score: f64,
    pub similarity_map: Grid,
    pub reference: Option<PrototypeReference>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExplanationBundle {
    pub concepts: Vec<ConceptExplanation>,
    /// Full k-major score vector.
    pub scores: Vec<f64>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub warnings: Vec<String>,
}

impl ExplanationBundle {
    /// Number of concepts shown to the operator.
    pub fn size(&self) -> usize {
        self.concepts.len()
    }
}

/// Best live prototype per concept from precomputed maps.
pub fn explain_maps(maps: &SimilarityMaps, atlas: &Atlas) -> ExplanationBundle {
    let scores = similarity_scores(maps).into_vec();
    let mut concepts = Vec::new();
    let mut warnings = maps.warnings.clone();
    for k in 0..atlas.num_concepts() {
        let best = (0..atlas.per_concept())
            .map(|m| k * atlas.per_concept() + m)
            .filter(|&i| !atlas.is_discarded(i))
            .fold(None, |best: Option<usize>, i| match best {
                Some(b) if scores[b] >= scores[i] => Some(b),
                _ => Some(i),
            });
        let Some(i) = best else {
            warnings.push(format!("concept {k} has no live prototypes and is omitted"));
            continue;
        };
        concepts.push(ConceptExplanation {
            concept: k,
            best_prototype: atlas.id_of(i),
            score: scores[i],
            similarity_map: maps.maps[i].clone(),
            reference: atlas.provenance(i).map(|p| PrototypeReference {
                sample_id: p.source_sample_id.clone(),
                highlight_cell: p.source_cell,
                image_path: p.image_path.clone(),
            }),
        });
    }
    ExplanationBundle { concepts, scores, warnings }
}

pub fn explain(f: &FeatureMap, projector: &Projector, atlas: &Atlas) -> Result<ExplanationBundle> {
    Ok(explain_maps(&projected_similarity_maps(f, projector, atlas)?, atlas))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InteractionSpec {
    #[serde(default)]
    pub positive_boxes: Vec<PixelBox>,
    #[serde(default)]
    pub negative_boxes: Vec<PixelBox>,
    #[serde(default = "default_alpha")]
    pub alpha: f64,
    #[serde(default)]
    pub rejected_concepts: BTreeSet<usize>,
}

fn default_alpha() -> f64 {
    DEFAULT_ALPHA
}

impl Default for InteractionSpec {
    fn default() -> Self {
        Self {
            positive_boxes: Vec::new(),
            negative_boxes: Vec::new(),
            alpha: DEFAULT_ALPHA,
            rejected_concepts: BTreeSet::new(),
        }
    }
}

impl InteractionSpec {
    /// Checks alpha, box bounds and (when given) rejected concept indices.
    pub fn validate(&self, image: ImageSize, num_concepts: Option<usize>) -> Result<()> {
        if !(0.0..1.0).contains(&self.alpha) {
            return Err(CsrError::InvalidInteraction {
                field: "alpha".into(),
                message: format!("alpha must lie in [0, 1), got {}", self.alpha),
            });
        }
        for (field, boxes) in [("positive_boxes", &self.positive_boxes), ("negative_boxes", &self.negative_boxes)] {
            for (index, b) in boxes.iter().enumerate() {
                b.validate(image).map_err(|message| CsrError::InvalidBox { field, index, message })?;
            }
        }
        if let Some(k) = num_concepts {
            if let Some(&bad) = self.rejected_concepts.iter().find(|&&c| c >= k) {
                return Err(CsrError::InvalidInteraction {
                    field: "rejected_concepts".into(),
                    message: format!("concept {bad} out of range for K = {k}"),
                });
            }
        }
        Ok(())
    }
}

/// Per-cell weights in `{0, alpha, 1}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImportanceMap(pub Grid);

/// 1 inside any positive box, 0 inside any negative box (negative wins), alpha elsewhere,
/// judged at cell centres.
pub fn build_importance_map(spec: &InteractionSpec, grid: (usize, usize), image: ImageSize) -> Result<ImportanceMap> {
    spec.validate(image, None)?;
    let geo = GridGeometry::new(grid.0, grid.1, image)?;
    let mut values = Vec::with_capacity(grid.0 * grid.1);
    for h in 0..grid.0 {
        for w in 0..grid.1 {
            let inside = |b: &PixelBox| geo.cell_in_box(h, w, b);
            values.push(if spec.negative_boxes.iter().any(inside) {
                0.0
            } else if spec.positive_boxes.iter().any(inside) {
                1.0
            } else {
                spec.alpha
            });
        }
    }
    Ok(ImportanceMap(Grid::new(grid.0, grid.1, values)?))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InteractionOutcome {
    pub scores: Vec<f64>,
    pub prediction: Prediction,
    /// Reweighted maps, k-major.
    pub maps: Vec<Grid>,
}

/// Reweights clipped maps by the importance map, zeroes rejected concepts and re-predicts.
pub fn apply_interaction_with_threshold(
    maps: &SimilarityMaps,
    spec: &InteractionSpec,
    head: &TaskHead,
    image: ImageSize,
    threshold: f64,
) -> Result<InteractionOutcome> {
    spec.validate(image, Some(maps.num_concepts))?;
    let importance = build_importance_map(spec, maps.grid_shape(), image)?;
    let mut scores = Vec::with_capacity(maps.maps.len());
    let mut out_maps = Vec::with_capacity(maps.maps.len());
    for (i, s) in maps.maps.iter().enumerate() {
        let k = i / maps.per_concept;
        let weighted = if spec.rejected_concepts.contains(&k) {
            Grid::filled(s.height(), s.width(), 0.0)
        } else {
            importance.0.hadamard(&clip_nonneg(s))?
        };
        scores.push(weighted.max());
        out_maps.push(weighted);
    }
    let prediction = predict_with_threshold(head, &scores, threshold)?;
    Ok(InteractionOutcome { scores, prediction, maps: out_maps })
}

pub fn apply_interaction(
    maps: &SimilarityMaps,
    spec: &InteractionSpec,
    head: &TaskHead,
    image: ImageSize,
) -> Result<InteractionOutcome> {
    apply_interaction_with_threshold(maps, spec, head, image, INDECISION_THRESHOLD)
}

/// Copy of the atlas with the given prototypes discarded.
pub fn refine_atlas(atlas: &Atlas, discard: &[PrototypeId]) -> Result<Atlas> {
    atlas.with_discarded(discard, true)
}

/// The trained artifacts needed for inference.
#[derive(Debug, Clone)]
pub struct CsrModel {
    pub projector: Projector,
    pub atlas: Atlas,
    pub head: TaskHead,
}

impl CsrModel {
    pub fn new(projector: Projector, atlas: Atlas, head: TaskHead) -> Result<Self> {
        if head.num_features() != atlas.len() {
            return Err(CsrError::shape("task head inputs vs atlas size", atlas.len(), head.num_features()));
        }
        if projector.dim() != atlas.dim() {
            return Err(CsrError::shape("projector output vs atlas", atlas.dim(), projector.dim()));
        }
        Ok(Self { projector, atlas, head })
    }

    pub fn maps(&self, f: &FeatureMap) -> Result<SimilarityMaps> {
        projected_similarity_maps(f, &self.projector, &self.atlas)
    }

    pub fn predict(&self, f: &FeatureMap) -> Result<(SimilarityMaps, Prediction)> {
        let maps = self.maps(f)?;
        let prediction = predict(&self.head, similarity_scores(&maps).as_slice())?;
        Ok((maps, prediction))
    }
}
