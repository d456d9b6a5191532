//! The 1x1 concept head: a per-cell linear map from feature channels to K concept
//! activation maps (CAMs), trained with multi-label binary cross-entropy.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::LoadedDataset;
use crate::error::{CsrError, Result};
use crate::tensor::{argmax, softmax, FeatureMap, Grid, Matrix};

/// How a CAM is reduced to a single concept logit.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum CamPooling {
    /// Spatial max; gradient flows through the argmax cell only.
    Max,
    /// `max + ln(mean(exp(sharpness * (cam - max)))) / sharpness`. Lies between the
    /// spatial mean and the max, and every cell receives gradient.
    LogSumExp { sharpness: f64 },
}

impl Default for CamPooling {
    fn default() -> Self {
        CamPooling::LogSumExp { sharpness: 10.0 }
    }
}

impl CamPooling {
    pub fn validate(&self) -> Result<()> {
        match *self {
            CamPooling::LogSumExp { sharpness } if !(sharpness > 0.0 && sharpness.is_finite()) => {
                Err(CsrError::InvalidConfig(format!("pooling sharpness must be positive, got {sharpness}")))
            }
            _ => Ok(()),
        }
    }

    /// Pooled value and its derivative with respect to each cell.
    fn pool(&self, cam: &[f64]) -> (f64, Vec<f64>) {
        match *self {
            CamPooling::Max => {
                let i = argmax(cam);
                let mut weights = vec![0.0; cam.len()];
                weights[i] = 1.0;
                (cam[i], weights)
            }
            CamPooling::LogSumExp { sharpness } => {
                let m = cam.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let mean = cam.iter().map(|v| (sharpness * (v - m)).exp()).sum::<f64>() / cam.len() as f64;
                let scaled: Vec<f64> = cam.iter().map(|v| sharpness * v).collect();
                (m + mean.ln() / sharpness, softmax(&scaled))
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConceptHead {
    /// `K x C`.
    pub weights: Matrix,
    pub biases: Vec<f64>,
    pub pooling: CamPooling,
}

#[derive(Debug, Clone, PartialEq)]
pub struct HeadGradient {
    pub weights: Matrix,
    pub biases: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct HeadCheckpoint {
    #[serde(rename = "K")]
    k: usize,
    #[serde(rename = "C")]
    c: usize,
    weights: Vec<f64>,
    biases: Vec<f64>,
    #[serde(default = "max_pooling")]
    pooling: CamPooling,
}

fn max_pooling() -> CamPooling {
    CamPooling::Max
}

fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `-y ln s(z) - (1 - y) ln(1 - s(z))` computed through softplus.
pub fn binary_cross_entropy(logit: f64, label: f64) -> f64 {
    label * softplus(-logit) + (1.0 - label) * softplus(logit)
}

impl ConceptHead {
    pub fn new(weights: Matrix, biases: Vec<f64>, pooling: CamPooling) -> Result<Self> {
        if biases.len() != weights.rows() {
            return Err(CsrError::shape("concept head biases", weights.rows(), biases.len()));
        }
        if biases.iter().any(|b| !b.is_finite()) {
            return Err(CsrError::Domain("non-finite concept head bias".into()));
        }
        pooling.validate()?;
        Ok(Self { weights, biases, pooling })
    }

    /// Uniform `[-scale, scale]` weights and zero biases.
    pub fn seeded(num_concepts: usize, channels: usize, scale: f64, pooling: CamPooling, rng: &mut impl Rng) -> Self {
        let data = (0..num_concepts * channels).map(|_| rng.random_range(-scale..=scale)).collect();
        Self {
            weights: Matrix::new(num_concepts, channels, data).expect("finite init"),
            biases: vec![0.0; num_concepts],
            pooling,
        }
    }

    pub fn num_concepts(&self) -> usize {
        self.weights.rows()
    }

    pub fn channels(&self) -> usize {
        self.weights.cols()
    }

    fn check(&self, f: &FeatureMap) -> Result<()> {
        if f.channels() != self.channels() {
            return Err(CsrError::shape("concept head input channels", self.channels(), f.channels()));
        }
        Ok(())
    }

    fn raw_cams(&self, f: &FeatureMap) -> Vec<Vec<f64>> {
        let cells = f.cells();
        let data = f.data();
        (0..self.num_concepts())
            .map(|k| {
                let mut cam = vec![self.biases[k]; cells];
                for (c, &wk) in self.weights.row(k).iter().enumerate() {
                    let plane = &data[c * cells..(c + 1) * cells];
                    for (out, x) in cam.iter_mut().zip(plane) {
                        *out += wk * x;
                    }
                }
                cam
            })
            .collect()
    }

    /// `cam_k(h, w) = <weights_k, f(:, h, w)> + bias_k`.
    pub fn cams(&self, f: &FeatureMap) -> Result<Vec<Grid>> {
        self.check(f)?;
        Ok(self.raw_cams(f).into_iter().map(|cam| Grid::from_vec_unchecked(f.height(), f.width(), cam)).collect())
    }

    pub fn concept_logits(&self, f: &FeatureMap) -> Result<Vec<f64>> {
        self.check(f)?;
        Ok(self.raw_cams(f).iter().map(|cam| self.pooling.pool(cam).0).collect())
    }

    /// Mean-over-concepts BCE for one sample and its gradient.
    pub fn bce_loss_and_grad(&self, f: &FeatureMap, labels: &[f64]) -> Result<(f64, HeadGradient)> {
        self.check(f)?;
        let k_count = self.num_concepts();
        if labels.len() != k_count {
            return Err(CsrError::shape("concept labels", k_count, labels.len()));
        }
        let cells = f.cells();
        let data = f.data();
        let mut loss = 0.0;
        let mut grad = HeadGradient { weights: Matrix::zeros(k_count, self.channels()), biases: vec![0.0; k_count] };
        for (k, cam) in self.raw_cams(f).iter().enumerate() {
            let (logit, cell_weights) = self.pooling.pool(cam);
            loss += binary_cross_entropy(logit, labels[k]);
            let dlogit = (sigmoid(logit) - labels[k]) / k_count as f64;
            grad.biases[k] = dlogit;
            let row = grad.weights.row_mut(k);
            for (c, g) in row.iter_mut().enumerate() {
                let plane = &data[c * cells..(c + 1) * cells];
                *g = dlogit * cell_weights.iter().zip(plane).map(|(a, x)| a * x).sum::<f64>();
            }
        }
        Ok((loss / k_count as f64, grad))
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let ck = HeadCheckpoint {
            k: self.num_concepts(),
            c: self.channels(),
            weights: self.weights.data().to_vec(),
            biases: self.biases.clone(),
            pooling: self.pooling,
        };
        crate::checkpoint::write_json(path, &ck)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let ck: HeadCheckpoint = crate::checkpoint::read_json(path)?;
        ConceptHead::new(Matrix::new(ck.k, ck.c, ck.weights)?, ck.biases, ck.pooling)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub epochs: usize,
    pub seed: u64,
    /// Defaults to `1 / sqrt(C)`.
    pub weight_init_scale: Option<f64>,
    /// `None` trains full-batch; `Some(n)` uses seeded-shuffle minibatches of `n`.
    pub batch_size: Option<usize>,
    pub pooling: CamPooling,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 20.0,
            epochs: 200,
            seed: 0,
            weight_init_scale: None,
            batch_size: None,
            pooling: CamPooling::default(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct HeadTraining {
    pub head: ConceptHead,
    /// Mean training loss before each epoch, then after the last one.
    pub losses: Vec<f64>,
}

fn labels_of(data: &LoadedDataset) -> Vec<Vec<f64>> {
    data.manifest.samples.iter().map(|s| s.concept_labels.iter().map(|&l| l as f64).collect()).collect()
}

/// Mean BCE over a dataset.
pub fn dataset_bce(head: &ConceptHead, data: &LoadedDataset) -> Result<f64> {
    if data.is_empty() {
        return Err(CsrError::Empty("dataset has no samples".into()));
    }
    let labels = labels_of(data);
    let mut total = 0.0;
    for (f, y) in data.features.iter().zip(&labels) {
        let logits = head.concept_logits(f)?;
        total += logits.iter().zip(y).map(|(&z, &l)| binary_cross_entropy(z, l)).sum::<f64>() / y.len() as f64;
    }
    Ok(total / data.len() as f64)
}

/// Gradient descent on mean BCE. Deterministic for a fixed `(data, cfg)`.
pub fn train_concept_head(data: &LoadedDataset, cfg: &TrainConfig) -> Result<HeadTraining> {
    if data.is_empty() {
        return Err(CsrError::Empty("concept head training set is empty".into()));
    }
    if !(cfg.learning_rate > 0.0 && cfg.learning_rate.is_finite()) {
        return Err(CsrError::InvalidConfig("learning_rate must be positive".into()));
    }
    if cfg.batch_size == Some(0) {
        return Err(CsrError::InvalidConfig("batch_size must be positive".into()));
    }
    cfg.pooling.validate()?;
    let k_count = data.manifest.num_concepts;
    let channels = data.manifest.channels();
    let scale = cfg.weight_init_scale.unwrap_or(1.0 / (channels as f64).sqrt());
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut head = ConceptHead::seeded(k_count, channels, scale, cfg.pooling, &mut rng);
    let labels = labels_of(data);
    let n = data.len();
    let batch = cfg.batch_size.unwrap_or(n).min(n);
    let mut order: Vec<usize> = (0..n).collect();
    let mut losses = Vec::with_capacity(cfg.epochs + 1);

    for _ in 0..cfg.epochs {
        losses.push(dataset_bce(&head, data)?);
        if batch < n {
            order.shuffle(&mut rng);
        }
        for chunk in order.chunks(batch) {
            let mut acc = HeadGradient { weights: Matrix::zeros(k_count, channels), biases: vec![0.0; k_count] };
            for &i in chunk {
                let (_, g) = head.bce_loss_and_grad(&data.features[i], &labels[i])?;
                for (a, b) in acc.weights.data_mut().iter_mut().zip(g.weights.data()) {
                    *a += b;
                }
                for (a, b) in acc.biases.iter_mut().zip(&g.biases) {
                    *a += b;
                }
            }
            let lr = cfg.learning_rate / chunk.len() as f64;
            head.weights.descend(&acc.weights, lr);
            for (b, g) in head.biases.iter_mut().zip(&acc.biases) {
                *b -= lr * g;
            }
        }
    }
    losses.push(dataset_bce(&head, data)?);
    Ok(HeadTraining { head, losses })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{synthesize, SyntheticConfig};

    fn identity_head(k: usize, c: usize, pooling: CamPooling) -> ConceptHead {
        ConceptHead::new(Matrix::eye(k, c), vec![0.0; k], pooling).unwrap()
    }

    #[test]
    fn identity_head_lights_up_one_cell() {
        let mut f = FeatureMap::zeros(3, 2, 2);
        f.set(1, 1, 0, 1.0);
        let cams = identity_head(3, 3, CamPooling::Max).cams(&f).unwrap();
        assert_eq!(cams[1].values(), &[0.0, 0.0, 1.0, 0.0]);
        assert!(cams[0].values().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn zero_weights_give_constant_bias() {
        let head = ConceptHead::new(Matrix::zeros(2, 3), vec![0.7, -1.5], CamPooling::Max).unwrap();
        let cams = head.cams(&FeatureMap::zeros(3, 2, 3)).unwrap();
        assert!(cams[0].values().iter().all(|&v| v == 0.7));
        assert!(cams[1].values().iter().all(|&v| v == -1.5));
    }

    #[test]
    fn logits_are_spatial_max() {
        let head = ConceptHead::new(Matrix::zeros(1, 1), vec![0.3], CamPooling::Max).unwrap();
        assert_eq!(head.concept_logits(&FeatureMap::zeros(1, 3, 3)).unwrap(), vec![0.3]);

        let mut f = FeatureMap::zeros(1, 3, 3);
        f.set(0, 2, 1, 2.0);
        assert_eq!(identity_head(1, 1, CamPooling::Max).concept_logits(&f).unwrap(), vec![2.0]);
    }

    #[test]
    fn lse_pooling_of_constant_map_is_the_constant() {
        let head = ConceptHead::new(Matrix::zeros(1, 1), vec![0.3], CamPooling::LogSumExp { sharpness: 10.0 }).unwrap();
        let z = head.concept_logits(&FeatureMap::zeros(1, 3, 3)).unwrap()[0];
        assert!((z - 0.3).abs() < 1e-12);
    }

    #[test]
    fn bce_closed_forms() {
        let f = FeatureMap::zeros(1, 2, 2);
        let head = ConceptHead::new(Matrix::zeros(2, 1), vec![20.0, -20.0], CamPooling::Max).unwrap();
        let (loss, _) = head.bce_loss_and_grad(&f, &[1.0, 0.0]).unwrap();
        assert!(loss < 1e-8, "{loss}");

        let head = ConceptHead::new(Matrix::zeros(3, 1), vec![0.0; 3], CamPooling::Max).unwrap();
        let (loss, _) = head.bce_loss_and_grad(&f, &[1.0, 0.0, 1.0]).unwrap();
        assert!((loss - std::f64::consts::LN_2).abs() < 1e-15);
    }

    #[test]
    fn dimension_mismatch_errors() {
        let head = identity_head(2, 3, CamPooling::Max);
        assert!(head.cams(&FeatureMap::zeros(4, 1, 1)).is_err());
        assert!(head.bce_loss_and_grad(&FeatureMap::zeros(3, 1, 1), &[1.0]).is_err());
    }

    fn noiseless(n: usize) -> LoadedDataset {
        let cfg = SyntheticConfig { n_train: n, n_test: 0, noise: 0.0, ..SyntheticConfig::default() };
        synthesize(&cfg, 5).unwrap()
    }

    #[test]
    fn zero_epochs_returns_seeded_init() {
        let data = noiseless(8);
        let cfg = TrainConfig { epochs: 0, seed: 9, ..TrainConfig::default() };
        let trained = train_concept_head(&data, &cfg).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let init = ConceptHead::seeded(6, 64, 1.0 / 8.0, cfg.pooling, &mut rng);
        assert_eq!(trained.head, init);
    }

    #[test]
    fn empty_dataset_is_an_error() {
        let data = noiseless(0);
        assert!(matches!(train_concept_head(&data, &TrainConfig::default()), Err(CsrError::Empty(_))));
    }

    #[test]
    fn checkpoint_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let head = ConceptHead::seeded(3, 5, 0.4, CamPooling::Max, &mut rng);
        let path = dir.path().join("head.json");
        head.save(&path).unwrap();
        assert_eq!(ConceptHead::load(&path).unwrap(), head);
        let v: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&path).unwrap()).unwrap();
        assert_eq!(v["K"], 3);
        assert_eq!(v["C"], 5);
        assert_eq!(v["weights"].as_array().unwrap().len(), 15);
    }
}
