//! Deterministic synthetic datasets with planted concept regions.
//!
//! Concept `k` lives on channel `k`: each present concept gets a rectangular block of
//! cells whose features are `amplitude * e_k + N(0, noise)`, and its pixel box is
//! recorded. Background cells are pure `N(0, noise)`. The class is that of the
//! highest-priority present concept, or the background class when none is present.
//!
//! Two optional corruptions support the refinement and interaction harnesses:
//! a class-correlated shortcut blob on a spare channel, and an off-target
//! distractor blob (test split only) that partially aligns with an absent concept.

use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::format::write_feature_map;
use super::manifest::{ConceptBox, DatasetManifest, LoadedDataset, Sample, Split, MANIFEST_VERSION};
use crate::error::{CsrError, Result};
use crate::geometry::{GridGeometry, ImageSize};
use crate::tensor::FeatureMap;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticConfig {
    pub n_train: usize,
    pub n_test: usize,
    pub num_concepts: usize,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    /// Pixels per grid cell along each axis.
    pub cell_pixels: u32,
    pub blob_min: usize,
    pub blob_max: usize,
    pub noise: f64,
    pub amplitude: f64,
    pub concept_prob: f64,
    pub num_classes: usize,
    pub class_of_concept: Vec<usize>,
    /// Concept indices, highest priority first.
    pub priority: Vec<usize>,
    pub background_class: usize,
    pub shortcut: Option<ShortcutConfig>,
    pub distractor: Option<DistractorConfig>,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            n_train: 200,
            n_test: 100,
            num_concepts: 6,
            channels: 64,
            height: 14,
            width: 14,
            cell_pixels: 16,
            blob_min: 2,
            blob_max: 3,
            noise: 0.1,
            amplitude: 1.0,
            concept_prob: 0.3,
            num_classes: 4,
            class_of_concept: vec![1, 1, 2, 2, 3, 3],
            priority: vec![0, 1, 2, 3, 4, 5],
            background_class: 0,
            shortcut: None,
            distractor: None,
        }
    }
}

/// A blob on a spare channel planted in samples of one class, away from concept boxes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ShortcutConfig {
    pub class: usize,
    pub probability: f64,
    pub channel: usize,
    pub size: usize,
    pub amplitude: f64,
}

/// An off-target blob `a*e_d + b*e_spare` with alignment `a` drawn uniformly from
/// `[min_alignment, max_alignment]` and `a^2 + b^2 = 1`, where `d` is an absent concept
/// of a different class. Planted in test samples that have at least one concept.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DistractorConfig {
    pub spare_channel: usize,
    pub min_alignment: f64,
    pub max_alignment: f64,
    pub size: usize,
}

impl SyntheticConfig {
    /// Backbone-like width. At C=64 an absent concept still scores about `2.8/sqrt(C)`
    /// (the best cosine against pure-noise cells), which the task head learns to lean
    /// on. The noise is scaled so `noise * sqrt(C)` matches the default.
    pub fn benchmark() -> Self {
        Self { channels: 256, noise: 0.05, ..Self::default() }
    }

    /// Benchmark set whose test samples carry an off-target distractor blob. Only a few
    /// percent of corrupted samples come out indecisive, so the test split is large enough
    /// for the oracle gain to be more than a handful of samples. Training samples are
    /// drawn first and match [`SyntheticConfig::benchmark`].
    pub fn benchmark_distractor() -> Self {
        Self {
            n_test: 1000,
            distractor: Some(DistractorConfig { spare_channel: 254, min_alignment: 0.6, max_alignment: 0.8, size: 2 }),
            ..Self::benchmark()
        }
    }

    /// Benchmark set with a shortcut blob planted in most samples of class 1.
    pub fn benchmark_shortcut() -> Self {
        Self {
            shortcut: Some(ShortcutConfig { class: 1, probability: 0.9, channel: 255, size: 2, amplitude: 1.0 }),
            ..Self::benchmark()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(CsrError::InvalidConfig(m));
        let k = self.num_concepts;
        if k == 0 || self.num_classes == 0 {
            return bad("num_concepts and num_classes must be positive".into());
        }
        if k > self.channels {
            return bad(format!("K={k} exceeds channel count C={}", self.channels));
        }
        if self.height == 0 || self.width == 0 || self.cell_pixels == 0 {
            return bad("grid and cell sizes must be positive".into());
        }
        if self.blob_min == 0 || self.blob_min > self.blob_max {
            return bad(format!("invalid blob size range {}..={}", self.blob_min, self.blob_max));
        }
        if self.blob_max > self.height || self.blob_max > self.width {
            return bad(format!("blob size {} larger than grid {}x{}", self.blob_max, self.height, self.width));
        }
        if !(self.noise >= 0.0 && self.noise.is_finite()) {
            return bad(format!("noise must be >= 0, got {}", self.noise));
        }
        if !(0.0..=1.0).contains(&self.concept_prob) {
            return bad(format!("concept_prob {} outside [0, 1]", self.concept_prob));
        }
        if self.class_of_concept.len() != k {
            return bad(format!("class_of_concept has {} entries for K={k}", self.class_of_concept.len()));
        }
        if let Some(c) = self.class_of_concept.iter().find(|&&c| c >= self.num_classes) {
            return bad(format!("class {c} >= L={}", self.num_classes));
        }
        if self.background_class >= self.num_classes {
            return bad(format!("background class {} >= L", self.background_class));
        }
        let mut seen = vec![false; k];
        for &p in &self.priority {
            if p >= k || std::mem::replace(&mut seen[p], true) {
                return bad(format!("priority must be a permutation of 0..{k}"));
            }
        }
        if self.priority.len() != k {
            return bad(format!("priority must be a permutation of 0..{k}"));
        }
        let spare = |ch: usize, what: &str| -> Result<()> {
            if ch < k || ch >= self.channels {
                return Err(CsrError::InvalidConfig(format!(
                    "{what} channel {ch} must lie in [K, C) = [{k}, {})",
                    self.channels
                )));
            }
            Ok(())
        };
        if let Some(s) = &self.shortcut {
            spare(s.channel, "shortcut")?;
            if s.class >= self.num_classes || s.size == 0 || s.size > self.height.min(self.width) {
                return bad("invalid shortcut class or size".into());
            }
        }
        if let Some(d) = &self.distractor {
            spare(d.spare_channel, "distractor")?;
            if self.shortcut.as_ref().is_some_and(|s| s.channel == d.spare_channel) {
                return bad("shortcut and distractor must use different channels".into());
            }
            if !(0.0 <= d.min_alignment && d.min_alignment <= d.max_alignment && d.max_alignment <= 1.0) {
                return bad("distractor alignment range must lie in [0, 1]".into());
            }
            if d.size == 0 || d.size > self.height.min(self.width) {
                return bad("invalid distractor size".into());
            }
        }
        Ok(())
    }

    fn image_size(&self) -> ImageSize {
        ImageSize::new(self.width as u32 * self.cell_pixels, self.height as u32 * self.cell_pixels)
    }

    /// Class assigned to a concept subset by the priority rule.
    pub fn target_for(&self, labels: &[u8]) -> usize {
        self.priority
            .iter()
            .find(|&&k| labels[k] == 1)
            .map(|&k| self.class_of_concept[k])
            .unwrap_or(self.background_class)
    }

    pub fn concept_names(&self) -> Vec<String> {
        (0..self.num_concepts).map(|k| format!("concept_{k}")).collect()
    }

    pub fn class_names(&self) -> Vec<String> {
        (0..self.num_classes)
            .map(|c| if c == self.background_class { "background".to_string() } else { format!("class_{c}") })
            .collect()
    }
}

struct Canvas<'a> {
    cfg: &'a SyntheticConfig,
    occupied: Vec<bool>,
}

impl<'a> Canvas<'a> {
    fn new(cfg: &'a SyntheticConfig) -> Self {
        Self { cfg, occupied: vec![false; cfg.height * cfg.width] }
    }

    /// Reserves a free `bh x bw` block, uniformly among all free positions, and
    /// returns its top-left cell.
    fn place(&mut self, rng: &mut ChaCha8Rng, bh: usize, bw: usize) -> Result<(usize, usize)> {
        let (h, w) = (self.cfg.height, self.cfg.width);
        let free: Vec<(usize, usize)> = (0..=h - bh)
            .flat_map(|r| (0..=w - bw).map(move |c| (r, c)))
            .filter(|&(r, c)| (r..r + bh).all(|y| (c..c + bw).all(|x| !self.occupied[y * w + x])))
            .collect();
        if free.is_empty() {
            return Err(CsrError::InvalidConfig(format!(
                "could not place a {bh}x{bw} block on a {h}x{w} grid without overlap"
            )));
        }
        let (r, c) = free[rng.random_range(0..free.len())];
        for y in r..r + bh {
            for x in c..c + bw {
                self.occupied[y * w + x] = true;
            }
        }
        Ok((r, c))
    }
}

fn paint(f: &mut FeatureMap, top: (usize, usize), size: (usize, usize), direction: &[(usize, f64)]) {
    for h in top.0..top.0 + size.0 {
        for w in top.1..top.1 + size.1 {
            for &(c, a) in direction {
                let v = f.value(c, h, w) + a;
                f.set(c, h, w, v);
            }
        }
    }
}

/// Builds the dataset in memory. Feature values are already rounded to `f32`, so they
/// equal what [`write_synthetic`] puts on disk.
pub fn synthesize(cfg: &SyntheticConfig, seed: u64) -> Result<LoadedDataset> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = if cfg.noise > 0.0 {
        Some(Normal::new(0.0, cfg.noise).map_err(|e| CsrError::InvalidConfig(e.to_string()))?)
    } else {
        None
    };
    let image = cfg.image_size();
    let geometry = GridGeometry::new(cfg.height, cfg.width, image)?;
    let k_count = cfg.num_concepts;
    let rank: Vec<usize> = {
        let mut r = vec![0; k_count];
        for (i, &k) in cfg.priority.iter().enumerate() {
            r[k] = i;
        }
        r
    };

    let mut samples = Vec::with_capacity(cfg.n_train + cfg.n_test);
    let mut features = Vec::with_capacity(cfg.n_train + cfg.n_test);
    let splits = std::iter::repeat_n(Split::Train, cfg.n_train)
        .enumerate()
        .chain(std::iter::repeat_n(Split::Test, cfg.n_test).enumerate());
    for (index, split) in splits {
        let id = match split {
            Split::Train => format!("train-{index:04}"),
            Split::Test => format!("test-{index:04}"),
        };
        let labels: Vec<u8> = (0..k_count).map(|_| u8::from(rng.random::<f64>() < cfg.concept_prob)).collect();

        let mut f = FeatureMap::zeros(cfg.channels, cfg.height, cfg.width);
        if let Some(dist) = &noise {
            for c in 0..cfg.channels {
                for h in 0..cfg.height {
                    for w in 0..cfg.width {
                        f.set(c, h, w, dist.sample(&mut rng));
                    }
                }
            }
        }

        let mut canvas = Canvas::new(cfg);
        let mut boxes = Vec::new();
        for k in (0..k_count).filter(|&k| labels[k] == 1) {
            let bh = rng.random_range(cfg.blob_min..=cfg.blob_max);
            let bw = rng.random_range(cfg.blob_min..=cfg.blob_max);
            let top = canvas.place(&mut rng, bh, bw)?;
            paint(&mut f, top, (bh, bw), &[(k, cfg.amplitude)]);
            boxes.push(ConceptBox { concept: k, bbox: geometry.block_box(top.0, top.1, bh, bw) });
        }
        let target = cfg.target_for(&labels);

        if let Some(s) = &cfg.shortcut {
            if target == s.class && rng.random::<f64>() < s.probability {
                let top = canvas.place(&mut rng, s.size, s.size)?;
                paint(&mut f, top, (s.size, s.size), &[(s.channel, s.amplitude)]);
            }
        }

        if let (Some(d), Split::Test) = (&cfg.distractor, split) {
            if labels.contains(&1) {
                let deciding = cfg.priority.iter().find(|&&k| labels[k] == 1).copied().unwrap();
                // Prefer an absent concept that outranks the deciding one and maps to another class.
                let candidates: Vec<usize> = cfg
                    .priority
                    .iter()
                    .copied()
                    .filter(|&k| labels[k] == 0 && cfg.class_of_concept[k] != target)
                    .collect();
                let chosen = candidates
                    .iter()
                    .copied()
                    .find(|&k| rank[k] < rank[deciding])
                    .or_else(|| candidates.first().copied());
                if let Some(k) = chosen {
                    let align = rng.random_range(d.min_alignment..=d.max_alignment);
                    let ortho = (1.0 - align * align).max(0.0).sqrt();
                    let top = canvas.place(&mut rng, d.size, d.size)?;
                    paint(
                        &mut f,
                        top,
                        (d.size, d.size),
                        &[(k, cfg.amplitude * align), (d.spare_channel, cfg.amplitude * ortho)],
                    );
                }
            }
        }

        let rounded: Vec<f64> = f.data().iter().map(|&v| v as f32 as f64).collect();
        features.push(FeatureMap::new(cfg.channels, cfg.height, cfg.width, rounded)?);
        samples.push(Sample {
            feature_path: format!("features/{id}.csrf"),
            id,
            concept_labels: labels,
            target_class: target,
            image_size: image,
            image_path: None,
            concept_boxes: boxes,
            split,
        });
    }

    let manifest = DatasetManifest {
        version: MANIFEST_VERSION,
        num_concepts: k_count,
        num_classes: cfg.num_classes,
        concept_names: cfg.concept_names(),
        class_names: cfg.class_names(),
        feature_dims: [cfg.channels, cfg.height, cfg.width],
        samples,
        root: PathBuf::new(),
    };
    manifest.validate_schema()?;
    Ok(LoadedDataset { manifest, features })
}

/// Writes `manifest.json` and `features/*.csrf` under `out_dir`.
pub fn write_synthetic(data: &LoadedDataset, out_dir: impl AsRef<Path>) -> Result<PathBuf> {
    let out_dir = out_dir.as_ref();
    let features_dir = out_dir.join("features");
    fs::create_dir_all(&features_dir).map_err(|e| CsrError::io(&features_dir, e))?;
    for (sample, f) in data.iter() {
        write_feature_map(out_dir.join(&sample.feature_path), f)?;
    }
    let path = out_dir.join("manifest.json");
    data.manifest.save(&path)?;
    Ok(path)
}

/// Generates a dataset and writes it under `out_dir`; returns the manifest rooted there.
pub fn generate_synthetic(cfg: &SyntheticConfig, seed: u64, out_dir: impl AsRef<Path>) -> Result<DatasetManifest> {
    let data = synthesize(cfg, seed)?;
    write_synthetic(&data, &out_dir)?;
    let mut manifest = data.manifest;
    manifest.root = out_dir.as_ref().to_path_buf();
    Ok(manifest)
}
