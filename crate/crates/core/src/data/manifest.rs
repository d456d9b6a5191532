use std::collections::HashSet;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::format::{load_feature_map, read_header};
use crate::error::{CsrError, Result};
use crate::geometry::{GridGeometry, ImageSize, PixelBox};
use crate::tensor::FeatureMap;

pub const MANIFEST_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConceptBox {
    pub concept: usize,
    #[serde(rename = "box")]
    pub bbox: PixelBox,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub id: String,
    /// Relative paths resolve against the manifest's directory.
    pub feature_path: String,
    pub concept_labels: Vec<u8>,
    pub target_class: usize,
    pub image_size: ImageSize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub image_path: Option<String>,
    #[serde(default)]
    pub concept_boxes: Vec<ConceptBox>,
    pub split: Split,
}

impl Sample {
    pub fn has_concept(&self, k: usize) -> bool {
        self.concept_labels.get(k).is_some_and(|&l| l == 1)
    }

    pub fn positive_concepts(&self) -> impl Iterator<Item = usize> + '_ {
        self.concept_labels.iter().enumerate().filter(|(_, &l)| l == 1).map(|(k, _)| k)
    }

    pub fn boxes_for(&self, concept: usize) -> impl Iterator<Item = &PixelBox> + '_ {
        self.concept_boxes.iter().filter(move |b| b.concept == concept).map(|b| &b.bbox)
    }

    pub fn all_boxes(&self) -> Vec<PixelBox> {
        self.concept_boxes.iter().map(|b| b.bbox).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub version: u32,
    #[serde(rename = "K")]
    pub num_concepts: usize,
    #[serde(rename = "L")]
    pub num_classes: usize,
    pub concept_names: Vec<String>,
    pub class_names: Vec<String>,
    /// `[C, H, W]` shared by every sample.
    pub feature_dims: [usize; 3],
    pub samples: Vec<Sample>,
    #[serde(skip)]
    pub root: PathBuf,
}

fn schema(sample: Option<&str>, message: impl Into<String>) -> CsrError {
    CsrError::Schema { sample: sample.map(str::to_owned), message: message.into() }
}

impl DatasetManifest {
    pub fn channels(&self) -> usize {
        self.feature_dims[0]
    }

    pub fn grid_shape(&self) -> (usize, usize) {
        (self.feature_dims[1], self.feature_dims[2])
    }

    pub fn resolve(&self, relative: &str) -> PathBuf {
        let p = Path::new(relative);
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.root.join(p)
        }
    }

    pub fn sample(&self, id: &str) -> Option<&Sample> {
        self.samples.iter().find(|s| s.id == id)
    }

    pub fn split(&self, split: Split) -> Vec<&Sample> {
        self.samples.iter().filter(|s| s.split == split).collect()
    }

    pub fn geometry(&self, sample: &Sample) -> Result<GridGeometry> {
        let (h, w) = self.grid_shape();
        GridGeometry::new(h, w, sample.image_size)
    }

    pub fn load_features(&self, sample: &Sample) -> Result<FeatureMap> {
        let f = load_feature_map(self.resolve(&sample.feature_path))?;
        let [c, h, w] = self.feature_dims;
        if f.dims() != (c, h, w) {
            return Err(CsrError::DimensionMismatch {
                sample: sample.id.clone(),
                message: format!("feature map is {:?}, manifest declares {:?}", f.dims(), (c, h, w)),
            });
        }
        Ok(f)
    }

    /// Structural checks that do not touch the filesystem.
    pub fn validate_schema(&self) -> Result<()> {
        if self.version != MANIFEST_VERSION {
            return Err(schema(None, format!("unsupported manifest version {}", self.version)));
        }
        if self.num_concepts == 0 || self.num_classes == 0 {
            return Err(schema(None, "K and L must be positive"));
        }
        if self.concept_names.len() != self.num_concepts {
            return Err(schema(
                None,
                format!("{} concept names for K={}", self.concept_names.len(), self.num_concepts),
            ));
        }
        if self.class_names.len() != self.num_classes {
            return Err(schema(None, format!("{} class names for L={}", self.class_names.len(), self.num_classes)));
        }
        check_unique("concept name", &self.concept_names)?;
        check_unique("class name", &self.class_names)?;
        if self.feature_dims.contains(&0) {
            return Err(schema(None, format!("feature_dims {:?} must be positive", self.feature_dims)));
        }
        let mut ids = HashSet::new();
        for s in &self.samples {
            let id = Some(s.id.as_str());
            if !ids.insert(s.id.as_str()) {
                return Err(schema(id, "duplicate sample id"));
            }
            if s.concept_labels.len() != self.num_concepts {
                return Err(schema(
                    id,
                    format!("{} concept labels declared under K={}", s.concept_labels.len(), self.num_concepts),
                ));
            }
            if s.concept_labels.iter().any(|&l| l > 1) {
                return Err(schema(id, "concept labels must be 0 or 1"));
            }
            if s.target_class >= self.num_classes {
                return Err(schema(id, format!("target_class {} >= L={}", s.target_class, self.num_classes)));
            }
            if s.image_size.width == 0 || s.image_size.height == 0 {
                return Err(schema(id, "image_size must be positive"));
            }
            for b in &s.concept_boxes {
                if b.concept >= self.num_concepts {
                    return Err(schema(id, format!("box concept {} >= K", b.concept)));
                }
                b.bbox.validate(s.image_size).map_err(|m| schema(id, m))?;
            }
        }
        Ok(())
    }

    /// Schema checks plus: every feature file exists and its header matches `feature_dims`.
    pub fn validate_files(&self) -> Result<()> {
        self.validate_schema()?;
        let [c, h, w] = self.feature_dims;
        for s in &self.samples {
            let path = self.resolve(&s.feature_path);
            if !path.exists() {
                return Err(schema(Some(&s.id), format!("feature file {} does not exist", path.display())));
            }
            let header = read_header(&path)?;
            let found = (header.channels as usize, header.height as usize, header.width as usize);
            if found != (c, h, w) {
                return Err(CsrError::DimensionMismatch {
                    sample: s.id.clone(),
                    message: format!("file header is {found:?}, manifest declares {:?}", (c, h, w)),
                });
            }
        }
        Ok(())
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("manifest serializes");
        s.push('\n');
        s
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_json()).map_err(|e| CsrError::io(path, e))
    }
}

fn check_unique(what: &str, names: &[String]) -> Result<()> {
    let mut seen = HashSet::new();
    for n in names {
        if !seen.insert(n) {
            return Err(schema(None, format!("duplicate {what} {n:?}")));
        }
    }
    Ok(())
}

/// Parses and fully validates a manifest, including feature-file headers.
pub fn load_manifest(path: impl AsRef<Path>) -> Result<DatasetManifest> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| CsrError::io(path, e))?;
    let mut manifest: DatasetManifest = serde_json::from_str(&text).map_err(|e| schema(None, e.to_string()))?;
    manifest.root = path.parent().map(Path::to_path_buf).unwrap_or_else(|| PathBuf::from("."));
    manifest.validate_files()?;
    Ok(manifest)
}

/// A manifest together with every sample's feature map, in manifest order.
#[derive(Debug, Clone)]
pub struct LoadedDataset {
    pub manifest: DatasetManifest,
    pub features: Vec<FeatureMap>,
}

impl LoadedDataset {
    pub fn load(manifest: DatasetManifest) -> Result<Self> {
        let features = manifest.samples.iter().map(|s| manifest.load_features(s)).collect::<Result<Vec<_>>>()?;
        Ok(Self { manifest, features })
    }

    pub fn from_path(path: impl AsRef<Path>) -> Result<Self> {
        Self::load(load_manifest(path)?)
    }

    pub fn len(&self) -> usize {
        self.features.len()
    }

    pub fn is_empty(&self) -> bool {
        self.features.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&Sample, &FeatureMap)> {
        self.manifest.samples.iter().zip(&self.features)
    }

    /// A new dataset holding only the samples of one split.
    pub fn subset(&self, split: Split) -> LoadedDataset {
        let (samples, features): (Vec<_>, Vec<_>) =
            self.iter().filter(|(s, _)| s.split == split).map(|(s, f)| (s.clone(), f.clone())).unzip();
        LoadedDataset { manifest: DatasetManifest { samples, ..self.manifest.clone() }, features }
    }
}
