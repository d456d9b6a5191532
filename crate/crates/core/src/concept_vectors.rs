//! Local concept vectors (CAM-softmax pooling of patch features) and the similarity-map
//! diagnostics used to compare concepts across samples.

use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::concept_head::ConceptHead;
use crate::data::LoadedDataset;
use crate::error::{CsrError, Result};
use crate::prototypes::Projector;
use crate::tensor::{cosine, dot, norm, spatial_softmax, DenseVector, FeatureMap, Grid, MIN_NORM};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LocalConceptVector {
    pub sample_id: String,
    pub concept: usize,
    pub vector: DenseVector,
}

/// `v = sum_{h,w} softmax(cam)(h, w) f(:, h, w)`.
pub fn extract_local_vector(f: &FeatureMap, cam: &Grid) -> Result<DenseVector> {
    if cam.shape() != (f.height(), f.width()) {
        return Err(CsrError::shape("cam vs feature grid", f.height() * f.width(), cam.height() * cam.width()));
    }
    let weights = spatial_softmax(cam);
    let cells = f.cells();
    let v = f.data().chunks(cells).map(|plane| dot(plane, weights.values())).collect();
    Ok(DenseVector::from_vec_unchecked(v))
}

/// One vector per ground-truth-positive `(sample, concept)`, in sample then concept order.
pub fn extract_all(data: &LoadedDataset, head: &ConceptHead) -> Result<Vec<LocalConceptVector>> {
    if head.num_concepts() != data.manifest.num_concepts {
        return Err(CsrError::shape("concept head K vs manifest K", data.manifest.num_concepts, head.num_concepts()));
    }
    let mut out = Vec::new();
    for (sample, f) in data.iter() {
        let concepts: Vec<usize> = sample.positive_concepts().collect();
        if concepts.is_empty() {
            continue;
        }
        let cams = head.cams(f)?;
        for k in concepts {
            out.push(LocalConceptVector {
                sample_id: sample.id.clone(),
                concept: k,
                vector: extract_local_vector(f, &cams[k])?,
            });
        }
    }
    Ok(out)
}

/// Cosine of `v` against every cell, and the maximum (first in row-major order on ties).
/// Cells with a zero feature vector score 0.
pub fn local_similarity_map(v: &[f64], f: &FeatureMap) -> Result<(Grid, f64)> {
    if v.len() != f.channels() {
        return Err(CsrError::shape("local vector vs feature channels", f.channels(), v.len()));
    }
    if norm(v) <= MIN_NORM {
        return Err(CsrError::Domain("local concept vector has zero norm".into()));
    }
    let values = f
        .patches()
        .iter()
        .map(|p| if norm(p) <= MIN_NORM { Ok(0.0) } else { cosine(v, p) })
        .collect::<Result<Vec<_>>>()?;
    let grid = Grid::from_vec_unchecked(f.height(), f.width(), values);
    let score = grid.max();
    Ok((grid, score))
}

/// Which similarity populations to compare across samples.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PairMode {
    /// Cosine between local concept vectors of different samples.
    Vector,
    /// Max-over-cells score of a local vector on another sample's feature map.
    ImageScore,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub count: usize,
    pub mean: f64,
    pub min: f64,
    pub q1: f64,
    pub median: f64,
    pub q3: f64,
    pub max: f64,
}

impl Summary {
    /// Quartiles by linear interpolation between order statistics.
    pub fn of(values: &[f64]) -> Result<Self> {
        if values.is_empty() {
            return Err(CsrError::Empty("cannot summarise an empty population".into()));
        }
        let mut v = values.to_vec();
        v.sort_by(f64::total_cmp);
        let q = |p: f64| {
            let pos = p * (v.len() - 1) as f64;
            let lo = pos.floor() as usize;
            let hi = pos.ceil() as usize;
            v[lo] + (v[hi] - v[lo]) * (pos - lo as f64)
        };
        Ok(Self {
            count: v.len(),
            mean: v.iter().sum::<f64>() / v.len() as f64,
            min: v[0],
            q1: q(0.25),
            median: q(0.5),
            q3: q(0.75),
            max: v[v.len() - 1],
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IntraInterStats {
    pub mode: PairMode,
    pub projected: bool,
    pub intra: Summary,
    pub inter: Summary,
}

impl IntraInterStats {
    pub fn gap(&self) -> f64 {
        self.intra.mean - self.inter.mean
    }
}

fn maybe_project(projector: Option<&Projector>, v: &[f64]) -> Result<Vec<f64>> {
    match projector {
        Some(p) => Ok(p.project(v)?.into_vec()),
        None => Ok(crate::tensor::l2_normalize(v)?.into_vec()),
    }
}

/// Intra-concept (same concept) against inter-concept (different concept) similarity,
/// always across distinct samples, optionally in projected space.
///
/// In [`PairMode::ImageScore`] the partner is every other sample `j` carrying at least one
/// concept: intra when `j` carries the vector's concept, inter otherwise.
pub fn intra_inter_stats(
    vectors: &[LocalConceptVector],
    data: &LoadedDataset,
    projector: Option<&Projector>,
    mode: PairMode,
) -> Result<IntraInterStats> {
    let embedded = vectors.iter().map(|lv| maybe_project(projector, &lv.vector)).collect::<Result<Vec<_>>>()?;
    let mut intra = Vec::new();
    let mut inter = Vec::new();
    match mode {
        PairMode::Vector => {
            for (a, (va, ea)) in vectors.iter().zip(&embedded).enumerate() {
                for (vb, eb) in vectors.iter().zip(&embedded).skip(a + 1) {
                    if va.sample_id == vb.sample_id {
                        continue;
                    }
                    let s = dot(ea, eb);
                    if va.concept == vb.concept {
                        intra.push(s);
                    } else {
                        inter.push(s);
                    }
                }
            }
        }
        PairMode::ImageScore => {
            let identity;
            let proj = match projector {
                Some(p) => p,
                None => {
                    identity = Projector::identity(data.manifest.channels());
                    &identity
                }
            };
            let partners = data
                .iter()
                .filter(|(s, _)| s.concept_labels.contains(&1))
                .map(|(s, f)| Ok((s, proj.project_cells(f)?)))
                .collect::<Result<Vec<_>>>()?;
            for (lv, e) in vectors.iter().zip(&embedded) {
                for (sample, cells) in &partners {
                    if sample.id == lv.sample_id {
                        continue;
                    }
                    let score =
                        cells.iter().map(|c| c.as_ref().map_or(0.0, |u| dot(e, u))).fold(f64::NEG_INFINITY, f64::max);
                    if sample.has_concept(lv.concept) {
                        intra.push(score);
                    } else {
                        inter.push(score);
                    }
                }
            }
        }
    }
    if intra.is_empty() || inter.is_empty() {
        return Err(CsrError::Empty("need at least two samples per concept and two distinct concepts".into()));
    }
    Ok(IntraInterStats {
        mode,
        projected: projector.is_some(),
        intra: Summary::of(&intra)?,
        inter: Summary::of(&inter)?,
    })
}

pub fn write_vectors_jsonl(path: impl AsRef<Path>, vectors: &[LocalConceptVector]) -> Result<()> {
    let path = path.as_ref();
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| CsrError::io(parent, e))?;
    }
    let file = fs::File::create(path).map_err(|e| CsrError::io(path, e))?;
    let mut w = BufWriter::new(file);
    for v in vectors {
        let line = serde_json::to_string(v).map_err(|e| CsrError::Json { path: path.to_path_buf(), source: e })?;
        writeln!(w, "{line}").map_err(|e| CsrError::io(path, e))?;
    }
    w.flush().map_err(|e| CsrError::io(path, e))
}

pub fn read_vectors_jsonl(path: impl AsRef<Path>) -> Result<Vec<LocalConceptVector>> {
    let path = path.as_ref();
    let file = fs::File::open(path).map_err(|e| CsrError::io(path, e))?;
    let mut out = Vec::new();
    for line in BufReader::new(file).lines() {
        let line = line.map_err(|e| CsrError::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| CsrError::Json { path: path.to_path_buf(), source: e })?);
    }
    Ok(out)
}
