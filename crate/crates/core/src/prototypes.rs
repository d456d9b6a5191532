//! Projector, prototype atlas and the contrastive multi-prototype objective.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::concept_vectors::LocalConceptVector;
use crate::data::LoadedDataset;
use crate::error::{CsrError, Result};
use crate::tensor::{dot, log_sum_exp, norm, scaled_softmax, softmax, DenseVector, FeatureMap, Grid, Matrix, MIN_NORM};

/// Tolerance on prototype norms when loading or validating an atlas.
pub const UNIT_NORM_TOLERANCE: f64 = 1e-9;

/// Bias-free linear map `D x C` followed by L2 normalisation.
#[derive(Debug, Clone, PartialEq)]
pub struct Projector {
    matrix: Matrix,
}

#[derive(Serialize, Deserialize)]
struct ProjectorCheckpoint {
    #[serde(rename = "D")]
    d: usize,
    #[serde(rename = "C")]
    c: usize,
    matrix: Vec<f64>,
}

impl Projector {
    pub fn new(matrix: Matrix) -> Result<Self> {
        if matrix.rows() == 0 || matrix.cols() == 0 {
            return Err(CsrError::InvalidConfig("projector needs D >= 1 and C >= 1".into()));
        }
        Ok(Self { matrix })
    }

    pub fn identity(channels: usize) -> Self {
        Self { matrix: Matrix::eye(channels, channels) }
    }

    /// Identity padded or truncated to `D x C`, plus uniform noise in `[-0.01, 0.01]`.
    pub fn near_identity(dim: usize, channels: usize, rng: &mut impl Rng) -> Self {
        let mut matrix = Matrix::eye(dim, channels);
        for x in matrix.data_mut() {
            *x += rng.random_range(-0.01..=0.01);
        }
        Self { matrix }
    }

    pub fn dim(&self) -> usize {
        self.matrix.rows()
    }

    pub fn channels(&self) -> usize {
        self.matrix.cols()
    }

    pub fn matrix(&self) -> &Matrix {
        &self.matrix
    }

    pub(crate) fn matrix_mut(&mut self) -> &mut Matrix {
        &mut self.matrix
    }

    /// `P v` before normalisation.
    pub fn apply(&self, v: &[f64]) -> Result<Vec<f64>> {
        if v.len() != self.channels() {
            return Err(CsrError::shape("projector input", self.channels(), v.len()));
        }
        Ok(self.matrix.matvec(v))
    }

    pub fn project(&self, v: &[f64]) -> Result<DenseVector> {
        let u = self.apply(v)?;
        let n = norm(&u);
        if n <= MIN_NORM {
            return Err(CsrError::Domain("degenerate projection: P v has zero norm".into()));
        }
        Ok(DenseVector::from_vec_unchecked(u.into_iter().map(|x| x / n).collect()))
    }

    /// Projects every cell of a feature map; cells whose projection vanishes are `None`.
    pub fn project_cells(&self, f: &FeatureMap) -> Result<Vec<Option<Vec<f64>>>> {
        if f.channels() != self.channels() {
            return Err(CsrError::shape("feature channels", self.channels(), f.channels()));
        }
        let cells = f.cells();
        let data = f.data();
        let d = self.dim();
        let mut out = vec![0.0; d * cells];
        for r in 0..d {
            let row = self.matrix.row(r);
            let dst = &mut out[r * cells..(r + 1) * cells];
            for (c, &w) in row.iter().enumerate() {
                if w == 0.0 {
                    continue;
                }
                for (o, x) in dst.iter_mut().zip(&data[c * cells..(c + 1) * cells]) {
                    *o += w * x;
                }
            }
        }
        Ok((0..cells)
            .map(|cell| {
                let u: Vec<f64> = (0..d).map(|r| out[r * cells + cell]).collect();
                let n = norm(&u);
                (n > MIN_NORM).then(|| u.into_iter().map(|x| x / n).collect())
            })
            .collect())
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        crate::checkpoint::write_json(
            path,
            &ProjectorCheckpoint { d: self.dim(), c: self.channels(), matrix: self.matrix.data().to_vec() },
        )
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let ck: ProjectorCheckpoint = crate::checkpoint::read_json(path)?;
        Projector::new(Matrix::new(ck.d, ck.c, ck.matrix)?)
    }
}

pub fn project(p: &Projector, v: &[f64]) -> Result<DenseVector> {
    p.project(v)
}

/// Prototype `m` of concept `k`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct PrototypeId {
    pub k: usize,
    pub m: usize,
}

impl PrototypeId {
    pub fn new(k: usize, m: usize) -> Self {
        Self { k, m }
    }
}

impl fmt::Display for PrototypeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}", self.k, self.m)
    }
}

impl FromStr for PrototypeId {
    type Err = CsrError;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || CsrError::InvalidConfig(format!("prototype id {s:?} is not of the form k:m"));
        let (k, m) = s.split_once(':').ok_or_else(bad)?;
        Ok(Self { k: k.trim().parse().map_err(|_| bad())?, m: m.trim().parse().map_err(|_| bad())? })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub source_sample_id: String,
    /// `(h, w)` grid cell highlighted on the source sample.
    pub source_cell: (usize, usize),
    pub similarity_at_link: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub image_path: Option<String>,
}

/// The `M * K` unit prototypes, stored k-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "AtlasRepr", into = "AtlasRepr")]
pub struct Atlas {
    num_concepts: usize,
    per_concept: usize,
    dim: usize,
    prototypes: Vec<DenseVector>,
    provenance: Vec<Option<Provenance>>,
    discarded: Vec<bool>,
}

#[derive(Serialize, Deserialize)]
struct AtlasRepr {
    #[serde(rename = "K")]
    k: usize,
    #[serde(rename = "M")]
    m: usize,
    #[serde(rename = "D")]
    d: usize,
    prototypes: Vec<DenseVector>,
    provenance: Vec<Option<Provenance>>,
    discarded: Vec<bool>,
}

impl TryFrom<AtlasRepr> for Atlas {
    type Error = CsrError;

    fn try_from(r: AtlasRepr) -> Result<Self> {
        let atlas = Atlas {
            num_concepts: r.k,
            per_concept: r.m,
            dim: r.d,
            prototypes: r.prototypes,
            provenance: r.provenance,
            discarded: r.discarded,
        };
        atlas.validate()?;
        Ok(atlas)
    }
}

impl From<Atlas> for AtlasRepr {
    fn from(a: Atlas) -> Self {
        AtlasRepr {
            k: a.num_concepts,
            m: a.per_concept,
            d: a.dim,
            prototypes: a.prototypes,
            provenance: a.provenance,
            discarded: a.discarded,
        }
    }
}

impl Atlas {
    /// Builds an atlas from k-major prototypes; each is normalised.
    pub fn new(num_concepts: usize, per_concept: usize, prototypes: Vec<Vec<f64>>) -> Result<Self> {
        if num_concepts == 0 || per_concept == 0 {
            return Err(CsrError::InvalidConfig("atlas needs K >= 1 and M >= 1".into()));
        }
        if prototypes.len() != num_concepts * per_concept {
            return Err(CsrError::shape("atlas prototypes", num_concepts * per_concept, prototypes.len()));
        }
        let dim = prototypes[0].len();
        let prototypes = prototypes
            .iter()
            .map(|p| {
                if p.len() != dim {
                    return Err(CsrError::shape("prototype dimension", dim, p.len()));
                }
                crate::tensor::l2_normalize(p)
            })
            .collect::<Result<Vec<_>>>()?;
        let n = prototypes.len();
        Ok(Self { num_concepts, per_concept, dim, prototypes, provenance: vec![None; n], discarded: vec![false; n] })
    }

    /// Seeded standard-normal directions, normalised.
    pub fn seeded(num_concepts: usize, per_concept: usize, dim: usize, rng: &mut impl Rng) -> Result<Self> {
        let prototypes = (0..num_concepts * per_concept)
            .map(|_| (0..dim).map(|_| rng.sample::<f64, _>(StandardNormal)).collect())
            .collect();
        Atlas::new(num_concepts, per_concept, prototypes)
    }

    fn validate(&self) -> Result<()> {
        let n = self.num_concepts * self.per_concept;
        if n == 0 || self.dim == 0 {
            return Err(CsrError::InvalidConfig("atlas needs K, M, D >= 1".into()));
        }
        if self.prototypes.len() != n || self.provenance.len() != n || self.discarded.len() != n {
            return Err(CsrError::InvalidConfig(format!("atlas lists must all have K*M = {n} entries")));
        }
        for (i, p) in self.prototypes.iter().enumerate() {
            if p.dim() != self.dim {
                return Err(CsrError::shape("prototype dimension", self.dim, p.dim()));
            }
            if !self.discarded[i] && (p.norm() - 1.0).abs() > UNIT_NORM_TOLERANCE {
                return Err(CsrError::Domain(format!("prototype {} has norm {}, expected 1", self.id_of(i), p.norm())));
            }
        }
        Ok(())
    }

    pub fn num_concepts(&self) -> usize {
        self.num_concepts
    }

    pub fn per_concept(&self) -> usize {
        self.per_concept
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.prototypes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.prototypes.is_empty()
    }

    pub fn index(&self, id: PrototypeId) -> Result<usize> {
        if id.k >= self.num_concepts || id.m >= self.per_concept {
            return Err(CsrError::UnknownPrototype { concept: id.k, index: id.m });
        }
        Ok(id.k * self.per_concept + id.m)
    }

    pub fn id_of(&self, index: usize) -> PrototypeId {
        PrototypeId::new(index / self.per_concept, index % self.per_concept)
    }

    pub fn ids(&self) -> impl Iterator<Item = PrototypeId> + '_ {
        (0..self.len()).map(|i| self.id_of(i))
    }

    pub fn prototype(&self, index: usize) -> &DenseVector {
        &self.prototypes[index]
    }

    pub fn prototypes(&self) -> &[DenseVector] {
        &self.prototypes
    }

    /// The `M` prototypes of concept `k`.
    pub fn concept(&self, k: usize) -> &[DenseVector] {
        &self.prototypes[k * self.per_concept..(k + 1) * self.per_concept]
    }

    pub fn provenance(&self, index: usize) -> Option<&Provenance> {
        self.provenance[index].as_ref()
    }

    pub fn is_discarded(&self, index: usize) -> bool {
        self.discarded[index]
    }

    pub fn discarded(&self) -> &[bool] {
        &self.discarded
    }

    pub fn live_in_concept(&self, k: usize) -> usize {
        (0..self.per_concept).filter(|m| !self.discarded[k * self.per_concept + m]).count()
    }

    /// Copy with the given prototypes flagged (or unflagged).
    pub fn with_discarded(&self, ids: &[PrototypeId], discarded: bool) -> Result<Atlas> {
        let mut out = self.clone();
        for &id in ids {
            let i = self.index(id)?;
            out.discarded[i] = discarded;
        }
        Ok(out)
    }

    pub(crate) fn set_prototypes_unchecked(&mut self, flat: &[f64]) {
        for (p, chunk) in self.prototypes.iter_mut().zip(flat.chunks(self.dim)) {
            *p = DenseVector::from_vec_unchecked(chunk.to_vec());
        }
    }

    pub(crate) fn flat(&self) -> Vec<f64> {
        self.prototypes.iter().flat_map(|p| p.iter().copied()).collect()
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        crate::checkpoint::write_json(path, self)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        crate::checkpoint::read_json(path)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ContrastiveConfig {
    pub lambda: f64,
    pub gamma: f64,
    pub delta: f64,
    #[serde(rename = "M")]
    pub num_prototypes: usize,
    /// Projected dimension; `None` keeps `D = C`.
    #[serde(rename = "D")]
    pub dim: Option<usize>,
    pub learning_rate: f64,
    pub epochs: usize,
    pub seed: u64,
}

impl Default for ContrastiveConfig {
    fn default() -> Self {
        Self {
            lambda: 10.0,
            gamma: 10.0,
            delta: 0.01,
            num_prototypes: 3,
            dim: None,
            learning_rate: 0.05,
            epochs: 300,
            seed: 0,
        }
    }
}

impl ContrastiveConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(CsrError::InvalidConfig(m));
        if !(self.lambda > 1.0 && self.lambda.is_finite()) {
            return bad(format!("lambda must exceed 1, got {}", self.lambda));
        }
        if !(self.gamma > 1.0 && self.gamma.is_finite()) {
            return bad(format!("gamma must exceed 1, got {}", self.gamma));
        }
        if !(self.delta >= 0.0 && self.delta.is_finite()) {
            return bad(format!("delta must be non-negative, got {}", self.delta));
        }
        if self.num_prototypes == 0 {
            return bad("M must be positive".into());
        }
        if self.dim == Some(0) {
            return bad("D must be positive".into());
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad("learning_rate must be positive".into());
        }
        Ok(())
    }
}

fn check_concept(k: usize, num_concepts: usize) -> Result<()> {
    if k >= num_concepts {
        return Err(CsrError::OutOfRange(format!("concept {k} out of range for K = {num_concepts}")));
    }
    Ok(())
}

/// `-log softmax_k(lambda <p_k, v'>)` at `target`.
pub fn loss_single(prototypes: &[DenseVector], v: &[f64], target: usize, lambda: f64) -> Result<f64> {
    check_concept(target, prototypes.len())?;
    let mut z = Vec::with_capacity(prototypes.len());
    for p in prototypes {
        if p.dim() != v.len() {
            return Err(CsrError::shape("prototype dimension", v.len(), p.dim()));
        }
        z.push(lambda * dot(p, v));
    }
    Ok((log_sum_exp(&z) - z[target]).max(0.0))
}

/// Soft assignment of `v'` over the clusters of one concept.
pub fn assignment(cluster_sims: &[f64], gamma: f64) -> Result<DenseVector> {
    scaled_softmax(cluster_sims, gamma)
}

/// `sum_m q_m <p_m, v'>` with `q = assignment(<p_m, v'>, gamma)`.
pub fn concept_similarity(cluster: &[DenseVector], v: &[f64], gamma: f64) -> Result<f64> {
    let sims = cluster.iter().map(|p| dot(p, v)).collect::<Vec<_>>();
    let q = assignment(&sims, gamma)?;
    Ok(q.iter().zip(&sims).map(|(a, b)| a * b).sum())
}

/// Intermediate quantities of the multi-prototype loss for one vector.
struct MultiForward {
    /// `<p_km, v'>`, k-major.
    c: Vec<f64>,
    q: Vec<f64>,
    sim: Vec<f64>,
    /// Softmax over concept logits.
    pi: Vec<f64>,
    loss: f64,
}

fn multi_forward(
    flat: &[f64],
    k_count: usize,
    m_count: usize,
    v: &[f64],
    target: usize,
    cfg: &ContrastiveConfig,
) -> MultiForward {
    let d = v.len();
    let c: Vec<f64> = flat.chunks(d).map(|p| dot(p, v)).collect();
    let mut q = Vec::with_capacity(c.len());
    let mut sim = Vec::with_capacity(k_count);
    for k in 0..k_count {
        let ck = &c[k * m_count..(k + 1) * m_count];
        let scaled: Vec<f64> = ck.iter().map(|x| cfg.gamma * x).collect();
        let qk = softmax(&scaled);
        sim.push(qk.iter().zip(ck).map(|(a, b)| a * b).sum());
        q.extend(qk);
    }
    let z: Vec<f64> =
        sim.iter().enumerate().map(|(k, s)| cfg.lambda * (s + if k == target { cfg.delta } else { 0.0 })).collect();
    let lse = log_sum_exp(&z);
    let pi = z.iter().map(|x| (x - lse).exp()).collect();
    MultiForward { c, q, sim, pi, loss: (lse - z[target]).max(0.0) }
}

fn check_multi(atlas: &Atlas, v: &[f64], target: usize) -> Result<()> {
    check_concept(target, atlas.num_concepts())?;
    if v.len() != atlas.dim() {
        return Err(CsrError::shape("projected vector", atlas.dim(), v.len()));
    }
    Ok(())
}

/// Multi-prototype contrastive loss with margin `delta` on the positive concept.
pub fn loss_multi(atlas: &Atlas, v: &[f64], target: usize, cfg: &ContrastiveConfig) -> Result<f64> {
    check_multi(atlas, v, target)?;
    Ok(multi_forward(&atlas.flat(), atlas.num_concepts(), atlas.per_concept(), v, target, cfg).loss)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ContrastiveGradient {
    /// k-major, `K * M * D`.
    pub prototypes: Vec<f64>,
    /// `D x C`.
    pub projector: Matrix,
}

impl ContrastiveGradient {
    pub fn zeros(atlas: &Atlas, projector: &Projector) -> Self {
        Self {
            prototypes: vec![0.0; atlas.len() * atlas.dim()],
            projector: Matrix::zeros(projector.dim(), projector.channels()),
        }
    }

    pub fn norm(&self) -> f64 {
        self.prototypes.iter().chain(self.projector.data()).map(|x| x * x).sum::<f64>().sqrt()
    }
}

/// Loss and gradient of `loss_multi(atlas, normalize(P v), target)` with respect to
/// every prototype coordinate (taken as free parameters) and every entry of `P`.
pub fn grad_loss_multi(
    atlas: &Atlas,
    projector: &Projector,
    raw_v: &[f64],
    target: usize,
    cfg: &ContrastiveConfig,
) -> Result<(f64, ContrastiveGradient)> {
    if projector.dim() != atlas.dim() {
        return Err(CsrError::shape("projector output vs atlas", atlas.dim(), projector.dim()));
    }
    check_concept(target, atlas.num_concepts())?;
    let mut grad = ContrastiveGradient::zeros(atlas, projector);
    let loss = accumulate_grad(&atlas.flat(), atlas.num_concepts(), projector, raw_v, target, cfg, &mut grad)?;
    Ok((loss, grad))
}

/// Adds the gradient for one vector into `acc` and returns its loss.
fn accumulate_grad(
    flat: &[f64],
    k_count: usize,
    projector: &Projector,
    raw_v: &[f64],
    target: usize,
    cfg: &ContrastiveConfig,
    acc: &mut ContrastiveGradient,
) -> Result<f64> {
    let u = projector.apply(raw_v)?;
    let u_norm = norm(&u);
    if u_norm <= MIN_NORM {
        return Err(CsrError::Domain("degenerate projection: P v has zero norm".into()));
    }
    let v: Vec<f64> = u.iter().map(|x| x / u_norm).collect();
    let d = v.len();
    let m_count = flat.len() / d / k_count;
    let fwd = multi_forward(flat, k_count, m_count, &v, target, cfg);

    // dL/dc_km = lambda (pi_k - [k = target]) q_km (1 + gamma (c_km - sim_k))
    let mut g = vec![0.0; d];
    for k in 0..k_count {
        let dsim = cfg.lambda * (fwd.pi[k] - if k == target { 1.0 } else { 0.0 });
        for m in 0..m_count {
            let i = k * m_count + m;
            let dc = dsim * fwd.q[i] * (1.0 + cfg.gamma * (fwd.c[i] - fwd.sim[k]));
            let p = &flat[i * d..(i + 1) * d];
            let gp = &mut acc.prototypes[i * d..(i + 1) * d];
            for j in 0..d {
                gp[j] += dc * v[j];
                g[j] += dc * p[j];
            }
        }
    }
    // Back through the normalisation: (I - v v^T) g / |u|.
    let vg = dot(&v, &g);
    for (r, (gr, vr)) in g.iter().zip(&v).enumerate() {
        let du = (gr - vr * vg) / u_norm;
        for (dst, x) in acc.projector.row_mut(r).iter_mut().zip(raw_v) {
            *dst += du * x;
        }
    }
    Ok(fwd.loss)
}

/// Mean of `loss_multi` over a vector set under the given parameters.
pub fn mean_loss_multi(
    atlas: &Atlas,
    projector: &Projector,
    vectors: &[LocalConceptVector],
    cfg: &ContrastiveConfig,
) -> Result<f64> {
    if vectors.is_empty() {
        return Err(CsrError::Empty("no local concept vectors".into()));
    }
    let flat = atlas.flat();
    let mut total = 0.0;
    for lv in vectors {
        check_concept(lv.concept, atlas.num_concepts())?;
        let v = projector.project(&lv.vector)?;
        total += multi_forward(&flat, atlas.num_concepts(), atlas.per_concept(), &v, lv.concept, cfg).loss;
    }
    Ok(total / vectors.len() as f64)
}

#[derive(Debug, Clone)]
pub struct PrototypeTraining {
    pub projector: Projector,
    pub atlas: Atlas,
    /// Mean loss before each epoch, then after the last one.
    pub losses: Vec<f64>,
}

/// Joint full-batch gradient descent on the projector and the prototypes; prototypes are
/// returned to the unit sphere after every step.
pub fn train_prototypes(
    vectors: &[LocalConceptVector],
    num_concepts: usize,
    cfg: &ContrastiveConfig,
) -> Result<PrototypeTraining> {
    cfg.validate()?;
    if vectors.is_empty() {
        return Err(CsrError::Empty("no local concept vectors to train on".into()));
    }
    let channels = vectors[0].vector.dim();
    for lv in vectors {
        check_concept(lv.concept, num_concepts)?;
        if lv.vector.dim() != channels {
            return Err(CsrError::shape("local concept vector", channels, lv.vector.dim()));
        }
    }
    for k in 0..num_concepts {
        if !vectors.iter().any(|lv| lv.concept == k) {
            return Err(CsrError::MissingConcept { concept: k, what: "local concept vectors" });
        }
    }
    let dim = cfg.dim.unwrap_or(channels);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut projector = Projector::near_identity(dim, channels, &mut rng);
    let mut atlas = Atlas::seeded(num_concepts, cfg.num_prototypes, dim, &mut rng)?;
    let mut losses = Vec::with_capacity(cfg.epochs + 1);
    let scale = 1.0 / vectors.len() as f64;

    for _ in 0..cfg.epochs {
        let mut acc = ContrastiveGradient::zeros(&atlas, &projector);
        let mut loss = 0.0;
        let flat = atlas.flat();
        for lv in vectors {
            loss += accumulate_grad(&flat, num_concepts, &projector, &lv.vector, lv.concept, cfg, &mut acc)?;
        }
        losses.push(loss * scale);
        let lr = cfg.learning_rate * scale;
        projector.matrix_mut().descend(&acc.projector, lr);
        let mut flat = atlas.flat();
        for (p, g) in flat.iter_mut().zip(&acc.prototypes) {
            *p -= lr * g;
        }
        for chunk in flat.chunks_mut(dim) {
            let n = norm(chunk);
            if n <= MIN_NORM {
                return Err(CsrError::Domain("prototype collapsed to zero during training".into()));
            }
            chunk.iter_mut().for_each(|x| *x /= n);
        }
        atlas.set_prototypes_unchecked(&flat);
    }
    losses.push(mean_loss_multi(&atlas, &projector, vectors, cfg)?);
    Ok(PrototypeTraining { projector, atlas, losses })
}

/// `S(h, w) = <p, normalize(P f(:, h, w))>`; cells with a vanishing projection score 0.
pub fn prototype_similarity_map(prototype: &[f64], cells: &[Option<Vec<f64>>], height: usize, width: usize) -> Grid {
    let values = cells.iter().map(|c| c.as_ref().map_or(0.0, |u| dot(prototype, u))).collect();
    Grid::from_vec_unchecked(height, width, values)
}

/// Projected cells of one sample (`None` where the projection vanishes), height, width.
type ProjectedCells = (Vec<Option<Vec<f64>>>, usize, usize);

/// Links every prototype to the same-concept training vector it is most similar to, and
/// records the cell of that sample where the prototype responds most strongly.
pub fn link_prototype_images(
    atlas: &Atlas,
    vectors: &[LocalConceptVector],
    projector: &Projector,
    data: &LoadedDataset,
) -> Result<Atlas> {
    let projected = vectors.iter().map(|lv| projector.project(&lv.vector)).collect::<Result<Vec<_>>>()?;
    let mut out = atlas.clone();
    let mut cell_cache: std::collections::HashMap<usize, ProjectedCells> = std::collections::HashMap::new();
    for index in 0..atlas.len() {
        let id = atlas.id_of(index);
        let p = atlas.prototype(index);
        let mut best: Option<(usize, f64)> = None;
        for (i, (lv, v)) in vectors.iter().zip(&projected).enumerate() {
            if lv.concept != id.k {
                continue;
            }
            let s = dot(p, v);
            if best.is_none_or(|(_, b)| s > b) {
                best = Some((i, s));
            }
        }
        let (i, similarity) = best.ok_or(CsrError::MissingConcept { concept: id.k, what: "link candidates" })?;
        let sample_id = &vectors[i].sample_id;
        let pos = data
            .manifest
            .samples
            .iter()
            .position(|s| &s.id == sample_id)
            .ok_or_else(|| CsrError::InvalidConfig(format!("vector source {sample_id} not in dataset")))?;
        if let std::collections::hash_map::Entry::Vacant(e) = cell_cache.entry(pos) {
            let f = &data.features[pos];
            e.insert((projector.project_cells(f)?, f.height(), f.width()));
        }
        let (cells, h, w) = &cell_cache[&pos];
        let (cell, _) = prototype_similarity_map(p, cells, *h, *w).argmax();
        out.provenance[index] = Some(Provenance {
            source_sample_id: sample_id.clone(),
            source_cell: cell,
            similarity_at_link: similarity,
            image_path: data.manifest.samples[pos].image_path.clone(),
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn unit(v: &[f64]) -> DenseVector {
        crate::tensor::l2_normalize(v).unwrap()
    }

    #[test]
    fn projection_examples() {
        let p = Projector::identity(2);
        assert_eq!(p.project(&[3.0, 4.0]).unwrap().as_slice(), &[0.6, 0.8]);
        let double = Projector::new(Matrix::new(2, 2, vec![2.0, 0.0, 0.0, 2.0]).unwrap()).unwrap();
        assert_eq!(double.project(&[3.0, 4.0]).unwrap(), p.project(&[3.0, 4.0]).unwrap());
        assert!(p.project(&[0.0, 0.0]).is_err());
    }

    #[test]
    fn loss_single_closed_forms() {
        let v = unit(&[1.0, 0.0]);
        assert_eq!(loss_single(&[unit(&[0.3, 0.7])], &v, 0, 10.0).unwrap(), 0.0);

        let same = vec![unit(&[0.0, 1.0]); 3];
        let l = loss_single(&same, &v, 1, 10.0).unwrap();
        assert!((l - 3f64.ln()).abs() < 1e-12);

        let protos = vec![unit(&[1.0, 0.0]), unit(&[0.0, 1.0])];
        let l = loss_single(&protos, &v, 0, 9f64.ln()).unwrap();
        assert!((l - (10.0f64 / 9.0).ln()).abs() < 1e-12, "{l}");

        assert!(loss_single(&protos, &v, 2, 10.0).is_err());
    }

    #[test]
    fn assignment_examples() {
        assert_eq!(assignment(&[0.4], 10.0).unwrap().as_slice(), &[1.0]);
        let q = assignment(&[0.2, 0.2, 0.2], 10.0).unwrap();
        assert!(q.iter().all(|&x| (x - 1.0 / 3.0).abs() < 1e-15));
        let q = assignment(&[1.0, 0.0], 4f64.ln()).unwrap();
        assert!((q[0] - 0.8).abs() < 1e-12 && (q[1] - 0.2).abs() < 1e-12);
    }

    #[test]
    fn concept_similarity_examples() {
        let v = unit(&[1.0, 2.0]);
        let p = unit(&[2.0, 1.0]);
        assert!((concept_similarity(std::slice::from_ref(&p), &v, 10.0).unwrap() - dot(&p, &v)).abs() < 1e-15);
        let s = concept_similarity(&[p.clone(), p.clone()], &v, 3.0).unwrap();
        assert!((s - dot(&p, &v)).abs() < 1e-15);

        // Two clusters at cosines 0.9 and 0.1 against v = e0.
        let a = unit(&[0.9, (1.0f64 - 0.81).sqrt()]);
        let b = unit(&[0.1, (1.0f64 - 0.01).sqrt()]);
        let e0 = [1.0, 0.0];
        let qa = (10.0f64 * 0.9).exp() / ((10.0f64 * 0.9).exp() + (10.0f64 * 0.1).exp());
        let expected = qa * 0.9 + (1.0 - qa) * 0.1;
        assert!((concept_similarity(&[a, b], &e0, 10.0).unwrap() - expected).abs() < 1e-12);
    }

    #[test]
    fn loss_multi_degenerate_cases() {
        let cfg = ContrastiveConfig::default();
        let atlas = Atlas::new(1, 2, vec![vec![1.0, 0.5], vec![0.2, 1.0]]).unwrap();
        assert_eq!(loss_multi(&atlas, &unit(&[0.3, 0.4]), 0, &cfg).unwrap(), 0.0);
        assert!(loss_multi(&atlas, &unit(&[0.3, 0.4]), 1, &cfg).is_err());
    }

    #[test]
    fn prototype_id_parses() {
        assert_eq!("2:1".parse::<PrototypeId>().unwrap(), PrototypeId::new(2, 1));
        assert!("2-1".parse::<PrototypeId>().is_err());
        assert_eq!(PrototypeId::new(3, 0).to_string(), "3:0");
    }

    #[test]
    fn discard_is_reversible_and_checked() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let atlas = Atlas::seeded(2, 2, 4, &mut rng).unwrap();
        let ids = [PrototypeId::new(1, 0)];
        let d = atlas.with_discarded(&ids, true).unwrap();
        assert!(d.is_discarded(2));
        assert_eq!(d.live_in_concept(1), 1);
        assert_eq!(d.with_discarded(&ids, false).unwrap(), atlas);
        assert!(matches!(
            atlas.with_discarded(&[PrototypeId::new(2, 0)], true),
            Err(CsrError::UnknownPrototype { concept: 2, index: 0 })
        ));
    }

    #[test]
    fn checkpoints_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let atlas = Atlas::seeded(3, 2, 5, &mut rng).unwrap();
        atlas.save(dir.path().join("atlas.json")).unwrap();
        assert_eq!(Atlas::load(dir.path().join("atlas.json")).unwrap(), atlas);
        let proj = Projector::near_identity(5, 7, &mut rng);
        proj.save(dir.path().join("p.json")).unwrap();
        assert_eq!(Projector::load(dir.path().join("p.json")).unwrap(), proj);
    }

    #[test]
    fn loading_rejects_non_unit_prototypes() {
        let json = r#"{"K":1,"M":1,"D":2,"prototypes":[[1.0,1.0]],"provenance":[null],"discarded":[false]}"#;
        assert!(serde_json::from_str::<Atlas>(json).is_err());
    }

    #[test]
    fn config_validation() {
        let mut cfg = ContrastiveConfig::default();
        assert!(cfg.validate().is_ok());
        cfg.lambda = 1.0;
        assert!(cfg.validate().is_err());
        cfg = ContrastiveConfig { delta: -0.1, ..ContrastiveConfig::default() };
        assert!(cfg.validate().is_err());
    }
}
