use std::collections::{BTreeSet, HashMap};
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex, RwLock};
use std::time::{Duration, Instant, SystemTime, UNIX_EPOCH};

use csr_core::data::LoadedDataset;
use csr_core::reasoning::{predict_with_threshold, similarity_scores, SimilarityMaps};
use csr_core::{Atlas, CsrError, CsrModel, ImageSize, InteractionSpec, Prediction, Projector, PrototypeId, TaskHead};
use serde::{Deserialize, Serialize};

use crate::config::ServiceConfig;
use crate::error::ApiError;

/// One immutable atlas revision. Version 0 is the atlas as loaded from its checkpoint.
#[derive(Debug)]
pub struct AtlasVersion {
    pub version: u64,
    pub atlas: Atlas,
}

/// Discards applied on top of the checkpointed atlas, as persisted on disk.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AtlasEdits {
    pub version: u64,
    pub discarded: BTreeSet<PrototypeId>,
}

impl AtlasEdits {
    fn load(path: &Path) -> Result<Option<Self>, String> {
        match fs::read_to_string(path) {
            Ok(text) => {
                serde_json::from_str(&text).map(Some).map_err(|e| format!("atlas edits {}: {e}", path.display()))
            }
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(None),
            Err(e) => Err(format!("atlas edits {}: {e}", path.display())),
        }
    }

    /// Write to a sibling temp file, then rename over the target.
    fn save(&self, path: &Path) -> std::io::Result<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir)?;
        }
        let tmp = path.with_extension("json.tmp");
        let text = serde_json::to_string_pretty(self).map_err(std::io::Error::other)?;
        fs::write(&tmp, text + "\n")?;
        fs::rename(&tmp, path)
    }
}

struct ModelParts {
    projector: Projector,
    head: TaskHead,
    base_atlas: Atlas,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Session {
    pub id: String,
    pub sample_id: String,
    pub atlas_version: u64,
    /// Unix seconds.
    pub created_at: u64,
    pub baseline_prediction: Prediction,
    pub interaction_history: Vec<InteractionSpec>,
    pub current_prediction: Prediction,
}

struct SessionEntry {
    session: Session,
    maps: Arc<SimilarityMaps>,
    image: ImageSize,
    last_access: Instant,
}

#[derive(Default)]
struct Sessions {
    by_id: HashMap<String, Arc<Mutex<SessionEntry>>>,
    by_key: HashMap<String, String>,
    next: u64,
}

/// The recalibrated result of one interact call.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InteractResult {
    pub session_id: String,
    pub step: usize,
    pub prediction: Prediction,
    pub scores: Vec<f64>,
    /// Reweighted `S_hat` maps, k-major.
    pub maps: Vec<csr_core::Grid>,
}

pub struct Inner {
    pub config: ServiceConfig,
    pub data: LoadedDataset,
    model: Option<ModelParts>,
    atlas: RwLock<Arc<AtlasVersion>>,
    /// Serialises atlas edits and their persistence.
    atlas_writer: Mutex<()>,
    sessions: Mutex<Sessions>,
}

#[derive(Clone)]
pub struct AppState(pub Arc<Inner>);

fn poisoned<T>(_: T) -> ApiError {
    ApiError::internal("lock poisoned")
}

impl AppState {
    /// `model` may be absent, in which case model-backed endpoints answer 409. Persisted
    /// atlas edits are applied on top of the model's atlas.
    pub fn new(config: ServiceConfig, data: LoadedDataset, model: Option<CsrModel>) -> Result<Self, String> {
        config.validate()?;
        let edits = match &config.atlas_edits {
            Some(path) => AtlasEdits::load(path)?,
            None => None,
        };
        let (parts, current) = match model {
            Some(m) => {
                if m.projector.channels() != data.manifest.channels() {
                    return Err(format!(
                        "projector expects {} channels, dataset has {}",
                        m.projector.channels(),
                        data.manifest.channels()
                    ));
                }
                let (atlas, version) = match &edits {
                    Some(e) => {
                        let ids: Vec<PrototypeId> = e.discarded.iter().copied().collect();
                        (m.atlas.with_discarded(&ids, true).map_err(|e| e.to_string())?, e.version)
                    }
                    None => (m.atlas.clone(), 0),
                };
                let parts = ModelParts { projector: m.projector, head: m.head, base_atlas: m.atlas };
                (Some(parts), AtlasVersion { version, atlas })
            }
            None => (
                None,
                AtlasVersion { version: 0, atlas: Atlas::new(1, 1, vec![vec![1.0]]).map_err(|e| e.to_string())? },
            ),
        };
        Ok(Self(Arc::new(Inner {
            config,
            data,
            model: parts,
            atlas: RwLock::new(Arc::new(current)),
            atlas_writer: Mutex::new(()),
            sessions: Mutex::new(Sessions::default()),
        })))
    }

    pub fn has_model(&self) -> bool {
        self.0.model.is_some()
    }

    fn model(&self) -> Result<&ModelParts, ApiError> {
        self.0.model.as_ref().ok_or_else(ApiError::model_not_loaded)
    }

    pub fn atlas(&self) -> Result<Arc<AtlasVersion>, ApiError> {
        self.model()?;
        Ok(self.0.atlas.read().map_err(poisoned)?.clone())
    }

    pub fn sample_index(&self, id: &str) -> Result<usize, ApiError> {
        self.0.data.manifest.samples.iter().position(|s| s.id == id).ok_or_else(|| ApiError::sample_not_found(id))
    }

    /// Baseline maps and prediction of a sample under an atlas version.
    pub fn baseline(&self, index: usize, atlas: &AtlasVersion) -> Result<(SimilarityMaps, Prediction), ApiError> {
        let m = self.model()?;
        let f = &self.0.data.features[index];
        let maps = csr_core::reasoning::projected_similarity_maps(f, &m.projector, &atlas.atlas)?;
        let pred =
            predict_with_threshold(&m.head, similarity_scores(&maps).as_slice(), self.0.config.indecision_threshold)?;
        Ok((maps, pred))
    }

    /// Discards `ids` in a new atlas version. Already-discarded ids leave the version as is.
    pub fn discard(&self, ids: &[PrototypeId]) -> Result<Arc<AtlasVersion>, ApiError> {
        let m = self.model()?;
        let _writer = self.0.atlas_writer.lock().map_err(poisoned)?;
        let current = self.0.atlas.read().map_err(poisoned)?.clone();
        let mut fresh = Vec::new();
        for &id in ids {
            let index = current.atlas.index(id)?;
            if !current.atlas.is_discarded(index) && !fresh.contains(&id) {
                fresh.push(id);
            }
        }
        if fresh.is_empty() {
            return Ok(current);
        }
        let next =
            Arc::new(AtlasVersion { version: current.version + 1, atlas: current.atlas.with_discarded(&fresh, true)? });
        if let Some(path) = &self.0.config.atlas_edits {
            let edits = AtlasEdits {
                version: next.version,
                discarded: (0..next.atlas.len())
                    .filter(|&i| next.atlas.is_discarded(i) && !m.base_atlas.is_discarded(i))
                    .map(|i| next.atlas.id_of(i))
                    .collect(),
            };
            edits.save(path).map_err(|e| ApiError::internal(format!("persisting atlas edits: {e}")))?;
        }
        *self.0.atlas.write().map_err(poisoned)? = next.clone();
        log::info!("atlas version {} discards {:?}", next.version, fresh);
        Ok(next)
    }

    fn ttl(&self) -> Duration {
        Duration::from_secs(self.0.config.session_ttl_secs)
    }

    /// Creates a session, or returns the one created earlier under the same key.
    pub fn create_session(&self, sample_id: &str, key: Option<&str>) -> Result<Session, ApiError> {
        let index = self.sample_index(sample_id)?;
        let atlas = self.atlas()?;
        let mut sessions = self.0.sessions.lock().map_err(poisoned)?;
        let ttl = self.ttl();
        sessions.by_id.retain(|_, e| e.lock().map(|e| e.last_access.elapsed() < ttl).unwrap_or(false));
        let Sessions { by_id, by_key, .. } = &mut *sessions;
        by_key.retain(|_, id| by_id.contains_key(id));

        if let Some(existing) = key.and_then(|k| sessions.by_key.get(k)).cloned() {
            let entry = sessions.by_id[&existing].clone();
            let mut entry = entry.lock().map_err(poisoned)?;
            if entry.session.sample_id != sample_id {
                return Err(ApiError::new(
                    axum::http::StatusCode::CONFLICT,
                    "idempotency_conflict",
                    format!("idempotency key already used for sample {:?}", entry.session.sample_id),
                )
                .with_field("idempotency_key"));
            }
            entry.last_access = Instant::now();
            return Ok(entry.session.clone());
        }

        let (maps, pred) = self.baseline(index, &atlas)?;
        sessions.next += 1;
        let id = format!("s{:06}", sessions.next);
        let session = Session {
            id: id.clone(),
            sample_id: sample_id.to_string(),
            atlas_version: atlas.version,
            created_at: SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs()),
            baseline_prediction: pred.clone(),
            interaction_history: Vec::new(),
            current_prediction: pred,
        };
        let entry = SessionEntry {
            session: session.clone(),
            maps: Arc::new(maps),
            image: self.0.data.manifest.samples[index].image_size,
            last_access: Instant::now(),
        };
        sessions.by_id.insert(id.clone(), Arc::new(Mutex::new(entry)));
        if let Some(k) = key {
            sessions.by_key.insert(k.to_string(), id);
        }
        Ok(session)
    }

    fn session_entry(&self, id: &str) -> Result<Arc<Mutex<SessionEntry>>, ApiError> {
        let sessions = self.0.sessions.lock().map_err(poisoned)?;
        let entry = sessions.by_id.get(id).cloned().ok_or_else(|| ApiError::session_not_found(id))?;
        drop(sessions);
        let expired = entry.lock().map_err(poisoned)?.last_access.elapsed() >= self.ttl();
        if expired {
            self.0.sessions.lock().map_err(poisoned)?.by_id.remove(id);
            return Err(ApiError::session_not_found(id));
        }
        Ok(entry)
    }

    pub fn session(&self, id: &str) -> Result<Session, ApiError> {
        let entry = self.session_entry(id)?;
        let mut entry = entry.lock().map_err(poisoned)?;
        entry.last_access = Instant::now();
        Ok(entry.session.clone())
    }

    /// Applies the full spec to the session's cached baseline maps. A retry whose spec
    /// equals the latest one is not appended again.
    pub fn interact(&self, id: &str, spec: InteractionSpec) -> Result<InteractResult, ApiError> {
        let m = self.model()?;
        let entry = self.session_entry(id)?;
        let mut entry = entry.lock().map_err(poisoned)?;
        entry.last_access = Instant::now();
        let out = csr_core::reasoning::apply_interaction_with_threshold(
            &entry.maps,
            &spec,
            &m.head,
            entry.image,
            self.0.config.indecision_threshold,
        )?;
        if entry.session.interaction_history.last() != Some(&spec) {
            entry.session.interaction_history.push(spec);
        }
        entry.session.current_prediction = out.prediction.clone();
        Ok(InteractResult {
            session_id: id.to_string(),
            step: entry.session.interaction_history.len(),
            prediction: out.prediction,
            scores: out.scores,
            maps: out.maps,
        })
    }
}

/// Wraps an error raised while loading artifacts at startup.
pub fn load_error(path: &Path, e: CsrError) -> String {
    format!("{}: {e}", path.display())
}

/// Paths to the artifacts that make up a model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelPaths {
    pub projector: PathBuf,
    pub atlas: PathBuf,
    pub task_head: PathBuf,
}

impl ModelPaths {
    /// `Ok(None)` when any artifact is missing; errors when one exists but is invalid.
    pub fn load(&self) -> Result<Option<CsrModel>, String> {
        for p in [&self.projector, &self.atlas, &self.task_head] {
            if !p.exists() {
                log::warn!("model artifact {} missing; serving without a model", p.display());
                return Ok(None);
            }
        }
        let projector = Projector::load(&self.projector).map_err(|e| load_error(&self.projector, e))?;
        let atlas = Atlas::load(&self.atlas).map_err(|e| load_error(&self.atlas, e))?;
        let head = TaskHead::load(&self.task_head).map_err(|e| load_error(&self.task_head, e))?;
        CsrModel::new(projector, atlas, head).map(Some).map_err(|e| e.to_string())
    }
}
