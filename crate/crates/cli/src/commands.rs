use std::fs;
use std::path::{Path, PathBuf};

use csr_core::concept_head::train_concept_head;
use csr_core::concept_vectors::{
    extract_all, intra_inter_stats, read_vectors_jsonl, write_vectors_jsonl, IntraInterStats, PairMode,
};
use csr_core::data::{synthesize, write_synthetic, LoadedDataset, Split};
use csr_core::eval::{evaluate, oracle_interaction_eval, pointing_game_eval};
use csr_core::pipeline::{refine_candidates, score_dataset};
use csr_core::prototypes::{link_prototype_images, train_prototypes};
use csr_core::reasoning::train_task_head;
use csr_core::{Atlas, ConceptHead, CsrModel, Projector, PrototypeId, TaskHead};
use csr_service::{AppState, ServiceConfig};
use serde::Serialize;

use crate::config::{Layout, PipelineConfig};
use crate::error::CliError;

pub struct Context {
    pub cfg: PipelineConfig,
    pub layout: Layout,
    pub report_path: Option<PathBuf>,
}

fn require(path: &Path, what: &'static str, producer: &'static str) -> Result<(), CliError> {
    if path.exists() {
        Ok(())
    } else {
        Err(CliError::Missing { what, path: path.to_path_buf(), producer })
    }
}

impl Context {
    fn dataset(&self) -> Result<LoadedDataset, CliError> {
        require(&self.layout.manifest, "dataset manifest", "gen-synthetic")?;
        Ok(LoadedDataset::from_path(&self.layout.manifest)?)
    }

    fn train_split(&self) -> Result<LoadedDataset, CliError> {
        let train = self.dataset()?.subset(Split::Train);
        if train.is_empty() {
            return Err(CliError::Run("dataset has no training samples".into()));
        }
        Ok(train)
    }

    fn projector(&self) -> Result<Projector, CliError> {
        require(&self.layout.projector, "projector checkpoint", "learn-prototypes")?;
        Ok(Projector::load(&self.layout.projector)?)
    }

    fn atlas(&self) -> Result<Atlas, CliError> {
        require(&self.layout.atlas, "atlas checkpoint", "learn-prototypes")?;
        Ok(Atlas::load(&self.layout.atlas)?)
    }

    fn model(&self) -> Result<CsrModel, CliError> {
        let projector = self.projector()?;
        let atlas = self.atlas()?;
        require(&self.layout.task_head, "task head checkpoint", "train-head")?;
        let head = TaskHead::load(&self.layout.task_head)?;
        Ok(CsrModel::new(projector, atlas, head)?)
    }

    /// Writes the JSON report (and a text rendering next to it, when given) to
    /// `--report-path` or the default location for `name`.
    fn report<T: Serialize>(&self, name: &str, value: &T, text: Option<String>) -> Result<PathBuf, CliError> {
        let path = self.report_path.clone().unwrap_or_else(|| self.layout.reports.join(format!("{name}.json")));
        if let Some(dir) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
            fs::create_dir_all(dir).map_err(|e| CliError::Run(format!("{}: {e}", dir.display())))?;
        }
        let mut json = serde_json::to_string_pretty(value).map_err(|e| CliError::Run(e.to_string()))?;
        json.push('\n');
        fs::write(&path, json).map_err(|e| CliError::Run(format!("{}: {e}", path.display())))?;
        if let Some(t) = text {
            let tp = path.with_extension("txt");
            fs::write(&tp, t).map_err(|e| CliError::Run(format!("{}: {e}", tp.display())))?;
        }
        log::info!("report written to {}", path.display());
        Ok(path)
    }
}

fn split_of(ctx: &Context, split: Split) -> Result<LoadedDataset, CliError> {
    let data = ctx.dataset()?.subset(split);
    if data.is_empty() {
        return Err(CliError::Run(format!("dataset has no {split:?} samples")));
    }
    Ok(data)
}

pub fn gen_synthetic(ctx: &Context, out: Option<&Path>) -> Result<(), CliError> {
    let dir = out.map(Path::to_path_buf).unwrap_or_else(|| ctx.layout.data_dir.clone());
    let data = synthesize(&ctx.cfg.synthetic, ctx.cfg.seed)?;
    let manifest = write_synthetic(&data, &dir)?;
    println!("wrote {} samples to {}", data.len(), manifest.display());
    Ok(())
}

#[derive(Serialize)]
struct LossReport {
    stage: &'static str,
    epochs: usize,
    initial_loss: f64,
    final_loss: f64,
}

impl LossReport {
    fn new(stage: &'static str, losses: &[f64]) -> Self {
        Self {
            stage,
            epochs: losses.len().saturating_sub(1),
            initial_loss: losses.first().copied().unwrap_or(f64::NAN),
            final_loss: losses.last().copied().unwrap_or(f64::NAN),
        }
    }
}

pub fn train_concepts(ctx: &Context) -> Result<(), CliError> {
    let train = ctx.train_split()?;
    let out = train_concept_head(&train, &ctx.cfg.stages().concept_head)?;
    out.head.save(&ctx.layout.concept_head)?;
    let r = LossReport::new("concept_head", &out.losses);
    println!("concept head: BCE {:.4} -> {:.4}", r.initial_loss, r.final_loss);
    ctx.report("train-concepts", &r, None)?;
    Ok(())
}

pub fn extract_vectors(ctx: &Context) -> Result<(), CliError> {
    let train = ctx.train_split()?;
    require(&ctx.layout.concept_head, "concept head checkpoint", "train-concepts")?;
    let head = ConceptHead::load(&ctx.layout.concept_head)?;
    let vectors = extract_all(&train, &head)?;
    write_vectors_jsonl(&ctx.layout.vectors, &vectors)?;
    println!("extracted {} local concept vectors", vectors.len());
    match intra_inter_stats(&vectors, &train, None, PairMode::Vector) {
        Ok(stats) => {
            println!("raw gap {:.4}", stats.gap());
            ctx.report("extract-vectors", &stats, None)?;
        }
        Err(e) => log::warn!("no similarity report: {e}"),
    }
    Ok(())
}

#[derive(Serialize)]
struct PrototypeReport {
    losses: LossReport,
    raw: Option<IntraInterStats>,
    projected: Option<IntraInterStats>,
}

pub fn learn_prototypes(ctx: &Context) -> Result<(), CliError> {
    let train = ctx.train_split()?;
    require(&ctx.layout.vectors, "local concept vectors", "extract-vectors")?;
    let vectors = read_vectors_jsonl(&ctx.layout.vectors)?;
    let out = train_prototypes(&vectors, train.manifest.num_concepts, &ctx.cfg.stages().contrastive)?;
    let atlas = link_prototype_images(&out.atlas, &vectors, &out.projector, &train)?;
    out.projector.save(&ctx.layout.projector)?;
    atlas.save(&ctx.layout.atlas)?;
    let raw = intra_inter_stats(&vectors, &train, None, PairMode::Vector).ok();
    let projected = intra_inter_stats(&vectors, &train, Some(&out.projector), PairMode::Vector).ok();
    let r = PrototypeReport { losses: LossReport::new("prototypes", &out.losses), raw, projected };
    println!("prototypes: loss {:.4} -> {:.4}", r.losses.initial_loss, r.losses.final_loss);
    if let (Some(a), Some(b)) = (&r.raw, &r.projected) {
        println!("intra-inter gap: raw {:.4} projected {:.4}", a.gap(), b.gap());
    }
    ctx.report("learn-prototypes", &r, None)?;
    Ok(())
}

#[derive(Serialize)]
struct RefineReport {
    discarded: Vec<String>,
    restored: Vec<String>,
    live: usize,
    total: usize,
}

fn parse_ids(raw: &[String]) -> Result<Vec<PrototypeId>, CliError> {
    raw.iter()
        .filter(|s| !s.trim().is_empty())
        .map(|s| s.trim().parse::<PrototypeId>().map_err(|e| CliError::Run(format!("bad prototype id {s:?}: {e}"))))
        .collect()
}

pub fn refine(ctx: &Context, discard: &[String], restore: &[String], auto: bool) -> Result<(), CliError> {
    let mut atlas = ctx.atlas()?;
    let mut discard = parse_ids(discard)?;
    let restore = parse_ids(restore)?;
    if auto {
        let train = ctx.train_split()?;
        discard.extend(refine_candidates(&atlas, &train.manifest, &ctx.cfg.refine)?);
    }
    if discard.is_empty() && restore.is_empty() {
        return Err(CliError::Run("nothing to do: pass --discard, --restore or --auto".into()));
    }
    atlas = atlas.with_discarded(&restore, false)?.with_discarded(&discard, true)?;
    atlas.save(&ctx.layout.atlas)?;
    let r = RefineReport {
        discarded: (0..atlas.len()).filter(|&i| atlas.is_discarded(i)).map(|i| atlas.id_of(i).to_string()).collect(),
        restored: restore.iter().map(ToString::to_string).collect(),
        live: (0..atlas.len()).filter(|&i| !atlas.is_discarded(i)).count(),
        total: atlas.len(),
    };
    println!("atlas: {} of {} prototypes live; discarded [{}]", r.live, r.total, r.discarded.join(", "));
    ctx.report("refine", &r, None)?;
    Ok(())
}

pub fn train_head(ctx: &Context) -> Result<(), CliError> {
    let train = ctx.train_split()?;
    let projector = ctx.projector()?;
    let atlas = ctx.atlas()?;
    let (scores, targets) = score_dataset((&projector, &atlas), &train)?;
    let out = train_task_head(&scores, &targets, train.manifest.num_classes, &ctx.cfg.stages().task_head)?;
    out.head.save(&ctx.layout.task_head)?;
    let r = LossReport::new("task_head", &out.losses);
    println!("task head: CE {:.4} -> {:.4}", r.initial_loss, r.final_loss);
    ctx.report("train-head", &r, None)?;
    Ok(())
}

pub fn eval(ctx: &Context, split: Split) -> Result<(), CliError> {
    let model = ctx.model()?;
    let data = split_of(ctx, split)?;
    let report = evaluate(&model, &data)?;
    println!("macro F1 {:.4}", report.macro_f1);
    println!("explanation size {}", report.explanation_size);
    let text = report.to_text(&data.manifest.class_names);
    ctx.report("eval", &report, Some(text))?;
    Ok(())
}

pub fn pg_eval(ctx: &Context, split: Split) -> Result<(), CliError> {
    let model = ctx.model()?;
    let data = split_of(ctx, split)?;
    let report = pointing_game_eval(&model, &data)?;
    println!("PG hit rate {:.4} ({}/{})", report.hit_rate, report.hits, report.evaluated);
    ctx.report("pg-eval", &report, None)?;
    Ok(())
}

pub fn interact_eval(ctx: &Context, split: Split) -> Result<(), CliError> {
    let model = ctx.model()?;
    let data = split_of(ctx, split)?;
    let e = &ctx.cfg.eval;
    let report = oracle_interaction_eval(&model, &data, e.alpha, e.indecision_threshold)?;
    println!(
        "interaction gain {:+.4} (macro F1 {:.4} -> {:.4}, {} indecisive)",
        report.gain, report.baseline.macro_f1, report.interactive.macro_f1, report.interacted
    );
    ctx.report("interact-eval", &report, None)?;
    Ok(())
}

pub fn serve(ctx: &Context, host: Option<String>, port: Option<u16>) -> Result<(), CliError> {
    let data = ctx.dataset()?;
    let mut config: ServiceConfig = ctx.cfg.service.clone();
    if let Some(h) = host {
        config.host = h;
    }
    if let Some(p) = port {
        config.port = p;
    }
    if config.atlas_edits.is_none() {
        config.atlas_edits = Some(ctx.layout.atlas_edits.clone());
    }
    let model = ctx.layout.model_paths().load().map_err(CliError::Run)?;
    let state = AppState::new(config, data, model).map_err(CliError::Config)?;
    let runtime = tokio::runtime::Runtime::new().map_err(|e| CliError::Run(e.to_string()))?;
    runtime.block_on(csr_service::serve(state)).map_err(|e| CliError::Run(format!("server: {e}")))
}
