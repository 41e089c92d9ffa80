//! End-to-end workflows: feature fusion from two trained networks, the
//! split-train-fuse-evaluate protocol, and the partition-scale sweep.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::aware::AwareKind;
use crate::checkpoint::Checkpoint;
use crate::dataset::{read_feature_map, DatasetManifest, ImageRecord, TrackletId};
use crate::error::{Error, Result};
use crate::eval::{concat_parts, evaluate, fuse_features, tracklet_feature, Aggregation, EvalReport, Labeled, Split, TrialSummary};
use crate::features::{extract, PartFeatures, PartitionScale, PoolingMode};
use crate::model::AwareModel;
use crate::tensor_file::{self, Dims};
use crate::trainer::{train, LogLine, TrainConfig};

const INDEX_VERSION: u32 = 1;

/// One feature vector per image.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageFeatures {
    pub image_ids: Vec<String>,
    pub tracklets: Vec<TrackletId>,
    pub dim: usize,
    pub data: Vec<Vec<f64>>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct IndexEntry {
    image_id: String,
    camera: u32,
    tracklet: u32,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Index {
    version: u32,
    dim: usize,
    file: String,
    images: Vec<IndexEntry>,
}

impl ImageFeatures {
    /// Writes `index.json` and `features.upmf`, an `(n, 1, dim)` f32 tensor.
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let flat: Vec<f32> = self.data.iter().flatten().map(|&v| v as f32).collect();
        tensor_file::write_f32(&dir.join("features.upmf"), Dims::new(self.data.len(), 1, self.dim), &flat)?;
        let index = Index {
            version: INDEX_VERSION,
            dim: self.dim,
            file: "features.upmf".into(),
            images: self
                .image_ids
                .iter()
                .zip(&self.tracklets)
                .map(|(id, t)| IndexEntry {
                    image_id: id.clone(),
                    camera: t.camera.0,
                    tracklet: t.id,
                })
                .collect(),
        };
        let path = dir.join("index.json");
        let text = serde_json::to_string_pretty(&index).expect("index serializes");
        fs::write(&path, text + "\n").map_err(|e| Error::io(&path, e))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join("index.json");
        if !path.exists() {
            return Err(Error::MissingFile(path));
        }
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let index: Index = serde_json::from_str(&text).map_err(|e| Error::Parse {
            path: path.clone(),
            message: e.to_string(),
        })?;
        if index.version != INDEX_VERSION {
            return Err(Error::UnsupportedVersion {
                path,
                version: index.version,
            });
        }
        let n = index.images.len();
        let flat = tensor_file::read_f32(&dir.join(&index.file), Dims::new(n, 1, index.dim))?;
        Ok(ImageFeatures {
            dim: index.dim,
            data: flat
                .chunks(index.dim.max(1))
                .take(n)
                .map(|c| c.iter().map(|&v| f64::from(v)).collect())
                .collect(),
            image_ids: index.images.iter().map(|e| e.image_id.clone()).collect(),
            tracklets: index.images.iter().map(|e| TrackletId::new(e.camera, e.tracklet)).collect(),
        })
    }

    /// Aggregated, normalized feature per tracklet.
    pub fn tracklet_features(&self, mode: Aggregation) -> Result<BTreeMap<TrackletId, Vec<f64>>> {
        let mut frames: BTreeMap<TrackletId, Vec<Vec<f64>>> = BTreeMap::new();
        for (t, f) in self.tracklets.iter().zip(&self.data) {
            frames.entry(*t).or_default().push(f.clone());
        }
        frames.into_iter().map(|(t, f)| Ok((t, tracklet_feature(&f, mode)?))).collect()
    }
}

fn images_of<'a>(manifest: &'a DatasetManifest, keep: &BTreeSet<TrackletId>) -> Vec<&'a ImageRecord> {
    manifest
        .tracklets
        .iter()
        .filter(|t| keep.contains(&t.id))
        .flat_map(|t| &t.frames)
        .collect()
}

fn extract_images(manifest: &DatasetManifest, images: &[&ImageRecord], k: PartitionScale, pooling: PoolingMode) -> Result<Vec<PartFeatures>> {
    k.check(manifest.feature_dims.h)?;
    images
        .par_iter()
        .map(|rec| extract(&read_feature_map(rec, manifest.feature_dims)?, k, pooling))
        .collect()
}

fn check_model(model: &AwareModel, manifest: &DatasetManifest) -> Result<()> {
    if model.input_dim() != manifest.feature_dims.c {
        return Err(Error::DimMismatch {
            expected: format!("{} channels", manifest.feature_dims.c),
            found: format!("checkpoint trained on {} channels", model.input_dim()),
        });
    }
    Ok(())
}

fn all_tracklets(manifest: &DatasetManifest) -> BTreeSet<TrackletId> {
    manifest.tracklets.iter().map(|t| t.id).collect()
}

/// Fused local + global features for the images of the given tracklets.
pub fn fuse_tracklets(
    manifest: &DatasetManifest,
    local: &Checkpoint,
    global: &Checkpoint,
    keep: &BTreeSet<TrackletId>,
) -> Result<ImageFeatures> {
    if local.model.kind() != AwareKind::Local || global.model.kind() != AwareKind::Global {
        return Err(Error::Validation(
            "fusion takes a local-aware checkpoint and a global-aware checkpoint".into(),
        ));
    }
    if local.model.k() != global.model.k() {
        return Err(Error::PartCountMismatch {
            local: local.model.k(),
            global: global.model.k(),
        });
    }
    if local.config.pooling != global.config.pooling {
        return Err(Error::Validation("the two checkpoints use different pooling modes".into()));
    }
    check_model(&local.model, manifest)?;
    check_model(&global.model, manifest)?;
    let images = images_of(manifest, keep);
    let parts = extract_images(manifest, &images, local.config.partition()?, local.config.pooling)?;
    let refs: Vec<&PartFeatures> = parts.iter().collect();
    let l = local.model.infer(&refs)?;
    let g = global.model.infer(&refs)?;
    let data = l.iter().zip(&g).map(|(l, g)| fuse_features(l, g)).collect::<Result<Vec<_>>>()?;
    Ok(ImageFeatures {
        image_ids: images.iter().map(|r| r.image_id.clone()).collect(),
        tracklets: images.iter().map(|r| r.tracklet).collect(),
        dim: local.model.k() * (local.model.output_dim() + global.model.output_dim()),
        data,
    })
}

pub fn fuse_dataset(manifest: &DatasetManifest, local: &Checkpoint, global: &Checkpoint) -> Result<ImageFeatures> {
    fuse_tracklets(manifest, local, global, &all_tracklets(manifest))
}

/// Features of a single network: its normalized parts concatenated.
pub fn network_features(manifest: &DatasetManifest, ckpt: &Checkpoint, keep: &BTreeSet<TrackletId>) -> Result<ImageFeatures> {
    check_model(&ckpt.model, manifest)?;
    let images = images_of(manifest, keep);
    let parts = extract_images(manifest, &images, ckpt.config.partition()?, ckpt.config.pooling)?;
    let refs: Vec<&PartFeatures> = parts.iter().collect();
    Ok(ImageFeatures {
        image_ids: images.iter().map(|r| r.image_id.clone()).collect(),
        tracklets: images.iter().map(|r| r.tracklet).collect(),
        dim: ckpt.model.k() * ckpt.model.output_dim(),
        data: ckpt.model.infer(&refs)?.iter().map(|p| concat_parts(p)).collect(),
    })
}

/// Scores the split's probe and gallery tracklets. Every one of them must
/// have features and a ground-truth identity.
pub fn evaluate_split(
    manifest: &DatasetManifest,
    features: &ImageFeatures,
    split: &Split,
    mode: Aggregation,
) -> Result<EvalReport> {
    let by_tracklet = features.tracklet_features(mode)?;
    let labeled = |ids: &[TrackletId]| -> Result<Vec<Labeled>> {
        ids.iter()
            .map(|t| {
                let person_id = manifest
                    .person_id(*t)
                    .ok_or_else(|| Error::MissingGroundTruth(format!("tracklet {}/{} has no person_id", t.camera.0, t.id)))?;
                let feature = by_tracklet.get(t).cloned().ok_or_else(|| {
                    Error::Validation(format!("no features for tracklet {}/{}", t.camera.0, t.id))
                })?;
                Ok(Labeled { feature, person_id })
            })
            .collect()
    };
    evaluate(&labeled(&split.probe)?, &labeled(&split.gallery)?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProtocolConfig {
    pub train: TrainConfig,
    pub trials: usize,
    pub split_seed: u64,
    pub aggregation: Aggregation,
}

impl ProtocolConfig {
    pub fn new(train: TrainConfig) -> Self {
        ProtocolConfig {
            train,
            trials: 1,
            split_seed: 0,
            aggregation: Aggregation::Max,
        }
    }
}

/// Trained checkpoints and scores of one trial.
#[derive(Debug, Clone)]
pub struct TrialOutcome {
    pub split: Split,
    pub local: Checkpoint,
    pub global: Checkpoint,
    pub fused: EvalReport,
    pub local_only: EvalReport,
    pub global_only: EvalReport,
}

#[derive(Debug, Clone)]
pub struct ProtocolOutcome {
    pub fused: TrialSummary,
    pub local_only: TrialSummary,
    pub global_only: TrialSummary,
    pub trials: Vec<TrialOutcome>,
}

/// Trial `t` splits with `split_seed + t`, trains both networks on the
/// training identities with seed `train.seed + t`, then evaluates fused and
/// single-network features on the test identities.
pub fn run_trial(manifest: &DatasetManifest, cfg: &ProtocolConfig, trial: u64, mut log: impl FnMut(&str, &LogLine)) -> Result<TrialOutcome> {
    let split = crate::eval::split_protocol(manifest, cfg.split_seed.wrapping_add(trial))?;
    let view = split.training_view(manifest)?;
    let mut base = cfg.train.clone();
    base.seed = base.seed.wrapping_add(trial);
    let local = train(&view, TrainConfig { aware_kind: AwareKind::Local, ..base.clone() }, |l| log("local", l))?;
    let global = train(&view, TrainConfig { aware_kind: AwareKind::Global, ..base }, |l| log("global", l))?;
    let keep: BTreeSet<TrackletId> = split.probe.iter().chain(&split.gallery).copied().collect();
    let fused = evaluate_split(manifest, &fuse_tracklets(manifest, &local, &global, &keep)?, &split, cfg.aggregation)?;
    let local_only = evaluate_split(manifest, &network_features(manifest, &local, &keep)?, &split, cfg.aggregation)?;
    let global_only = evaluate_split(manifest, &network_features(manifest, &global, &keep)?, &split, cfg.aggregation)?;
    Ok(TrialOutcome {
        split,
        local,
        global,
        fused,
        local_only,
        global_only,
    })
}

pub fn run_protocol(manifest: &DatasetManifest, cfg: &ProtocolConfig, mut log: impl FnMut(&str, &LogLine)) -> Result<ProtocolOutcome> {
    if cfg.trials == 0 {
        return Err(Error::InvalidConfig("trials must be at least 1".into()));
    }
    let trials = (0..cfg.trials as u64)
        .map(|t| run_trial(manifest, cfg, t, &mut log))
        .collect::<Result<Vec<_>>>()?;
    Ok(ProtocolOutcome {
        fused: TrialSummary::average(trials.iter().map(|t| t.fused.clone()).collect())?,
        local_only: TrialSummary::average(trials.iter().map(|t| t.local_only.clone()).collect())?,
        global_only: TrialSummary::average(trials.iter().map(|t| t.global_only.clone()).collect())?,
        trials,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepRow {
    pub k: usize,
    pub rank1: f64,
    #[serde(rename = "mAP")]
    pub map: f64,
}

/// The protocol once per partition scale, reporting fused scores.
pub fn sweep(manifest: &DatasetManifest, cfg: &ProtocolConfig, ks: &[usize], mut log: impl FnMut(&str, &LogLine)) -> Result<Vec<SweepRow>> {
    ks.iter()
        .map(|&k| {
            let mut c = cfg.clone();
            c.train.k = k;
            let out = run_protocol(manifest, &c, &mut log)?;
            Ok(SweepRow {
                k,
                rank1: out.fused.rank1,
                map: out.fused.map,
            })
        })
        .collect()
}

pub fn sweep_table(rows: &[SweepRow]) -> String {
    let mut out = format!("{:>3}  {:>7}  {:>7}\n", "k", "rank1", "mAP");
    for r in rows {
        out.push_str(&format!("{:>3}  {:>7.4}  {:>7.4}\n", r.k, r.rank1, r.map));
    }
    out
}

#[derive(Serialize)]
struct ReportDoc<'a, C: Serialize> {
    rank1: f64,
    rank5: f64,
    rank20: f64,
    #[serde(rename = "mAP")]
    map: f64,
    trials: usize,
    per_trial: &'a [EvalReport],
    config: &'a C,
}

pub fn report_json<C: Serialize>(summary: &TrialSummary, config: &C) -> String {
    let doc = ReportDoc {
        rank1: summary.rank1,
        rank5: summary.rank5,
        rank20: summary.rank20,
        map: summary.map,
        trials: summary.trials,
        per_trial: &summary.per_trial,
        config,
    };
    serde_json::to_string_pretty(&doc).expect("report serializes") + "\n"
}

/// Writes the JSON report to `path` and the CMC curve next to it with a
/// `.csv` extension.
pub fn write_report<C: Serialize>(path: &Path, summary: &TrialSummary, config: &C) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    fs::write(path, report_json(summary, config)).map_err(|e| Error::io(path, e))?;
    let csv = path.with_extension("csv");
    fs::write(&csv, summary.cmc_csv()).map_err(|e| Error::io(&csv, e))
}
