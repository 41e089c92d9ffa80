//! Test-time fusion, tracklet aggregation, probe/gallery ranking and the
//! CMC / mAP metrics.

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::association::euclidean;
use crate::dataset::{CameraId, DatasetManifest, TrackletId, TrainingView};
use crate::error::{Error, Result};
use crate::features::normalize_vec;

/// Per part: concatenate local and global, normalize; then concatenate the
/// parts and normalize again. Output length `k (c + c')`.
pub fn fuse_features(local: &[Vec<f64>], global: &[Vec<f64>]) -> Result<Vec<f64>> {
    if local.len() != global.len() {
        return Err(Error::PartCountMismatch {
            local: local.len(),
            global: global.len(),
        });
    }
    let mut out = Vec::new();
    for (l, g) in local.iter().zip(global) {
        let mut part = l.clone();
        part.extend_from_slice(g);
        out.extend(normalize_vec(&part));
    }
    Ok(normalize_vec(&out))
}

/// Single-network image feature: the normalized parts concatenated and normalized.
pub fn concat_parts(parts: &[Vec<f64>]) -> Vec<f64> {
    let flat: Vec<f64> = parts.iter().flat_map(|p| normalize_vec(p)).collect();
    normalize_vec(&flat)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Aggregation {
    /// Element-wise max over frames.
    #[default]
    Max,
    /// Element-wise mean over frames.
    Mean,
}

impl std::str::FromStr for Aggregation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "max" => Ok(Aggregation::Max),
            "mean" => Ok(Aggregation::Mean),
            other => Err(Error::InvalidConfig(format!("unknown aggregation {other:?}, expected max or mean"))),
        }
    }
}

pub fn tracklet_feature(frames: &[Vec<f64>], mode: Aggregation) -> Result<Vec<f64>> {
    let first = frames.first().ok_or(Error::EmptyTracklet)?;
    let mut acc = first.clone();
    for f in &frames[1..] {
        if f.len() != acc.len() {
            return Err(Error::ShapeMismatch("frame features differ in length".into()));
        }
        for (a, v) in acc.iter_mut().zip(f) {
            match mode {
                Aggregation::Max => *a = a.max(*v),
                Aggregation::Mean => *a += v,
            }
        }
    }
    if mode == Aggregation::Mean {
        let n = frames.len() as f64;
        acc.iter_mut().for_each(|a| *a /= n);
    }
    Ok(normalize_vec(&acc))
}

/// A tracklet feature with its ground-truth identity.
#[derive(Debug, Clone, PartialEq)]
pub struct Labeled {
    pub feature: Vec<f64>,
    pub person_id: u32,
}

/// Scores of one probe/gallery evaluation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub rank1: f64,
    pub rank5: f64,
    pub rank20: f64,
    #[serde(rename = "mAP")]
    pub map: f64,
    /// `cmc[r]` is the fraction of probes matched within rank `r + 1`.
    pub cmc: Vec<f64>,
    pub num_probes: usize,
    pub num_gallery: usize,
    /// Probes without any correct gallery item; they are left out of every metric.
    pub skipped_probes: usize,
    /// Gallery indices per probe, nearest first.
    #[serde(skip)]
    pub ranked: Vec<Vec<usize>>,
}

impl EvalReport {
    /// CMC at rank `r` (1-based), saturating at the gallery size.
    pub fn cmc_at(&self, r: usize) -> f64 {
        if self.cmc.is_empty() {
            return 0.0;
        }
        self.cmc[r.clamp(1, self.cmc.len()) - 1]
    }
}

/// Gallery indices sorted by ascending Euclidean distance, ties by index.
pub fn rank_gallery(probe: &[f64], gallery: &[Labeled]) -> Vec<usize> {
    let dists: Vec<f64> = gallery.iter().map(|g| euclidean(probe, &g.feature)).collect();
    let mut order: Vec<usize> = (0..gallery.len()).collect();
    order.sort_by(|&a, &b| dists[a].total_cmp(&dists[b]).then(a.cmp(&b)));
    order
}

/// Mean over relevant items of the precision at each relevant item's rank.
pub fn average_precision(ranked_relevance: &[bool]) -> Option<f64> {
    let mut hits = 0usize;
    let mut sum = 0.0;
    for (i, &rel) in ranked_relevance.iter().enumerate() {
        if rel {
            hits += 1;
            sum += hits as f64 / (i + 1) as f64;
        }
    }
    (hits > 0).then(|| sum / hits as f64)
}

pub fn evaluate(probes: &[Labeled], gallery: &[Labeled]) -> Result<EvalReport> {
    if probes.is_empty() || gallery.is_empty() {
        return Err(Error::Validation("probe and gallery sets must be non-empty".into()));
    }
    let ranked: Vec<Vec<usize>> = probes.par_iter().map(|p| rank_gallery(&p.feature, gallery)).collect();
    let mut first_hit_counts = vec![0usize; gallery.len()];
    let mut ap_sum = 0.0;
    let mut valid = 0usize;
    for (p, order) in probes.iter().zip(&ranked) {
        let relevance: Vec<bool> = order.iter().map(|&g| gallery[g].person_id == p.person_id).collect();
        let Some(ap) = average_precision(&relevance) else {
            continue;
        };
        valid += 1;
        ap_sum += ap;
        let first = relevance.iter().position(|&r| r).expect("has a relevant item");
        first_hit_counts[first] += 1;
    }
    if valid == 0 {
        return Err(Error::Validation("no probe has a correct match in the gallery".into()));
    }
    let mut cmc = Vec::with_capacity(gallery.len());
    let mut cumulative = 0usize;
    for c in first_hit_counts {
        cumulative += c;
        cmc.push(cumulative as f64 / valid as f64);
    }
    let mut report = EvalReport {
        rank1: 0.0,
        rank5: 0.0,
        rank20: 0.0,
        map: ap_sum / valid as f64,
        cmc,
        num_probes: valid,
        num_gallery: gallery.len(),
        skipped_probes: probes.len() - valid,
        ranked,
    };
    report.rank1 = report.cmc_at(1);
    report.rank5 = report.cmc_at(5);
    report.rank20 = report.cmc_at(20);
    Ok(report)
}

/// Identity split for one trial.
#[derive(Debug, Clone, PartialEq)]
pub struct Split {
    pub train_persons: Vec<u32>,
    pub test_persons: Vec<u32>,
    pub probe: Vec<TrackletId>,
    pub gallery: Vec<TrackletId>,
}

impl Split {
    pub fn training_view(&self, manifest: &DatasetManifest) -> Result<TrainingView> {
        let labels: BTreeMap<TrackletId, u32> = manifest.labels()?.into_iter().collect();
        let train: BTreeSet<u32> = self.train_persons.iter().copied().collect();
        Ok(manifest.training_view_where(|t| train.contains(&labels[&t])))
    }
}

/// Halves the identities seen by at least two cameras with a seeded shuffle
/// (the first half trains). Identities seen by one camera always train.
/// Test tracklets from the lowest camera are probes, the rest gallery.
pub fn split_protocol(manifest: &DatasetManifest, trial_seed: u64) -> Result<Split> {
    let labels = manifest.labels()?;
    let mut cams_of: BTreeMap<u32, BTreeSet<CameraId>> = BTreeMap::new();
    for (t, p) in &labels {
        cams_of.entry(*p).or_default().insert(t.camera);
    }
    let mut eligible: Vec<u32> = cams_of.iter().filter(|(_, c)| c.len() >= 2).map(|(p, _)| *p).collect();
    if eligible.len() < 2 {
        return Err(Error::InsufficientCrossCameraIdentities(eligible.len()));
    }
    let single: Vec<u32> = cams_of.iter().filter(|(_, c)| c.len() < 2).map(|(p, _)| *p).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(trial_seed);
    eligible.shuffle(&mut rng);
    let n_train = eligible.len() / 2;
    let mut train_persons: Vec<u32> = eligible[..n_train].iter().copied().chain(single).collect();
    let mut test_persons: Vec<u32> = eligible[n_train..].to_vec();
    train_persons.sort_unstable();
    test_persons.sort_unstable();
    let probe_camera = manifest.cameras.iter().min().copied().unwrap_or(CameraId(0));
    let test: BTreeSet<u32> = test_persons.iter().copied().collect();
    let mut probe = Vec::new();
    let mut gallery = Vec::new();
    for (t, p) in &labels {
        if test.contains(p) {
            if t.camera == probe_camera {
                probe.push(*t);
            } else {
                gallery.push(*t);
            }
        }
    }
    probe.sort_unstable();
    gallery.sort_unstable();
    Ok(Split {
        train_persons,
        test_persons,
        probe,
        gallery,
    })
}

/// Every identity seen by two or more cameras is a test identity: probes from
/// the lowest camera, gallery from the others.
pub fn full_test_split(manifest: &DatasetManifest) -> Result<Split> {
    let labels = manifest.labels()?;
    let mut cams_of: BTreeMap<u32, BTreeSet<CameraId>> = BTreeMap::new();
    for (t, p) in &labels {
        cams_of.entry(*p).or_default().insert(t.camera);
    }
    let test: Vec<u32> = cams_of.iter().filter(|(_, c)| c.len() >= 2).map(|(p, _)| *p).collect();
    if test.is_empty() {
        return Err(Error::InsufficientCrossCameraIdentities(0));
    }
    let probe_camera = manifest.cameras.iter().min().copied().unwrap_or(CameraId(0));
    let test_set: BTreeSet<u32> = test.iter().copied().collect();
    let (mut probe, mut gallery): (Vec<_>, Vec<_>) = labels
        .iter()
        .filter(|(_, p)| test_set.contains(p))
        .map(|(t, _)| *t)
        .partition(|t| t.camera == probe_camera);
    probe.sort_unstable();
    gallery.sort_unstable();
    Ok(Split {
        train_persons: Vec::new(),
        test_persons: test,
        probe,
        gallery,
    })
}

/// Metrics averaged over repeated trials.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialSummary {
    pub rank1: f64,
    pub rank5: f64,
    pub rank20: f64,
    #[serde(rename = "mAP")]
    pub map: f64,
    pub trials: usize,
    /// Mean CMC curve, truncated to the shortest gallery.
    pub cmc: Vec<f64>,
    pub per_trial: Vec<EvalReport>,
}

impl TrialSummary {
    pub fn average(reports: Vec<EvalReport>) -> Result<Self> {
        if reports.is_empty() {
            return Err(Error::Validation("no trials to average".into()));
        }
        let n = reports.len() as f64;
        let mean = |f: fn(&EvalReport) -> f64| reports.iter().map(f).sum::<f64>() / n;
        let len = reports.iter().map(|r| r.cmc.len()).min().unwrap_or(0);
        let cmc = (0..len).map(|i| reports.iter().map(|r| r.cmc[i]).sum::<f64>() / n).collect();
        Ok(TrialSummary {
            rank1: mean(|r| r.rank1),
            rank5: mean(|r| r.rank5),
            rank20: mean(|r| r.rank20),
            map: mean(|r| r.map),
            trials: reports.len(),
            cmc,
            per_trial: reports,
        })
    }

    /// `rank,cmc` rows, one per rank.
    pub fn cmc_csv(&self) -> String {
        let mut out = String::from("rank,cmc\n");
        for (i, v) in self.cmc.iter().enumerate() {
            out.push_str(&format!("{},{}\n", i + 1, v));
        }
        out
    }
}
