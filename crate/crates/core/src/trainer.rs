//! Mini-batch training of one aware network with anchor-based association
//! learning.
//!
//! One step: look up the batch's pooled part features, run the aware module
//! in train mode, measure distances to the anchors, apply the association
//! loss gradient with the optimizer, then move the intra anchors toward the
//! batch features and refresh the cross anchors (pinned to the intra anchors
//! during warmup).

use std::fmt;
use std::path::Path;

use ndarray::Array2;
use rand::seq::index::sample;
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::association::{association_loss, compute_distances, AnchorBank, LossConfig};
use crate::aware::{AwareInput, AwareKind, GlobalAwareParams, LocalAdapter, Mode};
use crate::checkpoint::{Checkpoint, RngState};
use crate::dataset::{read_feature_map, CameraId, ImageRecord, TrackletId, TrainingView};
use crate::error::{Error, Result};
use crate::features::{extract, PartFeatures, PartitionScale, PoolingMode};
use crate::model::AwareModel;
use crate::optim::{optimizer_apply, OptimizerConfig, OptimizerState};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    /// Partition scale.
    pub k: usize,
    pub pooling: PoolingMode,
    pub aware_kind: AwareKind,
    /// Mini-batch size `M`.
    pub batch_size: usize,
    pub total_iterations: u64,
    /// Epochs during which cross anchors are pinned to intra anchors.
    pub warmup_epochs: u64,
    pub optimizer: OptimizerConfig,
    /// Anchor update rate.
    pub eta: f64,
    pub margin: f64,
    pub lambda: f64,
    /// Output channels `c'` of the global-aware module.
    pub reduced_channels: usize,
    pub seed: u64,
    pub log_interval: u64,
    /// Identity-initialized trainable `c -> c` layer on the local path.
    pub local_adapter: bool,
    /// One global projection per part instead of a shared one.
    pub independent_global_proj: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            k: 8,
            pooling: PoolingMode::Gap,
            aware_kind: AwareKind::Global,
            batch_size: 64,
            total_iterations: 20_000,
            warmup_epochs: 2,
            optimizer: OptimizerConfig::default(),
            eta: 0.5,
            margin: 0.5,
            lambda: 1.0,
            reduced_channels: 256,
            seed: 0,
            log_interval: 100,
            local_adapter: false,
            independent_global_proj: false,
        }
    }
}

impl TrainConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: TrainConfig = serde_json::from_str(text).map_err(|e| Error::Parse {
            path: "train config".into(),
            message: e.to_string(),
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => Error::MissingFile(path.to_path_buf()),
            _ => Error::io(path, e),
        })?;
        let cfg: TrainConfig = serde_json::from_str(&text).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            message: e.to_string(),
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if self.batch_size < 2 {
            return bad(format!("batch_size must be >= 2, got {}", self.batch_size));
        }
        if self.total_iterations < 1 {
            return bad("total_iterations must be >= 1".into());
        }
        if self.k < 1 {
            return bad("k must be >= 1".into());
        }
        if !(self.eta > 0.0 && self.eta <= 1.0) {
            return bad(format!("eta must lie in (0, 1], got {}", self.eta));
        }
        if !(self.margin >= 0.0 && self.margin.is_finite()) {
            return bad(format!("margin must be >= 0, got {}", self.margin));
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return bad(format!("lambda must be >= 0, got {}", self.lambda));
        }
        if self.reduced_channels < 1 {
            return bad("reduced_channels must be >= 1".into());
        }
        if self.log_interval < 1 {
            return bad("log_interval must be >= 1".into());
        }
        self.optimizer.validate()
    }

    pub fn loss(&self) -> LossConfig {
        LossConfig {
            margin: self.margin,
            lambda: self.lambda,
        }
    }

    pub fn partition(&self) -> Result<PartitionScale> {
        PartitionScale::new(self.k)
    }
}

/// Pooled, normalized part features of every training image, computed once
/// since the backbone is frozen.
#[derive(Debug, Clone)]
pub struct TrainingSet {
    pub features: Vec<PartFeatures>,
    pub sources: Vec<TrackletId>,
    pub slots: Vec<TrackletId>,
    pub slot_of_image: Vec<usize>,
}

impl TrainingSet {
    pub fn load(view: &TrainingView, k: PartitionScale, pooling: PoolingMode) -> Result<Self> {
        k.check(view.feature_dims.h)?;
        let images = view.images();
        let features = images
            .par_iter()
            .map(|(_, rec)| extract(&read_feature_map(rec, view.feature_dims)?, k, pooling))
            .collect::<Result<Vec<_>>>()?;
        Ok(TrainingSet {
            features,
            sources: images.iter().map(|(_, r)| r.tracklet).collect(),
            slots: view.tracklets.iter().map(|t| t.id).collect(),
            slot_of_image: images.iter().map(|(s, _)| *s).collect(),
        })
    }

    pub fn len(&self) -> usize {
        self.features.len()
    }

    pub fn is_empty(&self) -> bool {
        self.features.is_empty()
    }

    pub fn cameras(&self) -> Vec<CameraId> {
        self.sources.iter().map(|s| s.camera).collect()
    }
}

/// Draws `m` distinct indices uniformly, redrawing until at least two cameras
/// are represented. `cameras[i]` is the camera of image `i`.
pub fn sample_batch_indices(cameras: &[CameraId], m: usize, rng: &mut impl rand::Rng) -> Result<Vec<usize>> {
    let distinct: std::collections::BTreeSet<_> = cameras.iter().collect();
    if distinct.len() < 2 {
        return Err(Error::DatasetTooSmall(format!(
            "batches need images from 2 cameras, dataset has {}",
            distinct.len()
        )));
    }
    if cameras.len() < m {
        return Err(Error::DatasetTooSmall(format!(
            "batch size {m} exceeds the {} available images",
            cameras.len()
        )));
    }
    loop {
        let batch = sample(rng, cameras.len(), m).into_vec();
        let first = cameras[batch[0]];
        if batch.iter().any(|&i| cameras[i] != first) {
            return Ok(batch);
        }
    }
}

pub fn sample_batch<'a>(view: &'a TrainingView, m: usize, rng: &mut impl rand::Rng) -> Result<Vec<&'a ImageRecord>> {
    let images = view.images();
    let cameras: Vec<CameraId> = images.iter().map(|(_, r)| r.tracklet.camera).collect();
    Ok(sample_batch_indices(&cameras, m, rng)?
        .into_iter()
        .map(|i| images[i].1)
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LogLine {
    pub iteration: u64,
    pub loss: f64,
    pub lr: f64,
    pub warmup: bool,
}

impl fmt::Display for LogLine {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "iter={} loss={:.6} lr={} warmup={}",
            self.iteration, self.loss, self.lr, self.warmup as u8
        )
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepReport {
    pub loss: f64,
    pub intra_loss: f64,
    pub cross_loss: f64,
    pub warmup: bool,
}

pub struct Trainer {
    cfg: TrainConfig,
    set: TrainingSet,
    cameras: Vec<CameraId>,
    model: AwareModel,
    bank: AnchorBank,
    optimizer: OptimizerState,
    rng: ChaCha8Rng,
    iteration: u64,
}

pub fn build_model(cfg: &TrainConfig, c: usize, init_seed: u64) -> AwareModel {
    match cfg.aware_kind {
        AwareKind::Local => AwareModel::Local {
            c,
            k: cfg.k,
            adapter: cfg.local_adapter.then(|| LocalAdapter::identity(c, cfg.k)),
        },
        AwareKind::Global => AwareModel::Global(GlobalAwareParams::init(
            c,
            cfg.reduced_channels,
            cfg.k,
            cfg.independent_global_proj,
            init_seed,
        )),
    }
}

/// One inference pass over the training images; each intra anchor becomes
/// the normalized mean of its tracklet's features.
pub fn init_anchors(set: &TrainingSet, model: &AwareModel, eta: f64) -> Result<AnchorBank> {
    let refs: Vec<&PartFeatures> = set.features.iter().collect();
    let feats = model.infer(&refs)?;
    AnchorBank::from_frame_means(
        set.slots.clone(),
        model.k(),
        model.output_dim(),
        eta,
        set.slot_of_image.iter().copied().zip(feats.iter().map(Vec::as_slice)),
    )
}

impl Trainer {
    pub fn new(view: &TrainingView, cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let set = TrainingSet::load(view, cfg.partition()?, cfg.pooling)?;
        if set.len() < cfg.batch_size {
            return Err(Error::DatasetTooSmall(format!(
                "{} training images for batch size {}",
                set.len(),
                cfg.batch_size
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let model = build_model(&cfg, view.feature_dims.c, rng.next_u64());
        let bank = init_anchors(&set, &model, cfg.eta)?;
        let optimizer = OptimizerState::new(&model.trainable_sizes());
        Ok(Trainer {
            cameras: set.cameras(),
            cfg,
            set,
            model,
            bank,
            optimizer,
            rng,
            iteration: 0,
        })
    }

    /// Continues from a checkpoint taken on the same training view.
    pub fn resume(view: &TrainingView, ckpt: Checkpoint) -> Result<Self> {
        let cfg = ckpt.config.clone();
        let set = TrainingSet::load(view, cfg.partition()?, cfg.pooling)?;
        if set.slots != ckpt.bank.slots() {
            return Err(Error::Validation("checkpoint anchors do not match the training tracklets".into()));
        }
        Ok(Trainer {
            cameras: set.cameras(),
            rng: ckpt.rng.restore(),
            cfg,
            set,
            model: ckpt.model,
            bank: ckpt.bank,
            optimizer: ckpt.optimizer,
            iteration: ckpt.iteration,
        })
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    pub fn model(&self) -> &AwareModel {
        &self.model
    }

    pub fn bank(&self) -> &AnchorBank {
        &self.bank
    }

    pub fn iteration(&self) -> u64 {
        self.iteration
    }

    pub fn training_set(&self) -> &TrainingSet {
        &self.set
    }

    /// Iterations per epoch, `ceil(num_images / M)`.
    pub fn epoch_len(&self) -> u64 {
        (self.set.len() as u64).div_ceil(self.cfg.batch_size as u64)
    }

    pub fn warmup_iterations(&self) -> u64 {
        self.cfg.warmup_epochs * self.epoch_len()
    }

    pub fn warmup_active(&self) -> bool {
        self.iteration < self.warmup_iterations()
    }

    pub fn sample(&mut self) -> Result<Vec<usize>> {
        sample_batch_indices(&self.cameras, self.cfg.batch_size, &mut self.rng)
    }

    pub fn step(&mut self) -> Result<StepReport> {
        let batch = self.sample()?;
        self.train_step(&batch)
    }

    /// One training step on the given training-set image indices.
    pub fn train_step(&mut self, batch: &[usize]) -> Result<StepReport> {
        let items: Vec<&PartFeatures> = batch.iter().map(|&i| &self.set.features[i]).collect();
        let sources: Vec<TrackletId> = batch.iter().map(|&i| self.set.sources[i]).collect();
        let input = AwareInput::from_features(&items)?;
        let (feats, cache) = self.model.forward(&input, Mode::Train)?;
        let distances = compute_distances(&feats, &sources, &self.bank)?;
        let loss = association_loss(&distances, &self.cfg.loss());

        if self.model.is_trainable() {
            let grads = self.model.backward(&cache, &loss.grads)?;
            let grad_refs: Vec<&[f64]> = grads.iter().map(Vec::as_slice).collect();
            let mut params = self.model.trainable_mut();
            optimizer_apply(&mut params, &grad_refs, &mut self.optimizer, &self.cfg.optimizer)?;
        }
        self.model.update_running_stats(&cache);

        let warmup = self.warmup_active();
        self.update_anchors(&feats, batch, warmup)?;
        self.iteration += 1;
        Ok(StepReport {
            loss: loss.loss,
            intra_loss: loss.intra,
            cross_loss: loss.cross,
            warmup,
        })
    }

    fn update_anchors(&mut self, feats: &[Array2<f64>], batch: &[usize], warmup: bool) -> Result<()> {
        let previous = self.bank.intra_data().to_vec();
        for (n, &img) in batch.iter().enumerate() {
            let slot = self.set.slot_of_image[img];
            for (part, f) in feats.iter().enumerate() {
                self.bank.ema_update(slot, part, f.row(n).as_slice().unwrap())?;
            }
        }
        for part in 0..self.bank.k() {
            let pairs = if warmup {
                Default::default()
            } else {
                self.bank.compute_crc_pairs(part)
            };
            self.bank.update_cross_anchors(part, &pairs, warmup, &previous);
        }
        self.bank.t += 1;
        Ok(())
    }

    /// Runs until `until` iterations have completed (capped at the configured
    /// total), reporting a log line every `log_interval` iterations and at the end.
    pub fn run_until(&mut self, until: u64, mut log: impl FnMut(&LogLine)) -> Result<()> {
        let until = until.min(self.cfg.total_iterations);
        let mut last = None;
        while self.iteration < until {
            let report = self.step()?;
            let line = LogLine {
                iteration: self.iteration,
                loss: report.loss,
                lr: self.cfg.optimizer.learning_rate(),
                warmup: report.warmup,
            };
            if self.iteration.is_multiple_of(self.cfg.log_interval) {
                log(&line);
                last = None;
            } else {
                last = Some(line);
            }
        }
        if let Some(line) = last {
            log(&line);
        }
        Ok(())
    }

    pub fn run(&mut self, log: impl FnMut(&LogLine)) -> Result<()> {
        self.run_until(self.cfg.total_iterations, log)
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            config: self.cfg.clone(),
            iteration: self.iteration,
            model: self.model.clone(),
            bank: self.bank.clone(),
            optimizer: self.optimizer.clone(),
            rng: RngState::capture(&self.rng),
        }
    }
}

/// Trains from scratch for the configured number of iterations.
pub fn train(view: &TrainingView, cfg: TrainConfig, log: impl FnMut(&LogLine)) -> Result<Checkpoint> {
    let mut trainer = Trainer::new(view, cfg)?;
    trainer.run(log)?;
    Ok(trainer.checkpoint())
}
