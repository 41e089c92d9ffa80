//! Anchor-based association learning.
//!
//! Every tracklet owns `k` intra-camera anchors (one per part) that follow its
//! features by exponential moving average, and `k` cross-camera anchors that
//! average the intra anchor with its cyclic-ranking-consistent partner from
//! another camera. Features are pulled toward their source anchors by two
//! top-push margin losses.
//!
//! Anchors are slot-indexed; slot order is `(camera, tracklet)` order, which
//! is also the tie-break order everywhere in this module.

use std::collections::{BTreeMap, BTreeSet};

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::dataset::{CameraId, TrackletId};
use crate::error::{Error, Result};
use crate::features::normalize_vec;

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

pub fn euclidean(a: &[f64], b: &[f64]) -> f64 {
    sq_dist(a, b).sqrt()
}

#[derive(Debug, Clone, PartialEq)]
pub struct AnchorBank {
    slots: Vec<TrackletId>,
    k: usize,
    dim: usize,
    intra: Vec<f64>,
    cross: Vec<f64>,
    pub eta: f64,
    /// Number of completed update rounds.
    pub t: u64,
    /// Project anchors back to the unit sphere after every update.
    pub renormalize: bool,
}

impl AnchorBank {
    /// A bank with all anchors zero. `slots` must be sorted and unique.
    pub fn zeros(slots: Vec<TrackletId>, k: usize, dim: usize, eta: f64) -> Result<Self> {
        if slots.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Validation("anchor slots must be sorted and unique".into()));
        }
        if !(eta > 0.0 && eta <= 1.0) {
            return Err(Error::InvalidConfig(format!("update rate eta must lie in (0, 1], got {eta}")));
        }
        let n = slots.len() * k * dim;
        Ok(AnchorBank {
            slots,
            k,
            dim,
            intra: vec![0.0; n],
            cross: vec![0.0; n],
            eta,
            t: 0,
            renormalize: true,
        })
    }

    /// Builds a bank whose intra anchors are the normalized means of each
    /// tracklet's frame features; cross anchors start as copies.
    ///
    /// `frames` yields `(slot, parts)` with `parts[i]` the part-`i` feature.
    pub fn from_frame_means<'a>(
        slots: Vec<TrackletId>,
        k: usize,
        dim: usize,
        eta: f64,
        frames: impl IntoIterator<Item = (usize, &'a [Vec<f64>])>,
    ) -> Result<Self> {
        let mut bank = AnchorBank::zeros(slots, k, dim, eta)?;
        let mut counts = vec![0usize; bank.num_slots()];
        for (slot, parts) in frames {
            if slot >= bank.num_slots() || parts.len() != k {
                return Err(Error::ShapeMismatch(format!("frame for slot {slot} with {} parts", parts.len())));
            }
            counts[slot] += 1;
            for (i, p) in parts.iter().enumerate() {
                if p.len() != dim {
                    return Err(Error::ShapeMismatch(format!("part feature of dim {}, expected {dim}", p.len())));
                }
                let off = bank.offset(slot, i);
                for (a, v) in bank.intra[off..off + dim].iter_mut().zip(p) {
                    *a += v;
                }
            }
        }
        if counts.contains(&0) {
            return Err(Error::EmptyTracklet);
        }
        for (slot, &count) in counts.iter().enumerate() {
            for i in 0..k {
                let off = bank.offset(slot, i);
                let mean: Vec<f64> = bank.intra[off..off + dim].iter().map(|v| v / count as f64).collect();
                bank.intra[off..off + dim].copy_from_slice(&normalize_vec(&mean));
            }
        }
        bank.cross = bank.intra.clone();
        Ok(bank)
    }

    pub fn num_slots(&self) -> usize {
        self.slots.len()
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn slots(&self) -> &[TrackletId] {
        &self.slots
    }

    pub fn slot_of(&self, id: TrackletId) -> Option<usize> {
        self.slots.binary_search(&id).ok()
    }

    pub fn camera(&self, slot: usize) -> CameraId {
        self.slots[slot].camera
    }

    pub fn slots_of_camera(&self, camera: CameraId) -> std::ops::Range<usize> {
        let start = self.slots.partition_point(|s| s.camera < camera);
        let end = self.slots.partition_point(|s| s.camera <= camera);
        start..end
    }

    pub fn num_cameras(&self) -> usize {
        self.slots.iter().map(|s| s.camera).collect::<BTreeSet<_>>().len()
    }

    fn offset(&self, slot: usize, part: usize) -> usize {
        (slot * self.k + part) * self.dim
    }

    pub fn intra(&self, slot: usize, part: usize) -> &[f64] {
        let off = self.offset(slot, part);
        &self.intra[off..off + self.dim]
    }

    pub fn cross(&self, slot: usize, part: usize) -> &[f64] {
        let off = self.offset(slot, part);
        &self.cross[off..off + self.dim]
    }

    pub fn set_intra(&mut self, slot: usize, part: usize, value: &[f64]) {
        let off = self.offset(slot, part);
        self.intra[off..off + self.dim].copy_from_slice(value);
    }

    pub fn set_cross(&mut self, slot: usize, part: usize, value: &[f64]) {
        let off = self.offset(slot, part);
        self.cross[off..off + self.dim].copy_from_slice(value);
    }

    /// Flat intra anchors, `(slot, part, dim)` row-major.
    pub fn intra_data(&self) -> &[f64] {
        &self.intra
    }

    pub fn cross_data(&self) -> &[f64] {
        &self.cross
    }

    pub fn restore(&mut self, intra: Vec<f64>, cross: Vec<f64>) -> Result<()> {
        let n = self.slots.len() * self.k * self.dim;
        if intra.len() != n || cross.len() != n {
            return Err(Error::ShapeMismatch(format!("anchor tensors need {n} values")));
        }
        self.intra = intra;
        self.cross = cross;
        Ok(())
    }

    /// `I <- I - eta (I - x)`, then renormalized when enabled.
    pub fn ema_update(&mut self, slot: usize, part: usize, x: &[f64]) -> Result<&[f64]> {
        if slot >= self.num_slots() || part >= self.k {
            return Err(Error::Validation(format!("no anchor at slot {slot}, part {part}")));
        }
        if x.len() != self.dim {
            return Err(Error::ShapeMismatch(format!("feature of dim {}, expected {}", x.len(), self.dim)));
        }
        let eta = self.eta;
        let off = self.offset(slot, part);
        let anchor = &mut self.intra[off..off + self.dim];
        for (a, v) in anchor.iter_mut().zip(x) {
            *a -= eta * (*a - v);
        }
        if self.renormalize {
            let n = normalize_vec(anchor);
            anchor.copy_from_slice(&n);
        }
        Ok(&self.intra[off..off + self.dim])
    }

    pub fn ema_update_tracklet(&mut self, id: TrackletId, part: usize, x: &[f64]) -> Result<&[f64]> {
        let slot = self.slot_of(id).ok_or(Error::UnknownTracklet {
            camera: id.camera.0,
            tracklet: id.id,
        })?;
        self.ema_update(slot, part, x)
    }

    /// Slot of the nearest intra anchor to `slot` among all other cameras,
    /// lowest slot winning ties.
    pub fn nearest_other_camera(&self, slot: usize, part: usize) -> Option<usize> {
        let cam = self.camera(slot);
        let a = self.intra(slot, part);
        let mut best: Option<(f64, usize)> = None;
        for other in 0..self.num_slots() {
            if self.camera(other) == cam {
                continue;
            }
            let d = sq_dist(a, self.intra(other, part));
            if best.is_none_or(|(bd, _)| d < bd) {
                best = Some((d, other));
            }
        }
        best.map(|(_, s)| s)
    }

    /// Unordered mutual-nearest-neighbor pairs across cameras for one part,
    /// each reported once as `(lower slot, higher slot)`.
    pub fn compute_crc_pairs(&self, part: usize) -> BTreeSet<(usize, usize)> {
        if self.num_cameras() < 2 {
            log::warn!("cyclic ranking consistency needs at least two cameras; no pairs");
            return BTreeSet::new();
        }
        let nearest: Vec<Option<usize>> = (0..self.num_slots())
            .map(|s| self.nearest_other_camera(s, part))
            .collect();
        let mut pairs = BTreeSet::new();
        for (a, nn) in nearest.iter().enumerate() {
            if let Some(b) = *nn {
                if a < b && nearest[b] == Some(a) {
                    pairs.insert((a, b));
                }
            }
        }
        pairs
    }

    /// Cross-anchor update for one part; while warming up every cross anchor
    /// is pinned to its intra anchor.
    ///
    /// `previous_intra` is the intra bank as it was before this round's EMA
    /// updates; partners are read from it.
    pub fn update_cross_anchors(
        &mut self,
        part: usize,
        pairs: &BTreeSet<(usize, usize)>,
        warmup_active: bool,
        previous_intra: &[f64],
    ) {
        let dim = self.dim;
        for slot in 0..self.num_slots() {
            let current = self.intra(slot, part).to_vec();
            self.set_cross(slot, part, &current);
        }
        if warmup_active {
            return;
        }
        for &(a, b) in pairs {
            for (me, partner) in [(a, b), (b, a)] {
                let off = self.offset(partner, part);
                let partner_prev = &previous_intra[off..off + dim];
                let mean: Vec<f64> = self
                    .intra(me, part)
                    .iter()
                    .zip(partner_prev)
                    .map(|(x, y)| 0.5 * (x + y))
                    .collect();
                let value = if self.renormalize { normalize_vec(&mean) } else { mean };
                self.set_cross(me, part, &value);
            }
        }
    }

    /// Pins every cross anchor to its intra anchor, for all parts.
    pub fn sync_cross_to_intra(&mut self) {
        self.cross.copy_from_slice(&self.intra);
    }
}

/// Distances of one batch item's part feature to the anchors.
#[derive(Debug, Clone, PartialEq)]
pub struct ItemDistances {
    /// Smallest distance to any intra anchor of the item's camera.
    pub d_min: f64,
    /// Distance to the source intra anchor.
    pub d_intra: f64,
    /// Distance to the source cross anchor.
    pub d_cross: f64,
    /// Slot achieving `d_min`.
    pub argmin: usize,
    /// `(x - I) / |x - I|`, zero when `x = I`.
    pub intra_dir: Vec<f64>,
    /// `(x - C) / |x - C|`, zero when `x = C`.
    pub cross_dir: Vec<f64>,
}

impl ItemDistances {
    /// Whether the source anchor is the closest one (second branch of the losses).
    pub fn source_is_nearest(&self) -> bool {
        self.d_intra == self.d_min
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BatchDistances {
    /// `items[n][i]` for batch item `n`, part `i`.
    pub items: Vec<Vec<ItemDistances>>,
    pub cameras: Vec<CameraId>,
    /// Mean `d_min` per camera and part over the batch items of that camera.
    pub d_bar: BTreeMap<CameraId, Vec<f64>>,
}

impl BatchDistances {
    pub fn d_bar_of(&self, item: usize, part: usize) -> f64 {
        self.d_bar[&self.cameras[item]][part]
    }
}

fn unit_direction(x: &[f64], a: &[f64], dist: f64) -> Vec<f64> {
    if dist == 0.0 {
        return vec![0.0; x.len()];
    }
    x.iter().zip(a).map(|(p, q)| (p - q) / dist).collect()
}

/// `features[i]` holds the part-`i` features of the batch, one row per item.
pub fn compute_distances(features: &[Array2<f64>], sources: &[TrackletId], bank: &AnchorBank) -> Result<BatchDistances> {
    if features.len() != bank.k() {
        return Err(Error::ShapeMismatch(format!("{} parts, bank has {}", features.len(), bank.k())));
    }
    let b = sources.len();
    if features.iter().any(|f| f.nrows() != b || f.ncols() != bank.dim()) {
        return Err(Error::ShapeMismatch(format!(
            "features must be {b} x {}, one row per source",
            bank.dim()
        )));
    }
    let mut items = Vec::with_capacity(b);
    let mut cameras = Vec::with_capacity(b);
    for (n, src) in sources.iter().enumerate() {
        let slot = bank.slot_of(*src).ok_or(Error::UnknownSource {
            camera: src.camera.0,
            tracklet: src.id,
        })?;
        cameras.push(src.camera);
        let same_camera = bank.slots_of_camera(src.camera);
        let mut per_part = Vec::with_capacity(bank.k());
        for (part, feats) in features.iter().enumerate() {
            let row = feats.row(n);
            let x = row.as_slice().expect("standard layout");
            let mut d_min = f64::INFINITY;
            let mut argmin = slot;
            let mut d_intra = 0.0;
            for other in same_camera.clone() {
                let d = euclidean(x, bank.intra(other, part));
                if d < d_min {
                    d_min = d;
                    argmin = other;
                }
                if other == slot {
                    d_intra = d;
                }
            }
            let d_cross = euclidean(x, bank.cross(slot, part));
            per_part.push(ItemDistances {
                d_min,
                d_intra,
                d_cross,
                argmin,
                intra_dir: unit_direction(x, bank.intra(slot, part), d_intra),
                cross_dir: unit_direction(x, bank.cross(slot, part), d_cross),
            });
        }
        items.push(per_part);
    }
    let mut sums: BTreeMap<CameraId, (Vec<f64>, usize)> = BTreeMap::new();
    for (n, cam) in cameras.iter().enumerate() {
        let e = sums.entry(*cam).or_insert_with(|| (vec![0.0; bank.k()], 0));
        for (s, d) in e.0.iter_mut().zip(&items[n]) {
            *s += d.d_min;
        }
        e.1 += 1;
    }
    let d_bar = sums
        .into_iter()
        .map(|(cam, (s, count))| (cam, s.into_iter().map(|v| v / count as f64).collect()))
        .collect();
    Ok(BatchDistances { items, cameras, d_bar })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    pub margin: f64,
    pub lambda: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig { margin: 0.5, lambda: 1.0 }
    }
}

/// Loss of one item and part, with its derivatives with respect to
/// `d_intra` and `d_cross`. `d_min` and `d_bar` are thresholds, not variables.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PartLoss {
    pub intra: f64,
    pub cross: f64,
    pub total: f64,
    pub d_total_d_intra: f64,
    pub d_total_d_cross: f64,
}

/// Intra and cross hinge losses. Both pick their threshold with the same test,
/// `d_intra == d_min`.
pub fn part_loss(d_intra: f64, d_min: f64, d_bar: f64, d_cross: f64, cfg: &LossConfig) -> PartLoss {
    let threshold = if d_intra == d_min { d_bar } else { d_min };
    let intra_arg = d_intra - threshold + cfg.margin;
    let cross_arg = d_cross - threshold + cfg.margin;
    let intra = intra_arg.max(0.0);
    let cross = cross_arg.max(0.0);
    PartLoss {
        intra,
        cross,
        total: intra + cfg.lambda * cross,
        d_total_d_intra: if intra_arg > 0.0 { 1.0 } else { 0.0 },
        d_total_d_cross: if cross_arg > 0.0 { cfg.lambda } else { 0.0 },
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AssociationLoss {
    /// `L^I + lambda L^C`, averaged over the batch.
    pub loss: f64,
    pub intra: f64,
    pub cross: f64,
    /// Gradient with respect to the features, same layout as the input.
    pub grads: Vec<Array2<f64>>,
}

/// Batch loss `mean_n (1/k) sum_i L^u_i` and its gradient with respect to the
/// features that produced `d`. Anchors and thresholds are constants.
pub fn association_loss(d: &BatchDistances, cfg: &LossConfig) -> AssociationLoss {
    let b = d.items.len();
    let k = d.items.first().map_or(0, Vec::len);
    let dim = d.items.first().and_then(|p| p.first()).map_or(0, |x| x.intra_dir.len());
    let mut grads = vec![Array2::zeros((b, dim)); k];
    let scale = 1.0 / (b.max(1) * k.max(1)) as f64;
    let (mut total, mut intra, mut cross) = (0.0, 0.0, 0.0);
    for (n, parts) in d.items.iter().enumerate() {
        for (i, item) in parts.iter().enumerate() {
            let l = part_loss(item.d_intra, item.d_min, d.d_bar_of(n, i), item.d_cross, cfg);
            total += l.total;
            intra += l.intra;
            cross += l.cross;
            let mut row = grads[i].row_mut(n);
            for (j, g) in row.iter_mut().enumerate() {
                *g = scale * (l.d_total_d_intra * item.intra_dir[j] + l.d_total_d_cross * item.cross_dir[j]);
            }
        }
    }
    AssociationLoss {
        loss: total * scale,
        intra: intra * scale,
        cross: cross * scale,
        grads,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    fn slots(per_camera: &[usize]) -> Vec<TrackletId> {
        per_camera
            .iter()
            .enumerate()
            .flat_map(|(c, &n)| (0..n as u32).map(move |t| TrackletId::new(c as u32, t)))
            .collect()
    }

    fn random_unit(rng: &mut ChaCha8Rng, d: usize) -> Vec<f64> {
        normalize_vec(&(0..d).map(|_| rng.sample::<f64, _>(StandardNormal)).collect::<Vec<_>>())
    }

    fn random_bank(per_camera: &[usize], k: usize, d: usize, seed: u64) -> AnchorBank {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut bank = AnchorBank::zeros(slots(per_camera), k, d, 0.5).unwrap();
        for s in 0..bank.num_slots() {
            for p in 0..k {
                let v = random_unit(&mut rng, d);
                bank.set_intra(s, p, &v);
                bank.set_cross(s, p, &v);
            }
        }
        bank
    }

    #[test]
    fn init_from_single_frame_and_duplicates() {
        let f = vec![vec![3.0, 4.0]];
        let bank = AnchorBank::from_frame_means(slots(&[1]), 1, 2, 0.5, [(0usize, f.as_slice())]).unwrap();
        assert_eq!(bank.intra(0, 0), &[0.6, 0.8]);
        let g = vec![vec![0.0, 1.0]];
        let bank = AnchorBank::from_frame_means(slots(&[1]), 1, 2, 0.5, [(0usize, g.as_slice()), (0, g.as_slice())]).unwrap();
        assert_eq!(bank.intra(0, 0), &[0.0, 1.0]);
        assert_eq!(bank.cross_data(), bank.intra_data());
    }

    #[test]
    fn init_rejects_empty_tracklet() {
        let f = vec![vec![1.0, 0.0]];
        let err = AnchorBank::from_frame_means(slots(&[2]), 1, 2, 0.5, [(0usize, f.as_slice())]).unwrap_err();
        assert!(matches!(err, Error::EmptyTracklet));
    }

    #[test]
    fn init_equals_direct_mean() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let frames: Vec<(usize, Vec<Vec<f64>>)> = (0..12)
            .map(|i| (i % 3, (0..2).map(|_| random_unit(&mut rng, 5)).collect()))
            .collect();
        let bank = AnchorBank::from_frame_means(slots(&[2, 1]), 2, 5, 0.5, frames.iter().map(|(s, f)| (*s, f.as_slice()))).unwrap();
        for slot in 0..3 {
            for part in 0..2 {
                let mut mean = vec![0.0; 5];
                let mut n = 0.0;
                for (s, f) in &frames {
                    if *s == slot {
                        n += 1.0;
                        for (m, v) in mean.iter_mut().zip(&f[part]) {
                            *m += v;
                        }
                    }
                }
                let norm = mean.iter().map(|v| (v / n) * (v / n)).sum::<f64>().sqrt();
                for (a, m) in bank.intra(slot, part).iter().zip(&mean) {
                    assert!((a - m / n / norm).abs() < 1e-6);
                }
            }
        }
    }

    #[test]
    fn ema_cases() {
        let mut bank = AnchorBank::zeros(slots(&[1]), 1, 2, 0.5).unwrap();
        bank.set_intra(0, 0, &[1.0, 0.0]);
        bank.ema_update(0, 0, &[1.0, 0.0]).unwrap();
        assert_eq!(bank.intra(0, 0), &[1.0, 0.0]);

        bank.ema_update(0, 0, &[0.0, 1.0]).unwrap();
        let h = 2f64.sqrt() / 2.0;
        assert!((bank.intra(0, 0)[0] - h).abs() < 1e-15 && (bank.intra(0, 0)[1] - h).abs() < 1e-15);

        bank.renormalize = false;
        bank.set_intra(0, 0, &[1.0, 0.0]);
        bank.ema_update(0, 0, &[0.0, 1.0]).unwrap();
        assert_eq!(bank.intra(0, 0), &[0.5, 0.5]);

        bank.eta = 1.0;
        bank.ema_update(0, 0, &[0.3, -0.2]).unwrap();
        assert!((bank.intra(0, 0)[0] - 0.3).abs() < 1e-15 && (bank.intra(0, 0)[1] + 0.2).abs() < 1e-15);
    }

    #[test]
    fn ema_unknown_tracklet() {
        let mut bank = AnchorBank::zeros(slots(&[2]), 1, 2, 0.5).unwrap();
        assert!(matches!(
            bank.ema_update_tracklet(TrackletId::new(0, 9), 0, &[1.0, 0.0]),
            Err(Error::UnknownTracklet { camera: 0, tracklet: 9 })
        ));
    }

    #[test]
    fn single_camera_has_no_pairs() {
        let bank = random_bank(&[5], 1, 3, 1);
        assert!(bank.compute_crc_pairs(0).is_empty());
    }

    #[test]
    fn planted_pairs_recovered() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut bank = AnchorBank::zeros(slots(&[6, 6]), 1, 16, 0.5).unwrap();
        let mut expected = BTreeSet::new();
        for i in 0..6 {
            let v = random_unit(&mut rng, 16);
            let noisy: Vec<f64> = v.iter().map(|x| x + 0.01 * rng.sample::<f64, _>(StandardNormal)).collect();
            bank.set_intra(i, 0, &v);
            // partner j in camera 1 at a permuted slot
            let j = 6 + (i * 5) % 6;
            bank.set_intra(j, 0, &normalize_vec(&noisy));
            expected.insert((i, j));
        }
        assert_eq!(bank.compute_crc_pairs(0), expected);
    }

    #[test]
    fn one_directional_match_excluded() {
        let mut bank = AnchorBank::zeros(slots(&[2, 1]), 1, 2, 0.5).unwrap();
        // A=(0,0) at angle 0, A'=(0,1) at 10 degrees, B=(1,0) at 12 degrees
        let at = |deg: f64| [deg.to_radians().cos(), deg.to_radians().sin()];
        bank.set_intra(0, 0, &at(0.0));
        bank.set_intra(1, 0, &at(10.0));
        bank.set_intra(2, 0, &at(12.0));
        assert_eq!(bank.nearest_other_camera(0, 0), Some(2));
        assert_eq!(bank.nearest_other_camera(2, 0), Some(1));
        let pairs = bank.compute_crc_pairs(0);
        assert_eq!(pairs, BTreeSet::from([(1, 2)]));
    }

    #[test]
    fn ties_go_to_lowest_slot() {
        let mut bank = AnchorBank::zeros(slots(&[1, 2]), 1, 2, 0.5).unwrap();
        bank.set_intra(0, 0, &[1.0, 0.0]);
        bank.set_intra(1, 0, &[0.0, 1.0]);
        bank.set_intra(2, 0, &[0.0, -1.0]);
        assert_eq!(bank.nearest_other_camera(0, 0), Some(1));
    }

    #[test]
    fn cross_update_cases() {
        let mut bank = AnchorBank::zeros(slots(&[1, 1]), 1, 2, 0.5).unwrap();
        bank.set_intra(0, 0, &[1.0, 0.0]);
        bank.set_intra(1, 0, &[0.0, 1.0]);
        let prev = bank.intra_data().to_vec();
        let pairs = BTreeSet::from([(0, 1)]);

        bank.update_cross_anchors(0, &pairs, true, &prev);
        assert_eq!(bank.cross_data(), bank.intra_data());

        bank.update_cross_anchors(0, &pairs, false, &prev);
        let h = 2f64.sqrt() / 2.0;
        for slot in 0..2 {
            let c = bank.cross(slot, 0);
            assert!((c[0] - h).abs() < 1e-15 && (c[1] - h).abs() < 1e-15);
        }

        bank.set_intra(0, 0, &[0.6, 0.8]);
        bank.set_intra(1, 0, &[0.6, 0.8]);
        let same = bank.intra_data().to_vec();
        bank.update_cross_anchors(0, &pairs, false, &same);
        assert_eq!(bank.cross(0, 0), &[0.6, 0.8]);
    }

    #[test]
    fn cross_update_reads_partner_snapshot() {
        let mut bank = AnchorBank::zeros(slots(&[1, 1]), 1, 2, 0.5).unwrap();
        bank.renormalize = false;
        bank.set_intra(0, 0, &[1.0, 0.0]);
        bank.set_intra(1, 0, &[0.0, 1.0]);
        let prev = bank.intra_data().to_vec();
        bank.set_intra(1, 0, &[0.0, 3.0]);
        bank.update_cross_anchors(0, &BTreeSet::from([(0, 1)]), false, &prev);
        assert_eq!(bank.cross(0, 0), &[0.5, 0.5]);
        assert_eq!(bank.cross(1, 0), &[0.5, 1.5]);
    }

    #[test]
    fn distances_trivial_case() {
        let mut bank = AnchorBank::zeros(slots(&[3]), 1, 2, 0.5).unwrap();
        bank.set_intra(0, 0, &[1.0, 0.0]);
        bank.set_intra(1, 0, &[-1.0, 0.0]);
        bank.set_intra(2, 0, &[0.0, -1.0]);
        bank.sync_cross_to_intra();
        let f = vec![Array2::from_shape_vec((1, 2), vec![1.0, 0.0]).unwrap()];
        let d = compute_distances(&f, &[TrackletId::new(0, 0)], &bank).unwrap();
        let item = &d.items[0][0];
        assert_eq!((item.d_intra, item.d_min, item.argmin), (0.0, 0.0, 0));
        assert_eq!(d.d_bar[&CameraId(0)], vec![0.0]);
        assert_eq!(item.intra_dir, vec![0.0, 0.0]);
    }

    #[test]
    fn distances_only_use_own_camera() {
        let mut bank = AnchorBank::zeros(slots(&[2, 1]), 1, 2, 0.5).unwrap();
        bank.set_intra(0, 0, &[1.0, 0.0]);
        bank.set_intra(1, 0, &[0.0, 1.0]);
        bank.set_intra(2, 0, &[0.0, -1.0]);
        bank.set_cross(0, 0, &[0.0, -1.0]);
        let x = [0.1, -0.9];
        let f = vec![Array2::from_shape_vec((1, 2), x.to_vec()).unwrap()];
        let d = compute_distances(&f, &[TrackletId::new(0, 0)], &bank).unwrap();
        let item = &d.items[0][0];
        let brute = |a: [f64; 2]| ((x[0] - a[0]).powi(2) + (x[1] - a[1]).powi(2)).sqrt();
        assert!((item.d_intra - brute([1.0, 0.0])).abs() < 1e-7);
        assert!((item.d_min - brute([1.0, 0.0]).min(brute([0.0, 1.0]))).abs() < 1e-7);
        assert!((item.d_cross - brute([0.0, -1.0])).abs() < 1e-7);
        assert_eq!(item.argmin, 0);
    }

    #[test]
    fn unknown_source_rejected() {
        let bank = random_bank(&[2], 1, 2, 1);
        let f = vec![Array2::zeros((1, 2))];
        assert!(matches!(
            compute_distances(&f, &[TrackletId::new(1, 0)], &bank),
            Err(Error::UnknownSource { camera: 1, tracklet: 0 })
        ));
    }

    #[test]
    fn loss_table() {
        let cfg = LossConfig { margin: 0.5, lambda: 1.0 };
        let l = part_loss(0.8, 0.2, 0.4, 0.0, &cfg);
        assert!((l.intra - 1.1).abs() < 1e-12);
        let l = part_loss(0.3, 0.3, 0.3, 0.0, &cfg);
        assert_eq!(l.intra, 0.5);
        let l = part_loss(0.2, 0.2, 0.9, 0.3, &cfg);
        assert_eq!(l.total, 0.0);
        let l = part_loss(0.6, 0.6, 0.7, 0.6, &cfg);
        assert_eq!(l.intra, l.cross);
        assert_eq!(l.total, 2.0 * l.intra);
    }

    #[test]
    fn identical_part_losses_average_to_one_part() {
        let mut bank = AnchorBank::zeros(slots(&[2]), 4, 2, 0.5).unwrap();
        for p in 0..4 {
            bank.set_intra(0, p, &[1.0, 0.0]);
            bank.set_intra(1, p, &[0.0, 1.0]);
        }
        bank.sync_cross_to_intra();
        let f: Vec<_> = (0..4).map(|_| Array2::from_shape_vec((1, 2), vec![0.8, 0.6]).unwrap()).collect();
        let d = compute_distances(&f, &[TrackletId::new(0, 1)], &bank).unwrap();
        let cfg = LossConfig::default();
        let item = &d.items[0][0];
        let single = part_loss(item.d_intra, item.d_min, d.d_bar_of(0, 0), item.d_cross, &cfg).total;
        assert!(single > 0.0);
        assert!((association_loss(&d, &cfg).loss - single).abs() < 1e-15);
    }

    proptest! {
        #[test]
        fn d_min_never_exceeds_d_intra(seed in any::<u64>(), n0 in 1usize..6, n1 in 1usize..6, d in 1usize..8) {
            let bank = random_bank(&[n0, n1], 2, d, seed);
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xabc);
            let sources: Vec<TrackletId> = (0..4).map(|i| bank.slots()[(i * 7 + seed as usize) % bank.num_slots()]).collect();
            let feats: Vec<Array2<f64>> = (0..2).map(|_| Array2::from_shape_simple_fn((4, d), || rng.random_range(-1.0..1.0))).collect();
            let dist = compute_distances(&feats, &sources, &bank).unwrap();
            for parts in &dist.items {
                for item in parts {
                    prop_assert!(item.d_min <= item.d_intra);
                    prop_assert!(item.d_min >= 0.0 && item.d_cross >= 0.0);
                }
            }
        }

        #[test]
        fn losses_are_nonnegative(di in 0.0f64..2.0, dm in 0.0f64..2.0, db in 0.0f64..2.0, dc in 0.0f64..2.0, m in 0.0f64..1.0, lambda in 0.0f64..2.0) {
            let dm = dm.min(di);
            let cfg = LossConfig { margin: m, lambda };
            let l = part_loss(di, dm, db, dc, &cfg);
            prop_assert!(l.intra >= 0.0 && l.cross >= 0.0 && l.total >= 0.0);
            if l.total == 0.0 {
                let threshold = if di == dm { db } else { dm };
                prop_assert!(di - threshold + m <= 0.0);
                prop_assert!(lambda == 0.0 || dc - threshold + m <= 0.0);
            }
        }

        #[test]
        fn crc_pairs_are_mutual(seed in any::<u64>(), n0 in 1usize..8, n1 in 1usize..8, n2 in 0usize..5) {
            let bank = random_bank(&[n0, n1, n2], 1, 3, seed);
            for (a, b) in bank.compute_crc_pairs(0) {
                prop_assert!(a < b);
                prop_assert_ne!(bank.camera(a), bank.camera(b));
                prop_assert_eq!(bank.nearest_other_camera(a, 0), Some(b));
                prop_assert_eq!(bank.nearest_other_camera(b, 0), Some(a));
            }
        }

        #[test]
        fn ema_contracts_geometrically(seed in any::<u64>(), eta in 0.01f64..1.0, steps in 1usize..30) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut bank = AnchorBank::zeros(slots(&[1]), 1, 4, eta).unwrap();
            bank.renormalize = false;
            let start = random_unit(&mut rng, 4);
            let x = random_unit(&mut rng, 4);
            bank.set_intra(0, 0, &start);
            let d0 = euclidean(&start, &x);
            for _ in 0..steps {
                bank.ema_update(0, 0, &x).unwrap();
            }
            let expected = (1.0 - eta).powi(steps as i32) * d0;
            prop_assert!((euclidean(bank.intra(0, 0), &x) - expected).abs() < 1e-9);
        }
    }
}
