//! Central finite-difference checks of the analytic gradients: the
//! global-aware module (parameters and inputs), the association loss with
//! respect to the features, and the composition used by the trainer.
//!
//! The loss treats `D_min` and `D̄` as constants, so the reference loss
//! recomputes only the distances to the source anchors and keeps the base
//! point's thresholds. Configurations near a ReLU or hinge kink are redrawn.

use ndarray::Array2;
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use crate::association::{association_loss, compute_distances, euclidean, AnchorBank, LossConfig};
use crate::aware::{AwareInput, GlobalAwareParams, Mode};
use crate::dataset::TrackletId;
use crate::error::{Error, Result};
use crate::features::normalize_vec;
use crate::model::AwareModel;

pub const STEP: f64 = 1e-5;
pub const KINK_MARGIN: f64 = 1e-3;
/// Gradients smaller than this are compared absolutely; finite differences
/// cannot resolve them relatively.
pub const REL_FLOOR: f64 = 1e-5;
pub const TOLERANCE: f64 = 1e-4;
const MAX_ATTEMPTS: usize = 200;

pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GradcheckCase {
    pub c: usize,
    pub reduced: usize,
    pub k: usize,
    pub batch: usize,
    pub independent_global_proj: bool,
    pub seed: u64,
}

impl std::fmt::Display for GradcheckCase {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "c={} c'={} k={} B={} independent={} seed={:#x}",
            self.c, self.reduced, self.k, self.batch, self.independent_global_proj, self.seed
        )
    }
}

/// The 24-point grid over `c`, `c'`, `k` and batch size, plus one case with
/// larger dims, each with its own derived seed.
pub fn default_cases(seed: u64) -> Vec<GradcheckCase> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut cases = Vec::new();
    for c in [8, 16] {
        for reduced in [4, 8] {
            for k in [1, 2, 4] {
                for batch in [4, 8] {
                    cases.push(GradcheckCase {
                        c,
                        reduced,
                        k,
                        batch,
                        independent_global_proj: cases.len() % 2 == 1,
                        seed: rng.next_u64(),
                    });
                }
            }
        }
    }
    cases.push(GradcheckCase {
        c: 16,
        reduced: 8,
        k: 4,
        batch: 6,
        independent_global_proj: true,
        seed: rng.next_u64(),
    });
    cases
}

#[derive(Debug, Clone, PartialEq)]
pub struct CheckResult {
    pub coordinates: usize,
    pub max_rel_err: f64,
    pub worst: String,
}

impl CheckResult {
    fn new() -> Self {
        CheckResult {
            coordinates: 0,
            max_rel_err: 0.0,
            worst: String::new(),
        }
    }

    fn record(&mut self, label: impl FnOnce() -> String, analytic: f64, numeric: f64) {
        self.coordinates += 1;
        let e = rel_err(analytic, numeric);
        if e > self.max_rel_err || self.worst.is_empty() {
            self.max_rel_err = self.max_rel_err.max(e);
            self.worst = format!("{} analytic={analytic:.6e} numeric={numeric:.6e}", label());
        }
    }

    fn merge(&mut self, other: CheckResult) {
        self.coordinates += other.coordinates;
        if other.max_rel_err >= self.max_rel_err {
            self.max_rel_err = other.max_rel_err;
            self.worst = other.worst;
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradcheckReport {
    pub cases: usize,
    pub coordinates: usize,
    pub max_rel_err: f64,
    pub worst: String,
}

impl GradcheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_err < TOLERANCE
    }
}

fn normal(rng: &mut impl Rng, scale: f64) -> f64 {
    scale * rng.sample::<f64, _>(StandardNormal)
}

fn unit_rows(rng: &mut impl Rng, rows: usize, cols: usize) -> Array2<f64> {
    let mut m = Array2::zeros((rows, cols));
    for mut row in m.rows_mut() {
        let v: Vec<f64> = (0..cols).map(|_| normal(rng, 1.0)).collect();
        row.as_slice_mut().unwrap().copy_from_slice(&normalize_vec(&v));
    }
    m
}

fn random_params(case: &GradcheckCase, rng: &mut impl Rng) -> GlobalAwareParams {
    let mut p = GlobalAwareParams::init(case.c, case.reduced, case.k, case.independent_global_proj, rng.next_u64());
    for l in &mut p.global_proj {
        l.bias.mapv_inplace(|_| normal(rng, 0.1));
    }
    for m in &mut p.modules {
        m.part_proj.bias.mapv_inplace(|_| normal(rng, 0.1));
        m.fuse.bias.mapv_inplace(|_| normal(rng, 0.1));
        m.norm.gamma.mapv_inplace(|_| 1.0 + normal(rng, 0.2));
        m.norm.beta.mapv_inplace(|_| normal(rng, 0.2));
        m.norm.running_mean.mapv_inplace(|_| normal(rng, 0.1));
        m.norm.running_var.mapv_inplace(|_| rng.random_range(0.05..0.5));
    }
    p
}

fn random_input(case: &GradcheckCase, rng: &mut impl Rng) -> AwareInput {
    AwareInput {
        global: unit_rows(rng, case.batch, case.c),
        parts: (0..case.k).map(|_| unit_rows(rng, case.batch, case.c)).collect(),
    }
}

fn weighted_sum(outputs: &[Array2<f64>], weights: &[Array2<f64>]) -> f64 {
    outputs.iter().zip(weights).map(|(o, w)| (o * w).sum()).sum()
}

fn central(mut f: impl FnMut(f64) -> f64) -> f64 {
    (f(STEP) - f(-STEP)) / (2.0 * STEP)
}

/// Global-aware module: `sum_i <G_i, x_i^g>` with random `G`, against every
/// trainable parameter and every input coordinate.
pub fn check_aware(case: &GradcheckCase, mode: Mode) -> Result<CheckResult> {
    let mut rng = ChaCha8Rng::seed_from_u64(case.seed ^ if mode == Mode::Train { 0xA1 } else { 0xB2 });
    let (params, input, cache) = (0..MAX_ATTEMPTS)
        .find_map(|_| {
            let params = random_params(case, &mut rng);
            let input = random_input(case, &mut rng);
            match params.forward(&input, mode) {
                Ok((_, cache)) if !cache.near_kink(KINK_MARGIN) => Some(Ok((params, input, cache))),
                Ok(_) => None,
                Err(e) => Some(Err(e)),
            }
        })
        .ok_or_else(|| Error::Validation(format!("no kink-free configuration for {case}")))??;
    let weights: Vec<Array2<f64>> = (0..case.k).map(|_| unit_rows(&mut rng, case.batch, case.reduced)).collect();
    let (grads, input_grads) = params.backward(Some(&cache), &weights)?;
    let eval = |p: &GlobalAwareParams, x: &AwareInput| {
        let (out, _) = p.forward(x, mode).expect("shapes already validated");
        weighted_sum(&out, &weights)
    };

    let mut result = CheckResult::new();
    let names = params.trainable_names();
    let analytic: Vec<Vec<f64>> = grads.trainable().into_iter().map(<[f64]>::to_vec).collect();
    for (t, (name, grad)) in names.iter().zip(&analytic).enumerate() {
        for (j, &a) in grad.iter().enumerate() {
            let numeric = central(|h| {
                let mut p = params.clone();
                p.trainable_mut()[t][j] += h;
                eval(&p, &input)
            });
            result.record(|| format!("{case} {mode:?} {name}[{j}]"), a, numeric);
        }
    }
    for (idx, a) in input_grads.global.indexed_iter() {
        let numeric = central(|h| {
            let mut x = input.clone();
            x.global[idx] += h;
            eval(&params, &x)
        });
        result.record(|| format!("{case} {mode:?} input.global{idx:?}"), *a, numeric);
    }
    for (i, g) in input_grads.parts.iter().enumerate() {
        for (idx, a) in g.indexed_iter() {
            let numeric = central(|h| {
                let mut x = input.clone();
                x.parts[i][idx] += h;
                eval(&params, &x)
            });
            result.record(|| format!("{case} {mode:?} input.part{i}{idx:?}"), *a, numeric);
        }
    }
    Ok(result)
}

/// Anchors for `tracklets_per_camera` tracklets on each of two cameras.
fn random_bank(rng: &mut impl Rng, k: usize, dim: usize, tracklets_per_camera: u32) -> Result<AnchorBank> {
    let slots: Vec<TrackletId> = (0..2)
        .flat_map(|cam| (0..tracklets_per_camera).map(move |id| TrackletId::new(cam, id)))
        .collect();
    let mut bank = AnchorBank::zeros(slots, k, dim, 0.5)?;
    for slot in 0..bank.num_slots() {
        for part in 0..k {
            let intra = unit_rows(rng, 1, dim);
            let cross = unit_rows(rng, 1, dim);
            bank.set_intra(slot, part, intra.as_slice().unwrap());
            bank.set_cross(slot, part, cross.as_slice().unwrap());
        }
    }
    Ok(bank)
}

/// The loss with the thresholds of a fixed base point, written out directly.
struct FrozenLoss {
    thresholds: Vec<Vec<f64>>,
    slots: Vec<usize>,
    cfg: LossConfig,
}

impl FrozenLoss {
    fn at(features: &[Array2<f64>], sources: &[TrackletId], bank: &AnchorBank, cfg: LossConfig) -> Result<Option<Self>> {
        let d = compute_distances(features, sources, bank)?;
        let mut thresholds = Vec::new();
        for (n, parts) in d.items.iter().enumerate() {
            let mut row = Vec::new();
            for (i, item) in parts.iter().enumerate() {
                let thr = if item.d_intra == item.d_min { d.d_bar_of(n, i) } else { item.d_min };
                let args = [item.d_intra - thr + cfg.margin, item.d_cross - thr + cfg.margin];
                if args.iter().any(|a| a.abs() < KINK_MARGIN) {
                    return Ok(None);
                }
                // a runner-up within the margin could take over d_min under perturbation
                let same_cam = bank.slots_of_camera(sources[n].camera);
                let x = features[i].row(n);
                let second = same_cam
                    .filter(|&s| s != item.argmin)
                    .map(|s| euclidean(x.as_slice().unwrap(), bank.intra(s, i)))
                    .fold(f64::INFINITY, f64::min);
                if second - item.d_min < KINK_MARGIN {
                    return Ok(None);
                }
                row.push(thr);
            }
            thresholds.push(row);
        }
        let slots = sources.iter().map(|s| bank.slot_of(*s).expect("validated")).collect();
        Ok(Some(FrozenLoss { thresholds, slots, cfg }))
    }

    fn eval(&self, features: &[Array2<f64>], bank: &AnchorBank) -> f64 {
        let b = self.slots.len();
        let k = features.len();
        let mut total = 0.0;
        for (n, &slot) in self.slots.iter().enumerate() {
            for (i, f) in features.iter().enumerate() {
                let x = f.row(n);
                let x = x.as_slice().unwrap();
                let thr = self.thresholds[n][i];
                let di = euclidean(x, bank.intra(slot, i));
                let dc = euclidean(x, bank.cross(slot, i));
                total += (di - thr + self.cfg.margin).max(0.0) + self.cfg.lambda * (dc - thr + self.cfg.margin).max(0.0);
            }
        }
        total / (b * k) as f64
    }
}

/// Features near their source anchor for even items, random for odd ones, so
/// both threshold branches are exercised.
fn mixed_features(rng: &mut impl Rng, bank: &AnchorBank, sources: &[TrackletId], part: usize) -> Array2<f64> {
    let mut f = unit_rows(rng, sources.len(), bank.dim());
    for (n, src) in sources.iter().enumerate() {
        if n % 2 == 0 {
            let anchor = bank.intra(bank.slot_of(*src).unwrap(), part);
            let v: Vec<f64> = anchor.iter().map(|a| a + normal(rng, 0.15)).collect();
            f.row_mut(n).as_slice_mut().unwrap().copy_from_slice(&normalize_vec(&v));
        }
    }
    f
}

fn random_sources(rng: &mut impl Rng, batch: usize, per_camera: u32) -> Vec<TrackletId> {
    (0..batch)
        .map(|n| TrackletId::new((n % 2) as u32, rng.random_range(0..per_camera)))
        .collect()
}

fn loss_config(rng: &mut impl Rng) -> LossConfig {
    LossConfig {
        margin: rng.random_range(0.2..0.8),
        lambda: rng.random_range(0.5..2.0),
    }
}

/// Association loss against every feature coordinate, anchors frozen.
pub fn check_loss(case: &GradcheckCase) -> Result<CheckResult> {
    let mut rng = ChaCha8Rng::seed_from_u64(case.seed ^ 0xC3);
    let per_camera = 3;
    for _ in 0..MAX_ATTEMPTS {
        let bank = random_bank(&mut rng, case.k, case.reduced, per_camera)?;
        let sources = random_sources(&mut rng, case.batch, per_camera);
        let features: Vec<Array2<f64>> = (0..case.k).map(|i| mixed_features(&mut rng, &bank, &sources, i)).collect();
        let cfg = loss_config(&mut rng);
        let Some(frozen) = FrozenLoss::at(&features, &sources, &bank, cfg)? else {
            continue;
        };
        let analytic = association_loss(&compute_distances(&features, &sources, &bank)?, &cfg);
        let mut result = CheckResult::new();
        for (i, g) in analytic.grads.iter().enumerate() {
            for (idx, a) in g.indexed_iter() {
                let numeric = central(|h| {
                    let mut x = features.clone();
                    x[i][idx] += h;
                    frozen.eval(&x, &bank)
                });
                result.record(|| format!("{case} loss part{i}{idx:?}"), *a, numeric);
            }
        }
        return Ok(result);
    }
    Err(Error::Validation(format!("no kink-free loss configuration for {case}")))
}

/// Parameters of the global-aware model through output normalization and the
/// association loss, as the trainer differentiates them.
pub fn check_composite(case: &GradcheckCase) -> Result<CheckResult> {
    let mut rng = ChaCha8Rng::seed_from_u64(case.seed ^ 0xD4);
    let per_camera = 3;
    for _ in 0..MAX_ATTEMPTS {
        let model = AwareModel::Global(random_params(case, &mut rng));
        let input = random_input(case, &mut rng);
        let bank = random_bank(&mut rng, case.k, case.reduced, per_camera)?;
        let sources = random_sources(&mut rng, case.batch, per_camera);
        let cfg = loss_config(&mut rng);
        let (feats, cache) = model.forward(&input, Mode::Train)?;
        if cache.global().is_some_and(|c| c.near_kink(KINK_MARGIN)) {
            continue;
        }
        let Some(frozen) = FrozenLoss::at(&feats, &sources, &bank, cfg)? else {
            continue;
        };
        let loss = association_loss(&compute_distances(&feats, &sources, &bank)?, &cfg);
        let grads = model.backward(&cache, &loss.grads)?;
        let names: Vec<String> = model.trainable_names_and_sizes().into_iter().map(|(n, _)| n).collect();
        let mut result = CheckResult::new();
        for (t, g) in grads.iter().enumerate() {
            for (j, a) in g.iter().enumerate() {
                let numeric = central(|h| {
                    let mut m = model.clone();
                    m.trainable_mut()[t][j] += h;
                    let (f, _) = m.forward(&input, Mode::Train).expect("validated shapes");
                    frozen.eval(&f, &bank)
                });
                result.record(|| format!("{case} composite {}[{j}]", names[t]), *a, numeric);
            }
        }
        return Ok(result);
    }
    Err(Error::Validation(format!("no kink-free composite configuration for {case}")))
}

pub fn check_case(case: &GradcheckCase) -> Result<CheckResult> {
    let mut result = CheckResult::new();
    result.merge(check_aware(case, Mode::Train)?);
    result.merge(check_aware(case, Mode::Infer)?);
    result.merge(check_loss(case)?);
    result.merge(check_composite(case)?);
    Ok(result)
}

/// Runs every case of [`default_cases`] in parallel.
pub fn run(seed: u64) -> Result<GradcheckReport> {
    let cases = default_cases(seed);
    let results = cases.par_iter().map(check_case).collect::<Result<Vec<_>>>()?;
    let mut total = CheckResult::new();
    for r in results {
        total.merge(r);
    }
    Ok(GradcheckReport {
        cases: cases.len(),
        coordinates: total.coordinates,
        max_rel_err: total.max_rel_err,
        worst: total.worst,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rel_err_floor() {
        assert_eq!(rel_err(0.0, 0.0), 0.0);
        assert!((rel_err(1e-12, 0.0) - 1e-7).abs() < 1e-18);
        assert!((rel_err(2.0, 1.0) - 0.5).abs() < 1e-15);
    }

    #[test]
    fn default_grid_has_25_cases() {
        let cases = default_cases(1);
        assert_eq!(cases.len(), 25);
        assert_eq!(cases, default_cases(1));
        assert!(cases.iter().any(|c| c.k == 4 && c.batch == 8));
    }

    #[test]
    fn single_case_passes() {
        let case = default_cases(3)[5];
        let r = check_case(&case).unwrap();
        assert!(r.coordinates > 100);
        assert!(r.max_rel_err < TOLERANCE, "{}: {}", r.max_rel_err, r.worst);
    }

    #[test]
    fn detects_a_wrong_gradient() {
        let mut r = CheckResult::new();
        r.record(|| "x".into(), 1.0, 1.1);
        assert!(r.max_rel_err > TOLERANCE);
    }
}
