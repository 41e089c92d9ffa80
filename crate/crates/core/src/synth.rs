//! Synthetic datasets with planted identities.
//!
//! Every frame is `camera_scale * (identity_base + band_signature[row]) +
//! camera_offset + noise`, so each horizontal band carries its own identity
//! evidence and each camera applies its own channel-wise affine distortion.
//! Occluded frames have one horizontal band replaced by clutter shared by
//! all identities.

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::dataset::{CameraId, DatasetManifest, FeatureMap, ImageRecord, Tracklet, TrackletId};
use crate::error::{Error, Result};
use crate::tensor_file::Dims;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthSpec {
    pub num_identities: usize,
    pub num_cameras: usize,
    pub frames_per_tracklet: usize,
    pub dims: Dims,
    /// Scale of the per-band identity signature.
    pub signature_strength: f64,
    /// Scale of the per-camera channel offset and gain perturbation.
    pub camera_shift: f64,
    #[serde(default = "default_noise")]
    pub noise: f64,
    /// Scale of the identity pattern shared by all bands.
    #[serde(default = "default_base_strength")]
    pub base_strength: f64,
    pub occlusion_probability: f64,
    pub seed: u64,
}

fn default_noise() -> f64 {
    0.1
}

fn default_base_strength() -> f64 {
    1.0
}

impl SynthSpec {
    pub fn new(num_identities: usize, num_cameras: usize, frames_per_tracklet: usize, dims: Dims, seed: u64) -> Self {
        SynthSpec {
            num_identities,
            num_cameras,
            frames_per_tracklet,
            dims,
            signature_strength: 1.0,
            camera_shift: 0.3,
            noise: default_noise(),
            base_strength: default_base_strength(),
            occlusion_probability: 0.0,
            seed,
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => Error::MissingFile(path.to_path_buf()),
            _ => Error::io(path, e),
        })?;
        let spec: SynthSpec = serde_json::from_str(&text).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            message: e.to_string(),
        })?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidSpec(m.to_string()));
        if self.num_identities == 0 || self.num_cameras == 0 || self.frames_per_tracklet == 0 {
            return bad("identity, camera and frame counts must be at least 1");
        }
        if self.dims.h == 0 || self.dims.w == 0 || self.dims.c == 0 {
            return bad("dims must be positive");
        }
        for (name, v) in [
            ("signature_strength", self.signature_strength),
            ("camera_shift", self.camera_shift),
            ("noise", self.noise),
            ("base_strength", self.base_strength),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::InvalidSpec(format!("{name} must be finite and >= 0")));
            }
        }
        if !(0.0..=1.0).contains(&self.occlusion_probability) {
            return bad("occlusion_probability must lie in [0, 1]");
        }
        Ok(())
    }

    /// Rows covered by one occlusion band.
    pub fn occlusion_rows(&self) -> usize {
        (self.dims.h / 4).max(1)
    }
}

fn gaussian(rng: &mut ChaCha8Rng, n: usize, scale: f64) -> Vec<f64> {
    (0..n)
        .map(|_| scale * rng.sample::<f64, _>(StandardNormal))
        .collect()
}

/// One generated frame, before it is written anywhere.
#[derive(Debug, Clone)]
pub struct SynthFrame {
    pub tracklet: TrackletId,
    pub person_id: u32,
    pub frame: usize,
    pub map: FeatureMap,
}

/// Generates every frame in memory, in `(camera, tracklet, frame)` order.
pub fn synthesize(spec: &SynthSpec) -> Result<Vec<SynthFrame>> {
    spec.validate()?;
    let Dims { h, w, c } = spec.dims;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);

    let clutter = gaussian(&mut rng, h * w * c, spec.signature_strength.max(spec.base_strength));
    let identities: Vec<(Vec<f64>, Vec<f64>)> = (0..spec.num_identities)
        .map(|_| {
            let base = gaussian(&mut rng, c, spec.base_strength);
            let bands = gaussian(&mut rng, h * c, spec.signature_strength);
            (base, bands)
        })
        .collect();
    let cameras: Vec<(Vec<f64>, Vec<f64>)> = (0..spec.num_cameras)
        .map(|_| {
            let gain = gaussian(&mut rng, c, 0.25 * spec.camera_shift)
                .into_iter()
                .map(|g| 1.0 + g)
                .collect();
            let offset = gaussian(&mut rng, c, spec.camera_shift);
            (gain, offset)
        })
        .collect();
    // tracklet ids are shuffled per camera so they carry no identity information
    let tracklet_ids: Vec<Vec<u32>> = (0..spec.num_cameras)
        .map(|_| {
            let mut ids: Vec<u32> = (0..spec.num_identities as u32).collect();
            ids.shuffle(&mut rng);
            ids
        })
        .collect();

    let band_rows = spec.occlusion_rows();
    let mut frames = Vec::with_capacity(spec.num_cameras * spec.num_identities * spec.frames_per_tracklet);
    for (cam, (gain, offset)) in cameras.iter().enumerate() {
        let mut order: Vec<(u32, usize)> = tracklet_ids[cam]
            .iter()
            .enumerate()
            .map(|(person, &tid)| (tid, person))
            .collect();
        order.sort_unstable();
        for (tid, person) in order {
            let (base, bands) = &identities[person];
            for frame in 0..spec.frames_per_tracklet {
                let occluded = rng.random::<f64>() < spec.occlusion_probability;
                let band_start = rng.random_range(0..=h - band_rows);
                let noise = gaussian(&mut rng, h * w * c, spec.noise);
                let mut data = Vec::with_capacity(h * w * c);
                for y in 0..h {
                    let in_band = occluded && (band_start..band_start + band_rows).contains(&y);
                    for x in 0..w {
                        for ch in 0..c {
                            let i = (y * w + x) * c + ch;
                            let v = if in_band {
                                clutter[i]
                            } else {
                                gain[ch] * (base[ch] + bands[y * c + ch]) + offset[ch]
                            };
                            data.push((v + noise[i]) as f32);
                        }
                    }
                }
                frames.push(SynthFrame {
                    tracklet: TrackletId::new(cam as u32, tid),
                    person_id: person as u32,
                    frame,
                    map: FeatureMap::new(spec.dims, data)?,
                });
            }
        }
    }
    Ok(frames)
}

/// Writes a synthetic dataset (feature files plus `manifest.json`) to `out`.
pub fn generate_synthetic(spec: &SynthSpec, out: &Path) -> Result<DatasetManifest> {
    let frames = synthesize(spec)?;
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let mut tracklets: Vec<(Tracklet, Option<u32>)> = Vec::new();
    for f in frames {
        let cam = f.tracklet.camera.0;
        let tid = f.tracklet.id;
        let image_id = format!("c{cam}_t{tid:04}_f{:04}", f.frame);
        let path = out.join(format!("features/c{cam}/t{tid:04}_f{:04}.upmf", f.frame));
        f.map.write(&path)?;
        let record = ImageRecord {
            image_id,
            tracklet: f.tracklet,
            feature_path: path,
        };
        match tracklets.last_mut() {
            Some((t, _)) if t.id == f.tracklet => t.frames.push(record),
            _ => tracklets.push((
                Tracklet {
                    id: f.tracklet,
                    frames: vec![record],
                },
                Some(f.person_id),
            )),
        }
    }
    let cameras = (0..spec.num_cameras as u32).map(CameraId).collect();
    let manifest = DatasetManifest::new(spec.dims, cameras, tracklets, out)?;
    manifest.save(&out.join("manifest.json"))?;
    Ok(manifest)
}
