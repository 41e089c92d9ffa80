//! Tracklet/camera data model, manifest loading and validation, and the
//! label-free training view.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor_file::{self, Dims};

pub const MANIFEST_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct CameraId(pub u32);

/// A tracklet is identified by its id together with the camera that saw it.
/// Ordering is by camera first, which fixes anchor slot order everywhere.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct TrackletId {
    pub camera: CameraId,
    pub id: u32,
}

impl TrackletId {
    pub fn new(camera: u32, id: u32) -> Self {
        TrackletId {
            camera: CameraId(camera),
            id,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ImageRecord {
    pub image_id: String,
    pub tracklet: TrackletId,
    /// Resolved path of the feature file.
    pub feature_path: PathBuf,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tracklet {
    pub id: TrackletId,
    pub frames: Vec<ImageRecord>,
}

/// A per-image feature tensor, `h` outer, `w` middle, `c` innermost.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    dims: Dims,
    data: Vec<f32>,
}

impl FeatureMap {
    pub fn new(dims: Dims, data: Vec<f32>) -> Result<Self> {
        if dims.h == 0 || dims.w == 0 || dims.c == 0 {
            return Err(Error::ShapeMismatch(format!("empty feature map {dims}")));
        }
        if dims.len() != data.len() {
            return Err(Error::ShapeMismatch(format!(
                "dims {dims} need {} values, got {}",
                dims.len(),
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::Validation("feature map has non-finite values".into()));
        }
        Ok(FeatureMap { dims, data })
    }

    pub fn zeros(dims: Dims) -> Self {
        FeatureMap {
            dims,
            data: vec![0.0; dims.len()],
        }
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn get(&self, y: usize, x: usize, ch: usize) -> f32 {
        self.data[(y * self.dims.w + x) * self.dims.c + ch]
    }

    /// Channel vector at spatial position `(y, x)`.
    pub fn pixel(&self, y: usize, x: usize) -> &[f32] {
        let start = (y * self.dims.w + x) * self.dims.c;
        &self.data[start..start + self.dims.c]
    }

    /// Contiguous block of rows `[start, start + rows)`.
    pub fn rows(&self, start: usize, rows: usize) -> FeatureMap {
        let row_len = self.dims.w * self.dims.c;
        FeatureMap {
            dims: Dims::new(rows, self.dims.w, self.dims.c),
            data: self.data[start * row_len..(start + rows) * row_len].to_vec(),
        }
    }

    /// Stacks maps of equal width and channels vertically.
    pub fn concat_rows(parts: &[FeatureMap]) -> Result<FeatureMap> {
        let first = parts
            .first()
            .ok_or_else(|| Error::ShapeMismatch("nothing to concatenate".into()))?;
        let (w, c) = (first.dims.w, first.dims.c);
        let mut h = 0;
        let mut data = Vec::new();
        for p in parts {
            if p.dims.w != w || p.dims.c != c {
                return Err(Error::ShapeMismatch(format!(
                    "cannot stack {} under {}",
                    p.dims, first.dims
                )));
            }
            h += p.dims.h;
            data.extend_from_slice(&p.data);
        }
        Ok(FeatureMap {
            dims: Dims::new(h, w, c),
            data,
        })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        tensor_file::write_f32(path, self.dims, &self.data)
    }
}

/// Loads the feature map of `record`, requiring the file header to equal `dims`.
pub fn read_feature_map(record: &ImageRecord, dims: Dims) -> Result<FeatureMap> {
    let data = tensor_file::read_f32(&record.feature_path, dims)?;
    FeatureMap::new(dims, data)
}

pub fn write_feature_map(path: &Path, map: &FeatureMap) -> Result<()> {
    map.write(path)
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawFrame {
    image_id: String,
    feature_path: String,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawTracklet {
    id: u32,
    camera: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    person_id: Option<u32>,
    frames: Vec<RawFrame>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawManifest {
    version: u32,
    feature_dims: Dims,
    cameras: Vec<u32>,
    tracklets: Vec<RawTracklet>,
}

/// A validated dataset manifest.
///
/// Ground-truth person ids are kept apart from the tracklets and are only
/// reachable through [`DatasetManifest::person_id`] and
/// [`DatasetManifest::labels`]; training code takes a [`TrainingView`],
/// which carries no labels at all.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetManifest {
    pub version: u32,
    pub feature_dims: Dims,
    pub cameras: Vec<CameraId>,
    pub tracklets: Vec<Tracklet>,
    person_ids: Vec<Option<u32>>,
    root: PathBuf,
}

impl DatasetManifest {
    pub fn new(
        feature_dims: Dims,
        cameras: Vec<CameraId>,
        tracklets: Vec<(Tracklet, Option<u32>)>,
        root: impl Into<PathBuf>,
    ) -> Result<Self> {
        let (tracklets, person_ids) = tracklets.into_iter().unzip();
        let manifest = DatasetManifest {
            version: MANIFEST_VERSION,
            feature_dims,
            cameras,
            tracklets,
            person_ids,
            root: root.into(),
        };
        manifest.validate()?;
        Ok(manifest)
    }

    /// Parses a manifest document. Relative feature paths resolve against `root`.
    pub fn from_json(text: &str, root: &Path, source: &Path) -> Result<Self> {
        let raw: RawManifest = serde_json::from_str(text).map_err(|e| Error::Parse {
            path: source.to_path_buf(),
            message: e.to_string(),
        })?;
        let mut tracklets = Vec::with_capacity(raw.tracklets.len());
        let mut person_ids = Vec::with_capacity(raw.tracklets.len());
        for t in raw.tracklets {
            let id = TrackletId::new(t.camera, t.id);
            let frames = t
                .frames
                .into_iter()
                .map(|f| ImageRecord {
                    image_id: f.image_id,
                    tracklet: id,
                    feature_path: root.join(f.feature_path),
                })
                .collect();
            tracklets.push(Tracklet { id, frames });
            person_ids.push(t.person_id);
        }
        let manifest = DatasetManifest {
            version: raw.version,
            feature_dims: raw.feature_dims,
            cameras: raw.cameras.into_iter().map(CameraId).collect(),
            tracklets,
            person_ids,
            root: root.to_path_buf(),
        };
        manifest.validate()?;
        Ok(manifest)
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    /// Checks every structural invariant. Does not touch the filesystem.
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Validation(m));
        if self.version != MANIFEST_VERSION {
            return bad(format!("unsupported manifest version {}", self.version));
        }
        let d = self.feature_dims;
        if d.h == 0 || d.w == 0 || d.c == 0 {
            return bad(format!("feature dims must be positive, got {d}"));
        }
        let declared: BTreeSet<u32> = self.cameras.iter().map(|c| c.0).collect();
        if declared.len() != self.cameras.len() {
            return bad("duplicate camera id".into());
        }
        if let Some(&max) = declared.iter().next_back() {
            if max as usize != declared.len() - 1 {
                return bad(format!(
                    "camera ids must be dense 0..{}, got {:?}",
                    declared.len(),
                    declared
                ));
            }
        }
        if self.person_ids.len() != self.tracklets.len() {
            return bad("label table does not match tracklets".into());
        }
        let mut seen_tracklets = HashSet::new();
        let mut seen_images = HashSet::new();
        for t in &self.tracklets {
            if !declared.contains(&t.id.camera.0) {
                return bad(format!(
                    "tracklet {} references undeclared camera {}",
                    t.id.id, t.id.camera.0
                ));
            }
            if !seen_tracklets.insert(t.id) {
                return bad(format!(
                    "duplicate tracklet {} in camera {}",
                    t.id.id, t.id.camera.0
                ));
            }
            if t.frames.is_empty() {
                return bad(format!(
                    "tracklet {} in camera {} has no frames",
                    t.id.id, t.id.camera.0
                ));
            }
            for f in &t.frames {
                if f.tracklet != t.id {
                    return bad(format!("image {} attached to the wrong tracklet", f.image_id));
                }
                if !seen_images.insert(f.image_id.as_str()) {
                    return bad(format!("duplicate image id {}", f.image_id));
                }
            }
        }
        Ok(())
    }

    /// Checks that every referenced feature file exists.
    pub fn check_files(&self) -> Result<()> {
        for f in self.tracklets.iter().flat_map(|t| &t.frames) {
            if !f.feature_path.is_file() {
                return Err(Error::MissingFile(f.feature_path.clone()));
            }
        }
        Ok(())
    }

    pub fn num_images(&self) -> usize {
        self.tracklets.iter().map(|t| t.frames.len()).sum()
    }

    pub fn person_id(&self, tracklet: TrackletId) -> Option<u32> {
        self.tracklets
            .iter()
            .position(|t| t.id == tracklet)
            .and_then(|i| self.person_ids[i])
    }

    /// Ground truth for every tracklet, in manifest order.
    pub fn labels(&self) -> Result<Vec<(TrackletId, u32)>> {
        self.tracklets
            .iter()
            .zip(&self.person_ids)
            .map(|(t, p)| {
                p.map(|p| (t.id, p)).ok_or_else(|| {
                    Error::MissingGroundTruth(format!(
                        "tracklet {} in camera {} has no person_id",
                        t.id.id, t.id.camera.0
                    ))
                })
            })
            .collect()
    }

    pub fn has_labels(&self) -> bool {
        self.person_ids.iter().all(Option::is_some)
    }

    pub fn training_view(&self) -> TrainingView {
        self.training_view_where(|_| true)
    }

    /// Label-free view restricted to the tracklets accepted by `keep`.
    pub fn training_view_where(&self, keep: impl Fn(TrackletId) -> bool) -> TrainingView {
        let mut tracklets: Vec<Tracklet> = self
            .tracklets
            .iter()
            .filter(|t| keep(t.id))
            .cloned()
            .collect();
        tracklets.sort_by_key(|t| t.id);
        TrainingView {
            feature_dims: self.feature_dims,
            tracklets,
        }
    }

    pub fn to_json(&self) -> String {
        let raw = RawManifest {
            version: self.version,
            feature_dims: self.feature_dims,
            cameras: self.cameras.iter().map(|c| c.0).collect(),
            tracklets: self
                .tracklets
                .iter()
                .zip(&self.person_ids)
                .map(|(t, p)| RawTracklet {
                    id: t.id.id,
                    camera: t.id.camera.0,
                    person_id: *p,
                    frames: t
                        .frames
                        .iter()
                        .map(|f| RawFrame {
                            image_id: f.image_id.clone(),
                            feature_path: f
                                .feature_path
                                .strip_prefix(&self.root)
                                .unwrap_or(&f.feature_path)
                                .to_string_lossy()
                                .into_owned(),
                        })
                        .collect(),
                })
                .collect(),
        };
        serde_json::to_string_pretty(&raw).expect("manifest serializes")
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_json()).map_err(|e| Error::io(path, e))
    }
}

/// Loads and validates a manifest, including the existence of every feature
/// file. Relative feature paths resolve against the manifest's directory.
pub fn load_manifest(path: &Path) -> Result<DatasetManifest> {
    let text = match fs::read_to_string(path) {
        Ok(t) => t,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => {
            return Err(Error::MissingFile(path.to_path_buf()))
        }
        Err(e) => return Err(Error::io(path, e)),
    };
    let root = path.parent().unwrap_or(Path::new("."));
    let manifest = DatasetManifest::from_json(&text, root, path)?;
    manifest.check_files()?;
    Ok(manifest)
}

/// Accepts either a manifest file or a directory containing `manifest.json`.
pub fn load_dataset(path: &Path) -> Result<DatasetManifest> {
    if path.is_dir() {
        load_manifest(&path.join("manifest.json"))
    } else {
        load_manifest(path)
    }
}

/// What the trainer sees: tracklets ordered by `(camera, tracklet)`, no labels.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingView {
    pub feature_dims: Dims,
    pub tracklets: Vec<Tracklet>,
}

impl TrainingView {
    pub fn num_images(&self) -> usize {
        self.tracklets.iter().map(|t| t.frames.len()).sum()
    }

    pub fn cameras(&self) -> BTreeSet<CameraId> {
        self.tracklets.iter().map(|t| t.id.camera).collect()
    }

    /// All images in slot order, each paired with the index of its tracklet.
    pub fn images(&self) -> Vec<(usize, &ImageRecord)> {
        self.tracklets
            .iter()
            .enumerate()
            .flat_map(|(slot, t)| t.frames.iter().map(move |f| (slot, f)))
            .collect()
    }

    pub fn images_per_camera(&self) -> BTreeMap<CameraId, usize> {
        let mut out = BTreeMap::new();
        for t in &self.tracklets {
            *out.entry(t.id.camera).or_default() += t.frames.len();
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn doc(cameras: &str, dims: (usize, usize, usize)) -> String {
        let mut tracklets = Vec::new();
        for (i, cam) in [0, 0, 1, 1].iter().enumerate() {
            tracklets.push(format!(
                r#"{{"id": {i}, "camera": {cam}, "person_id": {p}, "frames": [{{"image_id": "img{i}", "feature_path": "f{i}.upmf"}}]}}"#,
                p = i % 2
            ));
        }
        format!(
            r#"{{"version": 1, "feature_dims": {{"h": {}, "w": {}, "c": {}}}, "cameras": {cameras}, "tracklets": [{}]}}"#,
            dims.0,
            dims.1,
            dims.2,
            tracklets.join(",")
        )
    }

    fn write_dataset(dir: &Path, text: &str, dims: Dims) -> PathBuf {
        for i in 0..4 {
            FeatureMap::zeros(dims)
                .write(&dir.join(format!("f{i}.upmf")))
                .unwrap();
        }
        let path = dir.join("manifest.json");
        fs::write(&path, text).unwrap();
        path
    }

    #[test]
    fn loads_hand_written_manifest() {
        let dir = tempfile::tempdir().unwrap();
        let dims = Dims::new(8, 4, 16);
        let path = write_dataset(dir.path(), &doc("[0, 1]", (8, 4, 16)), dims);
        let m = load_manifest(&path).unwrap();
        assert_eq!(m.tracklets.len(), 4);
        assert_eq!(m.cameras, vec![CameraId(0), CameraId(1)]);
        assert_eq!(m.feature_dims, dims);
        let first = &m.tracklets[0].frames[0];
        let map = read_feature_map(first, dims).unwrap();
        assert!(map.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn large_backbone_dims_accepted() {
        let dir = tempfile::tempdir().unwrap();
        let dims = Dims::new(8, 4, 2048);
        let path = write_dataset(dir.path(), &doc("[0, 1]", (8, 4, 2048)), dims);
        let m = load_manifest(&path).unwrap();
        assert_eq!(m.feature_dims, dims);
        assert_eq!(read_feature_map(&m.tracklets[3].frames[0], dims).unwrap().data().len(), 65536);
    }

    #[test]
    fn dangling_camera_rejected() {
        let text = doc("[0, 1]", (8, 4, 16)).replace(r#""camera": 1, "person_id": 1"#, r#""camera": 3, "person_id": 1"#);
        let err = DatasetManifest::from_json(&text, Path::new("."), Path::new("m.json")).unwrap_err();
        assert!(matches!(err, Error::Validation(_)), "{err}");
    }

    #[test]
    fn missing_feature_file_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("manifest.json");
        fs::write(&path, doc("[0, 1]", (8, 4, 16))).unwrap();
        assert!(matches!(load_manifest(&path), Err(Error::MissingFile(_))));
    }

    #[test]
    fn unknown_keys_are_parse_errors() {
        let text = doc("[0, 1]", (8, 4, 16)).replacen("\"version\"", "\"extra\": 1, \"version\"", 1);
        assert!(matches!(
            DatasetManifest::from_json(&text, Path::new("."), Path::new("m.json")),
            Err(Error::Parse { .. })
        ));
    }

    #[test]
    fn manifest_dims_mismatch_on_read() {
        let dir = tempfile::tempdir().unwrap();
        let path = write_dataset(dir.path(), &doc("[0, 1]", (8, 4, 32)), Dims::new(8, 4, 16));
        let m = load_manifest(&path).unwrap();
        let err = read_feature_map(&m.tracklets[0].frames[0], m.feature_dims).unwrap_err();
        assert!(matches!(err, Error::DimMismatch { .. }));
    }

    #[test]
    fn training_view_drops_labels_and_sorts() {
        let text = doc("[0, 1]", (8, 4, 16));
        let m = DatasetManifest::from_json(&text, Path::new("."), Path::new("m.json")).unwrap();
        assert!(m.has_labels());
        let view = m.training_view_where(|t| t.camera == CameraId(1) || t.id == 0);
        let ids: Vec<_> = view.tracklets.iter().map(|t| t.id).collect();
        assert_eq!(ids, vec![TrackletId::new(0, 0), TrackletId::new(1, 2), TrackletId::new(1, 3)]);
        assert_eq!(view.num_images(), 3);
    }

    #[test]
    fn json_round_trip() {
        let text = doc("[0, 1]", (8, 4, 16));
        let root = Path::new("/data/set");
        let m = DatasetManifest::from_json(&text, root, Path::new("m.json")).unwrap();
        let again = DatasetManifest::from_json(&m.to_json(), root, Path::new("m.json")).unwrap();
        assert_eq!(m, again);
    }

    #[derive(Debug, Clone)]
    enum Mutation {
        DanglingCamera(usize, u32),
        DuplicateImage(usize, usize),
        DuplicateTracklet(usize, usize),
        EmptyTracklet(usize),
        ZeroDim(usize),
        SparseCameras,
    }

    fn mutation() -> impl Strategy<Value = Mutation> {
        prop_oneof![
            (0usize..4, 2u32..50).prop_map(|(t, c)| Mutation::DanglingCamera(t, c)),
            (0usize..4, 0usize..4).prop_map(|(a, b)| Mutation::DuplicateImage(a, b)),
            (0usize..4, 0usize..4).prop_map(|(a, b)| Mutation::DuplicateTracklet(a, b)),
            (0usize..4).prop_map(Mutation::EmptyTracklet),
            (0usize..3).prop_map(Mutation::ZeroDim),
            Just(Mutation::SparseCameras),
        ]
    }

    proptest! {
        #[test]
        fn mutated_manifests_are_rejected(mutation in mutation()) {
            let text = doc("[0, 1]", (8, 4, 16));
            let mut m = DatasetManifest::from_json(&text, Path::new("."), Path::new("m.json")).unwrap();
            match mutation {
                Mutation::DanglingCamera(t, c) => {
                    let id = TrackletId::new(c, 1000);
                    m.tracklets[t].id = id;
                    for f in &mut m.tracklets[t].frames {
                        f.tracklet = id;
                    }
                }
                Mutation::DuplicateImage(a, b) => {
                    let b = if a == b { (b + 1) % 4 } else { b };
                    let name = m.tracklets[a].frames[0].image_id.clone();
                    m.tracklets[b].frames[0].image_id = name;
                }
                Mutation::DuplicateTracklet(a, b) => {
                    let b = if a == b { (b + 1) % 4 } else { b };
                    let id = m.tracklets[a].id;
                    m.tracklets[b].id = id;
                    for f in &mut m.tracklets[b].frames {
                        f.tracklet = id;
                    }
                }
                Mutation::EmptyTracklet(t) => m.tracklets[t].frames.clear(),
                Mutation::ZeroDim(i) => match i {
                    0 => m.feature_dims.h = 0,
                    1 => m.feature_dims.w = 0,
                    _ => m.feature_dims.c = 0,
                },
                Mutation::SparseCameras => m.cameras = vec![CameraId(0), CameraId(2)],
            }
            prop_assert!(matches!(m.validate(), Err(Error::Validation(_))));
        }
    }
}
