//! Checkpoint directories: `header.json` plus one UPMF tensor file (f64
//! payload) per named tensor under `tensors/`.

use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::association::AnchorBank;
use crate::aware::AwareKind;
use crate::dataset::TrackletId;
use crate::error::{Error, Result};
use crate::model::AwareModel;
use crate::optim::OptimizerState;
use crate::tensor_file::{self, Dims};
use crate::trainer::{build_model, TrainConfig};

pub const FORMAT: &str = "upmnet-checkpoint";
pub const FORMAT_VERSION: u32 = 1;

/// Exact position of the training RNG.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: String,
    pub stream: u64,
    /// Decimal, since JSON numbers cannot carry a `u128`.
    pub word_pos: String,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        RngState {
            seed: rng.get_seed().iter().map(|b| format!("{b:02x}")).collect(),
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos().to_string(),
        }
    }

    pub fn restore(&self) -> ChaCha8Rng {
        self.try_restore().expect("validated on load")
    }

    fn try_restore(&self) -> Result<ChaCha8Rng> {
        let bad = || Error::Validation("malformed rng state in checkpoint".into());
        if self.seed.len() != 64 {
            return Err(bad());
        }
        let mut seed = [0u8; 32];
        for (i, b) in seed.iter_mut().enumerate() {
            *b = u8::from_str_radix(&self.seed[2 * i..2 * i + 2], 16).map_err(|_| bad())?;
        }
        let mut rng = ChaCha8Rng::from_seed(seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(self.word_pos.parse().map_err(|_| bad())?);
        Ok(rng)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: TrainConfig,
    pub iteration: u64,
    pub model: AwareModel,
    pub bank: AnchorBank,
    pub optimizer: OptimizerState,
    pub rng: RngState,
}

#[derive(Debug, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    file: String,
    shape: Vec<usize>,
}

#[derive(Debug, Serialize, Deserialize)]
struct AnchorHeader {
    slots: Vec<[u32; 2]>,
    k: usize,
    dim: usize,
    eta: f64,
    t: u64,
    renormalize: bool,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    format: String,
    version: u32,
    config: TrainConfig,
    iteration: u64,
    kind: AwareKind,
    input_dim: usize,
    output_dim: usize,
    anchors: AnchorHeader,
    rng: RngState,
    tensors: Vec<TensorEntry>,
}

fn dims_of(shape: &[usize]) -> Result<Dims> {
    match *shape {
        [n] => Ok(Dims::new(n, 1, 1)),
        [r, c] => Ok(Dims::new(r, c, 1)),
        [a, b, c] => Ok(Dims::new(a, b, c)),
        _ => Err(Error::ShapeMismatch(format!("cannot store a tensor of shape {shape:?}"))),
    }
}

impl Checkpoint {
    fn tensors(&self) -> Vec<(String, Vec<usize>, &[f64])> {
        let mut out = self.model.named_tensors();
        let names = self.model.trainable_names_and_sizes();
        for ((name, len), buf) in names.iter().zip(&self.optimizer.buffers) {
            debug_assert_eq!(*len, buf.len());
            out.push((format!("optim.{name}"), vec![buf.len()], buf.as_slice()));
        }
        let shape = vec![self.bank.num_slots(), self.bank.k(), self.bank.dim()];
        out.push(("anchors.intra".into(), shape.clone(), self.bank.intra_data()));
        out.push(("anchors.cross".into(), shape, self.bank.cross_data()));
        out
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir.join("tensors")).map_err(|e| Error::io(dir, e))?;
        let mut entries = Vec::new();
        for (name, shape, data) in self.tensors() {
            let file = format!("tensors/{name}.upmf");
            tensor_file::write_f64(&dir.join(&file), dims_of(&shape)?, data)?;
            entries.push(TensorEntry { name, file, shape });
        }
        let header = Header {
            format: FORMAT.into(),
            version: FORMAT_VERSION,
            config: self.config.clone(),
            iteration: self.iteration,
            kind: self.model.kind(),
            input_dim: self.model.input_dim(),
            output_dim: self.model.output_dim(),
            anchors: AnchorHeader {
                slots: self.bank.slots().iter().map(|s| [s.camera.0, s.id]).collect(),
                k: self.bank.k(),
                dim: self.bank.dim(),
                eta: self.bank.eta,
                t: self.bank.t,
                renormalize: self.bank.renormalize,
            },
            rng: self.rng.clone(),
            tensors: entries,
        };
        let text = serde_json::to_string_pretty(&header).expect("header serializes");
        let path = dir.join("header.json");
        fs::write(&path, text + "\n").map_err(|e| Error::io(&path, e))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join("header.json");
        let text = fs::read_to_string(&path).map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => Error::MissingFile(path.clone()),
            _ => Error::io(&path, e),
        })?;
        let header: Header = serde_json::from_str(&text).map_err(|e| Error::Parse {
            path: path.clone(),
            message: e.to_string(),
        })?;
        if header.format != FORMAT || header.version != FORMAT_VERSION {
            return Err(Error::Validation(format!(
                "{}: not a version {FORMAT_VERSION} checkpoint",
                path.display()
            )));
        }
        header.config.validate()?;
        if header.config.aware_kind != header.kind {
            return Err(Error::Validation("checkpoint kind disagrees with its config".into()));
        }
        header.rng.try_restore()?;

        let read = |name: &str| -> Result<Vec<f64>> {
            let entry = header
                .tensors
                .iter()
                .find(|e| e.name == name)
                .ok_or_else(|| Error::Validation(format!("checkpoint lacks tensor {name}")))?;
            tensor_file::read_f64(&dir.join(&entry.file), dims_of(&entry.shape)?)
        };

        let mut model = build_model(&header.config, header.input_dim, 0);
        if model.output_dim() != header.output_dim {
            return Err(Error::Validation("checkpoint output dim disagrees with its config".into()));
        }
        let names: Vec<String> = model.named_tensors().into_iter().map(|(n, _, _)| n).collect();
        for (name, slot) in names.iter().zip(model.tensors_mut()) {
            let data = read(name)?;
            if data.len() != slot.len() {
                return Err(Error::ShapeMismatch(format!("tensor {name} has {} values", data.len())));
            }
            slot.copy_from_slice(&data);
        }
        let buffers = model
            .trainable_names_and_sizes()
            .into_iter()
            .map(|(name, len)| {
                let data = read(&format!("optim.{name}"))?;
                if data.len() != len {
                    return Err(Error::ShapeMismatch(format!("optimizer state for {name} has {} values", data.len())));
                }
                Ok(data)
            })
            .collect::<Result<Vec<_>>>()?;

        let a = &header.anchors;
        let slots = a.slots.iter().map(|s| TrackletId::new(s[0], s[1])).collect();
        let mut bank = AnchorBank::zeros(slots, a.k, a.dim, a.eta)?;
        bank.t = a.t;
        bank.renormalize = a.renormalize;
        bank.restore(read("anchors.intra")?, read("anchors.cross")?)?;

        Ok(Checkpoint {
            rng: header.rng,
            config: header.config,
            iteration: header.iteration,
            model,
            bank,
            optimizer: OptimizerState { buffers },
        })
    }
}
