//! A trained (or trainable) aware network: the local-aware or global-aware
//! module plus the L2 normalization that every downstream consumer sees.

use ndarray::Array2;

use crate::aware::{local_aware_forward, AwareInput, AwareKind, GlobalAwareCache, GlobalAwareParams, LocalAdapter, Mode};
use crate::error::Result;
use crate::features::{normalize_backward, normalize_vec, PartFeatures};

#[derive(Debug, Clone, PartialEq)]
pub enum AwareModel {
    Local { c: usize, k: usize, adapter: Option<LocalAdapter> },
    Global(GlobalAwareParams),
}

#[derive(Debug, Clone)]
pub struct ModelCache {
    input: AwareInput,
    raw: Vec<Array2<f64>>,
    global: Option<GlobalAwareCache>,
}

impl ModelCache {
    pub fn global(&self) -> Option<&GlobalAwareCache> {
        self.global.as_ref()
    }
}

/// Gradients in the order of [`AwareModel::trainable_mut`].
pub type ModelGrads = Vec<Vec<f64>>;

fn normalize_rows(m: &Array2<f64>) -> Array2<f64> {
    let mut out = m.clone();
    for mut row in out.rows_mut() {
        let n = normalize_vec(row.as_slice().unwrap());
        row.as_slice_mut().unwrap().copy_from_slice(&n);
    }
    out
}

impl AwareModel {
    pub fn kind(&self) -> AwareKind {
        match self {
            AwareModel::Local { .. } => AwareKind::Local,
            AwareModel::Global(_) => AwareKind::Global,
        }
    }

    pub fn k(&self) -> usize {
        match self {
            AwareModel::Local { k, .. } => *k,
            AwareModel::Global(p) => p.k(),
        }
    }

    pub fn input_dim(&self) -> usize {
        match self {
            AwareModel::Local { c, .. } => *c,
            AwareModel::Global(p) => p.input_dim(),
        }
    }

    pub fn output_dim(&self) -> usize {
        match self {
            AwareModel::Local { c, .. } => *c,
            AwareModel::Global(p) => p.output_dim(),
        }
    }

    pub fn is_trainable(&self) -> bool {
        matches!(self, AwareModel::Global(_) | AwareModel::Local { adapter: Some(_), .. })
    }

    /// Aware features, each row L2-normalized. One `B x d` matrix per part.
    pub fn forward(&self, input: &AwareInput, mode: Mode) -> Result<(Vec<Array2<f64>>, ModelCache)> {
        let (raw, global) = match self {
            AwareModel::Local { adapter: None, .. } => (local_aware_forward(input), None),
            AwareModel::Local { adapter: Some(a), .. } => (a.forward(input)?, None),
            AwareModel::Global(p) => {
                let (out, cache) = p.forward(input, mode)?;
                (out, Some(cache))
            }
        };
        let normalized = raw.iter().map(normalize_rows).collect();
        Ok((
            normalized,
            ModelCache {
                input: input.clone(),
                raw,
                global,
            },
        ))
    }

    /// Gradients of the trainable parameters given the gradient with respect
    /// to the normalized outputs. Empty for the parameter-free local module.
    pub fn backward(&self, cache: &ModelCache, upstream: &[Array2<f64>]) -> Result<ModelGrads> {
        let raw_grads: Vec<Array2<f64>> = cache
            .raw
            .iter()
            .zip(upstream)
            .map(|(raw, up)| {
                let mut g = Array2::zeros(raw.dim());
                for ((x, u), mut out) in raw.rows().into_iter().zip(up.rows()).zip(g.rows_mut()) {
                    let v = normalize_backward(x.as_slice().unwrap(), u.as_slice().unwrap());
                    out.as_slice_mut().unwrap().copy_from_slice(&v);
                }
                g
            })
            .collect();
        Ok(match self {
            AwareModel::Local { adapter: None, .. } => Vec::new(),
            AwareModel::Local { adapter: Some(a), .. } => {
                let (mut g, _) = a.backward(&cache.input, &raw_grads);
                g.tensors_mut().into_iter().map(|t| t.to_vec()).collect()
            }
            AwareModel::Global(p) => {
                let (g, _) = p.backward(cache.global.as_ref(), &raw_grads)?;
                g.trainable().into_iter().map(<[f64]>::to_vec).collect()
            }
        })
    }

    pub fn update_running_stats(&mut self, cache: &ModelCache) {
        if let (AwareModel::Global(p), Some(c)) = (self, cache.global.as_ref()) {
            p.update_running_stats(c);
        }
    }

    pub fn trainable_mut(&mut self) -> Vec<&mut [f64]> {
        match self {
            AwareModel::Local { adapter: None, .. } => Vec::new(),
            AwareModel::Local { adapter: Some(a), .. } => a.tensors_mut(),
            AwareModel::Global(p) => p.trainable_mut(),
        }
    }

    pub fn trainable_sizes(&self) -> Vec<usize> {
        self.trainable_names_and_sizes().into_iter().map(|(_, n)| n).collect()
    }

    pub fn trainable_names_and_sizes(&self) -> Vec<(String, usize)> {
        match self {
            AwareModel::Local { adapter: None, .. } => Vec::new(),
            AwareModel::Local { adapter: Some(a), .. } => {
                a.named_tensors().into_iter().map(|(n, _, d)| (n, d.len())).collect()
            }
            AwareModel::Global(p) => p
                .named_tensors()
                .into_iter()
                .filter(|(n, _, _)| !n.contains("running_"))
                .map(|(n, _, d)| (n, d.len()))
                .collect(),
        }
    }

    /// Every stored tensor (trainable or not) with its name and shape.
    pub fn named_tensors(&self) -> Vec<(String, Vec<usize>, &[f64])> {
        match self {
            AwareModel::Local { adapter: None, .. } => Vec::new(),
            AwareModel::Local { adapter: Some(a), .. } => a.named_tensors(),
            AwareModel::Global(p) => p.named_tensors(),
        }
    }

    /// Mutable views in the order of [`Self::named_tensors`].
    pub fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        match self {
            AwareModel::Local { adapter: None, .. } => Vec::new(),
            AwareModel::Local { adapter: Some(a), .. } => a.tensors_mut(),
            AwareModel::Global(p) => p.tensors_mut(),
        }
    }

    /// Normalized aware features of many images in inference mode,
    /// `out[image][part]`.
    pub fn infer(&self, images: &[&PartFeatures]) -> Result<Vec<Vec<Vec<f64>>>> {
        let mut out = Vec::with_capacity(images.len());
        for chunk in images.chunks(256) {
            let input = AwareInput::from_features(chunk)?;
            let (feats, _) = self.forward(&input, Mode::Infer)?;
            for n in 0..chunk.len() {
                out.push(feats.iter().map(|f| f.row(n).to_vec()).collect());
            }
        }
        Ok(out)
    }
}
