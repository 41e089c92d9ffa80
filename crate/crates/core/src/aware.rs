//! Local-aware and global-aware modules.
//!
//! The local-aware module passes the stripe features through unchanged. The
//! global-aware module, one independent copy per part, projects the stripe
//! feature and the global feature to `c'` channels, concatenates them as
//! `(x̂_i, x̂_0)`, runs a linear layer, batch normalization and ReLU to get a
//! residual `r_i`, and outputs `r_i + x̂_0`. On `1x1` features a `1x1`
//! convolution is exactly a linear map, which is what [`Linear`] is.
//!
//! All tensors are row-per-sample: a batch of `B` features of dimension `d`
//! is a `B x d` matrix.

use ndarray::{concatenate, s, Array1, Array2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::PartFeatures;

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AwareKind {
    Local,
    Global,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Infer,
}

/// A batch of compact features: the global feature `x_0` and the `k` stripe
/// features, each `B x c`.
#[derive(Debug, Clone, PartialEq)]
pub struct AwareInput {
    pub global: Array2<f64>,
    pub parts: Vec<Array2<f64>>,
}

impl AwareInput {
    pub fn from_features(items: &[&PartFeatures]) -> Result<Self> {
        let first = items
            .first()
            .ok_or_else(|| Error::ShapeMismatch("empty batch".into()))?;
        let c = first.global.dim();
        let k = first.parts.len();
        let b = items.len();
        let mut global = Array2::zeros((b, c));
        let mut parts = vec![Array2::zeros((b, c)); k];
        for (row, item) in items.iter().enumerate() {
            if item.global.dim() != c || item.parts.len() != k || item.parts.iter().any(|p| p.dim() != c) {
                return Err(Error::ShapeMismatch("inconsistent feature shapes in batch".into()));
            }
            global.row_mut(row).assign(&ndarray::aview1(&item.global.data));
            for (i, p) in item.parts.iter().enumerate() {
                parts[i].row_mut(row).assign(&ndarray::aview1(&p.data));
            }
        }
        Ok(AwareInput { global, parts })
    }

    pub fn batch(&self) -> usize {
        self.global.nrows()
    }

    pub fn k(&self) -> usize {
        self.parts.len()
    }

    pub fn dim(&self) -> usize {
        self.global.ncols()
    }
}

/// Local-aware features are the compact part features themselves: `x_i^l = x_i`.
pub fn local_aware_forward(input: &AwareInput) -> Vec<Array2<f64>> {
    input.parts.clone()
}

/// Fully connected layer `y = x Wᵀ + b` with `W` stored `out x in`.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
}

impl Linear {
    pub fn zeros(input: usize, output: usize) -> Self {
        Linear {
            weight: Array2::zeros((output, input)),
            bias: Array1::zeros(output),
        }
    }

    pub fn identity(dim: usize) -> Self {
        Linear {
            weight: Array2::eye(dim),
            bias: Array1::zeros(dim),
        }
    }

    /// Glorot-uniform weights, zero bias.
    pub fn glorot(input: usize, output: usize, rng: &mut impl Rng) -> Self {
        let a = glorot_limit(input, output);
        let weight = Array2::from_shape_simple_fn((output, input), || rng.random_range(-a..a));
        Linear {
            weight,
            bias: Array1::zeros(output),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.weight.ncols()
    }

    pub fn output_dim(&self) -> usize {
        self.weight.nrows()
    }

    pub fn forward(&self, x: &Array2<f64>) -> Array2<f64> {
        x.dot(&self.weight.t()) + &self.bias
    }

    /// Accumulates parameter gradients into `grad`, returns the input gradient.
    pub fn backward(&self, x: &Array2<f64>, dy: &Array2<f64>, grad: &mut Linear) -> Array2<f64> {
        grad.weight += &dy.t().dot(x);
        grad.bias += &dy.sum_axis(Axis(0));
        dy.dot(&self.weight)
    }
}

pub fn glorot_limit(fan_in: usize, fan_out: usize) -> f64 {
    (6.0 / (fan_in + fan_out) as f64).sqrt()
}

#[derive(Debug, Clone, PartialEq)]
pub struct BatchNorm {
    pub gamma: Array1<f64>,
    pub beta: Array1<f64>,
    pub running_mean: Array1<f64>,
    pub running_var: Array1<f64>,
}

impl BatchNorm {
    pub fn new(dim: usize) -> Self {
        BatchNorm {
            gamma: Array1::ones(dim),
            beta: Array1::zeros(dim),
            running_mean: Array1::zeros(dim),
            running_var: Array1::ones(dim),
        }
    }

    fn zeros(dim: usize) -> Self {
        BatchNorm {
            gamma: Array1::zeros(dim),
            beta: Array1::zeros(dim),
            running_mean: Array1::zeros(dim),
            running_var: Array1::zeros(dim),
        }
    }
}

/// One of the `k` global-aware modules.
#[derive(Debug, Clone, PartialEq)]
pub struct GlobalAwareModule {
    /// `x_i -> x̂_i`, `c -> c'`.
    pub part_proj: Linear,
    /// `(x̂_i, x̂_0) -> pre-normalization residual`, `2c' -> c'`.
    pub fuse: Linear,
    pub norm: BatchNorm,
}

/// Trainable state of all global-aware modules. Also used as the gradient
/// container, in which case the running statistics stay zero.
#[derive(Debug, Clone, PartialEq)]
pub struct GlobalAwareParams {
    /// `x_0 -> x̂_0`. One shared projection, or one per part when built with
    /// `independent_global_proj`.
    pub global_proj: Vec<Linear>,
    pub modules: Vec<GlobalAwareModule>,
}

impl GlobalAwareParams {
    /// Glorot-uniform projections, zero biases, unit `gamma`, zero `beta`,
    /// running mean 0 and variance 1.
    pub fn init(c: usize, reduced: usize, k: usize, independent_global_proj: bool, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n_global = if independent_global_proj { k } else { 1 };
        let global_proj = (0..n_global).map(|_| Linear::glorot(c, reduced, &mut rng)).collect();
        let modules = (0..k)
            .map(|_| GlobalAwareModule {
                part_proj: Linear::glorot(c, reduced, &mut rng),
                fuse: Linear::glorot(2 * reduced, reduced, &mut rng),
                norm: BatchNorm::new(reduced),
            })
            .collect();
        GlobalAwareParams { global_proj, modules }
    }

    pub fn zeros_like(&self) -> Self {
        GlobalAwareParams {
            global_proj: self
                .global_proj
                .iter()
                .map(|l| Linear::zeros(l.input_dim(), l.output_dim()))
                .collect(),
            modules: self
                .modules
                .iter()
                .map(|m| GlobalAwareModule {
                    part_proj: Linear::zeros(m.part_proj.input_dim(), m.part_proj.output_dim()),
                    fuse: Linear::zeros(m.fuse.input_dim(), m.fuse.output_dim()),
                    norm: BatchNorm::zeros(m.norm.gamma.len()),
                })
                .collect(),
        }
    }

    pub fn k(&self) -> usize {
        self.modules.len()
    }

    pub fn input_dim(&self) -> usize {
        self.global_proj[0].input_dim()
    }

    pub fn output_dim(&self) -> usize {
        self.global_proj[0].output_dim()
    }

    pub fn independent_global_proj(&self) -> bool {
        self.global_proj.len() > 1
    }

    fn global_proj_for(&self, part: usize) -> usize {
        if self.global_proj.len() == 1 {
            0
        } else {
            part
        }
    }

    /// Every tensor including running statistics, with stable names.
    pub fn named_tensors(&self) -> Vec<(String, Vec<usize>, &[f64])> {
        let mut out = Vec::new();
        fn push<'a>(out: &mut Vec<(String, Vec<usize>, &'a [f64])>, name: String, shape: &[usize], data: &'a [f64]) {
            out.push((name, shape.to_vec(), data));
        }
        for (j, l) in self.global_proj.iter().enumerate() {
            push(&mut out, format!("global_proj.{j}.weight"), l.weight.shape(), l.weight.as_slice().unwrap());
            push(&mut out, format!("global_proj.{j}.bias"), l.bias.shape(), l.bias.as_slice().unwrap());
        }
        for (i, m) in self.modules.iter().enumerate() {
            let p = format!("module.{i}");
            push(&mut out, format!("{p}.part_proj.weight"), m.part_proj.weight.shape(), m.part_proj.weight.as_slice().unwrap());
            push(&mut out, format!("{p}.part_proj.bias"), m.part_proj.bias.shape(), m.part_proj.bias.as_slice().unwrap());
            push(&mut out, format!("{p}.fuse.weight"), m.fuse.weight.shape(), m.fuse.weight.as_slice().unwrap());
            push(&mut out, format!("{p}.fuse.bias"), m.fuse.bias.shape(), m.fuse.bias.as_slice().unwrap());
            push(&mut out, format!("{p}.norm.gamma"), m.norm.gamma.shape(), m.norm.gamma.as_slice().unwrap());
            push(&mut out, format!("{p}.norm.beta"), m.norm.beta.shape(), m.norm.beta.as_slice().unwrap());
            push(&mut out, format!("{p}.norm.running_mean"), m.norm.running_mean.shape(), m.norm.running_mean.as_slice().unwrap());
            push(&mut out, format!("{p}.norm.running_var"), m.norm.running_var.shape(), m.norm.running_var.as_slice().unwrap());
        }
        out
    }

    /// Mutable views of every tensor, in the order of [`Self::named_tensors`].
    pub fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out: Vec<&mut [f64]> = Vec::new();
        for l in &mut self.global_proj {
            out.push(l.weight.as_slice_mut().unwrap());
            out.push(l.bias.as_slice_mut().unwrap());
        }
        for m in &mut self.modules {
            out.push(m.part_proj.weight.as_slice_mut().unwrap());
            out.push(m.part_proj.bias.as_slice_mut().unwrap());
            out.push(m.fuse.weight.as_slice_mut().unwrap());
            out.push(m.fuse.bias.as_slice_mut().unwrap());
            out.push(m.norm.gamma.as_slice_mut().unwrap());
            out.push(m.norm.beta.as_slice_mut().unwrap());
            out.push(m.norm.running_mean.as_slice_mut().unwrap());
            out.push(m.norm.running_var.as_slice_mut().unwrap());
        }
        out
    }

    /// Names of the parameters updated by gradient descent.
    pub fn trainable_names(&self) -> Vec<String> {
        self.named_tensors()
            .into_iter()
            .map(|(n, _, _)| n)
            .filter(|n| !n.contains("running_"))
            .collect()
    }

    pub fn trainable(&self) -> Vec<&[f64]> {
        self.named_tensors()
            .into_iter()
            .filter(|(n, _, _)| !n.contains("running_"))
            .map(|(_, _, d)| d)
            .collect()
    }

    pub fn trainable_mut(&mut self) -> Vec<&mut [f64]> {
        let names: Vec<bool> = self
            .named_tensors()
            .into_iter()
            .map(|(n, _, _)| !n.contains("running_"))
            .collect();
        self.tensors_mut()
            .into_iter()
            .zip(names)
            .filter(|(_, keep)| *keep)
            .map(|(t, _)| t)
            .collect()
    }

    pub fn is_finite(&self) -> bool {
        self.named_tensors()
            .iter()
            .all(|(_, _, d)| d.iter().all(|v| v.is_finite()))
    }

    fn check_input(&self, input: &AwareInput) -> Result<()> {
        let c = self.input_dim();
        if input.k() != self.k() {
            return Err(Error::DimMismatch {
                expected: format!("{} parts", self.k()),
                found: format!("{} parts", input.k()),
            });
        }
        if input.dim() != c || input.parts.iter().any(|p| p.ncols() != c || p.nrows() != input.batch()) {
            return Err(Error::DimMismatch {
                expected: format!("features of dim {c}"),
                found: format!("features of dim {}", input.dim()),
            });
        }
        Ok(())
    }

    /// Forward pass. In train mode the normalization uses batch statistics;
    /// call [`Self::update_running_stats`] with the returned cache to fold
    /// them into the running estimates.
    pub fn forward(&self, input: &AwareInput, mode: Mode) -> Result<(Vec<Array2<f64>>, GlobalAwareCache)> {
        self.check_input(input)?;
        let b = input.batch();
        if mode == Mode::Train && b < 2 {
            return Err(Error::NormDegenerate(b));
        }
        let reduced = self.output_dim();
        let global_hat: Vec<Array2<f64>> = self.global_proj.iter().map(|l| l.forward(&input.global)).collect();
        let mut outputs = Vec::with_capacity(self.k());
        let mut parts = Vec::with_capacity(self.k());
        for (i, m) in self.modules.iter().enumerate() {
            let g_hat = &global_hat[self.global_proj_for(i)];
            let part_hat = m.part_proj.forward(&input.parts[i]);
            let concat = concatenate(Axis(1), &[part_hat.view(), g_hat.view()]).expect("equal batch sizes");
            let pre = m.fuse.forward(&concat);
            let (mean, var) = match mode {
                Mode::Train => {
                    let mean = pre.mean_axis(Axis(0)).unwrap();
                    let var = (&pre - &mean).mapv(|v| v * v).mean_axis(Axis(0)).unwrap();
                    (mean, var)
                }
                Mode::Infer => (m.norm.running_mean.clone(), m.norm.running_var.clone()),
            };
            let inv_std = var.mapv(|v| 1.0 / (v + BN_EPS).sqrt());
            let normed = (&pre - &mean) * &inv_std;
            let affine = &normed * &m.norm.gamma + &m.norm.beta;
            let residual = affine.mapv(|v| v.max(0.0));
            outputs.push(&residual + g_hat);
            debug_assert_eq!(residual.ncols(), reduced);
            parts.push(PartCache {
                part_hat,
                concat,
                normed,
                affine,
                inv_std,
                batch_mean: mean,
                batch_var: var,
            });
        }
        Ok((
            outputs,
            GlobalAwareCache {
                mode,
                input: input.clone(),
                parts,
            },
        ))
    }

    /// `running = momentum * running + (1 - momentum) * batch`, using the
    /// biased batch variance.
    pub fn update_running_stats(&mut self, cache: &GlobalAwareCache) {
        if cache.mode != Mode::Train {
            return;
        }
        for (m, p) in self.modules.iter_mut().zip(&cache.parts) {
            m.norm.running_mean = &m.norm.running_mean * BN_MOMENTUM + &p.batch_mean * (1.0 - BN_MOMENTUM);
            m.norm.running_var = &m.norm.running_var * BN_MOMENTUM + &p.batch_var * (1.0 - BN_MOMENTUM);
        }
    }

    /// Exact gradients of `sum_i <upstream_i, x_i^g>` with respect to every
    /// trainable parameter and every input feature.
    pub fn backward(
        &self,
        cache: Option<&GlobalAwareCache>,
        upstream: &[Array2<f64>],
    ) -> Result<(GlobalAwareParams, AwareInputGrad)> {
        let cache = cache.ok_or(Error::MissingCache)?;
        if upstream.len() != self.k() || cache.parts.len() != self.k() {
            return Err(Error::ShapeMismatch(format!(
                "expected {} upstream gradients, got {}",
                self.k(),
                upstream.len()
            )));
        }
        let b = cache.input.batch();
        let reduced = self.output_dim();
        let mut grads = self.zeros_like();
        let mut d_global_hat: Vec<Array2<f64>> = self.global_proj.iter().map(|_| Array2::zeros((b, reduced))).collect();
        let mut d_parts = Vec::with_capacity(self.k());

        for (i, (m, p)) in self.modules.iter().zip(&cache.parts).enumerate() {
            let dy = &upstream[i];
            if dy.dim() != (b, reduced) {
                return Err(Error::ShapeMismatch(format!(
                    "upstream gradient {i} has shape {:?}, expected ({b}, {reduced})",
                    dy.dim()
                )));
            }
            let gi = self.global_proj_for(i);
            d_global_hat[gi] += dy;

            let d_affine = dy * &p.affine.mapv(|v| if v > 0.0 { 1.0 } else { 0.0 });
            let g = &mut grads.modules[i];
            g.norm.gamma += &(&d_affine * &p.normed).sum_axis(Axis(0));
            g.norm.beta += &d_affine.sum_axis(Axis(0));
            let d_normed = &d_affine * &m.norm.gamma;
            let d_pre = match cache.mode {
                Mode::Train => {
                    let n = b as f64;
                    let sum_d = d_normed.sum_axis(Axis(0));
                    let sum_dx = (&d_normed * &p.normed).sum_axis(Axis(0));
                    ((&d_normed * n) - &sum_d - &(&p.normed * &sum_dx)) * &(&p.inv_std / n)
                }
                Mode::Infer => &d_normed * &p.inv_std,
            };
            let d_concat = m.fuse.backward(&p.concat, &d_pre, &mut g.fuse);
            let d_part_hat = d_concat.slice(s![.., ..reduced]).to_owned();
            d_global_hat[gi] += &d_concat.slice(s![.., reduced..]);
            d_parts.push(m.part_proj.backward(&cache.input.parts[i], &d_part_hat, &mut g.part_proj));
        }

        let mut d_global = Array2::zeros(cache.input.global.dim());
        for (j, l) in self.global_proj.iter().enumerate() {
            d_global += &l.backward(&cache.input.global, &d_global_hat[j], &mut grads.global_proj[j]);
        }
        Ok((
            grads,
            AwareInputGrad {
                global: d_global,
                parts: d_parts,
            },
        ))
    }
}

#[derive(Debug, Clone)]
struct PartCache {
    part_hat: Array2<f64>,
    concat: Array2<f64>,
    normed: Array2<f64>,
    affine: Array2<f64>,
    inv_std: Array1<f64>,
    batch_mean: Array1<f64>,
    batch_var: Array1<f64>,
}

/// Intermediates kept by [`GlobalAwareParams::forward`] for the backward pass.
#[derive(Debug, Clone)]
pub struct GlobalAwareCache {
    mode: Mode,
    input: AwareInput,
    parts: Vec<PartCache>,
}

impl GlobalAwareCache {
    pub fn mode(&self) -> Mode {
        self.mode
    }

    /// `x̂_i` for part `i` (zero-based).
    pub fn part_projection(&self, i: usize) -> &Array2<f64> {
        &self.parts[i].part_hat
    }

    /// Whether any residual pre-activation of part `i` lies within `margin` of the ReLU kink.
    pub fn near_kink(&self, margin: f64) -> bool {
        self.parts
            .iter()
            .any(|p| p.affine.iter().any(|v| v.abs() < margin))
    }

    pub fn relu_mask(&self) -> Vec<bool> {
        self.parts
            .iter()
            .flat_map(|p| p.affine.iter().map(|&v| v > 0.0))
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AwareInputGrad {
    pub global: Array2<f64>,
    pub parts: Vec<Array2<f64>>,
}

/// Optional per-part `c -> c` adapter for the local-aware path, initialized to
/// the identity so that it starts out as the plain local-aware module.
#[derive(Debug, Clone, PartialEq)]
pub struct LocalAdapter {
    pub layers: Vec<Linear>,
}

impl LocalAdapter {
    pub fn identity(c: usize, k: usize) -> Self {
        LocalAdapter {
            layers: (0..k).map(|_| Linear::identity(c)).collect(),
        }
    }

    pub fn zeros_like(&self) -> Self {
        LocalAdapter {
            layers: self
                .layers
                .iter()
                .map(|l| Linear::zeros(l.input_dim(), l.output_dim()))
                .collect(),
        }
    }

    pub fn forward(&self, input: &AwareInput) -> Result<Vec<Array2<f64>>> {
        if input.k() != self.layers.len() {
            return Err(Error::DimMismatch {
                expected: format!("{} parts", self.layers.len()),
                found: format!("{} parts", input.k()),
            });
        }
        Ok(self.layers.iter().zip(&input.parts).map(|(l, x)| l.forward(x)).collect())
    }

    pub fn backward(&self, input: &AwareInput, upstream: &[Array2<f64>]) -> (LocalAdapter, Vec<Array2<f64>>) {
        let mut grads = self.zeros_like();
        let d_inputs = self
            .layers
            .iter()
            .zip(&mut grads.layers)
            .zip(input.parts.iter().zip(upstream))
            .map(|((l, g), (x, dy))| l.backward(x, dy, g))
            .collect();
        (grads, d_inputs)
    }

    pub fn named_tensors(&self) -> Vec<(String, Vec<usize>, &[f64])> {
        let mut out = Vec::new();
        for (i, l) in self.layers.iter().enumerate() {
            out.push((format!("adapter.{i}.weight"), l.weight.shape().to_vec(), l.weight.as_slice().unwrap()));
            out.push((format!("adapter.{i}.bias"), l.bias.shape().to_vec(), l.bias.as_slice().unwrap()));
        }
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out: Vec<&mut [f64]> = Vec::new();
        for l in &mut self.layers {
            out.push(l.weight.as_slice_mut().unwrap());
            out.push(l.bias.as_slice_mut().unwrap());
        }
        out
    }
}
