//! Horizontal stripe partitioning, spatial pooling and L2 normalization.

use serde::{Deserialize, Serialize};

use crate::dataset::FeatureMap;
use crate::error::{Error, Result};

/// Norms below this are treated as zero by [`normalize`].
pub const NORM_EPS: f64 = 1e-12;

/// Number of equal horizontal stripes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct PartitionScale(usize);

impl PartitionScale {
    pub fn new(k: usize) -> Result<Self> {
        if k == 0 {
            return Err(Error::InvalidConfig("partition scale k must be >= 1".into()));
        }
        Ok(PartitionScale(k))
    }

    pub fn get(self) -> usize {
        self.0
    }

    pub fn check(self, height: usize) -> Result<()> {
        if self.0 == 0 || !height.is_multiple_of(self.0) {
            return Err(Error::IndivisibleHeight { height, k: self.0 });
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PoolingMode {
    #[default]
    Gap,
    Gmp,
}

/// A pooled `1x1xd` vector. `part_index` 0 is the global feature, `1..=k`
/// the stripes from top to bottom.
#[derive(Debug, Clone, PartialEq)]
pub struct CompactFeature {
    pub data: Vec<f64>,
    pub part_index: usize,
}

impl CompactFeature {
    pub fn new(data: Vec<f64>, part_index: usize) -> Self {
        CompactFeature { data, part_index }
    }

    pub fn dim(&self) -> usize {
        self.data.len()
    }

    pub fn norm(&self) -> f64 {
        l2_norm(&self.data)
    }
}

/// Splits `f` into `k` stripes of `h/k` rows each, top to bottom.
pub fn partition(f: &FeatureMap, k: PartitionScale) -> Result<Vec<FeatureMap>> {
    let h = f.dims().h;
    k.check(h)?;
    let rows = h / k.get();
    Ok((0..k.get()).map(|i| f.rows(i * rows, rows)).collect())
}

/// Channel-wise mean (GAP) or max (GMP) over all spatial positions.
pub fn pool(stripe: &FeatureMap, mode: PoolingMode) -> CompactFeature {
    let dims = stripe.dims();
    let mut out = match mode {
        PoolingMode::Gap => vec![0.0f64; dims.c],
        PoolingMode::Gmp => vec![f64::NEG_INFINITY; dims.c],
    };
    for y in 0..dims.h {
        for x in 0..dims.w {
            for (o, &v) in out.iter_mut().zip(stripe.pixel(y, x)) {
                match mode {
                    PoolingMode::Gap => *o += v as f64,
                    PoolingMode::Gmp => *o = o.max(v as f64),
                }
            }
        }
    }
    if mode == PoolingMode::Gap {
        let n = (dims.h * dims.w) as f64;
        out.iter_mut().for_each(|o| *o /= n);
    }
    CompactFeature::new(out, 0)
}

pub fn l2_norm(x: &[f64]) -> f64 {
    x.iter().map(|v| v * v).sum::<f64>().sqrt()
}

/// `x / max(|x|, eps)`, except that inputs with norm below `eps` map to zero.
pub fn normalize_vec(x: &[f64]) -> Vec<f64> {
    let n = l2_norm(x);
    if n < NORM_EPS {
        return vec![0.0; x.len()];
    }
    x.iter().map(|v| v / n).collect()
}

pub fn normalize(x: &CompactFeature) -> CompactFeature {
    CompactFeature::new(normalize_vec(&x.data), x.part_index)
}

/// Vector-Jacobian product of [`normalize_vec`] at `x` for upstream `grad`.
pub fn normalize_backward(x: &[f64], grad: &[f64]) -> Vec<f64> {
    let n = l2_norm(x);
    if n < NORM_EPS {
        return vec![0.0; x.len()];
    }
    let y_dot_g: f64 = x.iter().zip(grad).map(|(a, g)| a * g).sum::<f64>() / n;
    x.iter()
        .zip(grad)
        .map(|(a, g)| (g - (a / n) * y_dot_g) / n)
        .collect()
}

/// The normalized global feature and the `k` normalized stripe features of one map.
#[derive(Debug, Clone, PartialEq)]
pub struct PartFeatures {
    pub global: CompactFeature,
    pub parts: Vec<CompactFeature>,
}

pub fn extract(f: &FeatureMap, k: PartitionScale, mode: PoolingMode) -> Result<PartFeatures> {
    let stripes = partition(f, k)?;
    let global = normalize(&pool(f, mode));
    let parts = stripes
        .iter()
        .enumerate()
        .map(|(i, s)| {
            let mut p = normalize(&pool(s, mode));
            p.part_index = i + 1;
            p
        })
        .collect();
    Ok(PartFeatures { global, parts })
}
