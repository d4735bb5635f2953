//! Per-pixel rasters shared by the data, loss and metric code.

use crate::error::{Error, Result};
use crate::tensor::FeatureMap;

/// Guard used whenever a normal vector is normalized.
pub const NORMAL_EPS: f64 = 1e-8;

/// `3×H×W` normal vectors, components nominally in `[−1, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct NormalMap(FeatureMap);

impl NormalMap {
    pub fn zeros(height: usize, width: usize) -> Self {
        Self(FeatureMap::zeros(3, height, width))
    }

    pub fn from_feature_map(map: FeatureMap) -> Result<Self> {
        if map.channels() != 3 {
            return Err(Error::Shape(format!("normal map needs 3 channels, got {}", map.channels())));
        }
        Ok(Self(map))
    }

    pub fn height(&self) -> usize {
        self.0.height()
    }

    pub fn width(&self) -> usize {
        self.0.width()
    }

    pub fn get(&self, v: usize, u: usize) -> [f64; 3] {
        [self.0.get(0, v, u), self.0.get(1, v, u), self.0.get(2, v, u)]
    }

    pub fn set(&mut self, v: usize, u: usize, n: [f64; 3]) {
        for (c, x) in n.into_iter().enumerate() {
            self.0.set(c, v, u, x);
        }
    }

    pub fn as_feature_map(&self) -> &FeatureMap {
        &self.0
    }

    pub fn into_feature_map(self) -> FeatureMap {
        self.0
    }

    /// Unit-normalizes every pixel whose norm exceeds `1e-6`; others are zeroed.
    pub fn normalized(&self) -> Self {
        let mut out = self.clone();
        for v in 0..self.height() {
            for u in 0..self.width() {
                let n = self.get(v, u);
                let len = (n[0] * n[0] + n[1] * n[1] + n[2] * n[2]).sqrt();
                if len > 1e-6 {
                    out.set(v, u, [n[0] / len, n[1] / len, n[2] / len]);
                } else {
                    out.set(v, u, [0.0; 3]);
                }
            }
        }
        out
    }
}

/// `true` where a pixel carries ground truth.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ValidMask {
    height: usize,
    width: usize,
    valid: Vec<bool>,
}

impl ValidMask {
    pub fn all_valid(height: usize, width: usize) -> Self {
        Self { height, width, valid: vec![true; height * width] }
    }

    pub fn from_vec(height: usize, width: usize, valid: Vec<bool>) -> Result<Self> {
        if valid.len() != height * width {
            return Err(Error::Shape(format!(
                "{height}x{width} mask needs {} entries, got {}",
                height * width,
                valid.len()
            )));
        }
        Ok(Self { height, width, valid })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn is_valid(&self, v: usize, u: usize) -> bool {
        self.valid[v * self.width + u]
    }

    pub fn set(&mut self, v: usize, u: usize, valid: bool) {
        self.valid[v * self.width + u] = valid;
    }

    pub fn as_slice(&self) -> &[bool] {
        &self.valid
    }

    pub fn count(&self) -> usize {
        self.valid.iter().filter(|&&b| b).count()
    }
}

/// `H×W` depth in meters.
#[derive(Clone, Debug, PartialEq)]
pub struct DepthMap {
    height: usize,
    width: usize,
    values: Vec<f64>,
}

impl DepthMap {
    pub fn from_vec(height: usize, width: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != height * width {
            return Err(Error::Shape(format!(
                "{height}x{width} depth map needs {} values, got {}",
                height * width,
                values.len()
            )));
        }
        Ok(Self { height, width, values })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn get(&self, v: usize, u: usize) -> f64 {
        self.values[v * self.width + u]
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }
}
