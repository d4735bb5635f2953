//! Dense row-major `f64` arrays.

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(shape: &[usize]) -> Self {
        Self { shape: shape.to_vec(), data: vec![0.0; shape.iter().product()] }
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        Self { shape: shape.to_vec(), data: vec![value; shape.iter().product()] }
    }

    pub fn from_vec(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::Shape(format!("shape {shape:?} needs {n} values, got {}", data.len())));
        }
        Ok(Self { shape: shape.to_vec(), data })
    }

    pub fn scalar(v: f64) -> Self {
        Self { shape: vec![1], data: vec![v] }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn item(&self) -> f64 {
        self.data[0]
    }

    /// `(N, C, H, W)` of a rank-4 tensor.
    pub fn dims4(&self) -> (usize, usize, usize, usize) {
        assert_eq!(self.shape.len(), 4, "expected NCHW tensor, got {:?}", self.shape);
        (self.shape[0], self.shape[1], self.shape[2], self.shape[3])
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        if shape.iter().product::<usize>() != self.data.len() {
            return Err(Error::Shape(format!("cannot reshape {:?} to {shape:?}", self.shape)));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    /// Index and value of the first non-finite entry.
    pub fn first_non_finite(&self) -> Option<(usize, f64)> {
        self.data.iter().copied().enumerate().find(|(_, x)| !x.is_finite())
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        assert_eq!(self.shape, other.shape);
        self.data.iter().zip(&other.data).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max)
    }

    /// Stacks `C×H×W` maps into an `N×C×H×W` batch.
    pub fn stack(maps: &[&FeatureMap]) -> Result<Self> {
        let first = maps.first().ok_or_else(|| Error::Shape("empty stack".into()))?;
        let (c, h, w) = (first.channels(), first.height(), first.width());
        let mut data = Vec::with_capacity(maps.len() * c * h * w);
        for m in maps {
            if (m.channels(), m.height(), m.width()) != (c, h, w) {
                return Err(Error::Shape("stacked maps differ in shape".into()));
            }
            data.extend_from_slice(m.values());
        }
        Ok(Self { shape: vec![maps.len(), c, h, w], data })
    }

    /// Sample `n` of an `N×C×H×W` batch.
    pub fn sample(&self, n: usize) -> FeatureMap {
        let (_, c, h, w) = self.dims4();
        let len = c * h * w;
        FeatureMap::from_vec(c, h, w, self.data[n * len..(n + 1) * len].to_vec()).expect("slice length matches")
    }
}

/// A `C×H×W` grid of feature values.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMap {
    channels: usize,
    height: usize,
    width: usize,
    values: Vec<f64>,
}

impl FeatureMap {
    pub fn zeros(channels: usize, height: usize, width: usize) -> Self {
        Self { channels, height, width, values: vec![0.0; channels * height * width] }
    }

    pub fn from_vec(channels: usize, height: usize, width: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != channels * height * width {
            return Err(Error::Shape(format!(
                "{channels}x{height}x{width} map needs {} values, got {}",
                channels * height * width,
                values.len()
            )));
        }
        Ok(Self { channels, height, width, values })
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn get(&self, c: usize, v: usize, u: usize) -> f64 {
        self.values[(c * self.height + v) * self.width + u]
    }

    pub fn set(&mut self, c: usize, v: usize, u: usize, x: f64) {
        self.values[(c * self.height + v) * self.width + u] = x;
    }

    /// Circular shift by `k` columns to the right.
    pub fn roll_columns(&self, k: usize) -> Self {
        let mut out = self.clone();
        let w = self.width;
        for c in 0..self.channels {
            for v in 0..self.height {
                for u in 0..w {
                    out.set(c, v, (u + k) % w, self.get(c, v, u));
                }
            }
        }
        out
    }

    pub fn into_tensor(self) -> Tensor {
        Tensor { shape: vec![1, self.channels, self.height, self.width], data: self.values }
    }
}
