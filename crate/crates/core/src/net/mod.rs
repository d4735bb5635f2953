//! The surface-normal network.
//!
//! Layout: embedding → `levels` × (attention block, downsample) → bottleneck
//! attention → `levels` decoder blocks, each upsampling, concatenating the
//! matching encoder skip, fusing, attending and emitting a normal map.

mod layers;
mod params;

use std::sync::Arc;

use serde::{Deserialize, Serialize};

pub use layers::{AttentionTrace, EmbedKind};
pub use params::{BoundParams, Param, ParamId, ParamStore};

use crate::autograd::{BatchStats, Graph, Var};
use crate::error::{Error, Result};
use crate::sphere_geom::{build_tangent_sampling_grid, ErpGridSpec, TangentPatchGrid};
use crate::tensor::Tensor;

use layers::{ensure_finite, AttentionBlock, Conv, Downsample, Embed, NormalHead, Upsample};
use params::{Init, ParamBuilder};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub height: usize,
    pub width: usize,
    /// Encoder levels; the decoder has the same number of blocks and emits
    /// one normal map per block.
    pub levels: usize,
    pub base_channels: usize,
    pub num_heads: usize,
    pub k_samples: usize,
    /// Tangent lattice spacing in units of one pixel's angular step.
    pub lattice_spacing: f64,
    pub ffn_expansion: usize,
    pub embed: EmbedKind,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            height: 32,
            width: 64,
            levels: 4,
            base_channels: 32,
            num_heads: 2,
            k_samples: 9,
            lattice_spacing: 1.0,
            ffn_expansion: 2,
            embed: EmbedKind::ConvStack,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.width != 2 * self.height || self.height == 0 {
            return bad(format!("input must be H x 2H, got {}x{}", self.height, self.width));
        }
        if !self.height.is_multiple_of(1 << self.levels) {
            return bad(format!("height {} not divisible by 2^{}", self.height, self.levels));
        }
        if self.base_channels == 0 || self.num_heads == 0 || self.ffn_expansion == 0 {
            return bad("channels, heads and expansion must be positive".into());
        }
        if !self.base_channels.is_multiple_of(self.num_heads) {
            return bad(format!("{} channels do not split into {} heads", self.base_channels, self.num_heads));
        }
        let side = (self.k_samples as f64).sqrt().round() as usize;
        if self.k_samples == 0 || side * side != self.k_samples {
            return bad(format!("k_samples must be a perfect square, got {}", self.k_samples));
        }
        if !(self.lattice_spacing > 0.0 && self.lattice_spacing.is_finite()) {
            return bad("lattice spacing must be positive".into());
        }
        Ok(())
    }

    /// Number of emitted normal maps.
    pub fn scales(&self) -> usize {
        self.levels.max(1)
    }

    pub fn channels_at(&self, level: usize) -> usize {
        self.base_channels << level
    }

    /// `(H, W)` of every emitted map, coarse to fine.
    pub fn output_sizes(&self) -> Vec<(usize, usize)> {
        if self.levels == 0 {
            return vec![(self.height, self.width)];
        }
        (0..self.levels).rev().map(|l| (self.height >> l, self.width >> l)).collect()
    }
}

/// Closed-form trainable parameter count for `cfg`.
pub fn param_count(cfg: &ModelConfig) -> usize {
    let conv = |cin: usize, cout: usize, k: usize| cin * cout * k * k + cout;
    let c0 = cfg.base_channels;
    let mut total = match cfg.embed {
        EmbedKind::ConvStack => (0..3).map(|i| conv(if i == 0 { 3 } else { c0 }, c0, 3) + 2 * c0).sum(),
        EmbedKind::Single => conv(3, c0, 3),
    };
    let mk = cfg.num_heads * cfg.k_samples;
    let block = |c: usize| {
        let hid = c * cfg.ffn_expansion;
        2 * c
            + conv(c, c, 1)
            + conv(c, mk, 1)
            + conv(c, 2 * mk, 1)
            + conv(c, c, 1)
            + 2 * c
            + conv(c, hid, 1)
            + (hid * 9 + hid)
            + conv(hid, c, 1)
    };
    let head = |c: usize| conv(c, 3, 3);
    if cfg.levels == 0 {
        return total + head(c0);
    }
    for l in 0..cfg.levels {
        let c = cfg.channels_at(l);
        total += block(c) + conv(c, 2 * c, 3);
    }
    total += block(cfg.channels_at(cfg.levels));
    for l in 0..cfg.levels {
        let c = cfg.channels_at(l);
        total += conv(2 * c, c, 1) + conv(2 * c, c, 1) + block(c) + head(c);
    }
    total
}

#[derive(Clone, Debug)]
struct DecoderBlock {
    up: Upsample,
    fuse: Conv,
    block: AttentionBlock,
    head: NormalHead,
}

/// Forward-mode selector: batch statistics during training, stored running
/// statistics for evaluation.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

pub struct ForwardOutput {
    /// Normal maps, coarse to fine, at their native resolutions.
    pub maps: Vec<Var>,
    /// Batch statistics of each normalization layer (training mode only).
    pub batch_stats: Vec<BatchStats>,
    pub trace: Vec<AttentionTrace>,
}

#[derive(Clone, Debug)]
pub struct Model {
    config: ModelConfig,
    params: ParamStore,
    running: Vec<BatchStats>,
    embed: Embed,
    encoder: Vec<(AttentionBlock, Downsample)>,
    bottleneck: Option<AttentionBlock>,
    decoder: Vec<DecoderBlock>,
    /// Head used only by the zero-level configuration.
    direct_head: Option<NormalHead>,
    grids: Vec<Arc<TangentPatchGrid>>,
}

impl Model {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut pb = ParamBuilder::new(seed);
        let c0 = config.base_channels;
        let (m, k, r) = (config.num_heads, config.k_samples, config.ffn_expansion);
        let embed = Embed::new(&mut pb, config.embed, c0);
        let mut encoder = Vec::new();
        for l in 0..config.levels {
            let c = config.channels_at(l);
            let block = AttentionBlock::new(&mut pb, &format!("enc.{l}"), c, m, k, r);
            let down = Downsample::new(&mut pb, &format!("enc.{l}.down"), c);
            encoder.push((block, down));
        }
        let (bottleneck, direct_head) = if config.levels > 0 {
            let c = config.channels_at(config.levels);
            (Some(AttentionBlock::new(&mut pb, "bottleneck", c, m, k, r)), None)
        } else {
            (None, Some(NormalHead::new(&mut pb, "head", c0)))
        };
        let mut decoder = Vec::new();
        for i in 0..config.levels {
            let l = config.levels - 1 - i;
            let c = config.channels_at(l);
            let up = Upsample::new(&mut pb, &format!("dec.{i}.up"), 2 * c);
            let fuse = Conv::new(
                &mut pb,
                &format!("dec.{i}.fuse"),
                2 * c,
                c,
                1,
                crate::autograd::ConvSpec::SAME,
                Init::Normal((1.0 / (2 * c) as f64).sqrt()),
            );
            let block = AttentionBlock::new(&mut pb, &format!("dec.{i}"), c, m, k, r);
            let head = NormalHead::new(&mut pb, &format!("dec.{i}.head"), c);
            decoder.push(DecoderBlock { up, fuse, block, head });
        }
        let params = pb.finish();
        let running =
            (0..embed.num_batch_norms()).map(|_| BatchStats { mean: vec![0.0; c0], var: vec![1.0; c0] }).collect();
        let grids = Self::build_grids(&config)?;
        Ok(Self { config, params, running, embed, encoder, bottleneck, decoder, direct_head, grids })
    }

    fn build_grids(config: &ModelConfig) -> Result<Vec<Arc<TangentPatchGrid>>> {
        (0..=config.levels)
            .map(|l| {
                let spec = ErpGridSpec::new(config.height >> l)?;
                let spacing = config.lattice_spacing * spec.angular_step();
                Ok(Arc::new(build_tangent_sampling_grid(&spec, config.k_samples, spacing)?))
            })
            .collect()
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn running_stats(&self) -> &[BatchStats] {
        &self.running
    }

    pub fn set_running_stats(&mut self, stats: Vec<BatchStats>) -> Result<()> {
        if stats.len() != self.running.len()
            || stats.iter().any(|s| s.mean.len() != self.config.base_channels || s.var.len() != s.mean.len())
        {
            return Err(Error::Shape("running statistics do not match the model".into()));
        }
        self.running = stats;
        Ok(())
    }

    /// Exponential moving update of the running statistics.
    pub fn update_running_stats(&mut self, batch: &[BatchStats], momentum: f64) {
        for (r, b) in self.running.iter_mut().zip(batch) {
            for (x, y) in r.mean.iter_mut().zip(&b.mean) {
                *x = (1.0 - momentum) * *x + momentum * y;
            }
            for (x, y) in r.var.iter_mut().zip(&b.var) {
                *x = (1.0 - momentum) * *x + momentum * y;
            }
        }
    }

    pub fn grid(&self, level: usize) -> &Arc<TangentPatchGrid> {
        &self.grids[level]
    }

    /// Places the forward pass for `rgb` (`N×3×H×W`) on `g`.
    pub fn forward_graph(
        &self,
        g: &mut Graph,
        p: &BoundParams,
        rgb: Var,
        mode: Mode,
        trace: bool,
    ) -> Result<ForwardOutput> {
        let (_, c, h, w) = g.value(rgb).dims4();
        if (c, h, w) != (3, self.config.height, self.config.width) {
            return Err(Error::Shape(format!(
                "input is {c}x{h}x{w}, model expects 3x{}x{}",
                self.config.height, self.config.width
            )));
        }
        ensure_finite(g, rgb, "input")?;
        let mut traces = Vec::new();
        let running = match mode {
            Mode::Train => None,
            Mode::Eval => Some(self.running.as_slice()),
        };
        let (mut x, batch_stats) = self.embed.forward(g, p, rgb, running);
        ensure_finite(g, x, "embed")?;
        let mut maps = Vec::new();
        if let Some(head) = &self.direct_head {
            maps.push(head.forward(g, p, x));
            return Ok(ForwardOutput { maps, batch_stats, trace: traces });
        }
        let mut skips = Vec::new();
        for (l, (block, down)) in self.encoder.iter().enumerate() {
            x = block.forward(g, p, x, &self.grids[l], trace.then_some(&mut traces))?;
            skips.push(x);
            x = down.forward(g, p, x)?;
        }
        let bottleneck = self.bottleneck.as_ref().expect("levels > 0");
        x = bottleneck.forward(g, p, x, &self.grids[self.config.levels], trace.then_some(&mut traces))?;
        for (i, dec) in self.decoder.iter().enumerate() {
            let l = self.config.levels - 1 - i;
            let up = dec.up.forward(g, p, x)?;
            let cat = g.concat_channels(up, skips[l]);
            let fused = dec.fuse.forward(g, p, cat);
            x = dec.block.forward(g, p, fused, &self.grids[l], trace.then_some(&mut traces))?;
            let n = dec.head.forward(g, p, x);
            ensure_finite(g, n, &format!("dec.{i}.head"))?;
            maps.push(n);
        }
        Ok(ForwardOutput { maps, batch_stats, trace: traces })
    }

    /// Evaluation-mode prediction: every scale, coarse to fine.
    pub fn predict(&self, rgb: &Tensor) -> Result<Vec<Tensor>> {
        let mut g = Graph::new();
        let p = self.params.bind(&mut g, false);
        let x = g.constant(rgb.clone());
        let out = self.forward_graph(&mut g, &p, x, Mode::Eval, false)?;
        Ok(out.maps.iter().map(|&m| g.value(m).clone()).collect())
    }

    /// Evaluation-mode prediction of the finest scale only.
    pub fn predict_finest(&self, rgb: &Tensor) -> Result<Tensor> {
        Ok(self.predict(rgb)?.pop().expect("at least one scale"))
    }
}

#[cfg(test)]
mod tests;
