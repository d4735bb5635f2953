//! Building blocks of the network. Each layer owns the ids of its
//! parameters and knows how to place itself on a [`Graph`].

use std::sync::Arc;

use crate::autograd::{BatchStats, ConvSpec, Graph, Var};
use crate::error::{Error, Result};
use crate::sphere_geom::TangentPatchGrid;
use crate::tensor::Tensor;

use super::params::{BoundParams, Init, ParamBuilder, ParamId};

pub(crate) const BN_EPS: f64 = 1e-5;
pub(crate) const LN_EPS: f64 = 1e-6;

/// Returns an error naming the layer and the first non-finite position.
pub(crate) fn ensure_finite(g: &Graph, v: Var, layer: &str) -> Result<()> {
    let t = g.value(v);
    if let Some((idx, val)) = t.first_non_finite() {
        let pos = if t.shape().len() == 4 {
            let (_, c, h, w) = t.dims4();
            let (n, rem) = (idx / (c * h * w), idx % (c * h * w));
            let (ch, p) = (rem / (h * w), rem % (h * w));
            format!("sample {n}, channel {ch}, row {}, col {} (value {val})", p / w, p % w)
        } else {
            format!("flat index {idx} (value {val})")
        };
        return Err(Error::NonFinite { layer: layer.to_string(), position: pos });
    }
    Ok(())
}

fn he(fan_in: usize) -> Init {
    Init::Normal((2.0 / fan_in as f64).sqrt())
}

fn lecun(fan_in: usize) -> Init {
    Init::Normal((1.0 / fan_in as f64).sqrt())
}

#[derive(Clone, Debug)]
pub(crate) struct Conv {
    pub weight: ParamId,
    pub bias: ParamId,
    pub spec: ConvSpec,
}

impl Conv {
    pub fn new(
        pb: &mut ParamBuilder,
        name: &str,
        cin: usize,
        cout: usize,
        k: usize,
        spec: ConvSpec,
        init: Init,
    ) -> Self {
        let cig = cin / spec.groups;
        let weight = pb.add(format!("{name}.weight"), &[cout, cig, k, k], init);
        let bias = pb.add(format!("{name}.bias"), &[cout], Init::Zeros);
        Self { weight, bias, spec }
    }

    pub fn forward(&self, g: &mut Graph, p: &BoundParams, x: Var) -> Var {
        g.conv2d(x, p.var(self.weight), Some(p.var(self.bias)), self.spec)
    }
}

#[derive(Clone, Debug)]
pub(crate) struct Norm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl Norm {
    pub fn new(pb: &mut ParamBuilder, name: &str, c: usize) -> Self {
        Self {
            gamma: pb.add(format!("{name}.gamma"), &[c], Init::Ones),
            beta: pb.add(format!("{name}.beta"), &[c], Init::Zeros),
        }
    }
}

/// How the RGB input is lifted to feature space.
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum EmbedKind {
    /// Three `3×3` convolution + batch-norm + rectifier stages.
    ConvStack,
    /// A single `3×3` convolution + rectifier.
    Single,
}

#[derive(Clone, Debug)]
pub(crate) struct Embed {
    pub convs: Vec<Conv>,
    pub norms: Vec<Norm>,
}

impl Embed {
    pub fn new(pb: &mut ParamBuilder, kind: EmbedKind, cout: usize) -> Self {
        let stages = match kind {
            EmbedKind::ConvStack => 3,
            EmbedKind::Single => 1,
        };
        let mut convs = Vec::new();
        let mut norms = Vec::new();
        let mut cin = 3;
        for s in 0..stages {
            convs.push(Conv::new(pb, &format!("embed.{s}.conv"), cin, cout, 3, ConvSpec::SAME, he(cin * 9)));
            if kind == EmbedKind::ConvStack {
                norms.push(Norm::new(pb, &format!("embed.{s}.bn"), cout));
            }
            cin = cout;
        }
        Self { convs, norms }
    }

    pub fn num_batch_norms(&self) -> usize {
        self.norms.len()
    }

    /// `running` holds fixed statistics in evaluation mode; batch statistics
    /// are used (and returned) otherwise.
    pub fn forward(
        &self,
        g: &mut Graph,
        p: &BoundParams,
        x: Var,
        running: Option<&[BatchStats]>,
    ) -> (Var, Vec<BatchStats>) {
        let mut cur = x;
        let mut stats = Vec::new();
        for (i, conv) in self.convs.iter().enumerate() {
            cur = conv.forward(g, p, cur);
            if let Some(norm) = self.norms.get(i) {
                let fixed = running.map(|r| &r[i]);
                let (y, s) = g.batch_norm(cur, p.var(norm.gamma), p.var(norm.beta), fixed, BN_EPS);
                stats.push(s);
                cur = y;
            }
            cur = g.relu(cur);
        }
        (cur, stats)
    }
}

/// Per-block record of the attention weights and flow, for inspection.
#[derive(Clone, Debug)]
pub struct AttentionTrace {
    pub block: String,
    pub heads: usize,
    pub grid: Arc<TangentPatchGrid>,
    /// `N×(heads·K)×H×W` softmax weights.
    pub weights: Tensor,
    /// `N×(2·heads·K)×H×W` pixel-unit flow.
    pub offsets: Tensor,
}

impl AttentionTrace {
    /// Effective sampling position of `(sample n, query q, head m, lattice k)`.
    pub fn position(&self, n: usize, q: usize, m: usize, k: usize) -> (f64, f64) {
        crate::autograd::flow_position(&self.grid, self.offsets.data(), n, self.heads, q, m, k)
    }
}

/// Pre-norm transformer block: tangent-patch attention with learnable flow,
/// then a locally-enhanced feed-forward network.
#[derive(Clone, Debug)]
pub(crate) struct AttentionBlock {
    pub name: String,
    pub heads: usize,
    pub norm1: Norm,
    pub value: Conv,
    pub logits: Conv,
    pub flow: Conv,
    pub out: Conv,
    pub norm2: Norm,
    pub expand: Conv,
    pub depthwise: Conv,
    pub project: Conv,
}

impl AttentionBlock {
    pub fn new(pb: &mut ParamBuilder, name: &str, c: usize, heads: usize, k: usize, expansion: usize) -> Self {
        let hidden = c * expansion;
        let n = |s: &str| format!("{name}.{s}");
        Self {
            name: name.to_string(),
            heads,
            norm1: Norm::new(pb, &n("norm1"), c),
            value: Conv::new(pb, &n("attn.value"), c, c, 1, ConvSpec::SAME, lecun(c)),
            logits: Conv::new(pb, &n("attn.logits"), c, heads * k, 1, ConvSpec::SAME, lecun(c)),
            flow: Conv::new(pb, &n("attn.flow"), c, 2 * heads * k, 1, ConvSpec::SAME, Init::Zeros),
            out: Conv::new(pb, &n("attn.out"), c, c, 1, ConvSpec::SAME, lecun(c)),
            norm2: Norm::new(pb, &n("norm2"), c),
            expand: Conv::new(pb, &n("ffn.expand"), c, hidden, 1, ConvSpec::SAME, he(c)),
            depthwise: Conv::new(pb, &n("ffn.depthwise"), hidden, hidden, 3, ConvSpec::depthwise(hidden), he(9)),
            project: Conv::new(pb, &n("ffn.project"), hidden, c, 1, ConvSpec::SAME, lecun(hidden)),
        }
    }

    pub fn forward(
        &self,
        g: &mut Graph,
        p: &BoundParams,
        x: Var,
        grid: &Arc<TangentPatchGrid>,
        trace: Option<&mut Vec<AttentionTrace>>,
    ) -> Result<Var> {
        let k = grid.k_samples();
        let y = g.layer_norm_channels(x, p.var(self.norm1.gamma), p.var(self.norm1.beta), LN_EPS);
        let value = self.value.forward(g, p, y);
        let logits = self.logits.forward(g, p, y);
        let weights = g.softmax_channel_groups(logits, k);
        let offsets = self.flow.forward(g, p, y);
        ensure_finite(g, offsets, &format!("{}.attn.flow", self.name))?;
        if let Some(t) = trace {
            t.push(AttentionTrace {
                block: self.name.clone(),
                heads: self.heads,
                grid: grid.clone(),
                weights: g.value(weights).clone(),
                offsets: g.value(offsets).clone(),
            });
        }
        let sampled = g.deform_sample(value, weights, offsets, grid.clone(), self.heads);
        let attn = self.out.forward(g, p, sampled);
        let x = g.add(x, attn);
        let y = g.layer_norm_channels(x, p.var(self.norm2.gamma), p.var(self.norm2.beta), LN_EPS);
        let h = self.expand.forward(g, p, y);
        let h = g.gelu(h);
        let h = self.depthwise.forward(g, p, h);
        let h = g.gelu(h);
        let h = self.project.forward(g, p, h);
        let out = g.add(x, h);
        ensure_finite(g, out, &self.name)?;
        Ok(out)
    }
}

/// Strided `3×3` convolution halving resolution and doubling channels.
#[derive(Clone, Debug)]
pub(crate) struct Downsample(pub Conv);

impl Downsample {
    pub fn new(pb: &mut ParamBuilder, name: &str, c: usize) -> Self {
        Self(Conv::new(pb, name, c, 2 * c, 3, ConvSpec::strided(2), lecun(c * 9)))
    }

    pub fn forward(&self, g: &mut Graph, p: &BoundParams, x: Var) -> Result<Var> {
        let (_, _, h, w) = g.value(x).dims4();
        if h % 2 != 0 || w % 2 != 0 {
            return Err(Error::Shape(format!("downsample needs even dimensions, got {h}x{w}")));
        }
        Ok(self.0.forward(g, p, x))
    }
}

/// Bilinear ×2 upsampling followed by a `1×1` convolution halving channels.
#[derive(Clone, Debug)]
pub(crate) struct Upsample(pub Conv);

impl Upsample {
    pub fn new(pb: &mut ParamBuilder, name: &str, c: usize) -> Self {
        Self(Conv::new(pb, name, c, c / 2, 1, ConvSpec::SAME, lecun(c)))
    }

    pub fn forward(&self, g: &mut Graph, p: &BoundParams, x: Var) -> Result<Var> {
        let (_, c, h, w) = g.value(x).dims4();
        if c % 2 != 0 {
            return Err(Error::Shape(format!("upsample needs an even channel count, got {c}")));
        }
        let up = g.resize_bilinear(x, 2 * h, 2 * w);
        Ok(self.0.forward(g, p, up))
    }
}

/// `3×3` convolution to three channels followed by `tanh`.
#[derive(Clone, Debug)]
pub(crate) struct NormalHead(pub Conv);

impl NormalHead {
    pub fn new(pb: &mut ParamBuilder, name: &str, c: usize) -> Self {
        Self(Conv::new(pb, name, c, 3, 3, ConvSpec::SAME, lecun(c * 9)))
    }

    pub fn forward(&self, g: &mut Graph, p: &BoundParams, x: Var) -> Var {
        let pre = self.0.forward(g, p, x);
        g.tanh(pre)
    }
}
