//! Training losses over multi-scale normal predictions.
//!
//! Every term takes `N×3×H×W` batches already at input resolution, reduces
//! by the mean over valid pixels and sums over scales. Each also returns its
//! gradient with respect to the predictions so the tape can splice it in.

use serde::{Deserialize, Serialize};

use crate::autograd::{ConvSpec, Graph, Var};
use crate::error::{Error, Result};
use crate::maps::{ValidMask, NORMAL_EPS};
use crate::sphere_geom::{cross, dot3, norm3};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub lambda_m: f64,
    pub lambda_q: f64,
    pub lambda_p: f64,
    pub lambda_s: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { lambda_m: 1.0, lambda_q: 10.0, lambda_p: 0.05, lambda_s: 0.5 }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [self.lambda_m, self.lambda_q, self.lambda_p, self.lambda_s];
        if all.iter().any(|w| !(*w >= 0.0) || !w.is_finite()) {
            return Err(Error::Config(format!("loss weights must be finite and >= 0: {self:?}")));
        }
        Ok(())
    }
}

/// Value and gradient of a loss with respect to one prediction batch.
#[derive(Clone, Debug)]
pub struct LossEval {
    pub value: f64,
    pub grad: Tensor,
}

fn check_pair(pred: &Tensor, gt: &Tensor, masks: &[ValidMask]) -> Result<(usize, usize, usize)> {
    if pred.shape() != gt.shape() {
        return Err(Error::Shape(format!("prediction {:?} vs ground truth {:?}", pred.shape(), gt.shape())));
    }
    let (n, c, h, w) = pred.dims4();
    if c != 3 {
        return Err(Error::Shape(format!("normal batches need 3 channels, got {c}")));
    }
    if masks.len() != n || masks.iter().any(|m| m.height() != h || m.width() != w) {
        return Err(Error::Shape("mask count or size does not match the batch".into()));
    }
    Ok((n, h, w))
}

fn valid_count(masks: &[ValidMask]) -> Result<usize> {
    let count: usize = masks.iter().map(ValidMask::count).sum();
    if count == 0 {
        return Err(Error::EmptyMask("no valid pixels in batch"));
    }
    Ok(count)
}

#[inline]
fn pixel(t: &[f64], i: usize, plane: usize, p: usize) -> [f64; 3] {
    let b = i * 3 * plane + p;
    [t[b], t[b + plane], t[b + 2 * plane]]
}

/// Mean over valid pixels and the three channels of the squared error.
pub fn mse_single(pred: &Tensor, gt: &Tensor, masks: &[ValidMask]) -> Result<LossEval> {
    let (n, h, w) = check_pair(pred, gt, masks)?;
    let count = valid_count(masks)? as f64 * 3.0;
    let plane = h * w;
    let (pd, gd) = (pred.data(), gt.data());
    let mut grad = Tensor::zeros(pred.shape());
    let mut value = 0.0;
    let gm = grad.data_mut();
    for i in 0..n {
        for (p, &ok) in masks[i].as_slice().iter().enumerate() {
            if !ok {
                continue;
            }
            for c in 0..3 {
                let idx = (i * 3 + c) * plane + p;
                let d = pd[idx] - gd[idx];
                value += d * d;
                gm[idx] = 2.0 * d / count;
            }
        }
    }
    Ok(LossEval { value: value / count, grad })
}

/// Angle `atan2(‖a×b‖, a·b)` and its gradient with respect to `a`.
pub(crate) fn angle_and_grad(a: [f64; 3], b: [f64; 3]) -> (f64, [f64; 3]) {
    let c = cross(a, b);
    let s = norm3(c);
    let d = dot3(a, b);
    let theta = s.atan2(d);
    let denom = s * s + d * d;
    if s < 1e-12 || denom == 0.0 {
        return (theta, [0.0; 3]);
    }
    // ∂s/∂a = (b × c)/s, ∂d/∂a = b.
    let bxc = cross(b, c);
    let mut g = [0.0; 3];
    for k in 0..3 {
        g[k] = (d * bxc[k] / s - s * b[k]) / denom;
    }
    (theta, g)
}

/// Normalization with the `ε` guard and its Jacobian-vector product.
fn normalize_guarded(p: [f64; 3]) -> ([f64; 3], f64) {
    let len = norm3(p).max(NORMAL_EPS);
    ([p[0] / len, p[1] / len, p[2] / len], len)
}

/// Per-pixel angle between guarded-normalized vectors.
pub fn pixel_angle(pred: [f64; 3], gt: [f64; 3]) -> f64 {
    let (a, _) = normalize_guarded(pred);
    let (b, _) = normalize_guarded(gt);
    angle_and_grad(a, b).0
}

/// Counts of pixels dropped because their ground truth has zero length.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct QuaternionStats {
    pub zero_norm_gt: usize,
}

/// Mean over valid pixels of the angle (radians) between prediction and
/// ground truth; pixels with zero-length ground truth are skipped and counted.
pub fn quaternion_single(pred: &Tensor, gt: &Tensor, masks: &[ValidMask]) -> Result<(LossEval, QuaternionStats)> {
    let (n, h, w) = check_pair(pred, gt, masks)?;
    valid_count(masks)?;
    let plane = h * w;
    let (pd, gd) = (pred.data(), gt.data());
    let mut stats = QuaternionStats::default();
    let mut pixels = Vec::new();
    for i in 0..n {
        for (p, &ok) in masks[i].as_slice().iter().enumerate() {
            if !ok {
                continue;
            }
            if norm3(pixel(gd, i, plane, p)) < NORMAL_EPS {
                stats.zero_norm_gt += 1;
                continue;
            }
            pixels.push((i, p));
        }
    }
    if pixels.is_empty() {
        return Err(Error::EmptyMask("no valid pixels with non-zero ground truth"));
    }
    let count = pixels.len() as f64;
    let mut grad = Tensor::zeros(pred.shape());
    let gm = grad.data_mut();
    let mut value = 0.0;
    for (i, p) in pixels {
        let raw = pixel(pd, i, plane, p);
        let (a, len) = normalize_guarded(raw);
        let (b, _) = normalize_guarded(pixel(gd, i, plane, p));
        let (theta, ga) = angle_and_grad(a, b);
        value += theta;
        // Chain through a = raw / max(|raw|, ε).
        let gp = if norm3(raw) > NORMAL_EPS {
            let da = dot3(ga, a);
            [(ga[0] - da * a[0]) / len, (ga[1] - da * a[1]) / len, (ga[2] - da * a[2]) / len]
        } else {
            [ga[0] / len, ga[1] / len, ga[2] / len]
        };
        for c in 0..3 {
            gm[(i * 3 + c) * plane + p] = gp[c] / count;
        }
    }
    Ok((LossEval { value: value / count, grad }, stats))
}

/// Mean over valid pixels of `|Gˣ| + |Gʸ|` (L1 over channels), where `G` is
/// the forward difference of the residual `pred − gt`. `x` differences wrap
/// across the seam; the bottom row has no `y` difference. A difference only
/// counts when both of its pixels are valid.
pub fn smooth_single(pred: &Tensor, gt: &Tensor, masks: &[ValidMask]) -> Result<LossEval> {
    let (n, h, w) = check_pair(pred, gt, masks)?;
    let count = valid_count(masks)? as f64;
    let plane = h * w;
    let (pd, gd) = (pred.data(), gt.data());
    let mut grad = Tensor::zeros(pred.shape());
    let gm = grad.data_mut();
    let mut value = 0.0;
    let sign = |x: f64| {
        if x > 0.0 {
            1.0
        } else if x < 0.0 {
            -1.0
        } else {
            0.0
        }
    };
    for i in 0..n {
        let m = &masks[i];
        for v in 0..h {
            for u in 0..w {
                if !m.is_valid(v, u) {
                    continue;
                }
                let p = v * w + u;
                let right = Some(v * w + (u + 1) % w);
                let below = (v + 1 < h).then(|| (v + 1) * w + u);
                for q in [right, below].into_iter().flatten() {
                    if !m.as_slice()[q] || q == p {
                        continue;
                    }
                    for c in 0..3 {
                        let ip = (i * 3 + c) * plane + p;
                        let iq = (i * 3 + c) * plane + q;
                        let diff = (pd[iq] - gd[iq]) - (pd[ip] - gd[ip]);
                        value += diff.abs();
                        let s = sign(diff) / count;
                        gm[iq] += s;
                        gm[ip] -= s;
                    }
                }
            }
        }
    }
    Ok(LossEval { value: value / count, grad })
}

/// Frozen, seeded convolutional feature pyramid standing in for a pretrained
/// perceptual network: three stride-2 `3×3` convolutions (16/32/64 channels)
/// with rectifiers.
#[derive(Clone, Debug)]
pub struct PerceptualExtractor {
    seed: u64,
    layers: Vec<(Tensor, Tensor)>,
}

impl PerceptualExtractor {
    pub const CHANNELS: [usize; 3] = [16, 32, 64];

    pub fn new(seed: u64) -> Self {
        use rand::SeedableRng;
        use rand_distr::{Distribution, Normal};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let mut layers = Vec::new();
        let mut cin = 3;
        for &cout in &Self::CHANNELS {
            let std = (2.0 / (cin * 9) as f64).sqrt();
            let dist = Normal::new(0.0, std).unwrap();
            let w: Vec<f64> = (0..cout * cin * 9).map(|_| dist.sample(&mut rng)).collect();
            let b: Vec<f64> = (0..cout).map(|_| 0.1 * dist.sample(&mut rng)).collect();
            layers.push((Tensor::from_vec(&[cout, cin, 3, 3], w).unwrap(), Tensor::from_vec(&[cout], b).unwrap()));
            cin = cout;
        }
        Self { seed, layers }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Feature maps of every layer for `x` placed on `graph`.
    pub fn features(&self, graph: &mut Graph, x: Var) -> Vec<Var> {
        let mut cur = x;
        let mut out = Vec::new();
        for (w, b) in &self.layers {
            let wv = graph.constant(w.clone());
            let bv = graph.constant(b.clone());
            let y = graph.conv2d(cur, wv, Some(bv), ConvSpec::strided(2));
            cur = graph.relu(y);
            out.push(cur);
        }
        out
    }

    /// Plain feature evaluation (no gradients needed).
    pub fn eval_features(&self, x: &Tensor) -> Vec<Tensor> {
        let mut g = Graph::new();
        let v = g.constant(x.clone());
        self.features(&mut g, v).into_iter().map(|f| g.value(f).clone()).collect()
    }
}

/// Adds `Σ_k 1/(C_k·M_k) ‖φ_k(pred) − φ_k(gt)‖²` to the graph, where `M_k`
/// counts the layer's pixels over the batch. Invalid pixels of `pred` are
/// replaced by ground truth first.
pub fn perceptual_on_graph(
    graph: &mut Graph,
    pred: Var,
    gt: &Tensor,
    masks: &[ValidMask],
    phi: &PerceptualExtractor,
) -> Result<Var> {
    check_pair(graph.value(pred), gt, masks)?;
    let keep: Vec<bool> = masks.iter().flat_map(|m| m.as_slice().iter().copied()).collect();
    let filled = if keep.iter().all(|&k| k) { pred } else { graph.select_pixels(pred, gt, &keep) };
    let targets = phi.eval_features(gt);
    let feats = phi.features(graph, filled);
    let mut terms = Vec::new();
    for (f, t) in feats.into_iter().zip(targets) {
        let fv = graph.value(f);
        let (n, c, h, w) = fv.dims4();
        let scale = 1.0 / (c * n * h * w) as f64;
        let mut grad = Tensor::zeros(fv.shape());
        let mut value = 0.0;
        for ((g, a), b) in grad.data_mut().iter_mut().zip(fv.data()).zip(t.data()) {
            let d = a - b;
            value += d * d;
            *g = 2.0 * d * scale;
        }
        terms.push((graph.scalar_with_grad(f, value * scale, grad), 1.0));
    }
    Ok(graph.linear_combination(&terms))
}

/// Perceptual loss between two finest-scale batches, with its gradient.
pub fn perceptual_single(
    pred: &Tensor,
    gt: &Tensor,
    masks: &[ValidMask],
    phi: &PerceptualExtractor,
) -> Result<LossEval> {
    let mut g = Graph::new();
    let p = g.leaf(pred.clone());
    let l = perceptual_on_graph(&mut g, p, gt, masks, phi)?;
    let value = g.value(l).item();
    let grads = g.backward(l);
    let grad = grads.get(p).cloned().unwrap_or_else(|| Tensor::zeros(pred.shape()));
    Ok(LossEval { value, grad })
}

fn sum_over_scales(
    preds: &[Tensor],
    gt: &Tensor,
    masks: &[ValidMask],
    f: impl Fn(&Tensor, &Tensor, &[ValidMask]) -> Result<f64>,
) -> Result<f64> {
    if preds.is_empty() {
        return Err(Error::InvalidInput("no prediction scales".into()));
    }
    preds.iter().map(|p| f(p, gt, masks)).sum()
}

/// `L_m` summed over scales. All scales are compared at input resolution.
pub fn mse_loss(preds: &[Tensor], gt: &Tensor, masks: &[ValidMask]) -> Result<f64> {
    sum_over_scales(preds, gt, masks, |p, g, m| Ok(mse_single(p, g, m)?.value))
}

/// `L_q` summed over scales, radians.
pub fn quaternion_loss(preds: &[Tensor], gt: &Tensor, masks: &[ValidMask]) -> Result<f64> {
    sum_over_scales(preds, gt, masks, |p, g, m| Ok(quaternion_single(p, g, m)?.0.value))
}

/// `L_s` summed over scales.
pub fn smooth_loss(preds: &[Tensor], gt: &Tensor, masks: &[ValidMask]) -> Result<f64> {
    sum_over_scales(preds, gt, masks, |p, g, m| Ok(smooth_single(p, g, m)?.value))
}

/// `L_p` on the finest scale only.
pub fn perceptual_loss(
    pred_finest: &Tensor,
    gt: &Tensor,
    masks: &[ValidMask],
    phi: &PerceptualExtractor,
) -> Result<f64> {
    Ok(perceptual_single(pred_finest, gt, masks, phi)?.value)
}

/// Individual loss terms and their weighted total.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub mse: f64,
    pub quaternion: f64,
    pub perceptual: f64,
    pub smooth: f64,
    pub total: f64,
}

/// Which scales receive the per-scale terms (`L_m`, `L_q`, `L_s`).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Supervision {
    AllScales,
    FinestOnly,
}

/// Builds the weighted total loss on `graph` from upsampled predictions
/// (coarse → fine, all at input resolution). Terms with zero weight are
/// skipped entirely and reported as `0`.
pub fn total_loss_on_graph(
    graph: &mut Graph,
    preds: &[Var],
    gt: &Tensor,
    masks: &[ValidMask],
    weights: &LossWeights,
    phi: &PerceptualExtractor,
    supervision: Supervision,
) -> Result<(Var, LossBreakdown)> {
    let finest = *preds.last().ok_or_else(|| Error::InvalidInput("no prediction scales".into()))?;
    let supervised: Vec<Var> = match supervision {
        Supervision::AllScales => preds.to_vec(),
        Supervision::FinestOnly => vec![finest],
    };
    let mut terms = Vec::new();
    let mut bd = LossBreakdown::default();
    for &p in &supervised {
        let pv = graph.value(p).clone();
        if weights.lambda_m > 0.0 {
            let e = mse_single(&pv, gt, masks)?;
            bd.mse += e.value;
            terms.push((graph.scalar_with_grad(p, e.value, e.grad), weights.lambda_m));
        }
        if weights.lambda_q > 0.0 {
            let (e, _) = quaternion_single(&pv, gt, masks)?;
            bd.quaternion += e.value;
            terms.push((graph.scalar_with_grad(p, e.value, e.grad), weights.lambda_q));
        }
        if weights.lambda_s > 0.0 {
            let e = smooth_single(&pv, gt, masks)?;
            bd.smooth += e.value;
            terms.push((graph.scalar_with_grad(p, e.value, e.grad), weights.lambda_s));
        }
    }
    if weights.lambda_p > 0.0 {
        let l = perceptual_on_graph(graph, finest, gt, masks, phi)?;
        bd.perceptual = graph.value(l).item();
        terms.push((l, weights.lambda_p));
    }
    bd.total = weights.lambda_m * bd.mse
        + weights.lambda_q * bd.quaternion
        + weights.lambda_p * bd.perceptual
        + weights.lambda_s * bd.smooth;
    if terms.is_empty() {
        let z = graph.constant(Tensor::scalar(0.0));
        return Ok((z, bd));
    }
    let total = graph.linear_combination(&terms);
    Ok((total, bd))
}

/// Weighted total of all four terms with the per-term breakdown.
pub fn total_loss(
    preds: &[Tensor],
    gt: &Tensor,
    masks: &[ValidMask],
    weights: &LossWeights,
    phi: &PerceptualExtractor,
) -> Result<LossBreakdown> {
    let mut g = Graph::new();
    let vars: Vec<Var> = preds.iter().map(|p| g.constant(p.clone())).collect();
    let (_, bd) = total_loss_on_graph(&mut g, &vars, gt, masks, weights, phi, Supervision::AllScales)?;
    Ok(bd)
}
