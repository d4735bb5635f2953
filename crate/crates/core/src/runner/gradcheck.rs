//! Finite-difference verification of the full training gradient.

use std::fmt;

use super::config::TrainConfig;
use super::train::{loss_and_grads, Batch};
use crate::autograd::Graph;
use crate::error::{Error, Result};
use crate::losses::{total_loss_on_graph, LossWeights, PerceptualExtractor, Supervision};
use crate::net::{Mode, Model};
use crate::sphere_geom::ErpGridSpec;
use crate::synthdata::{render_scene, Sample, SceneSpec};

pub const DEFAULT_STEP: f64 = 1e-5;
pub const DEFAULT_THRESHOLD: f64 = 1e-3;
/// Largest map (pixels) the harness accepts.
const MAX_PIXELS: usize = 8 * 16;
/// Group norms below this are treated as an exact zero gradient; central
/// differences at `h = 1e-5` carry roundoff of about `1e-10` per element.
const ZERO_GRAD: f64 = 1e-8;

#[derive(Clone, Debug, PartialEq)]
pub struct GroupCheck {
    pub name: String,
    pub numel: usize,
    pub analytic_norm: f64,
    pub numeric_norm: f64,
    /// `‖g_a − g_n‖ / max(‖g_a‖, ‖g_n‖)`, zero when both vanish.
    pub rel_error: f64,
    /// Elements whose difference straddled a kink and were re-measured with
    /// a step ten times smaller.
    pub refined: usize,
    pub passed: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradcheckReport {
    pub step: f64,
    pub threshold: f64,
    pub groups: Vec<GroupCheck>,
}

impl GradcheckReport {
    pub fn pass_fraction(&self) -> f64 {
        self.groups.iter().filter(|g| g.passed).count() as f64 / self.groups.len().max(1) as f64
    }

    pub fn all_passed(&self) -> bool {
        self.groups.iter().all(|g| g.passed)
    }
}

impl fmt::Display for GradcheckReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for g in &self.groups {
            writeln!(
                f,
                "{} {:<32} n={:<6} rel={:.3e} |analytic|={:.3e} |numeric|={:.3e} refined={}",
                if g.passed { "PASS" } else { "FAIL" },
                g.name,
                g.numel,
                g.rel_error,
                g.analytic_norm,
                g.numeric_norm,
                g.refined
            )?;
        }
        write!(
            f,
            "{}/{} groups within {:.0e} (h = {:.0e})",
            self.groups.iter().filter(|g| g.passed).count(),
            self.groups.len(),
            self.threshold,
            self.step
        )
    }
}

fn loss_value(
    model: &Model,
    batch: &Batch,
    weights: &LossWeights,
    phi: &PerceptualExtractor,
    supervision: Supervision,
) -> Result<f64> {
    let mut g = Graph::new();
    let p = model.params().bind(&mut g, false);
    let x = g.constant(batch.rgb.clone());
    let out = model.forward_graph(&mut g, &p, x, Mode::Train, false)?;
    let (h, w) = (model.config().height, model.config().width);
    let mut preds = Vec::new();
    for &m in &out.maps {
        let (_, _, mh, mw) = g.value(m).dims4();
        preds.push(if (mh, mw) == (h, w) { m } else { g.resize_bilinear(m, h, w) });
    }
    let (_, bd) = total_loss_on_graph(&mut g, &preds, &batch.gt, &batch.masks, weights, phi, supervision)?;
    Ok(bd.total)
}

/// Compares tape gradients of the total loss with central differences for
/// every parameter tensor. `corrupt = Some((group, factor))` scales one
/// analytic gradient first, to exercise the harness itself.
///
/// ReLU makes the loss piecewise smooth. When an element disagrees and its
/// two one-sided differences differ by more than the threshold, the step
/// crossed a kink and the element is measured again with `step / 10`.
pub fn gradcheck_model(
    model: &Model,
    batch: &Batch,
    weights: &LossWeights,
    phi: &PerceptualExtractor,
    supervision: Supervision,
    step: f64,
    threshold: f64,
    corrupt: Option<(usize, f64)>,
) -> Result<GradcheckReport> {
    let (_, mut grads, _) = loss_and_grads(model, batch, weights, phi, supervision)?;
    if let Some((i, factor)) = corrupt {
        for x in grads[i].data_mut() {
            *x *= factor;
        }
    }
    let mut probe = model.clone();
    let base = loss_value(model, batch, weights, phi, supervision)?;
    let mut groups = Vec::new();
    for (i, analytic) in grads.iter().enumerate() {
        let name = model.params().by_index(i).name.clone();
        let n = analytic.numel();
        let (mut diff, mut na, mut nn, mut refined) = (0.0, 0.0, 0.0, 0);
        for j in 0..n {
            let orig = probe.params().by_index(i).value.data()[j];
            let a = analytic.data()[j];
            let mut eval_at = |x: f64| -> Result<f64> {
                probe.params_mut().value_mut(i).data_mut()[j] = x;
                let l = loss_value(&probe, batch, weights, phi, supervision);
                probe.params_mut().value_mut(i).data_mut()[j] = orig;
                l
            };
            let (plus, minus) = (eval_at(orig + step)?, eval_at(orig - step)?);
            let mut numeric = (plus - minus) / (2.0 * step);
            let disagrees = |num: f64| (a - num).abs() > threshold * a.abs().max(num.abs()).max(ZERO_GRAD);
            if disagrees(numeric) {
                let (fwd, bwd) = ((plus - base) / step, (base - minus) / step);
                if (fwd - bwd).abs() > threshold * fwd.abs().max(bwd.abs()).max(ZERO_GRAD) {
                    let h = step / 10.0;
                    numeric = (eval_at(orig + h)? - eval_at(orig - h)?) / (2.0 * h);
                    refined += 1;
                }
            }
            diff += (a - numeric).powi(2);
            na += a * a;
            nn += numeric * numeric;
        }
        let (na, nn, diff) = (na.sqrt(), nn.sqrt(), diff.sqrt());
        let scale = na.max(nn);
        let rel_error = if scale < ZERO_GRAD { 0.0 } else { diff / scale };
        groups.push(GroupCheck {
            name,
            numel: n,
            analytic_norm: na,
            numeric_norm: nn,
            rel_error,
            refined,
            passed: rel_error <= threshold,
        });
    }
    Ok(GradcheckReport { step, threshold, groups })
}

/// Two rendered scenes at the model's resolution.
pub fn gradcheck_samples(cfg: &TrainConfig) -> Result<Vec<Sample>> {
    let grid = ErpGridSpec::with_dims(cfg.model.height, cfg.model.width)?;
    (0..2)
        .map(|i| {
            let r = render_scene(&SceneSpec::random(cfg.seed.wrapping_add(i)), &grid)?;
            Ok(Sample { name: format!("scene{i}"), rgb: r.rgb, normal: r.normal, depth: r.depth, mask: r.mask })
        })
        .collect()
}

/// Runs the harness on a freshly initialized model of `cfg`.
pub fn gradcheck(cfg: &TrainConfig) -> Result<GradcheckReport> {
    cfg.validate()?;
    if cfg.model.height * cfg.model.width > MAX_PIXELS {
        return Err(Error::Config(format!(
            "gradcheck needs a map of at most 8x16, got {}x{}",
            cfg.model.height, cfg.model.width
        )));
    }
    let model = Model::new(cfg.model.clone(), cfg.seed)?;
    let samples = gradcheck_samples(cfg)?;
    let refs: Vec<&Sample> = samples.iter().collect();
    let batch = Batch::new(&refs)?;
    let phi = PerceptualExtractor::new(cfg.perceptual_seed);
    gradcheck_model(&model, &batch, &cfg.loss, &phi, cfg.supervision, DEFAULT_STEP, DEFAULT_THRESHOLD, None)
}
