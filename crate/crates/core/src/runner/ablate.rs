//! Component and loss-term ablations under a shared budget.

use std::fmt;
use std::str::FromStr;

use super::config::TrainConfig;
use super::eval::evaluate_model;
use super::train::Trainer;
use crate::error::{Error, Result};
use crate::losses::Supervision;
use crate::metrics::MetricReport;
use crate::net::EmbedKind;
use crate::synthdata::{Dataset, Sample, Split};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Component {
    /// Single-convolution embedding, finest head supervised only.
    Baseline,
    /// Single-convolution embedding, every decoder head supervised.
    Decoder,
    /// Convolution-stack embedding, every decoder head supervised.
    DecoderEmbed,
    /// Convolution-stack embedding, finest head supervised only.
    FinestOnly,
}

/// A component variant plus the loss terms left switched on.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Variant {
    pub component: Component,
    /// `[L_m, L_q, L_p, L_s]` enabled flags.
    pub terms: [bool; 4],
}

impl FromStr for Variant {
    type Err = Error;

    /// `baseline`, `+decoder`, `+decoder+embed` (alias `full`) or
    /// `finest-only`, optionally followed by `/` and a subset of `mqps`.
    fn from_str(s: &str) -> Result<Self> {
        let (name, terms) = match s.split_once('/') {
            Some((n, t)) => (n, Some(t)),
            None => (s, None),
        };
        let component = match name.trim() {
            "baseline" => Component::Baseline,
            "+decoder" => Component::Decoder,
            "+decoder+embed" | "full" => Component::DecoderEmbed,
            "finest-only" => Component::FinestOnly,
            other => return Err(Error::Config(format!("unknown ablation variant {other:?}"))),
        };
        let terms = match terms {
            None => [true; 4],
            Some(t) => {
                if t.is_empty() || t.chars().any(|c| !"mqps".contains(c)) {
                    return Err(Error::Config(format!("loss terms {t:?} must be a non-empty subset of mqps")));
                }
                ['m', 'q', 'p', 's'].map(|c| t.contains(c))
            }
        };
        Ok(Self { component, terms })
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let name = match self.component {
            Component::Baseline => "baseline",
            Component::Decoder => "+decoder",
            Component::DecoderEmbed => "+decoder+embed",
            Component::FinestOnly => "finest-only",
        };
        write!(f, "{name}")?;
        if self.terms != [true; 4] {
            let t: String =
                ['m', 'q', 'p', 's'].iter().zip(self.terms).filter(|(_, on)| *on).map(|(c, _)| *c).collect();
            write!(f, "/{t}")?;
        }
        Ok(())
    }
}

impl Variant {
    pub fn apply(&self, base: &TrainConfig) -> TrainConfig {
        let mut cfg = base.clone();
        let (embed, supervision) = match self.component {
            Component::Baseline => (EmbedKind::Single, Supervision::FinestOnly),
            Component::Decoder => (EmbedKind::Single, Supervision::AllScales),
            Component::DecoderEmbed => (EmbedKind::ConvStack, Supervision::AllScales),
            Component::FinestOnly => (EmbedKind::ConvStack, Supervision::FinestOnly),
        };
        cfg.model.embed = embed;
        cfg.supervision = supervision;
        let w = &mut cfg.loss;
        for (on, lambda) in self.terms.iter().zip([&mut w.lambda_m, &mut w.lambda_q, &mut w.lambda_p, &mut w.lambda_s])
        {
            if !on {
                *lambda = 0.0;
            }
        }
        // each variant writes its own checkpoints
        cfg.out = base.out.as_ref().map(|d| d.join(self.to_string().replace(['+', '/'], "_")));
        cfg
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationRow {
    pub variant: Variant,
    pub steps: usize,
    pub report: MetricReport,
}

/// Table rows: variant, Mean, Median, MSE, then the δ accuracies in percent.
pub fn format_table(rows: &[AblationRow]) -> String {
    let mut out = format!(
        "{:<20} {:>9} {:>9} {:>10} {:>7} {:>7} {:>7} {:>7} {:>7}\n",
        "Variant", "Mean", "Median", "MSE", "<5", "<7.5", "<11.5", "<22.5", "<30"
    );
    for r in rows {
        let m = &r.report;
        out.push_str(&format!(
            "{:<20} {:>9.4} {:>9.4} {:>10.4} {:>7.2} {:>7.2} {:>7.2} {:>7.2} {:>7.2}\n",
            r.variant.to_string(),
            m.mean_deg,
            m.median_deg,
            m.mse_deg2,
            100.0 * m.delta[0],
            100.0 * m.delta[1],
            100.0 * m.delta[2],
            100.0 * m.delta[3],
            100.0 * m.delta[4]
        ));
    }
    out
}

/// Trains each variant from the same seed under the same budget and reports
/// its best-on-validation model on the validation split.
pub fn ablate_samples(
    base: &TrainConfig,
    variants: &[Variant],
    train: &[Sample],
    val: &[Sample],
) -> Result<Vec<AblationRow>> {
    variants
        .iter()
        .map(|v| {
            let mut t = Trainer::from_samples(v.apply(base), train.to_vec(), val.to_vec())?;
            t.run()?;
            let (report, _) = evaluate_model(t.best_model(), val)?;
            Ok(AblationRow { variant: *v, steps: t.state().step, report })
        })
        .collect()
}

pub fn ablate(base: &TrainConfig, variants: &[Variant]) -> Result<Vec<AblationRow>> {
    let ds = Dataset::open(&base.data)?;
    ablate_samples(base, variants, &ds.load_split(Split::Train)?, &ds.load_split(Split::Val)?)
}
