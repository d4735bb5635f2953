//! Evaluation and single-image prediction.

use std::fs;
use std::path::{Path, PathBuf};

use image::{ImageBuffer, Rgb};

use super::checkpoint::load_model;
use crate::error::{Error, Result};
use crate::maps::NormalMap;
use crate::metrics::{aggregate, angular_error_map, ErrorMap, MetricReport};
use crate::net::Model;
use crate::synthdata::{load_rgb, save_normals, Dataset, Sample, Split};
use crate::tensor::{FeatureMap, Tensor};

/// Finest-scale prediction for one `3×H×W` image.
pub fn predict_map(model: &Model, rgb: &FeatureMap) -> Result<NormalMap> {
    let x = Tensor::stack(&[rgb])?;
    NormalMap::from_feature_map(model.predict_finest(&x)?.sample(0))
}

/// Pooled report of `preds[i]` against `samples[i]`.
pub fn evaluate_predictions(preds: &[NormalMap], samples: &[Sample]) -> Result<(MetricReport, Vec<ErrorMap>)> {
    if preds.len() != samples.len() {
        return Err(Error::InvalidInput(format!("{} predictions for {} samples", preds.len(), samples.len())));
    }
    let maps =
        preds.iter().zip(samples).map(|(p, s)| angular_error_map(p, &s.normal, &s.mask)).collect::<Result<Vec<_>>>()?;
    Ok((aggregate(&maps)?, maps))
}

pub fn evaluate_model(model: &Model, samples: &[Sample]) -> Result<(MetricReport, Vec<ErrorMap>)> {
    let (h, w) = (model.config().height, model.config().width);
    let preds = samples
        .iter()
        .map(|s| {
            if (s.rgb.height(), s.rgb.width()) != (h, w) {
                return Err(Error::Shape(format!(
                    "sample {} is {}x{}, checkpoint expects {h}x{w}",
                    s.name,
                    s.rgb.height(),
                    s.rgb.width()
                )));
            }
            predict_map(model, &s.rgb)
        })
        .collect::<Result<Vec<_>>>()?;
    evaluate_predictions(&preds, samples)
}

/// Evaluates a checkpoint on one split (every sample when `split` is
/// `None`) and writes the CSV report to `out`.
pub fn evaluate(ckpt: &Path, data: &Path, split: Option<Split>, out: &Path) -> Result<MetricReport> {
    let model = load_model(ckpt)?;
    let ds = Dataset::open(data)?;
    let (h, w) = (ds.grid().height(), ds.grid().width());
    if (h, w) != (model.config().height, model.config().width) {
        return Err(Error::Shape(format!(
            "dataset is {h}x{w}, checkpoint expects {}x{}",
            model.config().height,
            model.config().width
        )));
    }
    let samples = match split {
        Some(s) => ds.load_split(s)?,
        None => (0..ds.manifest().samples.len()).map(|i| ds.load(i)).collect::<Result<_>>()?,
    };
    let (report, _) = evaluate_model(&model, &samples)?;
    fs::write(out, report.to_csv()).map_err(|e| Error::io(out, e))?;
    Ok(report)
}

/// Colour code `round((n̂ + 1) / 2 · 255)` of the normalized vector.
pub fn encode_visual(n: [f64; 3]) -> [u8; 3] {
    let len = (n[0] * n[0] + n[1] * n[1] + n[2] * n[2]).sqrt();
    let unit = if len > 1e-12 { n.map(|c| c / len) } else { [0.0; 3] };
    unit.map(|c| ((c + 1.0) / 2.0 * 255.0).round().clamp(0.0, 255.0) as u8)
}

pub fn decode_visual(px: [u8; 3]) -> [f64; 3] {
    px.map(|c| c as f64 / 255.0 * 2.0 - 1.0)
}

pub fn save_visual(map: &NormalMap, path: &Path) -> Result<()> {
    let img = ImageBuffer::from_fn(map.width() as u32, map.height() as u32, |u, v| {
        Rgb(encode_visual(map.get(v as usize, u as usize)))
    });
    img.save(path).map_err(|e| Error::Image { path: path.to_path_buf(), source: e })
}

/// Result of [`predict`]: written files and whether the input was resampled.
#[derive(Clone, Debug)]
pub struct Prediction {
    pub normal_path: PathBuf,
    pub visual_path: PathBuf,
    pub resampled: bool,
}

/// Bilinear resample of an image to `h×w` (longitude wrapped).
fn resample(rgb: &FeatureMap, h: usize, w: usize) -> FeatureMap {
    let mut g = crate::autograd::Graph::new();
    let x = g.constant(Tensor::stack(&[rgb]).expect("one map"));
    let y = g.resize_bilinear(x, h, w);
    g.value(y).sample(0)
}

/// Writes `normal.png` (16-bit encoding) and `normal_vis.png` under `out`.
pub fn predict(ckpt: &Path, image: &Path, out: &Path) -> Result<Prediction> {
    let model = load_model(ckpt)?;
    let mut rgb = load_rgb(image)?;
    let (h, w) = (model.config().height, model.config().width);
    let resampled = (rgb.height(), rgb.width()) != (h, w);
    if resampled {
        rgb = resample(&rgb, h, w);
    }
    let map = predict_map(&model, &rgb)?.normalized();
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let normal_path = out.join("normal.png");
    let visual_path = out.join("normal_vis.png");
    save_normals(&map, &normal_path)?;
    save_visual(&map, &visual_path)?;
    Ok(Prediction { normal_path, visual_path, resampled })
}
