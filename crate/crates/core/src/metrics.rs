//! Angular error metrics for normal maps.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::maps::{NormalMap, ValidMask, NORMAL_EPS};
use crate::sphere_geom::norm3;

/// Accuracy thresholds in degrees.
pub const DELTA_THRESHOLDS: [f64; 5] = [5.0, 7.5, 11.5, 22.5, 30.0];

pub const CSV_HEADER: &str = "Mean,Median,MSE,d5,d7.5,d11.5,d22.5,d30,valid_pixels";

/// Per-pixel angular error in degrees; `None` where there is no ground truth.
#[derive(Clone, Debug, PartialEq)]
pub struct ErrorMap {
    height: usize,
    width: usize,
    errors: Vec<Option<f64>>,
}

impl ErrorMap {
    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn get(&self, v: usize, u: usize) -> Option<f64> {
        self.errors[v * self.width + u]
    }

    pub fn errors(&self) -> &[Option<f64>] {
        &self.errors
    }

    pub fn valid(&self) -> impl Iterator<Item = f64> + '_ {
        self.errors.iter().flatten().copied()
    }
}

/// Angle between two vectors in degrees, in `[0, 180]`.
///
/// A prediction shorter than the normalization guard carries no direction
/// and scores 90°.
pub fn angle_deg(pred: [f64; 3], gt: [f64; 3]) -> f64 {
    if norm3(pred) < NORMAL_EPS {
        return 90.0;
    }
    crate::losses::pixel_angle(pred, gt).to_degrees()
}

pub fn angular_error_map(pred: &NormalMap, gt: &NormalMap, mask: &ValidMask) -> Result<ErrorMap> {
    let (h, w) = (gt.height(), gt.width());
    if (pred.height(), pred.width()) != (h, w) || (mask.height(), mask.width()) != (h, w) {
        return Err(Error::Shape(format!(
            "prediction {}x{}, ground truth {h}x{w}, mask {}x{}",
            pred.height(),
            pred.width(),
            mask.height(),
            mask.width()
        )));
    }
    let mut errors = Vec::with_capacity(h * w);
    for v in 0..h {
        for u in 0..w {
            let g = gt.get(v, u);
            if !mask.is_valid(v, u) || norm3(g) < NORMAL_EPS {
                errors.push(None);
            } else {
                errors.push(Some(angle_deg(pred.get(v, u), g)));
            }
        }
    }
    Ok(ErrorMap { height: h, width: w, errors })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub mean_deg: f64,
    pub median_deg: f64,
    pub mse_deg2: f64,
    /// Fractions of valid pixels with error below each of [`DELTA_THRESHOLDS`].
    pub delta: [f64; 5],
    pub valid_pixel_count: usize,
}

/// Median with the midpoint convention for even counts; sorts in place.
pub(crate) fn median(values: &mut [f64]) -> f64 {
    values.sort_by(f64::total_cmp);
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

/// Pools every valid pixel of every map into one report.
pub fn aggregate(maps: &[ErrorMap]) -> Result<MetricReport> {
    let mut all: Vec<f64> = maps.iter().flat_map(|m| m.valid()).collect();
    if all.is_empty() {
        return Err(Error::EmptyMask("no valid pixels to aggregate"));
    }
    let n = all.len() as f64;
    let mut sum = 0.0;
    let mut sum_sq = 0.0;
    let mut below = [0usize; 5];
    for &e in &all {
        sum += e;
        sum_sq += e * e;
        for (b, t) in below.iter_mut().zip(DELTA_THRESHOLDS) {
            *b += usize::from(e < t);
        }
    }
    let valid_pixel_count = all.len();
    Ok(MetricReport {
        mean_deg: sum / n,
        median_deg: median(&mut all),
        mse_deg2: sum_sq / n,
        delta: below.map(|b| b as f64 / n),
        valid_pixel_count,
    })
}

impl MetricReport {
    pub fn to_csv(&self) -> String {
        let d = self.delta;
        format!(
            "{CSV_HEADER}\n{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{}\n",
            self.mean_deg, self.median_deg, self.mse_deg2, d[0], d[1], d[2], d[3], d[4], self.valid_pixel_count
        )
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        let bad = |msg: &str| Error::InvalidInput(format!("metric CSV: {msg}"));
        if lines.next().map(str::trim) != Some(CSV_HEADER) {
            return Err(bad("unexpected header"));
        }
        let row = lines.next().ok_or_else(|| bad("missing row"))?;
        let cells: Vec<&str> = row.trim().split(',').collect();
        if cells.len() != 9 {
            return Err(bad("expected 9 columns"));
        }
        let num = |s: &str| s.parse::<f64>().map_err(|_| bad("bad number"));
        Ok(Self {
            mean_deg: num(cells[0])?,
            median_deg: num(cells[1])?,
            mse_deg2: num(cells[2])?,
            delta: [num(cells[3])?, num(cells[4])?, num(cells[5])?, num(cells[6])?, num(cells[7])?],
            valid_pixel_count: cells[8].parse().map_err(|_| bad("bad pixel count"))?,
        })
    }
}

impl fmt::Display for MetricReport {
    /// Error metrics then accuracies in percent, Table-style column order.
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(
            f,
            "{:>10} {:>10} {:>12} {:>8} {:>8} {:>8} {:>8} {:>8}",
            "Mean", "Median", "MSE", "<5°", "<7.5°", "<11.5°", "<22.5°", "<30°"
        )?;
        write!(
            f,
            "{:>10.4} {:>10.4} {:>12.4} {:>8.2} {:>8.2} {:>8.2} {:>8.2} {:>8.2}",
            self.mean_deg,
            self.median_deg,
            self.mse_deg2,
            100.0 * self.delta[0],
            100.0 * self.delta[1],
            100.0 * self.delta[2],
            100.0 * self.delta[3],
            100.0 * self.delta[4]
        )
    }
}

/// Improvement of `a` over a reference `b`: percent for error metrics,
/// percentage points for accuracies.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Improvement {
    pub mean_pct: f64,
    pub median_pct: f64,
    pub mse_pct: f64,
    pub delta_points: [f64; 5],
}

pub fn compare_reports(a: &MetricReport, b: &MetricReport) -> Result<Improvement> {
    let pct = |x: f64, y: f64, name: &str| {
        if y == 0.0 {
            Err(Error::InvalidInput(format!("reference {name} is zero")))
        } else {
            Ok((y - x) / y * 100.0)
        }
    };
    let mut delta_points = [0.0; 5];
    for i in 0..5 {
        delta_points[i] = (a.delta[i] - b.delta[i]) * 100.0;
    }
    Ok(Improvement {
        mean_pct: pct(a.mean_deg, b.mean_deg, "mean")?,
        median_pct: pct(a.median_deg, b.median_deg, "median")?,
        mse_pct: pct(a.mse_deg2, b.mse_deg2, "MSE")?,
        delta_points,
    })
}
