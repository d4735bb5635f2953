//! Normals from depth by averaging randomly sampled local triangles.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::maps::{DepthMap, NormalMap, ValidMask};
use crate::sphere_geom::{cross, dot3, erp_pixel_to_dir, norm3, ErpGridSpec};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct D2NConfig {
    pub num_triangles: usize,
    /// Neighbour offsets are drawn from `[−r, r]²` pixels.
    pub neighborhood_radius: usize,
    pub seed: u64,
}

impl Default for D2NConfig {
    fn default() -> Self {
        Self { num_triangles: 8, neighborhood_radius: 2, seed: 0 }
    }
}

impl D2NConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_triangles == 0 || self.neighborhood_radius == 0 {
            return Err(Error::Config("d2n needs at least one triangle and radius >= 1".into()));
        }
        Ok(())
    }
}

fn check_dims(depth: &DepthMap, grid: &ErpGridSpec) -> Result<()> {
    if (depth.height(), depth.width()) != (grid.height(), grid.width()) {
        return Err(Error::Shape(format!(
            "depth {}x{} vs grid {}x{}",
            depth.height(),
            depth.width(),
            grid.height(),
            grid.width()
        )));
    }
    Ok(())
}

/// `p(u, v) = depth(u, v) · dir(u, v)`, row-major.
pub fn backproject(depth: &DepthMap, grid: &ErpGridSpec) -> Result<Vec<[f64; 3]>> {
    check_dims(depth, grid)?;
    let w = grid.width();
    Ok((0..grid.num_pixels())
        .map(|i| {
            let d = erp_pixel_to_dir((i % w) as f64, (i / w) as f64, grid).as_array();
            d.map(|c| c * depth.values()[i])
        })
        .collect())
}

fn usable(depth: &DepthMap, mask: &ValidMask, v: usize, u: usize) -> bool {
    let d = depth.get(v, u);
    mask.is_valid(v, u) && d > 0.0 && d.is_finite()
}

/// Cross-product normal of `(a, b, c)` turned toward the camera at the
/// origin; its length is twice the triangle area.
fn facing_normal(a: [f64; 3], b: [f64; 3], c: [f64; 3]) -> Option<[f64; 3]> {
    let e1 = [b[0] - a[0], b[1] - a[1], b[2] - a[2]];
    let e2 = [c[0] - a[0], c[1] - a[1], c[2] - a[2]];
    let n = cross(e1, e2);
    if norm3(n) <= 1e-12 * norm3(e1) * norm3(e2) {
        return None;
    }
    let s = if dot3(n, a) > 0.0 { -1.0 } else { 1.0 };
    Some(n.map(|x| s * x))
}

/// Per pixel, averages the camera-facing cross-product normals of
/// `num_triangles` random triangles (the pixel plus two neighbours not
/// collinear with it in the image), area-weighted, then normalizes. Pixels without a usable
/// triangle come back invalid.
pub fn depth_to_normal(
    depth: &DepthMap,
    grid: &ErpGridSpec,
    cfg: &D2NConfig,
    mask: &ValidMask,
) -> Result<(NormalMap, ValidMask)> {
    cfg.validate()?;
    let points = backproject(depth, grid)?;
    let (h, w) = (grid.height(), grid.width());
    let r = cfg.neighborhood_radius as i64;
    let mut out = NormalMap::zeros(h, w);
    let mut valid = ValidMask::from_vec(h, w, vec![false; h * w])?;
    let neighbour = |rng: &mut ChaCha8Rng, v: usize, u: usize| -> (i64, i64) {
        loop {
            let dv = rng.random_range(-r..=r);
            let du = rng.random_range(-r..=r);
            if (dv, du) != (0, 0) {
                return (v as i64 + dv, u as i64 + du);
            }
        }
    };
    for v in 0..h {
        for u in 0..w {
            if !usable(depth, mask, v, u) {
                continue;
            }
            let idx = v * w + u;
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ idx as u64);
            let p0 = points[idx];
            let mut sum = [0.0; 3];
            let mut count = 0;
            for _ in 0..cfg.num_triangles {
                let a = neighbour(&mut rng, v, u);
                // pixel-collinear picks span no area on a plane and fold the
                // sphere's curvature into a sliver, so redraw them
                let b = loop {
                    let b = neighbour(&mut rng, v, u);
                    let (av, au) = (a.0 - v as i64, a.1 - u as i64);
                    let (bv, bu) = (b.0 - v as i64, b.1 - u as i64);
                    if av * bu != au * bv {
                        break b;
                    }
                };
                let resolve = |(vv, uu): (i64, i64)| {
                    if vv < 0 || vv >= h as i64 {
                        return None;
                    }
                    let (vv, uu) = (vv as usize, uu.rem_euclid(w as i64) as usize);
                    usable(depth, mask, vv, uu).then(|| points[vv * w + uu])
                };
                let (Some(pa), Some(pb)) = (resolve(a), resolve(b)) else { continue };
                if let Some(n) = facing_normal(p0, pa, pb) {
                    for c in 0..3 {
                        sum[c] += n[c];
                    }
                    count += 1;
                }
            }
            let len = norm3(sum);
            if count > 0 && len > 1e-12 {
                out.set(v, u, sum.map(|c| c / len));
                valid.set(v, u, true);
            }
        }
    }
    Ok((out, valid))
}

/// Central-difference normals `(p(u+1) − p(u−1)) × (p(v+1) − p(v−1))`,
/// longitude wrapped; the first and last rows are left invalid.
pub fn central_difference_normals(
    depth: &DepthMap,
    grid: &ErpGridSpec,
    mask: &ValidMask,
) -> Result<(NormalMap, ValidMask)> {
    let points = backproject(depth, grid)?;
    let (h, w) = (grid.height(), grid.width());
    let mut out = NormalMap::zeros(h, w);
    let mut valid = ValidMask::from_vec(h, w, vec![false; h * w])?;
    for v in 1..h.saturating_sub(1) {
        for u in 0..w {
            let (ul, ur) = ((u + w - 1) % w, (u + 1) % w);
            let taps = [(v, u), (v, ul), (v, ur), (v - 1, u), (v + 1, u)];
            if taps.iter().any(|&(vv, uu)| !usable(depth, mask, vv, uu)) {
                continue;
            }
            let p = |vv: usize, uu: usize| points[vv * w + uu];
            let dx = std::array::from_fn(|c| p(v, ur)[c] - p(v, ul)[c]);
            let dy = std::array::from_fn(|c| p(v + 1, u)[c] - p(v - 1, u)[c]);
            let n = cross(dx, dy);
            let len = norm3(n);
            if len == 0.0 {
                continue;
            }
            let s = if dot3(n, p(v, u)) > 0.0 { -1.0 } else { 1.0 };
            out.set(v, u, n.map(|x| s * x / len));
            valid.set(v, u, true);
        }
    }
    Ok((out, valid))
}
