//! Spherical and equirectangular (ERP) geometry.
//!
//! Frame convention: right-handed, `y` up, `z` forward. A direction at
//! latitude `φ` and longitude `λ` is `(cosφ·sinλ, sinφ, cosφ·cosλ)`.
//! Pixel centers sit at `λ(u) = 2π(u+0.5)/W − π` and `φ(v) = π/2 − π(v+0.5)/H`,
//! so integer pixel coordinates address pixel centers.

use std::f64::consts::{FRAC_PI_2, PI};

use crate::error::{Error, Result};
use crate::tensor::FeatureMap;

/// Unit direction on the sphere.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SphericalDir {
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

impl SphericalDir {
    /// Normalizes `(x, y, z)`; returns `None` for a zero vector.
    pub fn new(x: f64, y: f64, z: f64) -> Option<Self> {
        let n = (x * x + y * y + z * z).sqrt();
        if n == 0.0 || !n.is_finite() {
            return None;
        }
        Some(Self { x: x / n, y: y / n, z: z / n })
    }

    pub fn from_lat_lon(lat: f64, lon: f64) -> Self {
        let (sl, cl) = lat.sin_cos();
        let (so, co) = lon.sin_cos();
        Self { x: cl * so, y: sl, z: cl * co }
    }

    pub fn lat(&self) -> f64 {
        self.y.clamp(-1.0, 1.0).asin()
    }

    /// Longitude in `[−π, π)`; `0` at the poles.
    pub fn lon(&self) -> f64 {
        if self.x * self.x + self.z * self.z < 1e-30 {
            return 0.0;
        }
        let l = self.x.atan2(self.z);
        if l >= PI {
            l - 2.0 * PI
        } else {
            l
        }
    }

    pub fn as_array(&self) -> [f64; 3] {
        [self.x, self.y, self.z]
    }

    pub fn dot(&self, o: &SphericalDir) -> f64 {
        self.x * o.x + self.y * o.y + self.z * o.z
    }

    /// Great-circle angle to `o`, radians.
    pub fn angle_to(&self, o: &SphericalDir) -> f64 {
        let c = cross(self.as_array(), o.as_array());
        norm3(c).atan2(self.dot(o))
    }
}

pub(crate) fn cross(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [a[1] * b[2] - a[2] * b[1], a[2] * b[0] - a[0] * b[2], a[0] * b[1] - a[1] * b[0]]
}

pub(crate) fn dot3(a: [f64; 3], b: [f64; 3]) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

pub(crate) fn norm3(a: [f64; 3]) -> f64 {
    dot3(a, a).sqrt()
}

/// Equirectangular raster geometry, `W = 2H`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
pub struct ErpGridSpec {
    height: usize,
    width: usize,
}

impl ErpGridSpec {
    pub fn new(height: usize) -> Result<Self> {
        if height == 0 {
            return Err(Error::InvalidInput("ERP height must be positive".into()));
        }
        Ok(Self { height, width: 2 * height })
    }

    pub fn with_dims(height: usize, width: usize) -> Result<Self> {
        if width != 2 * height || height == 0 {
            return Err(Error::InvalidInput(format!("ERP grid must satisfy W = 2H, got {height}x{width}")));
        }
        Ok(Self { height, width })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn num_pixels(&self) -> usize {
        self.height * self.width
    }

    /// Angular size of one pixel step, `π/H` radians (equal in both axes).
    pub fn angular_step(&self) -> f64 {
        PI / self.height as f64
    }

    pub fn lon_of(&self, u: f64) -> f64 {
        2.0 * PI * (u + 0.5) / self.width as f64 - PI
    }

    pub fn lat_of(&self, v: f64) -> f64 {
        FRAC_PI_2 - PI * (v + 0.5) / self.height as f64
    }
}

/// Direction of the (continuous) ERP pixel coordinate `(u, v)`.
///
/// `u` wraps modulo `W`; `v` is clamped to the sphere's extent
/// `[−0.5, H − 0.5]`, whose ends are the poles.
pub fn erp_pixel_to_dir(u: f64, v: f64, spec: &ErpGridSpec) -> SphericalDir {
    let w = spec.width as f64;
    let u = u.rem_euclid(w);
    let v = v.clamp(-0.5, spec.height as f64 - 0.5);
    SphericalDir::from_lat_lon(spec.lat_of(v), spec.lon_of(u))
}

/// Inverse of [`erp_pixel_to_dir`]. `u` lies in `[0, W)`; at the poles `u = 0`.
pub fn dir_to_erp_pixel(d: &SphericalDir, spec: &ErpGridSpec) -> (f64, f64) {
    let w = spec.width as f64;
    let h = spec.height as f64;
    let v = (FRAC_PI_2 - d.lat()) * h / PI - 0.5;
    if d.x * d.x + d.z * d.z < 1e-30 {
        return (0.0, v);
    }
    let lon = d.x.atan2(d.z);
    let mut u = ((lon + PI) * w / (2.0 * PI) - 0.5).rem_euclid(w);
    if u >= w {
        u = 0.0;
    }
    (u, v)
}

/// Point of tangency of a gnomonic projection plane.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TangentPoint {
    pub center: SphericalDir,
}

impl TangentPoint {
    pub fn new(center: SphericalDir) -> Self {
        Self { center }
    }

    /// Orthonormal `(east, north)` basis of the tangent plane.
    fn basis(&self) -> ([f64; 3], [f64; 3]) {
        let lat = self.center.lat();
        let lon = self.center.lon();
        let (sl, cl) = lat.sin_cos();
        let (so, co) = lon.sin_cos();
        let east = [co, 0.0, -so];
        let north = [-sl * so, cl, -sl * co];
        (east, north)
    }
}

/// Gnomonic projection of `d` onto the plane tangent at `center`.
pub fn gnomonic_forward(center: &TangentPoint, d: &SphericalDir) -> Result<(f64, f64)> {
    let c = center.center.dot(d);
    if c <= 0.0 {
        return Err(Error::InvalidInput("direction lies outside the tangent hemisphere".into()));
    }
    let (east, north) = center.basis();
    let p = d.as_array();
    Ok((dot3(p, east) / c, dot3(p, north) / c))
}

/// Direction whose gnomonic projection at `center` is `(x, y)`.
pub fn gnomonic_inverse(center: &TangentPoint, x: f64, y: f64) -> SphericalDir {
    let (east, north) = center.basis();
    let c = center.center.as_array();
    let p = [c[0] + x * east[0] + y * north[0], c[1] + x * east[1] + y * north[1], c[2] + x * east[2] + y * north[2]];
    // |p| >= 1 since the plane is tangent at a unit vector.
    SphericalDir::new(p[0], p[1], p[2]).expect("tangent-plane point is never zero")
}

/// Continuous ERP sampling positions of a tangent lattice around every pixel.
#[derive(Clone, Debug, PartialEq)]
pub struct TangentPatchGrid {
    spec: ErpGridSpec,
    k_samples: usize,
    lattice_spacing: f64,
    /// `(u, v)` per `(query, sample)`, query-major. `u` is unwrapped around
    /// the query column and may fall outside `[0, W)`.
    positions: Vec<(f64, f64)>,
}

impl TangentPatchGrid {
    pub fn spec(&self) -> &ErpGridSpec {
        &self.spec
    }

    pub fn k_samples(&self) -> usize {
        self.k_samples
    }

    pub fn lattice_spacing(&self) -> f64 {
        self.lattice_spacing
    }

    pub fn positions(&self) -> &[(f64, f64)] {
        &self.positions
    }

    /// Samples of query pixel `(u, v)`.
    pub fn query(&self, u: usize, v: usize) -> &[(f64, f64)] {
        let q = v * self.spec.width + u;
        &self.positions[q * self.k_samples..(q + 1) * self.k_samples]
    }

    /// Index of the lattice center within each query's samples.
    pub fn center_index(&self) -> usize {
        self.k_samples / 2
    }
}

/// Rounds away float noise around integers (e.g. lattice nodes on the query
/// meridian), so those samples hit the symmetric-derivative case exactly.
fn snap(x: f64) -> f64 {
    let r = x.round();
    if (x - r).abs() < 1e-10 {
        r
    } else {
        x
    }
}

/// Builds the tangent sampling grid for one resolution.
///
/// A `√k × √k` lattice with the given spacing (tangent-plane units) is placed
/// on the plane tangent at each pixel's direction, row-major from north-west
/// to south-east, and each node is mapped back to ERP coordinates.
pub fn build_tangent_sampling_grid(
    spec: &ErpGridSpec,
    k_samples: usize,
    lattice_spacing: f64,
) -> Result<TangentPatchGrid> {
    let side = (k_samples as f64).sqrt().round() as usize;
    if k_samples == 0 || side * side != k_samples {
        return Err(Error::InvalidInput(format!("k_samples must be a positive perfect square, got {k_samples}")));
    }
    if !(lattice_spacing > 0.0 && lattice_spacing.is_finite()) {
        return Err(Error::InvalidInput(format!("lattice spacing must be positive, got {lattice_spacing}")));
    }
    let w = spec.width();
    let wf = w as f64;
    let half = (side as f64 - 1.0) / 2.0;
    let center_k = k_samples / 2;
    let mut positions = Vec::with_capacity(spec.num_pixels() * k_samples);
    for v in 0..spec.height() {
        for u in 0..w {
            let tp = TangentPoint::new(erp_pixel_to_dir(u as f64, v as f64, spec));
            for k in 0..k_samples {
                if k == center_k {
                    positions.push((u as f64, v as f64));
                    continue;
                }
                let row = (k / side) as f64 - half;
                let col = (k % side) as f64 - half;
                let d = gnomonic_inverse(&tp, col * lattice_spacing, -row * lattice_spacing);
                let (su, sv) = dir_to_erp_pixel(&d, spec);
                let du = (su - u as f64 + wf / 2.0).rem_euclid(wf) - wf / 2.0;
                positions.push((snap(u as f64 + du), snap(sv)));
            }
        }
    }
    Ok(TangentPatchGrid { spec: *spec, k_samples, lattice_spacing, positions })
}

/// Interpolation taps along one axis: value taps `(i0, 1−f), (i1, f)` and a
/// derivative stencil `(lo, −a), (hi, +a)`.
///
/// At exact integer coordinates the derivative is the mean of the one-sided
/// slopes, which is what a central difference across the kink measures.
#[derive(Clone, Copy, Debug)]
pub(crate) struct AxisTaps {
    pub i0: usize,
    pub i1: usize,
    pub f: f64,
    pub lo: usize,
    pub hi: usize,
    pub a: f64,
}

pub(crate) fn axis_taps(coord: f64, n: usize, wrap: bool) -> AxisTaps {
    if wrap {
        let nf = n as f64;
        let c = coord.rem_euclid(nf);
        let c = if c >= nf { 0.0 } else { c };
        let c0 = c.floor();
        let f = c - c0;
        let i0 = c0 as usize % n;
        let i1 = (i0 + 1) % n;
        if f == 0.0 {
            let lo = (i0 + n - 1) % n;
            AxisTaps { i0, i1, f, lo, hi: i1, a: 0.5 }
        } else {
            AxisTaps { i0, i1, f, lo: i0, hi: i1, a: 1.0 }
        }
    } else {
        let max = (n - 1) as f64;
        if coord <= 0.0 || coord >= max || n == 1 {
            let c = coord.clamp(0.0, max);
            let i0 = c.floor() as usize;
            let i1 = (i0 + 1).min(n - 1);
            let f = c - i0 as f64;
            // Boundary: only the inward one-sided slope survives, halved at
            // the exact edge and zero beyond it.
            if n == 1 || coord < 0.0 || coord > max {
                return AxisTaps { i0, i1, f, lo: i0, hi: i0, a: 0.0 };
            }
            if coord == 0.0 {
                return AxisTaps { i0: 0, i1, f: 0.0, lo: 0, hi: 1, a: 0.5 };
            }
            return AxisTaps { i0: n - 1, i1: n - 1, f: 0.0, lo: n - 2, hi: n - 1, a: 0.5 };
        }
        let c0 = coord.floor();
        let f = coord - c0;
        let i0 = c0 as usize;
        let i1 = i0 + 1;
        if f == 0.0 {
            AxisTaps { i0, i1, f, lo: i0 - 1, hi: i1, a: 0.5 }
        } else {
            AxisTaps { i0, i1, f, lo: i0, hi: i1, a: 1.0 }
        }
    }
}

/// Bilinear stencil for one sample position on an `h × w` raster.
#[derive(Clone, Copy, Debug)]
pub(crate) struct BilinearStencil {
    pub value: [(usize, f64); 4],
    pub du: [(usize, f64); 4],
    pub dv: [(usize, f64); 4],
}

pub(crate) fn bilinear_stencil(u: f64, v: f64, h: usize, w: usize, wrap: bool) -> BilinearStencil {
    let tu = axis_taps(u, w, wrap);
    let tv = axis_taps(v, h, false);
    let (fu, fv) = (tu.f, tv.f);
    let at = |r: usize, c: usize| r * w + c;
    BilinearStencil {
        value: [
            (at(tv.i0, tu.i0), (1.0 - fv) * (1.0 - fu)),
            (at(tv.i0, tu.i1), (1.0 - fv) * fu),
            (at(tv.i1, tu.i0), fv * (1.0 - fu)),
            (at(tv.i1, tu.i1), fv * fu),
        ],
        du: [
            (at(tv.i0, tu.lo), -(1.0 - fv) * tu.a),
            (at(tv.i0, tu.hi), (1.0 - fv) * tu.a),
            (at(tv.i1, tu.lo), -fv * tu.a),
            (at(tv.i1, tu.hi), fv * tu.a),
        ],
        dv: [
            (at(tv.lo, tu.i0), -(1.0 - fu) * tv.a),
            (at(tv.hi, tu.i0), (1.0 - fu) * tv.a),
            (at(tv.lo, tu.i1), -fu * tv.a),
            (at(tv.hi, tu.i1), fu * tv.a),
        ],
    }
}

/// Bilinearly interpolates every channel of `f` at each `(u, v)`.
///
/// `v` is clamped to `[0, H−1]`; `u` wraps across the longitude seam when
/// `wrap_longitude` is set and is clamped otherwise.
pub fn bilinear_sample(f: &FeatureMap, positions: &[(f64, f64)], wrap_longitude: bool) -> Vec<Vec<f64>> {
    let (c, h, w) = (f.channels(), f.height(), f.width());
    let plane = h * w;
    positions
        .iter()
        .map(|&(u, v)| {
            let s = bilinear_stencil(u, v, h, w, wrap_longitude);
            (0..c)
                .map(|ch| {
                    let base = &f.values()[ch * plane..(ch + 1) * plane];
                    s.value.iter().map(|&(i, wt)| wt * base[i]).sum()
                })
                .collect()
        })
        .collect()
}

/// Jacobian of [`bilinear_sample`] with respect to the positions:
/// per position, `(∂/∂u, ∂/∂v)` for every channel.
pub fn bilinear_sample_position_grad(
    f: &FeatureMap,
    positions: &[(f64, f64)],
    wrap_longitude: bool,
) -> Vec<(Vec<f64>, Vec<f64>)> {
    let (c, h, w) = (f.channels(), f.height(), f.width());
    let plane = h * w;
    positions
        .iter()
        .map(|&(u, v)| {
            let s = bilinear_stencil(u, v, h, w, wrap_longitude);
            let mut gu = vec![0.0; c];
            let mut gv = vec![0.0; c];
            for ch in 0..c {
                let base = &f.values()[ch * plane..(ch + 1) * plane];
                gu[ch] = s.du.iter().map(|&(i, wt)| wt * base[i]).sum();
                gv[ch] = s.dv.iter().map(|&(i, wt)| wt * base[i]).sum();
            }
            (gu, gv)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(h: usize) -> ErpGridSpec {
        ErpGridSpec::new(h).unwrap()
    }

    #[test]
    fn erp_center_is_forward_axis() {
        let s = spec(4);
        let d = erp_pixel_to_dir(3.5, 1.5, &s);
        assert!(d.x.abs() < 1e-15 && d.y.abs() < 1e-15);
        assert!((d.z - 1.0).abs() < 1e-15);
        let (u, v) = dir_to_erp_pixel(&SphericalDir::new(0.0, 0.0, 1.0).unwrap(), &s);
        assert!((u - 3.5).abs() < 1e-12 && (v - 1.5).abs() < 1e-12);
    }

    #[test]
    fn erp_top_edge_is_north_pole() {
        let s = spec(4);
        let d = erp_pixel_to_dir(2.0, -0.5, &s);
        assert!((d.lat() - FRAC_PI_2).abs() < 1e-12);
        let (u, _) = dir_to_erp_pixel(&SphericalDir::new(0.0, 1.0, 0.0).unwrap(), &s);
        assert_eq!(u, 0.0);
    }

    #[test]
    fn erp_hand_evaluated_pixel() {
        let s = spec(4);
        let d = erp_pixel_to_dir(0.5, 1.5, &s);
        assert!((d.lon() + 3.0 * PI / 4.0).abs() < 1e-12);
        assert!(d.lat().abs() < 1e-12);
        let back = dir_to_erp_pixel(&SphericalDir::from_lat_lon(0.0, -3.0 * PI / 4.0), &s);
        assert!((back.0 - 0.5).abs() < 1e-12 && (back.1 - 1.5).abs() < 1e-12);
    }

    #[test]
    fn erp_u_wraps() {
        let s = spec(4);
        let a = erp_pixel_to_dir(1.25, 2.0, &s);
        let b = erp_pixel_to_dir(9.25, 2.0, &s);
        assert!(a.angle_to(&b) < 1e-12);
    }

    #[test]
    fn gnomonic_closed_forms() {
        let tp = TangentPoint::new(SphericalDir::from_lat_lon(0.0, 0.0));
        let (x, y) = gnomonic_forward(&tp, &tp.center).unwrap();
        assert_eq!((x, y), (0.0, 0.0));
        let (x, y) = gnomonic_forward(&tp, &SphericalDir::from_lat_lon(0.0, PI / 4.0)).unwrap();
        assert!((x - 1.0).abs() < 1e-12 && y.abs() < 1e-12);
        let (x, y) = gnomonic_forward(&tp, &SphericalDir::from_lat_lon(PI / 4.0, 0.0)).unwrap();
        assert!(x.abs() < 1e-12 && (y - 1.0).abs() < 1e-12);
        let d = gnomonic_inverse(&tp, 1.0, 0.0);
        assert!(d.lat().abs() < 1e-12 && (d.lon() - PI / 4.0).abs() < 1e-12);
        let d = gnomonic_inverse(&tp, 0.0, 0.0);
        assert!(d.angle_to(&tp.center) < 1e-15);
    }

    #[test]
    fn gnomonic_rejects_far_hemisphere() {
        let tp = TangentPoint::new(SphericalDir::from_lat_lon(0.3, 1.0));
        let opposite = SphericalDir::new(-tp.center.x, -tp.center.y, -tp.center.z).unwrap();
        assert!(gnomonic_forward(&tp, &opposite).is_err());
    }

    #[test]
    fn grid_rejects_non_square() {
        assert!(build_tangent_sampling_grid(&spec(4), 8, 0.1).is_err());
        assert!(build_tangent_sampling_grid(&spec(4), 0, 0.1).is_err());
        assert!(build_tangent_sampling_grid(&spec(4), 9, 0.0).is_err());
    }

    #[test]
    fn degenerate_lattice_is_query_pixel() {
        let s = spec(8);
        let g = build_tangent_sampling_grid(&s, 1, s.angular_step()).unwrap();
        for v in 0..8 {
            for u in 0..16 {
                assert_eq!(g.query(u, v), &[(u as f64, v as f64)]);
            }
        }
    }

    #[test]
    fn near_equator_lattice_is_symmetric() {
        // Rows v and H-1-v mirror each other across the equator.
        let s = spec(16);
        let g = build_tangent_sampling_grid(&s, 9, s.angular_step()).unwrap();
        let (u, v) = (5usize, 7usize);
        let p = g.query(u, v);
        // Left/right mirror within a row of the lattice.
        for row in 0..3 {
            let l = p[row * 3];
            let r = p[row * 3 + 2];
            assert!(((l.0 + r.0) / 2.0 - u as f64).abs() < 1e-9);
            assert!((l.1 - r.1).abs() < 1e-9);
        }
        let mirrored = g.query(u, 15 - v);
        for k in 0..9 {
            let m = mirrored[(2 - k / 3) * 3 + k % 3];
            assert!((p[k].0 - m.0).abs() < 1e-9);
            assert!((p[k].1 + m.1 - 15.0).abs() < 1e-9);
        }
    }

    #[test]
    fn axis_taps_symmetric_derivative_at_integers() {
        let t = axis_taps(3.0, 8, true);
        assert_eq!((t.i0, t.f, t.lo, t.hi, t.a), (3, 0.0, 2, 4, 0.5));
        let t = axis_taps(0.0, 8, true);
        assert_eq!((t.lo, t.hi), (7, 1));
        let t = axis_taps(0.0, 4, false);
        assert_eq!((t.lo, t.hi, t.a), (0, 1, 0.5));
        let t = axis_taps(-0.2, 4, false);
        assert_eq!(t.a, 0.0);
        let t = axis_taps(3.0, 4, false);
        assert_eq!((t.i0, t.lo, t.hi, t.a), (3, 2, 3, 0.5));
    }

    #[test]
    fn bilinear_integer_and_seam() {
        let mut f = FeatureMap::zeros(2, 3, 4);
        for (i, x) in f.values_mut().iter_mut().enumerate() {
            *x = i as f64 * 0.5 - 1.0;
        }
        let out = bilinear_sample(&f, &[(2.0, 1.0)], true);
        assert_eq!(out[0][0], f.get(0, 1, 2));
        assert_eq!(out[0][1], f.get(1, 1, 2));
        let out = bilinear_sample(&f, &[(3.5, 2.0)], true);
        for ch in 0..2 {
            let expect = 0.5 * (f.get(ch, 2, 3) + f.get(ch, 2, 0));
            assert!((out[0][ch] - expect).abs() < 1e-15);
        }
    }
}
