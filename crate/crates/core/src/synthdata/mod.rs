//! Procedural box-room panoramas with analytic normals and depth.

mod io;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use io::{
    load_depth, load_mask, load_normals, load_rgb, make_dataset, save_depth, save_mask, save_normals, save_rgb,
    Dataset, DatasetOptions, Manifest, ManifestEntry, Sample, Split,
};

use crate::error::{Error, Result};
use crate::maps::{DepthMap, NormalMap, ValidMask};
use crate::sphere_geom::{erp_pixel_to_dir, ErpGridSpec, SphericalDir};
use crate::tensor::FeatureMap;

const AMBIENT: f64 = 0.2;

/// Axis-aligned box, `min < max` on every axis.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Aabb {
    pub min: [f64; 3],
    pub max: [f64; 3],
}

impl Aabb {
    pub fn new(min: [f64; 3], max: [f64; 3]) -> Result<Self> {
        if (0..3).any(|a| !(min[a] < max[a]) || !min[a].is_finite() || !max[a].is_finite()) {
            return Err(Error::InvalidInput(format!("degenerate box {min:?}..{max:?}")));
        }
        Ok(Self { min, max })
    }

    /// Open-interior test with a margin.
    pub fn contains(&self, p: [f64; 3], margin: f64) -> bool {
        (0..3).all(|a| p[a] > self.min[a] + margin && p[a] < self.max[a] - margin)
    }

    pub fn inside(&self, outer: &Aabb) -> bool {
        (0..3).all(|a| self.min[a] >= outer.min[a] && self.max[a] <= outer.max[a])
    }

    /// Image of the box under a quarter turn about the vertical axis,
    /// `(x, y, z) → (z, y, −x)`.
    pub fn rotated_quarter(&self) -> Self {
        Self { min: [self.min[2], self.min[1], -self.max[0]], max: [self.max[2], self.max[1], -self.min[0]] }
    }
}

/// Per-face albedo, indexed by [`face_index`].
pub type FaceAlbedo = [[f64; 3]; 6];

/// Face index of the box face with outward normal along `axis` in direction
/// `sign`: `−x, +x, −y, +y, −z, +z` → `0..6`.
pub fn face_index(axis: usize, positive: bool) -> usize {
    2 * axis + usize::from(positive)
}

fn face_normal(face: usize) -> [f64; 3] {
    let mut n = [0.0; 3];
    n[face / 2] = if face % 2 == 1 { 1.0 } else { -1.0 };
    n
}

fn rotate_quarter(p: [f64; 3]) -> [f64; 3] {
    [p[2], p[1], -p[0]]
}

/// Face permutation under [`Aabb::rotated_quarter`]: new face → old face.
fn rotated_face_source(face: usize) -> usize {
    // new +x ← old +z, new −x ← old −z, new +z ← old −x, new −z ← old +x
    [4, 5, 2, 3, 1, 0][face]
}

#[derive(Clone, Debug, PartialEq)]
pub struct SceneSpec {
    pub room: Aabb,
    pub furniture: Vec<Aabb>,
    pub camera: [f64; 3],
    pub room_albedo: FaceAlbedo,
    pub furniture_albedo: Vec<FaceAlbedo>,
    pub light_dir: SphericalDir,
    pub seed: u64,
}

impl SceneSpec {
    /// A grey empty room with the light straight overhead.
    pub fn empty_room(room: Aabb, camera: [f64; 3]) -> Self {
        Self {
            room,
            furniture: Vec::new(),
            camera,
            room_albedo: [[0.7; 3]; 6],
            furniture_albedo: Vec::new(),
            light_dir: SphericalDir::new(0.3, 1.0, 0.2).expect("non-zero"),
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidInput(m.to_string()));
        if self.furniture.len() != self.furniture_albedo.len() {
            return bad("one albedo set per furniture box");
        }
        if !self.room.contains(self.camera, 1e-9) {
            return bad("camera must be strictly inside the room");
        }
        for b in &self.furniture {
            if !b.inside(&self.room) {
                return bad("furniture must lie inside the room");
            }
            if (0..3).all(|a| self.camera[a] >= b.min[a] - 1e-9 && self.camera[a] <= b.max[a] + 1e-9) {
                return bad("camera inside or on a furniture box");
            }
        }
        Ok(())
    }

    /// The scene turned a quarter about the vertical axis through the origin.
    pub fn rotated_quarter(&self) -> Self {
        let permute = |a: &FaceAlbedo| std::array::from_fn(|f| a[rotated_face_source(f)]);
        let l = self.light_dir.as_array();
        let lr = rotate_quarter(l);
        Self {
            room: self.room.rotated_quarter(),
            furniture: self.furniture.iter().map(Aabb::rotated_quarter).collect(),
            camera: rotate_quarter(self.camera),
            room_albedo: permute(&self.room_albedo),
            furniture_albedo: self.furniture_albedo.iter().map(permute).collect(),
            light_dir: SphericalDir::new(lr[0], lr[1], lr[2]).expect("unit"),
            seed: self.seed,
        }
    }

    /// Random room 2–8 m per side, 0–5 floor-standing boxes, random albedo
    /// and light.
    pub fn random(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let size: [f64; 3] = std::array::from_fn(|_| rng.random_range(2.0..8.0));
        let room = Aabb { min: [0.0; 3], max: size };
        let camera = [
            rng.random_range(0.3 * size[0]..0.7 * size[0]),
            rng.random_range(0.35 * size[1]..0.65 * size[1]),
            rng.random_range(0.3 * size[2]..0.7 * size[2]),
        ];
        let albedo = |rng: &mut ChaCha8Rng| -> FaceAlbedo {
            std::array::from_fn(|_| std::array::from_fn(|_| rng.random_range(0.2..1.0)))
        };
        let room_albedo = albedo(&mut rng);
        let count = rng.random_range(0..=5);
        let mut furniture = Vec::new();
        let mut furniture_albedo = Vec::new();
        let mut attempts = 0;
        while furniture.len() < count && attempts < 100 {
            attempts += 1;
            let ext: [f64; 3] = [
                rng.random_range(0.3..1.5f64).min(0.45 * size[0]),
                rng.random_range(0.3..1.5f64).min(0.8 * size[1]),
                rng.random_range(0.3..1.5f64).min(0.45 * size[2]),
            ];
            let x = rng.random_range(0.0..size[0] - ext[0]);
            let z = rng.random_range(0.0..size[2] - ext[2]);
            let b = Aabb { min: [x, 0.0, z], max: [x + ext[0], ext[1], z + ext[2]] };
            let grown = Aabb { min: b.min.map(|c| c - 0.25), max: b.max.map(|c| c + 0.25) };
            if grown.contains(camera, 0.0) {
                continue;
            }
            furniture.push(b);
            furniture_albedo.push(albedo(&mut rng));
        }
        let light = loop {
            let v: [f64; 3] = std::array::from_fn(|_| rng.random_range(-1.0..1.0));
            if let Some(d) = SphericalDir::new(v[0], v[1].abs() + 0.3, v[2]) {
                break d;
            }
        };
        Self { room, furniture, camera, room_albedo, furniture_albedo, light_dir: light, seed }
    }
}

/// What a ray hit: `None` for the room, `Some(i)` for furniture box `i`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SurfaceId {
    pub object: Option<usize>,
    pub face: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RenderedSample {
    pub rgb: FeatureMap,
    pub normal: NormalMap,
    pub depth: DepthMap,
    pub mask: ValidMask,
    pub surface: Vec<Option<SurfaceId>>,
}

impl RenderedSample {
    /// Valid pixels whose 8-neighbourhood (longitude wrapped, rows clamped)
    /// lies on the same face.
    pub fn face_interior(&self, radius: usize) -> ValidMask {
        let (h, w) = (self.mask.height(), self.mask.width());
        let mut out = ValidMask::from_vec(h, w, vec![false; h * w]).expect("sized");
        for v in 0..h {
            for u in 0..w {
                let Some(id) = self.surface[v * w + u] else { continue };
                let mut same = v >= radius && v + radius < h;
                for dv in -(radius as isize)..=radius as isize {
                    for du in -(radius as isize)..=radius as isize {
                        if !same {
                            break;
                        }
                        let vv = (v as isize + dv).clamp(0, h as isize - 1) as usize;
                        let uu = (u as isize + du).rem_euclid(w as isize) as usize;
                        same = self.surface[vv * w + uu] == Some(id) && self.mask.is_valid(vv, uu);
                    }
                }
                out.set(v, u, same && self.mask.is_valid(v, u));
            }
        }
        out
    }
}

/// Nearest exit through the room's inner faces.
fn hit_room(room: &Aabb, o: [f64; 3], d: [f64; 3]) -> Option<(f64, usize)> {
    let mut best: Option<(f64, usize)> = None;
    for a in 0..3 {
        if d[a] == 0.0 {
            continue;
        }
        let (plane, positive) = if d[a] > 0.0 { (room.max[a], true) } else { (room.min[a], false) };
        let t = (plane - o[a]) / d[a];
        if best.is_none_or(|(bt, _)| t < bt) {
            best = Some((t, face_index(a, positive)));
        }
    }
    best
}

/// Entry into a box from outside (slab method).
fn hit_box(b: &Aabb, o: [f64; 3], d: [f64; 3]) -> Option<(f64, usize)> {
    let mut t_near = f64::NEG_INFINITY;
    let mut t_far = f64::INFINITY;
    let mut face = 0;
    for a in 0..3 {
        if d[a] == 0.0 {
            if o[a] <= b.min[a] || o[a] >= b.max[a] {
                return None;
            }
            continue;
        }
        let t1 = (b.min[a] - o[a]) / d[a];
        let t2 = (b.max[a] - o[a]) / d[a];
        let (lo, hi) = if t1 < t2 { (t1, t2) } else { (t2, t1) };
        if lo > t_near {
            t_near = lo;
            // entering through the min face when travelling +axis
            face = face_index(a, d[a] < 0.0);
        }
        t_far = t_far.min(hi);
    }
    (t_near < t_far && t_near > 0.0).then_some((t_near, face))
}

/// Casts one ray per pixel centre; nearest hit gives depth, the camera-facing
/// face normal and Lambertian shading with ambient term.
pub fn render_scene(spec: &SceneSpec, grid: &ErpGridSpec) -> Result<RenderedSample> {
    spec.validate()?;
    let (h, w) = (grid.height(), grid.width());
    let mut rgb = FeatureMap::zeros(3, h, w);
    let mut normal = NormalMap::zeros(h, w);
    let mut depth = vec![0.0; h * w];
    let mut surface = vec![None; h * w];
    let light = spec.light_dir.as_array();
    for v in 0..h {
        for u in 0..w {
            let d = erp_pixel_to_dir(u as f64, v as f64, grid).as_array();
            let (mut t, face) = hit_room(&spec.room, spec.camera, d)
                .ok_or_else(|| Error::InvalidInput("ray escaped the room".into()))?;
            let mut id = SurfaceId { object: None, face };
            for (i, b) in spec.furniture.iter().enumerate() {
                if let Some((tb, fb)) = hit_box(b, spec.camera, d) {
                    if tb < t {
                        t = tb;
                        id = SurfaceId { object: Some(i), face: fb };
                    }
                }
            }
            let mut n = face_normal(id.face);
            if n.iter().zip(&d).map(|(a, b)| a * b).sum::<f64>() > 0.0 {
                n = n.map(|c| -c);
            }
            let albedo = match id.object {
                None => spec.room_albedo[id.face],
                Some(i) => spec.furniture_albedo[i][id.face],
            };
            let lambert = n.iter().zip(&light).map(|(a, b)| a * b).sum::<f64>().max(0.0);
            for c in 0..3 {
                rgb.set(c, v, u, (albedo[c] * (lambert + AMBIENT)).clamp(0.0, 1.0));
            }
            normal.set(v, u, n);
            depth[v * w + u] = t;
            surface[v * w + u] = Some(id);
        }
    }
    Ok(RenderedSample {
        rgb,
        normal,
        depth: DepthMap::from_vec(h, w, depth)?,
        mask: ValidMask::all_valid(h, w),
        surface,
    })
}

/// Marks a seeded random `fraction` of pixels invalid, zeroing their normal
/// and depth.
pub fn apply_invalid_fraction(sample: &mut RenderedSample, fraction: f64, seed: u64) -> Result<()> {
    if !(0.0..1.0).contains(&fraction) {
        return Err(Error::InvalidInput(format!("invalid fraction {fraction} outside [0, 1)")));
    }
    if fraction == 0.0 {
        return Ok(());
    }
    let (h, w) = (sample.mask.height(), sample.mask.width());
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut depth = sample.depth.values().to_vec();
    for v in 0..h {
        for u in 0..w {
            if rng.random::<f64>() < fraction {
                sample.mask.set(v, u, false);
                sample.normal.set(v, u, [0.0; 3]);
                depth[v * w + u] = 0.0;
                sample.surface[v * w + u] = None;
            }
        }
    }
    if sample.mask.count() == 0 {
        // keep at least one supervised pixel
        sample.mask.set(h / 2, w / 2, true);
    }
    sample.depth = DepthMap::from_vec(h, w, depth)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cube_room() -> SceneSpec {
        SceneSpec::empty_room(Aabb::new([-2.0; 3], [2.0; 3]).unwrap(), [0.0; 3])
    }

    #[test]
    fn ceiling_and_floor() {
        let grid = ErpGridSpec::new(16).unwrap();
        let s = render_scene(&cube_room(), &grid).unwrap();
        // top row centre is near-vertical; the ceiling plane sits at y = 2
        let d = erp_pixel_to_dir(16.0, 0.0, &grid).as_array();
        assert!((s.depth.get(0, 16) - 2.0 / d[1]).abs() < 1e-12);
        assert_eq!(s.normal.get(0, 16), [0.0, -1.0, 0.0]);
        for u in 0..32 {
            assert_eq!(s.normal.get(15, u), [0.0, 1.0, 0.0]);
        }
    }

    #[test]
    fn straight_up_hits_ceiling_at_two() {
        let (t, face) = hit_room(&cube_room().room, [0.0; 3], [0.0, 1.0, 0.0]).unwrap();
        assert_eq!((t, face), (2.0, face_index(1, true)));
    }

    #[test]
    fn forward_wall_depth() {
        let room = Aabb::new([-5.0, -1.0, -5.0], [5.0, 2.0, 3.0]).unwrap();
        let (t, _) = hit_room(&room, [0.0; 3], [0.0, 0.0, 1.0]).unwrap();
        assert_eq!(t, 3.0);
    }

    #[test]
    fn box_entry_face() {
        let b = Aabb::new([1.0, -1.0, -1.0], [2.0, 1.0, 1.0]).unwrap();
        let (t, face) = hit_box(&b, [0.0; 3], [1.0, 0.0, 0.0]).unwrap();
        assert_eq!((t, face), (1.0, face_index(0, false)));
        assert!(hit_box(&b, [0.0; 3], [-1.0, 0.0, 0.0]).is_none());
    }

    #[test]
    fn rejects_degenerate_scenes() {
        let mut s = cube_room();
        s.camera = [2.0, 0.0, 0.0];
        assert!(s.validate().is_err());
        let mut s = cube_room();
        s.furniture.push(Aabb::new([-0.5; 3], [0.5; 3]).unwrap());
        s.furniture_albedo.push([[0.5; 3]; 6]);
        assert!(s.validate().is_err());
        let mut s = cube_room();
        s.furniture.push(Aabb::new([1.0; 3], [3.0; 3]).unwrap());
        s.furniture_albedo.push([[0.5; 3]; 6]);
        assert!(s.validate().is_err());
    }

    #[test]
    fn random_scenes_are_valid_and_camera_facing() {
        let grid = ErpGridSpec::new(16).unwrap();
        for seed in 0..8 {
            let spec = SceneSpec::random(seed);
            assert_eq!(spec, SceneSpec::random(seed));
            let s = render_scene(&spec, &grid).unwrap();
            for v in 0..16 {
                for u in 0..32 {
                    let n = s.normal.get(v, u);
                    let d = erp_pixel_to_dir(u as f64, v as f64, &grid).as_array();
                    let norm: f64 = n.iter().map(|c| c * c).sum();
                    assert!((norm - 1.0).abs() < 1e-9);
                    assert!(n.iter().zip(&d).map(|(a, b)| a * b).sum::<f64>() < 0.0);
                    assert!(s.depth.get(v, u) > 0.0);
                }
            }
        }
    }

    #[test]
    fn invalid_fraction_masks_pixels() {
        let grid = ErpGridSpec::new(16).unwrap();
        let mut s = render_scene(&cube_room(), &grid).unwrap();
        apply_invalid_fraction(&mut s, 0.3, 1).unwrap();
        let invalid = 512 - s.mask.count();
        assert!(invalid > 100 && invalid < 220, "{invalid}");
        for v in 0..16 {
            for u in 0..32 {
                if !s.mask.is_valid(v, u) {
                    assert_eq!(s.normal.get(v, u), [0.0; 3]);
                }
            }
        }
    }
}
