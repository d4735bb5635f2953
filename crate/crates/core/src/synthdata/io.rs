//! On-disk dataset layout: one directory per sample plus `manifest.json`.

use std::fs;
use std::path::{Path, PathBuf};

use image::{ImageBuffer, Luma, Rgb};
use serde::{Deserialize, Serialize};

use super::{apply_invalid_fraction, render_scene, SceneSpec};
use crate::error::{Error, Result};
use crate::maps::{DepthMap, NormalMap, ValidMask};
use crate::sphere_geom::ErpGridSpec;
use crate::tensor::FeatureMap;

const DEPTH_MAGIC: &[u8; 4] = b"PDEP";
/// Loaded normals must be unit within this after 16-bit quantization.
const UNIT_TOLERANCE: f64 = 1e-3;

fn image_err(path: &Path, source: image::ImageError) -> Error {
    Error::Image { path: path.to_path_buf(), source }
}

pub fn save_rgb(map: &FeatureMap, path: &Path) -> Result<()> {
    let (h, w) = (map.height(), map.width());
    let img = ImageBuffer::from_fn(w as u32, h as u32, |u, v| {
        Rgb(std::array::from_fn(|c| (map.get(c, v as usize, u as usize).clamp(0.0, 1.0) * 255.0).round() as u8))
    });
    img.save(path).map_err(|e| image_err(path, e))
}

pub fn load_rgb(path: &Path) -> Result<FeatureMap> {
    let img = image::open(path).map_err(|e| image_err(path, e))?.into_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut map = FeatureMap::zeros(3, h, w);
    for (u, v, px) in img.enumerate_pixels() {
        for c in 0..3 {
            map.set(c, v as usize, u as usize, px.0[c] as f64 / 255.0);
        }
    }
    Ok(map)
}

/// 16-bit encoding `round((n + 1) / 2 · 65535)` per component.
pub fn save_normals(map: &NormalMap, path: &Path) -> Result<()> {
    let img: ImageBuffer<Rgb<u16>, Vec<u16>> = ImageBuffer::from_fn(map.width() as u32, map.height() as u32, |u, v| {
        let n = map.get(v as usize, u as usize);
        Rgb(n.map(|c| ((c.clamp(-1.0, 1.0) + 1.0) / 2.0 * 65535.0).round() as u16))
    });
    img.save(path).map_err(|e| image_err(path, e))
}

/// Raw decoded normals, not renormalized.
pub fn load_normals(path: &Path) -> Result<NormalMap> {
    let img = image::open(path).map_err(|e| image_err(path, e))?.into_rgb16();
    let mut map = NormalMap::zeros(img.height() as usize, img.width() as usize);
    for (u, v, px) in img.enumerate_pixels() {
        map.set(v as usize, u as usize, px.0.map(|c| c as f64 / 65535.0 * 2.0 - 1.0));
    }
    Ok(map)
}

pub fn save_mask(mask: &ValidMask, path: &Path) -> Result<()> {
    let img: ImageBuffer<Luma<u8>, Vec<u8>> =
        ImageBuffer::from_fn(mask.width() as u32, mask.height() as u32, |u, v| {
            Luma([if mask.is_valid(v as usize, u as usize) { 255 } else { 0 }])
        });
    img.save(path).map_err(|e| image_err(path, e))
}

pub fn load_mask(path: &Path) -> Result<ValidMask> {
    let img = image::open(path).map_err(|e| image_err(path, e))?.into_luma8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    ValidMask::from_vec(h, w, img.pixels().map(|p| p.0[0] >= 128).collect())
}

/// `PDEP`, `u32` height, `u32` width, then row-major little-endian `f32`.
pub fn save_depth(depth: &DepthMap, path: &Path) -> Result<()> {
    let mut bytes = Vec::with_capacity(12 + 4 * depth.values().len());
    bytes.extend_from_slice(DEPTH_MAGIC);
    bytes.extend_from_slice(&(depth.height() as u32).to_le_bytes());
    bytes.extend_from_slice(&(depth.width() as u32).to_le_bytes());
    for &d in depth.values() {
        bytes.extend_from_slice(&(d as f32).to_le_bytes());
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn load_depth(path: &Path) -> Result<DepthMap> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() < 12 || &bytes[..4] != DEPTH_MAGIC {
        return Err(Error::format(path, "missing PDEP header"));
    }
    let word = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().expect("4 bytes")) as usize;
    let (h, w) = (word(4), word(8));
    if bytes.len() != 12 + 4 * h * w {
        return Err(Error::format(
            path,
            format!("{h}x{w} depth needs {} bytes, file has {}", 12 + 4 * h * w, bytes.len()),
        ));
    }
    let values =
        bytes[12..].chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64).collect();
    DepthMap::from_vec(h, w, values)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub dir: String,
    pub split: Split,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub grid: ErpGridSpec,
    pub seed: u64,
    pub invalid_fraction: f64,
    pub samples: Vec<ManifestEntry>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DatasetOptions {
    /// Fraction of pixels marked invalid per sample.
    pub invalid_fraction: f64,
    pub val_fraction: f64,
    pub test_fraction: f64,
}

impl Default for DatasetOptions {
    fn default() -> Self {
        Self { invalid_fraction: 0.0, val_fraction: 0.2, test_fraction: 0.0 }
    }
}

/// Split tags for `n` samples: trailing samples go to val, then test; at
/// least one sample stays in train.
fn assign_splits(n: usize, opts: &DatasetOptions) -> Vec<Split> {
    let val = ((n as f64 * opts.val_fraction).round() as usize).min(n.saturating_sub(1));
    let test = ((n as f64 * opts.test_fraction).round() as usize).min(n - 1 - val.min(n - 1));
    let train = n - val - test;
    (0..n)
        .map(|i| {
            if i < train {
                Split::Train
            } else if i < train + val {
                Split::Val
            } else {
                Split::Test
            }
        })
        .collect()
}

fn scene_seed(seed: u64, i: usize) -> u64 {
    seed ^ (i as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

/// Renders `n` random scenes under `out_dir` and writes the manifest.
pub fn make_dataset(
    n: usize,
    seed: u64,
    grid: &ErpGridSpec,
    out_dir: &Path,
    opts: &DatasetOptions,
) -> Result<Manifest> {
    if n == 0 {
        return Err(Error::InvalidInput("dataset needs at least one sample".into()));
    }
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let splits = assign_splits(n, opts);
    let mut samples = Vec::with_capacity(n);
    for (i, split) in splits.into_iter().enumerate() {
        let s = scene_seed(seed, i);
        let mut r = render_scene(&SceneSpec::random(s), grid)?;
        apply_invalid_fraction(&mut r, opts.invalid_fraction, s.wrapping_add(1))?;
        let dir = format!("sample_{i:04}");
        let path = out_dir.join(&dir);
        fs::create_dir_all(&path).map_err(|e| Error::io(&path, e))?;
        save_rgb(&r.rgb, &path.join("rgb.png"))?;
        save_normals(&r.normal, &path.join("normal.png"))?;
        save_depth(&r.depth, &path.join("depth.bin"))?;
        save_mask(&r.mask, &path.join("mask.png"))?;
        samples.push(ManifestEntry { dir, split });
    }
    let manifest = Manifest { grid: *grid, seed, invalid_fraction: opts.invalid_fraction, samples };
    let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    let mpath = out_dir.join("manifest.json");
    fs::write(&mpath, text).map_err(|e| Error::io(&mpath, e))?;
    Ok(manifest)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub name: String,
    pub rgb: FeatureMap,
    /// Unit normals on valid pixels, zero elsewhere.
    pub normal: NormalMap,
    pub depth: DepthMap,
    pub mask: ValidMask,
}

#[derive(Clone, Debug)]
pub struct Dataset {
    root: PathBuf,
    manifest: Manifest,
}

impl Dataset {
    pub fn open(root: &Path) -> Result<Self> {
        let mpath = root.join("manifest.json");
        let text = fs::read_to_string(&mpath).map_err(|e| Error::io(&mpath, e))?;
        let manifest: Manifest = serde_json::from_str(&text).map_err(|e| Error::format(&mpath, e.to_string()))?;
        Ok(Self { root: root.to_path_buf(), manifest })
    }

    pub fn manifest(&self) -> &Manifest {
        &self.manifest
    }

    pub fn grid(&self) -> &ErpGridSpec {
        &self.manifest.grid
    }

    pub fn indices(&self, split: Split) -> Vec<usize> {
        (0..self.manifest.samples.len()).filter(|&i| self.manifest.samples[i].split == split).collect()
    }

    /// Loads sample `i`, checking dimensions and that every valid normal
    /// decodes to unit length.
    pub fn load(&self, i: usize) -> Result<Sample> {
        let entry = &self.manifest.samples[i];
        let dir = self.root.join(&entry.dir);
        let (h, w) = (self.grid().height(), self.grid().width());
        let rgb = load_rgb(&dir.join("rgb.png"))?;
        let raw = load_normals(&dir.join("normal.png"))?;
        let depth = load_depth(&dir.join("depth.bin"))?;
        let mask = load_mask(&dir.join("mask.png"))?;
        let dims = [
            (rgb.height(), rgb.width()),
            (raw.height(), raw.width()),
            (depth.height(), depth.width()),
            (mask.height(), mask.width()),
        ];
        if dims.iter().any(|&d| d != (h, w)) {
            return Err(Error::format(&dir, format!("file sizes {dims:?} disagree with grid {h}x{w}")));
        }
        let mut normal = NormalMap::zeros(h, w);
        for v in 0..h {
            for u in 0..w {
                if !mask.is_valid(v, u) {
                    continue;
                }
                let n = raw.get(v, u);
                let len = (n[0] * n[0] + n[1] * n[1] + n[2] * n[2]).sqrt();
                if (len - 1.0).abs() > UNIT_TOLERANCE {
                    return Err(Error::format(
                        dir.join("normal.png"),
                        format!("normal at row {v}, col {u} has length {len}"),
                    ));
                }
                normal.set(v, u, n.map(|c| c / len));
            }
        }
        Ok(Sample { name: entry.dir.clone(), rgb, normal, depth, mask })
    }

    pub fn load_split(&self, split: Split) -> Result<Vec<Sample>> {
        self.indices(split).into_iter().map(|i| self.load(i)).collect()
    }
}
