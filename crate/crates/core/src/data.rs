//! Dataset discovery, PNG loading, grouped cross-validation folds,
//! per-sample seeded augmentation and a synthetic dataset generator.
//!
//! On-disk layout:
//!
//! ```text
//! root/
//!   images/<stem>.png   grayscale or RGB
//!   masks/<stem>.png    8-bit class ids
//!   groups.csv          optional `stem,group` rows (patient / volume id)
//! ```
//!
//! A `manifest.csv` with `image,mask,group` columns (paths relative to the
//! root) replaces the directory scan when present.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};

use candle_core::{Device, Tensor};
use image::{imageops, GrayImage, ImageBuffer, Luma, Rgb, RgbImage};
use ndarray::{Array2, Array3, Axis};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::ChannelStats;
use crate::error::{Error, Result};
use crate::metrics::MaskBatch;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SampleRef {
    pub stem: String,
    pub image: PathBuf,
    pub mask: PathBuf,
    pub group: String,
}

fn read_groups(path: &Path) -> Result<BTreeMap<String, String>> {
    let mut rdr = csv::Reader::from_path(path)
        .map_err(|e| Error::data(format!("{}: {e}", path.display())))?;
    let mut out = BTreeMap::new();
    for row in rdr.records() {
        let row = row.map_err(|e| Error::data(format!("{}: {e}", path.display())))?;
        if row.len() < 2 {
            return Err(Error::data(format!("{}: rows need stem,group", path.display())));
        }
        out.insert(row[0].to_string(), row[1].to_string());
    }
    Ok(out)
}

fn read_manifest(root: &Path, path: &Path) -> Result<Vec<SampleRef>> {
    let mut rdr = csv::Reader::from_path(path)
        .map_err(|e| Error::data(format!("{}: {e}", path.display())))?;
    let mut out = Vec::new();
    for row in rdr.records() {
        let row = row.map_err(|e| Error::data(format!("{}: {e}", path.display())))?;
        if row.len() < 2 {
            return Err(Error::data(format!("{}: rows need image,mask[,group]", path.display())));
        }
        let image = root.join(&row[0]);
        let stem = image
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default();
        let group = row.get(2).map(str::to_string).unwrap_or_else(|| stem.clone());
        out.push(SampleRef {
            stem,
            image,
            mask: root.join(&row[1]),
            group,
        });
    }
    Ok(out)
}

/// List the samples under `root`, sorted by stem.
pub fn scan_dataset(root: &Path) -> Result<Vec<SampleRef>> {
    let manifest = root.join("manifest.csv");
    let mut refs = if manifest.is_file() {
        read_manifest(root, &manifest)?
    } else {
        let images = root.join("images");
        let masks = root.join("masks");
        let entries = fs::read_dir(&images)
            .map_err(|e| Error::data(format!("cannot list {}: {e}", images.display())))?;
        let groups = if root.join("groups.csv").is_file() {
            read_groups(&root.join("groups.csv"))?
        } else {
            BTreeMap::new()
        };
        let mut by_stem: BTreeMap<String, PathBuf> = BTreeMap::new();
        for entry in entries {
            let path = entry.map_err(|e| Error::io(&images, e))?.path();
            if !path.is_file() {
                continue;
            }
            let stem = path
                .file_stem()
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_default();
            if let Some(prev) = by_stem.insert(stem.clone(), path.clone()) {
                return Err(Error::data(format!(
                    "ambiguous stem {stem}: {} and {}",
                    prev.display(),
                    path.display()
                )));
            }
        }
        let mut refs = Vec::new();
        for (stem, path) in by_stem {
            let mask = masks.join(format!("{stem}.png"));
            if !mask.is_file() {
                return Err(Error::data(format!("no mask for image stem {stem}")));
            }
            let group = groups.get(&stem).cloned().unwrap_or_else(|| stem.clone());
            refs.push(SampleRef {
                stem,
                image: path,
                mask,
                group,
            });
        }
        if let Ok(entries) = fs::read_dir(&masks) {
            for entry in entries.flatten() {
                let p = entry.path();
                let stem = p.file_stem().map(|s| s.to_string_lossy().into_owned());
                if stem.is_some_and(|s| !refs.iter().any(|r| r.stem == s)) {
                    log::warn!("mask {} has no matching image", p.display());
                }
            }
        }
        refs
    };
    if refs.is_empty() {
        return Err(Error::data(format!("no samples found under {}", root.display())));
    }
    refs.sort_by(|a, b| a.stem.cmp(&b.stem));
    Ok(refs)
}

/// Image `[C, H, W]` scaled to `[0, 1]` and its class-id mask `[H, W]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub stem: String,
    pub group: String,
    pub image: Array3<f32>,
    pub mask: Array2<u8>,
}

/// Decode an 8- or 16-bit PNG into `[C, H, W]` floats in `[0, 1]` with
/// `channels` 1 or 3. Grayscale is replicated for 3 channels.
pub fn read_image(path: &Path, channels: usize) -> Result<Array3<f32>> {
    let img = image::open(path).map_err(|e| Error::data(format!("{}: {e}", path.display())))?;
    match channels {
        1 => {
            let g = img.to_luma32f();
            let (w, h) = g.dimensions();
            Ok(Array3::from_shape_fn((1, h as usize, w as usize), |(_, y, x)| {
                g.get_pixel(x as u32, y as u32)[0]
            }))
        }
        3 => {
            let c = img.to_rgb32f();
            let (w, h) = c.dimensions();
            Ok(Array3::from_shape_fn((3, h as usize, w as usize), |(k, y, x)| {
                c.get_pixel(x as u32, y as u32)[k]
            }))
        }
        n => Err(Error::config(format!("in_channels: {n} unsupported for PNG input (1 or 3)"))),
    }
}

pub fn read_mask(path: &Path, num_classes: usize) -> Result<Array2<u8>> {
    let img = image::open(path).map_err(|e| Error::data(format!("{}: {e}", path.display())))?;
    let g = img.to_luma8();
    let (w, h) = g.dimensions();
    let m = Array2::from_shape_fn((h as usize, w as usize), |(y, x)| g.get_pixel(x as u32, y as u32)[0]);
    if let Some(v) = m.iter().find(|&&v| v as usize >= num_classes) {
        return Err(Error::data(format!(
            "{}: class id {v} outside [0, {num_classes})",
            path.display()
        )));
    }
    Ok(m)
}

/// Bilinear resize of every channel.
pub fn resize_image(img: &Array3<f32>, h: usize, w: usize) -> Array3<f32> {
    let (c, ih, iw) = img.dim();
    if (ih, iw) == (h, w) {
        return img.clone();
    }
    let mut out = Array3::zeros((c, h, w));
    for k in 0..c {
        let plane: ImageBuffer<Luma<f32>, Vec<f32>> =
            ImageBuffer::from_fn(iw as u32, ih as u32, |x, y| Luma([img[(k, y as usize, x as usize)]]));
        let r = imageops::resize(&plane, w as u32, h as u32, imageops::FilterType::Triangle);
        for (x, y, p) in r.enumerate_pixels() {
            out[(k, y as usize, x as usize)] = p[0];
        }
    }
    out
}

/// Nearest-neighbour resize of a class-id mask.
pub fn resize_mask(mask: &Array2<u8>, h: usize, w: usize) -> Array2<u8> {
    let (ih, iw) = mask.dim();
    if (ih, iw) == (h, w) {
        return mask.clone();
    }
    Array2::from_shape_fn((h, w), |(y, x)| {
        let sy = ((y as f64 + 0.5) * ih as f64 / h as f64) as usize;
        let sx = ((x as f64 + 0.5) * iw as f64 / w as f64) as usize;
        mask[(sy.min(ih - 1), sx.min(iw - 1))]
    })
}

/// An in-memory dataset resized to the model input.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub samples: Vec<Sample>,
    pub num_classes: usize,
    pub in_channels: usize,
}

impl Dataset {
    pub fn load(
        root: &Path,
        in_channels: usize,
        num_classes: usize,
        size: (usize, usize),
    ) -> Result<Self> {
        let refs = scan_dataset(root)?;
        let samples = refs
            .into_iter()
            .map(|r| {
                let image = read_image(&r.image, in_channels)?;
                let mask = read_mask(&r.mask, num_classes)?;
                if image.dim().1 != mask.dim().0 || image.dim().2 != mask.dim().1 {
                    return Err(Error::data(format!(
                        "{}: image {:?} and mask {:?} differ in size",
                        r.stem,
                        image.dim(),
                        mask.dim()
                    )));
                }
                Ok(Sample {
                    stem: r.stem,
                    group: r.group,
                    image: resize_image(&image, size.0, size.1),
                    mask: resize_mask(&mask, size.0, size.1),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            samples,
            num_classes,
            in_channels,
        })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn groups(&self) -> Vec<String> {
        self.samples.iter().map(|s| s.group.clone()).collect()
    }

    /// Per-channel mean and standard deviation over `indices`.
    pub fn channel_stats(&self, indices: &[usize]) -> Result<ChannelStats> {
        if indices.is_empty() {
            return Err(Error::data("channel statistics over an empty split"));
        }
        let c = self.in_channels;
        let (mut sum, mut sq, mut n) = (vec![0f64; c], vec![0f64; c], 0f64);
        for &i in indices {
            let img = &self.samples[i].image;
            for (k, plane) in img.axis_iter(Axis(0)).enumerate() {
                for &v in plane {
                    sum[k] += v as f64;
                    sq[k] += (v as f64) * (v as f64);
                }
            }
            n += (img.dim().1 * img.dim().2) as f64;
        }
        let mean: Vec<f32> = sum.iter().map(|s| (s / n) as f32).collect();
        let std = sq
            .iter()
            .zip(&sum)
            .map(|(q, s)| ((q / n - (s / n).powi(2)).max(0.0).sqrt().max(1e-6)) as f32)
            .collect();
        Ok(ChannelStats { mean, std })
    }
}

/// Stack images and masks into a `[B, C, H, W]` tensor and a mask batch.
pub fn make_batch(
    items: &[(Array3<f32>, Array2<u8>)],
    num_classes: usize,
) -> Result<(Tensor, MaskBatch)> {
    let (c, h, w) = items
        .first()
        .ok_or_else(|| Error::data("empty batch"))?
        .0
        .dim();
    let mut flat = Vec::with_capacity(items.len() * c * h * w);
    for (img, _) in items {
        if img.dim() != (c, h, w) {
            return Err(Error::shape(format!("batch images differ: {:?} vs {:?}", img.dim(), (c, h, w))));
        }
        flat.extend(img.iter().copied());
    }
    let x = Tensor::from_vec(flat, (items.len(), c, h, w), &Device::Cpu)?;
    let masks: Vec<Array2<u8>> = items.iter().map(|(_, m)| m.clone()).collect();
    Ok((x, MaskBatch::from_masks(&masks, num_classes)?))
}

/// One cross-validation split (sample indices).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Fold {
    pub train: Vec<usize>,
    pub test: Vec<usize>,
}

/// `k` grouped folds: all samples of a group land in the same test fold,
/// and fold sizes (counted in groups) differ by at most one. Deterministic
/// in `seed`.
pub fn make_folds(groups: &[String], k: usize, seed: u64) -> Result<Vec<Fold>> {
    if k < 2 {
        return Err(Error::config(format!("folds: need at least 2, got {k}")));
    }
    let mut unique: Vec<&String> = groups.iter().collect::<BTreeSet<_>>().into_iter().collect();
    if unique.len() < k {
        return Err(Error::data(format!(
            "{} groups cannot fill {k} folds",
            unique.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    unique.shuffle(&mut rng);
    let fold_of: BTreeMap<&String, usize> = unique.iter().enumerate().map(|(i, g)| (*g, i % k)).collect();
    Ok((0..k)
        .map(|f| {
            let (test, train): (Vec<usize>, Vec<usize>) =
                (0..groups.len()).partition(|&i| fold_of[&groups[i]] == f);
            Fold { train, test }
        })
        .collect())
}

/// `runs` independent repetitions of [`make_folds`], run `r` seeded from
/// `(seed, r)`.
pub fn make_fold_runs(groups: &[String], k: usize, runs: usize, seed: u64) -> Result<Vec<Vec<Fold>>> {
    if runs == 0 {
        return Err(Error::config("folds: need at least one run"));
    }
    (0..runs as u64)
        .map(|r| make_folds(groups, k, seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(r)))
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AugmentConfig {
    pub p_rotate: f64,
    pub max_angle_deg: f64,
    pub p_hflip: f64,
    pub p_vflip: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            p_rotate: 0.1,
            max_angle_deg: 35.0,
            p_hflip: 0.2,
            p_vflip: 0.2,
        }
    }
}

impl AugmentConfig {
    pub const NONE: Self = Self {
        p_rotate: 0.0,
        max_angle_deg: 0.0,
        p_hflip: 0.0,
        p_vflip: 0.0,
    };
}

/// The transforms that were applied to one sample.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct AugmentRecord {
    /// Rotation angle in degrees, if rotated.
    pub angle: Option<f64>,
    pub hflip: bool,
    pub vflip: bool,
}

/// The random stream for sample `index` in `epoch`. Independent of batch
/// composition and worker count.
pub fn sample_rng(seed: u64, epoch: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream((epoch << 32) ^ index);
    rng
}

/// Draw the transform parameters. Always consumes four variates
/// (rotate?, angle, hflip?, vflip?).
pub fn draw_augment<R: Rng>(cfg: &AugmentConfig, rng: &mut R) -> AugmentRecord {
    let u: [f64; 4] = [rng.random(), rng.random(), rng.random(), rng.random()];
    AugmentRecord {
        angle: (u[0] < cfg.p_rotate).then(|| (2.0 * u[1] - 1.0) * cfg.max_angle_deg),
        hflip: u[2] < cfg.p_hflip,
        vflip: u[3] < cfg.p_vflip,
    }
}

/// Rotate about the centre by `deg` degrees: bilinear for the image,
/// nearest for the mask, zero fill outside.
pub fn rotate(image: &Array3<f32>, mask: &Array2<u8>, deg: f64) -> (Array3<f32>, Array2<u8>) {
    let (c, h, w) = image.dim();
    let (s, co) = deg.to_radians().sin_cos();
    let (cy, cx) = ((h as f64 - 1.0) / 2.0, (w as f64 - 1.0) / 2.0);
    let src = |y: usize, x: usize| {
        let (dy, dx) = (y as f64 - cy, x as f64 - cx);
        (co * dy - s * dx + cy, s * dy + co * dx + cx)
    };
    let mut img = Array3::zeros((c, h, w));
    let mut m = Array2::zeros((h, w));
    for y in 0..h {
        for x in 0..w {
            let (sy, sx) = src(y, x);
            let (ny, nx) = (sy.round(), sx.round());
            if ny >= 0.0 && nx >= 0.0 && (ny as usize) < h && (nx as usize) < w {
                m[(y, x)] = mask[(ny as usize, nx as usize)];
            }
            let (y0, x0) = (sy.floor(), sx.floor());
            let (fy, fx) = ((sy - y0) as f32, (sx - x0) as f32);
            for k in 0..c {
                let at = |yy: f64, xx: f64| -> f32 {
                    if yy < 0.0 || xx < 0.0 || yy as usize >= h || xx as usize >= w {
                        0.0
                    } else {
                        image[(k, yy as usize, xx as usize)]
                    }
                };
                img[(k, y, x)] = at(y0, x0) * (1.0 - fy) * (1.0 - fx)
                    + at(y0, x0 + 1.0) * (1.0 - fy) * fx
                    + at(y0 + 1.0, x0) * fy * (1.0 - fx)
                    + at(y0 + 1.0, x0 + 1.0) * fy * fx;
            }
        }
    }
    (img, m)
}

/// Apply a drawn transform in the order rotate, horizontal flip, vertical flip.
pub fn apply_augment(
    image: &Array3<f32>,
    mask: &Array2<u8>,
    rec: &AugmentRecord,
) -> (Array3<f32>, Array2<u8>) {
    let (mut img, mut m) = match rec.angle {
        Some(a) => rotate(image, mask, a),
        None => (image.clone(), mask.clone()),
    };
    if rec.hflip {
        img.invert_axis(Axis(2));
        m.invert_axis(Axis(1));
    }
    if rec.vflip {
        img.invert_axis(Axis(1));
        m.invert_axis(Axis(0));
    }
    (img.as_standard_layout().to_owned(), m.as_standard_layout().to_owned())
}

pub fn augment<R: Rng>(
    image: &Array3<f32>,
    mask: &Array2<u8>,
    cfg: &AugmentConfig,
    rng: &mut R,
) -> (Array3<f32>, Array2<u8>, AugmentRecord) {
    let rec = draw_augment(cfg, rng);
    let (i, m) = apply_augment(image, mask, &rec);
    (i, m, rec)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub count: usize,
    pub size: (usize, usize),
    pub num_classes: usize,
    /// 1 (grayscale) or 3 (RGB).
    pub channels: usize,
    /// Inclusive range of shapes drawn per image.
    pub shapes_per_image: (usize, usize),
    /// Consecutive images sharing one group id.
    pub per_group: usize,
    pub seed: u64,
    pub overwrite: bool,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            count: 20,
            size: (64, 64),
            num_classes: 2,
            channels: 1,
            shapes_per_image: (2, 3),
            per_group: 1,
            seed: 0,
            overwrite: false,
        }
    }
}

/// Draw one synthetic image: a noisy dark background with filled ellipses
/// and rectangles, each carrying its class's intensity band. Shape `j` of
/// image `i` has class `1 + (i + j) mod (K - 1)`.
pub fn synthetic_sample(spec: &SyntheticSpec, index: usize) -> (Array3<f32>, Array2<u8>) {
    let (h, w) = spec.size;
    let mut rng = sample_rng(spec.seed, u32::MAX as u64, index as u64);
    let mut mask = Array2::<u8>::zeros((h, w));
    let (lo, hi) = spec.shapes_per_image;
    let shapes = rng.random_range(lo..=hi);
    for j in 0..shapes {
        let k = 1 + (index + j) % (spec.num_classes - 1);
        let cy = rng.random_range(0.25..0.75) * h as f64;
        let cx = rng.random_range(0.25..0.75) * w as f64;
        let ry = rng.random_range(0.1..0.25) * h as f64;
        let rx = rng.random_range(0.1..0.25) * w as f64;
        let ellipse = rng.random_bool(0.5);
        for y in 0..h {
            for x in 0..w {
                let (dy, dx) = ((y as f64 - cy) / ry, (x as f64 - cx) / rx);
                let inside = if ellipse {
                    dy * dy + dx * dx <= 1.0
                } else {
                    dy.abs() <= 1.0 && dx.abs() <= 1.0
                };
                if inside {
                    mask[(y, x)] = k as u8;
                }
            }
        }
    }
    let k = spec.num_classes.max(2) as f32;
    let mut image = Array3::<f32>::zeros((spec.channels, h, w));
    for y in 0..h {
        for x in 0..w {
            let cls = mask[(y, x)] as f32;
            let centre = if cls == 0.0 { 0.15 } else { 0.35 + 0.6 * cls / k };
            let v = (centre + rng.random_range(-0.08f32..0.08)).clamp(0.0, 1.0);
            for c in 0..spec.channels {
                image[(c, y, x)] = v;
            }
        }
    }
    (image, mask)
}

fn to_u8(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

pub fn write_image(path: &Path, image: &Array3<f32>) -> Result<()> {
    let (c, h, w) = image.dim();
    let res = match c {
        1 => GrayImage::from_fn(w as u32, h as u32, |x, y| Luma([to_u8(image[(0, y as usize, x as usize)])]))
            .save(path),
        3 => RgbImage::from_fn(w as u32, h as u32, |x, y| {
            Rgb([0, 1, 2].map(|k| to_u8(image[(k, y as usize, x as usize)])))
        })
        .save(path),
        n => return Err(Error::config(format!("cannot write a {n}-channel PNG"))),
    };
    res.map_err(|e| Error::data(format!("{}: {e}", path.display())))
}

pub fn write_mask(path: &Path, mask: &Array2<u8>) -> Result<()> {
    let (h, w) = mask.dim();
    GrayImage::from_fn(w as u32, h as u32, |x, y| Luma([mask[(y as usize, x as usize)]]))
        .save(path)
        .map_err(|e| Error::data(format!("{}: {e}", path.display())))
}

/// Write a synthetic dataset in the standard layout. Refuses a non-empty
/// directory unless `spec.overwrite` is set.
pub fn generate_synthetic(out: &Path, spec: &SyntheticSpec) -> Result<Vec<SampleRef>> {
    let (lo, hi) = spec.shapes_per_image;
    if spec.count == 0 || spec.num_classes < 2 || spec.per_group == 0 || lo == 0 || lo > hi {
        return Err(Error::config(
            "synthetic: need count > 0, >= 2 classes, per_group > 0 and 1 <= min shapes <= max shapes",
        ));
    }
    if spec.count * lo < spec.num_classes - 1 {
        return Err(Error::config("synthetic: too few shapes to cover every class"));
    }
    if out.exists() {
        let non_empty = fs::read_dir(out).map_err(|e| Error::io(out, e))?.next().is_some();
        if non_empty && !spec.overwrite {
            return Err(Error::data(format!(
                "{} is not empty; pass overwrite to replace it",
                out.display()
            )));
        }
    }
    let (images, masks) = (out.join("images"), out.join("masks"));
    for d in [&images, &masks] {
        fs::create_dir_all(d).map_err(|e| Error::io(d, e))?;
    }
    let mut groups = String::from("stem,group\n");
    let mut refs = Vec::with_capacity(spec.count);
    let mut seen = vec![false; spec.num_classes];
    for i in 0..spec.count {
        let stem = format!("case{i:04}");
        let group = format!("g{:03}", i / spec.per_group);
        let (img, mask) = synthetic_sample(spec, i);
        mask.iter().for_each(|&v| seen[v as usize] = true);
        let (ip, mp) = (images.join(format!("{stem}.png")), masks.join(format!("{stem}.png")));
        write_image(&ip, &img)?;
        write_mask(&mp, &mask)?;
        groups.push_str(&format!("{stem},{group}\n"));
        refs.push(SampleRef {
            stem,
            image: ip,
            mask: mp,
            group,
        });
    }
    let gp = out.join("groups.csv");
    fs::write(&gp, groups).map_err(|e| Error::io(&gp, e))?;
    if let Some(k) = (1..spec.num_classes).find(|&k| !seen[k]) {
        return Err(Error::data(format!("synthetic: class {k} was fully occluded in every image")));
    }
    Ok(refs)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn groups(n: usize) -> Vec<String> {
        (0..n).map(|i| format!("p{i}")).collect()
    }

    #[test]
    fn folds_of_23_groups() {
        let folds = make_folds(&groups(23), 5, 7).unwrap();
        let mut sizes: Vec<usize> = folds.iter().map(|f| f.test.len()).collect();
        sizes.sort_unstable_by(|a, b| b.cmp(a));
        assert_eq!(sizes, vec![5, 5, 5, 4, 4]);
        assert_eq!(make_folds(&groups(23), 5, 7).unwrap(), folds);
    }

    #[test]
    fn folds_keep_groups_together() {
        let g: Vec<String> = (0..30).map(|i| format!("p{}", i / 3)).collect();
        let folds = make_folds(&g, 5, 1).unwrap();
        let mut seen = vec![0; 30];
        for f in &folds {
            for &i in &f.test {
                seen[i] += 1;
                assert!(f.test.iter().all(|&j| g[j] != g[i] || f.test.contains(&j)));
                assert!(f.train.iter().all(|&j| g[j] != g[i]));
            }
            assert_eq!(f.train.len() + f.test.len(), 30);
        }
        assert!(seen.iter().all(|&s| s == 1));
        assert!(make_folds(&groups(3), 5, 0).is_err());
    }

    #[test]
    fn fold_runs_differ_but_repeat() {
        let runs = make_fold_runs(&groups(25), 5, 3, 4).unwrap();
        assert_eq!(runs.len(), 3);
        assert!(runs.iter().all(|r| r.iter().all(|f| f.test.len() == 5)));
        assert_ne!(runs[0], runs[1]);
        assert_eq!(make_fold_runs(&groups(25), 5, 3, 4).unwrap(), runs);
    }

    #[test]
    fn scan_rejects_missing_masks_and_ambiguous_stems() {
        let dir = tempfile::tempdir().unwrap();
        let spec = SyntheticSpec { count: 2, ..Default::default() };
        generate_synthetic(dir.path(), &spec).unwrap();
        assert_eq!(scan_dataset(dir.path()).unwrap().len(), 2);
        fs::copy(dir.path().join("images/case0000.png"), dir.path().join("images/case0000.jpg")).unwrap();
        let err = scan_dataset(dir.path()).unwrap_err().to_string();
        assert!(err.contains("case0000"), "{err}");
        fs::remove_file(dir.path().join("images/case0000.jpg")).unwrap();
        fs::remove_file(dir.path().join("masks/case0001.png")).unwrap();
        let err = scan_dataset(dir.path()).unwrap_err().to_string();
        assert!(err.contains("case0001"), "{err}");
    }

    #[test]
    fn regeneration_is_byte_identical() {
        let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
        let spec = SyntheticSpec { count: 20, num_classes: 3, seed: 7, ..Default::default() };
        generate_synthetic(a.path(), &spec).unwrap();
        generate_synthetic(b.path(), &spec).unwrap();
        for r in scan_dataset(a.path()).unwrap() {
            for (sub, p) in [("images", &r.image), ("masks", &r.mask)] {
                let other = b.path().join(sub).join(p.file_name().unwrap());
                assert_eq!(fs::read(p).unwrap(), fs::read(other).unwrap());
            }
        }
        assert_eq!(
            fs::read(a.path().join("groups.csv")).unwrap(),
            fs::read(b.path().join("groups.csv")).unwrap()
        );
    }

    #[test]
    fn zero_probabilities_are_identity() {
        let img = Array3::from_shape_fn((1, 5, 7), |(_, y, x)| (y * 7 + x) as f32 * 0.1);
        let mask = Array2::from_shape_fn((5, 7), |(y, x)| ((y * x) % 3) as u8);
        for s in 0..50 {
            let (i, m, rec) = augment(&img, &mask, &AugmentConfig::NONE, &mut sample_rng(s, 0, 0));
            assert_eq!(rec, AugmentRecord::default());
            assert_eq!(i, img);
            assert_eq!(m, mask);
        }
    }

    #[test]
    fn flips_are_involutions() {
        let img = Array3::from_shape_fn((1, 4, 5), |(_, y, x)| (y * 5 + x) as f32);
        let mask = Array2::from_shape_fn((4, 5), |(y, x)| ((y + x) % 3) as u8);
        let rec = AugmentRecord {
            angle: None,
            hflip: true,
            vflip: true,
        };
        let (i1, m1) = apply_augment(&img, &mask, &rec);
        assert_eq!(i1[(0, 0, 0)], 19.0);
        let (i2, m2) = apply_augment(&i1, &m1, &rec);
        assert_eq!(i2, img);
        assert_eq!(m2, mask);
    }

    #[test]
    fn zero_rotation_is_identity() {
        let img = Array3::from_shape_fn((2, 6, 6), |(c, y, x)| (c * 36 + y * 6 + x) as f32);
        let mask = Array2::from_shape_fn((6, 6), |(y, x)| (y > x) as u8);
        let (i, m) = rotate(&img, &mask, 0.0);
        assert_eq!(i, img);
        assert_eq!(m, mask);
    }

    #[test]
    fn quarter_turn_moves_corners() {
        let mut mask = Array2::<u8>::zeros((5, 5));
        mask[(0, 0)] = 1;
        let img = mask.mapv(f32::from).insert_axis(Axis(0));
        let (_, m) = rotate(&img, &mask, 90.0);
        assert_eq!(m.sum(), 1);
        assert!(m[(4, 0)] == 1 || m[(0, 4)] == 1);
    }

    #[test]
    fn sample_streams_are_stable() {
        let a = draw_augment(&AugmentConfig::default(), &mut sample_rng(3, 2, 9));
        let b = draw_augment(&AugmentConfig::default(), &mut sample_rng(3, 2, 9));
        assert_eq!(a, b);
    }

    #[test]
    fn sixteen_bit_gray_keeps_precision_and_replicates() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("deep.png");
        let img: ImageBuffer<Luma<u16>, Vec<u16>> = ImageBuffer::from_fn(3, 2, |x, y| Luma([(x + 3 * y) as u16 * 257 + 1]));
        img.save(&path).unwrap();
        let one = read_image(&path, 1).unwrap();
        assert!((one[[0, 1, 2]] - 1286.0 / 65535.0).abs() < 1e-7);
        let three = read_image(&path, 3).unwrap();
        assert_eq!(three.dim(), (3, 2, 3));
        assert_eq!(three.index_axis(Axis(0), 2), one.index_axis(Axis(0), 0));
    }

    #[test]
    fn synthetic_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let spec = SyntheticSpec {
            count: 4,
            size: (32, 32),
            num_classes: 3,
            per_group: 2,
            ..Default::default()
        };
        generate_synthetic(dir.path(), &spec).unwrap();
        assert!(generate_synthetic(dir.path(), &spec).is_err());
        let ds = Dataset::load(dir.path(), 1, 3, (32, 32)).unwrap();
        assert_eq!(ds.len(), 4);
        assert_eq!(ds.groups(), vec!["g000", "g000", "g001", "g001"]);
        let (img, mask) = synthetic_sample(&spec, 1);
        assert_eq!(ds.samples[1].mask, mask);
        let err = (&ds.samples[1].image - &img).mapv(f32::abs).fold(0f32, |a, &b| a.max(b));
        assert!(err <= 0.5 / 255.0 + 1e-6);
        assert!(mask.iter().any(|&v| v == 2));
        let stats = ds.channel_stats(&[0, 1]).unwrap();
        assert!(stats.mean[0] > 0.0 && stats.std[0] > 0.0);
    }

    #[test]
    fn out_of_range_mask_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let spec = SyntheticSpec {
            count: 1,
            num_classes: 3,
            ..Default::default()
        };
        generate_synthetic(dir.path(), &spec).unwrap();
        assert!(matches!(Dataset::load(dir.path(), 1, 2, (64, 64)), Err(Error::Data(_))));
    }

    proptest! {
        #[test]
        fn augment_preserves_shape_and_labels(seed in 0u64..1000, h in 4usize..12, w in 4usize..12) {
            let img = Array3::from_shape_fn((1, h, w), |(_, y, x)| ((y * w + x) % 7) as f32);
            let mask = Array2::from_shape_fn((h, w), |(y, x)| ((y + 2 * x) % 3) as u8);
            let cfg = AugmentConfig { p_rotate: 0.5, ..Default::default() };
            let (i, m, _) = augment(&img, &mask, &cfg, &mut sample_rng(seed, 0, 0));
            prop_assert_eq!(i.dim(), img.dim());
            prop_assert_eq!(m.dim(), mask.dim());
            let before: BTreeSet<u8> = mask.iter().copied().chain([0]).collect();
            prop_assert!(m.iter().all(|v| before.contains(v)));
        }
    }
}
