//! Datasets: a synthetic generator, Market-style folder ingestion, manifests,
//! the PK batch sampler and train-time augmentation.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use image::imageops::FilterType;
use image::{DynamicImage, GrayImage, RgbImage};
use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::clustering::Label;
use crate::diff::Array;
use crate::error::{Error, Result};

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Query,
    Gallery,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ReidSample {
    /// File stem, also used as the image id in label dumps.
    pub name: String,
    /// `[C×H×W]`, values in `[0, 1]`.
    pub image: Array,
    pub identity: usize,
    pub camera: usize,
    pub split: Split,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    /// Identities in the training split.
    pub num_identities: usize,
    /// Held-out identities that form query and gallery.
    pub num_test_identities: usize,
    pub images_per_identity: usize,
    pub num_cameras: usize,
    pub image_shape: [usize; 3],
    /// Standard deviation of per-pixel Gaussian noise.
    pub identity_noise: f64,
    /// Scale of the per-camera contrast and colour offsets.
    pub camera_shift_strength: f64,
    /// Chance that a sample carries a random occluding block.
    pub occlusion_prob: f64,
    /// Largest random shift, in pixels, of the figure within the frame.
    pub max_shift: usize,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            num_identities: 16,
            num_test_identities: 8,
            images_per_identity: 12,
            num_cameras: 3,
            image_shape: [3, 32, 16],
            identity_noise: 0.1,
            camera_shift_strength: 0.5,
            occlusion_prob: 0.2,
            max_shift: 1,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_cameras < 2 {
            return Err(Error::Config(format!(
                "synthetic data needs at least 2 cameras for cross-camera evaluation, got {}",
                self.num_cameras
            )));
        }
        if self.num_identities < 1 || self.num_test_identities < 1 {
            return Err(Error::Config("identity counts must be at least 1".into()));
        }
        if self.images_per_identity < self.num_cameras {
            return Err(Error::Config(format!(
                "images_per_identity ({}) must cover every camera ({})",
                self.images_per_identity, self.num_cameras
            )));
        }
        if self.image_shape.contains(&0) {
            return Err(Error::Config(format!("bad image shape {:?}", self.image_shape)));
        }
        let finite_nonneg = |v: f64| v.is_finite() && v >= 0.0;
        if !finite_nonneg(self.identity_noise) || !finite_nonneg(self.camera_shift_strength) {
            return Err(Error::Config("noise strengths must be finite and non-negative".into()));
        }
        if !(0.0..=1.0).contains(&self.occlusion_prob) {
            return Err(Error::Config("occlusion_prob must lie in [0, 1]".into()));
        }
        Ok(())
    }
}

/// An immutable collection of samples sharing one image shape.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub image_shape: [usize; 3],
    pub samples: Vec<ReidSample>,
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    image_shape: [usize; 3],
    samples: Vec<ManifestEntry>,
}

#[derive(Serialize, Deserialize)]
struct ManifestEntry {
    file: String,
    identity: usize,
    camera: usize,
    split: Split,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Sample indices belonging to `split`, in dataset order.
    pub fn indices(&self, split: Split) -> Vec<usize> {
        (0..self.samples.len())
            .filter(|&i| self.samples[i].split == split)
            .collect()
    }

    /// `[N×C×H×W]` batch of the given samples.
    pub fn images(&self, indices: &[usize]) -> Result<Array> {
        if indices.is_empty() {
            let [c, h, w] = self.image_shape;
            return Ok(Array::zeros(&[0, c, h, w]));
        }
        let items: Vec<Array> = indices.iter().map(|&i| self.samples[i].image.clone()).collect();
        Array::stack(&items)
    }

    pub fn identities(&self, indices: &[usize]) -> Vec<usize> {
        indices.iter().map(|&i| self.samples[i].identity).collect()
    }

    pub fn cameras(&self, indices: &[usize]) -> Vec<usize> {
        indices.iter().map(|&i| self.samples[i].camera).collect()
    }

    pub fn names(&self, indices: &[usize]) -> Vec<String> {
        indices.iter().map(|&i| self.samples[i].name.clone()).collect()
    }

    /// Writes `images/<name>.png` for every sample plus `manifest.json`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        let img_dir = dir.join("images");
        fs::create_dir_all(&img_dir).map_err(|e| Error::io(&img_dir, e))?;
        let mut entries = Vec::with_capacity(self.samples.len());
        for s in &self.samples {
            let file = format!("images/{}.png", s.name);
            to_image(&s.image)?.save(dir.join(&file))?;
            entries.push(ManifestEntry {
                file,
                identity: s.identity,
                camera: s.camera,
                split: s.split,
            });
        }
        let manifest = Manifest {
            image_shape: self.image_shape,
            samples: entries,
        };
        let path = dir.join(MANIFEST_FILE);
        let text = serde_json::to_string_pretty(&manifest)?;
        fs::write(&path, text).map_err(|e| Error::io(&path, e))
    }

    /// Reads a directory written by [`Dataset::save`].
    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join(MANIFEST_FILE);
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let manifest: Manifest = serde_json::from_str(&text)?;
        let mut samples = Vec::with_capacity(manifest.samples.len());
        for e in manifest.samples {
            let file = dir.join(&e.file);
            let img = image::open(&file)?;
            let image = from_image(&img, manifest.image_shape, false)
                .map_err(|err| Error::Dataset(format!("{}: {err}", file.display())))?;
            let name = Path::new(&e.file)
                .file_stem()
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_default();
            samples.push(ReidSample {
                name,
                image,
                identity: e.identity,
                camera: e.camera,
                split: e.split,
            });
        }
        Ok(Self {
            image_shape: manifest.image_shape,
            samples,
        })
    }
}

fn quantize(v: f64) -> f64 {
    (v.clamp(0.0, 1.0) * 255.0).round() / 255.0
}

fn to_image(a: &Array) -> Result<DynamicImage> {
    let [c, h, w] = match *a.shape() {
        [c, h, w] => [c, h, w],
        _ => return Err(Error::dim("to_image", a.shape(), &[3, 0, 0])),
    };
    let px = |ch: usize, y: usize, x: usize| (a.data()[(ch * h + y) * w + x].clamp(0.0, 1.0) * 255.0).round() as u8;
    match c {
        3 => Ok(DynamicImage::ImageRgb8(RgbImage::from_fn(w as u32, h as u32, |x, y| {
            let (x, y) = (x as usize, y as usize);
            image::Rgb([px(0, y, x), px(1, y, x), px(2, y, x)])
        }))),
        1 => Ok(DynamicImage::ImageLuma8(GrayImage::from_fn(w as u32, h as u32, |x, y| {
            image::Luma([px(0, y as usize, x as usize)])
        }))),
        _ => Err(Error::Input(format!("only 1 or 3 channel images can be written, got {c}"))),
    }
}

fn from_image(img: &DynamicImage, shape: [usize; 3], resize: bool) -> Result<Array> {
    let [c, h, w] = shape;
    let img = if img.width() as usize != w || img.height() as usize != h {
        if !resize {
            return Err(Error::Input(format!(
                "image is {}x{}, expected {w}x{h}",
                img.width(),
                img.height()
            )));
        }
        img.resize_exact(w as u32, h as u32, FilterType::Triangle)
    } else {
        img.clone()
    };
    let mut data = vec![0.0; c * h * w];
    match c {
        3 => {
            let rgb = img.to_rgb8();
            for (x, y, p) in rgb.enumerate_pixels() {
                for ch in 0..3 {
                    data[(ch * h + y as usize) * w + x as usize] = p.0[ch] as f64 / 255.0;
                }
            }
        }
        1 => {
            for (x, y, p) in img.to_luma8().enumerate_pixels() {
                data[y as usize * w + x as usize] = p.0[0] as f64 / 255.0;
            }
        }
        _ => return Err(Error::Input(format!("only 1 or 3 channel images are supported, got {c}"))),
    }
    Array::new(vec![c, h, w], data)
}

struct Camera {
    contrast: f64,
    offset: Vec<f64>,
}

/// Builds a deterministic synthetic re-ID dataset.
///
/// Every identity gets a prototype made of horizontal colour bands plus a
/// coarse texture. Each image applies its camera's contrast and colour shift,
/// Gaussian pixel noise and, optionally, a random occluder, then quantises to
/// 8-bit levels so PNG storage is lossless.
///
/// Training identities come first. Each held-out identity has one query
/// camera; its images from that camera form the query split and the rest the
/// gallery, so matches are always cross-camera.
pub fn generate_synthetic(cfg: &SynthConfig) -> Result<Dataset> {
    cfg.validate()?;
    let [c, h, w] = cfg.image_shape;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let total_ids = cfg.num_identities + cfg.num_test_identities;

    let prototypes: Vec<Vec<f64>> = (0..total_ids).map(|_| prototype(c, h, w, &mut rng)).collect();
    let s = cfg.camera_shift_strength;
    let cameras: Vec<Camera> = (0..cfg.num_cameras)
        .map(|_| Camera {
            contrast: 1.0 + s * rng.random_range(-0.5..0.5),
            offset: (0..c).map(|_| s * rng.random_range(-0.3..0.3)).collect(),
        })
        .collect();
    let noise = Normal::new(0.0, cfg.identity_noise).map_err(|e| Error::Config(e.to_string()))?;

    let mut samples = Vec::with_capacity(total_ids * cfg.images_per_identity);
    for (id, proto) in prototypes.iter().enumerate() {
        let test = id >= cfg.num_identities;
        let query_cam = id % cfg.num_cameras;
        for j in 0..cfg.images_per_identity {
            let cam_idx = j % cfg.num_cameras;
            let cam = &cameras[cam_idx];
            let m = cfg.max_shift as i64;
            let (sy, sx) = (rng.random_range(-m..=m) as isize, rng.random_range(-m..=m) as isize);
            let shifted = shift(proto, c, h, w, sy, sx);
            let mut data: Vec<f64> = shifted
                .iter()
                .enumerate()
                .map(|(i, &p)| {
                    let ch = i / (h * w);
                    cam.contrast * (p - 0.5) + 0.5 + cam.offset[ch] + noise.sample(&mut rng)
                })
                .collect();
            if rng.random_bool(cfg.occlusion_prob) {
                occlude(&mut data, c, h, w, &mut rng);
            }
            data.iter_mut().for_each(|v| *v = quantize(*v));
            let split = match (test, cam_idx == query_cam) {
                (false, _) => Split::Train,
                (true, true) => Split::Query,
                (true, false) => Split::Gallery,
            };
            samples.push(ReidSample {
                name: format!("{id:04}_c{}s1_{j:06}", cam_idx + 1),
                image: Array::new(vec![c, h, w], data)?,
                identity: id,
                camera: cam_idx + 1,
                split,
            });
        }
    }
    Ok(Dataset {
        image_shape: cfg.image_shape,
        samples,
    })
}

fn prototype<R: Rng + ?Sized>(c: usize, h: usize, w: usize, rng: &mut R) -> Vec<f64> {
    const BANDS: usize = 4;
    let colours: Vec<Vec<f64>> = (0..BANDS)
        .map(|_| (0..c).map(|_| rng.random_range(0.1..0.9)).collect())
        .collect();
    let (th, tw) = (h.div_ceil(4).max(1), w.div_ceil(4).max(1));
    let texture: Vec<f64> = (0..th * tw).map(|_| rng.random_range(-0.15..0.15)).collect();
    let mut out = vec![0.0; c * h * w];
    for ch in 0..c {
        for y in 0..h {
            let band = (y * BANDS / h).min(BANDS - 1);
            for x in 0..w {
                let t = texture[(y * th / h) * tw + x * tw / w];
                out[(ch * h + y) * w + x] = colours[band][ch] + t;
            }
        }
    }
    out
}

/// Translates by `(sy, sx)`, repeating edge pixels into the vacated border.
fn shift(src: &[f64], c: usize, h: usize, w: usize, sy: isize, sx: isize) -> Vec<f64> {
    let clampi = |v: isize, n: usize| v.clamp(0, n as isize - 1) as usize;
    let mut out = vec![0.0; src.len()];
    for ch in 0..c {
        for y in 0..h {
            let yy = clampi(y as isize - sy, h);
            for x in 0..w {
                let xx = clampi(x as isize - sx, w);
                out[(ch * h + y) * w + x] = src[(ch * h + yy) * w + xx];
            }
        }
    }
    out
}

fn occlude<R: Rng + ?Sized>(data: &mut [f64], c: usize, h: usize, w: usize, rng: &mut R) {
    let (bh, bw) = ((h / 3).max(1), (w / 2).max(1));
    let y0 = rng.random_range(0..=h - bh);
    let x0 = rng.random_range(0..=w - bw);
    let colour: Vec<f64> = (0..c).map(|_| rng.random_range(0.0..1.0)).collect();
    for (ch, col) in colour.iter().enumerate() {
        for y in y0..y0 + bh {
            for x in x0..x0 + bw {
                data[(ch * h + y) * w + x] = *col;
            }
        }
    }
}

/// Identity and camera from a Market-style name such as `0002_c1s1_000451_03.jpg`.
pub fn parse_market_name(file_name: &str) -> Result<(usize, usize)> {
    let stem = Path::new(file_name)
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    let bad = |why: &str| Error::Dataset(format!("`{file_name}`: {why}"));
    let mut parts = stem.split('_');
    let id_part = parts.next().unwrap_or("");
    if id_part.is_empty() || !id_part.bytes().all(|b| b.is_ascii_digit()) {
        return Err(bad("identity prefix is not a non-negative integer"));
    }
    let identity = id_part.parse().map_err(|_| bad("identity out of range"))?;
    let cam_part = parts.next().ok_or_else(|| bad("missing camera field"))?;
    let digits: String = cam_part
        .strip_prefix('c')
        .ok_or_else(|| bad("camera field must start with `c`"))?
        .chars()
        .take_while(char::is_ascii_digit)
        .collect();
    if digits.is_empty() {
        return Err(bad("camera field has no number"));
    }
    let camera = digits.parse().map_err(|_| bad("camera out of range"))?;
    if parts.next().is_none_or(str::is_empty) {
        return Err(bad("missing sequence field"));
    }
    Ok((identity, camera))
}

#[derive(Clone, Debug, PartialEq)]
pub struct RejectedFile {
    pub path: PathBuf,
    pub reason: String,
}

/// Result of ingesting a folder: the loaded samples and every skipped file.
#[derive(Clone, Debug)]
pub struct FolderLoad {
    pub dataset: Dataset,
    pub rejected: Vec<RejectedFile>,
}

const IMAGE_EXTENSIONS: [&str; 3] = ["jpg", "jpeg", "png"];

/// Loads every image in `path` (sorted by file name) as `split`, resizing
/// bilinearly to `shape`. Files with unparsable names are listed, not loaded.
pub fn load_folder(path: &Path, shape: [usize; 3], split: Split) -> Result<FolderLoad> {
    let entries = fs::read_dir(path).map_err(|e| Error::io(path, e))?;
    let mut files: Vec<PathBuf> = Vec::new();
    for entry in entries {
        let entry = entry.map_err(|e| Error::io(path, e))?;
        if entry.file_type().map_err(|e| Error::io(entry.path(), e))?.is_file() {
            files.push(entry.path());
        }
    }
    if files.is_empty() {
        return Err(Error::Dataset(format!("no files in {}", path.display())));
    }
    files.sort();

    let mut samples = Vec::new();
    let mut rejected = Vec::new();
    for file in files {
        let name = file.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
        let ext = file
            .extension()
            .map(|e| e.to_string_lossy().to_ascii_lowercase())
            .unwrap_or_default();
        if !IMAGE_EXTENSIONS.contains(&ext.as_str()) {
            rejected.push(RejectedFile {
                path: file,
                reason: "not a jpg/png image".into(),
            });
            continue;
        }
        let (identity, camera) = match parse_market_name(&name) {
            Ok(v) => v,
            Err(e) => {
                rejected.push(RejectedFile {
                    path: file,
                    reason: e.to_string(),
                });
                continue;
            }
        };
        let image = match image::open(&file).map_err(Error::from).and_then(|img| from_image(&img, shape, true)) {
            Ok(a) => a,
            Err(e) => {
                rejected.push(RejectedFile {
                    path: file,
                    reason: e.to_string(),
                });
                continue;
            }
        };
        let stem = file.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
        samples.push(ReidSample {
            name: stem,
            image,
            identity,
            camera,
            split,
        });
    }
    if samples.is_empty() {
        let listing: Vec<String> = rejected
            .iter()
            .map(|r| format!("{}: {}", r.path.display(), r.reason))
            .collect();
        return Err(Error::Dataset(format!(
            "no loadable images in {}:\n  {}",
            path.display(),
            listing.join("\n  ")
        )));
    }
    Ok(FolderLoad {
        dataset: Dataset {
            image_shape: shape,
            samples,
        },
        rejected,
    })
}

/// Loads `manifest.json` if present, otherwise the Market-1501 layout
/// (`bounding_box_train`, `query`, `bounding_box_test`), skipping absent parts.
pub fn load_dataset_dir(dir: &Path, shape: [usize; 3]) -> Result<FolderLoad> {
    if dir.join(MANIFEST_FILE).is_file() {
        return Ok(FolderLoad {
            dataset: Dataset::load(dir)?,
            rejected: Vec::new(),
        });
    }
    let parts = [
        ("bounding_box_train", Split::Train),
        ("query", Split::Query),
        ("bounding_box_test", Split::Gallery),
    ];
    let mut samples = Vec::new();
    let mut rejected = Vec::new();
    for (sub, split) in parts {
        let p = dir.join(sub);
        if p.is_dir() {
            let part = load_folder(&p, shape, split)?;
            samples.extend(part.dataset.samples);
            rejected.extend(part.rejected);
        }
    }
    if samples.is_empty() {
        return Err(Error::Dataset(format!(
            "{} has neither {MANIFEST_FILE} nor Market-style split folders",
            dir.display()
        )));
    }
    Ok(FolderLoad {
        dataset: Dataset {
            image_shape: shape,
            samples,
        },
        rejected,
    })
}

/// A PK batch: `indices` grouped by class, `K` per class.
#[derive(Clone, Debug, PartialEq)]
pub struct PkBatch {
    pub indices: Vec<usize>,
    pub classes: Vec<usize>,
    /// Fewer than `P` classes were available.
    pub fallback: bool,
}

/// Samples `P` distinct pseudo-classes uniformly, then `K` members of each.
/// Classes smaller than `K` are drawn with replacement; noise never appears.
pub fn pk_sample<R: Rng + ?Sized>(labels: &[Label], p: usize, k: usize, rng: &mut R) -> Result<PkBatch> {
    if p == 0 || k == 0 {
        return Err(Error::Config("PK batch needs P ≥ 1 and K ≥ 1".into()));
    }
    let mut by_class: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, l) in labels.iter().enumerate() {
        if let Some(c) = l {
            by_class.entry(*c).or_default().push(i);
        }
    }
    if by_class.is_empty() {
        return Err(Error::Input("every sample is noise; nothing to sample".into()));
    }
    let classes: Vec<(&usize, &Vec<usize>)> = by_class.iter().collect();
    let take = p.min(classes.len());
    let mut chosen = Vec::with_capacity(take);
    let mut indices = Vec::with_capacity(take * k);
    for ci in index::sample(rng, classes.len(), take) {
        let (&class, members) = classes[ci];
        chosen.push(class);
        if members.len() >= k {
            indices.extend(index::sample(rng, members.len(), k).into_iter().map(|m| members[m]));
        } else {
            indices.extend((0..k).map(|_| members[rng.random_range(0..members.len())]));
        }
    }
    Ok(PkBatch {
        indices,
        classes: chosen,
        fallback: take < p,
    })
}

/// Deterministic augmentation of `image: [C×H×W]`: optional horizontal flip,
/// then zero-pad by `pad` and crop the original size at offset `(dy, dx)`.
/// `(pad, pad)` is the centred crop.
pub fn augment_with(image: &Array, flip: bool, dy: usize, dx: usize, pad: usize) -> Result<Array> {
    let [c, h, w] = match *image.shape() {
        [c, h, w] => [c, h, w],
        _ => return Err(Error::dim("augment", image.shape(), &[0, 0, 0])),
    };
    if dy > 2 * pad || dx > 2 * pad {
        return Err(Error::Input(format!("crop offset ({dy}, {dx}) outside padding {pad}")));
    }
    let src = image.data();
    let mut out = vec![0.0; c * h * w];
    for ch in 0..c {
        for y in 0..h {
            let sy = (y + dy) as isize - pad as isize;
            if sy < 0 || sy >= h as isize {
                continue;
            }
            for x in 0..w {
                let sx = (x + dx) as isize - pad as isize;
                if sx < 0 || sx >= w as isize {
                    continue;
                }
                let sx = if flip { w - 1 - sx as usize } else { sx as usize };
                out[(ch * h + y) * w + x] = src[(ch * h + sy as usize) * w + sx];
            }
        }
    }
    Array::new(vec![c, h, w], out)
}

/// Random flip (p = 0.5) and random pad-and-crop.
pub fn augment<R: Rng + ?Sized>(image: &Array, pad: usize, rng: &mut R) -> Result<Array> {
    let flip = rng.random_bool(0.5);
    let dy = rng.random_range(0..=2 * pad);
    let dx = rng.random_range(0..=2 * pad);
    augment_with(image, flip, dy, dx, pad)
}

/// Augments every image of a `[N×C×H×W]` batch independently.
pub fn augment_batch<R: Rng + ?Sized>(batch: &Array, pad: usize, rng: &mut R) -> Result<Array> {
    let n = batch.dim(0);
    let shape = batch.shape()[1..].to_vec();
    let items = (0..n)
        .map(|i| augment(&Array::new(shape.clone(), batch.row(i).to_vec())?, pad, rng))
        .collect::<Result<Vec<_>>>()?;
    Array::stack(&items)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> SynthConfig {
        SynthConfig {
            num_identities: 3,
            num_test_identities: 2,
            images_per_identity: 4,
            num_cameras: 2,
            image_shape: [3, 8, 4],
            seed: 7,
            ..SynthConfig::default()
        }
    }

    #[test]
    fn noiseless_identity_images_are_identical() {
        let cfg = SynthConfig {
            identity_noise: 0.0,
            camera_shift_strength: 0.0,
            occlusion_prob: 0.0,
            max_shift: 0,
            ..small()
        };
        let d = generate_synthetic(&cfg).unwrap();
        for id in 0..5 {
            let imgs: Vec<&Array> = d.samples.iter().filter(|s| s.identity == id).map(|s| &s.image).collect();
            assert_eq!(imgs.len(), 4);
            assert!(imgs.iter().all(|a| a.bit_eq(imgs[0])));
        }
    }

    #[test]
    fn generation_is_deterministic() {
        let cfg = SynthConfig {
            occlusion_prob: 0.5,
            ..small()
        };
        assert_eq!(generate_synthetic(&cfg).unwrap(), generate_synthetic(&cfg).unwrap());
        let other = SynthConfig { seed: 8, ..cfg.clone() };
        assert_ne!(generate_synthetic(&cfg).unwrap(), generate_synthetic(&other).unwrap());
    }

    #[test]
    fn one_camera_is_rejected() {
        let cfg = SynthConfig {
            num_cameras: 1,
            ..small()
        };
        assert!(matches!(generate_synthetic(&cfg), Err(Error::Config(_))));
    }

    #[test]
    fn splits_are_cross_camera() {
        let d = generate_synthetic(&SynthConfig::default()).unwrap();
        assert_eq!(d.indices(Split::Train).len(), 16 * 12);
        let q = d.indices(Split::Query);
        let g = d.indices(Split::Gallery);
        assert_eq!(q.len() + g.len(), 8 * 12);
        for &qi in &q {
            let qs = &d.samples[qi];
            assert!(qs.identity >= 16);
            let matches: Vec<_> = g.iter().filter(|&&gi| d.samples[gi].identity == qs.identity).collect();
            assert!(!matches.is_empty());
            assert!(matches.iter().all(|&&gi| d.samples[gi].camera != qs.camera));
        }
        for s in &d.samples {
            assert!(s.image.data().iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }

    #[test]
    fn parses_market_names() {
        assert_eq!(parse_market_name("0002_c1s1_000451_03.jpg").unwrap(), (2, 1));
        assert_eq!(parse_market_name("1501_c6s4_001877_02.png").unwrap(), (1501, 6));
        assert_eq!(parse_market_name("0000_c12_7.jpg").unwrap(), (0, 12));
        for bad in ["-1_c1s1_000401_03.jpg", "abc_c1_1.jpg", "0002_1s1_000451.jpg", "0002_c_1.jpg", "0002_c1.jpg", "0002.jpg"] {
            assert!(parse_market_name(bad).is_err(), "{bad}");
        }
    }

    #[test]
    fn empty_folder_error_names_path() {
        let dir = tempfile::tempdir().unwrap();
        let err = load_folder(dir.path(), [3, 8, 4], Split::Train).unwrap_err();
        assert!(err.to_string().contains(&dir.path().display().to_string()));
    }

    #[test]
    fn mixed_folder_loads_valid_and_lists_invalid() {
        let dir = tempfile::tempdir().unwrap();
        let img = RgbImage::from_pixel(6, 12, image::Rgb([255, 0, 51]));
        img.save(dir.path().join("0002_c1s1_000451_03.png")).unwrap();
        img.save(dir.path().join("0007_c3s2_000001_01.png")).unwrap();
        img.save(dir.path().join("junk.png")).unwrap();
        fs::write(dir.path().join("notes.txt"), "x").unwrap();
        let out = load_folder(dir.path(), [3, 8, 4], Split::Gallery).unwrap();
        let ids: Vec<(usize, usize)> = out.dataset.samples.iter().map(|s| (s.identity, s.camera)).collect();
        assert_eq!(ids, vec![(2, 1), (7, 3)]);
        assert_eq!(out.rejected.len(), 2);
        let s = &out.dataset.samples[0];
        assert_eq!(s.image.shape(), &[3, 8, 4]);
        assert!((s.image.get(&[0, 3, 2]) - 1.0).abs() < 1e-12);
        assert!((s.image.get(&[2, 3, 2]) - 0.2).abs() < 1e-12);
    }

    #[test]
    fn manifest_round_trip() {
        let d = generate_synthetic(&small()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        d.save(dir.path()).unwrap();
        let back = Dataset::load(dir.path()).unwrap();
        assert_eq!(back, d);
        let via_dir = load_dataset_dir(dir.path(), [3, 8, 4]).unwrap();
        assert_eq!(via_dir.dataset, d);
    }

    #[test]
    fn pk_whole_set() {
        let labels = [Some(0), Some(1), Some(0), Some(1), None];
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let b = pk_sample(&labels, 2, 2, &mut rng).unwrap();
        let mut idx = b.indices.clone();
        idx.sort();
        assert_eq!(idx, vec![0, 1, 2, 3]);
        assert!(!b.fallback);
    }

    #[test]
    fn pk_small_class_uses_replacement_and_fallback_flags() {
        let labels = [Some(0), Some(1), Some(1), Some(1)];
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let b = pk_sample(&labels, 3, 3, &mut rng).unwrap();
        assert!(b.fallback);
        assert_eq!(b.indices.len(), 6);
        assert_eq!(b.indices.iter().filter(|&&i| i == 0).count(), 3);
        assert!(pk_sample(&[None, None], 1, 1, &mut rng).is_err());
    }

    #[test]
    fn pk_class_frequency_is_uniform() {
        // 8 classes, choose 3 per draw: each class has probability 3/8.
        let labels: Vec<Label> = (0..40).map(|i| Some(i % 8)).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let draws = 1000;
        let mut counts = [0usize; 8];
        for _ in 0..draws {
            let b = pk_sample(&labels, 3, 2, &mut rng).unwrap();
            let mut seen = b.classes.clone();
            seen.sort();
            seen.dedup();
            assert_eq!(seen.len(), 3);
            for i in &b.indices {
                assert!(b.classes.contains(&labels[*i].unwrap()));
            }
            for c in b.classes {
                counts[c] += 1;
            }
        }
        let p = 3.0 / 8.0;
        let mean = draws as f64 * p;
        let sd = (draws as f64 * p * (1.0 - p)).sqrt();
        for c in counts {
            assert!((c as f64 - mean).abs() < 3.0 * sd, "{counts:?}");
        }
    }

    fn ramp(c: usize, h: usize, w: usize) -> Array {
        let n = c * h * w;
        Array::new(vec![c, h, w], (0..n).map(|i| i as f64 / n as f64).collect()).unwrap()
    }

    #[test]
    fn centred_unflipped_augment_is_identity() {
        let x = ramp(3, 6, 4);
        assert!(augment_with(&x, false, 2, 2, 2).unwrap().bit_eq(&x));
    }

    #[test]
    fn double_flip_is_identity() {
        let x = ramp(2, 5, 3);
        let once = augment_with(&x, true, 1, 1, 1).unwrap();
        assert!(!once.bit_eq(&x));
        assert!(augment_with(&once, true, 1, 1, 1).unwrap().bit_eq(&x));
    }

    #[test]
    fn shifted_crop_moves_content() {
        let x = ramp(1, 4, 4);
        let y = augment_with(&x, false, 0, 2, 1).unwrap();
        // dy = 0 shifts content down a row, dx = 2 shifts it left a column.
        assert_eq!(y.get(&[0, 0, 1]), 0.0);
        assert_eq!(y.get(&[0, 1, 0]), x.get(&[0, 0, 1]));
        assert_eq!(y.get(&[0, 2, 0]), x.get(&[0, 1, 1]));
        assert_eq!(y.get(&[0, 2, 3]), 0.0);
    }

    #[test]
    fn augment_keeps_shape_and_range() {
        let x = ramp(3, 8, 4);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..100 {
            let y = augment(&x, 2, &mut rng).unwrap();
            assert_eq!(y.shape(), x.shape());
            assert!(y.data().iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }
}
