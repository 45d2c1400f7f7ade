//! Synthetic fracture-like dataset: bright bands on a noisy background with
//! dark transverse gaps, stored as 8-bit PGM files plus a JSON manifest.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::augment::{augment, AugmentPolicy, AugmentedSample};
use crate::error::{Error, Result};
use crate::geometry::BBox;
use crate::image::GrayImage;

pub const MANIFEST_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";
const MIN_GT_AREA: f64 = 16.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthParams {
    pub width: usize,
    pub height: usize,
    /// Inclusive range of gaps per image.
    pub gaps_per_image: (usize, usize),
    pub band_width: (f64, f64),
    /// Band axis angle from vertical, degrees.
    pub band_angle_deg: (f64, f64),
    /// Gap thickness along the band axis.
    pub gap_size: (f64, f64),
    /// Gap tilt away from perpendicular, degrees.
    pub gap_tilt_deg: (f64, f64),
    pub band_intensity: (f64, f64),
    pub background: f64,
    /// Intensity drop inside a gap relative to the band.
    pub gap_contrast: f64,
    /// Standard deviation of additive Gaussian noise.
    pub noise: f64,
    /// Probability of an extra gap-free band.
    pub distractor_p: f64,
    /// Smallest distance between gap centres along the axis.
    pub min_gap_spacing: f64,
}

impl Default for SynthParams {
    fn default() -> Self {
        SynthParams {
            width: 128,
            height: 128,
            gaps_per_image: (1, 3),
            band_width: (28.0, 44.0),
            band_angle_deg: (-35.0, 35.0),
            gap_size: (6.0, 12.0),
            gap_tilt_deg: (-20.0, 20.0),
            band_intensity: (0.6, 0.85),
            background: 0.15,
            gap_contrast: 0.15,
            noise: 0.08,
            distractor_p: 0.5,
            min_gap_spacing: 30.0,
        }
    }
}

impl SynthParams {
    pub fn validate(&self) -> Result<()> {
        let ranges = [
            ("band_width", self.band_width),
            ("band_angle_deg", self.band_angle_deg),
            ("gap_size", self.gap_size),
            ("gap_tilt_deg", self.gap_tilt_deg),
            ("band_intensity", self.band_intensity),
        ];
        for (name, (lo, hi)) in ranges {
            if !(lo <= hi) {
                return Err(Error::Config(format!("{name} range is empty: ({lo}, {hi})")));
            }
        }
        let (lo, hi) = self.gaps_per_image;
        if lo == 0 || lo > hi || hi > 3 {
            return Err(Error::Config(format!("gaps_per_image must lie within 1..=3, got ({lo}, {hi})")));
        }
        if self.width < 32 || self.height < 32 {
            return Err(Error::Config("images must be at least 32 x 32".into()));
        }
        if self.noise < 0.0 || self.gap_contrast <= 0.0 || self.band_width.0 <= 0.0 || self.gap_size.0 <= 0.0 {
            return Err(Error::Config("noise, contrast, band width and gap size must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImageEntry {
    pub id: u32,
    /// Relative to the manifest directory.
    pub file: String,
    pub width: usize,
    pub height: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Annotation {
    pub image_id: u32,
    pub bbox: BBox,
    pub class_id: u32,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Splits {
    pub labeled: Vec<u32>,
    pub unlabeled: Vec<u32>,
    pub test: Vec<u32>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneratorInfo {
    pub seed: u64,
    pub params: SynthParams,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub version: u32,
    pub generator: GeneratorInfo,
    pub images: Vec<ImageEntry>,
    pub annotations: Vec<Annotation>,
    pub splits: Splits,
}

impl DatasetManifest {
    /// Ids of the training pool (everything outside the test split).
    pub fn train_ids(&self) -> Vec<u32> {
        let test: BTreeSet<u32> = self.splits.test.iter().copied().collect();
        self.images
            .iter()
            .map(|e| e.id)
            .filter(|id| !test.contains(id))
            .collect()
    }

    pub fn boxes_by_image(&self) -> BTreeMap<u32, Vec<BBox>> {
        let mut out: BTreeMap<u32, Vec<BBox>> = self.images.iter().map(|e| (e.id, Vec::new())).collect();
        for a in &self.annotations {
            out.entry(a.image_id).or_default().push(a.bbox);
        }
        out
    }

    pub fn validate(&self, origin: &Path) -> Result<()> {
        let bad = |why: String| Error::format(origin, why);
        if self.version != MANIFEST_VERSION {
            return Err(bad(format!("unsupported manifest version {}", self.version)));
        }
        let mut sizes = BTreeMap::new();
        for e in &self.images {
            if sizes.insert(e.id, (e.width, e.height)).is_some() {
                return Err(bad(format!("duplicate image id {}", e.id)));
            }
        }
        for a in &self.annotations {
            let Some(&(w, h)) = sizes.get(&a.image_id) else {
                return Err(bad(format!("annotation references missing image {}", a.image_id)));
            };
            let b = &a.bbox;
            if !b.is_valid() || b.x1 < 0.0 || b.y1 < 0.0 || b.x2 > w as f64 || b.y2 > h as f64 {
                return Err(bad(format!("annotation box {:?} outside image {}", b.as_array(), a.image_id)));
            }
        }
        let mut seen = BTreeSet::new();
        for id in self.splits.labeled.iter().chain(&self.splits.unlabeled).chain(&self.splits.test) {
            if !sizes.contains_key(id) {
                return Err(bad(format!("split references missing image {id}")));
            }
            if !seen.insert(*id) {
                return Err(bad(format!("image {id} appears in more than one split")));
            }
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let m: DatasetManifest =
            serde_json::from_str(&text).map_err(|e| Error::format(path, format!("bad manifest: {e}")))?;
        m.validate(path)?;
        Ok(m)
    }
}

/// One rendered image with its ground-truth boxes.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthImage {
    pub image: GrayImage,
    pub boxes: Vec<BBox>,
}

struct Band {
    cx: f64,
    cy: f64,
    dir: (f64, f64),
    half_width: f64,
    intensity: f64,
}

impl Band {
    /// `(along-axis, across-axis)` coordinates of a point.
    fn local(&self, x: f64, y: f64) -> (f64, f64) {
        let (dx, dy) = (x - self.cx, y - self.cy);
        (dx * self.dir.0 + dy * self.dir.1, dx * self.dir.1 - dy * self.dir.0)
    }

    fn contains(&self, x: f64, y: f64) -> bool {
        self.local(x, y).1.abs() <= self.half_width
    }
}

struct Gap {
    along: f64,
    half_size: f64,
    tilt: f64,
}

impl Gap {
    fn contains(&self, band: &Band, x: f64, y: f64) -> bool {
        let (a, p) = band.local(x, y);
        p.abs() <= band.half_width && (a - self.along - self.tilt * p).abs() <= self.half_size
    }
}

fn range(rng: &mut ChaCha8Rng, (lo, hi): (f64, f64)) -> f64 {
    if hi > lo {
        rng.gen_range(lo..hi)
    } else {
        lo
    }
}

/// Render one image. Deterministic in `rng`.
pub fn render_synthetic(params: &SynthParams, rng: &mut ChaCha8Rng) -> SynthImage {
    let (w, h) = (params.width, params.height);
    loop {
        let angle = range(rng, params.band_angle_deg).to_radians();
        let band = Band {
            cx: w as f64 / 2.0 + rng.gen_range(-0.12..0.12) * w as f64,
            cy: h as f64 / 2.0 + rng.gen_range(-0.12..0.12) * h as f64,
            dir: (angle.sin(), angle.cos()),
            half_width: range(rng, params.band_width) / 2.0,
            intensity: range(rng, params.band_intensity),
        };
        let distractor = rng.gen_bool(params.distractor_p.clamp(0.0, 1.0)).then(|| {
            let hw = range(rng, params.band_width) / 3.0;
            let side = if rng.gen::<bool>() { 1.0 } else { -1.0 };
            let offset = side * (band.half_width + hw + rng.gen_range(6.0..20.0));
            let a2 = angle + rng.gen_range(-0.15..0.15);
            Band {
                cx: band.cx + offset * band.dir.1,
                cy: band.cy - offset * band.dir.0,
                dir: (a2.sin(), a2.cos()),
                half_width: hw,
                intensity: range(rng, params.band_intensity) * 0.9,
            }
        });

        let n_gaps = rng.gen_range(params.gaps_per_image.0..=params.gaps_per_image.1);
        let reach = 0.3 * w.min(h) as f64;
        let mut gaps: Vec<Gap> = Vec::new();
        let mut tries = 0;
        while gaps.len() < n_gaps && tries < 200 {
            tries += 1;
            let along = rng.gen_range(-reach..reach);
            if gaps.iter().all(|g| (g.along - along).abs() >= params.min_gap_spacing) {
                gaps.push(Gap {
                    along,
                    half_size: range(rng, params.gap_size) / 2.0,
                    tilt: range(rng, params.gap_tilt_deg).to_radians().tan(),
                });
            }
        }
        if gaps.len() < n_gaps {
            continue;
        }

        let noise = Normal::new(0.0, params.noise.max(0.0)).expect("finite std");
        let mut image = GrayImage::new(w, h);
        let mut extents: Vec<Option<(usize, usize, usize, usize)>> = vec![None; gaps.len()];
        for y in 0..h {
            for x in 0..w {
                let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
                let mut v = params.background;
                if let Some(d) = &distractor {
                    if d.contains(px, py) {
                        v = d.intensity;
                    }
                }
                if band.contains(px, py) {
                    v = band.intensity;
                    for (g, e) in gaps.iter().zip(extents.iter_mut()) {
                        if g.contains(&band, px, py) {
                            v = band.intensity - params.gap_contrast;
                            *e = Some(match *e {
                                None => (x, y, x, y),
                                Some((x0, y0, x1, y1)) => (x0.min(x), y0.min(y), x1.max(x), y1.max(y)),
                            });
                        }
                    }
                }
                if params.noise > 0.0 {
                    v += noise.sample(rng);
                }
                image.set(x, y, quantize(v));
            }
        }
        let boxes: Vec<BBox> = extents
            .iter()
            .flatten()
            .map(|&(x0, y0, x1, y1)| BBox::new(x0 as f64, y0 as f64, (x1 + 1) as f64, (y1 + 1) as f64))
            .collect();
        if boxes.len() == gaps.len() && boxes.iter().all(|b| b.area() >= MIN_GT_AREA) {
            return SynthImage { image, boxes };
        }
    }
}

/// Round to the 8-bit grid so in-memory images equal their files.
fn quantize(v: f64) -> f32 {
    (v.clamp(0.0, 1.0) * 255.0).round() as f32 / 255.0
}

pub fn write_pgm(path: &Path, img: &GrayImage) -> Result<()> {
    let bytes: Vec<u8> = img
        .data
        .iter()
        .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect();
    let buf = image::GrayImage::from_raw(img.width as u32, img.height as u32, bytes)
        .ok_or_else(|| Error::format(path, "pixel buffer does not match dimensions"))?;
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = std::io::BufWriter::new(file);
    let enc = image::codecs::pnm::PnmEncoder::new(&mut out).with_subtype(
        image::codecs::pnm::PnmSubtype::Graymap(image::codecs::pnm::SampleEncoding::Binary),
    );
    buf.write_with_encoder(enc)
        .map_err(|e| Error::format(path, format!("cannot encode PGM: {e}")))
}

pub fn read_pgm(path: &Path) -> Result<GrayImage> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let img = image::load_from_memory_with_format(&bytes, image::ImageFormat::Pnm)
        .map_err(|e| Error::format(path, format!("cannot decode PGM: {e}")))?;
    if img.color() != image::ColorType::L8 {
        return Err(Error::format(path, "expected an 8-bit grayscale PGM"));
    }
    let g = img.into_luma8();
    Ok(GrayImage {
        width: g.width() as usize,
        height: g.height() as usize,
        data: g.as_raw().iter().map(|&b| b as f32 / 255.0).collect(),
    })
}

fn image_file(id: u32) -> String {
    format!("images/{id:05}.pgm")
}

/// Render `n_train + n_test` images into `out_dir` and write the manifest.
/// Test images take the last `n_test` ids; the training pool starts out
/// fully unlabeled.
pub fn generate(
    out_dir: &Path,
    seed: u64,
    n_train: usize,
    n_test: usize,
    params: &SynthParams,
) -> Result<DatasetManifest> {
    if n_train == 0 {
        return Err(Error::Config("need at least one training image".into()));
    }
    params.validate()?;
    let img_dir = out_dir.join("images");
    fs::create_dir_all(&img_dir).map_err(|e| Error::io(&img_dir, e))?;
    let mut images = Vec::new();
    let mut annotations = Vec::new();
    for i in 0..n_train + n_test {
        let id = i as u32;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(i as u64);
        let s = render_synthetic(params, &mut rng);
        let file = image_file(id);
        write_pgm(&out_dir.join(&file), &s.image)?;
        images.push(ImageEntry {
            id,
            file,
            width: params.width,
            height: params.height,
        });
        annotations.extend(s.boxes.into_iter().map(|bbox| Annotation {
            image_id: id,
            bbox,
            class_id: 0,
        }));
    }
    let manifest = DatasetManifest {
        version: MANIFEST_VERSION,
        generator: GeneratorInfo {
            seed,
            params: params.clone(),
        },
        images,
        annotations,
        splits: Splits {
            labeled: Vec::new(),
            unlabeled: (0..n_train as u32).collect(),
            test: (n_train as u32..(n_train + n_test) as u32).collect(),
        },
    };
    manifest.save(&out_dir.join(MANIFEST_FILE))?;
    Ok(manifest)
}

/// Number of labeled images for a pool of `n`: `floor(fraction * n)`, at
/// least one.
pub fn labeled_count(n: usize, fraction: f64) -> Result<usize> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::Config(format!("labeled fraction must lie in (0, 1], got {fraction}")));
    }
    if n == 0 {
        return Err(Error::Config("no training images to split".into()));
    }
    // The epsilon keeps e.g. 0.1 * 1000 from flooring to 99.
    Ok(((fraction * n as f64 + 1e-9).floor() as usize).clamp(1, n))
}

/// Deterministically re-split the training pool into labeled and unlabeled
/// ids. Unlabeled annotations stay in the manifest for evaluation.
pub fn split(manifest: &DatasetManifest, labeled_fraction: f64, seed: u64) -> Result<DatasetManifest> {
    let mut pool = manifest.train_ids();
    let k = labeled_count(pool.len(), labeled_fraction)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    pool.shuffle(&mut rng);
    let mut labeled = pool[..k].to_vec();
    let mut unlabeled = pool[k..].to_vec();
    labeled.sort_unstable();
    unlabeled.sort_unstable();
    let mut out = manifest.clone();
    out.splits.labeled = labeled;
    out.splits.unlabeled = unlabeled;
    Ok(out)
}

/// A manifest with every image decoded into memory.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub root: PathBuf,
    pub manifest: DatasetManifest,
    images: BTreeMap<u32, GrayImage>,
    boxes: BTreeMap<u32, Vec<BBox>>,
}

impl Dataset {
    /// Load `dir/manifest.json` (or a manifest path) and decode its images.
    pub fn open(path: &Path) -> Result<Self> {
        let (root, manifest_path) = if path.is_dir() {
            (path.to_path_buf(), path.join(MANIFEST_FILE))
        } else {
            (
                path.parent().unwrap_or(Path::new(".")).to_path_buf(),
                path.to_path_buf(),
            )
        };
        let manifest = DatasetManifest::load(&manifest_path)?;
        Dataset::from_manifest(root, manifest)
    }

    pub fn from_manifest(root: PathBuf, manifest: DatasetManifest) -> Result<Self> {
        let mut images = BTreeMap::new();
        for e in &manifest.images {
            let p = root.join(&e.file);
            let img = read_pgm(&p)?;
            if img.width != e.width || img.height != e.height {
                return Err(Error::format(
                    &p,
                    format!("image is {}x{}, manifest says {}x{}", img.width, img.height, e.width, e.height),
                ));
            }
            images.insert(e.id, img);
        }
        let boxes = manifest.boxes_by_image();
        Ok(Dataset {
            root,
            manifest,
            images,
            boxes,
        })
    }

    pub fn with_manifest(mut self, manifest: DatasetManifest) -> Result<Self> {
        manifest.validate(&self.root)?;
        self.boxes = manifest.boxes_by_image();
        self.manifest = manifest;
        Ok(self)
    }

    pub fn image(&self, id: u32) -> Result<&GrayImage> {
        self.images
            .get(&id)
            .ok_or_else(|| Error::Config(format!("unknown image id {id}")))
    }

    /// Ground-truth boxes, including those of unlabeled images.
    pub fn boxes(&self, id: u32) -> &[BBox] {
        self.boxes.get(&id).map(Vec::as_slice).unwrap_or(&[])
    }
}

/// Augment each id in order with `policy`, drawing from `rng`.
pub fn load_batch<R: Rng + ?Sized>(
    dataset: &Dataset,
    ids: &[u32],
    policy: &AugmentPolicy,
    rng: &mut R,
) -> Result<Vec<AugmentedSample>> {
    ids.iter()
        .map(|&id| Ok(augment(dataset.image(id)?, dataset.boxes(id), rng, policy)))
        .collect()
}
