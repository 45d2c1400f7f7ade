//! Weak and strong augmentation with exact geometric bookkeeping.
//!
//! Every view keeps the affine map from original-image coordinates to view
//! coordinates, so boxes predicted on one view of an image can be carried
//! onto any other view of the same image with [`map_boxes`].

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::geometry::BBox;
use crate::image::GrayImage;

/// Boxes smaller than this after mapping are dropped.
pub const MIN_BOX_AREA: f64 = 4.0;

/// Row-major `2 x 3` affine map `p' = A p + t`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Affine(pub [[f64; 3]; 2]);

impl Affine {
    pub const IDENTITY: Affine = Affine([[1.0, 0.0, 0.0], [0.0, 1.0, 0.0]]);

    pub fn translation(tx: f64, ty: f64) -> Self {
        Affine([[1.0, 0.0, tx], [0.0, 1.0, ty]])
    }

    pub fn scaling(sx: f64, sy: f64) -> Self {
        Affine([[sx, 0.0, 0.0], [0.0, sy, 0.0]])
    }

    /// Rotation by `radians` about `(cx, cy)`. With the y axis pointing
    /// down, positive angles turn the image clockwise on screen.
    pub fn rotation_about(radians: f64, cx: f64, cy: f64) -> Self {
        let (s, c) = radians.sin_cos();
        Affine([
            [c, -s, cx - c * cx + s * cy],
            [s, c, cy - s * cx - c * cy],
        ])
    }

    pub fn det(&self) -> f64 {
        let m = &self.0;
        m[0][0] * m[1][1] - m[0][1] * m[1][0]
    }

    pub fn apply(&self, x: f64, y: f64) -> (f64, f64) {
        let m = &self.0;
        (
            m[0][0] * x + m[0][1] * y + m[0][2],
            m[1][0] * x + m[1][1] * y + m[1][2],
        )
    }

    /// `self` after `first`: `p -> self(first(p))`.
    pub fn after(&self, first: &Affine) -> Affine {
        let a = &self.0;
        let b = &first.0;
        let mut out = [[0.0; 3]; 2];
        for (r, row) in out.iter_mut().enumerate() {
            row[0] = a[r][0] * b[0][0] + a[r][1] * b[1][0];
            row[1] = a[r][0] * b[0][1] + a[r][1] * b[1][1];
            row[2] = a[r][0] * b[0][2] + a[r][1] * b[1][2] + a[r][2];
        }
        Affine(out)
    }

    pub fn inverse(&self) -> Option<Affine> {
        let d = self.det();
        if d.abs() <= 1e-12 {
            return None;
        }
        let m = &self.0;
        let (a, b, c, e) = (m[0][0], m[0][1], m[1][0], m[1][1]);
        let (ia, ib, ic, ie) = (e / d, -b / d, -c / d, a / d);
        Some(Affine([
            [ia, ib, -(ia * m[0][2] + ib * m[1][2])],
            [ic, ie, -(ic * m[0][2] + ie * m[1][2])],
        ]))
    }

    /// Axis-aligned box enclosing the image of `b`'s four corners.
    pub fn map_box(&self, b: &BBox) -> BBox {
        BBox::enclosing(b.corners().map(|(x, y)| self.apply(x, y))).expect("four corners")
    }
}

/// A photometric op as applied, with its drawn parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum PhotometricOp {
    Contrast { factor: f64 },
    Solarize { threshold: f64 },
    ColorJitter { brightness: f64, contrast: f64 },
    Brightness { factor: f64 },
    Sharpness { factor: f64 },
    Posterize { bits: u32 },
    Equalize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ViewTransform {
    /// Original-image coordinates to view coordinates.
    pub affine: Affine,
    pub scaled_w: usize,
    pub scaled_h: usize,
    pub photometric_log: Vec<PhotometricOp>,
    pub cutout_regions: Vec<BBox>,
}

impl ViewTransform {
    pub fn identity(width: usize, height: usize) -> Self {
        ViewTransform {
            affine: Affine::IDENTITY,
            scaled_w: width,
            scaled_h: height,
            photometric_log: Vec::new(),
            cutout_regions: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AugmentedSample {
    pub image: GrayImage,
    pub boxes: Vec<BBox>,
    pub view: ViewTransform,
}

/// Geometric part of a view, drawn or forced.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Geometry {
    pub scale: f64,
    pub flip: bool,
    pub angle_deg: f64,
    /// Translation in view pixels, applied last.
    pub shift: (f64, f64),
}

impl Default for Geometry {
    fn default() -> Self {
        Geometry {
            scale: 1.0,
            flip: false,
            angle_deg: 0.0,
            shift: (0.0, 0.0),
        }
    }
}

impl Geometry {
    /// View size and affine for an image of `width x height`.
    pub fn view(&self, width: usize, height: usize) -> (Affine, usize, usize) {
        let sw = ((width as f64 * self.scale).round() as usize).max(1);
        let sh = ((height as f64 * self.scale).round() as usize).max(1);
        let mut a = Affine::scaling(sw as f64 / width as f64, sh as f64 / height as f64);
        if self.flip {
            a = Affine([[-1.0, 0.0, sw as f64], [0.0, 1.0, 0.0]]).after(&a);
        }
        if self.angle_deg != 0.0 {
            let r = Affine::rotation_about(self.angle_deg.to_radians(), sw as f64 / 2.0, sh as f64 / 2.0);
            a = r.after(&a);
        }
        if self.shift != (0.0, 0.0) {
            a = Affine::translation(self.shift.0, self.shift.1).after(&a);
        }
        (a, sw, sh)
    }
}

/// Which column of the augmentation table a view follows.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Profile {
    Labeled,
    UnlabeledStudent,
    UnlabeledTeacher,
}

/// Probabilities and ranges for one augmentation pipeline.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AugmentPolicy {
    pub scale_range: (f64, f64),
    pub flip_p: f64,
    pub contrast_p: f64,
    pub solarize_p: f64,
    pub color_p: f64,
    /// Brightness and contrast spread of the color jitter.
    pub color_spread: f64,
    pub brightness_p: f64,
    pub sharpness_p: f64,
    pub posterize_p: f64,
    pub equalize_p: f64,
    pub rotate_p: f64,
    pub max_angle_deg: f64,
    pub shift_p: f64,
    /// Largest shift as a fraction of the view side.
    pub max_shift_frac: f64,
    pub cutout_p: f64,
    pub cutout_holes: (usize, usize),
    pub cutout_ratio: (f64, f64),
}

impl AugmentPolicy {
    /// Everything off: the view equals the input.
    pub fn identity() -> Self {
        AugmentPolicy {
            scale_range: (1.0, 1.0),
            flip_p: 0.0,
            contrast_p: 0.0,
            solarize_p: 0.0,
            color_p: 0.0,
            color_spread: 0.4,
            brightness_p: 0.0,
            sharpness_p: 0.0,
            posterize_p: 0.0,
            equalize_p: 0.0,
            rotate_p: 0.0,
            max_angle_deg: 30.0,
            shift_p: 0.0,
            max_shift_frac: 0.1,
            cutout_p: 0.0,
            cutout_holes: (1, 5),
            cutout_ratio: (0.05, 0.2),
        }
    }

    /// Scale jitter and horizontal flip only.
    pub fn weak() -> Self {
        AugmentPolicy {
            scale_range: (0.5, 1.5),
            flip_p: 0.5,
            ..Self::identity()
        }
    }

    pub fn strong(profile: Profile) -> Self {
        let photometric = AugmentPolicy {
            contrast_p: 0.2,
            solarize_p: 0.1,
            color_p: 0.1,
            brightness_p: 0.1,
            sharpness_p: 0.1,
            posterize_p: 0.1,
            equalize_p: 0.1,
            ..Self::weak()
        };
        match profile {
            Profile::Labeled => photometric,
            Profile::UnlabeledStudent => AugmentPolicy {
                rotate_p: 0.3,
                shift_p: 0.3,
                cutout_p: 1.0,
                ..photometric
            },
            Profile::UnlabeledTeacher => AugmentPolicy {
                contrast_p: 0.25,
                sharpness_p: 0.25,
                equalize_p: 0.25,
                rotate_p: 0.3,
                shift_p: 0.3,
                ..Self::weak()
            },
        }
    }
}

/// Scale jitter then horizontal flip.
pub fn weak_augment<R: Rng + ?Sized>(image: &GrayImage, boxes: &[BBox], rng: &mut R) -> AugmentedSample {
    augment(image, boxes, rng, &AugmentPolicy::weak())
}

pub fn strong_augment<R: Rng + ?Sized>(
    image: &GrayImage,
    boxes: &[BBox],
    rng: &mut R,
    profile: Profile,
) -> AugmentedSample {
    augment(image, boxes, rng, &AugmentPolicy::strong(profile))
}

fn draw(rng: &mut (impl Rng + ?Sized), p: f64) -> bool {
    p > 0.0 && rng.gen::<f64>() < p
}

fn uniform(rng: &mut (impl Rng + ?Sized), lo: f64, hi: f64) -> f64 {
    if hi > lo {
        rng.gen_range(lo..hi)
    } else {
        lo
    }
}

/// Run `policy`: photometric ops on the source, one resample through the
/// drawn affine, then cutout. Random draws happen in a fixed order so a
/// seeded generator reproduces the sample exactly.
pub fn augment<R: Rng + ?Sized>(
    image: &GrayImage,
    boxes: &[BBox],
    rng: &mut R,
    policy: &AugmentPolicy,
) -> AugmentedSample {
    let weak = draw_weak(rng, policy);
    augment_on(image, boxes, rng, policy, weak)
}

/// Draw the weak part of a view (scale jitter and flip) from `policy`.
pub fn draw_weak<R: Rng + ?Sized>(rng: &mut R, policy: &AugmentPolicy) -> Geometry {
    Geometry {
        scale: uniform(rng, policy.scale_range.0, policy.scale_range.1),
        flip: draw(rng, policy.flip_p),
        ..Geometry::default()
    }
}

/// Like [`augment`], but with the scale and flip fixed by `weak` instead of
/// drawn. A teacher view and a student view built on the same `weak` differ
/// only by the student's strong operations.
pub fn augment_on<R: Rng + ?Sized>(
    image: &GrayImage,
    boxes: &[BBox],
    rng: &mut R,
    policy: &AugmentPolicy,
    weak: Geometry,
) -> AugmentedSample {
    let geo = Geometry {
        scale: weak.scale,
        flip: weak.flip,
        ..Geometry::default()
    };

    let mut src = image.clone();
    let mut log = Vec::new();
    if draw(rng, policy.contrast_p) {
        log.push(PhotometricOp::Contrast {
            factor: 0.1 + 1.8 * rng.gen::<f64>(),
        });
    }
    if draw(rng, policy.solarize_p) {
        log.push(PhotometricOp::Solarize {
            threshold: rng.gen::<f64>(),
        });
    }
    if draw(rng, policy.color_p) {
        let s = policy.color_spread;
        log.push(PhotometricOp::ColorJitter {
            brightness: uniform(rng, 1.0 - s, 1.0 + s),
            contrast: uniform(rng, 1.0 - s, 1.0 + s),
        });
    }
    if draw(rng, policy.brightness_p) {
        log.push(PhotometricOp::Brightness {
            factor: 0.1 + 1.8 * rng.gen::<f64>(),
        });
    }
    if draw(rng, policy.sharpness_p) {
        log.push(PhotometricOp::Sharpness {
            factor: 0.1 + 1.8 * rng.gen::<f64>(),
        });
    }
    if draw(rng, policy.posterize_p) {
        log.push(PhotometricOp::Posterize {
            bits: rng.gen_range(4..=8),
        });
    }
    if draw(rng, policy.equalize_p) {
        log.push(PhotometricOp::Equalize);
    }
    for op in &log {
        apply_photometric(&mut src, op);
    }

    let mut geo = geo;
    if draw(rng, policy.rotate_p) {
        let mag = uniform(rng, 0.0, policy.max_angle_deg);
        geo.angle_deg = if rng.gen::<bool>() { mag } else { -mag };
    }
    let (_, sw, sh) = geo.view(image.width, image.height);
    if draw(rng, policy.shift_p) {
        let f = policy.max_shift_frac;
        geo.shift = (
            uniform(rng, -f, f) * sw as f64,
            uniform(rng, -f, f) * sh as f64,
        );
    }

    let mut cutouts = Vec::new();
    if draw(rng, policy.cutout_p) {
        let (lo, hi) = policy.cutout_holes;
        let holes = rng.gen_range(lo..=hi.max(lo));
        for _ in 0..holes {
            let r = uniform(rng, policy.cutout_ratio.0, policy.cutout_ratio.1);
            let (w, h) = (r * sw as f64, r * sh as f64);
            let x = uniform(rng, 0.0, sw as f64 - w);
            let y = uniform(rng, 0.0, sh as f64 - h);
            cutouts.push(BBox::new(x, y, x + w, y + h));
        }
    }

    let mut sample = render(&src, boxes, &geo);
    for hole in &cutouts {
        apply_cutout(&mut sample.image, hole);
    }
    sample.view.photometric_log = log;
    sample.view.cutout_regions = cutouts;
    sample
}

/// Resample `image` through `geo` (zero fill) and carry `boxes` along.
pub fn render(image: &GrayImage, boxes: &[BBox], geo: &Geometry) -> AugmentedSample {
    let (affine, sw, sh) = geo.view(image.width, image.height);
    let view = ViewTransform {
        affine,
        scaled_w: sw,
        scaled_h: sh,
        photometric_log: Vec::new(),
        cutout_regions: Vec::new(),
    };
    let out = if affine == Affine::IDENTITY && sw == image.width && sh == image.height {
        image.clone()
    } else {
        let inv = affine.inverse().expect("view affines are invertible");
        let mut out = GrayImage::new(sw, sh);
        for v in 0..sh {
            for u in 0..sw {
                let (x, y) = inv.apply(u as f64 + 0.5, v as f64 + 0.5);
                out.set(u, v, image.sample(x, y, 0.0));
            }
        }
        out
    };
    let source = ViewTransform::identity(image.width, image.height);
    AugmentedSample {
        image: out,
        boxes: map_boxes(boxes, &source, &view),
        view,
    }
}

/// Carry boxes from one view of an image to another: invert `from`, apply
/// `to`, take the enclosing box, clip to the target view and drop boxes
/// left with less than [`MIN_BOX_AREA`].
pub fn map_boxes(boxes: &[BBox], from: &ViewTransform, to: &ViewTransform) -> Vec<BBox> {
    let inv = from
        .affine
        .inverse()
        .expect("view affines are invertible by construction");
    let (w, h) = (to.scaled_w as f64, to.scaled_h as f64);
    boxes
        .iter()
        .map(|b| {
            let corners = b.corners().map(|(x, y)| {
                let (ox, oy) = inv.apply(x, y);
                to.affine.apply(ox, oy)
            });
            BBox::enclosing(corners).expect("four corners").clip(w, h)
        })
        .filter(|b| b.area() >= MIN_BOX_AREA)
        .collect()
}

fn apply_cutout(img: &mut GrayImage, hole: &BBox) {
    let x0 = hole.x1.round().max(0.0) as usize;
    let y0 = hole.y1.round().max(0.0) as usize;
    let x1 = (hole.x2.round() as usize).min(img.width);
    let y1 = (hole.y2.round() as usize).min(img.height);
    for y in y0..y1 {
        for x in x0..x1 {
            img.set(x, y, 0.0);
        }
    }
}

/// Blend toward a degenerate image: `degenerate + factor * (x - degenerate)`.
fn blend(img: &mut GrayImage, degenerate: &[f32], factor: f64) {
    let f = factor as f32;
    for (v, &d) in img.data.iter_mut().zip(degenerate) {
        *v = d + f * (*v - d);
    }
    img.clamp01();
}

pub fn apply_photometric(img: &mut GrayImage, op: &PhotometricOp) {
    match *op {
        PhotometricOp::Contrast { factor } => {
            let m = img.mean();
            let deg = vec![m; img.data.len()];
            blend(img, &deg, factor);
        }
        PhotometricOp::Brightness { factor } => {
            let deg = vec![0.0; img.data.len()];
            blend(img, &deg, factor);
        }
        PhotometricOp::ColorJitter { brightness, contrast } => {
            apply_photometric(img, &PhotometricOp::Brightness { factor: brightness });
            apply_photometric(img, &PhotometricOp::Contrast { factor: contrast });
        }
        PhotometricOp::Solarize { threshold } => {
            let t = threshold as f32;
            for v in &mut img.data {
                if *v >= t {
                    *v = 1.0 - *v;
                }
            }
        }
        PhotometricOp::Sharpness { factor } => {
            let deg = smooth(img);
            blend(img, &deg, factor);
        }
        PhotometricOp::Posterize { bits } => {
            let mask: u32 = !((1u32 << (8 - bits.min(8))) - 1) & 0xff;
            for v in &mut img.data {
                let q = (v.clamp(0.0, 1.0) * 255.0).round() as u32;
                *v = (q & mask) as f32 / 255.0;
            }
        }
        PhotometricOp::Equalize => equalize(img),
    }
}

/// 3x3 smoothing with centre weight 5; the border is left unchanged.
fn smooth(img: &GrayImage) -> Vec<f32> {
    let mut out = img.data.clone();
    let (w, h) = (img.width, img.height);
    if w < 3 || h < 3 {
        return out;
    }
    for y in 1..h - 1 {
        for x in 1..w - 1 {
            let mut s = 0.0;
            for dy in 0..3 {
                for dx in 0..3 {
                    s += img.get(x + dx - 1, y + dy - 1);
                }
            }
            s += 4.0 * img.get(x, y);
            out[y * w + x] = s / 13.0;
        }
    }
    out
}

/// Histogram equalisation over 256 levels.
fn equalize(img: &mut GrayImage) {
    let n = img.data.len();
    if n == 0 {
        return;
    }
    let level = |v: f32| (v.clamp(0.0, 1.0) * 255.0).round() as usize;
    let mut hist = [0usize; 256];
    for &v in &img.data {
        hist[level(v)] += 1;
    }
    let first = hist.iter().position(|&c| c > 0).unwrap_or(0);
    let cdf_min = hist[first];
    if cdf_min == n {
        return;
    }
    let mut lut = [0f32; 256];
    let mut cum = 0;
    for (i, &c) in hist.iter().enumerate() {
        cum += c;
        lut[i] = (cum.saturating_sub(cdf_min)) as f32 / (n - cdf_min) as f32;
    }
    for v in &mut img.data {
        *v = lut[level(*v)];
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn gradient_image(w: usize, h: usize) -> GrayImage {
        let mut img = GrayImage::new(w, h);
        for y in 0..h {
            for x in 0..w {
                img.set(x, y, ((x * 7 + y * 3) % 97) as f32 / 96.0);
            }
        }
        img
    }

    fn close(a: &BBox, b: &BBox, tol: f64) -> bool {
        a.as_array().iter().zip(b.as_array()).all(|(x, y)| (x - y).abs() <= tol)
    }

    #[test]
    fn flip_mirror_example() {
        let img = GrayImage::new(100, 100);
        let geo = Geometry {
            flip: true,
            ..Geometry::default()
        };
        let s = render(&img, &[BBox::new(10.0, 10.0, 20.0, 20.0)], &geo);
        assert_eq!(s.boxes, vec![BBox::new(80.0, 10.0, 90.0, 20.0)]);
    }

    #[test]
    fn double_flip_is_identity() {
        let (a, w, h) = Geometry {
            flip: true,
            ..Geometry::default()
        }
        .view(64, 48);
        assert_eq!(a.after(&a), Affine::IDENTITY);
        let (id, _, _) = Geometry::default().view(w, h);
        assert_eq!(id, Affine::IDENTITY);
    }

    #[test]
    fn identity_policy_returns_input() {
        let img = gradient_image(40, 32);
        let boxes = [BBox::new(3.0, 4.0, 20.0, 30.0)];
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let s = augment(&img, &boxes, &mut rng, &AugmentPolicy::identity());
        assert_eq!(s.image, img);
        assert_eq!(s.boxes, boxes);
        assert_eq!(s.view, ViewTransform::identity(40, 32));
    }

    #[test]
    fn quarter_turn_matches_rotated_corners() {
        let img = GrayImage::new(100, 100);
        let b = BBox::new(10.0, 10.0, 20.0, 30.0);
        let geo = Geometry {
            angle_deg: 90.0,
            ..Geometry::default()
        };
        let s = render(&img, &[b], &geo);
        // A clockwise quarter turn about (50, 50) sends (x, y) to (100 - y, x).
        let expect = BBox::new(100.0 - 30.0, 10.0, 100.0 - 10.0, 20.0);
        assert!(close(&s.boxes[0], &expect, 1e-9), "{:?}", s.boxes[0]);
    }

    #[test]
    fn pure_shift_moves_corners() {
        let from = ViewTransform::identity(100, 100);
        let to = ViewTransform {
            affine: Affine::translation(5.0, 3.0),
            ..ViewTransform::identity(100, 100)
        };
        let out = map_boxes(&[BBox::new(10.0, 20.0, 30.0, 40.0)], &from, &to);
        assert_eq!(out, vec![BBox::new(15.0, 23.0, 35.0, 43.0)]);
    }

    #[test]
    fn tiny_boxes_are_dropped_and_clipped() {
        let from = ViewTransform::identity(100, 100);
        let to = ViewTransform {
            affine: Affine::translation(95.0, 0.0),
            ..ViewTransform::identity(100, 100)
        };
        let out = map_boxes(&[BBox::new(0.0, 0.0, 10.0, 10.0), BBox::new(4.0, 0.0, 10.0, 3.0)], &from, &to);
        assert_eq!(out, vec![BBox::new(95.0, 0.0, 100.0, 10.0)]);
    }

    #[test]
    fn cutout_and_photometric_keep_boxes() {
        let img = gradient_image(64, 64);
        let boxes = [BBox::new(5.0, 6.0, 40.0, 50.0)];
        let policy = AugmentPolicy {
            contrast_p: 1.0,
            solarize_p: 1.0,
            color_p: 1.0,
            brightness_p: 1.0,
            sharpness_p: 1.0,
            posterize_p: 1.0,
            equalize_p: 1.0,
            cutout_p: 1.0,
            ..AugmentPolicy::identity()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let s = augment(&img, &boxes, &mut rng, &policy);
        assert_eq!(s.boxes, boxes);
        assert_eq!(s.view.photometric_log.len(), 7);
        assert!(!s.view.cutout_regions.is_empty());
        assert!(s.image.data.iter().all(|v| (0.0..=1.0).contains(v)));
        for hole in &s.view.cutout_regions {
            let (cx, cy) = hole.center();
            assert_eq!(s.image.get(cx as usize, cy as usize), 0.0);
        }
    }

    #[test]
    fn seeded_strong_augment_is_reproducible() {
        let img = gradient_image(128, 128);
        let boxes = [BBox::new(30.0, 40.0, 90.0, 70.0)];
        for profile in [Profile::Labeled, Profile::UnlabeledStudent, Profile::UnlabeledTeacher] {
            let a = strong_augment(&img, &boxes, &mut ChaCha8Rng::seed_from_u64(3), profile);
            let b = strong_augment(&img, &boxes, &mut ChaCha8Rng::seed_from_u64(3), profile);
            assert_eq!(a, b);
            assert!(a.boxes.iter().all(|bb| bb.x1 >= 0.0 && bb.y1 >= 0.0
                && bb.x2 <= a.view.scaled_w as f64 && bb.y2 <= a.view.scaled_h as f64));
        }
    }

    #[test]
    fn weak_scale_stays_in_range() {
        let img = gradient_image(128, 128);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..50 {
            let s = weak_augment(&img, &[], &mut rng);
            assert!((64..=192).contains(&s.view.scaled_w));
            assert_eq!(s.view.scaled_w, s.view.scaled_h);
            assert_eq!(s.image.width, s.view.scaled_w);
        }
    }

    #[test]
    fn photometric_fixtures() {
        let mut img = GrayImage {
            width: 2,
            height: 1,
            data: vec![0.2, 0.8],
        };
        apply_photometric(&mut img, &PhotometricOp::Solarize { threshold: 0.5 });
        assert!((img.data[1] - 0.2).abs() < 1e-6 && img.data[0] == 0.2);
        let mut img = GrayImage {
            width: 2,
            height: 1,
            data: vec![0.2, 0.8],
        };
        apply_photometric(&mut img, &PhotometricOp::Contrast { factor: 0.5 });
        assert!((img.data[0] - 0.35).abs() < 1e-6 && (img.data[1] - 0.65).abs() < 1e-6);
        let mut img = GrayImage {
            width: 1,
            height: 1,
            data: vec![200.0 / 255.0],
        };
        apply_photometric(&mut img, &PhotometricOp::Posterize { bits: 4 });
        assert!((img.data[0] - 192.0 / 255.0).abs() < 1e-6);
    }

    fn arb_geometry() -> impl Strategy<Value = Geometry> {
        (0.5..1.5f64, any::<bool>(), -30.0..30.0f64, -12.0..12.0f64, -12.0..12.0f64).prop_map(
            |(scale, flip, angle_deg, sx, sy)| Geometry {
                scale,
                flip,
                angle_deg,
                shift: (sx, sy),
            },
        )
    }

    fn transform_of(g: &Geometry) -> ViewTransform {
        let (affine, scaled_w, scaled_h) = g.view(128, 128);
        ViewTransform {
            affine,
            scaled_w,
            scaled_h,
            photometric_log: Vec::new(),
            cutout_regions: Vec::new(),
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(10_000))]
        #[test]
        fn corner_path_equals_composed_matrix(
            g1 in arb_geometry(), g2 in arb_geometry(),
            x in 0.0..100.0f64, y in 0.0..100.0f64, w in 5.0..60.0f64, h in 5.0..60.0f64,
        ) {
            let (a, b) = (transform_of(&g1), transform_of(&g2));
            let bx = BBox::new(x, y, x + w, y + h);
            let composed = b.affine.after(&a.affine.inverse().unwrap());
            let direct = composed.map_box(&bx).clip(b.scaled_w as f64, b.scaled_h as f64);
            let mapped = map_boxes(&[bx], &a, &b);
            if direct.area() >= MIN_BOX_AREA {
                prop_assert_eq!(mapped.len(), 1);
                prop_assert!(close(&mapped[0], &direct, 1e-6));
            } else {
                prop_assert!(mapped.is_empty());
            }
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(512))]
        #[test]
        fn round_trip_without_rotation(
            s1 in 0.5..1.5f64, f1 in any::<bool>(), s2 in 0.5..1.5f64, f2 in any::<bool>(),
            x in 20.0..60.0f64, y in 20.0..60.0f64, w in 5.0..30.0f64, h in 5.0..30.0f64,
        ) {
            let t = transform_of(&Geometry { scale: s1, flip: f1, ..Geometry::default() });
            let s = transform_of(&Geometry { scale: s2, flip: f2, ..Geometry::default() });
            let b = map_boxes(&[BBox::new(x, y, x + w, y + h)], &ViewTransform::identity(128, 128), &t);
            let there = map_boxes(&b, &t, &s);
            let back = map_boxes(&there, &s, &t);
            prop_assert!(close(&back[0], &b[0], 1e-6));
            prop_assert!(close(&map_boxes(&b, &t, &t)[0], &b[0], 1e-6));
        }
    }
}
