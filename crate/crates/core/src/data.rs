//! Procedural two-class image dataset and artefact stamping.

use std::f64::consts::PI;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const GREY: f64 = 0.5;
pub const WHITE: f64 = 1.0;
pub const DEFAULT_RING_RADIUS_FRACTION: f64 = 0.15;
pub const DEFAULT_RING_THICKNESS: usize = 2;
pub const PIXEL_NOISE_STD: f64 = 0.05;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ArtefactKind {
    GreySquare,
    WhiteRing,
}

impl ArtefactKind {
    pub fn code(self) -> i64 {
        match self {
            Self::GreySquare => 0,
            Self::WhiteRing => 1,
        }
    }

    pub fn from_code(code: i64) -> Option<Self> {
        match code {
            0 => Some(Self::GreySquare),
            1 => Some(Self::WhiteRing),
            _ => None,
        }
    }
}

/// Where and how an artefact was stamped.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Artefact {
    pub kind: ArtefactKind,
    /// Fraction of the image area covered by the stamped footprint.
    pub area_fraction: f64,
    /// Top-left corner for squares, centre for rings.
    pub position: (usize, usize),
    /// Square side or ring outer radius, in pixels.
    pub size: usize,
    pub thickness: usize,
    /// Set when the stamp changed no pixels by construction (zero-thickness ring).
    pub degenerate: bool,
}

/// Artefact recipe applied to every ID test image to build an OOD set.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ArtefactSpec {
    Square { area_fraction: f64 },
    Ring { outer_radius_fraction: f64, thickness: usize },
}

impl ArtefactSpec {
    pub fn square(area_fraction: f64) -> Self {
        Self::Square { area_fraction }
    }

    pub fn ring() -> Self {
        Self::Ring {
            outer_radius_fraction: DEFAULT_RING_RADIUS_FRACTION,
            thickness: DEFAULT_RING_THICKNESS,
        }
    }

    pub fn label(&self) -> String {
        match self {
            Self::Square { area_fraction } => format!("square-{area_fraction}"),
            Self::Ring { outer_radius_fraction, thickness } => format!("ring-{outer_radius_fraction}-{thickness}"),
        }
    }

    pub fn stamp(&self, image: &Tensor, label: usize, seed: u64) -> Result<ImageSample> {
        match *self {
            Self::Square { area_fraction } => stamp_square(image, label, area_fraction, seed),
            Self::Ring { outer_radius_fraction, thickness } => stamp_ring(image, label, outer_radius_fraction, thickness, seed),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ImageSample {
    /// `[1, H, W]` with values in `[0, 1]`.
    pub image: Tensor,
    pub label: usize,
    pub is_ood: bool,
    pub artefact: Option<Artefact>,
}

impl ImageSample {
    pub fn clean(image: Tensor, label: usize) -> Self {
        Self { image, label, is_ood: false, artefact: None }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetSplit {
    pub train: Vec<ImageSample>,
    pub id_test: Vec<ImageSample>,
    pub ood_test: Vec<ImageSample>,
    pub seed: u64,
}

pub fn images(samples: &[ImageSample]) -> Vec<Tensor> {
    samples.iter().map(|s| s.image.clone()).collect()
}

pub fn labels(samples: &[ImageSample]) -> Vec<usize> {
    samples.iter().map(|s| s.label).collect()
}

fn image_hw(image: &Tensor) -> Result<(usize, usize)> {
    match image.shape() {
        [1, h, w] => Ok((*h, *w)),
        other => Err(Error::invalid(format!("expected a [1, H, W] image, got {other:?}"))),
    }
}

fn blob_texture(size: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let s = size as f64;
    let blobs: Vec<(f64, f64, f64, f64)> = (0..rng.random_range(3..=5))
        .map(|_| {
            (
                rng.random_range(0.0..s),
                rng.random_range(0.0..s),
                rng.random_range(0.12..0.25) * s,
                rng.random_range(0.2..0.5) * if rng.random_bool(0.5) { 1.0 } else { -1.0 },
            )
        })
        .collect();
    let mut out = vec![0.5; size * size];
    for (i, v) in out.iter_mut().enumerate() {
        let (y, x) = ((i / size) as f64, (i % size) as f64);
        for &(cy, cx, sigma, amp) in &blobs {
            *v += amp * (-((y - cy).powi(2) + (x - cx).powi(2)) / (2.0 * sigma * sigma)).exp();
        }
    }
    out
}

fn stripe_texture(size: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let theta = rng.random_range(0.0..PI);
    let freq = rng.random_range(0.1..0.2);
    let phase = rng.random_range(0.0..2.0 * PI);
    let amp = rng.random_range(0.2..0.35);
    let (c, s) = (theta.cos(), theta.sin());
    (0..size * size)
        .map(|i| {
            let (y, x) = ((i / size) as f64, (i % size) as f64);
            0.5 + amp * (2.0 * PI * freq * (x * c + y * s) + phase).sin()
        })
        .collect()
}

/// Renders one image of class 0 (smooth blobs) or class 1 (oriented stripes).
pub fn render_class_image(class: usize, size: usize, rng: &mut ChaCha8Rng) -> Tensor {
    let mut pixels = if class == 0 { blob_texture(size, rng) } else { stripe_texture(size, rng) };
    let noise = Normal::new(0.0, PIXEL_NOISE_STD).expect("valid std");
    for p in &mut pixels {
        *p = (*p + noise.sample(rng)).clamp(0.0, 1.0);
    }
    Tensor::new(vec![1, size, size], pixels).expect("shape matches")
}

/// Generates `n` balanced samples and splits them 90/10 into train and ID test.
pub fn generate_id_dataset(n: usize, image_size: usize, seed: u64) -> Result<DatasetSplit> {
    if n < 20 {
        return Err(Error::invalid(format!("dataset needs at least 20 samples, got {n}")));
    }
    if image_size < 16 {
        return Err(Error::invalid(format!("image size must be at least 16, got {image_size}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut samples: Vec<ImageSample> = (0..n)
        .map(|i| ImageSample::clean(render_class_image(i % 2, image_size, &mut rng), i % 2))
        .collect();
    samples.shuffle(&mut rng);
    let test = (n as f64 * 0.1).round() as usize;
    let id_test = samples.split_off(n - test);
    Ok(DatasetSplit { train: samples, id_test, ood_test: Vec::new(), seed })
}

fn stamp_rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Stamps a solid grey square of side `round(sqrt(a * H * W))` at a uniform position.
pub fn stamp_square(image: &Tensor, label: usize, area_fraction: f64, seed: u64) -> Result<ImageSample> {
    let (h, w) = image_hw(image)?;
    if !(area_fraction > 0.0 && area_fraction < 1.0) {
        return Err(Error::invalid(format!("square area fraction {area_fraction} outside (0, 1)")));
    }
    let side = (area_fraction * (h * w) as f64).sqrt().round() as usize;
    if side == 0 || side > h || side > w {
        return Err(Error::invalid(format!("square of side {side} does not fit a {h}x{w} image")));
    }
    let mut rng = stamp_rng(seed);
    let top = rng.random_range(0..=h - side);
    let left = rng.random_range(0..=w - side);
    let mut out = image.clone();
    let data = out.data_mut();
    for y in top..top + side {
        data[y * w + left..y * w + left + side].fill(GREY);
    }
    Ok(ImageSample {
        image: out,
        label,
        is_ood: true,
        artefact: Some(Artefact {
            kind: ArtefactKind::GreySquare,
            area_fraction: (side * side) as f64 / (h * w) as f64,
            position: (top, left),
            size: side,
            thickness: 0,
            degenerate: false,
        }),
    })
}

/// Pixels `(y, x)` with `outer - thickness < dist((y, x), centre) <= outer`.
pub fn in_annulus(y: usize, x: usize, centre: (usize, usize), outer: usize, thickness: usize) -> bool {
    let dy = y as f64 - centre.0 as f64;
    let dx = x as f64 - centre.1 as f64;
    let d = (dy * dy + dx * dx).sqrt();
    d <= outer as f64 && d > outer as f64 - thickness as f64
}

/// Stamps a white annulus with outer radius `round(fraction * H)` at a uniform centre.
pub fn stamp_ring(image: &Tensor, label: usize, outer_radius_fraction: f64, thickness: usize, seed: u64) -> Result<ImageSample> {
    let (h, w) = image_hw(image)?;
    if !(outer_radius_fraction > 0.0) {
        return Err(Error::invalid("ring radius fraction must be positive"));
    }
    let outer = (outer_radius_fraction * h as f64).round() as usize;
    if outer == 0 || 2 * outer + 1 > h || 2 * outer + 1 > w {
        return Err(Error::invalid(format!("ring of outer radius {outer} does not fit a {h}x{w} image")));
    }
    let mut rng = stamp_rng(seed);
    let centre = (rng.random_range(outer..=h - 1 - outer), rng.random_range(outer..=w - 1 - outer));
    let mut out = image.clone();
    let data = out.data_mut();
    let mut stamped = 0usize;
    for y in centre.0 - outer..=centre.0 + outer {
        for x in centre.1 - outer..=centre.1 + outer {
            if in_annulus(y, x, centre, outer, thickness) {
                data[y * w + x] = WHITE;
                stamped += 1;
            }
        }
    }
    if thickness == 0 {
        log::warn!("zero-thickness ring leaves the image unchanged");
    }
    Ok(ImageSample {
        image: out,
        label,
        is_ood: true,
        artefact: Some(Artefact {
            kind: ArtefactKind::WhiteRing,
            area_fraction: stamped as f64 / (h * w) as f64,
            position: centre,
            size: outer,
            thickness,
            degenerate: thickness == 0,
        }),
    })
}

/// Per-sample stamping seed, independent of sample order elsewhere.
pub fn sample_seed(seed: u64, index: usize) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(index as u64)
}

/// Stamps `spec` onto every ID test image, preserving order.
pub fn make_ood_set(id_test: &[ImageSample], spec: &ArtefactSpec, seed: u64) -> Result<Vec<ImageSample>> {
    id_test
        .iter()
        .enumerate()
        .map(|(i, s)| spec.stamp(&s.image, s.label, sample_seed(seed, i)))
        .collect()
}

impl DatasetSplit {
    pub fn with_ood(mut self, spec: &ArtefactSpec, seed: u64) -> Result<Self> {
        self.ood_test = make_ood_set(&self.id_test, spec, seed)?;
        Ok(self)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn plain(size: usize) -> Tensor {
        Tensor::new(vec![1, size, size], (0..size * size).map(|i| (i % 7) as f64 / 10.0).collect()).unwrap()
    }

    fn changed(a: &Tensor, b: &Tensor) -> usize {
        a.data().iter().zip(b.data()).filter(|(x, y)| x != y).count()
    }

    #[test]
    fn split_sizes_and_range() {
        let d = generate_id_dataset(100, 16, 1).unwrap();
        assert_eq!((d.train.len(), d.id_test.len()), (90, 10));
        for s in d.train.iter().chain(&d.id_test) {
            assert!(s.image.data().iter().all(|v| (0.0..=1.0).contains(v)));
            assert!(!s.is_ood && s.artefact.is_none());
        }
        let ones = d.train.iter().chain(&d.id_test).filter(|s| s.label == 1).count();
        assert_eq!(ones, 50);
    }

    #[test]
    fn generation_is_seeded() {
        assert_eq!(generate_id_dataset(40, 16, 4).unwrap(), generate_id_dataset(40, 16, 4).unwrap());
        assert_ne!(generate_id_dataset(40, 16, 4).unwrap(), generate_id_dataset(40, 16, 5).unwrap());
        assert!(generate_id_dataset(19, 16, 0).is_err());
        assert!(generate_id_dataset(20, 15, 0).is_err());
    }

    #[test]
    fn square_sides() {
        let img = plain(32);
        let big = stamp_square(&img, 0, 0.10, 3).unwrap();
        let small = stamp_square(&img, 0, 0.05, 3).unwrap();
        assert_eq!(big.artefact.unwrap().size, 10);
        assert_eq!(small.artefact.unwrap().size, 7);
        assert!(changed(&img, &small.image) < changed(&img, &big.image));
        assert_eq!(stamp_square(&img, 0, 0.075, 3).unwrap().artefact.unwrap().size, 9);
    }

    #[test]
    fn square_footprint_is_grey_and_complement_untouched() {
        let img = plain(20);
        let s = stamp_square(&img, 1, 0.1, 11).unwrap();
        let a = s.artefact.unwrap();
        for y in 0..20 {
            for x in 0..20 {
                let inside = (a.position.0..a.position.0 + a.size).contains(&y) && (a.position.1..a.position.1 + a.size).contains(&x);
                let v = s.image.data()[y * 20 + x];
                if inside {
                    assert_eq!(v, GREY);
                } else {
                    assert_eq!(v, img.data()[y * 20 + x]);
                }
            }
        }
        assert!(s.is_ood);
        assert_eq!(s.label, 1);
        assert!(stamp_square(&plain(16), 0, 0.999, 0).is_ok());
        assert!(stamp_square(&plain(16), 0, 1.0, 0).is_err());
    }

    #[test]
    fn ring_matches_pixel_scan_oracle() {
        let img = Tensor::zeros(&[1, 32, 32]);
        for (seed, thickness) in [(0, 1), (1, 2), (2, 3)] {
            let s = stamp_ring(&img, 0, 0.15, thickness, seed).unwrap();
            let a = s.artefact.unwrap();
            let mut expected = 0;
            for y in 0..32 {
                for x in 0..32 {
                    let (dy, dx) = (y as f64 - a.position.0 as f64, x as f64 - a.position.1 as f64);
                    let d = (dy * dy + dx * dx).sqrt();
                    if d <= 5.0 && d > 5.0 - thickness as f64 {
                        expected += 1;
                    }
                }
            }
            assert_eq!(a.size, 5);
            assert_eq!(changed(&img, &s.image), expected);
            assert!(s.image.data().iter().all(|&v| v == 0.0 || v == WHITE));
        }
    }

    #[test]
    fn zero_thickness_ring_is_flagged_noop() {
        let img = plain(32);
        let s = stamp_ring(&img, 0, 0.15, 0, 9).unwrap();
        assert_eq!(s.image, img);
        assert!(s.artefact.unwrap().degenerate);
        assert!(stamp_ring(&plain(16), 0, 0.6, 2, 0).is_err());
    }

    #[test]
    fn ood_set_pairs_with_id_test() {
        let d = generate_id_dataset(60, 16, 2).unwrap().with_ood(&ArtefactSpec::square(0.1), 5).unwrap();
        assert_eq!(d.ood_test.len(), d.id_test.len());
        for (o, i) in d.ood_test.iter().zip(&d.id_test) {
            assert_eq!(o.label, i.label);
            let a = o.artefact.unwrap();
            for (k, (x, y)) in o.image.data().iter().zip(i.image.data()).enumerate() {
                let (r, c) = (k / 16, k % 16);
                let inside = (a.position.0..a.position.0 + a.size).contains(&r) && (a.position.1..a.position.1 + a.size).contains(&c);
                if !inside {
                    assert_eq!(x, y);
                }
            }
        }
        let again = make_ood_set(&d.id_test, &ArtefactSpec::square(0.1), 5).unwrap();
        assert_eq!(again, d.ood_test);
    }
}
