//! Label-consistent image augmentation: brightness, flips, and rotations
//! that keep bounding boxes aligned with the transformed pixels.
//!
//! Geometry conventions:
//! - Boxes are normalized center-format; pixel `(u, v)` covers
//!   `[u, u+1) x [v, v+1)` with `v` growing downwards.
//! - Positive rotation angles turn the image counter-clockwise as displayed
//!   (a point left of center moves below it at +90 degrees). The canvas size
//!   is kept and uncovered pixels are black.
//! - A rotated box becomes the axis-aligned hull of its rotated corners,
//!   computed in pixel space so non-square images keep true angles, then
//!   clipped to the frame. Boxes whose clipped area falls below
//!   `min_box_area` are dropped.
//! - Flipped center coordinates are snapped to the 1e-6 grid of the
//!   annotation text format, which makes a double flip exactly the identity.

use std::fs;
use std::path::{Path, PathBuf};

use image::{DynamicImage, GrayImage, RgbImage};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cohort::{DetectionBox, SliceRecord};
use crate::ingest::serialize_boxes;
use crate::rng;

#[derive(Debug, Error)]
pub enum AugmentError {
    #[error("unsupported pixel format {0}; expected 8-bit grayscale or RGB")]
    UnsupportedPixelFormat(String),
    #[error("invalid `{field}`: {reason}")]
    InvalidParameter { field: &'static str, reason: String },
    #[error("{path}: {source}")]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Channels {
    Gray,
    Rgb,
}

impl Channels {
    pub fn count(self) -> usize {
        match self {
            Channels::Gray => 1,
            Channels::Rgb => 3,
        }
    }
}

/// Row-major, interleaved 8-bit image.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PixelBuffer {
    width: u32,
    height: u32,
    channels: Channels,
    data: Vec<u8>,
}

impl PixelBuffer {
    pub fn new(width: u32, height: u32, channels: Channels, data: Vec<u8>) -> Result<Self, AugmentError> {
        let expected = width as usize * height as usize * channels.count();
        if width == 0 || height == 0 || data.len() != expected {
            return Err(AugmentError::InvalidParameter {
                field: "pixels",
                reason: format!(
                    "{width}x{height}x{} needs {expected} bytes, got {}",
                    channels.count(),
                    data.len()
                ),
            });
        }
        Ok(Self {
            width,
            height,
            channels,
            data,
        })
    }

    pub fn filled(width: u32, height: u32, channels: Channels, value: u8) -> Self {
        let len = width as usize * height as usize * channels.count();
        Self::new(width, height, channels, vec![value; len]).expect("consistent size")
    }

    pub fn width(&self) -> u32 {
        self.width
    }
    pub fn height(&self) -> u32 {
        self.height
    }
    pub fn channels(&self) -> Channels {
        self.channels
    }
    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn pixel(&self, x: u32, y: u32) -> &[u8] {
        let c = self.channels.count();
        let i = (y as usize * self.width as usize + x as usize) * c;
        &self.data[i..i + c]
    }

    pub fn pixel_mut(&mut self, x: u32, y: u32) -> &mut [u8] {
        let c = self.channels.count();
        let i = (y as usize * self.width as usize + x as usize) * c;
        &mut self.data[i..i + c]
    }

    pub fn from_dynamic(img: DynamicImage) -> Result<Self, AugmentError> {
        let (w, h) = (img.width(), img.height());
        match img {
            DynamicImage::ImageLuma8(buf) => Self::new(w, h, Channels::Gray, buf.into_raw()),
            DynamicImage::ImageRgb8(buf) => Self::new(w, h, Channels::Rgb, buf.into_raw()),
            other => Err(AugmentError::UnsupportedPixelFormat(format!("{:?}", other.color()))),
        }
    }

    pub fn to_dynamic(&self) -> DynamicImage {
        match self.channels {
            Channels::Gray => DynamicImage::ImageLuma8(
                GrayImage::from_raw(self.width, self.height, self.data.clone()).expect("consistent size"),
            ),
            Channels::Rgb => DynamicImage::ImageRgb8(
                RgbImage::from_raw(self.width, self.height, self.data.clone()).expect("consistent size"),
            ),
        }
    }

    pub fn load(path: &Path) -> Result<Self, AugmentError> {
        let img = image::open(path).map_err(|source| AugmentError::Image {
            path: path.to_path_buf(),
            source,
        })?;
        Self::from_dynamic(img)
    }

    pub fn save_png(&self, path: &Path) -> Result<(), AugmentError> {
        self.to_dynamic()
            .save_with_format(path, image::ImageFormat::Png)
            .map_err(|source| AugmentError::Image {
                path: path.to_path_buf(),
                source,
            })
    }
}

fn check_brightness(delta: f64) -> Result<(), AugmentError> {
    if !(-1.0..=1.0).contains(&delta) {
        return Err(AugmentError::InvalidParameter {
            field: "brightness_delta",
            reason: format!("{delta} is outside [-1, 1]"),
        });
    }
    Ok(())
}

fn check_angle(theta: f64) -> Result<(), AugmentError> {
    if !(theta > -180.0 && theta <= 180.0) {
        return Err(AugmentError::InvalidParameter {
            field: "rotation_deg",
            reason: format!("{theta} is outside (-180, 180]"),
        });
    }
    Ok(())
}

/// `v -> clamp(v + delta * 255, 0, 255)`, rounded half-up. Boxes are
/// unaffected by brightness.
pub fn adjust_brightness(pixels: &PixelBuffer, delta: f64) -> Result<PixelBuffer, AugmentError> {
    check_brightness(delta)?;
    let shift = delta * 255.0;
    let data = pixels
        .data
        .iter()
        .map(|&v| (f64::from(v) + shift + 0.5).floor().clamp(0.0, 255.0) as u8)
        .collect();
    Ok(PixelBuffer { data, ..pixels.clone() })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum FlipAxis {
    Horizontal,
    Vertical,
}

const GRID: f64 = 1_000_000.0;

fn reflect(c: f64) -> f64 {
    (GRID - (c * GRID).round()) / GRID
}

pub fn flip(pixels: &PixelBuffer, boxes: &[DetectionBox], axis: FlipAxis) -> (PixelBuffer, Vec<DetectionBox>) {
    let (w, h) = (pixels.width, pixels.height);
    let mut out = pixels.clone();
    for y in 0..h {
        for x in 0..w {
            let (sx, sy) = match axis {
                FlipAxis::Horizontal => (w - 1 - x, y),
                FlipAxis::Vertical => (x, h - 1 - y),
            };
            out.pixel_mut(x, y).copy_from_slice(pixels.pixel(sx, sy));
        }
    }
    let boxes = boxes
        .iter()
        .map(|b| {
            let (cx, cy) = match axis {
                FlipAxis::Horizontal => (reflect(b.cx()), b.cy()),
                FlipAxis::Vertical => (b.cx(), reflect(b.cy())),
            };
            DetectionBox::new(b.class_id(), cx, cy, b.w(), b.h(), b.confidence()).expect("reflection stays in frame")
        })
        .collect();
    (out, boxes)
}

/// Cosine and sine of `theta_deg`, exact for multiples of 90 degrees.
fn cos_sin(theta_deg: f64) -> (f64, f64) {
    let r = theta_deg.rem_euclid(360.0);
    match r {
        0.0 => (1.0, 0.0),
        90.0 => (0.0, 1.0),
        180.0 => (-1.0, 0.0),
        270.0 => (0.0, -1.0),
        _ => {
            let (s, c) = theta_deg.to_radians().sin_cos();
            (c, s)
        }
    }
}

/// Axis-aligned hull of a box rotated about the image center, before
/// clipping: `(cx, cy, w, h)` in normalized coordinates.
pub fn rotated_hull(b: &DetectionBox, theta_deg: f64, width: u32, height: u32) -> (f64, f64, f64, f64) {
    let (c, s) = cos_sin(theta_deg);
    let aspect = f64::from(height) / f64::from(width);
    let (dx, dy) = (b.cx() - 0.5, b.cy() - 0.5);
    let cx = 0.5 + c * dx + s * dy * aspect;
    let cy = 0.5 - s * dx / aspect + c * dy;
    let w = c.abs() * b.w() + s.abs() * b.h() * aspect;
    let h = s.abs() * b.w() / aspect + c.abs() * b.h();
    (cx, cy, w, h)
}

fn rotate_box(b: &DetectionBox, theta_deg: f64, width: u32, height: u32, min_box_area: f64) -> Option<DetectionBox> {
    let (cx, cy, w, h) = rotated_hull(b, theta_deg, width, height);
    let (x0, y0, x1, y1) = (cx - w / 2.0, cy - h / 2.0, cx + w / 2.0, cy + h / 2.0);
    let inside = x0 >= 0.0 && y0 >= 0.0 && x1 <= 1.0 && y1 <= 1.0;
    let clipped = if inside {
        DetectionBox::new(b.class_id(), cx, cy, w, h, b.confidence()).ok()
    } else {
        let (x0, y0) = (x0.max(0.0), y0.max(0.0));
        let (x1, y1) = (x1.min(1.0), y1.min(1.0));
        if x1 <= x0 || y1 <= y0 {
            return None;
        }
        DetectionBox::from_corners(b.class_id(), x0, y0, x1, y1, b.confidence()).ok()
    };
    clipped.filter(|b| b.area() >= min_box_area)
}

/// Rotates the image about its center (nearest-neighbour sampling, black
/// fill) and replaces every box by its clipped rotated hull.
pub fn rotate(
    pixels: &PixelBuffer,
    boxes: &[DetectionBox],
    theta_deg: f64,
    min_box_area: f64,
) -> Result<(PixelBuffer, Vec<DetectionBox>), AugmentError> {
    check_angle(theta_deg)?;
    let (c, s) = cos_sin(theta_deg);
    let (w, h) = (pixels.width, pixels.height);
    let (half_w, half_h) = (f64::from(w) / 2.0, f64::from(h) / 2.0);
    let mut out = PixelBuffer::filled(w, h, pixels.channels, 0);
    for v in 0..h {
        for u in 0..w {
            let dx = f64::from(u) + 0.5 - half_w;
            let dy = f64::from(v) + 0.5 - half_h;
            let sx = (half_w + c * dx - s * dy).floor();
            let sy = (half_h + s * dx + c * dy).floor();
            if sx >= 0.0 && sy >= 0.0 && sx < f64::from(w) && sy < f64::from(h) {
                out.pixel_mut(u, v).copy_from_slice(pixels.pixel(sx as u32, sy as u32));
            }
        }
    }
    let boxes = boxes
        .iter()
        .filter_map(|b| rotate_box(b, theta_deg, w, h, min_box_area))
        .collect();
    Ok((out, boxes))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AugmentConfig {
    pub brightness_delta: f64,
    pub hflip: bool,
    pub vflip: bool,
    pub rotation_deg: f64,
    pub min_box_area: f64,
    pub seed: u64,
    /// Draw each slice's brightness delta and angle uniformly from
    /// `[-|value|, |value|]` instead of applying the values as given.
    #[serde(default)]
    pub randomize: bool,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            brightness_delta: 0.0,
            hflip: false,
            vflip: false,
            rotation_deg: 0.0,
            min_box_area: 1e-4,
            seed: 0,
            randomize: false,
        }
    }
}

impl AugmentConfig {
    pub fn validate(&self) -> Result<(), AugmentError> {
        check_brightness(self.brightness_delta)?;
        check_angle(self.rotation_deg)?;
        if self.min_box_area.is_nan() || self.min_box_area < 0.0 {
            return Err(AugmentError::InvalidParameter {
                field: "min_box_area",
                reason: format!("{} is negative", self.min_box_area),
            });
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Transform {
    Brightness,
    HFlip,
    VFlip,
    Rotate,
    Composed,
}

impl Transform {
    pub fn name(self) -> &'static str {
        match self {
            Transform::Brightness => "brightness",
            Transform::HFlip => "hflip",
            Transform::VFlip => "vflip",
            Transform::Rotate => "rotate",
            Transform::Composed => "composed",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AugmentedSample {
    pub transform: Transform,
    pub pixels: PixelBuffer,
    pub boxes: Vec<DetectionBox>,
}

fn apply_one(
    t: Transform,
    pixels: &PixelBuffer,
    boxes: &[DetectionBox],
    delta: f64,
    theta: f64,
    min_box_area: f64,
) -> Result<(PixelBuffer, Vec<DetectionBox>), AugmentError> {
    match t {
        Transform::Brightness => Ok((adjust_brightness(pixels, delta)?, boxes.to_vec())),
        Transform::HFlip => Ok(flip(pixels, boxes, FlipAxis::Horizontal)),
        Transform::VFlip => Ok(flip(pixels, boxes, FlipAxis::Vertical)),
        Transform::Rotate => rotate(pixels, boxes, theta, min_box_area),
        Transform::Composed => unreachable!("composed is not a primitive transform"),
    }
}

/// One output per enabled transform, plus the composition of all of them
/// (brightness, hflip, vflip, rotate, in that order) when two or more are
/// enabled. Boxes come from the slice's ground truth.
pub fn apply_pipeline(
    slice: &SliceRecord,
    pixels: &PixelBuffer,
    cfg: &AugmentConfig,
) -> Result<Vec<AugmentedSample>, AugmentError> {
    cfg.validate()?;
    let (mut delta, mut theta) = (cfg.brightness_delta, cfg.rotation_deg);
    if cfg.randomize {
        let mut r = rng::stream(
            cfg.seed ^ rng::fnv1a64(slice.slice_id().as_bytes()),
            rng::STREAM_AUGMENT,
        );
        delta = rng::uniform(&mut r, -delta.abs(), delta.abs());
        theta = rng::uniform(&mut r, -theta.abs(), theta.abs());
        if theta <= -180.0 {
            theta = 180.0;
        }
    }
    let enabled: Vec<Transform> = [
        (Transform::Brightness, delta != 0.0),
        (Transform::HFlip, cfg.hflip),
        (Transform::VFlip, cfg.vflip),
        (Transform::Rotate, theta != 0.0),
    ]
    .into_iter()
    .filter_map(|(t, on)| on.then_some(t))
    .collect();

    let mut out = Vec::with_capacity(enabled.len() + 1);
    for &t in &enabled {
        let (pixels, boxes) = apply_one(t, pixels, slice.gt_boxes(), delta, theta, cfg.min_box_area)?;
        out.push(AugmentedSample {
            transform: t,
            pixels,
            boxes,
        });
    }
    if enabled.len() >= 2 {
        let mut cur = (pixels.clone(), slice.gt_boxes().to_vec());
        for &t in &enabled {
            cur = apply_one(t, &cur.0, &cur.1, delta, theta, cfg.min_box_area)?;
        }
        out.push(AugmentedSample {
            transform: Transform::Composed,
            pixels: cur.0,
            boxes: cur.1,
        });
    }
    Ok(out)
}

/// File stem for an augmented output; path separators in the slice id are
/// replaced so every output lands directly in the output directory.
pub fn output_stem(slice_id: &str, t: Transform) -> String {
    let safe: String = slice_id
        .chars()
        .map(|c| if matches!(c, '/' | '\\') { '_' } else { c })
        .collect();
    format!("{safe}__{}", t.name())
}

/// Writes `<stem>.png` and `<stem>.txt` for every sample; returns the PNG
/// paths in sample order.
pub fn write_samples(
    out_dir: &Path,
    slice_id: &str,
    samples: &[AugmentedSample],
) -> Result<Vec<PathBuf>, AugmentError> {
    fs::create_dir_all(out_dir).map_err(|source| AugmentError::Io {
        path: out_dir.to_path_buf(),
        source,
    })?;
    let mut written = Vec::with_capacity(samples.len());
    for s in samples {
        let stem = output_stem(slice_id, s.transform);
        let png = out_dir.join(format!("{stem}.png"));
        s.pixels.save_png(&png)?;
        let txt = out_dir.join(format!("{stem}.txt"));
        fs::write(&txt, serialize_boxes(&s.boxes)).map_err(|source| AugmentError::Io { path: txt, source })?;
        written.push(png);
    }
    Ok(written)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cohort::Modality;

    fn gray(w: u32, h: u32) -> PixelBuffer {
        let data = (0..w * h).map(|i| (i * 7 % 251) as u8).collect();
        PixelBuffer::new(w, h, Channels::Gray, data).unwrap()
    }

    fn gt(cx: f64, cy: f64, w: f64, h: f64) -> DetectionBox {
        DetectionBox::ground_truth(0, cx, cy, w, h).unwrap()
    }

    #[test]
    fn buffer_size_checked() {
        assert!(PixelBuffer::new(2, 2, Channels::Rgb, vec![0; 11]).is_err());
        assert!(PixelBuffer::new(0, 2, Channels::Gray, vec![]).is_err());
    }

    #[test]
    fn brightness_examples() {
        let buf = PixelBuffer::new(3, 1, Channels::Gray, vec![200, 100, 0]).unwrap();
        assert_eq!(adjust_brightness(&buf, 0.0).unwrap(), buf);
        assert_eq!(adjust_brightness(&buf, 0.5).unwrap().data(), &[255, 228, 128]);
        assert_eq!(adjust_brightness(&buf, -0.2).unwrap().data(), &[149, 49, 0]);
        assert!(adjust_brightness(&buf, 1.5).is_err());
    }

    #[test]
    fn horizontal_flip_reflects_center() {
        let (_, b) = flip(&gray(4, 4), &[gt(0.3, 0.5, 0.2, 0.1)], FlipAxis::Horizontal);
        assert_eq!((b[0].cx(), b[0].cy(), b[0].w(), b[0].h()), (0.7, 0.5, 0.2, 0.1));
    }

    #[test]
    fn flip_mirrors_pixels() {
        let buf = PixelBuffer::new(3, 2, Channels::Gray, vec![1, 2, 3, 4, 5, 6]).unwrap();
        assert_eq!(flip(&buf, &[], FlipAxis::Horizontal).0.data(), &[3, 2, 1, 6, 5, 4]);
        assert_eq!(flip(&buf, &[], FlipAxis::Vertical).0.data(), &[4, 5, 6, 1, 2, 3]);
    }

    #[test]
    fn double_flip_is_identity() {
        let buf = gray(5, 3);
        let boxes = [gt(0.3, 0.123457, 0.2, 0.1), gt(0.999999, 0.000001, 0.000002, 0.000002)];
        for axis in [FlipAxis::Horizontal, FlipAxis::Vertical] {
            let (p1, b1) = flip(&buf, &boxes, axis);
            let (p2, b2) = flip(&p1, &b1, axis);
            assert_eq!(p2, buf);
            assert_eq!(b2, boxes);
        }
    }

    #[test]
    fn quarter_turn_is_exact() {
        let (_, b) = rotate(&gray(540, 540), &[gt(0.25, 0.5, 0.2, 0.1)], 90.0, 1e-4).unwrap();
        assert_eq!((b[0].cx(), b[0].cy(), b[0].w(), b[0].h()), (0.5, 0.75, 0.1, 0.2));
    }

    #[test]
    fn zero_rotation_is_identity() {
        let buf = gray(6, 4);
        let boxes = [gt(0.3, 0.6, 0.2, 0.1)];
        let (p, b) = rotate(&buf, &boxes, 0.0, 1e-4).unwrap();
        assert_eq!(p, buf);
        assert_eq!(b, boxes);
    }

    #[test]
    fn quarter_turn_moves_pixels_with_boxes() {
        // A lone bright pixel must land inside the rotated box around it.
        let mut buf = PixelBuffer::filled(10, 10, Channels::Gray, 0);
        buf.pixel_mut(2, 5)[0] = 255;
        let b = gt(0.25, 0.55, 0.1, 0.1);
        let (p, boxes) = rotate(&buf, &[b], 90.0, 0.0).unwrap();
        let (x0, y0, x1, y1) = boxes[0].corners();
        let lit: Vec<(u32, u32)> = (0..10)
            .flat_map(|y| (0..10).map(move |x| (x, y)))
            .filter(|&(x, y)| p.pixel(x, y)[0] == 255)
            .collect();
        assert_eq!(lit.len(), 1);
        let (x, y) = lit[0];
        let (px, py) = ((f64::from(x) + 0.5) / 10.0, (f64::from(y) + 0.5) / 10.0);
        assert!(px > x0 && px < x1 && py > y0 && py < y1, "{lit:?} vs {:?}", boxes[0]);
    }

    #[test]
    fn full_turn_pixels_round_trip() {
        let buf = gray(8, 8);
        let mut cur = buf.clone();
        for _ in 0..4 {
            cur = rotate(&cur, &[], 90.0, 0.0).unwrap().0;
        }
        assert_eq!(cur, buf);
        let half = rotate(&rotate(&buf, &[], 180.0, 0.0).unwrap().0, &[], 180.0, 0.0)
            .unwrap()
            .0;
        assert_eq!(half, buf);
    }

    #[test]
    fn rotation_drops_slivers_and_clips() {
        // Box hugging the corner rotates mostly out of frame.
        let b = gt(0.02, 0.02, 0.04, 0.04);
        let (_, out) = rotate(&gray(100, 100), &[b], 45.0, 1e-4).unwrap();
        assert!(out.is_empty());
        let (_, out) = rotate(&gray(100, 100), &[gt(0.1, 0.5, 0.2, 0.2)], 45.0, 0.0).unwrap();
        let (x0, _, _, _) = out[0].corners();
        assert!(x0 >= 0.0);
        assert!(rotate(&gray(4, 4), &[], -180.0, 0.0).is_err());
    }

    #[test]
    fn pipeline_variant_counts() {
        let slice = SliceRecord::new(
            "S1",
            "P1",
            "P1/S1.png",
            Modality::MRI_T1,
            1,
            vec![gt(0.5, 0.5, 0.2, 0.2)],
        )
        .unwrap();
        let buf = gray(8, 8);
        assert!(apply_pipeline(&slice, &buf, &AugmentConfig::default())
            .unwrap()
            .is_empty());
        let hflip = AugmentConfig {
            hflip: true,
            ..Default::default()
        };
        let out = apply_pipeline(&slice, &buf, &hflip).unwrap();
        assert_eq!(out.len(), 1);
        assert_eq!(out[0].transform, Transform::HFlip);
        let all = AugmentConfig {
            brightness_delta: 0.2,
            hflip: true,
            vflip: true,
            rotation_deg: 15.0,
            ..Default::default()
        };
        let out = apply_pipeline(&slice, &buf, &all).unwrap();
        let names: Vec<&str> = out.iter().map(|s| s.transform.name()).collect();
        assert_eq!(names, ["brightness", "hflip", "vflip", "rotate", "composed"]);
    }

    #[test]
    fn randomized_pipeline_is_seeded() {
        let slice = SliceRecord::new(
            "S1",
            "P1",
            "P1/S1.png",
            Modality::MRI_T1,
            1,
            vec![gt(0.5, 0.5, 0.2, 0.2)],
        )
        .unwrap();
        let buf = gray(16, 16);
        let cfg = AugmentConfig {
            brightness_delta: 0.3,
            rotation_deg: 30.0,
            randomize: true,
            seed: 7,
            ..Default::default()
        };
        let a = apply_pipeline(&slice, &buf, &cfg).unwrap();
        let b = apply_pipeline(&slice, &buf, &cfg).unwrap();
        assert_eq!(a, b);
        let c = apply_pipeline(&slice, &buf, &AugmentConfig { seed: 8, ..cfg }).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn stems_are_flat() {
        assert_eq!(output_stem("P1/S1", Transform::Rotate), "P1_S1__rotate");
    }
}
