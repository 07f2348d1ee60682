//! Preprocessing: landmark-based cropping, gray normalization, coordinate
//! maps, augmentation, and network-input assembly.
//!
//! Coordinate maps carry, for every crop pixel, the normalized position of
//! its source pixel in the full scene: `(i - W/2, j - H/2) / sqrt(W^2 + H^2)`
//! with the scene diagonal normalizing both axes. They are computed in f64
//! and only cast to f32 when stacked into a network input.

use crate::error::{Error, Result};
use crate::facegen::IRect;
use crate::image::{DepthMap, GrayImage};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

/// Crop geometry. `frame` is the resized face frame; training crops a
/// `train_crop` window out of it.
#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
pub struct CropSpec {
    pub frame: usize,
    pub train_crop: usize,
    /// Extra margin kept around the landmark box, as a fraction of its side.
    pub margin: f32,
}

impl CropSpec {
    pub fn desk() -> Self {
        CropSpec { frame: 36, train_crop: 32, margin: 0.35 }
    }

    pub fn paper_scale() -> Self {
        CropSpec { frame: 144, train_crop: 128, margin: 0.35 }
    }

    pub fn validate(&self) -> Result<()> {
        if self.train_crop >= self.frame || self.train_crop == 0 {
            return Err(Error::config(format!(
                "train_crop {} must be positive and smaller than frame {}",
                self.train_crop, self.frame
            )));
        }
        Ok(())
    }
}

/// Map grayscale in [0,1] to the network range [-0.5, 0.5].
#[inline]
pub fn normalize_gray(v: f32) -> f32 {
    v - 0.5
}

/// Map an 8-bit gray value to [-0.5, 0.5].
#[inline]
pub fn normalize_gray_u8(v: u8) -> f32 {
    v as f32 / 255.0 - 0.5
}

/// Depth channel normalization: meters -> unitless, recorded in checkpoints.
pub const DEPTH_NORM_OFFSET: f32 = 0.5;
pub const DEPTH_NORM_SCALE: f32 = 1.0;

#[inline]
pub fn normalize_depth(meters: f32) -> f32 {
    (meters - DEPTH_NORM_OFFSET) / DEPTH_NORM_SCALE
}

/// Perturb landmarks with N(0, 1 px) noise, emulating detector error.
pub fn jitter_landmarks(lms: &[[f32; 2]; 5], rng: &mut ChaCha8Rng) -> [[f32; 2]; 5] {
    let normal = Normal::new(0.0f32, 1.0).expect("valid sigma");
    let mut out = *lms;
    for p in out.iter_mut() {
        p[0] += normal.sample(rng);
        p[1] += normal.sample(rng);
    }
    out
}

/// Square source box around the landmarks: the landmark bounding box grown by
/// `margin` of its larger side, forced square, shifted into the scene.
fn source_box(lms: &[[f32; 2]; 5], margin: f32, w: usize, h: usize) -> Result<IRect> {
    let inside = lms
        .iter()
        .filter(|p| p[0] >= 0.0 && p[1] >= 0.0 && p[0] < w as f32 && p[1] < h as f32)
        .count();
    if inside < 3 {
        return Err(Error::data(format!(
            "only {inside} landmarks inside the scene; need at least 3"
        )));
    }
    let min_x = lms.iter().map(|p| p[0]).fold(f32::INFINITY, f32::min);
    let max_x = lms.iter().map(|p| p[0]).fold(f32::NEG_INFINITY, f32::max);
    let min_y = lms.iter().map(|p| p[1]).fold(f32::INFINITY, f32::min);
    let max_y = lms.iter().map(|p| p[1]).fold(f32::NEG_INFINITY, f32::max);
    let side0 = (max_x - min_x).max(max_y - min_y);
    let side = side0 * (1.0 + margin);
    if side < 4.0 {
        return Err(Error::data(format!("degenerate landmark box: side {side:.2} px")));
    }
    let side_i = (side.round() as usize).min(w.min(h));
    let cx = 0.5 * (min_x + max_x);
    let cy = 0.5 * (min_y + max_y);
    let x0 = ((cx - side / 2.0).round() as isize).clamp(0, (w - side_i) as isize) as usize;
    let y0 = ((cy - side / 2.0).round() as isize).clamp(0, (h - side_i) as isize) as usize;
    Ok(IRect { x: x0, y: y0, side: side_i })
}

/// Bilinear resample of a square source box to `frame x frame`. Values keep
/// the input range; the caller normalizes.
fn resample_box(scene: &GrayImage, bbox: IRect, frame: usize) -> Vec<f32> {
    let scale = bbox.side as f32 / frame as f32;
    let mut out = vec![0.0f32; frame * frame];
    for v in 0..frame {
        let sy = bbox.y as f32 + (v as f32 + 0.5) * scale - 0.5;
        for u in 0..frame {
            let sx = bbox.x as f32 + (u as f32 + 0.5) * scale - 0.5;
            out[v * frame + u] = scene.sample_bilinear(sx, sy);
        }
    }
    out
}

/// Crop the face around the landmarks and resize to `spec.frame`.
/// Returns the normalized crop and the integer source box.
pub fn crop_face(
    scene: &GrayImage,
    lms: &[[f32; 2]; 5],
    spec: &CropSpec,
) -> Result<(Vec<f32>, IRect)> {
    let bbox = source_box(lms, spec.margin, scene.w, scene.h)?;
    let mut img = resample_box(scene, bbox, spec.frame);
    for v in img.iter_mut() {
        *v = normalize_gray(*v);
    }
    Ok((img, bbox))
}

/// Crop a depth map with the same geometry; values stay in meters.
pub fn crop_depth(depth: &DepthMap, bbox: IRect, frame: usize) -> Vec<f32> {
    let as_img = GrayImage { w: depth.w, h: depth.h, data: depth.data.clone() };
    resample_box(&as_img, bbox, frame)
}

/// Per-pixel normalized source coordinates of a crop.
#[derive(Debug, Clone, PartialEq)]
pub struct CoordMap {
    pub frame: usize,
    /// Normalized source column of each crop pixel.
    pub x: Vec<f64>,
    /// Normalized source row of each crop pixel.
    pub y: Vec<f64>,
}

/// Build the coordinate map of a crop taken from `bbox` in a `W x H` scene.
/// Crop pixel (u, v) maps to source position
/// `i = x0 + (u + 0.5) * side/frame - 0.5` (same convention the bilinear
/// resample uses), normalized by the scene diagonal.
pub fn coord_map(bbox: IRect, frame: usize, scene_w: usize, scene_h: usize) -> CoordMap {
    let w = scene_w as f64;
    let h = scene_h as f64;
    let diag = (w * w + h * h).sqrt();
    let scale = bbox.side as f64 / frame as f64;
    let mut x = vec![0.0f64; frame * frame];
    let mut y = vec![0.0f64; frame * frame];
    for v in 0..frame {
        let j = bbox.y as f64 + (v as f64 + 0.5) * scale - 0.5;
        let jn = (j - h / 2.0) / diag;
        for u in 0..frame {
            let i = bbox.x as f64 + (u as f64 + 0.5) * scale - 0.5;
            x[v * frame + u] = (i - w / 2.0) / diag;
            y[v * frame + u] = jn;
        }
    }
    CoordMap { frame, x, y }
}

/// Normalize one explicit source pixel (the map formula at a point).
pub fn normalize_coord(i: f64, j: f64, scene_w: usize, scene_h: usize) -> (f64, f64) {
    let w = scene_w as f64;
    let h = scene_h as f64;
    let diag = (w * w + h * h).sqrt();
    ((i - w / 2.0) / diag, (j - h / 2.0) / diag)
}

/// Frame-resolution stereo bundle before augmentation.
#[derive(Debug, Clone)]
pub struct StereoFrames {
    pub frame: usize,
    pub left: Vec<f32>,
    pub right: Vec<f32>,
    pub coords_left: CoordMap,
    pub coords_right: CoordMap,
    /// Normalized depth channel, cropped with the left box.
    pub depth: Option<Vec<f32>>,
    pub bbox_left: IRect,
    pub bbox_right: IRect,
}

/// Crop both views (and optionally depth) of a stereo scene.
pub fn prepare_stereo(
    scene_l: &GrayImage,
    scene_r: &GrayImage,
    lms_l: &[[f32; 2]; 5],
    lms_r: &[[f32; 2]; 5],
    depth: Option<&DepthMap>,
    spec: &CropSpec,
) -> Result<StereoFrames> {
    spec.validate()?;
    let (left, bbox_left) = crop_face(scene_l, lms_l, spec)?;
    let (right, bbox_right) = crop_face(scene_r, lms_r, spec)?;
    let coords_left = coord_map(bbox_left, spec.frame, scene_l.w, scene_l.h);
    let coords_right = coord_map(bbox_right, spec.frame, scene_r.w, scene_r.h);
    let depth = depth.map(|d| {
        crop_depth(d, bbox_left, spec.frame)
            .into_iter()
            .map(normalize_depth)
            .collect()
    });
    Ok(StereoFrames { frame: spec.frame, left, right, coords_left, coords_right, depth, bbox_left, bbox_right })
}

/// As [`prepare_stereo`], but with caller-supplied source boxes instead of
/// landmark-derived ones (the margin is assumed already included).
pub fn prepare_stereo_from_boxes(
    scene_l: &GrayImage,
    scene_r: &GrayImage,
    bbox_l: IRect,
    bbox_r: IRect,
    depth: Option<&DepthMap>,
    spec: &CropSpec,
) -> Result<StereoFrames> {
    spec.validate()?;
    for (bbox, scene) in [(bbox_l, scene_l), (bbox_r, scene_r)] {
        if bbox.side < 4 || bbox.x + bbox.side > scene.w || bbox.y + bbox.side > scene.h {
            return Err(Error::data(format!(
                "source box {bbox:?} does not fit a {}x{} scene",
                scene.w, scene.h
            )));
        }
    }
    let to_norm = |v: Vec<f32>| v.into_iter().map(normalize_gray).collect::<Vec<f32>>();
    let left = to_norm(resample_box(scene_l, bbox_l, spec.frame));
    let right = to_norm(resample_box(scene_r, bbox_r, spec.frame));
    let coords_left = coord_map(bbox_l, spec.frame, scene_l.w, scene_l.h);
    let coords_right = coord_map(bbox_r, spec.frame, scene_r.w, scene_r.h);
    let depth = depth.map(|d| {
        crop_depth(d, bbox_l, spec.frame)
            .into_iter()
            .map(normalize_depth)
            .collect()
    });
    Ok(StereoFrames {
        frame: spec.frame,
        left,
        right,
        coords_left,
        coords_right,
        depth,
        bbox_left: bbox_l,
        bbox_right: bbox_r,
    })
}

/// Single-view bundle for the mono model.
#[derive(Debug, Clone)]
pub struct MonoFrame {
    pub frame: usize,
    pub img: Vec<f32>,
    pub bbox: IRect,
}

pub fn prepare_mono(
    scene: &GrayImage,
    lms: &[[f32; 2]; 5],
    spec: &CropSpec,
) -> Result<MonoFrame> {
    spec.validate()?;
    let (img, bbox) = crop_face(scene, lms, spec)?;
    Ok(MonoFrame { frame: spec.frame, img, bbox })
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
pub struct AugmentConfig {
    pub noise_sigma_max: f32,
    pub blur_prob: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig { noise_sigma_max: 0.02, blur_prob: 0.2 }
    }
}

fn window<T: Copy>(src: &[T], frame: usize, crop: usize, y0: usize, x0: usize) -> Vec<T> {
    let mut out = Vec::with_capacity(crop * crop);
    for v in 0..crop {
        let row = (y0 + v) * frame + x0;
        out.extend_from_slice(&src[row..row + crop]);
    }
    out
}

fn box_blur3(img: &mut Vec<f32>, size: usize) {
    let src = img.clone();
    for y in 0..size {
        for x in 0..size {
            let mut sum = 0.0f32;
            let mut cnt = 0.0f32;
            for dy in -1i32..=1 {
                for dx in -1i32..=1 {
                    let ny = y as i32 + dy;
                    let nx = x as i32 + dx;
                    if ny >= 0 && nx >= 0 && (ny as usize) < size && (nx as usize) < size {
                        sum += src[ny as usize * size + nx as usize];
                        cnt += 1.0;
                    }
                }
            }
            img[y * size + x] = sum / cnt;
        }
    }
}

fn add_noise(img: &mut [f32], sigma: f32, rng: &mut ChaCha8Rng) {
    if sigma <= 0.0 {
        return;
    }
    let normal = Normal::new(0.0f32, sigma).expect("valid sigma");
    for v in img.iter_mut() {
        *v = (*v + normal.sample(rng)).clamp(-0.5, 0.5);
    }
}

/// Crop-resolution augmented stereo channels. `offset` is the signed window
/// displacement from the centered crop that was applied to every channel.
#[derive(Debug, Clone)]
pub struct StereoCrop {
    pub crop: usize,
    pub offset: (i32, i32),
    pub left: Vec<f32>,
    pub right: Vec<f32>,
    pub lx: Vec<f64>,
    pub ly: Vec<f64>,
    pub rx: Vec<f64>,
    pub ry: Vec<f64>,
    pub depth: Option<Vec<f32>>,
}

/// One window offset per stereo sample, shared by both views and their
/// coordinate maps. Noise and blur touch only the texture channels.
/// `rng: None` is test mode: deterministic center crop, no perturbation.
pub fn augment_stereo(
    frames: &StereoFrames,
    spec: &CropSpec,
    cfg: &AugmentConfig,
    mut rng: Option<&mut ChaCha8Rng>,
) -> StereoCrop {
    let frame = frames.frame;
    let crop = spec.train_crop;
    let base = ((frame - crop) / 2) as i32;
    let (dx, dy) = match rng.as_deref_mut() {
        Some(r) => (r.random_range(-base..=base), r.random_range(-base..=base)),
        None => (0, 0),
    };
    let x0 = (base + dx) as usize;
    let y0 = (base + dy) as usize;

    let mut left = window(&frames.left, frame, crop, y0, x0);
    let mut right = window(&frames.right, frame, crop, y0, x0);
    let lx = window(&frames.coords_left.x, frame, crop, y0, x0);
    let ly = window(&frames.coords_left.y, frame, crop, y0, x0);
    let rx = window(&frames.coords_right.x, frame, crop, y0, x0);
    let ry = window(&frames.coords_right.y, frame, crop, y0, x0);
    let depth = frames.depth.as_ref().map(|d| window(d, frame, crop, y0, x0));

    if let Some(r) = rng {
        if r.random_bool(cfg.blur_prob) {
            box_blur3(&mut left, crop);
            box_blur3(&mut right, crop);
        }
        let sigma = r.random_range(0.0..=cfg.noise_sigma_max);
        add_noise(&mut left, sigma, r);
        add_noise(&mut right, sigma, r);
    }

    StereoCrop { crop, offset: (dx, dy), left, right, lx, ly, rx, ry, depth }
}

#[derive(Debug, Clone)]
pub struct MonoCrop {
    pub crop: usize,
    pub img: Vec<f32>,
}

pub fn augment_mono(
    frame_bundle: &MonoFrame,
    spec: &CropSpec,
    cfg: &AugmentConfig,
    mut rng: Option<&mut ChaCha8Rng>,
) -> MonoCrop {
    let frame = frame_bundle.frame;
    let crop = spec.train_crop;
    let base = ((frame - crop) / 2) as i32;
    let (dx, dy) = match rng.as_deref_mut() {
        Some(r) => (r.random_range(-base..=base), r.random_range(-base..=base)),
        None => (0, 0),
    };
    let mut img = window(&frame_bundle.img, frame, crop, (base + dy) as usize, (base + dx) as usize);
    if let Some(r) = rng {
        if r.random_bool(cfg.blur_prob) {
            box_blur3(&mut img, crop);
        }
        let sigma = r.random_range(0.0..=cfg.noise_sigma_max);
        add_noise(&mut img, sigma, r);
    }
    MonoCrop { crop, img }
}

/// Network input modes and their channel counts.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum InputMode {
    Mono,
    Stereo,
    StereoNoCoords,
    DepthTexture,
}

impl InputMode {
    pub fn channels(&self) -> usize {
        match self {
            InputMode::Mono => 1,
            InputMode::Stereo => 6,
            InputMode::StereoNoCoords => 2,
            InputMode::DepthTexture => 2,
        }
    }
}

impl std::fmt::Display for InputMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            InputMode::Mono => "mono",
            InputMode::Stereo => "stereo",
            InputMode::StereoNoCoords => "stereo-nocoords",
            InputMode::DepthTexture => "depthtex",
        };
        f.write_str(s)
    }
}

/// One assembled network input: `channels x size x size`, row-major.
///
/// Channel order: Stereo `[L, R, Lx, Ly, Rx, Ry]`; StereoNoCoords `[L, R]`;
/// DepthTexture `[L, depth]`; Mono `[img]`.
#[derive(Debug, Clone)]
pub struct NetInput {
    pub mode: InputMode,
    pub size: usize,
    pub data: Vec<f32>,
}

impl NetInput {
    pub fn channels(&self) -> usize {
        self.mode.channels()
    }
}

/// Stack an augmented stereo crop into the channel layout of `mode`.
pub fn assemble_input(mode: InputMode, crop: &StereoCrop) -> Result<NetInput> {
    let n = crop.crop * crop.crop;
    fn cast(v: &[f64]) -> impl Iterator<Item = f32> + '_ {
        v.iter().map(|&x| x as f32)
    }
    let data: Vec<f32> = match mode {
        InputMode::Mono => crop.left.clone(),
        InputMode::Stereo => {
            let mut d = Vec::with_capacity(6 * n);
            d.extend_from_slice(&crop.left);
            d.extend_from_slice(&crop.right);
            d.extend(cast(&crop.lx));
            d.extend(cast(&crop.ly));
            d.extend(cast(&crop.rx));
            d.extend(cast(&crop.ry));
            d
        }
        InputMode::StereoNoCoords => {
            let mut d = Vec::with_capacity(2 * n);
            d.extend_from_slice(&crop.left);
            d.extend_from_slice(&crop.right);
            d
        }
        InputMode::DepthTexture => {
            let depth = crop.depth.as_ref().ok_or_else(|| {
                Error::config("depth+texture input requested but no depth channel present")
            })?;
            let mut d = Vec::with_capacity(2 * n);
            d.extend_from_slice(&crop.left);
            d.extend_from_slice(depth);
            d
        }
    };
    debug_assert_eq!(data.len(), mode.channels() * n);
    Ok(NetInput { mode, size: crop.crop, data })
}

/// Stereo pair without coordinate channels.
pub fn make_nocoords_input(crop: &StereoCrop) -> NetInput {
    assemble_input(InputMode::StereoNoCoords, crop).expect("no depth required")
}

pub fn mono_input(crop: &MonoCrop) -> NetInput {
    NetInput { mode: InputMode::Mono, size: crop.crop, data: crop.img.clone() }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream_rng;

    #[test]
    fn gray_normalization_endpoints() {
        assert_eq!(normalize_gray_u8(0), -0.5);
        assert_eq!(normalize_gray_u8(255), 0.5);
        let mid = normalize_gray_u8(128);
        assert!((mid - (128.0 / 255.0 - 0.5)).abs() < 1e-7);
        assert!((mid - 0.00196).abs() < 1e-4);
    }

    #[test]
    fn coord_map_zero_centering_is_exact() {
        let (i, j) = normalize_coord(960.0, 540.0, 1920, 1080);
        assert_eq!(i, 0.0);
        assert_eq!(j, 0.0);
    }

    #[test]
    fn coord_map_corner_matches_diagonal_normalization() {
        let diag = ((1920.0f64).powi(2) + (1080.0f64).powi(2)).sqrt();
        let (i, j) = normalize_coord(0.0, 0.0, 1920, 1080);
        assert!((i - (-960.0 / diag)).abs() < 1e-15);
        assert!((j - (-540.0 / diag)).abs() < 1e-15);
        assert!((i - (-0.43579)).abs() < 1e-5);
        assert!((j - (-0.24513)).abs() < 1e-5);
    }

    #[test]
    fn identity_box_reproduces_integer_coords() {
        let m = coord_map(IRect { x: 0, y: 0, side: 64 }, 64, 64, 64);
        let diag = (2.0f64 * 64.0 * 64.0).sqrt();
        // Pixel (5, 7) should carry exactly (5 - 32)/diag, (7 - 32)/diag.
        let idx = 7 * 64 + 5;
        assert_eq!(m.x[idx], (5.0 - 32.0) / diag);
        assert_eq!(m.y[idx], (7.0 - 32.0) / diag);
        // Horizontally adjacent source pixels differ by exactly 1/diag.
        let step = m.x[idx + 1] - m.x[idx];
        assert!((step - 1.0 / diag).abs() < 1e-15);
    }

    #[test]
    fn coord_values_stay_in_open_range() {
        let m = coord_map(IRect { x: 100, y: 30, side: 60 }, 36, 192, 108);
        assert!(m.x.iter().all(|v| v.abs() < 0.5));
        assert!(m.y.iter().all(|v| v.abs() < 0.5));
    }

    #[test]
    fn margin_arithmetic_matches_spec_example() {
        // Landmarks spanning a 40 px box with margin 0.35 -> 54 px source box.
        let scene = GrayImage::filled(200, 200, 0.5);
        let lms = [[80.0, 80.0], [120.0, 80.0], [100.0, 100.0], [80.0, 120.0], [120.0, 120.0]];
        let spec = CropSpec { frame: 36, train_crop: 32, margin: 0.35 };
        let (_, bbox) = crop_face(&scene, &lms, &spec).unwrap();
        assert_eq!(bbox.side, 54);
        assert_eq!(bbox.x, 73); // centered at 100
    }

    #[test]
    fn crop_clamps_to_scene_and_stays_square() {
        let scene = GrayImage::filled(100, 80, 0.1);
        let lms = [[2.0, 2.0], [30.0, 2.0], [16.0, 20.0], [2.0, 38.0], [30.0, 38.0]];
        let spec = CropSpec::desk();
        let (_, bbox) = crop_face(&scene, &lms, &spec).unwrap();
        assert_eq!(bbox.x, 0, "shifted to the scene edge");
        assert!(bbox.y + bbox.side <= 80 && bbox.x + bbox.side <= 100);
    }

    #[test]
    fn degenerate_landmark_box_is_rejected() {
        let scene = GrayImage::filled(100, 100, 0.1);
        let lms = [[50.0, 50.0]; 5];
        assert!(crop_face(&scene, &lms, &CropSpec::desk()).is_err());
    }

    #[test]
    fn too_few_landmarks_in_scene_is_rejected() {
        let scene = GrayImage::filled(100, 100, 0.1);
        let lms = [[-10.0, 5.0], [-20.0, 5.0], [150.0, 5.0], [40.0, 40.0], [60.0, 60.0]];
        assert!(crop_face(&scene, &lms, &CropSpec::desk()).is_err());
    }

    fn fake_frames() -> StereoFrames {
        let spec = CropSpec::desk();
        let frame = spec.frame;
        let img: Vec<f32> = (0..frame * frame).map(|i| (i % 97) as f32 / 97.0 - 0.5).collect();
        StereoFrames {
            frame,
            left: img.clone(),
            right: img.iter().map(|v| -v).collect(),
            coords_left: coord_map(IRect { x: 40, y: 20, side: 54 }, frame, 192, 108),
            coords_right: coord_map(IRect { x: 34, y: 20, side: 54 }, frame, 192, 108),
            depth: Some(vec![0.1; frame * frame]),
            bbox_left: IRect { x: 40, y: 20, side: 54 },
            bbox_right: IRect { x: 34, y: 20, side: 54 },
        }
    }

    #[test]
    fn test_mode_is_centered_and_noise_free() {
        let frames = fake_frames();
        let spec = CropSpec::desk();
        let a = augment_stereo(&frames, &spec, &AugmentConfig::default(), None);
        let b = augment_stereo(&frames, &spec, &AugmentConfig::default(), None);
        assert_eq!(a.offset, (0, 0));
        assert_eq!(a.left, b.left);
        // Center window of the frame.
        let base = (spec.frame - spec.train_crop) / 2;
        assert_eq!(a.left[0], frames.left[base * spec.frame + base]);
    }

    #[test]
    fn coordinate_channels_survive_texture_augmentation_bit_exactly() {
        let frames = fake_frames();
        let spec = CropSpec::desk();
        let mut rng = stream_rng(3, 0, 0);
        let aug = augment_stereo(&frames, &spec, &AugmentConfig { noise_sigma_max: 0.02, blur_prob: 1.0 }, Some(&mut rng));
        // Re-derive the window directly from the frame coordinate maps.
        let base = ((spec.frame - spec.train_crop) / 2) as i32;
        let x0 = (base + aug.offset.0) as usize;
        let y0 = (base + aug.offset.1) as usize;
        let expect_lx = window(&frames.coords_left.x, spec.frame, spec.train_crop, y0, x0);
        let expect_ry = window(&frames.coords_right.y, spec.frame, spec.train_crop, y0, x0);
        assert_eq!(aug.lx, expect_lx, "coords bit-identical after augmentation");
        assert_eq!(aug.ry, expect_ry);
        assert_eq!(aug.depth.as_ref().unwrap(), &vec![0.1; spec.train_crop * spec.train_crop]);
    }

    #[test]
    fn augmented_coords_keep_affine_step() {
        let frames = fake_frames();
        let spec = CropSpec::desk();
        let mut rng = stream_rng(4, 0, 0);
        let aug = augment_stereo(&frames, &spec, &AugmentConfig::default(), Some(&mut rng));
        let diag = ((192.0f64).powi(2) + (108.0f64).powi(2)).sqrt();
        let expected_step = (54.0 / spec.frame as f64) / diag;
        for v in 0..spec.train_crop {
            for u in 0..spec.train_crop - 1 {
                let idx = v * spec.train_crop + u;
                let step = aug.lx[idx + 1] - aug.lx[idx];
                assert!((step - expected_step).abs() < 1e-12, "step {step} vs {expected_step}");
            }
        }
    }

    #[test]
    fn both_views_share_the_window_offset() {
        let frames = fake_frames();
        let spec = CropSpec::desk();
        let mut rng = stream_rng(5, 0, 0);
        let aug = augment_stereo(&frames, &spec, &AugmentConfig { noise_sigma_max: 0.0, blur_prob: 0.0 }, Some(&mut rng));
        let base = ((spec.frame - spec.train_crop) / 2) as i32;
        let x0 = (base + aug.offset.0) as usize;
        let y0 = (base + aug.offset.1) as usize;
        assert_eq!(aug.left, window(&frames.left, spec.frame, spec.train_crop, y0, x0));
        assert_eq!(aug.right, window(&frames.right, spec.frame, spec.train_crop, y0, x0));
    }

    #[test]
    fn coordinate_round_trip_recovers_source_pixel() {
        let bbox = IRect { x: 40, y: 20, side: 54 };
        let m = coord_map(bbox, 36, 192, 108);
        let diag = ((192.0f64).powi(2) + (108.0f64).powi(2)).sqrt();
        for (u, v) in [(0usize, 0usize), (17, 5), (35, 35)] {
            let i = m.x[v * 36 + u] * diag + 96.0;
            let expected = bbox.x as f64 + (u as f64 + 0.5) * 54.0 / 36.0 - 0.5;
            assert!((i - expected).abs() < 0.5, "inverted {i} vs {expected}");
        }
    }

    #[test]
    fn assembled_channel_counts_match_modes() {
        let frames = fake_frames();
        let spec = CropSpec::desk();
        let crop = augment_stereo(&frames, &spec, &AugmentConfig::default(), None);
        let n = spec.train_crop * spec.train_crop;
        let stereo = assemble_input(InputMode::Stereo, &crop).unwrap();
        assert_eq!(stereo.data.len(), 6 * n);
        let nocoords = make_nocoords_input(&crop);
        assert_eq!(nocoords.data.len(), 2 * n);
        assert_eq!(&stereo.data[0..2 * n], &nocoords.data[..], "first two channels agree");
        let dt = assemble_input(InputMode::DepthTexture, &crop).unwrap();
        assert_eq!(dt.data.len(), 2 * n);
        let mono = assemble_input(InputMode::Mono, &crop).unwrap();
        assert_eq!(mono.data.len(), n);
    }

    #[test]
    fn depth_texture_requires_depth() {
        let mut frames = fake_frames();
        frames.depth = None;
        let crop = augment_stereo(&frames, &CropSpec::desk(), &AugmentConfig::default(), None);
        assert!(assemble_input(InputMode::DepthTexture, &crop).is_err());
    }
}
