//! Procedural synthetic stereo face generator.
//!
//! Each identity is a parametric heightfield face (ellipsoidal cap plus
//! feature bumps) with a procedural albedo. Scenes are rendered with a
//! rectified pinhole stereo rig under randomized pose and lighting, with
//! ground-truth depth, landmarks, and one frontal passport image per subject.

pub mod dataset;
pub mod render;
pub mod surface;

use crate::error::{Error, Result};
use crate::image::{DepthMap, GrayImage};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// Rectified pinhole stereo rig. The left camera sits at the origin looking
/// down +z; the right camera is displaced by `baseline` along +x.
#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
pub struct CameraRig {
    /// Focal length in pixels.
    pub focal: f32,
    /// Baseline in meters.
    pub baseline: f32,
    pub scene_w: usize,
    pub scene_h: usize,
}

impl CameraRig {
    pub fn desk() -> Self {
        // Focal chosen so a face at 0.5 m spans roughly 45 px.
        CameraRig { focal: 150.0, baseline: 0.030, scene_w: 192, scene_h: 108 }
    }

    pub fn paper_scale() -> Self {
        CameraRig { focal: 1500.0, baseline: 0.030, scene_w: 1920, scene_h: 1080 }
    }

    pub fn validate(&self) -> Result<()> {
        if self.focal <= 0.0 || self.baseline < 0.0 || self.scene_w == 0 || self.scene_h == 0 {
            return Err(Error::config(format!("invalid camera rig: {self:?}")));
        }
        Ok(())
    }

    /// Principal point at the pixel-grid center.
    pub fn principal_point(&self) -> (f32, f32) {
        (0.5 * (self.scene_w as f32 - 1.0), 0.5 * (self.scene_h as f32 - 1.0))
    }

    /// Project a world point to the left camera, in pixels.
    pub fn project_left(&self, p: [f32; 3]) -> [f32; 2] {
        let (cx, cy) = self.principal_point();
        [self.focal * p[0] / p[2] + cx, self.focal * p[1] / p[2] + cy]
    }

    /// Project a world point to the right camera: `(f/z) * (x - b, y)` plus
    /// the principal point.
    pub fn project_right(&self, p: [f32; 3]) -> [f32; 2] {
        let (cx, cy) = self.principal_point();
        [self.focal * (p[0] - self.baseline) / p[2] + cx, self.focal * p[1] / p[2] + cy]
    }
}

/// Head pose and scene placement. Angles in degrees, distances in meters.
/// `distance` is measured to the nose tip.
#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
pub struct Pose {
    pub pitch: f32,
    pub yaw: f32,
    pub roll: f32,
    pub distance: f32,
    pub offset_x: f32,
    pub offset_y: f32,
}

impl Pose {
    pub fn frontal(distance: f32) -> Self {
        Pose { pitch: 0.0, yaw: 0.0, roll: 0.0, distance, offset_x: 0.0, offset_y: 0.0 }
    }

    /// Bounds for genuine dataset samples.
    pub fn within_genuine_bounds(&self) -> bool {
        self.pitch.abs() <= 25.0
            && self.yaw.abs() <= 25.0
            && (0.25..=1.0).contains(&self.distance)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum LightDirection {
    Left,
    Center,
    Right,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
pub struct LightCondition {
    pub direction: LightDirection,
    pub diffuse: f32,
    pub ambient: f32,
}

impl LightCondition {
    pub fn passport() -> Self {
        LightCondition { direction: LightDirection::Center, diffuse: 0.75, ambient: 0.20 }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0 < self.diffuse && self.diffuse <= 1.0)
            || !(0.0..1.0).contains(&self.ambient)
            || self.diffuse + self.ambient > 1.2
        {
            return Err(Error::config(format!("invalid light condition: {self:?}")));
        }
        Ok(())
    }

    /// Unit direction from the surface toward the light.
    pub fn direction_vector(&self) -> [f32; 3] {
        let v: [f32; 3] = match self.direction {
            LightDirection::Left => [-0.55, -0.12, -0.83],
            LightDirection::Center => [0.0, 0.0, -1.0],
            LightDirection::Right => [0.55, -0.12, -0.83],
        };
        let n = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
        [v[0] / n, v[1] / n, v[2] / n]
    }
}

/// Identity-defining parameters: 16 geometry coefficients in [-1,1] and
/// 8 texture coefficients in [0,1].
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct IdentityParams {
    pub geo: [f32; 16],
    pub tex: [f32; 8],
    pub seed: u64,
}

/// Draw a random identity; deterministic for a given RNG state.
pub fn sample_identity(rng: &mut ChaCha8Rng) -> IdentityParams {
    let mut geo = [0.0f32; 16];
    for g in geo.iter_mut() {
        *g = rng.random_range(-1.0..=1.0);
    }
    let mut tex = [0.0f32; 8];
    for t in tex.iter_mut() {
        *t = rng.random_range(0.0..=1.0);
    }
    let seed = rng.random();
    IdentityParams { geo, tex, seed }
}

/// Integer square region, clamped inside the scene.
#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq, Eq)]
pub struct IRect {
    pub x: usize,
    pub y: usize,
    pub side: usize,
}

impl IRect {
    pub fn contains(&self, px: f32, py: f32) -> bool {
        px >= self.x as f32
            && py >= self.y as f32
            && px <= (self.x + self.side) as f32
            && py <= (self.y + self.side) as f32
    }
}

/// One rendered stereo observation with ground truth.
#[derive(Debug, Clone)]
pub struct StereoSample {
    pub left: GrayImage,
    pub right: GrayImage,
    /// Face depth in meters as seen by the left camera; 0 where no face.
    pub depth_left: DepthMap,
    pub bbox_left: IRect,
    pub bbox_right: IRect,
    pub landmarks2d_left: [[f32; 2]; 5],
    pub landmarks2d_right: [[f32; 2]; 5],
    pub subject: u32,
    pub pose: Pose,
    pub light: LightCondition,
}
