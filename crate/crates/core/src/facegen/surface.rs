//! Parametric face surface: heightfield, albedo, and analytic landmarks.

use super::IdentityParams;
use serde::{Deserialize, Serialize};

/// Physical side length of the face grid square, meters.
pub const FACE_SIDE: f32 = 0.16;
/// Default grid resolution.
pub const SURFACE_GRID: usize = 96;

/// Nose bump amplitude is `NOSE_AMP_BASE + NOSE_AMP_SPAN * geo[0]`, so the
/// full range over `geo[0]` in [-1,1] is `2 * NOSE_AMP_SPAN` meters.
pub const NOSE_AMP_BASE: f32 = 0.030;
pub const NOSE_AMP_SPAN: f32 = 0.012;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum LandmarkKind {
    LeftEye,
    RightEye,
    NoseTip,
    MouthLeft,
    MouthRight,
}

pub const LANDMARK_ORDER: [LandmarkKind; 5] = [
    LandmarkKind::LeftEye,
    LandmarkKind::RightEye,
    LandmarkKind::NoseTip,
    LandmarkKind::MouthLeft,
    LandmarkKind::MouthRight,
];

/// Face surface sampled on a `grid_n` x `grid_n` square of side [`FACE_SIDE`].
///
/// Local frame: x right, y down, z away from the camera when rendered
/// frontally. `z` is the heightfield in meters; the nose tip is the grid
/// minimum (closest to the camera). `mask` marks grid points inside the face
/// outline (the cap support ellipse).
#[derive(Debug, Clone)]
pub struct FaceSurface {
    pub grid_n: usize,
    /// z heightfield, row-major, meters. Non-positive; 0 at the outline.
    pub z: Vec<f32>,
    /// Albedo in [0,1], row-major.
    pub albedo: Vec<f32>,
    /// Grid points inside the face outline.
    pub mask: Vec<bool>,
    /// Five landmarks in local coordinates, ordered per [`LANDMARK_ORDER`].
    pub landmarks3d: [[f32; 3]; 5],
}

struct Gaussian {
    cx: f32,
    cy: f32,
    sx: f32,
    sy: f32,
    amp: f32,
}

impl Gaussian {
    fn eval(&self, x: f32, y: f32) -> f32 {
        let dx = (x - self.cx) / self.sx;
        let dy = (y - self.cy) / self.sy;
        self.amp * (-0.5 * (dx * dx + dy * dy)).exp()
    }
}

struct FaceGeometry {
    cap_depth: f32,
    cap_ax: f32,
    cap_ay: f32,
    bumps: Vec<Gaussian>,
    eye_sep: f32,
    eye_y: f32,
    nose_y: f32,
    mouth_y: f32,
    mouth_w: f32,
}

impl FaceGeometry {
    fn from_params(id: &IdentityParams) -> Self {
        let g = &id.geo;
        let eye_sep = 0.056 + 0.012 * g[12];
        let eye_y = -0.030 + 0.008 * g[13];
        let nose_y = 0.012 + 0.008 * g[2];
        let brow_y = eye_y - 0.018 + 0.004 * g[4];
        let mouth_y = 0.055 + 0.008 * g[14];
        let mouth_w = 0.044 + 0.010 * g[15];
        let cheek_x = 0.040 + 0.008 * g[6];
        let chin_y = 0.070 + 0.006 * g[8];

        let bumps = vec![
            // Nose ridge.
            Gaussian {
                cx: 0.0,
                cy: nose_y,
                sx: 0.012 * (1.0 + 0.3 * g[1]),
                sy: 0.030,
                amp: NOSE_AMP_BASE + NOSE_AMP_SPAN * g[0],
            },
            // Brow ridge.
            Gaussian { cx: 0.0, cy: brow_y, sx: 0.045, sy: 0.010, amp: 0.008 + 0.004 * g[3] },
            // Cheeks.
            Gaussian { cx: -cheek_x, cy: 0.022, sx: 0.020, sy: 0.022, amp: 0.008 + 0.005 * g[5] },
            Gaussian { cx: cheek_x, cy: 0.022, sx: 0.020, sy: 0.022, amp: 0.008 + 0.005 * g[5] },
            // Chin.
            Gaussian { cx: 0.0, cy: chin_y, sx: 0.018, sy: 0.014, amp: 0.010 + 0.005 * g[7] },
            // Eye sockets (recessed).
            Gaussian {
                cx: -eye_sep / 2.0,
                cy: eye_y,
                sx: 0.011,
                sy: 0.009,
                amp: -(0.006 + 0.003 * g[11]),
            },
            Gaussian {
                cx: eye_sep / 2.0,
                cy: eye_y,
                sx: 0.011,
                sy: 0.009,
                amp: -(0.006 + 0.003 * g[11]),
            },
        ];

        FaceGeometry {
            cap_depth: 0.050 + 0.010 * g[9],
            cap_ax: 0.070 * (1.0 + 0.15 * g[10]),
            cap_ay: 0.092 * (1.0 - 0.10 * g[10]),
            bumps,
            eye_sep,
            eye_y,
            nose_y,
            mouth_y,
            mouth_w,
        }
    }

    fn cap_support(&self, x: f32, y: f32) -> f32 {
        1.0 - (x / self.cap_ax).powi(2) - (y / self.cap_ay).powi(2)
    }

    /// Relief toward the camera, meters, non-negative inside the outline.
    fn relief(&self, x: f32, y: f32) -> f32 {
        let s = self.cap_support(x, y);
        if s <= 0.0 {
            return 0.0;
        }
        let mut r = self.cap_depth * s.sqrt();
        for b in &self.bumps {
            r += b.eval(x, y);
        }
        r.max(0.0)
    }
}

fn albedo_at(id: &IdentityParams, geom: &FaceGeometry, x: f32, y: f32) -> f32 {
    let t = &id.tex;
    let lerp = |a: f32, b: f32, w: f32| a + (b - a) * w;
    let mut a = 0.40 + 0.25 * t[0];

    // Two smooth tone patches.
    let blob_a = Gaussian {
        cx: lerp(-0.06, 0.06, t[1]),
        cy: lerp(-0.06, 0.06, t[2]),
        sx: 0.035,
        sy: 0.035,
        amp: 0.18 * (t[5] - 0.5),
    };
    let blob_b = Gaussian {
        cx: lerp(-0.06, 0.06, t[3]),
        cy: lerp(-0.06, 0.06, t[4]),
        sx: 0.050,
        sy: 0.050,
        amp: -0.18 * (t[6] - 0.5),
    };
    a += blob_a.eval(x, y) + blob_b.eval(x, y);

    let dark = 0.5 + 0.5 * t[7];
    let ex = geom.eye_sep / 2.0;
    // Eyebrows.
    for sx in [-1.0f32, 1.0] {
        let brow = Gaussian {
            cx: sx * ex,
            cy: geom.eye_y - 0.016,
            sx: 0.018,
            sy: 0.006,
            amp: -0.22 * dark,
        };
        a += brow.eval(x, y);
        // Pupils.
        let eye = Gaussian { cx: sx * ex, cy: geom.eye_y, sx: 0.006, sy: 0.006, amp: -0.30 };
        a += eye.eval(x, y);
    }
    // Lips.
    let lips = Gaussian {
        cx: 0.0,
        cy: geom.mouth_y,
        sx: geom.mouth_w / 2.0,
        sy: 0.008,
        amp: -0.15 * dark,
    };
    a += lips.eval(x, y);

    a.clamp(0.05, 0.95)
}

/// Build the surface for an identity at the default grid resolution.
pub fn build_surface(id: &IdentityParams) -> FaceSurface {
    build_surface_with_grid(id, SURFACE_GRID)
}

pub fn build_surface_with_grid(id: &IdentityParams, grid_n: usize) -> FaceSurface {
    assert!(grid_n >= 8);
    let geom = FaceGeometry::from_params(id);
    let mut z = vec![0.0f32; grid_n * grid_n];
    let mut albedo = vec![0.0f32; grid_n * grid_n];
    let mut mask = vec![false; grid_n * grid_n];
    for gy in 0..grid_n {
        for gx in 0..grid_n {
            let x = (gx as f32 / (grid_n - 1) as f32 - 0.5) * FACE_SIDE;
            let y = (gy as f32 / (grid_n - 1) as f32 - 0.5) * FACE_SIDE;
            let i = gy * grid_n + gx;
            z[i] = -geom.relief(x, y);
            albedo[i] = albedo_at(id, &geom, x, y);
            mask[i] = geom.cap_support(x, y) > 0.0;
        }
    }

    let lm = |x: f32, y: f32| [x, y, -geom.relief(x, y)];
    let landmarks3d = [
        lm(-geom.eye_sep / 2.0, geom.eye_y),
        lm(geom.eye_sep / 2.0, geom.eye_y),
        lm(0.0, geom.nose_y),
        lm(-geom.mouth_w / 2.0, geom.mouth_y),
        lm(geom.mouth_w / 2.0, geom.mouth_y),
    ];

    FaceSurface { grid_n, z, albedo, mask, landmarks3d }
}

impl FaceSurface {
    /// Local (x, y) position of a grid point.
    pub fn grid_xy(&self, gx: usize, gy: usize) -> (f32, f32) {
        let n = (self.grid_n - 1) as f32;
        ((gx as f32 / n - 0.5) * FACE_SIDE, (gy as f32 / n - 0.5) * FACE_SIDE)
    }

    /// Index of the nose-tip landmark in [`LANDMARK_ORDER`].
    pub const NOSE_INDEX: usize = 2;

    pub fn nose_tip(&self) -> [f32; 3] {
        self.landmarks3d[Self::NOSE_INDEX]
    }

    /// Outward (toward camera, z < 0) unit normal at a grid point, from
    /// central differences of the heightfield.
    pub fn normal_at(&self, gx: usize, gy: usize) -> [f32; 3] {
        let n = self.grid_n;
        let step = FACE_SIDE / (n - 1) as f32;
        let xm = self.z[gy * n + gx.saturating_sub(1)];
        let xp = self.z[gy * n + (gx + 1).min(n - 1)];
        let ym = self.z[gy.saturating_sub(1) * n + gx];
        let yp = self.z[(gy + 1).min(n - 1) * n + gx];
        let dzdx = (xp - xm) / (2.0 * step);
        let dzdy = (yp - ym) / (2.0 * step);
        let v = [dzdx, dzdy, -1.0];
        let len = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
        [v[0] / len, v[1] / len, v[2] / len]
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::facegen::sample_identity;
    use crate::rng::stream_rng;

    fn zero_identity() -> IdentityParams {
        IdentityParams { geo: [0.0; 16], tex: [0.5; 8], seed: 0 }
    }

    #[test]
    fn zero_params_give_template_landmarks() {
        let s = build_surface(&zero_identity());
        let lm = s.landmarks3d;
        assert!((lm[0][0] - -0.028).abs() < 1e-6, "left eye x");
        assert!((lm[1][0] - 0.028).abs() < 1e-6, "right eye x");
        assert!((lm[2][0]).abs() < 1e-9, "nose centered");
        assert!((lm[2][1] - 0.012).abs() < 1e-6, "nose y");
        assert!((lm[3][1] - 0.055).abs() < 1e-6, "mouth y");
    }

    #[test]
    fn surface_is_deterministic() {
        let mut rng = stream_rng(9, 0, 0);
        let id = sample_identity(&mut rng);
        let a = build_surface(&id);
        let b = build_surface(&id);
        assert_eq!(a.z, b.z);
        assert_eq!(a.albedo, b.albedo);
    }

    #[test]
    fn nose_tip_is_grid_minimum() {
        let mut rng = stream_rng(11, 0, 0);
        for _ in 0..20 {
            let id = sample_identity(&mut rng);
            let s = build_surface(&id);
            let min_z = s.z.iter().cloned().fold(f32::INFINITY, f32::min);
            let nose_z = s.nose_tip()[2];
            // The analytic landmark sits between grid points; allow one
            // grid-cell quantization step.
            assert!(
                nose_z <= min_z + 2e-4,
                "nose tip z {nose_z} should match grid minimum {min_z}"
            );
        }
    }

    #[test]
    fn nose_amplitude_full_range_is_documented_span() {
        let mut hi = zero_identity();
        hi.geo[0] = 1.0;
        let mut lo = zero_identity();
        lo.geo[0] = -1.0;
        let sh = build_surface(&hi);
        let sl = build_surface(&lo);
        let dh = sh.nose_tip()[2];
        let dl = sl.nose_tip()[2];
        let diff = (dl - dh).abs();
        assert!(
            (diff - 2.0 * NOSE_AMP_SPAN).abs() < 1e-4,
            "nose tip height difference {diff} vs documented {}",
            2.0 * NOSE_AMP_SPAN
        );
    }

    #[test]
    fn heightfield_is_finite_and_nonpositive() {
        let mut rng = stream_rng(13, 0, 0);
        let id = sample_identity(&mut rng);
        let s = build_surface(&id);
        assert!(s.z.iter().all(|v| v.is_finite() && *v <= 0.0));
        assert!(s.albedo.iter().all(|v| (0.05..=0.95).contains(v)));
    }
}
