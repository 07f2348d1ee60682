//! Stereo scene rendering: z-buffered triangle splatting of the face grid,
//! Lambertian shading, and randomized backgrounds.

use super::surface::FaceSurface;
use super::{CameraRig, IRect, LightCondition, Pose, StereoSample};
use crate::error::{Error, Result};
use crate::image::{DepthMap, GrayImage};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

/// Background content behind the face.
pub enum Background<'a> {
    /// Flat gray level, used for passport shots and controlled tests.
    Neutral(f32),
    /// Noise wallpaper at infinity plus 1-3 geometric shapes at 1.3-3 m.
    Random(&'a mut ChaCha8Rng),
}

fn deg(v: f32) -> f32 {
    v.to_radians()
}

/// Rotation applied to local face coordinates: roll about z, then pitch
/// about x, then yaw about y (column-vector convention R = Rz * Rx * Ry).
fn rotation(pose: &Pose) -> [[f32; 3]; 3] {
    let (sy, cy) = deg(pose.yaw).sin_cos();
    let (sp, cp) = deg(pose.pitch).sin_cos();
    let (sr, cr) = deg(pose.roll).sin_cos();
    let ry = [[cy, 0.0, sy], [0.0, 1.0, 0.0], [-sy, 0.0, cy]];
    let rx = [[1.0, 0.0, 0.0], [0.0, cp, -sp], [0.0, sp, cp]];
    let rz = [[cr, -sr, 0.0], [sr, cr, 0.0], [0.0, 0.0, 1.0]];
    mat_mul(&rz, &mat_mul(&rx, &ry))
}

fn mat_mul(a: &[[f32; 3]; 3], b: &[[f32; 3]; 3]) -> [[f32; 3]; 3] {
    let mut out = [[0.0f32; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            out[i][j] = a[i][0] * b[0][j] + a[i][1] * b[1][j] + a[i][2] * b[2][j];
        }
    }
    out
}

fn mat_vec(m: &[[f32; 3]; 3], v: [f32; 3]) -> [f32; 3] {
    [
        m[0][0] * v[0] + m[0][1] * v[1] + m[0][2] * v[2],
        m[1][0] * v[0] + m[1][1] * v[1] + m[1][2] * v[2],
        m[2][0] * v[0] + m[2][1] * v[1] + m[2][2] * v[2],
    ]
}

/// Rasterize one triangle with affine z and intensity interpolation.
/// Writes `img` and `zbuf` where the depth test passes; `depth_out`, when
/// given, receives the interpolated z at the same pixels.
#[allow(clippy::too_many_arguments)]
pub(crate) fn raster_triangle(
    img: &mut GrayImage,
    zbuf: &mut [f32],
    mut depth_out: Option<&mut [f32]>,
    p: [[f32; 2]; 3],
    z: [f32; 3],
    shade: [f32; 3],
) {
    let (w, h) = (img.w, img.h);
    let area = (p[1][0] - p[0][0]) * (p[2][1] - p[0][1]) - (p[2][0] - p[0][0]) * (p[1][1] - p[0][1]);
    if area.abs() < 1e-12 {
        return;
    }
    let min_x = p.iter().map(|q| q[0]).fold(f32::INFINITY, f32::min).floor().max(0.0) as usize;
    let max_x = p.iter().map(|q| q[0]).fold(f32::NEG_INFINITY, f32::max).ceil().min((w - 1) as f32) as usize;
    let min_y = p.iter().map(|q| q[1]).fold(f32::INFINITY, f32::min).floor().max(0.0) as usize;
    let max_y = p.iter().map(|q| q[1]).fold(f32::NEG_INFINITY, f32::max).ceil().min((h - 1) as f32) as usize;
    if min_x > max_x || min_y > max_y {
        return;
    }
    let inv_area = 1.0 / area;
    let eps = -1e-4; // inclusive edges so adjacent triangles leave no cracks
    for py in min_y..=max_y {
        for px in min_x..=max_x {
            let (xf, yf) = (px as f32, py as f32);
            let w0 = ((p[1][0] - p[0][0]) * (yf - p[0][1]) - (xf - p[0][0]) * (p[1][1] - p[0][1])) * inv_area;
            let w1 = ((xf - p[0][0]) * (p[2][1] - p[0][1]) - (p[2][0] - p[0][0]) * (yf - p[0][1])) * inv_area;
            let w2 = 1.0 - w0 - w1;
            if w0 < eps || w1 < eps || w2 < eps {
                continue;
            }
            // Barycentric weights: w2 for v0, w1 for v1, w0 for v2.
            let zi = w2 * z[0] + w1 * z[1] + w0 * z[2];
            let idx = py * w + px;
            if zi < zbuf[idx] {
                zbuf[idx] = zi;
                img.data[idx] = (w2 * shade[0] + w1 * shade[1] + w0 * shade[2]).clamp(0.0, 1.0);
                if let Some(d) = depth_out.as_deref_mut() {
                    d[idx] = zi;
                }
            }
        }
    }
}

fn wallpaper(rng: &mut ChaCha8Rng, w: usize, h: usize) -> GrayImage {
    let mut img = GrayImage::new(w, h);
    let octaves = [(6usize, 0.5f32), (12, 0.3), (24, 0.2)];
    for (cells, amp) in octaves {
        let gw = cells + 2;
        let gh = (cells * h / w).max(2) + 2;
        let grid: Vec<f32> = (0..gw * gh).map(|_| rng.random_range(0.0..1.0)).collect();
        for py in 0..h {
            for px in 0..w {
                let gx = px as f32 / w as f32 * (gw - 1) as f32;
                let gy = py as f32 / h as f32 * (gh - 1) as f32;
                let x0 = gx.floor() as usize;
                let y0 = gy.floor() as usize;
                let x1 = (x0 + 1).min(gw - 1);
                let y1 = (y0 + 1).min(gh - 1);
                let fx = gx - x0 as f32;
                let fy = gy - y0 as f32;
                let top = grid[y0 * gw + x0] * (1.0 - fx) + grid[y0 * gw + x1] * fx;
                let bot = grid[y1 * gw + x0] * (1.0 - fx) + grid[y1 * gw + x1] * fx;
                img.data[py * w + px] += amp * (top * (1.0 - fy) + bot * fy);
            }
        }
    }
    for v in img.data.iter_mut() {
        *v = 0.25 + 0.5 * v.clamp(0.0, 1.0);
    }
    img
}

enum ShapeKind {
    Rect,
    Ellipse,
}

struct BgShape {
    kind: ShapeKind,
    center: [f32; 3],
    half_w: f32,
    half_h: f32,
    albedo: f32,
}

fn sample_shapes(rng: &mut ChaCha8Rng, rig: &CameraRig) -> Vec<BgShape> {
    let count = rng.random_range(1..=3);
    let (cx, cy) = rig.principal_point();
    (0..count)
        .map(|_| {
            let z = rng.random_range(1.3..3.0);
            let u = rng.random_range(0.1 * rig.scene_w as f32..0.9 * rig.scene_w as f32);
            let v = rng.random_range(0.1 * rig.scene_h as f32..0.9 * rig.scene_h as f32);
            BgShape {
                kind: if rng.random_bool(0.5) { ShapeKind::Rect } else { ShapeKind::Ellipse },
                center: [(u - cx) * z / rig.focal, (v - cy) * z / rig.focal, z],
                half_w: rng.random_range(0.10..0.50),
                half_h: rng.random_range(0.10..0.50),
                albedo: rng.random_range(0.2..0.8),
            }
        })
        .collect()
}

fn draw_shape(img: &mut GrayImage, zbuf: &mut [f32], shape: &BgShape, rig: &CameraRig, right: bool) {
    let p = if right { rig.project_right(shape.center) } else { rig.project_left(shape.center) };
    let z = shape.center[2];
    let ew = rig.focal * shape.half_w / z;
    let eh = rig.focal * shape.half_h / z;
    let min_x = (p[0] - ew).floor().max(0.0) as usize;
    let max_x = (p[0] + ew).ceil().min((img.w - 1) as f32) as usize;
    let min_y = (p[1] - eh).floor().max(0.0) as usize;
    let max_y = (p[1] + eh).ceil().min((img.h - 1) as f32) as usize;
    for py in min_y..=max_y {
        for px in min_x..=max_x {
            let dx = (px as f32 - p[0]) / ew;
            let dy = (py as f32 - p[1]) / eh;
            let inside = match shape.kind {
                ShapeKind::Rect => dx.abs() <= 1.0 && dy.abs() <= 1.0,
                ShapeKind::Ellipse => dx * dx + dy * dy <= 1.0,
            };
            let idx = py * img.w + px;
            if inside && z < zbuf[idx] {
                zbuf[idx] = z;
                img.data[idx] = shape.albedo;
            }
        }
    }
}

/// Paint the standard random background (wallpaper at infinity plus shapes at
/// 1.3-3 m) into a fresh stereo image pair.
pub(crate) fn paint_random_background(rng: &mut ChaCha8Rng, rig: &CameraRig) -> (GrayImage, GrayImage) {
    let (w, h) = (rig.scene_w, rig.scene_h);
    let wp = wallpaper(rng, w, h);
    let mut l = wp.clone();
    let mut r = wp;
    let shapes = sample_shapes(rng, rig);
    let mut zl = vec![f32::INFINITY; w * h];
    let mut zr = vec![f32::INFINITY; w * h];
    for s in &shapes {
        draw_shape(&mut l, &mut zl, s, rig, false);
        draw_shape(&mut r, &mut zr, s, rig, true);
    }
    (l, r)
}

/// Square region around a point set, expanded by `expand_frac` of the larger
/// extent on every side, shifted (and as a last resort shrunk) to fit the scene.
pub(crate) fn square_rect_around(points: &[[f32; 2]], expand_frac: f32, w: usize, h: usize) -> IRect {
    let min_x = points.iter().map(|p| p[0]).fold(f32::INFINITY, f32::min);
    let max_x = points.iter().map(|p| p[0]).fold(f32::NEG_INFINITY, f32::max);
    let min_y = points.iter().map(|p| p[1]).fold(f32::INFINITY, f32::min);
    let max_y = points.iter().map(|p| p[1]).fold(f32::NEG_INFINITY, f32::max);
    let side0 = (max_x - min_x).max(max_y - min_y);
    let side = side0 + 2.0 * expand_frac * side0;
    let cx = 0.5 * (min_x + max_x);
    let cy = 0.5 * (min_y + max_y);
    let mut side_i = side.ceil() as usize;
    side_i = side_i.max(4).min(w.min(h));
    let x0 = ((cx - side as f32 / 2.0).round() as isize).clamp(0, (w - side_i) as isize) as usize;
    let y0 = ((cy - side as f32 / 2.0).round() as isize).clamp(0, (h - side_i) as isize) as usize;
    IRect { x: x0, y: y0, side: side_i }
}

/// Fraction of the landmark-box side kept as bounding-box margin.
pub(crate) const BBOX_EXPAND: f32 = 0.45;
/// Landmarks must land at least this many pixels inside the frame.
pub(crate) const FRAME_MARGIN: f32 = 2.0;

/// True when every point sits at least [`FRAME_MARGIN`] inside the frame.
pub(crate) fn all_in_frame(points: &[[f32; 2]], w: usize, h: usize) -> bool {
    points.iter().all(|p| {
        p[0] >= FRAME_MARGIN
            && p[0] <= w as f32 - 1.0 - FRAME_MARGIN
            && p[1] >= FRAME_MARGIN
            && p[1] <= h as f32 - 1.0 - FRAME_MARGIN
    })
}

/// Render one stereo observation. Fails with a data error if any projected
/// landmark falls outside the frame (callers re-draw the pose and retry).
pub fn render_stereo(
    surface: &FaceSurface,
    pose: &Pose,
    light: &LightCondition,
    rig: &CameraRig,
    background: Background,
) -> Result<StereoSample> {
    rig.validate()?;
    light.validate()?;
    let (w, h) = (rig.scene_w, rig.scene_h);
    let rot = rotation(pose);
    // Place the rotated nose tip exactly at (offset_x, offset_y, distance).
    let nose_world = mat_vec(&rot, surface.nose_tip());
    let t = [
        pose.offset_x - nose_world[0],
        pose.offset_y - nose_world[1],
        pose.distance - nose_world[2],
    ];

    // Landmark projections and frame validity first.
    let mut lm_left = [[0.0f32; 2]; 5];
    let mut lm_right = [[0.0f32; 2]; 5];
    for (i, lm) in surface.landmarks3d.iter().enumerate() {
        let p = mat_vec(&rot, *lm);
        let wp = [p[0] + t[0], p[1] + t[1], p[2] + t[2]];
        if wp[2] <= 0.05 {
            return Err(Error::data("face behind camera"));
        }
        lm_left[i] = rig.project_left(wp);
        lm_right[i] = rig.project_right(wp);
    }
    if !all_in_frame(&lm_left, w, h) || !all_in_frame(&lm_right, w, h) {
        return Err(Error::data("face outside frame"));
    }

    // Background layer.
    let (mut left, mut right) = match background {
        Background::Neutral(v) => (GrayImage::filled(w, h, v), GrayImage::filled(w, h, v)),
        Background::Random(rng) => paint_random_background(rng, rig),
    };

    // Face vertices: world position, projected coordinates, Gouraud shade.
    let n = surface.grid_n;
    let lvec = light.direction_vector();
    let mut proj_l = vec![[0.0f32; 2]; n * n];
    let mut proj_r = vec![[0.0f32; 2]; n * n];
    let mut depth = vec![0.0f32; n * n];
    let mut shade = vec![0.0f32; n * n];
    for gy in 0..n {
        for gx in 0..n {
            let i = gy * n + gx;
            if !surface.mask[i] {
                continue;
            }
            let (x, y) = surface.grid_xy(gx, gy);
            let local = [x, y, surface.z[i]];
            let p = mat_vec(&rot, local);
            let wp = [p[0] + t[0], p[1] + t[1], p[2] + t[2]];
            proj_l[i] = rig.project_left(wp);
            proj_r[i] = rig.project_right(wp);
            depth[i] = wp[2];
            let nrm = mat_vec(&rot, surface.normal_at(gx, gy));
            let lambert = (nrm[0] * lvec[0] + nrm[1] * lvec[1] + nrm[2] * lvec[2]).max(0.0);
            shade[i] = surface.albedo[i] * (light.ambient + light.diffuse * lambert);
        }
    }

    // Shapes live beyond 1.3 m and the face within 1.12 m, so face triangles
    // only need their own z-buffer.
    let mut zl = vec![f32::INFINITY; w * h];
    let mut zr = vec![f32::INFINITY; w * h];
    let mut depth_left = DepthMap::new(w, h);
    for gy in 0..n - 1 {
        for gx in 0..n - 1 {
            let a = gy * n + gx;
            let b = a + 1;
            let c = a + n;
            let d = c + 1;
            if !(surface.mask[a] && surface.mask[b] && surface.mask[c] && surface.mask[d]) {
                continue;
            }
            for tri in [[a, b, c], [b, d, c]] {
                let pl = [proj_l[tri[0]], proj_l[tri[1]], proj_l[tri[2]]];
                let pr = [proj_r[tri[0]], proj_r[tri[1]], proj_r[tri[2]]];
                let z = [depth[tri[0]], depth[tri[1]], depth[tri[2]]];
                let s = [shade[tri[0]], shade[tri[1]], shade[tri[2]]];
                raster_triangle(&mut left, &mut zl, Some(&mut depth_left.data), pl, z, s);
                raster_triangle(&mut right, &mut zr, None, pr, z, s);
            }
        }
    }

    let bbox_left = square_rect_around(&lm_left, BBOX_EXPAND, w, h);
    let bbox_right = square_rect_around(&lm_right, BBOX_EXPAND, w, h);

    Ok(StereoSample {
        left,
        right,
        depth_left,
        bbox_left,
        bbox_right,
        landmarks2d_left: lm_left,
        landmarks2d_right: lm_right,
        subject: 0,
        pose: *pose,
        light: *light,
    })
}

/// Passport shot: frontal pose at 0.5 m, centered, center light, neutral
/// background. Returns the left-camera image and the projected landmarks.
pub fn render_passport(surface: &FaceSurface, rig: &CameraRig) -> Result<(GrayImage, [[f32; 2]; 5])> {
    let pose = Pose::frontal(0.5);
    let light = LightCondition::passport();
    let sample = render_stereo(surface, &pose, &light, rig, Background::Neutral(0.5))?;
    Ok((sample.left, sample.landmarks2d_left))
}

/// Draw a candidate genuine pose.
pub fn sample_pose(rng: &mut ChaCha8Rng, rig: &CameraRig) -> Pose {
    let pitch = rng.random_range(-25.0..=25.0);
    let yaw = rng.random_range(-25.0..=25.0);
    let roll = rng.random_range(-8.0..=8.0);
    let distance = rng.random_range(0.25..=1.0);
    let (cx, cy) = rig.principal_point();
    let u = rng.random_range(0.30 * rig.scene_w as f32..0.70 * rig.scene_w as f32);
    let v = rng.random_range(0.35 * rig.scene_h as f32..0.65 * rig.scene_h as f32);
    Pose {
        pitch,
        yaw,
        roll,
        distance,
        offset_x: (u - cx) * distance / rig.focal,
        offset_y: (v - cy) * distance / rig.focal,
    }
}

pub fn sample_light(rng: &mut ChaCha8Rng) -> LightCondition {
    let direction = match rng.random_range(0..3) {
        0 => super::LightDirection::Left,
        1 => super::LightDirection::Center,
        _ => super::LightDirection::Right,
    };
    LightCondition { direction, diffuse: rng.random_range(0.5..=0.9), ambient: rng.random_range(0.1..=0.3) }
}

const MAX_POSE_RETRIES: usize = 20;

/// Sample pose and light until the face lands fully in frame.
pub fn render_genuine(
    surface: &FaceSurface,
    rig: &CameraRig,
    rng: &mut ChaCha8Rng,
) -> Result<StereoSample> {
    for _ in 0..MAX_POSE_RETRIES {
        let pose = sample_pose(rng, rig);
        let light = sample_light(rng);
        match render_stereo(surface, &pose, &light, rig, Background::Random(rng)) {
            Ok(sample) => return Ok(sample),
            Err(Error::Data(_)) => continue,
            Err(e) => return Err(e),
        }
    }
    Err(Error::data(format!(
        "no in-frame pose found after {MAX_POSE_RETRIES} attempts"
    )))
}
