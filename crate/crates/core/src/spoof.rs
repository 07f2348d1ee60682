//! Flat-projection anti-spoofing: simulate printouts of face images as
//! textured planes seen by the stereo rig, train a binary liveness classifier
//! on stereo inputs, and report detection rates.
//!
//! A flat print induces an exact plane homography between the two views; a
//! real face does not. The classifier learns that signature from the same
//! six-channel inputs the recognition model uses.

use crate::error::{Error, Result};
use crate::facegen::dataset::{
    load_sample_images, write_sample_files, Manifest, SampleEntry, Split, SubjectEntry,
};
use crate::facegen::render::{
    all_in_frame, paint_random_background, raster_triangle, square_rect_around, BBOX_EXPAND,
};
use crate::facegen::{CameraRig, IRect, LightCondition, LightDirection, Pose, StereoSample};
use crate::image::{DepthMap, GrayImage};
use crate::parallel;
use crate::pipeline::{AugmentConfig, InputMode, NetInput};
use crate::recognet::EmbedNet;
use crate::rng::stream_rng;
use crate::tensor::checkpoint;
use crate::tensor::params::{lr_at_epoch, OptimState, ParamStore};
use crate::tensor::tape::Tape;
use crate::tensor::Tensor;
use crate::train::{load_input, stack_inputs, TrainConfig};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::path::Path;

/// Raw pinhole projection to the right camera of a rectified rig:
/// `(x_p, y_p) = (f/z) * (x - b, y)`, without the principal point.
pub fn project_right_raw(focal: f64, baseline: f64, p: [f64; 3]) -> [f64; 2] {
    [focal / p[2] * (p[0] - baseline), focal / p[2] * p[1]]
}

/// Tilted textured plane standing in for a printed face.
#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
pub struct SpoofPlane {
    /// Tilt angles in degrees, drawn from [0, 20] for generated attacks.
    pub pitch: f32,
    pub yaw: f32,
    /// Distance of the plane anchor from the camera, meters.
    pub distance: f32,
    /// Physical print scale, meters per source pixel. `distance/focal`
    /// reproduces the face at natural size.
    pub scale: f32,
}

impl SpoofPlane {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=20.0).contains(&self.pitch) || !(0.0..=20.0).contains(&self.yaw) {
            return Err(Error::config(format!(
                "spoof plane angles must lie in [0, 20] degrees: {self:?}"
            )));
        }
        if self.distance <= 0.0 || self.scale <= 0.0 {
            return Err(Error::config(format!("spoof plane needs positive distance/scale: {self:?}")));
        }
        Ok(())
    }
}

struct PlaneFrame {
    origin: [f32; 3],
    e1: [f32; 3],
    e2: [f32; 3],
    u0: f32,
    v0: f32,
}

/// Plane anchored on the ray through the region center at `plane.distance`,
/// tilted by pitch (about x) then yaw (about y).
fn plane_frame(region: IRect, plane: &SpoofPlane, rig: &CameraRig) -> PlaneFrame {
    let (cx, cy) = rig.principal_point();
    let u0 = region.x as f32 + region.side as f32 / 2.0;
    let v0 = region.y as f32 + region.side as f32 / 2.0;
    let z0 = plane.distance;
    let origin = [(u0 - cx) * z0 / rig.focal, (v0 - cy) * z0 / rig.focal, z0];
    let (sy, cyw) = plane.yaw.to_radians().sin_cos();
    let (sp, cp) = plane.pitch.to_radians().sin_cos();
    // Rx(pitch) * Ry(yaw) applied to the in-plane axes.
    let e1 = [cyw, sp * sy, -cp * sy];
    let e2 = [0.0, cp, sp];
    let s = plane.scale;
    PlaneFrame {
        origin,
        e1: [e1[0] * s, e1[1] * s, e1[2] * s],
        e2: [e2[0] * s, e2[1] * s, e2[2] * s],
        u0,
        v0,
    }
}

fn plane_point(f: &PlaneFrame, u: f32, v: f32) -> [f32; 3] {
    let du = u - f.u0;
    let dv = v - f.v0;
    [
        f.origin[0] + du * f.e1[0] + dv * f.e2[0],
        f.origin[1] + du * f.e1[1] + dv * f.e2[1],
        f.origin[2] + du * f.e1[2] + dv * f.e2[2],
    ]
}

/// Project a source-image region as a flat print and capture it with the
/// stereo rig. Landmarks are carried through the plane mapping; the sample
/// is rejected if they leave the frame.
pub fn flat_project(
    source: &GrayImage,
    region: IRect,
    landmarks: &[[f32; 2]; 5],
    plane: &SpoofPlane,
    rig: &CameraRig,
    background_rng: &mut ChaCha8Rng,
) -> Result<StereoSample> {
    plane.validate()?;
    rig.validate()?;
    let frame = plane_frame(region, plane, rig);
    // Reject planes that reach behind the camera.
    for (u, v) in [
        (region.x as f32, region.y as f32),
        ((region.x + region.side) as f32, region.y as f32),
        (region.x as f32, (region.y + region.side) as f32),
        ((region.x + region.side) as f32, (region.y + region.side) as f32),
    ] {
        if plane_point(&frame, u, v)[2] <= 0.05 {
            return Err(Error::config("spoof plane reaches behind the camera"));
        }
    }

    let (w, h) = (rig.scene_w, rig.scene_h);
    let mut lm_left = [[0.0f32; 2]; 5];
    let mut lm_right = [[0.0f32; 2]; 5];
    for (i, lm) in landmarks.iter().enumerate() {
        let p = plane_point(&frame, lm[0], lm[1]);
        lm_left[i] = rig.project_left(p);
        lm_right[i] = rig.project_right(p);
    }
    if !all_in_frame(&lm_left, w, h) || !all_in_frame(&lm_right, w, h) {
        return Err(Error::data("projected print outside frame"));
    }

    let (mut left, mut right) = paint_random_background(background_rng, rig);
    let mut zl = vec![f32::INFINITY; w * h];
    let mut zr = vec![f32::INFINITY; w * h];
    let mut depth_left = DepthMap::new(w, h);

    let side = region.side;
    let vert = |gu: usize, gv: usize| {
        let u = (region.x + gu) as f32;
        let v = (region.y + gv) as f32;
        let p = plane_point(&frame, u, v);
        let val = source.get((region.x + gu).min(source.w - 1), (region.y + gv).min(source.h - 1));
        (rig.project_left(p), rig.project_right(p), p[2], val)
    };
    for gv in 0..side - 1 {
        for gu in 0..side - 1 {
            let a = vert(gu, gv);
            let b = vert(gu + 1, gv);
            let c = vert(gu, gv + 1);
            let d = vert(gu + 1, gv + 1);
            for tri in [[&a, &b, &c], [&b, &d, &c]] {
                let pl = [tri[0].0, tri[1].0, tri[2].0];
                let pr = [tri[0].1, tri[1].1, tri[2].1];
                let z = [tri[0].2, tri[1].2, tri[2].2];
                let s = [tri[0].3, tri[1].3, tri[2].3];
                raster_triangle(&mut left, &mut zl, Some(&mut depth_left.data), pl, z, s);
                raster_triangle(&mut right, &mut zr, None, pr, z, s);
            }
        }
    }

    Ok(StereoSample {
        left,
        right,
        depth_left,
        bbox_left: square_rect_around(&lm_left, BBOX_EXPAND, w, h),
        bbox_right: square_rect_around(&lm_right, BBOX_EXPAND, w, h),
        landmarks2d_left: lm_left,
        landmarks2d_right: lm_right,
        subject: 0,
        pose: Pose::frontal(plane.distance),
        light: LightCondition { direction: LightDirection::Center, diffuse: 0.75, ambient: 0.2 },
    })
}

/// Left/right correspondences of plane points sampled every `step` pixels of
/// the source region. These follow the exact projection math, no rasterizer.
pub fn flat_correspondences(
    region: IRect,
    plane: &SpoofPlane,
    rig: &CameraRig,
    step: usize,
) -> Vec<([f64; 2], [f64; 2])> {
    let frame = plane_frame(region, plane, rig);
    let mut out = Vec::new();
    let mut gv = 0;
    while gv < region.side {
        let mut gu = 0;
        while gu < region.side {
            let p = plane_point(&frame, (region.x + gu) as f32, (region.y + gv) as f32);
            let l = rig.project_left(p);
            let r = rig.project_right(p);
            out.push(([l[0] as f64, l[1] as f64], [r[0] as f64, r[1] as f64]));
            gu += step;
        }
        gv += step;
    }
    out
}

/// Left/right correspondences of rendered face surface points under a pose,
/// sampled every `step` grid vertices.
pub fn genuine_correspondences(
    surface: &crate::facegen::surface::FaceSurface,
    pose: &Pose,
    rig: &CameraRig,
    step: usize,
) -> Vec<([f64; 2], [f64; 2])> {
    let n = surface.grid_n;
    // Same placement rule as the renderer: nose tip at the pose target.
    let rot = pose_rotation(pose);
    let nose = mat_vec3(&rot, surface.nose_tip());
    let t = [pose.offset_x - nose[0], pose.offset_y - nose[1], pose.distance - nose[2]];
    let mut out = Vec::new();
    let mut gy = 0;
    while gy < n {
        let mut gx = 0;
        while gx < n {
            let i = gy * n + gx;
            if surface.mask[i] {
                let (x, y) = surface.grid_xy(gx, gy);
                let p = mat_vec3(&rot, [x, y, surface.z[i]]);
                let wp = [p[0] + t[0], p[1] + t[1], p[2] + t[2]];
                let l = rig.project_left(wp);
                let r = rig.project_right(wp);
                out.push(([l[0] as f64, l[1] as f64], [r[0] as f64, r[1] as f64]));
            }
            gx += step;
        }
        gy += step;
    }
    out
}

fn pose_rotation(pose: &Pose) -> [[f32; 3]; 3] {
    let (sy, cy) = pose.yaw.to_radians().sin_cos();
    let (sp, cp) = pose.pitch.to_radians().sin_cos();
    let (sr, cr) = pose.roll.to_radians().sin_cos();
    let ry = [[cy, 0.0, sy], [0.0, 1.0, 0.0], [-sy, 0.0, cy]];
    let rx = [[1.0, 0.0, 0.0], [0.0, cp, -sp], [0.0, sp, cp]];
    let rz = [[cr, -sr, 0.0], [sr, cr, 0.0], [0.0, 0.0, 1.0]];
    mat_mul3(&rz, &mat_mul3(&rx, &ry))
}

fn mat_mul3(a: &[[f32; 3]; 3], b: &[[f32; 3]; 3]) -> [[f32; 3]; 3] {
    let mut out = [[0.0f32; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            out[i][j] = a[i][0] * b[0][j] + a[i][1] * b[1][j] + a[i][2] * b[2][j];
        }
    }
    out
}

fn mat_vec3(m: &[[f32; 3]; 3], v: [f32; 3]) -> [f32; 3] {
    [
        m[0][0] * v[0] + m[0][1] * v[1] + m[0][2] * v[2],
        m[1][0] * v[0] + m[1][1] * v[1] + m[1][2] * v[2],
        m[2][0] * v[0] + m[2][1] * v[1] + m[2][2] * v[2],
    ]
}

/// Least-squares homography (DLT with Hartley normalization).
pub fn fit_homography(matches: &[([f64; 2], [f64; 2])]) -> Result<[[f64; 3]; 3]> {
    if matches.len() < 4 {
        return Err(Error::numeric(format!(
            "homography fit needs at least 4 correspondences, got {}",
            matches.len()
        )));
    }
    let normalize = |pts: Vec<[f64; 2]>| -> ([f64; 2], f64, Vec<[f64; 2]>) {
        let n = pts.len() as f64;
        let cx = pts.iter().map(|p| p[0]).sum::<f64>() / n;
        let cy = pts.iter().map(|p| p[1]).sum::<f64>() / n;
        let mean_d = pts
            .iter()
            .map(|p| ((p[0] - cx).powi(2) + (p[1] - cy).powi(2)).sqrt())
            .sum::<f64>()
            / n;
        let s = if mean_d > 1e-12 { std::f64::consts::SQRT_2 / mean_d } else { 1.0 };
        let out = pts.iter().map(|p| [(p[0] - cx) * s, (p[1] - cy) * s]).collect();
        ([cx, cy], s, out)
    };
    let (ca, sa, pa) = normalize(matches.iter().map(|m| m.0).collect());
    let (cb, sb, pb) = normalize(matches.iter().map(|m| m.1).collect());

    let n = matches.len();
    let mut a = nalgebra::DMatrix::<f64>::zeros(2 * n, 9);
    for (k, (p, q)) in pa.iter().zip(&pb).enumerate() {
        let (x, y) = (p[0], p[1]);
        let (xp, yp) = (q[0], q[1]);
        let r0 = 2 * k;
        a[(r0, 0)] = -x;
        a[(r0, 1)] = -y;
        a[(r0, 2)] = -1.0;
        a[(r0, 6)] = x * xp;
        a[(r0, 7)] = y * xp;
        a[(r0, 8)] = xp;
        let r1 = r0 + 1;
        a[(r1, 3)] = -x;
        a[(r1, 4)] = -y;
        a[(r1, 5)] = -1.0;
        a[(r1, 6)] = x * yp;
        a[(r1, 7)] = y * yp;
        a[(r1, 8)] = yp;
    }
    let svd = a.svd(false, true);
    let v_t = svd.v_t.ok_or_else(|| Error::numeric("SVD failed in homography fit"))?;
    let min_idx = svd
        .singular_values
        .iter()
        .enumerate()
        .min_by(|x, y| x.1.total_cmp(y.1))
        .map(|(i, _)| i)
        .ok_or_else(|| Error::numeric("empty SVD in homography fit"))?;
    let hv = v_t.row(min_idx);
    let hn = [
        [hv[0], hv[1], hv[2]],
        [hv[3], hv[4], hv[5]],
        [hv[6], hv[7], hv[8]],
    ];

    // Denormalize: H = Tb^-1 * Hn * Ta.
    let ta = [[sa, 0.0, -sa * ca[0]], [0.0, sa, -sa * ca[1]], [0.0, 0.0, 1.0]];
    let tb_inv = [
        [1.0 / sb, 0.0, cb[0]],
        [0.0, 1.0 / sb, cb[1]],
        [0.0, 0.0, 1.0],
    ];
    let mul = |a: &[[f64; 3]; 3], b: &[[f64; 3]; 3]| {
        let mut out = [[0.0f64; 3]; 3];
        for i in 0..3 {
            for j in 0..3 {
                out[i][j] = a[i][0] * b[0][j] + a[i][1] * b[1][j] + a[i][2] * b[2][j];
            }
        }
        out
    };
    let h = mul(&tb_inv, &mul(&hn, &ta));
    let scale = h[2][2];
    if scale.abs() < 1e-15 {
        return Err(Error::numeric("degenerate homography"));
    }
    Ok([
        [h[0][0] / scale, h[0][1] / scale, h[0][2] / scale],
        [h[1][0] / scale, h[1][1] / scale, h[1][2] / scale],
        [h[2][0] / scale, h[2][1] / scale, h[2][2] / scale],
    ])
}

pub fn apply_homography(h: &[[f64; 3]; 3], p: [f64; 2]) -> [f64; 2] {
    let w = h[2][0] * p[0] + h[2][1] * p[1] + h[2][2];
    [
        (h[0][0] * p[0] + h[0][1] * p[1] + h[0][2]) / w,
        (h[1][0] * p[0] + h[1][1] * p[1] + h[1][2]) / w,
    ]
}

/// Largest reprojection error of the fit over the matches, pixels.
pub fn homography_max_residual(h: &[[f64; 3]; 3], matches: &[([f64; 2], [f64; 2])]) -> f64 {
    matches
        .iter()
        .map(|(p, q)| {
            let m = apply_homography(h, *p);
            ((m[0] - q[0]).powi(2) + (m[1] - q[1]).powi(2)).sqrt()
        })
        .fold(0.0, f64::max)
}

/// Best-fit plane homography residual of a match set, pixels.
pub fn flatness_residual(matches: &[([f64; 2], [f64; 2])]) -> Result<f64> {
    let h = fit_homography(matches)?;
    Ok(homography_max_residual(&h, matches))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SpoofGenConfig {
    pub seed: u64,
    /// Plane anchor distance range, meters.
    pub distance_min: f32,
    pub distance_max: f32,
    /// Upper bound for pitch/yaw tilt, degrees (at most 20).
    pub max_angle: f32,
}

impl Default for SpoofGenConfig {
    fn default() -> Self {
        SpoofGenConfig { seed: 0, distance_min: 0.35, distance_max: 0.90, max_angle: 20.0 }
    }
}

const SPOOF_STREAM: u64 = 0x5F00;
const MAX_PLANE_RETRIES: usize = 20;

/// For every genuine sample, simulate one flat-print attack of its left face
/// region and write an attack dataset mirroring the source layout (same
/// subject ids and splits, `attack: true`).
pub fn gen_spoof_set(
    genuine_dir: &Path,
    out_dir: &Path,
    cfg: &SpoofGenConfig,
) -> Result<Manifest> {
    if cfg.max_angle > 20.0 || cfg.max_angle < 0.0 {
        return Err(Error::config(format!("max_angle {} outside [0, 20]", cfg.max_angle)));
    }
    let genuine = Manifest::load(genuine_dir)?;
    let rig = genuine.rig;
    std::fs::create_dir_all(out_dir)?;

    // Flatten jobs; rendering is parallel with per-sample streams.
    let jobs: Vec<(u32, SampleEntry)> = genuine
        .subjects
        .iter()
        .flat_map(|s| s.samples.iter().map(move |e| (s.id, e.clone())))
        .collect();
    for s in &genuine.subjects {
        std::fs::create_dir_all(out_dir.join(format!("s{:04}", s.id)))?;
        // Keep the layout uniform: carry the passport over.
        std::fs::copy(genuine_dir.join(&s.passport), out_dir.join(&s.passport))?;
    }

    let entries: Vec<Result<SampleEntry>> = parallel::map_collect(jobs.len(), |j| {
        let (subject_id, entry) = &jobs[j];
        let (scene_l, _) = load_sample_images(genuine_dir, entry)?;
        let mut rng = stream_rng(cfg.seed, *subject_id as u64, SPOOF_STREAM + entry.idx as u64);
        for _ in 0..MAX_PLANE_RETRIES {
            let plane = SpoofPlane {
                pitch: rng.random_range(0.0..=cfg.max_angle),
                yaw: rng.random_range(0.0..=cfg.max_angle),
                distance: rng.random_range(cfg.distance_min..=cfg.distance_max),
                scale: 0.0,
            };
            let plane = SpoofPlane { scale: plane.distance / rig.focal, ..plane };
            match flat_project(&scene_l, entry.bbox_left, &entry.landmarks_left, &plane, &rig, &mut rng) {
                Ok(mut sample) => {
                    sample.subject = *subject_id;
                    return write_sample_files(out_dir, *subject_id, entry.idx, &sample, true, Some(plane));
                }
                Err(Error::Data(_)) => continue,
                Err(e) => return Err(e),
            }
        }
        Err(Error::data(format!(
            "no in-frame spoof plane found for subject {subject_id} sample {}",
            entry.idx
        )))
    });

    let mut cursor = 0usize;
    let mut subjects = Vec::with_capacity(genuine.subjects.len());
    for s in &genuine.subjects {
        let mut samples = Vec::with_capacity(s.samples.len());
        for k in 0..s.samples.len() {
            match &entries[cursor + k] {
                Ok(e) => samples.push(e.clone()),
                Err(e) => return Err(Error::data(format!("subject {} attack {k}: {e}", s.id))),
            }
        }
        cursor += s.samples.len();
        subjects.push(SubjectEntry {
            id: s.id,
            split: s.split,
            passport: s.passport.clone(),
            passport_landmarks: s.passport_landmarks,
            samples,
        });
    }
    let manifest = Manifest { version: 1, seed: cfg.seed, rig, subjects };
    manifest.save(out_dir)?;
    Ok(manifest)
}

// ---- liveness classifier ----

/// Stereo backbone with a one-logit head and a decision threshold.
pub struct LivenessModel {
    pub store: ParamStore,
    pub net: EmbedNet,
    pub crop: crate::pipeline::CropSpec,
    pub threshold: f32,
}

#[derive(Serialize, Deserialize)]
struct LivenessMeta {
    kind: String,
    model: crate::recognet::ModelConfig,
    crop: crate::pipeline::CropSpec,
    threshold: f32,
    seed: u64,
}

impl LivenessModel {
    pub fn save(&self, path: &Path, seed: u64) -> Result<()> {
        let meta = LivenessMeta {
            kind: "liveness".into(),
            model: self.net.cfg.clone(),
            crop: self.crop,
            threshold: self.threshold,
            seed,
        };
        checkpoint::save(path, &self.store, serde_json::to_value(meta)?)
    }

    pub fn load(path: &Path) -> Result<LivenessModel> {
        let (tensors, meta) = checkpoint::load(path)?;
        let meta: LivenessMeta = serde_json::from_value(meta)
            .map_err(|e| Error::data(format!("bad liveness meta in {}: {e}", path.display())))?;
        if meta.kind != "liveness" {
            return Err(Error::data(format!("checkpoint {} is not a liveness model", path.display())));
        }
        let mut store = ParamStore::new();
        let mut rng = stream_rng(0, 0, 0);
        let net = EmbedNet::new(meta.model.clone(), &mut store, "embed", &mut rng)?;
        let embed_dim = meta.model.embed_dim;
        store.add("live.w", Tensor::zeros(vec![embed_dim, 1]), true);
        store.add("live.b", Tensor::zeros(vec![1]), false);
        store.load_named(&tensors)?;
        Ok(LivenessModel { store, net, crop: meta.crop, threshold: meta.threshold })
    }

    /// P(real) scores for a set of samples from one dataset directory.
    pub fn score_entries(&self, dir: &Path, entries: &[&SampleEntry]) -> Result<Vec<f64>> {
        let w = self.store.find("live.w").expect("liveness head");
        let b = self.store.find("live.b").expect("liveness head");
        let mut out = Vec::with_capacity(entries.len());
        let mut cursor = 0usize;
        while cursor < entries.len() {
            let count = 64.min(entries.len() - cursor);
            let inputs: Vec<Result<NetInput>> = parallel::map_collect(count, |k| {
                load_input(
                    dir,
                    entries[cursor + k],
                    None,
                    InputMode::Stereo,
                    &self.crop,
                    &AugmentConfig::default(),
                    None,
                )
            });
            let mut batch_inputs = Vec::with_capacity(count);
            for r in inputs {
                batch_inputs.push(r?);
            }
            let batch = stack_inputs(&batch_inputs)?;
            let mut tape = Tape::new();
            let input = tape.input(batch);
            let (_, emb) = self.net.forward(&mut tape, &self.store, input, true)?;
            let wn = tape.input(self.store.get(w).clone());
            let bn = tape.input(self.store.get(b).clone());
            let logits = tape.linear(emb, wn, Some(bn))?;
            out.extend(tape.value(logits).data().iter().map(|&x| sigmoid64(x as f64)));
            cursor += count;
        }
        Ok(out)
    }
}

fn sigmoid64(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

struct LivenessItem {
    dir: LivenessSource,
    entry: SampleEntry,
    label: f32,
}

#[derive(Clone, Copy)]
enum LivenessSource {
    Genuine,
    Attack,
}

/// Train the liveness classifier: stereo six-channel inputs, real (label 1)
/// against simulated flat prints (label 0), binary cross-entropy on one logit.
pub fn liveness_train(
    cfg: &TrainConfig,
    genuine_dir: &Path,
    attack_dir: &Path,
) -> Result<LivenessModel> {
    if cfg.mode != InputMode::Stereo {
        return Err(Error::config("liveness training uses the stereo six-channel input"));
    }
    cfg.validate()?;
    let genuine = Manifest::load(genuine_dir)?;
    let attacks = Manifest::load(attack_dir)?;

    let mut items = Vec::new();
    for s in genuine.subjects_in(Split::Train) {
        for e in &s.samples {
            items.push(LivenessItem { dir: LivenessSource::Genuine, entry: e.clone(), label: 1.0 });
        }
    }
    for s in attacks.subjects_in(Split::Train) {
        for e in &s.samples {
            items.push(LivenessItem { dir: LivenessSource::Attack, entry: e.clone(), label: 0.0 });
        }
    }
    let n_real = items.iter().filter(|i| i.label == 1.0).count();
    if n_real == 0 || n_real == items.len() {
        return Err(Error::data(format!(
            "liveness training needs both classes: {n_real} real of {} total",
            items.len()
        )));
    }

    let mut store = ParamStore::new();
    let mut init_rng = stream_rng(cfg.seed, 0x11FE, 0);
    let net = EmbedNet::new(cfg.model.clone(), &mut store, "embed", &mut init_rng)?;
    let head_w = store.add(
        "live.w",
        Tensor::he_uniform(vec![cfg.model.embed_dim, 1], cfg.model.embed_dim, &mut init_rng),
        true,
    );
    let head_b = store.add("live.b", Tensor::zeros(vec![1]), false);

    let mut opt = OptimState::new(cfg.base_lr, cfg.momentum, cfg.weight_decay)?;
    for epoch in 0..cfg.epochs {
        opt.lr = lr_at_epoch(epoch, cfg.base_lr, cfg.drop_every, cfg.lr_factor);
        let mut order: Vec<usize> = (0..items.len()).collect();
        order.shuffle(&mut stream_rng(cfg.seed, 0xE11E, epoch as u64));
        for batch_ids in order.chunks(cfg.batch) {
            let loaded: Vec<Result<NetInput>> = parallel::map_collect(batch_ids.len(), |k| {
                let item = &items[batch_ids[k]];
                let dir = match item.dir {
                    LivenessSource::Genuine => genuine_dir,
                    LivenessSource::Attack => attack_dir,
                };
                let mut rng = stream_rng(cfg.seed ^ 0xA11E, epoch as u64, batch_ids[k] as u64);
                load_input(dir, &item.entry, None, InputMode::Stereo, &cfg.crop, &cfg.augment, Some(&mut rng))
            });
            let mut inputs = Vec::with_capacity(batch_ids.len());
            for r in loaded {
                inputs.push(r?);
            }
            let labels: Vec<f32> = batch_ids.iter().map(|&i| items[i].label).collect();
            let batch = stack_inputs(&inputs)?;
            let mut tape = Tape::new();
            let input = tape.input(batch);
            let (_, emb) = net.forward(&mut tape, &store, input, false)?;
            let w = tape.param(&store, head_w);
            let b = tape.param(&store, head_b);
            let logits = tape.linear(emb, w, Some(b))?;
            let loss = tape.bce_with_logits(logits, &labels)?;
            let v = tape.value(loss).item()?;
            if !v.is_finite() {
                return Err(Error::numeric(format!("non-finite liveness loss at epoch {epoch}")));
            }
            tape.backward(loss)?;
            tape.accumulate_into(&mut store);
            opt.step(&mut store)?;
        }
    }

    Ok(LivenessModel { store, net, crop: cfg.crop, threshold: 0.5 })
}

/// Detection report over evaluation sets.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SpoofReport {
    pub rows: Vec<SpoofReportRow>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SpoofReportRow {
    pub set: String,
    pub n: usize,
    pub metric: String,
    pub value: f64,
}

impl SpoofReport {
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut s = String::from("set,n,metric,value\n");
        for r in &self.rows {
            s.push_str(&format!("{},{},{},{}\n", r.set, r.n, r.metric, r.value));
        }
        std::fs::write(path, s)?;
        Ok(())
    }
}

/// Attack detection rate and real acceptance rate on the test split, at the
/// model's decision threshold.
pub fn spoof_metrics(
    model: &LivenessModel,
    genuine_dir: &Path,
    attack_dir: &Path,
) -> Result<SpoofReport> {
    let genuine = Manifest::load(genuine_dir)?;
    let attacks = Manifest::load(attack_dir)?;
    let real_entries: Vec<&SampleEntry> = genuine
        .subjects_in(Split::Test)
        .flat_map(|s| s.samples.iter())
        .collect();
    let attack_entries: Vec<&SampleEntry> = attacks
        .subjects_in(Split::Test)
        .flat_map(|s| s.samples.iter())
        .collect();
    if real_entries.is_empty() || attack_entries.is_empty() {
        return Err(Error::data("spoof evaluation needs test-split real and attack samples"));
    }
    let thr = model.threshold as f64;
    let real_scores = model.score_entries(genuine_dir, &real_entries)?;
    let attack_scores = model.score_entries(attack_dir, &attack_entries)?;
    let acceptance =
        real_scores.iter().filter(|&&s| s >= thr).count() as f64 / real_scores.len() as f64;
    let detection =
        attack_scores.iter().filter(|&&s| s < thr).count() as f64 / attack_scores.len() as f64;
    Ok(SpoofReport {
        rows: vec![
            SpoofReportRow { set: "real".into(), n: real_scores.len(), metric: "acceptance_rate".into(), value: acceptance },
            SpoofReportRow { set: "flat".into(), n: attack_scores.len(), metric: "detection_rate".into(), value: detection },
        ],
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn eq5_zero_case_and_hand_value() {
        // x = b projects to the right camera axis.
        let p = project_right_raw(1000.0, 0.03, [0.03, 0.0, 0.5]);
        assert_eq!(p[0], 0.0);
        // f=1000, b=0.03, z=0.5, point (0.1, 0.05, 0.5) -> (140, 100).
        let p = project_right_raw(1000.0, 0.03, [0.1, 0.05, 0.5]);
        assert!((p[0] - 140.0).abs() < 1e-9);
        assert!((p[1] - 100.0).abs() < 1e-9);
    }

    #[test]
    fn eq5_matches_scalar_reference_on_random_inputs() {
        let mut rng = stream_rng(17, 0, 0);
        for _ in 0..1000 {
            let f: f64 = rng.random_range(50.0..2000.0);
            let b: f64 = rng.random_range(0.0..0.2);
            let p = [
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
                rng.random_range(0.1..5.0),
            ];
            let got = project_right_raw(f, b, p);
            let expect = [f / p[2] * (p[0] - b), f / p[2] * p[1]];
            assert!((got[0] - expect[0]).abs() <= 1e-9);
            assert!((got[1] - expect[1]).abs() <= 1e-9);
        }
    }

    #[test]
    fn frontoparallel_plane_has_constant_disparity() {
        let rig = CameraRig::desk();
        let region = IRect { x: 60, y: 30, side: 50 };
        let plane = SpoofPlane { pitch: 0.0, yaw: 0.0, distance: 0.5, scale: 0.5 / rig.focal };
        let matches = flat_correspondences(region, &plane, &rig, 7);
        let expected = (rig.focal * rig.baseline / 0.5) as f64;
        for (l, r) in &matches {
            assert!((l[0] - r[0] - expected).abs() < 1e-3, "disparity {} vs {expected}", l[0] - r[0]);
            assert!((l[1] - r[1]).abs() < 1e-6);
        }
    }

    #[test]
    fn flat_matches_admit_exact_homography() {
        let rig = CameraRig::desk();
        let region = IRect { x: 60, y: 30, side: 48 };
        let plane = SpoofPlane { pitch: 14.0, yaw: 9.0, distance: 0.55, scale: 0.55 / rig.focal };
        let matches = flat_correspondences(region, &plane, &rig, 6);
        assert!(matches.len() >= 20);
        let residual = flatness_residual(&matches).unwrap();
        assert!(residual <= 0.5, "flat residual {residual}");
    }

    #[test]
    fn homography_exact_on_synthetic_h() {
        let h_true = [[1.1, 0.02, 3.0], [-0.01, 0.95, -2.0], [1e-4, -2e-4, 1.0]];
        let mut matches = Vec::new();
        for y in 0..6 {
            for x in 0..6 {
                let p = [x as f64 * 20.0, y as f64 * 15.0];
                matches.push((p, apply_homography(&h_true, p)));
            }
        }
        let h = fit_homography(&matches).unwrap();
        let residual = homography_max_residual(&h, &matches);
        assert!(residual < 1e-8, "residual {residual}");
    }

    #[test]
    fn attack_generation_is_deterministic() {
        use crate::facegen::dataset::{gen_dataset, GenConfig};
        let dir = tempfile::tempdir().unwrap();
        let cfg = GenConfig { subjects: 2, samples_min: 2, samples_max: 2, train_ratio: 0.5, seed: 3 };
        gen_dataset(&cfg, &CameraRig::desk(), dir.path()).unwrap();
        let a1 = tempfile::tempdir().unwrap();
        let a2 = tempfile::tempdir().unwrap();
        let scfg = SpoofGenConfig::default();
        gen_spoof_set(dir.path(), a1.path(), &scfg).unwrap();
        gen_spoof_set(dir.path(), a2.path(), &scfg).unwrap();
        let m1 = std::fs::read(a1.path().join("manifest.json")).unwrap();
        let m2 = std::fs::read(a2.path().join("manifest.json")).unwrap();
        assert_eq!(m1, m2);
        let m = Manifest::load(a1.path()).unwrap();
        for s in &m.subjects {
            for e in &s.samples {
                assert!(e.attack);
                let p = e.plane.unwrap();
                assert!((0.0..=20.0).contains(&p.pitch) && (0.0..=20.0).contains(&p.yaw));
            }
        }
    }

    #[test]
    fn zero_tilt_attack_reproduces_source_region() {
        use crate::facegen::dataset::{gen_dataset, GenConfig};
        let dir = tempfile::tempdir().unwrap();
        let cfg = GenConfig { subjects: 2, samples_min: 1, samples_max: 1, train_ratio: 0.5, seed: 11 };
        let manifest = gen_dataset(&cfg, &CameraRig::desk(), dir.path()).unwrap();
        let entry = &manifest.subjects[0].samples[0];
        let (scene_l, _) = load_sample_images(dir.path(), entry).unwrap();
        let rig = manifest.rig;
        let plane = SpoofPlane {
            pitch: 0.0,
            yaw: 0.0,
            distance: entry.pose.distance,
            scale: entry.pose.distance / rig.focal,
        };
        let mut rng = stream_rng(1, 2, 3);
        let attack =
            flat_project(&scene_l, entry.bbox_left, &entry.landmarks_left, &plane, &rig, &mut rng)
                .unwrap();
        // The print reprojects onto the same pixels in the left view.
        let b = entry.bbox_left;
        let mut sum = 0.0f64;
        let mut n = 0u64;
        for y in b.y + 1..b.y + b.side - 1 {
            for x in b.x + 1..b.x + b.side - 1 {
                sum += (attack.left.get(x, y) - scene_l.get(x, y)).abs() as f64;
                n += 1;
            }
        }
        let mad = sum / n as f64;
        assert!(mad < 0.05, "resampling residual {mad}");
    }
}
