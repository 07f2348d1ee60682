//! Dataset generation and the on-disk layout.
//!
//! A dataset directory holds `manifest.json` plus one `s{id:04}` directory
//! per subject containing `passport.pgm` and, per sample, `{idx:03}_L.pgm`,
//! `{idx:03}_R.pgm`, and `{idx:03}_D.dpth`.

use super::render::{render_genuine, render_passport};
use super::surface::{build_surface, FaceSurface};
use super::{sample_identity, CameraRig, IRect, LightCondition, Pose, StereoSample};
use crate::error::{Error, Result};
use crate::image::{read_depth, read_pgm, write_depth, write_pgm, DepthMap, GrayImage};
use crate::parallel;
use crate::rng::stream_rng;
use crate::spoof::SpoofPlane;
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SampleEntry {
    pub idx: u32,
    pub left: String,
    pub right: String,
    pub depth: String,
    pub bbox_left: IRect,
    pub bbox_right: IRect,
    pub landmarks_left: [[f32; 2]; 5],
    pub landmarks_right: [[f32; 2]; 5],
    pub pose: Pose,
    pub light: LightCondition,
    #[serde(default)]
    pub attack: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub plane: Option<SpoofPlane>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SubjectEntry {
    pub id: u32,
    pub split: Split,
    pub passport: String,
    pub passport_landmarks: [[f32; 2]; 5],
    pub samples: Vec<SampleEntry>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Manifest {
    pub version: u32,
    pub seed: u64,
    pub rig: CameraRig,
    pub subjects: Vec<SubjectEntry>,
}

impl Manifest {
    pub fn load(dir: &Path) -> Result<Manifest> {
        let path = dir.join("manifest.json");
        let bytes = std::fs::read(&path)
            .map_err(|e| Error::data(format!("cannot read {}: {e}", path.display())))?;
        Ok(serde_json::from_slice(&bytes)?)
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        let json = serde_json::to_string_pretty(self)?;
        std::fs::write(dir.join("manifest.json"), json)?;
        Ok(())
    }

    pub fn subjects_in(&self, split: Split) -> impl Iterator<Item = &SubjectEntry> + '_ {
        self.subjects.iter().filter(move |s| s.split == split)
    }

    pub fn total_samples(&self) -> usize {
        self.subjects.iter().map(|s| s.samples.len()).sum()
    }
}

/// Read one sample's stereo images.
pub fn load_sample_images(dir: &Path, entry: &SampleEntry) -> Result<(GrayImage, GrayImage)> {
    Ok((read_pgm(&dir.join(&entry.left))?, read_pgm(&dir.join(&entry.right))?))
}

pub fn load_sample_depth(dir: &Path, entry: &SampleEntry) -> Result<DepthMap> {
    read_depth(&dir.join(&entry.depth))
}

pub fn load_passport_image(dir: &Path, subject: &SubjectEntry) -> Result<GrayImage> {
    read_pgm(&dir.join(&subject.passport))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GenConfig {
    pub subjects: usize,
    pub samples_min: usize,
    pub samples_max: usize,
    /// Fraction of subjects assigned to the train split (by subject id).
    pub train_ratio: f32,
    pub seed: u64,
}

impl Default for GenConfig {
    fn default() -> Self {
        GenConfig { subjects: 20, samples_min: 20, samples_max: 30, train_ratio: 0.75, seed: 0 }
    }
}

fn subject_dir(id: u32) -> String {
    format!("s{id:04}")
}

/// Write one rendered sample's files; returns the manifest entry.
pub fn write_sample_files(
    dir: &Path,
    subject_id: u32,
    idx: u32,
    sample: &StereoSample,
    attack: bool,
    plane: Option<SpoofPlane>,
) -> Result<SampleEntry> {
    let sdir = subject_dir(subject_id);
    let left = format!("{sdir}/{idx:03}_L.pgm");
    let right = format!("{sdir}/{idx:03}_R.pgm");
    let depth = format!("{sdir}/{idx:03}_D.dpth");
    write_pgm(&dir.join(&left), &sample.left)?;
    write_pgm(&dir.join(&right), &sample.right)?;
    write_depth(&dir.join(&depth), &sample.depth_left)?;
    Ok(SampleEntry {
        idx,
        left,
        right,
        depth,
        bbox_left: sample.bbox_left,
        bbox_right: sample.bbox_right,
        landmarks_left: sample.landmarks2d_left,
        landmarks_right: sample.landmarks2d_right,
        pose: sample.pose,
        light: sample.light,
        attack,
        plane,
    })
}

// Per-item RNG stream tags. The subject stream (tag 0) draws identity and
// sample count; sample streams start at tag 1.
const SUBJECT_STREAM: u64 = 0;

/// Generate a dataset: `cfg.subjects` identities, a randomized number of
/// stereo pairs each, one passport per subject, split into disjoint
/// train/test subject sets. Deterministic for a given seed regardless of
/// worker count.
pub fn gen_dataset(cfg: &GenConfig, rig: &CameraRig, out_dir: &Path) -> Result<Manifest> {
    if cfg.subjects < 2 {
        return Err(Error::config(format!(
            "need at least 2 subjects, got {}",
            cfg.subjects
        )));
    }
    if cfg.samples_min == 0 || cfg.samples_min > cfg.samples_max {
        return Err(Error::config(format!(
            "bad samples range [{}, {}]",
            cfg.samples_min, cfg.samples_max
        )));
    }
    rig.validate()?;
    std::fs::create_dir_all(out_dir)
        .map_err(|e| Error::data(format!("cannot create {}: {e}", out_dir.display())))?;

    // Identities and per-subject sample counts come from per-subject streams.
    let mut surfaces: Vec<FaceSurface> = Vec::with_capacity(cfg.subjects);
    let mut counts: Vec<usize> = Vec::with_capacity(cfg.subjects);
    for subj in 0..cfg.subjects {
        let mut rng = stream_rng(cfg.seed, subj as u64, SUBJECT_STREAM);
        let identity = sample_identity(&mut rng);
        counts.push(rng.random_range(cfg.samples_min..=cfg.samples_max));
        surfaces.push(build_surface(&identity));
    }

    for subj in 0..cfg.subjects {
        std::fs::create_dir_all(out_dir.join(subject_dir(subj as u32)))?;
    }

    // Passports.
    let passports: Vec<Result<[[f32; 2]; 5]>> = parallel::map_collect(cfg.subjects, |subj| {
        let (img, lms) = render_passport(&surfaces[subj], rig)?;
        let rel = format!("{}/passport.pgm", subject_dir(subj as u32));
        write_pgm(&out_dir.join(&rel), &img)?;
        Ok(lms)
    });

    // Flattened (subject, sample) jobs.
    let mut jobs: Vec<(usize, u32)> = Vec::new();
    for (subj, &count) in counts.iter().enumerate() {
        for idx in 0..count {
            jobs.push((subj, idx as u32));
        }
    }
    let entries: Vec<Result<SampleEntry>> = parallel::map_collect(jobs.len(), |j| {
        let (subj, idx) = jobs[j];
        let mut rng = stream_rng(cfg.seed, subj as u64, 1 + idx as u64);
        let mut sample = render_genuine(&surfaces[subj], rig, &mut rng)?;
        sample.subject = subj as u32;
        write_sample_files(out_dir, subj as u32, idx, &sample, false, None)
    });

    let train_count = ((cfg.subjects as f64) * (cfg.train_ratio as f64)).round() as usize;
    let train_count = train_count.clamp(1, cfg.subjects - 1);

    let mut subjects = Vec::with_capacity(cfg.subjects);
    let mut cursor = 0usize;
    for (subj, &count) in counts.iter().enumerate() {
        let passport_landmarks = match &passports[subj] {
            Ok(l) => *l,
            Err(e) => return Err(Error::data(format!("subject {subj} passport: {e}"))),
        };
        let mut samples = Vec::with_capacity(count);
        for k in 0..count {
            match &entries[cursor + k] {
                Ok(e) => samples.push(e.clone()),
                Err(e) => return Err(Error::data(format!("subject {subj} sample {k}: {e}"))),
            }
        }
        cursor += count;
        subjects.push(SubjectEntry {
            id: subj as u32,
            split: if subj < train_count { Split::Train } else { Split::Test },
            passport: format!("{}/passport.pgm", subject_dir(subj as u32)),
            passport_landmarks,
            samples,
        });
    }

    let manifest = Manifest { version: 1, seed: cfg.seed, rig: *rig, subjects };
    manifest.save(out_dir)?;
    Ok(manifest)
}

/// Paths of a dataset directory.
pub fn manifest_path(dir: &Path) -> PathBuf {
    dir.join("manifest.json")
}
