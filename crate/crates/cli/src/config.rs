//! Layered configuration: profile defaults, then an optional TOML file, then
//! `STEREOFACE_*` environment variables, then command-line flags. Unknown
//! keys are rejected at every layer, and every run writes its fully resolved
//! configuration next to its outputs.

use serde::{Deserialize, Serialize};
use stereoface::error::{Error, Result};
use stereoface::facegen::dataset::GenConfig;
use stereoface::facegen::CameraRig;
use stereoface::pipeline::{AugmentConfig, CropSpec, InputMode};
use stereoface::recognet::decoder::AuxConfig;
use stereoface::recognet::{MarginConfig, ModelConfig, MonoFusion};
use stereoface::spoof::SpoofGenConfig;
use stereoface::tensor::tape::MarginVariant;
use stereoface::train::TrainConfig;
use std::path::Path;

/// Fully resolved settings.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct Config {
    pub profile: String,
    /// Worker threads; 0 means all available cores.
    pub threads: usize,
    pub rig: RigSection,
    pub gen: GenSection,
    pub crop: CropSpec,
    pub model: ModelSection,
    pub margin: MarginSection,
    pub train: TrainSection,
    pub aux: AuxSection,
    pub eval: EvalSection,
    pub spoof: SpoofSection,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct RigSection {
    pub focal: f32,
    pub baseline: f32,
    pub scene_w: usize,
    pub scene_h: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct GenSection {
    pub subjects: usize,
    pub samples_min: usize,
    pub samples_max: usize,
    pub train_ratio: f32,
    pub seed: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ModelSection {
    pub stage_filters: Vec<usize>,
    pub blocks_per_stage: Vec<usize>,
    pub embed_dim: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct MarginSection {
    pub variant: String,
    pub scale: f32,
    pub margin_cosface: f32,
    pub margin_arcface: f32,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct TrainSection {
    pub epochs: usize,
    pub batch_stereo: usize,
    pub batch_mono: usize,
    pub base_lr: f32,
    pub drop_every: usize,
    pub lr_factor: f32,
    pub weight_decay: f32,
    pub momentum: f32,
    pub seed: u64,
    pub noise_sigma_max: f32,
    pub blur_prob: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct AuxSection {
    pub alpha: f32,
    pub beta: f32,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct EvalSection {
    pub fpr: Vec<f64>,
    pub shard_rows: usize,
    pub fusion: String,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct SpoofSection {
    pub seed: u64,
    pub distance_min: f32,
    pub distance_max: f32,
    pub max_angle: f32,
    pub threshold: f32,
    pub epochs: usize,
}

impl Config {
    pub fn desk() -> Config {
        Config {
            profile: "desk".into(),
            threads: 0,
            rig: RigSection { focal: 150.0, baseline: 0.030, scene_w: 192, scene_h: 108 },
            gen: GenSection { subjects: 20, samples_min: 20, samples_max: 30, train_ratio: 0.75, seed: 0 },
            crop: CropSpec::desk(),
            model: ModelSection {
                stage_filters: vec![8, 16, 32, 64],
                blocks_per_stage: vec![1, 2, 4, 1],
                embed_dim: 64,
            },
            margin: MarginSection {
                variant: "cosface".into(),
                scale: 16.0,
                margin_cosface: 0.35,
                margin_arcface: 0.5,
            },
            train: TrainSection {
                epochs: 30,
                batch_stereo: 32,
                batch_mono: 64,
                base_lr: 0.01,
                drop_every: 10,
                lr_factor: 0.1,
                weight_decay: 0.0005,
                momentum: 0.9,
                seed: 0,
                noise_sigma_max: 0.02,
                blur_prob: 0.2,
            },
            aux: AuxSection { alpha: 50.0, beta: 1.0 },
            eval: EvalSection { fpr: vec![1e-2, 1e-3, 1e-4], shard_rows: 256, fusion: "average".into() },
            spoof: SpoofSection {
                seed: 0,
                distance_min: 0.35,
                distance_max: 0.90,
                max_angle: 20.0,
                threshold: 0.5,
                epochs: 10,
            },
        }
    }

    /// Reference-scale profile: 1080p scenes, 144/128 crops, the wide model,
    /// 100 epochs with drops every 20, scale-30 margins.
    pub fn paper() -> Config {
        let mut c = Config::desk();
        c.profile = "paper".into();
        c.rig = RigSection { focal: 1500.0, baseline: 0.030, scene_w: 1920, scene_h: 1080 };
        c.crop = CropSpec::paper_scale();
        c.model = ModelSection {
            stage_filters: vec![64, 128, 256, 512],
            blocks_per_stage: vec![1, 2, 4, 1],
            embed_dim: 512,
        };
        c.margin.scale = 30.0;
        c.train.epochs = 100;
        c.train.drop_every = 20;
        c.eval.fpr = vec![1e-5, 2e-6, 1e-6];
        c
    }

    pub fn for_profile(profile: &str) -> Result<Config> {
        match profile {
            "desk" => Ok(Config::desk()),
            "paper" => Ok(Config::paper()),
            other => Err(Error::config(format!("unknown profile '{other}' (expected desk or paper)"))),
        }
    }

    pub fn rig(&self) -> CameraRig {
        CameraRig {
            focal: self.rig.focal,
            baseline: self.rig.baseline,
            scene_w: self.rig.scene_w,
            scene_h: self.rig.scene_h,
        }
    }

    pub fn gen_config(&self) -> GenConfig {
        GenConfig {
            subjects: self.gen.subjects,
            samples_min: self.gen.samples_min,
            samples_max: self.gen.samples_max,
            train_ratio: self.gen.train_ratio,
            seed: self.gen.seed,
        }
    }

    pub fn margin_config(&self, variant_flag: Option<&str>) -> Result<MarginConfig> {
        let name = variant_flag.unwrap_or(&self.margin.variant);
        let (variant, margin) = match name {
            "cosface" => (MarginVariant::CosFace, self.margin.margin_cosface),
            "arcface" => (MarginVariant::ArcFace, self.margin.margin_arcface),
            other => return Err(Error::config(format!("unknown loss variant '{other}'"))),
        };
        Ok(MarginConfig { variant, scale: self.margin.scale, margin })
    }

    pub fn model_config(&self, channels: usize) -> ModelConfig {
        ModelConfig {
            input_channels: channels,
            stage_filters: self.model.stage_filters.clone(),
            blocks_per_stage: self.model.blocks_per_stage.clone(),
            embed_dim: self.model.embed_dim,
            input_size: self.crop.train_crop,
        }
    }

    pub fn train_config(&self, mode: InputMode, margin: MarginConfig, aux: AuxConfig) -> TrainConfig {
        TrainConfig {
            mode,
            epochs: self.train.epochs,
            batch: if mode == InputMode::Mono { self.train.batch_mono } else { self.train.batch_stereo },
            base_lr: self.train.base_lr,
            drop_every: self.train.drop_every,
            lr_factor: self.train.lr_factor,
            weight_decay: self.train.weight_decay,
            momentum: self.train.momentum,
            seed: self.train.seed,
            margin,
            model: self.model_config(mode.channels()),
            crop: self.crop,
            augment: AugmentConfig {
                noise_sigma_max: self.train.noise_sigma_max,
                blur_prob: self.train.blur_prob,
            },
            aux,
        }
    }

    pub fn fusion(&self) -> Result<MonoFusion> {
        match self.eval.fusion.as_str() {
            "average" => Ok(MonoFusion::Average),
            "concat" => Ok(MonoFusion::Concat),
            "left" => Ok(MonoFusion::Left),
            "right" => Ok(MonoFusion::Right),
            other => Err(Error::config(format!("unknown fusion '{other}'"))),
        }
    }

    pub fn spoof_gen_config(&self) -> SpoofGenConfig {
        SpoofGenConfig {
            seed: self.spoof.seed,
            distance_min: self.spoof.distance_min,
            distance_max: self.spoof.distance_max,
            max_angle: self.spoof.max_angle,
        }
    }

    /// Write the fully resolved settings next to a run's outputs.
    pub fn write_resolved(&self, out_dir: &Path) -> Result<()> {
        std::fs::create_dir_all(out_dir)?;
        let text = toml::to_string_pretty(self)
            .map_err(|e| Error::config(format!("cannot serialize config: {e}")))?;
        std::fs::write(out_dir.join("resolved_config.toml"), text)?;
        Ok(())
    }
}

/// Sparse overlay parsed from a file or the environment. Unknown keys fail.
#[derive(Debug, Default, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConfigPatch {
    pub profile: Option<String>,
    pub threads: Option<usize>,
    #[serde(default)]
    pub rig: RigPatch,
    #[serde(default)]
    pub gen: GenPatch,
    #[serde(default)]
    pub crop: CropPatch,
    #[serde(default)]
    pub model: ModelPatch,
    #[serde(default)]
    pub margin: MarginPatch,
    #[serde(default)]
    pub train: TrainPatch,
    #[serde(default)]
    pub aux: AuxPatch,
    #[serde(default)]
    pub eval: EvalPatch,
    #[serde(default)]
    pub spoof: SpoofPatch,
}

macro_rules! patch_section {
    ($name:ident { $($field:ident : $ty:ty),* $(,)? }) => {
        #[derive(Debug, Default, Clone, Deserialize)]
        #[serde(deny_unknown_fields)]
        pub struct $name {
            $(pub $field: Option<$ty>,)*
        }
    };
}

patch_section!(RigPatch { focal: f32, baseline: f32, scene_w: usize, scene_h: usize });
patch_section!(GenPatch { subjects: usize, samples_min: usize, samples_max: usize, train_ratio: f32, seed: u64 });
patch_section!(CropPatch { frame: usize, train_crop: usize, margin: f32 });
patch_section!(ModelPatch { stage_filters: Vec<usize>, blocks_per_stage: Vec<usize>, embed_dim: usize });
patch_section!(MarginPatch { variant: String, scale: f32, margin_cosface: f32, margin_arcface: f32 });
patch_section!(TrainPatch {
    epochs: usize,
    batch_stereo: usize,
    batch_mono: usize,
    base_lr: f32,
    drop_every: usize,
    lr_factor: f32,
    weight_decay: f32,
    momentum: f32,
    seed: u64,
    noise_sigma_max: f32,
    blur_prob: f64,
});
patch_section!(AuxPatch { alpha: f32, beta: f32 });
patch_section!(EvalPatch { fpr: Vec<f64>, shard_rows: usize, fusion: String });
patch_section!(SpoofPatch { seed: u64, distance_min: f32, distance_max: f32, max_angle: f32, threshold: f32, epochs: usize });

macro_rules! apply_fields {
    ($dst:expr, $src:expr, [$($field:ident),* $(,)?]) => {
        $(if let Some(v) = $src.$field.clone() { $dst.$field = v; })*
    };
}

impl Config {
    pub fn apply(&mut self, p: &ConfigPatch) {
        if let Some(t) = p.threads {
            self.threads = t;
        }
        apply_fields!(self.rig, p.rig, [focal, baseline, scene_w, scene_h]);
        apply_fields!(self.gen, p.gen, [subjects, samples_min, samples_max, train_ratio, seed]);
        apply_fields!(self.crop, p.crop, [frame, train_crop, margin]);
        apply_fields!(self.model, p.model, [stage_filters, blocks_per_stage, embed_dim]);
        apply_fields!(self.margin, p.margin, [variant, scale, margin_cosface, margin_arcface]);
        apply_fields!(
            self.train,
            p.train,
            [epochs, batch_stereo, batch_mono, base_lr, drop_every, lr_factor, weight_decay, momentum, seed, noise_sigma_max, blur_prob]
        );
        apply_fields!(self.aux, p.aux, [alpha, beta]);
        apply_fields!(self.eval, p.eval, [fpr, shard_rows, fusion]);
        apply_fields!(
            self.spoof,
            p.spoof,
            [seed, distance_min, distance_max, max_angle, threshold, epochs]
        );
    }
}

pub const ENV_PREFIX: &str = "STEREOFACE_";

/// Build a patch from `STEREOFACE_<SECTION>_<KEY>` variables (e.g.
/// `STEREOFACE_TRAIN_EPOCHS=5`, `STEREOFACE_RIG_SCENE_W=1920`). Values parse
/// as TOML scalars/arrays, falling back to strings.
pub fn patch_from_env(vars: impl Iterator<Item = (String, String)>) -> Result<ConfigPatch> {
    let sections = [
        "rig", "gen", "crop", "model", "margin", "train", "aux", "eval", "spoof",
    ];
    let mut table = toml::Table::new();
    for (key, value) in vars {
        let Some(rest) = key.strip_prefix(ENV_PREFIX) else { continue };
        let lower = rest.to_lowercase();
        let toml_value = parse_env_value(&value);
        if lower == "profile" || lower == "threads" {
            table.insert(lower, toml_value);
            continue;
        }
        let Some((section, field)) = lower.split_once('_') else {
            return Err(Error::config(format!("unrecognized environment key {key}")));
        };
        if !sections.contains(&section) {
            return Err(Error::config(format!(
                "unrecognized environment key {key} (unknown section '{section}')"
            )));
        }
        table
            .entry(section.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()))
            .as_table_mut()
            .expect("section is a table")
            .insert(field.to_string(), toml_value);
    }
    table
        .try_into::<ConfigPatch>()
        .map_err(|e| Error::config(format!("invalid environment override: {e}")))
}

fn parse_env_value(raw: &str) -> toml::Value {
    // Arrays like "1e-2,1e-3" or "[8,16,32,64]".
    let trimmed = raw.trim();
    let candidate = if trimmed.starts_with('[') {
        format!("v = {trimmed}")
    } else if trimmed.contains(',') {
        format!("v = [{trimmed}]")
    } else {
        format!("v = {trimmed}")
    };
    if let Ok(t) = candidate.parse::<toml::Table>() {
        if let Some(v) = t.get("v") {
            return v.clone();
        }
    }
    toml::Value::String(trimmed.to_string())
}

/// Resolve the layered configuration: profile defaults <- file <- env.
/// Flags are applied by each subcommand afterwards.
pub fn resolve(profile_flag: Option<&str>, file: Option<&Path>) -> Result<Config> {
    let file_patch: Option<ConfigPatch> = match file {
        Some(path) => {
            let text = std::fs::read_to_string(path)
                .map_err(|e| Error::config(format!("cannot read config {}: {e}", path.display())))?;
            Some(
                toml::from_str(&text)
                    .map_err(|e| Error::config(format!("invalid config {}: {e}", path.display())))?,
            )
        }
        None => None,
    };
    let env_patch = patch_from_env(std::env::vars())?;

    // Profile precedence: flag, then env, then file, then the default.
    let profile = profile_flag
        .map(str::to_string)
        .or_else(|| env_patch.profile.clone())
        .or_else(|| file_patch.as_ref().and_then(|p| p.profile.clone()))
        .unwrap_or_else(|| "desk".into());
    let mut cfg = Config::for_profile(&profile)?;
    if let Some(p) = &file_patch {
        cfg.apply(p);
    }
    cfg.apply(&env_patch);
    Ok(cfg)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn file_then_env_layering() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("cfg.toml");
        std::fs::write(&path, "[train]\nepochs = 7\nseed = 3\n[gen]\nsubjects = 12\n").unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        let file_patch: ConfigPatch = toml::from_str(&text).unwrap();
        let env = vec![("STEREOFACE_TRAIN_EPOCHS".to_string(), "9".to_string())];
        let env_patch = patch_from_env(env.into_iter()).unwrap();
        let mut cfg = Config::desk();
        cfg.apply(&file_patch);
        cfg.apply(&env_patch);
        assert_eq!(cfg.train.epochs, 9, "env overrides file");
        assert_eq!(cfg.train.seed, 3, "file overrides default");
        assert_eq!(cfg.gen.subjects, 12);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let err = toml::from_str::<ConfigPatch>("[train]\nepcohs = 7\n").unwrap_err();
        assert!(err.to_string().contains("epcohs"));
        let env = vec![("STEREOFACE_NOPE_X".to_string(), "1".to_string())];
        assert!(patch_from_env(env.into_iter()).is_err());
    }

    #[test]
    fn env_arrays_and_underscored_keys_parse() {
        let env = vec![
            ("STEREOFACE_EVAL_FPR".to_string(), "1e-2,1e-3".to_string()),
            ("STEREOFACE_RIG_SCENE_W".to_string(), "1920".to_string()),
            ("STEREOFACE_MODEL_STAGE_FILTERS".to_string(), "[4,8]".to_string()),
        ];
        let p = patch_from_env(env.into_iter()).unwrap();
        assert_eq!(p.eval.fpr.as_deref(), Some(&[1e-2, 1e-3][..]));
        assert_eq!(p.rig.scene_w, Some(1920));
        assert_eq!(p.model.stage_filters.as_deref(), Some(&[4usize, 8][..]));
    }

    #[test]
    fn paper_profile_switches_scales() {
        let c = Config::paper();
        assert_eq!(c.crop.frame, 144);
        assert_eq!(c.crop.train_crop, 128);
        assert_eq!(c.model.embed_dim, 512);
        assert_eq!(c.train.epochs, 100);
        assert_eq!(c.train.drop_every, 20);
        assert_eq!(c.rig.scene_w, 1920);
    }
}
