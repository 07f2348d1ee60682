//! Two-stage training orchestration: mono pretraining (stage 1, also the
//! frozen perceptual model for the auxiliary loss) and stereo training with
//! optional coordinate channels and auxiliary decoder (stage 2).
//!
//! Determinism contract: given identical config and seed, checkpoints are
//! bit-identical within a build, independent of worker count. Batch order
//! comes from per-epoch seeded shuffles and per-sample augmentation streams
//! are keyed by (epoch, sample index).

use crate::error::{Error, Result};
use crate::facegen::dataset::{
    load_passport_image, load_sample_depth, load_sample_images, Manifest, SampleEntry, Split,
};
use crate::pipeline::{
    assemble_input, augment_mono, augment_stereo, jitter_landmarks, mono_input, prepare_mono,
    prepare_stereo, AugmentConfig, CropSpec, InputMode, NetInput,
};
use crate::recognet::decoder::{aux_loss, total_loss, AuxConfig, AuxDecoder, FrozenMono};
use crate::recognet::{class_loss, AngularHead, EmbedNet, MarginConfig, ModelConfig};
use crate::rng::stream_rng;
use crate::tensor::checkpoint;
use crate::tensor::params::{lr_at_epoch, OptimState, ParamStore};
use crate::tensor::tape::Tape;
use crate::tensor::Tensor;
use crate::{parallel, pipeline};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use std::path::Path;
use std::time::Instant;

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct TrainConfig {
    pub mode: InputMode,
    pub epochs: usize,
    pub batch: usize,
    pub base_lr: f32,
    pub drop_every: usize,
    pub lr_factor: f32,
    pub weight_decay: f32,
    pub momentum: f32,
    pub seed: u64,
    pub margin: MarginConfig,
    pub model: ModelConfig,
    pub crop: CropSpec,
    pub augment: AugmentConfig,
    pub aux: AuxConfig,
}

impl TrainConfig {
    /// Desk-scale defaults: 30 epochs with drops every 10 keeps the reference
    /// schedule's drop-to-epoch ratio; mono batches are twice stereo batches.
    pub fn desk(mode: InputMode) -> Self {
        TrainConfig {
            mode,
            epochs: 30,
            batch: if mode == InputMode::Mono { 64 } else { 32 },
            base_lr: 0.01,
            drop_every: 10,
            lr_factor: 0.1,
            weight_decay: 0.0005,
            momentum: 0.9,
            seed: 0,
            margin: MarginConfig::desk_cosface(),
            model: ModelConfig::desk(mode.channels()),
            crop: CropSpec::desk(),
            augment: AugmentConfig::default(),
            aux: AuxConfig::disabled(),
        }
    }

    /// Reference-scale profile: 100 epochs, drops every 20, scale 30 margins.
    pub fn paper(mode: InputMode) -> Self {
        let mut cfg = Self::desk(mode);
        cfg.epochs = 100;
        cfg.drop_every = 20;
        cfg.model = ModelConfig::paper_scale(mode.channels());
        cfg.crop = CropSpec::paper_scale();
        cfg.margin.scale = 30.0;
        cfg
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.crop.validate()?;
        self.margin.validate()?;
        self.aux.validate()?;
        if self.model.input_channels != self.mode.channels() {
            return Err(Error::config(format!(
                "model expects {} channels but mode {} provides {}",
                self.model.input_channels,
                self.mode,
                self.mode.channels()
            )));
        }
        if self.crop.train_crop != self.model.input_size {
            return Err(Error::config(format!(
                "train crop {} must equal model input size {}",
                self.crop.train_crop, self.model.input_size
            )));
        }
        if self.batch == 0 || self.epochs == 0 {
            return Err(Error::config("batch and epochs must be positive"));
        }
        if self.aux.enabled() && self.mode == InputMode::Mono {
            return Err(Error::config("auxiliary decoder applies to stereo training only"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub l_ang: f64,
    pub l_aux: f64,
    pub lr: f32,
    pub wall_secs: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunRecord {
    pub mode: InputMode,
    pub seed: u64,
    pub checkpoint: String,
    pub epochs: Vec<EpochRecord>,
}

impl RunRecord {
    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join("run.json"), serde_json::to_string_pretty(self)?)?;
        let mut csv = String::from("epoch,l_ang,l_aux,lr\n");
        for e in &self.epochs {
            csv.push_str(&format!("{},{},{},{}\n", e.epoch, e.l_ang, e.l_aux, e.lr));
        }
        std::fs::write(dir.join("loss.csv"), csv)?;
        Ok(())
    }
}

/// A trained embedding model bundled with everything needed for inference.
#[derive(Debug)]
pub struct TrainedModel {
    pub store: ParamStore,
    pub net: EmbedNet,
    pub mode: InputMode,
    pub crop: CropSpec,
    pub margin: MarginConfig,
}

#[derive(Serialize, Deserialize)]
struct CheckpointMeta {
    kind: String,
    mode: InputMode,
    model: ModelConfig,
    crop: CropSpec,
    margin: MarginConfig,
    depth_norm_offset: f32,
    depth_norm_scale: f32,
    seed: u64,
}

impl TrainedModel {
    pub fn save(&self, path: &Path, seed: u64) -> Result<()> {
        // The classifier head is discarded at inference; export embed.* only.
        let mut export = ParamStore::new();
        for (name, tensor) in self.store.entries() {
            if name.starts_with("embed.") {
                export.add(name, tensor.clone(), true);
            }
        }
        let meta = CheckpointMeta {
            kind: "embed".into(),
            mode: self.mode,
            model: self.net.cfg.clone(),
            crop: self.crop,
            margin: self.margin,
            depth_norm_offset: pipeline::DEPTH_NORM_OFFSET,
            depth_norm_scale: pipeline::DEPTH_NORM_SCALE,
            seed,
        };
        checkpoint::save(path, &export, serde_json::to_value(meta)?)
    }

    pub fn load(path: &Path) -> Result<TrainedModel> {
        let (tensors, meta) = checkpoint::load(path)?;
        let meta: CheckpointMeta = serde_json::from_value(meta)
            .map_err(|e| Error::data(format!("bad checkpoint meta in {}: {e}", path.display())))?;
        if meta.kind != "embed" {
            return Err(Error::data(format!(
                "checkpoint {} has kind '{}', expected 'embed'",
                path.display(),
                meta.kind
            )));
        }
        let mut store = ParamStore::new();
        let mut rng = stream_rng(0, 0, 0);
        let net = EmbedNet::new(meta.model.clone(), &mut store, "embed", &mut rng)?;
        store.load_named(&tensors)?;
        Ok(TrainedModel { store, net, mode: meta.mode, crop: meta.crop, margin: meta.margin })
    }

    pub fn embed_batch(&self, batch: &Tensor) -> Result<Vec<Vec<f32>>> {
        self.net.embed_batch(&self.store, batch)
    }
}

/// One trainable item: a manifest sample plus its class label. Mono mode
/// expands each stereo pair into two independent single-view items.
#[derive(Clone)]
struct TrainItem {
    class: usize,
    entry: SampleEntry,
    /// For mono items: which view this item uses.
    side: Side,
}

#[derive(Clone, Copy, PartialEq)]
enum Side {
    Left,
    Right,
    Both,
}

fn collect_items(manifest: &Manifest, mode: InputMode) -> Vec<TrainItem> {
    let mut items = Vec::new();
    for (class, subject) in manifest.subjects_in(Split::Train).enumerate() {
        for entry in &subject.samples {
            if mode == InputMode::Mono {
                items.push(TrainItem { class, entry: entry.clone(), side: Side::Left });
                items.push(TrainItem { class, entry: entry.clone(), side: Side::Right });
            } else {
                items.push(TrainItem { class, entry: entry.clone(), side: Side::Both });
            }
        }
    }
    items
}

/// Load and augment one item into a network input. `rng: None` is the
/// deterministic test-time path (center crop, no jitter, no noise).
pub(crate) fn load_input(
    data_dir: &Path,
    entry: &SampleEntry,
    side_left_only: Option<bool>,
    mode: InputMode,
    crop: &CropSpec,
    augment_cfg: &AugmentConfig,
    mut rng: Option<&mut rand_chacha::ChaCha8Rng>,
) -> Result<NetInput> {
    if mode == InputMode::Mono {
        let left = side_left_only.unwrap_or(true);
        let (scene_l, scene_r) = load_sample_images(data_dir, entry)?;
        let (scene, lms) = if left {
            (scene_l, entry.landmarks_left)
        } else {
            (scene_r, entry.landmarks_right)
        };
        let lms = match rng.as_deref_mut() {
            Some(r) => jitter_landmarks(&lms, r),
            None => lms,
        };
        let frame = prepare_mono(&scene, &lms, crop)?;
        let mc = augment_mono(&frame, crop, augment_cfg, rng);
        return Ok(mono_input(&mc));
    }

    let (scene_l, scene_r) = load_sample_images(data_dir, entry)?;
    let depth = if mode == InputMode::DepthTexture {
        Some(load_sample_depth(data_dir, entry)?)
    } else {
        None
    };
    let (lms_l, lms_r) = match rng.as_deref_mut() {
        Some(r) => (jitter_landmarks(&entry.landmarks_left, r), jitter_landmarks(&entry.landmarks_right, r)),
        None => (entry.landmarks_left, entry.landmarks_right),
    };
    let frames = prepare_stereo(&scene_l, &scene_r, &lms_l, &lms_r, depth.as_ref(), crop)?;
    let sc = augment_stereo(&frames, crop, augment_cfg, rng);
    assemble_input(mode, &sc)
}

/// Stack assembled inputs into one `[B, C, S, S]` batch tensor.
pub fn stack_inputs(inputs: &[NetInput]) -> Result<Tensor> {
    let first = inputs.first().ok_or_else(|| Error::config("empty batch"))?;
    let (c, s) = (first.channels(), first.size);
    let mut data = Vec::with_capacity(inputs.len() * c * s * s);
    for inp in inputs {
        if inp.size != s || inp.channels() != c {
            return Err(Error::shape("inconsistent inputs in batch"));
        }
        data.extend_from_slice(&inp.data);
    }
    Tensor::new(vec![inputs.len(), c, s, s], data)
}

/// Per-class passport targets at network resolution, test-mode preprocessing.
fn passport_targets(
    data_dir: &Path,
    manifest: &Manifest,
    crop: &CropSpec,
    augment_cfg: &AugmentConfig,
) -> Result<Vec<Vec<f32>>> {
    let mut out = Vec::new();
    for subject in manifest.subjects_in(Split::Train) {
        let img = load_passport_image(data_dir, subject)?;
        let frame = prepare_mono(&img, &subject.passport_landmarks, crop)?;
        let mc = augment_mono(&frame, crop, augment_cfg, None);
        out.push(mc.img);
    }
    Ok(out)
}

// Stream tags for training RNG.
const INIT_STREAM: u64 = 0x1217;
const SHUFFLE_STREAM: u64 = 0xE0C4;
const AUG_STREAM: u64 = 0xA006;

/// Train an embedding model. For auxiliary runs (`cfg.aux.beta > 0` with
/// `alpha > 0`) a stage-1 mono checkpoint must be supplied.
pub fn train(
    cfg: &TrainConfig,
    data_dir: &Path,
    mono_ckpt: Option<&Path>,
) -> Result<(TrainedModel, RunRecord)> {
    cfg.validate()?;
    let manifest = Manifest::load(data_dir)?;
    let items = collect_items(&manifest, cfg.mode);
    if items.is_empty() {
        return Err(Error::data("no training samples in manifest"));
    }
    let classes = manifest.subjects_in(Split::Train).count();
    if classes < 2 {
        return Err(Error::data(format!("need at least 2 train subjects, got {classes}")));
    }

    // Frozen stage-1 model for the embedding term of the auxiliary loss.
    let mono_model: Option<TrainedModel> = if cfg.aux.enabled() && cfg.aux.alpha > 0.0 {
        let path = mono_ckpt.ok_or_else(|| {
            Error::config("aux training with alpha > 0 requires --mono-ckpt (stage-1 model)")
        })?;
        let m = TrainedModel::load(path)?;
        if m.mode != InputMode::Mono {
            return Err(Error::config("the auxiliary perceptual model must be a mono model"));
        }
        if m.net.cfg.input_size != cfg.model.input_size {
            return Err(Error::config(format!(
                "mono model input size {} does not match {}",
                m.net.cfg.input_size, cfg.model.input_size
            )));
        }
        Some(m)
    } else {
        None
    };

    let passports: Option<Vec<Vec<f32>>> = if cfg.aux.enabled() {
        Some(passport_targets(data_dir, &manifest, &cfg.crop, &cfg.augment)?)
    } else {
        None
    };

    // Parameter initialization order: embed net, classifier, then (only when
    // enabled) the decoder, so disabling the decoder leaves the others'
    // initial values untouched.
    let mut store = ParamStore::new();
    let mut init_rng = stream_rng(cfg.seed, INIT_STREAM, 0);
    let net = EmbedNet::new(cfg.model.clone(), &mut store, "embed", &mut init_rng)?;
    let head = AngularHead::new(classes, cfg.model.embed_dim, &mut store, "cls", &mut init_rng);
    let aux_decoder = if cfg.aux.enabled() {
        Some(AuxDecoder::new(&cfg.model, &mut store, "aux", &mut init_rng)?)
    } else {
        None
    };

    let mut opt = OptimState::new(cfg.base_lr, cfg.momentum, cfg.weight_decay)?;
    let mut records = Vec::with_capacity(cfg.epochs);
    let passport_pixels = cfg.model.input_size * cfg.model.input_size;

    for epoch in 0..cfg.epochs {
        let started = Instant::now();
        opt.lr = lr_at_epoch(epoch, cfg.base_lr, cfg.drop_every, cfg.lr_factor);
        let mut order: Vec<usize> = (0..items.len()).collect();
        order.shuffle(&mut stream_rng(cfg.seed, SHUFFLE_STREAM, epoch as u64));

        let mut ang_sum = 0.0f64;
        let mut aux_sum = 0.0f64;
        let mut batches = 0usize;

        for batch_ids in order.chunks(cfg.batch) {
            let loaded: Vec<Result<NetInput>> = parallel::map_collect(batch_ids.len(), |k| {
                let idx = batch_ids[k];
                let item = &items[idx];
                let mut rng = stream_rng(cfg.seed ^ AUG_STREAM, epoch as u64, idx as u64);
                load_input(
                    data_dir,
                    &item.entry,
                    Some(item.side != Side::Right),
                    cfg.mode,
                    &cfg.crop,
                    &cfg.augment,
                    Some(&mut rng),
                )
            });
            let mut inputs = Vec::with_capacity(batch_ids.len());
            for r in loaded {
                inputs.push(r?);
            }
            let labels: Vec<usize> = batch_ids.iter().map(|&i| items[i].class).collect();
            let batch = stack_inputs(&inputs)?;

            let mut tape = Tape::new();
            let input = tape.input(batch);
            let (features, embedding) = net.forward(&mut tape, &store, input, false)?;
            let logits = head.angular_logits(&mut tape, &store, embedding, Some(&labels), &cfg.margin)?;
            let l_ang = class_loss(&mut tape, logits, &labels)?;

            let (loss, l_aux_val) = if let Some(decoder) = &aux_decoder {
                let targets = passports.as_ref().expect("present when aux enabled");
                let mut pdata = Vec::with_capacity(labels.len() * passport_pixels);
                for &cls in &labels {
                    pdata.extend_from_slice(&targets[cls]);
                }
                let ptensor =
                    Tensor::new(vec![labels.len(), 1, cfg.model.input_size, cfg.model.input_size], pdata)?;
                let estimate = decoder.decode(&mut tape, &store, features)?;
                let frozen = mono_model.as_ref().map(|m| FrozenMono { net: &m.net, store: &m.store });
                let l_aux = aux_loss(&mut tape, estimate, &ptensor, frozen.as_ref(), cfg.aux.alpha)?;
                let v = tape.value(l_aux).item()?;
                (total_loss(&mut tape, l_ang, Some(l_aux), cfg.aux.beta)?, v as f64)
            } else {
                (total_loss(&mut tape, l_ang, None, 0.0)?, 0.0)
            };

            let ang_val = tape.value(l_ang).item()? as f64;
            let total_val = tape.value(loss).item()?;
            if !total_val.is_finite() {
                return Err(Error::numeric(format!(
                    "non-finite loss at epoch {epoch}, batch {batches}: l_ang {ang_val}, l_aux {l_aux_val}"
                )));
            }
            ang_sum += ang_val;
            aux_sum += l_aux_val;
            batches += 1;

            tape.backward(loss)?;
            tape.accumulate_into(&mut store);
            opt.step(&mut store)?;
        }

        records.push(EpochRecord {
            epoch,
            l_ang: ang_sum / batches as f64,
            l_aux: aux_sum / batches as f64,
            lr: opt.lr,
            wall_secs: started.elapsed().as_secs_f64(),
        });
    }

    let model = TrainedModel { store, net, mode: cfg.mode, crop: cfg.crop, margin: cfg.margin };
    let record = RunRecord { mode: cfg.mode, seed: cfg.seed, checkpoint: String::new(), epochs: records };
    Ok((model, record))
}

/// Stage 1: train the mono model (left and right views as independent
/// samples). The result serves as the frozen perceptual model of Eq-style
/// auxiliary training.
pub fn pretrain_mono(cfg: &TrainConfig, data_dir: &Path) -> Result<(TrainedModel, RunRecord)> {
    if cfg.mode != InputMode::Mono {
        return Err(Error::config("pretrain_mono requires mono mode"));
    }
    train(cfg, data_dir, None)
}

/// Train, save the checkpoint and run record under `out_dir`.
pub fn train_and_save(
    cfg: &TrainConfig,
    data_dir: &Path,
    out_dir: &Path,
    mono_ckpt: Option<&Path>,
) -> Result<(TrainedModel, RunRecord)> {
    let (model, mut record) = train(cfg, data_dir, mono_ckpt)?;
    std::fs::create_dir_all(out_dir)?;
    let ckpt = out_dir.join("model.ckpt");
    model.save(&ckpt, cfg.seed)?;
    record.checkpoint = ckpt.display().to_string();
    record.save(out_dir)?;
    Ok((model, record))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_validation_catches_mode_mismatch() {
        let mut cfg = TrainConfig::desk(InputMode::Stereo);
        cfg.model.input_channels = 1;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn desk_batches_keep_mono_double_stereo() {
        let mono = TrainConfig::desk(InputMode::Mono);
        let stereo = TrainConfig::desk(InputMode::Stereo);
        assert_eq!(mono.batch, 2 * stereo.batch);
    }

    #[test]
    fn aux_on_mono_is_rejected() {
        let mut cfg = TrainConfig::desk(InputMode::Mono);
        cfg.aux = AuxConfig::default();
        assert!(cfg.validate().is_err());
    }
}
