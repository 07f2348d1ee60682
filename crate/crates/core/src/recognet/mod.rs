//! Embedding networks, angular-margin classification head, and similarity.
//!
//! The backbone is a PReLU residual stack: one stride-2 convolution per stage
//! followed by identity-skip blocks of two 3x3 convolutions, global average
//! pooling, and a linear embedding head. Mono, stereo, and depth+texture
//! variants differ only in the first convolution's input channels.

pub mod decoder;

use crate::error::{Error, Result};
use crate::tensor::params::{ParamId, ParamStore};
use crate::tensor::tape::{MarginVariant, NodeId, Tape};
use crate::tensor::Tensor;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ModelConfig {
    pub input_channels: usize,
    pub stage_filters: Vec<usize>,
    pub blocks_per_stage: Vec<usize>,
    pub embed_dim: usize,
    pub input_size: usize,
}

impl ModelConfig {
    pub fn desk(input_channels: usize) -> Self {
        ModelConfig {
            input_channels,
            stage_filters: vec![8, 16, 32, 64],
            blocks_per_stage: vec![1, 2, 4, 1],
            embed_dim: 64,
            input_size: 32,
        }
    }

    pub fn paper_scale(input_channels: usize) -> Self {
        ModelConfig {
            input_channels,
            stage_filters: vec![64, 128, 256, 512],
            blocks_per_stage: vec![1, 2, 4, 1],
            embed_dim: 512,
            input_size: 128,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.stage_filters.is_empty() || self.stage_filters.len() != self.blocks_per_stage.len() {
            return Err(Error::config(format!(
                "stage_filters ({}) and blocks_per_stage ({}) must be non-empty and equal length",
                self.stage_filters.len(),
                self.blocks_per_stage.len()
            )));
        }
        if self.embed_dim == 0 || self.input_channels == 0 {
            return Err(Error::config("embed_dim and input_channels must be positive"));
        }
        let stride_total = 1usize << self.stage_filters.len();
        if self.input_size % stride_total != 0 || self.input_size / stride_total == 0 {
            return Err(Error::config(format!(
                "input_size {} must be divisible by total stride {stride_total}",
                self.input_size
            )));
        }
        Ok(())
    }

    /// Spatial side of the last feature map.
    pub fn feature_size(&self) -> usize {
        self.input_size >> self.stage_filters.len()
    }
}

#[derive(Debug, Clone, Copy)]
struct Conv {
    w: ParamId,
    stride: usize,
    pad: usize,
}

#[derive(Debug, Clone, Copy)]
struct ResBlock {
    c1: Conv,
    a1: ParamId,
    c2: Conv,
    a2: ParamId,
}

#[derive(Debug, Clone)]
struct Stage {
    down: Conv,
    down_act: ParamId,
    blocks: Vec<ResBlock>,
}

/// Residual embedding network. Parameters live in an external store under
/// the given name prefix.
#[derive(Debug, Clone)]
pub struct EmbedNet {
    pub cfg: ModelConfig,
    stages: Vec<Stage>,
    head_w: ParamId,
    head_b: ParamId,
}

fn conv_param(
    store: &mut ParamStore,
    name: String,
    out_c: usize,
    in_c: usize,
    k: usize,
    rng: &mut ChaCha8Rng,
) -> ParamId {
    let fan_in = in_c * k * k;
    store.add(name, Tensor::he_uniform(vec![out_c, in_c, k, k], fan_in, rng), true)
}

fn slope_param(store: &mut ParamStore, name: String, channels: usize) -> ParamId {
    store.add(name, Tensor::full(vec![channels], 0.25), false)
}

impl EmbedNet {
    pub fn new(
        cfg: ModelConfig,
        store: &mut ParamStore,
        prefix: &str,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        cfg.validate()?;
        let mut stages = Vec::with_capacity(cfg.stage_filters.len());
        let mut in_c = cfg.input_channels;
        for (si, (&filters, &blocks)) in
            cfg.stage_filters.iter().zip(&cfg.blocks_per_stage).enumerate()
        {
            let down = Conv {
                w: conv_param(store, format!("{prefix}.s{si}.down.w"), filters, in_c, 3, rng),
                stride: 2,
                pad: 1,
            };
            let down_act = slope_param(store, format!("{prefix}.s{si}.down.a"), filters);
            let mut blocks_v = Vec::with_capacity(blocks);
            for bi in 0..blocks {
                blocks_v.push(ResBlock {
                    c1: Conv {
                        w: conv_param(store, format!("{prefix}.s{si}.b{bi}.c1.w"), filters, filters, 3, rng),
                        stride: 1,
                        pad: 1,
                    },
                    a1: slope_param(store, format!("{prefix}.s{si}.b{bi}.a1"), filters),
                    c2: Conv {
                        w: conv_param(store, format!("{prefix}.s{si}.b{bi}.c2.w"), filters, filters, 3, rng),
                        stride: 1,
                        pad: 1,
                    },
                    a2: slope_param(store, format!("{prefix}.s{si}.b{bi}.a2"), filters),
                });
            }
            stages.push(Stage { down, down_act, blocks: blocks_v });
            in_c = filters;
        }
        let last = *cfg.stage_filters.last().expect("non-empty");
        let head_w = store.add(
            format!("{prefix}.head.w"),
            Tensor::he_uniform(vec![last, cfg.embed_dim], last, rng),
            true,
        );
        let head_b = store.add(format!("{prefix}.head.b"), Tensor::zeros(vec![cfg.embed_dim]), false);
        Ok(EmbedNet { cfg, stages, head_w, head_b })
    }

    fn bind(&self, tape: &mut Tape, store: &ParamStore, id: ParamId, frozen: bool) -> NodeId {
        if frozen {
            tape.input(store.get(id).clone())
        } else {
            tape.param(store, id)
        }
    }

    /// Forward pass. Returns `(deep_features, embedding)`: the last residual
    /// stage's output and the pooled embedding computed from it in the same
    /// pass. With `frozen` the parameters enter the tape as constants, so
    /// gradients flow through the net without accumulating into the store.
    pub fn forward(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        input: NodeId,
        frozen: bool,
    ) -> Result<(NodeId, NodeId)> {
        let shape = tape.value(input).shape().to_vec();
        if shape.len() != 4 || shape[1] != self.cfg.input_channels || shape[2] != self.cfg.input_size
        {
            return Err(Error::shape(format!(
                "input shape {shape:?} does not match model config ({} channels, size {})",
                self.cfg.input_channels, self.cfg.input_size
            )));
        }
        let mut x = input;
        for stage in &self.stages {
            let w = self.bind(tape, store, stage.down.w, frozen);
            x = tape.conv2d(x, w, stage.down.stride, stage.down.pad)?;
            let a = self.bind(tape, store, stage.down_act, frozen);
            x = tape.prelu(x, a)?;
            for block in &stage.blocks {
                let w1 = self.bind(tape, store, block.c1.w, frozen);
                let mut y = tape.conv2d(x, w1, 1, 1)?;
                let a1 = self.bind(tape, store, block.a1, frozen);
                y = tape.prelu(y, a1)?;
                let w2 = self.bind(tape, store, block.c2.w, frozen);
                y = tape.conv2d(y, w2, 1, 1)?;
                let a2 = self.bind(tape, store, block.a2, frozen);
                y = tape.prelu(y, a2)?;
                x = tape.add(x, y)?;
            }
        }
        let features = x;
        let pooled = tape.global_avg_pool(features)?;
        let w = self.bind(tape, store, self.head_w, frozen);
        let b = self.bind(tape, store, self.head_b, frozen);
        let embedding = tape.linear(pooled, w, Some(b))?;
        Ok((features, embedding))
    }

    /// Embeddings for a batch, outside any training graph.
    pub fn embed_batch(&self, store: &ParamStore, batch: &Tensor) -> Result<Vec<Vec<f32>>> {
        let mut tape = Tape::new();
        let input = tape.input(batch.clone());
        let (_, emb) = self.forward(&mut tape, store, input, true)?;
        let v = tape.value(emb);
        let d = self.cfg.embed_dim;
        Ok(v.data().chunks(d).map(|c| c.to_vec()).collect())
    }
}

/// Angular-margin configuration.
#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
pub struct MarginConfig {
    pub variant: MarginVariant,
    pub scale: f32,
    pub margin: f32,
}

impl MarginConfig {
    pub fn desk_cosface() -> Self {
        MarginConfig { variant: MarginVariant::CosFace, scale: 16.0, margin: 0.35 }
    }

    pub fn desk_arcface() -> Self {
        MarginConfig { variant: MarginVariant::ArcFace, scale: 16.0, margin: 0.5 }
    }

    pub fn validate(&self) -> Result<()> {
        if self.scale <= 1.0 || self.margin < 0.0 {
            return Err(Error::config(format!(
                "margin config needs scale > 1 and margin >= 0, got {self:?}"
            )));
        }
        Ok(())
    }
}

/// Linear classifier over normalized directions, used only during training.
#[derive(Debug, Clone)]
pub struct AngularHead {
    pub classes: usize,
    weights: ParamId,
}

impl AngularHead {
    pub fn new(
        classes: usize,
        embed_dim: usize,
        store: &mut ParamStore,
        prefix: &str,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let weights = store.add(
            format!("{prefix}.w"),
            Tensor::he_uniform(vec![classes, embed_dim], embed_dim, rng),
            true,
        );
        AngularHead { classes, weights }
    }

    /// Cosine logits with the margin applied to the labeled class (training)
    /// or plain scaled cosines (inference, `labels: None`).
    pub fn angular_logits(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        embedding: NodeId,
        labels: Option<&[usize]>,
        mc: &MarginConfig,
    ) -> Result<NodeId> {
        mc.validate()?;
        let e_norm = tape.row_normalize(embedding)?;
        let w = tape.param(store, self.weights);
        let w_norm = tape.row_normalize(w)?;
        let cos = tape.matmul_nt(e_norm, w_norm)?;
        tape.margin_scale(cos, labels, mc.variant, mc.scale, mc.margin)
    }
}

/// Softmax cross-entropy on the margin-adjusted logits, mean over the batch.
pub fn class_loss(tape: &mut Tape, logits: NodeId, labels: &[usize]) -> Result<NodeId> {
    tape.cross_entropy(logits, labels)
}

/// Cosine similarity of two embeddings (the angle's cosine in [-1, 1]).
pub fn similarity(a: &[f32], b: &[f32]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::shape(format!(
            "similarity of embeddings with different dims {} vs {}",
            a.len(),
            b.len()
        )));
    }
    let (mut dot, mut na, mut nb) = (0.0f64, 0.0f64, 0.0f64);
    for (&x, &y) in a.iter().zip(b) {
        dot += x as f64 * y as f64;
        na += x as f64 * x as f64;
        nb += y as f64 * y as f64;
    }
    if na == 0.0 || nb == 0.0 {
        return Err(Error::numeric("similarity of a zero embedding"));
    }
    Ok(dot / (na.sqrt() * nb.sqrt()))
}

/// How the two mono embeddings of a stereo pair are combined.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MonoFusion {
    Average,
    Concat,
    Left,
    Right,
}

/// Combine per-view mono embeddings into one vector.
pub fn fuse_mono(left: &[f32], right: &[f32], fusion: MonoFusion) -> Vec<f32> {
    match fusion {
        MonoFusion::Average => left.iter().zip(right).map(|(l, r)| 0.5 * (l + r)).collect(),
        MonoFusion::Concat => left.iter().chain(right).copied().collect(),
        MonoFusion::Left => left.to_vec(),
        MonoFusion::Right => right.to_vec(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream_rng;

    fn small_cfg(channels: usize) -> ModelConfig {
        ModelConfig {
            input_channels: channels,
            stage_filters: vec![4, 8],
            blocks_per_stage: vec![1, 1],
            embed_dim: 16,
            input_size: 16,
        }
    }

    #[test]
    fn forward_shapes_match_config() {
        let mut store = ParamStore::new();
        let mut rng = stream_rng(1, 0, 0);
        let net = EmbedNet::new(small_cfg(6), &mut store, "e", &mut rng).unwrap();
        let mut tape = Tape::new();
        let x = tape.input(Tensor::zeros(vec![3, 6, 16, 16]));
        let (features, emb) = net.forward(&mut tape, &store, x, true).unwrap();
        assert_eq!(tape.value(features).shape(), &[3, 8, 4, 4]);
        assert_eq!(tape.value(emb).shape(), &[3, 16]);
    }

    #[test]
    fn desk_config_feature_map_is_one_sixteenth() {
        let cfg = ModelConfig::desk(6);
        assert_eq!(cfg.feature_size(), 2);
        assert_eq!(cfg.input_size / 16, cfg.feature_size());
    }

    #[test]
    fn embed_is_deterministic() {
        let mut store = ParamStore::new();
        let mut rng = stream_rng(2, 0, 0);
        let net = EmbedNet::new(small_cfg(1), &mut store, "e", &mut rng).unwrap();
        let batch = Tensor::new(
            vec![2, 1, 16, 16],
            (0..512).map(|i| ((i * 37 % 101) as f32 / 101.0) - 0.5).collect(),
        )
        .unwrap();
        let a = net.embed_batch(&store, &batch).unwrap();
        let b = net.embed_batch(&store, &batch).unwrap();
        assert_eq!(a, b);
        assert_eq!(a[0].len(), 16);
    }

    #[test]
    fn forward_rejects_wrong_channels() {
        let mut store = ParamStore::new();
        let mut rng = stream_rng(3, 0, 0);
        let net = EmbedNet::new(small_cfg(6), &mut store, "e", &mut rng).unwrap();
        let mut tape = Tape::new();
        let x = tape.input(Tensor::zeros(vec![1, 2, 16, 16]));
        assert!(net.forward(&mut tape, &store, x, true).is_err());
    }

    #[test]
    fn similarity_basics() {
        assert!((similarity(&[1.0, 0.0], &[1.0, 0.0]).unwrap() - 1.0).abs() < 1e-12);
        assert!(similarity(&[1.0, 0.0], &[0.0, 1.0]).unwrap().abs() < 1e-12);
        let s = similarity(&[1.0, 0.0], &[1.0, 1.0]).unwrap();
        assert!((s - 0.5f64.sqrt()).abs() < 1e-7, "{s}");
        assert!(similarity(&[0.0, 0.0], &[1.0, 0.0]).is_err());
    }

    #[test]
    fn similarity_is_scale_invariant_and_symmetric() {
        let a = [0.3f32, -1.2, 0.7];
        let b = [1.1f32, 0.2, -0.4];
        let s1 = similarity(&a, &b).unwrap();
        let scaled: Vec<f32> = a.iter().map(|v| v * 7.5).collect();
        let s2 = similarity(&scaled, &b).unwrap();
        let s3 = similarity(&b, &a).unwrap();
        assert!((s1 - s2).abs() < 1e-7);
        assert!((s1 - s3).abs() < 1e-12);
    }

    #[test]
    fn fuse_mono_variants() {
        let l = [1.0f32, 0.0];
        let r = [0.0f32, 1.0];
        assert_eq!(fuse_mono(&l, &r, MonoFusion::Average), vec![0.5, 0.5]);
        assert_eq!(fuse_mono(&l, &r, MonoFusion::Concat), vec![1.0, 0.0, 0.0, 1.0]);
        assert_eq!(fuse_mono(&l, &r, MonoFusion::Left), vec![1.0, 0.0]);
        assert_eq!(fuse_mono(&l, &r, MonoFusion::Right), vec![0.0, 1.0]);
        // Equal views fuse to themselves, and the averaged vector keeps the
        // expected similarity to a basis vector.
        assert_eq!(fuse_mono(&l, &l, MonoFusion::Average), l.to_vec());
        let fused = fuse_mono(&l, &r, MonoFusion::Average);
        let s = similarity(&fused, &l).unwrap();
        assert!((s - 0.5f64.sqrt()).abs() < 1e-7);
    }

    #[test]
    fn angular_head_margin_free_reduction() {
        let mut store = ParamStore::new();
        let mut rng = stream_rng(4, 0, 0);
        let head = AngularHead::new(3, 4, &mut store, "cls", &mut rng);
        let mut tape = Tape::new();
        let e = tape.input(Tensor::new(vec![2, 4], vec![1.0, 0.2, -0.3, 0.5, -1.0, 0.1, 0.0, 0.9]).unwrap());
        let mc_cos = MarginConfig { variant: MarginVariant::CosFace, scale: 16.0, margin: 0.0 };
        let mc_arc = MarginConfig { variant: MarginVariant::ArcFace, scale: 16.0, margin: 0.0 };
        let lc = head.angular_logits(&mut tape, &store, e, Some(&[0, 2]), &mc_cos).unwrap();
        let la = head.angular_logits(&mut tape, &store, e, Some(&[0, 2]), &mc_arc).unwrap();
        assert_eq!(tape.value(lc).data(), tape.value(la).data());
    }
}
