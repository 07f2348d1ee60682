//! Auxiliary passport decoder and its training loss.
//!
//! The decoder mirrors the encoder stages in reverse: a residual block then a
//! 2x nearest upsample per stage, channel reductions between stages, and a
//! bounded single-channel output. It consumes the embedding network's deep
//! features and estimates the subject's frontal passport view; it exists only
//! at training time.

use super::{EmbedNet, ModelConfig};
use crate::error::{Error, Result};
use crate::tensor::params::{ParamId, ParamStore};
use crate::tensor::tape::{NodeId, Tape};
use crate::tensor::Tensor;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// Auxiliary-loss weights. `beta = 0` disables the auxiliary path entirely.
#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
pub struct AuxConfig {
    pub alpha: f32,
    pub beta: f32,
}

impl Default for AuxConfig {
    fn default() -> Self {
        AuxConfig { alpha: 50.0, beta: 1.0 }
    }
}

impl AuxConfig {
    pub fn disabled() -> Self {
        AuxConfig { alpha: 0.0, beta: 0.0 }
    }

    pub fn l1_only() -> Self {
        AuxConfig { alpha: 0.0, beta: 1.0 }
    }

    pub fn enabled(&self) -> bool {
        self.beta > 0.0
    }

    pub fn validate(&self) -> Result<()> {
        if self.alpha < 0.0 || self.beta < 0.0 {
            return Err(Error::config(format!("aux weights must be non-negative: {self:?}")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy)]
struct DecoderStage {
    b1: ParamId,
    a1: ParamId,
    b2: ParamId,
    a2: ParamId,
    /// Channel reduction after the upsample; absent on the last stage.
    reduce: Option<(ParamId, ParamId)>,
}

/// Upscaling decoder from deep features to a passport-view estimate.
#[derive(Debug, Clone)]
pub struct AuxDecoder {
    widths: Vec<usize>,
    stages: Vec<DecoderStage>,
    out_w: ParamId,
    /// Side of the estimated passport image.
    pub passport_size: usize,
    feature_size: usize,
}

impl AuxDecoder {
    /// Mirror the encoder config: stage widths reversed, one 2x upsample per
    /// stage, so the output side equals the encoder's input size.
    pub fn new(
        encoder_cfg: &ModelConfig,
        store: &mut ParamStore,
        prefix: &str,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        encoder_cfg.validate()?;
        let mut widths: Vec<usize> = encoder_cfg.stage_filters.clone();
        widths.reverse();
        let feature_size = encoder_cfg.feature_size();
        let mut stages = Vec::with_capacity(widths.len());
        for (si, &w) in widths.iter().enumerate() {
            let conv = |store: &mut ParamStore, name: String, out_c: usize, in_c: usize, rng: &mut ChaCha8Rng| {
                let fan_in = in_c * 9;
                store.add(name, Tensor::he_uniform(vec![out_c, in_c, 3, 3], fan_in, rng), true)
            };
            let b1 = conv(store, format!("{prefix}.s{si}.c1.w"), w, w, rng);
            let a1 = store.add(format!("{prefix}.s{si}.a1"), Tensor::full(vec![w], 0.25), false);
            let b2 = conv(store, format!("{prefix}.s{si}.c2.w"), w, w, rng);
            let a2 = store.add(format!("{prefix}.s{si}.a2"), Tensor::full(vec![w], 0.25), false);
            let reduce = if si + 1 < widths.len() {
                let next = widths[si + 1];
                let rw = conv(store, format!("{prefix}.s{si}.red.w"), next, w, rng);
                let ra = store.add(format!("{prefix}.s{si}.red.a"), Tensor::full(vec![next], 0.25), false);
                Some((rw, ra))
            } else {
                None
            };
            stages.push(DecoderStage { b1, a1, b2, a2, reduce });
        }
        let last_w = *widths.last().expect("non-empty");
        let out_w = store.add(
            format!("{prefix}.out.w"),
            Tensor::he_uniform(vec![1, last_w, 3, 3], last_w * 9, rng),
            true,
        );
        let passport_size = feature_size << widths.len();
        Ok(AuxDecoder { widths, stages, out_w, passport_size, feature_size })
    }

    /// Decode deep features into a `[N, 1, P, P]` passport estimate bounded
    /// to (-0.5, 0.5) by a scaled tanh.
    pub fn decode(&self, tape: &mut Tape, store: &ParamStore, features: NodeId) -> Result<NodeId> {
        let shape = tape.value(features).shape().to_vec();
        if shape.len() != 4 || shape[1] != self.widths[0] || shape[2] != self.feature_size {
            return Err(Error::shape(format!(
                "decoder expects features [N, {}, {}, {}], got {shape:?}",
                self.widths[0], self.feature_size, self.feature_size
            )));
        }
        let mut x = features;
        for stage in &self.stages {
            let w1 = tape.param(store, stage.b1);
            let mut y = tape.conv2d(x, w1, 1, 1)?;
            let a1 = tape.param(store, stage.a1);
            y = tape.prelu(y, a1)?;
            let w2 = tape.param(store, stage.b2);
            y = tape.conv2d(y, w2, 1, 1)?;
            let a2 = tape.param(store, stage.a2);
            y = tape.prelu(y, a2)?;
            x = tape.add(x, y)?;
            x = tape.upsample2x(x)?;
            if let Some((rw, ra)) = stage.reduce {
                let w = tape.param(store, rw);
                x = tape.conv2d(x, w, 1, 1)?;
                let a = tape.param(store, ra);
                x = tape.prelu(x, a)?;
            }
        }
        let w = tape.param(store, self.out_w);
        let raw = tape.conv2d(x, w, 1, 1)?;
        let bounded = tape.tanh(raw);
        Ok(tape.scale(bounded, 0.5))
    }
}

/// A frozen mono model serving as the perceptual metric in the auxiliary loss.
pub struct FrozenMono<'a> {
    pub net: &'a EmbedNet,
    pub store: &'a ParamStore,
}

/// Auxiliary loss: mean absolute error between estimate and passport target,
/// plus `alpha` times the batch-mean squared distance between the frozen mono
/// model's embeddings of estimate and target, taken in the model's comparison
/// space (direction vectors, as embeddings are always compared after
/// normalization). Both terms are bounded means, so `alpha` and `beta` act as
/// loss normalization factors at any network scale. Gradients flow into the
/// estimate (and so into the decoder and the stereo encoder) but never into
/// the mono model's weights.
pub fn aux_loss(
    tape: &mut Tape,
    estimate: NodeId,
    passport: &Tensor,
    mono: Option<&FrozenMono<'_>>,
    alpha: f32,
) -> Result<NodeId> {
    if tape.value(estimate).shape() != passport.shape() {
        return Err(Error::shape(format!(
            "estimate shape {:?} vs passport {:?}",
            tape.value(estimate).shape(),
            passport.shape()
        )));
    }
    let batch = passport.shape()[0];
    let target = tape.input(passport.clone());
    let diff = tape.sub(estimate, target)?;
    let l1 = tape.abs(diff);
    let l1_mean = tape.mean_all(l1);
    if alpha == 0.0 {
        return Ok(l1_mean);
    }
    let mono = mono.ok_or_else(|| {
        Error::config("aux loss with alpha > 0 requires a pretrained mono model")
    })?;
    // The target-side embedding is a constant; compute it outside the
    // gradient graph.
    let e_p = {
        let mut side = Tape::new();
        let p_in = side.input(passport.clone());
        let (_, emb) = mono.net.forward(&mut side, mono.store, p_in, true)?;
        let n = side.row_normalize(emb)?;
        side.value(n).clone()
    };
    let (_, e_est) = mono.net.forward(tape, mono.store, estimate, true)?;
    let e_est_n = tape.row_normalize(e_est)?;
    let e_p_node = tape.input(e_p);
    let d = tape.sub(e_est_n, e_p_node)?;
    let sq = tape.square(d);
    let ssum = tape.sum_all(sq);
    let mean_sq = tape.scale(ssum, 1.0 / batch as f32);
    let weighted = tape.scale(mean_sq, alpha);
    tape.add(l1_mean, weighted)
}

/// Total objective: `L_ang + beta * L_aux`. With `beta = 0` the angular loss
/// node is returned unchanged (the core method, bit for bit).
pub fn total_loss(
    tape: &mut Tape,
    class_loss: NodeId,
    aux: Option<NodeId>,
    beta: f32,
) -> Result<NodeId> {
    if beta == 0.0 {
        return Ok(class_loss);
    }
    let aux = aux.ok_or_else(|| Error::config("beta > 0 requires an auxiliary loss"))?;
    let scaled = tape.scale(aux, beta);
    tape.add(class_loss, scaled)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream_rng;

    fn enc_cfg() -> ModelConfig {
        ModelConfig {
            input_channels: 6,
            stage_filters: vec![4, 8],
            blocks_per_stage: vec![1, 1],
            embed_dim: 8,
            input_size: 16,
        }
    }

    #[test]
    fn decoder_output_is_passport_sized_and_bounded() {
        let mut store = ParamStore::new();
        let mut rng = stream_rng(1, 0, 0);
        let dec = AuxDecoder::new(&enc_cfg(), &mut store, "aux", &mut rng).unwrap();
        assert_eq!(dec.passport_size, 16);
        let mut tape = Tape::new();
        let f = tape.input(Tensor::new(vec![2, 8, 4, 4], (0..256).map(|i| (i as f32).sin()).collect()).unwrap());
        let out = dec.decode(&mut tape, &store, f).unwrap();
        assert_eq!(tape.value(out).shape(), &[2, 1, 16, 16]);
        assert!(tape.value(out).data().iter().all(|v| v.abs() <= 0.5));
    }

    #[test]
    fn decoder_is_deterministic() {
        let mut store = ParamStore::new();
        let mut rng = stream_rng(2, 0, 0);
        let dec = AuxDecoder::new(&enc_cfg(), &mut store, "aux", &mut rng).unwrap();
        let f = Tensor::new(vec![1, 8, 4, 4], (0..128).map(|i| (i as f32 * 0.37).cos()).collect()).unwrap();
        let run = |store: &ParamStore| {
            let mut tape = Tape::new();
            let fi = tape.input(f.clone());
            let out = dec.decode(&mut tape, store, fi).unwrap();
            tape.value(out).data().to_vec()
        };
        assert_eq!(run(&store), run(&store));
    }

    #[test]
    fn perfect_reconstruction_gives_zero_loss() {
        let mut store = ParamStore::new();
        let mut rng = stream_rng(3, 0, 0);
        let mono_cfg = ModelConfig {
            input_channels: 1,
            stage_filters: vec![4, 8],
            blocks_per_stage: vec![1, 1],
            embed_dim: 8,
            input_size: 16,
        };
        let mono = EmbedNet::new(mono_cfg, &mut store, "m", &mut rng).unwrap();
        let passport = Tensor::new(vec![1, 1, 16, 16], (0..256).map(|i| ((i % 13) as f32 / 13.0) - 0.5).collect()).unwrap();
        let mut tape = Tape::new();
        let est = tape.input(passport.clone());
        let frozen = FrozenMono { net: &mono, store: &store };
        let loss = aux_loss(&mut tape, est, &passport, Some(&frozen), 50.0).unwrap();
        assert!(tape.value(loss).item().unwrap().abs() < 1e-9);
    }

    #[test]
    fn alpha_zero_is_plain_l1() {
        let passport = Tensor::new(vec![1, 1, 2, 2], vec![0.1, -0.2, 0.3, 0.0]).unwrap();
        let est_vals = vec![0.2, -0.2, 0.1, 0.4];
        let mut tape = Tape::new();
        let est = tape.input(Tensor::new(vec![1, 1, 2, 2], est_vals.clone()).unwrap());
        let loss = aux_loss(&mut tape, est, &passport, None, 0.0).unwrap();
        let expected: f32 = passport
            .data()
            .iter()
            .zip(&est_vals)
            .map(|(p, e)| (p - e).abs())
            .sum::<f32>()
            / 4.0;
        assert!((tape.value(loss).item().unwrap() - expected).abs() < 1e-7);
    }

    #[test]
    fn alpha_fifty_matches_direct_evaluation_of_both_terms() {
        let mut mono_store = ParamStore::new();
        let mut rng = stream_rng(7, 0, 0);
        let mono_cfg = ModelConfig {
            input_channels: 1,
            stage_filters: vec![4, 8],
            blocks_per_stage: vec![1, 1],
            embed_dim: 8,
            input_size: 16,
        };
        let mono = EmbedNet::new(mono_cfg, &mut mono_store, "m", &mut rng).unwrap();
        let passport = Tensor::new(
            vec![1, 1, 16, 16],
            (0..256).map(|i| ((i % 11) as f32 / 11.0) * 0.8 - 0.4).collect(),
        )
        .unwrap();
        let est_vals: Vec<f32> = passport.data().iter().map(|p| (p + 0.07).min(0.5)).collect();
        let est_t = Tensor::new(vec![1, 1, 16, 16], est_vals.clone()).unwrap();

        let mut tape = Tape::new();
        let est = tape.input(est_t.clone());
        let frozen = FrozenMono { net: &mono, store: &mono_store };
        let loss = aux_loss(&mut tape, est, &passport, Some(&frozen), 50.0).unwrap();

        // Independent arithmetic on the black-box embeddings.
        let norm = |v: &[f32]| -> Vec<f64> {
            let n = v.iter().map(|x| (*x as f64).powi(2)).sum::<f64>().sqrt();
            v.iter().map(|x| *x as f64 / n).collect()
        };
        let e_est = norm(&mono.embed_batch(&mono_store, &est_t).unwrap()[0]);
        let e_p = norm(&mono.embed_batch(&mono_store, &passport).unwrap()[0]);
        let l1: f64 = est_vals
            .iter()
            .zip(passport.data())
            .map(|(e, p)| (e - p).abs() as f64)
            .sum::<f64>()
            / 256.0;
        let l2: f64 = e_est.iter().zip(&e_p).map(|(a, b)| (a - b).powi(2)).sum::<f64>();
        let expected = l1 + 50.0 * l2;
        let got = tape.value(loss).item().unwrap() as f64;
        assert!(
            (got - expected).abs() <= 1e-4 * expected.abs().max(1.0),
            "aux loss {got} vs direct evaluation {expected}"
        );
    }

    #[test]
    fn alpha_positive_without_mono_is_an_error() {
        let passport = Tensor::zeros(vec![1, 1, 2, 2]);
        let mut tape = Tape::new();
        let est = tape.input(passport.clone());
        assert!(aux_loss(&mut tape, est, &passport, None, 50.0).is_err());
    }

    #[test]
    fn hand_computed_two_pixel_example() {
        // Plain L1 path on a fabricated 2-pixel example; both terms by hand.
        let passport = Tensor::new(vec![1, 1, 1, 2], vec![0.5, -0.5]).unwrap();
        let mut tape = Tape::new();
        let est = tape.input(Tensor::new(vec![1, 1, 1, 2], vec![0.0, 0.0]).unwrap());
        let loss = aux_loss(&mut tape, est, &passport, None, 0.0).unwrap();
        assert!((tape.value(loss).item().unwrap() - 0.5).abs() < 1e-7);
    }

    #[test]
    fn beta_zero_returns_class_loss_node() {
        let mut tape = Tape::new();
        let class = tape.input(Tensor::scalar(1.25));
        let total = total_loss(&mut tape, class, None, 0.0).unwrap();
        assert_eq!(total, class, "same node, bit for bit");
        let aux = tape.input(Tensor::scalar(0.5));
        let with_aux = total_loss(&mut tape, class, Some(aux), 2.0).unwrap();
        assert!((tape.value(with_aux).item().unwrap() - 2.25).abs() < 1e-6);
    }

    #[test]
    fn frozen_mono_weights_receive_no_gradient() {
        let mut mono_store = ParamStore::new();
        let mut rng = stream_rng(5, 0, 0);
        let mono_cfg = ModelConfig {
            input_channels: 1,
            stage_filters: vec![4, 8],
            blocks_per_stage: vec![1, 1],
            embed_dim: 8,
            input_size: 16,
        };
        let mono = EmbedNet::new(mono_cfg, &mut mono_store, "m", &mut rng).unwrap();
        let before: Vec<Vec<f32>> = mono_store.entries().map(|(_, t)| t.data().to_vec()).collect();

        let passport = Tensor::new(vec![1, 1, 16, 16], (0..256).map(|i| ((i % 7) as f32 / 7.0) - 0.5).collect()).unwrap();
        let mut est_store = ParamStore::new();
        let est_id = est_store.add("est", Tensor::full(vec![1, 1, 16, 16], 0.1), false);
        let mut tape = Tape::new();
        let est = tape.param(&est_store, est_id);
        let frozen = FrozenMono { net: &mono, store: &mono_store };
        let loss = aux_loss(&mut tape, est, &passport, Some(&frozen), 50.0).unwrap();
        tape.backward(loss).unwrap();
        tape.accumulate_into(&mut mono_store);
        tape.accumulate_into(&mut est_store);

        for (id, before_data) in mono_store.ids().zip(&before) {
            assert!(mono_store.get(id).grad().is_none(), "frozen param got a gradient");
            assert_eq!(mono_store.get(id).data(), &before_data[..]);
        }
        assert!(est_store.get(est_id).grad().is_some(), "estimate does get a gradient");
    }
}
