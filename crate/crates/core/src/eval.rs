//! Open-set verification evaluation: pair enumeration, exact thresholds at
//! target FPR, ROC reports, attribute-conditioned FNR breakdowns, and the
//! four-variant ablation harness.
//!
//! Pair scoring streams over shards so peak score memory is bounded by the
//! shard size plus the small state the accumulators keep (all genuine scores,
//! the top impostor scores needed for the FPR targets, and a fixed histogram).

use crate::error::{Error, Result};
use crate::facegen::dataset::{Manifest, Split};
use crate::facegen::LightDirection;
use crate::parallel;
use crate::pipeline::InputMode;
use crate::recognet::{fuse_mono, similarity, MonoFusion};
use crate::train::{load_input, stack_inputs, train_and_save, TrainConfig, TrainedModel};
use crate::recognet::decoder::AuxConfig;
use serde::{Deserialize, Serialize};
use std::cmp::Reverse;
use std::collections::BinaryHeap;
use std::path::Path;

/// One verification trial: similarity score, genuine/impostor flag, and the
/// pose/light attributes of both samples.
#[derive(Debug, Clone, Copy)]
pub struct PairScore {
    pub score: f64,
    pub genuine: bool,
    pub attrs: PairAttrs,
}

#[derive(Debug, Clone, Copy)]
pub struct PairAttrs {
    pub yaw_a: f32,
    pub yaw_b: f32,
    pub pitch_a: f32,
    pub pitch_b: f32,
    pub light_a: LightDirection,
    pub light_b: LightDirection,
}

/// Embedding of one test sample with the attributes evaluation conditions on.
#[derive(Debug, Clone)]
pub struct SampleEmbedding {
    pub subject: u32,
    pub sample_idx: u32,
    pub yaw: f32,
    pub pitch: f32,
    pub light: LightDirection,
    pub emb: Vec<f32>,
}

const EVAL_BATCH: usize = 64;

/// Embed every sample of a split with deterministic test-time preprocessing.
/// Mono models embed both views and fuse them into one vector per sample.
pub fn embed_split(
    model: &TrainedModel,
    data_dir: &Path,
    manifest: &Manifest,
    split: Split,
    fusion: MonoFusion,
) -> Result<Vec<SampleEmbedding>> {
    let entries: Vec<_> = manifest
        .subjects_in(split)
        .flat_map(|s| s.samples.iter().map(move |e| (s.id, e)))
        .collect();

    // For mono, each sample contributes a left and a right input.
    let views_per_sample = if model.mode == InputMode::Mono { 2 } else { 1 };
    let n_inputs = entries.len() * views_per_sample;
    let crop = model.crop;
    let mode = model.mode;

    let mut embeddings: Vec<Vec<f32>> = Vec::with_capacity(n_inputs);
    let mut cursor = 0usize;
    while cursor < n_inputs {
        let count = EVAL_BATCH.min(n_inputs - cursor);
        let inputs: Vec<Result<crate::pipeline::NetInput>> = parallel::map_collect(count, |k| {
            let flat = cursor + k;
            let (_, entry) = entries[flat / views_per_sample];
            let left = flat % views_per_sample == 0;
            load_input(
                data_dir,
                entry,
                Some(left),
                mode,
                &crop,
                &crate::pipeline::AugmentConfig::default(),
                None,
            )
        });
        let mut batch_inputs = Vec::with_capacity(count);
        for r in inputs {
            batch_inputs.push(r?);
        }
        let batch = stack_inputs(&batch_inputs)?;
        embeddings.extend(model.embed_batch(&batch)?);
        cursor += count;
    }

    let mut out = Vec::with_capacity(entries.len());
    for (i, (subject, entry)) in entries.iter().enumerate() {
        let emb = if views_per_sample == 2 {
            fuse_mono(&embeddings[2 * i], &embeddings[2 * i + 1], fusion)
        } else {
            embeddings[i].clone()
        };
        out.push(SampleEmbedding {
            subject: *subject,
            sample_idx: entry.idx,
            yaw: entry.pose.yaw,
            pitch: entry.pose.pitch,
            light: entry.light.direction,
            emb,
        });
    }
    Ok(out)
}

/// Closed-form pair counts: genuine within subjects, impostor across.
pub fn pair_counts(embs: &[SampleEmbedding]) -> (u64, u64) {
    let mut per_subject: std::collections::BTreeMap<u32, u64> = std::collections::BTreeMap::new();
    for e in embs {
        *per_subject.entry(e.subject).or_insert(0) += 1;
    }
    let total = embs.len() as u64;
    let genuine: u64 = per_subject.values().map(|&k| k * (k - 1) / 2).sum();
    let all = total * (total - 1) / 2;
    (genuine, all - genuine)
}

fn attrs_of(a: &SampleEmbedding, b: &SampleEmbedding) -> PairAttrs {
    PairAttrs {
        yaw_a: a.yaw,
        yaw_b: b.yaw,
        pitch_a: a.pitch,
        pitch_b: b.pitch,
        light_a: a.light,
        light_b: b.light,
    }
}

/// Stream every unordered pair exactly once, in deterministic shards of
/// `shard_rows` anchor samples. Scoring within a shard is parallel.
pub fn for_each_pair_shard<F>(
    embs: &[SampleEmbedding],
    shard_rows: usize,
    mut sink: F,
) -> Result<()>
where
    F: FnMut(&[PairScore]) -> Result<()>,
{
    let n = embs.len();
    let shard_rows = shard_rows.max(1);
    let mut row = 0usize;
    while row < n {
        let rows = shard_rows.min(n - row);
        let per_row: Vec<Result<Vec<PairScore>>> = parallel::map_collect(rows, |k| {
            let i = row + k;
            let mut v = Vec::with_capacity(n - i - 1);
            for j in i + 1..n {
                let score = similarity(&embs[i].emb, &embs[j].emb)?;
                v.push(PairScore {
                    score,
                    genuine: embs[i].subject == embs[j].subject,
                    attrs: attrs_of(&embs[i], &embs[j]),
                });
            }
            Ok(v)
        });
        let mut shard = Vec::new();
        for r in per_row {
            shard.extend(r?);
        }
        sink(&shard)?;
        row += rows;
    }
    Ok(())
}

/// Largest accepted-impostor count k such that k/n <= target, evaluated with
/// the same f64 predicate the brute-force definition uses.
fn max_accept_count(n: u64, target: f64) -> u64 {
    let mut k = ((n as f64) * target).floor() as u64;
    while k + 1 <= n && (k + 1) as f64 / n as f64 <= target {
        k += 1;
    }
    while k > 0 && k as f64 / n as f64 > target {
        k -= 1;
    }
    k.min(n)
}

/// Threshold from impostor scores sorted descending (full multiset size `n`):
/// the smallest t with fraction{score >= t} <= target. Ties resolve
/// conservatively (score >= t accepts).
fn threshold_from_sorted_desc(sorted_desc: &[f64], n: u64, target: f64) -> Result<f64> {
    if n == 0 {
        return Err(Error::numeric("no impostor scores"));
    }
    if target < 1.0 / n as f64 {
        return Err(Error::numeric(format!(
            "target FPR {target} below minimum resolvable {} (1/{n})",
            1.0 / n as f64
        )));
    }
    let k = max_accept_count(n, target);
    if k >= n {
        return Ok(sorted_desc[sorted_desc.len() - 1]);
    }
    let idx = k as usize;
    if idx >= sorted_desc.len() {
        return Err(Error::numeric(format!(
            "need the {} largest impostor scores but only {} were kept",
            idx + 1,
            sorted_desc.len()
        )));
    }
    Ok(sorted_desc[idx].next_up())
}

/// Smallest threshold whose impostor acceptance fraction is <= `target_fpr`,
/// by exact order statistics. Errors when the target is below 1/#impostors.
pub fn threshold_at_fpr(impostor_scores: &[f64], target_fpr: f64) -> Result<f64> {
    let mut sorted = impostor_scores.to_vec();
    sorted.sort_by(|a, b| b.total_cmp(a));
    threshold_from_sorted_desc(&sorted, impostor_scores.len() as u64, target_fpr)
}

/// Fraction of genuine scores strictly below the threshold.
pub fn fnr_at_threshold(genuine_scores: &[f64], t: f64) -> f64 {
    if genuine_scores.is_empty() {
        return 0.0;
    }
    let miss = genuine_scores.iter().filter(|&&s| s < t).count();
    miss as f64 / genuine_scores.len() as f64
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RocRow {
    pub threshold: f64,
    pub fpr: f64,
    pub fnr: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FnrAtRow {
    pub target_fpr: f64,
    pub threshold: f64,
    pub fnr: f64,
}

/// Threshold sweep plus exact FNR readings at the requested FPR targets.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RocReport {
    pub rows: Vec<RocRow>,
    pub fnr_at: Vec<FnrAtRow>,
    pub genuine_count: u64,
    pub impostor_count: u64,
}

const HIST_BINS: usize = 8192;

fn hist_bin(score: f64) -> usize {
    let x = (score + 1.0) / 2.0;
    ((x * HIST_BINS as f64) as isize).clamp(0, HIST_BINS as isize - 1) as usize
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
struct ScoreOrd(u64);

impl ScoreOrd {
    fn from(s: f64) -> Self {
        // Order-preserving map of finite f64 to u64.
        let b = s.to_bits();
        ScoreOrd(if s >= 0.0 { b ^ (1 << 63) } else { !b })
    }
    fn value(self) -> f64 {
        let b = if self.0 & (1 << 63) != 0 { self.0 ^ (1 << 63) } else { !self.0 };
        f64::from_bits(b)
    }
}

/// Streaming accumulator for one verification evaluation.
pub struct VerificationAccumulator {
    pub genuine: Vec<PairScore>,
    top_impostors: BinaryHeap<Reverse<ScoreOrd>>,
    keep: usize,
    pub impostor_count: u64,
    hist_gen: Vec<u64>,
    hist_imp: Vec<u64>,
}

impl VerificationAccumulator {
    /// `keep` is the number of largest impostor scores retained; size it from
    /// the loosest FPR target (`ceil(max_fpr * expected_impostors) + 1`).
    pub fn new(keep: usize) -> Self {
        VerificationAccumulator {
            genuine: Vec::new(),
            top_impostors: BinaryHeap::new(),
            keep: keep.max(8),
            impostor_count: 0,
            hist_gen: vec![0; HIST_BINS],
            hist_imp: vec![0; HIST_BINS],
        }
    }

    pub fn keep_for(targets: &[f64], expected_impostors: u64) -> usize {
        let max_t = targets.iter().cloned().fold(0.0f64, f64::max);
        ((max_t * expected_impostors as f64).ceil() as usize) + 8
    }

    pub fn consume(&mut self, shard: &[PairScore]) {
        for p in shard {
            if p.genuine {
                self.hist_gen[hist_bin(p.score)] += 1;
                self.genuine.push(*p);
            } else {
                self.hist_imp[hist_bin(p.score)] += 1;
                self.impostor_count += 1;
                let s = ScoreOrd::from(p.score);
                if self.top_impostors.len() < self.keep {
                    self.top_impostors.push(Reverse(s));
                } else if let Some(&Reverse(min)) = self.top_impostors.peek() {
                    if s > min {
                        self.top_impostors.pop();
                        self.top_impostors.push(Reverse(s));
                    }
                }
            }
        }
    }

    /// Finish the sweep: ROC rows from the histogram edges, FNR at the
    /// requested targets from exact order statistics.
    pub fn report(&self, targets: &[f64]) -> Result<RocReport> {
        let gtotal = self.genuine.len() as u64;
        let itotal = self.impostor_count;
        if gtotal == 0 || itotal == 0 {
            return Err(Error::numeric("verification eval needs both genuine and impostor pairs"));
        }

        // Suffix (impostor) and prefix (genuine) counts over bin edges.
        let mut rows = Vec::with_capacity(HIST_BINS);
        let mut imp_ge = itotal;
        let mut gen_lt = 0u64;
        for b in 0..HIST_BINS {
            let threshold = -1.0 + 2.0 * (b as f64) / HIST_BINS as f64;
            rows.push(RocRow {
                threshold,
                fpr: imp_ge as f64 / itotal as f64,
                fnr: gen_lt as f64 / gtotal as f64,
            });
            imp_ge -= self.hist_imp[b];
            gen_lt += self.hist_gen[b];
        }

        let mut sorted_desc: Vec<f64> = self.top_impostors.iter().map(|r| r.0.value()).collect();
        sorted_desc.sort_by(|a, b| b.total_cmp(a));
        let genuine_scores: Vec<f64> = self.genuine.iter().map(|p| p.score).collect();
        let mut fnr_at = Vec::with_capacity(targets.len());
        for &t in targets {
            let threshold = threshold_from_sorted_desc(&sorted_desc, itotal, t)?;
            fnr_at.push(FnrAtRow { target_fpr: t, threshold, fnr: fnr_at_threshold(&genuine_scores, threshold) });
        }

        Ok(RocReport { rows, fnr_at, genuine_count: gtotal, impostor_count: itotal })
    }
}

/// Full verification sweep over a split.
pub struct VerificationOutcome {
    pub report: RocReport,
    pub genuine_pairs: Vec<PairScore>,
}

pub fn verification_eval(
    model: &TrainedModel,
    data_dir: &Path,
    manifest: &Manifest,
    split: Split,
    targets: &[f64],
    fusion: MonoFusion,
    shard_rows: usize,
) -> Result<VerificationOutcome> {
    let embs = embed_split(model, data_dir, manifest, split, fusion)?;
    if embs.is_empty() {
        return Err(Error::data("no samples in evaluation split"));
    }
    let (_, impostors) = pair_counts(&embs);
    let keep = VerificationAccumulator::keep_for(targets, impostors);
    let mut acc = VerificationAccumulator::new(keep);
    for_each_pair_shard(&embs, shard_rows, |shard| {
        acc.consume(shard);
        Ok(())
    })?;
    let report = acc.report(targets)?;
    Ok(VerificationOutcome { report, genuine_pairs: acc.genuine })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BreakdownAxis {
    Yaw,
    Pitch,
    Light,
}

/// FNR per attribute-bin pair for genuine trials. Unordered pairs populate
/// both (a, b) and (b, a), so the matrix is symmetric.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BreakdownMatrix {
    pub axis: BreakdownAxis,
    pub labels: Vec<String>,
    pub centers: Vec<f64>,
    /// Row-major (bin_a, bin_b); None marks empty cells.
    pub fnr: Vec<Option<f64>>,
    pub count: Vec<u64>,
}

/// Angle cell width for yaw/pitch breakdowns, degrees.
pub const ANGLE_BIN_DEG: f64 = 5.0;
const ANGLE_RANGE: f64 = 25.0;

fn angle_bin(v: f32) -> usize {
    let nbins = (2.0 * ANGLE_RANGE / ANGLE_BIN_DEG) as usize;
    (((v as f64 + ANGLE_RANGE) / ANGLE_BIN_DEG).floor() as isize).clamp(0, nbins as isize - 1)
        as usize
}

fn light_bin(l: LightDirection) -> usize {
    match l {
        LightDirection::Left => 0,
        LightDirection::Center => 1,
        LightDirection::Right => 2,
    }
}

pub fn breakdown_fnr(genuine: &[PairScore], axis: BreakdownAxis, threshold: f64) -> BreakdownMatrix {
    let (nbins, labels, centers): (usize, Vec<String>, Vec<f64>) = match axis {
        BreakdownAxis::Light => (
            3,
            vec!["L".into(), "C".into(), "R".into()],
            vec![0.0, 1.0, 2.0],
        ),
        _ => {
            let nbins = (2.0 * ANGLE_RANGE / ANGLE_BIN_DEG) as usize;
            let labels = (0..nbins)
                .map(|b| {
                    let lo = -ANGLE_RANGE + b as f64 * ANGLE_BIN_DEG;
                    format!("[{lo},{})", lo + ANGLE_BIN_DEG)
                })
                .collect();
            let centers = (0..nbins)
                .map(|b| -ANGLE_RANGE + (b as f64 + 0.5) * ANGLE_BIN_DEG)
                .collect();
            (nbins, labels, centers)
        }
    };
    let mut count = vec![0u64; nbins * nbins];
    let mut miss = vec![0u64; nbins * nbins];
    for p in genuine.iter().filter(|p| p.genuine) {
        let (a, b) = match axis {
            BreakdownAxis::Yaw => (angle_bin(p.attrs.yaw_a), angle_bin(p.attrs.yaw_b)),
            BreakdownAxis::Pitch => (angle_bin(p.attrs.pitch_a), angle_bin(p.attrs.pitch_b)),
            BreakdownAxis::Light => (light_bin(p.attrs.light_a), light_bin(p.attrs.light_b)),
        };
        let m = if p.score < threshold { 1 } else { 0 };
        count[a * nbins + b] += 1;
        miss[a * nbins + b] += m;
        if a != b {
            count[b * nbins + a] += 1;
            miss[b * nbins + a] += m;
        }
    }
    let fnr = count
        .iter()
        .zip(&miss)
        .map(|(&c, &m)| if c > 0 { Some(m as f64 / c as f64) } else { None })
        .collect();
    BreakdownMatrix { axis, labels, centers, fnr, count }
}

/// Mean FNR of populated far-off-diagonal cells (attribute difference above
/// `delta`) minus the mean over the remaining populated cells.
pub fn off_diagonal_gap(m: &BreakdownMatrix, delta: f64) -> Option<f64> {
    let n = m.labels.len();
    let (mut far_sum, mut far_n, mut near_sum, mut near_n) = (0.0f64, 0u64, 0.0f64, 0u64);
    for a in 0..n {
        for b in 0..n {
            if let Some(f) = m.fnr[a * n + b] {
                if (m.centers[a] - m.centers[b]).abs() > delta {
                    far_sum += f;
                    far_n += 1;
                } else {
                    near_sum += f;
                    near_n += 1;
                }
            }
        }
    }
    if far_n == 0 || near_n == 0 {
        return None;
    }
    Some(far_sum / far_n as f64 - near_sum / near_n as f64)
}

// ---- report files ----

pub fn write_roc_csv(report: &RocReport, path: &Path) -> Result<()> {
    let mut s = String::from("threshold,fpr,fnr\n");
    for r in &report.rows {
        s.push_str(&format!("{},{},{}\n", r.threshold, r.fpr, r.fnr));
    }
    std::fs::write(path, s)?;
    Ok(())
}

pub fn write_fnr_at_csv(report: &RocReport, path: &Path) -> Result<()> {
    let mut s = String::from("target_fpr,threshold,fnr\n");
    for r in &report.fnr_at {
        s.push_str(&format!("{},{},{}\n", r.target_fpr, r.threshold, r.fnr));
    }
    std::fs::write(path, s)?;
    Ok(())
}

pub fn write_breakdown_csv(m: &BreakdownMatrix, path: &Path) -> Result<()> {
    let n = m.labels.len();
    let mut s = String::from("bin_a,bin_b,fnr,count\n");
    for a in 0..n {
        for b in 0..n {
            let f = m.fnr[a * n + b].map(|v| v.to_string()).unwrap_or_else(|| "".into());
            s.push_str(&format!("{},{},{},{}\n", m.labels[a], m.labels[b], f, m.count[a * n + b]));
        }
    }
    std::fs::write(path, s)?;
    Ok(())
}

/// Embeddings as CSV rows: subject, sample, then the vector components.
pub fn write_embeddings_csv(embs: &[SampleEmbedding], path: &Path) -> Result<()> {
    let mut s = String::from("subject,sample,embedding...\n");
    for e in embs {
        s.push_str(&format!("{},{}", e.subject, e.sample_idx));
        for v in &e.emb {
            s.push_str(&format!(",{v}"));
        }
        s.push('\n');
    }
    std::fs::write(path, s)?;
    Ok(())
}

/// Embeddings as raw little-endian f32 with a JSON sidecar describing layout.
pub fn write_embeddings_raw(embs: &[SampleEmbedding], bin_path: &Path, sidecar_path: &Path) -> Result<()> {
    let dim = embs.first().map(|e| e.emb.len()).unwrap_or(0);
    let mut bytes = Vec::with_capacity(embs.len() * dim * 4);
    for e in embs {
        for v in &e.emb {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
    }
    std::fs::write(bin_path, bytes)?;
    let sidecar = serde_json::json!({
        "count": embs.len(),
        "dim": dim,
        "dtype": "f32le",
        "layout": "row-major [count, dim]",
        "rows": embs.iter().map(|e| serde_json::json!({"subject": e.subject, "sample": e.sample_idx})).collect::<Vec<_>>(),
    });
    std::fs::write(sidecar_path, serde_json::to_string_pretty(&sidecar)?)?;
    Ok(())
}

// ---- ablation harness ----

#[derive(Debug, Clone)]
pub struct AblationVariantSpec {
    pub name: &'static str,
    pub mode: InputMode,
    pub aux: AuxConfig,
}

/// The four stereo variants of the ablation table.
pub fn standard_variants() -> Vec<AblationVariantSpec> {
    vec![
        AblationVariantSpec { name: "NoCoords", mode: InputMode::StereoNoCoords, aux: AuxConfig::disabled() },
        AblationVariantSpec { name: "WithCoords", mode: InputMode::Stereo, aux: AuxConfig::disabled() },
        AblationVariantSpec { name: "AuxL1", mode: InputMode::Stereo, aux: AuxConfig::l1_only() },
        AblationVariantSpec { name: "AuxFull", mode: InputMode::Stereo, aux: AuxConfig::default() },
    ]
}

#[derive(Debug, Clone)]
pub struct AblationConfig {
    /// Template; mode, aux, and model channels are overwritten per variant.
    pub base: TrainConfig,
    pub seeds: Vec<u64>,
    pub fpr_targets: Vec<f64>,
    pub fusion: MonoFusion,
    /// Also train and evaluate the mono baseline per seed.
    pub include_mono: bool,
    /// Collect yaw-breakdown gaps for mono and WithCoords models.
    pub yaw_breakdown: bool,
    pub shard_rows: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalSummary {
    pub fnr_at: Vec<FnrAtRow>,
    pub genuine: u64,
    pub impostor: u64,
    pub yaw_gap: Option<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AblationRun {
    pub variant: String,
    pub seed: u64,
    pub summary: EvalSummary,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AblationOutcome {
    pub runs: Vec<AblationRun>,
    pub mono_runs: Vec<AblationRun>,
    /// Per variant: (target fpr, median fnr over seeds).
    pub medians: Vec<(String, Vec<(f64, f64)>)>,
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

fn summarize(
    model: &TrainedModel,
    data_dir: &Path,
    manifest: &Manifest,
    cfg: &AblationConfig,
    with_breakdown: bool,
) -> Result<EvalSummary> {
    let outcome = verification_eval(
        model,
        data_dir,
        manifest,
        Split::Test,
        &cfg.fpr_targets,
        cfg.fusion,
        cfg.shard_rows,
    )?;
    let yaw_gap = if with_breakdown {
        // Gap at the tightest requested FPR target.
        let t = outcome
            .report
            .fnr_at
            .iter()
            .min_by(|a, b| a.target_fpr.total_cmp(&b.target_fpr))
            .map(|r| r.threshold)
            .unwrap_or(0.0);
        let m = breakdown_fnr(&outcome.genuine_pairs, BreakdownAxis::Yaw, t);
        off_diagonal_gap(&m, 30.0)
    } else {
        None
    };
    Ok(EvalSummary {
        fnr_at: outcome.report.fnr_at,
        genuine: outcome.report.genuine_count,
        impostor: outcome.report.impostor_count,
        yaw_gap,
    })
}

/// Train the requested variants over the shared seed set and report FNR at
/// the target FPRs per run plus per-variant medians. Trains the stage-1 mono
/// model per seed when any variant needs it (or when `include_mono`).
pub fn ablation_run(
    data_dir: &Path,
    variants: &[AblationVariantSpec],
    cfg: &AblationConfig,
    work_dir: &Path,
) -> Result<AblationOutcome> {
    let manifest = Manifest::load(data_dir)?;
    std::fs::create_dir_all(work_dir)?;
    let needs_mono = cfg.include_mono || variants.iter().any(|v| v.aux.enabled() && v.aux.alpha > 0.0);

    let mut runs = Vec::new();
    let mut mono_runs = Vec::new();
    for &seed in &cfg.seeds {
        let mono_ckpt_path = work_dir.join(format!("mono_s{seed}")).join("model.ckpt");
        if needs_mono {
            let mut mono_cfg = cfg.base.clone();
            mono_cfg.mode = InputMode::Mono;
            mono_cfg.model = with_channels(&cfg.base.model, 1);
            mono_cfg.batch = cfg.base.batch * 2;
            mono_cfg.aux = AuxConfig::disabled();
            mono_cfg.seed = seed;
            let (mono_model, _) =
                train_and_save(&mono_cfg, data_dir, &work_dir.join(format!("mono_s{seed}")), None)?;
            if cfg.include_mono {
                let summary = summarize(&mono_model, data_dir, &manifest, cfg, cfg.yaw_breakdown)?;
                mono_runs.push(AblationRun { variant: "Mono".into(), seed, summary });
            }
        }
        for v in variants {
            let mut vcfg = cfg.base.clone();
            vcfg.mode = v.mode;
            vcfg.model = with_channels(&cfg.base.model, v.mode.channels());
            vcfg.aux = v.aux;
            vcfg.seed = seed;
            let out = work_dir.join(format!("{}_s{seed}", v.name.to_lowercase()));
            let mono_arg = if v.aux.enabled() && v.aux.alpha > 0.0 {
                Some(mono_ckpt_path.as_path())
            } else {
                None
            };
            let (model, _) = train_and_save(&vcfg, data_dir, &out, mono_arg)?;
            let with_bd = cfg.yaw_breakdown && v.name == "WithCoords";
            let summary = summarize(&model, data_dir, &manifest, cfg, with_bd)?;
            runs.push(AblationRun { variant: v.name.into(), seed, summary });
        }
    }

    let mut medians = Vec::new();
    for v in variants {
        let mut per_target = Vec::new();
        for (ti, &t) in cfg.fpr_targets.iter().enumerate() {
            let vals: Vec<f64> = runs
                .iter()
                .filter(|r| r.variant == v.name)
                .map(|r| r.summary.fnr_at[ti].fnr)
                .collect();
            per_target.push((t, median(vals)));
        }
        medians.push((v.name.to_string(), per_target));
    }

    Ok(AblationOutcome { runs, mono_runs, medians })
}

fn with_channels(model: &crate::recognet::ModelConfig, channels: usize) -> crate::recognet::ModelConfig {
    let mut m = model.clone();
    m.input_channels = channels;
    m
}

/// Table-shaped CSV: one row per variant, one FNR column per target (medians),
/// plus a long-form per-seed CSV alongside.
pub fn write_ablation_csv(outcome: &AblationOutcome, targets: &[f64], dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let mut wide = String::from("variant");
    for t in targets {
        wide.push_str(&format!(",fnr@{t}"));
    }
    wide.push('\n');
    for (name, per_target) in &outcome.medians {
        wide.push_str(name);
        for (_, f) in per_target {
            wide.push_str(&format!(",{f}"));
        }
        wide.push('\n');
    }
    std::fs::write(dir.join("ablation.csv"), wide)?;

    let mut long = String::from("variant,seed,target_fpr,fnr\n");
    for r in outcome.mono_runs.iter().chain(&outcome.runs) {
        for row in &r.summary.fnr_at {
            long.push_str(&format!("{},{},{},{}\n", r.variant, r.seed, row.target_fpr, row.fnr));
        }
    }
    std::fs::write(dir.join("ablation_runs.csv"), long)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn emb(subject: u32, idx: u32, v: Vec<f32>) -> SampleEmbedding {
        SampleEmbedding { subject, sample_idx: idx, yaw: 0.0, pitch: 0.0, light: LightDirection::Center, emb: v }
    }

    #[test]
    fn pair_counts_match_combinatorics() {
        // 3 subjects x 2 samples -> 3 genuine + 12 impostor.
        let mut embs = Vec::new();
        for s in 0..3u32 {
            for i in 0..2u32 {
                embs.push(emb(s, i, vec![s as f32 + 1.0, i as f32]));
            }
        }
        let (g, i) = pair_counts(&embs);
        assert_eq!(g, 3);
        assert_eq!(i, 12);
        let mut seen = 0u64;
        for_each_pair_shard(&embs, 2, |shard| {
            seen += shard.len() as u64;
            Ok(())
        })
        .unwrap();
        assert_eq!(seen, 15, "each unordered pair scored exactly once");
    }

    #[test]
    fn threshold_matches_hand_example() {
        // Impostors {0.1, 0.2, 0.3, 0.4}, target 0.25 -> just above 0.3.
        let t = threshold_at_fpr(&[0.1, 0.2, 0.3, 0.4], 0.25).unwrap();
        assert!(t > 0.3 && t <= 0.3 + 1e-12);
        let accepted = [0.1f64, 0.2, 0.3, 0.4].iter().filter(|&&s| s >= t).count();
        assert_eq!(accepted, 1);
    }

    #[test]
    fn threshold_target_one_accepts_everything() {
        let t = threshold_at_fpr(&[0.5, -0.2, 0.9], 1.0).unwrap();
        assert_eq!(t, -0.2);
    }

    #[test]
    fn threshold_below_resolution_errors() {
        let err = threshold_at_fpr(&[0.5, 0.6], 0.1).unwrap_err();
        assert!(err.to_string().contains("0.5"), "names the minimum resolvable FPR: {err}");
    }

    #[test]
    fn fnr_at_threshold_counts_strict_misses() {
        let g = [0.5, 0.7, 0.9];
        assert_eq!(fnr_at_threshold(&g, 0.4), 0.0);
        assert_eq!(fnr_at_threshold(&g, 0.95), 1.0);
        assert!((fnr_at_threshold(&g, 0.6) - 1.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn accumulator_report_is_monotonic() {
        let mut acc = VerificationAccumulator::new(64);
        let mk = |score: f64, genuine: bool| PairScore {
            score,
            genuine,
            attrs: PairAttrs {
                yaw_a: 0.0,
                yaw_b: 0.0,
                pitch_a: 0.0,
                pitch_b: 0.0,
                light_a: LightDirection::Center,
                light_b: LightDirection::Center,
            },
        };
        let mut shard = Vec::new();
        for i in 0..500 {
            let x = (i as f64 / 499.0) * 1.8 - 0.9;
            shard.push(mk(x, i % 7 == 0));
        }
        acc.consume(&shard);
        let report = acc.report(&[0.1, 0.05]).unwrap();
        for w in report.rows.windows(2) {
            assert!(w[1].fpr <= w[0].fpr, "fpr non-increasing in threshold");
            assert!(w[1].fnr >= w[0].fnr, "fnr non-decreasing in threshold");
        }
        for r in &report.fnr_at {
            let exact: Vec<f64> = shard.iter().filter(|p| !p.genuine).map(|p| p.score).collect();
            let t = threshold_at_fpr(&exact, r.target_fpr).unwrap();
            assert_eq!(t, r.threshold, "streaming threshold equals full-list threshold");
        }
    }

    #[test]
    fn breakdown_single_cell_equals_global_fnr() {
        let mk = |score: f64| PairScore {
            score,
            genuine: true,
            attrs: PairAttrs {
                yaw_a: 1.0,
                yaw_b: 1.0,
                pitch_a: 0.0,
                pitch_b: 0.0,
                light_a: LightDirection::Center,
                light_b: LightDirection::Center,
            },
        };
        let pairs: Vec<PairScore> = [0.2, 0.4, 0.6, 0.8].iter().map(|&s| mk(s)).collect();
        let m = breakdown_fnr(&pairs, BreakdownAxis::Yaw, 0.5);
        let populated: Vec<f64> = m.fnr.iter().flatten().copied().collect();
        assert_eq!(populated.len(), 1);
        assert!((populated[0] - 0.5).abs() < 1e-12);
    }

    #[test]
    fn light_breakdown_is_symmetric() {
        let mk = |la, lb, score| PairScore {
            score,
            genuine: true,
            attrs: PairAttrs { yaw_a: 0.0, yaw_b: 0.0, pitch_a: 0.0, pitch_b: 0.0, light_a: la, light_b: lb },
        };
        let pairs = vec![
            mk(LightDirection::Left, LightDirection::Right, 0.1),
            mk(LightDirection::Right, LightDirection::Left, 0.9),
            mk(LightDirection::Center, LightDirection::Left, 0.9),
        ];
        let m = breakdown_fnr(&pairs, BreakdownAxis::Light, 0.5);
        let n = 3;
        for a in 0..n {
            for b in 0..n {
                assert_eq!(m.fnr[a * n + b], m.fnr[b * n + a]);
                assert_eq!(m.count[a * n + b], m.count[b * n + a]);
            }
        }
    }

    #[test]
    fn median_of_even_and_odd() {
        assert_eq!(median(vec![3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(vec![4.0, 1.0, 2.0, 3.0]), 2.5);
    }
}
