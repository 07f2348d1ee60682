//! `stereoface`: dataset generation, training, verification evaluation,
//! ablations, anti-spoofing, and inference for the stereo face kit.
//!
//! Exit codes: 0 success, 2 configuration error, 3 data error, 4 numeric
//! failure.

mod config;
mod svg;

use clap::{Args, Parser, Subcommand};
use config::Config;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use stereoface::error::Error;
use stereoface::eval::{
    ablation_run, breakdown_fnr, standard_variants, verification_eval, write_ablation_csv,
    write_breakdown_csv, write_embeddings_csv, write_embeddings_raw, write_fnr_at_csv,
    write_roc_csv, AblationConfig, BreakdownAxis,
};
use stereoface::facegen::dataset::{gen_dataset, Manifest, Split};
use stereoface::facegen::IRect;
use stereoface::image::read_pgm;
use stereoface::pipeline::{
    assemble_input, augment_stereo, prepare_stereo_from_boxes, AugmentConfig, InputMode,
};
use stereoface::recognet::decoder::AuxConfig;
use stereoface::recognet::similarity;
use stereoface::spoof::{gen_spoof_set, liveness_train, spoof_metrics, LivenessModel};
use stereoface::train::{train_and_save, TrainedModel};

#[derive(Parser)]
#[command(name = "stereoface", version, about = "Stereo-pair face authentication kit")]
struct Cli {
    /// TOML config file applied over the profile defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Settings profile: "desk" (default) or "paper" (reference scale).
    #[arg(long, global = true)]
    profile: Option<String>,
    /// Worker threads (0 = all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic stereo face dataset.
    Gen(GenArgs),
    /// Train an embedding model (stage 1 mono or stage 2 stereo).
    Train(TrainArgs),
    /// Verification evaluation: ROC, FNR at FPR targets, breakdowns.
    Eval(EvalArgs),
    /// Train and evaluate the four stereo variants over shared seeds.
    Ablate(AblateArgs),
    /// Simulate flat-print attacks for a genuine dataset.
    SpoofGen(SpoofGenArgs),
    /// Train the liveness classifier on real + attack data.
    SpoofTrain(SpoofTrainArgs),
    /// Report attack detection and real acceptance rates.
    SpoofEval(SpoofEvalArgs),
    /// Embed one stereo sample, or compare two.
    Infer(InferArgs),
}

#[derive(Args)]
struct GenArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    subjects: Option<usize>,
    #[arg(long)]
    samples_min: Option<usize>,
    #[arg(long)]
    samples_max: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    train_ratio: Option<f32>,
    #[arg(long)]
    scene_w: Option<usize>,
    #[arg(long)]
    scene_h: Option<usize>,
    #[arg(long)]
    baseline: Option<f32>,
    #[arg(long)]
    focal: Option<f32>,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    data: PathBuf,
    /// Output directory for the checkpoint and run records.
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long, default_value = "stereo")]
    mode: String,
    /// Angular loss variant: cosface or arcface.
    #[arg(long)]
    loss: Option<String>,
    /// Auxiliary decoder: off, l1 (alpha=0), or full.
    #[arg(long, default_value = "off")]
    aux: String,
    #[arg(long)]
    alpha: Option<f32>,
    #[arg(long)]
    beta: Option<f32>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    epochs: Option<usize>,
    /// Stage-1 mono checkpoint for auxiliary training; auto-discovered at
    /// `<ckpt-parent>/mono/model.ckpt` when omitted.
    #[arg(long)]
    mono_ckpt: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Comma-separated FPR targets, e.g. 1e-2,1e-3.
    #[arg(long, value_delimiter = ',')]
    fpr: Option<Vec<f64>>,
    /// Attribute breakdowns to emit: yaw, pitch, light (repeatable).
    #[arg(long, value_delimiter = ',')]
    breakdown: Option<Vec<String>>,
    /// Mono embedding fusion: average, concat, left, right.
    #[arg(long)]
    fusion: Option<String>,
    /// Also write embeddings.csv plus raw f32 + JSON sidecar.
    #[arg(long)]
    dump_embeddings: bool,
    /// Emit roc.svg and breakdown heatmap SVGs.
    #[arg(long)]
    svg: bool,
}

#[derive(Args)]
struct AblateArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, value_delimiter = ',', default_value = "0,1,2")]
    seeds: Vec<u64>,
    #[arg(long, value_delimiter = ',')]
    fpr: Option<Vec<f64>>,
    #[arg(long)]
    epochs: Option<usize>,
    /// Also train and report the mono baseline per seed.
    #[arg(long)]
    include_mono: bool,
}

#[derive(Args)]
struct SpoofGenArgs {
    /// Genuine dataset directory.
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    distance_min: Option<f32>,
    #[arg(long)]
    distance_max: Option<f32>,
    #[arg(long)]
    max_angle: Option<f32>,
}

#[derive(Args)]
struct SpoofTrainArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    attacks: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct SpoofEvalArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    attacks: PathBuf,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    threshold: Option<f32>,
}

#[derive(Args)]
struct InferArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    left: PathBuf,
    #[arg(long)]
    right: PathBuf,
    /// Face box in the left scene: x,y,side.
    #[arg(long)]
    bbox_left: String,
    #[arg(long)]
    bbox_right: String,
    /// Second sample for a similarity score.
    #[arg(long)]
    left2: Option<PathBuf>,
    #[arg(long)]
    right2: Option<PathBuf>,
    #[arg(long)]
    bbox_left2: Option<String>,
    #[arg(long)]
    bbox_right2: Option<String>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            let code = match e {
                Error::Config(_) | Error::Shape(_) => 2,
                Error::Data(_) | Error::Io(_) | Error::Json(_) => 3,
                Error::Numeric(_) => 4,
            };
            ExitCode::from(code)
        }
    }
}

fn run(cli: Cli) -> Result<(), Error> {
    let cfg = config::resolve(cli.profile.as_deref(), cli.config.as_deref())?;
    let threads = cli.threads.unwrap_or(cfg.threads);
    stereoface::parallel::configure_threads(threads);
    match cli.command {
        Command::Gen(a) => cmd_gen(cfg, a),
        Command::Train(a) => cmd_train(cfg, a),
        Command::Eval(a) => cmd_eval(cfg, a),
        Command::Ablate(a) => cmd_ablate(cfg, a),
        Command::SpoofGen(a) => cmd_spoof_gen(cfg, a),
        Command::SpoofTrain(a) => cmd_spoof_train(cfg, a),
        Command::SpoofEval(a) => cmd_spoof_eval(cfg, a),
        Command::Infer(a) => cmd_infer(cfg, a),
    }
}

fn cmd_gen(mut cfg: Config, a: GenArgs) -> Result<(), Error> {
    if let Some(v) = a.subjects {
        cfg.gen.subjects = v;
    }
    if let Some(v) = a.samples_min {
        cfg.gen.samples_min = v;
    }
    if let Some(v) = a.samples_max {
        cfg.gen.samples_max = v;
    }
    if let Some(v) = a.seed {
        cfg.gen.seed = v;
    }
    if let Some(v) = a.train_ratio {
        cfg.gen.train_ratio = v;
    }
    if let Some(v) = a.scene_w {
        cfg.rig.scene_w = v;
    }
    if let Some(v) = a.scene_h {
        cfg.rig.scene_h = v;
    }
    if let Some(v) = a.baseline {
        cfg.rig.baseline = v;
    }
    if let Some(v) = a.focal {
        cfg.rig.focal = v;
    }
    let manifest = gen_dataset(&cfg.gen_config(), &cfg.rig(), &a.out)?;
    cfg.write_resolved(&a.out)?;
    println!(
        "generated {} subjects ({} train / {} test), {} stereo pairs -> {}",
        manifest.subjects.len(),
        manifest.subjects_in(Split::Train).count(),
        manifest.subjects_in(Split::Test).count(),
        manifest.total_samples(),
        a.out.display()
    );
    Ok(())
}

fn parse_mode(s: &str) -> Result<InputMode, Error> {
    match s {
        "mono" => Ok(InputMode::Mono),
        "stereo" => Ok(InputMode::Stereo),
        "stereo-nocoords" => Ok(InputMode::StereoNoCoords),
        "depthtex" => Ok(InputMode::DepthTexture),
        other => Err(Error::config(format!(
            "unknown mode '{other}' (expected mono|stereo|stereo-nocoords|depthtex)"
        ))),
    }
}

fn cmd_train(mut cfg: Config, a: TrainArgs) -> Result<(), Error> {
    if let Some(v) = a.seed {
        cfg.train.seed = v;
    }
    if let Some(v) = a.epochs {
        cfg.train.epochs = v;
    }
    if let Some(v) = a.alpha {
        cfg.aux.alpha = v;
    }
    if let Some(v) = a.beta {
        cfg.aux.beta = v;
    }
    let mode = parse_mode(&a.mode)?;
    let aux = match a.aux.as_str() {
        "off" => AuxConfig::disabled(),
        "l1" => AuxConfig { alpha: 0.0, beta: cfg.aux.beta },
        "full" => AuxConfig { alpha: cfg.aux.alpha, beta: cfg.aux.beta },
        other => return Err(Error::config(format!("unknown aux setting '{other}' (off|l1|full)"))),
    };
    let margin = cfg.margin_config(a.loss.as_deref())?;
    let tcfg = cfg.train_config(mode, margin, aux);

    let mono_ckpt: Option<PathBuf> = if aux.enabled() && aux.alpha > 0.0 {
        match a.mono_ckpt {
            Some(p) => Some(p),
            None => {
                let candidate = a
                    .ckpt
                    .parent()
                    .unwrap_or(Path::new("."))
                    .join("mono")
                    .join("model.ckpt");
                if candidate.exists() {
                    eprintln!("using stage-1 checkpoint {}", candidate.display());
                    Some(candidate)
                } else {
                    return Err(Error::config(format!(
                        "auxiliary training needs a stage-1 mono model: pass --mono-ckpt or place one at {}",
                        candidate.display()
                    )));
                }
            }
        }
    } else {
        None
    };

    let (_, record) = train_and_save(&tcfg, &a.data, &a.ckpt, mono_ckpt.as_deref())?;
    cfg.write_resolved(&a.ckpt)?;
    let last = record.epochs.last().expect("at least one epoch");
    println!(
        "trained {mode} for {} epochs (final l_ang {:.4}, l_aux {:.4}) -> {}",
        record.epochs.len(),
        last.l_ang,
        last.l_aux,
        a.ckpt.join("model.ckpt").display()
    );
    Ok(())
}

fn parse_axis(s: &str) -> Result<BreakdownAxis, Error> {
    match s {
        "yaw" => Ok(BreakdownAxis::Yaw),
        "pitch" => Ok(BreakdownAxis::Pitch),
        "light" => Ok(BreakdownAxis::Light),
        other => Err(Error::config(format!("unknown breakdown axis '{other}'"))),
    }
}

fn cmd_eval(mut cfg: Config, a: EvalArgs) -> Result<(), Error> {
    if let Some(f) = a.fpr {
        cfg.eval.fpr = f;
    }
    if let Some(f) = a.fusion {
        cfg.eval.fusion = f;
    }
    let model = TrainedModel::load(&a.ckpt)?;
    let manifest = Manifest::load(&a.data)?;
    std::fs::create_dir_all(&a.out)?;
    let fusion = cfg.fusion()?;

    let outcome = verification_eval(
        &model,
        &a.data,
        &manifest,
        Split::Test,
        &cfg.eval.fpr,
        fusion,
        cfg.eval.shard_rows,
    )?;
    write_roc_csv(&outcome.report, &a.out.join("roc.csv"))?;
    write_fnr_at_csv(&outcome.report, &a.out.join("fnr_at.csv"))?;
    if a.svg {
        svg::write_roc_svg(&outcome.report, &a.out.join("roc.svg"))?;
    }
    for row in &outcome.report.fnr_at {
        println!(
            "fpr {:>9.2e}: threshold {:+.6}, fnr {:.6}",
            row.target_fpr, row.threshold, row.fnr
        );
    }

    if let Some(axes) = a.breakdown {
        // Condition at the tightest requested FPR.
        let t = outcome
            .report
            .fnr_at
            .iter()
            .min_by(|x, y| x.target_fpr.total_cmp(&y.target_fpr))
            .map(|r| r.threshold)
            .ok_or_else(|| Error::config("breakdown requires at least one FPR target"))?;
        for axis_name in axes {
            let axis = parse_axis(&axis_name)?;
            let m = breakdown_fnr(&outcome.genuine_pairs, axis, t);
            write_breakdown_csv(&m, &a.out.join(format!("breakdown_{axis_name}.csv")))?;
            if a.svg {
                svg::write_breakdown_svg(&m, &a.out.join(format!("breakdown_{axis_name}.svg")))?;
            }
        }
    }

    if a.dump_embeddings {
        let embs = stereoface::eval::embed_split(&model, &a.data, &manifest, Split::Test, fusion)?;
        write_embeddings_csv(&embs, &a.out.join("embeddings.csv"))?;
        write_embeddings_raw(
            &embs,
            &a.out.join("embeddings.f32"),
            &a.out.join("embeddings.json"),
        )?;
    }
    cfg.write_resolved(&a.out)?;
    Ok(())
}

fn cmd_ablate(mut cfg: Config, a: AblateArgs) -> Result<(), Error> {
    if let Some(f) = a.fpr {
        cfg.eval.fpr = f;
    }
    if let Some(e) = a.epochs {
        cfg.train.epochs = e;
    }
    let margin = cfg.margin_config(None)?;
    let base = cfg.train_config(InputMode::Stereo, margin, AuxConfig::disabled());
    let acfg = AblationConfig {
        base,
        seeds: a.seeds.clone(),
        fpr_targets: cfg.eval.fpr.clone(),
        fusion: cfg.fusion()?,
        include_mono: a.include_mono,
        yaw_breakdown: false,
        shard_rows: cfg.eval.shard_rows,
    };
    let variants = standard_variants();
    let outcome = ablation_run(&a.data, &variants, &acfg, &a.out)?;
    write_ablation_csv(&outcome, &acfg.fpr_targets, &a.out)?;
    cfg.write_resolved(&a.out)?;
    println!("variant medians (fnr at each target):");
    for (name, rows) in &outcome.medians {
        let cells: Vec<String> = rows.iter().map(|(t, f)| format!("{t:.0e}:{f:.4}")).collect();
        println!("  {name:<12} {}", cells.join("  "));
    }
    Ok(())
}

fn cmd_spoof_gen(mut cfg: Config, a: SpoofGenArgs) -> Result<(), Error> {
    if let Some(v) = a.seed {
        cfg.spoof.seed = v;
    }
    if let Some(v) = a.distance_min {
        cfg.spoof.distance_min = v;
    }
    if let Some(v) = a.distance_max {
        cfg.spoof.distance_max = v;
    }
    if let Some(v) = a.max_angle {
        cfg.spoof.max_angle = v;
    }
    let manifest = gen_spoof_set(&a.data, &a.out, &cfg.spoof_gen_config())?;
    cfg.write_resolved(&a.out)?;
    println!(
        "simulated {} flat-print attacks -> {}",
        manifest.total_samples(),
        a.out.display()
    );
    Ok(())
}

fn cmd_spoof_train(mut cfg: Config, a: SpoofTrainArgs) -> Result<(), Error> {
    if let Some(v) = a.seed {
        cfg.train.seed = v;
    }
    if let Some(v) = a.epochs {
        cfg.spoof.epochs = v;
    }
    let margin = cfg.margin_config(None)?;
    let mut tcfg = cfg.train_config(InputMode::Stereo, margin, AuxConfig::disabled());
    tcfg.epochs = cfg.spoof.epochs;
    let model = liveness_train(&tcfg, &a.data, &a.attacks)?;
    std::fs::create_dir_all(&a.out)?;
    let path = a.out.join("liveness.ckpt");
    model.save(&path, tcfg.seed)?;
    cfg.write_resolved(&a.out)?;
    println!("liveness classifier -> {}", path.display());
    Ok(())
}

fn cmd_spoof_eval(cfg: Config, a: SpoofEvalArgs) -> Result<(), Error> {
    let mut model = LivenessModel::load(&a.ckpt)?;
    if let Some(t) = a.threshold {
        model.threshold = t;
    } else {
        model.threshold = cfg.spoof.threshold;
    }
    let report = spoof_metrics(&model, &a.data, &a.attacks)?;
    for row in &report.rows {
        println!("{}: n={} {}={:.4}", row.set, row.n, row.metric, row.value);
    }
    if let Some(out) = a.out {
        std::fs::create_dir_all(&out)?;
        report.write_csv(&out.join("spoof_report.csv"))?;
        cfg.write_resolved(&out)?;
    }
    Ok(())
}

fn parse_bbox(s: &str) -> Result<IRect, Error> {
    let parts: Vec<&str> = s.split(',').collect();
    if parts.len() != 3 {
        return Err(Error::config(format!("bbox '{s}' must be x,y,side")));
    }
    let parse = |p: &str| {
        p.trim()
            .parse::<usize>()
            .map_err(|_| Error::config(format!("bad bbox component '{p}'")))
    };
    Ok(IRect { x: parse(parts[0])?, y: parse(parts[1])?, side: parse(parts[2])? })
}

fn embed_one(
    model: &TrainedModel,
    left: &Path,
    right: &Path,
    bbox_l: IRect,
    bbox_r: IRect,
) -> Result<Vec<f32>, Error> {
    let scene_l = read_pgm(left)?;
    let scene_r = read_pgm(right)?;
    let frames = prepare_stereo_from_boxes(&scene_l, &scene_r, bbox_l, bbox_r, None, &model.crop)?;
    let crop = augment_stereo(&frames, &model.crop, &AugmentConfig::default(), None);
    let input = match model.mode {
        InputMode::DepthTexture => {
            return Err(Error::config(
                "infer does not support depth+texture checkpoints (no depth input)",
            ))
        }
        mode => assemble_input(mode, &crop)?,
    };
    let batch = stereoface::train::stack_inputs(&[input])?;
    let mut embs = model.embed_batch(&batch)?;
    Ok(embs.remove(0))
}

fn cmd_infer(_cfg: Config, a: InferArgs) -> Result<(), Error> {
    let model = TrainedModel::load(&a.ckpt)?;
    let e1 = embed_one(
        &model,
        &a.left,
        &a.right,
        parse_bbox(&a.bbox_left)?,
        parse_bbox(&a.bbox_right)?,
    )?;
    match (&a.left2, &a.right2, &a.bbox_left2, &a.bbox_right2) {
        (Some(l2), Some(r2), Some(bl2), Some(br2)) => {
            let e2 = embed_one(&model, l2, r2, parse_bbox(bl2)?, parse_bbox(br2)?)?;
            let s = similarity(&e1, &e2)?;
            println!("similarity: {s:.6}");
        }
        (None, None, None, None) => {
            let rendered: Vec<String> = e1.iter().map(|v| format!("{v}")).collect();
            println!("embedding: [{}]", rendered.join(", "));
        }
        _ => {
            return Err(Error::config(
                "second sample needs all of --left2 --right2 --bbox-left2 --bbox-right2",
            ))
        }
    }
    Ok(())
}
