//! Command-line entry point: dataset building, the two training stages,
//! ablations, single-image enhancement, evaluation, and report tables.
//!
//! Exit codes: 0 success, 1 runtime failure, 2 usage error.

use crate::codec::{CodecConfig, CodecMode};
use crate::config::{parse_qp_set, ConfigFile};
use crate::dataset::DatasetManifest;
use crate::error::{Error, Result};
use crate::eval::{records_from_csv, records_to_csv, report, Evaluatee, EvalVariant};
use crate::model::checkpoint::{load_checkpoint, save_checkpoint};
use crate::model::Variant;
use crate::plane::Plane;
use crate::train::{train_ablation, train_stage1, train_stage2, LogEntry, Stage, TrainConfig, TrainOpts};
use clap::{Args, Parser, Subcommand};
use std::path::{Path, PathBuf};

/// Environment variable overriding the external encoder path.
pub const ENCODER_ENV: &str = "DIFFQE_HEVC_ENCODER";

#[derive(Parser)]
#[command(
    name = "diffqe",
    version,
    about = "Blind-QP quality enhancement for block-compressed frames",
    long_about = "Trains a prior encoder + conditioned UNet decoder, then a diffusion-based\n\
                  estimator that recovers the prior vector from the compressed frame alone,\n\
                  so a single model enhances frames of unknown quantization parameter."
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Compress a corpus at every QP and emit train/val manifests
    BuildDataset(BuildDatasetArgs),
    /// Run one training stage (stage1: encoder+decoder, stage2: estimator)
    Train(TrainArgs),
    /// Train an ablation variant (noest or nodiff)
    Ablate(AblateArgs),
    /// Enhance a single image with a trained checkpoint
    Enhance(EnhanceArgs),
    /// Evaluate a checkpoint (or the baseline) over a manifest
    Eval(EvalArgs),
    /// Render evaluation records into a table
    Report(ReportArgs),
}

#[derive(Args)]
struct BuildDatasetArgs {
    /// Directory of corpus images (png/jpg/bmp)
    #[arg(long)]
    corpus: Option<PathBuf>,
    /// Output dataset directory
    #[arg(long)]
    out: Option<PathBuf>,
    /// Comma-separated QP list
    #[arg(long, value_name = "LIST")]
    qp_set: Option<String>,
    /// Codec: proxy or external
    #[arg(long)]
    codec: Option<String>,
    /// Proxy codec block size
    #[arg(long)]
    block_size: Option<usize>,
    /// External encoder binary (or set DIFFQE_HEVC_ENCODER)
    #[arg(long)]
    encoder_path: Option<PathBuf>,
    /// External encoder args template with {in} {out} {qp} {w} {h}
    #[arg(long)]
    encoder_args: Option<String>,
    /// Fraction of sources assigned to train
    #[arg(long)]
    split_ratio: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    /// Key-value config file; flags override it
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Args)]
struct TrainArgs {
    /// stage1 or stage2
    #[arg(long)]
    stage: Option<String>,
    /// Training manifest
    #[arg(long)]
    manifest: Option<PathBuf>,
    /// Validation manifest (required for stage2)
    #[arg(long)]
    val_manifest: Option<PathBuf>,
    /// Output directory for checkpoints and metrics
    #[arg(long)]
    out: Option<PathBuf>,
    /// Stage-1 checkpoint (required for stage2)
    #[arg(long)]
    stage1_weights: Option<PathBuf>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    batch: Option<usize>,
    #[arg(long)]
    patch: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Reverse-chain timestep count
    #[arg(long)]
    t_steps: Option<usize>,
    /// Prior latent length
    #[arg(long)]
    latent_dim: Option<usize>,
    #[arg(long)]
    checkpoint_every: Option<usize>,
    /// Resume from a checkpoint written by the same stage
    #[arg(long)]
    resume: Option<PathBuf>,
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Args)]
struct AblateArgs {
    /// noest or nodiff
    #[arg(long)]
    kind: Option<String>,
    #[arg(long)]
    manifest: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Stage-1 checkpoint (required for nodiff)
    #[arg(long)]
    stage1_weights: Option<PathBuf>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    batch: Option<usize>,
    #[arg(long)]
    patch: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    t_steps: Option<usize>,
    #[arg(long)]
    latent_dim: Option<usize>,
    #[arg(long)]
    checkpoint_every: Option<usize>,
    #[arg(long)]
    resume: Option<PathBuf>,
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Args)]
struct EnhanceArgs {
    /// Input image
    #[arg(long, value_name = "IMAGE")]
    r#in: Option<PathBuf>,
    #[arg(long)]
    weights: Option<PathBuf>,
    /// Output image (PNG)
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Ground-truth image; prints delta-PSNR when given
    #[arg(long)]
    gt: Option<PathBuf>,
    /// Edge-pad to the required multiple, crop after enhancement
    #[arg(long)]
    pad: bool,
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    /// Checkpoint to evaluate
    #[arg(long)]
    weights: Option<PathBuf>,
    /// Evaluate the identity baseline instead of a checkpoint
    #[arg(long)]
    baseline: bool,
    /// Val or test manifest
    #[arg(long)]
    manifest: Option<PathBuf>,
    /// Output records file (CSV)
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Args)]
struct ReportArgs {
    /// Record files produced by eval (repeatable)
    #[arg(long, value_name = "CSV", num_args = 1..)]
    records: Vec<PathBuf>,
    /// Output table file
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    config: Option<PathBuf>,
}

/// Run the CLI on the given arguments (program name excluded).
pub fn run(argv: &[String]) -> i32 {
    let mut full = vec!["diffqe".to_string()];
    full.extend_from_slice(argv);
    let cli = match Cli::try_parse_from(&full) {
        Ok(c) => c,
        Err(e) => {
            // clap renders help/version on stdout with success
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    let result = match cli.command {
        Command::BuildDataset(a) => cmd_build_dataset(a),
        Command::Train(a) => cmd_train(a),
        Command::Ablate(a) => cmd_ablate(a),
        Command::Enhance(a) => cmd_enhance(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Report(a) => cmd_report(a),
    };
    match result {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    }
}

fn load_config(path: &Option<PathBuf>) -> Result<ConfigFile> {
    match path {
        Some(p) => ConfigFile::load(p),
        None => Ok(ConfigFile::empty()),
    }
}

fn require<T>(v: Option<T>, what: &str) -> Result<T> {
    v.ok_or_else(|| Error::Config(format!("missing required flag --{what}")))
}

fn cmd_build_dataset(a: BuildDatasetArgs) -> Result<()> {
    let cfg = load_config(&a.config)?;
    cfg.restrict_to(&[
        "corpus", "out", "qp-set", "codec", "block-size", "encoder-path", "encoder-args",
        "split-ratio", "seed",
    ])?;
    let corpus = require(cfg.resolve_opt(a.corpus, "corpus")?, "corpus")?;
    let out = require(cfg.resolve_opt(a.out, "out")?, "out")?;
    let qp_set = parse_qp_set(&cfg.resolve(a.qp_set, "qp-set", "27,32,37,42".into())?)?;
    let mode = CodecMode::parse(&cfg.resolve(a.codec, "codec", "proxy".into())?)?;
    let block_size = cfg.resolve(a.block_size, "block-size", 8)?;
    let encoder_path = cfg
        .resolve_opt(a.encoder_path, "encoder-path")?
        .or_else(|| std::env::var_os(ENCODER_ENV).map(PathBuf::from));
    let encoder_args =
        cfg.resolve(a.encoder_args, "encoder-args", "{in} {out} {qp} {w} {h}".into())?;
    let split_ratio = cfg.resolve(a.split_ratio, "split-ratio", 0.9)?;
    let seed = cfg.resolve(a.seed, "seed", 0)?;
    if mode == CodecMode::External && encoder_path.is_none() {
        return Err(Error::Config(format!(
            "external codec requires --encoder-path or {ENCODER_ENV}"
        )));
    }
    let codec = CodecConfig {
        mode,
        block_size,
        external_encoder_path: encoder_path,
        external_args_template: encoder_args,
    };
    let (train, val) = crate::dataset::build_dataset(&corpus, &qp_set, &codec, &out, split_ratio, seed)?;
    println!(
        "dataset written to {}: {} train entries, {} val entries (digest {})",
        out.display(),
        train.entries.len(),
        val.entries.len(),
        &train.digest()[..16]
    );
    Ok(())
}

/// Shared resolution of training knobs from flags + config file.
#[allow(clippy::too_many_arguments)]
fn resolve_train_config(
    cfg: &ConfigFile,
    stage: Stage,
    lr: Option<f64>,
    steps: Option<usize>,
    batch: Option<usize>,
    patch: Option<usize>,
    seed: Option<u64>,
    t_steps: Option<usize>,
    latent_dim: Option<usize>,
    checkpoint_every: Option<usize>,
) -> Result<TrainConfig> {
    let d = TrainConfig::default();
    Ok(TrainConfig {
        stage,
        lr: cfg.resolve(lr, "lr", d.lr)?,
        steps: cfg.resolve(steps, "steps", d.steps)?,
        batch: cfg.resolve(batch, "batch", d.batch)?,
        patch: cfg.resolve(patch, "patch", d.patch)?,
        seed: cfg.resolve(seed, "seed", d.seed)?,
        diffusion_steps: cfg.resolve(t_steps, "t-steps", d.diffusion_steps)?,
        latent_dim: cfg.resolve(latent_dim, "latent-dim", d.latent_dim)?,
        checkpoint_every: cfg.resolve(checkpoint_every, "checkpoint-every", d.checkpoint_every)?,
        qp_set: d.qp_set,
    })
}

/// Stream log lines to stdout and mirror them into a metrics file.
fn make_logger(out_dir: &Path, name: &str) -> Result<impl FnMut(&LogEntry)> {
    std::fs::create_dir_all(out_dir)?;
    let path = out_dir.join(format!("{name}.metrics"));
    let mut file = std::io::BufWriter::new(std::fs::File::create(&path)?);
    Ok(move |e: &LogEntry| {
        use std::io::Write;
        let line = e.to_line();
        if e.step % 100 == 0 || e.loss_name != crate::train::LossName::LRec {
            println!("{line}");
        }
        let _ = writeln!(file, "{line}");
        let _ = file.flush();
    })
}

fn cmd_train(a: TrainArgs) -> Result<()> {
    let cfg = load_config(&a.config)?;
    cfg.restrict_to(&[
        "stage", "manifest", "val-manifest", "out", "stage1-weights", "lr", "steps", "batch",
        "patch", "seed", "t-steps", "latent-dim", "checkpoint-every", "resume",
    ])?;
    let stage = Stage::parse(&require(cfg.resolve_opt(a.stage, "stage")?, "stage")?)?;
    let manifest_path = require(cfg.resolve_opt(a.manifest, "manifest")?, "manifest")?;
    let out = require(cfg.resolve_opt(a.out, "out")?, "out")?;
    let tc = resolve_train_config(
        &cfg, stage, a.lr, a.steps, a.batch, a.patch, a.seed, a.t_steps, a.latent_dim,
        a.checkpoint_every,
    )?;
    let manifest = DatasetManifest::load(&manifest_path)?;
    let resume = cfg.resolve_opt(a.resume, "resume")?;
    let mut logger = make_logger(&out, stage.as_str())?;
    let opts = TrainOpts {
        ckpt_dir: Some(out.clone()),
        resume,
        on_log: Some(&mut logger),
    };
    match stage {
        Stage::Stage1 => {
            train_stage1(&tc, &manifest, opts)?;
        }
        Stage::Stage2 => {
            let s1_path = require(
                cfg.resolve_opt(a.stage1_weights, "stage1-weights")?,
                "stage1-weights",
            )?;
            let val_path =
                require(cfg.resolve_opt(a.val_manifest, "val-manifest")?, "val-manifest")?;
            let val_manifest = DatasetManifest::load(&val_path)?;
            let (stage1, _) =
                crate::model::checkpoint::load_checkpoint_expecting(&s1_path, &tc.arch())?;
            let mut weights = train_stage2(&tc, &manifest, &val_manifest, stage1, opts)?;
            save_checkpoint(&out.join("final.ckpt"), &mut weights, None)?;
        }
        other => {
            return Err(Error::Config(format!(
                "train handles stage1/stage2; use the ablate subcommand for {}",
                other.as_str()
            )))
        }
    }
    println!("training complete: {}", out.join("final.ckpt").display());
    Ok(())
}

fn cmd_ablate(a: AblateArgs) -> Result<()> {
    let cfg = load_config(&a.config)?;
    cfg.restrict_to(&[
        "kind", "manifest", "out", "stage1-weights", "lr", "steps", "batch", "patch", "seed",
        "t-steps", "latent-dim", "checkpoint-every", "resume",
    ])?;
    let kind = Stage::parse(&require(cfg.resolve_opt(a.kind, "kind")?, "kind")?)?;
    if kind != Stage::NoEst && kind != Stage::NoDiff {
        return Err(Error::Config("ablate kind must be noest or nodiff".into()));
    }
    let manifest_path = require(cfg.resolve_opt(a.manifest, "manifest")?, "manifest")?;
    let out = require(cfg.resolve_opt(a.out, "out")?, "out")?;
    let tc = resolve_train_config(
        &cfg, kind, a.lr, a.steps, a.batch, a.patch, a.seed, a.t_steps, a.latent_dim,
        a.checkpoint_every,
    )?;
    let manifest = DatasetManifest::load(&manifest_path)?;
    let stage1 = match kind {
        Stage::NoDiff => {
            let p = require(
                cfg.resolve_opt(a.stage1_weights, "stage1-weights")?,
                "stage1-weights",
            )?;
            let (w, _) = crate::model::checkpoint::load_checkpoint_expecting(&p, &tc.arch())?;
            Some(w)
        }
        _ => None,
    };
    let mut logger = make_logger(&out, kind.as_str())?;
    let opts = TrainOpts {
        ckpt_dir: Some(out.clone()),
        resume: cfg.resolve_opt(a.resume, "resume")?,
        on_log: Some(&mut logger),
    };
    let mut weights = train_ablation(kind, &tc, &manifest, stage1, opts)?;
    save_checkpoint(&out.join("final.ckpt"), &mut weights, None)?;
    println!("ablation complete: {}", out.join("final.ckpt").display());
    Ok(())
}

/// Enhancement of one image file, with optional edge padding and delta-PSNR.
fn cmd_enhance(a: EnhanceArgs) -> Result<()> {
    let cfg = load_config(&a.config)?;
    cfg.restrict_to(&["in", "weights", "out", "seed", "gt", "pad"])?;
    let in_path = require(cfg.resolve_opt(a.r#in, "in")?, "in")?;
    let weights_path = require(cfg.resolve_opt(a.weights, "weights")?, "weights")?;
    let out_path = require(cfg.resolve_opt(a.out, "out")?, "out")?;
    let seed = cfg.resolve(a.seed, "seed", 0)?;
    let pad = a.pad || cfg.resolve(None::<bool>, "pad", false)?;
    let started = std::time::Instant::now();
    let img = crate::dataset::load_luma(&in_path)?;
    let (weights, _) = load_checkpoint(&weights_path)?;
    let enhanced = enhance_padded(&weights, &img, seed, pad)?;
    let bytes = enhanced.to_bytes();
    let png = image::GrayImage::from_raw(enhanced.w as u32, enhanced.h as u32, bytes)
        .expect("buffer matches dims");
    png.save(&out_path)?;
    eprintln!(
        "enhanced {} -> {} ({} ms, variant {})",
        in_path.display(),
        out_path.display(),
        started.elapsed().as_millis(),
        weights.variant.as_str()
    );
    if let Some(gt_path) = a.gt.or(cfg.resolve_opt(None::<PathBuf>, "gt")?) {
        let gt = crate::dataset::load_luma(&gt_path)?;
        // metrics follow the 8-bit output round-trip, matching eval
        let written = Plane::from_bytes(enhanced.w, enhanced.h, &enhanced.to_bytes())?;
        let d = crate::eval::delta_psnr(&written, &img, &gt)?;
        println!("delta_psnr={d:.6}");
    }
    Ok(())
}

/// Pad to the conditioning alignment (16) when allowed, enhance, crop back.
pub fn enhance_padded(
    weights: &crate::model::ModelWeights<f32>,
    img: &Plane,
    seed: u64,
    pad: bool,
) -> Result<Plane> {
    let align = 16usize;
    if img.w % align == 0 && img.h % align == 0 {
        return weights.enhance(img, seed);
    }
    if !pad {
        return Err(Error::Shape(format!(
            "image dims {}x{} are not divisible by {align}; rerun with --pad to edge-pad and crop",
            img.w, img.h
        )));
    }
    let pw = img.w.div_ceil(align) * align;
    let ph = img.h.div_ceil(align) * align;
    let padded = img.pad_to(pw, ph);
    let out = weights.enhance(&padded, seed)?;
    out.crop(0, 0, img.w, img.h)
}

fn cmd_eval(a: EvalArgs) -> Result<()> {
    let cfg = load_config(&a.config)?;
    cfg.restrict_to(&["weights", "baseline", "manifest", "out", "seed"])?;
    let manifest_path = require(cfg.resolve_opt(a.manifest, "manifest")?, "manifest")?;
    let out = require(cfg.resolve_opt(a.out, "out")?, "out")?;
    let seed = cfg.resolve(a.seed, "seed", 0)?;
    let baseline = a.baseline || cfg.resolve(None::<bool>, "baseline", false)?;
    let weights_path = cfg.resolve_opt(a.weights, "weights")?;
    let manifest = DatasetManifest::load(&manifest_path)?;
    let records = match (baseline, weights_path) {
        (true, None) => crate::eval::evaluate(Evaluatee::Baseline, &manifest, seed)?,
        (false, Some(p)) => {
            let (w, _) = load_checkpoint(&p)?;
            crate::eval::evaluate(Evaluatee::Model(&w), &manifest, seed)?
        }
        (true, Some(_)) => {
            return Err(Error::Config("--weights and --baseline are mutually exclusive".into()))
        }
        (false, None) => return Err(Error::Config("need --weights or --baseline".into())),
    };
    std::fs::write(&out, records_to_csv(&records))?;
    for v in EvalVariant::ORDER {
        if let Some(m) = crate::eval::mean_delta(&records, v) {
            println!("mean_delta_psnr variant={} value={m:.6}", v.as_str());
        }
    }
    println!("records written to {} ({} rows)", out.display(), records.len());
    Ok(())
}

fn cmd_report(a: ReportArgs) -> Result<()> {
    let cfg = load_config(&a.config)?;
    cfg.restrict_to(&["records", "out"])?;
    let mut paths = a.records;
    if paths.is_empty() {
        if let Some(p) = cfg.resolve_opt(None::<PathBuf>, "records")? {
            paths.push(p);
        }
    }
    if paths.is_empty() {
        return Err(Error::Config("missing required flag --records".into()));
    }
    let mut all = Vec::new();
    for p in &paths {
        let text = std::fs::read_to_string(p)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", p.display())))?;
        all.extend(records_from_csv(&text)?);
    }
    let table = report(&all)?;
    print!("{table}");
    if let Some(out) = cfg.resolve_opt(a.out, "out")? {
        std::fs::write(&out, &table)?;
    }
    Ok(())
}

/// Convenience used by tests: run with string slices.
pub fn run_args(args: &[&str]) -> i32 {
    let v: Vec<String> = args.iter().map(|s| s.to_string()).collect();
    run(&v)
}

// Keep the variant names aligned between the weights and the eval layer.
#[allow(dead_code)]
fn variant_label(v: Variant) -> &'static str {
    EvalVariant::from(v).as_str()
}
