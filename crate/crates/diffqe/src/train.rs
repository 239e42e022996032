//! Two-stage optimization.
//!
//! Stage 1 trains the prior encoder and decoder jointly on reconstruction.
//! Stage 2 freezes them and trains the estimator (condition encoder + noise
//! predictor) on per-timestep noise matching, tracking the latent-recovery
//! distance through the full reverse chain as the validation metric.
//! Ablations reuse the same protocol: NoEst severs conditioning by training
//! the decoder against a zero vector; NoDiff replaces the reverse chain with
//! a direct regressor onto the prior latent.

use crate::dataset::{load_samples, DatasetManifest, PatchBatcher};
use crate::diffusion::{sample_latent, NoiseSchedule, SampleNoise};
use crate::error::{Error, Result};
use crate::model::checkpoint::{rng_restore, rng_state, save_checkpoint, TrainState};
use crate::model::{
    compose_encoder_input, plane_to_feat, ArchConfig, Estimator, ModelWeights, Regressor, Variant,
};
use crate::nn::adam::Adam;
use crate::nn::{Param, Workspace};
use crate::plane::QpMap;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::path::{Path, PathBuf};
use std::time::Instant;

pub const DEFAULT_LR: f64 = 2e-4;
pub const DEFAULT_STEPS: usize = 5000;
pub const DEFAULT_BATCH: usize = 16;
pub const DEFAULT_PATCH: usize = 64;

/// Fixed seed for the periodic reverse-chain validation pass.
const VAL_SAMPLE_SEED: u64 = 0xE57;
/// Stage-2 validation cadence (steps).
const VAL_EVERY: usize = 250;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    Stage1,
    Stage2,
    NoEst,
    NoDiff,
}

impl Stage {
    pub fn as_str(&self) -> &'static str {
        match self {
            Stage::Stage1 => "stage1",
            Stage::Stage2 => "stage2",
            Stage::NoEst => "noest",
            Stage::NoDiff => "nodiff",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "stage1" => Ok(Stage::Stage1),
            "stage2" => Ok(Stage::Stage2),
            "noest" => Ok(Stage::NoEst),
            "nodiff" => Ok(Stage::NoDiff),
            _ => Err(Error::Config(format!("unknown stage: {s}"))),
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub stage: Stage,
    pub lr: f64,
    pub steps: usize,
    pub batch: usize,
    pub patch: usize,
    pub seed: u64,
    pub diffusion_steps: usize,
    pub latent_dim: usize,
    /// 0 disables periodic checkpoints; the final one is always written when
    /// a checkpoint directory is given.
    pub checkpoint_every: usize,
    pub qp_set: Vec<u8>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            stage: Stage::Stage1,
            lr: DEFAULT_LR,
            steps: DEFAULT_STEPS,
            batch: DEFAULT_BATCH,
            patch: DEFAULT_PATCH,
            seed: 0,
            diffusion_steps: 100,
            latent_dim: 256,
            checkpoint_every: 0,
            qp_set: vec![27, 32, 37, 42],
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.lr <= 0.0 {
            return Err(Error::Range("learning rate must be positive".into()));
        }
        if self.steps == 0 && self.stage != Stage::Stage1 && self.stage != Stage::NoEst {
            // zero-step stage1/noest is the documented identity model; the
            // latent trainers have nothing to return untrained
        }
        if self.batch == 0 {
            return Err(Error::Range("batch size must be positive".into()));
        }
        if self.patch == 0 || self.patch % 16 != 0 {
            return Err(Error::Range(format!(
                "patch size {} must be a positive multiple of 16",
                self.patch
            )));
        }
        if self.latent_dim == 0 || self.diffusion_steps == 0 {
            return Err(Error::Range("latent dim and timestep count must be positive".into()));
        }
        Ok(())
    }

    pub fn arch(&self) -> ArchConfig {
        ArchConfig {
            latent_dim: self.latent_dim,
            diffusion_steps: self.diffusion_steps,
            ..ArchConfig::default()
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LossName {
    LRec,
    LEps,
    LEst,
}

impl LossName {
    pub fn as_str(&self) -> &'static str {
        match self {
            LossName::LRec => "L_rec",
            LossName::LEps => "L_eps",
            LossName::LEst => "L_est",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LogEntry {
    pub step: usize,
    pub loss_name: LossName,
    pub value: f64,
    pub wall_ms: u64,
}

impl LogEntry {
    pub fn to_line(&self) -> String {
        format!(
            "step={} loss={} value={:.8e} wall_ms={}",
            self.step,
            self.loss_name.as_str(),
            self.value,
            self.wall_ms
        )
    }
}

/// Side-channel for a training run: checkpoint placement and log sink.
pub struct TrainOpts<'a> {
    pub ckpt_dir: Option<PathBuf>,
    /// Resume from this checkpoint (must carry train state).
    pub resume: Option<PathBuf>,
    pub on_log: Option<&'a mut dyn FnMut(&LogEntry)>,
}

impl Default for TrainOpts<'_> {
    fn default() -> Self {
        TrainOpts { ckpt_dir: None, resume: None, on_log: None }
    }
}

struct Logger<'a> {
    start: Instant,
    sink: Option<&'a mut dyn FnMut(&LogEntry)>,
    pub entries: Vec<LogEntry>,
}

impl<'a> Logger<'a> {
    fn new(sink: Option<&'a mut dyn FnMut(&LogEntry)>) -> Self {
        Logger { start: Instant::now(), sink, entries: Vec::new() }
    }

    fn log(&mut self, step: usize, loss_name: LossName, value: f64) {
        let e = LogEntry {
            step,
            loss_name,
            value,
            wall_ms: self.start.elapsed().as_millis() as u64,
        };
        if let Some(s) = self.sink.as_mut() {
            s(&e);
        }
        self.entries.push(e);
    }
}

fn check_finite(loss: f64, name: LossName, step: usize) -> Result<()> {
    if !loss.is_finite() {
        return Err(Error::NonFinite(format!(
            "{} became {loss} at step {step}; aborting",
            name.as_str()
        )));
    }
    Ok(())
}

/// Uniform timestep draw over the full chain, 1..=t_max inclusive.
pub(crate) fn draw_timestep(rng: &mut ChaCha8Rng, t_max: usize) -> usize {
    rng.gen_range(1..=t_max)
}

fn maybe_checkpoint(
    dir: Option<&Path>,
    every: usize,
    step: usize,
    total: usize,
    weights: &mut ModelWeights<f32>,
    state: &TrainState,
) -> Result<()> {
    let Some(dir) = dir else { return Ok(()) };
    std::fs::create_dir_all(dir)?;
    let periodic = every > 0 && step > 0 && step % every == 0;
    if periodic {
        save_checkpoint(&dir.join(format!("step_{step:06}.ckpt")), weights, Some(state))?;
    }
    if step == total {
        save_checkpoint(&dir.join("final.ckpt"), weights, Some(state))?;
    }
    Ok(())
}

/// Expose the trainable parameters of one stage, in fixed order.
fn visit_trainable(w: &mut ModelWeights<f32>, stage: Stage, v: &mut dyn crate::nn::ParamVisitor<f32>) {
    match stage {
        Stage::Stage1 => {
            w.encoder.as_mut().expect("stage1 weights carry the encoder").visit("encoder", v);
            w.decoder.visit("decoder", v);
        }
        Stage::NoEst => w.decoder.visit("decoder", v),
        Stage::Stage2 => {
            w.estimator.as_mut().expect("stage2 weights carry the estimator").visit("estimator", v)
        }
        Stage::NoDiff => {
            w.regressor.as_mut().expect("nodiff weights carry the regressor").visit("regressor", v)
        }
    }
}

fn zero_trainable(w: &mut ModelWeights<f32>, stage: Stage) {
    visit_trainable(w, stage, &mut |_: &str, p: &mut Param<f32>| p.zero_grad());
}

/// Shared driver: reconstruction training of the decoder, optionally jointly
/// with the prior encoder (stage 1) or with conditioning severed (NoEst).
fn run_reconstruction(
    cfg: &TrainConfig,
    manifest: &DatasetManifest,
    mut weights: ModelWeights<f32>,
    stage: Stage,
    mut state: Option<TrainState>,
    opts: &mut TrainOpts,
) -> Result<ModelWeights<f32>> {
    let samples = load_samples(manifest)?;
    let mut logger = Logger::new(opts.on_log.take());
    let mut adam = Adam::<f32>::new(cfg.lr);
    let (mut batcher, start_step) = match state.take() {
        Some(st) => {
            let b = PatchBatcher::resume(
                samples, cfg.patch, cfg.batch, cfg.seed, st.data_epoch, st.data_pos as usize,
            )?;
            adam.restore_with(st.adam_step, &st.adam_m, &st.adam_v, &mut weights, |m, v| {
                visit_trainable(m, stage, v)
            });
            (b, st.step as usize)
        }
        None => (PatchBatcher::new(samples, cfg.patch, cfg.batch, cfg.seed)?, 0),
    };

    let zero_z = vec![0.0f32; cfg.latent_dim];
    let mut ws = Workspace::new();
    let npix = (cfg.patch * cfg.patch) as f32;
    for step in start_step..cfg.steps {
        let batch = batcher.next_batch();
        zero_trainable(&mut weights, stage);
        let mut loss = 0.0f64;
        let scale = 1.0f32 / (cfg.batch as f32 * npix);
        for (gt, comp, qp) in &batch {
            let comp_feat = plane_to_feat::<f32>(comp);
            let (z, enc_tape) = if stage == Stage::Stage1 {
                let qpmap = QpMap::new(*qp, gt.w, gt.h)?;
                let x_enc = compose_encoder_input::<f32>(gt, comp, &qpmap)?;
                let enc = weights.encoder.as_ref().expect("stage1 encoder");
                let (z, tape) = enc.forward_t(&x_enc, &mut ws);
                (z, Some(tape))
            } else {
                (zero_z.clone(), None)
            };
            let (out, dec_tape) = weights.decoder.forward_t(&comp_feat, &z, &mut ws);
            let mut gout = out.clone();
            let mut sse = 0.0f64;
            for (g, &t) in gout.data.iter_mut().zip(&gt.data) {
                let d = *g - t;
                sse += (d as f64) * (d as f64);
                *g = 2.0 * d * scale;
            }
            loss += sse as f64 / (cfg.batch as f64 * npix as f64);
            let gz = weights.decoder.backward(&dec_tape, &gout, &mut ws);
            if let (Some(tape), Some(enc)) = (enc_tape, weights.encoder.as_mut()) {
                enc.backward(&tape, &gz, &mut ws);
            }
        }
        check_finite(loss, LossName::LRec, step + 1)?;
        adam.step_with(&mut weights, |m, v| visit_trainable(m, stage, v));
        logger.log(step + 1, LossName::LRec, loss);
        let (epoch, pos) = batcher.state();
        let (adam_step, adam_m, adam_v) = adam.state();
        let st = TrainState {
            step: (step + 1) as u64,
            adam_step,
            adam_m,
            adam_v,
            data_epoch: epoch,
            data_pos: pos as u64,
            noise_rng: [0u8; 56],
        };
        maybe_checkpoint(opts.ckpt_dir.as_deref(), cfg.checkpoint_every, step + 1, cfg.steps, &mut weights, &st)?;
    }
    if cfg.steps == 0 || start_step >= cfg.steps {
        // nothing ran; still emit the final checkpoint when requested
        let st = TrainState {
            step: cfg.steps as u64,
            adam_step: 0,
            adam_m: Vec::new(),
            adam_v: Vec::new(),
            data_epoch: 0,
            data_pos: 0,
            noise_rng: [0u8; 56],
        };
        maybe_checkpoint(opts.ckpt_dir.as_deref(), 0, cfg.steps, cfg.steps, &mut weights, &st)?;
    }
    Ok(weights)
}

/// Stage 1: joint encoder + decoder reconstruction training.
pub fn train_stage1(
    cfg: &TrainConfig,
    manifest: &DatasetManifest,
    mut opts: TrainOpts,
) -> Result<ModelWeights<f32>> {
    cfg.validate()?;
    let (weights, state) = match opts.resume.take() {
        Some(path) => {
            let (w, s) = crate::model::checkpoint::load_checkpoint_expecting(&path, &cfg.arch())?;
            if w.encoder.is_none() {
                return Err(Error::Checkpoint("resume checkpoint lacks the encoder".into()));
            }
            let s = s.ok_or_else(|| Error::Checkpoint("checkpoint has no train state".into()))?;
            (w, Some(s))
        }
        None => (ModelWeights::stage1(cfg.arch(), cfg.seed), None),
    };
    run_reconstruction(cfg, manifest, weights, Stage::Stage1, state, &mut opts)
}

/// Latent-target training shared by stage 2 and the NoDiff regressor.
/// Returns the frozen prior latent for one sample.
fn prior_latent(
    weights: &ModelWeights<f32>,
    gt: &crate::plane::Plane,
    comp: &crate::plane::Plane,
    qp: u8,
    ws: &mut Workspace<f32>,
) -> Result<Vec<f32>> {
    let qpmap = QpMap::new(qp, gt.w, gt.h)?;
    let x_enc = compose_encoder_input::<f32>(gt, comp, &qpmap)?;
    let enc = weights
        .encoder
        .as_ref()
        .ok_or_else(|| Error::Checkpoint("weights lack the prior encoder".into()))?;
    Ok(enc.forward(&x_enc, ws))
}

/// Stage 2: freeze encoder + decoder, train the estimator on noise matching.
pub fn train_stage2(
    cfg: &TrainConfig,
    manifest: &DatasetManifest,
    val_manifest: &DatasetManifest,
    stage1: ModelWeights<f32>,
    mut opts: TrainOpts,
) -> Result<ModelWeights<f32>> {
    cfg.validate()?;
    if stage1.encoder.is_none() {
        return Err(Error::Checkpoint("stage 2 needs stage-1 weights with the encoder".into()));
    }
    let mut weights = stage1;
    let mut state = None;
    match opts.resume.take() {
        Some(path) => {
            let (w, s) = crate::model::checkpoint::load_checkpoint_expecting(&path, &cfg.arch())?;
            if w.estimator.is_none() {
                return Err(Error::Checkpoint("resume checkpoint lacks the estimator".into()));
            }
            state = Some(s.ok_or_else(|| Error::Checkpoint("checkpoint has no train state".into()))?);
            weights = w;
        }
        None => {
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
            rng.set_stream(0x57A6E2);
            let mut est = Estimator::new(&weights.cfg);
            est.init(&mut rng);
            weights.estimator = Some(est);
            weights.variant = Variant::Full;
        }
    }

    let schedule = NoiseSchedule::<f32>::linear(cfg.diffusion_steps, weights.cfg.beta_start, weights.cfg.beta_end)?;
    let samples = load_samples(manifest)?;
    let val_samples = load_samples(val_manifest)?;
    let val_count = val_samples.len().min(cfg.batch);
    let mut logger = Logger::new(opts.on_log.take());
    let mut adam = Adam::<f32>::new(cfg.lr);
    let d = cfg.latent_dim;

    let (mut batcher, mut noise_rng, start_step) = match state.take() {
        Some(st) => {
            let b = PatchBatcher::resume(
                samples, cfg.patch, cfg.batch, cfg.seed, st.data_epoch, st.data_pos as usize,
            )?;
            adam.restore_with(st.adam_step, &st.adam_m, &st.adam_v, &mut weights, |m, v| {
                visit_trainable(m, Stage::Stage2, v)
            });
            (b, rng_restore(&st.noise_rng), st.step as usize)
        }
        None => {
            let mut nrng = ChaCha8Rng::seed_from_u64(cfg.seed);
            nrng.set_stream(0x0E5);
            (PatchBatcher::new(samples, cfg.patch, cfg.batch, cfg.seed)?, nrng, 0)
        }
    };

    let mut ws = Workspace::new();
    let mut eps = vec![0.0f32; d];
    for step in start_step..cfg.steps {
        let batch = batcher.next_batch();
        zero_trainable(&mut weights, Stage::Stage2);
        let mut loss = 0.0f64;
        let scale = 1.0f32 / (cfg.batch as f32 * d as f32);
        for (gt, comp, qp) in &batch {
            let z_enc = prior_latent(&weights, gt, comp, *qp, &mut ws)?;
            let t = draw_timestep(&mut noise_rng, cfg.diffusion_steps);
            crate::num::fill_std_normal(&mut noise_rng, &mut eps);
            let z_t = schedule.add_noise(&z_enc, t, &eps)?;
            let comp_feat = plane_to_feat::<f32>(comp);
            let est = weights.estimator.as_mut().expect("estimator present");
            let (cvec, cond_tape) = est.cond.forward_t(&comp_feat, &mut ws);
            let (eps_hat, ptape) = est.predictor.forward_t(&z_t, &cvec, t);
            let mut gout = vec![0.0f32; d];
            let mut sse = 0.0f64;
            for i in 0..d {
                let diff = eps_hat[i] - eps[i];
                sse += (diff as f64) * (diff as f64);
                gout[i] = 2.0 * diff * scale;
            }
            loss += sse / (cfg.batch as f64 * d as f64);
            let (_gzt, gcond) = est.predictor.backward(&ptape, &gout);
            est.cond.backward(&cond_tape, &gcond, &mut ws);
        }
        check_finite(loss, LossName::LEps, step + 1)?;
        adam.step_with(&mut weights, |m, v| visit_trainable(m, Stage::Stage2, v));
        logger.log(step + 1, LossName::LEps, loss);

        if (step + 1) % VAL_EVERY == 0 || step + 1 == cfg.steps {
            let l_est = validation_latent_distance(&weights, &val_samples[..val_count], &schedule, cfg, &mut ws)?;
            check_finite(l_est, LossName::LEst, step + 1)?;
            logger.log(step + 1, LossName::LEst, l_est);
        }

        let (epoch, pos) = batcher.state();
        let (adam_step, adam_m, adam_v) = adam.state();
        let st = TrainState {
            step: (step + 1) as u64,
            adam_step,
            adam_m,
            adam_v,
            data_epoch: epoch,
            data_pos: pos as u64,
            noise_rng: rng_state(&noise_rng),
        };
        maybe_checkpoint(opts.ckpt_dir.as_deref(), cfg.checkpoint_every, step + 1, cfg.steps, &mut weights, &st)?;
    }
    Ok(weights)
}

/// Mean squared latent distance through the full reverse chain on held-out
/// samples (the stage-2 validation metric).
pub fn validation_latent_distance(
    weights: &ModelWeights<f32>,
    val: &[crate::dataset::FrameSample],
    schedule: &NoiseSchedule<f32>,
    cfg: &TrainConfig,
    ws: &mut Workspace<f32>,
) -> Result<f64> {
    let est = weights
        .estimator
        .as_ref()
        .ok_or_else(|| Error::Checkpoint("validation needs the estimator".into()))?;
    let mut total = 0.0f64;
    for (i, s) in val.iter().enumerate() {
        let z_enc = prior_latent(weights, &s.gt, &s.compressed, s.qp, ws)?;
        let comp_feat = plane_to_feat::<f32>(&s.compressed);
        let cvec = est.cond.forward(&comp_feat, ws);
        let z_est = sample_latent(
            &cvec,
            cfg.latent_dim,
            |xt, c, t| est.predictor.forward(xt, c, t),
            schedule,
            VAL_SAMPLE_SEED.wrapping_add(i as u64),
            SampleNoise::Stochastic,
        )?;
        let d2: f64 = z_est
            .iter()
            .zip(&z_enc)
            .map(|(&a, &b)| ((a - b) as f64) * ((a - b) as f64))
            .sum();
        total += d2;
    }
    Ok(total / val.len() as f64)
}

/// Ablation trainers. NoEst ignores `stage1`; NoDiff requires it.
pub fn train_ablation(
    kind: Stage,
    cfg: &TrainConfig,
    manifest: &DatasetManifest,
    stage1: Option<ModelWeights<f32>>,
    mut opts: TrainOpts,
) -> Result<ModelWeights<f32>> {
    cfg.validate()?;
    match kind {
        Stage::NoEst => {
            let (weights, state) = match opts.resume.take() {
                Some(path) => {
                    let (w, s) =
                        crate::model::checkpoint::load_checkpoint_expecting(&path, &cfg.arch())?;
                    if w.variant != Variant::NoEst {
                        return Err(Error::Checkpoint("resume checkpoint is not a noest run".into()));
                    }
                    (w, Some(s.ok_or_else(|| Error::Checkpoint("checkpoint has no train state".into()))?))
                }
                None => (ModelWeights::noest(cfg.arch(), cfg.seed), None),
            };
            run_reconstruction(cfg, manifest, weights, Stage::NoEst, state, &mut opts)
        }
        Stage::NoDiff => {
            let mut weights = stage1.ok_or_else(|| {
                Error::Config("nodiff training requires stage-1 weights".into())
            })?;
            if weights.encoder.is_none() {
                return Err(Error::Checkpoint("nodiff needs the stage-1 encoder".into()));
            }
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
            rng.set_stream(0x0D1FF);
            let mut reg = Regressor::new(&weights.cfg);
            reg.init(&mut rng);
            weights.regressor = Some(reg);
            weights.estimator = None;
            weights.variant = Variant::NoDiff;

            let samples = load_samples(manifest)?;
            let mut logger = Logger::new(opts.on_log.take());
            let mut adam = Adam::<f32>::new(cfg.lr);
            let mut batcher = PatchBatcher::new(samples, cfg.patch, cfg.batch, cfg.seed)?;
            let d = cfg.latent_dim;
            let mut ws = Workspace::new();
            for step in 0..cfg.steps {
                let batch = batcher.next_batch();
                zero_trainable(&mut weights, Stage::NoDiff);
                let mut loss = 0.0f64;
                let scale = 1.0f32 / (cfg.batch as f32 * d as f32);
                for (gt, comp, qp) in &batch {
                    let z_enc = prior_latent(&weights, gt, comp, *qp, &mut ws)?;
                    let comp_feat = plane_to_feat::<f32>(comp);
                    let reg = weights.regressor.as_mut().expect("regressor present");
                    let (z_hat, rtape) = reg.forward_t(&comp_feat, &mut ws);
                    let mut gout = vec![0.0f32; d];
                    let mut sse = 0.0f64;
                    for i in 0..d {
                        let diff = z_hat[i] - z_enc[i];
                        sse += (diff as f64) * (diff as f64);
                        gout[i] = 2.0 * diff * scale;
                    }
                    loss += sse / (cfg.batch as f64 * d as f64);
                    reg.backward(&rtape, &gout, &mut ws);
                }
                check_finite(loss, LossName::LEst, step + 1)?;
                adam.step_with(&mut weights, |m, v| visit_trainable(m, Stage::NoDiff, v));
                logger.log(step + 1, LossName::LEst, loss);
                let (epoch, pos) = batcher.state();
                let (adam_step, adam_m, adam_v) = adam.state();
                let st = TrainState {
                    step: (step + 1) as u64,
                    adam_step,
                    adam_m,
                    adam_v,
                    data_epoch: epoch,
                    data_pos: pos as u64,
                    noise_rng: [0u8; 56],
                };
                maybe_checkpoint(
                    opts.ckpt_dir.as_deref(),
                    cfg.checkpoint_every,
                    step + 1,
                    cfg.steps,
                    &mut weights,
                    &st,
                )?;
            }
            Ok(weights)
        }
        other => Err(Error::Config(format!(
            "train_ablation only handles noest/nodiff, got {}",
            other.as_str()
        ))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{build_dataset, write_synthetic_corpus};
    use crate::eval::{evaluate, Evaluatee};

    fn tiny_dataset(dir: &Path, images: usize) -> (DatasetManifest, DatasetManifest) {
        let corpus = dir.join("corpus");
        write_synthetic_corpus(&corpus, images, 48, 48, 11).unwrap();
        let codec = crate::codec::CodecConfig::default();
        build_dataset(&corpus, &[32, 42], &codec, &dir.join("ds"), 0.75, 5).unwrap()
    }

    fn tiny_cfg(stage: Stage, steps: usize) -> TrainConfig {
        TrainConfig {
            stage,
            steps,
            batch: 4,
            patch: 32,
            seed: 3,
            diffusion_steps: 16,
            latent_dim: 32,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn zero_step_stage1_is_identity_enhancement() {
        let dir = tempfile::tempdir().unwrap();
        let (train, val) = tiny_dataset(dir.path(), 4);
        let w = train_stage1(&tiny_cfg(Stage::Stage1, 0), &train, TrainOpts::default()).unwrap();
        // identity decoder: the NoEst path needs no estimator
        let mut w = w;
        w.variant = Variant::NoEst;
        let records = evaluate(Evaluatee::Model(&w), &val, 0).unwrap();
        assert!(!records.is_empty());
        for r in &records {
            assert_eq!(r.delta_psnr, 0.0, "{}", r.source_id);
        }
    }

    #[test]
    fn stage1_smoothed_loss_decreases() {
        let dir = tempfile::tempdir().unwrap();
        let (train, _) = tiny_dataset(dir.path(), 6);
        let mut entries = Vec::new();
        {
            let mut sink = |e: &LogEntry| entries.push(e.clone());
            let opts = TrainOpts { on_log: Some(&mut sink), ..TrainOpts::default() };
            train_stage1(&tiny_cfg(Stage::Stage1, 500), &train, opts).unwrap();
        }
        let rec: Vec<f64> = entries
            .iter()
            .filter(|e| e.loss_name == LossName::LRec)
            .map(|e| e.value)
            .collect();
        assert_eq!(rec.len(), 500);
        let head: f64 = rec[..50].iter().sum::<f64>() / 50.0;
        let tail: f64 = rec[450..].iter().sum::<f64>() / 50.0;
        assert!(tail < head, "smoothed loss did not decrease: {head} -> {tail}");
        assert!(rec.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn stage1_same_seed_same_final_loss() {
        let dir = tempfile::tempdir().unwrap();
        let (train, _) = tiny_dataset(dir.path(), 4);
        let run = || {
            let mut last = 0.0f64;
            let mut sink = |e: &LogEntry| last = e.value;
            let opts = TrainOpts { on_log: Some(&mut sink), ..TrainOpts::default() };
            let mut w = train_stage1(&tiny_cfg(Stage::Stage1, 40), &train, opts).unwrap();
            (last, w.params_digest())
        };
        let (l1, d1) = run();
        let (l2, d2) = run();
        assert_eq!(l1.to_bits(), l2.to_bits());
        assert_eq!(d1, d2);
    }

    #[test]
    fn resume_reproduces_uninterrupted_logs() {
        let dir = tempfile::tempdir().unwrap();
        let (train, _) = tiny_dataset(dir.path(), 4);
        let mut cfg = tiny_cfg(Stage::Stage1, 60);
        cfg.checkpoint_every = 30;
        let ckpt_a = dir.path().join("a");
        let mut full_log = Vec::new();
        {
            let mut sink = |e: &LogEntry| full_log.push((e.step, e.value));
            let opts = TrainOpts {
                ckpt_dir: Some(ckpt_a.clone()),
                resume: None,
                on_log: Some(&mut sink),
            };
            train_stage1(&cfg, &train, opts).unwrap();
        }
        let mut resumed_log = Vec::new();
        let mut final_w = {
            let mut sink = |e: &LogEntry| resumed_log.push((e.step, e.value));
            let opts = TrainOpts {
                ckpt_dir: None,
                resume: Some(ckpt_a.join("step_000030.ckpt")),
                on_log: Some(&mut sink),
            };
            train_stage1(&cfg, &train, opts).unwrap()
        };
        let tail: Vec<(usize, f64)> =
            full_log.iter().copied().filter(|(s, _)| *s > 30).collect();
        assert_eq!(tail.len(), resumed_log.len());
        for (a, b) in tail.iter().zip(&resumed_log) {
            assert_eq!(a.0, b.0);
            assert_eq!(a.1.to_bits(), b.1.to_bits(), "step {}", a.0);
        }
        // resumed weights equal the uninterrupted final checkpoint
        let (mut saved, _) =
            crate::model::checkpoint::load_checkpoint(&ckpt_a.join("final.ckpt")).unwrap();
        assert_eq!(saved.params_digest(), final_w.params_digest());
    }

    #[test]
    fn stage2_freezes_encoder_and_decoder() {
        let dir = tempfile::tempdir().unwrap();
        let (train, val) = tiny_dataset(dir.path(), 4);
        let mut stage1 =
            train_stage1(&tiny_cfg(Stage::Stage1, 10), &train, TrainOpts::default()).unwrap();
        let frozen_before = {
            let mut probe = stage1.clone();
            probe.estimator = None;
            probe.regressor = None;
            probe.params_digest()
        };
        let mut entries = Vec::new();
        let mut full = {
            let mut sink = |e: &LogEntry| entries.push(e.clone());
            let opts = TrainOpts { on_log: Some(&mut sink), ..TrainOpts::default() };
            train_stage2(&tiny_cfg(Stage::Stage2, 30), &train, &val, stage1.clone(), opts).unwrap()
        };
        let frozen_after = {
            let mut probe = full.clone();
            probe.estimator = None;
            probe.regressor = None;
            probe.params_digest()
        };
        assert_eq!(frozen_before, frozen_after);
        assert_eq!(full.variant, Variant::Full);
        assert!(full.estimator.is_some());
        // L_eps logged every step, L_est at the end
        assert!(entries.iter().filter(|e| e.loss_name == LossName::LEps).count() == 30);
        assert!(entries.iter().any(|e| e.loss_name == LossName::LEst));
        // stage2 rejects weights without the encoder
        let noenc = ModelWeights::noest(tiny_cfg(Stage::NoEst, 1).arch(), 0);
        assert!(train_stage2(&tiny_cfg(Stage::Stage2, 1), &train, &val, noenc, TrainOpts::default())
            .is_err());
        let _ = &mut stage1;
    }

    #[test]
    fn perfect_oracle_reaches_latent_target() {
        // Substituting the ideal noise estimate into the reverse chain must
        // drive the validation distance to (numerically) zero.
        let dir = tempfile::tempdir().unwrap();
        let (train, _) = tiny_dataset(dir.path(), 4);
        let cfg = tiny_cfg(Stage::Stage1, 5);
        let w = train_stage1(&cfg, &train, TrainOpts::default()).unwrap();
        let samples = load_samples(&train).unwrap();
        let schedule =
            NoiseSchedule::<f32>::linear(cfg.diffusion_steps, w.cfg.beta_start, w.cfg.beta_end)
                .unwrap();
        let mut ws = Workspace::new();
        let d = cfg.latent_dim;
        for s in samples.iter().take(3) {
            let z_enc = prior_latent(&w, &s.gt, &s.compressed, s.qp, &mut ws).unwrap();
            let target = z_enc.clone();
            let z_est = sample_latent(
                &[],
                d,
                |xt, _c, t| crate::diffusion::oracle_noise(xt, &target, t, &schedule),
                &schedule,
                9,
                SampleNoise::Stochastic,
            )
            .unwrap();
            let dist: f64 = z_est
                .iter()
                .zip(&z_enc)
                .map(|(&a, &b)| ((a - b) as f64) * ((a - b) as f64))
                .sum();
            assert!(dist < 1e-3 * d as f64, "oracle distance {dist}");
        }
    }

    #[test]
    fn timestep_draws_cover_the_chain() {
        let t_max = 16usize;
        let mut rng = ChaCha8Rng::seed_from_u64(0x0E5);
        let mut seen = vec![false; t_max + 1];
        for _ in 0..10 * t_max {
            let t = draw_timestep(&mut rng, t_max);
            assert!((1..=t_max).contains(&t));
            seen[t] = true;
        }
        assert!(seen[1..].iter().all(|&s| s), "uncovered timesteps: {seen:?}");
    }

    #[test]
    fn noest_output_ignores_conditioning_and_nodiff_is_deterministic() {
        let dir = tempfile::tempdir().unwrap();
        let (train, _) = tiny_dataset(dir.path(), 4);
        let cfg = tiny_cfg(Stage::NoEst, 5);
        let noest = train_ablation(Stage::NoEst, &cfg, &train, None, TrainOpts::default()).unwrap();
        let img = crate::dataset::synthetic_plane(32, 32, 42);
        // different seeds feed different latent draws; NoEst must not care
        let a = noest.enhance(&img, 1).unwrap();
        let b = noest.enhance(&img, 999).unwrap();
        assert_eq!(a.to_bytes(), b.to_bytes());
        assert!(a.data.iter().zip(&b.data).all(|(x, y)| x.to_bits() == y.to_bits()));

        let stage1 =
            train_stage1(&tiny_cfg(Stage::Stage1, 5), &train, TrainOpts::default()).unwrap();
        let cfg2 = tiny_cfg(Stage::NoDiff, 5);
        let nodiff =
            train_ablation(Stage::NoDiff, &cfg2, &train, Some(stage1), TrainOpts::default())
                .unwrap();
        let a = nodiff.enhance(&img, 1).unwrap();
        let b = nodiff.enhance(&img, 2).unwrap();
        assert!(a.data.iter().zip(&b.data).all(|(x, y)| x.to_bits() == y.to_bits()));
        // nodiff without stage-1 weights is rejected
        assert!(train_ablation(Stage::NoDiff, &cfg2, &train, None, TrainOpts::default()).is_err());
    }

    #[test]
    fn nonfinite_loss_aborts_with_step() {
        let err = check_finite(f64::NAN, LossName::LRec, 17).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("step 17") && msg.contains("L_rec"));
        assert!(check_finite(0.5, LossName::LEps, 1).is_ok());
    }
}
