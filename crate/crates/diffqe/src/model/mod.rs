//! The three networks and their composition: prior encoder, conditioned
//! residual UNet decoder, and the latent estimator (condition encoder +
//! noise predictor), plus the direct-regression variant used for ablation.

pub mod cbam;
pub mod checkpoint;
pub mod decoder;
pub mod encoder;
pub mod predictor;

use crate::diffusion::{sample_latent, NoiseSchedule, SampleNoise};
use crate::error::{Error, Result};
use crate::nn::layers::Linear;
use crate::nn::ops::{leaky_relu, leaky_relu_backward};
use crate::nn::{Feat, ParamVisitor, Workspace};
use crate::num::{all_finite, Scalar};
use crate::plane::{Plane, QpMap};
use decoder::Decoder;
use encoder::Encoder;
use predictor::NoisePredictor;
use rand_chacha::ChaCha8Rng;

/// Architecture hyperparameters. Echoed into checkpoints; loading a
/// checkpoint against a different config is rejected.
#[derive(Debug, Clone, PartialEq)]
pub struct ArchConfig {
    /// Prior latent length (d).
    pub latent_dim: usize,
    /// Condition vector length.
    pub cond_dim: usize,
    /// UNet base width; doubles at each of the three levels.
    pub base_width: usize,
    /// First-stage channel count of the feature encoders.
    pub enc_width: usize,
    /// Sinusoidal timestep embedding length.
    pub time_dim: usize,
    /// Hidden width of the noise-predictor MLP.
    pub mlp_hidden: usize,
    /// Reverse-chain step count used by the estimator.
    pub diffusion_steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
}

impl Default for ArchConfig {
    fn default() -> Self {
        ArchConfig {
            latent_dim: 256,
            cond_dim: 256,
            base_width: 32,
            enc_width: 32,
            time_dim: 64,
            mlp_hidden: 512,
            diffusion_steps: 100,
            beta_start: 1e-4,
            beta_end: 0.02,
        }
    }
}

impl ArchConfig {
    pub fn to_pairs(&self) -> Vec<(String, String)> {
        vec![
            ("latent_dim".into(), self.latent_dim.to_string()),
            ("cond_dim".into(), self.cond_dim.to_string()),
            ("base_width".into(), self.base_width.to_string()),
            ("enc_width".into(), self.enc_width.to_string()),
            ("time_dim".into(), self.time_dim.to_string()),
            ("mlp_hidden".into(), self.mlp_hidden.to_string()),
            ("diffusion_steps".into(), self.diffusion_steps.to_string()),
            ("beta_start".into(), self.beta_start.to_string()),
            ("beta_end".into(), self.beta_end.to_string()),
        ]
    }

    pub fn from_pairs(pairs: &[(String, String)]) -> Result<Self> {
        let mut cfg = ArchConfig::default();
        for (k, v) in pairs {
            let bad = || Error::Checkpoint(format!("bad config value for {k}: {v}"));
            match k.as_str() {
                "latent_dim" => cfg.latent_dim = v.parse().map_err(|_| bad())?,
                "cond_dim" => cfg.cond_dim = v.parse().map_err(|_| bad())?,
                "base_width" => cfg.base_width = v.parse().map_err(|_| bad())?,
                "enc_width" => cfg.enc_width = v.parse().map_err(|_| bad())?,
                "time_dim" => cfg.time_dim = v.parse().map_err(|_| bad())?,
                "mlp_hidden" => cfg.mlp_hidden = v.parse().map_err(|_| bad())?,
                "diffusion_steps" => cfg.diffusion_steps = v.parse().map_err(|_| bad())?,
                "beta_start" => cfg.beta_start = v.parse().map_err(|_| bad())?,
                "beta_end" => cfg.beta_end = v.parse().map_err(|_| bad())?,
                _ => {}
            }
        }
        Ok(cfg)
    }

    /// First key (in echo order) where the two configs disagree.
    pub fn first_difference(&self, other: &ArchConfig) -> Option<String> {
        let a = self.to_pairs();
        let b = other.to_pairs();
        for ((k, va), (_, vb)) in a.iter().zip(&b) {
            if va != vb {
                return Some(format!("{k}: {va} vs {vb}"));
            }
        }
        None
    }
}

/// Which model family a weight set belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Variant {
    /// Prior encoder + decoder + diffusion estimator.
    Full,
    /// Decoder trained with the conditioning vector fixed to zero.
    NoEst,
    /// Decoder fed by a direct latent regressor instead of the reverse chain.
    NoDiff,
}

impl Variant {
    pub fn as_str(&self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::NoEst => "noest",
            Variant::NoDiff => "nodiff",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "full" => Ok(Variant::Full),
            "noest" => Ok(Variant::NoEst),
            "nodiff" => Ok(Variant::NoDiff),
            _ => Err(Error::Config(format!("unknown variant: {s}"))),
        }
    }
}

/// Condition encoder + noise predictor (the trainable half of the estimator).
#[derive(Debug, Clone)]
pub struct Estimator<F: Scalar> {
    pub cond: Encoder<F>,
    pub predictor: NoisePredictor<F>,
}

impl<F: Scalar> Estimator<F> {
    pub fn new(cfg: &ArchConfig) -> Self {
        Estimator {
            cond: Encoder::new(1, cfg.enc_width, cfg.cond_dim),
            predictor: NoisePredictor::new(cfg.latent_dim, cfg.cond_dim, cfg.time_dim, cfg.mlp_hidden),
        }
    }

    pub fn init(&mut self, rng: &mut ChaCha8Rng) {
        self.cond.init(rng);
        self.predictor.init(rng);
    }

    pub fn visit(&mut self, prefix: &str, v: &mut dyn ParamVisitor<F>) {
        self.cond.visit(&format!("{prefix}.cond"), v);
        self.predictor.visit(&format!("{prefix}.pred"), v);
    }
}

/// Direct latent regressor: condition encoder + two-layer head.
#[derive(Debug, Clone)]
pub struct Regressor<F: Scalar> {
    pub cond: Encoder<F>,
    h1: Linear<F>,
    h2: Linear<F>,
}

pub struct RegressorTape<F: Scalar> {
    enc_tape: encoder::EncoderTape<F>,
    cvec: Vec<F>,
    a1: Vec<F>,
}

impl<F: Scalar> Regressor<F> {
    pub fn new(cfg: &ArchConfig) -> Self {
        Regressor {
            cond: Encoder::new(1, cfg.enc_width, cfg.cond_dim),
            h1: Linear::new(cfg.cond_dim, cfg.mlp_hidden),
            h2: Linear::new(cfg.mlp_hidden, cfg.latent_dim),
        }
    }

    pub fn init(&mut self, rng: &mut ChaCha8Rng) {
        self.cond.init(rng);
        crate::nn::init::kaiming(&mut self.h1.w.value, self.h1.in_d, rng);
        crate::nn::init::kaiming(&mut self.h2.w.value, self.h2.in_d, rng);
    }

    pub fn forward(&self, img: &Feat<F>, ws: &mut Workspace<F>) -> Vec<F> {
        let cvec = self.cond.forward(img, ws);
        let mut a1 = self.h1.forward(&cvec);
        leaky_relu(&mut a1);
        self.h2.forward(&a1)
    }

    pub fn forward_t(&self, img: &Feat<F>, ws: &mut Workspace<F>) -> (Vec<F>, RegressorTape<F>) {
        let (cvec, enc_tape) = self.cond.forward_t(img, ws);
        let mut a1 = self.h1.forward(&cvec);
        leaky_relu(&mut a1);
        let out = self.h2.forward(&a1);
        (out, RegressorTape { enc_tape, cvec, a1 })
    }

    pub fn backward(&mut self, tape: &RegressorTape<F>, gout: &[F], ws: &mut Workspace<F>) {
        let mut g1 = self.h2.backward(&tape.a1, gout);
        leaky_relu_backward(&tape.a1, &mut g1);
        let gc = self.h1.backward(&tape.cvec, &g1);
        self.cond.backward(&tape.enc_tape, &gc, ws);
    }

    pub fn visit(&mut self, prefix: &str, v: &mut dyn ParamVisitor<F>) {
        self.cond.visit(&format!("{prefix}.cond"), v);
        self.h1.visit(&format!("{prefix}.h1"), v);
        self.h2.visit(&format!("{prefix}.h2"), v);
    }
}

/// A complete, checkpointable weight set for one variant.
#[derive(Debug, Clone)]
pub struct ModelWeights<F: Scalar> {
    pub cfg: ArchConfig,
    pub variant: Variant,
    pub encoder: Option<Encoder<F>>,
    pub decoder: Decoder<F>,
    pub estimator: Option<Estimator<F>>,
    pub regressor: Option<Regressor<F>>,
}

impl<F: Scalar> ModelWeights<F> {
    /// Stage-1 skeleton: prior encoder + decoder, estimator absent.
    pub fn stage1(cfg: ArchConfig, seed: u64) -> Self {
        use rand::SeedableRng;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut encoder = Encoder::new(2, cfg.enc_width, cfg.latent_dim);
        encoder.init(&mut rng);
        let mut decoder = Decoder::new(cfg.base_width, cfg.latent_dim);
        decoder.init(&mut rng);
        ModelWeights { cfg, variant: Variant::Full, encoder: Some(encoder), decoder, estimator: None, regressor: None }
    }

    /// Ablation skeleton: decoder only, trained with zero conditioning.
    pub fn noest(cfg: ArchConfig, seed: u64) -> Self {
        use rand::SeedableRng;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut decoder = Decoder::new(cfg.base_width, cfg.latent_dim);
        decoder.init(&mut rng);
        ModelWeights { cfg, variant: Variant::NoEst, encoder: None, decoder, estimator: None, regressor: None }
    }

    pub fn sections(&self) -> Vec<&'static str> {
        let mut s = vec!["decoder"];
        if self.encoder.is_some() {
            s.push("encoder");
        }
        if self.estimator.is_some() {
            s.push("estimator");
        }
        if self.regressor.is_some() {
            s.push("regressor");
        }
        s.sort_unstable();
        s
    }

    pub fn visit_all(&mut self, v: &mut dyn ParamVisitor<F>) {
        if let Some(e) = self.encoder.as_mut() {
            e.visit("encoder", v);
        }
        self.decoder.visit("decoder", v);
        if let Some(e) = self.estimator.as_mut() {
            e.visit("estimator", v);
        }
        if let Some(r) = self.regressor.as_mut() {
            r.visit("regressor", v);
        }
    }

    /// Digest over every parameter's exact bits, by section and name.
    pub fn params_digest(&mut self) -> String {
        use sha2::{Digest, Sha256};
        let mut h = Sha256::new();
        self.visit_all(&mut |name: &str, p: &mut crate::nn::Param<F>| {
            h.update(name.as_bytes());
            for v in &p.value {
                h.update(v.to_f64_().to_le_bytes());
            }
        });
        let out = h.finalize();
        out.iter().map(|b| format!("{b:02x}")).collect()
    }

    /// Enhanced output for one compressed luma plane (inference path).
    ///
    /// Never looks at ground truth; the conditioning latent comes from the
    /// variant's own estimate. Output is clamped to [0, 1].
    pub fn enhance(&self, img: &Plane, seed: u64) -> Result<Plane> {
        let x = plane_to_feat::<F>(img);
        let z = match self.variant {
            Variant::Full => {
                let est = self.estimator.as_ref().ok_or_else(|| {
                    Error::Config("full-variant weights are missing the estimator".into())
                })?;
                if !Encoder::<F>::dims_ok(img.h, img.w) {
                    return Err(Error::Shape(format!(
                        "condition encoder needs dims divisible by 16, got {}x{}",
                        img.w, img.h
                    )));
                }
                let mut ws = Workspace::new();
                let cvec = est.cond.forward(&x, &mut ws);
                let schedule =
                    NoiseSchedule::<F>::linear(self.cfg.diffusion_steps, self.cfg.beta_start, self.cfg.beta_end)?;
                sample_latent(
                    &cvec,
                    self.cfg.latent_dim,
                    |xt, c, t| est.predictor.forward(xt, c, t),
                    &schedule,
                    seed,
                    SampleNoise::Stochastic,
                )?
            }
            Variant::NoEst => vec![F::zero(); self.cfg.latent_dim],
            Variant::NoDiff => {
                let reg = self.regressor.as_ref().ok_or_else(|| {
                    Error::Config("nodiff-variant weights are missing the regressor".into())
                })?;
                if !Encoder::<F>::dims_ok(img.h, img.w) {
                    return Err(Error::Shape(format!(
                        "condition encoder needs dims divisible by 16, got {}x{}",
                        img.w, img.h
                    )));
                }
                let mut ws = Workspace::new();
                reg.forward(&x, &mut ws)
            }
        };
        decode(&self.decoder, img, &z, true)
    }
}

/// Convert a plane into a single-channel feature map.
pub fn plane_to_feat<F: Scalar>(p: &Plane) -> Feat<F> {
    Feat::from_vec(1, p.h, p.w, p.data.iter().map(|&v| F::from_f64(v as f64)).collect())
}

/// Convert a single-channel feature map back to a plane.
pub fn feat_to_plane<F: Scalar>(f: &Feat<F>) -> Plane {
    assert_eq!(f.c, 1);
    Plane {
        w: f.w,
        h: f.h,
        data: f.data.iter().map(|&v| v.to_f64_() as f32).collect(),
    }
}

/// Two-channel encoder input: channel 0 is the compressed frame, channel 1
/// the ground truth with the normalized QP value added (unclamped).
pub fn compose_encoder_input<F: Scalar>(gt: &Plane, img: &Plane, qp: &QpMap) -> Result<Feat<F>> {
    if !gt.same_dims(img) || gt.w != qp.w || gt.h != qp.h {
        return Err(Error::Shape(format!(
            "encoder input dims differ: gt {}x{}, img {}x{}, qpmap {}x{}",
            gt.w, gt.h, img.w, img.h, qp.w, qp.h
        )));
    }
    let mut data = Vec::with_capacity(2 * gt.w * gt.h);
    data.extend(img.data.iter().map(|&v| F::from_f64(v as f64)));
    let q = qp.value() as f64;
    data.extend(gt.data.iter().map(|&v| F::from_f64(v as f64 + q)));
    Ok(Feat::from_vec(2, gt.h, gt.w, data))
}

/// Prior feature vector from (ground truth, compressed, QP map).
pub fn encode<F: Scalar>(
    enc: &Encoder<F>,
    gt: &Plane,
    img: &Plane,
    qp: &QpMap,
    ws: &mut Workspace<F>,
) -> Result<Vec<F>> {
    if !Encoder::<F>::dims_ok(gt.h, gt.w) {
        return Err(Error::Shape(format!(
            "encoder needs dims divisible by 16, got {}x{}",
            gt.w, gt.h
        )));
    }
    let x = compose_encoder_input::<F>(gt, img, qp)?;
    let z = enc.forward(&x, ws);
    if !all_finite(&z) {
        return Err(Error::NonFinite("prior encoder output".into()));
    }
    Ok(z)
}

/// Condition vector from the compressed frame alone.
pub fn encode_condition<F: Scalar>(enc: &Encoder<F>, img: &Plane, ws: &mut Workspace<F>) -> Result<Vec<F>> {
    if !Encoder::<F>::dims_ok(img.h, img.w) {
        return Err(Error::Shape(format!(
            "condition encoder needs dims divisible by 16, got {}x{}",
            img.w, img.h
        )));
    }
    let x = plane_to_feat::<F>(img);
    let z = enc.forward(&x, ws);
    if !all_finite(&z) {
        return Err(Error::NonFinite("condition encoder output".into()));
    }
    Ok(z)
}

/// Residual reconstruction: decoder output added to the compressed frame.
/// `clamp` selects the evaluation path ([0, 1] output).
pub fn decode<F: Scalar>(dec: &Decoder<F>, img: &Plane, z: &[F], clamp: bool) -> Result<Plane> {
    if !Decoder::<F>::dims_ok(img.h, img.w) {
        return Err(Error::Shape(format!(
            "decoder needs dims divisible by 8, got {}x{}",
            img.w, img.h
        )));
    }
    if z.len() != dec.z_dim {
        return Err(Error::Shape(format!(
            "conditioning length {} vs expected {}",
            z.len(),
            dec.z_dim
        )));
    }
    let x = plane_to_feat::<F>(img);
    let mut ws = Workspace::new();
    let out = dec.forward(&x, z, &mut ws);
    if !all_finite(&out.data) {
        return Err(Error::NonFinite("decoder output".into()));
    }
    let mut p = feat_to_plane(&out);
    if clamp {
        p.clamp01();
    }
    Ok(p)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn compose_matches_elementwise_oracle() {
        let gt = Plane::new(2, 2, vec![0.1, 0.2, 0.3, 0.4]).unwrap();
        let img = Plane::new(2, 2, vec![0.5, 0.6, 0.7, 0.8]).unwrap();
        let qp = QpMap::new(37, 2, 2).unwrap();
        let x = compose_encoder_input::<f64>(&gt, &img, &qp).unwrap();
        for i in 0..4 {
            assert_eq!(x.plane(0)[i], img.data[i] as f64);
            let want = gt.data[i] as f64 + (37.0f32 / 51.0) as f64;
            assert!((x.plane(1)[i] - want).abs() < 1e-12);
        }
    }

    #[test]
    fn compose_qp_extremes() {
        let gt = Plane::new(2, 2, vec![0.25; 4]).unwrap();
        let img = Plane::zeros(2, 2);
        let x = compose_encoder_input::<f64>(&gt, &img, &QpMap::new(0, 2, 2).unwrap()).unwrap();
        for i in 0..4 {
            assert_eq!(x.plane(1)[i], 0.25);
        }
        let gt0 = Plane::zeros(2, 2);
        let x = compose_encoder_input::<f64>(&gt0, &img, &QpMap::new(51, 2, 2).unwrap()).unwrap();
        for i in 0..4 {
            assert_eq!(x.plane(1)[i], 1.0);
        }
        let bad = Plane::zeros(3, 2);
        assert!(compose_encoder_input::<f64>(&bad, &img, &QpMap::new(0, 2, 2).unwrap()).is_err());
    }

    #[test]
    fn qp_perturbs_prior_vector() {
        use rand::SeedableRng;
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut enc = Encoder::<f64>::new(2, 8, 16);
        enc.init(&mut rng);
        let mut ws = Workspace::new();
        let gt = Plane::constant(32, 32, 0.4);
        let img = Plane::constant(32, 32, 0.35);
        let z27 = encode(&enc, &gt, &img, &QpMap::new(27, 32, 32).unwrap(), &mut ws).unwrap();
        let z42 = encode(&enc, &gt, &img, &QpMap::new(42, 32, 32).unwrap(), &mut ws).unwrap();
        let dist: f64 = z27.iter().zip(&z42).map(|(a, b)| (a - b) * (a - b)).sum();
        assert!(dist > 0.0);
    }

    #[test]
    fn distinct_qp_frames_give_distinct_condition() {
        use crate::codec::compress_proxy;
        use rand::SeedableRng;
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut enc = Encoder::<f64>::new(1, 8, 16);
        enc.init(&mut rng);
        let mut ws = Workspace::new();
        let img = crate::dataset::synthetic_plane(64, 64, 3);
        let a = compress_proxy(&img, 27, 8).unwrap();
        let b = compress_proxy(&img, 42, 8).unwrap();
        let ca = encode_condition(&enc, &a, &mut ws).unwrap();
        let cb = encode_condition(&enc, &b, &mut ws).unwrap();
        let dist: f64 = ca.iter().zip(&cb).map(|(x, y)| (x - y) * (x - y)).sum();
        assert!(dist > 0.0);
    }

    #[test]
    fn variant_roundtrip() {
        for v in [Variant::Full, Variant::NoEst, Variant::NoDiff] {
            assert_eq!(Variant::parse(v.as_str()).unwrap(), v);
        }
        assert!(Variant::parse("???").is_err());
    }

    #[test]
    fn config_first_difference_reports_key() {
        let a = ArchConfig::default();
        let mut b = a.clone();
        b.base_width = 16;
        let d = a.first_difference(&b).unwrap();
        assert!(d.starts_with("base_width"));
        assert!(a.first_difference(&a.clone()).is_none());
    }
}
