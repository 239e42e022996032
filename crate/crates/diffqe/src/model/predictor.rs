//! Noise predictor for the latent estimator: a 4-layer MLP over the noised
//! latent, the condition vector, and a sinusoidal timestep embedding.

use crate::nn::layers::Linear;
use crate::nn::ops::{leaky_relu, leaky_relu_backward};
use crate::nn::ParamVisitor;
use crate::num::Scalar;
use rand_chacha::ChaCha8Rng;

/// Sinusoidal embedding of a timestep, length `dim` (even).
pub fn time_embedding<F: Scalar>(t: usize, dim: usize) -> Vec<F> {
    assert!(dim % 2 == 0, "time embedding dim must be even");
    let half = dim / 2;
    let mut out = Vec::with_capacity(dim);
    for i in 0..half {
        let freq = (10_000f64).powf(-(i as f64) / half as f64);
        let arg = t as f64 * freq;
        out.push(F::from_f64(arg.sin()));
        out.push(F::from_f64(arg.cos()));
    }
    out
}

#[derive(Debug, Clone)]
pub struct NoisePredictor<F: Scalar> {
    pub latent_dim: usize,
    pub cond_dim: usize,
    pub time_dim: usize,
    l1: Linear<F>,
    l2: Linear<F>,
    l3: Linear<F>,
    l4: Linear<F>,
}

pub struct PredictorTape<F: Scalar> {
    x: Vec<F>,
    a1: Vec<F>,
    a2: Vec<F>,
    a3: Vec<F>,
}

impl<F: Scalar> NoisePredictor<F> {
    pub fn new(latent_dim: usize, cond_dim: usize, time_dim: usize, hidden: usize) -> Self {
        let in_d = latent_dim + cond_dim + time_dim;
        NoisePredictor {
            latent_dim,
            cond_dim,
            time_dim,
            l1: Linear::new(in_d, hidden),
            l2: Linear::new(hidden, hidden),
            l3: Linear::new(hidden, hidden),
            l4: Linear::new(hidden, latent_dim),
        }
    }

    pub fn init(&mut self, rng: &mut ChaCha8Rng) {
        crate::nn::init::kaiming(&mut self.l1.w.value, self.l1.in_d, rng);
        crate::nn::init::kaiming(&mut self.l2.w.value, self.l2.in_d, rng);
        crate::nn::init::kaiming(&mut self.l3.w.value, self.l3.in_d, rng);
        crate::nn::init::kaiming(&mut self.l4.w.value, self.l4.in_d, rng);
    }

    fn assemble(&self, zt: &[F], cond: &[F], t: usize) -> Vec<F> {
        assert_eq!(zt.len(), self.latent_dim, "noised latent length");
        assert_eq!(cond.len(), self.cond_dim, "condition length");
        let mut x = Vec::with_capacity(zt.len() + cond.len() + self.time_dim);
        x.extend_from_slice(zt);
        x.extend_from_slice(cond);
        x.extend(time_embedding::<F>(t, self.time_dim));
        x
    }

    pub fn forward(&self, zt: &[F], cond: &[F], t: usize) -> Vec<F> {
        let x = self.assemble(zt, cond, t);
        let mut a1 = self.l1.forward(&x);
        leaky_relu(&mut a1);
        let mut a2 = self.l2.forward(&a1);
        leaky_relu(&mut a2);
        let mut a3 = self.l3.forward(&a2);
        leaky_relu(&mut a3);
        self.l4.forward(&a3)
    }

    pub fn forward_t(&self, zt: &[F], cond: &[F], t: usize) -> (Vec<F>, PredictorTape<F>) {
        let x = self.assemble(zt, cond, t);
        let mut a1 = self.l1.forward(&x);
        leaky_relu(&mut a1);
        let mut a2 = self.l2.forward(&a1);
        leaky_relu(&mut a2);
        let mut a3 = self.l3.forward(&a2);
        leaky_relu(&mut a3);
        let out = self.l4.forward(&a3);
        (out, PredictorTape { x, a1, a2, a3 })
    }

    /// Returns (d/d zt, d/d cond); the time embedding is constant per step.
    pub fn backward(&mut self, tape: &PredictorTape<F>, gout: &[F]) -> (Vec<F>, Vec<F>) {
        let mut g3 = self.l4.backward(&tape.a3, gout);
        leaky_relu_backward(&tape.a3, &mut g3);
        let mut g2 = self.l3.backward(&tape.a2, &g3);
        leaky_relu_backward(&tape.a2, &mut g2);
        let mut g1 = self.l2.backward(&tape.a1, &g2);
        leaky_relu_backward(&tape.a1, &mut g1);
        let gx = self.l1.backward(&tape.x, &g1);
        let gzt = gx[..self.latent_dim].to_vec();
        let gcond = gx[self.latent_dim..self.latent_dim + self.cond_dim].to_vec();
        (gzt, gcond)
    }

    pub fn visit(&mut self, prefix: &str, v: &mut dyn ParamVisitor<F>) {
        self.l1.visit(&format!("{prefix}.l1"), v);
        self.l2.visit(&format!("{prefix}.l2"), v);
        self.l3.visit(&format!("{prefix}.l3"), v);
        self.l4.visit(&format!("{prefix}.l4"), v);
    }
}
