//! Conditional DDPM machinery over fixed-length latent vectors.
//!
//! The forward chain scales a latent toward pure Gaussian noise; the reverse
//! chain walks back one step at a time using a caller-supplied noise
//! predictor. Everything here is pure: randomness enters only through
//! explicit seeds or caller-supplied draws, so the same inputs always produce
//! the same outputs.

use crate::error::{Error, Result};
use crate::num::{all_finite, fill_std_normal, Scalar};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Precomputed per-timestep noising factors.
///
/// Index convention: timesteps are 1-based in the chain equations; vectors
/// are stored 0-based, so `betas[t - 1]` is the factor for step `t`.
#[derive(Debug, Clone)]
pub struct NoiseSchedule<F: Scalar> {
    steps: usize,
    betas: Vec<F>,
    alphas: Vec<F>,
    alpha_bars: Vec<F>,
    posterior_vars: Vec<F>,
}

impl<F: Scalar> NoiseSchedule<F> {
    /// Linear schedule from `beta_start` to `beta_end` inclusive.
    ///
    /// The cumulative products are accumulated in f64 regardless of `F`.
    pub fn linear(steps: usize, beta_start: f64, beta_end: f64) -> Result<Self> {
        if steps == 0 {
            return Err(Error::Range("schedule needs at least one timestep".into()));
        }
        if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
            return Err(Error::Range(format!(
                "betas must satisfy 0 < start <= end < 1, got {beta_start}..{beta_end}"
            )));
        }
        let mut betas = Vec::with_capacity(steps);
        let mut alphas = Vec::with_capacity(steps);
        let mut alpha_bars = Vec::with_capacity(steps);
        let mut posterior_vars = Vec::with_capacity(steps);
        let mut prod = 1.0f64;
        let mut prev_bar = 1.0f64;
        for i in 0..steps {
            let frac = if steps == 1 { 0.0 } else { i as f64 / (steps - 1) as f64 };
            let beta = beta_start + (beta_end - beta_start) * frac;
            let alpha = 1.0 - beta;
            prod *= alpha;
            // sigma_t^2 = beta_t (1 - abar_{t-1}) / (1 - abar_t); zero at t = 1.
            let post = beta * (1.0 - prev_bar) / (1.0 - prod);
            betas.push(F::from_f64(beta));
            alphas.push(F::from_f64(alpha));
            alpha_bars.push(F::from_f64(prod));
            posterior_vars.push(F::from_f64(post));
            prev_bar = prod;
        }
        Ok(NoiseSchedule { steps, betas, alphas, alpha_bars, posterior_vars })
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn betas(&self) -> &[F] {
        &self.betas
    }

    pub fn alphas(&self) -> &[F] {
        &self.alphas
    }

    pub fn alpha_bars(&self) -> &[F] {
        &self.alpha_bars
    }

    pub fn posterior_vars(&self) -> &[F] {
        &self.posterior_vars
    }

    fn check_t(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.steps {
            return Err(Error::Range(format!(
                "timestep {t} outside 1..={}",
                self.steps
            )));
        }
        Ok(())
    }

    /// Jump the clean latent `x0` directly to step `t` with the given draw:
    /// sqrt(abar_t) x0 + sqrt(1 - abar_t) eps.
    pub fn add_noise(&self, x0: &[F], t: usize, eps: &[F]) -> Result<Vec<F>> {
        self.check_t(t)?;
        if x0.len() != eps.len() {
            return Err(Error::Shape(format!(
                "latent length {} vs noise length {}",
                x0.len(),
                eps.len()
            )));
        }
        let ab = self.alpha_bars[t - 1];
        let signal = ab.sqrt();
        let noise = (F::one() - ab).sqrt();
        Ok(x0
            .iter()
            .zip(eps)
            .map(|(&x, &e)| signal * x + noise * e)
            .collect())
    }

    /// One reverse step from `xt` at step `t` using the noise estimate:
    /// mean = (xt - eps_hat * beta_t / sqrt(1 - abar_t)) / sqrt(alpha_t),
    /// then add sigma_t * z. No noise is ever added at t = 1.
    pub fn reverse_step(&self, xt: &[F], eps_hat: &[F], t: usize, z: &[F]) -> Result<Vec<F>> {
        self.check_t(t)?;
        if xt.len() != eps_hat.len() || xt.len() != z.len() {
            return Err(Error::Shape(format!(
                "reverse_step lengths differ: xt {}, eps_hat {}, z {}",
                xt.len(),
                eps_hat.len(),
                z.len()
            )));
        }
        let beta = self.betas[t - 1];
        let inv_sqrt_alpha = self.alphas[t - 1].sqrt().recip();
        let eps_coef = beta / (F::one() - self.alpha_bars[t - 1]).sqrt();
        let sigma = if t == 1 { F::zero() } else { self.posterior_vars[t - 1].sqrt() };
        Ok(xt
            .iter()
            .zip(eps_hat)
            .zip(z)
            .map(|((&x, &e), &n)| inv_sqrt_alpha * (x - eps_coef * e) + sigma * n)
            .collect())
    }
}

/// Squared L2 distance between a noise draw and its estimate.
pub fn noise_mse<F: Scalar>(eps: &[F], eps_hat: &[F]) -> Result<F> {
    if eps.len() != eps_hat.len() {
        return Err(Error::Shape(format!(
            "noise vectors differ in length: {} vs {}",
            eps.len(),
            eps_hat.len()
        )));
    }
    Ok(eps
        .iter()
        .zip(eps_hat)
        .map(|(&a, &b)| (a - b) * (a - b))
        .sum())
}

/// Whether the reverse walk injects the posterior noise or takes the mean.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SampleNoise {
    /// z ~ N(0, I) at every step except the last.
    Stochastic,
    /// z = 0: deterministic mean walk.
    MeanOnly,
}

/// Run the full reverse chain to produce a latent of length `d`.
///
/// `predict` receives (x_t, cond, t) and must return the noise estimate of
/// length `d`. The start point x_T and any injected z come from a ChaCha RNG
/// seeded with `seed`, so the result is a pure function of its arguments.
pub fn sample_latent<F, P>(
    cond: &[F],
    d: usize,
    mut predict: P,
    schedule: &NoiseSchedule<F>,
    seed: u64,
    noise: SampleNoise,
) -> Result<Vec<F>>
where
    F: Scalar,
    P: FnMut(&[F], &[F], usize) -> Vec<F>,
{
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut x = vec![F::zero(); d];
    fill_std_normal(&mut rng, &mut x);
    let mut z = vec![F::zero(); d];
    for t in (1..=schedule.steps()).rev() {
        let eps_hat = predict(&x, cond, t);
        if eps_hat.len() != d {
            return Err(Error::Shape(format!(
                "noise predictor returned length {} at timestep {t}, expected {d}",
                eps_hat.len()
            )));
        }
        if !all_finite(&eps_hat) {
            return Err(Error::NonFinite(format!(
                "noise predictor output at timestep {t}"
            )));
        }
        match noise {
            SampleNoise::Stochastic if t > 1 => fill_std_normal(&mut rng, &mut z),
            _ => z.iter_mut().for_each(|v| *v = F::zero()),
        }
        x = schedule.reverse_step(&x, &eps_hat, t, &z)?;
    }
    Ok(x)
}

/// The noise estimate a perfect predictor would return for a planted latent:
/// solve the forward jump for eps given x_t and the target.
pub fn oracle_noise<F: Scalar>(xt: &[F], target: &[F], t: usize, schedule: &NoiseSchedule<F>) -> Vec<F> {
    let ab = schedule.alpha_bars()[t - 1];
    let signal = ab.sqrt();
    let denom = (F::one() - ab).sqrt();
    xt.iter()
        .zip(target)
        .map(|(&x, &z)| (x - signal * z) / denom)
        .collect()
}
