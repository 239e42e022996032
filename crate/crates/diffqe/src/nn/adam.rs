//! Adaptive-moment optimizer with global gradient-norm clipping.
//!
//! Parameters are addressed through the visitor pattern: moment slots are
//! keyed by visit order, so a given training stage must always expose its
//! trainable parameters in the same sequence.

use super::{Param, ParamVisitor};
use crate::num::Scalar;

#[derive(Debug, Clone)]
pub struct Adam<F: Scalar> {
    pub lr: F,
    pub beta1: F,
    pub beta2: F,
    pub eps: F,
    pub clip_norm: F,
    pub step: u64,
    m: Vec<Vec<F>>,
    v: Vec<Vec<F>>,
}

impl<F: Scalar> Adam<F> {
    pub fn new(lr: f64) -> Self {
        Adam {
            lr: F::from_f64(lr),
            beta1: F::from_f64(0.9),
            beta2: F::from_f64(0.999),
            eps: F::from_f64(1e-8),
            clip_norm: F::from_f64(1.0),
            step: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    /// One update over every parameter exposed by `visit`, clipping the
    /// concatenated gradient to `clip_norm` first.
    pub fn step_with<M>(&mut self, model: &mut M, visit: impl Fn(&mut M, &mut dyn ParamVisitor<F>)) {
        if self.m.is_empty() {
            let m = &mut self.m;
            let v = &mut self.v;
            visit(model, &mut |_: &str, p: &mut Param<F>| {
                m.push(vec![F::zero(); p.len()]);
                v.push(vec![F::zero(); p.len()]);
            });
        }
        let mut sq = F::zero();
        visit(model, &mut |_: &str, p: &mut Param<F>| {
            sq = sq + p.grad.iter().map(|&g| g * g).sum::<F>();
        });
        let norm = sq.sqrt();
        let scale = if norm > self.clip_norm { self.clip_norm / norm } else { F::one() };
        self.step += 1;
        let t = self.step as i32;
        let bc1 = F::one() - self.beta1.powi(t);
        let bc2 = F::one() - self.beta2.powi(t);
        let one = F::one();
        let (lr, b1, b2, eps) = (self.lr, self.beta1, self.beta2, self.eps);
        let m = &mut self.m;
        let v = &mut self.v;
        let mut idx = 0usize;
        visit(model, &mut |_: &str, p: &mut Param<F>| {
            assert!(idx < m.len(), "optimizer slot count changed between steps");
            let ms = &mut m[idx];
            let vs = &mut v[idx];
            assert_eq!(ms.len(), p.len(), "parameter shape changed between steps");
            for j in 0..p.value.len() {
                let g = p.grad[j] * scale;
                ms[j] = b1 * ms[j] + (one - b1) * g;
                vs[j] = b2 * vs[j] + (one - b2) * g * g;
                let mh = ms[j] / bc1;
                let vh = vs[j] / bc2;
                p.value[j] = p.value[j] - lr * mh / (vh.sqrt() + eps);
            }
            idx += 1;
        });
        assert_eq!(idx, m.len(), "optimizer slot count changed between steps");
    }

    /// Flattened optimizer state for checkpointing, in slot order.
    pub fn state(&self) -> (u64, Vec<F>, Vec<F>) {
        let m: Vec<F> = self.m.iter().flatten().copied().collect();
        let v: Vec<F> = self.v.iter().flatten().copied().collect();
        (self.step, m, v)
    }

    /// Restore state captured by `state`; slot sizes come from `visit`.
    pub fn restore_with<M>(
        &mut self,
        step: u64,
        m: &[F],
        v: &[F],
        model: &mut M,
        visit: impl Fn(&mut M, &mut dyn ParamVisitor<F>),
    ) {
        self.step = step;
        self.m.clear();
        self.v.clear();
        let mut off = 0usize;
        let ms = &mut self.m;
        let vs = &mut self.v;
        visit(model, &mut |_: &str, p: &mut Param<F>| {
            ms.push(m[off..off + p.len()].to_vec());
            vs.push(v[off..off + p.len()].to_vec());
            off += p.len();
        });
        assert_eq!(off, m.len(), "optimizer state length mismatch");
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn visit_one(p: &mut Param<f64>, v: &mut dyn ParamVisitor<f64>) {
        v.visit("p", p);
    }

    #[test]
    fn descends_a_quadratic() {
        // min (x - 3)^2: gradient 2(x - 3).
        let mut p = Param::new(vec![0.0f64]);
        let mut opt = Adam::new(0.1);
        for _ in 0..500 {
            p.grad[0] = 2.0 * (p.value[0] - 3.0);
            opt.step_with(&mut p, visit_one);
        }
        assert!((p.value[0] - 3.0).abs() < 1e-2);
    }

    #[test]
    fn clips_large_gradients() {
        let mut p = Param::new(vec![0.0f64; 4]);
        let mut opt = Adam::new(1e-3);
        p.grad = vec![100.0; 4];
        opt.step_with(&mut p, visit_one);
        // First Adam step magnitude is bounded by lr regardless of scale.
        assert!(p.value.iter().all(|v| v.abs() <= 1.1e-3));
    }

    #[test]
    fn state_roundtrip_resumes_identically() {
        let mut p1 = Param::new(vec![0.5f64, -0.25]);
        let mut opt1 = Adam::new(0.01);
        for i in 0..10 {
            p1.grad = vec![(i as f64).sin(), (i as f64).cos()];
            opt1.step_with(&mut p1, visit_one);
        }
        let (step, m, v) = opt1.state();
        let mut p2 = p1.clone();
        let mut opt2 = Adam::new(0.01);
        opt2.restore_with(step, &m, &v, &mut p2, visit_one);
        for i in 10..20 {
            p1.grad = vec![(i as f64).sin(), (i as f64).cos()];
            p2.grad = p1.grad.clone();
            opt1.step_with(&mut p1, visit_one);
            opt2.step_with(&mut p2, visit_one);
            assert_eq!(p1.value, p2.value);
        }
    }
}
