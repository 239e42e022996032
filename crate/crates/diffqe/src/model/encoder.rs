//! Feature-vector encoder: pixel shuffle, three conv+maxpool stages, global
//! average pooling, one linear head. The same backbone serves the prior
//! encoder (2 input channels: compressed + QP-offset ground truth) and the
//! condition encoder (compressed frame alone).

use crate::nn::layers::{Conv2d, Linear};
use crate::nn::ops::*;
use crate::nn::{Feat, ParamVisitor, Workspace};
use crate::num::Scalar;
use rand_chacha::ChaCha8Rng;

#[derive(Debug, Clone)]
pub struct Encoder<F: Scalar> {
    pub in_c: usize,
    pub out_dim: usize,
    conv1: Conv2d<F>,
    conv2: Conv2d<F>,
    conv3: Conv2d<F>,
    fc: Linear<F>,
}

/// Intermediate activations kept for the backward pass.
pub struct EncoderTape<F: Scalar> {
    x0: Feat<F>,
    a1: Feat<F>,
    p1: (Feat<F>, Vec<u8>),
    a2: Feat<F>,
    p2: (Feat<F>, Vec<u8>),
    a3: Feat<F>,
    p3_dims: (usize, usize, usize),
    p3_idx: Vec<u8>,
    gap: Vec<F>,
}

impl<F: Scalar> Encoder<F> {
    /// `width` is the first stage's channel count; stages double it.
    pub fn new(in_c: usize, width: usize, out_dim: usize) -> Self {
        Encoder {
            in_c,
            out_dim,
            conv1: Conv2d::new(in_c * 4, width, 3),
            conv2: Conv2d::new(width, width * 2, 3),
            conv3: Conv2d::new(width * 2, width * 4, 3),
            fc: Linear::new(width * 4, out_dim),
        }
    }

    pub fn init(&mut self, rng: &mut ChaCha8Rng) {
        crate::nn::init::kaiming(&mut self.conv1.w.value, self.in_c * 4 * 9, rng);
        crate::nn::init::kaiming(&mut self.conv2.w.value, self.conv2.in_c * 9, rng);
        crate::nn::init::kaiming(&mut self.conv3.w.value, self.conv3.in_c * 9, rng);
        crate::nn::init::kaiming(&mut self.fc.w.value, self.fc.in_d, rng);
    }

    /// Input dims must be divisible by 2 (shuffle) and then by 8 (pooling).
    pub fn dims_ok(h: usize, w: usize) -> bool {
        h % 16 == 0 && w % 16 == 0
    }

    pub fn forward(&self, x: &Feat<F>, ws: &mut Workspace<F>) -> Vec<F> {
        let (z, _) = self.forward_full(x, ws, false);
        z
    }

    pub fn forward_t(&self, x: &Feat<F>, ws: &mut Workspace<F>) -> (Vec<F>, EncoderTape<F>) {
        let (z, tape) = self.forward_full(x, ws, true);
        (z, tape.expect("tape requested"))
    }

    fn forward_full(
        &self,
        x: &Feat<F>,
        ws: &mut Workspace<F>,
        keep: bool,
    ) -> (Vec<F>, Option<EncoderTape<F>>) {
        assert_eq!(x.c, self.in_c, "encoder input channels");
        let x0 = space_to_depth2(x);
        let mut a1 = self.conv1.forward(&x0, ws);
        leaky_relu(&mut a1.data);
        let (p1, i1) = maxpool2(&a1);
        let mut a2 = self.conv2.forward(&p1, ws);
        leaky_relu(&mut a2.data);
        let (p2, i2) = maxpool2(&a2);
        let mut a3 = self.conv3.forward(&p2, ws);
        leaky_relu(&mut a3.data);
        let (p3, i3) = maxpool2(&a3);
        let gap = global_avg_pool(&p3);
        let z = self.fc.forward(&gap);
        let tape = if keep {
            Some(EncoderTape {
                p3_dims: (p3.c, p3.h, p3.w),
                p3_idx: i3,
                x0,
                a1,
                p1: (p1, i1),
                a2,
                p2: (p2, i2),
                a3,
                gap,
            })
        } else {
            None
        };
        (z, tape)
    }

    /// Accumulate parameter gradients from d(loss)/d(z).
    pub fn backward(&mut self, tape: &EncoderTape<F>, gz: &[F], ws: &mut Workspace<F>) {
        let ggap = self.fc.backward(&tape.gap, gz);
        let (c3, h3, w3) = tape.p3_dims;
        let gp3 = global_avg_pool_backward(&ggap, c3, h3, w3);
        let mut ga3 = maxpool2_backward(&gp3, &tape.p3_idx, tape.a3.h, tape.a3.w);
        leaky_relu_backward(&tape.a3.data, &mut ga3.data);
        let gp2 = self.conv3.backward(&tape.p2.0, &ga3, ws);
        let mut ga2 = maxpool2_backward(&gp2, &tape.p2.1, tape.a2.h, tape.a2.w);
        leaky_relu_backward(&tape.a2.data, &mut ga2.data);
        let gp1 = self.conv2.backward(&tape.p1.0, &ga2, ws);
        let mut ga1 = maxpool2_backward(&gp1, &tape.p1.1, tape.a1.h, tape.a1.w);
        leaky_relu_backward(&tape.a1.data, &mut ga1.data);
        let _gx0 = self.conv1.backward(&tape.x0, &ga1, ws);
    }

    pub fn visit(&mut self, prefix: &str, v: &mut dyn ParamVisitor<F>) {
        self.conv1.visit(&format!("{prefix}.conv1"), v);
        self.conv2.visit(&format!("{prefix}.conv2"), v);
        self.conv3.visit(&format!("{prefix}.conv3"), v);
        self.fc.visit(&format!("{prefix}.fc"), v);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::num::fill_std_normal;
    use rand::SeedableRng;

    fn rand_feat(c: usize, h: usize, w: usize, seed: u64) -> Feat<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut f = Feat::zeros(c, h, w);
        fill_std_normal(&mut rng, &mut f.data);
        f
    }

    #[test]
    fn output_length_is_size_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut enc = Encoder::<f64>::new(2, 8, 32);
        enc.init(&mut rng);
        let mut ws = Workspace::new();
        for (h, w) in [(64, 64), (128, 128), (32, 48)] {
            let x = rand_feat(2, h, w, h as u64);
            let z = enc.forward(&x, &mut ws);
            assert_eq!(z.len(), 32);
            assert!(z.iter().all(|v| v.is_finite()));
        }
    }

    #[test]
    fn zero_weights_zero_output() {
        let enc = Encoder::<f64>::new(1, 8, 16);
        let x = rand_feat(1, 32, 32, 2);
        let mut ws = Workspace::new();
        let z = enc.forward(&x, &mut ws);
        assert!(z.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn gradients_match_finite_difference() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut enc = Encoder::<f64>::new(2, 4, 6);
        enc.init(&mut rng);
        let x = rand_feat(2, 16, 16, 4);
        let mut r = vec![0.0; 6];
        fill_std_normal(&mut rng, &mut r);
        let mut ws = Workspace::new();
        let (_, tape) = enc.forward_t(&x, &mut ws);
        enc.visit("e", &mut |_: &str, p: &mut crate::nn::Param<f64>| p.zero_grad());
        enc.backward(&tape, &r, &mut ws);
        let loss = |e: &mut Encoder<f64>| -> f64 {
            let mut w2 = Workspace::new();
            e.forward(&x, &mut w2).iter().zip(&r).map(|(a, b)| a * b).sum()
        };
        let checked = crate::nn::gradcheck::check(
            &mut enc,
            |e, v| e.visit("e", v),
            loss,
            17,
            1e-5,
            1e-3,
        );
        assert!(checked > 50);
    }
}
