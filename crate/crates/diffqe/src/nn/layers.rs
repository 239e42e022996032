//! Convolution and linear layers (im2col + GEMM).

use super::{Feat, Param, ParamVisitor, Workspace};
use crate::num::Scalar;

/// Same-padding square convolution, stride 1.
///
/// Weights are stored [out_c, in_c * k * k] row-major so the forward pass is
/// a single GEMM against the im2col buffer.
#[derive(Debug, Clone)]
pub struct Conv2d<F: Scalar> {
    pub in_c: usize,
    pub out_c: usize,
    pub k: usize,
    pub w: Param<F>,
    pub b: Param<F>,
}

impl<F: Scalar> Conv2d<F> {
    pub fn new(in_c: usize, out_c: usize, k: usize) -> Self {
        assert!(k % 2 == 1, "kernel must be odd for same padding");
        Conv2d {
            in_c,
            out_c,
            k,
            w: Param::zeros(out_c * in_c * k * k),
            b: Param::zeros(out_c),
        }
    }

    fn pad(&self) -> usize {
        self.k / 2
    }

    /// Fill `col` with the [in_c*k*k, h*w] im2col matrix for `x`.
    fn im2col(&self, x: &Feat<F>, col: &mut Vec<F>) {
        let (h, w) = (x.h, x.w);
        let hw = h * w;
        let k = self.k;
        let pad = self.pad() as isize;
        col.clear();
        col.resize(self.in_c * k * k * hw, F::zero());
        for ci in 0..self.in_c {
            let src = x.plane(ci);
            for ky in 0..k {
                for kx in 0..k {
                    let row = &mut col[(ci * k * k + ky * k + kx) * hw..][..hw];
                    let dy = ky as isize - pad;
                    let dx = kx as isize - pad;
                    // Valid x range for this kernel offset (may be empty).
                    let x0 = (-dx).clamp(0, w as isize) as usize;
                    let x1 = (w as isize - dx).clamp(x0 as isize, w as isize) as usize;
                    for y in 0..h {
                        let sy = y as isize + dy;
                        let dst = &mut row[y * w..y * w + w];
                        if sy < 0 || sy >= h as isize {
                            dst.iter_mut().for_each(|v| *v = F::zero());
                            continue;
                        }
                        let srow = &src[sy as usize * w..sy as usize * w + w];
                        dst[..x0].iter_mut().for_each(|v| *v = F::zero());
                        dst[x1..].iter_mut().for_each(|v| *v = F::zero());
                        dst[x0..x1]
                            .copy_from_slice(&srow[(x0 as isize + dx) as usize..(x1 as isize + dx) as usize]);
                    }
                }
            }
        }
    }

    /// Scatter a column-space gradient back onto an input-shaped map.
    fn col2im_add(&self, colg: &[F], gin: &mut Feat<F>) {
        let (h, w) = (gin.h, gin.w);
        let hw = h * w;
        let k = self.k;
        let pad = self.pad() as isize;
        for ci in 0..self.in_c {
            let dst = gin.plane_mut(ci);
            for ky in 0..k {
                for kx in 0..k {
                    let row = &colg[(ci * k * k + ky * k + kx) * hw..][..hw];
                    let dy = ky as isize - pad;
                    let dx = kx as isize - pad;
                    let x0 = (-dx).clamp(0, w as isize) as usize;
                    let x1 = (w as isize - dx).clamp(x0 as isize, w as isize) as usize;
                    for y in 0..h {
                        let sy = y as isize + dy;
                        if sy < 0 || sy >= h as isize {
                            continue;
                        }
                        let drow = &mut dst[sy as usize * w..sy as usize * w + w];
                        let srow = &row[y * w..y * w + w];
                        for xx in x0..x1 {
                            let t = (xx as isize + dx) as usize;
                            drow[t] = drow[t] + srow[xx];
                        }
                    }
                }
            }
        }
    }

    pub fn forward(&self, x: &Feat<F>, ws: &mut Workspace<F>) -> Feat<F> {
        assert_eq!(x.c, self.in_c, "conv input channels");
        let hw = x.h * x.w;
        let kk = self.in_c * self.k * self.k;
        self.im2col(x, &mut ws.col);
        let mut out = Feat::zeros(self.out_c, x.h, x.w);
        F::gemm(self.out_c, kk, hw, F::one(), &self.w.value, &ws.col, F::zero(), &mut out.data);
        for co in 0..self.out_c {
            let b = self.b.value[co];
            out.plane_mut(co).iter_mut().for_each(|v| *v = *v + b);
        }
        out
    }

    /// Accumulates weight/bias gradients and returns the input gradient.
    pub fn backward(&mut self, x: &Feat<F>, gout: &Feat<F>, ws: &mut Workspace<F>) -> Feat<F> {
        let hw = x.h * x.w;
        let kk = self.in_c * self.k * self.k;
        self.im2col(x, &mut ws.col);
        // dW += gout [out_c, hw] x col^T [hw, kk]
        F::gemm_strided(
            self.out_c, hw, kk, F::one(),
            &gout.data, hw as isize, 1,
            &ws.col, 1, hw as isize,
            F::one(), &mut self.w.grad,
        );
        for co in 0..self.out_c {
            let s: F = gout.plane(co).iter().copied().sum();
            self.b.grad[co] = self.b.grad[co] + s;
        }
        // dcol = W^T [kk, out_c] x gout [out_c, hw]
        ws.col_grad.clear();
        ws.col_grad.resize(kk * hw, F::zero());
        F::gemm_strided(
            kk, self.out_c, hw, F::one(),
            &self.w.value, 1, kk as isize,
            &gout.data, hw as isize, 1,
            F::zero(), &mut ws.col_grad,
        );
        let mut gin = Feat::zeros(self.in_c, x.h, x.w);
        let colg = std::mem::take(&mut ws.col_grad);
        self.col2im_add(&colg, &mut gin);
        ws.col_grad = colg;
        gin
    }

    pub fn visit(&mut self, prefix: &str, v: &mut dyn ParamVisitor<F>) {
        v.visit(&format!("{prefix}.w"), &mut self.w);
        v.visit(&format!("{prefix}.b"), &mut self.b);
    }
}

/// Fully-connected layer over per-sample vectors. Weights [out, in].
#[derive(Debug, Clone)]
pub struct Linear<F: Scalar> {
    pub in_d: usize,
    pub out_d: usize,
    pub w: Param<F>,
    pub b: Param<F>,
}

impl<F: Scalar> Linear<F> {
    pub fn new(in_d: usize, out_d: usize) -> Self {
        Linear { in_d, out_d, w: Param::zeros(out_d * in_d), b: Param::zeros(out_d) }
    }

    pub fn forward(&self, x: &[F]) -> Vec<F> {
        assert_eq!(x.len(), self.in_d, "linear input length");
        let mut out = self.b.value.clone();
        F::gemm(self.out_d, self.in_d, 1, F::one(), &self.w.value, x, F::one(), &mut out);
        out
    }

    /// Accumulates gradients; returns d(loss)/d(input).
    pub fn backward(&mut self, x: &[F], gout: &[F]) -> Vec<F> {
        // dW += gout (out x 1) * x^T (1 x in)
        for (o, &g) in gout.iter().enumerate() {
            let row = &mut self.w.grad[o * self.in_d..(o + 1) * self.in_d];
            for (r, &xv) in row.iter_mut().zip(x) {
                *r = *r + g * xv;
            }
            self.b.grad[o] = self.b.grad[o] + g;
        }
        // dx = W^T gout
        let mut gin = vec![F::zero(); self.in_d];
        F::gemm_strided(
            self.in_d, self.out_d, 1, F::one(),
            &self.w.value, 1, self.in_d as isize,
            gout, 1, 1,
            F::zero(), &mut gin,
        );
        gin
    }

    pub fn visit(&mut self, prefix: &str, v: &mut dyn ParamVisitor<F>) {
        v.visit(&format!("{prefix}.w"), &mut self.w);
        v.visit(&format!("{prefix}.b"), &mut self.b);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::init;
    use crate::num::fill_std_normal;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rand_feat(c: usize, h: usize, w: usize, rng: &mut ChaCha8Rng) -> Feat<f64> {
        let mut f = Feat::zeros(c, h, w);
        fill_std_normal(rng, &mut f.data);
        f
    }

    /// Brute-force convolution for cross-checking the GEMM path.
    fn conv_naive(x: &Feat<f64>, conv: &Conv2d<f64>) -> Feat<f64> {
        let k = conv.k as isize;
        let pad = (conv.k / 2) as isize;
        let mut out = Feat::zeros(conv.out_c, x.h, x.w);
        for co in 0..conv.out_c {
            for y in 0..x.h as isize {
                for xx in 0..x.w as isize {
                    let mut acc = conv.b.value[co];
                    for ci in 0..conv.in_c {
                        for ky in 0..k {
                            for kx in 0..k {
                                let sy = y + ky - pad;
                                let sx = xx + kx - pad;
                                if sy < 0 || sy >= x.h as isize || sx < 0 || sx >= x.w as isize {
                                    continue;
                                }
                                let wv = conv.w.value
                                    [((co * conv.in_c + ci) * conv.k + ky as usize) * conv.k + kx as usize];
                                acc += wv * x.plane(ci)[sy as usize * x.w + sx as usize];
                            }
                        }
                    }
                    out.plane_mut(co)[y as usize * x.w + xx as usize] = acc;
                }
            }
        }
        out
    }

    #[test]
    fn conv_matches_naive() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for k in [1usize, 3, 7] {
            let mut conv = Conv2d::<f64>::new(3, 5, k);
            init::kaiming(&mut conv.w.value, 3 * k * k, &mut rng);
            fill_std_normal(&mut rng, &mut conv.b.value);
            let x = rand_feat(3, 6, 5, &mut rng);
            let mut ws = Workspace::new();
            let fast = conv.forward(&x, &mut ws);
            let slow = conv_naive(&x, &conv);
            for (a, b) in fast.data.iter().zip(&slow.data) {
                assert!((a - b).abs() < 1e-10, "k={k}");
            }
        }
    }

    #[test]
    fn conv_gradients_match_finite_difference() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut conv = Conv2d::<f64>::new(2, 3, 3);
        init::kaiming(&mut conv.w.value, 2 * 9, &mut rng);
        fill_std_normal(&mut rng, &mut conv.b.value);
        let x = rand_feat(2, 4, 4, &mut rng);
        let mut ws = Workspace::new();
        // Loss = sum(y * r) for a fixed random r, so dL/dy = r.
        let r = rand_feat(3, 4, 4, &mut rng);
        let gin = conv.backward(&x, &r, &mut ws);
        let loss = |c: &Conv2d<f64>, xx: &Feat<f64>| -> f64 {
            let mut w2 = Workspace::new();
            c.forward(xx, &mut w2).data.iter().zip(&r.data).map(|(a, b)| a * b).sum()
        };
        let eps = 1e-6;
        // input grads
        for i in (0..x.data.len()).step_by(5) {
            let mut xp = x.clone();
            xp.data[i] += eps;
            let mut xm = x.clone();
            xm.data[i] -= eps;
            let fd = (loss(&conv, &xp) - loss(&conv, &xm)) / (2.0 * eps);
            assert!((fd - gin.data[i]).abs() < 1e-6, "input grad {i}");
        }
        // weight grads
        for i in (0..conv.w.value.len()).step_by(11) {
            let mut cp = conv.clone();
            cp.w.value[i] += eps;
            let mut cm = conv.clone();
            cm.w.value[i] -= eps;
            let fd = (loss(&cp, &x) - loss(&cm, &x)) / (2.0 * eps);
            assert!((fd - conv.w.grad[i]).abs() < 1e-6, "weight grad {i}");
        }
        // bias grads
        for i in 0..3 {
            let mut cp = conv.clone();
            cp.b.value[i] += eps;
            let mut cm = conv.clone();
            cm.b.value[i] -= eps;
            let fd = (loss(&cp, &x) - loss(&cm, &x)) / (2.0 * eps);
            assert!((fd - conv.b.grad[i]).abs() < 1e-6, "bias grad {i}");
        }
    }

    #[test]
    fn linear_gradients_match_finite_difference() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut lin = Linear::<f64>::new(6, 4);
        init::kaiming(&mut lin.w.value, 6, &mut rng);
        fill_std_normal(&mut rng, &mut lin.b.value);
        let mut x = vec![0.0; 6];
        fill_std_normal(&mut rng, &mut x);
        let mut r = vec![0.0; 4];
        fill_std_normal(&mut rng, &mut r);
        let gin = lin.backward(&x, &r);
        let loss = |l: &Linear<f64>, xx: &[f64]| -> f64 {
            l.forward(xx).iter().zip(&r).map(|(a, b)| a * b).sum()
        };
        let eps = 1e-6;
        for i in 0..6 {
            let mut xp = x.clone();
            xp[i] += eps;
            let mut xm = x.clone();
            xm[i] -= eps;
            let fd = (loss(&lin, &xp) - loss(&lin, &xm)) / (2.0 * eps);
            assert!((fd - gin[i]).abs() < 1e-7);
        }
        for i in 0..lin.w.value.len() {
            let mut lp = lin.clone();
            lp.w.value[i] += eps;
            let mut lm = lin.clone();
            lm.w.value[i] -= eps;
            let fd = (loss(&lp, &x) - loss(&lm, &x)) / (2.0 * eps);
            assert!((fd - lin.w.grad[i]).abs() < 1e-7);
        }
    }

    #[test]
    fn zero_weights_give_zero_output() {
        let conv = Conv2d::<f64>::new(2, 3, 3);
        let x = Feat::from_vec(2, 4, 4, vec![1.0; 32]);
        let mut ws = Workspace::new();
        let y = conv.forward(&x, &mut ws);
        assert!(y.data.iter().all(|&v| v == 0.0));
    }
}
