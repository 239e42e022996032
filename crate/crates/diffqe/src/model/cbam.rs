//! Attention gate used at each decoder merge: a channel gate followed by a
//! spatial gate, both conditioned on the prior feature vector.
//!
//! Channel gate: sigmoid(MLP(avgpool F) + MLP(maxpool F) + proj(Z)), where the
//! two pooled branches share one C->C map and Z has its own d->C map.
//! Spatial gate: sigmoid(conv7x7(cat(mean_c F, max_c F, broadcast(proj1(Z))))).

use crate::nn::layers::{Conv2d, Linear};
use crate::nn::ops::*;
use crate::nn::{Feat, ParamVisitor, Workspace};
use crate::num::Scalar;
use rand_chacha::ChaCha8Rng;

#[derive(Debug, Clone)]
pub struct Cbam<F: Scalar> {
    pub channels: usize,
    pub z_dim: usize,
    pool_proj: Linear<F>,
    z_proj: Linear<F>,
    z_spatial: Linear<F>,
    spatial_conv: Conv2d<F>,
}

pub struct CbamTape<F: Scalar> {
    input: Feat<F>,
    z: Vec<F>,
    chan_avg: Vec<F>,
    chan_max: Vec<F>,
    chan_max_idx: Vec<usize>,
    channel_gate: Vec<F>,
    gated: Feat<F>,
    spatial_max_idx: Vec<u32>,
    cat: Feat<F>,
    spatial_gate: Vec<F>,
}

impl<F: Scalar> Cbam<F> {
    pub fn new(channels: usize, z_dim: usize) -> Self {
        Cbam {
            channels,
            z_dim,
            pool_proj: Linear::new(channels, channels),
            z_proj: Linear::new(z_dim, channels),
            z_spatial: Linear::new(z_dim, 1),
            spatial_conv: Conv2d::new(3, 1, 7),
        }
    }

    pub fn init(&mut self, rng: &mut ChaCha8Rng) {
        crate::nn::init::kaiming(&mut self.pool_proj.w.value, self.channels, rng);
        crate::nn::init::kaiming(&mut self.z_proj.w.value, self.z_dim, rng);
        crate::nn::init::kaiming(&mut self.z_spatial.w.value, self.z_dim, rng);
        crate::nn::init::kaiming(&mut self.spatial_conv.w.value, 3 * 49, rng);
    }

    /// Channel gate alone (diagnostic surface; the fused path uses forward_t).
    pub fn channel_gate(&self, f: &Feat<F>, z: &[F]) -> Vec<F> {
        let avg = global_avg_pool(f);
        let (mx, _) = global_max_pool(f);
        let mut g = self.pool_proj.forward(&avg);
        let gm = self.pool_proj.forward(&mx);
        let gz = self.z_proj.forward(z);
        for i in 0..g.len() {
            g[i] = g[i] + gm[i] + gz[i];
        }
        sigmoid(&mut g);
        g
    }

    /// Spatial gate over an already channel-gated map.
    pub fn spatial_gate(&self, fc: &Feat<F>, z: &[F], ws: &mut Workspace<F>) -> Vec<F> {
        let mean = channel_mean(fc);
        let (mx, _) = channel_max(fc);
        let zb = self.z_spatial.forward(z)[0];
        let mut cat = Feat::zeros(3, fc.h, fc.w);
        cat.plane_mut(0).copy_from_slice(&mean);
        cat.plane_mut(1).copy_from_slice(&mx);
        cat.plane_mut(2).iter_mut().for_each(|v| *v = zb);
        let mut s = self.spatial_conv.forward(&cat, ws);
        sigmoid(&mut s.data);
        s.data
    }

    pub fn forward(&self, f: &Feat<F>, z: &[F], ws: &mut Workspace<F>) -> Feat<F> {
        let (out, _) = self.forward_full(f, z, ws, false);
        out
    }

    pub fn forward_t(&self, f: &Feat<F>, z: &[F], ws: &mut Workspace<F>) -> (Feat<F>, CbamTape<F>) {
        let (out, tape) = self.forward_full(f, z, ws, true);
        (out, tape.expect("tape requested"))
    }

    fn forward_full(
        &self,
        f: &Feat<F>,
        z: &[F],
        ws: &mut Workspace<F>,
        keep: bool,
    ) -> (Feat<F>, Option<CbamTape<F>>) {
        assert_eq!(f.c, self.channels, "cbam channel count");
        assert_eq!(z.len(), self.z_dim, "cbam z length");
        let hw = f.h * f.w;
        // Channel gate.
        let avg = global_avg_pool(f);
        let (mx, mxi) = global_max_pool(f);
        let mut gate_c = self.pool_proj.forward(&avg);
        let gm = self.pool_proj.forward(&mx);
        let gz = self.z_proj.forward(z);
        for i in 0..gate_c.len() {
            gate_c[i] = gate_c[i] + gm[i] + gz[i];
        }
        sigmoid(&mut gate_c);
        let mut gated = f.clone();
        for c in 0..f.c {
            let g = gate_c[c];
            gated.plane_mut(c).iter_mut().for_each(|v| *v = *v * g);
        }
        // Spatial gate.
        let mean = channel_mean(&gated);
        let (smax, smax_idx) = channel_max(&gated);
        let zb = self.z_spatial.forward(z)[0];
        let mut cat = Feat::zeros(3, f.h, f.w);
        cat.plane_mut(0).copy_from_slice(&mean);
        cat.plane_mut(1).copy_from_slice(&smax);
        cat.plane_mut(2).iter_mut().for_each(|v| *v = zb);
        let mut s = self.spatial_conv.forward(&cat, ws);
        sigmoid(&mut s.data);
        let gate_s = s.data;
        let mut out = gated.clone();
        for c in 0..out.c {
            let p = out.plane_mut(c);
            for i in 0..hw {
                p[i] = p[i] * gate_s[i];
            }
        }
        let tape = if keep {
            Some(CbamTape {
                input: f.clone(),
                z: z.to_vec(),
                chan_avg: avg,
                chan_max: mx,
                chan_max_idx: mxi,
                channel_gate: gate_c,
                gated,
                spatial_max_idx: smax_idx,
                cat,
                spatial_gate: gate_s,
            })
        } else {
            None
        };
        (out, tape)
    }

    /// Returns (d/d input, d/d z), accumulating parameter gradients.
    pub fn backward(
        &mut self,
        tape: &CbamTape<F>,
        gout: &Feat<F>,
        ws: &mut Workspace<F>,
    ) -> (Feat<F>, Vec<F>) {
        let f = &tape.input;
        let hw = f.h * f.w;
        let c_inv = F::from_f64(1.0 / f.c as f64);
        let hw_inv = F::from_f64(1.0 / hw as f64);
        let mut gz = vec![F::zero(); self.z_dim];

        // Through out = gated * gate_s.
        let mut d_gate_s = vec![F::zero(); hw];
        let mut g_gated = Feat::zeros(f.c, f.h, f.w);
        for c in 0..f.c {
            let go = gout.plane(c);
            let gd = tape.gated.plane(c);
            let gg = g_gated.plane_mut(c);
            for i in 0..hw {
                d_gate_s[i] = d_gate_s[i] + go[i] * gd[i];
                gg[i] = go[i] * tape.spatial_gate[i];
            }
        }
        // Through the spatial gate.
        sigmoid_backward(&tape.spatial_gate, &mut d_gate_s);
        let ds = Feat::from_vec(1, f.h, f.w, d_gate_s);
        let gcat = self.spatial_conv.backward(&tape.cat, &ds, ws);
        let g_mean = gcat.plane(0);
        let g_smax = gcat.plane(1);
        let g_zb: F = gcat.plane(2).iter().copied().sum();
        for c in 0..f.c {
            let gg = g_gated.plane_mut(c);
            for i in 0..hw {
                gg[i] = gg[i] + g_mean[i] * c_inv;
            }
        }
        for i in 0..hw {
            let win = tape.spatial_max_idx[i] as usize;
            let gg = g_gated.plane_mut(win);
            gg[i] = gg[i] + g_smax[i];
        }
        let gz_s = self.z_spatial.backward(&tape.z, &[g_zb]);
        for (a, b) in gz.iter_mut().zip(&gz_s) {
            *a = *a + *b;
        }

        // Through gated = f * gate_c.
        let mut d_gate_c = vec![F::zero(); f.c];
        let mut gin = Feat::zeros(f.c, f.h, f.w);
        for c in 0..f.c {
            let gg = g_gated.plane(c);
            let fp = f.plane(c);
            let gi = gin.plane_mut(c);
            let mut acc = F::zero();
            for i in 0..hw {
                acc = acc + gg[i] * fp[i];
                gi[i] = gg[i] * tape.channel_gate[c];
            }
            d_gate_c[c] = acc;
        }
        sigmoid_backward(&tape.channel_gate, &mut d_gate_c);
        let g_avg = self.pool_proj.backward(&tape.chan_avg, &d_gate_c);
        let g_max = self.pool_proj.backward(&tape.chan_max, &d_gate_c);
        let gz_c = self.z_proj.backward(&tape.z, &d_gate_c);
        for (a, b) in gz.iter_mut().zip(&gz_c) {
            *a = *a + *b;
        }
        for c in 0..f.c {
            let gi = gin.plane_mut(c);
            let ga = g_avg[c] * hw_inv;
            for v in gi.iter_mut() {
                *v = *v + ga;
            }
            gi[tape.chan_max_idx[c]] = gi[tape.chan_max_idx[c]] + g_max[c];
        }
        (gin, gz)
    }

    pub fn visit(&mut self, prefix: &str, v: &mut dyn ParamVisitor<F>) {
        self.pool_proj.visit(&format!("{prefix}.pool_proj"), v);
        self.z_proj.visit(&format!("{prefix}.z_proj"), v);
        self.z_spatial.visit(&format!("{prefix}.z_spatial"), v);
        self.spatial_conv.visit(&format!("{prefix}.spatial_conv"), v);
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
    fn zero_weights_give_half_gates() {
        let cbam = Cbam::<f64>::new(2, 4);
        let f = rand_feat(2, 2, 2, 1);
        let z = vec![0.3; 4];
        let mut ws = Workspace::new();
        let gc = cbam.channel_gate(&f, &z);
        assert!(gc.iter().all(|&g| g == 0.5));
        let gs = cbam.spatial_gate(&f, &z, &mut ws);
        assert!(gs.iter().all(|&g| g == 0.5));
        // Fused output is then f / 4.
        let out = cbam.forward(&f, &z, &mut ws);
        for (o, x) in out.data.iter().zip(&f.data) {
            assert!((o - 0.25 * x).abs() < 1e-15);
        }
    }

    /// Brute-force re-derivation of both gate formulas with explicit loops.
    fn naive_gates(cbam: &Cbam<f64>, f: &Feat<f64>, z: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let hw = f.h * f.w;
        let c = f.c;
        let sig = |x: f64| 1.0 / (1.0 + (-x).exp());
        // channel gate
        let mut gate_c = vec![0.0; c];
        for ch in 0..c {
            let p = f.plane(ch);
            let avg: f64 = p.iter().sum::<f64>() / hw as f64;
            let mx = p.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            // shared C->C map applied to both pooled vectors
            let mut acc = 0.0;
            for j in 0..c {
                let pj = f.plane(j);
                let aj: f64 = pj.iter().sum::<f64>() / hw as f64;
                let mj = pj.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                acc += cbam.pool_proj.w.value[ch * c + j] * (aj + mj);
            }
            acc += 2.0 * cbam.pool_proj.b.value[ch];
            for (j, &zv) in z.iter().enumerate() {
                acc += cbam.z_proj.w.value[ch * z.len() + j] * zv;
            }
            acc += cbam.z_proj.b.value[ch];
            let _ = (avg, mx);
            gate_c[ch] = sig(acc);
        }
        // gated map, then spatial gate
        let zs: f64 = z
            .iter()
            .enumerate()
            .map(|(j, &zv)| cbam.z_spatial.w.value[j] * zv)
            .sum::<f64>()
            + cbam.z_spatial.b.value[0];
        let mut gate_s = vec![0.0; hw];
        for y in 0..f.h as isize {
            for x in 0..f.w as isize {
                let mut acc = cbam.spatial_conv.b.value[0];
                for ky in -3..=3isize {
                    for kx in -3..=3isize {
                        let sy = y + ky;
                        let sx = x + kx;
                        if sy < 0 || sy >= f.h as isize || sx < 0 || sx >= f.w as isize {
                            continue;
                        }
                        let i = sy as usize * f.w + sx as usize;
                        let mut mean = 0.0;
                        let mut mx = f64::NEG_INFINITY;
                        for ch in 0..c {
                            let v = f.plane(ch)[i] * gate_c[ch];
                            mean += v / c as f64;
                            mx = mx.max(v);
                        }
                        let widx = |ci: usize| ((ci * 7 + (ky + 3) as usize) * 7 + (kx + 3) as usize);
                        acc += cbam.spatial_conv.w.value[widx(0)] * mean;
                        acc += cbam.spatial_conv.w.value[widx(1)] * mx;
                        acc += cbam.spatial_conv.w.value[widx(2)] * zs;
                    }
                }
                gate_s[y as usize * f.w + x as usize] = sig(acc);
            }
        }
        (gate_c, gate_s)
    }

    #[test]
    fn gates_match_naive_reimplementation() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut cbam = Cbam::<f64>::new(2, 4);
        cbam.init(&mut rng);
        fill_std_normal(&mut rng, &mut cbam.pool_proj.b.value);
        fill_std_normal(&mut rng, &mut cbam.z_proj.b.value);
        fill_std_normal(&mut rng, &mut cbam.z_spatial.b.value);
        fill_std_normal(&mut rng, &mut cbam.spatial_conv.b.value);
        let f = rand_feat(2, 2, 2, 8);
        let mut z = vec![0.0; 4];
        fill_std_normal(&mut rng, &mut z);
        let mut ws = Workspace::new();
        let (want_c, want_s) = naive_gates(&cbam, &f, &z);
        let got_c = cbam.channel_gate(&f, &z);
        for (a, b) in got_c.iter().zip(&want_c) {
            assert!((a - b).abs() < 1e-6, "channel gate");
        }
        // spatial gate of the gated map
        let mut gated = f.clone();
        for c in 0..f.c {
            let g = got_c[c];
            gated.plane_mut(c).iter_mut().for_each(|v| *v *= g);
        }
        let got_s = cbam.spatial_gate(&gated, &z, &mut ws);
        for (a, b) in got_s.iter().zip(&want_s) {
            assert!((a - b).abs() < 1e-6, "spatial gate");
        }
        // gates strictly inside (0, 1)
        assert!(got_c.iter().chain(&got_s).all(|&g| g > 0.0 && g < 1.0));
    }

    #[test]
    fn scalar_case_closed_form() {
        // C=1, 1x1 spatial, identity-ish single weights: gate = sig(2f + z).
        let mut cbam = Cbam::<f64>::new(1, 1);
        cbam.pool_proj.w.value[0] = 1.0;
        cbam.z_proj.w.value[0] = 1.0;
        let f = Feat::from_vec(1, 1, 1, vec![0.0]);
        let z = vec![0.0];
        let g = cbam.channel_gate(&f, &z);
        assert_eq!(g[0], 0.5);
        let f2 = Feat::from_vec(1, 1, 1, vec![0.7]);
        let z2 = vec![-0.3];
        let g2 = cbam.channel_gate(&f2, &z2);
        let want = 1.0 / (1.0 + (-(2.0 * 0.7 - 0.3f64)).exp());
        assert!((g2[0] - want).abs() < 1e-12);
    }

    #[test]
    fn spatial_one_pixel_closed_form() {
        // 1x1 input: conv reduces to w . [avg, max, z_s] + b.
        let mut cbam = Cbam::<f64>::new(1, 2);
        let center = |ci: usize| (ci * 7 + 3) * 7 + 3;
        cbam.spatial_conv.w.value[center(0)] = 0.25;
        cbam.spatial_conv.w.value[center(1)] = -0.5;
        cbam.spatial_conv.w.value[center(2)] = 1.5;
        cbam.spatial_conv.b.value[0] = 0.1;
        cbam.z_spatial.w.value[0] = 2.0;
        cbam.z_spatial.w.value[1] = -1.0;
        let fc = Feat::from_vec(1, 1, 1, vec![0.6]);
        let z = vec![0.2, 0.4];
        let mut ws = Workspace::new();
        let g = cbam.spatial_gate(&fc, &z, &mut ws);
        let zs = 2.0 * 0.2 - 1.0 * 0.4;
        let want = 1.0 / (1.0 + (-(0.25 * 0.6 - 0.5 * 0.6 + 1.5 * zs + 0.1f64)).exp());
        assert!((g[0] - want).abs() < 1e-12);
    }

    #[test]
    fn spatial_gate_shape_follows_input() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut cbam = Cbam::<f64>::new(2, 4);
        cbam.init(&mut rng);
        let mut ws = Workspace::new();
        for s in [8usize, 16, 32] {
            let f = rand_feat(2, s, s, s as u64);
            let g = cbam.spatial_gate(&f, &[0.1, 0.2, 0.3, 0.4], &mut ws);
            assert_eq!(g.len(), s * s);
        }
    }

    #[test]
    fn gradients_match_finite_difference() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let mut cbam = Cbam::<f64>::new(3, 5);
        cbam.init(&mut rng);
        let f = rand_feat(3, 4, 4, 11);
        let mut z = vec![0.0; 5];
        fill_std_normal(&mut rng, &mut z);
        let r = rand_feat(3, 4, 4, 12);
        let mut ws = Workspace::new();
        let (_, tape) = cbam.forward_t(&f, &z, &mut ws);
        cbam.visit("c", &mut |_: &str, p: &mut crate::nn::Param<f64>| p.zero_grad());
        let (gin, gz) = cbam.backward(&tape, &r, &mut ws);
        // parameter grads
        let fc = f.clone();
        let zc = z.clone();
        let rc = r.clone();
        crate::nn::gradcheck::check(
            &mut cbam,
            |m, v| m.visit("c", v),
            move |m| {
                let mut w2 = Workspace::new();
                m.forward(&fc, &zc, &mut w2)
                    .data
                    .iter()
                    .zip(&rc.data)
                    .map(|(a, b)| a * b)
                    .sum()
            },
            3,
            1e-6,
            1e-3,
        );
        // input grads
        let eps = 1e-6;
        let loss = |m: &Cbam<f64>, ff: &Feat<f64>, zz: &[f64]| -> f64 {
            let mut w2 = Workspace::new();
            m.forward(ff, zz, &mut w2).data.iter().zip(&r.data).map(|(a, b)| a * b).sum()
        };
        for i in (0..f.data.len()).step_by(5) {
            let mut fp = f.clone();
            fp.data[i] += eps;
            let mut fm = f.clone();
            fm.data[i] -= eps;
            let fd = (loss(&cbam, &fp, &z) - loss(&cbam, &fm, &z)) / (2.0 * eps);
            assert!((fd - gin.data[i]).abs() < 1e-6, "input grad {i}: {fd} vs {}", gin.data[i]);
        }
        for i in 0..z.len() {
            let mut zp = z.clone();
            zp[i] += eps;
            let mut zm = z.clone();
            zm[i] -= eps;
            let fd = (loss(&cbam, &f, &zp) - loss(&cbam, &f, &zm)) / (2.0 * eps);
            assert!((fd - gz[i]).abs() < 1e-6, "z grad {i}: {fd} vs {}", gz[i]);
        }
    }
}
