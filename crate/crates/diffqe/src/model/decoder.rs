//! Residual UNet decoder conditioned on a feature vector.
//!
//! Three pooling levels, base width doubling per level. Each skip connection
//! passes through an attention gate conditioned on Z before it is merged with
//! the upsampled path. The head is zero-initialized so an untrained model is
//! exactly the identity enhancement.

use super::cbam::{Cbam, CbamTape};
use crate::nn::layers::Conv2d;
use crate::nn::ops::*;
use crate::nn::{Feat, ParamVisitor, Workspace};
use crate::num::Scalar;
use rand_chacha::ChaCha8Rng;

#[derive(Debug, Clone)]
pub struct Decoder<F: Scalar> {
    pub width: usize,
    pub z_dim: usize,
    stem: Conv2d<F>,
    down1: Conv2d<F>,
    down2: Conv2d<F>,
    bott: Conv2d<F>,
    reduce2: Conv2d<F>,
    reduce1: Conv2d<F>,
    reduce0: Conv2d<F>,
    gate2: Cbam<F>,
    gate1: Cbam<F>,
    gate0: Cbam<F>,
    merge2a: Conv2d<F>,
    merge2b: Conv2d<F>,
    merge1a: Conv2d<F>,
    merge1b: Conv2d<F>,
    merge0a: Conv2d<F>,
    merge0b: Conv2d<F>,
    head: Conv2d<F>,
}

pub struct DecoderTape<F: Scalar> {
    x: Feat<F>,
    e0: Feat<F>,
    p1: (Feat<F>, Vec<u8>),
    e1: Feat<F>,
    p2: (Feat<F>, Vec<u8>),
    e2: Feat<F>,
    p3: (Feat<F>, Vec<u8>),
    b: Feat<F>,
    levels: [LevelTape<F>; 3],
}

struct LevelTape<F: Scalar> {
    r: Feat<F>,
    gate: CbamTape<F>,
    cat: Feat<F>,
    m: Feat<F>,
    f: Feat<F>,
}

impl<F: Scalar> Decoder<F> {
    pub fn new(width: usize, z_dim: usize) -> Self {
        let w = width;
        Decoder {
            width: w,
            z_dim,
            stem: Conv2d::new(1, w, 3),
            down1: Conv2d::new(w, 2 * w, 3),
            down2: Conv2d::new(2 * w, 4 * w, 3),
            bott: Conv2d::new(4 * w, 8 * w, 3),
            reduce2: Conv2d::new(8 * w, 4 * w, 1),
            reduce1: Conv2d::new(4 * w, 2 * w, 1),
            reduce0: Conv2d::new(2 * w, w, 1),
            gate2: Cbam::new(4 * w, z_dim),
            gate1: Cbam::new(2 * w, z_dim),
            gate0: Cbam::new(w, z_dim),
            merge2a: Conv2d::new(8 * w, 4 * w, 1),
            merge2b: Conv2d::new(4 * w, 4 * w, 3),
            merge1a: Conv2d::new(4 * w, 2 * w, 1),
            merge1b: Conv2d::new(2 * w, 2 * w, 3),
            merge0a: Conv2d::new(2 * w, w, 1),
            merge0b: Conv2d::new(w, w, 3),
            head: Conv2d::new(w, 1, 3),
        }
    }

    /// Kaiming everywhere except the head, which stays zero.
    pub fn init(&mut self, rng: &mut ChaCha8Rng) {
        let mut f = |c: &mut Conv2d<F>| {
            let fan = c.in_c * c.k * c.k;
            crate::nn::init::kaiming(&mut c.w.value, fan, rng);
        };
        f(&mut self.stem);
        f(&mut self.down1);
        f(&mut self.down2);
        f(&mut self.bott);
        f(&mut self.reduce2);
        f(&mut self.reduce1);
        f(&mut self.reduce0);
        f(&mut self.merge2a);
        f(&mut self.merge2b);
        f(&mut self.merge1a);
        f(&mut self.merge1b);
        f(&mut self.merge0a);
        f(&mut self.merge0b);
        self.gate2.init(rng);
        self.gate1.init(rng);
        self.gate0.init(rng);
        // head left at zero
    }

    pub fn dims_ok(h: usize, w: usize) -> bool {
        h % 8 == 0 && w % 8 == 0 && h >= 8 && w >= 8
    }

    pub fn forward(&self, x: &Feat<F>, z: &[F], ws: &mut Workspace<F>) -> Feat<F> {
        let (out, _) = self.forward_full(x, z, ws, false);
        out
    }

    pub fn forward_t(&self, x: &Feat<F>, z: &[F], ws: &mut Workspace<F>) -> (Feat<F>, DecoderTape<F>) {
        let (out, tape) = self.forward_full(x, z, ws, true);
        (out, tape.expect("tape requested"))
    }

    fn forward_full(
        &self,
        x: &Feat<F>,
        z: &[F],
        ws: &mut Workspace<F>,
        keep: bool,
    ) -> (Feat<F>, Option<DecoderTape<F>>) {
        assert_eq!(x.c, 1, "decoder takes a single luma channel");
        assert!(Self::dims_ok(x.h, x.w), "decoder dims must be multiples of 8");
        assert_eq!(z.len(), self.z_dim, "conditioning vector length");
        let mut e0 = self.stem.forward(x, ws);
        leaky_relu(&mut e0.data);
        let (p1v, p1i) = maxpool2(&e0);
        let mut e1 = self.down1.forward(&p1v, ws);
        leaky_relu(&mut e1.data);
        let (p2v, p2i) = maxpool2(&e1);
        let mut e2 = self.down2.forward(&p2v, ws);
        leaky_relu(&mut e2.data);
        let (p3v, p3i) = maxpool2(&e2);
        let mut b = self.bott.forward(&p3v, ws);
        leaky_relu(&mut b.data);

        let run_level = |inp: &Feat<F>,
                             skip: &Feat<F>,
                             reduce: &Conv2d<F>,
                             gate: &Cbam<F>,
                             ma: &Conv2d<F>,
                             mb: &Conv2d<F>,
                             ws: &mut Workspace<F>|
         -> (Feat<F>, Option<LevelTape<F>>) {
            let mut r = reduce.forward(inp, ws);
            leaky_relu(&mut r.data);
            let up = upsample2(&r);
            let (gated, gtape) = if keep {
                let (g, t) = gate.forward_t(skip, z, ws);
                (g, Some(t))
            } else {
                (gate.forward(skip, z, ws), None)
            };
            let cat = concat_channels(&up, &gated);
            let mut m = ma.forward(&cat, ws);
            leaky_relu(&mut m.data);
            let mut f = mb.forward(&m, ws);
            leaky_relu(&mut f.data);
            let tape = gtape.map(|gate| LevelTape { r, gate, cat, m, f: f.clone() });
            (f, tape)
        };

        let (f2, t2) = run_level(&b, &e2, &self.reduce2, &self.gate2, &self.merge2a, &self.merge2b, ws);
        let (f1, t1) = run_level(&f2, &e1, &self.reduce1, &self.gate1, &self.merge1a, &self.merge1b, ws);
        let (f0, t0) = run_level(&f1, &e0, &self.reduce0, &self.gate0, &self.merge0a, &self.merge0b, ws);
        let res = self.head.forward(&f0, ws);
        let mut out = res;
        for (o, &xi) in out.data.iter_mut().zip(&x.data) {
            *o = *o + xi;
        }
        let tape = if keep {
            Some(DecoderTape {
                x: x.clone(),
                e0,
                p1: (p1v, p1i),
                e1,
                p2: (p2v, p2i),
                e2,
                p3: (p3v, p3i),
                b,
                levels: [t2.unwrap(), t1.unwrap(), t0.unwrap()],
            })
        } else {
            None
        };
        (out, tape)
    }

    /// Backprop from d(loss)/d(output). Returns d(loss)/d(z); parameter
    /// gradients accumulate in place. The input is data, so its gradient is
    /// not materialized.
    pub fn backward(&mut self, tape: &DecoderTape<F>, gout: &Feat<F>, ws: &mut Workspace<F>) -> Vec<F> {
        let mut gz = vec![F::zero(); self.z_dim];
        // out = x + head(f0): residual add passes gout straight to the head.
        let gf = self.head.backward(&tape.levels[2].f, gout, ws);

        // Walks one merge level backward up to (but not including) the reduce
        // conv, whose input lives one level deeper.
        let back_level = |t: &LevelTape<F>,
                          gate: &mut Cbam<F>,
                          ma: &mut Conv2d<F>,
                          mb: &mut Conv2d<F>,
                          gf: Feat<F>,
                          gz: &mut Vec<F>,
                          ws: &mut Workspace<F>|
         -> (Feat<F>, Feat<F>) {
            let mut gf = gf;
            leaky_relu_backward(&t.f.data, &mut gf.data);
            let mut gm = mb.backward(&t.m, &gf, ws);
            leaky_relu_backward(&t.m.data, &mut gm.data);
            let gcat = ma.backward(&t.cat, &gm, ws);
            let up_c = t.cat.c - gate.channels;
            let (gup, ggated) = split_channels(&gcat, up_c);
            let (gskip, gz_part) = gate.backward(&t.gate, &ggated, ws);
            for (a, b) in gz.iter_mut().zip(&gz_part) {
                *a = *a + *b;
            }
            let mut gr = upsample2_backward(&gup);
            leaky_relu_backward(&t.r.data, &mut gr.data);
            (gr, gskip)
        };

        // level 0 (full res)
        let (gr0, gskip0) = back_level(
            &tape.levels[2], &mut self.gate0, &mut self.merge0a, &mut self.merge0b,
            gf, &mut gz, ws,
        );
        let gf1 = self.reduce0.backward(&tape.levels[1].f, &gr0, ws);
        // level 1
        let (gr1, gskip1) = back_level(
            &tape.levels[1], &mut self.gate1, &mut self.merge1a, &mut self.merge1b,
            gf1, &mut gz, ws,
        );
        let gf2 = self.reduce1.backward(&tape.levels[0].f, &gr1, ws);
        // level 2
        let (gr2, gskip2) = back_level(
            &tape.levels[0], &mut self.gate2, &mut self.merge2a, &mut self.merge2b,
            gf2, &mut gz, ws,
        );
        let mut gb = self.reduce2.backward(&tape.b, &gr2, ws);

        // down path
        leaky_relu_backward(&tape.b.data, &mut gb.data);
        let gp3 = self.bott.backward(&tape.p3.0, &gb, ws);
        let mut ge2 = maxpool2_backward(&gp3, &tape.p3.1, tape.e2.h, tape.e2.w);
        for (a, b) in ge2.data.iter_mut().zip(&gskip2.data) {
            *a = *a + *b;
        }
        leaky_relu_backward(&tape.e2.data, &mut ge2.data);
        let gp2 = self.down2.backward(&tape.p2.0, &ge2, ws);
        let mut ge1 = maxpool2_backward(&gp2, &tape.p2.1, tape.e1.h, tape.e1.w);
        for (a, b) in ge1.data.iter_mut().zip(&gskip1.data) {
            *a = *a + *b;
        }
        leaky_relu_backward(&tape.e1.data, &mut ge1.data);
        let gp1 = self.down1.backward(&tape.p1.0, &ge1, ws);
        let mut ge0 = maxpool2_backward(&gp1, &tape.p1.1, tape.e0.h, tape.e0.w);
        for (a, b) in ge0.data.iter_mut().zip(&gskip0.data) {
            *a = *a + *b;
        }
        leaky_relu_backward(&tape.e0.data, &mut ge0.data);
        let _gx = self.stem.backward(&tape.x, &ge0, ws);
        gz
    }

    pub fn visit(&mut self, prefix: &str, v: &mut dyn ParamVisitor<F>) {
        self.stem.visit(&format!("{prefix}.stem"), v);
        self.down1.visit(&format!("{prefix}.down1"), v);
        self.down2.visit(&format!("{prefix}.down2"), v);
        self.bott.visit(&format!("{prefix}.bott"), v);
        self.reduce2.visit(&format!("{prefix}.reduce2"), v);
        self.reduce1.visit(&format!("{prefix}.reduce1"), v);
        self.reduce0.visit(&format!("{prefix}.reduce0"), v);
        self.gate2.visit(&format!("{prefix}.gate2"), v);
        self.gate1.visit(&format!("{prefix}.gate1"), v);
        self.gate0.visit(&format!("{prefix}.gate0"), v);
        self.merge2a.visit(&format!("{prefix}.merge2a"), v);
        self.merge2b.visit(&format!("{prefix}.merge2b"), v);
        self.merge1a.visit(&format!("{prefix}.merge1a"), v);
        self.merge1b.visit(&format!("{prefix}.merge1b"), v);
        self.merge0a.visit(&format!("{prefix}.merge0a"), v);
        self.merge0b.visit(&format!("{prefix}.merge0b"), v);
        self.head.visit(&format!("{prefix}.head"), v);
    }
}
