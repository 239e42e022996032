//! Stateless feature-map primitives, each with a matching backward pass.

use super::Feat;
use crate::num::Scalar;

/// Leaky rectifier slope used throughout the models.
pub const LEAKY_SLOPE: f64 = 0.1;

pub fn leaky_relu<F: Scalar>(xs: &mut [F]) {
    let a = F::from_f64(LEAKY_SLOPE);
    for v in xs.iter_mut() {
        if *v < F::zero() {
            *v = *v * a;
        }
    }
}

/// Gradient through the leaky rectifier, recovered from the output sign
/// (the map is monotone, so sign(out) == sign(pre-activation)).
pub fn leaky_relu_backward<F: Scalar>(out: &[F], gout: &mut [F]) {
    let a = F::from_f64(LEAKY_SLOPE);
    for (g, &y) in gout.iter_mut().zip(out) {
        if y < F::zero() {
            *g = *g * a;
        }
    }
}

pub fn sigmoid<F: Scalar>(xs: &mut [F]) {
    for v in xs.iter_mut() {
        *v = F::one() / (F::one() + (-*v).exp());
    }
}

/// d/dx sigmoid from the output: y (1 - y).
pub fn sigmoid_backward<F: Scalar>(out: &[F], gout: &mut [F]) {
    for (g, &y) in gout.iter_mut().zip(out) {
        *g = *g * y * (F::one() - y);
    }
}

/// 2x2 max pooling, stride 2. Returns the pooled map and the winning corner
/// (0..4) per output cell for the backward scatter.
pub fn maxpool2<F: Scalar>(x: &Feat<F>) -> (Feat<F>, Vec<u8>) {
    assert!(x.h % 2 == 0 && x.w % 2 == 0, "maxpool2 needs even dims");
    let (oh, ow) = (x.h / 2, x.w / 2);
    let mut out = Feat::zeros(x.c, oh, ow);
    let mut idx = vec![0u8; x.c * oh * ow];
    for c in 0..x.c {
        let src = x.plane(c);
        let dst = out.plane_mut(c);
        for y in 0..oh {
            for xx in 0..ow {
                let base = 2 * y * x.w + 2 * xx;
                let cands = [src[base], src[base + 1], src[base + x.w], src[base + x.w + 1]];
                let mut best = 0u8;
                for k in 1..4 {
                    if cands[k as usize] > cands[best as usize] {
                        best = k;
                    }
                }
                dst[y * ow + xx] = cands[best as usize];
                idx[c * oh * ow + y * ow + xx] = best;
            }
        }
    }
    (out, idx)
}

pub fn maxpool2_backward<F: Scalar>(gout: &Feat<F>, idx: &[u8], in_h: usize, in_w: usize) -> Feat<F> {
    let mut gin = Feat::zeros(gout.c, in_h, in_w);
    let (oh, ow) = (gout.h, gout.w);
    for c in 0..gout.c {
        let g = gout.plane(c);
        let gi = gin.plane_mut(c);
        for y in 0..oh {
            for xx in 0..ow {
                let k = idx[c * oh * ow + y * ow + xx];
                let (dy, dx) = ((k / 2) as usize, (k % 2) as usize);
                gi[(2 * y + dy) * in_w + 2 * xx + dx] = gi[(2 * y + dy) * in_w + 2 * xx + dx]
                    + g[y * ow + xx];
            }
        }
    }
    gin
}

/// Spatial mean per channel.
pub fn global_avg_pool<F: Scalar>(x: &Feat<F>) -> Vec<F> {
    let inv = F::from_f64(1.0 / (x.h * x.w) as f64);
    (0..x.c)
        .map(|c| x.plane(c).iter().copied().sum::<F>() * inv)
        .collect()
}

pub fn global_avg_pool_backward<F: Scalar>(gout: &[F], c: usize, h: usize, w: usize) -> Feat<F> {
    let inv = F::from_f64(1.0 / (h * w) as f64);
    let mut gin = Feat::zeros(c, h, w);
    for ch in 0..c {
        let g = gout[ch] * inv;
        gin.plane_mut(ch).iter_mut().for_each(|v| *v = g);
    }
    gin
}

/// Spatial max per channel with flat argmax (first maximum wins).
pub fn global_max_pool<F: Scalar>(x: &Feat<F>) -> (Vec<F>, Vec<usize>) {
    let mut vals = Vec::with_capacity(x.c);
    let mut idxs = Vec::with_capacity(x.c);
    for c in 0..x.c {
        let p = x.plane(c);
        let mut bi = 0usize;
        for (i, &v) in p.iter().enumerate() {
            if v > p[bi] {
                bi = i;
            }
        }
        vals.push(p[bi]);
        idxs.push(bi);
    }
    (vals, idxs)
}

/// Mean over channels per pixel: C x H x W -> H x W.
pub fn channel_mean<F: Scalar>(x: &Feat<F>) -> Vec<F> {
    let hw = x.h * x.w;
    let mut out = vec![F::zero(); hw];
    for c in 0..x.c {
        let p = x.plane(c);
        for (o, &v) in out.iter_mut().zip(p) {
            *o = *o + v;
        }
    }
    let inv = F::from_f64(1.0 / x.c as f64);
    out.iter_mut().for_each(|v| *v = *v * inv);
    out
}

/// Max over channels per pixel with the winning channel per pixel.
pub fn channel_max<F: Scalar>(x: &Feat<F>) -> (Vec<F>, Vec<u32>) {
    let hw = x.h * x.w;
    let mut vals = x.plane(0).to_vec();
    let mut idxs = vec![0u32; hw];
    for c in 1..x.c {
        let p = x.plane(c);
        for i in 0..hw {
            if p[i] > vals[i] {
                vals[i] = p[i];
                idxs[i] = c as u32;
            }
        }
    }
    (vals, idxs)
}

/// Space-to-depth by factor 2: C x H x W -> 4C x H/2 x W/2.
pub fn space_to_depth2<F: Scalar>(x: &Feat<F>) -> Feat<F> {
    assert!(x.h % 2 == 0 && x.w % 2 == 0, "space_to_depth2 needs even dims");
    let (oh, ow) = (x.h / 2, x.w / 2);
    let mut out = Feat::zeros(x.c * 4, oh, ow);
    for c in 0..x.c {
        let src = x.plane(c);
        for dy in 0..2 {
            for dx in 0..2 {
                let dst = out.plane_mut(c * 4 + dy * 2 + dx);
                for y in 0..oh {
                    for xx in 0..ow {
                        dst[y * ow + xx] = src[(2 * y + dy) * x.w + 2 * xx + dx];
                    }
                }
            }
        }
    }
    out
}

pub fn space_to_depth2_backward<F: Scalar>(gout: &Feat<F>) -> Feat<F> {
    let c = gout.c / 4;
    let (ih, iw) = (gout.h * 2, gout.w * 2);
    let mut gin = Feat::zeros(c, ih, iw);
    for ch in 0..c {
        for dy in 0..2 {
            for dx in 0..2 {
                let src = gout.plane(ch * 4 + dy * 2 + dx);
                let dst = gin.plane_mut(ch);
                for y in 0..gout.h {
                    for xx in 0..gout.w {
                        dst[(2 * y + dy) * iw + 2 * xx + dx] = src[y * gout.w + xx];
                    }
                }
            }
        }
    }
    gin
}

/// Nearest-neighbour 2x upsampling.
pub fn upsample2<F: Scalar>(x: &Feat<F>) -> Feat<F> {
    let (oh, ow) = (x.h * 2, x.w * 2);
    let mut out = Feat::zeros(x.c, oh, ow);
    for c in 0..x.c {
        let src = x.plane(c);
        let dst = out.plane_mut(c);
        for y in 0..oh {
            let sy = y / 2;
            for xx in 0..ow {
                dst[y * ow + xx] = src[sy * x.w + xx / 2];
            }
        }
    }
    out
}

pub fn upsample2_backward<F: Scalar>(gout: &Feat<F>) -> Feat<F> {
    let (ih, iw) = (gout.h / 2, gout.w / 2);
    let mut gin = Feat::zeros(gout.c, ih, iw);
    for c in 0..gout.c {
        let g = gout.plane(c);
        let gi = gin.plane_mut(c);
        for y in 0..gout.h {
            let sy = y / 2;
            for xx in 0..gout.w {
                gi[sy * iw + xx / 2] = gi[sy * iw + xx / 2] + g[y * gout.w + xx];
            }
        }
    }
    gin
}

/// Channel-wise concatenation.
pub fn concat_channels<F: Scalar>(a: &Feat<F>, b: &Feat<F>) -> Feat<F> {
    assert!(a.h == b.h && a.w == b.w, "concat dims differ");
    let mut data = Vec::with_capacity((a.c + b.c) * a.h * a.w);
    data.extend_from_slice(&a.data);
    data.extend_from_slice(&b.data);
    Feat { c: a.c + b.c, h: a.h, w: a.w, data }
}

/// Split a gradient back into the two concatenated parts.
pub fn split_channels<F: Scalar>(g: &Feat<F>, ca: usize) -> (Feat<F>, Feat<F>) {
    let hw = g.h * g.w;
    let ga = Feat::from_vec(ca, g.h, g.w, g.data[..ca * hw].to_vec());
    let gb = Feat::from_vec(g.c - ca, g.h, g.w, g.data[ca * hw..].to_vec());
    (ga, gb)
}
