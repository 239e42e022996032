//! Luminance planes and QP maps.
//!
//! Planes hold one luma channel as f32 in [0, 1], row-major. That matches the
//! 8-bit storage used on disk (values are k/255) and the range the networks
//! and the codec proxy are defined over.

use crate::error::{Error, Result};

pub const QP_MAX: u8 = 51;

#[derive(Debug, Clone, PartialEq)]
pub struct Plane {
    pub w: usize,
    pub h: usize,
    pub data: Vec<f32>,
}

impl Plane {
    pub fn new(w: usize, h: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != w * h {
            return Err(Error::Shape(format!(
                "plane data length {} does not match {}x{}",
                data.len(),
                w,
                h
            )));
        }
        Ok(Plane { w, h, data })
    }

    pub fn zeros(w: usize, h: usize) -> Self {
        Plane { w, h, data: vec![0.0; w * h] }
    }

    pub fn constant(w: usize, h: usize, v: f32) -> Self {
        Plane { w, h, data: vec![v; w * h] }
    }

    /// From 8-bit samples; values become k/255.
    pub fn from_bytes(w: usize, h: usize, bytes: &[u8]) -> Result<Self> {
        if bytes.len() != w * h {
            return Err(Error::Shape(format!(
                "byte length {} does not match {}x{}",
                bytes.len(),
                w,
                h
            )));
        }
        let data = bytes.iter().map(|&b| b as f32 / 255.0).collect();
        Ok(Plane { w, h, data })
    }

    /// To 8-bit samples, round-half-up after clamping to [0, 1].
    pub fn to_bytes(&self) -> Vec<u8> {
        self.data
            .iter()
            .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
            .collect()
    }

    pub fn same_dims(&self, other: &Plane) -> bool {
        self.w == other.w && self.h == other.h
    }

    #[inline]
    pub fn at(&self, x: usize, y: usize) -> f32 {
        self.data[y * self.w + x]
    }

    /// Clamp every sample into [0, 1] in place.
    pub fn clamp01(&mut self) {
        for v in self.data.iter_mut() {
            *v = v.clamp(0.0, 1.0);
        }
    }

    /// Copy the size x size window with top-left corner (x0, y0).
    pub fn crop(&self, x0: usize, y0: usize, cw: usize, ch: usize) -> Result<Plane> {
        if x0 + cw > self.w || y0 + ch > self.h {
            return Err(Error::Range(format!(
                "crop {}x{}+{}+{} exceeds plane {}x{}",
                cw, ch, x0, y0, self.w, self.h
            )));
        }
        let mut data = Vec::with_capacity(cw * ch);
        for y in y0..y0 + ch {
            data.extend_from_slice(&self.data[y * self.w + x0..y * self.w + x0 + cw]);
        }
        Ok(Plane { w: cw, h: ch, data })
    }

    /// Pad with edge replication to the given dimensions (right/bottom only).
    pub fn pad_to(&self, w: usize, h: usize) -> Plane {
        assert!(w >= self.w && h >= self.h);
        let mut out = Plane::zeros(w, h);
        for y in 0..h {
            let sy = y.min(self.h - 1);
            for x in 0..w {
                let sx = x.min(self.w - 1);
                out.data[y * w + x] = self.data[sy * self.w + sx];
            }
        }
        out
    }
}

/// Frame-constant quantization-parameter map. All entries equal qp/51.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QpMap {
    pub qp: u8,
    pub w: usize,
    pub h: usize,
}

impl QpMap {
    pub fn new(qp: u8, w: usize, h: usize) -> Result<Self> {
        if qp > QP_MAX {
            return Err(Error::Range(format!("qp {qp} exceeds {QP_MAX}")));
        }
        Ok(QpMap { qp, w, h })
    }

    /// The constant value carried by every entry.
    #[inline]
    pub fn value(&self) -> f32 {
        self.qp as f32 / QP_MAX as f32
    }

    /// Materialize as a full plane.
    pub fn to_plane(&self) -> Plane {
        Plane::constant(self.w, self.h, self.value())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn qpmap_extremes() {
        let m = QpMap::new(0, 4, 4).unwrap();
        assert!(m.to_plane().data.iter().all(|&v| v == 0.0));
        let m = QpMap::new(51, 4, 4).unwrap();
        assert!(m.to_plane().data.iter().all(|&v| v == 1.0));
        assert!(QpMap::new(52, 4, 4).is_err());
    }

    #[test]
    fn qpmap_37() {
        let m = QpMap::new(37, 4, 4).unwrap();
        let expect = 37.0f32 / 51.0;
        for v in m.to_plane().data {
            assert_eq!(v, expect);
        }
        assert!((m.value() - 0.725_490_2).abs() < 1e-6);
    }

    #[test]
    fn byte_roundtrip() {
        let bytes: Vec<u8> = (0..=255).collect();
        let p = Plane::from_bytes(16, 16, &bytes).unwrap();
        assert_eq!(p.to_bytes(), bytes);
    }

    #[test]
    fn crop_matches_direct_slice() {
        let p = Plane::new(4, 4, (0..16).map(|v| v as f32).collect()).unwrap();
        let c = p.crop(1, 2, 2, 2).unwrap();
        assert_eq!(c.data, vec![9.0, 10.0, 13.0, 14.0]);
        assert!(p.crop(3, 3, 2, 2).is_err());
    }

    #[test]
    fn pad_replicates_edges() {
        let p = Plane::new(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let q = p.pad_to(3, 3);
        assert_eq!(q.data, vec![1.0, 2.0, 2.0, 3.0, 4.0, 4.0, 3.0, 4.0, 4.0]);
    }
}
