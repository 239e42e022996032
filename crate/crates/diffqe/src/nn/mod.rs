//! Minimal CPU network stack: CHW feature maps, layers with explicit
//! backward passes, and an adaptive-moment optimizer. No framework — the
//! models here are small enough that hand-rolled im2col + GEMM is both
//! faster to build and easier to verify with finite differences.

pub mod adam;
pub mod gradcheck;
pub mod init;
pub mod layers;
pub mod ops;

use crate::num::Scalar;

/// One sample's feature map, channel-major (CHW), contiguous.
#[derive(Debug, Clone, PartialEq)]
pub struct Feat<F: Scalar> {
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub data: Vec<F>,
}

impl<F: Scalar> Feat<F> {
    pub fn zeros(c: usize, h: usize, w: usize) -> Self {
        Feat { c, h, w, data: vec![F::zero(); c * h * w] }
    }

    pub fn from_vec(c: usize, h: usize, w: usize, data: Vec<F>) -> Self {
        assert_eq!(data.len(), c * h * w);
        Feat { c, h, w, data }
    }

    #[inline]
    pub fn plane(&self, ch: usize) -> &[F] {
        &self.data[ch * self.h * self.w..(ch + 1) * self.h * self.w]
    }

    #[inline]
    pub fn plane_mut(&mut self, ch: usize) -> &mut [F] {
        let hw = self.h * self.w;
        &mut self.data[ch * hw..(ch + 1) * hw]
    }

    pub fn same_shape(&self, other: &Feat<F>) -> bool {
        self.c == other.c && self.h == other.h && self.w == other.w
    }
}

/// A learnable tensor and its gradient accumulator.
#[derive(Debug, Clone)]
pub struct Param<F: Scalar> {
    pub value: Vec<F>,
    pub grad: Vec<F>,
}

impl<F: Scalar> Param<F> {
    pub fn new(value: Vec<F>) -> Self {
        let grad = vec![F::zero(); value.len()];
        Param { value, grad }
    }

    pub fn zeros(len: usize) -> Self {
        Param::new(vec![F::zero(); len])
    }

    pub fn zero_grad(&mut self) {
        self.grad.iter_mut().for_each(|g| *g = F::zero());
    }

    pub fn len(&self) -> usize {
        self.value.len()
    }

    pub fn is_empty(&self) -> bool {
        self.value.is_empty()
    }
}

/// Visitor over named parameters in a fixed, deterministic order.
///
/// The order defines the optimizer slot layout and the checkpoint tensor
/// names, so implementations must never reorder existing entries.
pub trait ParamVisitor<F: Scalar> {
    fn visit(&mut self, name: &str, p: &mut Param<F>);
}

impl<F: Scalar, T: FnMut(&str, &mut Param<F>)> ParamVisitor<F> for T {
    fn visit(&mut self, name: &str, p: &mut Param<F>) {
        self(name, p)
    }
}

/// Anything that owns parameters.
pub trait Parameterized<F: Scalar> {
    fn visit_params(&mut self, prefix: &str, v: &mut dyn ParamVisitor<F>);

    fn zero_grads(&mut self) {
        self.visit_params("", &mut |_: &str, p: &mut Param<F>| p.zero_grad());
    }

    fn param_count(&mut self) -> usize {
        let mut n = 0;
        self.visit_params("", &mut |_: &str, p: &mut Param<F>| n += p.len());
        n
    }
}

/// Reusable scratch buffers for im2col so the hot path does not allocate.
#[derive(Debug, Default)]
pub struct Workspace<F: Scalar> {
    pub col: Vec<F>,
    pub col_grad: Vec<F>,
}

impl<F: Scalar> Workspace<F> {
    pub fn new() -> Self {
        Workspace { col: Vec::new(), col_grad: Vec::new() }
    }
}
