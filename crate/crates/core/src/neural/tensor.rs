//! Minimal NCHW tensor and the scalar abstraction shared by the f32
//! training path and the f64 gradient checker.

use std::fmt::Debug;
use std::ops::{AddAssign, MulAssign, SubAssign};

use num_traits::Float;

pub trait Real: Float + AddAssign + SubAssign + MulAssign + Default + Debug + Send + Sync + 'static {
    /// `C ← α·A·B + β·C` on strided row/column layouts.
    ///
    /// # Safety
    /// Pointers and strides must describe valid, non-overlapping `m×k`,
    /// `k×n` and `m×n` matrices.
    #[allow(clippy::too_many_arguments)]
    unsafe fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        beta: Self,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    );

    fn from_f64(v: f64) -> Self {
        <Self as num_traits::NumCast>::from(v).expect("representable")
    }

    fn as_f64(self) -> f64 {
        self.to_f64().expect("finite cast")
    }
}

impl Real for f32 {
    unsafe fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: f32,
        a: *const f32,
        rsa: isize,
        csa: isize,
        b: *const f32,
        rsb: isize,
        csb: isize,
        beta: f32,
        c: *mut f32,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::sgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc);
    }
}

impl Real for f64 {
    unsafe fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: f64,
        a: *const f64,
        rsa: isize,
        csa: isize,
        b: *const f64,
        rsb: isize,
        csb: isize,
        beta: f64,
        c: *mut f64,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::dgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc);
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T> {
    /// `[batch, channels, height, width]`
    pub shape: [usize; 4],
    pub data: Vec<T>,
}

impl<T: Real> Tensor<T> {
    pub fn zeros(shape: [usize; 4]) -> Self {
        Self {
            shape,
            data: vec![T::zero(); shape.iter().product()],
        }
    }

    pub fn from_vec(shape: [usize; 4], data: Vec<T>) -> Self {
        assert_eq!(data.len(), shape.iter().product::<usize>(), "tensor data length");
        Self { shape, data }
    }

    pub fn batch(&self) -> usize {
        self.shape[0]
    }

    pub fn channels(&self) -> usize {
        self.shape[1]
    }

    pub fn height(&self) -> usize {
        self.shape[2]
    }

    pub fn width(&self) -> usize {
        self.shape[3]
    }

    pub fn plane(&self) -> usize {
        self.shape[2] * self.shape[3]
    }

    /// Elements of one batch item.
    pub fn item_len(&self) -> usize {
        self.shape[1] * self.plane()
    }

    pub fn item(&self, b: usize) -> &[T] {
        let n = self.item_len();
        &self.data[b * n..(b + 1) * n]
    }

    pub fn item_mut(&mut self, b: usize) -> &mut [T] {
        let n = self.item_len();
        &mut self.data[b * n..(b + 1) * n]
    }

    pub fn cast<U: Real>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape,
            data: self.data.iter().map(|v| U::from_f64(v.as_f64())).collect(),
        }
    }

    /// Channel-wise concatenation `[self, other]`.
    pub fn concat_channels(&self, other: &Tensor<T>) -> Tensor<T> {
        assert_eq!(self.shape[0], other.shape[0]);
        assert_eq!(self.shape[2..], other.shape[2..]);
        let shape = [self.shape[0], self.shape[1] + other.shape[1], self.shape[2], self.shape[3]];
        let mut data = Vec::with_capacity(shape.iter().product());
        for b in 0..self.shape[0] {
            data.extend_from_slice(self.item(b));
            data.extend_from_slice(other.item(b));
        }
        Tensor { shape, data }
    }

    /// Inverse of [`Tensor::concat_channels`].
    pub fn split_channels(&self, first: usize) -> (Tensor<T>, Tensor<T>) {
        let [n, c, h, w] = self.shape;
        let hw = h * w;
        let mut a = Tensor::zeros([n, first, h, w]);
        let mut b = Tensor::zeros([n, c - first, h, w]);
        for i in 0..n {
            let src = self.item(i);
            a.item_mut(i).copy_from_slice(&src[..first * hw]);
            b.item_mut(i).copy_from_slice(&src[first * hw..]);
        }
        (a, b)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}
