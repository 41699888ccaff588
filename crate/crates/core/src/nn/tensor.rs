use std::fmt::Debug;

use num_traits::Float;

use crate::error::{Error, Result};

/// Element type of tensors: `f32` for training, `f64` for gradient checks.
pub trait Scalar: Float + Default + Debug + Send + Sync + 'static {
    /// `C <- alpha * A * B + beta * C` on strided matrices.
    ///
    /// # Safety
    /// Every addressed element must lie inside the respective allocation.
    #[allow(clippy::too_many_arguments)]
    unsafe fn gemm_raw(
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
        <Self as num_traits::NumCast>::from(v).expect("finite cast")
    }

    fn as_f64(self) -> f64 {
        <f64 as num_traits::NumCast>::from(self).expect("finite cast")
    }
}

impl Scalar for f32 {
    unsafe fn gemm_raw(
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
        matrixmultiply::sgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc)
    }
}

impl Scalar for f64 {
    unsafe fn gemm_raw(
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
        matrixmultiply::dgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc)
    }
}

/// Strided view of a matrix inside a flat buffer (non-negative strides only).
#[derive(Debug, Clone, Copy)]
pub(crate) struct MatView {
    pub offset: usize,
    pub rows: usize,
    pub cols: usize,
    pub rs: usize,
    pub cs: usize,
}

impl MatView {
    fn last(&self) -> usize {
        if self.rows == 0 || self.cols == 0 {
            self.offset
        } else {
            self.offset + (self.rows - 1) * self.rs + (self.cols - 1) * self.cs
        }
    }
}

/// Bounds-checked `C <- alpha * A * B + beta * C`.
pub(crate) fn gemm<T: Scalar>(
    alpha: T,
    a: &[T],
    av: MatView,
    b: &[T],
    bv: MatView,
    beta: T,
    c: &mut [T],
    cv: MatView,
) {
    assert_eq!(av.cols, bv.rows, "gemm inner dimension");
    assert_eq!(av.rows, cv.rows, "gemm rows");
    assert_eq!(bv.cols, cv.cols, "gemm cols");
    if cv.rows == 0 || cv.cols == 0 {
        return;
    }
    assert!(
        av.last() < a.len() && bv.last() < b.len() && cv.last() < c.len(),
        "gemm view out of bounds"
    );
    // SAFETY: all views were checked to lie within their slices above.
    unsafe {
        T::gemm_raw(
            cv.rows,
            av.cols,
            cv.cols,
            alpha,
            a.as_ptr().add(av.offset),
            av.rs as isize,
            av.cs as isize,
            b.as_ptr().add(bv.offset),
            bv.rs as isize,
            bv.cs as isize,
            beta,
            c.as_mut_ptr().add(cv.offset),
            cv.rs as isize,
            cv.cs as isize,
        )
    }
}

/// Dense NCHW array. Lower-rank data uses leading dimensions of 1.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<T = f32> {
    shape: [usize; 4],
    data: Vec<T>,
}

impl<T: Scalar> Tensor<T> {
    pub fn zeros(shape: [usize; 4]) -> Self {
        Tensor {
            shape,
            data: vec![T::zero(); shape.iter().product()],
        }
    }

    pub fn full(shape: [usize; 4], value: T) -> Self {
        Tensor {
            shape,
            data: vec![value; shape.iter().product()],
        }
    }

    pub fn from_vec(shape: [usize; 4], data: Vec<T>) -> Result<Self> {
        if shape.iter().product::<usize>() != data.len() {
            return Err(Error::Shape(format!(
                "shape {shape:?} needs {} elements, got {}",
                shape.iter().product::<usize>(),
                data.len()
            )));
        }
        Ok(Tensor { shape, data })
    }

    pub fn vector(data: Vec<T>) -> Self {
        Tensor {
            shape: [1, 1, 1, data.len()],
            data,
        }
    }

    pub fn scalar(v: T) -> Self {
        Tensor {
            shape: [1, 1, 1, 1],
            data: vec![v],
        }
    }

    pub fn shape(&self) -> [usize; 4] {
        self.shape
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

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<T> {
        self.data
    }

    pub fn index(&self, n: usize, c: usize, h: usize, w: usize) -> usize {
        ((n * self.shape[1] + c) * self.shape[2] + h) * self.shape[3] + w
    }

    pub fn get(&self, n: usize, c: usize, h: usize, w: usize) -> T {
        self.data[self.index(n, c, h, w)]
    }

    /// Contiguous `(h, w)` plane of sample `n`, channel `c`.
    pub fn plane_slice(&self, n: usize, c: usize) -> &[T] {
        let p = self.plane();
        let start = (n * self.shape[1] + c) * p;
        &self.data[start..start + p]
    }

    pub fn plane_slice_mut(&mut self, n: usize, c: usize) -> &mut [T] {
        let p = self.plane();
        let start = (n * self.shape[1] + c) * p;
        &mut self.data[start..start + p]
    }

    /// All channels of sample `n`.
    pub fn sample(&self, n: usize) -> &[T] {
        let s = self.shape[1] * self.plane();
        &self.data[n * s..(n + 1) * s]
    }

    pub fn reshape(mut self, shape: [usize; 4]) -> Result<Self> {
        if shape.iter().product::<usize>() != self.data.len() {
            return Err(Error::Shape(format!(
                "cannot reshape {:?} to {shape:?}",
                self.shape
            )));
        }
        self.shape = shape;
        Ok(self)
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Tensor {
            shape: self.shape,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn add_assign(&mut self, other: &Tensor<T>) {
        assert_eq!(self.shape, other.shape, "add_assign shape");
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a = *a + *b;
        }
    }

    pub fn scale(&mut self, s: T) {
        for v in &mut self.data {
            *v = *v * s;
        }
    }

    pub fn dot(&self, other: &Tensor<T>) -> f64 {
        assert_eq!(self.shape, other.shape, "dot shape");
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| a.as_f64() * b.as_f64())
            .sum()
    }

    pub fn max_abs_diff(&self, other: &Tensor<T>) -> f64 {
        assert_eq!(self.shape, other.shape, "diff shape");
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a.as_f64() - b.as_f64()).abs())
            .fold(0.0, f64::max)
    }

    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape,
            data: self.data.iter().map(|v| U::from_f64(v.as_f64())).collect(),
        }
    }

    /// Copies rows `[r0, r0 + h)` and columns `[c0, c0 + w)` of every plane.
    pub fn crop(&self, r0: usize, c0: usize, h: usize, w: usize) -> Tensor<T> {
        assert!(
            r0 + h <= self.height() && c0 + w <= self.width(),
            "crop out of bounds"
        );
        let mut out = Tensor::zeros([self.shape[0], self.shape[1], h, w]);
        let src_w = self.width();
        for n in 0..self.shape[0] {
            for c in 0..self.shape[1] {
                let src = self.plane_slice(n, c);
                let dst = out.plane_slice_mut(n, c);
                for r in 0..h {
                    let s = (r0 + r) * src_w + c0;
                    dst[r * w..(r + 1) * w].copy_from_slice(&src[s..s + w]);
                }
            }
        }
        out
    }

    /// Stacks equally shaped single-sample tensors along the batch axis.
    pub fn stack_batch(items: &[Tensor<T>]) -> Result<Tensor<T>> {
        let first = items
            .first()
            .ok_or_else(|| Error::Shape("empty batch".into()))?;
        let [_, c, h, w] = first.shape;
        let mut data = Vec::with_capacity(items.len() * c * h * w);
        for t in items {
            if t.shape[1..] != first.shape[1..] {
                return Err(Error::Shape(format!(
                    "batch member {:?} vs {:?}",
                    t.shape, first.shape
                )));
            }
            data.extend_from_slice(&t.data);
        }
        Tensor::from_vec([data.len() / (c * h * w), c, h, w], data)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gemm_matches_naive_product() {
        let a: Vec<f64> = (0..6).map(|v| v as f64).collect(); // 2x3
        let b: Vec<f64> = (0..12).map(|v| (v as f64) * 0.5).collect(); // 3x4
        let mut c = vec![1.0f64; 8];
        let av = MatView {
            offset: 0,
            rows: 2,
            cols: 3,
            rs: 3,
            cs: 1,
        };
        let bv = MatView {
            offset: 0,
            rows: 3,
            cols: 4,
            rs: 4,
            cs: 1,
        };
        let cv = MatView {
            offset: 0,
            rows: 2,
            cols: 4,
            rs: 4,
            cs: 1,
        };
        gemm(1.0, &a, av, &b, bv, 1.0, &mut c, cv);
        for i in 0..2 {
            for j in 0..4 {
                let mut s = 1.0;
                for k in 0..3 {
                    s += a[i * 3 + k] * b[k * 4 + j];
                }
                assert_eq!(c[i * 4 + j], s);
            }
        }
    }

    #[test]
    fn crop_and_stack() {
        let t = Tensor::<f32>::from_vec([1, 1, 3, 3], (0..9).map(|v| v as f32).collect()).unwrap();
        let c = t.crop(1, 1, 2, 2);
        assert_eq!(c.data(), &[4.0, 5.0, 7.0, 8.0]);
        let b = Tensor::stack_batch(&[c.clone(), c]).unwrap();
        assert_eq!(b.shape(), [2, 1, 2, 2]);
        assert!(Tensor::<f32>::from_vec([1, 1, 2, 2], vec![0.0; 3]).is_err());
    }
}
