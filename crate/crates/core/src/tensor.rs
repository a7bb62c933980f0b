//! Dense channel-major tensors and the scalar abstraction shared by the
//! diffusion math and the network.
//!
//! A [`Tensor`] holds one sample laid out as `[channel][row][column]`. The
//! segmentation state, the noise tensors and RGB images are all tensors of
//! this shape; the aliases below only name the role.

use std::fmt::Debug;
use std::ops::{AddAssign, DivAssign, MulAssign, SubAssign};

use num_traits::Float;

use crate::error::{Error, Result};

/// Floating point scalar usable by every numeric routine in the crate.
///
/// Implemented for `f32` (training and inference) and `f64` (verification).
pub trait Real:
    Float
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
    + Default
    + Debug
    + Send
    + Sync
    + 'static
{
    fn of(x: f64) -> Self;
    fn f64(self) -> f64;

    /// `c = a · b (+ c)` for row-major operands; `ta`/`tb` mean the stored
    /// buffer is the transpose of the logical operand.
    #[allow(clippy::too_many_arguments)]
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        a: &[Self],
        ta: bool,
        b: &[Self],
        tb: bool,
        c: &mut [Self],
        accumulate: bool,
    );

    /// `c = a · b (+ c)` over arbitrary strided views of the three buffers.
    fn gemm_view(
        a: &[Self],
        av: MatView,
        b: &[Self],
        bv: MatView,
        c: &mut [Self],
        cv: MatView,
        accumulate: bool,
    );

    /// Like [`Real::gemm`] into a freshly allocated `m × n` buffer.
    fn gemm_new(m: usize, k: usize, n: usize, a: &[Self], ta: bool, b: &[Self], tb: bool) -> Vec<Self>;
}

/// A `rows × cols` matrix inside a flat buffer: element `(i, j)` lives at
/// `offset + i * row_stride + j * col_stride`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MatView {
    pub offset: usize,
    pub rows: usize,
    pub cols: usize,
    pub row_stride: usize,
    pub col_stride: usize,
}

impl MatView {
    /// Dense row-major matrix at `offset`.
    pub fn dense(offset: usize, rows: usize, cols: usize) -> Self {
        Self {
            offset,
            rows,
            cols,
            row_stride: cols,
            col_stride: 1,
        }
    }

    pub fn transposed(self) -> Self {
        Self {
            rows: self.cols,
            cols: self.rows,
            row_stride: self.col_stride,
            col_stride: self.row_stride,
            ..self
        }
    }

    /// One past the last addressed element.
    fn end(&self) -> usize {
        if self.rows == 0 || self.cols == 0 {
            self.offset
        } else {
            self.offset + (self.rows - 1) * self.row_stride + (self.cols - 1) * self.col_stride + 1
        }
    }
}

macro_rules! impl_real {
    ($t:ty, $gemm:path) => {
        impl Real for $t {
            fn gemm_view(
                a: &[Self],
                av: MatView,
                b: &[Self],
                bv: MatView,
                c: &mut [Self],
                cv: MatView,
                accumulate: bool,
            ) {
                assert!(av.cols == bv.rows && av.rows == cv.rows && bv.cols == cv.cols);
                assert!(av.end() <= a.len() && bv.end() <= b.len() && cv.end() <= c.len());
                // distinct output elements must not alias
                assert!(cv.rows <= 1 || cv.col_stride == 0 || cv.row_stride >= cv.cols * cv.col_stride);
                assert!(cv.cols <= 1 || cv.col_stride > 0);
                if cv.rows == 0 || cv.cols == 0 {
                    return;
                }
                if av.cols == 0 {
                    if !accumulate {
                        for i in 0..cv.rows {
                            for j in 0..cv.cols {
                                c[cv.offset + i * cv.row_stride + j * cv.col_stride] = 0.0;
                            }
                        }
                    }
                    return;
                }
                let beta = if accumulate { 1.0 } else { 0.0 };
                // SAFETY: the assertions above keep every addressed element
                // inside its slice and the output elements pairwise distinct.
                unsafe {
                    $gemm(
                        cv.rows,
                        av.cols,
                        cv.cols,
                        1.0,
                        a.as_ptr().add(av.offset),
                        av.row_stride as isize,
                        av.col_stride as isize,
                        b.as_ptr().add(bv.offset),
                        bv.row_stride as isize,
                        bv.col_stride as isize,
                        beta,
                        c.as_mut_ptr().add(cv.offset),
                        cv.row_stride as isize,
                        cv.col_stride as isize,
                    );
                }
            }

            fn gemm_new(
                m: usize,
                k: usize,
                n: usize,
                a: &[Self],
                ta: bool,
                b: &[Self],
                tb: bool,
            ) -> Vec<Self> {
                if k == 0 {
                    return vec![0.0; m * n];
                }
                assert!(a.len() >= m * k && b.len() >= k * n);
                let mut c = Vec::with_capacity(m * n);
                if m == 0 || n == 0 {
                    return c;
                }
                let (rsa, csa) = if ta { (1, m) } else { (k, 1) };
                let (rsb, csb) = if tb { (1, k) } else { (n, 1) };
                // SAFETY: with beta = 0 the kernel writes every element of
                // the m × n output without reading it, so the buffer is
                // fully initialized before `set_len`.
                unsafe {
                    $gemm(
                        m,
                        k,
                        n,
                        1.0,
                        a.as_ptr(),
                        rsa as isize,
                        csa as isize,
                        b.as_ptr(),
                        rsb as isize,
                        csb as isize,
                        0.0,
                        c.as_mut_ptr(),
                        n as isize,
                        1,
                    );
                    c.set_len(m * n);
                }
                c
            }

            #[inline(always)]
            fn of(x: f64) -> Self {
                x as $t
            }

            #[inline(always)]
            fn f64(self) -> f64 {
                self as f64
            }

            fn gemm(
                m: usize,
                k: usize,
                n: usize,
                a: &[Self],
                ta: bool,
                b: &[Self],
                tb: bool,
                c: &mut [Self],
                accumulate: bool,
            ) {
                assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
                if m == 0 || n == 0 {
                    return;
                }
                let (rsa, csa) = if ta { (1, m) } else { (k, 1) };
                let (rsb, csb) = if tb { (1, k) } else { (n, 1) };
                let beta = if accumulate { 1.0 } else { 0.0 };
                // SAFETY: the assertions above guarantee every index the
                // strides address lies inside the slices.
                unsafe {
                    $gemm(
                        m,
                        k,
                        n,
                        1.0,
                        a.as_ptr(),
                        rsa as isize,
                        csa as isize,
                        b.as_ptr(),
                        rsb as isize,
                        csb as isize,
                        beta,
                        c.as_mut_ptr(),
                        n as isize,
                        1,
                    );
                }
            }
        }
    };
}

impl_real!(f32, matrixmultiply::sgemm);
impl_real!(f64, matrixmultiply::dgemm);

#[derive(Clone, PartialEq)]
pub struct Tensor<F = f32> {
    channels: usize,
    height: usize,
    width: usize,
    data: Vec<F>,
}

/// Segmentation state: one channel per class.
pub type SegMap<F = f32> = Tensor<F>;
/// A Gaussian draw or the total noise carried by a segmentation state.
pub type NoiseTensor<F = f32> = Tensor<F>;
/// RGB image with values nominally in `[0, 1]`.
pub type Image<F = f32> = Tensor<F>;

impl<F: Real> Tensor<F> {
    pub fn zeros(channels: usize, height: usize, width: usize) -> Self {
        Self::filled(channels, height, width, F::zero())
    }

    pub fn filled(channels: usize, height: usize, width: usize, value: F) -> Self {
        Self {
            channels,
            height,
            width,
            data: vec![value; channels * height * width],
        }
    }

    pub fn from_vec(channels: usize, height: usize, width: usize, data: Vec<F>) -> Result<Self> {
        if data.len() != channels * height * width {
            return Err(Error::Shape(format!(
                "{} values cannot fill a {channels}x{height}x{width} tensor",
                data.len()
            )));
        }
        Ok(Self {
            channels,
            height,
            width,
            data,
        })
    }

    pub fn from_fn(
        channels: usize,
        height: usize,
        width: usize,
        mut f: impl FnMut(usize, usize, usize) -> F,
    ) -> Self {
        let mut data = Vec::with_capacity(channels * height * width);
        for c in 0..channels {
            for y in 0..height {
                for x in 0..width {
                    data.push(f(c, y, x));
                }
            }
        }
        Self {
            channels,
            height,
            width,
            data,
        }
    }

    #[inline]
    pub fn channels(&self) -> usize {
        self.channels
    }

    #[inline]
    pub fn height(&self) -> usize {
        self.height
    }

    #[inline]
    pub fn width(&self) -> usize {
        self.width
    }

    /// `(channels, height, width)`
    #[inline]
    pub fn shape(&self) -> (usize, usize, usize) {
        (self.channels, self.height, self.width)
    }

    #[inline]
    pub fn plane_len(&self) -> usize {
        self.height * self.width
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.data.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn data(&self) -> &[F] {
        &self.data
    }

    #[inline]
    pub fn data_mut(&mut self) -> &mut [F] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<F> {
        self.data
    }

    #[inline]
    pub fn get(&self, c: usize, y: usize, x: usize) -> F {
        self.data[(c * self.height + y) * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, c: usize, y: usize, x: usize, v: F) {
        self.data[(c * self.height + y) * self.width + x] = v;
    }

    pub fn plane(&self, c: usize) -> &[F] {
        let n = self.plane_len();
        &self.data[c * n..(c + 1) * n]
    }

    pub fn plane_mut(&mut self, c: usize) -> &mut [F] {
        let n = self.plane_len();
        &mut self.data[c * n..(c + 1) * n]
    }

    pub fn same_shape(&self, other: &Self) -> bool {
        self.shape() == other.shape()
    }

    pub(crate) fn check_same_shape(&self, other: &Self, what: &str) -> Result<()> {
        if self.same_shape(other) {
            Ok(())
        } else {
            Err(Error::Shape(format!(
                "{what}: {:?} vs {:?}",
                self.shape(),
                other.shape()
            )))
        }
    }

    pub fn map(&self, f: impl Fn(F) -> F) -> Self {
        Self {
            channels: self.channels,
            height: self.height,
            width: self.width,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Self, f: impl Fn(F, F) -> F) -> Result<Self> {
        self.check_same_shape(other, "element-wise operands")?;
        Ok(Self {
            channels: self.channels,
            height: self.height,
            width: self.width,
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Converts element precision (used to move between training and
    /// verification precision).
    pub fn cast<G: Real>(&self) -> Tensor<G> {
        Tensor {
            channels: self.channels,
            height: self.height,
            width: self.width,
            data: self.data.iter().map(|v| G::of(v.f64())).collect(),
        }
    }

    /// Concatenates along the channel axis.
    pub fn concat_channels(&self, other: &Self) -> Result<Self> {
        if self.height != other.height || self.width != other.width {
            return Err(Error::Shape(format!(
                "cannot concatenate {:?} with {:?}",
                self.shape(),
                other.shape()
            )));
        }
        let mut data = Vec::with_capacity(self.len() + other.len());
        data.extend_from_slice(&self.data);
        data.extend_from_slice(&other.data);
        Ok(Self {
            channels: self.channels + other.channels,
            height: self.height,
            width: self.width,
            data,
        })
    }

    /// Splits off the first `channels` channels; inverse of [`Self::concat_channels`].
    pub fn split_channels(&self, channels: usize) -> (Self, Self) {
        let n = channels * self.plane_len();
        (
            Self {
                channels,
                height: self.height,
                width: self.width,
                data: self.data[..n].to_vec(),
            },
            Self {
                channels: self.channels - channels,
                height: self.height,
                width: self.width,
                data: self.data[n..].to_vec(),
            },
        )
    }
}

impl<F: Debug> Debug for Tensor<F> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "Tensor({}x{}x{})",
            self.channels, self.height, self.width
        )?;
        if self.data.len() <= 16 {
            write!(f, " {:?}", self.data)?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gemm_transposes() {
        // a = [[1,2],[3,4]], b = [[5,6],[7,8]]
        let a = [1.0f64, 2.0, 3.0, 4.0];
        let b = [5.0f64, 6.0, 7.0, 8.0];
        let mut c = [0.0f64; 4];
        f64::gemm(2, 2, 2, &a, false, &b, false, &mut c, false);
        assert_eq!(c, [19.0, 22.0, 43.0, 50.0]);
        // aᵀ b
        f64::gemm(2, 2, 2, &a, true, &b, false, &mut c, false);
        assert_eq!(c, [26.0, 30.0, 38.0, 44.0]);
        // a bᵀ, accumulated onto the previous result
        f64::gemm(2, 2, 2, &a, false, &b, true, &mut c, true);
        assert_eq!(c, [26.0 + 17.0, 30.0 + 23.0, 38.0 + 39.0, 44.0 + 53.0]);
    }

    #[test]
    fn gemm_view_matches_dense_on_submatrices() {
        // 3x4 buffer; multiply its 2x2 block at (1,1) by the transpose of
        // the first two columns of a 2x3 buffer.
        let a: Vec<f64> = (0..12).map(f64::from).collect();
        let b: Vec<f64> = (0..6).map(|v| f64::from(v) * 0.5).collect();
        let av = MatView {
            offset: 5,
            rows: 2,
            cols: 2,
            row_stride: 4,
            col_stride: 1,
        };
        let bv = MatView {
            offset: 0,
            rows: 2,
            cols: 2,
            row_stride: 3,
            col_stride: 1,
        }
        .transposed();
        let mut c = vec![1.0f64; 4];
        f64::gemm_view(&a, av, &b, bv, &mut c, MatView::dense(0, 2, 2), true);
        let at = |i: usize, j: usize| a[5 + i * 4 + j];
        let bt = |i: usize, j: usize| b[j * 3 + i];
        for i in 0..2 {
            for j in 0..2 {
                let expect = 1.0 + at(i, 0) * bt(0, j) + at(i, 1) * bt(1, j);
                assert_eq!(c[i * 2 + j], expect);
            }
        }
    }

    #[test]
    fn concat_split_roundtrip() {
        let a = Tensor::<f32>::from_fn(2, 2, 3, |c, y, x| (c * 100 + y * 10 + x) as f32);
        let b = Tensor::<f32>::filled(1, 2, 3, -1.0);
        let ab = a.concat_channels(&b).unwrap();
        assert_eq!(ab.shape(), (3, 2, 3));
        let (a2, b2) = ab.split_channels(2);
        assert_eq!(a2, a);
        assert_eq!(b2, b);
    }

    #[test]
    fn from_vec_rejects_bad_length() {
        assert!(matches!(
            Tensor::<f32>::from_vec(1, 2, 2, vec![0.0; 3]),
            Err(Error::Shape(_))
        ));
    }
}
