//! Dense row-major `f32` tensors and the handful of kernels the networks need.
//!
//! Everything here is single-threaded and loop-order fixed, so results are
//! bitwise reproducible for a given input. Image tensors are NCHW.

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f32>,
}

impl Tensor {
    pub fn zeros(shape: &[usize]) -> Self {
        Self {
            shape: shape.to_vec(),
            data: vec![0.0; shape.iter().product()],
        }
    }

    pub fn full(shape: &[usize], value: f32) -> Self {
        Self {
            shape: shape.to_vec(),
            data: vec![value; shape.iter().product()],
        }
    }

    pub fn from_vec(shape: &[usize], data: Vec<f32>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::Shape {
                expected: shape.to_vec(),
                got: vec![data.len()],
            });
        }
        Ok(Self {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// `(n, c, h, w)` of a rank-4 tensor.
    pub fn dims4(&self) -> (usize, usize, usize, usize) {
        assert_eq!(self.shape.len(), 4, "expected NCHW tensor, got {:?}", self.shape);
        (self.shape[0], self.shape[1], self.shape[2], self.shape[3])
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        if shape.iter().product::<usize>() != self.data.len() {
            return Err(Error::Shape {
                expected: shape.to_vec(),
                got: self.shape,
            });
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn map(&self, f: impl Fn(f32) -> f32) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Tensor, f: impl Fn(f32, f32) -> f32) -> Self {
        assert_eq!(self.shape, other.shape);
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect(),
        }
    }

    pub fn add_assign(&mut self, other: &Tensor) {
        assert_eq!(self.shape, other.shape);
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn scale(&self, s: f32) -> Self {
        self.map(|v| v * s)
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().map(|&v| v as f64).sum()
    }

    pub fn norm(&self) -> f64 {
        self.data.iter().map(|&v| (v as f64) * (v as f64)).sum::<f64>().sqrt()
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Slice `[start, start + count)` along the leading axis.
    pub fn narrow_batch(&self, start: usize, count: usize) -> Self {
        let per: usize = self.shape[1..].iter().product();
        let mut shape = self.shape.clone();
        shape[0] = count;
        Self {
            shape,
            data: self.data[start * per..(start + count) * per].to_vec(),
        }
    }

    /// Stack equally-shaped tensors along a new leading axis.
    pub fn stack(items: &[Tensor]) -> Result<Self> {
        let first = items
            .first()
            .ok_or_else(|| Error::validation("cannot stack an empty list"))?;
        let mut data = Vec::with_capacity(first.len() * items.len());
        for t in items {
            if t.shape != first.shape {
                return Err(Error::Shape {
                    expected: first.shape.clone(),
                    got: t.shape.clone(),
                });
            }
            data.extend_from_slice(&t.data);
        }
        let mut shape = vec![items.len()];
        shape.extend_from_slice(&first.shape);
        Ok(Self { shape, data })
    }

    /// Concatenate along the leading axis.
    pub fn cat_batch(items: &[Tensor]) -> Result<Self> {
        let first = items
            .first()
            .ok_or_else(|| Error::validation("cannot concatenate an empty list"))?;
        let mut data = Vec::new();
        let mut n = 0;
        for t in items {
            if t.shape[1..] != first.shape[1..] {
                return Err(Error::Shape {
                    expected: first.shape.clone(),
                    got: t.shape.clone(),
                });
            }
            n += t.shape[0];
            data.extend_from_slice(&t.data);
        }
        let mut shape = first.shape.clone();
        shape[0] = n;
        Ok(Self { shape, data })
    }
}

/// `c = alpha * op(a) * op(b) + beta * c` for row-major operands.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f32],
    a_trans: bool,
    b: &[f32],
    b_trans: bool,
    c: &mut [f32],
    beta: f32,
) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    let (rsa, csa) = if a_trans { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_trans { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: slice lengths checked above and strides describe in-bounds
    // row-major (or transposed row-major) layouts of those slices.
    unsafe {
        matrixmultiply::sgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Unfold one `[c, h, w]` image into `[c * k * k, h * w]` columns (stride 1, zero pad).
fn im2col(img: &[f32], c: usize, h: usize, w: usize, k: usize, pad: usize, col: &mut [f32]) {
    let hw = h * w;
    for ci in 0..c {
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let dst = &mut col[row * hw..(row + 1) * hw];
                for y in 0..h {
                    let sy = y as isize + ky as isize - pad as isize;
                    let out = &mut dst[y * w..(y + 1) * w];
                    if sy < 0 || sy >= h as isize {
                        out.fill(0.0);
                        continue;
                    }
                    let src = &img[ci * hw + sy as usize * w..ci * hw + (sy as usize + 1) * w];
                    for (x, o) in out.iter_mut().enumerate() {
                        let sx = x as isize + kx as isize - pad as isize;
                        *o = if sx < 0 || sx >= w as isize {
                            0.0
                        } else {
                            src[sx as usize]
                        };
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: accumulate columns back into an image gradient.
fn col2im(col: &[f32], c: usize, h: usize, w: usize, k: usize, pad: usize, img: &mut [f32]) {
    let hw = h * w;
    for ci in 0..c {
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let src = &col[row * hw..(row + 1) * hw];
                for y in 0..h {
                    let sy = y as isize + ky as isize - pad as isize;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let base = ci * hw + sy as usize * w;
                    for x in 0..w {
                        let sx = x as isize + kx as isize - pad as isize;
                        if sx >= 0 && sx < w as isize {
                            img[base + sx as usize] += src[y * w + x];
                        }
                    }
                }
            }
        }
    }
}

/// Same-size convolution: `x [n,c,h,w]`, `weight [o,c,k,k]`, `bias [o]`, padding `k/2`.
pub(crate) fn conv2d(x: &Tensor, weight: &Tensor, bias: &Tensor) -> Tensor {
    let (n, c, h, w) = x.dims4();
    let (o, wc, k, _) = weight.dims4();
    assert_eq!(c, wc, "conv input channels");
    let pad = k / 2;
    let hw = h * w;
    let ckk = c * k * k;
    let mut out = Tensor::zeros(&[n, o, h, w]);
    let mut col = vec![0.0f32; ckk * hw];
    for b in 0..n {
        let img = &x.data[b * c * hw..(b + 1) * c * hw];
        let dst = &mut out.data[b * o * hw..(b + 1) * o * hw];
        for (oc, chunk) in dst.chunks_mut(hw).enumerate() {
            chunk.fill(bias.data[oc]);
        }
        if k == 1 {
            gemm(o, c, hw, &weight.data, false, img, false, dst, 1.0);
        } else {
            im2col(img, c, h, w, k, pad, &mut col);
            gemm(o, ckk, hw, &weight.data, false, &col, false, dst, 1.0);
        }
    }
    out
}

/// Gradients of [`conv2d`] with respect to input, weight and bias.
pub(crate) fn conv2d_backward(
    x: &Tensor,
    weight: &Tensor,
    grad_out: &Tensor,
    need_input_grad: bool,
) -> (Option<Tensor>, Tensor, Tensor) {
    let (n, c, h, w) = x.dims4();
    let (o, _, k, _) = weight.dims4();
    let pad = k / 2;
    let hw = h * w;
    let ckk = c * k * k;
    let mut gw = Tensor::zeros(weight.shape());
    let mut gb = Tensor::zeros(&[o]);
    let mut gx = need_input_grad.then(|| Tensor::zeros(x.shape()));
    let mut col = vec![0.0f32; ckk * hw];
    let mut gcol = vec![0.0f32; ckk * hw];
    for b in 0..n {
        let img = &x.data[b * c * hw..(b + 1) * c * hw];
        let gy = &grad_out.data[b * o * hw..(b + 1) * o * hw];
        for (oc, chunk) in gy.chunks(hw).enumerate() {
            gb.data[oc] += chunk.iter().sum::<f32>();
        }
        if k == 1 {
            gemm(o, hw, c, gy, false, img, true, &mut gw.data, 1.0);
            if let Some(gx) = gx.as_mut() {
                let dst = &mut gx.data[b * c * hw..(b + 1) * c * hw];
                gemm(c, o, hw, &weight.data, true, gy, false, dst, 0.0);
            }
        } else {
            im2col(img, c, h, w, k, pad, &mut col);
            gemm(o, hw, ckk, gy, false, &col, true, &mut gw.data, 1.0);
            if let Some(gx) = gx.as_mut() {
                gemm(ckk, o, hw, &weight.data, true, gy, false, &mut gcol, 0.0);
                let dst = &mut gx.data[b * c * hw..(b + 1) * c * hw];
                col2im(&gcol, c, h, w, k, pad, dst);
            }
        }
    }
    (gx, gw, gb)
}
