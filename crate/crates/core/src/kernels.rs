//! Numeric kernels: matrix products, 2-D convolution and pooling with their
//! backward passes, and elementwise activations.
//!
//! Image tensors are laid out `[H, W, C]`; convolution kernels are
//! `[k_h, k_w, C_in, C_out]`.

use crate::error::{dim_err, Error, Result};
use crate::tensor::{Element, Tensor};

/// `C (+)= op(A) * op(B)` where `op(A)` is `m x k` and `op(B)` is `k x n`.
///
/// With `trans_a`, `a` holds a row-major `k x m` matrix; likewise `trans_b`
/// means `b` holds `n x k`. `c` is always row-major `m x n`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm<T: Element>(
    m: usize,
    k: usize,
    n: usize,
    a: &[T],
    trans_a: bool,
    b: &[T],
    trans_b: bool,
    c: &mut [T],
    accumulate: bool,
) {
    assert!(a.len() >= m * k, "gemm: lhs too short");
    assert!(b.len() >= k * n, "gemm: rhs too short");
    assert!(c.len() >= m * n, "gemm: output too short");
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        if !accumulate {
            c[..m * n].iter_mut().for_each(|v| *v = T::zero());
        }
        return;
    }
    let (rsa, csa) = if trans_a { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if trans_b { (1, k as isize) } else { (n as isize, 1) };
    let beta = if accumulate { T::one() } else { T::zero() };
    // SAFETY: the asserts above bound every access the strides describe,
    // and `c` is a unique borrow distinct from `a` and `b`.
    unsafe {
        T::gemm_raw(
            m,
            k,
            n,
            T::one(),
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

fn ensure_finite<T: Element>(t: &Tensor<T>, what: &str) -> Result<()> {
    if t.all_finite() {
        Ok(())
    } else {
        Err(Error::Numeric(format!("{what} contains non-finite values")))
    }
}

/// Matrix product `[M,K] x [K,N] -> [M,N]`.
///
/// Each output element is accumulated left to right over `K`, starting from
/// zero, so results are bit-identical to a naive triple loop.
pub fn matmul<T: Element>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (&[m, k], &[k2, n]) = (a.shape(), b.shape()) else {
        return dim_err(format!(
            "matmul needs two matrices, got {:?} and {:?}",
            a.shape(),
            b.shape()
        ));
    };
    if k != k2 {
        return dim_err(format!(
            "matmul inner dimensions disagree: {:?} x {:?}",
            a.shape(),
            b.shape()
        ));
    }
    ensure_finite(a, "matmul lhs")?;
    ensure_finite(b, "matmul rhs")?;
    let (ad, bd) = (a.data(), b.data());
    let mut out = vec![T::zero(); m * n];
    for (i, row) in out.chunks_exact_mut(n.max(1)).enumerate().take(m) {
        for kk in 0..k {
            let av = ad[i * k + kk];
            let brow = &bd[kk * n..(kk + 1) * n];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    Tensor::new([m, n], out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Padding {
    Same,
    Valid,
}

impl Padding {
    pub fn as_str(self) -> &'static str {
        match self {
            Padding::Same => "same",
            Padding::Valid => "valid",
        }
    }
}

impl std::str::FromStr for Padding {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "same" => Ok(Padding::Same),
            "valid" => Ok(Padding::Valid),
            other => Err(format!("unknown padding `{other}`")),
        }
    }
}

/// Output extent and leading pad for one spatial axis.
fn axis_geometry(extent: usize, k: usize, stride: usize, padding: Padding) -> Result<(usize, usize)> {
    match padding {
        Padding::Valid => {
            if k > extent {
                return dim_err(format!("kernel extent {k} exceeds input extent {extent}"));
            }
            Ok(((extent - k) / stride + 1, 0))
        }
        Padding::Same => {
            let out = extent.div_ceil(stride);
            let total = ((out - 1) * stride + k).saturating_sub(extent);
            if k > extent + total {
                return dim_err(format!("kernel extent {k} exceeds padded extent {}", extent + total));
            }
            // Odd totals put the extra pixel on the bottom/right.
            Ok((out, total / 2))
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeometry {
    pub in_h: usize,
    pub in_w: usize,
    pub in_c: usize,
    pub k_h: usize,
    pub k_w: usize,
    pub out_c: usize,
    pub out_h: usize,
    pub out_w: usize,
    pub pad_top: usize,
    pub pad_left: usize,
    pub stride: usize,
}

impl ConvGeometry {
    pub fn new(input: &[usize], kernel: &[usize], stride: usize, padding: Padding) -> Result<Self> {
        let &[in_h, in_w, in_c] = input else {
            return dim_err(format!("conv2d input must be [H,W,C], got {input:?}"));
        };
        let &[k_h, k_w, k_c, out_c] = kernel else {
            return dim_err(format!("conv2d kernels must be [k_h,k_w,C_in,C_out], got {kernel:?}"));
        };
        if k_c != in_c {
            return dim_err(format!("conv2d channel mismatch: input {input:?}, kernels {kernel:?}"));
        }
        if stride == 0 {
            return dim_err("conv2d stride must be at least 1");
        }
        if in_h == 0 || in_w == 0 || k_h == 0 || k_w == 0 {
            return dim_err(format!("conv2d zero extent: input {input:?}, kernels {kernel:?}"));
        }
        let (out_h, pad_top) = axis_geometry(in_h, k_h, stride, padding)?;
        let (out_w, pad_left) = axis_geometry(in_w, k_w, stride, padding)?;
        Ok(ConvGeometry {
            in_h,
            in_w,
            in_c,
            k_h,
            k_w,
            out_c,
            out_h,
            out_w,
            pad_top,
            pad_left,
            stride,
        })
    }

    fn patch_len(&self) -> usize {
        self.k_h * self.k_w * self.in_c
    }

    fn positions(&self) -> usize {
        self.out_h * self.out_w
    }

    /// Input coordinate for output row/col `o` and kernel offset `d`, or
    /// `None` if it falls in the zero padding.
    #[inline]
    fn src(o: usize, d: usize, stride: usize, pad: usize, extent: usize) -> Option<usize> {
        (o * stride + d).checked_sub(pad).filter(|&v| v < extent)
    }

    fn im2col<T: Element>(&self, input: &[T]) -> Vec<T> {
        let patch = self.patch_len();
        let mut cols = vec![T::zero(); self.positions() * patch];
        for oy in 0..self.out_h {
            for ox in 0..self.out_w {
                let row = &mut cols[(oy * self.out_w + ox) * patch..][..patch];
                for dy in 0..self.k_h {
                    let Some(iy) = Self::src(oy, dy, self.stride, self.pad_top, self.in_h) else {
                        continue;
                    };
                    for dx in 0..self.k_w {
                        let Some(ix) = Self::src(ox, dx, self.stride, self.pad_left, self.in_w) else {
                            continue;
                        };
                        let from = (iy * self.in_w + ix) * self.in_c;
                        let to = (dy * self.k_w + dx) * self.in_c;
                        row[to..to + self.in_c].copy_from_slice(&input[from..from + self.in_c]);
                    }
                }
            }
        }
        cols
    }

    fn col2im_add<T: Element>(&self, cols: &[T], out: &mut [T]) {
        let patch = self.patch_len();
        for oy in 0..self.out_h {
            for ox in 0..self.out_w {
                let row = &cols[(oy * self.out_w + ox) * patch..][..patch];
                for dy in 0..self.k_h {
                    let Some(iy) = Self::src(oy, dy, self.stride, self.pad_top, self.in_h) else {
                        continue;
                    };
                    for dx in 0..self.k_w {
                        let Some(ix) = Self::src(ox, dx, self.stride, self.pad_left, self.in_w) else {
                            continue;
                        };
                        let to = (iy * self.in_w + ix) * self.in_c;
                        let from = (dy * self.k_w + dx) * self.in_c;
                        for (o, &g) in out[to..to + self.in_c].iter_mut().zip(&row[from..from + self.in_c]) {
                            *o += g;
                        }
                    }
                }
            }
        }
    }
}

/// 2-D cross-correlation (no kernel flip) plus per-channel bias.
pub fn conv2d<T: Element>(
    input: &Tensor<T>,
    kernels: &Tensor<T>,
    bias: &Tensor<T>,
    stride: usize,
    padding: Padding,
) -> Result<Tensor<T>> {
    let g = ConvGeometry::new(input.shape(), kernels.shape(), stride, padding)?;
    if bias.shape() != [g.out_c] {
        return dim_err(format!(
            "conv2d bias shape {:?} does not match {} output channels",
            bias.shape(),
            g.out_c
        ));
    }
    ensure_finite(input, "conv2d input")?;
    let p = g.positions();
    let mut out = Vec::with_capacity(p * g.out_c);
    for _ in 0..p {
        out.extend_from_slice(bias.data());
    }
    let cols = g.im2col(input.data());
    gemm(
        p,
        g.patch_len(),
        g.out_c,
        &cols,
        false,
        kernels.data(),
        false,
        &mut out,
        true,
    );
    Tensor::new([g.out_h, g.out_w, g.out_c], out)
}

/// Backward pass of [`conv2d`]. Accumulates into `grad_kernels` and
/// `grad_bias`; returns the input gradient when `need_input` is set.
#[allow(clippy::too_many_arguments)]
pub fn conv2d_backward<T: Element>(
    input: &Tensor<T>,
    kernels: &Tensor<T>,
    grad_out: &Tensor<T>,
    stride: usize,
    padding: Padding,
    grad_kernels: &mut Tensor<T>,
    grad_bias: &mut Tensor<T>,
    need_input: bool,
) -> Result<Option<Tensor<T>>> {
    let g = ConvGeometry::new(input.shape(), kernels.shape(), stride, padding)?;
    if grad_out.shape() != [g.out_h, g.out_w, g.out_c] {
        return dim_err(format!(
            "conv2d backward: gradient shape {:?}, expected {:?}",
            grad_out.shape(),
            [g.out_h, g.out_w, g.out_c]
        ));
    }
    let (p, patch) = (g.positions(), g.patch_len());
    let go = grad_out.data();
    let cols = g.im2col(input.data());
    gemm(patch, p, g.out_c, &cols, true, go, false, grad_kernels.data_mut(), true);
    let gb = grad_bias.data_mut();
    for row in go.chunks_exact(g.out_c) {
        for (b, &v) in gb.iter_mut().zip(row) {
            *b += v;
        }
    }
    if !need_input {
        return Ok(None);
    }
    let mut dcols = cols;
    gemm(p, g.out_c, patch, go, false, kernels.data(), true, &mut dcols, false);
    let mut dx = vec![T::zero(); input.len()];
    g.col2im_add(&dcols, &mut dx);
    Ok(Some(Tensor::new(input.shape().to_vec(), dx)?))
}

pub fn pool_output_extent(extent: usize, window: usize, stride: usize) -> Result<usize> {
    if window == 0 || stride == 0 {
        return dim_err("maxpool window and stride must be at least 1");
    }
    if window > extent {
        return dim_err(format!("maxpool window {window} exceeds input extent {extent}"));
    }
    Ok((extent - window) / stride + 1)
}

/// Per-channel window maxima with floor semantics. Returns the pooled tensor
/// and, for each output element, the flat index of the chosen input element
/// (first maximum in row-major window order).
pub fn maxpool2d<T: Element>(input: &Tensor<T>, window: usize, stride: usize) -> Result<(Tensor<T>, Vec<usize>)> {
    let &[h, w, c] = input.shape() else {
        return dim_err(format!("maxpool2d input must be [H,W,C], got {:?}", input.shape()));
    };
    let oh = pool_output_extent(h, window, stride)?;
    let ow = pool_output_extent(w, window, stride)?;
    let x = input.data();
    let mut out = Vec::with_capacity(oh * ow * c);
    let mut argmax = Vec::with_capacity(oh * ow * c);
    for oy in 0..oh {
        for ox in 0..ow {
            for ch in 0..c {
                let mut best = (oy * stride * w + ox * stride) * c + ch;
                for dy in 0..window {
                    for dx in 0..window {
                        let idx = ((oy * stride + dy) * w + ox * stride + dx) * c + ch;
                        if x[idx] > x[best] {
                            best = idx;
                        }
                    }
                }
                out.push(x[best]);
                argmax.push(best);
            }
        }
    }
    Ok((Tensor::new([oh, ow, c], out)?, argmax))
}

/// Scatters `grad_out` back through the recorded argmax positions.
pub fn maxpool2d_backward<T: Element>(
    input_shape: &[usize],
    argmax: &[usize],
    grad_out: &Tensor<T>,
) -> Result<Tensor<T>> {
    if argmax.len() != grad_out.len() {
        return dim_err(format!(
            "maxpool backward: {} argmax entries for gradient of {} elements",
            argmax.len(),
            grad_out.len()
        ));
    }
    let mut dx = Tensor::zeros(input_shape.to_vec());
    let d = dx.data_mut();
    for (&i, &g) in argmax.iter().zip(grad_out.data()) {
        d[i] += g;
    }
    Ok(dx)
}

#[inline]
pub fn sigmoid_scalar<T: Element>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

pub fn sigmoid<T: Element>(x: &Tensor<T>) -> Tensor<T> {
    x.map(sigmoid_scalar)
}

pub fn tanh<T: Element>(x: &Tensor<T>) -> Tensor<T> {
    x.map(|v| v.tanh())
}

pub fn relu<T: Element>(x: &Tensor<T>) -> Tensor<T> {
    x.map(|v| v.max(T::zero()))
}

/// Numerically stable softmax over a flat tensor.
pub fn softmax<T: Element>(x: &Tensor<T>) -> Tensor<T> {
    let mut out = x.clone();
    softmax_in_place(out.data_mut());
    out
}

pub(crate) fn softmax_in_place<T: Element>(v: &mut [T]) {
    let max = v.iter().copied().fold(T::neg_infinity(), T::max);
    let mut sum = T::zero();
    for e in v.iter_mut() {
        *e = (*e - max).exp();
        sum += *e;
    }
    for e in v.iter_mut() {
        *e = *e / sum;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f32]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn matmul_identity_and_dot() {
        let id = t(&[2, 2], &[1., 0., 0., 1.]);
        let m = t(&[2, 2], &[3., 4., 5., 6.]);
        assert_eq!(matmul(&id, &m).unwrap(), m);
        let r = matmul(&t(&[1, 2], &[1., 2.]), &t(&[2, 1], &[3., 4.])).unwrap();
        assert_eq!(r.data(), &[11.0]);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let err = matmul(&Tensor::<f32>::zeros([2, 3]), &Tensor::zeros([2, 3])).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3] x [2, 3]"), "{msg}");
    }

    #[test]
    fn matmul_rejects_nan() {
        let a = t(&[1, 1], &[f32::NAN]);
        assert!(matches!(matmul(&a, &a), Err(Error::Numeric(_))));
    }

    #[test]
    fn conv_scaling_kernel_and_sum_kernel() {
        let x = t(&[3, 3, 1], &[1., 2., 3., 4., 5., 6., 7., 8., 9.]);
        let k = t(&[1, 1, 1, 1], &[2.]);
        let b = t(&[1], &[0.]);
        let y = conv2d(&x, &k, &b, 1, Padding::Valid).unwrap();
        assert_eq!(y.data(), &[2., 4., 6., 8., 10., 12., 14., 16., 18.]);

        let ones = Tensor::full([3, 3, 1, 1], 1.0f32);
        let y = conv2d(&x, &ones, &b, 1, Padding::Valid).unwrap();
        assert_eq!(y.shape(), &[1, 1, 1]);
        assert_eq!(y.data(), &[45.]);
    }

    #[test]
    fn conv_same_padding_shapes() {
        let x = Tensor::<f32>::zeros([7, 5, 2]);
        let k = Tensor::zeros([3, 3, 2, 4]);
        let b = Tensor::zeros([4]);
        let y = conv2d(&x, &k, &b, 2, Padding::Same).unwrap();
        assert_eq!(y.shape(), &[4, 3, 4]);
        let y = conv2d(&x, &k, &b, 1, Padding::Same).unwrap();
        assert_eq!(y.shape(), &[7, 5, 4]);
    }

    #[test]
    fn conv_same_even_kernel_pads_bottom_right() {
        // 2x2 kernel on 2x2 input, stride 1: one pad pixel, placed after.
        let x = t(&[2, 2, 1], &[1., 2., 3., 4.]);
        let k = Tensor::full([2, 2, 1, 1], 1.0f32);
        let y = conv2d(&x, &k, &t(&[1], &[0.]), 1, Padding::Same).unwrap();
        assert_eq!(y.data(), &[10., 6., 7., 4.]);
    }

    #[test]
    fn conv_kernel_too_large() {
        let x = Tensor::<f32>::zeros([2, 2, 1]);
        let k = Tensor::zeros([3, 3, 1, 1]);
        let b = Tensor::zeros([1]);
        assert!(matches!(
            conv2d(&x, &k, &b, 1, Padding::Valid),
            Err(Error::Dimension(_))
        ));
    }

    #[test]
    fn maxpool_basics() {
        let x = t(&[2, 2, 1], &[1., 2., 3., 4.]);
        let (y, idx) = maxpool2d(&x, 2, 2).unwrap();
        assert_eq!(y.data(), &[4.]);
        assert_eq!(idx, vec![3]);

        let c = Tensor::full([4, 6, 2], 0.25f32);
        let (y, _) = maxpool2d(&c, 2, 2).unwrap();
        assert_eq!(y.shape(), &[2, 3, 2]);
        assert!(y.data().iter().all(|&v| v == 0.25));
    }

    #[test]
    fn maxpool_tie_takes_first_in_scan_order() {
        let x = Tensor::full([2, 2, 1], 1.0f32);
        let (_, idx) = maxpool2d(&x, 2, 2).unwrap();
        assert_eq!(idx, vec![0]);
    }

    #[test]
    fn maxpool_window_too_large() {
        assert!(maxpool2d(&Tensor::<f32>::zeros([1, 4, 1]), 2, 2).is_err());
    }

    #[test]
    fn activations_at_fixed_points() {
        let z = Tensor::<f32>::vector(vec![0.0, -3.0]);
        assert_eq!(sigmoid(&z).data()[0], 0.5);
        assert_eq!(tanh(&z).data()[0], 0.0);
        assert_eq!(relu(&z).data()[1], 0.0);
        for x in [-30.0f32, -2.5, -0.1, 0.7, 4.0, 80.0] {
            let s = sigmoid_scalar(x) + sigmoid_scalar(-x);
            assert!((s - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn softmax_examples() {
        let s = softmax(&Tensor::<f32>::vector(vec![0.0, 0.0]));
        assert_eq!(s.data(), &[0.5, 0.5]);
        let s = softmax(&Tensor::<f32>::vector(vec![1.0; 3]));
        for &v in s.data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-7);
        }
        let s = softmax(&Tensor::<f32>::vector(vec![1000.0, 1000.0]));
        assert_eq!(s.data(), &[0.5, 0.5]);
    }
}
