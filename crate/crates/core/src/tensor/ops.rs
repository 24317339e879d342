//! Forward and backward kernels. The tape owns bookkeeping; these functions
//! only do arithmetic on flat buffers.

use super::{Real, Result, Tensor, TensorError};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct ConvGeometry {
    pub in_channels: usize,
    pub height: usize,
    pub width: usize,
    pub out_channels: usize,
    pub kernel_h: usize,
    pub kernel_w: usize,
    pub stride: usize,
    pub padding: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeometry {
    pub fn patch_len(&self) -> usize {
        self.in_channels * self.kernel_h * self.kernel_w
    }

    pub fn out_pixels(&self) -> usize {
        self.out_h * self.out_w
    }
}

pub(crate) fn conv_geometry<T: Real>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    bias: &Tensor<T>,
    stride: usize,
    padding: usize,
) -> Result<ConvGeometry> {
    let [c, h, w] = match input.shape() {
        &[c, h, w] => [c, h, w],
        s => {
            return Err(TensorError::dim(
                "conv2d",
                "input",
                format!("expected [C,H,W], got {s:?}"),
            ))
        }
    };
    let [o, wc, kh, kw] = match weight.shape() {
        &[o, wc, kh, kw] => [o, wc, kh, kw],
        s => {
            return Err(TensorError::dim(
                "conv2d",
                "weight",
                format!("expected [C_out,C_in,kH,kW], got {s:?}"),
            ))
        }
    };
    if wc != c {
        return Err(TensorError::dim(
            "conv2d",
            "C_in",
            format!("input has {c} channels, weight expects {wc}"),
        ));
    }
    if bias.shape() != [o] {
        return Err(TensorError::dim(
            "conv2d",
            "C_out",
            format!("bias shape {:?}, expected [{o}]", bias.shape()),
        ));
    }
    if kh % 2 == 0 || kw % 2 == 0 {
        return Err(TensorError::dim(
            "conv2d",
            "kH,kW",
            format!("kernel {kh}x{kw} must be odd"),
        ));
    }
    if stride == 0 {
        return Err(TensorError::Usage("conv2d: stride must be >= 1".into()));
    }
    let span = |size: usize, k: usize, axis: &str| -> Result<usize> {
        let padded = size + 2 * padding;
        if padded < k || !(padded - k).is_multiple_of(stride) {
            return Err(TensorError::dim(
                "conv2d",
                axis.to_string(),
                format!("({size}+2*{padding}-{k})/{stride}+1 is not integral"),
            ));
        }
        Ok((padded - k) / stride + 1)
    };
    let out_h = span(h, kh, "H")?;
    let out_w = span(w, kw, "W")?;
    Ok(ConvGeometry {
        in_channels: c,
        height: h,
        width: w,
        out_channels: o,
        kernel_h: kh,
        kernel_w: kw,
        stride,
        padding,
        out_h,
        out_w,
    })
}

/// Unfolds the input into a `[C*kH*kW, H'*W']` patch matrix.
pub(crate) fn im2col<T: Real>(input: &[T], g: &ConvGeometry) -> Vec<T> {
    let cols = g.out_pixels();
    let mut out = vec![T::zero(); g.patch_len() * cols];
    let pad = g.padding as isize;
    for c in 0..g.in_channels {
        let plane = &input[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ky in 0..g.kernel_h {
            for kx in 0..g.kernel_w {
                let row = (c * g.kernel_h + ky) * g.kernel_w + kx;
                let dst = &mut out[row * cols..(row + 1) * cols];
                for oy in 0..g.out_h {
                    let iy = (oy * g.stride + ky) as isize - pad;
                    if iy < 0 || iy >= g.height as isize {
                        continue;
                    }
                    let src_row = &plane[iy as usize * g.width..(iy as usize + 1) * g.width];
                    for ox in 0..g.out_w {
                        let ix = (ox * g.stride + kx) as isize - pad;
                        if ix >= 0 && ix < g.width as isize {
                            dst[oy * g.out_w + ox] = src_row[ix as usize];
                        }
                    }
                }
            }
        }
    }
    out
}

/// Adjoint of [`im2col`]: scatters patch-matrix gradients back to the input.
pub(crate) fn col2im<T: Real>(cols_grad: &[T], g: &ConvGeometry) -> Vec<T> {
    let cols = g.out_pixels();
    let mut out = vec![T::zero(); g.in_channels * g.height * g.width];
    let pad = g.padding as isize;
    for c in 0..g.in_channels {
        let plane = &mut out[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ky in 0..g.kernel_h {
            for kx in 0..g.kernel_w {
                let row = (c * g.kernel_h + ky) * g.kernel_w + kx;
                let src = &cols_grad[row * cols..(row + 1) * cols];
                for oy in 0..g.out_h {
                    let iy = (oy * g.stride + ky) as isize - pad;
                    if iy < 0 || iy >= g.height as isize {
                        continue;
                    }
                    for ox in 0..g.out_w {
                        let ix = (ox * g.stride + kx) as isize - pad;
                        if ix >= 0 && ix < g.width as isize {
                            plane[iy as usize * g.width + ix as usize] += src[oy * g.out_w + ox];
                        }
                    }
                }
            }
        }
    }
    out
}

/// Row-major `[m,k] x [k,n]` product with optional transposes.
#[allow(clippy::too_many_arguments)]
pub(crate) fn matmul_into<T: Real>(
    m: usize,
    k: usize,
    n: usize,
    a: &[T],
    a_transposed: bool,
    b: &[T],
    b_transposed: bool,
    beta: T,
    c: &mut [T],
) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    let (rsa, csa) = if a_transposed {
        (1, m as isize)
    } else {
        (k as isize, 1)
    };
    let (rsb, csb) = if b_transposed {
        (1, k as isize)
    } else {
        (n as isize, 1)
    };
    T::gemm(
        m,
        k,
        n,
        T::one(),
        a,
        rsa,
        csa,
        b,
        rsb,
        csb,
        beta,
        c,
        n as isize,
        1,
    );
}

pub(crate) fn conv2d_forward<T: Real>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    bias: &Tensor<T>,
    g: &ConvGeometry,
) -> (Tensor<T>, Vec<T>) {
    let cols = im2col(input.data(), g);
    let n = g.out_pixels();
    let mut out = Vec::with_capacity(g.out_channels * n);
    for &b in bias.data() {
        out.extend(std::iter::repeat_n(b, n));
    }
    matmul_into(
        g.out_channels,
        g.patch_len(),
        n,
        weight.data(),
        false,
        &cols,
        false,
        T::one(),
        &mut out,
    );
    let out = Tensor::new([g.out_channels, g.out_h, g.out_w], out).expect("conv output shape");
    (out, cols)
}

pub(crate) struct ConvGrads<T> {
    pub input: Option<Vec<T>>,
    pub weight: Option<Vec<T>>,
    pub bias: Option<Vec<T>>,
}

pub(crate) fn conv2d_backward<T: Real>(
    grad_out: &[T],
    cols: &[T],
    weight: &[T],
    g: &ConvGeometry,
    need: [bool; 3],
) -> ConvGrads<T> {
    let n = g.out_pixels();
    let p = g.patch_len();
    let input = need[0].then(|| {
        let mut dcols = vec![T::zero(); p * n];
        matmul_into(
            p,
            g.out_channels,
            n,
            weight,
            true,
            grad_out,
            false,
            T::zero(),
            &mut dcols,
        );
        col2im(&dcols, g)
    });
    let weight = need[1].then(|| {
        let mut dw = vec![T::zero(); g.out_channels * p];
        matmul_into(
            g.out_channels,
            n,
            p,
            grad_out,
            false,
            cols,
            true,
            T::zero(),
            &mut dw,
        );
        dw
    });
    let bias = need[2].then(|| {
        grad_out
            .chunks(n)
            .map(|row| row.iter().copied().sum())
            .collect()
    });
    ConvGrads {
        input,
        weight,
        bias,
    }
}

/// Returns the pooled tensor and, per output element, the flat input index of
/// the first (row-major) maximum in its window.
pub(crate) fn maxpool_forward<T: Real>(
    input: &Tensor<T>,
    kernel: usize,
    stride: usize,
) -> Result<(Tensor<T>, Vec<usize>)> {
    let [c, h, w] = match input.shape() {
        &[c, h, w] => [c, h, w],
        s => {
            return Err(TensorError::dim(
                "maxpool2d",
                "input",
                format!("expected [C,H,W], got {s:?}"),
            ))
        }
    };
    if kernel == 0 || stride == 0 {
        return Err(TensorError::Usage(
            "maxpool2d: kernel and stride must be >= 1".into(),
        ));
    }
    let span = |size: usize, axis: &str| -> Result<usize> {
        if size < kernel || !(size - kernel).is_multiple_of(stride) {
            return Err(TensorError::dim(
                "maxpool2d",
                axis.to_string(),
                format!("window {kernel} with stride {stride} does not tile size {size}"),
            ));
        }
        Ok((size - kernel) / stride + 1)
    };
    let oh = span(h, "H")?;
    let ow = span(w, "W")?;
    let src = input.data();
    let mut out = Vec::with_capacity(c * oh * ow);
    let mut argmax = Vec::with_capacity(c * oh * ow);
    for ch in 0..c {
        let base = ch * h * w;
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = base + oy * stride * w + ox * stride;
                for ky in 0..kernel {
                    for kx in 0..kernel {
                        let idx = base + (oy * stride + ky) * w + ox * stride + kx;
                        if src[idx] > src[best] {
                            best = idx;
                        }
                    }
                }
                out.push(src[best]);
                argmax.push(best);
            }
        }
    }
    Ok((Tensor::new([c, oh, ow], out)?, argmax))
}

pub(crate) fn linear_forward<T: Real>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    bias: &Tensor<T>,
) -> Result<Tensor<T>> {
    let n = input.numel();
    let [m, wn] = match weight.shape() {
        &[m, wn] => [m, wn],
        s => {
            return Err(TensorError::dim(
                "linear",
                "weight",
                format!("expected [M,N], got {s:?}"),
            ))
        }
    };
    if input.shape().len() != 1 || wn != n {
        return Err(TensorError::dim(
            "linear",
            "N",
            format!("input {:?} vs weight {:?}", input.shape(), weight.shape()),
        ));
    }
    if bias.shape() != [m] {
        return Err(TensorError::dim(
            "linear",
            "M",
            format!("bias {:?}, expected [{m}]", bias.shape()),
        ));
    }
    let mut out = bias.data().to_vec();
    matmul_into(
        m,
        n,
        1,
        weight.data(),
        false,
        input.data(),
        false,
        T::one(),
        &mut out,
    );
    Tensor::new([m], out)
}

/// Numerically stable softmax.
pub fn softmax<T: Real>(logits: &[T]) -> Vec<T> {
    let max = logits.iter().copied().fold(T::neg_infinity(), T::max);
    let exps: Vec<T> = logits.iter().map(|&v| (v - max).exp()).collect();
    let total: T = exps.iter().copied().sum();
    exps.into_iter().map(|e| e / total).collect()
}

/// Returns `(loss, softmax probabilities)`.
pub(crate) fn softmax_xent_forward<T: Real>(
    logits: &Tensor<T>,
    label: usize,
) -> Result<(T, Vec<T>)> {
    let k = logits.numel();
    if label >= k {
        return Err(TensorError::LabelOutOfRange { label, classes: k });
    }
    let x = logits.data();
    let max = x.iter().copied().fold(T::neg_infinity(), T::max);
    let log_sum = x.iter().map(|&v| (v - max).exp()).sum::<T>().ln() + max;
    let loss = log_sum - x[label];
    Ok((loss, softmax(x)))
}
