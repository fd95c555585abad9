//! Differentiable primitives, each a forward function paired with an explicit
//! backward pass. All spatial operators are stride 1 with SAME output size.

use crate::{Error, Result, Tensor};

/// Leading (top/left) zero padding for a SAME correlation with extent `k`.
/// For even `k` the smaller half goes before.
#[inline]
pub fn same_pad_before(k: usize) -> usize {
    (k - 1) / 2
}

struct ConvGeometry {
    channels: usize,
    height: usize,
    width: usize,
    kh: usize,
    kw: usize,
    pad_top: usize,
    pad_left: usize,
}

impl ConvGeometry {
    fn new(input: &Tensor, kernel: &Tensor) -> Result<Self> {
        let [_, c, h, w] = input.shape();
        let [_, kc, kh, kw] = kernel.shape();
        if kc != c {
            return Err(Error::invalid(format!(
                "conv2d: kernel input channels {kc} != input channels {c}"
            )));
        }
        if kh == 0 || kw == 0 {
            return Err(Error::invalid(format!(
                "conv2d: kernel spatial extent must be >= 1, got {kh}x{kw}"
            )));
        }
        Ok(ConvGeometry {
            channels: c,
            height: h,
            width: w,
            kh,
            kw,
            pad_top: same_pad_before(kh),
            pad_left: same_pad_before(kw),
        })
    }

    fn patch_len(&self) -> usize {
        self.channels * self.kh * self.kw
    }

    fn pixels(&self) -> usize {
        self.height * self.width
    }

    /// Valid output column range for kernel column offset `v`.
    #[inline]
    fn col_range(&self, v: usize) -> (usize, usize) {
        let lo = self.pad_left.saturating_sub(v);
        let hi = (self.width + self.pad_left).saturating_sub(v).min(self.width);
        (lo, hi.max(lo))
    }

    /// Unrolls one sample into a (C·kh·kw) × (H·W) column matrix.
    fn im2col(&self, sample: &[f64], cols: &mut [f64]) {
        let (h, w, hw) = (self.height, self.width, self.pixels());
        cols.iter_mut().for_each(|v| *v = 0.0);
        for c in 0..self.channels {
            let plane = &sample[c * hw..(c + 1) * hw];
            for u in 0..self.kh {
                for v in 0..self.kw {
                    let row = ((c * self.kh + u) * self.kw + v) * hw;
                    let (j0, j1) = self.col_range(v);
                    if j0 >= j1 {
                        continue;
                    }
                    for i in 0..h {
                        let si = i as isize + u as isize - self.pad_top as isize;
                        if si < 0 || si >= h as isize {
                            continue;
                        }
                        let src = si as usize * w + j0 + v - self.pad_left;
                        let dst = row + i * w + j0;
                        cols[dst..dst + (j1 - j0)].copy_from_slice(&plane[src..src + (j1 - j0)]);
                    }
                }
            }
        }
    }

    /// Scatter-adds a column matrix back onto one sample (adjoint of im2col).
    fn col2im(&self, cols: &[f64], sample: &mut [f64]) {
        let (h, w, hw) = (self.height, self.width, self.pixels());
        for c in 0..self.channels {
            let plane = &mut sample[c * hw..(c + 1) * hw];
            for u in 0..self.kh {
                for v in 0..self.kw {
                    let row = ((c * self.kh + u) * self.kw + v) * hw;
                    let (j0, j1) = self.col_range(v);
                    if j0 >= j1 {
                        continue;
                    }
                    for i in 0..h {
                        let si = i as isize + u as isize - self.pad_top as isize;
                        if si < 0 || si >= h as isize {
                            continue;
                        }
                        let dst = si as usize * w + j0 + v - self.pad_left;
                        let src = row + i * w + j0;
                        for (d, s) in plane[dst..dst + (j1 - j0)]
                            .iter_mut()
                            .zip(&cols[src..src + (j1 - j0)])
                        {
                            *d += s;
                        }
                    }
                }
            }
        }
    }
}

/// Row-major `c = a · b` (+ `c` when `accumulate`), a: m×k, b: k×n.
fn gemm(m: usize, k: usize, n: usize, a: &[f64], b: &[f64], c: &mut [f64], accumulate: bool) {
    let beta = if accumulate { 1.0 } else { 0.0 };
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            k as isize,
            1,
            b.as_ptr(),
            n as isize,
            1,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// `c = a · bᵀ` (+ `c`), a: m×k, b: n×k.
fn gemm_bt(m: usize, k: usize, n: usize, a: &[f64], b: &[f64], c: &mut [f64], accumulate: bool) {
    let beta = if accumulate { 1.0 } else { 0.0 };
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            k as isize,
            1,
            b.as_ptr(),
            1,
            k as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// `c = aᵀ · b`, a: k×m, b: k×n.
fn gemm_at(m: usize, k: usize, n: usize, a: &[f64], b: &[f64], c: &mut [f64]) {
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            1,
            m as isize,
            b.as_ptr(),
            n as isize,
            1,
            0.0,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// SAME, stride-1 cross-correlation:
/// `out[n,o] = Σ_c input[n,c] ⋆ kernel[o,c] + bias[o]`.
pub fn conv2d_same(input: &Tensor, kernel: &Tensor, bias: &[f64]) -> Result<Tensor> {
    let g = ConvGeometry::new(input, kernel)?;
    let out_c = kernel.batch();
    if bias.len() != out_c {
        return Err(Error::invalid(format!(
            "conv2d: bias length {} != kernel output channels {out_c}",
            bias.len()
        )));
    }
    let (batch, hw, plen) = (input.batch(), g.pixels(), g.patch_len());
    let mut out = Tensor::zeros([batch, out_c, g.height, g.width]);
    let mut cols = vec![0.0; plen * hw];
    for n in 0..batch {
        g.im2col(input.sample(n), &mut cols);
        let chw = out_c * hw;
        let dst = &mut out.data_mut()[n * chw..(n + 1) * chw];
        for (o, b) in bias.iter().enumerate() {
            dst[o * hw..(o + 1) * hw].iter_mut().for_each(|v| *v = *b);
        }
        gemm(out_c, plen, hw, kernel.data(), &cols, dst, true);
    }
    Ok(out)
}

/// Gradients of [`conv2d_same`] with respect to its input, kernel and bias.
#[derive(Debug, Clone)]
pub struct ConvGrads {
    pub input: Tensor,
    pub kernel: Tensor,
    pub bias: Vec<f64>,
}

pub fn conv2d_same_backward(input: &Tensor, kernel: &Tensor, upstream: &Tensor) -> Result<ConvGrads> {
    conv2d_backward_impl(input, kernel, upstream, true)
}

/// Same as [`conv2d_same_backward`] but skips the input gradient, which the
/// first layer of a network never needs. `ConvGrads::input` is left empty.
pub fn conv2d_same_backward_params(
    input: &Tensor,
    kernel: &Tensor,
    upstream: &Tensor,
) -> Result<ConvGrads> {
    conv2d_backward_impl(input, kernel, upstream, false)
}

fn conv2d_backward_impl(
    input: &Tensor,
    kernel: &Tensor,
    upstream: &Tensor,
    want_input: bool,
) -> Result<ConvGrads> {
    let g = ConvGeometry::new(input, kernel)?;
    let out_c = kernel.batch();
    let expected = [input.batch(), out_c, g.height, g.width];
    if upstream.shape() != expected {
        return Err(Error::invalid(format!(
            "conv2d backward: upstream shape {:?} != forward output shape {:?}",
            upstream.shape(),
            expected
        )));
    }
    let (batch, hw, plen) = (input.batch(), g.pixels(), g.patch_len());
    let mut grad_kernel = Tensor::zeros(kernel.shape());
    let mut grad_bias = vec![0.0; out_c];
    let mut grad_input = if want_input {
        Tensor::zeros(input.shape())
    } else {
        Tensor::zeros([0, 0, 0, 0])
    };
    let mut cols = vec![0.0; plen * hw];
    let mut dcols = if want_input { vec![0.0; plen * hw] } else { Vec::new() };
    for n in 0..batch {
        let up = upstream.sample(n);
        for (o, gb) in grad_bias.iter_mut().enumerate() {
            *gb += up[o * hw..(o + 1) * hw].iter().sum::<f64>();
        }
        g.im2col(input.sample(n), &mut cols);
        gemm_bt(out_c, hw, plen, up, &cols, grad_kernel.data_mut(), true);
        if want_input {
            gemm_at(plen, out_c, hw, kernel.data(), up, &mut dcols);
            let chw = g.channels * hw;
            g.col2im(&dcols, &mut grad_input.data_mut()[n * chw..(n + 1) * chw]);
        }
    }
    Ok(ConvGrads {
        input: grad_input,
        kernel: grad_kernel,
        bias: grad_bias,
    })
}

pub fn relu(input: &Tensor) -> Tensor {
    input.map(|v| v.max(0.0))
}

/// Passes `upstream` where `input > 0`; the subgradient at 0 is taken as 0.
pub fn relu_backward(input: &Tensor, upstream: &Tensor) -> Result<Tensor> {
    input.ensure_same_shape(upstream, "relu backward")?;
    let data = input
        .data()
        .iter()
        .zip(upstream.data())
        .map(|(&x, &u)| if x > 0.0 { u } else { 0.0 })
        .collect();
    Tensor::from_vec(input.shape(), data)
}

/// Per-output-pixel flat input index of the pooled maximum.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ArgmaxMap {
    shape: [usize; 4],
    indices: Vec<usize>,
}

impl ArgmaxMap {
    pub fn shape(&self) -> [usize; 4] {
        self.shape
    }

    pub fn indices(&self) -> &[usize] {
        &self.indices
    }
}

/// Stride-1 SAME max-pool over a `window`×`window` neighbourhood centred at
/// each pixel. Out-of-bounds positions are ignored (−∞ padding). Ties are
/// resolved to the smallest flat input index.
pub fn maxpool_same_stride1(input: &Tensor, window: usize) -> Result<(Tensor, ArgmaxMap)> {
    if window == 0 || window.is_multiple_of(2) {
        return Err(Error::invalid(format!(
            "max-pool window must be odd, got {window}"
        )));
    }
    let r = window / 2;
    let [batch, chans, h, w] = input.shape();
    let hw = h * w;
    let mut out = Tensor::zeros(input.shape());
    let mut indices = vec![0usize; input.len()];
    // horizontal pass: per pixel, max over the row segment and its column
    let mut row_val = vec![0.0; hw];
    let mut row_col = vec![0usize; hw];
    for plane_idx in 0..batch * chans {
        let base = plane_idx * hw;
        let plane = &input.data()[base..base + hw];
        for i in 0..h {
            let row = &plane[i * w..(i + 1) * w];
            for j in 0..w {
                let lo = j.saturating_sub(r);
                let hi = (j + r).min(w - 1);
                let mut best = lo;
                for jj in lo + 1..=hi {
                    if row[jj] > row[best] {
                        best = jj;
                    }
                }
                row_val[i * w + j] = row[best];
                row_col[i * w + j] = best;
            }
        }
        let out_plane = &mut out.data_mut()[base..base + hw];
        for i in 0..h {
            let lo = i.saturating_sub(r);
            let hi = (i + r).min(h - 1);
            for j in 0..w {
                let mut best = lo;
                for ii in lo + 1..=hi {
                    if row_val[ii * w + j] > row_val[best * w + j] {
                        best = ii;
                    }
                }
                out_plane[i * w + j] = row_val[best * w + j];
                indices[base + i * w + j] = base + best * w + row_col[best * w + j];
            }
        }
    }
    Ok((
        out,
        ArgmaxMap {
            shape: input.shape(),
            indices,
        },
    ))
}

/// Routes each upstream value to the input position that won its window.
pub fn maxpool_backward(argmax: &ArgmaxMap, upstream: &Tensor) -> Result<Tensor> {
    if argmax.shape != upstream.shape() {
        return Err(Error::invalid(format!(
            "max-pool backward: argmax map shape {:?} != upstream shape {:?}",
            argmax.shape,
            upstream.shape()
        )));
    }
    let mut grad = Tensor::zeros(argmax.shape);
    let g = grad.data_mut();
    for (&idx, &u) in argmax.indices.iter().zip(upstream.data()) {
        g[idx] += u;
    }
    Ok(grad)
}

pub fn hadamard(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    a.ensure_same_shape(b, "hadamard")?;
    let data = a.data().iter().zip(b.data()).map(|(x, y)| x * y).collect();
    Tensor::from_vec(a.shape(), data)
}

/// Sum of squared elements.
pub fn sq_norm(a: &Tensor) -> f64 {
    a.data().iter().map(|v| v * v).sum()
}
