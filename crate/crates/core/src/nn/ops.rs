//! Layer kernels. The slice-level functions are what the network runs; the
//! [`Tensor`] wrappers at the bottom are the checked public surface.

use rand::Rng;

use super::{LayerParams, NnError};
use crate::tensor::Tensor;

/// `c = op(a) * op(b) + beta * c`, all row-major. `op(a)` is `m x k`,
/// `op(b)` is `k x n`; a transposed operand is stored the other way round.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_trans: bool,
    b: &[f64],
    b_trans: bool,
    beta: f64,
    c: &mut [f64],
) {
    debug_assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    let (rsa, csa) = if a_trans { (1, m) } else { (k, 1) };
    let (rsb, csb) = if b_trans { (1, k) } else { (n, 1) };
    // SAFETY: the strides above address exactly the m*k, k*n and m*n
    // elements whose presence the debug assertion checks.
    unsafe {
        matrixmultiply::dgemm(
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

/// Geometry of a stride-1 zero-padded convolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeom {
    pub in_c: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub out_c: usize,
    pub kernel: usize,
    pub pad: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeom {
    pub fn new(
        in_c: usize,
        in_h: usize,
        in_w: usize,
        out_c: usize,
        kernel: usize,
        pad: usize,
    ) -> Option<Self> {
        let side = |s: usize| (s + 2 * pad + 1).checked_sub(kernel).filter(|&o| o >= 1);
        Some(ConvGeom {
            in_c,
            in_h,
            in_w,
            out_c,
            kernel,
            pad,
            out_h: side(in_h)?,
            out_w: side(in_w)?,
        })
    }

    /// Rows of the unfolded input: `in_c * k * k`.
    pub fn patch_len(&self) -> usize {
        self.in_c * self.kernel * self.kernel
    }

    /// Output pixels per map.
    pub fn positions(&self) -> usize {
        self.out_h * self.out_w
    }

    pub fn in_len(&self) -> usize {
        self.in_c * self.in_h * self.in_w
    }

    pub fn out_len(&self) -> usize {
        self.out_c * self.positions()
    }
}

/// Unfolds `input` into `cols` (`patch_len x positions`), row index
/// `(c * k + p) * k + q` for kernel offset `(p, q)`.
pub(crate) fn im2col(g: &ConvGeom, input: &[f64], cols: &mut [f64]) {
    let k = g.kernel;
    let positions = g.positions();
    for c in 0..g.in_c {
        let plane = &input[c * g.in_h * g.in_w..(c + 1) * g.in_h * g.in_w];
        for p in 0..k {
            for q in 0..k {
                let row = (c * k + p) * k + q;
                let dst = &mut cols[row * positions..(row + 1) * positions];
                for i in 0..g.out_h {
                    let y = (i + p) as isize - g.pad as isize;
                    let line = &mut dst[i * g.out_w..(i + 1) * g.out_w];
                    if y < 0 || y >= g.in_h as isize {
                        line.fill(0.0);
                        continue;
                    }
                    let src = &plane[y as usize * g.in_w..(y as usize + 1) * g.in_w];
                    for (j, v) in line.iter_mut().enumerate() {
                        let x = (j + q) as isize - g.pad as isize;
                        *v = if x < 0 || x >= g.in_w as isize {
                            0.0
                        } else {
                            src[x as usize]
                        };
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: accumulates `cols` back into `grad_in`.
pub(crate) fn col2im(g: &ConvGeom, cols: &[f64], grad_in: &mut [f64]) {
    let k = g.kernel;
    let positions = g.positions();
    for c in 0..g.in_c {
        let plane = &mut grad_in[c * g.in_h * g.in_w..(c + 1) * g.in_h * g.in_w];
        for p in 0..k {
            for q in 0..k {
                let row = (c * k + p) * k + q;
                let src = &cols[row * positions..(row + 1) * positions];
                for i in 0..g.out_h {
                    let y = (i + p) as isize - g.pad as isize;
                    if y < 0 || y >= g.in_h as isize {
                        continue;
                    }
                    let dst = &mut plane[y as usize * g.in_w..(y as usize + 1) * g.in_w];
                    for (j, v) in src[i * g.out_w..(i + 1) * g.out_w].iter().enumerate() {
                        let x = (j + q) as isize - g.pad as isize;
                        if x >= 0 && x < g.in_w as isize {
                            dst[x as usize] += v;
                        }
                    }
                }
            }
        }
    }
}

/// `out = W * im2col(input) + b`. `cols` receives the unfolded input and is
/// needed again by [`conv_backward`].
pub(crate) fn conv_forward(
    g: &ConvGeom,
    weights: &[f64],
    bias: &[f64],
    input: &[f64],
    cols: &mut [f64],
    out: &mut [f64],
) {
    im2col(g, input, cols);
    let positions = g.positions();
    for (m, row) in out.chunks_exact_mut(positions).enumerate() {
        row.fill(bias[m]);
    }
    gemm(g.out_c, g.patch_len(), positions, weights, false, cols, false, 1.0, out);
}

/// Accumulates weight and bias gradients; writes the input gradient when
/// `grad_in` is given (`dcols` is scratch of the size of `cols`).
pub(crate) fn conv_backward(
    g: &ConvGeom,
    weights: &[f64],
    cols: &[f64],
    grad_out: &[f64],
    grad_w: &mut [f64],
    grad_b: &mut [f64],
    grad_in: Option<(&mut [f64], &mut [f64])>,
) {
    let positions = g.positions();
    let patch = g.patch_len();
    // dW += dOut * cols^T
    gemm(g.out_c, positions, patch, grad_out, false, cols, true, 1.0, grad_w);
    for (gb, row) in grad_b.iter_mut().zip(grad_out.chunks_exact(positions)) {
        *gb += row.iter().sum::<f64>();
    }
    if let Some((grad_in, dcols)) = grad_in {
        // dcols = W^T * dOut
        gemm(patch, g.out_c, positions, weights, true, grad_out, false, 0.0, dcols);
        grad_in.fill(0.0);
        col2im(g, dcols, grad_in);
    }
}

/// Geometry of a max-pooling layer; windows overflowing the input are dropped.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PoolGeom {
    pub c: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub window: usize,
    pub stride: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl PoolGeom {
    pub fn new(c: usize, in_h: usize, in_w: usize, window: usize, stride: usize) -> Option<Self> {
        if window == 0 || stride == 0 || window > in_h || window > in_w {
            return None;
        }
        Some(PoolGeom {
            c,
            in_h,
            in_w,
            window,
            stride,
            out_h: (in_h - window) / stride + 1,
            out_w: (in_w - window) / stride + 1,
        })
    }

    pub fn in_len(&self) -> usize {
        self.c * self.in_h * self.in_w
    }

    pub fn out_len(&self) -> usize {
        self.c * self.out_h * self.out_w
    }
}

/// Records the flat input index of each window maximum (first one on ties).
pub(crate) fn pool_forward(g: &PoolGeom, input: &[f64], out: &mut [f64], argmax: &mut [usize]) {
    let mut o = 0;
    for c in 0..g.c {
        let base = c * g.in_h * g.in_w;
        for i in 0..g.out_h {
            for j in 0..g.out_w {
                let mut best = f64::NEG_INFINITY;
                let mut at = base + i * g.stride * g.in_w + j * g.stride;
                for p in 0..g.window {
                    let row = base + (i * g.stride + p) * g.in_w + j * g.stride;
                    for (q, &v) in input[row..row + g.window].iter().enumerate() {
                        if v > best {
                            best = v;
                            at = row + q;
                        }
                    }
                }
                out[o] = best;
                argmax[o] = at;
                o += 1;
            }
        }
    }
}

pub(crate) fn pool_backward(grad_out: &[f64], argmax: &[usize], grad_in: &mut [f64]) {
    grad_in.fill(0.0);
    for (&g, &at) in grad_out.iter().zip(argmax) {
        grad_in[at] += g;
    }
}

/// `y = W x + b` with `W` stored `out x in`.
pub(crate) fn fc_forward(weights: &[f64], bias: &[f64], x: &[f64], y: &mut [f64]) {
    let in_dim = x.len();
    for ((v, row), b) in y.iter_mut().zip(weights.chunks_exact(in_dim)).zip(bias) {
        *v = b + dot(row, x);
    }
}

pub(crate) fn fc_backward(
    weights: &[f64],
    x: &[f64],
    grad_out: &[f64],
    grad_w: &mut [f64],
    grad_b: &mut [f64],
    grad_in: Option<&mut [f64]>,
) {
    let in_dim = x.len();
    for ((&g, gw), gb) in grad_out
        .iter()
        .zip(grad_w.chunks_exact_mut(in_dim))
        .zip(grad_b.iter_mut())
    {
        *gb += g;
        if g != 0.0 {
            for (w, &xi) in gw.iter_mut().zip(x) {
                *w += g * xi;
            }
        }
    }
    if let Some(dx) = grad_in {
        dx.fill(0.0);
        for (&g, row) in grad_out.iter().zip(weights.chunks_exact(in_dim)) {
            if g != 0.0 {
                for (d, &w) in dx.iter_mut().zip(row) {
                    *d += g * w;
                }
            }
        }
    }
}

#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub(crate) fn relu_inplace(x: &mut [f64]) {
    for v in x {
        if *v < 0.0 {
            *v = 0.0;
        }
    }
}

/// Zeroes the gradient wherever the rectified output is not positive; this
/// gives subgradient 0 at 0.
pub(crate) fn relu_backward_inplace(out: &[f64], grad: &mut [f64]) {
    for (g, &o) in grad.iter_mut().zip(out) {
        if o <= 0.0 {
            *g = 0.0;
        }
    }
}

/// Inverted dropout: `mask` holds 0 or `1 / (1 - p)` per element.
pub(crate) fn dropout_train<R: Rng + ?Sized>(x: &mut [f64], p: f64, rng: &mut R, mask: &mut [f64]) {
    let keep = 1.0 / (1.0 - p);
    for (v, m) in x.iter_mut().zip(mask.iter_mut()) {
        *m = if rng.random::<f64>() < p { 0.0 } else { keep };
        *v *= *m;
    }
}

/// Returns `-log softmax(logits)[label]` and writes `softmax - onehot` into
/// `grad`.
pub(crate) fn softmax_nll_into(logits: &[f64], label: usize, grad: &mut [f64]) -> f64 {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for (g, &z) in grad.iter_mut().zip(logits) {
        *g = (z - max).exp();
        sum += *g;
    }
    for g in grad.iter_mut() {
        *g /= sum;
    }
    grad[label] -= 1.0;
    sum.ln() - (logits[label] - max)
}

// ---------------------------------------------------------------------------
// Checked tensor API

fn chw_of(t: &Tensor) -> Result<(usize, usize, usize), NnError> {
    match t.shape() {
        [c, h, w] => Ok((*c, *h, *w)),
        s => Err(NnError::Shape(format!("expected a [C, H, W] tensor, got {s:?}"))),
    }
}

pub struct ConvGrads {
    pub input: Tensor,
    pub weights: Tensor,
    pub biases: Tensor,
}

fn conv_geom(input: &Tensor, params: &LayerParams, padding: usize) -> Result<ConvGeom, NnError> {
    let (c, h, w) = chw_of(input)?;
    let &[out_c, in_c, k, k2] = params.weights.shape() else {
        return Err(NnError::Shape(format!(
            "conv weights must be [out_c, in_c, k, k], got {:?}",
            params.weights.shape()
        )));
    };
    if k != k2 || params.biases.len() != out_c {
        return Err(NnError::Shape("inconsistent conv parameter shapes".into()));
    }
    if in_c != c {
        return Err(NnError::ChannelMismatch {
            expected: in_c,
            got: c,
        });
    }
    ConvGeom::new(c, h, w, out_c, k, padding).ok_or_else(|| {
        NnError::Shape(format!(
            "kernel {k} with padding {padding} leaves no output for {h}x{w} input"
        ))
    })
}

/// Stride-1 convolution with zero padding.
pub fn conv2d(input: &Tensor, params: &LayerParams, padding: usize) -> Result<Tensor, NnError> {
    let g = conv_geom(input, params, padding)?;
    let mut cols = vec![0.0; g.patch_len() * g.positions()];
    let mut out = vec![0.0; g.out_len()];
    conv_forward(
        &g,
        params.weights.data(),
        params.biases.data(),
        input.data(),
        &mut cols,
        &mut out,
    );
    Ok(Tensor::from_parts(vec![g.out_c, g.out_h, g.out_w], out))
}

pub fn conv2d_backward(
    input: &Tensor,
    params: &LayerParams,
    padding: usize,
    grad_out: &Tensor,
) -> Result<ConvGrads, NnError> {
    let g = conv_geom(input, params, padding)?;
    if grad_out.len() != g.out_len() {
        return Err(NnError::DimensionMismatch {
            expected: g.out_len(),
            got: grad_out.len(),
        });
    }
    let mut cols = vec![0.0; g.patch_len() * g.positions()];
    im2col(&g, input.data(), &mut cols);
    let mut dcols = vec![0.0; cols.len()];
    let mut gw = vec![0.0; params.weights.len()];
    let mut gb = vec![0.0; g.out_c];
    let mut gi = vec![0.0; g.in_len()];
    conv_backward(
        &g,
        params.weights.data(),
        &cols,
        grad_out.data(),
        &mut gw,
        &mut gb,
        Some((&mut gi, &mut dcols)),
    );
    Ok(ConvGrads {
        input: Tensor::from_parts(input.shape().to_vec(), gi),
        weights: Tensor::from_parts(params.weights.shape().to_vec(), gw),
        biases: Tensor::from_parts(vec![g.out_c], gb),
    })
}

/// Max pooling; returns the pooled maps and the flat input index chosen by
/// each output.
pub fn maxpool(input: &Tensor, k: usize, s: usize) -> Result<(Tensor, Vec<usize>), NnError> {
    if k == 0 || s == 0 {
        return Err(NnError::BadWindow { window: k, stride: s });
    }
    let (c, h, w) = chw_of(input)?;
    let g = PoolGeom::new(c, h, w, k, s).ok_or(NnError::BadWindow { window: k, stride: s })?;
    let mut out = vec![0.0; g.out_len()];
    let mut argmax = vec![0; g.out_len()];
    pool_forward(&g, input.data(), &mut out, &mut argmax);
    Ok((Tensor::from_parts(vec![c, g.out_h, g.out_w], out), argmax))
}

/// Routes each output gradient to its recorded argmax.
pub fn maxpool_backward(input_shape: &[usize], argmax: &[usize], grad_out: &Tensor) -> Tensor {
    let n = input_shape.iter().product();
    let mut gi = vec![0.0; n];
    pool_backward(grad_out.data(), argmax, &mut gi);
    Tensor::from_parts(input_shape.to_vec(), gi)
}

pub fn relu(input: &Tensor) -> Tensor {
    let mut data = input.data().to_vec();
    relu_inplace(&mut data);
    Tensor::from_parts(input.shape().to_vec(), data)
}

pub fn relu_backward(input: &Tensor, grad_out: &Tensor) -> Tensor {
    let data = input
        .data()
        .iter()
        .zip(grad_out.data())
        .map(|(&x, &g)| if x > 0.0 { g } else { 0.0 })
        .collect();
    Tensor::from_parts(input.shape().to_vec(), data)
}

pub struct FcGrads {
    pub input: Tensor,
    pub weights: Tensor,
    pub biases: Tensor,
}

fn fc_dims(input: &Tensor, params: &LayerParams) -> Result<(usize, usize), NnError> {
    let &[out, inp] = params.weights.shape() else {
        return Err(NnError::Shape(format!(
            "fc weights must be [out, in], got {:?}",
            params.weights.shape()
        )));
    };
    if params.biases.len() != out {
        return Err(NnError::Shape("fc bias length differs from output width".into()));
    }
    if input.len() != inp {
        return Err(NnError::DimensionMismatch {
            expected: inp,
            got: input.len(),
        });
    }
    Ok((out, inp))
}

/// `W x + b` over the flattened input.
pub fn fully_connected(input: &Tensor, params: &LayerParams) -> Result<Tensor, NnError> {
    let (out, _) = fc_dims(input, params)?;
    let mut y = vec![0.0; out];
    fc_forward(params.weights.data(), params.biases.data(), input.data(), &mut y);
    Ok(Tensor::from_vec(y))
}

pub fn fully_connected_backward(
    input: &Tensor,
    params: &LayerParams,
    grad_out: &Tensor,
) -> Result<FcGrads, NnError> {
    let (out, inp) = fc_dims(input, params)?;
    if grad_out.len() != out {
        return Err(NnError::DimensionMismatch {
            expected: out,
            got: grad_out.len(),
        });
    }
    let mut gw = vec![0.0; out * inp];
    let mut gb = vec![0.0; out];
    let mut gi = vec![0.0; inp];
    fc_backward(
        params.weights.data(),
        input.data(),
        grad_out.data(),
        &mut gw,
        &mut gb,
        Some(&mut gi),
    );
    Ok(FcGrads {
        input: Tensor::from_parts(input.shape().to_vec(), gi),
        weights: Tensor::from_parts(vec![out, inp], gw),
        biases: Tensor::from_vec(gb),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Inverted dropout in train mode, identity in eval mode.
pub fn dropout<R: Rng + ?Sized>(
    input: &Tensor,
    p_drop: f64,
    mode: Mode,
    rng: &mut R,
) -> Result<Tensor, NnError> {
    if !(0.0..1.0).contains(&p_drop) {
        return Err(NnError::BadDropout(p_drop));
    }
    let mut data = input.data().to_vec();
    if mode == Mode::Train && p_drop > 0.0 {
        let mut mask = vec![0.0; data.len()];
        dropout_train(&mut data, p_drop, rng, &mut mask);
    }
    Ok(Tensor::from_parts(input.shape().to_vec(), data))
}

/// Negative log likelihood of `label` under softmax(logits), and its
/// gradient with respect to the logits.
pub fn softmax_nll(logits: &Tensor, label: usize) -> Result<(f64, Tensor), NnError> {
    if label >= logits.len() {
        return Err(NnError::LabelOutOfRange {
            label,
            classes: logits.len(),
        });
    }
    let mut grad = vec![0.0; logits.len()];
    let loss = softmax_nll_into(logits.data(), label, &mut grad);
    Ok((loss, Tensor::from_parts(logits.shape().to_vec(), grad)))
}
