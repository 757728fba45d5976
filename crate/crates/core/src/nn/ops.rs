//! Single-sample tensor kernels on `(channels, height, width)` buffers.

/// `c[m x n] (+)= a[m x k] * b[k x n]` with explicit strides.
#[allow(clippy::too_many_arguments)]
#[inline]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f32],
    (rsa, csa): (usize, usize),
    b: &[f32],
    (rsb, csb): (usize, usize),
    beta: f32,
    c: &mut [f32],
) {
    debug_assert!(c.len() >= m * n);
    // SAFETY: strides and dimensions describe in-bounds views of the slices,
    // which is checked by the debug assertions at each call site.
    unsafe {
        matrixmultiply::sgemm(
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

pub(crate) fn im2col(input: &[f32], (c, h, w): (usize, usize, usize), k: usize) -> Vec<f32> {
    let pad = k / 2;
    let hw = h * w;
    let mut col = vec![0.0f32; c * k * k * hw];
    for ch in 0..c {
        let plane = &input[ch * hw..(ch + 1) * hw];
        for ky in 0..k {
            for kx in 0..k {
                let row = (ch * k + ky) * k + kx;
                let dst = &mut col[row * hw..(row + 1) * hw];
                for y in 0..h {
                    let sy = y as isize + ky as isize - pad as isize;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let src_row = &plane[sy as usize * w..(sy as usize + 1) * w];
                    let dst_row = &mut dst[y * w..(y + 1) * w];
                    let shift = kx as isize - pad as isize;
                    let x0 = (-shift).max(0) as usize;
                    let x1 = ((w as isize) - shift).min(w as isize) as usize;
                    if x0 < x1 {
                        let s0 = (x0 as isize + shift) as usize;
                        dst_row[x0..x1].copy_from_slice(&src_row[s0..s0 + (x1 - x0)]);
                    }
                }
            }
        }
    }
    col
}

fn col2im(col: &[f32], (c, h, w): (usize, usize, usize), k: usize) -> Vec<f32> {
    let pad = k / 2;
    let hw = h * w;
    let mut out = vec![0.0f32; c * hw];
    for ch in 0..c {
        let plane = &mut out[ch * hw..(ch + 1) * hw];
        for ky in 0..k {
            for kx in 0..k {
                let row = (ch * k + ky) * k + kx;
                let src = &col[row * hw..(row + 1) * hw];
                for y in 0..h {
                    let sy = y as isize + ky as isize - pad as isize;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let shift = kx as isize - pad as isize;
                    let x0 = (-shift).max(0) as usize;
                    let x1 = ((w as isize) - shift).min(w as isize) as usize;
                    let dst_row = &mut plane[sy as usize * w..(sy as usize + 1) * w];
                    for x in x0..x1 {
                        dst_row[(x as isize + shift) as usize] += src[y * w + x];
                    }
                }
            }
        }
    }
    out
}

/// Stride-1 "same" convolution. Returns the output and the im2col buffer
/// needed by the backward pass.
pub(crate) fn conv_forward(
    input: &[f32],
    shape: (usize, usize, usize),
    k: usize,
    out_c: usize,
    weight: &[f32],
    bias: &[f32],
) -> (Vec<f32>, Vec<f32>) {
    let (c, h, w) = shape;
    let hw = h * w;
    let ck = c * k * k;
    let col = if k == 1 {
        input.to_vec()
    } else {
        im2col(input, shape, k)
    };
    let mut out = vec![0.0f32; out_c * hw];
    for (o, chunk) in out.chunks_mut(hw).enumerate() {
        chunk.fill(bias[o]);
    }
    debug_assert_eq!(weight.len(), out_c * ck);
    gemm(out_c, ck, hw, weight, (ck, 1), &col, (hw, 1), 1.0, &mut out);
    (out, col)
}

/// Accumulates weight/bias gradients and returns the input gradient when
/// `need_input` is set.
#[allow(clippy::too_many_arguments)]
pub(crate) fn conv_backward(
    grad_out: &[f32],
    col: &[f32],
    shape: (usize, usize, usize),
    k: usize,
    out_c: usize,
    weight: &[f32],
    grad_weight: &mut [f32],
    grad_bias: &mut [f32],
    need_input: bool,
) -> Option<Vec<f32>> {
    let (c, h, w) = shape;
    let hw = h * w;
    let ck = c * k * k;
    gemm(out_c, hw, ck, grad_out, (hw, 1), col, (1, hw), 1.0, grad_weight);
    for (o, g) in grad_out.chunks(hw).enumerate() {
        grad_bias[o] += g.iter().sum::<f32>();
    }
    if !need_input {
        return None;
    }
    let mut grad_col = vec![0.0f32; ck * hw];
    gemm(ck, out_c, hw, weight, (1, ck), grad_out, (hw, 1), 0.0, &mut grad_col);
    if k == 1 {
        Some(grad_col)
    } else {
        Some(col2im(&grad_col, shape, k))
    }
}

pub(crate) fn relu_inplace(x: &mut [f32]) {
    for v in x {
        if *v < 0.0 {
            *v = 0.0;
        }
    }
}

/// Gradient through ReLU given the forward output.
pub(crate) fn relu_backward(grad: &mut [f32], output: &[f32]) {
    for (g, &o) in grad.iter_mut().zip(output) {
        if o <= 0.0 {
            *g = 0.0;
        }
    }
}

/// 2x2 max pooling with stride 2 (odd trailing rows/columns dropped).
pub(crate) fn maxpool_forward(input: &[f32], (c, h, w): (usize, usize, usize)) -> (Vec<f32>, Vec<u32>) {
    let (oh, ow) = (h / 2, w / 2);
    let mut out = vec![0.0f32; c * oh * ow];
    let mut arg = vec![0u32; c * oh * ow];
    for ch in 0..c {
        let base = ch * h * w;
        for y in 0..oh {
            for x in 0..ow {
                let mut best = base + (2 * y) * w + 2 * x;
                for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                    let idx = base + (2 * y + dy) * w + 2 * x + dx;
                    if input[idx] > input[best] {
                        best = idx;
                    }
                }
                let o = (ch * oh + y) * ow + x;
                out[o] = input[best];
                arg[o] = best as u32;
            }
        }
    }
    (out, arg)
}

pub(crate) fn maxpool_backward(grad: &[f32], argmax: &[u32], input_len: usize) -> Vec<f32> {
    let mut out = vec![0.0f32; input_len];
    for (&g, &i) in grad.iter().zip(argmax) {
        out[i as usize] += g;
    }
    out
}

/// `y = W x + b` with `W` stored row-major `(out, in)`.
pub(crate) fn linear_forward(x: &[f32], weight: &[f32], bias: &[f32]) -> Vec<f32> {
    let n_in = x.len();
    bias.iter()
        .enumerate()
        .map(|(o, &b)| {
            let row = &weight[o * n_in..(o + 1) * n_in];
            b + row.iter().zip(x).map(|(w, v)| w * v).sum::<f32>()
        })
        .collect()
}

pub(crate) fn linear_backward(
    grad_out: &[f32],
    x: &[f32],
    weight: &[f32],
    grad_weight: &mut [f32],
    grad_bias: &mut [f32],
) -> Vec<f32> {
    let n_in = x.len();
    let mut grad_in = vec![0.0f32; n_in];
    for (o, &g) in grad_out.iter().enumerate() {
        grad_bias[o] += g;
        let row = &weight[o * n_in..(o + 1) * n_in];
        let grow = &mut grad_weight[o * n_in..(o + 1) * n_in];
        for i in 0..n_in {
            grow[i] += g * x[i];
            grad_in[i] += g * row[i];
        }
    }
    grad_in
}
