//! Raw convolution, pooling and matrix kernels over flat slices.
//!
//! Work is partitioned over the batch axis. Reductions across samples (weight
//! and bias gradients) are accumulated in fixed-size sample chunks that are
//! summed in chunk order, so results do not depend on the rayon pool size.

use rayon::prelude::*;

/// Samples per reduction chunk. Part of the numerical contract: changing it
/// changes the summation order of weight gradients.
const REDUCE_CHUNK: usize = 8;

/// `c = alpha * op(a) * op(b) + beta * c` for row-major operands, where
/// `op(a)` is m×k and `op(b)` is k×n.
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
    assert_eq!(a.len(), m * k);
    assert_eq!(b.len(), k * n);
    assert_eq!(c.len(), m * n);
    if m == 0 || n == 0 {
        return;
    }
    let (rsa, csa) = if a_trans { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_trans { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: the asserts above bound every index the strides can reach.
    unsafe {
        matrixmultiply::dgemm(
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

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct ConvGeometry {
    pub batch: usize,
    pub in_channels: usize,
    pub height: usize,
    pub width: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

impl ConvGeometry {
    pub fn out_height(&self) -> usize {
        (self.height + 2 * self.padding - self.kernel) / self.stride + 1
    }

    pub fn out_width(&self) -> usize {
        (self.width + 2 * self.padding - self.kernel) / self.stride + 1
    }

    fn col_rows(&self) -> usize {
        self.in_channels * self.kernel * self.kernel
    }

    fn col_cols(&self) -> usize {
        self.out_height() * self.out_width()
    }

    fn in_plane(&self) -> usize {
        self.in_channels * self.height * self.width
    }

    fn out_plane(&self) -> usize {
        self.out_channels * self.col_cols()
    }
}

fn im2col(g: &ConvGeometry, input: &[f64], cols: &mut [f64]) {
    let (ho, wo) = (g.out_height(), g.out_width());
    let k = g.kernel;
    for c in 0..g.in_channels {
        let plane = &input[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ki in 0..k {
            for kj in 0..k {
                let row = (c * k + ki) * k + kj;
                let dst = &mut cols[row * ho * wo..(row + 1) * ho * wo];
                for oh in 0..ho {
                    let ih = (oh * g.stride + ki) as isize - g.padding as isize;
                    let dst_row = &mut dst[oh * wo..(oh + 1) * wo];
                    if ih < 0 || ih >= g.height as isize {
                        dst_row.fill(0.0);
                        continue;
                    }
                    let src = &plane[ih as usize * g.width..(ih as usize + 1) * g.width];
                    for (ow, d) in dst_row.iter_mut().enumerate() {
                        let iw = (ow * g.stride + kj) as isize - g.padding as isize;
                        *d = if iw < 0 || iw >= g.width as isize {
                            0.0
                        } else {
                            src[iw as usize]
                        };
                    }
                }
            }
        }
    }
}

fn col2im_add(g: &ConvGeometry, cols: &[f64], out: &mut [f64]) {
    let (ho, wo) = (g.out_height(), g.out_width());
    let k = g.kernel;
    for c in 0..g.in_channels {
        let plane = &mut out[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ki in 0..k {
            for kj in 0..k {
                let row = (c * k + ki) * k + kj;
                let src = &cols[row * ho * wo..(row + 1) * ho * wo];
                for oh in 0..ho {
                    let ih = (oh * g.stride + ki) as isize - g.padding as isize;
                    if ih < 0 || ih >= g.height as isize {
                        continue;
                    }
                    let dst = &mut plane[ih as usize * g.width..(ih as usize + 1) * g.width];
                    for ow in 0..wo {
                        let iw = (ow * g.stride + kj) as isize - g.padding as isize;
                        if iw >= 0 && iw < g.width as isize {
                            dst[iw as usize] += src[oh * wo + ow];
                        }
                    }
                }
            }
        }
    }
}

pub(crate) fn conv2d_forward(
    g: &ConvGeometry,
    input: &[f64],
    weight: &[f64],
    bias: Option<&[f64]>,
) -> Vec<f64> {
    let (rows, cols_n) = (g.col_rows(), g.col_cols());
    let mut out = vec![0.0; g.batch * g.out_plane()];
    out.par_chunks_mut(g.out_plane())
        .zip(input.par_chunks(g.in_plane()))
        .for_each_init(
            || vec![0.0; rows * cols_n],
            |cols, (o, x)| {
                im2col(g, x, cols);
                gemm(g.out_channels, rows, cols_n, weight, false, cols, false, 0.0, o);
                if let Some(b) = bias {
                    for (oc, plane) in o.chunks_mut(cols_n).enumerate() {
                        plane.iter_mut().for_each(|v| *v += b[oc]);
                    }
                }
            },
        );
    out
}

/// Gradient of a convolution with respect to its input.
pub(crate) fn conv2d_backward_input(g: &ConvGeometry, weight: &[f64], grad_out: &[f64]) -> Vec<f64> {
    let (rows, cols_n) = (g.col_rows(), g.col_cols());
    let mut grad_in = vec![0.0; g.batch * g.in_plane()];
    grad_in
        .par_chunks_mut(g.in_plane())
        .zip(grad_out.par_chunks(g.out_plane()))
        .for_each_init(
            || vec![0.0; rows * cols_n],
            |dcols, (dx, dy)| {
                gemm(rows, g.out_channels, cols_n, weight, true, dy, false, 0.0, dcols);
                col2im_add(g, dcols, dx);
            },
        );
    grad_in
}

/// Gradient of a convolution with respect to its weight (and bias, when requested).
pub(crate) fn conv2d_backward_params(
    g: &ConvGeometry,
    input: &[f64],
    grad_out: &[f64],
    want_bias: bool,
) -> (Vec<f64>, Option<Vec<f64>>) {
    let (rows, cols_n) = (g.col_rows(), g.col_cols());
    let wlen = g.out_channels * rows;
    let partials: Vec<Vec<f64>> = input
        .par_chunks(g.in_plane() * REDUCE_CHUNK)
        .zip(grad_out.par_chunks(g.out_plane() * REDUCE_CHUNK))
        .map(|(xs, dys)| {
            let mut acc = vec![0.0; wlen];
            let mut cols = vec![0.0; rows * cols_n];
            for (x, dy) in xs.chunks(g.in_plane()).zip(dys.chunks(g.out_plane())) {
                im2col(g, x, &mut cols);
                gemm(g.out_channels, cols_n, rows, dy, false, &cols, true, 1.0, &mut acc);
            }
            acc
        })
        .collect();
    let mut grad_w = vec![0.0; wlen];
    for p in &partials {
        grad_w.iter_mut().zip(p).for_each(|(a, b)| *a += b);
    }
    let grad_b = want_bias.then(|| {
        let mut gb = vec![0.0; g.out_channels];
        for dy in grad_out.chunks(g.out_plane()) {
            for (oc, plane) in dy.chunks(cols_n).enumerate() {
                gb[oc] += plane.iter().sum::<f64>();
            }
        }
        gb
    });
    (grad_w, grad_b)
}

/// Max pooling without padding; returns outputs and the flat input index of
/// each window maximum (first maximum wins ties).
pub(crate) fn maxpool_forward(
    dims: [usize; 4],
    size: usize,
    stride: usize,
    input: &[f64],
) -> (Vec<f64>, Vec<usize>) {
    let [n, c, h, w] = dims;
    let ho = (h - size) / stride + 1;
    let wo = (w - size) / stride + 1;
    let mut out = Vec::with_capacity(n * c * ho * wo);
    let mut arg = Vec::with_capacity(n * c * ho * wo);
    for plane in 0..n * c {
        let base = plane * h * w;
        for oh in 0..ho {
            for ow in 0..wo {
                let mut best = base + oh * stride * w + ow * stride;
                for i in 0..size {
                    for j in 0..size {
                        let idx = base + (oh * stride + i) * w + ow * stride + j;
                        if input[idx] > input[best] {
                            best = idx;
                        }
                    }
                }
                out.push(input[best]);
                arg.push(best);
            }
        }
    }
    (out, arg)
}
