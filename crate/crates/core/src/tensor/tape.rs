use super::kernels::{self, ConvGeometry};
use super::Tensor;
use crate::error::{Error, Result};

/// Handle to a node recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Conv2d {
        input: Var,
        weight: Var,
        bias: Option<Var>,
        geometry: ConvGeometry,
    },
    BatchNorm {
        input: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
        train: bool,
    },
    Relu {
        input: Var,
    },
    MaxPool {
        input: Var,
        argmax: Vec<usize>,
    },
    GlobalAvgPool {
        input: Var,
    },
    Linear {
        input: Var,
        weight: Var,
        bias: Option<Var>,
    },
    Add {
        lhs: Var,
        rhs: Var,
    },
    Mul {
        lhs: Var,
        rhs: Var,
    },
    Sum {
        input: Var,
    },
    SoftmaxCrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Vec<f64>,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
}

/// Batch statistics produced by a train-mode batch normalization.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchNormOutput {
    pub output: Var,
    /// Per-channel batch mean (train mode only).
    pub batch_mean: Option<Vec<f64>>,
    /// Per-channel unbiased batch variance (train mode only).
    pub batch_var: Option<Vec<f64>>,
}

/// Define-by-run record of one forward evaluation.
///
/// A tape is built fresh for every forward pass and never shared between
/// threads; parameters enter as leaves and are copied in.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    check_finite: bool,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    /// Reject any op whose output contains NaN or infinity.
    pub fn with_finite_checks(mut self, enabled: bool) -> Self {
        self.check_finite = enabled;
        self
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn leaf(&mut self, tensor: Tensor, requires_grad: bool) -> Var {
        let mut value = tensor.with_requires_grad(requires_grad);
        value.zero_grad();
        self.nodes.push(Node { value, op: Op::Leaf });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, tensor: Tensor) -> Var {
        self.leaf(tensor, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// Gradient accumulated by the last [`Tape::backward`], if the node requires one.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].value.grad()
    }

    pub fn take_grad(&mut self, v: Var) -> Option<Vec<f64>> {
        self.nodes[v.0].value.take_grad()
    }

    fn requires(&self, v: Var) -> bool {
        self.nodes[v.0].value.requires_grad()
    }

    fn push(&mut self, op_name: &'static str, value: Tensor, requires_grad: bool, op: Op) -> Result<Var> {
        if self.check_finite {
            value.check_finite(op_name)?;
        }
        self.nodes.push(Node {
            value: value.with_requires_grad(requires_grad),
            op,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    pub fn conv2d(
        &mut self,
        input: Var,
        weight: Var,
        bias: Option<Var>,
        stride: usize,
        padding: usize,
    ) -> Result<Var> {
        let [n, c, h, w] = self.value(input).dims4("conv2d input")?;
        let [o, ci, kh, kw] = self.value(weight).dims4("conv2d weight")?;
        if stride == 0 {
            return Err(Error::shape("conv2d stride must be positive"));
        }
        if ci != c {
            return Err(Error::shape(format!(
                "conv2d input has {c} channels but weight expects {ci}"
            )));
        }
        if kh != kw {
            return Err(Error::shape(format!("conv2d kernel must be square, got {kh}x{kw}")));
        }
        if h + 2 * padding < kh || w + 2 * padding < kw {
            return Err(Error::shape(format!(
                "conv2d kernel {kh} does not fit input {h}x{w} with padding {padding}"
            )));
        }
        if let Some(b) = bias {
            if self.value(b).shape() != [o] {
                return Err(Error::shape(format!(
                    "conv2d bias shape {:?}, expected [{o}]",
                    self.value(b).shape()
                )));
            }
        }
        let geometry = ConvGeometry {
            batch: n,
            in_channels: c,
            height: h,
            width: w,
            out_channels: o,
            kernel: kh,
            stride,
            padding,
        };
        let out = kernels::conv2d_forward(
            &geometry,
            self.value(input).data(),
            self.value(weight).data(),
            bias.map(|b| self.value(b).data()),
        );
        let shape = vec![n, o, geometry.out_height(), geometry.out_width()];
        let rg = self.requires(input) || self.requires(weight) || bias.is_some_and(|b| self.requires(b));
        self.push(
            "conv2d",
            Tensor::new(shape, out)?,
            rg,
            Op::Conv2d {
                input,
                weight,
                bias,
                geometry,
            },
        )
    }

    /// Per-channel batch normalization over (N, H, W) for rank-4 input, or
    /// over N for rank-2 input.
    ///
    /// Train mode normalizes with batch statistics and reports them so the
    /// caller can update its running estimates; eval mode uses `running_mean`
    /// and `running_var` only.
    #[allow(clippy::too_many_arguments)]
    pub fn batch_norm(
        &mut self,
        input: Var,
        gamma: Var,
        beta: Var,
        running_mean: &[f64],
        running_var: &[f64],
        train: bool,
        eps: f64,
    ) -> Result<BatchNormOutput> {
        let x = self.value(input);
        let (n, c, spatial) = match x.shape() {
            &[n, c, h, w] => (n, c, h * w),
            &[n, c] => (n, c, 1),
            s => return Err(Error::shape(format!("batch_norm expects rank 2 or 4, got {s:?}"))),
        };
        for (name, v) in [("gamma", gamma), ("beta", beta)] {
            if self.value(v).shape() != [c] {
                return Err(Error::shape(format!(
                    "batch_norm {name} shape {:?}, expected [{c}]",
                    self.value(v).shape()
                )));
            }
        }
        if running_mean.len() != c || running_var.len() != c {
            return Err(Error::shape("batch_norm running statistics length mismatch"));
        }
        if train && n < 2 {
            return Err(Error::invalid(
                "batch_norm in train mode needs a batch of at least 2 samples",
            ));
        }
        let m = (n * spatial) as f64;
        let data = x.data();
        let (mean, var_biased) = if train {
            let mut mean = vec![0.0; c];
            let mut var = vec![0.0; c];
            for (ch, (mu, va)) in mean.iter_mut().zip(var.iter_mut()).enumerate() {
                let mut s = 0.0;
                for b in 0..n {
                    let off = (b * c + ch) * spatial;
                    s += data[off..off + spatial].iter().sum::<f64>();
                }
                *mu = s / m;
                let mut ss = 0.0;
                for b in 0..n {
                    let off = (b * c + ch) * spatial;
                    ss += data[off..off + spatial].iter().map(|v| (v - *mu).powi(2)).sum::<f64>();
                }
                *va = ss / m;
            }
            (mean, var)
        } else {
            (running_mean.to_vec(), running_var.to_vec())
        };
        let inv_std: Vec<f64> = var_biased.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let g = self.value(gamma).data();
        let bt = self.value(beta).data();
        let mut xhat = vec![0.0; data.len()];
        let mut out = vec![0.0; data.len()];
        for b in 0..n {
            for ch in 0..c {
                let off = (b * c + ch) * spatial;
                for i in off..off + spatial {
                    let xh = (data[i] - mean[ch]) * inv_std[ch];
                    xhat[i] = xh;
                    out[i] = g[ch] * xh + bt[ch];
                }
            }
        }
        let shape = x.shape().to_vec();
        let rg = self.requires(input) || self.requires(gamma) || self.requires(beta);
        let (batch_mean, batch_var) = if train {
            let unbiased = var_biased.iter().map(|v| v * m / (m - 1.0)).collect();
            (Some(mean), Some(unbiased))
        } else {
            (None, None)
        };
        let output = self.push(
            "batch_norm",
            Tensor::new(shape, out)?,
            rg,
            Op::BatchNorm {
                input,
                gamma,
                beta,
                xhat,
                inv_std,
                train,
            },
        )?;
        Ok(BatchNormOutput {
            output,
            batch_mean,
            batch_var,
        })
    }

    pub fn relu(&mut self, input: Var) -> Result<Var> {
        let x = self.value(input);
        let out: Vec<f64> = x.data().iter().map(|&v| if v > 0.0 { v } else { 0.0 }).collect();
        let t = Tensor::new(x.shape().to_vec(), out)?;
        let rg = self.requires(input);
        self.push("relu", t, rg, Op::Relu { input })
    }

    /// Max pooling with a square `size` window and no padding; trailing rows
    /// and columns that do not fill a window are dropped.
    pub fn max_pool2d(&mut self, input: Var, size: usize, stride: usize) -> Result<Var> {
        let dims = self.value(input).dims4("max_pool2d input")?;
        let [n, c, h, w] = dims;
        if size == 0 || stride == 0 || h < size || w < size {
            return Err(Error::shape(format!(
                "max_pool2d window {size} (stride {stride}) does not fit {h}x{w}"
            )));
        }
        let (out, argmax) = kernels::maxpool_forward(dims, size, stride, self.value(input).data());
        let shape = vec![n, c, (h - size) / stride + 1, (w - size) / stride + 1];
        let rg = self.requires(input);
        self.push("max_pool2d", Tensor::new(shape, out)?, rg, Op::MaxPool { input, argmax })
    }

    /// Mean over the spatial axes: N×C×H×W → N×C.
    pub fn global_avg_pool(&mut self, input: Var) -> Result<Var> {
        let [n, c, h, w] = self.value(input).dims4("global_avg_pool input")?;
        let hw = h * w;
        let out: Vec<f64> = self
            .value(input)
            .data()
            .chunks(hw)
            .map(|p| p.iter().sum::<f64>() / hw as f64)
            .collect();
        let rg = self.requires(input);
        self.push(
            "global_avg_pool",
            Tensor::new(vec![n, c], out)?,
            rg,
            Op::GlobalAvgPool { input },
        )
    }

    /// `x · Wᵀ + b` with `x` N×F and `W` O×F.
    pub fn linear(&mut self, input: Var, weight: Var, bias: Option<Var>) -> Result<Var> {
        let [n, f] = self.value(input).dims2("linear input")?;
        let [o, fi] = self.value(weight).dims2("linear weight")?;
        if f != fi {
            return Err(Error::shape(format!(
                "linear input has {f} features but weight expects {fi}"
            )));
        }
        let mut out = vec![0.0; n * o];
        kernels::gemm(
            n,
            f,
            o,
            self.value(input).data(),
            false,
            self.value(weight).data(),
            true,
            0.0,
            &mut out,
        );
        if let Some(b) = bias {
            let bv = self.value(b);
            if bv.shape() != [o] {
                return Err(Error::shape(format!("linear bias shape {:?}, expected [{o}]", bv.shape())));
            }
            for row in out.chunks_mut(o) {
                row.iter_mut().zip(bv.data()).for_each(|(v, b)| *v += b);
            }
        }
        let rg = self.requires(input) || self.requires(weight) || bias.is_some_and(|b| self.requires(b));
        self.push(
            "linear",
            Tensor::new(vec![n, o], out)?,
            rg,
            Op::Linear {
                input,
                weight,
                bias,
            },
        )
    }

    /// Elementwise sum of two identically shaped tensors (residual join).
    pub fn add(&mut self, lhs: Var, rhs: Var) -> Result<Var> {
        let (a, b) = (self.value(lhs), self.value(rhs));
        if a.shape() != b.shape() {
            return Err(Error::shape(format!(
                "add operands differ: {:?} vs {:?}",
                a.shape(),
                b.shape()
            )));
        }
        let out = a.data().iter().zip(b.data()).map(|(x, y)| x + y).collect();
        let t = Tensor::new(a.shape().to_vec(), out)?;
        let rg = self.requires(lhs) || self.requires(rhs);
        self.push("add", t, rg, Op::Add { lhs, rhs })
    }

    pub fn mul(&mut self, lhs: Var, rhs: Var) -> Result<Var> {
        let (a, b) = (self.value(lhs), self.value(rhs));
        if a.shape() != b.shape() {
            return Err(Error::shape(format!(
                "mul operands differ: {:?} vs {:?}",
                a.shape(),
                b.shape()
            )));
        }
        let out = a.data().iter().zip(b.data()).map(|(x, y)| x * y).collect();
        let t = Tensor::new(a.shape().to_vec(), out)?;
        let rg = self.requires(lhs) || self.requires(rhs);
        self.push("mul", t, rg, Op::Mul { lhs, rhs })
    }

    pub fn sum(&mut self, input: Var) -> Result<Var> {
        let s = self.value(input).data().iter().sum();
        let rg = self.requires(input);
        self.push("sum", Tensor::scalar(s), rg, Op::Sum { input })
    }

    /// Batch-mean softmax cross-entropy, stabilized by max subtraction.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let [n, k] = self.value(logits).dims2("logits")?;
        if labels.len() != n {
            return Err(Error::shape(format!("{} labels for a batch of {n}", labels.len())));
        }
        if let Some(&bad) = labels.iter().find(|&&y| y >= k) {
            return Err(Error::invalid(format!("label {bad} out of range for {k} classes")));
        }
        let data = self.value(logits).data();
        let mut probs = vec![0.0; n * k];
        let mut loss = 0.0;
        for i in 0..n {
            let row = &data[i * k..(i + 1) * k];
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let p = &mut probs[i * k..(i + 1) * k];
            let mut z = 0.0;
            for (pj, &v) in p.iter_mut().zip(row) {
                *pj = (v - max).exp();
                z += *pj;
            }
            p.iter_mut().for_each(|v| *v /= z);
            loss += max + z.ln() - row[labels[i]];
        }
        let rg = self.requires(logits);
        self.push(
            "softmax_cross_entropy",
            Tensor::scalar(loss / n as f64),
            rg,
            Op::SoftmaxCrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
        )
    }

    /// Reverse sweep from a scalar `loss`. Every node that requires a
    /// gradient and is reachable from `loss` ends up holding dLoss/dNode;
    /// contributions from fan-out accumulate additively.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).numel() != 1 {
            return Err(Error::shape(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        if self.requires(loss) {
            grads[loss.0] = Some(vec![1.0]);
        }
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, &g, &mut grads)?;
            grads[i] = Some(g);
        }
        for (node, g) in self.nodes.iter_mut().zip(grads) {
            match g {
                Some(g) if node.value.requires_grad() => node.value.set_grad(g)?,
                _ => node.value.zero_grad(),
            }
        }
        Ok(())
    }

    fn propagate(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) -> Result<()> {
        let wants = |v: Var| self.requires(v);
        match &self.nodes[i].op {
            Op::Leaf => {}
            Op::Conv2d {
                input,
                weight,
                bias,
                geometry,
            } => {
                if wants(*input) {
                    let dx = kernels::conv2d_backward_input(geometry, self.value(*weight).data(), g);
                    accumulate(grads, *input, dx);
                }
                let want_b = bias.is_some_and(wants);
                if wants(*weight) || want_b {
                    let (dw, db) =
                        kernels::conv2d_backward_params(geometry, self.value(*input).data(), g, want_b);
                    if wants(*weight) {
                        accumulate(grads, *weight, dw);
                    }
                    if let (Some(b), Some(db)) = (bias, db) {
                        accumulate(grads, *b, db);
                    }
                }
            }
            Op::BatchNorm {
                input,
                gamma,
                beta,
                xhat,
                inv_std,
                train,
            } => {
                let shape = self.value(*input).shape();
                let (n, c) = (shape[0], shape[1]);
                let spatial = xhat.len() / (n * c);
                let m = (n * spatial) as f64;
                let gam = self.value(*gamma).data();
                let mut sum_dy = vec![0.0; c];
                let mut sum_dy_xhat = vec![0.0; c];
                for b in 0..n {
                    for ch in 0..c {
                        let off = (b * c + ch) * spatial;
                        for j in off..off + spatial {
                            sum_dy[ch] += g[j];
                            sum_dy_xhat[ch] += g[j] * xhat[j];
                        }
                    }
                }
                if wants(*input) {
                    let mut dx = vec![0.0; g.len()];
                    for b in 0..n {
                        for ch in 0..c {
                            let off = (b * c + ch) * spatial;
                            let scale = gam[ch] * inv_std[ch];
                            for j in off..off + spatial {
                                dx[j] = if *train {
                                    scale * (g[j] - sum_dy[ch] / m - xhat[j] * sum_dy_xhat[ch] / m)
                                } else {
                                    scale * g[j]
                                };
                            }
                        }
                    }
                    accumulate(grads, *input, dx);
                }
                if wants(*gamma) {
                    accumulate(grads, *gamma, sum_dy_xhat);
                }
                if wants(*beta) {
                    accumulate(grads, *beta, sum_dy);
                }
            }
            Op::Relu { input } => {
                if wants(*input) {
                    let x = self.value(*input).data();
                    let dx = x.iter().zip(g).map(|(&v, &d)| if v > 0.0 { d } else { 0.0 }).collect();
                    accumulate(grads, *input, dx);
                }
            }
            Op::MaxPool { input, argmax } => {
                if wants(*input) {
                    let mut dx = vec![0.0; self.value(*input).numel()];
                    for (&idx, &d) in argmax.iter().zip(g) {
                        dx[idx] += d;
                    }
                    accumulate(grads, *input, dx);
                }
            }
            Op::GlobalAvgPool { input } => {
                if wants(*input) {
                    let x = self.value(*input);
                    let hw = x.shape()[2] * x.shape()[3];
                    let mut dx = vec![0.0; x.numel()];
                    for (plane, &d) in dx.chunks_mut(hw).zip(g) {
                        plane.fill(d / hw as f64);
                    }
                    accumulate(grads, *input, dx);
                }
            }
            Op::Linear {
                input,
                weight,
                bias,
            } => {
                let x = self.value(*input);
                let w = self.value(*weight);
                let (n, f) = (x.shape()[0], x.shape()[1]);
                let o = w.shape()[0];
                if wants(*input) {
                    let mut dx = vec![0.0; n * f];
                    kernels::gemm(n, o, f, g, false, w.data(), false, 0.0, &mut dx);
                    accumulate(grads, *input, dx);
                }
                if wants(*weight) {
                    let mut dw = vec![0.0; o * f];
                    kernels::gemm(o, n, f, g, true, x.data(), false, 0.0, &mut dw);
                    accumulate(grads, *weight, dw);
                }
                if let Some(b) = bias.filter(|b| wants(*b)) {
                    let mut db = vec![0.0; o];
                    for row in g.chunks(o) {
                        db.iter_mut().zip(row).for_each(|(a, v)| *a += v);
                    }
                    accumulate(grads, b, db);
                }
            }
            Op::Add { lhs, rhs } => {
                if wants(*lhs) {
                    accumulate(grads, *lhs, g.to_vec());
                }
                if wants(*rhs) {
                    accumulate(grads, *rhs, g.to_vec());
                }
            }
            Op::Mul { lhs, rhs } => {
                let (a, b) = (self.value(*lhs).data(), self.value(*rhs).data());
                if wants(*lhs) {
                    accumulate(grads, *lhs, g.iter().zip(b).map(|(d, v)| d * v).collect());
                }
                if wants(*rhs) {
                    accumulate(grads, *rhs, g.iter().zip(a).map(|(d, v)| d * v).collect());
                }
            }
            Op::Sum { input } => {
                if wants(*input) {
                    accumulate(grads, *input, vec![g[0]; self.value(*input).numel()]);
                }
            }
            Op::SoftmaxCrossEntropy {
                logits,
                labels,
                probs,
            } => {
                if wants(*logits) {
                    let n = labels.len();
                    let k = probs.len() / n;
                    let scale = g[0] / n as f64;
                    let mut dl: Vec<f64> = probs.iter().map(|p| p * scale).collect();
                    for (i, &y) in labels.iter().enumerate() {
                        dl[i * k + y] -= scale;
                    }
                    accumulate(grads, *logits, dl);
                }
            }
        }
        Ok(())
    }
}

fn accumulate(grads: &mut [Option<Vec<f64>>], v: Var, contribution: Vec<f64>) {
    match &mut grads[v.0] {
        Some(existing) => existing.iter_mut().zip(&contribution).for_each(|(a, b)| *a += b),
        slot @ None => *slot = Some(contribution),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn scalar_kernel_scales_input() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::ones(&[1, 1, 3, 3]));
        let w = tape.constant(t(&[1, 1, 1, 1], &[2.0]));
        let y = tape.conv2d(x, w, None, 1, 0).unwrap();
        assert_eq!(tape.value(y).shape(), &[1, 1, 3, 3]);
        assert!(tape.value(y).data().iter().all(|&v| v == 2.0));
    }

    #[test]
    fn zero_input_gives_zero_conv() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::zeros(&[2, 3, 5, 5]));
        let w = tape.constant(Tensor::full(&[4, 3, 3, 3], 0.7));
        let y = tape.conv2d(x, w, None, 2, 1).unwrap();
        assert_eq!(tape.value(y).shape(), &[2, 4, 3, 3]);
        assert!(tape.value(y).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn conv_channel_mismatch_is_dimension_error() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::zeros(&[1, 2, 5, 5]));
        let w = tape.constant(Tensor::zeros(&[4, 3, 3, 3]));
        assert!(matches!(tape.conv2d(x, w, None, 1, 0), Err(Error::Shape(_))));
    }

    #[test]
    fn relu_values() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[3], &[-1.0, 0.0, 2.0]));
        let y = tape.relu(x).unwrap();
        assert_eq!(tape.value(y).data(), &[0.0, 0.0, 2.0]);
    }

    #[test]
    fn gap_is_spatial_mean() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[1, 2, 2, 2], &[1., 2., 3., 4., 0., 0., 0., 8.]));
        let y = tape.global_avg_pool(x).unwrap();
        assert_eq!(tape.value(y).shape(), &[1, 2]);
        assert_eq!(tape.value(y).data(), &[2.5, 2.0]);
    }

    #[test]
    fn residual_add_requires_same_shape() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::zeros(&[1, 2, 2, 2]));
        let b = tape.constant(Tensor::zeros(&[1, 2, 2, 1]));
        assert!(matches!(tape.add(a, b), Err(Error::Shape(_))));
    }

    #[test]
    fn uniform_logits_give_ln_k() {
        let mut tape = Tape::new();
        let l = tape.constant(Tensor::zeros(&[3, 10]));
        let loss = tape.softmax_cross_entropy(l, &[0, 4, 9]).unwrap();
        assert!((tape.value(loss).data()[0] - 10f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn confident_logit_is_stable() {
        let mut tape = Tape::new();
        let mut logits = vec![0.0; 10];
        logits[3] = 1000.0;
        let l = tape.constant(t(&[1, 10], &logits));
        let loss = tape.softmax_cross_entropy(l, &[3]).unwrap();
        let v = tape.value(loss).data()[0];
        assert!(v.is_finite() && v < 1e-6);
    }

    #[test]
    fn label_out_of_range_is_rejected() {
        let mut tape = Tape::new();
        let l = tape.constant(Tensor::zeros(&[1, 4]));
        assert!(matches!(
            tape.softmax_cross_entropy(l, &[4]),
            Err(Error::InvalidArgument(_))
        ));
    }

    #[test]
    fn sum_gradient_is_ones() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[2, 3], &[0.5, -1.0, 2.0, 3.0, 0.0, 1.0]), true);
        let s = tape.sum(x).unwrap();
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[1.0; 6]);
    }

    #[test]
    fn square_gradient_is_twice_input() {
        let data = [0.5, -1.0, 2.0, 3.0];
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[4], &data), true);
        let sq = tape.mul(x, x).unwrap();
        let s = tape.sum(sq).unwrap();
        tape.backward(s).unwrap();
        let expected: Vec<f64> = data.iter().map(|v| 2.0 * v).collect();
        assert_eq!(tape.grad(x).unwrap(), &expected[..]);
    }

    #[test]
    fn fan_out_gradients_accumulate() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[3], &[1.0, 2.0, 3.0]), true);
        let y = tape.add(x, x).unwrap();
        let z = tape.add(y, x).unwrap();
        let s = tape.sum(z).unwrap();
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[3.0; 3]);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::ones(&[2]), true);
        assert!(matches!(tape.backward(x), Err(Error::Shape(_))));
    }

    #[test]
    fn train_batch_norm_rejects_single_sample() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::ones(&[1, 2, 2, 2]));
        let g = tape.constant(Tensor::ones(&[2]));
        let b = tape.constant(Tensor::zeros(&[2]));
        let r = tape.batch_norm(x, g, b, &[0.0; 2], &[1.0; 2], true, 1e-5);
        assert!(matches!(r, Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn finite_checks_catch_overflow() {
        let mut tape = Tape::new().with_finite_checks(true);
        let x = tape.constant(Tensor::full(&[2], f64::MAX));
        assert!(matches!(tape.add(x, x), Err(Error::NonFinite { .. })));
    }
}
