//! Independent oracles shared by the integration suites.
#![allow(dead_code)]

use layerprobe::model::build_mini_resnet;
use layerprobe::{FreezeMask, Mode, Tape, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform(shape: &[usize], lo: f64, hi: f64, rng: &mut ChaCha8Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(lo..hi)).collect()).unwrap()
}

/// Direct six-loop convolution (NCHW input, OIKK weight), zero padding.
pub fn direct_conv(
    x: &Tensor,
    w: &Tensor,
    b: Option<&Tensor>,
    stride: usize,
    pad: usize,
) -> Tensor {
    let (n, c, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let (o, k) = (w.shape()[0], w.shape()[2]);
    let ho = (h + 2 * pad - k) / stride + 1;
    let wo = (wd + 2 * pad - k) / stride + 1;
    let mut out = vec![0.0; n * o * ho * wo];
    for bi in 0..n {
        for oc in 0..o {
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut acc = b.map_or(0.0, |b| b.data()[oc]);
                    for ic in 0..c {
                        for ky in 0..k {
                            for kx in 0..k {
                                let iy = (oy * stride + ky) as isize - pad as isize;
                                let ix = (ox * stride + kx) as isize - pad as isize;
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= wd as isize {
                                    continue;
                                }
                                let xv = x.data()[((bi * c + ic) * h + iy as usize) * wd + ix as usize];
                                let wv = w.data()[((oc * c + ic) * k + ky) * k + kx];
                                acc += xv * wv;
                            }
                        }
                    }
                    out[((bi * o + oc) * ho + oy) * wo + ox] = acc;
                }
            }
        }
    }
    Tensor::new(vec![n, o, ho, wo], out).unwrap()
}

pub const FD_STEP: f64 = 1e-5;

pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6)
}

/// Scalar loss builder: records a computation on the tape from the given inputs.
pub type LossFn<'a> = dyn Fn(&mut Tape, &[Var]) -> Var + 'a;

pub fn eval_loss(build: &LossFn, inputs: &[Tensor]) -> f64 {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
    let loss = build(&mut tape, &vars);
    tape.value(loss).data()[0]
}

pub fn analytic_grads(build: &LossFn, inputs: &[Tensor]) -> Vec<Vec<f64>> {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone(), true)).collect();
    let loss = build(&mut tape, &vars);
    tape.backward(loss).unwrap();
    vars.iter()
        .map(|&v| tape.grad(v).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; tape.value(v).numel()]))
        .collect()
}

pub fn central_difference(build: &LossFn, inputs: &[Tensor], which: usize, index: usize, h: f64) -> f64 {
    let mut plus = inputs.to_vec();
    plus[which].data_mut()[index] += h;
    let mut minus = inputs.to_vec();
    minus[which].data_mut()[index] -= h;
    (eval_loss(build, &plus) - eval_loss(build, &minus)) / (2.0 * h)
}

/// Outcome of a finite-difference sweep.
#[derive(Debug, Clone, Copy)]
pub struct GradCheck {
    pub probes: usize,
    pub max_rel_err: f64,
    /// Probes discarded because the loss is not smooth at that point
    /// (a ReLU or max-pool kink within the step).
    pub kinks_skipped: usize,
}

/// Compares tape gradients with central differences at `probes` randomly
/// chosen coordinates across all inputs. A coordinate where the step-h and
/// step-h/2 differences disagree sits on a kink; it is replaced by a fresh
/// draw and counted.
pub fn grad_check(build: &LossFn, inputs: &[Tensor], probes: usize, rng: &mut ChaCha8Rng) -> GradCheck {
    let analytic = analytic_grads(build, inputs);
    let total: usize = inputs.iter().map(Tensor::numel).sum();
    let mut worst: f64 = 0.0;
    let mut done = 0;
    let mut skipped = 0;
    while done < probes {
        let mut flat = rng.gen_range(0..total);
        let mut which = 0;
        while flat >= inputs[which].numel() {
            flat -= inputs[which].numel();
            which += 1;
        }
        let numeric = central_difference(build, inputs, which, flat, FD_STEP);
        let half = central_difference(build, inputs, which, flat, FD_STEP / 2.0);
        if rel_err(numeric, half) > 1e-5 {
            skipped += 1;
            assert!(skipped <= probes, "too many non-smooth probes");
            continue;
        }
        worst = worst.max(rel_err(analytic[which][flat], numeric));
        done += 1;
    }
    GradCheck {
        probes: done,
        max_rel_err: worst,
        kinks_skipped: skipped,
    }
}

/// Fixed random projection so that `sum(r ⊙ y)` exercises every output.
pub fn project(tape: &mut Tape, y: Var, seed: u64) -> Var {
    let shape = tape.value(y).shape().to_vec();
    let r = uniform(&shape, -1.0, 1.0, &mut rng(seed));
    let rv = tape.constant(r);
    let prod = tape.mul(y, rv).unwrap();
    tape.sum(prod).unwrap()
}


/// Finite-difference check of every differentiable layer type, each fed
/// random inputs in [-1, 1] (batch-norm scale in [0.5, 1.5]).
pub fn layer_checks(probes_each: usize) -> Vec<(&'static str, GradCheck)> {
    let mut g = rng(1);
    let mut out = Vec::new();
    let mut run = |name: &'static str, build: &LossFn, inputs: &[Tensor], seed: u64| {
        out.push((name, grad_check(build, inputs, probes_each, &mut rng(seed))));
    };

    let conv_in = vec![
        uniform(&[2, 3, 5, 5], -1.0, 1.0, &mut g),
        uniform(&[4, 3, 3, 3], -1.0, 1.0, &mut g),
        uniform(&[4], -1.0, 1.0, &mut g),
    ];
    let conv = |t: &mut Tape, v: &[Var]| {
        let y = t.conv2d(v[0], v[1], Some(v[2]), 2, 1).unwrap();
        project(t, y, 99)
    };
    run("conv2d", &conv, &conv_in, 2);

    let bn_in = vec![
        uniform(&[2, 3, 4, 4], -1.0, 1.0, &mut g),
        uniform(&[3], 0.5, 1.5, &mut g),
        uniform(&[3], -1.0, 1.0, &mut g),
    ];
    for (name, train) in [("batch_norm/train", true), ("batch_norm/eval", false)] {
        let bn = move |t: &mut Tape, v: &[Var]| {
            let out = t
                .batch_norm(v[0], v[1], v[2], &[0.1, -0.2, 0.0], &[1.0, 0.5, 2.0], train, 1e-5)
                .unwrap();
            project(t, out.output, 7)
        };
        run(name, &bn, &bn_in, 4);
    }

    let act_in = vec![uniform(&[2, 3, 6, 6], -1.0, 1.0, &mut g)];
    let relu = |t: &mut Tape, v: &[Var]| {
        let y = t.relu(v[0]).unwrap();
        project(t, y, 11)
    };
    run("relu", &relu, &act_in, 6);
    let pool = |t: &mut Tape, v: &[Var]| {
        let y = t.max_pool2d(v[0], 2, 2).unwrap();
        project(t, y, 12)
    };
    run("max_pool2d", &pool, &act_in, 7);
    let gap = |t: &mut Tape, v: &[Var]| {
        let y = t.global_avg_pool(v[0]).unwrap();
        project(t, y, 13)
    };
    run("global_avg_pool", &gap, &act_in, 8);

    let lin_in = vec![
        uniform(&[3, 5], -1.0, 1.0, &mut g),
        uniform(&[4, 5], -1.0, 1.0, &mut g),
        uniform(&[4], -1.0, 1.0, &mut g),
    ];
    let linear = |t: &mut Tape, v: &[Var]| {
        let y = t.linear(v[0], v[1], Some(v[2])).unwrap();
        project(t, y, 14)
    };
    run("linear", &linear, &lin_in, 9);

    let add_in = vec![uniform(&[2, 2, 3, 3], -1.0, 1.0, &mut g), uniform(&[2, 2, 3, 3], -1.0, 1.0, &mut g)];
    let add = |t: &mut Tape, v: &[Var]| {
        let y = t.add(v[0], v[1]).unwrap();
        let z = t.mul(y, v[0]).unwrap();
        project(t, z, 16)
    };
    run("residual_add", &add, &add_in, 17);

    let logits = vec![uniform(&[4, 5], -1.0, 1.0, &mut g)];
    let ce = |t: &mut Tape, v: &[Var]| t.softmax_cross_entropy(v[0], &[0, 3, 4, 1]).unwrap();
    run("softmax_cross_entropy", &ce, &logits, 18);
    out
}

/// dLoss/dParameter of a whole residual network at randomly chosen
/// coordinates, against central differences on the same network.
pub fn mini_resnet_probe(probes: usize, seed: u64) -> GradCheck {
    let model = build_mini_resnet([1, 32, 32], 10, 1, 4, seed).unwrap();
    let mut g = rng(seed + 1);
    let x = uniform(&[2, 1, 32, 32], 0.0, 1.0, &mut g);
    let labels = [3usize, 7];
    let mask = FreezeMask::all_trainable(&model);

    let loss_of = |m: &layerprobe::ModelGraph| {
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let fp = m.forward(&mut tape, xv, Mode::Train, Some(&mask)).unwrap();
        let l = tape.softmax_cross_entropy(fp.logits, &labels).unwrap();
        tape.value(l).data()[0]
    };

    let mut tape = Tape::new();
    let xv = tape.constant(x.clone());
    let fp = model.forward(&mut tape, xv, Mode::Train, Some(&mask)).unwrap();
    let l = tape.softmax_cross_entropy(fp.logits, &labels).unwrap();
    tape.backward(l).unwrap();

    let slots: Vec<(usize, usize)> = model
        .layers()
        .iter()
        .enumerate()
        .flat_map(|(i, layer)| (0..layer.params.len()).map(move |s| (i, s)))
        .collect();
    let mut worst: f64 = 0.0;
    let mut done = 0;
    let mut skipped = 0;
    while done < probes {
        let (layer, slot) = slots[g.gen_range(0..slots.len())];
        let idx = g.gen_range(0..model.layers()[layer].params[slot].numel());
        let analytic = tape.grad(fp.params[layer][slot]).unwrap()[idx];
        let fd = |h: f64| {
            let mut plus = model.clone();
            plus.layers_mut()[layer].params[slot].data_mut()[idx] += h;
            let mut minus = model.clone();
            minus.layers_mut()[layer].params[slot].data_mut()[idx] -= h;
            (loss_of(&plus) - loss_of(&minus)) / (2.0 * h)
        };
        let (numeric, half) = (fd(FD_STEP), fd(FD_STEP / 2.0));
        if rel_err(numeric, half) > 1e-5 {
            skipped += 1;
            assert!(skipped <= probes);
            continue;
        }
        worst = worst.max(rel_err(analytic, numeric));
        done += 1;
    }
    GradCheck {
        probes: done,
        max_rel_err: worst,
        kinks_skipped: skipped,
    }
}

/// Direct double sum of Gaussian product kernels at one point (unnormalized
/// over any grid).
pub fn brute_kde(coords: &[[f64; 2]], h: [f64; 2], x: f64, y: f64) -> f64 {
    let g = |d: f64, h: f64| (-0.5 * (d / h).powi(2)).exp() / (h * (2.0 * std::f64::consts::PI).sqrt());
    coords.iter().map(|p| g(x - p[0], h[0]) * g(y - p[1], h[1])).sum::<f64>() / coords.len() as f64
}

/// Two Gaussian clouds in `d` dimensions, centers `gap` apart along the
/// first axis; the first `n` rows are cluster 0.
pub fn two_clusters(n: usize, d: usize, gap: f64, seed: u64) -> Vec<f64> {
    let mut r = rng(seed);
    let normal = rand_distr::Normal::new(0.0, 1.0).unwrap();
    let mut out = Vec::with_capacity(2 * n * d);
    for c in 0..2 {
        for _ in 0..n {
            for k in 0..d {
                let v: f64 = rand_distr::Distribution::sample(&normal, &mut r);
                out.push(v + if k == 0 { c as f64 * gap } else { 0.0 });
            }
        }
    }
    out
}

/// A few-second training configuration for protocol-level tests.
pub fn quick_config(mode: layerprobe::train::TrainMode, epochs: usize, seed: u64) -> layerprobe::train::TrainConfig {
    use layerprobe::attack::AttackConfig;
    use layerprobe::train::{OptimizerConfig, Schedule, TrainConfig};
    let eps = 8.0 / 255.0;
    TrainConfig {
        mode,
        optimizer: OptimizerConfig::Adam { lr: 0.003 },
        weight_decay: 1e-4,
        batch_size: 10,
        epochs,
        schedule: Schedule::Cosine,
        clean_mix_ratio: 0.5,
        attack: if mode == layerprobe::train::TrainMode::FastAdversarial {
            AttackConfig::fast(eps, 1.25 * eps)
        } else {
            AttackConfig { iterations: 2, step_size: eps / 2.0, ..AttackConfig::madry_training() }
        },
        seed,
        augment: false,
        joint_batch_norm: true,
    }
}
