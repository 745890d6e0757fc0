//! Exact (O(n²)) t-SNE.

use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seed;

const ENTROPY_TOL: f64 = 1e-5;
const MAX_BISECTIONS: usize = 200;
const MIN_PROB: f64 = 1e-12;
const MIN_GAIN: f64 = 0.01;
pub const MAX_POINTS: usize = 10_000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TsneConfig {
    pub perplexity: f64,
    pub iterations: usize,
    pub learning_rate: f64,
    pub early_exaggeration: f64,
    pub exaggeration_iterations: usize,
    pub initial_momentum: f64,
    pub final_momentum: f64,
    pub seed: u64,
}

impl Default for TsneConfig {
    fn default() -> Self {
        Self {
            perplexity: 30.0,
            iterations: 1000,
            learning_rate: 200.0,
            early_exaggeration: 12.0,
            exaggeration_iterations: 250,
            initial_momentum: 0.5,
            final_momentum: 0.8,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TsneResult {
    pub coords: Vec<[f64; 2]>,
    /// KL(P‖Q) after the last iteration.
    pub kl: f64,
    /// KL(P‖Q) (without exaggeration) when the exaggeration phase ended.
    pub kl_after_exaggeration: f64,
}

/// Symmetrized joint affinities in packed upper-triangular order
/// (`(0,1), (0,2), …, (1,2), …`) together with per-point calibration.
#[derive(Debug, Clone)]
pub struct Affinities {
    pub n: usize,
    pub joint: Vec<f64>,
    /// Entropy (nats) of each conditional distribution `p(·|i)`.
    pub entropies: Vec<f64>,
    pub betas: Vec<f64>,
}

fn row_offset(i: usize, n: usize) -> usize {
    i * n - i * (i + 1) / 2
}

/// Finds the precision `β` whose conditional distribution over `d2` has
/// entropy `target` (nats). Returns probabilities, entropy and `β`.
fn calibrate_row(d2: &[f64], target: f64) -> (Vec<f64>, f64, f64) {
    let dmin = d2.iter().copied().fold(f64::INFINITY, f64::min);
    let eval = |beta: f64| {
        let p: Vec<f64> = d2.iter().map(|&d| (-(d - dmin) * beta).exp()).collect();
        let sum: f64 = p.iter().sum();
        let weighted: f64 = p.iter().zip(d2).map(|(p, d)| p * (d - dmin)).sum();
        let h = sum.ln() + beta * weighted / sum;
        (p, sum, h)
    };
    let (mut beta, mut lo, mut hi) = (1.0, f64::NEG_INFINITY, f64::INFINITY);
    let (mut p, mut sum, mut h) = eval(beta);
    for _ in 0..MAX_BISECTIONS {
        let diff = h - target;
        if diff.abs() < ENTROPY_TOL {
            break;
        }
        if diff > 0.0 {
            lo = beta;
            beta = if hi.is_infinite() { beta * 2.0 } else { 0.5 * (beta + hi) };
        } else {
            hi = beta;
            beta = if lo.is_infinite() { beta / 2.0 } else { 0.5 * (beta + lo) };
        }
        (p, sum, h) = eval(beta);
    }
    p.iter_mut().for_each(|v| *v /= sum);
    (p, h, beta)
}

/// Perplexity-calibrated affinities of `n × d` row-major points.
pub fn joint_affinities(x: &[f64], d: usize, perplexity: f64) -> Result<Affinities> {
    let n = x.len() / d;
    let target = perplexity.ln();
    const CHUNK: usize = 128;
    let mut joint = vec![0.0; n * (n - 1) / 2];
    let mut entropies = Vec::with_capacity(n);
    let mut betas = Vec::with_capacity(n);
    for start in (0..n).step_by(CHUNK) {
        let rows: Vec<(Vec<f64>, f64, f64)> = (start..(start + CHUNK).min(n))
            .into_par_iter()
            .map(|i| {
                let xi = &x[i * d..(i + 1) * d];
                let d2: Vec<f64> = (0..n)
                    .filter(|&j| j != i)
                    .map(|j| xi.iter().zip(&x[j * d..(j + 1) * d]).map(|(a, b)| (a - b) * (a - b)).sum())
                    .collect();
                calibrate_row(&d2, target)
            })
            .collect();
        for (r, (p, h, beta)) in rows.into_iter().enumerate() {
            let i = start + r;
            // p skips the diagonal: entry k is point k (k < i) or k + 1.
            for (k, &v) in p.iter().enumerate() {
                let j = if k < i { k } else { k + 1 };
                let (a, b) = if i < j { (i, j) } else { (j, i) };
                joint[row_offset(a, n) + (b - a - 1)] += v;
            }
            entropies.push(h);
            betas.push(beta);
        }
    }
    let total = 2.0 * n as f64;
    joint.iter_mut().for_each(|v| *v = (*v / total).max(MIN_PROB));
    Ok(Affinities {
        n,
        joint,
        entropies,
        betas,
    })
}

/// KL(P‖Q) for embedding `y` (flat `n × 2`).
fn kl_divergence(aff: &Affinities, y: &[f64]) -> f64 {
    let n = aff.n;
    let mut z = 0.0;
    for i in 0..n {
        for j in i + 1..n {
            let (dx, dy) = (y[2 * i] - y[2 * j], y[2 * i + 1] - y[2 * j + 1]);
            z += 1.0 / (1.0 + dx * dx + dy * dy);
        }
    }
    let z = 2.0 * z;
    let mut kl = 0.0;
    for i in 0..n {
        let row = &aff.joint[row_offset(i, n)..row_offset(i + 1, n)];
        for (t, j) in (i + 1..n).enumerate() {
            let (dx, dy) = (y[2 * i] - y[2 * j], y[2 * i + 1] - y[2 * j + 1]);
            let q = (1.0 / (1.0 + dx * dx + dy * dy) / z).max(MIN_PROB);
            kl += row[t] * (row[t] / q).ln();
        }
    }
    2.0 * kl
}

const LANES: usize = 4;

/// KL gradient with affinities scaled by `exaggeration`, written to `grad`.
fn gradient(aff: &Affinities, y: &[f64], exaggeration: f64, grad: &mut [f64]) {
    let n = aff.n;
    // grad_i = 4 Σ_j (P_ij − num_ij/Z)·num_ij·(y_i − y_j), accumulated as
    // an attractive sum A and a repulsive sum R in one pass over pairs i < j.
    // Fixed-width lanes keep the summation order (and results) deterministic
    // while letting the inner loop vectorize.
    let xs: Vec<f64> = y.iter().step_by(2).copied().collect();
    let ys: Vec<f64> = y.iter().skip(1).step_by(2).copied().collect();
    let (mut ax, mut ay, mut rx, mut ry) = (vec![0.0; n], vec![0.0; n], vec![0.0; n], vec![0.0; n]);
    let mut z = [0.0; LANES];
    for i in 0..n {
        let row = &aff.joint[row_offset(i, n)..row_offset(i + 1, n)];
        let (xi, yi) = (xs[i], ys[i]);
        let (xj, yj) = (&xs[i + 1..], &ys[i + 1..]);
        let (axj, ayj, rxj, ryj) = (&mut ax[i + 1..], &mut ay[i + 1..], &mut rx[i + 1..], &mut ry[i + 1..]);
        let mut acc = [[0.0; LANES]; 4];
        let m = n - i - 1;
        let full = m - m % LANES;
        for b in (0..full).step_by(LANES) {
            for l in 0..LANES {
                let k = b + l;
                let (dx, dy) = (xi - xj[k], yi - yj[k]);
                let num = 1.0 / (1.0 + dx * dx + dy * dy);
                z[l] += num;
                let (pn, nn) = (row[k] * num, num * num);
                acc[0][l] += pn * dx;
                acc[1][l] += pn * dy;
                acc[2][l] += nn * dx;
                acc[3][l] += nn * dy;
                axj[k] -= pn * dx;
                ayj[k] -= pn * dy;
                rxj[k] -= nn * dx;
                ryj[k] -= nn * dy;
            }
        }
        for k in full..m {
            let (dx, dy) = (xi - xj[k], yi - yj[k]);
            let num = 1.0 / (1.0 + dx * dx + dy * dy);
            z[0] += num;
            let (pn, nn) = (row[k] * num, num * num);
            acc[0][0] += pn * dx;
            acc[1][0] += pn * dy;
            acc[2][0] += nn * dx;
            acc[3][0] += nn * dy;
            axj[k] -= pn * dx;
            ayj[k] -= pn * dy;
            rxj[k] -= nn * dx;
            ryj[k] -= nn * dy;
        }
        ax[i] += acc[0].iter().sum::<f64>();
        ay[i] += acc[1].iter().sum::<f64>();
        rx[i] += acc[2].iter().sum::<f64>();
        ry[i] += acc[3].iter().sum::<f64>();
    }
    let z = 2.0 * z.iter().sum::<f64>();
    for i in 0..n {
        grad[2 * i] = 4.0 * (exaggeration * ax[i] - rx[i] / z);
        grad[2 * i + 1] = 4.0 * (exaggeration * ay[i] - ry[i] / z);
    }
}

/// Embeds `n × d` row-major points in two dimensions.
pub fn tsne_embed(x: &[f64], d: usize, cfg: &TsneConfig) -> Result<TsneResult> {
    if d == 0 || !x.len().is_multiple_of(d) {
        return Err(Error::shape(format!("{} values do not form rows of {d}", x.len())));
    }
    let n = x.len() / d;
    if !(5..=MAX_POINTS).contains(&n) {
        return Err(Error::invalid(format!("exact t-SNE takes 5..={MAX_POINTS} points, got {n}")));
    }
    if !(cfg.perplexity > 0.0) || cfg.perplexity >= (n - 1) as f64 / 3.0 {
        return Err(Error::invalid(format!(
            "perplexity {} must be positive and below (n − 1)/3 = {:.2}",
            cfg.perplexity,
            (n - 1) as f64 / 3.0
        )));
    }
    if cfg.iterations <= cfg.exaggeration_iterations {
        return Err(Error::invalid("t-SNE needs more iterations than the exaggeration phase"));
    }
    let aff = joint_affinities(x, d, cfg.perplexity)?;
    let mut rng = seed::stream(cfg.seed, "tsne-init", 0);
    let normal = Normal::new(0.0, 1e-4).expect("valid std");
    let mut y: Vec<f64> = (0..2 * n).map(|_| normal.sample(&mut rng)).collect();
    let mut update = vec![0.0; 2 * n];
    let mut gains = vec![1.0f64; 2 * n];
    let mut grad = vec![0.0; 2 * n];
    let mut kl_after_exaggeration = f64::NAN;
    for it in 0..cfg.iterations {
        if it == cfg.exaggeration_iterations {
            kl_after_exaggeration = kl_divergence(&aff, &y);
        }
        let (exaggeration, momentum) = if it < cfg.exaggeration_iterations {
            (cfg.early_exaggeration, cfg.initial_momentum)
        } else {
            (1.0, cfg.final_momentum)
        };
        gradient(&aff, &y, exaggeration, &mut grad);
        for k in 0..2 * n {
            gains[k] = if (grad[k] > 0.0) != (update[k] > 0.0) {
                gains[k] + 0.2
            } else {
                (gains[k] * 0.8).max(MIN_GAIN)
            };
            update[k] = momentum * update[k] - cfg.learning_rate * gains[k] * grad[k];
            y[k] += update[k];
        }
        let (m0, m1) = y.chunks(2).fold((0.0, 0.0), |(a, b), p| (a + p[0], b + p[1]));
        for p in y.chunks_mut(2) {
            p[0] -= m0 / n as f64;
            p[1] -= m1 / n as f64;
        }
    }
    if y.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite { op: "tsne" });
    }
    let kl = kl_divergence(&aff, &y);
    Ok(TsneResult {
        coords: y.chunks(2).map(|p| [p[0], p[1]]).collect(),
        kl,
        kl_after_exaggeration,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand_distr::StandardNormal;

    fn clusters(per: usize, d: usize, sep: f64, seed_: u64) -> Vec<f64> {
        let mut rng = seed::stream(seed_, "tsne-test", 0);
        let mut x = Vec::with_capacity(2 * per * d);
        for c in 0..2 {
            for _ in 0..per {
                for k in 0..d {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    x.push(z + if k == 0 { c as f64 * sep } else { 0.0 });
                }
            }
        }
        x
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let x = clusters(6, 3, 4.0, 1);
        let aff = joint_affinities(&x, 3, 3.0).unwrap();
        let mut rng = seed::stream(2, "tsne-test", 1);
        let y: Vec<f64> = (0..24).map(|_| StandardNormal.sample(&mut rng)).collect();
        let mut g = vec![0.0; 24];
        gradient(&aff, &y, 1.0, &mut g);
        for k in [0, 5, 17] {
            let h = 1e-6;
            let mut yp = y.clone();
            yp[k] += h;
            let mut ym = y.clone();
            ym[k] -= h;
            let fd = (kl_divergence(&aff, &yp) - kl_divergence(&aff, &ym)) / (2.0 * h);
            assert!((fd - g[k]).abs() < 1e-6 * (1.0 + g[k].abs()), "{fd} vs {}", g[k]);
        }
    }

    #[test]
    fn perplexity_calibration() {
        let x = clusters(60, 5, 3.0, 3);
        let aff = joint_affinities(&x, 5, 10.0).unwrap();
        let target = 10f64.ln();
        for h in &aff.entropies {
            assert!((h - target).abs() < 1e-4, "{h}");
        }
        let total: f64 = aff.joint.iter().sum::<f64>() * 2.0;
        assert!((total - 1.0).abs() < 1e-6);
    }

    #[test]
    fn rejects_bad_sizes() {
        let x = clusters(2, 2, 1.0, 0);
        assert!(tsne_embed(&x, 2, &TsneConfig::default()).is_err());
        let x = clusters(20, 2, 1.0, 0);
        // (40 − 1)/3 = 13
        let cfg = TsneConfig {
            perplexity: 13.0,
            ..TsneConfig::default()
        };
        assert!(tsne_embed(&x, 2, &cfg).is_err());
    }

    #[test]
    fn deterministic() {
        let x = clusters(15, 4, 5.0, 4);
        let cfg = TsneConfig {
            perplexity: 5.0,
            iterations: 300,
            ..TsneConfig::default()
        };
        let a = tsne_embed(&x, 4, &cfg).unwrap();
        let b = tsne_embed(&x, 4, &cfg).unwrap();
        assert_eq!(a, b);
        assert!(a.kl < a.kl_after_exaggeration);
    }
}
