use layerprobe::attack::{evaluate, fgsm, pgd, pgd_with_losses, AttackConfig, TargetMode};
use layerprobe::data::SyntheticSpec;
use layerprobe::model::build_mini_resnet;
use layerprobe::{ModelGraph, Tensor};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn model(seed: u64) -> ModelGraph {
    build_mini_resnet([1, 32, 32], 10, 1, 2, seed).unwrap()
}

fn images(n: usize, seed: u64) -> (Tensor, Vec<usize>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x = Tensor::new(vec![n, 1, 32, 32], (0..n * 1024).map(|_| rng.gen::<f64>()).collect()).unwrap();
    let y = (0..n).map(|_| rng.gen_range(0..10)).collect();
    (x, y)
}

fn cfg(epsilon: f64, step: f64, iterations: usize, random_start: bool) -> AttackConfig {
    AttackConfig {
        epsilon,
        step_size: step,
        iterations,
        random_start,
        target_mode: TargetMode::TrueLabel,
        restarts: 1,
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn pgd_stays_in_ball_and_pixel_range(
        mseed in any::<u64>(),
        xseed in any::<u64>(),
        eps in 0.0f64..0.2,
        step_frac in 0.1f64..1.5,
        iters in 1usize..4,
        start in any::<bool>(),
        prediction in any::<bool>(),
    ) {
        let m = model(mseed);
        let (x, y) = images(2, xseed);
        let mut c = cfg(eps, (eps * step_frac).max(1e-6), iters, start);
        if prediction {
            c.target_mode = TargetMode::Prediction;
        }
        let adv = pgd(&m, &x, &y, &c, xseed ^ 7).unwrap();
        for (a, b) in adv.data().iter().zip(x.data()) {
            prop_assert!((a - b).abs() <= eps + 1e-9);
            prop_assert!((0.0..=1.0).contains(a));
        }
    }

    #[test]
    fn more_iterations_never_lower_the_kept_loss(mseed in any::<u64>(), xseed in any::<u64>(), k in 1usize..4) {
        let m = model(mseed);
        let (x, y) = images(3, xseed);
        let (_, few) = pgd_with_losses(&m, &x, &y, &cfg(0.03, 0.01, k, true), 5).unwrap();
        let (_, more) = pgd_with_losses(&m, &x, &y, &cfg(0.03, 0.01, k + 2, true), 5).unwrap();
        for (a, b) in few.iter().zip(&more) {
            prop_assert!(b >= a, "{b} < {a}");
        }
    }
}

#[test]
fn zero_budget_returns_input_bits() {
    let m = model(1);
    let (x, y) = images(4, 2);
    let adv = pgd(&m, &x, &y, &cfg(0.0, 0.01, 5, true), 3).unwrap();
    assert_eq!(adv, x);
    assert_eq!(fgsm(&m, &x, &y, 0.0, TargetMode::TrueLabel).unwrap(), x);
}

#[test]
fn single_step_without_start_is_fgsm() {
    let m = model(4);
    let (x, y) = images(4, 5);
    let eps = 8.0 / 255.0;
    let p = pgd(&m, &x, &y, &cfg(eps, eps, 1, false), 0).unwrap();
    assert_eq!(p, fgsm(&m, &x, &y, eps, TargetMode::TrueLabel).unwrap());
}

#[test]
fn zero_budget_evaluation_gives_equal_accuracies() {
    let m = model(6);
    let data = SyntheticSpec::new(10, 3, 32, 1).generate().unwrap();
    let r = evaluate(&m, &data, &cfg(0.0, 0.01, 3, true), 7, 0).unwrap();
    assert_eq!(r.robust_acc, r.clean_acc);
}

#[test]
fn attack_is_deterministic_under_seed() {
    let m = model(8);
    let (x, y) = images(3, 9);
    let c = cfg(0.05, 0.01, 3, true);
    assert_eq!(pgd(&m, &x, &y, &c, 42).unwrap(), pgd(&m, &x, &y, &c, 42).unwrap());
}
