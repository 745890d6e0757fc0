mod common;

use layerprobe::analysis::{js_divergence, kde_grid, kde_pair, Bandwidth, BoundingBox};
use layerprobe::analysis::{joint_affinities, tsne_embed, TsneConfig};
use layerprobe::analysis::{harvest, pca_reduce};
use layerprobe::attack::AttackConfig;
use layerprobe::model::build_mini_resnet;
use layerprobe::Tensor;
use proptest::prelude::*;
use rand::Rng;

fn points() -> impl Strategy<Value = Vec<[f64; 2]>> {
    prop::collection::vec(prop::array::uniform2(-5.0f64..5.0), 3..40)
        .prop_filter("spread on both axes", |v| {
            let spread = |k: usize| {
                let (lo, hi) = v.iter().fold((f64::MAX, f64::MIN), |(a, b), p| (a.min(p[k]), b.max(p[k])));
                hi - lo
            };
            spread(0) > 0.1 && spread(1) > 0.1
        })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn kde_grid_matches_direct_sum(pts in points(), res in 4usize..24) {
        let bbox = BoundingBox::padded(&[&pts]).unwrap();
        let g = kde_grid(&pts, &bbox, res, Bandwidth::Scott).unwrap();
        let total: f64 = g.masses().iter().sum();
        prop_assert!((total - 1.0).abs() < 1e-12);
        for (r, c) in [(0, 0), (res / 2, res / 3), (res - 1, res - 1)] {
            let (x, y) = g.cell_center(r, c);
            let direct = common::brute_kde(&pts, g.bandwidth, x, y) / g.normalizer;
            prop_assert!((g.density[r * res + c] - direct).abs() <= 1e-10 * direct.max(1.0));
        }
    }

    #[test]
    fn js_is_bounded_and_symmetric(a in prop::collection::vec(0.0f64..1.0, 16), b in prop::collection::vec(0.0f64..1.0, 16)) {
        let js = js_divergence(&a, &b).unwrap();
        prop_assert!((0.0..=std::f64::consts::LN_2).contains(&js));
        prop_assert_eq!(js, js_divergence(&b, &a).unwrap());
        prop_assert!(js_divergence(&a, &a).unwrap() < 1e-15);
    }

    #[test]
    fn kde_pair_shares_the_box(a in points(), b in points()) {
        let (ga, gb) = kde_pair(&a, &b, 12, Bandwidth::Scott).unwrap();
        prop_assert_eq!(ga.bbox, gb.bbox);
        for p in a.iter().chain(&b) {
            prop_assert!(ga.bbox.x_min < p[0] && p[0] < ga.bbox.x_max);
            prop_assert!(ga.bbox.y_min < p[1] && p[1] < ga.bbox.y_max);
        }
    }
}

#[test]
fn disjoint_masses_reach_ln2() {
    let p = [0.5, 0.5, 0.0, 0.0];
    let q = [0.0, 0.0, 0.25, 0.75];
    assert!((js_divergence(&p, &q).unwrap() - std::f64::consts::LN_2).abs() < 1e-9);
    assert_eq!(js_divergence(&p, &p).unwrap(), 0.0);
}

#[test]
fn perplexity_calibration_on_clusters() {
    let x = common::two_clusters(60, 5, 4.0, 3);
    for perp in [5.0, 15.0, 30.0] {
        let a = joint_affinities(&x, 5, perp).unwrap();
        for h in &a.entropies {
            assert!((h - perp.ln()).abs() < 1e-4, "entropy {h} vs {}", perp.ln());
        }
    }
}

#[test]
fn tsne_separates_two_clusters() {
    let n = 50;
    let x = common::two_clusters(n, 10, 12.0, 1);
    let cfg = TsneConfig {
        perplexity: 10.0,
        iterations: 500,
        seed: 4,
        ..TsneConfig::default()
    };
    let r = tsne_embed(&x, 10, &cfg).unwrap();
    let centroid = |s: &[[f64; 2]]| {
        let k = s.len() as f64;
        [s.iter().map(|p| p[0]).sum::<f64>() / k, s.iter().map(|p| p[1]).sum::<f64>() / k]
    };
    let (a, b) = r.coords.split_at(n);
    let (ca, cb) = (centroid(a), centroid(b));
    // Every point sits nearer its own cluster's centroid.
    let d = |p: &[f64; 2], c: [f64; 2]| (p[0] - c[0]).hypot(p[1] - c[1]);
    assert!(a.iter().all(|p| d(p, ca) < d(p, cb)));
    assert!(b.iter().all(|p| d(p, cb) < d(p, ca)));
}

#[test]
fn pca_of_two_clusters_puts_the_gap_first() {
    let x = common::two_clusters(40, 6, 10.0, 2);
    let p = pca_reduce(&x, 6, 2).unwrap();
    assert!(p.components[0].abs() > 0.99, "leading axis {:?}", &p.components[..6]);
    assert!(p.explained_variance_ratio[0] > 0.8);
}

#[test]
fn harvest_pairs_clean_and_adversarial_samples() {
    let m = build_mini_resnet([1, 32, 32], 10, 1, 2, 0).unwrap();
    let mut r = common::rng(9);
    let x = Tensor::new(vec![6, 1, 32, 32], (0..6 * 1024).map(|_| r.gen::<f64>()).collect()).unwrap();
    let y = vec![0, 1, 2, 3, 4, 5];
    let attack = AttackConfig::pgd_eval(8.0 / 255.0, 2.0 / 255.0, 2);
    let s = harvest(&m, &x, &y, &["m_1", "m_3"], 4, Some(&attack), 1).unwrap();
    assert_eq!(s.len(), 2 * 2 * 6 * 4);
    for seg in ["m_1", "m_3"] {
        let clean: Vec<_> = s.iter().filter(|v| v.segment == seg && !v.adversarial).collect();
        let adv: Vec<_> = s.iter().filter(|v| v.segment == seg && v.adversarial).collect();
        assert_eq!(clean.len(), adv.len());
        for (c, a) in clean.iter().zip(&adv) {
            assert_eq!((c.image_id, c.position, c.label), (a.image_id, a.position, a.label));
        }
    }
}
