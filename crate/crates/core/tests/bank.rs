mod common;

use common::random_array;
use mulpro_core::bank::{attention, class_prototypes, logits, PrototypeBank};
use mulpro_core::numeric::SeededRng;
use proptest::prelude::*;

fn random_bank(k: usize, m: usize, d: usize, rng: &mut SeededRng) -> PrototypeBank {
    PrototypeBank::from_omega(random_array(&[d, m, k], rng)).unwrap()
}

#[test]
fn attention_matches_triple_loop() {
    let mut rng = SeededRng::new(3);
    let (d, m, k, n) = (5, 3, 4, 7);
    let z = random_array(&[d, n], &mut rng);
    let bank = random_bank(k, m, d, &mut rng);
    let att = attention(&z, &bank).unwrap();
    assert_eq!(att.as_array().shape(), [n, m, k]);
    for p in 0..n {
        for mm in 0..m {
            for c in 0..k {
                let mut s = 0.0;
                for dd in 0..d {
                    s += z.get(&[dd, p]) * bank.omega().get(&[dd, mm, c]);
                }
                assert!((att.get(p, mm, c) - s).abs() < 1e-12);
            }
        }
    }
}

#[test]
fn attention_rejects_dimension_mismatch() {
    let mut rng = SeededRng::new(4);
    let z = random_array(&[4, 3], &mut rng);
    let bank = random_bank(2, 2, 5, &mut rng);
    assert!(attention(&z, &bank).is_err());
}

#[test]
fn initial_prototypes_have_unit_expected_norm() {
    let bank = PrototypeBank::init(10, 100, 32, &mut SeededRng::new(17)).unwrap();
    let mut total = 0.0;
    for c in 0..10 {
        for m in 0..100 {
            total += bank.prototype(m, c).iter().map(|v| v * v).sum::<f64>();
        }
    }
    let mean = total / 1000.0;
    assert!((mean - 1.0).abs() < 0.1, "mean squared norm {mean}");
}

#[test]
fn initial_prototypes_are_spread_out() {
    let bank = PrototypeBank::init(1, 10, 32, &mut SeededRng::new(0)).unwrap();
    let p: Vec<Vec<f64>> = (0..10).map(|m| bank.prototype(m, 0)).collect();
    let mut worst = f64::NEG_INFINITY;
    for i in 0..10 {
        for j in 0..10 {
            if i != j {
                let dot: f64 = p[i].iter().zip(&p[j]).map(|(a, b)| a * b).sum();
                let ni = p[i].iter().map(|v| v * v).sum::<f64>().sqrt();
                let nj = p[j].iter().map(|v| v * v).sum::<f64>().sqrt();
                worst = worst.max(dot / (ni * nj));
            }
        }
    }
    assert!(worst < 0.9, "max cosine {worst}");
    assert!((bank.max_within_class_cosine() - worst).abs() < 1e-12);
}

#[test]
fn class_prototypes_picks_columns_by_class() {
    let mut rng = SeededRng::new(9);
    let (d, m, k) = (3, 4, 5);
    let bank = random_bank(k, m, d, &mut rng);
    let k_hat = [4, 0, 2, 2, 1, 3];
    let st = class_prototypes(&bank, &k_hat).unwrap();
    assert_eq!(st.shape(), [d, m, k_hat.len()]);
    for (p, &c) in k_hat.iter().enumerate() {
        for mm in 0..m {
            assert_eq!(bank.prototype(mm, c), (0..d).map(|dd| st.get(&[dd, mm, p])).collect::<Vec<_>>());
        }
    }
    assert!(class_prototypes(&bank, &[5]).is_err());
}

#[test]
fn ties_go_to_the_lowest_index() {
    let z = mulpro_core::numeric::DenseArray::from_vec(&[1, 1], vec![1.0]).unwrap();
    let omega = mulpro_core::numeric::DenseArray::from_vec(&[1, 2, 2], vec![0.5, 0.5, 0.5, 0.5]).unwrap();
    let bank = PrototypeBank::from_omega(omega).unwrap();
    let (_, rec) = logits(&attention(&z, &bank).unwrap());
    assert_eq!((rec.k_hat[0], rec.m_hat[0]), (0, 0));
    assert_eq!(rec.class_winners, [0, 0]);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn maxpool_is_consistent(seed in any::<u64>(), k in 1usize..5, m in 1usize..5, n in 1usize..8) {
        let mut rng = SeededRng::new(seed);
        let d = 4;
        let z = random_array(&[d, n], &mut rng);
        let bank = random_bank(k, m, d, &mut rng);
        let att = attention(&z, &bank).unwrap();
        let (l, rec) = logits(&att);
        prop_assert_eq!(l.shape(), [k, n]);
        for p in 0..n {
            let mut best = f64::NEG_INFINITY;
            for c in 0..k {
                let top = (0..m).map(|mm| att.get(p, mm, c)).fold(f64::NEG_INFINITY, f64::max);
                prop_assert_eq!(l.get(&[c, p]), top);
                prop_assert_eq!(att.get(p, rec.winner(p, c), c), top);
                best = best.max(top);
            }
            prop_assert_eq!(l.get(&[rec.k_hat[p], p]), best);
            prop_assert_eq!(rec.m_hat[p], rec.winner(p, rec.k_hat[p]));
            for c in 0..k {
                for mm in 0..m {
                    prop_assert!(att.get(p, rec.m_hat[p], rec.k_hat[p]) >= att.get(p, mm, c));
                }
            }
        }
    }

    #[test]
    fn positive_feature_scaling_keeps_winners(seed in any::<u64>(), e in -3i32..4) {
        let mut rng = SeededRng::new(seed);
        let z = random_array(&[4, 6], &mut rng);
        let bank = random_bank(3, 3, 4, &mut rng);
        let scaled = z.scaled(2f64.powi(e));
        let (_, a) = logits(&attention(&z, &bank).unwrap());
        let (_, b) = logits(&attention(&scaled, &bank).unwrap());
        prop_assert_eq!(a, b);
    }
}
