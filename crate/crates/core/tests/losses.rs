mod common;

use common::random_array;
use mulpro_core::bank::{attention, class_prototypes, logits, PrototypeBank};
use mulpro_core::losses::{
    balance_loss, ce_loss, compute_losses, compute_terms, one_hot, prototype_diversity, subclass_averaging,
    subclass_averaging_cosine, subclass_averaging_frobenius, total_loss, AvgVariant, Lambdas, LossConfig, Reduction,
};
use mulpro_core::numeric::{finite_difference_grad, max_relative_error, DenseArray, SeededRng, EPS};

fn bank(omega: DenseArray) -> PrototypeBank {
    PrototypeBank::from_omega(omega).unwrap()
}

fn fd(f: impl Fn(&DenseArray) -> f64, x: &DenseArray) -> DenseArray {
    finite_difference_grad(f, x, 1e-6).unwrap()
}

fn cos(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|v| v * v).sum::<f64>().sqrt();
    let nb = b.iter().map(|v| v * v).sum::<f64>().sqrt();
    dot / (na * nb)
}

fn column(a: &DenseArray, p: usize) -> Vec<f64> {
    let (d, n) = (a.shape()[0], a.shape()[1]);
    (0..d).map(|dd| a.as_slice()[dd * n + p]).collect()
}

#[test]
fn cross_entropy_small_case() {
    // logits K x N
    let l = DenseArray::from_vec(&[2, 3], vec![1.0, 5.0, -0.5, 2.0, -3.0, 0.25]).unwrap();
    let labels = [1, 0, 0];
    let mask = [true, false, true];
    let y = one_hot(&labels, 2).unwrap();
    let (value, grad) = ce_loss(&l, &y, &mask).unwrap();

    let p0 = [1.0f64.exp(), 2.0f64.exp()];
    let p2 = [(-0.5f64).exp(), 0.25f64.exp()];
    let expect = (-(p0[1] / (p0[0] + p0[1])).ln() - (p2[0] / (p2[0] + p2[1])).ln()) / 2.0;
    assert!((value - expect).abs() < 1e-12);

    let s0 = p0[0] / (p0[0] + p0[1]);
    let s2 = p2[0] / (p2[0] + p2[1]);
    let expect_grad = [s0 / 2.0, 0.0, (s2 - 1.0) / 2.0, (1.0 - s0 - 1.0) / 2.0, 0.0, (1.0 - s2) / 2.0];
    for (g, e) in grad.as_slice().iter().zip(expect_grad) {
        assert!((g - e).abs() < 1e-12);
    }
}

fn ce_only() -> LossConfig {
    LossConfig {
        lambdas: Lambdas {
            ce: 1.0,
            ..Lambdas::ZERO
        },
        ..LossConfig::default()
    }
}

#[test]
fn cross_entropy_through_maxpool_matches_fd() {
    let mut rng = SeededRng::new(21);
    let (d, m, k, n) = (4, 3, 3, 5);
    let z = random_array(&[d, n], &mut rng);
    let omega = random_array(&[d, m, k], &mut rng);
    let labels = [0, 2, 1, 1, 0];
    let mask = [true, true, false, true, true];
    let cfg = ce_only();
    let (b, rec) = compute_losses(&z, &bank(omega.clone()), &labels, &mask, &cfg).unwrap();

    let by_omega = fd(
        |o| {
            let (bb, r) = compute_losses(&z, &bank(o.clone()), &labels, &mask, &cfg).unwrap();
            assert_eq!(r, rec, "winner changed under perturbation");
            bb.ce
        },
        &omega,
    );
    let by_z = fd(
        |zz| compute_losses(zz, &bank(omega.clone()), &labels, &mask, &cfg).unwrap().0.ce,
        &z,
    );
    assert!(max_relative_error(b.d_omega.as_slice(), by_omega.as_slice(), 1e-6) < 1e-5);
    assert!(max_relative_error(b.d_z.as_slice(), by_z.as_slice(), 1e-6) < 1e-5);
    // non-winning prototypes get nothing
    for c in 0..k {
        for mm in 0..m {
            let wins = (0..n).any(|p| mask[p] && rec.winner(p, c) == mm);
            if !wins {
                for dd in 0..d {
                    assert_eq!(b.d_omega.get(&[dd, mm, c]), 0.0);
                }
            }
        }
    }
}

#[test]
fn averaging_ignores_feature_and_prototype_scale() {
    let mut rng = SeededRng::new(5);
    let z = random_array(&[6, 8], &mut rng);
    let st = random_array(&[6, 4, 8], &mut rng);
    let base = subclass_averaging(&z, &st, 0.3, 0.1, true, EPS).unwrap();
    for (a, b) in [(3.0, 0.25), (1e-2, 40.0), (7.5, 7.5)] {
        let other = subclass_averaging(&z.scaled(a), &st.scaled(b), 0.3, 0.1, true, EPS).unwrap();
        assert!((base.value - other.value).abs() < 1e-10);
    }
}

#[test]
fn averaging_branches_on_threshold() {
    // s = [0.9, 0.1]: above gamma 0.5 the weights favour the closer prototype.
    let z = DenseArray::from_vec(&[2, 1], vec![1.0, 0.0]).unwrap();
    let a = [0.9, (1.0f64 - 0.81).sqrt()];
    let b = [0.1, (1.0f64 - 0.01).sqrt()];
    let st = DenseArray::from_vec(&[2, 2, 1], vec![a[0], b[0], a[1], b[1]]).unwrap();
    let tau = 0.1;
    let hi = subclass_averaging(&z, &st, 0.5, tau, true, EPS).unwrap();
    let e = [(0.9f64 / tau).exp(), (0.1f64 / tau).exp()];
    let w = [e[0] / (e[0] + e[1]), e[1] / (e[0] + e[1])];
    assert!((hi.weights[0] - w[0]).abs() < 1e-12);
    assert!((hi.value + w[0] * 0.9 + w[1] * 0.1).abs() < 1e-12);
    let lo = subclass_averaging(&z, &st, 0.95, tau, true, EPS).unwrap();
    assert!((lo.weights[0] - w[1]).abs() < 1e-12);
    assert!((lo.value + w[1] * 0.9 + w[0] * 0.1).abs() < 1e-12);
}

#[test]
fn detached_averaging_gradient_holds_weights_fixed() {
    let mut rng = SeededRng::new(8);
    let (d, m, n) = (5, 3, 4);
    let z = random_array(&[d, n], &mut rng);
    let st = random_array(&[d, m, n], &mut rng);
    let (gamma, tau) = (0.2, 0.1);
    let out = subclass_averaging(&z, &st, gamma, tau, true, EPS).unwrap();
    let w = out.weights.clone();
    let frozen = |zz: &DenseArray, ss: &DenseArray| {
        let mut v = 0.0;
        for p in 0..n {
            let zp = column(zz, p);
            for mm in 0..m {
                let pr: Vec<f64> = (0..d).map(|dd| ss.get(&[dd, mm, p])).collect();
                v -= w[p * m + mm] * cos(&zp, &pr);
            }
        }
        v
    };
    let gz = fd(|zz| frozen(zz, &st), &z);
    let gs = fd(|ss| frozen(&z, ss), &st);
    assert!(max_relative_error(out.d_z.as_slice(), gz.as_slice(), 1e-5) < 1e-4);
    assert!(max_relative_error(out.d_stacked.as_slice(), gs.as_slice(), 1e-5) < 1e-4);
}

#[test]
fn undetached_averaging_matches_fd() {
    let mut rng = SeededRng::new(10);
    let (d, m, n) = (5, 3, 4);
    let z = random_array(&[d, n], &mut rng);
    let st = random_array(&[d, m, n], &mut rng);
    let out = subclass_averaging(&z, &st, 0.2, 0.1, false, EPS).unwrap();
    let gz = fd(|zz| subclass_averaging(zz, &st, 0.2, 0.1, false, EPS).unwrap().value, &z);
    let gs = fd(|ss| subclass_averaging(&z, ss, 0.2, 0.1, false, EPS).unwrap().value, &st);
    assert!(max_relative_error(out.d_z.as_slice(), gz.as_slice(), 1e-5) < 1e-4);
    assert!(max_relative_error(out.d_stacked.as_slice(), gs.as_slice(), 1e-5) < 1e-4);
}

#[test]
fn frobenius_variant_elementwise() {
    let mut rng = SeededRng::new(2);
    let act = random_array(&[3, 4], &mut rng);
    let z = random_array(&[3, 4], &mut rng);
    let (v, da, dz) = subclass_averaging_frobenius(&act, &z).unwrap();
    let mut expect = 0.0;
    for i in 0..12 {
        let r = act.as_slice()[i] - z.as_slice()[i];
        expect += r * r;
        assert!((da.as_slice()[i] - 2.0 * r).abs() < 1e-12);
        assert!((dz.as_slice()[i] + 2.0 * r).abs() < 1e-12);
    }
    assert!((v - expect).abs() < 1e-12);
}

#[test]
fn cosine_variant_matches_fd() {
    let mut rng = SeededRng::new(3);
    let act = random_array(&[4, 5], &mut rng);
    let z = random_array(&[4, 5], &mut rng);
    let (v, da, dz) = subclass_averaging_cosine(&act, &z, EPS).unwrap();
    let expect: f64 = (0..5).map(|p| -cos(&column(&act, p), &column(&z, p))).sum();
    assert!((v - expect).abs() < 1e-12);
    let ga = fd(|a| subclass_averaging_cosine(a, &z, EPS).unwrap().0, &act);
    let gz = fd(|zz| subclass_averaging_cosine(&act, zz, EPS).unwrap().0, &z);
    assert!(max_relative_error(da.as_slice(), ga.as_slice(), 1e-6) < 1e-5);
    assert!(max_relative_error(dz.as_slice(), gz.as_slice(), 1e-6) < 1e-5);
}

/// Prototypes sharing a common direction so that several pairs exceed the
/// hinge.
fn correlated_omega(d: usize, m: usize, k: usize, rng: &mut SeededRng) -> DenseArray {
    let shared = random_array(&[d, k], rng);
    let noise = random_array(&[d, m, k], rng);
    let mut o = DenseArray::zeros(&[d, m, k]).unwrap();
    for dd in 0..d {
        for mm in 0..m {
            for c in 0..k {
                o.set(&[dd, mm, c], shared.get(&[dd, c]) + 0.6 * noise.get(&[dd, mm, c]));
            }
        }
    }
    o
}

#[test]
fn diversity_matches_fd_and_oracle() {
    let mut rng = SeededRng::new(31);
    let (d, m, k) = (5, 3, 2);
    let sigma = 0.2;
    let omega = correlated_omega(d, m, k, &mut rng);
    let bk = bank(omega.clone());
    let (v, g) = prototype_diversity(&bk, sigma, EPS).unwrap();

    let mut expect = 0.0;
    let mut hinged = 0;
    for c in 0..k {
        for i in 0..m {
            for j in 0..m {
                let s = cos(&bk.prototype(i, c), &bk.prototype(j, c));
                expect += (s - sigma).max(0.0);
                if i != j && s > sigma {
                    hinged += 1;
                    assert!(s - sigma > 1e-3, "too close to the hinge");
                }
            }
        }
    }
    assert!(hinged > 0);
    assert!((v - expect).abs() < 1e-12);
    let num = fd(|o| prototype_diversity(&bank(o.clone()), sigma, EPS).unwrap().0, &omega);
    assert!(max_relative_error(g.as_slice(), num.as_slice(), 1e-6) < 1e-5);
}

#[test]
fn diversity_of_orthogonal_prototypes_is_the_diagonal_constant() {
    let (d, m, k) = (8, 4, 2);
    let mut o = DenseArray::zeros(&[d, m, k]).unwrap();
    for c in 0..k {
        for mm in 0..m {
            o.set(&[mm, mm, c], 1.5 + c as f64);
        }
    }
    let sigma = 0.2;
    let (v, g) = prototype_diversity(&bank(o), sigma, EPS).unwrap();
    assert!((v - (k * m) as f64 * (1.0 - sigma)).abs() < 1e-12);
    assert_eq!(g.max_abs(), 0.0);
}

#[test]
fn balance_matches_fd() {
    let mut rng = SeededRng::new(41);
    let omega = correlated_omega(5, 3, 3, &mut rng);
    let (_, g) = balance_loss(&bank(omega.clone()), EPS).unwrap();
    let num = fd(|o| balance_loss(&bank(o.clone()), EPS).unwrap().0, &omega);
    assert!(max_relative_error(g.as_slice(), num.as_slice(), 1e-6) < 1e-5);
}

#[test]
fn balance_of_orthogonal_class_means() {
    // class 0: e0 +- a e2, class 1: e1 +- b e3
    let (a, b) = (0.3, 0.7);
    let mut o = DenseArray::zeros(&[4, 2, 2]).unwrap();
    for (mm, sign) in [(0, 1.0), (1, -1.0)] {
        o.set(&[0, mm, 0], 1.0);
        o.set(&[2, mm, 0], sign * a);
        o.set(&[1, mm, 1], 2.0);
        o.set(&[3, mm, 1], sign * 2.0 * b);
    }
    let (v, _) = balance_loss(&bank(o), EPS).unwrap();
    let scatter = |t: f64| 2.0 - 2.0 / (1.0 + t * t).sqrt();
    let expect = -(2.0f64).ln() + scatter(a).max(scatter(b)).ln();
    assert!((v - expect).abs() < 1e-12, "{v} vs {expect}");
}

fn toy(seed: u64) -> (DenseArray, DenseArray, Vec<usize>, Vec<bool>) {
    let mut rng = SeededRng::new(seed);
    let z = random_array(&[4, 6], &mut rng);
    let omega = correlated_omega(4, 2, 3, &mut rng);
    (z, omega, vec![0, 1, 2, 0, 1, 2], vec![true, false, true, true, false, true])
}

#[test]
fn total_is_the_weighted_sum_of_terms() {
    let (z, omega, labels, mask) = toy(1);
    let bk = bank(omega);
    let cfg = LossConfig {
        lambdas: Lambdas {
            ce: 1.0,
            avg: 0.5,
            pd: 2.0,
            bds: 0.25,
        },
        ..LossConfig::default()
    };
    let (terms, _) = compute_terms(&z, &bk, &labels, &mask, &cfg).unwrap();
    let bundle = total_loss(&terms, &cfg.lambdas, bk.omega().shape(), z.shape()).unwrap();
    assert!(bundle.is_finite());
    let parts = [
        (terms.ce.as_ref().unwrap(), 1.0),
        (terms.avg.as_ref().unwrap(), 0.5),
        (terms.pd.as_ref().unwrap(), 2.0),
        (terms.bds.as_ref().unwrap(), 0.25),
    ];
    let value: f64 = parts.iter().map(|(t, l)| l * t.value).sum();
    assert!((bundle.total - value).abs() < 1e-12);
    for i in 0..bundle.d_omega.len() {
        let s: f64 = parts.iter().map(|(t, l)| l * t.d_omega.as_slice()[i]).sum();
        assert!((bundle.d_omega.as_slice()[i] - s).abs() < 1e-12);
    }
    for i in 0..bundle.d_z.len() {
        let s: f64 = parts
            .iter()
            .filter_map(|(t, l)| t.d_z.as_ref().map(|g| l * g.as_slice()[i]))
            .sum();
        assert!((bundle.d_z.as_slice()[i] - s).abs() < 1e-12);
    }
}

#[test]
fn total_loss_matches_fd_without_detaching() {
    // seed chosen so no winner, hinge or threshold sits near a switch
    let (z, omega, labels, mask) = toy(4);
    for variant in [AvgVariant::Alg1, AvgVariant::Frobenius, AvgVariant::Cosine] {
        for reduction in [Reduction::Sum, Reduction::Mean] {
            let cfg = LossConfig {
                detach_weights: false,
                avg_variant: variant,
                avg_reduction: reduction,
                ..LossConfig::default()
            };
            let f = |zz: &DenseArray, o: &DenseArray| compute_losses(zz, &bank(o.clone()), &labels, &mask, &cfg).unwrap();
            let (b, rec) = f(&z, &omega);
            assert!(b.is_finite());
            let go = fd(
                |o| {
                    let (bb, r) = f(&z, o);
                    assert_eq!(r, rec);
                    bb.total
                },
                &omega,
            );
            let gz = fd(|zz| f(zz, &omega).0.total, &z);
            let eo = max_relative_error(b.d_omega.as_slice(), go.as_slice(), 1e-5);
            let ez = max_relative_error(b.d_z.as_slice(), gz.as_slice(), 1e-5);
            assert!(eo < 1e-4 && ez < 1e-4, "{variant:?} {reduction:?}: {eo} {ez}");
        }
    }
}

#[test]
fn class_stacking_follows_the_prediction() {
    let (z, omega, labels, mask) = toy(2);
    let bk = bank(omega);
    let (_, rec) = logits(&attention(&z, &bk).unwrap());
    let cfg = LossConfig {
        lambdas: Lambdas {
            avg: 1.0,
            ..Lambdas::ZERO
        },
        avg_reduction: Reduction::Sum,
        ..LossConfig::default()
    };
    let (terms, _) = compute_terms(&z, &bk, &labels, &mask, &cfg).unwrap();
    let st = class_prototypes(&bk, &rec.k_hat).unwrap();
    let direct = subclass_averaging(&z, &st, cfg.gamma(), cfg.tau, true, EPS).unwrap();
    assert_eq!(terms.avg.unwrap().value.to_bits(), direct.value.to_bits());
}
