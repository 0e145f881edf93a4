mod common;

use common::random_array;
use mulpro_core::numeric::{
    cosine_similarity, finite_difference_grad, knn_indices, matmul, softmax, DenseArray, SeededRng, EPS,
};
use proptest::prelude::*;

fn triple_loop(a: &DenseArray, b: &DenseArray) -> Vec<f64> {
    let (n, k) = (a.shape()[0], a.shape()[1]);
    let m = b.shape()[1];
    let mut out = vec![0.0; n * m];
    for i in 0..n {
        for j in 0..m {
            let mut s = 0.0;
            for t in 0..k {
                s += a.get(&[i, t]) * b.get(&[t, j]);
            }
            out[i * m + j] = s;
        }
    }
    out
}

#[test]
fn matmul_matches_triple_loop() {
    let mut rng = SeededRng::new(41);
    let a = random_array(&[3, 4], &mut rng);
    let b = random_array(&[4, 2], &mut rng);
    let c = matmul(&a, &b).unwrap();
    assert_eq!(c.shape(), [3, 2]);
    for (x, y) in c.as_slice().iter().zip(triple_loop(&a, &b)) {
        assert!((x - y).abs() <= 1e-12);
    }
}

#[test]
fn knn_matches_sort_oracle() {
    let mut rng = SeededRng::new(5);
    let pts = random_array(&[20, 3], &mut rng);
    for k in [1, 4, 19] {
        let g = knn_indices(&pts, k).unwrap();
        for i in 0..20 {
            let mut others: Vec<(f64, usize)> = (0..20)
                .filter(|&j| j != i)
                .map(|j| {
                    let d: f64 = (0..3).map(|c| (pts.get(&[i, c]) - pts.get(&[j, c])).powi(2)).sum();
                    (d, j)
                })
                .collect();
            others.sort_by(|a, b| a.partial_cmp(b).unwrap());
            let expect: Vec<usize> = others[..k].iter().map(|p| p.1).collect();
            assert_eq!(g.neighbors(i), expect.as_slice());
        }
    }
}

#[test]
fn finite_differences_of_known_functions() {
    let x = DenseArray::from_vec(&[3], vec![0.3, -1.2, 2.0]).unwrap();
    let g = finite_difference_grad(
        |v: &DenseArray| v.as_slice().iter().map(|t| t.sin()).sum::<f64>(),
        &x,
        1e-5,
    )
    .unwrap();
    for (gi, xi) in g.as_slice().iter().zip(x.as_slice()) {
        assert!((gi - xi.cos()).abs() < 1e-9);
    }
}

fn small_matrix(rows: usize, cols: usize) -> impl Strategy<Value = DenseArray> {
    prop::collection::vec(-5.0f64..5.0, rows * cols).prop_map(move |v| DenseArray::from_vec(&[rows, cols], v).unwrap())
}

proptest! {
    #[test]
    fn softmax_is_a_distribution(v in prop::collection::vec(-50.0f64..50.0, 1..12), t in 0usize..4) {
        let tau = [0.01, 0.1, 1.0, 10.0][t];
        let p = softmax(&v, tau).unwrap();
        prop_assert!(p.iter().all(|&x| x >= 0.0));
        prop_assert!((p.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
    }

    #[test]
    fn cosine_symmetric_and_scale_free(
        u in prop::collection::vec(-3.0f64..3.0, 4),
        v in prop::collection::vec(-3.0f64..3.0, 4),
        a in 0.01f64..100.0,
        b in 0.01f64..100.0,
    ) {
        prop_assume!(u.iter().map(|x| x * x).sum::<f64>() > 1e-3);
        prop_assume!(v.iter().map(|x| x * x).sum::<f64>() > 1e-3);
        let c = cosine_similarity(&u, &v, EPS);
        prop_assert!((c - cosine_similarity(&v, &u, EPS)).abs() <= 1e-12);
        let us: Vec<f64> = u.iter().map(|x| a * x).collect();
        let vs: Vec<f64> = v.iter().map(|x| b * x).collect();
        prop_assert!((c - cosine_similarity(&us, &vs, EPS)).abs() <= 1e-12);
        prop_assert!((-1.0..=1.0).contains(&c));
    }

    #[test]
    fn matmul_associates(
        (n, k, m, p) in (1usize..4, 1usize..4, 1usize..4, 1usize..4),
        seed in any::<u64>(),
    ) {
        let mut rng = SeededRng::new(seed);
        let a = random_array(&[n, k], &mut rng);
        let b = random_array(&[k, m], &mut rng);
        let c = random_array(&[m, p], &mut rng);
        let left = matmul(&matmul(&a, &b).unwrap(), &c).unwrap();
        let right = matmul(&a, &matmul(&b, &c).unwrap()).unwrap();
        let ab = DenseArray::from_vec(&[n, m], triple_loop(&a, &b)).unwrap();
        let oracle = triple_loop(&ab, &c);
        for ((x, y), o) in left.as_slice().iter().zip(right.as_slice()).zip(oracle) {
            prop_assert!((x - o).abs() <= 1e-10);
            prop_assert!((y - o).abs() <= 1e-10);
        }
    }

    #[test]
    fn matmul_rejects_inner_mismatch(a in small_matrix(2, 3), b in small_matrix(2, 2)) {
        prop_assert!(matmul(&a, &b).is_err());
    }

    #[test]
    fn equal_seeds_equal_streams(seed in any::<u64>(), stream in any::<u64>()) {
        let mut a = SeededRng::new(seed).derive(stream);
        let mut b = SeededRng::new(seed).derive(stream);
        for _ in 0..64 {
            prop_assert_eq!(a.next_u64(), b.next_u64());
        }
        prop_assert_eq!(a.normal().to_bits(), b.normal().to_bits());
    }

    #[test]
    fn knn_excludes_self_and_sorts_by_distance(seed in any::<u64>(), k in 1usize..6) {
        let mut rng = SeededRng::new(seed);
        let pts = random_array(&[8, 3], &mut rng);
        let g = knn_indices(&pts, k).unwrap();
        for i in 0..8 {
            let nb = g.neighbors(i);
            prop_assert_eq!(nb.len(), k);
            prop_assert!(!nb.contains(&i));
            let d = |j: usize| (0..3).map(|c| (pts.get(&[i, c]) - pts.get(&[j, c])).powi(2)).sum::<f64>();
            for w in nb.windows(2) {
                prop_assert!(d(w[0]) <= d(w[1]));
            }
        }
    }
}
