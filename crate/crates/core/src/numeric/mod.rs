//! Dense arrays, seeded randomness and the small set of vector kernels the
//! classifier and its losses are built from.

mod array;
mod rng;

pub use array::{matmul, DenseArray};
pub use rng::{derive_seed, splitmix64, SeededRng};

use crate::error::{Error, Result};

/// Floor applied to every norm used as a denominator.
pub const EPS: f64 = 1e-8;

pub fn dot(u: &[f64], v: &[f64]) -> f64 {
    debug_assert_eq!(u.len(), v.len());
    u.iter().zip(v).map(|(a, b)| a * b).sum()
}

pub fn norm(v: &[f64]) -> f64 {
    dot(v, v).sqrt()
}

/// Softmax of `v / tau`, computed after subtracting the maximum.
pub fn softmax(v: &[f64], tau: f64) -> Result<Vec<f64>> {
    if !(tau > 0.0) || !tau.is_finite() {
        return Err(Error::Config(format!("temperature must be positive, got {tau}")));
    }
    let mut out = Vec::with_capacity(v.len());
    softmax_into(v, 1.0 / tau, &mut out);
    Ok(out)
}

/// Softmax of `scale * v` into `out`; `scale` may be negative.
pub(crate) fn softmax_into(v: &[f64], scale: f64, out: &mut Vec<f64>) {
    out.clear();
    let top = v
        .iter()
        .map(|x| x * scale)
        .fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for x in v {
        let e = (x * scale - top).exp();
        total += e;
        out.push(e);
    }
    for e in out.iter_mut() {
        *e /= total;
    }
}

/// Cosine similarity with both norms floored at `eps`, clamped to `[-1, 1]`.
pub fn cosine_similarity(u: &[f64], v: &[f64], eps: f64) -> f64 {
    assert_eq!(u.len(), v.len(), "cosine_similarity length mismatch");
    let denom = norm(u).max(eps) * norm(v).max(eps);
    (dot(u, v) / denom).clamp(-1.0, 1.0)
}

/// `v / max(|v|, eps)`.
pub fn l2_normalize(v: &[f64], eps: f64) -> Vec<f64> {
    let n = norm(v).max(eps);
    v.iter().map(|x| x / n).collect()
}

/// Gradient of `u/max(|u|,eps)` pulled back from `upstream`.
pub(crate) fn l2_normalize_backward(u: &[f64], upstream: &[f64], eps: f64) -> Vec<f64> {
    let n = norm(u);
    if n < eps {
        return upstream.iter().map(|g| g / eps).collect();
    }
    let y: Vec<f64> = u.iter().map(|x| x / n).collect();
    let proj = dot(&y, upstream);
    upstream
        .iter()
        .zip(&y)
        .map(|(g, yi)| (g - yi * proj) / n)
        .collect()
}

/// Partial derivatives of `cosine_similarity(u, v, eps)` with respect to
/// `u` and `v`, accumulated as `scale * d cos` into `du` and `dv`.
pub(crate) fn cosine_backward(
    u: &[f64],
    v: &[f64],
    eps: f64,
    scale: f64,
    du: &mut [f64],
    dv: &mut [f64],
) {
    let nu_raw = norm(u);
    let nv_raw = norm(v);
    let nu = nu_raw.max(eps);
    let nv = nv_raw.max(eps);
    let c = dot(u, v) / (nu * nv);
    // A floored norm is a constant, so its radial term vanishes.
    let ru = if nu_raw >= eps { c / (nu * nu) } else { 0.0 };
    let rv = if nv_raw >= eps { c / (nv * nv) } else { 0.0 };
    let inv = 1.0 / (nu * nv);
    for i in 0..u.len() {
        du[i] += scale * (v[i] * inv - ru * u[i]);
        dv[i] += scale * (u[i] * inv - rv * v[i]);
    }
}

/// k-nearest-neighbour table: row `i` lists the `k` points closest to point
/// `i`, excluding `i` itself, nearest first.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct KnnGraph {
    k: usize,
    indices: Vec<usize>,
}

impl KnnGraph {
    pub fn k(&self) -> usize {
        self.k
    }

    pub fn num_points(&self) -> usize {
        self.indices.len() / self.k
    }

    pub fn neighbors(&self, i: usize) -> &[usize] {
        &self.indices[i * self.k..(i + 1) * self.k]
    }

    pub fn as_slice(&self) -> &[usize] {
        &self.indices
    }
}

/// Neighbours of each row of an `N x D` point array by Euclidean distance,
/// ties broken by lower index.
pub fn knn_indices(points: &DenseArray, k: usize) -> Result<KnnGraph> {
    let (n, d) = points.dims2()?;
    let data = points.as_slice();
    knn_by(n, k, |i, j| {
        let (a, b) = (&data[i * d..(i + 1) * d], &data[j * d..(j + 1) * d]);
        a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
    })
}

/// Same as [`knn_indices`] but over the columns of a `D x N` array.
pub(crate) fn knn_columns(x: &DenseArray, k: usize) -> Result<KnnGraph> {
    let (d, n) = x.dims2()?;
    let data = x.as_slice();
    knn_by(n, k, |i, j| {
        (0..d)
            .map(|r| {
                let t = data[r * n + i] - data[r * n + j];
                t * t
            })
            .sum()
    })
}

fn knn_by(n: usize, k: usize, dist2: impl Fn(usize, usize) -> f64) -> Result<KnnGraph> {
    if k == 0 || k >= n {
        return Err(Error::Config(format!(
            "k must satisfy 1 <= k < N, got k={k}, N={n}"
        )));
    }
    let mut indices = Vec::with_capacity(n * k);
    let mut cand: Vec<(f64, usize)> = Vec::with_capacity(n - 1);
    let order = |a: &(f64, usize), b: &(f64, usize)| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1));
    for i in 0..n {
        cand.clear();
        cand.extend((0..n).filter(|&j| j != i).map(|j| (dist2(i, j), j)));
        if k < cand.len() {
            cand.select_nth_unstable_by(k - 1, order);
            cand.truncate(k);
        }
        cand.sort_unstable_by(order);
        indices.extend(cand.iter().map(|&(_, j)| j));
    }
    Ok(KnnGraph { k, indices })
}

/// Central-difference gradient of `f` at `x` with step `h`.
pub fn finite_difference_grad<F>(f: F, x: &DenseArray, h: f64) -> Result<DenseArray>
where
    F: Fn(&DenseArray) -> f64,
{
    let mut probe = x.clone();
    let mut grad = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        let orig = probe.as_slice()[i];
        probe.as_mut_slice()[i] = orig + h;
        let fp = f(&probe);
        probe.as_mut_slice()[i] = orig - h;
        let fm = f(&probe);
        probe.as_mut_slice()[i] = orig;
        if !fp.is_finite() || !fm.is_finite() {
            return Err(Error::Numeric(format!(
                "function not finite around coordinate {i}"
            )));
        }
        grad.push((fp - fm) / (2.0 * h));
    }
    Ok(DenseArray::from_parts_unchecked(x.shape().to_vec(), grad))
}

/// Largest per-entry relative error `|a-b| / max(|a|, |b|, floor)`.
pub fn max_relative_error(analytic: &[f64], numeric: &[f64], floor: f64) -> f64 {
    assert_eq!(analytic.len(), numeric.len());
    analytic
        .iter()
        .zip(numeric)
        .map(|(a, b)| (a - b).abs() / a.abs().max(b.abs()).max(floor))
        .fold(0.0, f64::max)
}
