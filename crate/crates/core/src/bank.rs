//! Multi-prototype memory bank and its forward pass.
//!
//! `omega` is stored `D_o x M x K` row-major, so prototype `(m, k)` is the
//! strided column `omega[:, m, k]`. The attention map is `N x M x K`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numeric::{cosine_similarity, DenseArray, SeededRng, EPS};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrototypeBank {
    omega: DenseArray,
    num_classes: usize,
    num_prototypes: usize,
}

impl PrototypeBank {
    /// Entries drawn i.i.d. from `N(0, 1/D_o)`.
    pub fn init(
        num_classes: usize,
        num_prototypes: usize,
        dim: usize,
        rng: &mut SeededRng,
    ) -> Result<Self> {
        if num_classes == 0 || num_prototypes == 0 || dim == 0 {
            return Err(Error::Config(format!(
                "bank needs K, M, D_o >= 1, got K={num_classes}, M={num_prototypes}, D_o={dim}"
            )));
        }
        let std = 1.0 / (dim as f64).sqrt();
        let data = (0..dim * num_prototypes * num_classes)
            .map(|_| std * rng.normal())
            .collect();
        Ok(Self {
            omega: DenseArray::from_parts_unchecked(vec![dim, num_prototypes, num_classes], data),
            num_classes,
            num_prototypes,
        })
    }

    pub fn from_omega(omega: DenseArray) -> Result<Self> {
        let (_, m, k) = omega.dims3()?;
        Ok(Self {
            omega,
            num_classes: k,
            num_prototypes: m,
        })
    }

    pub fn omega(&self) -> &DenseArray {
        &self.omega
    }

    pub(crate) fn omega_mut(&mut self) -> &mut DenseArray {
        &mut self.omega
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn num_prototypes(&self) -> usize {
        self.num_prototypes
    }

    pub fn dim(&self) -> usize {
        self.omega.shape()[0]
    }

    /// Copy of prototype `(m, k)`.
    pub fn prototype(&self, m: usize, k: usize) -> Vec<f64> {
        let (mm, kk) = (self.num_prototypes, self.num_classes);
        let o = self.omega.as_slice();
        (0..self.dim()).map(|d| o[(d * mm + m) * kk + k]).collect()
    }

    /// All prototypes as `[k][m] -> vector`.
    pub fn prototypes_by_class(&self) -> Vec<Vec<Vec<f64>>> {
        (0..self.num_classes)
            .map(|k| (0..self.num_prototypes).map(|m| self.prototype(m, k)).collect())
            .collect()
    }

    pub fn min_prototype_norm(&self) -> f64 {
        self.norms().into_iter().fold(f64::INFINITY, f64::min)
    }

    pub fn max_prototype_norm(&self) -> f64 {
        self.norms().into_iter().fold(0.0, f64::max)
    }

    fn norms(&self) -> Vec<f64> {
        self.prototypes_by_class()
            .iter()
            .flatten()
            .map(|p| crate::numeric::norm(p))
            .collect()
    }

    /// Within-class cosine matrix `M x M` for class `k`.
    pub fn class_cosines(&self, k: usize) -> Vec<Vec<f64>> {
        let protos: Vec<Vec<f64>> = (0..self.num_prototypes).map(|m| self.prototype(m, k)).collect();
        protos
            .iter()
            .map(|a| protos.iter().map(|b| cosine_similarity(a, b, EPS)).collect())
            .collect()
    }

    /// Largest within-class cosine over distinct prototype pairs.
    pub fn max_within_class_cosine(&self) -> f64 {
        let mut best = f64::NEG_INFINITY;
        for k in 0..self.num_classes {
            let c = self.class_cosines(k);
            for (i, row) in c.iter().enumerate() {
                for (j, &v) in row.iter().enumerate() {
                    if i != j {
                        best = best.max(v);
                    }
                }
            }
        }
        best
    }
}

/// Inner products of every point feature with every prototype, `N x M x K`.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionMap {
    a: DenseArray,
}

impl AttentionMap {
    pub fn as_array(&self) -> &DenseArray {
        &self.a
    }

    pub fn num_points(&self) -> usize {
        self.a.shape()[0]
    }

    pub fn get(&self, n: usize, m: usize, k: usize) -> f64 {
        self.a.get(&[n, m, k])
    }
}

/// Winning prototypes per point: global winner `(k_hat, m_hat)` and, per
/// class, the index of the best prototype.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ActivationRecord {
    pub k_hat: Vec<usize>,
    pub m_hat: Vec<usize>,
    /// `N x K`, row-major.
    pub class_winners: Vec<usize>,
    pub num_classes: usize,
}

impl ActivationRecord {
    pub fn len(&self) -> usize {
        self.k_hat.len()
    }

    pub fn is_empty(&self) -> bool {
        self.k_hat.is_empty()
    }

    pub fn winner(&self, n: usize, k: usize) -> usize {
        self.class_winners[n * self.num_classes + k]
    }

    /// Concatenates records point-wise.
    pub fn concat(records: &[ActivationRecord]) -> ActivationRecord {
        let num_classes = records.first().map_or(0, |r| r.num_classes);
        let mut out = ActivationRecord {
            k_hat: Vec::new(),
            m_hat: Vec::new(),
            class_winners: Vec::new(),
            num_classes,
        };
        for r in records {
            assert_eq!(r.num_classes, num_classes);
            out.k_hat.extend_from_slice(&r.k_hat);
            out.m_hat.extend_from_slice(&r.m_hat);
            out.class_winners.extend_from_slice(&r.class_winners);
        }
        out
    }
}

/// `a[n,m,k] = sum_d z[d,n] * omega[d,m,k]`, accumulated over `d` in order.
pub fn attention(z: &DenseArray, bank: &PrototypeBank) -> Result<AttentionMap> {
    let (dz, n) = z.dims2()?;
    let (d, m, k) = bank.omega.dims3()?;
    if dz != d {
        return Err(Error::Dimension(format!(
            "features have dimension {dz}, prototypes {d}"
        )));
    }
    let mk = m * k;
    let zs = z.as_slice();
    let om = bank.omega.as_slice();
    let mut a = vec![0.0; n * mk];
    for p in 0..n {
        let row = &mut a[p * mk..(p + 1) * mk];
        for dd in 0..d {
            let zv = zs[dd * n + p];
            for (r, &w) in row.iter_mut().zip(&om[dd * mk..(dd + 1) * mk]) {
                *r += zv * w;
            }
        }
    }
    Ok(AttentionMap {
        a: DenseArray::from_parts_unchecked(vec![n, m, k], a),
    })
}

/// Max-pools the attention map over prototypes into `K x N` logits and
/// records the winners. Ties go to the lowest index at both levels.
pub fn logits(att: &AttentionMap) -> (DenseArray, ActivationRecord) {
    let [n, m, k] = att.a.shape() else {
        unreachable!("attention map is rank 3")
    };
    let (n, m, k) = (*n, *m, *k);
    let a = att.a.as_slice();
    let mut l = vec![0.0; k * n];
    let mut winners = vec![0usize; n * k];
    let mut k_hat = vec![0usize; n];
    let mut m_hat = vec![0usize; n];
    for p in 0..n {
        let base = p * m * k;
        let mut best_k = 0;
        let mut best_val = f64::NEG_INFINITY;
        for c in 0..k {
            let mut wm = 0;
            let mut wv = a[base + c];
            for mm in 1..m {
                let v = a[base + mm * k + c];
                if v > wv {
                    wv = v;
                    wm = mm;
                }
            }
            l[c * n + p] = wv;
            winners[p * k + c] = wm;
            if c == 0 || wv > best_val {
                best_val = wv;
                best_k = c;
            }
        }
        k_hat[p] = best_k;
        m_hat[p] = winners[p * k + best_k];
    }
    (
        DenseArray::from_parts_unchecked(vec![k, n], l),
        ActivationRecord {
            k_hat,
            m_hat,
            class_winners: winners,
            num_classes: k,
        },
    )
}

/// Stacks the prototypes of class `k_hat[n]` for every point: `D_o x M x N`.
pub fn class_prototypes(bank: &PrototypeBank, k_hat: &[usize]) -> Result<DenseArray> {
    let (d, m, k) = bank.omega.dims3()?;
    if let Some(&bad) = k_hat.iter().find(|&&c| c >= k) {
        return Err(Error::Input(format!("class index {bad} out of range for K={k}")));
    }
    let n = k_hat.len();
    if n == 0 {
        return Err(Error::Input("no points to stack prototypes for".into()));
    }
    let om = bank.omega.as_slice();
    let mut out = vec![0.0; d * m * n];
    for dd in 0..d {
        for mm in 0..m {
            for (p, &c) in k_hat.iter().enumerate() {
                out[(dd * m + mm) * n + p] = om[(dd * m + mm) * k + c];
            }
        }
    }
    Ok(DenseArray::from_parts_unchecked(vec![d, m, n], out))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn bank_from(d: usize, m: usize, k: usize, vals: Vec<f64>) -> PrototypeBank {
        PrototypeBank::from_omega(DenseArray::from_vec(&[d, m, k], vals).unwrap()).unwrap()
    }

    #[test]
    fn init_rejects_zero_sizes() {
        let mut rng = SeededRng::new(0);
        assert!(PrototypeBank::init(0, 1, 1, &mut rng).is_err());
        assert!(PrototypeBank::init(1, 0, 1, &mut rng).is_err());
        assert!(PrototypeBank::init(1, 1, 0, &mut rng).is_err());
    }

    #[test]
    fn init_is_reproducible() {
        let a = PrototypeBank::init(3, 4, 8, &mut SeededRng::new(77)).unwrap();
        let b = PrototypeBank::init(3, 4, 8, &mut SeededRng::new(77)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn selector_feature_reads_prototype_row() {
        let mut rng = SeededRng::new(1);
        let bank = PrototypeBank::init(2, 3, 4, &mut rng).unwrap();
        let mut z = DenseArray::zeros(&[4, 1]).unwrap();
        z.set(&[2, 0], 1.0);
        let att = attention(&z, &bank).unwrap();
        for m in 0..3 {
            for k in 0..2 {
                assert_eq!(att.get(0, m, k), bank.omega().get(&[2, m, k]));
            }
        }
    }

    #[test]
    fn zero_features_zero_attention() {
        let bank = PrototypeBank::init(2, 2, 3, &mut SeededRng::new(2)).unwrap();
        let z = DenseArray::zeros(&[3, 5]).unwrap();
        assert_eq!(attention(&z, &bank).unwrap().as_array().max_abs(), 0.0);
    }

    #[test]
    fn attention_dimension_mismatch() {
        let bank = PrototypeBank::init(2, 2, 3, &mut SeededRng::new(2)).unwrap();
        let z = DenseArray::zeros(&[4, 5]).unwrap();
        assert!(matches!(attention(&z, &bank), Err(Error::Dimension(_))));
    }

    #[test]
    fn maxpool_picks_larger_and_breaks_ties_low() {
        // D=1, M=2, K=1; z = 1 so attention equals the prototype values
        let z = DenseArray::from_vec(&[1, 1], vec![1.0]).unwrap();
        let (l, rec) = logits(&attention(&z, &bank_from(1, 2, 1, vec![3.0, 7.0])).unwrap());
        assert_eq!(l.as_slice(), &[7.0]);
        assert_eq!(rec.winner(0, 0), 1);
        assert_eq!(rec.m_hat, vec![1]);

        let (l, rec) = logits(&attention(&z, &bank_from(1, 2, 1, vec![5.0, 5.0])).unwrap());
        assert_eq!(l.as_slice(), &[5.0]);
        assert_eq!(rec.winner(0, 0), 0);
    }

    #[test]
    fn class_tie_goes_to_lowest_class() {
        let z = DenseArray::from_vec(&[1, 1], vec![1.0]).unwrap();
        // M=1, K=3 all equal
        let (_, rec) = logits(&attention(&z, &bank_from(1, 1, 3, vec![2.0, 2.0, 2.0])).unwrap());
        assert_eq!(rec.k_hat, vec![0]);
    }

    #[test]
    fn single_prototype_equals_linear_classifier() {
        let mut rng = SeededRng::new(5);
        let bank = PrototypeBank::init(3, 1, 4, &mut rng).unwrap();
        let z = DenseArray::from_vec(&[4, 6], (0..24).map(|_| rng.normal()).collect()).unwrap();
        let w = bank.omega().reshaped(&[4, 3]).unwrap();
        let linear = crate::numeric::matmul(&w.transpose().unwrap(), &z).unwrap();
        let (l, _) = logits(&attention(&z, &bank).unwrap());
        assert_eq!(l, linear);
    }

    #[test]
    fn class_prototype_stacking() {
        let mut rng = SeededRng::new(6);
        let bank = PrototypeBank::init(2, 3, 4, &mut rng).unwrap();
        let st = class_prototypes(&bank, &[1, 0]).unwrap();
        assert_eq!(st.shape(), &[4, 3, 2]);
        for d in 0..4 {
            for m in 0..3 {
                assert_eq!(st.get(&[d, m, 0]), bank.omega().get(&[d, m, 1]));
                assert_eq!(st.get(&[d, m, 1]), bank.omega().get(&[d, m, 0]));
            }
        }
        let same = class_prototypes(&bank, &[1, 1, 1]).unwrap();
        for d in 0..4 {
            for m in 0..3 {
                assert_eq!(same.get(&[d, m, 0]), same.get(&[d, m, 2]));
            }
        }
        assert!(matches!(class_prototypes(&bank, &[2]), Err(Error::Input(_))));
    }
}
