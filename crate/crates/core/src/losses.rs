//! Training objectives of the multi-prototype classifier, each returning its
//! value together with analytic gradients.
//!
//! Gradients with respect to the bank are always `D_o x M x K`, matching
//! [`PrototypeBank::omega`]; gradients with respect to features are
//! `D_o x N`.

use serde::{Deserialize, Serialize};

use crate::bank::{attention, class_prototypes, logits, ActivationRecord, PrototypeBank};
use crate::error::{Error, Result};
use crate::numeric::{
    cosine_backward, cosine_similarity, dot, l2_normalize, l2_normalize_backward, norm,
    softmax_into, DenseArray, EPS,
};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Lambdas {
    pub ce: f64,
    pub avg: f64,
    pub pd: f64,
    pub bds: f64,
}

impl Default for Lambdas {
    fn default() -> Self {
        Self {
            ce: 1.0,
            avg: 1.0,
            pd: 1.0,
            bds: 1.0,
        }
    }
}

impl Lambdas {
    pub const ZERO: Lambdas = Lambdas {
        ce: 0.0,
        avg: 0.0,
        pd: 0.0,
        bds: 0.0,
    };

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("ce", self.ce), ("avg", self.avg), ("pd", self.pd), ("bds", self.bds)] {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(Error::Config(format!("lambda_{name} must be >= 0, got {v}")));
            }
        }
        Ok(())
    }
}

/// How the averaging loss combines its per-point terms.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Reduction {
    Sum,
    /// Sum divided by the number of points.
    Mean,
}

impl Reduction {
    pub fn name(self) -> &'static str {
        match self {
            Reduction::Sum => "sum",
            Reduction::Mean => "mean",
        }
    }
}

impl std::str::FromStr for Reduction {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sum" => Ok(Reduction::Sum),
            "mean" => Ok(Reduction::Mean),
            _ => Err(Error::Config(format!("unknown reduction {s:?} (expected sum or mean)"))),
        }
    }
}

/// Which subclass-averaging objective fills the `avg` slot.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AvgVariant {
    /// Thresholded soft assignment over the predicted class's prototypes.
    Alg1,
    /// Squared distance to the activated prototype.
    Frobenius,
    /// Negative cosine to the activated prototype.
    Cosine,
}

impl AvgVariant {
    pub fn name(self) -> &'static str {
        match self {
            AvgVariant::Alg1 => "alg1",
            AvgVariant::Frobenius => "frobenius",
            AvgVariant::Cosine => "cosine",
        }
    }
}

impl std::str::FromStr for AvgVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "alg1" => Ok(AvgVariant::Alg1),
            "frobenius" => Ok(AvgVariant::Frobenius),
            "cosine" => Ok(AvgVariant::Cosine),
            _ => Err(Error::Config(format!(
                "unknown avg_variant {s:?} (expected alg1, frobenius or cosine)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    pub lambdas: Lambdas,
    /// Hinge threshold of the diversity loss.
    pub sigma: f64,
    /// Overrides the derived assignment threshold when set.
    pub gamma_override: Option<f64>,
    pub tau: f64,
    pub eps: f64,
    /// Hold the soft assignment weights constant when differentiating.
    pub detach_weights: bool,
    pub avg_variant: AvgVariant,
    /// Let the averaging loss send gradients into the features.
    pub avg_feature_grad: bool,
    /// Stack labeled points' prototypes by their true class instead of the
    /// predicted one.
    pub stack_by_label: bool,
    pub avg_reduction: Reduction,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            lambdas: Lambdas::default(),
            sigma: 0.2,
            gamma_override: None,
            tau: 0.1,
            eps: EPS,
            detach_weights: true,
            avg_variant: AvgVariant::Alg1,
            avg_feature_grad: true,
            stack_by_label: false,
            avg_reduction: Reduction::Mean,
        }
    }
}

/// `cos(arccos(sigma) / 2)`: the cosine at half the angle of the diversity
/// threshold.
pub fn derived_gamma(sigma: f64) -> f64 {
    (sigma.acos() / 2.0).cos()
}

impl LossConfig {
    pub fn gamma(&self) -> f64 {
        self.gamma_override.unwrap_or_else(|| derived_gamma(self.sigma))
    }

    pub fn validate(&self) -> Result<()> {
        self.lambdas.validate()?;
        if !(self.sigma > 0.0 && self.sigma < 1.0) {
            return Err(Error::Config(format!("sigma must lie in (0, 1), got {}", self.sigma)));
        }
        let g = self.gamma();
        if !(g > -1.0 && g < 1.0) {
            return Err(Error::Config(format!("gamma must lie in (-1, 1), got {g}")));
        }
        if !(self.tau > 0.0) || !self.tau.is_finite() {
            return Err(Error::Config(format!("tau must be positive, got {}", self.tau)));
        }
        if !(self.eps > 0.0) {
            return Err(Error::Config(format!("eps must be positive, got {}", self.eps)));
        }
        Ok(())
    }
}

/// Value of one loss term with its gradients.
#[derive(Debug, Clone, PartialEq)]
pub struct Term {
    pub value: f64,
    pub d_omega: DenseArray,
    pub d_z: Option<DenseArray>,
}

/// Combined loss values and gradients.
#[derive(Debug, Clone, PartialEq)]
pub struct LossBundle {
    pub ce: f64,
    pub avg: f64,
    pub pd: f64,
    pub bds: f64,
    pub total: f64,
    pub d_omega: DenseArray,
    pub d_z: DenseArray,
}

impl LossBundle {
    pub fn is_finite(&self) -> bool {
        [self.ce, self.avg, self.pd, self.bds, self.total]
            .iter()
            .all(|v| v.is_finite())
            && self.d_omega.all_finite()
            && self.d_z.all_finite()
    }

    /// Name of the first non-finite term, if any.
    pub fn first_non_finite(&self) -> Option<&'static str> {
        [
            ("ce", self.ce),
            ("avg", self.avg),
            ("pd", self.pd),
            ("bds", self.bds),
            ("total", self.total),
        ]
        .into_iter()
        .find(|(_, v)| !v.is_finite())
        .map(|(n, _)| n)
        .or_else(|| (!self.d_omega.all_finite()).then_some("d_omega"))
        .or_else(|| (!self.d_z.all_finite()).then_some("d_z"))
    }
}

/// `K x N` one-hot matrix of class labels.
pub fn one_hot(labels: &[usize], num_classes: usize) -> Result<DenseArray> {
    let n = labels.len();
    let mut y = DenseArray::zeros(&[num_classes, n.max(1)])?;
    if n == 0 {
        return Err(Error::Input("no labels".into()));
    }
    for (i, &c) in labels.iter().enumerate() {
        if c >= num_classes {
            return Err(Error::Input(format!("label {c} out of range for K={num_classes}")));
        }
        y.set(&[c, i], 1.0);
    }
    Ok(y)
}

/// Cross-entropy averaged over labeled points. Returns the value and the
/// gradient with respect to the `K x N` logits.
pub fn ce_loss(l: &DenseArray, y: &DenseArray, mask: &[bool]) -> Result<(f64, DenseArray)> {
    let (k, n) = l.dims2()?;
    if y.shape() != l.shape() || mask.len() != n {
        return Err(Error::Dimension(format!(
            "logits {:?}, labels {:?}, mask {}",
            l.shape(),
            y.shape(),
            mask.len()
        )));
    }
    let ls = l.as_slice();
    let ys = y.as_slice();
    let mut d_l = vec![0.0; k * n];
    let labeled: Vec<usize> = (0..n).filter(|&i| mask[i]).collect();
    if labeled.is_empty() {
        return Ok((0.0, DenseArray::from_parts_unchecked(vec![k, n], d_l)));
    }
    let inv = 1.0 / labeled.len() as f64;
    let mut total = 0.0;
    let mut col = Vec::with_capacity(k);
    let mut p = Vec::with_capacity(k);
    for &i in &labeled {
        col.clear();
        col.extend((0..k).map(|c| ls[c * n + i]));
        let target = one_hot_index(ys, k, n, i)?;
        let top = col.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = top + col.iter().map(|v| (v - top).exp()).sum::<f64>().ln();
        total += lse - col[target];
        softmax_into(&col, 1.0, &mut p);
        for c in 0..k {
            let t = if c == target { 1.0 } else { 0.0 };
            d_l[c * n + i] = (p[c] - t) * inv;
        }
    }
    Ok((total * inv, DenseArray::from_parts_unchecked(vec![k, n], d_l)))
}

fn one_hot_index(ys: &[f64], k: usize, n: usize, i: usize) -> Result<usize> {
    let mut hot = None;
    for c in 0..k {
        match ys[c * n + i] {
            0.0 => {}
            1.0 if hot.is_none() => hot = Some(c),
            _ => {
                return Err(Error::Input(format!("label column {i} is not one-hot")));
            }
        }
    }
    hot.ok_or_else(|| Error::Input(format!("label column {i} is not one-hot")))
}

/// Routes logit gradients through the max-pool: each `d_l[k, n]` reaches only
/// the class-`k` winning prototype of point `n` and the feature `z_n`.
pub fn ce_backprop_to_prototypes(
    d_l: &DenseArray,
    z: &DenseArray,
    bank: &PrototypeBank,
    record: &ActivationRecord,
) -> Result<(DenseArray, DenseArray)> {
    let (d, n) = z.dims2()?;
    let (_, m, k) = bank.omega().dims3()?;
    if d_l.shape() != [k, n] || record.len() != n {
        return Err(Error::Dimension("logit gradient does not match features".into()));
    }
    let gl = d_l.as_slice();
    let zs = z.as_slice();
    let om = bank.omega().as_slice();
    let mut d_omega = vec![0.0; d * m * k];
    let mut d_z = vec![0.0; d * n];
    for c in 0..k {
        for p in 0..n {
            let g = gl[c * n + p];
            if g == 0.0 {
                continue;
            }
            let w = record.winner(p, c);
            for dd in 0..d {
                let o = (dd * m + w) * k + c;
                d_omega[o] += g * zs[dd * n + p];
                d_z[dd * n + p] += g * om[o];
            }
        }
    }
    Ok((
        DenseArray::from_parts_unchecked(vec![d, m, k], d_omega),
        DenseArray::from_parts_unchecked(vec![d, n], d_z),
    ))
}

/// Output of the thresholded subclass-averaging loss.
#[derive(Debug, Clone, PartialEq)]
pub struct AveragingGrad {
    pub value: f64,
    /// Gradient with respect to the stacked prototypes, `D_o x M x N`.
    pub d_stacked: DenseArray,
    pub d_z: DenseArray,
    /// Soft assignment weights `N x M`.
    pub weights: Vec<f64>,
}

/// Thresholded subclass averaging over the stacked class prototypes
/// `stacked` (`D_o x M x N`).
///
/// For each point the cosine similarities `s_n` to its class prototypes are
/// turned into weights `softmax(s_n / tau)` when `max s_n > gamma` and
/// `softmax(-s_n / tau)` otherwise; the loss is `-sum_n sum_m w_nm s_nm`.
pub fn subclass_averaging(
    z: &DenseArray,
    stacked: &DenseArray,
    gamma: f64,
    tau: f64,
    detach_weights: bool,
    eps: f64,
) -> Result<AveragingGrad> {
    if !(tau > 0.0) {
        return Err(Error::Config(format!("tau must be positive, got {tau}")));
    }
    let (d, n) = z.dims2()?;
    let (ds, m, ns) = stacked.dims3()?;
    if ds != d || ns != n {
        return Err(Error::Dimension(format!(
            "features {:?} vs stacked prototypes {:?}",
            z.shape(),
            stacked.shape()
        )));
    }
    let zs = z.as_slice();
    let st = stacked.as_slice();
    let mut d_st = vec![0.0; d * m * n];
    let mut d_z = vec![0.0; d * n];
    let mut weights = vec![0.0; n * m];
    let mut value = 0.0;

    let mut zn = vec![0.0; d];
    let mut protos = vec![vec![0.0; d]; m];
    let mut s = vec![0.0; m];
    let mut w = Vec::with_capacity(m);
    let mut dzn = vec![0.0; d];
    let mut dp = vec![0.0; d];
    for p in 0..n {
        for dd in 0..d {
            zn[dd] = zs[dd * n + p];
        }
        for (mm, proto) in protos.iter_mut().enumerate() {
            for dd in 0..d {
                proto[dd] = st[(dd * m + mm) * n + p];
            }
            s[mm] = cosine_similarity(&zn, proto, eps);
        }
        let top = s.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let scale = if top > gamma { 1.0 / tau } else { -1.0 / tau };
        softmax_into(&s, scale, &mut w);
        let sbar = dot(&w, &s);
        value -= sbar;
        weights[p * m..(p + 1) * m].copy_from_slice(&w);

        dzn.iter_mut().for_each(|v| *v = 0.0);
        for mm in 0..m {
            // d(-sum_j w_j s_j)/d s_m
            let mut g = -w[mm];
            if !detach_weights {
                g -= scale * w[mm] * (s[mm] - sbar);
            }
            dp.iter_mut().for_each(|v| *v = 0.0);
            cosine_backward(&zn, &protos[mm], eps, g, &mut dzn, &mut dp);
            for dd in 0..d {
                d_st[(dd * m + mm) * n + p] += dp[dd];
            }
        }
        for dd in 0..d {
            d_z[dd * n + p] = dzn[dd];
        }
    }
    Ok(AveragingGrad {
        value,
        d_stacked: DenseArray::from_parts_unchecked(vec![d, m, n], d_st),
        d_z: DenseArray::from_parts_unchecked(vec![d, n], d_z),
        weights,
    })
}

/// Accumulates a `D_o x M x N` gradient on stacked prototypes back into the
/// bank layout according to the class each point was stacked with.
pub fn scatter_stacked_grad(
    d_stacked: &DenseArray,
    classes: &[usize],
    num_classes: usize,
) -> Result<DenseArray> {
    let (d, m, n) = d_stacked.dims3()?;
    if classes.len() != n {
        return Err(Error::Dimension("class list does not match stacked gradient".into()));
    }
    let src = d_stacked.as_slice();
    let mut out = vec![0.0; d * m * num_classes];
    for dd in 0..d {
        for mm in 0..m {
            for (p, &c) in classes.iter().enumerate() {
                out[(dd * m + mm) * num_classes + c] += src[(dd * m + mm) * n + p];
            }
        }
    }
    Ok(DenseArray::from_parts_unchecked(vec![d, m, num_classes], out))
}

/// Globally activated prototype of every point, stacked `D_o x N`.
pub fn activated_prototypes(bank: &PrototypeBank, record: &ActivationRecord) -> DenseArray {
    let d = bank.dim();
    let (m, k) = (bank.num_prototypes(), bank.num_classes());
    let n = record.len();
    let om = bank.omega().as_slice();
    let mut out = vec![0.0; d * n];
    for p in 0..n {
        for dd in 0..d {
            out[dd * n + p] = om[(dd * m + record.m_hat[p]) * k + record.k_hat[p]];
        }
    }
    DenseArray::from_parts_unchecked(vec![d, n], out)
}

/// Accumulates a `D_o x N` gradient on activated prototypes into the bank.
pub fn scatter_activated_grad(
    d_act: &DenseArray,
    record: &ActivationRecord,
    num_prototypes: usize,
) -> Result<DenseArray> {
    let (d, n) = d_act.dims2()?;
    if record.len() != n {
        return Err(Error::Dimension("record does not match activated gradient".into()));
    }
    let k = record.num_classes;
    let m = num_prototypes;
    let src = d_act.as_slice();
    let mut out = vec![0.0; d * m * k];
    for p in 0..n {
        for dd in 0..d {
            out[(dd * m + record.m_hat[p]) * k + record.k_hat[p]] += src[dd * n + p];
        }
    }
    Ok(DenseArray::from_parts_unchecked(vec![d, m, k], out))
}

/// Squared Frobenius distance `||act - Z||^2` between activated prototypes
/// and features. Returns `(value, d_act, d_z)`.
pub fn subclass_averaging_frobenius(
    act: &DenseArray,
    z: &DenseArray,
) -> Result<(f64, DenseArray, DenseArray)> {
    if act.shape() != z.shape() {
        return Err(Error::Dimension(format!(
            "activated prototypes {:?} vs features {:?}",
            act.shape(),
            z.shape()
        )));
    }
    let mut value = 0.0;
    let mut d_act = Vec::with_capacity(z.len());
    for (a, b) in act.as_slice().iter().zip(z.as_slice()) {
        let r = a - b;
        value += r * r;
        d_act.push(2.0 * r);
    }
    let d_z = d_act.iter().map(|v| -v).collect();
    Ok((
        value,
        DenseArray::from_parts_unchecked(act.shape().to_vec(), d_act),
        DenseArray::from_parts_unchecked(z.shape().to_vec(), d_z),
    ))
}

/// `-sum_n cos(act_n, z_n)`. Returns `(value, d_act, d_z)`.
pub fn subclass_averaging_cosine(
    act: &DenseArray,
    z: &DenseArray,
    eps: f64,
) -> Result<(f64, DenseArray, DenseArray)> {
    if act.shape() != z.shape() {
        return Err(Error::Dimension(format!(
            "activated prototypes {:?} vs features {:?}",
            act.shape(),
            z.shape()
        )));
    }
    let (d, n) = z.dims2()?;
    let mut value = 0.0;
    let mut d_act = vec![0.0; d * n];
    let mut d_z = vec![0.0; d * n];
    let mut a = vec![0.0; d];
    let mut b = vec![0.0; d];
    let mut ga = vec![0.0; d];
    let mut gb = vec![0.0; d];
    for p in 0..n {
        for dd in 0..d {
            a[dd] = act.as_slice()[dd * n + p];
            b[dd] = z.as_slice()[dd * n + p];
        }
        value -= cosine_similarity(&a, &b, eps);
        ga.iter_mut().for_each(|v| *v = 0.0);
        gb.iter_mut().for_each(|v| *v = 0.0);
        cosine_backward(&a, &b, eps, -1.0, &mut ga, &mut gb);
        for dd in 0..d {
            d_act[dd * n + p] = ga[dd];
            d_z[dd * n + p] = gb[dd];
        }
    }
    Ok((
        value,
        DenseArray::from_parts_unchecked(vec![d, n], d_act),
        DenseArray::from_parts_unchecked(vec![d, n], d_z),
    ))
}

/// Hinged within-class cosine similarity summed over all ordered prototype
/// pairs, diagonal included. The diagonal adds `1 - sigma` per nonzero
/// prototype and carries no gradient.
pub fn prototype_diversity(bank: &PrototypeBank, sigma: f64, eps: f64) -> Result<(f64, DenseArray)> {
    if !(sigma > 0.0 && sigma < 1.0) {
        return Err(Error::Config(format!("sigma must lie in (0, 1), got {sigma}")));
    }
    let (d, m, k) = bank.omega().dims3()?;
    let protos = bank.prototypes_by_class();
    let mut grad = vec![0.0; d * m * k];
    let mut off = 0.0;
    let mut diag = 0usize;
    let mut gi = vec![0.0; d];
    let mut gj = vec![0.0; d];
    for (c, class) in protos.iter().enumerate() {
        for i in 0..m {
            if norm(&class[i]) >= eps {
                diag += 1;
            }
            for j in 0..m {
                if i == j {
                    continue;
                }
                let cs = cosine_similarity(&class[i], &class[j], eps);
                if cs > sigma {
                    off += cs - sigma;
                    gi.iter_mut().for_each(|v| *v = 0.0);
                    gj.iter_mut().for_each(|v| *v = 0.0);
                    cosine_backward(&class[i], &class[j], eps, 1.0, &mut gi, &mut gj);
                    for dd in 0..d {
                        grad[(dd * m + i) * k + c] += gi[dd];
                        grad[(dd * m + j) * k + c] += gj[dd];
                    }
                }
            }
        }
    }
    let value = off + diag as f64 * (1.0 - sigma);
    Ok((value, DenseArray::from_parts_unchecked(vec![d, m, k], grad)))
}

/// Diagnostics of the balance loss, exposed for tie detection in checks.
#[derive(Debug, Clone, PartialEq)]
pub struct BalanceStats {
    pub pair_distances: Vec<((usize, usize), f64)>,
    pub scatters: Vec<f64>,
}

struct ClassGeometry {
    /// normalized prototypes per class
    units: Vec<Vec<Vec<f64>>>,
    /// unnormalized class means
    means: Vec<Vec<f64>>,
    /// normalized class means
    mean_units: Vec<Vec<f64>>,
    scatters: Vec<f64>,
}

fn class_geometry(bank: &PrototypeBank, eps: f64) -> ClassGeometry {
    let protos = bank.prototypes_by_class();
    let m = bank.num_prototypes() as f64;
    let d = bank.dim();
    let units: Vec<Vec<Vec<f64>>> = protos
        .iter()
        .map(|class| class.iter().map(|p| l2_normalize(p, eps)).collect())
        .collect();
    let means: Vec<Vec<f64>> = units
        .iter()
        .map(|class| {
            let mut acc = vec![0.0; d];
            for u in class {
                for (a, v) in acc.iter_mut().zip(u) {
                    *a += v;
                }
            }
            acc.iter().map(|v| v / m).collect()
        })
        .collect();
    let mean_units: Vec<Vec<f64>> = means.iter().map(|v| l2_normalize(v, eps)).collect();
    let scatters = units
        .iter()
        .zip(&mean_units)
        .map(|(class, mu)| {
            class
                .iter()
                .map(|u| u.iter().zip(mu).map(|(a, b)| (a - b) * (a - b)).sum::<f64>())
                .sum::<f64>()
                / m
        })
        .collect();
    ClassGeometry {
        units,
        means,
        mean_units,
        scatters,
    }
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

pub fn balance_stats(bank: &PrototypeBank, eps: f64) -> BalanceStats {
    let g = class_geometry(bank, eps);
    let k = bank.num_classes();
    let mut pair_distances = Vec::new();
    for i in 0..k {
        for j in i + 1..k {
            pair_distances.push(((i, j), sq_dist(&g.mean_units[i], &g.mean_units[j])));
        }
    }
    BalanceStats {
        pair_distances,
        scatters: g.scatters,
    }
}

/// `-log(min inter-class distance of normalized class means)
///  + log(max(max intra-class scatter, eps))`.
///
/// The distance is floored at `eps` as well. Subgradients follow the
/// arg-min pair and the arg-max class, ties to the lowest indices.
pub fn balance_loss(bank: &PrototypeBank, eps: f64) -> Result<(f64, DenseArray)> {
    let k = bank.num_classes();
    if k < 2 {
        return Err(Error::Config(format!("balance loss needs K >= 2, got K={k}")));
    }
    let m = bank.num_prototypes();
    let d = bank.dim();
    let g = class_geometry(bank, eps);

    let mut best_pair = (0, 1);
    let mut best_dist = f64::INFINITY;
    for i in 0..k {
        for j in i + 1..k {
            let dist = sq_dist(&g.mean_units[i], &g.mean_units[j]);
            if dist < best_dist {
                best_dist = dist;
                best_pair = (i, j);
            }
        }
    }
    let mut worst = 0;
    for c in 1..k {
        if g.scatters[c] > g.scatters[worst] {
            worst = c;
        }
    }
    let scatter = g.scatters[worst];
    let value = -best_dist.max(eps).ln() + scatter.max(eps).ln();

    // gradients with respect to normalized class means and normalized prototypes
    let mut g_mean_unit = vec![vec![0.0; d]; k];
    let mut g_unit = vec![vec![vec![0.0; d]; m]; k];
    if best_dist >= eps {
        let (i, j) = best_pair;
        for dd in 0..d {
            let diff = g.mean_units[i][dd] - g.mean_units[j][dd];
            g_mean_unit[i][dd] -= 2.0 * diff / best_dist;
            g_mean_unit[j][dd] += 2.0 * diff / best_dist;
        }
    }
    if scatter >= eps {
        let c = worst;
        let coef = 2.0 / (m as f64 * scatter);
        for mm in 0..m {
            for dd in 0..d {
                let diff = g.units[c][mm][dd] - g.mean_units[c][dd];
                g_unit[c][mm][dd] += coef * diff;
                g_mean_unit[c][dd] -= coef * diff;
            }
        }
    }

    let protos = bank.prototypes_by_class();
    let mut grad = vec![0.0; d * m * k];
    for c in 0..k {
        let g_mean = l2_normalize_backward(&g.means[c], &g_mean_unit[c], eps);
        for mm in 0..m {
            let up: Vec<f64> = g_unit[c][mm]
                .iter()
                .zip(&g_mean)
                .map(|(a, b)| a + b / m as f64)
                .collect();
            let gp = l2_normalize_backward(&protos[c][mm], &up, eps);
            for dd in 0..d {
                grad[(dd * m + mm) * k + c] = gp[dd];
            }
        }
    }
    Ok((value, DenseArray::from_parts_unchecked(vec![d, m, k], grad)))
}

/// Individually computed loss terms before weighting. Terms whose weight is
/// zero are left out.
#[derive(Debug, Clone, PartialEq)]
pub struct LossTerms {
    pub ce: Option<Term>,
    pub avg: Option<Term>,
    pub pd: Option<Term>,
    pub bds: Option<Term>,
}

/// Weighted sum of the terms' values and gradients.
pub fn total_loss(
    terms: &LossTerms,
    lambdas: &Lambdas,
    omega_shape: &[usize],
    z_shape: &[usize],
) -> Result<LossBundle> {
    lambdas.validate()?;
    let mut d_omega = DenseArray::zeros(omega_shape)?;
    let mut d_z = DenseArray::zeros(z_shape)?;
    let mut values = [0.0; 4];
    let slots = [
        (&terms.ce, lambdas.ce),
        (&terms.avg, lambdas.avg),
        (&terms.pd, lambdas.pd),
        (&terms.bds, lambdas.bds),
    ];
    for (slot, (term, lambda)) in slots.into_iter().enumerate() {
        let Some(t) = term else { continue };
        values[slot] = t.value;
        if lambda == 0.0 {
            continue;
        }
        d_omega.axpy(lambda, &t.d_omega)?;
        if let Some(g) = &t.d_z {
            d_z.axpy(lambda, g)?;
        }
    }
    let [ce, avg, pd, bds] = values;
    Ok(LossBundle {
        ce,
        avg,
        pd,
        bds,
        total: lambdas.ce * ce + lambdas.avg * avg + lambdas.pd * pd + lambdas.bds * bds,
        d_omega,
        d_z,
    })
}

/// Forward pass of the classifier and every enabled loss term on features
/// `z` with class `labels`; only points with `mask` set are supervised.
pub fn compute_terms(
    z: &DenseArray,
    bank: &PrototypeBank,
    labels: &[usize],
    mask: &[bool],
    config: &LossConfig,
) -> Result<(LossTerms, ActivationRecord)> {
    config.validate()?;
    let (_, n) = z.dims2()?;
    if labels.len() != n || mask.len() != n {
        return Err(Error::Dimension(format!(
            "{n} features, {} labels, {} mask entries",
            labels.len(),
            mask.len()
        )));
    }
    let k = bank.num_classes();
    let lam = &config.lambdas;
    let att = attention(z, bank)?;
    let (l, record) = logits(&att);

    let ce = if lam.ce > 0.0 {
        let y = one_hot(labels, k)?;
        let (value, d_l) = ce_loss(&l, &y, mask)?;
        let (d_omega, d_z) = ce_backprop_to_prototypes(&d_l, z, bank, &record)?;
        Some(Term {
            value,
            d_omega,
            d_z: Some(d_z),
        })
    } else {
        None
    };

    let avg = if lam.avg > 0.0 {
        let (value, d_omega, d_z) = match config.avg_variant {
            AvgVariant::Alg1 => {
                let classes: Vec<usize> = if config.stack_by_label {
                    (0..n)
                        .map(|p| if mask[p] { labels[p] } else { record.k_hat[p] })
                        .collect()
                } else {
                    record.k_hat.clone()
                };
                let stacked = class_prototypes(bank, &classes)?;
                let out = subclass_averaging(
                    z,
                    &stacked,
                    config.gamma(),
                    config.tau,
                    config.detach_weights,
                    config.eps,
                )?;
                (
                    out.value,
                    scatter_stacked_grad(&out.d_stacked, &classes, k)?,
                    out.d_z,
                )
            }
            AvgVariant::Frobenius => {
                let act = activated_prototypes(bank, &record);
                let (v, da, dz) = subclass_averaging_frobenius(&act, z)?;
                (v, scatter_activated_grad(&da, &record, bank.num_prototypes())?, dz)
            }
            AvgVariant::Cosine => {
                let act = activated_prototypes(bank, &record);
                let (v, da, dz) = subclass_averaging_cosine(&act, z, config.eps)?;
                (v, scatter_activated_grad(&da, &record, bank.num_prototypes())?, dz)
            }
        };
        let (value, d_omega, d_z) = match config.avg_reduction {
            Reduction::Sum => (value, d_omega, d_z),
            Reduction::Mean => {
                let inv = 1.0 / n as f64;
                (value * inv, d_omega.scaled(inv), d_z.scaled(inv))
            }
        };
        Some(Term {
            value,
            d_omega,
            d_z: config.avg_feature_grad.then_some(d_z),
        })
    } else {
        None
    };

    let pd = if lam.pd > 0.0 {
        let (value, d_omega) = prototype_diversity(bank, config.sigma, config.eps)?;
        Some(Term {
            value,
            d_omega,
            d_z: None,
        })
    } else {
        None
    };

    let bds = if lam.bds > 0.0 {
        let (value, d_omega) = balance_loss(bank, config.eps)?;
        Some(Term {
            value,
            d_omega,
            d_z: None,
        })
    } else {
        None
    };

    Ok((LossTerms { ce, avg, pd, bds }, record))
}

/// [`compute_terms`] followed by [`total_loss`].
pub fn compute_losses(
    z: &DenseArray,
    bank: &PrototypeBank,
    labels: &[usize],
    mask: &[bool],
    config: &LossConfig,
) -> Result<(LossBundle, ActivationRecord)> {
    let (terms, record) = compute_terms(z, bank, labels, mask, config)?;
    let bundle = total_loss(&terms, &config.lambdas, bank.omega().shape(), z.shape())?;
    Ok((bundle, record))
}
