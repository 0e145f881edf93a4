//! Finite-difference verification of every analytic gradient.
//!
//! Each component draws a random instance, rejects it when a perturbation of
//! size `h` could cross a tie of a piecewise definition (argmax routing,
//! hinge, arg-min pair, branch threshold), and compares the analytic
//! gradient with central differences. Rejected instances are redrawn from
//! the next sub-stream, up to `max_retries` times.

use std::fmt;

use crate::bank::{attention, class_prototypes, logits, PrototypeBank};
use crate::encoder::{
    build_graph, encode_backward, encode_with_graph, init_params, EncoderConfig, EncoderParams,
};
use crate::error::{Error, Result};
use crate::losses::{
    balance_loss, balance_stats, compute_terms, prototype_diversity,
    subclass_averaging, AvgVariant, Lambdas, LossConfig, Reduction,
};
use crate::numeric::{
    cosine_similarity, derive_seed, finite_difference_grad, max_relative_error, DenseArray, SeededRng,
    EPS,
};

/// Every component checked, in report order.
pub const COMPONENTS: &[&str] = &[
    "ce",
    "avg",
    "avg_nodetach",
    "avg1",
    "avg2",
    "pd",
    "bds",
    "encoder",
];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Sizes {
    Tiny,
    Small,
}

impl std::str::FromStr for Sizes {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "tiny" => Ok(Sizes::Tiny),
            "small" => Ok(Sizes::Small),
            _ => Err(Error::Config(format!("unknown sizes {s:?} (expected tiny or small)"))),
        }
    }
}

struct Dims {
    n: usize,
    k: usize,
    m: usize,
    d: usize,
    widths: Vec<usize>,
    k_neighbors: usize,
}

impl Sizes {
    fn dims(self) -> Dims {
        match self {
            Sizes::Tiny => Dims {
                n: 6,
                k: 2,
                m: 2,
                d: 4,
                widths: vec![4],
                k_neighbors: 3,
            },
            Sizes::Small => Dims {
                n: 16,
                k: 3,
                m: 3,
                d: 8,
                widths: vec![8, 8],
                k_neighbors: 4,
            },
        }
    }
}

#[derive(Debug, Clone)]
pub struct GradcheckConfig {
    pub seed: u64,
    pub sizes: Sizes,
    /// Central-difference step.
    pub h: f64,
    pub tolerance: f64,
    /// Denominator floor of the per-entry relative error.
    pub floor: f64,
    /// Minimum distance to any tie for an instance to be accepted.
    pub tie_margin: f64,
    pub max_retries: usize,
    /// Test hook: perturbs the analytic gradient of this component.
    pub corrupt: Option<String>,
}

impl Default for GradcheckConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            sizes: Sizes::Small,
            h: 1e-5,
            tolerance: 1e-4,
            floor: 1e-5,
            tie_margin: 1e-4,
            max_retries: 5,
            corrupt: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ComponentResult {
    pub name: String,
    pub max_rel_error: f64,
    /// Number of rejected instances before the checked one.
    pub retries: usize,
    pub passed: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradcheckReport {
    pub components: Vec<ComponentResult>,
    pub tolerance: f64,
}

impl GradcheckReport {
    pub fn passed(&self) -> bool {
        self.components.iter().all(|c| c.passed)
    }

    pub fn get(&self, name: &str) -> Option<&ComponentResult> {
        self.components.iter().find(|c| c.name == name)
    }
}

impl fmt::Display for GradcheckReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for c in &self.components {
            writeln!(
                f,
                "{:<13} max_rel_err={:.3e} retries={} {}",
                c.name,
                c.max_rel_error,
                c.retries,
                if c.passed { "ok" } else { "FAIL" }
            )?;
        }
        write!(
            f,
            "{} (tolerance {:.0e})",
            if self.passed() { "all components pass" } else { "gradient check failed" },
            self.tolerance
        )
    }
}

/// An analytic gradient and its finite-difference counterpart, flattened.
struct Comparison {
    analytic: Vec<f64>,
    numeric: Vec<f64>,
}

impl Comparison {
    fn new() -> Self {
        Self {
            analytic: Vec::new(),
            numeric: Vec::new(),
        }
    }

    fn push(&mut self, analytic: &DenseArray, numeric: &DenseArray) {
        self.analytic.extend_from_slice(analytic.as_slice());
        self.numeric.extend_from_slice(numeric.as_slice());
    }
}

fn gaussian(shape: &[usize], std: f64, rng: &mut SeededRng) -> DenseArray {
    let len = shape.iter().product();
    let data = (0..len).map(|_| std * rng.normal()).collect();
    DenseArray::from_vec(shape, data).expect("finite draws")
}

/// Features and bank where about half the points sit close to some
/// prototype, so both branches of the averaging threshold are exercised.
fn features_and_bank(dims: &Dims, rng: &mut SeededRng) -> (DenseArray, PrototypeBank) {
    let omega = gaussian(&[dims.d, dims.m, dims.k], 1.0, rng);
    let bank = PrototypeBank::from_omega(omega).expect("rank 3");
    let mut z = gaussian(&[dims.d, dims.n], 1.0, rng);
    for p in (0..dims.n).step_by(2) {
        let m = rng.below(dims.m);
        let k = rng.below(dims.k);
        let proto = bank.prototype(m, k);
        for (dd, v) in proto.iter().enumerate() {
            let noisy = 1.5 * v + 0.3 * rng.normal();
            z.set(&[dd, p], noisy);
        }
    }
    (z, bank)
}

fn labels_and_mask(dims: &Dims, rng: &mut SeededRng) -> (Vec<usize>, Vec<bool>) {
    let labels = (0..dims.n).map(|_| rng.below(dims.k)).collect();
    let mut mask: Vec<bool> = (0..dims.n).map(|_| rng.uniform() < 0.6).collect();
    mask[0] = true;
    (labels, mask)
}

fn sorted_gap(vals: &mut [f64]) -> f64 {
    vals.sort_by(|a, b| b.total_cmp(a));
    if vals.len() < 2 {
        f64::INFINITY
    } else {
        vals[0] - vals[1]
    }
}

/// Smallest margin of the global and per-class argmax over the attention.
fn attention_gaps(z: &DenseArray, bank: &PrototypeBank) -> f64 {
    let att = attention(z, bank).expect("shapes agree");
    let (m, k) = (bank.num_prototypes(), bank.num_classes());
    let mut gap = f64::INFINITY;
    for n in 0..att.num_points() {
        let mut all = Vec::with_capacity(m * k);
        for c in 0..k {
            let mut class: Vec<f64> = (0..m).map(|mm| att.get(n, mm, c)).collect();
            all.extend_from_slice(&class);
            gap = gap.min(sorted_gap(&mut class));
        }
        gap = gap.min(sorted_gap(&mut all));
    }
    gap
}

fn column(a: &DenseArray, j: usize) -> Vec<f64> {
    a.column(j)
}

/// Margin of `max_m s_nm` to the averaging threshold for every point.
fn threshold_gap(z: &DenseArray, stacked: &DenseArray, gamma: f64) -> f64 {
    let (d, m, n) = stacked.dims3().expect("rank 3");
    let st = stacked.as_slice();
    let mut gap = f64::INFINITY;
    for p in 0..n {
        let zn = column(z, p);
        let top = (0..m)
            .map(|mm| {
                let proto: Vec<f64> = (0..d).map(|dd| st[(dd * m + mm) * n + p]).collect();
                cosine_similarity(&zn, &proto, EPS)
            })
            .fold(f64::NEG_INFINITY, f64::max);
        gap = gap.min((top - gamma).abs());
    }
    gap
}

fn loss_config(variant: AvgVariant, lambdas: Lambdas, detach: bool) -> LossConfig {
    LossConfig {
        lambdas,
        detach_weights: detach,
        avg_variant: variant,
        // the literal sum keeps FD magnitudes comparable across components
        avg_reduction: Reduction::Sum,
        ..LossConfig::default()
    }
}

fn only(slot: &str) -> Lambdas {
    let mut l = Lambdas::ZERO;
    match slot {
        "ce" => l.ce = 1.0,
        "avg" => l.avg = 1.0,
        "pd" => l.pd = 1.0,
        "bds" => l.bds = 1.0,
        _ => unreachable!("known slot"),
    }
    l
}

/// Value of one term through the full classifier forward pass.
fn term_value(
    z: &DenseArray,
    omega: &DenseArray,
    labels: &[usize],
    mask: &[bool],
    cfg: &LossConfig,
    slot: &str,
) -> f64 {
    let bank = PrototypeBank::from_omega(omega.clone()).expect("rank 3");
    let (terms, _) = compute_terms(z, &bank, labels, mask, cfg).expect("valid instance");
    let t = match slot {
        "ce" => terms.ce,
        "avg" => terms.avg,
        "pd" => terms.pd,
        _ => terms.bds,
    };
    t.expect("enabled term").value
}

/// Compares gradients of one term with respect to both `omega` and `z`.
fn check_term(
    z: &DenseArray,
    bank: &PrototypeBank,
    labels: &[usize],
    mask: &[bool],
    cfg: &LossConfig,
    slot: &str,
    h: f64,
) -> Result<Comparison> {
    let (terms, _) = compute_terms(z, bank, labels, mask, cfg)?;
    let t = match slot {
        "ce" => terms.ce,
        "avg" => terms.avg,
        "pd" => terms.pd,
        _ => terms.bds,
    }
    .expect("enabled term");
    let omega = bank.omega().clone();
    let mut cmp = Comparison::new();
    let num_omega = finite_difference_grad(|o| term_value(z, o, labels, mask, cfg, slot), &omega, h)?;
    cmp.push(&t.d_omega, &num_omega);
    if let Some(dz) = &t.d_z {
        let num_z = finite_difference_grad(|zz| term_value(zz, &omega, labels, mask, cfg, slot), z, h)?;
        cmp.push(dz, &num_z);
    }
    Ok(cmp)
}

type Attempt = Result<Option<Comparison>>;

fn attempt_ce(dims: &Dims, rng: &mut SeededRng, cfg: &GradcheckConfig) -> Attempt {
    let (z, bank) = features_and_bank(dims, rng);
    if attention_gaps(&z, &bank) < cfg.tie_margin {
        return Ok(None);
    }
    let (labels, mask) = labels_and_mask(dims, rng);
    let lc = loss_config(AvgVariant::Alg1, only("ce"), true);
    check_term(&z, &bank, &labels, &mask, &lc, "ce", cfg.h).map(Some)
}

/// Alg. 1 with frozen weights: the finite-difference oracle evaluates
/// `-sum w0 * s(x)` with the weights of the unperturbed instance.
fn attempt_avg_detached(dims: &Dims, rng: &mut SeededRng, cfg: &GradcheckConfig) -> Attempt {
    let (z, bank) = features_and_bank(dims, rng);
    if attention_gaps(&z, &bank) < cfg.tie_margin {
        return Ok(None);
    }
    let lc = loss_config(AvgVariant::Alg1, only("avg"), true);
    let (_, rec) = logits(&attention(&z, &bank)?);
    let stacked = class_prototypes(&bank, &rec.k_hat)?;
    let gamma = lc.gamma();
    if threshold_gap(&z, &stacked, gamma) < cfg.tie_margin {
        return Ok(None);
    }
    let out = subclass_averaging(&z, &stacked, gamma, lc.tau, true, lc.eps)?;
    let w0 = out.weights.clone();
    let m = dims.m;
    let frozen = |zz: &DenseArray, st: &DenseArray| -> f64 {
        let (d, _, n) = st.dims3().expect("rank 3");
        let s = st.as_slice();
        let mut v = 0.0;
        for p in 0..n {
            let zn = zz.column(p);
            for mm in 0..m {
                let proto: Vec<f64> = (0..d).map(|dd| s[(dd * m + mm) * n + p]).collect();
                v -= w0[p * m + mm] * cosine_similarity(&zn, &proto, lc.eps);
            }
        }
        v
    };
    let mut cmp = Comparison::new();
    cmp.push(&out.d_stacked, &finite_difference_grad(|st| frozen(&z, st), &stacked, cfg.h)?);
    cmp.push(&out.d_z, &finite_difference_grad(|zz| frozen(zz, &stacked), &z, cfg.h)?);
    Ok(Some(cmp))
}

/// Alg. 1 differentiated through the softmax, checked end to end from the
/// bank (including the scatter into the bank layout).
fn attempt_avg_full(dims: &Dims, rng: &mut SeededRng, cfg: &GradcheckConfig) -> Attempt {
    let (z, bank) = features_and_bank(dims, rng);
    if attention_gaps(&z, &bank) < cfg.tie_margin {
        return Ok(None);
    }
    let lc = loss_config(AvgVariant::Alg1, only("avg"), false);
    let (_, rec) = logits(&attention(&z, &bank)?);
    let stacked = class_prototypes(&bank, &rec.k_hat)?;
    if threshold_gap(&z, &stacked, lc.gamma()) < cfg.tie_margin {
        return Ok(None);
    }
    let (labels, mask) = labels_and_mask(dims, rng);
    check_term(&z, &bank, &labels, &mask, &lc, "avg", cfg.h).map(Some)
}

fn attempt_avg_variant(
    variant: AvgVariant,
) -> impl Fn(&Dims, &mut SeededRng, &GradcheckConfig) -> Attempt {
    move |dims, rng, cfg| {
        let (z, bank) = features_and_bank(dims, rng);
        if attention_gaps(&z, &bank) < cfg.tie_margin {
            return Ok(None);
        }
        let (labels, mask) = labels_and_mask(dims, rng);
        let lc = loss_config(variant, only("avg"), true);
        check_term(&z, &bank, &labels, &mask, &lc, "avg", cfg.h).map(Some)
    }
}

/// Bank whose classes share a direction so some within-class cosines exceed
/// the diversity threshold.
fn correlated_bank(dims: &Dims, rng: &mut SeededRng) -> PrototypeBank {
    let mut omega = gaussian(&[dims.d, dims.m, dims.k], 0.6, rng);
    for c in 0..dims.k {
        let center: Vec<f64> = (0..dims.d).map(|_| rng.normal()).collect();
        for m in 0..dims.m {
            for (dd, v) in center.iter().enumerate() {
                let cur = omega.get(&[dd, m, c]);
                omega.set(&[dd, m, c], cur + v);
            }
        }
    }
    PrototypeBank::from_omega(omega).expect("rank 3")
}

fn attempt_pd(dims: &Dims, rng: &mut SeededRng, cfg: &GradcheckConfig) -> Attempt {
    let bank = correlated_bank(dims, rng);
    let lc = loss_config(AvgVariant::Alg1, only("pd"), true);
    for class in bank.prototypes_by_class() {
        for i in 0..dims.m {
            for j in 0..dims.m {
                if i != j && (cosine_similarity(&class[i], &class[j], lc.eps) - lc.sigma).abs() < cfg.tie_margin {
                    return Ok(None);
                }
            }
        }
    }
    let (_, grad) = prototype_diversity(&bank, lc.sigma, lc.eps)?;
    let num = finite_difference_grad(
        |o| {
            let b = PrototypeBank::from_omega(o.clone()).expect("rank 3");
            prototype_diversity(&b, lc.sigma, lc.eps).expect("valid sigma").0
        },
        bank.omega(),
        cfg.h,
    )?;
    let mut cmp = Comparison::new();
    cmp.push(&grad, &num);
    Ok(Some(cmp))
}

fn attempt_bds(dims: &Dims, rng: &mut SeededRng, cfg: &GradcheckConfig) -> Attempt {
    let bank = correlated_bank(dims, rng);
    let stats = balance_stats(&bank, EPS);
    let mut dists: Vec<f64> = stats.pair_distances.iter().map(|(_, v)| -v).collect();
    let mut scat = stats.scatters.clone();
    // relative margins: both quantities enter through a logarithm
    let dmin = -dists.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let smax = scat.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if sorted_gap(&mut dists) < cfg.tie_margin * dmin || sorted_gap(&mut scat) < cfg.tie_margin * smax {
        return Ok(None);
    }
    if dmin < 1e3 * EPS || smax < 1e3 * EPS {
        return Ok(None);
    }
    let (_, grad) = balance_loss(&bank, EPS)?;
    let num = finite_difference_grad(
        |o| {
            let b = PrototypeBank::from_omega(o.clone()).expect("rank 3");
            balance_loss(&b, EPS).expect("K >= 2").0
        },
        bank.omega(),
        cfg.h,
    )?;
    let mut cmp = Comparison::new();
    cmp.push(&grad, &num);
    Ok(Some(cmp))
}

/// Encoder gradients of the linear functional `sum(C * Z)` with respect to
/// every parameter tensor and the input, under a fixed neighbourhood graph.
fn attempt_encoder(dims: &Dims, rng: &mut SeededRng, cfg: &GradcheckConfig) -> Attempt {
    let ec = EncoderConfig {
        in_dim: 3,
        k_neighbors: dims.k_neighbors,
        layer_widths: dims.widths.clone(),
        out_dim: dims.d,
        leaky_slope: 0.2,
    };
    let mut params = init_params(&ec, rng)?;
    // nonzero biases so the leaky kink is not hit at the origin
    for l in &mut params.layers {
        let len = l.bias.len();
        l.bias = gaussian(&[len], 0.1, rng);
    }
    let x = gaussian(&[3, dims.n], 1.0, rng);
    let graph = build_graph(&x, &ec)?;
    let (z, tape) = encode_with_graph(&x, &graph, &params, &ec)?;
    if tape.min_tie_gap(&params) < cfg.tie_margin {
        return Ok(None);
    }
    let c = gaussian(z.shape(), 1.0, rng);
    let functional = |p: &EncoderParams, xx: &DenseArray| -> f64 {
        let (zz, _) = encode_with_graph(xx, &graph, p, &ec).expect("valid instance");
        zz.as_slice().iter().zip(c.as_slice()).map(|(a, b)| a * b).sum()
    };
    let (grads, dx) = encode_backward(&tape, &params, &c)?;
    let mut cmp = Comparison::new();
    let tensors = params.tensors().len();
    for t in 0..tensors {
        let base = params.tensors()[t].clone();
        let num = finite_difference_grad(
            |v| {
                let mut p = params.clone();
                *p.tensors_mut()[t] = v.clone();
                functional(&p, &x)
            },
            &base,
            cfg.h,
        )?;
        cmp.push(grads.tensors()[t], &num);
    }
    cmp.push(&dx, &finite_difference_grad(|xx| functional(&params, xx), &x, cfg.h)?);
    Ok(Some(cmp))
}

type AttemptFn = Box<dyn Fn(&Dims, &mut SeededRng, &GradcheckConfig) -> Attempt>;

fn attempt_for(name: &str) -> AttemptFn {
    match name {
        "ce" => Box::new(attempt_ce),
        "avg" => Box::new(attempt_avg_detached),
        "avg_nodetach" => Box::new(attempt_avg_full),
        "avg1" => Box::new(attempt_avg_variant(AvgVariant::Frobenius)),
        "avg2" => Box::new(attempt_avg_variant(AvgVariant::Cosine)),
        "pd" => Box::new(attempt_pd),
        "bds" => Box::new(attempt_bds),
        "encoder" => Box::new(attempt_encoder),
        _ => unreachable!("component list is fixed"),
    }
}

/// Checks one component; instance `r` is drawn from sub-stream `r` of the
/// component's stream.
pub fn check_component(name: &str, cfg: &GradcheckConfig) -> Result<ComponentResult> {
    let idx = COMPONENTS
        .iter()
        .position(|c| *c == name)
        .ok_or_else(|| Error::Config(format!("unknown gradcheck component {name:?}")))?;
    let dims = cfg.sizes.dims();
    let run = attempt_for(name);
    let base = SeededRng::new(derive_seed(cfg.seed, idx as u64));
    for retry in 0..=cfg.max_retries {
        let mut rng = base.derive(retry as u64);
        if let Some(mut cmp) = run(&dims, &mut rng, cfg)? {
            if cfg.corrupt.as_deref() == Some(name) {
                if let Some(v) = cmp.analytic.iter_mut().max_by(|a, b| a.abs().total_cmp(&b.abs())) {
                    *v *= 1.01;
                }
            }
            let err = max_relative_error(&cmp.analytic, &cmp.numeric, cfg.floor);
            return Ok(ComponentResult {
                name: name.to_string(),
                max_rel_error: err,
                retries: retry,
                passed: err < cfg.tolerance,
            });
        }
    }
    Err(Error::Numeric(format!(
        "{name}: no tie-free instance after {} retries",
        cfg.max_retries
    )))
}

pub fn run_gradcheck(cfg: &GradcheckConfig) -> Result<GradcheckReport> {
    let components = COMPONENTS
        .iter()
        .map(|c| check_component(c, cfg))
        .collect::<Result<Vec<_>>>()?;
    Ok(GradcheckReport {
        components,
        tolerance: cfg.tolerance,
    })
}
