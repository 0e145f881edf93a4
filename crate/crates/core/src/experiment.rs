//! Named configurations of the ablation grid and a runner over seeds.

use std::str::FromStr;

use serde::Serialize;

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::eval::EvalReport;
use crate::losses::{AvgVariant, Lambdas};
use crate::trainer::{train, TrainConfig};

/// One grid cell: a name and the changes it makes to a base config.
#[derive(Debug, Clone, PartialEq)]
pub struct Cell {
    pub name: String,
    pub num_prototypes: usize,
    pub lambdas: Lambdas,
    pub avg_variant: AvgVariant,
}

impl Cell {
    pub fn apply(&self, base: &TrainConfig) -> TrainConfig {
        let mut c = base.clone();
        c.num_prototypes = self.num_prototypes;
        c.loss.lambdas = self.lambdas;
        c.loss.avg_variant = self.avg_variant;
        c
    }
}

fn lambdas(ce: f64, avg: f64, pd: f64, bds: f64) -> Lambdas {
    Lambdas { ce, avg, pd, bds }
}

/// Resolves a cell name. Known names: `baseline` (M=1, CE only),
/// `ce_only`, `avg` (CE + averaging), `full` (all four terms), `alg1`,
/// `frobenius`, `cosine` (full loss with that averaging variant) and `mN`
/// (full loss with N prototypes).
pub fn cell(name: &str, default_m: usize) -> Result<Cell> {
    let full = Lambdas::default();
    let ce_only = lambdas(1.0, 0.0, 0.0, 0.0);
    let mk = |m: usize, l: Lambdas, v: AvgVariant| Cell {
        name: name.to_string(),
        num_prototypes: m,
        lambdas: l,
        avg_variant: v,
    };
    Ok(match name {
        "baseline" => mk(1, ce_only, AvgVariant::Alg1),
        "ce_only" => mk(default_m, ce_only, AvgVariant::Alg1),
        "avg" => mk(default_m, lambdas(1.0, 1.0, 0.0, 0.0), AvgVariant::Alg1),
        "full" | "alg1" => mk(default_m, full, AvgVariant::Alg1),
        "frobenius" => mk(default_m, full, AvgVariant::Frobenius),
        "cosine" => mk(default_m, full, AvgVariant::Cosine),
        _ => {
            let m = name
                .strip_prefix('m')
                .and_then(|v| usize::from_str(v).ok())
                .filter(|&m| m >= 1)
                .ok_or_else(|| Error::Config(format!("unknown grid cell {name:?}")))?;
            mk(m, full, AvgVariant::Alg1)
        }
    })
}

/// Expands a grid description: a comma-separated list of cell names and
/// presets. `tab4` is baseline, ce_only, avg, full; `variants` is alg1,
/// frobenius, cosine; `msweep` is m1..m10; `all` is all three.
pub fn grid(spec: &str, default_m: usize) -> Result<Vec<Cell>> {
    let mut names: Vec<String> = Vec::new();
    for part in spec.split(',').map(str::trim).filter(|p| !p.is_empty()) {
        match part {
            "tab4" => names.extend(["baseline", "ce_only", "avg", "full"].map(String::from)),
            "variants" => names.extend(["alg1", "frobenius", "cosine"].map(String::from)),
            "msweep" => names.extend((1..=10).map(|m| format!("m{m}"))),
            "all" => {
                names.extend(["baseline", "ce_only", "avg", "full"].map(String::from));
                names.extend(["alg1", "frobenius", "cosine"].map(String::from));
                names.extend((1..=10).map(|m| format!("m{m}")));
            }
            other => names.push(other.to_string()),
        }
    }
    if names.is_empty() {
        return Err(Error::Config("empty grid".into()));
    }
    names.iter().map(|n| cell(n, default_m)).collect()
}

/// Outcome of one (cell, seed) run.
#[derive(Debug, Clone, Serialize)]
pub struct CellResult {
    pub cell: String,
    pub seed: u64,
    pub num_prototypes: usize,
    pub report: EvalReport,
    pub max_within_class_cosine: f64,
}

pub const CSV_HEADER: &str = "cell,seed,m,lambda_ce,lambda_avg,lambda_pd,lambda_bds,avg_variant,miou_samp,miou_cat,active_protos_mean,active_per_class,subclass_nmi,max_within_class_cosine";

impl CellResult {
    pub fn csv_row(&self, cell: &Cell) -> String {
        let active: Vec<String> = self.report.active_prototypes.iter().map(|a| a.to_string()).collect();
        let l = cell.lambdas;
        format!(
            "{},{},{},{},{},{},{},{},{},{},{},{},{},{}",
            self.cell,
            self.seed,
            self.num_prototypes,
            l.ce,
            l.avg,
            l.pd,
            l.bds,
            cell.avg_variant.name(),
            self.report.miou_samp,
            self.report.miou_cat,
            self.report.active_prototypes_mean(),
            active.join(";"),
            self.report.subclass_nmi,
            self.max_within_class_cosine
        )
    }
}

/// Trains `cell` from `base` with the given seed and evaluates on `eval`
/// (or the training samples).
pub fn run_cell(
    cell: &Cell,
    base: &TrainConfig,
    seed: u64,
    train_set: &Dataset,
    eval: Option<&Dataset>,
) -> Result<CellResult> {
    let mut cfg = cell.apply(base);
    cfg.seed = seed;
    let out = train(train_set, eval, &cfg)?;
    let max_cos = if cfg.num_prototypes > 1 {
        out.model.bank.max_within_class_cosine()
    } else {
        f64::NAN
    };
    Ok(CellResult {
        cell: cell.name.clone(),
        seed,
        num_prototypes: cfg.num_prototypes,
        report: out.report,
        max_within_class_cosine: max_cos,
    })
}
