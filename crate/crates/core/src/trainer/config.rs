//! Training configuration and its `key = value` text form.

use serde::{Deserialize, Serialize};

use crate::encoder::EncoderConfig;
use crate::error::{Error, Result};
use crate::eval::ActivityThresholds;
use crate::losses::{AvgVariant, Lambdas, LossConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub num_prototypes: usize,
    pub seed: u64,
    pub loss: LossConfig,
    pub encoder: EncoderConfig,
    pub thresholds: ActivityThresholds,
    /// Evaluate every this many epochs (the last epoch always is).
    pub eval_every: usize,
    /// Write a checkpoint every this many epochs; 0 writes only the final one.
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 60,
            batch_size: 8,
            learning_rate: 1e-3,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            num_prototypes: 5,
            seed: 0,
            loss: LossConfig::default(),
            encoder: EncoderConfig::default(),
            thresholds: ActivityThresholds::default(),
            eval_every: 1,
            checkpoint_every: 0,
        }
    }
}

/// Every key accepted by [`TrainConfig::set`], in manifest order.
pub const CONFIG_KEYS: &[&str] = &[
    "epochs",
    "batch_size",
    "learning_rate",
    "adam_beta1",
    "adam_beta2",
    "adam_eps",
    "num_prototypes",
    "seed",
    "lambda_ce",
    "lambda_avg",
    "lambda_pd",
    "lambda_bds",
    "sigma",
    "gamma",
    "tau",
    "detach_weights",
    "avg_variant",
    "avg_feature_grad",
    "stack_by_label",
    "avg_reduction",
    "k_neighbors",
    "layer_widths",
    "out_dim",
    "leaky_slope",
    "min_points",
    "min_frac",
    "eval_every",
    "checkpoint_every",
];

fn parse_bool(key: &str, v: &str) -> Result<bool> {
    match v {
        "true" | "1" | "on" | "yes" => Ok(true),
        "false" | "0" | "off" | "no" => Ok(false),
        _ => Err(Error::Config(format!("{key} expects true/false, got {v:?}"))),
    }
}

fn parse_num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse()
        .map_err(|_| Error::Config(format!("{key}: cannot parse {v:?}")))
}

impl TrainConfig {
    pub fn gamma(&self) -> f64 {
        self.loss.gamma()
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be >= 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        if self.num_prototypes == 0 {
            return Err(Error::Config("num_prototypes must be >= 1".into()));
        }
        if !(self.learning_rate > 0.0) || !self.learning_rate.is_finite() {
            return Err(Error::Config("learning_rate must be positive".into()));
        }
        for (name, b) in [("adam_beta1", self.adam_beta1), ("adam_beta2", self.adam_beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::Config(format!("{name} must lie in [0, 1), got {b}")));
            }
        }
        if !(self.adam_eps > 0.0) {
            return Err(Error::Config("adam_eps must be positive".into()));
        }
        if self.eval_every == 0 {
            return Err(Error::Config("eval_every must be >= 1".into()));
        }
        if !(self.thresholds.min_frac >= 0.0) {
            return Err(Error::Config("min_frac must be >= 0".into()));
        }
        self.loss.validate()?;
        self.encoder.validate()
    }

    /// Sets one key from its text value.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        match key {
            "epochs" => self.epochs = parse_num(key, v)?,
            "batch_size" => self.batch_size = parse_num(key, v)?,
            "learning_rate" => self.learning_rate = parse_num(key, v)?,
            "adam_beta1" => self.adam_beta1 = parse_num(key, v)?,
            "adam_beta2" => self.adam_beta2 = parse_num(key, v)?,
            "adam_eps" => self.adam_eps = parse_num(key, v)?,
            "num_prototypes" | "m" => self.num_prototypes = parse_num(key, v)?,
            "seed" => self.seed = parse_num(key, v)?,
            "lambda_ce" => self.loss.lambdas.ce = parse_num(key, v)?,
            "lambda_avg" => self.loss.lambdas.avg = parse_num(key, v)?,
            "lambda_pd" => self.loss.lambdas.pd = parse_num(key, v)?,
            "lambda_bds" => self.loss.lambdas.bds = parse_num(key, v)?,
            "sigma" => self.loss.sigma = parse_num(key, v)?,
            "gamma" => {
                self.loss.gamma_override = if v == "auto" { None } else { Some(parse_num(key, v)?) }
            }
            "tau" => self.loss.tau = parse_num(key, v)?,
            "detach_weights" => self.loss.detach_weights = parse_bool(key, v)?,
            "avg_variant" => self.loss.avg_variant = v.parse()?,
            "avg_feature_grad" => self.loss.avg_feature_grad = parse_bool(key, v)?,
            "stack_by_label" => self.loss.stack_by_label = parse_bool(key, v)?,
            "avg_reduction" => self.loss.avg_reduction = v.parse()?,
            "k_neighbors" => self.encoder.k_neighbors = parse_num(key, v)?,
            "layer_widths" => {
                self.encoder.layer_widths = v
                    .split(',')
                    .map(|w| parse_num::<usize>(key, w.trim()))
                    .collect::<Result<_>>()?
            }
            "out_dim" => self.encoder.out_dim = parse_num(key, v)?,
            "leaky_slope" => self.encoder.leaky_slope = parse_num(key, v)?,
            "min_points" => self.thresholds.min_points = parse_num(key, v)?,
            "min_frac" => self.thresholds.min_frac = parse_num(key, v)?,
            "eval_every" => self.eval_every = parse_num(key, v)?,
            "checkpoint_every" => self.checkpoint_every = parse_num(key, v)?,
            _ => return Err(Error::Config(format!("unknown config key {key:?}"))),
        }
        Ok(())
    }

    /// Applies a `key = value` document (UTF-8, `#` comments) on top of
    /// `self`. Errors carry the 1-based line number.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (idx, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!("line {}: expected `key = value`, got {line:?}", idx + 1))
            })?;
            self.set(k.trim(), v).map_err(|e| match e {
                Error::Config(msg) => Error::Config(format!("line {}: {msg}", idx + 1)),
                other => other,
            })?;
        }
        Ok(())
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut c = Self::default();
        c.apply_text(text)?;
        c.validate()?;
        Ok(c)
    }

    /// Fully resolved text form; parsing it reproduces `self`.
    pub fn to_text(&self) -> String {
        let l = &self.loss;
        let widths: Vec<String> = self.encoder.layer_widths.iter().map(|w| w.to_string()).collect();
        let gamma = match l.gamma_override {
            Some(g) => g.to_string(),
            None => "auto".to_string(),
        };
        let mut s = String::new();
        let mut kv = |k: &str, v: String| s.push_str(&format!("{k} = {v}\n"));
        kv("epochs", self.epochs.to_string());
        kv("batch_size", self.batch_size.to_string());
        kv("learning_rate", self.learning_rate.to_string());
        kv("adam_beta1", self.adam_beta1.to_string());
        kv("adam_beta2", self.adam_beta2.to_string());
        kv("adam_eps", self.adam_eps.to_string());
        kv("num_prototypes", self.num_prototypes.to_string());
        kv("seed", self.seed.to_string());
        kv("lambda_ce", l.lambdas.ce.to_string());
        kv("lambda_avg", l.lambdas.avg.to_string());
        kv("lambda_pd", l.lambdas.pd.to_string());
        kv("lambda_bds", l.lambdas.bds.to_string());
        kv("sigma", l.sigma.to_string());
        kv("gamma", gamma);
        kv("tau", l.tau.to_string());
        kv("detach_weights", l.detach_weights.to_string());
        kv("avg_variant", l.avg_variant.name().to_string());
        kv("avg_feature_grad", l.avg_feature_grad.to_string());
        kv("stack_by_label", l.stack_by_label.to_string());
        kv("avg_reduction", l.avg_reduction.name().to_string());
        kv("k_neighbors", self.encoder.k_neighbors.to_string());
        kv("layer_widths", widths.join(","));
        kv("out_dim", self.encoder.out_dim.to_string());
        kv("leaky_slope", self.encoder.leaky_slope.to_string());
        kv("min_points", self.thresholds.min_points.to_string());
        kv("min_frac", self.thresholds.min_frac.to_string());
        kv("eval_every", self.eval_every.to_string());
        kv("checkpoint_every", self.checkpoint_every.to_string());
        s
    }

    /// Convenience for the ablation presets.
    pub fn with_lambdas(mut self, lambdas: Lambdas) -> Self {
        self.loss.lambdas = lambdas;
        self
    }

    pub fn with_avg_variant(mut self, v: AvgVariant) -> Self {
        self.loss.avg_variant = v;
        self
    }
}
