//! Mini-batch training of encoder and prototype bank.
//!
//! Every random choice is drawn from a sub-stream of the configured seed:
//! encoder weights from stream 1, the bank from stream 2 and the sample
//! order of epoch `e` from stream `EPOCH_STREAM + e`. Per-sample work runs
//! on the rayon pool; results are always combined in sample order, so the
//! thread count never changes a number.

mod adam;
pub mod checkpoint;
mod config;

pub use adam::{AdamParams, OptimizerState};
pub use config::{TrainConfig, CONFIG_KEYS};

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rayon::prelude::*;

use crate::bank::{attention, logits, ActivationRecord, PrototypeBank};
use crate::data::{Dataset, PointCloudSample};
use crate::encoder::{build_graph, encode_backward, encode_with_graph, init_params, EncoderParams};
use crate::error::{Error, Result};
use crate::eval::{
    activation_counts, active_from_counts, assignment_table, miou, subclass_nmi_per_class, EvalReport,
    SampleResult,
};
use crate::losses::{compute_losses, LossBundle};
use crate::numeric::{derive_seed, DenseArray, KnnGraph, SeededRng};

pub const ENCODER_STREAM: u64 = 1;
pub const BANK_STREAM: u64 = 2;
pub const EPOCH_STREAM: u64 = 1 << 32;

pub const METRICS_HEADER: &str = "epoch,ce,avg,pd,bds,total,miou_samp,miou_cat,active_protos_mean";

/// Trainable state: encoder weights and prototype bank.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub encoder: EncoderParams,
    pub bank: PrototypeBank,
}

impl Model {
    /// Fresh model for `num_classes` classes.
    pub fn init(config: &TrainConfig, num_classes: usize) -> Result<Self> {
        config.validate()?;
        let base = SeededRng::new(config.seed);
        let encoder = init_params(&config.encoder, &mut base.derive(ENCODER_STREAM))?;
        let bank = PrototypeBank::init(
            num_classes,
            config.num_prototypes,
            config.encoder.out_dim,
            &mut base.derive(BANK_STREAM),
        )?;
        Ok(Self { encoder, bank })
    }

    /// Lengths of every trainable tensor: encoder tensors, then `omega`.
    pub fn tensor_lengths(&self) -> Vec<usize> {
        let mut v: Vec<usize> = self.encoder.tensors().iter().map(|t| t.len()).collect();
        v.push(self.bank.omega().len());
        v
    }

    pub fn new_optimizer(&self) -> OptimizerState {
        OptimizerState::new(&self.tensor_lengths())
    }

    pub fn is_finite(&self) -> bool {
        self.encoder.tensors().iter().all(|t| t.all_finite()) && self.bank.omega().all_finite()
    }
}

/// One sample of a batch with its cached neighbourhood graph.
#[derive(Debug, Clone, Copy)]
pub struct BatchItem<'a> {
    pub sample: &'a PointCloudSample,
    pub graph: &'a KnnGraph,
}

fn concat_columns(parts: &[DenseArray]) -> Result<DenseArray> {
    let rows = parts[0].shape()[0];
    let total: usize = parts.iter().map(|p| p.shape()[1]).sum();
    let mut out = vec![0.0; rows * total];
    let mut offset = 0;
    for p in parts {
        let n = p.shape()[1];
        let src = p.as_slice();
        for r in 0..rows {
            out[r * total + offset..r * total + offset + n].copy_from_slice(&src[r * n..(r + 1) * n]);
        }
        offset += n;
    }
    DenseArray::from_vec(&[rows, total], out)
}

fn column_block(a: &DenseArray, start: usize, n: usize) -> DenseArray {
    let rows = a.shape()[0];
    let total = a.shape()[1];
    let src = a.as_slice();
    let mut out = Vec::with_capacity(rows * n);
    for r in 0..rows {
        out.extend_from_slice(&src[r * total + start..r * total + start + n]);
    }
    DenseArray::from_parts_unchecked(vec![rows, n], out)
}

/// Forward, losses, backward and one Adam update on both encoder and bank.
///
/// The batch's features are concatenated in sample order and the losses are
/// evaluated on the concatenation; encoder gradients are summed over
/// samples in index order.
pub fn train_step(
    batch: &[BatchItem<'_>],
    model: &mut Model,
    opt: &mut OptimizerState,
    config: &TrainConfig,
) -> Result<LossBundle> {
    if batch.is_empty() {
        return Err(Error::Input("empty batch".into()));
    }
    let forwards = batch
        .par_iter()
        .map(|it| encode_with_graph(&it.sample.points, it.graph, &model.encoder, &config.encoder))
        .collect::<Result<Vec<_>>>()?;
    let zs: Vec<DenseArray> = forwards.iter().map(|(z, _)| z.clone()).collect();
    let z = concat_columns(&zs)?;
    let labels: Vec<usize> = batch.iter().flat_map(|it| it.sample.labels.iter().copied()).collect();
    let mask: Vec<bool> = batch.iter().flat_map(|it| it.sample.mask.iter().copied()).collect();

    let (bundle, _) = compute_losses(&z, &model.bank, &labels, &mask, &config.loss)?;
    if let Some(term) = bundle.first_non_finite() {
        return Err(Error::Numeric(format!(
            "non-finite {term} loss at optimizer step {}",
            opt.step + 1
        )));
    }

    let mut enc_grad = model.encoder.zeros_like();
    if bundle.d_z.max_abs() > 0.0 {
        let mut offsets = Vec::with_capacity(batch.len());
        let mut at = 0;
        for it in batch {
            offsets.push(at);
            at += it.sample.num_points();
        }
        let grads = forwards
            .par_iter()
            .zip(offsets.par_iter())
            .map(|((zi, tape), &start)| {
                let dz = column_block(&bundle.d_z, start, zi.shape()[1]);
                encode_backward(tape, &model.encoder, &dz).map(|(g, _)| g)
            })
            .collect::<Result<Vec<_>>>()?;
        for g in &grads {
            enc_grad.add_scaled(1.0, g)?;
        }
    }

    let hp = AdamParams {
        lr: config.learning_rate,
        beta1: config.adam_beta1,
        beta2: config.adam_beta2,
        eps: config.adam_eps,
    };
    let grad_tensors: Vec<&[f64]> = enc_grad
        .tensors()
        .into_iter()
        .map(|t| t.as_slice())
        .chain(std::iter::once(bundle.d_omega.as_slice()))
        .collect();
    let Model { encoder, bank } = model;
    let mut params: Vec<&mut [f64]> = encoder
        .tensors_mut()
        .into_iter()
        .map(|t| t.as_mut_slice())
        .chain(std::iter::once(bank.omega_mut().as_mut_slice()))
        .collect();
    opt.update(hp, &mut params, &grad_tensors)?;
    Ok(bundle)
}

/// Activation record of one sample under `model`.
pub fn predict(
    model: &Model,
    sample: &PointCloudSample,
    graph: &KnnGraph,
    config: &TrainConfig,
) -> Result<ActivationRecord> {
    let (z, _) = encode_with_graph(&sample.points, graph, &model.encoder, &config.encoder)?;
    let att = attention(&z, &model.bank)?;
    Ok(logits(&att).1)
}

pub fn build_graphs(dataset: &Dataset, config: &TrainConfig) -> Result<Vec<KnnGraph>> {
    dataset
        .samples
        .par_iter()
        .map(|s| build_graph(&s.points, &config.encoder))
        .collect()
}

/// Activation records of every sample, in order.
pub fn predict_dataset(
    model: &Model,
    dataset: &Dataset,
    graphs: &[KnnGraph],
    config: &TrainConfig,
) -> Result<Vec<ActivationRecord>> {
    dataset
        .samples
        .par_iter()
        .zip(graphs.par_iter())
        .map(|(s, g)| predict(model, s, g, config))
        .collect()
}

/// Metrics of `records` against the ground truth of `dataset` (masks are
/// ignored: every point is scored).
pub fn report_from_records(
    dataset: &Dataset,
    records: &[ActivationRecord],
    config: &TrainConfig,
) -> EvalReport {
    let k = dataset.num_classes;
    let m = config.num_prototypes;
    let results: Vec<SampleResult> = dataset
        .samples
        .iter()
        .zip(records)
        .map(|(s, r)| SampleResult {
            predictions: r.k_hat.clone(),
            labels: s.labels.clone(),
            category: s.family,
        })
        .collect();
    let mi = miou(&results, k);
    let all = ActivationRecord::concat(records);
    let labels: Vec<usize> = dataset.samples.iter().flat_map(|s| s.labels.iter().copied()).collect();
    let subclass: Vec<usize> = dataset.samples.iter().flat_map(|s| s.subclass.iter().copied()).collect();
    let per_class_nmi = subclass_nmi_per_class(&all, &subclass, &labels, k);
    let scored: Vec<f64> = per_class_nmi.iter().flatten().copied().collect();
    let subclass_nmi = if scored.is_empty() {
        0.0
    } else {
        scored.iter().sum::<f64>() / scored.len() as f64
    };
    EvalReport {
        miou_samp: mi.miou_samp,
        miou_cat: mi.miou_cat,
        per_class_iou: mi.per_class_iou,
        active_prototypes: active_from_counts(&activation_counts(&all, m), config.thresholds),
        subclass_nmi,
        per_class_nmi,
        prototype_assignment_table: assignment_table(&all, &subclass, &labels, k, m),
    }
}

pub fn evaluate(model: &Model, dataset: &Dataset, config: &TrainConfig) -> Result<EvalReport> {
    let graphs = build_graphs(dataset, config)?;
    let records = predict_dataset(model, dataset, &graphs, config)?;
    Ok(report_from_records(dataset, &records, config))
}

/// Evaluation columns of one metrics row.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalColumns {
    pub miou_samp: f64,
    pub miou_cat: f64,
    pub active_protos_mean: f64,
}

/// One row of `metrics.csv`: batch-mean loss components of an epoch and,
/// when the epoch was evaluated, the evaluation columns.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochMetrics {
    /// 1-based.
    pub epoch: usize,
    pub ce: f64,
    pub avg: f64,
    pub pd: f64,
    pub bds: f64,
    pub total: f64,
    pub eval: Option<EvalColumns>,
}

impl EpochMetrics {
    pub fn to_csv_row(&self) -> String {
        let mut s = format!(
            "{},{},{},{},{},{}",
            self.epoch, self.ce, self.avg, self.pd, self.bds, self.total
        );
        match self.eval {
            Some(e) => {
                let _ = write!(s, ",{},{},{}", e.miou_samp, e.miou_cat, e.active_protos_mean);
            }
            None => s.push_str(",,,"),
        }
        s
    }

    pub fn parse_csv_row(line: &str) -> Result<Self> {
        let f: Vec<&str> = line.trim_end().split(',').collect();
        if f.len() != 9 {
            return Err(Error::Input(format!("metrics row has {} fields: {line:?}", f.len())));
        }
        let num = |s: &str| -> Result<f64> {
            s.parse()
                .map_err(|_| Error::Input(format!("bad number {s:?} in metrics row")))
        };
        let eval = if f[6].is_empty() {
            None
        } else {
            Some(EvalColumns {
                miou_samp: num(f[6])?,
                miou_cat: num(f[7])?,
                active_protos_mean: num(f[8])?,
            })
        };
        Ok(Self {
            epoch: f[0]
                .parse()
                .map_err(|_| Error::Input(format!("bad epoch {:?}", f[0])))?,
            ce: num(f[1])?,
            avg: num(f[2])?,
            pd: num(f[3])?,
            bds: num(f[4])?,
            total: num(f[5])?,
            eval,
        })
    }
}

pub fn metrics_csv(rows: &[EpochMetrics]) -> String {
    let mut s = String::from(METRICS_HEADER);
    s.push('\n');
    for r in rows {
        s.push_str(&r.to_csv_row());
        s.push('\n');
    }
    s
}

pub fn parse_metrics_csv(text: &str) -> Result<Vec<EpochMetrics>> {
    let mut lines = text.lines();
    if lines.next() != Some(METRICS_HEADER) {
        return Err(Error::Input("metrics file lacks the expected header".into()));
    }
    lines
        .filter(|l| !l.trim().is_empty())
        .map(EpochMetrics::parse_csv_row)
        .collect()
}

/// Sample order of epoch `epoch` (0-based).
pub fn epoch_order(seed: u64, epoch: usize, num_samples: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..num_samples).collect();
    SeededRng::new(derive_seed(seed, EPOCH_STREAM + epoch as u64)).shuffle(&mut idx);
    idx
}

pub const ENCODER_FILE: &str = "encoder.mpenc";
pub const BANK_FILE: &str = "bank.mpbank";
pub const OPTIMIZER_FILE: &str = "optimizer.mpopt";
pub const METRICS_FILE: &str = "metrics.csv";
pub const REPORT_FILE: &str = "eval.json";

/// Training loop state over a fixed training set and evaluation set.
pub struct Trainer<'a> {
    config: TrainConfig,
    train: &'a Dataset,
    eval: &'a Dataset,
    train_graphs: Vec<KnnGraph>,
    eval_graphs: Vec<KnnGraph>,
    pub model: Model,
    pub opt: OptimizerState,
    pub epochs_done: usize,
    pub metrics: Vec<EpochMetrics>,
}

impl<'a> Trainer<'a> {
    /// `eval` defaults to the training samples scored against all their
    /// labels. `config.encoder.in_dim` is taken from the training set.
    pub fn new(config: &TrainConfig, train: &'a Dataset, eval: Option<&'a Dataset>) -> Result<Self> {
        let mut config = config.clone();
        config.encoder.in_dim = train.in_dim;
        config.validate()?;
        let eval = eval.unwrap_or(train);
        if train.is_empty() {
            return Err(Error::Input("training set is empty".into()));
        }
        if config.loss.lambdas.ce > 0.0 && train.total_labeled() == 0 {
            return Err(Error::Input("training set has no labeled points".into()));
        }
        if eval.num_classes != train.num_classes || eval.in_dim != train.in_dim {
            return Err(Error::Input(format!(
                "evaluation set has K={}, D_i={} but training set has K={}, D_i={}",
                eval.num_classes, eval.in_dim, train.num_classes, train.in_dim
            )));
        }
        if config.loss.lambdas.bds > 0.0 && train.num_classes < 2 {
            return Err(Error::Config("the balance term needs K >= 2".into()));
        }
        let model = Model::init(&config, train.num_classes)?;
        let opt = model.new_optimizer();
        let train_graphs = build_graphs(train, &config)?;
        let eval_graphs = if std::ptr::eq(train, eval) {
            train_graphs.clone()
        } else {
            build_graphs(eval, &config)?
        };
        Ok(Self {
            config,
            train,
            eval,
            train_graphs,
            eval_graphs,
            model,
            opt,
            epochs_done: 0,
            metrics: Vec::new(),
        })
    }

    /// Continues from a checkpoint directory written by [`Trainer::run`].
    pub fn resume(
        config: &TrainConfig,
        train: &'a Dataset,
        eval: Option<&'a Dataset>,
        dir: impl AsRef<Path>,
    ) -> Result<Self> {
        let dir = dir.as_ref();
        let mut t = Self::new(config, train, eval)?;
        let (enc_cfg, encoder) = checkpoint::load_encoder(dir.join(ENCODER_FILE))?;
        if enc_cfg != t.config.encoder {
            return Err(Error::Version("encoder checkpoint does not match the config".into()));
        }
        let bank = checkpoint::load_bank(dir.join(BANK_FILE))?;
        if bank.num_classes() != train.num_classes
            || bank.num_prototypes() != t.config.num_prototypes
            || bank.dim() != t.config.encoder.out_dim
        {
            return Err(Error::Version(format!(
                "bank checkpoint has K={}, M={}, D_o={}; config needs K={}, M={}, D_o={}",
                bank.num_classes(),
                bank.num_prototypes(),
                bank.dim(),
                train.num_classes,
                t.config.num_prototypes,
                t.config.encoder.out_dim
            )));
        }
        let (opt, epochs_done) = checkpoint::load_optimizer(dir.join(OPTIMIZER_FILE))?;
        t.model = Model { encoder, bank };
        if opt.lengths() != t.model.tensor_lengths() {
            return Err(Error::Version("optimizer checkpoint does not match the model".into()));
        }
        let metrics_path = dir.join(METRICS_FILE);
        let text = std::fs::read_to_string(&metrics_path).map_err(|e| Error::io(&metrics_path, e))?;
        let metrics = parse_metrics_csv(&text)?;
        if metrics.len() != epochs_done {
            return Err(Error::Input(format!(
                "checkpoint records {epochs_done} epochs but its metrics log has {} rows",
                metrics.len()
            )));
        }
        t.opt = opt;
        t.epochs_done = epochs_done;
        t.metrics = metrics;
        Ok(t)
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn is_finished(&self) -> bool {
        self.epochs_done >= self.config.epochs
    }

    /// Runs one epoch and appends its metrics row.
    pub fn run_epoch(&mut self) -> Result<EpochMetrics> {
        let epoch = self.epochs_done;
        let order = epoch_order(self.config.seed, epoch, self.train.len());
        let mut sums = [0.0; 5];
        let mut batches = 0usize;
        for chunk in order.chunks(self.config.batch_size) {
            let batch: Vec<BatchItem> = chunk
                .iter()
                .map(|&i| BatchItem {
                    sample: &self.train.samples[i],
                    graph: &self.train_graphs[i],
                })
                .collect();
            let b = train_step(&batch, &mut self.model, &mut self.opt, &self.config)?;
            for (s, v) in sums.iter_mut().zip([b.ce, b.avg, b.pd, b.bds, b.total]) {
                *s += v;
            }
            batches += 1;
        }
        let nb = batches as f64;
        self.epochs_done += 1;
        let evaluate_now =
            self.epochs_done % self.config.eval_every == 0 || self.epochs_done == self.config.epochs;
        let eval = if evaluate_now {
            let r = self.evaluate()?;
            Some(EvalColumns {
                miou_samp: r.miou_samp,
                miou_cat: r.miou_cat,
                active_protos_mean: r.active_prototypes_mean(),
            })
        } else {
            None
        };
        let row = EpochMetrics {
            epoch: self.epochs_done,
            ce: sums[0] / nb,
            avg: sums[1] / nb,
            pd: sums[2] / nb,
            bds: sums[3] / nb,
            total: sums[4] / nb,
            eval,
        };
        self.metrics.push(row);
        Ok(row)
    }

    pub fn records(&self) -> Result<Vec<ActivationRecord>> {
        predict_dataset(&self.model, self.eval, &self.eval_graphs, &self.config)
    }

    pub fn evaluate(&self) -> Result<EvalReport> {
        Ok(report_from_records(self.eval, &self.records()?, &self.config))
    }

    /// Writes encoder, bank, optimizer and the metrics so far into `dir`.
    pub fn save_checkpoint(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        checkpoint::save_encoder(dir.join(ENCODER_FILE), &self.config.encoder, &self.model.encoder)?;
        checkpoint::save_bank(dir.join(BANK_FILE), &self.model.bank)?;
        checkpoint::save_optimizer(dir.join(OPTIMIZER_FILE), &self.opt, self.epochs_done)?;
        write_text(&dir.join(METRICS_FILE), &metrics_csv(&self.metrics))
    }

    /// Runs the remaining epochs. With `out_dir`, rewrites `metrics.csv`
    /// after every epoch, writes periodic checkpoints under
    /// `checkpoints/epoch_NNNN/`, the final checkpoint in `out_dir` itself
    /// and the final report as `eval.json`.
    pub fn run(&mut self, out_dir: Option<&Path>) -> Result<EvalReport> {
        if let Some(dir) = out_dir {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        while !self.is_finished() {
            self.run_epoch()?;
            if let Some(dir) = out_dir {
                write_text(&dir.join(METRICS_FILE), &metrics_csv(&self.metrics))?;
                let every = self.config.checkpoint_every;
                if every > 0 && self.epochs_done % every == 0 && !self.is_finished() {
                    self.save_checkpoint(checkpoint_dir(dir, self.epochs_done))?;
                }
            }
        }
        let report = self.evaluate()?;
        if let Some(dir) = out_dir {
            self.save_checkpoint(dir)?;
            write_text(&dir.join(REPORT_FILE), &report.to_json())?;
        }
        Ok(report)
    }
}

pub fn checkpoint_dir(out_dir: &Path, epoch: usize) -> PathBuf {
    out_dir.join("checkpoints").join(format!("epoch_{epoch:04}"))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Result of [`train`].
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: Model,
    pub metrics: Vec<EpochMetrics>,
    pub report: EvalReport,
}

/// Trains from scratch without touching the file system.
pub fn train(dataset: &Dataset, eval: Option<&Dataset>, config: &TrainConfig) -> Result<TrainOutcome> {
    let mut t = Trainer::new(config, dataset, eval)?;
    let report = t.run(None)?;
    Ok(TrainOutcome {
        model: t.model,
        metrics: t.metrics,
        report,
    })
}

/// Caps the rayon pool at `MULPRO_THREADS` workers (0 or unset = one per
/// core). Only the first call in a process has an effect.
pub fn init_thread_pool() -> Result<()> {
    let n = match std::env::var("MULPRO_THREADS") {
        Ok(v) => v
            .trim()
            .parse::<usize>()
            .map_err(|_| Error::Config(format!("MULPRO_THREADS must be a non-negative integer, got {v:?}")))?,
        Err(_) => 0,
    };
    let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    Ok(())
}

/// Workers in the rayon pool in use.
pub fn current_num_threads() -> usize {
    rayon::current_num_threads()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_synthetic, LabelScheme, SyntheticSpec};

    fn tiny_setup() -> (TrainConfig, Dataset) {
        let mut spec = SyntheticSpec::table_world();
        spec.num_samples = 4;
        spec.points_per_sample = 48;
        let mut ds = generate_synthetic(&spec, 5).unwrap();
        ds.sparsify(LabelScheme::OnePerPart, 6).unwrap();
        let mut cfg = TrainConfig::default();
        cfg.epochs = 2;
        cfg.batch_size = 2;
        cfg.num_prototypes = 2;
        cfg.encoder.layer_widths = vec![8];
        cfg.encoder.out_dim = 6;
        cfg.encoder.k_neighbors = 4;
        (cfg, ds)
    }

    #[test]
    fn zero_lambdas_leave_parameters_unchanged() {
        let (mut cfg, ds) = tiny_setup();
        cfg.loss.lambdas = crate::losses::Lambdas::ZERO;
        let mut t = Trainer::new(&cfg, &ds, None).unwrap();
        let before = t.model.clone();
        t.run_epoch().unwrap();
        assert_eq!(t.model, before);
        assert_eq!(t.opt.step, 2);
    }

    #[test]
    fn metrics_rows_round_trip() {
        let row = EpochMetrics {
            epoch: 3,
            ce: 0.1 + 0.2,
            avg: -12.5,
            pd: 0.0,
            bds: 1e-300,
            total: f64::MIN_POSITIVE,
            eval: Some(EvalColumns {
                miou_samp: 0.7,
                miou_cat: 0.6,
                active_protos_mean: 2.25,
            }),
        };
        let blank = EpochMetrics { eval: None, ..row };
        let text = metrics_csv(&[row, blank]);
        assert_eq!(parse_metrics_csv(&text).unwrap(), vec![row, blank]);
        assert!(text.lines().nth(2).unwrap().ends_with(",,,"));
    }

    #[test]
    fn epoch_orders_are_permutations_and_vary() {
        let a = epoch_order(1, 0, 20);
        let b = epoch_order(1, 1, 20);
        let mut s = a.clone();
        s.sort_unstable();
        assert_eq!(s, (0..20).collect::<Vec<_>>());
        assert_ne!(a, b);
        assert_eq!(a, epoch_order(1, 0, 20));
    }

    #[test]
    fn short_run_is_deterministic() {
        let (cfg, ds) = tiny_setup();
        let a = train(&ds, None, &cfg).unwrap();
        let b = train(&ds, None, &cfg).unwrap();
        assert_eq!(a.model, b.model);
        assert_eq!(metrics_csv(&a.metrics), metrics_csv(&b.metrics));
        assert_eq!(a.metrics.len(), cfg.epochs);
        assert!(a.model.is_finite());
    }

    #[test]
    fn no_labels_is_an_input_error() {
        let (cfg, mut ds) = tiny_setup();
        for s in &mut ds.samples {
            s.mask.iter_mut().for_each(|m| *m = false);
        }
        assert!(matches!(Trainer::new(&cfg, &ds, None), Err(Error::Input(_))));
    }
}
