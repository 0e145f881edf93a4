use std::fmt::Write as _;
use std::path::Path;

use mulpro_core::data::{generate_synthetic, load_dataset, save_dataset, Dataset, LabelScheme, SyntheticSpec};
use mulpro_core::experiment::{grid, run_cell, CSV_HEADER};
use mulpro_core::gradcheck::{run_gradcheck, GradcheckConfig};
use mulpro_core::trainer::checkpoint::{load_bank, load_encoder};
use mulpro_core::trainer::{
    build_graphs, predict_dataset, report_from_records, Model, TrainConfig, Trainer, BANK_FILE, ENCODER_FILE,
    REPORT_FILE,
};
use mulpro_core::{Error, Result};
use serde_json::json;

use crate::manifest::{read_text, sidecar, write_file, Manifest};
use crate::{AblateArgs, ConfigArgs, EvalArgs, GenDataArgs, GradcheckArgs, InspectArgs, Status, TrainArgs};

const MANIFEST_FILE: &str = "manifest.json";

pub fn gen_data(a: GenDataArgs) -> Result<Status> {
    let mut spec = match &a.source.spec {
        Some(path) => SyntheticSpec::parse(&read_text(path)?).map_err(|e| prefix_path(path, e))?,
        None => SyntheticSpec::table_world(),
    };
    if let Some(n) = a.num_samples {
        spec.num_samples = n;
    }
    if let Some(n) = a.points_per_sample {
        spec.points_per_sample = n;
    }
    spec.validate()?;
    let scheme: LabelScheme = a.labels.parse()?;
    let label_seed = a.label_seed.unwrap_or(a.seed);
    let mut ds = generate_synthetic(&spec, a.seed)?;
    ds.sparsify(scheme, label_seed)?;
    save_dataset(&ds, &a.out)?;
    write_file(&sidecar(&a.out, "summary.txt"), summary(&spec, &ds).as_bytes())?;

    let mut m = Manifest::new("gen-data", a.seed);
    m.set("spec", json!(spec.to_text()))
        .set("labels", json!(scheme.to_string()))
        .set("label_seed", json!(label_seed))
        .set("output", json!(a.out.display().to_string()));
    if let Some(path) = &a.source.spec {
        m.input("spec", path)?;
    }
    m.write(&sidecar(&a.out, "manifest.json"))?;
    println!(
        "wrote {} samples, {} points ({} labeled) to {}",
        ds.len(),
        ds.total_points(),
        ds.total_labeled(),
        a.out.display()
    );
    Ok(Status::Ok)
}

/// Plain-text counts of a generated dataset.
pub fn summary(spec: &SyntheticSpec, ds: &Dataset) -> String {
    let mut class_points = vec![0usize; ds.num_classes];
    let mut sub_points = vec![0usize; spec.num_subclasses()];
    let mut family_samples = vec![0usize; spec.families.len()];
    for s in &ds.samples {
        for (&c, &sub) in s.labels.iter().zip(&s.subclass) {
            class_points[c] += 1;
            sub_points[sub] += 1;
        }
        family_samples[s.family] += 1;
    }
    let mut out = String::new();
    let _ = writeln!(out, "samples {}", ds.len());
    let _ = writeln!(out, "classes {}", ds.num_classes);
    let _ = writeln!(out, "subclasses {}", spec.num_subclasses());
    let _ = writeln!(out, "points {}", ds.total_points());
    let _ = writeln!(out, "labeled {}", ds.total_labeled());
    for (k, class) in spec.classes.iter().enumerate() {
        let _ = writeln!(out, "class {k} {} points {}", class.name, class_points[k]);
    }
    for (k, class) in spec.classes.iter().enumerate() {
        for (v, variant) in class.variants.iter().enumerate() {
            let id = spec.subclass_id(k, v);
            let _ = writeln!(
                out,
                "subclass {id} {}/{} points {}",
                class.name,
                variant.name(),
                sub_points[id]
            );
        }
    }
    for (f, family) in spec.families.iter().enumerate() {
        let _ = writeln!(out, "family {f} {} samples {}", family.name, family_samples[f]);
    }
    out
}

fn prefix_path(path: &Path, e: Error) -> Error {
    match e {
        Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
        Error::Input(msg) => Error::Input(format!("{}: {msg}", path.display())),
        other => other,
    }
}

impl ConfigArgs {
    fn overrides(&self) -> Result<Vec<(String, String)>> {
        let named = [
            ("epochs", &self.epochs),
            ("batch_size", &self.batch_size),
            ("learning_rate", &self.lr),
            ("seed", &self.seed),
            ("num_prototypes", &self.m),
            ("lambda_ce", &self.lambda_ce),
            ("lambda_avg", &self.lambda_avg),
            ("lambda_pd", &self.lambda_pd),
            ("lambda_bds", &self.lambda_bds),
            ("sigma", &self.sigma),
            ("gamma", &self.gamma),
            ("tau", &self.tau),
            ("avg_variant", &self.avg_variant),
        ];
        let mut out: Vec<(String, String)> = named
            .into_iter()
            .filter_map(|(k, v)| v.as_ref().map(|v| (k.to_string(), v.clone())))
            .collect();
        for entry in &self.set {
            let (k, v) = entry
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("--set expects KEY=VALUE, got {entry:?}")))?;
            out.push((k.trim().to_string(), v.trim().to_string()));
        }
        Ok(out)
    }

    fn is_explicit(&self) -> bool {
        self.config.is_some() || self.overrides().map(|o| !o.is_empty()).unwrap_or(true)
    }

    /// Defaults, then the config file, then the overrides.
    pub fn resolve(&self) -> Result<TrainConfig> {
        let mut c = TrainConfig::default();
        if let Some(path) = &self.config {
            c.apply_text(&read_text(path)?).map_err(|e| prefix_path(path, e))?;
        }
        for (k, v) in self.overrides()? {
            c.set(&k, &v)?;
        }
        c.validate()?;
        Ok(c)
    }

    fn record(&self, m: &mut Manifest) -> Result<()> {
        if let Some(path) = &self.config {
            m.input("config", path)?;
        }
        let overrides: Vec<String> = self.overrides()?.iter().map(|(k, v)| format!("{k}={v}")).collect();
        m.set("overrides", json!(overrides));
        Ok(())
    }
}

fn load(role: &str, path: &Path, m: &mut Manifest) -> Result<Dataset> {
    let ds = load_dataset(path)?;
    m.input(role, path)?;
    Ok(ds)
}

pub fn train(a: TrainArgs) -> Result<Status> {
    let mut config = a.cfg.resolve()?;
    let mut m = Manifest::new("train", config.seed);
    let train_set = load("data", &a.data, &mut m)?;
    let eval_set = match &a.eval_data {
        Some(p) => Some(load("eval_data", p, &mut m)?),
        None => None,
    };
    config.encoder.in_dim = train_set.in_dim;
    let mut trainer = match &a.resume {
        Some(dir) => {
            m.input("resume_encoder", &dir.join(ENCODER_FILE))?;
            m.input("resume_bank", &dir.join(BANK_FILE))?;
            Trainer::resume(&config, &train_set, eval_set.as_ref(), dir)?
        }
        None => Trainer::new(&config, &train_set, eval_set.as_ref())?,
    };
    a.cfg.record(&mut m)?;
    m.set("config", json!(trainer.config().to_text()));
    if let Some(dir) = &a.resume {
        m.set("resumed_from", json!(dir.display().to_string()));
    }
    std::fs::create_dir_all(&a.out).map_err(|source| Error::Io {
        path: a.out.clone(),
        source,
    })?;
    m.write(&a.out.join(MANIFEST_FILE))?;
    let report = trainer.run(Some(&a.out))?;
    println!(
        "miou_samp {} miou_cat {} active_protos_mean {} subclass_nmi {}",
        report.miou_samp,
        report.miou_cat,
        report.active_prototypes_mean(),
        report.subclass_nmi
    );
    Ok(Status::Ok)
}

/// Loads a checkpoint's model and the config to evaluate it with. Without
/// an explicit config the checkpoint's encoder shape and `M` are adopted;
/// with one, any disagreement is a version error.
fn load_checkpoint(dir: &Path, cfg: &ConfigArgs, data: &Dataset, m: &mut Manifest) -> Result<(Model, TrainConfig)> {
    let mut config = cfg.resolve()?;
    let enc_path = dir.join(ENCODER_FILE);
    let bank_path = dir.join(BANK_FILE);
    let (enc_cfg, encoder) = load_encoder(&enc_path)?;
    let bank = load_bank(&bank_path)?;
    m.input("encoder", &enc_path)?;
    m.input("bank", &bank_path)?;
    if cfg.is_explicit() {
        config.encoder.in_dim = enc_cfg.in_dim;
        if config.encoder != enc_cfg {
            return Err(Error::Version("encoder checkpoint does not match the config".into()));
        }
        if config.num_prototypes != bank.num_prototypes() {
            return Err(Error::Version(format!(
                "checkpoint has M={}, config has M={}",
                bank.num_prototypes(),
                config.num_prototypes
            )));
        }
    } else {
        config.encoder = enc_cfg;
        config.num_prototypes = bank.num_prototypes();
    }
    if bank.num_classes() != data.num_classes {
        return Err(Error::Version(format!(
            "checkpoint has K={}, dataset has K={}",
            bank.num_classes(),
            data.num_classes
        )));
    }
    if config.encoder.in_dim != data.in_dim {
        return Err(Error::Version(format!(
            "checkpoint expects D_i={}, dataset has D_i={}",
            config.encoder.in_dim, data.in_dim
        )));
    }
    if bank.dim() != config.encoder.out_dim {
        return Err(Error::Version("bank dimension differs from the encoder output".into()));
    }
    Ok((Model { encoder, bank }, config))
}

pub fn eval(a: EvalArgs) -> Result<Status> {
    let mut m = Manifest::new("eval", 0);
    let data = load("data", &a.data, &mut m)?;
    let (model, config) = load_checkpoint(&a.checkpoint, &a.cfg, &data, &mut m)?;
    a.cfg.record(&mut m)?;
    m.set("seed", json!(config.seed)).set("config", json!(config.to_text()));
    let report = mulpro_core::trainer::evaluate(&model, &data, &config)?;
    write_file(&a.out.join(REPORT_FILE), report.to_json().as_bytes())?;
    m.write(&a.out.join(MANIFEST_FILE))?;
    println!(
        "miou_samp {} miou_cat {} active_protos_mean {} subclass_nmi {}",
        report.miou_samp,
        report.miou_cat,
        report.active_prototypes_mean(),
        report.subclass_nmi
    );
    Ok(Status::Ok)
}

pub fn gradcheck(a: GradcheckArgs) -> Result<Status> {
    let cfg = GradcheckConfig {
        seed: a.seed,
        sizes: a.sizes.parse()?,
        corrupt: a.corrupt.clone(),
        ..GradcheckConfig::default()
    };
    let report = run_gradcheck(&cfg)?;
    let text = report.to_string();
    print!("{text}");
    if !text.ends_with('\n') {
        println!();
    }
    if let Some(dir) = &a.out {
        write_file(&dir.join("gradcheck.txt"), text.as_bytes())?;
        let mut m = Manifest::new("gradcheck", a.seed);
        m.set("sizes", json!(a.sizes))
            .set("h", json!(cfg.h))
            .set("tolerance", json!(cfg.tolerance))
            .set("floor", json!(cfg.floor))
            .set("tie_margin", json!(cfg.tie_margin))
            .set("max_retries", json!(cfg.max_retries))
            .set("passed", json!(report.passed()));
        m.write(&dir.join(MANIFEST_FILE))?;
    }
    Ok(if report.passed() { Status::Ok } else { Status::CheckFailed })
}

pub fn ablate(a: AblateArgs) -> Result<Status> {
    let base = a.cfg.resolve()?;
    if a.seeds == 0 {
        return Err(Error::Config("--seeds must be >= 1".into()));
    }
    let mut m = Manifest::new("ablate", base.seed);
    let train_set = load("data", &a.data, &mut m)?;
    let eval_set = match &a.eval_data {
        Some(p) => Some(load("eval_data", p, &mut m)?),
        None => None,
    };
    let cells = grid(&a.grid, base.num_prototypes)?;
    let seeds: Vec<u64> = (0..a.seeds).map(|i| base.seed + i).collect();
    a.cfg.record(&mut m)?;
    let cell_configs: Vec<serde_json::Value> = cells
        .iter()
        .map(|c| json!({ "name": c.name, "config": c.apply(&base).to_text() }))
        .collect();
    m.set("grid", json!(a.grid))
        .set("seeds", json!(seeds))
        .set("base_config", json!(base.to_text()))
        .set("cells", json!(cell_configs));
    m.write(&a.out.join(MANIFEST_FILE))?;

    let csv_path = a.out.join("ablation.csv");
    let mut csv = format!("{CSV_HEADER}\n");
    for cell in &cells {
        for &seed in &seeds {
            let r = run_cell(cell, &base, seed, &train_set, eval_set.as_ref())?;
            eprintln!(
                "{} seed {}: miou_samp {:.4} active_protos_mean {:.2}",
                cell.name,
                seed,
                r.report.miou_samp,
                r.report.active_prototypes_mean()
            );
            csv.push_str(&r.csv_row(cell));
            csv.push('\n');
            write_file(&csv_path, csv.as_bytes())?;
        }
    }
    println!("wrote {} rows to {}", cells.len() * seeds.len(), csv_path.display());
    Ok(Status::Ok)
}

pub fn inspect(a: InspectArgs) -> Result<Status> {
    let mut m = Manifest::new("inspect", 0);
    let data = load("data", &a.data, &mut m)?;
    let (model, config) = load_checkpoint(&a.checkpoint, &a.cfg, &data, &mut m)?;
    a.cfg.record(&mut m)?;
    m.set("seed", json!(config.seed)).set("config", json!(config.to_text()));
    let graphs = build_graphs(&data, &config)?;
    let records = predict_dataset(&model, &data, &graphs, &config)?;

    let mut csv = String::from("sample_id,point_idx,x,y,z,true_class,pred_class,activated_prototype,subclass_id\n");
    for (i, (s, r)) in data.samples.iter().zip(&records).enumerate() {
        for n in 0..s.num_points() {
            let coord = |d: usize| {
                if d < data.in_dim {
                    s.points.get(&[d, n]).to_string()
                } else {
                    String::new()
                }
            };
            let _ = writeln!(
                csv,
                "{i},{n},{},{},{},{},{},{},{}",
                coord(0),
                coord(1),
                coord(2),
                s.labels[n],
                r.k_hat[n],
                r.m_hat[n],
                s.subclass[n]
            );
        }
    }
    write_file(&a.out.join("points.csv"), csv.as_bytes())?;

    let bank = &model.bank;
    let classes: Vec<serde_json::Value> = (0..bank.num_classes())
        .map(|k| {
            let protos: Vec<Vec<f64>> = (0..bank.num_prototypes()).map(|mm| bank.prototype(mm, k)).collect();
            let norms: Vec<f64> = protos.iter().map(|p| p.iter().map(|v| v * v).sum::<f64>().sqrt()).collect();
            let units: Vec<Vec<f64>> = protos
                .iter()
                .zip(&norms)
                .map(|(p, &n)| p.iter().map(|v| if n > 0.0 { v / n } else { 0.0 }).collect())
                .collect();
            json!({ "class": k, "norms": norms, "unit_vectors": units, "cosine": bank.class_cosines(k) })
        })
        .collect();
    let protos = json!({
        "num_classes": bank.num_classes(),
        "num_prototypes": bank.num_prototypes(),
        "dim": bank.dim(),
        "classes": classes,
    });
    let text = serde_json::to_string_pretty(&protos).expect("prototypes serialize");
    write_file(&a.out.join("prototypes.json"), format!("{text}\n").as_bytes())?;

    let report = report_from_records(&data, &records, &config);
    write_file(&a.out.join(REPORT_FILE), report.to_json().as_bytes())?;
    m.write(&a.out.join(MANIFEST_FILE))?;
    println!("wrote {} point rows to {}", data.total_points(), a.out.display());
    Ok(Status::Ok)
}
