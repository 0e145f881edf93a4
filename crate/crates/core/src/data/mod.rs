//! Point cloud samples, weak-label masks and the dataset file format.

mod format;
pub mod synthetic;

pub use format::{decode_dataset, encode_dataset, load_dataset, save_dataset, DATASET_MAGIC};
pub use synthetic::{generate_synthetic, ClassSpec, FamilySpec, SyntheticSpec, VariantKind};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numeric::{DenseArray, SeededRng};

/// One labeled point cloud.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PointCloudSample {
    /// Coordinates, `D_i x N`.
    pub points: DenseArray,
    /// Class of every point.
    pub labels: Vec<usize>,
    /// Whether each point's label may be used for training.
    pub mask: Vec<bool>,
    /// Hidden subclass of every point, for evaluation only.
    pub subclass: Vec<usize>,
    pub family: usize,
}

impl PointCloudSample {
    pub fn num_points(&self) -> usize {
        self.labels.len()
    }

    pub fn num_labeled(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }

    /// Classes that occur in the sample, ascending.
    pub fn classes_present(&self) -> Vec<usize> {
        let mut c = self.labels.clone();
        c.sort_unstable();
        c.dedup();
        c
    }

    /// `K x N` one-hot labels.
    pub fn one_hot(&self, num_classes: usize) -> Result<DenseArray> {
        crate::losses::one_hot(&self.labels, num_classes)
    }

    pub(crate) fn validate(&self, num_classes: usize, in_dim: usize) -> Result<()> {
        let n = self.labels.len();
        if n == 0 {
            return Err(Error::Input("sample has no points".into()));
        }
        if self.points.shape() != [in_dim, n] {
            return Err(Error::Dimension(format!(
                "points {:?} do not match {n} labels with D_i={in_dim}",
                self.points.shape()
            )));
        }
        if self.mask.len() != n || self.subclass.len() != n {
            return Err(Error::Dimension("mask/subclass length differs from labels".into()));
        }
        if let Some(&c) = self.labels.iter().find(|&&c| c >= num_classes) {
            return Err(Error::Input(format!("label {c} out of range for K={num_classes}")));
        }
        Ok(())
    }
}

/// Collection of samples sharing `K` and `D_i`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub num_classes: usize,
    pub in_dim: usize,
    pub samples: Vec<PointCloudSample>,
}

impl Dataset {
    pub fn new(num_classes: usize, in_dim: usize, samples: Vec<PointCloudSample>) -> Result<Self> {
        if num_classes == 0 || in_dim == 0 {
            return Err(Error::Config("dataset needs K >= 1 and D_i >= 1".into()));
        }
        for s in &samples {
            s.validate(num_classes, in_dim)?;
        }
        Ok(Self {
            num_classes,
            in_dim,
            samples,
        })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn total_points(&self) -> usize {
        self.samples.iter().map(|s| s.num_points()).sum()
    }

    pub fn total_labeled(&self) -> usize {
        self.samples.iter().map(|s| s.num_labeled()).sum()
    }

    /// Replaces every mask using `scheme`; sample `i` draws from sub-stream
    /// `i` of `seed`.
    pub fn sparsify(&mut self, scheme: LabelScheme, seed: u64) -> Result<()> {
        let base = SeededRng::new(seed);
        for (i, s) in self.samples.iter_mut().enumerate() {
            let mut rng = base.derive(i as u64);
            s.mask = sparsify_labels(s, scheme, &mut rng)?;
        }
        Ok(())
    }

    /// Copy with every point labeled.
    pub fn fully_labeled(&self) -> Dataset {
        let mut d = self.clone();
        for s in &mut d.samples {
            s.mask = vec![true; s.num_points()];
        }
        d
    }
}

/// How training labels are thinned out.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum LabelScheme {
    /// One labeled point per class present in the sample.
    OnePerPart,
    /// `ceil(p * N)` points chosen uniformly without replacement.
    Fraction(f64),
}

impl std::str::FromStr for LabelScheme {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        if s == "one-per-part" || s == "1pt" {
            return Ok(LabelScheme::OnePerPart);
        }
        if s == "full" {
            return Ok(LabelScheme::Fraction(1.0));
        }
        let frac = s.strip_prefix("fraction:").unwrap_or(s);
        let p: f64 = frac
            .parse()
            .map_err(|_| Error::Config(format!("unknown label scheme {s:?}")))?;
        let scheme = LabelScheme::Fraction(p);
        scheme.validate()?;
        Ok(scheme)
    }
}

impl std::fmt::Display for LabelScheme {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            LabelScheme::OnePerPart => write!(f, "one-per-part"),
            LabelScheme::Fraction(p) => write!(f, "fraction:{p}"),
        }
    }
}

impl LabelScheme {
    pub fn validate(&self) -> Result<()> {
        if let LabelScheme::Fraction(p) = *self {
            if !(p > 0.0 && p <= 1.0) {
                return Err(Error::Config(format!("label fraction must lie in (0, 1], got {p}")));
            }
        }
        Ok(())
    }
}

/// Draws a training mask for `sample`.
pub fn sparsify_labels(
    sample: &PointCloudSample,
    scheme: LabelScheme,
    rng: &mut SeededRng,
) -> Result<Vec<bool>> {
    scheme.validate()?;
    let n = sample.num_points();
    let mut mask = vec![false; n];
    match scheme {
        LabelScheme::OnePerPart => {
            for c in sample.classes_present() {
                let members: Vec<usize> = (0..n).filter(|&i| sample.labels[i] == c).collect();
                mask[members[rng.below(members.len())]] = true;
            }
        }
        LabelScheme::Fraction(p) => {
            let count = ((p * n as f64).ceil() as usize).min(n);
            for i in rng.choose_distinct(n, count) {
                mask[i] = true;
            }
        }
    }
    Ok(mask)
}
