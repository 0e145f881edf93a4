//! Synthetic tables with planted subclasses.
//!
//! Every class (tabletop surface, support, rim, clutter) comes in a few
//! geometric variants; a family picks one variant per class, e.g. a round
//! disc on a single pole is a pedestal table. The variant is recorded as the
//! hidden subclass of every point. Points are drawn uniformly over the
//! union of part surfaces, rotated about the vertical axis, scaled, and
//! jittered with Gaussian noise.
//!
//! Variant geometry in the canonical frame (table height `H`):
//!
//! | variant        | geometry                                                  |
//! |----------------|-----------------------------------------------------------|
//! | `square_plate` | square top, half side 0.8, at `H = 0.75`                  |
//! | `round_disc`   | disc top, radius 0.9, at `H = 1.0`                        |
//! | `center_pole`  | cylinder r 0.08 from floor to `H`, foot disc r 0.3        |
//! | `corner_legs`  | four cylinders r 0.05 under the top's corners             |
//! | `thin_band`    | 0.06 tall band along the top's outline                    |
//! | `thick_band`   | 0.28 tall apron inset to half the top's extent            |
//! | `sphere_blob`  | sphere r 0.18 resting on the top                          |
//! | `box_blob`     | cube side 0.3 on the floor beside the table               |
//!
//! Sample `i` is generated from sub-stream `i` of the seed and uses family
//! `i mod F`.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use super::{Dataset, PointCloudSample};
use crate::error::{Error, Result};
use crate::numeric::{DenseArray, SeededRng};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VariantKind {
    SquarePlate,
    RoundDisc,
    CenterPole,
    CornerLegs,
    ThinBand,
    ThickBand,
    SphereBlob,
    BoxBlob,
}

impl VariantKind {
    pub const ALL: [VariantKind; 8] = [
        VariantKind::SquarePlate,
        VariantKind::RoundDisc,
        VariantKind::CenterPole,
        VariantKind::CornerLegs,
        VariantKind::ThinBand,
        VariantKind::ThickBand,
        VariantKind::SphereBlob,
        VariantKind::BoxBlob,
    ];

    pub fn name(self) -> &'static str {
        match self {
            VariantKind::SquarePlate => "square_plate",
            VariantKind::RoundDisc => "round_disc",
            VariantKind::CenterPole => "center_pole",
            VariantKind::CornerLegs => "corner_legs",
            VariantKind::ThinBand => "thin_band",
            VariantKind::ThickBand => "thick_band",
            VariantKind::SphereBlob => "sphere_blob",
            VariantKind::BoxBlob => "box_blob",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|v| v.name() == name)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassSpec {
    pub name: String,
    pub variants: Vec<VariantKind>,
}

/// A shape template: for each class, the index of the variant it uses, or
/// `None` when the class is absent.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FamilySpec {
    pub name: String,
    pub variants: Vec<Option<usize>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub num_samples: usize,
    pub points_per_sample: usize,
    pub noise_std: f64,
    pub scale_range: (f64, f64),
    pub random_rotation: bool,
    pub classes: Vec<ClassSpec>,
    pub families: Vec<FamilySpec>,
}

impl SyntheticSpec {
    /// The four-class table benchmark.
    pub fn table_world() -> Self {
        use VariantKind::*;
        let class = |name: &str, v: [VariantKind; 2]| ClassSpec {
            name: name.into(),
            variants: v.to_vec(),
        };
        let family = |name: &str, v: [usize; 4]| FamilySpec {
            name: name.into(),
            variants: v.iter().map(|&i| Some(i)).collect(),
        };
        Self {
            num_samples: 64,
            points_per_sample: 512,
            noise_std: 0.02,
            scale_range: (0.8, 1.2),
            random_rotation: true,
            classes: vec![
                class("surface", [SquarePlate, RoundDisc]),
                class("support", [CenterPole, CornerLegs]),
                class("rim", [ThinBand, ThickBand]),
                class("clutter", [SphereBlob, BoxBlob]),
            ],
            families: vec![
                family("desk", [0, 1, 0, 1]),
                family("pedestal", [1, 0, 1, 1]),
                family("cafe", [1, 1, 1, 0]),
                family("bar", [0, 0, 0, 0]),
            ],
        }
    }

    pub fn num_classes(&self) -> usize {
        self.classes.len()
    }

    /// Global subclass id of variant `v` of class `c`.
    pub fn subclass_id(&self, class: usize, variant: usize) -> usize {
        self.classes[..class].iter().map(|c| c.variants.len()).sum::<usize>() + variant
    }

    pub fn num_subclasses(&self) -> usize {
        self.classes.iter().map(|c| c.variants.len()).sum()
    }

    pub fn validate(&self) -> Result<()> {
        if self.classes.is_empty() {
            return Err(Error::Config("spec needs at least one class".into()));
        }
        if self.families.is_empty() {
            return Err(Error::Config("spec needs at least one family".into()));
        }
        if self.points_per_sample < 2 {
            return Err(Error::Config("points_per_sample must be >= 2".into()));
        }
        if !(self.noise_std >= 0.0) || !self.noise_std.is_finite() {
            return Err(Error::Config(format!("noise_std must be >= 0, got {}", self.noise_std)));
        }
        let (lo, hi) = self.scale_range;
        if !(lo > 0.0 && lo <= hi && hi.is_finite()) {
            return Err(Error::Config(format!("invalid scale range ({lo}, {hi})")));
        }
        for c in &self.classes {
            if c.variants.is_empty() || c.variants.len() > 3 {
                return Err(Error::Config(format!(
                    "class {} must have 1 to 3 variants, has {}",
                    c.name,
                    c.variants.len()
                )));
            }
        }
        for f in &self.families {
            if f.variants.len() != self.classes.len() {
                return Err(Error::Config(format!(
                    "family {} lists {} classes, spec has {}",
                    f.name,
                    f.variants.len(),
                    self.classes.len()
                )));
            }
            if f.variants.iter().all(Option::is_none) {
                return Err(Error::Config(format!("family {} has no parts", f.name)));
            }
            for (c, v) in f.variants.iter().enumerate() {
                if let Some(v) = *v {
                    if v >= self.classes[c].variants.len() {
                        return Err(Error::Config(format!(
                            "family {} uses variant {v} of class {}",
                            f.name, self.classes[c].name
                        )));
                    }
                }
            }
        }
        Ok(())
    }

    /// Parses the line-based text form:
    ///
    /// ```text
    /// # comment
    /// num_samples = 64
    /// points_per_sample = 512
    /// noise_std = 0.02
    /// scale_min = 0.8
    /// scale_max = 1.2
    /// rotate = true
    /// class surface = square_plate, round_disc
    /// family desk = square_plate, corner_legs, thin_band, box_blob
    /// ```
    ///
    /// Family entries name variants; each must belong to exactly one class.
    /// Classes a family omits are absent from its samples.
    pub fn parse(text: &str) -> Result<Self> {
        let base = Self::table_world();
        let mut spec = SyntheticSpec {
            classes: Vec::new(),
            families: Vec::new(),
            ..base
        };
        let mut family_lines: Vec<(usize, String, Vec<String>)> = Vec::new();
        let err = |line: usize, msg: String| Error::Config(format!("line {line}: {msg}"));
        for (idx, raw) in text.lines().enumerate() {
            let line_no = idx + 1;
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| err(line_no, format!("expected `key = value`, got {line:?}")))?;
            let key = key.trim();
            let value = value.trim();
            let list = || -> Vec<String> {
                value
                    .split(',')
                    .map(|s| s.trim().to_string())
                    .filter(|s| !s.is_empty())
                    .collect()
            };
            if let Some(name) = key.strip_prefix("class ") {
                let mut variants = Vec::new();
                for v in list() {
                    variants.push(
                        VariantKind::from_name(&v)
                            .ok_or_else(|| err(line_no, format!("unknown variant {v:?}")))?,
                    );
                }
                spec.classes.push(ClassSpec {
                    name: name.trim().to_string(),
                    variants,
                });
                continue;
            }
            if let Some(name) = key.strip_prefix("family ") {
                family_lines.push((line_no, name.trim().to_string(), list()));
                continue;
            }
            let num = |v: &str| -> Result<f64> {
                v.parse::<f64>()
                    .map_err(|_| err(line_no, format!("{key} expects a number, got {v:?}")))
            };
            let int = |v: &str| -> Result<usize> {
                v.parse::<usize>()
                    .map_err(|_| err(line_no, format!("{key} expects an integer, got {v:?}")))
            };
            match key {
                "num_samples" => spec.num_samples = int(value)?,
                "points_per_sample" => spec.points_per_sample = int(value)?,
                "noise_std" => spec.noise_std = num(value)?,
                "scale_min" => spec.scale_range.0 = num(value)?,
                "scale_max" => spec.scale_range.1 = num(value)?,
                "rotate" => {
                    spec.random_rotation = value
                        .parse()
                        .map_err(|_| err(line_no, format!("rotate expects true/false, got {value:?}")))?
                }
                _ => return Err(err(line_no, format!("unknown key {key:?}"))),
            }
        }
        for (line_no, name, entries) in family_lines {
            let mut variants = vec![None; spec.classes.len()];
            for e in entries {
                let kind = VariantKind::from_name(&e)
                    .ok_or_else(|| err(line_no, format!("unknown variant {e:?}")))?;
                let owners: Vec<(usize, usize)> = spec
                    .classes
                    .iter()
                    .enumerate()
                    .filter_map(|(c, cs)| cs.variants.iter().position(|&v| v == kind).map(|p| (c, p)))
                    .collect();
                match owners[..] {
                    [(c, p)] => {
                        if variants[c].is_some() {
                            return Err(err(line_no, format!("family {name} names class {} twice", spec.classes[c].name)));
                        }
                        variants[c] = Some(p);
                    }
                    [] => return Err(err(line_no, format!("variant {e:?} belongs to no class"))),
                    _ => return Err(err(line_no, format!("variant {e:?} belongs to several classes"))),
                }
            }
            spec.families.push(FamilySpec { name, variants });
        }
        spec.validate()?;
        Ok(spec)
    }

    /// Text form accepted by [`SyntheticSpec::parse`].
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        s.push_str(&format!("num_samples = {}\n", self.num_samples));
        s.push_str(&format!("points_per_sample = {}\n", self.points_per_sample));
        s.push_str(&format!("noise_std = {}\n", self.noise_std));
        s.push_str(&format!("scale_min = {}\n", self.scale_range.0));
        s.push_str(&format!("scale_max = {}\n", self.scale_range.1));
        s.push_str(&format!("rotate = {}\n", self.random_rotation));
        for c in &self.classes {
            let v: Vec<&str> = c.variants.iter().map(|v| v.name()).collect();
            s.push_str(&format!("class {} = {}\n", c.name, v.join(", ")));
        }
        for f in &self.families {
            let v: Vec<&str> = f
                .variants
                .iter()
                .enumerate()
                .filter_map(|(c, v)| v.map(|i| self.classes[c].variants[i].name()))
                .collect();
            s.push_str(&format!("family {} = {}\n", f.name, v.join(", ")));
        }
        s
    }
}

#[derive(Debug, Clone, Copy)]
enum Top {
    Square(f64),
    Round(f64),
}

#[derive(Debug, Clone, Copy)]
struct Context {
    height: f64,
    top: Top,
}

impl Context {
    fn for_family(kinds: &[VariantKind]) -> Self {
        if kinds.contains(&VariantKind::SquarePlate) {
            Context {
                height: 0.75,
                top: Top::Square(0.8),
            }
        } else {
            Context {
                height: 1.0,
                top: Top::Round(0.9),
            }
        }
    }
}

/// Surface patch sampled uniformly by area.
#[derive(Debug, Clone, Copy)]
pub(crate) enum Primitive {
    /// `origin + a*e1 + b*e2`, `a, b` in `[0, 1]`.
    Parallelogram {
        origin: [f64; 3],
        e1: [f64; 3],
        e2: [f64; 3],
    },
    /// Horizontal disc.
    Disc { center: [f64; 3], radius: f64 },
    /// Side of a vertical cylinder.
    Cylinder {
        cx: f64,
        cy: f64,
        radius: f64,
        z0: f64,
        z1: f64,
    },
    Sphere { center: [f64; 3], radius: f64 },
}

impl Primitive {
    pub(crate) fn area(&self) -> f64 {
        match *self {
            Primitive::Parallelogram { e1, e2, .. } => {
                let c = [
                    e1[1] * e2[2] - e1[2] * e2[1],
                    e1[2] * e2[0] - e1[0] * e2[2],
                    e1[0] * e2[1] - e1[1] * e2[0],
                ];
                (c[0] * c[0] + c[1] * c[1] + c[2] * c[2]).sqrt()
            }
            Primitive::Disc { radius, .. } => PI * radius * radius,
            Primitive::Cylinder { radius, z0, z1, .. } => 2.0 * PI * radius * (z1 - z0),
            Primitive::Sphere { radius, .. } => 4.0 * PI * radius * radius,
        }
    }

    fn sample(&self, rng: &mut SeededRng) -> [f64; 3] {
        match *self {
            Primitive::Parallelogram { origin, e1, e2 } => {
                let (a, b) = (rng.uniform(), rng.uniform());
                [0, 1, 2].map(|i| origin[i] + a * e1[i] + b * e2[i])
            }
            Primitive::Disc { center, radius } => {
                let r = radius * rng.uniform().sqrt();
                let t = 2.0 * PI * rng.uniform();
                [center[0] + r * t.cos(), center[1] + r * t.sin(), center[2]]
            }
            Primitive::Cylinder {
                cx,
                cy,
                radius,
                z0,
                z1,
            } => {
                let t = 2.0 * PI * rng.uniform();
                [cx + radius * t.cos(), cy + radius * t.sin(), rng.uniform_range(z0, z1)]
            }
            Primitive::Sphere { center, radius } => loop {
                let v = [rng.normal(), rng.normal(), rng.normal()];
                let n = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
                if n > 1e-12 {
                    break [0, 1, 2].map(|i| center[i] + radius * v[i] / n);
                }
            },
        }
    }
}

/// Vertical band following the outline of a square (half side `half`) or a
/// circle.
fn band(top: Top, scale: f64, z0: f64, z1: f64) -> Vec<Primitive> {
    match top {
        Top::Square(h) => {
            let a = h * scale;
            let up = [0.0, 0.0, z1 - z0];
            let corners = [(-a, -a), (a, -a), (a, a), (-a, a)];
            (0..4)
                .map(|i| {
                    let (x0, y0) = corners[i];
                    let (x1, y1) = corners[(i + 1) % 4];
                    Primitive::Parallelogram {
                        origin: [x0, y0, z0],
                        e1: [x1 - x0, y1 - y0, 0.0],
                        e2: up,
                    }
                })
                .collect()
        }
        Top::Round(r) => vec![Primitive::Cylinder {
            cx: 0.0,
            cy: 0.0,
            radius: r * scale,
            z0,
            z1,
        }],
    }
}

fn cube(center: [f64; 3], side: f64) -> Vec<Primitive> {
    let h = side / 2.0;
    let o = |dx: f64, dy: f64, dz: f64| [center[0] + dx, center[1] + dy, center[2] + dz];
    let (ex, ey, ez) = ([side, 0.0, 0.0], [0.0, side, 0.0], [0.0, 0.0, side]);
    vec![
        Primitive::Parallelogram { origin: o(-h, -h, -h), e1: ex, e2: ey },
        Primitive::Parallelogram { origin: o(-h, -h, h), e1: ex, e2: ey },
        Primitive::Parallelogram { origin: o(-h, -h, -h), e1: ex, e2: ez },
        Primitive::Parallelogram { origin: o(-h, h, -h), e1: ex, e2: ez },
        Primitive::Parallelogram { origin: o(-h, -h, -h), e1: ey, e2: ez },
        Primitive::Parallelogram { origin: o(h, -h, -h), e1: ey, e2: ez },
    ]
}

fn variant_geometry(kind: VariantKind, ctx: Context) -> Vec<Primitive> {
    let h = ctx.height;
    match kind {
        VariantKind::SquarePlate | VariantKind::RoundDisc => match ctx.top {
            Top::Square(a) => vec![Primitive::Parallelogram {
                origin: [-a, -a, h],
                e1: [2.0 * a, 0.0, 0.0],
                e2: [0.0, 2.0 * a, 0.0],
            }],
            Top::Round(r) => vec![Primitive::Disc {
                center: [0.0, 0.0, h],
                radius: r,
            }],
        },
        VariantKind::CenterPole => vec![
            Primitive::Cylinder {
                cx: 0.0,
                cy: 0.0,
                radius: 0.08,
                z0: 0.0,
                z1: h,
            },
            Primitive::Disc {
                center: [0.0, 0.0, 0.0],
                radius: 0.3,
            },
        ],
        VariantKind::CornerLegs => {
            let c = match ctx.top {
                Top::Square(a) => 0.8 * a,
                Top::Round(r) => 0.75 * r / std::f64::consts::SQRT_2,
            };
            [(c, c), (-c, c), (-c, -c), (c, -c)]
                .into_iter()
                .map(|(cx, cy)| Primitive::Cylinder {
                    cx,
                    cy,
                    radius: 0.05,
                    z0: 0.0,
                    z1: h,
                })
                .collect()
        }
        VariantKind::ThinBand => band(ctx.top, 1.0, h - 0.06, h),
        VariantKind::ThickBand => band(ctx.top, 0.5, h - 0.3, h - 0.02),
        VariantKind::SphereBlob => vec![Primitive::Sphere {
            center: [0.3, 0.2, h + 0.18],
            radius: 0.18,
        }],
        VariantKind::BoxBlob => cube([1.3, 0.0, 0.15], 0.3),
    }
}

/// Parts of one family instance: `(primitive, class, global subclass)`.
pub(crate) fn family_parts(spec: &SyntheticSpec, family: usize) -> Vec<(Primitive, usize, usize)> {
    let fam = &spec.families[family];
    let kinds: Vec<VariantKind> = fam
        .variants
        .iter()
        .enumerate()
        .filter_map(|(c, v)| v.map(|i| spec.classes[c].variants[i]))
        .collect();
    let ctx = Context::for_family(&kinds);
    let mut parts = Vec::new();
    for (c, v) in fam.variants.iter().enumerate() {
        if let Some(v) = *v {
            let sub = spec.subclass_id(c, v);
            for p in variant_geometry(spec.classes[c].variants[v], ctx) {
                parts.push((p, c, sub));
            }
        }
    }
    parts
}

/// Expected fraction of points per class for `family`, from part areas.
pub fn class_area_fractions(spec: &SyntheticSpec, family: usize) -> Vec<f64> {
    let parts = family_parts(spec, family);
    let total: f64 = parts.iter().map(|(p, _, _)| p.area()).sum();
    let mut out = vec![0.0; spec.num_classes()];
    for (p, c, _) in &parts {
        out[*c] += p.area() / total;
    }
    out
}

fn generate_sample(spec: &SyntheticSpec, index: usize, rng: &mut SeededRng) -> PointCloudSample {
    let family = index % spec.families.len();
    let parts = family_parts(spec, family);
    let mut cumulative = Vec::with_capacity(parts.len());
    let mut acc = 0.0;
    for (p, _, _) in &parts {
        acc += p.area();
        cumulative.push(acc);
    }
    let total = acc;

    let angle = if spec.random_rotation {
        2.0 * PI * rng.uniform()
    } else {
        0.0
    };
    let (lo, hi) = spec.scale_range;
    let scale = if hi > lo { rng.uniform_range(lo, hi) } else { lo };
    let (sin, cos) = angle.sin_cos();

    let n = spec.points_per_sample;
    let mut x = vec![0.0; 3 * n];
    let mut labels = Vec::with_capacity(n);
    let mut subclass = Vec::with_capacity(n);
    for i in 0..n {
        let u = rng.uniform() * total;
        let which = cumulative.partition_point(|&c| c <= u).min(parts.len() - 1);
        let (prim, class, sub) = parts[which];
        let p = prim.sample(rng);
        let rotated = [cos * p[0] - sin * p[1], sin * p[0] + cos * p[1], p[2]];
        for r in 0..3 {
            let noise = if spec.noise_std > 0.0 {
                spec.noise_std * rng.normal()
            } else {
                0.0
            };
            x[r * n + i] = scale * rotated[r] + noise;
        }
        labels.push(class);
        subclass.push(sub);
    }
    PointCloudSample {
        points: DenseArray::from_parts_unchecked(vec![3, n], x),
        labels,
        mask: vec![true; n],
        subclass,
        family,
    }
}

/// Generates `spec.num_samples` fully labeled samples.
pub fn generate_synthetic(spec: &SyntheticSpec, seed: u64) -> Result<Dataset> {
    spec.validate()?;
    let base = SeededRng::new(seed);
    let samples = (0..spec.num_samples)
        .map(|i| generate_sample(spec, i, &mut base.derive(i as u64)))
        .collect();
    Dataset::new(spec.num_classes(), 3, samples)
}
