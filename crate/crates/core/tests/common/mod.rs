//! Helpers shared by the integration tests.

#![allow(dead_code)]

use mulpro_core::data::{Dataset, PointCloudSample};
use mulpro_core::encoder::{encode_backward, encode_with_graph, EncoderParams};
use mulpro_core::numeric::{DenseArray, KnnGraph, SeededRng};
use mulpro_core::trainer::{build_graphs, epoch_order, TrainConfig};

pub fn random_array(shape: &[usize], rng: &mut SeededRng) -> DenseArray {
    let len = shape.iter().product();
    DenseArray::from_vec(shape, (0..len).map(|_| rng.normal()).collect()).unwrap()
}

/// A plain linear classifier `l = W^T z` (`W` is `D_o x K`) trained with
/// cross-entropy over labeled points and Adam, on top of the same encoder.
pub struct LinearBaseline {
    pub encoder: EncoderParams,
    pub w: Vec<f64>,
    pub d: usize,
    pub k: usize,
    step: u64,
    m1: Vec<Vec<f64>>,
    m2: Vec<Vec<f64>>,
}

impl LinearBaseline {
    pub fn new(encoder: EncoderParams, w: Vec<f64>, d: usize, k: usize) -> Self {
        let mut lens: Vec<usize> = encoder.tensors().iter().map(|t| t.len()).collect();
        lens.push(w.len());
        Self {
            encoder,
            w,
            d,
            k,
            step: 0,
            m1: lens.iter().map(|&n| vec![0.0; n]).collect(),
            m2: lens.iter().map(|&n| vec![0.0; n]).collect(),
        }
    }

    /// `K x N` logits, row-major.
    pub fn logits(&self, z: &[f64], n: usize) -> Vec<f64> {
        let mut l = vec![0.0; self.k * n];
        for p in 0..n {
            for dd in 0..self.d {
                let zv = z[dd * n + p];
                for c in 0..self.k {
                    l[c * n + p] += zv * self.w[dd * self.k + c];
                }
            }
        }
        l
    }

    /// Mean cross-entropy over labeled points and its logit gradient.
    fn cross_entropy(&self, l: &[f64], labels: &[usize], mask: &[bool], n: usize) -> (f64, Vec<f64>) {
        let k = self.k;
        let mut grad = vec![0.0; k * n];
        let count = mask.iter().filter(|&&m| m).count();
        if count == 0 {
            return (0.0, grad);
        }
        let scale = 1.0 / count as f64;
        let mut loss = 0.0;
        for p in (0..n).filter(|&p| mask[p]) {
            let col: Vec<f64> = (0..k).map(|c| l[c * n + p]).collect();
            let mx = col.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = col.iter().map(|v| (v - mx).exp()).collect();
            let sum: f64 = exps.iter().sum();
            loss += mx + sum.ln() - col[labels[p]];
            for c in 0..k {
                let y = if c == labels[p] { 1.0 } else { 0.0 };
                grad[c * n + p] = (exps[c] / sum - y) * scale;
            }
        }
        (loss * scale, grad)
    }

    /// One Adam step on a batch; returns the batch loss.
    pub fn step(&mut self, batch: &[(&PointCloudSample, &KnnGraph)], config: &TrainConfig) -> f64 {
        let mut feats = Vec::new();
        for (s, g) in batch {
            feats.push(encode_with_graph(&s.points, g, &self.encoder, &config.encoder).unwrap());
        }
        let n: usize = batch.iter().map(|(s, _)| s.num_points()).sum();
        let d = self.d;
        let mut z = vec![0.0; d * n];
        let mut off = 0;
        for (zi, _) in &feats {
            let ni = zi.shape()[1];
            for dd in 0..d {
                for p in 0..ni {
                    z[dd * n + off + p] = zi.get(&[dd, p]);
                }
            }
            off += ni;
        }
        let labels: Vec<usize> = batch.iter().flat_map(|(s, _)| s.labels.clone()).collect();
        let mask: Vec<bool> = batch.iter().flat_map(|(s, _)| s.mask.clone()).collect();
        let l = self.logits(&z, n);
        let (loss, gl) = self.cross_entropy(&l, &labels, &mask, n);

        let mut gw = vec![0.0; d * self.k];
        let mut gz = vec![0.0; d * n];
        for c in 0..self.k {
            for p in 0..n {
                let g = gl[c * n + p];
                for dd in 0..d {
                    gw[dd * self.k + c] += g * z[dd * n + p];
                    gz[dd * n + p] += g * self.w[dd * self.k + c];
                }
            }
        }

        let mut enc_grad: Vec<Vec<f64>> = self.encoder.tensors().iter().map(|t| vec![0.0; t.len()]).collect();
        if gz.iter().any(|&v| v != 0.0) {
            let mut off = 0;
            for (zi, tape) in &feats {
                let ni = zi.shape()[1];
                let mut block = vec![0.0; d * ni];
                for dd in 0..d {
                    for p in 0..ni {
                        block[dd * ni + p] = gz[dd * n + off + p];
                    }
                }
                let dz = DenseArray::from_vec(&[d, ni], block).unwrap();
                let (g, _) = encode_backward(tape, &self.encoder, &dz).unwrap();
                for (acc, t) in enc_grad.iter_mut().zip(g.tensors()) {
                    for (a, v) in acc.iter_mut().zip(t.as_slice()) {
                        *a += v;
                    }
                }
                off += ni;
            }
        }
        enc_grad.push(gw);
        self.adam(&enc_grad, config);
        loss
    }

    fn adam(&mut self, grads: &[Vec<f64>], config: &TrainConfig) {
        self.step += 1;
        let t = self.step as f64;
        let (b1, b2) = (config.adam_beta1, config.adam_beta2);
        let bc1 = 1.0 - b1.powf(t);
        let bc2 = 1.0 - b2.powf(t);
        let mut params: Vec<&mut [f64]> = self.encoder.tensors_mut().into_iter().map(|t| t.as_mut_slice()).collect();
        params.push(&mut self.w);
        for (i, p) in params.into_iter().enumerate() {
            for j in 0..p.len() {
                let g = grads[i][j];
                self.m1[i][j] = b1 * self.m1[i][j] + (1.0 - b1) * g;
                self.m2[i][j] = b2 * self.m2[i][j] + (1.0 - b2) * g * g;
                let mh = self.m1[i][j] / bc1;
                let vh = self.m2[i][j] / bc2;
                p[j] -= config.learning_rate * mh / (vh.sqrt() + config.adam_eps);
            }
        }
    }

    /// One epoch in the trainer's sample order; returns per-step losses.
    pub fn epoch(&mut self, ds: &Dataset, graphs: &[KnnGraph], config: &TrainConfig, epoch: usize) -> Vec<f64> {
        let order = epoch_order(config.seed, epoch, ds.len());
        order
            .chunks(config.batch_size)
            .map(|chunk| {
                let batch: Vec<(&PointCloudSample, &KnnGraph)> =
                    chunk.iter().map(|&i| (&ds.samples[i], &graphs[i])).collect();
                self.step(&batch, config)
            })
            .collect()
    }
}

/// Nearest-centroid subclass accuracy within each class, using the
/// rotation-invariant features (radius from the vertical axis, height).
pub fn subclass_centroid_accuracy(ds: &Dataset, num_subclasses: usize) -> Vec<f64> {
    let feats = |s: &PointCloudSample, i: usize| {
        let (x, y, z) = (s.points.get(&[0, i]), s.points.get(&[1, i]), s.points.get(&[2, i]));
        [(x * x + y * y).sqrt(), z]
    };
    let mut sum = vec![[0.0; 2]; num_subclasses];
    let mut cnt = vec![0.0; num_subclasses];
    let mut owner = vec![usize::MAX; num_subclasses];
    for s in &ds.samples {
        for i in 0..s.num_points() {
            let f = feats(s, i);
            let sc = s.subclass[i];
            sum[sc][0] += f[0];
            sum[sc][1] += f[1];
            cnt[sc] += 1.0;
            owner[sc] = s.labels[i];
        }
    }
    let centroid: Vec<[f64; 2]> = sum.iter().zip(&cnt).map(|(s, c)| [s[0] / c, s[1] / c]).collect();
    let mut hit = vec![0.0; ds.num_classes];
    let mut all = vec![0.0; ds.num_classes];
    for s in &ds.samples {
        for i in 0..s.num_points() {
            let f = feats(s, i);
            let c = s.labels[i];
            let best = (0..num_subclasses)
                .filter(|&j| owner[j] == c)
                .min_by(|&a, &b| {
                    let da = (f[0] - centroid[a][0]).powi(2) + (f[1] - centroid[a][1]).powi(2);
                    let db = (f[0] - centroid[b][0]).powi(2) + (f[1] - centroid[b][1]).powi(2);
                    da.partial_cmp(&db).unwrap()
                })
                .unwrap();
            all[c] += 1.0;
            if best == s.subclass[i] {
                hit[c] += 1.0;
            }
        }
    }
    hit.iter().zip(&all).map(|(h, a)| h / a).collect()
}

/// Graphs for a dataset under `config`.
pub fn graphs(ds: &Dataset, config: &TrainConfig) -> Vec<KnnGraph> {
    build_graphs(ds, config).unwrap()
}

/// Reader and writer for `PCSEG1` written from the format description alone.
pub mod pcseg {
    pub struct Sample {
        /// point-major coordinates
        pub coords: Vec<f64>,
        pub labels: Vec<u32>,
        pub mask: Vec<u8>,
        pub subclass: Vec<u32>,
        pub family: u32,
    }

    pub struct File {
        pub classes: u32,
        pub dim: u32,
        pub samples: Vec<Sample>,
    }

    struct Cursor<'a> {
        b: &'a [u8],
        at: usize,
    }

    impl Cursor<'_> {
        fn take(&mut self, n: usize) -> Option<&[u8]> {
            let s = self.b.get(self.at..self.at + n)?;
            self.at += n;
            Some(s)
        }
        fn u32(&mut self) -> Option<u32> {
            Some(u32::from_le_bytes(self.take(4)?.try_into().ok()?))
        }
        fn f64(&mut self) -> Option<f64> {
            Some(f64::from_le_bytes(self.take(8)?.try_into().ok()?))
        }
    }

    pub fn read(bytes: &[u8]) -> Option<File> {
        let mut c = Cursor { b: bytes, at: 0 };
        if c.take(7)? != b"PCSEG1\n" {
            return None;
        }
        let count = c.u32()?;
        let classes = c.u32()?;
        let dim = c.u32()?;
        let mut samples = Vec::new();
        for _ in 0..count {
            let n = c.u32()? as usize;
            let coords = (0..n * dim as usize).map(|_| c.f64()).collect::<Option<Vec<_>>>()?;
            let labels = (0..n).map(|_| c.u32()).collect::<Option<Vec<_>>>()?;
            let mask = c.take(n)?.to_vec();
            let subclass = (0..n).map(|_| c.u32()).collect::<Option<Vec<_>>>()?;
            let family = c.u32()?;
            samples.push(Sample {
                coords,
                labels,
                mask,
                subclass,
                family,
            });
        }
        (c.at == bytes.len()).then_some(File { classes, dim, samples })
    }

    pub fn write(file: &File) -> Vec<u8> {
        let mut out = b"PCSEG1\n".to_vec();
        for v in [file.samples.len() as u32, file.classes, file.dim] {
            out.extend(v.to_le_bytes());
        }
        for s in &file.samples {
            out.extend((s.labels.len() as u32).to_le_bytes());
            for v in &s.coords {
                out.extend(v.to_le_bytes());
            }
            for v in &s.labels {
                out.extend(v.to_le_bytes());
            }
            out.extend(&s.mask);
            for v in &s.subclass {
                out.extend(v.to_le_bytes());
            }
            out.extend(s.family.to_le_bytes());
        }
        out
    }

    /// Field-by-field comparison with a decoded dataset.
    pub fn matches(file: &File, ds: &mulpro_core::data::Dataset) -> bool {
        file.classes as usize == ds.num_classes
            && file.dim as usize == ds.in_dim
            && file.samples.len() == ds.len()
            && file.samples.iter().zip(&ds.samples).all(|(a, b)| {
                let n = b.num_points();
                let d = ds.in_dim;
                a.labels.len() == n
                    && (0..n).all(|i| (0..d).all(|r| a.coords[i * d + r].to_bits() == b.points.get(&[r, i]).to_bits()))
                    && a.labels.iter().zip(&b.labels).all(|(&x, &y)| x as usize == y)
                    && a.mask.iter().zip(&b.mask).all(|(&x, &y)| (x == 1) == y)
                    && a.subclass.iter().zip(&b.subclass).all(|(&x, &y)| x as usize == y)
                    && a.family as usize == b.family
            })
    }
}
