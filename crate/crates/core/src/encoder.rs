//! Simplified edge-convolution point encoder.
//!
//! Each layer forms edge features `[h_i, h_j - h_i]` over a k-NN graph built
//! once from the input coordinates, applies a shared linear map and a
//! leaky ReLU, then max-pools over the neighbours of every point. A final
//! per-point linear map produces the `D_o`-dimensional embedding.
//!
//! With the edge weight split as `W = [W_a | W_b]` the pre-activation of edge
//! `(i, j)` is `(W_a - W_b) h_i + W_b h_j + b`, so both halves are computed
//! once per point instead of once per edge.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numeric::{knn_columns, DenseArray, KnnGraph, SeededRng};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub in_dim: usize,
    pub k_neighbors: usize,
    pub layer_widths: Vec<usize>,
    pub out_dim: usize,
    pub leaky_slope: f64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            in_dim: 3,
            k_neighbors: 8,
            layer_widths: vec![32, 64],
            out_dim: 32,
            leaky_slope: 0.2,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.in_dim == 0 {
            return Err(Error::Config("encoder input dimension must be >= 1".into()));
        }
        if self.k_neighbors == 0 {
            return Err(Error::Config("k_neighbors must be >= 1".into()));
        }
        if self.layer_widths.iter().any(|&w| w == 0) {
            return Err(Error::Config("every layer width must be >= 1".into()));
        }
        if self.out_dim < 2 {
            return Err(Error::Config("encoder out_dim must be >= 2".into()));
        }
        if !self.leaky_slope.is_finite() {
            return Err(Error::Config("leaky_slope must be finite".into()));
        }
        Ok(())
    }

    fn layer_dims(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        let ins = std::iter::once(self.in_dim).chain(self.layer_widths.iter().copied());
        ins.zip(self.layer_widths.iter().copied())
    }

    fn last_width(&self) -> usize {
        self.layer_widths.last().copied().unwrap_or(self.in_dim)
    }
}

/// One edge-convolution layer. `weight` is `out x 2*in` acting on
/// `[h_i, h_j - h_i]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EdgeLayer {
    pub weight: DenseArray,
    pub bias: DenseArray,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderParams {
    pub layers: Vec<EdgeLayer>,
    /// `D_o x last_width`.
    pub out_weight: DenseArray,
    pub out_bias: DenseArray,
}

fn glorot(rows: usize, cols: usize, rng: &mut SeededRng) -> DenseArray {
    // fan_in = cols, fan_out = rows
    let a = (6.0 / (rows + cols) as f64).sqrt();
    let data = (0..rows * cols).map(|_| rng.uniform_range(-a, a)).collect();
    DenseArray::from_parts_unchecked(vec![rows, cols], data)
}

pub fn init_params(config: &EncoderConfig, rng: &mut SeededRng) -> Result<EncoderParams> {
    config.validate()?;
    let layers = config
        .layer_dims()
        .map(|(cin, cout)| EdgeLayer {
            weight: glorot(cout, 2 * cin, rng),
            bias: DenseArray::from_parts_unchecked(vec![cout], vec![0.0; cout]),
        })
        .collect();
    let last = config.last_width();
    Ok(EncoderParams {
        layers,
        out_weight: glorot(config.out_dim, last, rng),
        out_bias: DenseArray::from_parts_unchecked(vec![config.out_dim], vec![0.0; config.out_dim]),
    })
}

impl EncoderParams {
    /// Zero-valued parameters with the same shapes.
    pub fn zeros_like(&self) -> Self {
        let z = |a: &DenseArray| DenseArray::from_parts_unchecked(a.shape().to_vec(), vec![0.0; a.len()]);
        Self {
            layers: self
                .layers
                .iter()
                .map(|l| EdgeLayer {
                    weight: z(&l.weight),
                    bias: z(&l.bias),
                })
                .collect(),
            out_weight: z(&self.out_weight),
            out_bias: z(&self.out_bias),
        }
    }

    /// Every tensor in a fixed order: layer weights and biases, then output.
    pub fn tensors(&self) -> Vec<&DenseArray> {
        let mut v: Vec<&DenseArray> = Vec::new();
        for l in &self.layers {
            v.push(&l.weight);
            v.push(&l.bias);
        }
        v.push(&self.out_weight);
        v.push(&self.out_bias);
        v
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut DenseArray> {
        let mut v: Vec<&mut DenseArray> = Vec::new();
        for l in &mut self.layers {
            v.push(&mut l.weight);
            v.push(&mut l.bias);
        }
        v.push(&mut self.out_weight);
        v.push(&mut self.out_bias);
        v
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    /// `self += alpha * other`, tensor by tensor.
    pub fn add_scaled(&mut self, alpha: f64, other: &EncoderParams) -> Result<()> {
        for (a, b) in self.tensors_mut().into_iter().zip(other.tensors()) {
            a.axpy(alpha, b)?;
        }
        Ok(())
    }

    fn check_against(&self, config: &EncoderConfig) -> Result<()> {
        let mismatch = || Error::Dimension("encoder parameters do not match config".into());
        if self.layers.len() != config.layer_widths.len() {
            return Err(mismatch());
        }
        for (l, (cin, cout)) in self.layers.iter().zip(config.layer_dims()) {
            if l.weight.shape() != [cout, 2 * cin] || l.bias.shape() != [cout] {
                return Err(mismatch());
            }
        }
        if self.out_weight.shape() != [config.out_dim, config.last_width()]
            || self.out_bias.shape() != [config.out_dim]
        {
            return Err(mismatch());
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
struct LayerTape {
    /// Layer input, `N x cin` point-major.
    input: Vec<f64>,
    cin: usize,
    cout: usize,
    /// Winning neighbour per (point, channel).
    argmax: Vec<usize>,
    /// Pre-activation at the winning neighbour per (point, channel).
    pre: Vec<f64>,
}

/// Everything `encode_backward` needs from a forward pass.
#[derive(Debug, Clone)]
pub struct ForwardTape {
    graph: KnnGraph,
    n: usize,
    layers: Vec<LayerTape>,
    /// Final hidden features, `N x last_width` point-major.
    last: Vec<f64>,
    last_width: usize,
    out_dim: usize,
    in_dim: usize,
    leaky_slope: f64,
}

impl ForwardTape {
    pub fn graph(&self) -> &KnnGraph {
        &self.graph
    }

    /// Winning neighbour of every (point, channel) of layer `layer`.
    pub fn argmax(&self, layer: usize) -> &[usize] {
        &self.layers[layer].argmax
    }

    /// Smallest gap between the winning pre-activation and the runner-up
    /// over every max-aggregation, used to detect near ties.
    pub(crate) fn min_tie_gap(&self, params: &EncoderParams) -> f64 {
        let mut gap = f64::INFINITY;
        for (lt, layer) in self.layers.iter().zip(&params.layers) {
            let (p, q) = split_products(&lt.input, lt.cin, lt.cout, self.n, &layer.weight);
            for i in 0..self.n {
                for c in 0..lt.cout {
                    let mut vals: Vec<f64> = self
                        .graph
                        .neighbors(i)
                        .iter()
                        .map(|&j| p[i * lt.cout + c] + q[j * lt.cout + c])
                        .collect();
                    vals.sort_by(|a, b| b.total_cmp(a));
                    if vals.len() > 1 {
                        gap = gap.min(vals[0] - vals[1]);
                    }
                    // The kink of the leaky ReLU is a tie as well.
                    gap = gap.min((vals[0] + layer.bias.as_slice()[c]).abs());
                }
            }
        }
        gap
    }
}

fn leaky(x: f64, slope: f64) -> f64 {
    if x > 0.0 {
        x
    } else {
        slope * x
    }
}

fn leaky_grad(x: f64, slope: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else {
        slope
    }
}

/// Per-point products `P = (W_a - W_b) h` and `Q = W_b h`, each `N x cout`.
fn split_products(
    input: &[f64],
    cin: usize,
    cout: usize,
    n: usize,
    weight: &DenseArray,
) -> (Vec<f64>, Vec<f64>) {
    let w = weight.as_slice();
    let mut p = vec![0.0; n * cout];
    let mut q = vec![0.0; n * cout];
    for i in 0..n {
        let h = &input[i * cin..(i + 1) * cin];
        for c in 0..cout {
            let row = &w[c * 2 * cin..(c + 1) * 2 * cin];
            let (wa, wb) = row.split_at(cin);
            let mut sp = 0.0;
            let mut sq = 0.0;
            for t in 0..cin {
                sp += (wa[t] - wb[t]) * h[t];
                sq += wb[t] * h[t];
            }
            p[i * cout + c] = sp;
            q[i * cout + c] = sq;
        }
    }
    (p, q)
}

/// Builds the neighbourhood graph of `x` (`D_i x N`).
pub fn build_graph(x: &DenseArray, config: &EncoderConfig) -> Result<KnnGraph> {
    let (_, n) = x.dims2()?;
    if n <= config.k_neighbors {
        return Err(Error::Input(format!(
            "need more than k={} points, got {n}",
            config.k_neighbors
        )));
    }
    knn_columns(x, config.k_neighbors)
}

/// Encodes `x` (`D_i x N`) into `Z` (`D_o x N`).
pub fn encode(
    x: &DenseArray,
    params: &EncoderParams,
    config: &EncoderConfig,
) -> Result<(DenseArray, ForwardTape)> {
    let graph = build_graph(x, config)?;
    encode_with_graph(x, &graph, params, config)
}

/// [`encode`] with a precomputed neighbourhood graph.
pub fn encode_with_graph(
    x: &DenseArray,
    graph: &KnnGraph,
    params: &EncoderParams,
    config: &EncoderConfig,
) -> Result<(DenseArray, ForwardTape)> {
    config.validate()?;
    params.check_against(config)?;
    let (din, n) = x.dims2()?;
    if din != config.in_dim {
        return Err(Error::Dimension(format!(
            "input has {din} channels, encoder expects {}",
            config.in_dim
        )));
    }
    if graph.num_points() != n || graph.k() != config.k_neighbors {
        return Err(Error::Dimension("neighbourhood graph does not match input".into()));
    }
    let slope = config.leaky_slope;

    // point-major copy of the input
    let xs = x.as_slice();
    let mut h: Vec<f64> = (0..n)
        .flat_map(|i| (0..din).map(move |r| xs[r * n + i]))
        .collect();
    let mut cin = din;

    let mut tapes = Vec::with_capacity(params.layers.len());
    for layer in &params.layers {
        let cout = layer.bias.len();
        let (p, q) = split_products(&h, cin, cout, n, &layer.weight);
        let b = layer.bias.as_slice();
        let mut out = vec![0.0; n * cout];
        let mut argmax = vec![0usize; n * cout];
        let mut pre = vec![0.0; n * cout];
        for i in 0..n {
            let nbrs = graph.neighbors(i);
            for c in 0..cout {
                let base = p[i * cout + c] + b[c];
                let mut best_j = nbrs[0];
                let mut best = base + q[best_j * cout + c];
                for &j in &nbrs[1..] {
                    let u = base + q[j * cout + c];
                    if u > best || (u == best && j < best_j) {
                        best = u;
                        best_j = j;
                    }
                }
                argmax[i * cout + c] = best_j;
                pre[i * cout + c] = best;
                out[i * cout + c] = leaky(best, slope);
            }
        }
        tapes.push(LayerTape {
            input: std::mem::replace(&mut h, out),
            cin,
            cout,
            argmax,
            pre,
        });
        cin = cout;
    }

    let dout = config.out_dim;
    let wo = params.out_weight.as_slice();
    let bo = params.out_bias.as_slice();
    let mut z = vec![0.0; dout * n];
    for i in 0..n {
        let hi = &h[i * cin..(i + 1) * cin];
        for d in 0..dout {
            let row = &wo[d * cin..(d + 1) * cin];
            let mut s = bo[d];
            for t in 0..cin {
                s += row[t] * hi[t];
            }
            z[d * n + i] = s;
        }
    }
    let z = DenseArray::from_vec(&[dout, n], z)?;
    Ok((
        z,
        ForwardTape {
            graph: graph.clone(),
            n,
            layers: tapes,
            last: h,
            last_width: cin,
            out_dim: dout,
            in_dim: din,
            leaky_slope: slope,
        },
    ))
}

/// Reverse-mode gradients of `encode` given the upstream gradient `dz`
/// (`D_o x N`). Returns parameter gradients and the input gradient.
pub fn encode_backward(
    tape: &ForwardTape,
    params: &EncoderParams,
    dz: &DenseArray,
) -> Result<(EncoderParams, DenseArray)> {
    let n = tape.n;
    let leaky_slope = tape.leaky_slope;
    if dz.shape() != [tape.out_dim, n] {
        return Err(Error::Dimension(format!(
            "dZ has shape {:?}, expected [{}, {n}]",
            dz.shape(),
            tape.out_dim
        )));
    }
    if params.layers.len() != tape.layers.len() || params.out_weight.shape() != [tape.out_dim, tape.last_width] {
        return Err(Error::Dimension("parameters do not match tape".into()));
    }
    let mut grads = params.zeros_like();
    let dzs = dz.as_slice();
    let cl = tape.last_width;

    // output layer
    let wo = params.out_weight.as_slice();
    let mut dh = vec![0.0; n * cl];
    {
        let dwo = grads.out_weight.as_mut_slice();
        for d in 0..tape.out_dim {
            for i in 0..n {
                let g = dzs[d * n + i];
                if g == 0.0 {
                    continue;
                }
                let hi = &tape.last[i * cl..(i + 1) * cl];
                for t in 0..cl {
                    dwo[d * cl + t] += g * hi[t];
                    dh[i * cl + t] += g * wo[d * cl + t];
                }
            }
        }
        let dbo = grads.out_bias.as_mut_slice();
        for d in 0..tape.out_dim {
            dbo[d] = dzs[d * n..(d + 1) * n].iter().sum();
        }
    }

    for (li, lt) in tape.layers.iter().enumerate().rev() {
        let (cin, cout) = (lt.cin, lt.cout);
        let w = params.layers[li].weight.as_slice();
        // gradients w.r.t. the per-point products P and Q
        let mut dp = vec![0.0; n * cout];
        let mut dq = vec![0.0; n * cout];
        let mut db = vec![0.0; cout];
        for i in 0..n {
            for c in 0..cout {
                let g = dh[i * cout + c];
                if g == 0.0 {
                    continue;
                }
                let du = g * leaky_grad(lt.pre[i * cout + c], leaky_slope);
                dp[i * cout + c] += du;
                dq[lt.argmax[i * cout + c] * cout + c] += du;
                db[c] += du;
            }
        }
        let mut dinput = vec![0.0; n * cin];
        let dw = grads.layers[li].weight.as_mut_slice();
        for i in 0..n {
            let h = &lt.input[i * cin..(i + 1) * cin];
            for c in 0..cout {
                let gp = dp[i * cout + c];
                let gq = dq[i * cout + c];
                if gp == 0.0 && gq == 0.0 {
                    continue;
                }
                let row = &w[c * 2 * cin..(c + 1) * 2 * cin];
                let drow = &mut dw[c * 2 * cin..(c + 1) * 2 * cin];
                for t in 0..cin {
                    // P uses (W_a - W_b), Q uses W_b
                    drow[t] += gp * h[t];
                    drow[cin + t] += (gq - gp) * h[t];
                    dinput[i * cin + t] += gp * (row[t] - row[cin + t]) + gq * row[cin + t];
                }
            }
        }
        grads.layers[li].bias.as_mut_slice().copy_from_slice(&db);
        dh = dinput;
    }

    // dh now holds the input gradient, point-major
    let din = tape.in_dim;
    let mut dx = vec![0.0; din * n];
    for i in 0..n {
        for r in 0..din {
            dx[r * n + i] = dh[i * din + r];
        }
    }
    Ok((grads, DenseArray::from_parts_unchecked(vec![din, n], dx)))
}
