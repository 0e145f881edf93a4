//! Binary checkpoints. All integers and reals are little-endian.
//!
//! Encoder (`MPENC1`):
//! ```text
//! magic "MPENC1"
//! u32 in_dim, u32 k_neighbors, u32 num_layers, u32 width * num_layers, u32 out_dim
//! f64 leaky_slope
//! per tensor (layer weight, layer bias, ..., output weight, output bias):
//!   u32 rows, u32 cols, rows * cols f64 row-major (biases are cols = 1)
//! ```
//!
//! Bank (`MPBANK1`): magic, u32 K, u32 M, u32 D_o, then the `D_o x M x K`
//! array row-major.
//!
//! Optimizer (`MPOPT1`): magic, u64 step, u32 epochs_done, u32 tensors,
//! then per tensor u64 length, first moments, second moments.

use std::path::Path;

use crate::bank::PrototypeBank;
use crate::binio::{Reader, Writer};
use crate::encoder::{EdgeLayer, EncoderConfig, EncoderParams};
use crate::error::{Error, Result};
use crate::numeric::DenseArray;

use super::adam::OptimizerState;

pub const ENCODER_MAGIC: &[u8; 6] = b"MPENC1";
pub const BANK_MAGIC: &[u8; 7] = b"MPBANK1";
pub const OPTIMIZER_MAGIC: &[u8; 6] = b"MPOPT1";

fn write_matrix(w: &mut Writer, a: &DenseArray) -> Result<()> {
    let (rows, cols) = match a.shape() {
        [r, c] => (*r, *c),
        [r] => (*r, 1),
        s => return Err(Error::Dimension(format!("cannot store shape {s:?} as a matrix"))),
    };
    w.count(rows, "rows")?;
    w.count(cols, "cols")?;
    w.f64s(a.as_slice());
    Ok(())
}

fn read_matrix(r: &mut Reader, rows: usize, cols: usize, vector: bool) -> Result<DenseArray> {
    let at = r.offset();
    let got_r = r.u32("rows")? as usize;
    let got_c = r.u32("cols")? as usize;
    if (got_r, got_c) != (rows, cols) {
        return Err(Error::Format {
            offset: at,
            message: format!("matrix is {got_r}x{got_c}, expected {rows}x{cols}"),
        });
    }
    let data = r.f64s(rows * cols, "weights")?;
    let shape: Vec<usize> = if vector { vec![rows] } else { vec![rows, cols] };
    DenseArray::from_vec(&shape, data)
}

pub fn encode_encoder(config: &EncoderConfig, params: &EncoderParams) -> Result<Vec<u8>> {
    let mut w = Writer::new();
    w.bytes(ENCODER_MAGIC);
    w.count(config.in_dim, "in_dim")?;
    w.count(config.k_neighbors, "k_neighbors")?;
    w.count(config.layer_widths.len(), "num_layers")?;
    for &c in &config.layer_widths {
        w.count(c, "width")?;
    }
    w.count(config.out_dim, "out_dim")?;
    w.f64(config.leaky_slope);
    for t in params.tensors() {
        write_matrix(&mut w, t)?;
    }
    Ok(w.finish())
}

pub fn decode_encoder(bytes: &[u8]) -> Result<(EncoderConfig, EncoderParams)> {
    let mut r = Reader::new(bytes);
    r.expect_magic(ENCODER_MAGIC)?;
    let in_dim = r.u32("in_dim")? as usize;
    let k_neighbors = r.u32("k_neighbors")? as usize;
    let num_layers = r.u32("num_layers")? as usize;
    if num_layers > 1024 {
        return r.fail(format!("implausible layer count {num_layers}"));
    }
    let layer_widths = (0..num_layers)
        .map(|_| r.u32("width").map(|v| v as usize))
        .collect::<Result<Vec<_>>>()?;
    let out_dim = r.u32("out_dim")? as usize;
    let leaky_slope = r.f64("leaky_slope")?;
    let config = EncoderConfig {
        in_dim,
        k_neighbors,
        layer_widths,
        out_dim,
        leaky_slope,
    };
    if let Err(e) = config.validate() {
        return r.fail(format!("invalid encoder config: {e}"));
    }
    let mut layers = Vec::with_capacity(num_layers);
    let mut cin = in_dim;
    for &cout in &config.layer_widths {
        let weight = read_matrix(&mut r, cout, 2 * cin, false)?;
        let bias = read_matrix(&mut r, cout, 1, true)?;
        layers.push(EdgeLayer { weight, bias });
        cin = cout;
    }
    let out_weight = read_matrix(&mut r, out_dim, cin, false)?;
    let out_bias = read_matrix(&mut r, out_dim, 1, true)?;
    r.finish()?;
    Ok((
        config,
        EncoderParams {
            layers,
            out_weight,
            out_bias,
        },
    ))
}

pub fn encode_bank(bank: &PrototypeBank) -> Result<Vec<u8>> {
    let mut w = Writer::new();
    w.bytes(BANK_MAGIC);
    w.count(bank.num_classes(), "K")?;
    w.count(bank.num_prototypes(), "M")?;
    w.count(bank.dim(), "D_o")?;
    w.f64s(bank.omega().as_slice());
    Ok(w.finish())
}

pub fn decode_bank(bytes: &[u8]) -> Result<PrototypeBank> {
    let mut r = Reader::new(bytes);
    r.expect_magic(BANK_MAGIC)?;
    let k = r.u32("K")? as usize;
    let m = r.u32("M")? as usize;
    let d = r.u32("D_o")? as usize;
    if k == 0 || m == 0 || d == 0 {
        return r.fail(format!("K, M, D_o must be positive, got {k}, {m}, {d}"));
    }
    let data = r.f64s(d * m * k, "omega")?;
    r.finish()?;
    PrototypeBank::from_omega(DenseArray::from_vec(&[d, m, k], data)?)
}

pub fn encode_optimizer(state: &OptimizerState, epochs_done: usize) -> Result<Vec<u8>> {
    let mut w = Writer::new();
    w.bytes(OPTIMIZER_MAGIC);
    w.u64(state.step);
    w.count(epochs_done, "epochs_done")?;
    w.count(state.first.len(), "tensors")?;
    for (m, v) in state.first.iter().zip(&state.second) {
        w.u64(m.len() as u64);
        w.f64s(m);
        w.f64s(v);
    }
    Ok(w.finish())
}

pub fn decode_optimizer(bytes: &[u8]) -> Result<(OptimizerState, usize)> {
    let mut r = Reader::new(bytes);
    r.expect_magic(OPTIMIZER_MAGIC)?;
    let step = r.u64("step")?;
    let epochs_done = r.u32("epochs_done")? as usize;
    let count = r.u32("tensors")? as usize;
    let mut first = Vec::new();
    let mut second = Vec::new();
    for _ in 0..count {
        let len = r.u64("length")? as usize;
        first.push(r.f64s(len, "first moment")?);
        second.push(r.f64s(len, "second moment")?);
    }
    r.finish()?;
    Ok((OptimizerState { step, first, second }, epochs_done))
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| Error::io(path, e))
}

pub fn save_encoder(path: impl AsRef<Path>, config: &EncoderConfig, params: &EncoderParams) -> Result<()> {
    write_file(path.as_ref(), &encode_encoder(config, params)?)
}

pub fn load_encoder(path: impl AsRef<Path>) -> Result<(EncoderConfig, EncoderParams)> {
    decode_encoder(&read_file(path.as_ref())?)
}

pub fn save_bank(path: impl AsRef<Path>, bank: &PrototypeBank) -> Result<()> {
    write_file(path.as_ref(), &encode_bank(bank)?)
}

pub fn load_bank(path: impl AsRef<Path>) -> Result<PrototypeBank> {
    decode_bank(&read_file(path.as_ref())?)
}

pub fn save_optimizer(path: impl AsRef<Path>, state: &OptimizerState, epochs_done: usize) -> Result<()> {
    write_file(path.as_ref(), &encode_optimizer(state, epochs_done)?)
}

pub fn load_optimizer(path: impl AsRef<Path>) -> Result<(OptimizerState, usize)> {
    decode_optimizer(&read_file(path.as_ref())?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::init_params;
    use crate::numeric::SeededRng;

    fn small() -> (EncoderConfig, EncoderParams) {
        let cfg = EncoderConfig {
            in_dim: 3,
            k_neighbors: 2,
            layer_widths: vec![4, 5],
            out_dim: 3,
            leaky_slope: 0.2,
        };
        let p = init_params(&cfg, &mut SeededRng::new(3)).unwrap();
        (cfg, p)
    }

    #[test]
    fn encoder_round_trip() {
        let (cfg, p) = small();
        let bytes = encode_encoder(&cfg, &p).unwrap();
        assert_eq!(&bytes[..6], b"MPENC1");
        let (c2, p2) = decode_encoder(&bytes).unwrap();
        assert_eq!(c2, cfg);
        assert_eq!(p2, p);
        // header: magic + 5 u32 for two layers + out_dim, + slope
        let header = 6 + 4 * 6 + 8;
        let first = u32::from_le_bytes(bytes[header..header + 4].try_into().unwrap());
        assert_eq!(first, 4);
    }

    #[test]
    fn bank_round_trip_and_layout() {
        let bank = PrototypeBank::init(3, 2, 4, &mut SeededRng::new(1)).unwrap();
        let bytes = encode_bank(&bank).unwrap();
        assert_eq!(bytes.len(), 7 + 12 + 8 * 24);
        let v = f64::from_le_bytes(bytes[19..27].try_into().unwrap());
        assert_eq!(v, bank.omega().as_slice()[0]);
        assert_eq!(decode_bank(&bytes).unwrap(), bank);
    }

    #[test]
    fn optimizer_round_trip() {
        let st = OptimizerState {
            step: 17,
            first: vec![vec![0.5, -1.0], vec![]],
            second: vec![vec![0.25, 1.0], vec![]],
        };
        let (back, epochs) = decode_optimizer(&encode_optimizer(&st, 4).unwrap()).unwrap();
        assert_eq!(back, st);
        assert_eq!(epochs, 4);
    }

    #[test]
    fn truncation_and_wrong_magic() {
        let (cfg, p) = small();
        let bytes = encode_encoder(&cfg, &p).unwrap();
        assert!(matches!(decode_encoder(&bytes[..bytes.len() - 3]), Err(Error::Format { .. })));
        let bank = PrototypeBank::init(2, 2, 2, &mut SeededRng::new(1)).unwrap();
        assert!(matches!(decode_encoder(&encode_bank(&bank).unwrap()), Err(Error::Format { offset: 0, .. })));
    }
}
