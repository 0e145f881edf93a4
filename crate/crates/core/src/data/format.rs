//! `PCSEG1` dataset files.
//!
//! ```text
//! magic        7 bytes  "PCSEG1\n"
//! num_samples  u32
//! K            u32
//! D_i          u32
//! per sample:
//!   N          u32
//!   X          N * D_i f64, point by point (x0 y0 z0 x1 ...)
//!   labels     N u32
//!   mask       N u8 (0 or 1)
//!   subclass   N u32
//!   family     u32
//! ```
//!
//! All integers and reals are little-endian.

use std::path::Path;

use super::{Dataset, PointCloudSample};
use crate::binio::{Reader, Writer};
use crate::error::{Error, Result};
use crate::numeric::DenseArray;

pub const DATASET_MAGIC: &[u8; 7] = b"PCSEG1\n";

pub fn encode_dataset(ds: &Dataset) -> Result<Vec<u8>> {
    let mut w = Writer::new();
    w.bytes(DATASET_MAGIC);
    w.count(ds.samples.len(), "num_samples")?;
    w.count(ds.num_classes, "K")?;
    w.count(ds.in_dim, "D_i")?;
    for s in &ds.samples {
        let n = s.num_points();
        w.count(n, "N")?;
        let x = s.points.as_slice();
        for i in 0..n {
            for r in 0..ds.in_dim {
                w.f64(x[r * n + i]);
            }
        }
        for &c in &s.labels {
            w.count(c, "label")?;
        }
        for &m in &s.mask {
            w.u8(u8::from(m));
        }
        for &c in &s.subclass {
            w.count(c, "subclass")?;
        }
        w.count(s.family, "family")?;
    }
    Ok(w.finish())
}

pub fn decode_dataset(bytes: &[u8]) -> Result<Dataset> {
    let mut r = Reader::new(bytes);
    r.expect_magic(DATASET_MAGIC)?;
    let num_samples = r.u32("num_samples")? as usize;
    let k = r.u32("K")? as usize;
    let din = r.u32("D_i")? as usize;
    if k == 0 || din == 0 {
        return r.fail(format!("K and D_i must be positive, got K={k}, D_i={din}"));
    }
    let mut samples = Vec::with_capacity(num_samples.min(1 << 16));
    for _ in 0..num_samples {
        let n = r.u32("N")? as usize;
        if n == 0 {
            return r.fail("sample with zero points");
        }
        let flat = r.f64s(n * din, "coordinates")?;
        let mut x = vec![0.0; n * din];
        for i in 0..n {
            for c in 0..din {
                x[c * n + i] = flat[i * din + c];
            }
        }
        let mut labels = Vec::with_capacity(n);
        for _ in 0..n {
            let at = r.offset();
            let c = r.u32("label")? as usize;
            if c >= k {
                return Err(Error::Format {
                    offset: at,
                    message: format!("label {c} out of range for K={k}"),
                });
            }
            labels.push(c);
        }
        let mut mask = Vec::with_capacity(n);
        for _ in 0..n {
            let at = r.offset();
            match r.u8("mask")? {
                0 => mask.push(false),
                1 => mask.push(true),
                v => {
                    return Err(Error::Format {
                        offset: at,
                        message: format!("mask byte must be 0 or 1, got {v}"),
                    })
                }
            }
        }
        let subclass = (0..n)
            .map(|_| r.u32("subclass").map(|v| v as usize))
            .collect::<Result<Vec<_>>>()?;
        let family = r.u32("family")? as usize;
        samples.push(PointCloudSample {
            points: DenseArray::from_vec(&[din, n], x)?,
            labels,
            mask,
            subclass,
            family,
        });
    }
    r.finish()?;
    Dataset::new(k, din, samples)
}

pub fn save_dataset(ds: &Dataset, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let bytes = encode_dataset(ds)?;
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn load_dataset(path: impl AsRef<Path>) -> Result<Dataset> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_dataset(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> Dataset {
        let s = PointCloudSample {
            points: DenseArray::from_vec(&[3, 2], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap(),
            labels: vec![1, 0],
            mask: vec![true, false],
            subclass: vec![2, 0],
            family: 3,
        };
        Dataset::new(2, 3, vec![s]).unwrap()
    }

    #[test]
    fn layout_is_point_major() {
        let bytes = encode_dataset(&tiny()).unwrap();
        assert_eq!(&bytes[..7], b"PCSEG1\n");
        assert_eq!(u32::from_le_bytes(bytes[7..11].try_into().unwrap()), 1);
        assert_eq!(u32::from_le_bytes(bytes[19..23].try_into().unwrap()), 2);
        // first point is column 0: (1, 3, 5)
        let f = |o: usize| f64::from_le_bytes(bytes[o..o + 8].try_into().unwrap());
        assert_eq!([f(23), f(31), f(39)], [1.0, 3.0, 5.0]);
        assert_eq!(bytes.len(), 7 + 12 + 4 + 48 + 8 + 2 + 8 + 4);
    }

    #[test]
    fn truncated_file_is_rejected() {
        let bytes = encode_dataset(&tiny()).unwrap();
        for cut in [3, 10, 30, bytes.len() - 1] {
            match decode_dataset(&bytes[..cut]) {
                Err(Error::Format { offset, .. }) => assert!(offset as usize <= cut),
                other => panic!("expected format error, got {other:?}"),
            }
        }
    }

    #[test]
    fn bad_magic_and_trailing_bytes() {
        let mut bytes = encode_dataset(&tiny()).unwrap();
        bytes.push(0);
        assert!(matches!(decode_dataset(&bytes), Err(Error::Format { .. })));
        bytes.pop();
        bytes[0] = b'X';
        assert!(matches!(decode_dataset(&bytes), Err(Error::Format { offset: 0, .. })));
    }

    #[test]
    fn bad_mask_byte_reports_offset() {
        let mut bytes = encode_dataset(&tiny()).unwrap();
        let mask_at = 7 + 12 + 4 + 48 + 8;
        bytes[mask_at] = 7;
        match decode_dataset(&bytes) {
            Err(Error::Format { offset, .. }) => assert_eq!(offset as usize, mask_at),
            other => panic!("expected format error, got {other:?}"),
        }
    }
}
