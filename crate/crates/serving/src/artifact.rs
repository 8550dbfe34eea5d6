//! Binary model artifact.
//!
//! Layout, integers little-endian:
//!
//! ```text
//! "REDF" | u16 version
//! u32 timesteps | u32 features | u32 units | u32 dense_units | f64 dropout
//! u32 horizon | u32 epochs | u32 batch_size | f64 learning_rate
//! u8 scaler kind (0 zscore, 1 minmax) | f64 | f64
//! u32 block count
//!   per block: u16 name length | name | u32 rows | u32 cols | rows*cols f64
//! u32 CRC32 of everything above
//! ```

use std::fs;
use std::path::Path;

use redf_core::lstm::{HyperParams, ModelParams};
use redf_core::timeseries::{Scaler, ScalerKind};
use thiserror::Error;

pub const MAGIC: &[u8; 4] = b"REDF";
pub const FORMAT_VERSION: u16 = 1;

#[derive(Debug, Error)]
pub enum ArtifactError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("magic check failed: not a model artifact")]
    Magic,
    #[error("version check failed: unsupported format version {0}")]
    Version(u16),
    #[error("shape check failed: {0}")]
    Shape(String),
    #[error("checksum check failed: stored {stored:08x}, computed {computed:08x}")]
    Checksum { stored: u32, computed: u32 },
    #[error("metadata check failed: {0}")]
    Metadata(String),
}

impl ArtifactError {
    /// Name of the check that rejected the file.
    pub fn check(&self) -> &'static str {
        match self {
            ArtifactError::Io { .. } => "io",
            ArtifactError::Magic => "magic",
            ArtifactError::Version(_) => "version",
            ArtifactError::Shape(_) => "shape",
            ArtifactError::Checksum { .. } => "checksum",
            ArtifactError::Metadata(_) => "metadata",
        }
    }
}

fn put_u32(out: &mut Vec<u8>, v: usize) {
    out.extend_from_slice(&u32::try_from(v).expect("dimension fits in u32").to_le_bytes());
}

fn put_f64(out: &mut Vec<u8>, v: f64) {
    out.extend_from_slice(&v.to_le_bytes());
}

pub fn to_bytes(params: &ModelParams, scaler: &Scaler) -> Vec<u8> {
    let h = &params.hyper;
    let mut out = Vec::with_capacity(64 + params.weights.param_count() * 8);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    put_u32(&mut out, h.timesteps);
    put_u32(&mut out, h.features);
    put_u32(&mut out, h.units);
    put_u32(&mut out, h.dense_units);
    put_f64(&mut out, h.dropout);
    put_u32(&mut out, h.horizon);
    put_u32(&mut out, h.epochs);
    put_u32(&mut out, h.batch_size);
    put_f64(&mut out, h.learning_rate);
    out.push(match scaler.kind() {
        ScalerKind::Zscore => 0,
        ScalerKind::Minmax => 1,
    });
    let (a, b) = scaler.raw_params();
    put_f64(&mut out, a);
    put_f64(&mut out, b);
    let tensors = params.weights.tensors();
    put_u32(&mut out, tensors.len());
    for t in tensors {
        out.extend_from_slice(&(t.name.len() as u16).to_le_bytes());
        out.extend_from_slice(t.name.as_bytes());
        put_u32(&mut out, t.rows);
        put_u32(&mut out, t.cols);
        for v in t.data {
            put_f64(&mut out, *v);
        }
    }
    let crc = crc32fast::hash(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8], ArtifactError> {
        let remaining = self.buf.len() - self.pos;
        if n > remaining {
            return Err(ArtifactError::Shape(format!(
                "{what} needs {n} bytes at offset {}, {remaining} left",
                self.pos
            )));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self, what: &str) -> Result<u8, ArtifactError> {
        Ok(self.take(1, what)?[0])
    }

    fn u16(&mut self, what: &str) -> Result<u16, ArtifactError> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().unwrap()))
    }

    fn u32(&mut self, what: &str) -> Result<usize, ArtifactError> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()) as usize)
    }

    fn f64(&mut self, what: &str) -> Result<f64, ArtifactError> {
        Ok(f64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }
}

/// Checks run in order: magic, version, shape (every declared length is
/// backed by bytes and matches the architecture), checksum, metadata.
pub fn from_bytes(bytes: &[u8]) -> Result<(ModelParams, Scaler), ArtifactError> {
    if bytes.len() < 4 || &bytes[..4] != MAGIC {
        return Err(ArtifactError::Magic);
    }
    let mut r = Reader { buf: bytes, pos: 4 };
    let version = r.u16("version")?;
    if version != FORMAT_VERSION {
        return Err(ArtifactError::Version(version));
    }
    let timesteps = r.u32("timesteps")?;
    let features = r.u32("features")?;
    let units = r.u32("units")?;
    let dense_units = r.u32("dense units")?;
    let dropout = r.f64("dropout")?;
    let horizon = r.u32("horizon")?;
    let epochs = r.u32("epochs")?;
    let batch_size = r.u32("batch size")?;
    let learning_rate = r.f64("learning rate")?;
    let kind = r.u8("scaler kind")?;
    let sa = r.f64("scaler")?;
    let sb = r.f64("scaler")?;
    let hyper = HyperParams {
        units,
        dense_units,
        epochs,
        batch_size,
        timesteps,
        features,
        dropout,
        learning_rate,
        horizon,
    };
    // bounded before any allocation sized by it
    let (u, f, y) = (units as u128, features as u128, dense_units as u128);
    let weight_count = 4 * (u * f + u * u + u) + 4 * (2 * u * u + u) + y * u + y;
    if units == 0 || features == 0 || dense_units == 0 || weight_count * 8 > bytes.len() as u128 {
        return Err(ArtifactError::Shape(format!(
            "architecture {units} units × {features} features × {dense_units} outputs does not fit in {} bytes",
            bytes.len()
        )));
    }
    let mut params = ModelParams::zeros(hyper);
    let expected: Vec<(String, usize, usize)> = params
        .weights
        .tensors()
        .into_iter()
        .map(|t| (t.name, t.rows, t.cols))
        .collect();
    let blocks = r.u32("block count")?;
    if blocks != expected.len() {
        return Err(ArtifactError::Shape(format!(
            "{blocks} weight blocks, architecture has {}",
            expected.len()
        )));
    }
    for (k, (name, rows, cols)) in expected.iter().enumerate() {
        let len = r.u16("block name length")? as usize;
        let got = r.take(len, "block name")?;
        if got != name.as_bytes() {
            return Err(ArtifactError::Shape(format!(
                "block {k} is {:?}, expected {name}",
                String::from_utf8_lossy(got)
            )));
        }
        let (br, bc) = (r.u32("block rows")?, r.u32("block cols")?);
        if (br, bc) != (*rows, *cols) {
            return Err(ArtifactError::Shape(format!(
                "{name} is {br}×{bc}, expected {rows}×{cols}"
            )));
        }
        let data = r.take(br * bc * 8, name)?;
        let dest = &mut params.weights.tensors_mut()[k];
        for (d, chunk) in dest.iter_mut().zip(data.chunks_exact(8)) {
            *d = f64::from_le_bytes(chunk.try_into().unwrap());
        }
    }
    let body_end = r.pos;
    let stored = r.u32("checksum")? as u32;
    if r.pos != bytes.len() {
        return Err(ArtifactError::Shape(format!(
            "{} trailing bytes after checksum",
            bytes.len() - r.pos
        )));
    }
    let computed = crc32fast::hash(&bytes[..body_end]);
    if stored != computed {
        return Err(ArtifactError::Checksum { stored, computed });
    }

    let kind = match kind {
        0 => ScalerKind::Zscore,
        1 => ScalerKind::Minmax,
        k => return Err(ArtifactError::Metadata(format!("unknown scaler kind {k}"))),
    };
    let scaler = Scaler::from_raw(kind, sa, sb).map_err(|e| ArtifactError::Metadata(e.to_string()))?;
    params
        .check()
        .map_err(|e| ArtifactError::Metadata(e.to_string()))?;
    if !params.weights.is_finite() {
        return Err(ArtifactError::Metadata("non-finite weight".into()));
    }
    Ok((params, scaler))
}

pub fn save(path: impl AsRef<Path>, params: &ModelParams, scaler: &Scaler) -> Result<(), ArtifactError> {
    let path = path.as_ref();
    fs::write(path, to_bytes(params, scaler)).map_err(|source| ArtifactError::Io {
        path: path.display().to_string(),
        source,
    })
}

pub fn load(path: impl AsRef<Path>) -> Result<(ModelParams, Scaler), ArtifactError> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|source| ArtifactError::Io {
        path: path.display().to_string(),
        source,
    })?;
    from_bytes(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use redf_core::numeric::Rng;

    fn model() -> (ModelParams, Scaler) {
        let hyper = HyperParams {
            units: 3,
            timesteps: 5,
            ..HyperParams::default()
        };
        (
            ModelParams::init(hyper, &mut Rng::new(1)),
            Scaler::zscore(1500.0, 230.0).unwrap(),
        )
    }

    #[test]
    fn round_trip_is_identity() {
        let (p, s) = model();
        let bytes = to_bytes(&p, &s);
        let (q, t) = from_bytes(&bytes).unwrap();
        assert_eq!(p, q);
        assert_eq!(s, t);
        assert_eq!(to_bytes(&q, &t), bytes);
    }

    #[test]
    fn header_checks() {
        let (p, s) = model();
        let mut bytes = to_bytes(&p, &s);
        assert_eq!(&bytes[..4], b"REDF");
        bytes[4] = 9;
        assert!(matches!(from_bytes(&bytes), Err(ArtifactError::Version(9))));
        bytes[0] = b'X';
        assert_eq!(from_bytes(&bytes).unwrap_err().check(), "magic");
    }

    #[test]
    fn flipped_weight_byte_fails_checksum() {
        let (p, s) = model();
        let mut bytes = to_bytes(&p, &s);
        let at = bytes.len() - 8;
        bytes[at] ^= 0x40;
        assert_eq!(from_bytes(&bytes).unwrap_err().check(), "checksum");
    }

    #[test]
    fn truncation_fails_shape() {
        let (p, s) = model();
        let bytes = to_bytes(&p, &s);
        for cut in [6, 20, 60, bytes.len() / 2, bytes.len() - 1] {
            assert_eq!(from_bytes(&bytes[..cut]).unwrap_err().check(), "shape", "cut {cut}");
        }
    }
}
