//! Minimal on-disk tensor container plus the run configuration file.
//!
//! The container is deliberately tiny and language-portable: a magic
//! string, a few `key: value` header lines, a blank line, then the raw
//! little-endian payload. No compression, no alignment games.

use crate::fxp::FxFormat;
use serde::{Deserialize, Serialize};
use std::fs;
use std::io::{Read as _, Write as _};
use std::path::Path;
use thiserror::Error;

pub const MAGIC: &[u8] = b"QTNS1\n";
pub const MAX_DIMS: usize = 4;

#[derive(Debug, Error)]
pub enum TensorIoError {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("bad magic: not a QTNS1 file")]
    BadMagic,
    #[error("bad header: {0}")]
    BadHeader(String),
    #[error("unsupported element kind `{0}`")]
    UnsupportedKind(String),
    #[error("shape/payload mismatch: expected {expected} bytes, found {found}")]
    Truncated { expected: usize, found: usize },
    #[error("too many dimensions: {0} (max {MAX_DIMS})")]
    TooManyDims(usize),
    #[error("element count mismatch: shape wants {want}, data has {have}")]
    CountMismatch { want: usize, have: usize },
    #[error("no scale present for dequantized view")]
    NoScale,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ElementKind {
    F64,
    I32,
    I8,
}

impl ElementKind {
    fn name(self) -> &'static str {
        match self {
            ElementKind::F64 => "f64",
            ElementKind::I32 => "i32",
            ElementKind::I8 => "i8",
        }
    }

    fn size(self) -> usize {
        match self {
            ElementKind::F64 => 8,
            ElementKind::I32 => 4,
            ElementKind::I8 => 1,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum TensorData {
    F64(Vec<f64>),
    I32(Vec<i32>),
    I8(Vec<i8>),
}

impl TensorData {
    pub fn len(&self) -> usize {
        match self {
            TensorData::F64(v) => v.len(),
            TensorData::I32(v) => v.len(),
            TensorData::I8(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn kind(&self) -> ElementKind {
        match self {
            TensorData::F64(_) => ElementKind::F64,
            TensorData::I32(_) => ElementKind::I32,
            TensorData::I8(_) => ElementKind::I8,
        }
    }
}

/// Row-major tensor, up to four dimensions, with an optional scale used
/// when the payload holds quantized codes.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub scale: Option<f64>,
    pub data: TensorData,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: TensorData) -> Result<Self, TensorIoError> {
        Self::with_scale(shape, data, None)
    }

    pub fn with_scale(
        shape: Vec<usize>,
        data: TensorData,
        scale: Option<f64>,
    ) -> Result<Self, TensorIoError> {
        if shape.len() > MAX_DIMS {
            return Err(TensorIoError::TooManyDims(shape.len()));
        }
        let want: usize = shape.iter().product();
        if want != data.len() {
            return Err(TensorIoError::CountMismatch {
                want,
                have: data.len(),
            });
        }
        Ok(Tensor { shape, scale, data })
    }

    pub fn element_count(&self) -> usize {
        self.shape.iter().product()
    }

    /// Payload as f64, applying the scale to integer codes.
    pub fn dequantized(&self) -> Result<Vec<f64>, TensorIoError> {
        match &self.data {
            TensorData::F64(v) => Ok(v.clone()),
            TensorData::I32(v) => {
                let s = self.scale.ok_or(TensorIoError::NoScale)?;
                Ok(v.iter().map(|&c| c as f64 * s).collect())
            }
            TensorData::I8(v) => {
                let s = self.scale.ok_or(TensorIoError::NoScale)?;
                Ok(v.iter().map(|&c| c as f64 * s).collect())
            }
        }
    }

    /// Raw f64 payload ignoring any scale; errors for integer payloads.
    pub fn as_f64(&self) -> Result<&[f64], TensorIoError> {
        match &self.data {
            TensorData::F64(v) => Ok(v),
            other => Err(TensorIoError::UnsupportedKind(other.kind().name().into())),
        }
    }
}

pub fn write_tensor(path: &Path, t: &Tensor) -> Result<(), TensorIoError> {
    let mut buf = Vec::with_capacity(64 + t.element_count() * t.data.kind().size());
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(format!("kind: {}\n", t.data.kind().name()).as_bytes());
    let shape_str: Vec<String> = t.shape.iter().map(|d| d.to_string()).collect();
    buf.extend_from_slice(format!("shape: {}\n", shape_str.join(" ")).as_bytes());
    buf.extend_from_slice(b"order: le\n");
    if let Some(s) = t.scale {
        buf.extend_from_slice(format!("scale: {}\n", s).as_bytes());
    }
    buf.push(b'\n');
    match &t.data {
        TensorData::F64(v) => {
            for x in v {
                buf.extend_from_slice(&x.to_le_bytes());
            }
        }
        TensorData::I32(v) => {
            for x in v {
                buf.extend_from_slice(&x.to_le_bytes());
            }
        }
        TensorData::I8(v) => {
            for x in v {
                buf.push(*x as u8);
            }
        }
    }
    let mut f = fs::File::create(path)?;
    f.write_all(&buf)?;
    Ok(())
}

pub fn read_tensor(path: &Path) -> Result<Tensor, TensorIoError> {
    let mut bytes = Vec::new();
    fs::File::open(path)?.read_to_end(&mut bytes)?;
    if bytes.len() < MAGIC.len() || &bytes[..MAGIC.len()] != MAGIC {
        return Err(TensorIoError::BadMagic);
    }
    let mut pos = MAGIC.len();
    let mut kind: Option<ElementKind> = None;
    let mut shape: Option<Vec<usize>> = None;
    let mut scale: Option<f64> = None;
    loop {
        let end = bytes[pos..]
            .iter()
            .position(|&b| b == b'\n')
            .map(|i| pos + i)
            .ok_or_else(|| TensorIoError::BadHeader("unterminated header".into()))?;
        let line = std::str::from_utf8(&bytes[pos..end])
            .map_err(|_| TensorIoError::BadHeader("non-utf8 header".into()))?;
        pos = end + 1;
        if line.is_empty() {
            break; // blank line terminates the header
        }
        let (key, val) = line
            .split_once(':')
            .ok_or_else(|| TensorIoError::BadHeader(format!("malformed line `{line}`")))?;
        let val = val.trim();
        match key.trim() {
            "kind" => {
                kind = Some(match val {
                    "f64" => ElementKind::F64,
                    "i32" => ElementKind::I32,
                    "i8" => ElementKind::I8,
                    other => return Err(TensorIoError::UnsupportedKind(other.into())),
                })
            }
            "shape" => {
                let dims: Result<Vec<usize>, _> =
                    val.split_whitespace().map(|d| d.parse()).collect();
                shape = Some(dims.map_err(|_| {
                    TensorIoError::BadHeader(format!("bad shape `{val}`"))
                })?);
            }
            "order" => {
                if val != "le" {
                    return Err(TensorIoError::BadHeader(format!("unsupported order `{val}`")));
                }
            }
            "scale" => {
                scale = Some(
                    val.parse()
                        .map_err(|_| TensorIoError::BadHeader(format!("bad scale `{val}`")))?,
                )
            }
            other => return Err(TensorIoError::BadHeader(format!("unknown key `{other}`"))),
        }
    }
    let kind = kind.ok_or_else(|| TensorIoError::BadHeader("missing kind".into()))?;
    let shape = shape.ok_or_else(|| TensorIoError::BadHeader("missing shape".into()))?;
    if shape.len() > MAX_DIMS {
        return Err(TensorIoError::TooManyDims(shape.len()));
    }
    let count: usize = shape.iter().product();
    let payload = &bytes[pos..];
    let expected = count * kind.size();
    if payload.len() != expected {
        return Err(TensorIoError::Truncated {
            expected,
            found: payload.len(),
        });
    }
    let data = match kind {
        ElementKind::F64 => TensorData::F64(
            payload
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect(),
        ),
        ElementKind::I32 => TensorData::I32(
            payload
                .chunks_exact(4)
                .map(|c| i32::from_le_bytes(c.try_into().unwrap()))
                .collect(),
        ),
        ElementKind::I8 => TensorData::I8(payload.iter().map(|&b| b as i8).collect()),
    };
    Tensor::with_scale(shape, data, scale)
}

// ---------------------------------------------------------------------------
// run configuration

pub const VALID_QUANT_BITS: [u32; 5] = [4, 6, 8, 16, 32];

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("config parse error: {0}")]
    Parse(#[from] toml::de::Error),
    #[error("invalid `{field}`: {reason}")]
    InvalidField { field: &'static str, reason: String },
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BlockDims {
    pub tokens: usize,
    pub heads: usize,
    pub model_dim: usize,
    pub mlp_dim: usize,
}

impl Default for BlockDims {
    fn default() -> Self {
        BlockDims {
            tokens: 16,
            heads: 2,
            model_dim: 32,
            mlp_dim: 64,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Fixed-point word width in bits.
    pub fx_total_bits: u32,
    /// Fractional bits within the word.
    pub fx_frac_bits: u32,
    /// Quantization bit width b.
    pub quant_bits: u32,
    /// BOP budget for group allocation; negative means unlimited.
    pub bop_budget: i64,
    /// Candidate group counts offered to the allocator.
    pub group_candidates: Vec<usize>,
    /// Percentile for outlier clamp thresholds, in (50, 100].
    pub clamp_percentile: f64,
    pub seed: u64,
    /// Random vectors per vector-kernel sweep.
    pub sweep_vectors: usize,
    /// Largest random vector length in sweeps.
    pub sweep_max_len: usize,
    pub block: BlockDims,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            fx_total_bits: 32,
            fx_frac_bits: 16,
            quant_bits: 8,
            bop_budget: -1,
            group_candidates: vec![1, 2, 4, 8],
            clamp_percentile: 99.9,
            seed: 42,
            sweep_vectors: 200,
            sweep_max_len: 256,
            block: BlockDims::default(),
        }
    }
}

impl RunConfig {
    pub fn fx_format(&self) -> Result<FxFormat, ConfigError> {
        FxFormat::new(self.fx_total_bits, self.fx_frac_bits).map_err(|e| {
            ConfigError::InvalidField {
                field: "fx_total_bits/fx_frac_bits",
                reason: e.to_string(),
            }
        })
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        self.fx_format()?;
        if !VALID_QUANT_BITS.contains(&self.quant_bits) {
            return Err(ConfigError::InvalidField {
                field: "quant_bits",
                reason: format!("{} not in {:?}", self.quant_bits, VALID_QUANT_BITS),
            });
        }
        if !(self.clamp_percentile > 50.0 && self.clamp_percentile <= 100.0) {
            return Err(ConfigError::InvalidField {
                field: "clamp_percentile",
                reason: format!("{} outside (50, 100]", self.clamp_percentile),
            });
        }
        if self.group_candidates.is_empty() {
            return Err(ConfigError::InvalidField {
                field: "group_candidates",
                reason: "must not be empty".into(),
            });
        }
        for &g in &self.group_candidates {
            if g == 0 || !g.is_power_of_two() {
                return Err(ConfigError::InvalidField {
                    field: "group_candidates",
                    reason: format!("{g} is not a positive power of two"),
                });
            }
        }
        if self.block.tokens == 0
            || self.block.heads == 0
            || self.block.model_dim == 0
            || self.block.mlp_dim == 0
        {
            return Err(ConfigError::InvalidField {
                field: "block",
                reason: "all dimensions must be positive".into(),
            });
        }
        if self.block.model_dim % self.block.heads != 0 {
            return Err(ConfigError::InvalidField {
                field: "block",
                reason: format!(
                    "model_dim {} not divisible by heads {}",
                    self.block.model_dim, self.block.heads
                ),
            });
        }
        Ok(())
    }

    /// Largest magnitude code for the configured bit width: `2^(b-1) - 1`.
    pub fn q_max(&self) -> i64 {
        (1i64 << (self.quant_bits - 1)) - 1
    }
}

pub fn load_config(path: &Path) -> Result<RunConfig, ConfigError> {
    let text = fs::read_to_string(path)?;
    parse_config(&text)
}

pub fn parse_config(text: &str) -> Result<RunConfig, ConfigError> {
    let cfg: RunConfig = toml::from_str(text)?;
    cfg.validate()?;
    Ok(cfg)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn f64_round_trip_bit_identical() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let data: Vec<f64> = (0..3 * 4 * 5).map(|_| rng.gen_range(-10.0..10.0)).collect();
        let t = Tensor::new(vec![3, 4, 5], TensorData::F64(data)).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.qtns");
        write_tensor(&p, &t).unwrap();
        let back = read_tensor(&p).unwrap();
        assert_eq!(t, back);
    }

    #[test]
    fn int_kinds_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let t32 = Tensor::new(vec![2, 3], TensorData::I32(vec![-1, 0, 1, i32::MAX, i32::MIN, 7]))
            .unwrap();
        let p = dir.path().join("b.qtns");
        write_tensor(&p, &t32).unwrap();
        assert_eq!(read_tensor(&p).unwrap(), t32);

        let t8 = Tensor::with_scale(
            vec![4],
            TensorData::I8(vec![-128, -1, 0, 127]),
            Some(0.02),
        )
        .unwrap();
        let p8 = dir.path().join("c.qtns");
        write_tensor(&p8, &t8).unwrap();
        let back = read_tensor(&p8).unwrap();
        assert_eq!(back, t8);
        let deq = back.dequantized().unwrap();
        assert_eq!(deq, vec![-128.0 * 0.02, -0.02, 0.0, 127.0 * 0.02]);
    }

    #[test]
    fn truncated_payload_is_a_framing_error() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("t.qtns");
        let t = Tensor::new(vec![8], TensorData::F64(vec![1.0; 8])).unwrap();
        write_tensor(&p, &t).unwrap();
        let mut bytes = fs::read(&p).unwrap();
        bytes.truncate(bytes.len() - 5);
        fs::write(&p, &bytes).unwrap();
        assert!(matches!(
            read_tensor(&p),
            Err(TensorIoError::Truncated { .. })
        ));
    }

    #[test]
    fn bad_magic_and_bad_kind_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.qtns");
        fs::write(&p, b"NOPE1\nkind: f64\nshape: 0\n\n").unwrap();
        assert!(matches!(read_tensor(&p), Err(TensorIoError::BadMagic)));
        fs::write(&p, b"QTNS1\nkind: f16\nshape: 0\n\n").unwrap();
        assert!(matches!(
            read_tensor(&p),
            Err(TensorIoError::UnsupportedKind(_))
        ));
    }

    #[test]
    fn five_dims_rejected() {
        assert!(matches!(
            Tensor::new(vec![1, 1, 1, 1, 1], TensorData::F64(vec![1.0])),
            Err(TensorIoError::TooManyDims(5))
        ));
    }

    #[test]
    fn empty_config_yields_defaults() {
        let cfg = parse_config("").unwrap();
        assert_eq!(cfg.fx_total_bits, 32);
        assert_eq!(cfg.fx_frac_bits, 16);
        assert_eq!(cfg.quant_bits, 8);
        assert_eq!(cfg.clamp_percentile, 99.9);
        assert_eq!(cfg.group_candidates, vec![1, 2, 4, 8]);
    }

    #[test]
    fn q_max_matches_bit_width() {
        let cfg = parse_config("quant_bits = 4").unwrap();
        assert_eq!(cfg.q_max(), 7);
        assert_eq!(RunConfig::default().q_max(), 127);
    }

    #[test]
    fn invalid_values_name_the_field() {
        let err = parse_config("clamp_percentile = 40.0").unwrap_err();
        assert!(err.to_string().contains("clamp_percentile"), "{err}");
        let err = parse_config("quant_bits = 5").unwrap_err();
        assert!(err.to_string().contains("quant_bits"), "{err}");
        let err = parse_config("group_candidates = [3]").unwrap_err();
        assert!(err.to_string().contains("group_candidates"), "{err}");
    }

    #[test]
    fn unknown_keys_rejected() {
        assert!(parse_config("bogus_key = 1").is_err());
    }

    #[test]
    fn config_round_trips_through_toml() {
        let cfg = RunConfig::default();
        let text = toml::to_string(&cfg).unwrap();
        let back = parse_config(&text).unwrap();
        assert_eq!(toml::to_string(&back).unwrap(), text);
    }
}
