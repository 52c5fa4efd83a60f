//! Binary encoder checkpoints.
//!
//! Layout, little-endian throughout:
//!
//! ```text
//! "IMOC" | version u32 | config_len u32 | config UTF-8
//! | tensor_count u32
//! | per tensor: name_len u32 | name UTF-8 | dtype u8 | rank u32 | dims u64 x rank | values
//! ```
//!
//! The config text is the run config followed by `encoder.*` lines that pin
//! the exact encoder geometry.

use std::path::Path;

use imoc_diffmath::{DType, Real, Tensor};

use crate::config::RunConfig;
use crate::error::{CoreError, Result};
use crate::models::{Encoder, EncoderConfig, Variant};

pub const MAGIC: &[u8; 4] = b"IMOC";
pub const VERSION: u32 = 1;

fn encoder_lines(e: &EncoderConfig) -> String {
    format!(
        "encoder.variant = \"{}\"\nencoder.ndf = {}\nencoder.nrkhs = {}\nencoder.ndepth = {}\nencoder.input = [{}, {}, {}]\nencoder.projection = {}\n",
        e.variant.name(),
        e.ndf,
        e.nrkhs,
        e.ndepth,
        e.input[0],
        e.input[1],
        e.input[2],
        e.projection
    )
}

fn parse_encoder_lines(lines: &[&str]) -> Result<EncoderConfig> {
    let bad = |detail: String| CoreError::Config {
        key: "encoder".into(),
        detail,
    };
    let table: toml::Table = lines
        .join("\n")
        .parse()
        .map_err(|e: toml::de::Error| bad(e.message().to_string()))?;
    let enc = table
        .get("encoder")
        .and_then(|v| v.as_table())
        .ok_or_else(|| bad("missing encoder settings".into()))?;
    let int = |k: &str| -> Result<usize> {
        enc.get(k)
            .and_then(|v| v.as_integer())
            .and_then(|i| usize::try_from(i).ok())
            .ok_or_else(|| bad(format!("missing or invalid encoder.{k}")))
    };
    let variant = enc
        .get("variant")
        .and_then(|v| v.as_str())
        .and_then(Variant::parse)
        .ok_or_else(|| bad("missing or invalid encoder.variant".into()))?;
    let input: Vec<usize> = enc
        .get("input")
        .and_then(|v| v.as_array())
        .map(|a| a.iter().filter_map(|v| v.as_integer()).filter_map(|i| usize::try_from(i).ok()).collect())
        .unwrap_or_default();
    if input.len() != 3 {
        return Err(bad("encoder.input must hold three extents".into()));
    }
    Ok(EncoderConfig {
        variant,
        ndf: int("ndf")?,
        nrkhs: int("nrkhs")?,
        ndepth: int("ndepth")?,
        input: [input[0], input[1], input[2]],
        projection: enc
            .get("projection")
            .and_then(|v| v.as_bool())
            .ok_or_else(|| bad("missing encoder.projection".into()))?,
    })
}

/// Serializes `enc` and `cfg`.
pub fn encode_checkpoint<T: Real>(enc: &Encoder<T>, cfg: &RunConfig) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    let text = format!("{}{}", cfg.to_text(), encoder_lines(enc.config()));
    out.extend_from_slice(&(text.len() as u32).to_le_bytes());
    out.extend_from_slice(text.as_bytes());
    out.extend_from_slice(&(enc.params().len() as u32).to_le_bytes());
    for (name, t) in enc.param_names().iter().zip(enc.params()) {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(T::DTYPE.tag());
        out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
        for &d in t.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        out.extend(T::to_le_bytes_vec(t.data()));
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn err(&self, detail: impl Into<String>) -> CoreError {
        CoreError::Format {
            what: "checkpoint",
            offset: self.pos,
            detail: detail.into(),
        }
    }

    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(self.err(format!(
                "truncated {what}: need {n} bytes, {} left",
                self.bytes.len() - self.pos
            )));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        let b = self.take(8, what)?;
        let mut a = [0u8; 8];
        a.copy_from_slice(b);
        Ok(u64::from_le_bytes(a))
    }

    fn utf8(&mut self, n: usize, what: &str) -> Result<&'a str> {
        let start = self.pos;
        let b = self.take(n, what)?;
        std::str::from_utf8(b).map_err(|e| CoreError::Format {
            what: "checkpoint",
            offset: start + e.valid_up_to(),
            detail: format!("{what} is not UTF-8"),
        })
    }
}

fn read_values<T: Real>(bytes: &[u8], dtype: DType) -> Vec<T> {
    match dtype {
        DType::F32 => bytes
            .chunks_exact(4)
            .map(|c| T::from_f64_lossy(f32::from_le_chunk(c) as f64))
            .collect(),
        // `as f32` on an f64 rounds to nearest, so at most half an ulp moves.
        DType::F64 => bytes
            .chunks_exact(8)
            .map(|c| T::from_f64_lossy(f64::from_le_chunk(c)))
            .collect(),
    }
}

/// Parses a checkpoint, converting values to `T`.
pub fn decode_checkpoint<T: Real>(bytes: &[u8]) -> Result<(Encoder<T>, RunConfig)> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4, "magic")? != MAGIC {
        return Err(CoreError::Format {
            what: "checkpoint",
            offset: 0,
            detail: "bad magic".into(),
        });
    }
    let version_at = r.pos;
    let version = r.u32("version")?;
    if version != VERSION {
        return Err(CoreError::Format {
            what: "checkpoint",
            offset: version_at,
            detail: format!("unsupported version {version}"),
        });
    }
    let len = r.u32("config length")? as usize;
    let text = r.utf8(len, "config")?;
    let (enc_lines, run_lines): (Vec<&str>, Vec<&str>) =
        text.lines().partition(|l| l.trim_start().starts_with("encoder."));
    let cfg = RunConfig::parse(&run_lines.join("\n"))?;
    let ecfg = parse_encoder_lines(&enc_lines)?;
    let count = r.u32("tensor count")? as usize;
    let mut named = Vec::with_capacity(count.min(1024));
    for _ in 0..count {
        let nlen = r.u32("name length")? as usize;
        let name = r.utf8(nlen, "tensor name")?.to_string();
        let tag_at = r.pos;
        let tag = r.take(1, "dtype")?[0];
        let dtype = DType::from_tag(tag).ok_or_else(|| CoreError::Format {
            what: "checkpoint",
            offset: tag_at,
            detail: format!("unknown dtype tag {tag}"),
        })?;
        let rank = r.u32("rank")? as usize;
        if rank > 8 {
            return Err(r.err(format!("rank {rank} of {name} is implausible")));
        }
        let mut dims = Vec::with_capacity(rank);
        for _ in 0..rank {
            dims.push(r.u64("dims")? as usize);
        }
        let n = dims
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .and_then(|n| n.checked_mul(dtype.size_of()))
            .ok_or_else(|| r.err(format!("dims {dims:?} of {name} overflow")))?;
        let raw = r.take(n, "tensor values")?;
        let t = Tensor::from_vec(dims, read_values::<T>(raw, dtype))?;
        named.push((name, t));
    }
    if r.pos != bytes.len() {
        return Err(r.err(format!("{} trailing bytes", bytes.len() - r.pos)));
    }
    Ok((Encoder::from_params(ecfg, named)?, cfg))
}

/// Writes the checkpoint atomically: a sibling temp file is renamed over
/// `path`, so an interrupted save leaves the previous file intact.
pub fn checkpoint_save<T: Real>(enc: &Encoder<T>, cfg: &RunConfig, path: &Path) -> Result<()> {
    let bytes = encode_checkpoint(enc, cfg);
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = std::path::PathBuf::from(tmp);
    std::fs::write(&tmp, bytes).map_err(|e| CoreError::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| CoreError::io(path, e))
}

pub fn checkpoint_load<T: Real>(path: &Path) -> Result<(Encoder<T>, RunConfig)> {
    let bytes = std::fs::read(path).map_err(|e| CoreError::io(path, e))?;
    decode_checkpoint(&bytes)
}
