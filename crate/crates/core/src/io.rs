//! Binary matrix and quantized-tensor files, weight checkpoints, report
//! envelopes, JSON/CSV emission and config parsing.
//!
//! All binary formats are little-endian and start with a 12-byte magic and a
//! `u32` version.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;
use std::time::{SystemTime, UNIX_EPOCH};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::engine::MetisWeight;
use crate::error::{Error, Result};
use crate::fp4::QuantizedBlockTensor;
use crate::matrix::DenseMatrix;
use crate::precision::{e4m3_decode, e4m3_encode, EmulatedFormat, RoundingMode};

pub const MATRIX_MAGIC: &[u8; 12] = b"SPECQUANTMAT";
pub const QUANTIZED_MAGIC: &[u8; 12] = b"SPECQUANTQ4B";
pub const CHECKPOINT_MAGIC: &[u8; 12] = b"SPECQUANTCKP";
pub const FORMAT_VERSION: u32 = 1;
pub const SCHEMA_VERSION: u32 = 1;

/// Bounds-checked little-endian reader over a byte slice.
struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn new(buf: &'a [u8]) -> Self {
        Self { buf, pos: 0 }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).ok_or_else(|| Error::Format("length overflow".into()))?;
        if end > self.buf.len() {
            return Err(Error::Truncated {
                expected: end,
                found: self.buf.len(),
            });
        }
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn usize(&mut self) -> Result<usize> {
        usize::try_from(self.u64()?).map_err(|_| Error::Format("dimension exceeds usize".into()))
    }

    fn header(&mut self, magic: &[u8; 12]) -> Result<()> {
        if self.take(12)? != magic {
            return Err(Error::Format(format!(
                "magic mismatch, expected {}",
                String::from_utf8_lossy(magic)
            )));
        }
        match self.u32()? {
            FORMAT_VERSION => Ok(()),
            v => Err(Error::UnsupportedVersion(v)),
        }
    }

    fn finish(&self) -> Result<()> {
        if self.pos != self.buf.len() {
            return Err(Error::Format(format!(
                "{} trailing bytes",
                self.buf.len() - self.pos
            )));
        }
        Ok(())
    }
}

fn header(out: &mut Vec<u8>, magic: &[u8; 12]) {
    out.extend_from_slice(magic);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
}

fn checked_len(rows: usize, cols: usize, width: usize) -> Result<usize> {
    rows.checked_mul(cols)
        .and_then(|n| n.checked_mul(width))
        .ok_or_else(|| Error::Format(format!("{rows}x{cols} payload overflows")))
}

fn append_matrix(out: &mut Vec<u8>, m: &DenseMatrix) {
    out.extend_from_slice(&(m.rows() as u64).to_le_bytes());
    out.extend_from_slice(&(m.cols() as u64).to_le_bytes());
    out.push(m.format().tag());
    for v in m.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

fn parse_matrix(c: &mut Cursor) -> Result<DenseMatrix> {
    let rows = c.usize()?;
    let cols = c.usize()?;
    let format = EmulatedFormat::from_tag(c.u8()?)?;
    let bytes = c.take(checked_len(rows, cols, 8)?)?;
    let data = bytes
        .chunks_exact(8)
        .map(|b| f64::from_le_bytes(b.try_into().expect("8 bytes")))
        .collect();
    DenseMatrix::from_vec(rows, cols, data)?.with_format(format)
}

/// Serialized matrix: header, `u64` rows, `u64` cols, format tag, `f64` payload.
pub fn encode_matrix(m: &DenseMatrix) -> Vec<u8> {
    let mut out = Vec::with_capacity(33 + 8 * m.data().len());
    header(&mut out, MATRIX_MAGIC);
    append_matrix(&mut out, m);
    out
}

pub fn decode_matrix(bytes: &[u8]) -> Result<DenseMatrix> {
    let mut c = Cursor::new(bytes);
    c.header(MATRIX_MAGIC)?;
    let m = parse_matrix(&mut c)?;
    c.finish()?;
    Ok(m)
}

pub fn write_matrix(path: impl AsRef<Path>, m: &DenseMatrix) -> Result<()> {
    fs::write(path, encode_matrix(m))?;
    Ok(())
}

pub fn read_matrix(path: impl AsRef<Path>) -> Result<DenseMatrix> {
    decode_matrix(&fs::read(path)?)
}

/// Serialized quantized tensor: header, shape, `u32` block size, rounding
/// tag, one E4M3 byte per block scale, then E2M1 codes two per byte (low
/// nibble holds the even index).
pub fn encode_quantized(q: &QuantizedBlockTensor) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    header(&mut out, QUANTIZED_MAGIC);
    out.extend_from_slice(&(q.rows() as u64).to_le_bytes());
    out.extend_from_slice(&(q.cols() as u64).to_le_bytes());
    let block = u32::try_from(q.block_size())
        .map_err(|_| Error::Format("block size exceeds u32".into()))?;
    out.extend_from_slice(&block.to_le_bytes());
    out.push(q.mode().tag());
    for &s in q.scales() {
        out.push(e4m3_encode(s)?);
    }
    for pair in q.codes().chunks(2) {
        let lo = pair[0] & 0xf;
        let hi = pair.get(1).map_or(0, |c| c & 0xf);
        out.push(lo | (hi << 4));
    }
    Ok(out)
}

pub fn decode_quantized(bytes: &[u8]) -> Result<QuantizedBlockTensor> {
    let mut c = Cursor::new(bytes);
    c.header(QUANTIZED_MAGIC)?;
    let rows = c.usize()?;
    let cols = c.usize()?;
    let block_size = c.u32()? as usize;
    let mode = RoundingMode::from_tag(c.u8()?)?;
    if block_size == 0 {
        return Err(Error::Format("block size 0".into()));
    }
    let n_scales = checked_len(rows, cols.div_ceil(block_size), 1)?;
    let scales = c.take(n_scales)?.iter().map(|&b| e4m3_decode(b)).collect();
    let n = checked_len(rows, cols, 1)?;
    let packed = c.take(n.div_ceil(2))?;
    c.finish()?;
    let codes = (0..n)
        .map(|i| {
            let b = packed[i / 2];
            if i % 2 == 0 {
                b & 0xf
            } else {
                b >> 4
            }
        })
        .collect();
    QuantizedBlockTensor::from_parts(rows, cols, block_size, mode, codes, scales)
}

pub fn write_quantized(path: impl AsRef<Path>, q: &QuantizedBlockTensor) -> Result<()> {
    fs::write(path, encode_quantized(q)?)?;
    Ok(())
}

pub fn read_quantized(path: impl AsRef<Path>) -> Result<QuantizedBlockTensor> {
    decode_quantized(&fs::read(path)?)
}

/// Weight branches with the training position they were saved at.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub weight: MetisWeight,
    pub seed: u64,
    pub step: u64,
}

pub fn encode_checkpoint(ckpt: &Checkpoint) -> Result<Vec<u8>> {
    let w = &ckpt.weight;
    w.validate()?;
    let mut out = Vec::new();
    header(&mut out, CHECKPOINT_MAGIC);
    out.extend_from_slice(&(w.rank() as u64).to_le_bytes());
    out.extend_from_slice(&ckpt.seed.to_le_bytes());
    out.extend_from_slice(&ckpt.step.to_le_bytes());
    append_matrix(&mut out, &w.u);
    append_matrix(&mut out, &DenseMatrix::from_vec(w.s.len(), 1, w.s.clone())?);
    append_matrix(&mut out, &w.v);
    append_matrix(&mut out, &w.residual);
    Ok(out)
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<Checkpoint> {
    let mut c = Cursor::new(bytes);
    c.header(CHECKPOINT_MAGIC)?;
    let k = c.usize()?;
    let seed = c.u64()?;
    let step = c.u64()?;
    let u = parse_matrix(&mut c)?;
    let s = parse_matrix(&mut c)?;
    let v = parse_matrix(&mut c)?;
    let residual = parse_matrix(&mut c)?;
    c.finish()?;
    if s.cols() != 1 && s.rows() != 0 {
        return Err(Error::Format("singular values must be a column".into()));
    }
    let weight = MetisWeight::from_parts(u, s.into_data(), v, residual)?;
    if weight.rank() != k {
        return Err(Error::Format(format!(
            "header rank {k} disagrees with stored rank {}",
            weight.rank()
        )));
    }
    Ok(Checkpoint { weight, seed, step })
}

pub fn save_checkpoint(path: impl AsRef<Path>, ckpt: &Checkpoint) -> Result<()> {
    fs::write(path, encode_checkpoint(ckpt)?)?;
    Ok(())
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    decode_checkpoint(&fs::read(path)?)
}

/// Headerless CSV, one matrix row per line.
pub fn write_matrix_csv<W: Write>(out: W, m: &DenseMatrix) -> Result<()> {
    m.ensure_finite("csv export")?;
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(out);
    for i in 0..m.rows() {
        w.write_record(m.row(i).iter().map(|v| v.to_string()))?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_matrix_csv<R: Read>(input: R) -> Result<DenseMatrix> {
    let mut r = csv::ReaderBuilder::new()
        .has_headers(false)
        .trim(csv::Trim::All)
        .from_reader(input);
    let mut rows = Vec::new();
    for (i, rec) in r.records().enumerate() {
        let rec = rec?;
        let row = rec
            .iter()
            .enumerate()
            .map(|(j, f)| {
                f.parse::<f64>()
                    .map_err(|e| Error::Format(format!("row {i}, column {j}: {e}")))
            })
            .collect::<Result<Vec<_>>>()?;
        rows.push(row);
    }
    let m = DenseMatrix::from_rows(&rows)?;
    m.ensure_finite("csv import")?;
    Ok(m)
}

/// Reads a matrix from the binary format, or from CSV when the extension is `.csv`.
pub fn load_matrix_auto(path: impl AsRef<Path>) -> Result<DenseMatrix> {
    let path = path.as_ref();
    match path.extension().and_then(|e| e.to_str()) {
        Some(ext) if ext.eq_ignore_ascii_case("csv") => read_matrix_csv(fs::File::open(path)?),
        _ => read_matrix(path),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReportFormat {
    Json,
    Csv,
}

/// A flat table: named columns of equal length.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Series {
    pub columns: Vec<(String, Vec<f64>)>,
}

impl Series {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with(mut self, name: impl Into<String>, values: Vec<f64>) -> Self {
        self.columns.push((name.into(), values));
        self
    }
}

/// A serializable record with a finiteness check and an optional flat view.
pub trait Report: Serialize {
    /// Short identifier stored in the envelope.
    fn kind(&self) -> &'static str;

    /// Every floating-point field with its path.
    fn visit_floats(&self, f: &mut dyn FnMut(&str, f64));

    /// Flat series for CSV output; `None` when the record is not flat.
    fn series(&self) -> Option<Series> {
        None
    }

    fn check_finite(&self) -> Result<()> {
        let mut bad = None;
        self.visit_floats(&mut |name, v| {
            if bad.is_none() && !v.is_finite() {
                bad = Some(name.to_string());
            }
        });
        match bad {
            Some(name) => Err(Error::NonFiniteField(name)),
            None => Ok(()),
        }
    }
}

/// Visits each element of `values` as `name[i]`.
pub fn visit_slice(f: &mut dyn FnMut(&str, f64), name: &str, values: &[f64]) {
    for (i, &v) in values.iter().enumerate() {
        f(&format!("{name}[{i}]"), v);
    }
}

/// Common metadata wrapped around every emitted report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportEnvelope<T> {
    pub schema_version: u32,
    pub tool_version: String,
    pub kind: String,
    /// Seconds since the Unix epoch.
    pub timestamp: u64,
    /// SHA-256 of the canonical JSON of the generating config.
    pub config_hash: String,
    pub payload: T,
}

impl<T: Report> ReportEnvelope<T> {
    pub fn new(payload: T, config: &impl Serialize) -> Result<Self> {
        Ok(Self {
            schema_version: SCHEMA_VERSION,
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            kind: payload.kind().to_string(),
            timestamp: SystemTime::now()
                .duration_since(UNIX_EPOCH)
                .map(|d| d.as_secs())
                .unwrap_or(0),
            config_hash: config_hash(config)?,
            payload,
        })
    }
}

pub fn config_hash(config: &impl Serialize) -> Result<String> {
    let canonical = serde_json::to_vec(&serde_json::to_value(config)?)?;
    let digest = Sha256::digest(&canonical);
    Ok(digest.iter().map(|b| format!("{b:02x}")).collect())
}

/// Renders a report. JSON wraps it in an envelope; CSV emits its flat series.
pub fn emit_report<T: Report>(
    report: &T,
    config: &impl Serialize,
    format: ReportFormat,
) -> Result<Vec<u8>> {
    report.check_finite()?;
    match format {
        ReportFormat::Json => {
            let env = ReportEnvelope::new(report, config)?;
            let mut out = serde_json::to_vec_pretty(&env)?;
            out.push(b'\n');
            Ok(out)
        }
        ReportFormat::Csv => {
            let series = report.series().ok_or_else(|| {
                Error::InvalidArgument(format!("{} reports have no flat series", report.kind()))
            })?;
            series_csv(&series)
        }
    }
}

/// CSV with a header row; columns of unequal length leave trailing cells empty.
pub fn series_csv(series: &Series) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(series.columns.iter().map(|(n, _)| n.as_str()))?;
    let len = series.columns.iter().map(|(_, v)| v.len()).max().unwrap_or(0);
    for i in 0..len {
        w.write_record(
            series
                .columns
                .iter()
                .map(|(_, v)| v.get(i).map(|x| x.to_string()).unwrap_or_default()),
        )?;
    }
    w.into_inner()
        .map_err(|e| Error::Io(std::io::Error::other(e.to_string())))
}

/// Parses a JSON envelope back into its payload type.
pub fn parse_report<T: DeserializeOwned>(bytes: &[u8]) -> Result<ReportEnvelope<T>> {
    let env: ReportEnvelope<T> = serde_json::from_slice(bytes)?;
    if env.schema_version != SCHEMA_VERSION {
        return Err(Error::UnsupportedVersion(env.schema_version));
    }
    Ok(env)
}

impl<T: Report> Report for &T {
    fn kind(&self) -> &'static str {
        (*self).kind()
    }
    fn visit_floats(&self, f: &mut dyn FnMut(&str, f64)) {
        (*self).visit_floats(f)
    }
    fn series(&self) -> Option<Series> {
        (*self).series()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ConfigFormat {
    Toml,
    Json,
}

pub fn parse_config<T: DeserializeOwned>(text: &str, format: ConfigFormat) -> Result<T> {
    match format {
        ConfigFormat::Toml => toml::from_str(text).map_err(|e| Error::Config(e.to_string())),
        ConfigFormat::Json => serde_json::from_str(text).map_err(|e| Error::Config(e.to_string())),
    }
}

/// Loads a config, choosing the parser by extension (`.json`, otherwise TOML).
pub fn load_config<T: DeserializeOwned>(path: impl AsRef<Path>) -> Result<T> {
    let path = path.as_ref();
    let text = fs::read_to_string(path)
        .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
    let format = match path.extension().and_then(|e| e.to_str()) {
        Some(ext) if ext.eq_ignore_ascii_case("json") => ConfigFormat::Json,
        _ => ConfigFormat::Toml,
    };
    parse_config(&text, format)
}
