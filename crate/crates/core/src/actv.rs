//! `.actv` activation dump format.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic "ACTV" | version u32 (=1) | kind u8 | header_json_len u32 | header_json
//! record*:
//!   id_len u32 | id bytes | label u8 | token_count u32
//!   (tok_len u32 | tok bytes) * token_count
//!   row_count u32 | row_count * hidden_dim * f32 (row-major)
//! ```
//!
//! `header_json` carries `model_id`, `num_layers`, `hidden_dim`,
//! `layer_index` and `sample_count`. LAST_TOKEN records hold one row per
//! layer (hidden state at the final token); TOKEN_LEVEL records hold one row
//! per token, all from layer `layer_index`.
//!
//! Reading is streaming: only one record is materialized at a time.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{self, BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::Label;

pub const MAGIC: [u8; 4] = *b"ACTV";
pub const VERSION: u32 = 1;
const UNLABELED: u8 = 255;

#[derive(Debug, Error)]
pub enum ActvError {
    #[error("bad magic {0:?}, expected \"ACTV\"")]
    BadMagic([u8; 4]),
    #[error("unsupported format version {0}")]
    UnsupportedVersion(u32),
    #[error("corrupt header: {0}")]
    CorruptHeader(String),
    #[error("corrupt record {index}: {reason}")]
    CorruptRecord { index: usize, reason: String },
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("i/o failure: {0}")]
    Io(#[from] io::Error),
}

pub type Result<T> = std::result::Result<T, ActvError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Kind {
    LastToken,
    TokenLevel,
}

impl Kind {
    fn code(self) -> u8 {
        match self {
            Kind::LastToken => 0,
            Kind::TokenLevel => 1,
        }
    }

    fn from_code(c: u8) -> Option<Kind> {
        match c {
            0 => Some(Kind::LastToken),
            1 => Some(Kind::TokenLevel),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Header {
    pub kind: Kind,
    pub model_id: String,
    pub num_layers: usize,
    pub hidden_dim: usize,
    /// Only meaningful for [`Kind::TokenLevel`].
    pub layer_index: usize,
    pub sample_count: usize,
}

/// The JSON part of the header (kind lives in its own byte).
#[derive(Serialize, Deserialize)]
struct HeaderJson {
    model_id: String,
    num_layers: usize,
    hidden_dim: usize,
    layer_index: usize,
    sample_count: usize,
}

impl Header {
    pub fn last_token(model_id: impl Into<String>, num_layers: usize, hidden_dim: usize, sample_count: usize) -> Self {
        Header {
            kind: Kind::LastToken,
            model_id: model_id.into(),
            num_layers,
            hidden_dim,
            layer_index: 0,
            sample_count,
        }
    }

    pub fn token_level(
        model_id: impl Into<String>,
        num_layers: usize,
        hidden_dim: usize,
        layer_index: usize,
        sample_count: usize,
    ) -> Self {
        Header {
            kind: Kind::TokenLevel,
            model_id: model_id.into(),
            num_layers,
            hidden_dim,
            layer_index,
            sample_count,
        }
    }

    fn validate(&self) -> std::result::Result<(), String> {
        if self.num_layers == 0 {
            return Err("num_layers must be >= 1".into());
        }
        if self.hidden_dim == 0 {
            return Err("hidden_dim must be >= 1".into());
        }
        if self.kind == Kind::TokenLevel && self.layer_index >= self.num_layers {
            return Err(format!(
                "layer_index {} out of range for {} layers",
                self.layer_index, self.num_layers
            ));
        }
        Ok(())
    }

    /// Row count a record with `token_count` tokens must have.
    pub fn expected_rows(&self, token_count: usize) -> usize {
        match self.kind {
            Kind::LastToken => self.num_layers,
            Kind::TokenLevel => token_count,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleRecord {
    pub sample_id: String,
    /// `None` is stored as 255.
    pub label: Option<Label>,
    pub tokens: Vec<String>,
    pub rows: usize,
    /// `rows * hidden_dim` values, row-major.
    pub activations: Vec<f32>,
}

impl SampleRecord {
    pub fn row(&self, i: usize) -> &[f32] {
        let d = self.activations.len() / self.rows.max(1);
        &self.activations[i * d..(i + 1) * d]
    }

    pub fn row_iter(&self) -> impl Iterator<Item = &[f32]> {
        let d = (self.activations.len() / self.rows.max(1)).max(1);
        self.activations.chunks_exact(d).take(self.rows)
    }

    fn check(&self, header: &Header) -> std::result::Result<(), String> {
        let want_rows = header.expected_rows(self.tokens.len());
        if self.rows != want_rows {
            return Err(format!(
                "{:?} record {:?} has {} rows, expected {}",
                header.kind, self.sample_id, self.rows, want_rows
            ));
        }
        if self.activations.len() != self.rows * header.hidden_dim {
            return Err(format!(
                "record {:?} has {} values, expected {} x {}",
                self.sample_id,
                self.activations.len(),
                self.rows,
                header.hidden_dim
            ));
        }
        if let Some(pos) = self.activations.iter().position(|v| !v.is_finite()) {
            return Err(format!("record {:?} has non-finite value at {pos}", self.sample_id));
        }
        Ok(())
    }
}

fn label_code(l: Option<Label>) -> u8 {
    l.map_or(UNLABELED, Label::as_u8)
}

fn to_u32(n: usize, what: &str) -> Result<u32> {
    u32::try_from(n).map_err(|_| ActvError::DimensionMismatch(format!("{what} {n} exceeds u32")))
}

/// Streaming writer. The header's `sample_count` must equal the number of
/// records written before [`ActivationWriter::finish`].
pub struct ActivationWriter<W: Write> {
    out: W,
    header: Header,
    written: usize,
}

impl ActivationWriter<BufWriter<File>> {
    pub fn create(path: impl AsRef<Path>, header: Header) -> Result<Self> {
        let file = File::create(path)?;
        Self::new(BufWriter::new(file), header)
    }
}

impl<W: Write> ActivationWriter<W> {
    pub fn new(mut out: W, header: Header) -> Result<Self> {
        header.validate().map_err(ActvError::DimensionMismatch)?;
        let json = serde_json::to_vec(&HeaderJson {
            model_id: header.model_id.clone(),
            num_layers: header.num_layers,
            hidden_dim: header.hidden_dim,
            layer_index: header.layer_index,
            sample_count: header.sample_count,
        })
        .map_err(|e| ActvError::CorruptHeader(e.to_string()))?;
        out.write_all(&MAGIC)?;
        out.write_all(&VERSION.to_le_bytes())?;
        out.write_all(&[header.kind.code()])?;
        out.write_all(&to_u32(json.len(), "header length")?.to_le_bytes())?;
        out.write_all(&json)?;
        Ok(ActivationWriter {
            out,
            header,
            written: 0,
        })
    }

    pub fn header(&self) -> &Header {
        &self.header
    }

    pub fn write_record(&mut self, rec: &SampleRecord) -> Result<()> {
        if self.written >= self.header.sample_count {
            return Err(ActvError::DimensionMismatch(format!(
                "more records than sample_count {}",
                self.header.sample_count
            )));
        }
        rec.check(&self.header).map_err(ActvError::DimensionMismatch)?;

        let w = &mut self.out;
        w.write_all(&to_u32(rec.sample_id.len(), "id length")?.to_le_bytes())?;
        w.write_all(rec.sample_id.as_bytes())?;
        w.write_all(&[label_code(rec.label)])?;
        w.write_all(&to_u32(rec.tokens.len(), "token count")?.to_le_bytes())?;
        for tok in &rec.tokens {
            w.write_all(&to_u32(tok.len(), "token length")?.to_le_bytes())?;
            w.write_all(tok.as_bytes())?;
        }
        w.write_all(&to_u32(rec.rows, "row count")?.to_le_bytes())?;
        let mut buf = Vec::with_capacity(rec.activations.len() * 4);
        for v in &rec.activations {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        w.write_all(&buf)?;
        self.written += 1;
        Ok(())
    }

    pub fn finish(mut self) -> Result<W> {
        if self.written != self.header.sample_count {
            return Err(ActvError::DimensionMismatch(format!(
                "header declares {} samples, {} written",
                self.header.sample_count, self.written
            )));
        }
        self.out.flush()?;
        Ok(self.out)
    }
}

/// Writes a complete file.
pub fn write_file<'a, I>(path: impl AsRef<Path>, header: &Header, records: I) -> Result<()>
where
    I: IntoIterator<Item = &'a SampleRecord>,
{
    let mut w = ActivationWriter::create(path, header.clone())?;
    for r in records {
        w.write_record(r)?;
    }
    w.finish()?;
    Ok(())
}

/// Streaming reader; iterate to get records in file order.
pub struct ActivationReader<R: Read> {
    input: R,
    header: Header,
    /// Bytes left after the header, when known. Guards length fields.
    remaining: Option<u64>,
    next_index: usize,
    failed: bool,
}

impl ActivationReader<BufReader<File>> {
    pub fn open(path: impl AsRef<Path>) -> Result<Self> {
        let file = File::open(path)?;
        let len = file.metadata()?.len();
        Self::with_len(BufReader::new(file), Some(len))
    }
}

fn header_err(e: io::Error) -> ActvError {
    if e.kind() == io::ErrorKind::UnexpectedEof {
        ActvError::CorruptHeader("file truncated inside header".into())
    } else {
        ActvError::Io(e)
    }
}

impl<R: Read> ActivationReader<R> {
    pub fn new(input: R) -> Result<Self> {
        Self::with_len(input, None)
    }

    fn with_len(mut input: R, total_len: Option<u64>) -> Result<Self> {
        let mut magic = [0u8; 4];
        input.read_exact(&mut magic).map_err(header_err)?;
        if magic != MAGIC {
            return Err(ActvError::BadMagic(magic));
        }
        let mut b4 = [0u8; 4];
        input.read_exact(&mut b4).map_err(header_err)?;
        let version = u32::from_le_bytes(b4);
        if version != VERSION {
            return Err(ActvError::UnsupportedVersion(version));
        }
        let mut b1 = [0u8; 1];
        input.read_exact(&mut b1).map_err(header_err)?;
        let kind = Kind::from_code(b1[0])
            .ok_or_else(|| ActvError::CorruptHeader(format!("unknown kind {}", b1[0])))?;
        input.read_exact(&mut b4).map_err(header_err)?;
        let json_len = u32::from_le_bytes(b4) as u64;
        if let Some(total) = total_len {
            if 13 + json_len > total {
                return Err(ActvError::CorruptHeader("header length exceeds file size".into()));
            }
        }
        let mut json = Vec::new();
        (&mut input).take(json_len).read_to_end(&mut json)?;
        if json.len() as u64 != json_len {
            return Err(ActvError::CorruptHeader("file truncated inside header".into()));
        }
        let hj: HeaderJson =
            serde_json::from_slice(&json).map_err(|e| ActvError::CorruptHeader(e.to_string()))?;
        let header = Header {
            kind,
            model_id: hj.model_id,
            num_layers: hj.num_layers,
            hidden_dim: hj.hidden_dim,
            layer_index: hj.layer_index,
            sample_count: hj.sample_count,
        };
        header.validate().map_err(ActvError::CorruptHeader)?;
        Ok(ActivationReader {
            input,
            header,
            remaining: total_len.map(|t| t - 13 - json_len),
            next_index: 0,
            failed: false,
        })
    }

    pub fn header(&self) -> &Header {
        &self.header
    }

    fn corrupt(&self, reason: impl Into<String>) -> ActvError {
        ActvError::CorruptRecord {
            index: self.next_index,
            reason: reason.into(),
        }
    }

    fn read_bytes(&mut self, n: u64, what: &str) -> Result<Vec<u8>> {
        if let Some(rem) = self.remaining {
            if n > rem {
                return Err(self.corrupt(format!("truncated while reading {what}")));
            }
        }
        let mut buf = Vec::new();
        (&mut self.input).take(n).read_to_end(&mut buf)?;
        if buf.len() as u64 != n {
            return Err(self.corrupt(format!("truncated while reading {what}")));
        }
        if let Some(rem) = self.remaining.as_mut() {
            *rem -= n;
        }
        Ok(buf)
    }

    fn read_u32(&mut self, what: &str) -> Result<u32> {
        let b = self.read_bytes(4, what)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn read_string(&mut self, what: &str) -> Result<String> {
        let len = self.read_u32(what)? as u64;
        let bytes = self.read_bytes(len, what)?;
        String::from_utf8(bytes).map_err(|_| self.corrupt(format!("{what} is not UTF-8")))
    }

    fn read_record(&mut self) -> Result<SampleRecord> {
        let sample_id = self.read_string("sample id")?;
        let code = self.read_bytes(1, "label")?[0];
        let label = match code {
            UNLABELED => None,
            c => Some(Label::try_from(c).map_err(|e| self.corrupt(e))?),
        };
        let token_count = self.read_u32("token count")? as usize;
        let mut tokens = Vec::with_capacity(token_count.min(1 << 16));
        for _ in 0..token_count {
            tokens.push(self.read_string("token")?);
        }
        let rows = self.read_u32("row count")? as usize;
        let want = self.header.expected_rows(token_count);
        if rows != want {
            return Err(self.corrupt(format!("row count {rows}, expected {want}")));
        }
        let n_values = rows as u64 * self.header.hidden_dim as u64;
        let raw = self.read_bytes(n_values * 4, "activations")?;
        let activations: Vec<f32> = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        if let Some(pos) = activations.iter().position(|v| !v.is_finite()) {
            return Err(self.corrupt(format!("non-finite activation at value {pos}")));
        }
        Ok(SampleRecord {
            sample_id,
            label,
            tokens,
            rows,
            activations,
        })
    }

    fn check_trailing(&mut self) -> Result<()> {
        let mut probe = [0u8; 1];
        match self.input.read(&mut probe)? {
            0 => Ok(()),
            _ => Err(self.corrupt("trailing bytes after the last record")),
        }
    }
}

impl<R: Read> Iterator for ActivationReader<R> {
    type Item = Result<SampleRecord>;

    fn next(&mut self) -> Option<Self::Item> {
        if self.failed {
            return None;
        }
        if self.next_index == self.header.sample_count {
            // Run the trailing-bytes check exactly once.
            let check = self.check_trailing();
            self.next_index += 1;
            return match check {
                Ok(()) => None,
                Err(e) => {
                    self.failed = true;
                    Some(Err(e))
                }
            };
        }
        if self.next_index > self.header.sample_count {
            return None;
        }
        let r = self.read_record();
        match &r {
            Ok(_) => self.next_index += 1,
            Err(_) => self.failed = true,
        }
        Some(r)
    }
}

/// Opens a file and returns its header plus the record stream.
pub fn read_file(path: impl AsRef<Path>) -> Result<ActivationReader<BufReader<File>>> {
    ActivationReader::open(path)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TokenCountStats {
    pub min: usize,
    pub max: usize,
    pub mean: f64,
    pub total: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Summary {
    pub kind: Kind,
    pub model_id: String,
    pub num_layers: usize,
    pub hidden_dim: usize,
    pub layer_index: Option<usize>,
    pub sample_count: usize,
    /// Keys: "0" control, "1" AD, "255" unlabeled.
    pub label_histogram: BTreeMap<u8, usize>,
    pub token_count_stats: Option<TokenCountStats>,
}

/// Streams the whole file, validating every record.
pub fn summarize(path: impl AsRef<Path>) -> Result<Summary> {
    let reader = read_file(path)?;
    summarize_reader(reader)
}

pub fn summarize_reader<R: Read>(reader: ActivationReader<R>) -> Result<Summary> {
    let h = reader.header().clone();
    let mut hist = BTreeMap::new();
    let mut n = 0usize;
    let (mut min, mut max, mut total) = (usize::MAX, 0usize, 0usize);
    for rec in reader {
        let rec = rec?;
        n += 1;
        *hist.entry(label_code(rec.label)).or_insert(0) += 1;
        let t = rec.tokens.len();
        min = min.min(t);
        max = max.max(t);
        total += t;
    }
    Ok(Summary {
        kind: h.kind,
        model_id: h.model_id,
        num_layers: h.num_layers,
        hidden_dim: h.hidden_dim,
        layer_index: (h.kind == Kind::TokenLevel).then_some(h.layer_index),
        sample_count: n,
        label_histogram: hist,
        token_count_stats: (n > 0).then(|| TokenCountStats {
            min,
            max,
            mean: total as f64 / n as f64,
            total,
        }),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(id: &str, label: Option<Label>, tokens: &[&str], rows: usize, d: usize) -> SampleRecord {
        SampleRecord {
            sample_id: id.into(),
            label,
            tokens: tokens.iter().map(|s| s.to_string()).collect(),
            rows,
            activations: (0..rows * d).map(|i| i as f32 * 0.25 - 1.0).collect(),
        }
    }

    #[test]
    fn round_trip_last_token() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.actv");
        let h = Header::last_token("llama", 16, 2048, 2);
        let recs = vec![
            rec("s1", Some(Label::Ad), &["The", " boy"], 16, 2048),
            rec("s2", None, &[], 16, 2048),
        ];
        write_file(&path, &h, &recs).unwrap();
        let r = read_file(&path).unwrap();
        assert_eq!(r.header(), &h);
        let back: Vec<_> = r.collect::<Result<_>>().unwrap();
        assert_eq!(back, recs);
    }

    #[test]
    fn empty_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("e.actv");
        write_file(&path, &Header::last_token("m", 2, 3, 0), &[]).unwrap();
        let s = summarize(&path).unwrap();
        assert_eq!(s.sample_count, 0);
        assert!(s.label_histogram.is_empty());
        assert!(s.token_count_stats.is_none());
    }

    #[test]
    fn wrong_row_count_rejected() {
        let mut w = ActivationWriter::new(Vec::new(), Header::last_token("m", 16, 4, 1)).unwrap();
        let err = w.write_record(&rec("x", Some(Label::Ad), &["a"], 3, 4)).unwrap_err();
        assert!(matches!(err, ActvError::DimensionMismatch(_)));
    }

    #[test]
    fn sample_count_enforced() {
        let w = ActivationWriter::new(Vec::new(), Header::last_token("m", 1, 1, 1)).unwrap();
        assert!(matches!(w.finish(), Err(ActvError::DimensionMismatch(_))));
        let mut w = ActivationWriter::new(Vec::new(), Header::last_token("m", 1, 1, 0)).unwrap();
        assert!(w.write_record(&rec("x", None, &[], 1, 1)).is_err());
    }

    #[test]
    fn nan_rejected_on_write() {
        let mut r = rec("x", None, &["a"], 1, 2);
        r.activations[1] = f32::NAN;
        let mut w = ActivationWriter::new(Vec::new(), Header::token_level("m", 2, 2, 1, 1)).unwrap();
        assert!(w.write_record(&r).is_err());
    }

    #[test]
    fn token_level_layer_range() {
        assert!(ActivationWriter::new(Vec::new(), Header::token_level("m", 2, 2, 2, 0)).is_err());
    }

    fn bytes_of(h: &Header, recs: &[SampleRecord]) -> Vec<u8> {
        let mut w = ActivationWriter::new(Vec::new(), h.clone()).unwrap();
        for r in recs {
            w.write_record(r).unwrap();
        }
        w.finish().unwrap()
    }

    #[test]
    fn bad_magic_and_version() {
        let mut b = bytes_of(&Header::last_token("m", 1, 1, 0), &[]);
        b[..4].copy_from_slice(b"XXXX");
        assert!(matches!(ActivationReader::new(&b[..]), Err(ActvError::BadMagic(_))));
        let mut b = bytes_of(&Header::last_token("m", 1, 1, 0), &[]);
        b[4] = 2;
        assert!(matches!(
            ActivationReader::new(&b[..]),
            Err(ActvError::UnsupportedVersion(2))
        ));
    }

    #[test]
    fn truncated_and_trailing() {
        let h = Header::token_level("m", 4, 3, 1, 2);
        let recs = [rec("a", Some(Label::Control), &["x", "y"], 2, 3), rec("b", Some(Label::Ad), &["z"], 1, 3)];
        let b = bytes_of(&h, &recs);

        let cut = &b[..b.len() - 5];
        let out: Vec<_> = ActivationReader::new(cut).unwrap().collect();
        assert!(out[0].is_ok());
        assert!(matches!(out[1], Err(ActvError::CorruptRecord { index: 1, .. })));
        assert_eq!(out.len(), 2);

        let mut extra = b.clone();
        extra.push(0);
        let out: Vec<_> = ActivationReader::new(&extra[..]).unwrap().collect();
        assert_eq!(out.len(), 3);
        assert!(matches!(out[2], Err(ActvError::CorruptRecord { index: 2, .. })));
    }

    #[test]
    fn nonfinite_on_read() {
        let h = Header::last_token("m", 1, 2, 1);
        let mut b = bytes_of(&h, &[rec("a", None, &[], 1, 2)]);
        let n = b.len();
        b[n - 4..].copy_from_slice(&f32::INFINITY.to_le_bytes());
        let out: Vec<_> = ActivationReader::new(&b[..]).unwrap().collect();
        assert!(matches!(out[0], Err(ActvError::CorruptRecord { .. })));
    }

    #[test]
    fn histogram_counts_labels() {
        let h = Header::last_token("m", 1, 1, 3);
        let recs = [
            rec("a", Some(Label::Ad), &["t"], 1, 1),
            rec("b", Some(Label::Ad), &["t", "u", "v"], 1, 1),
            rec("c", Some(Label::Control), &[], 1, 1),
        ];
        let b = bytes_of(&h, &recs);
        let s = summarize_reader(ActivationReader::new(&b[..]).unwrap()).unwrap();
        assert_eq!(s.label_histogram, BTreeMap::from([(0, 1), (1, 2)]));
        let st = s.token_count_stats.unwrap();
        assert_eq!((st.min, st.max, st.total), (0, 3, 4));
    }
}
