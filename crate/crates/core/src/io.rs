//! File formats.
//!
//! Embeddings (`EMB1`):
//!
//! ```text
//! b"EMB1" | u32 LE count N | u32 LE dim d | N lines "<id>\n" | N*d f32 LE
//! ```
//!
//! Frame sequences (`FEA1`):
//!
//! ```text
//! b"FEA1" | u32 LE count N | u32 LE dim d | N lines "<id>\n"
//!         | N u32 LE frame counts | (sum of counts)*d f32 LE
//! ```
//!
//! Labels are `id<TAB>label` lines, trials are `1|0 enroll test` lines, and
//! scored trials are `enroll<TAB>test<TAB>1|0<TAB>score` lines.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::embedding::{EmbeddingMatrix, Matrix, PseudoLabelMap, Trial, TrialList, UtteranceId};
use crate::error::{Error, Result};
use crate::features::FeatureSet;

pub const EMBEDDING_MAGIC: &[u8; 4] = b"EMB1";
pub const FEATURE_MAGIC: &[u8; 4] = b"FEA1";

/// Writes to a sibling temp file and renames it over `path`.
pub fn atomic_write(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = std::path::PathBuf::from(tmp);
    fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

pub(crate) struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    pub(crate) fn new(buf: &'a [u8]) -> Self {
        Self { buf, pos: 0 }
    }

    pub(crate) fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::TruncatedData(format!(
                "need {n} bytes for {what}, {} left",
                self.buf.len() - self.pos
            )));
        }
        let out = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    pub(crate) fn u32(&mut self, what: &str) -> Result<u32> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    pub(crate) fn line(&mut self) -> Result<&'a str> {
        let rest = &self.buf[self.pos..];
        let end = rest
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| Error::TruncatedData("unterminated id line".into()))?;
        self.pos += end + 1;
        std::str::from_utf8(&rest[..end]).map_err(|_| Error::TruncatedData("id is not UTF-8".into()))
    }

    pub(crate) fn f32s(&mut self, n: usize, what: &str) -> Result<Vec<f32>> {
        let bytes = self.take(n * 4, what)?;
        Ok(bytes
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect())
    }

    pub(crate) fn expect_magic(&mut self, magic: &'static [u8; 4]) -> Result<()> {
        let expected = std::str::from_utf8(magic).unwrap_or("?");
        match self.buf.get(..4) {
            Some(m) if m == magic => {
                self.pos = 4;
                Ok(())
            }
            _ => Err(Error::BadMagic { expected }),
        }
    }

    pub(crate) fn header(&mut self) -> Result<(usize, usize)> {
        let n = self.u32("count")? as usize;
        let d = self.u32("dim")? as usize;
        if d == 0 {
            return Err(Error::DimMismatch {
                expected: 1,
                got: 0,
            });
        }
        Ok((n, d))
    }

    pub(crate) fn ids(&mut self, n: usize) -> Result<Vec<UtteranceId>> {
        (0..n)
            .map(|_| self.line().and_then(UtteranceId::new))
            .collect()
    }

    pub(crate) fn finish(&self) -> Result<()> {
        if self.pos != self.buf.len() {
            return Err(Error::TruncatedData(format!(
                "{} trailing bytes",
                self.buf.len() - self.pos
            )));
        }
        Ok(())
    }
}

fn put_header(out: &mut Vec<u8>, magic: &[u8; 4], n: usize, d: usize, ids: &[UtteranceId]) {
    out.extend_from_slice(magic);
    out.extend_from_slice(&(n as u32).to_le_bytes());
    out.extend_from_slice(&(d as u32).to_le_bytes());
    for id in ids {
        out.extend_from_slice(id.as_str().as_bytes());
        out.push(b'\n');
    }
}

pub fn encode_embeddings(m: &EmbeddingMatrix) -> Vec<u8> {
    let mut out = Vec::with_capacity(12 + m.raw().len() * 4 + m.len() * 16);
    put_header(&mut out, EMBEDDING_MAGIC, m.len(), m.dim(), m.ids());
    for v in m.raw() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn decode_embeddings(bytes: &[u8]) -> Result<EmbeddingMatrix> {
    let mut r = Reader { buf: bytes, pos: 0 };
    r.expect_magic(EMBEDDING_MAGIC)?;
    let (n, d) = r.header()?;
    let ids = r.ids(n)?;
    let data = r.f32s(n * d, "embedding rows")?;
    r.finish()?;
    EmbeddingMatrix::new(ids, d, data)
}

pub fn save_embeddings(m: &EmbeddingMatrix, path: &Path) -> Result<()> {
    atomic_write(path, &encode_embeddings(m))
}

pub fn load_embeddings(path: &Path) -> Result<EmbeddingMatrix> {
    decode_embeddings(&read_bytes(path)?)
}

pub fn encode_features(f: &FeatureSet) -> Vec<u8> {
    let mut out = Vec::new();
    put_header(&mut out, FEATURE_MAGIC, f.len(), f.dim(), f.ids());
    for seq in f.sequences() {
        out.extend_from_slice(&(seq.rows() as u32).to_le_bytes());
    }
    for seq in f.sequences() {
        for &v in seq.as_slice() {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    out
}

pub fn decode_features(bytes: &[u8]) -> Result<FeatureSet> {
    let mut r = Reader { buf: bytes, pos: 0 };
    r.expect_magic(FEATURE_MAGIC)?;
    let (n, d) = r.header()?;
    let ids = r.ids(n)?;
    let counts = (0..n)
        .map(|_| r.u32("frame count").map(|c| c as usize))
        .collect::<Result<Vec<_>>>()?;
    let mut seqs = Vec::with_capacity(n);
    for &c in &counts {
        let vals = r.f32s(c * d, "frames")?;
        seqs.push(Matrix::from_vec(
            c,
            d,
            vals.into_iter().map(f64::from).collect(),
        )?);
    }
    r.finish()?;
    FeatureSet::new(ids, d, seqs)
}

pub fn save_features(f: &FeatureSet, path: &Path) -> Result<()> {
    atomic_write(path, &encode_features(f))
}

pub fn load_features(path: &Path) -> Result<FeatureSet> {
    decode_features(&read_bytes(path)?)
}

/// Loads either format; an `EMB1` file becomes one-frame sequences.
pub fn load_sequences(path: &Path) -> Result<FeatureSet> {
    let bytes = read_bytes(path)?;
    if bytes.starts_with(FEATURE_MAGIC) {
        return decode_features(&bytes);
    }
    let m = decode_embeddings(&bytes)?;
    let seqs = (0..m.len())
        .map(|i| Matrix::from_vec(1, m.dim(), m.row_f64(i)))
        .collect::<Result<Vec<_>>>()?;
    FeatureSet::new(m.ids().to_vec(), m.dim(), seqs)
}

fn data_lines(text: &str) -> impl Iterator<Item = (usize, &str)> {
    text.lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l.trim_end_matches('\r')))
        .filter(|(_, l)| !l.trim().is_empty() && !l.starts_with('#'))
}

fn parse_err(line: usize, msg: impl Into<String>) -> Error {
    Error::Parse {
        line,
        msg: msg.into(),
    }
}

pub fn format_labels(m: &PseudoLabelMap) -> String {
    let mut s = String::new();
    for (id, l) in m.iter() {
        let _ = writeln!(s, "{id}\t{l}");
    }
    s
}

pub fn parse_labels(text: &str, iteration: usize) -> Result<PseudoLabelMap> {
    let mut map = BTreeMap::new();
    for (n, line) in data_lines(text) {
        let (id, label) = line
            .split_once('\t')
            .ok_or_else(|| parse_err(n, "expected id<TAB>label"))?;
        let label: usize = label
            .trim()
            .parse()
            .map_err(|_| parse_err(n, format!("bad label {label:?}")))?;
        let id = UtteranceId::new(id)?;
        if map.insert(id.clone(), label).is_some() {
            return Err(Error::DuplicateId(id.to_string()));
        }
    }
    PseudoLabelMap::new(map, iteration)
}

pub fn save_labels(m: &PseudoLabelMap, path: &Path) -> Result<()> {
    atomic_write(path, format_labels(m).as_bytes())
}

pub fn load_labels(path: &Path, iteration: usize) -> Result<PseudoLabelMap> {
    parse_labels(&read_text(path)?, iteration)
}

pub fn format_trials(t: &TrialList) -> String {
    let mut s = String::new();
    for row in t.rows() {
        let _ = writeln!(s, "{} {} {}", u8::from(row.is_target), row.enroll, row.test);
    }
    s
}

pub fn parse_trials(text: &str) -> Result<TrialList> {
    let mut rows = Vec::new();
    for (n, line) in data_lines(text) {
        let parts: Vec<&str> = line.split_whitespace().collect();
        let [flag, enroll, test] = parts[..] else {
            return Err(parse_err(n, "expected `1|0 enroll test`"));
        };
        let is_target = match flag {
            "1" => true,
            "0" => false,
            other => return Err(parse_err(n, format!("bad target flag {other:?}"))),
        };
        rows.push(Trial {
            is_target,
            enroll: UtteranceId::new(enroll)?,
            test: UtteranceId::new(test)?,
        });
    }
    TrialList::new(rows)
}

pub fn load_trials(path: &Path) -> Result<TrialList> {
    parse_trials(&read_text(path)?)
}

pub fn save_trials(t: &TrialList, path: &Path) -> Result<()> {
    atomic_write(path, format_trials(t).as_bytes())
}

/// `id<TAB>value` rows, e.g. per-utterance losses.
pub fn parse_scalar_tsv(text: &str) -> Result<Vec<(UtteranceId, f64)>> {
    data_lines(text)
        .map(|(n, line)| {
            let (id, v) = line
                .split_once('\t')
                .ok_or_else(|| parse_err(n, "expected id<TAB>value"))?;
            let v: f64 = v
                .trim()
                .parse()
                .map_err(|_| parse_err(n, format!("bad number {v:?}")))?;
            Ok((UtteranceId::new(id)?, v))
        })
        .collect()
}

pub fn load_scalar_tsv(path: &Path) -> Result<Vec<(UtteranceId, f64)>> {
    parse_scalar_tsv(&read_text(path)?)
}

/// Rows of a scored trial file.
#[derive(Clone, Debug, PartialEq)]
pub struct ScoredRow {
    pub enroll: UtteranceId,
    pub test: UtteranceId,
    pub is_target: bool,
    pub score: f64,
}

pub fn format_scored(rows: &[ScoredRow]) -> String {
    let mut s = String::new();
    for r in rows {
        let _ = writeln!(
            s,
            "{}\t{}\t{}\t{:.17e}",
            r.enroll,
            r.test,
            u8::from(r.is_target),
            r.score
        );
    }
    s
}

pub fn parse_scored(text: &str) -> Result<Vec<ScoredRow>> {
    data_lines(text)
        .map(|(n, line)| {
            let parts: Vec<&str> = line.split('\t').collect();
            let [enroll, test, flag, score] = parts[..] else {
                return Err(parse_err(n, "expected enroll<TAB>test<TAB>1|0<TAB>score"));
            };
            let is_target = match flag {
                "1" => true,
                "0" => false,
                other => return Err(parse_err(n, format!("bad target flag {other:?}"))),
            };
            let score: f64 = score
                .trim()
                .parse()
                .map_err(|_| parse_err(n, format!("bad score {score:?}")))?;
            Ok(ScoredRow {
                enroll: UtteranceId::new(enroll)?,
                test: UtteranceId::new(test)?,
                is_target,
                score,
            })
        })
        .collect()
}
