//! R-peak detection and beat tokenization.
//!
//! Peaks are detected once on the mean of leads I and II and shared by all
//! twelve leads, so every lead yields the same number of beats with the same
//! timing.

use std::collections::BTreeSet;
use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::signal::{repair_nonfinite, resample, scale_range, EcgRecord, ScaleScope, N_LEADS};

pub const DEFAULT_N_BEATS: usize = 15;
pub const DEFAULT_BEAT_LEN: usize = 64;

/// Seconds before the R peak covered by a beat window.
pub const PRE_R: f64 = 0.3;
/// Seconds after the R peak covered by a beat window.
pub const POST_R: f64 = 0.4;

const REFRACTORY_S: f64 = 0.25;
const INTEGRATION_S: f64 = 0.12;
const THRESHOLD_WINDOW_S: f64 = 2.0;
const THRESHOLD_FRACTION: f64 = 0.5;

/// Returns strictly increasing R-peak sample indices.
pub fn detect_r_peaks(rec: &EcgRecord) -> Result<Vec<usize>> {
    if !rec.is_finite() {
        return Err(Error::NonFinite(format!(
            "record {} before peak detection",
            rec.record_id
        )));
    }
    let fs = rec.sample_rate as f64;
    let n = rec.n_samples();
    let x: Vec<f64> = rec
        .lead(0)
        .iter()
        .zip(rec.lead(1))
        .map(|(&a, &b)| (a as f64 + b as f64) / 2.0)
        .collect();

    let mut energy = vec![0.0f64; n];
    for i in 1..n {
        let d = x[i] - x[i - 1];
        energy[i] = d * d;
    }

    let w = ((INTEGRATION_S * fs).round() as usize).max(1);
    let integrated = centered_mean(&energy, w);

    let half = ((THRESHOLD_WINDOW_S * fs / 2.0).round() as usize).max(1);
    let running_max = centered_max(&integrated, half);

    let mut candidates: Vec<(usize, f64)> = Vec::new();
    let mut i = 0;
    while i < n {
        let above = |k: usize| integrated[k] > 0.0 && integrated[k] > THRESHOLD_FRACTION * running_max[k];
        if !above(i) {
            i += 1;
            continue;
        }
        let start = i;
        while i < n && above(i) {
            i += 1;
        }
        let end = i; // exclusive
        let lo = start.saturating_sub(w / 2);
        let hi = (end + w / 2).min(n);
        let baseline = x[lo..hi].iter().sum::<f64>() / (hi - lo) as f64;
        let (peak, amp) = (lo..hi)
            .map(|k| (k, (x[k] - baseline).abs()))
            .fold((lo, f64::NEG_INFINITY), |best, c| if c.1 > best.1 { c } else { best });
        candidates.push((peak, amp));
    }

    // Strongest candidates claim their refractory neighbourhood first.
    let refractory = (REFRACTORY_S * fs).round() as usize;
    candidates.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    let mut peaks: Vec<usize> = Vec::new();
    for (p, _) in candidates {
        if peaks.iter().all(|&q| p.abs_diff(q) >= refractory.max(1)) {
            peaks.push(p);
        }
    }
    if peaks.is_empty() {
        return Err(Error::NoHeartbeats);
    }
    peaks.sort_unstable();
    Ok(peaks)
}

fn centered_mean(x: &[f64], w: usize) -> Vec<f64> {
    let n = x.len();
    let mut prefix = vec![0.0f64; n + 1];
    for i in 0..n {
        prefix[i + 1] = prefix[i] + x[i];
    }
    let left = w / 2;
    (0..n)
        .map(|i| {
            let a = i.saturating_sub(left);
            let b = (a + w).min(n);
            (prefix[b] - prefix[a]) / (b - a) as f64
        })
        .collect()
}

fn centered_max(x: &[f64], half: usize) -> Vec<f64> {
    let n = x.len();
    // Monotone deque sliding maximum over [i - half, i + half].
    let mut out = vec![0.0; n];
    let mut dq: std::collections::VecDeque<usize> = std::collections::VecDeque::new();
    let mut next = 0;
    for (i, o) in out.iter_mut().enumerate() {
        let hi = (i + half).min(n - 1);
        while next <= hi {
            while dq.back().is_some_and(|&b| x[b] <= x[next]) {
                dq.pop_back();
            }
            dq.push_back(next);
            next += 1;
        }
        let lo = i.saturating_sub(half);
        while dq.front().is_some_and(|&f| f < lo) {
            dq.pop_front();
        }
        *o = x[*dq.front().expect("window nonempty")];
    }
    out
}

/// A record cut into `n_beats` beat tokens of `beat_len` samples per lead.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenizedRecord {
    pub record_id: String,
    pub n_beats: usize,
    pub beat_len: usize,
    /// `beats[(lead * n_beats + j) * beat_len + t]`, millivolts.
    pub beats: Vec<f32>,
    /// Per-beat validity, shared by all leads. Padding beats are `false`.
    pub valid: Vec<bool>,
    /// R-peak sample index of each beat; `None` for padding beats.
    pub beat_times: Vec<Option<usize>>,
    pub labels: BTreeSet<String>,
}

impl TokenizedRecord {
    pub fn beat(&self, lead: usize, j: usize) -> &[f32] {
        let o = (lead * self.n_beats + j) * self.beat_len;
        &self.beats[o..o + self.beat_len]
    }

    pub fn beat_mut(&mut self, lead: usize, j: usize) -> &mut [f32] {
        let o = (lead * self.n_beats + j) * self.beat_len;
        &mut self.beats[o..o + self.beat_len]
    }

    pub fn is_valid(&self, _lead: usize, j: usize) -> bool {
        self.valid[j]
    }

    pub fn n_valid(&self) -> usize {
        self.valid.iter().filter(|&&v| v).count()
    }
}

/// Tokenizes with peaks from [`detect_r_peaks`].
pub fn tokenize(rec: &EcgRecord, n_beats: usize, beat_len: usize) -> Result<TokenizedRecord> {
    let peaks = detect_r_peaks(rec)?;
    tokenize_at(rec, &peaks, n_beats, beat_len)
}

/// Cuts `[r - 0.3 s, r + 0.4 s)` around each of the first `n_beats` peaks and
/// linearly resamples it to `beat_len` samples. Parts of a window that fall
/// outside the record read as zero.
pub fn tokenize_at(rec: &EcgRecord, peaks: &[usize], n_beats: usize, beat_len: usize) -> Result<TokenizedRecord> {
    if n_beats == 0 || beat_len == 0 {
        return Err(Error::Config("n_beats and beat_len must be at least 1".into()));
    }
    let fs = rec.sample_rate as f64;
    let pre = (PRE_R * fs).round() as i64;
    let len = ((PRE_R + POST_R) * fs).round().max(1.0) as i64;
    let step = if beat_len > 1 {
        (len - 1) as f64 / (beat_len - 1) as f64
    } else {
        0.0
    };
    let offset0 = if beat_len > 1 { 0.0 } else { (len - 1) as f64 / 2.0 };
    let n = rec.n_samples() as i64;

    let used = &peaks[..peaks.len().min(n_beats)];
    let mut beats = vec![0.0f32; N_LEADS * n_beats * beat_len];
    for lead in 0..N_LEADS {
        let src = rec.lead(lead);
        let get = |k: i64| {
            if k < 0 || k >= n {
                0.0
            } else {
                src[k as usize] as f64
            }
        };
        for (j, &r) in used.iter().enumerate() {
            let start = r as i64 - pre;
            let o = (lead * n_beats + j) * beat_len;
            for t in 0..beat_len {
                let pos = start as f64 + offset0 + t as f64 * step;
                let i0 = pos.floor();
                let frac = pos - i0;
                let i0 = i0 as i64;
                let v = if frac == 0.0 {
                    get(i0)
                } else {
                    get(i0) * (1.0 - frac) + get(i0 + 1) * frac
                };
                beats[o + t] = v as f32;
            }
        }
    }
    let mut valid = vec![false; n_beats];
    let mut beat_times = vec![None; n_beats];
    for (j, &r) in used.iter().enumerate() {
        valid[j] = true;
        beat_times[j] = Some(r);
    }
    Ok(TokenizedRecord {
        record_id: rec.record_id.clone(),
        n_beats,
        beat_len,
        beats,
        valid,
        beat_times,
        labels: rec.labels.clone(),
    })
}

/// A tokenized dataset with its class vocabulary.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenDataset {
    pub n_beats: usize,
    pub beat_len: usize,
    pub classes: Vec<String>,
    pub records: Vec<TokenizedRecord>,
}

pub const TOKENS_MAGIC: &[u8; 4] = b"CHTK";
pub const TOKENS_VERSION: u32 = 1;

impl TokenDataset {
    pub fn new(n_beats: usize, beat_len: usize, classes: Vec<String>, records: Vec<TokenizedRecord>) -> Self {
        Self {
            n_beats,
            beat_len,
            classes,
            records,
        }
    }

    /// Multi-hot label vector of a record against `classes`.
    pub fn label_vector(&self, rec: &TokenizedRecord) -> Vec<bool> {
        self.classes.iter().map(|c| rec.labels.contains(c)).collect()
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut b = Vec::new();
        b.extend_from_slice(TOKENS_MAGIC);
        b.extend_from_slice(&TOKENS_VERSION.to_le_bytes());
        b.extend_from_slice(&(self.records.len() as u32).to_le_bytes());
        b.extend_from_slice(
            &u16::try_from(self.n_beats)
                .map_err(|_| Error::Format("n_beats exceeds u16".into()))?
                .to_le_bytes(),
        );
        b.extend_from_slice(
            &u16::try_from(self.beat_len)
                .map_err(|_| Error::Format("beat_len exceeds u16".into()))?
                .to_le_bytes(),
        );
        b.extend_from_slice(&(self.classes.len() as u16).to_le_bytes());
        for c in &self.classes {
            b.extend_from_slice(&(c.len() as u16).to_le_bytes());
            b.extend_from_slice(c.as_bytes());
        }
        for r in &self.records {
            if r.n_beats != self.n_beats || r.beat_len != self.beat_len {
                return Err(Error::Shape(format!(
                    "record {} has a different token shape",
                    r.record_id
                )));
            }
            b.extend_from_slice(&(r.record_id.len() as u32).to_le_bytes());
            b.extend_from_slice(r.record_id.as_bytes());
            b.extend(pack_bits(&self.label_vector(r)));
            let valid_bits: Vec<bool> = (0..N_LEADS).flat_map(|_| r.valid.iter().copied()).collect();
            b.extend(pack_bits(&valid_bits));
            for t in &r.beat_times {
                let v = t.map_or(u32::MAX, |x| x as u32);
                b.extend_from_slice(&v.to_le_bytes());
            }
            for x in &r.beats {
                b.extend_from_slice(&x.to_le_bytes());
            }
        }
        Ok(b)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut rd = ByteReader { buf: bytes, pos: 0 };
        if rd.take(4)? != TOKENS_MAGIC {
            return Err(Error::Format("bad magic, expected CHTK".into()));
        }
        let version = rd.u32()?;
        if version != TOKENS_VERSION {
            return Err(Error::Format(format!("unsupported token file version {version}")));
        }
        let n_records = rd.u32()? as usize;
        let n_beats = rd.u16()? as usize;
        let beat_len = rd.u16()? as usize;
        let n_classes = rd.u16()? as usize;
        let mut classes = Vec::with_capacity(n_classes);
        for _ in 0..n_classes {
            let l = rd.u16()? as usize;
            classes.push(rd.string(l)?);
        }
        let mut records = Vec::with_capacity(n_records);
        for _ in 0..n_records {
            let l = rd.u32()? as usize;
            let record_id = rd.string(l)?;
            let label_bits = unpack_bits(rd.take(n_classes.div_ceil(8))?, n_classes);
            let valid_bits = unpack_bits(rd.take((N_LEADS * n_beats).div_ceil(8))?, N_LEADS * n_beats);
            let valid: Vec<bool> = valid_bits[..n_beats].to_vec();
            if valid_bits.chunks(n_beats).any(|row| row != valid.as_slice()) {
                return Err(Error::Format(format!(
                    "record {record_id}: validity differs across leads"
                )));
            }
            let mut beat_times = Vec::with_capacity(n_beats);
            for _ in 0..n_beats {
                let v = rd.u32()?;
                beat_times.push((v != u32::MAX).then_some(v as usize));
            }
            let count = N_LEADS * n_beats * beat_len;
            let raw = rd.take(count * 4)?;
            let beats: Vec<f32> = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            if beats.iter().any(|x| !x.is_finite()) {
                return Err(Error::NonFinite(format!("beats of record {record_id}")));
            }
            let labels = classes
                .iter()
                .zip(label_bits)
                .filter(|(_, b)| *b)
                .map(|(c, _)| c.clone())
                .collect();
            records.push(TokenizedRecord {
                record_id,
                n_beats,
                beat_len,
                beats,
                valid,
                beat_times,
                labels,
            });
        }
        if rd.pos != bytes.len() {
            return Err(Error::Format("trailing bytes after last record".into()));
        }
        Ok(Self {
            n_beats,
            beat_len,
            classes,
            records,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut buf = Vec::new();
        fs::File::open(path)
            .and_then(|mut f| f.read_to_end(&mut buf))
            .map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&buf)
    }
}

/// Signal preparation applied before tokenization.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Preprocess {
    pub sample_rate: u32,
    /// `None` keeps millivolts.
    pub scale: Option<ScaleScope>,
    pub lo: f32,
    pub hi: f32,
}

impl Default for Preprocess {
    fn default() -> Self {
        Self {
            sample_rate: 100,
            scale: Some(ScaleScope::Record),
            lo: -3.0,
            hi: 3.0,
        }
    }
}

/// Repair, resample and (optionally) range-scale one record.
pub fn preprocess(rec: &EcgRecord, pre: &Preprocess) -> Result<EcgRecord> {
    let rec = repair_nonfinite(rec)?;
    let rec = resample(&rec, pre.sample_rate)?;
    match pre.scale {
        Some(scope) => scale_range(&rec, pre.lo, pre.hi, scope),
        None => Ok(rec),
    }
}

/// Preprocesses and tokenizes records in parallel, keeping input order.
/// Without `classes`, the vocabulary is the sorted union of record labels.
pub fn build_dataset(
    records: &[EcgRecord],
    pre: &Preprocess,
    n_beats: usize,
    beat_len: usize,
    classes: Option<Vec<String>>,
) -> Result<TokenDataset> {
    let tokens: Vec<TokenizedRecord> = records
        .par_iter()
        .map(|r| {
            let p = preprocess(r, pre)?;
            tokenize(&p, n_beats, beat_len).map_err(|e| match e {
                Error::NoHeartbeats => Error::Format(format!("record {}: no heartbeats detected", r.record_id)),
                other => other,
            })
        })
        .collect::<Result<_>>()?;
    let classes = classes.unwrap_or_else(|| {
        let all: BTreeSet<&String> = records.iter().flat_map(|r| &r.labels).collect();
        all.into_iter().cloned().collect()
    });
    Ok(TokenDataset::new(n_beats, beat_len, classes, tokens))
}

fn pack_bits(bits: &[bool]) -> Vec<u8> {
    let mut out = vec![0u8; bits.len().div_ceil(8)];
    for (i, &b) in bits.iter().enumerate() {
        if b {
            out[i / 8] |= 1 << (i % 8);
        }
    }
    out
}

fn unpack_bits(bytes: &[u8], n: usize) -> Vec<bool> {
    (0..n).map(|i| bytes[i / 8] & (1 << (i % 8)) != 0).collect()
}

pub(crate) struct ByteReader<'a> {
    pub buf: &'a [u8],
    pub pos: usize,
}

impl<'a> ByteReader<'a> {
    pub fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::Format(format!("truncated file at byte {}", self.pos)));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
    pub fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
    pub fn u16(&mut self) -> Result<u16> {
        let b = self.take(2)?;
        Ok(u16::from_le_bytes([b[0], b[1]]))
    }
    pub fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes(b.try_into().expect("4 bytes")))
    }
    pub fn u64(&mut self) -> Result<u64> {
        let b = self.take(8)?;
        Ok(u64::from_le_bytes(b.try_into().expect("8 bytes")))
    }
    pub fn f32(&mut self) -> Result<f32> {
        let b = self.take(4)?;
        Ok(f32::from_le_bytes(b.try_into().expect("4 bytes")))
    }
    pub fn string(&mut self, n: usize) -> Result<String> {
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| Error::Format("invalid UTF-8 string".into()))
    }
}
