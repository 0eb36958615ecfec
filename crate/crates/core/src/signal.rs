//! Raw 12-lead records: cleaning, resampling, range scaling and the on-disk
//! CSV/manifest formats.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const N_LEADS: usize = 12;

/// Fixed lead order used everywhere in the crate.
pub const LEAD_NAMES: [&str; N_LEADS] = [
    "I", "II", "III", "aVR", "aVL", "aVF", "V1", "V2", "V3", "V4", "V5", "V6",
];

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RecordMeta {
    /// Set when a resample raised the sampling rate.
    pub upsampled: bool,
}

/// A 12-lead recording. Samples are stored lead-major: `signal[lead * n + s]`.
#[derive(Clone, Debug, PartialEq)]
pub struct EcgRecord {
    pub record_id: String,
    pub sample_rate: u32,
    n_samples: usize,
    signal: Vec<f32>,
    pub labels: BTreeSet<String>,
    pub meta: RecordMeta,
}

impl EcgRecord {
    /// Builds a record from one sample vector per lead, in [`LEAD_NAMES`] order.
    pub fn new(record_id: impl Into<String>, sample_rate: u32, leads: Vec<Vec<f32>>) -> Result<Self> {
        if leads.len() != N_LEADS {
            return Err(Error::Format(format!("expected 12 leads, got {}", leads.len())));
        }
        let n = leads[0].len();
        if n == 0 {
            return Err(Error::Format("record has no samples".into()));
        }
        if leads.iter().any(|l| l.len() != n) {
            return Err(Error::Format("leads have different lengths".into()));
        }
        if sample_rate == 0 {
            return Err(Error::Format("sample rate must be positive".into()));
        }
        Ok(Self {
            record_id: record_id.into(),
            sample_rate,
            n_samples: n,
            signal: leads.concat(),
            labels: BTreeSet::new(),
            meta: RecordMeta::default(),
        })
    }

    pub fn with_labels<I, S>(mut self, labels: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        self.labels = labels.into_iter().map(Into::into).collect();
        self
    }

    pub fn n_samples(&self) -> usize {
        self.n_samples
    }

    pub fn lead(&self, i: usize) -> &[f32] {
        &self.signal[i * self.n_samples..(i + 1) * self.n_samples]
    }

    pub fn lead_mut(&mut self, i: usize) -> &mut [f32] {
        &mut self.signal[i * self.n_samples..(i + 1) * self.n_samples]
    }

    pub fn samples(&self) -> &[f32] {
        &self.signal
    }

    pub fn is_finite(&self) -> bool {
        self.signal.iter().all(|x| x.is_finite())
    }

    fn replace_signal(&self, n_samples: usize, signal: Vec<f32>) -> Self {
        Self {
            record_id: self.record_id.clone(),
            sample_rate: self.sample_rate,
            n_samples,
            signal,
            labels: self.labels.clone(),
            meta: self.meta.clone(),
        }
    }
}

/// Replaces every non-finite sample with the mean of the six nearest finite
/// samples of the same lead: up to three on each side, topped up from the
/// other side when one side runs out.
pub fn repair_nonfinite(rec: &EcgRecord) -> Result<EcgRecord> {
    let mut out = rec.clone();
    for lead in 0..N_LEADS {
        let src = rec.lead(lead);
        if src.iter().all(|x| x.is_finite()) {
            continue;
        }
        let finite: Vec<usize> = (0..src.len()).filter(|&i| src[i].is_finite()).collect();
        if finite.is_empty() {
            return Err(Error::IrreparableLead { lead });
        }
        let dst = out.lead_mut(lead);
        for (n, x) in src.iter().enumerate() {
            if x.is_finite() {
                continue;
            }
            // `split` is the number of finite samples strictly left of n.
            let split = finite.partition_point(|&i| i < n);
            let left_avail = split;
            let right_avail = finite.len() - split;
            let mut take_left = left_avail.min(3);
            let mut take_right = right_avail.min(3);
            if take_left < 3 {
                take_right = right_avail.min(6 - take_left);
            }
            if take_right < 3 {
                take_left = left_avail.min(6 - take_right);
            }
            let mut sum = 0.0f64;
            for &i in &finite[split - take_left..split] {
                sum += src[i] as f64;
            }
            for &i in &finite[split..split + take_right] {
                sum += src[i] as f64;
            }
            dst[n] = (sum / (take_left + take_right) as f64) as f32;
        }
    }
    Ok(out)
}

/// Linear-interpolation resampling of every lead to `target_rate`.
pub fn resample(rec: &EcgRecord, target_rate: u32) -> Result<EcgRecord> {
    if target_rate == 0 {
        return Err(Error::Config("target rate must be at least 1 Hz".into()));
    }
    if !rec.is_finite() {
        return Err(Error::NonFinite(format!("record {} before resampling", rec.record_id)));
    }
    if target_rate == rec.sample_rate {
        return Ok(rec.clone());
    }
    let n_in = rec.n_samples;
    let n_out = ((n_in as f64) * target_rate as f64 / rec.sample_rate as f64)
        .round()
        .max(1.0) as usize;
    let ratio = rec.sample_rate as f64 / target_rate as f64;
    let mut signal = Vec::with_capacity(N_LEADS * n_out);
    for lead in 0..N_LEADS {
        let src = rec.lead(lead);
        for m in 0..n_out {
            signal.push(interp_at(src, m as f64 * ratio));
        }
    }
    let mut out = rec.replace_signal(n_out, signal);
    out.sample_rate = target_rate;
    out.meta.upsampled |= target_rate > rec.sample_rate;
    Ok(out)
}

/// Linear interpolation at fractional index `x`, holding the last sample.
pub(crate) fn interp_at(src: &[f32], x: f64) -> f32 {
    let last = src.len() - 1;
    if x <= 0.0 {
        return src[0];
    }
    let i0 = x.floor() as usize;
    if i0 >= last {
        return src[last];
    }
    let a = src[i0];
    let b = src[i0 + 1];
    if a == b {
        return a;
    }
    let t = (x - i0 as f64) as f32;
    a + (b - a) * t
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScaleScope {
    /// One affine map for the whole record.
    #[default]
    Record,
    /// One affine map per lead.
    Lead,
}

/// Affine min-max scaling into `[lo, hi]`. A constant range maps to the
/// midpoint.
pub fn scale_range(rec: &EcgRecord, lo: f32, hi: f32, scope: ScaleScope) -> Result<EcgRecord> {
    if lo.partial_cmp(&hi) != Some(std::cmp::Ordering::Less) {
        return Err(Error::Config(format!("scale range requires lo < hi, got [{lo}, {hi}]")));
    }
    if !rec.is_finite() {
        return Err(Error::NonFinite(format!("record {} before scaling", rec.record_id)));
    }
    let mut out = rec.clone();
    let n = rec.n_samples;
    let chunks: Vec<std::ops::Range<usize>> = match scope {
        ScaleScope::Record => std::iter::once(0..N_LEADS * n).collect(),
        ScaleScope::Lead => (0..N_LEADS).map(|i| i * n..(i + 1) * n).collect(),
    };
    for range in chunks {
        let slice = &mut out.signal[range];
        let (mn, mx) = slice
            .iter()
            .fold((f32::INFINITY, f32::NEG_INFINITY), |(a, b), &x| (a.min(x), b.max(x)));
        if mx == mn {
            let mid = ((lo as f64 + hi as f64) / 2.0) as f32;
            slice.iter_mut().for_each(|x| *x = mid);
            continue;
        }
        if mn == lo && mx == hi {
            continue;
        }
        let (mn, mx, lo, hi) = (mn as f64, mx as f64, lo as f64, hi as f64);
        let scale = (hi - lo) / (mx - mn);
        for x in slice.iter_mut() {
            let v = *x as f64;
            *x = if v == mx {
                hi as f32
            } else {
                (lo + (v - mn) * scale) as f32
            };
        }
    }
    Ok(out)
}

fn format_sample(x: f32) -> String {
    if x.is_nan() {
        "NaN".into()
    } else if x == f32::INFINITY {
        "Inf".into()
    } else if x == f32::NEG_INFINITY {
        "-Inf".into()
    } else {
        // Display prints the shortest string that parses back to the same f32.
        format!("{x}")
    }
}

fn parse_sample(cell: &str) -> Option<f32> {
    match cell {
        "NaN" | "nan" | "-NaN" => Some(f32::NAN),
        "Inf" | "+Inf" | "inf" | "Infinity" => Some(f32::INFINITY),
        "-Inf" | "-inf" | "-Infinity" => Some(f32::NEG_INFINITY),
        _ => cell.parse::<f32>().ok(),
    }
}

pub fn record_to_csv(rec: &EcgRecord) -> String {
    let mut s = String::with_capacity(rec.n_samples * N_LEADS * 8);
    let _ = writeln!(s, "# sample_rate={}", rec.sample_rate);
    s.push_str(&LEAD_NAMES.join(","));
    s.push('\n');
    for n in 0..rec.n_samples {
        for lead in 0..N_LEADS {
            if lead > 0 {
                s.push(',');
            }
            s.push_str(&format_sample(rec.lead(lead)[n]));
        }
        s.push('\n');
    }
    s
}

/// Parses the record CSV format. Row and column numbers in errors are 1-based
/// file positions.
pub fn record_from_csv(text: &str, record_id: &str) -> Result<EcgRecord> {
    let mut lines = text.lines();
    let first = lines.next().ok_or_else(|| Error::Parse {
        row: 1,
        column: 1,
        message: "empty file".into(),
    })?;
    let rate = first
        .trim()
        .strip_prefix("# sample_rate=")
        .and_then(|r| r.trim().parse::<u32>().ok())
        .filter(|&r| r > 0)
        .ok_or_else(|| Error::Parse {
            row: 1,
            column: 1,
            message: format!("malformed header {first:?}, expected `# sample_rate=<int>`"),
        })?;
    let header = lines.next().ok_or_else(|| Error::Parse {
        row: 2,
        column: 1,
        message: "missing lead header".into(),
    })?;
    let names: Vec<&str> = header.trim().split(',').map(str::trim).collect();
    if names.len() != N_LEADS {
        return Err(Error::Parse {
            row: 2,
            column: 1,
            message: format!("expected 12 leads, header has {} columns", names.len()),
        });
    }
    if let Some(col) = names.iter().zip(LEAD_NAMES).position(|(a, b)| *a != b) {
        return Err(Error::Parse {
            row: 2,
            column: col + 1,
            message: format!(
                "lead {:?} out of order; expected order {}",
                names[col],
                LEAD_NAMES.join(",")
            ),
        });
    }
    let mut leads: Vec<Vec<f32>> = vec![Vec::new(); N_LEADS];
    for (k, line) in lines.enumerate() {
        let row = k + 3;
        if line.trim().is_empty() {
            continue;
        }
        let cells: Vec<&str> = line.split(',').collect();
        if cells.len() != N_LEADS {
            return Err(Error::Parse {
                row,
                column: cells.len().min(N_LEADS) + 1,
                message: format!("expected 12 leads, row has {} values", cells.len()),
            });
        }
        for (col, cell) in cells.iter().enumerate() {
            let v = parse_sample(cell.trim()).ok_or_else(|| Error::Parse {
                row,
                column: col + 1,
                message: format!("non-numeric value {cell:?}"),
            })?;
            leads[col].push(v);
        }
    }
    if leads[0].is_empty() {
        return Err(Error::Parse {
            row: 3,
            column: 1,
            message: "record has no samples".into(),
        });
    }
    EcgRecord::new(record_id, rate, leads)
}

fn id_from_path(path: &Path) -> String {
    path.file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default()
}

pub fn load_record(path: &Path) -> Result<EcgRecord> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    record_from_csv(&text, &id_from_path(path))
}

pub fn save_record(rec: &EcgRecord, path: &Path) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, record_to_csv(rec)).map_err(|e| Error::io(path, e))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    /// Relative paths resolve against the manifest's directory.
    pub path: String,
    pub labels: Vec<String>,
    pub split: Split,
}

pub fn load_manifest(path: &Path) -> Result<Vec<ManifestEntry>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Parse {
        row: e.line(),
        column: e.column(),
        message: e.to_string(),
    })
}

pub fn save_manifest(entries: &[ManifestEntry], path: &Path) -> Result<()> {
    let text = serde_json::to_string_pretty(entries).expect("manifest serializes");
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Resolves a manifest entry and loads the record with its labels attached.
pub fn load_entry(manifest_path: &Path, entry: &ManifestEntry) -> Result<EcgRecord> {
    let p = PathBuf::from(&entry.path);
    let full = if p.is_absolute() {
        p
    } else {
        manifest_path.parent().unwrap_or(Path::new(".")).join(p)
    };
    Ok(load_record(&full)?.with_labels(entry.labels.iter().cloned()))
}
