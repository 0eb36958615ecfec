//! Labelled synthetic 12-lead ECG with planted R peaks.
//!
//! Each beat is a sum of five Gaussian bumps (P, Q, R, S, T). Every lead
//! scales the bump amplitudes by its own fixed row of [`LEAD_PROJECTION`], so
//! all leads see the same conduction event from a different direction.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::signal::{save_manifest, save_record, EcgRecord, ManifestEntry, Split, N_LEADS};
use crate::tokenizer::{build_dataset, Preprocess, TokenDataset};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum SynthClass {
    Sinus,
    Tachy,
    Brady,
    Irregular,
    Premature,
}

impl SynthClass {
    pub const ALL: [SynthClass; 5] = [
        SynthClass::Sinus,
        SynthClass::Tachy,
        SynthClass::Brady,
        SynthClass::Irregular,
        SynthClass::Premature,
    ];

    pub fn name(self) -> &'static str {
        match self {
            SynthClass::Sinus => "SINUS",
            SynthClass::Tachy => "TACHY",
            SynthClass::Brady => "BRADY",
            SynthClass::Irregular => "IRREGULAR",
            SynthClass::Premature => "PREMATURE",
        }
    }

    /// Heart-rate range in beats per minute.
    pub fn rate_range(self) -> (f64, f64) {
        match self {
            SynthClass::Tachy => (110.0, 150.0),
            SynthClass::Brady => (35.0, 55.0),
            SynthClass::Sinus | SynthClass::Irregular | SynthClass::Premature => (60.0, 90.0),
        }
    }
}

impl fmt::Display for SynthClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for SynthClass {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        SynthClass::ALL
            .into_iter()
            .find(|c| c.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::Config(format!("unknown synthetic class {s:?}")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub seed: u64,
    pub n_records: usize,
    pub sample_rate: u32,
    /// Seconds.
    pub duration: f64,
    pub class_mix: BTreeMap<SynthClass, f64>,
    /// Millivolts.
    pub noise_std: f64,
    /// Millivolts.
    pub wander_amp: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            n_records: 100,
            sample_rate: 100,
            duration: 10.0,
            class_mix: SynthClass::ALL.into_iter().map(|c| (c, 0.2)).collect(),
            noise_std: 0.02,
            wander_amp: 0.05,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let total: f64 = self.class_mix.values().sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(Error::Config(format!("class probabilities sum to {total}, expected 1")));
        }
        if self.class_mix.values().any(|&p| !(0.0..=1.0).contains(&p)) {
            return Err(Error::Config("class probabilities must lie in [0, 1]".into()));
        }
        if self.sample_rate == 0 || self.duration * self.sample_rate as f64 + 1e-9 < 100.0 {
            return Err(Error::Config(
                "duration x sample_rate must be at least 100 samples".into(),
            ));
        }
        if self.noise_std < 0.0 || self.wander_amp < 0.0 {
            return Err(Error::Config("noise and wander amplitudes must be non-negative".into()));
        }
        Ok(())
    }

    pub fn n_samples(&self) -> usize {
        (self.duration * self.sample_rate as f64).round() as usize
    }
}

/// Bump order: P, Q, R, S, T. Rows follow the fixed lead order; aVR is the
/// sign-inverted view.
pub const LEAD_PROJECTION: [[f64; 5]; N_LEADS] = [
    [0.80, 0.80, 0.70, 0.60, 0.80],      // I
    [1.00, 1.00, 1.00, 1.00, 1.00],      // II
    [0.40, 0.50, 0.40, 0.70, 0.50],      // III
    [-0.90, -0.90, -0.85, -0.80, -0.90], // aVR
    [0.30, 0.40, 0.25, 0.20, 0.30],      // aVL
    [0.70, 0.70, 0.70, 0.85, 0.75],      // aVF
    [0.50, 0.20, 0.30, 2.20, -0.30],     // V1
    [0.60, 0.40, 0.60, 2.00, 0.90],      // V2
    [0.60, 0.60, 0.90, 1.50, 1.00],      // V3
    [0.60, 0.80, 1.30, 1.00, 1.10],      // V4
    [0.60, 1.00, 1.20, 0.60, 0.90],      // V5
    [0.60, 1.00, 1.00, 0.40, 0.70],      // V6
];

#[derive(Clone, Copy, Debug)]
struct Bump {
    amp: f64,
    center: f64,
    sigma: f64,
}

/// Template bumps for a beat preceded by an RR interval of `rr` seconds.
/// P and T positions stretch with sqrt(RR), QRS does not.
fn beat_template(rr: f64, ectopic: bool) -> [Bump; 5] {
    let s = rr.clamp(0.3, 2.0).sqrt();
    let r_sigma = if ectopic { 0.011 * 2.5 } else { 0.011 };
    [
        Bump {
            amp: if ectopic { 0.0 } else { 0.15 },
            center: -0.16 * s,
            sigma: 0.025,
        },
        Bump {
            amp: -0.12,
            center: -0.028,
            sigma: 0.008,
        },
        Bump {
            amp: 1.0,
            center: 0.0,
            sigma: r_sigma,
        },
        Bump {
            amp: -0.22,
            center: 0.028,
            sigma: 0.009,
        },
        Bump {
            amp: 0.30,
            center: 0.28 * s,
            sigma: 0.05,
        },
    ]
}

#[derive(Clone, Debug)]
struct PlantedBeat {
    time: f64,
    rr: f64,
    ectopic: bool,
}

/// A generated record with its ground truth.
#[derive(Clone, Debug)]
pub struct SynthRecord {
    pub record: EcgRecord,
    pub peaks: Vec<usize>,
    pub class: SynthClass,
    pub rate_bpm: f64,
}

fn record_rng(seed: u64, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64);
    rng
}

fn pick_class(mix: &BTreeMap<SynthClass, f64>, u: f64) -> SynthClass {
    let mut acc = 0.0;
    let mut last = SynthClass::Sinus;
    for (&c, &p) in mix {
        if p <= 0.0 {
            continue;
        }
        acc += p;
        last = c;
        if u < acc {
            return c;
        }
    }
    last
}

pub fn record_id(seed: u64, index: usize) -> String {
    format!("synth_{seed}_{index:05}")
}

/// Deterministic in `(cfg.seed, index)`.
pub fn generate_record(cfg: &SynthConfig, index: usize) -> Result<SynthRecord> {
    cfg.validate()?;
    let mut rng = record_rng(cfg.seed, index);
    let class = pick_class(&cfg.class_mix, rng.random::<f64>());
    let (lo, hi) = class.rate_range();
    let rate = rng.random_range(lo..hi);
    Ok(render(cfg, index, class, rate, &mut rng))
}

/// Like [`generate_record`] but with the rhythm class and rate forced.
pub fn generate_record_as(cfg: &SynthConfig, index: usize, class: SynthClass, rate_bpm: f64) -> Result<SynthRecord> {
    cfg.validate()?;
    if !(rate_bpm > 0.0) {
        return Err(Error::Config("rate must be positive".into()));
    }
    let mut rng = record_rng(cfg.seed, index);
    let _ = rng.random::<f64>();
    let _ = rng.random::<f64>();
    Ok(render(cfg, index, class, rate_bpm, &mut rng))
}

fn plant_beats(class: SynthClass, rate: f64, duration: f64, rng: &mut ChaCha8Rng) -> Vec<PlantedBeat> {
    let base = 60.0 / rate;
    let next_rr = |rng: &mut ChaCha8Rng| match class {
        SynthClass::Irregular => base * rng.random_range(0.7..1.3),
        _ => base * rng.random_range(0.98..1.02),
    };
    let mut beats = Vec::new();
    // Start before t = 0 so the first in-record beat has a realistic neighbour.
    let mut t = rng.random_range(0.1..0.1 + base) - base;
    let mut rr = base;
    while t < duration + 1.0 {
        beats.push(PlantedBeat {
            time: t,
            rr,
            ectopic: false,
        });
        rr = next_rr(rng);
        t += rr;
    }
    if class == SynthClass::Premature {
        let inside: Vec<usize> = (0..beats.len())
            .filter(|&k| beats[k].time >= 0.0 && beats[k].time < duration)
            .collect();
        if inside.len() >= 3 {
            let m = inside[rng.random_range(1..inside.len() - 1)];
            // Early beat followed by a compensatory pause.
            let early = beats[m - 1].time + 0.6 * base;
            let shift = 2.0 * base - (beats[m].time - beats[m - 1].time);
            beats[m] = PlantedBeat {
                time: early,
                rr: 0.6 * base,
                ectopic: true,
            };
            for b in beats.iter_mut().skip(m + 1) {
                b.time += shift;
            }
            if let Some(b) = beats.get_mut(m + 1) {
                b.rr = 1.4 * base;
            }
        }
    }
    beats
}

fn render(cfg: &SynthConfig, index: usize, class: SynthClass, rate: f64, rng: &mut ChaCha8Rng) -> SynthRecord {
    let fs = cfg.sample_rate as f64;
    let n = cfg.n_samples();
    let beats = plant_beats(class, rate, cfg.duration, rng);
    let wander_phase = rng.random_range(0.0..std::f64::consts::TAU);
    let noise = Normal::new(0.0, cfg.noise_std.max(0.0)).expect("finite std");

    let mut leads = vec![vec![0.0f64; n]; N_LEADS];
    for b in &beats {
        let template = beat_template(b.rr, b.ectopic);
        for (k, bump) in template.iter().enumerate() {
            if bump.amp == 0.0 {
                continue;
            }
            let center = b.time + bump.center;
            let lo = (((center - 5.0 * bump.sigma) * fs).floor().max(0.0)) as usize;
            let hi = (((center + 5.0 * bump.sigma) * fs).ceil().max(0.0) as usize).min(n);
            for s in lo..hi {
                let dt = s as f64 / fs - center;
                let g = bump.amp * (-0.5 * (dt / bump.sigma).powi(2)).exp();
                for (lead, proj) in LEAD_PROJECTION.iter().enumerate() {
                    leads[lead][s] += proj[k] * g;
                }
            }
        }
    }
    for s in 0..n {
        let t = s as f64 / fs;
        let wander = cfg.wander_amp * (std::f64::consts::TAU * 0.3 * t + wander_phase).sin();
        for lead in leads.iter_mut() {
            lead[s] += wander;
        }
    }
    if cfg.noise_std > 0.0 {
        for lead in leads.iter_mut() {
            for x in lead.iter_mut() {
                *x += noise.sample(rng);
            }
        }
    }

    let peaks: Vec<usize> = beats
        .iter()
        .map(|b| (b.time * fs).round())
        .filter(|&p| p >= 0.0 && (p as usize) < n)
        .map(|p| p as usize)
        .collect();
    let leads_f32: Vec<Vec<f32>> = leads
        .into_iter()
        .map(|l| l.into_iter().map(|x| x as f32).collect())
        .collect();
    let record = EcgRecord::new(record_id(cfg.seed, index), cfg.sample_rate, leads_f32)
        .expect("synthetic record has 12 equal leads")
        .with_labels([class.name()]);
    SynthRecord {
        record,
        peaks,
        class,
        rate_bpm: rate,
    }
}

pub fn split_of(index: usize, n_records: usize) -> Split {
    if index < n_records * 7 / 10 {
        Split::Train
    } else if index < n_records * 8 / 10 {
        Split::Val
    } else {
        Split::Test
    }
}

/// Generates every record (in parallel; the output does not depend on the
/// worker count).
pub fn generate_all(cfg: &SynthConfig) -> Result<Vec<SynthRecord>> {
    cfg.validate()?;
    (0..cfg.n_records)
        .into_par_iter()
        .map(|i| generate_record(cfg, i))
        .collect()
}

#[derive(Clone, Debug, Serialize)]
pub struct DatasetSummary {
    pub n_train: usize,
    pub n_val: usize,
    pub n_test: usize,
    pub class_counts: BTreeMap<String, usize>,
}

/// Writes `records/<id>.csv`, `manifest.json` and `peaks.json` into `out_dir`.
pub fn generate_dataset(cfg: &SynthConfig, out_dir: &Path) -> Result<DatasetSummary> {
    let all = generate_all(cfg)?;
    let rec_dir = out_dir.join("records");
    std::fs::create_dir_all(&rec_dir).map_err(|e| Error::io(&rec_dir, e))?;
    let mut manifest = Vec::with_capacity(all.len());
    let mut peaks = BTreeMap::new();
    let mut summary = DatasetSummary {
        n_train: 0,
        n_val: 0,
        n_test: 0,
        class_counts: BTreeMap::new(),
    };
    for (i, r) in all.iter().enumerate() {
        let rel = format!("records/{}.csv", r.record.record_id);
        save_record(&r.record, &out_dir.join(&rel))?;
        let split = split_of(i, cfg.n_records);
        match split {
            Split::Train => summary.n_train += 1,
            Split::Val => summary.n_val += 1,
            Split::Test => summary.n_test += 1,
        }
        *summary.class_counts.entry(r.class.name().to_string()).or_default() += 1;
        manifest.push(ManifestEntry {
            path: rel,
            labels: vec![r.class.name().to_string()],
            split,
        });
        peaks.insert(r.record.record_id.clone(), r.peaks.clone());
    }
    save_manifest(&manifest, &out_dir.join("manifest.json"))?;
    let peaks_path = out_dir.join("peaks.json");
    std::fs::write(&peaks_path, serde_json::to_string(&peaks).expect("peaks serialize"))
        .map_err(|e| Error::io(&peaks_path, e))?;
    Ok(summary)
}

/// The five class names in canonical order.
pub fn class_names() -> Vec<String> {
    SynthClass::ALL.iter().map(|c| c.name().to_string()).collect()
}

/// Generates, preprocesses and tokenizes a dataset in memory, returning the
/// train, validation and test splits.
pub fn tokenized_splits(
    cfg: &SynthConfig,
    pre: &Preprocess,
    n_beats: usize,
    beat_len: usize,
) -> Result<[TokenDataset; 3]> {
    let all = generate_all(cfg)?;
    let mut parts: [Vec<EcgRecord>; 3] = Default::default();
    for (i, r) in all.into_iter().enumerate() {
        let k = match split_of(i, cfg.n_records) {
            Split::Train => 0,
            Split::Val => 1,
            Split::Test => 2,
        };
        parts[k].push(r.record);
    }
    let build = |recs: &[EcgRecord]| build_dataset(recs, pre, n_beats, beat_len, Some(class_names()));
    Ok([build(&parts[0])?, build(&parts[1])?, build(&parts[2])?])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tokenizer::detect_r_peaks;

    fn quiet() -> SynthConfig {
        SynthConfig {
            noise_std: 0.0,
            wander_amp: 0.0,
            ..SynthConfig::default()
        }
    }

    #[test]
    fn deterministic_per_seed_and_index() {
        let cfg = SynthConfig::default();
        let a = generate_record(&cfg, 3).unwrap();
        let b = generate_record(&cfg, 3).unwrap();
        assert_eq!(a.record, b.record);
        let c = generate_record(&cfg, 4).unwrap();
        assert_ne!(a.record.samples(), c.record.samples());
        let other = SynthConfig { seed: 1, ..cfg.clone() };
        let d = generate_record(&other, 3).unwrap();
        assert_ne!(a.record.samples(), d.record.samples());
        assert_eq!(a.record.n_samples(), d.record.n_samples());
    }

    #[test]
    fn recovers_planted_sinus_peaks() {
        let r = generate_record_as(&quiet(), 0, SynthClass::Sinus, 75.0).unwrap();
        let found = detect_r_peaks(&r.record).unwrap();
        assert_eq!(found.len(), r.peaks.len(), "found {found:?} planted {:?}", r.peaks);
        for (f, p) in found.iter().zip(&r.peaks) {
            assert!(f.abs_diff(*p) <= 3, "found {f} planted {p}");
        }
    }

    #[test]
    fn avr_anticorrelates_with_lead_ii() {
        let r = generate_record_as(&quiet(), 1, SynthClass::Sinus, 70.0).unwrap();
        let (a, b) = (r.record.lead(3), r.record.lead(1));
        let n = a.len() as f64;
        let ma = a.iter().map(|&x| x as f64).sum::<f64>() / n;
        let mb = b.iter().map(|&x| x as f64).sum::<f64>() / n;
        let mut cov = 0.0;
        let mut va = 0.0;
        let mut vb = 0.0;
        for (&x, &y) in a.iter().zip(b) {
            let (dx, dy) = (x as f64 - ma, y as f64 - mb);
            cov += dx * dy;
            va += dx * dx;
            vb += dy * dy;
        }
        let r = cov / (va * vb).sqrt();
        assert!(r < 0.0, "pearson {r}");
    }

    #[test]
    fn concentrated_mix_and_splits() {
        let cfg = SynthConfig {
            class_mix: [(SynthClass::Sinus, 1.0)].into_iter().collect(),
            ..SynthConfig::default()
        };
        let all = generate_all(&cfg).unwrap();
        assert!(all.iter().all(|r| r.class == SynthClass::Sinus));
        let counts = Split::ALL.map(|s| (0..100).filter(|&i| split_of(i, 100) == s).count());
        assert_eq!(counts, [70, 10, 20]);
    }

    #[test]
    fn rejects_bad_config() {
        let mut cfg = SynthConfig::default();
        cfg.class_mix.insert(SynthClass::Sinus, 0.5);
        assert!(cfg.validate().is_err());
        let cfg = SynthConfig {
            duration: 0.5,
            ..SynthConfig::default()
        };
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn mean_rate_ordering() {
        let cfg = SynthConfig::default();
        let mean_rate = |class: SynthClass| {
            let rates: Vec<f64> = (0..20)
                .map(|i| {
                    let mut rng = record_rng(cfg.seed, i);
                    let (lo, hi) = class.rate_range();
                    let rate = rng.random_range(lo..hi);
                    let beats = plant_beats(class, rate, cfg.duration, &mut rng);
                    let inside: Vec<f64> = beats
                        .iter()
                        .map(|b| b.time)
                        .filter(|t| (0.0..10.0).contains(t))
                        .collect();
                    60.0 * (inside.len() - 1) as f64 / (inside[inside.len() - 1] - inside[0])
                })
                .collect();
            rates.iter().sum::<f64>() / rates.len() as f64
        };
        let (b, s, t) = (
            mean_rate(SynthClass::Brady),
            mean_rate(SynthClass::Sinus),
            mean_rate(SynthClass::Tachy),
        );
        assert!(b < s && s < t, "{b} {s} {t}");
    }
}
