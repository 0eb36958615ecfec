//! Heads over the twelve encoded cls tokens and the frozen-encoder probe
//! trainer.
//!
//! The hierarchical head maps each lead group through its own linear map
//! and averages (step 1), recombines the three group summaries pairwise
//! (step 2) and merges the pairs (step 3). The seven outputs are averaged
//! or concatenated before the classifier.

use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::{activation_ratios, macro_auc, ProbeReport, GROUP_NAMES};
use crate::model::{cls_features, decays, Checkpoint, Linear};
use crate::optim::{lr_at, AdamW, Schedule};
use crate::signal::{LEAD_NAMES, N_LEADS};
use crate::tensor::Mat;
use crate::tokenizer::TokenDataset;

/// Limb (I, II, III), augmented limb (aVR, aVL, aVF) and precordial leads.
pub const LEAD_GROUPS: [&[usize]; 3] = [&[0, 1, 2], &[3, 4, 5], &[6, 7, 8, 9, 10, 11]];
/// Group pairs combined in step 2, in output order.
pub const PAIRS: [(usize, usize); 3] = [(0, 1), (0, 2), (1, 2)];
/// Group subsets of the flat head, in output order.
pub const SUBSETS: [&[usize]; 7] = [&[0], &[1], &[2], &[0, 1], &[0, 2], &[1, 2], &[0, 1, 2]];

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Agg {
    #[default]
    Mean,
    Concat,
}

impl FromStr for Agg {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "mean" => Ok(Agg::Mean),
            "concat" => Ok(Agg::Concat),
            _ => Err(Error::Config(format!("unknown aggregation {s:?} (mean|concat)"))),
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum HeadVariant {
    #[default]
    Hug,
    Averaged,
    Weighted,
    SingleLevel,
}

impl HeadVariant {
    pub const ALL: [HeadVariant; 4] = [
        HeadVariant::Hug,
        HeadVariant::Averaged,
        HeadVariant::Weighted,
        HeadVariant::SingleLevel,
    ];

    pub fn name(self) -> &'static str {
        match self {
            HeadVariant::Hug => "hug",
            HeadVariant::Averaged => "averaged",
            HeadVariant::Weighted => "weighted",
            HeadVariant::SingleLevel => "single-level",
        }
    }

    pub fn has_groups(self) -> bool {
        matches!(self, HeadVariant::Hug | HeadVariant::SingleLevel)
    }
}

impl fmt::Display for HeadVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for HeadVariant {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        HeadVariant::ALL
            .into_iter()
            .find(|v| v.name().eq_ignore_ascii_case(s) || v.name().replace('-', "_").eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::Config(format!("unknown head {s:?} (hug|averaged|weighted|single-level)")))
    }
}

/// Trainable head parameters.
///
/// `phi` holds seven maps for the grouped heads and is empty otherwise;
/// `lead_logits` (softmax-normalised lead weights) is used by the weighted
/// head only.
#[derive(Clone, Debug, PartialEq)]
pub struct HugParams {
    pub variant: HeadVariant,
    pub agg: Agg,
    pub d: usize,
    pub phi: Vec<Linear<f64>>,
    pub lead_logits: Mat<f64>,
    pub classifier: Linear<f64>,
}

impl HugParams {
    pub fn feature_dim(variant: HeadVariant, agg: Agg, d: usize) -> usize {
        if variant.has_groups() && agg == Agg::Concat {
            7 * d
        } else {
            d
        }
    }

    pub fn init(variant: HeadVariant, agg: Agg, d: usize, n_classes: usize, seed: u64) -> Result<Self> {
        if d == 0 || n_classes == 0 {
            return Err(Error::Config("head needs d >= 1 and at least one class".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let phi = if variant.has_groups() {
            (0..7).map(|_| Linear::xavier(d, d, &mut rng)).collect()
        } else {
            Vec::new()
        };
        let fd = Self::feature_dim(variant, agg, d);
        let normal = Normal::new(0.0, 0.01).expect("valid std");
        let classifier = Linear {
            w: Mat::from_vec(
                fd,
                n_classes,
                (0..fd * n_classes).map(|_| normal.sample(&mut rng)).collect(),
            ),
            b: Mat::zeros(1, n_classes),
        };
        Ok(Self {
            variant,
            agg,
            d,
            phi,
            lead_logits: Mat::zeros(1, N_LEADS),
            classifier,
        })
    }

    pub fn n_classes(&self) -> usize {
        self.classifier.w.cols
    }

    pub fn zeros_like(&self) -> Self {
        let z = |l: &Linear<f64>| Linear::zeros(l.w.rows, l.w.cols);
        Self {
            variant: self.variant,
            agg: self.agg,
            d: self.d,
            phi: self.phi.iter().map(z).collect(),
            lead_logits: Mat::zeros(1, N_LEADS),
            classifier: z(&self.classifier),
        }
    }

    pub fn tensors(&self) -> Vec<(String, &Mat<f64>)> {
        let mut out = Vec::new();
        for (k, l) in self.phi.iter().enumerate() {
            out.push((format!("phi.{}.w", k + 1), &l.w));
            out.push((format!("phi.{}.b", k + 1), &l.b));
        }
        if self.variant == HeadVariant::Weighted {
            out.push(("lead_logits".into(), &self.lead_logits));
        }
        out.push(("classifier.w".into(), &self.classifier.w));
        out.push(("classifier.b".into(), &self.classifier.b));
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<(String, &mut Mat<f64>)> {
        let mut out = Vec::new();
        for (k, l) in self.phi.iter_mut().enumerate() {
            out.push((format!("phi.{}.w", k + 1), &mut l.w));
            out.push((format!("phi.{}.b", k + 1), &mut l.b));
        }
        if self.variant == HeadVariant::Weighted {
            out.push(("lead_logits".into(), &mut self.lead_logits));
        }
        out.push(("classifier.w".into(), &mut self.classifier.w));
        out.push(("classifier.b".into(), &mut self.classifier.b));
        out
    }

    fn add_assign(&mut self, other: &HugParams) {
        for ((_, a), (_, b)) in self.tensors_mut().into_iter().zip(other.tensors()) {
            a.add_assign(b);
        }
    }
}

fn affine(l: &Linear<f64>, x: &[f64]) -> Vec<f64> {
    let out = l.w.cols;
    let mut y = l.b.data.clone();
    for (i, &xi) in x.iter().enumerate() {
        let row = &l.w.data[i * out..(i + 1) * out];
        for (o, &w) in y.iter_mut().zip(row) {
            *o += xi * w;
        }
    }
    y
}

/// Accumulates parameter gradients and returns `dx`.
fn affine_bwd(l: &Linear<f64>, x: &[f64], dy: &[f64], g: &mut Linear<f64>) -> Vec<f64> {
    let out = l.w.cols;
    let mut dx = vec![0.0; x.len()];
    for (i, &xi) in x.iter().enumerate() {
        let w = &l.w.data[i * out..(i + 1) * out];
        let gw = &mut g.w.data[i * out..(i + 1) * out];
        let mut acc = 0.0;
        for o in 0..out {
            gw[o] += xi * dy[o];
            acc += w[o] * dy[o];
        }
        dx[i] = acc;
    }
    for (b, &d) in g.b.data.iter_mut().zip(dy) {
        *b += d;
    }
    dx
}

fn scaled_add(acc: &mut [f64], x: &[f64], s: f64) {
    for (a, &v) in acc.iter_mut().zip(x) {
        *a += s * v;
    }
}

fn divided(mut v: Vec<f64>, n: usize) -> Vec<f64> {
    let n = n as f64;
    v.iter_mut().for_each(|x| *x /= n);
    v
}

fn check_inputs(cls: &Mat<f64>, d: usize, present: &[bool; N_LEADS]) -> Result<()> {
    if cls.rows != N_LEADS || cls.cols != d {
        return Err(Error::Shape(format!(
            "expected {N_LEADS} x {d} cls features, got {} x {}",
            cls.rows, cls.cols
        )));
    }
    if !present.iter().any(|&p| p) {
        return Err(Error::Config("at least one lead must be present".into()));
    }
    Ok(())
}

/// Result of a head forward pass on one sample.
#[derive(Clone, Debug, PartialEq)]
pub struct HeadOutput {
    /// Classifier input: the mean of the group outputs or their concatenation.
    pub features: Vec<f64>,
    /// The seven group outputs (empty for heads without groups).
    pub groups: Vec<Vec<f64>>,
    /// Indices of group outputs zero-filled because no member lead was present.
    pub empty: Vec<usize>,
    pub logits: Vec<f64>,
}

/// Step 1 to 3 with all leads present. Returns the classifier input and the
/// seven outputs `[l1_1, l1_2, l1_3, l2_1, l2_2, l2_3, l3]`.
pub fn hug_forward(cls: &Mat<f64>, params: &HugParams) -> Result<(Vec<f64>, Vec<Vec<f64>>)> {
    let out = head_forward(cls, &[true; N_LEADS], params)?;
    Ok((out.features, out.groups))
}

/// [`hug_forward`] over a subset of leads. Group means use present members
/// only; a group without members yields a zero vector and is listed in
/// `empty`.
pub fn missing_lead_forward(cls: &Mat<f64>, present: &[bool; N_LEADS], params: &HugParams) -> Result<HeadOutput> {
    head_forward(cls, present, params)
}

fn group_mean(
    phi: &Linear<f64>,
    cls: &Mat<f64>,
    members: impl Iterator<Item = usize>,
    present: &[bool; N_LEADS],
    d: usize,
) -> Option<Vec<f64>> {
    let leads: Vec<usize> = members.filter(|&i| present[i]).collect();
    if leads.is_empty() {
        return None;
    }
    let mut acc = vec![0.0; d];
    for &i in &leads {
        scaled_add(&mut acc, &affine(phi, cls.row(i)), 1.0);
    }
    Some(divided(acc, leads.len()))
}

fn softmax_present(logits: &[f64], present: &[bool; N_LEADS]) -> Vec<f64> {
    let m = (0..N_LEADS)
        .filter(|&i| present[i])
        .map(|i| logits[i])
        .fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = (0..N_LEADS)
        .map(|i| if present[i] { (logits[i] - m).exp() } else { 0.0 })
        .collect();
    let z: f64 = e.iter().sum();
    e.into_iter().map(|v| v / z).collect()
}

/// Forward pass of any head variant.
pub fn head_forward(cls: &Mat<f64>, present: &[bool; N_LEADS], params: &HugParams) -> Result<HeadOutput> {
    let d = params.d;
    check_inputs(cls, d, present)?;
    let mut empty = Vec::new();
    let mut groups = Vec::new();
    let features = match params.variant {
        HeadVariant::Hug => {
            let mut l1 = Vec::with_capacity(3);
            for (g, members) in LEAD_GROUPS.iter().enumerate() {
                l1.push(
                    group_mean(&params.phi[g], cls, members.iter().copied(), present, d).unwrap_or_else(|| {
                        empty.push(g);
                        vec![0.0; d]
                    }),
                );
            }
            let l2: Vec<Vec<f64>> = PAIRS
                .iter()
                .enumerate()
                .map(|(k, &(a, b))| {
                    let phi = &params.phi[3 + k];
                    let mut v = affine(phi, &l1[a]);
                    scaled_add(&mut v, &affine(phi, &l1[b]), 1.0);
                    divided(v, 2)
                })
                .collect();
            let mut l3 = vec![0.0; d];
            for v in &l2 {
                scaled_add(&mut l3, &affine(&params.phi[6], v), 1.0);
            }
            let l3 = divided(l3, 3);
            groups.extend(l1);
            groups.extend(l2);
            groups.push(l3);
            aggregate(&groups, params.agg, d)
        }
        HeadVariant::SingleLevel => {
            for (k, subset) in SUBSETS.iter().enumerate() {
                let members = subset.iter().flat_map(|&g| LEAD_GROUPS[g].iter().copied());
                groups.push(group_mean(&params.phi[k], cls, members, present, d).unwrap_or_else(|| {
                    empty.push(k);
                    vec![0.0; d]
                }));
            }
            aggregate(&groups, params.agg, d)
        }
        HeadVariant::Averaged => {
            let n = present.iter().filter(|&&p| p).count();
            let mut f = vec![0.0; d];
            for i in (0..N_LEADS).filter(|&i| present[i]) {
                scaled_add(&mut f, cls.row(i), 1.0);
            }
            divided(f, n)
        }
        HeadVariant::Weighted => {
            let alpha = softmax_present(&params.lead_logits.data, present);
            let mut f = vec![0.0; d];
            for i in (0..N_LEADS).filter(|&i| present[i]) {
                scaled_add(&mut f, cls.row(i), alpha[i]);
            }
            f
        }
    };
    let logits = affine(&params.classifier, &features);
    Ok(HeadOutput {
        features,
        groups,
        empty,
        logits,
    })
}

fn aggregate(groups: &[Vec<f64>], agg: Agg, d: usize) -> Vec<f64> {
    match agg {
        Agg::Mean => {
            let mut f = vec![0.0; d];
            for g in groups {
                scaled_add(&mut f, g, 1.0);
            }
            divided(f, groups.len())
        }
        Agg::Concat => groups.concat(),
    }
}

/// Accumulates parameter gradients of one sample given `dlogits`. The cls
/// inputs receive no gradient.
pub fn head_backward(
    cls: &Mat<f64>,
    present: &[bool; N_LEADS],
    params: &HugParams,
    out: &HeadOutput,
    dlogits: &[f64],
    grads: &mut HugParams,
) {
    let d = params.d;
    let dfeat = affine_bwd(&params.classifier, &out.features, dlogits, &mut grads.classifier);
    let dgroups: Vec<Vec<f64>> = if params.variant.has_groups() {
        match params.agg {
            Agg::Mean => (0..7).map(|_| dfeat.iter().map(|v| v / 7.0).collect()).collect(),
            Agg::Concat => dfeat.chunks(d).map(|c| c.to_vec()).collect(),
        }
    } else {
        Vec::new()
    };
    let group_bwd = |k: usize, members: &mut dyn Iterator<Item = usize>, dl: &[f64], grads: &mut HugParams| {
        let leads: Vec<usize> = members.filter(|&i| present[i]).collect();
        if leads.is_empty() {
            return;
        }
        let dy: Vec<f64> = dl.iter().map(|v| v / leads.len() as f64).collect();
        for i in leads {
            affine_bwd(&params.phi[k], cls.row(i), &dy, &mut grads.phi[k]);
        }
    };
    match params.variant {
        HeadVariant::Hug => {
            let (l1, l2) = (&out.groups[0..3], &out.groups[3..6]);
            let mut dl2: Vec<Vec<f64>> = dgroups[3..6].to_vec();
            let dl3: Vec<f64> = dgroups[6].iter().map(|v| v / 3.0).collect();
            for k in 0..3 {
                let dx = affine_bwd(&params.phi[6], &l2[k], &dl3, &mut grads.phi[6]);
                scaled_add(&mut dl2[k], &dx, 1.0);
            }
            let mut dl1: Vec<Vec<f64>> = dgroups[0..3].to_vec();
            for (k, &(a, b)) in PAIRS.iter().enumerate() {
                let half: Vec<f64> = dl2[k].iter().map(|v| 0.5 * v).collect();
                let da = affine_bwd(&params.phi[3 + k], &l1[a], &half, &mut grads.phi[3 + k]);
                let db = affine_bwd(&params.phi[3 + k], &l1[b], &half, &mut grads.phi[3 + k]);
                scaled_add(&mut dl1[a], &da, 1.0);
                scaled_add(&mut dl1[b], &db, 1.0);
            }
            for (g, members) in LEAD_GROUPS.iter().enumerate() {
                group_bwd(g, &mut members.iter().copied(), &dl1[g], grads);
            }
        }
        HeadVariant::SingleLevel => {
            for (k, subset) in SUBSETS.iter().enumerate() {
                let mut members = subset.iter().flat_map(|&g| LEAD_GROUPS[g].iter().copied());
                group_bwd(k, &mut members, &dgroups[k], grads);
            }
        }
        HeadVariant::Averaged => {}
        HeadVariant::Weighted => {
            let alpha = softmax_present(&params.lead_logits.data, present);
            let dalpha: Vec<f64> = (0..N_LEADS)
                .map(|i| {
                    if present[i] {
                        crate::tensor::dot(&dfeat, cls.row(i))
                    } else {
                        0.0
                    }
                })
                .collect();
            let s: f64 = (0..N_LEADS).map(|i| alpha[i] * dalpha[i]).sum();
            for i in (0..N_LEADS).filter(|&i| present[i]) {
                grads.lead_logits.data[i] += alpha[i] * (dalpha[i] - s);
            }
        }
    }
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Mean binary cross-entropy over classes, from logits.
pub fn bce_with_logits(logits: &[f64], labels: &[bool]) -> (f64, Vec<f64>) {
    let c = logits.len() as f64;
    let mut loss = 0.0;
    let mut grad = Vec::with_capacity(logits.len());
    for (&z, &y) in logits.iter().zip(labels) {
        let y = if y { 1.0 } else { 0.0 };
        // log(1 + e^z) - y z, computed stably.
        loss += z.max(0.0) - z * y + (-z.abs()).exp().ln_1p();
        grad.push((sigmoid(z) - y) / c);
    }
    (loss / c, grad)
}

/// Encoded cls features and label vectors of a tokenized dataset.
#[derive(Clone, Debug, PartialEq)]
pub struct Features {
    pub cls: Vec<Mat<f64>>,
    pub labels: Vec<Vec<bool>>,
}

/// Per-entry standardisation of the `12 x d` cls features, fitted on the
/// training split (labels unused) and frozen.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureNorm {
    pub mean: Mat<f64>,
    pub inv_std: Mat<f64>,
}

impl FeatureNorm {
    const EPS: f64 = 1e-6;

    pub fn identity(d: usize) -> Self {
        Self {
            mean: Mat::zeros(N_LEADS, d),
            inv_std: Mat::from_vec(N_LEADS, d, vec![1.0; N_LEADS * d]),
        }
    }

    pub fn fit(cls: &[Mat<f64>]) -> Result<Self> {
        let first = cls.first().ok_or_else(|| Error::Config("no features to fit".into()))?;
        let n = cls.len() as f64;
        let len = first.data.len();
        let mut mean = vec![0.0; len];
        for c in cls {
            scaled_add(&mut mean, &c.data, 1.0);
        }
        mean.iter_mut().for_each(|m| *m /= n);
        let mut var = vec![0.0; len];
        for c in cls {
            for ((v, &x), &m) in var.iter_mut().zip(&c.data).zip(&mean) {
                *v += (x - m) * (x - m);
            }
        }
        let inv_std = var.iter().map(|v| 1.0 / (v / n + Self::EPS).sqrt()).collect();
        Ok(Self {
            mean: Mat::from_vec(first.rows, first.cols, mean),
            inv_std: Mat::from_vec(first.rows, first.cols, inv_std),
        })
    }

    pub fn apply(&self, f: &Features) -> Features {
        let cls = f
            .cls
            .iter()
            .map(|c| {
                let data = c
                    .data
                    .iter()
                    .zip(&self.mean.data)
                    .zip(&self.inv_std.data)
                    .map(|((&x, &m), &s)| (x - m) * s)
                    .collect();
                Mat::from_vec(c.rows, c.cols, data)
            })
            .collect();
        Features {
            cls,
            labels: f.labels.clone(),
        }
    }
}

/// Runs the frozen encoder over every record with nothing masked.
pub fn encode_features(ck: &Checkpoint, ds: &TokenDataset) -> Result<Features> {
    let cfg = &ck.params.config;
    if ds.n_beats != cfg.n_beats || ds.beat_len != cfg.beat_len {
        return Err(Error::Shape(format!(
            "dataset has {} beats of {} samples, encoder expects {} of {}",
            ds.n_beats, ds.beat_len, cfg.n_beats, cfg.beat_len
        )));
    }
    let cls = ds
        .records
        .par_iter()
        .map(|r| cls_features(&ck.params, r, ck.variant, ck.policy).map(|m| m.cast::<f64>()))
        .collect::<Result<Vec<_>>>()?;
    let labels = ds.records.iter().map(|r| ds.label_vector(r)).collect();
    Ok(Features { cls, labels })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ProbeConfig {
    pub head: HeadVariant,
    pub agg: Agg,
    pub fraction: f64,
    /// Present lead indices; empty means all twelve.
    pub leads: Vec<usize>,
    pub epochs: usize,
    pub warmup_epochs: usize,
    pub batch_size: usize,
    pub peak_lr: f64,
    pub min_lr: f64,
    pub weight_decay: f64,
    pub betas: (f64, f64),
    /// Standardise the encoder features with training-split statistics.
    pub standardize: bool,
    pub seed: u64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            head: HeadVariant::Hug,
            agg: Agg::Mean,
            fraction: 1.0,
            leads: Vec::new(),
            epochs: 100,
            warmup_epochs: 10,
            batch_size: 256,
            peak_lr: 5e-3,
            min_lr: 1e-5,
            weight_decay: 0.05,
            betas: (0.9, 0.999),
            standardize: true,
            seed: 0,
        }
    }
}

impl ProbeConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.fraction > 0.0 && self.fraction <= 1.0) {
            return Err(Error::Config(format!(
                "fraction must lie in (0, 1], got {}",
                self.fraction
            )));
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config("epochs and batch_size must be at least 1".into()));
        }
        if self.warmup_epochs >= self.epochs {
            return Err(Error::Config("warmup_epochs must be below epochs".into()));
        }
        if let Some(&bad) = self.leads.iter().find(|&&l| l >= N_LEADS) {
            return Err(Error::Config(format!("lead index {bad} out of range")));
        }
        Ok(())
    }

    pub fn present(&self) -> [bool; N_LEADS] {
        if self.leads.is_empty() {
            return [true; N_LEADS];
        }
        let mut p = [false; N_LEADS];
        for &l in &self.leads {
            p[l] = true;
        }
        p
    }
}

/// Parses a comma list of lead names (`I,II,V2`) or indices.
pub fn parse_leads(s: &str) -> Result<Vec<usize>> {
    let mut out = Vec::new();
    for part in s.split(',').map(str::trim).filter(|p| !p.is_empty()) {
        let idx = LEAD_NAMES
            .iter()
            .position(|n| n.eq_ignore_ascii_case(part))
            .or_else(|| part.parse::<usize>().ok().filter(|&i| i < N_LEADS))
            .ok_or_else(|| Error::Config(format!("unknown lead {part:?}")))?;
        if !out.contains(&idx) {
            out.push(idx);
        }
    }
    if out.is_empty() {
        return Err(Error::Config("lead list is empty".into()));
    }
    out.sort_unstable();
    Ok(out)
}

/// Number of training records used for a fraction: `ceil(fraction * n)`,
/// at least one.
pub fn subset_size(n: usize, fraction: f64) -> usize {
    ((fraction * n as f64).ceil() as usize).clamp(1.min(n), n)
}

/// Training indices: the first `subset_size` entries of a seeded permutation.
pub fn subset_indices(n: usize, fraction: f64, seed: u64) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    idx.truncate(subset_size(n, fraction));
    idx
}

#[derive(Clone, Debug)]
pub struct ProbeOutcome {
    pub head: HugParams,
    /// Applied to features before the head.
    pub norm: FeatureNorm,
    pub report: ProbeReport,
    /// Validation macro AUC per epoch (`None` when undefined).
    pub val_history: Vec<Option<f64>>,
}

/// Class scores (sigmoid of the logits) and group outputs for every sample.
pub fn predict(
    head: &HugParams,
    feats: &Features,
    present: &[bool; N_LEADS],
) -> Result<(Vec<Vec<f64>>, Vec<Vec<Vec<f64>>>)> {
    let outs = feats
        .cls
        .par_iter()
        .map(|c| head_forward(c, present, head))
        .collect::<Result<Vec<_>>>()?;
    let scores = outs
        .iter()
        .map(|o| o.logits.iter().map(|&z| sigmoid(z)).collect())
        .collect();
    let groups = outs.into_iter().map(|o| o.groups).collect();
    Ok((scores, groups))
}

/// Trains a head on frozen features and evaluates it on the test features.
/// The epoch with the best validation macro AUC is kept; if validation AUC
/// is never defined the final epoch is used.
pub fn probe_train(
    train: &Features,
    val: &Features,
    test: &Features,
    classes: &[String],
    cfg: &ProbeConfig,
) -> Result<ProbeOutcome> {
    cfg.validate()?;
    let first = train
        .cls
        .first()
        .ok_or_else(|| Error::Config("training set is empty".into()))?;
    let d = first.cols;
    let present = cfg.present();
    let norm = if cfg.standardize {
        FeatureNorm::fit(&train.cls)?
    } else {
        FeatureNorm::identity(d)
    };
    let (train, val, test) = (&norm.apply(train), &norm.apply(val), &norm.apply(test));
    let mut head = HugParams::init(cfg.head, cfg.agg, d, classes.len(), cfg.seed)?;
    let idx = subset_indices(train.cls.len(), cfg.fraction, cfg.seed);
    let steps_per_epoch = idx.len().div_ceil(cfg.batch_size);
    let schedule = Schedule {
        peak_lr: cfg.peak_lr,
        min_lr: cfg.min_lr,
        warmup_steps: cfg.warmup_epochs * steps_per_epoch,
        total_steps: cfg.epochs * steps_per_epoch,
    };
    let mut opt = AdamW::new(cfg.betas, cfg.weight_decay);
    let mut order = idx.clone();
    let mut step = 0;
    let mut best: Option<(f64, usize, HugParams)> = None;
    let mut val_history = Vec::with_capacity(cfg.epochs);
    for epoch in 1..=cfg.epochs {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(epoch as u64);
        order.shuffle(&mut rng);
        for batch in order.chunks(cfg.batch_size) {
            let mut grads = head.zeros_like();
            for &i in batch {
                let out = head_forward(&train.cls[i], &present, &head)?;
                let (_, dl) = bce_with_logits(&out.logits, &train.labels[i]);
                let dl: Vec<f64> = dl.iter().map(|v| v / batch.len() as f64).collect();
                let mut g = head.zeros_like();
                head_backward(&train.cls[i], &present, &head, &out, &dl, &mut g);
                grads.add_assign(&g);
            }
            if let Some((name, _)) = grads
                .tensors()
                .into_iter()
                .find(|(_, t)| t.data.iter().any(|v| !v.is_finite()))
            {
                return Err(Error::NonFinite(format!("head gradient {name}")));
            }
            let lr = lr_at(step, &schedule);
            opt.step(head.tensors_mut(), grads.tensors(), lr, decays);
            step += 1;
        }
        let v = if val.cls.is_empty() {
            None
        } else {
            let (scores, _) = predict(&head, val, &present)?;
            match macro_auc(&scores, &val.labels, classes) {
                Ok(m) => Some(m.macro_auc),
                Err(Error::UndefinedAuc) => None,
                Err(e) => return Err(e),
            }
        };
        val_history.push(v);
        if let Some(a) = v {
            if best.as_ref().is_none_or(|(b, _, _)| a > *b) {
                best = Some((a, epoch, head.clone()));
            }
        }
    }
    let (val_auc, best_epoch, head) = match best {
        Some((a, e, h)) => (Some(a), e, h),
        None => (None, cfg.epochs, head),
    };
    let (scores, groups) = predict(&head, test, &present)?;
    let m = macro_auc(&scores, &test.labels, classes)?;
    let (ratios, zero) = if head.variant.has_groups() {
        let r = activation_ratios(&groups, &test.labels, classes)?;
        (r.per_class, r.zero_samples)
    } else {
        (Default::default(), 0)
    };
    let empty_groups = head_forward(&test.cls.first().unwrap_or(first).clone(), &present, &head)?
        .empty
        .iter()
        .map(|&k| match head.variant {
            HeadVariant::Hug => ["l1_1", "l1_2", "l1_3"][k].to_string(),
            _ => GROUP_NAMES[k].to_string(),
        })
        .collect();
    let report = ProbeReport {
        per_class_auc: m.per_class,
        macro_auc: m.macro_auc,
        excluded_classes: m.excluded,
        activation_ratios: ratios,
        zero_activation_samples: zero,
        best_epoch,
        val_macro_auc: val_auc,
        n_train_used: idx.len(),
        empty_groups,
        config: serde_json::to_value(cfg).map_err(|e| Error::Format(e.to_string()))?,
    };
    Ok(ProbeOutcome {
        head,
        norm,
        report,
        val_history,
    })
}

/// Mean BCE of a head over a feature set.
pub fn probe_loss(head: &HugParams, feats: &Features, present: &[bool; N_LEADS]) -> Result<f64> {
    let mut total = 0.0;
    for (c, l) in feats.cls.iter().zip(&feats.labels) {
        let out = head_forward(c, present, head)?;
        total += bce_with_logits(&out.logits, l).0;
    }
    Ok(total / feats.cls.len().max(1) as f64)
}
