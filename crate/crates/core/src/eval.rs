//! Metrics and diagnostics: ROC AUC, activation ratios of the seven head
//! groups, reconstruction comparisons and attention cost accounting.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mask::{build_mask_matrix, EncoderPolicy, MaskSpec, Stage};
use crate::model::{forward_reconstruct, Checkpoint, ForwardOptions, LossScope, ModelConfig};
use crate::pretrain::{fixed_masks, masked_mse};
use crate::signal::{LEAD_NAMES, N_LEADS};
use crate::tokenizer::{TokenDataset, TokenizedRecord};

/// Probability that a random positive outranks a random negative, ties
/// counting one half. Computed from average ranks.
pub fn roc_auc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::Shape(format!(
            "{} scores for {} labels",
            scores.len(),
            labels.len()
        )));
    }
    if let Some(i) = scores.iter().position(|s| s.is_nan()) {
        return Err(Error::NonFinite(format!("score {i} is NaN")));
    }
    let n_pos = labels.iter().filter(|&&l| l).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::UndefinedAuc);
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    // Twice the rank sum keeps tied (half-integer) ranks exact.
    let mut twice_rank_sum: u64 = 0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i + 1;
        while j < order.len() && scores[order[j]] == scores[order[i]] {
            j += 1;
        }
        // 1-based ranks i+1 ..= j share the average (i + 1 + j) / 2.
        let pos_in_tie = order[i..j].iter().filter(|&&k| labels[k]).count() as u64;
        twice_rank_sum += pos_in_tie * (i + 1 + j) as u64;
        i = j;
    }
    let (p, q) = (n_pos as u64, n_neg as u64);
    let twice_u = twice_rank_sum - p * (p + 1);
    Ok(twice_u as f64 / (2 * p * q) as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MacroAuc {
    pub per_class: BTreeMap<String, f64>,
    pub macro_auc: f64,
    /// Classes without both a positive and a negative sample.
    pub excluded: Vec<String>,
}

/// Unweighted mean of the per-class AUCs. `scores[i][c]` and `labels[i][c]`
/// are sample `i`, class `c`.
pub fn macro_auc(scores: &[Vec<f64>], labels: &[Vec<bool>], classes: &[String]) -> Result<MacroAuc> {
    if scores.len() != labels.len() {
        return Err(Error::Shape(format!(
            "{} score rows for {} label rows",
            scores.len(),
            labels.len()
        )));
    }
    if let Some(bad) = scores.iter().position(|r| r.len() != classes.len()) {
        return Err(Error::Shape(format!(
            "score row {bad} does not have {} classes",
            classes.len()
        )));
    }
    if let Some(bad) = labels.iter().position(|r| r.len() != classes.len()) {
        return Err(Error::Shape(format!(
            "label row {bad} does not have {} classes",
            classes.len()
        )));
    }
    let mut per_class = BTreeMap::new();
    let mut excluded = Vec::new();
    for (c, name) in classes.iter().enumerate() {
        let s: Vec<f64> = scores.iter().map(|r| r[c]).collect();
        let l: Vec<bool> = labels.iter().map(|r| r[c]).collect();
        match roc_auc(&s, &l) {
            Ok(a) => {
                per_class.insert(name.clone(), a);
            }
            Err(Error::UndefinedAuc) => excluded.push(name.clone()),
            Err(e) => return Err(e),
        }
    }
    if per_class.is_empty() {
        return Err(Error::UndefinedAuc);
    }
    let macro_auc = per_class.values().sum::<f64>() / per_class.len() as f64;
    Ok(MacroAuc {
        per_class,
        macro_auc,
        excluded,
    })
}

/// Names of the seven group outputs, in head order.
pub const GROUP_NAMES: [&str; 7] = ["G1", "G2", "G3", "G1+G2", "G1+G3", "G2+G3", "G1+G2+G3"];

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ActivationRatios {
    /// Class name to the mean normalised L1 activation of each group.
    pub per_class: BTreeMap<String, [f64; 7]>,
    /// Samples whose seven outputs were all zero (given 1/7 each).
    pub zero_samples: usize,
}

/// Per-sample L1 norms of the seven group outputs, normalised to sum to one,
/// then averaged over the samples of each class. Classes without samples
/// are left out.
pub fn activation_ratios(
    groups: &[Vec<Vec<f64>>],
    labels: &[Vec<bool>],
    classes: &[String],
) -> Result<ActivationRatios> {
    if groups.len() != labels.len() {
        return Err(Error::Shape(format!(
            "{} samples for {} label rows",
            groups.len(),
            labels.len()
        )));
    }
    let mut zero_samples = 0;
    let mut sums = vec![[0.0f64; 7]; classes.len()];
    let mut counts = vec![0usize; classes.len()];
    for (g, l) in groups.iter().zip(labels) {
        if g.len() != 7 {
            return Err(Error::Shape(format!("expected 7 group outputs, got {}", g.len())));
        }
        let mut a = [0.0f64; 7];
        for (k, v) in g.iter().enumerate() {
            a[k] = v.iter().map(|x| x.abs()).sum();
        }
        let total: f64 = a.iter().sum();
        if !total.is_finite() {
            return Err(Error::NonFinite("group output".into()));
        }
        if total == 0.0 {
            zero_samples += 1;
            a = [1.0 / 7.0; 7];
        } else {
            a.iter_mut().for_each(|x| *x /= total);
        }
        for (c, &on) in l.iter().enumerate() {
            if on {
                counts[c] += 1;
                for k in 0..7 {
                    sums[c][k] += a[k];
                }
            }
        }
    }
    let per_class = classes
        .iter()
        .enumerate()
        .filter(|&(c, _)| counts[c] > 0)
        .map(|(c, name)| {
            let mut r = sums[c];
            r.iter_mut().for_each(|x| *x /= counts[c] as f64);
            (name.clone(), r)
        })
        .collect();
    Ok(ActivationRatios {
        per_class,
        zero_samples,
    })
}

/// Everything a probe run reports.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeReport {
    pub per_class_auc: BTreeMap<String, f64>,
    pub macro_auc: f64,
    pub excluded_classes: Vec<String>,
    /// Empty for heads without group outputs.
    pub activation_ratios: BTreeMap<String, [f64; 7]>,
    pub zero_activation_samples: usize,
    pub best_epoch: usize,
    pub val_macro_auc: Option<f64>,
    pub n_train_used: usize,
    /// Head groups that had no present lead and were zero-filled.
    pub empty_groups: Vec<String>,
    pub config: serde_json::Value,
}

impl ProbeReport {
    pub fn per_class_csv(&self) -> String {
        let mut s = String::from("class,auc\n");
        for (c, a) in &self.per_class_auc {
            let _ = writeln!(s, "{c},{a}");
        }
        s
    }

    pub fn activation_csv(&self) -> String {
        let mut s = format!("class,{}\n", GROUP_NAMES.join(","));
        for (c, r) in &self.activation_ratios {
            let vals: Vec<String> = r.iter().map(|v| v.to_string()).collect();
            let _ = writeln!(s, "{c},{}", vals.join(","));
        }
        s
    }

    /// Writes `metrics.json`, `per_class_auc.csv` and `activation_ratios.csv`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let json = serde_json::to_string_pretty(self).map_err(|e| Error::Format(e.to_string()))?;
        let files = [
            ("metrics.json", json),
            ("per_class_auc.csv", self.per_class_csv()),
            ("activation_ratios.csv", self.activation_csv()),
        ];
        for (name, body) in files {
            let p = dir.join(name);
            std::fs::write(&p, body).map_err(|e| Error::io(&p, e))?;
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReconRow {
    pub label: String,
    pub variant: String,
    pub masked_mse: f64,
    /// Difference to the first row.
    pub delta: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReconReport {
    pub rows: Vec<ReconRow>,
    /// Mean squared target value over the masked beats.
    pub target_second_moment: f64,
    pub n_records: usize,
    pub mask_ratio: f64,
}

impl ReconReport {
    pub fn csv(&self) -> String {
        let mut s = String::from("label,variant,masked_mse,delta\n");
        for r in &self.rows {
            let _ = writeln!(s, "{},{},{},{}", r.label, r.variant, r.masked_mse, r.delta);
        }
        s
    }
}

/// Masked MSE of each checkpoint on the same seed-derived masked positions.
/// Every checkpoint reads its own attention variant; all must share one
/// model configuration.
pub fn recon_report(
    checkpoints: &[(String, Checkpoint)],
    test: &TokenDataset,
    mask_ratio: f64,
    seed: u64,
) -> Result<ReconReport> {
    let (_, first) = checkpoints
        .first()
        .ok_or_else(|| Error::Config("no checkpoints to compare".into()))?;
    check_comparable(checkpoints)?;
    check_shape(&first.params.config, test)?;
    let base = fixed_masks(test, mask_ratio, first.variant, seed)?;
    if base.iter().any(|s| s.n_masked() == 0) {
        return Err(Error::EmptySelection(format!("mask ratio {mask_ratio} masks nothing")));
    }
    let mut rows = Vec::with_capacity(checkpoints.len());
    for (label, ck) in checkpoints {
        let specs: Vec<MaskSpec> = base.iter().map(|s| s.with_variant(ck.variant)).collect();
        let mse = masked_mse(&ck.params, &test.records, &specs, &ForwardOptions::new(ck.policy))?;
        rows.push(ReconRow {
            label: label.clone(),
            variant: ck.variant.name().to_string(),
            masked_mse: mse,
            delta: 0.0,
        });
    }
    let reference = rows[0].masked_mse;
    rows.iter_mut().for_each(|r| r.delta = r.masked_mse - reference);
    Ok(ReconReport {
        rows,
        target_second_moment: masked_second_moment(&test.records, &base)?,
        n_records: test.records.len(),
        mask_ratio,
    })
}

/// Mean over records of the mean squared target value on masked beats,
/// the loss of a model that predicts zero.
pub fn masked_second_moment(records: &[TokenizedRecord], specs: &[MaskSpec]) -> Result<f64> {
    let mut total = 0.0;
    for (r, s) in records.iter().zip(specs) {
        let sel = LossScope::Masked.selection(s)?;
        let mut acc = 0.0;
        for &p in &sel {
            let o = (p - N_LEADS) * r.beat_len;
            acc += r.beats[o..o + r.beat_len]
                .iter()
                .map(|&v| (v as f64).powi(2))
                .sum::<f64>();
        }
        total += acc / (sel.len() * r.beat_len) as f64;
    }
    Ok(total / records.len().max(1) as f64)
}

fn check_comparable(checkpoints: &[(String, Checkpoint)]) -> Result<()> {
    let first = &checkpoints[0].1.params.config;
    for (label, ck) in &checkpoints[1..] {
        if &ck.params.config != first {
            return Err(Error::Config(format!(
                "checkpoint {label} has a different model configuration"
            )));
        }
    }
    Ok(())
}

fn check_shape(cfg: &ModelConfig, ds: &TokenDataset) -> Result<()> {
    if ds.n_beats != cfg.n_beats || ds.beat_len != cfg.beat_len {
        return Err(Error::Shape(format!(
            "dataset has {} beats of {} samples, model expects {} of {}",
            ds.n_beats, ds.beat_len, cfg.n_beats, cfg.beat_len
        )));
    }
    Ok(())
}

const SERIES_COLOURS: [&str; 5] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e"];
const PANEL_W: f64 = 960.0;
const PANEL_H: f64 = 70.0;
const MARGIN: f64 = 40.0;

/// Overlay of the original beats and any number of reconstructions, one
/// panel per lead. Masked beats get a shaded background. Every series is a
/// single `<path>` per lead carrying `data-series` and `data-lead`.
pub fn recon_svg(record: &TokenizedRecord, spec: &MaskSpec, series: &[(String, Vec<f32>)]) -> Result<String> {
    let len = record.beats.len();
    if let Some((name, _)) = series.iter().find(|(_, v)| v.len() != len) {
        return Err(Error::Shape(format!("series {name} does not match the record layout")));
    }
    let (nb, tb) = (record.n_beats, record.beat_len);
    let span = (nb * tb).max(2) - 1;
    let dx = PANEL_W / span as f64;
    let height = MARGIN + N_LEADS as f64 * PANEL_H;
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{}" height="{height}" viewBox="0 0 {} {height}">"#,
        PANEL_W + MARGIN,
        PANEL_W + MARGIN
    );
    let _ = writeln!(s, r#"<title>{}</title>"#, record.record_id);
    for lead in 0..N_LEADS {
        let top = MARGIN / 2.0 + lead as f64 * PANEL_H;
        let mid = top + PANEL_H / 2.0;
        let o = lead * nb * tb;
        let peak = std::iter::once(&record.beats[o..o + nb * tb])
            .chain(series.iter().map(|(_, v)| &v[o..o + nb * tb]))
            .flat_map(|x| x.iter())
            .fold(1e-6f64, |m, &v| m.max((v as f64).abs()));
        let scale = 0.45 * PANEL_H / peak;
        for j in 0..nb {
            if spec.is_masked(spec.layout.beat(lead, j)) {
                let _ = writeln!(
                    s,
                    r##"<rect x="{:.3}" y="{top:.3}" width="{:.3}" height="{PANEL_H:.3}" fill="#eeeeee"/>"##,
                    MARGIN + (j * tb) as f64 * dx,
                    tb as f64 * dx
                );
            }
        }
        let _ = writeln!(
            s,
            r#"<text x="2" y="{:.3}" font-size="10">{}</text>"#,
            mid + 3.0,
            LEAD_NAMES[lead]
        );
        let all = std::iter::once(("original", &record.beats[..], "#000000")).chain(
            series
                .iter()
                .enumerate()
                .map(|(k, (name, v))| (name.as_str(), &v[..], SERIES_COLOURS[k % SERIES_COLOURS.len()])),
        );
        for (name, values, colour) in all {
            let mut d = String::new();
            let mut pen_up = true;
            for j in 0..nb {
                if !record.valid[j] {
                    pen_up = true;
                    continue;
                }
                for t in 0..tb {
                    let k = j * tb + t;
                    let x = MARGIN + k as f64 * dx;
                    let y = mid - values[o + k] as f64 * scale;
                    let _ = write!(d, "{}{x:.3} {y:.3} ", if pen_up { "M" } else { "L" });
                    pen_up = false;
                }
                pen_up = true;
            }
            let _ = writeln!(
                s,
                r#"<path data-series="{name}" data-lead="{}" d="{}" stroke="{colour}" fill="none" stroke-width="1"/>"#,
                LEAD_NAMES[lead],
                d.trim_end()
            );
        }
    }
    s.push_str("</svg>\n");
    Ok(s)
}

/// Writes one overlay per test record into `dir`, using each checkpoint's
/// reconstruction under the shared masks.
pub fn write_recon_overlays(
    checkpoints: &[(String, Checkpoint)],
    test: &TokenDataset,
    mask_ratio: f64,
    seed: u64,
    limit: usize,
    dir: &Path,
) -> Result<Vec<std::path::PathBuf>> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let first = &checkpoints
        .first()
        .ok_or_else(|| Error::Config("no checkpoints to compare".into()))?
        .1;
    let base = fixed_masks(test, mask_ratio, first.variant, seed)?;
    let n = test.records.len().min(limit);
    let docs: Vec<(String, String)> = (0..n)
        .into_par_iter()
        .map(|i| {
            let rec = &test.records[i];
            let series = checkpoints
                .iter()
                .map(|(label, ck)| {
                    let spec = base[i].with_variant(ck.variant);
                    let r = forward_reconstruct(&ck.params, rec, &spec, &ForwardOptions::new(ck.policy))?;
                    Ok((label.clone(), r.beats))
                })
                .collect::<Result<Vec<_>>>()?;
            Ok((rec.record_id.clone(), recon_svg(rec, &base[i], &series)?))
        })
        .collect::<Result<_>>()?;
    let mut paths = Vec::with_capacity(n);
    for (id, doc) in docs {
        let p = dir.join(format!("{id}.svg"));
        std::fs::write(&p, doc).map_err(|e| Error::io(&p, e))?;
        paths.push(p);
    }
    Ok(paths)
}

/// Attention cost of one stage.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageCost {
    pub tokens: usize,
    pub layers: usize,
    /// Query-key pairs per layer.
    pub dense_pairs: usize,
    pub sparse_pairs: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Efficiency {
    pub encoder: StageCost,
    pub decoder: StageCost,
    /// Summed over all layers of both stages.
    pub pair_count_dense: usize,
    pub pair_count_sparse: usize,
    /// Score and weighted-sum multiply-adds (x2) over allowed pairs.
    pub attention_flops_sparse: f64,
    pub attention_flops_dense: f64,
    /// Q, K, V and output projections.
    pub projection_flops: f64,
    pub mlp_flops: f64,
    /// Beat projection and reconstruction head.
    pub io_flops: f64,
    pub est_flops_sparse: f64,
    pub est_flops_dense: f64,
    /// Largest single tensor (4-byte floats): attention weights or MLP hidden.
    pub peak_tensor_bytes_sparse: usize,
    pub peak_tensor_bytes_dense: usize,
}

/// Closed-form cost estimate for one forward pass on one record.
pub fn efficiency_report(cfg: &ModelConfig, spec: &MaskSpec, policy: EncoderPolicy) -> Efficiency {
    let enc = build_mask_matrix(spec, Stage::Encoder, policy);
    let dec = build_mask_matrix(spec, Stage::Decoder, policy);
    let stage = |m: &crate::mask::MaskMatrix, layers: usize| StageCost {
        tokens: m.n(),
        layers,
        dense_pairs: m.n() * m.n(),
        sparse_pairs: m.pair_count(),
    };
    let encoder = stage(&enc, cfg.enc_layers);
    let decoder = stage(&dec, cfg.dec_layers);
    let d = cfg.d_t as f64;
    let total = |f: &dyn Fn(&StageCost) -> usize| f(&encoder) * encoder.layers + f(&decoder) * decoder.layers;
    let pair_count_dense = total(&|s| s.dense_pairs);
    let pair_count_sparse = total(&|s| s.sparse_pairs);
    let token_layers = total(&|s| s.tokens) as f64;
    let projection_flops = 8.0 * token_layers * d * d;
    let mlp_flops = 4.0 * token_layers * d * cfg.mlp_dim as f64;
    let io_flops = 2.0 * (encoder.tokens + spec.n_masked()) as f64 * d * cfg.beat_len as f64;
    let attention_flops_sparse = 4.0 * pair_count_sparse as f64 * d;
    let attention_flops_dense = 4.0 * pair_count_dense as f64 * d;
    let rest = projection_flops + mlp_flops + io_flops;
    let peak = |pairs: &dyn Fn(&StageCost) -> usize| {
        [&encoder, &decoder]
            .iter()
            .map(|s| (pairs(s) * cfg.n_heads).max(s.tokens * cfg.mlp_dim.max(cfg.d_t)) * 4)
            .max()
            .unwrap_or(0)
    };
    Efficiency {
        pair_count_dense,
        pair_count_sparse,
        attention_flops_sparse,
        attention_flops_dense,
        projection_flops,
        mlp_flops,
        io_flops,
        est_flops_sparse: rest + attention_flops_sparse,
        est_flops_dense: rest + attention_flops_dense,
        peak_tensor_bytes_sparse: peak(&|s| s.sparse_pairs),
        peak_tensor_bytes_dense: peak(&|s| s.dense_pairs),
        encoder,
        decoder,
    }
}
