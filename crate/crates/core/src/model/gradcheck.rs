use std::collections::{BTreeMap, BTreeSet};

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::config::{LossScope, ModelConfig};
use super::forward::{record_loss, record_loss_grad, ForwardOptions};
use super::params::{tensor_class, Params};
use crate::error::Result;
use crate::mask::{sample_masked, EncoderPolicy, MaskSpec, TokenLayout, Variant};
use crate::signal::N_LEADS;
use crate::tokenizer::TokenizedRecord;

const STEP: f64 = 1e-4;
const DENOM_FLOOR: f64 = 1e-6;

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ClassCheck {
    pub checked: usize,
    pub max_rel_error: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct GradCheckReport {
    pub checked: usize,
    pub max_rel_error: f64,
    /// `name[index]` of the worst coordinate.
    pub worst: String,
    /// Analytic and finite-difference values at the worst coordinate.
    pub worst_values: (f64, f64),
    pub per_class: BTreeMap<String, ClassCheck>,
}

/// Random Gaussian records. Every other record pads its last beat when
/// there is more than one beat.
pub fn toy_records(config: &ModelConfig, n: usize, seed: u64) -> Vec<TokenizedRecord> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, 0.5).expect("valid std");
    let (nb, tb) = (config.n_beats, config.beat_len);
    (0..n)
        .map(|i| {
            let mut valid = vec![true; nb];
            if i % 2 == 1 && nb > 1 {
                valid[nb - 1] = false;
            }
            let mut beats: Vec<f32> = (0..N_LEADS * nb * tb).map(|_| normal.sample(&mut rng) as f32).collect();
            for lead in 0..N_LEADS {
                for j in (0..nb).filter(|&j| !valid[j]) {
                    let o = (lead * nb + j) * tb;
                    beats[o..o + tb].iter_mut().for_each(|v| *v = 0.0);
                }
            }
            TokenizedRecord {
                record_id: format!("toy_{i}"),
                n_beats: nb,
                beat_len: tb,
                beats,
                beat_times: valid.iter().enumerate().map(|(j, &v)| v.then_some(j * 100)).collect(),
                valid,
                labels: BTreeSet::new(),
            }
        })
        .collect()
}

/// Compares reverse-mode gradients with central differences in `f64`.
///
/// Two toy records at mask ratio 0.5 feed a summed masked loss. Each tensor
/// class is checked at `coords_per_class` random coordinates, or at every
/// coordinate if it has fewer.
pub fn grad_check(
    config: &ModelConfig,
    variant: Variant,
    policy: EncoderPolicy,
    coords_per_class: usize,
    seed: u64,
) -> Result<GradCheckReport> {
    let mut cfg = config.clone();
    cfg.dropout = 0.0;
    let mut params: Params<f64> = Params::init(&cfg, seed)?;
    // Move away from the initial point: non-trivial norm and bias values,
    // and embeddings large enough that layer norms do not see near-constant
    // rows (whose curvature swamps a 1e-4 central difference).
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    for (name, t) in params.tensors_mut() {
        let spread = if name.ends_with(".b") || name.ends_with(".g") {
            0.2
        } else if name.ends_with(".w") {
            continue;
        } else {
            0.8
        };
        for v in t.data.iter_mut() {
            *v += rng.random_range(-spread..spread);
        }
    }
    let records = toy_records(&cfg, 2, seed.wrapping_add(1));
    let layout = TokenLayout::new(cfg.n_beats);
    let specs: Vec<MaskSpec> = records
        .iter()
        .map(|r| {
            let k = sample_masked(layout, &r.valid, 0.5, &mut rng);
            MaskSpec::new(layout, &r.valid, &k, variant)
        })
        .collect::<Result<_>>()?;
    let selections: Vec<Vec<usize>> = specs
        .iter()
        .map(|s| LossScope::Masked.selection(s))
        .collect::<Result<_>>()?;
    let opts = ForwardOptions::new(policy);

    let loss = |p: &Params<f64>| -> Result<f64> {
        let mut total = 0.0;
        for ((r, s), sel) in records.iter().zip(&specs).zip(&selections) {
            total += record_loss(p, r, s, sel, &opts)?;
        }
        Ok(total)
    };
    let mut grads = params.zeros_like();
    for ((r, s), sel) in records.iter().zip(&specs).zip(&selections) {
        record_loss_grad(&params, r, s, sel, &opts, &mut grads, None)?;
    }

    // Coordinates grouped by tensor class.
    let mut by_class: BTreeMap<String, Vec<(usize, usize)>> = BTreeMap::new();
    for (ti, (name, t)) in params.tensors().into_iter().enumerate() {
        let e = by_class.entry(tensor_class(&name)).or_default();
        e.extend((0..t.data.len()).map(|ci| (ti, ci)));
    }
    let names: Vec<String> = params.tensors().into_iter().map(|(n, _)| n).collect();
    let analytic: Vec<Vec<f64>> = grads.tensors().into_iter().map(|(_, t)| t.data.clone()).collect();

    let mut report = GradCheckReport::default();
    for (class, coords) in by_class {
        let chosen: Vec<(usize, usize)> = if coords.len() <= coords_per_class {
            coords
        } else {
            sample(&mut rng, coords.len(), coords_per_class)
                .into_iter()
                .map(|i| coords[i])
                .collect()
        };
        let mut cc = ClassCheck::default();
        for (ti, ci) in chosen {
            let orig = params.tensors()[ti].1.data[ci];
            params.tensors_mut()[ti].1.data[ci] = orig + STEP;
            let up = loss(&params)?;
            params.tensors_mut()[ti].1.data[ci] = orig - STEP;
            let down = loss(&params)?;
            params.tensors_mut()[ti].1.data[ci] = orig;
            let fd = (up - down) / (2.0 * STEP);
            let a = analytic[ti][ci];
            let rel = (a - fd).abs() / a.abs().max(fd.abs()).max(DENOM_FLOOR);
            cc.checked += 1;
            cc.max_rel_error = cc.max_rel_error.max(rel);
            if rel > report.max_rel_error || report.worst.is_empty() {
                report.max_rel_error = report.max_rel_error.max(rel);
                report.worst = format!("{}[{ci}]", names[ti]);
                report.worst_values = (a, fd);
            }
        }
        report.checked += cc.checked;
        report.per_class.insert(class, cc);
    }
    Ok(report)
}
