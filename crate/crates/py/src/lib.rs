//! Python bindings: mask construction, AUC metrics, the synthetic generator,
//! R-peak detection, checkpoint inspection and the command-line entry point.

use pyo3::exceptions::{PyIOError, PyValueError};
use pyo3::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use clearhug::eval;
use clearhug::mask::{self, EncoderPolicy, MaskSpec, Stage, TokenLayout, Variant};
use clearhug::model::load_checkpoint;
use clearhug::signal::EcgRecord;
use clearhug::synth::{generate_record, SynthConfig};
use clearhug::tokenizer::detect_r_peaks as detect;
use clearhug::Error;

fn py_err(e: Error) -> PyErr {
    match e {
        Error::Io { .. } => PyIOError::new_err(e.to_string()),
        _ => PyValueError::new_err(e.to_string()),
    }
}

fn parse_stage(s: &str) -> PyResult<Stage> {
    match s.to_ascii_lowercase().as_str() {
        "encoder" => Ok(Stage::Encoder),
        "decoder" => Ok(Stage::Decoder),
        other => Err(PyValueError::new_err(format!(
            "unknown stage {other:?} (encoder|decoder)"
        ))),
    }
}

fn build_spec(n_beats: usize, masked: Vec<usize>, variant: &str, valid: Option<Vec<bool>>) -> PyResult<MaskSpec> {
    let variant: Variant = variant.parse().map_err(py_err)?;
    let valid = valid.unwrap_or_else(|| vec![true; n_beats]);
    if n_beats == 0 || valid.len() != n_beats {
        return Err(PyValueError::new_err(
            "need n_beats >= 1 and one validity flag per beat",
        ));
    }
    let mut masked = masked;
    masked.sort_unstable();
    MaskSpec::new(TokenLayout::new(n_beats), &valid, &masked, variant).map_err(py_err)
}

/// Sorted allow set of layout position `p` (0-based: cls i at i, beat (i, j)
/// at 12 + i*n_beats + j).
#[pyfunction]
#[pyo3(signature = (p, n_beats, masked, variant = "clear", valid = None))]
fn allow_set(
    p: usize,
    n_beats: usize,
    masked: Vec<usize>,
    variant: &str,
    valid: Option<Vec<bool>>,
) -> PyResult<Vec<usize>> {
    let spec = build_spec(n_beats, masked, variant, valid)?;
    if p >= spec.layout.total() {
        return Err(PyValueError::new_err(format!(
            "position {p} outside layout of {}",
            spec.layout.total()
        )));
    }
    Ok(mask::allow_set(p, &spec))
}

/// Full-layout boolean attention mask for one stage.
#[pyfunction]
#[pyo3(signature = (n_beats, masked, variant = "clear", stage = "decoder", policy = "paper-literal", valid = None))]
fn mask_matrix(
    n_beats: usize,
    masked: Vec<usize>,
    variant: &str,
    stage: &str,
    policy: &str,
    valid: Option<Vec<bool>>,
) -> PyResult<Vec<Vec<bool>>> {
    let spec = build_spec(n_beats, masked, variant, valid)?;
    let policy: EncoderPolicy = policy.parse().map_err(py_err)?;
    let m = mask::build_mask_matrix(&spec, parse_stage(stage)?, policy);
    let total = spec.layout.total();
    let dense = m.to_layout_dense(total);
    Ok(dense.chunks(total).map(|r| r.to_vec()).collect())
}

/// Seeded masked-position sample.
#[pyfunction]
#[pyo3(signature = (n_beats, ratio, seed, valid = None))]
fn sample_masked(n_beats: usize, ratio: f64, seed: u64, valid: Option<Vec<bool>>) -> PyResult<Vec<usize>> {
    if !(0.0..=1.0).contains(&ratio) {
        return Err(PyValueError::new_err("ratio must lie in [0, 1]"));
    }
    let valid = valid.unwrap_or_else(|| vec![true; n_beats]);
    Ok(mask::sample_masked(
        TokenLayout::new(n_beats),
        &valid,
        ratio,
        &mut ChaCha8Rng::seed_from_u64(seed),
    ))
}

#[pyfunction]
fn roc_auc(scores: Vec<f64>, labels: Vec<bool>) -> PyResult<f64> {
    eval::roc_auc(&scores, &labels).map_err(py_err)
}

/// Returns `(macro_auc, per_class_auc, excluded_classes)`.
#[pyfunction]
fn macro_auc(
    scores: Vec<Vec<f64>>,
    labels: Vec<Vec<bool>>,
    classes: Vec<String>,
) -> PyResult<(f64, Vec<(String, f64)>, Vec<String>)> {
    let m = eval::macro_auc(&scores, &labels, &classes).map_err(py_err)?;
    Ok((m.macro_auc, m.per_class.into_iter().collect(), m.excluded))
}

/// A synthetic 12-lead record with its planted R peaks.
#[pyclass(frozen, get_all)]
struct SynthEcg {
    record_id: String,
    sample_rate: u32,
    leads: Vec<Vec<f32>>,
    peaks: Vec<usize>,
    label: String,
    rate_bpm: f64,
}

#[pyfunction]
#[pyo3(signature = (seed, index, n_records = 100))]
fn synth_record(seed: u64, index: usize, n_records: usize) -> PyResult<SynthEcg> {
    let cfg = SynthConfig {
        seed,
        n_records,
        ..SynthConfig::default()
    };
    let r = generate_record(&cfg, index).map_err(py_err)?;
    Ok(SynthEcg {
        leads: (0..12).map(|i| r.record.lead(i).to_vec()).collect(),
        record_id: r.record.record_id,
        sample_rate: r.record.sample_rate,
        peaks: r.peaks,
        label: r.class.name().to_string(),
        rate_bpm: r.rate_bpm,
    })
}

#[pyfunction]
fn detect_r_peaks(leads: Vec<Vec<f32>>, sample_rate: u32) -> PyResult<Vec<usize>> {
    let rec = EcgRecord::new("python", sample_rate, leads).map_err(py_err)?;
    detect(&rec).map_err(py_err)
}

/// Header fields and parameter count of a checkpoint file.
#[pyfunction]
fn checkpoint_info(path: &str) -> PyResult<(String, String, u32, usize)> {
    let ck = load_checkpoint(std::path::Path::new(path)).map_err(py_err)?;
    let n: usize = ck.params.tensors().iter().map(|(_, t)| t.data.len()).sum();
    Ok((ck.variant.name().to_string(), ck.policy.name().to_string(), ck.epoch, n))
}

/// Runs the command-line interface with `args` (without the program name)
/// and returns its exit code.
#[pyfunction]
fn run_cli(args: Vec<String>) -> i32 {
    clearhug::cli::run(std::iter::once("clearhug".to_string()).chain(args))
}

#[pymodule]
#[pyo3(name = "clearhug")]
fn clearhug_module(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("__version__", env!("CARGO_PKG_VERSION"))?;
    m.add_class::<SynthEcg>()?;
    m.add_function(wrap_pyfunction!(allow_set, m)?)?;
    m.add_function(wrap_pyfunction!(mask_matrix, m)?)?;
    m.add_function(wrap_pyfunction!(sample_masked, m)?)?;
    m.add_function(wrap_pyfunction!(roc_auc, m)?)?;
    m.add_function(wrap_pyfunction!(macro_auc, m)?)?;
    m.add_function(wrap_pyfunction!(synth_record, m)?)?;
    m.add_function(wrap_pyfunction!(detect_r_peaks, m)?)?;
    m.add_function(wrap_pyfunction!(checkpoint_info, m)?)?;
    m.add_function(wrap_pyfunction!(run_cli, m)?)?;
    Ok(())
}
