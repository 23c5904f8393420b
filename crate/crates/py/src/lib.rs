//! Python module `seqop`: thin wrappers over the core checks.

use pyo3::exceptions::PyValueError;
use pyo3::prelude::*;
use pyo3::types::PyDict;

use seqop_core::checks::{self, Suite};
use seqop_core::recall::{generate_dataset, RecallSpec};
use seqop_core::tcn::{self, TcnConfig};
use seqop_core::DType;

fn value_err(e: impl std::fmt::Display) -> PyErr {
    PyValueError::new_err(e.to_string())
}

/// Largest deviation between recurrent, FFT and stored-kernel EMA.
#[pyfunction]
#[pyo3(signature = (length, h=2, n=8, trials=100, seed=0, dtype="f64"))]
fn ema_equivalence<'py>(
    py: Python<'py>,
    length: usize,
    h: usize,
    n: usize,
    trials: usize,
    seed: u64,
    dtype: &str,
) -> PyResult<Bound<'py, PyDict>> {
    let r = match dtype.parse::<DType>().map_err(value_err)? {
        DType::F32 => checks::ema_equivalence::<f32>(length, h, n, trials, seed),
        DType::F64 => checks::ema_equivalence::<f64>(length, h, n, trials, seed),
    }
    .map_err(value_err)?;
    let d = PyDict::new(py);
    d.set_item("len", r.len)?;
    d.set_item("trials", r.trials)?;
    d.set_item("max_deviation", r.max_deviation)?;
    d.set_item("worst_trial", r.worst_trial)?;
    d.set_item("worst_pair", r.worst_pair)?;
    Ok(d)
}

#[pyfunction]
#[pyo3(signature = (k, f, d, b=1))]
fn receptive_field(k: usize, f: usize, d: usize, b: usize) -> PyResult<u64> {
    let cfg = TcnConfig::new(k, f, d, b).map_err(value_err)?;
    Ok(tcn::receptive_field(&cfg))
}

/// Smallest dilation factor reaching `target`; None for single-tap kernels.
#[pyfunction]
#[pyo3(signature = (k, d, target, b=1))]
fn minimal_dilation_factor(k: usize, d: usize, target: u64, b: usize) -> Option<usize> {
    tcn::minimal_dilation_factor(k, d, b, target)
}

/// Runs the float64 gradient checks; one dict per case.
#[pyfunction]
#[pyo3(signature = (module="all", seed=0, tol=1e-4))]
fn gradcheck<'py>(
    py: Python<'py>,
    module: &str,
    seed: u64,
    tol: f64,
) -> PyResult<Vec<Bound<'py, PyDict>>> {
    let suites = match module {
        "all" => Suite::ALL.to_vec(),
        m => vec![m.parse::<Suite>().map_err(value_err)?],
    };
    let mut out = Vec::new();
    for s in suites {
        for c in checks::gradcheck_suite(s, seed, false).map_err(value_err)? {
            let d = PyDict::new(py);
            d.set_item("module", s.name())?;
            d.set_item("case", c.case)?;
            d.set_item("max_rel_error", c.report.max_rel_error)?;
            d.set_item("passed", c.report.passes(tol))?;
            out.push(d);
        }
    }
    Ok(out)
}

/// `count` associative-recall samples as `(tokens, target)` pairs.
#[pyfunction]
#[pyo3(signature = (seq_len, vocab, count=1, seed=0))]
fn recall_samples(
    seq_len: usize,
    vocab: usize,
    count: usize,
    seed: u64,
) -> PyResult<Vec<(Vec<usize>, usize)>> {
    let data =
        generate_dataset(RecallSpec::new(seq_len, vocab), 0, count, seed).map_err(value_err)?;
    Ok(data
        .eval
        .into_iter()
        .map(|s| (s.tokens, s.target))
        .collect())
}

#[pymodule]
fn seqop(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("__version__", env!("CARGO_PKG_VERSION"))?;
    m.add_function(wrap_pyfunction!(ema_equivalence, m)?)?;
    m.add_function(wrap_pyfunction!(receptive_field, m)?)?;
    m.add_function(wrap_pyfunction!(minimal_dilation_factor, m)?)?;
    m.add_function(wrap_pyfunction!(gradcheck, m)?)?;
    m.add_function(wrap_pyfunction!(recall_samples, m)?)?;
    Ok(())
}
