//! Canned verification runs shared by the CLI and the acceptance target:
//! three-way EMA equivalence and per-module gradient checks.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::attention::{ChunkSpec, GatedResidual, QkGen};
use crate::ema::{ema_fft, ema_fft_pregen, ema_kernel, ema_recurrent, EmaParams, EmaVars};
use crate::error::{invalid, Result};
use crate::gradcheck::{gradcheck_many, GradcheckReport, DEFAULT_EPS};
use crate::model::{Mode, Model, ModelConfig, Variant};
use crate::ops::ConvLayout;
use crate::params::{Bound, ParamStore};
use crate::scalar::Scalar;
use crate::tape::{Tape, Var};
use crate::tcn::{BlockOptions, TcnConfig, TcnStack};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Serialize)]
pub struct Equivalence {
    pub len: usize,
    pub trials: usize,
    /// Largest pairwise deviation between the three modes over all trials.
    pub max_deviation: f64,
    pub worst_trial: usize,
    /// Which pair of modes disagreed most.
    pub worst_pair: &'static str,
}

/// Runs recurrent, FFT and stored-kernel EMA on `trials` random parameter
/// draws with `h` features and expansion `n` over `2h` channels. The stored
/// kernel is generated at `len + trial % 3` so truncation is exercised.
pub fn ema_equivalence<T: Scalar>(
    len: usize,
    h: usize,
    n: usize,
    trials: usize,
    seed: u64,
) -> Result<Equivalence> {
    if len == 0 || h == 0 || n == 0 {
        return Err(invalid("len, features and expansion must be positive"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Equivalence {
        len,
        trials,
        max_deviation: 0.0,
        worst_trial: 0,
        worst_pair: "none",
    };
    for trial in 0..trials {
        let p = EmaParams::<T>::sample(h, n, 1.0, &mut rng);
        let x = Tensor::<T>::randn(&[1, 2 * h, len], 1.0, &mut rng);
        let rec = ema_recurrent(&x, &p)?;
        let fft = ema_fft(&x, &p)?;
        let pre = ema_fft_pregen(&x, &ema_kernel(&p, len + trial % 3)?)?;
        for (pair, a, b) in [
            ("recurrent/fft", &rec, &fft),
            ("recurrent/pregen", &rec, &pre),
            ("fft/pregen", &fft, &pre),
        ] {
            let d = a.max_abs_diff(b).as_f64();
            if d > out.max_deviation || d.is_nan() {
                out.max_deviation = d;
                out.worst_trial = trial;
                out.worst_pair = pair;
            }
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Suite {
    Ema,
    Tcn,
    Attn,
    Model,
}

impl Suite {
    pub const ALL: [Suite; 4] = [Suite::Ema, Suite::Tcn, Suite::Attn, Suite::Model];

    pub fn name(self) -> &'static str {
        match self {
            Suite::Ema => "ema",
            Suite::Tcn => "tcn",
            Suite::Attn => "attn",
            Suite::Model => "model",
        }
    }
}

impl std::str::FromStr for Suite {
    type Err = crate::Error;

    fn from_str(s: &str) -> Result<Self> {
        Suite::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| {
                invalid(format!(
                    "unknown module {s:?}, expected ema, tcn, attn or model"
                ))
            })
    }
}

#[derive(Debug, Clone)]
pub struct CaseResult {
    pub suite: Suite,
    pub case: &'static str,
    pub report: GradcheckReport,
}

type Case = (
    &'static str,
    Box<dyn Fn(&mut Tape<f64>, &[Var]) -> Result<Var>>,
    Vec<Tensor<f64>>,
);

fn randn(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::randn(shape, 1.0, rng)
}

/// `Σ w ⊙ y` with fixed random weights, so every output coordinate matters.
fn weighted_sum(tape: &mut Tape<f64>, y: Var, w: &Tensor<f64>) -> Var {
    let w = tape.constant(w.clone());
    let yw = tape.mul(y, w);
    tape.sum(yw)
}

fn store_inputs(store: &ParamStore<f64>) -> Vec<Tensor<f64>> {
    store.iter().map(|(_, t)| t.clone()).collect()
}

fn ema_cases(rng: &mut ChaCha8Rng) -> Vec<Case> {
    let p = EmaParams::<f64>::sample(2, 3, 1.0, rng);
    let x = randn(&[2, 4, 12], rng);
    let w = randn(&[2, 4, 12], rng);
    let inputs = vec![x.clone(), p.raw_alpha, p.raw_delta, p.beta, p.eta];
    let vars = |v: &[Var]| EmaVars {
        raw_alpha: v[1],
        raw_delta: v[2],
        beta: v[3],
        eta: v[4],
    };
    let (w1, w2, w3) = (w.clone(), w.clone(), w);
    vec![
        (
            "recurrent",
            Box::new(move |t, v| {
                let y = vars(v).recurrent(t, v[0])?;
                Ok(weighted_sum(t, y, &w1))
            }),
            inputs.clone(),
        ),
        (
            "fft",
            Box::new(move |t, v| {
                let y = vars(v).fft(t, v[0])?;
                Ok(weighted_sum(t, y, &w2))
            }),
            inputs,
        ),
        (
            "stored_kernel",
            Box::new(move |t, v| {
                let y = t.fft_convolve(v[0], v[1])?;
                Ok(weighted_sum(t, y, &w3))
            }),
            vec![x, randn(&[2, 15], rng)],
        ),
    ]
}

fn tcn_cases(rng: &mut ChaCha8Rng) -> Result<Vec<Case>> {
    let mut cases: Vec<Case> = Vec::new();
    for (name, causal, layout, shape) in [
        ("conv_causal", true, ConvLayout::ChannelsLast, [2, 11, 3]),
        (
            "conv_centered",
            false,
            ConvLayout::ChannelsFirst,
            [2, 3, 11],
        ),
    ] {
        let w = randn(&shape, rng);
        cases.push((
            name,
            Box::new(move |t, v| {
                let y = t.conv1d_dilated(v[0], v[1], 2, causal, layout)?;
                Ok(weighted_sum(t, y, &w))
            }),
            vec![randn(&shape, rng), randn(&[3, 3], rng)],
        ));
    }
    let mut store = ParamStore::new();
    let stack = TcnStack::new(
        TcnConfig::new(3, 2, 2, 2)?,
        3,
        BlockOptions::default(),
        &mut store,
        "tcn",
        rng,
    )?;
    let mut inputs = vec![randn(&[2, 10, 3], rng)];
    inputs.extend(store_inputs(&store));
    let w = randn(&[2, 10, 3], rng);
    cases.push((
        "stack",
        Box::new(move |t, v| {
            let p = Bound::from_vars(v[1..].to_vec());
            let y = stack.forward(t, &p, v[0])?;
            Ok(weighted_sum(t, y, &w))
        }),
        inputs,
    ));
    Ok(cases)
}

fn attn_cases(rng: &mut ChaCha8Rng) -> Result<Vec<Case>> {
    let mut cases: Vec<Case> = Vec::new();
    for (name, len, chunk, causal, heads) in [
        ("chunked_causal", 7, 3, true, 1),
        ("chunked_bidirectional_heads", 10, 4, false, 2),
    ] {
        let spec = ChunkSpec::new(chunk, causal)?;
        let w = randn(&[2, len, 4], rng);
        cases.push((
            name,
            Box::new(move |t, v| {
                let y = t.chunked_attention(v[0], v[1], v[2], spec, heads)?;
                Ok(weighted_sum(t, y, &w))
            }),
            (0..3).map(|_| randn(&[2, len, 4], rng)).collect(),
        ));
    }
    let dim = 4;
    let mut store = ParamStore::new();
    let qk = QkGen::new(&mut store, "qk", dim, rng);
    let gate = GatedResidual::new(&mut store, "gate", dim, rng);
    let mut inputs = vec![randn(&[1, 9, dim], rng), randn(&[1, 9, dim], rng)];
    inputs.extend(store_inputs(&store));
    let w = randn(&[1, 9, dim], rng);
    let spec = ChunkSpec::new(4, true)?;
    cases.push((
        "qk_and_gate",
        Box::new(move |t, v| {
            let p = Bound::from_vars(v[2..].to_vec());
            let (q, k) = qk.apply(t, &p, v[0]);
            let att = t.chunked_attention(q, k, v[1], spec, 1)?;
            let out = gate.apply(t, &p, att, v[1], v[0]);
            Ok(weighted_sum(t, out, &w))
        }),
        inputs,
    ));
    Ok(cases)
}

fn model_cases(rng: &mut ChaCha8Rng) -> Result<Vec<Case>> {
    let mut cases: Vec<Case> = Vec::new();
    for (name, variant) in [
        ("tcnca_simple_loss", Variant::TcncaSimple),
        ("tcn_mlp_loss", Variant::TcnMlp),
    ] {
        let cfg = ModelConfig {
            embed_dim: 8,
            tcn: TcnConfig::new(3, 2, 3, 1)?,
            chunk: ChunkSpec::new(4, true)?,
            variant,
            ..ModelConfig::recall(16, 10)
        };
        let model = Model::<f64>::new(cfg, rand::Rng::random(rng))?;
        let tokens: Vec<usize> = (0..32)
            .map(|_| rand::Rng::random_range(rng, 0..10))
            .collect();
        let targets = [
            rand::Rng::random_range(rng, 5..10),
            rand::Rng::random_range(rng, 5..10),
        ];
        let inputs = store_inputs(&model.store);
        cases.push((
            name,
            Box::new(move |t, v| {
                let p = Bound::from_vars(v.to_vec());
                model.loss(t, &p, &tokens, &targets, &mut Mode::Eval)
            }),
            inputs,
        ));
    }
    Ok(cases)
}

/// Adds `Σ x²` through an op whose backward claims `3x`. Used to prove a
/// broken backward is caught.
fn faulty_term(tape: &mut Tape<f64>, x: Var) -> Var {
    let out = tape.value(x).map(|v| v * v);
    let sq = tape.record("faulty_square", &[x], out, |ctx| {
        vec![Some(ctx.inputs[0].zip_map(ctx.grad, |v, g| 3.0 * v * g))]
    });
    tape.sum(sq)
}

/// Runs every case of `suite` in float64 with central differences. With
/// `inject_fault`, each objective gains a term with a deliberately wrong
/// backward.
pub fn gradcheck_suite(suite: Suite, seed: u64, inject_fault: bool) -> Result<Vec<CaseResult>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cases = match suite {
        Suite::Ema => ema_cases(&mut rng),
        Suite::Tcn => tcn_cases(&mut rng)?,
        Suite::Attn => attn_cases(&mut rng)?,
        Suite::Model => model_cases(&mut rng)?,
    };
    cases
        .into_iter()
        .map(|(case, f, inputs)| {
            let report = gradcheck_many(
                |tape: &mut Tape<f64>, v: &[Var]| {
                    let y = f(tape, v)?;
                    Ok(if inject_fault {
                        let bad = faulty_term(tape, v[0]);
                        tape.add(y, bad)
                    } else {
                        y
                    })
                },
                &inputs,
                DEFAULT_EPS,
            )?;
            Ok(CaseResult {
                suite,
                case,
                report,
            })
        })
        .collect()
}
