#![allow(dead_code)]

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use seqop_core::attention::ChunkSpec;
use seqop_core::tape::{Tape, Var};
use seqop_core::Tensor;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn randn(shape: &[usize], seed: u64) -> Tensor<f64> {
    Tensor::randn(shape, 1.0, &mut rng(seed))
}

/// `y[t] = Σ_{j ≤ t} k[j] x[t - j]`, straight from the definition.
pub fn direct_causal_conv(x: &[f64], k: &[f64]) -> Vec<f64> {
    (0..x.len())
        .map(|t| {
            (0..=t.min(k.len().saturating_sub(1)))
                .map(|j| k[j] * x[t - j])
                .sum()
        })
        .collect()
}

/// Full-length softmax attention with an explicit `L × L` score matrix.
/// Single head, `[L, E]` row-major inputs.
pub fn dense_attention(
    q: &[f64],
    k: &[f64],
    v: &[f64],
    len: usize,
    dim: usize,
    causal: bool,
) -> Vec<f64> {
    let scale = 1.0 / (dim as f64).sqrt();
    let mut out = vec![0.0; len * dim];
    for t in 0..len {
        let scores: Vec<f64> = (0..len)
            .map(|s| {
                if causal && s > t {
                    f64::NEG_INFINITY
                } else {
                    scale
                        * (0..dim)
                            .map(|e| q[t * dim + e] * k[s * dim + e])
                            .sum::<f64>()
                }
            })
            .collect();
        let m = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let w: Vec<f64> = scores.iter().map(|&s| (s - m).exp()).collect();
        let z: f64 = w.iter().sum();
        for s in 0..len {
            for e in 0..dim {
                out[t * dim + e] += w[s] / z * v[s * dim + e];
            }
        }
    }
    out
}

/// Positions `s` along axis `axis` of the input where the gradient of
/// `Σ_channels out[.., t]` is nonzero. `f` maps a tape input to the output;
/// `time_axis` is where time lives in both input and output.
pub fn gradient_support(
    x: &Tensor<f64>,
    time_axis: usize,
    t: usize,
    f: impl Fn(&mut Tape<f64>, Var) -> Var,
) -> Vec<usize> {
    let mut tape = Tape::new();
    let xv = tape.param(x.clone());
    let y = f(&mut tape, xv);
    let shape = tape.shape(y).to_vec();
    let sel = Tensor::from_fn(&shape, |i| {
        let stride: usize = shape[time_axis + 1..].iter().product();
        if (i / stride) % shape[time_axis] == t {
            1.0
        } else {
            0.0
        }
    });
    let sel = tape.constant(sel);
    let picked = tape.mul(y, sel);
    let loss = tape.sum(picked);
    let g = tape.backward(loss).unwrap();
    let g = g.get(xv).unwrap();
    let stride: usize = x.shape()[time_axis + 1..].iter().product();
    let len = x.shape()[time_axis];
    let mut hit = vec![false; len];
    for (i, &v) in g.data().iter().enumerate() {
        if v != 0.0 {
            hit[(i / stride) % len] = true;
        }
    }
    (0..len).filter(|&s| hit[s]).collect()
}

/// For output position `pos`, which input positions of q, k and v carry a
/// nonzero gradient through single-head chunked attention.
pub fn chunk_sensitivity(
    q: &Tensor<f64>,
    k: &Tensor<f64>,
    v: &Tensor<f64>,
    s: ChunkSpec,
    pos: usize,
) -> [Vec<bool>; 3] {
    let (_, l, e) = q.dims3();
    let mut tape = Tape::new();
    let vars = [q, k, v].map(|t| tape.param(t.clone()));
    let out = tape
        .chunked_attention(vars[0], vars[1], vars[2], s, 1)
        .unwrap();
    let w = Tensor::from_fn(&[1, l, e], |i| {
        if i / e == pos {
            1.0 + (i % e) as f64
        } else {
            0.0
        }
    });
    let w = tape.constant(w);
    let picked = tape.mul(out, w);
    let loss = tape.sum(picked);
    let g = tape.backward(loss).unwrap();
    vars.map(|var| {
        let g = g.get(var).unwrap();
        (0..l)
            .map(|t| g.data()[t * e..][..e].iter().any(|&x| x != 0.0))
            .collect()
    })
}
