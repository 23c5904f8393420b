//! Chunked attention: softmax attention restricted to fixed-width,
//! non-overlapping windows, so the attention matrix is block diagonal.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::ops::nn::softmax_row_backward;
use crate::ops::softmax_row_in_place;
use crate::params::{Bound, ParamId, ParamStore};
use crate::scalar::Scalar;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ChunkSpec {
    pub chunk: usize,
    pub causal: bool,
}

impl ChunkSpec {
    pub fn new(chunk: usize, causal: bool) -> Result<Self> {
        if chunk == 0 {
            return Err(invalid("chunk size must be positive"));
        }
        Ok(Self { chunk, causal })
    }

    pub fn num_chunks(&self, len: usize) -> usize {
        len.div_ceil(self.chunk)
    }

    /// Whether query position `t` may attend to key position `s`.
    pub fn allows(&self, t: usize, s: usize) -> bool {
        t / self.chunk == s / self.chunk && (!self.causal || s <= t)
    }

    /// `(start, width)` of every chunk of a length-`len` sequence.
    pub fn spans(&self, len: usize) -> impl Iterator<Item = (usize, usize)> + '_ {
        (0..len)
            .step_by(self.chunk)
            .map(move |s| (s, self.chunk.min(len - s)))
    }
}

/// A `[B, L, E]` tensor split into `[B·⌈L/c⌉, c, E]` chunks. The tail
/// chunk is zero padded; `mask[i]` is false on padded slots.
#[derive(Debug, Clone, PartialEq)]
pub struct Partitioned<T> {
    pub chunks: Tensor<T>,
    pub mask: Vec<bool>,
    pub len: usize,
}

pub fn chunk_partition<T: Scalar>(x: &Tensor<T>, c: usize) -> Result<Partitioned<T>> {
    if c == 0 {
        return Err(invalid("chunk size must be positive"));
    }
    let (b, l, e) = match x.shape() {
        [b, l, e] => (*b, *l, *e),
        s => {
            return Err(invalid(format!(
                "chunk_partition expects [B, L, E], got {s:?}"
            )))
        }
    };
    let n = l.div_ceil(c);
    let mut data = vec![T::zero(); b * n * c * e];
    let mut mask = vec![false; b * n * c];
    for bi in 0..b {
        for t in 0..l {
            let slot = (bi * n + t / c) * c + t % c;
            mask[slot] = true;
            data[slot * e..(slot + 1) * e].copy_from_slice(&x.data()[(bi * l + t) * e..][..e]);
        }
    }
    Ok(Partitioned {
        chunks: Tensor::from_parts(vec![b * n, c, e], data),
        mask,
        len: l,
    })
}

/// Inverse of [`chunk_partition`]: drops padded slots.
pub fn chunk_unpartition<T: Scalar>(p: &Partitioned<T>) -> Tensor<T> {
    let (bn, c, e) = p.chunks.dims3();
    let l = p.len;
    let n = l.div_ceil(c).max(1);
    let b = if l == 0 { 0 } else { bn / n };
    let data: Vec<T> = p
        .chunks
        .data()
        .chunks_exact(e.max(1))
        .zip(&p.mask)
        .filter(|(_, &m)| m)
        .flat_map(|(row, _)| row.iter().copied())
        .collect();
    Tensor::from_parts(vec![b, l, e], data)
}

/// Multiply-add count of one chunked attention call: scores and the
/// weighted sum of values each cost `2·m²·E` per chunk of width `m`, the
/// softmax `3·m²`.
pub fn attention_flops(len: usize, dim: usize, spec: &ChunkSpec) -> u64 {
    spec.spans(len)
        .map(|(_, m)| (m * m) as u64 * (4 * dim as u64 + 3))
        .sum()
}

#[derive(Debug, Clone, Copy)]
struct AttnGeom {
    batch: usize,
    len: usize,
    dim: usize,
    heads: usize,
    head_dim: usize,
    spec: ChunkSpec,
}

impl AttnGeom {
    fn new(q: &[usize], k: &[usize], v: &[usize], spec: ChunkSpec, heads: usize) -> Result<Self> {
        let (batch, len, dim) = match q {
            [b, l, e] => (*b, *l, *e),
            s => return Err(invalid(format!("attention expects [B, L, E], got {s:?}"))),
        };
        if k != q || v != q {
            return Err(invalid(format!("q, k, v shapes differ: {q:?} {k:?} {v:?}")));
        }
        if heads == 0 || dim % heads != 0 {
            return Err(invalid(format!(
                "{heads} heads do not divide dimension {dim}"
            )));
        }
        if spec.chunk == 0 {
            return Err(invalid("chunk size must be positive"));
        }
        Ok(Self {
            batch,
            len,
            dim,
            heads,
            head_dim: dim / heads,
            spec,
        })
    }

    fn scale<T: Scalar>(&self) -> T {
        T::cast(1.0 / (self.head_dim as f64).sqrt())
    }

    fn block_len(&self) -> usize {
        self.spec.chunk * self.spec.chunk
    }

    /// Offset of the `[c, c]` probability block of (batch, chunk, head).
    fn block(&self, b: usize, ci: usize, h: usize) -> usize {
        ((b * self.spec.num_chunks(self.len) + ci) * self.heads + h) * self.block_len()
    }

    fn at(&self, b: usize, t: usize, h: usize) -> usize {
        (b * self.len + t) * self.dim + h * self.head_dim
    }

    fn prob_len(&self) -> usize {
        self.batch * self.spec.num_chunks(self.len) * self.heads * self.block_len()
    }
}

fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    a.iter().zip(b).fold(T::zero(), |acc, (&x, &y)| acc + x * y)
}

fn axpy<T: Scalar>(alpha: T, x: &[T], y: &mut [T]) {
    for (yv, &xv) in y.iter_mut().zip(x) {
        *yv += alpha * xv;
    }
}

/// Returns the output and the `[c, c]` probability blocks.
fn attn_forward<T: Scalar>(g: &AttnGeom, q: &[T], k: &[T], v: &[T]) -> (Vec<T>, Vec<T>) {
    let (c, dh) = (g.spec.chunk, g.head_dim);
    let scale = g.scale::<T>();
    let mut out = vec![T::zero(); q.len()];
    let mut probs = vec![T::zero(); g.prob_len()];
    for b in 0..g.batch {
        for (ci, (s0, m)) in g.spec.spans(g.len).enumerate() {
            for h in 0..g.heads {
                let blk = g.block(b, ci, h);
                for i in 0..m {
                    let qi = &q[g.at(b, s0 + i, h)..][..dh];
                    let row = &mut probs[blk + i * c..][..m];
                    let visible = if g.spec.causal { i + 1 } else { m };
                    for (j, r) in row.iter_mut().enumerate() {
                        *r = if j < visible {
                            scale * dot(qi, &k[g.at(b, s0 + j, h)..][..dh])
                        } else {
                            T::neg_infinity()
                        };
                    }
                    softmax_row_in_place(row);
                    let oi = g.at(b, s0 + i, h);
                    for (j, &p) in row.iter().enumerate().take(visible) {
                        axpy(p, &v[g.at(b, s0 + j, h)..][..dh], &mut out[oi..oi + dh]);
                    }
                }
            }
        }
    }
    (out, probs)
}

fn attn_backward<T: Scalar>(
    g: &AttnGeom,
    q: &[T],
    k: &[T],
    v: &[T],
    probs: &[T],
    grad: &[T],
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let (c, dh) = (g.spec.chunk, g.head_dim);
    let scale = g.scale::<T>();
    let (mut dq, mut dk, mut dv) = (
        vec![T::zero(); q.len()],
        vec![T::zero(); k.len()],
        vec![T::zero(); v.len()],
    );
    let mut dp = vec![T::zero(); c];
    let mut ds = vec![T::zero(); c];
    for b in 0..g.batch {
        for (ci, (s0, m)) in g.spec.spans(g.len).enumerate() {
            for h in 0..g.heads {
                let blk = g.block(b, ci, h);
                for i in 0..m {
                    let p = &probs[blk + i * c..][..m];
                    let oi = g.at(b, s0 + i, h);
                    let go = &grad[oi..oi + dh];
                    let visible = if g.spec.causal { i + 1 } else { m };
                    for j in 0..m {
                        let vj = g.at(b, s0 + j, h);
                        dp[j] = if j < visible {
                            dot(go, &v[vj..vj + dh])
                        } else {
                            T::zero()
                        };
                        if j < visible {
                            axpy(p[j], go, &mut dv[vj..vj + dh]);
                        }
                    }
                    softmax_row_backward(p, &dp[..m], &mut ds[..m]);
                    for j in 0..visible {
                        let s = ds[j] * scale;
                        let kj = g.at(b, s0 + j, h);
                        axpy(s, &k[kj..kj + dh], &mut dq[oi..oi + dh]);
                        axpy(s, &q[oi..oi + dh], &mut dk[kj..kj + dh]);
                    }
                }
            }
        }
    }
    (dq, dk, dv)
}

/// Multi-head chunked attention on `[B, L, E]` tensors, logits scaled by
/// `1/√(E/heads)`.
pub fn attend<T: Scalar>(
    q: &Tensor<T>,
    k: &Tensor<T>,
    v: &Tensor<T>,
    spec: ChunkSpec,
    heads: usize,
) -> Result<Tensor<T>> {
    let g = AttnGeom::new(q.shape(), k.shape(), v.shape(), spec, heads)?;
    let (out, _) = attn_forward(&g, q.data(), k.data(), v.data());
    Ok(Tensor::from_parts(q.shape().to_vec(), out))
}

/// Dense single-head attention matrix `[B, L, L]` implied by `q`, `k`;
/// entries outside the chunk pattern are exactly zero.
pub fn attention_weights<T: Scalar>(
    q: &Tensor<T>,
    k: &Tensor<T>,
    spec: ChunkSpec,
) -> Result<Tensor<T>> {
    let g = AttnGeom::new(q.shape(), k.shape(), q.shape(), spec, 1)?;
    let (_, probs) = attn_forward(&g, q.data(), k.data(), q.data());
    let (l, c) = (g.len, spec.chunk);
    let mut dense = vec![T::zero(); g.batch * l * l];
    for b in 0..g.batch {
        for (ci, (s0, m)) in spec.spans(l).enumerate() {
            let blk = g.block(b, ci, 0);
            for i in 0..m {
                let dst = &mut dense[(b * l + s0 + i) * l + s0..][..m];
                dst.copy_from_slice(&probs[blk + i * c..][..m]);
            }
        }
    }
    Ok(Tensor::from_parts(vec![g.batch, l, l], dense))
}

impl<T: Scalar> Tape<T> {
    /// Differentiable [`attend`].
    pub fn chunked_attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        spec: ChunkSpec,
        heads: usize,
    ) -> Result<Var> {
        let g = AttnGeom::new(self.shape(q), self.shape(k), self.shape(v), spec, heads)?;
        let (out, probs) = attn_forward(
            &g,
            self.value(q).data(),
            self.value(k).data(),
            self.value(v).data(),
        );
        let shape = self.shape(q).to_vec();
        let out = Tensor::from_parts(shape.clone(), out);
        Ok(
            self.record("chunked_attention", &[q, k, v], out, move |ctx| {
                let (q, k, v) = (
                    ctx.inputs[0].data(),
                    ctx.inputs[1].data(),
                    ctx.inputs[2].data(),
                );
                let (dq, dk, dv) = attn_backward(&g, q, k, v, &probs, ctx.grad.data());
                vec![
                    Some(Tensor::from_parts(shape.clone(), dq)),
                    Some(Tensor::from_parts(shape.clone(), dk)),
                    Some(Tensor::from_parts(shape.clone(), dv)),
                ]
            }),
        )
    }
}

/// Diagonal query/key generation from a shared input:
/// `Q = q_scale ⊙ z + q_bias`, `K = k_scale ⊙ z + k_bias`.
#[derive(Debug, Clone, Copy)]
pub struct QkGen {
    pub q_scale: ParamId,
    pub q_bias: ParamId,
    pub k_scale: ParamId,
    pub k_bias: ParamId,
}

impl QkGen {
    /// Scales start at one plus noise of std 0.02, biases at zero.
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        prefix: &str,
        dim: usize,
        rng: &mut R,
    ) -> Self {
        let mut scale = |name: &str, rng: &mut R| {
            let t = Tensor::<T>::randn(&[dim], 0.02, rng).map(|v| v + T::one());
            store.add(format!("{prefix}.{name}"), t)
        };
        let q_scale = scale("q_scale", rng);
        let k_scale = scale("k_scale", rng);
        let q_bias = store.add(format!("{prefix}.q_bias"), Tensor::zeros(&[dim]));
        let k_bias = store.add(format!("{prefix}.k_bias"), Tensor::zeros(&[dim]));
        Self {
            q_scale,
            q_bias,
            k_scale,
            k_bias,
        }
    }

    pub fn param_count(dim: usize) -> usize {
        4 * dim
    }

    pub fn apply<T: Scalar>(&self, tape: &mut Tape<T>, p: &Bound, z: Var) -> (Var, Var) {
        let q = tape.mul_diag(z, p[self.q_scale]);
        let q = tape.add_bias(q, p[self.q_bias]);
        let k = tape.mul_diag(z, p[self.k_scale]);
        let k = tape.add_bias(k, p[self.k_bias]);
        (q, k)
    }
}

/// Highway-style gate `g = σ(z W + b)` mixing `g ⊙ candidate + (1-g) ⊙ carry`.
#[derive(Debug, Clone, Copy)]
pub struct GatedResidual {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl GatedResidual {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        prefix: &str,
        dim: usize,
        rng: &mut R,
    ) -> Self {
        let weight = store.add(
            format!("{prefix}.weight"),
            Tensor::randn(&[dim, dim], 1.0 / (dim as f64).sqrt(), rng),
        );
        let bias = store.add(format!("{prefix}.bias"), Tensor::zeros(&[dim]));
        Self { weight, bias }
    }

    pub fn param_count(dim: usize) -> usize {
        dim * dim + dim
    }

    pub fn gate<T: Scalar>(&self, tape: &mut Tape<T>, p: &Bound, z: Var) -> Var {
        let pre = tape.linear(z, p[self.weight], p[self.bias]);
        tape.sigmoid(pre)
    }

    pub fn apply<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        p: &Bound,
        candidate: Var,
        carry: Var,
        z: Var,
    ) -> Var {
        let g = self.gate(tape, p, z);
        tape.gate_mix(g, candidate, carry)
    }
}

fn eval<T: Scalar>(
    store: &ParamStore<T>,
    inputs: &[&Tensor<T>],
    f: impl FnOnce(&mut Tape<T>, &Bound, &[Var]) -> Result<Var>,
) -> Result<Tensor<T>> {
    let mut tape = Tape::new();
    let p = store.bind_frozen(&mut tape);
    let vars: Vec<Var> = inputs.iter().map(|t| tape.constant((*t).clone())).collect();
    let out = f(&mut tape, &p, &vars)?;
    Ok(tape.value(out).clone())
}

/// Queries and keys from `z` via `qk`, values `v`, attended per `spec`.
pub fn chunked_attention<T: Scalar>(
    z: &Tensor<T>,
    v: &Tensor<T>,
    qk: &QkGen,
    store: &ParamStore<T>,
    spec: ChunkSpec,
) -> Result<Tensor<T>> {
    eval(store, &[z, v], |tape, p, x| {
        let (q, k) = qk.apply(tape, p, x[0]);
        tape.chunked_attention(q, k, x[1], spec, 1)
    })
}

pub fn gated_residual<T: Scalar>(
    candidate: &Tensor<T>,
    carry: &Tensor<T>,
    gr: &GatedResidual,
    store: &ParamStore<T>,
    z: &Tensor<T>,
) -> Result<Tensor<T>> {
    if candidate.shape() != carry.shape() {
        return Err(invalid(format!(
            "candidate {:?} and carry {:?} differ",
            candidate.shape(),
            carry.shape()
        )));
    }
    eval(store, &[candidate, carry, z], |tape, p, x| {
        Ok(gr.apply(tape, p, x[0], x[1], x[2]))
    })
}
