//! TCNCA-simple: an embedding, `N` layers of TCN plus chunked attention plus
//! MLP, a final norm and a vocabulary head. The `TcnMlp` variant drops the
//! attention sub-block.

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attention::{ChunkSpec, GatedResidual, QkGen};
use crate::error::{invalid, Result};
use crate::params::{Bound, ParamId, ParamStore};
use crate::scalar::Scalar;
use crate::tape::{Tape, Var};
use crate::tcn::{minimal_dilation_factor, BlockOptions, TcnConfig, TcnStack};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    TcncaSimple,
    TcnMlp,
}

impl std::str::FromStr for Variant {
    type Err = crate::Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "tcnca_simple" => Ok(Self::TcncaSimple),
            "tcn_mlp" => Ok(Self::TcnMlp),
            _ => Err(invalid(format!(
                "unknown variant {s:?} (expected tcnca_simple or tcn_mlp)"
            ))),
        }
    }
}

/// Where the attention values are projected from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ValueSource {
    /// The TCN output `z`.
    TcnOutput,
    /// The normalized layer input the TCN reads.
    LayerInput,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub embed_dim: usize,
    pub layers: usize,
    pub tcn: TcnConfig,
    pub tcn_block: BlockOptions,
    pub chunk: ChunkSpec,
    pub heads: usize,
    pub mlp_expand: usize,
    pub dropout: f64,
    pub variant: Variant,
    pub value_source: ValueSource,
    pub tie_embeddings: bool,
}

impl ModelConfig {
    /// Associative-recall configuration: two layers, `K = 3`, `D = 4` with the
    /// smallest dilation factor covering `seq_len`; `E = chunk = 32` up to
    /// length 256 and `E = chunk = 128` beyond.
    pub fn recall(seq_len: usize, vocab_size: usize) -> Self {
        let width = if seq_len <= 256 { 32 } else { 128 };
        let f = minimal_dilation_factor(3, 4, 1, seq_len as u64).unwrap_or(1);
        Self {
            vocab_size,
            embed_dim: width,
            layers: 2,
            tcn: TcnConfig {
                kernel_size: 3,
                dilation_factor: f,
                depth: 4,
                convs_per_block: 1,
            },
            tcn_block: BlockOptions::default(),
            chunk: ChunkSpec {
                chunk: width,
                causal: true,
            },
            heads: 1,
            mlp_expand: 2,
            dropout: 0.0,
            variant: Variant::TcncaSimple,
            value_source: ValueSource::TcnOutput,
            tie_embeddings: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.tcn.validate()?;
        if self.vocab_size == 0 || self.embed_dim == 0 {
            return Err(invalid("vocab_size and embed_dim must be positive"));
        }
        if self.chunk.chunk == 0 {
            return Err(invalid("chunk size must be positive"));
        }
        if self.heads == 0 || self.embed_dim % self.heads != 0 {
            return Err(invalid(format!(
                "{} heads do not divide embed_dim {}",
                self.heads, self.embed_dim
            )));
        }
        if self.mlp_expand == 0 {
            return Err(invalid("mlp_expand must be positive"));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(invalid(format!(
                "dropout must lie in [0, 1), got {}",
                self.dropout
            )));
        }
        Ok(())
    }

    /// Analytic parameter count.
    pub fn count_params(&self) -> usize {
        let (v, e) = (self.vocab_size, self.embed_dim);
        let linear = |i: usize, o: usize| i * o + o;
        let hidden = self.mlp_expand * e;
        let attn = match self.variant {
            Variant::TcncaSimple => {
                linear(e, e) + QkGen::param_count(e) + linear(e, e) + GatedResidual::param_count(e)
            }
            Variant::TcnMlp => 0,
        };
        let layer = 2 * e
            + TcnStack::param_count(&self.tcn, e, self.tcn_block)
            + attn
            + 2 * e
            + linear(e, hidden)
            + linear(hidden, e);
        let final_norm = if self.layers > 0 { 2 * e } else { 0 };
        let head = if self.tie_embeddings { v } else { linear(e, v) };
        v * e + self.layers * layer + final_norm + head
    }
}

pub fn count_params(cfg: &ModelConfig) -> usize {
    cfg.count_params()
}

#[derive(Debug, Clone, Copy)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Linear {
    /// Weights normal with std `1/√in`, bias zero.
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        inputs: usize,
        outputs: usize,
        rng: &mut R,
    ) -> Self {
        let std = 1.0 / (inputs as f64).sqrt();
        Self {
            weight: store.add(
                format!("{name}.weight"),
                Tensor::randn(&[inputs, outputs], std, rng),
            ),
            bias: store.add(format!("{name}.bias"), Tensor::zeros(&[outputs])),
        }
    }

    pub fn apply<T: Scalar>(&self, tape: &mut Tape<T>, p: &Bound, x: Var) -> Var {
        tape.linear(x, p[self.weight], p[self.bias])
    }
}

#[derive(Debug, Clone, Copy)]
pub struct Norm {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl Norm {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, dim: usize) -> Self {
        Self {
            gain: store.add(format!("{name}.gain"), Tensor::ones(&[dim])),
            bias: store.add(format!("{name}.bias"), Tensor::zeros(&[dim])),
        }
    }

    pub fn apply<T: Scalar>(&self, tape: &mut Tape<T>, p: &Bound, x: Var) -> Var {
        tape.layer_norm(x, p[self.gain], p[self.bias])
    }
}

#[derive(Debug, Clone, Copy)]
pub struct AttentionBlock {
    pub value: Linear,
    pub qk: QkGen,
    pub out: Linear,
    pub gate: GatedResidual,
}

#[derive(Debug, Clone)]
pub struct Layer {
    pub norm: Norm,
    pub tcn: TcnStack,
    pub attention: Option<AttentionBlock>,
    pub mlp_norm: Norm,
    pub mlp_in: Linear,
    pub mlp_out: Linear,
}

/// Forward-pass mode: evaluation, or training with dropout drawn from `rng`.
pub enum Mode<'a> {
    Eval,
    Train(&'a mut dyn RngCore),
}

impl Mode<'_> {
    fn dropout<T: Scalar>(&mut self, tape: &mut Tape<T>, x: Var, p: f64) -> Var {
        match self {
            Mode::Eval => x,
            Mode::Train(rng) => tape.dropout(x, p, true, &mut **rng),
        }
    }
}

#[derive(Debug, Clone)]
pub struct Model<T> {
    pub config: ModelConfig,
    pub store: ParamStore<T>,
    pub embedding: ParamId,
    pub layers: Vec<Layer>,
    pub final_norm: Option<Norm>,
    pub head: Option<ParamId>,
    pub head_bias: ParamId,
}

impl<T: Scalar> Model<T> {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (v, e) = (config.vocab_size, config.embed_dim);
        let mut store = ParamStore::new();
        let embedding = store.add("embedding", Tensor::randn(&[v, e], 1.0, &mut rng));
        let mut layers = Vec::with_capacity(config.layers);
        for i in 0..config.layers {
            let p = format!("layer{i}");
            let norm = Norm::new(&mut store, &format!("{p}.norm"), e);
            let tcn = TcnStack::new(
                config.tcn,
                e,
                config.tcn_block,
                &mut store,
                &format!("{p}.tcn"),
                &mut rng,
            )?;
            let attention = (config.variant == Variant::TcncaSimple).then(|| AttentionBlock {
                value: Linear::new(&mut store, &format!("{p}.attn.value"), e, e, &mut rng),
                qk: QkGen::new(&mut store, &format!("{p}.attn.qk"), e, &mut rng),
                out: Linear::new(&mut store, &format!("{p}.attn.out"), e, e, &mut rng),
                gate: GatedResidual::new(&mut store, &format!("{p}.attn.gate"), e, &mut rng),
            });
            let hidden = config.mlp_expand * e;
            let mlp_norm = Norm::new(&mut store, &format!("{p}.mlp.norm"), e);
            let mlp_in = Linear::new(&mut store, &format!("{p}.mlp.in"), e, hidden, &mut rng);
            let mlp_out = Linear::new(&mut store, &format!("{p}.mlp.out"), hidden, e, &mut rng);
            layers.push(Layer {
                norm,
                tcn,
                attention,
                mlp_norm,
                mlp_in,
                mlp_out,
            });
        }
        let final_norm = (config.layers > 0).then(|| Norm::new(&mut store, "final_norm", e));
        let head = (!config.tie_embeddings).then(|| {
            store.add(
                "head.weight",
                Tensor::randn(&[e, v], 1.0 / (e as f64).sqrt(), &mut rng),
            )
        });
        let head_bias = store.add("head.bias", Tensor::zeros(&[v]));
        Ok(Self {
            config,
            store,
            embedding,
            layers,
            final_norm,
            head,
            head_bias,
        })
    }

    pub fn param_count(&self) -> usize {
        self.store.numel()
    }

    fn layer_forward(
        &self,
        layer: &Layer,
        tape: &mut Tape<T>,
        p: &Bound,
        x: Var,
        mode: &mut Mode,
    ) -> Result<Var> {
        let drop = self.config.dropout;
        let h = layer.norm.apply(tape, p, x);
        let z = layer.tcn.forward(tape, p, h)?;
        let x = match &layer.attention {
            Some(a) => {
                let src = match self.config.value_source {
                    ValueSource::TcnOutput => z,
                    ValueSource::LayerInput => h,
                };
                let v = a.value.apply(tape, p, src);
                let (q, k) = a.qk.apply(tape, p, z);
                let att = tape.chunked_attention(q, k, v, self.config.chunk, self.config.heads)?;
                let att = a.out.apply(tape, p, att);
                let att = mode.dropout(tape, att, drop);
                a.gate.apply(tape, p, att, x, z)
            }
            None => {
                let z = mode.dropout(tape, z, drop);
                tape.add(x, z)
            }
        };
        let m = layer.mlp_norm.apply(tape, p, x);
        let m = layer.mlp_in.apply(tape, p, m);
        let m = tape.silu(m);
        let m = layer.mlp_out.apply(tape, p, m);
        let m = mode.dropout(tape, m, drop);
        Ok(tape.add(x, m))
    }

    fn seq_len(&self, tokens: &[usize], batch: usize) -> Result<usize> {
        if batch == 0 || tokens.is_empty() || tokens.len() % batch != 0 {
            return Err(invalid(format!(
                "{} tokens do not split into {batch} non-empty sequences",
                tokens.len()
            )));
        }
        Ok(tokens.len() / batch)
    }

    /// Final hidden states `[B, L, E]` for `batch` concatenated sequences.
    pub fn hidden(
        &self,
        tape: &mut Tape<T>,
        p: &Bound,
        tokens: &[usize],
        batch: usize,
        mode: &mut Mode,
    ) -> Result<Var> {
        let len = self.seq_len(tokens, batch)?;
        let mut x = tape.embedding(p[self.embedding], tokens, &[batch, len])?;
        for layer in &self.layers {
            x = self.layer_forward(layer, tape, p, x, mode)?;
        }
        Ok(match self.final_norm {
            Some(n) => n.apply(tape, p, x),
            None => x,
        })
    }

    fn project(&self, tape: &mut Tape<T>, p: &Bound, h: Var) -> Var {
        let w = match self.head {
            Some(w) => p[w],
            None => {
                let (v, e) = (self.config.vocab_size, self.config.embed_dim);
                let t = tape.reshape(p[self.embedding], &[1, v, e]);
                let t = tape.transpose_last2(t);
                tape.reshape(t, &[e, v])
            }
        };
        tape.linear(h, w, p[self.head_bias])
    }

    /// Logits `[B, L, vocab]`.
    pub fn forward(
        &self,
        tape: &mut Tape<T>,
        p: &Bound,
        tokens: &[usize],
        batch: usize,
        mode: &mut Mode,
    ) -> Result<Var> {
        let h = self.hidden(tape, p, tokens, batch, mode)?;
        Ok(self.project(tape, p, h))
    }

    /// Logits at the last position only, `[B, vocab]`.
    pub fn forward_last(
        &self,
        tape: &mut Tape<T>,
        p: &Bound,
        tokens: &[usize],
        batch: usize,
        mode: &mut Mode,
    ) -> Result<Var> {
        let len = self.seq_len(tokens, batch)?;
        let h = self.hidden(tape, p, tokens, batch, mode)?;
        let h = tape.take_step(h, len - 1);
        Ok(self.project(tape, p, h))
    }

    /// Mean cross-entropy of the final-position prediction.
    pub fn loss(
        &self,
        tape: &mut Tape<T>,
        p: &Bound,
        tokens: &[usize],
        targets: &[usize],
        mode: &mut Mode,
    ) -> Result<Var> {
        let logits = self.forward_last(tape, p, tokens, targets.len(), mode)?;
        tape.cross_entropy(logits, targets)
    }

    /// Evaluation-mode logits `[B, L, vocab]`.
    pub fn logits(&self, tokens: &[usize], batch: usize) -> Result<Tensor<T>> {
        let mut tape = Tape::new();
        let p = self.store.bind_frozen(&mut tape);
        let out = self.forward(&mut tape, &p, tokens, batch, &mut Mode::Eval)?;
        Ok(tape.value(out).clone())
    }

    /// Argmax of the final-position logits for each sequence.
    pub fn predict_last(&self, tokens: &[usize], batch: usize) -> Result<Vec<usize>> {
        let mut tape = Tape::new();
        let p = self.store.bind_frozen(&mut tape);
        let out = self.forward_last(&mut tape, &p, tokens, batch, &mut Mode::Eval)?;
        Ok(tape
            .value(out)
            .data()
            .chunks_exact(self.config.vocab_size)
            .map(|row| {
                row.iter()
                    .enumerate()
                    .fold(0, |best, (i, &v)| if v > row[best] { i } else { best })
            })
            .collect())
    }
}
