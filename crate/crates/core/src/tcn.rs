//! Temporal convolutional network: `D` residual blocks of causal depthwise
//! dilated convolutions, block `i` dilated by `f^i`.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::ops::ConvLayout;
use crate::params::{Bound, ParamId, ParamStore};
use crate::scalar::Scalar;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// `(K, f, D, B)`: kernel size, dilation factor, depth, convolutions per
/// residual block.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TcnConfig {
    pub kernel_size: usize,
    pub dilation_factor: usize,
    pub depth: usize,
    pub convs_per_block: usize,
}

impl TcnConfig {
    pub fn new(
        kernel_size: usize,
        dilation_factor: usize,
        depth: usize,
        convs_per_block: usize,
    ) -> Result<Self> {
        let cfg = Self {
            kernel_size,
            dilation_factor,
            depth,
            convs_per_block,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.kernel_size == 0
            || self.dilation_factor == 0
            || self.depth == 0
            || self.convs_per_block == 0
        {
            return Err(invalid(format!(
                "TCN hyperparameters must all be >= 1, got {self:?}"
            )));
        }
        Ok(())
    }

    /// Dilation used by every convolution in block `block`.
    pub fn dilation(&self, block: usize) -> usize {
        self.dilation_factor.pow(block as u32)
    }

    /// `1 + B (K-1) (f^D - 1) / (f - 1)`, or `1 + B (K-1) D` when `f = 1`.
    /// Saturates at `u64::MAX`.
    pub fn receptive_field(&self) -> u64 {
        let (k, f, d, b) = (
            self.kernel_size as u128,
            self.dilation_factor as u128,
            self.depth as u32,
            self.convs_per_block as u128,
        );
        let geometric = if f == 1 {
            Some(d as u128)
        } else {
            f.checked_pow(d).map(|p| (p - 1) / (f - 1))
        };
        geometric
            .and_then(|g| g.checked_mul(b * (k - 1)))
            .and_then(|v| v.checked_add(1))
            .and_then(|v| u64::try_from(v).ok())
            .unwrap_or(u64::MAX)
    }

    pub fn conv_count(&self) -> usize {
        self.depth * self.convs_per_block
    }
}

pub fn receptive_field(cfg: &TcnConfig) -> u64 {
    cfg.receptive_field()
}

/// Smallest dilation factor whose receptive field reaches `target`, or
/// `None` when no factor can (single-tap kernels).
pub fn minimal_dilation_factor(
    kernel_size: usize,
    depth: usize,
    convs_per_block: usize,
    target: u64,
) -> Option<usize> {
    if target <= 1 {
        return Some(1);
    }
    if kernel_size < 2 {
        return None;
    }
    (1..).find(|&f| {
        TcnConfig {
            kernel_size,
            dilation_factor: f,
            depth,
            convs_per_block,
        }
        .receptive_field()
            >= target
    })
}

/// Which parts of the block interior are present besides the convolutions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlockOptions {
    /// Layer norm over channels before the convolutions.
    pub norm: bool,
    /// Pointwise channel-mixing affine map after the convolutions.
    pub channel_mix: bool,
}

impl Default for BlockOptions {
    fn default() -> Self {
        Self {
            norm: true,
            channel_mix: true,
        }
    }
}

#[derive(Debug, Clone)]
pub struct TcnBlock {
    pub dilation: usize,
    pub kernels: Vec<ParamId>,
    pub norm: Option<(ParamId, ParamId)>,
    pub mix: Option<(ParamId, ParamId)>,
}

/// Per-embedding-dimension TCN. Each block computes
/// `y = x + SiLU(mix(conv_B(… conv_1(norm(x)))))`.
#[derive(Debug, Clone)]
pub struct TcnStack {
    pub config: TcnConfig,
    pub channels: usize,
    pub options: BlockOptions,
    pub blocks: Vec<TcnBlock>,
}

impl TcnStack {
    /// Kernels start normal with std `1/√K`; the channel mix starts at
    /// identity plus noise of std 0.01.
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        config: TcnConfig,
        channels: usize,
        options: BlockOptions,
        store: &mut ParamStore<T>,
        prefix: &str,
        rng: &mut R,
    ) -> Result<Self> {
        config.validate()?;
        if channels == 0 {
            return Err(invalid("TCN needs at least one channel"));
        }
        let k = config.kernel_size;
        let blocks = (0..config.depth)
            .map(|i| {
                let p = format!("{prefix}.block{i}");
                let kernels = (0..config.convs_per_block)
                    .map(|j| {
                        store.add(
                            format!("{p}.conv{j}"),
                            Tensor::randn(&[channels, k], 1.0 / (k as f64).sqrt(), rng),
                        )
                    })
                    .collect();
                let norm = options.norm.then(|| {
                    (
                        store.add(format!("{p}.norm.gain"), Tensor::ones(&[channels])),
                        store.add(format!("{p}.norm.bias"), Tensor::zeros(&[channels])),
                    )
                });
                let mix = options.channel_mix.then(|| {
                    let mut w = Tensor::<T>::randn(&[channels, channels], 0.01, rng);
                    for c in 0..channels {
                        w.data_mut()[c * channels + c] += T::one();
                    }
                    (
                        store.add(format!("{p}.mix.weight"), w),
                        store.add(format!("{p}.mix.bias"), Tensor::zeros(&[channels])),
                    )
                });
                TcnBlock {
                    dilation: config.dilation(i),
                    kernels,
                    norm,
                    mix,
                }
            })
            .collect();
        Ok(Self {
            config,
            channels,
            options,
            blocks,
        })
    }

    pub fn param_count(config: &TcnConfig, channels: usize, options: BlockOptions) -> usize {
        let per_block = config.convs_per_block * channels * config.kernel_size
            + if options.norm { 2 * channels } else { 0 }
            + if options.channel_mix {
                channels * channels + channels
            } else {
                0
            };
        config.depth * per_block
    }

    /// Parameters in the dilated kernels alone: `D·B·E·K`.
    pub fn conv_param_count(&self) -> usize {
        self.config.conv_count() * self.channels * self.config.kernel_size
    }

    /// One residual block on a channels-last `[B, L, E]` value.
    pub fn block_forward<T: Scalar>(
        &self,
        i: usize,
        tape: &mut Tape<T>,
        p: &Bound,
        x: Var,
    ) -> Result<Var> {
        let block = &self.blocks[i];
        let mut h = match block.norm {
            Some((g, b)) => tape.layer_norm(x, p[g], p[b]),
            None => x,
        };
        for &k in &block.kernels {
            h = tape.conv1d_dilated(h, p[k], block.dilation, true, ConvLayout::ChannelsLast)?;
        }
        if let Some((w, b)) = block.mix {
            h = tape.linear(h, p[w], p[b]);
        }
        let h = tape.silu(h);
        Ok(tape.add(x, h))
    }

    /// All blocks on a channels-last `[B, L, E]` value.
    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, p: &Bound, x: Var) -> Result<Var> {
        (0..self.blocks.len()).try_fold(x, |h, i| self.block_forward(i, tape, p, h))
    }

    fn check_input<T: Scalar>(&self, x: &Tensor<T>) -> Result<()> {
        match x.shape() {
            [_, e, _] if *e == self.channels => Ok(()),
            s => Err(invalid(format!(
                "TCN expects [B, {}, L], got {s:?}",
                self.channels
            ))),
        }
    }

    fn run<T: Scalar>(
        &self,
        x: &Tensor<T>,
        store: &ParamStore<T>,
        body: impl FnOnce(&mut Tape<T>, &Bound, Var) -> Result<Var>,
    ) -> Result<Tensor<T>> {
        self.check_input(x)?;
        let mut tape = Tape::new();
        let p = store.bind_frozen(&mut tape);
        let xv = tape.constant(x.clone());
        let h = tape.transpose_last2(xv);
        let h = body(&mut tape, &p, h)?;
        let y = tape.transpose_last2(h);
        Ok(tape.value(y).clone())
    }
}

/// One residual block applied to a `[B, E, L]` tensor.
pub fn tcn_block<T: Scalar>(
    x: &Tensor<T>,
    stack: &TcnStack,
    block: usize,
    store: &ParamStore<T>,
) -> Result<Tensor<T>> {
    if block >= stack.blocks.len() {
        return Err(invalid(format!(
            "block {block} out of range for depth {}",
            stack.blocks.len()
        )));
    }
    stack.run(x, store, |tape, p, h| {
        stack.block_forward(block, tape, p, h)
    })
}

/// The full stack applied to a `[B, E, L]` tensor.
pub fn tcn_forward<T: Scalar>(
    x: &Tensor<T>,
    stack: &TcnStack,
    store: &ParamStore<T>,
) -> Result<Tensor<T>> {
    stack.run(x, store, |tape, p, h| stack.forward(tape, p, h))
}
