//! Depthwise dilated convolution and FFT long convolution.

use crate::error::{invalid, Result};
use crate::fft::{convolve_rows, reverse_rows, Grouping};
use crate::scalar::Scalar;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Memory layout of a rank-3 sequence tensor.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ConvLayout {
    /// `[batch, channels, len]`
    ChannelsFirst,
    /// `[batch, len, channels]`
    ChannelsLast,
}

#[derive(Debug, Clone, Copy)]
struct ConvGeom {
    channels: usize,
    len: usize,
    taps: usize,
    dilation: usize,
    // Output t reads input t + shift - k * dilation.
    shift: usize,
    layout: ConvLayout,
    grouping: Grouping,
}

impl ConvGeom {
    fn new(
        x_shape: &[usize],
        w_shape: &[usize],
        dilation: usize,
        causal: bool,
        layout: ConvLayout,
    ) -> Result<Self> {
        if dilation == 0 {
            return Err(invalid("dilation must be a positive integer"));
        }
        let (channels, len) = match (x_shape, layout) {
            ([_, c, l], ConvLayout::ChannelsFirst) => (*c, *l),
            ([_, l, c], ConvLayout::ChannelsLast) => (*c, *l),
            _ => {
                return Err(invalid(format!(
                    "conv input must be rank 3, got {x_shape:?}"
                )))
            }
        };
        let (groups, taps) = match w_shape {
            [g, k] => (*g, *k),
            _ => {
                return Err(invalid(format!(
                    "conv kernel must be [channels, taps], got {w_shape:?}"
                )))
            }
        };
        if taps == 0 {
            return Err(invalid("kernel needs at least one tap"));
        }
        let grouping = Grouping::new(channels, groups)?;
        let shift = if causal { 0 } else { (taps - 1) * dilation / 2 };
        Ok(Self {
            channels,
            len,
            taps,
            dilation,
            shift,
            layout,
            grouping,
        })
    }

    /// Offset `o` such that tap `k` pairs output `t` with input `t - o`.
    fn offset(&self, k: usize) -> isize {
        (k * self.dilation) as isize - self.shift as isize
    }

    /// Output positions `t` with `0 <= t - o < len`.
    fn valid(&self, o: isize) -> std::ops::Range<usize> {
        let l = self.len as isize;
        let lo = o.max(0).min(l);
        let hi = (l + o).clamp(0, l);
        lo as usize..hi.max(lo) as usize
    }

    /// Per-channel weights laid out `[taps][channels]`.
    fn expand_weights<T: Scalar>(&self, w: &[T]) -> Vec<T> {
        let mut out = vec![T::zero(); self.taps * self.channels];
        for k in 0..self.taps {
            for c in 0..self.channels {
                out[k * self.channels + c] = w[self.grouping.group_of_row(c) * self.taps + k];
            }
        }
        out
    }
}

/// Output positions per tile in the channels-first forward loop.
const CONV_TILE: usize = 2048;

fn conv_forward<T: Scalar>(g: &ConvGeom, x: &[T], w: &[T]) -> Vec<T> {
    let mut y = vec![T::zero(); x.len()];
    conv_forward_into(g, x, w, &mut y);
    y
}

/// Overwrites `y` with the convolution of `x`.
fn conv_forward_into<T: Scalar>(g: &ConvGeom, x: &[T], w: &[T], y: &mut [T]) {
    y.fill(T::zero());
    if x.is_empty() {
        return;
    }
    match g.layout {
        ConvLayout::ChannelsFirst => {
            for (r, (xr, yr)) in x
                .chunks_exact(g.len)
                .zip(y.chunks_exact_mut(g.len))
                .enumerate()
            {
                let wr = &w[g.grouping.group_of_row(r) * g.taps..][..g.taps];
                // All taps per output tile, so long rows stay in cache.
                for start in (0..g.len).step_by(CONV_TILE) {
                    let end = (start + CONV_TILE).min(g.len);
                    for (k, &wk) in wr.iter().enumerate() {
                        let o = g.offset(k);
                        let v = g.valid(o);
                        let range = v.start.max(start)..v.end.min(end);
                        if range.is_empty() {
                            continue;
                        }
                        let src = (range.start as isize - o) as usize;
                        for (yv, &xv) in yr[range.clone()]
                            .iter_mut()
                            .zip(&xr[src..src + range.len()])
                        {
                            *yv += wk * xv;
                        }
                    }
                }
            }
        }
        ConvLayout::ChannelsLast => {
            let c = g.channels;
            let we = g.expand_weights(w);
            for (xb, yb) in x.chunks_exact(g.len * c).zip(y.chunks_exact_mut(g.len * c)) {
                for k in 0..g.taps {
                    let o = g.offset(k);
                    let wk = &we[k * c..(k + 1) * c];
                    for t in g.valid(o) {
                        let s = (t as isize - o) as usize;
                        let yr = &mut yb[t * c..(t + 1) * c];
                        let xr = &xb[s * c..(s + 1) * c];
                        for ((yv, &xv), &wv) in yr.iter_mut().zip(xr).zip(wk) {
                            *yv += wv * xv;
                        }
                    }
                }
            }
        }
    }
}

fn conv_backward<T: Scalar>(g: &ConvGeom, x: &[T], w: &[T], gy: &[T]) -> (Vec<T>, Vec<T>) {
    let mut gx = vec![T::zero(); x.len()];
    let mut gw = vec![T::zero(); w.len()];
    if x.is_empty() {
        return (gx, gw);
    }
    match g.layout {
        ConvLayout::ChannelsFirst => {
            for (r, ((xr, gyr), gxr)) in x
                .chunks_exact(g.len)
                .zip(gy.chunks_exact(g.len))
                .zip(gx.chunks_exact_mut(g.len))
                .enumerate()
            {
                let grp = g.grouping.group_of_row(r);
                for k in 0..g.taps {
                    let wk = w[grp * g.taps + k];
                    let o = g.offset(k);
                    let range = g.valid(o);
                    if range.is_empty() {
                        continue;
                    }
                    let src = (range.start as isize - o) as usize;
                    let n = range.len();
                    let mut acc = T::zero();
                    for ((&gv, gxv), &xv) in gyr[range]
                        .iter()
                        .zip(&mut gxr[src..src + n])
                        .zip(&xr[src..src + n])
                    {
                        *gxv += wk * gv;
                        acc += gv * xv;
                    }
                    gw[grp * g.taps + k] += acc;
                }
            }
        }
        ConvLayout::ChannelsLast => {
            let c = g.channels;
            let we = g.expand_weights(w);
            let mut gwe = vec![T::zero(); g.taps * c];
            for ((xb, gyb), gxb) in x
                .chunks_exact(g.len * c)
                .zip(gy.chunks_exact(g.len * c))
                .zip(gx.chunks_exact_mut(g.len * c))
            {
                for k in 0..g.taps {
                    let o = g.offset(k);
                    let wk = &we[k * c..(k + 1) * c];
                    let gwk = &mut gwe[k * c..(k + 1) * c];
                    for t in g.valid(o) {
                        let s = (t as isize - o) as usize;
                        let gyr = &gyb[t * c..(t + 1) * c];
                        let xr = &xb[s * c..(s + 1) * c];
                        let gxr = &mut gxb[s * c..(s + 1) * c];
                        for ch in 0..c {
                            gxr[ch] += wk[ch] * gyr[ch];
                            gwk[ch] += gyr[ch] * xr[ch];
                        }
                    }
                }
            }
            for k in 0..g.taps {
                for ch in 0..c {
                    gw[g.grouping.group_of_row(ch) * g.taps + k] += gwe[k * c + ch];
                }
            }
        }
    }
    (gx, gw)
}

/// Depthwise dilated convolution of `x` (`[B, C, L]`) with `w` (`[G, K]`,
/// `G` dividing `C`; `G == C` is the plain depthwise case):
/// `y[b,c,t] = Σ_k w[c,k] · x[b,c,t - k·dilation]`.
///
/// With `causal_left_pad` the sequence is zero-padded on the left by
/// `dilation·(K-1)`; otherwise the taps are centred. Output length always
/// equals input length.
pub fn conv1d_dilated<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    dilation: usize,
    causal_left_pad: bool,
) -> Result<Tensor<T>> {
    let g = ConvGeom::new(
        x.shape(),
        w.shape(),
        dilation,
        causal_left_pad,
        ConvLayout::ChannelsFirst,
    )?;
    Ok(Tensor::from_parts(
        x.shape().to_vec(),
        conv_forward(&g, x.data(), w.data()),
    ))
}

/// [`conv1d_dilated`] writing into a caller-owned buffer of `x.numel()`
/// values, so repeated calls allocate nothing.
pub fn conv1d_dilated_into<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    dilation: usize,
    causal_left_pad: bool,
    out: &mut [T],
) -> Result<()> {
    let g = ConvGeom::new(
        x.shape(),
        w.shape(),
        dilation,
        causal_left_pad,
        ConvLayout::ChannelsFirst,
    )?;
    check_out(x, out)?;
    conv_forward_into(&g, x.data(), w.data(), out);
    Ok(())
}

fn check_out<T: Scalar>(x: &Tensor<T>, out: &[T]) -> Result<()> {
    if out.len() != x.numel() {
        return Err(invalid(format!(
            "output buffer holds {} values, input has {}",
            out.len(),
            x.numel()
        )));
    }
    Ok(())
}

/// Causal long convolution of every row of `x` (`[B, C, L]`) with its
/// group's kernel from `k` (`[G, Lk]`), evaluated with FFTs. Returns the
/// first `L` outputs per row.
pub fn fft_convolve<T: Scalar>(x: &Tensor<T>, k: &Tensor<T>) -> Result<Tensor<T>> {
    let mut out = vec![T::zero(); x.numel()];
    fft_convolve_into(x, k, &mut out)?;
    Ok(Tensor::from_parts(x.shape().to_vec(), out))
}

/// [`fft_convolve`] writing into a caller-owned buffer of `x.numel()` values.
pub fn fft_convolve_into<T: Scalar>(x: &Tensor<T>, k: &Tensor<T>, out: &mut [T]) -> Result<()> {
    let (_, c, l) = rank3(x)?;
    let (groups, klen) = match k.shape() {
        [g, kl] => (*g, *kl),
        s => return Err(invalid(format!("kernel must be [groups, len], got {s:?}"))),
    };
    if l == 0 || klen == 0 {
        return Err(invalid("convolution length must be positive"));
    }
    let grouping = Grouping::new(c, groups)?;
    check_out(x, out)?;
    convolve_rows(x.data(), l, k.data(), klen, grouping, out);
    Ok(())
}

fn rank3<T: Scalar>(x: &Tensor<T>) -> Result<(usize, usize, usize)> {
    match x.shape() {
        [a, b, c] => Ok((*a, *b, *c)),
        s => Err(invalid(format!("expected a rank-3 tensor, got {s:?}"))),
    }
}

impl<T: Scalar> Tape<T> {
    /// Differentiable [`conv1d_dilated`] in either layout.
    pub fn conv1d_dilated(
        &mut self,
        x: Var,
        w: Var,
        dilation: usize,
        causal: bool,
        layout: ConvLayout,
    ) -> Result<Var> {
        let g = ConvGeom::new(self.shape(x), self.shape(w), dilation, causal, layout)?;
        let y = conv_forward(&g, self.value(x).data(), self.value(w).data());
        let y = Tensor::from_parts(self.shape(x).to_vec(), y);
        Ok(self.record("conv1d_dilated", &[x, w], y, move |ctx| {
            let (gx, gw) = conv_backward(
                &g,
                ctx.inputs[0].data(),
                ctx.inputs[1].data(),
                ctx.grad.data(),
            );
            vec![
                Some(Tensor::from_parts(ctx.inputs[0].shape().to_vec(), gx)),
                Some(Tensor::from_parts(ctx.inputs[1].shape().to_vec(), gw)),
            ]
        }))
    }

    /// Differentiable [`fft_convolve`].
    pub fn fft_convolve(&mut self, x: Var, k: Var) -> Result<Var> {
        let y = fft_convolve(self.value(x), self.value(k))?;
        let (b, c, l) = y.dims3();
        let (groups, klen) = self.value(k).dims2();
        let grouping = Grouping::new(c, groups)?;
        Ok(self.record("fft_convolve", &[x, k], y, move |ctx| {
            let (xv, kv) = (ctx.inputs[0].data(), ctx.inputs[1].data());
            let mut rev_g = ctx.grad.data().to_vec();
            reverse_rows(&mut rev_g, l);

            // dx[s] = Σ_t g[t] k[t - s]: correlation, as a reversed convolution.
            let mut gx = vec![T::zero(); xv.len()];
            convolve_rows(&rev_g, l, kv, klen, grouping, &mut gx);
            reverse_rows(&mut gx, l);

            // dk[j] = Σ_s g[s + j] x[s], summed over the rows of each group.
            let mut corr = vec![T::zero(); xv.len()];
            convolve_rows(&rev_g, l, xv, l, Grouping::depthwise(b * c), &mut corr);
            reverse_rows(&mut corr, l);
            let mut gk = vec![T::zero(); kv.len()];
            let taps = klen.min(l);
            for (r, row) in corr.chunks_exact(l).enumerate() {
                let dst = &mut gk[grouping.group_of_row(r) * klen..][..taps];
                for (d, &v) in dst.iter_mut().zip(row) {
                    *d += v;
                }
            }
            vec![
                Some(Tensor::from_parts(vec![b, c, l], gx)),
                Some(Tensor::from_parts(vec![groups, klen], gk)),
            ]
        }))
    }
}
