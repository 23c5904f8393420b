//! Multi-dimensional damped exponential moving average.
//!
//! Each of `h` features expands into `n` hidden states:
//!
//! ```text
//! u_t = (α⊙β) x_t + (1 - α⊙δ) ⊙ u_{t-1},   u_{-1} = 0
//! y_t = Σ_i η_i u_t[i]
//! ```
//!
//! Unrolling gives the impulse response `k[t] = Σ_i η_i α_i β_i (1 - α_i δ_i)^t`,
//! so the same map is a causal convolution with `k`. Three evaluation modes
//! are provided: the recurrence, kernel generation followed by an FFT
//! convolution, and FFT convolution with a stored kernel truncated to length.
//!
//! Inputs are `[B, C, L]` with `C` a multiple of `h`; contiguous runs of
//! `C / h` channels share one feature's parameters.

use rand::Rng;

use crate::error::{invalid, Result};
use crate::fft::Grouping;
use crate::ops::conv::{fft_convolve, fft_convolve_into};
use crate::scalar::Scalar;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct EmaParams<T> {
    /// Pre-sigmoid α, `[h, n]`.
    pub raw_alpha: Tensor<T>,
    /// Pre-sigmoid δ, `[h, n]`.
    pub raw_delta: Tensor<T>,
    /// Expansion weights, `[h, n]`.
    pub beta: Tensor<T>,
    /// Projection weights, `[h, n]`.
    pub eta: Tensor<T>,
}

/// Derived per-state coefficients: input gain `a = α β`, decay `q = 1 - α δ`
/// and projection `η`, each `[h, n]`.
#[derive(Debug, Clone, PartialEq)]
pub struct EmaCoefficients<T> {
    pub a: Tensor<T>,
    pub q: Tensor<T>,
    pub eta: Tensor<T>,
}

fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

impl<T: Scalar> EmaParams<T> {
    pub fn new(
        raw_alpha: Tensor<T>,
        raw_delta: Tensor<T>,
        beta: Tensor<T>,
        eta: Tensor<T>,
    ) -> Result<Self> {
        let shape = raw_alpha.shape().to_vec();
        if shape.len() != 2 {
            return Err(invalid(format!(
                "EMA parameters must be [h, n], got {shape:?}"
            )));
        }
        for (name, t) in [("raw_delta", &raw_delta), ("beta", &beta), ("eta", &eta)] {
            if t.shape() != shape.as_slice() {
                return Err(invalid(format!(
                    "EMA {name} has shape {:?}, expected {shape:?}",
                    t.shape()
                )));
            }
        }
        Ok(Self {
            raw_alpha,
            raw_delta,
            beta,
            eta,
        })
    }

    /// Builds parameters from constrained α, δ in `[0, 1]`. The endpoints map
    /// to infinite raw values, which the sigmoid sends back exactly.
    pub fn from_constrained(
        alpha: &Tensor<T>,
        delta: &Tensor<T>,
        beta: Tensor<T>,
        eta: Tensor<T>,
    ) -> Result<Self> {
        for (name, t) in [("alpha", alpha), ("delta", delta)] {
            if t.data().iter().any(|&v| !(v >= T::zero() && v <= T::one())) {
                return Err(invalid(format!("{name} must lie in [0, 1]")));
            }
        }
        let raw = |t: &Tensor<T>| t.map(|v| T::cast(logit(v.as_f64())));
        Self::new(raw(alpha), raw(delta), beta, eta)
    }

    /// Scalar-path parameters: `n = 1`, `β = η = 1`.
    pub fn scalar(h: usize, alpha: f64, delta: f64) -> Result<Self> {
        Self::from_constrained(
            &Tensor::full(&[h, 1], T::cast(alpha)),
            &Tensor::full(&[h, 1], T::cast(delta)),
            Tensor::ones(&[h, 1]),
            Tensor::ones(&[h, 1]),
        )
    }

    /// Training initialization: α in roughly (0.1, 0.9), δ in roughly
    /// (0.5, 0.99), β and η normal with std 0.02.
    pub fn init<R: Rng + ?Sized>(h: usize, n: usize, rng: &mut R) -> Self {
        Self::sample(h, n, 0.02, rng)
    }

    /// Same α/δ ranges as [`init`](Self::init) with a chosen std for β and η.
    pub fn sample<R: Rng + ?Sized>(h: usize, n: usize, weight_std: f64, rng: &mut R) -> Self {
        let shape = [h, n];
        Self {
            raw_alpha: Tensor::uniform(&shape, logit(0.1), logit(0.9), rng),
            raw_delta: Tensor::uniform(&shape, logit(0.5), logit(0.99), rng),
            beta: Tensor::randn(&shape, weight_std, rng),
            eta: Tensor::randn(&shape, weight_std, rng),
        }
    }

    pub fn features(&self) -> usize {
        self.raw_alpha.shape()[0]
    }

    pub fn expansion(&self) -> usize {
        self.raw_alpha.shape()[1]
    }

    pub fn param_count(&self) -> usize {
        4 * self.features() * self.expansion()
    }

    pub fn alpha(&self) -> Tensor<T> {
        self.raw_alpha.map(crate::ops::sigmoid)
    }

    pub fn delta(&self) -> Tensor<T> {
        self.raw_delta.map(crate::ops::sigmoid)
    }

    pub fn coefficients(&self) -> EmaCoefficients<T> {
        let alpha = self.alpha();
        let delta = self.delta();
        EmaCoefficients {
            a: alpha.zip_map(&self.beta, |a, b| a * b),
            q: alpha.zip_map(&delta, |a, d| a * d).map(|v| T::one() - v),
            eta: self.eta.clone(),
        }
    }

    pub fn register(&self, tape: &mut Tape<T>) -> EmaVars {
        EmaVars {
            raw_alpha: tape.param(self.raw_alpha.clone()),
            raw_delta: tape.param(self.raw_delta.clone()),
            beta: tape.param(self.beta.clone()),
            eta: tape.param(self.eta.clone()),
        }
    }
}

/// EMA parameters registered on a tape.
#[derive(Debug, Clone, Copy)]
pub struct EmaVars {
    pub raw_alpha: Var,
    pub raw_delta: Var,
    pub beta: Var,
    pub eta: Var,
}

impl EmaVars {
    /// `(a, q, η)` as differentiable tape values.
    pub fn coefficients<T: Scalar>(&self, tape: &mut Tape<T>) -> (Var, Var, Var) {
        let alpha = tape.sigmoid(self.raw_alpha);
        let delta = tape.sigmoid(self.raw_delta);
        let a = tape.mul(alpha, self.beta);
        let ad = tape.mul(alpha, delta);
        let q = tape.affine(ad, -1.0, 1.0);
        (a, q, self.eta)
    }

    pub fn recurrent<T: Scalar>(&self, tape: &mut Tape<T>, x: Var) -> Result<Var> {
        let (a, q, eta) = self.coefficients(tape);
        tape.ema_recurrent(x, a, q, eta)
    }

    pub fn fft<T: Scalar>(&self, tape: &mut Tape<T>, x: Var) -> Result<Var> {
        let len = tape.shape(x).last().copied().unwrap_or(0);
        let (a, q, eta) = self.coefficients(tape);
        let k = tape.ema_kernel(a, q, eta, len)?;
        tape.fft_convolve(x, k)
    }
}

/// Calls `f(t, q^t)` for `t in 0..len`. Uses `exp(t ln q)` when `q > 0`,
/// repeated multiplication otherwise.
#[inline]
fn for_each_power<T: Scalar>(q: T, len: usize, mut f: impl FnMut(usize, T)) {
    if q > T::zero() {
        let lnq = q.ln();
        for t in 0..len {
            f(t, (lnq * T::cast(t as f64)).exp());
        }
    } else {
        let mut p = T::one();
        for t in 0..len {
            f(t, p);
            p *= q;
        }
    }
}

fn kernel_from_coefficients<T: Scalar>(
    a: &[T],
    q: &[T],
    eta: &[T],
    n: usize,
    len: usize,
) -> Vec<T> {
    let h = a.len() / n;
    let mut out = vec![T::zero(); h * len];
    for (j, row) in out.chunks_exact_mut(len).enumerate() {
        for i in j * n..(j + 1) * n {
            let c = eta[i] * a[i];
            for_each_power(q[i], len, |t, p| row[t] += c * p);
        }
    }
    out
}

struct RecurrentGeom {
    n: usize,
    len: usize,
    grouping: Grouping,
}

impl RecurrentGeom {
    fn new(x_shape: &[usize], coeff_shape: &[usize]) -> Result<Self> {
        let (c, len) = match x_shape {
            [_, c, l] => (*c, *l),
            s => return Err(invalid(format!("EMA input must be [B, C, L], got {s:?}"))),
        };
        let (h, n) = match coeff_shape {
            [h, n] => (*h, *n),
            s => {
                return Err(invalid(format!(
                    "EMA coefficients must be [h, n], got {s:?}"
                )))
            }
        };
        if len == 0 || n == 0 {
            return Err(invalid(
                "EMA needs a positive sequence length and expansion",
            ));
        }
        Ok(Self {
            n,
            len,
            grouping: Grouping::new(c, h)?,
        })
    }
}

fn recurrent_forward<T: Scalar>(g: &RecurrentGeom, x: &[T], a: &[T], q: &[T], eta: &[T]) -> Vec<T> {
    let mut y = vec![T::zero(); x.len()];
    recurrent_forward_into(g, x, a, q, eta, &mut y);
    y
}

fn recurrent_forward_into<T: Scalar>(
    g: &RecurrentGeom,
    x: &[T],
    a: &[T],
    q: &[T],
    eta: &[T],
    y: &mut [T],
) {
    let n = g.n;
    let mut u = vec![T::zero(); n];
    for (r, (xr, yr)) in x
        .chunks_exact(g.len)
        .zip(y.chunks_exact_mut(g.len))
        .enumerate()
    {
        let f = g.grouping.group_of_row(r) * n;
        let (a, q, eta) = (&a[f..f + n], &q[f..f + n], &eta[f..f + n]);
        u.fill(T::zero());
        for (&xt, yt) in xr.iter().zip(yr.iter_mut()) {
            let mut acc = T::zero();
            for i in 0..n {
                u[i] = a[i] * xt + q[i] * u[i];
                acc += eta[i] * u[i];
            }
            *yt = acc;
        }
    }
}

/// Gradients of the recurrence with respect to `(x, a, q, eta)`. Hidden
/// states are recomputed one row at a time.
fn recurrent_backward<T: Scalar>(
    g: &RecurrentGeom,
    x: &[T],
    a: &[T],
    q: &[T],
    eta: &[T],
    gy: &[T],
) -> (Vec<T>, Vec<T>, Vec<T>, Vec<T>) {
    let (n, len) = (g.n, g.len);
    let mut gx = vec![T::zero(); x.len()];
    let mut ga = vec![T::zero(); a.len()];
    let mut gq = vec![T::zero(); q.len()];
    let mut geta = vec![T::zero(); eta.len()];
    let mut states = vec![T::zero(); len * n];
    let mut gu = vec![T::zero(); n];
    for (r, ((xr, gyr), gxr)) in x
        .chunks_exact(len)
        .zip(gy.chunks_exact(len))
        .zip(gx.chunks_exact_mut(len))
        .enumerate()
    {
        let f = g.grouping.group_of_row(r) * n;
        let (ar, qr, er) = (&a[f..f + n], &q[f..f + n], &eta[f..f + n]);
        let mut prev = vec![T::zero(); n];
        for (t, &xt) in xr.iter().enumerate() {
            let st = &mut states[t * n..(t + 1) * n];
            for i in 0..n {
                st[i] = ar[i] * xt + qr[i] * prev[i];
            }
            prev.copy_from_slice(st);
        }
        gu.fill(T::zero());
        for t in (0..len).rev() {
            let gyt = gyr[t];
            let xt = xr[t];
            let mut gxt = T::zero();
            for i in 0..n {
                gu[i] = er[i] * gyt + qr[i] * gu[i];
                gxt += ar[i] * gu[i];
                ga[f + i] += gu[i] * xt;
                geta[f + i] += gyt * states[t * n + i];
                if t > 0 {
                    gq[f + i] += gu[i] * states[(t - 1) * n + i];
                }
            }
            gxr[t] = gxt;
        }
    }
    (gx, ga, gq, geta)
}

/// Direct recurrence.
pub fn ema_recurrent<T: Scalar>(x: &Tensor<T>, p: &EmaParams<T>) -> Result<Tensor<T>> {
    let c = p.coefficients();
    let g = RecurrentGeom::new(x.shape(), c.a.shape())?;
    let y = recurrent_forward(&g, x.data(), c.a.data(), c.q.data(), c.eta.data());
    Ok(Tensor::from_parts(x.shape().to_vec(), y))
}

/// [`ema_recurrent`] writing into a caller-owned buffer of `x.numel()` values.
pub fn ema_recurrent_into<T: Scalar>(x: &Tensor<T>, p: &EmaParams<T>, out: &mut [T]) -> Result<()> {
    let c = p.coefficients();
    let g = RecurrentGeom::new(x.shape(), c.a.shape())?;
    if out.len() != x.numel() {
        return Err(invalid(format!(
            "output buffer holds {} values, input has {}",
            out.len(),
            x.numel()
        )));
    }
    recurrent_forward_into(&g, x.data(), c.a.data(), c.q.data(), c.eta.data(), out);
    Ok(())
}

/// Impulse response of length `len`, one row per feature: `[h, len]`.
pub fn ema_kernel<T: Scalar>(p: &EmaParams<T>, len: usize) -> Result<Tensor<T>> {
    if len == 0 {
        return Err(invalid("kernel length must be at least 1"));
    }
    let c = p.coefficients();
    let k = kernel_from_coefficients(c.a.data(), c.q.data(), c.eta.data(), p.expansion(), len);
    Ok(Tensor::from_parts(vec![p.features(), len], k))
}

/// Kernel generation followed by FFT convolution.
pub fn ema_fft<T: Scalar>(x: &Tensor<T>, p: &EmaParams<T>) -> Result<Tensor<T>> {
    let len = *x
        .shape()
        .last()
        .ok_or_else(|| invalid("EMA input must be [B, C, L]"))?;
    let k = ema_kernel(p, len)?;
    fft_convolve(x, &k)
}

/// [`ema_fft`] writing into a caller-owned buffer of `x.numel()` values.
pub fn ema_fft_into<T: Scalar>(x: &Tensor<T>, p: &EmaParams<T>, out: &mut [T]) -> Result<()> {
    let len = *x
        .shape()
        .last()
        .ok_or_else(|| invalid("EMA input must be [B, C, L]"))?;
    let k = ema_kernel(p, len)?;
    fft_convolve_into(x, &k, out)
}

/// Truncates a stored `[h, Lmax]` kernel to its first `len` taps.
pub fn truncate_kernel<T: Scalar>(stored: &Tensor<T>, len: usize) -> Result<Tensor<T>> {
    let (h, lmax) = match stored.shape() {
        [h, l] => (*h, *l),
        s => {
            return Err(invalid(format!(
                "stored kernel must be [h, Lmax], got {s:?}"
            )))
        }
    };
    if len > lmax {
        return Err(invalid(format!(
            "sequence length {len} exceeds stored kernel length {lmax}"
        )));
    }
    if len == lmax {
        return Ok(stored.clone());
    }
    let mut out = Vec::with_capacity(h * len);
    for row in stored.data().chunks_exact(lmax) {
        out.extend_from_slice(&row[..len]);
    }
    Ok(Tensor::from_parts(vec![h, len], out))
}

/// FFT convolution with a pre-generated kernel; no kernel generation at
/// call time.
pub fn ema_fft_pregen<T: Scalar>(x: &Tensor<T>, stored_kernel: &Tensor<T>) -> Result<Tensor<T>> {
    let len = *x
        .shape()
        .last()
        .ok_or_else(|| invalid("EMA input must be [B, C, L]"))?;
    let k = truncate_kernel(stored_kernel, len)?;
    fft_convolve(x, &k)
}

/// [`ema_fft_pregen`] writing into a caller-owned buffer of `x.numel()` values.
pub fn ema_fft_pregen_into<T: Scalar>(
    x: &Tensor<T>,
    stored_kernel: &Tensor<T>,
    out: &mut [T],
) -> Result<()> {
    let len = *x
        .shape()
        .last()
        .ok_or_else(|| invalid("EMA input must be [B, C, L]"))?;
    let k = truncate_kernel(stored_kernel, len)?;
    fft_convolve_into(x, &k, out)
}

impl<T: Scalar> Tape<T> {
    /// Differentiable recurrence over coefficients `(a, q, η)`, each `[h, n]`.
    pub fn ema_recurrent(&mut self, x: Var, a: Var, q: Var, eta: Var) -> Result<Var> {
        let g = RecurrentGeom::new(self.shape(x), self.shape(a))?;
        let y = recurrent_forward(
            &g,
            self.value(x).data(),
            self.value(a).data(),
            self.value(q).data(),
            self.value(eta).data(),
        );
        let y = Tensor::from_parts(self.shape(x).to_vec(), y);
        Ok(
            self.record("ema_recurrent", &[x, a, q, eta], y, move |ctx| {
                let [x, a, q, eta] = [0, 1, 2, 3].map(|i| ctx.inputs[i]);
                let (gx, ga, gq, geta) = recurrent_backward(
                    &g,
                    x.data(),
                    a.data(),
                    q.data(),
                    eta.data(),
                    ctx.grad.data(),
                );
                let coeff = a.shape().to_vec();
                vec![
                    Some(Tensor::from_parts(x.shape().to_vec(), gx)),
                    Some(Tensor::from_parts(coeff.clone(), ga)),
                    Some(Tensor::from_parts(coeff.clone(), gq)),
                    Some(Tensor::from_parts(coeff, geta)),
                ]
            }),
        )
    }

    /// Differentiable kernel generation: `[h, n]` coefficients to `[h, len]`.
    pub fn ema_kernel(&mut self, a: Var, q: Var, eta: Var, len: usize) -> Result<Var> {
        if len == 0 {
            return Err(invalid("kernel length must be at least 1"));
        }
        let (h, n) = self.value(a).dims2();
        let k = kernel_from_coefficients(
            self.value(a).data(),
            self.value(q).data(),
            self.value(eta).data(),
            n,
            len,
        );
        let k = Tensor::from_parts(vec![h, len], k);
        Ok(self.record("ema_kernel", &[a, q, eta], k, move |ctx| {
            let (a, q, eta) = (
                ctx.inputs[0].data(),
                ctx.inputs[1].data(),
                ctx.inputs[2].data(),
            );
            let gk = ctx.grad.data();
            let mut ga = vec![T::zero(); a.len()];
            let mut gq = vec![T::zero(); q.len()];
            let mut geta = vec![T::zero(); eta.len()];
            for i in 0..a.len() {
                let row = &gk[(i / n) * len..][..len];
                // s0 = Σ_t g[t] q^t,  s1 = Σ_{t>=1} g[t] t q^(t-1)
                let mut s0 = T::zero();
                let mut s1 = T::zero();
                for_each_power(q[i], len, |t, p| {
                    s0 += row[t] * p;
                    if t + 1 < len {
                        s1 += row[t + 1] * T::cast((t + 1) as f64) * p;
                    }
                });
                ga[i] = eta[i] * s0;
                geta[i] = a[i] * s0;
                gq[i] = eta[i] * a[i] * s1;
            }
            let shape = vec![h, n];
            vec![
                Some(Tensor::from_parts(shape.clone(), ga)),
                Some(Tensor::from_parts(shape.clone(), gq)),
                Some(Tensor::from_parts(shape, geta)),
            ]
        }))
    }
}
