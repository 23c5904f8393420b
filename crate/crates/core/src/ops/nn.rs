use rand::Rng;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Max-stabilized softmax over one row. Entries equal to `-inf` are masked;
/// a row with no unmasked entry becomes all zeros.
pub fn softmax_row_in_place<T: Scalar>(row: &mut [T]) {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    if max == T::neg_infinity() {
        row.fill(T::zero());
        return;
    }
    let mut total = T::zero();
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        total += *v;
    }
    let inv = T::one() / total;
    for v in row.iter_mut() {
        *v *= inv;
    }
}

/// Softmax over the trailing axis. Unmasked entries must be finite.
pub fn softmax_rows<T: Scalar>(s: &Tensor<T>) -> Result<Tensor<T>> {
    if s.data().iter().any(|v| v.is_nan() || *v == T::infinity()) {
        return Err(Error::NonFinite("softmax input".into()));
    }
    let n = s.last_dim();
    let mut out = s.clone();
    if n > 0 {
        for row in out.data_mut().chunks_exact_mut(n) {
            softmax_row_in_place(row);
        }
    }
    Ok(out)
}

/// Backward of a row softmax given its output `p` and upstream gradient `g`.
pub(crate) fn softmax_row_backward<T: Scalar>(p: &[T], g: &[T], out: &mut [T]) {
    let dot: T = p.iter().zip(g).map(|(&a, &b)| a * b).sum();
    for ((o, &pv), &gv) in out.iter_mut().zip(p).zip(g) {
        *o = pv * (gv - dot);
    }
}

impl<T: Scalar> Tape<T> {
    /// Differentiable [`softmax_rows`]; masked (`-inf`) inputs receive zero
    /// gradient.
    pub fn softmax_rows(&mut self, x: Var) -> Var {
        let out = softmax_rows(self.value(x)).expect("finite softmax input");
        let n = out.last_dim();
        self.record("softmax", &[x], out, move |ctx| {
            let mut dx = ctx.grad.clone();
            for ((d, p), g) in dx
                .data_mut()
                .chunks_exact_mut(n)
                .zip(ctx.output.data().chunks_exact(n))
                .zip(ctx.grad.data().chunks_exact(n))
            {
                softmax_row_backward(p, g, d);
            }
            vec![Some(dx)]
        })
    }

    /// Layer normalization over the trailing (feature) axis with learned
    /// gain and bias of shape `[n]`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Var {
        let n = self.value(x).last_dim();
        assert_eq!(self.value(gain).numel(), n, "layer_norm gain width");
        assert_eq!(self.value(bias).numel(), n, "layer_norm bias width");
        let eps = T::cast(LAYER_NORM_EPS);
        let inv_n = T::one() / T::cast(n as f64);
        let xs = self.value(x);
        let rows = xs.numel() / n;
        let mut xhat = vec![T::zero(); xs.numel()];
        let mut rstd = vec![T::zero(); rows];
        for ((xr, hr), rs) in xs
            .data()
            .chunks_exact(n)
            .zip(xhat.chunks_exact_mut(n))
            .zip(rstd.iter_mut())
        {
            let mean = xr.iter().copied().sum::<T>() * inv_n;
            let var = xr.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() * inv_n;
            *rs = T::one() / (var + eps).sqrt();
            for (h, &v) in hr.iter_mut().zip(xr) {
                *h = (v - mean) * *rs;
            }
        }
        let (g, b) = (self.value(gain).data(), self.value(bias).data());
        let mut out = xhat.clone();
        for row in out.chunks_exact_mut(n) {
            for j in 0..n {
                row[j] = row[j] * g[j] + b[j];
            }
        }
        let out = Tensor::from_parts(xs.shape().to_vec(), out);
        self.record("layer_norm", &[x, gain, bias], out, move |ctx| {
            let g = ctx.inputs[1].data();
            let dy = ctx.grad.data();
            let mut dx = vec![T::zero(); dy.len()];
            let mut dg = vec![T::zero(); n];
            let mut db = vec![T::zero(); n];
            let mut dxhat = vec![T::zero(); n];
            for (r, ((dyr, hr), dxr)) in dy
                .chunks_exact(n)
                .zip(xhat.chunks_exact(n))
                .zip(dx.chunks_exact_mut(n))
                .enumerate()
            {
                for j in 0..n {
                    dg[j] += dyr[j] * hr[j];
                    db[j] += dyr[j];
                    dxhat[j] = dyr[j] * g[j];
                }
                let sum_d: T = dxhat.iter().copied().sum();
                let sum_dh: T = dxhat.iter().zip(hr).map(|(&a, &b)| a * b).sum();
                for j in 0..n {
                    dxr[j] =
                        rstd[r] * inv_n * (T::cast(n as f64) * dxhat[j] - sum_d - hr[j] * sum_dh);
                }
            }
            vec![
                Some(Tensor::from_parts(ctx.inputs[0].shape().to_vec(), dx)),
                Some(Tensor::from_parts(ctx.inputs[1].shape().to_vec(), dg)),
                Some(Tensor::from_parts(ctx.inputs[2].shape().to_vec(), db)),
            ]
        })
    }

    /// Inverted dropout: in training mode each element is zeroed with
    /// probability `p` and survivors are scaled by `1/(1-p)`. Evaluation mode
    /// (or `p == 0`) is the identity and records nothing.
    pub fn dropout<R: Rng + ?Sized>(&mut self, x: Var, p: f64, train: bool, rng: &mut R) -> Var {
        if !train || p <= 0.0 {
            return x;
        }
        assert!(p < 1.0, "dropout probability must be below 1");
        let keep = T::cast(1.0 / (1.0 - p));
        let mask: Vec<T> = (0..self.value(x).numel())
            .map(|_| {
                if rng.random::<f64>() < p {
                    T::zero()
                } else {
                    keep
                }
            })
            .collect();
        let mut out = self.value(x).clone();
        for (o, &m) in out.data_mut().iter_mut().zip(&mask) {
            *o *= m;
        }
        self.record("dropout", &[x], out, move |ctx| {
            let mut dx = ctx.grad.clone();
            for (d, &m) in dx.data_mut().iter_mut().zip(&mask) {
                *d *= m;
            }
            vec![Some(dx)]
        })
    }

    /// Gathers rows of `table` (`[vocab, e]`) for `ids`; the result has shape
    /// `prefix ++ [e]`.
    pub fn embedding(&mut self, table: Var, ids: &[usize], prefix: &[usize]) -> Result<Var> {
        let (vocab, e) = self.value(table).dims2();
        assert_eq!(
            prefix.iter().product::<usize>(),
            ids.len(),
            "embedding prefix shape"
        );
        if let Some(&id) = ids.iter().find(|&&id| id >= vocab) {
            return Err(Error::TokenOutOfRange { id, vocab });
        }
        let src = self.value(table).data();
        let mut out = Vec::with_capacity(ids.len() * e);
        for &id in ids {
            out.extend_from_slice(&src[id * e..(id + 1) * e]);
        }
        let mut shape = prefix.to_vec();
        shape.push(e);
        let ids = ids.to_vec();
        Ok(self.record(
            "embedding",
            &[table],
            Tensor::from_parts(shape, out),
            move |ctx| {
                let mut dt = vec![T::zero(); vocab * e];
                for (&id, g) in ids.iter().zip(ctx.grad.data().chunks_exact(e)) {
                    for (d, &gv) in dt[id * e..(id + 1) * e].iter_mut().zip(g) {
                        *d += gv;
                    }
                }
                vec![Some(Tensor::from_parts(vec![vocab, e], dt))]
            },
        ))
    }

    /// Mean cross-entropy of `logits` (`[n, classes]`) against `targets`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let (n, classes) = self.value(logits).dims2();
        if targets.len() != n {
            return Err(Error::Shape {
                op: "cross_entropy",
                detail: format!("{n} rows but {} targets", targets.len()),
            });
        }
        if let Some(&id) = targets.iter().find(|&&t| t >= classes) {
            return Err(Error::TokenOutOfRange { id, vocab: classes });
        }
        let mut probs = self.value(logits).data().to_vec();
        let mut loss = T::zero();
        for (row, &t) in probs.chunks_exact_mut(classes).zip(targets) {
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let lse = max + row.iter().map(|&v| (v - max).exp()).sum::<T>().ln();
            loss += lse - row[t];
            softmax_row_in_place(row);
        }
        let inv_n = T::one() / T::cast(n as f64);
        let targets = targets.to_vec();
        Ok(self.record(
            "cross_entropy",
            &[logits],
            Tensor::scalar(loss * inv_n),
            move |ctx| {
                let g = ctx.grad.item() * inv_n;
                let mut d = probs.clone();
                for (row, &t) in d.chunks_exact_mut(classes).zip(&targets) {
                    row[t] -= T::one();
                    for v in row.iter_mut() {
                        *v *= g;
                    }
                }
                vec![Some(Tensor::from_parts(vec![n, classes], d))]
            },
        ))
    }
}
