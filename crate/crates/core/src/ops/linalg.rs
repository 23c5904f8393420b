use crate::scalar::Scalar;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

const MR: usize = 4;
const NR: usize = 8;

/// `out[r, :] = x[r, :] @ w` for a row-major `rows × k` block and `k × n` matrix.
///
/// Register-blocked: each `MR × NR` output tile is accumulated in locals so
/// the inner loop only streams `x` and `w`.
pub(crate) fn matmul_rows<T: Scalar>(x: &[T], w: &[T], rows: usize, k: usize, n: usize) -> Vec<T> {
    debug_assert_eq!(x.len(), rows * k);
    let mut out = vec![T::zero(); rows * n];
    let full_rows = rows - rows % MR;
    let full_cols = n - n % NR;
    for r in (0..full_rows).step_by(MR) {
        let xb = &x[r * k..(r + MR) * k];
        for j in (0..full_cols).step_by(NR) {
            let mut acc = [[T::zero(); NR]; MR];
            for i in 0..k {
                let wv: &[T; NR] = w[i * n + j..i * n + j + NR].try_into().unwrap();
                for (m, row) in acc.iter_mut().enumerate() {
                    let xv = xb[m * k + i];
                    for (a, &b) in row.iter_mut().zip(wv) {
                        *a += xv * b;
                    }
                }
            }
            for (m, row) in acc.iter().enumerate() {
                out[(r + m) * n + j..][..NR].copy_from_slice(row);
            }
        }
    }
    // Ragged edges: remaining columns of the blocked rows, then remaining rows.
    if full_cols < n {
        for r in 0..full_rows {
            for j in full_cols..n {
                out[r * n + j] = (0..k).fold(T::zero(), |s, i| s + x[r * k + i] * w[i * n + j]);
            }
        }
    }
    for r in full_rows..rows {
        let (xr, or) = (&x[r * k..(r + 1) * k], &mut out[r * n..(r + 1) * n]);
        for (i, &xv) in xr.iter().enumerate() {
            let wr = &w[i * n..(i + 1) * n];
            for (o, &wv) in or.iter_mut().zip(wr) {
                *o += xv * wv;
            }
        }
    }
    out
}

/// Row-major `rows × cols` to `cols × rows`.
pub(crate) fn transpose<T: Scalar>(a: &[T], rows: usize, cols: usize) -> Vec<T> {
    let mut out = vec![T::zero(); a.len()];
    for (r, row) in a.chunks_exact(cols).enumerate() {
        for (c, &v) in row.iter().enumerate() {
            out[c * rows + r] = v;
        }
    }
    out
}

impl<T: Scalar> Tape<T> {
    /// Multiplies the trailing axis of `x` (`[..., k]`) by `w` (`[k, n]`).
    pub fn matmul(&mut self, x: Var, w: Var) -> Var {
        let (k, n) = self.value(w).dims2();
        let xs = self.value(x).shape().to_vec();
        assert_eq!(
            *xs.last().expect("matmul on a scalar"),
            k,
            "matmul inner dims: x {xs:?} w [{k}, {n}]"
        );
        let mut shape = xs.clone();
        *shape.last_mut().unwrap() = n;
        let rows: usize = xs[..xs.len() - 1].iter().product();
        let out = matmul_rows(self.value(x).data(), self.value(w).data(), rows, k, n);
        let out = Tensor::from_parts(shape, out);
        self.record("matmul", &[x, w], out, move |ctx| {
            let (xv, wv, g) = (ctx.inputs[0].data(), ctx.inputs[1].data(), ctx.grad.data());
            // dx = g @ w^T, dw = x^T @ g
            let dx = matmul_rows(g, &transpose(wv, k, n), rows, n, k);
            let dw = matmul_rows(&transpose(xv, rows, k), g, k, rows, n);
            vec![
                Some(Tensor::from_parts(ctx.inputs[0].shape().to_vec(), dx)),
                Some(Tensor::from_parts(vec![k, n], dw)),
            ]
        })
    }

    /// Adds `b` (`[n]`) to every trailing-axis row of `x`.
    pub fn add_bias(&mut self, x: Var, b: Var) -> Var {
        let n = self.value(b).numel();
        assert_eq!(self.value(x).last_dim(), n, "add_bias width");
        let mut out = self.value(x).clone();
        let bias = self.value(b).data().to_vec();
        for row in out.data_mut().chunks_exact_mut(n) {
            for (o, &bv) in row.iter_mut().zip(&bias) {
                *o += bv;
            }
        }
        self.record("add_bias", &[x, b], out, move |ctx| {
            let mut db = vec![T::zero(); n];
            for row in ctx.grad.data().chunks_exact(n) {
                for (d, &g) in db.iter_mut().zip(row) {
                    *d += g;
                }
            }
            vec![
                Some(ctx.grad.clone()),
                Some(Tensor::from_parts(ctx.inputs[1].shape().to_vec(), db)),
            ]
        })
    }

    /// Scales each trailing-axis row of `x` elementwise by `s` (`[n]`): a
    /// diagonal linear map.
    pub fn mul_diag(&mut self, x: Var, s: Var) -> Var {
        let n = self.value(s).numel();
        assert_eq!(self.value(x).last_dim(), n, "mul_diag width");
        let mut out = self.value(x).clone();
        let scale = self.value(s).data().to_vec();
        for row in out.data_mut().chunks_exact_mut(n) {
            for (o, &sv) in row.iter_mut().zip(&scale) {
                *o *= sv;
            }
        }
        self.record("mul_diag", &[x, s], out, move |ctx| {
            let (xv, sv) = (ctx.inputs[0].data(), ctx.inputs[1].data());
            let mut dx = ctx.grad.clone();
            let mut ds = vec![T::zero(); n];
            for ((dr, xr), gr) in dx
                .data_mut()
                .chunks_exact_mut(n)
                .zip(xv.chunks_exact(n))
                .zip(ctx.grad.data().chunks_exact(n))
            {
                for j in 0..n {
                    dr[j] = gr[j] * sv[j];
                    ds[j] += gr[j] * xr[j];
                }
            }
            vec![
                Some(dx),
                Some(Tensor::from_parts(ctx.inputs[1].shape().to_vec(), ds)),
            ]
        })
    }

    /// `x @ w + b`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Var {
        let y = self.matmul(x, w);
        self.add_bias(y, b)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Var {
        let out = self
            .value(x)
            .reshape(shape)
            .expect("reshape preserves element count");
        self.record("reshape", &[x], out, |ctx| {
            vec![Some(
                ctx.grad.reshape(ctx.inputs[0].shape()).expect("same numel"),
            )]
        })
    }

    /// `[a, b, c] -> [a, c, b]`.
    pub fn transpose_last2(&mut self, x: Var) -> Var {
        let (a, b, c) = self.value(x).dims3();
        let out = Tensor::from_parts(
            vec![a, c, b],
            transpose_blocks(self.value(x).data(), a, b, c),
        );
        self.record("transpose", &[x], out, move |ctx| {
            vec![Some(Tensor::from_parts(
                vec![a, b, c],
                transpose_blocks(ctx.grad.data(), a, c, b),
            ))]
        })
    }

    /// Selects position `t` along the middle axis: `[b, l, e] -> [b, e]`.
    pub fn take_step(&mut self, x: Var, t: usize) -> Var {
        let (b, l, e) = self.value(x).dims3();
        assert!(t < l, "take_step index {t} out of range for length {l}");
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(b * e);
        for bi in 0..b {
            out.extend_from_slice(&src[(bi * l + t) * e..(bi * l + t + 1) * e]);
        }
        let out = Tensor::from_parts(vec![b, e], out);
        self.record("take_step", &[x], out, move |ctx| {
            let mut dx = vec![T::zero(); b * l * e];
            for (bi, g) in ctx.grad.data().chunks_exact(e).enumerate() {
                dx[(bi * l + t) * e..(bi * l + t + 1) * e].copy_from_slice(g);
            }
            vec![Some(Tensor::from_parts(vec![b, l, e], dx))]
        })
    }
}

fn transpose_blocks<T: Scalar>(src: &[T], a: usize, b: usize, c: usize) -> Vec<T> {
    let mut out = vec![T::zero(); src.len()];
    for ai in 0..a {
        let s = &src[ai * b * c..(ai + 1) * b * c];
        let o = &mut out[ai * b * c..(ai + 1) * b * c];
        for i in 0..b {
            for j in 0..c {
                o[j * b + i] = s[i * c + j];
            }
        }
    }
    out
}
