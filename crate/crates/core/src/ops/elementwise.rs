use crate::scalar::Scalar;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

#[inline]
pub(crate) fn sigmoid<T: Scalar>(x: T) -> T {
    T::one() / (T::one() + (-x).exp())
}

#[inline]
pub(crate) fn silu<T: Scalar>(x: T) -> T {
    x * sigmoid(x)
}

impl<T: Scalar> Tape<T> {
    fn check_same(&self, op: &str, a: Var, b: Var) {
        assert_eq!(
            self.shape(a),
            self.shape(b),
            "{op}: operand shapes differ ({:?} vs {:?})",
            self.shape(a),
            self.shape(b)
        );
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.check_same("add", a, b);
        let out = self.value(a).zip_map(self.value(b), |x, y| x + y);
        self.record("add", &[a, b], out, |ctx| {
            vec![Some(ctx.grad.clone()), Some(ctx.grad.clone())]
        })
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.check_same("sub", a, b);
        let out = self.value(a).zip_map(self.value(b), |x, y| x - y);
        self.record("sub", &[a, b], out, |ctx| {
            vec![Some(ctx.grad.clone()), Some(ctx.grad.map(|g| -g))]
        })
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.check_same("mul", a, b);
        let out = self.value(a).zip_map(self.value(b), |x, y| x * y);
        self.record("mul", &[a, b], out, |ctx| {
            let (x, y) = (ctx.inputs[0], ctx.inputs[1]);
            vec![
                Some(ctx.grad.zip_map(y, |g, y| g * y)),
                Some(ctx.grad.zip_map(x, |g, x| g * x)),
            ]
        })
    }

    /// `scale * x + shift`.
    pub fn affine(&mut self, x: Var, scale: f64, shift: f64) -> Var {
        let (s, c) = (T::cast(scale), T::cast(shift));
        let out = self.value(x).map(|v| s * v + c);
        self.record("affine", &[x], out, move |ctx| {
            vec![Some(ctx.grad.map(|g| g * s))]
        })
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let out = self.value(x).map(sigmoid);
        self.record("sigmoid", &[x], out, |ctx| {
            vec![Some(
                ctx.grad.zip_map(ctx.output, |g, s| g * s * (T::one() - s)),
            )]
        })
    }

    pub fn silu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(silu);
        self.record("silu", &[x], out, |ctx| {
            vec![Some(ctx.grad.zip_map(ctx.inputs[0], |g, x| {
                let s = sigmoid(x);
                g * s * (T::one() + x * (T::one() - s))
            }))]
        })
    }

    /// Sum of all elements, as a rank-0 tensor.
    pub fn sum(&mut self, x: Var) -> Var {
        let out = Tensor::scalar(self.value(x).sum());
        self.record("sum", &[x], out, |ctx| {
            let g = ctx.grad.item();
            vec![Some(Tensor::full(ctx.inputs[0].shape(), g))]
        })
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = T::cast(self.value(x).numel() as f64);
        let out = Tensor::scalar(self.value(x).sum() / n);
        self.record("mean", &[x], out, move |ctx| {
            let g = ctx.grad.item() / n;
            vec![Some(Tensor::full(ctx.inputs[0].shape(), g))]
        })
    }

    /// `g * a + (1 - g) * b`, elementwise. Exact at `g = 0` and `g = 1`.
    pub fn gate_mix(&mut self, g: Var, a: Var, b: Var) -> Var {
        self.check_same("gate_mix", g, a);
        self.check_same("gate_mix", a, b);
        let (gv, av, bv) = (
            self.value(g).data(),
            self.value(a).data(),
            self.value(b).data(),
        );
        let out: Vec<T> = gv
            .iter()
            .zip(av)
            .zip(bv)
            .map(|((&g, &a), &b)| g * a + (T::one() - g) * b)
            .collect();
        let out = Tensor::from_parts(self.shape(a).to_vec(), out);
        self.record("gate_mix", &[g, a, b], out, |ctx| {
            let (g, a, b) = (ctx.inputs[0], ctx.inputs[1], ctx.inputs[2]);
            let dg = a.zip_map(b, |a, b| a - b).zip_map(ctx.grad, |d, gr| d * gr);
            let da = g.zip_map(ctx.grad, |g, gr| g * gr);
            let db = g.zip_map(ctx.grad, |g, gr| (T::one() - g) * gr);
            vec![Some(dg), Some(da), Some(db)]
        })
    }
}
