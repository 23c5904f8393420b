//! Adam with a linear warmup followed by a constant or cosine-decayed
//! learning rate.

use serde::{Deserialize, Serialize};

use crate::params::{Bound, ParamStore};
use crate::scalar::Scalar;
use crate::tape::Grads;
use crate::tensor::Tensor;

/// What happens after warmup.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Decay {
    #[default]
    Constant,
    /// Half cosine from `peak` at the end of warmup to 0 at `total`.
    Cosine,
}

impl std::str::FromStr for Decay {
    type Err = crate::Error;

    fn from_str(s: &str) -> crate::Result<Self> {
        match s {
            "constant" => Ok(Self::Constant),
            "cosine" => Ok(Self::Cosine),
            _ => Err(crate::error::invalid(format!(
                "unknown decay {s:?}, expected constant or cosine"
            ))),
        }
    }
}

/// Linear ramp from 0 to `peak` over `warmup` steps, then [`Decay`] until
/// `total` steps.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Schedule {
    pub peak: f64,
    pub warmup: usize,
    pub total: usize,
    pub decay: Decay,
}

impl Schedule {
    pub fn lr(&self, step: usize) -> f64 {
        if step < self.warmup {
            return self.peak * (step + 1) as f64 / self.warmup as f64;
        }
        match self.decay {
            Decay::Constant => self.peak,
            Decay::Cosine => {
                let span = self.total.saturating_sub(self.warmup).max(1);
                let frac = ((step - self.warmup) as f64 / span as f64).min(1.0);
                0.5 * self.peak * (1.0 + (std::f64::consts::PI * frac).cos())
            }
        }
    }
}

#[derive(Debug, Clone)]
pub struct Adam<T> {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    m: Vec<Tensor<T>>,
    v: Vec<Tensor<T>>,
    t: i32,
}

impl<T: Scalar> Adam<T> {
    pub fn new(store: &ParamStore<T>) -> Self {
        let zeros = || {
            store
                .iter()
                .map(|(_, t)| Tensor::zeros(t.shape()))
                .collect()
        };
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
            m: zeros(),
            v: zeros(),
            t: 0,
        }
    }

    pub fn steps(&self) -> usize {
        self.t as usize
    }

    /// One update with learning rate `lr`; `grads[i]` belongs to the i-th
    /// parameter of `store`.
    pub fn step(&mut self, store: &mut ParamStore<T>, grads: &[Tensor<T>], lr: f64) {
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        let (b1, b2) = (T::cast(self.beta1), T::cast(self.beta2));
        let step = T::cast(lr / c1);
        let (eps, inv_c2, wd) = (
            T::cast(self.eps),
            T::cast(1.0 / c2),
            T::cast(self.weight_decay),
        );
        for (((p, g), m), v) in store
            .tensors_mut()
            .zip(grads)
            .zip(&mut self.m)
            .zip(&mut self.v)
        {
            for (((pv, &gv), mv), vv) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut())
                .zip(v.data_mut())
            {
                let gv = gv + wd * *pv;
                *mv = b1 * *mv + (T::one() - b1) * gv;
                *vv = b2 * *vv + (T::one() - b2) * gv * gv;
                *pv -= step * *mv / ((*vv * inv_c2).sqrt() + eps);
            }
        }
    }
}

/// Gradients for every parameter of `store` bound as `bound`; parameters the
/// loss does not reach get zeros.
pub fn collect_grads<T: Scalar>(
    store: &ParamStore<T>,
    bound: &Bound,
    grads: &mut Grads<T>,
) -> Vec<Tensor<T>> {
    store
        .ids()
        .map(|id| {
            grads
                .take(bound[id])
                .unwrap_or_else(|| Tensor::zeros(store.get(id).shape()))
        })
        .collect()
}

/// Rescales `grads` so their joint L2 norm is at most `max_norm`. Returns the
/// norm before clipping.
pub fn clip_grad_norm<T: Scalar>(grads: &mut [Tensor<T>], max_norm: f64) -> f64 {
    let norm = grads
        .iter()
        .flat_map(|g| g.data())
        .map(|v| v.as_f64() * v.as_f64())
        .sum::<f64>()
        .sqrt();
    if norm > max_norm && norm.is_finite() {
        let s = T::cast(max_norm / norm);
        for g in grads.iter_mut() {
            for v in g.data_mut() {
                *v *= s;
            }
        }
    }
    norm
}
