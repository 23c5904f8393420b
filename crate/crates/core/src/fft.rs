//! FFT plans and causal long convolution.
//!
//! Convolutions are evaluated on zero-padded power-of-two buffers of length
//! at least `L + Lk`, so the circular product equals the linear causal
//! convolution on the first `L` outputs. Real rows are packed two at a time
//! into one complex transform.

use std::sync::Arc;

use num_complex::Complex;
use rustfft::{Fft, FftPlanner};

use crate::error::{invalid, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Forward and inverse transforms of one size.
pub struct FftPlan<T> {
    n: usize,
    fwd: Arc<dyn Fft<T>>,
    inv: Arc<dyn Fft<T>>,
}

impl<T: Scalar> FftPlan<T> {
    pub fn new(n: usize) -> Self {
        let mut planner = FftPlanner::new();
        Self {
            n,
            fwd: planner.plan_fft_forward(n),
            inv: planner.plan_fft_inverse(n),
        }
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    pub fn forward(&self, buf: &mut [Complex<T>]) {
        assert_eq!(buf.len(), self.n);
        self.fwd.process(buf);
    }

    /// Inverse transform including the `1/n` normalization.
    pub fn inverse(&self, buf: &mut [Complex<T>]) {
        assert_eq!(buf.len(), self.n);
        self.inv.process(buf);
        let scale = T::one() / T::cast(self.n as f64);
        for v in buf.iter_mut() {
            *v = *v * scale;
        }
    }
}

/// Transform length used for a causal convolution of `len` samples with a
/// `klen`-tap kernel.
pub fn padded_len(len: usize, klen: usize) -> usize {
    (len + klen).next_power_of_two()
}

/// Splits the spectrum `z = FFT(a + i b)` of two packed real signals into
/// `FFT(a)` and `FFT(b)`.
fn unpack_pair<T: Scalar>(z: &[Complex<T>], a: &mut [Complex<T>], b: &mut [Complex<T>]) {
    let n = z.len();
    let half = T::cast(0.5);
    for m in 0..n {
        let zm = z[m];
        let zc = z[(n - m) % n].conj();
        a[m] = (zm + zc) * half;
        // (zm - zc) / 2i
        let d = zm - zc;
        b[m] = Complex::new(d.im * half, -d.re * half);
    }
}

/// Maps each row of a `[batch, channels, len]` block to the kernel it uses,
/// with `groups` kernels shared by contiguous runs of channels.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Grouping {
    pub channels: usize,
    pub groups: usize,
}

impl Grouping {
    pub fn new(channels: usize, groups: usize) -> Result<Self> {
        if groups == 0 || channels % groups != 0 {
            return Err(invalid(format!(
                "{channels} channels cannot be split evenly into {groups} kernel groups"
            )));
        }
        Ok(Self { channels, groups })
    }

    pub fn depthwise(channels: usize) -> Self {
        Self {
            channels,
            groups: channels,
        }
    }

    #[inline]
    pub fn group_of_row(&self, row: usize) -> usize {
        (row % self.channels) / (self.channels / self.groups)
    }
}

/// Causally convolves every row of `x` (`rows × len`) with its group's kernel
/// from `kernels` (`groups × klen`), writing the first `len` outputs per row.
pub fn convolve_rows<T: Scalar>(
    x: &[T],
    len: usize,
    kernels: &[T],
    klen: usize,
    grouping: Grouping,
    out: &mut [T],
) {
    assert!(len > 0 && klen > 0);
    let rows = x.len() / len;
    assert_eq!(x.len(), rows * len);
    assert_eq!(out.len(), x.len());
    assert_eq!(kernels.len(), grouping.groups * klen);

    let n = padded_len(len, klen);
    let plan = FftPlan::<T>::new(n);
    let zero = Complex::new(T::zero(), T::zero());

    let mut buf = vec![zero; n];
    let mut spec_a = vec![zero; n];
    let mut spec_b = vec![zero; n];

    let mut spectra: Vec<Vec<Complex<T>>> = Vec::with_capacity(grouping.groups);
    for pair in kernels.chunks(2 * klen) {
        buf.fill(zero);
        let (ka, kb) = pair.split_at(klen);
        for (j, &v) in ka.iter().enumerate() {
            buf[j].re = v;
        }
        for (j, &v) in kb.iter().enumerate() {
            buf[j].im = v;
        }
        plan.forward(&mut buf);
        unpack_pair(&buf, &mut spec_a, &mut spec_b);
        spectra.push(spec_a.clone());
        if !kb.is_empty() {
            spectra.push(spec_b.clone());
        }
    }

    let mut r = 0;
    while r < rows {
        let second = r + 1 < rows;
        buf.fill(zero);
        for (t, &v) in x[r * len..(r + 1) * len].iter().enumerate() {
            buf[t].re = v;
        }
        if second {
            for (t, &v) in x[(r + 1) * len..(r + 2) * len].iter().enumerate() {
                buf[t].im = v;
            }
        }
        plan.forward(&mut buf);
        unpack_pair(&buf, &mut spec_a, &mut spec_b);
        let ka = &spectra[grouping.group_of_row(r)];
        if second {
            let kb = &spectra[grouping.group_of_row(r + 1)];
            for m in 0..n {
                let ya = spec_a[m] * ka[m];
                let yb = spec_b[m] * kb[m];
                // ya + i*yb
                buf[m] = Complex::new(ya.re - yb.im, ya.im + yb.re);
            }
        } else {
            for m in 0..n {
                buf[m] = spec_a[m] * ka[m];
            }
        }
        plan.inverse(&mut buf);
        for (o, b) in out[r * len..(r + 1) * len].iter_mut().zip(&buf) {
            *o = b.re;
        }
        if second {
            for (o, b) in out[(r + 1) * len..(r + 2) * len].iter_mut().zip(&buf) {
                *o = b.im;
            }
        }
        r += 2;
    }
}

/// First `L` samples of the linear convolution of each row of `x`
/// (`[..., L]`) with the matching row of `k` (`[..., Lk]`, same leading
/// shape), or with a single kernel row broadcast to every row.
pub fn fft_circular_convolve<T: Scalar>(x: &Tensor<T>, k: &Tensor<T>) -> Result<Tensor<T>> {
    let (Some((&len, lead)), Some((&klen, klead))) =
        (x.shape().split_last(), k.shape().split_last())
    else {
        return Err(invalid("convolution operands need at least one axis"));
    };
    if len == 0 {
        return Err(invalid("cannot convolve an empty sequence"));
    }
    if klen == 0 {
        return Err(invalid("cannot convolve with an empty kernel"));
    }
    let rows = x.numel() / len;
    let groups = k.numel() / klen;
    if groups != 1 && lead != klead {
        return Err(invalid(format!(
            "kernel shape {:?} does not match input {:?}",
            k.shape(),
            x.shape()
        )));
    }
    let mut out = vec![T::zero(); x.numel()];
    convolve_rows(
        x.data(),
        len,
        k.data(),
        klen,
        Grouping::new(rows, groups)?,
        &mut out,
    );
    Ok(Tensor::from_parts(x.shape().to_vec(), out))
}

/// Reverses each `len`-long row of `data` in place.
pub(crate) fn reverse_rows<T>(data: &mut [T], len: usize) {
    for row in data.chunks_exact_mut(len) {
        row.reverse();
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive_dft(x: &[Complex<f64>]) -> Vec<Complex<f64>> {
        let n = x.len();
        (0..n)
            .map(|k| {
                x.iter()
                    .enumerate()
                    .fold(Complex::new(0.0, 0.0), |acc, (j, &v)| {
                        let ang = -2.0 * std::f64::consts::PI * (j * k) as f64 / n as f64;
                        acc + v * Complex::new(ang.cos(), ang.sin())
                    })
            })
            .collect()
    }

    #[test]
    fn forward_matches_naive_dft() {
        for n in [1usize, 2, 4, 8, 64] {
            let x: Vec<Complex<f64>> = (0..n)
                .map(|i| Complex::new((i as f64 * 0.7).sin(), (i as f64 * 1.3).cos()))
                .collect();
            let mut buf = x.clone();
            FftPlan::new(n).forward(&mut buf);
            for (a, b) in buf.iter().zip(naive_dft(&x)) {
                assert!((a - b).norm() < 1e-10, "n={n}");
            }
        }
    }

    #[test]
    fn inverse_round_trips() {
        let n = 256;
        let x: Vec<Complex<f64>> = (0..n)
            .map(|i| Complex::new(i as f64, -(i as f64) / 3.0))
            .collect();
        let plan = FftPlan::new(n);
        let mut buf = x.clone();
        plan.forward(&mut buf);
        plan.inverse(&mut buf);
        for (a, b) in buf.iter().zip(&x) {
            assert!((a - b).norm() < 1e-9);
        }
    }

    #[test]
    fn delta_kernel_passes_input() {
        let t = |v: &[f64]| Tensor::new(&[v.len()], v.to_vec()).unwrap();
        assert_eq!(
            fft_circular_convolve(&t(&[1.0, 0.0, 0.0]), &t(&[1.0]))
                .unwrap()
                .data(),
            &[1.0, 0.0, 0.0]
        );
    }

    #[test]
    fn box_kernel_example() {
        let t = |v: &[f64]| Tensor::new(&[v.len()], v.to_vec()).unwrap();
        let y = fft_circular_convolve(&t(&[1.0, 1.0, 1.0, 1.0]), &t(&[1.0, 1.0]))
            .unwrap()
            .into_data();
        for (a, b) in y.iter().zip([1.0, 2.0, 2.0, 2.0]) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn empty_input_rejected() {
        assert!(fft_circular_convolve(&Tensor::<f64>::zeros(&[0]), &Tensor::ones(&[1])).is_err());
    }

    #[test]
    fn grouping_maps_contiguous_channels() {
        let g = Grouping::new(8, 2).unwrap();
        let groups: Vec<usize> = (0..16).map(|r| g.group_of_row(r)).collect();
        assert_eq!(groups, [0, 0, 0, 0, 1, 1, 1, 1, 0, 0, 0, 0, 1, 1, 1, 1]);
        assert!(Grouping::new(8, 3).is_err());
    }

    #[test]
    fn odd_row_count_and_kernel_count() {
        // three rows, three kernels: exercises the unpaired tail on both sides
        let len = 5;
        let x: Vec<f64> = (0..15).map(|i| (i as f64 * 0.37).sin()).collect();
        let k: Vec<f64> = (0..6).map(|i| 1.0 / (i as f64 + 1.0)).collect();
        let mut out = vec![0.0; 15];
        convolve_rows(&x, len, &k, 2, Grouping::depthwise(3), &mut out);
        for r in 0..3 {
            for t in 0..len {
                let mut acc = 0.0;
                for j in 0..2 {
                    if t >= j {
                        acc += k[r * 2 + j] * x[r * len + t - j];
                    }
                }
                assert!((out[r * len + t] - acc).abs() < 1e-12);
            }
        }
    }
}
