//! Parameter-matched runtime comparison of bare sequence operators.
//!
//! Instances: a damped EMA with `h = 2` features of expansion 8 (64
//! parameters) shared across the channels, and four causal dilated
//! convolutions with `K = 17` and one kernel row each (68 parameters) whose
//! dilation factor is the smallest giving a receptive field `>= L`. Neither
//! has residuals, norms or nonlinearities.

use std::fmt::Write as _;
use std::hint::black_box;
use std::path::Path;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::ema::{
    ema_fft, ema_fft_into, ema_fft_pregen_into, ema_kernel, ema_recurrent, ema_recurrent_into,
    truncate_kernel, EmaParams,
};
use crate::error::{invalid, Error, Result};
use crate::ops::conv::conv1d_dilated_into;
use crate::ops::conv::fft_convolve;
use crate::ops::ConvLayout;
use crate::scalar::{DType, Scalar};
use crate::tape::{Tape, Var};
use crate::tcn::minimal_dilation_factor;
use crate::tensor::Tensor;

pub const CSV_HEADER: &str =
    "op,pass,seq_len,dtype,param_count,time_median_ns,time_p10_ns,time_p90_ns,reps,cpu,threads";

pub const EMA_FEATURES: usize = 2;
pub const EMA_EXPANSION: usize = 8;
pub const TCN_KERNEL: usize = 17;
pub const TCN_DEPTH: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BenchOp {
    EmaFft,
    EmaFftPregen,
    EmaRecurrent,
    DilatedConv,
}

impl BenchOp {
    pub const ALL: [BenchOp; 4] = [
        Self::EmaFft,
        Self::EmaFftPregen,
        Self::EmaRecurrent,
        Self::DilatedConv,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Self::EmaFft => "ema_fft",
            Self::EmaFftPregen => "ema_fft_pregen",
            Self::EmaRecurrent => "ema_recurrent",
            Self::DilatedConv => "dilated_conv",
        }
    }

    /// Trainable parameters of the benchmarked instance.
    pub fn param_count(self) -> usize {
        match self {
            Self::DilatedConv => TCN_DEPTH * TCN_KERNEL,
            _ => 4 * EMA_FEATURES * EMA_EXPANSION,
        }
    }
}

impl std::str::FromStr for BenchOp {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|op| op.name() == s)
            .ok_or_else(|| invalid(format!("unknown bench op {s:?}")))
    }
}

impl std::fmt::Display for BenchOp {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Pass {
    Forward,
    Backward,
}

impl Pass {
    pub fn name(self) -> &'static str {
        match self {
            Self::Forward => "forward",
            Self::Backward => "backward",
        }
    }
}

impl std::str::FromStr for Pass {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "forward" => Ok(Self::Forward),
            "backward" => Ok(Self::Backward),
            _ => Err(invalid(format!("unknown pass {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchConfig {
    pub ops: Vec<BenchOp>,
    pub passes: Vec<Pass>,
    pub seq_lens: Vec<usize>,
    pub channels: usize,
    pub batch: usize,
    pub dtype: DType,
    pub warmup: usize,
    pub reps: usize,
    pub seed: u64,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            ops: BenchOp::ALL.to_vec(),
            passes: vec![Pass::Forward, Pass::Backward],
            seq_lens: vec![8192, 16384, 32768, 65536, 131072],
            channels: 64,
            batch: 1,
            dtype: DType::F32,
            warmup: 5,
            reps: 21,
            seed: 0,
        }
    }
}

impl BenchConfig {
    pub fn validate(&self) -> Result<()> {
        if self.reps == 0 {
            return Err(invalid("reps must be at least 1"));
        }
        if self.seq_lens.contains(&0) {
            return Err(invalid("sequence lengths must be positive"));
        }
        if self.batch == 0 || self.channels == 0 || self.channels % EMA_FEATURES != 0 {
            return Err(invalid(format!(
                "batch must be positive and channels a positive multiple of {EMA_FEATURES}"
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchRecord {
    pub op: BenchOp,
    pub pass: Pass,
    pub seq_len: usize,
    pub dtype: DType,
    pub param_count: usize,
    /// `None` marks a cell invalidated by non-finite output or a failed
    /// correctness gate.
    pub time_median_ns: Option<u64>,
    pub time_p10_ns: Option<u64>,
    pub time_p90_ns: Option<u64>,
    pub reps: usize,
    pub cpu: String,
    pub threads: usize,
}

/// CPU model string from `/proc/cpuinfo`, with commas removed for CSV.
pub fn cpu_model() -> String {
    std::fs::read_to_string("/proc/cpuinfo")
        .ok()
        .and_then(|s| {
            s.lines()
                .find(|l| l.starts_with("model name"))
                .and_then(|l| l.split(':').nth(1))
                .map(|m| m.trim().to_string())
        })
        .unwrap_or_else(|| std::env::consts::ARCH.to_string())
        .replace(',', ";")
}

/// Nearest-rank percentile of sorted samples.
fn percentile(sorted: &[u64], p: f64) -> u64 {
    let idx = ((p * (sorted.len() - 1) as f64).round() as usize).min(sorted.len() - 1);
    sorted[idx]
}

/// `(p10, median, p90)` of the samples.
pub fn summarize(samples: &[u64]) -> (u64, u64, u64) {
    let mut s = samples.to_vec();
    s.sort_unstable();
    (
        percentile(&s, 0.1),
        percentile(&s, 0.5),
        percentile(&s, 0.9),
    )
}

/// Output buffers reused across timed forward calls. Fresh multi-megabyte
/// allocations are served by new zeroed pages on every call once they pass
/// the allocator's mmap threshold, which would be timed as part of the op.
struct Scratch<T> {
    out: Tensor<T>,
    tmp: Tensor<T>,
}

struct Instance<T: Scalar> {
    x: Tensor<T>,
    ema: EmaParams<T>,
    stored: Tensor<T>,
    conv: Vec<Tensor<T>>,
    dilations: Vec<usize>,
}

impl<T: Scalar> Instance<T> {
    fn new(
        cfg: &BenchConfig,
        len: usize,
        ema: EmaParams<T>,
        stored: Tensor<T>,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        let x = Tensor::randn(&[cfg.batch, cfg.channels, len], 1.0, rng);
        let f = minimal_dilation_factor(TCN_KERNEL, TCN_DEPTH, 1, len as u64)
            .ok_or_else(|| invalid("no dilation factor reaches the sequence length"))?;
        let conv = (0..TCN_DEPTH)
            .map(|_| Tensor::randn(&[1, TCN_KERNEL], 0.25, rng))
            .collect();
        let dilations = (0..TCN_DEPTH).map(|i| f.pow(i as u32)).collect();
        Ok(Self {
            x,
            ema,
            stored,
            conv,
            dilations,
        })
    }

    fn scratch(&self) -> Scratch<T> {
        Scratch {
            out: Tensor::zeros(self.x.shape()),
            tmp: Tensor::zeros(self.x.shape()),
        }
    }

    fn forward(&self, op: BenchOp) -> Result<Tensor<T>> {
        let mut s = self.scratch();
        self.forward_into(op, &mut s)?;
        Ok(s.out)
    }

    /// Forward pass leaving its result in `s.out`.
    fn forward_into(&self, op: BenchOp, s: &mut Scratch<T>) -> Result<()> {
        match op {
            BenchOp::EmaFft => ema_fft_into(&self.x, &self.ema, s.out.data_mut()),
            BenchOp::EmaFftPregen => ema_fft_pregen_into(&self.x, &self.stored, s.out.data_mut()),
            BenchOp::EmaRecurrent => ema_recurrent_into(&self.x, &self.ema, s.out.data_mut()),
            BenchOp::DilatedConv => {
                // Layers alternate between the two buffers and end in `out`.
                let n = self.conv.len();
                for (i, (w, &d)) in self.conv.iter().zip(&self.dilations).enumerate() {
                    let (src, dst) = if (n - i) % 2 == 1 {
                        (&s.tmp, &mut s.out)
                    } else {
                        (&s.out, &mut s.tmp)
                    };
                    let src = if i == 0 { &self.x } else { src };
                    conv1d_dilated_into(src, w, d, true, dst.data_mut())?;
                }
                Ok(())
            }
        }
    }

    /// Forward on a fresh tape, then backward to the input and parameters.
    /// Returns whether every gradient is finite.
    fn forward_backward(&self, op: BenchOp) -> Result<bool> {
        let mut tape = Tape::<T>::new();
        let x = tape.param(self.x.clone());
        let mut leaves: Vec<Var> = vec![x];
        let y = match op {
            BenchOp::EmaFft | BenchOp::EmaRecurrent => {
                let vars = self.ema.register(&mut tape);
                leaves.extend([vars.raw_alpha, vars.raw_delta, vars.beta, vars.eta]);
                if op == BenchOp::EmaFft {
                    vars.fft(&mut tape, x)?
                } else {
                    vars.recurrent(&mut tape, x)?
                }
            }
            BenchOp::EmaFftPregen => {
                let k = tape.param(truncate_kernel(&self.stored, self.x.last_dim())?);
                leaves.push(k);
                tape.fft_convolve(x, k)?
            }
            BenchOp::DilatedConv => {
                let mut h = x;
                for (w, &d) in self.conv.iter().zip(&self.dilations) {
                    let w = tape.param(w.clone());
                    leaves.push(w);
                    h = tape.conv1d_dilated(h, w, d, true, ConvLayout::ChannelsFirst)?;
                }
                h
            }
        };
        let loss = tape.sum(y);
        let grads = match tape.backward(loss) {
            Ok(g) => g,
            Err(Error::NonFiniteGradient { .. }) => return Ok(false),
            Err(e) => return Err(e),
        };
        Ok(leaves
            .iter()
            .all(|&v| grads.get(v).is_some_and(|g| g.is_finite())))
    }

    /// Independent reference output for the correctness gate.
    fn reference(&self, op: BenchOp) -> Result<Tensor<T>> {
        match op {
            BenchOp::EmaFft | BenchOp::EmaFftPregen => ema_recurrent(&self.x, &self.ema),
            BenchOp::EmaRecurrent => ema_fft(&self.x, &self.ema),
            BenchOp::DilatedConv => {
                // Each dilated layer as one long FFT convolution with zeros
                // between the taps.
                let mut h = self.x.clone();
                for (w, &d) in self.conv.iter().zip(&self.dilations) {
                    let len = (TCN_KERNEL - 1) * d + 1;
                    let mut k = Tensor::zeros(&[1, len]);
                    for (j, &v) in w.data().iter().enumerate() {
                        k.data_mut()[j * d] = v;
                    }
                    h = fft_convolve(&h, &k)?;
                }
                Ok(h)
            }
        }
    }

    fn gate(&self, op: BenchOp) -> Result<bool> {
        let y = self.forward(op)?;
        let r = self.reference(op)?;
        let scale = r.data().iter().fold(1.0f64, |m, v| m.max(v.as_f64().abs()));
        let tol = match T::DTYPE {
            DType::F32 => 1e-3,
            DType::F64 => 1e-9,
        };
        Ok(y.is_finite() && y.max_abs_diff(&r) <= tol * scale)
    }
}

fn time_ns(f: impl FnOnce() -> Result<bool>) -> Result<Option<u64>> {
    let t = Instant::now();
    let ok = f()?;
    let ns = t.elapsed().as_nanos() as u64;
    Ok(ok.then_some(ns))
}

fn run_typed<T: Scalar>(cfg: &BenchConfig) -> Result<Vec<BenchRecord>> {
    cfg.validate()?;
    let cpu = cpu_model();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let lmax = cfg.seq_lens.iter().copied().max().unwrap_or(1);
    let mut lens = cfg.seq_lens.clone();
    lens.sort_unstable();
    lens.dedup();
    let mut ops = cfg.ops.clone();
    ops.sort_unstable();
    ops.dedup();
    let mut records = Vec::new();

    // The stored kernel is the pre-generated version of exactly the
    // parameters `ema_fft` uses.
    let ema = EmaParams::<T>::sample(EMA_FEATURES, EMA_EXPANSION, 1.0, &mut rng);
    let stored = ema_kernel(&ema, lmax)?;
    for &len in &lens {
        let inst = Instance::<T>::new(cfg, len, ema.clone(), stored.clone(), &mut rng)?;
        let valid: Vec<bool> = ops.iter().map(|&op| inst.gate(op)).collect::<Result<_>>()?;

        // Timed repetitions interleave the ops so slow drift in machine state
        // hits every op alike.
        let mut fwd: Vec<Vec<u64>> = vec![Vec::new(); ops.len()];
        let mut fwd_ok = valid.clone();
        let mut scratch = inst.scratch();
        for rep in 0..cfg.warmup + cfg.reps {
            for (i, &op) in ops.iter().enumerate() {
                if !fwd_ok[i] {
                    continue;
                }
                let timed = || {
                    inst.forward_into(op, &mut scratch)?;
                    Ok(black_box(&scratch.out).is_finite())
                };
                match time_ns(timed)? {
                    Some(ns) if rep >= cfg.warmup => fwd[i].push(ns),
                    Some(_) => {}
                    None => fwd_ok[i] = false,
                }
            }
        }
        let mut bwd: Vec<Vec<u64>> = vec![Vec::new(); ops.len()];
        let mut bwd_ok = fwd_ok.clone();
        if cfg.passes.contains(&Pass::Backward) {
            for rep in 0..cfg.warmup + cfg.reps {
                for (i, &op) in ops.iter().enumerate() {
                    if !bwd_ok[i] {
                        continue;
                    }
                    match time_ns(|| inst.forward_backward(op))? {
                        Some(ns) if rep >= cfg.warmup => bwd[i].push(ns),
                        Some(_) => {}
                        None => bwd_ok[i] = false,
                    }
                }
            }
        }

        for (i, &op) in ops.iter().enumerate() {
            let fwd_stats = fwd_ok[i].then(|| summarize(&fwd[i]));
            for &pass in &cfg.passes {
                let stats = match pass {
                    Pass::Forward => fwd_stats,
                    Pass::Backward => fwd_stats.filter(|_| bwd_ok[i]).map(|(_, fmed, _)| {
                        let net: Vec<u64> =
                            bwd[i].iter().map(|&t| t.saturating_sub(fmed)).collect();
                        summarize(&net)
                    }),
                };
                records.push(BenchRecord {
                    op,
                    pass,
                    seq_len: len,
                    dtype: T::DTYPE,
                    param_count: op.param_count(),
                    time_median_ns: stats.map(|s| s.1),
                    time_p10_ns: stats.map(|s| s.0),
                    time_p90_ns: stats.map(|s| s.2),
                    reps: cfg.reps,
                    cpu: cpu.clone(),
                    threads: 1,
                });
            }
        }
    }
    sort_records(&mut records);
    Ok(records)
}

/// Times every (op, pass, length) cell. Backward times are forward+backward
/// on a fresh tape minus the forward median.
pub fn run_bench(cfg: &BenchConfig) -> Result<Vec<BenchRecord>> {
    match cfg.dtype {
        DType::F32 => run_typed::<f32>(cfg),
        DType::F64 => run_typed::<f64>(cfg),
    }
}

pub fn sort_records(records: &mut [BenchRecord]) {
    records.sort_by(|a, b| (a.op, a.pass, a.seq_len).cmp(&(b.op, b.pass, b.seq_len)));
}

fn opt(v: Option<u64>) -> String {
    v.map(|v| v.to_string()).unwrap_or_default()
}

pub fn to_csv(records: &[BenchRecord]) -> String {
    let mut sorted = records.to_vec();
    sort_records(&mut sorted);
    let mut out = format!("{CSV_HEADER}\n");
    for r in &sorted {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{},{},{},{}",
            r.op,
            r.pass.name(),
            r.seq_len,
            r.dtype,
            r.param_count,
            opt(r.time_median_ns),
            opt(r.time_p10_ns),
            opt(r.time_p90_ns),
            r.reps,
            r.cpu.replace(',', ";"),
            r.threads
        );
    }
    out
}

pub fn emit_csv(records: &[BenchRecord], path: impl AsRef<Path>) -> Result<()> {
    std::fs::write(path, to_csv(records)).map_err(Error::from)
}

pub fn parse_csv(text: &str) -> Result<Vec<BenchRecord>> {
    let mut lines = text.lines();
    if lines.next() != Some(CSV_HEADER) {
        return Err(invalid("bench CSV header mismatch"));
    }
    let num = |s: &str| {
        s.parse::<usize>()
            .map_err(|_| invalid(format!("bad integer {s:?}")))
    };
    let time = |s: &str| {
        if s.is_empty() {
            Ok(None)
        } else {
            s.parse::<u64>()
                .map(Some)
                .map_err(|_| invalid(format!("bad time {s:?}")))
        }
    };
    lines
        .filter(|l| !l.is_empty())
        .map(|line| {
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 11 {
                return Err(invalid(format!(
                    "expected 11 fields, got {}: {line:?}",
                    f.len()
                )));
            }
            Ok(BenchRecord {
                op: f[0].parse()?,
                pass: f[1].parse()?,
                seq_len: num(f[2])?,
                dtype: f[3].parse().map_err(|e: String| invalid(e))?,
                param_count: num(f[4])?,
                time_median_ns: time(f[5])?,
                time_p10_ns: time(f[6])?,
                time_p90_ns: time(f[7])?,
                reps: num(f[8])?,
                cpu: f[9].to_string(),
                threads: num(f[10])?,
            })
        })
        .collect()
}

pub fn median_of(records: &[BenchRecord], op: BenchOp, pass: Pass, len: usize) -> Option<u64> {
    records
        .iter()
        .find(|r| r.op == op && r.pass == pass && r.seq_len == len)
        .and_then(|r| r.time_median_ns)
}

/// `(L, median)` points of one op/pass, ascending in `L`.
pub fn series(records: &[BenchRecord], op: BenchOp, pass: Pass) -> Vec<(usize, u64)> {
    let mut s: Vec<(usize, u64)> = records
        .iter()
        .filter(|r| r.op == op && r.pass == pass)
        .filter_map(|r| r.time_median_ns.map(|t| (r.seq_len, t)))
        .collect();
    s.sort_unstable();
    s
}

/// Least-squares slope of `ln t` against `ln L`.
pub fn loglog_slope(points: &[(usize, u64)]) -> Option<f64> {
    if points.len() < 2 {
        return None;
    }
    let xy: Vec<(f64, f64)> = points
        .iter()
        .map(|&(l, t)| ((l as f64).ln(), (t.max(1) as f64).ln()))
        .collect();
    let n = xy.len() as f64;
    let mx = xy.iter().map(|p| p.0).sum::<f64>() / n;
    let my = xy.iter().map(|p| p.1).sum::<f64>() / n;
    let sxx: f64 = xy.iter().map(|p| (p.0 - mx).powi(2)).sum();
    let sxy: f64 = xy.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    (sxx > 0.0).then(|| sxy / sxx)
}

/// Count of steps where the median drops by more than `tolerance` (relative)
/// from one length to the next.
pub fn monotonic_violations(points: &[(usize, u64)], tolerance: f64) -> usize {
    points
        .windows(2)
        .filter(|w| (w[1].1 as f64) < (w[0].1 as f64) * (1.0 - tolerance))
        .count()
}

/// Time of `slow` over time of `fast` at each length both have.
pub fn speedups(
    records: &[BenchRecord],
    slow: BenchOp,
    fast: BenchOp,
    pass: Pass,
) -> Vec<(usize, f64)> {
    series(records, slow, pass)
        .into_iter()
        .filter_map(|(l, ts)| {
            median_of(records, fast, pass, l).map(|tf| (l, ts as f64 / tf.max(1) as f64))
        })
        .collect()
}

/// Length-by-op table of median times in milliseconds.
pub fn summary_table(records: &[BenchRecord]) -> String {
    let mut out = String::new();
    let mut passes: Vec<Pass> = records.iter().map(|r| r.pass).collect();
    passes.sort_unstable();
    passes.dedup();
    let mut ops: Vec<BenchOp> = records.iter().map(|r| r.op).collect();
    ops.sort_unstable();
    ops.dedup();
    let mut lens: Vec<usize> = records.iter().map(|r| r.seq_len).collect();
    lens.sort_unstable();
    lens.dedup();
    for pass in passes {
        let note = if pass == Pass::Backward {
            " (forward+backward minus forward median)"
        } else {
            ""
        };
        let _ = writeln!(out, "{} pass, median ms{note}", pass.name());
        let _ = write!(out, "{:>9}", "seq_len");
        for op in &ops {
            let _ = write!(out, " {:>15}", op.name());
        }
        out.push('\n');
        for &l in &lens {
            let _ = write!(out, "{l:>9}");
            for &op in &ops {
                match median_of(records, op, pass, l) {
                    Some(t) => {
                        let _ = write!(out, " {:>15.3}", t as f64 / 1e6);
                    }
                    None => {
                        let _ = write!(out, " {:>15}", "-");
                    }
                }
            }
            out.push('\n');
        }
    }
    out
}
