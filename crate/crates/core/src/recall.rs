//! Associative recall: sequences of key/value pairs followed by a query key,
//! scored on predicting the value paired with the query.

use std::collections::HashSet;
use std::fmt::Write as _;
use std::path::Path;
use std::time::{Duration, Instant};

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::model::{Mode, Model, ModelConfig};
use crate::optim::{clip_grad_norm, collect_grads, Adam, Decay, Schedule};
use crate::scalar::Scalar;
use crate::tape::Tape;

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct RecallSample {
    pub tokens: Vec<usize>,
    pub target: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RecallSpec {
    pub seq_len: usize,
    pub vocab_size: usize,
    /// Distinct keys drawn per sample; keys repeat when there are more pairs.
    /// `None` uses the whole key half of the vocabulary.
    pub distinct_keys: Option<usize>,
}

impl RecallSpec {
    pub fn new(seq_len: usize, vocab_size: usize) -> Self {
        Self {
            seq_len,
            vocab_size,
            distinct_keys: None,
        }
    }

    pub fn pairs(&self) -> usize {
        self.seq_len.saturating_sub(1) / 2
    }

    pub fn keys(&self) -> usize {
        self.distinct_keys.unwrap_or(self.vocab_size / 2)
    }

    pub fn validate(&self) -> Result<()> {
        if self.vocab_size < 2 || self.vocab_size % 2 != 0 {
            return Err(invalid(format!(
                "vocab_size must be even and at least 2, got {}",
                self.vocab_size
            )));
        }
        if self.seq_len < 3 {
            return Err(invalid(format!(
                "seq_len must be at least 3, got {}",
                self.seq_len
            )));
        }
        let k = self.keys();
        if k == 0 || k > self.vocab_size / 2 {
            return Err(invalid(format!(
                "{k} distinct keys requested but the key half holds {}",
                self.vocab_size / 2
            )));
        }
        Ok(())
    }

    /// One sample. Keys are `0..V/2`, values `V/2..V`; each sample draws its
    /// own injective key→value map. Even lengths start with one filler value.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> RecallSample {
        let half = self.vocab_size / 2;
        let mut values: Vec<usize> = (half..self.vocab_size).collect();
        values.shuffle(rng);
        let mut keys: Vec<usize> = (0..half).collect();
        keys.shuffle(rng);
        keys.truncate(self.keys());

        let pairs = self.pairs();
        let mut body_keys: Vec<usize> = if pairs <= keys.len() {
            keys[..pairs].to_vec()
        } else {
            let mut v = keys.clone();
            v.extend((keys.len()..pairs).map(|_| *keys.choose(rng).expect("non-empty key set")));
            v
        };
        body_keys.shuffle(rng);

        let mut tokens = Vec::with_capacity(self.seq_len);
        if self.seq_len % 2 == 0 {
            tokens.push(half + rng.random_range(0..half));
        }
        for &k in &body_keys {
            tokens.extend([k, values[k]]);
        }
        let query = *body_keys.choose(rng).expect("at least one pair");
        tokens.push(query);
        RecallSample {
            tokens,
            target: values[query],
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RecallData {
    pub spec: RecallSpec,
    pub train: Vec<RecallSample>,
    pub eval: Vec<RecallSample>,
}

/// Reproducible train/eval split; no eval sequence occurs in train.
pub fn generate_dataset(
    spec: RecallSpec,
    n_train: usize,
    n_eval: usize,
    seed: u64,
) -> Result<RecallData> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let train: Vec<RecallSample> = (0..n_train).map(|_| spec.sample(&mut rng)).collect();
    let seen: HashSet<&[usize]> = train.iter().map(|s| s.tokens.as_slice()).collect();
    let mut eval = Vec::with_capacity(n_eval);
    let mut misses = 0usize;
    while eval.len() < n_eval {
        let s = spec.sample(&mut rng);
        if seen.contains(s.tokens.as_slice()) {
            misses += 1;
            if misses > 100 * (n_eval + 1) {
                return Err(invalid(
                    "cannot draw enough eval sequences disjoint from train",
                ));
            }
            continue;
        }
        eval.push(s);
    }
    Ok(RecallData { spec, train, eval })
}

fn flatten(samples: &[&RecallSample]) -> (Vec<usize>, Vec<usize>) {
    let tokens = samples
        .iter()
        .flat_map(|s| s.tokens.iter().copied())
        .collect();
    let targets = samples.iter().map(|s| s.target).collect();
    (tokens, targets)
}

/// Exact-match accuracy of the final-position argmax.
pub fn evaluate<T: Scalar>(
    model: &Model<T>,
    samples: &[RecallSample],
    batch: usize,
) -> Result<f64> {
    if samples.is_empty() {
        return Ok(0.0);
    }
    let mut correct = 0usize;
    for chunk in samples.chunks(batch.max(1)) {
        let refs: Vec<&RecallSample> = chunk.iter().collect();
        let (tokens, targets) = flatten(&refs);
        let pred = model.predict_last(&tokens, chunk.len())?;
        correct += pred.iter().zip(&targets).filter(|(p, t)| p == t).count();
    }
    Ok(correct as f64 / samples.len() as f64)
}

/// The learning-rate × dropout grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepSpec {
    pub learning_rates: Vec<f64>,
    pub dropouts: Vec<f64>,
}

impl Default for SweepSpec {
    fn default() -> Self {
        Self {
            learning_rates: vec![1e-5, 1e-4, 1e-3, 1e-2, 1e-1],
            dropouts: vec![0.0, 0.1],
        }
    }
}

impl SweepSpec {
    pub fn points(&self) -> Vec<(f64, f64)> {
        self.learning_rates
            .iter()
            .flat_map(|&lr| self.dropouts.iter().map(move |&d| (lr, d)))
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainSettings {
    pub epochs: usize,
    pub batch_size: usize,
    /// Fraction of all steps spent on the linear warmup.
    pub warmup_frac: f64,
    /// Learning-rate shape after warmup, spread over `epochs`.
    pub decay: Decay,
    /// Global gradient-norm clip; `None` disables clipping.
    pub clip_norm: Option<f64>,
    /// Stop once eval accuracy reaches this value.
    pub target_acc: f64,
    pub seed: u64,
    /// Worker threads for grid points; `None` reads `SEQOP_THREADS`.
    pub threads: Option<usize>,
    pub verbose: bool,
}

impl Default for TrainSettings {
    fn default() -> Self {
        Self {
            epochs: 200,
            batch_size: 8,
            warmup_frac: 0.1,
            decay: Decay::Cosine,
            clip_norm: Some(1.0),
            target_acc: 1.0,
            seed: 0,
            threads: None,
            verbose: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub lr: f64,
    pub dropout: f64,
    pub seed: u64,
    /// Epochs actually trained (fewer than budgeted on early stop).
    pub epochs: usize,
    pub best_eval_acc: f64,
    pub final_train_loss: f64,
    pub diverged: bool,
}

/// One grid point mid-training. Holds everything needed to resume, so a
/// sweep can screen many points briefly and continue only the promising ones.
pub struct Trainer<T: Scalar> {
    pub model: Model<T>,
    pub report: RunReport,
    /// Snapshot taken whenever eval accuracy improves.
    best: Model<T>,
    opt: Adam<T>,
    rng: ChaCha8Rng,
    sched: Schedule,
    batch: usize,
    order: Vec<usize>,
    step: usize,
    verbose: bool,
    slowest_epoch: Duration,
}

impl<T: Scalar> Trainer<T> {
    /// Builds the model and scores it untrained, so the best accuracy is
    /// never below the starting point.
    pub fn new(
        cfg: &ModelConfig,
        data: &RecallData,
        lr: f64,
        dropout: f64,
        settings: &TrainSettings,
    ) -> Result<Self> {
        let cfg = ModelConfig {
            dropout,
            ..cfg.clone()
        };
        let model = Model::<T>::new(cfg, settings.seed)?;
        let batch = settings.batch_size.max(1);
        let total = data.train.len().div_ceil(batch) * settings.epochs;
        let sched = Schedule {
            peak: lr,
            warmup: (settings.warmup_frac * total as f64).round() as usize,
            total,
            decay: settings.decay,
        };
        let report = RunReport {
            lr,
            dropout,
            seed: settings.seed,
            epochs: 0,
            best_eval_acc: evaluate(&model, &data.eval, 250)?,
            final_train_loss: f64::NAN,
            diverged: false,
        };
        Ok(Self {
            opt: Adam::new(&model.store),
            best: model.clone(),
            model,
            report,
            rng: ChaCha8Rng::seed_from_u64(settings.seed ^ 0x5eed_0f_da7a),
            sched,
            batch,
            order: (0..data.train.len()).collect(),
            step: 0,
            verbose: settings.verbose,
            slowest_epoch: Duration::ZERO,
        })
    }

    /// Done when diverged or when `target` is reached.
    pub fn finished(&self, target: f64) -> bool {
        self.report.diverged || self.report.best_eval_acc >= target
    }

    /// One pass over the training set followed by an eval. A non-finite loss
    /// or parameter marks the run diverged with accuracy 0.
    pub fn epoch(&mut self, data: &RecallData, clip: Option<f64>) -> Result<()> {
        if self.report.diverged {
            return Ok(());
        }
        let t0 = Instant::now();
        self.order.shuffle(&mut self.rng);
        let mut loss_sum = 0.0;
        for idx in self.order.chunks(self.batch) {
            let samples: Vec<&RecallSample> = idx.iter().map(|&i| &data.train[i]).collect();
            let (tokens, targets) = flatten(&samples);
            let mut tape = Tape::new();
            let p = self.model.store.bind(&mut tape);
            let loss = self.model.loss(
                &mut tape,
                &p,
                &tokens,
                &targets,
                &mut Mode::Train(&mut self.rng),
            )?;
            let lv = tape.value(loss).item().as_f64();
            let grads = if lv.is_finite() {
                tape.backward(loss).ok()
            } else {
                None
            };
            let Some(mut grads) = grads else {
                self.report.final_train_loss = lv;
                return Ok(self.diverge());
            };
            let mut g = collect_grads(&self.model.store, &p, &mut grads);
            if let Some(c) = clip {
                clip_grad_norm(&mut g, c);
            }
            self.opt
                .step(&mut self.model.store, &g, self.sched.lr(self.step));
            self.step += 1;
            loss_sum += lv * idx.len() as f64;
        }
        if self.model.store.iter().any(|(_, t)| !t.is_finite()) {
            return Ok(self.diverge());
        }
        self.report.epochs += 1;
        self.report.final_train_loss = loss_sum / data.train.len().max(1) as f64;
        let acc = evaluate(&self.model, &data.eval, 250)?;
        if acc > self.report.best_eval_acc {
            self.report.best_eval_acc = acc;
            self.best = self.model.clone();
        }
        self.slowest_epoch = self.slowest_epoch.max(t0.elapsed());
        if self.verbose {
            eprintln!(
                "lr={:e} dropout={} epoch={} loss={:.4} eval_acc={acc:.4}",
                self.report.lr,
                self.report.dropout,
                self.report.epochs,
                self.report.final_train_loss
            );
        }
        Ok(())
    }

    /// The model that scored `report.best_eval_acc`.
    pub fn into_best(self) -> (RunReport, Model<T>) {
        (self.report, self.best)
    }

    fn diverge(&mut self) {
        self.report.diverged = true;
        self.report.best_eval_acc = 0.0;
    }
}

/// Trains one grid point for up to `settings.epochs`, stopping early at
/// `settings.target_acc`. Returns the best-scoring model, not the last.
pub fn train_one<T: Scalar>(
    cfg: &ModelConfig,
    data: &RecallData,
    lr: f64,
    dropout: f64,
    settings: &TrainSettings,
) -> Result<(RunReport, Model<T>)> {
    let mut tr = Trainer::<T>::new(cfg, data, lr, dropout, settings)?;
    while tr.report.epochs < settings.epochs && !tr.finished(settings.target_acc) {
        tr.epoch(data, settings.clip_norm)?;
    }
    Ok(tr.into_best())
}

/// Thread count from `SEQOP_THREADS`, falling back to the available cores.
pub fn worker_threads() -> usize {
    std::env::var("SEQOP_THREADS")
        .ok()
        .and_then(|v| v.parse().ok())
        .filter(|&n| n > 0)
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    pub rows: Vec<RunReport>,
}

impl SweepReport {
    pub fn best(&self) -> Option<&RunReport> {
        self.rows
            .iter()
            .max_by(|a, b| a.best_eval_acc.total_cmp(&b.best_eval_acc))
    }

    pub fn best_eval_acc(&self) -> f64 {
        self.best().map_or(0.0, |r| r.best_eval_acc)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("lr,dropout,seed,epochs,best_eval_acc\n");
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{:e},{},{},{},{}",
                r.lr, r.dropout, r.seed, r.epochs, r.best_eval_acc
            );
        }
        out
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_csv()).map_err(Error::from)
    }

    pub fn to_table(&self) -> String {
        let mut out = format!(
            "{:>8} {:>8} {:>6} {:>7} {:>9}\n",
            "lr", "dropout", "seed", "epochs", "eval_acc"
        );
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{:>8.0e} {:>8} {:>6} {:>7} {:>9.4}{}",
                r.lr,
                r.dropout,
                r.seed,
                r.epochs,
                r.best_eval_acc,
                if r.diverged { "  (diverged)" } else { "" }
            );
        }
        out
    }
}

/// Trains every grid point for the full epoch budget, in parallel up to the
/// configured thread count. Rows come back in grid order.
pub fn sweep<T: Scalar>(
    cfg: &ModelConfig,
    data: &RecallData,
    grid: &SweepSpec,
    settings: &TrainSettings,
) -> Result<SweepReport> {
    let unlimited = Budget {
        wall: Duration::MAX,
        screen_epochs: settings.epochs,
        finalists: 0,
    };
    Ok(train_recall::<T>(cfg, data, grid, settings, &unlimited)?.0)
}

/// How `train_recall` spends its time: every grid point trains for
/// `screen_epochs`, then the `finalists` best continue until the epoch cap,
/// the target accuracy, or the wall-clock limit.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Budget {
    pub wall: Duration,
    pub screen_epochs: usize,
    pub finalists: usize,
}

impl Default for Budget {
    fn default() -> Self {
        Self {
            wall: Duration::from_secs(30 * 60),
            screen_epochs: 2,
            finalists: 2,
        }
    }
}

/// Budgeted sweep. Rows come back in grid order, each with the epochs it
/// actually got. The wall limit is checked between epochs using the slowest
/// epoch seen so far, so a run never starts an epoch it cannot finish.
/// Also returns the best model over the whole grid.
pub fn train_recall<T: Scalar>(
    cfg: &ModelConfig,
    data: &RecallData,
    grid: &SweepSpec,
    settings: &TrainSettings,
    budget: &Budget,
) -> Result<(SweepReport, Model<T>)> {
    if grid.points().is_empty() {
        return Err(invalid("sweep grid is empty"));
    }
    let start = Instant::now();
    let threads = settings.threads.unwrap_or_else(worker_threads);
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| invalid(format!("thread pool: {e}")))?;
    let points = grid.points();
    let mut trainers = pool.install(|| {
        points
            .par_iter()
            .map(|&(lr, d)| Trainer::<T>::new(cfg, data, lr, d, settings))
            .collect::<Result<Vec<_>>>()
    })?;

    // Rounds of one epoch each over the active set. A round is predicted
    // from the slowest epoch each trainer has taken so far.
    let round = |trainers: &mut [Trainer<T>], active: &[usize]| -> Result<bool> {
        let todo: Vec<usize> = active
            .iter()
            .copied()
            .filter(|&i| {
                trainers[i].report.epochs < settings.epochs
                    && !trainers[i].finished(settings.target_acc)
            })
            .collect();
        let per_epoch = todo
            .iter()
            .map(|&i| trainers[i].slowest_epoch)
            .max()
            .unwrap_or_default();
        let waves = todo.len().div_ceil(threads.max(1)) as u32;
        if todo.is_empty() || start.elapsed() + per_epoch * waves > budget.wall {
            return Ok(false);
        }
        pool.install(|| {
            trainers
                .par_iter_mut()
                .enumerate()
                .filter(|(i, _)| todo.contains(i))
                .try_for_each(|(_, tr)| tr.epoch(data, settings.clip_norm))
        })?;
        Ok(true)
    };

    let all: Vec<usize> = (0..trainers.len()).collect();
    for _ in 0..budget.screen_epochs {
        if !round(&mut trainers, &all)? {
            break;
        }
    }
    let mut ranked = all;
    ranked.sort_by(|&a, &b| {
        trainers[b]
            .report
            .best_eval_acc
            .total_cmp(&trainers[a].report.best_eval_acc)
    });
    ranked.truncate(budget.finalists);
    while round(&mut trainers, &ranked)? {}

    let (rows, models): (Vec<RunReport>, Vec<Model<T>>) =
        trainers.into_iter().map(Trainer::into_best).unzip();
    let best = (0..rows.len())
        .max_by(|&a, &b| rows[a].best_eval_acc.total_cmp(&rows[b].best_eval_acc))
        .unwrap_or(0);
    let model = models.into_iter().nth(best).expect("grid is non-empty");
    Ok((SweepReport { rows }, model))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn nine_token_example_shape() {
        let spec = RecallSpec::new(9, 8);
        let s = spec.sample(&mut ChaCha8Rng::seed_from_u64(1));
        assert_eq!(s.tokens.len(), 9);
        let keys: HashSet<usize> = s.tokens[..8].iter().step_by(2).copied().collect();
        assert_eq!(keys.len(), 4);
        assert!(s.tokens[..8].iter().skip(1).step_by(2).all(|&v| v >= 4));
    }

    #[test]
    fn even_length_gets_filler() {
        let spec = RecallSpec::new(64, 10);
        let s = spec.sample(&mut ChaCha8Rng::seed_from_u64(2));
        assert_eq!(s.tokens.len(), 64);
        assert!(s.tokens[0] >= 5);
        assert!(s.tokens[63] < 5);
    }

    #[test]
    fn invalid_specs() {
        assert!(RecallSpec::new(9, 7).validate().is_err());
        assert!(RecallSpec {
            distinct_keys: Some(5),
            ..RecallSpec::new(9, 8)
        }
        .validate()
        .is_err());
        assert!(generate_dataset(RecallSpec::new(2, 8), 1, 1, 0).is_err());
    }

    #[test]
    fn sweep_grid_has_ten_points() {
        assert_eq!(SweepSpec::default().points().len(), 10);
    }

    #[test]
    fn csv_header() {
        let r = SweepReport { rows: vec![] };
        assert_eq!(r.to_csv(), "lr,dropout,seed,epochs,best_eval_acc\n");
    }
}
