//! Training loops, learning-rate schedules, evaluation and presets.

pub mod adam;
pub mod eval;
pub mod presets;

use std::collections::BTreeMap;
use std::fmt;
use std::io::Write;
use std::str::FromStr;
use std::time::Instant;

use crate::autodiff::Tape;
use crate::error::{Error, Result};
use crate::model::{ModelConfig, SetModel};
use crate::param::ParamStore;
use crate::rng::Rng;
use crate::tasks::max_regression::gen_max_regression;
use crate::tasks::mog::{gen_synthetic_mog_with_size, mog_head, mog_loglik_tape, MogGenConfig};
use crate::tensor::Tensor;

pub use adam::{clip_grad_norm, Adam, StepOutcome};
pub use eval::{
    evaluate, evaluate_clustering, evaluate_max_regression, evaluate_oracle, predict_max, predict_mog, ClusteringReport,
    DatasetEval, EvalReport, RegressionReport, Summary,
};

// Rng streams derived from the run seed.
const INIT_STREAM: u64 = 0;
const DATA_STREAM: u64 = 1;
const EVAL_STREAM: u64 = 2;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Task {
    MaxRegression,
    Clustering,
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Task::MaxRegression => "max-regression",
            Task::Clustering => "clustering",
        })
    }
}

impl FromStr for Task {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "max-regression" => Ok(Task::MaxRegression),
            "clustering" => Ok(Task::Clustering),
            other => Err(Error::Config(format!("unknown task `{other}`"))),
        }
    }
}

/// Step decay: `lr` until `decay_step`, `lr * decay_factor` afterwards.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LrSchedule {
    pub lr: f64,
    pub decay_step: Option<usize>,
    pub decay_factor: f64,
}

impl LrSchedule {
    pub fn constant(lr: f64) -> Self {
        Self {
            lr,
            decay_step: None,
            decay_factor: 1.0,
        }
    }

    /// Learning rate used for the 1-based optimisation step `step`.
    pub fn at(&self, step: usize) -> f64 {
        match self.decay_step {
            Some(s) if step > s => self.lr * self.decay_factor,
            _ => self.lr,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub task: Task,
    pub model: ModelConfig,
    pub schedule: LrSchedule,
    /// Sets per step (max regression) or datasets per step (clustering).
    pub batch_size: usize,
    pub steps: usize,
    pub seed: u64,
    pub eval_every: usize,
    /// Sets or datasets drawn for each evaluation during training.
    pub eval_datasets: usize,
    pub grad_clip: Option<f64>,
    /// Parallel forward/backward workers within a step.
    pub workers: usize,
    /// Generator for the clustering task.
    pub mog: MogGenConfig,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        let counts = [
            ("batch_size", self.batch_size),
            ("steps", self.steps),
            ("eval_every", self.eval_every),
            ("eval_datasets", self.eval_datasets),
            ("workers", self.workers),
        ];
        if let Some((key, _)) = counts.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{key} must be positive")));
        }
        if !(self.schedule.lr > 0.0) || !(self.schedule.decay_factor > 0.0) {
            return Err(Error::Config("learning rate and decay factor must be positive".into()));
        }
        if matches!(self.grad_clip, Some(c) if !(c > 0.0)) {
            return Err(Error::Config("grad_clip must be positive".into()));
        }
        let (rows, cols) = self.model.output_shape();
        match self.task {
            Task::MaxRegression => {
                if self.model.encoder.input_dim != 1 || (rows, cols) != (1, 1) {
                    return Err(Error::Config(
                        "max-regression needs input_dim 1 and a single scalar output per set".into(),
                    ));
                }
            }
            Task::Clustering => {
                let dim = self.mog.dim;
                if self.model.encoder.input_dim != dim || rows != self.mog.k || cols != 1 + 2 * dim {
                    return Err(Error::Config(format!(
                        "clustering with k={} in {dim}D needs input_dim {dim} and {}x{} outputs per set, model gives {rows}x{cols}",
                        self.mog.k,
                        self.mog.k,
                        1 + 2 * dim
                    )));
                }
                if self.mog.n_min == 0 || self.mog.n_min > self.mog.n_max {
                    return Err(Error::Config("n_min must be in 1..=n_max".into()));
                }
            }
        }
        Ok(())
    }

    /// Seed for evaluation datasets, disjoint from the training stream.
    pub fn eval_seed(&self) -> u64 {
        Rng::derive(self.seed, EVAL_STREAM).next_u64()
    }
}

/// Scalar metrics recorded at one evaluation point.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricsRecord {
    pub step: usize,
    /// Mean training loss since the previous record.
    pub loss: f64,
    pub metrics: Vec<(String, f64)>,
    pub wall_s: f64,
}

pub const METRICS_HEADER: &str = "step,loss,metric_name,metric_value,wall_s";

impl MetricsRecord {
    pub fn metric(&self, name: &str) -> Option<f64> {
        self.metrics.iter().find(|(n, _)| n == name).map(|(_, v)| *v)
    }

    /// One CSV row per metric, without header.
    pub fn write_csv(&self, w: &mut impl Write) -> Result<()> {
        for (name, value) in &self.metrics {
            writeln!(w, "{},{},{},{},{:.3}", self.step, self.loss, name, value, self.wall_s)?;
        }
        Ok(())
    }
}

/// Drives optimisation of one model under a [`TrainConfig`].
pub struct Trainer {
    cfg: TrainConfig,
    model: SetModel,
    adam: Adam,
    data_rng: Rng,
    step: usize,
    skipped: usize,
    window: (f64, usize),
    started: Instant,
}

impl Trainer {
    pub fn new(cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let model = SetModel::new(cfg.model.clone(), &mut Rng::derive(cfg.seed, INIT_STREAM))?;
        let adam = Adam::new(model.params());
        Ok(Self {
            data_rng: Rng::derive(cfg.seed, DATA_STREAM),
            cfg,
            model,
            adam,
            step: 0,
            skipped: 0,
            window: (0.0, 0),
            started: Instant::now(),
        })
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    pub fn model(&self) -> &SetModel {
        &self.model
    }

    pub fn into_model(self) -> SetModel {
        self.model
    }

    pub fn steps_done(&self) -> usize {
        self.step
    }

    /// Steps whose gradient was non-finite and therefore not applied.
    pub fn skipped_steps(&self) -> usize {
        self.skipped
    }

    /// One optimisation step; returns the minibatch loss. A non-finite loss
    /// aborts with [`Error::Diverged`] before any parameter changes.
    pub fn step(&mut self) -> Result<f64> {
        let next = self.step + 1;
        let batch = self.sample_batch()?;
        let (loss, grads) = batch_gradients(&self.model, &batch, self.cfg.workers)?;
        if !loss.is_finite() {
            return Err(Error::Diverged { step: next });
        }
        let store = self.model.params_mut();
        store.zero_grad();
        for (p, g) in store.iter_mut().zip(grads) {
            if let Some(g) = g {
                p.grad = g;
            }
        }
        if let Some(c) = self.cfg.grad_clip {
            clip_grad_norm(store, c);
        }
        if self.adam.step(store, self.cfg.schedule.at(next)) == StepOutcome::SkippedNonFinite {
            self.skipped += 1;
        }
        self.step = next;
        self.window.0 += loss;
        self.window.1 += 1;
        Ok(loss)
    }

    /// Evaluates the current model and closes the loss window.
    pub fn record(&mut self) -> Result<MetricsRecord> {
        let report = evaluate(&self.model, &self.cfg, self.cfg.eval_datasets, self.cfg.eval_seed())?;
        let mut metrics = report.metrics();
        metrics.push(("skipped_steps".into(), self.skipped as f64));
        let loss = if self.window.1 > 0 {
            self.window.0 / self.window.1 as f64
        } else {
            f64::NAN
        };
        self.window = (0.0, 0);
        Ok(MetricsRecord {
            step: self.step,
            loss,
            metrics,
            wall_s: self.started.elapsed().as_secs_f64(),
        })
    }

    /// Runs the remaining steps, recording every `eval_every` steps and at the
    /// end. `on_record` sees each record with the model at that point.
    pub fn run(
        &mut self,
        mut on_record: impl FnMut(&MetricsRecord, &SetModel) -> Result<()>,
    ) -> Result<Vec<MetricsRecord>> {
        let mut records = Vec::new();
        while self.step < self.cfg.steps {
            self.step()?;
            if self.step % self.cfg.eval_every == 0 || self.step == self.cfg.steps {
                let rec = self.record()?;
                on_record(&rec, &self.model)?;
                records.push(rec);
            }
        }
        Ok(records)
    }

    fn sample_batch(&mut self) -> Result<Batch> {
        let rng = &mut self.data_rng;
        Ok(match self.cfg.task {
            Task::MaxRegression => {
                // every set draws its own size
                let (sets, y) = (0..self.cfg.batch_size)
                    .map(|_| {
                        let b = gen_max_regression(rng, 1);
                        (b.set(0).to_vec(), b.targets[0])
                    })
                    .unzip();
                Batch::Regression { sets, y }
            }
            Task::Clustering => {
                let g = &self.cfg.mog;
                let n = rng.int_inclusive(g.n_min, g.n_max);
                let mut data = Vec::with_capacity(self.cfg.batch_size * n * g.dim);
                for _ in 0..self.cfg.batch_size {
                    let ds = gen_synthetic_mog_with_size(rng, g, n)?;
                    data.extend_from_slice(ds.points.data());
                }
                Batch::Clustering {
                    n,
                    dim: g.dim,
                    x: Tensor::from_vec(self.cfg.batch_size * n, g.dim, data)?,
                }
            }
        })
    }
}

pub struct TrainOutcome {
    pub model: SetModel,
    pub records: Vec<MetricsRecord>,
    pub skipped_steps: usize,
}

fn run_task(cfg: &TrainConfig, task: Task) -> Result<TrainOutcome> {
    if cfg.task != task {
        return Err(Error::Config(format!("config is for task {}, not {task}", cfg.task)));
    }
    let mut trainer = Trainer::new(cfg.clone())?;
    let records = trainer.run(|_, _| Ok(()))?;
    let skipped_steps = trainer.skipped_steps();
    Ok(TrainOutcome {
        model: trainer.into_model(),
        records,
        skipped_steps,
    })
}

/// Minimises mean absolute error between predicted and true set maxima.
pub fn train_max_regression(cfg: &TrainConfig) -> Result<TrainOutcome> {
    run_task(cfg, Task::MaxRegression)
}

/// Maximises the mean per-datum mixture log-likelihood of generated datasets.
pub fn train_amortized_clustering(cfg: &TrainConfig) -> Result<TrainOutcome> {
    run_task(cfg, Task::Clustering)
}

/// Regression sets vary in size; clustering batches are `groups` equally
/// sized sets stacked row-wise.
enum Batch {
    Regression { sets: Vec<Vec<f64>>, y: Vec<f64> },
    Clustering { n: usize, dim: usize, x: Tensor },
}

impl Batch {
    fn groups(&self) -> usize {
        match self {
            Batch::Regression { y, .. } => y.len(),
            Batch::Clustering { n, x, .. } => x.rows() / n,
        }
    }

    /// Loss on sets `start..start + count`, as a mean over those sets.
    fn chunk_loss(&self, model: &SetModel, tape: &mut Tape, start: usize, count: usize) -> Result<crate::Var> {
        let p = model.params().bind(tape);
        match self {
            Batch::Regression { sets, y } => {
                // one stacked forward pass per distinct size
                let mut by_size: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
                for i in start..start + count {
                    by_size.entry(sets[i].len()).or_default().push(i);
                }
                let mut total: Option<crate::Var> = None;
                for (n, idx) in by_size {
                    let data: Vec<f64> = idx.iter().flat_map(|&i| sets[i].iter().copied()).collect();
                    let xv = tape.constant(Tensor::from_vec(idx.len() * n, 1, data)?);
                    let target = tape.constant(Tensor::from_vec(idx.len(), 1, idx.iter().map(|&i| y[i]).collect())?);
                    let pred = model.forward(tape, &p, &xv, idx.len())?;
                    let diff = tape.sub(&pred, &target)?;
                    let abs = tape.abs(&diff);
                    let part = tape.sum_all(&abs);
                    total = Some(match total {
                        Some(t) => tape.add(&t, &part)?,
                        None => part,
                    });
                }
                let total = total.ok_or_else(|| Error::Contract("empty regression chunk".into()))?;
                Ok(tape.scale(&total, 1.0 / count as f64))
            }
            Batch::Clustering { n, dim, x } => {
                let pts = x.row_block(start * n, count * n);
                let xv = tape.constant(pts.clone());
                let out = model.forward(tape, &p, &xv, count)?;
                let head = mog_head(tape, &out, count, *dim)?;
                let ll = mog_loglik_tape(tape, &pts, &head)?;
                Ok(tape.scale(&ll, -1.0))
            }
        }
    }
}

type ParamGrads = Vec<Option<Tensor>>;

fn chunk_gradients(model: &SetModel, batch: &Batch, start: usize, count: usize) -> Result<(f64, ParamGrads)> {
    let mut tape = Tape::new();
    let loss = batch.chunk_loss(model, &mut tape, start, count)?;
    let grads = tape.backward(&loss)?;
    let store: &ParamStore = model.params();
    Ok((loss.value().get(0, 0), store.ids().map(|id| grads.param(id)).collect()))
}

/// Mean loss over the batch and its parameter gradients. The batch is split
/// into contiguous chunks, one per worker, reduced in chunk order so the result
/// depends only on the worker count.
fn batch_gradients(model: &SetModel, batch: &Batch, workers: usize) -> Result<(f64, ParamGrads)> {
    let groups = batch.groups();
    let workers = workers.clamp(1, groups);
    if workers == 1 {
        return chunk_gradients(model, batch, 0, groups);
    }
    let bounds: Vec<(usize, usize)> = (0..workers)
        .map(|w| {
            let start = w * groups / workers;
            (start, (w + 1) * groups / workers - start)
        })
        .collect();
    let parts: Vec<Result<(f64, ParamGrads)>> = std::thread::scope(|s| {
        let handles: Vec<_> = bounds
            .iter()
            .map(|&(start, count)| s.spawn(move || chunk_gradients(model, batch, start, count)))
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().unwrap_or_else(|_| Err(Error::Contract("worker panicked".into()))))
            .collect()
    });
    let mut loss = 0.0;
    let mut total: ParamGrads = vec![None; model.params().len()];
    for ((_, count), part) in bounds.iter().zip(parts) {
        let (l, grads) = part?;
        let w = *count as f64 / groups as f64;
        loss += w * l;
        for (acc, g) in total.iter_mut().zip(grads) {
            if let Some(mut g) = g {
                g.scale_inplace(w);
                match acc {
                    Some(a) => a.add_assign(&g)?,
                    None => *acc = Some(g),
                }
            }
        }
    }
    Ok((loss, total))
}
