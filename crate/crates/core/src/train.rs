//! AdamW with a one-cycle schedule, EMA weights, checkpointing, and the
//! sampling-based consistency evaluation.

use std::fs::{self, File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;

use crate::dataset::{is_consistent, to_batch, ConsistencyReport, ImageSample};
use crate::diffusion::{ddpm_sample, linear_schedule, training_loss, DiffusionConfig, ModelPredictor};
use crate::error::{ensure, Error, Result};
use crate::model::{init_model, write_checkpoint, BackboneKind, Checkpoint, ModelConfig, ModelParams};
use crate::numerics::{Prng, Scalar, Tape, Tensor};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct OneCycleConfig {
    pub warmup_fraction: f64,
    pub div_factor: f64,
    pub final_div_factor: f64,
}

impl Default for OneCycleConfig {
    fn default() -> Self {
        Self {
            warmup_fraction: 0.3,
            div_factor: 25.0,
            final_div_factor: 1e4,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub max_lr: f64,
    pub weight_decay: f64,
    pub ema_decay: f64,
    pub onecycle: OneCycleConfig,
    pub adam_betas: (f64, f64),
    pub adam_eps: f64,
    pub seed: u64,
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 5000,
            batch_size: 64,
            max_lr: 1e-3,
            weight_decay: 1e-5,
            ema_decay: 0.9999,
            onecycle: OneCycleConfig::default(),
            adam_betas: (0.9, 0.999),
            adam_eps: 1e-8,
            seed: 0,
            checkpoint_every: 500,
        }
    }
}

impl TrainConfig {
    /// Defaults with the epoch budget of `kind`: top-1 models train twice
    /// as long.
    pub fn for_kind(kind: BackboneKind) -> Self {
        Self {
            epochs: default_epochs(kind),
            ..Self::default()
        }
    }

    pub fn steps_per_epoch(&self, dataset_len: usize) -> usize {
        dataset_len.div_ceil(self.batch_size)
    }

    pub fn total_steps(&self, dataset_len: usize) -> usize {
        self.epochs * self.steps_per_epoch(dataset_len)
    }

    pub fn validate(&self) -> Result<()> {
        ensure!(self.epochs >= 1, "epochs must be positive");
        ensure!(self.batch_size >= 1, "batch_size must be positive");
        ensure!(self.max_lr > 0.0, "max_lr must be positive");
        ensure!(self.weight_decay >= 0.0, "weight_decay must be non-negative");
        ensure!((0.0..=1.0).contains(&self.ema_decay), "ema_decay must lie in [0, 1]");
        let (b1, b2) = self.adam_betas;
        ensure!(
            (0.0..1.0).contains(&b1) && (0.0..1.0).contains(&b2),
            "adam betas must lie in [0, 1)"
        );
        ensure!(self.adam_eps > 0.0, "adam_eps must be positive");
        let oc = &self.onecycle;
        ensure!(
            oc.warmup_fraction > 0.0 && oc.warmup_fraction <= 1.0,
            "warmup_fraction must lie in (0, 1]"
        );
        ensure!(
            oc.div_factor > 0.0 && oc.final_div_factor > 0.0,
            "one-cycle divisors must be positive"
        );
        ensure!(self.checkpoint_every >= 1, "checkpoint_every must be positive");
        Ok(())
    }
}

pub fn default_epochs(kind: BackboneKind) -> usize {
    match kind {
        BackboneKind::CnnTop1Attn => 10_000,
        _ => 5000,
    }
}

/// Learning rate at 0-based `step`: cosine ramp from `max_lr/div_factor`
/// to `max_lr` ending at step `round(warmup_fraction * total) - 1`, then
/// cosine decay to `max_lr/final_div_factor` at `total - 1`.
pub fn onecycle_lr(step: usize, total_steps: usize, max_lr: f64, cfg: &OneCycleConfig) -> Result<f64> {
    ensure!(step < total_steps, "step {step} outside 0..{total_steps}");
    let peak = ((cfg.warmup_fraction * total_steps as f64).round() as usize).clamp(1, total_steps) - 1;
    let cosine = |from: f64, to: f64, pct: f64| to + (from - to) / 2.0 * (1.0 + (std::f64::consts::PI * pct).cos());
    let initial = max_lr / cfg.div_factor;
    let last = max_lr / cfg.final_div_factor;
    Ok(if step <= peak {
        if peak == 0 {
            max_lr
        } else {
            cosine(initial, max_lr, step as f64 / peak as f64)
        }
    } else {
        cosine(max_lr, last, (step - peak) as f64 / (total_steps - 1 - peak) as f64)
    })
}

/// First and second moments for every parameter tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState<T: Scalar = f32> {
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
    pub step: u64,
}

impl<T: Scalar> AdamState<T> {
    pub fn new(params: &[&Tensor<T>]) -> Self {
        Self {
            m: params.iter().map(|p| Tensor::zeros(p.shape())).collect(),
            v: params.iter().map(|p| Tensor::zeros(p.shape())).collect(),
            step: 0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamHyper {
    pub lr: f64,
    pub betas: (f64, f64),
    pub eps: f64,
    pub weight_decay: f64,
}

/// One AdamW update with decoupled weight decay and bias-corrected
/// moments. A non-finite gradient leaves parameters and state untouched.
pub fn adamw_step<T: Scalar>(
    params: &mut [&mut Tensor<T>],
    grads: &[&Tensor<T>],
    state: &mut AdamState<T>,
    hp: &AdamHyper,
) -> Result<()> {
    ensure!(
        params.len() == grads.len() && params.len() == state.m.len(),
        "{} params, {} grads, {} moment slots",
        params.len(),
        grads.len(),
        state.m.len()
    );
    for (p, g) in params.iter().zip(grads) {
        ensure!(
            p.shape() == g.shape(),
            "gradient shape {:?} vs {:?}",
            g.shape(),
            p.shape()
        );
    }
    if !grads.iter().all(|g| g.is_finite()) {
        return Err(Error::non_finite("gradient"));
    }
    state.step += 1;
    let (b1, b2) = hp.betas;
    let c1 = 1.0 - b1.powi(state.step as i32);
    let c2 = 1.0 - b2.powi(state.step as i32);
    let decay = T::of(1.0 - hp.lr * hp.weight_decay);
    let (b1t, b2t) = (T::of(b1), T::of(b2));
    let (one_b1, one_b2) = (T::of(1.0 - b1), T::of(1.0 - b2));
    let (c1t, c2t, lr, eps) = (T::of(c1), T::of(c2), T::of(hp.lr), T::of(hp.eps));
    for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
        let m = state.m[i].data_mut();
        let v = state.v[i].data_mut();
        for (j, (pv, &gv)) in p.data_mut().iter_mut().zip(g.data()).enumerate() {
            m[j] = b1t * m[j] + one_b1 * gv;
            v[j] = b2t * v[j] + one_b2 * gv * gv;
            let m_hat = m[j] / c1t;
            let v_hat = v[j] / c2t;
            *pv = *pv * decay - lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
    Ok(())
}

/// Exponential moving average of model weights.
#[derive(Clone, Debug, PartialEq)]
pub struct EmaState<T: Scalar = f32> {
    pub shadow: ModelParams<T>,
    pub decay: f64,
}

impl<T: Scalar> EmaState<T> {
    pub fn new(params: &ModelParams<T>, decay: f64) -> Self {
        Self {
            shadow: params.clone(),
            decay,
        }
    }
}

/// `shadow <- decay * shadow + (1 - decay) * param` for every tensor.
pub fn ema_update<T: Scalar>(ema: &mut EmaState<T>, params: &ModelParams<T>) -> Result<()> {
    let src = params.named();
    let dst = ema.shadow.tensors_mut();
    ensure!(
        src.len() == dst.len(),
        "EMA holds {} tensors, model {}",
        dst.len(),
        src.len()
    );
    let d = T::of(ema.decay);
    let rest = T::of(1.0 - ema.decay);
    for ((name, s), t) in src.into_iter().zip(dst) {
        ensure!(s.shape() == t.shape(), "EMA shape mismatch on {name}");
        for (a, &b) in t.data_mut().iter_mut().zip(s.data()) {
            *a = d * *a + rest * b;
        }
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MetricsRow {
    pub step: usize,
    pub epoch: usize,
    pub lr: f64,
    pub loss: f64,
    pub wall_ms: u128,
}

impl MetricsRow {
    pub const CSV_HEADER: &'static str = "step,epoch,lr,loss,wall_ms";

    pub fn to_csv(&self) -> String {
        format!(
            "{},{},{:e},{:e},{}",
            self.step, self.epoch, self.lr, self.loss, self.wall_ms
        )
    }
}

/// Where and how a training run persists its state.
#[derive(Clone, Debug, Default)]
pub struct TrainOptions {
    /// Directory for checkpoints and `metrics.csv`; nothing is written
    /// when unset.
    pub out_dir: Option<PathBuf>,
    /// State to continue from, as written by a previous run.
    pub resume: Option<Checkpoint>,
    /// Stop after this many epochs in total (for interrupted runs).
    pub stop_after_epoch: Option<usize>,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    /// Rows produced by this invocation.
    pub metrics: Vec<MetricsRow>,
}

const STEP_KEY: &str = "train.step";
const EPOCH_KEY: &str = "train.epoch";
const ADAM_M: &str = "adam.m.";
const ADAM_V: &str = "adam.v.";

/// Stores a counter exactly as four 16-bit limbs.
fn counter_tensor(v: u64) -> Tensor<f32> {
    let limbs = (0..4).map(|i| ((v >> (16 * i)) & 0xffff) as f32).collect();
    Tensor::new(&[4], limbs).expect("four limbs")
}

fn counter_value(t: &Tensor<f32>) -> Result<u64> {
    if t.shape() != [4] {
        return Err(Error::Format("counter tensor must have four limbs".into()));
    }
    Ok(t.data().iter().enumerate().map(|(i, &l)| (l as u64) << (16 * i)).sum())
}

struct TrainState {
    params: ModelParams<f32>,
    ema: EmaState<f32>,
    adam: AdamState<f32>,
    epochs_done: usize,
}

impl TrainState {
    fn to_checkpoint(&self) -> Checkpoint {
        let mut ckpt = Checkpoint::new(self.params.clone());
        ckpt.ema = Some(self.ema.shadow.clone());
        for ((name, _), (m, v)) in self
            .params
            .named()
            .into_iter()
            .zip(self.adam.m.iter().zip(&self.adam.v))
        {
            ckpt.set_extra(&format!("{ADAM_M}{name}"), m.clone());
            ckpt.set_extra(&format!("{ADAM_V}{name}"), v.clone());
        }
        ckpt.set_extra(STEP_KEY, counter_tensor(self.adam.step));
        ckpt.set_extra(EPOCH_KEY, counter_tensor(self.epochs_done as u64));
        ckpt
    }

    fn from_checkpoint(ckpt: &Checkpoint, decay: f64) -> Result<Self> {
        let params = ckpt.params.clone();
        let missing = |name: &str| Error::Format(format!("checkpoint lacks '{name}' needed to resume"));
        let ema = ckpt.ema.clone().ok_or_else(|| missing("ema"))?;
        let mut m = Vec::new();
        let mut v = Vec::new();
        for (name, p) in params.named() {
            for (prefix, out) in [(ADAM_M, &mut m), (ADAM_V, &mut v)] {
                let key = format!("{prefix}{name}");
                let t = ckpt.extra(&key).ok_or_else(|| missing(&key))?;
                if t.shape() != p.shape() {
                    return Err(Error::Format(format!("'{key}' has shape {:?}", t.shape())));
                }
                out.push(t.clone());
            }
        }
        let step = counter_value(ckpt.extra(STEP_KEY).ok_or_else(|| missing(STEP_KEY))?)?;
        let epochs_done = counter_value(ckpt.extra(EPOCH_KEY).ok_or_else(|| missing(EPOCH_KEY))?)? as usize;
        Ok(Self {
            params,
            ema: EmaState { shadow: ema, decay },
            adam: AdamState { m, v, step },
            epochs_done,
        })
    }
}

/// Seed stream for initialization; epoch `e` (1-based) uses stream `e`.
const INIT_STREAM: u64 = 0;

/// Trains a backbone on `dataset`. Each epoch shuffles with its own child
/// stream, so a run resumed from an epoch boundary replays exactly.
pub fn train_model(
    model_cfg: &ModelConfig,
    cfg: &TrainConfig,
    diffusion: &DiffusionConfig,
    dataset: &[ImageSample],
    opts: &TrainOptions,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    ensure!(!dataset.is_empty(), "training needs a nonempty dataset");
    let sched = linear_schedule(diffusion)?;
    if model_cfg.time_bias_steps > 0 {
        ensure!(
            model_cfg.time_bias_steps == sched.steps(),
            "time bias covers {} steps but the schedule has {}",
            model_cfg.time_bias_steps,
            sched.steps()
        );
    }
    let mut state = match &opts.resume {
        Some(ckpt) => {
            ensure!(
                ckpt.kind() == model_cfg.kind,
                "resume checkpoint is {}, not {}",
                ckpt.kind(),
                model_cfg.kind
            );
            TrainState::from_checkpoint(ckpt, cfg.ema_decay)?
        }
        None => {
            let params = init_model::<f32>(model_cfg, Prng::child_seed(cfg.seed, INIT_STREAM));
            let adam = AdamState::new(&params.named().into_iter().map(|(_, t)| t).collect::<Vec<_>>());
            TrainState {
                ema: EmaState::new(&params, cfg.ema_decay),
                params,
                adam,
                epochs_done: 0,
            }
        }
    };
    let per_epoch = cfg.steps_per_epoch(dataset.len());
    let total = cfg.total_steps(dataset.len());
    ensure!(
        state.adam.step as usize == state.epochs_done * per_epoch,
        "checkpoint step {} does not sit on an epoch boundary",
        state.adam.step
    );
    let last_epoch = opts.stop_after_epoch.unwrap_or(cfg.epochs).min(cfg.epochs);

    let mut metrics_file = match &opts.out_dir {
        Some(dir) => {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            let path = dir.join("metrics.csv");
            let fresh = opts.resume.is_none();
            if !fresh {
                trim_metrics(&path, state.adam.step as usize)?;
            }
            let file = if fresh {
                File::create(&path)
            } else {
                OpenOptions::new().append(true).open(&path)
            }
            .map_err(|e| Error::io(&path, e))?;
            let mut w = BufWriter::new(file);
            if fresh {
                writeln!(w, "{}", MetricsRow::CSV_HEADER).map_err(|e| Error::io(&path, e))?;
            }
            Some((path, w))
        }
        None => None,
    };
    let save = |state: &TrainState, name: &str| -> Result<()> {
        if let Some(dir) = &opts.out_dir {
            write_checkpoint(dir.join(name), &state.to_checkpoint())?;
        }
        Ok(())
    };

    let hp_base = AdamHyper {
        lr: 0.0,
        betas: cfg.adam_betas,
        eps: cfg.adam_eps,
        weight_decay: cfg.weight_decay,
    };
    let started = Instant::now();
    let mut rows = Vec::new();
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    for epoch in state.epochs_done + 1..=last_epoch {
        let mut rng = Prng::child(cfg.seed, epoch as u64);
        order.iter_mut().enumerate().for_each(|(i, o)| *o = i);
        rng.shuffle(&mut order);
        for chunk in order.chunks(cfg.batch_size) {
            let images: Vec<ImageSample> = chunk.iter().map(|&i| dataset[i]).collect();
            let batch = to_batch(&images);
            let mut tape = Tape::new();
            let bound = state.params.bind(&mut tape, true);
            let step_result = training_loss(&mut tape, &bound, model_cfg, &batch, &sched, &mut rng).and_then(|loss| {
                let value = tape.value(loss).item() as f64;
                if !value.is_finite() {
                    return Err(Error::non_finite(format!(
                        "training loss at step {}",
                        state.adam.step + 1
                    )));
                }
                tape.backward(loss)?;
                Ok(value)
            });
            let loss = match step_result {
                Ok(v) => v,
                Err(e) => {
                    save(&state, "last_good.mosc")?;
                    return Err(e);
                }
            };
            let lr = onecycle_lr(state.adam.step as usize, total, cfg.max_lr, &cfg.onecycle)?;
            let grads: Vec<Tensor<f32>> = bound
                .vars()
                .into_iter()
                .map(|v| tape.take_grad(v).expect("trainable leaf"))
                .collect();
            let grad_refs: Vec<&Tensor<f32>> = grads.iter().collect();
            let hp = AdamHyper { lr, ..hp_base };
            if let Err(e) = adamw_step(&mut state.params.tensors_mut(), &grad_refs, &mut state.adam, &hp) {
                save(&state, "last_good.mosc")?;
                return Err(e);
            }
            ema_update(&mut state.ema, &state.params)?;
            let row = MetricsRow {
                step: state.adam.step as usize,
                epoch,
                lr,
                loss,
                wall_ms: started.elapsed().as_millis(),
            };
            if let Some((path, w)) = metrics_file.as_mut() {
                writeln!(w, "{}", row.to_csv()).map_err(|e| Error::io(&*path, e))?;
            }
            rows.push(row);
        }
        state.epochs_done = epoch;
        if epoch % cfg.checkpoint_every == 0 || epoch == cfg.epochs {
            if let Some((path, w)) = metrics_file.as_mut() {
                w.flush().map_err(|e| Error::io(&*path, e))?;
            }
            save(&state, &format!("checkpoint_e{epoch:05}.mosc"))?;
        }
    }
    if let Some((path, w)) = metrics_file.as_mut() {
        w.flush().map_err(|e| Error::io(&*path, e))?;
    }
    let checkpoint = state.to_checkpoint();
    if let Some(dir) = &opts.out_dir {
        if state.epochs_done == cfg.epochs {
            write_checkpoint(dir.join("final.mosc"), &checkpoint)?;
            write_checkpoint(dir.join("ema.mosc"), &Checkpoint::new(state.ema.shadow.clone()))?;
        }
    }
    Ok(TrainOutcome {
        checkpoint,
        metrics: rows,
    })
}

/// Samples `runs x samples_per_run` images and scores self-consistency.
/// Run `r` samples with `Prng::child_seed(seed, r)`.
pub fn evaluate(
    params: &ModelParams<f32>,
    model_cfg: &ModelConfig,
    diffusion: &DiffusionConfig,
    samples_per_run: usize,
    runs: usize,
    seed: u64,
) -> Result<ConsistencyReport> {
    ensure!(samples_per_run >= 1 && runs >= 1, "evaluation counts must be positive");
    ensure!(
        params.kind == model_cfg.kind,
        "parameters are {}, config {}",
        params.kind,
        model_cfg.kind
    );
    let sched = linear_schedule(diffusion)?;
    let predictor = ModelPredictor { params, cfg: model_cfg };
    let counts = (0..runs)
        .into_par_iter()
        .map(|run| {
            let images = ddpm_sample(
                &predictor,
                &sched,
                diffusion.sampler_variance,
                samples_per_run,
                Prng::child_seed(seed, run as u64),
            )?;
            Ok(images.iter().filter(|img| is_consistent(img)).count())
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(ConsistencyReport::from_counts(samples_per_run, counts))
}

/// Drops rows past `step`, left behind by a run that stopped between
/// checkpoints.
fn trim_metrics(path: &Path, step: usize) -> Result<()> {
    let kept: Vec<MetricsRow> = read_metrics(path)?.into_iter().filter(|r| r.step <= step).collect();
    let mut text = format!("{}\n", MetricsRow::CSV_HEADER);
    for r in kept {
        text.push_str(&r.to_csv());
        text.push('\n');
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Reads `metrics.csv` rows back, for resumption checks and reports.
pub fn read_metrics(path: &Path) -> Result<Vec<MetricsRow>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut lines = text.lines();
    if lines.next() != Some(MetricsRow::CSV_HEADER) {
        return Err(Error::Format(format!("{} lacks the metrics header", path.display())));
    }
    lines
        .map(|line| {
            let f: Vec<&str> = line.split(',').collect();
            let bad = || Error::Format(format!("bad metrics row '{line}'"));
            if f.len() != 5 {
                return Err(bad());
            }
            Ok(MetricsRow {
                step: f[0].parse().map_err(|_| bad())?,
                epoch: f[1].parse().map_err(|_| bad())?,
                lr: f[2].parse().map_err(|_| bad())?,
                loss: f[3].parse().map_err(|_| bad())?,
                wall_ms: f[4].parse().map_err(|_| bad())?,
            })
        })
        .collect()
}
