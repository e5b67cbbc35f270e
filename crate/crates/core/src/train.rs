//! Optimization loop: schedule, decoupled-decay adaptive-moment updates,
//! per-item flow-matching batches and resumable checkpoints.

use std::collections::BTreeMap;
use std::fs::OpenOptions;
use std::io::Write;
use std::path::Path;
use std::time::Instant;

use candle_core::{backprop::GradStore, DType, Device, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::data::{TrainingPair, TrainingSet};
use crate::error::{Error, Result};
use crate::flow::{cfm_loss, sample_path_batched, target_field, PathConfig};
use crate::model::{
    model_from_checkpoint, read_checkpoint, save_checkpoint, ConditioningSet, ParamStore, SrModel,
    VfeConfig,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub lr_peak: f64,
    pub betas: (f64, f64),
    pub eps: f64,
    pub weight_decay: f64,
    pub warmup_steps: usize,
    pub total_steps: usize,
    pub cond_dropout: f64,
    pub alpha: f64,
    pub sigma_min: f64,
    pub seed: u64,
    pub batch_size: usize,
    /// Global gradient-norm ceiling; `None` disables clipping.
    pub grad_clip: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr_peak: 2.0e-4,
            betas: (0.9, 0.999),
            eps: 1e-8,
            weight_decay: 0.01,
            warmup_steps: 10_000,
            total_steps: 500_000,
            cond_dropout: 0.1,
            alpha: 0.2,
            sigma_min: 0.1,
            seed: 0,
            batch_size: 16,
            grad_clip: Some(1.0),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(0.0..=1.0).contains(&self.cond_dropout) {
            return bad(format!("cond_dropout {} outside [0, 1]", self.cond_dropout));
        }
        if self.warmup_steps > self.total_steps {
            return bad(format!(
                "warmup_steps {} exceeds total_steps {}",
                self.warmup_steps, self.total_steps
            ));
        }
        if !(self.lr_peak > 0.0) || self.batch_size == 0 {
            return bad("lr_peak and batch_size must be positive".into());
        }
        let (b1, b2) = self.betas;
        if !(0.0..1.0).contains(&b1) || !(0.0..1.0).contains(&b2) {
            return bad(format!("betas {:?} outside [0, 1)", self.betas));
        }
        if self.grad_clip.is_some_and(|c| !(c > 0.0)) {
            return bad("grad_clip must be positive".into());
        }
        PathConfig::new(self.sigma_min)?;
        Ok(())
    }

    pub fn path(&self) -> PathConfig {
        PathConfig {
            sigma_min: self.sigma_min,
        }
    }
}

/// Linear warmup from 0 to `lr_peak`, then cosine decay to 0 at `total_steps`.
pub fn lr_schedule(step: usize, cfg: &TrainConfig) -> Result<f64> {
    if step > cfg.total_steps {
        return Err(Error::InvalidArgument(format!(
            "step {step} beyond total_steps {}",
            cfg.total_steps
        )));
    }
    if step < cfg.warmup_steps {
        return Ok(cfg.lr_peak * step as f64 / cfg.warmup_steps as f64);
    }
    let span = cfg.total_steps - cfg.warmup_steps;
    if span == 0 {
        return Ok(cfg.lr_peak);
    }
    let progress = (step - cfg.warmup_steps) as f64 / span as f64;
    Ok(cfg.lr_peak * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos()))
}

/// Adaptive-moment optimizer with decoupled weight decay.
#[derive(Debug, Clone)]
pub struct AdamW {
    pub betas: (f64, f64),
    pub eps: f64,
    pub weight_decay: f64,
    steps: u64,
    moments: Vec<(Tensor, Tensor)>,
}

impl AdamW {
    pub fn new(params: &ParamStore, cfg: &TrainConfig) -> Result<Self> {
        let moments = params
            .vars()
            .map(|v| Ok((v.zeros_like()?, v.zeros_like()?)))
            .collect::<Result<_>>()?;
        Ok(Self {
            betas: cfg.betas,
            eps: cfg.eps,
            weight_decay: cfg.weight_decay,
            steps: 0,
            moments,
        })
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    pub fn step(&mut self, params: &ParamStore, grads: &[Option<Tensor>], lr: f64) -> Result<()> {
        self.steps += 1;
        let (b1, b2) = self.betas;
        let c1 = 1.0 - b1.powi(self.steps as i32);
        let c2 = 1.0 - b2.powi(self.steps as i32);
        for ((var, g), (m, v)) in params.vars().zip(grads).zip(self.moments.iter_mut()) {
            let Some(g) = g else { continue };
            *m = ((&*m * b1)? + (g * (1.0 - b1))?)?;
            *v = ((&*v * b2)? + (g.sqr()? * (1.0 - b2))?)?;
            let denom = ((&*v / c2)?.sqrt()? + self.eps)?;
            let update = ((&*m / c1)? / denom)?;
            let decayed = (var.as_tensor() * (1.0 - lr * self.weight_decay))?;
            var.set(&(decayed - (update * lr)?)?)?;
        }
        Ok(())
    }

    fn state_tensors(&self, params: &ParamStore) -> Vec<(String, Tensor)> {
        params
            .iter()
            .zip(&self.moments)
            .flat_map(|((name, _), (m, v))| {
                [
                    (format!("opt.m.{name}"), m.clone()),
                    (format!("opt.v.{name}"), v.clone()),
                ]
            })
            .collect()
    }

    fn restore(
        &mut self,
        params: &ParamStore,
        tensors: &BTreeMap<String, Tensor>,
        steps: u64,
    ) -> Result<()> {
        let mut moments = Vec::with_capacity(params.len());
        for (name, var) in params.iter() {
            let get = |kind: &str| {
                let key = format!("opt.{kind}.{name}");
                let t = tensors.get(&key).ok_or_else(|| {
                    Error::InvalidArgument(format!("optimizer state lacks {key}"))
                })?;
                if t.dims() != var.dims() {
                    return Err(Error::shape(
                        format!("{key} {:?}", var.dims()),
                        format!("{:?}", t.dims()),
                    ));
                }
                Ok(t.to_dtype(var.dtype())?)
            };
            moments.push((get("m")?, get("v")?));
        }
        self.moments = moments;
        self.steps = steps;
        Ok(())
    }
}

/// Per-parameter gradients in store order; `None` where the graph does not reach.
pub fn collect_grads(params: &ParamStore, grads: &GradStore) -> Vec<Option<Tensor>> {
    params
        .vars()
        .map(|v| grads.get(v.as_tensor()).cloned())
        .collect()
}

pub fn global_norm(grads: &[Option<Tensor>]) -> Result<f64> {
    let mut total = 0.0;
    for g in grads.iter().flatten() {
        total += g
            .to_dtype(DType::F64)?
            .sqr()?
            .sum_all()?
            .to_scalar::<f64>()?;
    }
    Ok(total.sqrt())
}

/// Rescales all gradients so their global norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_global_norm(grads: &mut [Option<Tensor>], max_norm: f64) -> Result<f64> {
    let norm = global_norm(grads)?;
    if norm > max_norm {
        let scale = max_norm / (norm + 1e-6);
        for g in grads.iter_mut().flatten() {
            *g = (&*g * scale)?;
        }
    }
    Ok(norm)
}

/// Exponential moving average whose smoothing matches a window of `window` steps.
#[derive(Debug, Clone, Copy)]
pub struct LossEma {
    alpha: f64,
    value: Option<f64>,
}

impl LossEma {
    pub fn new(window: usize) -> Self {
        Self {
            alpha: 2.0 / (window as f64 + 1.0),
            value: None,
        }
    }

    pub fn update(&mut self, x: f64) -> f64 {
        let v = match self.value {
            None => x,
            Some(prev) => prev + self.alpha * (x - prev),
        };
        self.value = Some(v);
        v
    }

    pub fn value(&self) -> Option<f64> {
        self.value
    }
}

/// Flow-matching inputs for one batch.
pub struct FlowBatch {
    pub t: Vec<f64>,
    pub x_l: Tensor,
    pub x_h: Tensor,
    pub x_t: Tensor,
    pub u: Tensor,
    pub rate_idx: Vec<usize>,
    pub use_null: Vec<bool>,
}

fn stack(items: Vec<Vec<f64>>, shape: &[usize], dtype: DType, device: &Device) -> Result<Tensor> {
    let flat: Vec<f64> = items.into_iter().flatten().collect();
    Ok(Tensor::from_vec(flat, shape, device)?.to_dtype(dtype)?)
}

/// Draws per-item times, noise and dropout decisions and forms the path
/// sample and target field.
pub fn flow_batch<R: Rng + ?Sized>(
    pairs: &[TrainingPair],
    cfg: &TrainConfig,
    vfe: &VfeConfig,
    rng: &mut R,
    dtype: DType,
    device: &Device,
) -> Result<FlowBatch> {
    let first = pairs
        .first()
        .ok_or_else(|| Error::InvalidArgument("empty batch".into()))?;
    let (f1, frames) = (first.x_l.bins(), first.x_l.frames());
    let g = first.x_h_target.bins();
    for p in pairs {
        if p.x_l.bins() != f1
            || p.x_l.frames() != frames
            || p.x_h_target.bins() != g
            || p.x_h_target.frames() != frames
        {
            return Err(Error::shape(
                format!("batch of {f1}x{frames} / {g}x{frames} pairs"),
                format!(
                    "{}x{} / {}x{}",
                    p.x_l.bins(),
                    p.x_l.frames(),
                    p.x_h_target.bins(),
                    p.x_h_target.frames()
                ),
            ));
        }
    }
    let n = pairs.len();
    let x_l = stack(
        pairs.iter().map(|p| p.x_l.coeffs().to_vec()).collect(),
        &[n, f1, frames, 2],
        dtype,
        device,
    )?;
    let x_h = stack(
        pairs
            .iter()
            .map(|p| p.x_h_target.coeffs().to_vec())
            .collect(),
        &[n, g, frames, 2],
        dtype,
        device,
    )?;
    let t: Vec<f64> = (0..n).map(|_| rng.random::<f64>()).collect();
    let noise: Vec<f64> = (0..n * g * frames * 2)
        .map(|_| rng.sample(StandardNormal))
        .collect();
    let x_0 = Tensor::from_vec(noise, (n, g, frames, 2), device)?.to_dtype(dtype)?;
    let use_null = (0..n)
        .map(|_| rng.random::<f64>() < cfg.cond_dropout)
        .collect();
    let path = cfg.path();
    let t_tensor = Tensor::from_slice(&t, n, device)?;
    let x_t = sample_path_batched(&x_h, &x_0, &t_tensor, &path)?;
    let u = target_field(&x_h, &x_0, &path)?;
    Ok(FlowBatch {
        t,
        x_l,
        x_h,
        x_t,
        u,
        rate_idx: pairs
            .iter()
            .map(|p| vfe.rate_index(p.lr_input_rate))
            .collect(),
        use_null,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepReport {
    pub step: usize,
    pub loss: f64,
    pub lr: f64,
    pub grad_norm: f64,
}

const SAVED_STEP: &str = "train_step";
const SAVED_OPT_STEPS: &str = "optimizer_steps";
const SAVED_RNG: &str = "rng_state";
const SAVED_CONFIG: &str = "train_config";
const SAVED_NULL: &str = "null_uses";

/// Owns the model, optimizer and random stream of one training run.
pub struct Trainer {
    model: SrModel,
    opt: AdamW,
    cfg: TrainConfig,
    step: usize,
    rng: ChaCha8Rng,
    null_uses: usize,
    ema: LossEma,
}

impl Trainer {
    pub fn new(model: SrModel, cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let opt = AdamW::new(model.params(), &cfg)?;
        let rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        Ok(Self {
            model,
            opt,
            cfg,
            step: 0,
            rng,
            null_uses: 0,
            ema: LossEma::new(100),
        })
    }

    pub fn model(&self) -> &SrModel {
        &self.model
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    pub fn step(&self) -> usize {
        self.step
    }

    /// Items that have been conditioned on the null embedding so far.
    pub fn null_uses(&self) -> usize {
        self.null_uses
    }

    pub fn smoothed_loss(&self) -> Option<f64> {
        self.ema.value()
    }

    pub fn rng(&mut self) -> &mut ChaCha8Rng {
        &mut self.rng
    }

    /// Batch loss with an arbitrary field estimator in place of the model.
    pub fn loss_with<F>(
        &mut self,
        pairs: &[TrainingPair],
        mut field: F,
    ) -> Result<(FlowBatch, Tensor)>
    where
        F: FnMut(&FlowBatch, &ConditioningSet) -> Result<Tensor>,
    {
        let b = flow_batch(
            pairs,
            &self.cfg,
            self.model.config(),
            &mut self.rng,
            self.model.dtype(),
            self.model.device(),
        )?;
        let cond = self.model.condition(&b.x_l, &b.rate_idx, &b.use_null)?;
        self.null_uses += b.use_null.iter().filter(|&&u| u).count();
        let v = field(&b, &cond)?;
        let loss = cfm_loss(&v, &b.u)?;
        Ok((b, loss))
    }

    pub fn train_step(&mut self, pairs: &[TrainingPair]) -> Result<StepReport> {
        let lr = lr_schedule(self.step, &self.cfg)?;
        let model = self.model.clone();
        let (_, loss) = self.loss_with(pairs, |b, cond| model.vfe_forward(&b.t, &b.x_t, cond))?;
        let value = loss.to_dtype(DType::F64)?.to_scalar::<f64>()?;
        if !value.is_finite() {
            return Err(Error::NanLoss {
                step: self.step,
                lr,
            });
        }
        let grads = loss.backward()?;
        let mut grads = collect_grads(self.model.params(), &grads);
        let grad_norm = match self.cfg.grad_clip {
            Some(c) => clip_global_norm(&mut grads, c)?,
            None => global_norm(&grads)?,
        };
        self.opt.step(self.model.params(), &grads, lr)?;
        let report = StepReport {
            step: self.step,
            loss: value,
            lr,
            grad_norm,
        };
        self.ema.update(value);
        self.step += 1;
        Ok(report)
    }

    /// Draws a batch from `set` with the trainer's stream and takes one step.
    pub fn train_on(&mut self, set: &mut TrainingSet) -> Result<StepReport> {
        let pairs = set.sample_batch(&mut self.rng, self.cfg.batch_size)?;
        self.train_step(&pairs)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut meta = BTreeMap::new();
        meta.insert(SAVED_STEP.into(), self.step.to_string());
        meta.insert(SAVED_OPT_STEPS.into(), self.opt.steps().to_string());
        meta.insert(SAVED_RNG.into(), serde_json::to_string(&self.rng)?);
        meta.insert(SAVED_CONFIG.into(), serde_json::to_string(&self.cfg)?);
        meta.insert(SAVED_NULL.into(), self.null_uses.to_string());
        let extra = self.opt.state_tensors(self.model.params());
        save_checkpoint(path, &self.model, &extra, &meta)
    }

    /// Restores model, optimizer state, step counter and random stream.
    pub fn resume(path: impl AsRef<Path>, device: &Device) -> Result<Self> {
        let path = path.as_ref();
        let ckpt = read_checkpoint(path, device)?;
        let missing = |k: &str| Error::Checkpoint {
            path: path.to_path_buf(),
            reason: format!("no training state ({k} missing)"),
        };
        let field = |k: &str| ckpt.meta.get(k).ok_or_else(|| missing(k));
        let parse_err = |k: &str| Error::Checkpoint {
            path: path.to_path_buf(),
            reason: format!("malformed {k}"),
        };
        let cfg: TrainConfig = serde_json::from_str(field(SAVED_CONFIG)?)?;
        let dtype = ckpt
            .tensors
            .values()
            .next()
            .map(Tensor::dtype)
            .unwrap_or(DType::F32);
        let model = model_from_checkpoint(&ckpt, dtype, device)?;
        let mut t = Self::new(model, cfg)?;
        t.step = field(SAVED_STEP)?
            .parse()
            .map_err(|_| parse_err(SAVED_STEP))?;
        t.null_uses = field(SAVED_NULL)?
            .parse()
            .map_err(|_| parse_err(SAVED_NULL))?;
        t.rng = serde_json::from_str(field(SAVED_RNG)?)?;
        let opt_steps = field(SAVED_OPT_STEPS)?
            .parse()
            .map_err(|_| parse_err(SAVED_OPT_STEPS))?;
        t.opt.restore(t.model.params(), &ckpt.tensors, opt_steps)?;
        Ok(t)
    }
}

/// Append-only `step,loss,lr,wallclock` log.
pub struct MetricsLog {
    file: std::fs::File,
    start: Instant,
}

impl MetricsLog {
    pub fn open(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let fresh = !path.exists() || std::fs::metadata(path)?.len() == 0;
        let mut file = OpenOptions::new().create(true).append(true).open(path)?;
        if fresh {
            writeln!(file, "step,loss,lr,wallclock")?;
        }
        Ok(Self {
            file,
            start: Instant::now(),
        })
    }

    pub fn record(&mut self, r: &StepReport) -> Result<()> {
        writeln!(
            self.file,
            "{},{:.8e},{:.8e},{:.3}",
            r.step,
            r.loss,
            r.lr,
            self.start.elapsed().as_secs_f64()
        )?;
        Ok(())
    }
}

pub const METRICS_FILE: &str = "metrics.csv";
pub const CHECKPOINT_FILE: &str = "checkpoint.safetensors";

/// Trains until `until` steps, appending metrics to `out_dir/metrics.csv` and
/// refreshing `out_dir/checkpoint.safetensors` every `checkpoint_every` steps
/// and at the end.
pub fn train_loop(
    trainer: &mut Trainer,
    set: &mut TrainingSet,
    until: usize,
    out_dir: &Path,
    checkpoint_every: usize,
    log_every: usize,
) -> Result<Vec<StepReport>> {
    std::fs::create_dir_all(out_dir)?;
    let mut metrics = MetricsLog::open(out_dir.join(METRICS_FILE))?;
    let ckpt = out_dir.join(CHECKPOINT_FILE);
    let mut reports = Vec::new();
    while trainer.step() < until {
        let r = trainer.train_on(set)?;
        metrics.record(&r)?;
        if log_every > 0 && (r.step % log_every == 0 || r.step + 1 == until) {
            log::info!(
                "step {} loss {:.5} smoothed {:.5} lr {:.3e} grad_norm {:.3}",
                r.step,
                r.loss,
                trainer.smoothed_loss().unwrap_or(r.loss),
                r.lr,
                r.grad_norm
            );
        }
        reports.push(r);
        if checkpoint_every > 0 && trainer.step() % checkpoint_every == 0 {
            trainer.save(&ckpt)?;
        }
    }
    trainer.save(&ckpt)?;
    Ok(reports)
}

/// Parameters whose values differ between two snapshots.
pub fn changed_parameters(before: &[(String, Tensor)], params: &ParamStore) -> Result<usize> {
    let mut changed = 0;
    for ((_, b), (_, v)) in before.iter().zip(params.iter()) {
        let d = (b - v.as_tensor())?
            .abs()?
            .to_dtype(DType::F64)?
            .max_all()?
            .to_scalar::<f64>()?;
        if d > 0.0 {
            changed += 1;
        }
    }
    Ok(changed)
}
