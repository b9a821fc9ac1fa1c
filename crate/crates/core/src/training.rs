//! Unsupervised training of the precoder network on the concentrated
//! sum-MSE: batched loss on the tape, Adam over real/imaginary pairs,
//! reduce-on-plateau scheduling and early stopping on validation sum rate.

use std::io::Write;
use std::path::Path;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::channel::{Dataset, ScenarioConfig};
use crate::error::{Error, Result};
use crate::network::{BnMode, ForwardPass, Mode, NetworkDims, NetworkInput, NetworkParams};
use crate::precoding::concentrated_mse;
use crate::protocol::{run_direct, run_indirect_batch, ProtocolConfig};
use crate::rng::Stream;
use crate::tensor::gradcheck::{check_tape, GradCheckReport};
use crate::tensor::{ComplexMatrix, Tape, Var, C64};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub scheduler_factor: f64,
    pub scheduler_patience: usize,
    pub scheduler_threshold: f64,
    pub early_stop_patience: usize,
    pub early_stop_threshold: f64,
    /// Multiplies both patience values, for runs with fewer epochs.
    pub patience_scale: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    /// Global gradient-norm cap.
    pub clip_norm: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 5e-4,
            batch_size: 1024,
            max_epochs: 1000,
            scheduler_factor: 0.5,
            scheduler_patience: 200,
            scheduler_threshold: 1e-4,
            early_stop_patience: 300,
            early_stop_threshold: 1e-4,
            patience_scale: 1.0,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            clip_norm: 10.0,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("scheduler_factor", self.scheduler_factor),
            ("patience_scale", self.patience_scale),
            ("adam_eps", self.adam_eps),
            ("clip_norm", self.clip_norm),
        ];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} must be positive, got {v}")));
            }
        }
        if !(self.learning_rate >= 0.0) {
            return Err(Error::Config(format!("learning_rate must be ≥ 0, got {}", self.learning_rate)));
        }
        if self.batch_size < 2 {
            return Err(Error::Config("batch_size must be at least 2 for batch normalization".into()));
        }
        if self.scheduler_factor >= 1.0 {
            return Err(Error::Config("scheduler_factor must be below 1".into()));
        }
        for (name, b) in [("adam_beta1", self.adam_beta1), ("adam_beta2", self.adam_beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::Config(format!("{name} must lie in [0, 1), got {b}")));
            }
        }
        Ok(())
    }

    fn scaled(&self, patience: usize) -> usize {
        ((patience as f64 * self.patience_scale).round() as usize).max(1)
    }
}

/// Adam over the (real, imaginary) pair of every complex entry. First and
/// second moments are kept in complex storage: the real part tracks the
/// real component and the imaginary part the imaginary component.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    first: Vec<ComplexMatrix>,
    second: Vec<ComplexMatrix>,
}

impl Adam {
    pub fn new(shapes: &[(usize, usize)], beta1: f64, beta2: f64, eps: f64) -> Self {
        let zeros = || shapes.iter().map(|&(r, c)| ComplexMatrix::zeros(r, c)).collect();
        Self {
            beta1,
            beta2,
            eps,
            step: 0,
            first: zeros(),
            second: zeros(),
        }
    }

    pub fn for_params(params: &NetworkParams, cfg: &TrainConfig) -> Self {
        let shapes: Vec<_> = params.tensors().iter().map(|t| t.shape()).collect();
        Self::new(&shapes, cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps)
    }

    /// One bias-corrected update. Gradients follow the tape convention
    /// `∂L/∂Re + j·∂L/∂Im`.
    pub fn update(
        &mut self,
        tensors: Vec<&mut ComplexMatrix>,
        grads: &[ComplexMatrix],
        names: &[String],
        lr: f64,
    ) -> Result<()> {
        if tensors.len() != grads.len() || grads.len() != self.first.len() {
            return Err(Error::Domain(format!(
                "optimizer tracks {} tensors, got {} tensors and {} gradients",
                self.first.len(),
                tensors.len(),
                grads.len()
            )));
        }
        for (i, g) in grads.iter().enumerate() {
            if g.shape() != self.first[i].shape() {
                return Err(Error::Shape {
                    op: "adam",
                    left: g.shape(),
                    right: self.first[i].shape(),
                });
            }
            if !g.is_finite() {
                let name = names.get(i).cloned().unwrap_or_else(|| format!("#{i}"));
                return Err(Error::NonFiniteGradient(name));
            }
        }
        self.step += 1;
        let (b1, b2) = (self.beta1, self.beta2);
        let c1 = 1.0 - b1.powi(self.step as i32);
        let c2 = 1.0 - b2.powi(self.step as i32);
        for ((w, g), (m, v)) in tensors
            .into_iter()
            .zip(grads)
            .zip(self.first.iter_mut().zip(self.second.iter_mut()))
        {
            let (w, m, v) = (w.data_mut(), m.data_mut(), v.data_mut());
            for i in 0..w.len() {
                let gi = g.data()[i];
                m[i] = m[i] * b1 + gi * (1.0 - b1);
                v[i] = C64::new(
                    b2 * v[i].re + (1.0 - b2) * gi.re * gi.re,
                    b2 * v[i].im + (1.0 - b2) * gi.im * gi.im,
                );
                let dre = (m[i].re / c1) / ((v[i].re / c2).sqrt() + self.eps);
                let dim = (m[i].im / c1) / ((v[i].im / c2).sqrt() + self.eps);
                w[i] -= C64::new(lr * dre, lr * dim);
            }
        }
        Ok(())
    }
}

/// Relative improvement test shared by the scheduler and early stopping.
fn improves(metric: f64, best: Option<f64>, threshold: f64) -> bool {
    match best {
        None => metric.is_finite(),
        Some(b) => metric > b + threshold * b.abs(),
    }
}

/// Multiply the learning rate by `factor` after more than `patience`
/// validations without a relative improvement above `threshold`.
#[derive(Clone, Debug, PartialEq)]
pub struct PlateauScheduler {
    pub lr: f64,
    pub factor: f64,
    pub patience: usize,
    pub threshold: f64,
    best: Option<f64>,
    bad: usize,
}

impl PlateauScheduler {
    pub fn new(lr: f64, factor: f64, patience: usize, threshold: f64) -> Self {
        Self {
            lr,
            factor,
            patience,
            threshold,
            best: None,
            bad: 0,
        }
    }

    /// Record a validation score; returns the new rate when it changed.
    pub fn observe(&mut self, metric: f64) -> Option<f64> {
        if improves(metric, self.best, self.threshold) {
            self.best = Some(metric);
            self.bad = 0;
            return None;
        }
        self.bad += 1;
        if self.bad > self.patience {
            self.bad = 0;
            self.lr *= self.factor;
            return Some(self.lr);
        }
        None
    }
}

/// Stop once `patience` consecutive validations fail to improve.
#[derive(Clone, Debug, PartialEq)]
pub struct EarlyStopping {
    pub patience: usize,
    pub threshold: f64,
    best: Option<f64>,
    bad: usize,
}

impl EarlyStopping {
    pub fn new(patience: usize, threshold: f64) -> Self {
        Self {
            patience,
            threshold,
            best: None,
            bad: 0,
        }
    }

    /// Record a validation score; true when training should stop.
    pub fn observe(&mut self, metric: f64) -> bool {
        if improves(metric, self.best, self.threshold) {
            self.best = Some(metric);
            self.bad = 0;
        } else {
            self.bad += 1;
        }
        self.bad >= self.patience
    }
}

/// Batch mean of the concentrated objective, recorded on the tape.
pub fn loss_on_tape(tape: &mut Tape, hs: &[ComplexMatrix], precoders: &[Var], p_t: f64, sigma2: f64) -> Result<Var> {
    if hs.len() != precoders.len() || hs.is_empty() {
        return Err(Error::Domain(format!(
            "loss needs one precoder per channel, got {} and {}",
            precoders.len(),
            hs.len()
        )));
    }
    let mut terms = Vec::with_capacity(hs.len());
    for (i, (h, &f)) in hs.iter().zip(precoders).enumerate() {
        let term = (|| {
            let k = h.cols();
            let c = p_t / (k as f64 * sigma2);
            let fh = tape.adjoint(f);
            let g = tape.matmul(fh, f)?;
            let g = tape.add_jitter(g)?;
            let hv = tape.constant(h.clone());
            let p = tape.matmul(fh, hv)?;
            let x = tape.solve(g, p)?;
            let ph = tape.adjoint(p);
            let t = tape.matmul(ph, x)?;
            let t = tape.scale_real(t, c);
            let eye = tape.constant(ComplexMatrix::identity(k));
            let t = tape.add(t, eye)?;
            let t_inv = tape.solve(t, eye)?;
            tape.trace(t_inv)
        })()
        .map_err(|e| e.at_sample(i))?;
        terms.push(term);
    }
    tape.mean(&terms)
}

/// The same batch mean computed by the closed-form precoding path.
pub fn batch_loss(hs: &[ComplexMatrix], f_rf: &[ComplexMatrix], p_t: f64, sigma2: f64) -> Result<f64> {
    if hs.is_empty() || hs.len() != f_rf.len() {
        return Err(Error::Domain("loss needs one precoder per channel".into()));
    }
    let mut acc = 0.0;
    for (i, (h, f)) in hs.iter().zip(f_rf).enumerate() {
        acc += concentrated_mse(h, f, p_t, sigma2).map_err(|e| e.at_sample(i))?;
    }
    Ok(acc / hs.len() as f64)
}

/// Loss, per-tensor gradients (in [`NetworkParams::names`] order) and the
/// forward pass of one training-mode batch.
pub struct BatchGradients {
    pub loss: f64,
    pub grads: Vec<ComplexMatrix>,
    pub pass: ForwardPass,
}

pub fn loss_and_gradients(
    params: &NetworkParams,
    hs: &[ComplexMatrix],
    noise: Option<(f64, &mut Stream)>,
    p_t: f64,
    sigma2: f64,
) -> Result<BatchGradients> {
    let mut tape = Tape::new();
    let vars = params.to_tape(&mut tape, true);
    let pass = params.forward_on_tape(&mut tape, &vars, NetworkInput::Channels(hs), noise, BnMode::Batch)?;
    let loss = loss_on_tape(&mut tape, hs, &pass.precoders, p_t, sigma2)?;
    let value = tape.value(loss)[(0, 0)].re;
    let g = tape.backward(loss)?;
    let grads = vars
        .all
        .iter()
        .zip(params.tensors())
        .map(|(&v, t)| g.get_or_zeros(v, t.shape()))
        .collect();
    Ok(BatchGradients {
        loss: value,
        grads,
        pass,
    })
}

/// Scale gradients so their global norm is at most `max_norm`; returns the
/// norm before clipping.
pub fn clip_global_norm(grads: &mut [ComplexMatrix], max_norm: f64) -> f64 {
    let norm = grads.iter().map(|g| g.frobenius_norm_sqr()).sum::<f64>().sqrt();
    if norm > max_norm {
        let s = max_norm / norm;
        for g in grads.iter_mut() {
            *g = g.scale_real(s);
        }
    }
    norm
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepReport {
    pub loss: f64,
    pub grad_norm: f64,
}

/// One optimizer step on a minibatch with fresh sensing noise. A zero
/// learning rate leaves the whole model untouched, batch-norm running
/// statistics included.
pub fn train_step(
    params: &mut NetworkParams,
    adam: &mut Adam,
    hs: &[ComplexMatrix],
    noise: Option<(f64, &mut Stream)>,
    lr: f64,
    clip_norm: f64,
    scenario: &ScenarioConfig,
) -> Result<StepReport> {
    let sigma2 = scenario.noise_variance();
    let mut bg = loss_and_gradients(params, hs, noise, scenario.p_t, sigma2)?;
    if !bg.loss.is_finite() {
        return Err(Error::Domain(format!("non-finite loss {}", bg.loss)));
    }
    let grad_norm = clip_global_norm(&mut bg.grads, clip_norm);
    let names = params.names();
    adam.update(params.tensors_mut(), &bg.grads, &names, lr)?;
    if lr > 0.0 {
        params.update_running(&bg.pass);
    }
    Ok(StepReport {
        loss: bg.loss,
        grad_norm,
    })
}

const VALIDATION_CHUNK: usize = 256;

/// Mean downlink sum rate over `channels` through the full inference path:
/// indirect mode feeds the clean channel, direct mode runs the uplink
/// protocol with substreams indexed by sample.
pub fn validation_sum_rate(
    params: &NetworkParams,
    channels: &[ComplexMatrix],
    scenario: &ScenarioConfig,
    protocol: &ProtocolConfig,
    seed: u64,
) -> Result<f64> {
    if channels.is_empty() {
        return Err(Error::Domain("empty validation split".into()));
    }
    let rates: Vec<f64> = match params.mode {
        Mode::Indirect => channels
            .par_chunks(VALIDATION_CHUNK)
            .enumerate()
            .map(|(c, hs)| {
                run_indirect_batch(hs, params, scenario)
                    .map(|o| o.into_iter().map(|x| x.metrics.sum_rate).collect::<Vec<_>>())
                    .map_err(|e| e.at_sample(c * VALIDATION_CHUNK))
            })
            .collect::<Result<Vec<_>>>()?
            .into_iter()
            .flatten()
            .collect(),
        Mode::Direct => channels
            .par_iter()
            .enumerate()
            .map(|(i, h)| {
                let mut s = Stream::new(seed, "validate/direct", i as u64);
                run_direct(h, params, protocol, scenario, &mut s)
                    .map(|t| t.metrics.sum_rate)
                    .map_err(|e| e.at_sample(i))
            })
            .collect::<Result<Vec<_>>>()?,
    };
    Ok(rates.iter().sum::<f64>() / rates.len() as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct LogRow {
    pub epoch: usize,
    pub step: u64,
    pub train_loss: f64,
    pub val_sum_rate: f64,
    pub lr: f64,
    pub wall_ms: u128,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct LrChange {
    pub epoch: usize,
    pub lr: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub enum StopReason {
    MaxEpochs,
    EarlyStopped { epoch: usize },
    Diverged { epoch: usize, reason: String },
}

#[derive(Clone, Debug)]
pub struct FitResult {
    /// Parameters at the best validation score.
    pub params: NetworkParams,
    pub best_epoch: usize,
    pub best_val_sum_rate: f64,
    pub log: Vec<LogRow>,
    pub lr_changes: Vec<LrChange>,
    pub stop: StopReason,
}

impl FitResult {
    pub fn diverged(&self) -> bool {
        matches!(self.stop, StopReason::Diverged { .. })
    }
}

/// Train a fresh network on `dataset.train`, validating once per epoch on
/// `dataset.validation`. Divergence ends training early and still returns
/// the best checkpoint seen so far.
pub fn fit(
    mode: Mode,
    dims: &NetworkDims,
    dataset: &Dataset,
    config: &TrainConfig,
    protocol: &ProtocolConfig,
) -> Result<FitResult> {
    config.validate()?;
    let scenario = &dataset.train.scenario;
    if dims.m != scenario.m || dims.k != scenario.k || dims.n_rf != scenario.n_rf {
        return Err(Error::Config(format!(
            "network dims (m={}, k={}, n_rf={}) do not match the scenario (m={}, k={}, n_rf={})",
            dims.m, dims.k, dims.n_rf, scenario.m, scenario.k, scenario.n_rf
        )));
    }
    if dataset.train.samples.len() < 2 || dataset.validation.samples.is_empty() {
        return Err(Error::Domain("training needs at least 2 train and 1 validation samples".into()));
    }
    let params = NetworkParams::init(dims.clone(), mode, config.seed)?;
    fit_from(params, dataset, config, protocol)
}

/// [`fit`] starting from given parameters.
pub fn fit_from(
    mut params: NetworkParams,
    dataset: &Dataset,
    config: &TrainConfig,
    protocol: &ProtocolConfig,
) -> Result<FitResult> {
    config.validate()?;
    protocol.validate()?;
    let scenario = &dataset.train.scenario;
    let sigma2 = scenario.noise_variance();
    let train: Vec<&ComplexMatrix> = dataset.train.samples.iter().map(|s| &s.h).collect();
    let val: Vec<ComplexMatrix> = dataset.validation.samples.iter().map(|s| s.h.clone()).collect();
    let seed = config.seed;

    let mut adam = Adam::for_params(&params, config);
    let mut sched = PlateauScheduler::new(
        config.learning_rate,
        config.scheduler_factor,
        config.scaled(config.scheduler_patience),
        config.scheduler_threshold,
    );
    let mut stopper = EarlyStopping::new(config.scaled(config.early_stop_patience), config.early_stop_threshold);
    let start = Instant::now();
    let mut log = Vec::new();
    let mut lr_changes = Vec::new();
    let mut best: Option<(f64, usize, NetworkParams)> = None;
    let mut step: u64 = 0;
    let mut stop = StopReason::MaxEpochs;
    let mut order: Vec<usize> = (0..train.len()).collect();

    'epochs: for epoch in 1..=config.max_epochs {
        let lr = sched.lr;
        Stream::new(seed, "train/shuffle", epoch as u64).shuffle(&mut order);
        let (mut loss_sum, mut seen) = (0.0, 0usize);
        for chunk in order.chunks(config.batch_size) {
            if chunk.len() < 2 {
                continue;
            }
            let hs: Vec<ComplexMatrix> = chunk.iter().map(|&i| train[i].clone()).collect();
            let mut noise = Stream::new(seed, "train/noise", step);
            step += 1;
            match train_step(&mut params, &mut adam, &hs, Some((sigma2, &mut noise)), lr, config.clip_norm, scenario) {
                Ok(r) => {
                    loss_sum += r.loss * hs.len() as f64;
                    seen += hs.len();
                }
                Err(e) => {
                    stop = StopReason::Diverged {
                        epoch,
                        reason: e.to_string(),
                    };
                    break 'epochs;
                }
            }
        }
        let val_rate = match validation_sum_rate(&params, &val, scenario, protocol, seed) {
            Ok(v) if v.is_finite() => v,
            Ok(v) => {
                stop = StopReason::Diverged {
                    epoch,
                    reason: format!("validation sum rate {v}"),
                };
                break;
            }
            Err(e) => {
                stop = StopReason::Diverged {
                    epoch,
                    reason: e.to_string(),
                };
                break;
            }
        };
        log.push(LogRow {
            epoch,
            step,
            train_loss: if seen > 0 { loss_sum / seen as f64 } else { f64::NAN },
            val_sum_rate: val_rate,
            lr,
            wall_ms: start.elapsed().as_millis(),
            seed,
        });
        if best.as_ref().is_none_or(|b| val_rate > b.0) {
            best = Some((val_rate, epoch, params.clone()));
        }
        if let Some(new_lr) = sched.observe(val_rate) {
            lr_changes.push(LrChange { epoch, lr: new_lr });
        }
        if stopper.observe(val_rate) {
            stop = StopReason::EarlyStopped { epoch };
            break;
        }
    }

    let (best_val_sum_rate, best_epoch, params) = match best {
        Some(b) => b,
        None => (f64::NAN, 0, params),
    };
    Ok(FitResult {
        params,
        best_epoch,
        best_val_sum_rate,
        log,
        lr_changes,
        stop,
    })
}

pub const LOG_HEADER: &str = "epoch,step,train_loss,val_sum_rate,lr,wall_ms,seed";

/// Training log as CSV with a schema comment line.
pub fn write_log_csv(path: &Path, rows: &[LogRow]) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(f, "# schema=1")?;
    writeln!(f, "{LOG_HEADER}")?;
    for r in rows {
        writeln!(
            f,
            "{},{},{},{},{},{},{}",
            r.epoch, r.step, r.train_loss, r.val_sum_rate, r.lr, r.wall_ms, r.seed
        )?;
    }
    f.flush()?;
    Ok(())
}

/// Finite-difference check of the full training loss with respect to every
/// network parameter, on a random batch with sensing noise on. The noise
/// realization is replayed identically for every perturbed evaluation.
pub fn network_gradient_check(
    dims: &NetworkDims,
    mode: Mode,
    scenario: &ScenarioConfig,
    batch: usize,
    seed: u64,
) -> Result<GradCheckReport> {
    let params = NetworkParams::init(dims.clone(), mode, seed)?;
    let sigma2 = scenario.noise_variance();
    let mut s = Stream::new(seed, "gradcheck/data", 0);
    let hs: Vec<ComplexMatrix> = (0..batch).map(|_| s.complex_normal_matrix(dims.m, dims.k, 1.0)).collect();
    let inputs: Vec<ComplexMatrix> = params.tensors().into_iter().cloned().collect();
    check_tape(&inputs, 1e-6, |tape, vars| {
        let pv = params.vars_from(vars)?;
        let mut noise = Stream::new(seed, "gradcheck/noise", 0);
        let pass = params.forward_on_tape(tape, &pv, NetworkInput::Channels(&hs), Some((sigma2, &mut noise)), BnMode::Batch)?;
        loss_on_tape(tape, &hs, &pass.precoders, scenario.p_t, sigma2)
    })
}
