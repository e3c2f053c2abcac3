//! Optimisation and evaluation: Adam with global-norm clipping under a poly
//! learning-rate schedule, cross-entropy on the final frame of each sequence.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::augment::{apply_policy, augment_sequence, AugmentConfig, Disturbance, DisturbancePolicy};
use crate::dataset::{collate, epoch_batches, VideoSample};
use crate::error::{Error, Result};
use crate::metrics::{mfip, ConfusionMatrix, Metrics};
use crate::params::ParamSet;
use crate::real::Real;
use crate::seed::derive_seed;
use crate::segnet::{argmax_labels, Network, NetworkConfig, UNIT_PREFIX};
use crate::tape::Tape;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub initial_lr: f64,
    pub total_iters: usize,
    pub poly_power: f64,
    pub clip_norm: f64,
    pub batch_size: usize,
    pub seed: u64,
    pub repetitions: usize,
    pub augment: AugmentConfig,
    /// Architecture, including the version and the recurrent unit design.
    pub network: NetworkConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            initial_lr: 1e-5,
            total_iters: 5000,
            poly_power: 0.9,
            clip_norm: 5.0,
            batch_size: 2,
            seed: 0,
            repetitions: 5,
            augment: AugmentConfig::default(),
            network: NetworkConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.initial_lr.is_finite() && self.initial_lr > 0.0) {
            return Err(Error::Config(format!(
                "initial_lr must be positive, got {}",
                self.initial_lr
            )));
        }
        if self.total_iters == 0 {
            return Err(Error::Config("total_iters must be at least 1".into()));
        }
        if self.repetitions == 0 {
            return Err(Error::Config("repetitions must be at least 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if self.clip_norm.is_nan() || self.clip_norm <= 0.0 {
            return Err(Error::Config(format!(
                "clip_norm must be positive, got {}",
                self.clip_norm
            )));
        }
        if !(self.poly_power.is_finite() && self.poly_power >= 0.0) {
            return Err(Error::Config(format!(
                "poly_power must be nonnegative, got {}",
                self.poly_power
            )));
        }
        self.augment.validate()?;
        self.network.validate()
    }

    /// Seed of repetition `r`; every repetition gets an independent stream.
    pub fn repetition_seed(&self, r: usize) -> u64 {
        derive_seed(self.seed, r as u64)
    }
}

/// `initial_lr * (1 - iter / total_iters)^power`.
pub fn poly_lr(iter: usize, cfg: &TrainConfig) -> Result<f64> {
    if iter > cfg.total_iters {
        return Err(Error::Invalid(format!(
            "iteration {iter} beyond total_iters {}",
            cfg.total_iters
        )));
    }
    let frac = 1.0 - iter as f64 / cfg.total_iters as f64;
    Ok(cfg.initial_lr * frac.powf(cfg.poly_power))
}

/// Rescales `grads` so their joint L2 norm is at most `max_norm`; returns
/// the norm before clipping.
pub fn clip_global_norm<T: Real>(grads: &mut [Tensor<T>], max_norm: f64) -> f64 {
    let norm = grads.iter().map(Tensor::sum_sq).sum::<f64>().sqrt();
    if norm > max_norm {
        let scale = T::of(max_norm / norm);
        for g in grads.iter_mut() {
            g.data_mut().iter_mut().for_each(|v| *v *= scale);
        }
    }
    norm
}

/// Adam with bias-corrected moments.
#[derive(Debug, Clone)]
pub struct Adam<T> {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    m: Vec<Tensor<T>>,
    v: Vec<Tensor<T>>,
}

impl<T: Real> Adam<T> {
    pub fn new(params: &ParamSet<T>) -> Self {
        let zeros: Vec<Tensor<T>> = params.iter().map(|(_, t)| Tensor::zeros(t.shape())).collect();
        Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// One update with learning rate `lr`; `grads` follow [`ParamSet`] order.
    pub fn update(&mut self, params: &mut ParamSet<T>, grads: &[Tensor<T>], lr: f64) {
        self.step += 1;
        let t = self.step as i32;
        let (b1, b2) = (T::of(self.beta1), T::of(self.beta2));
        let (one, eps) = (T::one(), T::of(self.eps));
        let c1 = T::of(1.0 - self.beta1.powi(t));
        let c2 = T::of(1.0 - self.beta2.powi(t));
        let lr = T::of(lr);
        for (k, id) in params.ids().collect::<Vec<_>>().into_iter().enumerate() {
            let p = params.get_mut(id).data_mut();
            let m = self.m[k].data_mut();
            let v = self.v[k].data_mut();
            for (j, &g) in grads[k].data().iter().enumerate() {
                m[j] = b1 * m[j] + (one - b1) * g;
                v[j] = b2 * v[j] + (one - b2) * g * g;
                let mhat = m[j] / c1;
                let vhat = v[j] / c2;
                p[j] -= lr * mhat / (vhat.sqrt() + eps);
            }
        }
    }
}

/// Copies every backbone parameter of `base` into `net` by name. Recurrent
/// unit parameters keep their fresh initialisation.
pub fn warm_start<T: Real>(net: &mut Network<T>, base: &ParamSet<T>) -> Result<usize> {
    let names: Vec<String> = net
        .params
        .iter()
        .map(|(n, _)| n.to_string())
        .filter(|n| !n.starts_with(UNIT_PREFIX))
        .collect();
    for name in &names {
        let id = base
            .id(name)
            .ok_or_else(|| Error::Config(format!("warm-start model lacks parameter {name}")))?;
        net.params.assign(name, base.get(id).clone())?;
    }
    Ok(names.len())
}

fn check_samples(samples: &[VideoSample], cfg: &NetworkConfig) -> Result<()> {
    if samples.is_empty() {
        return Err(Error::Invalid("no samples".into()));
    }
    for s in samples {
        if (s.height, s.width) != (cfg.height, cfg.width) {
            return Err(Error::Config(format!(
                "sample {} is {}x{}, network expects {}x{}",
                s.id, s.height, s.width, cfg.height, cfg.width
            )));
        }
        s.validate(cfg.num_classes).map_err(|e| {
            Error::Config(format!(
                "dataset does not match the {}-class network: {e}",
                cfg.num_classes
            ))
        })?;
        if s.is_empty() {
            return Err(Error::Invalid(format!("sample {} has no frames", s.id)));
        }
    }
    Ok(())
}

pub struct TrainOutcome {
    pub network: Network<f32>,
    /// Loss of every iteration, before that iteration's update.
    pub losses: Vec<f64>,
}

/// Trains a fresh network seeded with `cfg.seed`. `base` optionally provides
/// backbone weights. `progress` sees every `(iteration, loss)`.
pub fn train(
    cfg: &TrainConfig,
    samples: &[VideoSample],
    base: Option<&ParamSet<f32>>,
    progress: &mut dyn FnMut(usize, f64),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    check_samples(samples, &cfg.network)?;
    let mut net = Network::<f32>::build(cfg.network.clone(), cfg.seed)?;
    if let Some(base) = base {
        warm_start(&mut net, base)?;
    }
    let mut adam = Adam::new(&net.params);
    let mut losses = Vec::with_capacity(cfg.total_iters);
    let mut plan = Vec::new().into_iter();
    let mut epoch = 0u64;
    let mut tape = Tape::<f32>::new();
    for iter in 0..cfg.total_iters {
        let batch = match plan.next() {
            Some(b) => b,
            None => {
                plan = epoch_batches(samples.len(), cfg.batch_size, cfg.seed, epoch).into_iter();
                epoch += 1;
                plan.next().expect("non-empty epoch")
            }
        };
        let augmented: Vec<VideoSample> = batch
            .iter()
            .enumerate()
            .map(|(j, &i)| {
                let s = derive_seed(cfg.seed, (iter * cfg.batch_size + j) as u64);
                augment_sequence(&samples[i], &cfg.augment, s)
            })
            .collect::<Result<_>>()?;
        let refs: Vec<&VideoSample> = augmented.iter().collect();
        let (frames, labels) = collate(&refs)?;

        tape.reset();
        let diverged = |e: Error| match e {
            Error::NonFinite(_) => Error::Diverged { iter, loss: f64::NAN },
            other => other,
        };
        let bound = net.params.bind(&mut tape);
        let vars: Vec<_> = frames.into_iter().map(|f| tape.constant(f)).collect();
        let (loss, _) = net.sequence_loss(&mut tape, &bound, &vars, &labels).map_err(diverged)?;
        let value = tape.value(loss).data()[0] as f64;
        if !value.is_finite() {
            return Err(Error::Diverged { iter, loss: value });
        }
        let mut grads = tape.backward(loss).map_err(diverged)?;
        let mut g = bound.collect(&net.params, &mut grads);
        clip_global_norm(&mut g, cfg.clip_norm);
        adam.update(&mut net.params, &g, poly_lr(iter, cfg)?);
        losses.push(value);
        progress(iter, value);
    }
    Ok(TrainOutcome { network: net, losses })
}

/// Optional disturbance applied to every evaluated sequence.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalDisturbance {
    pub policy: DisturbancePolicy,
    pub disturbance: Disturbance,
    pub seed: u64,
}

/// Final-frame accuracy and IoU over `samples`, plus the flicker of the
/// per-frame predictions of every sequence.
pub fn evaluate<T: Real>(
    net: &Network<T>,
    samples: &[VideoSample],
    disturbance: Option<&EvalDisturbance>,
) -> Result<Metrics> {
    check_samples(samples, &net.config)?;
    let mut cm = ConfusionMatrix::new(net.config.num_classes);
    let mut flicker = Vec::new();
    for (i, sample) in samples.iter().enumerate() {
        let disturbed;
        let seq = match disturbance {
            Some(d) => {
                disturbed = apply_policy(sample, d.policy, &d.disturbance, derive_seed(d.seed, i as u64))?;
                &disturbed
            }
            None => sample,
        };
        let frames: Vec<Tensor<T>> = seq.frames.iter().map(Tensor::cast).collect();
        let probs = net.predict_frames(&frames)?;
        let preds: Vec<Vec<u8>> = probs.iter().map(argmax_labels).collect();
        cm.accumulate(preds.last().expect("non-empty"), &seq.label, None)?;
        if preds.len() >= 2 {
            flicker.push(mfip(&preds)?);
        }
    }
    Metrics::from_parts(&cm, &flicker)
}

/// Metrics of `R` repetitions with their mean and population standard deviation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunResult {
    pub repetitions: usize,
    pub runs: Vec<BTreeMap<String, f64>>,
    pub mean: BTreeMap<String, f64>,
    pub std: BTreeMap<String, f64>,
}

impl RunResult {
    pub fn from_runs(runs: Vec<BTreeMap<String, f64>>) -> Result<Self> {
        let first = runs.first().ok_or_else(|| Error::Invalid("no repetitions".into()))?;
        let keys: Vec<String> = first.keys().cloned().collect();
        let mut mean = BTreeMap::new();
        let mut std = BTreeMap::new();
        for k in keys {
            let vals: Vec<f64> = runs
                .iter()
                .map(|r| {
                    r.get(&k)
                        .copied()
                        .ok_or_else(|| Error::Invalid(format!("repetition lacks metric {k}")))
                })
                .collect::<Result<_>>()?;
            let n = vals.len() as f64;
            let mu = vals.iter().sum::<f64>() / n;
            let var = vals.iter().map(|v| (v - mu).powi(2)).sum::<f64>() / n;
            mean.insert(k.clone(), mu);
            std.insert(k, var.sqrt());
        }
        Ok(RunResult {
            repetitions: runs.len(),
            runs,
            mean,
            std,
        })
    }
}

/// Flattens metrics into `prefix.accuracy`, `prefix.mIoU` and `prefix.mFIP_percent`.
pub fn summarize(prefix: &str, m: &Metrics, out: &mut BTreeMap<String, f64>) {
    out.insert(format!("{prefix}.accuracy"), m.accuracy);
    out.insert(format!("{prefix}.mIoU"), m.miou);
    if let Some(f) = m.mfip_percent {
        out.insert(format!("{prefix}.mFIP_percent"), f);
    }
}
