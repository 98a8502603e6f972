//! Toy reconstruction training: SGD with momentum, weight decay and a
//! cosine learning-rate schedule.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::io::Write;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dmff::{dmff_forward_on, DmffConfig, DmffWeights};
use crate::error::{Error, Result};
use crate::graph::{GradRecord, Graph, Var};
use crate::params::Parameters;
use crate::synth::{gen_synthetic_pair, SyntheticPair, SyntheticPairSpec};
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr0: f64,
    pub lr_min: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Restrict weight decay to weight matrices and biases.
    pub decay_exempt: bool,
    pub steps: usize,
    pub seed: u64,
    /// Synthetic pairs in the (full) training batch.
    pub batch: usize,
    pub blob_count: usize,
    pub complementarity: f64,
    pub dmff: DmffConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr0: 1e-2,
            lr_min: 0.0,
            momentum: 0.937,
            weight_decay: 5e-4,
            decay_exempt: true,
            steps: 200,
            seed: 42,
            batch: 8,
            blob_count: 4,
            complementarity: 0.5,
            dmff: DmffConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.dmff.validate()?;
        if self.batch == 0 {
            return Err(Error::Config("batch must be positive".into()));
        }
        if !(self.lr0 >= 0.0 && self.lr_min >= 0.0) {
            return Err(Error::Config("learning rates must be non-negative".into()));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config(format!("momentum {} outside [0, 1)", self.momentum)));
        }
        if self.weight_decay < 0.0 {
            return Err(Error::Config("weight_decay must be non-negative".into()));
        }
        Ok(())
    }

    pub fn lr(&self, step: usize) -> f64 {
        cosine_lr(step, self.steps, self.lr0, self.lr_min)
    }
}

/// `lr_min + ½(lr0 − lr_min)(1 + cos(π·step/total))`; constant `lr0` when
/// `total` is zero.
pub fn cosine_lr(step: usize, total: usize, lr0: f64, lr_min: f64) -> f64 {
    if total == 0 {
        return lr0;
    }
    let progress = step.min(total) as f64 / total as f64;
    lr_min + 0.5 * (lr0 - lr_min) * (1.0 + (PI * progress).cos())
}

/// Heavy-ball SGD: `v ← μv + g + wd·p`, `p ← p − lr·v`.
#[derive(Clone, Debug)]
pub struct Sgd<S> {
    pub momentum: f64,
    pub weight_decay: f64,
    pub decay_exempt: bool,
    velocity: BTreeMap<String, Tensor<S>>,
}

impl<S: Scalar> Sgd<S> {
    pub fn new(momentum: f64, weight_decay: f64, decay_exempt: bool) -> Self {
        Self {
            momentum,
            weight_decay,
            decay_exempt,
            velocity: BTreeMap::new(),
        }
    }

    /// Updates every tensor of `params`; missing gradients count as zero.
    pub fn step<P: Parameters<S>>(&mut self, params: &mut P, grads: &GradRecord<S>, lr: f64) {
        let (mu, wd, lr) = (S::lit(self.momentum), S::lit(self.weight_decay), S::lit(lr));
        let exempt = self.decay_exempt;
        let velocity = &mut self.velocity;
        params.visit_mut("", &mut |name, kind, p| {
            let decay = if !exempt || kind.decays() { wd } else { S::zero() };
            let v = velocity
                .entry(name.to_string())
                .or_insert_with(|| Tensor::zeros(p.shape()));
            let g = grads.get(name);
            for i in 0..p.numel() {
                let gi = g.map_or(S::zero(), |g| g.data()[i]);
                let pi = p.data()[i];
                let vi = mu * v.data()[i] + gi + decay * pi;
                v.data_mut()[i] = vi;
                p.data_mut()[i] = pi - lr * vi;
            }
        });
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TraceRow {
    pub step: usize,
    pub lr: f64,
    /// Batch loss before this step's update.
    pub loss: f64,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub trace: Vec<TraceRow>,
    /// Batch loss after the last update.
    pub final_loss: f64,
    pub weights: DmffWeights<f32>,
}

/// Seeded training pairs for `cfg`.
pub fn toy_dataset(cfg: &TrainConfig) -> Result<Vec<SyntheticPair<f32>>> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(1);
    (0..cfg.batch)
        .map(|_| {
            gen_synthetic_pair(&SyntheticPairSpec {
                height: cfg.dmff.height,
                width: cfg.dmff.width,
                channels: cfg.dmff.channels,
                blob_count: cfg.blob_count,
                seed: rng.gen(),
                complementarity: cfg.complementarity,
            })
        })
        .collect()
}

/// Mean over pairs of the per-pair mean squared error.
pub fn batch_loss_on(
    g: &mut Graph<f32>,
    data: &[SyntheticPair<f32>],
    cfg: &DmffConfig,
    w: &DmffWeights<f32>,
) -> Result<Var> {
    let mut total: Option<Var> = None;
    for pair in data {
        let r = g.input(pair.rgb.clone());
        let t = g.input(pair.thermal.clone());
        let out = dmff_forward_on(g, r, t, cfg, w)?;
        let l = g.mse(out.output, pair.target.clone())?;
        total = Some(match total {
            Some(acc) => g.add(acc, l)?,
            None => l,
        });
    }
    let total = total.ok_or_else(|| Error::Config("empty training batch".into()))?;
    let k = g.input(Tensor::scalar(1.0 / data.len() as f32));
    g.scale_by(total, k)
}

fn evaluate(
    data: &[SyntheticPair<f32>],
    cfg: &DmffConfig,
    w: &DmffWeights<f32>,
    step: usize,
) -> Result<(f64, GradRecord<f32>)> {
    let mut g = Graph::new();
    let loss = batch_loss_on(&mut g, data, cfg, w)?;
    let value = g.value(loss).data()[0] as f64;
    if !value.is_finite() {
        return Err(Error::Divergence { step, loss: value });
    }
    Ok((value, g.backward_scalar(loss)?))
}

pub fn train_toy(cfg: &TrainConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    let data = toy_dataset(cfg)?;
    let mut weights = DmffWeights::<f32>::init(&cfg.dmff, &mut ChaCha8Rng::seed_from_u64(cfg.seed))?;
    let mut opt = Sgd::new(cfg.momentum, cfg.weight_decay, cfg.decay_exempt);
    let mut trace = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let (loss, grads) = evaluate(&data, &cfg.dmff, &weights, step)?;
        let lr = cfg.lr(step);
        trace.push(TraceRow { step, lr, loss });
        opt.step(&mut weights, &grads, lr);
    }
    let (final_loss, _) = evaluate(&data, &cfg.dmff, &weights, cfg.steps)?;
    Ok(TrainOutcome {
        trace,
        final_loss,
        weights,
    })
}

/// `step,lr,loss` rows; floats use the shortest round-trip form.
pub fn trace_csv(trace: &[TraceRow]) -> String {
    let mut out = String::from("step,lr,loss\n");
    for r in trace {
        out.push_str(&format!("{},{},{}\n", r.step, r.lr, r.loss));
    }
    out
}

pub fn write_trace_csv(trace: &[TraceRow], path: &Path) -> Result<()> {
    let mut f = std::fs::File::create(path)?;
    f.write_all(trace_csv(trace).as_bytes())?;
    Ok(())
}
