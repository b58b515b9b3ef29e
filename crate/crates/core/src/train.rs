//! Negative-ELBO objective, KL annealing, Adam and the training loop.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::autodiff::{GradientMap, Param, ParamId, Tape, Var};
use crate::data::{Dataset, Targets};
use crate::error::{Error, Result};
use crate::layers::Noise;
use crate::model::Model;
use crate::rng::{permutation, RngFactory};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LossKind {
    SoftmaxCe,
    /// Single-logit binary cross-entropy.
    BinaryCe,
    GaussianNll { sigma: f64 },
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct Anneal {
    pub zero_epochs: usize,
    pub warmup_epochs: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    #[serde(default = "default_lr")]
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    /// Full KL weight reached after annealing.
    pub kl_weight: f64,
    #[serde(default)]
    pub anneal: Anneal,
    #[serde(default)]
    pub seed: u64,
    pub loss: LossKind,
    #[serde(default)]
    pub gradient_clip: Option<f64>,
}

fn default_lr() -> f64 {
    1e-3
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0) {
            return Err(Error::Config("learning_rate must be positive".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if self.anneal.warmup_epochs < self.anneal.zero_epochs {
            return Err(Error::Config("warmup_epochs must be >= zero_epochs".into()));
        }
        if !(self.kl_weight >= 0.0) {
            return Err(Error::Config("kl_weight must be non-negative".into()));
        }
        if let LossKind::GaussianNll { sigma } = self.loss {
            if !(sigma > 0.0) {
                return Err(Error::Config("gaussian_nll sigma must be positive".into()));
            }
        }
        if matches!(self.gradient_clip, Some(c) if !(c > 0.0)) {
            return Err(Error::Config("gradient_clip must be positive".into()));
        }
        Ok(())
    }
}

/// `c / n_batches`, the per-batch KL convention.
pub fn kl_weight_per_batch(c: f64, n_batches: usize) -> f64 {
    c / n_batches as f64
}

/// `c / n_train`, the per-example KL convention.
pub fn kl_weight_per_example(c: f64, n_train: usize) -> f64 {
    c / n_train as f64
}

/// Zero before `zero_epochs`, linear up to `kl_weight` at `warmup_epochs`.
pub fn kl_anneal_weight(epoch: usize, cfg: &TrainConfig) -> f64 {
    let Anneal { zero_epochs, warmup_epochs } = cfg.anneal;
    if epoch < zero_epochs {
        0.0
    } else if epoch >= warmup_epochs {
        cfg.kl_weight
    } else {
        cfg.kl_weight * (epoch - zero_epochs) as f64 / (warmup_epochs - zero_epochs) as f64
    }
}

/// Terms of the minimized objective `nll + w * kl`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ElboBreakdown {
    pub nll_term: f64,
    pub kl_term: f64,
    pub effective_kl_weight: f64,
    pub total: f64,
}

/// Batch-mean data loss of `output` against `y`.
pub fn data_loss(tape: &mut Tape, output: Var, y: &Targets, loss: LossKind) -> Result<Var> {
    match loss {
        LossKind::SoftmaxCe => tape.softmax_ce(output, y.classes()?),
        LossKind::BinaryCe => tape.binary_ce(output, &y.as_f64()),
        LossKind::GaussianNll { sigma } => tape.gaussian_nll(output, y.values()?, sigma),
    }
}

/// Records the negative ELBO for one batch with one weight draw.
pub fn elbo_loss(
    model: &mut Model,
    tape: &mut Tape,
    batch: &Dataset,
    loss: LossKind,
    kl_weight: f64,
    noise: &mut Noise<'_>,
) -> Result<(ElboBreakdown, Var)> {
    if batch.is_empty() {
        return Err(Error::Data("empty batch".into()));
    }
    let f = model.forward(tape, &batch.x, noise)?;
    let nll = data_loss(tape, f.output, &batch.y, loss)?;
    let weighted = tape.scale(f.kl, kl_weight)?;
    let total = tape.add(nll, weighted)?;
    let b = ElboBreakdown {
        nll_term: tape.value(nll).item(),
        kl_term: tape.value(f.kl).item(),
        effective_kl_weight: kl_weight,
        total: tape.value(total).item(),
    };
    Ok((b, total))
}

/// Bias-corrected Adam with per-parameter moment buffers.
#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: u64,
    m: BTreeMap<ParamId, Tensor>,
    v: BTreeMap<ParamId, Tensor>,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    /// One update. Parameters without a gradient entry are treated as
    /// having zero gradient.
    pub fn step(&mut self, params: Vec<&mut Param>, grads: &GradientMap) -> Result<()> {
        for p in &params {
            if let Some(g) = grads.get(p.id) {
                if g.shape() != p.value.shape() {
                    return Err(Error::dim("adam_step", g.shape(), p.value.shape()));
                }
            }
        }
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for p in params {
            let shape = p.value.shape().to_vec();
            let m = self.m.entry(p.id).or_insert_with(|| Tensor::zeros(&shape));
            let v = self.v.entry(p.id).or_insert_with(|| Tensor::zeros(&shape));
            let g = grads.get(p.id);
            for k in 0..p.value.len() {
                let gk = g.map_or(0.0, |g| g.data()[k]);
                let mk = &mut m.data_mut()[k];
                *mk = self.beta1 * *mk + (1.0 - self.beta1) * gk;
                let vk = &mut v.data_mut()[k];
                *vk = self.beta2 * *vk + (1.0 - self.beta2) * gk * gk;
                let update = self.lr * (*mk / bc1) / ((*vk / bc2).sqrt() + self.eps);
                p.value.data_mut()[k] -= update;
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub nll_term: f64,
    pub kl_term: f64,
    pub effective_kl_weight: f64,
    pub total: f64,
    /// Validation data loss at the posterior mean, when a split is given.
    pub val_metric: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct History {
    pub epochs: Vec<EpochRecord>,
}

impl History {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("epoch,nll_term,kl_term,effective_kl_weight,total,val_metric\n");
        for r in &self.epochs {
            let val = r.val_metric.map(crate::report::fmt_f64).unwrap_or_default();
            s.push_str(&format!(
                "{},{},{},{},{},{}\n",
                r.epoch,
                crate::report::fmt_f64(r.nll_term),
                crate::report::fmt_f64(r.kl_term),
                crate::report::fmt_f64(r.effective_kl_weight),
                crate::report::fmt_f64(r.total),
                val
            ));
        }
        s
    }
}

/// Data loss with all noise at zero.
pub fn mean_loss(model: &mut Model, data: &Dataset, loss: LossKind) -> Result<f64> {
    let mut tape = Tape::new();
    let f = model.forward(&mut tape, &data.x, &mut Noise::Mean)?;
    let l = data_loss(&mut tape, f.output, &data.y, loss)?;
    Ok(tape.value(l).item())
}

/// Mini-batch training with one weight draw per step. Batch order and
/// noise come from streams keyed by `cfg.seed`, so repeated runs are
/// bit-identical.
pub fn train(model: &mut Model, train: &Dataset, val: Option<&Dataset>, cfg: &TrainConfig) -> Result<History> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::Data("training split is empty".into()));
    }
    let factory = RngFactory::new(cfg.seed);
    let n = train.len();
    let n_batches = n.div_ceil(cfg.batch_size);
    let mut adam = Adam::new(cfg.learning_rate);
    let mut history = History::default();
    for epoch in 0..cfg.epochs {
        let w = kl_anneal_weight(epoch, cfg);
        let order = permutation(&mut factory.substream("shuffle", epoch as u64), n);
        let (mut nll_sum, mut kl_sum) = (0.0, 0.0);
        for b in 0..n_batches {
            let idx = &order[b * cfg.batch_size..((b + 1) * cfg.batch_size).min(n)];
            let batch = train.select(idx);
            let mut rng = factory.substream("noise", (epoch * n_batches + b) as u64);
            let mut tape = Tape::new();
            let (bd, total) = elbo_loss(model, &mut tape, &batch, cfg.loss, w, &mut Noise::Sample(&mut rng))?;
            if !bd.total.is_finite() {
                return Err(Error::NonFinite {
                    epoch,
                    batch: b,
                    detail: format!("loss {} (nll {}, kl {})", bd.total, bd.nll_term, bd.kl_term),
                });
            }
            let mut grads = tape.backward(total)?;
            let norm = grads.global_norm();
            if !norm.is_finite() {
                return Err(Error::NonFinite {
                    epoch,
                    batch: b,
                    detail: format!("gradient norm {norm}"),
                });
            }
            if let Some(c) = cfg.gradient_clip {
                if norm > c {
                    grads.scale_all(c / norm);
                }
            }
            adam.step(model.params_mut(), &grads)?;
            let share = idx.len() as f64 / n as f64;
            nll_sum += share * bd.nll_term;
            kl_sum += share * bd.kl_term;
        }
        let val_metric = match val {
            Some(v) if !v.is_empty() => Some(mean_loss(model, v, cfg.loss)?),
            _ => None,
        };
        history.epochs.push(EpochRecord {
            epoch,
            nll_term: nll_sum,
            kl_term: kl_sum,
            effective_kl_weight: w,
            total: nll_sum + w * kl_sum,
            val_metric,
        });
    }
    Ok(history)
}
