//! Joint optimization of the metric-learning loss and the similarity-mining
//! loss, `L = L_ml + γ·L_sm`.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::arch::Architecture;
use crate::attention::{attend, mining_loss, soft_mask, MaskConfig, WeightArch};
use crate::autograd::{Graph, Tensor};
use crate::data::{sample_tuples, Dataset, TupleBatch};
use crate::error::{Error, Result};
use crate::eval::{recall_at_k, RetrievalIndex};
use crate::model::{metric_loss, Encoder, MetricLossConfig, MetricLossKind};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    Sgd,
    Adam { beta1: f64, beta2: f64, eps: f64 },
}

impl OptimizerKind {
    pub fn adam() -> Self {
        OptimizerKind::Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub arch: Architecture,
    /// Weight of the mining loss.
    pub gamma: f64,
    pub metric: MetricLossConfig,
    pub mask: MaskConfig,
    /// Treat `w` as a constant when scoring samples for attention.
    pub detach_w: bool,
    pub lr: f64,
    pub optimizer: OptimizerKind,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    /// Encoder layer whose output is the attention feature map.
    pub attention_layer: usize,
    /// Validation samples held out per class by [`fit`].
    pub val_per_class: usize,
}

impl TrainConfig {
    pub fn new(arch: Architecture) -> Self {
        TrainConfig {
            arch,
            gamma: 0.2,
            metric: MetricLossConfig::new(MetricLossKind::for_arch(arch)),
            mask: MaskConfig::default(),
            detach_w: true,
            lr: 1e-3,
            optimizer: OptimizerKind::adam(),
            epochs: 40,
            batch_size: 16,
            seed: 0,
            attention_layer: 2,
            val_per_class: 20,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.gamma >= 0.0 && self.gamma.is_finite()) {
            return Err(Error::invalid("train_config", format!("gamma must be >= 0, got {}", self.gamma)));
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::invalid("train_config", format!("lr must be >= 0, got {}", self.lr)));
        }
        if self.batch_size == 0 {
            return Err(Error::invalid("train_config", "batch_size must be at least 1"));
        }
        if self.metric.kind != MetricLossKind::for_arch(self.arch) {
            return Err(Error::invalid(
                "train_config",
                format!("{:?} loss does not fit the {} architecture", self.metric.kind, self.arch),
            ));
        }
        if let OptimizerKind::Adam { beta1, beta2, eps } = self.optimizer {
            if !((0.0..1.0).contains(&beta1) && (0.0..1.0).contains(&beta2) && eps > 0.0) {
                return Err(Error::invalid("train_config", "adam needs beta1, beta2 in [0,1) and eps > 0"));
            }
        }
        self.metric.validate()?;
        self.mask.validate()
    }
}

/// Optimizer accumulators, one slot per encoder parameter.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState {
    kind: OptimizerKind,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl OptimizerState {
    pub fn new(kind: OptimizerKind, enc: &Encoder) -> Self {
        let (m, v) = match kind {
            OptimizerKind::Sgd => (Vec::new(), Vec::new()),
            OptimizerKind::Adam { .. } => {
                let zeros: Vec<Vec<f64>> = enc.parameters().iter().map(|(_, t)| vec![0.0; t.len()]).collect();
                (zeros.clone(), zeros)
            }
        };
        OptimizerState { kind, step: 0, m, v }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Applies one update with gradients `grads` (one vector per parameter).
    pub fn apply(&mut self, enc: &mut Encoder, grads: &[Vec<f64>], lr: f64) -> Result<()> {
        if grads.len() != enc.parameters().len() {
            return Err(Error::invalid("optimizer", "gradient count does not match parameters"));
        }
        self.step += 1;
        for (i, g) in grads.iter().enumerate() {
            let p = &enc.parameters()[i].1;
            let mut data = p.to_vec();
            match self.kind {
                OptimizerKind::Sgd => {
                    for (x, gi) in data.iter_mut().zip(g) {
                        *x -= lr * gi;
                    }
                }
                OptimizerKind::Adam { beta1, beta2, eps } => {
                    let bc1 = 1.0 - beta1.powi(self.step as i32);
                    let bc2 = 1.0 - beta2.powi(self.step as i32);
                    let (m, v) = (&mut self.m[i], &mut self.v[i]);
                    for j in 0..data.len() {
                        m[j] = beta1 * m[j] + (1.0 - beta1) * g[j];
                        v[j] = beta2 * v[j] + (1.0 - beta2) * g[j] * g[j];
                        let mh = m[j] / bc1;
                        let vh = v[j] / bc2;
                        data[j] -= lr * mh / (vh.sqrt() + eps);
                    }
                }
            }
            if data.iter().any(|x| !x.is_finite()) {
                return Err(Error::Diverged(format!(
                    "parameter `{}` became non-finite at step {}",
                    enc.parameters()[i].0,
                    self.step
                )));
            }
            let shape = p.shape().to_vec();
            enc.set_parameter(i, Tensor::from_parts(shape, data))?;
        }
        Ok(())
    }
}

/// Batch-mean losses before the update. `loss_sm` averages over the tuples
/// that carry a mining term (all of them except different-class pairs).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepLosses {
    pub loss_ml: f64,
    pub loss_sm: f64,
}

/// Which part of the objective a gradient is taken of.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Objective {
    /// `L_ml + γ·L_sm`
    Total,
    MetricOnly,
    MiningOnly,
}

fn mines(arch: Architecture, same_class: bool) -> bool {
    arch != Architecture::Siamese || same_class
}

fn diverged(e: Error) -> Error {
    match e {
        Error::NonFinite { op } => Error::Diverged(format!("non-finite value in `{op}`")),
        e => e,
    }
}

/// Losses and gradients of `objective` for one batch, one vector per encoder
/// parameter. Each tuple is evaluated on its own graph and the gradients are
/// summed in tuple order.
pub fn batch_gradients(
    enc: &Encoder,
    data: &Dataset,
    batch: &TupleBatch,
    cfg: &TrainConfig,
    objective: Objective,
) -> Result<(StepLosses, Vec<Vec<f64>>)> {
    if batch.arch != cfg.arch {
        return Err(Error::invalid(
            "train_step",
            format!("batch is {} but config is {}", batch.arch, cfg.arch),
        ));
    }
    if batch.tuples.is_empty() {
        return Err(Error::invalid("train_step", "empty batch"));
    }
    let b = batch.tuples.len() as f64;
    let bm = batch.tuples.iter().filter(|t| mines(cfg.arch, t.same_class)).count() as f64;
    let mut grads: Vec<Vec<f64>> = enc.parameters().iter().map(|(_, t)| vec![0.0; t.len()]).collect();
    let (mut sum_ml, mut sum_sm) = (0.0, 0.0);
    for tuple in &batch.tuples {
        let g = Graph::new();
        let bound = enc.bind(&g, true);
        let images: Vec<Tensor> = tuple
            .members
            .iter()
            .map(|&i| {
                data.samples
                    .get(i)
                    .map(|s| s.image.clone())
                    .ok_or_else(|| Error::invalid("train_step", format!("sample {i} out of range")))
            })
            .collect::<Result<_>>()?;
        let mining = mines(cfg.arch, tuple.same_class);
        let want_sm = mining
            && match objective {
                Objective::Total => cfg.gamma > 0.0,
                Objective::MetricOnly => false,
                Objective::MiningOnly => true,
            };
        let (embeddings, maps) = if mining && objective != Objective::MetricOnly {
            let att = attend(
                &bound,
                &images,
                WeightArch::for_tuple(cfg.arch, tuple.same_class),
                cfg.detach_w,
                want_sm,
            )?;
            let e = att.embeddings();
            (e, Some(att.maps))
        } else {
            let e = images
                .iter()
                .map(|x| Ok(bound.encode(x)?.embedding))
                .collect::<Result<Vec<_>>>()?;
            (e, None)
        };
        let l_ml = metric_loss(&g, &cfg.metric, &embeddings, Some(tuple.same_class))?;
        sum_ml += l_ml.item()?;
        let l_sm = match maps {
            Some(maps) => {
                let masked = images
                    .iter()
                    .zip(&maps)
                    .map(|(x, m)| Ok(bound.encode(&soft_mask(&g, x, &m.map, &cfg.mask)?)?.embedding))
                    .collect::<Result<Vec<_>>>()?;
                let l = mining_loss(&g, cfg.arch, &masked)?;
                sum_sm += l.item()?;
                Some(l)
            }
            None => None,
        };
        let target = match (objective, want_sm) {
            (Objective::MiningOnly, false) => continue,
            (Objective::MiningOnly, true) => g.scale(l_sm.as_ref().expect("mining term"), 1.0 / bm)?,
            (_, true) => g.add(
                &g.scale(&l_ml, 1.0 / b)?,
                &g.scale(l_sm.as_ref().expect("mining term"), cfg.gamma / bm)?,
            )?,
            (_, false) => g.scale(&l_ml, 1.0 / b)?,
        };
        let gm = g.backward(&target, false)?;
        for (acc, p) in grads.iter_mut().zip(bound.parameters()) {
            if let Some(gp) = gm.get(p) {
                for (a, x) in acc.iter_mut().zip(gp.data()) {
                    *a += x;
                }
            }
        }
    }
    let losses = StepLosses {
        loss_ml: sum_ml / b,
        loss_sm: if bm > 0.0 { sum_sm / bm } else { 0.0 },
    };
    if !(losses.loss_ml.is_finite() && losses.loss_sm.is_finite()) {
        return Err(Error::Diverged(format!("loss_ml={} loss_sm={}", losses.loss_ml, losses.loss_sm)));
    }
    Ok((losses, grads))
}

/// One optimizer update on the batch objective `L_ml + γ·L_sm`. Returns the
/// losses measured before the update.
pub fn train_step(
    enc: &mut Encoder,
    data: &Dataset,
    batch: &TupleBatch,
    cfg: &TrainConfig,
    opt: &mut OptimizerState,
) -> Result<StepLosses> {
    step_with(enc, data, batch, cfg, opt, Objective::Total)
}

/// A step that ignores the mining term entirely.
pub fn metric_only_step(
    enc: &mut Encoder,
    data: &Dataset,
    batch: &TupleBatch,
    cfg: &TrainConfig,
    opt: &mut OptimizerState,
) -> Result<StepLosses> {
    step_with(enc, data, batch, cfg, opt, Objective::MetricOnly)
}

fn step_with(
    enc: &mut Encoder,
    data: &Dataset,
    batch: &TupleBatch,
    cfg: &TrainConfig,
    opt: &mut OptimizerState,
    objective: Objective,
) -> Result<StepLosses> {
    let (losses, grads) = batch_gradients(enc, data, batch, cfg, objective).map_err(diverged)?;
    opt.apply(enc, &grads, cfg.lr)?;
    Ok(losses)
}

/// Seed of the batch drawn at `step` of `epoch`.
pub fn batch_seed(seed: u64, epoch: usize, step: usize) -> u64 {
    // splitmix64 finalizer over the packed coordinates
    let mut z = seed
        .wrapping_add(0x9e37_79b9_7f4a_7c15u64.wrapping_mul(1 + epoch as u64))
        .wrapping_add((step as u64) << 32);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    /// 1-based.
    pub epoch: usize,
    pub loss_ml: f64,
    pub loss_sm: f64,
    pub recall_at_1: f64,
}

impl fmt::Display for EpochRecord {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "epoch={} loss_ml={} loss_sm={} recall_at_1={}",
            self.epoch, self.loss_ml, self.loss_sm, self.recall_at_1
        )
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub records: Vec<EpochRecord>,
}

impl TrainLog {
    pub fn last(&self) -> Option<&EpochRecord> {
        self.records.last()
    }
}

/// Leave-one-out Recall@1 of `enc` on `dataset`.
pub fn validation_recall(enc: &Encoder, dataset: &Dataset) -> Result<f64> {
    let index = RetrievalIndex::from_dataset(enc, dataset)?;
    recall_at_k(&index, &index.self_queries(), 1)
}

/// Trains on a class-stratified split of `dataset` and scores held-out
/// Recall@1 after every epoch. An epoch is `⌈N_train / batch_size⌉` steps.
/// `on_epoch` sees each record with the encoder at that point.
pub fn fit(
    enc: &mut Encoder,
    dataset: &Dataset,
    cfg: &TrainConfig,
    on_epoch: &mut dyn FnMut(&EpochRecord, &Encoder) -> Result<()>,
) -> Result<TrainLog> {
    let (train, val) = dataset.split(cfg.val_per_class, cfg.seed)?;
    fit_split(enc, &train, &val, cfg, on_epoch)
}

/// [`fit`] on an explicit train/validation split.
pub fn fit_split(
    enc: &mut Encoder,
    train: &Dataset,
    val: &Dataset,
    cfg: &TrainConfig,
    on_epoch: &mut dyn FnMut(&EpochRecord, &Encoder) -> Result<()>,
) -> Result<TrainLog> {
    cfg.validate()?;
    if enc.config().attention_layer != cfg.attention_layer {
        return Err(Error::invalid(
            "fit",
            format!(
                "encoder attends at layer {}, config asks for {}",
                enc.config().attention_layer,
                cfg.attention_layer
            ),
        ));
    }
    if enc.config().input_shape != train.image_shape() {
        return Err(Error::shape("fit", &enc.config().input_shape, &train.image_shape()));
    }
    let mut opt = OptimizerState::new(cfg.optimizer, enc);
    let steps = train.len().div_ceil(cfg.batch_size);
    let mut log = TrainLog::default();
    for epoch in 0..cfg.epochs {
        let (mut ml, mut sm) = (0.0, 0.0);
        for step in 0..steps {
            let batch = sample_tuples(train, cfg.arch, cfg.batch_size, batch_seed(cfg.seed, epoch, step))?;
            let l = train_step(enc, train, &batch, cfg, &mut opt).map_err(|e| match e {
                Error::Diverged(msg) => Error::Diverged(format!("epoch {} step {}: {msg}", epoch + 1, step + 1)),
                e => e,
            })?;
            ml += l.loss_ml;
            sm += l.loss_sm;
        }
        let record = EpochRecord {
            epoch: epoch + 1,
            loss_ml: ml / steps as f64,
            loss_sm: sm / steps as f64,
            recall_at_1: validation_recall(enc, val)?,
        };
        on_epoch(&record, enc)?;
        log.records.push(record);
    }
    Ok(log)
}

#[cfg(test)]
mod tests;
