//! Two-phase optimization: supervised source warm-up, then joint adaptation.
//!
//! Both phases share one polynomial learning-rate schedule over
//! `warmup_steps + adapt_steps` steps. Step `s` (counted from 1) uses
//! `base_lr * (1 - s / total)^power`, so the last step has rate zero.

use alloc::vec::Vec;

use rand::{Rng, RngCore};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::labels::{argmax_classes, LabelMap};
use crate::losses::{cross_entropy, total_loss, DomainForward, LossReport, LossWeights, ObjectiveFlags};
use crate::metrics::{iou, ConfusionMatrix, IouReport};
use crate::rng::{self, StreamRng};
use crate::segnet::{SegNet, SegNetParams};
use crate::synth::{augment, Sample};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub base_lr: f64,
    /// Rate multiplier of the classifier head (kernel and bias).
    pub head_lr_mult: f64,
    pub poly_power: f64,
    pub weight_decay: f64,
    pub momentum: f64,
    pub warmup_steps: usize,
    pub adapt_steps: usize,
    /// Images per domain per step; only 1 is supported.
    pub batch_size: usize,
    pub seed: u64,
    pub weights: LossWeights,
    pub flags: ObjectiveFlags,
    /// Validation cadence during adaptation, in steps (0 disables).
    pub eval_every: usize,
    /// Random horizontal mirroring of training images.
    pub mirror: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            base_lr: 2.5e-4,
            head_lr_mult: 10.0,
            poly_power: 0.9,
            weight_decay: 5e-4,
            momentum: 0.9,
            warmup_steps: 2000,
            adapt_steps: 3000,
            batch_size: 1,
            seed: 0,
            weights: LossWeights::default(),
            flags: ObjectiveFlags::default(),
            eval_every: 500,
            mirror: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let rates = [self.base_lr, self.head_lr_mult, self.poly_power, self.weight_decay, self.momentum];
        if rates.iter().any(|r| !r.is_finite() || *r < 0.0) {
            return Err(Error::InvalidConfig("rates must be finite and non-negative".into()));
        }
        if self.warmup_steps + self.adapt_steps == 0 {
            return Err(Error::InvalidConfig("at least one training step is required".into()));
        }
        if self.batch_size != 1 {
            return Err(Error::InvalidConfig("only batch_size = 1 is supported".into()));
        }
        self.weights.validate()
    }

    pub fn total_steps(&self) -> usize {
        self.warmup_steps + self.adapt_steps
    }
}

/// Learning rate of step `step` (1-based) out of `total`.
pub fn poly_lr(base_lr: f64, step: usize, total: usize, power: f64) -> f64 {
    let frac = 1.0 - step as f64 / total as f64;
    base_lr * libm::pow(frac.max(0.0), power)
}

/// SGD with momentum and L2 weight decay:
/// `v = mu * v + (g + wd * p)`, `p -= lr * v`.
#[derive(Debug, Clone)]
pub struct Sgd {
    momentum: f64,
    weight_decay: f64,
    velocity: Vec<Vec<f64>>,
    lr_scale: Vec<f64>,
}

impl Sgd {
    pub fn new(params: &SegNetParams, momentum: f64, weight_decay: f64) -> Self {
        Sgd {
            momentum,
            weight_decay,
            velocity: params.tensors().iter().map(|t| alloc::vec![0.0; t.numel()]).collect(),
            lr_scale: alloc::vec![1.0; params.tensors().len()],
        }
    }

    /// Multiplies the rate of the parameter tensor at `index`.
    pub fn set_lr_scale(&mut self, index: usize, scale: f64) {
        self.lr_scale[index] = scale;
    }

    pub fn step(&mut self, params: &mut SegNetParams, grads: &[Tensor], lr: f64) {
        for (((p, g), v), scale) in params.tensors_mut().iter_mut().zip(grads).zip(&mut self.velocity).zip(&self.lr_scale) {
            let lr = lr * scale;
            for ((pv, &gv), vv) in p.data_mut().iter_mut().zip(g.data()).zip(v.iter_mut()) {
                *vv = self.momentum * *vv + (gv + self.weight_decay * *pv);
                *pv -= lr * *vv;
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phase {
    Warmup,
    Adapt,
}

/// One logged optimization step.
#[derive(Debug, Clone, PartialEq)]
pub struct StepLog {
    pub step: usize,
    pub phase: Phase,
    pub lr: f64,
    pub report: LossReport,
    /// Effective loss weights of the step.
    pub weights: LossWeights,
    pub val_miou: Option<f64>,
}

/// Receives every step as it completes, with the parameters after the
/// update.
pub trait Observer {
    fn on_step(&mut self, log: &StepLog, params: &SegNetParams) -> Result<()>;
}

impl<F: FnMut(&StepLog, &SegNetParams) -> Result<()>> Observer for F {
    fn on_step(&mut self, log: &StepLog, params: &SegNetParams) -> Result<()> {
        self(log, params)
    }
}

/// Discards every step.
pub struct NoObserver;

impl Observer for NoObserver {
    fn on_step(&mut self, _: &StepLog, _: &SegNetParams) -> Result<()> {
        Ok(())
    }
}

/// Mutable state of a run.
#[derive(Debug, Clone)]
pub struct TrainState {
    pub step: usize,
    pub lr: f64,
    pub params: SegNetParams,
    /// Exponential moving average (0.99) of the total loss.
    pub running_total: Option<f64>,
    pub best_val: Option<(usize, f64, SegNetParams)>,
}

/// Owns the parameters and optimizer of one run.
#[derive(Clone)]
pub struct Trainer {
    net: SegNet,
    cfg: TrainConfig,
    state: TrainState,
    sgd: Sgd,
    source_order: StreamRng,
    target_order: StreamRng,
    source_aug: StreamRng,
    target_aug: StreamRng,
}

impl Trainer {
    /// Starts a run at `params`. Data order and augmentation draw from the
    /// `train.*` and `augment.*` streams of the config seed.
    pub fn new(net: SegNet, cfg: TrainConfig, params: SegNetParams) -> Result<Self> {
        cfg.validate()?;
        let mut sgd = Sgd::new(&params, cfg.momentum, cfg.weight_decay);
        let n = params.tensors().len();
        sgd.set_lr_scale(n - 2, cfg.head_lr_mult);
        sgd.set_lr_scale(n - 1, cfg.head_lr_mult);
        let seed = cfg.seed;
        Ok(Trainer {
            net,
            state: TrainState {
                step: 0,
                lr: cfg.base_lr,
                params,
                running_total: None,
                best_val: None,
            },
            cfg,
            sgd,
            source_order: rng::stream(seed, "train.source"),
            target_order: rng::stream(seed, "train.target"),
            source_aug: rng::stream(seed, "augment.source"),
            target_aug: rng::stream(seed, "augment.target"),
        })
    }

    pub fn state(&self) -> &TrainState {
        &self.state
    }

    pub fn params(&self) -> &SegNetParams {
        &self.state.params
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    /// Replaces the adaptation objective, e.g. to branch ablation arms off
    /// one warmed-up trainer.
    pub fn set_objective(&mut self, weights: LossWeights, flags: ObjectiveFlags) -> Result<()> {
        weights.validate()?;
        self.cfg.weights = weights;
        self.cfg.flags = flags;
        Ok(())
    }

    pub fn into_state(self) -> TrainState {
        self.state
    }

    fn draw(order: &mut StreamRng, aug: &mut StreamRng, data: &[Sample], mirror: bool) -> Sample {
        let idx = order.gen_range(0..data.len());
        let aug_seed = aug.next_u64();
        if mirror {
            augment(&data[idx], aug_seed)
        } else {
            data[idx].clone()
        }
    }

    fn advance(&mut self, grads: &[Tensor]) {
        self.state.step += 1;
        let lr = poly_lr(self.cfg.base_lr, self.state.step, self.cfg.total_steps(), self.cfg.poly_power);
        self.state.lr = lr;
        self.sgd.step(&mut self.state.params, grads, lr);
    }

    fn record(&mut self, total: f64) {
        self.state.running_total = Some(match self.state.running_total {
            None => total,
            Some(avg) => 0.99 * avg + 0.01 * total,
        });
    }

    /// One supervised step on a source image.
    pub fn warmup_step(&mut self, source: &Sample) -> Result<StepLog> {
        let labels = source_labels(source)?;
        let mut graph = Graph::new();
        let bound = self.state.params.bind(&mut graph, true);
        let x = graph.constant(source.image.clone());
        let f = self.net.encode(&mut graph, &bound, x)?;
        let logits = self.net.decode(&mut graph, &bound, f)?;
        let ce = cross_entropy(&mut graph, logits, labels)?;
        let value = graph.value(ce).item();
        let report = LossReport::assemble(value, 0.0, 0.0, 0.0, 0.0, &LossWeights::ZERO);
        if !value.is_finite() {
            return Err(Error::NumericAbort {
                step: self.state.step + 1,
                report,
            });
        }
        graph.backward(ce)?;
        let grads = bound.grads(&graph);
        self.advance(&grads);
        self.record(value);
        Ok(StepLog {
            step: self.state.step,
            phase: Phase::Warmup,
            lr: self.state.lr,
            report,
            weights: LossWeights::ZERO,
            val_miou: None,
        })
    }

    /// One joint step on a source/target pair.
    pub fn adapt_step(&mut self, source: &Sample, target: &Sample) -> Result<StepLog> {
        let labels = source_labels(source)?;
        let mut graph = Graph::new();
        let bound = self.state.params.bind(&mut graph, true);
        let forward = |graph: &mut Graph, image: &Tensor| -> Result<DomainForward> {
            let x = graph.constant(image.clone());
            let features = self.net.encode(graph, &bound, x)?;
            let logits = self.net.decode(graph, &bound, features)?;
            Ok(DomainForward { features, logits })
        };
        let src = forward(&mut graph, &source.image)?;
        let tgt = forward(&mut graph, &target.image)?;
        let objective = total_loss(&mut graph, src, labels, tgt, &self.cfg.weights, &self.cfg.flags)?;
        if !objective.report.is_finite() {
            return Err(Error::NumericAbort {
                step: self.state.step + 1,
                report: objective.report,
            });
        }
        graph.backward(objective.total)?;
        let grads = bound.grads(&graph);
        self.advance(&grads);
        self.record(objective.report.total);
        Ok(StepLog {
            step: self.state.step,
            phase: Phase::Adapt,
            lr: self.state.lr,
            report: objective.report,
            weights: objective.weights,
            val_miou: None,
        })
    }

    /// Runs `warmup_steps` supervised steps on `source`.
    pub fn warmup(&mut self, source: &[Sample], observer: &mut dyn Observer) -> Result<()> {
        if self.cfg.warmup_steps > 0 && source.is_empty() {
            return Err(Error::EmptyInput("source split"));
        }
        for _ in 0..self.cfg.warmup_steps {
            let s = Self::draw(&mut self.source_order, &mut self.source_aug, source, self.cfg.mirror);
            let log = self.warmup_step(&s)?;
            observer.on_step(&log, &self.state.params)?;
        }
        Ok(())
    }

    /// Runs `adapt_steps` joint steps, validating every `eval_every` steps
    /// and on the last step when `val` is non-empty. The best validation
    /// snapshot is kept in the state.
    pub fn adapt(&mut self, source: &[Sample], target: &[Sample], val: &[Sample], observer: &mut dyn Observer) -> Result<()> {
        if self.cfg.adapt_steps > 0 && (source.is_empty() || target.is_empty()) {
            return Err(Error::EmptyInput("source or target split"));
        }
        for k in 1..=self.cfg.adapt_steps {
            let s = Self::draw(&mut self.source_order, &mut self.source_aug, source, self.cfg.mirror);
            let t = Self::draw(&mut self.target_order, &mut self.target_aug, target, self.cfg.mirror);
            let mut log = self.adapt_step(&s, &t)?;
            let due = self.cfg.eval_every > 0 && (k % self.cfg.eval_every == 0 || k == self.cfg.adapt_steps);
            if due && !val.is_empty() {
                let miou = evaluate(&self.net, &self.state.params, val)?.iou.miou;
                log.val_miou = Some(miou);
                let better = self.state.best_val.as_ref().map_or(true, |(_, best, _)| miou > *best);
                if better {
                    self.state.best_val = Some((self.state.step, miou, self.state.params.clone()));
                }
            }
            observer.on_step(&log, &self.state.params)?;
        }
        Ok(())
    }
}

fn source_labels(sample: &Sample) -> Result<&LabelMap> {
    sample.labels.as_ref().ok_or(Error::EmptyInput("source sample has no labels"))
}

/// Predictions and features of a labelled split.
#[derive(Debug, Clone)]
pub struct Evaluation {
    pub confusion: ConfusionMatrix,
    pub iou: IouReport,
    /// Encoder output per image.
    pub features: Vec<Tensor>,
    /// Ground truth at feature resolution per image.
    pub feature_labels: Vec<LabelMap>,
    /// Predicted label map per image.
    pub predictions: Vec<LabelMap>,
}

/// Runs the network over a labelled split without touching the parameters.
pub fn evaluate(net: &SegNet, params: &SegNetParams, split: &[Sample]) -> Result<Evaluation> {
    if split.is_empty() {
        return Err(Error::EmptyInput("evaluation split"));
    }
    let cfg = net.config();
    let mut confusion = ConfusionMatrix::new(cfg.num_classes);
    let mut features = Vec::with_capacity(split.len());
    let mut feature_labels = Vec::with_capacity(split.len());
    let mut predictions = Vec::with_capacity(split.len());
    for sample in split {
        let labels = sample
            .labels
            .as_ref()
            .ok_or(Error::EmptyInput("evaluation sample has no labels"))?;
        let (f, logits) = net.infer(params, &sample.image)?;
        let pred = argmax_classes(&logits)?;
        confusion.add(labels, &pred)?;
        feature_labels.push(labels.downsample(cfg.feature_height(), cfg.feature_width())?);
        features.push(f);
        predictions.push(pred);
    }
    let iou = iou(&confusion);
    Ok(Evaluation {
        confusion,
        iou,
        features,
        feature_labels,
        predictions,
    })
}
