use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::metrics::{argmax, predict_net};
use super::model::{loss_and_grad_net, Network};
use super::{BatchTensor, EngineError, ModelWeights};
use crate::arch::Architecture;
use crate::session::Dataset;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub max_epochs: usize,
    pub batch_size: usize,
    pub initial_lr: f64,
    pub plateau_patience: usize,
    pub plateau_factor: f64,
    pub min_lr: f64,
    pub early_stop_patience: usize,
    pub multi_start: usize,
    pub seed: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_epsilon: f64,
    /// Weight of the old value in the running batch-norm statistics.
    pub bn_momentum: f64,
    /// Holdout fraction used when a single dataset is split into train/validation.
    pub validation_split: f64,
    /// Optional wall-clock cap per training run. Makes results timing dependent.
    pub max_seconds: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            max_epochs: 100,
            batch_size: 128,
            initial_lr: 1e-3,
            plateau_patience: 5,
            plateau_factor: 0.5,
            min_lr: 1e-5,
            early_stop_patience: 10,
            multi_start: 3,
            seed: 0,
            beta1: 0.9,
            beta2: 0.999,
            adam_epsilon: 1e-7,
            bn_momentum: 0.9,
            validation_split: 0.2,
            max_seconds: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), EngineError> {
        let bad = |m: &str| Err(EngineError::InvalidConfig(m.to_string()));
        if self.max_epochs == 0 || self.batch_size == 0 || self.multi_start == 0 {
            return bad("max_epochs, batch_size and multi_start must be positive");
        }
        if self.plateau_patience == 0 || self.early_stop_patience == 0 {
            return bad("patience values must be positive");
        }
        if !(self.initial_lr > 0.0 && self.min_lr > 0.0) {
            return bad("learning rates must be positive");
        }
        if !(self.plateau_factor > 0.0 && self.plateau_factor < 1.0) {
            return bad("plateau_factor must be in (0, 1)");
        }
        if !(0.0..1.0).contains(&self.bn_momentum) {
            return bad("bn_momentum must be in [0, 1)");
        }
        if !(0.0..1.0).contains(&self.validation_split) {
            return bad("validation_split must be in [0, 1)");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub train_loss: f64,
    pub train_accuracy: f64,
    pub val_loss: f64,
    pub val_accuracy: f64,
    pub lr: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Weights from the epoch with the lowest validation loss.
    pub weights: ModelWeights,
    pub history: Vec<EpochStats>,
    pub best_epoch: usize,
    pub val_loss: f64,
    pub val_accuracy: f64,
    pub seed: u64,
    pub seconds: f64,
}

/// Scaled `[n, len, 1]` batch and labels for the given sample indices.
pub fn to_batch(data: &Dataset, indices: &[usize]) -> (BatchTensor, Vec<usize>) {
    let len = data.input_len;
    let mut x = Vec::with_capacity(indices.len() * len);
    let mut labels = Vec::with_capacity(indices.len());
    for &i in indices {
        let s = &data.samples[i];
        x.extend(s.bytes.iter().map(|&b| b as f64 / 255.0));
        labels.push(s.label as usize);
    }
    (
        BatchTensor {
            batch: indices.len(),
            length: len,
            channels: 1,
            data: x,
        },
        labels,
    )
}

/// Plateau learning-rate reduction and early stopping on validation loss.
#[derive(Debug, Clone)]
pub(crate) struct Monitor {
    pub lr: f64,
    best: f64,
    plateau_wait: usize,
    stop_wait: usize,
    factor: f64,
    min_lr: f64,
    plateau_patience: usize,
    stop_patience: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct Observation {
    pub improved: bool,
    pub reduced_lr: bool,
    pub stop: bool,
}

impl Monitor {
    pub fn new(cfg: &TrainConfig) -> Self {
        Self {
            lr: cfg.initial_lr,
            best: f64::INFINITY,
            plateau_wait: 0,
            stop_wait: 0,
            factor: cfg.plateau_factor,
            min_lr: cfg.min_lr,
            plateau_patience: cfg.plateau_patience,
            stop_patience: cfg.early_stop_patience,
        }
    }

    pub fn observe(&mut self, val_loss: f64) -> Observation {
        let improved = val_loss < self.best;
        let mut reduced_lr = false;
        if improved {
            self.best = val_loss;
            self.plateau_wait = 0;
            self.stop_wait = 0;
        } else {
            self.plateau_wait += 1;
            self.stop_wait += 1;
            if self.plateau_wait >= self.plateau_patience {
                let next = (self.lr * self.factor).max(self.min_lr);
                reduced_lr = next < self.lr;
                self.lr = next;
                self.plateau_wait = 0;
            }
        }
        Observation {
            improved,
            reduced_lr,
            stop: self.stop_wait >= self.stop_patience,
        }
    }
}

struct Adam {
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: i32,
    beta1: f64,
    beta2: f64,
    eps: f64,
}

impl Adam {
    fn new(w: &ModelWeights, cfg: &TrainConfig) -> Self {
        let zeros: Vec<Vec<f64>> = w.trainable().iter().map(|s| vec![0.0; s.len()]).collect();
        Self {
            m: zeros.clone(),
            v: zeros,
            t: 0,
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            eps: cfg.adam_epsilon,
        }
    }

    fn step(&mut self, w: &mut ModelWeights, g: &ModelWeights, lr: f64) {
        self.t += 1;
        let lr_t = lr * (1.0 - self.beta2.powi(self.t)).sqrt() / (1.0 - self.beta1.powi(self.t));
        for (((p, gs), m), v) in w
            .trainable_mut()
            .into_iter()
            .zip(g.trainable())
            .zip(&mut self.m)
            .zip(&mut self.v)
        {
            for i in 0..p.len() {
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * gs[i];
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * gs[i] * gs[i];
                p[i] -= lr_t * m[i] / (v[i].sqrt() + self.eps);
            }
        }
    }
}

fn update_running_stats(w: &mut ModelWeights, stats: &[&super::layers::BnBatchStats], momentum: f64) {
    for (b, s) in w.blocks.iter_mut().zip(stats) {
        let unbias = if s.count > 1 {
            s.count as f64 / (s.count - 1) as f64
        } else {
            1.0
        };
        for c in 0..b.out_channels {
            b.running_mean[c] = momentum * b.running_mean[c] + (1.0 - momentum) * s.mean[c];
            b.running_var[c] = momentum * b.running_var[c] + (1.0 - momentum) * s.var[c] * unbias;
        }
    }
}

/// Adam training with plateau LR reduction and early stopping on `val`.
pub fn train(
    arch: &Architecture,
    train_set: &Dataset,
    val_set: &Dataset,
    cfg: &TrainConfig,
    seed: u64,
) -> Result<TrainOutcome, EngineError> {
    cfg.validate()?;
    if train_set.is_empty() {
        return Err(EngineError::EmptyDataset("training set"));
    }
    if val_set.is_empty() {
        return Err(EngineError::EmptyDataset("validation set"));
    }
    for ds in [train_set, val_set] {
        if ds.input_len != arch.input_len {
            return Err(EngineError::ShapeMismatch(format!(
                "dataset input length {} differs from architecture input length {}",
                ds.input_len, arch.input_len
            )));
        }
        if ds.n_classes as usize > arch.n_classes {
            return Err(EngineError::ShapeMismatch(format!(
                "dataset has {} classes, architecture head has {}",
                ds.n_classes, arch.n_classes
            )));
        }
    }
    let started = Instant::now();
    let net = Network::compile(arch)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut weights = ModelWeights::init(arch, &mut rng)?;
    let mut adam = Adam::new(&weights, cfg);
    let mut monitor = Monitor::new(cfg);
    let mut best = (weights.clone(), f64::INFINITY, 0.0, 0usize);
    let mut history = Vec::new();
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let val_labels: Vec<usize> = val_set.samples.iter().map(|s| s.label as usize).collect();

    for epoch in 0..cfg.max_epochs {
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        let mut correct = 0usize;
        for chunk in order.chunks(cfg.batch_size) {
            let (x, labels) = to_batch(train_set, chunk);
            let step = loss_and_grad_net(&net, &weights, &x, &labels, rng.gen())?;
            if !step.loss.is_finite() {
                return Err(EngineError::DivergedLoss { epoch });
            }
            loss_sum += step.loss * chunk.len() as f64;
            let k = step.forward.logits.channels;
            for (row, &y) in step.forward.logits.data.chunks_exact(k).zip(&labels) {
                if argmax(row) == y {
                    correct += 1;
                }
            }
            update_running_stats(&mut weights, &step.forward.batch_stats(), cfg.bn_momentum);
            adam.step(&mut weights, &step.grads, monitor.lr);
        }

        let (preds, val_loss) = match predict_net(&net, &weights, val_set) {
            Ok(r) => r,
            Err(EngineError::NonFiniteActivation { .. }) => return Err(EngineError::DivergedLoss { epoch }),
            Err(e) => return Err(e),
        };
        if !val_loss.is_finite() {
            return Err(EngineError::DivergedLoss { epoch });
        }
        let val_acc = preds.iter().zip(&val_labels).filter(|(p, y)| p == y).count() as f64 / val_labels.len() as f64;
        history.push(EpochStats {
            epoch,
            train_loss: loss_sum / train_set.len() as f64,
            train_accuracy: correct as f64 / train_set.len() as f64,
            val_loss,
            val_accuracy: val_acc,
            lr: monitor.lr,
        });
        let obs = monitor.observe(val_loss);
        if obs.improved {
            best = (weights.clone(), val_loss, val_acc, epoch);
        }
        if obs.stop {
            break;
        }
        if let Some(limit) = cfg.max_seconds {
            if started.elapsed().as_secs_f64() >= limit {
                break;
            }
        }
    }
    let (weights, val_loss, val_accuracy, best_epoch) = best;
    Ok(TrainOutcome {
        weights,
        history,
        best_epoch,
        val_loss,
        val_accuracy,
        seed,
        seconds: started.elapsed().as_secs_f64(),
    })
}

/// SplitMix64 finalizer over `base` and `index`, used for per-run seeds.
pub fn derive_seed(base: u64, index: u64) -> u64 {
    let mut z = base
        .wrapping_add(0x9e37_79b9_7f4a_7c15)
        .wrapping_add(index.wrapping_mul(0xbf58_476d_1ce4_e5b9));
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Index of the best `(val_accuracy, val_loss)` pair: highest accuracy, then
/// lowest loss, then lowest index.
pub fn select_best(scores: &[(f64, f64)]) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (i, &(acc, loss)) in scores.iter().enumerate() {
        best = match best {
            None => Some(i),
            Some(b) => {
                let (bacc, bloss) = scores[b];
                if acc > bacc || (acc == bacc && loss < bloss) {
                    Some(i)
                } else {
                    Some(b)
                }
            }
        };
    }
    best
}

/// Runs `runs` trainings with derived seeds and keeps the best by validation accuracy.
pub fn multi_start_with<F>(runs: usize, base_seed: u64, mut run: F) -> Result<TrainOutcome, EngineError>
where
    F: FnMut(usize, u64) -> Result<TrainOutcome, EngineError>,
{
    if runs == 0 {
        return Err(EngineError::InvalidConfig("multi_start must be positive".into()));
    }
    let mut outcomes = Vec::with_capacity(runs);
    for i in 0..runs {
        let seed = if runs == 1 {
            base_seed
        } else {
            derive_seed(base_seed, i as u64)
        };
        outcomes.push(run(i, seed)?);
    }
    let scores: Vec<(f64, f64)> = outcomes.iter().map(|o| (o.val_accuracy, o.val_loss)).collect();
    let best = select_best(&scores).expect("at least one run");
    Ok(outcomes.swap_remove(best))
}

pub fn multi_start_train(
    arch: &Architecture,
    train_set: &Dataset,
    val_set: &Dataset,
    cfg: &TrainConfig,
) -> Result<TrainOutcome, EngineError> {
    multi_start_with(cfg.multi_start, cfg.seed, |_, seed| {
        train(arch, train_set, val_set, cfg, seed)
    })
}
