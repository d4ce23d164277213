use super::layers::{self, BnBatchStats};
use super::{BatchTensor, EngineError, ModelWeights, BN_EPSILON};
use crate::arch::{infer_shapes, Architecture, Padding, PoolKind};

/// One step of the compiled layer sequence.
#[derive(Debug, Clone, PartialEq)]
pub enum Op {
    Conv {
        block: usize,
        kernel: usize,
        stride: usize,
        pads: (usize, usize),
        out_channels: usize,
    },
    BatchNorm {
        block: usize,
    },
    Relu,
    Pool {
        kind: PoolKind,
        size: usize,
        stride: usize,
        padding: Padding,
    },
    Dropout {
        rate: f64,
    },
    Gap,
    Dense,
}

impl Op {
    pub fn name(&self) -> &'static str {
        match self {
            Op::Conv { .. } => "conv",
            Op::BatchNorm { .. } => "batchnorm",
            Op::Relu => "relu",
            Op::Pool {
                kind: PoolKind::Max, ..
            } => "maxpool",
            Op::Pool {
                kind: PoolKind::Avg, ..
            } => "avgpool",
            Op::Dropout { .. } => "dropout",
            Op::Gap => "gap",
            Op::Dense => "dense",
        }
    }
}

/// Flattened layer sequence: per block conv → bn → relu → pool? → dropout?, then gap → dense.
#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    pub input_len: usize,
    pub n_classes: usize,
    pub ops: Vec<Op>,
}

impl Network {
    pub fn compile(arch: &Architecture) -> Result<Self, EngineError> {
        if arch.input_channels != 1 {
            return Err(EngineError::ShapeMismatch(
                "only single-channel inputs are supported".into(),
            ));
        }
        // Validates every length along the way.
        infer_shapes(arch)?;
        let mut ops = Vec::new();
        let mut len = arch.input_len;
        for (i, b) in arch.blocks.iter().enumerate() {
            let (k, s) = (b.kernel as usize, b.stride as usize);
            ops.push(Op::Conv {
                block: i,
                kernel: k,
                stride: s,
                pads: b.padding.pads(len, k, s),
                out_channels: b.filters as usize,
            });
            len = b.padding.out_len(len, k, s).expect("checked by infer_shapes");
            ops.push(Op::BatchNorm { block: i });
            ops.push(Op::Relu);
            if let Some(p) = &b.pool {
                ops.push(Op::Pool {
                    kind: p.kind,
                    size: p.size as usize,
                    stride: p.stride as usize,
                    padding: p.padding,
                });
                len = p
                    .padding
                    .out_len(len, p.size as usize, p.stride as usize)
                    .expect("checked by infer_shapes");
            }
            if b.dropout > 0.0 {
                ops.push(Op::Dropout { rate: b.dropout });
            }
        }
        ops.push(Op::Gap);
        ops.push(Op::Dense);
        Ok(Self {
            input_len: arch.input_len,
            n_classes: arch.n_classes,
            ops,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// Batch statistics in batch norm; dropout masks drawn from `dropout_seed`.
    Train { dropout_seed: u64 },
    /// Running statistics; dropout disabled.
    Eval,
}

/// Logits plus everything the backward pass needs.
#[derive(Debug, Clone)]
pub struct ForwardOutput {
    pub logits: BatchTensor,
    /// `activations[i]` is the input of op `i`; the last entry equals `logits`.
    pub activations: Vec<BatchTensor>,
    padded: Vec<Option<BatchTensor>>,
    bn_stats: Vec<Option<BnBatchStats>>,
    masks: Vec<Option<Vec<f64>>>,
    argmax: Vec<Option<Vec<u32>>>,
}

impl ForwardOutput {
    /// Batch statistics per block (train mode only), in block order.
    pub fn batch_stats(&self) -> Vec<&BnBatchStats> {
        self.bn_stats.iter().flatten().collect()
    }
}

fn dropout_seed(base: u64, op: usize) -> u64 {
    base ^ (op as u64 + 1).wrapping_mul(0x9e37_79b9_7f4a_7c15)
}

pub fn forward(
    arch: &Architecture,
    weights: &ModelWeights,
    batch: &BatchTensor,
    mode: Mode,
) -> Result<ForwardOutput, EngineError> {
    let net = Network::compile(arch)?;
    forward_net(&net, weights, batch, mode)
}

pub(crate) fn forward_net(
    net: &Network,
    weights: &ModelWeights,
    batch: &BatchTensor,
    mode: Mode,
) -> Result<ForwardOutput, EngineError> {
    if batch.length != net.input_len || batch.channels != 1 {
        return Err(EngineError::ShapeMismatch(format!(
            "batch is [{}, {}, {}], network expects length {} with 1 channel",
            batch.batch, batch.length, batch.channels, net.input_len
        )));
    }
    if batch.batch == 0 {
        return Err(EngineError::EmptyDataset("empty batch"));
    }
    let n_ops = net.ops.len();
    let mut activations = Vec::with_capacity(n_ops + 1);
    let mut padded = vec![None; n_ops];
    let mut bn_stats = vec![None; n_ops];
    let mut masks = vec![None; n_ops];
    let mut argmax = vec![None; n_ops];
    activations.push(batch.clone());

    for (i, op) in net.ops.iter().enumerate() {
        let x = &activations[i];
        let y = match op {
            Op::Conv {
                block,
                kernel,
                stride,
                pads,
                out_channels,
            } => {
                let w = &weights.blocks[*block];
                if pads.0 + pads.1 > 0 {
                    let xp = layers::pad_length(x, pads.0, pads.1);
                    let y = layers::conv_forward(&xp, &w.conv_w, &w.conv_b, *kernel, *stride, *out_channels);
                    padded[i] = Some(xp);
                    y
                } else {
                    layers::conv_forward(x, &w.conv_w, &w.conv_b, *kernel, *stride, *out_channels)
                }
            }
            Op::BatchNorm { block } => {
                let w = &weights.blocks[*block];
                match mode {
                    Mode::Train { .. } => {
                        let (y, stats) = layers::bn_train_forward(x, &w.gamma, &w.beta, BN_EPSILON);
                        bn_stats[i] = Some(stats);
                        y
                    }
                    Mode::Eval => {
                        layers::bn_eval_forward(x, &w.gamma, &w.beta, &w.running_mean, &w.running_var, BN_EPSILON)
                    }
                }
            }
            Op::Relu => layers::relu_forward(x),
            Op::Pool {
                kind,
                size,
                stride,
                padding,
            } => match kind {
                PoolKind::Max => {
                    let (y, arg) = layers::max_pool_forward(x, *size, *stride, *padding);
                    argmax[i] = Some(arg);
                    y
                }
                PoolKind::Avg => layers::avg_pool_forward(x, *size, *stride, *padding),
            },
            Op::Dropout { rate } => match mode {
                Mode::Train { dropout_seed: seed } => {
                    let mask = layers::dropout_mask(x.data.len(), *rate, dropout_seed(seed, i));
                    let y = layers::apply_mask(x, &mask);
                    masks[i] = Some(mask);
                    y
                }
                Mode::Eval => x.clone(),
            },
            Op::Gap => layers::gap_forward(x),
            Op::Dense => layers::dense_forward(x, &weights.dense_w, &weights.dense_b, net.n_classes),
        };
        if !y.is_finite() {
            return Err(EngineError::NonFiniteActivation {
                layer: i,
                op: op.name().to_string(),
            });
        }
        activations.push(y);
    }
    Ok(ForwardOutput {
        logits: activations.last().cloned().expect("at least one op"),
        activations,
        padded,
        bn_stats,
        masks,
        argmax,
    })
}

/// Row-wise softmax of `[batch, 1, n]` logits.
pub fn softmax(logits: &BatchTensor) -> Vec<Vec<f64>> {
    let k = logits.channels;
    logits
        .data
        .chunks_exact(k)
        .map(|row| {
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = row.iter().map(|v| (v - max).exp()).collect();
            let sum: f64 = exps.iter().sum();
            exps.into_iter().map(|e| e / sum).collect()
        })
        .collect()
}

/// Mean cross-entropy and its gradient w.r.t. the logits.
pub fn softmax_cross_entropy(logits: &BatchTensor, labels: &[usize]) -> Result<(f64, BatchTensor), EngineError> {
    let k = logits.channels;
    if labels.len() != logits.batch {
        return Err(EngineError::ShapeMismatch(format!(
            "{} labels for a batch of {}",
            labels.len(),
            logits.batch
        )));
    }
    let probs = softmax(logits);
    let n = logits.batch as f64;
    let mut loss = 0.0;
    let mut grad = BatchTensor::zeros(logits.batch, 1, k);
    for (i, (p, &y)) in probs.iter().zip(labels).enumerate() {
        if y >= k {
            return Err(EngineError::LabelOutOfRange { label: y, n_classes: k });
        }
        // log-sum-exp form keeps saturated logits finite.
        let row = &logits.data[i * k..(i + 1) * k];
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        loss += lse - row[y];
        for (j, (g, pj)) in grad.data[i * k..(i + 1) * k].iter_mut().zip(p.iter()).enumerate() {
            *g = (pj - if j == y { 1.0 } else { 0.0 }) / n;
        }
    }
    Ok((loss / n, grad))
}

/// Loss, gradient of every trainable tensor, and the forward pass that produced them.
pub struct LossAndGrad {
    pub loss: f64,
    pub grads: ModelWeights,
    pub forward: ForwardOutput,
}

pub fn loss_and_grad(
    arch: &Architecture,
    weights: &ModelWeights,
    batch: &BatchTensor,
    labels: &[usize],
    dropout_seed: u64,
) -> Result<LossAndGrad, EngineError> {
    let net = Network::compile(arch)?;
    loss_and_grad_net(&net, weights, batch, labels, dropout_seed)
}

pub(crate) fn loss_and_grad_net(
    net: &Network,
    weights: &ModelWeights,
    batch: &BatchTensor,
    labels: &[usize],
    dropout_seed: u64,
) -> Result<LossAndGrad, EngineError> {
    let fwd = forward_net(net, weights, batch, Mode::Train { dropout_seed })?;
    let (loss, mut grad) = softmax_cross_entropy(&fwd.logits, labels)?;
    let mut grads = weights.zeros_like();

    for (i, op) in net.ops.iter().enumerate().rev() {
        let x = &fwd.activations[i];
        grad = match op {
            Op::Conv {
                block,
                kernel,
                stride,
                pads,
                ..
            } => {
                let w = &weights.blocks[*block];
                let xp = fwd.padded[i].as_ref().unwrap_or(x);
                let (dxp, dw, db) = layers::conv_backward(xp, &grad, &w.conv_w, *kernel, *stride);
                grads.blocks[*block].conv_w = dw;
                grads.blocks[*block].conv_b = db;
                layers::crop_length(&dxp, pads.0, pads.1)
            }
            Op::BatchNorm { block } => {
                let stats = fwd.bn_stats[i].as_ref().expect("train-mode stats");
                let (dx, dg, dbeta) = layers::bn_backward(x, &grad, &weights.blocks[*block].gamma, stats);
                grads.blocks[*block].gamma = dg;
                grads.blocks[*block].beta = dbeta;
                dx
            }
            Op::Relu => layers::relu_backward(&fwd.activations[i + 1], &grad),
            Op::Pool {
                kind,
                size,
                stride,
                padding,
            } => match kind {
                PoolKind::Max => {
                    let arg = fwd.argmax[i].as_ref().expect("max-pool indices");
                    layers::max_pool_backward(&grad, arg, x.length)
                }
                PoolKind::Avg => layers::avg_pool_backward(&grad, x.length, *size, *stride, *padding),
            },
            Op::Dropout { .. } => {
                let mask = fwd.masks[i].as_ref().expect("dropout mask");
                layers::apply_mask(&grad, mask)
            }
            Op::Gap => layers::gap_backward(&grad, x.length),
            Op::Dense => {
                let (dx, dw, db) = layers::dense_backward(x, &grad, &weights.dense_w);
                grads.dense_w = dw;
                grads.dense_b = db;
                dx
            }
        };
    }
    Ok(LossAndGrad {
        loss,
        grads,
        forward: fwd,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::arch::BlockSpec;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn zero_network_gives_uniform_softmax() {
        let arch = Architecture::reference(196);
        let w = ModelWeights::zeros(&arch).unwrap();
        let x = BatchTensor::from_vec(2, 196, 1, (0..392).map(|v| (v % 7) as f64 / 7.0).collect()).unwrap();
        let out = forward(&arch, &w, &x, Mode::Eval).unwrap();
        assert!(out.logits.data.iter().all(|&v| v == 0.0));
        for row in softmax(&out.logits) {
            for p in row {
                assert!((p - 1.0 / 11.0).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn uniform_logits_loss_is_ln_k() {
        let logits = BatchTensor::zeros(3, 1, 11);
        let (loss, _) = softmax_cross_entropy(&logits, &[0, 5, 10]).unwrap();
        assert!((loss - 11f64.ln()).abs() < 1e-12);
        assert!((loss - 2.3979).abs() < 1e-4);
    }

    #[test]
    fn saturated_correct_logits() {
        let logits = BatchTensor::from_vec(2, 1, 2, vec![50.0, -50.0, -50.0, 50.0]).unwrap();
        let (loss, g) = softmax_cross_entropy(&logits, &[0, 1]).unwrap();
        assert!(loss < 1e-12);
        assert!(g.data.iter().all(|v| v.abs() < 1e-12));
    }

    #[test]
    fn label_out_of_range_rejected() {
        let logits = BatchTensor::zeros(1, 1, 3);
        assert!(matches!(
            softmax_cross_entropy(&logits, &[3]),
            Err(EngineError::LabelOutOfRange { label: 3, n_classes: 3 })
        ));
    }

    #[test]
    fn identity_kernel_broadcasts_input() {
        let arch = Architecture::new(8, vec![BlockSpec::conv(3, 1, 1, Padding::Valid)], 2);
        let mut w = ModelWeights::zeros(&arch).unwrap();
        w.blocks[0].conv_w.fill(1.0);
        let net = Network::compile(&arch).unwrap();
        let x = BatchTensor::from_vec(1, 8, 1, (0..8).map(|v| v as f64).collect()).unwrap();
        let out = forward_net(&net, &w, &x, Mode::Eval).unwrap();
        let conv_out = &out.activations[1];
        for t in 0..8 {
            for c in 0..3 {
                assert_eq!(conv_out.data[t * 3 + c], t as f64);
            }
        }
    }

    #[test]
    fn wrong_input_length() {
        let arch = Architecture::reference(196);
        let w = ModelWeights::zeros(&arch).unwrap();
        let x = BatchTensor::zeros(1, 200, 1);
        assert!(matches!(
            forward(&arch, &w, &x, Mode::Eval),
            Err(EngineError::ShapeMismatch(_))
        ));
    }

    #[test]
    fn nonfinite_input_detected() {
        let arch = Architecture::new(16, vec![BlockSpec::conv(16, 3, 1, Padding::Same)], 2);
        let w = ModelWeights::init(&arch, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let mut x = BatchTensor::zeros(1, 16, 1);
        x.data[3] = f64::NAN;
        assert!(matches!(
            forward(&arch, &w, &x, Mode::Eval),
            Err(EngineError::NonFiniteActivation { layer: 0, .. })
        ));
    }

    #[test]
    fn compiled_op_order() {
        let arch = Architecture::new(
            64,
            vec![BlockSpec::conv(16, 3, 1, Padding::Same)
                .with_pool(PoolKind::Max, 2, 2, Padding::Valid)
                .with_dropout(0.2)],
            2,
        );
        let names: Vec<&str> = Network::compile(&arch).unwrap().ops.iter().map(Op::name).collect();
        assert_eq!(
            names,
            ["conv", "batchnorm", "relu", "maxpool", "dropout", "gap", "dense"]
        );
    }
}
