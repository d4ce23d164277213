use rand::Rng;

use super::EngineError;
use crate::arch::{infer_shapes, Architecture, LayerKind};

pub const BN_EPSILON: f64 = 1e-5;

/// Parameters of one conv → batch-norm block.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockWeights {
    pub kernel: usize,
    pub in_channels: usize,
    pub out_channels: usize,
    /// `[out_channels][kernel][in_channels]`
    pub conv_w: Vec<f64>,
    pub conv_b: Vec<f64>,
    pub gamma: Vec<f64>,
    pub beta: Vec<f64>,
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
}

impl BlockWeights {
    fn zeros(kernel: usize, in_channels: usize, out_channels: usize) -> Self {
        Self {
            kernel,
            in_channels,
            out_channels,
            conv_w: vec![0.0; out_channels * kernel * in_channels],
            conv_b: vec![0.0; out_channels],
            gamma: vec![0.0; out_channels],
            beta: vec![0.0; out_channels],
            running_mean: vec![0.0; out_channels],
            running_var: vec![0.0; out_channels],
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelWeights {
    pub blocks: Vec<BlockWeights>,
    pub dense_in: usize,
    pub n_classes: usize,
    /// `[n_classes][dense_in]`
    pub dense_w: Vec<f64>,
    pub dense_b: Vec<f64>,
}

impl ModelWeights {
    /// All-zero tensors shaped for `arch`; also used as a gradient accumulator.
    pub fn zeros(arch: &Architecture) -> Result<Self, EngineError> {
        let shapes = infer_shapes(arch)?;
        let mut blocks = Vec::with_capacity(arch.blocks.len());
        let mut dense_in = arch.input_channels;
        for l in &shapes {
            if let LayerKind::Conv { block } = l.kind {
                blocks.push(BlockWeights::zeros(
                    arch.blocks[block].kernel as usize,
                    l.input.channels,
                    l.output.channels,
                ));
            }
            if l.kind == LayerKind::Dense {
                dense_in = l.input.channels;
            }
        }
        Ok(Self {
            blocks,
            dense_in,
            n_classes: arch.n_classes,
            dense_w: vec![0.0; arch.n_classes * dense_in],
            dense_b: vec![0.0; arch.n_classes],
        })
    }

    /// He-uniform conv kernels, LeCun-uniform dense weights, zero biases, γ = 1, β = 0,
    /// running mean 0 and running variance 1.
    pub fn init<R: Rng + ?Sized>(arch: &Architecture, rng: &mut R) -> Result<Self, EngineError> {
        let mut w = Self::zeros(arch)?;
        for b in &mut w.blocks {
            let limit = (6.0 / (b.kernel * b.in_channels) as f64).sqrt();
            b.conv_w.iter_mut().for_each(|v| *v = rng.gen_range(-limit..limit));
            b.gamma.fill(1.0);
            b.running_var.fill(1.0);
        }
        let limit = (3.0 / w.dense_in as f64).sqrt();
        w.dense_w.iter_mut().for_each(|v| *v = rng.gen_range(-limit..limit));
        Ok(w)
    }

    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        z.visit_all_mut(|s| s.fill(0.0));
        z
    }

    /// Trainable tensors in a fixed order: per block conv_w, conv_b, γ, β; then dense_w, dense_b.
    pub fn trainable(&self) -> Vec<&[f64]> {
        let mut v: Vec<&[f64]> = Vec::with_capacity(self.blocks.len() * 4 + 2);
        for b in &self.blocks {
            v.push(&b.conv_w);
            v.push(&b.conv_b);
            v.push(&b.gamma);
            v.push(&b.beta);
        }
        v.push(&self.dense_w);
        v.push(&self.dense_b);
        v
    }

    pub fn trainable_mut(&mut self) -> Vec<&mut [f64]> {
        let mut v: Vec<&mut [f64]> = Vec::with_capacity(self.blocks.len() * 4 + 2);
        for b in &mut self.blocks {
            v.push(&mut b.conv_w);
            v.push(&mut b.conv_b);
            v.push(&mut b.gamma);
            v.push(&mut b.beta);
        }
        v.push(&mut self.dense_w);
        v.push(&mut self.dense_b);
        v
    }

    pub fn trainable_count(&self) -> usize {
        self.trainable().iter().map(|s| s.len()).sum()
    }

    fn visit_all_mut(&mut self, mut f: impl FnMut(&mut [f64])) {
        for b in &mut self.blocks {
            f(&mut b.conv_w);
            f(&mut b.conv_b);
            f(&mut b.gamma);
            f(&mut b.beta);
            f(&mut b.running_mean);
            f(&mut b.running_var);
        }
        f(&mut self.dense_w);
        f(&mut self.dense_b);
    }

    /// Named tensors with their dimensions, in checkpoint order.
    pub fn named(&self) -> Vec<(String, Vec<usize>, &[f64])> {
        let mut out = Vec::new();
        for (i, b) in self.blocks.iter().enumerate() {
            let c = b.out_channels;
            out.push((
                format!("block{i}.conv.weight"),
                vec![c, b.kernel, b.in_channels],
                b.conv_w.as_slice(),
            ));
            out.push((format!("block{i}.conv.bias"), vec![c], b.conv_b.as_slice()));
            out.push((format!("block{i}.bn.gamma"), vec![c], b.gamma.as_slice()));
            out.push((format!("block{i}.bn.beta"), vec![c], b.beta.as_slice()));
            out.push((format!("block{i}.bn.running_mean"), vec![c], b.running_mean.as_slice()));
            out.push((format!("block{i}.bn.running_var"), vec![c], b.running_var.as_slice()));
        }
        out.push((
            "dense.weight".into(),
            vec![self.n_classes, self.dense_in],
            self.dense_w.as_slice(),
        ));
        out.push(("dense.bias".into(), vec![self.n_classes], self.dense_b.as_slice()));
        out
    }

    pub fn named_mut(&mut self) -> Vec<(String, &mut Vec<f64>)> {
        let mut out = Vec::new();
        for (i, b) in self.blocks.iter_mut().enumerate() {
            out.push((format!("block{i}.conv.weight"), &mut b.conv_w));
            out.push((format!("block{i}.conv.bias"), &mut b.conv_b));
            out.push((format!("block{i}.bn.gamma"), &mut b.gamma));
            out.push((format!("block{i}.bn.beta"), &mut b.beta));
            out.push((format!("block{i}.bn.running_mean"), &mut b.running_mean));
            out.push((format!("block{i}.bn.running_var"), &mut b.running_var));
        }
        out.push(("dense.weight".into(), &mut self.dense_w));
        out.push(("dense.bias".into(), &mut self.dense_b));
        out
    }

    /// Checks tensor shapes against `arch`.
    pub fn check_matches(&self, arch: &Architecture) -> Result<(), EngineError> {
        let expected = Self::zeros(arch)?;
        let dims = |w: &ModelWeights| {
            w.named()
                .into_iter()
                .map(|(n, d, s)| (n, d, s.len()))
                .collect::<Vec<_>>()
        };
        if dims(&expected) != dims(self) {
            return Err(EngineError::ShapeMismatch(
                "weights do not match the architecture".into(),
            ));
        }
        Ok(())
    }
}
