use super::EngineError;

/// Row-major `[batch, length, channels]` activations.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchTensor {
    pub batch: usize,
    pub length: usize,
    pub channels: usize,
    pub data: Vec<f64>,
}

impl BatchTensor {
    pub fn zeros(batch: usize, length: usize, channels: usize) -> Self {
        Self {
            batch,
            length,
            channels,
            data: vec![0.0; batch * length * channels],
        }
    }

    pub fn from_vec(batch: usize, length: usize, channels: usize, data: Vec<f64>) -> Result<Self, EngineError> {
        if data.len() != batch * length * channels {
            return Err(EngineError::ShapeMismatch(format!(
                "{} values for shape [{batch}, {length}, {channels}]",
                data.len()
            )));
        }
        Ok(Self {
            batch,
            length,
            channels,
            data,
        })
    }

    pub fn sample_len(&self) -> usize {
        self.length * self.channels
    }

    pub fn sample(&self, n: usize) -> &[f64] {
        let s = self.sample_len();
        &self.data[n * s..(n + 1) * s]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Samples `range` as a new tensor.
    pub fn slice_batch(&self, start: usize, end: usize) -> Self {
        let s = self.sample_len();
        Self {
            batch: end - start,
            length: self.length,
            channels: self.channels,
            data: self.data[start * s..end * s].to_vec(),
        }
    }
}
