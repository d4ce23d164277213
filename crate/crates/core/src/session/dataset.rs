//! `SESS` dataset files.
//!
//! Little-endian layout: `"SESS"` | version u16 | n_classes u16 | input_len u32 |
//! n_samples u64, followed by `label u16 | input_len bytes` per sample.

use std::io::{Read, Write};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use super::SessionVector;

pub const DATASET_MAGIC: &[u8; 4] = b"SESS";
pub const DATASET_VERSION: u16 = 1;
pub const DATASET_HEADER_LEN: usize = 20;

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("bad dataset magic {0:?}")]
    BadMagic([u8; 4]),
    #[error("unsupported dataset version {0}")]
    UnsupportedVersion(u16),
    #[error("sample {index} has length {found}, expected {expected}")]
    LengthMismatch {
        index: usize,
        expected: usize,
        found: usize,
    },
    #[error("sample {index} has label {label} but n_classes is {n_classes}")]
    LabelOutOfRange { index: usize, label: u16, n_classes: u16 },
    #[error("dataset truncated")]
    Truncated,
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Labeled session vectors sharing one input length.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Dataset {
    pub input_len: usize,
    pub n_classes: u16,
    pub samples: Vec<SessionVector>,
}

impl Dataset {
    pub fn new(input_len: usize, n_classes: u16, samples: Vec<SessionVector>) -> Result<Self, DatasetError> {
        let ds = Self {
            input_len,
            n_classes,
            samples,
        };
        ds.validate()?;
        Ok(ds)
    }

    pub fn validate(&self) -> Result<(), DatasetError> {
        for (index, s) in self.samples.iter().enumerate() {
            if s.bytes.len() != self.input_len {
                return Err(DatasetError::LengthMismatch {
                    index,
                    expected: self.input_len,
                    found: s.bytes.len(),
                });
            }
            if s.label >= self.n_classes {
                return Err(DatasetError::LabelOutOfRange {
                    index,
                    label: s.label,
                    n_classes: self.n_classes,
                });
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn class_histogram(&self) -> Vec<usize> {
        let mut h = vec![0; self.n_classes as usize];
        for s in &self.samples {
            h[s.label as usize] += 1;
        }
        h
    }

    fn with_samples(&self, samples: Vec<SessionVector>) -> Self {
        Self {
            input_len: self.input_len,
            n_classes: self.n_classes,
            samples,
        }
    }

    /// Seeded shuffle, then the last `holdout` fraction becomes the second part.
    pub fn split(&self, holdout: f64, seed: u64) -> (Dataset, Dataset) {
        let mut idx: Vec<usize> = (0..self.samples.len()).collect();
        idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let n_hold = ((self.samples.len() as f64) * holdout).round() as usize;
        let cut = self.samples.len() - n_hold.min(self.samples.len());
        let pick = |ids: &[usize]| ids.iter().map(|&i| self.samples[i].clone()).collect();
        (
            self.with_samples(pick(&idx[..cut])),
            self.with_samples(pick(&idx[cut..])),
        )
    }
}

pub fn write_dataset<W: Write>(ds: &Dataset, mut w: W) -> Result<(), DatasetError> {
    ds.validate()?;
    let mut header = Vec::with_capacity(DATASET_HEADER_LEN);
    header.extend_from_slice(DATASET_MAGIC);
    header.extend_from_slice(&DATASET_VERSION.to_le_bytes());
    header.extend_from_slice(&ds.n_classes.to_le_bytes());
    header.extend_from_slice(&(ds.input_len as u32).to_le_bytes());
    header.extend_from_slice(&(ds.samples.len() as u64).to_le_bytes());
    w.write_all(&header)?;
    for s in &ds.samples {
        w.write_all(&s.label.to_le_bytes())?;
        w.write_all(&s.bytes)?;
    }
    w.flush()?;
    Ok(())
}

fn fill<R: Read>(r: &mut R, buf: &mut [u8]) -> Result<(), DatasetError> {
    r.read_exact(buf).map_err(|e| match e.kind() {
        std::io::ErrorKind::UnexpectedEof => DatasetError::Truncated,
        _ => DatasetError::Io(e),
    })
}

pub fn read_dataset<R: Read>(mut r: R) -> Result<Dataset, DatasetError> {
    let mut header = [0u8; DATASET_HEADER_LEN];
    fill(&mut r, &mut header)?;
    let magic = [header[0], header[1], header[2], header[3]];
    if &magic != DATASET_MAGIC {
        return Err(DatasetError::BadMagic(magic));
    }
    let version = u16::from_le_bytes([header[4], header[5]]);
    if version != DATASET_VERSION {
        return Err(DatasetError::UnsupportedVersion(version));
    }
    let n_classes = u16::from_le_bytes([header[6], header[7]]);
    let input_len = u32::from_le_bytes(header[8..12].try_into().unwrap()) as usize;
    let n_samples = u64::from_le_bytes(header[12..20].try_into().unwrap()) as usize;
    let mut samples = Vec::with_capacity(n_samples.min(1 << 20));
    for index in 0..n_samples {
        let mut lb = [0u8; 2];
        fill(&mut r, &mut lb)?;
        let label = u16::from_le_bytes(lb);
        if label >= n_classes {
            return Err(DatasetError::LabelOutOfRange {
                index,
                label,
                n_classes,
            });
        }
        let mut bytes = vec![0u8; input_len];
        fill(&mut r, &mut bytes)?;
        samples.push(SessionVector { bytes, label });
    }
    let mut rest = [0u8; 1];
    if r.read(&mut rest)? != 0 {
        return Err(DatasetError::LengthMismatch {
            index: n_samples,
            expected: 0,
            found: 1,
        });
    }
    Ok(Dataset {
        input_len,
        n_classes,
        samples,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample(len: usize, label: u16, fill: u8) -> SessionVector {
        SessionVector {
            bytes: vec![fill; len],
            label,
        }
    }

    #[test]
    fn round_trip_three() {
        let ds = Dataset::new(16, 4, vec![sample(16, 0, 1), sample(16, 3, 2), sample(16, 1, 255)]).unwrap();
        let mut buf = Vec::new();
        write_dataset(&ds, &mut buf).unwrap();
        assert_eq!(read_dataset(buf.as_slice()).unwrap(), ds);
    }

    #[test]
    fn file_size_formula() {
        let len = 784;
        let ds = Dataset {
            input_len: len,
            n_classes: 11,
            samples: (0..10_000).map(|i| sample(len, (i % 11) as u16, 0)).collect(),
        };
        let mut buf = Vec::new();
        write_dataset(&ds, &mut buf).unwrap();
        assert_eq!(buf.len(), 20 + 10_000 * (2 + len));
    }

    #[test]
    fn label_out_of_range() {
        let ds = Dataset {
            input_len: 4,
            n_classes: 12,
            samples: vec![sample(4, 11, 0)],
        };
        let mut buf = Vec::new();
        write_dataset(&ds, &mut buf).unwrap();
        buf[6..8].copy_from_slice(&11u16.to_le_bytes());
        assert!(matches!(
            read_dataset(buf.as_slice()),
            Err(DatasetError::LabelOutOfRange {
                label: 11,
                n_classes: 11,
                ..
            })
        ));
    }

    #[test]
    fn bad_magic_and_truncation() {
        let ds = Dataset::new(4, 2, vec![sample(4, 1, 9)]).unwrap();
        let mut buf = Vec::new();
        write_dataset(&ds, &mut buf).unwrap();
        let mut bad = buf.clone();
        bad[0] = b'X';
        assert!(matches!(read_dataset(bad.as_slice()), Err(DatasetError::BadMagic(_))));
        buf.pop();
        assert!(matches!(read_dataset(buf.as_slice()), Err(DatasetError::Truncated)));
    }

    #[test]
    fn mismatched_length_rejected_on_write() {
        let ds = Dataset {
            input_len: 4,
            n_classes: 2,
            samples: vec![sample(5, 0, 0)],
        };
        assert!(matches!(
            write_dataset(&ds, Vec::new()),
            Err(DatasetError::LengthMismatch { .. })
        ));
    }

    #[test]
    fn split_partitions() {
        let ds = Dataset::new(2, 2, (0..10).map(|i| sample(2, i % 2, i as u8)).collect()).unwrap();
        let (a, b) = ds.split(0.2, 5);
        assert_eq!((a.len(), b.len()), (8, 2));
        let mut all: Vec<u8> = a.samples.iter().chain(&b.samples).map(|s| s.bytes[0]).collect();
        all.sort();
        assert_eq!(all, (0..10).collect::<Vec<u8>>());
    }
}
