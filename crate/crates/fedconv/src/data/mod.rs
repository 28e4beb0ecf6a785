//! Datasets, loaders, experiment configuration, and metrics emission.

mod config;
mod digits;
mod idx;
mod metrics;
mod synth;

pub use config::{mnist_dir, 
    DatasetConfig, ExperimentConfig, FlagConfig, HyperConfig, LayerConfig, ModelConfig,
    SrAssignment,
};
pub use digits::gen_digits;
pub use idx::load_idx;
pub use metrics::{emit_metrics, MetricsFormat};
pub use synth::gen_synthetic;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Labeled samples: images `[N,C,H,W]` or flat vectors `[N,D]`.
#[derive(Clone, Debug)]
pub struct Dataset {
    samples: Tensor,
    labels: Vec<usize>,
    class_count: usize,
}

impl Dataset {
    pub fn new(samples: Tensor, labels: Vec<usize>, class_count: usize) -> Result<Self> {
        if labels.is_empty() {
            return Err(Error::Input("dataset must contain at least one sample".into()));
        }
        if samples.shape()[0] != labels.len() {
            return Err(Error::Input(format!(
                "{} samples but {} labels",
                samples.shape()[0],
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= class_count) {
            return Err(Error::Input(format!(
                "label {bad} out of range [0,{class_count})"
            )));
        }
        Ok(Dataset {
            samples,
            labels,
            class_count,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn class_count(&self) -> usize {
        self.class_count
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn samples(&self) -> &Tensor {
        &self.samples
    }

    /// Shape of one sample (without the leading batch axis).
    pub fn sample_shape(&self) -> &[usize] {
        &self.samples.shape()[1..]
    }

    /// Gather rows by index into a batch tensor plus labels.
    pub fn gather(&self, indices: &[usize]) -> (Tensor, Vec<usize>) {
        let row = self.samples.len() / self.len();
        let mut data = Vec::with_capacity(indices.len() * row);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            data.extend_from_slice(&self.samples.data()[i * row..(i + 1) * row]);
            labels.push(self.labels[i]);
        }
        let mut shape = self.samples.shape().to_vec();
        shape[0] = indices.len();
        (Tensor::new(shape, data).expect("gather shape"), labels)
    }

    /// New dataset holding the given rows.
    pub fn subset(&self, indices: &[usize]) -> Result<Dataset> {
        if indices.is_empty() {
            return Err(Error::Usage("subset of zero samples".into()));
        }
        let (samples, labels) = self.gather(indices);
        Dataset::new(samples, labels, self.class_count)
    }

    /// Reduce spatial resolution by `factor` with average pooling.
    /// `factor` must divide both spatial dimensions.
    pub fn downsample(&self, factor: usize) -> Result<Dataset> {
        if factor == 1 {
            return Ok(self.clone());
        }
        let shape = self.samples.shape();
        if shape.len() != 4 {
            return Err(Error::Usage("downsample expects [N,C,H,W] samples".into()));
        }
        let (n, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
        if h % factor != 0 || w % factor != 0 {
            return Err(Error::Config(format!(
                "downsample factor {factor} does not divide {h}x{w}"
            )));
        }
        let (nh, nw) = (h / factor, w / factor);
        let mut data = vec![0.0; n * c * nh * nw];
        let inv = 1.0 / (factor * factor) as f64;
        for i in 0..n {
            for ch in 0..c {
                let src = &self.samples.data()[(i * c + ch) * h * w..(i * c + ch + 1) * h * w];
                let dst = &mut data[(i * c + ch) * nh * nw..(i * c + ch + 1) * nh * nw];
                for y in 0..nh {
                    for x in 0..nw {
                        let mut acc = 0.0;
                        for dy in 0..factor {
                            for dx in 0..factor {
                                acc += src[(y * factor + dy) * w + (x * factor + dx)];
                            }
                        }
                        dst[y * nw + x] = acc * inv;
                    }
                }
            }
        }
        Dataset::new(
            Tensor::new(vec![n, c, nh, nw], data)?,
            self.labels.clone(),
            self.class_count,
        )
    }
}
