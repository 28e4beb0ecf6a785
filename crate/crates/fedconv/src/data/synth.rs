//! Synthetic Gaussian-blob data for fast, dependency-free tests.

use super::Dataset;
use crate::error::{Error, Result};
use crate::rng::rng_from;
use crate::tensor::Tensor;
use rand::seq::SliceRandom;
use rand_distr::{Distribution, StandardNormal};

/// Gaussian class blobs in flattened space, reshaped to `shape` per sample.
/// Classes become linearly separable as `separation` grows.
pub fn gen_synthetic(
    classes: usize,
    per_class: usize,
    shape: &[usize],
    separation: f64,
    seed: u64,
) -> Result<Dataset> {
    if separation <= 0.0 {
        return Err(Error::Config("separation must be positive".into()));
    }
    if classes == 0 || per_class == 0 {
        return Err(Error::Config("need at least one class and one sample".into()));
    }
    let dim: usize = shape.iter().product();
    let mut rng = rng_from(seed, "synthetic");
    let normal = StandardNormal;

    // one random unit direction per class, scaled by the separation
    let centers: Vec<Vec<f64>> = (0..classes)
        .map(|_| {
            let mut v: Vec<f64> = (0..dim).map(|_| normal.sample(&mut rng)).collect();
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
            v.iter_mut().for_each(|x| *x *= separation / norm);
            v
        })
        .collect();

    let n = classes * per_class;
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);

    let mut data = vec![0.0; n * dim];
    let mut labels = vec![0usize; n];
    for (slot, &idx) in order.iter().enumerate() {
        let class = idx % classes;
        labels[slot] = class;
        let row = &mut data[slot * dim..(slot + 1) * dim];
        for (j, v) in row.iter_mut().enumerate() {
            let noise: f64 = normal.sample(&mut rng);
            *v = centers[class][j] + noise;
        }
    }
    let mut full_shape = vec![n];
    full_shape.extend_from_slice(shape);
    Dataset::new(Tensor::new(full_shape, data)?, labels, classes)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sample_count_and_shape() {
        let d = gen_synthetic(2, 10, &[4], 3.0, 1).unwrap();
        assert_eq!(d.len(), 20);
        assert_eq!(d.samples().shape(), &[20, 4]);
        let img = gen_synthetic(3, 2, &[1, 2, 2], 3.0, 1).unwrap();
        assert_eq!(img.samples().shape(), &[6, 1, 2, 2]);
    }

    #[test]
    fn same_seed_same_data() {
        let a = gen_synthetic(3, 5, &[6], 5.0, 9).unwrap();
        let b = gen_synthetic(3, 5, &[6], 5.0, 9).unwrap();
        assert_eq!(a.samples(), b.samples());
        assert_eq!(a.labels(), b.labels());
        let c = gen_synthetic(3, 5, &[6], 5.0, 10).unwrap();
        assert_ne!(a.samples(), c.samples());
    }

    #[test]
    fn high_separation_is_nearest_center_separable() {
        // with large separation every sample is closest to its own center
        let d = gen_synthetic(4, 25, &[8], 12.0, 3).unwrap();
        let mut centers = vec![vec![0.0; 8]; 4];
        let mut counts = vec![0usize; 4];
        for i in 0..d.len() {
            let row = &d.samples().data()[i * 8..(i + 1) * 8];
            let c = d.labels()[i];
            counts[c] += 1;
            for j in 0..8 {
                centers[c][j] += row[j];
            }
        }
        for (c, count) in counts.iter().enumerate() {
            centers[c].iter_mut().for_each(|v| *v /= *count as f64);
        }
        let mut correct = 0;
        for i in 0..d.len() {
            let row = &d.samples().data()[i * 8..(i + 1) * 8];
            let best = (0..4)
                .min_by(|&a, &b| {
                    let da: f64 = row.iter().zip(&centers[a]).map(|(x, c)| (x - c).powi(2)).sum();
                    let db: f64 = row.iter().zip(&centers[b]).map(|(x, c)| (x - c).powi(2)).sum();
                    da.partial_cmp(&db).unwrap()
                })
                .unwrap();
            if best == d.labels()[i] {
                correct += 1;
            }
        }
        assert_eq!(correct, d.len());
    }
}
