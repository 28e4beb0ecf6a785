//! Procedurally rendered handwritten-style digits.
//!
//! Stands in for MNIST when the real IDX files are not on disk: ten stroke
//! skeletons are rasterized under random rotation, scaling, translation,
//! stroke width, and pixel noise. Rendering is deterministic in the seed.

use super::Dataset;
use crate::error::{Error, Result};
use crate::rng::rng_from;
use crate::tensor::Tensor;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;

type Stroke = Vec<(f64, f64)>;

fn ellipse(cx: f64, cy: f64, rx: f64, ry: f64, n: usize) -> Stroke {
    (0..=n)
        .map(|i| {
            let a = i as f64 / n as f64 * std::f64::consts::TAU;
            (cx + rx * a.cos(), cy + ry * a.sin())
        })
        .collect()
}

/// Stroke skeleton of a digit in unit coordinates (x right, y down).
fn digit_strokes(d: usize) -> Vec<Stroke> {
    match d {
        0 => vec![ellipse(0.5, 0.5, 0.26, 0.36, 20)],
        1 => vec![vec![(0.38, 0.26), (0.54, 0.13), (0.54, 0.87)]],
        2 => vec![vec![
            (0.29, 0.32),
            (0.32, 0.21),
            (0.42, 0.14),
            (0.54, 0.13),
            (0.66, 0.18),
            (0.71, 0.28),
            (0.68, 0.39),
            (0.30, 0.85),
            (0.74, 0.85),
        ]],
        3 => vec![
            vec![
                (0.30, 0.20),
                (0.39, 0.13),
                (0.53, 0.12),
                (0.65, 0.18),
                (0.68, 0.29),
                (0.61, 0.41),
                (0.49, 0.46),
            ],
            vec![
                (0.49, 0.46),
                (0.63, 0.52),
                (0.70, 0.64),
                (0.66, 0.77),
                (0.53, 0.86),
                (0.38, 0.86),
                (0.29, 0.78),
            ],
        ],
        4 => vec![
            vec![(0.62, 0.12), (0.26, 0.62), (0.78, 0.62)],
            vec![(0.62, 0.12), (0.62, 0.88)],
        ],
        5 => vec![vec![
            (0.70, 0.14),
            (0.32, 0.14),
            (0.30, 0.45),
            (0.47, 0.40),
            (0.61, 0.43),
            (0.69, 0.53),
            (0.70, 0.66),
            (0.61, 0.79),
            (0.45, 0.86),
            (0.31, 0.80),
        ]],
        6 => vec![
            vec![(0.62, 0.13), (0.48, 0.23), (0.37, 0.38), (0.32, 0.55)],
            ellipse(0.50, 0.67, 0.185, 0.185, 14),
        ],
        7 => vec![vec![(0.26, 0.14), (0.74, 0.14), (0.42, 0.87)]],
        8 => vec![
            ellipse(0.5, 0.31, 0.17, 0.17, 14),
            ellipse(0.5, 0.68, 0.20, 0.20, 14),
        ],
        9 => vec![
            ellipse(0.5, 0.33, 0.185, 0.185, 14),
            vec![(0.685, 0.35), (0.66, 0.60), (0.58, 0.88)],
        ],
        _ => unreachable!("digit out of range"),
    }
}

fn dist_to_segment(p: (f64, f64), a: (f64, f64), b: (f64, f64)) -> f64 {
    let (vx, vy) = (b.0 - a.0, b.1 - a.1);
    let (wx, wy) = (p.0 - a.0, p.1 - a.1);
    let len2 = vx * vx + vy * vy;
    let t = if len2 > 0.0 {
        ((wx * vx + wy * vy) / len2).clamp(0.0, 1.0)
    } else {
        0.0
    };
    let (dx, dy) = (wx - t * vx, wy - t * vy);
    (dx * dx + dy * dy).sqrt()
}

struct Jitter {
    angle: f64,
    shear: f64,
    scale_x: f64,
    scale_y: f64,
    tx: f64,
    ty: f64,
    thickness: f64,
    intensity: f64,
    /// A short distractor stroke: (x0, y0, x1, y1, ink).
    clutter: (f64, f64, f64, f64, f64),
}

fn render(digit: usize, j: &Jitter, noise: &[f64], side: usize) -> Vec<f64> {
    let strokes = digit_strokes(digit);
    let (sin, cos) = j.angle.sin_cos();
    let tf = |(x, y): (f64, f64)| -> (f64, f64) {
        let (cx, cy) = (x - 0.5, y - 0.5);
        let (sx, sy) = ((cx + j.shear * cy) * j.scale_x, cy * j.scale_y);
        (
            0.5 + cos * sx - sin * sy + j.tx,
            0.5 + sin * sx + cos * sy + j.ty,
        )
    };
    let mut strokes: Vec<Stroke> = strokes
        .into_iter()
        .map(|s| s.into_iter().map(tf).collect())
        .collect();
    let (cx0, cy0, cx1, cy1, clutter_ink) = j.clutter;
    strokes.push(vec![(cx0, cy0), (cx1, cy1)]);
    let inks: Vec<f64> = strokes
        .iter()
        .enumerate()
        .map(|(i, _)| if i + 1 == strokes.len() { clutter_ink } else { j.intensity })
        .collect();

    let mut img = vec![0.0; side * side];
    let falloff = 0.6 * j.thickness;
    for (py, row) in img.chunks_mut(side).enumerate() {
        let v = (py as f64 + 0.5) / side as f64;
        for (px, out) in row.iter_mut().enumerate() {
            let u = (px as f64 + 0.5) / side as f64;
            let mut best = 0.0f64;
            for (s, &ink) in strokes.iter().zip(&inks) {
                let mut d = f64::INFINITY;
                for w in s.windows(2) {
                    d = d.min(dist_to_segment((u, v), w[0], w[1]));
                }
                let cover = ((j.thickness + falloff - d) / falloff).clamp(0.0, 1.0);
                best = best.max(ink * cover);
            }
            *out = (best + noise[py * side + px]).clamp(0.0, 1.0);
        }
    }
    img
}

/// Render `n` digit images of `side`x`side` pixels, balanced over the ten
/// classes, deterministic in `seed`.
pub fn gen_digits(n: usize, side: usize, seed: u64) -> Result<Dataset> {
    if n == 0 || side < 8 {
        return Err(Error::Config(format!(
            "need n >= 1 and side >= 8, got n={n}, side={side}"
        )));
    }
    // Per-sample jitter parameters are drawn up front from one stream so the
    // per-pixel work can fan out across threads without affecting determinism.
    let mut rng = rng_from(seed, "digits");
    let normal = StandardNormal;
    let mut jitters = Vec::with_capacity(n);
    let mut noises = Vec::with_capacity(n);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        labels.push(i % 10);
        let cx = rng.random_range(0.1..0.9);
        let cy = rng.random_range(0.1..0.9);
        jitters.push(Jitter {
            angle: rng.random_range(-0.35..0.35),
            shear: rng.random_range(-0.25..0.25),
            scale_x: rng.random_range(0.70..1.15),
            scale_y: rng.random_range(0.70..1.15),
            tx: rng.random_range(-0.11..0.11),
            ty: rng.random_range(-0.11..0.11),
            thickness: rng.random_range(0.035..0.085),
            intensity: rng.random_range(0.55..1.0),
            clutter: (
                cx,
                cy,
                cx + rng.random_range(-0.25..0.25),
                cy + rng.random_range(-0.25..0.25),
                rng.random_range(0.2..0.7),
            ),
        });
        let noise: Vec<f64> = (0..side * side)
            .map(|_| {
                let z: f64 = normal.sample(&mut rng);
                z * 0.15
            })
            .collect();
        noises.push(noise);
    }
    // Shuffle sample order so class labels are not periodic in the index.
    let mut order: Vec<usize> = (0..n).collect();
    use rand::seq::SliceRandom;
    order.shuffle(&mut rng);

    let rendered: Vec<Vec<f64>> = order
        .par_iter()
        .map(|&i| render(labels[i], &jitters[i], &noises[i], side))
        .collect();
    let mut data = Vec::with_capacity(n * side * side);
    let mut out_labels = Vec::with_capacity(n);
    for (img, &i) in rendered.iter().zip(&order) {
        data.extend_from_slice(img);
        out_labels.push(labels[i]);
    }
    Dataset::new(Tensor::new(vec![n, 1, side, side], data)?, out_labels, 10)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_and_balanced() {
        let a = gen_digits(40, 16, 5).unwrap();
        let b = gen_digits(40, 16, 5).unwrap();
        assert_eq!(a.samples(), b.samples());
        assert_eq!(a.labels(), b.labels());
        let mut counts = [0usize; 10];
        for &l in a.labels() {
            counts[l] += 1;
        }
        assert!(counts.iter().all(|&c| c == 4));
    }

    #[test]
    fn pixels_are_in_unit_range() {
        let d = gen_digits(20, 28, 1).unwrap();
        assert!(d.samples().data().iter().all(|&v| (0.0..=1.0).contains(&v)));
        // images actually contain ink
        assert!(d.samples().data().iter().any(|&v| v > 0.5));
    }
}
