//! Cosine-annealing learning-rate schedule with restarts.

use crate::error::{Error, Result};

/// Cosine decay from `lr_max` at epoch 0 down to `lr_min` at epoch `t_max`,
/// restarting every `t_max + 1` epochs.
///
/// The quarter-period landmarks (start, midpoint, end) are returned exactly
/// rather than through `cos`, whose floating-point values at pi/2 and pi are
/// not exact.
pub fn cosine_lr(e: usize, t_max: usize, lr_min: f64, lr_max: f64) -> Result<f64> {
    if t_max == 0 {
        return Err(Error::Config("t_max must be at least 1".into()));
    }
    if lr_max < lr_min {
        return Err(Error::Config(format!(
            "lr_max {lr_max} below lr_min {lr_min}"
        )));
    }
    let e_cycle = e % (t_max + 1);
    let t = e_cycle as f64 / t_max as f64;
    Ok(if t == 0.0 {
        lr_max
    } else if t == 1.0 {
        lr_min
    } else if t == 0.5 {
        0.5 * (lr_min + lr_max)
    } else {
        lr_min + 0.5 * (lr_max - lr_min) * (1.0 + (t * std::f64::consts::PI).cos())
    })
}

/// Learning-rate policy for fine-tuning loops.
#[derive(Clone, Copy, Debug)]
pub enum LrSchedule {
    Constant(f64),
    Cosine {
        t_max: usize,
        lr_min: f64,
        lr_max: f64,
    },
}

impl LrSchedule {
    pub fn lr_at(&self, epoch: usize) -> Result<f64> {
        match *self {
            LrSchedule::Constant(lr) => Ok(lr),
            LrSchedule::Cosine {
                t_max,
                lr_min,
                lr_max,
            } => cosine_lr(epoch, t_max, lr_min, lr_max),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn endpoints_and_midpoint_are_exact() {
        let (lo, hi) = (0.00001, 0.001);
        assert_eq!(cosine_lr(0, 4, lo, hi).unwrap(), hi);
        assert_eq!(cosine_lr(4, 4, lo, hi).unwrap(), lo);
        assert_eq!(cosine_lr(2, 4, lo, hi).unwrap(), (lo + hi) / 2.0);
        // e = 2, T_max = 4 -> 5.05e-4
        assert!((cosine_lr(2, 4, lo, hi).unwrap() - 5.05e-4).abs() < 1e-18);
    }

    #[test]
    fn restarts_wrap_the_epoch_index() {
        let (lo, hi) = (0.1, 0.9);
        assert_eq!(cosine_lr(5, 4, lo, hi).unwrap(), hi);
        assert_eq!(cosine_lr(9, 4, lo, hi).unwrap(), lo);
        for e in 0..20 {
            let lr = cosine_lr(e, 4, lo, hi).unwrap();
            assert!((lo..=hi).contains(&lr));
        }
    }

    #[test]
    fn decay_is_monotone_within_a_cycle() {
        let mut prev = f64::INFINITY;
        for e in 0..=6 {
            let lr = cosine_lr(e, 6, 1e-5, 1e-3).unwrap();
            assert!(lr < prev);
            prev = lr;
        }
    }

    #[test]
    fn bad_bounds_rejected() {
        assert!(cosine_lr(0, 0, 0.0, 1.0).is_err());
        assert!(cosine_lr(0, 4, 1.0, 0.5).is_err());
    }
}
