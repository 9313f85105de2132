use crate::error::{Error, Result};

use super::config::TrainSection;

/// Learning rate for a 0-based epoch: constant until `decay_start`, then a
/// linear ramp that would reach zero at `epochs`.
pub fn lr_at(epoch: u64, cfg: &TrainSection) -> Result<f64> {
    if epoch >= cfg.epochs {
        return Err(Error::Config(format!(
            "epoch {epoch} outside the schedule (0..{})",
            cfg.epochs
        )));
    }
    if epoch < cfg.decay_start {
        return Ok(cfg.lr);
    }
    let span = (cfg.epochs - cfg.decay_start) as f64;
    Ok(cfg.lr * (cfg.epochs - epoch) as f64 / span)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constant_then_linear() {
        let cfg = TrainSection::default();
        assert_eq!(lr_at(0, &cfg).unwrap(), 1e-4);
        assert_eq!(lr_at(74, &cfg).unwrap(), 1e-4);
        assert_eq!(lr_at(75, &cfg).unwrap(), 1e-4);
        assert!((lr_at(112, &cfg).unwrap() - 5.0667e-5).abs() < 1e-9);
        assert!((lr_at(149, &cfg).unwrap() - 1e-4 / 75.0).abs() < 1e-18);
    }

    #[test]
    fn out_of_range_rejected() {
        assert!(lr_at(150, &TrainSection::default()).is_err());
    }

    #[test]
    fn no_decay_when_decay_start_equals_epochs() {
        let cfg = TrainSection {
            epochs: 5,
            decay_start: 5,
            ..Default::default()
        };
        assert_eq!(lr_at(4, &cfg).unwrap(), cfg.lr);
    }
}
