/// Halves (by default) the learning rate when validation loss stops improving.
#[derive(Clone, Debug, PartialEq)]
pub struct PlateauScheduler {
    lr: f64,
    pub factor: f64,
    pub patience: usize,
    pub min_lr: f64,
    /// Minimum decrease that counts as an improvement.
    pub threshold: f64,
    best: f64,
    stagnant: usize,
}

impl PlateauScheduler {
    pub fn new(lr: f64) -> Self {
        PlateauScheduler {
            lr,
            factor: 0.5,
            patience: 5,
            min_lr: 1e-5,
            threshold: 1e-6,
            best: f64::INFINITY,
            stagnant: 0,
        }
    }

    pub fn with(lr: f64, factor: f64, patience: usize, min_lr: f64) -> Self {
        PlateauScheduler {
            factor,
            patience,
            min_lr,
            ..Self::new(lr)
        }
    }

    pub fn lr(&self) -> f64 {
        self.lr
    }

    pub fn best(&self) -> f64 {
        self.best
    }

    /// Records one epoch's validation loss and returns the learning rate for
    /// the next epoch. The rate is reduced once `patience` consecutive epochs
    /// fail to improve; the count then starts over.
    pub fn update(&mut self, val_loss: f64) -> f64 {
        if val_loss < self.best - self.threshold {
            self.best = val_loss;
            self.stagnant = 0;
        } else {
            self.stagnant += 1;
            if self.stagnant >= self.patience {
                self.lr = (self.lr * self.factor).max(self.min_lr);
                self.stagnant = 0;
            }
        }
        self.lr
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn improving_losses_keep_lr() {
        let mut s = PlateauScheduler::new(1e-3);
        for i in 0..50 {
            assert_eq!(s.update(10.0 - i as f64 * 0.1), 1e-3);
        }
    }

    #[test]
    fn constant_loss_halves_after_sixth_epoch() {
        let mut s = PlateauScheduler::new(1e-3);
        let lrs: Vec<f64> = (0..7).map(|_| s.update(1.0)).collect();
        assert_eq!(&lrs[..5], &[1e-3; 5]);
        assert_eq!(lrs[5], 5e-4);
        assert_eq!(lrs[6], 5e-4);
    }

    #[test]
    fn clamped_at_min_lr() {
        let mut s = PlateauScheduler::with(1e-3, 0.1, 1, 1e-5);
        for _ in 0..100 {
            let lr = s.update(1.0);
            assert!(lr >= 1e-5);
        }
        assert_eq!(s.lr(), 1e-5);
    }

    #[test]
    fn tiny_gains_count_as_stagnation() {
        let mut s = PlateauScheduler::with(1.0, 0.5, 2, 0.0);
        s.update(1.0);
        s.update(1.0 - 1e-7);
        assert_eq!(s.update(1.0 - 2e-7), 0.5);
    }
}
