//! Learning-rate reduction on a stagnant validation loss.

use super::config::PlateauConfig;

/// Multiplies the rate by `factor` once `patience` consecutive epochs have
/// each failed to beat the lowest loss seen so far by more than `threshold`.
///
/// The reference loss is the running minimum: a small decrease does not
/// count as an improvement, but it does become the new bar. The counter
/// restarts after an improvement and after each reduction. A non-finite loss
/// never improves.
#[derive(Clone, Debug, PartialEq)]
pub struct PlateauScheduler {
    config: PlateauConfig,
    lr: f64,
    best: Option<f64>,
    stale: usize,
    reductions: usize,
}

impl PlateauScheduler {
    pub fn new(lr: f64, config: PlateauConfig) -> Self {
        PlateauScheduler {
            config,
            lr,
            best: None,
            stale: 0,
            reductions: 0,
        }
    }

    pub fn lr(&self) -> f64 {
        self.lr
    }

    pub fn reductions(&self) -> usize {
        self.reductions
    }

    pub fn best(&self) -> Option<f64> {
        self.best
    }

    /// Records one epoch's loss and returns the rate for the next epoch.
    pub fn observe(&mut self, loss: f64) -> f64 {
        match self.best {
            None if loss.is_finite() => {
                self.best = Some(loss);
                return self.lr;
            }
            Some(best) if loss < best - self.config.threshold => self.stale = 0,
            _ => self.stale += 1,
        }
        if loss.is_finite() {
            self.best = Some(self.best.map_or(loss, |b| b.min(loss)));
        }
        if self.stale >= self.config.patience {
            self.lr *= self.config.factor;
            self.stale = 0;
            self.reductions += 1;
            log::info!("plateau: learning rate reduced to {:.3e}", self.lr);
        }
        self.lr
    }

    /// Rate after replaying a whole loss history from a fresh state.
    pub fn replay(lr: f64, config: PlateauConfig, history: &[f64]) -> f64 {
        let mut s = PlateauScheduler::new(lr, config);
        history.iter().for_each(|&l| {
            s.observe(l);
        });
        s.lr()
    }
}
