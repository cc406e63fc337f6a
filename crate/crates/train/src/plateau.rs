//! Reduce-on-plateau learning-rate schedule: multiply by `factor` after
//! `patience` consecutive epochs without strict improvement of the best
//! validation loss; the counter resets on improvement and after each decay.

#[derive(Clone, Debug, PartialEq)]
pub struct PlateauSchedule {
    pub lr_init: f64,
    pub factor: f64,
    pub patience: usize,
    pub best: Option<f64>,
    pub bad_epochs: usize,
    pub decays: u64,
}

impl PlateauSchedule {
    pub fn new(lr_init: f64, factor: f64, patience: usize) -> Self {
        PlateauSchedule {
            lr_init,
            factor,
            patience,
            best: None,
            bad_epochs: 0,
            decays: 0,
        }
    }

    /// Current rate; after n decays this is exactly lr_init · factorⁿ.
    pub fn lr(&self) -> f64 {
        self.lr_init * self.factor.powi(self.decays as i32)
    }

    /// Record one epoch's validation loss and return the rate for the next
    /// epoch.
    pub fn observe(&mut self, val_loss: f64) -> f64 {
        let improved = match self.best {
            None => true,
            Some(best) => val_loss < best,
        };
        if improved {
            self.best = Some(val_loss);
            self.bad_epochs = 0;
        } else {
            self.bad_epochs += 1;
            if self.bad_epochs >= self.patience {
                self.decays += 1;
                self.bad_epochs = 0;
            }
        }
        self.lr()
    }
}
