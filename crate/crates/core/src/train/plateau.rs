//! Stop rule: no new best windowed-mean loss for `patience` steps.

use std::collections::VecDeque;

#[derive(Clone, Debug, PartialEq)]
pub struct Plateau {
    pub window: usize,
    /// Zero disables stopping.
    pub patience: u64,
    pub recent: VecDeque<f64>,
    pub best: f64,
    pub since_best: u64,
}

impl Plateau {
    pub fn new(window: usize, patience: u64) -> Self {
        Self {
            window: window.max(1),
            patience,
            recent: VecDeque::new(),
            best: f64::INFINITY,
            since_best: 0,
        }
    }

    /// Mean of the last `window` losses once that many have been seen.
    pub fn windowed_mean(&self) -> Option<f64> {
        (self.recent.len() == self.window).then(|| self.recent.iter().sum::<f64>() / self.window as f64)
    }

    /// Records a loss; returns true when training should stop.
    pub fn push(&mut self, loss: f64) -> bool {
        if self.recent.len() == self.window {
            self.recent.pop_front();
        }
        self.recent.push_back(loss);
        let Some(mean) = self.windowed_mean() else {
            return false;
        };
        if mean < self.best {
            self.best = mean;
            self.since_best = 0;
        } else {
            self.since_best += 1;
        }
        self.patience > 0 && self.since_best >= self.patience
    }
}
