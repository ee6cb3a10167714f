//! Pieces shared by the three training stages.

use std::io::Write;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::prompt::Prompt;

/// Per-step losses of one training run.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossLog {
    pub losses: Vec<f64>,
}

impl LossLog {
    pub fn push(&mut self, loss: f64) {
        self.losses.push(loss);
    }

    pub fn len(&self) -> usize {
        self.losses.len()
    }

    pub fn is_empty(&self) -> bool {
        self.losses.is_empty()
    }

    /// Mean loss over the `window` steps ending at step `at` (1-based, inclusive).
    pub fn smoothed(&self, at: usize, window: usize) -> Option<f64> {
        if at == 0 || at > self.losses.len() || window == 0 {
            return None;
        }
        let lo = at.saturating_sub(window);
        let slice = &self.losses[lo..at];
        Some(slice.iter().sum::<f64>() / slice.len() as f64)
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        writeln!(f, "step,loss").map_err(|e| Error::io(path, e))?;
        for (i, l) in self.losses.iter().enumerate() {
            writeln!(f, "{},{l}", i + 1).map_err(|e| Error::io(path, e))?;
        }
        Ok(())
    }
}

/// Probability of blanking each prompt slot during training.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PromptDropout {
    pub color: f64,
    pub shape: f64,
    pub action: f64,
}

impl Default for PromptDropout {
    fn default() -> Self {
        Self {
            color: 0.2,
            shape: 0.2,
            action: 0.5,
        }
    }
}

impl PromptDropout {
    pub fn apply(&self, prompt: &Prompt, rng: &mut impl Rng) -> Prompt {
        let mut p = prompt.clone();
        if rng.random::<f64>() < self.color {
            p.color = None;
        }
        if rng.random::<f64>() < self.shape {
            p.shape = None;
        }
        if rng.random::<f64>() < self.action {
            p.action = None;
        }
        p
    }
}

pub(crate) fn numeric_error(step: usize, timestep: usize, e: Error) -> Error {
    match e {
        Error::Numeric { message, .. } => Error::Numeric { step, timestep, message },
        other => other,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn smoothing_window() {
        let log = LossLog { losses: vec![4.0, 2.0, 1.0, 1.0] };
        assert_eq!(log.smoothed(4, 2), Some(1.0));
        assert_eq!(log.smoothed(2, 10), Some(3.0));
        assert_eq!(log.smoothed(5, 2), None);
    }
}
