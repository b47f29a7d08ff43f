use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// How group rewards become per-response advantages.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AdvantageMode {
    /// `(r - mean(r)) / std(r)` with the population standard deviation.
    Grpo,
    /// `r - mean(r)`.
    DrGrpo,
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Group-relative advantages.
///
/// A group whose rewards are all identical gets all-zero advantages in both
/// modes.
pub fn compute_advantages(rewards: &[f64], mode: AdvantageMode) -> Result<Vec<f64>> {
    if rewards.len() < 2 {
        return Err(Error::input("advantages need a group of at least two rewards"));
    }
    if rewards.iter().any(|r| !r.is_finite()) {
        return Err(Error::input("rewards must be finite"));
    }
    if rewards.iter().all(|&r| r == rewards[0]) {
        return Ok(vec![0.0; rewards.len()]);
    }
    // Second pass removes the rounding left in the first mean.
    let m = mean(rewards);
    let centered: Vec<f64> = rewards.iter().map(|r| r - m).collect();
    let m2 = mean(&centered);
    let centered: Vec<f64> = centered.iter().map(|d| d - m2).collect();
    match mode {
        AdvantageMode::DrGrpo => Ok(centered),
        AdvantageMode::Grpo => {
            let var = centered.iter().map(|d| d * d).sum::<f64>() / centered.len() as f64;
            let std = var.sqrt();
            if std == 0.0 {
                return Ok(vec![0.0; rewards.len()]);
            }
            Ok(centered.iter().map(|d| d / std).collect())
        }
    }
}
