//! How much selector capacity the training objective needs: the same
//! labeled frames fitted at several compute multipliers under plain
//! segmentation cross-entropy and under the positive-weighted loss.
//!
//! The selector emits one logit per block, so per-pixel cross-entropy against
//! the block mask broadcast to pixels equals the unweighted block mean.

use crate::accmodel::{eval_loss, train, AccModelNet, LabeledSample, TrainConfig};
use crate::error::{Error, Result};

pub const DEFAULT_WIDTHS: [f64; 5] = [1.0, 2.0, 4.0, 6.0, 8.0];

#[derive(Clone, Debug, PartialEq)]
pub struct FpConfig {
    /// Selector width multiplier at compute multiplier 1.
    pub base_width: f64,
    /// Training settings; `positive_weight` applies to the weighted run only.
    pub train: TrainConfig,
    /// Initialization seeds; losses are averaged over them.
    pub seeds: Vec<u64>,
}

impl Default for FpConfig {
    fn default() -> Self {
        Self {
            base_width: 0.25,
            train: TrainConfig::default(),
            seeds: vec![0, 1, 2],
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FpRow {
    pub width: f64,
    /// Unweighted cross-entropy on the training set after training.
    pub plain_loss: f64,
    /// Positive-weighted cross-entropy on the training set after training.
    pub weighted_loss: f64,
}

/// Fits one selector per width, loss and seed on `samples`.
pub fn fp_tolerance_experiment(widths: &[f64], samples: &[LabeledSample], cfg: &FpConfig) -> Result<Vec<FpRow>> {
    if widths.is_empty() || widths.iter().any(|w| !DEFAULT_WIDTHS.contains(w)) {
        return Err(Error::Invalid(format!("widths {widths:?} must come from {DEFAULT_WIDTHS:?}")));
    }
    if samples.is_empty() || cfg.seeds.is_empty() {
        return Err(Error::Invalid("need samples and at least one seed".into()));
    }
    let channels = samples[0].frame.channels();
    let n = cfg.seeds.len() as f64;
    let fit = |m: f64, seed: u64, weight: f64| -> Result<f64> {
        let mut model = AccModelNet::new(channels, cfg.base_width * m, seed);
        let tc = TrainConfig {
            seed,
            positive_weight: weight,
            ..cfg.train.clone()
        };
        train(&mut model, samples, &tc)?;
        eval_loss(&model, samples, weight)
    };
    widths
        .iter()
        .map(|&m| {
            let (mut plain_loss, mut weighted_loss) = (0.0, 0.0);
            for &seed in &cfg.seeds {
                plain_loss += fit(m, seed, 1.0)? / n;
                weighted_loss += fit(m, seed, cfg.train.positive_weight)? / n;
            }
            Ok(FpRow {
                width: m,
                plain_loss,
                weighted_loss,
            })
        })
        .collect()
}

/// `(loss(a) - loss(b)) / loss(a)` for the plain and weighted curves.
pub fn relative_gaps(rows: &[FpRow], a: f64, b: f64) -> Option<(f64, f64)> {
    let find = |w: f64| rows.iter().find(|r| r.width == w);
    let (ra, rb) = (find(a)?, find(b)?);
    Some((
        (ra.plain_loss - rb.plain_loss) / ra.plain_loss,
        (ra.weighted_loss - rb.weighted_loss) / ra.weighted_loss,
    ))
}

pub fn fp_csv(rows: &[FpRow]) -> String {
    let mut s = String::from("width,plain_loss,weighted_loss\n");
    for r in rows {
        s.push_str(&format!("{},{:.6},{:.6}\n", r.width, r.plain_loss, r.weighted_loss));
    }
    s
}
