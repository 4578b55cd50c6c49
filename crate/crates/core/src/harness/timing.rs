//! Wall-clock cost of training epochs.

use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::channels::{generate_channels, ChannelConfig};
use crate::error::{Error, Result};
use crate::gml::{run_gml, TrainConfig};
use crate::model::SystemConfig;

#[derive(Debug, Clone, PartialEq)]
pub struct TimingStats {
    pub median_s_per_epoch: f64,
    pub min_s_per_epoch: f64,
    /// Seconds per epoch of every timed repetition, in run order.
    pub samples: Vec<f64>,
}

pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let mid = v.len() / 2;
    if v.len() % 2 == 1 {
        v[mid]
    } else {
        (v[mid - 1] + v[mid]) / 2.0
    }
}

/// Times `repetitions` full training runs after one untimed warm-up run, on
/// a channel drawn from `channel_seed`.
pub fn timing_probe(
    sys: &SystemConfig,
    channel: &ChannelConfig,
    channel_seed: u64,
    train: &TrainConfig,
    repetitions: usize,
) -> Result<TimingStats> {
    if repetitions < 3 {
        return Err(Error::Config(format!("timing needs at least 3 repetitions, got {repetitions}")));
    }
    let ch = generate_channels(sys, channel, &mut ChaCha8Rng::seed_from_u64(channel_seed))?;
    run_gml(sys, &ch, train)?;
    let mut samples = Vec::with_capacity(repetitions);
    for _ in 0..repetitions {
        let start = Instant::now();
        run_gml(sys, &ch, train)?;
        samples.push(start.elapsed().as_secs_f64() / train.epochs as f64);
    }
    Ok(TimingStats {
        median_s_per_epoch: median(&samples),
        min_s_per_epoch: samples.iter().copied().fold(f64::INFINITY, f64::min),
        samples,
    })
}
