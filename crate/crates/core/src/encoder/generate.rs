use std::collections::VecDeque;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{sample_spikes, EncoderModel};
use crate::error::{Error, Result};

/// Autoregressive history for one generated stream: the encoder only ever
/// sees counts it produced itself.
#[derive(Clone, Debug)]
pub struct GenerationState {
    counts: VecDeque<Vec<f64>>,
    velocities: VecDeque<[f64; 2]>,
    capacity: usize,
    temperature: f64,
    rng: ChaCha8Rng,
    bin: u64,
}

impl GenerationState {
    pub fn new(model: &EncoderModel, seed: u64, temperature: f64) -> Result<Self> {
        if !(temperature.is_finite() && temperature > 0.0) {
            return Err(Error::InvalidArgument(format!("temperature {temperature} must be positive")));
        }
        let capacity = model.config.past_bins;
        Ok(GenerationState {
            counts: VecDeque::with_capacity(capacity),
            velocities: VecDeque::with_capacity(capacity),
            capacity,
            temperature,
            rng: ChaCha8Rng::seed_from_u64(seed),
            bin: 0,
        })
    }

    pub fn temperature(&self) -> f64 {
        self.temperature
    }

    /// Bins generated so far.
    pub fn bin(&self) -> u64 {
        self.bin
    }

    pub fn history_len(&self) -> usize {
        self.counts.len()
    }

    /// Samples counts for the current bin. `future[0]` is this bin's
    /// velocity; it joins the history together with the sample.
    pub fn step(&mut self, model: &EncoderModel, future: &[[f64; 2]]) -> Result<Vec<u32>> {
        if model.config.past_bins != self.capacity {
            return Err(Error::shape("generation_step", self.capacity, model.config.past_bins));
        }
        let past: Vec<&[f64]> = self.counts.iter().map(|c| c.as_slice()).collect();
        let vel: Vec<[f64; 2]> = self.velocities.iter().copied().collect();
        let input = model.build_encoder_input(&past, &vel, future)?;
        let dist = model.predict_spike_distribution(&input)?;
        let counts = sample_spikes(&dist, &mut self.rng, self.temperature)?;
        if self.counts.len() == self.capacity {
            self.counts.pop_front();
            self.velocities.pop_front();
        }
        self.counts.push_back(counts.iter().map(|&c| c as f64).collect());
        self.velocities.push_back(future[0]);
        self.bin += 1;
        Ok(counts)
    }
}

/// Generates counts for a whole velocity trace. Look-ahead past the end of
/// the trace is zero velocity.
pub fn generate_closed_loop(
    model: &EncoderModel,
    velocities: &[[f64; 2]],
    seed: u64,
    temperature: f64,
) -> Result<Vec<Vec<u32>>> {
    let mut state = GenerationState::new(model, seed, temperature)?;
    let f = model.config.lookahead_bins;
    let mut future = vec![[0.0; 2]; f];
    let mut out = Vec::with_capacity(velocities.len());
    for t in 0..velocities.len() {
        for (k, slot) in future.iter_mut().enumerate() {
            *slot = velocities.get(t + k).copied().unwrap_or([0.0, 0.0]);
        }
        out.push(state.step(model, &future)?);
    }
    Ok(out)
}
