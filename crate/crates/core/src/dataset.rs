//! Center-out reach trials: binning, differentiation, the synthetic
//! cosine-tuned Poisson population that stands in for recorded cortex, and
//! the plain-text dataset file.

use std::fmt;
use std::io::{BufRead, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Poisson};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const NEURON_COUNT: usize = 192;
pub const BIN_MS: u32 = 20;
pub const BIN_SECONDS: f64 = 0.020;
pub const DATASET_HEADER_TAG: &str = "jenkins-dataset v1";

/// Eight radial targets at 45° spacing.
pub const DEFAULT_DIRECTIONS: [f64; 8] = [0.0, 45.0, 90.0, 135.0, 180.0, 225.0, 270.0, 315.0];

/// Spike timestamps (ms) of one neuron, ascending.
#[derive(Clone, Debug, PartialEq)]
pub struct SpikeTrain {
    pub neuron_id: usize,
    spike_times: Vec<f64>,
}

impl SpikeTrain {
    pub fn new(neuron_id: usize, spike_times: Vec<f64>) -> Result<Self> {
        if spike_times.iter().any(|t| !(t.is_finite() && *t >= 0.0)) {
            return Err(Error::InvalidArgument("spike times must be finite and non-negative".into()));
        }
        if spike_times.windows(2).any(|w| w[1] < w[0]) {
            return Err(Error::InvalidArgument("spike times must be non-decreasing".into()));
        }
        Ok(SpikeTrain { neuron_id, spike_times })
    }

    pub fn spike_times(&self) -> &[f64] {
        &self.spike_times
    }
}

/// Counts spikes in half-open bins `[k·w, (k+1)·w)`; spikes at or after
/// `duration_ms` are dropped.
pub fn bin_spike_train(train: &SpikeTrain, bin_width_ms: f64, duration_ms: f64) -> Result<Vec<u32>> {
    if !(bin_width_ms > 0.0 && duration_ms > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "bin width {bin_width_ms} ms and duration {duration_ms} ms must be positive"
        )));
    }
    let bins = (duration_ms / bin_width_ms).ceil() as usize;
    let mut counts = vec![0u32; bins];
    for &t in train.spike_times() {
        if t >= duration_ms {
            break;
        }
        let k = ((t / bin_width_ms).floor() as usize).min(bins - 1);
        counts[k] += 1;
    }
    Ok(counts)
}

/// Finite-difference velocities (mm/s) from positions sampled once per bin.
pub fn differentiate_positions(positions: &[[f64; 2]]) -> Result<Vec<[f64; 2]>> {
    if positions.len() < 2 {
        return Err(Error::InsufficientSamples {
            needed: 2,
            got: positions.len(),
        });
    }
    Ok(positions
        .windows(2)
        .map(|w| {
            [
                (w[1][0] - w[0][0]) / BIN_SECONDS,
                (w[1][1] - w[0][1]) / BIN_SECONDS,
            ]
        })
        .collect())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Validation,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Validation => "validation",
            Split::Test => "test",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Split {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "train" => Ok(Split::Train),
            "validation" => Ok(Split::Validation),
            "test" => Ok(Split::Test),
            other => Err(format!("unknown split {other:?}")),
        }
    }
}

/// One trial: per-bin spike counts (bins × neurons, row-major) and per-bin
/// mean hand velocity in mm/s.
#[derive(Clone, Debug, PartialEq)]
pub struct BinnedTrial {
    pub trial_id: u64,
    pub split: Split,
    pub direction_deg: f64,
    neurons: usize,
    counts: Vec<u32>,
    velocities: Vec<[f64; 2]>,
}

impl BinnedTrial {
    pub fn new(
        trial_id: u64,
        split: Split,
        direction_deg: f64,
        neurons: usize,
        counts: Vec<u32>,
        velocities: Vec<[f64; 2]>,
    ) -> Result<Self> {
        if neurons == 0 || counts.len() != neurons * velocities.len() {
            return Err(Error::shape(
                "BinnedTrial",
                format!("{} bins x {neurons} neurons", velocities.len()),
                format!("{} counts", counts.len()),
            ));
        }
        Ok(BinnedTrial {
            trial_id,
            split,
            direction_deg,
            neurons,
            counts,
            velocities,
        })
    }

    pub const fn bin_width_ms(&self) -> u32 {
        BIN_MS
    }

    pub fn len(&self) -> usize {
        self.velocities.len()
    }

    pub fn is_empty(&self) -> bool {
        self.velocities.is_empty()
    }

    pub fn neurons(&self) -> usize {
        self.neurons
    }

    pub fn counts(&self) -> &[u32] {
        &self.counts
    }

    pub fn counts_at(&self, bin: usize) -> &[u32] {
        &self.counts[bin * self.neurons..(bin + 1) * self.neurons]
    }

    pub fn velocities(&self) -> &[[f64; 2]] {
        &self.velocities
    }
}

/// Per-neuron cosine tuning: rate = max(0, b + m·(v·û)/v_ref) Hz.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TuningModel {
    pub baseline_hz: Vec<f64>,
    pub modulation_hz: Vec<f64>,
    pub preferred_rad: Vec<f64>,
    pub speed_ref: f64,
}

impl TuningModel {
    /// b ~ U[5, 25] Hz, m ~ U[10, 40] Hz, θ ~ U[0, 2π).
    pub fn sample(neurons: usize, speed_ref: f64, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut baseline_hz = Vec::with_capacity(neurons);
        let mut modulation_hz = Vec::with_capacity(neurons);
        let mut preferred_rad = Vec::with_capacity(neurons);
        for _ in 0..neurons {
            baseline_hz.push(rng.gen_range(5.0..25.0));
            modulation_hz.push(rng.gen_range(10.0..40.0));
            preferred_rad.push(rng.gen_range(0.0..std::f64::consts::TAU));
        }
        TuningModel {
            baseline_hz,
            modulation_hz,
            preferred_rad,
            speed_ref,
        }
    }

    /// Same parameters for every neuron, for tests and calibration.
    pub fn uniform(neurons: usize, baseline_hz: f64, modulation_hz: f64, speed_ref: f64) -> Self {
        TuningModel {
            baseline_hz: vec![baseline_hz; neurons],
            modulation_hz: vec![modulation_hz; neurons],
            preferred_rad: (0..neurons).map(|i| i as f64 * std::f64::consts::TAU / neurons as f64).collect(),
            speed_ref,
        }
    }

    pub fn neurons(&self) -> usize {
        self.baseline_hz.len()
    }

    pub fn rate_hz(&self, neuron: usize, v: [f64; 2]) -> f64 {
        let (s, c) = self.preferred_rad[neuron].sin_cos();
        let proj = (v[0] * c + v[1] * s) / self.speed_ref;
        (self.baseline_hz[neuron] + self.modulation_hz[neuron] * proj).max(0.0)
    }

    /// Expected spike count per bin for every neuron.
    pub fn expected_counts(&self, v: [f64; 2]) -> Vec<f64> {
        (0..self.neurons()).map(|i| self.rate_hz(i, v) * BIN_SECONDS).collect()
    }
}

/// Minimum-jerk reach from the center: hold, reach, hold.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReachProfile {
    pub distance_mm: f64,
    pub reach_bins: usize,
    /// Movement onset bin is drawn uniformly from this inclusive range
    /// (then pulled earlier if the trial is too short to finish the reach).
    pub onset_min: usize,
    pub onset_max: usize,
}

impl Default for ReachProfile {
    fn default() -> Self {
        ReachProfile {
            distance_mm: 80.0,
            reach_bins: 20,
            onset_min: 25,
            onset_max: 38,
        }
    }
}

impl ReachProfile {
    pub fn duration_s(&self) -> f64 {
        self.reach_bins as f64 * BIN_SECONDS
    }

    /// Peak speed of the continuous minimum-jerk curve, 1.875·D/T.
    pub fn peak_speed(&self) -> f64 {
        1.875 * self.distance_mm / self.duration_s()
    }

    /// Distance travelled after `t` seconds of movement.
    fn displacement(&self, t: f64) -> f64 {
        let tau = (t / self.duration_s()).clamp(0.0, 1.0);
        self.distance_mm * tau.powi(3) * (10.0 - 15.0 * tau + 6.0 * tau * tau)
    }

    /// Per-bin mean velocity along `direction_deg`, for a reach starting at `onset`.
    pub fn velocities(&self, direction_deg: f64, bins: usize, onset: usize) -> Vec<[f64; 2]> {
        let (s, c) = direction_deg.to_radians().sin_cos();
        (0..bins)
            .map(|k| {
                let t0 = (k as f64 - onset as f64) * BIN_SECONDS;
                let speed = (self.displacement(t0 + BIN_SECONDS) - self.displacement(t0)) / BIN_SECONDS;
                [speed * c, speed * s]
            })
            .collect()
    }

    fn onset_for(&self, bins: usize, rng: &mut impl Rng) -> usize {
        let drawn = rng.gen_range(self.onset_min..=self.onset_max.max(self.onset_min));
        let latest = bins.saturating_sub(self.reach_bins + 1).max(1);
        drawn.min(latest).max(1)
    }
}

/// The synthetic ground truth: a tuned population plus the reach geometry.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticTask {
    pub tuning: TuningModel,
    pub profile: ReachProfile,
    pub directions: Vec<f64>,
}

pub const MIN_TRIAL_BINS: usize = 40;

impl SyntheticTask {
    /// Default population for a dataset seed; `speed_ref` is the reach's peak speed.
    pub fn from_seed(neurons: usize, seed: u64) -> Self {
        let profile = ReachProfile::default();
        SyntheticTask {
            tuning: TuningModel::sample(neurons, profile.peak_speed(), seed),
            profile,
            directions: DEFAULT_DIRECTIONS.to_vec(),
        }
    }

    pub fn neurons(&self) -> usize {
        self.tuning.neurons()
    }

    pub fn generate_trial(&self, direction_deg: f64, bins: usize, seed: u64) -> Result<BinnedTrial> {
        if !self.directions.iter().any(|d| (d - direction_deg).abs() < 1e-9) {
            return Err(Error::UnknownDirection(direction_deg));
        }
        if bins < MIN_TRIAL_BINS {
            return Err(Error::InvalidArgument(format!("trial needs at least {MIN_TRIAL_BINS} bins, got {bins}")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let onset = self.profile.onset_for(bins, &mut rng);
        let velocities = self.profile.velocities(direction_deg, bins, onset);
        let n = self.neurons();
        let mut counts = Vec::with_capacity(bins * n);
        for v in &velocities {
            for mean in self.tuning.expected_counts(*v) {
                counts.push(poisson(mean, &mut rng));
            }
        }
        BinnedTrial::new(0, Split::Train, direction_deg, n, counts, velocities)
    }

    /// `trials` trials cycling through the directions, split 80/10/10 by a
    /// seeded shuffle of trial ids.
    pub fn generate_dataset(&self, trials: usize, bins: usize, seed: u64) -> Result<Dataset> {
        let mut ids: Vec<usize> = (0..trials).collect();
        ids.shuffle(&mut ChaCha8Rng::seed_from_u64(mix_seed(seed, u64::MAX)));
        let n_train = trials * 8 / 10;
        let n_val = trials / 10;
        let mut split_of = vec![Split::Test; trials];
        for (rank, &id) in ids.iter().enumerate() {
            split_of[id] = if rank < n_train {
                Split::Train
            } else if rank < n_train + n_val {
                Split::Validation
            } else {
                Split::Test
            };
        }
        let mut out = Vec::with_capacity(trials);
        for (id, split) in split_of.into_iter().enumerate() {
            let dir = self.directions[id % self.directions.len()];
            let mut trial = self.generate_trial(dir, bins, mix_seed(seed, id as u64))?;
            trial.trial_id = id as u64;
            trial.split = split;
            out.push(trial);
        }
        Dataset::new(self.neurons(), out)
    }
}

fn poisson(mean: f64, rng: &mut impl Rng) -> u32 {
    if mean <= 0.0 {
        return 0;
    }
    Poisson::new(mean).expect("positive finite mean").sample(rng) as u32
}

/// splitmix64 of the pair, so per-trial streams are decorrelated.
pub fn mix_seed(seed: u64, index: u64) -> u64 {
    let mut z = seed
        .wrapping_mul(0x9E37_79B9_7F4A_7C15)
        .wrapping_add(index)
        .wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    neurons: usize,
    trials: Vec<BinnedTrial>,
}

impl Dataset {
    pub fn new(neurons: usize, trials: Vec<BinnedTrial>) -> Result<Self> {
        if let Some(t) = trials.iter().find(|t| t.neurons() != neurons) {
            return Err(Error::shape("Dataset", neurons, format!("trial {} with {}", t.trial_id, t.neurons())));
        }
        Ok(Dataset { neurons, trials })
    }

    pub fn neurons(&self) -> usize {
        self.neurons
    }

    pub fn trials(&self) -> &[BinnedTrial] {
        &self.trials
    }

    pub fn split(&self, split: Split) -> impl Iterator<Item = &BinnedTrial> + '_ {
        self.trials.iter().filter(move |t| t.split == split)
    }

    pub fn split_len(&self, split: Split) -> usize {
        self.split(split).count()
    }

    /// Mean spike count per neuron per bin over a split.
    pub fn mean_count(&self, split: Split) -> f64 {
        let (mut total, mut cells) = (0u64, 0u64);
        for t in self.split(split) {
            total += t.counts().iter().map(|&c| c as u64).sum::<u64>();
            cells += t.counts().len() as u64;
        }
        if cells == 0 {
            0.0
        } else {
            total as f64 / cells as f64
        }
    }

    pub fn write_to(&self, mut w: impl Write) -> Result<()> {
        writeln!(w, "{DATASET_HEADER_TAG} neurons={} bin_ms={BIN_MS}", self.neurons)?;
        let mut line = String::new();
        for t in &self.trials {
            for bin in 0..t.len() {
                use std::fmt::Write as _;
                line.clear();
                let _ = write!(line, "{},{},{},{}", t.trial_id, t.split, t.direction_deg, bin);
                for c in t.counts_at(bin) {
                    let _ = write!(line, ",{c}");
                }
                let v = t.velocities()[bin];
                let _ = write!(line, ",{},{}", v[0], v[1]);
                writeln!(w, "{line}")?;
            }
        }
        Ok(())
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let f = std::fs::File::open(path)?;
        Dataset::read_from(std::io::BufReader::new(f), path)
    }

    /// Parses the text format. Lines starting with `#` and blank lines are
    /// skipped; errors carry `origin` and the 1-based line number.
    pub fn read_from(r: impl BufRead, origin: impl Into<PathBuf>) -> Result<Self> {
        let origin = origin.into();
        let err = |line: usize, msg: String| Error::Parse {
            path: origin.clone(),
            line,
            msg,
        };
        let mut lines = r.lines().enumerate();
        let neurons = loop {
            let Some((i, line)) = lines.next() else {
                return Err(err(1, "missing header".into()));
            };
            let line = line?;
            if line.trim().is_empty() || line.starts_with('#') {
                continue;
            }
            break parse_header(&line).map_err(|m| err(i + 1, m))?;
        };

        struct Pending {
            id: u64,
            split: Split,
            direction: f64,
            counts: Vec<u32>,
            velocities: Vec<[f64; 2]>,
        }
        let mut trials: Vec<BinnedTrial> = Vec::new();
        let mut seen = std::collections::HashSet::new();
        let mut cur: Option<Pending> = None;
        let finish = |p: Pending, trials: &mut Vec<BinnedTrial>| -> Result<()> {
            trials.push(BinnedTrial::new(p.id, p.split, p.direction, neurons, p.counts, p.velocities)?);
            Ok(())
        };

        for (i, line) in lines {
            let lineno = i + 1;
            let line = line?;
            if line.trim().is_empty() || line.starts_with('#') {
                continue;
            }
            let fields: Vec<&str> = line.split(',').collect();
            if fields.len() != neurons + 6 {
                return Err(err(
                    lineno,
                    format!("expected {} columns ({} counts), found {}", neurons + 6, neurons, fields.len()),
                ));
            }
            let id: u64 = fields[0].trim().parse().map_err(|_| err(lineno, format!("bad trial_id {:?}", fields[0])))?;
            let split: Split = fields[1].trim().parse().map_err(|m| err(lineno, m))?;
            let direction: f64 = parse_finite(fields[2]).ok_or_else(|| err(lineno, format!("bad direction {:?}", fields[2])))?;
            let bin: usize = fields[3].trim().parse().map_err(|_| err(lineno, format!("bad bin_index {:?}", fields[3])))?;

            let continues = matches!(&cur, Some(p) if p.id == id);
            if !continues {
                if let Some(p) = cur.take() {
                    finish(p, &mut trials)?;
                }
                if !seen.insert(id) {
                    return Err(err(lineno, format!("trial {id} is not contiguous")));
                }
                cur = Some(Pending {
                    id,
                    split,
                    direction,
                    counts: Vec::new(),
                    velocities: Vec::new(),
                });
            }
            let p = cur.as_mut().expect("set above");
            if p.split != split || p.direction != direction {
                return Err(err(lineno, format!("trial {id} changes split or direction mid-trial")));
            }
            if bin != p.velocities.len() {
                return Err(err(lineno, format!("expected bin_index {}, found {bin}", p.velocities.len())));
            }
            for f in &fields[4..4 + neurons] {
                let f = f.trim();
                if f.starts_with('-') {
                    return Err(err(lineno, format!("negative count {f}")));
                }
                p.counts.push(f.parse().map_err(|_| err(lineno, format!("bad count {f:?}")))?);
            }
            let vx = parse_finite(fields[4 + neurons]).ok_or_else(|| err(lineno, "bad vx".into()))?;
            let vy = parse_finite(fields[5 + neurons]).ok_or_else(|| err(lineno, "bad vy".into()))?;
            p.velocities.push([vx, vy]);
        }
        if let Some(p) = cur.take() {
            finish(p, &mut trials)?;
        }
        Dataset::new(neurons, trials)
    }
}

fn parse_finite(s: &str) -> Option<f64> {
    s.trim().parse::<f64>().ok().filter(|v| v.is_finite())
}

fn parse_header(line: &str) -> std::result::Result<usize, String> {
    let rest = line
        .strip_prefix(DATASET_HEADER_TAG)
        .ok_or_else(|| format!("header must start with {DATASET_HEADER_TAG:?}"))?;
    let mut neurons = None;
    let mut bin_ms = None;
    for tok in rest.split_whitespace() {
        match tok.split_once('=') {
            Some(("neurons", v)) => neurons = v.parse::<usize>().ok().filter(|&n| n > 0),
            Some(("bin_ms", v)) => bin_ms = v.parse::<u32>().ok(),
            _ => return Err(format!("unexpected header field {tok:?}")),
        }
    }
    match (neurons, bin_ms) {
        (Some(n), Some(BIN_MS)) => Ok(n),
        (None, _) => Err("header lacks a valid neurons=".into()),
        (_, other) => Err(format!("unsupported bin width {other:?}; only bin_ms={BIN_MS} is supported")),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn train(times: &[f64]) -> SpikeTrain {
        SpikeTrain::new(0, times.to_vec()).unwrap()
    }

    #[test]
    fn binning_examples() {
        assert_eq!(bin_spike_train(&train(&[]), 20.0, 40.0).unwrap(), vec![0, 0]);
        assert_eq!(bin_spike_train(&train(&[5.0, 15.0, 25.0]), 20.0, 40.0).unwrap(), vec![2, 1]);
        assert_eq!(bin_spike_train(&train(&[20.0]), 20.0, 40.0).unwrap(), vec![0, 1]);
        // Partial final bin, and spikes past the end are dropped.
        assert_eq!(bin_spike_train(&train(&[41.0, 49.9, 50.0, 60.0]), 20.0, 50.0).unwrap(), vec![0, 0, 2]);
        assert!(bin_spike_train(&train(&[]), 0.0, 40.0).is_err());
    }

    #[test]
    fn spike_train_rejects_unsorted() {
        assert!(SpikeTrain::new(1, vec![3.0, 2.0]).is_err());
        assert!(SpikeTrain::new(1, vec![-1.0]).is_err());
        assert!(SpikeTrain::new(1, vec![2.0, 2.0]).is_ok());
    }

    #[test]
    fn differentiation_examples() {
        let flat = differentiate_positions(&[[3.0, 3.0]; 3]).unwrap();
        assert_eq!(flat, vec![[0.0, 0.0]; 2]);
        let ramp = differentiate_positions(&[[0.0, 0.0], [2.0, 0.0], [4.0, 0.0]]).unwrap();
        for v in ramp {
            assert!((v[0] - 100.0).abs() < 1e-9 && v[1] == 0.0);
        }
        assert!(matches!(
            differentiate_positions(&[[1.0, 1.0]]),
            Err(Error::InsufficientSamples { needed: 2, got: 1 })
        ));
    }

    #[test]
    fn reach_profile_covers_distance_and_rests() {
        let p = ReachProfile::default();
        let v = p.velocities(90.0, 60, 30);
        let travelled: f64 = v.iter().map(|v| v[1] * BIN_SECONDS).sum();
        assert!((travelled - p.distance_mm).abs() < 1e-9);
        assert!(v[..30].iter().all(|v| v[0].abs() < 1e-12 && v[1].abs() < 1e-12));
        assert!(v[50..].iter().all(|v| v[1].abs() < 1e-12));
        let peak = v.iter().map(|v| v[1]).fold(0.0, f64::max);
        assert!(peak <= p.peak_speed() && peak > 0.95 * p.peak_speed());
    }

    #[test]
    fn generate_trial_is_deterministic_and_checks_direction() {
        let task = SyntheticTask::from_seed(16, 3);
        let a = task.generate_trial(45.0, 60, 9).unwrap();
        let b = task.generate_trial(45.0, 60, 9).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, task.generate_trial(45.0, 60, 10).unwrap());
        assert!(matches!(task.generate_trial(310.0, 60, 9), Err(Error::UnknownDirection(_))));
        assert!(task.generate_trial(0.0, 39, 9).is_err());
        // Arbitrary angles are producible once configured.
        let mut custom = task.clone();
        custom.directions.push(310.0);
        assert!(custom.generate_trial(310.0, 40, 1).is_ok());
    }

    #[test]
    fn silent_baseline_gives_zero_counts_at_rest() {
        let mut task = SyntheticTask::from_seed(32, 0);
        task.tuning = TuningModel::uniform(32, 0.0, 30.0, task.profile.peak_speed());
        let trial = task.generate_trial(0.0, 60, 4).unwrap();
        for (bin, v) in trial.velocities().iter().enumerate() {
            if v[0] == 0.0 && v[1] == 0.0 {
                assert!(trial.counts_at(bin).iter().all(|&c| c == 0));
            }
        }
    }

    #[test]
    fn dataset_splits_partition_trials() {
        let task = SyntheticTask::from_seed(8, 1);
        let ds = task.generate_dataset(80, 40, 1).unwrap();
        assert_eq!(ds.trials().len(), 80);
        assert_eq!(ds.split_len(Split::Train), 64);
        assert_eq!(ds.split_len(Split::Validation), 8);
        assert_eq!(ds.split_len(Split::Test), 8);
        for (i, t) in ds.trials().iter().enumerate() {
            assert_eq!(t.direction_deg, DEFAULT_DIRECTIONS[i % 8]);
        }
    }

    #[test]
    fn file_round_trip_and_empty_dataset() {
        let task = SyntheticTask::from_seed(5, 2);
        let ds = task.generate_dataset(10, 40, 2).unwrap();
        let mut buf = Vec::new();
        ds.write_to(&mut buf).unwrap();
        let back = Dataset::read_from(&buf[..], "mem").unwrap();
        assert_eq!(back, ds);

        let empty = Dataset::new(192, vec![]).unwrap();
        let mut buf = Vec::new();
        empty.write_to(&mut buf).unwrap();
        assert_eq!(String::from_utf8(buf.clone()).unwrap(), "jenkins-dataset v1 neurons=192 bin_ms=20\n");
        assert_eq!(Dataset::read_from(&buf[..], "mem").unwrap(), empty);
    }

    fn line(counts: usize) -> String {
        let mut s = String::from("0,train,0,0");
        for _ in 0..counts {
            s.push_str(",1");
        }
        s.push_str(",0.5,-0.5");
        s
    }

    #[test]
    fn load_errors_name_the_line() {
        let text = format!("jenkins-dataset v1 neurons=192 bin_ms=20\n{}\n", line(191));
        let e = Dataset::read_from(text.as_bytes(), "d.txt").unwrap_err();
        assert!(e.to_string().starts_with("d.txt:2:"), "{e}");
        assert!(e.to_string().contains("191") || e.to_string().contains("197"), "{e}");

        let neg = format!("jenkins-dataset v1 neurons=192 bin_ms=20\n{}\n", line(192).replacen(",1", ",-1", 1));
        let e = Dataset::read_from(neg.as_bytes(), "d.txt").unwrap_err();
        assert!(e.to_string().contains("d.txt:2: negative count"), "{e}");

        let e = Dataset::read_from("jenkins v0\n".as_bytes(), "d.txt").unwrap_err();
        assert!(e.to_string().starts_with("d.txt:1:"), "{e}");

        let gap = format!(
            "jenkins-dataset v1 neurons=192 bin_ms=20\n{}\n{}\n",
            line(192),
            line(192).replacen("0,train,0,0", "0,train,0,2", 1)
        );
        let e = Dataset::read_from(gap.as_bytes(), "d.txt").unwrap_err();
        assert!(e.to_string().contains("d.txt:3:"), "{e}");
    }
}
