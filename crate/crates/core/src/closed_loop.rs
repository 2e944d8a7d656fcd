//! The leader → spikes → decoded velocity → follower round trip, open-loop
//! decoding of recorded spikes, and loop fidelity metrics.

use std::path::Path;
use std::sync::Arc;

use crate::dataset::{differentiate_positions, BIN_SECONDS};
use crate::decoder::{DecoderModel, DecoderStream};
use crate::encoder::{EncoderModel, GenerationState};
use crate::error::{Error, Result};
use crate::kinematics::{ArmState, IkSolver, JointAngles, KinematicChain, DEFAULT_LAMBDA};

/// Default anchor: in front of the base, well inside the reachable annulus.
pub const DEFAULT_ANCHOR: [f64; 2] = [240.0, 0.0];
/// Fraction of bins that must stay in the rate band for a stable run.
pub const STABLE_FRACTION: f64 = 0.95;
/// Population rate band relative to the training mean.
pub const RATE_BAND: (f64, f64) = (1.0 / 3.0, 3.0);

#[derive(Clone, Debug)]
pub struct LoopConfig {
    pub decoder: Arc<DecoderModel>,
    pub encoder: Arc<EncoderModel>,
    pub chain: Arc<KinematicChain>,
    pub lambda: f64,
    pub dt: f64,
    pub anchor: [f64; 2],
    pub temperature: f64,
    pub seed: u64,
}

impl LoopConfig {
    pub fn new(decoder: Arc<DecoderModel>, encoder: Arc<EncoderModel>, chain: Arc<KinematicChain>) -> Result<Self> {
        let config = LoopConfig {
            decoder,
            encoder,
            chain,
            lambda: DEFAULT_LAMBDA,
            dt: BIN_SECONDS,
            anchor: DEFAULT_ANCHOR,
            temperature: 1.0,
            seed: 0,
        };
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<()> {
        if self.decoder.neurons() != self.encoder.neurons() {
            return Err(Error::shape("loop_config", self.decoder.neurons(), self.encoder.neurons()));
        }
        if (self.dt - BIN_SECONDS).abs() > 1e-12 {
            return Err(Error::InvalidArgument(format!("Δt = {} s differs from the {BIN_SECONDS} s bin", self.dt)));
        }
        if !(self.temperature.is_finite() && self.temperature > 0.0) {
            return Err(Error::InvalidArgument(format!("temperature {} must be positive", self.temperature)));
        }
        ArmState::new(self.anchor, self.lambda, [0.0; 6]).map(|_| ())
    }

    fn arm(&self) -> Result<ArmState> {
        initial_arm(&self.chain, self.anchor, self.lambda)
    }
}

/// Arm at rest on the anchor, with angles solved from the ready pose.
pub fn initial_arm(chain: &KinematicChain, anchor: [f64; 2], lambda: f64) -> Result<ArmState> {
    let target = chain.clamp_to_workspace([anchor[0], anchor[1], chain.working_height], 0.0);
    let sol = IkSolver::default().solve(chain, target, &chain.ready_pose())?;
    let mut arm = ArmState::new(anchor, lambda, sol.angles)?;
    arm.dt = BIN_SECONDS;
    Ok(arm)
}

/// Integrates one decoded velocity, clamps the target to the workspace and
/// moves the arm there. Returns the end-effector (x, y).
fn drive_arm(chain: &KinematicChain, solver: &IkSolver, arm: &mut ArmState, v: [f64; 2]) -> Result<[f64; 2]> {
    let previous = chain.forward_kinematics(&arm.angles);
    let bearing = previous[1].atan2(previous[0]);
    let p = arm.integrate_velocity(v)?;
    let target = chain.clamp_to_workspace([p[0], p[1], chain.working_height], bearing);
    let sol = solver.solve(chain, target, &arm.angles)?;
    arm.angles = sol.angles;
    let ee = chain.forward_kinematics(&arm.angles);
    Ok([ee[0], ee[1]])
}

#[derive(Clone, Debug, PartialEq)]
pub struct LoopStep {
    pub bin: u64,
    pub counts: Vec<u32>,
    pub decoded: [f64; 2],
    pub position: [f64; 2],
    pub angles: JointAngles,
}

/// One live loop: encoder history, decoder window and arm advance together.
#[derive(Clone, Debug)]
pub struct SessionState {
    generation: GenerationState,
    stream: DecoderStream,
    arm: ArmState,
    solver: IkSolver,
    bin: u64,
    counts_f64: Vec<f64>,
}

impl SessionState {
    pub fn new(config: &LoopConfig) -> Result<Self> {
        config.validate()?;
        Ok(SessionState {
            generation: GenerationState::new(&config.encoder, config.seed, config.temperature)?,
            stream: DecoderStream::for_model(&config.decoder),
            arm: config.arm()?,
            solver: IkSolver::default(),
            bin: 0,
            counts_f64: Vec::with_capacity(config.encoder.neurons()),
        })
    }

    pub fn bin(&self) -> u64 {
        self.bin
    }

    pub fn arm(&self) -> &ArmState {
        &self.arm
    }

    #[cfg(test)]
    pub(crate) fn arm_mut(&mut self) -> &mut ArmState {
        &mut self.arm
    }

    /// Advances one bin. `future` holds the encoder look-ahead, starting
    /// with this bin's leader velocity.
    pub fn step(&mut self, config: &LoopConfig, future: &[[f64; 2]]) -> Result<LoopStep> {
        let bin = self.bin;
        let counts = self.generation.step(&config.encoder, future).map_err(|e| e.at_bin(bin as usize))?;
        self.counts_f64.clear();
        self.counts_f64.extend(counts.iter().map(|&c| c as f64));
        let window = self.stream.push(&self.counts_f64)?;
        let decoded = config.decoder.predict_velocity(window)?;
        let position = drive_arm(&config.chain, &self.solver, &mut self.arm, decoded).map_err(|e| e.at_bin(bin as usize))?;
        self.bin += 1;
        Ok(LoopStep {
            bin,
            counts,
            decoded,
            position,
            angles: self.arm.angles,
        })
    }

    /// Live step: the future is unknown, so the look-ahead holds the
    /// current velocity.
    pub fn step_live(&mut self, config: &LoopConfig, velocity: [f64; 2]) -> Result<LoopStep> {
        if velocity.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("velocity"));
        }
        let future = vec![velocity; config.encoder.config.lookahead_bins];
        self.step(config, &future)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct OpenLoopOutput {
    pub decoded: Vec<[f64; 2]>,
    pub trajectory: Vec<[f64; 2]>,
    pub angles: Vec<JointAngles>,
}

/// Decodes recorded spikes bin by bin and drives the arm from `arm`.
pub fn run_open_loop_decode(
    decoder: &DecoderModel,
    chain: &KinematicChain,
    mut arm: ArmState,
    spike_bins: &[Vec<u32>],
) -> Result<OpenLoopOutput> {
    let solver = IkSolver::default();
    let mut stream = DecoderStream::for_model(decoder);
    let mut out = OpenLoopOutput {
        decoded: Vec::with_capacity(spike_bins.len()),
        trajectory: Vec::with_capacity(spike_bins.len()),
        angles: Vec::with_capacity(spike_bins.len()),
    };
    let mut row = Vec::with_capacity(decoder.neurons());
    for (t, counts) in spike_bins.iter().enumerate() {
        row.clear();
        row.extend(counts.iter().map(|&c| c as f64));
        let v = decoder.predict_velocity(stream.push(&row).map_err(|e| e.at_bin(t))?)?;
        let p = drive_arm(chain, &solver, &mut arm, v).map_err(|e| e.at_bin(t))?;
        out.decoded.push(v);
        out.trajectory.push(p);
        out.angles.push(arm.angles);
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq)]
pub struct FullLoopOutput {
    pub spikes: Vec<Vec<u32>>,
    pub decoded: Vec<[f64; 2]>,
    pub trajectory: Vec<[f64; 2]>,
    pub angles: Vec<JointAngles>,
}

/// Runs the whole round trip over a leader trace. The look-ahead reads the
/// trace itself, zero past its end.
pub fn run_full_loop(config: &LoopConfig, leader: &[[f64; 2]]) -> Result<FullLoopOutput> {
    if leader.iter().flatten().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("leader velocity"));
    }
    let mut session = SessionState::new(config)?;
    let f = config.encoder.config.lookahead_bins;
    let mut future = vec![[0.0; 2]; f];
    let mut out = FullLoopOutput {
        spikes: Vec::with_capacity(leader.len()),
        decoded: Vec::with_capacity(leader.len()),
        trajectory: Vec::with_capacity(leader.len()),
        angles: Vec::with_capacity(leader.len()),
    };
    for t in 0..leader.len() {
        for (k, slot) in future.iter_mut().enumerate() {
            *slot = leader.get(t + k).copied().unwrap_or([0.0, 0.0]);
        }
        let step = session.step(config, &future)?;
        out.spikes.push(step.counts);
        out.decoded.push(step.decoded);
        out.trajectory.push(step.position);
        out.angles.push(step.angles);
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Correlation {
    pub value: f64,
    /// Set when either series has zero variance; `value` is then 0.
    pub degenerate: bool,
}

pub fn pearson(a: &[f64], b: &[f64]) -> Result<Correlation> {
    if a.len() != b.len() {
        return Err(Error::shape("pearson", a.len(), b.len()));
    }
    if a.is_empty() {
        return Err(Error::InsufficientSamples { needed: 1, got: 0 });
    }
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma).powi(2);
        sbb += (y - mb).powi(2);
    }
    let scale = saa.sqrt() * sbb.sqrt();
    if scale <= 1e-12 * (1.0 + ma.abs() + mb.abs()) * n {
        return Ok(Correlation { value: 0.0, degenerate: true });
    }
    Ok(Correlation {
        value: (sab / scale).clamp(-1.0, 1.0),
        degenerate: false,
    })
}

/// Share of bins whose population mean count lies in the band around `mean_count`.
pub fn rate_band_fraction(rates: &[f64], mean_count: f64) -> f64 {
    if rates.is_empty() {
        return 0.0;
    }
    let (lo, hi) = (RATE_BAND.0 * mean_count, RATE_BAND.1 * mean_count);
    rates.iter().filter(|&&r| r >= lo && r <= hi).count() as f64 / rates.len() as f64
}

/// Population mean count per bin.
pub fn rate_trace(spikes: &[Vec<u32>]) -> Vec<f64> {
    spikes
        .iter()
        .map(|row| row.iter().map(|&c| c as f64).sum::<f64>() / row.len().max(1) as f64)
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct LoopMetrics {
    pub correlation: [Correlation; 2],
    pub rmse_mm: f64,
    pub rate_trace: Vec<f64>,
    pub in_band_fraction: f64,
    pub stable: bool,
}

/// Where the leader alone would have put the arm: the same filter and
/// workspace clamp, without decoding or IK.
pub fn leader_trajectory(config: &LoopConfig, leader: &[[f64; 2]]) -> Result<Vec<[f64; 2]>> {
    let mut arm = ArmState::new(config.anchor, config.lambda, [0.0; 6])?;
    arm.dt = config.dt;
    let mut bearing = config.anchor[1].atan2(config.anchor[0]);
    leader
        .iter()
        .map(|&v| {
            let p = arm.integrate_velocity(v)?;
            let c = config.chain.clamp_planar(p, bearing);
            bearing = c[1].atan2(c[0]);
            Ok(c)
        })
        .collect()
}

pub fn evaluate_loop(config: &LoopConfig, leader: &[[f64; 2]], output: &FullLoopOutput) -> Result<LoopMetrics> {
    let t = leader.len();
    if output.decoded.len() != t || output.trajectory.len() != t || output.spikes.len() != t {
        return Err(Error::shape(
            "evaluate_loop",
            t,
            format!("{}/{}/{}", output.spikes.len(), output.decoded.len(), output.trajectory.len()),
        ));
    }
    if t == 0 {
        return Err(Error::InsufficientSamples { needed: 1, got: 0 });
    }
    let component = |src: &[[f64; 2]], c: usize| src.iter().map(|v| v[c]).collect::<Vec<f64>>();
    let correlation = [
        pearson(&component(leader, 0), &component(&output.decoded, 0))?,
        pearson(&component(leader, 1), &component(&output.decoded, 1))?,
    ];
    let reference = leader_trajectory(config, leader)?;
    let sq: f64 = reference
        .iter()
        .zip(&output.trajectory)
        .map(|(a, b)| (a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2))
        .sum();
    let rates = rate_trace(&output.spikes);
    let in_band_fraction = rate_band_fraction(&rates, config.encoder.train_mean_count);
    Ok(LoopMetrics {
        correlation,
        rmse_mm: (sq / t as f64).sqrt(),
        stable: in_band_fraction >= STABLE_FRACTION,
        in_band_fraction,
        rate_trace: rates,
    })
}

/// Leader traces are CSV with a `vx,vy` header (velocities, mm/s) or an
/// `x,y` header (positions sampled at 50 Hz, differentiated).
pub fn parse_leader_csv(text: &str, origin: &Path) -> Result<Vec<[f64; 2]>> {
    let parse_err = |line: usize, msg: String| Error::Parse {
        path: origin.to_path_buf(),
        line,
        msg,
    };
    let mut rows = text
        .lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l.trim()))
        .filter(|(_, l)| !l.is_empty() && !l.starts_with('#'));
    let (hline, header) = rows.next().ok_or_else(|| parse_err(1, "empty leader file".into()))?;
    let cols: Vec<&str> = header.split(',').map(str::trim).collect();
    let positions = match cols.as_slice() {
        ["vx", "vy"] => false,
        ["x", "y"] => true,
        _ => return Err(parse_err(hline, format!("expected header `vx,vy` or `x,y`, found `{header}`"))),
    };
    let mut values = Vec::new();
    for (line, l) in rows {
        let fields: Vec<&str> = l.split(',').map(str::trim).collect();
        if fields.len() != 2 {
            return Err(parse_err(line, format!("expected 2 columns, found {}", fields.len())));
        }
        let mut v = [0.0; 2];
        for (dst, f) in v.iter_mut().zip(&fields) {
            *dst = f.parse::<f64>().map_err(|e| parse_err(line, format!("`{f}`: {e}")))?;
            if !dst.is_finite() {
                return Err(parse_err(line, format!("non-finite value `{f}`")));
            }
        }
        values.push(v);
    }
    if positions {
        differentiate_positions(&values)
    } else {
        Ok(values)
    }
}

pub fn load_leader(path: impl AsRef<Path>) -> Result<Vec<[f64; 2]>> {
    let path = path.as_ref();
    parse_leader_csv(&std::fs::read_to_string(path)?, path)
}
