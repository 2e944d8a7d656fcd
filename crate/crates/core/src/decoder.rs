//! Windowed MLP decoder: the last 50 bins of population counts → current
//! hand velocity (mm/s).

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::dataset::{BinnedTrial, Dataset, Split};
use crate::error::{Error, Result};
use crate::nn::{mse_loss, Activation, AdamConfig, AdamState, DenseGrads, DenseLayer, Matrix, WeightFile};

pub const DECODER_KIND: &str = "decoder-mlp-v1";
pub const WINDOW_BINS: usize = 50;
const SCALE_FLOOR: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecoderConfig {
    pub window_bins: usize,
    pub hidden_sizes: Vec<usize>,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for DecoderConfig {
    fn default() -> Self {
        DecoderConfig {
            window_bins: WINDOW_BINS,
            hidden_sizes: vec![256, 128],
            epochs: 30,
            batch_size: 256,
            lr: 1e-3,
            seed: 0,
        }
    }
}

impl DecoderConfig {
    fn validate(&self) -> Result<()> {
        if self.window_bins == 0 || self.hidden_sizes.contains(&0) || self.batch_size == 0 {
            return Err(Error::InvalidArgument(format!("invalid decoder config {self:?}")));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum WindowMode {
    /// Only bins with a full history: t ∈ [window−1, T).
    Train,
    /// Every bin, zero-padding missing history on the old side.
    Stream,
}

/// Flattened window, oldest bin first: entry `j·neurons + n` is neuron `n`
/// at bin `t − window + 1 + j`.
#[derive(Clone, Debug, PartialEq)]
pub struct WindowedSample {
    pub bin: usize,
    pub window: Vec<f64>,
    pub target: [f64; 2],
}

pub fn assemble_windows(trial: &BinnedTrial, window_bins: usize, mode: WindowMode) -> Vec<WindowedSample> {
    let n = trial.neurons();
    let first = match mode {
        WindowMode::Train => window_bins - 1,
        WindowMode::Stream => 0,
    };
    (first..trial.len())
        .map(|t| {
            let mut window = vec![0.0; window_bins * n];
            fill_window(trial, t, window_bins, &mut window);
            WindowedSample {
                bin: t,
                window,
                target: trial.velocities()[t],
            }
        })
        .collect()
}

fn fill_window(trial: &BinnedTrial, t: usize, window_bins: usize, out: &mut [f64]) {
    let n = trial.neurons();
    let pad = (window_bins - 1).saturating_sub(t);
    out[..pad * n].iter_mut().for_each(|v| *v = 0.0);
    let start = t + 1 + pad - window_bins;
    for (dst, &c) in out[pad * n..].iter_mut().zip(&trial.counts()[start * n..(t + 1) * n]) {
        *dst = c as f64;
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DecoderModel {
    pub config: DecoderConfig,
    neurons: usize,
    layers: Vec<DenseLayer>,
    feature_mean: Vec<f64>,
    feature_scale: Vec<f64>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainReport {
    pub train_loss: Vec<f64>,
    pub val_loss: Vec<f64>,
    pub best_epoch: usize,
}

impl TrainReport {
    pub fn best_val_loss(&self) -> f64 {
        self.val_loss.get(self.best_epoch).copied().unwrap_or(f64::NAN)
    }
}

impl DecoderModel {
    pub fn new(config: DecoderConfig, neurons: usize) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let input = config.window_bins * neurons;
        let mut layers = Vec::new();
        let mut width = input;
        for &h in &config.hidden_sizes {
            layers.push(DenseLayer::new(width, h, Activation::Relu, &mut rng));
            width = h;
        }
        layers.push(DenseLayer::new(width, 2, Activation::Identity, &mut rng));
        Ok(DecoderModel {
            config,
            neurons,
            layers,
            feature_mean: vec![0.0; input],
            feature_scale: vec![1.0; input],
        })
    }

    pub fn neurons(&self) -> usize {
        self.neurons
    }

    pub fn input_dim(&self) -> usize {
        self.config.window_bins * self.neurons
    }

    pub fn layers(&self) -> &[DenseLayer] {
        &self.layers
    }

    #[cfg(test)]
    pub(crate) fn layers_mut(&mut self) -> &mut [DenseLayer] {
        &mut self.layers
    }

    pub fn normalization(&self) -> (&[f64], &[f64]) {
        (&self.feature_mean, &self.feature_scale)
    }

    pub fn set_normalization(&mut self, mean: Vec<f64>, scale: Vec<f64>) -> Result<()> {
        let d = self.input_dim();
        if mean.len() != d || scale.len() != d {
            return Err(Error::shape("set_normalization", d, format!("{} / {}", mean.len(), scale.len())));
        }
        if mean.iter().chain(&scale).any(|v| !v.is_finite()) || scale.iter().any(|&s| s <= 0.0) {
            return Err(Error::InvalidArgument("normalization must be finite with positive scale".into()));
        }
        self.feature_mean = mean;
        self.feature_scale = scale;
        Ok(())
    }

    fn normalize_into(&self, raw: &[f64], out: &mut [f64]) {
        for (((o, r), m), s) in out.iter_mut().zip(raw).zip(&self.feature_mean).zip(&self.feature_scale) {
            *o = (r - m) / s;
        }
    }

    /// Forward pass on already-normalized rows, keeping every activation.
    fn forward_all(&self, x: Matrix) -> Result<Vec<Matrix>> {
        let mut acts = vec![x];
        for layer in &self.layers {
            let next = layer.forward(acts.last().expect("non-empty"))?;
            acts.push(next);
        }
        Ok(acts)
    }

    /// Predicts velocities for a batch of raw-count windows (one per row).
    pub fn predict_batch(&self, raw: &Matrix) -> Result<Matrix> {
        if raw.cols() != self.input_dim() {
            return Err(Error::shape("predict_velocity", self.input_dim(), raw.cols()));
        }
        let mut x = Matrix::zeros(raw.rows(), raw.cols());
        for r in 0..raw.rows() {
            self.normalize_into(raw.row(r), x.row_mut(r));
        }
        Ok(self.forward_all(x)?.pop().expect("output layer"))
    }

    pub fn predict_velocity(&self, window: &[f64]) -> Result<[f64; 2]> {
        if window.len() != self.input_dim() {
            return Err(Error::shape("predict_velocity", self.input_dim(), window.len()));
        }
        let raw = Matrix::new(1, window.len(), window.to_vec())?;
        let out = self.predict_batch(&raw)?;
        Ok([out.get(0, 0), out.get(0, 1)])
    }

    /// Predictions for every full-history window of the given trials.
    pub fn predict_trials<'a>(&self, trials: impl IntoIterator<Item = &'a BinnedTrial>) -> Result<(Vec<[f64; 2]>, Vec<[f64; 2]>)> {
        let index = window_index(trials, self.config.window_bins);
        let mut preds = Vec::with_capacity(index.len());
        let mut targets = Vec::with_capacity(index.len());
        for chunk in index.chunks(512) {
            let x = self.batch_matrix(chunk);
            let out = self.forward_all(x)?.pop().expect("output");
            for (r, (trial, t)) in chunk.iter().enumerate() {
                preds.push([out.get(r, 0), out.get(r, 1)]);
                targets.push(trial.velocities()[*t]);
            }
        }
        Ok((preds, targets))
    }

    fn batch_matrix(&self, items: &[(&BinnedTrial, usize)]) -> Matrix {
        let d = self.input_dim();
        let mut raw = vec![0.0; d];
        let mut x = Matrix::zeros(items.len(), d);
        for (r, (trial, t)) in items.iter().enumerate() {
            fill_window(trial, *t, self.config.window_bins, &mut raw);
            self.normalize_into(&raw, x.row_mut(r));
        }
        x
    }

    fn params_mut(&mut self) -> Vec<&mut [f64]> {
        self.layers.iter_mut().flat_map(|l| l.params_mut()).collect()
    }

    pub fn to_weight_file(&self) -> WeightFile {
        let mut wf = WeightFile::new(&json!({
            "kind": DECODER_KIND,
            "neurons": self.neurons,
            "config": self.config,
        }));
        for (i, l) in self.layers.iter().enumerate() {
            wf.push_matrix(format!("layer{i}.weight"), &l.weight);
            wf.push_f64(format!("layer{i}.bias"), &[l.bias.len()], &l.bias);
        }
        wf.push_f64("norm.mean", &[self.feature_mean.len()], &self.feature_mean);
        wf.push_f64("norm.scale", &[self.feature_scale.len()], &self.feature_scale);
        wf
    }

    pub fn from_weight_file(wf: &WeightFile) -> Result<Self> {
        let manifest = wf.expect_kind(DECODER_KIND)?;
        let config: DecoderConfig = serde_json::from_value(manifest["config"].clone())
            .map_err(|e| Error::Weights(format!("decoder config: {e}")))?;
        let neurons = manifest["neurons"]
            .as_u64()
            .ok_or_else(|| Error::Weights("decoder manifest lacks neurons".into()))? as usize;
        let mut model = DecoderModel::new(config, neurons)?;
        for (i, l) in model.layers.iter_mut().enumerate() {
            let (rows, cols) = l.weight.shape();
            l.weight = wf.matrix(&format!("layer{i}.weight"), rows, cols)?;
            l.bias = wf.vector(&format!("layer{i}.bias"), rows)?;
        }
        let d = model.input_dim();
        model.set_normalization(wf.vector("norm.mean", d)?, wf.vector("norm.scale", d)?)?;
        Ok(model)
    }

    pub fn save(&self, path: impl AsRef<std::path::Path>) -> Result<()> {
        self.to_weight_file().save(path)
    }

    pub fn load(path: impl AsRef<std::path::Path>) -> Result<Self> {
        DecoderModel::from_weight_file(&WeightFile::load(path)?)
    }
}

fn window_index<'a>(trials: impl IntoIterator<Item = &'a BinnedTrial>, window_bins: usize) -> Vec<(&'a BinnedTrial, usize)> {
    trials
        .into_iter()
        .flat_map(|tr| (window_bins - 1..tr.len()).map(move |t| (tr, t)))
        .collect()
}

/// Per-feature mean and standard deviation (floored) over full-history windows.
fn window_statistics(index: &[(&BinnedTrial, usize)], window_bins: usize, neurons: usize) -> (Vec<f64>, Vec<f64>) {
    let d = window_bins * neurons;
    let mut sum = vec![0.0; d];
    let mut sum_sq = vec![0.0; d];
    let mut raw = vec![0.0; d];
    for (trial, t) in index {
        fill_window(trial, *t, window_bins, &mut raw);
        for ((s, q), r) in sum.iter_mut().zip(sum_sq.iter_mut()).zip(&raw) {
            *s += r;
            *q += r * r;
        }
    }
    let n = index.len().max(1) as f64;
    let mean: Vec<f64> = sum.iter().map(|s| s / n).collect();
    let scale = sum_sq
        .iter()
        .zip(&mean)
        .map(|(q, m)| (q / n - m * m).max(0.0).sqrt().max(SCALE_FLOOR))
        .collect();
    (mean, scale)
}

/// Trains on the train split, selecting the epoch with the lowest
/// validation MSE.
pub fn train_decoder(dataset: &Dataset, config: &DecoderConfig) -> Result<(DecoderModel, TrainReport)> {
    train_decoder_with(dataset, config, |_, _, _| {})
}

/// [`train_decoder`] with a per-epoch callback `(epoch, train_loss, val_loss)`.
pub fn train_decoder_with(
    dataset: &Dataset,
    config: &DecoderConfig,
    mut on_epoch: impl FnMut(usize, f64, f64),
) -> Result<(DecoderModel, TrainReport)> {
    config.validate()?;
    let train = window_index(dataset.split(Split::Train), config.window_bins);
    let val = window_index(dataset.split(Split::Validation), config.window_bins);
    if train.is_empty() {
        return Err(Error::EmptySplit("train"));
    }
    if val.is_empty() {
        return Err(Error::EmptySplit("validation"));
    }
    let mut model = DecoderModel::new(config.clone(), dataset.neurons())?;
    let (mean, scale) = window_statistics(&train, config.window_bins, dataset.neurons());
    model.set_normalization(mean, scale)?;

    let mut adam = AdamState::new(AdamConfig::with_lr(config.lr));
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(crate::dataset::mix_seed(config.seed, 0xDEC0));
    let mut report = TrainReport::default();
    let mut best = model.clone();
    let mut best_val = f64::INFINITY;

    for epoch in 0..config.epochs {
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        for chunk in order.chunks(config.batch_size) {
            let items: Vec<_> = chunk.iter().map(|&i| train[i]).collect();
            let x = model.batch_matrix(&items);
            let target = Matrix::from_fn(items.len(), 2, |r, c| items[r].0.velocities()[items[r].1][c]);
            let acts = model.forward_all(x)?;
            let loss = mse_loss(acts.last().expect("output"), &target)?;
            loss_sum += loss.loss * items.len() as f64;

            let mut grad = loss.grad;
            let mut grads: Vec<DenseGrads> = Vec::with_capacity(model.layers.len());
            for (i, layer) in model.layers.iter().enumerate().rev() {
                if i == 0 {
                    grads.push(layer.backward_params(&acts[i], &acts[i + 1], &grad)?);
                } else {
                    let (g_in, g) = layer.backward(&acts[i], &acts[i + 1], &grad)?;
                    grads.push(g);
                    grad = g_in;
                }
            }
            grads.reverse();
            let slices: Vec<&[f64]> = grads.iter().flat_map(|g| g.slices()).collect();
            adam.step(&mut model.params_mut(), &slices)?;
        }
        let train_loss = loss_sum / train.len() as f64;
        let val_loss = evaluate_mse(&model, &val)?;
        report.train_loss.push(train_loss);
        report.val_loss.push(val_loss);
        if val_loss < best_val {
            best_val = val_loss;
            best = model.clone();
            report.best_epoch = epoch;
        }
        on_epoch(epoch, train_loss, val_loss);
    }
    Ok((best, report))
}

fn evaluate_mse(model: &DecoderModel, index: &[(&BinnedTrial, usize)]) -> Result<f64> {
    let mut total = 0.0;
    for chunk in index.chunks(512) {
        let x = model.batch_matrix(chunk);
        let out = model.forward_all(x)?.pop().expect("output");
        for (r, (trial, t)) in chunk.iter().enumerate() {
            let v = trial.velocities()[*t];
            total += (out.get(r, 0) - v[0]).powi(2) + (out.get(r, 1) - v[1]).powi(2);
        }
    }
    Ok(total / (2 * index.len()) as f64)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RSquared {
    pub per_component: [f64; 2],
    pub mean: f64,
}

/// Coefficient of determination per velocity component, and their mean.
pub fn r_squared(predictions: &[[f64; 2]], targets: &[[f64; 2]]) -> Result<RSquared> {
    if predictions.len() != targets.len() {
        return Err(Error::shape("r_squared", targets.len(), predictions.len()));
    }
    if targets.len() < 2 {
        return Err(Error::InsufficientSamples {
            needed: 2,
            got: targets.len(),
        });
    }
    let n = targets.len() as f64;
    let mut per_component = [0.0; 2];
    for c in 0..2 {
        let mean = targets.iter().map(|t| t[c]).sum::<f64>() / n;
        let ss_tot: f64 = targets.iter().map(|t| (t[c] - mean).powi(2)).sum();
        if ss_tot <= 0.0 {
            return Err(Error::UndefinedRSquared(c));
        }
        let ss_res: f64 = predictions.iter().zip(targets).map(|(p, t)| (p[c] - t[c]).powi(2)).sum();
        per_component[c] = 1.0 - ss_res / ss_tot;
    }
    Ok(RSquared {
        per_component,
        mean: (per_component[0] + per_component[1]) / 2.0,
    })
}

/// Rolling window for bin-by-bin decoding: starts as all zeros and shifts
/// in one count vector per bin.
#[derive(Clone, Debug)]
pub struct DecoderStream {
    neurons: usize,
    window: Vec<f64>,
}

impl DecoderStream {
    pub fn new(window_bins: usize, neurons: usize) -> Self {
        DecoderStream {
            neurons,
            window: vec![0.0; window_bins * neurons],
        }
    }

    pub fn for_model(model: &DecoderModel) -> Self {
        DecoderStream::new(model.config.window_bins, model.neurons())
    }

    pub fn push(&mut self, counts: &[f64]) -> Result<&[f64]> {
        if counts.len() != self.neurons {
            return Err(Error::shape("DecoderStream::push", self.neurons, counts.len()));
        }
        self.window.rotate_left(self.neurons);
        let tail = self.window.len() - self.neurons;
        self.window[tail..].copy_from_slice(counts);
        Ok(&self.window)
    }

    pub fn window(&self) -> &[f64] {
        &self.window
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::SyntheticTask;

    fn small_trial(bins: usize) -> BinnedTrial {
        let n = 3;
        let counts = (0..bins * n).map(|i| (i % 7) as u32).collect();
        let vel = (0..bins).map(|t| [t as f64, -(t as f64)]).collect();
        BinnedTrial::new(0, Split::Train, 0.0, n, counts, vel).unwrap()
    }

    #[test]
    fn window_counts() {
        assert_eq!(assemble_windows(&small_trial(60), 50, WindowMode::Train).len(), 11);
        assert_eq!(assemble_windows(&small_trial(49), 50, WindowMode::Train).len(), 0);
        assert_eq!(assemble_windows(&small_trial(49), 50, WindowMode::Stream).len(), 49);
    }

    #[test]
    fn stream_cold_start_is_zero_padded() {
        let trial = small_trial(5);
        let w = &assemble_windows(&trial, 50, WindowMode::Stream)[0];
        assert_eq!(w.bin, 0);
        assert!(w.window[..49 * 3].iter().all(|&v| v == 0.0));
        let last: Vec<f64> = trial.counts_at(0).iter().map(|&c| c as f64).collect();
        assert_eq!(&w.window[49 * 3..], &last[..]);
    }

    #[test]
    fn window_layout_and_mode_agreement() {
        let trial = small_trial(70);
        let train = assemble_windows(&trial, 50, WindowMode::Train);
        let stream = assemble_windows(&trial, 50, WindowMode::Stream);
        for s in &train {
            for j in 0..50 {
                for n in 0..3 {
                    assert_eq!(s.window[j * 3 + n], trial.counts_at(s.bin - 49 + j)[n] as f64);
                }
            }
            assert_eq!(s, &stream[s.bin]);
        }
    }

    #[test]
    fn stream_matches_assembled_windows() {
        let trial = small_trial(60);
        let mut stream = DecoderStream::new(50, 3);
        for w in assemble_windows(&trial, 50, WindowMode::Stream) {
            let counts: Vec<f64> = trial.counts_at(w.bin).iter().map(|&c| c as f64).collect();
            assert_eq!(stream.push(&counts).unwrap(), &w.window[..]);
        }
        assert!(stream.push(&[1.0]).is_err());
    }

    #[test]
    fn r_squared_examples() {
        let t: Vec<[f64; 2]> = (0..4).map(|i| [i as f64, 2.0 * i as f64]).collect();
        assert_eq!(r_squared(&t, &t).unwrap().mean, 1.0);
        let mean_pred = vec![[1.5, 3.0]; 4];
        assert!(r_squared(&mean_pred, &t).unwrap().mean.abs() < 1e-12);
        // SS_res = 4 (each off by one), SS_tot = 5 → 0.2.
        let shifted: Vec<[f64; 2]> = t.iter().map(|v| [v[0] + 1.0, v[1]]).collect();
        let r = r_squared(&shifted, &t).unwrap();
        assert!((r.per_component[0] - 0.2).abs() < 1e-12);
        assert_eq!(r.per_component[1], 1.0);
        assert!(matches!(r_squared(&t, &vec![[1.0, 0.0]; 4]), Err(Error::UndefinedRSquared(0))));
        assert!(r_squared(&t[..1], &t[..1]).is_err());
    }

    #[test]
    fn predict_checks_length_and_is_finite() {
        let model = DecoderModel::new(
            DecoderConfig {
                hidden_sizes: vec![8, 4],
                ..Default::default()
            },
            3,
        )
        .unwrap();
        assert!(model.predict_velocity(&[0.0; 10]).is_err());
        let zero = model.predict_velocity(&vec![0.0; 150]).unwrap();
        assert!(zero[0].is_finite() && zero[1].is_finite());
        assert_eq!(zero, model.predict_velocity(&vec![0.0; 150]).unwrap());
    }

    #[test]
    fn empty_splits_are_rejected() {
        let task = SyntheticTask::from_seed(4, 0);
        let mut trials = task.generate_dataset(10, 60, 0).unwrap().trials().to_vec();
        for t in &mut trials {
            t.split = Split::Train;
        }
        let ds = Dataset::new(4, trials).unwrap();
        let err = train_decoder(&ds, &DecoderConfig::default()).unwrap_err();
        assert!(matches!(err, Error::EmptySplit("validation")));
    }

    #[test]
    fn weight_file_round_trip() {
        let task = SyntheticTask::from_seed(4, 0);
        let ds = task.generate_dataset(40, 60, 0).unwrap();
        let cfg = DecoderConfig {
            hidden_sizes: vec![8, 4],
            epochs: 2,
            batch_size: 16,
            ..Default::default()
        };
        let (model, _) = train_decoder(&ds, &cfg).unwrap();
        let back = DecoderModel::from_weight_file(&model.to_weight_file()).unwrap();
        assert_eq!(back, model);
    }
}
