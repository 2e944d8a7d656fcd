use rand::seq::{index, SliceRandom};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{count_to_class, EncoderConfig, EncoderModel};
use crate::dataset::{mix_seed, BinnedTrial, Dataset, Split};
use crate::error::{Error, Result};
use crate::nn::{softmax_cross_entropy, AdamConfig, AdamState, Matrix};

/// Loss curves in nats per bin, summed over neurons.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct EncoderReport {
    pub initial_val_loss: f64,
    pub train_loss: Vec<f64>,
    pub val_loss: Vec<f64>,
    pub best_epoch: usize,
}

impl EncoderReport {
    pub fn best_val_loss(&self) -> f64 {
        self.val_loss.get(self.best_epoch).copied().unwrap_or(f64::NAN)
    }
}

struct TrialView<'a> {
    trial: &'a BinnedTrial,
    counts: Vec<f64>,
}

impl<'a> TrialView<'a> {
    fn new(trial: &'a BinnedTrial) -> Self {
        TrialView {
            trial,
            counts: trial.counts().iter().map(|&c| c as f64).collect(),
        }
    }
}

fn fill_batch(model: &EncoderModel, views: &[TrialView], items: &[(usize, usize)]) -> Result<(Matrix, Vec<usize>)> {
    let c = &model.config;
    let n = c.neurons;
    let rows = c.seq_len() * c.token_dim();
    let mut tokens = Matrix::zeros(items.len() * c.seq_len(), c.token_dim());
    let mut targets = Vec::with_capacity(items.len() * n);
    let mut future = vec![[0.0; 2]; c.lookahead_bins];
    for (b, &(ti, t)) in items.iter().enumerate() {
        let view = &views[ti];
        let start = t.saturating_sub(c.past_bins);
        let past: Vec<&[f64]> = (start..t).map(|s| &view.counts[s * n..(s + 1) * n]).collect();
        let vel = view.trial.velocities();
        for (k, f) in future.iter_mut().enumerate() {
            *f = vel.get(t + k).copied().unwrap_or([0.0, 0.0]);
        }
        model.write_tokens(&past, &vel[start..t], &future, &mut tokens.as_mut_slice()[b * rows..(b + 1) * rows])?;
        targets.extend(view.trial.counts_at(t).iter().map(|&x| count_to_class(x)));
    }
    Ok((tokens, targets))
}

fn velocity_statistics<'a>(trials: impl Iterator<Item = &'a BinnedTrial>) -> ([f64; 2], [f64; 2]) {
    let mut sum = [0.0; 2];
    let mut sq = [0.0; 2];
    let mut n = 0.0;
    for v in trials.flat_map(|t| t.velocities()) {
        for c in 0..2 {
            sum[c] += v[c];
            sq[c] += v[c] * v[c];
        }
        n += 1.0;
    }
    let mean = [sum[0] / n, sum[1] / n];
    let scale = [0, 1].map(|c| (sq[c] / n - mean[c] * mean[c]).max(0.0).sqrt().max(1e-6));
    (mean, scale)
}

fn validation_items(views: &[TrialView], stride: usize) -> Vec<(usize, usize)> {
    views
        .iter()
        .enumerate()
        .flat_map(|(i, v)| (0..v.trial.len()).step_by(stride).map(move |t| (i, t)))
        .collect()
}

fn mean_loss(model: &EncoderModel, views: &[TrialView], items: &[(usize, usize)]) -> Result<f64> {
    let mut total = 0.0;
    for chunk in items.chunks(128) {
        let (tokens, targets) = fill_batch(model, views, chunk)?;
        let cache = model.forward(&tokens, None)?;
        let out = softmax_cross_entropy(&model.class_logits(&cache), &targets)?;
        total += out.loss * targets.len() as f64;
    }
    Ok(total / items.len() as f64)
}

/// Mean per-bin cross-entropy (summed over neurons) on every
/// `val_stride`-th bin of a split.
pub fn evaluate_encoder(model: &EncoderModel, dataset: &Dataset, split: Split) -> Result<f64> {
    if dataset.neurons() != model.neurons() {
        return Err(Error::shape("evaluate_encoder", model.neurons(), dataset.neurons()));
    }
    let views: Vec<TrialView> = dataset.split(split).map(TrialView::new).collect();
    let items = validation_items(&views, model.config.val_stride);
    if items.is_empty() {
        return Err(Error::EmptySplit(split.as_str()));
    }
    mean_loss(model, &views, &items)
}

pub fn train_encoder(dataset: &Dataset, config: &EncoderConfig) -> Result<(EncoderModel, EncoderReport)> {
    train_encoder_with(dataset, config, |_, _, _| {})
}

/// [`train_encoder`] with a per-epoch callback `(epoch, train_loss, val_loss)`.
pub fn train_encoder_with(
    dataset: &Dataset,
    config: &EncoderConfig,
    mut on_epoch: impl FnMut(usize, f64, f64),
) -> Result<(EncoderModel, EncoderReport)> {
    config.validate()?;
    if dataset.neurons() != config.neurons {
        return Err(Error::shape("train_encoder", config.neurons, dataset.neurons()));
    }
    let train: Vec<TrialView> = dataset.split(Split::Train).filter(|t| !t.is_empty()).map(TrialView::new).collect();
    let val: Vec<TrialView> = dataset.split(Split::Validation).map(TrialView::new).collect();
    if train.is_empty() {
        return Err(Error::EmptySplit("train"));
    }
    let val_items = validation_items(&val, config.val_stride);
    if val_items.is_empty() {
        return Err(Error::EmptySplit("validation"));
    }

    let mut model = EncoderModel::new(config.clone())?;
    let (mean, scale) = velocity_statistics(train.iter().map(|v| v.trial));
    model.vel_mean = mean;
    model.vel_scale = scale;
    model.train_mean_count = dataset.mean_count(Split::Train);

    let mut report = EncoderReport {
        initial_val_loss: mean_loss(&model, &val, &val_items)?,
        ..Default::default()
    };
    let mut adam = AdamState::new(AdamConfig {
        weight_decay: config.weight_decay,
        ..AdamConfig::with_lr(config.lr)
    });
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(config.seed, 0xE7C0));
    let mut best = model.clone();
    let mut best_val = f64::INFINITY;

    for epoch in 0..config.epochs {
        let mut items: Vec<(usize, usize)> = Vec::with_capacity(train.len() * config.windows_per_trial);
        for (i, view) in train.iter().enumerate() {
            let len = view.trial.len();
            let take = config.windows_per_trial.min(len);
            items.extend(index::sample(&mut rng, len, take).into_iter().map(|t| (i, t)));
        }
        items.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        for chunk in items.chunks(config.batch_size) {
            let (tokens, targets) = fill_batch(&model, &train, chunk)?;
            let cache = model.forward(&tokens, Some(&mut rng))?;
            let out = softmax_cross_entropy(&model.class_logits(&cache), &targets)?;
            if !out.loss.is_finite() {
                return Err(Error::NonFinite("encoder training loss"));
            }
            loss_sum += out.loss * targets.len() as f64;
            let grads = model.backward(&cache, &out.grad)?;
            adam.step(&mut model.params_mut(), &grads.slices())?;
        }
        let train_loss = loss_sum / items.len() as f64;
        let val_loss = mean_loss(&model, &val, &val_items)?;
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
