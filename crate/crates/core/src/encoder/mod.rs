//! Generative spike encoder: a causal transformer reads the last `P` bins
//! of (counts, velocity) and the next `F` bins of velocity, and predicts a
//! distribution over {0, …, 7, 8+} spikes for every neuron in the current
//! bin.
//!
//! Token `i < P` carries bin `t − P + i` (counts and velocity); token
//! `P + k` carries the future velocity `v_{t+k}` with a zeroed count slot.
//! The head reads the final token, the only position that has attended to
//! the whole look-ahead under the causal mask.

mod generate;
mod train;

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::error::{Error, Result};
use crate::nn::attention::Queries;
use crate::nn::{
    softmax_rows, Activation, AttentionBlock, AttentionCache, AttentionGrads, DenseGrads, DenseLayer, LayerNorm,
    LayerNormCache, LayerNormGrads, Matrix, WeightFile,
};

pub use generate::{generate_closed_loop, GenerationState};
pub use train::{evaluate_encoder, train_encoder, train_encoder_with, EncoderReport};

pub const ENCODER_KIND: &str = "encoder-transformer-v1";
pub const CLASS_COUNT: usize = 9;
/// Counts at or above this share the top class.
pub const SATURATION: u32 = 8;
/// Below this temperature sampling becomes argmax.
pub const ARGMAX_TEMPERATURE: f64 = 1e-3;

pub fn count_to_class(count: u32) -> usize {
    count.min(SATURATION) as usize
}

pub fn class_to_count(class: usize) -> Result<u32> {
    if class < CLASS_COUNT {
        Ok(class as u32)
    } else {
        Err(Error::InvalidArgument(format!("class {class} outside 0..{CLASS_COUNT}")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub past_bins: usize,
    pub lookahead_bins: usize,
    pub classes: usize,
    pub neurons: usize,
    pub d_model: usize,
    pub layers: usize,
    pub heads: usize,
    pub ff_dim: usize,
    pub dropout: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub seed: u64,
    pub temperature: f64,
    /// Target bins drawn (without replacement) from each training trial per epoch.
    pub windows_per_trial: usize,
    /// Validation uses every `val_stride`-th bin of each validation trial.
    pub val_stride: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            past_bins: 50,
            lookahead_bins: 40,
            classes: CLASS_COUNT,
            neurons: crate::dataset::NEURON_COUNT,
            d_model: 64,
            layers: 2,
            heads: 4,
            ff_dim: 128,
            dropout: 0.1,
            epochs: 60,
            batch_size: 64,
            lr: 0.0005,
            weight_decay: 0.0,
            seed: 0,
            temperature: 1.0,
            windows_per_trial: 4,
            val_stride: 3,
        }
    }
}

impl EncoderConfig {
    pub fn seq_len(&self) -> usize {
        self.past_bins + self.lookahead_bins
    }

    pub fn token_dim(&self) -> usize {
        self.neurons + 2
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if self.classes != CLASS_COUNT {
            return bad(format!("classes must be {CLASS_COUNT}"));
        }
        if self.lookahead_bins == 0 || self.past_bins == 0 || self.neurons == 0 {
            return bad("past, look-ahead and neuron counts must be positive".into());
        }
        if self.layers == 0 || self.heads == 0 || self.d_model % self.heads != 0 {
            return bad(format!("{} heads must divide d_model {} (layers {})", self.heads, self.d_model, self.layers));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout {} outside [0, 1)", self.dropout));
        }
        if self.batch_size == 0 || self.windows_per_trial == 0 || self.val_stride == 0 {
            return bad("batch size, windows per trial and validation stride must be positive".into());
        }
        Ok(())
    }
}

/// Token features for one prediction: `(P + F) × (neurons + 2)`.
#[derive(Clone, Debug, PartialEq)]
pub struct EncoderInput {
    pub tokens: Matrix,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EncoderModel {
    pub config: EncoderConfig,
    pub input: DenseLayer,
    pub positions: Matrix,
    pub blocks: Vec<AttentionBlock>,
    pub ln_f: LayerNorm,
    pub head: DenseLayer,
    pub vel_mean: [f64; 2],
    pub vel_scale: [f64; 2],
    /// Mean count per neuron per bin on the training split.
    pub train_mean_count: f64,
}

pub(crate) struct ForwardCache {
    batch: usize,
    tokens: Matrix,
    blocks: Vec<AttentionCache>,
    ln_f: LayerNormCache,
    normed: Matrix,
    logits: Matrix,
}

pub(crate) struct EncoderGrads {
    input: DenseGrads,
    positions: Vec<f64>,
    blocks: Vec<AttentionGrads>,
    ln_f: LayerNormGrads,
    head: DenseGrads,
}

impl EncoderGrads {
    fn slices(&self) -> Vec<&[f64]> {
        let mut out: Vec<&[f64]> = Vec::new();
        out.extend(self.input.slices());
        out.push(&self.positions);
        for b in &self.blocks {
            out.extend(b.slices());
        }
        out.extend(self.ln_f.slices());
        out.extend(self.head.slices());
        out
    }
}

impl EncoderModel {
    /// Fresh model. The output head starts at zero, so every neuron's
    /// distribution is uniform before training.
    pub fn new(config: EncoderConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let d = config.d_model;
        let len = config.seq_len();
        let input = DenseLayer::new(config.token_dim(), d, Activation::Identity, &mut rng);
        let positions = Matrix::from_fn(len, d, |_, _| rng.gen_range(-0.1..0.1));
        let blocks = (0..config.layers)
            .map(|_| AttentionBlock::new(d, config.heads, config.ff_dim, len, true, config.dropout, &mut rng))
            .collect::<Result<Vec<_>>>()?;
        Ok(EncoderModel {
            head: DenseLayer::zeros(d, config.neurons * CLASS_COUNT, Activation::Identity),
            ln_f: LayerNorm::new(d),
            input,
            positions,
            blocks,
            vel_mean: [0.0; 2],
            vel_scale: [1.0; 2],
            train_mean_count: 0.0,
            config,
        })
    }

    pub fn neurons(&self) -> usize {
        self.config.neurons
    }

    fn normalize_velocity(&self, v: [f64; 2]) -> [f64; 2] {
        [
            (v[0] - self.vel_mean[0]) / self.vel_scale[0],
            (v[1] - self.vel_mean[1]) / self.vel_scale[1],
        ]
    }

    /// Writes one sequence of token features into `out` (`seq_len` rows).
    /// History shorter than `P` is zero-padded on the old side.
    pub(crate) fn write_tokens(
        &self,
        past_counts: &[&[f64]],
        past_velocities: &[[f64; 2]],
        future_velocities: &[[f64; 2]],
        out: &mut [f64],
    ) -> Result<()> {
        let c = &self.config;
        let n = c.neurons;
        let w = c.token_dim();
        if past_counts.len() != past_velocities.len() || past_counts.len() > c.past_bins {
            return Err(Error::shape(
                "build_encoder_input",
                format!("at most {} past bins of counts and velocities", c.past_bins),
                format!("{} / {}", past_counts.len(), past_velocities.len()),
            ));
        }
        if future_velocities.len() != c.lookahead_bins {
            return Err(Error::shape("build_encoder_input", c.lookahead_bins, future_velocities.len()));
        }
        if let Some(bad) = past_counts.iter().find(|r| r.len() != n) {
            return Err(Error::shape("build_encoder_input", n, bad.len()));
        }
        if past_velocities.iter().chain(future_velocities).flatten().any(|v| !v.is_finite())
            || past_counts.iter().flat_map(|r| r.iter()).any(|v| !v.is_finite())
        {
            return Err(Error::NonFinite("encoder input"));
        }
        let pad = c.past_bins - past_counts.len();
        let rest = self.normalize_velocity([0.0, 0.0]);
        for i in 0..c.seq_len() {
            let row = &mut out[i * w..(i + 1) * w];
            let (counts, v) = if i < pad {
                (None, rest)
            } else if i < c.past_bins {
                (Some(past_counts[i - pad]), self.normalize_velocity(past_velocities[i - pad]))
            } else {
                (None, self.normalize_velocity(future_velocities[i - c.past_bins]))
            };
            match counts {
                Some(cs) => {
                    for (dst, &x) in row[..n].iter_mut().zip(cs) {
                        *dst = x.min(SATURATION as f64);
                    }
                }
                None => row[..n].iter_mut().for_each(|x| *x = 0.0),
            }
            row[n] = v[0];
            row[n + 1] = v[1];
        }
        Ok(())
    }

    pub fn build_encoder_input(
        &self,
        past_counts: &[&[f64]],
        past_velocities: &[[f64; 2]],
        future_velocities: &[[f64; 2]],
    ) -> Result<EncoderInput> {
        let mut tokens = Matrix::zeros(self.config.seq_len(), self.config.token_dim());
        self.write_tokens(past_counts, past_velocities, future_velocities, tokens.as_mut_slice())?;
        Ok(EncoderInput { tokens })
    }

    pub(crate) fn forward(&self, tokens: &Matrix, mut rng: Option<&mut dyn RngCore>) -> Result<ForwardCache> {
        let len = self.config.seq_len();
        if tokens.cols() != self.config.token_dim() || tokens.rows() % len != 0 || tokens.rows() == 0 {
            return Err(Error::shape(
                "encoder_forward",
                format!("(batch·{len}) x {}", self.config.token_dim()),
                format!("{}x{}", tokens.rows(), tokens.cols()),
            ));
        }
        let batch = tokens.rows() / len;
        let mut x = self.input.forward(tokens)?;
        for r in 0..x.rows() {
            let p = self.positions.row(r % len);
            for (a, b) in x.row_mut(r).iter_mut().zip(p) {
                *a += b;
            }
        }
        let mut blocks = Vec::with_capacity(self.blocks.len());
        let n_blocks = self.blocks.len();
        for (i, blk) in self.blocks.iter().enumerate() {
            let q = if i + 1 == n_blocks { Queries::Last } else { Queries::All };
            let (y, cache) = match rng.as_deref_mut() {
                Some(r) => blk.forward_train(&x, len, q, r)?,
                None => blk.forward(&x, len, q)?,
            };
            blocks.push(cache);
            x = y;
        }
        let (normed, ln_f) = self.ln_f.forward(&x)?;
        let logits = self.head.forward(&normed)?;
        Ok(ForwardCache {
            batch,
            tokens: tokens.clone(),
            blocks,
            ln_f,
            normed,
            logits,
        })
    }

    /// `dlogits` is `(batch · neurons) × classes`, row-major like the logits.
    pub(crate) fn backward(&self, cache: &ForwardCache, dlogits: &Matrix) -> Result<EncoderGrads> {
        let n = self.config.neurons;
        let dl = Matrix::new(cache.batch, n * CLASS_COUNT, dlogits.as_slice().to_vec())?;
        let (dnormed, head) = self.head.backward(&cache.normed, &cache.logits, &dl)?;
        let (mut dx, ln_f) = self.ln_f.backward(&cache.ln_f, &dnormed);
        let mut blocks = Vec::with_capacity(self.blocks.len());
        for (blk, bc) in self.blocks.iter().zip(&cache.blocks).rev() {
            let (g_in, g) = blk.backward(bc, &dx)?;
            blocks.push(g);
            dx = g_in;
        }
        blocks.reverse();
        let len = self.config.seq_len();
        let mut positions = vec![0.0; len * self.config.d_model];
        for r in 0..dx.rows() {
            let dst = &mut positions[(r % len) * self.config.d_model..][..self.config.d_model];
            for (a, b) in dst.iter_mut().zip(dx.row(r)) {
                *a += b;
            }
        }
        // Identity activation: the forward output is never read.
        let embed_out = Matrix::zeros(dx.rows(), self.config.d_model);
        let input = self.input.backward_params(&cache.tokens, &embed_out, &dx)?;
        Ok(EncoderGrads {
            input,
            positions,
            blocks,
            ln_f,
            head,
        })
    }

    pub(crate) fn params_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out: Vec<&mut [f64]> = Vec::new();
        out.extend(self.input.params_mut());
        out.push(self.positions.as_mut_slice());
        for b in &mut self.blocks {
            out.extend(b.params_mut());
        }
        out.extend(self.ln_f.params_mut());
        out.extend(self.head.params_mut());
        out
    }

    /// Logits reshaped to one row per (sequence, neuron).
    fn class_logits(&self, cache: &ForwardCache) -> Matrix {
        Matrix::new(
            cache.batch * self.config.neurons,
            CLASS_COUNT,
            cache.logits.as_slice().to_vec(),
        )
        .expect("head width is neurons × classes")
    }

    /// `neurons × 9` probabilities for the bin the input was built for.
    pub fn predict_spike_distribution(&self, input: &EncoderInput) -> Result<Matrix> {
        let cache = self.forward(&input.tokens, None)?;
        Ok(softmax_rows(&self.class_logits(&cache)))
    }

    pub fn to_weight_file(&self) -> WeightFile {
        let mut wf = WeightFile::new(&json!({
            "kind": ENCODER_KIND,
            "config": self.config,
            "past_bins": self.config.past_bins,
            "lookahead_bins": self.config.lookahead_bins,
            "classes": CLASS_COUNT,
            "d_model": self.config.d_model,
            "layers": self.config.layers,
            "heads": self.config.heads,
            "train_mean_count": self.train_mean_count,
        }));
        wf.push_matrix("input.weight", &self.input.weight);
        wf.push_f64("input.bias", &[self.input.bias.len()], &self.input.bias);
        wf.push_matrix("positions", &self.positions);
        for (i, b) in self.blocks.iter().enumerate() {
            for (name, l) in [("wq", &b.wq), ("wk", &b.wk), ("wv", &b.wv), ("wo", &b.wo), ("ff1", &b.ff1), ("ff2", &b.ff2)] {
                wf.push_matrix(format!("block{i}.{name}.weight"), &l.weight);
                wf.push_f64(format!("block{i}.{name}.bias"), &[l.bias.len()], &l.bias);
            }
            for (name, ln) in [("ln1", &b.ln1), ("ln2", &b.ln2)] {
                wf.push_f64(format!("block{i}.{name}.gamma"), &[ln.dim()], &ln.gamma);
                wf.push_f64(format!("block{i}.{name}.beta"), &[ln.dim()], &ln.beta);
            }
        }
        wf.push_f64("ln_f.gamma", &[self.ln_f.dim()], &self.ln_f.gamma);
        wf.push_f64("ln_f.beta", &[self.ln_f.dim()], &self.ln_f.beta);
        wf.push_matrix("head.weight", &self.head.weight);
        wf.push_f64("head.bias", &[self.head.bias.len()], &self.head.bias);
        wf.push_f64("vel.mean", &[2], &self.vel_mean);
        wf.push_f64("vel.scale", &[2], &self.vel_scale);
        wf
    }

    pub fn from_weight_file(wf: &WeightFile) -> Result<Self> {
        let manifest = wf.expect_kind(ENCODER_KIND)?;
        let config: EncoderConfig = serde_json::from_value(manifest["config"].clone())
            .map_err(|e| Error::Weights(format!("encoder config: {e}")))?;
        let mut m = EncoderModel::new(config)?;
        m.train_mean_count = manifest["train_mean_count"].as_f64().unwrap_or(0.0);
        let load_dense = |l: &mut DenseLayer, name: &str| -> Result<()> {
            let (r, c) = l.weight.shape();
            l.weight = wf.matrix(&format!("{name}.weight"), r, c)?;
            l.bias = wf.vector(&format!("{name}.bias"), r)?;
            Ok(())
        };
        let load_ln = |ln: &mut LayerNorm, name: &str| -> Result<()> {
            let d = ln.dim();
            ln.gamma = wf.vector(&format!("{name}.gamma"), d)?;
            ln.beta = wf.vector(&format!("{name}.beta"), d)?;
            Ok(())
        };
        load_dense(&mut m.input, "input")?;
        let (r, c) = m.positions.shape();
        m.positions = wf.matrix("positions", r, c)?;
        for (i, b) in m.blocks.iter_mut().enumerate() {
            load_dense(&mut b.wq, &format!("block{i}.wq"))?;
            load_dense(&mut b.wk, &format!("block{i}.wk"))?;
            load_dense(&mut b.wv, &format!("block{i}.wv"))?;
            load_dense(&mut b.wo, &format!("block{i}.wo"))?;
            load_dense(&mut b.ff1, &format!("block{i}.ff1"))?;
            load_dense(&mut b.ff2, &format!("block{i}.ff2"))?;
            load_ln(&mut b.ln1, &format!("block{i}.ln1"))?;
            load_ln(&mut b.ln2, &format!("block{i}.ln2"))?;
        }
        load_ln(&mut m.ln_f, "ln_f")?;
        load_dense(&mut m.head, "head")?;
        let vm = wf.vector("vel.mean", 2)?;
        let vs = wf.vector("vel.scale", 2)?;
        m.vel_mean = [vm[0], vm[1]];
        m.vel_scale = [vs[0], vs[1]];
        if m.vel_scale.iter().any(|s| !(s.is_finite() && *s > 0.0)) {
            return Err(Error::Weights("velocity scale must be positive".into()));
        }
        Ok(m)
    }

    pub fn save(&self, path: impl AsRef<std::path::Path>) -> Result<()> {
        self.to_weight_file().save(path)
    }

    pub fn load(path: impl AsRef<std::path::Path>) -> Result<Self> {
        EncoderModel::from_weight_file(&WeightFile::load(path)?)
    }
}

/// Draws one count per neuron from a `neurons × 9` distribution.
/// Probabilities are sharpened as `p^(1/T)`; below
/// [`ARGMAX_TEMPERATURE`] the most likely class is taken.
pub fn sample_spikes<R: Rng + ?Sized>(distribution: &Matrix, rng: &mut R, temperature: f64) -> Result<Vec<u32>> {
    if !(temperature.is_finite() && temperature > 0.0) {
        return Err(Error::InvalidArgument(format!("temperature {temperature} must be positive")));
    }
    if distribution.cols() != CLASS_COUNT {
        return Err(Error::shape("sample_spikes", CLASS_COUNT, distribution.cols()));
    }
    let mut out = Vec::with_capacity(distribution.rows());
    let mut w = [0.0; CLASS_COUNT];
    for r in 0..distribution.rows() {
        let p = distribution.row(r);
        let class = if temperature < ARGMAX_TEMPERATURE {
            argmax(p)
        } else {
            let inv = 1.0 / temperature;
            for (wi, &pi) in w.iter_mut().zip(p) {
                *wi = if inv == 1.0 { pi.max(0.0) } else { pi.max(0.0).powf(inv) };
            }
            let total: f64 = w.iter().sum();
            if !(total > 0.0 && total.is_finite()) {
                argmax(p)
            } else {
                let mut u = rng.gen::<f64>() * total;
                let mut chosen = CLASS_COUNT - 1;
                for (k, wk) in w.iter().enumerate() {
                    if u < *wk {
                        chosen = k;
                        break;
                    }
                    u -= wk;
                }
                chosen
            }
        };
        out.push(class_to_count(class)?);
    }
    Ok(out)
}

fn argmax(p: &[f64]) -> usize {
    let mut best = 0;
    for (k, v) in p.iter().enumerate() {
        if *v > p[best] {
            best = k;
        }
    }
    best
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use crate::nn::testutil::rel_err;
    use crate::nn::{softmax_cross_entropy, AdamConfig, AdamState};

    pub(crate) fn tiny_config() -> EncoderConfig {
        EncoderConfig {
            past_bins: 3,
            lookahead_bins: 2,
            neurons: 4,
            d_model: 8,
            layers: 2,
            heads: 2,
            ff_dim: 12,
            dropout: 0.0,
            batch_size: 4,
            ..Default::default()
        }
    }

    #[test]
    fn class_mapping() {
        assert_eq!(count_to_class(0), 0);
        assert_eq!(count_to_class(7), 7);
        assert_eq!(count_to_class(12), 8);
        for c in 0..9 {
            assert_eq!(count_to_class(class_to_count(c).unwrap()), c);
        }
        assert_eq!(class_to_count(8).unwrap(), 8);
        assert!(class_to_count(9).is_err());
    }

    #[test]
    fn default_input_has_ninety_tokens() {
        let m = EncoderModel::new(EncoderConfig::default()).unwrap();
        let input = m.build_encoder_input(&[], &[], &[[0.0; 2]; 40]).unwrap();
        assert_eq!(input.tokens.rows(), 90);
        assert_eq!(input.tokens.cols(), 194);
        assert!(m.build_encoder_input(&[], &[], &[[0.0; 2]; 39]).is_err());
    }

    #[test]
    fn padded_history_tokens_match() {
        let m = EncoderModel::new(tiny_config()).unwrap();
        let input = m.build_encoder_input(&[], &[], &[[1.0, 2.0], [3.0, 4.0]]).unwrap();
        assert_eq!(input.tokens.row(0), input.tokens.row(1));
        assert_eq!(input.tokens.row(1), input.tokens.row(2));
        assert_ne!(input.tokens.row(3), input.tokens.row(4));
    }

    #[test]
    fn future_order_matters() {
        let mut m = EncoderModel::new(tiny_config()).unwrap();
        // Give the head something to read so the output is not uniform.
        for (i, w) in m.head.weight.as_mut_slice().iter_mut().enumerate() {
            *w = ((i * 7) % 5) as f64 * 0.1 - 0.2;
        }
        let a = m.build_encoder_input(&[], &[], &[[1.0, 0.0], [0.0, 5.0]]).unwrap();
        let b = m.build_encoder_input(&[], &[], &[[0.0, 5.0], [1.0, 0.0]]).unwrap();
        assert_ne!(a, b);
        assert_ne!(m.predict_spike_distribution(&a).unwrap(), m.predict_spike_distribution(&b).unwrap());
    }

    #[test]
    fn zero_head_gives_uniform_rows() {
        let m = EncoderModel::new(tiny_config()).unwrap();
        let counts = [1.0, 0.0, 3.0, 2.0];
        let input = m.build_encoder_input(&[&counts[..]], &[[5.0, -1.0]], &[[1.0, 1.0]; 2]).unwrap();
        let p = m.predict_spike_distribution(&input).unwrap();
        assert_eq!(p.shape(), (4, 9));
        for v in p.as_slice() {
            assert!((v - 1.0 / 9.0).abs() < 1e-15);
        }
    }

    #[test]
    fn sampling_degenerate_and_argmax() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut d = Matrix::zeros(3, 9);
        for r in 0..3 {
            d.set(r, 3, 1.0);
        }
        for _ in 0..20 {
            assert_eq!(sample_spikes(&d, &mut rng, 1.0).unwrap(), vec![3, 3, 3]);
        }
        let mut soft = Matrix::from_fn(1, 9, |_, _| 0.1);
        soft.set(0, 6, 0.2);
        assert_eq!(sample_spikes(&soft, &mut rng, 1e-6).unwrap(), vec![6]);
        assert!(sample_spikes(&soft, &mut rng, 0.0).is_err());
        assert!(sample_spikes(&soft, &mut rng, -1.0).is_err());
    }

    #[test]
    fn uniform_sampling_frequencies() {
        // Multinomial(1e5, 1/9): std of a class frequency ≈ 0.00094; ±0.01 is > 10 sigma.
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let d = Matrix::from_fn(1000, 9, |_, _| 1.0 / 9.0);
        let mut hist = [0usize; 9];
        for _ in 0..100 {
            for c in sample_spikes(&d, &mut rng, 1.0).unwrap() {
                hist[c as usize] += 1;
            }
        }
        for h in hist {
            assert!((h as f64 / 1e5 - 1.0 / 9.0).abs() < 0.01, "{hist:?}");
        }
    }

    fn batch_tokens(m: &EncoderModel, seed: u64, batch: usize) -> (Matrix, Vec<usize>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let c = &m.config;
        let mut tokens = Matrix::zeros(batch * c.seq_len(), c.token_dim());
        for b in 0..batch {
            let counts: Vec<Vec<f64>> = (0..c.past_bins)
                .map(|_| (0..c.neurons).map(|_| rng.gen_range(0..4) as f64).collect())
                .collect();
            let refs: Vec<&[f64]> = counts.iter().map(|v| v.as_slice()).collect();
            let pv: Vec<[f64; 2]> = (0..c.past_bins).map(|_| [rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)]).collect();
            let fv: Vec<[f64; 2]> = (0..c.lookahead_bins).map(|_| [rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)]).collect();
            let rows = c.seq_len() * c.token_dim();
            m.write_tokens(&refs, &pv, &fv, &mut tokens.as_mut_slice()[b * rows..(b + 1) * rows]).unwrap();
        }
        let targets = (0..batch * c.neurons).map(|_| rng.gen_range(0..9)).collect();
        (tokens, targets)
    }

    #[test]
    fn whole_model_gradient_matches_finite_differences() {
        let mut m = EncoderModel::new(tiny_config()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        for w in m.head.weight.as_mut_slice() {
            *w = rng.gen_range(-0.5..0.5);
        }
        let (tokens, targets) = batch_tokens(&m, 1, 2);
        let loss_of = |m: &EncoderModel| {
            let cache = m.forward(&tokens, None).unwrap();
            softmax_cross_entropy(&m.class_logits(&cache), &targets).unwrap().loss
        };
        let cache = m.forward(&tokens, None).unwrap();
        let out = softmax_cross_entropy(&m.class_logits(&cache), &targets).unwrap();
        let grads = m.backward(&cache, &out.grad).unwrap();
        let analytic: Vec<Vec<f64>> = grads.slices().iter().map(|s| s.to_vec()).collect();
        let n_params = analytic.len();
        let h = 1e-5;
        for p in 0..n_params {
            let len = analytic[p].len();
            // Spot-check a spread of entries in every tensor.
            for idx in (0..len).step_by((len / 5).max(1)) {
                let mut up = m.clone();
                up.params_mut()[p][idx] += h;
                let mut down = m.clone();
                down.params_mut()[p][idx] -= h;
                let num = (loss_of(&up) - loss_of(&down)) / (2.0 * h);
                assert!(rel_err(analytic[p][idx], num) < 1e-3, "tensor {p}[{idx}]: {} vs {num}", analytic[p][idx]);
            }
        }
    }

    #[test]
    fn weight_file_round_trip() {
        let mut m = EncoderModel::new(tiny_config()).unwrap();
        m.vel_mean = [1.0, -2.0];
        m.vel_scale = [3.0, 4.0];
        m.train_mean_count = 0.25;
        let (tokens, targets) = batch_tokens(&m, 3, 2);
        let mut adam = AdamState::new(AdamConfig::default());
        let cache = m.forward(&tokens, None).unwrap();
        let out = softmax_cross_entropy(&m.class_logits(&cache), &targets).unwrap();
        let g = m.backward(&cache, &out.grad).unwrap();
        adam.step(&mut m.params_mut(), &g.slices()).unwrap();
        let back = EncoderModel::from_weight_file(&m.to_weight_file()).unwrap();
        assert_eq!(back, m);
    }
}
