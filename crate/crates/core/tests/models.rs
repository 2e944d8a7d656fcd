use jenkins_core::dataset::{BinnedTrial, Dataset, Split, SyntheticTask};
use jenkins_core::decoder::{r_squared, train_decoder, DecoderConfig};
use jenkins_core::encoder::{
    generate_closed_loop, train_encoder, EncoderConfig, EncoderModel,
};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn small_decoder() -> DecoderConfig {
    DecoderConfig {
        window_bins: 10,
        hidden_sizes: vec![16, 8],
        epochs: 3,
        batch_size: 32,
        ..Default::default()
    }
}

fn small_encoder() -> EncoderConfig {
    EncoderConfig {
        past_bins: 6,
        lookahead_bins: 4,
        neurons: 5,
        d_model: 8,
        heads: 2,
        ff_dim: 16,
        epochs: 2,
        batch_size: 16,
        ..Default::default()
    }
}

fn with_velocities(ds: &Dataset, f: impl Fn(&BinnedTrial) -> Vec<[f64; 2]>) -> Dataset {
    let trials = ds
        .trials()
        .iter()
        .map(|t| BinnedTrial::new(t.trial_id, t.split, t.direction_deg, t.neurons(), t.counts().to_vec(), f(t)).unwrap())
        .collect();
    Dataset::new(ds.neurons(), trials).unwrap()
}

fn with_counts(ds: &Dataset, count: u32) -> Dataset {
    let trials = ds
        .trials()
        .iter()
        .map(|t| {
            BinnedTrial::new(t.trial_id, t.split, t.direction_deg, t.neurons(), vec![count; t.counts().len()], t.velocities().to_vec())
                .unwrap()
        })
        .collect();
    Dataset::new(ds.neurons(), trials).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]
    #[test]
    fn r_squared_ignores_common_shift(
        pairs in prop::collection::vec(((-100.0f64..100.0, -100.0f64..100.0), (-100.0f64..100.0, -100.0f64..100.0)), 3..40),
        shift in -1e3f64..1e3,
    ) {
        let pred: Vec<[f64; 2]> = pairs.iter().map(|(p, _)| [p.0, p.1]).collect();
        let target: Vec<[f64; 2]> = pairs.iter().map(|(_, t)| [t.0, t.1]).collect();
        prop_assume!(r_squared(&pred, &target).is_ok());
        let a = r_squared(&pred, &target).unwrap();
        let sp: Vec<[f64; 2]> = pred.iter().map(|p| [p[0] + shift, p[1] + shift]).collect();
        let st: Vec<[f64; 2]> = target.iter().map(|t| [t[0] + shift, t[1] + shift]).collect();
        let b = r_squared(&sp, &st).unwrap();
        for c in 0..2 {
            prop_assert!((a.per_component[c] - b.per_component[c]).abs() < 1e-6 * (1.0 + a.per_component[c].abs()));
        }
    }

    #[test]
    fn encoder_rows_are_distributions(seed in 0u64..500) {
        let mut model = EncoderModel::new(EncoderConfig { seed, ..small_encoder() }).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for w in model.head.weight.as_mut_slice() {
            *w = rng.gen_range(-3.0..3.0);
        }
        let counts: Vec<Vec<f64>> = (0..4).map(|_| (0..5).map(|_| rng.gen_range(0..12) as f64).collect()).collect();
        let refs: Vec<&[f64]> = counts.iter().map(|c| c.as_slice()).collect();
        let pv: Vec<[f64; 2]> = (0..4).map(|_| [rng.gen_range(-400.0..400.0), rng.gen_range(-400.0..400.0)]).collect();
        let fv: Vec<[f64; 2]> = (0..4).map(|_| [rng.gen_range(-400.0..400.0), rng.gen_range(-400.0..400.0)]).collect();
        let p = model.predict_spike_distribution(&model.build_encoder_input(&refs, &pv, &fv).unwrap()).unwrap();
        for r in 0..p.rows() {
            let row = p.row(r);
            prop_assert!(row.iter().all(|&x| x >= 0.0));
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
        }
    }
}

#[test]
fn decoder_on_still_hand_predicts_zero() {
    let ds = SyntheticTask::from_seed(6, 1).generate_dataset(80, 40, 1).unwrap();
    let still = with_velocities(&ds, |t| vec![[0.0, 0.0]; t.len()]);
    let (model, report) = train_decoder(&still, &DecoderConfig { epochs: 20, ..small_decoder() }).unwrap();
    assert!(report.best_val_loss() < 1.0, "{report:?}");
    let (pred, _) = model.predict_trials(still.split(Split::Test)).unwrap();
    assert!(pred.iter().flatten().all(|v| v.abs() < 2.0));
}

#[test]
fn decoder_running_minimum_never_rises() {
    let ds = SyntheticTask::from_seed(6, 2).generate_dataset(80, 40, 2).unwrap();
    let (_, report) = train_decoder(&ds, &DecoderConfig { epochs: 6, ..small_decoder() }).unwrap();
    let mut best = f64::INFINITY;
    for &v in &report.val_loss {
        let next = best.min(v);
        assert!(next <= best);
        best = next;
    }
    assert_eq!(report.best_val_loss(), best);
}

#[test]
fn decoder_training_is_bit_reproducible() {
    let ds = SyntheticTask::from_seed(6, 3).generate_dataset(48, 40, 3).unwrap();
    let (a, ra) = train_decoder(&ds, &small_decoder()).unwrap();
    let (b, rb) = train_decoder(&ds, &small_decoder()).unwrap();
    assert_eq!(ra, rb);
    assert_eq!(a, b);
    assert_eq!(a.to_weight_file(), b.to_weight_file());
}

#[test]
fn encoder_loss_vanishes_on_silent_data() {
    let ds = with_counts(&SyntheticTask::from_seed(5, 4).generate_dataset(40, 40, 4).unwrap(), 0);
    let cfg = EncoderConfig { epochs: 8, lr: 0.01, ..small_encoder() };
    let (_, report) = train_encoder(&ds, &cfg).unwrap();
    assert!(report.best_val_loss() < 0.02 * report.initial_val_loss, "{report:?}");
}

#[test]
fn generation_ignores_velocities_beyond_lookahead() {
    let mut model = EncoderModel::new(small_encoder()).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for w in model.head.weight.as_mut_slice() {
        *w = rng.gen_range(-2.0..2.0);
    }
    let f = model.config.lookahead_bins;
    let a: Vec<[f64; 2]> = (0..20).map(|t| [t as f64 * 10.0, 5.0]).collect();
    let mut b = a.clone();
    b[f] = [900.0, -900.0];
    let ga = generate_closed_loop(&model, &a, 3, 1.0).unwrap();
    let gb = generate_closed_loop(&model, &b, 3, 1.0).unwrap();
    assert_eq!(ga[0], gb[0]);
    // Bin 1 sees index f in its look-ahead.
    let da = model.predict_spike_distribution(&model.build_encoder_input(&[], &[], &a[1..=f]).unwrap()).unwrap();
    let db = model.predict_spike_distribution(&model.build_encoder_input(&[], &[], &b[1..=f]).unwrap()).unwrap();
    assert_ne!(da, db);
}

#[test]
fn input_rejects_history_longer_than_window() {
    let model = EncoderModel::new(small_encoder()).unwrap();
    let p = model.config.past_bins;
    let row = vec![1.0; 5];
    let fut = vec![[0.0, 0.0]; model.config.lookahead_bins];
    let exact: Vec<&[f64]> = (0..p).map(|_| row.as_slice()).collect();
    assert!(model.build_encoder_input(&exact, &vec![[0.0; 2]; p], &fut).is_ok());
    let longer: Vec<&[f64]> = (0..=p).map(|_| row.as_slice()).collect();
    assert!(model.build_encoder_input(&longer, &vec![[0.0; 2]; p + 1], &fut).is_err());
}

#[test]
fn encoder_training_is_bit_reproducible() {
    let ds = SyntheticTask::from_seed(5, 6).generate_dataset(40, 40, 6).unwrap();
    let (a, ra) = train_encoder(&ds, &small_encoder()).unwrap();
    let (b, rb) = train_encoder(&ds, &small_encoder()).unwrap();
    assert_eq!(ra, rb);
    assert_eq!(a.to_weight_file(), b.to_weight_file());
}
