use std::path::Path;

use jenkins_core::dataset::{
    bin_spike_train, differentiate_positions, Dataset, Split, SpikeTrain, SyntheticTask, TuningModel,
};
use proptest::prelude::*;

proptest! {
    #[test]
    fn binning_conserves_spikes(
        mut times in prop::collection::vec(0.0f64..500.0, 0..200),
        duration in 1.0f64..600.0,
        width in 1.0f64..50.0,
    ) {
        times.sort_by(f64::total_cmp);
        let inside = times.iter().filter(|&&t| t < duration).count() as u32;
        let counts = bin_spike_train(&SpikeTrain::new(0, times).unwrap(), width, duration).unwrap();
        prop_assert_eq!(counts.len(), (duration / width).ceil() as usize);
        prop_assert_eq!(counts.iter().sum::<u32>(), inside);
    }

    #[test]
    fn differentiation_inverts_cumulative_sum(v in prop::collection::vec((-500.0f64..500.0, -500.0f64..500.0), 1..100)) {
        let mut p = vec![[0.0, 0.0]];
        for (vx, vy) in &v {
            let last = *p.last().unwrap();
            p.push([last[0] + vx * 0.02, last[1] + vy * 0.02]);
        }
        let back = differentiate_positions(&p).unwrap();
        prop_assert_eq!(back.len(), v.len());
        for (b, (vx, vy)) in back.iter().zip(&v) {
            prop_assert!((b[0] - vx).abs() <= 1e-9 * (1.0 + vx.abs()) * p.len() as f64);
            prop_assert!((b[1] - vy).abs() <= 1e-9 * (1.0 + vy.abs()) * p.len() as f64);
        }
    }

    #[test]
    fn save_load_round_trip(seed in 0u64..1000, trials in 0usize..12) {
        let ds = SyntheticTask::from_seed(7, seed).generate_dataset(trials, 40, seed).unwrap();
        let mut buf = Vec::new();
        ds.write_to(&mut buf).unwrap();
        let back = Dataset::read_from(&buf[..], Path::new("mem")).unwrap();
        prop_assert_eq!(back, ds);
    }

    #[test]
    fn splits_partition_trials(seed in 0u64..1000, trials in 0usize..60) {
        let ds = SyntheticTask::from_seed(3, seed).generate_dataset(trials, 40, seed).unwrap();
        let total: usize = [Split::Train, Split::Validation, Split::Test].iter().map(|&s| ds.split_len(s)).sum();
        prop_assert_eq!(total, trials);
    }
}

fn uniform_task(baseline: f64, modulation: f64) -> SyntheticTask {
    let mut task = SyntheticTask::from_seed(16, 0);
    task.tuning = TuningModel::uniform(16, baseline, modulation, task.profile.peak_speed());
    task
}

#[test]
fn constant_rate_gives_mean_count_point_four() {
    let task = uniform_task(20.0, 0.0);
    let ds = task.generate_dataset(20, 60, 11).unwrap();
    let bins: usize = ds.trials().iter().map(|t| t.len() * t.neurons()).sum();
    assert!(bins >= 10_000);
    let total: u64 = ds.trials().iter().flat_map(|t| t.counts()).map(|&c| c as u64).sum();
    let mean = total as f64 / bins as f64;
    assert!((mean - 0.4).abs() <= 0.4 * 0.05, "mean {mean}");
}

fn poisson_pmf(lambda: f64, k: u32) -> f64 {
    let mut p = (-lambda).exp();
    for j in 1..=k {
        p *= lambda / j as f64;
    }
    p
}

/// Pearson χ² over count categories {0, 1, 2, 3+}, pooling bins whose
/// expected rates differ: expected frequencies are sums of per-bin Poisson
/// probabilities.
#[test]
fn counts_fit_cosine_tuned_poisson() {
    let task = SyntheticTask::from_seed(24, 5);
    let ds = task.generate_dataset(200, 60, 5).unwrap();
    // χ²(3) 99th percentile.
    const CRITICAL: f64 = 11.345;
    for neuron in [0, 7, 13, 23] {
        let mut observed = [0.0; 4];
        let mut expected = [0.0; 4];
        let mut bins = 0;
        for trial in ds.trials() {
            for (t, v) in trial.velocities().iter().enumerate() {
                let lambda = task.tuning.expected_counts(*v)[neuron];
                let c = trial.counts_at(t)[neuron];
                observed[c.min(3) as usize] += 1.0;
                let head: f64 = (0..3).map(|k| poisson_pmf(lambda, k)).sum();
                for k in 0..3 {
                    expected[k] += poisson_pmf(lambda, k as u32);
                }
                expected[3] += 1.0 - head;
                bins += 1;
            }
        }
        assert!(bins >= 10_000);
        let chi2: f64 = observed.iter().zip(&expected).map(|(o, e)| (o - e) * (o - e) / e).sum();
        assert!(chi2 < CRITICAL, "neuron {neuron}: χ² = {chi2}, observed {observed:?}, expected {expected:?}");
        let rate_obs: f64 = ds.trials().iter().flat_map(|t| (0..t.len()).map(move |b| t.counts_at(b)[neuron] as f64)).sum();
        let rate_exp: f64 = ds
            .trials()
            .iter()
            .flat_map(|t| t.velocities().iter().map(|v| task.tuning.expected_counts(*v)[neuron]))
            .sum();
        assert!((rate_obs - rate_exp).abs() < 4.0 * rate_exp.sqrt(), "{rate_obs} vs {rate_exp}");
    }
}

#[test]
fn silent_baseline_silent_rest() {
    let task = uniform_task(0.0, 30.0);
    let trial = task.generate_trial(90.0, 60, 3).unwrap();
    for (t, v) in trial.velocities().iter().enumerate() {
        if v[0] == 0.0 && v[1] == 0.0 {
            assert!(trial.counts_at(t).iter().all(|&c| c == 0));
        }
    }
}
