use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::{bail, Context, Result};
use serde_json::json;

use jenkins_core::closed_loop::{evaluate_loop, load_leader, run_full_loop, LoopConfig};
use jenkins_core::dataset::{Dataset, Split, SyntheticTask, NEURON_COUNT};
use jenkins_core::decoder::{r_squared, train_decoder_with, DecoderConfig, DecoderModel};
use jenkins_core::encoder::{evaluate_encoder, train_encoder_with, EncoderConfig, EncoderModel, CLASS_COUNT};
use jenkins_core::kinematics::KinematicChain;
use jenkins_core::BinnedTrial;

use crate::{Command, EvalArgs, GenDataArgs, ModelArgs, ServeArgs, SimulateArgs, TrainArgs};

/// Trial length of generated datasets, in bins.
pub const TRIAL_BINS: usize = 60;

pub fn run(command: Command) -> Result<()> {
    match command {
        Command::GenData(a) => gen_data(&a),
        Command::TrainDecoder(a) => train_decoder_cmd(&a),
        Command::TrainEncoder(a) => train_encoder_cmd(&a),
        Command::Eval(a) => eval(&a),
        Command::Simulate(a) => simulate(&a),
        Command::Serve(a) => serve(&a),
    }
}

fn print_config(command: &str, config: serde_json::Value) {
    println!("config {command} {config}");
}

fn load_dataset(path: &Path) -> Result<Dataset> {
    Dataset::load(path).with_context(|| format!("loading dataset {}", path.display()))
}

fn gen_data(a: &GenDataArgs) -> Result<()> {
    print_config(
        "gen-data",
        json!({"trials": a.trials, "seed": a.seed, "out": a.out, "bins": TRIAL_BINS, "neurons": NEURON_COUNT}),
    );
    let ds = SyntheticTask::from_seed(NEURON_COUNT, a.seed).generate_dataset(a.trials, TRIAL_BINS, a.seed)?;
    ds.save(&a.out).with_context(|| format!("writing {}", a.out.display()))?;
    println!(
        "wrote {} trials ({} train / {} validation / {} test) to {}",
        ds.trials().len(),
        ds.split_len(Split::Train),
        ds.split_len(Split::Validation),
        ds.split_len(Split::Test),
        a.out.display()
    );
    Ok(())
}

/// Loss log path next to a model file: `model.bin` → `model.bin.loss.csv`.
pub fn loss_log_path(model: &Path) -> PathBuf {
    let mut s = model.as_os_str().to_owned();
    s.push(".loss.csv");
    PathBuf::from(s)
}

struct LossLog {
    out: BufWriter<File>,
}

impl LossLog {
    fn create(model: &Path) -> Result<Self> {
        let path = loss_log_path(model);
        let mut out = BufWriter::new(File::create(&path).with_context(|| format!("creating {}", path.display()))?);
        writeln!(out, "epoch,train_loss,val_loss")?;
        Ok(LossLog { out })
    }

    fn record(&mut self, epoch: usize, train: f64, val: f64) {
        println!("epoch {epoch} train_loss={train:.6} val_loss={val:.6}");
        // A failed log line is reported once the run finishes.
        let _ = writeln!(self.out, "{epoch},{train},{val}");
    }

    fn finish(mut self) -> Result<()> {
        self.out.flush()?;
        Ok(())
    }
}

fn train_decoder_cmd(a: &TrainArgs) -> Result<()> {
    let config = DecoderConfig {
        epochs: a.epochs.unwrap_or(DecoderConfig::default().epochs),
        seed: a.seed,
        ..Default::default()
    };
    print_config("train-decoder", json!({"data": a.data, "out": a.out, "model": config}));
    let ds = load_dataset(&a.data)?;
    let mut log = LossLog::create(&a.out)?;
    let (model, report) = train_decoder_with(&ds, &config, |e, t, v| log.record(e, t, v))?;
    log.finish()?;
    model.save(&a.out)?;
    println!(
        "best epoch {} val_loss={:.6}; wrote {}",
        report.best_epoch,
        report.best_val_loss(),
        a.out.display()
    );
    Ok(())
}

fn train_encoder_cmd(a: &TrainArgs) -> Result<()> {
    let ds = load_dataset(&a.data)?;
    let config = EncoderConfig {
        epochs: a.epochs.unwrap_or(EncoderConfig::default().epochs),
        seed: a.seed,
        neurons: ds.neurons(),
        ..Default::default()
    };
    print_config("train-encoder", json!({"data": a.data, "out": a.out, "model": config}));
    let mut log = LossLog::create(&a.out)?;
    let (model, report) = train_encoder_with(&ds, &config, |e, t, v| log.record(e, t, v))?;
    log.finish()?;
    model.save(&a.out)?;
    println!(
        "initial val_loss={:.6} best epoch {} val_loss={:.6}; wrote {}",
        report.initial_val_loss,
        report.best_epoch,
        report.best_val_loss(),
        a.out.display()
    );
    Ok(())
}

fn eval(a: &EvalArgs) -> Result<()> {
    print_config("eval", json!({"data": a.data, "decoder": a.decoder, "encoder": a.encoder}));
    if a.decoder.is_none() && a.encoder.is_none() {
        bail!("eval needs --decoder and/or --encoder");
    }
    let ds = load_dataset(&a.data)?;
    if let Some(path) = &a.decoder {
        let model = DecoderModel::load(path).with_context(|| format!("loading decoder {}", path.display()))?;
        let (pred, target) = model.predict_trials(ds.split(Split::Test))?;
        let r2 = r_squared(&pred, &target)?;
        println!("decoder r2_vx={:.6} r2_vy={:.6} r2_mean={:.6}", r2.per_component[0], r2.per_component[1], r2.mean);
    }
    if let Some(path) = &a.encoder {
        let model = EncoderModel::load(path).with_context(|| format!("loading encoder {}", path.display()))?;
        let loss = evaluate_encoder(&model, &ds, Split::Test)?;
        let uniform = model.neurons() as f64 * (CLASS_COUNT as f64).ln();
        println!("encoder test_loss={loss:.6} uniform_loss={uniform:.6} ratio={:.6}", loss / uniform);
    }
    Ok(())
}

pub fn load_chain(path: Option<&Path>) -> Result<KinematicChain> {
    match path {
        Some(p) => KinematicChain::load(p).with_context(|| format!("loading chain {}", p.display())),
        None => Ok(KinematicChain::desk_arm()),
    }
}

pub fn load_loop_config(m: &ModelArgs) -> Result<LoopConfig> {
    let decoder = DecoderModel::load(&m.decoder).with_context(|| format!("loading decoder {}", m.decoder.display()))?;
    let encoder = EncoderModel::load(&m.encoder).with_context(|| format!("loading encoder {}", m.encoder.display()))?;
    let chain = load_chain(m.chain.as_deref())?;
    let mut config = LoopConfig::new(Arc::new(decoder), Arc::new(encoder), Arc::new(chain))?;
    config.seed = m.seed;
    config.temperature = m.temperature;
    config.lambda = m.lambda;
    config.validate()?;
    Ok(config)
}

fn model_json(m: &ModelArgs) -> serde_json::Value {
    json!({
        "decoder": m.decoder,
        "encoder": m.encoder,
        "chain": m.chain.as_ref().map_or_else(|| "built-in desk arm".into(), |p| p.display().to_string()),
        "seed": m.seed,
        "temperature": m.temperature,
        "lambda": m.lambda,
    })
}

/// Trajectory file next to the simulate output: `run.txt` → `run.trajectory.csv`.
pub fn trajectory_path(out: &Path) -> PathBuf {
    out.with_extension("trajectory.csv")
}

fn simulate(a: &SimulateArgs) -> Result<()> {
    print_config(
        "simulate",
        json!({"leader": a.leader, "out": a.out, "trajectory": trajectory_path(&a.out), "loop": model_json(&a.models)}),
    );
    let config = load_loop_config(&a.models)?;
    let leader = load_leader(&a.leader).with_context(|| format!("loading leader {}", a.leader.display()))?;
    if leader.is_empty() {
        bail!("leader trace {} has no samples", a.leader.display());
    }
    let out = run_full_loop(&config, &leader)?;
    let metrics = evaluate_loop(&config, &leader, &out)?;

    let n = config.encoder.neurons();
    let counts: Vec<u32> = out.spikes.iter().flatten().copied().collect();
    let trial = BinnedTrial::new(0, Split::Test, 0.0, n, counts, out.decoded.clone())?;
    let ds = Dataset::new(n, vec![trial])?;
    let mut w = BufWriter::new(File::create(&a.out).with_context(|| format!("creating {}", a.out.display()))?);
    ds.write_to(&mut w)?;
    let lines = [
        ("bins", leader.len().to_string()),
        ("seed", config.seed.to_string()),
        ("temperature", config.temperature.to_string()),
        ("lambda", config.lambda.to_string()),
        ("corr_vx", metrics.correlation[0].value.to_string()),
        ("corr_vy", metrics.correlation[1].value.to_string()),
        ("corr_vx_degenerate", metrics.correlation[0].degenerate.to_string()),
        ("corr_vy_degenerate", metrics.correlation[1].degenerate.to_string()),
        ("rmse_mm", metrics.rmse_mm.to_string()),
        ("in_band_fraction", metrics.in_band_fraction.to_string()),
        ("stable", metrics.stable.to_string()),
    ];
    for (k, v) in &lines {
        writeln!(w, "# {k} = {v}")?;
    }
    w.flush()?;

    let tpath = trajectory_path(&a.out);
    let mut t = BufWriter::new(File::create(&tpath).with_context(|| format!("creating {}", tpath.display()))?);
    writeln!(t, "bin,leader_vx,leader_vy,decoded_vx,decoded_vy,x,y,q0,q1,q2,q3,q4,q5,rate")?;
    for i in 0..leader.len() {
        let q = out.angles[i];
        writeln!(
            t,
            "{i},{},{},{},{},{},{},{},{},{},{},{},{},{}",
            leader[i][0],
            leader[i][1],
            out.decoded[i][0],
            out.decoded[i][1],
            out.trajectory[i][0],
            out.trajectory[i][1],
            q[0],
            q[1],
            q[2],
            q[3],
            q[4],
            q[5],
            metrics.rate_trace[i]
        )?;
    }
    t.flush()?;
    for (k, v) in &lines {
        println!("{k} = {v}");
    }
    println!("wrote {} and {}", a.out.display(), tpath.display());
    Ok(())
}

fn serve(a: &ServeArgs) -> Result<()> {
    print_config("serve", json!({"port": a.port, "loop": model_json(&a.models)}));
    let config = load_loop_config(&a.models)?;
    let state = crate::server::AppState::new(config, crate::server::ServeOptions::default());
    let runtime = tokio::runtime::Runtime::new()?;
    runtime.block_on(async move {
        let listener = tokio::net::TcpListener::bind(("0.0.0.0", a.port))
            .await
            .with_context(|| format!("binding port {}", a.port))?;
        tracing::info!(addr = %listener.local_addr()?, "serving");
        crate::server::serve(listener, state).await
    })
}
