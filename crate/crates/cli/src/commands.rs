//! Subcommand implementations. Each reads only its config and inputs and
//! writes artifacts plus a manifest into the output directory.

use std::fmt::Write as _;
use std::path::Path;

use gridgsp::estimation::{add_measurement_noise, build_measurement_model, place_pmus, Estimator};
use gridgsp::forecast::{
    build_splits, dataset_csv, evaluate, generate_synthetic_series, init_forecaster, metrics_csv,
    persistence_baseline, train_forecaster, DatasetConfig, DatasetSplits, PhysicsRegularizer,
};
use gridgsp::grid::{GridCase, PowerFlow};
use gridgsp::gso::{build_real_gso, graph_signal, kron_reduce, render_matrix_text, signal_indices, RealGso};
use gridgsp::gsp::{gft, spectrum_csv};
use gridgsp::nn::{checkpoint_json, parse_checkpoint, GraphModel, GraphShiftOp, Head};
use gridgsp::voltvar::{
    evaluate_controller, init_policy, ppo_train, reward_trace_csv, Controller, EvalSummary, VoltVarEnv,
};
use nalgebra::DVector;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::config::{resolve_labels, RunConfig};
use crate::manifest::{ArtifactWriter, Manifest};
use crate::{CliError, Task};

/// Validates the config, runs the task and writes the manifest.
pub fn run(task: Task, config: &RunConfig, out: &Path) -> Result<Manifest, CliError> {
    config.validate()?;
    let case = config.load_case()?;
    if task.is_stochastic() {
        config.require_seed()?;
    }
    match task {
        Task::ForecastEval if config.forecast.checkpoint.is_none() => {
            return Err(CliError::Validation("forecast-eval needs --checkpoint".into()))
        }
        Task::DrlEval if config.drl.checkpoint.is_none() => {
            return Err(CliError::Validation("drl-eval needs --checkpoint".into()))
        }
        _ => {}
    }
    let mut w = ArtifactWriter::new(out)?;
    if !config.case.starts_with(crate::config::BUNDLED_PREFIX) {
        w.record_input("case", Path::new(&config.case))?;
    }
    match task {
        Task::GenData => gen_data(config, &case, &mut w)?,
        Task::BuildGso => build_gso(config, &case, &mut w)?,
        Task::PlacePmus => place(config, &case, &mut w)?,
        Task::Estimate => estimate(config, &case, &mut w)?,
        Task::ForecastTrain => forecast_train(config, &case, &mut w)?,
        Task::ForecastEval => forecast_eval(config, &case, &mut w)?,
        Task::DrlTrain => drl_train(config, &case, &mut w)?,
        Task::DrlEval => drl_eval(config, &case, &mut w)?,
    }
    w.finish(task.name(), config)
}

/// Keeps measurement noise independent of the load draws from the same seed.
const NOISE_STREAM: u64 = 0x6e6f697365;

fn json<T: Serialize>(value: &T) -> String {
    serde_json::to_string_pretty(value).expect("summary serializes")
}

fn gen_data(config: &RunConfig, case: &GridCase, w: &mut ArtifactWriter) -> Result<(), CliError> {
    let seed = config.require_seed()?;
    let series = generate_synthetic_series(case, config.data.steps, config.data.process(), seed)?;
    let gso = build_real_gso(case);
    let mut out = String::from("time");
    for k in 0..series.multipliers.first().map_or(0, |m| m.len()) {
        write!(out, ",load_{k}").expect("write to string");
    }
    for l in gso.signal_labels() {
        write!(out, ",{l}").expect("write to string");
    }
    out.push('\n');
    for (t, (m, x)) in series.multipliers.iter().zip(series.signals(case)).enumerate() {
        write!(out, "{t}").expect("write to string");
        for v in m.iter().chain(x.iter()) {
            write!(out, ",{v:.12e}").expect("write to string");
        }
        out.push('\n');
    }
    w.write("series.csv", out)?;
    Ok(())
}

fn build_gso(config: &RunConfig, case: &GridCase, w: &mut ArtifactWriter) -> Result<(), CliError> {
    let gso = build_real_gso(case);
    let format = config.gso.format;
    w.write("gso.txt", render_matrix_text(&gso.s_full, "s_full", &gso.signal_labels(), format))?;
    w.write("b_hat.txt", render_matrix_text(&gso.b_hat, "b_hat", &gso.labels, format))?;
    let mut offsets = String::from("node,p_cst,q_cst\n");
    for (k, l) in gso.labels.iter().enumerate() {
        writeln!(offsets, "{l},{:.17e},{:.17e}", gso.p_cst[k], gso.q_cst[k]).expect("write to string");
    }
    w.write("offsets.csv", offsets)?;
    let basis = gft(&gso.b_hat)?;
    let pf = PowerFlow::new(case)?;
    let nominal = pf.solve_all(&case.nominal_injections(), &case.nominal_slack_voltage())?;
    w.write("spectrum.csv", spectrum_csv(&basis, &nominal.magnitudes())?)?;
    if let Some(labels) = &config.gso.retained {
        let nodes = resolve_labels(case, labels)?;
        let rows = signal_indices(&nodes, case.node_count());
        let reduced = kron_reduce(&gso.s_full, &rows)?;
        let all = gso.signal_labels();
        let kept: Vec<String> = rows.iter().map(|&r| all[r].clone()).collect();
        w.write("gso_reduced.txt", render_matrix_text(&reduced.s_red, "s_reduced", &kept, format))?;
    }
    Ok(())
}

#[derive(Serialize)]
struct PlacementSummary {
    k: usize,
    m: usize,
    sigma_min: f64,
    selected: Vec<String>,
    identifiable: bool,
}

/// Observed positions from the config, or the greedy placement.
fn observed_nodes(config: &RunConfig, case: &GridCase, gso: &RealGso) -> Result<Vec<usize>, CliError> {
    match &config.estimation.observed {
        Some(labels) => resolve_labels(case, labels),
        None => {
            let m = config.placement.m;
            let k = config.placement.k.unwrap_or(m);
            Ok(place_pmus(&gft(&gso.b_hat)?, k, m)?.selected)
        }
    }
}

fn place(config: &RunConfig, case: &GridCase, w: &mut ArtifactWriter) -> Result<(), CliError> {
    let gso = build_real_gso(case);
    let m = config.placement.m;
    let k = config.placement.k.unwrap_or(m);
    let result = place_pmus(&gft(&gso.b_hat)?, k, m)?;
    let y = gridgsp::grid::assemble_admittance(case);
    let identifiable = build_measurement_model(&y, &result.selected)?.is_identifiable();
    if !identifiable {
        eprintln!("warning: the selected {m} nodes do not make the full state identifiable");
    }
    let mut csv = String::from("order,position,node\n");
    for (i, &p) in result.selected.iter().enumerate() {
        writeln!(csv, "{i},{p},{}", case.node_label(p)).expect("write to string");
    }
    w.write("placement.csv", csv)?;
    let summary = PlacementSummary {
        k,
        m,
        sigma_min: result.sigma_min,
        selected: result.selected.iter().map(|&p| case.node_label(p)).collect(),
        identifiable,
    };
    w.write("placement.json", json(&summary))?;
    Ok(())
}

#[derive(Serialize)]
struct EstimateSummary {
    observed: Vec<String>,
    identifiable: bool,
    effective_rank: usize,
    frames: usize,
    mean_mse: f64,
    max_abs_error: f64,
}

fn estimate(config: &RunConfig, case: &GridCase, w: &mut ArtifactWriter) -> Result<(), CliError> {
    let seed = config.require_seed()?;
    let gso = build_real_gso(case);
    let observed = observed_nodes(config, case, &gso)?;
    let series = generate_synthetic_series(case, config.data.steps, config.data.process(), seed)?;
    let pf = PowerFlow::new(case)?;
    let model = build_measurement_model(pf.admittance(), &observed)?;
    let identifiable = model.is_identifiable();
    if !identifiable {
        eprintln!("warning: the observed nodes do not make the full state identifiable");
    }
    let est = Estimator::new(model, &gso.b_hat, config.estimation.mu1)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(NOISE_STREAM);
    let labels = gso.signal_labels();
    let mut estimates = String::from("time");
    for l in &labels {
        write!(estimates, ",{l}").expect("write to string");
    }
    estimates.push('\n');
    let mut errors = String::from("time,mse,max_abs_error\n");
    let (mut total, mut worst) = (0.0, 0.0f64);
    for (t, point) in series.points.iter().enumerate() {
        let z = est.model().measure(&point.v)?;
        let noisy = add_measurement_noise(&z, config.estimation.noise_sigma, &mut rng);
        let x_hat = graph_signal(case, &est.recover(&noisy.z)?);
        let x = graph_signal(case, &point.v);
        let err: DVector<f64> = &x_hat - &x;
        let mse = err.norm_squared() / err.len() as f64;
        total += mse;
        worst = worst.max(err.amax());
        write!(estimates, "{t}").expect("write to string");
        for v in x_hat.iter() {
            write!(estimates, ",{v:.12e}").expect("write to string");
        }
        estimates.push('\n');
        writeln!(errors, "{t},{mse:.12e},{:.12e}", err.amax()).expect("write to string");
    }
    w.write("estimates.csv", estimates)?;
    w.write("errors.csv", errors)?;
    let summary = EstimateSummary {
        observed: observed.iter().map(|&p| case.node_label(p)).collect(),
        identifiable,
        effective_rank: est.effective_rank(),
        frames: series.len(),
        mean_mse: total / series.len() as f64,
        max_abs_error: worst,
    };
    w.write("summary.json", json(&summary))?;
    Ok(())
}

struct ForecastSetup {
    gso: RealGso,
    observed: Vec<usize>,
    splits: DatasetSplits,
    shift: GraphShiftOp,
    regularizer: PhysicsRegularizer,
}

fn forecast_setup(config: &RunConfig, case: &GridCase) -> Result<ForecastSetup, CliError> {
    let seed = config.require_seed()?;
    let gso = build_real_gso(case);
    let observed = observed_nodes(config, case, &gso)?;
    let series = generate_synthetic_series(case, config.data.steps, config.data.process(), seed)?;
    let f = &config.forecast;
    let dc = DatasetConfig {
        window: f.window,
        horizon: f.horizon,
        mu1: config.estimation.mu1,
        noise_sigma: config.estimation.noise_sigma,
    };
    let splits = build_splits(case, &gso, &series, &observed, &dc, f.split, seed)?;
    if splits.train.is_empty() || splits.test.is_empty() {
        return Err(CliError::Validation(format!(
            "data.steps = {} is too short for the requested window, horizon and split",
            config.data.steps
        )));
    }
    let shift = GraphShiftOp::new(&gso.s_full, f.model.rescale)?;
    let pf = PowerFlow::new(case)?;
    let regularizer = PhysicsRegularizer::new(case, pf.admittance(), &observed)?;
    Ok(ForecastSetup {
        gso,
        observed,
        splits,
        shift,
        regularizer,
    })
}

fn forecast_report(
    model: &GraphModel,
    setup: &ForecastSetup,
    case: &GridCase,
    w: &mut ArtifactWriter,
) -> Result<(), CliError> {
    let test = &setup.splits.test;
    let trained = evaluate(model, &setup.shift, test, &setup.gso)?;
    let baseline = persistence_baseline(test, &setup.gso)?;
    let name = format!("{:?}", model.config.architecture).to_lowercase();
    w.write(
        "metrics.csv",
        metrics_csv(&[(name, trained), ("persistence".into(), baseline)]),
    )?;
    let labels = setup.gso.signal_labels();
    w.write("test_dataset.csv", dataset_csv(test, &labels))?;
    let observed: Vec<String> = setup.observed.iter().map(|&p| case.node_label(p)).collect();
    w.write("observed.json", json(&observed))?;
    Ok(())
}

fn forecast_train(config: &RunConfig, case: &GridCase, w: &mut ArtifactWriter) -> Result<(), CliError> {
    let seed = config.require_seed()?;
    let setup = forecast_setup(config, case)?;
    let f = &config.forecast;
    let d = setup.gso.signal_dim();
    let mc = f.model.model_config(f.window, d, Head::Regression { outputs: d });
    let mut model = init_forecaster(mc, &setup.splits.train, seed)?;
    let report = train_forecaster(
        &mut model,
        &setup.shift,
        &setup.splits.train,
        Some(&setup.splits.validation),
        &setup.regularizer,
        &f.train_config(),
    )?;
    w.write("model.json", checkpoint_json(&model, &setup.shift)?)?;
    w.write("loss.csv", report.to_csv())?;
    forecast_report(&model, &setup, case, w)
}

fn read_checkpoint(path: &Path, shift: &GraphShiftOp, w: &mut ArtifactWriter) -> Result<GraphModel, CliError> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    w.record_input("checkpoint", path)?;
    Ok(parse_checkpoint(&text, shift)?)
}

fn forecast_eval(config: &RunConfig, case: &GridCase, w: &mut ArtifactWriter) -> Result<(), CliError> {
    let setup = forecast_setup(config, case)?;
    let path = config.forecast.checkpoint.as_deref().expect("checked in run");
    let model = read_checkpoint(path, &setup.shift, w)?;
    if model.config.window != config.forecast.window {
        return Err(CliError::Validation(format!(
            "checkpoint window {} differs from forecast.window {}",
            model.config.window, config.forecast.window
        )));
    }
    forecast_report(&model, &setup, case, w)
}

fn drl_env(config: &RunConfig, case: &GridCase) -> Result<(VoltVarEnv, GraphShiftOp), CliError> {
    let mut env_cfg = config.drl.env.clone();
    env_cfg.observed = match &config.drl.observed {
        Some(labels) => Some(resolve_labels(case, labels)?),
        None => None,
    };
    let env = VoltVarEnv::new(case, env_cfg)?;
    let shift = GraphShiftOp::new(env.shift_matrix(), config.drl.model.rescale)?;
    Ok((env, shift))
}

/// Fixed evaluation scenarios, disjoint from the training draws.
fn eval_scenarios(seed: u64, count: usize) -> Vec<u64> {
    (0..count as u64).map(|k| (1 << 62) ^ seed.wrapping_mul(1_000_003).wrapping_add(k)).collect()
}

fn eval_csv(rows: &[(&str, EvalSummary)]) -> String {
    let mut out = String::from("controller,episodes,mean_deviation,mean_episode_reward,failures\n");
    for (name, s) in rows {
        writeln!(
            out,
            "{name},{},{:.12e},{:.12e},{}",
            s.episodes, s.mean_deviation, s.mean_episode_reward, s.failures
        )
        .expect("write to string");
    }
    out
}

fn drl_report(
    env: &mut VoltVarEnv,
    model: &GraphModel,
    shift: &GraphShiftOp,
    config: &RunConfig,
    w: &mut ArtifactWriter,
) -> Result<(), CliError> {
    let seed = config.require_seed()?;
    let scenarios = eval_scenarios(seed, config.drl.eval_episodes);
    let zero = evaluate_controller(env, &Controller::Zero, &scenarios)?;
    let greedy = evaluate_controller(env, &Controller::Greedy(model, shift), &scenarios)?;
    w.write("eval.csv", eval_csv(&[("zero", zero), ("policy", greedy)]))?;
    Ok(())
}

fn drl_train(config: &RunConfig, case: &GridCase, w: &mut ArtifactWriter) -> Result<(), CliError> {
    let seed = config.require_seed()?;
    let (mut env, shift) = drl_env(config, case)?;
    let r = &config.drl;
    let mc = r.model.model_config(r.env.window, env.observation_dim(), Head::Policy { inverters: 1, levels: 1 });
    let mut model = init_policy(&env, mc, seed)?;
    let report = ppo_train(&mut env, &mut model, &shift, &r.ppo, r.episodes, seed)?;
    w.write("policy.json", checkpoint_json(&model, &shift)?)?;
    w.write("rewards.csv", reward_trace_csv(&[report]))?;
    drl_report(&mut env, &model, &shift, config, w)
}

fn drl_eval(config: &RunConfig, case: &GridCase, w: &mut ArtifactWriter) -> Result<(), CliError> {
    let (mut env, shift) = drl_env(config, case)?;
    let path = config.drl.checkpoint.as_deref().expect("checked in run");
    let model = read_checkpoint(path, &shift, w)?;
    drl_report(&mut env, &model, &shift, config, w)
}
