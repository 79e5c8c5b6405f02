//! Synthetic experiments comparing simulation against state evolution.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use nalgebra::DVector;
use rand::RngCore;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::baselines::{map_estimate, sgld_run, HamiltonianContext, MapOptions, SgldOptions};
use crate::engine::{EngineOptions, MlVamp};
use crate::error::{ensure_len, Error, Result};
use crate::linalg::rng_for;
use crate::network::{
    build_synthetic_network, empirical_layer_moments, sample_trajectory, NetworkSpec, SyntheticConfig, Trajectory,
};
use crate::se::{compute_tau0, predicted_nmse_db, run_se, statistics_from_network, SeOptions, SeState};

pub const NMSE_FLOOR_DB: f64 = -200.0;

const TRIAL_STREAM: u64 = 600;

/// `10·log10(‖z − ẑ‖²/‖z‖²)`, clipped below at -200 dB.
pub fn nmse_db(truth: &DVector<f64>, estimate: &DVector<f64>) -> Result<f64> {
    ensure_len("estimate", truth.len(), estimate.len())?;
    let denom = truth.norm_squared();
    if !(denom > 0.0) {
        return Err(Error::InvalidArgument("NMSE of a zero-norm truth".into()));
    }
    let db = 10.0 * ((truth - estimate).norm_squared() / denom).log10();
    Ok(db.max(NMSE_FLOOR_DB))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Mlvamp,
    Map,
    Sgld,
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Method::Mlvamp => "mlvamp",
            Method::Map => "map",
            Method::Sgld => "sgld",
        })
    }
}

impl std::str::FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mlvamp" => Ok(Method::Mlvamp),
            "map" => Ok(Method::Map),
            "sgld" => Ok(Method::Sgld),
            other => Err(Error::InvalidArgument(format!("unknown method {other:?}"))),
        }
    }
}

/// A complete experiment description. Every default is the setup of the
/// synthetic-network experiment: dims [20, 100, 500, 784], ReLU, ρ = 0.4,
/// κ = 10, M = 300, 30 dB, 50 iterations, 10 trials.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    /// Recipe for the random network of each trial. `network.n_meas` is the
    /// measurement count of the iteration experiment.
    pub network: SyntheticConfig,
    /// Use this network in every trial instead of drawing one.
    pub network_file: Option<PathBuf>,
    pub sweep_n_meas: Vec<usize>,
    pub n_iter: usize,
    pub n_trials: usize,
    pub seed: u64,
    pub methods: Vec<Method>,
    pub engine: EngineOptions,
    pub se: SeOptions,
    /// Run state evolution on every trial's network; otherwise only on the
    /// network of trial 0 and share the prediction.
    pub se_per_trial: bool,
    pub map: MapOptions,
    pub sgld: SgldOptions,
    /// Record wall-clock times; off writes zeros so outputs are reproducible
    /// byte for byte.
    pub record_runtime: bool,
    pub out_dir: Option<PathBuf>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            network: SyntheticConfig::default(),
            network_file: None,
            sweep_n_meas: vec![100, 200, 300, 400, 500, 600],
            n_iter: 50,
            n_trials: 10,
            seed: 0,
            methods: vec![Method::Mlvamp],
            engine: EngineOptions::default(),
            se: SeOptions::default(),
            se_per_trial: true,
            map: MapOptions::default(),
            sgld: SgldOptions::default(),
            record_runtime: true,
            out_dir: None,
        }
    }
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_iter == 0 {
            return Err(Error::InvalidArgument("n_iter must be at least 1".into()));
        }
        if self.methods.is_empty() {
            return Err(Error::InvalidArgument("no methods selected".into()));
        }
        if self.sweep_n_meas.iter().any(|&m| m == 0) {
            return Err(Error::InvalidArgument("measurement counts must be positive".into()));
        }
        if self.network_file.is_none() && self.network.dims.is_empty() {
            return Err(Error::InvalidArgument("network dims are empty".into()));
        }
        Ok(())
    }

    fn load_network(&self, n_meas: usize, net_seed: u64) -> Result<NetworkSpec> {
        match &self.network_file {
            Some(path) => NetworkSpec::from_json(&fs::read_to_string(path)?),
            None => build_synthetic_network(&SyntheticConfig {
                n_meas,
                seed: net_seed,
                ..self.network.clone()
            }),
        }
    }

    fn elapsed_ms(&self, t: Instant) -> f64 {
        if self.record_runtime {
            t.elapsed().as_secs_f64() * 1e3
        } else {
            0.0
        }
    }
}

/// Network and trajectory seeds of a trial. The same pair is used by every
/// method and every measurement count.
pub fn trial_seeds(seed: u64, trial: usize) -> (u64, u64) {
    let mut rng = rng_for(seed, TRIAL_STREAM + trial as u64);
    (rng.next_u64(), rng.next_u64())
}

/// One CSV row. Baselines have no half-iteration and report only layer 0.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Row {
    pub trial: usize,
    pub method: Method,
    pub half_iter: Option<usize>,
    pub layer: usize,
    pub nmse_db: f64,
    pub se_nmse_db: Option<f64>,
    pub gamma_plus: Option<f64>,
    pub gamma_minus: Option<f64>,
    pub clamp_events: usize,
    pub runtime_ms: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialFailure {
    pub trial: usize,
    pub method: Option<Method>,
    pub n_meas: usize,
    pub message: String,
}

/// `(1/N_ℓ)‖q⁰_ℓ‖²` of a trial next to the predicted `τ⁰_ℓ`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialMoments {
    pub trial: usize,
    pub dims: Vec<usize>,
    pub empirical: Vec<f64>,
    pub tau0: Option<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialEstimate {
    pub trial: usize,
    pub method: Method,
    pub z0: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub n_meas: usize,
    pub method: Method,
    /// Final layer-0 NMSE of every trial that completed.
    pub trial_final_db: Vec<(usize, f64)>,
    pub median_db: Option<f64>,
    pub q25_db: Option<f64>,
    pub q75_db: Option<f64>,
    pub se_final_db: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ExperimentResult {
    pub rows: Vec<Row>,
    pub sweep: Vec<SweepPoint>,
    pub moments: Vec<TrialMoments>,
    pub estimates: Vec<TrialEstimate>,
    pub failures: Vec<TrialFailure>,
    pub seeds: Vec<(u64, u64)>,
}

impl ExperimentResult {
    /// Writes `rows.csv`, `sweep.csv` (when present) and `result.json`.
    pub fn write_to(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        let mut w = csv::Writer::from_path(dir.join("rows.csv"))?;
        if self.rows.is_empty() {
            w.write_record([
                "trial",
                "method",
                "half_iter",
                "layer",
                "nmse_db",
                "se_nmse_db",
                "gamma_plus",
                "gamma_minus",
                "clamp_events",
                "runtime_ms",
            ])?;
        }
        for row in &self.rows {
            w.serialize(row)?;
        }
        w.flush()?;
        if !self.sweep.is_empty() {
            let mut w = csv::Writer::from_path(dir.join("sweep.csv"))?;
            w.write_record(["n_meas", "method", "trials", "median_db", "q25_db", "q75_db", "se_final_db"])?;
            let opt = |x: Option<f64>| x.map(|v| v.to_string()).unwrap_or_default();
            for p in &self.sweep {
                w.write_record([
                    p.n_meas.to_string(),
                    p.method.to_string(),
                    p.trial_final_db.len().to_string(),
                    opt(p.median_db),
                    opt(p.q25_db),
                    opt(p.q75_db),
                    opt(p.se_final_db),
                ])?;
            }
            w.flush()?;
        }
        fs::write(dir.join("result.json"), serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    /// Median over trials of `|simulated − predicted|` at every
    /// half-iteration of one layer.
    pub fn median_abs_gap(&self, layer: usize) -> Vec<(usize, f64)> {
        let mut by_half: std::collections::BTreeMap<usize, Vec<f64>> = Default::default();
        for r in &self.rows {
            if let (Method::Mlvamp, Some(h), Some(se)) = (r.method, r.half_iter, r.se_nmse_db) {
                if r.layer == layer {
                    by_half.entry(h).or_default().push((r.nmse_db - se).abs());
                }
            }
        }
        by_half
            .into_iter()
            .map(|(h, mut v)| (h, quantile(&mut v, 0.5)))
            .collect()
    }

    /// Median over trials of the simulated NMSE at every half-iteration.
    pub fn median_nmse(&self, method: Method, layer: usize) -> Vec<(Option<usize>, f64)> {
        let mut by_half: std::collections::BTreeMap<Option<usize>, Vec<f64>> = Default::default();
        for r in self.rows.iter().filter(|r| r.method == method && r.layer == layer) {
            by_half.entry(r.half_iter).or_default().push(r.nmse_db);
        }
        by_half
            .into_iter()
            .map(|(h, mut v)| (h, quantile(&mut v, 0.5)))
            .collect()
    }
}

/// Linear-interpolated quantile; sorts `v` in place. NaN for an empty slice.
pub fn quantile(v: &mut [f64], q: f64) -> f64 {
    if v.is_empty() {
        return f64::NAN;
    }
    v.sort_by(f64::total_cmp);
    let pos = q.clamp(0.0, 1.0) * (v.len() - 1) as f64;
    let (lo, hi) = (pos.floor() as usize, pos.ceil() as usize);
    v[lo] + (v[hi] - v[lo]) * (pos - lo as f64)
}

struct TrialOutput {
    rows: Vec<Row>,
    moments: Option<TrialMoments>,
    estimates: Vec<TrialEstimate>,
    failures: Vec<TrialFailure>,
}

fn failure(trial: usize, method: Option<Method>, n_meas: usize, e: &Error) -> TrialFailure {
    TrialFailure {
        trial,
        method,
        n_meas,
        message: e.to_string(),
    }
}

fn se_for(net: &NetworkSpec, cfg: &ExperimentConfig) -> Result<SeState> {
    run_se(&statistics_from_network(net), cfg.n_iter, &cfg.se)
}

/// ML-VAMP with per-half-iteration rows; keeps the rows produced before a
/// failure.
fn run_mlvamp(
    trial: usize,
    net: &NetworkSpec,
    traj: &Trajectory,
    se: Option<&SeState>,
    cfg: &ExperimentConfig,
    rows: &mut Vec<Row>,
) -> Result<DVector<f64>> {
    let opts = EngineOptions {
        max_iter: cfg.n_iter,
        ..cfg.engine
    };
    let mut engine = MlVamp::new(net, traj.observation(), opts)?;
    let mut last = None;
    for _ in 0..cfg.n_iter {
        for forward in [true, false] {
            let t = Instant::now();
            let half = if forward {
                engine.forward_pass(Some(traj))?
            } else {
                engine.backward_pass(Some(traj))?
            };
            let runtime_ms = cfg.elapsed_ms(t);
            for layer in 0..net.n_stages() {
                rows.push(Row {
                    trial,
                    method: Method::Mlvamp,
                    half_iter: Some(half.index),
                    layer,
                    nmse_db: half.nmse_db[layer],
                    se_nmse_db: se.and_then(|s| predicted_nmse_db(s, layer, half.index).ok()),
                    gamma_plus: Some(half.gamma_plus[layer]),
                    gamma_minus: Some(half.gamma_minus[layer]),
                    clamp_events: half.layers[layer].clamp_events,
                    runtime_ms,
                });
            }
            last = Some(half);
        }
    }
    Ok(last.unwrap().layers[0].z_hat.clone())
}

fn baseline_row(trial: usize, method: Method, truth: &DVector<f64>, z0: &DVector<f64>, ms: f64) -> Result<Row> {
    Ok(Row {
        trial,
        method,
        half_iter: None,
        layer: 0,
        nmse_db: nmse_db(truth, z0)?,
        se_nmse_db: None,
        gamma_plus: None,
        gamma_minus: None,
        clamp_events: 0,
        runtime_ms: ms,
    })
}

fn run_trial(trial: usize, n_meas: usize, shared_se: Option<&SeState>, cfg: &ExperimentConfig) -> TrialOutput {
    let mut out = TrialOutput {
        rows: Vec::new(),
        moments: None,
        estimates: Vec::new(),
        failures: Vec::new(),
    };
    let (net_seed, traj_seed) = trial_seeds(cfg.seed, trial);
    let net = match cfg.load_network(n_meas, net_seed) {
        Ok(net) => net,
        Err(e) => {
            out.failures.push(failure(trial, None, n_meas, &e));
            return out;
        }
    };
    let traj = sample_trajectory(&net, traj_seed);
    let stats = statistics_from_network(&net);
    out.moments = Some(TrialMoments {
        trial,
        dims: net.dims().to_vec(),
        empirical: empirical_layer_moments(&traj),
        tau0: compute_tau0(&stats, cfg.se.mean_aware).ok().map(|t| t.0),
    });

    let own_se;
    let se = if cfg.methods.contains(&Method::Mlvamp) && cfg.se_per_trial {
        own_se = se_for(&net, cfg);
        match &own_se {
            Ok(s) => Some(s),
            Err(e) => {
                out.failures.push(failure(trial, Some(Method::Mlvamp), n_meas, e));
                None
            }
        }
    } else {
        shared_se
    };

    let truth = &traj.z[0];
    let ctx = if cfg.methods.iter().any(|m| *m != Method::Mlvamp) {
        Some(HamiltonianContext::new(&net, traj.observation()))
    } else {
        None
    };
    for &method in &cfg.methods {
        let t = Instant::now();
        let estimate = match method {
            Method::Mlvamp => run_mlvamp(trial, &net, &traj, se, cfg, &mut out.rows),
            Method::Map => match ctx.as_ref().unwrap() {
                Ok(ctx) => map_estimate(ctx, &cfg.map, traj_seed).map(|r| r.z0),
                Err(e) => Err(Error::Unsupported(e.to_string())),
            },
            Method::Sgld => match ctx.as_ref().unwrap() {
                Ok(ctx) => sgld_run(ctx, &cfg.sgld, traj_seed).map(|r| r.mean_z0),
                Err(e) => Err(Error::Unsupported(e.to_string())),
            },
        };
        let ms = cfg.elapsed_ms(t);
        match estimate {
            Ok(z0) => {
                if method != Method::Mlvamp {
                    match baseline_row(trial, method, truth, &z0, ms) {
                        Ok(row) => out.rows.push(row),
                        Err(e) => out.failures.push(failure(trial, Some(method), n_meas, &e)),
                    }
                }
                out.estimates.push(TrialEstimate {
                    trial,
                    method,
                    z0: z0.as_slice().to_vec(),
                });
            }
            Err(e) => out.failures.push(failure(trial, Some(method), n_meas, &e)),
        }
    }
    out
}

fn run_trials(cfg: &ExperimentConfig, n_meas: usize) -> (ExperimentResult, Option<SeState>) {
    let mut result = ExperimentResult {
        seeds: (0..cfg.n_trials).map(|t| trial_seeds(cfg.seed, t)).collect(),
        ..Default::default()
    };
    let mut shared = None;
    if !cfg.se_per_trial || cfg.n_trials == 0 {
        let (net_seed, _) = trial_seeds(cfg.seed, 0);
        match cfg.load_network(n_meas, net_seed).and_then(|net| se_for(&net, cfg)) {
            Ok(se) => shared = Some(se),
            Err(e) => result.failures.push(failure(0, Some(Method::Mlvamp), n_meas, &e)),
        }
    }
    let outputs: Vec<TrialOutput> = (0..cfg.n_trials)
        .into_par_iter()
        .map(|t| run_trial(t, n_meas, shared.as_ref(), cfg))
        .collect();
    for o in outputs {
        result.rows.extend(o.rows);
        result.moments.extend(o.moments);
        result.estimates.extend(o.estimates);
        result.failures.extend(o.failures);
    }
    (result, shared)
}

fn finish(result: ExperimentResult, cfg: &ExperimentConfig) -> Result<ExperimentResult> {
    if let Some(dir) = &cfg.out_dir {
        result.write_to(dir)?;
    }
    for f in &result.failures {
        log::warn!("trial {} ({:?}, M = {}) failed: {}", f.trial, f.method, f.n_meas, f.message);
    }
    Ok(result)
}

/// NMSE per half-iteration and layer over `n_trials` random networks with
/// `network.n_meas` measurements, next to the state-evolution prediction.
pub fn run_iteration_experiment(cfg: &ExperimentConfig) -> Result<ExperimentResult> {
    cfg.validate()?;
    let (result, _) = run_trials(cfg, cfg.network.n_meas);
    finish(result, cfg)
}

/// Final layer-0 NMSE for every measurement count in `sweep_n_meas`.
pub fn run_measurement_sweep(cfg: &ExperimentConfig) -> Result<ExperimentResult> {
    cfg.validate()?;
    if cfg.sweep_n_meas.is_empty() {
        return Err(Error::InvalidArgument("empty measurement sweep".into()));
    }
    let last_half = 2 * cfg.n_iter - 1;
    let mut total = ExperimentResult::default();
    for &m in &cfg.sweep_n_meas {
        let (mut r, shared) = run_trials(cfg, m);
        for &method in &cfg.methods {
            let mut finals: Vec<(usize, f64)> = r
                .rows
                .iter()
                .filter(|row| row.method == method && row.layer == 0)
                .filter(|row| method != Method::Mlvamp || row.half_iter == Some(last_half))
                .map(|row| (row.trial, row.nmse_db))
                .collect();
            finals.sort_by_key(|f| f.0);
            let mut vals: Vec<f64> = finals.iter().map(|f| f.1).collect();
            let se_final_db = if method != Method::Mlvamp {
                None
            } else if let Some(se) = &shared {
                predicted_nmse_db(se, 0, last_half).ok()
            } else {
                let mut v: Vec<f64> = r
                    .rows
                    .iter()
                    .filter(|row| row.layer == 0 && row.half_iter == Some(last_half))
                    .filter_map(|row| row.se_nmse_db)
                    .collect();
                (!v.is_empty()).then(|| quantile(&mut v, 0.5))
            };
            let q = |p: f64, v: &mut Vec<f64>| (!v.is_empty()).then(|| quantile(v, p));
            total.sweep.push(SweepPoint {
                n_meas: m,
                method,
                median_db: q(0.5, &mut vals),
                q25_db: q(0.25, &mut vals),
                q75_db: q(0.75, &mut vals),
                trial_final_db: finals,
                se_final_db,
            });
        }
        total.failures.append(&mut r.failures);
        total.moments.append(&mut r.moments);
        total.seeds = r.seeds;
    }
    finish(total, cfg)
}

/// Every method in `methods` on the same trajectories.
pub fn run_baseline_comparison(cfg: &ExperimentConfig) -> Result<ExperimentResult> {
    cfg.validate()?;
    let (result, _) = run_trials(cfg, cfg.network.n_meas);
    finish(result, cfg)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn nmse_reference_values() {
        let z = DVector::from_vec(vec![1.0, -2.0, 0.5]);
        assert_eq!(nmse_db(&z, &z).unwrap(), NMSE_FLOOR_DB);
        assert_eq!(nmse_db(&z, &DVector::zeros(3)).unwrap(), 0.0);
        assert!((nmse_db(&z, &(-&z)).unwrap() - 6.0206).abs() < 1e-4);
        assert!(nmse_db(&DVector::zeros(3), &z).is_err());
    }

    #[test]
    fn quantiles() {
        let mut v = vec![3.0, 1.0, 2.0, 4.0];
        assert_eq!(quantile(&mut v, 0.5), 2.5);
        assert_eq!(quantile(&mut v, 0.0), 1.0);
        assert!(quantile(&mut [], 0.5).is_nan());
    }

    #[test]
    fn method_names_round_trip() {
        for m in [Method::Mlvamp, Method::Map, Method::Sgld] {
            assert_eq!(m.to_string().parse::<Method>().unwrap(), m);
        }
        assert!("vamp".parse::<Method>().is_err());
    }

    #[test]
    fn config_defaults_survive_json() {
        let cfg = ExperimentConfig::default();
        let back = ExperimentConfig::from_json(&serde_json::to_string(&cfg).unwrap()).unwrap();
        assert_eq!(back, cfg);
        let partial = ExperimentConfig::from_json(r#"{"n_trials": 3}"#).unwrap();
        assert_eq!(partial.n_trials, 3);
        assert_eq!(partial.network.dims, vec![20, 100, 500, 784]);
        assert!(ExperimentConfig::from_json(r#"{"methods": []}"#).is_err());
    }

    #[test]
    fn trial_seeds_differ() {
        assert_ne!(trial_seeds(0, 0), trial_seeds(0, 1));
        assert_eq!(trial_seeds(7, 3), trial_seeds(7, 3));
    }
}
