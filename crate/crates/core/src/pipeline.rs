//! End-to-end experiments: build the world, train a method, calibrate on
//! nominal data, score a labelled test split.

use std::collections::BTreeSet;
use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::client::{ClientModel, ClientStatePair};
use crate::config::{AlarmRule, RunConfig};
use crate::ekf::{FilterState, StateSpaceModel};
use crate::error::{Error, InferenceError};
use crate::federation::{Federation, FederationCheckpoint, RoundTrace, TrainOptions, TrainReport};
use crate::inference::{
    arl_metrics, calibrate_threshold, diagnose, episode_roots, fit_residual_stats, flag_step, mahalanobis_sq,
    ArlMetrics, Class, FlagRecord, RcaMetrics, ResidualStats,
};
use crate::linalg::{norm2, vsub, Mat};
use crate::privacy::{DerivedPrivacy, Privatizer, SensitivityBounds};
use crate::seeds::substream_seed;
use crate::server::ServerModel;
use crate::synthetic::{run_oracle_from, Dataset, OracleRun, World};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    /// Proprietary and augmented chains trained with server feedback.
    Framework,
    /// The EKF chain alone; only `Z_c` exists.
    OnlyProprietary,
    /// Nets replace the EKF; only `Z_a` exists.
    WithoutProprietary,
    /// Local-only client training, then a server trained on frozen clients.
    Pretrained,
}

impl Method {
    pub const ALL: [Method; 4] = [
        Method::Framework,
        Method::OnlyProprietary,
        Method::WithoutProprietary,
        Method::Pretrained,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Method::Framework => "framework",
            Method::OnlyProprietary => "only_proprietary",
            Method::WithoutProprietary => "without_proprietary",
            Method::Pretrained => "pretrained",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|m| m.as_str() == s)
    }

    fn has_c(self) -> bool {
        self != Method::WithoutProprietary
    }

    fn has_a(self) -> bool {
        self != Method::OnlyProprietary
    }
}

/// The three splits of one world: nominal training and calibration data
/// and a labelled test split.
#[derive(Debug, Clone)]
pub struct Splits {
    pub train: Dataset,
    pub calib: Dataset,
    pub test: Dataset,
}

pub fn build_world(cfg: &RunConfig) -> Result<World, Error> {
    Ok(World::build(&cfg.world_config())?)
}

pub fn generate_splits(cfg: &RunConfig, world: &World) -> Result<Splits, Error> {
    let e = &cfg.experiment;
    Ok(Splits {
        train: world.generate_split(e.train_steps, "train", false)?,
        calib: world.generate_split(e.calib_steps, "calib", false)?,
        test: world.generate_split(e.test_steps, "test", true)?,
    })
}

/// Client models over the world's local maps.
pub fn build_clients(cfg: &RunConfig, world: &World, method: Method) -> Result<Vec<ClientModel>, Error> {
    (0..cfg.world.clients)
        .map(|m| {
            let model: Arc<dyn StateSpaceModel> = Arc::new(world.local(m).clone());
            let seed = substream_seed(cfg.seed, "client/phi", m as u64);
            let mut c = ClientModel::from_config(m, model, &cfg.client, seed)?;
            c.proprietary = method != Method::WithoutProprietary;
            Ok(c)
        })
        .collect()
}

pub fn build_server(cfg: &RunConfig, world: &World) -> Result<ServerModel, Error> {
    ServerModel::from_config(&cfg.server, world.states().clone(), substream_seed(cfg.seed, "server", 0))
}

/// The oracle knows the true joint maps and the generator's noise levels.
pub fn oracle_for(cfg: &RunConfig, world: &World, data: &Dataset) -> Result<OracleRun, Error> {
    let n = world.states().total();
    let x0 = match &cfg.client.x0 {
        Some(x) => x.iter().copied().cycle().take(n).collect(),
        None => vec![0.0; n],
    };
    let (q, r) = world.noise_variances();
    let fs = FilterState::new(x0, Mat::scaled_identity(n, cfg.client.p0), Mat::from_diag(&q), Mat::from_diag(&r))?;
    Ok(run_oracle_from(world.model.as_ref(), world.states(), data, fs)?)
}

/// Largest ratio `‖g(a) − g(b)‖ / ‖a − b‖` over consecutive sample pairs.
fn sampled_lipschitz<G: Fn(&[f64]) -> Vec<f64>>(g: G, points: &[Vec<f64>]) -> f64 {
    points
        .windows(2)
        .filter_map(|w| {
            let dx = norm2(&vsub(&w[1], &w[0]));
            (dx > 1e-12).then(|| norm2(&vsub(&g(&w[1]), &g(&w[0]))) / dx)
        })
        .fold(0.0, f64::max)
}

/// Bounds for the state-channel calibrations, estimated from a nominal pass
/// of the untrained clients next to the oracle.
pub fn estimate_bounds(cfg: &RunConfig, world: &World, data: &Dataset) -> Result<SensitivityBounds, Error> {
    let mut clients = build_clients(cfg, world, Method::Framework)?;
    let oracle = oracle_for(cfg, world, data)?;
    let mut b = SensitivityBounds::default();
    let steps = data.steps();
    let obs_dims = world.model.observations.clone();
    for (m, c) in clients.iter_mut().enumerate() {
        let mut states = Vec::with_capacity(steps);
        for t in 0..steps {
            c.observe(&data.obs[m][t])?;
            let s = c.state();
            b.c_x = b.c_x.max(norm2(&s.x_hat_c));
            b.sup_r = b.sup_r.max(norm2(&s.residual_c));
            b.sup_y = b.sup_y.max(norm2(&data.obs[m][t]));
            states.push(s.x_hat_c.clone());
        }
        let local = world.local(m);
        b.l_h = b.l_h.max(sampled_lipschitz(|x| local.observe(x), &states));
        b.l_f = b.l_f.max(sampled_lipschitz(|x| local.transition(x), &states));
        b.l_theta = b.l_theta.max(sampled_lipschitz(|y| c.phi.forward(y).expect("dims").0, &data.obs[m]));
        if let (Some(k_c), Some(k_o)) = (c.last_gain(), &oracle.final_gain) {
            let k_o = world.states().extract_rect(k_o, &obs_dims, m);
            b.delta_k = b.delta_k.max(k_c.sub(&k_o)?.norm_2());
        }
    }
    Ok(b)
}

pub fn derive_privacy(cfg: &RunConfig, world: &World, train: &Dataset) -> Result<DerivedPrivacy, Error> {
    let p = &cfg.privacy;
    let needs_bounds = p.bounds.is_none()
        && ((p.state_c.enabled && p.state_c.sigma.is_none()) || (p.state_a.enabled && p.state_a.sigma.is_none()));
    let bounds = if needs_bounds {
        estimate_bounds(cfg, world, train)?
    } else {
        SensitivityBounds::default()
    };
    Ok(p.derive(bounds, train.steps())?)
}

pub struct Trained {
    pub method: Method,
    pub federation: Federation,
    pub report: TrainReport,
    pub derived: DerivedPrivacy,
}

impl Trained {
    pub fn clients(&self) -> &[ClientModel] {
        &self.federation.clients
    }
}

fn run_epochs(fed: &mut Federation, data: &Dataset, epochs: usize, record_last: bool) -> Result<TrainReport, Error> {
    let mut report = TrainReport::default();
    let record = fed.options.record;
    for e in 0..epochs {
        fed.reset();
        fed.options.record = record || (record_last && e + 1 == epochs);
        report.append(fed.train(&data.obs, 0..data.steps())?);
    }
    fed.options.record = record;
    Ok(report)
}

/// Trains `method` on the nominal training split. With `record`, the last
/// epoch keeps per-step states for [`convergence_probe`].
pub fn train(cfg: &RunConfig, world: &World, data: &Dataset, method: Method, record: bool) -> Result<Trained, Error> {
    let derived = derive_privacy(cfg, world, data)?;
    let clients = build_clients(cfg, world, method)?;
    let server = build_server(cfg, world)?;
    let privacy = Privatizer::new(derived, substream_seed(cfg.seed, "privacy", 0), clients.len());
    let epochs = cfg.experiment.epochs;
    let (mut fed, report) = match method {
        Method::Framework | Method::WithoutProprietary => {
            let mut fed = Federation::new(clients, server, privacy, TrainOptions::default())?;
            let report = run_epochs(&mut fed, data, epochs, record)?;
            (fed, report)
        }
        Method::OnlyProprietary => {
            // Nothing is trained; one pass records the shared EKF chain.
            let mut fed = Federation::new(clients, server, privacy, single_phase_options(method))?;
            let report = run_epochs(&mut fed, data, 1, record)?;
            (fed, report)
        }
        Method::Pretrained => {
            let local_only = TrainOptions {
                update_server: false,
                feedback: false,
                update_clients: true,
                record: false,
            };
            let mut fed = Federation::new(clients, server, privacy, local_only)?;
            for c in &mut fed.clients {
                c.eta_server = 0.0;
            }
            let mut report = run_epochs(&mut fed, data, epochs, false)?;
            fed.options = TrainOptions {
                update_server: true,
                feedback: false,
                update_clients: false,
                record: false,
            };
            report.append(run_epochs(&mut fed, data, epochs, record)?);
            (fed, report)
        }
    };
    fed.reset();
    Ok(Trained {
        method,
        federation: fed,
        report,
        derived,
    })
}

fn single_phase_options(method: Method) -> TrainOptions {
    match method {
        Method::OnlyProprietary => TrainOptions {
            update_server: false,
            feedback: false,
            update_clients: false,
            record: false,
        },
        _ => TrainOptions::default(),
    }
}

/// A federation rebuilt from a checkpoint. Noise streams restart from a
/// substream keyed by the checkpoint round.
pub fn restore(
    cfg: &RunConfig,
    world: &World,
    method: Method,
    derived: DerivedPrivacy,
    ck: FederationCheckpoint,
) -> Result<Federation, Error> {
    let clients = build_clients(cfg, world, method)?;
    let server = build_server(cfg, world)?;
    let privacy = Privatizer::new(derived, substream_seed(cfg.seed, "privacy", ck.round as u64), clients.len());
    let mut fed = Federation::new(clients, server, privacy, single_phase_options(method))?;
    fed.restore(ck)?;
    Ok(fed)
}

/// Wraps a restored federation for scoring.
pub fn trained_from_checkpoint(
    cfg: &RunConfig,
    world: &World,
    train_data: &Dataset,
    method: Method,
    ck: FederationCheckpoint,
) -> Result<Trained, Error> {
    let derived = derive_privacy(cfg, world, train_data)?;
    let federation = restore(cfg, world, method, derived, ck)?;
    Ok(Trained {
        method,
        federation,
        report: TrainReport::default(),
        derived,
    })
}

/// Continues training from a checkpoint for `epochs` more passes. Only the
/// single-phase methods can resume.
pub fn resume(
    cfg: &RunConfig,
    world: &World,
    data: &Dataset,
    method: Method,
    ck: FederationCheckpoint,
    epochs: usize,
) -> Result<Trained, Error> {
    if method == Method::Pretrained {
        return Err(Error::Config("the two-phase pretrained method cannot resume".into()));
    }
    let mut trained = trained_from_checkpoint(cfg, world, data, method, ck)?;
    let epochs = if method == Method::OnlyProprietary { 0 } else { epochs };
    trained.report = run_epochs(&mut trained.federation, data, epochs, false)?;
    trained.federation.reset();
    Ok(trained)
}

/// Runs frozen clients over a split from their initial state.
pub fn replay(clients: &[ClientModel], data: &Dataset) -> Result<Vec<Vec<ClientStatePair>>, Error> {
    clients
        .par_iter()
        .enumerate()
        .map(|(m, c)| {
            let mut c = c.clone();
            c.reset();
            data.obs[m]
                .iter()
                .map(|y| {
                    c.observe(y)?;
                    Ok(c.state().clone())
                })
                .collect()
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClientCalibration {
    pub stats_c: Option<ResidualStats>,
    pub stats_a: Option<ResidualStats>,
    pub tau_c: Option<f64>,
    pub tau_a: Option<f64>,
}

fn channel(
    states: &[ClientStatePair],
    burn_in: usize,
    q: f64,
    pick: fn(&ClientStatePair) -> &[f64],
) -> Result<(ResidualStats, f64), Error> {
    let samples: Vec<&[f64]> = states.iter().skip(burn_in).map(pick).collect();
    let stats = fit_residual_stats(&samples)?;
    let d2 = samples
        .iter()
        .map(|r| mahalanobis_sq(r, &stats))
        .collect::<Result<Vec<_>, _>>()?;
    Ok((stats, calibrate_threshold(&d2, q)?))
}

/// Residual statistics and thresholds from a nominal split.
pub fn calibrate(cfg: &RunConfig, method: Method, clients: &[ClientModel], calib: &Dataset) -> Result<Vec<ClientCalibration>, Error> {
    let inf = &cfg.inference;
    let burn_in = inf.burn_in.min(calib.steps().saturating_sub(1));
    replay(clients, calib)?
        .iter()
        .map(|states| {
            let (stats_c, tau_c) = if method.has_c() {
                let (s, t) = channel(states, burn_in, inf.q_c, |s| &s.residual_c)?;
                (Some(s), Some(t))
            } else {
                (None, None)
            };
            let (stats_a, tau_a) = if method.has_a() {
                let (s, t) = channel(states, burn_in, inf.q_a, |s| &s.residual_a)?;
                (Some(s), Some(t))
            } else {
                (None, None)
            };
            Ok(ClientCalibration {
                stats_c,
                stats_a,
                tau_c,
                tau_a,
            })
        })
        .collect()
}

/// One step's flags for one client; absent channels stay `None`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepFlags {
    pub d2_c: Option<f64>,
    pub d2_a: Option<f64>,
    pub z_c: Option<bool>,
    pub z_a: Option<bool>,
    pub zt_c: Option<bool>,
    pub zt_a: Option<bool>,
    pub class: Option<Class>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeOutcome {
    pub onset: usize,
    pub duration: usize,
    pub root: usize,
    pub predicted: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub method: Method,
    pub arl: ArlMetrics,
    pub rca: Option<RcaMetrics>,
    /// Why RCA could not be scored, when it could not.
    pub rca_error: Option<String>,
    pub episodes: Vec<EpisodeOutcome>,
    pub tau_c: Vec<Option<f64>>,
    pub tau_a: Vec<Option<f64>>,
}

#[derive(Debug, Clone)]
pub struct Evaluation {
    /// `flags[m][t]`.
    pub flags: Vec<Vec<StepFlags>>,
    pub alarms: Vec<bool>,
    pub metrics: Metrics,
}

impl Evaluation {
    pub fn records(&self) -> Vec<FlagRecord> {
        let mut out = Vec::new();
        let steps = self.flags.first().map_or(0, Vec::len);
        for t in 0..steps {
            for (m, f) in self.flags.iter().enumerate() {
                let f = &f[t];
                out.push(FlagRecord {
                    t,
                    client: m,
                    d2_c: f.d2_c.unwrap_or(f64::NAN),
                    d2_a: f.d2_a.unwrap_or(f64::NAN),
                    z_c: f.z_c.unwrap_or(false),
                    z_a: f.z_a.unwrap_or(false),
                    zt_c: f.zt_c.unwrap_or(false),
                    zt_a: f.zt_a.unwrap_or(false),
                    class: f.class.unwrap_or(Class::Nominal),
                });
            }
        }
        out
    }
}

/// Scores pre-computed test states against a calibration.
pub fn score_states(
    cfg: &RunConfig,
    method: Method,
    states: &[Vec<ClientStatePair>],
    calibration: &[ClientCalibration],
    test: &Dataset,
    flag_privacy: &mut Privatizer,
) -> Result<Evaluation, Error> {
    let steps = test.steps();
    let m_count = states.len();
    let mut flags = vec![Vec::with_capacity(steps); m_count];
    let mut alarms = vec![false; steps];
    let rca_ok = method.has_c() && method.has_a();
    for t in 0..steps {
        let mut reports = Vec::with_capacity(m_count);
        for m in 0..m_count {
            let cal = &calibration[m];
            let s = &states[m][t];
            let d2_c = cal.stats_c.as_ref().map(|st| mahalanobis_sq(&s.residual_c, st)).transpose()?;
            let d2_a = cal.stats_a.as_ref().map(|st| mahalanobis_sq(&s.residual_a, st)).transpose()?;
            let (fc, fa) = flag_step(
                d2_c.unwrap_or(f64::NEG_INFINITY),
                d2_a.unwrap_or(f64::NEG_INFINITY),
                cal.tau_c.unwrap_or(f64::INFINITY),
                cal.tau_a.unwrap_or(f64::INFINITY),
            );
            let (tc, ta) = flag_privacy.flags(m, fc, fa);
            let z_c = d2_c.map(|_| fc);
            let z_a = d2_a.map(|_| fa);
            let zt_c = d2_c.map(|_| tc);
            let zt_a = d2_a.map(|_| ta);
            let raised = match (zt_c, zt_a, cfg.inference.alarm) {
                (_, Some(a), AlarmRule::Augmented) => a,
                (c, a, _) => c == Some(true) || a == Some(true),
            };
            alarms[t] |= raised;
            reports.push(zt_c.zip(zt_a));
            flags[m].push(StepFlags {
                d2_c,
                d2_a,
                z_c,
                z_a,
                zt_c,
                zt_a,
                class: None,
            });
        }
        if rca_ok {
            let d = diagnose(&reports, &cfg.inference.lookup)?;
            for (m, f) in flags.iter_mut().enumerate() {
                f[t].class = Some(if d.root_cause.contains(&m) {
                    Class::RootCause
                } else if d.propagated.contains(&m) {
                    Class::Propagated
                } else {
                    Class::Nominal
                });
            }
        }
    }
    let arl = arl_metrics(&alarms, &test.episodes, cfg.inference.guard);
    let (rca, rca_error, episodes) = if !rca_ok {
        let missing = if method.has_c() { "augmented" } else { "proprietary" };
        (None, Some(InferenceError::RcaUnavailable(missing).to_string()), Vec::new())
    } else {
        let classes: Vec<Vec<Class>> = flags
            .iter()
            .map(|f| f.iter().map(|s| s.class.unwrap_or(Class::Nominal)).collect())
            .collect();
        let roots = episode_roots(&classes, &test.episodes, cfg.inference.vote_fraction);
        let truth: Vec<usize> = test.episodes.iter().map(|e| e.root).collect();
        let episodes = test
            .episodes
            .iter()
            .zip(&roots)
            .map(|(e, r)| EpisodeOutcome {
                onset: e.onset,
                duration: e.duration,
                root: e.root,
                predicted: r.iter().copied().collect(),
            })
            .collect();
        match rca_metrics_or_none(&roots, &truth) {
            Ok(m) => (Some(m), None, episodes),
            Err(e) => (None, Some(e.to_string()), episodes),
        }
    };
    Ok(Evaluation {
        flags,
        alarms,
        metrics: Metrics {
            method,
            arl,
            rca,
            rca_error,
            episodes,
            tau_c: calibration.iter().map(|c| c.tau_c).collect(),
            tau_a: calibration.iter().map(|c| c.tau_a).collect(),
        },
    })
}

fn rca_metrics_or_none(roots: &[BTreeSet<usize>], truth: &[usize]) -> Result<RcaMetrics, InferenceError> {
    crate::inference::rca_metrics(roots, truth)
}

/// A flag privatizer for the inference stage.
pub fn flag_privatizer(cfg: &RunConfig, derived: &DerivedPrivacy) -> Privatizer {
    Privatizer::new(*derived, substream_seed(cfg.seed, "inference/flags", 0), cfg.world.clients)
}

/// Calibrates and scores a trained method end to end.
pub fn evaluate(cfg: &RunConfig, trained: &Trained, splits: &Splits) -> Result<Evaluation, Error> {
    let calibration = calibrate(cfg, trained.method, trained.clients(), &splits.calib)?;
    let states = replay(trained.clients(), &splits.test)?;
    let mut p = flag_privatizer(cfg, &trained.derived);
    score_states(cfg, trained.method, &states, &calibration, &splits.test, &mut p)
}

/// Everything one configuration produces for one method.
pub struct RunOutput {
    pub world: World,
    pub splits: Splits,
    pub trained: Trained,
    pub evaluation: Evaluation,
}

pub fn run(cfg: &RunConfig, method: Method) -> Result<RunOutput, Error> {
    cfg.validate()?;
    let world = build_world(cfg)?;
    let splits = generate_splits(cfg, &world)?;
    let trained = train(cfg, &world, &splits.train, method, false)?;
    let evaluation = evaluate(cfg, &trained, &splits)?;
    Ok(RunOutput {
        world,
        splits,
        trained,
        evaluation,
    })
}

/// Mean of the last `window` entries.
pub fn tail_mean(v: &[f64], window: usize) -> f64 {
    let w = window.clamp(1, v.len().max(1));
    let tail = &v[v.len().saturating_sub(w)..];
    if tail.is_empty() {
        f64::NAN
    } else {
        tail.iter().sum::<f64>() / tail.len() as f64
    }
}

pub fn pearson(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len().min(b.len()) as f64;
    if n < 2.0 {
        return f64::NAN;
    }
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma).powi(2);
        sbb += (y - mb).powi(2);
    }
    if saa == 0.0 || sbb == 0.0 {
        return 0.0;
    }
    sab / (saa * sbb).sqrt()
}

/// `corr(a[t][i], b[t][j])` over the rows of two per-step series.
pub fn cross_correlation(a: &[&[f64]], b: &[&[f64]]) -> Mat {
    let (p, q) = (a.first().map_or(0, |v| v.len()), b.first().map_or(0, |v| v.len()));
    let mut out = Mat::zeros(p, q);
    for i in 0..p {
        let ai: Vec<f64> = a.iter().map(|v| v[i]).collect();
        for j in 0..q {
            let bj: Vec<f64> = b.iter().map(|v| v[j]).collect();
            out[(i, j)] = pearson(&ai, &bj);
        }
    }
    out
}

/// Cross-client correlation blocks between clients 0 and 1 under each view.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorrelationViews {
    pub oracle: Mat,
    pub proprietary: Mat,
    pub augmented: Mat,
    pub server: Mat,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConvergenceProbe {
    /// Per round, mean over clients of `‖x_a − x_o‖`.
    pub augmented_error: Vec<f64>,
    /// Per round, mean over clients of `‖x_c − x_o‖`.
    pub proprietary_error: Vec<f64>,
    /// Per round, mean over clients of `‖x_s − x_o‖`.
    pub server_error: Vec<f64>,
    /// Pearson correlation of server and oracle predictions over the window.
    pub server_correlation: f64,
    pub correlations: Option<CorrelationViews>,
    pub window: usize,
}

/// Compares recorded training states to the oracle on the same data.
pub fn convergence_probe(trace: &[RoundTrace], oracle: &OracleRun, window: usize) -> Result<ConvergenceProbe, Error> {
    let steps = trace.len();
    let m_count = oracle.pred.len();
    if oracle.pred.iter().any(|p| p.len() != steps) || trace.iter().any(|r| r.clients.len() != m_count) {
        return Err(Error::Config(format!(
            "probe needs matching runs: {steps} recorded rounds vs {} oracle steps",
            oracle.pred.first().map_or(0, Vec::len)
        )));
    }
    let mean_err = |pick: &dyn Fn(&RoundTrace, usize) -> Vec<f64>| -> Vec<f64> {
        trace
            .iter()
            .enumerate()
            .map(|(t, r)| {
                (0..m_count)
                    .map(|m| norm2(&vsub(&pick(r, m), &oracle.pred[m][t])))
                    .sum::<f64>()
                    / m_count as f64
            })
            .collect()
    };
    let augmented_error = mean_err(&|r, m| r.clients[m].x_a.clone());
    let proprietary_error = mean_err(&|r, m| r.clients[m].x_c.clone());
    let server_error = mean_err(&|r, m| r.server[m].clone());
    let start = steps.saturating_sub(window);
    let (mut xs, mut xo) = (Vec::new(), Vec::new());
    for t in start..steps {
        for m in 0..m_count {
            xs.extend_from_slice(&trace[t].server[m]);
            xo.extend_from_slice(&oracle.pred[m][t]);
        }
    }
    let correlations = (m_count >= 2).then(|| {
        let rows = start..steps;
        let view = |pick: &dyn Fn(usize, usize) -> Vec<f64>| -> Mat {
            let a: Vec<Vec<f64>> = rows.clone().map(|t| pick(t, 0)).collect();
            let b: Vec<Vec<f64>> = rows.clone().map(|t| pick(t, 1)).collect();
            let a: Vec<&[f64]> = a.iter().map(Vec::as_slice).collect();
            let b: Vec<&[f64]> = b.iter().map(Vec::as_slice).collect();
            cross_correlation(&a, &b)
        };
        CorrelationViews {
            oracle: view(&|t, m| oracle.pred[m][t].clone()),
            proprietary: view(&|t, m| trace[t].clients[m].x_c.clone()),
            augmented: view(&|t, m| trace[t].clients[m].x_a.clone()),
            server: view(&|t, m| trace[t].server[m].clone()),
        }
    });
    Ok(ConvergenceProbe {
        augmented_error,
        proprietary_error,
        server_error,
        server_correlation: pearson(&xs, &xo),
        correlations,
        window,
    })
}

/// Trains the framework with recording and probes it against the oracle.
pub fn probe_run(cfg: &RunConfig, window: usize) -> Result<(Trained, OracleRun, ConvergenceProbe), Error> {
    let world = build_world(cfg)?;
    let train_data = world.generate_split(cfg.experiment.train_steps, "train", false)?;
    let trained = train(cfg, &world, &train_data, Method::Framework, true)?;
    let oracle = oracle_for(cfg, &world, &train_data)?;
    let probe = convergence_probe(&trained.report.trace, &oracle, window)?;
    Ok((trained, oracle, probe))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepAxis {
    /// σ on both upstream state channels.
    SigmaC2s,
    /// σ on the downstream gradient channel.
    SigmaS2c,
    PC,
    PA,
    /// Percentile of `τ_a`.
    TauA,
    Clients,
}

impl SweepAxis {
    pub const ALL: [SweepAxis; 6] = [
        SweepAxis::SigmaC2s,
        SweepAxis::SigmaS2c,
        SweepAxis::PC,
        SweepAxis::PA,
        SweepAxis::TauA,
        SweepAxis::Clients,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            SweepAxis::SigmaC2s => "sigma_c2s",
            SweepAxis::SigmaS2c => "sigma_s2c",
            SweepAxis::PC => "p_c",
            SweepAxis::PA => "p_a",
            SweepAxis::TauA => "tau_a",
            SweepAxis::Clients => "clients",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|a| a.as_str() == s)
    }

    /// The config with this axis set to `value`.
    pub fn apply(self, cfg: &RunConfig, value: f64) -> Result<RunConfig, Error> {
        let mut c = cfg.clone();
        let p = &mut c.privacy;
        match self {
            SweepAxis::SigmaC2s => {
                for ch in [&mut p.state_c, &mut p.state_a] {
                    ch.enabled = value > 0.0;
                    ch.sigma = Some(value);
                }
            }
            SweepAxis::SigmaS2c => {
                p.gradient.enabled = value > 0.0;
                p.gradient.sigma = Some(value);
            }
            SweepAxis::PC | SweepAxis::PA => {
                p.flags.enabled = true;
                let other = |v: Option<f64>| Some(v.unwrap_or(1.0));
                if self == SweepAxis::PC {
                    p.flags.p_c = Some(value);
                    p.flags.p_a = other(p.flags.p_a);
                } else {
                    p.flags.p_a = Some(value);
                    p.flags.p_c = other(p.flags.p_c);
                }
            }
            SweepAxis::TauA => c.inference.q_a = value,
            SweepAxis::Clients => {
                if value < 1.0 || value.fract() != 0.0 {
                    return Err(Error::Config(format!("client count must be a positive integer, got {value}")));
                }
                c.world.clients = value as usize;
                c.world.couplings = None;
            }
        }
        c.validate()?;
        Ok(c)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub value: f64,
    pub repeat: usize,
    pub seed: u64,
    pub final_server_loss: f64,
    pub final_local_loss: f64,
    pub arl0: Option<f64>,
    pub arl1: Option<f64>,
    pub precision: Option<f64>,
    pub recall: Option<f64>,
    pub f1: Option<f64>,
    pub bytes_per_round: f64,
}

/// Rounds averaged for the "final" losses.
pub const FINAL_WINDOW: usize = 200;

pub fn sweep_point(cfg: &RunConfig, axis: SweepAxis, value: f64, repeat: usize) -> Result<SweepRow, Error> {
    let seed = substream_seed(cfg.seed, "sweep/repeat", repeat as u64);
    let c = axis.apply(&cfg.with_seed(seed), value)?;
    let out = run(&c, Method::Framework)?;
    let report = &out.trained.report;
    let m_count = c.world.clients;
    let local: Vec<f64> = report
        .rounds
        .iter()
        .map(|r| r.local_losses.iter().sum::<f64>() / m_count as f64)
        .collect();
    let bytes = report.rounds.iter().map(|r| r.bytes() as f64).sum::<f64>() / report.rounds.len().max(1) as f64;
    let m = &out.evaluation.metrics;
    Ok(SweepRow {
        value,
        repeat,
        seed,
        final_server_loss: tail_mean(&report.server_losses(), FINAL_WINDOW),
        final_local_loss: tail_mean(&local, FINAL_WINDOW),
        arl0: m.arl.arl0,
        arl1: m.arl.arl1,
        precision: m.rca.map(|r| r.precision),
        recall: m.rca.map(|r| r.recall),
        f1: m.rca.map(|r| r.f1),
        bytes_per_round: bytes,
    })
}

/// Runs every (value, repeat) pair, at most `workers` at a time.
pub fn sweep(cfg: &RunConfig, axis: SweepAxis, values: &[f64]) -> Result<Vec<SweepRow>, Error> {
    let repeats = cfg.experiment.repeats.max(1);
    let jobs: Vec<(f64, usize)> = values
        .iter()
        .flat_map(|&v| (0..repeats).map(move |r| (v, r)))
        .collect();
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.experiment.workers)
        .build()
        .map_err(|e| Error::Config(e.to_string()))?;
    pool.install(|| {
        jobs.par_iter()
            .map(|&(v, r)| sweep_point(cfg, axis, v, r))
            .collect()
    })
}
