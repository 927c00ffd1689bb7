//! Coupled nonlinear state-space world and dataset generation.
//!
//! Each client evolves as `x_m' = A_m·tanh(x_m) + Σ_{n→m} B_nm·tanh(x_n) + ε_m`
//! and is observed through `y_m = C_m·x_m + b_m + ζ_m`. Anomalies are
//! additive drives on one root client's state equation.

use std::sync::Arc;

use rand::Rng;
use rand_distr::{Distribution, Exp, StandardNormal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::dims::DimTable;
use crate::ekf::StateSpaceModel;
use crate::error::WorldError;
use crate::linalg::{norm_inf, spectral_radius, vadd, Mat};
use crate::seeds::substream;

/// Largest state magnitude tolerated before generation gives up.
pub const DIVERGENCE_LIMIT: f64 = 1e6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Edge {
    pub from: usize,
    pub to: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AnomalyMode {
    #[default]
    Poisson,
    Explicit,
    None,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnomalyEvent {
    pub onset: usize,
    pub client: usize,
    /// Overrides `kappa` for this event.
    #[serde(default)]
    pub kappa: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AnomalyConfig {
    pub mode: AnomalyMode,
    /// Poisson arrival rate per step per client.
    pub rate: f64,
    /// Shift magnitude in units of the client's nominal state std.
    pub kappa: f64,
    pub duration: usize,
    /// Steps at the start of a split that never host an onset.
    pub warmup: usize,
    /// Minimum nominal gap after an episode before the next onset.
    pub gap: usize,
    pub events: Vec<AnomalyEvent>,
}

impl Default for AnomalyConfig {
    fn default() -> Self {
        Self {
            mode: AnomalyMode::Poisson,
            rate: 1.0 / 2000.0,
            kappa: 4.0,
            duration: 50,
            warmup: 100,
            gap: 100,
            events: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct WorldConfig {
    pub clients: usize,
    pub state_dim: usize,
    pub obs_dim: usize,
    /// Directed coupling edges (0-based). `None` means the chain 0→1→…→M−1.
    pub couplings: Option<Vec<Edge>>,
    /// Spectral norm of every coupling matrix.
    pub coupling_strength: f64,
    /// Spectral radius of every local transition matrix.
    pub spectral_radius: f64,
    /// Process-noise variance per client; the last entry covers the rest.
    pub process_noise: Vec<f64>,
    /// Observation-noise variance per client; the last entry covers the rest.
    pub obs_noise: Vec<f64>,
    /// Std of the random observation offsets `b_m`.
    pub obs_bias: f64,
    pub steps: usize,
    /// Set from the run's master seed.
    #[serde(skip)]
    pub seed: u64,
    pub anomalies: AnomalyConfig,
}

impl Default for WorldConfig {
    fn default() -> Self {
        Self {
            clients: 2,
            state_dim: 2,
            obs_dim: 4,
            couplings: None,
            coupling_strength: 0.5,
            spectral_radius: 0.9,
            process_noise: vec![0.05, 0.005],
            obs_noise: vec![0.01],
            obs_bias: 0.1,
            steps: 2000,
            seed: 7,
            anomalies: AnomalyConfig::default(),
        }
    }
}

impl WorldConfig {
    pub fn edges(&self) -> Vec<Edge> {
        self.couplings.clone().unwrap_or_else(|| {
            (1..self.clients)
                .map(|to| Edge { from: to - 1, to })
                .collect()
        })
    }

    fn per_client(values: &[f64], m: usize) -> f64 {
        values[m.min(values.len() - 1)]
    }

    pub fn process_noise_of(&self, m: usize) -> f64 {
        Self::per_client(&self.process_noise, m)
    }

    pub fn obs_noise_of(&self, m: usize) -> f64 {
        Self::per_client(&self.obs_noise, m)
    }

    pub fn validate(&self) -> Result<(), WorldError> {
        let bad = |s: String| Err(WorldError::Config(s));
        if self.clients == 0 || self.state_dim == 0 || self.obs_dim == 0 {
            return bad("clients, state_dim and obs_dim must be positive".into());
        }
        for (name, v) in [("process_noise", &self.process_noise), ("obs_noise", &self.obs_noise)] {
            if v.is_empty() {
                return bad(format!("{name} needs at least one entry"));
            }
            if v.iter().any(|&q| !(q >= 0.0 && q.is_finite())) {
                return bad(format!("{name} entries must be non-negative"));
            }
        }
        for e in self.edges() {
            if e.from == e.to {
                return bad(format!("self-edge on client {}", e.from));
            }
            if e.from >= self.clients || e.to >= self.clients {
                return bad(format!("edge {}→{} out of range", e.from, e.to));
            }
        }
        if !(self.spectral_radius >= 0.0 && self.coupling_strength >= 0.0) {
            return bad("spectral_radius and coupling_strength must be non-negative".into());
        }
        let a = &self.anomalies;
        if a.mode == AnomalyMode::Poisson && !(a.rate >= 0.0 && a.rate.is_finite()) {
            return bad("anomaly rate must be non-negative".into());
        }
        if a.events.iter().any(|e| e.client >= self.clients) {
            return bad("anomaly event names a client out of range".into());
        }
        Ok(())
    }
}

/// Client `m`'s local model: `f(x) = A·tanh(x)`, `h(x) = C·x + b`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LocalMap {
    pub a: Mat,
    pub c: Mat,
    pub bias: Vec<f64>,
}

fn tanh_vec(x: &[f64]) -> Vec<f64> {
    x.iter().map(|v| v.tanh()).collect()
}

/// `M·diag(1 − tanh²(x))`.
fn tanh_chain(m: &Mat, x: &[f64]) -> Mat {
    let mut out = m.clone();
    for c in 0..m.cols() {
        let d = 1.0 - x[c].tanh().powi(2);
        for r in 0..m.rows() {
            out[(r, c)] *= d;
        }
    }
    out
}

impl StateSpaceModel for LocalMap {
    fn state_dim(&self) -> usize {
        self.a.rows()
    }

    fn obs_dim(&self) -> usize {
        self.c.rows()
    }

    fn transition(&self, x: &[f64]) -> Vec<f64> {
        self.a.matvec(&tanh_vec(x)).expect("state dimension")
    }

    fn observe(&self, x: &[f64]) -> Vec<f64> {
        vadd(&self.c.matvec(x).expect("state dimension"), &self.bias)
    }

    fn transition_jacobian(&self, x: &[f64]) -> Option<Mat> {
        Some(tanh_chain(&self.a, x))
    }

    fn observation_jacobian(&self, _x: &[f64]) -> Option<Mat> {
        Some(self.c.clone())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Coupling {
    pub from: usize,
    pub to: usize,
    pub b: Mat,
}

/// The joint transition over the stacked state of all clients.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GlobalModel {
    pub locals: Vec<LocalMap>,
    pub couplings: Vec<Coupling>,
    pub states: DimTable,
    pub observations: DimTable,
}

impl GlobalModel {
    /// The same model with every cross-client term removed.
    pub fn decoupled(&self) -> Self {
        Self {
            couplings: Vec::new(),
            ..self.clone()
        }
    }
}

impl StateSpaceModel for GlobalModel {
    fn state_dim(&self) -> usize {
        self.states.total()
    }

    fn obs_dim(&self) -> usize {
        self.observations.total()
    }

    fn transition(&self, x: &[f64]) -> Vec<f64> {
        let mut out = Vec::with_capacity(x.len());
        for (m, local) in self.locals.iter().enumerate() {
            out.extend(local.transition(self.states.extract(x, m)));
        }
        for c in &self.couplings {
            let add = c.b.matvec(&tanh_vec(self.states.extract(x, c.from))).expect("dims");
            for (o, v) in out[self.states.range(c.to)].iter_mut().zip(add) {
                *o += v;
            }
        }
        out
    }

    fn observe(&self, x: &[f64]) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.obs_dim());
        for (m, local) in self.locals.iter().enumerate() {
            out.extend(local.observe(self.states.extract(x, m)));
        }
        out
    }

    fn transition_jacobian(&self, x: &[f64]) -> Option<Mat> {
        let n = self.state_dim();
        let mut j = Mat::zeros(n, n);
        for (m, local) in self.locals.iter().enumerate() {
            let o = self.states.offset(m);
            j.set_block(o, o, &tanh_chain(&local.a, self.states.extract(x, m)));
        }
        for c in &self.couplings {
            let blk = tanh_chain(&c.b, self.states.extract(x, c.from));
            let (r0, c0) = (self.states.offset(c.to), self.states.offset(c.from));
            for r in 0..blk.rows() {
                for cc in 0..blk.cols() {
                    j[(r0 + r, c0 + cc)] += blk[(r, cc)];
                }
            }
        }
        Some(j)
    }

    fn observation_jacobian(&self, _x: &[f64]) -> Option<Mat> {
        let mut h = Mat::zeros(self.obs_dim(), self.state_dim());
        for (m, local) in self.locals.iter().enumerate() {
            h.set_block(self.observations.offset(m), self.states.offset(m), &local.c);
        }
        Some(h)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Episode {
    pub onset: usize,
    pub duration: usize,
    pub root: usize,
    /// Additive drive applied to the root's state every active step.
    pub shift: Vec<f64>,
}

impl Episode {
    pub fn end(&self) -> usize {
        self.onset + self.duration
    }

    pub fn contains(&self, t: usize) -> bool {
        (self.onset..self.end()).contains(&t)
    }
}

/// Observations, hidden states, and anomaly labels for one split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub states: DimTable,
    pub observations: DimTable,
    /// `obs[m][t]`.
    pub obs: Vec<Vec<Vec<f64>>>,
    /// `x[m][t]`; empty for ingested data without ground truth.
    pub x: Vec<Vec<Vec<f64>>>,
    pub episodes: Vec<Episode>,
}

impl Dataset {
    pub fn steps(&self) -> usize {
        self.obs.first().map_or(0, Vec::len)
    }

    pub fn clients(&self) -> usize {
        self.obs.len()
    }

    pub fn observations_at(&self, t: usize) -> Vec<&[f64]> {
        self.obs.iter().map(|o| o[t].as_slice()).collect()
    }

    /// Index of the episode active at `t`, if any.
    pub fn active_episode(&self, t: usize) -> Option<usize> {
        self.episodes.iter().position(|e| e.contains(t))
    }
}

/// A materialized world: fixed random maps plus nominal state statistics.
#[derive(Debug, Clone)]
pub struct World {
    pub config: WorldConfig,
    pub model: Arc<GlobalModel>,
    /// Per-client, per-coordinate std of the nominal state.
    pub state_std: Vec<Vec<f64>>,
}

fn gaussian_mat<R: Rng>(rng: &mut R, rows: usize, cols: usize) -> Mat {
    let data = (0..rows * cols).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
    Mat::from_vec(rows, cols, data).expect("sized")
}

impl World {
    pub fn build(config: &WorldConfig) -> Result<Self, WorldError> {
        config.validate()?;
        let (p, d) = (config.state_dim, config.obs_dim);
        let mut rng = substream(config.seed, "world/maps", 0);
        let mut locals = Vec::with_capacity(config.clients);
        for _ in 0..config.clients {
            let raw = gaussian_mat(&mut rng, p, p);
            let rho = spectral_radius(&raw);
            let a = if rho > 0.0 { raw.scale(config.spectral_radius / rho) } else { raw };
            let c = gaussian_mat(&mut rng, d, p);
            let bias = (0..d)
                .map(|_| config.obs_bias * rng.sample::<f64, _>(StandardNormal))
                .collect();
            locals.push(LocalMap { a, c, bias });
        }
        let mut couplings = Vec::new();
        for e in config.edges() {
            let raw = gaussian_mat(&mut rng, p, p);
            let n = raw.norm_2();
            let b = if n > 0.0 { raw.scale(config.coupling_strength / n) } else { raw };
            couplings.push(Coupling { from: e.from, to: e.to, b });
        }
        let model = GlobalModel {
            locals,
            couplings,
            states: DimTable::homogeneous(config.clients, p),
            observations: DimTable::homogeneous(config.clients, d),
        };
        let mut world = Self {
            config: config.clone(),
            model: Arc::new(model),
            state_std: vec![vec![1.0; p]; config.clients],
        };
        let pilot = world.simulate(config.steps.max(2000), &[], "world/pilot")?;
        world.state_std = pilot
            .x
            .iter()
            .map(|traj| {
                (0..p)
                    .map(|i| {
                        let n = traj.len() as f64;
                        let mean = traj.iter().map(|x| x[i]).sum::<f64>() / n;
                        (traj.iter().map(|x| (x[i] - mean).powi(2)).sum::<f64>() / n).sqrt()
                    })
                    .collect()
            })
            .collect();
        Ok(world)
    }

    pub fn states(&self) -> &DimTable {
        &self.model.states
    }

    pub fn local(&self, m: usize) -> &LocalMap {
        &self.model.locals[m]
    }

    /// Draws an anomaly schedule for a split of `steps` length.
    pub fn schedule(&self, steps: usize, split: &str) -> Vec<Episode> {
        let a = &self.config.anomalies;
        let mut rng = substream(self.config.seed, &format!("{split}/anomalies"), 0);
        let mut events: Vec<(usize, usize, f64)> = match a.mode {
            AnomalyMode::None => Vec::new(),
            AnomalyMode::Explicit => a
                .events
                .iter()
                .map(|e| (e.onset, e.client, e.kappa.unwrap_or(a.kappa)))
                .collect(),
            AnomalyMode::Poisson => {
                let mut out = Vec::new();
                if a.rate > 0.0 {
                    let exp = Exp::new(a.rate).expect("positive rate");
                    for m in 0..self.config.clients {
                        let mut t = a.warmup as f64;
                        loop {
                            t += exp.sample(&mut rng);
                            if t >= steps as f64 {
                                break;
                            }
                            out.push((t as usize, m, a.kappa));
                        }
                    }
                }
                out
            }
        };
        events.sort_by_key(|&(onset, client, _)| (onset, client));
        let mut episodes: Vec<Episode> = Vec::new();
        for (onset, root, kappa) in events {
            if onset + a.duration > steps {
                continue;
            }
            if a.mode == AnomalyMode::Poisson && onset < a.warmup {
                continue;
            }
            // One root at a time: drop arrivals that overlap an accepted episode.
            if episodes.last().is_some_and(|prev| onset < prev.end() + a.gap) {
                continue;
            }
            let shift = self.state_std[root]
                .iter()
                .map(|s| {
                    let sign = if rng.random::<bool>() { 1.0 } else { -1.0 };
                    sign * kappa * s
                })
                .collect();
            episodes.push(Episode {
                onset,
                duration: a.duration,
                root,
                shift,
            });
        }
        episodes
    }

    /// Simulates `steps` steps from the zero state with noise drawn from the
    /// `split` substream.
    pub fn simulate(&self, steps: usize, episodes: &[Episode], split: &str) -> Result<Dataset, WorldError> {
        let model = &self.model;
        let m_count = self.config.clients;
        let mut rng = substream(self.config.seed, &format!("{split}/noise"), 0);
        let q_std: Vec<f64> = (0..m_count).map(|m| self.config.process_noise_of(m).sqrt()).collect();
        let r_std: Vec<f64> = (0..m_count).map(|m| self.config.obs_noise_of(m).sqrt()).collect();
        let mut x = vec![0.0; model.states.total()];
        let mut obs = vec![Vec::with_capacity(steps); m_count];
        let mut xs = vec![Vec::with_capacity(steps); m_count];
        for t in 0..steps {
            let mut next = model.transition(&x);
            for m in 0..m_count {
                for i in model.states.range(m) {
                    next[i] += q_std[m] * rng.sample::<f64, _>(StandardNormal);
                }
            }
            for ep in episodes.iter().filter(|e| e.contains(t)) {
                for (i, s) in model.states.range(ep.root).zip(&ep.shift) {
                    next[i] += s;
                }
            }
            let norm = norm_inf(&next);
            if !(norm <= DIVERGENCE_LIMIT) {
                return Err(WorldError::Divergent { step: t, norm });
            }
            x = next;
            for m in 0..m_count {
                let xm = model.states.extract(&x, m);
                let mut y = model.locals[m].observe(xm);
                for v in &mut y {
                    *v += r_std[m] * rng.sample::<f64, _>(StandardNormal);
                }
                obs[m].push(y);
                xs[m].push(xm.to_vec());
            }
        }
        Ok(Dataset {
            states: model.states.clone(),
            observations: model.observations.clone(),
            obs,
            x: xs,
            episodes: episodes.to_vec(),
        })
    }

    /// A split with its own anomaly schedule and noise stream.
    pub fn generate_split(&self, steps: usize, split: &str, with_anomalies: bool) -> Result<Dataset, WorldError> {
        let episodes = if with_anomalies { self.schedule(steps, split) } else { Vec::new() };
        self.simulate(steps, &episodes, split)
    }

    /// Diagonals of the generator's stacked process and observation noise
    /// covariances.
    pub fn noise_variances(&self) -> (Vec<f64>, Vec<f64>) {
        let c = &self.config;
        let q = (0..c.clients)
            .flat_map(|m| std::iter::repeat_n(c.process_noise_of(m), self.model.states.dim(m)))
            .collect();
        let r = (0..c.clients)
            .flat_map(|m| std::iter::repeat_n(c.obs_noise_of(m), self.model.observations.dim(m)))
            .collect();
        (q, r)
    }

    /// SHA-256 over the map parameters, for manifests.
    pub fn checksum(&self) -> String {
        let mut h = Sha256::new();
        let bytes = serde_json::to_vec(self.model.as_ref()).expect("serializable");
        h.update(&bytes);
        hex::encode(h.finalize())
    }
}

/// Generates `cfg.steps` steps with the configured anomaly schedule.
pub fn generate(cfg: &WorldConfig) -> Result<Dataset, WorldError> {
    World::build(cfg)?.generate_split(cfg.steps, "data", true)
}

/// `Extract_m` for vectors, per the ordered dimension table.
pub fn extract_m<'a>(v: &'a [f64], dims: &DimTable, m: usize) -> Result<&'a [f64], WorldError> {
    if m >= dims.clients() {
        return Err(WorldError::ClientIndex {
            index: m,
            clients: dims.clients(),
        });
    }
    Ok(dims.extract(v, m))
}

/// `Extract_m` for square matrices indexed by the dimension table.
pub fn extract_m_block(a: &Mat, dims: &DimTable, m: usize) -> Result<Mat, WorldError> {
    if m >= dims.clients() {
        return Err(WorldError::ClientIndex {
            index: m,
            clients: dims.clients(),
        });
    }
    Ok(dims.extract_block(a, m))
}
