//! One federated participant: a proprietary EKF over its own observations and
//! an augmented chain `x̂_a = x̂_c + φ(y; θ)`, `x_a = f(x̂_a)`.
//!
//! A step runs in a fixed order and the client tracks where it is:
//! [`ClientModel::proprietary_step`], [`ClientModel::augmented_predict`],
//! [`ClientModel::augment_state`], [`ClientModel::local_loss`], then either
//! [`ClientModel::client_param_update`] or [`ClientModel::finish_step`].
//! [`ClientModel::observe`] does the whole sequence for inference.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::ekf::{observation_jacobian, transition_jacobian, FilterState, JacobianMode, StateSpaceModel};
use crate::error::{EkfError, Error, NetError, ProtocolError};
use crate::linalg::{norm_sq, vadd, vscale, vsub, Mat};
use crate::neural::{Activation, Checkpoint, ForwardTrace, Gradients, LayerSpec, Net, NetSpec};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ClientConfig {
    /// Hidden width of φ; zero gives a single affine layer.
    pub hidden: usize,
    pub activation: Activation,
    /// Step size on the local reconstruction loss.
    pub eta_local: f64,
    /// Step size on the server-loss gradient.
    pub eta_server: f64,
    pub p0: f64,
    pub q: f64,
    pub r: f64,
    /// Initial state; zero when absent.
    pub x0: Option<Vec<f64>>,
    pub jacobian: JacobianMode,
    /// Zero φ's output layer so augmentation starts at the proprietary model.
    pub zero_output: bool,
}

impl Default for ClientConfig {
    fn default() -> Self {
        Self {
            hidden: 16,
            activation: Activation::Tanh,
            eta_local: 1e-3,
            eta_server: 1e-3,
            p0: 1.0,
            q: 1e-3,
            r: 0.05,
            x0: None,
            jacobian: JacobianMode::Auto,
            zero_output: true,
        }
    }
}

impl ClientConfig {
    pub fn phi_spec(&self, obs_dim: usize, state_dim: usize) -> NetSpec {
        let mut layers = Vec::new();
        if self.hidden > 0 {
            layers.push(LayerSpec {
                width: self.hidden,
                activation: self.activation,
            });
        }
        layers.push(LayerSpec {
            width: state_dim,
            activation: Activation::Identity,
        });
        NetSpec { input: obs_dim, layers }
    }
}

/// The four state vectors of one step plus both residual channels.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct ClientStatePair {
    pub x_hat_c: Vec<f64>,
    pub x_c: Vec<f64>,
    pub x_hat_a: Vec<f64>,
    pub x_a: Vec<f64>,
    pub residual_c: Vec<f64>,
    pub residual_a: Vec<f64>,
}

/// What a client sends upstream each round.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClientOutbox {
    /// `x̂_c^{t−1}`.
    pub prev_proprietary_estimate: Vec<f64>,
    /// `x_a^t`.
    pub augmented_prediction: Vec<f64>,
}

impl ClientOutbox {
    pub fn reals(&self) -> usize {
        self.prev_proprietary_estimate.len() + self.augmented_prediction.len()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Phase {
    Idle,
    Proprietary,
    Predicted,
    Augmented,
    Scored,
}

impl Phase {
    fn name(self) -> &'static str {
        match self {
            Phase::Idle => "idle",
            Phase::Proprietary => "proprietary",
            Phase::Predicted => "predicted",
            Phase::Augmented => "augmented",
            Phase::Scored => "scored",
        }
    }
}

/// What the parameter update needs from the current step.
#[derive(Debug, Clone)]
struct StepCache {
    /// φ trace at `y^{t−1}`; absent on the first step.
    phi_trace: Option<ForwardTrace>,
    /// `∂f/∂x` at `x̂_a^{t−1}`.
    f_jac: Mat,
    /// `∂h/∂x` at `x_a^t`.
    h_jac: Option<Mat>,
}

/// Gradients of one update, kept separate per channel.
#[derive(Debug, Clone)]
pub struct ClientGradients {
    pub local: Gradients,
    pub server: Gradients,
}

/// Resumable client state between steps.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClientSnapshot {
    pub id: usize,
    pub t: usize,
    pub filter: FilterState,
    pub phi: Checkpoint,
    pub prev_est_c: Vec<f64>,
    pub prev_y: Option<Vec<f64>>,
    /// Last augmented estimate; seeds the outbox without a proprietary chain.
    pub x_hat_a: Vec<f64>,
}

#[derive(Clone)]
pub struct ClientModel {
    pub id: usize,
    model: Arc<dyn StateSpaceModel>,
    pub filter: FilterState,
    pub phi: Net,
    pub eta_local: f64,
    pub eta_server: f64,
    pub mode: JacobianMode,
    /// When false the proprietary chain is skipped and `x̂_a = φ(y)`.
    pub proprietary: bool,
    x0: Vec<f64>,
    p0: f64,
    t: usize,
    phase: Phase,
    prev_est_c: Vec<f64>,
    prev_y: Option<Vec<f64>>,
    y: Vec<f64>,
    state: ClientStatePair,
    cache: Option<StepCache>,
    gain: Option<Mat>,
}

impl std::fmt::Debug for ClientModel {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ClientModel")
            .field("id", &self.id)
            .field("t", &self.t)
            .field("phase", &self.phase)
            .field("state", &self.state)
            .finish_non_exhaustive()
    }
}

impl ClientModel {
    pub fn new(id: usize, model: Arc<dyn StateSpaceModel>, phi: Net, cfg: &ClientConfig) -> Result<Self, Error> {
        let (p, d) = (model.state_dim(), model.obs_dim());
        if phi.input_dim() != d || phi.output_dim() != p {
            return Err(Error::Config(format!(
                "client {id}: φ maps {}→{} but the model needs {d}→{p}",
                phi.input_dim(),
                phi.output_dim()
            )));
        }
        let x0 = cfg.x0.clone().unwrap_or_else(|| vec![0.0; p]);
        if x0.len() != p {
            return Err(EkfError::Dimension {
                what: "initial state",
                expected: p,
                found: x0.len(),
            }
            .into());
        }
        let filter = FilterState::isotropic(x0.clone(), d, cfg.p0, cfg.q, cfg.r);
        Ok(Self {
            id,
            model,
            filter,
            phi,
            eta_local: cfg.eta_local,
            eta_server: cfg.eta_server,
            mode: cfg.jacobian,
            proprietary: true,
            prev_est_c: x0.clone(),
            x0,
            p0: cfg.p0,
            t: 0,
            phase: Phase::Idle,
            prev_y: None,
            y: Vec::new(),
            state: ClientStatePair::default(),
            cache: None,
            gain: None,
        })
    }

    /// Builds φ from the config with a seeded initialization.
    pub fn from_config(id: usize, model: Arc<dyn StateSpaceModel>, cfg: &ClientConfig, seed: u64) -> Result<Self, Error> {
        let spec = cfg.phi_spec(model.obs_dim(), model.state_dim());
        let mut phi = Net::init(&spec, seed)?;
        if cfg.zero_output {
            let last = phi.layers.last_mut().expect("non-empty spec");
            last.weight.data_mut().fill(0.0);
            last.bias.fill(0.0);
        }
        Self::new(id, model, phi, cfg)
    }

    pub fn model(&self) -> &dyn StateSpaceModel {
        self.model.as_ref()
    }

    pub fn state_dim(&self) -> usize {
        self.model.state_dim()
    }

    pub fn obs_dim(&self) -> usize {
        self.model.obs_dim()
    }

    pub fn time(&self) -> usize {
        self.t
    }

    pub fn phase(&self) -> Phase {
        self.phase
    }

    pub fn state(&self) -> &ClientStatePair {
        &self.state
    }

    /// Kalman gain of the most recent proprietary update.
    pub fn last_gain(&self) -> Option<&Mat> {
        self.gain.as_ref()
    }

    /// Captures the state between steps.
    pub fn snapshot(&self) -> Result<ClientSnapshot, ProtocolError> {
        self.expect(Phase::Idle, "snapshot")?;
        Ok(ClientSnapshot {
            id: self.id,
            t: self.t,
            filter: self.filter.clone(),
            phi: Checkpoint::from(&self.phi),
            prev_est_c: self.prev_est_c.clone(),
            prev_y: self.prev_y.clone(),
            x_hat_a: self.state.x_hat_a.clone(),
        })
    }

    pub fn restore(&mut self, snap: ClientSnapshot) -> Result<(), Error> {
        let phi = snap.phi.into_net().map_err(Error::Config)?;
        if phi.input_dim() != self.obs_dim() || phi.output_dim() != self.state_dim() {
            return Err(Error::Config(format!("client {}: snapshot φ has wrong dimensions", self.id)));
        }
        self.phi = phi;
        self.filter = snap.filter;
        self.prev_est_c = snap.prev_est_c;
        self.prev_y = snap.prev_y;
        self.state = ClientStatePair {
            x_hat_a: snap.x_hat_a,
            ..ClientStatePair::default()
        };
        self.t = snap.t;
        self.phase = Phase::Idle;
        self.cache = None;
        Ok(())
    }

    /// Rewinds the filters to the initial state, keeping θ.
    pub fn reset(&mut self) {
        let (n, d) = (self.state_dim(), self.obs_dim());
        self.filter.x = self.x0.clone();
        self.filter.p = Mat::scaled_identity(n, self.p0);
        debug_assert_eq!(self.filter.r.rows(), d);
        self.prev_est_c = self.x0.clone();
        self.prev_y = None;
        self.t = 0;
        self.phase = Phase::Idle;
        self.state = ClientStatePair::default();
        self.cache = None;
    }

    fn expect(&self, want: Phase, op: &'static str) -> Result<(), ProtocolError> {
        if self.phase == want {
            Ok(())
        } else {
            Err(ProtocolError::OutOfOrder {
                client: self.id,
                op,
                state: self.phase.name(),
            })
        }
    }

    /// EKF predict and update on the proprietary chain.
    pub fn proprietary_step(&mut self, y: &[f64]) -> Result<&ClientStatePair, Error> {
        self.expect(Phase::Idle, "proprietary_step")?;
        if y.len() != self.obs_dim() {
            return Err(EkfError::Dimension {
                what: "observation",
                expected: self.obs_dim(),
                found: y.len(),
            }
            .into());
        }
        // Without a proprietary chain the augmented estimate stands in.
        self.prev_est_c = if self.proprietary || self.t == 0 {
            self.filter.x.clone()
        } else {
            self.state.x_hat_a.clone()
        };
        self.y = y.to_vec();
        if self.proprietary {
            let out = self.filter.step(self.model.as_ref(), y, self.mode)?;
            self.state.x_c = out.x_pred;
            self.state.x_hat_c = out.x_est;
            self.state.residual_c = out.residual;
            self.gain = Some(out.gain);
        } else {
            let zero = vec![0.0; self.state_dim()];
            self.state.x_c = zero.clone();
            self.state.x_hat_c = zero;
            self.state.residual_c = vec![0.0; self.obs_dim()];
        }
        self.phase = Phase::Proprietary;
        Ok(&self.state)
    }

    /// `x_a^t = f(x̂_a^{t−1})`, with `x̂_a^{t−1}` recomputed from `x̂_c^{t−1}`
    /// and `y^{t−1}` under the current θ so the gradient is exact.
    pub fn augmented_predict(&mut self) -> Result<&[f64], Error> {
        self.expect(Phase::Proprietary, "augmented_predict")?;
        let (prev_aug, phi_trace) = match &self.prev_y {
            None => (self.x0.clone(), None),
            Some(prev_y) => {
                let (corr, trace) = self.phi.forward(prev_y)?;
                let base = if self.proprietary { vadd(&self.prev_est_c, &corr) } else { corr };
                (base, Some(trace))
            }
        };
        let f_jac = transition_jacobian(self.model.as_ref(), &prev_aug, self.mode)?;
        self.state.x_a = self.model.transition(&prev_aug);
        self.cache = Some(StepCache {
            phi_trace,
            f_jac,
            h_jac: None,
        });
        self.phase = Phase::Predicted;
        Ok(&self.state.x_a)
    }

    /// `x̂_a^t = x̂_c^t + φ(y^t)`.
    pub fn augment_state(&mut self) -> Result<(&[f64], ForwardTrace), Error> {
        self.expect(Phase::Predicted, "augment_state")?;
        let (corr, trace) = self.phi.forward(&self.y)?;
        self.state.x_hat_a = if self.proprietary {
            vadd(&self.state.x_hat_c, &corr)
        } else {
            corr
        };
        self.phase = Phase::Augmented;
        Ok((&self.state.x_hat_a, trace))
    }

    /// `‖y − h(x_a)‖²`; stores the augmented residual.
    pub fn local_loss(&mut self) -> Result<f64, Error> {
        self.expect(Phase::Augmented, "local_loss")?;
        let r_a = vsub(&self.y, &self.model.observe(&self.state.x_a));
        let h = observation_jacobian(self.model.as_ref(), &self.state.x_a, self.mode)?;
        if let Some(c) = self.cache.as_mut() {
            c.h_jac = Some(h);
        }
        let loss = norm_sq(&r_a);
        self.state.residual_a = r_a;
        self.phase = Phase::Scored;
        Ok(loss)
    }

    pub fn make_outbox(&self) -> Result<ClientOutbox, ProtocolError> {
        if !matches!(self.phase, Phase::Augmented | Phase::Scored) {
            return Err(ProtocolError::OutOfOrder {
                client: self.id,
                op: "make_outbox",
                state: self.phase.name(),
            });
        }
        Ok(ClientOutbox {
            prev_proprietary_estimate: self.prev_est_c.clone(),
            augmented_prediction: self.state.x_a.clone(),
        })
    }

    /// Both gradient channels for the current step, before any update.
    ///
    /// The local channel chains `−2·Hᵀ·r_a` and the server channel chains
    /// `server_grad`; both go through `Fᵀ` and the φ trace at `y^{t−1}`.
    pub fn gradients(&self, server_grad: &[f64]) -> Result<ClientGradients, Error> {
        if self.phase != Phase::Scored {
            return Err(ProtocolError::OutOfOrder {
                client: self.id,
                op: "client_param_update",
                state: self.phase.name(),
            }
            .into());
        }
        let p = self.state_dim();
        if server_grad.len() != p {
            return Err(NetError::Dimension {
                layer: 0,
                expected: p,
                found: server_grad.len(),
            }
            .into());
        }
        let cache = self.cache.as_ref().expect("cache set by augmented_predict");
        let Some(trace) = &cache.phi_trace else {
            return Ok(ClientGradients {
                local: Gradients::zeros_like(&self.phi),
                server: Gradients::zeros_like(&self.phi),
            });
        };
        let h = cache.h_jac.as_ref().expect("set by local_loss");
        let g_local = vscale(&h.tr_matvec(&self.state.residual_a)?, -2.0);
        let (local, _) = self.phi.backward(trace, &cache.f_jac.tr_matvec(&g_local)?)?;
        let (server, _) = self.phi.backward(trace, &cache.f_jac.tr_matvec(server_grad)?)?;
        Ok(ClientGradients { local, server })
    }

    /// `θ ← θ − η₁∇(L_m)_a − η₂∇(L_s)`, then closes the step.
    pub fn client_param_update(&mut self, server_grad: &[f64]) -> Result<ClientGradients, Error> {
        let grads = self.gradients(server_grad)?;
        if self.eta_local > 0.0 {
            self.phi.sgd_step(&grads.local, self.eta_local)?;
        }
        if self.eta_server > 0.0 {
            self.phi.sgd_step(&grads.server, self.eta_server)?;
        }
        self.finish_step()?;
        Ok(grads)
    }

    /// Closes the step without touching θ.
    pub fn finish_step(&mut self) -> Result<(), ProtocolError> {
        if self.phase != Phase::Scored {
            return Err(ProtocolError::OutOfOrder {
                client: self.id,
                op: "finish_step",
                state: self.phase.name(),
            });
        }
        self.prev_y = Some(std::mem::take(&mut self.y));
        self.cache = None;
        self.t += 1;
        self.phase = Phase::Idle;
        Ok(())
    }

    /// A full step with frozen θ; returns the local loss.
    pub fn observe(&mut self, y: &[f64]) -> Result<f64, Error> {
        self.proprietary_step(y)?;
        self.augmented_predict()?;
        self.augment_state()?;
        let loss = self.local_loss()?;
        self.finish_step()?;
        Ok(loss)
    }
}
