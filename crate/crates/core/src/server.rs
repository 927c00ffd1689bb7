//! Global transition model `f_s` over the concatenated proprietary estimates.

use serde::{Deserialize, Serialize};

use crate::client::ClientOutbox;
use crate::dims::DimTable;
use crate::error::{Error, NetError, ProtocolError};
use crate::linalg::{norm_sq, vscale, vsub};
use crate::neural::{Activation, LayerSpec, Net, NetSpec};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ServerConfig {
    pub hidden: usize,
    pub activation: Activation,
    pub eta: f64,
    /// Divide `L_s` (and the returned gradients) by the client count.
    pub mean_loss: bool,
}

impl Default for ServerConfig {
    fn default() -> Self {
        Self {
            hidden: 32,
            activation: Activation::Tanh,
            eta: 1e-2,
            mean_loss: false,
        }
    }
}

impl ServerConfig {
    pub fn spec(&self, total: usize) -> NetSpec {
        let mut layers = Vec::new();
        if self.hidden > 0 {
            layers.push(LayerSpec {
                width: self.hidden,
                activation: self.activation,
            });
        }
        layers.push(LayerSpec {
            width: total,
            activation: Activation::Identity,
        });
        NetSpec { input: total, layers }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ServerModel {
    pub net: Net,
    pub eta: f64,
    pub dims: DimTable,
    pub mean_loss: bool,
}

/// Everything the server computes in one round.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundBatch {
    pub round: usize,
    pub outboxes: Vec<ClientOutbox>,
    /// `x_s^t` per client.
    pub predictions: Vec<Vec<f64>>,
    pub loss: f64,
    /// `∂L_s/∂x_a^t` per client.
    pub gradients: Vec<Vec<f64>>,
}

impl RoundBatch {
    /// Collects one outbox per client; `None` entries are reported as missing.
    pub fn collect(round: usize, outboxes: Vec<Option<ClientOutbox>>) -> Result<Self, ProtocolError> {
        let outboxes = outboxes
            .into_iter()
            .enumerate()
            .map(|(client, o)| o.ok_or(ProtocolError::MissingClient { round, client }))
            .collect::<Result<Vec<_>, _>>()?;
        Ok(Self {
            round,
            outboxes,
            predictions: Vec::new(),
            loss: 0.0,
            gradients: Vec::new(),
        })
    }
}

impl ServerModel {
    pub fn new(net: Net, eta: f64, dims: DimTable, mean_loss: bool) -> Result<Self, Error> {
        let n = dims.total();
        if net.input_dim() != n || net.output_dim() != n {
            return Err(Error::Config(format!(
                "server network maps {}→{} but clients stack to {n}",
                net.input_dim(),
                net.output_dim()
            )));
        }
        Ok(Self {
            net,
            eta,
            dims,
            mean_loss,
        })
    }

    pub fn from_config(cfg: &ServerConfig, dims: DimTable, seed: u64) -> Result<Self, Error> {
        let net = Net::init(&cfg.spec(dims.total()), seed)?;
        Self::new(net, cfg.eta, dims, cfg.mean_loss)
    }

    fn check(&self, batch: &RoundBatch) -> Result<(), Error> {
        if batch.outboxes.len() != self.dims.clients() {
            return Err(ProtocolError::MissingClient {
                round: batch.round,
                client: batch.outboxes.len(),
            }
            .into());
        }
        for (m, o) in batch.outboxes.iter().enumerate() {
            let p = self.dims.dim(m);
            for v in [&o.prev_proprietary_estimate, &o.augmented_prediction] {
                if v.len() != p {
                    return Err(NetError::Dimension {
                        layer: 0,
                        expected: p,
                        found: v.len(),
                    }
                    .into());
                }
            }
        }
        Ok(())
    }

    fn input(&self, batch: &RoundBatch) -> Vec<f64> {
        let parts: Vec<&[f64]> = batch
            .outboxes
            .iter()
            .map(|o| o.prev_proprietary_estimate.as_slice())
            .collect();
        self.dims.concat(&parts)
    }

    /// `x_s = f_s(concat(x̂_c^{t−1}))`, split back per client.
    pub fn server_predict(&self, batch: &mut RoundBatch) -> Result<(), Error> {
        self.check(batch)?;
        let (out, _) = self.net.forward(&self.input(batch))?;
        batch.predictions = self.dims.split(&out);
        Ok(())
    }

    fn scale(&self) -> f64 {
        if self.mean_loss {
            1.0 / self.dims.clients() as f64
        } else {
            1.0
        }
    }

    /// `L_s = Σ_m ‖x_s − x_a‖²` (divided by M in mean mode).
    pub fn server_loss(&self, batch: &mut RoundBatch) -> f64 {
        batch.loss = server_loss(&batch.predictions, &augmented(batch)) * self.scale();
        batch.loss
    }

    /// `g_m = 2(x_a − x_s)` (divided by M in mean mode).
    pub fn client_gradients(&self, batch: &mut RoundBatch) -> Vec<Vec<f64>> {
        batch.gradients = client_gradients(&batch.predictions, &augmented(batch))
            .into_iter()
            .map(|g| vscale(&g, self.scale()))
            .collect();
        batch.gradients.clone()
    }

    /// Backpropagates `2(x_s − x_a)` through `f_s` and takes one SGD step.
    pub fn server_param_update(&mut self, batch: &RoundBatch) -> Result<(), Error> {
        self.check(batch)?;
        let (out, trace) = self.net.forward(&self.input(batch))?;
        let target = self.dims.concat(&augmented(batch));
        let upstream = vscale(&vsub(&out, &target), 2.0 * self.scale());
        let (grads, _) = self.net.backward(&trace, &upstream)?;
        self.net.sgd_step(&grads, self.eta)?;
        Ok(())
    }

    /// Predict, score, update θ_s, and compute the client gradients.
    pub fn round(&mut self, batch: &mut RoundBatch) -> Result<(), Error> {
        self.server_predict(batch)?;
        self.server_loss(batch);
        self.client_gradients(batch);
        self.server_param_update(batch)
    }
}

fn augmented(batch: &RoundBatch) -> Vec<&[f64]> {
    batch
        .outboxes
        .iter()
        .map(|o| o.augmented_prediction.as_slice())
        .collect()
}

pub fn server_loss<A: AsRef<[f64]>, B: AsRef<[f64]>>(predictions: &[A], augmented: &[B]) -> f64 {
    predictions
        .iter()
        .zip(augmented)
        .map(|(s, a)| norm_sq(&vsub(s.as_ref(), a.as_ref())))
        .sum()
}

pub fn client_gradients<A: AsRef<[f64]>, B: AsRef<[f64]>>(predictions: &[A], augmented: &[B]) -> Vec<Vec<f64>> {
    predictions
        .iter()
        .zip(augmented)
        .map(|(s, a)| vscale(&vsub(a.as_ref(), s.as_ref()), 2.0))
        .collect()
}
