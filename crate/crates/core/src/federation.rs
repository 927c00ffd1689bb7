//! Round orchestration over an in-process message bus.
//!
//! Each round: every client steps its filters and posts an outbox; the
//! server waits for all of them, trains, and posts one gradient per client;
//! clients then apply their updates. Client work runs in parallel between
//! the two barriers.

use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::client::{ClientModel, ClientOutbox, ClientSnapshot, ClientStatePair};
use crate::error::{Error, ProtocolError};
use crate::neural::{Checkpoint, Net};
use crate::privacy::Privatizer;
use crate::server::{RoundBatch, ServerModel};

/// Bytes per transmitted real.
pub const REAL_BYTES: usize = 8;

/// Per-round mailboxes plus byte counters.
#[derive(Debug, Clone)]
pub struct Bus {
    round: usize,
    up: Vec<Option<ClientOutbox>>,
    down: Vec<Option<Vec<f64>>>,
    barrier: bool,
    bytes_up: usize,
    bytes_down: usize,
    pub total_bytes: usize,
}

impl Bus {
    pub fn new(clients: usize) -> Self {
        Self {
            round: 0,
            up: vec![None; clients],
            down: vec![None; clients],
            barrier: false,
            bytes_up: 0,
            bytes_down: 0,
            total_bytes: 0,
        }
    }

    pub fn begin_round(&mut self, round: usize) {
        self.round = round;
        self.up.iter_mut().for_each(|m| *m = None);
        self.down.iter_mut().for_each(|m| *m = None);
        self.barrier = false;
        self.bytes_up = 0;
        self.bytes_down = 0;
    }

    pub fn send_up(&mut self, client: usize, outbox: ClientOutbox) -> Result<(), ProtocolError> {
        let slot = &mut self.up[client];
        if slot.is_some() {
            return Err(ProtocolError::DuplicateMessage {
                round: self.round,
                client,
            });
        }
        self.bytes_up += outbox.reals() * REAL_BYTES;
        *slot = Some(outbox);
        Ok(())
    }

    /// Drains the upstream mailboxes; fails naming the first silent client.
    pub fn collect(&mut self) -> Result<RoundBatch, ProtocolError> {
        let boxes = self.up.iter_mut().map(Option::take).collect();
        RoundBatch::collect(self.round, boxes)
    }

    /// Marks the server step done; downstream messages may flow after this.
    pub fn pass_barrier(&mut self) {
        self.barrier = true;
    }

    pub fn send_down(&mut self, client: usize, grad: Vec<f64>) -> Result<(), ProtocolError> {
        if !self.barrier {
            return Err(ProtocolError::BeforeBarrier {
                round: self.round,
                client,
            });
        }
        let slot = &mut self.down[client];
        if slot.is_some() {
            return Err(ProtocolError::DuplicateMessage {
                round: self.round,
                client,
            });
        }
        self.bytes_down += grad.len() * REAL_BYTES;
        *slot = Some(grad);
        Ok(())
    }

    pub fn receive_down(&mut self, client: usize) -> Result<Option<Vec<f64>>, ProtocolError> {
        if !self.barrier {
            return Err(ProtocolError::BeforeBarrier {
                round: self.round,
                client,
            });
        }
        Ok(self.down[client].take())
    }

    /// Closes the round and returns `(up, down)` bytes.
    pub fn end_round(&mut self) -> (usize, usize) {
        self.total_bytes += self.bytes_up + self.bytes_down;
        (self.bytes_up, self.bytes_down)
    }
}

/// Which parts of the protocol run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainOptions {
    pub update_server: bool,
    /// Whether the server returns gradients to clients.
    pub feedback: bool,
    pub update_clients: bool,
    /// Keep per-step states for later analysis.
    pub record: bool,
}

impl Default for TrainOptions {
    fn default() -> Self {
        Self {
            update_server: true,
            feedback: true,
            update_clients: true,
            record: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundMetrics {
    pub round: usize,
    pub server_loss: f64,
    pub local_losses: Vec<f64>,
    pub bytes_up: usize,
    pub bytes_down: usize,
}

impl RoundMetrics {
    pub fn bytes(&self) -> usize {
        self.bytes_up + self.bytes_down
    }
}

/// States of every client plus the server's prediction for one round.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundTrace {
    pub clients: Vec<ClientStatePair>,
    pub server: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct TrainReport {
    pub rounds: Vec<RoundMetrics>,
    /// Seconds per round; kept out of the metric files.
    #[serde(skip)]
    pub wall_seconds: Vec<f64>,
    #[serde(skip)]
    pub trace: Vec<RoundTrace>,
}

impl TrainReport {
    pub fn server_losses(&self) -> Vec<f64> {
        self.rounds.iter().map(|r| r.server_loss).collect()
    }

    pub fn local_losses(&self, m: usize) -> Vec<f64> {
        self.rounds.iter().map(|r| r.local_losses[m]).collect()
    }

    pub fn append(&mut self, other: TrainReport) {
        self.rounds.extend(other.rounds);
        self.wall_seconds.extend(other.wall_seconds);
        self.trace.extend(other.trace);
    }
}

/// Resumable federation state.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FederationCheckpoint {
    pub round: usize,
    pub clients: Vec<ClientSnapshot>,
    pub server: Checkpoint,
}

pub struct Federation {
    pub clients: Vec<ClientModel>,
    pub server: ServerModel,
    pub bus: Bus,
    pub privacy: Privatizer,
    pub options: TrainOptions,
    round: usize,
}

impl Federation {
    pub fn new(clients: Vec<ClientModel>, server: ServerModel, privacy: Privatizer, options: TrainOptions) -> Result<Self, Error> {
        if clients.len() != server.dims.clients() {
            return Err(Error::Config(format!(
                "{} clients but the server expects {}",
                clients.len(),
                server.dims.clients()
            )));
        }
        for (m, c) in clients.iter().enumerate() {
            if c.state_dim() != server.dims.dim(m) {
                return Err(Error::Config(format!("client {m} state dimension differs from the server table")));
            }
        }
        let bus = Bus::new(clients.len());
        Ok(Self {
            clients,
            server,
            bus,
            privacy,
            options,
            round: 0,
        })
    }

    pub fn round(&self) -> usize {
        self.round
    }

    /// Rewinds every filter for another pass over the data, keeping all
    /// parameters.
    pub fn reset(&mut self) {
        self.clients.iter_mut().for_each(ClientModel::reset);
    }

    /// One protocol round on the observations `ys[m]`.
    pub fn train_round(&mut self, ys: &[&[f64]]) -> Result<(RoundMetrics, Option<RoundTrace>), Error> {
        let round = self.round;
        if ys.len() != self.clients.len() {
            return Err(ProtocolError::MissingObservation {
                round,
                client: ys.len(),
            }
            .into());
        }
        self.bus.begin_round(round);

        // Client side, up to the outbox.
        let steps: Vec<Result<(f64, ClientOutbox), Error>> = self
            .clients
            .par_iter_mut()
            .zip(ys.par_iter())
            .map(|(c, y)| {
                c.proprietary_step(y)?;
                c.augmented_predict()?;
                c.augment_state()?;
                let loss = c.local_loss()?;
                Ok((loss, c.make_outbox()?))
            })
            .collect();
        let mut local_losses = Vec::with_capacity(steps.len());
        for (m, s) in steps.into_iter().enumerate() {
            let (loss, mut outbox) = s?;
            outbox.prev_proprietary_estimate = self.privacy.state_c(m, &outbox.prev_proprietary_estimate);
            outbox.augmented_prediction = self.privacy.state_a(m, &outbox.augmented_prediction);
            local_losses.push(loss);
            self.bus.send_up(m, outbox)?;
        }

        // Server barrier.
        let mut batch = self.bus.collect()?;
        if self.options.update_server {
            self.server.round(&mut batch)?;
        } else {
            self.server.server_predict(&mut batch)?;
            self.server.server_loss(&mut batch);
            self.server.client_gradients(&mut batch);
        }
        self.bus.pass_barrier();
        if self.options.feedback {
            for (m, g) in batch.gradients.iter().enumerate() {
                let noisy = self.privacy.gradient(m, g);
                self.bus.send_down(m, noisy)?;
            }
        }

        // Client updates.
        let grads: Vec<Vec<f64>> = (0..self.clients.len())
            .map(|m| {
                let dim = self.clients[m].state_dim();
                self.bus.receive_down(m).map(|g| g.unwrap_or_else(|| vec![0.0; dim]))
            })
            .collect::<Result<_, _>>()?;
        let update = self.options.update_clients;
        self.clients
            .par_iter_mut()
            .zip(grads.par_iter())
            .map(|(c, g)| {
                if update {
                    c.client_param_update(g).map(|_| ())
                } else {
                    c.finish_step().map_err(Error::from)
                }
            })
            .collect::<Result<Vec<()>, Error>>()?;

        let (bytes_up, bytes_down) = self.bus.end_round();
        let trace = self.options.record.then(|| RoundTrace {
            // Post-update states equal pre-update ones: updates only touch θ.
            clients: self.clients.iter().map(|c| c.state().clone()).collect(),
            server: batch.predictions.clone(),
        });
        self.round += 1;
        Ok((
            RoundMetrics {
                round,
                server_loss: batch.loss,
                local_losses,
                bytes_up,
                bytes_down,
            },
            trace,
        ))
    }

    /// Runs one round per step of `obs[m][t]` for `t` in `range`.
    pub fn train(&mut self, obs: &[Vec<Vec<f64>>], range: std::ops::Range<usize>) -> Result<TrainReport, Error> {
        let mut report = TrainReport::default();
        for t in range {
            let ys: Vec<&[f64]> = obs.iter().map(|o| o[t].as_slice()).collect();
            let start = Instant::now();
            let (metrics, trace) = self.train_round(&ys)?;
            report.wall_seconds.push(start.elapsed().as_secs_f64());
            report.rounds.push(metrics);
            report.trace.extend(trace);
        }
        Ok(report)
    }

    pub fn checkpoint(&self) -> Result<FederationCheckpoint, Error> {
        Ok(FederationCheckpoint {
            round: self.round,
            clients: self
                .clients
                .iter()
                .map(ClientModel::snapshot)
                .collect::<Result<_, _>>()?,
            server: Checkpoint::from(&self.server.net),
        })
    }

    pub fn restore(&mut self, ck: FederationCheckpoint) -> Result<(), Error> {
        if ck.clients.len() != self.clients.len() {
            return Err(Error::Config("checkpoint client count differs".into()));
        }
        let net: Net = ck.server.into_net().map_err(Error::Config)?;
        if net.input_dim() != self.server.dims.total() || net.output_dim() != self.server.dims.total() {
            return Err(Error::Config("checkpoint server dimensions differ".into()));
        }
        self.server.net = net;
        for (c, s) in self.clients.iter_mut().zip(ck.clients) {
            c.restore(s)?;
        }
        self.round = ck.round;
        Ok(())
    }
}

/// Closed-form bytes per round for homogeneous clients: `M·3·P·8`.
pub fn bytes_per_round(clients: usize, state_dim: usize) -> usize {
    clients * 3 * state_dim * REAL_BYTES
}

#[cfg(test)]
mod tests {
    use super::*;

    fn outbox() -> ClientOutbox {
        ClientOutbox {
            prev_proprietary_estimate: vec![0.0; 2],
            augmented_prediction: vec![0.0; 2],
        }
    }

    #[test]
    fn bus_rejects_duplicates_and_early_reads() {
        let mut bus = Bus::new(2);
        bus.begin_round(4);
        bus.send_up(0, outbox()).unwrap();
        assert_eq!(
            bus.send_up(0, outbox()),
            Err(ProtocolError::DuplicateMessage { round: 4, client: 0 })
        );
        assert_eq!(bus.collect().unwrap_err(), ProtocolError::MissingClient { round: 4, client: 1 });
        assert_eq!(bus.receive_down(1), Err(ProtocolError::BeforeBarrier { round: 4, client: 1 }));
        assert_eq!(bus.send_down(1, vec![0.0]), Err(ProtocolError::BeforeBarrier { round: 4, client: 1 }));
    }

    #[test]
    fn bus_counts_bytes() {
        let mut bus = Bus::new(2);
        bus.begin_round(0);
        bus.send_up(0, outbox()).unwrap();
        bus.send_up(1, outbox()).unwrap();
        bus.collect().unwrap();
        bus.pass_barrier();
        bus.send_down(0, vec![0.0; 2]).unwrap();
        bus.send_down(1, vec![0.0; 2]).unwrap();
        assert_eq!(bus.end_round(), (64, 32));
        assert_eq!(bytes_per_round(2, 2), 96);
    }
}
