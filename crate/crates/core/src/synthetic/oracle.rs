//! The centralized oracle: one EKF over the stacked state with the true
//! joint transition and every client's observations.

use serde::{Deserialize, Serialize};

use crate::dims::DimTable;
use crate::ekf::{FilterState, JacobianMode, StateSpaceModel};
use crate::error::EkfError;
use crate::linalg::Mat;

use super::world::Dataset;

/// Per-client views of the oracle trajectory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OracleRun {
    /// `pred[m][t]`: one-step prediction `x_o^t`.
    pub pred: Vec<Vec<Vec<f64>>>,
    /// `est[m][t]`: filtered estimate `x̂_o^t`.
    pub est: Vec<Vec<Vec<f64>>>,
    /// Kalman gain of the last step over the stacked state.
    pub final_gain: Option<Mat>,
}

/// Runs the global filter over `data` with isotropic `q`, `r`, `p0`.
pub fn run_oracle<M: StateSpaceModel + ?Sized>(
    model: &M,
    states: &DimTable,
    data: &Dataset,
    x0: &[f64],
    p0: f64,
    q: f64,
    r: f64,
) -> Result<OracleRun, EkfError> {
    let fs = FilterState::isotropic(x0.to_vec(), model.obs_dim(), p0, q, r);
    run_oracle_from(model, states, data, fs)
}

/// Runs the global filter from an explicit initial filter state.
pub fn run_oracle_from<M: StateSpaceModel + ?Sized>(
    model: &M,
    states: &DimTable,
    data: &Dataset,
    mut fs: FilterState,
) -> Result<OracleRun, EkfError> {
    let n = states.total();
    if model.state_dim() != n || fs.x.len() != n {
        return Err(EkfError::Dimension {
            what: "oracle state",
            expected: n,
            found: model.state_dim().min(fs.x.len()),
        });
    }
    let m_count = states.clients();
    let mut pred = vec![Vec::with_capacity(data.steps()); m_count];
    let mut est = vec![Vec::with_capacity(data.steps()); m_count];
    let mut y = Vec::with_capacity(model.obs_dim());
    let mut final_gain = None;
    for t in 0..data.steps() {
        y.clear();
        for o in &data.obs {
            y.extend_from_slice(&o[t]);
        }
        let out = fs.step(model, &y, JacobianMode::Auto)?;
        for m in 0..m_count {
            pred[m].push(states.extract(&out.x_pred, m).to_vec());
            est[m].push(states.extract(&out.x_est, m).to_vec());
        }
        final_gain = Some(out.gain);
    }
    Ok(OracleRun { pred, est, final_gain })
}
