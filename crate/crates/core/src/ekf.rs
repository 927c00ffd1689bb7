//! Generic Extended Kalman Filter predict/update.
//!
//! Everything is a pure function over value types: the caller owns the
//! [`FilterState`] and decides when to commit a step.

use serde::{Deserialize, Serialize};

use crate::error::{EkfError, LinalgError};
use crate::linalg::{norm_inf, vadd, vsub, Lu, Mat};

/// A discrete-time state-space model `x' = f(x)`, `y = h(x)`.
pub trait StateSpaceModel: Send + Sync {
    fn state_dim(&self) -> usize;
    fn obs_dim(&self) -> usize;
    fn transition(&self, x: &[f64]) -> Vec<f64>;
    fn observe(&self, x: &[f64]) -> Vec<f64>;

    /// Analytic `∂f/∂x`, if the model has one.
    fn transition_jacobian(&self, _x: &[f64]) -> Option<Mat> {
        None
    }

    /// Analytic `∂h/∂x`, if the model has one.
    fn observation_jacobian(&self, _x: &[f64]) -> Option<Mat> {
        None
    }
}

/// How Jacobians are obtained.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum JacobianMode {
    /// Analytic when the model provides one, central differences otherwise.
    #[default]
    Auto,
    /// Always central differences.
    Numeric,
}

/// Step used by the numeric fallback: `1e-5 · max(1, ‖x‖∞)`.
pub fn default_step(x: &[f64]) -> f64 {
    1e-5 * norm_inf(x).max(1.0)
}

/// Central-difference Jacobian, `J[i][j] = (f(x+εe_j)[i] − f(x−εe_j)[i]) / 2ε`.
pub fn numeric_jacobian<F>(f: F, x: &[f64], eps: f64) -> Result<Mat, EkfError>
where
    F: Fn(&[f64]) -> Vec<f64>,
{
    if !(eps > 0.0 && eps.is_finite()) {
        return Err(EkfError::BadStep(eps));
    }
    let mut probe = x.to_vec();
    let mut jac: Option<Mat> = None;
    for j in 0..x.len() {
        probe[j] = x[j] + eps;
        let plus = f(&probe);
        probe[j] = x[j] - eps;
        let minus = f(&probe);
        probe[j] = x[j];
        if plus.iter().chain(&minus).any(|v| !v.is_finite()) {
            return Err(EkfError::NonFinite { coordinate: j });
        }
        let out_dim = plus.len();
        let jm = jac.get_or_insert_with(|| Mat::zeros(out_dim, x.len()));
        if minus.len() != out_dim || jm.rows() != out_dim {
            return Err(EkfError::Dimension {
                what: "jacobian output",
                expected: jm.rows(),
                found: plus.len().max(minus.len()),
            });
        }
        for i in 0..out_dim {
            jm[(i, j)] = (plus[i] - minus[i]) / (2.0 * eps);
        }
    }
    Ok(jac.unwrap_or_else(|| Mat::zeros(f(x).len(), 0)))
}

pub fn transition_jacobian<M: StateSpaceModel + ?Sized>(
    model: &M,
    x: &[f64],
    mode: JacobianMode,
) -> Result<Mat, EkfError> {
    if mode == JacobianMode::Auto {
        if let Some(j) = model.transition_jacobian(x) {
            return Ok(j);
        }
    }
    numeric_jacobian(|v| model.transition(v), x, default_step(x))
}

pub fn observation_jacobian<M: StateSpaceModel + ?Sized>(
    model: &M,
    x: &[f64],
    mode: JacobianMode,
) -> Result<Mat, EkfError> {
    if mode == JacobianMode::Auto {
        if let Some(j) = model.observation_jacobian(x) {
            return Ok(j);
        }
    }
    numeric_jacobian(|v| model.observe(v), x, default_step(x))
}

/// Estimate, covariance, and the noise covariances of one filter.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FilterState {
    pub x: Vec<f64>,
    pub p: Mat,
    pub q: Mat,
    pub r: Mat,
}

impl FilterState {
    pub fn new(x: Vec<f64>, p: Mat, q: Mat, r: Mat) -> Result<Self, EkfError> {
        let n = x.len();
        for (what, m) in [("P", &p), ("Q", &q)] {
            if m.shape() != (n, n) {
                return Err(EkfError::Dimension {
                    what,
                    expected: n,
                    found: m.rows(),
                });
            }
        }
        if !r.is_square() {
            return Err(EkfError::Dimension {
                what: "R",
                expected: r.rows(),
                found: r.cols(),
            });
        }
        Ok(Self { x, p, q, r })
    }

    /// `P = p₀·I`, `Q = q·I`, `R = r·I`.
    pub fn isotropic(x0: Vec<f64>, obs_dim: usize, p0: f64, q: f64, r: f64) -> Self {
        let n = x0.len();
        Self {
            x: x0,
            p: Mat::scaled_identity(n, p0),
            q: Mat::scaled_identity(n, q),
            r: Mat::scaled_identity(obs_dim, r),
        }
    }

    /// Runs predict then update and commits the result.
    pub fn step<M: StateSpaceModel + ?Sized>(
        &mut self,
        model: &M,
        y: &[f64],
        mode: JacobianMode,
    ) -> Result<StepOutput, EkfError> {
        let pred = predict(model, self, mode)?;
        let upd = update(model, &pred.x_pred, &pred.p_minus, y, &self.r, mode)?;
        self.x = upd.x.clone();
        self.p = upd.p.clone();
        Ok(StepOutput {
            x_pred: pred.x_pred,
            p_minus: pred.p_minus,
            x_est: upd.x,
            gain: upd.gain,
            residual: upd.residual,
        })
    }
}

#[derive(Debug, Clone)]
pub struct Prediction {
    pub x_pred: Vec<f64>,
    pub p_minus: Mat,
    pub transition_jacobian: Mat,
}

#[derive(Debug, Clone)]
pub struct Update {
    pub x: Vec<f64>,
    pub p: Mat,
    pub gain: Mat,
    pub residual: Vec<f64>,
    pub observation_jacobian: Mat,
}

#[derive(Debug, Clone)]
pub struct StepOutput {
    pub x_pred: Vec<f64>,
    pub p_minus: Mat,
    pub x_est: Vec<f64>,
    pub gain: Mat,
    pub residual: Vec<f64>,
}

/// `x⁻ = f(x̂)`, `P⁻ = F·P·Fᵀ + Q` with `F` evaluated at `x̂`.
pub fn predict<M: StateSpaceModel + ?Sized>(
    model: &M,
    fs: &FilterState,
    mode: JacobianMode,
) -> Result<Prediction, EkfError> {
    let n = model.state_dim();
    if fs.x.len() != n {
        return Err(EkfError::Dimension {
            what: "state estimate",
            expected: n,
            found: fs.x.len(),
        });
    }
    if fs.p.shape() != (n, n) || fs.q.shape() != (n, n) {
        return Err(EkfError::Dimension {
            what: "state covariance",
            expected: n,
            found: fs.p.rows(),
        });
    }
    let f_jac = transition_jacobian(model, &fs.x, mode)?;
    let x_pred = model.transition(&fs.x);
    let p_minus = f_jac
        .matmul(&fs.p)?
        .matmul(&f_jac.transpose())?
        .add(&fs.q)?
        .symmetrized();
    Ok(Prediction {
        x_pred,
        p_minus,
        transition_jacobian: f_jac,
    })
}

/// `K = P⁻Hᵀ(HP⁻Hᵀ + R)⁻¹`, solved through an LU factorization of the
/// innovation covariance rather than an explicit inverse.
pub fn kalman_gain(p_minus: &Mat, h: &Mat, r: &Mat) -> Result<Mat, EkfError> {
    let ph_t = p_minus.matmul(&h.transpose())?;
    let s = h.matmul(&ph_t)?.add(r)?.symmetrized();
    let lu = Lu::factor(&s).map_err(|e| match e {
        LinalgError::Singular { rcond } => EkfError::SingularInnovation { rcond },
        other => EkfError::Linalg(other),
    })?;
    // S is symmetric, so Kᵀ = S⁻¹·(P⁻Hᵀ)ᵀ.
    let k_t = lu.solve_mat(&ph_t.transpose())?;
    Ok(k_t.transpose())
}

/// `r = y − h(x⁻)`, `x̂ = x⁻ + K·r`, `P = (I − K·H)·P⁻` (symmetrized).
pub fn update<M: StateSpaceModel + ?Sized>(
    model: &M,
    x_pred: &[f64],
    p_minus: &Mat,
    y: &[f64],
    r: &Mat,
    mode: JacobianMode,
) -> Result<Update, EkfError> {
    let (n, d) = (model.state_dim(), model.obs_dim());
    if x_pred.len() != n {
        return Err(EkfError::Dimension {
            what: "predicted state",
            expected: n,
            found: x_pred.len(),
        });
    }
    if y.len() != d {
        return Err(EkfError::Dimension {
            what: "observation",
            expected: d,
            found: y.len(),
        });
    }
    if r.shape() != (d, d) {
        return Err(EkfError::Dimension {
            what: "measurement covariance",
            expected: d,
            found: r.rows(),
        });
    }
    let h = observation_jacobian(model, x_pred, mode)?;
    let gain = kalman_gain(p_minus, &h, r)?;
    let residual = vsub(y, &model.observe(x_pred));
    let x = vadd(x_pred, &gain.matvec(&residual)?);
    let i_kh = Mat::identity(n).sub(&gain.matmul(&h)?)?;
    let p = i_kh.matmul(p_minus)?.symmetrized();
    Ok(Update {
        x,
        p,
        gain,
        residual,
        observation_jacobian: h,
    })
}

/// `x' = A·x`, `y = C·x + b`, with analytic Jacobians.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearModel {
    pub a: Mat,
    pub c: Mat,
    pub bias: Vec<f64>,
}

impl LinearModel {
    pub fn new(a: Mat, c: Mat) -> Self {
        let bias = vec![0.0; c.rows()];
        Self { a, c, bias }
    }
}

impl StateSpaceModel for LinearModel {
    fn state_dim(&self) -> usize {
        self.a.rows()
    }

    fn obs_dim(&self) -> usize {
        self.c.rows()
    }

    fn transition(&self, x: &[f64]) -> Vec<f64> {
        self.a.matvec(x).expect("state dimension")
    }

    fn observe(&self, x: &[f64]) -> Vec<f64> {
        vadd(&self.c.matvec(x).expect("state dimension"), &self.bias)
    }

    fn transition_jacobian(&self, _x: &[f64]) -> Option<Mat> {
        Some(self.a.clone())
    }

    fn observation_jacobian(&self, _x: &[f64]) -> Option<Mat> {
        Some(self.c.clone())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    struct Doubler;

    impl StateSpaceModel for Doubler {
        fn state_dim(&self) -> usize {
            1
        }
        fn obs_dim(&self) -> usize {
            1
        }
        fn transition(&self, x: &[f64]) -> Vec<f64> {
            vec![2.0 * x[0]]
        }
        fn observe(&self, x: &[f64]) -> Vec<f64> {
            x.to_vec()
        }
    }

    #[test]
    fn jacobian_of_identity_and_tanh() {
        let j = numeric_jacobian(|v| v.to_vec(), &[0.3, -1.0, 2.0], 1e-5).unwrap();
        assert!(j.sub(&Mat::identity(3)).unwrap().max_abs() < 1e-10);
        let j = numeric_jacobian(|v| v.iter().map(|x| x.tanh()).collect(), &[0.0, 0.0], 1e-5).unwrap();
        assert!(j.sub(&Mat::identity(2)).unwrap().max_abs() < 1e-9);
    }

    #[test]
    fn jacobian_of_linear_map_is_exact() {
        let a = Mat::from_rows(&[vec![1.5, -2.0], vec![0.25, 3.0], vec![-1.0, 0.5]]);
        for eps in [1e-6, 1e-5, 1e-4] {
            let j = numeric_jacobian(|v| a.matvec(v).unwrap(), &[0.7, -0.2], eps).unwrap();
            assert!(j.sub(&a).unwrap().max_abs() < 1e-8, "eps {eps}");
        }
    }

    #[test]
    fn jacobian_reports_offending_coordinate() {
        let err = numeric_jacobian(
            |v| vec![if v[1] > 0.5 { f64::NAN } else { v[0] }],
            &[0.0, 0.5],
            1e-3,
        )
        .unwrap_err();
        assert_eq!(err, EkfError::NonFinite { coordinate: 1 });
        assert_eq!(numeric_jacobian(|v| v.to_vec(), &[1.0], 0.0).unwrap_err(), EkfError::BadStep(0.0));
    }

    #[test]
    fn predict_scalar_arithmetic() {
        let fs = FilterState::isotropic(vec![1.0], 1, 1.0, 0.5, 1.0);
        let pred = predict(&Doubler, &fs, JacobianMode::Numeric).unwrap();
        assert!((pred.x_pred[0] - 2.0).abs() < 1e-12);
        assert!((pred.p_minus[(0, 0)] - 4.5).abs() < 1e-9);
    }

    #[test]
    fn predict_identity_keeps_state() {
        let m = LinearModel::new(Mat::identity(2), Mat::identity(2));
        let p = Mat::from_rows(&[vec![2.0, 0.3], vec![0.3, 1.0]]);
        let fs = FilterState::new(vec![1.0, -1.0], p.clone(), Mat::zeros(2, 2), Mat::identity(2)).unwrap();
        let pred = predict(&m, &fs, JacobianMode::Auto).unwrap();
        assert_eq!(pred.x_pred, fs.x);
        assert_eq!(pred.p_minus, p);
    }

    #[test]
    fn gain_symmetric_case_and_large_r() {
        let k = kalman_gain(&Mat::identity(2), &Mat::identity(2), &Mat::identity(2)).unwrap();
        assert!(k.sub(&Mat::scaled_identity(2, 0.5)).unwrap().max_abs() < 1e-15);
        let k = kalman_gain(&Mat::identity(2), &Mat::identity(2), &Mat::scaled_identity(2, 1e12)).unwrap();
        assert!(k.frobenius() < 1e-10);
    }

    #[test]
    fn gain_rejects_singular_innovation() {
        let err = kalman_gain(&Mat::zeros(2, 2), &Mat::identity(2), &Mat::zeros(2, 2)).unwrap_err();
        assert!(matches!(err, EkfError::SingularInnovation { .. }));
    }

    #[test]
    fn update_zero_residual_and_full_trust() {
        let m = LinearModel::new(Mat::identity(2), Mat::identity(2));
        let x_pred = vec![0.5, 1.5];
        let upd = update(&m, &x_pred, &Mat::identity(2), &x_pred, &Mat::identity(2), JacobianMode::Auto).unwrap();
        assert_eq!(upd.x, x_pred);
        // R → 0 gives K = I and x̂ = y.
        let y = vec![3.0, -1.0];
        let upd = update(&m, &x_pred, &Mat::identity(2), &y, &Mat::scaled_identity(2, 1e-14), JacobianMode::Auto).unwrap();
        for (a, b) in upd.x.iter().zip(&y) {
            assert!((a - b).abs() < 1e-12);
        }
        let big = update(&m, &x_pred, &Mat::identity(2), &y, &Mat::scaled_identity(2, 1e13), JacobianMode::Auto).unwrap();
        for (a, b) in big.x.iter().zip(&x_pred) {
            assert!((a - b).abs() < 1e-10);
        }
    }

    #[test]
    fn dimension_errors() {
        let m = LinearModel::new(Mat::identity(2), Mat::identity(2));
        let fs = FilterState::isotropic(vec![0.0; 3], 2, 1.0, 1.0, 1.0);
        assert!(matches!(predict(&m, &fs, JacobianMode::Auto), Err(EkfError::Dimension { .. })));
        let err = update(&m, &[0.0, 0.0], &Mat::identity(2), &[1.0], &Mat::identity(2), JacobianMode::Auto);
        assert!(matches!(err, Err(EkfError::Dimension { what: "observation", .. })));
    }
}
