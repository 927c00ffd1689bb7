//! Gaussian state perturbation, clipped noisy gradients, randomized response
//! on flags, and the closed-form noise calibrations behind them.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::PrivacyError;
use crate::linalg::norm2;
use crate::seeds::substream;

fn check_budget(eps: f64, delta: f64) -> Result<(), PrivacyError> {
    if !(eps > 0.0 && eps.is_finite()) {
        return Err(PrivacyError::Epsilon(eps));
    }
    if !(delta > 0.0 && delta < 1.0) {
        return Err(PrivacyError::Delta(delta));
    }
    Ok(())
}

/// `√(2 ln(1.25/δ)) / ε`, the Gaussian-mechanism factor per unit sensitivity.
pub fn gaussian_factor(eps: f64, delta: f64) -> Result<f64, PrivacyError> {
    check_budget(eps, delta)?;
    Ok((2.0 * (1.25 / delta).ln()).sqrt() / eps)
}

/// Constants bounding how much one record can move a released state.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SensitivityBounds {
    /// `‖ΔK‖`, the gain perturbation norm.
    pub delta_k: f64,
    /// Lipschitz constant of `h`.
    pub l_h: f64,
    /// Lipschitz constant of `f`.
    pub l_f: f64,
    /// Lipschitz constant of φ in its input.
    pub l_theta: f64,
    /// Bound on the state norm.
    pub c_x: f64,
    /// `sup_t ‖r_t‖`.
    pub sup_r: f64,
    /// `sup_t ‖y_t‖`.
    pub sup_y: f64,
}

impl SensitivityBounds {
    pub fn validate(&self) -> Result<(), PrivacyError> {
        for v in [self.delta_k, self.l_h, self.l_f, self.l_theta, self.c_x, self.sup_r, self.sup_y] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(PrivacyError::Sigma(v));
            }
        }
        Ok(())
    }
}

/// `σ_c = 2‖ΔK‖(L_h·C_x + sup‖r‖)·√(2 ln(1.25/δ)) / ε`.
pub fn sigma_state(sb: &SensitivityBounds, eps: f64, delta: f64) -> Result<f64, PrivacyError> {
    sb.validate()?;
    Ok(2.0 * sb.delta_k * (sb.l_h * sb.c_x + sb.sup_r) * gaussian_factor(eps, delta)?)
}

/// `σ_a = 2(L_f·C_x + L_θ·sup‖y‖)·√(2 ln(1.25/δ)) / ε`.
pub fn sigma_augmented(sb: &SensitivityBounds, eps: f64, delta: f64) -> Result<f64, PrivacyError> {
    sb.validate()?;
    Ok(2.0 * (sb.l_f * sb.c_x + sb.l_theta * sb.sup_y) * gaussian_factor(eps, delta)?)
}

/// `σ_g = 2C_g·√(2 ln(1.25/δ)) / ε`.
pub fn sigma_gradient(clip: f64, eps: f64, delta: f64) -> Result<f64, PrivacyError> {
    if !(clip > 0.0 && clip.is_finite()) {
        return Err(PrivacyError::ClipNorm(clip));
    }
    Ok(2.0 * clip * gaussian_factor(eps, delta)?)
}

/// Retention probability `e^ε / (1 + e^ε)`.
pub fn rr_probability(eps: f64) -> Result<f64, PrivacyError> {
    if !(eps >= 0.0) {
        return Err(PrivacyError::Epsilon(eps));
    }
    if eps.is_infinite() {
        return Ok(1.0);
    }
    // 1/(1+e^−ε) is the same value without overflow for large ε.
    Ok(1.0 / (1.0 + (-eps).exp()))
}

/// Adds i.i.d. `N(0, σ²)` noise per coordinate.
pub fn perturb_vec<R: Rng + ?Sized>(x: &[f64], sigma: f64, rng: &mut R) -> Vec<f64> {
    if sigma == 0.0 {
        return x.to_vec();
    }
    x.iter()
        .map(|v| v + sigma * rng.sample::<f64, _>(StandardNormal))
        .collect()
}

/// Rescales `g` to norm `clip` when it is longer.
pub fn clip_grad(g: &[f64], clip: f64) -> Vec<f64> {
    let n = norm2(g);
    if n > clip {
        let s = clip / n;
        g.iter().map(|v| v * s).collect()
    } else {
        g.to_vec()
    }
}

/// Keeps `z` with probability `p`, flips it otherwise.
pub fn randomize_flag<R: Rng + ?Sized>(z: bool, p: f64, rng: &mut R) -> bool {
    if p >= 1.0 {
        return z;
    }
    if p <= 0.0 {
        return !z;
    }
    if rng.random::<f64>() < p {
        z
    } else {
        !z
    }
}

/// Basic composition: sums of ε and of δ.
pub fn compose_budget(parts: &[(f64, f64)]) -> Result<(f64, f64), PrivacyError> {
    if parts.is_empty() {
        return Err(PrivacyError::EmptyComposition);
    }
    Ok(parts.iter().fold((0.0, 0.0), |(e, d), (pe, pd)| (e + pe, d + pd)))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StateChannel {
    pub enabled: bool,
    pub epsilon: f64,
    pub delta: f64,
    /// Explicit noise std; derived from the sensitivity bounds when absent.
    pub sigma: Option<f64>,
}

impl Default for StateChannel {
    fn default() -> Self {
        Self {
            enabled: false,
            epsilon: 1.0,
            delta: 1e-5,
            sigma: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GradientChannel {
    pub enabled: bool,
    pub epsilon: f64,
    pub delta: f64,
    pub clip: f64,
    pub sigma: Option<f64>,
}

impl Default for GradientChannel {
    fn default() -> Self {
        Self {
            enabled: false,
            epsilon: 1.0,
            delta: 1e-5,
            clip: 1.0,
            sigma: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FlagChannel {
    pub enabled: bool,
    /// Retention probability for `Z_c`; `e^ε_c/(1+e^ε_c)` when absent.
    pub p_c: Option<f64>,
    pub p_a: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PrivacyConfig {
    /// Proprietary estimates sent upstream.
    pub state_c: StateChannel,
    /// Augmented predictions sent upstream.
    pub state_a: StateChannel,
    /// Gradients sent downstream.
    pub gradient: GradientChannel,
    pub flags: FlagChannel,
    /// Fixed bounds; estimated from a nominal run when absent.
    pub bounds: Option<SensitivityBounds>,
}

/// Noise levels actually applied, for the manifest.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DerivedPrivacy {
    pub sigma_c: f64,
    pub sigma_a: f64,
    pub sigma_g: f64,
    pub clip: f64,
    pub p_c: f64,
    pub p_a: f64,
    /// Budget spent per step by the enabled state channels.
    pub step_epsilon: f64,
    pub step_delta: f64,
    /// Naive T-fold composition of the per-step budget.
    pub naive_total_epsilon: f64,
    pub naive_total_delta: f64,
    pub bounds: SensitivityBounds,
}

impl DerivedPrivacy {
    /// The transparent setting: no noise, flags kept.
    pub fn disabled() -> Self {
        Self {
            sigma_c: 0.0,
            sigma_a: 0.0,
            sigma_g: 0.0,
            clip: f64::INFINITY,
            p_c: 1.0,
            p_a: 1.0,
            step_epsilon: 0.0,
            step_delta: 0.0,
            naive_total_epsilon: 0.0,
            naive_total_delta: 0.0,
            bounds: SensitivityBounds::default(),
        }
    }
}

fn check_sigma(s: f64) -> Result<f64, PrivacyError> {
    if s >= 0.0 && s.is_finite() {
        Ok(s)
    } else {
        Err(PrivacyError::Sigma(s))
    }
}

fn check_p(p: f64) -> Result<f64, PrivacyError> {
    if (0.0..=1.0).contains(&p) {
        Ok(p)
    } else {
        Err(PrivacyError::Probability(p))
    }
}

impl PrivacyConfig {
    /// Resolves every channel's σ and p. Disabled channels resolve to the
    /// transparent values.
    pub fn derive(&self, bounds: SensitivityBounds, steps: usize) -> Result<DerivedPrivacy, PrivacyError> {
        let bounds = self.bounds.unwrap_or(bounds);
        let mut d = DerivedPrivacy::disabled();
        d.bounds = bounds;
        let mut spent = Vec::new();
        if self.state_c.enabled {
            let c = &self.state_c;
            d.sigma_c = match c.sigma {
                Some(s) => check_sigma(s)?,
                None => sigma_state(&bounds, c.epsilon, c.delta)?,
            };
            check_budget(c.epsilon, c.delta)?;
            spent.push((c.epsilon, c.delta));
        }
        if self.state_a.enabled {
            let a = &self.state_a;
            d.sigma_a = match a.sigma {
                Some(s) => check_sigma(s)?,
                None => sigma_augmented(&bounds, a.epsilon, a.delta)?,
            };
            check_budget(a.epsilon, a.delta)?;
            spent.push((a.epsilon, a.delta));
        }
        if self.gradient.enabled {
            let g = &self.gradient;
            if !(g.clip > 0.0) {
                return Err(PrivacyError::ClipNorm(g.clip));
            }
            d.clip = g.clip;
            d.sigma_g = match g.sigma {
                Some(s) => check_sigma(s)?,
                None => sigma_gradient(g.clip, g.epsilon, g.delta)?,
            };
        }
        if self.flags.enabled {
            d.p_c = check_p(match self.flags.p_c {
                Some(p) => p,
                None => rr_probability(self.state_c.epsilon)?,
            })?;
            d.p_a = check_p(match self.flags.p_a {
                Some(p) => p,
                None => rr_probability(self.state_a.epsilon)?,
            })?;
        }
        if !spent.is_empty() {
            let (e, dl) = compose_budget(&spent)?;
            d.step_epsilon = e;
            d.step_delta = dl;
            d.naive_total_epsilon = e * steps as f64;
            d.naive_total_delta = (dl * steps as f64).min(1.0);
        }
        Ok(d)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Channel {
    StateC,
    StateA,
    Gradient,
    FlagC,
    FlagA,
}

impl Channel {
    pub const ALL: [Channel; 5] = [
        Channel::StateC,
        Channel::StateA,
        Channel::Gradient,
        Channel::FlagC,
        Channel::FlagA,
    ];

    fn label(self) -> &'static str {
        match self {
            Channel::StateC => "privacy/state_c",
            Channel::StateA => "privacy/state_a",
            Channel::Gradient => "privacy/gradient",
            Channel::FlagC => "privacy/flag_c",
            Channel::FlagA => "privacy/flag_a",
        }
    }
}

/// One independent RNG per (client, channel).
#[derive(Debug, Clone)]
pub struct NoiseStreams {
    streams: Vec<[ChaCha8Rng; 5]>,
}

impl NoiseStreams {
    pub fn new(seed: u64, clients: usize) -> Self {
        let streams = (0..clients as u64)
            .map(|m| Channel::ALL.map(|c| substream(seed, c.label(), m)))
            .collect();
        Self { streams }
    }

    pub fn rng(&mut self, client: usize, channel: Channel) -> &mut ChaCha8Rng {
        let idx = Channel::ALL.iter().position(|&c| c == channel).expect("listed");
        &mut self.streams[client][idx]
    }
}

/// Applies the derived mechanisms; a no-op when every channel is transparent.
#[derive(Debug, Clone)]
pub struct Privatizer {
    pub derived: DerivedPrivacy,
    streams: NoiseStreams,
}

impl Privatizer {
    pub fn new(derived: DerivedPrivacy, seed: u64, clients: usize) -> Self {
        Self {
            derived,
            streams: NoiseStreams::new(seed, clients),
        }
    }

    pub fn disabled(clients: usize) -> Self {
        Self::new(DerivedPrivacy::disabled(), 0, clients)
    }

    pub fn state_c(&mut self, client: usize, x: &[f64]) -> Vec<f64> {
        let s = self.derived.sigma_c;
        if s == 0.0 {
            return x.to_vec();
        }
        perturb_vec(x, s, self.streams.rng(client, Channel::StateC))
    }

    pub fn state_a(&mut self, client: usize, x: &[f64]) -> Vec<f64> {
        let s = self.derived.sigma_a;
        if s == 0.0 {
            return x.to_vec();
        }
        perturb_vec(x, s, self.streams.rng(client, Channel::StateA))
    }

    pub fn gradient(&mut self, client: usize, g: &[f64]) -> Vec<f64> {
        let clipped = if self.derived.clip.is_finite() {
            clip_grad(g, self.derived.clip)
        } else {
            g.to_vec()
        };
        let s = self.derived.sigma_g;
        if s == 0.0 {
            return clipped;
        }
        perturb_vec(&clipped, s, self.streams.rng(client, Channel::Gradient))
    }

    pub fn flags(&mut self, client: usize, z_c: bool, z_a: bool) -> (bool, bool) {
        let (p_c, p_a) = (self.derived.p_c, self.derived.p_a);
        let zc = if p_c >= 1.0 {
            z_c
        } else {
            randomize_flag(z_c, p_c, self.streams.rng(client, Channel::FlagC))
        };
        let za = if p_a >= 1.0 {
            z_a
        } else {
            randomize_flag(z_a, p_a, self.streams.rng(client, Channel::FlagA))
        };
        (zc, za)
    }
}
