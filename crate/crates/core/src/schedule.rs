//! Noise schedule, training-time timestep sampling, inference grids and
//! pair weights for the rectified `(1 - t, t)` interpolation.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Latent lengths and shifts anchoring the affine length-to-shift map.
const WARP_ANCHOR_LO: (f64, f64) = (512.0, 0.5);
const WARP_ANCHOR_HI: (f64, f64) = (4096.0, 1.15);

/// Parameters of the training-time timestep distribution.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScheduleSpec {
    /// Floor for sampled `t` and for the `1/t^2` pair weight.
    pub t_min: f64,
    /// Proxy for the token length of the data. `1` means unwarped.
    pub warp_len: u32,
    /// Iterations over which the lower bound of `s` anneals from `t` to 0.
    pub tau_anneal_iters: u64,
    /// Probability of drawing `s = t`.
    pub p_equal: f64,
}

impl Default for ScheduleSpec {
    fn default() -> Self {
        Self {
            t_min: 1e-3,
            warp_len: 1,
            tau_anneal_iters: 6_000,
            p_equal: 0.5,
        }
    }
}

impl ScheduleSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.t_min > 0.0 && self.t_min < 0.5) {
            return Err(Error::config("schedule.t_min", "must lie in (0, 0.5)"));
        }
        if self.warp_len == 0 {
            return Err(Error::config("schedule.warp_len", "must be >= 1"));
        }
        if self.tau_anneal_iters == 0 {
            return Err(Error::config("schedule.tau_anneal_iters", "must be >= 1"));
        }
        if !(0.0..=1.0).contains(&self.p_equal) {
            return Err(Error::config("schedule.p_equal", "must lie in [0, 1]"));
        }
        Ok(())
    }

    /// Shift used by [`warp`]. Token-free data (`warp_len == 1`) is unwarped.
    pub fn mu(&self) -> f64 {
        if self.warp_len == 1 {
            0.0
        } else {
            mu_for_len(self.warp_len as f64)
        }
    }
}

/// A training time pair with `0 <= s <= t <= 1`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TimePair {
    pub t: f64,
    pub s: f64,
}

impl TimePair {
    pub fn new(t: f64, s: f64) -> Result<Self> {
        if !(t.is_finite() && s.is_finite()) || !(0.0..=1.0).contains(&t) || s < 0.0 || s > t {
            return Err(Error::Domain(format!("invalid time pair t={t}, s={s}")));
        }
        Ok(Self { t, s })
    }
}

/// `(alpha_t, sigma_t) = (1 - t, t)`.
pub fn alpha_sigma(t: f64) -> Result<(f64, f64)> {
    if !(0.0..=1.0).contains(&t) {
        return Err(Error::Domain(format!("t={t} outside [0, 1]")));
    }
    Ok((1.0 - t, t))
}

/// Affine map from latent length to warp shift through `(512, 0.5)` and `(4096, 1.15)`.
pub fn mu_for_len(len: f64) -> f64 {
    let (l0, m0) = WARP_ANCHOR_LO;
    let (l1, m1) = WARP_ANCHOR_HI;
    m0 + (len - l0) * (m1 - m0) / (l1 - l0)
}

/// Length-dependent time shift `e^mu / (e^mu + 1/t - 1)`.
pub fn warp(t_raw: f64, mu: f64) -> Result<f64> {
    if !(t_raw > 0.0 && t_raw < 1.0) {
        return Err(Error::Domain(format!("warp input {t_raw} outside (0, 1)")));
    }
    Ok(warp_unchecked(t_raw, mu))
}

fn warp_unchecked(t_raw: f64, mu: f64) -> f64 {
    let e = mu.exp();
    e / (e + 1.0 / t_raw - 1.0)
}

fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

/// Logit-normal primary time, warped, clamped to `[t_min, 1]`.
pub fn sample_t<R: Rng + ?Sized>(rng: &mut R, spec: &ScheduleSpec) -> f64 {
    let z: f64 = rng.sample(StandardNormal);
    t_from_normal(z, spec)
}

/// Deterministic part of [`sample_t`] given the normal draw.
pub fn t_from_normal(z: f64, spec: &ScheduleSpec) -> f64 {
    let raw = sigmoid(z);
    let t = if raw > 0.0 && raw < 1.0 {
        warp_unchecked(raw, spec.mu())
    } else {
        raw
    };
    t.clamp(spec.t_min, 1.0)
}

/// Annealing weight `tau = min(iter / tau_anneal_iters, 1)`.
pub fn tau_at(iter: u64, spec: &ScheduleSpec) -> f64 {
    (iter as f64 / spec.tau_anneal_iters as f64).min(1.0)
}

/// Secondary time: `s = t` with probability `p_equal`, else `U((1 - tau) t, t)`.
pub fn sample_s<R: Rng + ?Sized>(rng: &mut R, t: f64, iter: u64, spec: &ScheduleSpec) -> f64 {
    if rng.gen::<f64>() < spec.p_equal {
        return t;
    }
    let lo = (1.0 - tau_at(iter, spec)) * t;
    let u: f64 = rng.gen();
    (lo + u * (t - lo)).min(t)
}

/// Strictly decreasing inference grid `1 = t_0 > ... > t_n = 0`.
pub fn inference_grid(n_steps: usize, mu: f64) -> Result<Vec<f64>> {
    if n_steps == 0 {
        return Err(Error::Argument("inference grid needs at least one step".into()));
    }
    let mut grid = Vec::with_capacity(n_steps + 1);
    grid.push(1.0);
    for k in 1..n_steps {
        let raw = 1.0 - k as f64 / n_steps as f64;
        grid.push(warp_unchecked(raw, mu));
    }
    grid.push(0.0);
    Ok(grid)
}

/// Pair weight `1 / max(t, t_min)^2`.
pub fn pair_weight(t: f64, t_min: f64) -> f64 {
    let t = t.max(t_min);
    1.0 / (t * t)
}
