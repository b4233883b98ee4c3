//! Closed-form ground truth for class-conditional isotropic Gaussian mixtures.
//!
//! Under `x_t = (1 - t) x0 + t eps` every mixture component `N(m, v I)` maps to
//! `N(a m, (a^2 v + t^2) I)`, so noisy densities, scores and posterior means
//! are all exact. The unconditional (null) marginal mixes classes by prior.

use ndarray::{Array2, ArrayView2};
use rand::distributions::{Distribution, WeightedIndex};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::backbone::{ConditionToken, Denoiser};
use crate::error::{Error, Result};
use crate::objective::{pseudo_target_aux, pseudo_target_classifier};
use crate::schedule::alpha_sigma;

/// Mixture for a single class.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClassMixture {
    pub weights: Vec<f64>,
    pub means: Vec<Vec<f64>>,
    /// Isotropic variance per component.
    pub variances: Vec<f64>,
}

/// Class-conditional Gaussian mixture with class priors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GmmCond {
    pub classes: Vec<ClassMixture>,
    pub priors: Vec<f64>,
}

struct Component<'a> {
    log_weight: f64,
    mean: &'a [f64],
    var: f64,
}

fn log_sum_exp(xs: &[f64]) -> f64 {
    let m = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + xs.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

fn is_distribution(p: &[f64]) -> bool {
    !p.is_empty() && p.iter().all(|&w| w >= 0.0 && w.is_finite()) && (p.iter().sum::<f64>() - 1.0).abs() < 1e-9
}

impl GmmCond {
    pub fn new(classes: Vec<ClassMixture>, priors: Vec<f64>) -> Result<Self> {
        let g = Self { classes, priors };
        g.validate()?;
        Ok(g)
    }

    pub fn validate(&self) -> Result<()> {
        if self.classes.is_empty() || self.classes.len() != self.priors.len() {
            return Err(Error::config("dataset.gmm", "need one prior per class and at least one class"));
        }
        if !is_distribution(&self.priors) {
            return Err(Error::config("dataset.gmm.priors", "must be a probability vector"));
        }
        let dim = self.dim();
        if dim == 0 {
            return Err(Error::config("dataset.gmm.means", "empty mean vector"));
        }
        for (c, m) in self.classes.iter().enumerate() {
            let k = m.weights.len();
            if m.means.len() != k || m.variances.len() != k {
                return Err(Error::Config {
                    field: format!("dataset.gmm.classes[{c}]"),
                    reason: "weights, means and variances differ in length".into(),
                });
            }
            if !is_distribution(&m.weights) {
                return Err(Error::Config {
                    field: format!("dataset.gmm.classes[{c}].weights"),
                    reason: "must be a probability vector".into(),
                });
            }
            if m.means.iter().any(|mu| mu.len() != dim || mu.iter().any(|v| !v.is_finite())) {
                return Err(Error::Config {
                    field: format!("dataset.gmm.classes[{c}].means"),
                    reason: format!("every mean must be a finite {dim}-vector"),
                });
            }
            if m.variances.iter().any(|&v| !(v > 0.0 && v.is_finite())) {
                return Err(Error::Config {
                    field: format!("dataset.gmm.classes[{c}].variances"),
                    reason: "variances must be positive".into(),
                });
            }
        }
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.classes
            .first()
            .and_then(|c| c.means.first())
            .map_or(0, Vec::len)
    }

    pub fn n_classes(&self) -> usize {
        self.classes.len()
    }

    /// Equal-prior mixture of `n_classes` classes on a ring of `2 * n_classes`
    /// modes; class `c` owns two adjacent modes.
    pub fn ring(n_classes: usize, radius: f64, std: f64, rotation: f64) -> Self {
        let n_modes = 2 * n_classes;
        let classes = (0..n_classes)
            .map(|c| {
                let means = (0..2)
                    .map(|j| {
                        let angle = rotation + std::f64::consts::TAU * (2 * c + j) as f64 / n_modes as f64;
                        vec![radius * angle.cos(), radius * angle.sin()]
                    })
                    .collect();
                ClassMixture {
                    weights: vec![0.5, 0.5],
                    means,
                    variances: vec![std * std; 2],
                }
            })
            .collect();
        Self {
            classes,
            priors: vec![1.0 / n_classes as f64; n_classes],
        }
    }

    /// Ring of `2 * n_classes` modes where neighbouring classes alternate:
    /// classes `2j` and `2j + 1` share the block of modes `4j..4j + 4`, each
    /// taking every other mode, so a class mean points at a mode of the other
    /// class. `n_classes` must be even.
    pub fn interleaved_ring(n_classes: usize, radius: f64, std: f64) -> Result<Self> {
        if n_classes == 0 || n_classes % 2 != 0 {
            return Err(Error::Argument(format!("interleaved ring needs an even class count, got {n_classes}")));
        }
        let n_modes = 2 * n_classes;
        let classes = (0..n_classes)
            .map(|c| {
                let first = 4 * (c / 2) + c % 2;
                let means = [first, first + 2]
                    .iter()
                    .map(|&k| {
                        let angle = std::f64::consts::TAU * k as f64 / n_modes as f64;
                        vec![radius * angle.cos(), radius * angle.sin()]
                    })
                    .collect();
                ClassMixture {
                    weights: vec![0.5, 0.5],
                    means,
                    variances: vec![std * std; 2],
                }
            })
            .collect();
        Self::new(classes, vec![1.0 / n_classes as f64; n_classes])
    }

    /// Two classes on the line: class 0 around -1.5, class 1 a two-mode mix on the right.
    pub fn two_class_1d() -> Self {
        Self {
            classes: vec![
                ClassMixture {
                    weights: vec![1.0],
                    means: vec![vec![-1.5]],
                    variances: vec![0.3],
                },
                ClassMixture {
                    weights: vec![0.4, 0.6],
                    means: vec![vec![0.5], vec![2.0]],
                    variances: vec![0.2, 0.5],
                },
            ],
            priors: vec![0.45, 0.55],
        }
    }

    /// Randomly parameterized mixture, used by property checks.
    pub fn random<R: Rng + ?Sized>(rng: &mut R, dim: usize, n_classes: usize, n_components: usize) -> Self {
        let normalized = |n: usize, rng: &mut R| {
            let raw: Vec<f64> = (0..n).map(|_| rng.gen_range(0.2..1.0)).collect();
            let sum: f64 = raw.iter().sum();
            raw.into_iter().map(|w| w / sum).collect::<Vec<_>>()
        };
        let classes = (0..n_classes)
            .map(|_| ClassMixture {
                weights: normalized(n_components, rng),
                means: (0..n_components)
                    .map(|_| (0..dim).map(|_| rng.gen_range(-2.5..2.5)).collect())
                    .collect(),
                variances: (0..n_components).map(|_| rng.gen_range(0.05..0.6)).collect(),
            })
            .collect();
        let priors = normalized(n_classes, rng);
        Self { classes, priors }
    }

    fn components(&self, cond: ConditionToken) -> Result<Vec<Component<'_>>> {
        let one = |c: usize, log_prior: f64| {
            let m = &self.classes[c];
            m.weights
                .iter()
                .zip(&m.means)
                .zip(&m.variances)
                .map(move |((w, mean), &var)| Component {
                    log_weight: log_prior + w.ln(),
                    mean,
                    var,
                })
        };
        match cond {
            ConditionToken::Class(c) => {
                let c = c as usize;
                if c >= self.classes.len() {
                    return Err(Error::Argument(format!("class {c} out of range")));
                }
                Ok(one(c, 0.0).collect())
            }
            ConditionToken::Null => Ok((0..self.classes.len())
                .filter(|&c| self.priors[c] > 0.0)
                .flat_map(|c| one(c, self.priors[c].ln()))
                .collect()),
            ConditionToken::Fake(_) => Err(Error::Argument("the data oracle has no fake branch".into())),
        }
    }

    fn check_point(&self, x: &[f64], t: f64) -> Result<(f64, f64)> {
        if x.len() != self.dim() {
            return Err(Error::Shape(format!("point has {} coords, mixture dim {}", x.len(), self.dim())));
        }
        alpha_sigma(t)
    }

    /// Per-component log joint terms and noisy variances at time `t`.
    fn log_terms(&self, x: &[f64], alpha: f64, sigma: f64, comps: &[Component<'_>]) -> Vec<(f64, f64)> {
        let d = x.len() as f64;
        comps
            .iter()
            .map(|c| {
                let var = alpha * alpha * c.var + sigma * sigma;
                let sq: f64 = x.iter().zip(c.mean).map(|(xi, mi)| (xi - alpha * mi).powi(2)).sum();
                let logp = c.log_weight - 0.5 * d * (std::f64::consts::TAU * var).ln() - 0.5 * sq / var;
                (logp, var)
            })
            .collect()
    }

    /// Log-density of the noisy marginal at time `t` and its gradient.
    pub fn noisy_density(&self, x: &[f64], t: f64, cond: ConditionToken) -> Result<(f64, Vec<f64>)> {
        let (alpha, sigma) = self.check_point(x, t)?;
        let comps = self.components(cond)?;
        let terms = self.log_terms(x, alpha, sigma, &comps);
        let logs: Vec<f64> = terms.iter().map(|(l, _)| *l).collect();
        let total = log_sum_exp(&logs);
        let mut score = vec![0.0; x.len()];
        for (c, (logp, var)) in comps.iter().zip(&terms) {
            let r = (logp - total).exp();
            for (k, sk) in score.iter_mut().enumerate() {
                *sk -= r * (x[k] - alpha * c.mean[k]) / var;
            }
        }
        Ok((total, score))
    }

    pub fn score(&self, x: &[f64], t: f64, cond: ConditionToken) -> Result<Vec<f64>> {
        self.noisy_density(x, t, cond).map(|(_, s)| s)
    }

    /// Tweedie posterior mean `(x + sigma^2 * score) / alpha`.
    pub fn posterior_mean(&self, x: &[f64], t: f64, cond: ConditionToken) -> Result<Vec<f64>> {
        let (alpha, sigma) = self.check_point(x, t)?;
        if alpha < 1e-6 {
            return Err(Error::Domain(format!("posterior mean ill-conditioned at t={t}")));
        }
        let score = self.score(x, t, cond)?;
        Ok(x.iter()
            .zip(&score)
            .map(|(xi, si)| (xi + sigma * sigma * si) / alpha)
            .collect())
    }

    /// Inverse Tweedie map: score implied by a posterior mean.
    pub fn score_from_mean(x: &[f64], mean: &[f64], t: f64) -> Result<Vec<f64>> {
        let (alpha, sigma) = alpha_sigma(t)?;
        if sigma <= 0.0 {
            return Err(Error::Domain("score undefined at t=0".into()));
        }
        Ok(x.iter()
            .zip(mean)
            .map(|(xi, mi)| (alpha * mi - xi) / (sigma * sigma))
            .collect())
    }

    /// Posterior mean from the per-component Gaussian posteriors, valid for
    /// every `t` in `[0, 1]` (independent of the score route).
    pub fn posterior_mean_direct(&self, x: &[f64], t: f64, cond: ConditionToken) -> Result<Vec<f64>> {
        let (alpha, sigma) = self.check_point(x, t)?;
        let comps = self.components(cond)?;
        let terms = self.log_terms(x, alpha, sigma, &comps);
        let logs: Vec<f64> = terms.iter().map(|(l, _)| *l).collect();
        let total = log_sum_exp(&logs);
        let mut out = vec![0.0; x.len()];
        for (c, (logp, var)) in comps.iter().zip(&terms) {
            let r = (logp - total).exp();
            let gain = alpha * c.var / var;
            for (k, o) in out.iter_mut().enumerate() {
                *o += r * (c.mean[k] + gain * (x[k] - alpha * c.mean[k]));
            }
        }
        Ok(out)
    }

    /// `grad log q(x | null) - grad log q(x | c)` at time `t`.
    pub fn classifier_score(&self, x: &[f64], t: f64, class: u16) -> Result<Vec<f64>> {
        let uncond = self.score(x, t, ConditionToken::Null)?;
        let cond = self.score(x, t, ConditionToken::Class(class))?;
        Ok(uncond.iter().zip(&cond).map(|(u, c)| u - c).collect())
    }

    /// Mean of the clean distribution under `cond`.
    pub fn mean(&self, cond: ConditionToken) -> Result<Vec<f64>> {
        let comps = self.components(cond)?;
        let mut out = vec![0.0; self.dim()];
        for c in &comps {
            let w = c.log_weight.exp();
            for (o, m) in out.iter_mut().zip(c.mean) {
                *o += w * m;
            }
        }
        Ok(out)
    }

    /// Exact ancestral samples: component, then Gaussian draw.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R, n: usize, cond: ConditionToken) -> Result<Array2<f64>> {
        let comps = self.components(cond)?;
        let weights: Vec<f64> = comps.iter().map(|c| c.log_weight.exp()).collect();
        let pick = WeightedIndex::new(&weights).map_err(|e| Error::Argument(e.to_string()))?;
        let d = self.dim();
        let mut out = Array2::zeros((n, d));
        for mut row in out.rows_mut() {
            let c = &comps[pick.sample(rng)];
            let std = c.var.sqrt();
            for (k, v) in row.iter_mut().enumerate() {
                let z: f64 = rng.sample(StandardNormal);
                *v = c.mean[k] + std * z;
            }
        }
        Ok(out)
    }

    /// Means of the components that `cond` draws from.
    pub fn component_means(&self, cond: ConditionToken) -> Result<Vec<Vec<f64>>> {
        Ok(self.components(cond)?.iter().map(|c| c.mean.to_vec()).collect())
    }
}

/// Exact posterior means standing in for `G`: `Class(c)` and `Null` use the
/// data mixture, `Fake(c)` uses a second "model" mixture.
pub struct OracleDenoiser<'a> {
    pub data: &'a GmmCond,
    pub model: Option<&'a GmmCond>,
    /// Added to every conditional (`Class`) prediction; perturbation control.
    pub cond_offset: f64,
}

impl<'a> OracleDenoiser<'a> {
    pub fn new(data: &'a GmmCond) -> Self {
        Self {
            data,
            model: None,
            cond_offset: 0.0,
        }
    }

    pub fn with_model(data: &'a GmmCond, model: &'a GmmCond) -> Self {
        Self {
            data,
            model: Some(model),
            cond_offset: 0.0,
        }
    }

    fn mean_row(&self, x: &[f64], t: f64, cond: ConditionToken) -> Result<Vec<f64>> {
        match cond {
            ConditionToken::Fake(c) => {
                let model = self
                    .model
                    .ok_or_else(|| Error::Argument("oracle has no model mixture for the fake branch".into()))?;
                model.posterior_mean_direct(x, t, ConditionToken::Class(c))
            }
            ConditionToken::Class(_) => {
                let mut m = self.data.posterior_mean_direct(x, t, cond)?;
                m.iter_mut().for_each(|v| *v += self.cond_offset);
                Ok(m)
            }
            ConditionToken::Null => self.data.posterior_mean_direct(x, t, cond),
        }
    }
}

impl Denoiser for OracleDenoiser<'_> {
    fn dim(&self) -> usize {
        self.data.dim()
    }

    fn velocity(&self, x: ArrayView2<f64>, t: &[f64], s: &[f64], cond: &[ConditionToken]) -> Result<Array2<f64>> {
        let g = self.predict_x0(x, t, s, cond)?;
        let mut v = &x - &g;
        for (mut row, &ti) in v.rows_mut().into_iter().zip(t) {
            if ti > 0.0 {
                row /= ti;
            } else {
                row.fill(0.0);
            }
        }
        Ok(v)
    }

    fn predict_x0(&self, x: ArrayView2<f64>, t: &[f64], _s: &[f64], cond: &[ConditionToken]) -> Result<Array2<f64>> {
        let mut out = Array2::zeros(x.raw_dim());
        for (r, row) in x.rows().into_iter().enumerate() {
            let xs: Vec<f64> = row.to_vec();
            let m = self.mean_row(&xs, t[r], cond[r])?;
            out.row_mut(r).assign(&ndarray::ArrayView1::from(&m));
        }
        Ok(out)
    }
}

fn norm(v: impl IntoIterator<Item = f64>) -> f64 {
    v.into_iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Relative error with a floor proportional to the magnitude of the score
/// terms being differenced, so exact cancellations are not scored as failures.
fn rel_err(lhs: &[f64], rhs: &[f64], term_scale: f64) -> f64 {
    let diff = norm(lhs.iter().zip(rhs).map(|(a, b)| a - b));
    let denom = norm(rhs.iter().copied()).max(1e-8 * term_scale).max(f64::MIN_POSITIVE);
    diff / denom
}

/// Probe points: a regular grid (1-D: `n` points, 2-D: `sqrt(n)^2` points)
/// spanning `[-extent, extent]` per axis.
pub fn probe_grid(dim: usize, n: usize, extent: f64) -> Vec<Vec<f64>> {
    let lin = |k: usize, m: usize| -extent + 2.0 * extent * k as f64 / (m - 1).max(1) as f64;
    match dim {
        1 => (0..n).map(|k| vec![lin(k, n)]).collect(),
        2 => {
            let side = (n as f64).sqrt().round() as usize;
            (0..side * side).map(|k| vec![lin(k / side, side), lin(k % side, side)]).collect()
        }
        _ => (0..n).map(|k| vec![lin(k, n); dim]).collect(),
    }
}

/// Gradient of the self-evaluation loss with respect to the re-noised sample,
/// by the chain rule through `x_s = a_s x0_hat + sigma_s eps'`.
fn self_eval_grad(x0_hat: &Array2<f64>, x_self: &Array2<f64>, alpha_s: f64) -> Array2<f64> {
    (x0_hat - x_self) * (2.0 / alpha_s)
}

/// Checks that the classifier-only pseudo-target, with exact posterior means
/// substituted for `G`, yields `(2 sigma_s^2 / alpha_s^2) * classifier_score`
/// as the gradient at the re-noised sample. Probes are noisy points at time `t`;
/// the generator output is the exact conditional posterior mean there.
pub fn verify_result1<R: Rng + ?Sized>(
    denoiser: &OracleDenoiser<'_>,
    class: u16,
    probes: &[Vec<f64>],
    t: f64,
    s: f64,
    rng: &mut R,
) -> Result<f64> {
    check_pair(t, s)?;
    let data = denoiser.data;
    let (x0_hat, s_vec, cond) = generator_outputs(data, class, probes, t, s)?;
    let target = pseudo_target_classifier(denoiser, denoiser, x0_hat.view(), &s_vec, &cond, rng)?;
    let (alpha_s, sigma_s) = alpha_sigma(s)?;
    let lhs = self_eval_grad(&x0_hat, &target.x_self, alpha_s);
    let factor = 2.0 * sigma_s * sigma_s / (alpha_s * alpha_s);
    let mut worst: f64 = 0.0;
    for (r, xs) in target.x_s.rows().into_iter().enumerate() {
        let xs = xs.to_vec();
        let su = data.score(&xs, s, ConditionToken::Null)?;
        let sc = data.score(&xs, s, ConditionToken::Class(class))?;
        let rhs: Vec<f64> = su.iter().zip(&sc).map(|(u, c)| factor * (u - c)).collect();
        let scale = factor * (norm(su.iter().copied()) + norm(sc.iter().copied()))
            + 2.0 * norm(xs.iter().copied()) / (alpha_s * alpha_s);
        worst = worst.max(rel_err(lhs.row(r).as_slice().expect("row"), &rhs, scale));
    }
    Ok(worst)
}

/// Aux-mixed analogue of [`verify_result1`]: the pseudo-target gradient must
/// equal `(2 sigma_s^2 / alpha_s^2) [k (classifier score) + (1 - k) (model
/// score - data score)]`, with the model mixture behind the fake branch.
pub fn verify_result2<R: Rng + ?Sized>(
    denoiser: &OracleDenoiser<'_>,
    class: u16,
    probes: &[Vec<f64>],
    t: f64,
    s: f64,
    k: f64,
    rng: &mut R,
) -> Result<f64> {
    check_pair(t, s)?;
    let data = denoiser.data;
    let model = denoiser
        .model
        .ok_or_else(|| Error::Argument("result 2 needs a model mixture".into()))?;
    let (x0_hat, s_vec, cond) = generator_outputs(data, class, probes, t, s)?;
    let target = pseudo_target_aux(denoiser, denoiser, denoiser, x0_hat.view(), &s_vec, &cond, k, rng)?;
    let (alpha_s, sigma_s) = alpha_sigma(s)?;
    let lhs = self_eval_grad(&x0_hat, &target.x_self, alpha_s);
    let factor = 2.0 * sigma_s * sigma_s / (alpha_s * alpha_s);
    let mut worst: f64 = 0.0;
    for (r, xs) in target.x_s.rows().into_iter().enumerate() {
        let xs = xs.to_vec();
        let su = data.score(&xs, s, ConditionToken::Null)?;
        let sc = data.score(&xs, s, ConditionToken::Class(class))?;
        let sm = model.score(&xs, s, ConditionToken::Class(class))?;
        let rhs: Vec<f64> = (0..xs.len())
            .map(|i| factor * (k * (su[i] - sc[i]) + (1.0 - k) * (sm[i] - sc[i])))
            .collect();
        let scale = factor * (norm(su) + norm(sm) + 2.0 * norm(sc)) + 2.0 * norm(xs.iter().copied()) / (alpha_s * alpha_s);
        worst = worst.max(rel_err(lhs.row(r).as_slice().expect("row"), &rhs, scale));
    }
    Ok(worst)
}

fn check_pair(t: f64, s: f64) -> Result<()> {
    if !(s > 0.0 && s < 1.0 && s <= t && t < 1.0) {
        return Err(Error::Domain(format!("identity check needs 0 < s <= t < 1, got t={t}, s={s}")));
    }
    Ok(())
}

type GeneratorOutputs = (Array2<f64>, Vec<f64>, Vec<ConditionToken>);

fn generator_outputs(data: &GmmCond, class: u16, probes: &[Vec<f64>], t: f64, s: f64) -> Result<GeneratorOutputs> {
    let d = data.dim();
    let mut x0_hat = Array2::zeros((probes.len(), d));
    for (r, p) in probes.iter().enumerate() {
        let m = data.posterior_mean_direct(p, t, ConditionToken::Class(class))?;
        x0_hat.row_mut(r).assign(&ndarray::ArrayView1::from(&m));
    }
    Ok((x0_hat, vec![s; probes.len()], vec![ConditionToken::Class(class); probes.len()]))
}
