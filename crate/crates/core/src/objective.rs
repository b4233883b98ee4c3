//! Loss construction for self-evaluating training.
//!
//! A training step has two phases. [`prepare_targets`] runs every
//! stop-gradient pass (re-noising the model's own prediction and querying the
//! conditional, unconditional and fake branches) and freezes the results into
//! plain arrays. [`evaluate`] then computes the loss as a function of the live
//! parameters only, optionally accumulating exact parameter gradients. Because
//! targets are owned values with no link back to the passes that produced
//! them, stop-gradient holds by construction.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::backbone::{x0_from_velocity, ConditionToken, Denoiser, ForwardCache, Network};
use crate::error::{Error, Result};
use crate::schedule::{alpha_sigma, pair_weight};

/// Below this norm the renormalized target falls back to `x0`.
const RENORM_EPS: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ObjectiveConfig {
    /// Training-time guidance scale; only used to derive `k = (w - 1) / w`.
    pub omega_train: f64,
    /// Explicit classifier/auxiliary mixing weight, overriding `omega_train`.
    pub k_mix: Option<f64>,
    pub aux_enabled: bool,
    pub renorm_enabled: bool,
    pub lambda_cap: f64,
    pub fake_loss_weight: f64,
    /// Conditional self-evaluation pass on the EMA weights, unconditional on live weights.
    pub ema_split: bool,
}

impl Default for ObjectiveConfig {
    fn default() -> Self {
        Self {
            omega_train: 10.0,
            k_mix: None,
            aux_enabled: true,
            renorm_enabled: true,
            lambda_cap: 20.0,
            fake_loss_weight: 1.0,
            ema_split: true,
        }
    }
}

impl ObjectiveConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.omega_train >= 1.0 && self.omega_train.is_finite()) {
            return Err(Error::config("objective.omega_train", "must be a finite value >= 1"));
        }
        if let Some(k) = self.k_mix {
            if !(0.0..=1.0).contains(&k) {
                return Err(Error::config("objective.k_mix", "must lie in [0, 1]"));
            }
        }
        if !(self.lambda_cap > 0.0 && self.lambda_cap.is_finite()) {
            return Err(Error::config("objective.lambda_cap", "must be finite and > 0"));
        }
        if !(self.fake_loss_weight >= 0.0 && self.fake_loss_weight.is_finite()) {
            return Err(Error::config("objective.fake_loss_weight", "must be finite and >= 0"));
        }
        Ok(())
    }

    /// Mixing weight of the classifier term in the aux-mixed target.
    pub fn k(&self) -> f64 {
        self.k_mix
            .unwrap_or((self.omega_train - 1.0) / self.omega_train)
    }
}

/// Which loss terms are active for a step.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    /// Plain conditional flow matching in `x0` form.
    DataOnly,
    ClassifierOnly,
    AuxMixed,
}

/// One optimization sample.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingPair {
    pub x0: Vec<f64>,
    pub eps: Vec<f64>,
    pub t: f64,
    pub s: f64,
    pub cond: ConditionToken,
}

impl TrainingPair {
    pub fn x_t(&self) -> Vec<f64> {
        let (a, s) = alpha_sigma(self.t).expect("t in [0, 1]");
        self.x0.iter().zip(&self.eps).map(|(x, e)| a * x + s * e).collect()
    }
}

/// A batch of training pairs stored column-wise.
#[derive(Debug, Clone, PartialEq)]
pub struct PairBatch {
    pub x0: Array2<f64>,
    pub eps: Array2<f64>,
    pub t: Vec<f64>,
    pub s: Vec<f64>,
    pub cond: Vec<ConditionToken>,
}

impl PairBatch {
    pub fn from_pairs(pairs: &[TrainingPair]) -> Result<Self> {
        let d = pairs.first().map(|p| p.x0.len()).ok_or_else(|| Error::Argument("empty batch".into()))?;
        let n = pairs.len();
        let mut x0 = Array2::zeros((n, d));
        let mut eps = Array2::zeros((n, d));
        for (r, p) in pairs.iter().enumerate() {
            if p.x0.len() != d || p.eps.len() != d {
                return Err(Error::Shape(format!("pair {r} has mismatched dimensions")));
            }
            x0.row_mut(r).assign(&ArrayView1::from(&p.x0));
            eps.row_mut(r).assign(&ArrayView1::from(&p.eps));
        }
        Ok(Self {
            x0,
            eps,
            t: pairs.iter().map(|p| p.t).collect(),
            s: pairs.iter().map(|p| p.s).collect(),
            cond: pairs.iter().map(|p| p.cond).collect(),
        })
    }

    pub fn len(&self) -> usize {
        self.t.len()
    }

    pub fn is_empty(&self) -> bool {
        self.t.is_empty()
    }

    pub fn pair(&self, i: usize) -> TrainingPair {
        TrainingPair {
            x0: self.x0.row(i).to_vec(),
            eps: self.eps.row(i).to_vec(),
            t: self.t[i],
            s: self.s[i],
            cond: self.cond[i],
        }
    }

    /// `x_t = (1 - t) x0 + t eps`, row-wise.
    pub fn x_t(&self) -> Array2<f64> {
        let mut out = self.x0.clone();
        for (r, mut row) in out.rows_mut().into_iter().enumerate() {
            let t = self.t[r];
            row *= 1.0 - t;
            row.scaled_add(t, &self.eps.row(r));
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.len();
        if n == 0 {
            return Err(Error::Argument("empty batch".into()));
        }
        if self.x0.nrows() != n || self.eps.dim() != self.x0.dim() || self.s.len() != n || self.cond.len() != n {
            return Err(Error::Shape("inconsistent batch columns".into()));
        }
        for (&t, &s) in self.t.iter().zip(&self.s) {
            if !(0.0..=1.0).contains(&t) || s < 0.0 || s > t {
                return Err(Error::Domain(format!("invalid time pair t={t}, s={s}")));
            }
        }
        Ok(())
    }
}

/// Stop-gradient self-evaluation target and the re-noised sample it was built from.
#[derive(Debug, Clone, PartialEq)]
pub struct PseudoTarget {
    pub x_self: Array2<f64>,
    pub x_s: Array2<f64>,
}

/// `||x0_hat - x0||^2`.
pub fn data_loss(x0_hat: &[f64], x0: &[f64]) -> f64 {
    x0_hat.iter().zip(x0).map(|(a, b)| (a - b).powi(2)).sum()
}

/// `lambda_{s,t} = t/(1-t) - s/(1-s)`, capped.
pub fn lambda_weight(s: f64, t: f64, cap: f64) -> f64 {
    if t >= 1.0 - 1e-6 {
        return cap;
    }
    let lam = t / (1.0 - t) - s / (1.0 - s);
    lam.clamp(0.0, cap)
}

fn renoise<R: Rng + ?Sized>(x0_hat: ArrayView2<f64>, s: &[f64], rng: &mut R) -> Result<Array2<f64>> {
    let mut x_s = x0_hat.to_owned();
    for (r, mut row) in x_s.rows_mut().into_iter().enumerate() {
        let (a, sig) = alpha_sigma(s[r])?;
        for v in row.iter_mut() {
            let z: f64 = rng.sample(StandardNormal);
            *v = a * *v + sig * z;
        }
    }
    Ok(x_s)
}

fn check_target_inputs(x0_hat: &ArrayView2<f64>, s: &[f64], cond: &[ConditionToken]) -> Result<()> {
    if s.len() != x0_hat.nrows() || cond.len() != x0_hat.nrows() {
        return Err(Error::Shape("pseudo-target inputs differ in length".into()));
    }
    if let Some(bad) = s.iter().find(|v| !(0.0..=1.0).contains(*v)) {
        return Err(Error::Domain(format!("s={bad} outside [0, 1]")));
    }
    Ok(())
}

/// Classifier-only target `sg[x0_hat - (G(x_s, s, s, null) - G(x_s, s, s, c))]`
/// with `x_s` a fresh re-noising of `x0_hat` at level `s`.
pub fn pseudo_target_classifier<R: Rng + ?Sized>(
    cond_view: &dyn Denoiser,
    uncond_view: &dyn Denoiser,
    x0_hat: ArrayView2<f64>,
    s: &[f64],
    cond: &[ConditionToken],
    rng: &mut R,
) -> Result<PseudoTarget> {
    check_target_inputs(&x0_hat, s, cond)?;
    let x_s = renoise(x0_hat, s, rng)?;
    let g_cond = cond_view.predict_x0(x_s.view(), s, s, cond)?;
    let nulls = vec![ConditionToken::Null; cond.len()];
    let g_null = uncond_view.predict_x0(x_s.view(), s, s, &nulls)?;
    let x_self = &x0_hat - &(g_null - &g_cond);
    Ok(PseudoTarget { x_self, x_s })
}

/// Aux-mixed target `sg[x0_hat - Delta]` with
/// `Delta = k (G_null - G_c) + (1 - k) (G_fake - G_c)`.
#[allow(clippy::too_many_arguments)]
pub fn pseudo_target_aux<R: Rng + ?Sized>(
    cond_view: &dyn Denoiser,
    uncond_view: &dyn Denoiser,
    fake_view: &dyn Denoiser,
    x0_hat: ArrayView2<f64>,
    s: &[f64],
    cond: &[ConditionToken],
    k: f64,
    rng: &mut R,
) -> Result<PseudoTarget> {
    check_target_inputs(&x0_hat, s, cond)?;
    let fakes = cond
        .iter()
        .map(|c| match c {
            ConditionToken::Class(id) => Ok(ConditionToken::Fake(*id)),
            other => Err(Error::Argument(format!("aux target needs class conditions, got {other:?}"))),
        })
        .collect::<Result<Vec<_>>>()?;
    let x_s = renoise(x0_hat, s, rng)?;
    let g_cond = cond_view.predict_x0(x_s.view(), s, s, cond)?;
    let nulls = vec![ConditionToken::Null; cond.len()];
    let g_null = uncond_view.predict_x0(x_s.view(), s, s, &nulls)?;
    let g_fake = fake_view.predict_x0(x_s.view(), s, s, &fakes)?;
    let delta = (&g_null - &g_cond) * k + (&g_fake - &g_cond) * (1.0 - k);
    Ok(PseudoTarget {
        x_self: &x0_hat - &delta,
        x_s,
    })
}

/// `(x0 + lam x_self) ||x0|| / ||x0 + lam x_self||`, falling back to `x0`
/// when the mixed target is numerically zero.
pub fn renorm_target(x0: &[f64], x_self: &[f64], lam: f64) -> Vec<f64> {
    let mixed: Vec<f64> = x0.iter().zip(x_self).map(|(a, b)| a + lam * b).collect();
    let n = mixed.iter().map(|v| v * v).sum::<f64>().sqrt();
    if n < RENORM_EPS {
        return x0.to_vec();
    }
    let scale = x0.iter().map(|v| v * v).sum::<f64>().sqrt() / n;
    mixed.into_iter().map(|v| v * scale).collect()
}

/// Per-pair loss: renormalized `||x0_hat - x_renorm||^2`, or the hybrid
/// `||x0_hat - x0||^2 + lam ||x0_hat - x_self||^2` when renorm is off.
pub fn pair_loss(x0_hat: &[f64], x0: &[f64], x_self: &[f64], lam: f64, renorm: bool) -> f64 {
    if lam == 0.0 {
        return data_loss(x0_hat, x0);
    }
    if renorm {
        data_loss(x0_hat, &renorm_target(x0, x_self, lam))
    } else {
        data_loss(x0_hat, x0) + lam * data_loss(x0_hat, x_self)
    }
}

/// Regression of the fake branch onto detached model samples:
/// mean of `||G(x_s, s, s, c_fake) - x0_hat||^2`.
pub fn fake_branch_loss(
    net: &dyn Denoiser,
    x_s: ArrayView2<f64>,
    s: &[f64],
    fake_cond: &[ConditionToken],
    x0_hat: ArrayView2<f64>,
) -> Result<f64> {
    if x_s.nrows() == 0 {
        return Err(Error::Argument("empty fake-branch batch".into()));
    }
    let g = net.predict_x0(x_s, s, s, fake_cond)?;
    Ok((&g - &x0_hat).mapv(|v| v * v).sum() / x_s.nrows() as f64)
}

/// Detached fake-branch training data.
#[derive(Debug, Clone, PartialEq)]
pub struct FakeTargets {
    pub x_s: Array2<f64>,
    pub s: Vec<f64>,
    pub cond: Vec<ConditionToken>,
    pub x0_hat: Array2<f64>,
}

/// Everything the loss needs besides the live parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct PreparedTargets {
    /// `w(t) / batch_size` per pair.
    pub pair_w: Vec<f64>,
    pub lambda: Vec<f64>,
    /// Regression target per pair: `x0`, or `x_renorm` when renormalization is on.
    pub main: Array2<f64>,
    /// Pseudo-targets for the hybrid (non-renormalized) loss.
    pub x_self: Option<Array2<f64>>,
    pub fake: Option<FakeTargets>,
    pub renorm: bool,
}

/// Scalar loss with its components.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct LossBreakdown {
    pub total: f64,
    /// Weighted pair loss, `mean(w(t) * L_{s,t})`.
    pub pair: f64,
    /// Unweighted `mean ||x0_hat - x0||^2`.
    pub data: f64,
    /// Unweighted `mean ||x0_hat - x_self||^2` over self-evaluated pairs.
    pub self_eval: f64,
    pub fake: f64,
    pub lambda_mean: f64,
    pub lambda_max: f64,
    pub n_self: usize,
}

/// Which networks the stop-gradient passes query.
pub struct TargetViews<'a> {
    pub live: &'a dyn Denoiser,
    pub ema: &'a dyn Denoiser,
}

/// Runs all stop-gradient passes for a batch and freezes the targets.
///
/// `x0_hat` is the live prediction `G(x_t, t, s, c)` for the batch. Pairs with
/// `s = t`, the null condition, or stage [`Stage::DataOnly`] keep `lambda = 0`.
pub fn prepare_targets<R: Rng + ?Sized>(
    views: &TargetViews<'_>,
    batch: &PairBatch,
    x0_hat: &Array2<f64>,
    stage: Stage,
    cfg: &ObjectiveConfig,
    t_min: f64,
    rng: &mut R,
) -> Result<PreparedTargets> {
    batch.validate()?;
    let n = batch.len();
    let pair_w: Vec<f64> = batch.t.iter().map(|&t| pair_weight(t, t_min) / n as f64).collect();
    let mut lambda = vec![0.0; n];
    let self_rows: Vec<usize> = if stage == Stage::DataOnly {
        Vec::new()
    } else {
        (0..n)
            .filter(|&i| batch.s[i] < batch.t[i] && matches!(batch.cond[i], ConditionToken::Class(_)))
            .collect()
    };
    for &i in &self_rows {
        lambda[i] = lambda_weight(batch.s[i], batch.t[i], cfg.lambda_cap);
    }

    let mut x_self_full = batch.x0.clone();
    let mut fake = None;
    if !self_rows.is_empty() {
        let sub_x0 = x0_hat.select(Axis(0), &self_rows);
        let sub_s: Vec<f64> = self_rows.iter().map(|&i| batch.s[i]).collect();
        let sub_c: Vec<ConditionToken> = self_rows.iter().map(|&i| batch.cond[i]).collect();
        let cond_view = if cfg.ema_split { views.ema } else { views.live };
        let target = match stage {
            Stage::AuxMixed => pseudo_target_aux(
                cond_view,
                views.live,
                views.live,
                sub_x0.view(),
                &sub_s,
                &sub_c,
                cfg.k(),
                rng,
            )?,
            _ => pseudo_target_classifier(cond_view, views.live, sub_x0.view(), &sub_s, &sub_c, rng)?,
        };
        for (j, &i) in self_rows.iter().enumerate() {
            x_self_full.row_mut(i).assign(&target.x_self.row(j));
        }
        if stage == Stage::AuxMixed {
            fake = Some(FakeTargets {
                cond: sub_c
                    .iter()
                    .map(|c| ConditionToken::Fake(c.class_id().expect("class rows")))
                    .collect(),
                x_s: target.x_s,
                s: sub_s,
                x0_hat: sub_x0,
            });
        }
    }

    let main = if cfg.renorm_enabled {
        let mut main = batch.x0.clone();
        for &i in &self_rows {
            let r = renorm_target(
                batch.x0.row(i).as_slice().expect("row"),
                x_self_full.row(i).as_slice().expect("row"),
                lambda[i],
            );
            main.row_mut(i).assign(&Array1::from(r));
        }
        main
    } else {
        batch.x0.clone()
    };

    Ok(PreparedTargets {
        pair_w,
        lambda,
        main,
        x_self: (!cfg.renorm_enabled).then_some(x_self_full),
        fake,
        renorm: cfg.renorm_enabled,
    })
}

fn sq_norm_rows(a: &Array2<f64>) -> Vec<f64> {
    a.rows().into_iter().map(|r| r.dot(&r)).collect()
}

/// Loss as a function of the live parameters with frozen targets; when
/// `grads` is given, exact gradients are accumulated into it.
pub fn evaluate(
    net: &Network,
    batch: &PairBatch,
    targets: &PreparedTargets,
    cfg: &ObjectiveConfig,
    grads: Option<&mut [f64]>,
) -> Result<LossBreakdown> {
    evaluate_with(net, batch, targets, cfg, None, grads)
}

/// As [`evaluate`], reusing a forward pass already run on `batch.x_t()`.
pub fn evaluate_with(
    net: &Network,
    batch: &PairBatch,
    targets: &PreparedTargets,
    cfg: &ObjectiveConfig,
    forward: Option<(Array2<f64>, ForwardCache)>,
    mut grads: Option<&mut [f64]>,
) -> Result<LossBreakdown> {
    let n = batch.len();
    let x_t = batch.x_t();
    let (v, cache) = match forward {
        Some(f) => f,
        None => net.forward_cached(x_t.view(), &batch.t, &batch.s, &batch.cond)?,
    };
    let x0_hat = x0_from_velocity(x_t.view(), &batch.t, &v);

    let main_res = &x0_hat - &targets.main;
    let main_sq = sq_norm_rows(&main_res);
    let self_res = targets.x_self.as_ref().map(|xs| &x0_hat - xs);
    let self_sq = self_res.as_ref().map(sq_norm_rows);

    let mut pair = 0.0;
    for i in 0..n {
        let mut l = main_sq[i];
        if let Some(sq) = &self_sq {
            l += targets.lambda[i] * sq[i];
        }
        pair += targets.pair_w[i] * l;
    }

    let data = sq_norm_rows(&(&x0_hat - &batch.x0)).iter().sum::<f64>() / n as f64;
    let self_idx: Vec<usize> = (0..n).filter(|&i| targets.lambda[i] > 0.0).collect();
    let self_eval = if self_idx.is_empty() {
        0.0
    } else {
        let xs = targets.x_self.as_ref();
        let sum: f64 = match xs {
            Some(_) => self_idx.iter().map(|&i| self_sq.as_ref().expect("hybrid")[i]).sum(),
            // Renormalized runs track distance to the mixed target instead.
            None => self_idx.iter().map(|&i| main_sq[i]).sum(),
        };
        sum / self_idx.len() as f64
    };
    let lambda_mean = targets.lambda.iter().sum::<f64>() / n as f64;
    let lambda_max = targets.lambda.iter().cloned().fold(0.0, f64::max);

    if let Some(g) = grads.as_deref_mut() {
        // d/dx0_hat, then d/dV = -t d/dx0_hat.
        let mut d_v = main_res.clone();
        for (i, mut row) in d_v.rows_mut().into_iter().enumerate() {
            row *= 2.0 * targets.pair_w[i];
            if let Some(sr) = &self_res {
                row.scaled_add(2.0 * targets.pair_w[i] * targets.lambda[i], &sr.row(i));
            }
            row *= -batch.t[i];
        }
        net.backward(&cache, &d_v, g);
    }

    let mut fake_loss = 0.0;
    if let Some(f) = &targets.fake {
        if !f.s.is_empty() {
            let (vf, fcache) = net.forward_cached(f.x_s.view(), &f.s, &f.s, &f.cond)?;
            let gf = x0_from_velocity(f.x_s.view(), &f.s, &vf);
            let res = &gf - &f.x0_hat;
            let m = f.s.len() as f64;
            fake_loss = sq_norm_rows(&res).iter().sum::<f64>() / m;
            if let Some(g) = grads.as_deref_mut() {
                let mut d_v = res;
                for (i, mut row) in d_v.rows_mut().into_iter().enumerate() {
                    row *= -2.0 * cfg.fake_loss_weight * f.s[i] / m;
                }
                net.backward(&fcache, &d_v, g);
            }
        }
    }

    let total = pair + cfg.fake_loss_weight * fake_loss;
    if !total.is_finite() {
        return Err(Error::NonFinite(format!("loss evaluated to {total}")));
    }
    Ok(LossBreakdown {
        total,
        pair,
        data,
        self_eval,
        fake: fake_loss,
        lambda_mean,
        lambda_max,
        n_self: self_idx.len(),
    })
}

/// Full batch loss: live prediction, stop-gradient targets, weighted mean.
#[allow(clippy::too_many_arguments)]
pub fn total_loss<R: Rng + ?Sized>(
    net: &Network,
    ema: &dyn Denoiser,
    batch: &PairBatch,
    stage: Stage,
    cfg: &ObjectiveConfig,
    t_min: f64,
    rng: &mut R,
) -> Result<LossBreakdown> {
    batch.validate()?;
    let x_t = batch.x_t();
    let (v, cache) = net.forward_cached(x_t.view(), &batch.t, &batch.s, &batch.cond)?;
    let x0_hat = x0_from_velocity(x_t.view(), &batch.t, &v);
    let views = TargetViews { live: net, ema };
    let targets = prepare_targets(&views, batch, &x0_hat, stage, cfg, t_min, rng)?;
    evaluate_with(net, batch, &targets, cfg, Some((v, cache)), None)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::NetSpec;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small_net(seed: u64, zero: bool) -> Network {
        Network::new(
            NetSpec {
                width: 16,
                depth: 2,
                cond_dim: 4,
                n_freqs: 4,
                zero_init_output: zero,
                ..NetSpec::default()
            },
            seed,
        )
        .unwrap()
    }

    fn random_batch(rng: &mut ChaCha8Rng, n: usize) -> PairBatch {
        let pairs: Vec<TrainingPair> = (0..n)
            .map(|i| {
                let t: f64 = rng.gen_range(0.05..0.95);
                let s = if i % 3 == 0 { t } else { rng.gen_range(0.0..t) };
                TrainingPair {
                    x0: vec![rng.gen_range(-3.0..3.0), rng.gen_range(-3.0..3.0)],
                    eps: vec![rng.sample(StandardNormal), rng.sample(StandardNormal)],
                    t,
                    s,
                    cond: if i % 7 == 6 {
                        ConditionToken::Null
                    } else {
                        ConditionToken::Class((i % 4) as u16)
                    },
                }
            })
            .collect();
        PairBatch::from_pairs(&pairs).unwrap()
    }

    #[test]
    fn data_loss_values() {
        assert_eq!(data_loss(&[1.0, 2.0], &[1.0, 2.0]), 0.0);
        assert_eq!(data_loss(&[3.0, 4.0], &[0.0, 0.0]), 25.0);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let a: Vec<f64> = (0..5).map(|_| rng.gen()).collect();
        let b: Vec<f64> = (0..5).map(|_| rng.gen()).collect();
        let mut brute = 0.0;
        for k in 0..5 {
            let d = a[k] - b[k];
            brute += d * d;
        }
        assert!((data_loss(&a, &b) - brute).abs() < 1e-12);
    }

    #[test]
    fn lambda_values() {
        assert_eq!(lambda_weight(0.4, 0.4, 20.0), 0.0);
        assert_eq!(lambda_weight(0.0, 0.5, 20.0), 1.0);
        assert!((lambda_weight(0.25, 0.5, 20.0) - 2.0 / 3.0).abs() < 1e-15);
        assert_eq!(lambda_weight(0.1, 1.0, 20.0), 20.0);
        assert_eq!(lambda_weight(0.0, 0.99, 20.0), 20.0);
    }

    #[test]
    fn renorm_values() {
        assert_eq!(renorm_target(&[3.0, 4.0], &[1.0, 7.0], 0.0), vec![3.0, 4.0]);
        let same = renorm_target(&[3.0, 4.0], &[3.0, 4.0], 2.5);
        assert!((same[0] - 3.0).abs() < 1e-15 && (same[1] - 4.0).abs() < 1e-15);
        let r = renorm_target(&[3.0, 4.0], &[5.0, 0.0], 1.0);
        // (8, 4) * 5 / sqrt(80)
        assert!((r[0] - 4.472_135_954_999_579).abs() < 1e-12);
        assert!((r[1] - 2.236_067_977_499_79).abs() < 1e-12);
        assert_eq!(renorm_target(&[1.0, 1.0], &[-1.0, -1.0], 1.0), vec![1.0, 1.0]);
    }

    #[test]
    fn pair_loss_values() {
        let x0_hat = [0.3, -0.2];
        let x0 = [1.0, 0.5];
        let xs = [0.7, 0.1];
        for renorm in [true, false] {
            assert_eq!(pair_loss(&x0_hat, &x0, &xs, 0.0, renorm), data_loss(&x0_hat, &x0));
        }
        assert_eq!(pair_loss(&[0.0, 0.0], &[1.0, 0.0], &[0.0, 1.0], 2.0, false), 3.0);
        let lam = 1.7;
        let target = renorm_target(&x0, &xs, lam);
        let mut brute = 0.0;
        for k in 0..2 {
            brute += (x0_hat[k] - target[k]).powi(2);
        }
        assert!((pair_loss(&x0_hat, &x0, &xs, lam, true) - brute).abs() < 1e-12);
    }

    #[test]
    fn classifier_target_collapses_when_branches_agree() {
        // A network whose null and class rows coincide cannot tell them apart.
        let mut net = small_net(4, false);
        let null = net.embedding_row_range(ConditionToken::Null);
        let c0 = net.embedding_row_range(ConditionToken::Class(0));
        let row: Vec<f64> = net.params()[c0.clone()].to_vec();
        net.params_mut()[null].copy_from_slice(&row);
        let x0_hat = ndarray::array![[0.5, -1.0], [2.0, 0.3]];
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let cond = [ConditionToken::Class(0); 2];
        let t = pseudo_target_classifier(&net, &net, x0_hat.view(), &[0.4, 0.2], &cond, &mut rng).unwrap();
        assert_eq!(t.x_self, x0_hat);
    }

    #[test]
    fn aux_target_mixing_limits() {
        let net = small_net(6, false);
        let x0_hat = ndarray::array![[0.5, -1.0], [2.0, 0.3], [-1.0, -1.0]];
        let s = [0.4, 0.2, 0.7];
        let cond = [ConditionToken::Class(0), ConditionToken::Class(1), ConditionToken::Class(3)];

        let a = pseudo_target_aux(&net, &net, &net, x0_hat.view(), &s, &cond, 1.0, &mut ChaCha8Rng::seed_from_u64(2))
            .unwrap();
        let b = pseudo_target_classifier(&net, &net, x0_hat.view(), &s, &cond, &mut ChaCha8Rng::seed_from_u64(2))
            .unwrap();
        assert_eq!(a.x_s, b.x_s);
        for (u, v) in a.x_self.iter().zip(b.x_self.iter()) {
            assert!((u - v).abs() < 1e-14);
        }

        let z = pseudo_target_aux(&net, &net, &net, x0_hat.view(), &s, &cond, 0.0, &mut ChaCha8Rng::seed_from_u64(2))
            .unwrap();
        let fakes: Vec<_> = cond.iter().map(|c| ConditionToken::Fake(c.class_id().unwrap())).collect();
        let gf = net.predict_x0(z.x_s.view(), &s, &s, &fakes).unwrap();
        let gc = net.predict_x0(z.x_s.view(), &s, &s, &cond).unwrap();
        let expect = &x0_hat - &(gf - gc);
        for (u, v) in z.x_self.iter().zip(expect.iter()) {
            assert!((u - v).abs() < 1e-14);
        }
    }

    #[test]
    fn pseudo_target_rejects_bad_s() {
        let net = small_net(1, true);
        let x = ndarray::array![[0.0, 0.0]];
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(pseudo_target_classifier(&net, &net, x.view(), &[1.5], &[ConditionToken::Class(0)], &mut rng).is_err());
    }

    #[test]
    fn pseudo_target_is_detached() {
        let mut net = small_net(7, false);
        let x0_hat = ndarray::array![[0.5, -1.0]];
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let t = pseudo_target_classifier(&net, &net, x0_hat.view(), &[0.3], &[ConditionToken::Class(2)], &mut rng)
            .unwrap();
        let before = t.x_self.clone();
        net.params_mut().iter_mut().for_each(|p| *p *= 1.5);
        assert_eq!(t.x_self, before);
    }

    #[test]
    fn total_loss_edge_cases() {
        let net = small_net(2, false);
        let ema = net.clone();
        let cfg = ObjectiveConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(0);

        let pair = TrainingPair {
            x0: vec![1.0, -0.5],
            eps: vec![0.3, 0.8],
            t: 0.6,
            s: 0.6,
            cond: ConditionToken::Class(1),
        };
        let one = PairBatch::from_pairs(&[pair.clone()]).unwrap();
        let loss = total_loss(&net, &ema, &one, Stage::ClassifierOnly, &cfg, 1e-3, &mut rng).unwrap();
        let x0_hat = net
            .predict_x0(ndarray::Array2::from_shape_vec((1, 2), pair.x_t()).unwrap().view(), &[0.6], &[0.6], &[pair.cond])
            .unwrap();
        let expect = pair_weight(0.6, 1e-3) * data_loss(x0_hat.row(0).as_slice().unwrap(), &pair.x0);
        assert!((loss.total - expect).abs() < 1e-12);

        let two = PairBatch::from_pairs(&[pair.clone(), pair]).unwrap();
        let loss2 = total_loss(&net, &ema, &two, Stage::ClassifierOnly, &cfg, 1e-3, &mut rng).unwrap();
        assert!((loss2.total - loss.total).abs() < 1e-12);

        let empty = PairBatch {
            x0: Array2::zeros((0, 2)),
            eps: Array2::zeros((0, 2)),
            t: vec![],
            s: vec![],
            cond: vec![],
        };
        assert!(total_loss(&net, &ema, &empty, Stage::ClassifierOnly, &cfg, 1e-3, &mut rng).is_err());
    }

    #[test]
    fn total_loss_matches_per_pair_resummation() {
        let net = small_net(3, false);
        let mut ema = net.clone();
        ema.params_mut().iter_mut().for_each(|p| *p *= 0.9);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let batch = random_batch(&mut rng, 24);
        for renorm in [true, false] {
            for stage in [Stage::ClassifierOnly, Stage::AuxMixed] {
                let cfg = ObjectiveConfig { renorm_enabled: renorm, ..Default::default() };
                let x_t = batch.x_t();
                let x0_hat = net.predict_x0(x_t.view(), &batch.t, &batch.s, &batch.cond).unwrap();
                let views = TargetViews { live: &net, ema: &ema };
                let targets =
                    prepare_targets(&views, &batch, &x0_hat, stage, &cfg, 1e-3, &mut ChaCha8Rng::seed_from_u64(9))
                        .unwrap();
                let got = evaluate(&net, &batch, &targets, &cfg, None).unwrap();

                // Re-derive the pseudo-targets one pair at a time with the same
                // noise stream and re-sum with the scalar pair loss.
                let mut rng2 = ChaCha8Rng::seed_from_u64(9);
                let self_rows: Vec<usize> = (0..batch.len())
                    .filter(|&i| batch.s[i] < batch.t[i] && batch.cond[i] != ConditionToken::Null)
                    .collect();
                let sub = x0_hat.select(Axis(0), &self_rows);
                let sub_s: Vec<f64> = self_rows.iter().map(|&i| batch.s[i]).collect();
                let sub_c: Vec<_> = self_rows.iter().map(|&i| batch.cond[i]).collect();
                let pt = match stage {
                    Stage::AuxMixed => {
                        pseudo_target_aux(&ema, &net, &net, sub.view(), &sub_s, &sub_c, cfg.k(), &mut rng2).unwrap()
                    }
                    _ => pseudo_target_classifier(&ema, &net, sub.view(), &sub_s, &sub_c, &mut rng2).unwrap(),
                };
                let mut sum = 0.0;
                for i in 0..batch.len() {
                    let xh = x0_hat.row(i).to_vec();
                    let x0 = batch.x0.row(i).to_vec();
                    let w = pair_weight(batch.t[i], 1e-3);
                    let l = match self_rows.iter().position(|&r| r == i) {
                        Some(j) => {
                            let lam = lambda_weight(batch.s[i], batch.t[i], cfg.lambda_cap);
                            pair_loss(&xh, &x0, pt.x_self.row(j).as_slice().unwrap(), lam, renorm)
                        }
                        None => data_loss(&xh, &x0),
                    };
                    sum += w * l;
                }
                let mut expect = sum / batch.len() as f64;
                if stage == Stage::AuxMixed {
                    let fakes: Vec<_> = sub_c.iter().map(|c| ConditionToken::Fake(c.class_id().unwrap())).collect();
                    expect += fake_branch_loss(&net, pt.x_s.view(), &sub_s, &fakes, sub.view()).unwrap();
                }
                assert!((got.total - expect).abs() < 1e-10 * expect.abs().max(1.0), "{got:?} vs {expect}");
            }
        }
    }

    #[test]
    fn fake_branch_loss_values() {
        let net = small_net(8, true);
        let x_s = ndarray::array![[0.2, 0.4], [-1.0, 0.5]];
        let s = [0.3, 0.6];
        let fakes = [ConditionToken::Fake(0), ConditionToken::Fake(2)];
        // Zero-init output: G(x_s) = x_s.
        assert_eq!(fake_branch_loss(&net, x_s.view(), &s, &fakes, x_s.view()).unwrap(), 0.0);

        let net = small_net(8, false);
        let x0 = ndarray::array![[1.0, 0.0], [0.0, -2.0]];
        let g = net.predict_x0(x_s.view(), &s, &s, &fakes).unwrap();
        let mut brute = 0.0;
        for r in 0..2 {
            for k in 0..2 {
                brute += (g[[r, k]] - x0[[r, k]]).powi(2);
            }
        }
        brute /= 2.0;
        let got = fake_branch_loss(&net, x_s.view(), &s, &fakes, x0.view()).unwrap();
        assert!((got - brute).abs() < 1e-12);
    }

    #[test]
    fn data_only_stage_has_no_lambda() {
        let net = small_net(2, false);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let batch = random_batch(&mut rng, 16);
        let x0_hat = net.predict_x0(batch.x_t().view(), &batch.t, &batch.s, &batch.cond).unwrap();
        let views = TargetViews { live: &net, ema: &net };
        let t = prepare_targets(&views, &batch, &x0_hat, Stage::DataOnly, &ObjectiveConfig::default(), 1e-3, &mut rng)
            .unwrap();
        assert!(t.lambda.iter().all(|&l| l == 0.0));
        assert_eq!(t.main, batch.x0);
        assert!(t.fake.is_none());
    }

    #[test]
    fn gradients_match_finite_differences() {
        let net = small_net(11, false);
        let ema = net.clone();
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let batch = random_batch(&mut rng, 12);
        for renorm in [true, false] {
            let cfg = ObjectiveConfig { renorm_enabled: renorm, fake_loss_weight: 0.7, ..Default::default() };
            let x0_hat = net.predict_x0(batch.x_t().view(), &batch.t, &batch.s, &batch.cond).unwrap();
            let views = TargetViews { live: &net, ema: &ema };
            let targets = prepare_targets(&views, &batch, &x0_hat, Stage::AuxMixed, &cfg, 1e-3, &mut rng).unwrap();
            let mut grads = vec![0.0; net.num_params()];
            evaluate(&net, &batch, &targets, &cfg, Some(&mut grads)).unwrap();

            let mut probe = net.clone();
            let h = 1e-6;
            for idx in (0..net.num_params()).step_by(37) {
                let base = probe.params()[idx];
                probe.params_mut()[idx] = base + h;
                let up = evaluate(&probe, &batch, &targets, &cfg, None).unwrap().total;
                probe.params_mut()[idx] = base - h;
                let down = evaluate(&probe, &batch, &targets, &cfg, None).unwrap().total;
                probe.params_mut()[idx] = base;
                let fd = (up - down) / (2.0 * h);
                assert!((fd - grads[idx]).abs() <= 1e-5 * (1.0 + fd.abs()), "param {idx}: fd {fd} vs {}", grads[idx]);
            }
        }
    }

    proptest::proptest! {
        #[test]
        fn renorm_preserves_norm(
            x0 in proptest::collection::vec(-5.0f64..5.0, 2),
            xs in proptest::collection::vec(-5.0f64..5.0, 2),
            lam in 0.0f64..20.0,
        ) {
            let mixed: f64 = x0.iter().zip(&xs).map(|(a, b)| (a + lam * b).powi(2)).sum::<f64>().sqrt();
            proptest::prop_assume!(mixed > 1e-6);
            let r = renorm_target(&x0, &xs, lam);
            let n0 = x0.iter().map(|v| v * v).sum::<f64>().sqrt();
            let nr = r.iter().map(|v| v * v).sum::<f64>().sqrt();
            proptest::prop_assert!((nr - n0).abs() <= 1e-6 * n0.max(1e-12));
        }

        #[test]
        fn lambda_nonnegative(t in 0.0f64..0.999, frac in 0.0f64..=1.0) {
            let s = t * frac;
            proptest::prop_assert!(lambda_weight(s, t, 20.0) >= 0.0);
        }
    }
}
