//! Optimizer, learning-rate and stage schedules, and the training loop.

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::backbone::{x0_from_velocity, ConditionToken, EmaShadow, Network};
use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::objective::{evaluate_with, prepare_targets, LossBreakdown, ObjectiveConfig, PairBatch, Stage, TargetViews};
use crate::schedule::{sample_s, sample_t, ScheduleSpec};

/// Bias-corrected Adam state.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub step: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl OptimizerState {
    pub fn new(n_params: usize) -> Self {
        Self {
            m: vec![0.0; n_params],
            v: vec![0.0; n_params],
            step: 0,
            beta1: 0.9,
            beta2: 0.95,
            eps: 1e-8,
        }
    }

    pub fn adam_step(&mut self, params: &mut [f64], grads: &[f64], lr: f64) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(Error::Shape(format!(
                "adam state has {} slots, got {} params and {} grads",
                self.m.len(),
                params.len(),
                grads.len()
            )));
        }
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        for i in 0..params.len() {
            let g = grads[i];
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g;
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g;
            let m_hat = self.m[i] / bc1;
            let v_hat = self.v[i] / bc2;
            params[i] -= lr * m_hat / (v_hat.sqrt() + self.eps);
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainMode {
    SelfE,
    FlowMatchingBaseline,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainPlan {
    pub total_iters: u64,
    pub warmup_iters: u64,
    pub lr_start: f64,
    pub lr_end: f64,
    pub aux_start_frac: f64,
    pub batch_size: usize,
    pub mode: TrainMode,
    pub ema_decay: f64,
    /// Probability of replacing a class label with the null token.
    pub cond_dropout: f64,
    /// Global-norm gradient clip; `None` disables clipping.
    pub grad_clip: Option<f64>,
    pub checkpoint_every: u64,
    pub log_every: u64,
}

impl Default for TrainPlan {
    fn default() -> Self {
        Self {
            total_iters: 20_000,
            warmup_iters: 500,
            lr_start: 3e-4,
            lr_end: 1e-5,
            aux_start_frac: 0.77,
            batch_size: 256,
            mode: TrainMode::SelfE,
            ema_decay: 0.999,
            cond_dropout: 0.1,
            grad_clip: None,
            checkpoint_every: 2_000,
            log_every: 50,
        }
    }
}

impl TrainPlan {
    pub fn validate(&self) -> Result<()> {
        if self.total_iters == 0 {
            return Err(Error::config("train.total_iters", "must be >= 1"));
        }
        if self.warmup_iters >= self.total_iters {
            return Err(Error::config("train.warmup_iters", "must be smaller than total_iters"));
        }
        if !(self.lr_end > 0.0 && self.lr_start >= self.lr_end && self.lr_start.is_finite()) {
            return Err(Error::config("train.lr_start", "need lr_start >= lr_end > 0"));
        }
        if !(0.0..=1.0).contains(&self.aux_start_frac) {
            return Err(Error::config("train.aux_start_frac", "must lie in [0, 1]"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("train.batch_size", "must be >= 1"));
        }
        if !(0.0..1.0).contains(&self.ema_decay) {
            return Err(Error::config("train.ema_decay", "must lie in [0, 1)"));
        }
        if !(0.0..1.0).contains(&self.cond_dropout) {
            return Err(Error::config("train.cond_dropout", "must lie in [0, 1)"));
        }
        if let Some(c) = self.grad_clip {
            if !(c > 0.0 && c.is_finite()) {
                return Err(Error::config("train.grad_clip", "must be finite and > 0"));
            }
        }
        if self.checkpoint_every == 0 || self.log_every == 0 {
            return Err(Error::config("train.checkpoint_every", "intervals must be >= 1"));
        }
        Ok(())
    }

    /// First iteration of the aux-mixed stage.
    pub fn aux_start_iter(&self) -> u64 {
        (self.aux_start_frac * self.total_iters as f64).round() as u64
    }
}

/// Linear warmup from 0 to `lr_start`, then linear decay to `lr_end` at `total_iters`.
pub fn lr_at(iter: u64, plan: &TrainPlan) -> f64 {
    let iter = iter.min(plan.total_iters);
    if iter < plan.warmup_iters {
        return plan.lr_start * iter as f64 / plan.warmup_iters as f64;
    }
    let span = (plan.total_iters - plan.warmup_iters) as f64;
    let frac = (iter - plan.warmup_iters) as f64 / span;
    plan.lr_start + frac * (plan.lr_end - plan.lr_start)
}

/// Loss terms active at `iter`.
pub fn stage_at(iter: u64, plan: &TrainPlan, obj: &ObjectiveConfig) -> Stage {
    match plan.mode {
        TrainMode::FlowMatchingBaseline => Stage::DataOnly,
        TrainMode::SelfE if obj.aux_enabled && iter >= plan.aux_start_iter() => Stage::AuxMixed,
        TrainMode::SelfE => Stage::ClassifierOnly,
    }
}

/// Draws a training batch for iteration `iter`.
pub fn draw_batch<R: Rng + ?Sized>(
    data: &Dataset,
    plan: &TrainPlan,
    sched: &ScheduleSpec,
    iter: u64,
    rng: &mut R,
) -> Result<PairBatch> {
    let n = plan.batch_size;
    let (x0, labels) = data.sample_labeled(rng, n)?;
    let eps = Array2::from_shape_simple_fn(x0.raw_dim(), || rng.sample(StandardNormal));
    let mut t = Vec::with_capacity(n);
    let mut s = Vec::with_capacity(n);
    let mut cond = Vec::with_capacity(n);
    for &c in &labels {
        let ti = sample_t(rng, sched);
        let si = match plan.mode {
            TrainMode::FlowMatchingBaseline => ti,
            TrainMode::SelfE => sample_s(rng, ti, iter, sched),
        };
        t.push(ti);
        s.push(si);
        cond.push(if rng.gen::<f64>() < plan.cond_dropout {
            ConditionToken::Null
        } else {
            ConditionToken::Class(c)
        });
    }
    Ok(PairBatch { x0, eps, t, s, cond })
}

/// Loss and exact parameter gradients for one batch.
#[allow(clippy::too_many_arguments)]
pub fn gradients<R: Rng + ?Sized>(
    net: &Network,
    ema: &Network,
    batch: &PairBatch,
    stage: Stage,
    obj: &ObjectiveConfig,
    t_min: f64,
    rng: &mut R,
) -> Result<(LossBreakdown, Vec<f64>)> {
    batch.validate()?;
    let x_t = batch.x_t();
    let (v, cache) = net.forward_cached(x_t.view(), &batch.t, &batch.s, &batch.cond)?;
    let x0_hat = x0_from_velocity(x_t.view(), &batch.t, &v);
    let views = TargetViews { live: net, ema };
    let targets = prepare_targets(&views, batch, &x0_hat, stage, obj, t_min, rng)?;
    let mut grads = vec![0.0; net.num_params()];
    let loss = evaluate_with(net, batch, &targets, obj, Some((v, cache)), Some(&mut grads))?;
    Ok((loss, grads))
}

/// Scales `grads` in place to global norm at most `max_norm`; returns the pre-clip norm.
pub fn clip_global_norm(grads: &mut [f64], max_norm: Option<f64>) -> f64 {
    let norm = grads.iter().map(|g| g * g).sum::<f64>().sqrt();
    if let Some(c) = max_norm {
        if norm > c {
            let k = c / norm;
            grads.iter_mut().for_each(|g| *g *= k);
        }
    }
    norm
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IterMetrics {
    pub iter: u64,
    pub lr: f64,
    pub stage: Stage,
    pub loss: LossBreakdown,
    pub grad_norm: f64,
}

/// Everything the trainer owns between iterations.
#[derive(Debug, Clone)]
pub struct TrainState {
    pub net: Network,
    pub ema: EmaShadow,
    pub opt: OptimizerState,
    /// Number of completed iterations.
    pub iter: u64,
}

impl TrainState {
    pub fn new(net: Network, ema_decay: f64) -> Result<Self> {
        let ema = EmaShadow::new(&net, ema_decay)?;
        let opt = OptimizerState::new(net.num_params());
        Ok(Self { net, ema, opt, iter: 0 })
    }
}

/// Receives metrics and checkpoint events from [`train`].
pub trait TrainObserver {
    fn on_metrics(&mut self, _m: &IterMetrics) -> Result<()> {
        Ok(())
    }

    fn on_checkpoint(&mut self, _state: &TrainState) -> Result<()> {
        Ok(())
    }
}

impl TrainObserver for () {}

/// Collects every emitted metrics row in memory.
#[derive(Debug, Default)]
pub struct MetricsLog {
    pub rows: Vec<IterMetrics>,
}

impl TrainObserver for MetricsLog {
    fn on_metrics(&mut self, m: &IterMetrics) -> Result<()> {
        self.rows.push(*m);
        Ok(())
    }
}

/// Per-run random stream; batch sampling and target noise share it so a run
/// is a pure function of its seed.
pub fn run_rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_0f_7a1e)
}

/// Runs `plan.total_iters - state.iter` iterations.
///
/// A non-finite loss or gradient stops training: the observer receives a
/// checkpoint of the last finite state and [`Error::Diverged`] is returned.
pub fn train<O: TrainObserver + ?Sized>(
    state: &mut TrainState,
    plan: &TrainPlan,
    obj: &ObjectiveConfig,
    sched: &ScheduleSpec,
    data: &Dataset,
    rng: &mut ChaCha8Rng,
    observer: &mut O,
) -> Result<()> {
    plan.validate()?;
    obj.validate()?;
    sched.validate()?;
    if data.dim() != state.net.spec().dim || data.n_classes() != state.net.spec().n_classes {
        return Err(Error::Shape("dataset and network disagree on dim or class count".into()));
    }
    while state.iter < plan.total_iters {
        let iter = state.iter;
        let stage = stage_at(iter, plan, obj);
        let batch = draw_batch(data, plan, sched, iter, rng)?;
        let step = gradients(&state.net, state.ema.network(), &batch, stage, obj, sched.t_min, rng);
        let (loss, mut grads) = match step {
            Ok(v) => v,
            Err(Error::NonFinite(reason)) => return diverge(state, observer, iter, reason),
            Err(e) => return Err(e),
        };
        let grad_norm = clip_global_norm(&mut grads, plan.grad_clip);
        if !grad_norm.is_finite() {
            return diverge(state, observer, iter, format!("gradient norm {grad_norm}"));
        }
        let lr = lr_at(iter, plan);
        state.opt.adam_step(state.net.params_mut(), &grads, lr)?;
        state.ema.update(&state.net)?;
        state.iter += 1;

        if state.iter % plan.log_every == 0 || state.iter == plan.total_iters {
            observer.on_metrics(&IterMetrics {
                iter: state.iter,
                lr,
                stage,
                loss,
                grad_norm,
            })?;
        }
        if state.iter % plan.checkpoint_every == 0 || state.iter == plan.total_iters {
            observer.on_checkpoint(state)?;
        }
    }
    Ok(())
}

fn diverge<O: TrainObserver + ?Sized>(state: &TrainState, observer: &mut O, iter: u64, reason: String) -> Result<()> {
    observer.on_checkpoint(state)?;
    Err(Error::Diverged { iter, reason })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::NetSpec;
    use crate::dataset::DatasetSpec;
    use crate::objective::data_loss;
    use crate::schedule::pair_weight;

    fn tiny_net(seed: u64) -> Network {
        Network::new(
            NetSpec {
                width: 16,
                depth: 2,
                cond_dim: 4,
                n_freqs: 4,
                n_classes: 4,
                zero_init_output: false,
                ..NetSpec::default()
            },
            seed,
        )
        .unwrap()
    }

    fn short_plan(mode: TrainMode) -> TrainPlan {
        TrainPlan {
            total_iters: 60,
            warmup_iters: 10,
            batch_size: 32,
            mode,
            checkpoint_every: 20,
            log_every: 5,
            aux_start_frac: 0.5,
            ..TrainPlan::default()
        }
    }

    #[test]
    fn lr_schedule_points() {
        let plan = TrainPlan::default();
        assert_eq!(lr_at(0, &plan), 0.0);
        assert!((lr_at(500, &plan) - 3e-4).abs() < 1e-18);
        assert!((lr_at(20_000, &plan) - 1e-5).abs() < 1e-18);
        assert!((lr_at(250, &plan) - 1.5e-4).abs() < 1e-18);
        let mut prev = lr_at(500, &plan);
        for i in (600..=20_000).step_by(100) {
            let lr = lr_at(i, &plan);
            assert!(lr < prev);
            prev = lr;
        }
    }

    #[test]
    fn adam_zero_gradient_is_noop() {
        let mut opt = OptimizerState::new(3);
        let mut p = vec![1.0, -2.0, 0.5];
        opt.adam_step(&mut p, &[0.0; 3], 1e-3).unwrap();
        assert_eq!(p, vec![1.0, -2.0, 0.5]);
        assert_eq!(opt.step, 1);
        assert!(opt.adam_step(&mut p, &[0.0; 2], 1e-3).is_err());
    }

    #[test]
    fn adam_first_step_by_hand() {
        let mut opt = OptimizerState::new(3);
        let mut p = vec![0.0; 3];
        let g = [0.5, -2.0, 1e-3];
        opt.adam_step(&mut p, &g, 0.1).unwrap();
        // m_hat = g, v_hat = g^2, so the step is lr * g / (|g| + eps).
        for (pi, gi) in p.iter().zip(g) {
            let expect = -0.1 * gi / (gi.abs() + 1e-8);
            assert!((pi - expect).abs() < 1e-15);
        }
    }

    #[test]
    fn adam_second_step_by_hand() {
        let mut opt = OptimizerState::new(1);
        let mut p = vec![0.0];
        opt.adam_step(&mut p, &[1.0], 0.01).unwrap();
        opt.adam_step(&mut p, &[-1.0], 0.01).unwrap();
        let m = 0.9 * 0.1 - 0.1;
        let v = 0.95 * 0.05 + 0.05;
        let m_hat = m / (1.0 - 0.81);
        let v_hat = v / (1.0 - 0.9025);
        let expect = -0.01 / (1.0 + 1e-8) - 0.01 * m_hat / (f64::sqrt(v_hat) + 1e-8);
        assert!((p[0] - expect).abs() < 1e-15);
    }

    #[test]
    fn adam_is_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let stream: Vec<Vec<f64>> = (0..100).map(|_| (0..8).map(|_| rng.gen_range(-1.0..1.0)).collect()).collect();
        let run = || {
            let mut opt = OptimizerState::new(8);
            let mut p = vec![0.1; 8];
            for g in &stream {
                opt.adam_step(&mut p, g, 1e-3).unwrap();
            }
            p
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn stages() {
        let plan = TrainPlan::default();
        let obj = ObjectiveConfig::default();
        assert_eq!(plan.aux_start_iter(), 15_400);
        assert_eq!(stage_at(0, &plan, &obj), Stage::ClassifierOnly);
        assert_eq!(stage_at(15_399, &plan, &obj), Stage::ClassifierOnly);
        assert_eq!(stage_at(15_400, &plan, &obj), Stage::AuxMixed);
        let off = ObjectiveConfig { aux_enabled: false, ..obj };
        assert_eq!(stage_at(19_999, &plan, &off), Stage::ClassifierOnly);
        let fm = TrainPlan { mode: TrainMode::FlowMatchingBaseline, ..plan };
        assert_eq!(stage_at(19_999, &fm, &obj), Stage::DataOnly);
        let never = TrainPlan { aux_start_frac: 1.0, ..plan };
        assert_eq!(stage_at(19_999, &never, &obj), Stage::ClassifierOnly);
    }

    #[test]
    fn clipping() {
        let mut g = vec![3.0, 4.0];
        assert_eq!(clip_global_norm(&mut g, None), 5.0);
        assert_eq!(g, vec![3.0, 4.0]);
        assert_eq!(clip_global_norm(&mut g, Some(1.0)), 5.0);
        assert!((g[0] - 0.6).abs() < 1e-15 && (g[1] - 0.8).abs() < 1e-15);
    }

    #[test]
    fn baseline_loss_is_cfm() {
        let data = Dataset::from_spec(&DatasetSpec::default()).unwrap();
        let net = tiny_net(1);
        let plan = short_plan(TrainMode::FlowMatchingBaseline);
        let sched = ScheduleSpec::default();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let batch = draw_batch(&data, &plan, &sched, 0, &mut rng).unwrap();
        assert_eq!(batch.s, batch.t);
        let (loss, _) = gradients(&net, &net, &batch, Stage::DataOnly, &ObjectiveConfig::default(), 1e-3, &mut rng)
            .unwrap();
        let v = net.forward(batch.x_t().view(), &batch.t, &batch.s, &batch.cond).unwrap();
        let mut expect = 0.0;
        for i in 0..batch.len() {
            // x0-form flow matching: || x_t - t V - x0 ||^2 weighted by 1/t^2.
            let x0_hat: Vec<f64> = (0..2).map(|k| batch.x_t()[[i, k]] - batch.t[i] * v[[i, k]]).collect();
            expect += pair_weight(batch.t[i], 1e-3) * data_loss(&x0_hat, batch.x0.row(i).as_slice().unwrap());
        }
        expect /= batch.len() as f64;
        assert!((loss.total - expect).abs() < 1e-10 * expect.max(1.0));
        assert_eq!(loss.lambda_max, 0.0);
    }

    #[test]
    fn gradients_never_touch_ema() {
        let data = Dataset::from_spec(&DatasetSpec::default()).unwrap();
        let net = tiny_net(3);
        let ema = tiny_net(4);
        let before = ema.params().to_vec();
        let plan = short_plan(TrainMode::SelfE);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let batch = draw_batch(&data, &plan, &ScheduleSpec::default(), 10_000, &mut rng).unwrap();
        let (_, grads) =
            gradients(&net, &ema, &batch, Stage::AuxMixed, &ObjectiveConfig::default(), 1e-3, &mut rng).unwrap();
        assert_eq!(grads.len(), net.num_params());
        assert_eq!(ema.params(), &before[..]);
    }

    struct Recorder {
        metrics: Vec<IterMetrics>,
        checkpoints: Vec<u64>,
    }

    impl TrainObserver for Recorder {
        fn on_metrics(&mut self, m: &IterMetrics) -> Result<()> {
            self.metrics.push(*m);
            Ok(())
        }
        fn on_checkpoint(&mut self, s: &TrainState) -> Result<()> {
            self.checkpoints.push(s.iter);
            Ok(())
        }
    }

    fn short_run(mode: TrainMode, seed: u64) -> (TrainState, Recorder) {
        let data = Dataset::from_spec(&DatasetSpec::default()).unwrap();
        let plan = short_plan(mode);
        let mut state = TrainState::new(tiny_net(seed), plan.ema_decay).unwrap();
        let mut rec = Recorder { metrics: vec![], checkpoints: vec![] };
        train(
            &mut state,
            &plan,
            &ObjectiveConfig::default(),
            &ScheduleSpec::default(),
            &data,
            &mut run_rng(seed),
            &mut rec,
        )
        .unwrap();
        (state, rec)
    }

    #[test]
    fn training_loop_emits_and_is_deterministic() {
        let (a, rec) = short_run(TrainMode::SelfE, 7);
        assert_eq!(a.iter, 60);
        assert_eq!(rec.checkpoints, vec![20, 40, 60]);
        assert_eq!(rec.metrics.len(), 12);
        assert!(rec.metrics.iter().any(|m| m.stage == Stage::AuxMixed));
        assert!(rec.metrics.iter().any(|m| m.loss.lambda_max > 0.0));
        let (b, _) = short_run(TrainMode::SelfE, 7);
        assert_eq!(a.net.params(), b.net.params());
        assert_eq!(a.ema.network().params(), b.ema.network().params());
    }

    #[test]
    fn baseline_run_records_zero_lambda() {
        let (_, rec) = short_run(TrainMode::FlowMatchingBaseline, 8);
        assert!(rec.metrics.iter().all(|m| m.loss.lambda_max == 0.0 && m.loss.fake == 0.0));
    }

    #[test]
    fn divergence_checkpoints_and_aborts() {
        let data = Dataset::from_spec(&DatasetSpec::default()).unwrap();
        let plan = short_plan(TrainMode::SelfE);
        let mut net = tiny_net(9);
        let out = net.tensor_range("out.weight").unwrap();
        net.params_mut()[out].iter_mut().for_each(|p| *p = f64::MAX);
        let mut state = TrainState::new(net, plan.ema_decay).unwrap();
        let mut rec = Recorder { metrics: vec![], checkpoints: vec![] };
        let err = train(
            &mut state,
            &plan,
            &ObjectiveConfig::default(),
            &ScheduleSpec::default(),
            &data,
            &mut run_rng(0),
            &mut rec,
        )
        .unwrap_err();
        assert!(matches!(err, Error::Diverged { iter: 0, .. }), "{err}");
        assert_eq!(rec.checkpoints, vec![0]);
    }

    #[test]
    fn plan_validation() {
        assert!(TrainPlan::default().validate().is_ok());
        assert!(TrainPlan { warmup_iters: 20_000, ..Default::default() }.validate().is_err());
        assert!(TrainPlan { lr_end: 1e-3, ..Default::default() }.validate().is_err());
        assert!(TrainPlan { aux_start_frac: 1.5, ..Default::default() }.validate().is_err());
        assert!(TrainPlan { grad_clip: Some(-1.0), ..Default::default() }.validate().is_err());
    }
}
