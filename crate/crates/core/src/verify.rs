//! Self-contained property suite behind `anystep verify`.
//!
//! Each property reports a measured error and the threshold it must not
//! exceed. The lambda formula is injectable so a broken variant can be run
//! through the same suite.

use std::fmt;

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::backbone::{ConditionToken, NetSpec, Network};
use crate::error::Result;
use crate::evalsuite::{hungarian, wasserstein2};
use crate::objective::{
    evaluate, lambda_weight, pair_loss, prepare_targets, renorm_target, ObjectiveConfig, PairBatch, Stage,
    TargetViews, TrainingPair,
};
use crate::oracle::{probe_grid, verify_result1, verify_result2, GmmCond, OracleDenoiser};
use crate::sampler::ddim_step;
use crate::schedule::inference_grid;

/// `(s, t, cap) -> lambda`.
pub type LambdaFn = fn(f64, f64, f64) -> f64;

#[derive(Debug, Clone, Copy)]
pub struct VerifyOptions {
    pub lambda: LambdaFn,
    /// Parameters checked per gradient property; `None` checks all of them.
    pub grad_coords: Option<usize>,
    pub seed: u64,
}

impl Default for VerifyOptions {
    fn default() -> Self {
        Self {
            lambda: lambda_weight,
            grad_coords: None,
            seed: 7,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PropertyResult {
    pub name: &'static str,
    pub error: f64,
    pub threshold: f64,
    pub pass: bool,
    pub detail: String,
}

impl PropertyResult {
    fn new(name: &'static str, error: f64, threshold: f64, detail: String) -> Self {
        Self {
            name,
            error,
            threshold,
            pass: error <= threshold,
            detail,
        }
    }

    fn failed(name: &'static str, threshold: f64, e: crate::Error) -> Self {
        Self {
            name,
            error: f64::INFINITY,
            threshold,
            pass: false,
            detail: format!("error: {e}"),
        }
    }
}

impl fmt::Display for PropertyResult {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{} {:<28} err {:>10.3e} <= {:<8.1e} {}",
            if self.pass { "PASS" } else { "FAIL" },
            self.name,
            self.error,
            self.threshold,
            self.detail
        )
    }
}

fn rel(a: &[f64], b: &[f64]) -> f64 {
    let d: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let n: f64 = b.iter().map(|y| y * y).sum::<f64>().sqrt();
    d / n.max(1.0)
}

fn check(name: &'static str, threshold: f64, f: impl FnOnce() -> Result<(f64, String)>) -> PropertyResult {
    match f() {
        Ok((err, detail)) => PropertyResult::new(name, err, threshold, detail),
        Err(e) => PropertyResult::failed(name, threshold, e),
    }
}

/// Score to posterior mean and back, against the component-wise posterior.
fn tweedie_round_trip(seed: u64) -> Result<(f64, String)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    let mut count = 0;
    for _ in 0..20 {
        let dim = rng.gen_range(1..=3);
        let g = GmmCond::random(&mut rng, dim, 3, 3);
        for _ in 0..25 {
            let t = rng.gen_range(0.05..0.95);
            let x: Vec<f64> = (0..dim).map(|_| rng.gen_range(-4.0..4.0)).collect();
            let cond = if rng.gen_bool(0.3) {
                ConditionToken::Null
            } else {
                ConditionToken::Class(rng.gen_range(0..3))
            };
            let score = g.score(&x, t, cond)?;
            let tweedie = g.posterior_mean(&x, t, cond)?;
            let direct = g.posterior_mean_direct(&x, t, cond)?;
            let back = GmmCond::score_from_mean(&x, &direct, t)?;
            worst = worst.max(rel(&tweedie, &direct)).max(rel(&back, &score));
            count += 1;
        }
    }
    Ok((worst, format!("{count} points on 20 random mixtures")))
}

fn identity_grid() -> [(f64, f64); 4] {
    [(0.9, 0.5), (0.9, 0.1), (0.5, 0.5), (0.5, 0.1)]
}

fn result1(seed: u64, dim: usize) -> Result<(f64, String)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data = if dim == 1 {
        GmmCond::two_class_1d()
    } else {
        GmmCond::ring(4, 2.0, 0.4, 0.3)
    };
    let oracle = OracleDenoiser::new(&data);
    let probes = probe_grid(dim, 64, 3.0);
    let mut worst: f64 = 0.0;
    for (t, s) in identity_grid() {
        for class in 0..data.n_classes() as u16 {
            worst = worst.max(verify_result1(&oracle, class, &probes, t, s, &mut rng)?);
        }
    }
    Ok((worst, format!("{} probes x 4 (t,s) x {} classes", probes.len(), data.n_classes())))
}

fn result2(seed: u64) -> Result<(f64, String)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    for dim in [1, 2] {
        let data = GmmCond::random(&mut rng, dim, 2, 2);
        let model = GmmCond::random(&mut rng, dim, 2, 3);
        let oracle = OracleDenoiser::with_model(&data, &model);
        let probes = probe_grid(dim, 64, 3.0);
        for k in [0.0, 0.9, 1.0] {
            for (t, s) in identity_grid() {
                for class in 0..2 {
                    worst = worst.max(verify_result2(&oracle, class, &probes, t, s, k, &mut rng)?);
                }
            }
        }
    }
    Ok((worst, "k in {0, 0.9, 1}, 1-D and 2-D".into()))
}

fn grad_batch(rng: &mut ChaCha8Rng, n: usize) -> Result<PairBatch> {
    let pairs: Vec<TrainingPair> = (0..n)
        .map(|i| {
            let t: f64 = rng.gen_range(0.05..0.95);
            let s = if i % 4 == 0 { t } else { rng.gen_range(0.0..t) };
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
    PairBatch::from_pairs(&pairs)
}

/// Largest per-coordinate relative gap between analytic and central-difference
/// gradients of the full loss.
pub fn gradient_check(stage: Stage, renorm: bool, coords: Option<usize>, seed: u64) -> Result<(f64, String)> {
    let spec = NetSpec {
        dim: 2,
        n_classes: 4,
        width: 32,
        depth: 3,
        zero_init_output: false,
        ..NetSpec::default()
    };
    let net = Network::new(spec.clone(), seed)?;
    let ema = Network::new(spec, seed + 1)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let batch = grad_batch(&mut rng, 16)?;
    let cfg = ObjectiveConfig {
        renorm_enabled: renorm,
        fake_loss_weight: 0.7,
        ..Default::default()
    };
    let x0_hat = net.predict_x0(batch.x_t().view(), &batch.t, &batch.s, &batch.cond)?;
    let views = TargetViews { live: &net, ema: &ema };
    let targets = prepare_targets(&views, &batch, &x0_hat, stage, &cfg, 1e-3, &mut rng)?;
    let mut grads = vec![0.0; net.num_params()];
    evaluate(&net, &batch, &targets, &cfg, Some(&mut grads))?;

    let n = net.num_params();
    let step = coords.map_or(1, |c| (n / c.max(1)).max(1));
    let mut probe = net.clone();
    let h = 1e-6;
    let mut worst: f64 = 0.0;
    let mut checked = 0;
    for idx in (0..n).step_by(step) {
        let base = probe.params()[idx];
        probe.params_mut()[idx] = base + h;
        let up = evaluate(&probe, &batch, &targets, &cfg, None)?.total;
        probe.params_mut()[idx] = base - h;
        let down = evaluate(&probe, &batch, &targets, &cfg, None)?.total;
        probe.params_mut()[idx] = base;
        let fd = (up - down) / (2.0 * h);
        let denom = grads[idx].abs().max(fd.abs()).max(1e-3);
        worst = worst.max((grads[idx] - fd).abs() / denom);
        checked += 1;
    }
    Ok((worst, format!("{checked}/{n} params")))
}

/// Deterministic Euler step `x + (t' - t) V` against DDIM with `eta = 0`.
fn ddim_euler(seed: u64) -> Result<(f64, String)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..1000 {
        let t: f64 = rng.gen_range(0.01..1.0);
        let t_next: f64 = rng.gen_range(0.0..t);
        let x: Vec<f64> = (0..2).map(|_| rng.gen_range(-3.0..3.0)).collect();
        let v: Vec<f64> = (0..2).map(|_| rng.gen_range(-3.0..3.0)).collect();
        let x0: Vec<f64> = x.iter().zip(&v).map(|(a, b)| a - t * b).collect();
        let euler: Vec<f64> = x.iter().zip(&v).map(|(a, b)| a + (t_next - t) * b).collect();
        let xa = Array2::from_shape_vec((1, 2), x).expect("shape");
        let xb = Array2::from_shape_vec((1, 2), x0).expect("shape");
        let out = ddim_step(xa.view(), xb.view(), t, t_next, 0.0, &mut rng)?;
        let scale = euler.iter().map(|e| e.abs()).fold(1.0, f64::max);
        for (o, e) in out.iter().zip(&euler) {
            worst = worst.max((o - e).abs() / scale);
        }
    }
    Ok((worst, "1000 random (x, V, t, t')".into()))
}

fn ddim_endpoint(seed: u64) -> Result<(f64, String)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    for eta in [0.0, 0.5, 1.0] {
        for _ in 0..100 {
            let t: f64 = rng.gen_range(0.01..1.0);
            let x = Array2::from_shape_fn((3, 2), |_| rng.gen_range(-3.0..3.0));
            let x0 = Array2::from_shape_fn((3, 2), |_| rng.gen_range(-3.0..3.0));
            let out = ddim_step(x.view(), x0.view(), t, 0.0, eta, &mut rng)?;
            worst = worst.max((&out - &x0).iter().fold(0.0, |m: f64, v| m.max(v.abs())));
        }
    }
    Ok((worst, "t' = 0 for eta in {0, 0.5, 1}".into()))
}

fn renorm_norm(seed: u64) -> Result<(f64, String)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..10_000 {
        let dim = rng.gen_range(1..=4);
        let x0: Vec<f64> = (0..dim).map(|_| rng.gen_range(-5.0..5.0)).collect();
        let xs: Vec<f64> = (0..dim).map(|_| rng.gen_range(-5.0..5.0)).collect();
        let lam = rng.gen_range(0.0..20.0);
        let r = renorm_target(&x0, &xs, lam);
        let n0 = x0.iter().map(|v| v * v).sum::<f64>().sqrt();
        let nr = r.iter().map(|v| v * v).sum::<f64>().sqrt();
        if n0 > 0.0 {
            worst = worst.max((nr - n0).abs() / n0);
        }
    }
    Ok((worst, "10^4 random (x0, x_self, lambda)".into()))
}

/// Lambda against the closed form `(t - s) / ((1 - t)(1 - s))` plus its edge cases.
fn lambda_edges(lambda: LambdaFn, seed: u64) -> Result<(f64, String)> {
    let cap = 20.0;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..2000 {
        let t: f64 = rng.gen_range(0.0..0.99);
        let s: f64 = rng.gen_range(0.0..=t);
        let want = ((t - s) / ((1.0 - t) * (1.0 - s))).min(cap);
        worst = worst.max((lambda(s, t, cap) - want).abs() / want.max(1.0));
        worst = worst.max(lambda(t, t, cap).abs());
    }
    worst = worst.max((lambda(0.3, 1.0, cap) - cap).abs() / cap);
    worst = worst.max((lambda(0.0, 0.999, cap) - cap).abs() / cap);
    worst = worst.max(lambda(0.0, 0.0, cap).abs());
    Ok((worst, "closed form, s = t, t -> 1 cap".into()))
}

fn pair_loss_at_equal_times(lambda: LambdaFn, seed: u64) -> Result<(f64, String)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..1000 {
        let t: f64 = rng.gen_range(0.0..0.999);
        let lam = lambda(t, t, 20.0);
        let x0: Vec<f64> = (0..2).map(|_| rng.gen_range(-3.0..3.0)).collect();
        let hat: Vec<f64> = (0..2).map(|_| rng.gen_range(-3.0..3.0)).collect();
        let xs: Vec<f64> = (0..2).map(|_| rng.gen_range(-3.0..3.0)).collect();
        let want: f64 = hat.iter().zip(&x0).map(|(a, b)| (a - b) * (a - b)).sum();
        for renorm in [true, false] {
            worst = worst.max((pair_loss(&hat, &x0, &xs, lam, renorm) - want).abs());
        }
    }
    Ok((worst, "renorm and hybrid".into()))
}

/// Optimal coupling cost from the assignment solver against brute force.
fn assignment_optimal(seed: u64) -> Result<(f64, String)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    for n in 1..=6usize {
        for _ in 0..10 {
            let cost: Vec<f64> = (0..n * n).map(|_| rng.gen_range(0.0..10.0)).collect();
            let got: f64 = hungarian(&cost, n).iter().enumerate().map(|(i, &j)| cost[i * n + j]).sum();
            let mut perm: Vec<usize> = (0..n).collect();
            let best = brute_force(&cost, n, &mut perm, 0);
            worst = worst.max((got - best).abs() / best.max(1.0));
        }
    }
    Ok((worst, "n <= 6 against all permutations".into()))
}

fn brute_force(cost: &[f64], n: usize, perm: &mut Vec<usize>, k: usize) -> f64 {
    if k == n {
        return perm.iter().enumerate().map(|(i, &j)| cost[i * n + j]).sum();
    }
    let mut best = f64::INFINITY;
    for i in k..n {
        perm.swap(k, i);
        best = best.min(brute_force(cost, n, perm, k + 1));
        perm.swap(k, i);
    }
    best
}

/// Exact 2-D coupling of points on a line equals the sorted 1-D coupling.
fn w2_line(seed: u64) -> Result<(f64, String)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = 64;
    let a: Vec<f64> = (0..n).map(|_| rng.sample(StandardNormal)).collect();
    let b: Vec<f64> = (0..n).map(|_| 1.0 + 0.5 * rng.sample::<f64, _>(StandardNormal)).collect();
    let one = |v: &[f64]| Array2::from_shape_vec((n, 1), v.to_vec()).expect("shape");
    let two = |v: &[f64]| Array2::from_shape_fn((n, 2), |(i, k)| if k == 0 { v[i] } else { 0.0 });
    let sorted = wasserstein2(one(&a).view(), one(&b).view())?.value;
    let exact = wasserstein2(two(&a).view(), two(&b).view())?.value;
    Ok(((sorted - exact).abs() / sorted, format!("W2 = {sorted:.6}")))
}

fn grid_shape() -> Result<(f64, String)> {
    let mut worst: f64 = 0.0;
    for n in [1, 2, 4, 8, 32] {
        for mu in [-1.0, 0.0, 1.5] {
            let g = inference_grid(n, mu)?;
            let bad = g.len() != n + 1 || g[0] != 1.0 || g[n] != 0.0 || g.windows(2).any(|w| w[1] >= w[0]);
            if bad {
                worst = 1.0;
            }
        }
    }
    Ok((worst, "endpoints 1 and 0, strictly decreasing".into()))
}

/// Runs every property.
pub fn run_all(opts: &VerifyOptions) -> Vec<PropertyResult> {
    let seed = opts.seed;
    let coords = opts.grad_coords;
    vec![
        check("tweedie_round_trip", 1e-10, || tweedie_round_trip(seed)),
        check("result1_identity_1d", 1e-6, || result1(seed, 1)),
        check("result1_identity_2d", 1e-6, || result1(seed, 2)),
        check("result2_identity", 1e-6, || result2(seed)),
        check("grad_data_only", 1e-4, || gradient_check(Stage::DataOnly, true, coords, seed)),
        check("grad_classifier_only", 1e-4, || gradient_check(Stage::ClassifierOnly, true, coords, seed)),
        check("grad_aux_mixed_renorm", 1e-4, || gradient_check(Stage::AuxMixed, true, coords, seed)),
        check("grad_aux_mixed_hybrid", 1e-4, || gradient_check(Stage::AuxMixed, false, coords, seed)),
        check("ddim_eta0_is_euler", 1e-10, || ddim_euler(seed)),
        check("ddim_final_step_is_x0", 0.0, || ddim_endpoint(seed)),
        check("renorm_preserves_norm", 1e-6, || renorm_norm(seed)),
        check("lambda_edge_cases", 1e-12, || lambda_edges(opts.lambda, seed)),
        check("pair_loss_at_s_eq_t", 0.0, || pair_loss_at_equal_times(opts.lambda, seed)),
        check("assignment_optimal", 1e-12, || assignment_optimal(seed)),
        check("w2_exact_matches_sorted", 1e-10, || w2_line(seed)),
        check("inference_grid_shape", 0.0, grid_shape),
    ]
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fast() -> VerifyOptions {
        VerifyOptions {
            grad_coords: Some(200),
            ..Default::default()
        }
    }

    #[test]
    fn suite_passes() {
        let results = run_all(&fast());
        assert!(results.len() >= 12);
        for r in &results {
            assert!(r.pass, "{r}");
        }
    }

    #[test]
    fn sign_flipped_lambda_is_caught() {
        fn flipped(s: f64, t: f64, cap: f64) -> f64 {
            (s / (1.0 - s) - t / (1.0 - t)).clamp(0.0, cap)
        }
        let results = run_all(&VerifyOptions { lambda: flipped, ..fast() });
        let failing: Vec<_> = results.iter().filter(|r| !r.pass).map(|r| r.name).collect();
        assert_eq!(failing, vec!["lambda_edge_cases"]);
    }

    #[test]
    fn lambda_nonzero_at_equal_times_is_caught() {
        fn offset(s: f64, t: f64, cap: f64) -> f64 {
            lambda_weight(s, t, cap) + 0.1
        }
        let results = run_all(&VerifyOptions { lambda: offset, ..fast() });
        let failing: Vec<_> = results.iter().filter(|r| !r.pass).map(|r| r.name).collect();
        assert_eq!(failing, vec!["lambda_edge_cases", "pair_loss_at_s_eq_t"]);
    }

    #[test]
    fn report_line_format() {
        let r = PropertyResult::new("x", 1e-12, 1e-10, "d".into());
        let line = r.to_string();
        assert!(line.starts_with("PASS x"), "{line}");
        assert!(line.contains("1.000e-12"));
        assert!(!PropertyResult::new("y", 2.0, 1.0, String::new()).pass);
    }
}
