//! Fixtures shared by the benchmarks.

use anystep_core::backbone::{ConditionToken, NetSpec, Network};
use anystep_core::dataset::{Dataset, DatasetSpec};
use anystep_core::objective::PairBatch;
use anystep_core::schedule::ScheduleSpec;
use anystep_core::trainer::{draw_batch, TrainPlan};
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn default_net(seed: u64) -> Network {
    let spec = NetSpec {
        dim: 2,
        n_classes: 4,
        zero_init_output: false,
        ..NetSpec::default()
    };
    Network::new(spec, seed).expect("valid spec")
}

pub fn gmm() -> Dataset {
    Dataset::from_spec(&DatasetSpec::default()).expect("default dataset")
}

/// A training batch drawn after the `s` range has fully opened.
pub fn batch(size: usize, seed: u64) -> PairBatch {
    let plan = TrainPlan {
        batch_size: size,
        ..TrainPlan::default()
    };
    let sched = ScheduleSpec::default();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    draw_batch(&gmm(), &plan, &sched, 1_000_000, &mut rng).expect("batch")
}

pub fn inputs(n: usize, seed: u64) -> (Array2<f64>, Vec<f64>, Vec<f64>, Vec<ConditionToken>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x = Array2::from_shape_fn((n, 2), |_| rng.gen_range(-3.0..3.0));
    let t: Vec<f64> = (0..n).map(|_| rng.gen_range(0.05..1.0)).collect();
    let s: Vec<f64> = t.iter().map(|&t| t * rng.gen_range(0.0..1.0)).collect();
    let cond = (0..n).map(|i| ConditionToken::Class((i % 4) as u16)).collect();
    (x, t, s, cond)
}

pub fn point_cloud(n: usize, seed: u64) -> Array2<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Array2::from_shape_fn((n, 2), |_| rng.gen_range(-3.0..3.0))
}
