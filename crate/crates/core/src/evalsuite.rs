//! Sample-quality metrics against ground truth, per-step-count sweeps and the
//! monotonicity analysis.

use ndarray::{Array2, ArrayView2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::backbone::{ConditionToken, Denoiser};
use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::sampler::{sample, SamplerConfig};

/// Largest set size solved by exact assignment.
pub const EXACT_LIMIT: usize = 1024;
pub const BOOTSTRAP_RESAMPLES: usize = 200;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum W2Method {
    Sorted,
    Exact,
    /// Entropic approximation with the regularization used, in squared-distance units.
    Sinkhorn { reg: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct W2 {
    pub value: f64,
    pub method: W2Method,
}

fn sq_dist(a: ArrayView2<f64>, i: usize, b: ArrayView2<f64>, j: usize) -> f64 {
    a.row(i).iter().zip(b.row(j).iter()).map(|(x, y)| (x - y).powi(2)).sum()
}

fn cost_matrix(a: ArrayView2<f64>, b: ArrayView2<f64>) -> Vec<f64> {
    let n = a.nrows();
    let mut c = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            c[i * n + j] = sq_dist(a, i, b, j);
        }
    }
    c
}

/// Minimum-cost perfect matching on a dense `n x n` cost matrix (row-major).
/// Returns `assign[i] = column matched to row i`.
pub fn hungarian(cost: &[f64], n: usize) -> Vec<usize> {
    // Potentials and augmenting paths with 1-based sentinels.
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; n + 1];
    let mut p = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0usize;
        let mut minv = vec![f64::INFINITY; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0usize;
            let row = &cost[(i0 - 1) * n..i0 * n];
            for j in 1..=n {
                if !used[j] {
                    let cur = row[j - 1] - u[i0] - v[j];
                    if cur < minv[j] {
                        minv[j] = cur;
                        way[j] = j0;
                    }
                    if minv[j] < delta {
                        delta = minv[j];
                        j1 = j;
                    }
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut assign = vec![0usize; n];
    for j in 1..=n {
        if p[j] > 0 {
            assign[p[j] - 1] = j - 1;
        }
    }
    assign
}

fn sinkhorn_cost(cost: &[f64], n: usize, reg: f64) -> f64 {
    // Log-domain iterations with uniform marginals.
    let log_mu = -(n as f64).ln();
    let mut f = vec![0.0; n];
    let mut g = vec![0.0; n];
    let lse = |vals: &mut dyn Iterator<Item = f64>| {
        let xs: Vec<f64> = vals.collect();
        let m = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        m + xs.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
    };
    for _ in 0..2000 {
        let mut max_shift: f64 = 0.0;
        for i in 0..n {
            let new = -reg * lse(&mut (0..n).map(|j| (g[j] - cost[i * n + j]) / reg + log_mu));
            max_shift = max_shift.max((new - f[i]).abs());
            f[i] = new;
        }
        for j in 0..n {
            g[j] = -reg * lse(&mut (0..n).map(|i| (f[i] - cost[i * n + j]) / reg + log_mu));
        }
        if max_shift < 1e-9 * reg.max(1e-12) {
            break;
        }
    }
    let mut total = 0.0;
    for i in 0..n {
        for j in 0..n {
            let c = cost[i * n + j];
            total += ((f[i] + g[j] - c) / reg + 2.0 * log_mu).exp() * c;
        }
    }
    total
}

/// Wasserstein-2 distance between two equally sized empirical measures.
pub fn wasserstein2(a: ArrayView2<f64>, b: ArrayView2<f64>) -> Result<W2> {
    let n = a.nrows();
    if n == 0 || b.nrows() == 0 {
        return Err(Error::Argument("wasserstein2 needs nonempty sets".into()));
    }
    if b.nrows() != n || a.ncols() != b.ncols() {
        return Err(Error::Shape(format!("sets of shape {:?} and {:?}", a.dim(), b.dim())));
    }
    if a.ncols() == 1 {
        let mut x: Vec<f64> = a.column(0).to_vec();
        let mut y: Vec<f64> = b.column(0).to_vec();
        x.sort_by(f64::total_cmp);
        y.sort_by(f64::total_cmp);
        let s: f64 = x.iter().zip(&y).map(|(p, q)| (p - q).powi(2)).sum();
        return Ok(W2 {
            value: (s / n as f64).sqrt(),
            method: W2Method::Sorted,
        });
    }
    let cost = cost_matrix(a, b);
    if n <= EXACT_LIMIT {
        let assign = hungarian(&cost, n);
        let s: f64 = assign.iter().enumerate().map(|(i, &j)| cost[i * n + j]).sum();
        return Ok(W2 {
            value: (s / n as f64).sqrt().max(0.0),
            method: W2Method::Exact,
        });
    }
    let mean_cost = cost.iter().sum::<f64>() / cost.len() as f64;
    let reg = 1e-3 * mean_cost.max(1e-12);
    Ok(W2 {
        value: sinkhorn_cost(&cost, n, reg).max(0.0).sqrt(),
        method: W2Method::Sinkhorn { reg },
    })
}

/// V-statistic energy distance `2 E|A - B| - E|A - A'| - E|B - B'|`.
pub fn energy_distance(a: ArrayView2<f64>, b: ArrayView2<f64>) -> Result<f64> {
    if a.nrows() == 0 || b.nrows() == 0 {
        return Err(Error::Argument("energy distance needs nonempty sets".into()));
    }
    if a.ncols() != b.ncols() {
        return Err(Error::Shape("sets differ in dimension".into()));
    }
    let mean_dist = |x: ArrayView2<f64>, y: ArrayView2<f64>| {
        let mut s = 0.0;
        for i in 0..x.nrows() {
            for j in 0..y.nrows() {
                s += sq_dist(x, i, y, j).sqrt();
            }
        }
        s / (x.nrows() * y.nrows()) as f64
    };
    let e = 2.0 * mean_dist(a, b) - mean_dist(a, a) - mean_dist(b, b);
    Ok(e.max(0.0))
}

/// Standard deviation of W2 over bootstrap resamples of `model` against a fixed `reference`.
pub fn bootstrap_floor(model: ArrayView2<f64>, reference: ArrayView2<f64>, resamples: usize, seed: u64) -> Result<f64> {
    if resamples < 2 {
        return Err(Error::Argument("bootstrap needs at least two resamples".into()));
    }
    let n = model.nrows();
    let values = (0..resamples)
        .into_par_iter()
        .map(|r| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(r as u64 + 1);
            let idx: Vec<usize> = (0..n).map(|_| rng.gen_range(0..n)).collect();
            wasserstein2(model.select(Axis(0), &idx).view(), reference).map(|w| w.value)
        })
        .collect::<Result<Vec<f64>>>()?;
    let mean = values.iter().sum::<f64>() / resamples as f64;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (resamples - 1) as f64;
    Ok(var.sqrt())
}

/// Anything that can produce conditional samples at a given step count.
pub trait SampleSource: Sync {
    fn name(&self) -> &str;
    fn draw(&self, cond: ConditionToken, n_steps: usize, n: usize, rng: &mut ChaCha8Rng) -> Result<Array2<f64>>;
}

/// A trained denoiser driven by the any-step sampler.
pub struct ModelSource<'a> {
    pub name: String,
    pub net: &'a dyn Denoiser,
    pub cfg: SamplerConfig,
}

impl SampleSource for ModelSource<'_> {
    fn name(&self) -> &str {
        &self.name
    }

    fn draw(&self, cond: ConditionToken, n_steps: usize, n: usize, rng: &mut ChaCha8Rng) -> Result<Array2<f64>> {
        let cfg = SamplerConfig { n_steps, ..self.cfg };
        sample(self.net, &cfg, cond, n, rng)
    }
}

/// Exact data samples posing as a model; the ground-truth control.
pub struct TruthSource<'a> {
    pub data: &'a Dataset,
}

impl SampleSource for TruthSource<'_> {
    fn name(&self) -> &str {
        "truth"
    }

    fn draw(&self, cond: ConditionToken, _n_steps: usize, n: usize, rng: &mut ChaCha8Rng) -> Result<Array2<f64>> {
        self.data.sample(rng, n, cond)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricRow {
    pub model: String,
    pub condition: u16,
    pub steps: usize,
    pub w2: f64,
    pub energy: f64,
    pub floor: f64,
    pub n: usize,
    pub seed: u64,
    pub wall_ms: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepSpec {
    pub conditions: Vec<u16>,
    pub steps: Vec<usize>,
    pub n: usize,
    pub seed: u64,
    pub bootstrap: usize,
}

impl SweepSpec {
    pub fn validate(&self) -> Result<()> {
        if self.conditions.is_empty() || self.steps.is_empty() {
            return Err(Error::Argument("sweep needs conditions and step counts".into()));
        }
        if self.n < 2 {
            return Err(Error::Argument("sweep needs at least two samples per cell".into()));
        }
        if self.steps.contains(&0) {
            return Err(Error::Argument("step counts must be >= 1".into()));
        }
        Ok(())
    }
}

fn cell_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Reference draws for `condition`, shared by every model and step count.
pub fn reference_set(data: &Dataset, condition: u16, n: usize, seed: u64) -> Result<Array2<f64>> {
    data.sample(&mut cell_rng(seed, 1 << 32 | condition as u64), n, ConditionToken::Class(condition))
}

/// Conditional metrics for every `(condition, step count)` cell, in that order.
pub fn step_sweep(model: &dyn SampleSource, data: &Dataset, spec: &SweepSpec) -> Result<Vec<MetricRow>> {
    Ok(step_sweep_with_samples(model, data, spec)?.into_iter().map(|(r, _)| r).collect())
}

/// As [`step_sweep`], also returning the model draws of each cell.
pub fn step_sweep_with_samples(
    model: &dyn SampleSource,
    data: &Dataset,
    spec: &SweepSpec,
) -> Result<Vec<(MetricRow, Array2<f64>)>> {
    spec.validate()?;
    let refs = spec
        .conditions
        .iter()
        .map(|&c| reference_set(data, c, spec.n, spec.seed))
        .collect::<Result<Vec<_>>>()?;
    let cells: Vec<(usize, usize)> = (0..spec.conditions.len())
        .flat_map(|ci| spec.steps.iter().map(move |&k| (ci, k)))
        .collect();
    cells
        .par_iter()
        .map(|&(ci, steps)| {
            let start = std::time::Instant::now();
            let c = spec.conditions[ci];
            // Every step count starts from the same noise.
            let mut rng = cell_rng(spec.seed, 2 << 32 | c as u64);
            let x = model.draw(ConditionToken::Class(c), steps, spec.n, &mut rng)?;
            let w2 = wasserstein2(x.view(), refs[ci].view())?.value;
            let energy = energy_distance(x.view(), refs[ci].view())?;
            let floor = bootstrap_floor(x.view(), refs[ci].view(), spec.bootstrap, spec.seed ^ ((steps as u64) << 20) ^ c as u64)?;
            let row = MetricRow {
                model: model.name().to_string(),
                condition: c,
                steps,
                w2,
                energy,
                floor,
                n: spec.n,
                seed: spec.seed,
                wall_ms: start.elapsed().as_secs_f64() * 1e3,
            };
            Ok((row, x))
        })
        .collect()
}

/// Averages `repeats` independent sweeps (seeds `spec.seed..spec.seed + repeats`)
/// cell by cell; each cell's floor becomes the floor of that mean.
pub fn pooled_sweep(model: &dyn SampleSource, data: &Dataset, spec: &SweepSpec, repeats: usize) -> Result<Vec<MetricRow>> {
    if repeats == 0 {
        return Err(Error::Argument("pooled sweep needs at least one repeat".into()));
    }
    let mut pooled: Option<Vec<MetricRow>> = None;
    let start = std::time::Instant::now();
    for r in 0..repeats as u64 {
        let rows = step_sweep(model, data, &SweepSpec { seed: spec.seed + r, ..spec.clone() })?;
        match pooled.as_mut() {
            None => pooled = Some(rows.into_iter().map(|row| MetricRow { floor: row.floor * row.floor, ..row }).collect()),
            Some(acc) => {
                for (a, b) in acc.iter_mut().zip(rows) {
                    a.w2 += b.w2;
                    a.energy += b.energy;
                    a.floor += b.floor * b.floor;
                    a.n += b.n;
                }
            }
        }
    }
    let m = repeats as f64;
    let wall = start.elapsed().as_secs_f64() * 1e3;
    let mut rows = pooled.expect("at least one repeat");
    let cells = rows.len() as f64;
    for r in &mut rows {
        r.w2 /= m;
        r.energy /= m;
        r.floor = r.floor.sqrt() / m;
        r.wall_ms = wall / cells;
    }
    Ok(rows)
}

/// Per-step-count mean over conditions; the floor is that of the mean.
pub fn aggregate(rows: &[MetricRow]) -> Vec<MetricRow> {
    let mut steps: Vec<usize> = rows.iter().map(|r| r.steps).collect();
    steps.sort_unstable();
    steps.dedup();
    steps
        .into_iter()
        .map(|k| {
            let cell: Vec<&MetricRow> = rows.iter().filter(|r| r.steps == k).collect();
            let m = cell.len() as f64;
            MetricRow {
                model: cell[0].model.clone(),
                condition: u16::MAX,
                steps: k,
                w2: cell.iter().map(|r| r.w2).sum::<f64>() / m,
                energy: cell.iter().map(|r| r.energy).sum::<f64>() / m,
                floor: cell.iter().map(|r| r.floor * r.floor).sum::<f64>().sqrt() / m,
                n: cell.iter().map(|r| r.n).sum(),
                seed: cell[0].seed,
                wall_ms: cell.iter().map(|r| r.wall_ms).sum(),
            }
        })
        .collect()
}

/// Noise floor for the difference of two independent metric estimates.
pub fn comparison_floor(a: f64, b: f64) -> f64 {
    (a * a + b * b).sqrt()
}

#[derive(Debug, Clone, PartialEq)]
pub struct MonotoneVerdict {
    pub condition: u16,
    pub monotone: bool,
    /// Largest rise above the running minimum, in units of the noise floor.
    pub worst_rise: f64,
}

/// A condition passes when every W2 stays within `tolerance` noise floors of
/// the best value at fewer steps.
pub fn monotonicity_check(rows: &[MetricRow], tolerance: f64) -> Result<Vec<MonotoneVerdict>> {
    let mut conds: Vec<u16> = rows.iter().map(|r| r.condition).collect();
    conds.sort_unstable();
    conds.dedup();
    conds
        .into_iter()
        .map(|c| {
            let mut series: Vec<&MetricRow> = rows.iter().filter(|r| r.condition == c).collect();
            if series.len() < 3 {
                return Err(Error::Argument(format!("condition {c} covers fewer than 3 step counts")));
            }
            series.sort_by_key(|r| r.steps);
            let mut best = series[0];
            let mut worst_rise: f64 = f64::NEG_INFINITY;
            for r in &series[1..] {
                let floor = comparison_floor(best.floor, r.floor).max(1e-12);
                worst_rise = worst_rise.max((r.w2 - best.w2) / floor);
                if r.w2 < best.w2 {
                    best = r;
                }
            }
            Ok(MonotoneVerdict {
                condition: c,
                monotone: worst_rise <= tolerance,
                worst_rise,
            })
        })
        .collect()
}
