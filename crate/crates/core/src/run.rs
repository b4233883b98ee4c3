//! Run directories and the train / eval / sweep commands.
//!
//! Layout of a run directory:
//!
//! ```text
//! config.snapshot          resolved RunConfig, written before anything else
//! run.toml                 RunRecord
//! metrics.csv              training metrics, byte-identical across reruns
//! timing.csv               wall-clock per logged iteration
//! checkpoints/             ckpt_{iter}.bin, ckpt_{iter}.ema.bin, ckpt_{iter}.toml
//! eval/                    step-sweep reports and plot data
//! samples/                 sample dumps per (step count, class)
//! sweep/                   sampler-axis comparisons
//! ```

use std::fmt::Write as _;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::backbone::Network;
use crate::checkpoint;
use crate::config::RunConfig;
use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::evalsuite::{
    aggregate, monotonicity_check, pooled_sweep, step_sweep_with_samples, MetricRow, ModelSource, MonotoneVerdict, SampleSource,
    SweepSpec, TruthSource,
};
use crate::objective::Stage;
use crate::sampler::SamplerConfig;
use crate::trainer::{run_rng, train, IterMetrics, TrainObserver, TrainState};

pub const CONFIG_SNAPSHOT: &str = "config.snapshot";
pub const RECORD: &str = "run.toml";
pub const METRICS: &str = "metrics.csv";
pub const TIMING: &str = "timing.csv";
const LOCK: &str = ".lock";

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RunDir {
    root: PathBuf,
}

impl RunDir {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn path(&self, rel: &str) -> PathBuf {
        self.root.join(rel)
    }

    pub fn checkpoints(&self) -> PathBuf {
        self.root.join("checkpoints")
    }

    /// Claims the directory for one command; released on drop.
    pub fn lock(&self) -> Result<RunLock> {
        fs::create_dir_all(&self.root)?;
        let path = self.root.join(LOCK);
        match fs::OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(mut f) => {
                writeln!(f, "{}", std::process::id())?;
                Ok(RunLock { path })
            }
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => Err(Error::Locked(self.root.clone())),
            Err(e) => Err(e.into()),
        }
    }

    pub fn load_config(&self) -> Result<RunConfig> {
        let path = self.path(CONFIG_SNAPSHOT);
        if !path.exists() {
            return Err(Error::MissingCheckpoint(self.root.clone()));
        }
        RunConfig::load(&path)
    }

    pub fn load_record(&self) -> Result<RunRecord> {
        let text = fs::read_to_string(self.path(RECORD))?;
        toml::from_str(&text).map_err(|e| Error::ConfigParse(e.to_string()))
    }
}

#[derive(Debug)]
pub struct RunLock {
    path: PathBuf,
}

impl Drop for RunLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.path);
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunStatus {
    Running,
    Completed,
    Aborted,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunRecord {
    pub status: RunStatus,
    pub reason: Option<String>,
    pub config_hash: String,
    pub seed: u64,
    pub iters_completed: u64,
    pub checkpoints: Vec<u64>,
    pub metrics: String,
    pub timing: String,
}

/// `# config_hash=... seed=...` line heading every emitted CSV.
pub fn csv_header(cfg: &RunConfig, extra: &str) -> String {
    let mut h = format!("# config_hash={} seed={}", cfg.hash(), cfg.seed);
    if !extra.is_empty() {
        h.push(' ');
        h.push_str(extra);
    }
    h.push('\n');
    h
}

fn stage_name(s: Stage) -> &'static str {
    match s {
        Stage::DataOnly => "data_only",
        Stage::ClassifierOnly => "classifier_only",
        Stage::AuxMixed => "aux_mixed",
    }
}

struct RunObserver<'a> {
    dir: &'a RunDir,
    hash: String,
    metrics: String,
    timing: String,
    checkpoints: Vec<u64>,
    start: Instant,
}

impl RunObserver<'_> {
    fn flush(&self) -> Result<()> {
        checkpoint::write_atomic(&self.dir.path(METRICS), self.metrics.as_bytes())?;
        checkpoint::write_atomic(&self.dir.path(TIMING), self.timing.as_bytes())
    }
}

impl TrainObserver for RunObserver<'_> {
    fn on_metrics(&mut self, m: &IterMetrics) -> Result<()> {
        let l = &m.loss;
        writeln!(
            self.metrics,
            "{},{},{},{},{},{},{},{},{},{},{},{}",
            m.iter,
            stage_name(m.stage),
            m.lr,
            l.total,
            l.pair,
            l.data,
            l.self_eval,
            l.fake,
            l.lambda_mean,
            l.lambda_max,
            l.n_self,
            m.grad_norm
        )
        .expect("string write");
        writeln!(self.timing, "{},{:.3}", m.iter, self.start.elapsed().as_secs_f64()).expect("string write");
        Ok(())
    }

    fn on_checkpoint(&mut self, state: &TrainState) -> Result<()> {
        checkpoint::save(&self.dir.checkpoints(), state.iter, &state.net, state.ema.network(), &self.hash)?;
        self.checkpoints.push(state.iter);
        self.flush()
    }
}

/// Trains a fresh model into `dir`.
pub fn cmd_train(cfg: &RunConfig, dir: &RunDir) -> Result<RunRecord> {
    cfg.validate()?;
    let _lock = dir.lock()?;
    if dir.path(CONFIG_SNAPSHOT).exists() {
        return Err(Error::Argument(format!("{} already holds a run", dir.root().display())));
    }
    checkpoint::write_atomic(&dir.path(CONFIG_SNAPSHOT), cfg.to_toml().as_bytes())?;

    let data = Dataset::from_spec(&cfg.dataset)?;
    let net = Network::new(cfg.net_spec(&data), cfg.seed)?;
    let mut state = TrainState::new(net, cfg.train.ema_decay)?;
    let mut obs = RunObserver {
        dir,
        hash: cfg.hash(),
        metrics: csv_header(cfg, "")
            + "iter,stage,lr,loss,pair,data,self_eval,fake,lambda_mean,lambda_max,n_self,grad_norm\n",
        timing: csv_header(cfg, "") + "iter,wall_s\n",
        checkpoints: Vec::new(),
        start: Instant::now(),
    };
    let mut record = RunRecord {
        status: RunStatus::Running,
        reason: None,
        config_hash: cfg.hash(),
        seed: cfg.seed,
        iters_completed: 0,
        checkpoints: Vec::new(),
        metrics: METRICS.into(),
        timing: TIMING.into(),
    };
    write_record(dir, &record)?;

    let outcome = train(
        &mut state,
        &cfg.train,
        &cfg.objective,
        &cfg.schedule,
        &data,
        &mut run_rng(cfg.seed),
        &mut obs,
    );
    obs.flush()?;
    record.iters_completed = state.iter;
    record.checkpoints = obs.checkpoints.clone();
    match outcome {
        Ok(()) => {
            record.status = RunStatus::Completed;
            write_record(dir, &record)?;
            Ok(record)
        }
        Err(e) => {
            record.status = RunStatus::Aborted;
            record.reason = Some(e.to_string());
            write_record(dir, &record)?;
            Err(e)
        }
    }
}

fn write_record(dir: &RunDir, record: &RunRecord) -> Result<()> {
    let text = toml::to_string(record).expect("record serializes");
    checkpoint::write_atomic(&dir.path(RECORD), text.as_bytes())
}

/// Overrides for `eval` and `sweep`; `None` falls back to the run config.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct EvalOptions {
    pub steps: Option<Vec<usize>>,
    pub n: Option<usize>,
    pub seed: Option<u64>,
    pub repeats: Option<usize>,
    /// Evaluate the exact data sampler instead of the checkpoint.
    pub oracle: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalOutcome {
    pub rows: Vec<MetricRow>,
    pub aggregate: Vec<MetricRow>,
    pub verdicts: Vec<MonotoneVerdict>,
    pub files: Vec<PathBuf>,
}

fn sweep_spec(cfg: &RunConfig, data: &Dataset, opts: &EvalOptions) -> SweepSpec {
    SweepSpec {
        conditions: (0..data.n_classes() as u16).collect(),
        steps: opts.steps.clone().unwrap_or_else(|| cfg.eval.steps.clone()),
        n: opts.n.unwrap_or(cfg.eval.n),
        seed: opts.seed.unwrap_or(cfg.eval.seed),
        bootstrap: cfg.eval.bootstrap,
    }
}

fn metric_csv(header: &str, rows: &[MetricRow]) -> String {
    let mut out = header.to_string();
    out.push_str("model,condition,steps,w2,energy,floor,n,seed\n");
    for r in rows {
        let cond = if r.condition == u16::MAX { "all".to_string() } else { r.condition.to_string() };
        writeln!(out, "{},{},{},{},{},{},{},{}", r.model, cond, r.steps, r.w2, r.energy, r.floor, r.n, r.seed)
            .expect("string write");
    }
    out
}

fn sample_csv(header: &str, x: &Array2<f64>) -> String {
    let mut out = header.to_string();
    let cols: Vec<String> = (0..x.ncols()).map(|k| format!("x{k}")).collect();
    out.push_str(&cols.join(","));
    out.push('\n');
    for row in x.rows() {
        let vals: Vec<String> = row.iter().map(|v| v.to_string()).collect();
        out.push_str(&vals.join(","));
        out.push('\n');
    }
    out
}

/// Latest EMA network of a run.
pub fn load_eval_network(dir: &RunDir) -> Result<(Network, u64)> {
    let (_, ema, meta) = checkpoint::load_latest(&dir.checkpoints())?;
    Ok((ema, meta.iter))
}

/// Step-count sweep of the latest EMA checkpoint (or the oracle sampler).
pub fn cmd_eval(dir: &RunDir, opts: &EvalOptions) -> Result<EvalOutcome> {
    let cfg = dir.load_config()?;
    let _lock = dir.lock()?;
    let data = Dataset::from_spec(&cfg.dataset)?;
    let spec = sweep_spec(&cfg, &data, opts);
    let loaded = if opts.oracle { None } else { Some(load_eval_network(dir)?) };
    let repeats = opts.repeats.unwrap_or(cfg.eval.repeats);
    let (prefix, extra) = match &loaded {
        Some((_, iter)) => ("model", format!("checkpoint={iter} eval_seed={} repeats={repeats}", spec.seed)),
        None => ("oracle", format!("eval_seed={} repeats={repeats}", spec.seed)),
    };
    let header = csv_header(&cfg, &extra);
    let truth = TruthSource { data: &data };
    let model = loaded.as_ref().map(|(net, _)| ModelSource {
        name: "model".into(),
        net,
        cfg: cfg.sampler,
    });
    let source: &dyn SampleSource = match &model {
        Some(m) => m,
        None => &truth,
    };
    let cells = step_sweep_with_samples(source, &data, &spec)?;
    let rows: Vec<MetricRow> = if repeats > 1 {
        pooled_sweep(source, &data, &spec, repeats)?
    } else {
        cells.iter().map(|(r, _)| r.clone()).collect()
    };
    let agg = aggregate(&rows);
    let verdicts = if spec.steps.len() >= 3 {
        monotonicity_check(&rows, cfg.eval.tolerance)?
    } else {
        Vec::new()
    };

    let eval_dir = dir.path("eval");
    let mut files = Vec::new();
    let mut put = |path: PathBuf, text: String| -> Result<()> {
        checkpoint::write_atomic(&path, text.as_bytes())?;
        files.push(path);
        Ok(())
    };
    put(eval_dir.join(format!("{prefix}_metrics.csv")), metric_csv(&header, &rows))?;
    put(eval_dir.join(format!("{prefix}_aggregate.csv")), metric_csv(&header, &agg))?;
    put(eval_dir.join(format!("{prefix}_plot_w2.csv")), plot_w2(&header, &rows, &agg))?;
    put(eval_dir.join(format!("{prefix}_summary.toml")), summary_toml(&cfg, &agg, &verdicts))?;
    let mut timing = header.clone() + "condition,steps,wall_ms\n";
    for r in &rows {
        writeln!(timing, "{},{},{:.3}", r.condition, r.steps, r.wall_ms).expect("string write");
    }
    put(eval_dir.join(format!("{prefix}_timing.csv")), timing)?;
    for (r, x) in &cells {
        let name = format!("{prefix}_steps_{}_class_{}.csv", r.steps, r.condition);
        put(dir.path("samples").join(name), sample_csv(&header, x))?;
    }
    Ok(EvalOutcome {
        rows,
        aggregate: agg,
        verdicts,
        files,
    })
}

/// Step count against W2, one column per condition plus the mean.
fn plot_w2(header: &str, rows: &[MetricRow], agg: &[MetricRow]) -> String {
    let mut conds: Vec<u16> = rows.iter().map(|r| r.condition).collect();
    conds.sort_unstable();
    conds.dedup();
    let mut out = header.to_string();
    out.push_str("steps");
    for c in &conds {
        write!(out, ",w2_class_{c}").expect("string write");
    }
    out.push_str(",w2_all,floor_all\n");
    for a in agg {
        write!(out, "{}", a.steps).expect("string write");
        for c in &conds {
            let r = rows.iter().find(|r| r.condition == *c && r.steps == a.steps).expect("full grid");
            write!(out, ",{}", r.w2).expect("string write");
        }
        writeln!(out, ",{},{}", a.w2, a.floor).expect("string write");
    }
    out
}

#[derive(Serialize)]
struct Summary {
    config_hash: String,
    seed: u64,
    steps: Vec<usize>,
    w2_all: Vec<f64>,
    floor_all: Vec<f64>,
    monotone: Vec<VerdictEntry>,
}

#[derive(Serialize)]
struct VerdictEntry {
    condition: u16,
    monotone: bool,
    worst_rise: f64,
}

fn summary_toml(cfg: &RunConfig, agg: &[MetricRow], verdicts: &[MonotoneVerdict]) -> String {
    let s = Summary {
        config_hash: cfg.hash(),
        seed: cfg.seed,
        steps: agg.iter().map(|r| r.steps).collect(),
        w2_all: agg.iter().map(|r| r.w2).collect(),
        floor_all: agg.iter().map(|r| r.floor).collect(),
        monotone: verdicts
            .iter()
            .map(|v| VerdictEntry {
                condition: v.condition,
                monotone: v.monotone,
                worst_rise: if v.worst_rise.is_finite() { v.worst_rise } else { 0.0 },
            })
            .collect(),
    };
    toml::to_string(&s).expect("summary serializes")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SweepAxis {
    SStrategy,
    Eta,
    Omega,
    Steps,
}

impl SweepAxis {
    pub fn parse(name: &str) -> Result<Self> {
        match name {
            "s_strategy" | "rho" => Ok(Self::SStrategy),
            "eta" => Ok(Self::Eta),
            "omega" => Ok(Self::Omega),
            "steps" => Ok(Self::Steps),
            other => Err(Error::UnknownAxis(other.to_string())),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::SStrategy => "s_strategy",
            Self::Eta => "eta",
            Self::Omega => "omega",
            Self::Steps => "steps",
        }
    }

    pub fn default_values(self, cfg: &RunConfig) -> Vec<f64> {
        match self {
            Self::SStrategy => vec![0.0, 0.5, 1.0],
            Self::Eta => vec![0.0, 1.0],
            Self::Omega => vec![1.0, 3.0, 5.0],
            Self::Steps => cfg.eval.steps.iter().map(|&k| k as f64).collect(),
        }
    }

    fn apply(self, base: SamplerConfig, v: f64) -> SamplerConfig {
        match self {
            Self::SStrategy => SamplerConfig { rho: v, ..base },
            Self::Eta => SamplerConfig { eta: v, ..base },
            Self::Omega => SamplerConfig { omega: v, ..base },
            Self::Steps => base,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepOutcome {
    pub axis: SweepAxis,
    pub values: Vec<f64>,
    /// Per axis value, the per-cell rows.
    pub rows: Vec<Vec<MetricRow>>,
    pub verdicts: Vec<MonotoneVerdict>,
    pub files: Vec<PathBuf>,
}

/// Evaluates the latest checkpoint across values of one sampler axis.
pub fn cmd_sweep(dir: &RunDir, axis: SweepAxis, values: Option<Vec<f64>>, opts: &EvalOptions) -> Result<SweepOutcome> {
    let cfg = dir.load_config()?;
    let _lock = dir.lock()?;
    let data = Dataset::from_spec(&cfg.dataset)?;
    let values = values.unwrap_or_else(|| axis.default_values(&cfg));
    if values.is_empty() {
        return Err(Error::Argument("sweep needs at least one value".into()));
    }
    let (net, iter) = load_eval_network(dir)?;
    let mut spec = sweep_spec(&cfg, &data, opts);
    let repeats = opts.repeats.unwrap_or(cfg.eval.repeats);
    let mut all_rows = Vec::new();
    if axis == SweepAxis::Steps {
        if values.iter().any(|v| *v < 1.0 || v.fract() != 0.0) {
            return Err(Error::Argument("step counts must be positive integers".into()));
        }
        spec.steps = values.iter().map(|&v| v as usize).collect();
        let src = ModelSource { name: "model".into(), net: &net, cfg: cfg.sampler };
        all_rows.push(pooled_sweep(&src, &data, &spec, repeats)?);
    } else {
        for &v in &values {
            let sc = axis.apply(cfg.sampler, v);
            sc.validate()?;
            let src = ModelSource { name: format!("{}={v}", axis.name()), net: &net, cfg: sc };
            all_rows.push(pooled_sweep(&src, &data, &spec, repeats)?);
        }
    }
    let verdicts = if axis == SweepAxis::Steps && spec.steps.len() >= 3 {
        monotonicity_check(&all_rows[0], cfg.eval.tolerance)?
    } else {
        Vec::new()
    };

    let header = csv_header(
        &cfg,
        &format!("checkpoint={iter} eval_seed={} repeats={repeats} axis={}", spec.seed, axis.name()),
    );
    let name = axis.name();
    let mut table = header.clone() + "value,condition,steps,w2,energy,floor,n\n";
    for (v, rows) in values.iter().zip(&all_rows) {
        for r in rows {
            let value = if axis == SweepAxis::Steps { r.steps as f64 } else { *v };
            writeln!(table, "{value},{},{},{},{},{},{}", r.condition, r.steps, r.w2, r.energy, r.floor, r.n)
                .expect("string write");
        }
    }
    let mut plot = header.clone() + "steps";
    let aggs: Vec<Vec<MetricRow>> = all_rows.iter().map(|r| aggregate(r)).collect();
    if axis == SweepAxis::Steps {
        plot.push_str(",w2_all,floor_all\n");
        for a in &aggs[0] {
            writeln!(plot, "{},{},{}", a.steps, a.w2, a.floor).expect("string write");
        }
    } else {
        for v in &values {
            write!(plot, ",w2_{name}={v}").expect("string write");
        }
        plot.push('\n');
        for (i, k) in spec.steps.iter().enumerate() {
            write!(plot, "{k}").expect("string write");
            for a in &aggs {
                write!(plot, ",{}", a[i].w2).expect("string write");
            }
            plot.push('\n');
        }
    }
    let sweep_dir = dir.path("sweep");
    let mut files = vec![sweep_dir.join(format!("{name}.csv")), sweep_dir.join(format!("{name}_plot.csv"))];
    checkpoint::write_atomic(&files[0], table.as_bytes())?;
    checkpoint::write_atomic(&files[1], plot.as_bytes())?;
    if !verdicts.is_empty() {
        let mut text = header + "condition,monotone,worst_rise\n";
        for v in &verdicts {
            writeln!(text, "{},{},{}", v.condition, v.monotone, v.worst_rise).expect("string write");
        }
        let path = sweep_dir.join("steps_monotonicity.csv");
        checkpoint::write_atomic(&path, text.as_bytes())?;
        files.push(path);
    }
    Ok(SweepOutcome {
        axis,
        values,
        rows: all_rows,
        verdicts,
        files,
    })
}
