//! Conditional dual-time MLP.
//!
//! The network predicts a velocity `V(x_t, t, s, c)`; the clean-sample head is
//! `G = x_t - t * V`. Time conditioning is the sum of two small MLPs over
//! sinusoidal features of `t` and of the gap `t - s`. Conditions index rows of
//! one embedding table laid out as `[classes | null | fake classes]`.
//!
//! All parameters live in one flat `Vec<f64>`; layers are views into it. This
//! keeps Adam, EMA and checkpointing trivial and makes gradients a plain
//! vector with the same layout.

use ndarray::{s, Array1, Array2, ArrayView1, ArrayView2, ArrayViewMut1, ArrayViewMut2, Axis};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Which conditioning row a sample uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ConditionToken {
    Class(u16),
    Null,
    Fake(u16),
}

impl ConditionToken {
    /// Row in the embedding table for a model with `n_classes` classes.
    pub fn row(self, n_classes: usize) -> usize {
        match self {
            ConditionToken::Class(c) => c as usize,
            ConditionToken::Null => n_classes,
            ConditionToken::Fake(c) => n_classes + 1 + c as usize,
        }
    }

    pub fn class_id(self) -> Option<u16> {
        match self {
            ConditionToken::Class(c) | ConditionToken::Fake(c) => Some(c),
            ConditionToken::Null => None,
        }
    }

    fn check(self, n_classes: usize) -> Result<()> {
        match self.class_id() {
            Some(c) if c as usize >= n_classes => Err(Error::Argument(format!(
                "condition {self:?} out of range for {n_classes} classes"
            ))),
            _ => Ok(()),
        }
    }
}

/// Architecture hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NetSpec {
    pub dim: usize,
    pub n_classes: usize,
    pub width: usize,
    /// Number of hidden layers in the trunk.
    pub depth: usize,
    pub cond_dim: usize,
    /// Sinusoid frequency pairs per time input.
    pub n_freqs: usize,
    /// Times are multiplied by this before the sinusoid.
    pub time_scale: f64,
    pub max_period: f64,
    /// Zero the output layer at init so the untrained model predicts `V = 0`.
    pub zero_init_output: bool,
}

impl Default for NetSpec {
    fn default() -> Self {
        Self {
            dim: 2,
            n_classes: 4,
            width: 128,
            depth: 3,
            cond_dim: 16,
            n_freqs: 16,
            time_scale: 1000.0,
            max_period: 1e4,
            zero_init_output: true,
        }
    }
}

impl NetSpec {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("model.dim", self.dim),
            ("model.n_classes", self.n_classes),
            ("model.width", self.width),
            ("model.depth", self.depth),
            ("model.cond_dim", self.cond_dim),
            ("model.n_freqs", self.n_freqs),
        ];
        for (field, v) in positive {
            if v == 0 {
                return Err(Error::config(field, "must be positive"));
            }
        }
        if self.n_classes > u16::MAX as usize / 2 {
            return Err(Error::config("model.n_classes", "too many classes"));
        }
        if !(self.time_scale > 0.0 && self.max_period > 1.0) {
            return Err(Error::config(
                "model.time_scale",
                "time_scale must be > 0 and max_period > 1",
            ));
        }
        Ok(())
    }

    fn embed_rows(&self) -> usize {
        2 * self.n_classes + 1
    }

    fn trunk_in(&self) -> usize {
        self.dim + self.width + self.cond_dim
    }
}

/// Name, shape and offset of one parameter tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct TensorInfo {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
}

impl TensorInfo {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone, Copy)]
struct Dense {
    w: usize,
    b: usize,
    fan_in: usize,
    fan_out: usize,
}

#[derive(Debug, Clone)]
struct Layout {
    tensors: Vec<TensorInfo>,
    time_t: [Dense; 2],
    time_gap: [Dense; 2],
    embed: usize,
    trunk: Vec<Dense>,
    out: Dense,
    total: usize,
}

impl Layout {
    fn new(spec: &NetSpec) -> Self {
        let mut tensors = Vec::new();
        let mut total = 0usize;
        let mut push = |name: String, shape: Vec<usize>| -> usize {
            let offset = total;
            let info = TensorInfo { name, shape, offset };
            total += info.len();
            tensors.push(info);
            tensors.len() - 1
        };
        let mut dense = |name: &str, fan_in: usize, fan_out: usize| -> Dense {
            let w = push(format!("{name}.weight"), vec![fan_in, fan_out]);
            let b = push(format!("{name}.bias"), vec![fan_out]);
            Dense { w, b, fan_in, fan_out }
        };
        let feat = 2 * spec.n_freqs;
        let time_t = [
            dense("time_t.0", feat, spec.width),
            dense("time_t.1", spec.width, spec.width),
        ];
        let time_gap = [
            dense("time_gap.0", feat, spec.width),
            dense("time_gap.1", spec.width, spec.width),
        ];
        let mut trunk = Vec::with_capacity(spec.depth);
        let mut fan_in = spec.trunk_in();
        for l in 0..spec.depth {
            trunk.push(dense(&format!("trunk.{l}"), fan_in, spec.width));
            fan_in = spec.width;
        }
        let out = dense("out", spec.width, spec.dim);
        drop(dense);
        let embed = push("cond_embed".into(), vec![spec.embed_rows(), spec.cond_dim]);
        Self {
            tensors,
            time_t,
            time_gap,
            embed,
            trunk,
            out,
            total,
        }
    }

    fn range(&self, idx: usize) -> std::ops::Range<usize> {
        let t = &self.tensors[idx];
        t.offset..t.offset + t.len()
    }
}

/// The conditional dual-time network.
#[derive(Debug, Clone)]
pub struct Network {
    spec: NetSpec,
    layout: Layout,
    params: Vec<f64>,
}

/// Per-parameter gradient with the same flat layout as [`Network::params`].
pub type Grads = Vec<f64>;

/// Activations retained by [`Network::forward_cached`] for the backward pass.
pub struct ForwardCache {
    gap_feat: Array2<f64>,
    t_feat: Array2<f64>,
    t_pre: Array2<f64>,
    t_act: Array2<f64>,
    gap_pre: Array2<f64>,
    gap_act: Array2<f64>,
    rows: Vec<usize>,
    input: Array2<f64>,
    pre: Vec<Array2<f64>>,
    act: Vec<Array2<f64>>,
}

fn silu(x: f64) -> f64 {
    x / (1.0 + (-x).exp())
}

fn silu_grad(x: f64) -> f64 {
    let sig = 1.0 / (1.0 + (-x).exp());
    sig * (1.0 + x * (1.0 - sig))
}

impl Network {
    /// Randomly initialized network (uniform `±1/sqrt(fan_in)` weights,
    /// standard-normal condition embeddings).
    pub fn new(spec: NetSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let layout = Layout::new(&spec);
        let mut params = vec![0.0; layout.total];
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut denses: Vec<Dense> = layout.time_t.to_vec();
        denses.extend_from_slice(&layout.time_gap);
        denses.extend_from_slice(&layout.trunk);
        denses.push(layout.out);
        for d in denses {
            let bound = 1.0 / (d.fan_in as f64).sqrt();
            let zero = spec.zero_init_output && d.w == layout.out.w;
            for idx in [d.w, d.b] {
                for p in &mut params[layout.range(idx)] {
                    *p = if zero { 0.0 } else { rng.gen_range(-bound..bound) };
                }
            }
        }
        for p in &mut params[layout.range(layout.embed)] {
            *p = rng.sample(StandardNormal);
        }
        Ok(Self { spec, layout, params })
    }

    /// Network with the given spec and explicit parameter values.
    pub fn from_params(spec: NetSpec, params: Vec<f64>) -> Result<Self> {
        spec.validate()?;
        let layout = Layout::new(&spec);
        if params.len() != layout.total {
            return Err(Error::Shape(format!(
                "expected {} parameters, got {}",
                layout.total,
                params.len()
            )));
        }
        Ok(Self { spec, layout, params })
    }

    pub fn spec(&self) -> &NetSpec {
        &self.spec
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn tensors(&self) -> &[TensorInfo] {
        &self.layout.tensors
    }

    pub fn num_params(&self) -> usize {
        self.params.len()
    }

    /// Offset range of the named tensor inside the flat parameter vector.
    pub fn tensor_range(&self, name: &str) -> Option<std::ops::Range<usize>> {
        self.layout
            .tensors
            .iter()
            .position(|t| t.name == name)
            .map(|i| self.layout.range(i))
    }

    /// Range of the embedding row used by `cond`.
    pub fn embedding_row_range(&self, cond: ConditionToken) -> std::ops::Range<usize> {
        let base = self.layout.tensors[self.layout.embed].offset;
        let row = cond.row(self.spec.n_classes);
        base + row * self.spec.cond_dim..base + (row + 1) * self.spec.cond_dim
    }

    fn weight(&self, d: Dense) -> ArrayView2<'_, f64> {
        ArrayView2::from_shape((d.fan_in, d.fan_out), &self.params[self.layout.range(d.w)])
            .expect("layout shape")
    }

    fn bias(&self, d: Dense) -> ArrayView1<'_, f64> {
        ArrayView1::from(&self.params[self.layout.range(d.b)])
    }

    fn embed_table(&self) -> ArrayView2<'_, f64> {
        ArrayView2::from_shape(
            (self.spec.embed_rows(), self.spec.cond_dim),
            &self.params[self.layout.range(self.layout.embed)],
        )
        .expect("layout shape")
    }

    fn affine(&self, x: &ArrayView2<f64>, d: Dense) -> Array2<f64> {
        let mut y = x.dot(&self.weight(d));
        y += &self.bias(d);
        y
    }

    /// Sinusoidal features `[sin(a_i * u), cos(a_i * u)]` with
    /// `a_i = time_scale * max_period^(-i / n_freqs)`.
    pub fn sinusoid(&self, u: &[f64]) -> Array2<f64> {
        let f = self.spec.n_freqs;
        let mut out = Array2::zeros((u.len(), 2 * f));
        let ln_period = self.spec.max_period.ln();
        for (r, &v) in u.iter().enumerate() {
            for i in 0..f {
                let freq = self.spec.time_scale * (-ln_period * i as f64 / f as f64).exp();
                let a = v * freq;
                out[[r, i]] = a.sin();
                out[[r, f + i]] = a.cos();
            }
        }
        out
    }

    fn time_branch(&self, feat: &Array2<f64>, layers: [Dense; 2]) -> (Array2<f64>, Array2<f64>, Array2<f64>) {
        let pre = self.affine(&feat.view(), layers[0]);
        let act = pre.mapv(silu);
        let out = self.affine(&act.view(), layers[1]);
        (pre, act, out)
    }

    /// Combined time embedding `MLP_t(Sin(t)) + MLP_gap(Sin(t - s))`, one row per sample.
    pub fn time_embed(&self, t: &[f64], s: &[f64]) -> Array2<f64> {
        let gap: Vec<f64> = t.iter().zip(s).map(|(t, s)| t - s).collect();
        let (_, _, et) = self.time_branch(&self.sinusoid(t), self.layout.time_t);
        let (_, _, eg) = self.time_branch(&self.sinusoid(&gap), self.layout.time_gap);
        et + eg
    }

    /// Gap branch alone, `MLP_gap(Sin(gap))`.
    pub fn gap_embed(&self, gap: &[f64]) -> Array2<f64> {
        self.time_branch(&self.sinusoid(gap), self.layout.time_gap).2
    }

    fn check_inputs(&self, x: &ArrayView2<f64>, t: &[f64], s: &[f64], cond: &[ConditionToken]) -> Result<()> {
        let n = x.nrows();
        if x.ncols() != self.spec.dim {
            return Err(Error::Shape(format!(
                "input has {} columns, network dim is {}",
                x.ncols(),
                self.spec.dim
            )));
        }
        if t.len() != n || s.len() != n || cond.len() != n {
            return Err(Error::Shape(format!(
                "batch of {n} rows with {} t, {} s, {} conditions",
                t.len(),
                s.len(),
                cond.len()
            )));
        }
        if x.iter().chain(t).chain(s).any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("network input".into()));
        }
        for c in cond {
            c.check(self.spec.n_classes)?;
        }
        Ok(())
    }

    /// Velocity prediction with activations retained for [`Network::backward`].
    pub fn forward_cached(
        &self,
        x: ArrayView2<f64>,
        t: &[f64],
        s: &[f64],
        cond: &[ConditionToken],
    ) -> Result<(Array2<f64>, ForwardCache)> {
        self.check_inputs(&x, t, s, cond)?;
        let n = x.nrows();
        let gap: Vec<f64> = t.iter().zip(s).map(|(t, s)| t - s).collect();
        let t_feat = self.sinusoid(t);
        let gap_feat = self.sinusoid(&gap);
        let (t_pre, t_act, et) = self.time_branch(&t_feat, self.layout.time_t);
        let (gap_pre, gap_act, eg) = self.time_branch(&gap_feat, self.layout.time_gap);
        let temb = et + eg;

        let rows: Vec<usize> = cond.iter().map(|c| c.row(self.spec.n_classes)).collect();
        let table = self.embed_table();
        let d = self.spec.dim;
        let w = self.spec.width;
        let mut input = Array2::zeros((n, self.spec.trunk_in()));
        input.slice_mut(s![.., ..d]).assign(&x);
        input.slice_mut(s![.., d..d + w]).assign(&temb);
        for (r, &row) in rows.iter().enumerate() {
            input.slice_mut(s![r, d + w..]).assign(&table.row(row));
        }

        let mut pre = Vec::with_capacity(self.layout.trunk.len());
        let mut act: Vec<Array2<f64>> = Vec::with_capacity(self.layout.trunk.len());
        for (l, &layer) in self.layout.trunk.iter().enumerate() {
            let h = {
                let prev = if l == 0 { input.view() } else { act[l - 1].view() };
                self.affine(&prev, layer)
            };
            act.push(h.mapv(silu));
            pre.push(h);
        }
        let out = self.affine(&act.last().expect("depth >= 1").view(), self.layout.out);
        if out.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("network output".into()));
        }
        Ok((
            out,
            ForwardCache {
                gap_feat,
                t_feat,
                t_pre,
                t_act,
                gap_pre,
                gap_act,
                rows,
                input,
                pre,
                act,
            },
        ))
    }

    /// Velocity prediction `V(x, t, s, c)`, one row per sample.
    pub fn forward(&self, x: ArrayView2<f64>, t: &[f64], s: &[f64], cond: &[ConditionToken]) -> Result<Array2<f64>> {
        self.forward_cached(x, t, s, cond).map(|(v, _)| v)
    }

    fn grad_view<'a>(&self, grads: &'a mut [f64], idx: usize) -> &'a mut [f64] {
        &mut grads[self.layout.range(idx)]
    }

    fn dense_backward(
        &self,
        d: Dense,
        input: &ArrayView2<f64>,
        d_out: &Array2<f64>,
        grads: &mut [f64],
        need_input_grad: bool,
    ) -> Option<Array2<f64>> {
        let gw = input.t().dot(d_out);
        let mut gw_view = ArrayViewMut2::from_shape((d.fan_in, d.fan_out), self.grad_view(grads, d.w))
            .expect("layout shape");
        gw_view += &gw;
        let mut gb_view = ArrayViewMut1::from(self.grad_view(grads, d.b));
        gb_view += &d_out.sum_axis(Axis(0));
        need_input_grad.then(|| d_out.dot(&self.weight(d).t()))
    }

    /// Accumulates `d loss / d params` into `grads` given `d loss / d V`.
    pub fn backward(&self, cache: &ForwardCache, d_out: &Array2<f64>, grads: &mut [f64]) {
        assert_eq!(grads.len(), self.params.len(), "gradient buffer size");
        let last = cache.act.len() - 1;
        let mut dh = self
            .dense_backward(self.layout.out, &cache.act[last].view(), d_out, grads, true)
            .expect("input grad");
        for l in (0..self.layout.trunk.len()).rev() {
            let dpre = &dh * &cache.pre[l].mapv(silu_grad);
            let input = if l == 0 { cache.input.view() } else { cache.act[l - 1].view() };
            dh = self
                .dense_backward(self.layout.trunk[l], &input, &dpre, grads, true)
                .expect("input grad");
        }

        let d = self.spec.dim;
        let w = self.spec.width;
        let d_temb = dh.slice(s![.., d..d + w]).to_owned();
        let d_emb = dh.slice(s![.., d + w..]);
        let base = self.layout.tensors[self.layout.embed].offset;
        let cd = self.spec.cond_dim;
        for (r, &row) in cache.rows.iter().enumerate() {
            let dst = &mut grads[base + row * cd..base + (row + 1) * cd];
            for (g, v) in dst.iter_mut().zip(d_emb.row(r)) {
                *g += v;
            }
        }

        for (layers, feat, pre, act) in [
            (self.layout.time_t, &cache.t_feat, &cache.t_pre, &cache.t_act),
            (self.layout.time_gap, &cache.gap_feat, &cache.gap_pre, &cache.gap_act),
        ] {
            let da = self
                .dense_backward(layers[1], &act.view(), &d_temb, grads, true)
                .expect("input grad");
            let dpre = &da * &pre.mapv(silu_grad);
            self.dense_backward(layers[0], &feat.view(), &dpre, grads, false);
        }
    }

    pub fn zero_grads(&self) -> Grads {
        vec![0.0; self.params.len()]
    }

    /// Clean-sample head `G = x - t * V`.
    pub fn predict_x0(&self, x: ArrayView2<f64>, t: &[f64], s: &[f64], cond: &[ConditionToken]) -> Result<Array2<f64>> {
        let v = self.forward(x, t, s, cond)?;
        Ok(x0_from_velocity(x, t, &v))
    }
}

/// `x - t * v`, row-wise.
pub fn x0_from_velocity(x: ArrayView2<f64>, t: &[f64], v: &Array2<f64>) -> Array2<f64> {
    let tcol = Array1::from(t.to_vec()).insert_axis(Axis(1));
    &x - &(v * &tcol)
}

/// Anything that predicts velocities for batches of conditioned points.
pub trait Denoiser: Sync {
    fn dim(&self) -> usize;

    fn velocity(&self, x: ArrayView2<f64>, t: &[f64], s: &[f64], cond: &[ConditionToken]) -> Result<Array2<f64>>;

    fn predict_x0(&self, x: ArrayView2<f64>, t: &[f64], s: &[f64], cond: &[ConditionToken]) -> Result<Array2<f64>> {
        let v = self.velocity(x, t, s, cond)?;
        Ok(x0_from_velocity(x, t, &v))
    }
}

impl Denoiser for Network {
    fn dim(&self) -> usize {
        self.spec.dim
    }

    fn velocity(&self, x: ArrayView2<f64>, t: &[f64], s: &[f64], cond: &[ConditionToken]) -> Result<Array2<f64>> {
        self.forward(x, t, s, cond)
    }
}

/// Exponential moving average of network parameters.
#[derive(Debug, Clone)]
pub struct EmaShadow {
    net: Network,
    decay: f64,
}

impl EmaShadow {
    pub fn new(net: &Network, decay: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&decay) {
            return Err(Error::Argument(format!("EMA decay {decay} outside [0, 1]")));
        }
        Ok(Self { net: net.clone(), decay })
    }

    pub fn from_network(net: Network, decay: f64) -> Self {
        Self { net, decay }
    }

    pub fn decay(&self) -> f64 {
        self.decay
    }

    pub fn network(&self) -> &Network {
        &self.net
    }

    /// `shadow <- decay * shadow + (1 - decay) * net`.
    pub fn update(&mut self, net: &Network) -> Result<()> {
        ema_update(&mut self.net.params, net.params(), self.decay)
    }
}

pub fn ema_update(shadow: &mut [f64], params: &[f64], decay: f64) -> Result<()> {
    if shadow.len() != params.len() {
        return Err(Error::Shape(format!(
            "EMA shadow has {} entries, network has {}",
            shadow.len(),
            params.len()
        )));
    }
    for (s, p) in shadow.iter_mut().zip(params) {
        *s = decay * *s + (1.0 - decay) * p;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn small_spec(zero: bool) -> NetSpec {
        NetSpec {
            width: 16,
            depth: 2,
            cond_dim: 4,
            n_freqs: 4,
            zero_init_output: zero,
            ..NetSpec::default()
        }
    }

    fn probe() -> (Array2<f64>, Vec<f64>, Vec<f64>, Vec<ConditionToken>) {
        let x = array![[0.3, -1.2], [2.0, 0.5], [-0.7, 0.1]];
        (
            x,
            vec![0.9, 0.4, 0.7],
            vec![0.2, 0.4, 0.0],
            vec![ConditionToken::Class(1), ConditionToken::Null, ConditionToken::Fake(3)],
        )
    }

    #[test]
    fn zero_init_predicts_zero_velocity() {
        let net = Network::new(small_spec(true), 1).unwrap();
        let (x, t, s, c) = probe();
        let v = net.forward(x.view(), &t, &s, &c).unwrap();
        assert!(v.iter().all(|&v| v == 0.0));
        let x0 = net.predict_x0(x.view(), &t, &s, &c).unwrap();
        assert_eq!(x0, x);
    }

    #[test]
    fn forward_is_deterministic() {
        let net = Network::new(small_spec(false), 5).unwrap();
        let twin = Network::from_params(net.spec().clone(), net.params().to_vec()).unwrap();
        let (x, t, s, c) = probe();
        let a = net.forward(x.view(), &t, &s, &c).unwrap();
        let b = net.forward(x.view(), &t, &s, &c).unwrap();
        let d = twin.forward(x.view(), &t, &s, &c).unwrap();
        assert_eq!(a.as_slice().unwrap(), b.as_slice().unwrap());
        assert_eq!(a, d);
        assert_eq!(a.dim(), (3, 2));
    }

    #[test]
    fn condition_changes_output() {
        let net = Network::new(small_spec(false), 9).unwrap();
        let x = array![[0.5, 0.5]];
        let a = net.forward(x.view(), &[0.6], &[0.3], &[ConditionToken::Class(0)]).unwrap();
        let b = net.forward(x.view(), &[0.6], &[0.3], &[ConditionToken::Class(2)]).unwrap();
        let c = net.forward(x.view(), &[0.6], &[0.3], &[ConditionToken::Null]).unwrap();
        assert_ne!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn rejects_bad_inputs() {
        let net = Network::new(small_spec(true), 1).unwrap();
        let x = array![[f64::NAN, 0.0]];
        assert!(matches!(
            net.forward(x.view(), &[0.5], &[0.5], &[ConditionToken::Null]),
            Err(Error::NonFinite(_))
        ));
        let x = array![[0.0, 0.0]];
        assert!(net.forward(x.view(), &[0.5], &[0.5], &[ConditionToken::Class(4)]).is_err());
        assert!(net.forward(x.view(), &[0.5, 0.1], &[0.5], &[ConditionToken::Null]).is_err());
        let wide = array![[0.0, 0.0, 0.0]];
        assert!(net.forward(wide.view(), &[0.5], &[0.5], &[ConditionToken::Null]).is_err());
    }

    #[test]
    fn g_head_identities() {
        let net = Network::new(small_spec(false), 3).unwrap();
        let (x, _, s, c) = probe();
        let zeros = vec![0.0; 3];
        let x0 = net.predict_x0(x.view(), &zeros, &zeros, &c).unwrap();
        assert_eq!(x0, x);

        let t = vec![0.9, 0.4, 0.7];
        let v = net.forward(x.view(), &t, &s, &c).unwrap();
        let g = net.predict_x0(x.view(), &t, &s, &c).unwrap();
        for r in 0..3 {
            for k in 0..2 {
                assert!((g[[r, k]] - (x[[r, k]] - t[r] * v[[r, k]])).abs() < 1e-15);
            }
        }
        // t = 1 with V = x - m gives back m.
        let m = array![[1.5, -2.0]];
        let xt = array![[0.25, 0.75]];
        let v = &xt - &m;
        assert_eq!(x0_from_velocity(xt.view(), &[1.0], &v), m);
    }

    #[test]
    fn time_embedding_structure() {
        let net = Network::new(small_spec(false), 11).unwrap();
        let zero_gap = net.gap_embed(&[0.0]);
        let e1 = net.time_embed(&[0.3], &[0.3]);
        let e2 = net.time_embed(&[0.8], &[0.8]);
        let et1 = &e1 - &zero_gap;
        let et2 = &e2 - &zero_gap;
        assert_ne!(et1, et2);
        assert_eq!(e1.ncols(), 16);

        // embed(t, t - g) - embed(t, t - g') depends only on (g, g').
        let (g, g2) = (0.2, 0.05);
        let diff = |t: f64| net.time_embed(&[t], &[t - g]) - net.time_embed(&[t], &[t - g2]);
        let d1 = diff(0.9);
        let d2 = diff(0.35);
        for (a, b) in d1.iter().zip(d2.iter()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn backward_matches_finite_differences() {
        let net = Network::new(small_spec(false), 21).unwrap();
        let (x, t, s, c) = probe();
        let weights = array![[1.0, -0.5], [0.25, 2.0], [-1.0, 0.75]];
        let loss = |n: &Network| -> f64 {
            let v = n.forward(x.view(), &t, &s, &c).unwrap();
            (&v * &weights).sum()
        };
        let (_, cache) = net.forward_cached(x.view(), &t, &s, &c).unwrap();
        let mut grads = net.zero_grads();
        net.backward(&cache, &weights, &mut grads);
        let h = 1e-5;
        for i in (0..net.num_params()).step_by(7) {
            let mut plus = net.clone();
            plus.params_mut()[i] += h;
            let mut minus = net.clone();
            minus.params_mut()[i] -= h;
            let fd = (loss(&plus) - loss(&minus)) / (2.0 * h);
            let err = (fd - grads[i]).abs() / fd.abs().max(grads[i].abs()).max(1e-6);
            assert!(err < 1e-5, "param {i}: fd {fd} vs {}", grads[i]);
        }
    }

    #[test]
    fn ema_rules() {
        let net = Network::new(small_spec(false), 2).unwrap();
        let mut other = net.clone();
        other.params_mut().iter_mut().for_each(|p| *p += 1.0);

        let mut keep = EmaShadow::new(&net, 1.0).unwrap();
        keep.update(&other).unwrap();
        assert_eq!(keep.network().params(), net.params());

        let mut copy = EmaShadow::new(&net, 0.0).unwrap();
        copy.update(&other).unwrap();
        assert_eq!(copy.network().params(), other.params());

        let mut shadow = [0.0];
        ema_update(&mut shadow, &[2.0], 0.5).unwrap();
        assert_eq!(shadow[0], 1.0);
        assert!(ema_update(&mut [0.0, 1.0], &[2.0], 0.5).is_err());
    }

    #[test]
    fn layout_covers_parameters() {
        let net = Network::new(NetSpec::default(), 0).unwrap();
        let covered: usize = net.tensors().iter().map(TensorInfo::len).sum();
        assert_eq!(covered, net.num_params());
        let mut next = 0;
        for t in net.tensors() {
            assert_eq!(t.offset, next);
            next += t.len();
        }
        let r = net.embedding_row_range(ConditionToken::Fake(0));
        assert_eq!(r.len(), 16);
    }
}
