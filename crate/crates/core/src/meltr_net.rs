//! The loss-combining transformer.
//!
//! Each task loss `ℓ_t` becomes a token `SE(ℓ_t) + TE(t)`: a two-layer GELU
//! perceptron applied to the scalar loss plus a learned per-task embedding.
//! Tokens pass through transformer encoder layers, are mean-pooled, and an
//! affine head maps the pooled vector to one scalar, the auxiliary loss.
//! Mean pooling makes the output invariant to reordering (loss, task) pairs.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{grad, Array, Graph, Tensor};
use crate::error::{Error, Result};
use crate::init;

const LN_EPS: f64 = 1e-5;
const INIT_STD: f64 = 0.02;

/// Which parts of the network are active.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    /// Scale and task embeddings into the transformer.
    Full,
    /// Affine combination `Σ a_t ℓ_t + b`, no transformer.
    Linear,
    /// Scale embedding only; the task table is fixed at zero.
    SeOnly,
    /// Task embedding only; tokens carry no loss value.
    TeOnly,
}

impl Variant {
    pub const ALL: [Variant; 4] = [Variant::Full, Variant::Linear, Variant::SeOnly, Variant::TeOnly];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::Linear => "linear",
            Variant::SeOnly => "se_only",
            Variant::TeOnly => "te_only",
        }
    }

    pub fn parse(s: &str) -> Option<Variant> {
        Variant::ALL.into_iter().find(|v| v.name() == s)
    }

    fn uses_se(self) -> bool {
        matches!(self, Variant::Full | Variant::SeOnly)
    }

    fn uses_te(self) -> bool {
        matches!(self, Variant::Full | Variant::TeOnly)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MeltrConfig {
    pub d_model: usize,
    pub heads: usize,
    /// Number of tasks including the primary one (`T + 1`).
    pub n_tasks: usize,
    pub layers: usize,
    pub variant: Variant,
    /// Layer norm before each sub-block instead of after the residual sum.
    pub norm_first: bool,
}

impl MeltrConfig {
    /// Small default used for tests and synthetic experiments.
    pub fn desk(n_tasks: usize) -> Self {
        Self { d_model: 32, heads: 4, n_tasks, layers: 1, variant: Variant::Full, norm_first: false }
    }

    /// One encoder layer, 8 heads, width 512.
    pub fn full_scale(n_tasks: usize) -> Self {
        Self { d_model: 512, heads: 8, ..Self::desk(n_tasks) }
    }

    pub fn with_variant(mut self, variant: Variant) -> Self {
        self.variant = variant;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_tasks == 0 {
            return Err(Error::InvalidConfig("at least one task is required".into()));
        }
        if self.variant != Variant::Linear {
            if self.d_model == 0 || self.heads == 0 || self.d_model % self.heads != 0 {
                return Err(Error::InvalidConfig(format!(
                    "model width {} must be a positive multiple of the head count {}",
                    self.d_model, self.heads
                )));
            }
            if self.layers == 0 {
                return Err(Error::InvalidConfig("at least one encoder layer is required".into()));
            }
        }
        Ok(())
    }
}

/// Losses `ℓ_0..ℓ_T` with their task ids; entry 0 of a full vector is the
/// primary task.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossVector {
    pub entries: Vec<f64>,
    pub task_ids: Vec<usize>,
}

impl LossVector {
    /// Losses in task order, ids `0..n`.
    pub fn new(entries: Vec<f64>) -> Result<Self> {
        let task_ids = (0..entries.len()).collect();
        Self::with_ids(entries, task_ids)
    }

    pub fn with_ids(entries: Vec<f64>, task_ids: Vec<usize>) -> Result<Self> {
        if entries.is_empty() {
            return Err(Error::InvalidInput("loss vector is empty".into()));
        }
        if entries.len() != task_ids.len() {
            return Err(Error::InvalidInput(format!(
                "{} losses but {} task ids",
                entries.len(),
                task_ids.len()
            )));
        }
        if let Some(v) = entries.iter().find(|v| !v.is_finite()) {
            return Err(Error::InvalidInput(format!("non-finite loss {}", v)));
        }
        Ok(Self { entries, task_ids })
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn total(&self) -> f64 {
        self.entries.iter().sum()
    }

    pub fn tensors(&self) -> Vec<Tensor> {
        self.entries.iter().map(|&v| Tensor::scalar(v)).collect()
    }
}

/// The meta-parameters `φ`: named arrays in a fixed order.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MeltrNet {
    config: MeltrConfig,
    names: Vec<String>,
    params: Vec<Array>,
}

/// Parameter tensors bound for one forward pass.
pub struct Bound<'a> {
    net: &'a MeltrNet,
    tensors: &'a [Tensor],
}

impl Bound<'_> {
    fn get(&self, name: &str) -> &Tensor {
        let i = self
            .net
            .names
            .iter()
            .position(|n| n == name)
            .unwrap_or_else(|| panic!("no parameter {name}"));
        &self.tensors[i]
    }
}

impl MeltrNet {
    pub fn new(config: MeltrConfig, seed: u64) -> Result<Self> {
        let mut rng = init::rng(seed);
        Self::with_rng(config, &mut rng)
    }

    pub fn with_rng(config: MeltrConfig, rng: &mut impl Rng) -> Result<Self> {
        config.validate()?;
        let d = config.d_model;
        let mut names = Vec::new();
        let mut params = Vec::new();
        let mut push = |name: String, a: Array| {
            names.push(name);
            params.push(a);
        };
        if config.variant == Variant::Linear {
            push("linear.coef".into(), Array::ones(&[config.n_tasks, 1]));
            push("linear.bias".into(), Array::zeros(&[1, 1]));
            return Ok(Self { config, names, params });
        }
        if config.variant.uses_se() {
            push("se.w1".into(), init::kaiming_uniform(rng, 1, d));
            push("se.b1".into(), Array::zeros(&[1, d]));
            push("se.w2".into(), init::kaiming_uniform(rng, d, d));
            push("se.b2".into(), Array::zeros(&[1, d]));
        }
        if config.variant.uses_te() {
            push("te".into(), init::normal(rng, &[config.n_tasks, d], INIT_STD));
        }
        for l in 0..config.layers {
            for proj in ["q", "k", "v", "o"] {
                push(format!("l{l}.w{proj}"), init::trunc_normal(rng, &[d, d], INIT_STD));
                push(format!("l{l}.b{proj}"), Array::zeros(&[1, d]));
            }
            push(format!("l{l}.ln1.g"), Array::ones(&[1, d]));
            push(format!("l{l}.ln1.b"), Array::zeros(&[1, d]));
            push(format!("l{l}.ff.w1"), init::trunc_normal(rng, &[d, 4 * d], INIT_STD));
            push(format!("l{l}.ff.b1"), Array::zeros(&[1, 4 * d]));
            push(format!("l{l}.ff.w2"), init::trunc_normal(rng, &[4 * d, d], INIT_STD));
            push(format!("l{l}.ff.b2"), Array::zeros(&[1, d]));
            push(format!("l{l}.ln2.g"), Array::ones(&[1, d]));
            push(format!("l{l}.ln2.b"), Array::zeros(&[1, d]));
        }
        push("head.w".into(), init::trunc_normal(rng, &[d, 1], INIT_STD));
        push("head.b".into(), Array::zeros(&[1, 1]));
        Ok(Self { config, names, params })
    }

    pub fn config(&self) -> &MeltrConfig {
        &self.config
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn params(&self) -> &[Array] {
        &self.params
    }

    pub fn param(&self, name: &str) -> Option<&Array> {
        self.names.iter().position(|n| n == name).map(|i| &self.params[i])
    }

    pub fn param_mut(&mut self, name: &str) -> Option<&mut Array> {
        self.names.iter().position(|n| n == name).map(move |i| &mut self.params[i])
    }

    pub fn set_params(&mut self, params: Vec<Array>) -> Result<()> {
        if params.len() != self.params.len()
            || params.iter().zip(&self.params).any(|(a, b)| a.shape() != b.shape())
        {
            return Err(Error::InvalidInput("parameter list does not match the network layout".into()));
        }
        self.params = params;
        Ok(())
    }

    pub fn constants(&self) -> Vec<Tensor> {
        self.params.iter().cloned().map(Tensor::constant).collect()
    }

    pub fn bind(&self, graph: &Graph) -> Vec<Tensor> {
        graph.vars(&self.params)
    }

    /// Scale embedding of one loss as a `[1, d]` row.
    pub fn scale_embed(&self, params: &[Tensor], loss: &Tensor) -> Result<Tensor> {
        if !self.config.variant.uses_se() {
            return Err(Error::InvalidInput(format!("variant {} has no scale embedding", self.config.variant.name())));
        }
        check_finite(loss)?;
        let p = Bound { net: self, tensors: params };
        self.se_rows(&p, &loss.reshape(&[1, 1])?)
    }

    /// Row `t` of the task table.
    pub fn task_embed(&self, task: usize) -> Result<Array> {
        let te = self
            .param("te")
            .ok_or_else(|| Error::InvalidInput(format!("variant {} has no task embedding", self.config.variant.name())))?;
        if task >= self.config.n_tasks {
            return Err(Error::InvalidInput(format!("task {} out of range 0..{}", task, self.config.n_tasks)));
        }
        let d = self.config.d_model;
        Ok(Array::vector(te.data()[task * d..(task + 1) * d].to_vec()))
    }

    fn se_rows(&self, p: &Bound, col: &Tensor) -> Result<Tensor> {
        let h = col.affine(p.get("se.w1"), p.get("se.b1"))?.gelu()?;
        Ok(h.affine(p.get("se.w2"), p.get("se.b2"))?)
    }

    /// `MELTR(ℓ; φ)` for scalar loss tensors and their task ids.
    ///
    /// Differentiable with respect to both the losses and the parameters.
    pub fn forward(&self, params: &[Tensor], losses: &[Tensor], task_ids: &[usize]) -> Result<Tensor> {
        if losses.is_empty() || losses.len() != task_ids.len() {
            return Err(Error::InvalidInput(format!(
                "{} losses with {} task ids",
                losses.len(),
                task_ids.len()
            )));
        }
        if let Some(&t) = task_ids.iter().find(|&&t| t >= self.config.n_tasks) {
            return Err(Error::InvalidInput(format!("task {} out of range 0..{}", t, self.config.n_tasks)));
        }
        for l in losses {
            check_finite(l)?;
        }
        let p = Bound { net: self, tensors: params };
        let n = losses.len();
        let rows: Vec<Tensor> = losses.iter().map(|l| l.reshape(&[1, 1])).collect::<std::result::Result<_, _>>()?;
        let col = Tensor::concat_rows(&rows)?;

        if self.config.variant == Variant::Linear {
            let coef = p.get("linear.coef").gather_rows(task_ids)?;
            let out = col.mul(&coef)?.sum()?.add(&p.get("linear.bias").reshape(&[])?)?;
            return Ok(out);
        }

        let d = self.config.d_model;
        let mut x = match (self.config.variant.uses_se(), self.config.variant.uses_te()) {
            (true, true) => self.se_rows(&p, &col)?.add(&p.get("te").gather_rows(task_ids)?)?,
            (true, false) => self.se_rows(&p, &col)?,
            (false, true) => p.get("te").gather_rows(task_ids)?,
            (false, false) => unreachable!("linear handled above"),
        };
        debug_assert_eq!(x.shape(), &[n, d]);
        for l in 0..self.config.layers {
            x = self.encoder_layer(&p, l, &x)?;
        }
        let pooled = x.mean_rows()?;
        Ok(pooled.affine(p.get("head.w"), p.get("head.b"))?.reshape(&[])?)
    }

    fn encoder_layer(&self, p: &Bound, l: usize, x: &Tensor) -> Result<Tensor> {
        let ln = |x: &Tensor, which: &str| -> Result<Tensor> {
            Ok(x.layer_norm_rows(p.get(&format!("l{l}.{which}.g")), p.get(&format!("l{l}.{which}.b")), LN_EPS)?)
        };
        if self.config.norm_first {
            let x = x.add(&self.attention(p, l, &ln(x, "ln1")?)?)?;
            Ok(x.add(&self.feed_forward(p, l, &ln(&x, "ln2")?)?)?)
        } else {
            let x = ln(&x.add(&self.attention(p, l, x)?)?, "ln1")?;
            ln(&x.add(&self.feed_forward(p, l, &x)?)?, "ln2")
        }
    }

    fn attention(&self, p: &Bound, l: usize, x: &Tensor) -> Result<Tensor> {
        let d = self.config.d_model;
        let heads = self.config.heads;
        let dk = d / heads;
        let proj = |w: &str| x.affine(p.get(&format!("l{l}.w{w}")), p.get(&format!("l{l}.b{w}")));
        let (q, k, v) = (proj("q")?, proj("k")?, proj("v")?);
        let scale = 1.0 / (dk as f64).sqrt();
        let mut merged: Option<Tensor> = None;
        for h in 0..heads {
            let sel = Tensor::constant(head_selector(d, dk, h));
            let qh = q.matmul(&sel)?;
            let kh = k.matmul(&sel)?;
            let vh = v.matmul(&sel)?;
            let weights = qh.matmul(&kh.t()?)?.scale(scale)?.softmax_rows()?;
            let out = weights.matmul(&vh)?.matmul(&sel.t()?)?;
            merged = Some(match merged {
                Some(m) => m.add(&out)?,
                None => out,
            });
        }
        let merged = merged.expect("at least one head");
        Ok(merged.affine(p.get(&format!("l{l}.wo")), p.get(&format!("l{l}.bo")))?)
    }

    fn feed_forward(&self, p: &Bound, l: usize, x: &Tensor) -> Result<Tensor> {
        let h = x.affine(p.get(&format!("l{l}.ff.w1")), p.get(&format!("l{l}.ff.b1")))?.gelu()?;
        Ok(h.affine(p.get(&format!("l{l}.ff.w2")), p.get(&format!("l{l}.ff.b2")))?)
    }

    /// Plain evaluation of `MELTR(ℓ; φ)`.
    pub fn evaluate(&self, losses: &LossVector) -> Result<f64> {
        Ok(self.forward(&self.constants(), &losses.tensors(), &losses.task_ids)?.item())
    }

    /// `∂ MELTR / ∂ℓ_t` for every entry, from one backward pass.
    pub fn probe_partials(&self, losses: &LossVector) -> Result<Vec<f64>> {
        let graph = Graph::new();
        let vars: Vec<Tensor> = losses.entries.iter().map(|&v| graph.var(Array::scalar(v))).collect();
        let out = self.forward(&self.constants(), &vars, &losses.task_ids)?;
        let g = grad(&out, &vars, false)?;
        Ok(g.values.iter().map(Tensor::item).collect())
    }

    /// Output and partial while entry `sweep_task` runs over a grid and the
    /// other entries stay at `baseline`.
    pub fn sweep_surface(&self, sweep: &Sweep, baseline: &LossVector) -> Result<Vec<SweepPoint>> {
        sweep.validate()?;
        let pos = position_of(baseline, sweep.task)?;
        sweep
            .grid()
            .map(|x| {
                let mut lv = baseline.clone();
                lv.entries[pos] = x;
                let graph = Graph::new();
                let vars: Vec<Tensor> = lv.entries.iter().map(|&v| graph.var(Array::scalar(v))).collect();
                let out = self.forward(&self.constants(), &vars, &lv.task_ids)?;
                let g = grad(&out, std::slice::from_ref(&vars[pos]), false)?;
                Ok(SweepPoint { task_id: sweep.task, loss_value: x, output: out.item(), partial: g.values[0].item() })
            })
            .collect()
    }

    /// Outputs over the product grid of two entries; row-major in `task_a`.
    pub fn surface_2d(&self, task_a: usize, task_b: usize, range: (f64, f64), steps: usize, baseline: &LossVector) -> Result<Vec<SurfacePoint>> {
        let sweep_a = Sweep { task: task_a, lo: range.0, hi: range.1, steps };
        sweep_a.validate()?;
        let pa = position_of(baseline, task_a)?;
        let pb = position_of(baseline, task_b)?;
        if pa == pb {
            return Err(Error::InvalidInput("surface needs two distinct tasks".into()));
        }
        let mut out = Vec::with_capacity(steps * steps);
        for a in sweep_a.grid() {
            for b in sweep_a.grid() {
                let mut lv = baseline.clone();
                lv.entries[pa] = a;
                lv.entries[pb] = b;
                out.push(SurfacePoint { loss_a: a, loss_b: b, output: self.evaluate(&lv)? });
            }
        }
        Ok(out)
    }
}

fn check_finite(t: &Tensor) -> Result<()> {
    if !t.value().is_finite() {
        return Err(Error::InvalidInput("non-finite loss value".into()));
    }
    Ok(())
}

fn position_of(lv: &LossVector, task: usize) -> Result<usize> {
    lv.task_ids
        .iter()
        .position(|&t| t == task)
        .ok_or_else(|| Error::InvalidInput(format!("task {} not in the baseline loss vector", task)))
}

/// `[d, dk]` matrix picking the columns of head `h`.
fn head_selector(d: usize, dk: usize, h: usize) -> Array {
    let mut data = vec![0.0; d * dk];
    for j in 0..dk {
        data[(h * dk + j) * dk + j] = 1.0;
    }
    Array::new(vec![d, dk], data).expect("selector shape")
}

/// A one-dimensional grid over one task's loss.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Sweep {
    pub task: usize,
    pub lo: f64,
    pub hi: f64,
    pub steps: usize,
}

impl Sweep {
    /// 31 points over `[0, 3]`.
    pub fn default_for(task: usize) -> Self {
        Self { task, lo: 0.0, hi: 3.0, steps: 31 }
    }

    fn validate(&self) -> Result<()> {
        if !self.lo.is_finite() || !self.hi.is_finite() {
            return Err(Error::InvalidInput("sweep range must be finite".into()));
        }
        if self.lo >= self.hi {
            return Err(Error::InvalidInput(format!("empty sweep range [{}, {}]", self.lo, self.hi)));
        }
        if self.steps < 2 {
            return Err(Error::InvalidInput("a sweep needs at least two points".into()));
        }
        Ok(())
    }

    pub fn grid(&self) -> impl Iterator<Item = f64> + '_ {
        let step = (self.hi - self.lo) / (self.steps - 1) as f64;
        (0..self.steps).map(move |i| if i + 1 == self.steps { self.hi } else { self.lo + step * i as f64 })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub task_id: usize,
    pub loss_value: f64,
    #[serde(rename = "meltr_output")]
    pub output: f64,
    pub partial: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SurfacePoint {
    pub loss_a: f64,
    pub loss_b: f64,
    #[serde(rename = "meltr_output")]
    pub output: f64,
}

/// Largest `|f(a+1,b+1) - f(a+1,b) - f(a,b+1) + f(a,b)|` over a square grid
/// produced by [`MeltrNet::surface_2d`].
pub fn max_mixed_difference(surface: &[SurfacePoint], steps: usize) -> f64 {
    let at = |i: usize, j: usize| surface[i * steps + j].output;
    let mut worst: f64 = 0.0;
    for i in 0..steps - 1 {
        for j in 0..steps - 1 {
            let m = at(i + 1, j + 1) - at(i + 1, j) - at(i, j + 1) + at(i, j);
            worst = worst.max(m.abs());
        }
    }
    worst
}
