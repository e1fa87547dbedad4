use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{grad, Array, AutodiffError, Graph, Tensor};
use crate::error::{Error, Result};
use crate::loss::{check_gamma, fixed_weight_combiner, primary_loss, reg_from_output, DEFAULT_GAMMA};
use crate::meltr_net::{MeltrConfig, MeltrNet, Variant};
use crate::params;
use crate::tasks::{split_rng, Batch, BatchStream, Split, SuiteMetadata, TaskSpec};

use super::hypergrad::{hypergrad, inner_step_probed, outer_step, pri_partials};
use super::optim::{clip_to_norm, Adam};
use super::{Bilevel, HypergradScheme, DEFAULT_K};

/// Any loss above this, or any non-finite loss, aborts a run.
pub const DIVERGENCE_LIMIT: f64 = 1e6;
const ZERO_META_GRADIENT: &str = "meta-gradient identically zero";

/// How the learner's task losses are combined.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Method {
    /// Learned combiner trained with the given hypergradient scheme.
    Meltr(HypergradScheme),
    /// Fixed all-ones weights.
    Mtl,
    /// Fixed one-hot weight on the primary task.
    PrimaryOnly,
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Method::Meltr(s) => write!(f, "{s}"),
            Method::Mtl => write!(f, "mtl"),
            Method::PrimaryOnly => write!(f, "primary"),
        }
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "mtl" => Ok(Method::Mtl),
            "primary" => Ok(Method::PrimaryOnly),
            other => Ok(Method::Meltr(other.parse()?)),
        }
    }
}

impl Serialize for Method {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for Method {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        String::deserialize(d)?.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OuterOptimizer {
    Sgd,
    /// Adam, optionally decaying linearly to zero over the run.
    Adam { linear_decay: bool },
}

/// `Abs` is the normal regularizer; `Disabled` removes it from the primary
/// objective entirely.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RegularizerMode {
    Abs,
    Disabled,
}

/// Fit the combiner to `Σℓ` on jittered copies of the initial loss vector
/// before training, so every task starts with a comparable partial.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WarmStart {
    pub steps: usize,
    pub lr: f64,
    /// Std of the log-scale jitter.
    pub jitter: f64,
}

/// Combiner architecture.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MeltrSettings {
    pub d: usize,
    pub heads: usize,
    pub variant: Variant,
    pub norm_first: bool,
}

impl Default for MeltrSettings {
    fn default() -> Self {
        Self { d: 32, heads: 4, variant: Variant::Full, norm_first: true }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Flags {
    /// Add the direct `∂_φ L_pri` to the hypergradient.
    pub direct_reg_grad: bool,
    /// Use one fresh training batch for both objectives in the outer step.
    pub shared_outer_batch: bool,
    /// Stop conjugate gradient at negative curvature instead of failing.
    pub cg_truncate: bool,
}

impl Default for Flags {
    fn default() -> Self {
        Self { direct_reg_grad: true, shared_outer_batch: false, cg_truncate: true }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub scheme: Method,
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
    #[serde(rename = "K")]
    pub k: usize,
    pub epochs: usize,
    pub seed: u64,
    pub meltr: MeltrSettings,
    pub flags: Flags,
    pub outer_steps_per_epoch: usize,
    pub batch_size: usize,
    pub warm_start: Option<WarmStart>,
    /// Global norm cap on the outer update.
    pub max_outer_norm: Option<f64>,
    pub outer_optimizer: OuterOptimizer,
    pub regularizer: RegularizerMode,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self::desk(0)
    }
}

impl TrainConfig {
    /// Desk-scale defaults for the synthetic suites.
    pub fn desk(seed: u64) -> Self {
        Self {
            scheme: Method::Meltr(HypergradScheme::IdentityLite),
            alpha: 0.02,
            beta: 1e-3,
            gamma: DEFAULT_GAMMA,
            k: DEFAULT_K,
            epochs: 40,
            seed,
            meltr: MeltrSettings::default(),
            flags: Flags::default(),
            outer_steps_per_epoch: 10,
            batch_size: 32,
            warm_start: Some(WarmStart { steps: 300, lr: 1e-3, jitter: 1.0 }),
            max_outer_norm: Some(10.0),
            outer_optimizer: OuterOptimizer::Sgd,
            regularizer: RegularizerMode::Abs,
        }
    }

    pub fn with_method(mut self, method: Method) -> Self {
        self.scheme = method;
        self
    }

    pub fn with_gamma(mut self, gamma: f64) -> Self {
        self.gamma = gamma;
        self
    }

    pub fn with_variant(mut self, variant: Variant) -> Self {
        self.meltr.variant = variant;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if !(self.alpha > 0.0) || !self.alpha.is_finite() {
            return bad(format!("alpha must be positive, got {}", self.alpha));
        }
        if !(self.beta > 0.0) || !self.beta.is_finite() {
            return bad(format!("beta must be positive, got {}", self.beta));
        }
        check_gamma(self.gamma)?;
        if self.k == 0 || self.epochs == 0 || self.outer_steps_per_epoch == 0 || self.batch_size == 0 {
            return bad("K, epochs, outer_steps_per_epoch and batch_size must all be at least 1".into());
        }
        if let Method::Meltr(s) = &self.scheme {
            s.validate()?;
        }
        if let Some(c) = self.max_outer_norm {
            if !(c > 0.0) {
                return bad(format!("max_outer_norm must be positive, got {c}"));
            }
        }
        if let Some(ws) = &self.warm_start {
            if !(ws.lr > 0.0) || !(ws.jitter >= 0.0) {
                return bad("warm start needs lr > 0 and jitter >= 0".into());
            }
        }
        self.meltr_config(2).validate()
    }

    pub fn meltr_config(&self, n_tasks: usize) -> MeltrConfig {
        let m = &self.meltr;
        MeltrConfig { d_model: m.d, heads: m.heads, n_tasks, layers: 1, variant: m.variant, norm_first: m.norm_first }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    /// Mean primary loss over the epoch's inner batches.
    pub train_pri: f64,
    /// Primary loss on the held-out set at epoch end.
    pub val_pri: f64,
    /// `|combiner(ℓ) − Σℓ|` on the held-out set at epoch end.
    pub reg: f64,
    pub wall_ms: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossRange {
    pub task_id: usize,
    pub min: f64,
    pub q1: f64,
    pub median: f64,
    pub q3: f64,
    pub max: f64,
}

impl LossRange {
    pub fn of(task_id: usize, values: &[f64]) -> Self {
        let mut v = values.to_vec();
        v.sort_by(f64::total_cmp);
        let q = |p: f64| {
            let pos = p * (v.len() - 1) as f64;
            let (lo, hi) = (pos.floor() as usize, pos.ceil() as usize);
            v[lo] + (v[hi] - v[lo]) * (pos - lo as f64)
        };
        Self { task_id, min: v[0], q1: q(0.25), median: q(0.5), q3: q(0.75), max: v[v.len() - 1] }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Divergence {
    pub epoch: usize,
    pub detail: String,
}

/// Everything a run produced.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub config: TrainConfig,
    pub suite: SuiteMetadata,
    pub metrics: Vec<EpochMetrics>,
    /// Per epoch, per task: mean `∂ combiner / ∂ℓ_t` over inner steps.
    pub partials: Vec<Vec<f64>>,
    /// Per-sample held-out losses at the end of the run.
    pub loss_ranges: Vec<LossRange>,
    /// Held-out batch-mean task losses at the end of the run.
    pub final_losses: Vec<f64>,
    pub outer_step_ms: Vec<f64>,
    pub warnings: Vec<String>,
    /// Learned combiner whose meta-gradient never left zero.
    pub untrainable: bool,
    pub divergence: Option<Divergence>,
    pub meltr: Option<MeltrNet>,
    /// Learner weights at the end of the run.
    pub learner: Vec<Array>,
}

impl RunRecord {
    /// Final held-out primary loss; infinite for a diverged run.
    pub fn final_val_pri(&self) -> f64 {
        match (&self.divergence, self.metrics.last()) {
            (None, Some(m)) => m.val_pri,
            _ => f64::INFINITY,
        }
    }

    pub fn final_reg(&self) -> f64 {
        match (&self.divergence, self.metrics.last()) {
            (None, Some(m)) => m.reg,
            _ => f64::INFINITY,
        }
    }

    /// Equality ignoring wall-clock fields.
    pub fn same_outcome(&self, other: &RunRecord) -> bool {
        let strip = |r: &RunRecord| {
            let mut r = r.clone();
            r.outer_step_ms.clear();
            for m in &mut r.metrics {
                m.wall_ms = 0.0;
            }
            r
        };
        strip(self) == strip(other)
    }
}

/// The combiner's bi-level problem on one pair of batches.
struct MeltrProblem<'a> {
    task: &'a TaskSpec,
    net: &'a MeltrNet,
    aux_batch: &'a Batch,
    pri_batch: &'a Batch,
    ids: &'a [usize],
    gamma: f64,
    mode: RegularizerMode,
}

impl Bilevel for MeltrProblem<'_> {
    fn aux(&self, w: &[Tensor], phi: &[Tensor]) -> Result<Tensor> {
        let losses = self.task.task_losses(w, self.aux_batch)?;
        self.net.forward(phi, &losses, self.ids)
    }

    fn pri(&self, w: &[Tensor], phi: &[Tensor]) -> Result<Tensor> {
        let losses = self.task.task_losses(w, self.pri_batch)?;
        match self.mode {
            RegularizerMode::Disabled => Ok(losses[0].clone()),
            RegularizerMode::Abs => {
                let out = self.net.forward(phi, &losses, self.ids)?;
                primary_loss(&losses[0], &reg_from_output(&out, &losses)?, self.gamma)
            }
        }
    }
}

enum Combiner {
    Meltr(MeltrNet),
    Fixed(Vec<f64>),
}

/// Stepwise driver of one run; [`train_loop`] runs it to completion.
pub struct Trainer<'a> {
    cfg: TrainConfig,
    task: &'a TaskSpec,
    ids: Vec<usize>,
    w: Vec<Array>,
    combiner: Combiner,
    adam: Option<Adam>,
    train: BatchStream,
    outer: BatchStream,
    val: BatchStream,
    epoch: usize,
    epoch_start: Instant,
    partial_sum: Vec<f64>,
    train_pri_sum: f64,
    inner_count: usize,
    any_meta_gradient: bool,
    record: RunRecord,
}

fn is_divergence(e: &Error) -> bool {
    matches!(
        e,
        Error::Divergence { .. } | Error::SeriesDivergence { .. } | Error::Autodiff(AutodiffError::NonFinite { .. })
    )
}

impl<'a> Trainer<'a> {
    pub fn new(cfg: TrainConfig, task: &'a TaskSpec) -> Result<Self> {
        cfg.validate()?;
        let n = task.n_tasks();
        if n < 2 {
            return Err(Error::InvalidConfig("task needs at least one auxiliary loss".into()));
        }
        let w = task.init_learner(cfg.seed);
        let combiner = match cfg.scheme {
            Method::Mtl => Combiner::Fixed(vec![1.0; n]),
            Method::PrimaryOnly => Combiner::Fixed((0..n).map(|t| f64::from(t == 0)).collect()),
            Method::Meltr(_) => {
                let mut rng = split_rng(cfg.seed, Split::Aux);
                let mut net = MeltrNet::with_rng(cfg.meltr_config(n), &mut rng)?;
                if let (Some(ws), false) = (&cfg.warm_start, cfg.meltr.variant == Variant::Linear) {
                    let start = task.loss_values(&w, task.eval_batch())?;
                    warm_start(&mut net, &start, ws, &mut rng)?;
                }
                Combiner::Meltr(net)
            }
        };
        let adam = match (&combiner, cfg.outer_optimizer) {
            (Combiner::Meltr(net), OuterOptimizer::Adam { linear_decay }) => {
                let opt = Adam::new(cfg.beta, net.params());
                Some(if linear_decay { opt.with_linear_decay((cfg.epochs * cfg.outer_steps_per_epoch) as u64) } else { opt })
            }
            _ => None,
        };
        let record = RunRecord {
            config: cfg.clone(),
            suite: task.metadata.clone(),
            metrics: Vec::new(),
            partials: Vec::new(),
            loss_ranges: Vec::new(),
            final_losses: Vec::new(),
            outer_step_ms: Vec::new(),
            warnings: Vec::new(),
            untrainable: false,
            divergence: None,
            meltr: None,
            learner: Vec::new(),
        };
        Ok(Self {
            train: task.stream(Split::Train, cfg.seed, cfg.batch_size),
            outer: task.stream(Split::Outer, cfg.seed, cfg.batch_size),
            val: task.stream(Split::Validation, cfg.seed, cfg.batch_size),
            cfg,
            task,
            ids: (0..n).collect(),
            w,
            combiner,
            adam,
            epoch: 0,
            epoch_start: Instant::now(),
            partial_sum: vec![0.0; n],
            train_pri_sum: 0.0,
            inner_count: 0,
            any_meta_gradient: false,
            record,
        })
    }

    pub fn learner(&self) -> &[Array] {
        &self.w
    }

    pub fn meltr(&self) -> Option<&MeltrNet> {
        match &self.combiner {
            Combiner::Meltr(net) => Some(net),
            Combiner::Fixed(_) => None,
        }
    }

    pub fn epoch(&self) -> usize {
        self.epoch
    }

    fn diverged(&self, detail: String) -> Error {
        Error::Divergence { epoch: self.epoch, detail }
    }

    fn check_losses(&self, values: &[f64], what: &str) -> Result<()> {
        if let Some(v) = values.iter().find(|v| !v.is_finite() || v.abs() > DIVERGENCE_LIMIT) {
            return Err(self.diverged(format!("{what} loss {v}")));
        }
        Ok(())
    }

    fn combine(&self, phi: &[Tensor], losses: &[Tensor]) -> Result<Tensor> {
        match &self.combiner {
            Combiner::Meltr(net) => net.forward(phi, losses, &self.ids),
            Combiner::Fixed(c) => fixed_weight_combiner(losses, c),
        }
    }

    fn phi_constants(&self) -> Vec<Tensor> {
        match &self.combiner {
            Combiner::Meltr(net) => net.constants(),
            Combiner::Fixed(_) => Vec::new(),
        }
    }

    /// One gradient step of the learner on the combined loss of a fresh
    /// training batch.
    pub fn inner_step(&mut self) -> Result<()> {
        let batch = self.train.next_batch();
        let phi = self.phi_constants();
        let (w, _, partials, probes) = inner_step_probed(
            &self.w,
            |w| {
                let losses = self.task.task_losses(w, &batch)?;
                Ok((self.combine(&phi, &losses)?, losses))
            },
            self.cfg.alpha,
        )?;
        self.check_losses(&probes, "training")?;
        self.w = w;
        for (s, p) in self.partial_sum.iter_mut().zip(&partials) {
            *s += p;
        }
        self.train_pri_sum += probes[0];
        self.inner_count += 1;
        Ok(())
    }

    /// One meta-update of the combiner; a no-op for fixed weights.
    pub fn outer_step(&mut self) -> Result<()> {
        let Combiner::Meltr(net) = &self.combiner else { return Ok(()) };
        let Method::Meltr(scheme) = self.cfg.scheme else { unreachable!("learned combiner implies a scheme") };
        let started = Instant::now();
        let aux_batch = self.outer.next_batch();
        let pri_batch = if self.cfg.flags.shared_outer_batch { aux_batch.clone() } else { self.val.next_batch() };
        let problem = MeltrProblem {
            task: self.task,
            net,
            aux_batch: &aux_batch,
            pri_batch: &pri_batch,
            ids: &self.ids,
            gamma: self.cfg.gamma,
            mode: self.cfg.regularizer,
        };
        let phi = net.params();
        let h = hypergrad(&scheme, &problem, &self.w, phi, self.cfg.alpha, self.cfg.flags.cg_truncate)?;
        if params::max_abs(&h.grads) > 0.0 {
            self.any_meta_gradient = true;
        }
        for msg in h.warnings {
            self.record.warnings.push(format!("epoch {}: {msg}", self.epoch));
        }
        let mut update = if self.cfg.flags.direct_reg_grad {
            let direct = match h.direct {
                Some(d) => d,
                None => pri_partials(&problem, &self.w, phi)?.1,
            };
            params::add(&h.grads, &direct)
        } else {
            h.grads
        };
        if !params::all_finite(&update) {
            return Err(self.diverged("non-finite hypergradient".into()));
        }
        if let Some(c) = self.cfg.max_outer_norm {
            clip_to_norm(&mut update, c);
        }
        let next = match &mut self.adam {
            Some(opt) => {
                let mut p = phi.to_vec();
                opt.step(&mut p, &update);
                p
            }
            None => outer_step(phi, &update, self.cfg.beta, None)?,
        };
        if let Combiner::Meltr(net) = &mut self.combiner {
            net.set_params(next)?;
        }
        self.record.outer_step_ms.push(started.elapsed().as_secs_f64() * 1e3);
        Ok(())
    }

    /// Close the current epoch: evaluate, record and reset accumulators.
    pub fn end_epoch(&mut self) -> Result<()> {
        let eval = self.task.eval_batch();
        let consts: Vec<Tensor> = self.w.iter().cloned().map(Tensor::constant).collect();
        let losses = self.task.task_losses(&consts, eval)?;
        let values: Vec<f64> = losses.iter().map(Tensor::item).collect();
        self.check_losses(&values, "held-out")?;
        let reg = reg_from_output(&self.combine(&self.phi_constants(), &losses)?, &losses)?.item();
        let count = self.inner_count.max(1) as f64;
        self.record.metrics.push(EpochMetrics {
            epoch: self.epoch,
            train_pri: self.train_pri_sum / count,
            val_pri: values[0],
            reg,
            wall_ms: self.epoch_start.elapsed().as_secs_f64() * 1e3,
        });
        self.record.partials.push(self.partial_sum.iter().map(|s| s / count).collect());
        self.partial_sum.iter_mut().for_each(|s| *s = 0.0);
        self.train_pri_sum = 0.0;
        self.inner_count = 0;
        self.epoch += 1;
        self.epoch_start = Instant::now();
        Ok(())
    }

    pub fn run_epoch(&mut self) -> Result<()> {
        for _ in 0..self.cfg.outer_steps_per_epoch {
            for _ in 0..self.cfg.k {
                self.inner_step()?;
            }
            self.outer_step()?;
        }
        self.end_epoch()
    }

    /// Run the remaining epochs; divergence ends the run early with a
    /// diagnostic instead of an error.
    pub fn run(mut self) -> Result<RunRecord> {
        while self.epoch < self.cfg.epochs {
            if let Err(e) = self.run_epoch() {
                if !is_divergence(&e) {
                    return Err(e);
                }
                self.record.divergence = Some(Divergence { epoch: self.epoch, detail: e.to_string() });
                break;
            }
        }
        self.finish()
    }

    pub fn finish(mut self) -> Result<RunRecord> {
        self.record.learner = self.w.clone();
        if self.record.divergence.is_none() {
            let per_sample = self.task.sample_loss_values(&self.w, self.task.eval_batch())?;
            self.record.loss_ranges = per_sample.iter().enumerate().map(|(t, v)| LossRange::of(t, v)).collect();
            self.record.final_losses = self.task.loss_values(&self.w, self.task.eval_batch())?;
        }
        if let Combiner::Meltr(net) = self.combiner {
            if !self.any_meta_gradient {
                self.record.untrainable = true;
                self.record.warnings.push(ZERO_META_GRADIENT.into());
            }
            self.record.meltr = Some(net);
        }
        Ok(self.record)
    }
}

/// Calibrate `net` towards `Σℓ` around `start`.
fn warm_start(net: &mut MeltrNet, start: &[f64], ws: &WarmStart, rng: &mut impl rand::Rng) -> Result<()> {
    let mut opt = Adam::new(ws.lr, net.params());
    let ids: Vec<usize> = (0..start.len()).collect();
    let mut phi = net.params().to_vec();
    for _ in 0..ws.steps {
        let losses: Vec<Tensor> = start
            .iter()
            .map(|&l| {
                let z: f64 = StandardNormal.sample(rng);
                Tensor::scalar(l * (ws.jitter * z).exp())
            })
            .collect();
        let total: f64 = losses.iter().map(Tensor::item).sum();
        let graph = Graph::new();
        let vars = graph.vars(&phi);
        let gap = net.forward(&vars, &losses, &ids)?.shift(-total)?;
        let g = grad(&gap.square()?, &vars, false)?.to_arrays();
        opt.step(&mut phi, &g);
    }
    net.set_params(phi)
}

/// Cosine between the run's scheme and the exact hypergradient at the final
/// state, on the held-out set. `None` for fixed combiners, diverged runs and
/// learners above the dense-Hessian limit.
pub fn cosine_to_exact(record: &RunRecord, task: &TaskSpec) -> Result<Option<f64>> {
    let (Method::Meltr(scheme), Some(net)) = (record.config.scheme, &record.meltr) else { return Ok(None) };
    if record.divergence.is_some() || params::count(&record.learner) > super::EXACT_PARAM_LIMIT {
        return Ok(None);
    }
    let ids: Vec<usize> = (0..task.n_tasks()).collect();
    let eval = task.eval_batch();
    let problem = MeltrProblem {
        task,
        net,
        aux_batch: eval,
        pri_batch: eval,
        ids: &ids,
        gamma: record.config.gamma,
        mode: record.config.regularizer,
    };
    let (w, phi, cfg) = (&record.learner, net.params(), &record.config);
    let exact = super::hypergrad_exact(&problem, w, phi)?;
    let approx = hypergrad(&scheme, &problem, w, phi, cfg.alpha, cfg.flags.cg_truncate)?;
    Ok(Some(params::cosine(&approx.grads, &exact.grads)))
}

/// Run `cfg` on `task` from scratch.
pub fn train_loop(cfg: &TrainConfig, task: &TaskSpec) -> Result<RunRecord> {
    Trainer::new(cfg.clone(), task)?.run()
}
