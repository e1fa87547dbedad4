use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Array, Tensor};
use crate::error::{Error, Result};
use crate::loss::TaskRole;

use super::learner::{squared_error, LearnerSpec};
use super::Batch;

pub const HIDDEN: usize = 16;
/// Helpful targets are the primary target plus noise of this many target
/// standard deviations.
pub const HELPFUL_NOISE: f64 = 0.1;
const FN_HIDDEN: usize = 16;
const FN_GAIN: f64 = 1.5;
const CALIBRATION_POINTS: usize = 4096;

/// Zero-mean random function `a · tanh(B x)`, rescaled to unit standard
/// deviation under `x ~ N(0, I)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RandomFn {
    b: Array,
    a: Vec<f64>,
    scale: f64,
    /// Function and coefficient subtracted from the raw output.
    other: Option<(Box<RandomFn>, f64)>,
}

impl RandomFn {
    pub fn sample(rng: &mut impl Rng, dims: usize) -> Self {
        Self::sample_avoiding(rng, dims, None)
    }

    /// Sample a function blind to the input direction along which `other`
    /// is most linear, then remove any remaining correlation with `other`.
    pub fn sample_independent_of(rng: &mut impl Rng, other: &RandomFn) -> Self {
        Self::sample_avoiding(rng, other.b.cols(), Some(other))
    }

    fn sample_avoiding(rng: &mut impl Rng, dims: usize, other: Option<&RandomFn>) -> Self {
        let mut normal = |scale: f64| -> f64 {
            let z: f64 = StandardNormal.sample(rng);
            z * scale
        };
        let b: Vec<f64> = (0..FN_HIDDEN * dims).map(|_| normal(FN_GAIN / (dims as f64).sqrt())).collect();
        let a: Vec<f64> = (0..FN_HIDDEN).map(|_| normal(1.0 / (FN_HIDDEN as f64).sqrt())).collect();
        let mut b = b;
        let xs = standard_normal(rng, CALIBRATION_POINTS, dims);
        let mut other_ys = None;
        if let Some(o) = other {
            let oy = o.eval(&xs);
            // least-squares linear coefficients of `other` under isotropic inputs
            let mut u: Vec<f64> = (0..dims).map(|k| (0..xs.rows()).map(|i| xs.get2(i, k) * oy[i]).sum()).collect();
            let un = u.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
            u.iter_mut().for_each(|v| *v /= un);
            for row in b.chunks_mut(dims) {
                let d: f64 = row.iter().zip(&u).map(|(p, q)| p * q).sum();
                row.iter_mut().zip(&u).for_each(|(p, q)| *p -= d * q);
            }
            other_ys = Some(oy);
        }
        let mut f = Self { b: Array::new(vec![FN_HIDDEN, dims], b).expect("shape"), a, scale: 1.0, other: None };
        if let (Some(o), Some(oy)) = (other, other_ys) {
            let ys = f.eval(&xs);
            let c = ys.iter().zip(&oy).map(|(p, q)| p * q).sum::<f64>() / oy.iter().map(|q| q * q).sum::<f64>();
            f.other = Some((Box::new(o.clone()), c));
        }
        let ys = f.eval(&xs);
        let mean = ys.iter().sum::<f64>() / ys.len() as f64;
        let var = ys.iter().map(|y| (y - mean).powi(2)).sum::<f64>() / ys.len() as f64;
        f.scale = var.sqrt().max(1e-12);
        f
    }

    /// One value per row of a `[n, dims]` input.
    pub fn eval(&self, x: &Array) -> Vec<f64> {
        let (n, dims) = (x.rows(), x.cols());
        let (b, xd) = (self.b.data(), x.data());
        let other = self.other.as_ref().map(|(o, c)| (o.eval(x), *c));
        (0..n)
            .map(|i| {
                let row = &xd[i * dims..(i + 1) * dims];
                let mut y = 0.0;
                for (j, aj) in self.a.iter().enumerate() {
                    let pre: f64 = b[j * dims..(j + 1) * dims].iter().zip(row).map(|(p, q)| p * q).sum();
                    y += aj * pre.tanh();
                }
                if let Some((oy, c)) = &other {
                    y -= c * oy[i];
                }
                y / self.scale
            })
            .collect()
    }
}

pub(crate) fn standard_normal(rng: &mut impl Rng, n: usize, dims: usize) -> Array {
    let data = (0..n * dims).map(|_| StandardNormal.sample(rng)).collect();
    Array::new(vec![n, dims], data).expect("shape")
}

/// Primary target `f(x)`; helpful `f(x)` plus noise; harmful an independent
/// random function; neutral reconstructs `x`. Scalar targets share one
/// output head, reconstruction has its own.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RegressionSuite {
    pub dims: usize,
    /// Width of both trunk layers of the learner.
    pub hidden: usize,
    pub roles: Vec<TaskRole>,
    target: RandomFn,
    /// Independent target per harmful task, `None` elsewhere.
    harmful: Vec<Option<RandomFn>>,
}

impl RegressionSuite {
    /// Aux roles cycle helpful, harmful, neutral.
    pub fn new(rng: &mut impl Rng, n_tasks: usize, dims: usize) -> Result<Self> {
        if n_tasks < 2 {
            return Err(Error::InvalidConfig("a suite needs at least one auxiliary task".into()));
        }
        if dims == 0 || dims > 64 {
            return Err(Error::InvalidConfig(format!("dims must be in 1..=64, got {dims}")));
        }
        const CYCLE: [TaskRole; 3] = [TaskRole::Helpful, TaskRole::Harmful, TaskRole::Neutral];
        let roles: Vec<TaskRole> =
            std::iter::once(TaskRole::Primary).chain((0..n_tasks - 1).map(|i| CYCLE[i % 3])).collect();
        let target = RandomFn::sample(rng, dims);
        let harmful = roles
            .iter()
            .map(|r| (*r == TaskRole::Harmful).then(|| RandomFn::sample_independent_of(rng, &target)))
            .collect();
        Ok(Self { dims, hidden: HIDDEN, roles, target, harmful })
    }

    pub fn learner(&self) -> LearnerSpec {
        let mut heads = vec![1];
        if self.roles.contains(&TaskRole::Neutral) {
            heads.push(self.dims);
        }
        LearnerSpec::new(vec![self.dims, self.hidden, self.hidden], heads).expect("valid layout")
    }

    pub fn primary_target(&self, x: &Array) -> Vec<f64> {
        self.target.eval(x)
    }

    pub fn sample(&self, rng: &mut impl Rng, n: usize) -> Batch {
        let x = standard_normal(rng, n, self.dims);
        let f = self.target.eval(&x);
        let column = |v: Vec<f64>| Array::new(vec![n, 1], v).expect("shape");
        let targets = self
            .roles
            .iter()
            .zip(&self.harmful)
            .map(|(role, g)| match role {
                TaskRole::Primary => column(f.clone()),
                TaskRole::Helpful => column(
                    f.iter()
                        .map(|y| {
                            let z: f64 = StandardNormal.sample(rng);
                            y + HELPFUL_NOISE * z
                        })
                        .collect(),
                ),
                TaskRole::Harmful => column(g.as_ref().expect("harmful fn").eval(&x)),
                TaskRole::Neutral => x.clone(),
            })
            .collect();
        Batch { inputs: vec![x], targets }
    }

    pub fn sample_losses(&self, learner: &LearnerSpec, w: &[Tensor], batch: &Batch) -> Result<Vec<Tensor>> {
        let x = Tensor::constant(batch.inputs[0].clone());
        let feats = learner.features(w, &x)?;
        let pred = learner.head(w, &feats, 0)?;
        let recon = if self.roles.contains(&TaskRole::Neutral) { Some(learner.head(w, &feats, 1)?) } else { None };
        self.roles
            .iter()
            .zip(&batch.targets)
            .map(|(role, y)| match role {
                TaskRole::Neutral => squared_error(recon.as_ref().expect("recon head"), y),
                _ => squared_error(&pred, y),
            })
            .collect()
    }
}
