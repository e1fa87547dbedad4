//! Synthetic problems with known structure: a quadratic bi-level oracle and
//! multi-task learner suites with designed helpful and harmful tasks.

mod classification;
mod learner;
mod quadratic;
mod regression;

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Array, Tensor};
use crate::error::{Error, Result};
use crate::init::SeededRng;
use crate::loss::TaskRole;

pub use classification::{mixup, rotate, ClassificationSuite, BLOB_STD, CLASSES, ROTATIONS};
pub use learner::LearnerSpec;
pub use quadratic::{quad_closed_form, random_spd, QuadSolution, QuadraticTestbed};
pub use regression::{RandomFn, RegressionSuite, HELPFUL_NOISE};

pub const EVAL_POINTS: usize = 1000;

/// Inputs and per-task targets for one minibatch; the layout is owned by
/// the problem that produced it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Batch {
    pub inputs: Vec<Array>,
    pub targets: Vec<Array>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.inputs[0].rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Independent random streams drawn from one run seed.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Split {
    /// Inner-step batches.
    Train,
    /// Fresh training batches for the outer step's mixed derivative.
    Outer,
    /// Batches for the primary objective.
    Validation,
    /// Learner initialization.
    Init,
    /// Anything else a run needs (meta-network init, warm start).
    Aux,
}

impl Split {
    fn stream_id(self) -> u64 {
        match self {
            Split::Train => 1,
            Split::Outer => 2,
            Split::Validation => 3,
            Split::Init => 4,
            Split::Aux => 5,
        }
    }
}

/// Seeded generator for one split of one run.
pub fn split_rng(seed: u64, split: Split) -> SeededRng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(split.stream_id());
    rng
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum Problem {
    Regression(RegressionSuite),
    Classification(ClassificationSuite),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SuiteMetadata {
    pub kind: String,
    pub seed: u64,
    pub input_dims: usize,
    pub n_tasks: usize,
    pub roles: Vec<TaskRole>,
    pub learner_widths: Vec<usize>,
    pub learner_params: usize,
    /// Helpful-task noise std relative to the primary target std.
    pub helpful_noise: Option<f64>,
    pub notes: String,
}

/// A multi-task learner problem: index 0 is the primary task.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub name: String,
    pub roles: Vec<TaskRole>,
    pub learner: LearnerSpec,
    pub metadata: SuiteMetadata,
    problem: Problem,
    eval: Batch,
}

/// A cloneable stream of minibatches.
#[derive(Clone, Debug)]
pub struct BatchStream {
    problem: Problem,
    rng: SeededRng,
    batch_size: usize,
}

impl BatchStream {
    pub fn next_batch(&mut self) -> Batch {
        sample(&self.problem, &mut self.rng, self.batch_size)
    }
}

fn sample(problem: &Problem, rng: &mut SeededRng, n: usize) -> Batch {
    match problem {
        Problem::Regression(s) => s.sample(rng, n),
        Problem::Classification(s) => s.sample(rng, n),
    }
}

impl TaskSpec {
    fn build(name: &str, seed: u64, problem: Problem, learner: LearnerSpec, roles: Vec<TaskRole>, notes: &str) -> Self {
        let mut eval_rng = ChaCha8Rng::seed_from_u64(seed);
        eval_rng.set_stream(99);
        let eval = sample(&problem, &mut eval_rng, EVAL_POINTS);
        let (input_dims, helpful_noise) = match &problem {
            Problem::Regression(s) => (s.dims, Some(HELPFUL_NOISE)),
            Problem::Classification(_) => (2, None),
        };
        let metadata = SuiteMetadata {
            kind: name.into(),
            seed,
            input_dims,
            n_tasks: roles.len(),
            roles: roles.clone(),
            learner_widths: learner.widths(),
            learner_params: learner.param_count(),
            helpful_noise,
            notes: notes.into(),
        };
        Self { name: name.into(), roles, learner, metadata, problem, eval }
    }

    pub fn n_tasks(&self) -> usize {
        self.roles.len()
    }

    pub fn problem(&self) -> &Problem {
        &self.problem
    }

    pub fn init_learner(&self, seed: u64) -> Vec<Array> {
        self.learner.init(&mut split_rng(seed, Split::Init))
    }

    pub fn stream(&self, split: Split, seed: u64, batch_size: usize) -> BatchStream {
        BatchStream { problem: self.problem.clone(), rng: split_rng(seed, split), batch_size }
    }

    /// Fixed held-out set, identical for every run on this suite.
    pub fn eval_batch(&self) -> &Batch {
        &self.eval
    }

    /// Per-sample losses, one `[n, 1]` column per task.
    pub fn sample_losses(&self, w: &[Tensor], batch: &Batch) -> Result<Vec<Tensor>> {
        match &self.problem {
            Problem::Regression(s) => s.sample_losses(&self.learner, w, batch),
            Problem::Classification(s) => s.sample_losses(&self.learner, w, batch),
        }
    }

    /// Batch-mean loss of every task as scalars.
    pub fn task_losses(&self, w: &[Tensor], batch: &Batch) -> Result<Vec<Tensor>> {
        self.sample_losses(w, batch)?.iter().map(|l| Ok(l.mean()?)).collect()
    }

    /// Batch-mean losses as plain values.
    pub fn loss_values(&self, w: &[Array], batch: &Batch) -> Result<Vec<f64>> {
        let consts: Vec<Tensor> = w.iter().cloned().map(Tensor::constant).collect();
        Ok(self.task_losses(&consts, batch)?.iter().map(Tensor::item).collect())
    }

    /// Per-sample loss values, one vector per task.
    pub fn sample_loss_values(&self, w: &[Array], batch: &Batch) -> Result<Vec<Vec<f64>>> {
        let consts: Vec<Tensor> = w.iter().cloned().map(Tensor::constant).collect();
        Ok(self.sample_losses(&consts, batch)?.iter().map(|t| t.value().data().to_vec()).collect())
    }
}

/// Regression suite with `n_tasks` tasks (primary first) on `dims`-dimensional
/// standard normal inputs.
pub fn make_regression_suite(seed: u64, n_tasks: usize, dims: usize) -> Result<TaskSpec> {
    make_regression_suite_sized(seed, n_tasks, dims, regression::HIDDEN)
}

/// As [`make_regression_suite`] with a learner trunk of width `hidden`.
pub fn make_regression_suite_sized(seed: u64, n_tasks: usize, dims: usize, hidden: usize) -> Result<TaskSpec> {
    if hidden == 0 {
        return Err(Error::InvalidConfig("hidden width must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut suite = RegressionSuite::new(&mut rng, n_tasks, dims)?;
    suite.hidden = hidden;
    let learner = suite.learner();
    let roles = suite.roles.clone();
    Ok(TaskSpec::build(
        "regression",
        seed,
        Problem::Regression(suite),
        learner,
        roles,
        "primary/helpful/harmful share the scalar output head; neutral reconstructs the input through its own head",
    ))
}

/// Four-class blob classification with mixup and rotation auxiliaries.
pub fn make_classification_suite(seed: u64) -> TaskSpec {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let suite = ClassificationSuite::new(&mut rng);
    let learner = suite.learner();
    let roles = suite.roles.clone();
    TaskSpec::build(
        "classification",
        seed,
        Problem::Classification(suite),
        learner,
        roles,
        "class and mixup losses share the class head; rotation has its own head",
    )
}

/// Suite by name with default sizes.
pub fn suite_by_name(name: &str, seed: u64) -> Result<TaskSpec> {
    SuiteOptions::default().build(name, seed)
}

/// Size knobs for the regression suite; the classification suite is fixed.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SuiteOptions {
    pub tasks: usize,
    pub dims: usize,
    pub hidden: usize,
}

impl Default for SuiteOptions {
    fn default() -> Self {
        Self { tasks: 4, dims: 8, hidden: regression::HIDDEN }
    }
}

impl SuiteOptions {
    pub fn build(&self, name: &str, seed: u64) -> Result<TaskSpec> {
        match name {
            "regression" => make_regression_suite_sized(seed, self.tasks, self.dims, self.hidden),
            "classification" => Ok(make_classification_suite(seed)),
            other => Err(Error::InvalidConfig(format!("unknown suite {other:?}"))),
        }
    }
}
