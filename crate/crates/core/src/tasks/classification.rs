use rand::Rng;
use rand_distr::{Beta, Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Array, Tensor};
use crate::error::Result;
use crate::loss::TaskRole;

use super::learner::{cross_entropy, LearnerSpec};
use super::Batch;

pub const CLASSES: usize = 4;
pub const ROTATIONS: usize = 4;
pub const HIDDEN: usize = 32;
pub const BLOB_STD: f64 = 0.5;
const CENTER_RANGE: f64 = 3.0;
const MIN_SEPARATION: f64 = 3.0;
const MIXUP_ALPHA: f64 = 0.4;

/// Two-dimensional Gaussian blobs. Tasks: class cross-entropy, mixup
/// cross-entropy on interpolated inputs, and rotation prediction.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassificationSuite {
    pub centers: Vec<[f64; 2]>,
    pub roles: Vec<TaskRole>,
}

/// `x` rotated counter-clockwise by `quarter_turns · 90°`.
pub fn rotate(x: [f64; 2], quarter_turns: usize) -> [f64; 2] {
    match quarter_turns % 4 {
        0 => x,
        1 => [-x[1], x[0]],
        2 => [-x[0], -x[1]],
        _ => [x[1], -x[0]],
    }
}

/// Interpolated input and soft label for one mixup pair.
pub fn mixup(xa: [f64; 2], ya: usize, xb: [f64; 2], yb: usize, lambda: f64) -> ([f64; 2], [f64; CLASSES]) {
    let x = [lambda * xa[0] + (1.0 - lambda) * xb[0], lambda * xa[1] + (1.0 - lambda) * xb[1]];
    let mut y = [0.0; CLASSES];
    y[ya] += lambda;
    y[yb] += 1.0 - lambda;
    (x, y)
}

fn one_hot(rows: &[usize], k: usize) -> Array {
    let mut data = vec![0.0; rows.len() * k];
    for (i, &c) in rows.iter().enumerate() {
        data[i * k + c] = 1.0;
    }
    Array::new(vec![rows.len(), k], data).expect("shape")
}

impl ClassificationSuite {
    pub fn new(rng: &mut impl Rng) -> Self {
        let mut centers: Vec<[f64; 2]> = Vec::with_capacity(CLASSES);
        while centers.len() < CLASSES {
            let c = [rng.random_range(-CENTER_RANGE..CENTER_RANGE), rng.random_range(-CENTER_RANGE..CENTER_RANGE)];
            if centers.iter().all(|o| ((o[0] - c[0]).powi(2) + (o[1] - c[1]).powi(2)).sqrt() >= MIN_SEPARATION) {
                centers.push(c);
            }
        }
        Self { centers, roles: vec![TaskRole::Primary, TaskRole::Helpful, TaskRole::Neutral] }
    }

    pub fn learner(&self) -> LearnerSpec {
        LearnerSpec::new(vec![2, HIDDEN, HIDDEN], vec![CLASSES, ROTATIONS]).expect("valid layout")
    }

    fn point(&self, rng: &mut impl Rng) -> ([f64; 2], usize) {
        let c = rng.random_range(0..CLASSES);
        let (zx, zy): (f64, f64) = (StandardNormal.sample(rng), StandardNormal.sample(rng));
        ([self.centers[c][0] + BLOB_STD * zx, self.centers[c][1] + BLOB_STD * zy], c)
    }

    /// Inputs: points, mixed points, rotated points. Targets: class one-hot,
    /// mixup soft labels, rotation one-hot.
    pub fn sample(&self, rng: &mut impl Rng, n: usize) -> Batch {
        let beta = Beta::new(MIXUP_ALPHA, MIXUP_ALPHA).expect("valid beta");
        let (mut xs, mut ys, mut mx, mut my, mut rx, mut ry) = (vec![], vec![], vec![], vec![], vec![], vec![]);
        for _ in 0..n {
            let (xa, ya) = self.point(rng);
            let (xb, yb) = self.point(rng);
            let lambda = beta.sample(rng);
            let (m, soft) = mixup(xa, ya, xb, yb, lambda);
            let k = rng.random_range(0..ROTATIONS);
            xs.extend(xa);
            ys.push(ya);
            mx.extend(m);
            my.extend(soft);
            rx.extend(rotate(xa, k));
            ry.push(k);
        }
        let mat = |d: Vec<f64>, k: usize| Array::new(vec![n, k], d).expect("shape");
        Batch {
            inputs: vec![mat(xs, 2), mat(mx, 2), mat(rx, 2)],
            targets: vec![one_hot(&ys, CLASSES), mat(my, CLASSES), one_hot(&ry, ROTATIONS)],
        }
    }

    pub fn sample_losses(&self, learner: &LearnerSpec, w: &[Tensor], batch: &Batch) -> Result<Vec<Tensor>> {
        let logits = |input: usize, head: usize| -> Result<Tensor> {
            let feats = learner.features(w, &Tensor::constant(batch.inputs[input].clone()))?;
            learner.head(w, &feats, head)
        };
        Ok(vec![
            cross_entropy(&logits(0, 0)?, &batch.targets[0])?,
            cross_entropy(&logits(1, 0)?, &batch.targets[1])?,
            cross_entropy(&logits(2, 1)?, &batch.targets[2])?,
        ])
    }

    /// Fraction of rows of `batch` whose class logit argmax is correct.
    pub fn accuracy(&self, learner: &LearnerSpec, w: &[Array], batch: &Batch) -> Result<f64> {
        let consts: Vec<Tensor> = w.iter().cloned().map(Tensor::constant).collect();
        let feats = learner.features(&consts, &Tensor::constant(batch.inputs[0].clone()))?;
        let logits = learner.head(&consts, &feats, 0)?;
        let (n, k) = (logits.shape()[0], logits.shape()[1]);
        let (l, t) = (logits.value().data(), batch.targets[0].data());
        let argmax = |row: &[f64]| row.iter().enumerate().fold(0, |best, (i, v)| if *v > row[best] { i } else { best });
        let correct = (0..n).filter(|&i| argmax(&l[i * k..(i + 1) * k]) == argmax(&t[i * k..(i + 1) * k])).count();
        Ok(correct as f64 / n as f64)
    }
}
