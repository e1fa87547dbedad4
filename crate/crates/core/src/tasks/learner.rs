use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Array, Tensor};
use crate::error::{Error, Result};
use crate::init;

/// A tanh MLP trunk with independent linear heads on its last features.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LearnerSpec {
    /// Input width followed by every hidden width.
    pub trunk: Vec<usize>,
    /// Output width of each head.
    pub heads: Vec<usize>,
}

impl LearnerSpec {
    pub fn new(trunk: Vec<usize>, heads: Vec<usize>) -> Result<Self> {
        if trunk.len() < 2 || trunk.contains(&0) || heads.is_empty() || heads.contains(&0) {
            return Err(Error::InvalidConfig(format!("bad learner layout trunk={trunk:?} heads={heads:?}")));
        }
        Ok(Self { trunk, heads })
    }

    /// Layer widths with all heads stacked into one output layer.
    pub fn widths(&self) -> Vec<usize> {
        let mut w = self.trunk.clone();
        w.push(self.heads.iter().sum());
        w
    }

    pub fn param_count(&self) -> usize {
        let trunk: usize = self.trunk.windows(2).map(|p| p[0] * p[1] + p[1]).sum();
        let feat = *self.trunk.last().expect("validated");
        trunk + self.heads.iter().map(|&k| feat * k + k).sum::<usize>()
    }

    /// Weights uniform in `±1/sqrt(fan_in)`, biases zero.
    pub fn init(&self, rng: &mut impl Rng) -> Vec<Array> {
        let mut out = Vec::new();
        let mut layer = |fan_in: usize, fan_out: usize| {
            out.push(init::uniform(rng, &[fan_in, fan_out], 1.0 / (fan_in as f64).sqrt()));
            out.push(Array::zeros(&[1, fan_out]));
        };
        for p in self.trunk.windows(2) {
            layer(p[0], p[1]);
        }
        let feat = *self.trunk.last().expect("validated");
        for &k in &self.heads {
            layer(feat, k);
        }
        out
    }

    fn trunk_layers(&self) -> usize {
        self.trunk.len() - 1
    }

    pub fn check(&self, params: &[Tensor]) -> Result<()> {
        let expected = 2 * (self.trunk_layers() + self.heads.len());
        if params.len() != expected {
            return Err(Error::InvalidInput(format!("learner expects {expected} arrays, got {}", params.len())));
        }
        Ok(())
    }

    /// Trunk features `[n, trunk.last()]` of a `[n, trunk[0]]` input.
    pub fn features(&self, params: &[Tensor], x: &Tensor) -> Result<Tensor> {
        self.check(params)?;
        let mut h = x.clone();
        for l in 0..self.trunk_layers() {
            h = h.affine(&params[2 * l], &params[2 * l + 1])?.tanh()?;
        }
        Ok(h)
    }

    pub fn head(&self, params: &[Tensor], features: &Tensor, head: usize) -> Result<Tensor> {
        let base = 2 * (self.trunk_layers() + head);
        if head >= self.heads.len() {
            return Err(Error::InvalidInput(format!("no head {head}")));
        }
        Ok(features.affine(&params[base], &params[base + 1])?)
    }
}

/// Row means of a `[n, k]` matrix as `[n, 1]`.
pub(crate) fn row_mean(x: &Tensor) -> Result<Tensor> {
    let k = x.shape()[1];
    Ok(x.matmul(&Tensor::constant(Array::ones(&[k, 1])))?.scale(1.0 / k as f64)?)
}

/// Per-sample squared error averaged over output columns, `[n, 1]`.
pub(crate) fn squared_error(pred: &Tensor, target: &Array) -> Result<Tensor> {
    let diff = pred.sub(&Tensor::constant(target.clone()))?;
    row_mean(&diff.square()?)
}

/// Per-sample cross-entropy against (possibly soft) target rows, `[n, 1]`.
pub(crate) fn cross_entropy(logits: &Tensor, targets: &Array) -> Result<Tensor> {
    let k = logits.shape()[1];
    let picked = logits.log_softmax_rows()?.mul(&Tensor::constant(targets.clone()))?;
    Ok(picked.matmul(&Tensor::constant(Array::ones(&[k, 1])))?.neg()?)
}
