//! Hypergradient schemes and the interleaved inner/outer training loop.
//!
//! Every scheme returns an estimate of the indirect hypergradient
//! `∇_φ L_pri(w*(φ))`; descent applies the minus sign.

mod hypergrad;
mod optim;
mod train;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};

pub use hypergrad::{
    hypergrad, hypergrad_cg, hypergrad_exact, hypergrad_identity, hypergrad_neumann, hypergrad_unrolled, inner_step,
    mixed_contract, outer_step, pri_partials, CgOptions, Curvature, Hypergrad, DEFAULT_CG_MAXIT, DEFAULT_CG_TOL,
    EXACT_CONDITION_LIMIT, EXACT_PARAM_LIMIT, UNROLL_LIMIT,
};
pub use optim::{clip_to_norm, Adam};
pub use train::{
    cosine_to_exact, train_loop, Divergence, EpochMetrics, Flags, LossRange, MeltrSettings, Method, OuterOptimizer, RegularizerMode, RunRecord, TrainConfig,
    Trainer, WarmStart, DIVERGENCE_LIMIT,
};

/// Default Neumann truncation.
pub const DEFAULT_NEUMANN_TERMS: usize = 3;
/// Inner steps per outer step.
pub const DEFAULT_K: usize = 3;
/// Learning rates for full-size backbones.
pub const FULL_SCALE_ALPHA: f64 = 3e-5;
pub const FULL_SCALE_BETA: f64 = 1e-4;

/// A lower objective `L_aux(w, φ)` and an upper objective `L_pri(w, φ)`.
///
/// Schemes differentiate `pri` in `w` for the indirect path; its direct
/// dependence on `φ` is reported separately.
pub trait Bilevel {
    fn aux(&self, w: &[Tensor], phi: &[Tensor]) -> Result<Tensor>;
    fn pri(&self, w: &[Tensor], phi: &[Tensor]) -> Result<Tensor>;
}

/// A [`Bilevel`] made from two closures.
pub struct FnBilevel<A, P> {
    pub aux: A,
    pub pri: P,
}

impl<A, P> Bilevel for FnBilevel<A, P>
where
    A: Fn(&[Tensor], &[Tensor]) -> Result<Tensor>,
    P: Fn(&[Tensor], &[Tensor]) -> Result<Tensor>,
{
    fn aux(&self, w: &[Tensor], phi: &[Tensor]) -> Result<Tensor> {
        (self.aux)(w, phi)
    }

    fn pri(&self, w: &[Tensor], phi: &[Tensor]) -> Result<Tensor> {
        (self.pri)(w, phi)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum HypergradScheme {
    /// Dense Hessian, LU solve.
    Exact,
    /// Neumann series truncated after `i` terms beyond the identity.
    Neumann(usize),
    /// Identity in place of the inverse Hessian.
    IdentityLite,
    ConjugateGradient { tol: f64, maxit: usize },
    /// Backpropagation through unrolled inner steps.
    Unrolled(usize),
}

impl HypergradScheme {
    pub fn validate(&self) -> Result<()> {
        match *self {
            HypergradScheme::ConjugateGradient { tol, maxit } if !(tol > 0.0) || maxit == 0 => {
                Err(Error::InvalidConfig(format!("cg needs tol > 0 and maxit >= 1, got {tol} and {maxit}")))
            }
            HypergradScheme::Unrolled(0) => Err(Error::InvalidConfig("unrolled needs at least one step".into())),
            _ => Ok(()),
        }
    }
}

impl fmt::Display for HypergradScheme {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            HypergradScheme::Exact => write!(f, "exact"),
            HypergradScheme::Neumann(i) => write!(f, "neumann:{i}"),
            HypergradScheme::IdentityLite => write!(f, "identity"),
            HypergradScheme::ConjugateGradient { tol, maxit } => write!(f, "cg:{tol:e}:{maxit}"),
            HypergradScheme::Unrolled(k) => write!(f, "unrolled:{k}"),
        }
    }
}

impl FromStr for HypergradScheme {
    type Err = Error;

    /// `exact | neumann[:i] | identity | cg[:tol[:maxit]] | unrolled[:k]`
    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::InvalidConfig(format!("cannot parse scheme {s:?}"));
        let mut parts = s.trim().split(':');
        let head = parts.next().unwrap_or_default();
        let args: Vec<&str> = parts.collect();
        let uint = |a: &str| a.parse::<usize>().map_err(|_| bad());
        let scheme = match (head, args.as_slice()) {
            ("exact", []) => HypergradScheme::Exact,
            ("identity", []) => HypergradScheme::IdentityLite,
            ("neumann", []) => HypergradScheme::Neumann(DEFAULT_NEUMANN_TERMS),
            ("neumann", [i]) => HypergradScheme::Neumann(uint(i)?),
            ("cg", []) => HypergradScheme::ConjugateGradient { tol: DEFAULT_CG_TOL, maxit: DEFAULT_CG_MAXIT },
            ("cg", [tol]) => HypergradScheme::ConjugateGradient { tol: tol.parse().map_err(|_| bad())?, maxit: DEFAULT_CG_MAXIT },
            ("cg", [tol, maxit]) => HypergradScheme::ConjugateGradient { tol: tol.parse().map_err(|_| bad())?, maxit: uint(maxit)? },
            ("unrolled", []) => HypergradScheme::Unrolled(DEFAULT_K),
            ("unrolled", [k]) => HypergradScheme::Unrolled(uint(k)?),
            _ => return Err(bad()),
        };
        scheme.validate()?;
        Ok(scheme)
    }
}

impl Serialize for HypergradScheme {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for HypergradScheme {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

#[cfg(test)]
mod tests;
