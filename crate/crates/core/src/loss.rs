//! Assembly of the auxiliary and primary objectives.
//!
//! `L_aux = MELTR(ℓ; φ)`, `L_reg = |MELTR(ℓ; φ) − Σ_t ℓ_t|` and
//! `L_pri = ℓ_0 + γ · L_reg`.

use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::meltr_net::{LossVector, MeltrNet};

/// Regularization strengths swept by the γ ablation.
pub const GAMMA_ABLATION_GRID: [f64; 7] = [0.0, 0.001, 0.01, 0.1, 1.0, 10.0, 100.0];
/// Candidate strengths for tuning.
pub const GAMMA_SEARCH_SET: [f64; 3] = [0.1, 0.3, 0.5];
pub const DEFAULT_GAMMA: f64 = 0.3;

fn sum_all(losses: &[Tensor]) -> Result<Tensor> {
    let mut it = losses.iter();
    let first = it.next().ok_or_else(|| Error::InvalidInput("no losses".into()))?;
    let mut total = first.clone();
    for l in it {
        total = total.add(l)?;
    }
    Ok(total)
}

/// `|meltr_output − Σ ℓ|` from an already computed network output.
pub fn reg_from_output(meltr_output: &Tensor, losses: &[Tensor]) -> Result<Tensor> {
    Ok(meltr_output.sub(&sum_all(losses)?)?.abs()?)
}

/// `|MELTR(ℓ; φ) − Σ ℓ|`; the subgradient at the kink is zero.
pub fn reg_loss(net: &MeltrNet, params: &[Tensor], losses: &[Tensor], task_ids: &[usize]) -> Result<Tensor> {
    let out = net.forward(params, losses, task_ids)?;
    reg_from_output(&out, losses)
}

/// `ℓ_0 + γ · reg`.
pub fn primary_loss(primary: &Tensor, reg: &Tensor, gamma: f64) -> Result<Tensor> {
    check_gamma(gamma)?;
    Ok(primary.add(&reg.scale(gamma)?)?)
}

pub fn check_gamma(gamma: f64) -> Result<()> {
    if !(gamma >= 0.0) || !gamma.is_finite() {
        return Err(Error::InvalidConfig(format!("regularization strength must be a finite non-negative value, got {gamma}")));
    }
    Ok(())
}

/// `Σ_t c_t ℓ_t`.
pub fn fixed_weight_combiner(losses: &[Tensor], coeffs: &[f64]) -> Result<Tensor> {
    if losses.len() != coeffs.len() {
        return Err(Error::InvalidInput(format!("{} losses but {} coefficients", losses.len(), coeffs.len())));
    }
    let terms: Vec<Tensor> = losses
        .iter()
        .zip(coeffs)
        .map(|(l, &c)| l.scale(c))
        .collect::<std::result::Result<_, _>>()?;
    sum_all(&terms)
}

/// Plain-value snapshot of every objective for one loss vector.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossBundle {
    pub aux: f64,
    pub pri: f64,
    pub reg: f64,
    pub raw: LossVector,
    pub gamma: f64,
}

impl LossBundle {
    pub fn assemble(net: &MeltrNet, raw: &LossVector, gamma: f64) -> Result<Self> {
        check_gamma(gamma)?;
        let losses = raw.tensors();
        let out = net.forward(&net.constants(), &losses, &raw.task_ids)?;
        let reg = reg_from_output(&out, &losses)?;
        let pri = primary_loss(&losses[0], &reg, gamma)?;
        Ok(Self { aux: out.item(), pri: pri.item(), reg: reg.item(), raw: raw.clone(), gamma })
    }
}

/// Role of an auxiliary task in a synthetic suite.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskRole {
    Primary,
    Helpful,
    Harmful,
    Neutral,
}

/// Hand-designed coefficient patterns for fixed multi-task weighting.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum ManualScheme {
    /// Primary only.
    A,
    /// Primary and helpful tasks.
    B,
    /// Every coefficient 1.
    C,
    /// Every task except the harmful ones.
    D,
    /// As `D` with primary and helpful tasks weighted 8.
    E,
}

impl ManualScheme {
    pub const ALL: [ManualScheme; 5] = [ManualScheme::A, ManualScheme::B, ManualScheme::C, ManualScheme::D, ManualScheme::E];

    pub fn coefficients(self, roles: &[TaskRole]) -> Vec<f64> {
        roles
            .iter()
            .map(|role| {
                let strong = matches!(role, TaskRole::Primary | TaskRole::Helpful);
                match self {
                    ManualScheme::A => f64::from(*role == TaskRole::Primary),
                    ManualScheme::B => f64::from(strong),
                    ManualScheme::C => 1.0,
                    ManualScheme::D => f64::from(*role != TaskRole::Harmful),
                    ManualScheme::E => match role {
                        TaskRole::Harmful => 0.0,
                        _ if strong => 8.0,
                        _ => 1.0,
                    },
                }
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{gradient, Array};
    use crate::meltr_net::{MeltrConfig, Variant};
    use proptest::prelude::*;

    fn linear_net(coef: &[f64], bias: f64) -> MeltrNet {
        let mut net = MeltrNet::new(MeltrConfig::desk(coef.len()).with_variant(Variant::Linear), 0).unwrap();
        net.set_params(vec![
            Array::new(vec![coef.len(), 1], coef.to_vec()).unwrap(),
            Array::new(vec![1, 1], vec![bias]).unwrap(),
        ])
        .unwrap();
        net
    }

    #[test]
    fn reg_is_zero_when_output_matches_sum() {
        // all-ones linear net outputs exactly Σℓ = 6
        let net = linear_net(&[1.0, 1.0, 1.0], 0.0);
        let lv = LossVector::new(vec![1.0, 2.0, 3.0]).unwrap();
        let r = reg_loss(&net, &net.constants(), &lv.tensors(), &lv.task_ids).unwrap();
        assert_eq!(r.item(), 0.0);
    }

    #[test]
    fn reg_is_distance_to_sum() {
        let net = linear_net(&[1.0, 1.0, 1.0], -1.0);
        let lv = LossVector::new(vec![1.0, 2.0, 3.0]).unwrap();
        let b = LossBundle::assemble(&net, &lv, 0.1).unwrap();
        assert_eq!(b.aux, 5.0);
        assert_eq!(b.reg, 1.0);
        assert!((b.pri - 1.1).abs() < 1e-15);
    }

    #[test]
    fn reg_kink_has_zero_subgradient() {
        let net = linear_net(&[1.0, 1.0], 0.0);
        let lv = LossVector::new(vec![0.5, 0.25]).unwrap();
        let g = gradient(
            |p| {
                reg_loss(&net, p, &lv.tensors(), &lv.task_ids).map_err(|e| match e {
                    Error::Autodiff(a) => a,
                    other => panic!("{other}"),
                })
            },
            net.params(),
        )
        .unwrap();
        assert!(g.iter().all(|a| a.data().iter().all(|&v| v == 0.0)));
    }

    #[test]
    fn primary_loss_arithmetic() {
        let l0 = Tensor::scalar(2.0);
        let reg = Tensor::scalar(0.5);
        assert_eq!(primary_loss(&l0, &reg, 0.0).unwrap().item(), 2.0);
        assert!((primary_loss(&l0, &reg, 0.1).unwrap().item() - 2.05).abs() < 1e-15);
        assert!(primary_loss(&l0, &reg, -0.1).is_err());
        assert!(primary_loss(&l0, &reg, f64::NAN).is_err());
    }

    #[test]
    fn gamma_constants() {
        assert_eq!(GAMMA_ABLATION_GRID, [0.0, 0.001, 0.01, 0.1, 1.0, 10.0, 100.0]);
        assert_eq!(GAMMA_SEARCH_SET, [0.1, 0.3, 0.5]);
        assert_eq!(DEFAULT_GAMMA, 0.3);
    }

    #[test]
    fn combiner_rows() {
        let roles = [TaskRole::Primary, TaskRole::Helpful, TaskRole::Harmful, TaskRole::Neutral];
        let lv = LossVector::new(vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let eval = |s: ManualScheme| fixed_weight_combiner(&lv.tensors(), &s.coefficients(&roles)).unwrap().item();
        assert_eq!(eval(ManualScheme::C), 10.0);
        assert_eq!(eval(ManualScheme::A), 1.0);
        assert_eq!(ManualScheme::B.coefficients(&roles), vec![1.0, 1.0, 0.0, 0.0]);
        assert_eq!(ManualScheme::D.coefficients(&roles), vec![1.0, 1.0, 0.0, 1.0]);
        assert_eq!(ManualScheme::E.coefficients(&roles), vec![8.0, 8.0, 0.0, 1.0]);
        assert!(fixed_weight_combiner(&lv.tensors(), &[1.0]).is_err());
    }

    proptest! {
        #[test]
        fn combiner_is_linear(
            l1 in prop::collection::vec(-3.0f64..3.0, 3),
            l2 in prop::collection::vec(-3.0f64..3.0, 3),
            c in prop::collection::vec(-2.0f64..2.0, 3),
            a in -2.0f64..2.0,
            b in -2.0f64..2.0,
        ) {
            let t = |v: &[f64]| v.iter().map(|&x| Tensor::scalar(x)).collect::<Vec<_>>();
            let mixed: Vec<f64> = l1.iter().zip(&l2).map(|(x, y)| a * x + b * y).collect();
            let lhs = fixed_weight_combiner(&t(&mixed), &c).unwrap().item();
            let rhs = a * fixed_weight_combiner(&t(&l1), &c).unwrap().item() + b * fixed_weight_combiner(&t(&l2), &c).unwrap().item();
            prop_assert!((lhs - rhs).abs() <= 1e-12 * (1.0 + lhs.abs()));
        }

        #[test]
        fn reg_non_negative(losses in prop::collection::vec(0.0f64..4.0, 3), seed in 0u64..50) {
            let net = MeltrNet::new(MeltrConfig::desk(3), seed).unwrap();
            let b = LossBundle::assemble(&net, &LossVector::new(losses).unwrap(), 0.3).unwrap();
            prop_assert!(b.reg >= 0.0);
            prop_assert_eq!(b.pri, b.raw.entries[0] + 0.3 * b.reg);
        }
    }
}
