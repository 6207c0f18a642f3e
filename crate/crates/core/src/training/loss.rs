use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::numerics::{Graph, Real, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LossKind {
    /// `ln(1 + |y − μ| / (σ + ε))`
    Ours,
    Mse,
    Mae,
}

impl fmt::Display for LossKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            LossKind::Ours => "ours",
            LossKind::Mse => "mse",
            LossKind::Mae => "mae",
        })
    }
}

impl FromStr for LossKind {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "ours" => Ok(LossKind::Ours),
            "mse" => Ok(LossKind::Mse),
            "mae" => Ok(LossKind::Mae),
            _ => Err(format!("expected ours, mse or mae, got {s:?}")),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossConfig {
    pub kind: LossKind,
    pub epsilon: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            kind: LossKind::Mse,
            epsilon: 0.01,
        }
    }
}

impl LossConfig {
    pub fn mse() -> Self {
        Self::default()
    }

    pub fn validate(&self) -> Result<()> {
        if self.epsilon > 0.0 {
            Ok(())
        } else {
            Err(Error::config(format!(
                "loss epsilon {} must be positive",
                self.epsilon
            )))
        }
    }

    /// Scalar loss for one prediction.
    pub fn eval(&self, y: f64, mu: f64, sigma: Option<f64>) -> Result<f64> {
        match self.kind {
            LossKind::Mse => Ok(loss_mse(y, mu)),
            LossKind::Mae => Ok(loss_mae(y, mu)),
            LossKind::Ours => Ok(loss_ours(y, mu, require_sigma(sigma)?, self.epsilon)),
        }
    }

    /// Records the loss of a `[1]` prediction on `g`.
    pub fn record<T: Real>(
        &self,
        g: &mut Graph<T>,
        y: Var,
        mu: f64,
        sigma: Option<f64>,
    ) -> Result<Var> {
        let diff = g.add_const(y, T::lit(-mu))?;
        match self.kind {
            LossKind::Mse => g.square(diff),
            LossKind::Mae => g.abs(diff),
            LossKind::Ours => {
                let sigma = require_sigma(sigma)?;
                let a = g.abs(diff)?;
                let z = g.scale(a, T::lit(1.0 / (sigma + self.epsilon)))?;
                g.ln1p(z)
            }
        }
    }
}

fn require_sigma(sigma: Option<f64>) -> Result<f64> {
    match sigma {
        Some(s) if s >= 0.0 => Ok(s),
        Some(s) => Err(Error::LabelQuality(format!("negative rating std {s}"))),
        None => Err(Error::LabelQuality(
            "utterance has no rating std; use mse or mae".into(),
        )),
    }
}

/// Rating-spread-weighted log loss: `ln(1 + |y − μ| / (σ + ε))`.
pub fn loss_ours(y: f64, mu: f64, sigma: f64, epsilon: f64) -> f64 {
    ((y - mu).abs() / (sigma + epsilon)).ln_1p()
}

pub fn loss_mse(y: f64, mu: f64) -> f64 {
    (y - mu) * (y - mu)
}

pub fn loss_mae(y: f64, mu: f64) -> f64 {
    (y - mu).abs()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Tensor;

    #[test]
    fn ours_examples() {
        assert_eq!(loss_ours(3.0, 3.0, 0.7, 0.01), 0.0);
        assert!((loss_ours(3.5, 3.0, 0.99, 0.01) - 1.5f64.ln()).abs() < 1e-15);
        assert!((loss_ours(2.01, 2.0, 0.0, 0.01) - 2f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn mse_mae_examples() {
        assert_eq!(loss_mse(2.5, 2.5), 0.0);
        assert_eq!(loss_mae(2.5, 2.5), 0.0);
        assert_eq!(loss_mse(4.0, 2.0), 4.0);
        assert_eq!(loss_mae(4.0, 2.0), 2.0);
        assert_eq!(loss_mse(1.3, 4.1), loss_mse(4.1, 1.3));
    }

    #[test]
    fn ours_needs_sigma() {
        let cfg = LossConfig {
            kind: LossKind::Ours,
            epsilon: 0.01,
        };
        assert!(matches!(
            cfg.eval(1.0, 2.0, None),
            Err(Error::LabelQuality(_))
        ));
    }

    #[test]
    fn recorded_loss_matches_scalar_and_gradient() {
        for kind in [LossKind::Ours, LossKind::Mse, LossKind::Mae] {
            let cfg = LossConfig {
                kind,
                epsilon: 0.01,
            };
            let mut g = Graph::<f64>::new();
            let y = g.leaf(Tensor::scalar(3.4));
            let l = cfg.record(&mut g, y, 2.9, Some(0.6)).unwrap();
            let expect = cfg.eval(3.4, 2.9, Some(0.6)).unwrap();
            assert!((g.value(l).data()[0] - expect).abs() < 1e-15, "{kind}");
            let grad = g.backward(l).unwrap().get(y).unwrap()[0];
            let h = 1e-6;
            let numeric = (cfg.eval(3.4 + h, 2.9, Some(0.6)).unwrap()
                - cfg.eval(3.4 - h, 2.9, Some(0.6)).unwrap())
                / (2.0 * h);
            assert!((grad - numeric).abs() < 1e-8, "{kind}: {grad} vs {numeric}");
        }
    }

    #[test]
    fn subgradient_at_kink_is_zero() {
        let cfg = LossConfig {
            kind: LossKind::Mae,
            epsilon: 0.01,
        };
        let mut g = Graph::<f64>::new();
        let y = g.leaf(Tensor::scalar(2.0));
        let l = cfg.record(&mut g, y, 2.0, None).unwrap();
        assert_eq!(g.backward(l).unwrap().get(y).unwrap(), &[0.0]);
    }
}
