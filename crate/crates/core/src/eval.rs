//! MSE, Pearson and Spearman agreement between predictions and labels.

use std::fmt;

use crate::error::{Error, Result};

/// Correlations are `None` when undefined (fewer than two pairs or zero
/// variance).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EvalReport {
    pub mse: f64,
    pub pcc: Option<f64>,
    pub srcc: Option<f64>,
    pub n: usize,
}

fn fmt_corr(v: Option<f64>) -> String {
    v.map_or_else(|| "undefined".to_string(), |v| format!("{v:.6}"))
}

impl EvalReport {
    pub fn compute(y: &[f64], mu: &[f64]) -> Result<Self> {
        Ok(Self {
            mse: mse_metric(y, mu)?,
            pcc: pcc(y, mu)?,
            srcc: srcc(y, mu)?,
            n: y.len(),
        })
    }

    pub const CSV_HEADER: &'static str = "mse,pcc,srcc,n";

    pub fn to_csv(&self) -> String {
        format!(
            "{:.6},{},{},{}",
            self.mse,
            fmt_corr(self.pcc),
            fmt_corr(self.srcc),
            self.n
        )
    }
}

impl fmt::Display for EvalReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "MSE {:.6}  PCC {}  SRCC {}  (n = {})",
            self.mse,
            fmt_corr(self.pcc),
            fmt_corr(self.srcc),
            self.n
        )
    }
}

fn check_pairs(y: &[f64], mu: &[f64]) -> Result<()> {
    if y.len() != mu.len() {
        return Err(Error::dim(format!(
            "{} predictions for {} labels",
            y.len(),
            mu.len()
        )));
    }
    if y.is_empty() {
        return Err(Error::dim("no pairs to evaluate"));
    }
    Ok(())
}

pub fn mse_metric(y: &[f64], mu: &[f64]) -> Result<f64> {
    check_pairs(y, mu)?;
    Ok(y.iter()
        .zip(mu)
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        / y.len() as f64)
}

/// Pearson correlation; `None` for n < 2 or a constant input.
pub fn pcc(y: &[f64], mu: &[f64]) -> Result<Option<f64>> {
    check_pairs(y, mu)?;
    let n = y.len();
    if n < 2 {
        return Ok(None);
    }
    let my = y.iter().sum::<f64>() / n as f64;
    let mm = mu.iter().sum::<f64>() / n as f64;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in y.iter().zip(mu) {
        let (da, db) = (a - my, b - mm);
        sxy += da * db;
        sxx += da * da;
        syy += db * db;
    }
    if sxx == 0.0 || syy == 0.0 {
        return Ok(None);
    }
    Ok(Some((sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0)))
}

/// 1-based ranks; tied values share the mean of the ranks they span.
pub fn average_ranks(v: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..v.len()).collect();
    order.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
    let mut ranks = vec![0.0; v.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i + 1;
        while j < order.len() && v[order[j]] == v[order[i]] {
            j += 1;
        }
        // positions i..j (0-based) hold ranks i+1..=j
        let r = (i + 1 + j) as f64 / 2.0;
        for &k in &order[i..j] {
            ranks[k] = r;
        }
        i = j;
    }
    ranks
}

/// Spearman correlation: Pearson correlation of average ranks.
pub fn srcc(y: &[f64], mu: &[f64]) -> Result<Option<f64>> {
    check_pairs(y, mu)?;
    pcc(&average_ranks(y), &average_ranks(mu))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn mse_examples() {
        assert_eq!(mse_metric(&[1.0, 2.0], &[1.0, 2.0]).unwrap(), 0.0);
        assert_eq!(mse_metric(&[1.0, 2.0], &[2.0, 4.0]).unwrap(), 2.5);
        assert_eq!(mse_metric(&[2.0, 1.0], &[4.0, 2.0]).unwrap(), 2.5);
        assert!(mse_metric(&[1.0], &[1.0, 2.0]).is_err());
        assert!(mse_metric(&[], &[]).is_err());
    }

    #[test]
    fn pcc_examples() {
        let mu = [1.0, 2.5, 3.0, 4.5];
        assert!((pcc(&mu, &mu).unwrap().unwrap() - 1.0).abs() < 1e-15);
        let anti: Vec<f64> = mu.iter().map(|v| 6.0 - v).collect();
        assert!((pcc(&anti, &mu).unwrap().unwrap() + 1.0).abs() < 1e-15);
        assert_eq!(pcc(&[2.0, 2.0, 2.0], &[1.0, 2.0, 3.0]).unwrap(), None);
        assert_eq!(pcc(&[2.0], &[1.0]).unwrap(), None);
    }

    #[test]
    fn srcc_examples() {
        let mu = [0.1, 0.5, 0.2, 0.9, 0.7];
        let cubed: Vec<f64> = mu.iter().map(|v: &f64| v.powi(3) * 10.0 + 1.0).collect();
        assert!((srcc(&cubed, &mu).unwrap().unwrap() - 1.0).abs() < 1e-15);
        let rev: Vec<f64> = mu.iter().map(|v| -v).collect();
        assert!((srcc(&rev, &mu).unwrap().unwrap() + 1.0).abs() < 1e-15);
        assert_eq!(srcc(&[3.0, 3.0, 3.0], &[1.0, 2.0, 3.0]).unwrap(), None);
    }

    #[test]
    fn ranks_with_ties() {
        assert_eq!(
            average_ranks(&[10.0, 20.0, 10.0, 30.0]),
            vec![1.5, 3.0, 1.5, 4.0]
        );
        assert_eq!(average_ranks(&[5.0, 5.0, 5.0]), vec![2.0, 2.0, 2.0]);
    }

    #[test]
    fn report_formatting() {
        let r = EvalReport::compute(&[3.0], &[2.0]).unwrap();
        assert_eq!(r.to_csv(), "1.000000,undefined,undefined,1");
        assert!(r.to_string().contains("PCC undefined"));
    }

    proptest! {
        #[test]
        fn correlations_invariant_under_increasing_transforms(
            pairs in prop::collection::vec((-10.0f64..10.0, -10.0f64..10.0), 3..40),
            scale in 0.1f64..10.0,
            shift in -5.0f64..5.0,
        ) {
            let (y, mu): (Vec<f64>, Vec<f64>) = pairs.into_iter().unzip();
            let affine: Vec<f64> = y.iter().map(|v| scale * v + shift).collect();
            let monotone: Vec<f64> = y.iter().map(|v| v.exp()).collect();
            if let (Some(a), Some(b)) = (pcc(&y, &mu).unwrap(), pcc(&affine, &mu).unwrap()) {
                prop_assert!((a - b).abs() < 1e-9);
            }
            if let (Some(a), Some(b)) = (srcc(&y, &mu).unwrap(), srcc(&monotone, &mu).unwrap()) {
                prop_assert!((a - b).abs() < 1e-9);
            }
        }

        #[test]
        fn srcc_is_pcc_of_ranks(
            pairs in prop::collection::vec((0u8..6, -3.0f64..3.0), 2..30),
        ) {
            let y: Vec<f64> = pairs.iter().map(|p| p.0 as f64).collect();
            let mu: Vec<f64> = pairs.iter().map(|p| p.1).collect();
            let direct = pcc(&average_ranks(&y), &average_ranks(&mu)).unwrap();
            prop_assert_eq!(srcc(&y, &mu).unwrap(), direct);
        }

        #[test]
        fn mse_permutation_invariant(pairs in prop::collection::vec((-5.0f64..5.0, -5.0f64..5.0), 1..20)) {
            let (y, mu): (Vec<f64>, Vec<f64>) = pairs.iter().copied().unzip();
            let (ry, rmu): (Vec<f64>, Vec<f64>) = pairs.iter().rev().copied().unzip();
            let a = mse_metric(&y, &mu).unwrap();
            let b = mse_metric(&ry, &rmu).unwrap();
            prop_assert!((a - b).abs() < 1e-12);
        }
    }
}
