use log::info;

use super::{predict_all, train, Example, History, LossConfig, TrainConfig};
use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig};

const SUM_TOL: f64 = 1e-9;

/// Per-stage label weights. Stage `m` holds `[α₀ … α_m]`: `α₀` weights the
/// dataset label and `α_i` the prediction of the stage `i − 1` model.
#[derive(Clone, Debug, PartialEq)]
pub struct SustainSchedule {
    stages: Vec<Vec<f64>>,
    /// Epochs for stages after the first; `None` reuses the training config.
    pub later_epochs: Option<usize>,
}

fn check_weights(alpha: &[f64]) -> Result<()> {
    if let Some(a) = alpha.iter().find(|a| !(**a >= 0.0)) {
        return Err(Error::Schedule(format!("weight {a} is negative")));
    }
    let sum: f64 = alpha.iter().sum();
    if (sum - 1.0).abs() > SUM_TOL {
        return Err(Error::Schedule(format!(
            "weights {alpha:?} sum to {sum}, not 1"
        )));
    }
    Ok(())
}

impl SustainSchedule {
    pub fn new(stages: Vec<Vec<f64>>) -> Result<Self> {
        if stages.is_empty() {
            return Err(Error::Schedule("schedule has no stages".into()));
        }
        for (m, alpha) in stages.iter().enumerate() {
            if alpha.len() != m + 1 {
                return Err(Error::Schedule(format!(
                    "stage {m} needs {} weights, got {}",
                    m + 1,
                    alpha.len()
                )));
            }
            check_weights(alpha).map_err(|e| Error::Schedule(format!("stage {m}: {e}")))?;
        }
        Ok(Self {
            stages,
            later_epochs: None,
        })
    }

    /// Base plus three self-teaching stages.
    pub fn three_stage() -> Self {
        Self::new(vec![
            vec![1.0],
            vec![0.4, 0.6],
            vec![0.3, 0.3, 0.4],
            vec![0.225, 0.225, 0.25, 0.3],
        ])
        .expect("valid schedule")
    }

    pub fn stages(&self) -> &[Vec<f64>] {
        &self.stages
    }

    pub fn len(&self) -> usize {
        self.stages.len()
    }

    pub fn is_empty(&self) -> bool {
        self.stages.is_empty()
    }

    /// Text form such as `1|0.4,0.6`: stages separated by `|`, weights by `,`.
    pub fn to_text(&self) -> String {
        self.stages
            .iter()
            .map(|s| {
                s.iter()
                    .map(|a| a.to_string())
                    .collect::<Vec<_>>()
                    .join(",")
            })
            .collect::<Vec<_>>()
            .join("|")
    }

    pub fn parse(text: &str) -> Result<Self> {
        let stages = text
            .split('|')
            .map(|s| {
                s.split(',')
                    .map(|a| {
                        a.trim()
                            .parse::<f64>()
                            .map_err(|_| Error::Schedule(format!("bad weight {a:?}")))
                    })
                    .collect::<Result<Vec<f64>>>()
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(stages)
    }
}

/// `μ_m = α₀·μ + Σ_{i≥1} α_i·y_{i−1}`.
pub fn sustain_labels(mu: f64, teacher_preds: &[f64], alpha: &[f64]) -> Result<f64> {
    if alpha.len() != teacher_preds.len() + 1 {
        return Err(Error::Schedule(format!(
            "{} weights for {} teachers",
            alpha.len(),
            teacher_preds.len()
        )));
    }
    check_weights(alpha)?;
    Ok(alpha[0] * mu
        + alpha[1..]
            .iter()
            .zip(teacher_preds)
            .map(|(a, y)| a * y)
            .sum::<f64>())
}

#[derive(Clone, Debug)]
pub struct StageOutcome {
    pub model: Model<f32>,
    pub history: History,
    /// Regression targets this stage trained on.
    pub labels: Vec<f64>,
}

/// Runs every stage of `schedule`.
///
/// Stage 0 trains on the dataset labels with `base_loss`. Stage `m ≥ 1`
/// trains a freshly initialized model with MSE against labels blended from
/// the dataset and the frozen predictions of stages `0 … m − 1`. Each
/// model's training-set predictions are computed once, right after it is
/// trained. Stage `m` initializes and shuffles with `cfg.seed + m`.
pub fn sustain_run(
    model_cfg: &ModelConfig,
    data: &[Example],
    base_loss: &LossConfig,
    schedule: &SustainSchedule,
    cfg: &TrainConfig,
    dev: Option<&[Example]>,
) -> Result<Vec<StageOutcome>> {
    let mut outcomes: Vec<StageOutcome> = Vec::with_capacity(schedule.len());
    let mut teacher_preds: Vec<Vec<f64>> = Vec::new();
    let mu: Vec<f64> = data.iter().map(|e| e.mu).collect();

    for (m, alpha) in schedule.stages().iter().enumerate() {
        let stage_cfg = TrainConfig {
            seed: cfg.seed.wrapping_add(m as u64),
            epochs: if m == 0 {
                cfg.epochs
            } else {
                schedule.later_epochs.unwrap_or(cfg.epochs)
            },
            ..cfg.clone()
        };
        let labels: Vec<f64> = (0..data.len())
            .map(|i| {
                let preds: Vec<f64> = teacher_preds.iter().map(|p| p[i]).collect();
                sustain_labels(mu[i], &preds, alpha)
            })
            .collect::<Result<_>>()?;
        let loss = if m == 0 {
            *base_loss
        } else {
            LossConfig::mse()
        };
        info!(
            "self-teaching stage {m}: weights {alpha:?}, {} epochs",
            stage_cfg.epochs
        );
        let model = Model::<f32>::new(model_cfg.clone(), stage_cfg.seed)?;
        let trained = train(model, data, Some(&labels), &loss, &stage_cfg, dev)?;
        if m + 1 < schedule.len() {
            teacher_preds.push(predict_all(&trained.model, data)?);
        }
        outcomes.push(StageOutcome {
            model: trained.model,
            history: trained.history,
            labels,
        });
    }
    Ok(outcomes)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn label_examples() {
        assert!((sustain_labels(4.0, &[3.0], &[0.4, 0.6]).unwrap() - 3.4).abs() < 1e-12);
        let fixed = sustain_labels(2.0, &[2.0, 2.0, 2.0], &[0.225, 0.225, 0.25, 0.3]).unwrap();
        assert!((fixed - 2.0).abs() < 1e-15);
        assert_eq!(sustain_labels(3.7, &[], &[1.0]).unwrap(), 3.7);
    }

    #[test]
    fn bad_weights_rejected() {
        assert!(sustain_labels(1.0, &[2.0], &[0.5, 0.6]).is_err());
        assert!(sustain_labels(1.0, &[2.0], &[1.0]).is_err());
        assert!(sustain_labels(1.0, &[2.0], &[1.2, -0.2]).is_err());
        assert!(SustainSchedule::new(vec![vec![1.0], vec![0.4, 0.6 + 1e-6]]).is_err());
        assert!(SustainSchedule::new(vec![vec![1.0], vec![0.3, 0.3, 0.4]]).is_err());
        assert!(SustainSchedule::new(vec![]).is_err());
    }

    #[test]
    fn schedule_text_roundtrip() {
        let s = SustainSchedule::three_stage();
        assert_eq!(s.len(), 4);
        assert_eq!(SustainSchedule::parse(&s.to_text()).unwrap(), s);
        assert_eq!(SustainSchedule::parse("1").unwrap().len(), 1);
    }
}
