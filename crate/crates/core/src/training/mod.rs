//! Losses, the mini-batch training loop, sequential self-teaching, and the
//! end-to-end gradient check.

mod check;
mod loss;
mod sustain;

use std::fmt::Write as _;

use log::{debug, info};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::audio::FrameMatrix;
use crate::error::{Error, Result};
use crate::eval::EvalReport;
use crate::model::Model;
use crate::numerics::{adamw_step, clip_global_norm, Graph, OptimConfig, ParamSet, Real};

pub use check::{model_gradcheck, GradcheckRun, Precision};
pub use loss::{loss_mae, loss_mse, loss_ours, LossConfig, LossKind};
pub use sustain::{sustain_labels, sustain_run, StageOutcome, SustainSchedule};

/// One utterance ready for the network: framed audio plus its labels.
#[derive(Clone, Debug)]
pub struct Example {
    pub name: String,
    pub frames: FrameMatrix,
    pub mu: f64,
    pub sigma: Option<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub epochs: usize,
    pub optim: OptimConfig,
    /// Seeds both the mini-batch shuffle and, where a caller builds the
    /// model, its initialization.
    pub seed: u64,
    pub shuffle: bool,
    /// Return the parameters from the epoch with the lowest dev MSE instead
    /// of the last epoch.
    pub keep_best: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 8,
            epochs: 250,
            optim: OptimConfig::default(),
            seed: 0,
            shuffle: true,
            keep_best: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::config("batch_size must be at least 1"));
        }
        self.optim.validate()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Mean per-sample loss over the epoch, measured before each update.
    pub train_loss: f64,
    pub dev: Option<EvalReport>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct History {
    pub epochs: Vec<EpochRecord>,
    pub steps: usize,
}

impl History {
    pub const CSV_HEADER: &'static str = "epoch,train_loss,dev_mse,dev_pcc,dev_srcc";

    pub fn to_csv(&self) -> String {
        let corr =
            |v: Option<f64>| v.map_or_else(|| "undefined".to_string(), |v| format!("{v:.6}"));
        let mut out = format!("{}\n", Self::CSV_HEADER);
        for r in &self.epochs {
            let _ = match &r.dev {
                Some(d) => writeln!(
                    out,
                    "{},{:.6},{:.6},{},{}",
                    r.epoch,
                    r.train_loss,
                    d.mse,
                    corr(d.pcc),
                    corr(d.srcc)
                ),
                None => writeln!(out, "{},{:.6},,,", r.epoch, r.train_loss),
            };
        }
        out
    }
}

#[derive(Clone, Debug)]
pub struct Trained<T: Real> {
    pub model: Model<T>,
    pub history: History,
}

/// Checks that every example can be scored with `loss` before any work is
/// done.
pub fn check_labels(data: &[Example], loss: &LossConfig) -> Result<()> {
    loss.validate()?;
    if loss.kind == LossKind::Ours {
        if let Some(e) = data.iter().find(|e| e.sigma.is_none()) {
            return Err(Error::LabelQuality(format!(
                "{} has no rating std, which the ours loss needs; use mse or mae",
                e.name
            )));
        }
    }
    Ok(())
}

/// Predictions for every example, in order.
pub fn predict_all<T: Real>(model: &Model<T>, data: &[Example]) -> Result<Vec<f64>> {
    let frames: Vec<&FrameMatrix> = data.iter().map(|e| &e.frames).collect();
    model.predict_batch(&frames)
}

pub fn evaluate<T: Real>(model: &Model<T>, data: &[Example]) -> Result<EvalReport> {
    let y = predict_all(model, data)?;
    let mu: Vec<f64> = data.iter().map(|e| e.mu).collect();
    EvalReport::compute(&y, &mu)
}

struct SampleGrad<T> {
    loss: f64,
    grads: Vec<Vec<T>>,
}

fn sample_grad<T: Real>(
    model: &Model<T>,
    ex: &Example,
    target: f64,
    loss: &LossConfig,
    scale: f64,
) -> Result<SampleGrad<T>> {
    let mut g = Graph::new();
    let b = model.params().bind(&mut g);
    let y = model.forward_frames(&mut g, &b, &ex.frames, None)?;
    let l = loss.record(&mut g, y, target, ex.sigma)?;
    let value = g.value(l).data()[0].as_f64();
    if !value.is_finite() {
        return Err(Error::NonFinite { op: "loss" });
    }
    let scaled = g.scale(l, T::lit(scale))?;
    let grads = g.backward(scaled)?;
    Ok(SampleGrad {
        loss: value,
        grads: model.params().collect_grads(&b, &grads),
    })
}

fn nan_abort(epoch: usize, batch: usize, sample: &str, value: f64) -> Error {
    Error::NanLoss {
        epoch,
        batch,
        sample: sample.to_string(),
        value,
    }
}

/// Trains `model` on `data` with mini-batch AdamW.
///
/// `labels` replaces the examples' `mu` as regression targets when given
/// (`sigma` still comes from the examples). Each batch averages the
/// per-sample losses; per-sample gradients are computed in parallel and
/// summed in batch order, so results do not depend on the thread count.
pub fn train<T: Real>(
    mut model: Model<T>,
    data: &[Example],
    labels: Option<&[f64]>,
    loss: &LossConfig,
    cfg: &TrainConfig,
    dev: Option<&[Example]>,
) -> Result<Trained<T>> {
    cfg.validate()?;
    check_labels(data, loss)?;
    if let Some(l) = labels {
        if l.len() != data.len() {
            return Err(Error::dim(format!(
                "{} labels for {} examples",
                l.len(),
                data.len()
            )));
        }
    }
    if data.is_empty() && cfg.epochs > 0 {
        return Err(Error::config("training set is empty"));
    }
    let target = |i: usize| labels.map_or(data[i].mu, |l| l[i]);

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut history = History::default();
    let mut best: Option<(f64, ParamSet<T>)> = None;
    model.params_mut().zero_grad();

    for epoch in 1..=cfg.epochs {
        if cfg.shuffle {
            order.shuffle(&mut rng);
        }
        let mut loss_sum = 0.0;
        for (bi, batch) in order.chunks(cfg.batch_size).enumerate() {
            let scale = 1.0 / batch.len() as f64;
            let m = &model;
            let results: Vec<Result<SampleGrad<T>>> = batch
                .par_iter()
                .map(|&i| sample_grad(m, &data[i], target(i), loss, scale))
                .collect();
            let mut per_sample = Vec::with_capacity(batch.len());
            for (&i, r) in batch.iter().zip(results) {
                match r {
                    Ok(s) => per_sample.push(s),
                    Err(Error::NonFinite { .. }) => {
                        return Err(nan_abort(epoch, bi, &data[i].name, f64::NAN))
                    }
                    Err(e) => return Err(e),
                }
            }
            let ps = model.params_mut();
            for s in &per_sample {
                loss_sum += s.loss;
                ps.accumulate_flat(&s.grads);
            }
            let norm = match cfg.optim.clip_norm {
                Some(c) => clip_global_norm(ps, c),
                None => clip_global_norm(ps, f64::INFINITY),
            };
            if !norm.is_finite() {
                let names: Vec<&str> = batch.iter().map(|&i| data[i].name.as_str()).collect();
                return Err(nan_abort(epoch, bi, &names.join(";"), norm));
            }
            adamw_step(ps, &cfg.optim);
            ps.zero_grad();
            history.steps += 1;
        }
        let train_loss = loss_sum / data.len() as f64;
        let dev_report = match dev {
            Some(d) if !d.is_empty() => Some(evaluate(&model, d)?),
            _ => None,
        };
        match &dev_report {
            Some(r) => info!("epoch {epoch}: train loss {train_loss:.6}, dev {r}"),
            None => info!("epoch {epoch}: train loss {train_loss:.6}"),
        }
        if cfg.keep_best {
            if let Some(r) = &dev_report {
                if best.as_ref().is_none_or(|(m, _)| r.mse < *m) {
                    debug!("epoch {epoch}: new best dev MSE {:.6}", r.mse);
                    best = Some((r.mse, model.params().clone()));
                }
            }
        }
        history.epochs.push(EpochRecord {
            epoch,
            train_loss,
            dev: dev_report,
        });
    }
    if let Some((_, params)) = best {
        *model.params_mut() = params;
    }
    Ok(Trained { model, history })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::audio::{frame_waveform, Waveform, SAMPLE_RATE};
    use crate::model::ModelConfig;
    use rand::Rng;

    fn examples(cfg: &ModelConfig, n: usize, seed: u64) -> Vec<Example> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|i| {
                let amp: f32 = rng.gen_range(0.05..0.9);
                let w = Waveform::new(
                    (0..cfg.num_samples())
                        .map(|_| amp * rng.gen_range(-1.0f32..1.0))
                        .collect(),
                    SAMPLE_RATE,
                );
                Example {
                    name: format!("u{i}"),
                    frames: frame_waveform(&w, cfg.frame_ms(), cfg.hop_ms()).unwrap(),
                    mu: 1.0 + 4.0 * amp as f64,
                    sigma: Some(rng.gen_range(0.2..1.2)),
                }
            })
            .collect()
    }

    fn quick() -> TrainConfig {
        TrainConfig {
            batch_size: 3,
            epochs: 2,
            seed: 11,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn zero_epochs_is_identity() {
        let cfg = ModelConfig::tiny();
        let data = examples(&cfg, 4, 1);
        let model = Model::<f32>::new(cfg, 3).unwrap();
        let t = TrainConfig {
            epochs: 0,
            ..quick()
        };
        let out = train(model.clone(), &data, None, &LossConfig::mse(), &t, None).unwrap();
        for (a, b) in model.params().iter().zip(out.model.params().iter()) {
            assert_eq!(a.tensor, b.tensor);
        }
        assert!(out.history.epochs.is_empty());
    }

    #[test]
    fn training_is_deterministic() {
        let cfg = ModelConfig::tiny();
        let data = examples(&cfg, 7, 2);
        let run = || {
            let model = Model::<f32>::new(cfg.clone(), 5).unwrap();
            train(
                model,
                &data,
                None,
                &LossConfig::mse(),
                &quick(),
                Some(&data[..3]),
            )
            .unwrap()
        };
        let (a, b) = (run(), run());
        for (p, q) in a.model.params().iter().zip(b.model.params().iter()) {
            let pb: Vec<u32> = p.tensor.data().iter().map(|v| v.to_bits()).collect();
            let qb: Vec<u32> = q.tensor.data().iter().map(|v| v.to_bits()).collect();
            assert_eq!(pb, qb, "{}", p.name);
        }
        assert_eq!(a.history, b.history);
        assert_eq!(a.history.steps, 2 * 3);
        assert_eq!(a.history.to_csv().lines().count(), 3);
    }

    #[test]
    fn ours_without_sigma_is_refused() {
        let cfg = ModelConfig::tiny();
        let mut data = examples(&cfg, 3, 3);
        data[1].sigma = None;
        let loss = LossConfig {
            kind: LossKind::Ours,
            epsilon: 0.01,
        };
        let model = Model::<f32>::new(cfg, 0).unwrap();
        let err = train(model, &data, None, &loss, &quick(), None).unwrap_err();
        assert!(matches!(err, Error::LabelQuality(ref m) if m.contains("u1")));
    }

    #[test]
    fn loss_decreases_on_a_small_set() {
        let cfg = ModelConfig::tiny();
        let data = examples(&cfg, 6, 4);
        let model = Model::<f32>::new(cfg, 9).unwrap();
        let t = TrainConfig {
            epochs: 30,
            batch_size: 6,
            optim: OptimConfig {
                learning_rate: 3e-3,
                ..OptimConfig::default()
            },
            ..quick()
        };
        let out = train(model, &data, None, &LossConfig::mse(), &t, None).unwrap();
        let first = out.history.epochs[0].train_loss;
        let last = out.history.epochs.last().unwrap().train_loss;
        assert!(last < 0.5 * first, "{first} -> {last}");
    }

    #[test]
    fn label_override_is_used() {
        let cfg = ModelConfig::tiny();
        let data = examples(&cfg, 4, 6);
        let model = Model::<f32>::new(cfg, 1).unwrap();
        let t = TrainConfig {
            epochs: 1,
            batch_size: 4,
            shuffle: false,
            ..quick()
        };
        let y = predict_all(&model, &data).unwrap();
        let out = train(model, &data, Some(&y), &LossConfig::mse(), &t, None).unwrap();
        // targets equal to the initial predictions give zero loss
        assert!(out.history.epochs[0].train_loss < 1e-10);
        let bad = train(
            out.model,
            &data,
            Some(&y[..2]),
            &LossConfig::mse(),
            &t,
            None,
        );
        assert!(bad.is_err());
    }

    #[test]
    fn keep_best_restores_lowest_dev_epoch() {
        let cfg = ModelConfig::tiny();
        let data = examples(&cfg, 4, 7);
        let t = TrainConfig {
            epochs: 4,
            keep_best: true,
            optim: OptimConfig {
                learning_rate: 1e-2,
                ..OptimConfig::default()
            },
            ..quick()
        };
        let model = Model::<f32>::new(cfg, 2).unwrap();
        let out = train(model, &data, None, &LossConfig::mse(), &t, Some(&data)).unwrap();
        let best = out
            .history
            .epochs
            .iter()
            .map(|r| r.dev.unwrap().mse)
            .fold(f64::INFINITY, f64::min);
        let now = evaluate(&out.model, &data).unwrap().mse;
        assert!((now - best).abs() < 1e-12, "{now} vs {best}");
    }
}
