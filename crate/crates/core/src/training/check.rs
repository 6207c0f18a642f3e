use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{LossConfig, LossKind};
use crate::audio::{frame_waveform, FrameMatrix, Waveform, SAMPLE_RATE};
use crate::error::Result;
use crate::model::{Model, ModelConfig};
use crate::numerics::{
    finite_diff_gradcheck, sample_coords, GradcheckOptions, GradcheckReport, Graph, ParamSet, Real,
};

/// Precision of the analytic (backward) gradients under test.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Precision {
    F32,
    F64,
}

impl fmt::Display for Precision {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Precision::F32 => "f32",
            Precision::F64 => "f64",
        })
    }
}

impl FromStr for Precision {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "f32" | "32" => Ok(Precision::F32),
            "f64" | "64" => Ok(Precision::F64),
            _ => Err(format!("expected f32 or f64, got {s:?}")),
        }
    }
}

/// An end-to-end gradient check: random audio through a freshly
/// initialized model into the loss, compared against central differences.
#[derive(Clone, Debug)]
pub struct GradcheckRun {
    pub config: ModelConfig,
    pub precision: Precision,
    pub coords: usize,
    pub seed: u64,
    pub loss: LossConfig,
    pub opts: GradcheckOptions,
    /// Multiplies the analytic gradient of `embed.w` by this factor. A
    /// factor other than 1 must make the check fail.
    pub corrupt: Option<f64>,
}

impl GradcheckRun {
    /// Key biases have exactly zero gradient (softmax ignores a per-query
    /// constant), so the relative error needs a small denominator floor.
    pub fn new(config: ModelConfig, precision: Precision) -> Self {
        let opts = match precision {
            Precision::F32 => GradcheckOptions {
                h: 1e-4,
                tol: 1e-3,
                floor: 1e-6,
            },
            Precision::F64 => GradcheckOptions {
                h: 1e-5,
                tol: 1e-5,
                floor: 1e-8,
            },
        };
        Self {
            config,
            precision,
            coords: 240,
            seed: 0,
            loss: LossConfig {
                kind: LossKind::Ours,
                epsilon: 0.01,
            },
            opts,
            corrupt: None,
        }
    }
}

fn loss_value<T: Real>(
    model: &Model<T>,
    params: &ParamSet<T>,
    frames: &FrameMatrix,
    loss: &LossConfig,
    mu: f64,
    sigma: f64,
) -> Result<f64> {
    let mut g = Graph::new();
    let b = params.bind_frozen(&mut g);
    let y = model.forward_frames(&mut g, &b, frames, None)?;
    let l = loss.record(&mut g, y, mu, Some(sigma))?;
    Ok(g.value(l).data()[0].as_f64())
}

fn analytic<T: Real>(
    model: &Model<T>,
    frames: &FrameMatrix,
    loss: &LossConfig,
    mu: f64,
    sigma: f64,
) -> Result<Vec<Vec<f64>>> {
    let mut g = Graph::new();
    let b = model.params().bind(&mut g);
    let y = model.forward_frames(&mut g, &b, frames, None)?;
    let l = loss.record(&mut g, y, mu, Some(sigma))?;
    let grads = g.backward(l)?;
    Ok(model
        .params()
        .collect_grads(&b, &grads)
        .into_iter()
        .map(|v| v.into_iter().map(|x| x.as_f64()).collect())
        .collect())
}

/// Runs the check. Differences are always taken in 64-bit on the same
/// parameter values the analytic pass used, so the 32-bit check measures
/// the error of the 32-bit backward pass alone.
pub fn model_gradcheck(run: &GradcheckRun) -> Result<GradcheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(run.seed);
    let base = Model::<f64>::new(run.config.clone(), run.seed)?;
    let samples = (0..run.config.num_samples())
        .map(|_| rng.gen_range(-0.8f32..0.8))
        .collect();
    let w = Waveform::new(samples, SAMPLE_RATE);
    let frames = frame_waveform(&w, run.config.frame_ms(), run.config.hop_ms())?;

    let reference = match run.precision {
        Precision::F64 => base,
        Precision::F32 => base.cast::<f32>().cast::<f64>(),
    };
    // Target away from the prediction keeps the loss off its kink.
    let mu = reference.predict_frames(&frames)? + 0.75;
    let sigma = 0.5;
    let mut grads = match run.precision {
        Precision::F64 => analytic(&reference, &frames, &run.loss, mu, sigma)?,
        Precision::F32 => analytic(&reference.cast::<f32>(), &frames, &run.loss, mu, sigma)?,
    };
    if let Some(factor) = run.corrupt {
        if let Some(id) = reference.params().by_name("embed.w") {
            grads[id.index()].iter_mut().for_each(|g| *g *= factor);
        }
    }

    let mut params = reference.params().clone();
    let coords = sample_coords(&params, run.coords, &mut rng);
    let mut failure = None;
    let report = finite_diff_gradcheck(
        &mut params,
        &grads,
        &coords,
        run.opts,
        |ps| match loss_value(&reference, ps, &frames, &run.loss, mu, sigma) {
            Ok(v) => v,
            Err(e) => {
                failure.get_or_insert(e);
                f64::NAN
            }
        },
    );
    match failure {
        Some(e) => Err(e),
        None => Ok(report),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tiny_model_passes_in_both_precisions() {
        for p in [Precision::F64, Precision::F32] {
            let run = GradcheckRun {
                coords: 60,
                ..GradcheckRun::new(ModelConfig::tiny(), p)
            };
            let r = model_gradcheck(&run).unwrap();
            assert!(r.passed(), "{p}: max rel err {}", r.max_rel_err);
        }
    }

    #[test]
    fn corrupted_gradient_fails() {
        let run = GradcheckRun {
            coords: 40,
            corrupt: Some(1.1),
            ..GradcheckRun::new(ModelConfig::tiny(), Precision::F64)
        };
        assert!(!model_gradcheck(&run).unwrap().passed());
    }
}
