use std::f64::consts::TAU;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;

use super::manifest::{mean_std, Manifest, RatedUtterance};
use crate::audio::{samples_for, write_wav_pcm16, Waveform, SAMPLE_RATE};
use crate::error::{Error, Result};
use crate::kv::KvMap;
use crate::model::ModelConfig;

/// Settings for a set of tone-plus-noise utterances whose quality label is
/// a logistic function of their SNR.
#[derive(Clone, Debug, PartialEq)]
pub struct SynthConfig {
    pub n_samples: usize,
    pub duration_s: f64,
    pub snr_db_range: (f64, f64),
    pub listeners: usize,
    pub rating_noise: f64,
    pub seed: u64,
    /// SNR (dB) that maps to a score of 3.
    pub mos_midpoint_db: f64,
    /// Logistic slope in dB.
    pub mos_slope_db: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n_samples: 200,
            duration_s: 1.28,
            snr_db_range: (-5.0, 25.0),
            listeners: 8,
            rating_noise: 0.5,
            seed: 0,
            mos_midpoint_db: 10.0,
            mos_slope_db: 5.0,
        }
    }
}

const KEYS: &[&str] = &[
    "n_samples",
    "duration_s",
    "snr_db_lo",
    "snr_db_hi",
    "listeners",
    "rating_noise",
    "seed",
    "mos_midpoint_db",
    "mos_slope_db",
];

impl SynthConfig {
    /// Checks the settings, and when `model` is given, that the duration
    /// fits that model's token ladder.
    pub fn validate(&self, model: Option<&ModelConfig>) -> Result<()> {
        let (lo, hi) = self.snr_db_range;
        if !(lo < hi) {
            return Err(Error::config(format!("SNR range [{lo}, {hi}] is empty")));
        }
        if self.listeners == 0 {
            return Err(Error::config("need at least one listener"));
        }
        if !(self.rating_noise >= 0.0) || !(self.mos_slope_db > 0.0) {
            return Err(Error::config(
                "rating_noise must be ≥ 0 and mos_slope_db > 0",
            ));
        }
        if samples_for(self.duration_s, SAMPLE_RATE) == 0 {
            return Err(Error::config(format!(
                "duration {} s holds no samples",
                self.duration_s
            )));
        }
        if let Some(m) = model {
            ModelConfig {
                duration_s: self.duration_s,
                ..m.clone()
            }
            .validate()
            .map_err(|e| Error::config(format!("synthetic duration {} s: {e}", self.duration_s)))?;
        }
        Ok(())
    }

    pub fn mos(&self, snr_db: f64) -> f64 {
        mos_map(snr_db, self.mos_midpoint_db, self.mos_slope_db)
    }

    /// Reads `synth.*` keys, defaulting any that are absent.
    pub fn from_kv(kv: &KvMap) -> Result<Self> {
        kv.check_known("synth.", KEYS)?;
        let d = Self::default();
        Ok(Self {
            n_samples: kv.get_or("synth.n_samples", d.n_samples)?,
            duration_s: kv.get_or("synth.duration_s", d.duration_s)?,
            snr_db_range: (
                kv.get_or("synth.snr_db_lo", d.snr_db_range.0)?,
                kv.get_or("synth.snr_db_hi", d.snr_db_range.1)?,
            ),
            listeners: kv.get_or("synth.listeners", d.listeners)?,
            rating_noise: kv.get_or("synth.rating_noise", d.rating_noise)?,
            seed: kv.get_or("synth.seed", d.seed)?,
            mos_midpoint_db: kv.get_or("synth.mos_midpoint_db", d.mos_midpoint_db)?,
            mos_slope_db: kv.get_or("synth.mos_slope_db", d.mos_slope_db)?,
        })
    }

    pub fn to_kv(&self) -> KvMap {
        let mut kv = KvMap::default();
        kv.insert("synth.n_samples", self.n_samples);
        kv.insert("synth.duration_s", self.duration_s);
        kv.insert("synth.snr_db_lo", self.snr_db_range.0);
        kv.insert("synth.snr_db_hi", self.snr_db_range.1);
        kv.insert("synth.listeners", self.listeners);
        kv.insert("synth.rating_noise", self.rating_noise);
        kv.insert("synth.seed", self.seed);
        kv.insert("synth.mos_midpoint_db", self.mos_midpoint_db);
        kv.insert("synth.mos_slope_db", self.mos_slope_db);
        kv
    }
}

/// `1 + 4 / (1 + exp(−(snr − a) / b))`
pub fn mos_map(snr_db: f64, a: f64, b: f64) -> f64 {
    1.0 + 4.0 / (1.0 + (-(snr_db - a) / b).exp())
}

/// One generated utterance before it is written.
#[derive(Clone, Debug)]
pub struct SynthSample {
    pub waveform: Waveform,
    pub snr_db: f64,
    pub true_mos: f64,
    pub ratings: Vec<f64>,
}

/// Generates sample `i` of the set. Each sample draws from its own ChaCha
/// stream, so the result does not depend on generation order.
pub fn synth_sample(cfg: &SynthConfig, i: usize) -> SynthSample {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(i as u64);
    let n = samples_for(cfg.duration_s, SAMPLE_RATE);
    let sr = SAMPLE_RATE as f64;

    let tones: Vec<(f64, f64)> = (0..3)
        .map(|_| (rng.gen_range(200.0..3000.0), rng.gen_range(0.0..TAU)))
        .collect();
    let clean: Vec<f64> = (0..n)
        .map(|t| {
            let t = t as f64 / sr;
            tones.iter().map(|(f, p)| (TAU * f * t + p).sin()).sum()
        })
        .collect();

    let (lo, hi) = cfg.snr_db_range;
    let snr_db = rng.gen_range(lo..hi);
    let signal_power = clean.iter().map(|v| v * v).sum::<f64>() / n as f64;
    let noise_std = (signal_power / 10f64.powf(snr_db / 10.0)).sqrt();
    let noise = Normal::new(0.0, noise_std).expect("finite std");
    let mixed: Vec<f64> = clean.iter().map(|v| v + noise.sample(&mut rng)).collect();

    let peak = mixed.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let gain = if peak > 0.0 { 0.9 / peak } else { 0.0 };
    let samples = mixed.iter().map(|v| (v * gain) as f32).collect();

    let true_mos = cfg.mos(snr_db);
    let rating_noise = Normal::new(0.0, cfg.rating_noise).expect("finite std");
    let ratings = (0..cfg.listeners)
        .map(|_| (true_mos + rating_noise.sample(&mut rng)).clamp(1.0, 5.0))
        .collect();

    SynthSample {
        waveform: Waveform::new(samples, SAMPLE_RATE),
        snr_db,
        true_mos,
        ratings,
    }
}

pub fn synth_file_name(i: usize) -> String {
    format!("synth_{i:05}.wav")
}

/// Generated set: the manifest (also written as `manifest.csv` in the
/// output directory) plus the drawn SNRs and noise-free scores.
#[derive(Clone, Debug)]
pub struct SynthSet {
    pub manifest: Manifest,
    pub snr_db: Vec<f64>,
    pub true_mos: Vec<f64>,
}

pub const SYNTH_MANIFEST: &str = "manifest.csv";

/// Writes every sample as a 16-bit WAV under `out_dir`, plus the manifest.
pub fn synth_generate(cfg: &SynthConfig, out_dir: impl AsRef<Path>) -> Result<SynthSet> {
    cfg.validate(None)?;
    let out_dir = out_dir.as_ref();
    std::fs::create_dir_all(out_dir)?;
    let rows: Vec<(RatedUtterance, f64, f64)> = (0..cfg.n_samples)
        .into_par_iter()
        .map(|i| {
            let s = synth_sample(cfg, i);
            let name = synth_file_name(i);
            write_wav_pcm16(out_dir.join(&name), &s.waveform)?;
            let (mu, sigma) = mean_std(&s.ratings);
            let entry = RatedUtterance {
                audio_path: name,
                mu,
                sigma: Some(sigma),
                ratings: Some(s.ratings),
            };
            Ok((entry, s.snr_db, s.true_mos))
        })
        .collect::<Result<_>>()?;

    let mut entries = Vec::with_capacity(rows.len());
    let mut snr_db = Vec::with_capacity(rows.len());
    let mut true_mos = Vec::with_capacity(rows.len());
    for (e, s, t) in rows {
        entries.push(e);
        snr_db.push(s);
        true_mos.push(t);
    }
    let manifest = Manifest::new(entries, out_dir);
    manifest.write(out_dir.join(SYNTH_MANIFEST))?;
    Ok(SynthSet {
        manifest,
        snr_db,
        true_mos,
    })
}
