//! Waveform loading, duration normalization and wave framing.

mod wav;

use std::path::Path;

use log::warn;

use crate::error::{Error, Result};

pub use wav::{encode_pcm16, write_wav_pcm16};

/// Sample rate the model operates at.
pub const SAMPLE_RATE: u32 = 16_000;

#[derive(Clone, Debug, PartialEq)]
pub struct Waveform {
    pub samples: Vec<f32>,
    pub sample_rate: u32,
}

impl Waveform {
    pub fn new(samples: Vec<f32>, sample_rate: u32) -> Self {
        Self {
            samples,
            sample_rate,
        }
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn duration_s(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }
}

/// Reads a mono 16 kHz WAV file (PCM16 or float32).
pub fn read_wav(path: impl AsRef<Path>) -> Result<Waveform> {
    let path = path.as_ref();
    let w = wav::read_wav(path)?;
    if w.sample_rate != SAMPLE_RATE {
        return Err(Error::Wav {
            path: path.to_path_buf(),
            msg: format!(
                "sample rate {} Hz, expected {SAMPLE_RATE} Hz",
                w.sample_rate
            ),
        });
    }
    Ok(w)
}

/// Number of samples `seconds` of audio occupies at `sample_rate`.
pub fn samples_for(seconds: f64, sample_rate: u32) -> usize {
    (seconds * sample_rate as f64).round() as usize
}

/// Pads with trailing silence, or truncates the tail, to exactly
/// `target_seconds` of audio.
pub fn normalize_duration(w: &Waveform, target_seconds: f64) -> Waveform {
    let target = samples_for(target_seconds, w.sample_rate);
    let mut samples = w.samples.clone();
    if samples.len() > target {
        warn!(
            "truncating {:.3} s of audio to {target_seconds} s",
            w.duration_s()
        );
        samples.truncate(target);
    } else {
        samples.resize(target, 0.0);
    }
    Waveform {
        samples,
        sample_rate: w.sample_rate,
    }
}

/// Overlapping frames of a waveform, one row per frame.
#[derive(Clone, Debug, PartialEq)]
pub struct FrameMatrix {
    data: Vec<f32>,
    num_frames: usize,
    frame_len: usize,
    pub frame_ms: f64,
    pub hop_ms: f64,
}

impl FrameMatrix {
    pub fn num_frames(&self) -> usize {
        self.num_frames
    }

    pub fn frame_len(&self) -> usize {
        self.frame_len
    }

    pub fn frame(&self, f: usize) -> &[f32] {
        &self.data[f * self.frame_len..(f + 1) * self.frame_len]
    }

    /// Row-major `F × S` samples.
    pub fn data(&self) -> &[f32] {
        &self.data
    }
}

/// Splits `w` into frames of `frame_ms` starting every `hop_ms`. Frame `f`
/// covers samples `[f·hop, f·hop + S)`, zero-padded past the end, and the
/// frame count is `n / hop`.
pub fn frame_waveform(w: &Waveform, frame_ms: f64, hop_ms: f64) -> Result<FrameMatrix> {
    let frame_len = samples_for(frame_ms / 1000.0, w.sample_rate);
    let hop = samples_for(hop_ms / 1000.0, w.sample_rate);
    if frame_len == 0 || hop == 0 {
        return Err(Error::config(format!(
            "frame {frame_ms} ms / hop {hop_ms} ms is empty at {} Hz",
            w.sample_rate
        )));
    }
    let n = w.samples.len();
    if n == 0 || !n.is_multiple_of(hop) {
        return Err(Error::config(format!(
            "{n} samples is not a positive multiple of the {hop}-sample hop"
        )));
    }
    let num_frames = n / hop;
    let mut data = vec![0.0f32; num_frames * frame_len];
    for (f, row) in data.chunks_mut(frame_len).enumerate() {
        let start = f * hop;
        let end = (start + frame_len).min(n);
        row[..end - start].copy_from_slice(&w.samples[start..end]);
    }
    Ok(FrameMatrix {
        data,
        num_frames,
        frame_len,
        frame_ms,
        hop_ms,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn wave(n: usize) -> Waveform {
        Waveform::new(
            (0..n).map(|i| (i as f32 * 0.001).sin()).collect(),
            SAMPLE_RATE,
        )
    }

    #[test]
    fn pad_to_full_duration() {
        let w = Waveform::new(vec![0.25; 16_000], SAMPLE_RATE);
        let out = normalize_duration(&w, 20.48);
        assert_eq!(out.len(), 327_680);
        assert!(out.samples[..16_000].iter().all(|&v| v == 0.25));
        assert_eq!(out.samples[16_000..].len(), 311_680);
        assert!(out.samples[16_000..].iter().all(|&v| v == 0.0));
    }

    #[test]
    fn exact_length_is_identity() {
        let w = wave(327_680);
        assert_eq!(normalize_duration(&w, 20.48), w);
    }

    #[test]
    fn long_input_keeps_head() {
        let w = wave(30 * 16_000);
        let out = normalize_duration(&w, 20.48);
        assert_eq!(out.samples[..], w.samples[..327_680]);
    }

    #[test]
    fn full_scale_frame_count() {
        let fm = frame_waveform(&wave(327_680), 2.0, 1.0).unwrap();
        assert_eq!(fm.num_frames(), 20_480);
        assert_eq!(fm.frame_len(), 32);
    }

    #[test]
    fn final_frame_is_zero_padded() {
        let w = wave(32);
        let fm = frame_waveform(&w, 2.0, 1.0).unwrap();
        assert_eq!(fm.num_frames(), 2);
        assert_eq!(fm.frame(0), &w.samples[..]);
        assert_eq!(fm.frame(1)[..16], w.samples[16..]);
        assert!(fm.frame(1)[16..].iter().all(|&v| v == 0.0));
    }

    #[test]
    fn constant_interior_frames_match() {
        let fm = frame_waveform(&Waveform::new(vec![0.3; 160], SAMPLE_RATE), 2.0, 1.0).unwrap();
        for f in 1..fm.num_frames() - 1 {
            assert_eq!(fm.frame(f), fm.frame(0));
        }
    }

    #[test]
    fn indivisible_length_rejected() {
        assert!(matches!(
            frame_waveform(&wave(33), 2.0, 1.0),
            Err(Error::Config(_))
        ));
    }
}
