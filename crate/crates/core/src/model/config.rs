use std::fmt;
use std::str::FromStr;

use crate::audio::{samples_for, SAMPLE_RATE};
use crate::error::{Error, Result};
use crate::kv::{join_list, KvMap};

/// How consecutive tokens are merged between local blocks.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MergeMode {
    MaxPool,
    AvgPool,
    Linear,
}

impl fmt::Display for MergeMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            MergeMode::MaxPool => "max_pool",
            MergeMode::AvgPool => "avg_pool",
            MergeMode::Linear => "linear",
        })
    }
}

impl FromStr for MergeMode {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "max_pool" => Ok(MergeMode::MaxPool),
            "avg_pool" => Ok(MergeMode::AvgPool),
            "linear" => Ok(MergeMode::Linear),
            _ => Err(format!("expected max_pool, avg_pool or linear, got {s:?}")),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PositionalEncoding {
    None,
    Sinusoidal,
}

impl fmt::Display for PositionalEncoding {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            PositionalEncoding::None => "none",
            PositionalEncoding::Sinusoidal => "sinusoidal",
        })
    }
}

impl FromStr for PositionalEncoding {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "none" => Ok(PositionalEncoding::None),
            "sinusoidal" => Ok(PositionalEncoding::Sinusoidal),
            _ => Err(format!("expected none or sinusoidal, got {s:?}")),
        }
    }
}

/// Architectural hyperparameters.
///
/// `context_sizes` has one entry per local block; `pool_kernels` has one
/// entry per merge between consecutive local blocks, so it is one shorter.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub embed_dim: usize,
    pub context_sizes: Vec<usize>,
    pub pool_kernels: Vec<usize>,
    pub global_layers: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    pub merge_mode: MergeMode,
    pub positional_encoding: PositionalEncoding,
    /// Samples per frame (2 ms at 16 kHz).
    pub frame_samples: usize,
    /// Samples between frame starts (1 ms at 16 kHz).
    pub hop_samples: usize,
    pub head_hidden: usize,
    /// Input duration every utterance is padded or truncated to.
    pub duration_s: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            embed_dim: 16,
            context_sizes: vec![10, 4, 4, 4, 4, 2, 2],
            pool_kernels: vec![5, 2, 2, 2, 2, 2],
            global_layers: 12,
            heads: 4,
            mlp_ratio: 4,
            merge_mode: MergeMode::MaxPool,
            positional_encoding: PositionalEncoding::None,
            frame_samples: 32,
            hop_samples: 16,
            head_hidden: 16,
            duration_s: 20.48,
        }
    }
}

const KEYS: &[&str] = &[
    "embed_dim",
    "context_sizes",
    "pool_kernels",
    "global_layers",
    "heads",
    "mlp_ratio",
    "merge_mode",
    "positional_encoding",
    "frame_samples",
    "hop_samples",
    "head_hidden",
    "duration_s",
];

impl ModelConfig {
    /// 1.28 s of audio, contexts [10, 4, 4], pools [5, 2], two global
    /// layers, D = 8.
    pub fn desk() -> Self {
        Self {
            embed_dim: 8,
            context_sizes: vec![10, 4, 4],
            pool_kernels: vec![5, 2],
            global_layers: 2,
            heads: 4,
            head_hidden: 8,
            duration_s: 1.28,
            ..Self::default()
        }
    }

    /// 40 frames, contexts [4, 2], pools [2], one global layer, D = 8.
    pub fn tiny() -> Self {
        Self {
            embed_dim: 8,
            context_sizes: vec![4, 2],
            pool_kernels: vec![2],
            global_layers: 1,
            heads: 4,
            head_hidden: 8,
            duration_s: 0.04,
            ..Self::default()
        }
    }

    pub fn num_samples(&self) -> usize {
        samples_for(self.duration_s, SAMPLE_RATE)
    }

    pub fn num_frames(&self) -> usize {
        self.num_samples() / self.hop_samples.max(1)
    }

    pub fn frame_ms(&self) -> f64 {
        self.frame_samples as f64 * 1000.0 / SAMPLE_RATE as f64
    }

    pub fn hop_ms(&self) -> f64 {
        self.hop_samples as f64 * 1000.0 / SAMPLE_RATE as f64
    }

    /// Token count entering each local block, then the count entering the
    /// global stack (excluding `[MOS]`).
    pub fn frame_ladder(&self) -> Vec<usize> {
        let mut f = self.num_frames();
        let mut out = vec![f];
        for &k in &self.pool_kernels {
            f /= k.max(1);
            out.push(f);
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::config(m));
        if self.embed_dim == 0 || self.heads == 0 || !self.embed_dim.is_multiple_of(self.heads) {
            return fail(format!(
                "heads {} must divide embed_dim {}",
                self.heads, self.embed_dim
            ));
        }
        if self.mlp_ratio == 0 || self.head_hidden == 0 || self.global_layers == 0 {
            return fail("mlp_ratio, head_hidden and global_layers must be positive".into());
        }
        if self.context_sizes.len() != self.pool_kernels.len() + 1 {
            return fail(format!(
                "{} context sizes need {} pool kernels, got {}",
                self.context_sizes.len(),
                self.context_sizes.len().saturating_sub(1),
                self.pool_kernels.len()
            ));
        }
        if let Some(c) = self.context_sizes.iter().find(|&&c| c == 0 || c % 2 != 0) {
            return fail(format!("context size {c} must be positive and even"));
        }
        if self.pool_kernels.contains(&0) {
            return fail("pool kernels must be positive".into());
        }
        if self.frame_samples == 0 || self.hop_samples == 0 {
            return fail("frame_samples and hop_samples must be positive".into());
        }
        if !(self.duration_s > 0.0) {
            return fail(format!("duration_s {} must be positive", self.duration_s));
        }
        let n = self.num_samples();
        if !n.is_multiple_of(self.hop_samples) {
            return fail(format!(
                "{} s is {n} samples, not a multiple of the {}-sample hop",
                self.duration_s, self.hop_samples
            ));
        }
        if self.positional_encoding == PositionalEncoding::Sinusoidal && !self.embed_dim.is_multiple_of(2) {
            return fail("sinusoidal encoding needs an even embed_dim".into());
        }
        let mut f = self.num_frames();
        for (i, &c) in self.context_sizes.iter().enumerate() {
            if f == 0 || !f.is_multiple_of(c) {
                return fail(format!(
                    "block {i}: {f} tokens not divisible by context {c}"
                ));
            }
            if let Some(&k) = self.pool_kernels.get(i) {
                if !f.is_multiple_of(k) {
                    return fail(format!("block {i}: {f} tokens not divisible by pool {k}"));
                }
                f /= k;
            }
        }
        Ok(())
    }

    pub fn to_kv(&self) -> KvMap {
        let mut kv = KvMap::default();
        kv.insert("model.embed_dim", self.embed_dim);
        kv.insert("model.context_sizes", join_list(&self.context_sizes));
        kv.insert("model.pool_kernels", join_list(&self.pool_kernels));
        kv.insert("model.global_layers", self.global_layers);
        kv.insert("model.heads", self.heads);
        kv.insert("model.mlp_ratio", self.mlp_ratio);
        kv.insert("model.merge_mode", self.merge_mode);
        kv.insert("model.positional_encoding", self.positional_encoding);
        kv.insert("model.frame_samples", self.frame_samples);
        kv.insert("model.hop_samples", self.hop_samples);
        kv.insert("model.head_hidden", self.head_hidden);
        kv.insert("model.duration_s", self.duration_s);
        kv
    }

    /// Reads `model.*` keys, defaulting any that are absent.
    pub fn from_kv(kv: &KvMap) -> Result<Self> {
        kv.check_known("model.", KEYS)?;
        let d = Self::default();
        let embed_dim = kv.get_or("model.embed_dim", d.embed_dim)?;
        let cfg = Self {
            embed_dim,
            context_sizes: kv
                .get_list("model.context_sizes")?
                .unwrap_or(d.context_sizes),
            pool_kernels: kv.get_list("model.pool_kernels")?.unwrap_or(d.pool_kernels),
            global_layers: kv.get_or("model.global_layers", d.global_layers)?,
            heads: kv.get_or("model.heads", d.heads)?,
            mlp_ratio: kv.get_or("model.mlp_ratio", d.mlp_ratio)?,
            merge_mode: kv.get_or("model.merge_mode", d.merge_mode)?,
            positional_encoding: kv.get_or("model.positional_encoding", d.positional_encoding)?,
            frame_samples: kv.get_or("model.frame_samples", d.frame_samples)?,
            hop_samples: kv.get_or("model.hop_samples", d.hop_samples)?,
            head_hidden: kv.get_or("model.head_hidden", embed_dim)?,
            duration_s: kv.get_or("model.duration_s", d.duration_s)?,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    /// Canonical text form embedded in checkpoints.
    pub fn canonical(&self) -> String {
        self.to_kv().to_text()
    }
}
