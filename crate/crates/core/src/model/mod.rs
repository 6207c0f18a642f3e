//! The network: frame embedding, shifted-context local blocks with token
//! merging, a `[MOS]` token with global attention, and a regression head.

mod checkpoint;
mod config;
pub mod layers;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;

use crate::audio::{frame_waveform, FrameMatrix, Waveform, SAMPLE_RATE};
use crate::error::{Error, Result};
use crate::numerics::{Binding, Graph, ParamId, ParamSet, Real, Tensor, Var};

pub use checkpoint::{
    decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint, CHECKPOINT_VERSION,
};
pub use config::{MergeMode, ModelConfig, PositionalEncoding};
pub use layers::{
    add_sinusoidal_pe, build_shift_mask, circular_shift, context_merge, context_partition,
    layer_mask, AttentionProbe, Linear, SwinBlock, TransformerLayer,
};

/// One local modeling block: an optional merge of the incoming tokens
/// (absent for the first block, which follows the embedding) and a
/// shifted-context transformer.
#[derive(Clone, Debug)]
pub struct LocalBlock {
    pub merge: Option<Merge>,
    pub swin: SwinBlock,
}

#[derive(Clone, Debug)]
pub struct Merge {
    pub kernel: usize,
    pub mode: MergeMode,
    /// `(kernel·D) → D` map, only for [`MergeMode::Linear`].
    pub linear: Option<Linear>,
}

#[derive(Clone, Debug)]
pub struct Head {
    pub fc1: Linear,
    pub fc2: Linear,
    pub out: Linear,
}

/// Per-forward instrumentation.
#[derive(Clone, Debug, Default)]
pub struct Trace {
    /// Token count after the embedding and after every merge.
    pub token_counts: Vec<usize>,
    /// Filled only when `record_attention` is set.
    pub attention: Vec<AttentionProbe>,
    pub record_attention: bool,
    /// Reorders the tokens entering the global stack (`[MOS]` stays first).
    pub global_permutation: Option<Vec<usize>>,
}

#[derive(Clone, Debug)]
pub struct Model<T = f32> {
    config: ModelConfig,
    params: ParamSet<T>,
    embed: Linear,
    local: Vec<LocalBlock>,
    mos_token: ParamId,
    global: Vec<TransformerLayer>,
    head: Head,
}

impl<T: Real> Model<T> {
    /// Builds a model with seeded random initialization.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut ps = ParamSet::new();
        let d = config.embed_dim;
        let embed = Linear::new(
            &mut ps,
            &mut rng,
            "embed.w".into(),
            "embed.b".into(),
            config.frame_samples,
            d,
        )?;

        let mut local = Vec::with_capacity(config.context_sizes.len());
        for (i, &c) in config.context_sizes.iter().enumerate() {
            let merge = if i == 0 {
                None
            } else {
                let kernel = config.pool_kernels[i - 1];
                let linear = match config.merge_mode {
                    MergeMode::Linear => Some(Linear::new(
                        &mut ps,
                        &mut rng,
                        format!("local.{i}.merge.w"),
                        format!("local.{i}.merge.b"),
                        kernel * d,
                        d,
                    )?),
                    _ => None,
                };
                Some(Merge {
                    kernel,
                    mode: config.merge_mode,
                    linear,
                })
            };
            let swin = SwinBlock::new(
                &mut ps,
                &mut rng,
                &format!("local.{i}.swin"),
                d,
                config.heads,
                config.mlp_ratio,
                c,
            )?;
            local.push(LocalBlock { merge, swin });
        }

        let normal = Normal::new(0.0, 0.02).expect("valid std");
        let token = (0..d).map(|_| T::lit(normal.sample(&mut rng))).collect();
        let mos_token = ps.add("mos_token", Tensor::new(&[1, d], token)?)?;

        let global = (0..config.global_layers)
            .map(|j| {
                TransformerLayer::new(
                    &mut ps,
                    &mut rng,
                    &format!("global.{j}"),
                    d,
                    config.heads,
                    config.mlp_ratio,
                )
            })
            .collect::<Result<Vec<_>>>()?;

        let hh = config.head_hidden;
        let head = Head {
            fc1: Linear::new(&mut ps, &mut rng, "head.w1".into(), "head.b1".into(), d, hh)?,
            fc2: Linear::new(
                &mut ps,
                &mut rng,
                "head.w2".into(),
                "head.b2".into(),
                hh,
                hh,
            )?,
            out: Linear::new(&mut ps, &mut rng, "head.w3".into(), "head.b3".into(), hh, 1)?,
        };

        Ok(Self {
            config,
            params: ps,
            embed,
            local,
            mos_token,
            global,
            head,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamSet<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet<T> {
        &mut self.params
    }

    pub fn local_blocks(&self) -> &[LocalBlock] {
        &self.local
    }

    pub fn global_layers(&self) -> &[TransformerLayer] {
        &self.global
    }

    pub fn head(&self) -> &Head {
        &self.head
    }

    pub fn mos_token(&self) -> ParamId {
        self.mos_token
    }

    pub fn embedding(&self) -> &Linear {
        &self.embed
    }

    /// Total trainable scalars, `[MOS]` token included.
    pub fn param_count(&self) -> usize {
        self.params.numel()
    }

    /// Same architecture and values in another precision.
    pub fn cast<U: Real>(&self) -> Model<U> {
        Model {
            config: self.config.clone(),
            params: self.params.cast(),
            embed: self.embed.clone(),
            local: self.local.clone(),
            mos_token: self.mos_token,
            global: self.global.clone(),
            head: self.head.clone(),
        }
    }

    /// Checks that a waveform has the rate and length this model expects.
    pub fn check_input(&self, w: &Waveform) -> Result<()> {
        if w.sample_rate != SAMPLE_RATE {
            return Err(Error::config(format!(
                "audio is {} Hz, model expects {SAMPLE_RATE} Hz",
                w.sample_rate
            )));
        }
        let n = self.config.num_samples();
        if w.len() != n {
            return Err(Error::config(format!(
                "audio has {} samples ({:.4} s) but the model is configured for {n} samples ({} s)",
                w.len(),
                w.duration_s(),
                self.config.duration_s
            )));
        }
        Ok(())
    }

    pub fn frames(&self, w: &Waveform) -> Result<FrameMatrix> {
        self.check_input(w)?;
        frame_waveform(w, self.config.frame_ms(), self.config.hop_ms())
    }

    /// Frame embedding `[F, S] → [F, D]`.
    pub fn embed_frames(&self, g: &mut Graph<T>, b: &Binding, frames: &FrameMatrix) -> Result<Var> {
        if frames.frame_len() != self.config.frame_samples {
            return Err(Error::config(format!(
                "frames hold {} samples, model expects {}",
                frames.frame_len(),
                self.config.frame_samples
            )));
        }
        let data = frames.data().iter().map(|&v| T::lit(v as f64)).collect();
        let x = g.constant(Tensor::new(
            &[frames.num_frames(), frames.frame_len()],
            data,
        )?);
        self.embed.forward(g, b, x)
    }

    pub fn merge_frames(
        &self,
        g: &mut Graph<T>,
        b: &Binding,
        merge: &Merge,
        x: Var,
    ) -> Result<Var> {
        match merge.mode {
            MergeMode::MaxPool => g.max_pool_1d(x, merge.kernel),
            MergeMode::AvgPool => g.avg_pool_1d(x, merge.kernel),
            MergeMode::Linear => {
                let (f, d) = (g.shape(x)[0], g.shape(x)[1]);
                if f % merge.kernel != 0 {
                    return Err(Error::config(format!(
                        "{f} tokens not divisible by merge kernel {}",
                        merge.kernel
                    )));
                }
                let windows = g.reshape(x, &[f / merge.kernel, merge.kernel * d])?;
                merge
                    .linear
                    .as_ref()
                    .expect("linear merge has weights")
                    .forward(g, b, windows)
            }
        }
    }

    /// Maps the `[MOS]` row `[1, D]` to a `[1]` prediction.
    pub fn mos_head(&self, g: &mut Graph<T>, b: &Binding, e: Var) -> Result<Var> {
        let h = self.head.fc1.forward(g, b, e)?;
        let h = g.gelu(h)?;
        let h = self.head.fc2.forward(g, b, h)?;
        let h = g.gelu(h)?;
        let y = self.head.out.forward(g, b, h)?;
        g.reshape(y, &[1])
    }

    /// Local stage: `[F, S]` frames to `[N, D]` tokens.
    pub fn local_stage(
        &self,
        g: &mut Graph<T>,
        b: &Binding,
        frames: &FrameMatrix,
        trace: &mut Option<&mut Trace>,
    ) -> Result<Var> {
        let mut x = self.embed_frames(g, b, frames)?;
        if self.config.positional_encoding == PositionalEncoding::Sinusoidal {
            x = add_sinusoidal_pe(g, x)?;
        }
        if let Some(t) = trace.as_deref_mut() {
            t.token_counts.push(g.shape(x)[0]);
        }
        for block in &self.local {
            if let Some(merge) = &block.merge {
                x = self.merge_frames(g, b, merge, x)?;
                if let Some(t) = trace.as_deref_mut() {
                    t.token_counts.push(g.shape(x)[0]);
                }
            }
            let probes = trace
                .as_deref_mut()
                .filter(|t| t.record_attention)
                .map(|t| &mut t.attention);
            x = block.swin.forward(g, b, x, probes)?;
        }
        Ok(x)
    }

    /// Global stage: prepends `[MOS]` to `[N, D]` tokens, runs every
    /// global layer over all `1 + N` tokens, and regresses the `[MOS]` row.
    pub fn global_stage(
        &self,
        g: &mut Graph<T>,
        b: &Binding,
        tokens: Var,
        trace: &mut Option<&mut Trace>,
    ) -> Result<Var> {
        let mut tokens = tokens;
        if let Some(perm) = trace.as_ref().and_then(|t| t.global_permutation.clone()) {
            let n = g.shape(tokens)[0];
            let mut sorted = perm.clone();
            sorted.sort_unstable();
            if sorted != (0..n).collect::<Vec<_>>() {
                return Err(Error::dim(format!(
                    "global permutation is not a permutation of {n} tokens"
                )));
            }
            tokens = g.gather_rows(tokens, &perm)?;
        }
        let mut x = g.concat_rows(b.var(self.mos_token), tokens)?;
        let c = g.shape(x)[0];
        for layer in &self.global {
            let probes = trace
                .as_deref_mut()
                .filter(|t| t.record_attention)
                .map(|t| &mut t.attention);
            x = layer.forward(g, b, x, c, None, probes, false)?;
        }
        let e = g.slice_rows(x, 0, 1)?;
        self.mos_head(g, b, e)
    }

    /// Full forward pass on pre-framed audio; returns the `[1]` prediction.
    pub fn forward_frames(
        &self,
        g: &mut Graph<T>,
        b: &Binding,
        frames: &FrameMatrix,
        mut trace: Option<&mut Trace>,
    ) -> Result<Var> {
        let tokens = self.local_stage(g, b, frames, &mut trace)?;
        self.global_stage(g, b, tokens, &mut trace)
    }

    /// Predicts a score for pre-framed audio.
    pub fn predict_frames(&self, frames: &FrameMatrix) -> Result<f64> {
        self.predict_traced(frames, None)
    }

    pub fn predict_traced(&self, frames: &FrameMatrix, trace: Option<&mut Trace>) -> Result<f64> {
        let mut g = Graph::new();
        let b = self.params.bind_frozen(&mut g);
        let y = self.forward_frames(&mut g, &b, frames, trace)?;
        Ok(g.value(y).data()[0].as_f64())
    }

    /// Predicts a score for a waveform of exactly the configured duration.
    pub fn predict(&self, w: &Waveform) -> Result<f64> {
        self.predict_frames(&self.frames(w)?)
    }

    /// Parallel prediction; output order follows the input order.
    pub fn predict_batch(&self, frames: &[&FrameMatrix]) -> Result<Vec<f64>> {
        frames.par_iter().map(|f| self.predict_frames(f)).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn noise(cfg: &ModelConfig, seed: u64) -> Waveform {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Waveform::new(
            (0..cfg.num_samples())
                .map(|_| rng.gen_range(-0.5..0.5))
                .collect(),
            SAMPLE_RATE,
        )
    }

    /// Parameters of one pre-norm transformer layer, counted by hand.
    fn layer_params(d: usize, r: usize) -> usize {
        let attn = 4 * (d * d + d);
        let norms = 2 * 2 * d;
        let mlp = d * r * d + r * d + r * d * d + d;
        attn + norms + mlp
    }

    #[test]
    fn default_param_count_near_86k() {
        let m = Model::<f32>::new(ModelConfig::default(), 0).unwrap();
        let n = m.param_count();
        assert_eq!(layer_params(16, 4), 3280);
        // 26 transformer layers, embedding, head, [MOS]
        assert_eq!(
            n,
            26 * 3280 + (32 * 16 + 16) + (2 * (16 * 16 + 16) + 17) + 16
        );
        assert!((80_000..=92_000).contains(&n), "{n}");
    }

    #[test]
    fn single_local_and_global_block_count() {
        let cfg = ModelConfig {
            embed_dim: 16,
            context_sizes: vec![2],
            pool_kernels: vec![],
            global_layers: 1,
            head_hidden: 16,
            duration_s: 0.004,
            ..ModelConfig::default()
        };
        let m = Model::<f32>::new(cfg.clone(), 0).unwrap();
        let swin = 2 * layer_params(16, 4);
        let by_hand = layer_params(16, 4) + swin + (32 * 16 + 16) + (2 * (16 * 16 + 16) + 17) + 16;
        assert_eq!(m.param_count(), by_hand);

        let doubled = Model::<f32>::new(
            ModelConfig {
                global_layers: 2,
                ..cfg
            },
            0,
        )
        .unwrap();
        assert_eq!(doubled.param_count() - m.param_count(), layer_params(16, 4));
    }

    #[test]
    fn parameter_names_are_path_like() {
        let m = Model::<f32>::new(ModelConfig::default(), 0).unwrap();
        assert!(m.params().by_name("local.3.swin.l1.attn.wq").is_some());
        assert!(m.params().by_name("global.11.mlp.w2").is_some());
        assert!(m.params().by_name("mos_token").is_some());
    }

    #[test]
    fn desk_forward_ladder_and_determinism() {
        let cfg = ModelConfig::desk();
        let m = Model::<f32>::new(cfg.clone(), 1).unwrap();
        let w = noise(&cfg, 2);
        let frames = m.frames(&w).unwrap();
        let mut trace = Trace::default();
        let y1 = m.predict_traced(&frames, Some(&mut trace)).unwrap();
        assert_eq!(trace.token_counts, vec![1280, 256, 128]);
        let y2 = m.predict(&w).unwrap();
        assert_eq!(y1.to_bits(), y2.to_bits());
    }

    #[test]
    fn embed_frames_shapes_and_bias() {
        let cfg = ModelConfig::tiny();
        let m = Model::<f64>::new(cfg.clone(), 1).unwrap();
        let frames = m
            .frames(&Waveform::new(vec![0.0; cfg.num_samples()], SAMPLE_RATE))
            .unwrap();
        let mut params = m.params().clone();
        let bias = params.get_mut(m.embedding().b);
        bias.tensor
            .data_mut()
            .copy_from_slice(&[1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0]);
        let mut g = Graph::new();
        let b = params.bind(&mut g);
        let x = m.embed_frames(&mut g, &b, &frames).unwrap();
        assert_eq!(g.shape(x), &[40, 8]);
        for row in g.value(x).data().chunks(8) {
            assert_eq!(row, &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0]);
        }
    }

    #[test]
    fn embed_with_identity_weights_copies_frames() {
        let cfg = ModelConfig {
            embed_dim: 32,
            heads: 4,
            head_hidden: 32,
            ..ModelConfig::tiny()
        };
        let m = Model::<f64>::new(cfg.clone(), 1).unwrap();
        let w = noise(&cfg, 5);
        let frames = m.frames(&w).unwrap();
        let mut params = m.params().clone();
        let wt = params.get_mut(m.embedding().w).tensor.data_mut();
        wt.iter_mut()
            .enumerate()
            .for_each(|(i, v)| *v = if i / 32 == i % 32 { 1.0 } else { 0.0 });
        let mut g = Graph::new();
        let b = params.bind(&mut g);
        let x = m.embed_frames(&mut g, &b, &frames).unwrap();
        for (a, &f) in g.value(x).data().iter().zip(frames.data()) {
            assert_eq!(*a, f as f64);
        }
    }

    #[test]
    fn wrong_duration_is_a_clear_error() {
        let cfg = ModelConfig::desk();
        let m = Model::<f32>::new(cfg, 1).unwrap();
        let err = m
            .predict(&Waveform::new(vec![0.0; 16_000], SAMPLE_RATE))
            .unwrap_err();
        assert!(
            err.to_string().contains("configured for 20480 samples"),
            "{err}"
        );
    }

    #[test]
    fn head_with_zero_weights_returns_final_bias() {
        let m = Model::<f64>::new(ModelConfig::tiny(), 3).unwrap();
        let mut params = m.params().clone();
        for lin in [&m.head().fc1, &m.head().fc2, &m.head().out] {
            params
                .get_mut(lin.w)
                .tensor
                .data_mut()
                .iter_mut()
                .for_each(|v| *v = 0.0);
        }
        params.get_mut(m.head().out.b).tensor.data_mut()[0] = 3.25;
        let mut g = Graph::new();
        let b = params.bind(&mut g);
        let e = g.constant(Tensor::new(&[1, 8], vec![0.7; 8]).unwrap());
        let y = m.mos_head(&mut g, &b, e).unwrap();
        assert_eq!(g.value(y).data(), &[3.25]);
    }

    #[test]
    fn linear_merge_with_averaging_weights_matches_avg_pool() {
        let cfg = ModelConfig {
            merge_mode: MergeMode::Linear,
            ..ModelConfig::tiny()
        };
        let m = Model::<f64>::new(cfg, 4).unwrap();
        let merge = m.local_blocks()[1].merge.clone().unwrap();
        let lin = merge.linear.clone().unwrap();
        let (k, d) = (merge.kernel, 8);
        let mut params = m.params().clone();
        // W[(r·D + i), j] = 1/k when i == j
        let w = params.get_mut(lin.w).tensor.data_mut();
        for r in 0..k {
            for i in 0..d {
                for j in 0..d {
                    w[(r * d + i) * d + j] = if i == j { 1.0 / k as f64 } else { 0.0 };
                }
            }
        }
        let mut g = Graph::new();
        let b = params.bind(&mut g);
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let x = g.constant(
            Tensor::new(
                &[6, d],
                (0..6 * d).map(|_| rng.gen_range(-1.0..1.0)).collect(),
            )
            .unwrap(),
        );
        let lin_out = m.merge_frames(&mut g, &b, &merge, x).unwrap();
        let avg = g.avg_pool_1d(x, k).unwrap();
        for (a, b) in g.value(lin_out).data().iter().zip(g.value(avg).data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_global_layer_is_identity() {
        let m = Model::<f64>::new(ModelConfig::tiny(), 2).unwrap();
        let layer = &m.global_layers()[0];
        let mut params = m.params().clone();
        for p in params.iter_mut() {
            if p.name.starts_with("global.0.") && !p.name.ends_with(".gain") {
                p.tensor.data_mut().iter_mut().for_each(|v| *v = 0.0);
            }
        }
        let mut g = Graph::new();
        let b = params.bind(&mut g);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = g.constant(
            Tensor::new(
                &[21, 8],
                (0..21 * 8).map(|_| rng.gen_range(-1.0..1.0)).collect(),
            )
            .unwrap(),
        );
        let y = layer.forward(&mut g, &b, x, 21, None, None, false).unwrap();
        assert_eq!(g.value(y), g.value(x));
    }

    #[test]
    fn mos_output_depends_on_every_token() {
        let m = Model::<f64>::new(ModelConfig::tiny(), 6).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let n = 20;
        let base: Vec<f64> = (0..n * 8).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let run = |data: Vec<f64>| {
            let mut g = Graph::new();
            let b = m.params().bind_frozen(&mut g);
            let x = g.constant(Tensor::new(&[n, 8], data).unwrap());
            let y = m.global_stage(&mut g, &b, x, &mut None).unwrap();
            g.value(y).data()[0]
        };
        let y0 = run(base.clone());
        for tok in [0, 7, 19] {
            let mut p = base.clone();
            p[tok * 8 + 3] += 0.5;
            assert!((run(p) - y0).abs() > 1e-12, "token {tok}");
        }
    }

    #[test]
    fn sinusoidal_config_changes_prediction() {
        let cfg = ModelConfig::tiny();
        let plain = Model::<f64>::new(cfg.clone(), 9).unwrap();
        let pe = Model::<f64>::new(
            ModelConfig {
                positional_encoding: PositionalEncoding::Sinusoidal,
                ..cfg.clone()
            },
            9,
        )
        .unwrap();
        let w = noise(&cfg, 3);
        assert_ne!(plain.predict(&w).unwrap(), pe.predict(&w).unwrap());
    }
}
