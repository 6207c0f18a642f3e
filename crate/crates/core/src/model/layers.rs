//! Building blocks of the network, expressed as tape operations.

use rand::Rng;
use rand_distr::{Distribution, Uniform};

use crate::error::{Error, Result};
use crate::numerics::{Binding, Graph, ParamId, ParamSet, Real, Tensor, Var};

pub(crate) const LN_EPS: f64 = 1e-5;

/// Affine map `x · W + b` with `W: [in × out]`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
}

impl Linear {
    pub(crate) fn new<T: Real, R: Rng>(
        ps: &mut ParamSet<T>,
        rng: &mut R,
        w_name: String,
        b_name: String,
        fan_in: usize,
        fan_out: usize,
    ) -> Result<Self> {
        let bound = 1.0 / (fan_in as f64).sqrt();
        let dist = Uniform::new_inclusive(-bound, bound);
        let w = (0..fan_in * fan_out)
            .map(|_| T::lit(dist.sample(rng)))
            .collect();
        Ok(Self {
            w: ps.add(w_name, Tensor::new(&[fan_in, fan_out], w)?)?,
            b: ps.add(b_name, Tensor::zeros(&[fan_out]))?,
        })
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, b: &Binding, x: Var) -> Result<Var> {
        let y = g.matmul(x, b.var(self.w))?;
        g.add_bias(y, b.var(self.b))
    }
}

#[derive(Clone, Debug)]
pub struct LayerNormParams {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl LayerNormParams {
    fn new<T: Real>(ps: &mut ParamSet<T>, prefix: &str, d: usize) -> Result<Self> {
        Ok(Self {
            gain: ps.add(format!("{prefix}.gain"), Tensor::full(&[d], T::one()))?,
            bias: ps.add(format!("{prefix}.bias"), Tensor::zeros(&[d]))?,
        })
    }

    fn forward<T: Real>(&self, g: &mut Graph<T>, b: &Binding, x: Var) -> Result<Var> {
        g.layer_norm(x, b.var(self.gain), b.var(self.bias), T::lit(LN_EPS))
    }
}

#[derive(Clone, Debug)]
pub struct Attention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
    pub heads: usize,
}

/// Attention probabilities of one layer, captured for inspection.
#[derive(Clone, Debug)]
pub struct AttentionProbe {
    pub layer: String,
    pub shifted: bool,
    pub context: usize,
    pub groups: usize,
    pub heads: usize,
    /// `[groups, heads, context, context]`, row = query, column = key.
    pub probs: Vec<f64>,
}

impl AttentionProbe {
    pub fn prob(&self, group: usize, head: usize, query: usize, key: usize) -> f64 {
        let c = self.context;
        self.probs[((group * self.heads + head) * c + query) * c + key]
    }
}

impl Attention {
    fn new<T: Real, R: Rng>(
        ps: &mut ParamSet<T>,
        rng: &mut R,
        prefix: &str,
        d: usize,
        heads: usize,
    ) -> Result<Self> {
        let mut lin = |n: &str| {
            Linear::new(
                ps,
                rng,
                format!("{prefix}.w{n}"),
                format!("{prefix}.b{n}"),
                d,
                d,
            )
        };
        Ok(Self {
            q: lin("q")?,
            k: lin("k")?,
            v: lin("v")?,
            o: lin("o")?,
            heads,
        })
    }

    /// Multi-head self-attention inside each disjoint context of `c`
    /// consecutive tokens. `mask` covers `[F/c, heads, c, c]` (see
    /// [`layer_mask`]).
    pub fn forward<T: Real>(
        &self,
        g: &mut Graph<T>,
        b: &Binding,
        x: Var,
        c: usize,
        mask: Option<&[bool]>,
        probe: Option<(&mut Vec<AttentionProbe>, &str, bool)>,
    ) -> Result<Var> {
        let (f, d) = match *g.shape(x) {
            [f, d] => (f, d),
            ref s => {
                return Err(Error::dim(format!(
                    "attention input must be rank 2, got {s:?}"
                )))
            }
        };
        let h = self.heads;
        let dh = d / h;
        let groups = f / c;
        let split = |g: &mut Graph<T>, lin: &Linear| -> Result<Var> {
            let y = lin.forward(g, b, x)?;
            let y = context_partition(g, y, c)?;
            let y = g.reshape(y, &[groups, c, h, dh])?;
            let y = g.swap_axes12(y)?;
            g.reshape(y, &[groups * h, c, dh])
        };
        let q = split(g, &self.q)?;
        let k = split(g, &self.k)?;
        let v = split(g, &self.v)?;
        let scores = g.bmm(q, k, true)?;
        let scores = g.scale(scores, T::lit(1.0 / (dh as f64).sqrt()))?;
        let p = g.softmax_masked(scores, mask)?;
        if let Some((sink, layer, shifted)) = probe {
            sink.push(AttentionProbe {
                layer: layer.to_string(),
                shifted,
                context: c,
                groups,
                heads: h,
                probs: g.value(p).data().iter().map(|v| v.as_f64()).collect(),
            });
        }
        let out = g.bmm(p, v, false)?;
        let out = g.reshape(out, &[groups, h, c, dh])?;
        let out = g.swap_axes12(out)?;
        let out = g.reshape(out, &[f, d])?;
        self.o.forward(g, b, out)
    }
}

#[derive(Clone, Debug)]
pub struct Mlp {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl Mlp {
    fn forward<T: Real>(&self, g: &mut Graph<T>, b: &Binding, x: Var) -> Result<Var> {
        let h = self.fc1.forward(g, b, x)?;
        let h = g.gelu(h)?;
        self.fc2.forward(g, b, h)
    }
}

/// Pre-norm transformer layer: `x + MHSA(LN(x))`, then `x + MLP(LN(x))`.
#[derive(Clone, Debug)]
pub struct TransformerLayer {
    pub name: String,
    pub ln1: LayerNormParams,
    pub attn: Attention,
    pub ln2: LayerNormParams,
    pub mlp: Mlp,
}

impl TransformerLayer {
    pub(crate) fn new<T: Real, R: Rng>(
        ps: &mut ParamSet<T>,
        rng: &mut R,
        prefix: &str,
        d: usize,
        heads: usize,
        mlp_ratio: usize,
    ) -> Result<Self> {
        let ln1 = LayerNormParams::new(ps, &format!("{prefix}.ln1"), d)?;
        let attn = Attention::new(ps, rng, &format!("{prefix}.attn"), d, heads)?;
        let ln2 = LayerNormParams::new(ps, &format!("{prefix}.ln2"), d)?;
        let hidden = d * mlp_ratio;
        let fc1 = Linear::new(
            ps,
            rng,
            format!("{prefix}.mlp.w1"),
            format!("{prefix}.mlp.b1"),
            d,
            hidden,
        )?;
        let fc2 = Linear::new(
            ps,
            rng,
            format!("{prefix}.mlp.w2"),
            format!("{prefix}.mlp.b2"),
            hidden,
            d,
        )?;
        Ok(Self {
            name: prefix.to_string(),
            ln1,
            attn,
            ln2,
            mlp: Mlp { fc1, fc2 },
        })
    }

    pub fn forward<T: Real>(
        &self,
        g: &mut Graph<T>,
        b: &Binding,
        x: Var,
        c: usize,
        mask: Option<&[bool]>,
        probes: Option<&mut Vec<AttentionProbe>>,
        shifted: bool,
    ) -> Result<Var> {
        let h = self.ln1.forward(g, b, x)?;
        let probe = probes.map(|p| (p, self.name.as_str(), shifted));
        let h = self.attn.forward(g, b, h, c, mask, probe)?;
        let x = g.add(x, h)?;
        let h = self.ln2.forward(g, b, x)?;
        let h = self.mlp.forward(g, b, h)?;
        g.add(x, h)
    }
}

/// Two transformer layers over contexts of `context` tokens; the second
/// runs on the sequence circularly shifted left by `context / 2`, masks
/// the wrapped context, and shifts back.
#[derive(Clone, Debug)]
pub struct SwinBlock {
    pub context: usize,
    pub plain: TransformerLayer,
    pub shifted: TransformerLayer,
}

impl SwinBlock {
    pub(crate) fn new<T: Real, R: Rng>(
        ps: &mut ParamSet<T>,
        rng: &mut R,
        prefix: &str,
        d: usize,
        heads: usize,
        mlp_ratio: usize,
        context: usize,
    ) -> Result<Self> {
        Ok(Self {
            context,
            plain: TransformerLayer::new(ps, rng, &format!("{prefix}.l1"), d, heads, mlp_ratio)?,
            shifted: TransformerLayer::new(ps, rng, &format!("{prefix}.l2"), d, heads, mlp_ratio)?,
        })
    }

    pub fn forward<T: Real>(
        &self,
        g: &mut Graph<T>,
        b: &Binding,
        x: Var,
        mut probes: Option<&mut Vec<AttentionProbe>>,
    ) -> Result<Var> {
        let c = self.context;
        let f = g.shape(x)[0];
        if c == 0 || !c.is_multiple_of(2) || !f.is_multiple_of(c) {
            return Err(Error::config(format!(
                "swin block: context {c} must be even and divide {f} tokens"
            )));
        }
        let x = self
            .plain
            .forward(g, b, x, c, None, probes.as_deref_mut(), false)?;
        let s = c / 2;
        let mask = layer_mask(f / c, self.plain.attn.heads, c);
        let xs = circular_shift(g, x, s)?;
        let xs = self
            .shifted
            .forward(g, b, xs, c, Some(&mask), probes, true)?;
        circular_shift(g, xs, f - s)
    }
}

/// Groups `[F, D]` tokens into `[F/c, c, D]` disjoint contexts.
pub fn context_partition<T: Real>(g: &mut Graph<T>, x: Var, c: usize) -> Result<Var> {
    let (f, d) = match *g.shape(x) {
        [f, d] => (f, d),
        ref s => {
            return Err(Error::dim(format!(
                "context_partition: expected rank 2, got {s:?}"
            )))
        }
    };
    if c == 0 || f % c != 0 {
        return Err(Error::config(format!(
            "context {c} does not divide {f} tokens"
        )));
    }
    g.reshape(x, &[f / c, c, d])
}

/// Inverse of [`context_partition`].
pub fn context_merge<T: Real>(g: &mut Graph<T>, x: Var) -> Result<Var> {
    match *g.shape(x) {
        [groups, c, d] => g.reshape(x, &[groups * c, d]),
        ref s => Err(Error::dim(format!(
            "context_merge: expected rank 3, got {s:?}"
        ))),
    }
}

/// `out[j] = x[(j + s) mod F]`.
pub fn circular_shift<T: Real>(g: &mut Graph<T>, x: Var, s: usize) -> Result<Var> {
    g.shift_rows(x, s)
}

/// Mask for the wrapped context after a left shift of `c / 2`: the first
/// half holds the original end tokens and the second half the original
/// start tokens; attention is allowed only within a half.
pub fn build_shift_mask(c: usize) -> Vec<bool> {
    let half = c / 2;
    let mut m = vec![false; c * c];
    for i in 0..c {
        for j in 0..c {
            m[i * c + j] = (i < half) == (j < half);
        }
    }
    m
}

/// Full `[groups, heads, c, c]` mask for a shifted layer: every context is
/// unmasked except the last, which gets [`build_shift_mask`].
pub fn layer_mask(groups: usize, heads: usize, c: usize) -> Vec<bool> {
    let mut m = vec![true; groups * heads * c * c];
    let wrapped = build_shift_mask(c);
    let last = (groups - 1) * heads * c * c;
    for h in 0..heads {
        let at = last + h * c * c;
        m[at..at + c * c].copy_from_slice(&wrapped);
    }
    m
}

/// Fixed sin/cos position table `[F, D]`, base 10000.
pub fn sinusoidal_table<T: Real>(f: usize, d: usize) -> Tensor<T> {
    let mut data = vec![T::zero(); f * d];
    for pos in 0..f {
        for i in 0..d / 2 {
            let rate = 10000f64.powf(-2.0 * i as f64 / d as f64);
            let angle = pos as f64 * rate;
            data[pos * d + 2 * i] = T::lit(angle.sin());
            data[pos * d + 2 * i + 1] = T::lit(angle.cos());
        }
    }
    Tensor::new(&[f, d], data).expect("table shape")
}

pub fn add_sinusoidal_pe<T: Real>(g: &mut Graph<T>, x: Var) -> Result<Var> {
    let (f, d) = match *g.shape(x) {
        [f, d] if d % 2 == 0 => (f, d),
        ref s => {
            return Err(Error::config(format!(
                "sinusoidal encoding needs [F, even D], got {s:?}"
            )))
        }
    };
    let pe = g.constant(sinusoidal_table(f, d));
    g.add(x, pe)
}
