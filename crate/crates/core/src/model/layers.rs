use rand::Rng;

use crate::grad::{ConvSpec, Graph, ParamGroup, ParamId, ParamStore, Result, Scalar, Tensor, Var};

pub(crate) const RELU_GAIN: f64 = std::f64::consts::SQRT_2;

#[derive(Debug, Clone)]
pub(crate) struct Linear {
    w: ParamId,
    b: ParamId,
    din: usize,
    dout: usize,
}

impl Linear {
    pub fn new<T: Scalar>(
        s: &mut ParamStore<T>,
        name: &str,
        group: ParamGroup,
        din: usize,
        dout: usize,
        gain: f64,
        rng: &mut impl Rng,
    ) -> Self {
        let w = s.add_uniform(format!("{name}.w"), group, &[din, dout], din, gain, rng);
        let b = s.add_const(format!("{name}.b"), group, &[dout], 0.0);
        Self { w, b, din, dout }
    }

    /// Applies the layer to the last axis of `x`.
    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, s: &ParamStore<T>, x: Var) -> Result<Var> {
        let shape = g.shape(x).to_vec();
        let rows = g.value(x).numel() / self.din;
        let flat = if shape.len() == 2 { x } else { g.reshape(x, &[rows, self.din])? };
        let w = g.param(s, self.w);
        let b = g.param(s, self.b);
        let y = g.matmul(flat, w)?;
        let y = g.add(y, b)?;
        if shape.len() == 2 {
            return Ok(y);
        }
        let mut out = shape;
        *out.last_mut().expect("rank ≥ 1") = self.dout;
        g.reshape(y, &out)
    }
}

#[derive(Debug, Clone)]
pub(crate) struct LayerNorm {
    gamma: ParamId,
    beta: ParamId,
}

impl LayerNorm {
    pub fn new<T: Scalar>(s: &mut ParamStore<T>, name: &str, d: usize) -> Self {
        Self {
            gamma: s.add_const(format!("{name}.gamma"), ParamGroup::Transformer, &[d], 1.0),
            beta: s.add_const(format!("{name}.beta"), ParamGroup::Transformer, &[d], 0.0),
        }
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, s: &ParamStore<T>, x: Var) -> Result<Var> {
        let gamma = g.param(s, self.gamma);
        let beta = g.param(s, self.beta);
        g.layer_norm(x, gamma, beta)
    }
}

#[derive(Debug, Clone)]
pub(crate) struct Attention {
    q: Linear,
    k: Linear,
    v: Linear,
    o: Linear,
    heads: usize,
    d: usize,
}

impl Attention {
    pub fn new<T: Scalar>(s: &mut ParamStore<T>, name: &str, d: usize, heads: usize, rng: &mut impl Rng) -> Self {
        let g = ParamGroup::Transformer;
        Self {
            q: Linear::new(s, &format!("{name}.q"), g, d, d, 1.0, rng),
            k: Linear::new(s, &format!("{name}.k"), g, d, d, 1.0, rng),
            v: Linear::new(s, &format!("{name}.v"), g, d, d, 1.0, rng),
            o: Linear::new(s, &format!("{name}.o"), g, d, d, 1.0, rng),
            heads,
            d,
        }
    }

    /// `[B, L, D] → [B·H, L, D/H]`.
    fn split<T: Scalar>(&self, g: &mut Graph<T>, x: Var) -> Result<Var> {
        let (b, l) = (g.shape(x)[0], g.shape(x)[1]);
        let dh = self.d / self.heads;
        if self.heads == 1 {
            return Ok(x);
        }
        let x = g.reshape(x, &[b, l, self.heads, dh])?;
        let x = g.permute(x, &[0, 2, 1, 3])?;
        g.reshape(x, &[b * self.heads, l, dh])
    }

    fn merge<T: Scalar>(&self, g: &mut Graph<T>, x: Var, b: usize) -> Result<Var> {
        if self.heads == 1 {
            return Ok(x);
        }
        let (l, dh) = (g.shape(x)[1], g.shape(x)[2]);
        let x = g.reshape(x, &[b, self.heads, l, dh])?;
        let x = g.permute(x, &[0, 2, 1, 3])?;
        g.reshape(x, &[b, l, self.d])
    }

    /// Scaled dot-product attention of `query: [B, Lq, D]` over
    /// `context: [B, Lk, D]`. `mask: [Lq, Lk]` is added to the scores.
    /// Returns the output and the attention probabilities `[B·H, Lq, Lk]`.
    pub fn forward<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        s: &ParamStore<T>,
        query: Var,
        context: Var,
        mask: Option<Var>,
    ) -> Result<(Var, Var)> {
        let b = g.shape(query)[0];
        let q = self.q.forward(g, s, query)?;
        let k = self.k.forward(g, s, context)?;
        let v = self.v.forward(g, s, context)?;
        let (q, k, v) = (self.split(g, q)?, self.split(g, k)?, self.split(g, v)?);
        let scores = g.matmul_t(q, k, false, true)?;
        let scores = g.scale(scores, 1.0 / ((self.d / self.heads) as f64).sqrt());
        let scores = match mask {
            Some(m) => g.add(scores, m)?,
            None => scores,
        };
        let p = g.softmax(scores);
        let ctx = g.matmul(p, v)?;
        let ctx = self.merge(g, ctx, b)?;
        Ok((self.o.forward(g, s, ctx)?, p))
    }
}

#[derive(Debug, Clone)]
pub(crate) struct FeedForward {
    up: Linear,
    down: Linear,
}

impl FeedForward {
    pub fn new<T: Scalar>(s: &mut ParamStore<T>, name: &str, d: usize, hidden: usize, rng: &mut impl Rng) -> Self {
        let g = ParamGroup::Transformer;
        Self {
            up: Linear::new(s, &format!("{name}.up"), g, d, hidden, RELU_GAIN, rng),
            down: Linear::new(s, &format!("{name}.down"), g, hidden, d, 1.0, rng),
        }
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, s: &ParamStore<T>, x: Var) -> Result<Var> {
        let h = self.up.forward(g, s, x)?;
        let h = g.relu(h);
        self.down.forward(g, s, h)
    }
}

/// Post-norm encoder layer: `x ← LN(x + SelfAttn(x))`, `x ← LN(x + FFN(x))`.
#[derive(Debug, Clone)]
pub(crate) struct EncoderLayer {
    attn: Attention,
    ln1: LayerNorm,
    ffn: FeedForward,
    ln2: LayerNorm,
}

impl EncoderLayer {
    pub fn new<T: Scalar>(s: &mut ParamStore<T>, name: &str, d: usize, heads: usize, hidden: usize, rng: &mut impl Rng) -> Self {
        Self {
            attn: Attention::new(s, &format!("{name}.attn"), d, heads, rng),
            ln1: LayerNorm::new(s, &format!("{name}.ln1"), d),
            ffn: FeedForward::new(s, &format!("{name}.ffn"), d, hidden, rng),
            ln2: LayerNorm::new(s, &format!("{name}.ln2"), d),
        }
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, s: &ParamStore<T>, x: Var, probs: &mut Vec<Var>) -> Result<Var> {
        let (a, p) = self.attn.forward(g, s, x, x, None)?;
        probs.push(p);
        let x = g.add(x, a)?;
        let x = self.ln1.forward(g, s, x)?;
        let f = self.ffn.forward(g, s, x)?;
        let x = g.add(x, f)?;
        self.ln2.forward(g, s, x)
    }
}

/// Post-norm decoder layer: masked self-attention, cross-attention to the
/// encoder memory, feed-forward, each followed by residual + LN.
#[derive(Debug, Clone)]
pub(crate) struct DecoderLayer {
    self_attn: Attention,
    ln1: LayerNorm,
    cross_attn: Attention,
    ln2: LayerNorm,
    ffn: FeedForward,
    ln3: LayerNorm,
}

impl DecoderLayer {
    pub fn new<T: Scalar>(s: &mut ParamStore<T>, name: &str, d: usize, heads: usize, hidden: usize, rng: &mut impl Rng) -> Self {
        Self {
            self_attn: Attention::new(s, &format!("{name}.self"), d, heads, rng),
            ln1: LayerNorm::new(s, &format!("{name}.ln1"), d),
            cross_attn: Attention::new(s, &format!("{name}.cross"), d, heads, rng),
            ln2: LayerNorm::new(s, &format!("{name}.ln2"), d),
            ffn: FeedForward::new(s, &format!("{name}.ffn"), d, hidden, rng),
            ln3: LayerNorm::new(s, &format!("{name}.ln3"), d),
        }
    }

    pub fn forward<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        s: &ParamStore<T>,
        x: Var,
        memory: Var,
        mask: Option<Var>,
        probs: &mut Vec<Var>,
    ) -> Result<Var> {
        let (a, p) = self.self_attn.forward(g, s, x, x, mask)?;
        probs.push(p);
        let x = g.add(x, a)?;
        let x = self.ln1.forward(g, s, x)?;
        let (c, p) = self.cross_attn.forward(g, s, x, memory, None)?;
        probs.push(p);
        let x = g.add(x, c)?;
        let x = self.ln2.forward(g, s, x)?;
        let f = self.ffn.forward(g, s, x)?;
        let x = g.add(x, f)?;
        self.ln3.forward(g, s, x)
    }
}

/// Strided 3×3 conv + relu blocks; each halves the spatial size.
#[derive(Debug, Clone)]
pub(crate) struct Backbone {
    convs: Vec<(ParamId, ParamId)>,
}

impl Backbone {
    pub fn new<T: Scalar>(s: &mut ParamStore<T>, channels: &[usize], rng: &mut impl Rng) -> Self {
        let convs = channels
            .windows(2)
            .enumerate()
            .map(|(i, c)| {
                let fan_in = c[0] * 9;
                let w = s.add_uniform(format!("backbone.{i}.w"), ParamGroup::Backbone, &[c[1], c[0], 3, 3], fan_in, RELU_GAIN, rng);
                let b = s.add_const(format!("backbone.{i}.b"), ParamGroup::Backbone, &[c[1]], 0.0);
                (w, b)
            })
            .collect();
        Self { convs }
    }

    pub fn stride(&self) -> usize {
        1 << self.convs.len()
    }

    /// `[B, 3, H, W] → [B, C, H/stride, W/stride]`.
    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, s: &ParamStore<T>, mut x: Var) -> Result<Var> {
        for &(w, b) in &self.convs {
            let (w, b) = (g.param(s, w), g.param(s, b));
            x = g.conv2d(x, w, b, ConvSpec { stride: 2, padding: 1 })?;
            x = g.relu(x);
        }
        Ok(x)
    }
}

/// Fixed 2-D sine embedding, `[h·w, d]` row-major over (y, x). The first
/// half of the channels encodes the row, the second half the column, each
/// as interleaved sin/cos pairs of geometrically spaced frequencies.
pub fn sine_2d(h: usize, w: usize, d: usize) -> Vec<f64> {
    let half = d / 2;
    let mut out = vec![0.0; h * w * d];
    for y in 0..h {
        for x in 0..w {
            let row = &mut out[(y * w + x) * d..(y * w + x + 1) * d];
            let py = (y as f64 + 0.5) / h as f64 * std::f64::consts::TAU;
            let px = (x as f64 + 0.5) / w as f64 * std::f64::consts::TAU;
            for (offset, pos) in [(0, py), (half, px)] {
                for i in 0..half / 2 {
                    let freq = 10000f64.powf(-((2 * i) as f64) / half as f64);
                    row[offset + 2 * i] = (pos * freq).sin();
                    row[offset + 2 * i + 1] = (pos * freq).cos();
                }
            }
        }
    }
    out
}

/// Sinusoidal encoding of sequence positions, `[len, d]`.
pub fn sine_1d(len: usize, d: usize) -> Vec<f64> {
    let mut out = vec![0.0; len * d];
    for t in 0..len {
        for i in 0..d / 2 {
            let freq = 10000f64.powf(-((2 * i) as f64) / d as f64);
            out[t * d + 2 * i] = (t as f64 * freq).sin();
            out[t * d + 2 * i + 1] = (t as f64 * freq).cos();
        }
    }
    out
}

/// Additive attention mask: 0 where `j ≤ i`, −∞ above the diagonal.
pub fn causal_additive_mask<T: Scalar>(len: usize) -> Tensor<T> {
    let data = crate::seqcodec::causal_mask(len)
        .into_iter()
        .flatten()
        .map(|allowed| if allowed { T::zero() } else { T::neg_infinity() })
        .collect();
    Tensor::new(vec![len, len], data).expect("square mask")
}
