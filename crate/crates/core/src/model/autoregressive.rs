use rand::Rng;

use super::layers::{causal_additive_mask, sine_1d, DecoderLayer, Linear, RELU_GAIN};
use super::{Model, ModelConfig, ModelError, Result};
use crate::grad::{GradError, Graph, ParamGroup, ParamStore, Result as GradResult, Scalar, Tensor, Var};
use crate::seqcodec::{self, Token, TokenClass, TokenSequence, EMBED_DIM};

#[derive(Debug, Clone)]
pub(crate) struct ArDecoder {
    embed: Linear,
    layers: Vec<DecoderLayer>,
    class: Linear,
    coord_hidden: Linear,
    coord_out: Linear,
}

impl ArDecoder {
    pub fn new<T: Scalar>(s: &mut ParamStore<T>, c: &ModelConfig, rng: &mut impl Rng) -> Self {
        let d = c.d_model;
        let g = ParamGroup::Transformer;
        Self {
            embed: Linear::new(s, "ar.embed", g, EMBED_DIM, d, 1.0, rng),
            layers: (0..c.dec_layers)
                .map(|i| DecoderLayer::new(s, &format!("dec.{i}"), d, c.n_heads, c.ffn_dim, rng))
                .collect(),
            class: Linear::new(s, "head.class", g, d, seqcodec::num_classes(c.task), 1.0, rng),
            coord_hidden: Linear::new(s, "head.coord.hidden", g, d, d, RELU_GAIN, rng),
            coord_out: Linear::new(s, "head.coord.out", g, d, c.coord_dim(), 1.0, rng),
        }
    }

    /// Next-token outputs for every prefix position: `inputs` are `B`
    /// equal-length sentences starting with `S`; returns class logits
    /// `[B·T, C]` and coordinates `[B·T, payload]`.
    pub fn forward<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        s: &ParamStore<T>,
        c: &ModelConfig,
        memory: Var,
        inputs: &[TokenSequence],
        attention: &mut Vec<Var>,
    ) -> GradResult<(Var, Var)> {
        let b = inputs.len();
        let t = inputs.first().map_or(0, TokenSequence::len);
        let invalid = |msg: String| GradError::Invalid { op: "ar_forward", msg };
        if b == 0 || t == 0 {
            return Err(invalid("empty prefix batch".into()));
        }
        if g.shape(memory).first() != Some(&b) {
            return Err(invalid(format!("{b} prefixes for memory {:?}", g.shape(memory))));
        }
        let mut emb = Vec::with_capacity(b * t * EMBED_DIM);
        for seq in inputs {
            if seq.len() != t {
                return Err(invalid("prefixes differ in length".into()));
            }
            if seq.tokens[0].class != TokenClass::S {
                return Err(invalid("prefix does not start with S".into()));
            }
            for tok in &seq.tokens {
                emb.extend(seqcodec::embed_token(tok, c.task).into_iter().map(T::of));
            }
        }
        let x = g.constant(Tensor::new(vec![b, t, EMBED_DIM], emb)?);
        let mut x = self.embed.forward(g, s, x)?;
        if c.use_decoder_pos_enc {
            let pe = g.constant(Tensor::from_f64(&[t, c.d_model], &sine_1d(t, c.d_model))?);
            x = g.add(x, pe)?;
        }
        let mask = g.constant(causal_additive_mask(t));
        for layer in &self.layers {
            x = layer.forward(g, s, x, memory, Some(mask), attention)?;
        }
        let x = g.reshape(x, &[b * t, c.d_model])?;
        let logits = self.class.forward(g, s, x)?;
        let h = self.coord_hidden.forward(g, s, x)?;
        let h = g.relu(h);
        let o = self.coord_out.forward(g, s, h)?;
        Ok((logits, g.sigmoid(o)))
    }

    /// Greedy generation for every memory in the batch, re-running the full
    /// prefix each step. `S` is never emitted. Returns the generated tokens
    /// (without the `S` prompt) and each token's class probability.
    pub fn greedy_decode<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        s: &ParamStore<T>,
        c: &ModelConfig,
        memory: Var,
    ) -> Result<Vec<(TokenSequence, Vec<f64>)>> {
        let b = g.shape(memory)[0];
        let n_cls = seqcodec::num_classes(c.task);
        let payload = seqcodec::payload_len(c.task);
        let mut prefixes = vec![TokenSequence { tokens: vec![Token::special(TokenClass::S)] }; b];
        let mut out: Vec<(TokenSequence, Vec<f64>)> = vec![(TokenSequence::default(), Vec::new()); b];
        let mut done = vec![false; b];
        for _ in 1..c.max_seq_len {
            let (logits, coords) = self.forward(g, s, c, memory, &prefixes, &mut Vec::new())?;
            let t = prefixes[0].len();
            let (ld, cd) = (g.data(logits), g.data(coords));
            for bi in 0..b {
                if done[bi] {
                    prefixes[bi].tokens.push(Token::special(TokenClass::E));
                    continue;
                }
                let r = bi * t + t - 1;
                let row: Vec<f64> = ld[r * n_cls..(r + 1) * n_cls].iter().map(|v| v.as_f64()).collect();
                let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let z: f64 = row.iter().map(|v| (v - max).exp()).sum();
                // argmax over every class except S; lowest index wins ties
                let mut best = 1;
                for k in 2..n_cls {
                    if row[k] > row[best] {
                        best = k;
                    }
                }
                let class = TokenClass::from_index(c.task, best).expect("index within vocabulary");
                let coords = if class.is_object() {
                    cd[r * payload..(r + 1) * payload]
                        .iter()
                        .map(|v| v.as_f64().clamp(0.0, 1.0))
                        .collect()
                } else {
                    Vec::new()
                };
                let token = Token { class, coords };
                out[bi].0.tokens.push(token.clone());
                out[bi].1.push((row[best] - max).exp() / z);
                prefixes[bi].tokens.push(token);
                done[bi] = class == TokenClass::E;
            }
            if done.iter().all(|&d| d) {
                break;
            }
        }
        Ok(out)
    }
}

impl<T: Scalar> Model<T> {
    fn ar_decoder(&self) -> Result<&ArDecoder> {
        match &self.head {
            super::Head::Autoregressive(a) => Ok(a),
            _ => Err(ModelError::Config("model is not auto-regressive".into())),
        }
    }

    /// Teacher-forced outputs `(class logits [B·T, C], coords [B·T, payload])`
    /// for equal-length prefixes.
    pub fn ar_forward(&self, g: &mut Graph<T>, memory: Var, inputs: &[TokenSequence]) -> Result<(Var, Var)> {
        Ok(self.ar_decoder()?.forward(g, &self.store, &self.config, memory, inputs, &mut Vec::new())?)
    }

    /// Attention probability tensors of every decoder layer, in order.
    pub fn ar_attention(&self, g: &mut Graph<T>, memory: Var, inputs: &[TokenSequence]) -> Result<Vec<Var>> {
        let mut att = Vec::new();
        self.ar_decoder()?.forward(g, &self.store, &self.config, memory, inputs, &mut att)?;
        Ok(att)
    }

    pub fn greedy_decode(&self, g: &mut Graph<T>, memory: Var) -> Result<Vec<(TokenSequence, Vec<f64>)>> {
        self.ar_decoder()?.greedy_decode(g, &self.store, &self.config, memory)
    }
}
