use rand::Rng;

use super::layers::{DecoderLayer, Linear, RELU_GAIN};
use super::{ModelConfig, Prediction, QueryOutput, Result};
use crate::grad::{GradError, Graph, ParamGroup, ParamId, ParamStore, Result as GradResult, Scalar, Tensor, Var};

/// Elman recurrence driven by the same query embedding at every step.
/// Each step emits `(x, y)` through a sigmoid and a stop logit.
#[derive(Debug, Clone)]
pub(crate) struct RnnHead {
    input: Vec<Linear>,
    recur: Vec<ParamId>,
    out: Linear,
}

impl RnnHead {
    fn new<T: Scalar>(s: &mut ParamStore<T>, d: usize, layers: usize, rng: &mut impl Rng) -> Self {
        let g = ParamGroup::Transformer;
        let input = (0..layers).map(|l| Linear::new(s, &format!("rnn.{l}.in"), g, d, d, 1.0, rng)).collect();
        let recur = (0..layers)
            .map(|l| s.add_uniform(format!("rnn.{l}.rec"), g, &[d, d], d, 0.5, rng))
            .collect();
        let out = Linear::new(s, "rnn.out", g, d, 3, 1.0, rng);
        Self { input, recur, out }
    }

    /// `e: [R, D]` → `(coords [R, 2·steps], stop logits [R, steps])`.
    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, s: &ParamStore<T>, e: Var, steps: usize) -> GradResult<(Var, Var)> {
        let first = self.input[0].forward(g, s, e)?;
        let mut h: Vec<Option<Var>> = vec![None; self.input.len()];
        let (mut xy, mut stop) = (Vec::with_capacity(steps), Vec::with_capacity(steps));
        for _ in 0..steps {
            for l in 0..self.input.len() {
                let mut pre = if l == 0 {
                    first
                } else {
                    let below = h[l - 1].expect("lower layer ran this step");
                    self.input[l].forward(g, s, below)?
                };
                if let Some(prev) = h[l] {
                    let w = g.param(s, self.recur[l]);
                    let r = g.matmul(prev, w)?;
                    pre = g.add(pre, r)?;
                }
                h[l] = Some(g.tanh(pre));
            }
            let top = h.last().copied().flatten().expect("at least one layer");
            let y = self.out.forward(g, s, top)?;
            let p = g.slice(y, 1, 0, 2)?;
            xy.push(g.sigmoid(p));
            stop.push(g.slice(y, 1, 2, 1)?);
        }
        Ok((g.concat(&xy, 1)?, g.concat(&stop, 1)?))
    }
}

#[derive(Debug, Clone)]
pub(crate) struct ParallelDecoder {
    queries: ParamId,
    layers: Vec<DecoderLayer>,
    class: Linear,
    coord_hidden: Linear,
    coord_out: Linear,
    rnn: Option<RnnHead>,
}

/// Raw parallel-decoder outputs for a batch of `B` images and `N` queries.
pub(crate) struct ParallelOutput {
    /// `[B·N, 2]`, class 0 = object.
    pub logits: Var,
    /// `[B·N, coord_dim]`, or `[B·N, 2·max_vertices]` for the recurrent head.
    pub coords: Var,
    /// `[B·N, max_vertices]` stop logits of the recurrent head.
    pub stop: Option<Var>,
    pub attention: Vec<Var>,
}

impl ParallelDecoder {
    pub fn new<T: Scalar>(s: &mut ParamStore<T>, c: &ModelConfig, rng: &mut impl Rng) -> Self {
        let d = c.d_model;
        let g = ParamGroup::Transformer;
        let queries = s.add_uniform("queries", g, &[c.n_queries, d], 1, 1.0, rng);
        let layers = (0..c.dec_layers)
            .map(|i| DecoderLayer::new(s, &format!("dec.{i}"), d, c.n_heads, c.ffn_dim, rng))
            .collect();
        let class = Linear::new(s, "head.class", g, d, 2, 1.0, rng);
        let coord_hidden = Linear::new(s, "head.coord.hidden", g, d, d, RELU_GAIN, rng);
        let coord_out = Linear::new(s, "head.coord.out", g, d, c.coord_dim(), 1.0, rng);
        let rnn = c.rnn_head.then(|| RnnHead::new(s, d, c.rnn_layers, rng));
        Self {
            queries,
            layers,
            class,
            coord_hidden,
            coord_out,
            rnn,
        }
    }

    pub fn forward<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        s: &ParamStore<T>,
        c: &ModelConfig,
        memory: Var,
    ) -> GradResult<ParallelOutput> {
        self.forward_steps(g, s, c, memory, c.max_vertices)
    }

    /// Like `forward`, with an explicit recurrence length for the RNN head.
    pub fn forward_steps<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        s: &ParamStore<T>,
        c: &ModelConfig,
        memory: Var,
        steps: usize,
    ) -> GradResult<ParallelOutput> {
        let ms = g.shape(memory).to_vec();
        if ms.len() != 3 || ms[2] != c.d_model {
            return Err(GradError::Invalid {
                op: "parallel_decode",
                msg: format!("memory {ms:?} is not [B, L, {}]", c.d_model),
            });
        }
        let (b, n, d) = (ms[0], c.n_queries, c.d_model);
        let zeros = g.constant(Tensor::zeros(&[b, n, d]));
        let q = g.param(s, self.queries);
        let mut x = g.add(zeros, q)?;
        let mut attention = Vec::new();
        for layer in &self.layers {
            x = layer.forward(g, s, x, memory, None, &mut attention)?;
        }
        let x = g.reshape(x, &[b * n, d])?;
        let logits = self.class.forward(g, s, x)?;
        let (coords, stop) = match &self.rnn {
            Some(rnn) => {
                let (xy, stop) = rnn.forward(g, s, x, steps)?;
                (xy, Some(stop))
            }
            None => {
                let h = self.coord_hidden.forward(g, s, x)?;
                let h = g.relu(h);
                let o = self.coord_out.forward(g, s, h)?;
                (g.sigmoid(o), None)
            }
        };
        Ok(ParallelOutput {
            logits,
            coords,
            stop,
            attention,
        })
    }

    pub fn predict<T: Scalar>(&self, g: &mut Graph<T>, s: &ParamStore<T>, c: &ModelConfig, memory: Var) -> Result<Vec<Prediction>> {
        let out = self.forward(g, s, c, memory)?;
        let b = g.shape(memory)[0];
        let n = c.n_queries;
        let logits: Vec<f64> = g.data(out.logits).iter().map(|v| v.as_f64()).collect();
        let coords: Vec<f64> = g.data(out.coords).iter().map(|v| v.as_f64()).collect();
        let stop: Option<Vec<f64>> = out.stop.map(|v| g.data(v).iter().map(|x| x.as_f64()).collect());
        let width = coords.len() / (b * n).max(1);
        let mut preds = Vec::with_capacity(b);
        for bi in 0..b {
            let mut queries = Vec::with_capacity(n);
            for qi in 0..n {
                let r = bi * n + qi;
                let (a, z) = (logits[2 * r], logits[2 * r + 1]);
                let p_obj = 1.0 / (1.0 + (z - a).exp());
                let row = &coords[r * width..(r + 1) * width];
                let emitted = match &stop {
                    Some(st) => {
                        let steps = width / 2;
                        let st = &st[r * steps..(r + 1) * steps];
                        // first step whose stop probability exceeds 1/2
                        let k = st.iter().position(|&l| l > 0.0).map_or(steps, |k| k + 1);
                        row[..2 * k].to_vec()
                    }
                    None => row.to_vec(),
                };
                queries.push(QueryOutput {
                    probs: [p_obj, 1.0 - p_obj],
                    coords: emitted.into_iter().map(|v| v.clamp(0.0, 1.0)).collect(),
                });
            }
            preds.push(Prediction::Parallel(queries));
        }
        Ok(preds)
    }
}

impl<T: Scalar> super::Model<T> {
    pub(crate) fn parallel_decoder(&self) -> Option<&ParallelDecoder> {
        match &self.head {
            super::Head::Parallel(p) => Some(p),
            _ => None,
        }
    }

    /// Parallel decoder outputs `(logits [B·N, 2], coords, stop)` for a
    /// memory batch, with `steps` recurrence steps for the polygon head.
    pub fn parallel_forward(&self, g: &mut Graph<T>, memory: Var, steps: Option<usize>) -> Result<(Var, Var, Option<Var>)> {
        let p = self.parallel_decoder().ok_or_else(|| super::ModelError::Config("model is not parallel".into()))?;
        let out = p.forward_steps(g, &self.store, &self.config, memory, steps.unwrap_or(self.config.max_vertices))?;
        Ok((out.logits, out.coords, out.stop))
    }

    /// Attention probability tensors of every decoder layer, in order.
    pub fn parallel_attention(&self, g: &mut Graph<T>, memory: Var) -> Result<Vec<Var>> {
        let p = self.parallel_decoder().ok_or_else(|| super::ModelError::Config("model is not parallel".into()))?;
        Ok(p.forward(g, &self.store, &self.config, memory)?.attention)
    }

    /// Id of the learned query matrix `[N, D]`.
    pub fn query_param(&self) -> Option<ParamId> {
        self.parallel_decoder().map(|p| p.queries)
    }
}
