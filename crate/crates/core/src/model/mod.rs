//! CNN backbone + transformer encoder shared by two decoder families:
//! a parallel object-query decoder (FFN or recurrent polygon head) and an
//! auto-regressive token decoder.

mod autoregressive;
mod layers;
mod parallel;
mod train;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::grad::{Checkpoint, CheckpointError, GradError, Graph, ParamStore, Result as GradResult, Scalar, Tensor, Var};
use crate::matching::MatchingError;
use crate::seqcodec::{self, CodecError, TokenSequence};
use crate::task::Task;
use crate::{datagen, Point2};

pub use layers::{sine_1d, sine_2d};
pub use train::{Sample, StepStats, TrainConfig, Trainer};

use autoregressive::ArDecoder;
use layers::{Backbone, EncoderLayer};
use parallel::ParallelDecoder;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    Config(String),
    #[error("invalid input: {0}")]
    Input(String),
    #[error(transparent)]
    Grad(#[from] GradError),
    #[error(transparent)]
    Matching(#[from] MatchingError),
    #[error(transparent)]
    Codec(#[from] CodecError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error("non-finite loss {loss} at step {step}; {detail}")]
    NonFinite { step: u64, loss: f64, detail: String },
}

pub type Result<T> = std::result::Result<T, ModelError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DecodeMode {
    Parallel,
    Autoregressive,
}

impl DecodeMode {
    pub fn as_str(&self) -> &'static str {
        match self {
            DecodeMode::Parallel => "parallel",
            DecodeMode::Autoregressive => "autoregressive",
        }
    }
}

impl std::str::FromStr for DecodeMode {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "parallel" => Ok(DecodeMode::Parallel),
            "autoregressive" | "ar" => Ok(DecodeMode::Autoregressive),
            other => Err(format!("unknown decode mode {other:?} (expected parallel or autoregressive)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub task: Task,
    pub decode_mode: DecodeMode,
    pub image_h: usize,
    pub image_w: usize,
    /// Output channels of every backbone block but the last, which emits
    /// `d_model`.
    pub backbone_channels: Vec<usize>,
    pub d_model: usize,
    pub n_heads: usize,
    pub ffn_dim: usize,
    pub enc_layers: usize,
    pub dec_layers: usize,
    pub n_queries: usize,
    pub use_decoder_pos_enc: bool,
    pub rnn_head: bool,
    pub rnn_layers: usize,
    pub max_vertices: usize,
    /// Longest generated sentence, counting the leading `S`.
    pub max_seq_len: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            task: Task::Gates,
            decode_mode: DecodeMode::Parallel,
            image_h: 256,
            image_w: 256,
            backbone_channels: vec![16, 32, 64],
            d_model: 256,
            n_heads: 8,
            ffn_dim: 512,
            enc_layers: 6,
            dec_layers: 3,
            n_queries: 30,
            use_decoder_pos_enc: false,
            rnn_head: false,
            rnn_layers: 2,
            max_vertices: 16,
            max_seq_len: 34,
        }
    }
}

impl ModelConfig {
    /// Small configuration sized for CPU training on 64×64 images.
    pub fn desk(task: Task, decode_mode: DecodeMode) -> Self {
        Self {
            task,
            decode_mode,
            image_h: 64,
            image_w: 64,
            d_model: 64,
            n_heads: 4,
            ffn_dim: 128,
            enc_layers: 2,
            dec_layers: 2,
            n_queries: 12,
            rnn_head: task == Task::Polygons && decode_mode == DecodeMode::Parallel,
            max_seq_len: default_max_seq_len(task, 4, 7),
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let err = |m: String| Err(ModelError::Config(m));
        if self.d_model == 0 || self.n_heads == 0 || !self.d_model.is_multiple_of(self.n_heads) {
            return err(format!("d_model {} must be a positive multiple of n_heads {}", self.d_model, self.n_heads));
        }
        if !self.d_model.is_multiple_of(4) {
            return err(format!("d_model {} must be divisible by 4 for the 2-D positional encoding", self.d_model));
        }
        let stride = self.stride();
        if self.image_h == 0 || self.image_w == 0 || !self.image_h.is_multiple_of(stride) || !self.image_w.is_multiple_of(stride) {
            return err(format!("image {}×{} is not divisible by the backbone stride {stride}", self.image_h, self.image_w));
        }
        if self.ffn_dim == 0 {
            return err("ffn_dim must be positive".into());
        }
        match self.decode_mode {
            DecodeMode::Parallel => {
                if self.n_queries == 0 {
                    return err("n_queries must be positive".into());
                }
                if self.task == Task::Polygons && !self.rnn_head {
                    return err("parallel polygon models need rnn_head = true".into());
                }
                if self.rnn_head && (self.task != Task::Polygons || self.rnn_layers == 0 || self.max_vertices < 1) {
                    return err("rnn_head needs the polygon task, rnn_layers ≥ 1 and max_vertices ≥ 1".into());
                }
            }
            DecodeMode::Autoregressive => {
                if self.max_seq_len < 2 {
                    return err("max_seq_len must be at least 2".into());
                }
            }
        }
        Ok(())
    }

    pub fn stride(&self) -> usize {
        1 << (self.backbone_channels.len() + 1)
    }

    /// Encoder sequence length `(H/stride)·(W/stride)`.
    pub fn memory_len(&self) -> usize {
        (self.image_h / self.stride()) * (self.image_w / self.stride())
    }

    /// Coordinates regressed per query by the FFN head.
    pub fn coord_dim(&self) -> usize {
        seqcodec::payload_len(self.task)
    }
}

/// Sentence length bound for scenes with at most `n_max` objects of at
/// most `m_max` vertices.
pub fn default_max_seq_len(task: Task, n_max: usize, m_max: usize) -> usize {
    2 + match task {
        Task::Points | Task::Gates => n_max,
        Task::Line => datagen::LINE_POINTS,
        Task::Polygons => n_max * (m_max + 1),
    }
}

#[derive(Debug, Clone)]
enum Head {
    Parallel(ParallelDecoder),
    Autoregressive(ArDecoder),
}

/// Model parameters plus the layer layout that addresses them.
#[derive(Debug, Clone)]
pub struct Model<T: Scalar> {
    pub config: ModelConfig,
    pub store: ParamStore<T>,
    seed: u64,
    backbone: Backbone,
    encoder: Vec<EncoderLayer>,
    head: Head,
}

/// One object query's output.
#[derive(Debug, Clone, PartialEq)]
pub struct QueryOutput {
    /// `[p(object), p(no object)]`.
    pub probs: [f64; 2],
    /// FFN head: the regressed coordinates. Recurrent head: the emitted
    /// points up to and including the first confident stop.
    pub coords: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Prediction {
    Parallel(Vec<QueryOutput>),
    Autoregressive {
        /// Generated tokens, excluding the `S` prompt.
        tokens: TokenSequence,
        /// Probability of each generated token's class at its step.
        confidences: Vec<f64>,
    },
}

/// A predicted object with its confidence.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoredObject {
    pub points: Vec<Point2>,
    pub confidence: f64,
}

fn to_points(c: &[f64]) -> Vec<Point2> {
    c.chunks_exact(2).map(|p| Point2::new(p[0], p[1])).collect()
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len().max(1) as f64
}

impl Prediction {
    /// Objects for the evaluator.
    ///
    /// Parallel line predictions join the points of the queries classified
    /// as objects in query-index order, since the queries carry no order.
    pub fn objects(&self, task: Task) -> Vec<ScoredObject> {
        match self {
            Prediction::Parallel(queries) if task == Task::Line => {
                let kept: Vec<&QueryOutput> = queries.iter().filter(|q| q.probs[0] > 0.5).collect();
                if kept.is_empty() {
                    return Vec::new();
                }
                let points = kept.iter().flat_map(|q| to_points(&q.coords)).collect();
                let conf: Vec<f64> = kept.iter().map(|q| q.probs[0]).collect();
                vec![ScoredObject {
                    points,
                    confidence: mean(&conf),
                }]
            }
            Prediction::Parallel(queries) => queries
                .iter()
                .map(|q| ScoredObject {
                    points: to_points(&q.coords),
                    confidence: q.probs[0],
                })
                .collect(),
            Prediction::Autoregressive { tokens, confidences } => ar_objects(tokens, confidences, task),
        }
    }
}

/// Pairs the objects `seqcodec::decode_sequence` recovers with the mean
/// class probability of the tokens that produced them.
fn ar_objects(tokens: &TokenSequence, confidences: &[f64], task: Task) -> Vec<ScoredObject> {
    use seqcodec::TokenClass;
    let payload = seqcodec::payload_len(task);
    let mut out = Vec::new();
    let mut run: Vec<Point2> = Vec::new();
    let mut run_conf: Vec<f64> = Vec::new();
    let start = usize::from(tokens.tokens.first().map(|t| t.class) == Some(TokenClass::S));
    for (tok, &c) in tokens.tokens.iter().zip(confidences).skip(start) {
        let well_formed = tok.coords.len() == payload;
        match (task, tok.class) {
            (_, TokenClass::E) => break,
            (Task::Points, TokenClass::P) | (Task::Gates, TokenClass::G) if well_formed => out.push(ScoredObject {
                points: tok.points(),
                confidence: c,
            }),
            (Task::Line | Task::Polygons, TokenClass::P) if well_formed => {
                run.extend(tok.points());
                run_conf.push(c);
            }
            (Task::Polygons, TokenClass::Eop) => {
                if run.len() >= 3 {
                    out.push(ScoredObject {
                        points: std::mem::take(&mut run),
                        confidence: mean(&run_conf),
                    });
                }
                run.clear();
                run_conf.clear();
            }
            _ => {}
        }
    }
    if task == Task::Line && !run.is_empty() {
        out.push(ScoredObject {
            points: run,
            confidence: mean(&run_conf),
        });
    }
    out
}

/// Channel-major `[3, H, W]` pixels scaled to `[0, 1]`.
pub fn image_to_chw(img: &image::RgbImage) -> Vec<f64> {
    let (w, h) = img.dimensions();
    let plane = (w * h) as usize;
    let mut out = vec![0.0; 3 * plane];
    for (x, y, p) in img.enumerate_pixels() {
        let i = (y * w + x) as usize;
        for c in 0..3 {
            out[c * plane + i] = p.0[c] as f64 / 255.0;
        }
    }
    out
}

impl<T: Scalar> Model<T> {
    /// Builds a freshly initialized model. Parameters are drawn from one
    /// ChaCha stream seeded by `seed`, in a fixed registration order.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let mut channels = vec![3];
        channels.extend(&config.backbone_channels);
        channels.push(config.d_model);
        let backbone = Backbone::new(&mut store, &channels, &mut rng);
        let encoder = (0..config.enc_layers)
            .map(|i| EncoderLayer::new(&mut store, &format!("enc.{i}"), config.d_model, config.n_heads, config.ffn_dim, &mut rng))
            .collect();
        let head = match config.decode_mode {
            DecodeMode::Parallel => Head::Parallel(ParallelDecoder::new(&mut store, &config, &mut rng)),
            DecodeMode::Autoregressive => Head::Autoregressive(ArDecoder::new(&mut store, &config, &mut rng)),
        };
        Ok(Self {
            config,
            store,
            seed,
            backbone,
            encoder,
            head,
        })
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn num_parameters(&self) -> usize {
        self.store.num_scalars()
    }

    /// Converts the parameters to another precision.
    pub fn cast<U: Scalar>(&self) -> Model<U> {
        Model {
            config: self.config.clone(),
            store: self.store.cast(),
            seed: self.seed,
            backbone: self.backbone.clone(),
            encoder: self.encoder.clone(),
            head: self.head.clone(),
        }
    }

    /// Stacks `[3, H, W]` images into a `[B, 3, H, W]` constant.
    pub fn images(&self, g: &mut Graph<T>, images: &[&[f64]]) -> Result<Var> {
        let (h, w) = (self.config.image_h, self.config.image_w);
        let mut data = Vec::with_capacity(images.len() * 3 * h * w);
        for img in images {
            if img.len() != 3 * h * w {
                return Err(ModelError::Input(format!("image has {} values, model expects 3×{h}×{w}", img.len())));
            }
            data.extend(img.iter().map(|&v| T::of(v)));
        }
        Ok(g.constant(Tensor::new(vec![images.len(), 3, h, w], data)?))
    }

    /// Backbone features as encoder tokens `[B, L, D]` with the 2-D
    /// positional embedding added.
    pub fn features(&self, g: &mut Graph<T>, images: Var) -> GradResult<Var> {
        let s = g.shape(images).to_vec();
        let stride = self.backbone.stride();
        if s.len() != 4 || s[1] != 3 || !s[2].is_multiple_of(stride) || !s[3].is_multiple_of(stride) {
            return Err(GradError::Invalid {
                op: "backbone",
                msg: format!("input {s:?} is not [B, 3, H, W] with H, W divisible by {stride}"),
            });
        }
        let f = self.backbone.forward(g, &self.store, images)?;
        let (b, d, h, w) = (s[0], self.config.d_model, s[2] / stride, s[3] / stride);
        let f = g.reshape(f, &[b, d, h * w])?;
        let f = g.permute(f, &[0, 2, 1])?;
        let pe = g.constant(Tensor::from_f64(&[h * w, d], &sine_2d(h, w, d))?);
        g.add(f, pe)
    }

    /// Runs the encoder stack over `[B, L, D]` tokens.
    pub fn encode_tokens(&self, g: &mut Graph<T>, mut x: Var, probs: &mut Vec<Var>) -> GradResult<Var> {
        for layer in &self.encoder {
            x = layer.forward(g, &self.store, x, probs)?;
        }
        Ok(x)
    }

    /// Image batch → encoder memory `[B, L, D]`.
    pub fn encode(&self, g: &mut Graph<T>, images: Var) -> GradResult<Var> {
        let f = self.features(g, images)?;
        self.encode_tokens(g, f, &mut Vec::new())
    }

    pub fn predict(&self, images: &[&[f64]]) -> Result<Vec<Prediction>> {
        let mut g = Graph::inference();
        let x = self.images(&mut g, images)?;
        let memory = self.encode(&mut g, x)?;
        match &self.head {
            Head::Parallel(p) => p.predict(&mut g, &self.store, &self.config, memory),
            Head::Autoregressive(a) => {
                let out = a.greedy_decode(&mut g, &self.store, &self.config, memory)?;
                Ok(out
                    .into_iter()
                    .map(|(tokens, confidences)| Prediction::Autoregressive { tokens, confidences })
                    .collect())
            }
        }
    }

    /// Checkpoint of the parameters with the model config in the header.
    pub fn checkpoint(&self, step: u64, extra: serde_json::Value) -> Checkpoint {
        let config = serde_json::json!({ "model": self.config, "run": extra });
        Checkpoint::from_store(&self.store, self.seed, step, config)
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let config: ModelConfig = serde_json::from_value(ck.config["model"].clone())
            .map_err(|e| ModelError::Config(format!("checkpoint header: {e}")))?;
        let mut model = Self::new(config, ck.seed)?;
        ck.load_into(&mut model.store)?;
        Ok(model)
    }
}

#[cfg(test)]
mod tests;
