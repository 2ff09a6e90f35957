use super::{image_to_chw, DecodeMode, Model, ModelError, Result};
use crate::datagen::{Labels, Scene};
use crate::grad::{AdamW, AdamWConfig, Graph, Scalar, StepDecay, Var};
use crate::matching::{set_loss, set_loss_sequences, LossWeights};
use crate::seqcodec::{encode_scene, pad_batch, payload_len, OrderPolicy, TokenSequence};
use crate::task::Task;

/// A scene prepared for training: pixels, set targets and token sentence.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    /// `[3, H, W]` in `[0, 1]`.
    pub image: Vec<f64>,
    pub labels: Labels,
    /// One flat coordinate vector per set element. Line vertices are
    /// separate elements.
    pub targets: Vec<Vec<f64>>,
    pub sentence: TokenSequence,
}

impl Sample {
    pub fn new(scene: &Scene, order: OrderPolicy) -> Result<Self> {
        let labels = scene.labels.clone();
        let flat = |o: &Vec<crate::Point2>| o.iter().flat_map(|p| [p.x, p.y]).collect::<Vec<f64>>();
        let targets = match labels.task {
            Task::Line => labels.objects.iter().flatten().map(|p| vec![p.x, p.y]).collect(),
            _ => labels.objects.iter().map(flat).collect(),
        };
        let sentence = encode_scene(&labels, order)?;
        Ok(Self {
            image: image_to_chw(&scene.image),
            labels,
            targets,
            sentence,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub adam: AdamWConfig,
    pub schedule: StepDecay,
    pub loss: LossWeights,
    /// Class-loss weight of `E` padding positions in AR training.
    pub pad_weight: f64,
    /// Global gradient-norm bound; `0` disables clipping.
    pub grad_clip: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 8,
            adam: AdamWConfig::default(),
            schedule: StepDecay::default(),
            loss: LossWeights::default(),
            pad_weight: 0.1,
            grad_clip: 0.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepStats {
    pub step: u64,
    pub loss: f64,
    pub grad_norm: f64,
}

impl<T: Scalar> Model<T> {
    /// Mean per-scene training loss of a batch.
    pub fn batch_loss(&self, g: &mut Graph<T>, batch: &[&Sample], tc: &TrainConfig) -> Result<Var> {
        if batch.is_empty() {
            return Err(ModelError::Input("empty batch".into()));
        }
        let images: Vec<&[f64]> = batch.iter().map(|s| s.image.as_slice()).collect();
        let x = self.images(g, &images)?;
        let memory = self.encode(g, x)?;
        let total = match self.config.decode_mode {
            DecodeMode::Parallel => self.parallel_loss(g, memory, batch, tc)?,
            DecodeMode::Autoregressive => self.ar_loss(g, memory, batch, tc)?,
        };
        Ok(g.scale(total, 1.0 / batch.len() as f64))
    }

    fn parallel_loss(&self, g: &mut Graph<T>, memory: Var, batch: &[&Sample], tc: &TrainConfig) -> Result<Var> {
        let (logits, coords, stop) = self.parallel_forward(g, memory, None)?;
        let n = self.config.n_queries;
        let mut terms = Vec::with_capacity(batch.len());
        for (bi, sample) in batch.iter().enumerate() {
            let l = g.slice(logits, 0, bi * n, n)?;
            let c = g.slice(coords, 0, bi * n, n)?;
            let (loss, _) = match stop {
                Some(st) => {
                    let st = g.slice(st, 0, bi * n, n)?;
                    set_loss_sequences(g, l, c, st, &sample.targets, &tc.loss)?
                }
                None => set_loss(g, l, c, &sample.targets, &tc.loss)?,
            };
            terms.push(loss);
        }
        Ok(g.add_scalars(&terms)?)
    }

    fn ar_loss(&self, g: &mut Graph<T>, memory: Var, batch: &[&Sample], tc: &TrainConfig) -> Result<Var> {
        let sentences: Vec<TokenSequence> = batch.iter().map(|s| s.sentence.clone()).collect();
        let padded = pad_batch(&sentences);
        let t = padded.max_len();
        if t < 2 {
            return Err(ModelError::Input("sentences need at least S and E".into()));
        }
        let inputs: Vec<TokenSequence> = padded
            .sequences
            .iter()
            .map(|s| TokenSequence {
                tokens: s.tokens[..t - 1].to_vec(),
            })
            .collect();
        let (logits, coords) = self.ar_forward(g, memory, &inputs)?;
        let payload = payload_len(self.config.task);
        let rows = batch.len() * (t - 1);
        let mut cls = Vec::with_capacity(rows);
        let mut cls_w = Vec::with_capacity(rows);
        let mut tgt = vec![0.0; rows * payload];
        let mut tgt_w = vec![0.0; rows * payload];
        for (bi, seq) in padded.sequences.iter().enumerate() {
            for pos in 0..t - 1 {
                let tok = &seq.tokens[pos + 1];
                let r = bi * (t - 1) + pos;
                cls.push(tok.class.index());
                cls_w.push(if pos + 1 < padded.lengths[bi] { tc.loss.cls } else { tc.loss.cls * tc.pad_weight });
                if tok.class.is_object() {
                    tgt[r * payload..(r + 1) * payload].copy_from_slice(&tok.coords);
                    tgt_w[r * payload..(r + 1) * payload].fill(tc.loss.coord);
                }
            }
        }
        let ce = g.cross_entropy(logits, &cls, &cls_w)?;
        let l1 = g.l1_loss(coords, &tgt, &tgt_w)?;
        Ok(g.add(ce, l1)?)
    }
}

/// Model plus optimizer state.
#[derive(Debug, Clone)]
pub struct Trainer<T: Scalar> {
    pub model: Model<T>,
    pub opt: AdamW,
    pub config: TrainConfig,
}

impl<T: Scalar> Trainer<T> {
    pub fn new(model: Model<T>, config: TrainConfig) -> Self {
        let opt = AdamW::new(&model.store, config.adam, config.schedule);
        Self { model, opt, config }
    }

    pub fn step(&self) -> u64 {
        self.opt.step_count()
    }

    /// One forward/backward/AdamW update. A non-finite loss or gradient
    /// aborts before the parameters are touched.
    pub fn train_step(&mut self, batch: &[&Sample]) -> Result<StepStats> {
        let mut g = Graph::new();
        let loss = self.model.batch_loss(&mut g, batch, &self.config)?;
        let value = g.value(loss).item().as_f64();
        if !value.is_finite() {
            return Err(ModelError::NonFinite {
                step: self.step(),
                loss: value,
                detail: "loss is not finite".into(),
            });
        }
        g.backward(loss)?;
        let mut grads = g.gradients(&self.model.store);
        drop(g);
        if !grads.all_finite() {
            let bad: Vec<&str> = self
                .model
                .store
                .ids()
                .filter(|&id| grads.get(id).iter().any(|v| !v.is_finite()))
                .map(|id| self.model.store.name(id))
                .collect();
            return Err(ModelError::NonFinite {
                step: self.step(),
                loss: value,
                detail: format!("non-finite gradients in {}", bad.join(", ")),
            });
        }
        let grad_norm = if self.config.grad_clip > 0.0 {
            grads.clip_norm(self.config.grad_clip)
        } else {
            grads.global_norm()
        };
        self.opt.update(&mut self.model.store, &grads);
        Ok(StepStats {
            step: self.step(),
            loss: value,
            grad_norm,
        })
    }
}
