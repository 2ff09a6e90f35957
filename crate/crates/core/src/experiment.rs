//! Run configuration and the drivers behind the command-line tool: dataset
//! generation, training with checkpoint/resume, evaluation and the
//! order × positional-encoding ablation.
//!
//! All randomness derives from the config's seeds. Training is
//! single-threaded; generation and evaluation split work into contiguous
//! index ranges whose results are concatenated in index order, so outputs do
//! not depend on the worker count.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::datagen::{self, generate, DatagenError, GenConfig, Labels, Scene};
use crate::eval::{self, EvalReport};
use crate::grad::{load_checkpoint, save_checkpoint, AdamWConfig, CheckpointError, Precision, Scalar, StepDecay};
use crate::matching::LossWeights;
use crate::model::{default_max_seq_len, DecodeMode, Model, ModelConfig, ModelError, Prediction, Sample, ScoredObject, TrainConfig, Trainer};
use crate::seqcodec::{self, OrderPolicy};
use crate::task::Task;

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error("config line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("invalid config: {0}")]
    Config(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Datagen(#[from] DatagenError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error("{path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
}

pub type Result<T> = std::result::Result<T, ExperimentError>;

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> ExperimentError + '_ {
    move |source| ExperimentError::Io {
        path: path.to_path_buf(),
        source,
    }
}

pub(crate) fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(io_err(path))
}

pub(crate) fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(io_err(path))
}

/// Which scenes an evaluation runs on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EvalSplit {
    /// The first `eval_scenes` training scenes.
    Train,
    /// A separate stream seeded by `eval_seed`.
    Test,
}

impl EvalSplit {
    pub fn as_str(&self) -> &'static str {
        match self {
            EvalSplit::Train => "train",
            EvalSplit::Test => "test",
        }
    }
}

impl std::str::FromStr for EvalSplit {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "train" => Ok(EvalSplit::Train),
            "test" => Ok(EvalSplit::Test),
            other => Err(format!("unknown eval split {other:?} (expected train or test)")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Profile {
    /// 64×64 images, d_model 64, 2+2 layers, 20k steps.
    Desk,
    /// 256×256 images, d_model 256, 6+3 layers, optimizer defaults of the
    /// reference setup.
    Full,
}

impl std::str::FromStr for Profile {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "desk" => Ok(Profile::Desk),
            "full" => Ok(Profile::Full),
            other => Err(format!("unknown profile {other:?} (expected desk or full)")),
        }
    }
}

/// Every knob of a run. Serialized as `key = value` lines; see
/// [`ExperimentConfig::parse`].
#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub task: Task,
    pub decode_mode: DecodeMode,

    pub image_w: usize,
    pub image_h: usize,
    pub n_min: usize,
    pub n_max: usize,
    pub m_min: usize,
    pub m_max: usize,
    pub thickness_choices: [u32; 3],
    pub point_size_choices: [u32; 3],
    pub data_seed: u64,
    /// Size of the fixed training set; `0` draws a fresh scene for every
    /// sample.
    pub train_scenes: u64,

    pub backbone_channels: Vec<usize>,
    pub d_model: usize,
    pub n_heads: usize,
    pub ffn_dim: usize,
    pub enc_layers: usize,
    pub dec_layers: usize,
    pub n_queries: usize,
    pub use_decoder_pos_enc: bool,
    pub rnn_layers: usize,
    pub max_vertices: usize,
    /// `0` sizes it for twice `n_max` objects.
    pub max_seq_len: usize,

    pub seed: u64,
    pub precision: Precision,
    pub steps: u64,
    pub batch_size: usize,
    pub lr_backbone: f64,
    pub lr_transformer: f64,
    pub weight_decay: f64,
    /// Multiply both learning rates by `lr_decay_factor` every this many
    /// steps; `0` keeps them constant.
    pub lr_decay_every: u64,
    pub lr_decay_factor: f64,
    pub grad_clip: f64,
    pub order: OrderPolicy,
    pub loss_cls: f64,
    pub loss_coord: f64,
    pub loss_no_object: f64,
    pub loss_stop: f64,
    pub pad_weight: f64,
    pub log_every: u64,
    pub checkpoint_every: u64,

    pub eval_split: EvalSplit,
    pub eval_scenes: u64,
    pub eval_seed: u64,
    pub eval_batch: usize,
    /// Overrides the task's standard threshold sweep.
    pub thresholds: Option<Vec<f64>>,
    /// Scales `n_max` of the test-split generator.
    pub cardinality_multiplier: usize,
    /// Seeds per ablation cell.
    pub ablation_seeds: usize,
}

impl ExperimentConfig {
    pub fn profile(profile: Profile, task: Task, decode_mode: DecodeMode) -> Self {
        let gen = GenConfig::default();
        let desk = Self {
            task,
            decode_mode,
            image_w: 64,
            image_h: 64,
            n_min: gen.n_min,
            n_max: gen.n_max,
            m_min: gen.m_min,
            m_max: gen.m_max,
            thickness_choices: gen.thickness_choices,
            point_size_choices: gen.point_size_choices,
            data_seed: 0,
            train_scenes: 64,
            backbone_channels: vec![16, 32, 64],
            d_model: 64,
            n_heads: 4,
            ffn_dim: 128,
            enc_layers: 2,
            dec_layers: 2,
            n_queries: 12,
            use_decoder_pos_enc: false,
            rnn_layers: 2,
            max_vertices: 16,
            max_seq_len: 0,
            seed: 0,
            precision: Precision::F32,
            steps: 20_000,
            batch_size: 8,
            lr_backbone: 1e-3,
            lr_transformer: 1e-3,
            weight_decay: 1e-4,
            lr_decay_every: 15_000,
            lr_decay_factor: 0.1,
            grad_clip: 0.0,
            order: OrderPolicy::Spatial,
            loss_cls: 1.0,
            loss_coord: 5.0,
            loss_no_object: 1.0,
            loss_stop: 1.0,
            pad_weight: 0.1,
            log_every: 100,
            checkpoint_every: 5_000,
            eval_split: EvalSplit::Train,
            eval_scenes: 64,
            eval_seed: 1_000_003,
            eval_batch: 16,
            thresholds: None,
            cardinality_multiplier: 1,
            ablation_seeds: 3,
        };
        match profile {
            Profile::Desk => desk,
            Profile::Full => {
                let opt = AdamWConfig::default();
                Self {
                    image_w: 256,
                    image_h: 256,
                    train_scenes: 0,
                    d_model: 256,
                    n_heads: 8,
                    ffn_dim: 512,
                    enc_layers: 6,
                    dec_layers: 3,
                    n_queries: 30,
                    steps: 200_000,
                    lr_backbone: opt.lr_backbone,
                    lr_transformer: opt.lr_transformer,
                    weight_decay: opt.weight_decay,
                    lr_decay_every: 150_000,
                    eval_split: EvalSplit::Test,
                    eval_scenes: 1_000,
                    checkpoint_every: 10_000,
                    ..desk
                }
            }
        }
    }

    /// Parses `key = value` lines. `#` starts a comment; blank lines are
    /// ignored. `profile` (desk or full, default desk), `task` and
    /// `decode_mode` select the base configuration regardless of where they
    /// appear; every other key then overrides one field. Unknown and
    /// repeated keys are errors.
    pub fn parse(text: &str) -> Result<Self> {
        let mut pairs: Vec<(usize, String, String)> = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| ExperimentError::Parse {
                line: i + 1,
                msg: format!("expected `key = value`, got {line:?}"),
            })?;
            let (k, v) = (k.trim().to_string(), v.trim().to_string());
            if pairs.iter().any(|(_, p, _)| *p == k) {
                return Err(ExperimentError::Parse {
                    line: i + 1,
                    msg: format!("duplicate key {k:?}"),
                });
            }
            pairs.push((i + 1, k, v));
        }
        let lookup = |key: &str| pairs.iter().find(|(_, k, _)| k == key);
        let base = |key: &str, default: &str| -> Result<String> { Ok(lookup(key).map_or(default.to_string(), |(_, _, v)| v.clone())) };
        let bad = |key: &str, msg: String| ExperimentError::Parse {
            line: lookup(key).map_or(0, |p| p.0),
            msg,
        };
        let profile: Profile = base("profile", "desk")?.parse().map_err(|m| bad("profile", m))?;
        let task: Task = base("task", "gates")?.parse().map_err(|e: crate::ParseTaskError| bad("task", e.to_string()))?;
        let mode: DecodeMode = base("decode_mode", "parallel")?.parse().map_err(|m| bad("decode_mode", m))?;
        let mut cfg = Self::profile(profile, task, mode);
        for (line, k, v) in &pairs {
            if matches!(k.as_str(), "profile" | "task" | "decode_mode") {
                continue;
            }
            cfg.set(k, v).map_err(|msg| ExperimentError::Parse { line: *line, msg })?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        Self::parse(&read_text(path)?)
    }

    /// Sets one field from its textual form.
    pub fn set(&mut self, key: &str, value: &str) -> std::result::Result<(), String> {
        fn num<T: std::str::FromStr>(key: &str, v: &str) -> std::result::Result<T, String> {
            v.parse().map_err(|_| format!("{key}: cannot parse {v:?}"))
        }
        fn flag(key: &str, v: &str) -> std::result::Result<bool, String> {
            match v {
                "true" | "on" | "1" => Ok(true),
                "false" | "off" | "0" => Ok(false),
                _ => Err(format!("{key}: expected true or false, got {v:?}")),
            }
        }
        fn list<T: std::str::FromStr>(key: &str, v: &str) -> std::result::Result<Vec<T>, String> {
            v.split(',').map(|x| num(key, x.trim())).collect()
        }
        fn triple(key: &str, v: &str) -> std::result::Result<[u32; 3], String> {
            list::<u32>(key, v)?
                .try_into()
                .map_err(|_| format!("{key}: expected three comma-separated values"))
        }
        match key {
            "task" => self.task = v_task(value)?,
            "decode_mode" => self.decode_mode = value.parse()?,
            "image_w" => self.image_w = num(key, value)?,
            "image_h" => self.image_h = num(key, value)?,
            "n_min" => self.n_min = num(key, value)?,
            "n_max" => self.n_max = num(key, value)?,
            "m_min" => self.m_min = num(key, value)?,
            "m_max" => self.m_max = num(key, value)?,
            "thickness_choices" => self.thickness_choices = triple(key, value)?,
            "point_size_choices" => self.point_size_choices = triple(key, value)?,
            "data_seed" => self.data_seed = num(key, value)?,
            "train_scenes" => self.train_scenes = num(key, value)?,
            "backbone_channels" => self.backbone_channels = list(key, value)?,
            "d_model" => self.d_model = num(key, value)?,
            "n_heads" => self.n_heads = num(key, value)?,
            "ffn_dim" => self.ffn_dim = num(key, value)?,
            "enc_layers" => self.enc_layers = num(key, value)?,
            "dec_layers" => self.dec_layers = num(key, value)?,
            "n_queries" => self.n_queries = num(key, value)?,
            "use_decoder_pos_enc" => self.use_decoder_pos_enc = flag(key, value)?,
            "rnn_layers" => self.rnn_layers = num(key, value)?,
            "max_vertices" => self.max_vertices = num(key, value)?,
            "max_seq_len" => self.max_seq_len = num(key, value)?,
            "seed" => self.seed = num(key, value)?,
            "precision" => {
                self.precision = match value {
                    "f32" => Precision::F32,
                    "f64" => Precision::F64,
                    _ => return Err(format!("precision: expected f32 or f64, got {value:?}")),
                }
            }
            "steps" => self.steps = num(key, value)?,
            "batch_size" => self.batch_size = num(key, value)?,
            "lr_backbone" => self.lr_backbone = num(key, value)?,
            "lr_transformer" => self.lr_transformer = num(key, value)?,
            "weight_decay" => self.weight_decay = num(key, value)?,
            "lr_decay_every" => self.lr_decay_every = num(key, value)?,
            "lr_decay_factor" => self.lr_decay_factor = num(key, value)?,
            "grad_clip" => self.grad_clip = num(key, value)?,
            "order" => self.order = value.parse()?,
            "loss_cls" => self.loss_cls = num(key, value)?,
            "loss_coord" => self.loss_coord = num(key, value)?,
            "loss_no_object" => self.loss_no_object = num(key, value)?,
            "loss_stop" => self.loss_stop = num(key, value)?,
            "pad_weight" => self.pad_weight = num(key, value)?,
            "log_every" => self.log_every = num(key, value)?,
            "checkpoint_every" => self.checkpoint_every = num(key, value)?,
            "eval_split" => self.eval_split = value.parse()?,
            "eval_scenes" => self.eval_scenes = num(key, value)?,
            "eval_seed" => self.eval_seed = num(key, value)?,
            "eval_batch" => self.eval_batch = num(key, value)?,
            "thresholds" => {
                self.thresholds = match value {
                    "default" => None,
                    _ => Some(list(key, value)?),
                }
            }
            "cardinality_multiplier" => self.cardinality_multiplier = num(key, value)?,
            "ablation_seeds" => self.ablation_seeds = num(key, value)?,
            _ => return Err(format!("unknown key {key:?}")),
        }
        Ok(())
    }

    /// Fully resolved `key = value` text; [`Self::parse`] inverts it.
    pub fn to_text(&self) -> String {
        fn join<T: ToString>(v: &[T]) -> String {
            v.iter().map(T::to_string).collect::<Vec<_>>().join(",")
        }
        let precision = match self.precision {
            Precision::F32 => "f32",
            Precision::F64 => "f64",
        };
        let rows: Vec<(&str, String)> = vec![
            ("task", self.task.to_string()),
            ("decode_mode", self.decode_mode.as_str().into()),
            ("image_w", self.image_w.to_string()),
            ("image_h", self.image_h.to_string()),
            ("n_min", self.n_min.to_string()),
            ("n_max", self.n_max.to_string()),
            ("m_min", self.m_min.to_string()),
            ("m_max", self.m_max.to_string()),
            ("thickness_choices", join(&self.thickness_choices)),
            ("point_size_choices", join(&self.point_size_choices)),
            ("data_seed", self.data_seed.to_string()),
            ("train_scenes", self.train_scenes.to_string()),
            ("backbone_channels", join(&self.backbone_channels)),
            ("d_model", self.d_model.to_string()),
            ("n_heads", self.n_heads.to_string()),
            ("ffn_dim", self.ffn_dim.to_string()),
            ("enc_layers", self.enc_layers.to_string()),
            ("dec_layers", self.dec_layers.to_string()),
            ("n_queries", self.n_queries.to_string()),
            ("use_decoder_pos_enc", self.use_decoder_pos_enc.to_string()),
            ("rnn_layers", self.rnn_layers.to_string()),
            ("max_vertices", self.max_vertices.to_string()),
            ("max_seq_len", self.max_seq_len.to_string()),
            ("seed", self.seed.to_string()),
            ("precision", precision.into()),
            ("steps", self.steps.to_string()),
            ("batch_size", self.batch_size.to_string()),
            ("lr_backbone", self.lr_backbone.to_string()),
            ("lr_transformer", self.lr_transformer.to_string()),
            ("weight_decay", self.weight_decay.to_string()),
            ("lr_decay_every", self.lr_decay_every.to_string()),
            ("lr_decay_factor", self.lr_decay_factor.to_string()),
            ("grad_clip", self.grad_clip.to_string()),
            ("order", self.order.as_str().into()),
            ("loss_cls", self.loss_cls.to_string()),
            ("loss_coord", self.loss_coord.to_string()),
            ("loss_no_object", self.loss_no_object.to_string()),
            ("loss_stop", self.loss_stop.to_string()),
            ("pad_weight", self.pad_weight.to_string()),
            ("log_every", self.log_every.to_string()),
            ("checkpoint_every", self.checkpoint_every.to_string()),
            ("eval_split", self.eval_split.as_str().into()),
            ("eval_scenes", self.eval_scenes.to_string()),
            ("eval_seed", self.eval_seed.to_string()),
            ("eval_batch", self.eval_batch.to_string()),
            ("thresholds", self.thresholds.as_deref().map_or("default".into(), join)),
            ("cardinality_multiplier", self.cardinality_multiplier.to_string()),
            ("ablation_seeds", self.ablation_seeds.to_string()),
        ];
        let mut s = String::from("# resolved polyseq run configuration\n");
        for (k, v) in rows {
            let _ = writeln!(s, "{k} = {v}");
        }
        s
    }

    pub fn validate(&self) -> Result<()> {
        let err = |m: &str| Err(ExperimentError::Config(m.into()));
        self.train_gen().validate()?;
        self.model_config().validate()?;
        if self.steps == 0 || self.batch_size == 0 || self.eval_batch == 0 {
            return err("steps, batch_size and eval_batch must be positive");
        }
        if self.log_every == 0 {
            return err("log_every must be positive");
        }
        if self.checkpoint_every != 0 && !self.checkpoint_every.is_multiple_of(self.log_every) {
            return err("checkpoint_every must be a multiple of log_every");
        }
        if self.cardinality_multiplier == 0 {
            return err("cardinality_multiplier must be at least 1");
        }
        if self.cardinality_multiplier != 1 && self.eval_split == EvalSplit::Train {
            return err("cardinality_multiplier only applies to eval_split = test");
        }
        if self.eval_split == EvalSplit::Train && self.train_scenes == 0 {
            return err("eval_split = train needs a fixed training set (train_scenes > 0)");
        }
        if let Some(t) = &self.thresholds {
            if t.is_empty() || t.iter().any(|v| !v.is_finite()) {
                return err("thresholds must be a non-empty list of finite numbers");
            }
        }
        if self.ablation_seeds == 0 {
            return err("ablation_seeds must be positive");
        }
        Ok(())
    }

    pub fn train_gen(&self) -> GenConfig {
        GenConfig {
            task: self.task,
            image_w: self.image_w as u32,
            image_h: self.image_h as u32,
            n_min: self.n_min,
            n_max: self.n_max,
            m_min: self.m_min,
            m_max: self.m_max,
            seed: self.data_seed,
            thickness_choices: self.thickness_choices,
            point_size_choices: self.point_size_choices,
        }
    }

    /// Generator of the held-out stream, with `n_max` scaled by the
    /// cardinality multiplier.
    pub fn test_gen(&self) -> GenConfig {
        GenConfig {
            seed: self.eval_seed,
            n_max: self.n_max * self.cardinality_multiplier,
            ..self.train_gen()
        }
    }

    pub fn model_config(&self) -> ModelConfig {
        let max_seq_len = match self.max_seq_len {
            0 => default_max_seq_len(self.task, 2 * self.n_max, self.m_max),
            n => n,
        };
        ModelConfig {
            task: self.task,
            decode_mode: self.decode_mode,
            image_h: self.image_h,
            image_w: self.image_w,
            backbone_channels: self.backbone_channels.clone(),
            d_model: self.d_model,
            n_heads: self.n_heads,
            ffn_dim: self.ffn_dim,
            enc_layers: self.enc_layers,
            dec_layers: self.dec_layers,
            n_queries: self.n_queries,
            use_decoder_pos_enc: self.use_decoder_pos_enc,
            rnn_head: self.task == Task::Polygons && self.decode_mode == DecodeMode::Parallel,
            rnn_layers: self.rnn_layers,
            max_vertices: self.max_vertices,
            max_seq_len,
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            batch_size: self.batch_size,
            adam: AdamWConfig {
                lr_backbone: self.lr_backbone,
                lr_transformer: self.lr_transformer,
                weight_decay: self.weight_decay,
                ..AdamWConfig::default()
            },
            schedule: StepDecay {
                every: self.lr_decay_every,
                factor: self.lr_decay_factor,
            },
            loss: LossWeights {
                cls: self.loss_cls,
                coord: self.loss_coord,
                no_object: self.loss_no_object,
                stop: self.loss_stop,
            },
            pad_weight: self.pad_weight,
            grad_clip: self.grad_clip,
        }
    }

    pub fn thresholds(&self) -> Vec<f64> {
        self.thresholds
            .clone()
            .unwrap_or_else(|| eval::MatchRule::for_task(self.task).thresholds().to_vec())
    }
}

fn v_task(s: &str) -> std::result::Result<Task, String> {
    s.parse().map_err(|e: crate::ParseTaskError| e.to_string())
}

/// Runs `f` over `0..n` on up to `workers` threads, each taking one
/// contiguous range, and returns the results in index order.
pub fn parallel_map<R: Send>(n: usize, workers: usize, f: impl Fn(std::ops::Range<usize>) -> Vec<R> + Sync) -> Vec<R> {
    let workers = workers.clamp(1, n.max(1));
    if workers == 1 {
        return f(0..n);
    }
    let chunk = n.div_ceil(workers);
    std::thread::scope(|s| {
        let handles: Vec<_> = (0..workers)
            .map(|w| {
                let f = &f;
                let range = (w * chunk).min(n)..((w + 1) * chunk).min(n);
                s.spawn(move || f(range))
            })
            .collect();
        handles
            .into_iter()
            .flat_map(|h| h.join().expect("worker thread panicked"))
            .collect()
    })
}

fn try_parallel_map<R: Send, E: Send>(
    n: usize,
    workers: usize,
    f: impl Fn(usize) -> std::result::Result<R, E> + Sync,
) -> std::result::Result<Vec<R>, E> {
    parallel_map(n, workers, |r| r.map(&f).collect::<Vec<_>>()).into_iter().collect()
}

/// Writes scenes `0..count` of the training generator plus `manifest.json`.
pub fn generate_dataset(cfg: &ExperimentConfig, count: u64, dir: &Path, workers: usize) -> Result<()> {
    let gen = cfg.train_gen();
    gen.validate()?;
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    try_parallel_map(count as usize, workers, |i| {
        let scene = generate(&gen, i as u64)?;
        datagen::write_scene(dir, i as u64, &scene)
    })?;
    datagen::write_manifest(dir, &gen, count)?;
    Ok(())
}

pub fn training_scenes(cfg: &ExperimentConfig, workers: usize) -> Result<Vec<Scene>> {
    let gen = cfg.train_gen();
    Ok(try_parallel_map(cfg.train_scenes as usize, workers, |i| generate(&gen, i as u64))?)
}

/// The scenes an evaluation of `cfg` runs on.
pub fn evaluation_scenes(cfg: &ExperimentConfig, workers: usize) -> Result<Vec<Scene>> {
    let (gen, count) = match cfg.eval_split {
        EvalSplit::Train => (cfg.train_gen(), cfg.eval_scenes.min(cfg.train_scenes)),
        EvalSplit::Test => (cfg.test_gen(), cfg.eval_scenes),
    };
    Ok(try_parallel_map(count as usize, workers, |i| generate(&gen, i as u64))?)
}

/// Seeded, epoch-wise shuffled sample order over a fixed training set, or
/// consecutive fresh scenes when the set is unbounded.
#[derive(Debug, Clone)]
pub struct BatchSchedule {
    seed: u64,
    n: u64,
    batch: usize,
    epoch: Option<(u64, Vec<u64>)>,
}

impl BatchSchedule {
    pub fn new(seed: u64, train_scenes: u64, batch: usize) -> Self {
        Self {
            seed,
            n: train_scenes,
            batch,
            epoch: None,
        }
    }

    /// Scene indices of the batch consumed by training step `step`.
    pub fn batch(&mut self, step: u64) -> Vec<u64> {
        let start = step * self.batch as u64;
        (start..start + self.batch as u64).map(|p| self.at(p)).collect()
    }

    fn at(&mut self, position: u64) -> u64 {
        if self.n == 0 {
            return position;
        }
        let epoch = position / self.n;
        if self.epoch.as_ref().map(|e| e.0) != Some(epoch) {
            let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ 0x5eed_0000_0000_0000);
            rng.set_stream(epoch);
            let mut perm: Vec<u64> = (0..self.n).collect();
            perm.shuffle(&mut rng);
            self.epoch = Some((epoch, perm));
        }
        self.epoch.as_ref().expect("epoch permutation set").1[(position % self.n) as usize]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossRow {
    pub step: u64,
    pub loss: f64,
    pub grad_norm: f64,
    pub lr_transformer: f64,
}

const LOSS_HEADER: &str = "step,loss,grad_norm,lr_transformer";

fn loss_line(r: &LossRow) -> String {
    format!("{},{:.9e},{:.9e},{:e}", r.step, r.loss, r.grad_norm, r.lr_transformer)
}

pub fn read_loss_csv(path: &Path) -> Result<Vec<LossRow>> {
    let text = read_text(path)?;
    let bad = |line: usize| ExperimentError::Parse {
        line,
        msg: format!("{}: malformed loss row", path.display()),
    };
    text.lines()
        .enumerate()
        .skip(1)
        .filter(|(_, l)| !l.is_empty())
        .map(|(i, l)| {
            let f: Vec<&str> = l.split(',').collect();
            if f.len() != 4 {
                return Err(bad(i + 1));
            }
            Ok(LossRow {
                step: f[0].parse().map_err(|_| bad(i + 1))?,
                loss: f[1].parse().map_err(|_| bad(i + 1))?,
                grad_norm: f[2].parse().map_err(|_| bad(i + 1))?,
                lr_transformer: f[3].parse().map_err(|_| bad(i + 1))?,
            })
        })
        .collect()
}

fn write_loss_csv(path: &Path, rows: &[LossRow]) -> Result<()> {
    let mut s = String::from(LOSS_HEADER);
    s.push('\n');
    for r in rows {
        s.push_str(&loss_line(r));
        s.push('\n');
    }
    write_text(path, &s)
}

pub const CHECKPOINT_FILE: &str = "checkpoint.bin";
pub const LOSS_FILE: &str = "loss.csv";
pub const CONFIG_FILE: &str = "config.txt";

#[derive(Debug, Clone, PartialEq)]
pub struct TrainSummary {
    pub steps: u64,
    pub resumed_from: Option<u64>,
    pub final_loss: f64,
    pub checkpoint: PathBuf,
    pub history: Vec<LossRow>,
    pub wall_secs: f64,
}

/// Trains per `cfg` into `out`: `config.txt`, `loss.csv` (one row per
/// logged step) and `checkpoint.bin` (parameters plus optimizer state,
/// rewritten every `checkpoint_every` steps and at the end).
///
/// With `resume`, training continues from that checkpoint's step counter;
/// rows of an existing `loss.csv` in `out` past that step are discarded, so
/// an interrupted and resumed run writes the same files as an
/// uninterrupted one.
pub fn train(cfg: &ExperimentConfig, out: &Path, resume: Option<&Path>, progress: &mut dyn FnMut(&LossRow)) -> Result<TrainSummary> {
    cfg.validate()?;
    match cfg.precision {
        Precision::F32 => train_impl::<f32>(cfg, out, resume, progress),
        Precision::F64 => train_impl::<f64>(cfg, out, resume, progress),
    }
}

fn run_header(cfg: &ExperimentConfig) -> serde_json::Value {
    serde_json::json!({ "config": cfg.to_text() })
}

fn train_impl<T: Scalar>(cfg: &ExperimentConfig, out: &Path, resume: Option<&Path>, progress: &mut dyn FnMut(&LossRow)) -> Result<TrainSummary> {
    let started = Instant::now();
    fs::create_dir_all(out).map_err(io_err(out))?;
    write_text(&out.join(CONFIG_FILE), &cfg.to_text())?;
    let tc = cfg.train_config();
    let (mut trainer, mut history, resumed_from) = match resume {
        None => (Trainer::new(Model::<T>::new(cfg.model_config(), cfg.seed)?, tc), Vec::new(), None),
        Some(path) => {
            let ck = load_checkpoint(path)?;
            let model = Model::<T>::from_checkpoint(&ck)?;
            if model.config != cfg.model_config() {
                return Err(ExperimentError::Config(format!("{}: model config differs from the run config", path.display())));
            }
            let mut trainer = Trainer::new(model, tc);
            if !ck.has_optimizer() {
                return Err(ExperimentError::Config(format!("{}: checkpoint has no optimizer state", path.display())));
            }
            ck.restore_optimizer(&mut trainer.opt, &trainer.model.store)?;
            let loss_path = out.join(LOSS_FILE);
            let history = if loss_path.exists() {
                read_loss_csv(&loss_path)?.into_iter().filter(|r| r.step <= ck.step).collect()
            } else {
                Vec::new()
            };
            (trainer, history, Some(ck.step))
        }
    };
    let fixed: Vec<Sample> = training_scenes(cfg, 1)?
        .iter()
        .map(|s| Sample::new(s, cfg.order))
        .collect::<std::result::Result<_, _>>()?;
    let stream = cfg.train_gen();
    let mut schedule = BatchSchedule::new(cfg.seed, cfg.train_scenes, cfg.batch_size);
    let ck_path = out.join(CHECKPOINT_FILE);
    let save = |trainer: &Trainer<T>| -> Result<()> {
        let ck = trainer.model.checkpoint(trainer.step(), run_header(cfg)).with_optimizer(&trainer.opt, &trainer.model.store);
        Ok(save_checkpoint(&ck_path, &ck)?)
    };
    let mut last_loss = f64::NAN;
    while trainer.step() < cfg.steps {
        let idx = schedule.batch(trainer.step());
        let fresh: Vec<Sample>;
        let batch: Vec<&Sample> = if fixed.is_empty() {
            fresh = idx
                .iter()
                .map(|&i| Ok(Sample::new(&generate(&stream, i)?, cfg.order)?))
                .collect::<Result<_>>()?;
            fresh.iter().collect()
        } else {
            idx.iter().map(|&i| &fixed[i as usize]).collect()
        };
        let lr = trainer.opt.current_lr(crate::grad::ParamGroup::Transformer);
        let stats = trainer.train_step(&batch)?;
        last_loss = stats.loss;
        let step = stats.step;
        if step % cfg.log_every == 0 || step == cfg.steps {
            let row = LossRow {
                step,
                loss: stats.loss,
                grad_norm: stats.grad_norm,
                lr_transformer: lr,
            };
            progress(&row);
            history.push(row);
        }
        if (cfg.checkpoint_every != 0 && step % cfg.checkpoint_every == 0) || step == cfg.steps {
            write_loss_csv(&out.join(LOSS_FILE), &history)?;
            save(&trainer)?;
        }
    }
    if resumed_from == Some(cfg.steps) {
        write_loss_csv(&out.join(LOSS_FILE), &history)?;
        save(&trainer)?;
    }
    Ok(TrainSummary {
        steps: trainer.step(),
        resumed_from,
        final_loss: last_loss,
        checkpoint: ck_path,
        history,
        wall_secs: started.elapsed().as_secs_f64(),
    })
}

/// Predictions of `model` on `scenes`, batched and split across workers.
pub fn predict_scenes<T: Scalar>(model: &Model<T>, scenes: &[Scene], batch: usize, workers: usize) -> Result<Vec<Prediction>> {
    let images: Vec<Vec<f64>> = scenes.iter().map(|s| crate::model::image_to_chw(&s.image)).collect();
    let chunks = images.len().div_ceil(batch.max(1));
    let per_chunk = try_parallel_map(chunks, workers, |c| {
        let lo = c * batch;
        let hi = (lo + batch).min(images.len());
        let refs: Vec<&[f64]> = images[lo..hi].iter().map(Vec::as_slice).collect();
        model.predict(&refs)
    })?;
    Ok(per_chunk.into_iter().flatten().collect())
}

/// Scores predictions against labels and counts AR outputs that needed
/// salvaging.
pub fn score_predictions(task: Task, preds: &[Prediction], labels: &[Labels], thresholds: &[f64]) -> EvalReport {
    let objects: Vec<Vec<ScoredObject>> = preds.iter().map(|p| p.objects(task)).collect();
    let mut report = eval::evaluate_task(task, &objects, labels, Some(thresholds));
    report.diagnostics.malformed_outputs = preds
        .iter()
        .filter(|p| match p {
            Prediction::Autoregressive { tokens, .. } => !seqcodec::decode_sequence(tokens, task).1.is_clean(),
            Prediction::Parallel(_) => false,
        })
        .count();
    report
}

/// Ground truth replayed as detections with confidence 1.
pub fn oracle_report(task: Task, labels: &[Labels], thresholds: &[f64]) -> EvalReport {
    let objects: Vec<Vec<ScoredObject>> = labels
        .iter()
        .map(|l| {
            l.objects
                .iter()
                .map(|o| ScoredObject {
                    points: o.clone(),
                    confidence: 1.0,
                })
                .collect()
        })
        .collect();
    eval::evaluate_task(task, &objects, labels, Some(thresholds))
}

/// Either a trained model or the ground-truth oracle.
pub enum Evaluated<'a> {
    Checkpoint(&'a Path),
    Oracle,
}

/// Evaluates on the scenes selected by `cfg` and writes `curves.csv`,
/// `summary.json` and `curves.svg` into `out`.
pub fn evaluate(cfg: &ExperimentConfig, what: Evaluated<'_>, out: &Path, workers: usize) -> Result<EvalReport> {
    cfg.validate()?;
    let scenes = evaluation_scenes(cfg, workers)?;
    let labels: Vec<Labels> = scenes.iter().map(|s| s.labels.clone()).collect();
    let th = cfg.thresholds();
    let report = match what {
        Evaluated::Oracle => oracle_report(cfg.task, &labels, &th),
        Evaluated::Checkpoint(path) => {
            let ck = load_checkpoint(path)?;
            let preds = match ck.precision {
                Precision::F32 => predict_scenes(&Model::<f32>::from_checkpoint(&ck)?, &scenes, cfg.eval_batch, workers)?,
                Precision::F64 => predict_scenes(&Model::<f64>::from_checkpoint(&ck)?, &scenes, cfg.eval_batch, workers)?,
            };
            score_predictions(cfg.task, &preds, &labels, &th)
        }
    };
    eval::emit_curves(&report, out).map_err(io_err(out))?;
    Ok(report)
}

/// One trained-and-evaluated ablation cell.
#[derive(Debug, Clone, PartialEq)]
pub struct AblationRow {
    pub order: OrderPolicy,
    pub pos_enc: bool,
    pub seed: u64,
    pub map: f64,
    pub delta: f64,
}

/// `(order, positional encoding)` cells; the first is the baseline.
pub const ABLATION_GRID: [(OrderPolicy, bool); 4] = [
    (OrderPolicy::Spatial, false),
    (OrderPolicy::Spatial, true),
    (OrderPolicy::Size, false),
    (OrderPolicy::Size, true),
];

/// Seed rows then one aggregate row per cell: mean mAP, mean and sample
/// standard deviation of the per-seed deltas against the baseline cell.
pub fn ablation_csv(rows: &[AblationRow]) -> String {
    let mut s = String::from("order,pos_enc,seed,map,delta,delta_std\n");
    for r in rows {
        let _ = writeln!(s, "{},{},{},{:.6},{:.6},", r.order.as_str(), r.pos_enc, r.seed, r.map, r.delta);
    }
    for (order, pe) in ABLATION_GRID {
        let cell: Vec<&AblationRow> = rows.iter().filter(|r| r.order == order && r.pos_enc == pe).collect();
        if cell.is_empty() {
            continue;
        }
        let n = cell.len() as f64;
        let map = cell.iter().map(|r| r.map).sum::<f64>() / n;
        let delta = cell.iter().map(|r| r.delta).sum::<f64>() / n;
        let std = if cell.len() > 1 {
            (cell.iter().map(|r| (r.delta - delta).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
        } else {
            0.0
        };
        let _ = writeln!(s, "{},{},mean,{:.6},{:.6},{:.6}", order.as_str(), pe, map, delta, std);
    }
    s
}

/// Trains and evaluates every grid cell for `ablation_seeds` seeds under
/// `out/runs/`, then writes `out/ablation.csv`.
pub fn ablate(cfg: &ExperimentConfig, out: &Path, workers: usize, progress: &mut dyn FnMut(&str)) -> Result<Vec<AblationRow>> {
    cfg.validate()?;
    if cfg.decode_mode != DecodeMode::Autoregressive {
        return Err(ExperimentError::Config("the ablation grid needs decode_mode = autoregressive".into()));
    }
    let mut rows = Vec::new();
    for k in 0..cfg.ablation_seeds as u64 {
        let seed = cfg.seed + k;
        let mut baseline = f64::NAN;
        for (order, pe) in ABLATION_GRID {
            let run = ExperimentConfig {
                seed,
                order,
                use_decoder_pos_enc: pe,
                ..cfg.clone()
            };
            let dir = out.join("runs").join(format!("{}-pe{}-seed{seed}", order.as_str(), u8::from(pe)));
            progress(&format!("training {}", dir.display()));
            let summary = train(&run, &dir, None, &mut |_| {})?;
            let report = evaluate(&run, Evaluated::Checkpoint(&summary.checkpoint), &dir.join("eval"), workers)?;
            if (order, pe) == ABLATION_GRID[0] {
                baseline = report.map;
            }
            rows.push(AblationRow {
                order,
                pos_enc: pe,
                seed,
                map: report.map,
                delta: report.map - baseline,
            });
        }
    }
    fs::create_dir_all(out).map_err(io_err(out))?;
    write_text(&out.join("ablation.csv"), &ablation_csv(&rows))?;
    Ok(rows)
}

/// Everything needed to re-run a command: its name, flags, resolved config
/// and the code version that produced it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    /// Command-line flags other than `--config` and `--out`.
    pub args: BTreeMap<String, String>,
    pub config: String,
    pub code_hash: String,
    pub seed: u64,
    pub wall_clock_secs: f64,
    pub metric_history: Vec<LossRow>,
    /// Summary of the final evaluation, relative to the output directory.
    pub report: Option<String>,
    /// SHA-256 of every file written, keyed by path relative to the output
    /// directory.
    pub outputs: BTreeMap<String, String>,
}

pub const MANIFEST_FILE: &str = "run_manifest.json";

impl RunManifest {
    pub fn write(&self, dir: &Path) -> Result<()> {
        let path = dir.join(MANIFEST_FILE);
        let text = serde_json::to_string_pretty(self).map_err(|source| ExperimentError::Json { path: path.clone(), source })?;
        write_text(&path, &(text + "\n"))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = read_text(path)?;
        serde_json::from_str(&text).map_err(|source| ExperimentError::Json {
            path: path.to_path_buf(),
            source,
        })
    }

    pub fn experiment_config(&self) -> Result<ExperimentConfig> {
        ExperimentConfig::parse(&self.config)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn resolved_text_round_trips() {
        for task in Task::ALL {
            for mode in [DecodeMode::Parallel, DecodeMode::Autoregressive] {
                for profile in [Profile::Desk, Profile::Full] {
                    let cfg = ExperimentConfig::profile(profile, task, mode);
                    assert_eq!(ExperimentConfig::parse(&cfg.to_text()).unwrap(), cfg);
                }
            }
        }
        let mut cfg = ExperimentConfig::profile(Profile::Desk, Task::Line, DecodeMode::Autoregressive);
        cfg.thresholds = Some(vec![0.05, 0.1]);
        cfg.lr_transformer = 3.3e-4;
        cfg.backbone_channels = vec![8, 8, 16];
        assert_eq!(ExperimentConfig::parse(&cfg.to_text()).unwrap(), cfg);
    }

    #[test]
    fn parse_rules() {
        let cfg = ExperimentConfig::parse("# comment\ntask = points # trailing\n\nsteps=10\n").unwrap();
        assert_eq!((cfg.task, cfg.steps), (Task::Points, 10));
        let full = ExperimentConfig::parse("steps = 5\nprofile = full").unwrap();
        assert_eq!((full.d_model, full.steps), (256, 5));
        for bad in ["bogus = 1", "steps = 1\nsteps = 2", "steps", "task = hexagons", "steps = -3", "use_decoder_pos_enc = maybe"] {
            assert!(ExperimentConfig::parse(bad).is_err(), "{bad}");
        }
        let err = ExperimentConfig::parse("steps = 1\nwhatever = 2").unwrap_err().to_string();
        assert!(err.contains("line 2") && err.contains("whatever"), "{err}");
        assert!(ExperimentConfig::parse("eval_split = train\ncardinality_multiplier = 2").is_err());
        assert!(ExperimentConfig::parse("eval_split = test\ncardinality_multiplier = 2").is_ok());
    }

    #[test]
    fn multiplier_scales_test_generator() {
        let cfg = ExperimentConfig::parse("eval_split = test\ncardinality_multiplier = 2\nn_max = 3").unwrap();
        assert_eq!(cfg.test_gen().n_max, 6);
        assert_eq!(cfg.train_gen().n_max, 3);
        assert_ne!(cfg.test_gen().seed, cfg.train_gen().seed);
    }

    #[test]
    fn batch_schedule_covers_each_epoch() {
        let mut s = BatchSchedule::new(4, 10, 5);
        let mut first: Vec<u64> = (0..2).flat_map(|k| s.batch(k)).collect();
        first.sort_unstable();
        assert_eq!(first, (0..10).collect::<Vec<_>>());
        let again: Vec<u64> = BatchSchedule::new(4, 10, 5).batch(3);
        assert_eq!(s.batch(3), again);
        assert_eq!(BatchSchedule::new(4, 0, 3).batch(2), vec![6, 7, 8]);
    }

    #[test]
    fn parallel_map_preserves_order() {
        for workers in [1, 2, 3, 8] {
            let v = parallel_map(7, workers, |r| r.map(|i| i * i).collect());
            assert_eq!(v, vec![0, 1, 4, 9, 16, 25, 36]);
        }
        assert!(parallel_map(0, 4, |r| r.collect::<Vec<_>>()).is_empty());
    }

    #[test]
    fn ablation_aggregates() {
        let rows = vec![
            AblationRow { order: OrderPolicy::Spatial, pos_enc: false, seed: 0, map: 0.5, delta: 0.0 },
            AblationRow { order: OrderPolicy::Size, pos_enc: true, seed: 0, map: 0.6, delta: 0.1 },
            AblationRow { order: OrderPolicy::Spatial, pos_enc: false, seed: 1, map: 0.4, delta: 0.0 },
            AblationRow { order: OrderPolicy::Size, pos_enc: true, seed: 1, map: 0.7, delta: 0.3 },
        ];
        let csv = ablation_csv(&rows);
        assert!(csv.contains("spatial,false,mean,0.450000,0.000000,0.000000"), "{csv}");
        assert!(csv.contains("size,true,mean,0.650000,0.200000,0.141421"), "{csv}");
        assert_eq!(csv.lines().count(), 1 + 4 + 2);
    }

    #[test]
    fn tiny_train_resume_and_eval() {
        let text = "task = points\nimage_w = 32\nimage_h = 32\nbackbone_channels = 4,8,8\nd_model = 16\nn_heads = 2\nffn_dim = 16\n\
                    enc_layers = 1\ndec_layers = 1\nn_queries = 4\nn_max = 2\ntrain_scenes = 8\nsteps = 6\nbatch_size = 2\n\
                    log_every = 2\ncheckpoint_every = 4\neval_scenes = 8\n";
        let cfg = ExperimentConfig::parse(text).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let full = train(&cfg, &dir.path().join("full"), None, &mut |_| {}).unwrap();
        assert_eq!(full.steps, 6);
        assert_eq!(full.history.iter().map(|r| r.step).collect::<Vec<_>>(), vec![2, 4, 6]);

        let short = ExperimentConfig { steps: 4, ..cfg.clone() };
        let part = dir.path().join("part");
        train(&short, &part, None, &mut |_| {}).unwrap();
        let resumed = train(&cfg, &part, Some(&part.join(CHECKPOINT_FILE)), &mut |_| {}).unwrap();
        assert_eq!(resumed.resumed_from, Some(4));
        let read = |d: &Path, f: &str| fs::read(d.join(f)).unwrap();
        assert_eq!(read(&part, LOSS_FILE), read(&dir.path().join("full"), LOSS_FILE));
        assert_eq!(read(&part, CHECKPOINT_FILE), read(&dir.path().join("full"), CHECKPOINT_FILE));

        let r1 = evaluate(&cfg, Evaluated::Checkpoint(&full.checkpoint), &dir.path().join("e1"), 1).unwrap();
        let r3 = evaluate(&cfg, Evaluated::Checkpoint(&full.checkpoint), &dir.path().join("e3"), 3).unwrap();
        assert_eq!(r1, r3);
        assert!((0.0..=1.0).contains(&r1.map));
        assert_eq!(read(&dir.path().join("e1"), "curves.csv"), read(&dir.path().join("e3"), "curves.csv"));
        let oracle = evaluate(&cfg, Evaluated::Oracle, &dir.path().join("o"), 2).unwrap();
        assert_eq!(oracle.map, 1.0);
    }
}
