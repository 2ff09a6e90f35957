//! Token sentences for the auto-regressive decoder.
//!
//! A scene is written as `S, <objects…>, E`. Gates emit one `G` token each;
//! points and line vertices emit one `P` token each; polygons emit their
//! vertices as `P` tokens in clockwise order followed by `EOP`. Batches are
//! padded with `E`.
//!
//! Token embeddings are fixed 256-vectors. Slots `[0, 2n)` hold the `n`
//! vertex coordinates (`n = 4` for the gate task, `1` otherwise), the next
//! `C` slots hold the one-hot class and everything else is zero. Class
//! indices are a stability contract for checkpoints:
//!
//! | index | class          |
//! |-------|----------------|
//! | 0     | `S`            |
//! | 1     | `E`            |
//! | 2     | `P` (or `G`)   |
//! | 3     | `EOP`          |
//!
//! `C` is 4 for the polygon task and 3 for every other task.

use std::cmp::Ordering;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::datagen::Labels;
use crate::geometry::{self, centroid, Point2, Polygon};
use crate::task::Task;

pub const EMBED_DIM: usize = 256;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CodecError {
    #[error("object {index} is not a canonical polygon (clockwise, (y, x)-minimal start)")]
    NonCanonical { index: usize },
    #[error("object {index} has {got} vertices, expected {expected}")]
    Arity {
        index: usize,
        got: usize,
        expected: usize,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum TokenClass {
    S,
    E,
    P,
    G,
    Eop,
}

impl TokenClass {
    /// Position of the class inside the one-hot block.
    pub fn index(&self) -> usize {
        match self {
            TokenClass::S => 0,
            TokenClass::E => 1,
            TokenClass::P | TokenClass::G => 2,
            TokenClass::Eop => 3,
        }
    }

    pub fn from_index(task: Task, index: usize) -> Option<Self> {
        match index {
            0 => Some(TokenClass::S),
            1 => Some(TokenClass::E),
            2 => Some(object_class(task)),
            3 if task == Task::Polygons => Some(TokenClass::Eop),
            _ => None,
        }
    }

    pub fn is_object(&self) -> bool {
        matches!(self, TokenClass::P | TokenClass::G)
    }
}

/// Size of the one-hot class block (the decoder vocabulary) for a task.
pub fn num_classes(task: Task) -> usize {
    if task == Task::Polygons {
        4
    } else {
        3
    }
}

pub fn object_class(task: Task) -> TokenClass {
    if task == Task::Gates {
        TokenClass::G
    } else {
        TokenClass::P
    }
}

/// Coordinate payload length of an object token.
pub fn payload_len(task: Task) -> usize {
    2 * task.vertices_per_token()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Token {
    pub class: TokenClass,
    pub coords: Vec<f64>,
}

impl Token {
    pub fn special(class: TokenClass) -> Self {
        Self {
            class,
            coords: Vec::new(),
        }
    }

    pub fn point(p: Point2) -> Self {
        Self {
            class: TokenClass::P,
            coords: vec![p.x, p.y],
        }
    }

    pub fn gate(vertices: &[Point2]) -> Self {
        Self {
            class: TokenClass::G,
            coords: vertices.iter().flat_map(|p| [p.x, p.y]).collect(),
        }
    }

    pub fn points(&self) -> Vec<Point2> {
        self.coords
            .chunks_exact(2)
            .map(|c| Point2::new(c[0], c[1]))
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct TokenSequence {
    pub tokens: Vec<Token>,
}

impl TokenSequence {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn classes(&self) -> Vec<TokenClass> {
        self.tokens.iter().map(|t| t.class).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OrderPolicy {
    /// Left to right by vertex centroid, ties top to bottom.
    #[default]
    Spatial,
    /// Small to large by polygon area.
    Size,
}

impl OrderPolicy {
    pub fn as_str(&self) -> &'static str {
        match self {
            OrderPolicy::Spatial => "spatial",
            OrderPolicy::Size => "size",
        }
    }
}

impl FromStr for OrderPolicy {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim() {
            "spatial" => Ok(OrderPolicy::Spatial),
            "size" => Ok(OrderPolicy::Size),
            other => Err(format!("unknown order policy {other:?} (expected spatial or size)")),
        }
    }
}

fn lex_vertices(a: &[Point2], b: &[Point2]) -> Ordering {
    for (p, q) in a.iter().zip(b) {
        let o = p.x.total_cmp(&q.x).then(p.y.total_cmp(&q.y));
        if o != Ordering::Equal {
            return o;
        }
    }
    a.len().cmp(&b.len())
}

fn area_of(obj: &[Point2]) -> f64 {
    if obj.len() < 3 {
        0.0
    } else {
        geometry::shoelace_signed(obj).map(f64::abs).unwrap_or(0.0)
    }
}

/// Orders objects by `policy`. The line task keeps its intrinsic order.
///
/// Remaining ties fall back to the full vertex list and then to the stroke
/// width, so the result does not depend on the input order.
pub fn sort_objects(labels: &Labels, policy: OrderPolicy) -> Labels {
    if labels.task == Task::Line {
        return labels.clone();
    }
    let mut idx: Vec<usize> = (0..labels.objects.len()).collect();
    let keys: Vec<(Point2, f64)> = labels
        .objects
        .iter()
        .map(|o| (centroid(o), area_of(o)))
        .collect();
    let width = |i: usize| labels.widths.get(i).copied().unwrap_or(0);
    idx.sort_by(|&i, &j| {
        let (ci, ai) = keys[i];
        let (cj, aj) = keys[j];
        let spatial = ci.x.total_cmp(&cj.x).then(ci.y.total_cmp(&cj.y));
        let primary = if labels.task == Task::Points {
            spatial
        } else {
            match policy {
                OrderPolicy::Spatial => spatial.then(ai.total_cmp(&aj)),
                OrderPolicy::Size => ai.total_cmp(&aj).then(spatial),
            }
        };
        primary
            .then_with(|| lex_vertices(&labels.objects[i], &labels.objects[j]))
            .then_with(|| width(i).cmp(&width(j)))
    });
    Labels {
        task: labels.task,
        objects: idx.iter().map(|&i| labels.objects[i].clone()).collect(),
        widths: if labels.widths.len() == labels.objects.len() {
            idx.iter().map(|&i| labels.widths[i]).collect()
        } else {
            labels.widths.clone()
        },
    }
}

/// Number of tokens `encode_scene` emits for these labels.
pub fn encoded_len(labels: &Labels) -> usize {
    let body: usize = match labels.task {
        Task::Points | Task::Gates => labels.objects.len(),
        Task::Line => labels.objects.iter().map(Vec::len).sum(),
        Task::Polygons => labels.objects.iter().map(|o| o.len() + 1).sum(),
    };
    body + 2
}

pub fn encode_scene(labels: &Labels, policy: OrderPolicy) -> Result<TokenSequence, CodecError> {
    let sorted = sort_objects(labels, policy);
    let mut tokens = vec![Token::special(TokenClass::S)];
    for (index, obj) in sorted.objects.iter().enumerate() {
        match sorted.task {
            Task::Points => {
                if obj.len() != 1 {
                    return Err(CodecError::Arity { index, got: obj.len(), expected: 1 });
                }
                tokens.push(Token::point(obj[0]));
            }
            Task::Line => tokens.extend(obj.iter().map(|&p| Token::point(p))),
            Task::Gates => {
                if obj.len() != 4 {
                    return Err(CodecError::Arity { index, got: obj.len(), expected: 4 });
                }
                check_canonical(obj, index)?;
                tokens.push(Token::gate(obj));
            }
            Task::Polygons => {
                check_canonical(obj, index)?;
                tokens.extend(obj.iter().map(|&p| Token::point(p)));
                tokens.push(Token::special(TokenClass::Eop));
            }
        }
    }
    tokens.push(Token::special(TokenClass::E));
    Ok(TokenSequence { tokens })
}

fn check_canonical(obj: &[Point2], index: usize) -> Result<(), CodecError> {
    let ok = Polygon::new(obj.to_vec())
        .map(|p| geometry::is_canonical(&p))
        .unwrap_or(false);
    if ok {
        Ok(())
    } else {
        Err(CodecError::NonCanonical { index })
    }
}

/// Problems found while salvaging a model-produced sentence.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct DecodeDiagnostics {
    /// Point runs dropped for being unterminated or shorter than 3.
    pub malformed_runs: usize,
    /// Tokens whose class does not belong to the task vocabulary.
    pub unexpected_tokens: usize,
    /// Sentence ended without an `E` token.
    pub missing_end: bool,
}

impl DecodeDiagnostics {
    pub fn is_clean(&self) -> bool {
        *self == Self::default()
    }

    pub fn merge(&mut self, other: &Self) {
        self.malformed_runs += other.malformed_runs;
        self.unexpected_tokens += other.unexpected_tokens;
        self.missing_end |= other.missing_end;
    }
}

/// Reads the objects between the leading `S` and the first `E`. Never fails:
/// incomplete polygon runs are dropped and counted.
pub fn decode_sequence(seq: &TokenSequence, task: Task) -> (Labels, DecodeDiagnostics) {
    let mut diag = DecodeDiagnostics::default();
    let mut labels = Labels::empty(task);
    let mut tokens = seq.tokens.iter().peekable();
    if tokens.peek().map(|t| t.class) == Some(TokenClass::S) {
        tokens.next();
    }
    let mut run: Vec<Point2> = Vec::new();
    let mut ended = false;
    let payload = payload_len(task);
    for tok in tokens {
        match (task, tok.class) {
            (_, TokenClass::E) => {
                ended = true;
                break;
            }
            (Task::Points, TokenClass::P) if tok.coords.len() == payload => {
                labels.objects.push(tok.points());
            }
            (Task::Line, TokenClass::P) if tok.coords.len() == payload => {
                run.extend(tok.points());
            }
            (Task::Gates, TokenClass::G) if tok.coords.len() == payload => {
                labels.objects.push(tok.points());
            }
            (Task::Polygons, TokenClass::P) if tok.coords.len() == payload => {
                run.extend(tok.points());
            }
            (Task::Polygons, TokenClass::Eop) => {
                if run.len() >= 3 {
                    labels.objects.push(std::mem::take(&mut run));
                } else {
                    run.clear();
                    diag.malformed_runs += 1;
                }
            }
            _ => diag.unexpected_tokens += 1,
        }
    }
    diag.missing_end = !ended;
    match task {
        Task::Line if !run.is_empty() => labels.objects.push(run),
        Task::Polygons if !run.is_empty() => diag.malformed_runs += 1,
        _ => {}
    }
    (labels, diag)
}

/// Fixed 256-dimensional embedding of a token.
pub fn embed_token(token: &Token, task: Task) -> Vec<f64> {
    let mut v = vec![0.0; EMBED_DIM];
    let coord_slots = payload_len(task);
    if token.class.is_object() {
        for (slot, &c) in v.iter_mut().zip(token.coords.iter().take(coord_slots)) {
            *slot = c;
        }
    }
    v[coord_slots + token.class.index()] = 1.0;
    v
}

#[derive(Debug, Clone, PartialEq)]
pub struct PaddedBatch {
    pub sequences: Vec<TokenSequence>,
    /// Unpadded length of each sequence.
    pub lengths: Vec<usize>,
}

impl PaddedBatch {
    pub fn max_len(&self) -> usize {
        self.sequences.first().map(TokenSequence::len).unwrap_or(0)
    }
}

/// Pads every sequence with `E` to the longest length in the batch.
pub fn pad_batch(seqs: &[TokenSequence]) -> PaddedBatch {
    let lengths: Vec<usize> = seqs.iter().map(TokenSequence::len).collect();
    let max_len = lengths.iter().copied().max().unwrap_or(0);
    let sequences = seqs
        .iter()
        .map(|s| {
            let mut s = s.clone();
            s.tokens
                .resize(max_len, Token::special(TokenClass::E));
            s
        })
        .collect();
    PaddedBatch { sequences, lengths }
}

/// `mask[i][j]` is true when position `i` may attend to position `j`.
pub fn causal_mask(len: usize) -> Vec<Vec<bool>> {
    (0..len)
        .map(|i| (0..len).map(|j| j <= i).collect())
        .collect()
}
