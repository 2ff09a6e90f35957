use super::params::{Gradients, ParamId, ParamStore};
use super::{gemm, GradError, Result, Scalar, Tensor};

/// Handle to a node of a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(&self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvSpec {
    pub stride: usize,
    pub padding: usize,
}

#[derive(Debug, Clone, Copy)]
struct ConvGeom {
    batch: usize,
    cin: usize,
    h: usize,
    w: usize,
    cout: usize,
    k: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
}

impl ConvGeom {
    fn patch(&self) -> usize {
        self.cin * self.k * self.k
    }
    fn spatial(&self) -> usize {
        self.ho * self.wo
    }
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    MatMul {
        a: Var,
        b: Var,
        batch: usize,
        m: usize,
        k: usize,
        n: usize,
        ta: bool,
        tb: bool,
    },
    Add { a: Var, b: Var },
    Sub { a: Var, b: Var },
    Mul { a: Var, b: Var },
    Scale { a: Var, c: T },
    AddScalar { a: Var },
    Relu { a: Var },
    Sigmoid { a: Var },
    Tanh { a: Var },
    Softmax { a: Var },
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        inv_std: Vec<T>,
    },
    Conv2d {
        x: Var,
        w: Var,
        b: Var,
        geom: ConvGeom,
        cols: Vec<T>,
    },
    MaxPool { x: Var, argmax: Vec<usize> },
    Concat {
        parts: Vec<Var>,
        axis_lens: Vec<usize>,
        outer: usize,
        inner: usize,
    },
    Slice {
        a: Var,
        outer: usize,
        inner: usize,
        axis_len: usize,
        start: usize,
        len: usize,
    },
    Permute { a: Var, perm: Vec<usize> },
    Reshape { a: Var },
    CrossEntropy {
        logits: Var,
        probs: Vec<T>,
        targets: Vec<usize>,
        weights: Vec<T>,
    },
    L1 {
        pred: Var,
        target: Vec<T>,
        weights: Vec<T>,
    },
    Bce {
        logits: Var,
        targets: Vec<T>,
        weights: Vec<T>,
    },
    Sum { a: Var },
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    grad: Option<Vec<T>>,
    op: Op<T>,
    requires_grad: bool,
}

/// Operation tape. Nodes are stored in creation order, which is a valid
/// topological order for the reverse sweep.
///
/// Gradients are accumulated by exactly one call to [`Graph::backward`]; a
/// second call returns [`GradError::AlreadyBackpropagated`].
#[derive(Debug)]
pub struct Graph<T: Scalar> {
    nodes: Vec<Node<T>>,
    param_vars: Vec<Option<Var>>,
    track_params: bool,
    backpropagated: bool,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn shape_err(op: &'static str, lhs: &[usize], rhs: &[usize]) -> GradError {
    GradError::Shape {
        op,
        lhs: lhs.to_vec(),
        rhs: rhs.to_vec(),
    }
}

fn last_dim(shape: &[usize]) -> usize {
    shape.last().copied().unwrap_or(1)
}

impl<T: Scalar> Graph<T> {
    /// Graph whose bound parameters require gradients.
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            param_vars: Vec::new(),
            track_params: true,
            backpropagated: false,
        }
    }

    /// Forward-only graph: nothing requires gradients and no backward
    /// buffers are kept.
    pub fn inference() -> Self {
        Self {
            track_params: false,
            ..Self::new()
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn needs_grad(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, parents: &[Var]) -> Var {
        let requires_grad = self.needs_grad(parents);
        let op = if requires_grad { op } else { Op::Leaf };
        self.nodes.push(Node {
            value,
            grad: None,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            grad: None,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    /// Binds a parameter. Repeated binds of the same id return the same node.
    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Var {
        if self.param_vars.len() < store.len() {
            self.param_vars.resize(store.len(), None);
        }
        if let Some(v) = self.param_vars[id.0] {
            return v;
        }
        let v = self.leaf(store.get(id).clone(), self.track_params);
        self.param_vars[id.0] = Some(v);
        v
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn data(&self, v: Var) -> &[T] {
        self.nodes[v.0].value.data()
    }

    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.nodes[v.0].grad.as_deref()
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_t(a, b, false, false)
    }

    /// Matrix product of 2-D operands or batched product of 3-D operands.
    /// `ta`/`tb` use the transpose of the stored matrices.
    pub fn matmul_t(&mut self, a: Var, b: Var, ta: bool, tb: bool) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        let r = sa.len();
        if r != sb.len() || !(r == 2 || r == 3) || (r == 3 && sa[0] != sb[0]) {
            return Err(shape_err("matmul", &sa, &sb));
        }
        let batch = if r == 3 { sa[0] } else { 1 };
        let (m, ka) = if ta { (sa[r - 1], sa[r - 2]) } else { (sa[r - 2], sa[r - 1]) };
        let (kb, n) = if tb { (sb[r - 1], sb[r - 2]) } else { (sb[r - 2], sb[r - 1]) };
        if ka != kb {
            return Err(shape_err("matmul", &sa, &sb));
        }
        let k = ka;
        let mut out = vec![T::zero(); batch * m * n];
        {
            let ad = self.data(a);
            let bd = self.data(b);
            for bi in 0..batch {
                gemm(
                    m,
                    k,
                    n,
                    &ad[bi * m * k..(bi + 1) * m * k],
                    ta,
                    &bd[bi * k * n..(bi + 1) * k * n],
                    tb,
                    &mut out[bi * m * n..(bi + 1) * m * n],
                    false,
                );
            }
        }
        let shape = if r == 3 { vec![batch, m, n] } else { vec![m, n] };
        let value = Tensor::new(shape, out)?;
        Ok(self.push(
            value,
            Op::MatMul {
                a,
                b,
                batch,
                m,
                k,
                n,
                ta,
                tb,
            },
            &[a, b],
        ))
    }

    /// `a + b`, where `b`'s shape must equal a suffix of `a`'s shape and is
    /// broadcast over the leading dimensions.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let sa = self.shape(a);
        let sb = self.shape(b);
        if sb.len() > sa.len() || sa[sa.len() - sb.len()..] != *sb {
            return Err(shape_err("add", sa, sb));
        }
        let bl = self.value(b).numel();
        let bd = self.data(b);
        let out: Vec<T> = self
            .data(a)
            .iter()
            .enumerate()
            .map(|(i, &x)| x + bd[i % bl])
            .collect();
        let value = Tensor::new(self.shape(a).to_vec(), out)?;
        Ok(self.push(value, Op::Add { a, b }, &[a, b]))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(shape_err(op, self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let out = self
            .data(a)
            .iter()
            .zip(self.data(b))
            .map(|(&x, &y)| x - y)
            .collect();
        let value = Tensor::new(self.shape(a).to_vec(), out)?;
        Ok(self.push(value, Op::Sub { a, b }, &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let out = self
            .data(a)
            .iter()
            .zip(self.data(b))
            .map(|(&x, &y)| x * y)
            .collect();
        let value = Tensor::new(self.shape(a).to_vec(), out)?;
        Ok(self.push(value, Op::Mul { a, b }, &[a, b]))
    }

    fn map_unary(&self, a: Var, f: impl Fn(T) -> T) -> Tensor<T> {
        let v = self.value(a);
        Tensor {
            shape: v.shape.clone(),
            data: v.data.iter().map(|&x| f(x)).collect(),
        }
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let c = T::of(c);
        let value = self.map_unary(a, |x| x * c);
        self.push(value, Op::Scale { a, c }, &[a])
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let c = T::of(c);
        let value = self.map_unary(a, |x| x + c);
        self.push(value, Op::AddScalar { a }, &[a])
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let value = self.map_unary(a, |x| if x > T::zero() { x } else { T::zero() });
        self.push(value, Op::Relu { a }, &[a])
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let value = self.map_unary(a, |x| T::one() / (T::one() + (-x).exp()));
        self.push(value, Op::Sigmoid { a }, &[a])
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let value = self.map_unary(a, |x| x.tanh());
        self.push(value, Op::Tanh { a }, &[a])
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let d = last_dim(&v.shape);
        let mut out = v.data.clone();
        for row in out.chunks_mut(d.max(1)) {
            softmax_in_place(row);
        }
        let value = Tensor {
            shape: v.shape.clone(),
            data: out,
        };
        self.push(value, Op::Softmax { a }, &[a])
    }

    /// Normalizes the last axis, then applies the per-feature gain and bias.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        let d = last_dim(&sx);
        if self.shape(gamma) != [d] || self.shape(beta) != [d] {
            return Err(shape_err("layer_norm", &sx, self.shape(gamma)));
        }
        let eps = T::of(1e-5);
        let df = T::of(d as f64);
        let xd = self.data(x);
        let (g, b) = (self.data(gamma), self.data(beta));
        let rows = xd.len() / d;
        let mut out = vec![T::zero(); xd.len()];
        let mut xhat = vec![T::zero(); xd.len()];
        let mut inv_std = vec![T::zero(); rows];
        for r in 0..rows {
            let row = &xd[r * d..(r + 1) * d];
            let mean = row.iter().fold(T::zero(), |s, &v| s + v) / df;
            let var = row
                .iter()
                .fold(T::zero(), |s, &v| s + (v - mean) * (v - mean))
                / df;
            let inv = T::one() / (var + eps).sqrt();
            inv_std[r] = inv;
            for j in 0..d {
                let h = (row[j] - mean) * inv;
                xhat[r * d + j] = h;
                out[r * d + j] = h * g[j] + b[j];
            }
        }
        let value = Tensor::new(sx, out)?;
        let keep = self.needs_grad(&[x, gamma, beta]);
        let op = Op::LayerNorm {
            x,
            gamma,
            beta,
            xhat: if keep { xhat } else { Vec::new() },
            inv_std,
        };
        Ok(self.push(value, op, &[x, gamma, beta]))
    }

    /// 2-D convolution of `x: [B, C, H, W]` with `w: [O, C, k, k]` and bias `b: [O]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, spec: ConvSpec) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        let sw = self.shape(w).to_vec();
        if sx.len() != 4 || sw.len() != 4 || sw[1] != sx[1] || sw[2] != sw[3] || spec.stride == 0 {
            return Err(shape_err("conv2d", &sx, &sw));
        }
        if self.shape(b) != [sw[0]] {
            return Err(shape_err("conv2d", &sw, self.shape(b)));
        }
        let (k, s, p) = (sw[2], spec.stride, spec.padding);
        if sx[2] + 2 * p < k || sx[3] + 2 * p < k {
            return Err(shape_err("conv2d", &sx, &sw));
        }
        let geom = ConvGeom {
            batch: sx[0],
            cin: sx[1],
            h: sx[2],
            w: sx[3],
            cout: sw[0],
            k,
            stride: s,
            pad: p,
            ho: (sx[2] + 2 * p - k) / s + 1,
            wo: (sx[3] + 2 * p - k) / s + 1,
        };
        let (patch, spatial) = (geom.patch(), geom.spatial());
        let in_len = geom.cin * geom.h * geom.w;
        let out_len = geom.cout * spatial;
        let keep = self.needs_grad(&[x, w, b]);
        let mut cols_all = if keep {
            vec![T::zero(); geom.batch * patch * spatial]
        } else {
            Vec::new()
        };
        let mut scratch = vec![T::zero(); patch * spatial];
        let mut out = vec![T::zero(); geom.batch * out_len];
        let (xd, wd, bd) = (self.data(x), self.data(w), self.data(b));
        for bi in 0..geom.batch {
            let cols = if keep {
                &mut cols_all[bi * patch * spatial..(bi + 1) * patch * spatial]
            } else {
                &mut scratch[..]
            };
            im2col(&xd[bi * in_len..(bi + 1) * in_len], &geom, cols);
            let o = &mut out[bi * out_len..(bi + 1) * out_len];
            for (c, row) in o.chunks_mut(spatial).enumerate() {
                row.iter_mut().for_each(|v| *v = bd[c]);
            }
            gemm(geom.cout, patch, spatial, wd, false, cols, false, o, true);
        }
        let value = Tensor::new(vec![geom.batch, geom.cout, geom.ho, geom.wo], out)?;
        Ok(self.push(
            value,
            Op::Conv2d {
                x,
                w,
                b,
                geom,
                cols: cols_all,
            },
            &[x, w, b],
        ))
    }

    /// Non-overlapping `k × k` max pooling of `[B, C, H, W]`.
    pub fn max_pool2d(&mut self, x: Var, k: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 4 || k == 0 || s[2] < k || s[3] < k {
            return Err(shape_err("max_pool2d", &s, &[k, k]));
        }
        let (ho, wo) = (s[2] / k, s[3] / k);
        let planes = s[0] * s[1];
        let xd = self.data(x);
        let mut out = Vec::with_capacity(planes * ho * wo);
        let mut argmax = Vec::with_capacity(planes * ho * wo);
        for pl in 0..planes {
            let base = pl * s[2] * s[3];
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut best = base + oy * k * s[3] + ox * k;
                    for dy in 0..k {
                        for dx in 0..k {
                            let idx = base + (oy * k + dy) * s[3] + ox * k + dx;
                            if xd[idx] > xd[best] {
                                best = idx;
                            }
                        }
                    }
                    out.push(xd[best]);
                    argmax.push(best);
                }
            }
        }
        let value = Tensor::new(vec![s[0], s[1], ho, wo], out)?;
        Ok(self.push(value, Op::MaxPool { x, argmax }, &[x]))
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = self
            .shape(*parts.first().ok_or(GradError::Invalid {
                op: "concat",
                msg: "no inputs".into(),
            })?)
            .to_vec();
        if axis >= first.len() {
            return Err(shape_err("concat", &first, &[axis]));
        }
        let mut axis_lens = Vec::with_capacity(parts.len());
        for &p in parts {
            let s = self.shape(p);
            if s.len() != first.len()
                || s[..axis] != first[..axis]
                || s[axis + 1..] != first[axis + 1..]
            {
                return Err(shape_err("concat", &first, s));
            }
            axis_lens.push(s[axis]);
        }
        let outer: usize = first[..axis].iter().product();
        let inner: usize = first[axis + 1..].iter().product();
        let total: usize = axis_lens.iter().sum();
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for (&p, &len) in parts.iter().zip(&axis_lens) {
                let d = self.data(p);
                out.extend_from_slice(&d[o * len * inner..(o + 1) * len * inner]);
            }
        }
        let mut shape = first;
        shape[axis] = total;
        let value = Tensor::new(shape, out)?;
        Ok(self.push(
            value,
            Op::Concat {
                parts: parts.to_vec(),
                axis_lens,
                outer,
                inner,
            },
            parts,
        ))
    }

    pub fn slice(&mut self, a: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let s = self.shape(a).to_vec();
        if axis >= s.len() || start + len > s[axis] {
            return Err(shape_err("slice", &s, &[axis, start, len]));
        }
        let outer: usize = s[..axis].iter().product();
        let inner: usize = s[axis + 1..].iter().product();
        let axis_len = s[axis];
        let d = self.data(a);
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * axis_len + start) * inner;
            out.extend_from_slice(&d[base..base + len * inner]);
        }
        let mut shape = s;
        shape[axis] = len;
        let value = Tensor::new(shape, out)?;
        Ok(self.push(
            value,
            Op::Slice {
                a,
                outer,
                inner,
                axis_len,
                start,
                len,
            },
            &[a],
        ))
    }

    /// Reorders axes: output axis `i` is input axis `perm[i]`.
    pub fn permute(&mut self, a: Var, perm: &[usize]) -> Result<Var> {
        let s = self.shape(a).to_vec();
        let mut seen = vec![false; s.len()];
        if perm.len() != s.len() || perm.iter().any(|&p| p >= s.len() || std::mem::replace(&mut seen[p], true)) {
            return Err(shape_err("permute", &s, perm));
        }
        let out_shape: Vec<usize> = perm.iter().map(|&p| s[p]).collect();
        let src = permute_indices(&s, perm);
        let d = self.data(a);
        let out = src.iter().map(|&i| d[i]).collect();
        let value = Tensor::new(out_shape, out)?;
        Ok(self.push(
            value,
            Op::Permute {
                a,
                perm: perm.to_vec(),
            },
            &[a],
        ))
    }

    /// Swaps the two axes of a matrix.
    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        self.permute(a, &[1, 0])
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let v = self.value(a);
        if shape.iter().product::<usize>() != v.numel() {
            return Err(shape_err("reshape", &v.shape, shape));
        }
        let value = Tensor {
            shape: shape.to_vec(),
            data: v.data.clone(),
        };
        Ok(self.push(value, Op::Reshape { a }, &[a]))
    }

    /// `Σ_r w_r · −log softmax(logits_r)[target_r]` over the rows of a
    /// `[R, C]` logit matrix.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize], weights: &[f64]) -> Result<Var> {
        let s = self.shape(logits).to_vec();
        if s.len() != 2 || targets.len() != s[0] || weights.len() != s[0] || targets.iter().any(|&t| t >= s[1]) {
            return Err(shape_err("cross_entropy", &s, &[targets.len(), weights.len()]));
        }
        let c = s[1];
        let mut probs = self.data(logits).to_vec();
        let mut loss = 0.0f64;
        for (r, row) in probs.chunks_mut(c).enumerate() {
            let max = row.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
            let lse = row.iter().fold(T::zero(), |s, &v| s + (v - max).exp()).ln() + max;
            loss += weights[r] * (lse - row[targets[r]]).as_f64();
            softmax_in_place(row);
        }
        let value = Tensor::scalar(T::of(loss));
        let weights = weights.iter().map(|&w| T::of(w)).collect();
        Ok(self.push(
            value,
            Op::CrossEntropy {
                logits,
                probs,
                targets: targets.to_vec(),
                weights,
            },
            &[logits],
        ))
    }

    /// `Σ w_i · |pred_i − target_i|` over all elements.
    pub fn l1_loss(&mut self, pred: Var, target: &[f64], weights: &[f64]) -> Result<Var> {
        let n = self.value(pred).numel();
        if target.len() != n || weights.len() != n {
            return Err(shape_err("l1_loss", self.shape(pred), &[target.len(), weights.len()]));
        }
        let target: Vec<T> = target.iter().map(|&t| T::of(t)).collect();
        let weights: Vec<T> = weights.iter().map(|&w| T::of(w)).collect();
        let loss = self
            .data(pred)
            .iter()
            .zip(&target)
            .zip(&weights)
            .fold(T::zero(), |s, ((&p, &t), &w)| s + w * (p - t).abs());
        Ok(self.push(
            Tensor::scalar(loss),
            Op::L1 {
                pred,
                target,
                weights,
            },
            &[pred],
        ))
    }

    /// `Σ w_i · BCE(σ(logit_i), target_i)` computed stably from logits.
    pub fn bce_with_logits(&mut self, logits: Var, targets: &[f64], weights: &[f64]) -> Result<Var> {
        let n = self.value(logits).numel();
        if targets.len() != n || weights.len() != n {
            return Err(shape_err("bce_with_logits", self.shape(logits), &[targets.len(), weights.len()]));
        }
        let mut loss = 0.0f64;
        for ((&x, &t), &w) in self.data(logits).iter().zip(targets).zip(weights) {
            let x = x.as_f64();
            // softplus(x) - t·x
            let sp = x.max(0.0) + (-x.abs()).exp().ln_1p();
            loss += w * (sp - t * x);
        }
        Ok(self.push(
            Tensor::scalar(T::of(loss)),
            Op::Bce {
                logits,
                targets: targets.iter().map(|&t| T::of(t)).collect(),
                weights: weights.iter().map(|&w| T::of(w)).collect(),
            },
            &[logits],
        ))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.data(a).iter().fold(T::zero(), |s, &v| s + v);
        self.push(Tensor::scalar(s), Op::Sum { a }, &[a])
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).numel().max(1);
        let s = self.sum(a);
        self.scale(s, 1.0 / n as f64)
    }

    /// Sum of scalar nodes.
    pub fn add_scalars(&mut self, terms: &[Var]) -> Result<Var> {
        let mut it = terms.iter();
        let first = *it.next().ok_or(GradError::Invalid {
            op: "add_scalars",
            msg: "no terms".into(),
        })?;
        let mut acc = first;
        for &t in it {
            acc = self.add(acc, t)?;
        }
        Ok(acc)
    }

    /// Accumulates `d loss / d node` for every node that requires gradients.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.backpropagated {
            return Err(GradError::AlreadyBackpropagated);
        }
        let shape = self.shape(loss);
        if self.value(loss).numel() != 1 {
            return Err(GradError::NonScalarLoss(shape.to_vec()));
        }
        self.backpropagated = true;
        self.nodes[loss.0].grad = Some(vec![T::one()]);
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = self.nodes[i].grad.take() else {
                continue;
            };
            let contributions = self.backward_node(i, &g);
            self.nodes[i].grad = Some(g);
            for (p, c) in contributions {
                let node = &mut self.nodes[p.0];
                if !node.requires_grad {
                    continue;
                }
                match &mut node.grad {
                    Some(acc) => acc.iter_mut().zip(&c).for_each(|(a, b)| *a += *b),
                    None => node.grad = Some(c),
                }
            }
        }
        Ok(())
    }

    /// Gradients of every parameter in `store`; unbound or unreached
    /// parameters get zeros.
    pub fn gradients(&self, store: &ParamStore<T>) -> Gradients<T> {
        let mut out = Gradients::zeros_like(store);
        for id in store.ids() {
            if let Some(Some(v)) = self.param_vars.get(id.0) {
                if let Some(g) = self.grad(*v) {
                    out.get_mut(id).copy_from_slice(g);
                }
            }
        }
        out
    }

    fn backward_node(&self, i: usize, g: &[T]) -> Vec<(Var, Vec<T>)> {
        let node = &self.nodes[i];
        match &node.op {
            Op::Leaf => Vec::new(),
            &Op::MatMul {
                a,
                b,
                batch,
                m,
                k,
                n,
                ta,
                tb,
            } => {
                let (ad, bd) = (self.data(a), self.data(b));
                let mut da = vec![T::zero(); batch * m * k];
                let mut db = vec![T::zero(); batch * k * n];
                let need_a = self.nodes[a.0].requires_grad;
                let need_b = self.nodes[b.0].requires_grad;
                for bi in 0..batch {
                    let gs = &g[bi * m * n..(bi + 1) * m * n];
                    let a_s = &ad[bi * m * k..(bi + 1) * m * k];
                    let b_s = &bd[bi * k * n..(bi + 1) * k * n];
                    if need_a {
                        let out = &mut da[bi * m * k..(bi + 1) * m * k];
                        if ta {
                            // stored a is Aᵀ (k×m): dAᵀ = B · dCᵀ
                            gemm(k, n, m, b_s, tb, gs, true, out, false);
                        } else {
                            // dA = dC · Bᵀ
                            gemm(m, n, k, gs, false, b_s, !tb, out, false);
                        }
                    }
                    if need_b {
                        let out = &mut db[bi * k * n..(bi + 1) * k * n];
                        if tb {
                            // stored b is Bᵀ (n×k): dBᵀ = dCᵀ · A
                            gemm(n, m, k, gs, true, a_s, ta, out, false);
                        } else {
                            // dB = Aᵀ · dC
                            gemm(k, m, n, a_s, !ta, gs, false, out, false);
                        }
                    }
                }
                vec![(a, da), (b, db)]
            }
            &Op::Add { a, b } => {
                let bl = self.value(b).numel();
                let mut db = vec![T::zero(); bl];
                if self.nodes[b.0].requires_grad {
                    for chunk in g.chunks(bl) {
                        db.iter_mut().zip(chunk).for_each(|(d, &x)| *d += x);
                    }
                }
                vec![(a, g.to_vec()), (b, db)]
            }
            &Op::Sub { a, b } => vec![(a, g.to_vec()), (b, g.iter().map(|&x| -x).collect())],
            &Op::Mul { a, b } => {
                let (ad, bd) = (self.data(a), self.data(b));
                vec![
                    (a, g.iter().zip(bd).map(|(&x, &y)| x * y).collect()),
                    (b, g.iter().zip(ad).map(|(&x, &y)| x * y).collect()),
                ]
            }
            &Op::Scale { a, c } => vec![(a, g.iter().map(|&x| x * c).collect())],
            &Op::AddScalar { a } => vec![(a, g.to_vec())],
            &Op::Relu { a } => {
                let y = node.value.data();
                vec![(
                    a,
                    g.iter()
                        .zip(y)
                        .map(|(&x, &y)| if y > T::zero() { x } else { T::zero() })
                        .collect(),
                )]
            }
            &Op::Sigmoid { a } => {
                let y = node.value.data();
                vec![(a, g.iter().zip(y).map(|(&x, &y)| x * y * (T::one() - y)).collect())]
            }
            &Op::Tanh { a } => {
                let y = node.value.data();
                vec![(a, g.iter().zip(y).map(|(&x, &y)| x * (T::one() - y * y)).collect())]
            }
            &Op::Softmax { a } => {
                let y = node.value.data();
                let d = last_dim(node.value.shape()).max(1);
                let mut dx = vec![T::zero(); y.len()];
                for ((yr, gr), dr) in y.chunks(d).zip(g.chunks(d)).zip(dx.chunks_mut(d)) {
                    let dot = yr.iter().zip(gr).fold(T::zero(), |s, (&p, &q)| s + p * q);
                    for j in 0..d {
                        dr[j] = yr[j] * (gr[j] - dot);
                    }
                }
                vec![(a, dx)]
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let d = last_dim(node.value.shape());
                let df = T::of(d as f64);
                let gm = self.data(*gamma);
                let mut dx = vec![T::zero(); g.len()];
                let mut dg = vec![T::zero(); d];
                let mut dbeta = vec![T::zero(); d];
                let mut dxhat = vec![T::zero(); d];
                for r in 0..g.len() / d {
                    let gr = &g[r * d..(r + 1) * d];
                    let hr = &xhat[r * d..(r + 1) * d];
                    let (mut s1, mut s2) = (T::zero(), T::zero());
                    for j in 0..d {
                        dg[j] += gr[j] * hr[j];
                        dbeta[j] += gr[j];
                        dxhat[j] = gr[j] * gm[j];
                        s1 += dxhat[j];
                        s2 += dxhat[j] * hr[j];
                    }
                    let scale = inv_std[r] / df;
                    for j in 0..d {
                        dx[r * d + j] = scale * (df * dxhat[j] - s1 - hr[j] * s2);
                    }
                }
                vec![(*x, dx), (*gamma, dg), (*beta, dbeta)]
            }
            Op::Conv2d { x, w, b, geom, cols } => {
                let (patch, spatial) = (geom.patch(), geom.spatial());
                let in_len = geom.cin * geom.h * geom.w;
                let out_len = geom.cout * spatial;
                let wd = self.data(*w);
                let mut dw = vec![T::zero(); geom.cout * patch];
                let mut db = vec![T::zero(); geom.cout];
                let need_x = self.nodes[x.0].requires_grad;
                let mut dx = vec![T::zero(); if need_x { geom.batch * in_len } else { 0 }];
                let mut dcols = vec![T::zero(); patch * spatial];
                for bi in 0..geom.batch {
                    let gs = &g[bi * out_len..(bi + 1) * out_len];
                    let cs = &cols[bi * patch * spatial..(bi + 1) * patch * spatial];
                    gemm(geom.cout, spatial, patch, gs, false, cs, true, &mut dw, true);
                    for (c, row) in gs.chunks(spatial).enumerate() {
                        db[c] += row.iter().fold(T::zero(), |s, &v| s + v);
                    }
                    if need_x {
                        gemm(patch, geom.cout, spatial, wd, true, gs, false, &mut dcols, false);
                        col2im(&dcols, geom, &mut dx[bi * in_len..(bi + 1) * in_len]);
                    }
                }
                vec![(*x, dx), (*w, dw), (*b, db)]
            }
            Op::MaxPool { x, argmax } => {
                let mut dx = vec![T::zero(); self.value(*x).numel()];
                for (&idx, &gv) in argmax.iter().zip(g) {
                    dx[idx] += gv;
                }
                vec![(*x, dx)]
            }
            Op::Concat {
                parts,
                axis_lens,
                outer,
                inner,
            } => {
                let total: usize = axis_lens.iter().sum();
                let mut offset = 0;
                let mut out = Vec::with_capacity(parts.len());
                for (&p, &len) in parts.iter().zip(axis_lens) {
                    let mut dp = Vec::with_capacity(outer * len * inner);
                    for o in 0..*outer {
                        let base = (o * total + offset) * inner;
                        dp.extend_from_slice(&g[base..base + len * inner]);
                    }
                    offset += len;
                    out.push((p, dp));
                }
                out
            }
            &Op::Slice {
                a,
                outer,
                inner,
                axis_len,
                start,
                len,
            } => {
                let mut da = vec![T::zero(); outer * axis_len * inner];
                for o in 0..outer {
                    let base = (o * axis_len + start) * inner;
                    da[base..base + len * inner].copy_from_slice(&g[o * len * inner..(o + 1) * len * inner]);
                }
                vec![(a, da)]
            }
            Op::Permute { a, perm } => {
                let src = permute_indices(self.shape(*a), perm);
                let mut da = vec![T::zero(); g.len()];
                for (&i, &gv) in src.iter().zip(g) {
                    da[i] = gv;
                }
                vec![(*a, da)]
            }
            &Op::Reshape { a } => vec![(a, g.to_vec())],
            Op::CrossEntropy {
                logits,
                probs,
                targets,
                weights,
            } => {
                let c = probs.len() / targets.len().max(1);
                let mut dx = probs.clone();
                for (r, row) in dx.chunks_mut(c).enumerate() {
                    row[targets[r]] -= T::one();
                    let s = weights[r] * g[0];
                    row.iter_mut().for_each(|v| *v *= s);
                }
                vec![(*logits, dx)]
            }
            Op::L1 {
                pred,
                target,
                weights,
            } => {
                let p = self.data(*pred);
                let dx = p
                    .iter()
                    .zip(target)
                    .zip(weights)
                    .map(|((&p, &t), &w)| {
                        let s = if p > t {
                            T::one()
                        } else if p < t {
                            -T::one()
                        } else {
                            T::zero()
                        };
                        s * w * g[0]
                    })
                    .collect();
                vec![(*pred, dx)]
            }
            Op::Bce {
                logits,
                targets,
                weights,
            } => {
                let x = self.data(*logits);
                let dx = x
                    .iter()
                    .zip(targets)
                    .zip(weights)
                    .map(|((&x, &t), &w)| {
                        let s = T::one() / (T::one() + (-x).exp());
                        w * (s - t) * g[0]
                    })
                    .collect();
                vec![(*logits, dx)]
            }
            &Op::Sum { a } => vec![(a, vec![g[0]; self.value(a).numel()])],
        }
    }
}

fn softmax_in_place<T: Scalar>(row: &mut [T]) {
    let max = row.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
    let mut sum = T::zero();
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v = *v / sum;
    }
}

/// Source index in the input for every output element of a permutation.
fn permute_indices(shape: &[usize], perm: &[usize]) -> Vec<usize> {
    let r = shape.len();
    let mut in_strides = vec![1usize; r];
    for i in (0..r.saturating_sub(1)).rev() {
        in_strides[i] = in_strides[i + 1] * shape[i + 1];
    }
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let n: usize = shape.iter().product();
    let mut out = Vec::with_capacity(n);
    if n == 0 {
        return out;
    }
    let mut idx = vec![0usize; r];
    let mut src = 0usize;
    for _ in 0..n {
        out.push(src);
        for ax in (0..r).rev() {
            idx[ax] += 1;
            src += strides[ax];
            if idx[ax] < out_shape[ax] {
                break;
            }
            src -= strides[ax] * idx[ax];
            idx[ax] = 0;
        }
    }
    out
}

fn im2col<T: Scalar>(x: &[T], g: &ConvGeom, cols: &mut [T]) {
    let spatial = g.spatial();
    for c in 0..g.cin {
        for ki in 0..g.k {
            for kj in 0..g.k {
                let row = (c * g.k + ki) * g.k + kj;
                let dst = &mut cols[row * spatial..(row + 1) * spatial];
                for oy in 0..g.ho {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    let drow = &mut dst[oy * g.wo..(oy + 1) * g.wo];
                    if iy < 0 || iy >= g.h as isize {
                        drow.iter_mut().for_each(|v| *v = T::zero());
                        continue;
                    }
                    let src = &x[(c * g.h + iy as usize) * g.w..(c * g.h + iy as usize + 1) * g.w];
                    for (ox, d) in drow.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                        *d = if ix < 0 || ix >= g.w as isize {
                            T::zero()
                        } else {
                            src[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

fn col2im<T: Scalar>(cols: &[T], g: &ConvGeom, dx: &mut [T]) {
    let spatial = g.spatial();
    for c in 0..g.cin {
        for ki in 0..g.k {
            for kj in 0..g.k {
                let row = (c * g.k + ki) * g.k + kj;
                let src = &cols[row * spatial..(row + 1) * spatial];
                for oy in 0..g.ho {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let base = (c * g.h + iy as usize) * g.w;
                    for ox in 0..g.wo {
                        let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.w as isize {
                            dx[base + ix as usize] += src[oy * g.wo + ox];
                        }
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::from_f64(shape, data).unwrap()
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(t(&[2, 3], &[1.0, 2.0, 3.0, -5.0, 0.0, 40.0]));
        let y = g.softmax(x);
        for row in g.data(y).chunks(3) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn matmul_identity() {
        let mut g = Graph::<f64>::new();
        let a = g.constant(t(&[2, 3], &[1.0, -2.0, 3.5, 0.25, 7.0, -1.0]));
        let eye = g.constant(t(&[3, 3], &[1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0]));
        let y = g.matmul(a, eye).unwrap();
        assert_eq!(g.data(y), g.data(a));
    }

    #[test]
    fn shape_errors_name_both_shapes() {
        let mut g = Graph::<f64>::new();
        let a = g.constant(Tensor::zeros(&[2, 3]));
        let b = g.constant(Tensor::zeros(&[2, 3]));
        match g.matmul(a, b) {
            Err(GradError::Shape { lhs, rhs, .. }) => {
                assert_eq!(lhs, vec![2, 3]);
                assert_eq!(rhs, vec![2, 3]);
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn sum_of_squares_gradient() {
        let mut store = ParamStore::<f64>::new();
        let w = store.add("w", super::super::ParamGroup::Transformer, t(&[3], &[1.0, -2.0, 0.5]));
        let unused = store.add("u", super::super::ParamGroup::Transformer, t(&[2], &[1.0, 1.0]));
        let mut g = Graph::new();
        let wv = g.param(&store, w);
        let sq = g.mul(wv, wv).unwrap();
        let loss = g.sum(sq);
        g.backward(loss).unwrap();
        let grads = g.gradients(&store);
        assert_eq!(grads.get(w), &[2.0, -4.0, 1.0]);
        assert_eq!(grads.get(unused), &[0.0, 0.0]);
        assert_eq!(g.backward(loss), Err(GradError::AlreadyBackpropagated));
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let mut g = Graph::<f64>::new();
        let a = g.leaf(Tensor::zeros(&[2]), true);
        assert!(matches!(g.backward(a), Err(GradError::NonScalarLoss(_))));
    }

    #[test]
    fn permute_round_trip() {
        let mut g = Graph::<f64>::new();
        let data: Vec<f64> = (0..24).map(|v| v as f64).collect();
        let a = g.constant(t(&[2, 3, 4], &data));
        let p = g.permute(a, &[2, 0, 1]).unwrap();
        assert_eq!(g.shape(p), &[4, 2, 3]);
        // out[i][j][k] = a[j][k][i]
        assert_eq!(g.data(p)[6 + 3 + 2], data[12 + 2 * 4 + 1]);
        let back = g.permute(p, &[1, 2, 0]).unwrap();
        assert_eq!(g.data(back), &data[..]);
    }

    #[test]
    fn conv_matches_direct_sum() {
        let mut g = Graph::<f64>::new();
        let xd: Vec<f64> = (0..2 * 5 * 5).map(|v| (v as f64 * 0.37).sin()).collect();
        let wd: Vec<f64> = (0..3 * 2 * 3 * 3).map(|v| (v as f64 * 0.11).cos()).collect();
        let x = g.constant(t(&[1, 2, 5, 5], &xd));
        let w = g.constant(t(&[3, 2, 3, 3], &wd));
        let b = g.constant(t(&[3], &[0.1, -0.2, 0.3]));
        let y = g.conv2d(x, w, b, ConvSpec { stride: 2, padding: 1 }).unwrap();
        assert_eq!(g.shape(y), &[1, 3, 3, 3]);
        for o in 0..3 {
            for oy in 0..3 {
                for ox in 0..3 {
                    let mut s = [0.1, -0.2, 0.3][o];
                    for c in 0..2 {
                        for ki in 0..3 {
                            for kj in 0..3 {
                                let iy = (oy * 2 + ki) as isize - 1;
                                let ix = (ox * 2 + kj) as isize - 1;
                                if (0..5).contains(&iy) && (0..5).contains(&ix) {
                                    s += xd[(c * 5 + iy as usize) * 5 + ix as usize] * wd[((o * 2 + c) * 3 + ki) * 3 + kj];
                                }
                            }
                        }
                    }
                    assert!((g.data(y)[(o * 3 + oy) * 3 + ox] - s).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn inference_graph_keeps_no_grad() {
        let mut store = ParamStore::<f64>::new();
        let w = store.add("w", super::super::ParamGroup::Transformer, t(&[1], &[3.0]));
        let mut g = Graph::inference();
        let v = g.param(&store, w);
        let y = g.sum(v);
        g.backward(y).unwrap();
        assert!(g.grad(v).is_none());
    }
}
