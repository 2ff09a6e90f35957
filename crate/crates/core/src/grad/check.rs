//! Central finite-difference gradient checking at 64-bit.

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{ConvSpec, Graph, ParamGroup, ParamId, ParamStore, Result, Tensor, Var};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradcheckConfig {
    pub h: f64,
    pub tol: f64,
    /// Denominator floor of the relative error, so coordinates whose true
    /// gradient is zero are compared absolutely.
    pub floor: f64,
    /// Checks at most this many coordinates of each parameter.
    pub max_coords_per_param: Option<usize>,
    pub seed: u64,
}

impl Default for GradcheckConfig {
    fn default() -> Self {
        Self {
            h: 1e-5,
            tol: 1e-4,
            floor: 1e-5,
            max_coords_per_param: None,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradcheckReport {
    pub checked: usize,
    pub max_rel_err: f64,
    /// Parameter name and flat index of the worst coordinate.
    pub worst: Option<(String, usize)>,
    /// Coordinates whose difference quotient changed with the step size,
    /// i.e. the perturbation straddled a kink (relu, |·|, max).
    pub kinks: usize,
    pub tol: f64,
}

impl GradcheckReport {
    pub fn passed(&self) -> bool {
        self.checked > 0 && self.max_rel_err <= self.tol
    }
}

pub fn rel_err(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

fn eval<F>(f: &F, store: &ParamStore<f64>) -> Result<f64>
where
    F: Fn(&mut Graph<f64>, &ParamStore<f64>) -> Result<Var>,
{
    let mut g = Graph::inference();
    let loss = f(&mut g, store)?;
    Ok(g.value(loss).item())
}

fn central<F>(f: &F, store: &mut ParamStore<f64>, id: super::ParamId, i: usize, h: f64) -> Result<f64>
where
    F: Fn(&mut Graph<f64>, &ParamStore<f64>) -> Result<Var>,
{
    let x = store.get(id).data()[i];
    store.get_mut(id).data_mut()[i] = x + h;
    let plus = eval(f, store);
    store.get_mut(id).data_mut()[i] = x - h;
    let minus = eval(f, store);
    store.get_mut(id).data_mut()[i] = x;
    Ok((plus? - minus?) / (2.0 * h))
}

/// Compares the tape gradient of the scalar built by `f` with central
/// differences for every (or a seeded sample of) parameter coordinate.
///
/// A coordinate that fails at step `h` is re-estimated at `h/10`; if the two
/// estimates disagree by more than the tolerance the perturbation crossed a
/// non-differentiable point, and the coordinate is counted in `kinks` instead
/// of the error.
pub fn gradcheck<F>(store: &ParamStore<f64>, f: F, cfg: GradcheckConfig) -> Result<GradcheckReport>
where
    F: Fn(&mut Graph<f64>, &ParamStore<f64>) -> Result<Var>,
{
    let mut g = Graph::new();
    let loss = f(&mut g, store)?;
    g.backward(loss)?;
    let grads = g.gradients(store);

    let mut work = store.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut report = GradcheckReport {
        checked: 0,
        max_rel_err: 0.0,
        worst: None,
        kinks: 0,
        tol: cfg.tol,
    };
    for id in store.ids() {
        let n = store.get(id).numel();
        let coords: Vec<usize> = match cfg.max_coords_per_param {
            Some(k) if k < n => {
                let mut v = sample(&mut rng, n, k).into_vec();
                v.sort_unstable();
                v
            }
            _ => (0..n).collect(),
        };
        for i in coords {
            let a = grads.get(id)[i];
            let num = central(&f, &mut work, id, i, cfg.h)?;
            let mut err = rel_err(a, num, cfg.floor);
            if err > cfg.tol {
                let fine = central(&f, &mut work, id, i, cfg.h / 10.0)?;
                if rel_err(num, fine, cfg.floor) > cfg.tol {
                    report.kinks += 1;
                    continue;
                }
                err = err.min(rel_err(a, fine, cfg.floor));
            }
            report.checked += 1;
            if err > report.max_rel_err || report.worst.is_none() {
                report.max_rel_err = report.max_rel_err.max(err);
                report.worst = Some((store.name(id).to_string(), i));
            }
        }
    }
    Ok(report)
}

/// Copy of `store` with uniform noise of half-width `scale` added to every
/// entry. Zero-initialized biases over constant image regions put relu
/// inputs exactly on the kink, where central differences see slope 1/2;
/// checks should run at a generic point instead.
pub fn jittered(store: &ParamStore<f64>, scale: f64, seed: u64) -> ParamStore<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = store.clone();
    let ids: Vec<ParamId> = out.ids().collect();
    for id in ids {
        for v in out.get_mut(id).data_mut() {
            *v += rng.gen_range(-scale..scale);
        }
    }
    out
}

/// A named scalar function of freshly drawn parameters.
type Case = (&'static str, ParamStore<f64>, Box<dyn Fn(&mut Graph<f64>, &ParamStore<f64>) -> Result<Var>>);

fn uniform(store: &mut ParamStore<f64>, name: &str, shape: &[usize], rng: &mut ChaCha8Rng) -> ParamId {
    let n: usize = shape.iter().product();
    let data: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
    store.add(name, ParamGroup::Transformer, Tensor::from_f64(shape, &data).expect("shape matches"))
}

/// `Σ c_i · x_i` with fixed random `c`, so that no output symmetry (e.g.
/// softmax rows summing to one) zeroes the gradient under test.
fn probe(g: &mut Graph<f64>, x: Var, seed: u64) -> Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let shape = g.shape(x).to_vec();
    let n: usize = shape.iter().product();
    let c: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let c = g.constant(Tensor::from_f64(&shape, &c)?);
    let y = g.mul(x, c)?;
    Ok(g.sum(y))
}

fn unary(name: &'static str, shape: &'static [usize], seed: u64, op: fn(&mut Graph<f64>, Var) -> Result<Var>) -> Case {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut s = ParamStore::new();
    let a = uniform(&mut s, "a", shape, &mut rng);
    let f = move |g: &mut Graph<f64>, st: &ParamStore<f64>| {
        let x = g.param(st, a);
        let y = op(g, x)?;
        probe(g, y, seed + 1000)
    };
    (name, s, Box::new(f))
}

fn binary(name: &'static str, sa: &'static [usize], sb: &'static [usize], seed: u64, op: fn(&mut Graph<f64>, Var, Var) -> Result<Var>) -> Case {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut s = ParamStore::new();
    let a = uniform(&mut s, "a", sa, &mut rng);
    let b = uniform(&mut s, "b", sb, &mut rng);
    let f = move |g: &mut Graph<f64>, st: &ParamStore<f64>| {
        let (x, y) = (g.param(st, a), g.param(st, b));
        let z = op(g, x, y)?;
        probe(g, z, seed + 1000)
    };
    (name, s, Box::new(f))
}

fn cases() -> Vec<Case> {
    let mut v: Vec<Case> = vec![
        binary("matmul", &[3, 4], &[4, 5], 1, |g, a, b| g.matmul(a, b)),
        binary("matmul_batched", &[2, 3, 4], &[2, 4, 5], 2, |g, a, b| g.matmul(a, b)),
        binary("matmul_ta", &[4, 3], &[4, 5], 3, |g, a, b| g.matmul_t(a, b, true, false)),
        binary("matmul_tb", &[3, 4], &[5, 4], 4, |g, a, b| g.matmul_t(a, b, false, true)),
        binary("matmul_ta_tb_batched", &[2, 4, 3], &[2, 5, 4], 5, |g, a, b| g.matmul_t(a, b, true, true)),
        binary("add", &[2, 3, 4], &[2, 3, 4], 6, |g, a, b| g.add(a, b)),
        binary("add_broadcast", &[2, 3, 4], &[3, 4], 7, |g, a, b| g.add(a, b)),
        binary("sub", &[3, 4], &[3, 4], 8, |g, a, b| g.sub(a, b)),
        binary("mul", &[3, 4], &[3, 4], 9, |g, a, b| g.mul(a, b)),
        unary("scale", &[3, 4], 10, |g, a| Ok(g.scale(a, -1.7))),
        unary("add_scalar", &[3, 4], 11, |g, a| Ok(g.add_scalar(a, 0.3))),
        unary("relu", &[4, 5], 12, |g, a| Ok(g.relu(a))),
        unary("sigmoid", &[4, 5], 13, |g, a| Ok(g.sigmoid(a))),
        unary("tanh", &[4, 5], 14, |g, a| Ok(g.tanh(a))),
        unary("softmax", &[3, 5], 15, |g, a| Ok(g.softmax(a))),
        unary("max_pool2d", &[1, 2, 4, 4], 16, |g, a| g.max_pool2d(a, 2)),
        unary("slice", &[3, 6], 17, |g, a| g.slice(a, 1, 2, 3)),
        unary("permute", &[2, 3, 4], 18, |g, a| g.permute(a, &[2, 0, 1])),
        unary("transpose", &[3, 4], 19, |g, a| g.transpose(a)),
        unary("reshape", &[3, 4], 20, |g, a| g.reshape(a, &[2, 6])),
        unary("sum", &[3, 4], 21, |g, a| Ok(g.sum(a))),
        unary("mean", &[3, 4], 22, |g, a| Ok(g.mean(a))),
        binary("concat", &[2, 3], &[2, 2], 23, |g, a, b| g.concat(&[a, b], 1)),
        binary("add_scalars", &[1], &[1], 24, |g, a, b| {
            let (x, y) = (g.sum(a), g.sum(b));
            let y2 = g.mul(y, y)?;
            g.add_scalars(&[x, y2])
        }),
        unary("cross_entropy", &[4, 3], 25, |g, a| g.cross_entropy(a, &[0, 2, 1, 2], &[1.0, 0.5, 2.0, 0.1])),
        unary("l1_loss", &[2, 3], 26, |g, a| g.l1_loss(a, &[0.1, -0.2, 0.3, 0.9, -0.9, 0.0], &[1.0, 2.0, 0.5, 1.0, 0.0, 3.0])),
        unary("bce_with_logits", &[2, 3], 27, |g, a| g.bce_with_logits(a, &[1.0, 0.0, 1.0, 0.0, 0.5, 1.0], &[1.0, 2.0, 0.5, 1.0, 1.0, 3.0])),
    ];
    {
        let mut rng = ChaCha8Rng::seed_from_u64(28);
        let mut s = ParamStore::new();
        let x = uniform(&mut s, "x", &[2, 3, 6], &mut rng);
        let gm = uniform(&mut s, "gamma", &[6], &mut rng);
        let bt = uniform(&mut s, "beta", &[6], &mut rng);
        let f = move |g: &mut Graph<f64>, st: &ParamStore<f64>| {
            let (x, gm, bt) = (g.param(st, x), g.param(st, gm), g.param(st, bt));
            let y = g.layer_norm(x, gm, bt)?;
            probe(g, y, 1028)
        };
        v.push(("layer_norm", s, Box::new(f)));
    }
    for (name, stride, padding, seed) in [("conv2d", 1, 1, 29u64), ("conv2d_stride2", 2, 1, 30)] {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut s = ParamStore::new();
        let x = uniform(&mut s, "x", &[2, 2, 5, 5], &mut rng);
        let w = uniform(&mut s, "w", &[3, 2, 3, 3], &mut rng);
        let b = uniform(&mut s, "b", &[3], &mut rng);
        let f = move |g: &mut Graph<f64>, st: &ParamStore<f64>| {
            let (x, w, b) = (g.param(st, x), g.param(st, w), g.param(st, b));
            let y = g.conv2d(x, w, b, ConvSpec { stride, padding })?;
            probe(g, y, seed + 1000)
        };
        v.push((name, s, Box::new(f)));
    }
    v
}

/// Gradchecks every differentiable op of [`Graph`] on small random inputs.
pub fn op_suite(cfg: GradcheckConfig) -> Result<Vec<(&'static str, GradcheckReport)>> {
    cases()
        .into_iter()
        .map(|(name, store, f)| Ok((name, gradcheck(&store, f, cfg)?)))
        .collect()
}
