use std::collections::BTreeMap;

use rand::Rng;

use super::gemm::{gemm, MatRef};
use super::{ParamId, ParamStore, Real, Tensor};
use crate::error::{Error, Result};

/// Handle to a value recorded in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Param(ParamId),
    Add(Var, Var),
    AddSuffix(Var, Var),
    Mul(Var, Var),
    Scale(Var, Real),
    MatMul(Var, Var),
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    Bmm {
        a: Var,
        b: Var,
        ta: bool,
        tb: bool,
    },
    Reshape(Var),
    Permute {
        x: Var,
        axes: Vec<usize>,
    },
    Concat {
        parts: Vec<Var>,
        axis: usize,
    },
    Narrow {
        x: Var,
        axis: usize,
        start: usize,
    },
    Expand(Var),
    Gather {
        table: Var,
        indices: Vec<usize>,
    },
    Softmax {
        x: Var,
        axis: usize,
    },
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<Real>,
        inv_std: Vec<Real>,
    },
    Gelu(Var),
    Mask {
        x: Var,
        mask: Vec<Real>,
    },
    Sum(Var),
    Mean(Var),
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        probs: Vec<Real>,
    },
    WeightBce {
        w: Var,
        targets: Vec<usize>,
        eps: f64,
    },
}

#[derive(Debug)]
struct Node {
    shape: Vec<usize>,
    value: Vec<Real>,
    op: Op,
    requires_grad: bool,
}

/// Per-parameter gradients produced by [`Graph::backward`].
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Gradients {
    grads: BTreeMap<ParamId, Vec<Real>>,
}

impl Gradients {
    pub fn get(&self, id: ParamId) -> Option<&[Real]> {
        self.grads.get(&id).map(Vec::as_slice)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &[Real])> {
        self.grads.iter().map(|(k, v)| (*k, v.as_slice()))
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }
}

/// Operation tape for one forward/backward pass.
///
/// Nodes are appended in execution order, so every node's inputs precede it
/// and reverse index order is a valid topological order for backward.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<Real>>>,
    no_grad: bool,
}

fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

/// Splits `shape` around `axis` into (outer, axis_len, inner).
fn split_at_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    (
        numel(&shape[..axis]),
        shape[axis],
        numel(&shape[axis + 1..]),
    )
}

fn std_normal_cdf(x: f64) -> f64 {
    0.5 * (1.0 + libm::erf(x / std::f64::consts::SQRT_2))
}

fn std_normal_pdf(x: f64) -> f64 {
    (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt()
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    /// A graph that records values only; nothing requires grad and
    /// `backward` is unavailable.
    pub fn inference() -> Self {
        Graph {
            no_grad: true,
            ..Self::default()
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn value(&self, v: Var) -> &[Real] {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn to_tensor(&self, v: Var) -> Tensor {
        let n = &self.nodes[v.0];
        Tensor::new(n.shape.clone(), n.value.clone()).expect("node shapes are consistent")
    }

    /// Gradient of the last `backward` loss with respect to `v`, if any flowed.
    pub fn grad(&self, v: Var) -> Option<&[Real]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    fn push(&mut self, shape: Vec<usize>, value: Vec<Real>, op: Op, requires_grad: bool) -> Var {
        debug_assert_eq!(numel(&shape), value.len());
        self.nodes.push(Node {
            shape,
            value,
            op,
            requires_grad: requires_grad && !self.no_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    // ---- leaves -------------------------------------------------------

    /// Records `t` as a leaf. Its gradient is readable through [`Graph::grad`]
    /// when `t.requires_grad()` is set.
    pub fn leaf(&mut self, t: &Tensor) -> Var {
        self.push(t.shape().to_vec(), t.data().to_vec(), Op::Leaf, t.requires_grad())
    }

    /// Records a constant (never requires grad).
    pub fn constant(&mut self, shape: Vec<usize>, value: Vec<Real>) -> Result<Var> {
        if numel(&shape) != value.len() || shape.contains(&0) {
            return Err(Error::shape(
                "constant",
                format!("shape {shape:?} with {} values", value.len()),
            ));
        }
        Ok(self.push(shape, value, Op::Leaf, false))
    }

    /// Records parameter `id`; gradients are reported under `id` by `backward`.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        let t = store.get(id);
        self.push(
            t.shape().to_vec(),
            t.data().to_vec(),
            Op::Param(id),
            t.requires_grad(),
        )
    }

    /// Same values as `x`, with no gradient edge back to it.
    pub fn detach(&mut self, x: Var) -> Var {
        let n = &self.nodes[x.0];
        let (shape, value) = (n.shape.clone(), n.value.clone());
        self.push(shape, value, Op::Leaf, false)
    }

    // ---- elementwise --------------------------------------------------

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(
                op,
                format!("{:?} vs {:?}", self.shape(a), self.shape(b)),
            ));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let value = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(x, y)| x + y)
            .collect();
        let rg = self.rg(&[a, b]);
        Ok(self.push(self.shape(a).to_vec(), value, Op::Add(a, b), rg))
    }

    /// `a + b` where `b`'s shape is a trailing suffix of `a`'s shape; `b` is
    /// repeated over the leading axes.
    pub fn add_suffix(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sb.len() > sa.len() || sa[sa.len() - sb.len()..] != *sb {
            return Err(Error::shape("add_suffix", format!("{sa:?} vs {sb:?}")));
        }
        let inner = numel(sb);
        let bv = self.value(b);
        let value = self
            .value(a)
            .iter()
            .enumerate()
            .map(|(i, x)| x + bv[i % inner])
            .collect();
        let rg = self.rg(&[a, b]);
        Ok(self.push(sa.to_vec(), value, Op::AddSuffix(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let value = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(x, y)| x * y)
            .collect();
        let rg = self.rg(&[a, b]);
        Ok(self.push(self.shape(a).to_vec(), value, Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, x: Var, s: Real) -> Var {
        let value = self.value(x).iter().map(|v| v * s).collect();
        let rg = self.rg(&[x]);
        self.push(self.shape(x).to_vec(), value, Op::Scale(x, s), rg)
    }

    /// Exact GELU, `x * Phi(x)`.
    pub fn gelu(&mut self, x: Var) -> Var {
        let value = self
            .value(x)
            .iter()
            .map(|&v| {
                let v = v as f64;
                (v * std_normal_cdf(v)) as Real
            })
            .collect();
        let rg = self.rg(&[x]);
        self.push(self.shape(x).to_vec(), value, Op::Gelu(x), rg)
    }

    /// Inverted dropout: zeroes entries with probability `p` and rescales the
    /// survivors by `1/(1-p)`. Identity when `p == 0`.
    pub fn dropout<R: Rng + ?Sized>(&mut self, x: Var, p: Real, rng: &mut R) -> Result<Var> {
        if !(0.0..1.0).contains(&p) {
            return Err(Error::Contract(format!("dropout rate {p} not in [0, 1)")));
        }
        if p == 0.0 {
            return Ok(x);
        }
        let keep = 1.0 / (1.0 - p);
        let mask: Vec<Real> = (0..self.value(x).len())
            .map(|_| if rng.gen::<Real>() < p { 0.0 } else { keep })
            .collect();
        let value = self.value(x).iter().zip(&mask).map(|(v, m)| v * m).collect();
        let rg = self.rg(&[x]);
        Ok(self.push(self.shape(x).to_vec(), value, Op::Mask { x, mask }, rg))
    }

    // ---- linear algebra -----------------------------------------------

    /// Matrix product of `a: [m, k]` and `b: [k, n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::shape("matmul", format!("{sa:?} x {sb:?}")));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        gemm(
            MatRef::new(self.value(a), m, k),
            MatRef::new(self.value(b), k, n),
            &mut out,
            0.0,
        );
        let rg = self.rg(&[a, b]);
        Ok(self.push(vec![m, n], out, Op::MatMul(a, b), rg))
    }

    /// `x @ w + b` over the last axis of `x`: `[..., in] -> [..., out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (sx, sw) = (self.shape(x), self.shape(w));
        if sw.len() != 2 || sx.last() != Some(&sw[0]) {
            return Err(Error::shape("linear", format!("{sx:?} x {sw:?}")));
        }
        let (din, dout) = (sw[0], sw[1]);
        if let Some(b) = b {
            if self.shape(b) != [dout] {
                return Err(Error::shape(
                    "linear",
                    format!("bias {:?} for output width {dout}", self.shape(b)),
                ));
            }
        }
        let rows = self.value(x).len() / din;
        let mut out = vec![0.0; rows * dout];
        if let Some(b) = b {
            let bv = self.value(b);
            out.chunks_exact_mut(dout).for_each(|r| r.copy_from_slice(bv));
        }
        gemm(
            MatRef::new(self.value(x), rows, din),
            MatRef::new(self.value(w), din, dout),
            &mut out,
            if b.is_some() { 1.0 } else { 0.0 },
        );
        let mut shape = sx.to_vec();
        *shape.last_mut().unwrap() = dout;
        let rg = self.rg(&[x, w]) || b.is_some_and(|b| self.rg(&[b]));
        Ok(self.push(shape, out, Op::Linear { x, w, b }, rg))
    }

    /// Batched product over the leading axis: `op(a)[g] @ op(b)[g]` where
    /// `op` optionally transposes the trailing two axes.
    pub fn bmm(&mut self, a: Var, b: Var, ta: bool, tb: bool) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        let err = || Error::shape("bmm", format!("{sa:?} x {sb:?} (ta={ta}, tb={tb})"));
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] {
            return Err(err());
        }
        let (m, k) = if ta { (sa[2], sa[1]) } else { (sa[1], sa[2]) };
        let (k2, n) = if tb { (sb[2], sb[1]) } else { (sb[1], sb[2]) };
        if k != k2 {
            return Err(err());
        }
        let g = sa[0];
        let (asz, bsz) = (m * k, k * n);
        let mut out = vec![0.0; g * m * n];
        let (av, bv) = (self.value(a), self.value(b));
        for i in 0..g {
            let am = mat_view(&av[i * asz..(i + 1) * asz], sa[1], sa[2], ta);
            let bm = mat_view(&bv[i * bsz..(i + 1) * bsz], sb[1], sb[2], tb);
            gemm(am, bm, &mut out[i * m * n..(i + 1) * m * n], 0.0);
        }
        let rg = self.rg(&[a, b]);
        Ok(self.push(vec![g, m, n], out, Op::Bmm { a, b, ta, tb }, rg))
    }

    // ---- shape ops ----------------------------------------------------

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var> {
        if numel(&shape) != self.value(x).len() || shape.contains(&0) {
            return Err(Error::shape(
                "reshape",
                format!("{:?} -> {shape:?}", self.shape(x)),
            ));
        }
        let value = self.value(x).to_vec();
        let rg = self.rg(&[x]);
        Ok(self.push(shape, value, Op::Reshape(x), rg))
    }

    pub fn permute(&mut self, x: Var, axes: &[usize]) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let mut seen = vec![false; shape.len()];
        if axes.len() != shape.len()
            || axes
                .iter()
                .any(|&a| a >= shape.len() || std::mem::replace(&mut seen[a], true))
        {
            return Err(Error::shape(
                "permute",
                format!("axes {axes:?} for shape {shape:?}"),
            ));
        }
        let out_shape: Vec<usize> = axes.iter().map(|&a| shape[a]).collect();
        let value = permute_values(self.value(x), &shape, axes);
        let rg = self.rg(&[x]);
        Ok(self.push(
            out_shape,
            value,
            Op::Permute {
                x,
                axes: axes.to_vec(),
            },
            rg,
        ))
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::shape("concat", "no inputs"))?;
        let base = self.shape(*first).to_vec();
        if axis >= base.len() {
            return Err(Error::shape("concat", format!("axis {axis} for {base:?}")));
        }
        let mut total = 0;
        for p in parts {
            let s = self.shape(*p);
            let compatible = s.len() == base.len()
                && s.iter()
                    .zip(&base)
                    .enumerate()
                    .all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return Err(Error::shape(
                    "concat",
                    format!("{s:?} vs {base:?} along axis {axis}"),
                ));
            }
            total += s[axis];
        }
        let mut shape = base.clone();
        shape[axis] = total;
        let (outer, _, inner) = split_at_axis(&shape, axis);
        let mut value = Vec::with_capacity(numel(&shape));
        for o in 0..outer {
            for p in parts {
                let len = self.shape(*p)[axis] * inner;
                value.extend_from_slice(&self.value(*p)[o * len..(o + 1) * len]);
            }
        }
        let rg = self.rg(parts);
        Ok(self.push(
            shape,
            value,
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
            rg,
        ))
    }

    /// Slice `[start, start+len)` of `axis`.
    pub fn narrow(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() || len == 0 || start + len > shape[axis] {
            return Err(Error::shape(
                "narrow",
                format!("[{start}, {}) of axis {axis} in {shape:?}", start + len),
            ));
        }
        let (outer, alen, inner) = split_at_axis(&shape, axis);
        let src = self.value(x);
        let mut value = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * alen + start) * inner;
            value.extend_from_slice(&src[base..base + len * inner]);
        }
        let mut out_shape = shape;
        out_shape[axis] = len;
        let rg = self.rg(&[x]);
        Ok(self.push(out_shape, value, Op::Narrow { x, axis, start }, rg))
    }

    /// Repeats `x` `n` times along a new leading axis.
    pub fn expand(&mut self, x: Var, n: usize) -> Result<Var> {
        if n == 0 {
            return Err(Error::shape("expand", "zero repeats"));
        }
        let mut shape = vec![n];
        shape.extend_from_slice(self.shape(x));
        let value = self.value(x).repeat(n);
        let rg = self.rg(&[x]);
        Ok(self.push(shape, value, Op::Expand(x), rg))
    }

    /// Selects rows of `table` along axis 0.
    pub fn gather(&mut self, table: Var, indices: &[usize]) -> Result<Var> {
        let shape = self.shape(table).to_vec();
        if indices.is_empty() {
            return Err(Error::shape("gather", "no indices"));
        }
        if let Some(&bad) = indices.iter().find(|&&i| i >= shape[0]) {
            return Err(Error::Index(format!(
                "gather index {bad} out of range for {} rows",
                shape[0]
            )));
        }
        let row = numel(&shape[1..]);
        let src = self.value(table);
        let mut value = Vec::with_capacity(indices.len() * row);
        for &i in indices {
            value.extend_from_slice(&src[i * row..(i + 1) * row]);
        }
        let mut out_shape = shape;
        out_shape[0] = indices.len();
        let rg = self.rg(&[table]);
        Ok(self.push(
            out_shape,
            value,
            Op::Gather {
                table,
                indices: indices.to_vec(),
            },
            rg,
        ))
    }

    // ---- normalisation ------------------------------------------------

    /// Softmax along `axis`, computed with max subtraction.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(Error::shape("softmax", format!("axis {axis} for {shape:?}")));
        }
        let (outer, alen, inner) = split_at_axis(&shape, axis);
        let src = self.value(x);
        let mut value = vec![0.0; src.len()];
        let mut buf = vec![0.0f64; alen];
        for o in 0..outer {
            for i in 0..inner {
                let at = |a: usize| (o * alen + a) * inner + i;
                let max = (0..alen).map(|a| src[at(a)]).fold(Real::NEG_INFINITY, Real::max);
                let mut sum = 0.0f64;
                for (a, b) in buf.iter_mut().enumerate() {
                    *b = ((src[at(a)] - max) as f64).exp();
                    sum += *b;
                }
                for (a, b) in buf.iter().enumerate() {
                    value[at(a)] = (b / sum) as Real;
                }
            }
        }
        let rg = self.rg(&[x]);
        Ok(self.push(shape, value, Op::Softmax { x, axis }, rg))
    }

    /// Layer norm over the last axis with biased variance.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let d = *shape.last().unwrap();
        if self.shape(gamma) != [d] || self.shape(beta) != [d] {
            return Err(Error::shape(
                "layer_norm",
                format!(
                    "input {shape:?} with gamma {:?}, beta {:?}",
                    self.shape(gamma),
                    self.shape(beta)
                ),
            ));
        }
        if eps <= 0.0 {
            return Err(Error::Contract(format!("layer_norm eps {eps} must be > 0")));
        }
        let src = self.value(x);
        let (g, bt) = (self.value(gamma), self.value(beta));
        let rows = src.len() / d;
        let mut value = vec![0.0; src.len()];
        let mut xhat = vec![0.0; src.len()];
        let mut inv_std = vec![0.0; rows];
        for r in 0..rows {
            let row = &src[r * d..(r + 1) * d];
            let mean = row.iter().map(|&v| v as f64).sum::<f64>() / d as f64;
            let var = row
                .iter()
                .map(|&v| (v as f64 - mean).powi(2))
                .sum::<f64>()
                / d as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std[r] = is as Real;
            for j in 0..d {
                let h = (row[j] as f64 - mean) * is;
                xhat[r * d + j] = h as Real;
                value[r * d + j] = (h * g[j] as f64 + bt[j] as f64) as Real;
            }
        }
        let rg = self.rg(&[x, gamma, beta]);
        let (xhat, inv_std) = if rg { (xhat, inv_std) } else { (vec![], vec![]) };
        Ok(self.push(
            shape,
            value,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            rg,
        ))
    }

    // ---- reductions and losses ----------------------------------------

    pub fn sum(&mut self, x: Var) -> Var {
        let s: f64 = self.value(x).iter().map(|&v| v as f64).sum();
        let rg = self.rg(&[x]);
        self.push(vec![1], vec![s as Real], Op::Sum(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.value(x).len() as f64;
        let s: f64 = self.value(x).iter().map(|&v| v as f64).sum();
        let rg = self.rg(&[x]);
        self.push(vec![1], vec![(s / n) as Real], Op::Mean(x), rg)
    }

    /// Mean over the batch of `-log softmax(logits)[target]`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let shape = self.shape(logits).to_vec();
        if shape.len() != 2 || shape[0] != targets.len() {
            return Err(Error::shape(
                "cross_entropy",
                format!("logits {shape:?} with {} targets", targets.len()),
            ));
        }
        let c = shape[1];
        if let Some(&bad) = targets.iter().find(|&&t| t >= c) {
            return Err(Error::Index(format!(
                "target class {bad} out of range for {c} classes"
            )));
        }
        let src = self.value(logits);
        let mut probs = vec![0.0; src.len()];
        let mut total = 0.0f64;
        for (b, &t) in targets.iter().enumerate() {
            let row = &src[b * c..(b + 1) * c];
            let max = row.iter().copied().fold(Real::NEG_INFINITY, Real::max) as f64;
            let lse = row.iter().map(|&v| (v as f64 - max).exp()).sum::<f64>().ln() + max;
            total += lse - row[t] as f64;
            for j in 0..c {
                probs[b * c + j] = (row[j] as f64 - lse).exp() as Real;
            }
        }
        let loss = total / targets.len() as f64;
        let rg = self.rg(&[logits]);
        Ok(self.push(
            vec![1],
            vec![loss as Real],
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
            },
            rg,
        ))
    }

    /// Per-weight binary cross-entropy for simplex weights `w: [B, L, K]`
    /// against true domains `targets: [B]`:
    /// `mean_b (1/L) sum_j (1/K) [ -log w[b,j,t] + sum_{d != t} -log(1 - w[b,j,d]) ]`,
    /// with both log arguments clamped below at `eps`.
    pub fn weight_bce(&mut self, w: Var, targets: &[usize], eps: f64) -> Result<Var> {
        let shape = self.shape(w).to_vec();
        if shape.len() != 3 || shape[0] != targets.len() {
            return Err(Error::shape(
                "weight_bce",
                format!("weights {shape:?} with {} targets", targets.len()),
            ));
        }
        let (l, k) = (shape[1], shape[2]);
        if let Some(&bad) = targets.iter().find(|&&t| t >= k) {
            return Err(Error::Index(format!(
                "domain {bad} out of range for {k} weight columns"
            )));
        }
        let src = self.value(w);
        let mut total = 0.0f64;
        for (b, &t) in targets.iter().enumerate() {
            for j in 0..l {
                for d in 0..k {
                    let v = src[(b * l + j) * k + d] as f64;
                    let arg = if d == t { v } else { 1.0 - v };
                    total -= arg.max(eps).ln();
                }
            }
        }
        let loss = total / (targets.len() * l * k) as f64;
        let rg = self.rg(&[w]);
        Ok(self.push(
            vec![1],
            vec![loss as Real],
            Op::WeightBce {
                w,
                targets: targets.to_vec(),
                eps,
            },
            rg,
        ))
    }

    // ---- backward -----------------------------------------------------

    /// Reverse pass from the scalar `loss`. Gradients accumulate at fan-in
    /// nodes; parameter gradients are returned keyed by [`ParamId`] and every
    /// node's gradient stays readable through [`Graph::grad`].
    pub fn backward(&mut self, loss: Var) -> Result<Gradients> {
        if self.no_grad {
            return Err(Error::Contract("backward on an inference graph".into()));
        }
        if self.nodes[loss.0].value.len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.nodes[loss.0].shape
            )));
        }
        let mut grads: Vec<Option<Vec<Real>>> = vec![None; self.nodes.len()];
        let mut params = Gradients::default();
        if self.nodes[loss.0].requires_grad {
            grads[loss.0] = Some(vec![1.0]);
        }
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, &g, &mut grads);
            if let Op::Param(id) = self.nodes[i].op {
                match params.grads.get_mut(&id) {
                    Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
                    None => {
                        params.grads.insert(id, g.clone());
                    }
                }
            }
            grads[i] = Some(g);
        }
        self.grads = grads;
        Ok(params)
    }

    fn propagate(&self, i: usize, g: &[Real], grads: &mut [Option<Vec<Real>>]) {
        let node = &self.nodes[i];
        // Adds a contribution into an input's gradient buffer if it needs one.
        let wants = |v: Var| self.nodes[v.0].requires_grad;
        macro_rules! acc {
            ($v:expr) => {
                slot(grads, &self.nodes, $v)
            };
        }
        match &node.op {
            Op::Leaf | Op::Param(_) => {}
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    if wants(v) {
                        acc!(v).iter_mut().zip(g).for_each(|(x, y)| *x += y);
                    }
                }
            }
            Op::AddSuffix(a, b) => {
                if wants(*a) {
                    acc!(*a).iter_mut().zip(g).for_each(|(x, y)| *x += y);
                }
                if wants(*b) {
                    let gb = acc!(*b);
                    let inner = gb.len();
                    for (idx, y) in g.iter().enumerate() {
                        gb[idx % inner] += y;
                    }
                }
            }
            Op::Mul(a, b) => {
                let (av, bv) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
                if wants(*a) {
                    let ga = acc!(*a);
                    for j in 0..g.len() {
                        ga[j] += g[j] * bv[j];
                    }
                }
                if wants(*b) {
                    let gb = acc!(*b);
                    for j in 0..g.len() {
                        gb[j] += g[j] * av[j];
                    }
                }
            }
            Op::Scale(x, s) => {
                if wants(*x) {
                    acc!(*x).iter_mut().zip(g).for_each(|(a, y)| *a += y * s);
                }
            }
            Op::MatMul(a, b) => {
                let (sa, sb) = (&self.nodes[a.0].shape, &self.nodes[b.0].shape);
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                let gm = MatRef::new(g, m, n);
                if wants(*a) {
                    let bm = MatRef::new(&self.nodes[b.0].value, k, n);
                    gemm(gm, bm.t(), acc!(*a), 1.0);
                }
                if wants(*b) {
                    let am = MatRef::new(&self.nodes[a.0].value, m, k);
                    gemm(am.t(), gm, acc!(*b), 1.0);
                }
            }
            Op::Linear { x, w, b } => {
                let sw = &self.nodes[w.0].shape;
                let (din, dout) = (sw[0], sw[1]);
                let rows = g.len() / dout;
                let gm = MatRef::new(g, rows, dout);
                if wants(*x) {
                    let wm = MatRef::new(&self.nodes[w.0].value, din, dout);
                    gemm(gm, wm.t(), acc!(*x), 1.0);
                }
                if wants(*w) {
                    let xm = MatRef::new(&self.nodes[x.0].value, rows, din);
                    gemm(xm.t(), gm, acc!(*w), 1.0);
                }
                if let Some(b) = b {
                    if wants(*b) {
                        let gb = acc!(*b);
                        for r in g.chunks_exact(dout) {
                            gb.iter_mut().zip(r).for_each(|(a, y)| *a += y);
                        }
                    }
                }
            }
            Op::Bmm { a, b, ta, tb } => {
                let (sa, sb) = (&self.nodes[a.0].shape, &self.nodes[b.0].shape);
                let (gcount, m, n) = (node.shape[0], node.shape[1], node.shape[2]);
                let (asz, bsz) = (sa[1] * sa[2], sb[1] * sb[2]);
                let (av, bv) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
                for q in 0..gcount {
                    let gm = MatRef::new(&g[q * m * n..(q + 1) * m * n], m, n);
                    let am = mat_view(&av[q * asz..(q + 1) * asz], sa[1], sa[2], *ta);
                    let bm = mat_view(&bv[q * bsz..(q + 1) * bsz], sb[1], sb[2], *tb);
                    if wants(*a) {
                        let ga = &mut acc!(*a)[q * asz..(q + 1) * asz];
                        if *ta {
                            // stored a is [k, m]: dA = op(B) dC^T
                            gemm(bm, gm.t(), ga, 1.0);
                        } else {
                            gemm(gm, bm.t(), ga, 1.0);
                        }
                    }
                    if wants(*b) {
                        let gb = &mut acc!(*b)[q * bsz..(q + 1) * bsz];
                        if *tb {
                            // stored b is [n, k]: dB = dC^T op(A)
                            gemm(gm.t(), am, gb, 1.0);
                        } else {
                            gemm(am.t(), gm, gb, 1.0);
                        }
                    }
                }
            }
            Op::Reshape(x) => {
                if wants(*x) {
                    acc!(*x).iter_mut().zip(g).for_each(|(a, y)| *a += y);
                }
            }
            Op::Permute { x, axes } => {
                if wants(*x) {
                    let mut inverse = vec![0; axes.len()];
                    for (i, &a) in axes.iter().enumerate() {
                        inverse[a] = i;
                    }
                    let back = permute_values(g, &node.shape, &inverse);
                    acc!(*x).iter_mut().zip(&back).for_each(|(a, y)| *a += y);
                }
            }
            Op::Concat { parts, axis } => {
                let (outer, _, inner) = split_at_axis(&node.shape, *axis);
                let mut offset = 0;
                for o in 0..outer {
                    for p in parts {
                        let len = self.nodes[p.0].shape[*axis] * inner;
                        if wants(*p) {
                            let gp = acc!(*p);
                            gp[o * len..(o + 1) * len]
                                .iter_mut()
                                .zip(&g[offset..offset + len])
                                .for_each(|(a, y)| *a += y);
                        }
                        offset += len;
                    }
                }
            }
            Op::Narrow { x, axis, start } => {
                if wants(*x) {
                    let (outer, alen, inner) = split_at_axis(&self.nodes[x.0].shape, *axis);
                    let len = node.shape[*axis];
                    let gx = acc!(*x);
                    for o in 0..outer {
                        let base = (o * alen + start) * inner;
                        gx[base..base + len * inner]
                            .iter_mut()
                            .zip(&g[o * len * inner..(o + 1) * len * inner])
                            .for_each(|(a, y)| *a += y);
                    }
                }
            }
            Op::Expand(x) => {
                if wants(*x) {
                    let gx = acc!(*x);
                    let inner = gx.len();
                    for chunk in g.chunks_exact(inner) {
                        gx.iter_mut().zip(chunk).for_each(|(a, y)| *a += y);
                    }
                }
            }
            Op::Gather { table, indices } => {
                if wants(*table) {
                    let row = g.len() / indices.len();
                    let gt = acc!(*table);
                    for (r, &i) in indices.iter().enumerate() {
                        gt[i * row..(i + 1) * row]
                            .iter_mut()
                            .zip(&g[r * row..(r + 1) * row])
                            .for_each(|(a, y)| *a += y);
                    }
                }
            }
            Op::Softmax { x, axis } => {
                if wants(*x) {
                    let (outer, alen, inner) = split_at_axis(&node.shape, *axis);
                    let y = &node.value;
                    let gx = acc!(*x);
                    for o in 0..outer {
                        for i in 0..inner {
                            let at = |a: usize| (o * alen + a) * inner + i;
                            let dot: f64 = (0..alen).map(|a| (g[at(a)] * y[at(a)]) as f64).sum();
                            for a in 0..alen {
                                gx[at(a)] += y[at(a)] * (g[at(a)] - dot as Real);
                            }
                        }
                    }
                }
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let d = *node.shape.last().unwrap();
                let gv = &self.nodes[gamma.0].value;
                if wants(*x) {
                    let gx = acc!(*x);
                    for (r, &is) in inv_std.iter().enumerate() {
                        let (gr, hr) = (&g[r * d..(r + 1) * d], &xhat[r * d..(r + 1) * d]);
                        let mut sum_dh = 0.0f64;
                        let mut sum_dh_h = 0.0f64;
                        for j in 0..d {
                            let dh = (gr[j] * gv[j]) as f64;
                            sum_dh += dh;
                            sum_dh_h += dh * hr[j] as f64;
                        }
                        for j in 0..d {
                            let dh = (gr[j] * gv[j]) as f64;
                            let v = is as f64 / d as f64
                                * (d as f64 * dh - sum_dh - hr[j] as f64 * sum_dh_h);
                            gx[r * d + j] += v as Real;
                        }
                    }
                }
                if wants(*gamma) {
                    let gg = acc!(*gamma);
                    for (r, h) in g.chunks_exact(d).zip(xhat.chunks_exact(d)) {
                        for j in 0..d {
                            gg[j] += r[j] * h[j];
                        }
                    }
                }
                if wants(*beta) {
                    let gb = acc!(*beta);
                    for r in g.chunks_exact(d) {
                        gb.iter_mut().zip(r).for_each(|(a, y)| *a += y);
                    }
                }
            }
            Op::Gelu(x) => {
                if wants(*x) {
                    let xv = &self.nodes[x.0].value;
                    let gx = acc!(*x);
                    for j in 0..g.len() {
                        let v = xv[j] as f64;
                        let d = std_normal_cdf(v) + v * std_normal_pdf(v);
                        gx[j] += g[j] * d as Real;
                    }
                }
            }
            Op::Mask { x, mask } => {
                if wants(*x) {
                    let gx = acc!(*x);
                    for j in 0..g.len() {
                        gx[j] += g[j] * mask[j];
                    }
                }
            }
            Op::Sum(x) => {
                if wants(*x) {
                    acc!(*x).iter_mut().for_each(|a| *a += g[0]);
                }
            }
            Op::Mean(x) => {
                if wants(*x) {
                    let gx = acc!(*x);
                    let s = g[0] / gx.len() as Real;
                    gx.iter_mut().for_each(|a| *a += s);
                }
            }
            Op::CrossEntropy {
                logits,
                targets,
                probs,
            } => {
                if wants(*logits) {
                    let c = self.nodes[logits.0].shape[1];
                    let s = g[0] / targets.len() as Real;
                    let gl = acc!(*logits);
                    for (b, &t) in targets.iter().enumerate() {
                        for j in 0..c {
                            let ind = if j == t { 1.0 } else { 0.0 };
                            gl[b * c + j] += s * (probs[b * c + j] - ind);
                        }
                    }
                }
            }
            Op::WeightBce { w, targets, eps } => {
                if wants(*w) {
                    let shape = &self.nodes[w.0].shape;
                    let (l, k) = (shape[1], shape[2]);
                    let wv = &self.nodes[w.0].value;
                    let s = g[0] as f64 / (targets.len() * l * k) as f64;
                    let gw = acc!(*w);
                    for (b, &t) in targets.iter().enumerate() {
                        for j in 0..l {
                            for d in 0..k {
                                let idx = (b * l + j) * k + d;
                                let v = wv[idx] as f64;
                                let dv = if d == t {
                                    if v > *eps {
                                        -1.0 / v
                                    } else {
                                        0.0
                                    }
                                } else if 1.0 - v > *eps {
                                    1.0 / (1.0 - v)
                                } else {
                                    0.0
                                };
                                gw[idx] += (s * dv) as Real;
                            }
                        }
                    }
                }
            }
        }
    }
}

fn slot<'a>(grads: &'a mut [Option<Vec<Real>>], nodes: &[Node], v: Var) -> &'a mut Vec<Real> {
    let len = nodes[v.0].value.len();
    grads[v.0].get_or_insert_with(|| vec![0.0; len])
}

fn mat_view(data: &[Real], rows: usize, cols: usize, transpose: bool) -> MatRef<'_> {
    let m = MatRef::new(data, rows, cols);
    if transpose {
        m.t()
    } else {
        m
    }
}

fn permute_values(src: &[Real], shape: &[usize], axes: &[usize]) -> Vec<Real> {
    let rank = shape.len();
    let mut in_strides = vec![1; rank];
    for i in (0..rank.saturating_sub(1)).rev() {
        in_strides[i] = in_strides[i + 1] * shape[i + 1];
    }
    let out_shape: Vec<usize> = axes.iter().map(|&a| shape[a]).collect();
    let strides: Vec<usize> = axes.iter().map(|&a| in_strides[a]).collect();
    let mut out = Vec::with_capacity(src.len());
    let mut idx = vec![0usize; rank];
    let mut offset = 0usize;
    for _ in 0..src.len() {
        out.push(src[offset]);
        for ax in (0..rank).rev() {
            idx[ax] += 1;
            offset += strides[ax];
            if idx[ax] < out_shape[ax] {
                break;
            }
            offset -= strides[ax] * out_shape[ax];
            idx[ax] = 0;
        }
    }
    out
}
