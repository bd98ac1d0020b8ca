//! Reverse-mode differentiation over vector-valued nodes.
//!
//! A [`Tape`] records one forward computation; [`Tape::backward`] walks it in
//! reverse and accumulates parameter gradients into a [`ParamStore`]. Tapes are
//! cheap to create and are typically rebuilt per sample.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type NodeId = usize;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

/// A trainable tensor, stored row-major, with a gradient buffer of equal length.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub values: Vec<f64>,
    pub grad: Vec<f64>,
}

impl ParamTensor {
    pub fn new(name: impl Into<String>, shape: Vec<usize>, values: Vec<f64>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if values.len() != n {
            return Err(Error::Domain(format!("tensor with shape {shape:?} needs {n} values, got {}", values.len())));
        }
        Ok(Self { name: name.into(), grad: vec![0.0; n], shape, values })
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    tensors: Vec<ParamTensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, shape: Vec<usize>, values: Vec<f64>) -> Result<ParamId> {
        let t = ParamTensor::new(name, shape, values)?;
        if self.tensors.iter().any(|o| o.name == t.name) {
            return Err(Error::Domain(format!("duplicate parameter name {}", t.name)));
        }
        self.tensors.push(t);
        Ok(ParamId(self.tensors.len() - 1))
    }

    pub fn get(&self, id: ParamId) -> &ParamTensor {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut ParamTensor {
        &mut self.tensors[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.tensors.iter().position(|t| t.name == name).map(ParamId)
    }

    pub fn tensors(&self) -> &[ParamTensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [ParamTensor] {
        &mut self.tensors
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(|t| t.len()).sum()
    }

    pub fn zero_grad(&mut self) {
        for t in &mut self.tensors {
            t.grad.iter_mut().for_each(|g| *g = 0.0);
        }
    }

    pub fn snapshot(&self) -> Vec<Vec<f64>> {
        self.tensors.iter().map(|t| t.values.clone()).collect()
    }

    pub fn restore(&mut self, snapshot: &[Vec<f64>]) {
        for (t, v) in self.tensors.iter_mut().zip(snapshot) {
            t.values.copy_from_slice(v);
        }
    }

    pub fn grads(&self) -> Vec<Vec<f64>> {
        self.tensors.iter().map(|t| t.grad.clone()).collect()
    }

    /// Copies values from `other` (matched by position; shapes must agree).
    pub fn copy_values_from(&mut self, other: &ParamStore) {
        for (t, o) in self.tensors.iter_mut().zip(&other.tensors) {
            t.values.copy_from_slice(&o.values);
        }
    }

    pub fn all_finite(&self) -> bool {
        self.tensors.iter().all(|t| t.values.iter().chain(&t.grad).all(|v| v.is_finite()))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Activation {
    Linear,
    ReLU,
    Tanh,
    Sigmoid,
}

impl Activation {
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Linear => x,
            Activation::ReLU => x.max(0.0),
            Activation::Tanh => x.tanh(),
            Activation::Sigmoid => sigmoid(x),
        }
    }

    /// Derivative expressed through the activation output `y`.
    fn derivative_from_output(self, y: f64) -> f64 {
        match self {
            Activation::Linear => 1.0,
            Activation::ReLU => {
                if y > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Tanh => 1.0 - y * y,
            Activation::Sigmoid => y * (1.0 - y),
        }
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn log_sum_exp(xs: &[f64]) -> f64 {
    let m = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !m.is_finite() {
        return m;
    }
    m + xs.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

pub(crate) const HALF_LN_2PI: f64 = 0.918_938_533_204_672_7;

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Param(ParamId),
    Affine { w: ParamId, b: Option<ParamId>, x: NodeId },
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, f64),
    Act(NodeId, Activation),
    Exp(NodeId),
    Concat(Vec<NodeId>),
    Slice { x: NodeId, start: usize },
    Sum(NodeId),
    Mean(NodeId),
    Mse { pred: NodeId, target: Vec<f64> },
    BceWithLogits { logit: NodeId, label: f64 },
    GaussianKl { mu: NodeId, log_sigma: NodeId },
    MdnNll { logits: NodeId, mu: NodeId, log_sigma: NodeId, target: Vec<f64> },
}

#[derive(Clone, Debug)]
struct Node {
    value: Vec<f64>,
    op: Op,
}

#[derive(Clone, Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

fn shape_err<T>(msg: String) -> Result<T> {
    Err(Error::Domain(msg))
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn clear(&mut self) {
        self.nodes.clear();
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &[f64] {
        &self.nodes[id].value
    }

    pub fn scalar(&self, id: NodeId) -> f64 {
        self.nodes[id].value[0]
    }

    fn push(&mut self, value: Vec<f64>, op: Op) -> NodeId {
        self.nodes.push(Node { value, op });
        self.nodes.len() - 1
    }

    /// A constant input.
    pub fn leaf(&mut self, value: Vec<f64>) -> NodeId {
        self.push(value, Op::Leaf)
    }

    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> NodeId {
        self.push(store.get(id).values.clone(), Op::Param(id))
    }

    /// `W x + b` with `W` stored as `[out, in]`.
    pub fn affine(&mut self, store: &ParamStore, w: ParamId, b: Option<ParamId>, x: NodeId) -> Result<NodeId> {
        let wt = store.get(w);
        let (rows, cols) = match wt.shape.as_slice() {
            [r, c] => (*r, *c),
            s => return shape_err(format!("affine weight {} must be 2-D, has shape {s:?}", wt.name)),
        };
        let xv = &self.nodes[x].value;
        if xv.len() != cols {
            return shape_err(format!("{} expects input of length {cols}, got {}", wt.name, xv.len()));
        }
        let mut out = match b {
            Some(b) => {
                let bt = store.get(b);
                if bt.len() != rows {
                    return shape_err(format!("bias {} has length {}, expected {rows}", bt.name, bt.len()));
                }
                bt.values.clone()
            }
            None => vec![0.0; rows],
        };
        for (r, o) in out.iter_mut().enumerate() {
            let row = &wt.values[r * cols..(r + 1) * cols];
            *o += row.iter().zip(xv).map(|(a, b)| a * b).sum::<f64>();
        }
        Ok(self.push(out, Op::Affine { w, b, x }))
    }

    fn binary(&mut self, a: NodeId, b: NodeId, what: &str) -> Result<()> {
        let (la, lb) = (self.nodes[a].value.len(), self.nodes[b].value.len());
        if la != lb {
            return shape_err(format!("{what}: length mismatch {la} vs {lb}"));
        }
        Ok(())
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary(a, b, "add")?;
        let v = self.nodes[a].value.iter().zip(&self.nodes[b].value).map(|(x, y)| x + y).collect();
        Ok(self.push(v, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary(a, b, "sub")?;
        let v = self.nodes[a].value.iter().zip(&self.nodes[b].value).map(|(x, y)| x - y).collect();
        Ok(self.push(v, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary(a, b, "mul")?;
        let v = self.nodes[a].value.iter().zip(&self.nodes[b].value).map(|(x, y)| x * y).collect();
        Ok(self.push(v, Op::Mul(a, b)))
    }

    pub fn scale(&mut self, a: NodeId, factor: f64) -> NodeId {
        let v = self.nodes[a].value.iter().map(|x| x * factor).collect();
        self.push(v, Op::Scale(a, factor))
    }

    pub fn activation(&mut self, a: NodeId, act: Activation) -> NodeId {
        if act == Activation::Linear {
            return a;
        }
        let v = self.nodes[a].value.iter().map(|x| act.apply(*x)).collect();
        self.push(v, Op::Act(a, act))
    }

    pub fn exp(&mut self, a: NodeId) -> NodeId {
        let v = self.nodes[a].value.iter().map(|x| x.exp()).collect();
        self.push(v, Op::Exp(a))
    }

    pub fn concat(&mut self, parts: &[NodeId]) -> NodeId {
        let v = parts.iter().flat_map(|p| self.nodes[*p].value.iter().copied()).collect();
        self.push(v, Op::Concat(parts.to_vec()))
    }

    pub fn slice(&mut self, x: NodeId, start: usize, len: usize) -> Result<NodeId> {
        let n = self.nodes[x].value.len();
        if start + len > n {
            return shape_err(format!("slice {start}..{} out of range for length {n}", start + len));
        }
        let v = self.nodes[x].value[start..start + len].to_vec();
        Ok(self.push(v, Op::Slice { x, start }))
    }

    pub fn sum(&mut self, x: NodeId) -> NodeId {
        let s = self.nodes[x].value.iter().sum();
        self.push(vec![s], Op::Sum(x))
    }

    pub fn mean(&mut self, x: NodeId) -> NodeId {
        let v = &self.nodes[x].value;
        let s = v.iter().sum::<f64>() / v.len().max(1) as f64;
        self.push(vec![s], Op::Mean(x))
    }

    /// Mean squared error over all elements.
    pub fn mse(&mut self, pred: NodeId, target: &[f64]) -> Result<NodeId> {
        let p = &self.nodes[pred].value;
        if p.len() != target.len() {
            return shape_err(format!("mse: prediction length {} vs target {}", p.len(), target.len()));
        }
        let s = p.iter().zip(target).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / p.len() as f64;
        Ok(self.push(vec![s], Op::Mse { pred, target: target.to_vec() }))
    }

    /// Binary cross-entropy of `sigmoid(logit)` against `label`.
    pub fn bce_with_logits(&mut self, logit: NodeId, label: f64) -> Result<NodeId> {
        let x = match self.nodes[logit].value.as_slice() {
            [x] => *x,
            v => return shape_err(format!("bce expects a scalar logit, got length {}", v.len())),
        };
        let loss = x.max(0.0) - x * label + (-x.abs()).exp().ln_1p();
        Ok(self.push(vec![loss], Op::BceWithLogits { logit, label }))
    }

    /// `KL(N(mu, sigma^2) || N(0, I)) = 0.5 * sum(mu^2 + sigma^2 - 1 - ln sigma^2)`.
    pub fn gaussian_kl(&mut self, mu: NodeId, log_sigma: NodeId) -> Result<NodeId> {
        self.binary(mu, log_sigma, "gaussian_kl")?;
        let kl = self.nodes[mu]
            .value
            .iter()
            .zip(&self.nodes[log_sigma].value)
            .map(|(m, ls)| m * m + (2.0 * ls).exp() - 1.0 - 2.0 * ls)
            .sum::<f64>()
            * 0.5;
        Ok(self.push(vec![kl], Op::GaussianKl { mu, log_sigma }))
    }

    /// Negative log-likelihood of `target` under a diagonal Gaussian mixture
    /// given by unnormalized `logits` (K), means (K*d) and log-stddevs (K*d).
    pub fn mdn_nll(&mut self, logits: NodeId, mu: NodeId, log_sigma: NodeId, target: &[f64]) -> Result<NodeId> {
        let k = self.nodes[logits].value.len();
        let d = target.len();
        if k == 0 || self.nodes[mu].value.len() != k * d || self.nodes[log_sigma].value.len() != k * d {
            return shape_err(format!(
                "mdn_nll: K={k}, d={d}, means {}, log-stddevs {}",
                self.nodes[mu].value.len(),
                self.nodes[log_sigma].value.len()
            ));
        }
        let comps = mdn_components(&self.nodes[logits].value, &self.nodes[mu].value, &self.nodes[log_sigma].value, target);
        let nll = -log_sum_exp(&comps);
        Ok(self.push(vec![nll], Op::MdnNll { logits, mu, log_sigma, target: target.to_vec() }))
    }

    /// Back-propagates from scalar `root` with unit seed.
    pub fn backward(&self, root: NodeId, store: &mut ParamStore) -> Result<()> {
        self.backward_scaled(root, 1.0, store)
    }

    /// Back-propagates `scale * d(root)/d(params)`, accumulating into `store`.
    pub fn backward_scaled(&self, root: NodeId, scale: f64, store: &mut ParamStore) -> Result<()> {
        if self.nodes.is_empty() {
            return Err(Error::State("backward called before any forward pass was recorded".into()));
        }
        if root >= self.nodes.len() {
            return Err(Error::State(format!("node {root} was not recorded on this tape")));
        }
        if self.nodes[root].value.len() != 1 {
            return Err(Error::Domain("backward root must be a scalar".into()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; root + 1];
        grads[root] = Some(vec![scale]);

        fn acc(grads: &mut [Option<Vec<f64>>], id: NodeId, len: usize) -> &mut Vec<f64> {
            grads[id].get_or_insert_with(|| vec![0.0; len])
        }

        for id in (0..=root).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &self.nodes[id];
            match &node.op {
                Op::Leaf => {}
                Op::Param(p) => {
                    for (pg, gi) in store.get_mut(*p).grad.iter_mut().zip(&g) {
                        *pg += gi;
                    }
                }
                Op::Affine { w, b, x } => {
                    let xv = &self.nodes[*x].value;
                    let cols = xv.len();
                    {
                        let wt = store.get(*w);
                        let gx = acc(&mut grads, *x, cols);
                        for (r, gr) in g.iter().enumerate() {
                            if *gr == 0.0 {
                                continue;
                            }
                            let row = &wt.values[r * cols..(r + 1) * cols];
                            for (gxi, wi) in gx.iter_mut().zip(row) {
                                *gxi += gr * wi;
                            }
                        }
                    }
                    let wt = store.get_mut(*w);
                    for (r, gr) in g.iter().enumerate() {
                        if *gr == 0.0 {
                            continue;
                        }
                        let row = &mut wt.grad[r * cols..(r + 1) * cols];
                        for (gw, xi) in row.iter_mut().zip(xv) {
                            *gw += gr * xi;
                        }
                    }
                    if let Some(b) = b {
                        for (gb, gr) in store.get_mut(*b).grad.iter_mut().zip(&g) {
                            *gb += gr;
                        }
                    }
                }
                Op::Add(a, b) => {
                    for (t, sign) in [(*a, 1.0), (*b, 1.0)] {
                        let ga = acc(&mut grads, t, g.len());
                        ga.iter_mut().zip(&g).for_each(|(x, y)| *x += sign * y);
                    }
                }
                Op::Sub(a, b) => {
                    for (t, sign) in [(*a, 1.0), (*b, -1.0)] {
                        let ga = acc(&mut grads, t, g.len());
                        ga.iter_mut().zip(&g).for_each(|(x, y)| *x += sign * y);
                    }
                }
                Op::Mul(a, b) => {
                    let (va, vb) = (&self.nodes[*a].value, &self.nodes[*b].value);
                    let ga: Vec<f64> = g.iter().zip(vb).map(|(x, y)| x * y).collect();
                    let gb: Vec<f64> = g.iter().zip(va).map(|(x, y)| x * y).collect();
                    acc(&mut grads, *a, g.len()).iter_mut().zip(&ga).for_each(|(x, y)| *x += y);
                    acc(&mut grads, *b, g.len()).iter_mut().zip(&gb).for_each(|(x, y)| *x += y);
                }
                Op::Scale(a, f) => {
                    acc(&mut grads, *a, g.len()).iter_mut().zip(&g).for_each(|(x, y)| *x += f * y);
                }
                Op::Act(a, act) => {
                    let ga = acc(&mut grads, *a, g.len());
                    for ((x, gi), y) in ga.iter_mut().zip(&g).zip(&node.value) {
                        *x += gi * act.derivative_from_output(*y);
                    }
                }
                Op::Exp(a) => {
                    let ga = acc(&mut grads, *a, g.len());
                    for ((x, gi), y) in ga.iter_mut().zip(&g).zip(&node.value) {
                        *x += gi * y;
                    }
                }
                Op::Concat(parts) => {
                    let mut off = 0;
                    for p in parts {
                        let n = self.nodes[*p].value.len();
                        acc(&mut grads, *p, n).iter_mut().zip(&g[off..off + n]).for_each(|(x, y)| *x += y);
                        off += n;
                    }
                }
                Op::Slice { x, start } => {
                    let n = self.nodes[*x].value.len();
                    acc(&mut grads, *x, n)[*start..*start + g.len()].iter_mut().zip(&g).for_each(|(a, b)| *a += b);
                }
                Op::Sum(x) => {
                    let n = self.nodes[*x].value.len();
                    acc(&mut grads, *x, n).iter_mut().for_each(|a| *a += g[0]);
                }
                Op::Mean(x) => {
                    let n = self.nodes[*x].value.len();
                    let s = g[0] / n.max(1) as f64;
                    acc(&mut grads, *x, n).iter_mut().for_each(|a| *a += s);
                }
                Op::Mse { pred, target } => {
                    let p = &self.nodes[*pred].value;
                    let n = p.len() as f64;
                    let gp = acc(&mut grads, *pred, p.len());
                    for ((x, pi), ti) in gp.iter_mut().zip(p).zip(target) {
                        *x += g[0] * 2.0 * (pi - ti) / n;
                    }
                }
                Op::BceWithLogits { logit, label } => {
                    let x = self.nodes[*logit].value[0];
                    acc(&mut grads, *logit, 1)[0] += g[0] * (sigmoid(x) - label);
                }
                Op::GaussianKl { mu, log_sigma } => {
                    let (m, ls) = (&self.nodes[*mu].value, &self.nodes[*log_sigma].value);
                    let gm: Vec<f64> = m.iter().map(|v| g[0] * v).collect();
                    let gls: Vec<f64> = ls.iter().map(|v| g[0] * ((2.0 * v).exp() - 1.0)).collect();
                    acc(&mut grads, *mu, m.len()).iter_mut().zip(&gm).for_each(|(a, b)| *a += b);
                    acc(&mut grads, *log_sigma, ls.len()).iter_mut().zip(&gls).for_each(|(a, b)| *a += b);
                }
                Op::MdnNll { logits, mu, log_sigma, target } => {
                    let lv = &self.nodes[*logits].value;
                    let mv = &self.nodes[*mu].value;
                    let sv = &self.nodes[*log_sigma].value;
                    let k = lv.len();
                    let d = target.len();
                    let comps = mdn_components(lv, mv, sv, target);
                    let lse_c = log_sum_exp(&comps);
                    let lse_l = log_sum_exp(lv);
                    let mut gl = vec![0.0; k];
                    let mut gm = vec![0.0; k * d];
                    let mut gs = vec![0.0; k * d];
                    for c in 0..k {
                        let resp = (comps[c] - lse_c).exp();
                        let prior = (lv[c] - lse_l).exp();
                        gl[c] = g[0] * (prior - resp);
                        for j in 0..d {
                            let i = c * d + j;
                            let inv_var = (-2.0 * sv[i]).exp();
                            let diff = target[j] - mv[i];
                            gm[i] = -g[0] * resp * diff * inv_var;
                            gs[i] = g[0] * resp * (1.0 - diff * diff * inv_var);
                        }
                    }
                    acc(&mut grads, *logits, k).iter_mut().zip(&gl).for_each(|(a, b)| *a += b);
                    acc(&mut grads, *mu, k * d).iter_mut().zip(&gm).for_each(|(a, b)| *a += b);
                    acc(&mut grads, *log_sigma, k * d).iter_mut().zip(&gs).for_each(|(a, b)| *a += b);
                }
            }
        }
        Ok(())
    }
}

/// Per-component joint log-density `ln pi_k + sum_j ln N(t_j; mu_kj, sigma_kj)`
/// with `pi = softmax(logits)` and `sigma = exp(log_sigma)`.
fn mdn_components(logits: &[f64], mu: &[f64], log_sigma: &[f64], target: &[f64]) -> Vec<f64> {
    let d = target.len();
    let lse = log_sum_exp(logits);
    logits
        .iter()
        .enumerate()
        .map(|(c, l)| {
            let mut s = l - lse;
            for j in 0..d {
                let i = c * d + j;
                let z = (target[j] - mu[i]) * (-log_sigma[i]).exp();
                s += -0.5 * z * z - log_sigma[i] - HALF_LN_2PI;
            }
            s
        })
        .collect()
}
