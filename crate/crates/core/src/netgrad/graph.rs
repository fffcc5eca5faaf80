//! Tape of coarse differentiable operations and its reverse sweep.

use std::collections::hash_map::DefaultHasher;
use std::collections::HashMap;
use std::hash::{Hash, Hasher};

use super::{ParameterStore, Tensor};
use crate::error::{Error, Result};

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;
/// Floor applied to variances before the square root in statistics pooling.
pub const VAR_FLOOR: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Var(usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Debug)]
struct AamCache {
    labels: Vec<usize>,
    scale: f64,
    unit_emb: Vec<f64>,
    emb_norms: Vec<f64>,
    unit_w: Vec<f64>,
    w_norms: Vec<f64>,
    probs: Vec<f64>,
    dphi: Vec<f64>,
}

#[derive(Debug)]
enum Op {
    Input,
    Param,
    Conv1d { x: Var, w: Var, b: Option<Var>, dilation: usize },
    Relu(Var),
    Sigmoid(Var),
    Tanh(Var),
    Add(Var, Var),
    Mul(Var, Var),
    ScaleChannels { x: Var, s: Var },
    MeanTime(Var),
    BroadcastTime(Var),
    Linear { x: Var, w: Var, b: Option<Var> },
    BatchNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<f64>, inv_std: Vec<f64>, train: bool },
    Concat(Vec<Var>),
    Slice { x: Var, start: usize },
    SoftmaxTime(Var),
    WeightedStats { x: Var, w: Var, mean: Vec<f64>, std: Vec<f64>, floored: Vec<bool> },
    UnitDirection { x: Var, eps: f64, norms: Vec<f64> },
    Reject { m: Var, n: Var },
    Aam { emb: Var, w: Var, cache: AamCache },
    Sum(Var),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
}

/// Batch statistics observed by a train-mode batchnorm, waiting to be folded into running stats.
#[derive(Debug, Clone)]
pub struct BnUpdate {
    pub prefix: String,
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

/// Records a forward computation so gradients can be swept backwards through it.
#[derive(Debug)]
pub struct Graph {
    nodes: Vec<Node>,
    params: HashMap<String, Var>,
    mode: Mode,
    bn_updates: Vec<BnUpdate>,
    branches: Option<DefaultHasher>,
}

/// Gradients of one backward sweep, indexed by variable.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    params: Vec<(String, Var)>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Gradient of the parameter leaf named `name`, if it took part in the graph.
    pub fn param(&self, name: &str) -> Option<&Tensor> {
        self.params.iter().find(|(n, _)| n == name).and_then(|(_, v)| self.get(*v))
    }

    /// Adds every parameter gradient into the store's slots.
    pub fn deposit(&self, store: &mut ParameterStore) -> Result<()> {
        for (name, var) in &self.params {
            if let Some(g) = self.get(*var) {
                store.accumulate(name, g)?;
            }
        }
        Ok(())
    }
}

fn shape_err<T>(msg: String) -> Result<T> {
    Err(Error::ShapeMismatch(msg))
}

/// Target logit (before scaling) under an additive angular margin and its derivative.
///
/// Returns `(phi, dphi/dcos, guarded)`; outside the valid angular range the easy-margin guard
/// `cos - m * sin(m)` is used.
pub fn margin_logit(cos: f64, margin: f64) -> (f64, f64, bool) {
    let cos = cos.clamp(-1.0, 1.0);
    if cos > (std::f64::consts::PI - margin).cos() {
        let sin = (1.0 - cos * cos).max(0.0).sqrt();
        let d = if sin > 1e-12 { margin.cos() + cos * margin.sin() / sin } else { margin.cos() };
        (cos * margin.cos() - sin * margin.sin(), d, false)
    } else {
        (cos - margin * margin.sin(), 1.0, true)
    }
}

impl Graph {
    pub fn new(mode: Mode) -> Self {
        Self { nodes: Vec::new(), params: HashMap::new(), mode, bn_updates: Vec::new(), branches: None }
    }

    /// Hash every data-dependent branch (ReLU signs, floors, margin guards) taken in the forward.
    pub fn track_branches(mut self) -> Self {
        self.branches = Some(DefaultHasher::new());
        self
    }

    pub fn branch_signature(&self) -> u64 {
        self.branches.as_ref().map_or(0, |h| h.finish())
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn bn_updates(&self) -> &[BnUpdate] {
        &self.bn_updates
    }

    /// Folds the recorded batch statistics into the store's running buffers.
    pub fn commit_running_stats(&self, store: &mut ParameterStore) -> Result<()> {
        for u in &self.bn_updates {
            let mean = store.value_mut(&format!("{}.running_mean", u.prefix))?;
            for (r, &m) in mean.data_mut().iter_mut().zip(&u.mean) {
                *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * m;
            }
            let var = store.value_mut(&format!("{}.running_var", u.prefix))?;
            for (r, &v) in var.data_mut().iter_mut().zip(&u.var) {
                *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * v;
            }
        }
        Ok(())
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    fn note_branch(&mut self, bits: impl Iterator<Item = bool>) {
        if let Some(h) = self.branches.as_mut() {
            for b in bits {
                b.hash(h);
            }
        }
    }

    pub fn input(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Input)
    }

    /// The store entry `name` as a graph leaf. Repeated requests share one node.
    pub fn param(&mut self, store: &ParameterStore, name: &str) -> Result<Var> {
        if let Some(&v) = self.params.get(name) {
            return Ok(v);
        }
        let value = store.value(name)?.clone();
        let v = self.push(value, Op::Param);
        self.params.insert(name.to_string(), v);
        Ok(v)
    }

    /// Length-preserving dilated convolution: `x [B, Cin, T]`, `w [Cout, Cin, k]`, `b [Cout]`.
    pub fn conv1d(&mut self, x: Var, w: Var, b: Option<Var>, dilation: usize) -> Result<Var> {
        let (xs, ws) = (self.value(x), self.value(w));
        if xs.rank() != 3 || ws.rank() != 3 || xs.dim(1) != ws.dim(1) || ws.dim(2) % 2 == 0 || dilation == 0 {
            return shape_err(format!("conv1d input {:?} with weight {:?}, dilation {dilation}", xs.shape(), ws.shape()));
        }
        if let Some(b) = b {
            if self.value(b).shape() != [ws.dim(0)] {
                return shape_err(format!("conv1d bias {:?} for {} outputs", self.shape(b), ws.dim(0)));
            }
        }
        let out = conv1d_values(xs, ws, b.map(|b| self.value(b)), dilation);
        Ok(self.push(out, Op::Conv1d { x, w, b, dilation }))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let mut out = self.value(x).clone();
        out.data_mut().iter_mut().for_each(|v| *v = v.max(0.0));
        if self.branches.is_some() {
            let bits: Vec<bool> = self.value(x).data().iter().map(|&v| v > 0.0).collect();
            self.note_branch(bits.into_iter());
        }
        self.push(out, Op::Relu(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let mut out = self.value(x).clone();
        out.data_mut().iter_mut().for_each(|v| *v = 1.0 / (1.0 + (-*v).exp()));
        self.push(out, Op::Sigmoid(x))
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let mut out = self.value(x).clone();
        out.data_mut().iter_mut().for_each(|v| *v = v.tanh());
        self.push(out, Op::Tanh(x))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return shape_err(format!("add {:?} + {:?}", self.shape(a), self.shape(b)));
        }
        let mut out = self.value(a).clone();
        out.add_assign(self.value(b));
        Ok(self.push(out, Op::Add(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return shape_err(format!("mul {:?} * {:?}", self.shape(a), self.shape(b)));
        }
        let mut out = self.value(a).clone();
        for (o, &v) in out.data_mut().iter_mut().zip(self.value(b).data()) {
            *o *= v;
        }
        Ok(self.push(out, Op::Mul(a, b)))
    }

    /// `y[b, c, t] = s[b, c] * x[b, c, t]`.
    pub fn scale_channels(&mut self, x: Var, s: Var) -> Result<Var> {
        let (bs, c, t) = self.value(x).bct();
        if self.value(x).rank() != 3 || self.shape(s) != [bs, c] {
            return shape_err(format!("scale_channels {:?} by {:?}", self.shape(x), self.shape(s)));
        }
        let mut out = self.value(x).clone();
        let sv = self.value(s).data();
        for (row, &k) in out.data_mut().chunks_mut(t).zip(sv) {
            row.iter_mut().for_each(|v| *v *= k);
        }
        Ok(self.push(out, Op::ScaleChannels { x, s }))
    }

    /// Mean over frames: `[B, C, T] -> [B, C]`.
    pub fn mean_time(&mut self, x: Var) -> Result<Var> {
        let xs = self.value(x);
        if xs.rank() != 3 {
            return shape_err(format!("mean_time on {:?}", xs.shape()));
        }
        let (bs, c, t) = xs.bct();
        let data = xs.data().chunks(t).map(|row| row.iter().sum::<f64>() / t as f64).collect();
        let out = Tensor::new(vec![bs, c], data)?;
        Ok(self.push(out, Op::MeanTime(x)))
    }

    /// Repeats `[B, C]` along a new frame axis of length `frames`.
    pub fn broadcast_time(&mut self, x: Var, frames: usize) -> Result<Var> {
        let xs = self.value(x);
        if xs.rank() != 2 || frames == 0 {
            return shape_err(format!("broadcast_time on {:?} to {frames} frames", xs.shape()));
        }
        let (bs, c) = (xs.dim(0), xs.dim(1));
        let data = xs.data().iter().flat_map(|&v| std::iter::repeat_n(v, frames)).collect();
        let out = Tensor::new(vec![bs, c, frames], data)?;
        Ok(self.push(out, Op::BroadcastTime(x)))
    }

    /// `y = x W^T + b` for `x [B, In]`, `w [Out, In]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (xs, ws) = (self.value(x), self.value(w));
        if xs.rank() != 2 || ws.rank() != 2 || xs.dim(1) != ws.dim(1) {
            return shape_err(format!("linear {:?} with weight {:?}", xs.shape(), ws.shape()));
        }
        let (bs, n_in, n_out) = (xs.dim(0), xs.dim(1), ws.dim(0));
        let mut data = vec![0.0; bs * n_out];
        for bi in 0..bs {
            let xr = &xs.data()[bi * n_in..(bi + 1) * n_in];
            for o in 0..n_out {
                let wr = &ws.data()[o * n_in..(o + 1) * n_in];
                data[bi * n_out + o] = xr.iter().zip(wr).map(|(a, b)| a * b).sum();
            }
        }
        if let Some(b) = b {
            let bv = self.value(b);
            if bv.shape() != [n_out] {
                return shape_err(format!("linear bias {:?} for {n_out} outputs", bv.shape()));
            }
            for row in data.chunks_mut(n_out) {
                row.iter_mut().zip(bv.data()).for_each(|(v, b)| *v += b);
            }
        }
        let out = Tensor::new(vec![bs, n_out], data)?;
        Ok(self.push(out, Op::Linear { x, w, b }))
    }

    /// Per-channel standardization over batch and frames, then `gamma * xhat + beta`.
    ///
    /// In train mode the batch statistics are used and queued for the running buffers under
    /// `prefix`; in eval mode the running buffers are read from the store.
    pub fn batchnorm(&mut self, store: &ParameterStore, prefix: &str, x: Var) -> Result<Var> {
        let gamma = self.param(store, &format!("{prefix}.gamma"))?;
        let beta = self.param(store, &format!("{prefix}.beta"))?;
        let xs = self.value(x);
        let (bs, c, t) = xs.bct();
        if !(xs.rank() == 2 || xs.rank() == 3) || self.shape(gamma) != [c] || self.shape(beta) != [c] {
            return shape_err(format!("batchnorm {prefix} on {:?}", xs.shape()));
        }
        let train = self.mode == Mode::Train;
        let (mean, var) = if train {
            if bs < 2 {
                return Err(Error::BatchTooSmall(bs));
            }
            let n = (bs * t) as f64;
            let mut mean = vec![0.0; c];
            let mut var = vec![0.0; c];
            for bi in 0..bs {
                for ch in 0..c {
                    let row = &xs.data()[(bi * c + ch) * t..(bi * c + ch + 1) * t];
                    mean[ch] += row.iter().sum::<f64>();
                }
            }
            mean.iter_mut().for_each(|m| *m /= n);
            for bi in 0..bs {
                for ch in 0..c {
                    let row = &xs.data()[(bi * c + ch) * t..(bi * c + ch + 1) * t];
                    var[ch] += row.iter().map(|v| (v - mean[ch]).powi(2)).sum::<f64>();
                }
            }
            var.iter_mut().for_each(|v| *v /= n);
            self.bn_updates.push(BnUpdate { prefix: prefix.to_string(), mean: mean.clone(), var: var.clone() });
            (mean, var)
        } else {
            let mean = store.value(&format!("{prefix}.running_mean"))?.data().to_vec();
            let var = store.value(&format!("{prefix}.running_var"))?.data().to_vec();
            (mean, var)
        };
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + BN_EPS).sqrt()).collect();
        let xs = self.value(x);
        let mut xhat = xs.data().to_vec();
        let mut out = xs.clone();
        let (g, b) = (self.value(gamma).data(), self.value(beta).data());
        for (idx, (h, o)) in xhat.iter_mut().zip(out.data_mut()).enumerate() {
            let ch = (idx / t) % c;
            *h = (*h - mean[ch]) * inv_std[ch];
            *o = g[ch] * *h + b[ch];
        }
        Ok(self.push(out, Op::BatchNorm { x, gamma, beta, xhat, inv_std, train }))
    }

    /// Concatenation along the channel axis.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let first = self.value(parts[0]).bct();
        let rank = self.value(parts[0]).rank();
        let mut total = 0;
        for &p in parts {
            let (bs, c, t) = self.value(p).bct();
            if bs != first.0 || t != first.2 || self.value(p).rank() != rank {
                return shape_err(format!("concat {:?} with {:?}", self.shape(parts[0]), self.shape(p)));
            }
            total += c;
        }
        let (bs, _, t) = first;
        let mut data = Vec::with_capacity(bs * total * t);
        for bi in 0..bs {
            for &p in parts {
                let (_, c, _) = self.value(p).bct();
                data.extend_from_slice(&self.value(p).data()[bi * c * t..(bi + 1) * c * t]);
            }
        }
        let shape = if rank == 3 { vec![bs, total, t] } else { vec![bs, total] };
        let out = Tensor::new(shape, data)?;
        Ok(self.push(out, Op::Concat(parts.to_vec())))
    }

    /// Channels `start..start + len`.
    pub fn slice_channels(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let xs = self.value(x);
        let (bs, c, t) = xs.bct();
        if start + len > c || len == 0 {
            return shape_err(format!("slice {start}..{} of {c} channels", start + len));
        }
        let mut data = Vec::with_capacity(bs * len * t);
        for bi in 0..bs {
            data.extend_from_slice(&xs.data()[(bi * c + start) * t..(bi * c + start + len) * t]);
        }
        let mut shape = xs.shape().to_vec();
        shape[1] = len;
        let out = Tensor::new(shape, data)?;
        Ok(self.push(out, Op::Slice { x, start }))
    }

    /// Softmax over frames, separately for every (batch, channel) row.
    pub fn softmax_time(&mut self, x: Var) -> Result<Var> {
        let xs = self.value(x);
        if xs.rank() != 3 {
            return shape_err(format!("softmax_time on {:?}", xs.shape()));
        }
        let t = xs.dim(2);
        let mut out = xs.clone();
        for row in out.data_mut().chunks_mut(t) {
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            row.iter_mut().for_each(|v| *v = (*v - max).exp());
            let z: f64 = row.iter().sum();
            row.iter_mut().for_each(|v| *v /= z);
        }
        Ok(self.push(out, Op::SoftmaxTime(x)))
    }

    /// Weighted mean and floored standard deviation over frames: `[B, C, T] -> [B, 2C]`.
    pub fn weighted_stats(&mut self, x: Var, w: Var) -> Result<Var> {
        if self.shape(x) != self.shape(w) || self.value(x).rank() != 3 {
            return shape_err(format!("weighted_stats {:?} with weights {:?}", self.shape(x), self.shape(w)));
        }
        let (bs, c, t) = self.value(x).bct();
        let (xv, wv) = (self.value(x).data(), self.value(w).data());
        let mut mean = vec![0.0; bs * c];
        let mut std = vec![0.0; bs * c];
        let mut floored = vec![false; bs * c];
        for r in 0..bs * c {
            let (xr, wr) = (&xv[r * t..(r + 1) * t], &wv[r * t..(r + 1) * t]);
            let mu: f64 = xr.iter().zip(wr).map(|(x, w)| w * x).sum();
            let sq: f64 = xr.iter().zip(wr).map(|(x, w)| w * x * x).sum();
            let var = sq - mu * mu;
            floored[r] = var <= VAR_FLOOR;
            mean[r] = mu;
            std[r] = var.max(VAR_FLOOR).sqrt();
        }
        let mut data = Vec::with_capacity(bs * 2 * c);
        for bi in 0..bs {
            data.extend_from_slice(&mean[bi * c..(bi + 1) * c]);
            data.extend_from_slice(&std[bi * c..(bi + 1) * c]);
        }
        self.note_branch(floored.clone().into_iter());
        let out = Tensor::new(vec![bs, 2 * c], data)?;
        Ok(self.push(out, Op::WeightedStats { x, w, mean, std, floored }))
    }

    /// `x / (|x| + eps)` per batch row of a `[B, C]` tensor.
    pub fn unit_direction(&mut self, x: Var, eps: f64) -> Result<Var> {
        let xs = self.value(x);
        if xs.rank() != 2 {
            return shape_err(format!("unit_direction on {:?}", xs.shape()));
        }
        let c = xs.dim(1);
        let mut out = xs.clone();
        let mut norms = Vec::new();
        for row in out.data_mut().chunks_mut(c) {
            let r = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            norms.push(r);
            row.iter_mut().for_each(|v| *v /= r + eps);
        }
        Ok(self.push(out, Op::UnitDirection { x, eps, norms }))
    }

    /// Removes from every frame of `m [B, C, T]` its component along `n [B, C]`:
    /// `y_t = m_t - n (n . m_t)`.
    pub fn reject(&mut self, m: Var, n: Var) -> Result<Var> {
        let (bs, c, t) = self.value(m).bct();
        if self.value(m).rank() != 3 || self.shape(n) != [bs, c] {
            return shape_err(format!("reject {:?} along {:?}", self.shape(m), self.shape(n)));
        }
        let mut out = self.value(m).clone();
        let nv = self.value(n).data();
        for bi in 0..bs {
            let nb = &nv[bi * c..(bi + 1) * c];
            let block = &mut out.data_mut()[bi * c * t..(bi + 1) * c * t];
            let mut dots = vec![0.0; t];
            for (ch, &nc) in nb.iter().enumerate() {
                for (d, &v) in dots.iter_mut().zip(&block[ch * t..(ch + 1) * t]) {
                    *d += nc * v;
                }
            }
            for (ch, &nc) in nb.iter().enumerate() {
                for (v, &d) in block[ch * t..(ch + 1) * t].iter_mut().zip(&dots) {
                    *v -= nc * d;
                }
            }
        }
        Ok(self.push(out, Op::Reject { m, n }))
    }

    /// Mean additive-angular-margin softmax cross-entropy over the batch.
    ///
    /// `emb [B, V]`, class weights `w [K, V]`, one label per row.
    pub fn aam_loss(&mut self, emb: Var, w: Var, labels: &[usize], margin: f64, scale: f64) -> Result<Var> {
        let (es, ws) = (self.value(emb), self.value(w));
        if es.rank() != 2 || ws.rank() != 2 || es.dim(1) != ws.dim(1) || labels.len() != es.dim(0) {
            return shape_err(format!(
                "aam_loss embeddings {:?}, weights {:?}, {} labels",
                es.shape(),
                ws.shape(),
                labels.len()
            ));
        }
        let (bs, v, k) = (es.dim(0), es.dim(1), ws.dim(0));
        if let Some(&bad) = labels.iter().find(|&&y| y >= k) {
            return shape_err(format!("label {bad} for {k} classes"));
        }
        let (unit_emb, emb_norms) = unit_rows(es.data(), v)?;
        let (unit_w, w_norms) = unit_rows(ws.data(), v)?;
        let mut probs = vec![0.0; bs * k];
        let mut dphi = vec![0.0; bs];
        let mut guards = Vec::with_capacity(bs);
        let mut loss = 0.0;
        for bi in 0..bs {
            let e = &unit_emb[bi * v..(bi + 1) * v];
            let mut logits: Vec<f64> = (0..k)
                .map(|ki| e.iter().zip(&unit_w[ki * v..(ki + 1) * v]).map(|(a, b)| a * b).sum::<f64>())
                .collect();
            let y = labels[bi];
            let (phi, d, guarded) = margin_logit(logits[y], margin);
            dphi[bi] = d;
            guards.push(guarded);
            logits[y] = phi;
            logits.iter_mut().for_each(|l| *l *= scale);
            let (l, p) = softmax_cross_entropy(&logits, y);
            loss += l;
            probs[bi * k..(bi + 1) * k].copy_from_slice(&p);
        }
        self.note_branch(guards.into_iter());
        let cache = AamCache { labels: labels.to_vec(), scale, unit_emb, emb_norms, unit_w, w_norms, probs, dphi };
        Ok(self.push(Tensor::scalar(loss / bs as f64), Op::Aam { emb, w, cache }))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).sum();
        self.push(Tensor::scalar(s), Op::Sum(x))
    }

    /// Reverse sweep from a scalar output.
    pub fn backward(&self, output: Var) -> Result<Gradients> {
        if output.0 >= self.nodes.len() {
            return Err(Error::NoTrace);
        }
        if self.value(output).len() != 1 {
            return shape_err(format!("backward from non-scalar {:?}", self.shape(output)));
        }
        self.backward_with(output, Tensor::full(self.shape(output), 1.0))
    }

    /// Reverse sweep seeded with an arbitrary upstream gradient for `output`.
    pub fn backward_with(&self, output: Var, upstream: Tensor) -> Result<Gradients> {
        if output.0 >= self.nodes.len() {
            return Err(Error::NoTrace);
        }
        if upstream.shape() != self.shape(output) {
            return shape_err(format!("upstream {:?} for output {:?}", upstream.shape(), self.shape(output)));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[output.0] = Some(upstream);
        for i in (0..=output.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        let mut params: Vec<(String, Var)> = self.params.iter().map(|(n, v)| (n.clone(), *v)).collect();
        params.sort();
        Ok(Gradients { grads, params })
    }

    fn backprop_node(&self, i: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let node = &self.nodes[i];
        let mut acc = |v: Var, t: Tensor| match &mut grads[v.0] {
            Some(existing) => existing.add_assign(&t),
            slot @ None => *slot = Some(t),
        };
        match &node.op {
            Op::Input | Op::Param => {}
            Op::Conv1d { x, w, b, dilation } => {
                let (dx, dw, db) = conv1d_backward(self.value(*x), self.value(*w), g, *dilation);
                acc(*x, dx);
                acc(*w, dw);
                if let Some(b) = b {
                    acc(*b, db);
                }
            }
            Op::Relu(x) => {
                let mut dx = g.clone();
                for (d, &v) in dx.data_mut().iter_mut().zip(self.value(*x).data()) {
                    if v <= 0.0 {
                        *d = 0.0;
                    }
                }
                acc(*x, dx);
            }
            Op::Sigmoid(x) => {
                let mut dx = g.clone();
                for (d, &y) in dx.data_mut().iter_mut().zip(node.value.data()) {
                    *d *= y * (1.0 - y);
                }
                acc(*x, dx);
            }
            Op::Tanh(x) => {
                let mut dx = g.clone();
                for (d, &y) in dx.data_mut().iter_mut().zip(node.value.data()) {
                    *d *= 1.0 - y * y;
                }
                acc(*x, dx);
            }
            Op::Add(a, b) => {
                acc(*a, g.clone());
                acc(*b, g.clone());
            }
            Op::Mul(a, b) => {
                let mut da = g.clone();
                da.data_mut().iter_mut().zip(self.value(*b).data()).for_each(|(d, v)| *d *= v);
                let mut db = g.clone();
                db.data_mut().iter_mut().zip(self.value(*a).data()).for_each(|(d, v)| *d *= v);
                acc(*a, da);
                acc(*b, db);
            }
            Op::ScaleChannels { x, s } => {
                let t = self.value(*x).dim(2);
                let sv = self.value(*s).data();
                let mut dx = g.clone();
                for (row, &k) in dx.data_mut().chunks_mut(t).zip(sv) {
                    row.iter_mut().for_each(|v| *v *= k);
                }
                let ds: Vec<f64> = g
                    .data()
                    .chunks(t)
                    .zip(self.value(*x).data().chunks(t))
                    .map(|(gr, xr)| gr.iter().zip(xr).map(|(a, b)| a * b).sum())
                    .collect();
                acc(*x, dx);
                acc(*s, Tensor::new(self.shape(*s).to_vec(), ds).expect("shape"));
            }
            Op::MeanTime(x) => {
                let t = self.value(*x).dim(2);
                let data = g.data().iter().flat_map(|&v| std::iter::repeat_n(v / t as f64, t)).collect();
                acc(*x, Tensor::new(self.shape(*x).to_vec(), data).expect("shape"));
            }
            Op::BroadcastTime(x) => {
                let t = node.value.dim(2);
                let data = g.data().chunks(t).map(|r| r.iter().sum()).collect();
                acc(*x, Tensor::new(self.shape(*x).to_vec(), data).expect("shape"));
            }
            Op::Linear { x, w, b } => {
                let (xs, ws) = (self.value(*x), self.value(*w));
                let (bs, n_in, n_out) = (xs.dim(0), xs.dim(1), ws.dim(0));
                let mut dx = Tensor::zeros(xs.shape());
                let mut dw = Tensor::zeros(ws.shape());
                for bi in 0..bs {
                    let gr = &g.data()[bi * n_out..(bi + 1) * n_out];
                    let xr = &xs.data()[bi * n_in..(bi + 1) * n_in];
                    for (o, &go) in gr.iter().enumerate() {
                        let wr = &ws.data()[o * n_in..(o + 1) * n_in];
                        let dxr = &mut dx.data_mut()[bi * n_in..(bi + 1) * n_in];
                        dxr.iter_mut().zip(wr).for_each(|(d, w)| *d += go * w);
                        let dwr = &mut dw.data_mut()[o * n_in..(o + 1) * n_in];
                        dwr.iter_mut().zip(xr).for_each(|(d, x)| *d += go * x);
                    }
                }
                acc(*x, dx);
                acc(*w, dw);
                if let Some(b) = b {
                    let mut db = vec![0.0; n_out];
                    for row in g.data().chunks(n_out) {
                        db.iter_mut().zip(row).for_each(|(d, v)| *d += v);
                    }
                    acc(*b, Tensor::new(vec![n_out], db).expect("shape"));
                }
            }
            Op::BatchNorm { x, gamma, beta, xhat, inv_std, train } => {
                let (bs, c, t) = node.value.bct();
                let gv = self.value(*gamma).data();
                let mut dgamma = vec![0.0; c];
                let mut dbeta = vec![0.0; c];
                for (idx, (&gi, &h)) in g.data().iter().zip(xhat).enumerate() {
                    let ch = (idx / t) % c;
                    dgamma[ch] += gi * h;
                    dbeta[ch] += gi;
                }
                let mut dx = g.clone();
                if *train {
                    let n = (bs * t) as f64;
                    for (idx, d) in dx.data_mut().iter_mut().enumerate() {
                        let ch = (idx / t) % c;
                        // dgamma = sum(g * xhat) and dbeta = sum(g) give the batch-stat terms
                        *d = gv[ch] * inv_std[ch] * (*d - dbeta[ch] / n - xhat[idx] * dgamma[ch] / n);
                    }
                } else {
                    for (idx, d) in dx.data_mut().iter_mut().enumerate() {
                        let ch = (idx / t) % c;
                        *d *= gv[ch] * inv_std[ch];
                    }
                }
                acc(*x, dx);
                acc(*gamma, Tensor::new(vec![c], dgamma).expect("shape"));
                acc(*beta, Tensor::new(vec![c], dbeta).expect("shape"));
            }
            Op::Concat(parts) => {
                let (bs, total, t) = node.value.bct();
                let mut offset = 0;
                for &p in parts {
                    let (_, c, _) = self.value(p).bct();
                    let mut data = Vec::with_capacity(bs * c * t);
                    for bi in 0..bs {
                        let base = (bi * total + offset) * t;
                        data.extend_from_slice(&g.data()[base..base + c * t]);
                    }
                    acc(p, Tensor::new(self.shape(p).to_vec(), data).expect("shape"));
                    offset += c;
                }
            }
            Op::Slice { x, start } => {
                let (bs, c, t) = self.value(*x).bct();
                let len = node.value.bct().1;
                let mut dx = Tensor::zeros(self.shape(*x));
                for bi in 0..bs {
                    let dst = (bi * c + start) * t;
                    dx.data_mut()[dst..dst + len * t].copy_from_slice(&g.data()[bi * len * t..(bi + 1) * len * t]);
                }
                acc(*x, dx);
            }
            Op::SoftmaxTime(x) => {
                let t = node.value.dim(2);
                let mut dx = g.clone();
                for (dr, ar) in dx.data_mut().chunks_mut(t).zip(node.value.data().chunks(t)) {
                    let dot: f64 = dr.iter().zip(ar).map(|(d, a)| d * a).sum();
                    dr.iter_mut().zip(ar).for_each(|(d, a)| *d = a * (*d - dot));
                }
                acc(*x, dx);
            }
            Op::WeightedStats { x, w, mean, std, floored } => {
                let (bs, c, t) = self.value(*x).bct();
                let (xv, wv) = (self.value(*x).data(), self.value(*w).data());
                let mut dx = Tensor::zeros(self.shape(*x));
                let mut dw = Tensor::zeros(self.shape(*w));
                for bi in 0..bs {
                    for ch in 0..c {
                        let r = bi * c + ch;
                        let gmu = g.data()[bi * 2 * c + ch];
                        let gsd = g.data()[bi * 2 * c + c + ch];
                        let gvar = if floored[r] { 0.0 } else { gsd / (2.0 * std[r]) };
                        let mu = mean[r];
                        let span = r * t..(r + 1) * t;
                        let (xr, wr) = (&xv[span.clone()], &wv[span.clone()]);
                        let dxr = &mut dx.data_mut()[span.clone()];
                        for ((d, &xi), &wi) in dxr.iter_mut().zip(xr).zip(wr) {
                            *d = gmu * wi + gvar * 2.0 * wi * (xi - mu);
                        }
                        let dwr = &mut dw.data_mut()[span];
                        for (d, &xi) in dwr.iter_mut().zip(xr) {
                            *d = gmu * xi + gvar * (xi * xi - 2.0 * mu * xi);
                        }
                    }
                }
                acc(*x, dx);
                acc(*w, dw);
            }
            Op::UnitDirection { x, eps, norms } => {
                let c = node.value.dim(1);
                let xv = self.value(*x).data();
                let mut dx = g.clone();
                for ((dr, xr), &r) in dx.data_mut().chunks_mut(c).zip(xv.chunks(c)).zip(norms) {
                    let denom = r + eps;
                    let dot: f64 = dr.iter().zip(xr).map(|(d, x)| d * x).sum();
                    let coef = if r > 0.0 { dot / (r * denom * denom) } else { 0.0 };
                    dr.iter_mut().zip(xr).for_each(|(d, x)| *d = *d / denom - coef * x);
                }
                acc(*x, dx);
            }
            Op::Reject { m, n } => {
                let (bs, c, t) = self.value(*m).bct();
                let (mv, nv) = (self.value(*m).data(), self.value(*n).data());
                let mut dm = g.clone();
                let mut dn = vec![0.0; bs * c];
                for bi in 0..bs {
                    let nb = &nv[bi * c..(bi + 1) * c];
                    let gb = &g.data()[bi * c * t..(bi + 1) * c * t];
                    let mb = &mv[bi * c * t..(bi + 1) * c * t];
                    let mut n_dot_g = vec![0.0; t];
                    let mut n_dot_m = vec![0.0; t];
                    for (ch, &nc) in nb.iter().enumerate() {
                        for tt in 0..t {
                            n_dot_g[tt] += nc * gb[ch * t + tt];
                            n_dot_m[tt] += nc * mb[ch * t + tt];
                        }
                    }
                    let dmb = &mut dm.data_mut()[bi * c * t..(bi + 1) * c * t];
                    for (ch, &nc) in nb.iter().enumerate() {
                        let mut acc_n = 0.0;
                        for tt in 0..t {
                            dmb[ch * t + tt] -= nc * n_dot_g[tt];
                            acc_n += gb[ch * t + tt] * n_dot_m[tt] + mb[ch * t + tt] * n_dot_g[tt];
                        }
                        dn[bi * c + ch] = -acc_n;
                    }
                }
                acc(*m, dm);
                acc(*n, Tensor::new(self.shape(*n).to_vec(), dn).expect("shape"));
            }
            Op::Aam { emb, w, cache } => {
                let (bs, v) = (self.value(*emb).dim(0), self.value(*emb).dim(1));
                let k = self.value(*w).dim(0);
                let upstream = g.data()[0] / bs as f64;
                let mut demb = vec![0.0; bs * v];
                let mut dunit_w = vec![0.0; k * v];
                for bi in 0..bs {
                    let e = &cache.unit_emb[bi * v..(bi + 1) * v];
                    let y = cache.labels[bi];
                    let mut de = vec![0.0; v];
                    for ki in 0..k {
                        let p = cache.probs[bi * k + ki];
                        let dz = upstream * (p - if ki == y { 1.0 } else { 0.0 });
                        let mut dcos = cache.scale * dz;
                        if ki == y {
                            dcos *= cache.dphi[bi];
                        }
                        let wk = &cache.unit_w[ki * v..(ki + 1) * v];
                        de.iter_mut().zip(wk).for_each(|(d, w)| *d += dcos * w);
                        dunit_w[ki * v..(ki + 1) * v].iter_mut().zip(e).for_each(|(d, e)| *d += dcos * e);
                    }
                    let proj = unit_backward(&de, e, cache.emb_norms[bi]);
                    demb[bi * v..(bi + 1) * v].copy_from_slice(&proj);
                }
                let mut dw = vec![0.0; k * v];
                for ki in 0..k {
                    let span = ki * v..(ki + 1) * v;
                    let proj = unit_backward(&dunit_w[span.clone()], &cache.unit_w[span.clone()], cache.w_norms[ki]);
                    dw[span].copy_from_slice(&proj);
                }
                acc(*emb, Tensor::new(vec![bs, v], demb).expect("shape"));
                acc(*w, Tensor::new(vec![k, v], dw).expect("shape"));
            }
            Op::Sum(x) => {
                acc(*x, Tensor::full(self.shape(*x), g.data()[0]));
            }
        }
    }
}

/// Gradient of `x / |x|` given the unit vector `u` and the norm.
fn unit_backward(du: &[f64], u: &[f64], norm: f64) -> Vec<f64> {
    let dot: f64 = du.iter().zip(u).map(|(a, b)| a * b).sum();
    du.iter().zip(u).map(|(d, u)| (d - u * dot) / norm).collect()
}

fn unit_rows(data: &[f64], width: usize) -> Result<(Vec<f64>, Vec<f64>)> {
    let mut unit = data.to_vec();
    let mut norms = Vec::with_capacity(data.len() / width);
    for row in unit.chunks_mut(width) {
        let n = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        if n == 0.0 {
            return Err(Error::ZeroVector);
        }
        row.iter_mut().for_each(|v| *v /= n);
        norms.push(n);
    }
    Ok((unit, norms))
}

/// Softmax cross-entropy with max subtraction: returns `(-ln p_y, p)`. The gradient with
/// respect to the logits is `p - onehot(y)`.
pub fn softmax_cross_entropy(logits: &[f64], y: usize) -> (f64, Vec<f64>) {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
    let z: f64 = exps.iter().sum();
    let probs: Vec<f64> = exps.iter().map(|e| e / z).collect();
    let loss = z.ln() - (logits[y] - max);
    (loss, probs)
}

/// Length-preserving dilated convolution on raw tensors (`x [B, Cin, T]`, `w [Cout, Cin, k]`).
pub fn conv1d_values(x: &Tensor, w: &Tensor, b: Option<&Tensor>, dilation: usize) -> Tensor {
    let (bs, cin, t) = x.bct();
    let (cout, k) = (w.dim(0), w.dim(2));
    let pad = (dilation * (k - 1) / 2) as isize;
    let mut out = Tensor::zeros(&[bs, cout, t]);
    let (xv, wv) = (x.data(), w.data());
    for bi in 0..bs {
        for o in 0..cout {
            let row = &mut out.data_mut()[(bi * cout + o) * t..(bi * cout + o + 1) * t];
            if let Some(b) = b {
                row.iter_mut().for_each(|v| *v = b.data()[o]);
            }
            for i in 0..cin {
                let xr = &xv[(bi * cin + i) * t..(bi * cin + i + 1) * t];
                for j in 0..k {
                    let wj = wv[(o * cin + i) * k + j];
                    let off = (j * dilation) as isize - pad;
                    let (lo, hi) = valid_range(off, t);
                    if lo >= hi || wj == 0.0 {
                        continue;
                    }
                    let src = &xr[(lo as isize + off) as usize..(hi as isize + off) as usize];
                    row[lo..hi].iter_mut().zip(src).for_each(|(y, x)| *y += wj * x);
                }
            }
        }
    }
    out
}

/// Output frames `lo..hi` whose input frame `t + off` lies inside `0..t`.
fn valid_range(off: isize, t: usize) -> (usize, usize) {
    let lo = (-off).max(0) as usize;
    let hi = (t as isize - off).clamp(0, t as isize) as usize;
    (lo.min(t), hi)
}

fn conv1d_backward(x: &Tensor, w: &Tensor, g: &Tensor, dilation: usize) -> (Tensor, Tensor, Tensor) {
    let (bs, cin, t) = x.bct();
    let (cout, k) = (w.dim(0), w.dim(2));
    let pad = (dilation * (k - 1) / 2) as isize;
    let mut dx = Tensor::zeros(x.shape());
    let mut dw = Tensor::zeros(w.shape());
    let mut db = Tensor::zeros(&[cout]);
    let (xv, wv, gv) = (x.data(), w.data(), g.data());
    for bi in 0..bs {
        for o in 0..cout {
            let gr = &gv[(bi * cout + o) * t..(bi * cout + o + 1) * t];
            db.data_mut()[o] += gr.iter().sum::<f64>();
            for i in 0..cin {
                let xr = &xv[(bi * cin + i) * t..(bi * cin + i + 1) * t];
                for j in 0..k {
                    let off = (j * dilation) as isize - pad;
                    let (lo, hi) = valid_range(off, t);
                    if lo >= hi {
                        continue;
                    }
                    let (s_lo, s_hi) = ((lo as isize + off) as usize, (hi as isize + off) as usize);
                    let widx = (o * cin + i) * k + j;
                    dw.data_mut()[widx] += gr[lo..hi].iter().zip(&xr[s_lo..s_hi]).map(|(a, b)| a * b).sum::<f64>();
                    let wj = wv[widx];
                    if wj != 0.0 {
                        let dxr = &mut dx.data_mut()[(bi * cin + i) * t + s_lo..(bi * cin + i) * t + s_hi];
                        dxr.iter_mut().zip(&gr[lo..hi]).for_each(|(d, g)| *d += wj * g);
                    }
                }
            }
        }
    }
    (dx, dw, db)
}
