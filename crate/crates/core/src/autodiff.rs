//! Tape-based reverse-mode differentiation over dense arrays.
//!
//! Every forward operation appends a node to a [`Tape`]; nodes only ever
//! refer to earlier nodes, so tape order is a topological order and
//! [`Tape::backward`] is a single reverse sweep.
//!
//! The feature axis is always the last dimension. Operations that act
//! "per row" treat every leading dimension as batch, so an `N × k × D`
//! neighborhood tensor feeds straight into [`Tape::linear`].

use rand::Rng;

use crate::error::{contract, Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::tensor::Tensor;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Train/eval switch shared by batch norm, dropout and stochastic dilation.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Statistics source for [`Tape::batch_norm`].
#[derive(Clone, Copy, Debug)]
pub enum NormStats<'a> {
    /// Normalize with the statistics of the current batch.
    Batch { eps: f64 },
    /// Normalize with stored running statistics.
    Running {
        mean: &'a [f64],
        var: &'a [f64],
        eps: f64,
    },
}

/// Per-feature mean and biased variance of a batch, returned by
/// [`Tape::batch_norm`] in batch mode so the caller can update running stats.
#[derive(Clone, Debug)]
pub struct BatchMoments {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

/// Operation tag and whatever the backward rule needs from the forward pass.
#[derive(Debug)]
enum Op {
    Leaf,
    Param(ParamId),
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
        batch_stats: bool,
    },
    Relu(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Concat(Var, Var),
    GatherRows {
        x: Var,
        index: Vec<usize>,
    },
    RepeatRows {
        x: Var,
        times: usize,
    },
    MaxReduce {
        x: Var,
        k: usize,
        argmax: Vec<u32>,
    },
    SumReduce {
        x: Var,
        k: usize,
    },
    OnePlusScale {
        x: Var,
        s: Var,
    },
    Dropout {
        x: Var,
        mask: Vec<f64>,
    },
    RowNormalize {
        x: Var,
        /// Row norms; `None` where the row was left unnormalized.
        norms: Vec<Option<f64>>,
    },
    GlobalMax {
        x: Var,
        argmax: Vec<usize>,
    },
    SoftmaxCrossEntropy {
        logits: Var,
        probs: Vec<f64>,
        labels: Vec<usize>,
    },
    Sum(Var),
    WeightedSum {
        x: Var,
        weights: Vec<f64>,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Records forward operations for a single backward sweep.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

fn feat_dim(t: &Tensor) -> usize {
    t.shape().last().copied().unwrap_or(1)
}

fn with_last(shape: &[usize], last: usize) -> Vec<usize> {
    let mut s = shape.to_vec();
    match s.last_mut() {
        Some(l) => *l = last,
        None => s.push(last),
    }
    s
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        let needs_grad = match op {
            Op::Param(_) => true,
            _ => inputs.iter().any(|v| self.nodes[v.0].needs_grad),
        };
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Constant input; no gradient is tracked.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, &[])
    }

    /// Input whose gradient is wanted (used by gradient checks).
    pub fn input(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            needs_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    /// Places a copy of a stored parameter on the tape.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        self.push(store.value(id).clone(), Op::Param(id), &[])
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// Gradient of the last [`Tape::backward`] loss with respect to `v`.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].value.grad()
    }

    /// Gradients of every parameter node, in tape order.
    pub fn param_grads(&self) -> impl Iterator<Item = (ParamId, &[f64])> {
        self.nodes.iter().filter_map(|n| match n.op {
            Op::Param(id) => n.value.grad().map(|g| (id, g)),
            _ => None,
        })
    }

    /// `x · w + b` over the last axis of `x`; `w` is `Din × Dout`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let xv = self.value(x);
        let (din, dout) = self.value(w).dims2("linear weight")?;
        if feat_dim(xv) != din {
            return Err(contract(format!(
                "linear: input has {} features, weight expects {din}",
                feat_dim(xv)
            )));
        }
        if let Some(b) = b {
            if self.value(b).len() != dout {
                return Err(contract(format!(
                    "linear: bias has {} entries, expected {dout}",
                    self.value(b).len()
                )));
            }
        }
        let m = xv.len() / din.max(1);
        let mut out = vec![0.0; m * dout];
        if let Some(b) = b {
            let bv = self.value(b).data();
            for row in out.chunks_mut(dout) {
                row.copy_from_slice(bv);
            }
        }
        gemm(
            m,
            din,
            dout,
            xv.data(),
            (din as isize, 1),
            self.value(w).data(),
            (dout as isize, 1),
            &mut out,
            if b.is_some() { 1.0 } else { 0.0 },
        );
        let shape = with_last(xv.shape(), dout);
        let inputs: Vec<Var> = [Some(x), Some(w), b].into_iter().flatten().collect();
        Ok(self.push(
            Tensor::from_parts(shape, out),
            Op::Linear { x, w, b },
            &inputs,
        ))
    }

    /// Per-feature batch normalization over all leading rows.
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        stats: NormStats<'_>,
    ) -> Result<(Var, Option<BatchMoments>)> {
        let xv = self.value(x);
        let d = feat_dim(xv);
        if self.value(gamma).len() != d || self.value(beta).len() != d {
            return Err(contract(format!(
                "batch_norm: expected {d} scale/shift entries"
            )));
        }
        let m = xv.len() / d.max(1);
        if m == 0 {
            return Err(Error::EmptyInput("batch_norm over zero rows".into()));
        }
        let (mean, var, eps, batch_stats) = match stats {
            NormStats::Batch { eps } => {
                let mut mean = vec![0.0; d];
                for row in xv.data().chunks(d) {
                    for (a, v) in mean.iter_mut().zip(row) {
                        *a += v;
                    }
                }
                mean.iter_mut().for_each(|a| *a /= m as f64);
                let mut var = vec![0.0; d];
                for row in xv.data().chunks(d) {
                    for ((a, v), mu) in var.iter_mut().zip(row).zip(&mean) {
                        *a += (v - mu) * (v - mu);
                    }
                }
                var.iter_mut().for_each(|a| *a /= m as f64);
                (mean, var, eps, true)
            }
            NormStats::Running { mean, var, eps } => {
                if mean.len() != d || var.len() != d {
                    return Err(contract("batch_norm: running statistics width mismatch"));
                }
                (mean.to_vec(), var.to_vec(), eps, false)
            }
        };
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let g = self.value(gamma).data();
        let bt = self.value(beta).data();
        let mut xhat = Vec::with_capacity(xv.len());
        let mut out = Vec::with_capacity(xv.len());
        for row in xv.data().chunks(d) {
            for j in 0..d {
                let h = (row[j] - mean[j]) * inv_std[j];
                xhat.push(h);
                out.push(g[j] * h + bt[j]);
            }
        }
        let shape = xv.shape().to_vec();
        let moments = batch_stats.then(|| BatchMoments {
            mean: mean.clone(),
            var: var.clone(),
        });
        let v = self.push(
            Tensor::from_parts(shape, out),
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                batch_stats,
            },
            &[x, gamma, beta],
        );
        Ok((v, moments))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let out = xv
            .data()
            .iter()
            .map(|&v| if v > 0.0 { v } else { 0.0 })
            .collect();
        let shape = xv.shape().to_vec();
        self.push(Tensor::from_parts(shape, out), Op::Relu(x), &[x])
    }

    fn check_same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa != sb {
            return Err(contract(format!("{what}: shapes {sa:?} and {sb:?} differ")));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_same_shape(a, b, "add")?;
        let (av, bv) = (self.value(a), self.value(b));
        let out = av
            .data()
            .iter()
            .zip(bv.data())
            .map(|(x, y)| x + y)
            .collect();
        let shape = av.shape().to_vec();
        Ok(self.push(Tensor::from_parts(shape, out), Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_same_shape(a, b, "sub")?;
        let (av, bv) = (self.value(a), self.value(b));
        let out = av
            .data()
            .iter()
            .zip(bv.data())
            .map(|(x, y)| x - y)
            .collect();
        let shape = av.shape().to_vec();
        Ok(self.push(Tensor::from_parts(shape, out), Op::Sub(a, b), &[a, b]))
    }

    /// Concatenates along the feature axis, `a`'s channels first.
    pub fn concat(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        let (da, db) = (feat_dim(av), feat_dim(bv));
        let (sa, sb) = (av.shape(), bv.shape());
        if sa.len() != sb.len() || sa[..sa.len() - 1] != sb[..sb.len() - 1] {
            return Err(contract(format!(
                "concat: leading dims of {sa:?} and {sb:?} differ"
            )));
        }
        let rows = if da > 0 {
            av.len() / da
        } else {
            bv.len() / db.max(1)
        };
        let mut out = Vec::with_capacity(av.len() + bv.len());
        for r in 0..rows {
            out.extend_from_slice(&av.data()[r * da..(r + 1) * da]);
            out.extend_from_slice(&bv.data()[r * db..(r + 1) * db]);
        }
        let shape = with_last(sa, da + db);
        Ok(self.push(Tensor::from_parts(shape, out), Op::Concat(a, b), &[a, b]))
    }

    /// Copies rows of the matrix `x` selected by `index` into a tensor of
    /// shape `lead × D`, where `lead` multiplies out to `index.len()`.
    pub fn gather_rows(&mut self, x: Var, index: Vec<usize>, lead: &[usize]) -> Result<Var> {
        let xv = self.value(x);
        let (n, d) = xv.dims2("gather_rows")?;
        if lead.iter().product::<usize>() != index.len() {
            return Err(contract(
                "gather_rows: index length does not match output shape",
            ));
        }
        if let Some(&bad) = index.iter().find(|&&i| i >= n) {
            return Err(contract(format!(
                "gather_rows: row {bad} out of range for {n} rows"
            )));
        }
        let mut out = Vec::with_capacity(index.len() * d);
        for &i in &index {
            out.extend_from_slice(&xv.data()[i * d..(i + 1) * d]);
        }
        let mut shape = lead.to_vec();
        shape.push(d);
        Ok(self.push(
            Tensor::from_parts(shape, out),
            Op::GatherRows { x, index },
            &[x],
        ))
    }

    /// `N × D` to `N × times × D`, each row repeated consecutively.
    pub fn repeat_rows(&mut self, x: Var, times: usize) -> Result<Var> {
        let xv = self.value(x);
        let (n, d) = xv.dims2("repeat_rows")?;
        let mut out = Vec::with_capacity(n * times * d);
        for row in xv.data().chunks(d.max(1)).take(n) {
            for _ in 0..times {
                out.extend_from_slice(row);
            }
        }
        Ok(self.push(
            Tensor::from_parts(vec![n, times, d], out),
            Op::RepeatRows { x, times },
            &[x],
        ))
    }

    /// Channelwise maximum over the neighbor axis of an `N × k × D` tensor.
    ///
    /// The gradient flows to the argmax slot only; ties go to the lowest slot.
    pub fn max_reduce_neighbors(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        let [n, k, d] = *xv.shape() else {
            return Err(contract(format!(
                "max_reduce_neighbors: expected N x k x D, got {:?}",
                xv.shape()
            )));
        };
        if k == 0 {
            return Err(Error::EmptyNeighborhood);
        }
        let data = xv.data();
        let mut out = vec![0.0; n * d];
        let mut argmax = vec![0u32; n * d];
        for v in 0..n {
            let block = &data[v * k * d..(v + 1) * k * d];
            let o = &mut out[v * d..(v + 1) * d];
            let a = &mut argmax[v * d..(v + 1) * d];
            o.copy_from_slice(&block[..d]);
            for s in 1..k {
                let row = &block[s * d..(s + 1) * d];
                for c in 0..d {
                    if row[c] > o[c] {
                        o[c] = row[c];
                        a[c] = s as u32;
                    }
                }
            }
        }
        Ok(self.push(
            Tensor::from_parts(vec![n, d], out),
            Op::MaxReduce { x, k, argmax },
            &[x],
        ))
    }

    /// Sum over the neighbor axis of an `N × k × D` tensor.
    pub fn sum_reduce_neighbors(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        let [n, k, d] = *xv.shape() else {
            return Err(contract("sum_reduce_neighbors: expected N x k x D"));
        };
        if k == 0 {
            return Err(Error::EmptyNeighborhood);
        }
        let mut out = vec![0.0; n * d];
        for v in 0..n {
            for s in 0..k {
                let row = &xv.data()[(v * k + s) * d..(v * k + s + 1) * d];
                for (o, r) in out[v * d..(v + 1) * d].iter_mut().zip(row) {
                    *o += r;
                }
            }
        }
        Ok(self.push(
            Tensor::from_parts(vec![n, d], out),
            Op::SumReduce { x, k },
            &[x],
        ))
    }

    /// `(1 + s) · x` for a one-element tensor `s`.
    pub fn one_plus_scale(&mut self, x: Var, s: Var) -> Result<Var> {
        if self.value(s).len() != 1 {
            return Err(contract("one_plus_scale: scale must have one element"));
        }
        let f = 1.0 + self.value(s).data()[0];
        let xv = self.value(x);
        let out = xv.data().iter().map(|v| f * v).collect();
        let shape = xv.shape().to_vec();
        Ok(self.push(
            Tensor::from_parts(shape, out),
            Op::OnePlusScale { x, s },
            &[x, s],
        ))
    }

    /// Inverted dropout. Eval mode and `rate == 0` return `x` itself.
    pub fn dropout<R: Rng + ?Sized>(
        &mut self,
        x: Var,
        rate: f64,
        mode: Mode,
        rng: &mut R,
    ) -> Result<Var> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::InvalidHyperparameter(format!(
                "dropout rate {rate} outside [0, 1)"
            )));
        }
        if mode == Mode::Eval || rate == 0.0 {
            return Ok(x);
        }
        let keep = 1.0 / (1.0 - rate);
        let xv = &self.nodes[x.0].value;
        let mask: Vec<f64> = (0..xv.len())
            .map(|_| if rng.gen::<f64>() < rate { 0.0 } else { keep })
            .collect();
        let out = xv.data().iter().zip(&mask).map(|(v, m)| v * m).collect();
        let shape = xv.shape().to_vec();
        Ok(self.push(
            Tensor::from_parts(shape, out),
            Op::Dropout { x, mask },
            &[x],
        ))
    }

    /// Scales every row to unit ℓ2 norm; rows with norm below `min_norm`
    /// pass through unchanged.
    pub fn row_normalize(&mut self, x: Var, min_norm: f64) -> Var {
        let xv = self.value(x);
        let d = feat_dim(xv).max(1);
        let mut norms = Vec::with_capacity(xv.len() / d);
        let mut out = Vec::with_capacity(xv.len());
        for row in xv.data().chunks(d) {
            let n = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            if n < min_norm {
                norms.push(None);
                out.extend_from_slice(row);
            } else {
                norms.push(Some(n));
                out.extend(row.iter().map(|v| v / n));
            }
        }
        let shape = xv.shape().to_vec();
        self.push(
            Tensor::from_parts(shape, out),
            Op::RowNormalize { x, norms },
            &[x],
        )
    }

    /// Channelwise maximum over all rows of an `N × D` matrix, giving `1 × D`.
    pub fn global_max(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        let (n, d) = xv.dims2("global_max")?;
        if n == 0 {
            return Err(Error::EmptyInput("global_max over zero rows".into()));
        }
        let mut out = xv.row(0).to_vec();
        let mut argmax = vec![0usize; d];
        for r in 1..n {
            for (c, &v) in xv.row(r).iter().enumerate() {
                if v > out[c] {
                    out[c] = v;
                    argmax[c] = r;
                }
            }
        }
        Ok(self.push(
            Tensor::from_parts(vec![1, d], out),
            Op::GlobalMax { x, argmax },
            &[x],
        ))
    }

    /// Mean over rows of `-log softmax(logits)[label]`.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let lv = self.value(logits);
        let (n, c) = lv.dims2("softmax_cross_entropy")?;
        if labels.len() != n {
            return Err(contract(format!(
                "softmax_cross_entropy: {} labels for {n} rows",
                labels.len()
            )));
        }
        if n == 0 {
            return Err(Error::EmptyInput(
                "softmax_cross_entropy over zero rows".into(),
            ));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= c) {
            return Err(contract(format!(
                "label {bad} out of range for {c} classes"
            )));
        }
        let mut probs = Vec::with_capacity(n * c);
        let mut loss = 0.0;
        for (row, &label) in lv.data().chunks(c).zip(labels) {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = row.iter().map(|v| (v - max).exp()).sum();
            let log_z = z.ln() + max;
            loss += log_z - row[label];
            probs.extend(row.iter().map(|v| (v - log_z).exp()));
        }
        loss /= n as f64;
        Ok(self.push(
            Tensor::scalar(loss),
            Op::SoftmaxCrossEntropy {
                logits,
                probs,
                labels: labels.to_vec(),
            },
            &[logits],
        ))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).sum();
        self.push(Tensor::scalar(s), Op::Sum(x), &[x])
    }

    /// `Σ x ⊙ weights` for a constant weight array of matching length.
    pub fn weighted_sum(&mut self, x: Var, weights: &[f64]) -> Result<Var> {
        let xv = self.value(x);
        if xv.len() != weights.len() {
            return Err(contract("weighted_sum: weight length mismatch"));
        }
        let s = xv.data().iter().zip(weights).map(|(a, b)| a * b).sum();
        Ok(self.push(
            Tensor::scalar(s),
            Op::WeightedSum {
                x,
                weights: weights.to_vec(),
            },
            &[x],
        ))
    }

    /// Propagates `∂loss/∂node` to every node that needs a gradient and
    /// stores the result in each node's gradient slot.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).len() != 1 {
            return Err(contract(format!(
                "backward: loss must be a scalar, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !self.nodes[i].needs_grad {
                continue;
            }
            self.backprop_node(i, &g, &mut grads);
            self.nodes[i].value.set_grad(g)?;
        }
        Ok(())
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn backprop_node(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        let mut acc = |v: Var, f: &dyn Fn(&mut [f64])| {
            if !self.nodes[v.0].needs_grad {
                return;
            }
            let slot = grads[v.0].get_or_insert_with(|| vec![0.0; self.nodes[v.0].value.len()]);
            f(slot);
        };
        match &node.op {
            Op::Leaf | Op::Param(_) => {}
            Op::Linear { x, w, b } => {
                let (din, dout) = (self.value(*w).shape()[0], self.value(*w).shape()[1]);
                let m = g.len() / dout.max(1);
                if self.wants(*x) {
                    let wv = self.value(*w).data();
                    acc(*x, &|dx| {
                        gemm(
                            m,
                            dout,
                            din,
                            g,
                            (dout as isize, 1),
                            wv,
                            (1, dout as isize),
                            dx,
                            1.0,
                        )
                    });
                }
                if self.wants(*w) {
                    let xv = self.value(*x).data();
                    acc(*w, &|dw| {
                        gemm(
                            din,
                            m,
                            dout,
                            xv,
                            (1, din as isize),
                            g,
                            (dout as isize, 1),
                            dw,
                            1.0,
                        )
                    });
                }
                if let Some(b) = b {
                    acc(*b, &|db| {
                        for row in g.chunks(dout) {
                            for (a, v) in db.iter_mut().zip(row) {
                                *a += v;
                            }
                        }
                    });
                }
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                batch_stats,
            } => {
                let d = inv_std.len();
                let m = g.len() / d;
                let gv = self.value(*gamma).data();
                let mut sum_g = vec![0.0; d];
                let mut sum_gx = vec![0.0; d];
                for (grow, hrow) in g.chunks(d).zip(xhat.chunks(d)) {
                    for j in 0..d {
                        sum_g[j] += grow[j];
                        sum_gx[j] += grow[j] * hrow[j];
                    }
                }
                acc(*gamma, &|dg| {
                    dg.iter_mut().zip(&sum_gx).for_each(|(a, v)| *a += v)
                });
                acc(*beta, &|db| {
                    db.iter_mut().zip(&sum_g).for_each(|(a, v)| *a += v)
                });
                acc(*x, &|dx| {
                    let mf = m as f64;
                    for ((dxrow, grow), hrow) in
                        dx.chunks_mut(d).zip(g.chunks(d)).zip(xhat.chunks(d))
                    {
                        for j in 0..d {
                            let s = gv[j] * inv_std[j];
                            if *batch_stats {
                                dxrow[j] +=
                                    s * (grow[j] - sum_g[j] / mf - hrow[j] * sum_gx[j] / mf);
                            } else {
                                dxrow[j] += s * grow[j];
                            }
                        }
                    }
                });
            }
            Op::Relu(x) => {
                let xv = self.value(*x).data();
                acc(*x, &|dx| {
                    for ((a, gv), v) in dx.iter_mut().zip(g).zip(xv) {
                        if *v > 0.0 {
                            *a += gv;
                        }
                    }
                });
            }
            Op::Add(a, b) => {
                acc(*a, &|da| da.iter_mut().zip(g).for_each(|(s, v)| *s += v));
                acc(*b, &|db| db.iter_mut().zip(g).for_each(|(s, v)| *s += v));
            }
            Op::Sub(a, b) => {
                acc(*a, &|da| da.iter_mut().zip(g).for_each(|(s, v)| *s += v));
                acc(*b, &|db| db.iter_mut().zip(g).for_each(|(s, v)| *s -= v));
            }
            Op::Concat(a, b) => {
                let da = feat_dim(self.value(*a));
                let db = feat_dim(self.value(*b));
                let w = da + db;
                acc(*a, &|ga| {
                    for (dst, src) in ga.chunks_mut(da.max(1)).zip(g.chunks(w)) {
                        dst.iter_mut().zip(&src[..da]).for_each(|(s, v)| *s += v);
                    }
                });
                acc(*b, &|gb| {
                    for (dst, src) in gb.chunks_mut(db.max(1)).zip(g.chunks(w)) {
                        dst.iter_mut().zip(&src[da..]).for_each(|(s, v)| *s += v);
                    }
                });
            }
            Op::GatherRows { x, index } => {
                let d = feat_dim(self.value(*x));
                acc(*x, &|dx| {
                    for (slot, &r) in index.iter().enumerate() {
                        let src = &g[slot * d..(slot + 1) * d];
                        dx[r * d..(r + 1) * d]
                            .iter_mut()
                            .zip(src)
                            .for_each(|(s, v)| *s += v);
                    }
                });
            }
            Op::RepeatRows { x, times } => {
                let d = feat_dim(self.value(*x));
                acc(*x, &|dx| {
                    for (r, dst) in dx.chunks_mut(d.max(1)).enumerate() {
                        for t in 0..*times {
                            let src = &g[(r * times + t) * d..(r * times + t + 1) * d];
                            dst.iter_mut().zip(src).for_each(|(s, v)| *s += v);
                        }
                    }
                });
            }
            Op::MaxReduce { x, k, argmax } => {
                let d = feat_dim(self.value(*x));
                acc(*x, &|dx| {
                    for (pos, (&gv, &slot)) in g.iter().zip(argmax).enumerate() {
                        let (v, c) = (pos / d, pos % d);
                        dx[(v * k + slot as usize) * d + c] += gv;
                    }
                });
            }
            Op::SumReduce { x, k } => {
                let d = feat_dim(self.value(*x));
                acc(*x, &|dx| {
                    for (blk, grow) in dx.chunks_mut(k * d).zip(g.chunks(d)) {
                        for row in blk.chunks_mut(d) {
                            row.iter_mut().zip(grow).for_each(|(s, v)| *s += v);
                        }
                    }
                });
            }
            Op::OnePlusScale { x, s } => {
                let f = 1.0 + self.value(*s).data()[0];
                acc(*x, &|dx| {
                    dx.iter_mut().zip(g).for_each(|(a, v)| *a += f * v)
                });
                let xv = self.value(*x).data();
                acc(*s, &|ds| {
                    ds[0] += xv.iter().zip(g).map(|(a, b)| a * b).sum::<f64>()
                });
            }
            Op::Dropout { x, mask } => {
                acc(*x, &|dx| {
                    for ((a, gv), m) in dx.iter_mut().zip(g).zip(mask) {
                        *a += gv * m;
                    }
                });
            }
            Op::RowNormalize { x, norms } => {
                let y = node.value.data();
                let d = feat_dim(&node.value).max(1);
                acc(*x, &|dx| {
                    for (r, norm) in norms.iter().enumerate() {
                        let (yr, gr) = (&y[r * d..(r + 1) * d], &g[r * d..(r + 1) * d]);
                        let dst = &mut dx[r * d..(r + 1) * d];
                        match norm {
                            None => dst.iter_mut().zip(gr).for_each(|(a, v)| *a += v),
                            Some(n) => {
                                let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                                for j in 0..d {
                                    dst[j] += (gr[j] - yr[j] * dot) / n;
                                }
                            }
                        }
                    }
                });
            }
            Op::GlobalMax { x, argmax } => {
                let d = argmax.len();
                acc(*x, &|dx| {
                    for (c, &r) in argmax.iter().enumerate() {
                        dx[r * d + c] += g[c];
                    }
                });
            }
            Op::SoftmaxCrossEntropy {
                logits,
                probs,
                labels,
            } => {
                let n = labels.len();
                let c = probs.len() / n;
                let scale = g[0] / n as f64;
                acc(*logits, &|dl| {
                    for (r, &label) in labels.iter().enumerate() {
                        for j in 0..c {
                            let onehot = if j == label { 1.0 } else { 0.0 };
                            dl[r * c + j] += scale * (probs[r * c + j] - onehot);
                        }
                    }
                });
            }
            Op::Sum(x) => {
                acc(*x, &|dx| dx.iter_mut().for_each(|a| *a += g[0]));
            }
            Op::WeightedSum { x, weights } => {
                acc(*x, &|dx| {
                    dx.iter_mut().zip(weights).for_each(|(a, w)| *a += g[0] * w)
                });
            }
        }
    }
}

/// `c = a · b + beta · c` for row-major operands given as `(row, col)` strides.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_strides: (isize, isize),
    b: &[f64],
    b_strides: (isize, isize),
    c: &mut [f64],
    beta: f64,
) {
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        if beta == 0.0 {
            c.iter_mut().for_each(|v| *v = 0.0);
        }
        return;
    }
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    // SAFETY: the asserts above bound every index the strides can reach.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            a_strides.0,
            a_strides.1,
            b.as_ptr(),
            b_strides.0,
            b_strides.1,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}
