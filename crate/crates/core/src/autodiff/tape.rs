use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Lower clamp for `log` inputs and the two-sided clamp for BCE probabilities.
pub const LOG_EPS: f64 = 1e-12;

/// Handle to a node recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    Reshape(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    ScaleBy(Var, Var),
    AddBias(Var, Var),
    Relu(Var),
    Sigmoid(Var),
    Log(Var),
    SoftmaxRows(Var),
    Conv2d {
        input: Var,
        kernel: Var,
        stride: usize,
        pad: usize,
    },
    AvgPool(Var),
    MaxPool {
        input: Var,
        argmax: Vec<usize>,
    },
    Sum(Var),
    Mean(Var),
    NormalizeRows {
        input: Var,
        norms: Vec<f64>,
    },
    CrossEntropyRows {
        logits: Var,
        targets: Vec<usize>,
        probs: Vec<f64>,
    },
    Bce {
        pred: Var,
        target: Vec<f64>,
    },
    Stack(Vec<Var>),
}

impl Op {
    fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Leaf => vec![],
            Op::MatMul(a, b)
            | Op::Add(a, b)
            | Op::Sub(a, b)
            | Op::Mul(a, b)
            | Op::ScaleBy(a, b)
            | Op::AddBias(a, b) => vec![*a, *b],
            Op::Transpose(a)
            | Op::Reshape(a)
            | Op::Scale(a, _)
            | Op::Relu(a)
            | Op::Sigmoid(a)
            | Op::Log(a)
            | Op::SoftmaxRows(a)
            | Op::AvgPool(a)
            | Op::Sum(a)
            | Op::Mean(a) => vec![*a],
            Op::Conv2d { input, kernel, .. } => vec![*input, *kernel],
            Op::MaxPool { input, .. } | Op::NormalizeRows { input, .. } => vec![*input],
            Op::CrossEntropyRows { logits, .. } => vec![*logits],
            Op::Bce { pred, .. } => vec![*pred],
            Op::Stack(vars) => vars.clone(),
        }
    }
}

struct Node {
    value: Tensor,
    grad: Option<Vec<f64>>,
    requires_grad: bool,
    op: Op,
}

/// Wengert list recording every forward operation in execution order.
///
/// Nodes are appended as operations run, so every node's inputs precede it.
/// [`Tape::backward`] walks the list once in reverse. Gradients are stored on
/// leaf nodes that require them and accumulate across repeated backward calls
/// until [`Tape::zero_grad`].
///
/// Ops that make a discrete choice (argmax, assignment) log it through
/// [`Tape::record_selection`] so the finite-difference harness can tell when a
/// perturbation flipped the choice. A tape built with [`Tape::tracking_kinks`]
/// does the same for ReLU.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    selections: Vec<usize>,
    track_kinks: bool,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    /// Tape that also logs the sign pattern of every ReLU input as a selection.
    pub fn tracking_kinks() -> Self {
        Self {
            track_kinks: true,
            ..Self::default()
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Trainable input.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push_leaf(value, true)
    }

    /// Input that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push_leaf(value, false)
    }

    /// Copy of `v` cut off from the graph.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.value(v).clone();
        self.constant(value)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn grad(&self, v: Var) -> Option<Tensor> {
        let node = &self.nodes[v.0];
        node.grad
            .as_ref()
            .map(|g| Tensor::new(node.value.shape().to_vec(), g.clone()).expect("grad shape"))
    }

    pub fn zero_grad(&mut self) {
        for node in &mut self.nodes {
            node.grad = None;
        }
    }

    pub fn record_selection(&mut self, choice: &[usize]) {
        self.selections.extend_from_slice(choice);
    }

    pub fn selections(&self) -> &[usize] {
        &self.selections
    }

    fn push_leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            grad: None,
            requires_grad,
            op: Op::Leaf,
        });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        let inputs = op.inputs();
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        debug_assert!(
            value.all_finite() || !inputs.iter().all(|v| self.nodes[v.0].value.all_finite()),
            "non-finite output from {op:?} on finite inputs"
        );
        self.nodes.push(Node {
            value,
            grad: None,
            requires_grad,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::dimension(op, self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    fn zip(&self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Tensor {
        let (x, y) = (self.value(a), self.value(b));
        let data = x.data().iter().zip(y.data()).map(|(&p, &q)| f(p, q)).collect();
        Tensor::new(x.shape().to_vec(), data).expect("same shape")
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::dimension("matmul", sa, sb));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        matmul_into(self.value(a).data(), self.value(b).data(), &mut out, m, k, n);
        let value = Tensor::new(vec![m, n], out)?;
        Ok(self.push(value, Op::MatMul(a, b)))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let value = self.value(a).transpose()?;
        Ok(self.push(value, Op::Transpose(a)))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(a).clone().reshape(shape.to_vec())?;
        Ok(self.push(value, Op::Reshape(a)))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let value = self.zip(a, b, |x, y| x + y);
        Ok(self.push(value, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let value = self.zip(a, b, |x, y| x - y);
        Ok(self.push(value, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let value = self.zip(a, b, |x, y| x * y);
        Ok(self.push(value, Op::Mul(a, b)))
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        let value = self.value(a).map(|x| x * factor);
        self.push(value, Op::Scale(a, factor))
    }

    /// Multiplies `a` by the single-element tensor `s`.
    pub fn scale_by(&mut self, a: Var, s: Var) -> Result<Var> {
        if !self.value(s).is_scalar() {
            return Err(Error::dimension("scale_by", self.shape(a), self.shape(s)));
        }
        let factor = self.value(s).item();
        let value = self.value(a).map(|x| x * factor);
        Ok(self.push(value, Op::ScaleBy(a, s)))
    }

    /// Adds vector `bias` along the last axis of `a`.
    pub fn add_bias(&mut self, a: Var, bias: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(bias));
        if sb.len() != 1 || sa.last() != Some(&sb[0]) {
            return Err(Error::dimension("add_bias", sa, sb));
        }
        let b = self.value(bias).data();
        let c = b.len();
        let mut value = self.value(a).clone();
        for (i, v) in value.data_mut().iter_mut().enumerate() {
            *v += b[i % c];
        }
        Ok(self.push(value, Op::AddBias(a, bias)))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let value = self.value(a).map(|x| x.max(0.0));
        if self.track_kinks {
            let active: Vec<usize> = self.value(a).data().iter().map(|&x| usize::from(x > 0.0)).collect();
            self.record_selection(&active);
        }
        self.push(value, Op::Relu(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let value = self.value(a).map(sigmoid);
        self.push(value, Op::Sigmoid(a))
    }

    /// Natural log with the input clamped below at [`LOG_EPS`].
    pub fn log(&mut self, a: Var) -> Var {
        let value = self.value(a).map(|x| x.max(LOG_EPS).ln());
        self.push(value, Op::Log(a))
    }

    /// Row-wise softmax of a matrix, stabilized by subtracting each row max.
    pub fn softmax_rows(&mut self, a: Var) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if shape.len() != 2 {
            return Err(Error::dimension("softmax_rows", &shape, &[2]));
        }
        let cols = shape[1];
        let mut out = self.value(a).data().to_vec();
        for row in out.chunks_mut(cols) {
            softmax_in_place(row);
        }
        let value = Tensor::new(shape, out)?;
        Ok(self.push(value, Op::SoftmaxRows(a)))
    }

    /// Cross-correlation of an `H×W×Cin` map with a `kh×kw×Cin×Cout` kernel.
    pub fn conv2d(&mut self, input: Var, kernel: Var, stride: usize, pad: usize) -> Result<Var> {
        let geom = ConvGeometry::new(self.shape(input), self.shape(kernel), stride, pad)?;
        let mut out = vec![0.0; geom.out_h * geom.out_w * geom.cout];
        geom.forward(self.value(input).data(), self.value(kernel).data(), &mut out);
        let value = Tensor::new(vec![geom.out_h, geom.out_w, geom.cout], out)?;
        Ok(self.push(
            value,
            Op::Conv2d {
                input,
                kernel,
                stride,
                pad,
            },
        ))
    }

    /// Mean over the spatial axes of an `H×W×C` map.
    pub fn global_avg_pool(&mut self, a: Var) -> Result<Var> {
        let (hw, c) = spatial_dims(self.shape(a), "global_avg_pool")?;
        let mut out = vec![0.0; c];
        for cell in self.value(a).data().chunks(c) {
            for (o, &v) in out.iter_mut().zip(cell) {
                *o += v;
            }
        }
        for o in &mut out {
            *o /= hw as f64;
        }
        Ok(self.push(Tensor::vector(out), Op::AvgPool(a)))
    }

    /// Max over the spatial axes of an `H×W×C` map. The gradient goes to the
    /// first row-major maximal cell of each channel.
    pub fn global_max_pool(&mut self, a: Var) -> Result<Var> {
        let (_, c) = spatial_dims(self.shape(a), "global_max_pool")?;
        let data = self.value(a).data();
        let mut best = vec![f64::NEG_INFINITY; c];
        let mut argmax = vec![0usize; c];
        for (cell, values) in data.chunks(c).enumerate() {
            for ch in 0..c {
                if values[ch] > best[ch] {
                    best[ch] = values[ch];
                    argmax[ch] = cell * c + ch;
                }
            }
        }
        self.record_selection(&argmax);
        Ok(self.push(Tensor::vector(best), Op::MaxPool { input: a, argmax }))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let total = self.value(a).data().iter().sum();
        self.push(Tensor::scalar(total), Op::Sum(a))
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let total: f64 = t.data().iter().sum::<f64>() / t.len() as f64;
        self.push(Tensor::scalar(total), Op::Mean(a))
    }

    /// Scales each row of a matrix to unit Euclidean norm. Zero rows map to
    /// zero rows with zero gradient.
    pub fn normalize_rows(&mut self, a: Var) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if shape.len() != 2 {
            return Err(Error::dimension("normalize_rows", &shape, &[2]));
        }
        let cols = shape[1];
        let mut out = self.value(a).data().to_vec();
        let mut norms = Vec::with_capacity(shape[0]);
        for row in out.chunks_mut(cols) {
            let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm > 0.0 {
                row.iter_mut().for_each(|v| *v /= norm);
            }
            norms.push(norm);
        }
        let value = Tensor::new(shape, out)?;
        Ok(self.push(value, Op::NormalizeRows { input: a, norms }))
    }

    /// Mean over rows of `-ln softmax(logits_r)[targets_r]`.
    pub fn cross_entropy_rows(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let shape = self.shape(logits).to_vec();
        if shape.len() != 2 || shape[0] != targets.len() {
            return Err(Error::dimension("cross_entropy_rows", &shape, &[targets.len()]));
        }
        let cols = shape[1];
        if let Some(&bad) = targets.iter().find(|&&t| t >= cols) {
            return Err(Error::usage(format!(
                "target index {bad} outside {cols} scored classes"
            )));
        }
        let mut probs = self.value(logits).data().to_vec();
        let mut total = 0.0;
        for (row, &t) in probs.chunks_mut(cols).zip(targets) {
            let top = argmax_first(row);
            let max = row[top];
            // ln Σ exp(v - max) = ln(1 + rest); ln_1p keeps tiny losses accurate
            let rest: f64 = row
                .iter()
                .enumerate()
                .filter(|&(i, _)| i != top)
                .map(|(_, v)| (v - max).exp())
                .sum();
            total += (max - row[t]) + rest.ln_1p();
            softmax_in_place(row);
        }
        let loss = total / targets.len() as f64;
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropyRows {
                logits,
                targets: targets.to_vec(),
                probs,
            },
        ))
    }

    /// Mean binary cross-entropy of probabilities `pred` against `target`,
    /// with `pred` clamped to `[LOG_EPS, 1 - LOG_EPS]`.
    pub fn bce(&mut self, pred: Var, target: &Tensor) -> Result<Var> {
        if self.shape(pred) != target.shape() {
            return Err(Error::dimension("bce", self.shape(pred), target.shape()));
        }
        let p = self.value(pred).data();
        let n = p.len() as f64;
        let total: f64 = p
            .iter()
            .zip(target.data())
            .map(|(&p, &t)| {
                let p = p.clamp(LOG_EPS, 1.0 - LOG_EPS);
                -(t * p.ln() + (1.0 - t) * (1.0 - p).ln())
            })
            .sum();
        Ok(self.push(
            Tensor::scalar(total / n),
            Op::Bce {
                pred,
                target: target.data().to_vec(),
            },
        ))
    }

    /// Stacks equally shaped tensors along a new leading axis. Single-element
    /// inputs stack into a plain vector.
    pub fn stack(&mut self, vars: &[Var]) -> Result<Var> {
        let first = vars
            .first()
            .ok_or_else(|| Error::usage("stack of zero tensors"))?;
        let inner = self.shape(*first).to_vec();
        let mut data = Vec::with_capacity(vars.len() * self.value(*first).len());
        for &v in vars {
            if self.shape(v) != inner.as_slice() {
                return Err(Error::dimension("stack", &inner, self.shape(v)));
            }
            data.extend_from_slice(self.value(v).data());
        }
        let shape = if inner == [1] {
            vec![vars.len()]
        } else {
            std::iter::once(vars.len()).chain(inner).collect()
        };
        let value = Tensor::new(shape, data)?;
        Ok(self.push(value, Op::Stack(vars.to_vec())))
    }

    /// Reverse sweep from the scalar `loss`, accumulating into leaf gradients.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if !self.value(loss).is_scalar() {
            return Err(Error::usage(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut adj: Vec<Option<Vec<f64>>> = Vec::new();
        adj.resize_with(loss.0 + 1, || None);
        adj[loss.0] = Some(vec![1.0]);

        for idx in (0..=loss.0).rev() {
            let Some(g) = adj[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            if let Op::Leaf = node.op {
                match &mut self.nodes[idx].grad {
                    Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
                    slot @ None => *slot = Some(g),
                }
                continue;
            }
            self.propagate(idx, &g, &mut adj);
        }
        Ok(())
    }

    fn propagate(&self, idx: usize, g: &[f64], adj: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[idx];
        let wants = |v: Var| self.nodes[v.0].requires_grad;
        let mut give = |v: Var, contribution: Vec<f64>| accumulate(adj, v, contribution);
        match &node.op {
            Op::Leaf => unreachable!(),
            Op::MatMul(a, b) => {
                let (sa, sb) = (self.shape(*a), self.shape(*b));
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                if wants(*a) {
                    // dA = dC · Bᵀ
                    let mut da = vec![0.0; m * k];
                    for i in 0..m {
                        let grow = &g[i * n..(i + 1) * n];
                        for p in 0..k {
                            let brow = &vb[p * n..(p + 1) * n];
                            da[i * k + p] = dot(grow, brow);
                        }
                    }
                    give(*a, da);
                }
                if wants(*b) {
                    // dB = Aᵀ · dC
                    let mut db = vec![0.0; k * n];
                    for i in 0..m {
                        let grow = &g[i * n..(i + 1) * n];
                        for p in 0..k {
                            let s = va[i * k + p];
                            if s != 0.0 {
                                axpy(&mut db[p * n..(p + 1) * n], s, grow);
                            }
                        }
                    }
                    give(*b, db);
                }
            }
            Op::Transpose(a) => {
                let s = self.shape(*a);
                let (r, c) = (s[0], s[1]);
                let mut da = vec![0.0; r * c];
                for i in 0..r {
                    for j in 0..c {
                        da[i * c + j] = g[j * r + i];
                    }
                }
                give(*a, da);
            }
            Op::Reshape(a) => give(*a, g.to_vec()),
            Op::Add(a, b) => {
                if wants(*a) {
                    give(*a, g.to_vec());
                }
                if wants(*b) {
                    give(*b, g.to_vec());
                }
            }
            Op::Sub(a, b) => {
                if wants(*a) {
                    give(*a, g.to_vec());
                }
                if wants(*b) {
                    give(*b, g.iter().map(|v| -v).collect());
                }
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                if wants(*a) {
                    give(*a, g.iter().zip(vb).map(|(g, y)| g * y).collect());
                }
                if wants(*b) {
                    give(*b, g.iter().zip(va).map(|(g, x)| g * x).collect());
                }
            }
            Op::Scale(a, factor) => give(*a, g.iter().map(|v| v * factor).collect()),
            Op::ScaleBy(a, s) => {
                let factor = self.value(*s).item();
                if wants(*a) {
                    give(*a, g.iter().map(|v| v * factor).collect());
                }
                if wants(*s) {
                    give(*s, vec![dot(g, self.value(*a).data())]);
                }
            }
            Op::AddBias(a, b) => {
                if wants(*a) {
                    give(*a, g.to_vec());
                }
                if wants(*b) {
                    let c = self.value(*b).len();
                    let mut db = vec![0.0; c];
                    for chunk in g.chunks(c) {
                        axpy(&mut db, 1.0, chunk);
                    }
                    give(*b, db);
                }
            }
            Op::Relu(a) => {
                let x = self.value(*a).data();
                give(
                    *a,
                    g.iter().zip(x).map(|(g, &x)| if x > 0.0 { *g } else { 0.0 }).collect(),
                );
            }
            Op::Sigmoid(a) => {
                let y = node.value.data();
                give(*a, g.iter().zip(y).map(|(g, y)| g * y * (1.0 - y)).collect());
            }
            Op::Log(a) => {
                let x = self.value(*a).data();
                give(
                    *a,
                    g.iter()
                        .zip(x)
                        .map(|(g, &x)| if x > LOG_EPS { g / x } else { 0.0 })
                        .collect(),
                );
            }
            Op::SoftmaxRows(a) => {
                let cols = node.value.shape()[1];
                let y = node.value.data();
                let mut da = vec![0.0; y.len()];
                for ((dr, yr), gr) in da.chunks_mut(cols).zip(y.chunks(cols)).zip(g.chunks(cols)) {
                    let inner = dot(gr, yr);
                    for ((d, y), g) in dr.iter_mut().zip(yr).zip(gr) {
                        *d = y * (g - inner);
                    }
                }
                give(*a, da);
            }
            Op::Conv2d {
                input,
                kernel,
                stride,
                pad,
            } => {
                let geom = ConvGeometry::new(self.shape(*input), self.shape(*kernel), *stride, *pad)
                    .expect("validated in forward");
                let (x, k) = (self.value(*input).data(), self.value(*kernel).data());
                if wants(*kernel) {
                    let mut dk = vec![0.0; k.len()];
                    geom.backward_kernel(x, g, &mut dk);
                    give(*kernel, dk);
                }
                if wants(*input) {
                    let mut dx = vec![0.0; x.len()];
                    geom.backward_input(k, g, &mut dx);
                    give(*input, dx);
                }
            }
            Op::AvgPool(a) => {
                let (hw, c) = spatial_dims(self.shape(*a), "global_avg_pool").expect("validated");
                let mut da = vec![0.0; hw * c];
                for cell in da.chunks_mut(c) {
                    for (d, gv) in cell.iter_mut().zip(g) {
                        *d = gv / hw as f64;
                    }
                }
                give(*a, da);
            }
            Op::MaxPool { input, argmax } => {
                let mut da = vec![0.0; self.value(*input).len()];
                for (&pos, gv) in argmax.iter().zip(g) {
                    da[pos] += gv;
                }
                give(*input, da);
            }
            Op::Sum(a) => give(*a, vec![g[0]; self.value(*a).len()]),
            Op::Mean(a) => {
                let n = self.value(*a).len();
                give(*a, vec![g[0] / n as f64; n]);
            }
            Op::NormalizeRows { input, norms } => {
                let cols = node.value.shape()[1];
                let y = node.value.data();
                let mut da = vec![0.0; y.len()];
                for (((dr, yr), gr), &norm) in da
                    .chunks_mut(cols)
                    .zip(y.chunks(cols))
                    .zip(g.chunks(cols))
                    .zip(norms)
                {
                    if norm > 0.0 {
                        let inner = dot(yr, gr);
                        for ((d, y), g) in dr.iter_mut().zip(yr).zip(gr) {
                            *d = (g - y * inner) / norm;
                        }
                    }
                }
                give(*input, da);
            }
            Op::CrossEntropyRows {
                logits,
                targets,
                probs,
            } => {
                let cols = self.shape(*logits)[1];
                let scale = g[0] / targets.len() as f64;
                let mut da: Vec<f64> = probs.iter().map(|p| p * scale).collect();
                for (r, &t) in targets.iter().enumerate() {
                    da[r * cols + t] -= scale;
                }
                give(*logits, da);
            }
            Op::Bce { pred, target } => {
                let p = self.value(*pred).data();
                let n = p.len() as f64;
                let da = p
                    .iter()
                    .zip(target)
                    .map(|(&p, &t)| {
                        if p <= LOG_EPS || p >= 1.0 - LOG_EPS {
                            0.0
                        } else {
                            -g[0] * (t / p - (1.0 - t) / (1.0 - p)) / n
                        }
                    })
                    .collect();
                give(*pred, da);
            }
            Op::Stack(vars) => {
                let chunk = self.value(vars[0]).len();
                for (v, gc) in vars.iter().zip(g.chunks(chunk)) {
                    if wants(*v) {
                        give(*v, gc.to_vec());
                    }
                }
            }
        }
    }
}

fn accumulate(adj: &mut [Option<Vec<f64>>], v: Var, contribution: Vec<f64>) {
    match &mut adj[v.0] {
        Some(acc) => axpy(acc, 1.0, &contribution),
        slot @ None => *slot = Some(contribution),
    }
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn axpy(y: &mut [f64], a: f64, x: &[f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += a * xi;
    }
}

pub(crate) fn matmul_into(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let s = a[i * k + p];
            if s != 0.0 {
                axpy(orow, s, &b[p * n..(p + 1) * n]);
            }
        }
    }
}

/// Logistic function, kept strictly inside `(0, 1)` even where `f64` would round to an endpoint.
pub fn sigmoid(x: f64) -> f64 {
    let y = if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    };
    y.clamp(f64::MIN_POSITIVE, 1.0 - f64::EPSILON / 2.0)
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        total += *v;
    }
    row.iter_mut().for_each(|v| *v /= total);
}

fn argmax_first(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}

fn spatial_dims(shape: &[usize], op: &'static str) -> Result<(usize, usize)> {
    if shape.len() != 3 {
        return Err(Error::dimension(op, shape, &[3]));
    }
    Ok((shape[0] * shape[1], shape[2]))
}

/// Output geometry of a strided, zero-padded 2-D cross-correlation.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub in_h: usize,
    pub in_w: usize,
    pub cin: usize,
    pub kh: usize,
    pub kw: usize,
    pub cout: usize,
    pub stride: usize,
    pub pad: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeometry {
    pub fn new(input: &[usize], kernel: &[usize], stride: usize, pad: usize) -> Result<Self> {
        if input.len() != 3 || kernel.len() != 4 || input[2] != kernel[2] {
            return Err(Error::dimension("conv2d", input, kernel));
        }
        if stride == 0 {
            return Err(Error::usage("conv2d stride must be positive"));
        }
        let out_dim = |size: usize, k: usize| -> Result<usize> {
            let span = size + 2 * pad;
            if span < k || !(span - k).is_multiple_of(stride) {
                return Err(Error::dimension("conv2d output size", input, kernel));
            }
            Ok((span - k) / stride + 1)
        };
        Ok(ConvGeometry {
            in_h: input[0],
            in_w: input[1],
            cin: input[2],
            kh: kernel[0],
            kw: kernel[1],
            cout: kernel[3],
            stride,
            pad,
            out_h: out_dim(input[0], kernel[0])?,
            out_w: out_dim(input[1], kernel[1])?,
        })
    }

    /// Input cell feeding output `(oy, ox)` through tap `(ky, kx)`, if inside the map.
    #[inline]
    fn source(&self, oy: usize, ox: usize, ky: usize, kx: usize) -> Option<usize> {
        let iy = (oy * self.stride + ky).checked_sub(self.pad)?;
        let ix = (ox * self.stride + kx).checked_sub(self.pad)?;
        (iy < self.in_h && ix < self.in_w).then_some(iy * self.in_w + ix)
    }

    fn forward(&self, x: &[f64], k: &[f64], out: &mut [f64]) {
        let (cin, cout) = (self.cin, self.cout);
        for oy in 0..self.out_h {
            for ox in 0..self.out_w {
                let o = &mut out[(oy * self.out_w + ox) * cout..][..cout];
                for ky in 0..self.kh {
                    for kx in 0..self.kw {
                        let Some(cell) = self.source(oy, ox, ky, kx) else { continue };
                        let xs = &x[cell * cin..][..cin];
                        let taps = &k[(ky * self.kw + kx) * cin * cout..][..cin * cout];
                        for (ci, &xv) in xs.iter().enumerate() {
                            if xv != 0.0 {
                                axpy(o, xv, &taps[ci * cout..][..cout]);
                            }
                        }
                    }
                }
            }
        }
    }

    fn backward_kernel(&self, x: &[f64], g: &[f64], dk: &mut [f64]) {
        let (cin, cout) = (self.cin, self.cout);
        for oy in 0..self.out_h {
            for ox in 0..self.out_w {
                let go = &g[(oy * self.out_w + ox) * cout..][..cout];
                for ky in 0..self.kh {
                    for kx in 0..self.kw {
                        let Some(cell) = self.source(oy, ox, ky, kx) else { continue };
                        let xs = &x[cell * cin..][..cin];
                        let taps = &mut dk[(ky * self.kw + kx) * cin * cout..][..cin * cout];
                        for (ci, &xv) in xs.iter().enumerate() {
                            if xv != 0.0 {
                                axpy(&mut taps[ci * cout..][..cout], xv, go);
                            }
                        }
                    }
                }
            }
        }
    }

    fn backward_input(&self, k: &[f64], g: &[f64], dx: &mut [f64]) {
        let (cin, cout) = (self.cin, self.cout);
        for oy in 0..self.out_h {
            for ox in 0..self.out_w {
                let go = &g[(oy * self.out_w + ox) * cout..][..cout];
                for ky in 0..self.kh {
                    for kx in 0..self.kw {
                        let Some(cell) = self.source(oy, ox, ky, kx) else { continue };
                        let taps = &k[(ky * self.kw + kx) * cin * cout..][..cin * cout];
                        let xs = &mut dx[cell * cin..][..cin];
                        for (ci, d) in xs.iter_mut().enumerate() {
                            *d += dot(&taps[ci * cout..][..cout], go);
                        }
                    }
                }
            }
        }
    }
}
