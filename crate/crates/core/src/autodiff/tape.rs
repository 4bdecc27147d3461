use super::kernels;
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Handle to a node recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
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
    Linear { x: Var, w: Var, b: Var },
    AddBias(Var, Var),
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Sum(Var),
    Relu(Var),
    SoftmaxCrossEntropy { logits: Var, targets: Vec<usize>, probs: Vec<f64> },
    BceWithLogits { logits: Var, targets: Vec<f64> },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Append-only record of a forward computation. Nodes are stored in
/// creation order, which is a topological order of the graph, so the
/// backward pass is a single reverse sweep.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients of a scalar root with respect to every node that requires one.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    pub fn take(&mut self, v: Var) -> Option<Vec<f64>> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

fn accumulate(slot: &mut Option<Vec<f64>>, contrib: Vec<f64>) {
    match slot {
        Some(g) => g.iter_mut().zip(contrib).for_each(|(a, b)| *a += b),
        None => *slot = Some(contrib),
    }
}

fn shape2(t: &Tensor, op: &'static str) -> Result<(usize, usize)> {
    match t.shape() {
        [r, c] => Ok((*r, *c)),
        s => Err(Error::Dimension {
            op,
            left: s.to_vec(),
            right: vec![0, 0],
        }),
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Records an input; gradients flow into it only if the tensor's
    /// `requires_grad` flag is set.
    pub fn leaf(&mut self, t: Tensor) -> Var {
        let requires_grad = t.requires_grad();
        self.nodes.push(Node {
            value: t,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn param(&mut self, t: &Tensor) -> Var {
        self.leaf(t.clone().with_requires_grad(true))
    }

    pub fn constant(&mut self, t: &Tensor) -> Var {
        self.leaf(t.clone().with_requires_grad(false))
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, shape: Vec<usize>, data: Vec<f64>, op: Op, requires_grad: bool) -> Result<Var> {
        if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::Validation(format!(
                "non-finite value at flat index {pos} produced by {op:?}"
            )));
        }
        self.nodes.push(Node {
            value: Tensor::from_parts_unchecked(shape, data),
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = shape2(self.value(a), "matmul")?;
        let (k2, n) = shape2(self.value(b), "matmul")?;
        if k != k2 {
            return Err(Error::Dimension {
                op: "matmul",
                left: vec![m, k],
                right: vec![k2, n],
            });
        }
        let out = kernels::matmul(self.value(a).data(), m, k, self.value(b).data(), n);
        let rg = self.rg(a) || self.rg(b);
        self.push(vec![m, n], out, Op::MatMul(a, b), rg)
    }

    /// Affine map `x · wᵀ + b` with `w` shaped `out × in` and `b` of length `out`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (m, inp) = shape2(self.value(x), "linear")?;
        let (out, win) = shape2(self.value(w), "linear")?;
        if inp != win || self.value(b).len() != out {
            return Err(Error::Dimension {
                op: "linear",
                left: vec![m, inp],
                right: vec![out, win, self.value(b).len()],
            });
        }
        let y = kernels::linear(
            self.value(x).data(),
            m,
            inp,
            self.value(w).data(),
            self.value(b).data(),
            out,
        );
        let rg = self.rg(x) || self.rg(w) || self.rg(b);
        self.push(vec![m, out], y, Op::Linear { x, w, b }, rg)
    }

    /// Row-wise bias add: `a[m×n] + b[n]`.
    pub fn add_bias(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, n) = shape2(self.value(a), "add_bias")?;
        if self.value(b).len() != n {
            return Err(Error::Dimension {
                op: "add_bias",
                left: vec![m, n],
                right: self.value(b).shape().to_vec(),
            });
        }
        let bv = self.value(b).data();
        let out: Vec<f64> = self
            .value(a)
            .data()
            .iter()
            .enumerate()
            .map(|(i, &v)| v + bv[i % n])
            .collect();
        let rg = self.rg(a) || self.rg(b);
        self.push(vec![m, n], out, Op::AddBias(a, b), rg)
    }

    fn same_shape(&self, a: Var, b: Var, op: &'static str) -> Result<()> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(Error::Dimension {
                op,
                left: self.value(a).shape().to_vec(),
                right: self.value(b).shape().to_vec(),
            });
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let out = kernels::add(self.value(a).data(), self.value(b).data());
        let rg = self.rg(a) || self.rg(b);
        self.push(self.value(a).shape().to_vec(), out, Op::Add(a, b), rg)
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let out = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x * y)
            .collect();
        let rg = self.rg(a) || self.rg(b);
        self.push(self.value(a).shape().to_vec(), out, Op::Mul(a, b), rg)
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Result<Var> {
        let out = self.value(a).data().iter().map(|v| v * s).collect();
        let rg = self.rg(a);
        self.push(self.value(a).shape().to_vec(), out, Op::Scale(a, s), rg)
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s = self.value(a).data().iter().sum();
        let rg = self.rg(a);
        self.push(vec![1], vec![s], Op::Sum(a), rg)
    }

    /// Elementwise `max(0, a)`; the subgradient at exactly 0 is 0.
    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let out = kernels::relu(self.value(a).data());
        let rg = self.rg(a);
        self.push(self.value(a).shape().to_vec(), out, Op::Relu(a), rg)
    }

    /// Mean over the batch of `-log softmax(logits)[target]`.
    pub fn softmax_cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let (m, c) = shape2(self.value(logits), "softmax_cross_entropy")?;
        if targets.len() != m {
            return Err(Error::Dimension {
                op: "softmax_cross_entropy",
                left: vec![m, c],
                right: vec![targets.len()],
            });
        }
        if let Some((i, &t)) = targets.iter().enumerate().find(|(_, &t)| t >= c) {
            return Err(Error::Index(format!(
                "target {t} at row {i} out of range for {c} classes"
            )));
        }
        let data = self.value(logits).data();
        let mut probs = vec![0.0; m * c];
        let mut total = 0.0;
        for r in 0..m {
            let row = &data[r * c..(r + 1) * c];
            let top = kernels::argmax(row);
            let max = row[top];
            // Sum of exp over the non-max entries keeps precision for
            // confident rows via ln_1p.
            let rest: f64 = row
                .iter()
                .enumerate()
                .filter(|&(j, _)| j != top)
                .map(|(_, &v)| (v - max).exp())
                .sum();
            let lse = max + rest.ln_1p();
            total += (max - row[targets[r]]) + rest.ln_1p();
            for j in 0..c {
                probs[r * c + j] = (row[j] - lse).exp();
            }
        }
        let rg = self.rg(logits);
        self.push(
            vec![1],
            vec![total / m as f64],
            Op::SoftmaxCrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
            },
            rg,
        )
    }

    /// Mean over batch and columns of binary cross-entropy on `sigmoid(logits)`,
    /// computed as `max(l,0) - l·t + ln(1 + e^{-|l|})`.
    pub fn bce_with_logits(&mut self, logits: Var, targets: &Tensor) -> Result<Var> {
        if self.value(logits).shape() != targets.shape() {
            return Err(Error::Dimension {
                op: "bce_with_logits",
                left: self.value(logits).shape().to_vec(),
                right: targets.shape().to_vec(),
            });
        }
        if let Some(pos) = targets.data().iter().position(|&t| t != 0.0 && t != 1.0) {
            return Err(Error::Validation(format!(
                "binary target expected at flat index {pos}, got {}",
                targets.data()[pos]
            )));
        }
        let n = targets.len() as f64;
        let total: f64 = self
            .value(logits)
            .data()
            .iter()
            .zip(targets.data())
            .map(|(&l, &t)| l.max(0.0) - l * t + (-l.abs()).exp().ln_1p())
            .sum();
        let rg = self.rg(logits);
        self.push(
            vec![1],
            vec![total / n],
            Op::BceWithLogits {
                logits,
                targets: targets.data().to_vec(),
            },
            rg,
        )
    }

    /// Reverse sweep from a scalar root. Each node at or before the root is
    /// visited exactly once.
    pub fn backward(&self, root: Var) -> Result<Gradients> {
        if self.value(root).len() != 1 {
            return Err(Error::Validation(format!(
                "backward requires a scalar root, got shape {:?}",
                self.value(root).shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; root.0 + 1];
        grads[root.0] = Some(vec![1.0]);
        for i in (0..=root.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                grads[i] = None;
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(node, &g, &mut grads);
            grads[i] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn propagate(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let av = self.value(*a);
                let bv = self.value(*b);
                let (m, k) = (av.rows(), av.cols());
                let n = bv.cols();
                if self.rg(*a) {
                    // g[m×n] · bᵀ[n×k]
                    let mut da = vec![0.0; m * k];
                    for i in 0..m {
                        for p in 0..k {
                            let mut acc = 0.0;
                            for j in 0..n {
                                acc += g[i * n + j] * bv.data()[p * n + j];
                            }
                            da[i * k + p] = acc;
                        }
                    }
                    accumulate(&mut grads[a.0], da);
                }
                if self.rg(*b) {
                    // aᵀ[k×m] · g[m×n]
                    let mut db = vec![0.0; k * n];
                    for i in 0..m {
                        for p in 0..k {
                            let aval = av.data()[i * k + p];
                            for j in 0..n {
                                db[p * n + j] += aval * g[i * n + j];
                            }
                        }
                    }
                    accumulate(&mut grads[b.0], db);
                }
            }
            Op::Linear { x, w, b } => {
                let xv = self.value(*x);
                let wv = self.value(*w);
                let (m, inp) = (xv.rows(), xv.cols());
                let out = wv.rows();
                if self.rg(*x) {
                    accumulate(&mut grads[x.0], kernels::matmul(g, m, out, wv.data(), inp));
                }
                if self.rg(*w) {
                    let mut dw = vec![0.0; out * inp];
                    for r in 0..m {
                        let xr = &xv.data()[r * inp..(r + 1) * inp];
                        for o in 0..out {
                            let go = g[r * out + o];
                            if go == 0.0 {
                                continue;
                            }
                            for (d, &xval) in dw[o * inp..(o + 1) * inp].iter_mut().zip(xr) {
                                *d += go * xval;
                            }
                        }
                    }
                    accumulate(&mut grads[w.0], dw);
                }
                if self.rg(*b) {
                    let mut db = vec![0.0; out];
                    for r in 0..m {
                        for o in 0..out {
                            db[o] += g[r * out + o];
                        }
                    }
                    accumulate(&mut grads[b.0], db);
                }
            }
            Op::AddBias(a, b) => {
                if self.rg(*a) {
                    accumulate(&mut grads[a.0], g.to_vec());
                }
                if self.rg(*b) {
                    let n = self.value(*b).len();
                    let mut db = vec![0.0; n];
                    for (i, &gv) in g.iter().enumerate() {
                        db[i % n] += gv;
                    }
                    accumulate(&mut grads[b.0], db);
                }
            }
            Op::Add(a, b) => {
                if self.rg(*a) {
                    accumulate(&mut grads[a.0], g.to_vec());
                }
                if self.rg(*b) {
                    accumulate(&mut grads[b.0], g.to_vec());
                }
            }
            Op::Mul(a, b) => {
                if self.rg(*a) {
                    let d = g.iter().zip(self.value(*b).data()).map(|(x, y)| x * y).collect();
                    accumulate(&mut grads[a.0], d);
                }
                if self.rg(*b) {
                    let d = g.iter().zip(self.value(*a).data()).map(|(x, y)| x * y).collect();
                    accumulate(&mut grads[b.0], d);
                }
            }
            Op::Scale(a, s) => {
                if self.rg(*a) {
                    accumulate(&mut grads[a.0], g.iter().map(|v| v * s).collect());
                }
            }
            Op::Sum(a) => {
                if self.rg(*a) {
                    accumulate(&mut grads[a.0], vec![g[0]; self.value(*a).len()]);
                }
            }
            Op::Relu(a) => {
                if self.rg(*a) {
                    let d = g
                        .iter()
                        .zip(self.value(*a).data())
                        .map(|(&gv, &x)| if x > 0.0 { gv } else { 0.0 })
                        .collect();
                    accumulate(&mut grads[a.0], d);
                }
            }
            Op::SoftmaxCrossEntropy { logits, targets, probs } => {
                if self.rg(*logits) {
                    let m = targets.len();
                    let c = probs.len() / m;
                    let scale = g[0] / m as f64;
                    let mut d: Vec<f64> = probs.iter().map(|p| p * scale).collect();
                    for (r, &t) in targets.iter().enumerate() {
                        d[r * c + t] -= scale;
                    }
                    accumulate(&mut grads[logits.0], d);
                }
            }
            Op::BceWithLogits { logits, targets } => {
                if self.rg(*logits) {
                    let scale = g[0] / targets.len() as f64;
                    let d = self
                        .value(*logits)
                        .data()
                        .iter()
                        .zip(targets)
                        .map(|(&l, &t)| (sigmoid(l) - t) * scale)
                        .collect();
                    accumulate(&mut grads[logits.0], d);
                }
            }
        }
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}
