//! Reverse-mode automatic differentiation over tensor operations.
//!
//! A [`Tape`] records every operation as a node in an acyclic graph; values
//! are computed once at recording time and never mutated. [`Tape::backward`]
//! walks the nodes in reverse, applying the chain rule, and returns a
//! [`GradMap`] from node to gradient. [`check_gradient`] verifies gradients
//! against double-precision central finite differences.
//!
//! Subgradient conventions: ReLU and |.| use 0 at 0, sqrt uses 0 at 0, and
//! max pooling routes the gradient to the first maximal element in scan
//! order.

use crate::scalar::Scalar;
use crate::tensor::{self, BnStats, Tensor};
use crate::train::{logistic_loss, sigmoid};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Val(usize);

enum Op<F> {
    Leaf,
    Conv2d { x: Val, k: Val, bias: Option<Val> },
    Conv2dDiag { x: Val, k: Val },
    MatVec { a: Val, x: Val },
    Add { a: Val, b: Val },
    Sub { a: Val, b: Val },
    Mul { a: Val, b: Val },
    AddLast { x: Val, v: Val },
    MulLast { x: Val, v: Val },
    Scale { x: Val, c: F },
    Relu { x: Val },
    Abs { x: Val },
    Sqrt { x: Val },
    MaxPool2 { x: Val },
    BnTrain { x: Val, gamma: Val, beta: Val, stats: BnStats<F>, eps: F },
    BnEval { x: Val, gamma: Val, beta: Val, mean: Tensor<F>, var: Tensor<F>, eps: F },
    SumAll { x: Val },
    MeanAll { x: Val },
    SumPerSample { x: Val },
    Reshape { x: Val },
    SliceLast { x: Val, start: usize },
    /// Weighted sum of per-element logistic losses; `weights` are fixed by
    /// the caller (all `1/n` for a plain mean).
    LogisticSum { scores: Val, labels: Tensor<F>, weights: Tensor<F> },
}

struct Node<F> {
    value: Tensor<F>,
    op: Op<F>,
    requires_grad: bool,
}

/// Recording tape: an append-only computation graph.
pub struct Tape<F> {
    nodes: Vec<Node<F>>,
}

/// Gradients of a scalar loss with respect to every `requires_grad` node;
/// each entry has the shape of the node's value.
pub struct GradMap<F> {
    grads: Vec<Option<Tensor<F>>>,
}

impl<F: Scalar> GradMap<F> {
    pub fn get(&self, v: Val) -> Option<&Tensor<F>> {
        self.grads[v.0].as_ref()
    }
}

impl<F: Scalar> Tape<F> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Val) -> &Tensor<F> {
        &self.nodes[v.0].value
    }

    /// Value of a scalar (single-element) node.
    pub fn scalar_value(&self, v: Val) -> F {
        let t = self.value(v);
        assert_eq!(t.numel(), 1, "scalar_value: node has {} elements", t.numel());
        t.data()[0]
    }

    fn push(&mut self, value: Tensor<F>, op: Op<F>, requires_grad: bool) -> Val {
        self.nodes.push(Node { value, op, requires_grad });
        Val(self.nodes.len() - 1)
    }

    fn needs(&self, v: Val) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn leaf(&mut self, value: Tensor<F>, requires_grad: bool) -> Val {
        self.push(value, Op::Leaf, requires_grad)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor<F>) -> Val {
        self.leaf(value, false)
    }

    pub fn conv2d(&mut self, x: Val, k: Val, bias: Option<Val>) -> Val {
        let value = tensor::conv2d(
            self.value(x),
            self.value(k),
            bias.map(|b| self.value(b)),
        );
        let rg = self.needs(x) || self.needs(k) || bias.is_some_and(|b| self.needs(b));
        self.push(value, Op::Conv2d { x, k, bias }, rg)
    }

    pub fn conv2d_diag(&mut self, x: Val, k: Val) -> Val {
        let value = tensor::conv2d_diag(self.value(x), self.value(k));
        let rg = self.needs(x) || self.needs(k);
        self.push(value, Op::Conv2dDiag { x, k }, rg)
    }

    pub fn matvec(&mut self, a: Val, x: Val) -> Val {
        let value = tensor::matvec(self.value(a), self.value(x));
        let rg = self.needs(a) || self.needs(x);
        self.push(value, Op::MatVec { a, x }, rg)
    }

    pub fn add(&mut self, a: Val, b: Val) -> Val {
        let value = tensor::add(self.value(a), self.value(b));
        let rg = self.needs(a) || self.needs(b);
        self.push(value, Op::Add { a, b }, rg)
    }

    pub fn sub(&mut self, a: Val, b: Val) -> Val {
        let value = tensor::sub(self.value(a), self.value(b));
        let rg = self.needs(a) || self.needs(b);
        self.push(value, Op::Sub { a, b }, rg)
    }

    pub fn mul(&mut self, a: Val, b: Val) -> Val {
        let value = tensor::mul(self.value(a), self.value(b));
        let rg = self.needs(a) || self.needs(b);
        self.push(value, Op::Mul { a, b }, rg)
    }

    pub fn add_last(&mut self, x: Val, v: Val) -> Val {
        let value = tensor::add_last(self.value(x), self.value(v));
        let rg = self.needs(x) || self.needs(v);
        self.push(value, Op::AddLast { x, v }, rg)
    }

    pub fn mul_last(&mut self, x: Val, v: Val) -> Val {
        let value = tensor::mul_last(self.value(x), self.value(v));
        let rg = self.needs(x) || self.needs(v);
        self.push(value, Op::MulLast { x, v }, rg)
    }

    pub fn scale(&mut self, x: Val, c: F) -> Val {
        let value = tensor::scale(self.value(x), c);
        let rg = self.needs(x);
        self.push(value, Op::Scale { x, c }, rg)
    }

    pub fn neg(&mut self, x: Val) -> Val {
        self.scale(x, -F::one())
    }

    pub fn relu(&mut self, x: Val) -> Val {
        let value = tensor::relu(self.value(x));
        let rg = self.needs(x);
        self.push(value, Op::Relu { x }, rg)
    }

    pub fn abs(&mut self, x: Val) -> Val {
        let value = tensor::abs(self.value(x));
        let rg = self.needs(x);
        self.push(value, Op::Abs { x }, rg)
    }

    pub fn sqrt(&mut self, x: Val) -> Val {
        let value = tensor::sqrt(self.value(x));
        let rg = self.needs(x);
        self.push(value, Op::Sqrt { x }, rg)
    }

    pub fn maxpool2(&mut self, x: Val) -> Val {
        let value = tensor::maxpool2(self.value(x));
        let rg = self.needs(x);
        self.push(value, Op::MaxPool2 { x }, rg)
    }

    /// Training-mode batch normalization; returns the output node together
    /// with the batch statistics for running-average updates.
    pub fn batchnorm_train(&mut self, x: Val, gamma: Val, beta: Val, eps: F) -> (Val, BnStats<F>) {
        let (value, stats) = tensor::batchnorm_train(self.value(x), self.value(gamma), self.value(beta), eps);
        let rg = self.needs(x) || self.needs(gamma) || self.needs(beta);
        let out = self.push(
            value,
            Op::BnTrain { x, gamma, beta, stats: stats.clone(), eps },
            rg,
        );
        (out, stats)
    }

    /// Evaluation-mode batch normalization with fixed running statistics.
    pub fn batchnorm_eval(&mut self, x: Val, gamma: Val, beta: Val, mean: Tensor<F>, var: Tensor<F>, eps: F) -> Val {
        let value = tensor::batchnorm_eval(self.value(x), self.value(gamma), self.value(beta), &mean, &var, eps);
        let rg = self.needs(x) || self.needs(gamma) || self.needs(beta);
        self.push(value, Op::BnEval { x, gamma, beta, mean, var, eps }, rg)
    }

    pub fn sum_all(&mut self, x: Val) -> Val {
        let value = Tensor::scalar(tensor::sum_all(self.value(x)));
        let rg = self.needs(x);
        self.push(value, Op::SumAll { x }, rg)
    }

    pub fn mean_all(&mut self, x: Val) -> Val {
        let n = F::from_f64(self.value(x).numel() as f64);
        let value = Tensor::scalar(tensor::sum_all(self.value(x)) / n);
        let rg = self.needs(x);
        self.push(value, Op::MeanAll { x }, rg)
    }

    pub fn sum_per_sample(&mut self, x: Val) -> Val {
        let value = tensor::sum_per_sample(self.value(x));
        let rg = self.needs(x);
        self.push(value, Op::SumPerSample { x }, rg)
    }

    pub fn reshape(&mut self, x: Val, shape: Vec<usize>) -> Val {
        let value = self.value(x).reshape(shape);
        let rg = self.needs(x);
        self.push(value, Op::Reshape { x }, rg)
    }

    /// Columns `start..start+len` of a `[n, l]` matrix.
    pub fn slice_last(&mut self, x: Val, start: usize, len: usize) -> Val {
        let xt = self.value(x);
        let (n, l) = match xt.shape() {
            [n, l] => (*n, *l),
            s => panic!("slice_last: expected rank-2 tensor, got shape {s:?}"),
        };
        assert!(start + len <= l, "slice_last: columns {start}..{} out of range {l}", start + len);
        let mut data = Vec::with_capacity(n * len);
        for row in xt.data().chunks_exact(l) {
            data.extend_from_slice(&row[start..start + len]);
        }
        let value = Tensor::new(vec![n, len], data);
        let rg = self.needs(x);
        self.push(value, Op::SliceLast { x, start }, rg)
    }

    /// Scalar `sum_i weights_i * log(1 + exp(-labels_i * scores_i))`.
    ///
    /// Labels are +1/-1; weights are fixed constants chosen by the caller
    /// (all `1/n` gives the mean loss).
    pub fn logistic_sum(&mut self, scores: Val, labels: Tensor<F>, weights: Tensor<F>) -> Val {
        let s = self.value(scores);
        assert_eq!(s.shape(), labels.shape(), "logistic_sum: labels shape mismatch");
        assert_eq!(s.shape(), weights.shape(), "logistic_sum: weights shape mismatch");
        let mut acc = F::zero();
        for ((&sv, &lv), &wv) in s.data().iter().zip(labels.data()).zip(weights.data()) {
            acc += wv * logistic_loss(sv, lv);
        }
        let rg = self.needs(scores);
        self.push(Tensor::scalar(acc), Op::LogisticSum { scores, labels, weights }, rg)
    }

    /// Gradients of a scalar-valued node with respect to every
    /// `requires_grad` node, by reverse traversal of the tape.
    pub fn backward(&self, loss: Val) -> GradMap<F> {
        assert_eq!(
            self.value(loss).numel(),
            1,
            "backward: loss must be scalar, got shape {:?}",
            self.value(loss).shape()
        );
        let mut grads: Vec<Option<Vec<F>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![F::one()]);

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, &g, &mut grads);
            grads[i] = Some(g);
        }

        let grads = grads
            .into_iter()
            .enumerate()
            .map(|(i, g)| g.map(|data| Tensor::new(self.nodes[i].value.shape().to_vec(), data)))
            .collect();
        GradMap { grads }
    }

    fn accumulate(&self, grads: &mut [Option<Vec<F>>], v: Val, update: impl FnOnce(&mut [F])) {
        if !self.needs(v) {
            return;
        }
        let buf = grads[v.0].get_or_insert_with(|| vec![F::zero(); self.nodes[v.0].value.numel()]);
        update(buf);
    }

    fn propagate(&self, i: usize, g: &[F], grads: &mut [Option<Vec<F>>]) {
        match &self.nodes[i].op {
            Op::Leaf => {}

            Op::Conv2d { x, k, bias } => {
                let xt = self.value(*x);
                let kt = self.value(*k);
                let out_shape = self.nodes[i].value.shape();
                if self.needs(*x) {
                    let dx = conv2d_backward_x(xt, kt, g, out_shape);
                    self.accumulate(grads, *x, |buf| axpy_all(buf, &dx));
                }
                if self.needs(*k) {
                    let dk = conv2d_backward_k(xt, kt, g, out_shape);
                    self.accumulate(grads, *k, |buf| axpy_all(buf, &dk));
                }
                if let Some(b) = bias {
                    if self.needs(*b) {
                        let p = *self.value(*b).shape().last().unwrap();
                        self.accumulate(grads, *b, |buf| {
                            for row in g.chunks_exact(p) {
                                for (o, &gv) in buf.iter_mut().zip(row) {
                                    *o += gv;
                                }
                            }
                        });
                    }
                }
            }

            Op::Conv2dDiag { x, k } => {
                let xt = self.value(*x);
                let kt = self.value(*k);
                let out_shape = self.nodes[i].value.shape();
                if self.needs(*x) {
                    let dx = conv2d_diag_backward_x(xt, kt, g, out_shape);
                    self.accumulate(grads, *x, |buf| axpy_all(buf, &dx));
                }
                if self.needs(*k) {
                    let dk = conv2d_diag_backward_k(xt, kt, g, out_shape);
                    self.accumulate(grads, *k, |buf| axpy_all(buf, &dk));
                }
            }

            Op::MatVec { a, x } => {
                let at = self.value(*a);
                let xt = self.value(*x);
                let (m, n) = (at.shape()[0], at.shape()[1]);
                let batch = xt.numel() / n;
                if self.needs(*a) {
                    self.accumulate(grads, *a, |buf| {
                        for s in 0..batch {
                            let grow = &g[s * m..][..m];
                            let xrow = &xt.data()[s * n..][..n];
                            for (ii, &gv) in grow.iter().enumerate() {
                                let arow = &mut buf[ii * n..][..n];
                                for (o, &xv) in arow.iter_mut().zip(xrow) {
                                    *o += gv * xv;
                                }
                            }
                        }
                    });
                }
                if self.needs(*x) {
                    self.accumulate(grads, *x, |buf| {
                        for s in 0..batch {
                            let grow = &g[s * m..][..m];
                            let orow = &mut buf[s * n..][..n];
                            for (ii, &gv) in grow.iter().enumerate() {
                                let arow = &at.data()[ii * n..][..n];
                                for (o, &av) in orow.iter_mut().zip(arow) {
                                    *o += gv * av;
                                }
                            }
                        }
                    });
                }
            }

            Op::Add { a, b } => {
                self.accumulate(grads, *a, |buf| axpy_all(buf, g));
                self.accumulate(grads, *b, |buf| axpy_all(buf, g));
            }

            Op::Sub { a, b } => {
                self.accumulate(grads, *a, |buf| axpy_all(buf, g));
                self.accumulate(grads, *b, |buf| {
                    for (o, &gv) in buf.iter_mut().zip(g) {
                        *o -= gv;
                    }
                });
            }

            Op::Mul { a, b } => {
                let at = self.value(*a).data();
                let bt = self.value(*b).data();
                self.accumulate(grads, *a, |buf| {
                    for ((o, &gv), &bv) in buf.iter_mut().zip(g).zip(bt) {
                        *o += gv * bv;
                    }
                });
                self.accumulate(grads, *b, |buf| {
                    for ((o, &gv), &av) in buf.iter_mut().zip(g).zip(at) {
                        *o += gv * av;
                    }
                });
            }

            Op::AddLast { x, v } => {
                let c = self.value(*v).numel();
                self.accumulate(grads, *x, |buf| axpy_all(buf, g));
                self.accumulate(grads, *v, |buf| {
                    for row in g.chunks_exact(c) {
                        for (o, &gv) in buf.iter_mut().zip(row) {
                            *o += gv;
                        }
                    }
                });
            }

            Op::MulLast { x, v } => {
                let vt = self.value(*v).data();
                let xt = self.value(*x).data();
                let c = vt.len();
                self.accumulate(grads, *x, |buf| {
                    for (orow, grow) in buf.chunks_exact_mut(c).zip(g.chunks_exact(c)) {
                        for ((o, &gv), &vv) in orow.iter_mut().zip(grow).zip(vt) {
                            *o += gv * vv;
                        }
                    }
                });
                self.accumulate(grads, *v, |buf| {
                    for (xrow, grow) in xt.chunks_exact(c).zip(g.chunks_exact(c)) {
                        for ((o, &gv), &xv) in buf.iter_mut().zip(grow).zip(xrow) {
                            *o += gv * xv;
                        }
                    }
                });
            }

            Op::Scale { x, c } => {
                let c = *c;
                self.accumulate(grads, *x, |buf| {
                    for (o, &gv) in buf.iter_mut().zip(g) {
                        *o += gv * c;
                    }
                });
            }

            Op::Relu { x } => {
                let xt = self.value(*x).data();
                self.accumulate(grads, *x, |buf| {
                    for ((o, &gv), &xv) in buf.iter_mut().zip(g).zip(xt) {
                        if xv > F::zero() {
                            *o += gv;
                        }
                    }
                });
            }

            Op::Abs { x } => {
                let xt = self.value(*x).data();
                self.accumulate(grads, *x, |buf| {
                    for ((o, &gv), &xv) in buf.iter_mut().zip(g).zip(xt) {
                        if xv > F::zero() {
                            *o += gv;
                        } else if xv < F::zero() {
                            *o -= gv;
                        }
                    }
                });
            }

            Op::Sqrt { x } => {
                let yt = self.nodes[i].value.data();
                let half = F::from_f64(0.5);
                self.accumulate(grads, *x, |buf| {
                    for ((o, &gv), &yv) in buf.iter_mut().zip(g).zip(yt) {
                        if yv > F::zero() {
                            *o += gv * half / yv;
                        }
                    }
                });
            }

            Op::MaxPool2 { x } => {
                let xt = self.value(*x);
                let (n, h, w, c) = match xt.shape() {
                    [h, w, c] => (1, *h, *w, *c),
                    [n, h, w, c] => (*n, *h, *w, *c),
                    _ => unreachable!(),
                };
                let (oh, ow) = (h / 2, w / 2);
                let xd = xt.data();
                self.accumulate(grads, *x, |buf| {
                    for s in 0..n {
                        for i2 in 0..oh {
                            for j in 0..ow {
                                for cc in 0..c {
                                    let mut best = ((s * h + 2 * i2) * w + 2 * j) * c + cc;
                                    for (di, dj) in [(0, 1), (1, 0), (1, 1)] {
                                        let idx = ((s * h + 2 * i2 + di) * w + 2 * j + dj) * c + cc;
                                        if xd[idx] > xd[best] {
                                            best = idx;
                                        }
                                    }
                                    buf[best] += g[((s * oh + i2) * ow + j) * c + cc];
                                }
                            }
                        }
                    }
                });
            }

            Op::BnTrain { x, gamma, beta, stats, eps } => {
                let xt = self.value(*x);
                let gammat = self.value(*gamma).data();
                let c = stats.mean.numel();
                let group = xt.numel() / c;
                let gf = F::from_f64(group as f64);
                let inv_std: Vec<F> = stats.var.data().iter().map(|&v| (v + *eps).sqrt().recip()).collect();

                // Per-channel sums of dxhat and dxhat*xhat.
                let mut sum_dxhat = vec![F::zero(); c];
                let mut sum_dxhat_xhat = vec![F::zero(); c];
                let mut sum_g = vec![F::zero(); c];
                for (xrow, grow) in xt.data().chunks_exact(c).zip(g.chunks_exact(c)) {
                    for cc in 0..c {
                        let xhat = (xrow[cc] - stats.mean.data()[cc]) * inv_std[cc];
                        let dxhat = grow[cc] * gammat[cc];
                        sum_dxhat[cc] += dxhat;
                        sum_dxhat_xhat[cc] += dxhat * xhat;
                        sum_g[cc] += grow[cc];
                    }
                }

                self.accumulate(grads, *x, |buf| {
                    for ((orow, xrow), grow) in buf
                        .chunks_exact_mut(c)
                        .zip(xt.data().chunks_exact(c))
                        .zip(g.chunks_exact(c))
                    {
                        for cc in 0..c {
                            let xhat = (xrow[cc] - stats.mean.data()[cc]) * inv_std[cc];
                            let dxhat = grow[cc] * gammat[cc];
                            orow[cc] += inv_std[cc] / gf
                                * (gf * dxhat - sum_dxhat[cc] - xhat * sum_dxhat_xhat[cc]);
                        }
                    }
                });
                self.accumulate(grads, *gamma, |buf| {
                    let mut dgamma = vec![F::zero(); c];
                    for (xrow, grow) in xt.data().chunks_exact(c).zip(g.chunks_exact(c)) {
                        for cc in 0..c {
                            let xhat = (xrow[cc] - stats.mean.data()[cc]) * inv_std[cc];
                            dgamma[cc] += grow[cc] * xhat;
                        }
                    }
                    axpy_all(buf, &dgamma);
                });
                self.accumulate(grads, *beta, |buf| axpy_all(buf, &sum_g));
            }

            Op::BnEval { x, gamma, beta, mean, var, eps } => {
                let xt = self.value(*x);
                let gammat = self.value(*gamma).data();
                let c = mean.numel();
                let inv_std: Vec<F> = var.data().iter().map(|&v| (v + *eps).sqrt().recip()).collect();
                self.accumulate(grads, *x, |buf| {
                    for (orow, grow) in buf.chunks_exact_mut(c).zip(g.chunks_exact(c)) {
                        for cc in 0..c {
                            orow[cc] += grow[cc] * gammat[cc] * inv_std[cc];
                        }
                    }
                });
                self.accumulate(grads, *gamma, |buf| {
                    for (xrow, grow) in xt.data().chunks_exact(c).zip(g.chunks_exact(c)) {
                        for cc in 0..c {
                            buf[cc] += grow[cc] * (xrow[cc] - mean.data()[cc]) * inv_std[cc];
                        }
                    }
                });
                self.accumulate(grads, *beta, |buf| {
                    for grow in g.chunks_exact(c) {
                        for (o, &gv) in buf.iter_mut().zip(grow) {
                            *o += gv;
                        }
                    }
                });
            }

            Op::SumAll { x } => {
                let gv = g[0];
                self.accumulate(grads, *x, |buf| {
                    for o in buf.iter_mut() {
                        *o += gv;
                    }
                });
            }

            Op::MeanAll { x } => {
                let n = F::from_f64(self.value(*x).numel() as f64);
                let gv = g[0] / n;
                self.accumulate(grads, *x, |buf| {
                    for o in buf.iter_mut() {
                        *o += gv;
                    }
                });
            }

            Op::SumPerSample { x } => {
                let xn = self.value(*x).numel();
                let n = self.nodes[i].value.numel();
                let per = xn / n;
                self.accumulate(grads, *x, |buf| {
                    for (s, row) in buf.chunks_exact_mut(per).enumerate() {
                        for o in row.iter_mut() {
                            *o += g[s];
                        }
                    }
                });
            }

            Op::Reshape { x } => {
                self.accumulate(grads, *x, |buf| axpy_all(buf, g));
            }

            Op::SliceLast { x, start } => {
                let l = self.value(*x).shape()[1];
                let len = self.nodes[i].value.shape()[1];
                let start = *start;
                self.accumulate(grads, *x, |buf| {
                    for (orow, grow) in buf.chunks_exact_mut(l).zip(g.chunks_exact(len)) {
                        for (o, &gv) in orow[start..start + len].iter_mut().zip(grow) {
                            *o += gv;
                        }
                    }
                });
            }

            Op::LogisticSum { scores, labels, weights } => {
                let st = self.value(*scores).data();
                let gv = g[0];
                self.accumulate(grads, *scores, |buf| {
                    for (((o, &sv), &lv), &wv) in
                        buf.iter_mut().zip(st).zip(labels.data()).zip(weights.data())
                    {
                        // d/ds log(1+exp(-l*s)) = -l * sigmoid(-l*s)
                        *o += gv * wv * (-lv) * sigmoid(-lv * sv);
                    }
                });
            }
        }
    }
}

impl<F: Scalar> Default for Tape<F> {
    fn default() -> Self {
        Self::new()
    }
}

fn axpy_all<F: Scalar>(buf: &mut [F], src: &[F]) {
    debug_assert_eq!(buf.len(), src.len());
    for (o, &v) in buf.iter_mut().zip(src) {
        *o += v;
    }
}

fn conv_kernel_dims<F: Scalar>(k: &Tensor<F>) -> (bool, usize, usize, usize) {
    match k.shape() {
        [f, _, q, p] => (false, *f, *q, *p),
        [_, f, _, q, p] => (true, *f, *q, *p),
        _ => unreachable!(),
    }
}

fn conv2d_backward_x<F: Scalar>(x: &Tensor<F>, k: &Tensor<F>, g: &[F], out_shape: &[usize]) -> Vec<F> {
    let (n, h, w, q) = match x.shape() {
        [h, w, q] => (1, *h, *w, *q),
        [n, h, w, q] => (*n, *h, *w, *q),
        _ => unreachable!(),
    };
    let (per_sample, f, _, p) = conv_kernel_dims(k);
    let (oh, ow) = (out_shape[out_shape.len() - 3], out_shape[out_shape.len() - 2]);
    let kd = k.data();
    let ksz = f * f * q * p;
    let mut dx = vec![F::zero(); n * h * w * q];
    for s in 0..n {
        let ks = if per_sample { &kd[s * ksz..(s + 1) * ksz] } else { kd };
        for i in 0..oh {
            for j in 0..ow {
                let grow = &g[((s * oh + i) * ow + j) * p..][..p];
                for a in 0..f {
                    for b in 0..f {
                        let dxrow = &mut dx[((s * h + i + a) * w + j + b) * q..][..q];
                        for (qq, o) in dxrow.iter_mut().enumerate() {
                            let krow = &ks[((a * f + b) * q + qq) * p..][..p];
                            let mut acc = F::zero();
                            for (&gv, &kv) in grow.iter().zip(krow) {
                                acc += gv * kv;
                            }
                            *o += acc;
                        }
                    }
                }
            }
        }
    }
    dx
}

fn conv2d_backward_k<F: Scalar>(x: &Tensor<F>, k: &Tensor<F>, g: &[F], out_shape: &[usize]) -> Vec<F> {
    let (n, h, w, q) = match x.shape() {
        [h, w, q] => (1, *h, *w, *q),
        [n, h, w, q] => (*n, *h, *w, *q),
        _ => unreachable!(),
    };
    let (per_sample, f, _, p) = conv_kernel_dims(k);
    let (oh, ow) = (out_shape[out_shape.len() - 3], out_shape[out_shape.len() - 2]);
    let xd = x.data();
    let ksz = f * f * q * p;
    let mut dk = vec![F::zero(); k.numel()];
    for s in 0..n {
        let dks = if per_sample { &mut dk[s * ksz..(s + 1) * ksz] } else { &mut dk[..] };
        for i in 0..oh {
            for j in 0..ow {
                let grow = &g[((s * oh + i) * ow + j) * p..][..p];
                for a in 0..f {
                    for b in 0..f {
                        let xrow = &xd[((s * h + i + a) * w + j + b) * q..][..q];
                        for (qq, &xv) in xrow.iter().enumerate() {
                            let dkrow = &mut dks[((a * f + b) * q + qq) * p..][..p];
                            for (o, &gv) in dkrow.iter_mut().zip(grow) {
                                *o += xv * gv;
                            }
                        }
                    }
                }
            }
        }
    }
    dk
}

fn conv2d_diag_backward_x<F: Scalar>(x: &Tensor<F>, k: &Tensor<F>, g: &[F], out_shape: &[usize]) -> Vec<F> {
    let (n, h, w, c) = match x.shape() {
        [h, w, c] => (1, *h, *w, *c),
        [n, h, w, c] => (*n, *h, *w, *c),
        _ => unreachable!(),
    };
    let (per_sample, f) = match k.shape() {
        [f, _, _] => (false, *f),
        [_, f, _, _] => (true, *f),
        _ => unreachable!(),
    };
    let (oh, ow) = (out_shape[out_shape.len() - 3], out_shape[out_shape.len() - 2]);
    let kd = k.data();
    let ksz = f * f * c;
    let mut dx = vec![F::zero(); n * h * w * c];
    for s in 0..n {
        let ks = if per_sample { &kd[s * ksz..(s + 1) * ksz] } else { kd };
        for i in 0..oh {
            for j in 0..ow {
                let grow = &g[((s * oh + i) * ow + j) * c..][..c];
                for a in 0..f {
                    for b in 0..f {
                        let dxrow = &mut dx[((s * h + i + a) * w + j + b) * c..][..c];
                        let krow = &ks[(a * f + b) * c..][..c];
                        for ((o, &gv), &kv) in dxrow.iter_mut().zip(grow).zip(krow) {
                            *o += gv * kv;
                        }
                    }
                }
            }
        }
    }
    dx
}

fn conv2d_diag_backward_k<F: Scalar>(x: &Tensor<F>, k: &Tensor<F>, g: &[F], out_shape: &[usize]) -> Vec<F> {
    let (n, h, w, c) = match x.shape() {
        [h, w, c] => (1, *h, *w, *c),
        [n, h, w, c] => (*n, *h, *w, *c),
        _ => unreachable!(),
    };
    let (per_sample, f) = match k.shape() {
        [f, _, _] => (false, *f),
        [_, f, _, _] => (true, *f),
        _ => unreachable!(),
    };
    let (oh, ow) = (out_shape[out_shape.len() - 3], out_shape[out_shape.len() - 2]);
    let xd = x.data();
    let ksz = f * f * c;
    let mut dk = vec![F::zero(); k.numel()];
    for s in 0..n {
        let dks = if per_sample { &mut dk[s * ksz..(s + 1) * ksz] } else { &mut dk[..] };
        for i in 0..oh {
            for j in 0..ow {
                let grow = &g[((s * oh + i) * ow + j) * c..][..c];
                for a in 0..f {
                    for b in 0..f {
                        let xrow = &xd[((s * h + i + a) * w + j + b) * c..][..c];
                        let dkrow = &mut dks[(a * f + b) * c..][..c];
                        for ((o, &gv), &xv) in dkrow.iter_mut().zip(grow).zip(xrow) {
                            *o += gv * xv;
                        }
                    }
                }
            }
        }
    }
    dk
}

/// Maximum relative error between the recorded gradient of `f` at `x` and
/// central finite differences with step `h`.
///
/// `f` must build a scalar node from its input. The error for each element
/// is `|ad - fd| / max(1, |ad| + |fd|)`, so it is relative for gradients of
/// magnitude >= 1 and absolute below that.
pub fn check_gradient(
    f: impl Fn(&mut Tape<f64>, Val) -> Val,
    x: &Tensor<f64>,
    h: f64,
) -> f64 {
    let mut tape = Tape::new();
    let xv = tape.leaf(x.clone(), true);
    let loss = f(&mut tape, xv);
    let grads = tape.backward(loss);
    let ad = grads.get(xv).expect("input did not receive a gradient").clone();

    let eval = |t: &Tensor<f64>| -> f64 {
        let mut tape = Tape::new();
        let xv = tape.leaf(t.clone(), false);
        let loss = f(&mut tape, xv);
        tape.scalar_value(loss)
    };

    let mut max_err = 0.0f64;
    for i in 0..x.numel() {
        let mut plus = x.data().to_vec();
        plus[i] += h;
        let mut minus = x.data().to_vec();
        minus[i] -= h;
        let fp = eval(&Tensor::new(x.shape().to_vec(), plus));
        let fm = eval(&Tensor::new(x.shape().to_vec(), minus));
        let fd = (fp - fm) / (2.0 * h);
        let a = ad.data()[i];
        let err = (a - fd).abs() / 1.0f64.max(a.abs() + fd.abs());
        max_err = max_err.max(err);
    }
    max_err
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rng_tensor(shape: Vec<usize>, seed: u64) -> Tensor<f64> {
        let mut state = seed.wrapping_mul(6364136223846793005).wrapping_add(1);
        Tensor::from_fn(shape, |_| {
            state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            ((state >> 11) as f64 / (1u64 << 53) as f64) * 2.0 - 1.0
        })
    }

    #[test]
    fn backward_sum_is_ones() {
        let mut tape = Tape::new();
        let x = tape.leaf(rng_tensor(vec![3, 2], 1), true);
        let loss = tape.sum_all(x);
        let grads = tape.backward(loss);
        assert!(grads.get(x).unwrap().data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn backward_sum_of_squares() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::new(vec![2], vec![1.0, 2.0]), true);
        let sq = tape.mul(x, x);
        let loss = tape.sum_all(sq);
        let grads = tape.backward(loss);
        assert_eq!(grads.get(x).unwrap().data(), &[2.0, 4.0]);
    }

    #[test]
    fn backward_relu_clamps_gradient() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::new(vec![2], vec![-1.5, 2.0]), true);
        let r = tape.relu(x);
        let loss = tape.sum_all(r);
        let grads = tape.backward(loss);
        assert_eq!(grads.get(x).unwrap().data(), &[0.0, 1.0]);
    }

    #[test]
    #[should_panic(expected = "loss must be scalar")]
    fn backward_rejects_non_scalar_loss() {
        let mut tape: Tape<f64> = Tape::new();
        let x = tape.leaf(rng_tensor(vec![3], 2), true);
        let y = tape.relu(x);
        tape.backward(y);
    }

    #[test]
    fn check_gradient_sum_of_squares() {
        let x = rng_tensor(vec![4], 5);
        let err = check_gradient(
            |t, x| {
                let sq = t.mul(x, x);
                t.sum_all(sq)
            },
            &x,
            1e-6,
        );
        assert!(err <= 1e-7, "relative error {err}");
    }

    #[test]
    fn check_gradient_linear_is_nearly_exact() {
        let x = rng_tensor(vec![5], 6);
        let err = check_gradient(|t, x| t.sum_all(x), &x, 1e-6);
        assert!(err <= 1e-9, "relative error {err}");
    }

    #[test]
    fn check_gradient_conv_relu_chain() {
        let x = rng_tensor(vec![5, 5, 2], 7);
        let k = rng_tensor(vec![3, 3, 2, 3], 8);
        let b = rng_tensor(vec![3], 9);
        let err = check_gradient(
            |t, x| {
                let kv = t.constant(k.clone());
                let bv = t.constant(b.clone());
                let y = t.conv2d(x, kv, Some(bv));
                let r = t.relu(y);
                t.sum_all(r)
            },
            &x,
            1e-6,
        );
        assert!(err <= 1e-4, "relative error {err}");
    }

    /// Every registered operation against finite differences, perturbing
    /// each input in turn.
    #[test]
    fn check_gradient_every_op() {
        // conv2d w.r.t. kernel (shared and per-sample)
        let x = rng_tensor(vec![2, 5, 5, 2], 10);
        for kshape in [vec![3, 3, 2, 2], vec![2, 3, 3, 2, 2]] {
            let k0 = rng_tensor(kshape, 11);
            let xc = x.clone();
            let err = check_gradient(
                |t, k| {
                    let xv = t.constant(xc.clone());
                    let y = t.conv2d(xv, k, None);
                    t.sum_all(y)
                },
                &k0,
                1e-6,
            );
            assert!(err <= 1e-4, "conv2d kernel grad err {err}");
        }

        // conv2d_diag w.r.t. input and kernel
        let k = rng_tensor(vec![2, 2, 3], 12);
        let err = check_gradient(
            |t, x| {
                let kv = t.constant(k.clone());
                let y = t.conv2d_diag(x, kv);
                t.sum_all(y)
            },
            &rng_tensor(vec![4, 4, 3], 13),
            1e-6,
        );
        assert!(err <= 1e-4, "conv2d_diag input grad err {err}");

        // matvec both sides
        let a = rng_tensor(vec![3, 4], 14);
        let xv = rng_tensor(vec![2, 4], 15);
        let err = check_gradient(
            |t, av| {
                let x = t.constant(xv.clone());
                let y = t.matvec(av, x);
                t.sum_all(y)
            },
            &a,
            1e-6,
        );
        assert!(err <= 1e-4, "matvec matrix grad err {err}");
        let err = check_gradient(
            |t, x| {
                let av = t.constant(a.clone());
                let y = t.matvec(av, x);
                let sq = t.mul(y, y);
                t.sum_all(sq)
            },
            &xv,
            1e-6,
        );
        assert!(err <= 1e-4, "matvec input grad err {err}");

        // maxpool2 + mean
        let err = check_gradient(
            |t, x| {
                let p = t.maxpool2(x);
                t.mean_all(p)
            },
            &rng_tensor(vec![4, 6, 2], 16),
            1e-6,
        );
        assert!(err <= 1e-4, "maxpool grad err {err}");

        // abs, sqrt, per-sample sums, slicing, broadcast ops
        let err = check_gradient(
            |t, x| {
                let a = t.abs(x);
                let s = t.sum_per_sample(a);
                let r = t.sqrt(s);
                t.sum_all(r)
            },
            &rng_tensor(vec![3, 4], 17),
            1e-7,
        );
        assert!(err <= 1e-4, "abs/sqrt grad err {err}");

        let v = rng_tensor(vec![4], 18);
        let err = check_gradient(
            |t, x| {
                let vv = t.constant(v.clone());
                let m = t.mul_last(x, vv);
                let a = t.add_last(m, vv);
                let s = t.slice_last(a, 1, 2);
                t.sum_all(s)
            },
            &rng_tensor(vec![3, 4], 19),
            1e-6,
        );
        assert!(err <= 1e-4, "broadcast/slice grad err {err}");

        // batchnorm (train) w.r.t. input, gamma, beta
        let gamma = rng_tensor(vec![3], 20).map(|v| v + 2.0);
        let beta = rng_tensor(vec![3], 21);
        let xb = rng_tensor(vec![4, 3], 22);
        let err = check_gradient(
            |t, x| {
                let g = t.constant(gamma.clone());
                let b = t.constant(beta.clone());
                let (y, _) = t.batchnorm_train(x, g, b, 1e-5);
                let sq = t.mul(y, y);
                t.sum_all(sq)
            },
            &xb,
            1e-6,
        );
        assert!(err <= 1e-4, "batchnorm input grad err {err}");
        let err = check_gradient(
            |t, g| {
                let x = t.constant(xb.clone());
                let b = t.constant(beta.clone());
                let (y, _) = t.batchnorm_train(x, g, b, 1e-5);
                let sq = t.mul(y, y);
                t.sum_all(sq)
            },
            &gamma,
            1e-6,
        );
        assert!(err <= 1e-4, "batchnorm gamma grad err {err}");

        // batchnorm (eval)
        let err = check_gradient(
            |t, x| {
                let g = t.constant(gamma.clone());
                let b = t.constant(beta.clone());
                let y = t.batchnorm_eval(x, g, b, rng_tensor(vec![3], 23), rng_tensor(vec![3], 24).map(f64::abs), 1e-5);
                let sq = t.mul(y, y);
                t.sum_all(sq)
            },
            &xb,
            1e-6,
        );
        assert!(err <= 1e-4, "batchnorm eval grad err {err}");

        // logistic loss
        let labels = Tensor::new(vec![4], vec![1.0, -1.0, 1.0, -1.0]);
        let weights = Tensor::filled(vec![4], 0.25);
        let err = check_gradient(
            |t, s| t.logistic_sum(s, labels.clone(), weights.clone()),
            &rng_tensor(vec![4], 25),
            1e-6,
        );
        assert!(err <= 1e-4, "logistic grad err {err}");
    }

    #[test]
    fn gradients_accumulate_across_reuse() {
        // y = x*x + x: dy/dx = 2x + 1
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::new(vec![2], vec![3.0, -2.0]), true);
        let sq = tape.mul(x, x);
        let sum = tape.add(sq, x);
        let loss = tape.sum_all(sum);
        let grads = tape.backward(loss);
        assert_eq!(grads.get(x).unwrap().data(), &[7.0, -3.0]);
    }
}
