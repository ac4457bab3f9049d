//! Dense n-dimensional tensors and the numerical kernels used by every layer.
//!
//! Conventions: row-major element order, channel-last image layout
//! (`[h, w, c]`, batched `[n, h, w, c]`). Convolutions are cross-correlations
//! (no kernel flip) with valid padding and stride 1. All kernels are pure:
//! inputs are never mutated and identical inputs give bitwise-identical
//! outputs. Shape mismatches are programmer errors and panic with a
//! descriptive dimension message; configuration-level validation rejects
//! inconsistent shape chains before any kernel runs.

use crate::scalar::Scalar;

/// Dense tensor of real values with immutable shape.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<F> {
    shape: Vec<usize>,
    data: Vec<F>,
}

impl<F: Scalar> Tensor<F> {
    pub fn new(shape: Vec<usize>, data: Vec<F>) -> Self {
        let numel: usize = shape.iter().product();
        assert!(
            shape.iter().all(|&d| d > 0),
            "tensor dimensions must be positive, got {shape:?}"
        );
        assert_eq!(
            data.len(),
            numel,
            "element count {} does not match shape {:?}",
            data.len(),
            shape
        );
        Tensor { shape, data }
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let numel = shape.iter().product();
        Tensor::new(shape, vec![F::zero(); numel])
    }

    pub fn filled(shape: Vec<usize>, v: F) -> Self {
        let numel = shape.iter().product();
        Tensor::new(shape, vec![v; numel])
    }

    /// Scalar tensor of shape `[1]`.
    pub fn scalar(v: F) -> Self {
        Tensor::new(vec![1], vec![v])
    }

    pub fn from_fn(shape: Vec<usize>, mut f: impl FnMut(usize) -> F) -> Self {
        let numel: usize = shape.iter().product();
        Tensor::new(shape, (0..numel).map(&mut f).collect())
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[F] {
        &self.data
    }

    /// Value at a multi-dimensional index (row-major).
    pub fn at(&self, idx: &[usize]) -> F {
        self.data[self.offset(idx)]
    }

    pub fn offset(&self, idx: &[usize]) -> usize {
        assert_eq!(idx.len(), self.shape.len(), "index rank mismatch");
        let mut off = 0;
        for (i, (&ix, &dim)) in idx.iter().zip(&self.shape).enumerate() {
            assert!(ix < dim, "index {ix} out of bounds for axis {i} (dim {dim})");
            off = off * dim + ix;
        }
        off
    }

    /// Validity check: true iff every element is finite (no NaN/Inf).
    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Same elements under a new shape with equal element count.
    pub fn reshape(&self, shape: Vec<usize>) -> Tensor<F> {
        Tensor::new(shape, self.data.clone())
    }

    /// Element-wise conversion to another precision.
    pub fn cast<G: Scalar>(&self) -> Tensor<G> {
        Tensor::new(
            self.shape.clone(),
            self.data.iter().map(|v| G::from_f64(v.as_f64())).collect(),
        )
    }

    pub fn map(&self, f: impl Fn(F) -> F) -> Tensor<F> {
        Tensor::new(self.shape.clone(), self.data.iter().map(|&v| f(v)).collect())
    }

    /// Largest absolute difference against another tensor of the same shape.
    pub fn max_abs_diff(&self, other: &Tensor<F>) -> F {
        assert_eq!(self.shape, other.shape, "max_abs_diff: shape mismatch");
        self.data
            .iter()
            .zip(&other.data)
            .fold(F::zero(), |m, (&a, &b)| m.max((a - b).abs()))
    }
}

/// Stack equally shaped tensors along a new leading batch axis.
pub fn stack<F: Scalar>(items: &[&Tensor<F>]) -> Tensor<F> {
    assert!(!items.is_empty(), "stack: empty input");
    let shape = items[0].shape().to_vec();
    let mut data = Vec::with_capacity(items.len() * items[0].numel());
    for t in items {
        assert_eq!(t.shape(), &shape[..], "stack: shape mismatch");
        data.extend_from_slice(t.data());
    }
    let mut out_shape = vec![items.len()];
    out_shape.extend_from_slice(&shape);
    Tensor::new(out_shape, data)
}

/// View of an image tensor as batched `[n, h, w, c]`.
///
/// Rank-3 inputs are treated as a single-sample batch. Returns
/// `(n, h, w, c, batched)` where `batched` records the original rank.
fn image_dims<F: Scalar>(x: &Tensor<F>) -> (usize, usize, usize, usize, bool) {
    match x.shape() {
        [h, w, c] => (1, *h, *w, *c, false),
        [n, h, w, c] => (*n, *h, *w, *c, true),
        s => panic!("expected image tensor of rank 3 or 4, got shape {s:?}"),
    }
}

fn image_shape(n: usize, h: usize, w: usize, c: usize, batched: bool) -> Vec<usize> {
    if batched {
        vec![n, h, w, c]
    } else {
        vec![h, w, c]
    }
}

/// 2-d cross-correlation, valid padding, stride 1.
///
/// `x`: `[h, w, q]` or `[n, h, w, q]`; `k`: `[f, f, q, p]` shared across the
/// batch or `[n, f, f, q, p]` with one filter bank per sample; `bias`: `[p]`
/// added to each output channel.
pub fn conv2d<F: Scalar>(x: &Tensor<F>, k: &Tensor<F>, bias: Option<&Tensor<F>>) -> Tensor<F> {
    let (n, h, w, q, batched) = image_dims(x);
    let (per_sample, f, kq, p) = match k.shape() {
        [f, f2, kq, p] => {
            assert_eq!(f, f2, "conv2d: kernel support must be square, got {f}x{f2}");
            (false, *f, *kq, *p)
        }
        [kn, f, f2, kq, p] => {
            assert_eq!(f, f2, "conv2d: kernel support must be square, got {f}x{f2}");
            assert_eq!(*kn, n, "conv2d: per-sample kernel batch {kn} != input batch {n}");
            (true, *f, *kq, *p)
        }
        s => panic!("conv2d: expected kernel rank 4 or 5, got shape {s:?}"),
    };
    assert_eq!(kq, q, "conv2d: input has {q} channels but kernel expects {kq}");
    assert!(f <= h && f <= w, "conv2d: kernel {f}x{f} larger than input {h}x{w}");
    if let Some(b) = bias {
        assert_eq!(b.shape(), [p], "conv2d: bias shape {:?} != [{p}]", b.shape());
    }

    let (oh, ow) = (h - f + 1, w - f + 1);
    let mut out = vec![F::zero(); n * oh * ow * p];
    let xd = x.data();
    let kd = k.data();
    let ksz = f * f * q * p;

    for s in 0..n {
        let ks = if per_sample { &kd[s * ksz..(s + 1) * ksz] } else { kd };
        for i in 0..oh {
            for j in 0..ow {
                let orow = &mut out[((s * oh + i) * ow + j) * p..][..p];
                if let Some(b) = bias {
                    orow.copy_from_slice(b.data());
                }
                for a in 0..f {
                    for bb in 0..f {
                        let xrow = &xd[((s * h + i + a) * w + j + bb) * q..][..q];
                        for (qq, &xv) in xrow.iter().enumerate() {
                            let krow = &ks[((a * f + bb) * q + qq) * p..][..p];
                            for (o, &kv) in orow.iter_mut().zip(krow) {
                                *o += xv * kv;
                            }
                        }
                    }
                }
            }
        }
    }
    Tensor::new(image_shape(n, oh, ow, p, batched), out)
}

/// Channel-diagonal convolution: channel `i` of the output is the valid
/// cross-correlation of channel `i` of `x` with filter `i` of `k`
/// (equivalently, one filter group per channel).
///
/// `x`: `[h, w, c]` or `[n, h, w, c]`; `k`: `[f, f, c]` or per-sample
/// `[n, f, f, c]`.
pub fn conv2d_diag<F: Scalar>(x: &Tensor<F>, k: &Tensor<F>) -> Tensor<F> {
    let (n, h, w, c, batched) = image_dims(x);
    let (per_sample, f, kc) = match k.shape() {
        [f, f2, kc] => {
            assert_eq!(f, f2, "conv2d_diag: kernel support must be square, got {f}x{f2}");
            (false, *f, *kc)
        }
        [kn, f, f2, kc] => {
            assert_eq!(f, f2, "conv2d_diag: kernel support must be square, got {f}x{f2}");
            assert_eq!(*kn, n, "conv2d_diag: per-sample kernel batch {kn} != input batch {n}");
            (true, *f, *kc)
        }
        s => panic!("conv2d_diag: expected kernel rank 3 or 4, got shape {s:?}"),
    };
    assert_eq!(kc, c, "conv2d_diag: input has {c} channels but kernel has {kc}");
    assert!(f <= h && f <= w, "conv2d_diag: kernel {f}x{f} larger than input {h}x{w}");

    let (oh, ow) = (h - f + 1, w - f + 1);
    let mut out = vec![F::zero(); n * oh * ow * c];
    let xd = x.data();
    let kd = k.data();
    let ksz = f * f * c;

    for s in 0..n {
        let ks = if per_sample { &kd[s * ksz..(s + 1) * ksz] } else { kd };
        for i in 0..oh {
            for j in 0..ow {
                let orow = &mut out[((s * oh + i) * ow + j) * c..][..c];
                for a in 0..f {
                    for bb in 0..f {
                        let xrow = &xd[((s * h + i + a) * w + j + bb) * c..][..c];
                        let krow = &ks[(a * f + bb) * c..][..c];
                        for ((o, &xv), &kv) in orow.iter_mut().zip(xrow).zip(krow) {
                            *o += xv * kv;
                        }
                    }
                }
            }
        }
    }
    Tensor::new(image_shape(n, oh, ow, c, batched), out)
}

/// Matrix-vector product `y = A·x` with `A: [m, n]`. A batched right-hand
/// side `[b, n]` yields `[b, m]`.
pub fn matvec<F: Scalar>(a: &Tensor<F>, x: &Tensor<F>) -> Tensor<F> {
    let (m, n) = match a.shape() {
        [m, n] => (*m, *n),
        s => panic!("matvec: expected matrix of rank 2, got shape {s:?}"),
    };
    let (batch, xn, batched) = match x.shape() {
        [xn] => (1, *xn, false),
        [b, xn] => (*b, *xn, true),
        s => panic!("matvec: expected vector of rank 1 or 2, got shape {s:?}"),
    };
    assert_eq!(n, xn, "matvec: inner dimensions disagree ({m}x{n} vs {xn})");

    let ad = a.data();
    let xd = x.data();
    let mut out = vec![F::zero(); batch * m];
    for s in 0..batch {
        let xrow = &xd[s * n..][..n];
        let orow = &mut out[s * m..][..m];
        for (i, o) in orow.iter_mut().enumerate() {
            let arow = &ad[i * n..][..n];
            let mut acc = F::zero();
            for (&av, &xv) in arow.iter().zip(xrow) {
                acc += av * xv;
            }
            *o = acc;
        }
    }
    let shape = if batched { vec![batch, m] } else { vec![m] };
    Tensor::new(shape, out)
}

fn zip_same_shape<F: Scalar>(a: &Tensor<F>, b: &Tensor<F>, op: &str, f: impl Fn(F, F) -> F) -> Tensor<F> {
    assert_eq!(
        a.shape(),
        b.shape(),
        "{op}: shapes {:?} and {:?} disagree",
        a.shape(),
        b.shape()
    );
    Tensor::new(
        a.shape().to_vec(),
        a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect(),
    )
}

pub fn add<F: Scalar>(a: &Tensor<F>, b: &Tensor<F>) -> Tensor<F> {
    zip_same_shape(a, b, "add", |x, y| x + y)
}

pub fn sub<F: Scalar>(a: &Tensor<F>, b: &Tensor<F>) -> Tensor<F> {
    zip_same_shape(a, b, "sub", |x, y| x - y)
}

pub fn mul<F: Scalar>(a: &Tensor<F>, b: &Tensor<F>) -> Tensor<F> {
    zip_same_shape(a, b, "mul", |x, y| x * y)
}

pub fn scale<F: Scalar>(x: &Tensor<F>, c: F) -> Tensor<F> {
    x.map(|v| v * c)
}

/// Broadcast `v` (length = last axis of `x`) with `op` over every row of `x`.
fn broadcast_last<F: Scalar>(x: &Tensor<F>, v: &Tensor<F>, op_name: &str, f: impl Fn(F, F) -> F) -> Tensor<F> {
    let last = *x.shape().last().expect("broadcast over empty shape");
    assert_eq!(
        v.shape(),
        [last],
        "{op_name}: vector shape {:?} does not match last axis {last}",
        v.shape()
    );
    let vd = v.data();
    let mut out = Vec::with_capacity(x.numel());
    for row in x.data().chunks_exact(last) {
        for (&xv, &vv) in row.iter().zip(vd) {
            out.push(f(xv, vv));
        }
    }
    Tensor::new(x.shape().to_vec(), out)
}

/// Add a vector across the last axis (for example a per-channel bias).
pub fn add_last<F: Scalar>(x: &Tensor<F>, v: &Tensor<F>) -> Tensor<F> {
    broadcast_last(x, v, "add_last", |a, b| a + b)
}

/// Multiply by a vector across the last axis (per-channel or per-feature weights).
pub fn mul_last<F: Scalar>(x: &Tensor<F>, v: &Tensor<F>) -> Tensor<F> {
    broadcast_last(x, v, "mul_last", |a, b| a * b)
}

pub fn relu<F: Scalar>(x: &Tensor<F>) -> Tensor<F> {
    x.map(|v| v.max(F::zero()))
}

pub fn abs<F: Scalar>(x: &Tensor<F>) -> Tensor<F> {
    x.map(|v| v.abs())
}

pub fn sqrt<F: Scalar>(x: &Tensor<F>) -> Tensor<F> {
    x.map(|v| v.sqrt())
}

/// Non-overlapping 2x2 max pooling with stride 2, per channel; a trailing odd
/// row/column is dropped.
pub fn maxpool2<F: Scalar>(x: &Tensor<F>) -> Tensor<F> {
    let (n, h, w, c, batched) = image_dims(x);
    assert!(h >= 2 && w >= 2, "maxpool2: input {h}x{w} smaller than 2x2 window");
    let (oh, ow) = (h / 2, w / 2);
    let xd = x.data();
    let mut out = vec![F::zero(); n * oh * ow * c];
    for s in 0..n {
        for i in 0..oh {
            for j in 0..ow {
                let orow = &mut out[((s * oh + i) * ow + j) * c..][..c];
                for (di, dj) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                    let xrow = &xd[((s * h + 2 * i + di) * w + 2 * j + dj) * c..][..c];
                    if di == 0 && dj == 0 {
                        orow.copy_from_slice(xrow);
                    } else {
                        for (o, &xv) in orow.iter_mut().zip(xrow) {
                            *o = o.max(xv);
                        }
                    }
                }
            }
        }
    }
    Tensor::new(image_shape(n, oh, ow, c, batched), out)
}

/// Per-channel first and second moments used by batch normalization.
#[derive(Clone, Debug)]
pub struct BnStats<F> {
    pub mean: Tensor<F>,
    pub var: Tensor<F>,
}

/// Channel count and per-channel group size of a batch-normalizable tensor
/// (`[n, d]` or `[n, h, w, c]`; channels are the last axis).
fn bn_dims<F: Scalar>(x: &Tensor<F>) -> (usize, usize) {
    match x.shape() {
        [n, d] => (*d, *n),
        [n, h, w, c] => (*c, n * h * w),
        s => panic!("batchnorm: expected rank 2 or 4 batched tensor, got shape {s:?}"),
    }
}

/// Batch statistics (biased variance) per channel.
pub fn bn_batch_stats<F: Scalar>(x: &Tensor<F>) -> BnStats<F> {
    let (c, group) = bn_dims(x);
    let gf = F::from_f64(group as f64);
    let mut mean = vec![F::zero(); c];
    for row in x.data().chunks_exact(c) {
        for (m, &v) in mean.iter_mut().zip(row) {
            *m += v;
        }
    }
    for m in mean.iter_mut() {
        *m = *m / gf;
    }
    let mut var = vec![F::zero(); c];
    for row in x.data().chunks_exact(c) {
        for ((vv, &v), &m) in var.iter_mut().zip(row).zip(&mean) {
            let d = v - m;
            *vv += d * d;
        }
    }
    for v in var.iter_mut() {
        *v = *v / gf;
    }
    BnStats {
        mean: Tensor::new(vec![c], mean),
        var: Tensor::new(vec![c], var),
    }
}

/// Normalize per channel with the given statistics, then scale by `gamma`
/// and shift by `beta`.
pub fn bn_normalize<F: Scalar>(
    x: &Tensor<F>,
    gamma: &Tensor<F>,
    beta: &Tensor<F>,
    stats: &BnStats<F>,
    eps: F,
) -> Tensor<F> {
    let (c, _) = bn_dims(x);
    assert_eq!(gamma.shape(), [c], "batchnorm: gamma shape {:?} != [{c}]", gamma.shape());
    assert_eq!(beta.shape(), [c], "batchnorm: beta shape {:?} != [{c}]", beta.shape());
    let inv_std: Vec<F> = stats.var.data().iter().map(|&v| (v + eps).sqrt().recip()).collect();
    let mut out = Vec::with_capacity(x.numel());
    for row in x.data().chunks_exact(c) {
        for (i, &v) in row.iter().enumerate() {
            out.push((v - stats.mean.data()[i]) * inv_std[i] * gamma.data()[i] + beta.data()[i]);
        }
    }
    Tensor::new(x.shape().to_vec(), out)
}

/// Training-mode batch normalization: normalizes with batch statistics and
/// returns them so the caller can fold them into the running averages.
/// Requires batch dimension >= 2.
pub fn batchnorm_train<F: Scalar>(
    x: &Tensor<F>,
    gamma: &Tensor<F>,
    beta: &Tensor<F>,
    eps: F,
) -> (Tensor<F>, BnStats<F>) {
    assert!(
        x.shape()[0] >= 2,
        "batchnorm: training mode requires batch dimension >= 2, got {}",
        x.shape()[0]
    );
    let stats = bn_batch_stats(x);
    let y = bn_normalize(x, gamma, beta, &stats, eps);
    (y, stats)
}

/// Evaluation-mode batch normalization using running statistics.
pub fn batchnorm_eval<F: Scalar>(
    x: &Tensor<F>,
    gamma: &Tensor<F>,
    beta: &Tensor<F>,
    running_mean: &Tensor<F>,
    running_var: &Tensor<F>,
    eps: F,
) -> Tensor<F> {
    let stats = BnStats {
        mean: running_mean.clone(),
        var: running_var.clone(),
    };
    bn_normalize(x, gamma, beta, &stats, eps)
}

pub fn sum_all<F: Scalar>(x: &Tensor<F>) -> F {
    x.data().iter().fold(F::zero(), |a, &b| a + b)
}

/// Sum every axis except the leading batch axis: `[n, ...] -> [n]`.
pub fn sum_per_sample<F: Scalar>(x: &Tensor<F>) -> Tensor<F> {
    let n = x.shape()[0];
    let per = x.numel() / n;
    let out = x
        .data()
        .chunks_exact(per)
        .map(|row| row.iter().fold(F::zero(), |a, &b| a + b))
        .collect();
    Tensor::new(vec![n], out)
}
