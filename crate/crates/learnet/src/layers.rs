//! Layer kinds and their forward rules: plain convolution / fully-connected
//! layers, their factorized counterparts whose inner weights can be supplied
//! per exemplar, and the basis-filter expansion that converts a factorized
//! convolution into an equivalent general filter bank.
//!
//! A factorized convolution maps the input channels into a factorized space
//! with a 1x1 projection `M` (q -> r channels), filters each of the r
//! channels independently with its own f x f filter, and projects back with
//! a second 1x1 convolution `M'` (r -> p). The per-channel filters are the
//! part a meta-network predicts; `M` and `M'` stay ordinary trainable
//! parameters.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Val};
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use crate::{Error, Result};

/// Epsilon added to the variance in batch normalization.
pub const BN_EPS: f64 = 1e-5;
/// Exponential-average decay for batch-norm running statistics.
pub const BN_DECAY: f64 = 0.9;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConvSpec {
    /// Square filter support size.
    pub f: usize,
    /// Output channels.
    pub out: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FcSpec {
    pub out: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FactorizedConvSpec {
    pub f: usize,
    pub out: usize,
    /// Factorized channel count; defaults to `out`.
    #[serde(default)]
    pub r: Option<usize>,
    /// Predict the bias alongside the filters instead of learning it.
    #[serde(default)]
    pub predicted_bias: bool,
}

impl FactorizedConvSpec {
    pub fn r(&self) -> usize {
        self.r.unwrap_or(self.out)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FactorizedFcSpec {
    pub out: usize,
    #[serde(default)]
    pub predicted_bias: bool,
}

/// One layer of a stream or meta-network. Dimensions not listed here
/// (input channels, the factorized fully-connected width) are derived by
/// chaining shapes from the network input.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LayerSpec {
    Conv(ConvSpec),
    Fc(FcSpec),
    FactorizedConv(FactorizedConvSpec),
    FactorizedFc(FactorizedFcSpec),
    Maxpool,
    Relu,
    Batchnorm,
}

impl LayerSpec {
    /// True for the layer kinds whose inner weights a meta-network can predict.
    pub fn is_factorized(&self) -> bool {
        matches!(self, LayerSpec::FactorizedConv(_) | LayerSpec::FactorizedFc(_))
    }
}

/// Output shape of a layer for an unbatched input shape (`[h, w, c]` for
/// image layers, `[d]` after a fully-connected layer).
pub fn layer_output_shape(layer: &LayerSpec, input: &[usize]) -> Result<Vec<usize>> {
    let image = |what: &str| -> Result<(usize, usize, usize)> {
        match input {
            [h, w, c] => Ok((*h, *w, *c)),
            s => Err(Error::Shape(format!(
                "{what} expects an image input [h, w, c], got {s:?}"
            ))),
        }
    };
    match layer {
        LayerSpec::Conv(c) => {
            let (h, w, _) = image("conv")?;
            if c.f > h || c.f > w {
                return Err(Error::Shape(format!(
                    "conv filter {f}x{f} larger than input {h}x{w}",
                    f = c.f
                )));
            }
            Ok(vec![h - c.f + 1, w - c.f + 1, c.out])
        }
        LayerSpec::FactorizedConv(c) => {
            let (h, w, _) = image("factorized-conv")?;
            if c.f > h || c.f > w {
                return Err(Error::Shape(format!(
                    "factorized-conv filter {f}x{f} larger than input {h}x{w}",
                    f = c.f
                )));
            }
            Ok(vec![h - c.f + 1, w - c.f + 1, c.out])
        }
        LayerSpec::Fc(fc) => Ok(vec![fc.out]),
        LayerSpec::FactorizedFc(fc) => Ok(vec![fc.out]),
        LayerSpec::Maxpool => {
            let (h, w, c) = image("maxpool")?;
            if h < 2 || w < 2 {
                return Err(Error::Shape(format!("maxpool input {h}x{w} smaller than 2x2")));
            }
            Ok(vec![h / 2, w / 2, c])
        }
        LayerSpec::Relu => Ok(input.to_vec()),
        LayerSpec::Batchnorm => match input {
            [_, _, _] | [_] => Ok(input.to_vec()),
            s => Err(Error::Shape(format!(
                "batchnorm expects [h, w, c] or [d] input, got {s:?}"
            ))),
        },
    }
}

/// Number of elements a meta-network must predict for a dynamic layer:
/// `f^2 * r` filter values for a factorized convolution, `d` diagonal values
/// for a factorized fully-connected layer, plus the bias when it is
/// predicted rather than learned.
pub fn count_predicted(layer: &LayerSpec, in_features: usize) -> usize {
    match layer {
        LayerSpec::FactorizedConv(c) => {
            c.f * c.f * c.r() + if c.predicted_bias { c.out } else { 0 }
        }
        LayerSpec::FactorizedFc(fc) => in_features + if fc.predicted_bias { fc.out } else { 0 },
        _ => 0,
    }
}

/// Number of elements a naive (unfactorized) prediction of the full weight
/// array would require: `f^2 * d * k` for a convolution, `d * k` for a
/// fully-connected layer.
pub fn count_naive(layer: &LayerSpec, in_features: usize) -> usize {
    match layer {
        LayerSpec::Conv(c) => c.f * c.f * in_features * c.out,
        LayerSpec::FactorizedConv(c) => c.f * c.f * in_features * c.out,
        LayerSpec::Fc(fc) => in_features * fc.out,
        LayerSpec::FactorizedFc(fc) => in_features * fc.out,
        _ => 0,
    }
}

/// Weight count of a linear meta-network that regresses a full `d x k`
/// weight matrix from an `m`-feature exemplar.
pub fn count_linear_learnet(m: usize, d: usize, k: usize) -> usize {
    m * d * k
}

/// `y = W x + b` with `W: [k, d]` (one row per output).
pub fn fc_forward<F: Scalar>(tape: &mut Tape<F>, w: Val, b: Val, x: Val) -> Val {
    let y = tape.matvec(w, x);
    tape.add_last(y, b)
}

/// Factorized fully-connected layer `y = M' diag(w_pred) M x + bias`.
///
/// `m: [d, d]`, `mprime: [k, d]`; `w_pred` has length `d` (or `[n, d]` with
/// one prediction per sample). `bias` is the static or predicted bias.
pub fn factorized_fc_forward<F: Scalar>(
    tape: &mut Tape<F>,
    m: Val,
    mprime: Val,
    w_pred: Val,
    bias: Option<Val>,
    x: Val,
) -> Val {
    let h = tape.matvec(m, x);
    let hw = if tape.value(w_pred).rank() + 1 == tape.value(h).rank() {
        // Shared prediction vector against a batched activation.
        tape.mul_last(h, w_pred)
    } else {
        tape.mul(h, w_pred)
    };
    let y = tape.matvec(mprime, hw);
    match bias {
        Some(b) => bias_add(tape, y, b),
        None => y,
    }
}

/// Factorized convolution `y = M' * (w_pred (diag-conv) (M * x)) + bias`.
///
/// `m: [1, 1, q, r]`, `mprime: [1, 1, r, p]`, `w_pred: [f, f, r]` (or
/// `[n, f, f, r]` per sample). Spatial size shrinks only at the f x f stage.
pub fn factorized_conv_forward<F: Scalar>(
    tape: &mut Tape<F>,
    m: Val,
    mprime: Val,
    w_pred: Val,
    bias: Option<Val>,
    x: Val,
) -> Val {
    let projected = tape.conv2d(x, m, None);
    let filtered = tape.conv2d_diag(projected, w_pred);
    match bias {
        Some(b) if tape.value(b).rank() == 2 => {
            // Per-sample predicted bias cannot ride on the conv op itself.
            let y = tape.conv2d(filtered, mprime, None);
            bias_add(tape, y, b)
        }
        _ => tape.conv2d(filtered, mprime, bias),
    }
}

/// Add a bias that is either shared (`[k]`) or per-sample (`[n, k]`, for a
/// batched `[n, ..., k]` activation).
fn bias_add<F: Scalar>(tape: &mut Tape<F>, y: Val, b: Val) -> Val {
    if tape.value(b).rank() == 1 {
        return tape.add_last(y, b);
    }
    let yshape = tape.value(y).shape().to_vec();
    let (n, k) = (tape.value(b).shape()[0], tape.value(b).shape()[1]);
    assert_eq!(yshape[0], n, "bias_add: batch mismatch");
    assert_eq!(*yshape.last().unwrap(), k, "bias_add: channel mismatch");
    let rows_per_sample: usize = yshape[1..yshape.len() - 1].iter().product();
    if rows_per_sample == 1 {
        let flat = tape.reshape(y, vec![n, k]);
        let sum = tape.add(flat, b);
        return tape.reshape(sum, yshape);
    }
    let tiled = tile_rows(tape, b, rows_per_sample);
    let tiled = tape.reshape(tiled, yshape.clone());
    tape.add(y, tiled)
}

/// Repeat each row of a `[n, k]` matrix `times` times, giving
/// `[n, times, k]`, with gradients flowing back to the rows.
fn tile_rows<F: Scalar>(tape: &mut Tape<F>, b: Val, times: usize) -> Val {
    let (n, k) = (tape.value(b).shape()[0], tape.value(b).shape()[1]);
    // A fixed 0/1 selection matrix keeps this an ordinary differentiable op.
    let mut data = vec![F::zero(); times * k * k];
    for t in 0..times {
        for j in 0..k {
            data[(t * k + j) * k + j] = F::one();
        }
    }
    let sel = Tensor::new(vec![times * k, k], data);
    let selv = tape.constant(sel);
    let tiled = tape.matvec(selv, b);
    tape.reshape(tiled, vec![n, times, k])
}

/// Expand a factorized convolution into the equivalent general filter bank:
/// `bank[a, b, j, i] = sum_k mprime[k -> i] * m[j -> k] * w[a, b, k]`.
///
/// Convolving with the returned `[f, f, q, p]` bank reproduces
/// [`factorized_conv_forward`] up to floating-point accumulation order,
/// which makes this the independent correctness oracle for the factorized
/// path.
pub fn basis_filter_expand<F: Scalar>(
    m: &Tensor<F>,
    w_pred: &Tensor<F>,
    mprime: &Tensor<F>,
) -> Tensor<F> {
    let (q, r) = match m.shape() {
        [1, 1, q, r] => (*q, *r),
        s => panic!("basis_filter_expand: M must be [1,1,q,r], got {s:?}"),
    };
    let (r2, p) = match mprime.shape() {
        [1, 1, r2, p] => (*r2, *p),
        s => panic!("basis_filter_expand: M' must be [1,1,r,p], got {s:?}"),
    };
    assert_eq!(r, r2, "basis_filter_expand: M maps to {r} channels but M' expects {r2}");
    let f = match w_pred.shape() {
        [f, f2, wr] => {
            assert_eq!(f, f2, "basis_filter_expand: filters must be square");
            assert_eq!(*wr, r, "basis_filter_expand: {wr} filters for {r} channels");
            *f
        }
        s => panic!("basis_filter_expand: w must be [f,f,r], got {s:?}"),
    };

    let mut bank = vec![F::zero(); f * f * q * p];
    for a in 0..f {
        for b in 0..f {
            for j in 0..q {
                for i in 0..p {
                    let mut acc = F::zero();
                    for k in 0..r {
                        acc += mprime.at(&[0, 0, k, i]) * m.at(&[0, 0, j, k]) * w_pred.at(&[a, b, k]);
                    }
                    bank[((a * f + b) * q + j) * p + i] = acc;
                }
            }
        }
    }
    Tensor::new(vec![f, f, q, p], bank)
}
