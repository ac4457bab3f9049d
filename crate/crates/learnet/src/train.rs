//! Training: triplet sampling, logistic objectives over scalar scores or
//! convolutional score maps, parameter initialization, and plain SGD with a
//! geometric learning-rate schedule and decoupled weight decay.

use std::collections::BTreeMap;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{make_tracking_triplet, Alphabet, CharacterDataset, SyntheticSequence};
use crate::networks::{Forward, Mode, NetworkSpec, ParamDef, ParamKind, ParamSet, Plan};
use crate::scalar::Scalar;
use crate::tensor::{stack, Tensor};
use crate::{Error, Result};

/// One training sample: exemplar, candidate, and whether they match.
#[derive(Clone, Debug)]
pub struct Triplet<F> {
    pub z: Tensor<F>,
    pub x: Tensor<F>,
    /// +1 when `x` and `z` depict the same class, -1 otherwise.
    pub label: f64,
}

/// Numerically stable logistic sigmoid.
pub fn sigmoid<F: Scalar>(t: F) -> F {
    if t >= F::zero() {
        F::one() / (F::one() + (-t).exp())
    } else {
        let e = t.exp();
        e / (F::one() + e)
    }
}

/// Logistic loss `log(1 + exp(-label * score))`, stable for large |score|.
pub fn logistic_loss<F: Scalar>(score: F, label: F) -> F {
    let t = -label * score;
    if t > F::zero() {
        t + (-t).exp().ln_1p()
    } else {
        t.exp().ln_1p()
    }
}

/// Standard normal draw (Box-Muller) from the given generator.
pub fn standard_normal<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    let u1: f64 = 1.0 - rng.random::<f64>();
    let u2: f64 = rng.random();
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

/// Weight initialization scheme.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum InitScheme {
    /// Zero-mean Gaussian with standard deviation `sqrt(2 / fan_in)`.
    #[default]
    ImprovedXavier,
    /// Zero-mean Gaussian with a fixed standard deviation.
    Gaussian(f64),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub triplets_per_epoch: usize,
    pub batch_size: usize,
    pub lr_initial: f64,
    pub lr_final: f64,
    #[serde(default)]
    pub weight_decay: f64,
    pub positive_fraction: f64,
    pub seed: u64,
    #[serde(default)]
    pub init: InitScheme,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr_final > 0.0 && self.lr_final <= self.lr_initial) {
            return Err(Error::Config(format!(
                "need 0 < lr_final <= lr_initial, got {} and {}",
                self.lr_final, self.lr_initial
            )));
        }
        if !(0.0..=1.0).contains(&self.positive_fraction) {
            return Err(Error::Config(format!(
                "positive_fraction must lie in [0, 1], got {}",
                self.positive_fraction
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if self.weight_decay < 0.0 {
            return Err(Error::Config("weight_decay must be nonnegative".into()));
        }
        Ok(())
    }
}

/// Geometric interpolation from `lr_initial` (epoch 0) to `lr_final`
/// (last epoch); constant when there is a single epoch.
pub fn lr_schedule(cfg: &TrainConfig, epoch: usize) -> f64 {
    assert!(epoch < cfg.epochs.max(1), "epoch {epoch} out of range");
    if cfg.epochs <= 1 {
        return cfg.lr_initial;
    }
    let t = epoch as f64 / (cfg.epochs - 1) as f64;
    cfg.lr_initial * (cfg.lr_final / cfg.lr_initial).powf(t)
}

/// Draw every parameter the spec requires: weights from the configured
/// Gaussian, biases zero, batch-norm scale one / shift zero.
pub fn init_params<F: Scalar, R: Rng + ?Sized>(
    spec: &NetworkSpec,
    rng: &mut R,
    scheme: InitScheme,
) -> ParamSet<F> {
    let defs = crate::networks::param_defs(spec).expect("invalid network spec");
    let mut params = ParamSet::new();
    for ParamDef { name, shape, kind } in defs {
        let t = match kind {
            ParamKind::Weight { fan_in } => {
                let sigma = match scheme {
                    InitScheme::ImprovedXavier => (2.0 / fan_in as f64).sqrt(),
                    InitScheme::Gaussian(s) => s,
                };
                Tensor::from_fn(shape, |_| F::from_f64(sigma * standard_normal(rng)))
            }
            ParamKind::Zeros => Tensor::zeros(shape),
            ParamKind::Ones => Tensor::filled(shape, F::one()),
        };
        params.insert(name, t);
    }
    params
}

/// One SGD update `p <- p - lr * (g + weight_decay * p)`; batch-norm
/// scale/shift are excluded from the decay term and running statistics are
/// not touched.
pub fn sgd_step<F: Scalar>(
    params: &mut ParamSet<F>,
    grads: &BTreeMap<String, Tensor<F>>,
    lr: f64,
    weight_decay: f64,
) -> Result<()> {
    let lr = F::from_f64(lr);
    let wd = F::from_f64(weight_decay);
    let names: Vec<String> = params
        .iter()
        .map(|(n, _)| n.clone())
        .filter(|n| ParamSet::<F>::is_trainable(n))
        .collect();
    for name in names {
        let g = grads
            .get(&name)
            .ok_or_else(|| Error::Shape(format!("missing gradient for trainable parameter {name}")))?;
        let p = params.expect(&name);
        assert_eq!(p.shape(), g.shape(), "gradient shape mismatch for {name}");
        let decay = if ParamSet::<F>::is_decayed(&name) { wd } else { F::zero() };
        let updated = Tensor::new(
            p.shape().to_vec(),
            p.data()
                .iter()
                .zip(g.data())
                .map(|(&pv, &gv)| pv - lr * (gv + decay * pv))
                .collect(),
        );
        params.set(&name, updated);
    }
    Ok(())
}

/// Sample one recognition triplet from the given alphabets. Positives are
/// two distinct instances of one uniformly chosen character; negatives are
/// instances of two distinct characters of one alphabet (candidate and
/// exemplar always share an alphabet).
pub fn sample_triplet<F: Scalar, R: Rng + ?Sized>(
    alphabets: &[Alphabet<F>],
    rng: &mut R,
    positive_fraction: f64,
) -> Triplet<F> {
    assert!(!alphabets.is_empty(), "cannot sample from an empty dataset");
    let positive = rng.random::<f64>() < positive_fraction;
    if positive {
        loop {
            let alpha = &alphabets[rng.random_range(0..alphabets.len())];
            let ch = &alpha.characters[rng.random_range(0..alpha.characters.len())];
            if ch.instances.len() < 2 {
                continue; // a positive needs two distinct instances
            }
            let i = rng.random_range(0..ch.instances.len());
            let mut j = rng.random_range(0..ch.instances.len());
            while j == i {
                j = rng.random_range(0..ch.instances.len());
            }
            return Triplet { z: ch.instances[i].clone(), x: ch.instances[j].clone(), label: 1.0 };
        }
    }
    loop {
        let alpha = &alphabets[rng.random_range(0..alphabets.len())];
        if alpha.characters.len() < 2 {
            continue;
        }
        let a = rng.random_range(0..alpha.characters.len());
        let mut b = rng.random_range(0..alpha.characters.len());
        while b == a {
            b = rng.random_range(0..alpha.characters.len());
        }
        let za = &alpha.characters[a].instances;
        let xb = &alpha.characters[b].instances;
        return Triplet {
            z: za[rng.random_range(0..za.len())].clone(),
            x: xb[rng.random_range(0..xb.len())].clone(),
            label: -1.0,
        };
    }
}

/// Per-window labels for a tracking score map: only the central 2x2 block
/// is positive (when the triplet is positive); everything else is negative.
pub fn tracking_label_map<F: Scalar>(mh: usize, mw: usize, label: f64) -> Tensor<F> {
    let mut data = vec![-F::one(); mh * mw];
    if label > 0.0 {
        let (h0, w0) = ((mh - 1) / 2, (mw - 1) / 2);
        for i in h0..(h0 + 2).min(mh) {
            for j in w0..(w0 + 2).min(mw) {
                data[i * mw + j] = F::one();
            }
        }
    }
    Tensor::new(vec![mh, mw, 1], data)
}

/// Weights giving the positive and negative cells of one map equal total
/// mass (negative-only maps weight all cells equally). Sums to 1 per map.
fn tracking_weight_map<F: Scalar>(labels: &Tensor<F>) -> Tensor<F> {
    let n = labels.numel();
    let pos = labels.data().iter().filter(|v| **v > F::zero()).count();
    if pos == 0 || pos == n {
        return Tensor::filled(labels.shape().to_vec(), F::from_f64(1.0 / n as f64));
    }
    let wp = F::from_f64(0.5 / pos as f64);
    let wn = F::from_f64(0.5 / (n - pos) as f64);
    labels.map(|v| if v > F::zero() { wp } else { wn })
}

/// Mean logistic objective over scalar scores for a batch of triplets.
/// Distance comparisons are negated inside the forward, so a higher score
/// always means more similar.
pub fn objective<'p, F: Scalar>(
    spec: &'p NetworkSpec,
    plan: &'p Plan,
    params: &'p ParamSet<F>,
    batch: &[Triplet<F>],
    mode: Mode,
    with_grad: bool,
) -> (Forward<'p, F>, crate::autodiff::Val) {
    assert!(!batch.is_empty(), "objective needs a nonempty batch");
    let mut fwd = Forward::new(spec, plan, params, mode, with_grad);
    let zs: Vec<&Tensor<F>> = batch.iter().map(|t| &t.z).collect();
    let xs: Vec<&Tensor<F>> = batch.iter().map(|t| &t.x).collect();
    let z = fwd.input(stack(&zs));
    let x = fwd.input(stack(&xs));
    let scores = fwd.scores(z, x);
    let labels = Tensor::new(
        vec![batch.len()],
        batch.iter().map(|t| F::from_f64(t.label)).collect(),
    );
    let weights = Tensor::filled(vec![batch.len()], F::from_f64(1.0 / batch.len() as f64));
    let loss = fwd.tape.logistic_sum(scores, labels, weights);
    (fwd, loss)
}

/// Learning-to-learn objective: requires an architecture with a meta-network.
pub fn objective_learnet<'p, F: Scalar>(
    spec: &'p NetworkSpec,
    plan: &'p Plan,
    params: &'p ParamSet<F>,
    batch: &[Triplet<F>],
    mode: Mode,
    with_grad: bool,
) -> (Forward<'p, F>, crate::autodiff::Val) {
    assert!(spec.arch.has_learnet(), "objective_learnet requires a learnet architecture");
    objective(spec, plan, params, batch, mode, with_grad)
}

/// Siamese objective over shared or unshared static parameters.
pub fn objective_siamese<'p, F: Scalar>(
    spec: &'p NetworkSpec,
    plan: &'p Plan,
    params: &'p ParamSet<F>,
    batch: &[Triplet<F>],
    mode: Mode,
    with_grad: bool,
) -> (Forward<'p, F>, crate::autodiff::Val) {
    assert!(!spec.arch.has_learnet(), "objective_siamese requires a static architecture");
    objective(spec, plan, params, batch, mode, with_grad)
}

/// Tracking objective: the comparison runs convolutionally over the search
/// crops and the logistic loss is accumulated across spatial positions,
/// with the positive and negative cells of each map balanced.
pub fn objective_tracking<'p, F: Scalar>(
    spec: &'p NetworkSpec,
    plan: &'p Plan,
    params: &'p ParamSet<F>,
    batch: &[Triplet<F>],
    mode: Mode,
    with_grad: bool,
) -> (Forward<'p, F>, crate::autodiff::Val) {
    assert!(!batch.is_empty(), "objective needs a nonempty batch");
    let mut fwd = Forward::new(spec, plan, params, mode, with_grad);
    let zs: Vec<&Tensor<F>> = batch.iter().map(|t| &t.z).collect();
    let xs: Vec<&Tensor<F>> = batch.iter().map(|t| &t.x).collect();
    let z = fwd.input(stack(&zs));
    let x = fwd.input(stack(&xs));
    let maps = fwd.score_maps(z, x);
    let map_shape = fwd.tape.value(maps).shape().to_vec();
    let (n, mh, mw) = (map_shape[0], map_shape[1], map_shape[2]);

    let mut labels = Vec::with_capacity(n * mh * mw);
    let mut weights = Vec::with_capacity(n * mh * mw);
    let per_sample = F::from_f64(1.0 / n as f64);
    for t in batch {
        let l = tracking_label_map::<F>(mh, mw, t.label);
        let w = tracking_weight_map(&l);
        labels.extend_from_slice(l.data());
        weights.extend(w.data().iter().map(|&v| v * per_sample));
    }
    let labels = Tensor::new(vec![n, mh, mw, 1], labels);
    let weights = Tensor::new(vec![n, mh, mw, 1], weights);
    let loss = fwd.tape.logistic_sum(maps, labels, weights);
    (fwd, loss)
}

/// Per-epoch training statistics, emitted as CSV by the CLI.
#[derive(Clone, Debug)]
pub struct EpochStats {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub lr: f64,
}

#[derive(Clone, Debug, Default)]
pub struct History {
    pub epochs: Vec<EpochStats>,
}

impl History {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("epoch,train_loss,val_loss,lr\n");
        for e in &self.epochs {
            out.push_str(&format!("{},{},{},{}\n", e.epoch, e.train_loss, e.val_loss, e.lr));
        }
        out
    }
}

/// What to train on.
pub enum TaskData<'a, F: Scalar> {
    /// Character recognition on the background split (10% of background
    /// alphabets are held out to monitor validation loss).
    Recognition(&'a CharacterDataset<F>),
    /// Tracking on synthetic sequences (10% held out for validation).
    Tracking {
        sequences: &'a [SyntheticSequence<F>],
        exemplar_size: usize,
        search_size: usize,
    },
}

enum Sampler<'a, F: Scalar> {
    Chars {
        train: &'a [Alphabet<F>],
        val: &'a [Alphabet<F>],
    },
    Seqs {
        train: &'a [SyntheticSequence<F>],
        val: &'a [SyntheticSequence<F>],
        exemplar_size: usize,
        search_size: usize,
    },
}

impl<F: Scalar> Sampler<'_, F> {
    fn draw<R: Rng + ?Sized>(&self, rng: &mut R, pf: f64, from_val: bool) -> Result<Triplet<F>> {
        match self {
            Sampler::Chars { train, val } => {
                let pool = if from_val { val } else { train };
                Ok(sample_triplet(pool, rng, pf))
            }
            Sampler::Seqs { train, val, exemplar_size, search_size } => {
                let pool = if from_val { val } else { train };
                let a = rng.random_range(0..pool.len());
                let b = if pool.len() > 1 {
                    let mut b = rng.random_range(0..pool.len());
                    while b == a {
                        b = rng.random_range(0..pool.len());
                    }
                    b
                } else {
                    a
                };
                make_tracking_triplet(&pool[a], &pool[b], rng, pf, *exemplar_size, *search_size)
            }
        }
    }

    fn tracking(&self) -> bool {
        matches!(self, Sampler::Seqs { .. })
    }
}

fn holdout_split<T>(items: &[T]) -> (&[T], &[T]) {
    if items.len() < 2 {
        return (items, items);
    }
    let val = (items.len() / 10).max(1);
    let cut = items.len() - val;
    (&items[..cut], &items[cut..])
}

/// Train a network on triplets sampled from `data`; fully deterministic for
/// a given seed. Returns the final parameters and the per-epoch loss
/// history. Aborts with a diagnostic if the loss stops being finite.
pub fn train<F: Scalar>(
    spec: &NetworkSpec,
    data: &TaskData<F>,
    cfg: &TrainConfig,
) -> Result<(ParamSet<F>, History)> {
    cfg.validate()?;
    let plan = spec.validate()?;
    let has_bn = spec
        .stream
        .iter()
        .chain(spec.learnet.iter().flatten())
        .any(|l| matches!(l, crate::layers::LayerSpec::Batchnorm));
    if has_bn && cfg.batch_size < 2 {
        return Err(Error::Config(
            "batch normalization in training mode needs batch_size >= 2".into(),
        ));
    }

    let sampler = match data {
        TaskData::Recognition(ds) => {
            if ds.background.is_empty() {
                return Err(Error::Data("no background alphabets to train on".into()));
            }
            let (train, val) = holdout_split(&ds.background);
            Sampler::Chars { train, val }
        }
        TaskData::Tracking { sequences, exemplar_size, search_size } => {
            if sequences.len() < 2 {
                return Err(Error::Data("tracking needs at least 2 sequences".into()));
            }
            if spec.comparison != crate::networks::ComparisonKind::Dot {
                return Err(Error::Unsupported(
                    "the convolutional comparison supports only the dot product".into(),
                ));
            }
            let (train, val) = holdout_split(sequences);
            Sampler::Seqs { train, val, exemplar_size: *exemplar_size, search_size: *search_size }
        }
    };

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut params: ParamSet<F> = init_params(spec, &mut rng, cfg.init);
    let mut history = History::default();
    let steps = (cfg.triplets_per_epoch / cfg.batch_size).max(1);

    for epoch in 0..cfg.epochs {
        let lr = lr_schedule(cfg, epoch);
        let mut epoch_loss = 0.0;
        for step in 0..steps {
            let batch: Vec<Triplet<F>> = (0..cfg.batch_size)
                .map(|_| sampler.draw(&mut rng, cfg.positive_fraction, false))
                .collect::<Result<_>>()?;
            let (loss_value, grads, bn_updates) = {
                let (fwd, loss) = if sampler.tracking() {
                    objective_tracking(spec, &plan, &params, &batch, Mode::Train, true)
                } else {
                    objective(spec, &plan, &params, &batch, Mode::Train, true)
                };
                let loss_value = fwd.tape.scalar_value(loss).as_f64();
                let grads_map = fwd.tape.backward(loss);
                let mut grads = BTreeMap::new();
                for (name, val) in fwd.param_leaves() {
                    if ParamSet::<F>::is_trainable(name) {
                        if let Some(g) = grads_map.get(val) {
                            grads.insert(name.clone(), g.clone());
                        }
                    }
                }
                (loss_value, grads, fwd.bn_updates)
            };
            if !loss_value.is_finite() {
                return Err(Error::Diverged(format!(
                    "non-finite loss {loss_value} at epoch {epoch} step {step}"
                )));
            }
            epoch_loss += loss_value;
            sgd_step(&mut params, &grads, lr, cfg.weight_decay)?;
            for (name, value) in bn_updates {
                params.set(&name, value);
            }
        }

        let val_loss = validation_loss(spec, &plan, &params, &sampler, cfg, epoch)?;
        history.epochs.push(EpochStats {
            epoch,
            train_loss: epoch_loss / steps as f64,
            val_loss,
            lr,
        });
    }
    Ok((params, history))
}

fn validation_loss<F: Scalar>(
    spec: &NetworkSpec,
    plan: &Plan,
    params: &ParamSet<F>,
    sampler: &Sampler<F>,
    cfg: &TrainConfig,
    epoch: usize,
) -> Result<f64> {
    let mut rng =
        ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(0x5DEECE66D).wrapping_add(epoch as u64));
    let batches = (256 / cfg.batch_size).clamp(1, 8);
    let mut total = 0.0;
    for _ in 0..batches {
        let batch: Vec<Triplet<F>> = (0..cfg.batch_size)
            .map(|_| sampler.draw(&mut rng, cfg.positive_fraction, true))
            .collect::<Result<_>>()?;
        let (fwd, loss) = if sampler.tracking() {
            objective_tracking(spec, plan, params, &batch, Mode::Eval, false)
        } else {
            objective(spec, plan, params, &batch, Mode::Eval, false)
        };
        total += fwd.tape.scalar_value(loss).as_f64();
    }
    Ok(total / batches as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::gen_glyph_dataset;
    use crate::networks::{compact_ocr_spec, Arch, ComparisonKind};

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    #[test]
    fn logistic_loss_examples() {
        assert!((logistic_loss(0.0_f64, 1.0) - std::f64::consts::LN_2).abs() < 1e-12);
        let saturated = logistic_loss(50.0_f64, 1.0);
        assert!((0.0..1e-20).contains(&saturated), "{saturated}");
        assert!((logistic_loss(2.0_f64, -1.0) - (1.0 + 2f64.exp()).ln()).abs() < 1e-12);
    }

    #[test]
    fn logistic_loss_label_flip_antisymmetry() {
        for s in [-3.0, -0.5, 0.0, 0.25, 7.0] {
            assert_eq!(logistic_loss(s, 1.0), logistic_loss(-s, -1.0));
        }
    }

    #[test]
    fn lr_schedule_geometric() {
        let cfg = TrainConfig {
            epochs: 4,
            triplets_per_epoch: 1,
            batch_size: 1,
            lr_initial: 1e-2,
            lr_final: 1e-5,
            weight_decay: 0.0,
            positive_fraction: 0.5,
            seed: 0,
            init: InitScheme::ImprovedXavier,
        };
        let expect = [1e-2, 1e-3, 1e-4, 1e-5];
        for (e, want) in expect.iter().enumerate() {
            let got = lr_schedule(&cfg, e);
            assert!((got - want).abs() / want <= 1e-12, "epoch {e}: {got} vs {want}");
        }
        let single = TrainConfig { epochs: 1, ..cfg };
        assert_eq!(lr_schedule(&single, 0), 1e-2);
    }

    #[test]
    fn sgd_step_formula_and_descent() {
        // Formula: p = 1, g = 0, lr = 0.01, wd = 0.005 -> 0.99995.
        let mut params: ParamSet<f64> = ParamSet::new();
        params.insert("k.l0.weight".into(), Tensor::scalar(1.0));
        let mut grads = BTreeMap::new();
        grads.insert("k.l0.weight".to_string(), Tensor::scalar(0.0));
        sgd_step(&mut params, &grads, 0.01, 0.005).unwrap();
        assert!((params.expect("k.l0.weight").data()[0] - 0.99995).abs() < 1e-15);

        // lr = 0 leaves parameters unchanged.
        let before = params.expect("k.l0.weight").clone();
        grads.insert("k.l0.weight".to_string(), Tensor::scalar(123.0));
        sgd_step(&mut params, &grads, 0.0, 0.0).unwrap();
        assert_eq!(params.expect("k.l0.weight"), &before);

        // Descent on f(p) = p^2: one small step reduces the loss.
        let mut params: ParamSet<f64> = ParamSet::new();
        params.insert("p".into(), Tensor::scalar(2.0));
        let mut grads = BTreeMap::new();
        grads.insert("p".to_string(), Tensor::scalar(4.0)); // f'(2)
        sgd_step(&mut params, &grads, 0.05, 0.0).unwrap();
        let p = params.expect("p").data()[0];
        assert!(p * p < 4.0, "loss should decrease, p = {p}");

        // Missing gradient for a trainable tensor is an error.
        let err = sgd_step(&mut params, &BTreeMap::new(), 0.1, 0.0).unwrap_err();
        assert!(err.to_string().contains("missing gradient"), "{err}");
    }

    #[test]
    fn init_sigma_matches_fan_in() {
        // fan_in 100 -> sigma ~ 0.1414; sample std over 1e5 draws within 2%.
        let mut r = rng(5);
        let n = 100_000;
        let sigma = (2.0 / 100.0_f64).sqrt();
        assert!((sigma - 0.1414).abs() < 1e-3);
        let mut sum = 0.0;
        let mut sumsq = 0.0;
        for _ in 0..n {
            let v = sigma * standard_normal(&mut r);
            sum += v;
            sumsq += v * v;
        }
        let std = ((sumsq - sum * sum / n as f64) / n as f64).sqrt();
        assert!((std - sigma).abs() / sigma <= 0.02, "std {std} vs sigma {sigma}");
    }

    #[test]
    fn init_params_deterministic() {
        let spec = compact_ocr_spec(Arch::SiameseLearnet, ComparisonKind::WeightedL1);
        let a: ParamSet<f32> = init_params(&spec, &mut rng(9), InitScheme::ImprovedXavier);
        let b: ParamSet<f32> = init_params(&spec, &mut rng(9), InitScheme::ImprovedXavier);
        assert_eq!(a, b);
        let c: ParamSet<f32> = init_params(&spec, &mut rng(10), InitScheme::ImprovedXavier);
        assert_ne!(a, c);
    }

    #[test]
    fn triplet_sampling_respects_positive_fraction() {
        let ds = gen_glyph_dataset::<f32, _>(&mut rng(1), 2, 1, 4, 3);
        let mut r = rng(2);
        for _ in 0..20 {
            let t = sample_triplet(&ds.background, &mut r, 1.0);
            assert_eq!(t.label, 1.0);
            assert_ne!(t.z, t.x, "positive draws use distinct instances");
        }
        let mut pos = 0;
        let n = 10_000;
        for _ in 0..n {
            if sample_triplet(&ds.background, &mut r, 0.5).label > 0.0 {
                pos += 1;
            }
        }
        let rate = pos as f64 / n as f64;
        assert!((0.48..=0.52).contains(&rate), "positive rate {rate}");
    }

    #[test]
    fn tracking_label_map_has_four_positives() {
        for (mh, mw) in [(9, 9), (8, 8), (6, 9)] {
            let m = tracking_label_map::<f64>(mh, mw, 1.0);
            let pos = m.data().iter().filter(|&&v| v > 0.0).count();
            assert_eq!(pos, 4, "{mh}x{mw}");
        }
        let neg = tracking_label_map::<f64>(9, 9, -1.0);
        assert!(neg.data().iter().all(|&v| v < 0.0));
    }

    #[test]
    fn objective_is_log2_at_zero_scores() {
        // All-zero meta-network head makes every single-stream score zero.
        let spec = compact_ocr_spec(Arch::SingleStreamLearnet, ComparisonKind::WeightedL1);
        let plan = spec.validate().unwrap();
        let mut params: ParamSet<f64> = init_params(&spec, &mut rng(3), InitScheme::ImprovedXavier);
        let head = "learnet.l8.filters";
        params.set(head, Tensor::zeros(params.expect(head).shape().to_vec()));

        let ds = gen_glyph_dataset::<f64, _>(&mut rng(4), 2, 1, 3, 3);
        let mut r = rng(5);
        let batch: Vec<Triplet<f64>> =
            (0..4).map(|_| sample_triplet(&ds.background, &mut r, 0.5)).collect();
        let (fwd, loss) = objective_learnet(&spec, &plan, &params, &batch, Mode::Eval, false);
        let v = fwd.tape.scalar_value(loss);
        assert!((v - std::f64::consts::LN_2).abs() < 1e-12, "{v}");
    }

    #[test]
    fn gradients_reach_the_meta_network() {
        let spec = compact_ocr_spec(Arch::SiameseLearnet, ComparisonKind::WeightedL1);
        let plan = spec.validate().unwrap();
        let params: ParamSet<f64> = init_params(&spec, &mut rng(6), InitScheme::ImprovedXavier);
        let ds = gen_glyph_dataset::<f64, _>(&mut rng(7), 2, 1, 3, 3);
        let mut r = rng(8);
        let batch: Vec<Triplet<f64>> =
            (0..4).map(|_| sample_triplet(&ds.background, &mut r, 0.5)).collect();
        let (fwd, loss) = objective_learnet(&spec, &plan, &params, &batch, Mode::Eval, true);
        let grads = fwd.tape.backward(loss);
        let mut max_learnet_grad = 0.0_f64;
        for (name, val) in fwd.param_leaves() {
            if name.starts_with("learnet.") {
                if let Some(g) = grads.get(val) {
                    max_learnet_grad =
                        max_learnet_grad.max(g.data().iter().fold(0.0, |m, v| m.max(v.abs())));
                }
            }
        }
        assert!(max_learnet_grad > 0.0, "meta-network must receive gradient");
    }

    #[test]
    fn zero_epochs_returns_initialization() {
        let spec = compact_ocr_spec(Arch::Shared, ComparisonKind::Euclidean);
        let ds = gen_glyph_dataset::<f32, _>(&mut rng(11), 3, 1, 3, 3);
        let cfg = TrainConfig {
            epochs: 0,
            triplets_per_epoch: 8,
            batch_size: 4,
            lr_initial: 1e-2,
            lr_final: 1e-3,
            weight_decay: 0.0,
            positive_fraction: 0.5,
            seed: 42,
            init: InitScheme::ImprovedXavier,
        };
        let (params, history) = train(&spec, &TaskData::Recognition(&ds), &cfg).unwrap();
        let expected: ParamSet<f32> =
            init_params(&spec, &mut ChaCha8Rng::seed_from_u64(42), InitScheme::ImprovedXavier);
        assert_eq!(params, expected);
        assert!(history.epochs.is_empty());
    }

    #[test]
    fn training_reduces_loss_on_separable_toy_data() {
        let ds = gen_glyph_dataset::<f32, _>(&mut rng(12), 2, 1, 2, 6);
        let spec = compact_ocr_spec(Arch::Shared, ComparisonKind::WeightedL1);
        let cfg = TrainConfig {
            epochs: 5,
            triplets_per_epoch: 64,
            batch_size: 8,
            lr_initial: 1e-2,
            lr_final: 1e-3,
            weight_decay: 0.0005,
            positive_fraction: 0.5,
            seed: 7,
            init: InitScheme::ImprovedXavier,
        };
        let (_, history) = train(&spec, &TaskData::Recognition(&ds), &cfg).unwrap();
        let first = history.epochs.first().unwrap().train_loss;
        let last = history.epochs.last().unwrap().train_loss;
        assert!(last < first, "loss should decrease: {first} -> {last}");
    }

    #[test]
    fn training_is_deterministic() {
        let ds = gen_glyph_dataset::<f32, _>(&mut rng(13), 2, 1, 3, 4);
        let spec = compact_ocr_spec(Arch::SiameseLearnet, ComparisonKind::Dot);
        let cfg = TrainConfig {
            epochs: 1,
            triplets_per_epoch: 16,
            batch_size: 4,
            lr_initial: 1e-3,
            lr_final: 1e-3,
            weight_decay: 0.001,
            positive_fraction: 0.5,
            seed: 99,
            init: InitScheme::ImprovedXavier,
        };
        let (a, _) = train(&spec, &TaskData::Recognition(&ds), &cfg).unwrap();
        let (b, _) = train(&spec, &TaskData::Recognition(&ds), &cfg).unwrap();
        assert_eq!(a, b);
    }
}
