//! Evaluation: the 20-way one-shot recognition protocol, a miniature
//! sequential tracker driven by convolutional score maps, and the
//! displacement / pair-classification error metrics.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::{crop_with_mean_pad, resize, Alphabet, ObjectBox, SyntheticSequence};
use crate::networks::{
    bind_exemplar, score_candidates, score_map, stream_stride, NetworkSpec, ParamSet,
};
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use crate::train::Triplet;
use crate::{Error, Result};

/// One recognition task: pick the single candidate that shows the same
/// class as the exemplar.
#[derive(Clone, Debug)]
pub struct RecognitionProblem<F> {
    pub exemplar: Tensor<F>,
    pub candidates: Vec<Tensor<F>>,
    pub answer_index: usize,
}

/// Sample one `way`-candidate problem from a single uniformly chosen
/// alphabet. Alphabets with fewer characters than `way` yield a smaller
/// problem (the caller can count these).
pub fn sample_problem<F: Scalar, R: Rng + ?Sized>(
    alphabets: &[Alphabet<F>],
    rng: &mut R,
    way: usize,
) -> RecognitionProblem<F> {
    assert!(!alphabets.is_empty(), "cannot sample problems from an empty split");
    let alpha = &alphabets[rng.random_range(0..alphabets.len())];
    let actual_way = way.min(alpha.characters.len());

    // The answer character plus `actual_way - 1` distinct distractors.
    let mut order: Vec<usize> = (0..alpha.characters.len()).collect();
    for i in 0..actual_way {
        let j = rng.random_range(i..order.len());
        order.swap(i, j);
    }
    let answer_char = order[0];

    let ch = &alpha.characters[answer_char];
    let zi = rng.random_range(0..ch.instances.len());
    let mut xi = rng.random_range(0..ch.instances.len());
    while xi == zi {
        xi = rng.random_range(0..ch.instances.len());
    }

    let answer_index = rng.random_range(0..actual_way);
    let mut candidates = Vec::with_capacity(actual_way);
    let mut distractor = 1; // order[1..] are the non-matching characters
    for slot in 0..actual_way {
        if slot == answer_index {
            candidates.push(ch.instances[xi].clone());
        } else {
            let dch = &alpha.characters[order[distractor]];
            distractor += 1;
            candidates.push(dch.instances[rng.random_range(0..dch.instances.len())].clone());
        }
    }
    RecognitionProblem { exemplar: ch.instances[zi].clone(), candidates, answer_index }
}

/// Index of the maximal score; ties break to the lowest index.
pub fn argmax_scores<F: Scalar>(scores: &[F]) -> usize {
    let mut best = 0;
    for (i, &s) in scores.iter().enumerate().skip(1) {
        if s > scores[best] {
            best = i;
        }
    }
    best
}

/// Solve one problem with the network: the exemplar is bound once (for
/// learnet architectures the meta-network runs once) and the induced static
/// pupil network scores every candidate.
pub fn solve_problem<F: Scalar>(
    spec: &NetworkSpec,
    params: &ParamSet<F>,
    problem: &RecognitionProblem<F>,
) -> usize {
    let plan = spec.validate().expect("invalid network spec");
    let binding = bind_exemplar(spec, &plan, params, &problem.exemplar);
    let refs: Vec<&Tensor<F>> = problem.candidates.iter().collect();
    let scores = score_candidates(spec, &plan, params, &binding, &refs);
    argmax_scores(&scores)
}

/// Evaluation summary: the error plus everything needed to reproduce it.
#[derive(Clone, Debug)]
pub struct EvalReport {
    pub error: f64,
    pub n_problems: usize,
    pub way: usize,
    pub seed: u64,
    /// Problems drawn from alphabets with fewer than `way` characters.
    pub short_problems: usize,
}

/// Error rate of an arbitrary scorer over sampled problems; the scorer maps
/// a problem to one score per candidate.
pub fn error_rate_with<F: Scalar>(
    alphabets: &[Alphabet<F>],
    n_problems: usize,
    way: usize,
    seed: u64,
    mut scorer: impl FnMut(&RecognitionProblem<F>) -> Vec<F>,
) -> EvalReport {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut wrong = 0usize;
    let mut short = 0usize;
    for _ in 0..n_problems {
        let problem = sample_problem(alphabets, &mut rng, way);
        if problem.candidates.len() < way {
            short += 1;
        }
        let scores = scorer(&problem);
        assert_eq!(scores.len(), problem.candidates.len(), "scorer must score every candidate");
        if argmax_scores(&scores) != problem.answer_index {
            wrong += 1;
        }
    }
    EvalReport {
        error: wrong as f64 / n_problems as f64,
        n_problems,
        way,
        seed,
        short_problems: short,
    }
}

/// One-shot recognition error of a trained network over `n_problems`
/// problems sampled deterministically from the given split. Problems are
/// sampled up front, so the result is identical for any `threads` count.
pub fn error_rate<F: Scalar>(
    spec: &NetworkSpec,
    params: &ParamSet<F>,
    alphabets: &[Alphabet<F>],
    n_problems: usize,
    way: usize,
    seed: u64,
    threads: usize,
) -> Result<EvalReport> {
    if alphabets.is_empty() {
        return Err(Error::Data("evaluation split has no alphabets".into()));
    }
    let plan = spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let problems: Vec<RecognitionProblem<F>> =
        (0..n_problems).map(|_| sample_problem(alphabets, &mut rng, way)).collect();
    let short = problems.iter().filter(|p| p.candidates.len() < way).count();

    let solve = |p: &RecognitionProblem<F>| -> bool {
        let binding = bind_exemplar(spec, &plan, params, &p.exemplar);
        let refs: Vec<&Tensor<F>> = p.candidates.iter().collect();
        let scores = score_candidates(spec, &plan, params, &binding, &refs);
        argmax_scores(&scores) != p.answer_index
    };

    let wrong = if threads <= 1 {
        problems.iter().filter(|p| solve(p)).count()
    } else {
        let chunk = problems.len().div_ceil(threads);
        std::thread::scope(|scope| {
            let handles: Vec<_> = problems
                .chunks(chunk)
                .map(|ps| scope.spawn(move || ps.iter().filter(|p| solve(p)).count()))
                .collect();
            handles.into_iter().map(|h| h.join().expect("worker panicked")).sum()
        })
    };

    Ok(EvalReport {
        error: wrong as f64 / n_problems as f64,
        n_problems,
        way,
        seed,
        short_problems: short,
    })
}

/// Sequential tracker output.
#[derive(Clone, Debug)]
pub struct TrackResult {
    /// Predicted box per frame (the first is the given initial box).
    pub boxes: Vec<ObjectBox>,
    /// Peak score-map value per tracked frame (frames after the first).
    pub peak_scores: Vec<f64>,
    /// Euclidean distance to the ground-truth center per tracked frame.
    pub displacements: Vec<f64>,
}

#[derive(Clone, Copy, Debug)]
pub struct TrackConfig {
    /// Side of the resized exemplar crop (must match the network input).
    pub exemplar_size: usize,
    /// Side of the resized search crop.
    pub search_size: usize,
    /// Peaks implying a displacement beyond this many pixels (per axis, in
    /// frame coordinates) are ignored.
    pub search_radius: f64,
}

/// Track the object through a sequence: the exemplar is bound once from the
/// first frame's box, then each subsequent frame is scored convolutionally
/// around the previous prediction and the peak gives the new center (single
/// scale; box size stays fixed).
pub fn track<F: Scalar>(
    spec: &NetworkSpec,
    params: &ParamSet<F>,
    seq: &SyntheticSequence<F>,
    cfg: &TrackConfig,
) -> Result<TrackResult> {
    track_with_maps(spec, params, seq, cfg).map(|(r, _)| r)
}

/// [`track`], additionally returning the raw score map of every tracked
/// frame (for inspection dumps).
pub fn track_with_maps<F: Scalar>(
    spec: &NetworkSpec,
    params: &ParamSet<F>,
    seq: &SyntheticSequence<F>,
    cfg: &TrackConfig,
) -> Result<(TrackResult, Vec<Tensor<F>>)> {
    if spec.comparison != crate::networks::ComparisonKind::Dot {
        return Err(Error::Unsupported(
            "tracking needs the dot-product comparison (the only one that runs convolutionally)"
                .into(),
        ));
    }
    let plan = spec.validate()?;
    if spec.input != [cfg.exemplar_size, cfg.exemplar_size, 1] {
        return Err(Error::Shape(format!(
            "network input {:?} does not match exemplar size {}",
            spec.input, cfg.exemplar_size
        )));
    }
    if seq.frames.is_empty() {
        return Err(Error::Data("cannot track an empty sequence".into()));
    }

    let first = seq.object_boxes[0];
    let obj = first.w.max(first.h);
    let z_side = (2.0 * obj).round().max(1.0) as usize;
    let scale = cfg.exemplar_size as f64 / z_side as f64;
    let x_side = (cfg.search_size as f64 / scale).round() as usize;

    let z = resize(
        &crop_with_mean_pad(&seq.frames[0], first.cx, first.cy, z_side),
        cfg.exemplar_size,
        cfg.exemplar_size,
    );
    let binding = bind_exemplar(spec, &plan, params, &z);
    let stride = stream_stride(spec) as f64;

    let mut boxes = vec![first];
    let mut peaks = Vec::new();
    let mut displacements = Vec::new();
    let mut maps = Vec::new();
    let (mut cx, mut cy) = (first.cx, first.cy);

    for (t, frame) in seq.frames.iter().enumerate().skip(1) {
        let crop = resize(
            &crop_with_mean_pad(frame, cx, cy, x_side),
            cfg.search_size,
            cfg.search_size,
        );
        let map = score_map(spec, &plan, params, &binding, &crop);
        let (mh, mw) = (map.shape()[0], map.shape()[1]);
        let (c0h, c0w) = ((mh as f64 - 1.0) / 2.0, (mw as f64 - 1.0) / 2.0);

        let mut best: Option<(usize, usize, f64)> = None;
        for u in 0..mh {
            for v in 0..mw {
                let dy = (u as f64 - c0h) * stride / scale;
                let dx = (v as f64 - c0w) * stride / scale;
                if dx.abs() > cfg.search_radius || dy.abs() > cfg.search_radius {
                    continue;
                }
                let s = map.at(&[u, v]).as_f64();
                if best.is_none_or(|(_, _, b)| s > b) {
                    best = Some((u, v, s));
                }
            }
        }
        let (u, v, peak) = best.ok_or_else(|| {
            Error::Config("search radius excludes every score-map cell".into())
        })?;
        cy += (u as f64 - c0h) * stride / scale;
        cx += (v as f64 - c0w) * stride / scale;

        boxes.push(ObjectBox { cx, cy, w: first.w, h: first.h });
        peaks.push(peak);
        let truth = seq.object_boxes[t];
        displacements.push(((cx - truth.cx).powi(2) + (cy - truth.cy).powi(2)).sqrt());
        maps.push(map);
    }

    Ok((TrackResult { boxes, peak_scores: peaks, displacements }, maps))
}

/// Mean Euclidean distance between predicted and ground-truth centers over
/// the tracked frames (the first frame's box is given, not predicted).
pub fn displacement_error(result: &TrackResult, truth: &[ObjectBox]) -> f64 {
    assert_eq!(result.boxes.len(), truth.len(), "frame counts disagree");
    if truth.len() < 2 {
        return 0.0;
    }
    let n = truth.len() - 1;
    result
        .boxes
        .iter()
        .zip(truth)
        .skip(1)
        .map(|(p, t)| ((p.cx - t.cx).powi(2) + (p.cy - t.cy).powi(2)).sqrt())
        .sum::<f64>()
        / n as f64
}

/// Probability that a positive peak response fails to exceed a negative
/// one, over all positive x negative pairs; ties count one half.
pub fn pair_ordering_error(pos: &[f64], neg: &[f64]) -> f64 {
    assert!(!pos.is_empty() && !neg.is_empty(), "need both positive and negative scores");
    let mut bad = 0.0;
    for &p in pos {
        for &n in neg {
            if p < n {
                bad += 1.0;
            } else if p == n {
                bad += 0.5;
            }
        }
    }
    bad / (pos.len() * neg.len()) as f64
}

/// Pair-classification error of the network on tracking triplets: the peak
/// response magnitude of each triplet's score map, positives against
/// negatives.
pub fn pair_classification_error<F: Scalar>(
    spec: &NetworkSpec,
    params: &ParamSet<F>,
    triplets: &[Triplet<F>],
) -> Result<f64> {
    let plan = spec.validate()?;
    let mut pos = Vec::new();
    let mut neg = Vec::new();
    for t in triplets {
        let binding = bind_exemplar(spec, &plan, params, &t.z);
        let map = score_map(spec, &plan, params, &binding, &t.x);
        let peak = map.data().iter().fold(f64::NEG_INFINITY, |m, v| m.max(v.as_f64()));
        if t.label > 0.0 {
            pos.push(peak);
        } else {
            neg.push(peak);
        }
    }
    if pos.is_empty() || neg.is_empty() {
        return Err(Error::Data("need both positive and negative triplets".into()));
    }
    Ok(pair_ordering_error(&pos, &neg))
}

/// Monte-Carlo estimate of the mean distance to the center of a peak drawn
/// uniformly from a square window of half-extent `half_extent` pixels: the
/// displacement a random-scoring tracker would produce.
pub fn uniform_peak_baseline(half_extent: f64, samples: usize, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut total = 0.0;
    for _ in 0..samples {
        let dx = (rng.random::<f64>() * 2.0 - 1.0) * half_extent;
        let dy = (rng.random::<f64>() * 2.0 - 1.0) * half_extent;
        total += (dx * dx + dy * dy).sqrt();
    }
    total / samples as f64
}

/// Normalize each predicted filter slice to `[0, 1]` for visual inspection:
/// `[f, f, r]` becomes `r` images of shape `[f, f, 1]`.
pub fn filter_images<F: Scalar>(w: &Tensor<F>) -> Vec<Tensor<F>> {
    let (f, r) = match w.shape() {
        [f, f2, r] => {
            assert_eq!(f, f2, "filters must be square");
            (*f, *r)
        }
        s => panic!("filter_images expects [f, f, r], got {s:?}"),
    };
    (0..r)
        .map(|k| {
            let mut lo = f64::INFINITY;
            let mut hi = f64::NEG_INFINITY;
            for a in 0..f {
                for b in 0..f {
                    let v = w.at(&[a, b, k]).as_f64();
                    lo = lo.min(v);
                    hi = hi.max(v);
                }
            }
            let span = if hi > lo { hi - lo } else { 1.0 };
            Tensor::from_fn(vec![f, f, 1], |i| {
                let (a, b) = (i / f, i % f);
                F::from_f64((w.at(&[a, b, k]).as_f64() - lo) / span)
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::gen_glyph_dataset;
    use crate::networks::{compact_tracking_spec, Arch};
    use crate::train::{init_params, InitScheme};

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    #[test]
    fn problems_have_exactly_one_match_from_one_alphabet() {
        let ds = gen_glyph_dataset::<f32, _>(&mut rng(1), 1, 2, 25, 3);
        let mut r = rng(2);
        for _ in 0..50 {
            let p = sample_problem(&ds.evaluation, &mut r, 20);
            assert_eq!(p.candidates.len(), 20);
            assert!(p.answer_index < 20);
        }
    }

    #[test]
    fn short_alphabets_shrink_the_problem() {
        let ds = gen_glyph_dataset::<f32, _>(&mut rng(3), 1, 1, 5, 3);
        let mut r = rng(4);
        let p = sample_problem(&ds.evaluation, &mut r, 20);
        assert_eq!(p.candidates.len(), 5);
        let report = error_rate_with(&ds.evaluation, 100, 20, 5, |p| {
            vec![0.0_f32; p.candidates.len()]
        });
        assert_eq!(report.short_problems, 100);
    }

    #[test]
    fn oracle_scorers_pin_the_error_range() {
        let ds = gen_glyph_dataset::<f32, _>(&mut rng(5), 1, 2, 25, 3);
        // Perfect scorer: 1 at the answer.
        let perfect = error_rate_with(&ds.evaluation, 200, 20, 6, |p| {
            (0..p.candidates.len())
                .map(|i| if i == p.answer_index { 1.0_f32 } else { 0.0 })
                .collect()
        });
        assert_eq!(perfect.error, 0.0);
        // Adversarial scorer: always wrong.
        let adversarial = error_rate_with(&ds.evaluation, 200, 20, 7, |p| {
            (0..p.candidates.len())
                .map(|i| if i == p.answer_index { 0.0_f32 } else { 1.0 })
                .collect()
        });
        assert_eq!(adversarial.error, 1.0);
        // Uniform scores resolve to index 0 by the tie rule.
        let p = sample_problem(&ds.evaluation, &mut rng(8), 20);
        assert_eq!(argmax_scores(&vec![0.5_f32; p.candidates.len()]), 0);
    }

    #[test]
    fn error_rate_independent_of_thread_count() {
        let ds = gen_glyph_dataset::<f32, _>(&mut rng(9), 1, 2, 22, 3);
        let spec = crate::networks::compact_ocr_spec(
            Arch::Shared,
            crate::networks::ComparisonKind::Euclidean,
        );
        let params = init_params::<f32, _>(&spec, &mut rng(10), InitScheme::ImprovedXavier);
        let a = error_rate(&spec, &params, &ds.evaluation, 40, 20, 11, 1).unwrap();
        let b = error_rate(&spec, &params, &ds.evaluation, 40, 20, 11, 4).unwrap();
        assert_eq!(a.error, b.error);
    }

    #[test]
    fn displacement_error_examples() {
        let truth: Vec<ObjectBox> =
            (0..4).map(|i| ObjectBox { cx: 10.0 * i as f64, cy: 5.0, w: 4.0, h: 4.0 }).collect();
        let perfect = TrackResult {
            boxes: truth.clone(),
            peak_scores: vec![0.0; 3],
            displacements: vec![0.0; 3],
        };
        assert_eq!(displacement_error(&perfect, &truth), 0.0);

        let mut shifted = truth.clone();
        for b in shifted.iter_mut().skip(1) {
            b.cx += 3.0;
        }
        let r = TrackResult { boxes: shifted, peak_scores: vec![0.0; 3], displacements: vec![] };
        assert!((displacement_error(&r, &truth) - 3.0).abs() < 1e-12);

        let mut diag = truth.clone();
        for b in diag.iter_mut().skip(1) {
            b.cx += 3.0;
            b.cy += 4.0;
        }
        let r = TrackResult { boxes: diag, peak_scores: vec![0.0; 3], displacements: vec![] };
        assert!((displacement_error(&r, &truth) - 5.0).abs() < 1e-12);
    }

    #[test]
    fn pair_ordering_error_examples() {
        assert_eq!(pair_ordering_error(&[5.0, 6.0], &[1.0, 2.0]), 0.0);
        assert_eq!(pair_ordering_error(&[1.0, 2.0], &[1.0, 2.0]), 0.5);
        assert_eq!(pair_ordering_error(&[2.0, 3.0], &[1.0, 2.5]), 0.25);
    }

    #[test]
    fn tracker_contract_on_untrained_net() {
        let spec = compact_tracking_spec(Arch::Shared);
        let params = init_params::<f32, _>(&spec, &mut rng(12), InitScheme::ImprovedXavier);
        let seq = crate::data::gen_tracking_sequence::<f32, _>(&mut rng(13), 6, 96, 16);
        let cfg = TrackConfig { exemplar_size: 32, search_size: 64, search_radius: 16.0 };
        let result = track(&spec, &params, &seq, &cfg).unwrap();
        assert_eq!(result.boxes.len(), 6);
        assert_eq!(result.boxes[0], seq.object_boxes[0], "first frame echoes the given box");
        assert_eq!(result.peak_scores.len(), 5);
        assert_eq!(result.displacements.len(), 5);
    }

    #[test]
    fn tracking_rejects_non_dot_comparisons() {
        let mut spec = compact_tracking_spec(Arch::Shared);
        spec.comparison = crate::networks::ComparisonKind::Euclidean;
        let params = init_params::<f32, _>(&spec, &mut rng(14), InitScheme::ImprovedXavier);
        let seq = crate::data::gen_tracking_sequence::<f32, _>(&mut rng(15), 3, 96, 16);
        let cfg = TrackConfig { exemplar_size: 32, search_size: 64, search_radius: 16.0 };
        let err = track(&spec, &params, &seq, &cfg).unwrap_err();
        assert!(matches!(err, Error::Unsupported(_)), "{err}");
    }

    #[test]
    fn baseline_matches_uniform_square_expectation() {
        // Mean distance to center of a uniform point in a square of side 2e
        // is about 0.3826 * 2e.
        let e = 10.0;
        let got = uniform_peak_baseline(e, 200_000, 16);
        let want = 0.3826 * 2.0 * e;
        assert!((got - want).abs() / want < 0.01, "{got} vs {want}");
    }

    #[test]
    fn filter_images_normalize_each_slice() {
        let w = Tensor::<f32>::from_fn(vec![3, 3, 2], |i| i as f32 - 4.0);
        let imgs = filter_images(&w);
        assert_eq!(imgs.len(), 2);
        for img in &imgs {
            let lo = img.data().iter().cloned().fold(f32::INFINITY, f32::min);
            let hi = img.data().iter().cloned().fold(f32::NEG_INFINITY, f32::max);
            assert_eq!(lo, 0.0);
            assert_eq!(hi, 1.0);
        }
    }
}
