//! Exercise the C ABI from Rust: load, bind, score, score maps, error paths.

use std::ffi::CString;
use std::ptr;

use learnet::model_io::save;
use learnet::networks::{
    compact_ocr_spec, compact_tracking_spec, forward_pair, Arch, ComparisonKind,
};
use learnet::tensor::Tensor;
use learnet::train::{init_params, InitScheme};
use learnet_capi::*;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn write_model(dir: &std::path::Path, name: &str, arch: Arch, cmp: ComparisonKind) -> CString {
    let spec = if cmp == ComparisonKind::Dot && arch == Arch::SiameseLearnet {
        compact_tracking_spec(arch)
    } else {
        compact_ocr_spec(arch, cmp)
    };
    let params = init_params::<f32, _>(
        &spec,
        &mut ChaCha8Rng::seed_from_u64(7),
        InitScheme::ImprovedXavier,
    );
    let path = dir.join(name);
    save(&spec, &params, &path).unwrap();
    CString::new(path.to_str().unwrap()).unwrap()
}

fn image(shape: [usize; 3], seed: u64) -> Vec<f64> {
    let mut state = seed.wrapping_mul(0x9E3779B97F4A7C15).wrapping_add(1);
    (0..shape.iter().product::<usize>())
        .map(|_| {
            state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            (state >> 11) as f64 / (1u64 << 53) as f64
        })
        .collect()
}

#[test]
fn load_score_and_free() {
    let dir = tempfile::tempdir().unwrap();
    let path = write_model(dir.path(), "m.lrnt", Arch::SingleStreamLearnet, ComparisonKind::WeightedL1);

    unsafe {
        let mut model: *mut LearnetModel = ptr::null_mut();
        assert_eq!(learnet_model_load(path.as_ptr(), &mut model), LearnetStatus::Ok);
        assert!(!model.is_null());

        let (mut h, mut w, mut c) = (0usize, 0usize, 0usize);
        assert_eq!(
            learnet_model_input_dims(model, &mut h, &mut w, &mut c),
            LearnetStatus::Ok
        );
        assert_eq!((h, w, c), (28, 28, 1));

        let z = image([28, 28, 1], 1);
        let x = image([28, 28, 1], 2);
        let mut score = f64::NAN;
        assert_eq!(
            learnet_model_score(model, z.as_ptr(), x.as_ptr(), 28, 28, 1, &mut score),
            LearnetStatus::Ok
        );
        assert!(score.is_finite());

        // The C path matches the native forward exactly.
        let spec = compact_ocr_spec(Arch::SingleStreamLearnet, ComparisonKind::WeightedL1);
        let params = init_params::<f32, _>(
            &spec,
            &mut ChaCha8Rng::seed_from_u64(7),
            InitScheme::ImprovedXavier,
        );
        let zt = Tensor::<f32>::new(vec![28, 28, 1], z.iter().map(|&v| v as f32).collect());
        let xt = Tensor::<f32>::new(vec![28, 28, 1], x.iter().map(|&v| v as f32).collect());
        let native = forward_pair(&spec, &params, &zt, &xt) as f64;
        assert_eq!(score, native);

        learnet_model_free(model);
    }
}

#[test]
fn bound_pupil_matches_pairwise_scores() {
    let dir = tempfile::tempdir().unwrap();
    let path = write_model(dir.path(), "m.lrnt", Arch::SiameseLearnet, ComparisonKind::WeightedL1);

    unsafe {
        let mut model: *mut LearnetModel = ptr::null_mut();
        assert_eq!(learnet_model_load(path.as_ptr(), &mut model), LearnetStatus::Ok);

        let z = image([28, 28, 1], 3);
        let mut pupil: *mut LearnetPupil = ptr::null_mut();
        assert_eq!(
            learnet_bind_exemplar(model, z.as_ptr(), 28, 28, 1, &mut pupil),
            LearnetStatus::Ok
        );

        let mut batch = Vec::new();
        let mut pair_scores = Vec::new();
        for seed in 10..15 {
            let x = image([28, 28, 1], seed);
            let mut s = f64::NAN;
            assert_eq!(
                learnet_pupil_score(pupil, x.as_ptr(), 28, 28, 1, &mut s),
                LearnetStatus::Ok
            );
            let mut direct = f64::NAN;
            assert_eq!(
                learnet_model_score(model, z.as_ptr(), x.as_ptr(), 28, 28, 1, &mut direct),
                LearnetStatus::Ok
            );
            assert_eq!(s, direct, "binding once must equal per-pair evaluation");
            pair_scores.push(s);
            batch.extend_from_slice(&x);
        }

        let mut best = usize::MAX;
        assert_eq!(
            learnet_pupil_best_match(pupil, batch.as_ptr(), 5, 28, 28, 1, &mut best),
            LearnetStatus::Ok
        );
        let expect = pair_scores
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
            .unwrap()
            .0;
        assert_eq!(best, expect);

        learnet_pupil_free(pupil);
        learnet_model_free(model);
    }
}

#[test]
fn score_maps_over_larger_search_images() {
    let dir = tempfile::tempdir().unwrap();
    let path = write_model(dir.path(), "t.lrnt", Arch::SiameseLearnet, ComparisonKind::Dot);

    unsafe {
        let mut model: *mut LearnetModel = ptr::null_mut();
        assert_eq!(learnet_model_load(path.as_ptr(), &mut model), LearnetStatus::Ok);

        let (mut mh, mut mw) = (0usize, 0usize);
        assert_eq!(
            learnet_model_map_dims(model, 64, 64, &mut mh, &mut mw),
            LearnetStatus::Ok
        );
        assert_eq!((mh, mw), (9, 9));

        let z = image([32, 32, 1], 4);
        let mut pupil: *mut LearnetPupil = ptr::null_mut();
        assert_eq!(
            learnet_bind_exemplar(model, z.as_ptr(), 32, 32, 1, &mut pupil),
            LearnetStatus::Ok
        );

        let search = image([64, 64, 1], 5);
        let mut map = vec![0.0f64; mh * mw];
        let (mut oh, mut ow) = (0usize, 0usize);
        assert_eq!(
            learnet_pupil_score_map(
                pupil,
                search.as_ptr(),
                64,
                64,
                1,
                map.as_mut_ptr(),
                map.len(),
                &mut oh,
                &mut ow
            ),
            LearnetStatus::Ok
        );
        assert_eq!((oh, ow), (9, 9));
        assert!(map.iter().all(|v| v.is_finite()));

        // Undersized buffer is a shape error, not UB.
        let mut tiny = vec![0.0f64; 4];
        assert_eq!(
            learnet_pupil_score_map(
                pupil,
                search.as_ptr(),
                64,
                64,
                1,
                tiny.as_mut_ptr(),
                tiny.len(),
                &mut oh,
                &mut ow
            ),
            LearnetStatus::ShapeMismatch
        );

        learnet_pupil_free(pupil);
        learnet_model_free(model);
    }
}

#[test]
fn error_paths_set_messages() {
    unsafe {
        let mut model: *mut LearnetModel = ptr::null_mut();
        assert_eq!(
            learnet_model_load(ptr::null(), &mut model),
            LearnetStatus::NullArgument
        );

        let missing = CString::new("/nonexistent/missing.lrnt").unwrap();
        assert_eq!(
            learnet_model_load(missing.as_ptr(), &mut model),
            LearnetStatus::IoError
        );
        let msg = std::ffi::CStr::from_ptr(learnet_last_error_message());
        assert!(!msg.to_bytes().is_empty());

        // A garbage file is a bad-model error.
        let dir = tempfile::tempdir().unwrap();
        let junk = dir.path().join("junk.lrnt");
        std::fs::write(&junk, b"not a model").unwrap();
        let junk_c = CString::new(junk.to_str().unwrap()).unwrap();
        assert_eq!(
            learnet_model_load(junk_c.as_ptr(), &mut model),
            LearnetStatus::BadModelFile
        );

        // Wrong image dims are rejected.
        let path = write_model(dir.path(), "m.lrnt", Arch::Shared, ComparisonKind::Dot);
        assert_eq!(learnet_model_load(path.as_ptr(), &mut model), LearnetStatus::Ok);
        let z = image([8, 8, 1], 6);
        let mut score = 0.0;
        assert_eq!(
            learnet_model_score(model, z.as_ptr(), z.as_ptr(), 8, 8, 1, &mut score),
            LearnetStatus::ShapeMismatch
        );
        learnet_model_free(model);
        learnet_model_free(ptr::null_mut()); // NULL free is a no-op
    }
}

#[test]
fn version_is_a_c_string() {
    let v = unsafe { std::ffi::CStr::from_ptr(learnet_version()) };
    assert!(!v.to_bytes().is_empty());
}
