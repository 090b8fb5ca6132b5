use mrlr::align::{fiducial_error, AlignConfig, DEFAULT_S};
use mrlr::harness::dataset::{build_dictionary, load_dictionary, save_dictionary};
use mrlr::harness::synth::{generate, SynthModel, SynthSpec};
use mrlr::recognize::{recognize_pipeline, Coder, DEFAULT_LAMBDA};
use mrlr::{Dictionary, SimilarityParams};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Queries displaced by exactly `fraction` of the frame width in seeded random
/// directions; returns how many align to within 1 px.
fn successes_at(model: &SynthModel, dict: &Dictionary, cfg: &AlignConfig, fraction: f64, count: usize) -> usize {
    let subjects = model.spec().subjects;
    let r = fraction * model.frame().width as f64;
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    (0..count)
        .filter(|&i| {
            let theta = rng.random_range(0.0..std::f64::consts::TAU);
            let offset = SimilarityParams::translation(r * theta.cos(), r * theta.sin());
            let (query, truth) = model.query(i % subjects, (i / subjects) % 4, &offset).unwrap();
            mrlr::align(&query, dict, &model.nominal_init(), cfg)
                .is_ok_and(|res| fiducial_error(&res.tau_final, &truth, model.frame()) <= 1.0)
        })
        .count()
}

#[test]
fn outside_data_improves_single_sample_alignment() {
    let spec = SynthSpec {
        samples: 1,
        outside: 20,
        ..SynthSpec::default()
    };
    let model = SynthModel::new(&spec).unwrap();
    let gallery = model.dictionary().unwrap();
    let augmented = model.dictionary_with_outside().unwrap();
    assert_eq!(augmented.outside_count(), 20);
    let count = 200;
    let without = successes_at(&model, &gallery, &AlignConfig::mrlr2(DEFAULT_S.min(gallery.len())), 0.1, count);
    let with = successes_at(&model, &augmented, &AlignConfig::mrlr2(DEFAULT_S), 0.1, count);
    println!("single-sample alignment at 10% translation: {without}/{count} without outside data, {with}/{count} with");
    assert!(with > without, "outside data did not help: {with} vs {without} of {count}");
}

#[test]
fn excluding_outside_atoms_matches_the_plain_gallery() {
    let spec = SynthSpec {
        outside: 6,
        ..SynthSpec::default()
    };
    let model = SynthModel::new(&spec).unwrap();
    let plain = model.dictionary().unwrap();
    let augmented = model.dictionary_with_outside().unwrap();
    let (query, _) = model.query(1, 0, &SimilarityParams::translation(1.5, -1.0)).unwrap();
    let cfg = AlignConfig::mrlr2(10);
    let excluded = mrlr::align(&query, &augmented, &model.nominal_init(), &AlignConfig { use_outside: false, ..cfg.clone() }).unwrap();
    let reference = mrlr::align(&query, &plain, &model.nominal_init(), &cfg).unwrap();
    assert_eq!(excluded.tau_final, reference.tau_final);
    assert_eq!(excluded.selected_atoms, reference.selected_atoms);
}

#[test]
fn generated_files_reproduce_the_in_memory_model() {
    let dir = tempfile::tempdir().unwrap();
    let spec = SynthSpec {
        outside: 4,
        ..SynthSpec::default()
    };
    generate(&spec, dir.path()).unwrap();
    let model = SynthModel::new(&spec).unwrap();
    let from_files = build_dictionary(dir.path(), spec.frame, true).unwrap();
    let in_memory = model.dictionary_with_outside().unwrap();
    assert_eq!(from_files.labels(), in_memory.labels());
    assert_eq!(from_files.outside_flags(), in_memory.outside_flags());
    // 8-bit quantization moves each unit-norm atom by well under 1%.
    let worst = (0..from_files.len())
        .map(|j| (from_files.atoms().column(j) - in_memory.atoms().column(j)).norm())
        .fold(0.0, f64::max);
    assert!(worst < 1e-2, "largest atom difference {worst}");

    let path = dir.path().join("dict.bin");
    save_dictionary(&from_files, &path).unwrap();
    let first = std::fs::read(&path).unwrap();
    let reloaded = load_dictionary(&path).unwrap();
    assert_eq!(reloaded, from_files);
    save_dictionary(&reloaded, &path).unwrap();
    assert_eq!(std::fs::read(&path).unwrap(), first);
}

#[test]
fn aligned_query_is_a_fixed_point_of_the_pipeline() {
    let model = SynthModel::new(&SynthSpec::default()).unwrap();
    let dict = model.dictionary().unwrap();
    let aligned = model.sample_image(3, 0).unwrap();
    for coder in [Coder::Crc, Coder::src()] {
        let (label, alignment, coding) =
            recognize_pipeline(&aligned, &dict, &SimilarityParams::IDENTITY, &AlignConfig::mrlr2(DEFAULT_S), coder, DEFAULT_LAMBDA)
                .unwrap();
        assert_eq!(label, 3);
        assert_eq!(coding.predicted, 3);
        assert!(alignment.converged);
        assert!(fiducial_error(&alignment.tau_final, &SimilarityParams::IDENTITY, model.frame()) < 0.05);
    }
}

#[test]
fn both_coders_recognize_displaced_queries() {
    let model = SynthModel::new(&SynthSpec::default()).unwrap();
    let dict = model.dictionary().unwrap();
    let cfg = AlignConfig::mrlr2(DEFAULT_S);
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let count = 40;
    let mut correct = [0usize; 2];
    for i in 0..count {
        let subject = i % 5;
        let offset = SimilarityParams::translation(rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0));
        let (query, _) = model.query(subject, i / 5 % 4, &offset).unwrap();
        for (k, coder) in [Coder::Crc, Coder::src()].into_iter().enumerate() {
            let (label, _, _) =
                recognize_pipeline(&query, &dict, &model.nominal_init(), &cfg, coder, DEFAULT_LAMBDA).unwrap();
            correct[k] += usize::from(label as usize == subject);
        }
    }
    println!("recognition of displaced queries: crc {}/{count}, src {}/{count}", correct[0], correct[1]);
    assert!(correct.iter().all(|&c| c * 10 >= count * 8), "{correct:?} of {count}");
}
