mod common;

use common::max_sobel;
use fpnproto::data::*;
use fpnproto::{MarginClass, Real};

const N: usize = 64;

fn lesion(class: MarginClass, seed: u64) -> Sample {
    let mut rng = sample_rng(seed, "test", 0);
    generate_lesion(class, &mut rng, N, &GeneratorConfig::default())
}

fn small_config(seed: u64) -> DataConfig {
    DataConfig {
        seed,
        train_per_class: 4,
        val_per_class: 2,
        eval_per_class: 3,
        negatives: 6,
        eval_negatives: 2,
        ..DataConfig::default()
    }
}

#[test]
fn fixed_seed_regenerates_identically() {
    for class in MarginClass::ALL {
        assert_eq!(lesion(class, 11), lesion(class, 11));
    }
    assert_ne!(
        lesion(MarginClass::Spiculated, 11).image,
        lesion(MarginClass::Spiculated, 12).image
    );
}

#[test]
fn samples_are_valid() {
    for seed in 0..40 {
        for class in MarginClass::ALL {
            let s = lesion(class, seed);
            assert_eq!(s.image.shape(), &[1, N, N]);
            assert_eq!(s.mask.shape(), &[N, N]);
            assert_eq!(s.label, class);
            assert!(s.image.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
            assert!(s.mask.data().iter().all(|&v| v == 0.0 || v == 1.0));
            let band = s.mask.data().iter().filter(|&&v| v == 0.0).count();
            if class == MarginClass::Negative {
                assert_eq!(band, 0);
            } else {
                assert!(band > 0);
            }
        }
    }
}

#[test]
fn circumscribed_edges_are_at_least_twice_as_sharp() {
    for seed in 0..200 {
        let circ = lesion(MarginClass::Circumscribed, seed);
        let ind = lesion(MarginClass::Indistinct, seed);
        // Same geometry, so the same annotation band.
        assert_eq!(circ.mask, ind.mask);
        let band = |x: usize, y: usize| circ.mask.data()[y * N + x] == 0.0;
        let sc = max_sobel(circ.image.data(), N, band);
        let si = max_sobel(ind.image.data(), N, band);
        assert!(sc >= 2.0 * si, "seed {seed}: {sc} vs {si}");
    }
}

#[test]
fn annotation_band_below_quarter_of_image() {
    let cfg = GeneratorConfig::default();
    for class in MarginClass::MARGINS {
        for i in 0..1000 {
            let mut rng = sample_rng(3, class.name(), i);
            let s = generate_lesion(class, &mut rng, N, &cfg);
            let frac = s.mask.data().iter().filter(|&&v| v == 0.0).count() as Real / (N * N) as Real;
            assert!(frac < 0.25, "{class} sample {i}: band covers {frac}");
        }
    }
}

#[test]
fn band_is_four_pixels_wide_around_a_disc() {
    // A disc of radius 10: the ring spans two pixels on each side.
    let inside: Vec<bool> = (0..N * N)
        .map(|i| {
            let (x, y) = ((i % N) as Real - 31.5, (i / N) as Real - 31.5);
            x.hypot(y) < 10.0
        })
        .collect();
    let mask = annotation_mask(&inside, N, 2);
    let row: Vec<Real> = (0..N).map(|x| mask[32 * N + x]).collect();
    let zeros: Vec<usize> = (0..N).filter(|&x| row[x] == 0.0).collect();
    // Horizontal line through the centre crosses the ring twice.
    assert_eq!(zeros.len(), 8, "{zeros:?}");
}

#[test]
fn edge_energy_threshold_separates_circumscribed_from_indistinct() {
    let cfg = GeneratorConfig::default();
    let mut feats = Vec::new();
    for i in 0..500 {
        let class = if i % 2 == 0 {
            MarginClass::Circumscribed
        } else {
            MarginClass::Indistinct
        };
        let mut rng = sample_rng(99, "separability", i);
        let s = generate_lesion(class, &mut rng, N, &cfg);
        // Whole-image edge energy; the classifier never sees the mask.
        feats.push((max_sobel(s.image.data(), N, |_, _| true), class == MarginClass::Circumscribed));
    }
    let (fit, test) = feats.split_at(250);
    let mut best = (0.0, 0usize);
    for &(t, _) in fit {
        let correct = fit.iter().filter(|&&(f, c)| (f >= t) == c).count();
        if correct > best.1 {
            best = (t, correct);
        }
    }
    let acc = test.iter().filter(|&&(f, c)| (f >= best.0) == c).count() as Real / test.len() as Real;
    assert!(acc > 0.7, "held-out accuracy {acc}");
}

#[test]
fn zero_negatives_is_empty() {
    let out = sample_negative_patches(0, N, &GeneratorConfig::default(), |i| sample_rng(1, "neg", i));
    assert!(out.is_empty());
}

#[test]
fn negative_patches_avoid_lesions() {
    let cfg = GeneratorConfig::default();
    let out = sample_negative_patches(500, N, &cfg, |i| sample_rng(5, "neg", i));
    assert_eq!(out.len(), 500);
    for s in &out {
        assert_eq!(s.label, MarginClass::Negative);
        assert!(s.mask.data().iter().all(|&v| v == 1.0));
        let SampleMeta::NegativeCrop { origin, lesion_box, .. } = &s.meta else {
            panic!("unexpected meta {:?}", s.meta);
        };
        let [ox, oy] = *origin;
        let [x0, y0, x1, y1] = *lesion_box;
        let overlap_x = ox < x1 && x0 < ox + N;
        let overlap_y = oy < y1 && y0 < oy + N;
        assert!(!(overlap_x && overlap_y), "crop {origin:?} hits box {lesion_box:?}");
    }
}

#[test]
fn default_counts() {
    let cfg = DataConfig::default();
    assert_eq!(cfg.train_per_class * 3, 1200);
    assert_eq!(cfg.eval_per_class * 3, 300);
    assert_eq!(cfg.negatives, 500);
    assert_eq!(fpnproto::trainer::TrainConfig::default().negatives_per_epoch, 200);
}

#[test]
fn dataset_splits_are_disjoint_and_complete() {
    let ds = Dataset::generate(&small_config(3)).unwrap();
    let mut ids = std::collections::BTreeSet::new();
    for name in SPLITS {
        for s in &ds.split(name).unwrap().samples {
            assert!(ids.insert(s.id.clone()), "duplicate id {}", s.id);
        }
    }
    for c in MarginClass::MARGINS {
        assert!(ds.train.class_counts()[c.index()] > 0);
        assert!(ds.eval.class_counts()[c.index()] > 0);
    }
    assert_eq!(ds.eval.class_counts()[MarginClass::Negative.index()], 2);
    // Different streams never produce the same image.
    assert_ne!(ds.train.samples[0].image, ds.val.samples[0].image);
}

#[test]
fn write_read_round_trip_is_lossless() {
    let ds = Dataset::generate(&small_config(4)).unwrap();
    let dir = tempfile::tempdir().unwrap();
    ds.write(dir.path()).unwrap();
    let back = Dataset::read(dir.path()).unwrap();
    assert_eq!(back, ds);
}

#[test]
fn regeneration_is_byte_identical() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    Dataset::generate(&small_config(7)).unwrap().write(a.path()).unwrap();
    Dataset::generate(&small_config(7)).unwrap().write(b.path()).unwrap();
    let mut names: Vec<_> = std::fs::read_dir(a.path())
        .unwrap()
        .map(|e| e.unwrap().file_name())
        .collect();
    names.sort();
    assert_eq!(names.len(), 5);
    for n in names {
        assert_eq!(
            std::fs::read(a.path().join(&n)).unwrap(),
            std::fs::read(b.path().join(&n)).unwrap(),
            "{n:?} differs"
        );
    }
}

#[test]
fn tampered_split_is_rejected() {
    let ds = Dataset::generate(&small_config(5)).unwrap();
    let dir = tempfile::tempdir().unwrap();
    ds.write(dir.path()).unwrap();
    let path = dir.path().join("train.fpt");
    let mut bytes = std::fs::read(&path).unwrap();
    bytes[8..12].copy_from_slice(&9u32.to_le_bytes());
    std::fs::write(&path, bytes).unwrap();
    assert!(matches!(
        Dataset::read(dir.path()),
        Err(fpnproto::Error::Version { found: 9, .. })
    ));
}

#[test]
fn invalid_generator_config_names_field() {
    let mut cfg = DataConfig::default();
    cfg.generator.spike_count = [20, 8];
    match Dataset::generate(&cfg) {
        Err(fpnproto::Error::Config { field, .. }) => assert_eq!(field, "data.generator.spike_count"),
        other => panic!("expected config error, got {other:?}"),
    }
}
