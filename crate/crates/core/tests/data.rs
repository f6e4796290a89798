mod common;

use std::path::Path;

use image::{ImageBuffer, Luma, Rgb};
use proptest::prelude::*;
use scenenet::data::*;
use scenenet::types::{validate_sample, Grid, Sample, Violation, IGNORE_LABEL};

#[test]
fn disparity_decoding_and_conversion() {
    let cam = CameraParams::new(1000.0, 0.2).unwrap();
    assert_eq!(decode_disparity(0), None);
    assert_eq!(decode_disparity(257), Some(1.0));
    assert!((disparity_to_depth(Some(1.0), &cam).unwrap() - 200.0).abs() < 1e-12);
    assert_eq!(disparity_to_depth(None, &cam), None);
    assert_eq!(disparity_to_depth(Some(-1.0), &cam), None);
    assert!(CameraParams::new(0.0, 0.2).is_err());
    assert!(CameraParams::new(1000.0, -0.2).is_err());
}

#[test]
fn instance_values_decode_class_and_index() {
    assert_eq!(decode_instance_value(26001), Some((26, 1)));
    assert_eq!(decode_instance_value(7), None);
}

#[test]
fn class_weight_examples() {
    let w = compute_class_weights(&[0.0, 1.0], 1.02).unwrap();
    assert!((w.weights()[0] - 1.0 / 1.02f64.ln()).abs() < 1e-12);
    assert!((w.weights()[0] - 50.50).abs() < 5e-3);
    assert!((w.weights()[1] - 1.422).abs() < 5e-4);
    let even = compute_class_weights(&[0.3, 0.3], 1.02).unwrap();
    assert_eq!(even.weights()[0], even.weights()[1]);
    assert!(compute_class_weights(&[0.7, 0.7], 1.02).is_err());
    assert!(compute_class_weights(&[0.0], 1.0).is_err());
}

#[test]
fn synthetic_scenes_are_deterministic_and_valid() {
    let cfg = SyntheticSceneConfig::default();
    let a = make_synthetic_scene(&cfg).unwrap();
    assert_eq!(a, make_synthetic_scene(&cfg).unwrap());
    assert_ne!(a, make_synthetic_scene(&SyntheticSceneConfig { rng_seed: 1, ..cfg }).unwrap());
    let empty = make_synthetic_scene(&SyntheticSceneConfig { num_objects: 0, ..cfg }).unwrap();
    assert_eq!(empty.instances.max_id(), 0);
    assert!(make_synthetic_scene(&SyntheticSceneConfig { size: 60, ..cfg }).is_err());
    assert!(make_synthetic_scene(&SyntheticSceneConfig {
        depth_range: (0.0, 5.0),
        ..cfg
    })
    .is_err());
}

#[test]
fn overcrowded_scene_reports_its_seed() {
    let cfg = SyntheticSceneConfig {
        size: 16,
        num_objects: 40,
        rng_seed: 77,
        ..Default::default()
    };
    let err = make_synthetic_scene(&cfg).unwrap_err().to_string();
    assert!(err.contains("77"), "{err}");
}

/// Four-neighbour components of one id.
fn components(sample: &Sample, id: u32) -> usize {
    let (h, w) = sample.shape();
    let mut seen = vec![false; h * w];
    let mut count = 0;
    for start in 0..h * w {
        if seen[start] || sample.instances.data()[start] != id {
            continue;
        }
        count += 1;
        let mut stack = vec![start];
        seen[start] = true;
        while let Some(i) = stack.pop() {
            let (r, c) = (i / w, i % w);
            let mut next = Vec::new();
            if r > 0 {
                next.push(i - w);
            }
            if r + 1 < h {
                next.push(i + w);
            }
            if c > 0 {
                next.push(i - 1);
            }
            if c + 1 < w {
                next.push(i + 1);
            }
            for j in next {
                if !seen[j] && sample.instances.data()[j] == id {
                    seen[j] = true;
                    stack.push(j);
                }
            }
        }
    }
    count
}

#[test]
fn three_objects_are_three_connected_regions() {
    for seed in 0..20 {
        let s = make_synthetic_scene(&SyntheticSceneConfig {
            rng_seed: seed,
            ..Default::default()
        })
        .unwrap();
        assert_eq!(s.instances.max_id(), 3);
        for id in 1..=3 {
            assert_eq!(components(&s, id), 1, "seed {seed} id {id}");
        }
    }
}

#[test]
fn batches_keep_the_remainder_and_follow_the_seed() {
    let samples: Vec<Sample> = (0..5)
        .map(|i| {
            make_synthetic_scene(&SyntheticSceneConfig {
                size: 16,
                num_objects: 1,
                rng_seed: i,
                ..Default::default()
            })
            .unwrap()
        })
        .collect();
    let sizes: Vec<usize> = iterate_batches(&samples, 2, 0).unwrap().map(|b| b.samples.len()).collect();
    assert_eq!(sizes, [2, 2, 1]);
    let order = |seed| -> Vec<String> {
        iterate_batches(&samples, 2, seed)
            .unwrap()
            .flat_map(|b| b.samples.iter().map(|s| s.id.clone()).collect::<Vec<_>>())
            .collect()
    };
    assert_eq!(order(3), order(3));
    let ten: Vec<Sample> = (0..10).map(|_| samples[0].clone()).collect();
    assert_eq!(iterate_batches(&ten, 10, 0).unwrap().count(), 1);
    assert!(iterate_batches(&[], 2, 0).is_err());
}

#[test]
fn validation_reports_mutations() {
    let s = make_synthetic_scene(&SyntheticSceneConfig::default()).unwrap();
    assert!(validate_sample(&s, 3).is_empty());
    let mut bad = s.clone();
    bad.semantic.set(2, 5, 3);
    assert_eq!(validate_sample(&bad, 3), [Violation::SemanticOutOfRange { row: 2, col: 5, id: 3 }]);
    let mut gap = s.clone();
    for v in gap.instances.data_mut() {
        if *v == 3 {
            *v = 4;
        }
    }
    assert_eq!(validate_sample(&gap, 3), [Violation::EmptyInstance { id: 3 }]);
}

fn write_cityscapes_scene(root: &Path) {
    let (w, h) = (16u32, 8u32);
    let dir = |kind: &str| root.join(kind).join("val").join("aachen");
    for k in ["leftImg8bit", "gtFine", "disparity"] {
        std::fs::create_dir_all(dir(k)).unwrap();
    }
    let id = "aachen_000000_000019";
    let rgb = ImageBuffer::from_fn(w, h, |x, y| Rgb([(x * 10) as u8, (y * 20) as u8, 7]));
    rgb.save(dir("leftImg8bit").join(format!("{id}{IMAGE_SUFFIX}"))).unwrap();
    // Road (label 7) on the left, a car (label 26) on the right, one
    // unlabeled (0) pixel.
    let labels = ImageBuffer::from_fn(w, h, |x, y| Luma([if (x, y) == (0, 0) { 0u8 } else if x < 8 { 7 } else { 26 }]));
    labels.save(dir("gtFine").join(format!("{id}{LABEL_SUFFIX}"))).unwrap();
    let inst = ImageBuffer::from_fn(w, h, |x, _| Luma([if x < 8 { 7u16 } else if x < 12 { 26001 } else { 26002 }]));
    inst.save(dir("gtFine").join(format!("{id}{INSTANCE_SUFFIX}"))).unwrap();
    let disp = ImageBuffer::from_fn(w, h, |x, _| Luma([if x == 15 { 0u16 } else { 257 }]));
    disp.save(dir("disparity").join(format!("{id}{DISPARITY_SUFFIX}"))).unwrap();
}

#[test]
fn cityscapes_layout_loads_with_remapping() {
    let tmp = tempfile::tempdir().unwrap();
    write_cityscapes_scene(tmp.path());
    let ds = DatasetConfig::cityscapes(tmp.path(), 1000.0, 0.2);
    let samples = ds.load_split("val").unwrap();
    assert_eq!(samples.len(), 1);
    let s = &samples[0];
    assert_eq!(s.shape(), (8, 16));
    assert_eq!(*s.semantic.get(0, 0), IGNORE_LABEL);
    assert_eq!(*s.semantic.get(1, 1), 0);
    assert_eq!(*s.semantic.get(1, 9), 13);
    assert_eq!(*s.instances.get(0, 3), 0);
    assert_eq!(*s.instances.get(0, 9), 1);
    assert_eq!(*s.instances.get(0, 13), 2);
    assert!((s.depth.depth.get(3, 3) - 200.0).abs() < 1e-3);
    assert!(!s.depth.valid.get(3, 15));
    assert!((s.image.pixel(1, 2)[0] - 20.0 / 255.0).abs() < 1e-6);

    let weights = ds.class_weights("val").unwrap();
    assert_eq!(weights.weights().len(), 19);
    // Frequencies are cached next to the data.
    let cached = std::fs::read_dir(tmp.path())
        .unwrap()
        .filter(|e| e.as_ref().unwrap().file_name().to_string_lossy().starts_with("class_frequencies"))
        .count();
    assert_eq!(cached, 1);
    assert_eq!(ds.class_weights("val").unwrap(), weights);
}

#[test]
fn mismatched_maps_are_rejected() {
    let tmp = tempfile::tempdir().unwrap();
    write_cityscapes_scene(tmp.path());
    let path = tmp.path().join("disparity/val/aachen/aachen_000000_000019_disparity.png");
    ImageBuffer::from_pixel(8, 8, Luma([257u16])).save(&path).unwrap();
    let ds = DatasetConfig::cityscapes(tmp.path(), 1000.0, 0.2);
    assert!(ds.load_split("val").is_err());
}

#[test]
fn synthetic_export_round_trips_through_the_loader() {
    let tmp = tempfile::tempdir().unwrap();
    let cam = CameraParams::typical_cityscapes();
    let (_, originals) = export_synthetic_dataset(tmp.path(), "train", 2, &SyntheticSceneConfig::default(), cam).unwrap();
    let ds = DatasetConfig::load(&tmp.path().join("dataset.toml")).unwrap();
    let loaded = ds.load_split("train").unwrap();
    assert_eq!(loaded.len(), 2);
    for (a, b) in originals.iter().zip(&loaded) {
        assert_eq!(a.id, b.id);
        assert_eq!(a.semantic, b.semantic);
        assert!(common::same_partition(a.instances.data(), b.instances.data()));
        assert_eq!(a.instances.max_id(), b.instances.max_id());
        assert_eq!(a.depth.valid, b.depth.valid);
        for (x, y) in a.depth.depth.data().iter().zip(b.depth.depth.data()) {
            // One disparity step of quantization at these depths.
            let disp = depth_to_disparity(*x as f64, &cam);
            let step = *x as f64 - depth_to_disparity(disp + 1.0 / 256.0, &cam);
            assert!((x - y).abs() as f64 <= step, "{x} vs {y}");
        }
        for (x, y) in a.image.data().iter().zip(b.image.data()) {
            assert!((x - y).abs() <= 0.5 / 255.0 + 1e-6);
        }
        assert!(validate_sample(b, 3).is_empty());
    }
    let params = ds.clustering_params(0.5, 64, 64);
    assert_eq!(params.min_cluster_pixels, SyntheticSceneConfig::default().min_object_pixels() / 2);
}

#[test]
fn resize_keeps_constant_images() {
    let img = scenenet::types::ImageTensor::new(8, 8, vec![0.4; 3 * 64]);
    let r = resize_image(&img, 16, 24);
    assert_eq!((r.height(), r.width()), (16, 24));
    assert!(r.data().iter().all(|v| (v - 0.4).abs() < 1.0 / 255.0));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn disparity_round_trip(d in 0.01f64..500.0, focal in 100.0f64..3000.0, baseline in 0.05f64..1.0) {
        let cam = CameraParams::new(focal, baseline).unwrap();
        let depth = disparity_to_depth(Some(d), &cam).unwrap();
        prop_assert!((depth_to_disparity(depth, &cam) - d).abs() / d < 1e-6);
        let half = disparity_to_depth(Some(2.0 * d), &cam).unwrap();
        prop_assert!((half - depth / 2.0).abs() <= 1e-9 * depth);
    }

    #[test]
    fn raw_disparity_encoding_round_trips(raw in 1u16..u16::MAX) {
        prop_assert_eq!(encode_disparity(decode_disparity(raw).unwrap()), raw);
    }

    #[test]
    fn weights_fall_with_frequency(a in 0.0f64..0.5, b in 0.0f64..0.5) {
        let w = compute_class_weights(&[a, b], 1.02).unwrap();
        prop_assert!(w.weights().iter().all(|v| v.is_finite() && *v > 0.0));
        if a < b {
            prop_assert!(w.weights()[0] > w.weights()[1]);
        }
    }

    #[test]
    fn synthetic_scenes_validate(seed in 0u64..10_000, objects in 0usize..5) {
        let cfg = SyntheticSceneConfig { rng_seed: seed, num_objects: objects, ..Default::default() };
        let s = make_synthetic_scene(&cfg).unwrap();
        prop_assert!(validate_sample(&s, cfg.num_classes).is_empty());
        prop_assert_eq!(s.instances.max_id() as usize, objects);
        prop_assert_eq!(s.depth.depth.shape(), s.shape());
        prop_assert_eq!(s.semantic.shape(), s.shape());
    }
}

#[test]
fn grid_helpers() {
    let g = Grid::from_vec(2, 2, vec![true, false, true, true]);
    assert_eq!(g.count(), 3);
}
