mod common;

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use scenenet::postprocess::*;
use scenenet::types::{EmbeddingMap, Grid, LogitMap};

fn params(b: f64) -> ClusteringParams {
    ClusteringParams {
        bandwidth: b,
        min_cluster_pixels: 1,
        ..ClusteringParams::default()
    }
}

/// Logits for `h x w` pixels that put all mass on `classes[i]`.
fn one_hot_logits(h: usize, w: usize, k: usize, classes: &[u8]) -> LogitMap {
    let p = h * w;
    let mut data = vec![0.0; k * p];
    for (i, &c) in classes.iter().enumerate() {
        data[c as usize * p + i] = 10.0;
    }
    LogitMap::new(h, w, k, data)
}

#[test]
fn foreground_picks_thing_pixels() {
    let logits = one_hot_logits(2, 2, 3, &[0, 2, 1, 2]);
    let fg = foreground_mask(&logits, &[2]);
    assert_eq!(fg.data(), &[false, true, false, true]);
    assert_eq!(foreground_mask(&one_hot_logits(1, 2, 3, &[0, 1]), &[2]).count(), 0);
    assert_eq!(foreground_mask(&one_hot_logits(1, 2, 3, &[2, 2]), &[2]).count(), 2);
}

#[test]
fn free_space_is_the_road_half() {
    let classes: Vec<u8> = (0..16).map(|i| if i < 8 { 0 } else { 1 }).collect();
    let fs = free_space_mask(&one_hot_logits(4, 4, 3, &classes), &[1]);
    assert_eq!(fs.data(), &classes.iter().map(|&c| c == 1).collect::<Vec<_>>()[..]);
    assert_eq!(free_space_mask(&one_hot_logits(1, 2, 3, &[1, 1]), &[1]).count(), 2);
    assert_eq!(free_space_mask(&one_hot_logits(1, 2, 3, &[0, 2]), &[1]).count(), 0);
}

#[test]
fn empty_foreground_gives_no_instances() {
    let emb = EmbeddingMap::new(2, 2, 2, vec![0.0; 8]);
    let (map, masks) = mean_shift_cluster(&emb, &Grid::filled(2, 2, false), &params(0.5)).unwrap();
    assert_eq!(map.max_id(), 0);
    assert!(masks.is_empty());
}

#[test]
fn identical_embeddings_form_one_instance() {
    let emb = EmbeddingMap::new(3, 3, 2, vec![0.7; 18]);
    let mut fg = Grid::filled(3, 3, true);
    fg.set(0, 0, false);
    let (map, masks) = mean_shift_cluster(&emb, &fg, &params(0.5)).unwrap();
    assert_eq!(masks.len(), 1);
    assert_eq!(masks[0], fg);
    assert_eq!(map.max_id(), 1);
}

#[test]
fn two_tight_blobs_match_brute_force() {
    let b = 0.5;
    let pixels: Vec<Vec<f32>> = (0..32)
        .map(|i| {
            let jitter = (i % 5) as f32 * 0.02;
            if i < 20 {
                vec![jitter, 0.0]
            } else {
                vec![2.0, jitter]
            }
        })
        .collect();
    let emb = EmbeddingMap::from_pixels(4, 8, &pixels);
    let fg = Grid::filled(4, 8, true);
    let (map, masks) = mean_shift_cluster(&emb, &fg, &params(b)).unwrap();
    assert_eq!(masks.len(), 2);
    assert!(common::same_partition(map.data(), &common::threshold_graph_partition(&emb, &fg, b)));
}

#[test]
fn small_clusters_are_dropped() {
    let pixels: Vec<Vec<f32>> = (0..10).map(|i| if i < 7 { vec![0.0] } else { vec![5.0] }).collect();
    let emb = EmbeddingMap::from_pixels(1, 10, &pixels);
    let p = ClusteringParams {
        min_cluster_pixels: 4,
        ..params(0.5)
    };
    let (map, masks) = mean_shift_cluster(&emb, &Grid::filled(1, 10, true), &p).unwrap();
    assert_eq!(masks.len(), 1);
    assert_eq!(masks[0].count(), 7);
    assert!(map.data()[7..].iter().all(|&v| v == 0));
}

#[test]
fn invalid_params_are_rejected() {
    let emb = EmbeddingMap::new(1, 1, 1, vec![0.0]);
    let fg = Grid::filled(1, 1, true);
    assert!(mean_shift_cluster(&emb, &fg, &params(0.0)).is_err());
    let zero_min = ClusteringParams {
        min_cluster_pixels: 0,
        ..params(0.5)
    };
    assert!(mean_shift_cluster(&emb, &fg, &zero_min).is_err());
    assert!(mean_shift_cluster(&emb, &Grid::filled(2, 1, true), &params(0.5)).is_err());
}

#[test]
fn minimum_cluster_size_scales_with_resolution() {
    assert_eq!(min_cluster_pixels_for(512, 1024), 100);
    assert_eq!(min_cluster_pixels_for(1024, 2048), 400);
    assert_eq!(min_cluster_pixels_for(8, 8), 1);
}

#[test]
fn majority_class_and_mean_confidence() {
    // 6 pixels of class 1, 4 of class 2, all within one mask.
    let classes: Vec<u8> = (0..10).map(|i| if i < 6 { 1 } else { 2 }).collect();
    let logits = one_hot_logits(1, 10, 3, &classes);
    let mask = Grid::filled(1, 10, true);
    let dets = assign_instance_classes(&[mask.clone()], &logits, &[1, 2]).unwrap();
    assert_eq!(dets.len(), 1);
    assert_eq!(dets[0].class_id, 1);
    let expected = (0..10).map(|i| logits.softmax(i)[1]).sum::<f64>() / 10.0;
    assert!((dets[0].confidence - expected).abs() < 1e-12);

    let uniform = LogitMap::new(1, 10, 4, vec![0.0; 40]);
    let dets = assign_instance_classes(&[mask], &uniform, &[0, 1, 2, 3]).unwrap();
    assert!((dets[0].confidence - 0.25).abs() < 1e-12);
}

#[test]
fn masks_without_thing_pixels_are_dropped() {
    let logits = one_hot_logits(1, 4, 3, &[0, 0, 2, 2]);
    let stuff_only = Grid::from_vec(1, 4, vec![true, true, false, false]);
    let thing = Grid::from_vec(1, 4, vec![false, false, true, true]);
    let dets = assign_instance_classes(&[stuff_only, thing], &logits, &[2]).unwrap();
    assert_eq!(dets.len(), 1);
    assert_eq!(dets[0].class_id, 2);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn separated_maps_match_threshold_graph(seed in any::<u64>()) {
        let b = 0.5;
        let (emb, fg) = common::separated_embedding_map(seed, b);
        let p = ClusteringParams { seed, ..params(b) };
        let (map, _) = mean_shift_cluster(&emb, &fg, &p).unwrap();
        prop_assert!(common::same_partition(map.data(), &common::threshold_graph_partition(&emb, &fg, b)));
    }

    #[test]
    fn claims_are_disjoint_foreground_subsets(seed in any::<u64>(), min in 1usize..6) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (h, w, dim) = (rng.gen_range(2..12), rng.gen_range(2..12), rng.gen_range(1..4));
        let data: Vec<f32> = (0..h * w * dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let emb = EmbeddingMap::new(h, w, dim, data);
        let fg = Grid::from_vec(h, w, (0..h * w).map(|_| rng.gen_bool(0.7)).collect());
        let p = ClusteringParams { min_cluster_pixels: min, seed, ..params(0.5) };
        let (map, masks) = mean_shift_cluster(&emb, &fg, &p).unwrap();
        let mut covered = vec![0usize; h * w];
        for (k, m) in masks.iter().enumerate() {
            prop_assert!(m.count() >= min);
            for (i, &v) in m.data().iter().enumerate() {
                if v {
                    prop_assert!(fg.data()[i]);
                    prop_assert_eq!(map.data()[i], k as u32 + 1);
                    covered[i] += 1;
                }
            }
        }
        prop_assert!(covered.iter().all(|&c| c <= 1));
        prop_assert_eq!(map.max_id() as usize, masks.len());
        let again = mean_shift_cluster(&emb, &fg, &p).unwrap();
        prop_assert_eq!(again.0, map);
    }
}
