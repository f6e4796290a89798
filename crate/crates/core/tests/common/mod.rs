//! Helpers shared by the integration test targets.
#![allow(dead_code)]

use std::path::Path;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use scenenet::data::{export_synthetic_dataset, CameraParams, SyntheticSceneConfig};
use scenenet::harness::{evaluate, train, EvalOptions, RunConfig};
use scenenet::losses::{berhu_values, discriminative_image, BerHuParams, DiscriminativeParams};
use scenenet::types::{EmbeddingMap, Grid};

/// Guard band around hinge and switch points where finite differences
/// straddle a kink.
pub const KINK_GUARD: f64 = 1e-3;
pub const FD_STEP: f64 = 1e-5;

/// `||a - b|| / max(||a||, ||b||)`, zero when both vanish.
pub fn relative_error(a: &[f64], b: &[f64]) -> f64 {
    let diff = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let scale = a.iter().map(|x| x * x).sum::<f64>().sqrt().max(b.iter().map(|x| x * x).sum::<f64>().sqrt());
    if scale == 0.0 {
        0.0
    } else {
        diff / scale
    }
}

pub fn central_differences(x: &[f64], f: impl Fn(&[f64]) -> f64) -> Vec<f64> {
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|i| {
            probe[i] = x[i] + FD_STEP;
            let up = f(&probe);
            probe[i] = x[i] - FD_STEP;
            let down = f(&probe);
            probe[i] = x[i];
            (up - down) / (2.0 * FD_STEP)
        })
        .collect()
}

/// Random 8x8 discriminative problem: embeddings `[dim, 64]` and ids in
/// `0..=clusters`.
pub fn random_discriminative_input(seed: u64) -> (Vec<f64>, usize, Vec<u32>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dim = rng.gen_range(1..=4);
    let clusters = rng.gen_range(1..=4u32);
    let ids: Vec<u32> = (0..64).map(|_| rng.gen_range(0..=clusters)).collect();
    let emb = (0..dim * 64).map(|_| rng.gen_range(-1.5..1.5)).collect();
    (emb, dim, ids)
}

/// Smallest distance of any hinge argument to its switch point.
pub fn discriminative_kink_distance(emb: &[f64], dim: usize, ids: &[u32], params: &DiscriminativeParams) -> f64 {
    let p = ids.len();
    let max_id = ids.iter().copied().max().unwrap_or(0) as usize;
    let mut means = vec![vec![0.0; dim]; max_id + 1];
    let mut counts = vec![0usize; max_id + 1];
    for (px, &id) in ids.iter().enumerate() {
        if id > 0 {
            counts[id as usize] += 1;
            for d in 0..dim {
                means[id as usize][d] += emb[d * p + px];
            }
        }
    }
    for k in 1..=max_id {
        if counts[k] > 0 {
            for v in &mut means[k] {
                *v /= counts[k] as f64;
            }
        }
    }
    let dist = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let mut closest = f64::INFINITY;
    for (px, &id) in ids.iter().enumerate() {
        if id > 0 {
            let x: Vec<f64> = (0..dim).map(|d| emb[d * p + px]).collect();
            closest = closest.min((dist(&x, &means[id as usize]) - params.delta_v).abs());
        }
    }
    for a in 1..=max_id {
        for b in a + 1..=max_id {
            if counts[a] > 0 && counts[b] > 0 {
                closest = closest.min((dist(&means[a], &means[b]) - 2.0 * params.delta_d).abs());
            }
        }
        if counts[a] > 0 {
            closest = closest.min(means[a].iter().map(|v| v * v).sum::<f64>().sqrt());
        }
    }
    closest
}

/// Relative gradient error of the discriminative loss for one seed, or
/// `None` when the input lies within the guard band of a kink.
pub fn discriminative_gradient_error(seed: u64) -> Option<f64> {
    let params = DiscriminativeParams::default();
    let (emb, dim, ids) = random_discriminative_input(seed);
    if discriminative_kink_distance(&emb, dim, &ids, &params) < KINK_GUARD {
        return None;
    }
    let mut analytic = vec![0.0; emb.len()];
    discriminative_image(&emb, dim, &ids, &params, Some(&mut analytic));
    let numeric = central_differences(&emb, |x| discriminative_image(x, dim, &ids, &params, None).total());
    Some(relative_error(&analytic, &numeric))
}

pub fn random_depth_input(seed: u64) -> (Vec<f64>, Vec<f64>, Vec<bool>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let target: Vec<f64> = (0..64).map(|_| rng.gen_range(1.0..30.0)).collect();
    let pred = target.iter().map(|t| t + rng.gen_range(-4.0..4.0)).collect();
    let valid = (0..64).map(|_| rng.gen_bool(0.85)).collect();
    (pred, target, valid)
}

pub fn berhu_kink_distance(pred: &[f64], target: &[f64], valid: &[bool], params: &BerHuParams) -> f64 {
    let mut abs: Vec<f64> = (0..pred.len()).filter(|&i| valid[i]).map(|i| (pred[i] - target[i]).abs()).collect();
    abs.sort_by(|a, b| b.total_cmp(a));
    let c = params.c_fraction * abs[0];
    let mut closest = abs.get(1).map_or(f64::INFINITY, |second| abs[0] - second);
    for &a in &abs {
        closest = closest.min(a).min((a - c).abs());
    }
    closest
}

pub fn berhu_gradient_error(seed: u64) -> Option<f64> {
    let params = BerHuParams::default();
    let (pred, target, valid) = random_depth_input(seed);
    if berhu_kink_distance(&pred, &target, &valid, &params) < KINK_GUARD {
        return None;
    }
    let mut analytic = vec![0.0; pred.len()];
    berhu_values(&pred, &target, &valid, &params, Some(&mut analytic)).unwrap();
    let numeric = central_differences(&pred, |x| berhu_values(x, &target, &valid, &params, None).unwrap());
    Some(relative_error(&analytic, &numeric))
}

/// Runs gradient checks for seeds `0..` until `wanted` inputs clear the
/// guard band; returns the worst error seen.
pub fn worst_gradient_error(wanted: usize, check: impl Fn(u64) -> Option<f64>) -> (usize, f64) {
    let mut checked = 0;
    let mut worst: f64 = 0.0;
    for seed in 0..(50 * wanted as u64) {
        if let Some(e) = check(seed) {
            worst = worst.max(e);
            checked += 1;
            if checked == wanted {
                break;
            }
        }
    }
    (checked, worst)
}

fn random_unit(rng: &mut ChaCha8Rng, dim: usize) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 1e-3 {
            return v.into_iter().map(|x| x / n).collect();
        }
    }
}

/// Centers with pairwise distance at least `min_dist`, drawn in a box that
/// grows until they fit.
pub fn separated_centers(rng: &mut ChaCha8Rng, count: usize, dim: usize, min_dist: f64) -> Vec<Vec<f64>> {
    let mut half = min_dist * count as f64;
    loop {
        let mut centers: Vec<Vec<f64>> = Vec::new();
        for _ in 0..200 * count {
            if centers.len() == count {
                break;
            }
            let c: Vec<f64> = (0..dim).map(|_| rng.gen_range(-half..half)).collect();
            let ok = centers
                .iter()
                .all(|o| o.iter().zip(&c).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt() >= min_dist);
            if ok {
                centers.push(c);
            }
        }
        if centers.len() == count {
            return centers;
        }
        half *= 2.0;
    }
}

/// An embedding buffer whose clusters sit within `delta_v` of their means
/// and whose means are at least `2 delta_d` apart. Members come in mirrored
/// pairs around the center so the center is the mean; background pixels get
/// unconstrained values.
pub fn margin_configuration(seed: u64, params: &DiscriminativeParams) -> (Vec<f64>, usize, Vec<u32>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dim = rng.gen_range(1..=8);
    let clusters = rng.gen_range(1..=6);
    let centers = separated_centers(&mut rng, clusters, dim, 2.0 * params.delta_d * (1.0 + 1e-6));
    let mut pixels: Vec<(u32, Vec<f64>)> = Vec::new();
    for (k, c) in centers.iter().enumerate() {
        let pairs = rng.gen_range(1..=10);
        for _ in 0..pairs {
            let r = params.delta_v * rng.gen_range(0.0..1.0) * (1.0 - 1e-9);
            let u = random_unit(&mut rng, dim);
            let a: Vec<f64> = c.iter().zip(&u).map(|(c, u)| c + r * u).collect();
            let b: Vec<f64> = c.iter().zip(&u).map(|(c, u)| c - r * u).collect();
            pixels.push((k as u32 + 1, a));
            pixels.push((k as u32 + 1, b));
        }
    }
    for _ in 0..rng.gen_range(0..10) {
        pixels.push((0, (0..dim).map(|_| rng.gen_range(-10.0..10.0)).collect()));
    }
    // Shuffle pixel order.
    for i in (1..pixels.len()).rev() {
        let j = rng.gen_range(0..=i);
        pixels.swap(i, j);
    }
    let p = pixels.len();
    let mut emb = vec![0.0; dim * p];
    for (px, (_, v)) in pixels.iter().enumerate() {
        for d in 0..dim {
            emb[d * p + px] = v[d];
        }
    }
    (emb, dim, pixels.into_iter().map(|(id, _)| id).collect())
}

/// Random embedding map with well separated clusters: each cluster lies in
/// a ball of diameter below `b`, and points of different clusters are more
/// than `3b` apart. Returns the map and the foreground mask.
pub fn separated_embedding_map(seed: u64, b: f64) -> (EmbeddingMap, Grid<bool>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let h = rng.gen_range(4..=16);
    let w = rng.gen_range(4..=16);
    let dim = rng.gen_range(1..=8);
    let clusters = rng.gen_range(1..=6);
    // Radius below b/2 keeps every diameter below b; centers 4b apart leave
    // more than 3b between any two members of different clusters.
    let centers = separated_centers(&mut rng, clusters, dim, 4.0 * b);
    let mut fg = Grid::filled(h, w, false);
    let pixels: Vec<Vec<f32>> = (0..h * w)
        .map(|i| {
            if rng.gen_bool(0.8) {
                fg.data_mut()[i] = true;
                let c = &centers[rng.gen_range(0..clusters)];
                let r = 0.499 * b * rng.gen_range(0.0..1.0);
                let u = random_unit(&mut rng, dim);
                c.iter().zip(&u).map(|(c, u)| (c + r * u) as f32).collect()
            } else {
                (0..dim).map(|_| rng.gen_range(-50.0..50.0f32)).collect()
            }
        })
        .collect();
    (EmbeddingMap::from_pixels(h, w, &pixels), fg)
}

/// Connected components of the graph joining foreground pixels whose
/// embeddings are closer than `b`. Labels are 0 for background and 1..K in
/// order of first appearance.
pub fn threshold_graph_partition(emb: &EmbeddingMap, fg: &Grid<bool>, b: f64) -> Vec<u32> {
    let n = fg.len();
    let px: Vec<Vec<f32>> = (0..n).map(|i| emb.pixel(i)).collect();
    let mut parent: Vec<usize> = (0..n).collect();
    fn find(parent: &mut [usize], mut i: usize) -> usize {
        while parent[i] != i {
            parent[i] = parent[parent[i]];
            i = parent[i];
        }
        i
    }
    for i in 0..n {
        if !fg.data()[i] {
            continue;
        }
        for j in i + 1..n {
            if !fg.data()[j] {
                continue;
            }
            let d2: f64 = px[i].iter().zip(&px[j]).map(|(a, b)| (*a as f64 - *b as f64).powi(2)).sum();
            if d2.sqrt() < b {
                let (ri, rj) = (find(&mut parent, i), find(&mut parent, j));
                parent[ri] = rj;
            }
        }
    }
    let mut label = vec![0u32; n];
    let mut root_label = std::collections::HashMap::new();
    for i in 0..n {
        if fg.data()[i] {
            let r = find(&mut parent, i);
            let next = root_label.len() as u32 + 1;
            label[i] = *root_label.entry(r).or_insert(next);
        }
    }
    label
}

/// Whether two labelings induce the same partition (0 = unlabelled must
/// agree, positive labels may be renamed).
pub fn same_partition(a: &[u32], b: &[u32]) -> bool {
    use std::collections::HashMap;
    if a.len() != b.len() {
        return false;
    }
    let (mut ab, mut ba) = (HashMap::new(), HashMap::new());
    for (&x, &y) in a.iter().zip(b) {
        if (x == 0) != (y == 0) {
            return false;
        }
        if x == 0 {
            continue;
        }
        if *ab.entry(x).or_insert(y) != y || *ba.entry(y).or_insert(x) != x {
            return false;
        }
    }
    true
}

#[derive(Clone, Copy, Debug)]
pub struct ToyOutcome {
    pub miou: f64,
    pub ap50: f64,
    pub car_mae: f64,
    pub seconds: f64,
}

/// Writes four 64x64 scenes, trains the toy recipe for 500 steps through
/// the regular training entry point and evaluates on the training split.
pub fn toy_overfit(dir: &Path) -> scenenet::Result<ToyOutcome> {
    let start = Instant::now();
    let base = SyntheticSceneConfig::default();
    export_synthetic_dataset(dir, "train", 4, &base, CameraParams::typical_cityscapes())?;
    let mut cfg = RunConfig::toy(dir.join("dataset.toml"), dir.join("run"), 4);
    cfg.iterations = 500;
    let outcome = train(&cfg)?;
    let ds = scenenet::data::DatasetConfig::load(&dir.join("dataset.toml"))?;
    let samples = ds.load_split("train")?;
    let ckpt = scenenet::checkpoint::Checkpoint::load(&outcome.last_checkpoint)?;
    let report = evaluate(&ckpt.to_model()?, &samples, &ds, &EvalOptions::for_checkpoint(&ckpt))?;
    let car_mae = report
        .car_depth
        .iter()
        .find(|(cap, _)| *cap == 100.0)
        .and_then(|(_, e)| *e)
        .map_or(f64::INFINITY, |e| e.mae);
    Ok(ToyOutcome {
        miou: report.iou.mean_class,
        ap50: report.ap.map_or(0.0, |a| a.ap50),
        car_mae,
        seconds: start.elapsed().as_secs_f64(),
    })
}
