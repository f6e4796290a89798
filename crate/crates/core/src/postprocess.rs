//! Turning raw network outputs into discrete predictions.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::types::{EmbeddingMap, Grid, InstanceDetection, InstanceMap, LogitMap};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ClusteringParams {
    pub bandwidth: f64,
    pub max_iterations: usize,
    pub convergence_tol: f64,
    pub min_cluster_pixels: usize,
    pub seed: u64,
}

impl Default for ClusteringParams {
    fn default() -> Self {
        Self {
            bandwidth: 0.5,
            max_iterations: 100,
            convergence_tol: 1e-3,
            min_cluster_pixels: 100,
            seed: 0,
        }
    }
}

impl ClusteringParams {
    /// Defaults with the minimum cluster size scaled from 100 pixels at
    /// 512x1024 to an `h x w` input.
    pub fn for_resolution(bandwidth: f64, h: usize, w: usize) -> Self {
        Self {
            bandwidth,
            min_cluster_pixels: min_cluster_pixels_for(h, w),
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.bandwidth > 0.0 && self.bandwidth.is_finite()) {
            return Err(Error::Config(format!("bandwidth {} must be positive", self.bandwidth)));
        }
        if self.min_cluster_pixels == 0 {
            return Err(Error::Config("min_cluster_pixels must be at least 1".into()));
        }
        if !(self.convergence_tol >= 0.0) {
            return Err(Error::Config("convergence_tol must be non-negative".into()));
        }
        Ok(())
    }
}

pub fn min_cluster_pixels_for(h: usize, w: usize) -> usize {
    let scaled = 100.0 * (h * w) as f64 / (512.0 * 1024.0);
    (scaled.round() as usize).max(1)
}

fn class_mask(logits: &LogitMap, classes: &[u8]) -> Grid<bool> {
    logits.argmax_map().map(|c| classes.contains(c))
}

/// Pixels whose predicted class is a thing class.
pub fn foreground_mask(logits: &LogitMap, thing_classes: &[u8]) -> Grid<bool> {
    class_mask(logits, thing_classes)
}

/// Pixels whose predicted class is drivable.
pub fn free_space_mask(logits: &LogitMap, drivable_classes: &[u8]) -> Grid<bool> {
    class_mask(logits, drivable_classes)
}

/// Mean-shift with a flat kernel, claiming one instance per converged
/// center. Returns the instance map (ids 1..K in claim order) and the
/// matching masks.
pub fn mean_shift_cluster(
    embeddings: &EmbeddingMap,
    foreground: &Grid<bool>,
    params: &ClusteringParams,
) -> Result<(InstanceMap, Vec<Grid<bool>>)> {
    params.validate()?;
    let (h, w) = (embeddings.height(), embeddings.width());
    if foreground.shape() != (h, w) {
        return Err(Error::Shape(format!(
            "foreground {:?} vs embeddings {:?}",
            foreground.shape(),
            (h, w)
        )));
    }
    let dim = embeddings.dim();
    let plane = h * w;
    let pixels: Vec<usize> = (0..plane).filter(|&i| foreground.data()[i]).collect();
    let n = pixels.len();
    // Pixel-major copy of the foreground embeddings.
    let mut points = vec![0.0f64; n * dim];
    let emb = embeddings.data();
    for (j, &p) in pixels.iter().enumerate() {
        for d in 0..dim {
            points[j * dim + d] = emb[d * plane + p] as f64;
        }
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(params.seed));

    let b2 = params.bandwidth * params.bandwidth;
    let dist2 = |a: &[f64], j: usize| -> f64 {
        let q = &points[j * dim..(j + 1) * dim];
        a.iter().zip(q).map(|(x, y)| (x - y) * (x - y)).sum()
    };
    let mut claimed = vec![false; n];
    let mut cursor = 0;
    let mut ids = InstanceMap(Grid::filled(h, w, 0u32));
    let mut masks = Vec::new();
    let mut center = vec![0.0f64; dim];
    let mut next = vec![0.0f64; dim];
    loop {
        while cursor < n && claimed[order[cursor]] {
            cursor += 1;
        }
        if cursor >= n {
            break;
        }
        let seed = order[cursor];
        center.copy_from_slice(&points[seed * dim..(seed + 1) * dim]);
        for _ in 0..params.max_iterations {
            next.iter_mut().for_each(|v| *v = 0.0);
            let mut count = 0usize;
            for j in 0..n {
                if !claimed[j] && dist2(&center, j) <= b2 {
                    for d in 0..dim {
                        next[d] += points[j * dim + d];
                    }
                    count += 1;
                }
            }
            if count == 0 {
                break;
            }
            let mut shift2 = 0.0;
            for d in 0..dim {
                next[d] /= count as f64;
                shift2 += (next[d] - center[d]) * (next[d] - center[d]);
            }
            center.copy_from_slice(&next);
            if shift2.sqrt() < params.convergence_tol {
                break;
            }
        }
        let mut members: Vec<usize> = (0..n)
            .filter(|&j| !claimed[j] && dist2(&center, j) <= b2)
            .collect();
        if members.is_empty() {
            // Center drifted away from every point; the seed still forms
            // its own (tiny) cluster so the loop always progresses.
            members.push(seed);
        }
        for &j in &members {
            claimed[j] = true;
        }
        if members.len() < params.min_cluster_pixels {
            continue;
        }
        let id = masks.len() as u32 + 1;
        let mut mask = Grid::filled(h, w, false);
        for &j in &members {
            mask.data_mut()[pixels[j]] = true;
            ids.data_mut()[pixels[j]] = id;
        }
        masks.push(mask);
    }
    Ok((ids, masks))
}

/// Labels each mask with the majority predicted thing class inside it; the
/// confidence is the mean softmax probability of that class over the mask.
/// Masks without any thing-class pixel are dropped.
pub fn assign_instance_classes(
    masks: &[Grid<bool>],
    logits: &LogitMap,
    thing_classes: &[u8],
) -> Result<Vec<InstanceDetection>> {
    let k = logits.classes();
    let mut out = Vec::with_capacity(masks.len());
    for (i, mask) in masks.iter().enumerate() {
        if mask.shape() != logits.shape() {
            return Err(Error::Shape("mask and logits differ in size".into()));
        }
        let mut votes = vec![0usize; k];
        for (p, &m) in mask.data().iter().enumerate() {
            if m {
                let c = logits.argmax(p);
                if thing_classes.contains(&c) {
                    votes[c as usize] += 1;
                }
            }
        }
        let best = (0..k).filter(|&c| votes[c] > 0).max_by(|&a, &b| votes[a].cmp(&votes[b]).then(b.cmp(&a)));
        let Some(class) = best else {
            log::debug!("instance mask {i} has no thing-class pixels; dropped");
            continue;
        };
        let mut sum = 0.0;
        let mut count = 0usize;
        for (p, &m) in mask.data().iter().enumerate() {
            if m {
                sum += logits.softmax(p)[class];
                count += 1;
            }
        }
        out.push(InstanceDetection {
            mask: mask.clone(),
            class_id: class as u8,
            confidence: sum / count as f64,
        });
    }
    Ok(out)
}
