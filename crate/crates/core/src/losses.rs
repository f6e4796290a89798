//! Task losses. All arithmetic is `f64`; the `*_values` functions work on
//! flat batch buffers and optionally write the analytic gradient with
//! respect to their first argument, which is what the trainer feeds back
//! into the network.

use serde::{Deserialize, Serialize};

use crate::data::ClassWeightTable;
use crate::error::{Error, Result};
use crate::types::{DepthMap, EmbeddingMap, InstanceMap, LogitMap, LossBreakdown, SemanticMap,
    IGNORE_LABEL};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiscriminativeParams {
    pub delta_v: f64,
    pub delta_d: f64,
}

impl Default for DiscriminativeParams {
    fn default() -> Self {
        Self {
            delta_v: 0.5,
            delta_d: 1.5,
        }
    }
}

impl DiscriminativeParams {
    pub fn new(delta_v: f64, delta_d: f64) -> Result<Self> {
        let p = Self { delta_v, delta_d };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.delta_v > 0.0 && self.delta_d > 0.0) {
            return Err(Error::Config("discriminative margins must be positive".into()));
        }
        if self.delta_d <= 2.0 * self.delta_v {
            return Err(Error::Config(format!(
                "delta_d ({}) must exceed 2 * delta_v ({})",
                self.delta_d, self.delta_v
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BerHuParams {
    pub c_fraction: f64,
}

impl Default for BerHuParams {
    fn default() -> Self {
        Self { c_fraction: 0.2 }
    }
}

impl BerHuParams {
    pub fn new(c_fraction: f64) -> Result<Self> {
        if !(c_fraction > 0.0 && c_fraction <= 1.0) {
            return Err(Error::Config(format!(
                "berHu c_fraction must lie in (0, 1], got {c_fraction}"
            )));
        }
        Ok(Self { c_fraction })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskWeights {
    pub semantic: f64,
    pub instance: f64,
    pub depth: f64,
}

impl Default for TaskWeights {
    fn default() -> Self {
        Self {
            semantic: 1.0,
            instance: 1.0,
            depth: 1.0,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct InstanceLoss {
    pub l_var: f64,
    pub l_dist: f64,
    pub l_reg: f64,
}

impl InstanceLoss {
    pub fn total(&self) -> f64 {
        self.l_var + self.l_dist + self.l_reg
    }
}

/// Mean weighted negative log-likelihood over the non-ignored pixels of a
/// batch. `logits` is `[n, k, p]`, `targets` is `[n, p]`.
pub fn weighted_cross_entropy_batch(
    logits: &[f64],
    num_classes: usize,
    images: usize,
    targets: &[u8],
    weights: &[f64],
    mut grad: Option<&mut [f64]>,
) -> Result<f64> {
    let k = num_classes;
    if k == 0 || images == 0 || targets.len() % images != 0 || logits.len() != targets.len() * k {
        return Err(Error::Shape(format!(
            "{} logits for {} targets, {k} classes and {images} images",
            logits.len(),
            targets.len()
        )));
    }
    if weights.len() < k {
        return Err(Error::InvalidInput(format!(
            "{} class weights for {k} classes",
            weights.len()
        )));
    }
    let counted = targets.iter().filter(|&&t| t != IGNORE_LABEL).count();
    if counted == 0 {
        return Err(Error::EmptySet("cross-entropy over fully ignored pixels"));
    }
    if let Some(g) = grad.as_deref_mut() {
        g.fill(0.0);
    }
    let p = targets.len() / images;
    let inv = 1.0 / counted as f64;
    let mut total = 0.0;
    let mut scores = vec![0.0; k];
    for img in 0..images {
        let base = img * k * p;
        for px in 0..p {
            let t = targets[img * p + px];
            if t == IGNORE_LABEL {
                continue;
            }
            let t = t as usize;
            if t >= k {
                return Err(Error::InvalidInput(format!(
                    "target class {t} outside {k} classes"
                )));
            }
            for (c, s) in scores.iter_mut().enumerate() {
                *s = logits[base + c * p + px];
            }
            let m = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = scores.iter().map(|s| (s - m).exp()).sum();
            let log_z = m + z.ln();
            let w = weights[t];
            total += w * (log_z - scores[t]);
            if let Some(g) = grad.as_deref_mut() {
                for (c, s) in scores.iter().enumerate() {
                    let onehot = if c == t { 1.0 } else { 0.0 };
                    g[base + c * p + px] = inv * w * ((s - log_z).exp() - onehot);
                }
            }
        }
    }
    Ok(total * inv)
}

/// Single-image form of [`weighted_cross_entropy_batch`].
pub fn weighted_cross_entropy_values(
    logits: &[f64],
    num_classes: usize,
    targets: &[u8],
    weights: &[f64],
    grad: Option<&mut [f64]>,
) -> Result<f64> {
    weighted_cross_entropy_batch(logits, num_classes, 1, targets, weights, grad)
}

pub fn weighted_cross_entropy(
    logits: &LogitMap,
    target: &SemanticMap,
    weights: &ClassWeightTable,
) -> Result<f64> {
    if logits.shape() != target.shape() {
        return Err(Error::Shape("logits and target differ in size".into()));
    }
    let values: Vec<f64> = logits.data().iter().map(|&v| v as f64).collect();
    weighted_cross_entropy_values(
        &values,
        logits.classes(),
        target.data(),
        weights.weights(),
        None,
    )
}

/// Discriminative loss for one image. `embeddings` is `[dim, p]`
/// channel-major, `ids` holds the instance id of each of the `p` pixels; only
/// positive ids take part.
pub fn discriminative_image(
    embeddings: &[f64],
    dim: usize,
    ids: &[u32],
    params: &DiscriminativeParams,
    mut grad: Option<&mut [f64]>,
) -> InstanceLoss {
    let p = ids.len();
    assert_eq!(embeddings.len(), dim * p, "embedding buffer does not match ids");
    if let Some(g) = grad.as_deref_mut() {
        g.fill(0.0);
    }
    let max_id = ids.iter().copied().max().unwrap_or(0) as usize;
    // Dense cluster index per id, in ascending id order.
    let mut present = vec![false; max_id + 1];
    for &id in ids {
        present[id as usize] = true;
    }
    let mut slot = vec![usize::MAX; max_id + 1];
    let mut c = 0;
    for id in 1..=max_id {
        if present[id] {
            slot[id] = c;
            c += 1;
        }
    }
    if c == 0 {
        return InstanceLoss::default();
    }
    let mut counts = Vec::new();
    counts.resize(c, 0usize);
    let mut means = vec![0.0; c * dim];
    for (px, &id) in ids.iter().enumerate() {
        if id == 0 {
            continue;
        }
        let k = slot[id as usize];
        counts[k] += 1;
        for d in 0..dim {
            means[k * dim + d] += embeddings[d * p + px];
        }
    }
    for k in 0..c {
        for d in 0..dim {
            means[k * dim + d] /= counts[k] as f64;
        }
    }
    let cf = c as f64;
    let dv = params.delta_v;
    let dd = params.delta_d;
    // d loss / d mean, accumulated then pushed to members at the end.
    let mut g_mean = vec![0.0; c * dim];
    let mut diff = vec![0.0; dim];

    let mut l_var = 0.0;
    for (px, &id) in ids.iter().enumerate() {
        if id == 0 {
            continue;
        }
        let k = slot[id as usize];
        let mut r2 = 0.0;
        for d in 0..dim {
            diff[d] = embeddings[d * p + px] - means[k * dim + d];
            r2 += diff[d] * diff[d];
        }
        let r = r2.sqrt();
        let hinge = r - dv;
        if hinge <= 0.0 {
            continue;
        }
        let norm = 1.0 / (cf * counts[k] as f64);
        l_var += norm * hinge * hinge;
        if let Some(g) = grad.as_deref_mut() {
            let coef = norm * 2.0 * hinge / r;
            for d in 0..dim {
                g[d * p + px] += coef * diff[d];
                g_mean[k * dim + d] -= coef * diff[d];
            }
        }
    }

    let mut l_dist = 0.0;
    if c > 1 {
        let norm = 1.0 / (cf * (cf - 1.0));
        for a in 0..c {
            for b in 0..c {
                if a == b {
                    continue;
                }
                let mut d2 = 0.0;
                for d in 0..dim {
                    diff[d] = means[a * dim + d] - means[b * dim + d];
                    d2 += diff[d] * diff[d];
                }
                let dist = d2.sqrt();
                let hinge = 2.0 * dd - dist;
                if hinge <= 0.0 {
                    continue;
                }
                l_dist += norm * hinge * hinge;
                if grad.is_some() && dist > 0.0 {
                    let coef = norm * 2.0 * hinge / dist;
                    for d in 0..dim {
                        g_mean[a * dim + d] -= coef * diff[d];
                        g_mean[b * dim + d] += coef * diff[d];
                    }
                }
            }
        }
    }

    let mut l_reg = 0.0;
    for k in 0..c {
        let mu = &means[k * dim..(k + 1) * dim];
        let norm = mu.iter().map(|v| v * v).sum::<f64>().sqrt();
        l_reg += norm / cf;
        if grad.is_some() && norm > 0.0 {
            for d in 0..dim {
                g_mean[k * dim + d] += mu[d] / (norm * cf);
            }
        }
    }

    if let Some(g) = grad {
        for (px, &id) in ids.iter().enumerate() {
            if id == 0 {
                continue;
            }
            let k = slot[id as usize];
            let share = 1.0 / counts[k] as f64;
            for d in 0..dim {
                g[d * p + px] += g_mean[k * dim + d] * share;
            }
        }
    }

    InstanceLoss {
        l_var,
        l_dist,
        l_reg,
    }
}

/// Mean of per-image discriminative losses. `embeddings` is `[n, dim, p]`,
/// `ids` is `[n, p]`. Clusters never pool across images.
pub fn discriminative_batch(
    embeddings: &[f64],
    dim: usize,
    images: usize,
    ids: &[u32],
    params: &DiscriminativeParams,
    mut grad: Option<&mut [f64]>,
) -> Result<InstanceLoss> {
    if images == 0 || ids.len() % images != 0 || embeddings.len() != ids.len() * dim {
        return Err(Error::Shape("embedding batch does not match instance ids".into()));
    }
    let p = ids.len() / images;
    let scale = 1.0 / images as f64;
    let mut acc = InstanceLoss::default();
    for img in 0..images {
        let e = &embeddings[img * dim * p..(img + 1) * dim * p];
        let id = &ids[img * p..(img + 1) * p];
        let l = match grad.as_deref_mut() {
            Some(g) => {
                let g = &mut g[img * dim * p..(img + 1) * dim * p];
                let l = discriminative_image(e, dim, id, params, Some(&mut *g));
                for v in g.iter_mut() {
                    *v *= scale;
                }
                l
            }
            None => discriminative_image(e, dim, id, params, None),
        };
        acc.l_var += l.l_var * scale;
        acc.l_dist += l.l_dist * scale;
        acc.l_reg += l.l_reg * scale;
    }
    Ok(acc)
}

pub fn discriminative_loss(
    embeddings: &EmbeddingMap,
    instances: &InstanceMap,
    params: &DiscriminativeParams,
) -> Result<InstanceLoss> {
    if (embeddings.height(), embeddings.width()) != instances.shape() {
        return Err(Error::Shape("embeddings and instance map differ in size".into()));
    }
    let values: Vec<f64> = embeddings.data().iter().map(|&v| v as f64).collect();
    Ok(discriminative_image(
        &values,
        embeddings.dim(),
        instances.data(),
        params,
        None,
    ))
}

/// berHu over valid pixels with `c = c_fraction * max |pred - target|`.
/// The gradient includes the dependence of `c` on the largest residual.
pub fn berhu_values(
    pred: &[f64],
    target: &[f64],
    valid: &[bool],
    params: &BerHuParams,
    mut grad: Option<&mut [f64]>,
) -> Result<f64> {
    if pred.len() != target.len() || pred.len() != valid.len() {
        return Err(Error::Shape("berHu inputs differ in length".into()));
    }
    if let Some(g) = grad.as_deref_mut() {
        g.fill(0.0);
    }
    let n = valid.iter().filter(|v| **v).count();
    if n == 0 {
        return Err(Error::EmptySet("berHu over no valid pixels"));
    }
    let mut max_abs = 0.0;
    let mut argmax = usize::MAX;
    for i in 0..pred.len() {
        if valid[i] {
            let a = (pred[i] - target[i]).abs();
            if a > max_abs {
                max_abs = a;
                argmax = i;
            }
        }
    }
    if max_abs == 0.0 {
        return Ok(0.0);
    }
    let c = params.c_fraction * max_abs;
    let inv_n = 1.0 / n as f64;
    let mut total = 0.0;
    let mut d_c = 0.0;
    for i in 0..pred.len() {
        if !valid[i] {
            continue;
        }
        let d = pred[i] - target[i];
        let a = d.abs();
        if a <= c {
            total += a;
            if let Some(g) = grad.as_deref_mut() {
                g[i] = inv_n * signum(d);
            }
        } else {
            total += (d * d + c * c) / (2.0 * c);
            if let Some(g) = grad.as_deref_mut() {
                g[i] = inv_n * d / c;
            }
            d_c += inv_n * (0.5 - d * d / (2.0 * c * c));
        }
    }
    if let Some(g) = grad {
        let d = pred[argmax] - target[argmax];
        g[argmax] += d_c * params.c_fraction * signum(d);
    }
    Ok(total * inv_n)
}

fn signum(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

pub fn berhu_loss(pred: &DepthMap, target: &DepthMap, params: &BerHuParams) -> Result<f64> {
    if pred.shape() != target.shape() {
        return Err(Error::Shape("predicted and target depth differ in size".into()));
    }
    let p: Vec<f64> = pred.depth.data().iter().map(|&v| v as f64).collect();
    let t: Vec<f64> = target.depth.data().iter().map(|&v| v as f64).collect();
    berhu_values(&p, &t, target.valid.data(), params, None)
}

/// Weighted task sum. With unit weights the total is exactly
/// `l_sem + (l_var + l_dist + l_reg) + l_dep`.
pub fn total_loss(
    l_sem: f64,
    inst: InstanceLoss,
    l_dep: f64,
    weights: &TaskWeights,
) -> Result<LossBreakdown> {
    let parts = [l_sem, inst.l_var, inst.l_dist, inst.l_reg, l_dep];
    if parts.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidInput("non-finite loss component".into()));
    }
    if parts.iter().any(|v| *v < 0.0) {
        return Err(Error::InvalidInput("negative loss component".into()));
    }
    let total = weights.semantic * l_sem + weights.instance * inst.total() + weights.depth * l_dep;
    Ok(LossBreakdown {
        l_sem,
        l_var: inst.l_var,
        l_dist: inst.l_dist,
        l_reg: inst.l_reg,
        l_dep,
        total,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn uniform_two_class_logits_give_ln2() {
        let logits = [0.3, 0.3];
        let l = weighted_cross_entropy_values(&logits, 2, &[1], &[1.0, 1.0], None).unwrap();
        assert!((l - std::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn confident_true_class_goes_to_zero() {
        let logits = [60.0, 0.0];
        let l = weighted_cross_entropy_values(&logits, 2, &[0], &[1.0, 1.0], None).unwrap();
        assert!(l < 1e-20);
    }

    #[test]
    fn doubling_present_class_weight_doubles_loss() {
        let logits = [0.1, 0.7, -0.2, 0.4];
        let a = weighted_cross_entropy_values(&logits, 2, &[1, 1], &[1.0, 1.0], None).unwrap();
        let b = weighted_cross_entropy_values(&logits, 2, &[1, 1], &[1.0, 2.0], None).unwrap();
        assert!((b - 2.0 * a).abs() < 1e-12);
    }

    #[test]
    fn fully_ignored_is_an_error() {
        let r = weighted_cross_entropy_values(&[0.0, 0.0], 2, &[IGNORE_LABEL], &[1.0, 1.0], None);
        assert!(matches!(r, Err(Error::EmptySet(_))));
    }

    #[test]
    fn batched_cross_entropy_equals_pooled_mean() {
        // Two one-pixel images: pooled mean of both NLLs.
        let logits = [0.0, 1.0, 2.0, 0.0];
        let l = weighted_cross_entropy_batch(&logits, 2, 2, &[0, 0], &[1.0, 1.0], None).unwrap();
        let a = (1.0f64.exp() + 1.0).ln() - 0.0;
        let b = (2.0f64.exp() + 1.0).ln() - 2.0;
        assert!((l - (a + b) / 2.0).abs() < 1e-12);
    }

    #[test]
    fn one_dimensional_two_point_cluster() {
        let l = discriminative_image(&[0.0, 2.0], 1, &[1, 1], &DiscriminativeParams::default(), None);
        assert!((l.l_var - 0.25).abs() < 1e-12);
        assert_eq!(l.l_dist, 0.0);
        assert!((l.l_reg - 1.0).abs() < 1e-12);
    }

    #[test]
    fn dead_zone_and_hinge_boundary() {
        let params = DiscriminativeParams::default();
        // Members within delta_v of the mean.
        let l = discriminative_image(&[0.8, 1.2], 1, &[1, 1], &params, None);
        assert_eq!(l.l_var, 0.0);
        // Centers exactly 2 * delta_d = 3 apart.
        let l = discriminative_image(&[0.0, 3.0], 1, &[1, 2], &params, None);
        assert_eq!(l.l_dist, 0.0);
    }

    #[test]
    fn no_instances_contribute_nothing() {
        let l = discriminative_image(&[1.0, 2.0], 1, &[0, 0], &DiscriminativeParams::default(), None);
        assert_eq!(l, InstanceLoss::default());
    }

    #[test]
    fn margin_params_are_validated() {
        assert!(DiscriminativeParams::new(0.5, 1.0).is_err());
        assert!(DiscriminativeParams::new(0.5, 1.01).is_ok());
        assert!(BerHuParams::new(0.0).is_err());
    }

    #[test]
    fn berhu_examples() {
        let p = BerHuParams::default();
        let z = berhu_values(&[1.0, 2.0], &[1.0, 2.0], &[true, true], &p, None).unwrap();
        assert_eq!(z, 0.0);
        // residuals {1, 5}: c = 1
        let l = berhu_values(&[1.0, 5.0], &[0.0, 0.0], &[true, true], &p, None).unwrap();
        assert!((l - 7.0).abs() < 1e-12);
        // |d| = c on a single pixel with c_fraction = 1.
        let one = BerHuParams::new(1.0).unwrap();
        let l = berhu_values(&[3.0], &[1.0], &[true], &one, None).unwrap();
        assert!((l - 2.0).abs() < 1e-12);
    }

    #[test]
    fn berhu_ignores_invalid_pixels() {
        let p = BerHuParams::default();
        let l = berhu_values(&[1.0, 100.0], &[0.0, 0.0], &[true, false], &p, None).unwrap();
        // single residual 1 gives c = 0.2 and (1 + 0.04) / 0.4
        assert!((l - 2.6).abs() < 1e-12);
        assert!(berhu_values(&[1.0], &[0.0], &[false], &p, None).is_err());
    }

    #[test]
    fn total_loss_examples() {
        let w = TaskWeights::default();
        let inst = InstanceLoss {
            l_var: 2.0,
            l_dist: 0.0,
            l_reg: 0.0,
        };
        assert_eq!(total_loss(1.0, inst, 3.0, &w).unwrap().total, 6.0);
        assert_eq!(total_loss(0.0, InstanceLoss::default(), 0.0, &w).unwrap().total, 0.0);
        let heavy = TaskWeights {
            semantic: 2.0,
            ..w
        };
        let a = total_loss(1.0, inst, 3.0, &w).unwrap().total;
        let b = total_loss(1.0, inst, 3.0, &heavy).unwrap().total;
        assert_eq!(b - a, 1.0);
        assert!(total_loss(f64::NAN, inst, 0.0, &w).is_err());
    }
}
