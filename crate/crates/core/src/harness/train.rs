use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use scenenet_tensor::{Adam, Eager, Exec, Grads, Graph, ParamEntry, ParamStore, Tensor};
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::checkpoint::{Checkpoint, TrainState};
use crate::data::{export_sample, iterate_batches, stack_images, ClassMapping, ClassWeightTable, DatasetConfig};
use crate::error::{Error, Result};
use crate::harness::RunConfig;
use crate::losses::{
    berhu_values, discriminative_batch, total_loss, weighted_cross_entropy_batch, BerHuParams,
    DiscriminativeParams, TaskWeights,
};
use crate::network::{build_model, load_pretrained_encoder, BranchedModel};
use crate::types::{LossBreakdown, Sample};

/// Dense per-batch targets in the same layout as the network outputs.
struct Targets {
    images: usize,
    semantic: Vec<u8>,
    instances: Vec<u32>,
    depth: Vec<f64>,
    valid: Vec<bool>,
}

impl Targets {
    fn new(samples: &[&Sample]) -> Self {
        let mut t = Targets {
            images: samples.len(),
            semantic: Vec::new(),
            instances: Vec::new(),
            depth: Vec::new(),
            valid: Vec::new(),
        };
        for s in samples {
            t.semantic.extend_from_slice(s.semantic.data());
            t.instances.extend_from_slice(s.instances.data());
            t.depth.extend(s.depth.depth.data().iter().map(|&d| d as f64));
            t.valid.extend_from_slice(s.depth.valid.data());
        }
        t
    }
}

fn to_f64(t: &Tensor) -> Vec<f64> {
    t.data().iter().map(|&v| v as f64).collect()
}

fn seed_tensor(shape: &[usize], grad: &[f64], weight: f64) -> Tensor {
    Tensor::from_vec(shape, grad.iter().map(|&g| (g * weight) as f32).collect())
}

/// Gradients of each task loss with respect to the corresponding head.
struct HeadGrads {
    semantic: Vec<f64>,
    embedding: Vec<f64>,
    depth: Vec<f64>,
}

pub struct Trainer {
    pub model: BranchedModel,
    pub adam: Adam,
    pub class_weights: ClassWeightTable,
    pub discriminative: DiscriminativeParams,
    pub berhu: BerHuParams,
    pub task_weights: TaskWeights,
    pub freeze_batchnorm: bool,
    pub bn_momentum: f32,
    pub dropout_seed: u64,
    pub iteration: u64,
    /// Clustering bandwidth to record; `delta_v` when unset.
    pub bandwidth: Option<f64>,
    /// Extra entries copied into every checkpoint.
    pub metadata: BTreeMap<String, String>,
}

impl Trainer {
    pub fn new(model: BranchedModel, learning_rate: f32, class_weights: ClassWeightTable) -> Result<Self> {
        if !model.is_joint() {
            return Err(Error::Config("joint training needs all three branches".into()));
        }
        if class_weights.weights().len() != model.config.num_classes {
            return Err(Error::Config("class weight table does not match num_classes".into()));
        }
        let adam = Adam::new(&model.store, learning_rate);
        Ok(Self {
            model,
            adam,
            class_weights,
            discriminative: DiscriminativeParams::default(),
            berhu: BerHuParams::default(),
            task_weights: TaskWeights::default(),
            freeze_batchnorm: true,
            bn_momentum: 0.1,
            dropout_seed: 0,
            iteration: 0,
            bandwidth: None,
            metadata: BTreeMap::new(),
        })
    }

    /// Whether the optimizer may change this tensor.
    pub fn is_trainable(&self, e: &ParamEntry) -> bool {
        !e.kind.is_buffer() && !(self.freeze_batchnorm && e.kind.is_batch_norm())
    }

    fn losses(
        &self,
        semantic: &Tensor,
        embedding: &Tensor,
        depth: &Tensor,
        targets: &Targets,
        want_grads: bool,
    ) -> Result<(LossBreakdown, Option<HeadGrads>)> {
        let k = self.model.config.num_classes;
        let dim = self.model.config.embedding_dim;
        let logits = to_f64(semantic);
        let emb = to_f64(embedding);
        let dep = to_f64(depth);
        let mut grads = want_grads.then(|| HeadGrads {
            semantic: vec![0.0; logits.len()],
            embedding: vec![0.0; emb.len()],
            depth: vec![0.0; dep.len()],
        });
        let l_sem = weighted_cross_entropy_batch(
            &logits,
            k,
            targets.images,
            &targets.semantic,
            self.class_weights.weights(),
            grads.as_mut().map(|g| g.semantic.as_mut_slice()),
        )?;
        let inst = discriminative_batch(
            &emb,
            dim,
            targets.images,
            &targets.instances,
            &self.discriminative,
            grads.as_mut().map(|g| g.embedding.as_mut_slice()),
        )?;
        let l_dep = berhu_values(
            &dep,
            &targets.depth,
            &targets.valid,
            &self.berhu,
            grads.as_mut().map(|g| g.depth.as_mut_slice()),
        )?;
        if ![l_sem, inst.l_var, inst.l_dist, inst.l_reg, l_dep].iter().all(|v| v.is_finite()) {
            return Err(Error::NonFiniteLoss { step: self.iteration });
        }
        Ok((total_loss(l_sem, inst, l_dep, &self.task_weights)?, grads))
    }

    fn record<'a>(&'a self, samples: &[&Sample]) -> Result<(Graph<'a>, LossBreakdown, Grads)> {
        let images = stack_images(samples.iter().copied())?;
        let targets = Targets::new(samples);
        let seed = self.dropout_seed ^ self.iteration.wrapping_mul(0x9E37_79B9_7F4A_7C15);
        let mut g = Graph::new(&self.model.store, true, !self.freeze_batchnorm, seed);
        let out = self.model.forward_exec(&mut g, images);
        let (s, m, d) = (
            out.semantic.expect("joint model"),
            out.embedding.expect("joint model"),
            out.depth.expect("joint model"),
        );
        let (bd, hg) = self.losses(g.value(&s), g.value(&m), g.value(&d), &targets, true)?;
        let hg = hg.expect("gradients requested");
        let w = self.task_weights;
        let mut seeds = Vec::new();
        for (var, grad, weight) in [(s, &hg.semantic, w.semantic), (m, &hg.embedding, w.instance), (d, &hg.depth, w.depth)] {
            if weight != 0.0 {
                let shape = g.value(&var).shape().to_vec();
                seeds.push((var, seed_tensor(&shape, grad, weight)));
            }
        }
        let grads = g.backward(&seeds);
        Ok((g, bd, grads))
    }

    /// Training-mode loss and parameter gradients without updating anything.
    pub fn gradients(&self, samples: &[&Sample]) -> Result<(LossBreakdown, Grads)> {
        let (_, bd, grads) = self.record(samples)?;
        Ok((bd, grads))
    }

    /// One optimization step on `samples`; returns the loss before the update.
    pub fn step(&mut self, samples: &[&Sample]) -> Result<LossBreakdown> {
        let (mut g, bd, grads) = self.record(samples)?;
        let bn_updates = g.take_bn_updates();
        drop(g);
        let freeze = self.freeze_batchnorm;
        self.adam.step(&mut self.model.store, &grads, |e| {
            !e.kind.is_buffer() && !(freeze && e.kind.is_batch_norm())
        });
        if !freeze {
            for u in &bn_updates {
                u.apply(&mut self.model.store, self.bn_momentum);
            }
        }
        self.iteration += 1;
        Ok(bd)
    }

    /// Loss of the current parameters. `training` selects the training-mode
    /// forward (batch statistics and dropout as configured) over evaluation mode.
    pub fn loss(&self, samples: &[&Sample], training: bool) -> Result<LossBreakdown> {
        let images = stack_images(samples.iter().copied())?;
        let targets = Targets::new(samples);
        if training {
            let seed = self.dropout_seed ^ self.iteration.wrapping_mul(0x9E37_79B9_7F4A_7C15);
            let mut g = Graph::new(&self.model.store, true, !self.freeze_batchnorm, seed);
            let out = self.model.forward_exec(&mut g, images);
            let (s, m, d) = (out.semantic.unwrap(), out.embedding.unwrap(), out.depth.unwrap());
            Ok(self.losses(g.value(&s), g.value(&m), g.value(&d), &targets, false)?.0)
        } else {
            let mut e = Eager::new(&self.model.store);
            let out = self.model.forward_exec(&mut e, images);
            let (s, m, d) = (out.semantic.unwrap(), out.embedding.unwrap(), out.depth.unwrap());
            Ok(self.losses(&s, &m, &d, &targets, false)?.0)
        }
    }

    /// Replaces the running batch-norm statistics with their average over
    /// `samples` under the current weights. Momentum averages lag behind
    /// while the weights move quickly; this removes that lag before
    /// evaluation.
    pub fn recalibrate_batchnorm(&mut self, samples: &[&Sample], batch_size: usize) -> Result<()> {
        if samples.is_empty() {
            return Err(Error::EmptySet("recalibration set"));
        }
        for (k, chunk) in samples.chunks(batch_size.max(1)).enumerate() {
            let images = stack_images(chunk.iter().copied())?;
            let updates = {
                let mut g = Graph::new(&self.model.store, true, true, 0);
                let _ = self.model.forward_exec(&mut g, images);
                g.take_bn_updates()
            };
            let momentum = 1.0 / (k + 1) as f32;
            for u in &updates {
                u.apply(&mut self.model.store, momentum);
            }
        }
        Ok(())
    }

    /// Mean evaluation-mode loss over `samples` in chunks of `batch_size`.
    pub fn mean_loss(&self, samples: &[Sample], batch_size: usize) -> Result<f64> {
        if samples.is_empty() {
            return Err(Error::EmptySet("validation set"));
        }
        let mut sum = 0.0;
        for chunk in samples.chunks(batch_size.max(1)) {
            let refs: Vec<&Sample> = chunk.iter().collect();
            sum += self.loss(&refs, false)?.total * chunk.len() as f64;
        }
        Ok(sum / samples.len() as f64)
    }

    pub fn checkpoint(&self, best_value: f64, best_step: u64) -> Checkpoint {
        let mut ckpt = Checkpoint::from_model(&self.model);
        ckpt.metadata.extend(self.metadata.clone());
        ckpt.metadata.insert("delta_v".into(), self.discriminative.delta_v.to_string());
        ckpt.metadata.insert("delta_d".into(), self.discriminative.delta_d.to_string());
        let b = self.bandwidth.unwrap_or(self.discriminative.delta_v);
        ckpt.metadata.insert("bandwidth".into(), b.to_string());
        ckpt.train_state = Some(TrainState {
            iteration: self.iteration,
            adam: self.adam.clone(),
            best_value,
            best_step,
        });
        ckpt
    }
}

/// SHA-256 over names and values of every tensor in `groups`.
pub fn hash_groups(store: &ParamStore, groups: &[String]) -> String {
    let mut h = Sha256::new();
    for group in groups {
        for id in store.group_ids(group) {
            let e = store.entry(id);
            h.update(e.group.as_bytes());
            h.update(e.name.as_bytes());
            for v in e.value.data() {
                h.update(v.to_le_bytes());
            }
        }
    }
    hex::encode(h.finalize())
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct LossLogRow {
    pub step: u64,
    pub l_sem: f64,
    pub l_var: f64,
    pub l_dist: f64,
    pub l_reg: f64,
    pub l_dep: f64,
    pub total: f64,
    pub lr: f32,
    pub wall_ms: f64,
}

pub struct TrainOutcome {
    pub model: BranchedModel,
    pub log: Vec<LossLogRow>,
    pub last_checkpoint: PathBuf,
    pub best_checkpoint: PathBuf,
    pub best_value: f64,
    pub best_step: u64,
}

fn dump_repro(dir: &Path, trainer: &Trainer, samples: &[&Sample]) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    trainer.checkpoint(f64::NAN, 0).save(&dir.join("model.ckpt"))?;
    // Only the network inputs matter for a repro; camera values are nominal.
    let camera = crate::data::CameraParams::new(1.0, 1.0)?;
    for s in samples {
        export_sample(s, &dir.join(&s.id), ClassMapping::Identity, &camera)?;
    }
    let ids: Vec<&str> = samples.iter().map(|s| s.id.as_str()).collect();
    fs::write(dir.join("batch.txt"), ids.join("\n")).map_err(|e| Error::io(dir, e))
}

/// Runs a full training job as described by `cfg`.
/// Dataset facts inference needs without the dataset config.
pub fn dataset_metadata(ds: &DatasetConfig) -> BTreeMap<String, String> {
    let join = |v: &[u8]| v.iter().map(|c| c.to_string()).collect::<Vec<_>>().join(",");
    let mut m = BTreeMap::new();
    m.insert("thing_classes".into(), join(&ds.thing_classes));
    m.insert("drivable_classes".into(), join(&ds.drivable_classes));
    m.insert("car_class".into(), ds.car_class.to_string());
    m.insert(
        "class_mapping".into(),
        match ds.class_mapping {
            ClassMapping::Cityscapes19 => "cityscapes19",
            ClassMapping::Identity => "identity",
        }
        .into(),
    );
    if let Some(n) = ds.min_cluster_pixels {
        m.insert("min_cluster_pixels".into(), n.to_string());
    }
    m
}

pub fn train(cfg: &RunConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    let ds = DatasetConfig::load(&cfg.dataset)?;
    let train_set = ds.load_split(&cfg.train_split)?;
    if let Some([h, w]) = cfg.resolution {
        if let Some(s) = train_set.iter().find(|s| s.shape() != (h, w)) {
            return Err(Error::Shape(format!(
                "{} is {:?}, run expects {h}x{w}",
                s.id,
                s.shape()
            )));
        }
    }
    let val_set = match &cfg.val_split {
        Some(split) => Some(ds.load_split(split)?),
        None => None,
    };
    let class_weights = if cfg.loss.class_weighting() {
        ds.class_weights(&cfg.train_split)?
    } else {
        ClassWeightTable::uniform(ds.num_classes)
    };
    let mut model = build_model(&cfg.network_config(ds.num_classes), cfg.seeds.init)?;
    if model.config.num_classes != ds.num_classes {
        return Err(Error::Config("network num_classes differs from the dataset".into()));
    }
    if let Some(path) = &cfg.pretrained_encoder {
        let ckpt = Checkpoint::load(path)?;
        let report = load_pretrained_encoder(&mut model, &ckpt.store, cfg.init_stage3_from_pretrained)?;
        log::info!("pretrained groups loaded: {:?}; unmatched: {:?}", report.loaded, report.unmatched);
    }
    let mut trainer = Trainer::new(model, cfg.optimizer.learning_rate, class_weights)?;
    trainer.discriminative = cfg.loss.discriminative;
    trainer.berhu = cfg.loss.berhu;
    trainer.task_weights = cfg.task_weights;
    trainer.freeze_batchnorm = cfg.freeze_batchnorm;
    trainer.bn_momentum = cfg.bn_momentum;
    trainer.dropout_seed = cfg.seeds.dropout;
    trainer.bandwidth = cfg.bandwidth;
    trainer.metadata = dataset_metadata(&ds);
    trainer
        .metadata
        .insert("dataset_config".into(), cfg.dataset.display().to_string());

    let out = &cfg.out_dir;
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let info = format!(
        "optimizer = \"adam\"\nlearning_rate = {}\nbeta1 = {}\nbeta2 = {}\neps = {:e}\nbatch_size = {}\nfreeze_batchnorm = {}\n",
        trainer.adam.lr, trainer.adam.beta1, trainer.adam.beta2, trainer.adam.eps, cfg.optimizer.batch_size, cfg.freeze_batchnorm
    );
    fs::write(out.join("run_info.toml"), info).map_err(|e| Error::io(out, e))?;
    let log_path = out.join("train_log.csv");
    let mut writer = csv::Writer::from_path(&log_path).map_err(|e| Error::Config(e.to_string()))?;
    let best_path = out.join("best.ckpt");
    let last_path = out.join("last.ckpt");
    let mut log_rows = Vec::new();
    let mut best = (f64::INFINITY, 0u64);
    let mut running = 0.0;
    let start = Instant::now();
    let mut epoch = 0u64;
    'outer: while trainer.iteration < cfg.iterations {
        let batches = iterate_batches(&train_set, cfg.optimizer.batch_size, cfg.seeds.shuffle.wrapping_add(epoch))?;
        epoch += 1;
        for batch in batches {
            if trainer.iteration >= cfg.iterations {
                break 'outer;
            }
            let step = trainer.iteration;
            let bd = match trainer.step(&batch.samples) {
                Ok(bd) => bd,
                Err(Error::NonFiniteLoss { step }) => {
                    let dir = out.join(format!("nonfinite_step_{step}"));
                    dump_repro(&dir, &trainer, &batch.samples)?;
                    log::error!("non-finite loss at step {step}; inputs saved to {}", dir.display());
                    return Err(Error::NonFiniteLoss { step });
                }
                Err(e) => return Err(e),
            };
            running = if step == 0 { bd.total } else { 0.9 * running + 0.1 * bd.total };
            let row = LossLogRow {
                step,
                l_sem: bd.l_sem,
                l_var: bd.l_var,
                l_dist: bd.l_dist,
                l_reg: bd.l_reg,
                l_dep: bd.l_dep,
                total: bd.total,
                lr: trainer.adam.lr,
                wall_ms: start.elapsed().as_secs_f64() * 1e3,
            };
            writer.serialize(&row).map_err(|e| Error::Config(e.to_string()))?;
            log_rows.push(row);
            let done = trainer.iteration;
            if done % cfg.val_every == 0 || done == cfg.iterations {
                if !trainer.freeze_batchnorm && cfg.recalibration_images > 0 {
                    let n = cfg.recalibration_images.min(train_set.len());
                    let refs: Vec<&Sample> = train_set[..n].iter().collect();
                    trainer.recalibrate_batchnorm(&refs, cfg.optimizer.batch_size)?;
                }
                let val = trainer.mean_loss(val_set.as_deref().unwrap_or(&train_set), cfg.optimizer.batch_size)?;
                log::info!("step {done}: train {running:.4} (avg), val {val:.4}");
                if val < best.0 {
                    best = (val, done);
                    trainer.checkpoint(best.0, best.1).save(&best_path)?;
                }
            }
        }
    }
    writer.flush().map_err(|e| Error::io(&log_path, e))?;
    let mut last = trainer.checkpoint(best.0, best.1);
    last.metadata.insert("running_total_loss".into(), format!("{running}"));
    last.save(&last_path)?;
    if !best_path.exists() {
        last.save(&best_path)?;
    }
    Ok(TrainOutcome {
        model: trainer.model,
        log: log_rows,
        last_checkpoint: last_path,
        best_checkpoint: best_path,
        best_value: best.0,
        best_step: best.1,
    })
}
