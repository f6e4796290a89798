//! ENet-style encoder with three task branches. The initial block and
//! stages 1-2 are shared; every branch owns its own stage 3, the two
//! decoder stages and a full-resolution head.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use scenenet_tensor::{
    BatchNormIds, Conv2dSpec, ConvTranspose2dSpec, Eager, Exec, ParamId, ParamKind, ParamStore,
    PoolIndices, Tensor,
};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::types::{DepthMap, EmbeddingMap, Grid, ImageTensor, LogitMap, PredictionBundle, SIZE_MULTIPLE};

/// Scale applied to the last convolution of every bottleneck extension at
/// initialization, so that the residual sum stays bounded when batch norm
/// runs in its (identity) frozen state.
const RESIDUAL_INIT_SCALE: f32 = 0.25;
const PRELU_INIT: f32 = 0.25;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    Semantic,
    Instance,
    Depth,
}

impl Task {
    pub const ALL: [Task; 3] = [Task::Semantic, Task::Instance, Task::Depth];

    pub fn name(self) -> &'static str {
        match self {
            Task::Semantic => "semantic",
            Task::Instance => "instance",
            Task::Depth => "depth",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NetworkConfig {
    pub num_classes: usize,
    pub embedding_dim: usize,
    /// Output channels of the initial block and stages 1 to 5.
    pub stage_widths: [usize; 6],
    /// Non-resampling bottlenecks in stages 1 to 5.
    pub bottlenecks: [usize; 5],
    /// Dropout probability of the bottlenecks in stages 1 to 5.
    pub dropout: [f32; 5],
    /// Initial depth prediction in meters.
    pub depth_init_m: f32,
}

impl NetworkConfig {
    pub fn enet(num_classes: usize) -> Self {
        Self {
            num_classes,
            embedding_dim: 8,
            stage_widths: [16, 64, 128, 128, 64, 16],
            bottlenecks: [4, 8, 8, 2, 1],
            dropout: [0.01, 0.1, 0.1, 0.1, 0.1],
            depth_init_m: 10.0,
        }
    }

    /// Half widths, half bottleneck counts and half the embedding size of
    /// [`NetworkConfig::enet`].
    pub fn toy(num_classes: usize) -> Self {
        Self {
            num_classes,
            embedding_dim: 4,
            stage_widths: [8, 32, 64, 64, 32, 8],
            bottlenecks: [2, 4, 4, 1, 1],
            dropout: [0.0; 5],
            depth_init_m: 10.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let w = &self.stage_widths;
        if self.num_classes < 2 || self.embedding_dim == 0 {
            return Err(Error::Config("need >= 2 classes and a positive embedding size".into()));
        }
        if w.iter().any(|&c| c < 4 || c % 4 != 0) {
            return Err(Error::Config(format!("stage widths {w:?} must be positive multiples of 4")));
        }
        if w[0] <= 3 {
            return Err(Error::Config("initial width must exceed the 3 input channels".into()));
        }
        if w[1] < w[0] || w[2] < w[1] {
            return Err(Error::Config("downsampling stages cannot reduce channels".into()));
        }
        if w[3] != w[2] {
            return Err(Error::Config("stage 3 keeps the stage 2 width".into()));
        }
        if w[4] != w[1] || w[5] != w[0] {
            return Err(Error::Config(format!(
                "decoder widths {:?} must mirror the encoder widths {:?} for unpooling",
                [w[4], w[5]],
                [w[1], w[0]]
            )));
        }
        if self.bottlenecks[2] == 0 {
            return Err(Error::Config("stage 3 needs at least one bottleneck".into()));
        }
        if self.dropout.iter().any(|p| !(0.0..1.0).contains(p)) {
            return Err(Error::Config("dropout must lie in [0, 1)".into()));
        }
        if !(self.depth_init_m > 0.0) {
            return Err(Error::Config("depth_init_m must be positive".into()));
        }
        Ok(())
    }

    pub fn head_channels(&self, task: Task) -> usize {
        match task {
            Task::Semantic => self.num_classes,
            Task::Instance => self.embedding_dim,
            Task::Depth => 1,
        }
    }
}

#[derive(Clone, Copy, Debug)]
enum Act {
    PRelu(ParamId),
    Relu,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum BlockKind {
    Regular,
    Dilated(usize),
    Asymmetric(usize),
    Downsample,
    Upsample,
}

#[derive(Clone, Debug)]
enum Mid {
    Conv(ParamId, Conv2dSpec),
    Asym(ParamId, ParamId, usize),
    Transposed(ParamId),
}

#[derive(Clone, Debug)]
struct Bottleneck {
    kind: BlockKind,
    out_channels: usize,
    reduce: (ParamId, BatchNormIds, Act),
    mid: (Mid, BatchNormIds, Act),
    expand: (ParamId, BatchNormIds),
    /// Upsampling blocks project the main path before unpooling.
    project: Option<(ParamId, BatchNormIds)>,
    out_act: Act,
    dropout: f32,
}

#[derive(Clone, Debug)]
struct InitialBlock {
    conv: ParamId,
    bn: BatchNormIds,
    act: Act,
}

#[derive(Clone, Debug)]
struct Encoder {
    initial: InitialBlock,
    stage1: Vec<Bottleneck>,
    stage2: Vec<Bottleneck>,
}

#[derive(Clone, Debug)]
struct Branch {
    task: Task,
    stage3: Vec<Bottleneck>,
    stage4: Vec<Bottleneck>,
    stage5: Vec<Bottleneck>,
    head_w: ParamId,
    head_b: ParamId,
}

/// Network parameters plus the layer wiring that addresses them.
#[derive(Clone, Debug)]
pub struct BranchedModel {
    pub config: NetworkConfig,
    pub store: ParamStore,
    encoder: Encoder,
    branches: Vec<Branch>,
}

struct Builder<'a> {
    store: &'a mut ParamStore,
    rng: ChaCha8Rng,
    group: String,
}

impl Builder<'_> {
    fn kaiming(&mut self, name: &str, shape: &[usize], fan_in: usize, scale: f32) -> ParamId {
        let std = (2.0 / fan_in as f32).sqrt() * scale;
        let normal = Normal::new(0.0f32, std).expect("finite std");
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| normal.sample(&mut self.rng)).collect();
        self.store
            .add(&self.group, name, ParamKind::Weight, Tensor::from_vec(shape, data))
    }

    fn conv(&mut self, name: &str, cout: usize, cin: usize, kh: usize, kw: usize, scale: f32) -> ParamId {
        self.kaiming(&format!("{name}.w"), &[cout, cin, kh, kw], cin * kh * kw, scale)
    }

    fn bn(&mut self, name: &str, c: usize) -> BatchNormIds {
        let g = self.group.clone();
        BatchNormIds {
            scale: self.store.add(&g, &format!("{name}.scale"), ParamKind::BnScale, Tensor::full(&[c], 1.0)),
            shift: self.store.add(&g, &format!("{name}.shift"), ParamKind::BnShift, Tensor::zeros(&[c])),
            mean: self.store.add(&g, &format!("{name}.mean"), ParamKind::BnMean, Tensor::zeros(&[c])),
            var: self.store.add(&g, &format!("{name}.var"), ParamKind::BnVar, Tensor::full(&[c], 1.0)),
        }
    }

    fn act(&mut self, name: &str, c: usize, encoder: bool) -> Act {
        if encoder {
            let g = self.group.clone();
            Act::PRelu(self.store.add(
                &g,
                &format!("{name}.prelu"),
                ParamKind::PRelu,
                Tensor::full(&[c], PRELU_INIT),
            ))
        } else {
            Act::Relu
        }
    }

    fn bottleneck(
        &mut self,
        name: &str,
        kind: BlockKind,
        cin: usize,
        cout: usize,
        encoder: bool,
        dropout: f32,
    ) -> Bottleneck {
        let internal = cout / 4;
        let (rk, rin) = match kind {
            BlockKind::Downsample => (2, cin),
            _ => (1, cin),
        };
        let reduce_w = self.conv(&format!("{name}.reduce"), internal, rin, rk, rk, 1.0);
        let reduce = (
            reduce_w,
            self.bn(&format!("{name}.reduce.bn"), internal),
            self.act(&format!("{name}.reduce"), internal, encoder),
        );
        let mid_name = format!("{name}.mid");
        let mid = match kind {
            BlockKind::Regular | BlockKind::Downsample => {
                Mid::Conv(self.conv(&mid_name, internal, internal, 3, 3, 1.0), Conv2dSpec::same(3, 3))
            }
            BlockKind::Dilated(d) => Mid::Conv(
                self.conv(&mid_name, internal, internal, 3, 3, 1.0),
                Conv2dSpec::dilated(3, d),
            ),
            BlockKind::Asymmetric(k) => {
                // No nonlinearity between the pair: the first conv gets a
                // linear (unit) gain.
                let a = self.kaiming(&format!("{mid_name}.a.w"), &[internal, internal, k, 1], 2 * internal * k, 1.0);
                let b = self.conv(&format!("{mid_name}.b"), internal, internal, 1, k, 1.0);
                Mid::Asym(a, b, k)
            }
            BlockKind::Upsample => {
                // Transposed weights are [cin, cout, kh, kw]; each output
                // pixel sees about a quarter of the taps.
                let w = self.kaiming(&format!("{mid_name}.w"), &[internal, internal, 3, 3], internal * 9 / 4, 1.0);
                Mid::Transposed(w)
            }
        };
        let mid = (
            mid,
            self.bn(&format!("{name}.mid.bn"), internal),
            self.act(&format!("{name}.mid"), internal, encoder),
        );
        let expand = (
            self.conv(&format!("{name}.expand"), cout, internal, 1, 1, RESIDUAL_INIT_SCALE),
            self.bn(&format!("{name}.expand.bn"), cout),
        );
        let project = (kind == BlockKind::Upsample).then(|| {
            (
                self.kaiming(&format!("{name}.project.w"), &[cout, cin, 1, 1], cin, 0.5),
                self.bn(&format!("{name}.project.bn"), cout),
            )
        });
        Bottleneck {
            kind,
            out_channels: cout,
            reduce,
            mid,
            expand,
            project,
            out_act: self.act(&format!("{name}.out"), cout, encoder),
            dropout,
        }
    }
}

/// Dilation/asymmetry cycle of the 1/8-resolution stages.
fn dilated_pattern(i: usize) -> BlockKind {
    match i % 8 {
        0 | 4 => BlockKind::Regular,
        1 => BlockKind::Dilated(2),
        2 | 6 => BlockKind::Asymmetric(5),
        3 => BlockKind::Dilated(4),
        5 => BlockKind::Dilated(8),
        _ => BlockKind::Dilated(16),
    }
}

fn softplus_inverse(y: f32) -> f32 {
    if y > 20.0 {
        y
    } else {
        (y.exp() - 1.0).ln()
    }
}

fn build_encoder(store: &mut ParamStore, cfg: &NetworkConfig, rng: &mut ChaCha8Rng) -> Encoder {
    let w = cfg.stage_widths;
    let mut b = Builder {
        store,
        rng: ChaCha8Rng::from_seed(rand::Rng::gen(rng)),
        group: "encoder.initial".into(),
    };
    let initial = InitialBlock {
        conv: b.conv("conv", w[0] - 3, 3, 3, 3, 1.0),
        bn: b.bn("bn", w[0]),
        act: b.act("out", w[0], true),
    };
    b.group = "encoder.stage1".into();
    let mut stage1 = vec![b.bottleneck("b0", BlockKind::Downsample, w[0], w[1], true, cfg.dropout[0])];
    for i in 0..cfg.bottlenecks[0] {
        stage1.push(b.bottleneck(&format!("b{}", i + 1), BlockKind::Regular, w[1], w[1], true, cfg.dropout[0]));
    }
    b.group = "encoder.stage2".into();
    let mut stage2 = vec![b.bottleneck("b0", BlockKind::Downsample, w[1], w[2], true, cfg.dropout[1])];
    for i in 0..cfg.bottlenecks[1] {
        stage2.push(b.bottleneck(&format!("b{}", i + 1), dilated_pattern(i), w[2], w[2], true, cfg.dropout[1]));
    }
    Encoder {
        initial,
        stage1,
        stage2,
    }
}

fn build_branch(store: &mut ParamStore, cfg: &NetworkConfig, task: Task, rng: &mut ChaCha8Rng) -> Branch {
    let w = cfg.stage_widths;
    let p = task.name();
    let mut b = Builder {
        store,
        rng: ChaCha8Rng::from_seed(rand::Rng::gen(rng)),
        group: format!("{p}.stage3"),
    };
    let stage3 = (0..cfg.bottlenecks[2])
        .map(|i| b.bottleneck(&format!("b{i}"), dilated_pattern(i), w[3], w[3], true, cfg.dropout[2]))
        .collect();
    b.group = format!("{p}.stage4");
    let mut stage4 = vec![b.bottleneck("b0", BlockKind::Upsample, w[3], w[4], false, cfg.dropout[3])];
    for i in 0..cfg.bottlenecks[3] {
        stage4.push(b.bottleneck(&format!("b{}", i + 1), BlockKind::Regular, w[4], w[4], false, cfg.dropout[3]));
    }
    b.group = format!("{p}.stage5");
    let mut stage5 = vec![b.bottleneck("b0", BlockKind::Upsample, w[4], w[5], false, cfg.dropout[4])];
    for i in 0..cfg.bottlenecks[4] {
        stage5.push(b.bottleneck(&format!("b{}", i + 1), BlockKind::Regular, w[5], w[5], false, cfg.dropout[4]));
    }
    b.group = format!("{p}.head");
    let cout = cfg.head_channels(task);
    let (scale, bias) = match task {
        Task::Depth => (0.05, softplus_inverse(cfg.depth_init_m)),
        _ => (0.5, 0.0),
    };
    let head_w = b.kaiming("w", &[w[5], cout, 2, 2], w[5], scale);
    let g = b.group.clone();
    let head_b = b.store.add(&g, "b", ParamKind::Bias, Tensor::full(&[cout], bias));
    Branch {
        task,
        stage3,
        stage4,
        stage5,
        head_w,
        head_b,
    }
}

/// Joint model with all three branches.
pub fn build_model(config: &NetworkConfig, seed: u64) -> Result<BranchedModel> {
    build_model_for_tasks(config, &Task::ALL, seed)
}

/// Encoder plus a single branch, the baseline the joint model is compared to.
pub fn build_single_task_model(config: &NetworkConfig, task: Task, seed: u64) -> Result<BranchedModel> {
    build_model_for_tasks(config, &[task], seed)
}

/// Encoder plus the branches for `tasks`.
pub fn build_model_for_tasks(config: &NetworkConfig, tasks: &[Task], seed: u64) -> Result<BranchedModel> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let encoder = build_encoder(&mut store, config, &mut rng);
    let mut branches = Vec::new();
    for &task in &Task::ALL {
        // Draw every branch seed so a given branch is initialized the same
        // way whether or not its siblings exist.
        let mut branch_rng = ChaCha8Rng::from_seed(rand::Rng::gen(&mut rng));
        if tasks.contains(&task) {
            branches.push(build_branch(&mut store, config, task, &mut branch_rng));
        }
    }
    Ok(BranchedModel {
        config: config.clone(),
        store,
        encoder,
        branches,
    })
}

/// Raw head outputs of one forward pass; absent branches are `None`.
pub struct Outputs<V> {
    pub semantic: Option<V>,
    pub embedding: Option<V>,
    pub depth: Option<V>,
}

fn apply_act<E: Exec>(e: &mut E, x: &E::V, act: Act) -> E::V {
    match act {
        Act::PRelu(id) => e.prelu(x, id),
        Act::Relu => e.relu(x),
    }
}

fn bottleneck_forward<E: Exec>(
    e: &mut E,
    b: &Bottleneck,
    x: &E::V,
    unpool: Option<&PoolIndices>,
) -> (E::V, Option<PoolIndices>) {
    let (rw, rbn, ract) = b.reduce;
    let reduce_spec = if b.kind == BlockKind::Downsample {
        Conv2dSpec::strided(2)
    } else {
        Conv2dSpec::same(1, 1)
    };
    let mut y = e.conv2d(x, rw, None, reduce_spec);
    y = e.batch_norm(&y, rbn);
    y = apply_act(e, &y, ract);
    let (mid, mbn, mact) = &b.mid;
    y = match *mid {
        Mid::Conv(w, spec) => e.conv2d(&y, w, None, spec),
        Mid::Asym(a, c, k) => {
            let t = e.conv2d(&y, a, None, Conv2dSpec::same(k, 1));
            e.conv2d(&t, c, None, Conv2dSpec::same(1, k))
        }
        Mid::Transposed(w) => e.conv_transpose2d(
            &y,
            w,
            None,
            ConvTranspose2dSpec {
                stride: 2,
                padding: 1,
                output_padding: 1,
            },
        ),
    };
    y = e.batch_norm(&y, *mbn);
    y = apply_act(e, &y, *mact);
    let (ew, ebn) = b.expand;
    y = e.conv2d(&y, ew, None, Conv2dSpec::same(1, 1));
    y = e.batch_norm(&y, ebn);
    if b.dropout > 0.0 {
        y = e.dropout2d(&y, b.dropout);
    }
    let (main, indices) = match b.kind {
        BlockKind::Downsample => {
            let (p, idx) = e.max_pool2x2(x);
            (Some(e.pad_channels(&p, b.out_channels)), Some(idx))
        }
        BlockKind::Upsample => {
            let (pw, pbn) = b.project.expect("upsampling block has a projection");
            let m = e.conv2d(x, pw, None, Conv2dSpec::same(1, 1));
            let m = e.batch_norm(&m, pbn);
            let idx = unpool.expect("upsampling block needs pooling indices");
            (Some(e.max_unpool2x2(&m, idx)), None)
        }
        _ => (None, None),
    };
    let sum = e.add(main.as_ref().unwrap_or(x), &y);
    (apply_act(e, &sum, b.out_act), indices)
}

fn stage_forward<E: Exec>(
    e: &mut E,
    blocks: &[Bottleneck],
    x: &E::V,
    unpool: Option<&PoolIndices>,
) -> (E::V, Option<PoolIndices>) {
    let mut indices = None;
    let mut cur: Option<E::V> = None;
    for b in blocks {
        let (y, idx) = bottleneck_forward(e, b, cur.as_ref().unwrap_or(x), unpool);
        if idx.is_some() {
            indices = idx;
        }
        cur = Some(y);
    }
    (cur.expect("stages are non-empty"), indices)
}

impl BranchedModel {
    pub fn tasks(&self) -> Vec<Task> {
        self.branches.iter().map(|b| b.task).collect()
    }

    pub fn is_joint(&self) -> bool {
        self.branches.len() == Task::ALL.len()
    }

    /// Forward pass on an `[n, 3, h, w]` batch with any executor.
    pub fn forward_exec<E: Exec>(&self, e: &mut E, images: Tensor) -> Outputs<E::V> {
        let x = e.input(images);
        let init = &self.encoder.initial;
        let conv = e.conv2d(&x, init.conv, None, Conv2dSpec::same(3, 3).with_stride(2));
        let (pool, _) = e.max_pool2x2(&x);
        let y = e.concat_channels(&conv, &pool);
        let y = e.batch_norm(&y, init.bn);
        let y = apply_act(e, &y, init.act);
        let (y, idx1) = stage_forward(e, &self.encoder.stage1, &y, None);
        let (shared, idx2) = stage_forward(e, &self.encoder.stage2, &y, None);
        let idx1 = idx1.expect("stage 1 downsamples");
        let idx2 = idx2.expect("stage 2 downsamples");
        let mut out = Outputs {
            semantic: None,
            embedding: None,
            depth: None,
        };
        for br in &self.branches {
            let (y, _) = stage_forward(e, &br.stage3, &shared, None);
            let (y, _) = stage_forward(e, &br.stage4, &y, Some(&idx2));
            let (y, _) = stage_forward(e, &br.stage5, &y, Some(&idx1));
            let head = e.conv_transpose2d(
                &y,
                br.head_w,
                Some(br.head_b),
                ConvTranspose2dSpec {
                    stride: 2,
                    padding: 0,
                    output_padding: 0,
                },
            );
            match br.task {
                Task::Semantic => out.semantic = Some(head),
                Task::Instance => out.embedding = Some(head),
                Task::Depth => out.depth = Some(e.softplus(&head)),
            }
        }
        out
    }

    pub fn parameter_groups(&self) -> Vec<String> {
        self.store.groups()
    }

    pub fn branch_groups(&self, task: Task) -> Vec<String> {
        let prefix = format!("{}.", task.name());
        self.store.groups().into_iter().filter(|g| g.starts_with(&prefix)).collect()
    }

    pub fn encoder_groups(&self) -> Vec<String> {
        self.store
            .groups()
            .into_iter()
            .filter(|g| g.starts_with("encoder."))
            .collect()
    }
}

pub fn check_input_size(h: usize, w: usize) -> Result<()> {
    if h == 0 || w == 0 || h % SIZE_MULTIPLE != 0 || w % SIZE_MULTIPLE != 0 {
        return Err(Error::Shape(format!(
            "input {h}x{w} is not a multiple of {SIZE_MULTIPLE}"
        )));
    }
    Ok(())
}

/// Stacks images into a batch tensor after checking size and finiteness.
pub fn images_to_batch(images: &[ImageTensor]) -> Result<Tensor> {
    let first = images.first().ok_or(Error::EmptySet("image batch"))?;
    let (h, w) = (first.height(), first.width());
    check_input_size(h, w)?;
    let mut data = Vec::with_capacity(images.len() * 3 * h * w);
    for img in images {
        if (img.height(), img.width()) != (h, w) {
            return Err(Error::Shape("images in a batch differ in size".into()));
        }
        if img.data().iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidInput("non-finite pixel value".into()));
        }
        data.extend_from_slice(img.data());
    }
    Ok(Tensor::from_vec(&[images.len(), 3, h, w], data))
}

/// Splits batched head outputs into per-image predictions.
pub fn split_outputs(
    semantic: &Tensor,
    embedding: &Tensor,
    depth: &Tensor,
) -> Vec<PredictionBundle> {
    let (n, k, h, w) = semantic.dims4();
    let e = embedding.shape()[1];
    (0..n)
        .map(|i| PredictionBundle {
            semantic_logits: LogitMap::new(h, w, k, semantic.image(i).to_vec()),
            embeddings: EmbeddingMap::new(h, w, e, embedding.image(i).to_vec()),
            depth: DepthMap::all_valid(Grid::from_vec(h, w, depth.image(i).to_vec())),
        })
        .collect()
}

/// Evaluation-mode forward of a joint model.
pub fn forward(model: &BranchedModel, images: &[ImageTensor]) -> Result<Vec<PredictionBundle>> {
    if !model.is_joint() {
        return Err(Error::Config("forward needs a model with all three branches".into()));
    }
    let batch = images_to_batch(images)?;
    let mut e = Eager::new(&model.store);
    let out = model.forward_exec(&mut e, batch);
    let (Some(s), Some(m), Some(d)) = (out.semantic, out.embedding, out.depth) else {
        unreachable!("joint model produces every head");
    };
    Ok(split_outputs(&s, &m, &d))
}

/// Outcome of [`load_pretrained_encoder`].
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct LoadReport {
    pub loaded: Vec<String>,
    /// Checkpoint groups that were not applied to the model.
    pub unmatched: Vec<String>,
}

/// Copies the shared encoder groups (and optionally stage 3 into every
/// branch) from a checkpoint's parameter store.
pub fn load_pretrained_encoder(
    model: &mut BranchedModel,
    source: &ParamStore,
    init_stage3: bool,
) -> Result<LoadReport> {
    if source.is_empty() {
        return Err(Error::Checkpoint("checkpoint holds no parameters".into()));
    }
    let mut plan: Vec<(String, String)> = Vec::new();
    let mut report = LoadReport::default();
    for group in source.groups() {
        if group.starts_with("encoder.") && model.store.groups().contains(&group) {
            plan.push((group.clone(), group.clone()));
            report.loaded.push(group);
        } else if init_stage3 && group.ends_with(".stage3") {
            for task in model.tasks() {
                plan.push((group.clone(), format!("{}.stage3", task.name())));
            }
            report.loaded.push(group);
        } else {
            report.unmatched.push(group);
        }
    }
    // Validate everything before mutating.
    for (src, dst) in &plan {
        let src_ids = source.group_ids(src);
        let dst_ids = model.store.group_ids(dst);
        if src_ids.len() != dst_ids.len() {
            return Err(Error::Checkpoint(format!(
                "group {src}: {} tensors, model group {dst} has {}",
                src_ids.len(),
                dst_ids.len()
            )));
        }
        for (&s, &d) in src_ids.iter().zip(&dst_ids) {
            let (se, de) = (source.entry(s), model.store.entry(d));
            if se.name != de.name || se.value.shape() != de.value.shape() {
                return Err(Error::Checkpoint(format!(
                    "{src}/{} {:?} does not match {dst}/{} {:?}",
                    se.name,
                    se.value.shape(),
                    de.name,
                    de.value.shape()
                )));
            }
        }
    }
    for (src, dst) in &plan {
        for (s, d) in source.group_ids(src).into_iter().zip(model.store.group_ids(dst)) {
            *model.store.get_mut(d) = source.get(s).clone();
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn toy_output_shapes() {
        let model = build_model(&NetworkConfig::toy(3), 1).unwrap();
        let out = forward(&model, &[ImageTensor::zeros(64, 64)]).unwrap();
        assert_eq!(out[0].semantic_logits.shape(), (64, 64));
        assert_eq!(out[0].semantic_logits.classes(), 3);
        assert_eq!(out[0].embeddings.dim(), 4);
        assert_eq!(out[0].depth.shape(), (64, 64));
        assert!(out[0].depth.depth.data().iter().all(|d| *d > 0.0 && d.is_finite()));
    }

    #[test]
    fn rejects_bad_inputs() {
        let model = build_model(&NetworkConfig::toy(3), 1).unwrap();
        assert!(forward(&model, &[ImageTensor::zeros(60, 64)]).is_err());
        let mut img = ImageTensor::zeros(64, 64);
        img.data_mut()[5] = f32::NAN;
        assert!(forward(&model, &[img]).is_err());
        let mut cfg = NetworkConfig::toy(3);
        cfg.stage_widths[4] = 48;
        assert!(build_model(&cfg, 0).is_err());
    }

    #[test]
    fn joint_model_has_fewer_parameters() {
        let cfg = NetworkConfig::enet(19);
        let joint = build_model(&cfg, 0).unwrap().store.num_parameters();
        let separate: usize = Task::ALL
            .iter()
            .map(|&t| build_single_task_model(&cfg, t, 0).unwrap().store.num_parameters())
            .sum();
        assert!(joint < separate);
    }
}
