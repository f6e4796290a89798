use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::exec::{add_tensors, frozen_bn_coefficients, pad_channels_tensor, softplus_tensor};
use crate::kernels::{self, Conv2dSpec, ConvTranspose2dSpec, PoolIndices, BN_EPS};
use crate::{BatchNormIds, Exec, ParamId, ParamStore, Tensor};

/// Handle to a value recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

enum Op {
    Input,
    Conv2d {
        x: usize,
        w: ParamId,
        b: Option<ParamId>,
        spec: Conv2dSpec,
    },
    ConvT {
        x: usize,
        w: ParamId,
        b: Option<ParamId>,
        spec: ConvTranspose2dSpec,
    },
    /// `batch_stats` distinguishes normalization with batch moments from the
    /// frozen affine map built from running statistics.
    BatchNorm {
        x: usize,
        bn: BatchNormIds,
        mean: Vec<f32>,
        inv_std: Vec<f32>,
        batch_stats: bool,
    },
    PRelu {
        x: usize,
        a: ParamId,
    },
    Relu {
        x: usize,
    },
    MaxPool {
        x: usize,
        ind: PoolIndices,
    },
    Unpool {
        x: usize,
        ind: PoolIndices,
    },
    Add {
        a: usize,
        b: usize,
    },
    Concat {
        a: usize,
        b: usize,
        ca: usize,
    },
    PadChannels {
        x: usize,
        c: usize,
    },
    Dropout {
        x: usize,
        mask: Vec<f32>,
    },
    Softplus {
        x: usize,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Running-statistic update produced by a training-mode batch norm.
#[derive(Clone, Debug)]
pub struct BnUpdate {
    pub ids: BatchNormIds,
    pub mean: Vec<f32>,
    pub var: Vec<f32>,
}

impl BnUpdate {
    /// Exponential moving average with the given momentum; `var` is the
    /// unbiased batch variance.
    pub fn apply(&self, store: &mut ParamStore, momentum: f32) {
        for (r, m) in store.get_mut(self.ids.mean).data_mut().iter_mut().zip(&self.mean) {
            *r = (1.0 - momentum) * *r + momentum * m;
        }
        for (r, v) in store.get_mut(self.ids.var).data_mut().iter_mut().zip(&self.var) {
            *r = (1.0 - momentum) * *r + momentum * v;
        }
    }
}

/// Parameter gradients indexed by [`ParamId`].
#[derive(Clone, Debug)]
pub struct Grads {
    grads: Vec<Option<Tensor>>,
}

impl Grads {
    pub fn get(&self, id: ParamId) -> Option<&Tensor> {
        self.grads.get(id.index()).and_then(|g| g.as_ref())
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }

    fn accumulate(&mut self, id: ParamId, g: Tensor) {
        match &mut self.grads[id.index()] {
            Some(acc) => acc.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }
}

/// Recording executor. Every op stores its output and enough context to
/// run the reverse pass in [`Graph::backward`].
pub struct Graph<'a> {
    store: &'a ParamStore,
    nodes: Vec<Node>,
    training: bool,
    batch_stats: bool,
    rng: ChaCha8Rng,
    bn_updates: Vec<BnUpdate>,
}

impl<'a> Graph<'a> {
    /// `training` enables dropout; `batch_stats` additionally switches batch
    /// norm to batch moments (only meaningful when training).
    pub fn new(store: &'a ParamStore, training: bool, batch_stats: bool, dropout_seed: u64) -> Self {
        Self {
            store,
            nodes: Vec::new(),
            training,
            batch_stats: training && batch_stats,
            rng: ChaCha8Rng::seed_from_u64(dropout_seed),
            bn_updates: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn take_bn_updates(&mut self) -> Vec<BnUpdate> {
        std::mem::take(&mut self.bn_updates)
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[usize]) -> Var {
        let requires_grad = match op {
            Op::Conv2d { .. } | Op::ConvT { .. } | Op::PRelu { .. } => true,
            Op::BatchNorm { .. } => true,
            _ => inputs.iter().any(|&i| self.nodes[i].requires_grad),
        };
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Reverse pass from output seeds `(var, d loss / d var)`.
    pub fn backward(&self, seeds: &[(Var, Tensor)]) -> Grads {
        let mut grads = Grads {
            grads: vec![None; self.store.len()],
        };
        let mut node_grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        for (v, g) in seeds {
            assert_eq!(
                self.nodes[v.0].value.shape(),
                g.shape(),
                "seed gradient shape mismatch"
            );
            accumulate(&mut node_grads, v.0, g.clone());
        }
        for i in (0..self.nodes.len()).rev() {
            let Some(dy) = node_grads[i].take() else { continue };
            let node = &self.nodes[i];
            let needs = |j: usize| self.nodes[j].requires_grad;
            match &node.op {
                Op::Input => {}
                Op::Conv2d { x, w, b, spec } => {
                    let (dx, dw, db) = kernels::conv2d_backward(
                        &self.nodes[*x].value,
                        self.store.get(*w),
                        b.is_some(),
                        *spec,
                        &dy,
                        needs(*x),
                    );
                    grads.accumulate(*w, dw);
                    if let (Some(b), Some(db)) = (b, db) {
                        grads.accumulate(*b, db);
                    }
                    if let Some(dx) = dx {
                        accumulate(&mut node_grads, *x, dx);
                    }
                }
                Op::ConvT { x, w, b, spec } => {
                    let (dx, dw, db) = kernels::conv_transpose2d_backward(
                        &self.nodes[*x].value,
                        self.store.get(*w),
                        b.is_some(),
                        *spec,
                        &dy,
                        needs(*x),
                    );
                    grads.accumulate(*w, dw);
                    if let (Some(b), Some(db)) = (b, db) {
                        grads.accumulate(*b, db);
                    }
                    if let Some(dx) = dx {
                        accumulate(&mut node_grads, *x, dx);
                    }
                }
                Op::BatchNorm {
                    x,
                    bn,
                    mean,
                    inv_std,
                    batch_stats,
                } => {
                    let xv = &self.nodes[*x].value;
                    let (sum_dy, sum_dy_xhat) = kernels::bn_reductions(xv, &dy, mean, inv_std);
                    let gamma = self.store.get(bn.scale).data();
                    let c = gamma.len();
                    grads.accumulate(bn.scale, Tensor::from_vec(&[c], sum_dy_xhat.clone()));
                    grads.accumulate(bn.shift, Tensor::from_vec(&[c], sum_dy.clone()));
                    if needs(*x) {
                        let dx = if *batch_stats {
                            kernels::bn_train_dx(
                                xv,
                                &dy,
                                gamma,
                                mean,
                                inv_std,
                                &sum_dy,
                                &sum_dy_xhat,
                            )
                        } else {
                            let scale: Vec<f32> =
                                gamma.iter().zip(inv_std).map(|(g, s)| g * s).collect();
                            kernels::channel_affine(&dy, &scale, &vec![0.0; c])
                        };
                        accumulate(&mut node_grads, *x, dx);
                    }
                }
                Op::PRelu { x, a } => {
                    let (dx, da) =
                        kernels::prelu_backward(&self.nodes[*x].value, self.store.get(*a).data(), &dy);
                    let n = da.len();
                    grads.accumulate(*a, Tensor::from_vec(&[n], da));
                    if needs(*x) {
                        accumulate(&mut node_grads, *x, dx);
                    }
                }
                Op::Relu { x } => {
                    if needs(*x) {
                        let dx = kernels::relu_backward(&self.nodes[*x].value, &dy);
                        accumulate(&mut node_grads, *x, dx);
                    }
                }
                Op::MaxPool { x, ind } => {
                    if needs(*x) {
                        accumulate(&mut node_grads, *x, kernels::max_pool2x2_backward(&dy, ind));
                    }
                }
                Op::Unpool { x, ind } => {
                    if needs(*x) {
                        accumulate(&mut node_grads, *x, kernels::max_unpool2x2_backward(&dy, ind));
                    }
                }
                Op::Add { a, b } => {
                    if needs(*b) {
                        accumulate(&mut node_grads, *b, dy.clone());
                    }
                    if needs(*a) {
                        accumulate(&mut node_grads, *a, dy);
                    }
                }
                Op::Concat { a, b, ca } => {
                    let (da, db) = kernels::split_channels(&dy, *ca);
                    if needs(*a) {
                        accumulate(&mut node_grads, *a, da);
                    }
                    if needs(*b) {
                        accumulate(&mut node_grads, *b, db);
                    }
                }
                Op::PadChannels { x, c } => {
                    if needs(*x) {
                        let (dx, _) = kernels::split_channels(&dy, *c);
                        accumulate(&mut node_grads, *x, dx);
                    }
                }
                Op::Dropout { x, mask } => {
                    if needs(*x) {
                        accumulate(&mut node_grads, *x, apply_channel_mask(&dy, mask));
                    }
                }
                Op::Softplus { x } => {
                    if needs(*x) {
                        let mut dx = dy;
                        for (d, xv) in dx.data_mut().iter_mut().zip(self.nodes[*x].value.data()) {
                            *d *= kernels::sigmoid(*xv);
                        }
                        accumulate(&mut node_grads, *x, dx);
                    }
                }
            }
        }
        grads
    }
}

fn accumulate(node_grads: &mut [Option<Tensor>], i: usize, g: Tensor) {
    match &mut node_grads[i] {
        Some(acc) => acc.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

fn apply_channel_mask(x: &Tensor, mask: &[f32]) -> Tensor {
    let (_, _, h, w) = x.dims4();
    let plane = h * w;
    let mut out = x.clone();
    for (i, m) in mask.iter().enumerate() {
        for v in &mut out.data_mut()[i * plane..(i + 1) * plane] {
            *v *= m;
        }
    }
    out
}

impl Exec for Graph<'_> {
    type V = Var;

    fn store(&self) -> &ParamStore {
        self.store
    }

    fn value<'b>(&'b self, v: &'b Var) -> &'b Tensor {
        &self.nodes[v.0].value
    }

    fn is_training(&self) -> bool {
        self.training
    }

    fn input(&mut self, t: Tensor) -> Var {
        self.nodes.push(Node {
            value: t,
            op: Op::Input,
            requires_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    fn conv2d(&mut self, x: &Var, w: ParamId, b: Option<ParamId>, spec: Conv2dSpec) -> Var {
        let y = kernels::conv2d_forward(
            &self.nodes[x.0].value,
            self.store.get(w),
            b.map(|b| self.store.get(b)),
            spec,
        );
        self.push(y, Op::Conv2d { x: x.0, w, b, spec }, &[x.0])
    }

    fn conv_transpose2d(
        &mut self,
        x: &Var,
        w: ParamId,
        b: Option<ParamId>,
        spec: ConvTranspose2dSpec,
    ) -> Var {
        let y = kernels::conv_transpose2d_forward(
            &self.nodes[x.0].value,
            self.store.get(w),
            b.map(|b| self.store.get(b)),
            spec,
        );
        self.push(y, Op::ConvT { x: x.0, w, b, spec }, &[x.0])
    }

    fn batch_norm(&mut self, x: &Var, bn: BatchNormIds) -> Var {
        let xv = &self.nodes[x.0].value;
        let gamma = self.store.get(bn.scale).data();
        let beta = self.store.get(bn.shift).data();
        let (y, mean, inv_std) = if self.batch_stats {
            let (mean, var) = kernels::channel_moments(xv);
            let inv_std: Vec<f32> = var.iter().map(|v| 1.0 / (v + BN_EPS).sqrt()).collect();
            let scale: Vec<f32> = gamma.iter().zip(&inv_std).map(|(g, s)| g * s).collect();
            let shift: Vec<f32> = beta
                .iter()
                .zip(&mean)
                .zip(&scale)
                .map(|((b, m), s)| b - m * s)
                .collect();
            let (n, _, h, w) = xv.dims4();
            let count = (n * h * w) as f32;
            let unbiased = var
                .iter()
                .map(|v| if count > 1.0 { v * count / (count - 1.0) } else { *v })
                .collect();
            self.bn_updates.push(BnUpdate {
                ids: bn,
                mean: mean.clone(),
                var: unbiased,
            });
            (kernels::channel_affine(xv, &scale, &shift), mean, inv_std)
        } else {
            let (scale, shift) = frozen_bn_coefficients(self.store, bn);
            let mean = self.store.get(bn.mean).data().to_vec();
            let inv_std = self
                .store
                .get(bn.var)
                .data()
                .iter()
                .map(|v| 1.0 / (v + BN_EPS).sqrt())
                .collect();
            (kernels::channel_affine(xv, &scale, &shift), mean, inv_std)
        };
        let batch_stats = self.batch_stats;
        self.push(
            y,
            Op::BatchNorm {
                x: x.0,
                bn,
                mean,
                inv_std,
                batch_stats,
            },
            &[x.0],
        )
    }

    fn prelu(&mut self, x: &Var, slope: ParamId) -> Var {
        let y = kernels::prelu_forward(&self.nodes[x.0].value, self.store.get(slope).data());
        self.push(y, Op::PRelu { x: x.0, a: slope }, &[x.0])
    }

    fn relu(&mut self, x: &Var) -> Var {
        let y = kernels::relu_forward(&self.nodes[x.0].value);
        self.push(y, Op::Relu { x: x.0 }, &[x.0])
    }

    fn max_pool2x2(&mut self, x: &Var) -> (Var, PoolIndices) {
        let (y, ind) = kernels::max_pool2x2(&self.nodes[x.0].value);
        let v = self.push(
            y,
            Op::MaxPool {
                x: x.0,
                ind: ind.clone(),
            },
            &[x.0],
        );
        (v, ind)
    }

    fn max_unpool2x2(&mut self, x: &Var, indices: &PoolIndices) -> Var {
        let y = kernels::max_unpool2x2(&self.nodes[x.0].value, indices);
        self.push(
            y,
            Op::Unpool {
                x: x.0,
                ind: indices.clone(),
            },
            &[x.0],
        )
    }

    fn add(&mut self, a: &Var, b: &Var) -> Var {
        let y = add_tensors(&self.nodes[a.0].value, &self.nodes[b.0].value);
        self.push(y, Op::Add { a: a.0, b: b.0 }, &[a.0, b.0])
    }

    fn concat_channels(&mut self, a: &Var, b: &Var) -> Var {
        let ca = self.nodes[a.0].value.dims4().1;
        let y = kernels::concat_channels(&self.nodes[a.0].value, &self.nodes[b.0].value);
        self.push(y, Op::Concat { a: a.0, b: b.0, ca }, &[a.0, b.0])
    }

    fn pad_channels(&mut self, x: &Var, channels: usize) -> Var {
        let c = self.nodes[x.0].value.dims4().1;
        let y = pad_channels_tensor(&self.nodes[x.0].value, channels);
        self.push(y, Op::PadChannels { x: x.0, c }, &[x.0])
    }

    fn dropout2d(&mut self, x: &Var, p: f32) -> Var {
        let xv = &self.nodes[x.0].value;
        let (n, c, _, _) = xv.dims4();
        let mask: Vec<f32> = if self.training && p > 0.0 {
            let keep = 1.0 / (1.0 - p);
            (0..n * c)
                .map(|_| if self.rng.gen::<f32>() < p { 0.0 } else { keep })
                .collect()
        } else {
            vec![1.0; n * c]
        };
        let y = apply_channel_mask(xv, &mask);
        self.push(y, Op::Dropout { x: x.0, mask }, &[x.0])
    }

    fn softplus(&mut self, x: &Var) -> Var {
        let y = softplus_tensor(&self.nodes[x.0].value);
        self.push(y, Op::Softplus { x: x.0 }, &[x.0])
    }
}
