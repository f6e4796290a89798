use crate::kernels::{self, Conv2dSpec, ConvTranspose2dSpec, PoolIndices, BN_EPS};
use crate::{ParamId, ParamStore, Tensor};

/// Parameter ids of one batch-normalization layer.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BatchNormIds {
    pub scale: ParamId,
    pub shift: ParamId,
    pub mean: ParamId,
    pub var: ParamId,
}

/// Operations a network forward pass is written against. Weights are
/// addressed by [`ParamId`] and read from the executor's parameter store.
pub trait Exec {
    type V;

    fn store(&self) -> &ParamStore;
    fn value<'a>(&'a self, v: &'a Self::V) -> &'a Tensor;
    fn is_training(&self) -> bool;

    fn input(&mut self, t: Tensor) -> Self::V;
    fn conv2d(&mut self, x: &Self::V, w: ParamId, b: Option<ParamId>, spec: Conv2dSpec)
        -> Self::V;
    fn conv_transpose2d(
        &mut self,
        x: &Self::V,
        w: ParamId,
        b: Option<ParamId>,
        spec: ConvTranspose2dSpec,
    ) -> Self::V;
    fn batch_norm(&mut self, x: &Self::V, bn: BatchNormIds) -> Self::V;
    fn prelu(&mut self, x: &Self::V, slope: ParamId) -> Self::V;
    fn relu(&mut self, x: &Self::V) -> Self::V;
    fn max_pool2x2(&mut self, x: &Self::V) -> (Self::V, PoolIndices);
    fn max_unpool2x2(&mut self, x: &Self::V, indices: &PoolIndices) -> Self::V;
    fn add(&mut self, a: &Self::V, b: &Self::V) -> Self::V;
    fn concat_channels(&mut self, a: &Self::V, b: &Self::V) -> Self::V;
    /// Appends zero-valued channels up to `channels`.
    fn pad_channels(&mut self, x: &Self::V, channels: usize) -> Self::V;
    /// Channel-wise dropout; identity outside training.
    fn dropout2d(&mut self, x: &Self::V, p: f32) -> Self::V;
    fn softplus(&mut self, x: &Self::V) -> Self::V;
}

/// Evaluation-mode executor: computes values only, keeps no history, and
/// uses running statistics for batch normalization.
pub struct Eager<'a> {
    store: &'a ParamStore,
}

impl<'a> Eager<'a> {
    pub fn new(store: &'a ParamStore) -> Self {
        Self { store }
    }
}

pub(crate) fn frozen_bn_coefficients(store: &ParamStore, bn: BatchNormIds) -> (Vec<f32>, Vec<f32>) {
    let gamma = store.get(bn.scale).data();
    let beta = store.get(bn.shift).data();
    let mean = store.get(bn.mean).data();
    let var = store.get(bn.var).data();
    let scale: Vec<f32> = gamma
        .iter()
        .zip(var)
        .map(|(g, v)| g / (v + BN_EPS).sqrt())
        .collect();
    let shift = beta
        .iter()
        .zip(mean)
        .zip(&scale)
        .map(|((b, m), s)| b - m * s)
        .collect();
    (scale, shift)
}

pub(crate) fn pad_channels_tensor(x: &Tensor, channels: usize) -> Tensor {
    let (n, c, h, w) = x.dims4();
    assert!(channels >= c, "pad_channels cannot shrink");
    let zeros = Tensor::zeros(&[n, channels - c, h, w]);
    kernels::concat_channels(x, &zeros)
}

pub(crate) fn add_tensors(a: &Tensor, b: &Tensor) -> Tensor {
    assert_eq!(a.shape(), b.shape(), "add of mismatched tensors");
    let mut out = a.clone();
    out.add_assign(b);
    out
}

pub(crate) fn softplus_tensor(x: &Tensor) -> Tensor {
    let mut out = x.clone();
    for v in out.data_mut() {
        *v = kernels::softplus(*v);
    }
    out
}

impl Exec for Eager<'_> {
    type V = Tensor;

    fn store(&self) -> &ParamStore {
        self.store
    }

    fn value<'b>(&'b self, v: &'b Tensor) -> &'b Tensor {
        v
    }

    fn is_training(&self) -> bool {
        false
    }

    fn input(&mut self, t: Tensor) -> Tensor {
        t
    }

    fn conv2d(&mut self, x: &Tensor, w: ParamId, b: Option<ParamId>, spec: Conv2dSpec) -> Tensor {
        kernels::conv2d_forward(x, self.store.get(w), b.map(|b| self.store.get(b)), spec)
    }

    fn conv_transpose2d(
        &mut self,
        x: &Tensor,
        w: ParamId,
        b: Option<ParamId>,
        spec: ConvTranspose2dSpec,
    ) -> Tensor {
        kernels::conv_transpose2d_forward(x, self.store.get(w), b.map(|b| self.store.get(b)), spec)
    }

    fn batch_norm(&mut self, x: &Tensor, bn: BatchNormIds) -> Tensor {
        let (scale, shift) = frozen_bn_coefficients(self.store, bn);
        kernels::channel_affine(x, &scale, &shift)
    }

    fn prelu(&mut self, x: &Tensor, slope: ParamId) -> Tensor {
        kernels::prelu_forward(x, self.store.get(slope).data())
    }

    fn relu(&mut self, x: &Tensor) -> Tensor {
        kernels::relu_forward(x)
    }

    fn max_pool2x2(&mut self, x: &Tensor) -> (Tensor, PoolIndices) {
        kernels::max_pool2x2(x)
    }

    fn max_unpool2x2(&mut self, x: &Tensor, indices: &PoolIndices) -> Tensor {
        kernels::max_unpool2x2(x, indices)
    }

    fn add(&mut self, a: &Tensor, b: &Tensor) -> Tensor {
        add_tensors(a, b)
    }

    fn concat_channels(&mut self, a: &Tensor, b: &Tensor) -> Tensor {
        kernels::concat_channels(a, b)
    }

    fn pad_channels(&mut self, x: &Tensor, channels: usize) -> Tensor {
        pad_channels_tensor(x, channels)
    }

    fn dropout2d(&mut self, x: &Tensor, _p: f32) -> Tensor {
        x.clone()
    }

    fn softplus(&mut self, x: &Tensor) -> Tensor {
        softplus_tensor(x)
    }
}
