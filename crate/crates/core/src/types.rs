//! Shared data model: images, label maps, depth, network predictions and
//! the validation applied to every sample entering the pipeline.

use std::fmt;
use std::ops::{Deref, DerefMut};

/// Label value excluded from losses and metrics.
pub const IGNORE_LABEL: u8 = 255;

/// The deepest encoder stage runs at 1/8 of the input resolution.
pub const SIZE_MULTIPLE: usize = 8;

/// Row-major `height x width` grid.
#[derive(Clone, Debug, PartialEq)]
pub struct Grid<T> {
    height: usize,
    width: usize,
    data: Vec<T>,
}

impl<T: Clone> Grid<T> {
    pub fn filled(height: usize, width: usize, value: T) -> Self {
        Self {
            height,
            width,
            data: vec![value; height * width],
        }
    }
}

impl<T> Grid<T> {
    pub fn from_vec(height: usize, width: usize, data: Vec<T>) -> Self {
        assert_eq!(data.len(), height * width, "grid data does not match shape");
        Self {
            height,
            width,
            data,
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<T> {
        self.data
    }

    pub fn get(&self, row: usize, col: usize) -> &T {
        &self.data[row * self.width + col]
    }

    pub fn set(&mut self, row: usize, col: usize, value: T) {
        self.data[row * self.width + col] = value;
    }

    pub fn map<U>(&self, f: impl Fn(&T) -> U) -> Grid<U> {
        Grid {
            height: self.height,
            width: self.width,
            data: self.data.iter().map(f).collect(),
        }
    }
}

impl Grid<bool> {
    pub fn count(&self) -> usize {
        self.data.iter().filter(|v| **v).count()
    }
}

/// `3 x H x W` image with values in `[0, 1]`, channel-major.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageTensor {
    height: usize,
    width: usize,
    data: Vec<f32>,
}

impl ImageTensor {
    pub const CHANNELS: usize = 3;

    pub fn new(height: usize, width: usize, data: Vec<f32>) -> Self {
        assert_eq!(data.len(), Self::CHANNELS * height * width);
        Self {
            height,
            width,
            data,
        }
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        Self::new(height, width, vec![0.0; Self::CHANNELS * height * width])
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn pixel(&self, row: usize, col: usize) -> [f32; 3] {
        let plane = self.height * self.width;
        let i = row * self.width + col;
        [self.data[i], self.data[plane + i], self.data[2 * plane + i]]
    }

    pub fn set_pixel(&mut self, row: usize, col: usize, rgb: [f32; 3]) {
        let plane = self.height * self.width;
        let i = row * self.width + col;
        for (c, v) in rgb.into_iter().enumerate() {
            self.data[c * plane + i] = v;
        }
    }
}

macro_rules! grid_newtype {
    ($(#[$meta:meta])* $name:ident, $t:ty) => {
        $(#[$meta])*
        #[derive(Clone, Debug, PartialEq)]
        pub struct $name(pub Grid<$t>);

        impl Deref for $name {
            type Target = Grid<$t>;
            fn deref(&self) -> &Grid<$t> {
                &self.0
            }
        }

        impl DerefMut for $name {
            fn deref_mut(&mut self) -> &mut Grid<$t> {
                &mut self.0
            }
        }
    };
}

grid_newtype!(
    /// Class id per pixel, or [`IGNORE_LABEL`].
    SemanticMap,
    u8
);
grid_newtype!(
    /// Instance id per pixel; 0 is background. Ids are expected to be 1..=C.
    InstanceMap,
    u32
);

impl InstanceMap {
    pub fn max_id(&self) -> u32 {
        self.data().iter().copied().max().unwrap_or(0)
    }

    /// Pixel count per id, index 0 holding the background count.
    pub fn counts(&self) -> Vec<usize> {
        let mut counts = vec![0usize; self.max_id() as usize + 1];
        for &id in self.data() {
            counts[id as usize] += 1;
        }
        counts
    }

    pub fn mask(&self, id: u32) -> Grid<bool> {
        self.map(|&v| v == id)
    }
}

/// Metric depth with an explicit validity mask; invalid pixels carry no
/// meaning in `depth`.
#[derive(Clone, Debug, PartialEq)]
pub struct DepthMap {
    pub depth: Grid<f32>,
    pub valid: Grid<bool>,
}

impl DepthMap {
    pub fn all_valid(depth: Grid<f32>) -> Self {
        let valid = Grid::filled(depth.height(), depth.width(), true);
        Self { depth, valid }
    }

    pub fn shape(&self) -> (usize, usize) {
        self.depth.shape()
    }

    pub fn at(&self, i: usize) -> Option<f32> {
        self.valid.data()[i].then(|| self.depth.data()[i])
    }
}

/// `E x H x W` per-pixel embeddings, channel-major.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingMap {
    height: usize,
    width: usize,
    dim: usize,
    data: Vec<f32>,
}

impl EmbeddingMap {
    pub fn new(height: usize, width: usize, dim: usize, data: Vec<f32>) -> Self {
        assert_eq!(data.len(), dim * height * width);
        Self {
            height,
            width,
            dim,
            data,
        }
    }

    /// Builds from per-pixel vectors in row-major pixel order.
    pub fn from_pixels(height: usize, width: usize, pixels: &[Vec<f32>]) -> Self {
        assert_eq!(pixels.len(), height * width);
        let dim = pixels.first().map_or(0, |p| p.len());
        let plane = height * width;
        let mut data = vec![0.0; dim * plane];
        for (i, p) in pixels.iter().enumerate() {
            assert_eq!(p.len(), dim, "embedding dimension must be constant");
            for (d, v) in p.iter().enumerate() {
                data[d * plane + i] = *v;
            }
        }
        Self::new(height, width, dim, data)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn pixel(&self, i: usize) -> Vec<f32> {
        let plane = self.height * self.width;
        (0..self.dim).map(|d| self.data[d * plane + i]).collect()
    }
}

/// `K x H x W` class scores, channel-major.
#[derive(Clone, Debug, PartialEq)]
pub struct LogitMap {
    height: usize,
    width: usize,
    classes: usize,
    data: Vec<f32>,
}

impl LogitMap {
    pub fn new(height: usize, width: usize, classes: usize, data: Vec<f32>) -> Self {
        assert_eq!(data.len(), classes * height * width);
        Self {
            height,
            width,
            classes,
            data,
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn num_pixels(&self) -> usize {
        self.height * self.width
    }

    pub fn logit(&self, pixel: usize, class: usize) -> f32 {
        self.data[class * self.num_pixels() + pixel]
    }

    /// Highest-scoring class; ties resolve to the lowest class id.
    pub fn argmax(&self, pixel: usize) -> u8 {
        let mut best = 0;
        for k in 1..self.classes {
            if self.logit(pixel, k) > self.logit(pixel, best) {
                best = k;
            }
        }
        best as u8
    }

    pub fn argmax_map(&self) -> Grid<u8> {
        Grid::from_vec(
            self.height,
            self.width,
            (0..self.num_pixels()).map(|i| self.argmax(i)).collect(),
        )
    }

    pub fn softmax(&self, pixel: usize) -> Vec<f64> {
        let logits: Vec<f64> = (0..self.classes)
            .map(|k| self.logit(pixel, k) as f64)
            .collect();
        let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exp: Vec<f64> = logits.iter().map(|l| (l - m).exp()).collect();
        let z: f64 = exp.iter().sum();
        exp.into_iter().map(|e| e / z).collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub id: String,
    pub image: ImageTensor,
    pub semantic: SemanticMap,
    pub instances: InstanceMap,
    pub depth: DepthMap,
}

impl Sample {
    pub fn shape(&self) -> (usize, usize) {
        (self.image.height(), self.image.width())
    }

    /// Majority semantic class of each instance id 1..=C (index 0 unused).
    pub fn instance_classes(&self) -> Vec<u8> {
        let c = self.instances.max_id() as usize;
        let mut votes = vec![[0usize; 256]; c + 1];
        for (&id, &cls) in self.instances.data().iter().zip(self.semantic.data()) {
            if id > 0 {
                votes[id as usize][cls as usize] += 1;
            }
        }
        votes
            .iter()
            .map(|v| {
                let mut best = IGNORE_LABEL as usize;
                for k in 0..256 {
                    if v[k] > v[best] {
                        best = k;
                    }
                }
                best as u8
            })
            .collect()
    }
}

/// Outputs of one forward pass for one image.
#[derive(Clone, Debug, PartialEq)]
pub struct PredictionBundle {
    pub semantic_logits: LogitMap,
    pub embeddings: EmbeddingMap,
    pub depth: DepthMap,
}

#[derive(Clone, Debug, PartialEq)]
pub struct InstanceDetection {
    pub mask: Grid<bool>,
    pub class_id: u8,
    pub confidence: f64,
}

/// Scalar loss values of one step. `total` is the weighted task sum.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossBreakdown {
    pub l_sem: f64,
    pub l_var: f64,
    pub l_dist: f64,
    pub l_reg: f64,
    pub l_dep: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn l_inst(&self) -> f64 {
        self.l_var + self.l_dist + self.l_reg
    }

    pub fn is_finite(&self) -> bool {
        [
            self.l_sem,
            self.l_var,
            self.l_dist,
            self.l_reg,
            self.l_dep,
            self.total,
        ]
        .iter()
        .all(|v| v.is_finite())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Violation {
    SizeNotMultipleOf8 { height: usize, width: usize },
    ShapeMismatch { grid: &'static str, expected: (usize, usize), got: (usize, usize) },
    ImageValue { index: usize, value: f32 },
    SemanticOutOfRange { row: usize, col: usize, id: u8 },
    EmptyInstance { id: u32 },
    InvalidDepth { row: usize, col: usize, value: f32 },
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::SizeNotMultipleOf8 { height, width } => {
                write!(f, "image size {height}x{width} is not a multiple of {SIZE_MULTIPLE}")
            }
            Violation::ShapeMismatch {
                grid,
                expected,
                got,
            } => write!(f, "{grid} shape {got:?} differs from image shape {expected:?}"),
            Violation::ImageValue { index, value } => {
                write!(f, "image value {value} at flat index {index} outside [0, 1]")
            }
            Violation::SemanticOutOfRange { row, col, id } => {
                write!(f, "semantic id {id} at ({row}, {col}) is not a valid class")
            }
            Violation::EmptyInstance { id } => write!(f, "instance id {id} labels no pixels"),
            Violation::InvalidDepth { row, col, value } => {
                write!(f, "valid depth {value} at ({row}, {col}) is not finite and positive")
            }
        }
    }
}

/// Every violated sample invariant; empty iff the sample is well formed.
pub fn validate_sample(sample: &Sample, num_classes: usize) -> Vec<Violation> {
    let mut out = Vec::new();
    let (h, w) = sample.shape();
    if h % SIZE_MULTIPLE != 0 || w % SIZE_MULTIPLE != 0 {
        out.push(Violation::SizeNotMultipleOf8 {
            height: h,
            width: w,
        });
    }
    for (index, &value) in sample.image.data().iter().enumerate() {
        if !(0.0..=1.0).contains(&value) {
            out.push(Violation::ImageValue { index, value });
        }
    }
    let grids: [(&'static str, (usize, usize)); 4] = [
        ("semantic", sample.semantic.shape()),
        ("instances", sample.instances.shape()),
        ("depth", sample.depth.depth.shape()),
        ("depth validity", sample.depth.valid.shape()),
    ];
    let mut shapes_ok = true;
    for (grid, got) in grids {
        if got != (h, w) {
            shapes_ok = false;
            out.push(Violation::ShapeMismatch {
                grid,
                expected: (h, w),
                got,
            });
        }
    }
    let sw = sample.semantic.width();
    for (i, &id) in sample.semantic.data().iter().enumerate() {
        if id != IGNORE_LABEL && id as usize >= num_classes {
            out.push(Violation::SemanticOutOfRange {
                row: i / sw,
                col: i % sw,
                id,
            });
        }
    }
    for (id, &count) in sample.instances.counts().iter().enumerate().skip(1) {
        if count == 0 {
            out.push(Violation::EmptyInstance { id: id as u32 });
        }
    }
    if shapes_ok {
        for (i, (&d, &v)) in sample
            .depth
            .depth
            .data()
            .iter()
            .zip(sample.depth.valid.data())
            .enumerate()
        {
            if v && !(d.is_finite() && d > 0.0) {
                out.push(Violation::InvalidDepth {
                    row: i / w,
                    col: i % w,
                    value: d,
                });
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample(h: usize, w: usize) -> Sample {
        let mut instances = InstanceMap(Grid::filled(h, w, 0));
        instances.set(1, 1, 1);
        instances.set(1, 2, 1);
        Sample {
            id: "s".into(),
            image: ImageTensor::zeros(h, w),
            semantic: SemanticMap(Grid::filled(h, w, 0)),
            instances,
            depth: DepthMap::all_valid(Grid::filled(h, w, 10.0)),
        }
    }

    #[test]
    fn well_formed_sample_has_no_violations() {
        assert!(validate_sample(&sample(64, 64), 3).is_empty());
    }

    #[test]
    fn gap_in_instance_ids_is_reported() {
        let mut s = sample(16, 16);
        s.instances.set(5, 5, 3);
        let v = validate_sample(&s, 3);
        assert_eq!(v, vec![Violation::EmptyInstance { id: 2 }]);
    }

    #[test]
    fn out_of_range_class_names_the_pixel() {
        let mut s = sample(16, 16);
        s.semantic.set(2, 7, 3);
        s.semantic.set(3, 3, IGNORE_LABEL);
        let v = validate_sample(&s, 3);
        assert_eq!(
            v,
            vec![Violation::SemanticOutOfRange {
                row: 2,
                col: 7,
                id: 3
            }]
        );
    }

    #[test]
    fn shape_and_size_violations() {
        let mut s = sample(12, 16);
        s.depth = DepthMap::all_valid(Grid::filled(8, 16, 1.0));
        let v = validate_sample(&s, 3);
        assert!(v.contains(&Violation::SizeNotMultipleOf8 {
            height: 12,
            width: 16
        }));
        assert!(v
            .iter()
            .any(|x| matches!(x, Violation::ShapeMismatch { grid: "depth", .. })));
    }

    #[test]
    fn invalid_depth_only_checked_where_valid() {
        let mut s = sample(8, 8);
        s.depth.depth.set(0, 0, -1.0);
        assert_eq!(validate_sample(&s, 3).len(), 1);
        s.depth.valid.set(0, 0, false);
        assert!(validate_sample(&s, 3).is_empty());
    }

    #[test]
    fn loss_breakdown_finiteness() {
        let mut l = LossBreakdown::default();
        assert!(l.is_finite());
        l.l_dep = f64::NAN;
        assert!(!l.is_finite());
    }
}
