//! Dataset ingestion (Cityscapes layout or one directory per sample),
//! disparity to depth conversion, class weighting and synthetic scenes.

use std::fs;
use std::path::{Path, PathBuf};

use image::{DynamicImage, ImageBuffer, Luma, Rgb};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use scenenet_tensor::Tensor;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::postprocess::ClusteringParams;
use crate::types::{
    validate_sample, DepthMap, Grid, ImageTensor, InstanceMap, Sample, SemanticMap, IGNORE_LABEL,
    SIZE_MULTIPLE,
};

pub const IMAGE_SUFFIX: &str = "_leftImg8bit.png";
pub const LABEL_SUFFIX: &str = "_gtFine_labelIds.png";
pub const INSTANCE_SUFFIX: &str = "_gtFine_instanceIds.png";
pub const DISPARITY_SUFFIX: &str = "_disparity.png";

/// Instance pixels are encoded as `class_id * 1000 + index`.
pub const INSTANCE_ENCODING: u32 = 1000;

/// Cityscapes `labelId -> trainId` for the 19 evaluated classes.
const CITYSCAPES_TRAIN_IDS: [(u8, u8); 19] = [
    (7, 0),
    (8, 1),
    (11, 2),
    (12, 3),
    (13, 4),
    (17, 5),
    (19, 6),
    (20, 7),
    (21, 8),
    (22, 9),
    (23, 10),
    (24, 11),
    (25, 12),
    (26, 13),
    (27, 14),
    (28, 15),
    (31, 16),
    (32, 17),
    (33, 18),
];

pub const CITYSCAPES_CLASS_NAMES: [&str; 19] = [
    "road",
    "sidewalk",
    "building",
    "wall",
    "fence",
    "pole",
    "traffic light",
    "traffic sign",
    "vegetation",
    "terrain",
    "sky",
    "person",
    "rider",
    "car",
    "truck",
    "bus",
    "train",
    "motorcycle",
    "bicycle",
];

/// trainId -> category (flat, construction, object, nature, sky, human, vehicle).
pub const CITYSCAPES_CATEGORIES: [usize; 19] = [0, 0, 1, 1, 1, 2, 2, 2, 3, 3, 4, 5, 5, 6, 6, 6, 6, 6, 6];
pub const CITYSCAPES_CATEGORY_NAMES: [&str; 7] = [
    "flat",
    "construction",
    "object",
    "nature",
    "sky",
    "human",
    "vehicle",
];

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CameraParams {
    pub focal_px: f64,
    pub baseline_m: f64,
}

impl CameraParams {
    pub fn new(focal_px: f64, baseline_m: f64) -> Result<Self> {
        if !(focal_px > 0.0 && baseline_m > 0.0) {
            return Err(Error::Config(format!(
                "camera focal ({focal_px}) and baseline ({baseline_m}) must be positive"
            )));
        }
        Ok(Self {
            focal_px,
            baseline_m,
        })
    }

    /// Representative Cityscapes stereo rig; the exact values vary by city
    /// and come from each image's camera file.
    pub fn typical_cityscapes() -> Self {
        Self {
            focal_px: 2262.52,
            baseline_m: 0.209313,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CityscapesPaths {
    pub id: String,
    pub image: PathBuf,
    pub semantic_labels: PathBuf,
    pub instance_labels: PathBuf,
    pub disparity: PathBuf,
    pub camera: Option<CameraParams>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClassMapping {
    /// Raw Cityscapes label ids mapped onto the 19 training classes.
    Cityscapes19,
    /// Label ids are already training class ids.
    Identity,
}

impl ClassMapping {
    pub fn to_train(&self, label: u8, num_classes: usize) -> u8 {
        match self {
            ClassMapping::Cityscapes19 => CITYSCAPES_TRAIN_IDS
                .iter()
                .find(|(l, _)| *l == label)
                .map_or(IGNORE_LABEL, |(_, t)| *t),
            ClassMapping::Identity => {
                if (label as usize) < num_classes {
                    label
                } else {
                    IGNORE_LABEL
                }
            }
        }
    }

    pub fn to_label(&self, train: u8) -> u8 {
        match self {
            ClassMapping::Cityscapes19 => CITYSCAPES_TRAIN_IDS
                .iter()
                .find(|(_, t)| *t == train)
                .map_or(0, |(l, _)| *l),
            ClassMapping::Identity => train,
        }
    }
}

/// `(class_id, instance_index)` of an encoded instance pixel.
pub fn decode_instance_value(value: u32) -> Option<(u32, u32)> {
    (value >= INSTANCE_ENCODING).then(|| (value / INSTANCE_ENCODING, value % INSTANCE_ENCODING))
}

/// Disparity in pixels from a raw 16-bit value; 0 marks no measurement.
pub fn decode_disparity(raw: u16) -> Option<f64> {
    (raw > 0).then(|| (raw as f64 - 1.0) / 256.0)
}

pub fn encode_disparity(disparity: f64) -> u16 {
    let v = (disparity * 256.0).round() + 1.0;
    v.clamp(1.0, u16::MAX as f64) as u16
}

/// `focal * baseline / disparity`, or `None` where disparity is not a valid
/// positive measurement.
pub fn disparity_to_depth(disparity: Option<f64>, camera: &CameraParams) -> Option<f64> {
    match disparity {
        Some(d) if d > 0.0 && d.is_finite() => Some(camera.focal_px * camera.baseline_m / d),
        _ => None,
    }
}

pub fn depth_to_disparity(depth: f64, camera: &CameraParams) -> f64 {
    camera.focal_px * camera.baseline_m / depth
}

pub fn disparity_map_to_depth(raw: &Grid<u16>, camera: &CameraParams) -> DepthMap {
    let (h, w) = raw.shape();
    let mut depth = Grid::filled(h, w, 0.0f32);
    let mut valid = Grid::filled(h, w, false);
    for (i, &p) in raw.data().iter().enumerate() {
        if let Some(d) = disparity_to_depth(decode_disparity(p), camera) {
            depth.data_mut()[i] = d as f32;
            valid.data_mut()[i] = true;
        }
    }
    DepthMap { depth, valid }
}

fn open_image(path: &Path) -> Result<DynamicImage> {
    image::open(path).map_err(|e| Error::Decode {
        path: path.to_path_buf(),
        message: e.to_string(),
    })
}

fn decode_luma8(path: &Path) -> Result<Grid<u8>> {
    match open_image(path)? {
        DynamicImage::ImageLuma8(img) => {
            let (w, h) = img.dimensions();
            Ok(Grid::from_vec(h as usize, w as usize, img.into_raw()))
        }
        other => Err(Error::Decode {
            path: path.to_path_buf(),
            message: format!("expected an 8-bit label map, got {:?}", other.color()),
        }),
    }
}

fn decode_luma16(path: &Path) -> Result<Grid<u16>> {
    match open_image(path)? {
        DynamicImage::ImageLuma16(img) => {
            let (w, h) = img.dimensions();
            Ok(Grid::from_vec(h as usize, w as usize, img.into_raw()))
        }
        DynamicImage::ImageLuma8(img) => {
            let (w, h) = img.dimensions();
            Ok(Grid::from_vec(
                h as usize,
                w as usize,
                img.into_raw().into_iter().map(u16::from).collect(),
            ))
        }
        other => Err(Error::Decode {
            path: path.to_path_buf(),
            message: format!("expected a 16-bit map, got {:?}", other.color()),
        }),
    }
}

pub fn load_image(path: &Path) -> Result<ImageTensor> {
    let img = open_image(path)?.to_rgb8();
    let (w, h) = img.dimensions();
    Ok(rgb_to_tensor(&img, h as usize, w as usize))
}

/// Bilinear resize to `h x w`.
pub fn resize_image(img: &ImageTensor, h: usize, w: usize) -> ImageTensor {
    let (ih, iw) = (img.height(), img.width());
    let plane = ih * iw;
    let mut buf = ImageBuffer::<Rgb<u8>, Vec<u8>>::new(iw as u32, ih as u32);
    for (i, px) in buf.pixels_mut().enumerate() {
        for c in 0..3 {
            px.0[c] = (img.data()[c * plane + i].clamp(0.0, 1.0) * 255.0).round() as u8;
        }
    }
    let out = image::imageops::resize(&buf, w as u32, h as u32, image::imageops::FilterType::Triangle);
    rgb_to_tensor(&out, h, w)
}

fn rgb_to_tensor(img: &ImageBuffer<Rgb<u8>, Vec<u8>>, h: usize, w: usize) -> ImageTensor {
    let plane = h * w;
    let mut data = vec![0.0f32; 3 * plane];
    for (i, px) in img.pixels().enumerate() {
        for c in 0..3 {
            data[c * plane + i] = px.0[c] as f32 / 255.0;
        }
    }
    ImageTensor::new(h, w, data)
}

/// Loads one scene: training-class semantics, instances renumbered 1..C in
/// row-major order of first appearance, and metric depth from disparity.
pub fn load_cityscapes_sample(
    paths: &CityscapesPaths,
    mapping: ClassMapping,
    num_classes: usize,
) -> Result<Sample> {
    let camera = paths
        .camera
        .ok_or_else(|| Error::Config(format!("missing camera parameters for {}", paths.id)))?;
    let image = load_image(&paths.image)?;
    let labels = decode_luma8(&paths.semantic_labels)?;
    let raw_instances = decode_luma16(&paths.instance_labels)?;
    let disparity = decode_luma16(&paths.disparity)?;
    let shape = (image.height(), image.width());
    for (name, s) in [
        ("semantic labels", labels.shape()),
        ("instance labels", raw_instances.shape()),
        ("disparity", disparity.shape()),
    ] {
        if s != shape {
            return Err(Error::Shape(format!(
                "{}: {name} {s:?} differ from image {shape:?}",
                paths.id
            )));
        }
    }
    let semantic = SemanticMap(labels.map(|&l| mapping.to_train(l, num_classes)));
    let mut renumber: Vec<(u16, u32)> = Vec::new();
    let ids: Vec<u32> = raw_instances
        .data()
        .iter()
        .map(|&raw| {
            let Some((class, _)) = decode_instance_value(raw as u32) else {
                return 0;
            };
            if class > u8::MAX as u32 || mapping.to_train(class as u8, num_classes) == IGNORE_LABEL {
                return 0;
            }
            match renumber.iter().find(|(r, _)| *r == raw) {
                Some((_, id)) => *id,
                None => {
                    let id = renumber.len() as u32 + 1;
                    renumber.push((raw, id));
                    id
                }
            }
        })
        .collect();
    let instances = InstanceMap(Grid::from_vec(shape.0, shape.1, ids));
    let depth = disparity_map_to_depth(&disparity, &camera);
    Ok(Sample {
        id: paths.id.clone(),
        image,
        semantic,
        instances,
        depth,
    })
}

/// Writes a sample as the four-file layout understood by
/// [`load_cityscapes_sample`].
pub fn export_sample(
    sample: &Sample,
    dir: &Path,
    mapping: ClassMapping,
    camera: &CameraParams,
) -> Result<CityscapesPaths> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let (h, w) = sample.shape();
    let paths = CityscapesPaths {
        id: sample.id.clone(),
        image: dir.join(format!("{}{IMAGE_SUFFIX}", sample.id)),
        semantic_labels: dir.join(format!("{}{LABEL_SUFFIX}", sample.id)),
        instance_labels: dir.join(format!("{}{INSTANCE_SUFFIX}", sample.id)),
        disparity: dir.join(format!("{}{DISPARITY_SUFFIX}", sample.id)),
        camera: Some(*camera),
    };
    let mut rgb = ImageBuffer::<Rgb<u8>, Vec<u8>>::new(w as u32, h as u32);
    for (x, y, px) in rgb.enumerate_pixels_mut() {
        let v = sample.image.pixel(y as usize, x as usize);
        *px = Rgb(v.map(|c| (c.clamp(0.0, 1.0) * 255.0).round() as u8));
    }
    save_png(&rgb, &paths.image)?;
    let labels: Vec<u8> = sample
        .semantic
        .data()
        .iter()
        .map(|&t| if t == IGNORE_LABEL { 0 } else { mapping.to_label(t) })
        .collect();
    save_png(&gray8(w, h, labels), &paths.semantic_labels)?;
    let classes = sample.instance_classes();
    let inst: Vec<u16> = sample
        .instances
        .data()
        .iter()
        .zip(sample.semantic.data())
        .map(|(&id, &t)| {
            if id > 0 {
                let label = mapping.to_label(classes[id as usize]) as u32;
                (label * INSTANCE_ENCODING + id) as u16
            } else if t == IGNORE_LABEL {
                0
            } else {
                mapping.to_label(t) as u16
            }
        })
        .collect();
    save_png(&gray16(w, h, inst), &paths.instance_labels)?;
    let disp: Vec<u16> = (0..h * w)
        .map(|i| match sample.depth.at(i) {
            Some(d) => encode_disparity(depth_to_disparity(d as f64, camera)),
            None => 0,
        })
        .collect();
    save_png(&gray16(w, h, disp), &paths.disparity)?;
    Ok(paths)
}

pub(crate) fn gray8(w: usize, h: usize, data: Vec<u8>) -> ImageBuffer<Luma<u8>, Vec<u8>> {
    ImageBuffer::from_raw(w as u32, h as u32, data).expect("buffer matches dimensions")
}

pub(crate) fn gray16(w: usize, h: usize, data: Vec<u16>) -> ImageBuffer<Luma<u16>, Vec<u16>> {
    ImageBuffer::from_raw(w as u32, h as u32, data).expect("buffer matches dimensions")
}

pub(crate) fn save_png<'a>(img: impl Into<PngSource<'a>>, path: &Path) -> Result<()> {
    img.into().save(path)
}

/// Borrowed image buffer of one of the pixel formats written by this crate.
pub(crate) enum PngSource<'a> {
    Rgb8(&'a ImageBuffer<Rgb<u8>, Vec<u8>>),
    Gray8(&'a ImageBuffer<Luma<u8>, Vec<u8>>),
    Gray16(&'a ImageBuffer<Luma<u16>, Vec<u16>>),
}

impl PngSource<'_> {
    fn save(&self, path: &Path) -> Result<()> {
        let r = match self {
            PngSource::Rgb8(i) => i.save_with_format(path, image::ImageFormat::Png),
            PngSource::Gray8(i) => i.save_with_format(path, image::ImageFormat::Png),
            PngSource::Gray16(i) => i.save_with_format(path, image::ImageFormat::Png),
        };
        r.map_err(|e| Error::Decode {
            path: path.to_path_buf(),
            message: e.to_string(),
        })
    }
}

impl<'a> From<&'a ImageBuffer<Rgb<u8>, Vec<u8>>> for PngSource<'a> {
    fn from(i: &'a ImageBuffer<Rgb<u8>, Vec<u8>>) -> Self {
        PngSource::Rgb8(i)
    }
}

impl<'a> From<&'a ImageBuffer<Luma<u8>, Vec<u8>>> for PngSource<'a> {
    fn from(i: &'a ImageBuffer<Luma<u8>, Vec<u8>>) -> Self {
        PngSource::Gray8(i)
    }
}

impl<'a> From<&'a ImageBuffer<Luma<u16>, Vec<u16>>> for PngSource<'a> {
    fn from(i: &'a ImageBuffer<Luma<u16>, Vec<u16>>) -> Self {
        PngSource::Gray16(i)
    }
}

/// Sample directories under `split_dir`, each holding the four files.
pub fn sample_dir_paths(split_dir: &Path, camera: Option<CameraParams>) -> Result<Vec<CityscapesPaths>> {
    let mut dirs: Vec<PathBuf> = fs::read_dir(split_dir)
        .map_err(|e| Error::io(split_dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_dir())
        .collect();
    dirs.sort();
    let mut out = Vec::new();
    for dir in dirs {
        let image = find_with_suffix(&dir, IMAGE_SUFFIX)?;
        let name = image.file_name().and_then(|n| n.to_str()).unwrap_or_default();
        let id = name.trim_end_matches(IMAGE_SUFFIX).to_string();
        out.push(paths_for(&id, &dir, &dir, &dir, &dir, camera)?);
    }
    Ok(out)
}

fn find_with_suffix(dir: &Path, suffix: &str) -> Result<PathBuf> {
    let entries = fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    for e in entries.flatten() {
        let p = e.path();
        if p.file_name().and_then(|n| n.to_str()).is_some_and(|n| n.ends_with(suffix)) {
            return Ok(p);
        }
    }
    Err(Error::io(
        dir.join(format!("*{suffix}")),
        std::io::Error::from(std::io::ErrorKind::NotFound),
    ))
}

fn paths_for(
    id: &str,
    image_dir: &Path,
    gt_dir: &Path,
    disp_dir: &Path,
    _root: &Path,
    camera: Option<CameraParams>,
) -> Result<CityscapesPaths> {
    let p = CityscapesPaths {
        id: id.to_string(),
        image: image_dir.join(format!("{id}{IMAGE_SUFFIX}")),
        semantic_labels: gt_dir.join(format!("{id}{LABEL_SUFFIX}")),
        instance_labels: gt_dir.join(format!("{id}{INSTANCE_SUFFIX}")),
        disparity: disp_dir.join(format!("{id}{DISPARITY_SUFFIX}")),
        camera,
    };
    for f in [&p.image, &p.semantic_labels, &p.instance_labels, &p.disparity] {
        if !f.exists() {
            return Err(Error::io(f, std::io::Error::from(std::io::ErrorKind::NotFound)));
        }
    }
    Ok(p)
}

/// `leftImg8bit/<split>/<city>/*_leftImg8bit.png` with the matching
/// `gtFine/` and `disparity/` files.
pub fn cityscapes_paths(root: &Path, split: &str, camera: Option<CameraParams>) -> Result<Vec<CityscapesPaths>> {
    let img_root = root.join("leftImg8bit").join(split);
    let mut cities: Vec<PathBuf> = fs::read_dir(&img_root)
        .map_err(|e| Error::io(&img_root, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_dir())
        .collect();
    cities.sort();
    let mut out = Vec::new();
    for city_dir in cities {
        let city = city_dir.file_name().unwrap_or_default().to_owned();
        let mut files: Vec<String> = fs::read_dir(&city_dir)
            .map_err(|e| Error::io(&city_dir, e))?
            .filter_map(|e| e.ok())
            .filter_map(|e| e.file_name().to_str().map(str::to_string))
            .filter(|n| n.ends_with(IMAGE_SUFFIX))
            .collect();
        files.sort();
        for f in files {
            let id = f.trim_end_matches(IMAGE_SUFFIX);
            out.push(paths_for(
                id,
                &city_dir,
                &root.join("gtFine").join(split).join(&city),
                &root.join("disparity").join(split).join(&city),
                root,
                camera,
            )?);
        }
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Layout {
    Cityscapes,
    SampleDirs,
}

fn default_c_hyper() -> f64 {
    1.02
}

/// Key-value dataset description. Relative `root` paths resolve against
/// the directory holding the config file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetConfig {
    pub root: PathBuf,
    pub layout: Layout,
    pub class_mapping: ClassMapping,
    pub num_classes: usize,
    pub thing_classes: Vec<u8>,
    pub drivable_classes: Vec<u8>,
    pub car_class: u8,
    #[serde(default)]
    pub category_map: Option<Vec<usize>>,
    #[serde(default)]
    pub class_names: Option<Vec<String>>,
    #[serde(default)]
    pub focal_px: Option<f64>,
    #[serde(default)]
    pub baseline_m: Option<f64>,
    #[serde(default = "default_c_hyper")]
    pub c_hyper: f64,
    /// Smallest instance the clustering reports. When absent it is scaled
    /// from 100 pixels at 512x1024.
    #[serde(default)]
    pub min_cluster_pixels: Option<usize>,
}

impl DatasetConfig {
    pub fn cityscapes(root: impl Into<PathBuf>, focal_px: f64, baseline_m: f64) -> Self {
        Self {
            root: root.into(),
            layout: Layout::Cityscapes,
            class_mapping: ClassMapping::Cityscapes19,
            num_classes: 19,
            thing_classes: (11..=18).collect(),
            drivable_classes: vec![0],
            car_class: 13,
            category_map: Some(CITYSCAPES_CATEGORIES.to_vec()),
            class_names: Some(CITYSCAPES_CLASS_NAMES.iter().map(|s| s.to_string()).collect()),
            focal_px: Some(focal_px),
            baseline_m: Some(baseline_m),
            c_hyper: default_c_hyper(),
            min_cluster_pixels: None,
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg: DatasetConfig = toml::from_str(&text)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        if cfg.root.is_relative() {
            let base = path.parent().unwrap_or(Path::new("."));
            cfg.root = base.join(&cfg.root);
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = toml::to_string(self).map_err(|e| Error::Config(e.to_string()))?;
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    /// Clustering settings for `h x w` predictions.
    pub fn clustering_params(&self, bandwidth: f64, h: usize, w: usize) -> ClusteringParams {
        let mut p = ClusteringParams::for_resolution(bandwidth, h, w);
        if let Some(n) = self.min_cluster_pixels {
            p.min_cluster_pixels = n;
        }
        p
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 || self.num_classes > IGNORE_LABEL as usize {
            return Err(Error::Config(format!("num_classes {} out of range", self.num_classes)));
        }
        for &c in self.thing_classes.iter().chain(&self.drivable_classes).chain([&self.car_class]) {
            if c as usize >= self.num_classes {
                return Err(Error::Config(format!("class {c} exceeds num_classes")));
            }
        }
        if self.thing_classes.is_empty() || self.drivable_classes.is_empty() {
            return Err(Error::Config("thing and drivable class lists must be non-empty".into()));
        }
        if self.min_cluster_pixels == Some(0) {
            return Err(Error::Config("min_cluster_pixels must be at least 1".into()));
        }
        if !self.thing_classes.contains(&self.car_class) {
            return Err(Error::Config("car_class must be a thing class".into()));
        }
        if let Some(m) = &self.category_map {
            if m.len() != self.num_classes {
                return Err(Error::Config("category_map must cover every class".into()));
            }
        }
        if !(self.c_hyper > 0.0) {
            return Err(Error::Config("c_hyper must be positive".into()));
        }
        Ok(())
    }

    pub fn camera(&self) -> Result<CameraParams> {
        match (self.focal_px, self.baseline_m) {
            (Some(f), Some(b)) => CameraParams::new(f, b),
            _ => Err(Error::Config("dataset config lacks focal_px/baseline_m".into())),
        }
    }

    pub fn categories(&self) -> Vec<usize> {
        self.category_map
            .clone()
            .unwrap_or_else(|| (0..self.num_classes).collect())
    }

    pub fn class_name(&self, k: usize) -> String {
        self.class_names
            .as_ref()
            .and_then(|n| n.get(k).cloned())
            .unwrap_or_else(|| format!("class{k}"))
    }

    pub fn discover(&self, split: &str) -> Result<Vec<CityscapesPaths>> {
        let camera = self.camera().ok();
        match self.layout {
            Layout::Cityscapes => cityscapes_paths(&self.root, split, camera),
            Layout::SampleDirs => sample_dir_paths(&self.root.join(split), camera),
        }
    }

    /// Loads and validates every sample of a split.
    pub fn load_split(&self, split: &str) -> Result<Vec<Sample>> {
        self.camera()?;
        let paths = self.discover(split)?;
        if paths.is_empty() {
            return Err(Error::EmptySet("dataset split"));
        }
        paths
            .iter()
            .map(|p| {
                let s = load_cityscapes_sample(p, self.class_mapping, self.num_classes)?;
                let violations = validate_sample(&s, self.num_classes);
                if let Some(v) = violations.first() {
                    return Err(Error::InvalidInput(format!("{}: {v}", s.id)));
                }
                Ok(s)
            })
            .collect()
    }

    /// Class weights for a split, with frequencies cached next to the data.
    pub fn class_weights(&self, split: &str) -> Result<ClassWeightTable> {
        let paths = self.discover(split)?;
        let mut hasher = Sha256::new();
        hasher.update(format!("{:?}:{}", self.class_mapping, self.num_classes));
        for p in &paths {
            let bytes = fs::read(&p.semantic_labels).map_err(|e| Error::io(&p.semantic_labels, e))?;
            hasher.update(&bytes);
        }
        let key = hex::encode(hasher.finalize());
        let cache = self.root.join(format!("class_frequencies_{}.txt", &key[..16]));
        let freq = match read_frequency_cache(&cache, self.num_classes) {
            Some(f) => f,
            None => {
                let mut maps = Vec::with_capacity(paths.len());
                for p in &paths {
                    let labels = decode_luma8(&p.semantic_labels)?;
                    maps.push(SemanticMap(
                        labels.map(|&l| self.class_mapping.to_train(l, self.num_classes)),
                    ));
                }
                let f = label_frequencies(maps.iter(), self.num_classes);
                write_frequency_cache(&cache, &key, &f)?;
                f
            }
        };
        compute_class_weights(&freq, self.c_hyper)
    }
}

fn read_frequency_cache(path: &Path, num_classes: usize) -> Option<Vec<f64>> {
    let text = fs::read_to_string(path).ok()?;
    let mut freq = vec![f64::NAN; num_classes];
    for line in text.lines().filter(|l| !l.starts_with('#') && !l.trim().is_empty()) {
        let mut it = line.split_whitespace();
        let k: usize = it.next()?.parse().ok()?;
        let p: f64 = it.next()?.parse().ok()?;
        *freq.get_mut(k)? = p;
    }
    freq.iter().all(|p| p.is_finite()).then_some(freq)
}

fn write_frequency_cache(path: &Path, key: &str, freq: &[f64]) -> Result<()> {
    let mut text = format!("# label frequencies, dataset hash {key}\n");
    for (k, p) in freq.iter().enumerate() {
        text.push_str(&format!("{k} {p:e}\n"));
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Per-class pixel probability over non-ignored pixels.
pub fn label_frequencies<'a>(
    maps: impl IntoIterator<Item = &'a SemanticMap>,
    num_classes: usize,
) -> Vec<f64> {
    let mut counts = vec![0u64; num_classes];
    let mut total = 0u64;
    for m in maps {
        for &t in m.data() {
            if (t as usize) < num_classes {
                counts[t as usize] += 1;
                total += 1;
            }
        }
    }
    counts
        .iter()
        .map(|&c| if total == 0 { 0.0 } else { c as f64 / total as f64 })
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClassWeightTable {
    weights: Vec<f64>,
}

impl ClassWeightTable {
    pub fn uniform(num_classes: usize) -> Self {
        Self {
            weights: vec![1.0; num_classes],
        }
    }

    pub fn from_weights(weights: Vec<f64>) -> Result<Self> {
        if weights.iter().any(|w| !(w.is_finite() && *w > 0.0)) {
            return Err(Error::Config("class weights must be finite and positive".into()));
        }
        Ok(Self { weights })
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }
}

/// `w_k = 1 / ln(c_hyper + p_k)`.
pub fn compute_class_weights(frequency: &[f64], c_hyper: f64) -> Result<ClassWeightTable> {
    if frequency.iter().any(|p| !(0.0..=1.0).contains(p)) {
        return Err(Error::Config("class probabilities must lie in [0, 1]".into()));
    }
    let sum: f64 = frequency.iter().sum();
    if sum > 1.0 + 1e-9 {
        return Err(Error::Config(format!("class probabilities sum to {sum} > 1")));
    }
    let mut weights = Vec::with_capacity(frequency.len());
    for (k, p) in frequency.iter().enumerate() {
        let arg = c_hyper + p;
        if !(arg > 1.0) {
            return Err(Error::Config(format!(
                "c_hyper {c_hyper} <= 1 - p for class {k} (p = {p})"
            )));
        }
        weights.push(1.0 / arg.ln());
    }
    ClassWeightTable::from_weights(weights)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSceneConfig {
    pub size: usize,
    pub num_objects: usize,
    pub num_classes: usize,
    pub depth_range: (f64, f64),
    pub rng_seed: u64,
}

impl Default for SyntheticSceneConfig {
    fn default() -> Self {
        Self {
            size: 64,
            num_objects: 3,
            num_classes: 3,
            depth_range: (5.0, 15.0),
            rng_seed: 0,
        }
    }
}

impl SyntheticSceneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.size == 0 || self.size % SIZE_MULTIPLE != 0 {
            return Err(Error::Config(format!(
                "synthetic size {} is not a positive multiple of {SIZE_MULTIPLE}",
                self.size
            )));
        }
        if self.num_classes < 2 {
            return Err(Error::Config("synthetic scenes need at least 2 classes".into()));
        }
        let (lo, hi) = self.depth_range;
        if !(lo > 0.0 && hi >= lo && hi.is_finite()) {
            return Err(Error::Config(format!("bad depth range ({lo}, {hi})")));
        }
        Ok(())
    }

    /// The object class; all lower ids are background ("stuff").
    pub fn thing_class(&self) -> u8 {
        (self.num_classes - 1) as u8
    }

    /// Stuff class covering the lower part of the scene.
    pub fn road_class(&self) -> u8 {
        (self.num_classes - 2).max(0) as u8
    }

    pub fn dataset_config(&self, root: impl Into<PathBuf>, camera: CameraParams) -> DatasetConfig {
        DatasetConfig {
            root: root.into(),
            layout: Layout::SampleDirs,
            class_mapping: ClassMapping::Identity,
            num_classes: self.num_classes,
            thing_classes: vec![self.thing_class()],
            drivable_classes: vec![self.road_class()],
            car_class: self.thing_class(),
            category_map: None,
            class_names: None,
            focal_px: Some(camera.focal_px),
            baseline_m: Some(camera.baseline_m),
            c_hyper: default_c_hyper(),
            min_cluster_pixels: Some((self.min_object_pixels() / 2).max(1)),
        }
    }

    /// Area of the smallest object the generator can place.
    pub fn min_object_pixels(&self) -> usize {
        let (near, far) = self.depth_range;
        let (bw, bh) = object_size(near * self.size as f64 / 3.0, far, self.size);
        bw * bh
    }
}

fn object_size(scale: f64, depth: f64, size: usize) -> (usize, usize) {
    let bw = ((scale / depth).round() as usize).clamp(4, size);
    let bh = ((0.6 * bw as f64).round() as usize).max(3);
    (bw, bh)
}

const STUFF_COLORS: [[f32; 3]; 6] = [
    [0.55, 0.70, 0.90],
    [0.35, 0.35, 0.38],
    [0.30, 0.55, 0.25],
    [0.60, 0.55, 0.45],
    [0.45, 0.40, 0.60],
    [0.70, 0.70, 0.55],
];

const MAX_PLACEMENT_TRIES: usize = 500;

/// Deterministic toy street scene. The top stuff band is sky without depth;
/// the lowest stuff class is a road whose depth falls off linearly from the
/// horizon to the bottom row. Objects are boxes standing on the road at the
/// row matching their depth, sized inversely to it, with one free pixel
/// between any two boxes.
pub fn make_synthetic_scene(cfg: &SyntheticSceneConfig) -> Result<Sample> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.rng_seed);
    let s = cfg.size;
    let (near, far) = cfg.depth_range;
    let stuff = cfg.num_classes - 1;
    let thing = cfg.thing_class();
    let jitter = (s / 16).max(1);
    let horizon = (2 * s / 5 + rng.gen_range(0..jitter)).min(s - 2);

    let mut image = ImageTensor::zeros(s, s);
    let mut semantic = SemanticMap(Grid::filled(s, s, 0u8));
    let mut instances = InstanceMap(Grid::filled(s, s, 0u32));
    let mut depth = Grid::filled(s, s, 0.0f32);
    let mut valid = Grid::filled(s, s, false);

    let road_far = 1.5 * far;
    let road_near = 0.5 * near;
    let road_depth = |y: usize| -> f64 {
        let t = (y - horizon) as f64 / (s - 1 - horizon) as f64;
        road_far + (road_near - road_far) * t
    };
    let upper_bands = stuff.saturating_sub(1).max(1);
    for y in 0..s {
        let (class, d) = if stuff == 1 {
            (0u8, (y >= horizon).then(|| road_depth(y)))
        } else if y >= horizon {
            ((stuff - 1) as u8, Some(road_depth(y)))
        } else {
            let band = (y * upper_bands / horizon).min(upper_bands - 1);
            (band as u8, (band > 0).then_some(2.0 * far))
        };
        let base = STUFF_COLORS[class as usize % STUFF_COLORS.len()];
        let shade = 0.06 * (y as f32 / s as f32 - 0.5);
        for x in 0..s {
            let noise: f32 = rng.gen_range(-0.02..0.02);
            image.set_pixel(y, x, base.map(|c| (c + shade + noise).clamp(0.0, 1.0)));
            semantic.set(y, x, class);
            if let Some(d) = d {
                depth.set(y, x, d as f32);
                valid.set(y, x, true);
            }
        }
    }

    // (top, left, height, width, depth)
    let mut boxes: Vec<(usize, usize, usize, usize, f64)> = Vec::new();
    let scale = near * s as f64 / 3.0;
    for _ in 0..cfg.num_objects {
        let mut placed = false;
        for _ in 0..MAX_PLACEMENT_TRIES {
            let d = if far > near { rng.gen_range(near..far) } else { near };
            let (bw, bh) = object_size(scale, d, s);
            let t = (road_far - d) / (road_far - road_near);
            let bottom = horizon + (t * (s - 1 - horizon) as f64).round() as usize;
            if bottom + 1 < bh || bottom >= s {
                continue;
            }
            let top = bottom + 1 - bh;
            let left = rng.gen_range(0..=s - bw);
            let clear = boxes.iter().all(|&(t2, l2, h2, w2, _)| {
                top > t2 + h2 || t2 > top + bh || left > l2 + w2 || l2 > left + bw
            });
            if clear {
                boxes.push((top, left, bh, bw, d));
                placed = true;
                break;
            }
        }
        if !placed {
            return Err(Error::Placement {
                seed: cfg.rng_seed,
                num_objects: cfg.num_objects,
            });
        }
    }

    let ids: Vec<u32> = (1..=boxes.len() as u32).collect();
    let mut order: Vec<usize> = (0..boxes.len()).collect();
    // Far to near, so nearer objects are painted last.
    order.sort_by(|&a, &b| boxes[b].4.total_cmp(&boxes[a].4));
    for i in order {
        let (top, left, bh, bw, d) = boxes[i];
        let color = [
            rng.gen_range(0.65..1.0f32),
            rng.gen_range(0.0..0.35f32),
            rng.gen_range(0.0..0.35f32),
        ];
        for y in top..top + bh {
            for x in left..left + bw {
                image.set_pixel(y, x, color);
                semantic.set(y, x, thing);
                instances.set(y, x, ids[i]);
                depth.set(y, x, d as f32);
                valid.set(y, x, true);
            }
        }
    }

    Ok(Sample {
        id: format!("toy_{:06}", cfg.rng_seed),
        image,
        semantic,
        instances,
        depth: DepthMap { depth, valid },
    })
}

/// Generates `count` scenes with seeds `seed, seed + 1, ...` and writes them
/// under `out/<split>/` together with `out/dataset.toml`.
pub fn export_synthetic_dataset(
    out: &Path,
    split: &str,
    count: usize,
    base: &SyntheticSceneConfig,
    camera: CameraParams,
) -> Result<(DatasetConfig, Vec<Sample>)> {
    let mut samples = Vec::with_capacity(count);
    for i in 0..count {
        let cfg = SyntheticSceneConfig {
            rng_seed: base.rng_seed + i as u64,
            ..*base
        };
        let sample = make_synthetic_scene(&cfg)?;
        export_sample(
            &sample,
            &out.join(split).join(&sample.id),
            ClassMapping::Identity,
            &camera,
        )?;
        samples.push(sample);
    }
    let ds = base.dataset_config(".", camera);
    ds.save(&out.join("dataset.toml"))?;
    Ok((ds, samples))
}

/// Stacks sample images into an `[n, 3, h, w]` tensor.
pub fn stack_images<'a>(samples: impl IntoIterator<Item = &'a Sample>) -> Result<Tensor> {
    let mut shape: Option<(usize, usize)> = None;
    let mut data = Vec::new();
    let mut n = 0;
    for s in samples {
        let sh = s.shape();
        if *shape.get_or_insert(sh) != sh {
            return Err(Error::Shape("batch samples differ in size".into()));
        }
        data.extend_from_slice(s.image.data());
        n += 1;
    }
    let (h, w) = shape.ok_or(Error::EmptySet("image batch"))?;
    Ok(Tensor::from_vec(&[n, 3, h, w], data))
}

pub struct Batch<'a> {
    pub samples: Vec<&'a Sample>,
    pub images: Tensor,
}

pub struct BatchIter<'a> {
    samples: &'a [Sample],
    order: Vec<usize>,
    batch_size: usize,
    next: usize,
}

impl<'a> Iterator for BatchIter<'a> {
    type Item = Batch<'a>;

    fn next(&mut self) -> Option<Batch<'a>> {
        if self.next >= self.order.len() {
            return None;
        }
        let end = (self.next + self.batch_size).min(self.order.len());
        let samples: Vec<&Sample> = self.order[self.next..end]
            .iter()
            .map(|&i| &self.samples[i])
            .collect();
        self.next = end;
        let images = stack_images(samples.iter().copied()).expect("shapes checked up front");
        Some(Batch { samples, images })
    }
}

/// One pass over `samples` in a seeded random order; the last batch may be
/// smaller than `batch_size`.
pub fn iterate_batches(samples: &[Sample], batch_size: usize, shuffle_seed: u64) -> Result<BatchIter<'_>> {
    if samples.is_empty() {
        return Err(Error::EmptySet("sample set"));
    }
    if batch_size == 0 {
        return Err(Error::Config("batch size must be at least 1".into()));
    }
    let shape = samples[0].shape();
    if samples.iter().any(|s| s.shape() != shape) {
        return Err(Error::Shape("samples differ in spatial size".into()));
    }
    let mut order: Vec<usize> = (0..samples.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(shuffle_seed));
    Ok(BatchIter {
        samples,
        order,
        batch_size,
        next: 0,
    })
}
