//! Raster types, the class catalog, and elementwise label/mask primitives.
//!
//! Label maps are one-hot over `K` classes with at most one active channel per
//! pixel; an all-zero row means "unlabeled" and is skipped by every loss and
//! metric. They are stored as one class index per pixel (with
//! [`IGNORE_LABEL`] for the zero row), which is the same information.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::autograd::Tensor;
use crate::error::{Error, Result};

/// Sentinel for unlabeled pixels in integer rasters.
pub const IGNORE_LABEL: u8 = 255;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Domain {
    Source,
    Target,
}

impl Domain {
    pub fn other(self) -> Domain {
        match self {
            Domain::Source => Domain::Target,
            Domain::Target => Domain::Source,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum DomainTag {
    Source,
    Target,
    TranslatedSource,
    TranslatedTarget,
}

impl From<Domain> for DomainTag {
    fn from(d: Domain) -> Self {
        match d {
            Domain::Source => DomainTag::Source,
            Domain::Target => DomainTag::Target,
        }
    }
}

/// RGB raster in `[0, 1]`, stored channel-planar (`3 × H × W`).
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    height: usize,
    width: usize,
    data: Vec<f64>,
    tag: DomainTag,
}

impl Image {
    pub fn new(height: usize, width: usize, data: Vec<f64>, tag: DomainTag) -> Result<Self> {
        if height < 8 || width < 8 || !height.is_multiple_of(2) || !width.is_multiple_of(2) {
            return Err(Error::contract(format!(
                "image size {height}x{width} must be even and at least 8x8"
            )));
        }
        if data.len() != 3 * height * width {
            return Err(Error::contract(format!(
                "image {height}x{width} needs {} values, got {}",
                3 * height * width,
                data.len()
            )));
        }
        if let Some(v) = data.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::contract(format!("pixel value {v} outside [0, 1]")));
        }
        Ok(Self {
            height,
            width,
            data,
            tag,
        })
    }

    pub fn filled(height: usize, width: usize, value: f64, tag: DomainTag) -> Result<Self> {
        Self::new(height, width, vec![value; 3 * height * width], tag)
    }

    /// Extracts item `index` of an `[N, 3, H, W]` batch.
    pub fn from_batch(t: &Tensor, index: usize, tag: DomainTag) -> Result<Self> {
        let (n, c, h, w) = t.dims4();
        if c != 3 || index >= n {
            return Err(Error::contract(format!(
                "cannot take image {index} from batch {:?}",
                t.shape()
            )));
        }
        let plane = 3 * h * w;
        Self::new(
            h,
            w,
            t.data()[index * plane..(index + 1) * plane].to_vec(),
            tag,
        )
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn tag(&self) -> DomainTag {
        self.tag
    }

    pub fn with_tag(mut self, tag: DomainTag) -> Self {
        self.tag = tag;
        self
    }

    /// Planar data, channel-major.
    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn get(&self, channel: usize, row: usize, col: usize) -> f64 {
        self.data[(channel * self.height + row) * self.width + col]
    }

    /// `[1, 3, H, W]` tensor.
    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(vec![1, 3, self.height, self.width], self.data.clone())
    }

    /// Window of size `height x width` starting at `(top, left)`.
    pub fn crop(&self, top: usize, left: usize, height: usize, width: usize) -> Result<Image> {
        if top + height > self.height || left + width > self.width {
            return Err(Error::contract(format!(
                "crop {height}x{width} at ({top}, {left}) exceeds {}x{}",
                self.height, self.width
            )));
        }
        let mut data = Vec::with_capacity(3 * height * width);
        for c in 0..3 {
            for r in top..top + height {
                let start = (c * self.height + r) * self.width + left;
                data.extend_from_slice(&self.data[start..start + width]);
            }
        }
        Image::new(height, width, data, self.tag)
    }

    pub fn stack(images: &[&Image]) -> Tensor {
        let ts: Vec<Tensor> = images.iter().map(|i| i.to_tensor()).collect();
        Tensor::cat_batch(&ts.iter().collect::<Vec<_>>())
    }
}

/// Integer class raster; `255` marks ignored pixels.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct IndexMap {
    pub height: usize,
    pub width: usize,
    pub data: Vec<u8>,
}

impl IndexMap {
    pub fn new(height: usize, width: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != height * width {
            return Err(Error::contract(format!(
                "index map {height}x{width} needs {} values, got {}",
                height * width,
                data.len()
            )));
        }
        Ok(Self {
            height,
            width,
            data,
        })
    }

    /// Builds from nested rows, mainly for tests.
    pub fn from_rows(rows: &[&[u8]]) -> Result<Self> {
        let height = rows.len();
        let width = rows.first().map_or(0, |r| r.len());
        if rows.iter().any(|r| r.len() != width) {
            return Err(Error::contract("ragged rows"));
        }
        Self::new(height, width, rows.concat())
    }

    pub fn get(&self, row: usize, col: usize) -> u8 {
        self.data[row * self.width + col]
    }
}

/// One-hot label map with at most one active class per pixel.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct LabelMap {
    height: usize,
    width: usize,
    classes: usize,
    labels: Vec<u8>,
}

impl LabelMap {
    /// All pixels unlabeled.
    pub fn unlabeled(height: usize, width: usize, classes: usize) -> Self {
        Self {
            height,
            width,
            classes,
            labels: vec![IGNORE_LABEL; height * width],
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn num_classes(&self) -> usize {
        self.classes
    }

    pub fn num_pixels(&self) -> usize {
        self.labels.len()
    }

    /// Active class at a flat pixel index, `None` when unlabeled.
    pub fn class_of(&self, pixel: usize) -> Option<usize> {
        match self.labels[pixel] {
            IGNORE_LABEL => None,
            k => Some(k as usize),
        }
    }

    pub fn class_at(&self, row: usize, col: usize) -> Option<usize> {
        self.class_of(row * self.width + col)
    }

    /// One-hot entry `Y[h, w, k]`.
    pub fn onehot(&self, row: usize, col: usize, k: usize) -> u8 {
        u8::from(self.class_at(row, col) == Some(k))
    }

    /// Dense `H × W × K` one-hot array.
    pub fn to_onehot(&self) -> Vec<u8> {
        let mut out = vec![0u8; self.labels.len() * self.classes];
        for (p, &l) in self.labels.iter().enumerate() {
            if l != IGNORE_LABEL {
                out[p * self.classes + l as usize] = 1;
            }
        }
        out
    }

    /// Flat per-pixel class indices with `255` for unlabeled rows.
    pub fn indices(&self) -> &[u8] {
        &self.labels
    }

    pub fn to_index_map(&self) -> IndexMap {
        IndexMap {
            height: self.height,
            width: self.width,
            data: self.labels.clone(),
        }
    }

    pub fn crop(&self, top: usize, left: usize, height: usize, width: usize) -> Result<LabelMap> {
        if top + height > self.height || left + width > self.width {
            return Err(Error::contract(format!(
                "crop {height}x{width} at ({top}, {left}) exceeds {}x{}",
                self.height, self.width
            )));
        }
        let labels = (top..top + height)
            .flat_map(|r| {
                let start = r * self.width + left;
                self.labels[start..start + width].iter().copied()
            })
            .collect();
        Ok(Self {
            height,
            width,
            classes: self.classes,
            labels,
        })
    }

    pub fn labeled_count(&self) -> usize {
        self.labels.iter().filter(|&&l| l != IGNORE_LABEL).count()
    }

    pub(crate) fn from_indices_unchecked(
        height: usize,
        width: usize,
        classes: usize,
        labels: Vec<u8>,
    ) -> Self {
        debug_assert_eq!(labels.len(), height * width);
        Self {
            height,
            width,
            classes,
            labels,
        }
    }

    /// Rebuilds from a dense one-hot array, rejecting rows with more than one active channel.
    pub fn from_onehot(height: usize, width: usize, classes: usize, onehot: &[u8]) -> Result<Self> {
        if onehot.len() != height * width * classes {
            return Err(Error::contract("one-hot array has the wrong length"));
        }
        let mut labels = Vec::with_capacity(height * width);
        for (p, row) in onehot.chunks(classes).enumerate() {
            let active: Vec<usize> = (0..classes).filter(|&k| row[k] != 0).collect();
            if row.iter().any(|&v| v > 1) || active.len() > 1 {
                return Err(Error::Invariant(format!(
                    "pixel {p} is not a valid one-hot row"
                )));
            }
            labels.push(active.first().map_or(IGNORE_LABEL, |&k| k as u8));
        }
        Ok(Self {
            height,
            width,
            classes,
            labels,
        })
    }
}

/// Per-pixel softmax output, stored class-planar (`K × H × W`).
#[derive(Clone, Debug, PartialEq)]
pub struct ProbabilityMap {
    height: usize,
    width: usize,
    classes: usize,
    probs: Vec<f64>,
}

impl ProbabilityMap {
    pub fn new(height: usize, width: usize, classes: usize, probs: Vec<f64>) -> Result<Self> {
        if probs.len() != height * width * classes || classes == 0 {
            return Err(Error::contract(format!(
                "probability map {height}x{width}x{classes} has {} values",
                probs.len()
            )));
        }
        if probs.iter().any(|p| !(0.0..=1.0).contains(p)) {
            return Err(Error::Invariant("probability outside [0, 1]".into()));
        }
        let plane = height * width;
        for pix in 0..plane {
            let s: f64 = (0..classes).map(|k| probs[k * plane + pix]).sum();
            if (s - 1.0).abs() > 1e-5 {
                return Err(Error::Invariant(format!(
                    "probabilities at pixel {pix} sum to {s}"
                )));
            }
        }
        Ok(Self {
            height,
            width,
            classes,
            probs,
        })
    }

    /// Builds from per-pixel rows (`H × W × K` order), mainly for tests.
    pub fn from_pixels(height: usize, width: usize, pixels: &[&[f64]]) -> Result<Self> {
        let classes = pixels.first().map_or(0, |p| p.len());
        if pixels.len() != height * width || pixels.iter().any(|p| p.len() != classes) {
            return Err(Error::contract("pixel rows do not match the map size"));
        }
        let plane = height * width;
        let mut probs = vec![0.0; plane * classes];
        for (pix, row) in pixels.iter().enumerate() {
            for (k, &v) in row.iter().enumerate() {
                probs[k * plane + pix] = v;
            }
        }
        Self::new(height, width, classes, probs)
    }

    pub fn from_batch(t: &Tensor, index: usize) -> Result<Self> {
        let (n, k, h, w) = t.dims4();
        if index >= n {
            return Err(Error::contract("batch index out of range"));
        }
        let item = k * h * w;
        Self::new(h, w, k, t.data()[index * item..(index + 1) * item].to_vec())
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn num_classes(&self) -> usize {
        self.classes
    }

    pub fn num_pixels(&self) -> usize {
        self.height * self.width
    }

    pub fn prob(&self, pixel: usize, k: usize) -> f64 {
        self.probs[k * self.height * self.width + pixel]
    }

    pub fn data(&self) -> &[f64] {
        &self.probs
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(
            vec![1, self.classes, self.height, self.width],
            self.probs.clone(),
        )
    }
}

/// Binary `H × W` mask.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct BinaryMask {
    height: usize,
    width: usize,
    bits: Vec<u8>,
}

impl BinaryMask {
    pub fn new(height: usize, width: usize, bits: Vec<u8>) -> Result<Self> {
        if bits.len() != height * width {
            return Err(Error::contract("mask length does not match its size"));
        }
        if bits.iter().any(|&b| b > 1) {
            return Err(Error::Invariant("mask values must be 0 or 1".into()));
        }
        Ok(Self {
            height,
            width,
            bits,
        })
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            bits: vec![0; height * width],
        }
    }

    pub fn ones(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            bits: vec![1; height * width],
        }
    }

    pub fn from_rows(rows: &[&[u8]]) -> Result<Self> {
        let height = rows.len();
        let width = rows.first().map_or(0, |r| r.len());
        if rows.iter().any(|r| r.len() != width) {
            return Err(Error::contract("ragged rows"));
        }
        Self::new(height, width, rows.concat())
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn bits(&self) -> &[u8] {
        &self.bits
    }

    pub fn get(&self, pixel: usize) -> bool {
        self.bits[pixel] == 1
    }

    pub fn count(&self) -> usize {
        self.bits.iter().map(|&b| b as usize).sum()
    }

    fn zip_with(&self, other: &BinaryMask, f: impl Fn(u8, u8) -> u8) -> Result<BinaryMask> {
        if (self.height, self.width) != (other.height, other.width) {
            return Err(Error::contract(format!(
                "mask sizes {}x{} and {}x{} differ",
                self.height, self.width, other.height, other.width
            )));
        }
        Ok(BinaryMask {
            height: self.height,
            width: self.width,
            bits: self
                .bits
                .iter()
                .zip(&other.bits)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    /// Elementwise product.
    pub fn and(&self, other: &BinaryMask) -> Result<BinaryMask> {
        self.zip_with(other, |a, b| a & b)
    }

    pub fn or(&self, other: &BinaryMask) -> Result<BinaryMask> {
        self.zip_with(other, |a, b| a | b)
    }
}

/// Class names plus the head/tail split.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassCatalog {
    names: Vec<String>,
    tail: BTreeSet<usize>,
}

impl ClassCatalog {
    pub fn new(names: Vec<String>, tail: BTreeSet<usize>) -> Result<Self> {
        let k = names.len();
        if k == 0 || k > IGNORE_LABEL as usize {
            return Err(Error::Config(format!("class count {k} out of range")));
        }
        if tail.is_empty() || tail.len() >= k {
            return Err(Error::Config(
                "tail set must be a nonempty proper subset of the classes".into(),
            ));
        }
        if let Some(&bad) = tail.iter().find(|&&t| t >= k) {
            return Err(Error::Config(format!("tail class {bad} out of range")));
        }
        Ok(Self { names, tail })
    }

    /// Eight-class urban toy catalog; pole, sign and rider are the tail.
    pub fn toy() -> Self {
        let names = [
            "road",
            "sky",
            "building",
            "vegetation",
            "vehicle",
            "pole",
            "sign",
            "rider",
        ];
        Self::new(
            names.iter().map(|s| s.to_string()).collect(),
            [ToyClass::Pole, ToyClass::Sign, ToyClass::Rider]
                .into_iter()
                .map(|c| c as usize)
                .collect(),
        )
        .expect("toy catalog is valid")
    }

    pub fn num_classes(&self) -> usize {
        self.names.len()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tail_set(&self) -> &BTreeSet<usize> {
        &self.tail
    }

    pub fn is_tail(&self, k: usize) -> bool {
        self.tail.contains(&k)
    }

    /// `K_head`: 1 for head classes, 0 for tail classes.
    pub fn head_vector(&self) -> Vec<u8> {
        (0..self.names.len())
            .map(|k| u8::from(!self.tail.contains(&k)))
            .collect()
    }

    pub fn all_classes(&self) -> BTreeSet<usize> {
        (0..self.names.len()).collect()
    }
}

/// Class indices of [`ClassCatalog::toy`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[repr(u8)]
pub enum ToyClass {
    Road = 0,
    Sky = 1,
    Building = 2,
    Vegetation = 3,
    Vehicle = 4,
    Pole = 5,
    Sign = 6,
    Rider = 7,
}

/// Validates an integer raster against the catalog and one-hot encodes it.
pub fn onehot_encode(indices: &IndexMap, catalog: &ClassCatalog) -> Result<LabelMap> {
    let k = catalog.num_classes();
    if let Some((pixel, &value)) = indices
        .data
        .iter()
        .enumerate()
        .find(|(_, &v)| v != IGNORE_LABEL && v as usize >= k)
    {
        return Err(Error::InvalidLabel {
            value,
            pixel,
            classes: k,
        });
    }
    Ok(LabelMap {
        height: indices.height,
        width: indices.width,
        classes: k,
        labels: indices.data.clone(),
    })
}

/// Per-pixel argmax; ties go to the lowest class index.
pub fn argmax_class(p: &ProbabilityMap) -> IndexMap {
    let plane = p.num_pixels();
    let data = (0..plane)
        .map(|pix| {
            let mut best = 0;
            let mut best_p = p.prob(pix, 0);
            for k in 1..p.classes {
                let v = p.prob(pix, k);
                if v > best_p {
                    best = k;
                    best_p = v;
                }
            }
            best as u8
        })
        .collect();
    IndexMap {
        height: p.height,
        width: p.width,
        data,
    }
}

/// 1 where the pixel's label belongs to `classes`.
pub fn class_mask(y: &LabelMap, classes: &BTreeSet<usize>) -> BinaryMask {
    BinaryMask {
        height: y.height,
        width: y.width,
        bits: y
            .labels
            .iter()
            .map(|&l| u8::from(l != IGNORE_LABEL && classes.contains(&(l as usize))))
            .collect(),
    }
}
