//! Procedural twin-domain street scenes plus dataset I/O and statistics.
//!
//! A scene's geometry depends only on `(seed, resolution)`; the domain only
//! changes how it is rendered. Source renderings use a flat palette with mild
//! pixel noise, target renderings a partly channel-rotated palette with a striped
//! texture and a gamma tone curve.

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::datamodel::{
    onehot_encode, ClassCatalog, Domain, DomainTag, Image, IndexMap, LabelMap, ToyClass,
    IGNORE_LABEL,
};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SceneSpec {
    pub seed: u64,
    pub height: usize,
    pub width: usize,
    pub domain: Domain,
    pub catalog: ClassCatalog,
}

impl SceneSpec {
    pub fn new(seed: u64, height: usize, width: usize, domain: Domain) -> Self {
        Self {
            seed,
            height,
            width,
            domain,
            catalog: ClassCatalog::toy(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetStats {
    pub pixel_counts: Vec<u64>,
    pub tail_instance_median: usize,
    pub class_names: Vec<String>,
}

#[derive(Clone, Copy, Debug)]
enum Shape {
    Rect {
        y0: isize,
        y1: isize,
        x0: isize,
        x1: isize,
    },
    Ellipse {
        cy: f64,
        cx: f64,
        ry: f64,
        rx: f64,
    },
}

impl Shape {
    fn contains(&self, y: usize, x: usize) -> bool {
        match *self {
            Shape::Rect { y0, y1, x0, x1 } => {
                let (y, x) = (y as isize, x as isize);
                y >= y0 && y < y1 && x >= x0 && x < x1
            }
            Shape::Ellipse { cy, cx, ry, rx } => {
                let dy = (y as f64 + 0.5 - cy) / ry;
                let dx = (x as f64 + 0.5 - cx) / rx;
                dy * dy + dx * dx <= 1.0
            }
        }
    }
}

struct Layer {
    class: ToyClass,
    shape: Shape,
    shade: f64,
}

const SOURCE_PALETTE: [[f64; 3]; 8] = [
    [0.42, 0.42, 0.44],
    [0.55, 0.75, 0.95],
    [0.58, 0.40, 0.30],
    [0.22, 0.55, 0.20],
    [0.15, 0.25, 0.70],
    [0.92, 0.85, 0.20],
    [0.92, 0.15, 0.15],
    [0.85, 0.30, 0.78],
];

/// Fraction of the channel rotation blended into the target palette.
const TARGET_HUE_MIX: f64 = 0.3;

fn palette(domain: Domain, class: usize) -> [f64; 3] {
    let [r, g, b] = SOURCE_PALETTE[class];
    match domain {
        Domain::Source => [r, g, b],
        Domain::Target => {
            let mix =
                |own: f64, rotated: f64| (1.0 - TARGET_HUE_MIX) * own + TARGET_HUE_MIX * rotated;
            [mix(r, g), mix(g, b), mix(b, r)]
        }
    }
}

fn scaled(frac: f64, extent: usize) -> isize {
    (frac * extent as f64).round() as isize
}

/// Geometry shared by both renderings of a seed.
fn layout(seed: u64, h: usize, w: usize) -> Vec<Layer> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5ce7_e5ee_d000_0001);
    let mut layers = Vec::new();
    let shade = |rng: &mut ChaCha8Rng| rng.gen_range(-0.08..0.08);
    let (hi, wi) = (h as isize, w as isize);
    let horizon = scaled(rng.gen_range(0.35..0.5), h);

    layers.push(Layer {
        class: ToyClass::Sky,
        shape: Shape::Rect {
            y0: 0,
            y1: horizon,
            x0: 0,
            x1: wi,
        },
        shade: shade(&mut rng),
    });
    layers.push(Layer {
        class: ToyClass::Road,
        shape: Shape::Rect {
            y0: horizon,
            y1: hi,
            x0: 0,
            x1: wi,
        },
        shade: shade(&mut rng),
    });
    for _ in 0..rng.gen_range(2..=4) {
        let bw = scaled(rng.gen_range(0.15..0.35), w).max(2);
        let x0 = rng.gen_range(-bw / 2..wi - bw / 2);
        let top = horizon - scaled(rng.gen_range(0.12..0.3), h);
        layers.push(Layer {
            class: ToyClass::Building,
            shape: Shape::Rect {
                y0: top,
                y1: horizon + scaled(0.05, h),
                x0,
                x1: x0 + bw,
            },
            shade: shade(&mut rng),
        });
    }
    for _ in 0..rng.gen_range(1..=3) {
        layers.push(Layer {
            class: ToyClass::Vegetation,
            shape: Shape::Ellipse {
                cy: horizon as f64 + rng.gen_range(-0.05..0.08) * h as f64,
                cx: rng.gen_range(0.0..w as f64),
                ry: rng.gen_range(0.05..0.1) * h as f64,
                rx: rng.gen_range(0.06..0.12) * w as f64,
            },
            shade: shade(&mut rng),
        });
    }
    let mut vehicles = Vec::new();
    for _ in 0..rng.gen_range(0..=2) {
        let vw = scaled(rng.gen_range(0.15..0.25), w).max(3);
        let vh = scaled(rng.gen_range(0.08..0.14), h).max(2);
        let y1 = rng.gen_range(horizon + scaled(0.15, h)..=hi - scaled(0.05, h));
        let x0 = rng.gen_range(0..(wi - vw).max(1));
        let r = (y1 - vh, y1, x0, x0 + vw);
        vehicles.push(r);
        layers.push(Layer {
            class: ToyClass::Vehicle,
            shape: Shape::Rect {
                y0: r.0,
                y1: r.1,
                x0: r.2,
                x1: r.3,
            },
            shade: shade(&mut rng),
        });
    }

    let pole_w = (w / 32).max(1) as isize;
    let sign_r = (w as f64 / 20.0).max(1.5);
    for _ in 0..rng.gen_range(0..=3) {
        let base = horizon + scaled(rng.gen_range(0.05..0.3), h);
        let top = base - scaled(rng.gen_range(0.25..0.4), h);
        let x0 = rng.gen_range(1..(wi - pole_w - 1).max(2));
        layers.push(Layer {
            class: ToyClass::Pole,
            shape: Shape::Rect {
                y0: top,
                y1: base,
                x0,
                x1: x0 + pole_w,
            },
            shade: shade(&mut rng),
        });
        if rng.gen_bool(0.6) {
            layers.push(Layer {
                class: ToyClass::Sign,
                shape: Shape::Ellipse {
                    cy: top as f64,
                    cx: x0 as f64 + pole_w as f64 / 2.0,
                    ry: sign_r,
                    rx: sign_r,
                },
                shade: shade(&mut rng),
            });
        }
    }

    let body_w = (w / 24).max(2) as isize;
    let body_h = (h / 12).max(3) as isize;
    for _ in 0..rng.gen_range(0..=2) {
        let (bottom, cx) = match vehicles.get(rng.gen_range(0..vehicles.len().max(1))) {
            Some(&(vy0, _, vx0, vx1)) if rng.gen_bool(0.7) => (vy0 + 1, (vx0 + vx1) / 2),
            _ => (
                rng.gen_range(horizon + scaled(0.1, h)..=hi - 1),
                rng.gen_range(2..wi - 2),
            ),
        };
        let x0 = cx - body_w / 2;
        let sd = shade(&mut rng);
        // Body, arms and head form a small cross-shaped glyph.
        for shape in [
            Shape::Rect {
                y0: bottom - body_h,
                y1: bottom,
                x0,
                x1: x0 + body_w,
            },
            Shape::Rect {
                y0: bottom - body_h + 1,
                y1: bottom - body_h + 2,
                x0: x0 - 1,
                x1: x0 + body_w + 1,
            },
            Shape::Rect {
                y0: bottom - body_h - 2,
                y1: bottom - body_h,
                x0,
                x1: x0 + body_w,
            },
        ] {
            layers.push(Layer {
                class: ToyClass::Rider,
                shape,
                shade: sd,
            });
        }
    }
    layers
}

/// Deterministic scene for `spec`.
pub fn generate_scene(spec: &SceneSpec) -> Result<(Image, LabelMap)> {
    let (h, w) = (spec.height, spec.width);
    if h < 8 || w < 8 {
        return Err(Error::InvalidSpec(format!(
            "resolution {h}x{w} is below 8x8"
        )));
    }
    if h % 2 != 0 || w % 2 != 0 {
        return Err(Error::InvalidSpec(format!(
            "resolution {h}x{w} must be even"
        )));
    }
    if spec.catalog.num_classes() < 8 {
        return Err(Error::InvalidSpec(
            "scene generator needs the eight toy classes".into(),
        ));
    }
    let layers = layout(spec.seed, h, w);
    let mut labels = vec![IGNORE_LABEL; h * w];
    let mut shades = vec![0.0; h * w];
    for layer in &layers {
        for y in 0..h {
            for x in 0..w {
                if layer.shape.contains(y, x) {
                    labels[y * w + x] = layer.class as u8;
                    shades[y * w + x] = layer.shade;
                }
            }
        }
    }

    let salt = match spec.domain {
        Domain::Source => 0x0051_0000_0000_0000,
        Domain::Target => 0x00a7_0000_0000_0000,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed ^ salt ^ 0x7e47_0e55);
    let (freq_y, freq_x, phase) = (
        rng.gen_range(0.6..1.2),
        rng.gen_range(0.3..0.9),
        rng.gen_range(0.0..std::f64::consts::TAU),
    );
    let plane = h * w;
    let mut data = vec![0.0; 3 * plane];
    for y in 0..h {
        for x in 0..w {
            let p = y * w + x;
            let class = labels[p] as usize;
            let base = palette(spec.domain, class);
            let sky_ramp = if class == ToyClass::Sky as usize {
                0.15 * (y as f64 / h as f64)
            } else {
                0.0
            };
            for (c, &b) in base.iter().enumerate() {
                let mut v = b * (1.0 + shades[p]) + sky_ramp;
                match spec.domain {
                    Domain::Source => v += rng.gen_range(-0.04..0.04),
                    Domain::Target => {
                        v += 0.07 * (freq_y * y as f64 + freq_x * x as f64 + phase).sin();
                        v += rng.gen_range(-0.03..0.03);
                        v = v.clamp(0.0, 1.0).powf(0.75);
                    }
                }
                data[c * plane + p] = (v.clamp(0.0, 1.0) * 255.0).round() / 255.0;
            }
        }
    }
    let image = Image::new(h, w, data, spec.domain.into())?;
    let labels = onehot_encode(&IndexMap::new(h, w, labels)?, &spec.catalog)?;
    Ok((image, labels))
}

/// Number of 4-connected components whose pixels belong to one class of `classes`.
/// Adjacent pixels of different classes belong to different components.
pub fn count_instances(y: &LabelMap, classes: &BTreeSet<usize>) -> usize {
    let (h, w) = (y.height(), y.width());
    let mut seen = vec![false; h * w];
    let mut count = 0;
    let mut stack = Vec::new();
    for start in 0..h * w {
        let Some(k) = y.class_of(start) else { continue };
        if seen[start] || !classes.contains(&k) {
            continue;
        }
        count += 1;
        seen[start] = true;
        stack.push(start);
        while let Some(p) = stack.pop() {
            let (r, c) = (p / w, p % w);
            let mut visit = |q: usize| {
                if !seen[q] && y.class_of(q) == Some(k) {
                    seen[q] = true;
                    stack.push(q);
                }
            };
            if r > 0 {
                visit(p - w);
            }
            if r + 1 < h {
                visit(p + w);
            }
            if c > 0 {
                visit(p - 1);
            }
            if c + 1 < w {
                visit(p + 1);
            }
        }
    }
    count
}

/// Lower median (the smaller middle value for even lengths).
pub fn lower_median(values: &[usize]) -> Option<usize> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_unstable();
    Some(v[(v.len() - 1) / 2])
}

pub fn compute_stats<'a>(
    labels: impl IntoIterator<Item = &'a LabelMap>,
    catalog: &ClassCatalog,
) -> Result<DatasetStats> {
    let k = catalog.num_classes();
    let mut pixel_counts = vec![0u64; k];
    let mut per_image = Vec::new();
    for y in labels {
        for p in 0..y.num_pixels() {
            if let Some(c) = y.class_of(p) {
                pixel_counts[c] += 1;
            }
        }
        per_image.push(count_instances(y, catalog.tail_set()));
    }
    let tail_instance_median = lower_median(&per_image).ok_or(Error::EmptyDataset)?;
    Ok(DatasetStats {
        pixel_counts,
        tail_instance_median,
        class_names: catalog.names().to_vec(),
    })
}

pub fn write_rgb_png(image: &Image, path: &Path) -> Result<()> {
    let (h, w) = (image.height(), image.width());
    let plane = h * w;
    let mut buf = Vec::with_capacity(3 * plane);
    for p in 0..plane {
        for c in 0..3 {
            buf.push((image.data()[c * plane + p] * 255.0).round() as u8);
        }
    }
    image::save_buffer(
        path,
        &buf,
        w as u32,
        h as u32,
        image::ExtendedColorType::Rgb8,
    )
    .map_err(|e| png_error(path, e))
}

pub fn read_rgb_png(path: &Path, tag: DomainTag) -> Result<Image> {
    let img = image::open(path).map_err(|e| png_error(path, e))?.to_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let plane = h * w;
    let mut data = vec![0.0; 3 * plane];
    for (p, px) in img.pixels().enumerate() {
        for c in 0..3 {
            data[c * plane + p] = px.0[c] as f64 / 255.0;
        }
    }
    Image::new(h, w, data, tag).map_err(|e| Error::Format {
        path: path.to_path_buf(),
        message: e.to_string(),
    })
}

pub fn write_index_png(map: &IndexMap, path: &Path) -> Result<()> {
    image::save_buffer(
        path,
        &map.data,
        map.width as u32,
        map.height as u32,
        image::ExtendedColorType::L8,
    )
    .map_err(|e| png_error(path, e))
}

pub fn read_index_png(path: &Path) -> Result<IndexMap> {
    let img = image::open(path).map_err(|e| png_error(path, e))?;
    let gray = match img {
        image::DynamicImage::ImageLuma8(g) => g,
        other => {
            return Err(Error::Format {
                path: path.to_path_buf(),
                message: format!("expected 8-bit single-channel PNG, got {:?}", other.color()),
            })
        }
    };
    IndexMap::new(
        gray.height() as usize,
        gray.width() as usize,
        gray.into_raw(),
    )
}

fn png_error(path: &Path, e: image::ImageError) -> Error {
    match e {
        image::ImageError::IoError(io) => Error::Io(io),
        other => Error::Format {
            path: path.to_path_buf(),
            message: other.to_string(),
        },
    }
}

fn png_stems(dir: &Path) -> Result<BTreeSet<String>> {
    let mut stems = BTreeSet::new();
    for entry in fs::read_dir(dir)? {
        let path = entry?.path();
        if path.extension().is_some_and(|e| e == "png") {
            if let Some(stem) = path.file_stem().and_then(|s| s.to_str()) {
                stems.insert(stem.to_string());
            }
        }
    }
    Ok(stems)
}

/// Reads `<root>/images/*.png` and `<root>/labels/*.png` pairs in stem order.
pub fn load_labeled_dataset(
    root: &Path,
    catalog: &ClassCatalog,
    tag: DomainTag,
) -> Result<Vec<(Image, LabelMap)>> {
    let (img_dir, lab_dir) = (root.join("images"), root.join("labels"));
    if !img_dir.exists() && !lab_dir.exists() {
        return Ok(Vec::new());
    }
    let images = if img_dir.exists() {
        png_stems(&img_dir)?
    } else {
        BTreeSet::new()
    };
    let labels = if lab_dir.exists() {
        png_stems(&lab_dir)?
    } else {
        BTreeSet::new()
    };
    if let Some(stem) = images.symmetric_difference(&labels).next() {
        let side = if images.contains(stem) {
            "label"
        } else {
            "image"
        };
        return Err(Error::DatasetIntegrity(format!(
            "{stem}: missing {side} counterpart"
        )));
    }
    images
        .iter()
        .map(|stem| {
            let img = read_rgb_png(&img_dir.join(format!("{stem}.png")), tag)?;
            let lab_path = lab_dir.join(format!("{stem}.png"));
            let idx = read_index_png(&lab_path)?;
            if (idx.height, idx.width) != (img.height(), img.width()) {
                return Err(Error::DatasetIntegrity(format!(
                    "{stem}: image and label sizes differ"
                )));
            }
            Ok((img, onehot_encode(&idx, catalog)?))
        })
        .collect()
}

/// Reads every image under `<root>/images` (labels are not required).
pub fn load_images(root: &Path, tag: DomainTag) -> Result<Vec<(String, Image)>> {
    let dir = root.join("images");
    if !dir.exists() {
        return Ok(Vec::new());
    }
    png_stems(&dir)?
        .into_iter()
        .map(|stem| {
            let img = read_rgb_png(&dir.join(format!("{stem}.png")), tag)?;
            Ok((stem, img))
        })
        .collect()
}

/// Writes scenes `seed_offset .. seed_offset + count` in the dataset layout.
pub fn write_dataset(
    root: &Path,
    seeds: impl IntoIterator<Item = u64>,
    height: usize,
    width: usize,
    domain: Domain,
) -> Result<Vec<PathBuf>> {
    let (img_dir, lab_dir) = (root.join("images"), root.join("labels"));
    fs::create_dir_all(&img_dir)?;
    fs::create_dir_all(&lab_dir)?;
    let mut written = Vec::new();
    for seed in seeds {
        let (img, lab) = generate_scene(&SceneSpec::new(seed, height, width, domain))?;
        let name = format!("{seed:06}.png");
        write_rgb_png(&img, &img_dir.join(&name))?;
        write_index_png(&lab.to_index_map(), &lab_dir.join(&name))?;
        written.push(img_dir.join(name));
    }
    Ok(written)
}

/// In-memory dataset of scenes for the given seeds.
pub fn generate_dataset(
    seeds: impl IntoIterator<Item = u64>,
    height: usize,
    width: usize,
    domain: Domain,
) -> Result<Vec<(Image, LabelMap)>> {
    seeds
        .into_iter()
        .map(|s| generate_scene(&SceneSpec::new(s, height, width, domain)))
        .collect()
}
