//! Datasets, the class-balanced half split, batching and augmentation.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Labeled images stored as contiguous `channels × height × width` floats.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub name: String,
    pub num_classes: usize,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    images: Vec<f32>,
    labels: Vec<usize>,
}

impl Dataset {
    pub fn new(
        name: impl Into<String>,
        num_classes: usize,
        (channels, height, width): (usize, usize, usize),
        images: Vec<f32>,
        labels: Vec<usize>,
    ) -> Result<Self> {
        let sz = channels * height * width;
        if images.len() != sz * labels.len() {
            return Err(Error::Dataset(format!(
                "{} floats for {} samples of {channels}x{height}x{width}",
                images.len(),
                labels.len()
            )));
        }
        if let Some(&y) = labels.iter().find(|&&y| y >= num_classes) {
            return Err(Error::Dataset(format!("label {y} out of range for {num_classes} classes")));
        }
        Ok(Self {
            name: name.into(),
            num_classes,
            channels,
            height,
            width,
            images,
            labels,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn sample_len(&self) -> usize {
        self.channels * self.height * self.width
    }

    pub fn image(&self, i: usize) -> &[f32] {
        let sz = self.sample_len();
        &self.images[i * sz..(i + 1) * sz]
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut c = vec![0; self.num_classes];
        for &y in &self.labels {
            c[y] += 1;
        }
        c
    }

    pub fn subset(&self, indices: &[usize]) -> Dataset {
        let mut images = Vec::with_capacity(indices.len() * self.sample_len());
        for &i in indices {
            images.extend_from_slice(self.image(i));
        }
        Dataset {
            name: self.name.clone(),
            num_classes: self.num_classes,
            channels: self.channels,
            height: self.height,
            width: self.width,
            images,
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Splits {
    pub train: Dataset,
    pub test: Dataset,
}

/// Per class, a seeded shuffle sends `ceil(n/2)` samples to the first set
/// and the rest to the second. Both sides keep the input order.
pub fn balanced_half_split(data: &Dataset, seed: u64) -> Result<(Dataset, Dataset)> {
    let mut by_class: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, &y) in data.labels.iter().enumerate() {
        by_class.entry(y).or_default().push(i);
    }
    for class in 0..data.num_classes {
        let n = by_class.get(&class).map_or(0, Vec::len);
        if n < 2 {
            return Err(Error::Dataset(format!(
                "class {class} has {n} samples, the half split needs at least 2"
            )));
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut first = Vec::with_capacity(data.len() / 2 + data.num_classes);
    let mut second = Vec::with_capacity(data.len() / 2);
    for idx in by_class.values_mut() {
        idx.shuffle(&mut rng);
        let cut = idx.len().div_ceil(2);
        first.extend_from_slice(&idx[..cut]);
        second.extend_from_slice(&idx[cut..]);
    }
    first.sort_unstable();
    second.sort_unstable();
    Ok((data.subset(&first), data.subset(&second)))
}

/// Procedurally drawn shapes, one shape/color identity per class, under
/// position, scale and color jitter plus pixel noise and distractors.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticSpec {
    pub classes: usize,
    pub train_per_class: usize,
    pub test_per_class: usize,
    pub image_size: usize,
    pub seed: u64,
    pub noise: f32,
    pub color_jitter: f32,
    /// Shapes of random other classes drawn at reduced contrast.
    pub distractors: usize,
    /// Radius range as a fraction of the image side.
    pub min_scale: f32,
    pub max_scale: f32,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            classes: 4,
            train_per_class: 64,
            test_per_class: 16,
            image_size: 32,
            seed: 0,
            noise: 0.1,
            color_jitter: 0.05,
            distractors: 0,
            min_scale: 0.25,
            max_scale: 0.4,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum DatasetSpec {
    Synthetic(SyntheticSpec),
    /// `root/{train,test}/<class>/<image>`; class order is the sorted
    /// directory names.
    Directory { root: PathBuf, image_size: usize },
    Builtin { name: String },
}

impl Default for DatasetSpec {
    fn default() -> Self {
        DatasetSpec::Builtin {
            name: "shapes".into(),
        }
    }
}

/// Named synthetic datasets.
pub fn builtin(name: &str) -> Option<SyntheticSpec> {
    match name {
        "shapes" => Some(SyntheticSpec::default()),
        // fast, near-separable set for smoke runs
        "shapes-tiny" => Some(SyntheticSpec {
            classes: 4,
            train_per_class: 50,
            test_per_class: 25,
            image_size: 16,
            ..SyntheticSpec::default()
        }),
        // harder 10-class set where single small nets stay well below 100%
        "shapes-hard" => Some(SyntheticSpec {
            classes: 10,
            train_per_class: 60,
            test_per_class: 60,
            image_size: 16,
            noise: 0.6,
            color_jitter: 0.25,
            distractors: 1,
            min_scale: 0.2,
            max_scale: 0.35,
            seed: 0,
        }),
        _ => None,
    }
}

pub const BUILTIN_NAMES: [&str; 3] = ["shapes", "shapes-tiny", "shapes-hard"];

pub fn load_dataset(spec: &DatasetSpec) -> Result<Splits> {
    match spec {
        DatasetSpec::Synthetic(s) => synthetic_dataset(s),
        DatasetSpec::Builtin { name } => {
            let s = builtin(name).ok_or_else(|| {
                Error::Dataset(format!(
                    "unknown dataset `{name}` (known: {})",
                    BUILTIN_NAMES.join(", ")
                ))
            })?;
            synthetic_dataset(&s)
        }
        DatasetSpec::Directory { root, image_size } => Ok(Splits {
            train: load_image_dir(&root.join("train"), *image_size)?,
            test: load_image_dir(&root.join("test"), *image_size)?,
        }),
    }
}

#[derive(Clone, Copy, Debug)]
enum Shape {
    Square,
    Disk,
    Triangle,
    Cross,
    Ring,
    Diamond,
    HBar,
    VBar,
}

const SHAPES: [Shape; 8] = [
    Shape::Square,
    Shape::Disk,
    Shape::Triangle,
    Shape::Cross,
    Shape::Ring,
    Shape::Diamond,
    Shape::HBar,
    Shape::VBar,
];

impl Shape {
    /// Whether `(u, v)`, in units of the radius, lies inside the shape.
    fn contains(self, u: f32, v: f32) -> bool {
        let (au, av) = (u.abs(), v.abs());
        match self {
            Shape::Square => au <= 1.0 && av <= 1.0,
            Shape::Disk => u * u + v * v <= 1.0,
            Shape::Triangle => (-1.0..=1.0).contains(&v) && au <= (v + 1.0) / 2.0,
            Shape::Cross => (au <= 0.3 && av <= 1.0) || (av <= 0.3 && au <= 1.0),
            Shape::Ring => (0.25..=1.0).contains(&(u * u + v * v)),
            Shape::Diamond => au + av <= 1.0,
            Shape::HBar => av <= 0.35 && au <= 1.0,
            Shape::VBar => au <= 0.35 && av <= 1.0,
        }
    }
}

fn class_color(class: usize, classes: usize) -> [f32; 3] {
    // evenly spaced hues at full saturation
    let h = class as f32 / classes as f32 * 6.0;
    let x = 1.0 - ((h % 2.0) - 1.0).abs();
    match h as usize {
        0 => [1.0, x, 0.0],
        1 => [x, 1.0, 0.0],
        2 => [0.0, 1.0, x],
        3 => [0.0, x, 1.0],
        4 => [x, 0.0, 1.0],
        _ => [1.0, 0.0, x],
    }
}

struct Painter<'a> {
    img: &'a mut [f32],
    size: usize,
}

impl Painter<'_> {
    fn draw(&mut self, shape: Shape, color: [f32; 3], cx: f32, cy: f32, r: f32, alpha: f32) {
        let s = self.size;
        for y in 0..s {
            for x in 0..s {
                let u = (x as f32 + 0.5 - cx) / r;
                let v = (y as f32 + 0.5 - cy) / r;
                if shape.contains(u, v) {
                    for (ch, c) in color.iter().enumerate() {
                        let p = &mut self.img[ch * s * s + y * s + x];
                        *p = (1.0 - alpha) * *p + alpha * c;
                    }
                }
            }
        }
    }
}

fn render_split(spec: &SyntheticSpec, per_class: usize, rng: &mut ChaCha8Rng) -> (Vec<f32>, Vec<usize>) {
    let s = spec.image_size;
    let sz = 3 * s * s;
    let n = spec.classes * per_class;
    let mut images = vec![0.0f32; n * sz];
    let mut labels = Vec::with_capacity(n);
    let noise = Normal::new(0.0f32, spec.noise.max(0.0)).unwrap();
    let jitter = Normal::new(0.0f32, spec.color_jitter.max(0.0)).unwrap();
    let side = s as f32;
    let mut i = 0;
    for class in 0..spec.classes {
        for _ in 0..per_class {
            let img = &mut images[i * sz..(i + 1) * sz];
            let mut painter = Painter { img, size: s };
            for _ in 0..spec.distractors {
                let other = rng.gen_range(0..spec.classes);
                let r = side * rng.gen_range(0.1..0.2f32);
                let (cx, cy) = (rng.gen_range(0.0..side), rng.gen_range(0.0..side));
                painter.draw(SHAPES[other % SHAPES.len()], class_color(other, spec.classes), cx, cy, r, 0.5);
            }
            let r = side * rng.gen_range(spec.min_scale..=spec.max_scale);
            let cx = rng.gen_range(r.min(side / 2.0)..=(side - r).max(side / 2.0));
            let cy = rng.gen_range(r.min(side / 2.0)..=(side - r).max(side / 2.0));
            let mut color = class_color(class, spec.classes);
            for c in &mut color {
                *c += jitter.sample(rng);
            }
            painter.draw(SHAPES[class % SHAPES.len()], color, cx, cy, r, 1.0);
            for p in img_mut(&mut images, i, sz) {
                *p = (*p - 0.25) * 2.0 + noise.sample(rng);
            }
            labels.push(class);
            i += 1;
        }
    }
    (images, labels)
}

fn img_mut(images: &mut [f32], i: usize, sz: usize) -> &mut [f32] {
    &mut images[i * sz..(i + 1) * sz]
}

pub fn synthetic_dataset(spec: &SyntheticSpec) -> Result<Splits> {
    if spec.classes < 2 {
        return Err(Error::Dataset(format!("need at least 2 classes, got {}", spec.classes)));
    }
    if spec.image_size < 4 || spec.train_per_class == 0 || spec.test_per_class == 0 {
        return Err(Error::Dataset("image_size >= 4 and nonzero per-class counts required".into()));
    }
    if !(0.0 < spec.min_scale && spec.min_scale <= spec.max_scale) {
        return Err(Error::Dataset("need 0 < min_scale <= max_scale".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let dims = (3, spec.image_size, spec.image_size);
    let (tr, trl) = render_split(spec, spec.train_per_class, &mut rng);
    let (te, tel) = render_split(spec, spec.test_per_class, &mut rng);
    Ok(Splits {
        train: Dataset::new("synthetic", spec.classes, dims, tr, trl)?,
        test: Dataset::new("synthetic", spec.classes, dims, te, tel)?,
    })
}

fn load_image_dir(dir: &Path, image_size: usize) -> Result<Dataset> {
    let mut classes: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_dir())
        .collect();
    classes.sort();
    if classes.len() < 2 {
        return Err(Error::Dataset(format!("{}: need at least 2 class directories", dir.display())));
    }
    let sz = 3 * image_size * image_size;
    let mut images = Vec::new();
    let mut labels = Vec::new();
    for (label, class_dir) in classes.iter().enumerate() {
        let mut files: Vec<PathBuf> = std::fs::read_dir(class_dir)
            .map_err(|e| Error::io(class_dir, e))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.is_file())
            .collect();
        files.sort();
        if files.is_empty() {
            return Err(Error::Dataset(format!("{}: empty class directory", class_dir.display())));
        }
        for f in files {
            let img = image::open(&f)
                .map_err(|e| Error::Dataset(format!("{}: {e}", f.display())))?
                .resize_exact(image_size as u32, image_size as u32, image::imageops::FilterType::Triangle)
                .to_rgb8();
            let start = images.len();
            images.resize(start + sz, 0.0);
            for (x, y, px) in img.enumerate_pixels() {
                for ch in 0..3 {
                    let idx = start + ch * image_size * image_size + y as usize * image_size + x as usize;
                    images[idx] = (px.0[ch] as f32 / 255.0 - 0.5) / 0.25;
                }
            }
            labels.push(label);
        }
    }
    let name = dir.parent().and_then(|p| p.file_name()).map_or("images".into(), |n| n.to_string_lossy().into_owned());
    Dataset::new(name, classes.len(), (3, image_size, image_size), images, labels)
}

/// Training-time augmentation: zero-padded random crop and horizontal flip.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Augment {
    pub pad: usize,
    pub hflip: bool,
}

impl Default for Augment {
    fn default() -> Self {
        Self { pad: 2, hflip: true }
    }
}

impl Augment {
    pub fn none() -> Self {
        Self { pad: 0, hflip: false }
    }

    fn apply(&self, src: &[f32], dst: &mut [f32], (c, h, w): (usize, usize, usize), rng: &mut impl Rng) {
        let p = self.pad as isize;
        let dy = if p > 0 { rng.gen_range(-p..=p) } else { 0 };
        let dx = if p > 0 { rng.gen_range(-p..=p) } else { 0 };
        let flip = self.hflip && rng.gen_bool(0.5);
        for ch in 0..c {
            for y in 0..h {
                for x in 0..w {
                    let sy = y as isize + dy;
                    let xx = if flip { w - 1 - x } else { x };
                    let sx = xx as isize + dx;
                    let v = if sy >= 0 && sy < h as isize && sx >= 0 && sx < w as isize {
                        src[ch * h * w + sy as usize * w + sx as usize]
                    } else {
                        0.0
                    };
                    dst[ch * h * w + y * w + x] = v;
                }
            }
        }
    }
}

/// Shuffled mini-batches of one epoch. A trailing batch smaller than 2 is
/// dropped because batch statistics need two samples.
pub fn epoch_batches(n: usize, batch_size: usize, rng: &mut impl Rng) -> Vec<Vec<usize>> {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(rng);
    idx.chunks(batch_size.max(1))
        .filter(|c| c.len() >= 2)
        .map(<[usize]>::to_vec)
        .collect()
}

pub fn batches_per_epoch(n: usize, batch_size: usize) -> usize {
    let b = batch_size.max(1);
    let full = n / b;
    if n % b >= 2 {
        full + 1
    } else {
        full
    }
}

/// Gathers samples into one contiguous buffer, augmenting when asked.
pub fn gather(data: &Dataset, indices: &[usize], augment: Option<(&Augment, &mut ChaCha8Rng)>) -> (Vec<f32>, Vec<usize>) {
    let sz = data.sample_len();
    let mut out = vec![0.0; indices.len() * sz];
    let dims = (data.channels, data.height, data.width);
    match augment {
        Some((aug, rng)) => {
            for (k, &i) in indices.iter().enumerate() {
                aug.apply(data.image(i), &mut out[k * sz..(k + 1) * sz], dims, rng);
            }
        }
        None => {
            for (k, &i) in indices.iter().enumerate() {
                out[k * sz..(k + 1) * sz].copy_from_slice(data.image(i));
            }
        }
    }
    (out, indices.iter().map(|&i| data.labels[i]).collect())
}
