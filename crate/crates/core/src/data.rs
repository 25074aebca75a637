//! Dataset ingestion, ROI windowing, splitting and synthetic phantoms.
//!
//! On-disk layout: `root/images/<id>.pgm` paired with `root/masks/<id>.pgm`.
//! Every sample handed to the network is a 100×100 window of the source
//! image with the identical window of its mask.

use std::collections::{BTreeMap, HashMap};
use std::f64::consts::PI;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::pnm::{Gray, PnmError};
use crate::tensor::{Shape, Tensor};

/// Side of the square network input window.
pub const WINDOW: usize = 100;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("sample {id}: {source}")]
    Pnm { id: String, source: PnmError },
    #[error("sample {0}: image has no matching mask")]
    MissingMask(String),
    #[error("sample {0}: mask has no matching image")]
    OrphanMask(String),
    #[error("sample {id}: image is {image}, mask is {mask}")]
    DimensionMismatch { id: String, image: Shape, mask: Shape },
    #[error("sample {0}: mask is empty, cannot place the ROI automatically")]
    EmptyMask(String),
    #[error("sample {id}: source {source_shape} is smaller than the {WINDOW}x{WINDOW} window")]
    TooSmall { id: String, source_shape: Shape },
    #[error("sample {id}: window at ({y}, {x}) exceeds source {source_shape}")]
    WindowOutOfBounds { id: String, y: usize, x: usize, source_shape: Shape },
    #[error("sample {0}: mask is not binary")]
    NonBinaryMask(String),
    #[error("sample {0}: no entry in the ROI manifest")]
    NotInManifest(String),
    #[error("ROI manifest line {line}: {reason}")]
    Manifest { line: usize, reason: String },
    #[error("need at least 2 samples to split, got {0}")]
    TooFewSamples(usize),
    #[error("split ratio {0} must lie strictly between 0 and 1")]
    Ratio(f64),
    #[error("cannot resize a mask to {0}x{1}")]
    ResizeTarget(usize, usize),
    #[error("infeasible phantom spec: {0}")]
    Phantom(String),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> DataError + '_ {
    move |source| DataError::Io { path: path.to_path_buf(), source }
}

/// A full-size image/mask pair as loaded from disk.
#[derive(Debug, Clone, PartialEq)]
pub struct RawPair {
    pub id: String,
    pub image: Tensor<f32>,
    pub mask: Tensor<f32>,
}

/// One 100×100 network sample.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub id: String,
    pub image: Tensor<f32>,
    pub mask: Tensor<f32>,
    /// Top-left corner of the window in the source image.
    pub roi_origin: (usize, usize),
}

fn pgm_stems(dir: &Path) -> Result<BTreeMap<String, PathBuf>, DataError> {
    let mut out = BTreeMap::new();
    if !dir.is_dir() {
        return Ok(out);
    }
    for entry in fs::read_dir(dir).map_err(io_err(dir))? {
        let path = entry.map_err(io_err(dir))?.path();
        if path.extension().and_then(|e| e.to_str()) == Some("pgm") {
            if let Some(stem) = path.file_stem().and_then(|s| s.to_str()) {
                out.insert(stem.to_string(), path.clone());
            }
        }
    }
    Ok(out)
}

pub fn read_pgm(path: &Path, id: &str) -> Result<Gray, DataError> {
    let bytes = fs::read(path).map_err(io_err(path))?;
    Gray::decode(&bytes).map_err(|source| DataError::Pnm { id: id.to_string(), source })
}

/// Binarizes a mask at half of its largest sample value.
pub fn binarize_mask(g: &Gray) -> Tensor<f32> {
    let peak = g.samples.iter().copied().max().unwrap_or(0);
    let data = g
        .samples
        .iter()
        .map(|&s| if peak > 0 && 2 * s as u32 >= peak as u32 { 1.0 } else { 0.0 })
        .collect();
    Tensor::from_vec(Shape::new(g.height, g.width, 1), data).expect("validated dimensions")
}

/// Loads every `images/<id>.pgm` with its `masks/<id>.pgm`, sorted by id.
pub fn load_dataset(root: &Path) -> Result<Vec<RawPair>, DataError> {
    fs::metadata(root).map_err(io_err(root))?;
    let images = pgm_stems(&root.join("images"))?;
    let masks = pgm_stems(&root.join("masks"))?;
    if let Some(id) = masks.keys().find(|id| !images.contains_key(*id)) {
        return Err(DataError::OrphanMask(id.clone()));
    }
    let mut out = Vec::with_capacity(images.len());
    for (id, image_path) in &images {
        let mask_path = masks.get(id).ok_or_else(|| DataError::MissingMask(id.clone()))?;
        let image = read_pgm(image_path, id)?.to_unit();
        let mask = binarize_mask(&read_pgm(mask_path, id)?);
        if image.shape() != mask.shape() {
            return Err(DataError::DimensionMismatch { id: id.clone(), image: image.shape(), mask: mask.shape() });
        }
        out.push(RawPair { id: id.clone(), image, mask });
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RoiOrigin {
    /// Center the window on the mask's bounding box, clamped to the image.
    Auto,
    Manual(usize, usize),
}

/// Bounding box `(y0, x0, y1, x1)` (inclusive) of the foreground.
pub fn bounding_box(mask: &Tensor<f32>) -> Option<(usize, usize, usize, usize)> {
    let mut bb: Option<(usize, usize, usize, usize)> = None;
    for y in 0..mask.height() {
        for x in 0..mask.width() {
            if mask.at(y, x, 0) != 0.0 {
                bb = Some(match bb {
                    None => (y, x, y, x),
                    Some((y0, x0, y1, x1)) => (y0.min(y), x0.min(x), y1.max(y), x1.max(x)),
                });
            }
        }
    }
    bb
}

/// Window origin for `Auto` placement.
pub fn auto_origin(id: &str, mask: &Tensor<f32>) -> Result<(usize, usize), DataError> {
    let (y0, x0, y1, x1) = bounding_box(mask).ok_or_else(|| DataError::EmptyMask(id.to_string()))?;
    let place = |lo: usize, hi: usize, size: usize| {
        let center = (lo + hi + 1) / 2;
        center.saturating_sub(WINDOW / 2).min(size - WINDOW)
    };
    Ok((place(y0, y1, mask.height()), place(x0, x1, mask.width())))
}

/// Copies a `WINDOW`×`WINDOW` window starting at `origin`.
pub fn window(t: &Tensor<f32>, origin: (usize, usize)) -> Tensor<f32> {
    Tensor::from_fn(Shape::new(WINDOW, WINDOW, t.channels()), |y, x, c| t.at(origin.0 + y, origin.1 + x, c))
        .expect("window shape is valid")
}

/// Crops image and mask identically to the 100×100 network window.
pub fn crop_roi(id: &str, image: &Tensor<f32>, mask: &Tensor<f32>, origin: RoiOrigin) -> Result<Sample, DataError> {
    if image.shape() != mask.shape() {
        return Err(DataError::DimensionMismatch { id: id.into(), image: image.shape(), mask: mask.shape() });
    }
    let s = image.shape();
    if s.height < WINDOW || s.width < WINDOW {
        return Err(DataError::TooSmall { id: id.into(), source_shape: s });
    }
    if mask.data().iter().any(|&v| v != 0.0 && v != 1.0) {
        return Err(DataError::NonBinaryMask(id.into()));
    }
    let (y, x) = match origin {
        RoiOrigin::Auto => auto_origin(id, mask)?,
        RoiOrigin::Manual(y, x) => {
            if y + WINDOW > s.height || x + WINDOW > s.width {
                return Err(DataError::WindowOutOfBounds { id: id.into(), y, x, source_shape: s });
            }
            (y, x)
        }
    };
    Ok(Sample { id: id.into(), image: window(image, (y, x)), mask: window(mask, (y, x)), roi_origin: (y, x) })
}

/// Nearest-neighbour resampling of a binary mask; output stays binary.
pub fn resize_mask(mask: &Tensor<f32>, target: (usize, usize)) -> Result<Tensor<f32>, DataError> {
    let (h, w) = (mask.height(), mask.width());
    Tensor::from_fn(Shape::new(target.0, target.1, mask.channels()), |y, x, c| {
        let sy = ((2 * y + 1) * h) / (2 * target.0);
        let sx = ((2 * x + 1) * w) / (2 * target.1);
        mask.at(sy, sx, c)
    })
    .map_err(|_| DataError::ResizeTarget(target.0, target.1))
}

/// Where each sample's window comes from.
#[derive(Debug, Clone, PartialEq, Default)]
pub enum RoiSource {
    #[default]
    Auto,
    /// Explicit origins keyed by id.
    Manifest(HashMap<String, (usize, usize)>),
}

/// Parses `id y x` lines; blank lines and `#` comments are skipped.
pub fn parse_manifest(text: &str) -> Result<HashMap<String, (usize, usize)>, DataError> {
    let mut out = HashMap::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let err = |reason: &str| DataError::Manifest { line: i + 1, reason: reason.to_string() };
        let f: Vec<&str> = line.split_whitespace().collect();
        let [id, y, x] = f[..] else { return Err(err("expected `id y x`")) };
        let y = y.parse().map_err(|_| err("y is not a non-negative integer"))?;
        let x = x.parse().map_err(|_| err("x is not a non-negative integer"))?;
        if out.insert(id.to_string(), (y, x)).is_some() {
            return Err(err("duplicate id"));
        }
    }
    Ok(out)
}

/// Crops every pair to its network window.
pub fn preprocess(pairs: &[RawPair], roi: &RoiSource) -> Result<Vec<Sample>, DataError> {
    pairs
        .iter()
        .map(|p| {
            let origin = match roi {
                RoiSource::Auto => RoiOrigin::Auto,
                RoiSource::Manifest(m) => {
                    let &(y, x) = m.get(&p.id).ok_or_else(|| DataError::NotInManifest(p.id.clone()))?;
                    RoiOrigin::Manual(y, x)
                }
            };
            crop_roi(&p.id, &p.image, &p.mask, origin)
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct SplitDataset {
    pub train: Vec<Sample>,
    pub test: Vec<Sample>,
    pub seed: u64,
    pub ratio: f64,
}

/// Number of training samples for `n` samples at `ratio`; both sides keep at
/// least one sample.
pub fn train_count(n: usize, ratio: f64) -> usize {
    ((ratio * n as f64).round() as usize).clamp(1, n - 1)
}

/// Seeded shuffle, then the first `round(ratio·n)` samples train.
pub fn split(samples: Vec<Sample>, ratio: f64, seed: u64) -> Result<SplitDataset, DataError> {
    if samples.len() < 2 {
        return Err(DataError::TooFewSamples(samples.len()));
    }
    if !(ratio > 0.0 && ratio < 1.0) {
        return Err(DataError::Ratio(ratio));
    }
    let n_train = train_count(samples.len(), ratio);
    let mut order: Vec<usize> = (0..samples.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut slots: Vec<Option<Sample>> = samples.into_iter().map(Some).collect();
    let mut take = |i: &usize| slots[*i].take().expect("each index once");
    let train = order[..n_train].iter().map(&mut take).collect();
    let test = order[n_train..].iter().map(&mut take).collect();
    Ok(SplitDataset { train, test, seed, ratio })
}

/// Parameters of the synthetic phantom generator.
#[derive(Debug, Clone, PartialEq)]
pub struct PhantomSpec {
    pub image_size: usize,
    /// Semi-axis range of the tumor ellipse, in pixels.
    pub axis_min: f64,
    pub axis_max: f64,
    /// Intensity added inside the tumor.
    pub contrast: f64,
    /// Half-width of the uniform additive noise.
    pub noise: f64,
    /// Wavelength of the background texture, in pixels.
    pub texture_scale: f64,
    pub seed: u64,
}

impl Default for PhantomSpec {
    fn default() -> Self {
        PhantomSpec {
            image_size: 512,
            axis_min: 10.0,
            axis_max: 30.0,
            contrast: 0.35,
            noise: 0.08,
            texture_scale: 40.0,
            seed: 1,
        }
    }
}

impl PhantomSpec {
    pub fn validate(&self) -> Result<(), DataError> {
        let bad = |m: String| Err(DataError::Phantom(m));
        if self.image_size < WINDOW {
            return bad(format!("image_size {} is below the {WINDOW}-pixel window", self.image_size));
        }
        if !(self.axis_min >= 1.0 && self.axis_min <= self.axis_max) {
            return bad(format!("axis range [{}, {}] is invalid", self.axis_min, self.axis_max));
        }
        // the whole ellipse must fit in the image and in one network window
        if 2.0 * self.axis_max + 2.0 > WINDOW as f64 {
            return bad(format!("axis_max {} does not fit a {WINDOW}-pixel window", self.axis_max));
        }
        if !(self.noise >= 0.0 && self.contrast > self.noise && self.contrast <= 1.0) {
            return bad(format!("need 0 <= noise ({}) < contrast ({}) <= 1", self.noise, self.contrast));
        }
        if !(self.texture_scale > 0.0) {
            return bad(format!("texture_scale {} must be positive", self.texture_scale));
        }
        Ok(())
    }

    /// Parses `key = value` lines over the defaults.
    pub fn parse(text: &str) -> Result<Self, DataError> {
        let mut spec = PhantomSpec::default();
        for (i, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let err = |reason: String| DataError::Phantom(format!("line {}: {reason}", i + 1));
            let (k, v) = line.split_once('=').ok_or_else(|| err("expected key = value".into()))?;
            let (k, v) = (k.trim(), v.trim());
            let num = |v: &str| v.parse::<f64>().map_err(|e| err(format!("{k}: {e}")));
            match k {
                "image_size" => spec.image_size = v.parse().map_err(|e| err(format!("{k}: {e}")))?,
                "axis_min" => spec.axis_min = num(v)?,
                "axis_max" => spec.axis_max = num(v)?,
                "contrast" => spec.contrast = num(v)?,
                "noise" => spec.noise = num(v)?,
                "texture_scale" => spec.texture_scale = num(v)?,
                "seed" => spec.seed = v.parse().map_err(|e| err(format!("{k}: {e}")))?,
                _ => return Err(err(format!("unknown key {k:?}"))),
            }
        }
        spec.validate()?;
        Ok(spec)
    }
}

/// Ground-truth ellipse of one phantom, in pixel coordinates.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Ellipse {
    pub center_y: f64,
    pub center_x: f64,
    pub semi_a: f64,
    pub semi_b: f64,
    /// Rotation of the `a` axis from the x axis, radians.
    pub angle: f64,
}

impl Ellipse {
    pub fn contains(&self, y: f64, x: f64) -> bool {
        let (dy, dx) = (y - self.center_y, x - self.center_x);
        let (s, c) = self.angle.sin_cos();
        let u = dx * c + dy * s;
        let v = -dx * s + dy * c;
        (u / self.semi_a).powi(2) + (v / self.semi_b).powi(2) <= 1.0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Phantom {
    pub pair: RawPair,
    pub ellipse: Ellipse,
}

/// Renders phantom `index` of `spec` at full `image_size`.
pub fn render_phantom(spec: &PhantomSpec, index: usize) -> Result<Phantom, DataError> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(index as u64);
    let size = spec.image_size as f64;
    let margin = spec.axis_max + 1.0;
    let ellipse = Ellipse {
        center_y: rng.gen_range(margin..=size - 1.0 - margin),
        center_x: rng.gen_range(margin..=size - 1.0 - margin),
        semi_a: rng.gen_range(spec.axis_min..=spec.axis_max),
        semi_b: rng.gen_range(spec.axis_min..=spec.axis_max),
        angle: rng.gen_range(0.0..PI),
    };
    // three plane waves of random direction and phase
    let waves: Vec<(f64, f64, f64)> = (0..3)
        .map(|_| {
            let dir = rng.gen_range(0.0..2.0 * PI);
            let k = 2.0 * PI / (spec.texture_scale * rng.gen_range(0.75..1.5));
            (k * dir.sin(), k * dir.cos(), rng.gen_range(0.0..2.0 * PI))
        })
        .collect();
    let shape = Shape::new(spec.image_size, spec.image_size, 1);
    let mut mask = Vec::with_capacity(shape.len());
    let mut image = Vec::with_capacity(shape.len());
    for y in 0..spec.image_size {
        for x in 0..spec.image_size {
            let (fy, fx) = (y as f64, x as f64);
            let texture: f64 = waves.iter().map(|&(ky, kx, ph)| (ky * fy + kx * fx + ph).sin()).sum::<f64>() / 3.0;
            let inside = ellipse.contains(fy, fx);
            let noise = if spec.noise > 0.0 { rng.gen_range(-spec.noise..=spec.noise) } else { 0.0 };
            let v = 0.25 + 0.1 * texture + if inside { spec.contrast } else { 0.0 } + noise;
            image.push(v.clamp(0.0, 1.0) as f32);
            mask.push(if inside { 1.0 } else { 0.0 });
        }
    }
    let id = format!("phantom_{index:04}");
    Ok(Phantom {
        pair: RawPair {
            id,
            image: Tensor::from_vec(shape, image).expect("finite"),
            mask: Tensor::from_vec(shape, mask).expect("finite"),
        },
        ellipse,
    })
}

/// `n` phantoms cropped to network samples around their tumors.
pub fn generate_phantoms(spec: &PhantomSpec, n: usize) -> Result<Vec<Sample>, DataError> {
    if n == 0 {
        return Err(DataError::Phantom("phantom count must be at least 1".into()));
    }
    (0..n)
        .map(|i| {
            let p = render_phantom(spec, i)?.pair;
            crop_roi(&p.id, &p.image, &p.mask, RoiOrigin::Auto)
        })
        .collect()
}
