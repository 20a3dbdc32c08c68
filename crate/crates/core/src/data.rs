//! Synthetic segmentation data, augmentation, and on-disk formats.
//!
//! Images are single-channel, with elliptical blobs for each foreground class
//! `1..=K` drawn over a sinusoidally textured background. Masks carry the
//! exact blob geometry.
//!
//! File formats (little-endian, each closed by a CRC32 of all prior bytes):
//!
//! - tensor: `"AGT1"`, `u8` rank, `u32` dims, `f32` payload
//! - mask: `"AGM1"`, `u32` height, `u32` width, `u8` labels
//!
//! A dataset directory holds `images/NNNN.agt`, `masks/NNNN.agm` and a
//! `split.txt` with one `NNNN labeled|unlabeled` line per sample.

use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::codec::{read_file, write_file, Reader, Writer};
use crate::error::{Error, Result};
use crate::tensor::{ImageTensor, LabelMap};

pub const TENSOR_MAGIC: &[u8; 4] = b"AGT1";
pub const MASK_MAGIC: &[u8; 4] = b"AGM1";

const PLACEMENT_RETRIES: usize = 500;

/// One image with its label map.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub id: usize,
    pub image: ImageTensor,
    pub mask: LabelMap,
    pub labeled: bool,
}

/// Parameters of the synthetic generator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetSpec {
    pub count: usize,
    /// Image side length in pixels.
    pub size: usize,
    /// Number of foreground classes.
    pub classes: usize,
    pub labeled_fraction: f64,
    pub seed: u64,
    pub blobs_min: usize,
    pub blobs_max: usize,
    pub radius_min: f64,
    pub radius_max: f64,
    pub background_min: f64,
    pub background_max: f64,
    pub texture_amplitude: f64,
    /// Mean blob intensity ramps linearly from `foreground_min` (class 1)
    /// to `foreground_max` (class K).
    pub foreground_min: f64,
    pub foreground_max: f64,
    /// Per-blob uniform jitter around the class mean intensity.
    pub intensity_jitter: f64,
    pub noise_sigma: f64,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        Self {
            count: 200,
            size: 32,
            classes: 2,
            labeled_fraction: 0.05,
            seed: 0,
            blobs_min: 1,
            blobs_max: 2,
            radius_min: 3.0,
            radius_max: 6.0,
            background_min: 0.15,
            background_max: 0.4,
            texture_amplitude: 0.08,
            foreground_min: 0.55,
            foreground_max: 0.85,
            intensity_jitter: 0.05,
            noise_sigma: 0.08,
        }
    }
}

impl DatasetSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.count == 0 {
            return bad("dataset count must be at least 1".into());
        }
        if self.size < 4 || self.size % 4 != 0 {
            return bad(format!("image size must be a positive multiple of 4, got {}", self.size));
        }
        if self.classes == 0 || self.classes > 254 {
            return bad(format!("classes must lie in 1..=254, got {}", self.classes));
        }
        if !(self.labeled_fraction > 0.0 && self.labeled_fraction <= 1.0) {
            return bad(format!(
                "labeled_fraction must lie in (0, 1], got {}",
                self.labeled_fraction
            ));
        }
        if self.labeled_fraction * (self.count as f64) < 1.0 - 1e-9 {
            return bad("labeled_fraction · count must be at least 1".into());
        }
        if self.blobs_min == 0 || self.blobs_min > self.blobs_max {
            return bad("blob count range must satisfy 1 <= blobs_min <= blobs_max".into());
        }
        if !(self.radius_min > 0.0 && self.radius_min <= self.radius_max) {
            return bad("radius range must satisfy 0 < radius_min <= radius_max".into());
        }
        if 2.0 * self.radius_max + 2.0 > self.size as f64 {
            return bad(format!(
                "radius_max {} does not fit in a {}px image",
                self.radius_max, self.size
            ));
        }
        for (name, v) in [
            ("background_min", self.background_min),
            ("background_max", self.background_max),
            ("foreground_min", self.foreground_min),
            ("foreground_max", self.foreground_max),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return bad(format!("{name} must lie in [0, 1], got {v}"));
            }
        }
        if self.background_min > self.background_max || self.foreground_min > self.foreground_max {
            return bad("intensity ranges must be ordered".into());
        }
        for (name, v) in [
            ("texture_amplitude", self.texture_amplitude),
            ("intensity_jitter", self.intensity_jitter),
            ("noise_sigma", self.noise_sigma),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return bad(format!("{name} must be non-negative, got {v}"));
            }
        }
        Ok(())
    }

    /// `⌈labeled_fraction · count⌉`.
    pub fn labeled_count(&self) -> usize {
        // The small offset keeps exact products such as 0.05 · 200 from rounding up.
        ((self.labeled_fraction * self.count as f64) - 1e-9).ceil().max(0.0) as usize
    }

    fn class_intensity(&self, class: usize) -> f64 {
        if self.classes == 1 {
            return 0.5 * (self.foreground_min + self.foreground_max);
        }
        let t = (class - 1) as f64 / (self.classes - 1) as f64;
        self.foreground_min + t * (self.foreground_max - self.foreground_min)
    }
}

/// Generate `spec.count` samples; a pure function of `spec`.
pub fn generate(spec: &DatasetSpec) -> Result<Vec<Sample>> {
    spec.validate()?;
    let mut samples = (0..spec.count)
        .into_par_iter()
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
            rng.set_stream(i as u64 + 1);
            generate_one(spec, i, &mut rng)
        })
        .collect::<Result<Vec<_>>>()?;

    let mut order: Vec<usize> = (0..spec.count).collect();
    let mut split_rng = ChaCha8Rng::seed_from_u64(spec.seed);
    order.shuffle(&mut split_rng);
    for &i in &order[..spec.labeled_count()] {
        samples[i].labeled = true;
    }
    Ok(samples)
}

fn generate_one(spec: &DatasetSpec, id: usize, rng: &mut ChaCha8Rng) -> Result<Sample> {
    let n = spec.size;
    let mut image = vec![0.0f64; n * n];

    let base = rng.random_range(spec.background_min..=spec.background_max);
    let freq_y = rng.random_range(0.2..0.9);
    let freq_x = rng.random_range(0.2..0.9);
    let phase = rng.random_range(0.0..std::f64::consts::TAU);
    for y in 0..n {
        for x in 0..n {
            let t = (freq_y * y as f64 + freq_x * x as f64 + phase).sin();
            image[y * n + x] = base + spec.texture_amplitude * t;
        }
    }

    let mut mask = vec![0u8; n * n];
    for class in 1..=spec.classes {
        let blobs = rng.random_range(spec.blobs_min..=spec.blobs_max);
        for _ in 0..blobs {
            let intensity = spec.class_intensity(class)
                + spec.intensity_jitter * rng.random_range(-1.0..=1.0);
            place_blob(spec, rng, &mut mask, &mut image, class as u8, intensity).map_err(|e| {
                Error::Generation(format!("sample {id}, class {class}: {e}"))
            })?;
        }
    }

    if spec.noise_sigma > 0.0 {
        let normal = Normal::new(0.0, spec.noise_sigma).expect("valid sigma");
        for v in &mut image {
            *v += normal.sample(rng);
        }
    }
    for v in &mut image {
        *v = v.clamp(0.0, 1.0);
    }
    Ok(Sample {
        id,
        image: ImageTensor::from_f64(1, n, n, &image)?,
        mask: LabelMap::new(n, n, mask)?,
        labeled: false,
    })
}

fn place_blob(
    spec: &DatasetSpec,
    rng: &mut ChaCha8Rng,
    mask: &mut [u8],
    image: &mut [f64],
    label: u8,
    intensity: f64,
) -> std::result::Result<(), String> {
    let n = spec.size;
    let margin = spec.radius_max;
    for _ in 0..PLACEMENT_RETRIES {
        let cy = rng.random_range(margin..=(n as f64 - 1.0 - margin));
        let cx = rng.random_range(margin..=(n as f64 - 1.0 - margin));
        let ry = rng.random_range(spec.radius_min..=spec.radius_max);
        let rx = rng.random_range(spec.radius_min..=spec.radius_max);
        let angle = rng.random_range(0.0..std::f64::consts::PI);
        let (s, c) = angle.sin_cos();
        let inside = |y: usize, x: usize| {
            let dy = y as f64 - cy;
            let dx = x as f64 - cx;
            let u = (dx * c + dy * s) / rx;
            let v = (-dx * s + dy * c) / ry;
            u * u + v * v <= 1.0
        };
        let pixels: Vec<usize> = (0..n * n).filter(|&m| inside(m / n, m % n)).collect();
        // Blobs keep a one-pixel gap to earlier blobs so boundaries stay distinct.
        let clashes = pixels.iter().any(|&m| {
            let (y, x) = (m / n, m % n);
            (y.saturating_sub(1)..=(y + 1).min(n - 1))
                .any(|yy| (x.saturating_sub(1)..=(x + 1).min(n - 1)).any(|xx| mask[yy * n + xx] != 0))
        });
        if pixels.is_empty() || clashes {
            continue;
        }
        for m in pixels {
            mask[m] = label;
            image[m] = intensity;
        }
        return Ok(());
    }
    Err(format!("no free position for a blob after {PLACEMENT_RETRIES} attempts"))
}

/// Mask-affecting augmentation: optional horizontal flip, then an integer
/// translation with zero padding.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct Geometric {
    pub flip: bool,
    pub dy: i32,
    pub dx: i32,
}

pub const MAX_SHIFT: i32 = 2;

impl Geometric {
    pub fn draw<R: Rng>(rng: &mut R) -> Self {
        Self {
            flip: rng.random_bool(0.5),
            dy: rng.random_range(-MAX_SHIFT..=MAX_SHIFT),
            dx: rng.random_range(-MAX_SHIFT..=MAX_SHIFT),
        }
    }

    fn source(&self, y: usize, x: usize, h: usize, w: usize) -> Option<usize> {
        let sy = y as i64 - self.dy as i64;
        let sx = x as i64 - self.dx as i64;
        if sy < 0 || sx < 0 || sy >= h as i64 || sx >= w as i64 {
            return None;
        }
        let sx = if self.flip { w as i64 - 1 - sx } else { sx };
        Some(sy as usize * w + sx as usize)
    }

    pub fn apply_image(&self, image: &ImageTensor) -> ImageTensor {
        let (h, w) = (image.height(), image.width());
        let mut out = ImageTensor::zeros(image.channels(), h, w);
        for c in 0..image.channels() {
            let src = image.channel(c);
            let dst = &mut out.data_mut()[c * h * w..(c + 1) * h * w];
            for y in 0..h {
                for x in 0..w {
                    if let Some(s) = self.source(y, x, h, w) {
                        dst[y * w + x] = src[s];
                    }
                }
            }
        }
        out
    }

    pub fn apply_mask(&self, mask: &LabelMap) -> LabelMap {
        let (h, w) = (mask.height(), mask.width());
        let mut out = LabelMap::zeros(h, w);
        for y in 0..h {
            for x in 0..w {
                if let Some(s) = self.source(y, x, h, w) {
                    out.data_mut()[y * w + x] = mask.data()[s];
                }
            }
        }
        out
    }

    pub fn apply(&self, sample: &Sample) -> Sample {
        Sample {
            id: sample.id,
            image: self.apply_image(&sample.image),
            mask: self.apply_mask(&sample.mask),
            labeled: sample.labeled,
        }
    }
}

/// Image-only augmentation applied on top of the geometric ops.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Photometric {
    /// Standard deviation of additive Gaussian noise; 0 disables it.
    pub noise_sigma: f64,
    /// Intensity exponent; 1 is a no-op.
    pub gamma: f64,
    /// Square `(row, col, side)` filled with the image mean.
    pub cutout: Option<(usize, usize, usize)>,
}

pub const STRONG_NOISE_SIGMA: f64 = 0.1;
pub const GAMMA_RANGE: (f64, f64) = (0.7, 1.4);

impl Photometric {
    pub fn identity() -> Self {
        Self {
            noise_sigma: 0.0,
            gamma: 1.0,
            cutout: None,
        }
    }

    pub fn draw<R: Rng>(rng: &mut R, height: usize, width: usize) -> Self {
        let gamma = rng.random_range(GAMMA_RANGE.0..=GAMMA_RANGE.1);
        let max_side = (height.min(width) / 4).max(1);
        let side = rng.random_range(1..=max_side);
        let row = rng.random_range(0..=height - side);
        let col = rng.random_range(0..=width - side);
        Self {
            noise_sigma: STRONG_NOISE_SIGMA,
            gamma,
            cutout: Some((row, col, side)),
        }
    }

    /// Gamma, then noise, then cutout; the result is clamped to `[0, 1]`.
    pub fn apply<R: Rng>(&self, image: &ImageTensor, rng: &mut R) -> ImageTensor {
        let mut out = image.clone();
        if self.gamma != 1.0 {
            for v in out.data_mut() {
                *v = (v.clamp(0.0, 1.0) as f64).powf(self.gamma) as f32;
            }
        }
        if self.noise_sigma > 0.0 {
            let normal = Normal::new(0.0, self.noise_sigma).expect("valid sigma");
            for v in out.data_mut() {
                *v = (*v as f64 + normal.sample(rng)) as f32;
            }
        }
        if let Some((row, col, side)) = self.cutout {
            let fill = out.mean() as f32;
            let (h, w) = (out.height(), out.width());
            for c in 0..out.channels() {
                for y in row..(row + side).min(h) {
                    for x in col..(col + side).min(w) {
                        out.set(c, y, x, fill);
                    }
                }
            }
        }
        for v in out.data_mut() {
            *v = v.clamp(0.0, 1.0);
        }
        out
    }
}

pub fn augment_weak<R: Rng>(sample: &Sample, rng: &mut R) -> Sample {
    Geometric::draw(rng).apply(sample)
}

pub fn augment_strong<R: Rng>(sample: &Sample, rng: &mut R) -> Sample {
    let mut out = augment_weak(sample, rng);
    let photo = Photometric::draw(rng, out.image.height(), out.image.width());
    out.image = photo.apply(&out.image, rng);
    out
}

// ---------------------------------------------------------------------------
// File formats

pub fn encode_tensor(tensor: &ImageTensor) -> Vec<u8> {
    let mut w = Writer::default();
    w.bytes(TENSOR_MAGIC);
    w.u8(3);
    for d in [tensor.channels(), tensor.height(), tensor.width()] {
        w.u32(d as u32);
    }
    for &v in tensor.data() {
        w.f32(v);
    }
    w.finish()
}

/// Accepts rank 2 (`H × W`) or rank 3 (`C × H × W`) tensors.
pub fn decode_tensor(bytes: &[u8]) -> Result<ImageTensor> {
    let mut r = Reader::open(bytes, TENSOR_MAGIC)?;
    let rank = r.u8()?;
    if !(2..=3).contains(&rank) {
        return Err(Error::Format {
            offset: 4,
            msg: format!("unsupported tensor rank {rank}"),
        });
    }
    let mut dims = Vec::with_capacity(3);
    for _ in 0..rank {
        dims.push(r.u32()? as usize);
    }
    if rank == 2 {
        dims.insert(0, 1);
    }
    let count = dims.iter().try_fold(1usize, |a, &d| a.checked_mul(d));
    let count = count.ok_or_else(|| r.format("tensor dims overflow"))?;
    r.check_exact(count * 4)?;
    let data = r.f32s(count)?;
    ImageTensor::new(dims[0], dims[1], dims[2], data)
}

pub fn write_tensor(tensor: &ImageTensor, path: &Path) -> Result<()> {
    write_file(path, &encode_tensor(tensor))
}

pub fn read_tensor(path: &Path) -> Result<ImageTensor> {
    decode_tensor(&read_file(path)?)
}

pub fn encode_mask(mask: &LabelMap) -> Vec<u8> {
    let mut w = Writer::default();
    w.bytes(MASK_MAGIC);
    w.u32(mask.height() as u32);
    w.u32(mask.width() as u32);
    w.bytes(mask.data());
    w.finish()
}

pub fn decode_mask(bytes: &[u8]) -> Result<LabelMap> {
    let mut r = Reader::open(bytes, MASK_MAGIC)?;
    let h = r.u32()? as usize;
    let w = r.u32()? as usize;
    let count = h.checked_mul(w).ok_or_else(|| r.format("mask dims overflow"))?;
    r.check_exact(count)?;
    let data = r.take(count)?.to_vec();
    LabelMap::new(h, w, data)
}

pub fn write_mask(mask: &LabelMap, path: &Path) -> Result<()> {
    write_file(path, &encode_mask(mask))
}

pub fn read_mask(path: &Path) -> Result<LabelMap> {
    decode_mask(&read_file(path)?)
}

fn sample_name(id: usize) -> String {
    format!("{id:04}")
}

/// Write `images/`, `masks/` and `split.txt` under `dir`.
pub fn write_dataset(dir: &Path, samples: &[Sample]) -> Result<()> {
    let mut split = String::new();
    for s in samples {
        let name = sample_name(s.id);
        write_tensor(&s.image, &dir.join("images").join(format!("{name}.agt")))?;
        write_mask(&s.mask, &dir.join("masks").join(format!("{name}.agm")))?;
        let tag = if s.labeled { "labeled" } else { "unlabeled" };
        writeln!(split, "{name} {tag}").expect("string write");
    }
    write_file(&dir.join("split.txt"), split.as_bytes())
}

/// Read a dataset directory in `split.txt` order.
pub fn read_dataset(dir: &Path) -> Result<Vec<Sample>> {
    let split_path = dir.join("split.txt");
    let text = String::from_utf8(read_file(&split_path)?)
        .map_err(|_| Error::Data(format!("{} is not UTF-8", split_path.display())))?;
    let mut samples = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let bad = || Error::Data(format!("{}:{}: malformed line {line:?}", split_path.display(), lineno + 1));
        let mut parts = line.split_whitespace();
        let name = parts.next().ok_or_else(bad)?;
        let labeled = match parts.next() {
            Some("labeled") => true,
            Some("unlabeled") => false,
            _ => return Err(bad()),
        };
        if parts.next().is_some() {
            return Err(bad());
        }
        let id: usize = name.parse().map_err(|_| bad())?;
        let image = read_tensor(&dir.join("images").join(format!("{name}.agt")))?;
        let mask = read_mask(&dir.join("masks").join(format!("{name}.agm")))?;
        if image.height() != mask.height() || image.width() != mask.width() {
            return Err(Error::Data(format!("sample {name}: image and mask dims differ")));
        }
        samples.push(Sample {
            id,
            image,
            mask,
            labeled,
        });
    }
    if samples.is_empty() {
        return Err(Error::Data(format!("{} lists no samples", split_path.display())));
    }
    Ok(samples)
}
