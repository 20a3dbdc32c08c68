//! Patch-wise class-centric sampling.
//!
//! An image is attended to class `k` by multiplying it with the class
//! confidence map, partitioned into square patches, and each patch is scored
//! by its average binary entropy. For an anchor patch the `n` highest-scoring
//! other patches become positives and the remainder negatives.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::ImageTensor;

/// Clamp applied to attended values before taking logarithms.
pub const ENTROPY_EPS: f64 = 1e-7;

/// Element-wise product of an image with a class confidence map.
///
/// `confidence` must have one channel (broadcast over image channels) or the
/// same number of channels as `image`. Both inputs must lie in `[0, 1]`.
pub fn attend(image: &ImageTensor, confidence: &ImageTensor) -> Result<ImageTensor> {
    if !image.same_spatial_dims(confidence) {
        return Err(Error::Shape(format!(
            "image is {}x{}, confidence map is {}x{}",
            image.height(),
            image.width(),
            confidence.height(),
            confidence.width()
        )));
    }
    if confidence.channels() != 1 && confidence.channels() != image.channels() {
        return Err(Error::Shape(format!(
            "confidence has {} channels, image has {}",
            confidence.channels(),
            image.channels()
        )));
    }
    if !confidence.all_in_unit_range() {
        return Err(Error::Domain("confidence values must lie in [0, 1]".into()));
    }
    if !image.all_in_unit_range() {
        return Err(Error::Domain(
            "image values must lie in [0, 1]; normalize before attending".into(),
        ));
    }
    let plane = image.plane_len();
    let mut out = image.clone();
    for c in 0..image.channels() {
        let conf = confidence.channel(if confidence.channels() == 1 { 0 } else { c });
        let dst = &mut out.data_mut()[c * plane..(c + 1) * plane];
        for (v, &w) in dst.iter_mut().zip(conf) {
            *v *= w;
        }
    }
    Ok(out)
}

/// Geometry of a square patch partition.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PatchLayout {
    pub height: usize,
    pub width: usize,
    pub patch_size: usize,
    pub stride: usize,
    /// Top-left corners in row-major order.
    pub origins: Vec<(usize, usize)>,
}

impl PatchLayout {
    pub fn new(height: usize, width: usize, patch_size: usize, stride: usize) -> Result<Self> {
        if patch_size == 0 || stride == 0 {
            return Err(Error::Parameter("patch size and stride must be positive".into()));
        }
        if patch_size > height || patch_size > width {
            return Err(Error::Parameter(format!(
                "patch size {patch_size} exceeds image {height}x{width}"
            )));
        }
        let mut origins = Vec::new();
        let mut row = 0;
        while row + patch_size <= height {
            let mut col = 0;
            while col + patch_size <= width {
                origins.push((row, col));
                col += stride;
            }
            row += stride;
        }
        Ok(Self {
            height,
            width,
            patch_size,
            stride,
            origins,
        })
    }

    /// Non-overlapping partition (stride = patch size).
    pub fn non_overlapping(height: usize, width: usize, patch_size: usize) -> Result<Self> {
        Self::new(height, width, patch_size, patch_size)
    }

    pub fn len(&self) -> usize {
        self.origins.len()
    }

    pub fn is_empty(&self) -> bool {
        self.origins.is_empty()
    }

    pub fn pixels_per_patch(&self) -> usize {
        self.patch_size * self.patch_size
    }

    /// Flat pixel indices (`y * width + x`) covered by patch `p`, row-major.
    pub fn pixel_indices(&self, p: usize) -> impl Iterator<Item = usize> + '_ {
        let (r0, c0) = self.origins[p];
        let (s, w) = (self.patch_size, self.width);
        (r0..r0 + s).flat_map(move |y| (c0..c0 + s).map(move |x| y * w + x))
    }

    /// Mean over each patch of a single `height × width` plane.
    pub fn patch_means(&self, plane: &[f64]) -> Vec<f64> {
        let inv = 1.0 / self.pixels_per_patch() as f64;
        (0..self.len())
            .map(|p| self.pixel_indices(p).map(|i| plane[i]).sum::<f64>() * inv)
            .collect()
    }
}

/// One extracted patch.
#[derive(Debug, Clone, PartialEq)]
pub struct Patch {
    pub row: usize,
    pub col: usize,
    /// Channel-major flattened values.
    pub values: Vec<f32>,
}

/// Patches of one attended image for class `class_id`.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchGrid {
    pub layout: PatchLayout,
    pub class_id: usize,
    pub patches: Vec<Patch>,
}

impl PatchGrid {
    pub fn extract(attended: &ImageTensor, layout: &PatchLayout, class_id: usize) -> Result<Self> {
        if attended.height() != layout.height || attended.width() != layout.width {
            return Err(Error::Shape(format!(
                "layout is for {}x{}, image is {}x{}",
                layout.height,
                layout.width,
                attended.height(),
                attended.width()
            )));
        }
        let patches = (0..layout.len())
            .map(|p| {
                let (row, col) = layout.origins[p];
                let mut values = Vec::with_capacity(attended.channels() * layout.pixels_per_patch());
                for c in 0..attended.channels() {
                    let plane = attended.channel(c);
                    values.extend(layout.pixel_indices(p).map(|i| plane[i]));
                }
                Patch { row, col, values }
            })
            .collect();
        Ok(Self {
            layout: layout.clone(),
            class_id,
            patches,
        })
    }

    pub fn len(&self) -> usize {
        self.patches.len()
    }

    pub fn is_empty(&self) -> bool {
        self.patches.is_empty()
    }

    pub fn entropies(&self) -> Result<Vec<f64>> {
        self.patches.iter().map(average_patch_entropy).collect()
    }
}

/// Average binary entropy (nats) of a patch's attended values.
pub fn average_patch_entropy(patch: &Patch) -> Result<f64> {
    entropy_of_values(&patch.values)
}

pub fn entropy_of_values(values: &[f32]) -> Result<f64> {
    if values.is_empty() {
        return Err(Error::Domain("entropy of an empty patch".into()));
    }
    let sum: f64 = values
        .iter()
        .map(|&v| {
            let x = (v as f64).clamp(ENTROPY_EPS, 1.0 - ENTROPY_EPS);
            x * x.ln() + (1.0 - x) * (1.0 - x).ln()
        })
        .sum();
    Ok(-sum / values.len() as f64)
}

/// Positive/negative split around an anchor patch.
#[derive(Debug, Clone, PartialEq)]
pub struct SampledPatches {
    pub anchor: usize,
    pub positives: Vec<usize>,
    pub negatives: Vec<usize>,
    /// Score of every patch (entropy in nats for the entropy sampler).
    pub scores: Vec<f64>,
}

/// Top-`n` selection: the `n` highest scores (excluding the anchor) are
/// positives, ties broken by ascending index; everything else is negative.
pub fn select_top_n(scores: &[f64], anchor: usize, n: usize) -> Result<SampledPatches> {
    let total = scores.len();
    if anchor >= total {
        return Err(Error::Parameter(format!(
            "anchor {anchor} out of range for {total} patches"
        )));
    }
    if n == 0 || n >= total {
        return Err(Error::Parameter(format!(
            "n must satisfy 1 <= n < {total}, got {n}"
        )));
    }
    let mut order: Vec<usize> = (0..total).filter(|&i| i != anchor).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    let mut positives = order[..n].to_vec();
    let mut negatives = order[n..].to_vec();
    positives.sort_unstable();
    negatives.sort_unstable();
    Ok(SampledPatches {
        anchor,
        positives,
        negatives,
        scores: scores.to_vec(),
    })
}

/// Entropy-driven sampling over a patch grid.
pub fn sample(grid: &PatchGrid, anchor: usize, n: usize) -> Result<SampledPatches> {
    select_top_n(&grid.entropies()?, anchor, n)
}

/// Index of the patch with maximal mean confidence (lowest index on ties).
pub fn anchor_by_confidence(layout: &PatchLayout, confidence: &[f64]) -> usize {
    let means = layout.patch_means(confidence);
    let mut best = 0;
    for (i, &m) in means.iter().enumerate() {
        if m > means[best] {
            best = i;
        }
    }
    best
}

/// Patch scoring rule used to pick positives.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Sampler {
    /// Average patch entropy of the attended image.
    #[default]
    Entropy,
    /// Cosine similarity of attended patch contents to the anchor's.
    Cosine,
    /// Closeness of mean class confidence to the anchor's.
    ClassConfidence,
    /// Seeded random ranking.
    Random,
}

impl std::str::FromStr for Sampler {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "entropy" => Ok(Sampler::Entropy),
            "cosine" => Ok(Sampler::Cosine),
            "class_confidence" => Ok(Sampler::ClassConfidence),
            "random" => Ok(Sampler::Random),
            other => Err(Error::Config(format!(
                "unknown sampler {other:?} (expected entropy|cosine|class_confidence|random)"
            ))),
        }
    }
}

impl Sampler {
    pub fn name(self) -> &'static str {
        match self {
            Sampler::Entropy => "entropy",
            Sampler::Cosine => "cosine",
            Sampler::ClassConfidence => "class_confidence",
            Sampler::Random => "random",
        }
    }

    /// Per-patch scores; higher means more likely to be chosen as positive.
    pub fn scores<R: Rng>(
        self,
        grid: &PatchGrid,
        confidence: &[f64],
        anchor: usize,
        rng: &mut R,
    ) -> Result<Vec<f64>> {
        match self {
            Sampler::Entropy => grid.entropies(),
            Sampler::Cosine => {
                let a = &grid.patches[anchor].values;
                Ok(grid.patches.iter().map(|p| cosine(a, &p.values)).collect())
            }
            Sampler::ClassConfidence => {
                let means = grid.layout.patch_means(confidence);
                let reference = means[anchor];
                Ok(means.iter().map(|m| -(m - reference).abs()).collect())
            }
            Sampler::Random => {
                let mut ranks: Vec<usize> = (0..grid.len()).collect();
                ranks.shuffle(rng);
                Ok(ranks.into_iter().map(|r| r as f64).collect())
            }
        }
    }
}

fn cosine(a: &[f32], b: &[f32]) -> f64 {
    let mut dot = 0.0;
    let mut na = 0.0;
    let mut nb = 0.0;
    for (&x, &y) in a.iter().zip(b) {
        let (x, y) = (x as f64, y as f64);
        dot += x * y;
        na += x * x;
        nb += y * y;
    }
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na.sqrt() * nb.sqrt())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use std::f64::consts::LN_2;

    fn patch(values: Vec<f32>) -> Patch {
        Patch {
            row: 0,
            col: 0,
            values,
        }
    }

    #[test]
    fn attend_masks() {
        let img = ImageTensor::new(1, 1, 2, vec![0.8, 0.3]).unwrap();
        let ones = ImageTensor::filled(1, 1, 2, 1.0);
        assert_eq!(attend(&img, &ones).unwrap(), img);
        let zeros = ImageTensor::zeros(1, 1, 2);
        assert_eq!(attend(&img, &zeros).unwrap().data(), &[0.0, 0.0]);
        let half = ImageTensor::filled(1, 1, 2, 0.5);
        assert!((attend(&img, &half).unwrap().data()[0] - 0.4).abs() < 1e-7);
    }

    #[test]
    fn attend_rejects_bad_inputs() {
        let img = ImageTensor::zeros(1, 2, 2);
        assert!(matches!(attend(&img, &ImageTensor::zeros(1, 2, 3)), Err(Error::Shape(_))));
        let raw = ImageTensor::filled(1, 2, 2, 5.0);
        assert!(matches!(attend(&raw, &ImageTensor::zeros(1, 2, 2)), Err(Error::Domain(_))));
    }

    #[test]
    fn entropy_cases() {
        let e = average_patch_entropy(&patch(vec![0.5; 16])).unwrap();
        assert!((e - LN_2).abs() < 1e-9);
        let e = average_patch_entropy(&patch(vec![0.0, 1.0, 1.0, 0.0])).unwrap();
        assert!(e.abs() < 2e-6);
        let e = average_patch_entropy(&patch(vec![0.5, 1.0])).unwrap();
        assert!((e - LN_2 / 2.0).abs() < 1e-6);
        assert!(matches!(average_patch_entropy(&patch(vec![])), Err(Error::Domain(_))));
    }

    #[test]
    fn selection_cases() {
        let s = select_top_n(&[0.1, 0.6, 0.3, 0.5], 0, 2).unwrap();
        assert_eq!(s.positives, vec![1, 3]);
        assert_eq!(s.negatives, vec![2]);

        let s = select_top_n(&[0.2; 6], 2, 3).unwrap();
        assert_eq!(s.positives, vec![0, 1, 3]);
        assert_eq!(s.negatives, vec![4, 5]);

        let s = select_top_n(&[0.1, 0.2, 0.3], 1, 2).unwrap();
        assert!(s.negatives.is_empty());

        assert!(select_top_n(&[0.1, 0.2], 0, 2).is_err());
        assert!(select_top_n(&[0.1, 0.2], 0, 0).is_err());
    }

    #[test]
    fn layout_is_row_major_and_in_bounds() {
        let l = PatchLayout::new(8, 8, 4, 2).unwrap();
        assert_eq!(l.len(), 9);
        assert_eq!(l.origins[1], (0, 2));
        assert!(l.origins.iter().all(|&(r, c)| r + 4 <= 8 && c + 4 <= 8));
        let l = PatchLayout::non_overlapping(8, 8, 4).unwrap();
        assert_eq!(l.origins, vec![(0, 0), (0, 4), (4, 0), (4, 4)]);
    }

    #[test]
    fn anchor_is_most_confident_patch() {
        let l = PatchLayout::non_overlapping(4, 4, 2).unwrap();
        let mut conf = vec![0.1; 16];
        conf[15] = 0.9;
        assert_eq!(anchor_by_confidence(&l, &conf), 3);
        assert_eq!(anchor_by_confidence(&l, &[0.5; 16]), 0);
    }

    #[test]
    fn grid_extraction_uses_layout_order() {
        let img = ImageTensor::new(1, 2, 4, (0..8).map(|v| v as f32 / 8.0).collect()).unwrap();
        let l = PatchLayout::non_overlapping(2, 4, 2).unwrap();
        let g = PatchGrid::extract(&img, &l, 1).unwrap();
        assert_eq!(g.patches[1].values, vec![2.0 / 8.0, 3.0 / 8.0, 6.0 / 8.0, 7.0 / 8.0]);
    }

    proptest! {
        #[test]
        fn entropy_is_symmetric_under_complement(values in prop::collection::vec(0.0f32..=1.0, 1..64)) {
            let flipped: Vec<f32> = values.iter().map(|v| 1.0 - v).collect();
            let a = entropy_of_values(&values).unwrap();
            let b = entropy_of_values(&flipped).unwrap();
            // 1 - v is exact in f32 only up to rounding of the subtraction.
            prop_assert!((a - b).abs() < 1e-6);
            prop_assert!(a >= -1e-12 && a <= LN_2 + 1e-12);
        }

        #[test]
        fn entropy_ignores_pixel_order(mut values in prop::collection::vec(0.0f32..=1.0, 1..64), seed in any::<u64>()) {
            use rand::SeedableRng;
            let a = entropy_of_values(&values).unwrap();
            values.shuffle(&mut rand_chacha::ChaCha8Rng::seed_from_u64(seed));
            let b = entropy_of_values(&values).unwrap();
            prop_assert!((a - b).abs() < 1e-12);
        }

        #[test]
        fn top_n_partitions_indices(scores in prop::collection::vec(0.0f64..1.0, 2..40), a in any::<prop::sample::Index>(), k in any::<prop::sample::Index>()) {
            let total = scores.len();
            let anchor = a.index(total);
            let n = 1 + k.index(total - 1);
            prop_assume!(n < total);
            let s = select_top_n(&scores, anchor, n).unwrap();
            prop_assert_eq!(s.positives.len(), n);
            let mut all: Vec<usize> = s.positives.iter().chain(&s.negatives).copied().collect();
            all.push(anchor);
            all.sort_unstable();
            prop_assert_eq!(all, (0..total).collect::<Vec<_>>());
            let min_pos = s.positives.iter().map(|&i| scores[i]).fold(f64::INFINITY, f64::min);
            prop_assert!(s.negatives.iter().all(|&i| scores[i] <= min_pos));
        }
    }

    #[test]
    fn entropy_maximal_only_at_half() {
        let at_half = entropy_of_values(&[0.5; 4]).unwrap();
        for v in [0.0f32, 0.1, 0.3, 0.49, 0.51, 0.9, 1.0] {
            assert!(entropy_of_values(&[v; 4]).unwrap() < at_half);
        }
    }
}
