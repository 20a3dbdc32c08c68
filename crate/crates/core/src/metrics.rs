//! Overlap and boundary-distance metrics for segmentation masks.
//!
//! Boundary pixels are mask pixels with at least one 4-neighbour outside the
//! mask (pixels beyond the image border count as outside). HD95 and ASD are
//! the type-7 95th percentile and the mean of the combined directed
//! boundary-to-boundary distances in both directions.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::stats::{mean, quantile};
use crate::tensor::LabelMap;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BinaryMask {
    height: usize,
    width: usize,
    bits: Vec<bool>,
}

impl BinaryMask {
    pub fn new(height: usize, width: usize, bits: Vec<bool>) -> Result<Self> {
        if bits.len() != height * width {
            return Err(Error::Shape(format!(
                "mask has {} bits, expected {height}x{width}",
                bits.len()
            )));
        }
        Ok(Self { height, width, bits })
    }

    /// One-vs-rest mask of `class`.
    pub fn from_labels(labels: &LabelMap, class: u8) -> Self {
        Self {
            height: labels.height(),
            width: labels.width(),
            bits: labels.data().iter().map(|&l| l == class).collect(),
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    pub fn is_empty(&self) -> bool {
        self.count() == 0
    }

    /// Pixel indices of the 4-connectivity boundary.
    pub fn boundary(&self) -> Vec<usize> {
        let (h, w) = (self.height, self.width);
        let on = |y: isize, x: isize| {
            y >= 0 && x >= 0 && (y as usize) < h && (x as usize) < w && self.bits[y as usize * w + x as usize]
        };
        (0..h * w)
            .filter(|&m| {
                let (y, x) = ((m / w) as isize, (m % w) as isize);
                on(y, x) && !(on(y - 1, x) && on(y + 1, x) && on(y, x - 1) && on(y, x + 1))
            })
            .collect()
    }
}

fn check_dims(a: &BinaryMask, b: &BinaryMask) -> Result<()> {
    if a.height != b.height || a.width != b.width {
        return Err(Error::Shape(format!(
            "masks are {}x{} and {}x{}",
            a.height, a.width, b.height, b.width
        )));
    }
    Ok(())
}

fn overlap_counts(a: &BinaryMask, b: &BinaryMask) -> Result<(usize, usize, usize)> {
    check_dims(a, b)?;
    let inter = a.bits.iter().zip(&b.bits).filter(|(x, y)| **x && **y).count();
    Ok((inter, a.count(), b.count()))
}

/// `2|a∩b| / (|a| + |b|)`; two empty masks score 1.
pub fn dsc(a: &BinaryMask, b: &BinaryMask) -> Result<f64> {
    let (inter, na, nb) = overlap_counts(a, b)?;
    if na + nb == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * inter as f64 / (na + nb) as f64)
}

/// `|a∩b| / |a∪b|`; two empty masks score 1.
pub fn jaccard(a: &BinaryMask, b: &BinaryMask) -> Result<f64> {
    let (inter, na, nb) = overlap_counts(a, b)?;
    let union = na + nb - inter;
    if union == 0 {
        return Ok(1.0);
    }
    Ok(inter as f64 / union as f64)
}

/// Exact squared Euclidean distance from every pixel to the nearest seed.
fn squared_edt(seeds: &[usize], h: usize, w: usize) -> Vec<f64> {
    const INF: f64 = 1e20;
    let mut grid = vec![INF; h * w];
    for &s in seeds {
        grid[s] = 0.0;
    }
    let mut buf = vec![0.0; h.max(w)];
    let mut out = vec![0.0; h.max(w)];
    for x in 0..w {
        for y in 0..h {
            buf[y] = grid[y * w + x];
        }
        lower_envelope(&buf[..h], &mut out[..h]);
        for y in 0..h {
            grid[y * w + x] = out[y];
        }
    }
    for y in 0..h {
        buf[..w].copy_from_slice(&grid[y * w..(y + 1) * w]);
        lower_envelope(&buf[..w], &mut out[..w]);
        grid[y * w..(y + 1) * w].copy_from_slice(&out[..w]);
    }
    grid
}

/// One-dimensional distance transform of sampled function `f`
/// (lower envelope of parabolas).
fn lower_envelope(f: &[f64], d: &mut [f64]) {
    let n = f.len();
    let mut v = vec![0usize; n];
    let mut z = vec![0.0f64; n + 1];
    let mut k = 0;
    z[0] = f64::NEG_INFINITY;
    z[1] = f64::INFINITY;
    for q in 1..n {
        loop {
            let p = v[k];
            let s = ((f[q] + (q * q) as f64) - (f[p] + (p * p) as f64)) / (2.0 * (q as f64 - p as f64));
            if s <= z[k] && k > 0 {
                k -= 1;
                continue;
            }
            if s <= z[k] {
                // k == 0 and the new parabola dominates everywhere.
                v[0] = q;
                z[1] = f64::INFINITY;
                break;
            }
            k += 1;
            v[k] = q;
            z[k] = s;
            z[k + 1] = f64::INFINITY;
            break;
        }
    }
    let mut k = 0;
    for (q, dq) in d.iter_mut().enumerate() {
        while z[k + 1] < q as f64 {
            k += 1;
        }
        let p = v[k];
        let diff = q as f64 - p as f64;
        *dq = diff * diff + f[p];
    }
}

/// All directed boundary distances `a → b` followed by `b → a`.
pub fn boundary_distances(a: &BinaryMask, b: &BinaryMask) -> Result<Vec<f64>> {
    check_dims(a, b)?;
    if a.is_empty() || b.is_empty() {
        return Err(Error::UndefinedMetric("boundary distance needs two non-empty masks"));
    }
    let (h, w) = (a.height, a.width);
    let ba = a.boundary();
    let bb = b.boundary();
    let to_b = squared_edt(&bb, h, w);
    let to_a = squared_edt(&ba, h, w);
    let mut out: Vec<f64> = ba.iter().map(|&m| to_b[m].sqrt()).collect();
    out.extend(bb.iter().map(|&m| to_a[m].sqrt()));
    Ok(out)
}

pub fn hd95(a: &BinaryMask, b: &BinaryMask) -> Result<f64> {
    Ok(quantile(&boundary_distances(a, b)?, 0.95))
}

pub fn asd(a: &BinaryMask, b: &BinaryMask) -> Result<f64> {
    Ok(mean(&boundary_distances(a, b)?))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ClassMetrics {
    pub class: u8,
    pub dsc: f64,
    pub jaccard: f64,
    pub hd95: Option<f64>,
    pub asd: Option<f64>,
}

/// Macro-averaged metrics plus the per-class breakdown.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricReport {
    pub dsc: f64,
    pub jaccard: f64,
    /// Mean over classes where the distance is defined; `None` if none is.
    pub hd95: Option<f64>,
    pub asd: Option<f64>,
    pub per_class: Vec<ClassMetrics>,
}

fn mean_defined(values: impl Iterator<Item = Option<f64>>) -> Option<f64> {
    let v: Vec<f64> = values.flatten().collect();
    (!v.is_empty()).then(|| mean(&v))
}

impl MetricReport {
    fn from_classes(per_class: Vec<ClassMetrics>) -> Self {
        let dsc = mean(&per_class.iter().map(|c| c.dsc).collect::<Vec<_>>());
        let jaccard = mean(&per_class.iter().map(|c| c.jaccard).collect::<Vec<_>>());
        Self {
            dsc,
            jaccard,
            hd95: mean_defined(per_class.iter().map(|c| c.hd95)),
            asd: mean_defined(per_class.iter().map(|c| c.asd)),
            per_class,
        }
    }

    /// Average reports class by class (e.g. across a dataset).
    pub fn average(reports: &[MetricReport]) -> Result<Self> {
        let first = reports
            .first()
            .ok_or_else(|| Error::Data("cannot average an empty set of reports".into()))?;
        let classes: Vec<u8> = first.per_class.iter().map(|c| c.class).collect();
        if reports
            .iter()
            .any(|r| r.per_class.iter().map(|c| c.class).ne(classes.iter().copied()))
        {
            return Err(Error::Shape("reports cover different classes".into()));
        }
        let per_class = classes
            .iter()
            .enumerate()
            .map(|(i, &class)| {
                let col = |f: fn(&ClassMetrics) -> f64| mean(&reports.iter().map(|r| f(&r.per_class[i])).collect::<Vec<_>>());
                ClassMetrics {
                    class,
                    dsc: col(|c| c.dsc),
                    jaccard: col(|c| c.jaccard),
                    hd95: mean_defined(reports.iter().map(|r| r.per_class[i].hd95)),
                    asd: mean_defined(reports.iter().map(|r| r.per_class[i].asd)),
                }
            })
            .collect();
        Ok(Self::from_classes(per_class))
    }
}

fn optional(r: Result<f64>) -> Result<Option<f64>> {
    match r {
        Ok(v) => Ok(Some(v)),
        Err(Error::UndefinedMetric(_)) => Ok(None),
        Err(e) => Err(e),
    }
}

/// One-vs-rest metrics for foreground classes `1..=classes`, macro-averaged.
pub fn evaluate(pred: &LabelMap, truth: &LabelMap, classes: usize) -> Result<MetricReport> {
    if pred.height() != truth.height() || pred.width() != truth.width() {
        return Err(Error::Shape("prediction and ground truth differ in size".into()));
    }
    if classes == 0 {
        return Err(Error::Parameter("need at least one foreground class".into()));
    }
    let per_class = (1..=classes as u8)
        .map(|class| {
            let a = BinaryMask::from_labels(pred, class);
            let b = BinaryMask::from_labels(truth, class);
            Ok(ClassMetrics {
                class,
                dsc: dsc(&a, &b)?,
                jaccard: jaccard(&a, &b)?,
                hd95: optional(hd95(&a, &b))?,
                asd: optional(asd(&a, &b))?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(MetricReport::from_classes(per_class))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn square(n: usize, y0: usize, x0: usize, side: usize) -> BinaryMask {
        let bits = (0..n * n)
            .map(|m| {
                let (y, x) = (m / n, m % n);
                (y0..y0 + side).contains(&y) && (x0..x0 + side).contains(&x)
            })
            .collect();
        BinaryMask::new(n, n, bits).unwrap()
    }

    #[test]
    fn overlap_hand_cases() {
        let a = square(6, 1, 1, 2);
        let b = square(6, 1, 2, 2);
        assert_eq!(dsc(&a, &b).unwrap(), 0.5);
        assert!((jaccard(&a, &b).unwrap() - 1.0 / 3.0).abs() < 1e-15);
        assert_eq!(dsc(&a, &a).unwrap(), 1.0);
        assert_eq!(dsc(&a, &square(6, 4, 4, 2)).unwrap(), 0.0);
        let empty = BinaryMask::new(6, 6, vec![false; 36]).unwrap();
        assert_eq!(dsc(&empty, &empty).unwrap(), 1.0);
        assert_eq!(jaccard(&empty, &empty).unwrap(), 1.0);
        assert_eq!(dsc(&empty, &a).unwrap(), 0.0);
        assert!(matches!(hd95(&empty, &a), Err(Error::UndefinedMetric(_))));
        assert!(dsc(&a, &square(5, 0, 0, 1)).is_err());
    }

    #[test]
    fn boundary_excludes_interior() {
        let m = square(7, 1, 1, 5);
        assert_eq!(m.boundary().len(), 16);
        assert_eq!(square(4, 0, 0, 4).boundary().len(), 12);
    }

    #[test]
    fn edt_matches_brute_force_on_a_line() {
        let seeds = [3usize, 17, 40];
        let (h, w) = (7, 9);
        let d = squared_edt(&seeds, h, w);
        for m in 0..h * w {
            let want = seeds
                .iter()
                .map(|&s| {
                    let dy = (m / w) as f64 - (s / w) as f64;
                    let dx = (m % w) as f64 - (s % w) as f64;
                    dy * dy + dx * dx
                })
                .fold(f64::INFINITY, f64::min);
            assert_eq!(d[m], want);
        }
    }

    #[test]
    fn translated_pixel_gives_three() {
        let a = square(16, 6, 5, 1);
        let b = square(16, 6, 8, 1);
        assert_eq!(hd95(&a, &b).unwrap(), 3.0);
        assert_eq!(asd(&a, &b).unwrap(), 3.0);
        assert_eq!(hd95(&a, &a).unwrap(), 0.0);
    }

    #[test]
    fn evaluate_macro_averages() {
        let truth = LabelMap::new(2, 2, vec![1, 1, 2, 0]).unwrap();
        let pred = LabelMap::new(2, 2, vec![1, 0, 2, 2]).unwrap();
        let r = evaluate(&pred, &truth, 2).unwrap();
        assert!((r.per_class[0].dsc - 2.0 / 3.0).abs() < 1e-15);
        assert!((r.per_class[1].dsc - 2.0 / 3.0).abs() < 1e-15);
        assert!((r.dsc - 2.0 / 3.0).abs() < 1e-15);
        let avg = MetricReport::average(&[r.clone(), r.clone()]).unwrap();
        assert_eq!(avg, r);
    }
}
