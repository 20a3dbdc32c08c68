//! Gaussian-kernel affinity graph between teacher and student patch predictions.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::DenseMatrix;
use crate::sampling::PatchLayout;
use crate::stats;

const ROW_SUM_TOL: f64 = 1e-5;

/// `count` probability vectors of length `dim`, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictionSet {
    count: usize,
    dim: usize,
    values: Vec<f64>,
}

impl PredictionSet {
    pub fn new(count: usize, dim: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != count * dim {
            return Err(Error::Shape(format!(
                "prediction set has {} values, expected {count}x{dim}",
                values.len()
            )));
        }
        if dim == 0 {
            return Err(Error::Shape("prediction vectors must be non-empty".into()));
        }
        for (r, row) in values.chunks(dim).enumerate() {
            if row.iter().any(|v| !(0.0..=1.0).contains(v)) {
                return Err(Error::Domain(format!("row {r} has entries outside [0, 1]")));
            }
            let s: f64 = row.iter().sum();
            if (s - 1.0).abs() > ROW_SUM_TOL {
                return Err(Error::Domain(format!("row {r} sums to {s}, not 1")));
            }
        }
        Ok(Self { count, dim, values })
    }

    /// Per-patch mean of a channel-major `dim × H × W` probability map.
    pub fn from_patch_means(probs: &[f64], dim: usize, layout: &PatchLayout) -> Result<Self> {
        let plane = layout.height * layout.width;
        if probs.len() != dim * plane {
            return Err(Error::Shape(format!(
                "probability map has {} values, expected {dim}x{}x{}",
                probs.len(),
                layout.height,
                layout.width
            )));
        }
        let n = layout.len();
        let mut values = vec![0.0; n * dim];
        for c in 0..dim {
            let means = layout.patch_means(&probs[c * plane..(c + 1) * plane]);
            for (p, m) in means.into_iter().enumerate() {
                values[p * dim + c] = m;
            }
        }
        Self::new(n, dim, values)
    }

    /// Per-pixel vectors of a channel-major `dim × H × W` map.
    pub fn from_channel_major(probs: &[f64], dim: usize) -> Result<Self> {
        if dim == 0 || probs.len() % dim != 0 {
            return Err(Error::Shape("map length is not a multiple of the class count".into()));
        }
        let count = probs.len() / dim;
        let mut values = vec![0.0; probs.len()];
        for c in 0..dim {
            for m in 0..count {
                values[m * dim + c] = probs[c * count + m];
            }
        }
        Self::new(count, dim, values)
    }

    /// Concatenate sets with equal `dim`.
    pub fn concat(sets: &[PredictionSet]) -> Result<Self> {
        let dim = sets.first().map(|s| s.dim).unwrap_or(1);
        if sets.iter().any(|s| s.dim != dim) {
            return Err(Error::Shape("cannot concatenate sets of different dim".into()));
        }
        let values: Vec<f64> = sets.iter().flat_map(|s| s.values.iter().copied()).collect();
        Ok(Self {
            count: values.len() / dim,
            dim,
            values,
        })
    }

    pub fn count(&self) -> usize {
        self.count
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.values[i * self.dim..(i + 1) * self.dim]
    }
}

/// Distance fed to the kernel exponent.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum KernelDistance {
    /// `exp(-‖t - s‖² / 2σ²)`.
    #[default]
    Squared,
    /// `exp(-‖t - s‖ / 2σ²)`, the form of the reference PyTorch snippet.
    Unsquared,
}

impl std::str::FromStr for KernelDistance {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "squared" => Ok(Self::Squared),
            "unsquared" => Ok(Self::Unsquared),
            other => Err(Error::Config(format!(
                "unknown kernel distance {other:?} (expected squared|unsquared)"
            ))),
        }
    }
}

/// Kernel affinity between teacher rows (i) and student rows (j).
#[derive(Debug, Clone)]
pub struct AffinityGraph {
    pub matrix: DenseMatrix,
    pub sigma: f64,
    pub distance: KernelDistance,
    pub diagonal: Vec<f64>,
}

impl AffinityGraph {
    pub fn len(&self) -> usize {
        self.matrix.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.matrix.rows() == 0
    }

    /// Wrap an arbitrary square matrix (used for loss-level tests and oracles).
    pub fn from_matrix(matrix: DenseMatrix, sigma: f64) -> Result<Self> {
        if !matrix.is_square() {
            return Err(Error::Shape("affinity matrix must be square".into()));
        }
        let diagonal = matrix.diagonal();
        Ok(Self {
            matrix,
            sigma,
            distance: KernelDistance::Squared,
            diagonal,
        })
    }
}

fn check_pair(teacher: &PredictionSet, student: &PredictionSet) -> Result<()> {
    if teacher.count != student.count || teacher.dim != student.dim {
        return Err(Error::Shape(format!(
            "teacher is {}x{}, student is {}x{}",
            teacher.count, teacher.dim, student.count, student.dim
        )));
    }
    Ok(())
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// `A(i, j) = exp(-dist(tᵢ, sⱼ) / 2σ²)`.
pub fn build_graph(
    teacher: &PredictionSet,
    student: &PredictionSet,
    sigma: f64,
    distance: KernelDistance,
) -> Result<AffinityGraph> {
    check_pair(teacher, student)?;
    if !(sigma > 0.0) || !sigma.is_finite() {
        return Err(Error::Parameter(format!("bandwidth must be positive, got {sigma}")));
    }
    let n = teacher.count;
    let denom = 2.0 * sigma * sigma;
    let matrix = DenseMatrix::from_fn(n, n, |i, j| {
        let d2 = sq_dist(teacher.row(i), student.row(j));
        let d = match distance {
            KernelDistance::Squared => d2,
            KernelDistance::Unsquared => d2.sqrt(),
        };
        // Entries stay strictly positive even where exp underflows.
        (-d / denom).exp().max(f64::MIN_POSITIVE)
    });
    let diagonal = matrix.diagonal();
    Ok(AffinityGraph {
        matrix,
        sigma,
        distance,
        diagonal,
    })
}

/// Median of all N² teacher–student L₂ distances, with fallbacks for
/// degenerate sets (smallest nonzero distance, then 1).
pub fn median_bandwidth(teacher: &PredictionSet, student: &PredictionSet) -> Result<f64> {
    check_pair(teacher, student)?;
    let n = teacher.count;
    let mut dists = Vec::with_capacity(n * n);
    for i in 0..n {
        for j in 0..n {
            dists.push(sq_dist(teacher.row(i), student.row(j)).sqrt());
        }
    }
    if dists.is_empty() {
        return Ok(1.0);
    }
    let med = stats::median(&dists);
    if med > 0.0 {
        return Ok(med);
    }
    Ok(dists
        .iter()
        .copied()
        .filter(|&d| d > 0.0)
        .fold(None, |m: Option<f64>, d| Some(m.map_or(d, |m| m.min(d))))
        .unwrap_or(1.0))
}

/// Indices whose diagonal weight lies strictly below the `theta`-quantile of
/// the diagonal, ascending.
pub fn hard_negative_mask(graph: &AffinityGraph, theta: f64) -> Result<Vec<usize>> {
    if !(theta > 0.0 && theta < 1.0) {
        return Err(Error::Parameter(format!("theta must lie in (0, 1), got {theta}")));
    }
    if graph.diagonal.is_empty() {
        return Ok(Vec::new());
    }
    let q = stats::quantile(&graph.diagonal, theta);
    Ok(graph
        .diagonal
        .iter()
        .enumerate()
        .filter(|(_, &d)| d < q)
        .map(|(i, _)| i)
        .collect())
}

/// Pull an upstream gradient `dL/dA` back to the student and teacher rows.
/// Returns `(d_teacher, d_student)`, both row-major `N × dim`.
pub fn graph_backward(
    graph: &AffinityGraph,
    teacher: &PredictionSet,
    student: &PredictionSet,
    grad_a: &DenseMatrix,
) -> Result<(Vec<f64>, Vec<f64>)> {
    check_pair(teacher, student)?;
    let n = teacher.count;
    let dim = teacher.dim;
    if grad_a.rows() != n || grad_a.cols() != n || graph.len() != n {
        return Err(Error::Shape("gradient does not match the graph size".into()));
    }
    let s2 = graph.sigma * graph.sigma;
    let mut d_teacher = vec![0.0; n * dim];
    let mut d_student = vec![0.0; n * dim];
    for i in 0..n {
        let t = teacher.row(i);
        for j in 0..n {
            let g = grad_a.get(i, j);
            if g == 0.0 {
                continue;
            }
            let a = graph.matrix.get(i, j);
            let s = student.row(j);
            // ∂A/∂sⱼ = coef · (tᵢ - sⱼ); ∂A/∂tᵢ is its negation.
            let coef = match graph.distance {
                KernelDistance::Squared => a / s2,
                KernelDistance::Unsquared => {
                    let d = sq_dist(t, s).sqrt();
                    if d == 0.0 {
                        0.0
                    } else {
                        a / (2.0 * s2 * d)
                    }
                }
            };
            for c in 0..dim {
                let v = g * coef * (t[c] - s[c]);
                d_student[j * dim + c] += v;
                d_teacher[i * dim + c] -= v;
            }
        }
    }
    Ok((d_teacher, d_student))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::symmetric_eigenvalues;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn set(rows: &[&[f64]]) -> PredictionSet {
        let dim = rows[0].len();
        PredictionSet::new(rows.len(), dim, rows.iter().flat_map(|r| r.iter().copied()).collect())
            .unwrap()
    }

    fn random_set(rng: &mut ChaCha8Rng, n: usize, dim: usize) -> PredictionSet {
        let mut v = Vec::with_capacity(n * dim);
        for _ in 0..n {
            let row: Vec<f64> = (0..dim).map(|_| rng.random_range(0.01..1.0)).collect();
            let s: f64 = row.iter().sum();
            v.extend(row.iter().map(|x| x / s));
        }
        PredictionSet::new(n, dim, v).unwrap()
    }

    #[test]
    fn prediction_set_validates_rows() {
        assert!(PredictionSet::new(1, 2, vec![0.5, 0.6]).is_err());
        assert!(PredictionSet::new(1, 2, vec![1.5, -0.5]).is_err());
        assert!(PredictionSet::new(2, 2, vec![0.5, 0.5]).is_err());
    }

    #[test]
    fn kernel_examples() {
        let a = set(&[&[1.0, 0.0]]);
        let b = set(&[&[0.0, 1.0]]);
        let g = build_graph(&a, &b, 1.0, KernelDistance::Squared).unwrap();
        assert!((g.matrix.get(0, 0) - (-1.0f64).exp()).abs() < 1e-15);

        let g = build_graph(&a, &a, 0.3, KernelDistance::Squared).unwrap();
        assert_eq!(g.diagonal, vec![1.0]);

        let g = build_graph(&a, &b, 1e6, KernelDistance::Squared).unwrap();
        assert!((g.matrix.get(0, 0) - 1.0).abs() < 1e-11);

        let g = build_graph(&a, &b, 1.0, KernelDistance::Unsquared).unwrap();
        assert!((g.matrix.get(0, 0) - (-(2f64.sqrt()) / 2.0).exp()).abs() < 1e-15);

        assert!(build_graph(&a, &b, 0.0, KernelDistance::Squared).is_err());
        assert!(build_graph(&a, &set(&[&[1.0, 0.0], &[0.0, 1.0]]), 1.0, KernelDistance::Squared).is_err());
    }

    #[test]
    fn median_bandwidth_cases() {
        let same = set(&[&[0.5, 0.5], &[0.5, 0.5]]);
        assert_eq!(median_bandwidth(&same, &same).unwrap(), 1.0);

        // Points on a line: 0, 1, 2 along the first axis (scaled into the simplex).
        let line = set(&[&[0.0, 1.0], &[0.5, 0.5], &[1.0, 0.0]]);
        let unit = (0.5f64 * 0.5 * 2.0).sqrt();
        assert!((median_bandwidth(&line, &line).unwrap() - unit).abs() < 1e-15);

        // Two one-hot vectors: distances {0, √2, √2, 0}; median is √2 / 2.
        let pair = set(&[&[1.0, 0.0], &[0.0, 1.0]]);
        let mut brute = vec![0.0, 2f64.sqrt(), 2f64.sqrt(), 0.0];
        brute.sort_by(f64::total_cmp);
        let expected = 0.5 * (brute[1] + brute[2]);
        assert_eq!(median_bandwidth(&pair, &pair).unwrap(), expected);

        // Median zero falls back to the smallest nonzero distance.
        let t = set(&[&[1.0, 0.0], &[1.0, 0.0], &[1.0, 0.0]]);
        let s = set(&[&[1.0, 0.0], &[1.0, 0.0], &[0.0, 1.0]]);
        assert!((median_bandwidth(&t, &s).unwrap() - 2f64.sqrt()).abs() < 1e-15);
    }

    #[test]
    fn hard_negative_mask_cases() {
        let g = AffinityGraph::from_matrix(DenseMatrix::from_diag(&[0.1, 0.9, 0.2, 0.8]), 1.0).unwrap();
        assert_eq!(hard_negative_mask(&g, 0.5).unwrap(), vec![0, 2]);
        assert_eq!(hard_negative_mask(&g, 1e-12).unwrap(), vec![0]);
        let flat = AffinityGraph::from_matrix(DenseMatrix::identity(4), 1.0).unwrap();
        assert!(hard_negative_mask(&flat, 0.5).unwrap().is_empty());
        assert!(hard_negative_mask(&g, 1.0).is_err());
        assert!(hard_negative_mask(&g, 0.0).is_err());
    }

    #[test]
    fn swap_symmetry_and_monotonicity() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let t = random_set(&mut rng, 6, 3);
        let s = random_set(&mut rng, 6, 3);
        let ts = build_graph(&t, &s, 0.4, KernelDistance::Squared).unwrap();
        let st = build_graph(&s, &t, 0.4, KernelDistance::Squared).unwrap();
        for i in 0..6 {
            for j in 0..6 {
                assert_eq!(ts.matrix.get(i, j), st.matrix.get(j, i));
            }
        }
        let near = set(&[&[0.6, 0.4]]);
        let far = set(&[&[0.9, 0.1]]);
        let origin = set(&[&[0.5, 0.5]]);
        let a = build_graph(&origin, &near, 0.5, KernelDistance::Squared).unwrap();
        let b = build_graph(&origin, &far, 0.5, KernelDistance::Squared).unwrap();
        assert!(a.matrix.get(0, 0) > b.matrix.get(0, 0));
    }

    #[test]
    fn self_kernel_is_psd() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..10 {
            let n = rng.random_range(2..=32);
            let x = random_set(&mut rng, n, 4);
            let sigma = median_bandwidth(&x, &x).unwrap();
            let g = build_graph(&x, &x, sigma, KernelDistance::Squared).unwrap();
            assert!(symmetric_eigenvalues(&g.matrix).unwrap()[0] >= -1e-8);
        }
    }

    #[test]
    fn backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for distance in [KernelDistance::Squared, KernelDistance::Unsquared] {
            let t = random_set(&mut rng, 4, 3);
            let s = random_set(&mut rng, 4, 3);
            let w = DenseMatrix::from_fn(4, 4, |_, _| rng.random_range(-1.0..1.0));
            let objective = |sv: &[f64]| {
                let m = DenseMatrix::from_fn(4, 4, |i, j| {
                    let d2 = sq_dist(t.row(i), &sv[j * 3..j * 3 + 3]);
                    let d = if distance == KernelDistance::Squared { d2 } else { d2.sqrt() };
                    (-d / (2.0 * 0.3 * 0.3)).exp()
                });
                m.data().iter().zip(w.data()).map(|(a, b)| a * b).sum::<f64>()
            };
            let g = build_graph(&t, &s, 0.3, distance).unwrap();
            let (_, ds) = graph_backward(&g, &t, &s, &w).unwrap();
            let h = 1e-6;
            for k in 0..12 {
                let mut p = s.values().to_vec();
                let mut m = s.values().to_vec();
                p[k] += h;
                m[k] -= h;
                let fd = (objective(&p) - objective(&m)) / (2.0 * h);
                assert!((fd - ds[k]).abs() < 1e-7 * (1.0 + fd.abs()), "{distance:?} {k}: {fd} vs {}", ds[k]);
            }
        }
    }
}
