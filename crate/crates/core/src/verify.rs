//! Built-in self-check: each analytic component against an independent
//! oracle on seeded random inputs.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::affinity::{build_graph, graph_backward, KernelDistance, PredictionSet};
use crate::error::Result;
use crate::linalg::{self, DenseMatrix};
use crate::losses::{contrastive_grad_q, contrastive_loss, loss_agg_pl, Embedding, SignMode, GRAD_AFFINITY};
use crate::metrics::{self, BinaryMask};
use crate::sampling::select_top_n;

/// Deliberate defect injected into a check, to prove the harness can fail.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Fault {
    /// Perturb the closed-form contrastive gradient.
    ContrastiveGradient,
}

impl std::str::FromStr for Fault {
    type Err = crate::Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "contrastive-gradient" => Ok(Fault::ContrastiveGradient),
            other => Err(crate::Error::Usage(format!("unknown fault {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct CheckResult {
    pub name: &'static str,
    pub passed: bool,
    pub cases: usize,
    /// Largest observed error, compared against `tolerance`.
    pub worst: f64,
    pub tolerance: f64,
    /// Inputs of the worst case when the check failed.
    pub detail: Option<String>,
}

struct Tracker {
    worst: f64,
    detail: Option<String>,
}

impl Tracker {
    fn new() -> Self {
        Self { worst: 0.0, detail: None }
    }

    fn observe(&mut self, err: f64, describe: impl FnOnce() -> String) {
        // NaN counts as the worst possible error.
        if err.is_nan() || err > self.worst {
            self.worst = if err.is_nan() { f64::INFINITY } else { err };
            self.detail = Some(describe());
        }
    }

    fn finish(self, name: &'static str, cases: usize, tolerance: f64) -> CheckResult {
        let passed = self.worst <= tolerance;
        CheckResult {
            name,
            passed,
            cases,
            worst: self.worst,
            tolerance,
            detail: if passed { None } else { self.detail },
        }
    }
}

fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let diff: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
    let scale = b.iter().map(|y| y * y).sum::<f64>().sqrt().max(1e-12);
    diff / scale
}

fn unit_vector<R: Rng>(rng: &mut R, d: usize) -> Embedding {
    loop {
        let v: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
        if let Ok(e) = Embedding::normalized(&v) {
            return e;
        }
    }
}

fn random_matrix<R: Rng>(rng: &mut R, rows: usize, cols: usize) -> DenseMatrix {
    DenseMatrix::from_fn(rows, cols, |_, _| rng.random_range(-1.0..1.0))
}

fn random_simplex<R: Rng>(rng: &mut R, count: usize, dim: usize) -> PredictionSet {
    let mut values = Vec::with_capacity(count * dim);
    for _ in 0..count {
        let raw: Vec<f64> = (0..dim).map(|_| rng.random_range(0.05..1.0)).collect();
        let s: f64 = raw.iter().sum();
        values.extend(raw.iter().map(|v| v / s));
    }
    PredictionSet::new(count, dim, values).expect("valid simplex rows")
}

fn check_contrastive(rng: &mut ChaCha8Rng, fault: Option<Fault>) -> Result<CheckResult> {
    const CASES: usize = 100;
    const H: f64 = 1e-6;
    let mut t = Tracker::new();
    for case in 0..CASES {
        let d = rng.random_range(2..=16);
        let q = unit_vector(rng, d);
        let k = unit_vector(rng, d);
        let negs: Vec<Embedding> = (0..rng.random_range(1..=8)).map(|_| unit_vector(rng, d)).collect();
        let tau = 0.2;
        let mut analytic = contrastive_grad_q(&q, &k, &negs, tau)?;
        if fault == Some(Fault::ContrastiveGradient) {
            analytic[0] += 1e-3;
        }
        let mut fd = vec![0.0; d];
        for (i, g) in fd.iter_mut().enumerate() {
            let shifted = |delta: f64| {
                let mut v = q.values().to_vec();
                v[i] += delta;
                contrastive_loss(&Embedding::raw(v), &k, &negs, tau).map(|l| l.value)
            };
            *g = (shifted(H)? - shifted(-H)?) / (2.0 * H);
        }
        let err = rel_err(&analytic, &fd);
        t.observe(err, || {
            format!(
                "case {case}: q={:?} k={:?} negatives={} analytic={analytic:?} fd={fd:?}",
                q.values(),
                k.values(),
                negs.len()
            )
        });
    }
    Ok(t.finish("contrastive_gradient", CASES, 1e-6))
}

fn check_svd(rng: &mut ChaCha8Rng) -> Result<CheckResult> {
    const CASES: usize = 60;
    let mut t = Tracker::new();
    for case in 0..CASES {
        let (r, c) = (rng.random_range(1..=12), rng.random_range(1..=12));
        let m = random_matrix(rng, r, c);
        let dec = linalg::svd(&m)?;
        let err = dec.reconstruct().sub(&m)?.frobenius_norm() / m.frobenius_norm().max(1e-300);
        t.observe(err, || format!("case {case}: {r}x{c} matrix {:?}", m.data()));
    }
    Ok(t.finish("svd_reconstruction", CASES, 1e-10))
}

/// Nuclear norm against square roots of the eigenvalues of the smaller of
/// MᵀM and MMᵀ (the larger one has exact zeros that the square root amplifies).
fn check_nuclear(rng: &mut ChaCha8Rng) -> Result<CheckResult> {
    const CASES: usize = 60;
    let mut t = Tracker::new();
    for case in 0..CASES {
        let (r, c) = (rng.random_range(1..=10), rng.random_range(1..=10));
        let m = random_matrix(rng, r, c);
        let gram = if r >= c {
            m.transpose().matmul(&m)?
        } else {
            m.matmul(&m.transpose())?
        };
        let oracle: f64 = linalg::symmetric_eigenvalues(&gram)?
            .iter()
            .map(|&l| l.max(0.0).sqrt())
            .sum();
        let got = linalg::nuclear_norm(&m)?;
        t.observe((got - oracle).abs() / oracle.max(1.0), || {
            format!("case {case}: {r}x{c} matrix {:?}, got {got}, oracle {oracle}", m.data())
        });
    }
    Ok(t.finish("nuclear_norm", CASES, 1e-9))
}

/// SVT minimizes ½‖X − M‖² + τ‖X‖₊: no small perturbation does better.
fn check_svt(rng: &mut ChaCha8Rng) -> Result<CheckResult> {
    const CASES: usize = 30;
    const PERTURBATIONS: usize = 20;
    let mut t = Tracker::new();
    for case in 0..CASES {
        let n = rng.random_range(2..=8);
        let m = random_matrix(rng, n, n);
        let tau = rng.random_range(0.05..1.0);
        let objective = |x: &DenseMatrix| -> Result<f64> {
            let r = x.sub(&m)?.frobenius_norm();
            Ok(0.5 * r * r + tau * linalg::nuclear_norm(x)?)
        };
        let x = linalg::svt(&m, tau)?;
        let base = objective(&x)?;
        for _ in 0..PERTURBATIONS {
            let p = random_matrix(rng, n, n).scale(1e-3);
            let moved = objective(&x.sub(&p)?)?;
            // Positive when the perturbed point beats the prox.
            t.observe((base - moved).max(0.0), || {
                format!("case {case}: tau={tau} matrix {:?}", m.data())
            });
        }
    }
    Ok(t.finish("svt_prox", CASES * PERTURBATIONS, 1e-8))
}

fn check_kernel(rng: &mut ChaCha8Rng) -> Result<CheckResult> {
    const CASES: usize = 30;
    let mut t = Tracker::new();
    for case in 0..CASES {
        let n = rng.random_range(2..=32);
        let set = random_simplex(rng, n, 3);
        let sigma = rng.random_range(0.05..1.0);
        let g = build_graph(&set, &set, sigma, KernelDistance::Squared)?;
        let min_eig = linalg::symmetric_eigenvalues(&g.matrix)?
            .into_iter()
            .fold(f64::INFINITY, f64::min);
        let diag_err = g.diagonal.iter().map(|d| (d - 1.0).abs()).fold(0.0, f64::max);
        t.observe((-min_eig).max(0.0).max(diag_err), || {
            format!("case {case}: n={n} sigma={sigma} min eigenvalue {min_eig}, diagonal error {diag_err}")
        });
    }
    Ok(t.finish("kernel_psd", CASES, 1e-8))
}

/// Affinity loss gradient, pulled back to the student rows, against FD.
fn check_affinity_gradient(rng: &mut ChaCha8Rng) -> Result<CheckResult> {
    const CASES: usize = 20;
    const H: f64 = 1e-6;
    let mut t = Tracker::new();
    for case in 0..CASES {
        let n = rng.random_range(2..=6);
        let dim = 3;
        let teacher = random_simplex(rng, n, dim);
        let student = random_simplex(rng, n, dim);
        let sigma = rng.random_range(0.2..1.0);
        let value = |s: &[f64]| -> Result<f64> {
            let set = PredictionSet::new(n, dim, s.to_vec())?;
            let g = build_graph(&teacher, &set, sigma, KernelDistance::Squared)?;
            Ok(loss_agg_pl(&g, -1.0, SignMode::TraceMax)?.value)
        };
        let g = build_graph(&teacher, &student, sigma, KernelDistance::Squared)?;
        let l = loss_agg_pl(&g, -1.0, SignMode::TraceMax)?;
        let ga = DenseMatrix::new(n, n, l.gradient(GRAD_AFFINITY).expect("affinity gradient").to_vec())?;
        let (_, analytic) = graph_backward(&g, &teacher, &student, &ga)?;
        // Perturb along directions that keep each row on the simplex.
        let mut worst = 0.0f64;
        for row in 0..n {
            let dir: Vec<f64> = {
                let raw: Vec<f64> = (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect();
                let mean = raw.iter().sum::<f64>() / dim as f64;
                raw.iter().map(|v| v - mean).collect()
            };
            let shifted = |delta: f64| {
                let mut v = student.values().to_vec();
                for c in 0..dim {
                    v[row * dim + c] += delta * dir[c];
                }
                value(&v)
            };
            let fd = (shifted(H)? - shifted(-H)?) / (2.0 * H);
            let an: f64 = (0..dim).map(|c| analytic[row * dim + c] * dir[c]).sum();
            worst = worst.max((an - fd).abs() / fd.abs().max(an.abs()).max(1e-3));
        }
        t.observe(worst, || format!("case {case}: n={n} sigma={sigma}"));
    }
    Ok(t.finish("affinity_gradient", CASES, 1e-5))
}

fn check_top_n(rng: &mut ChaCha8Rng) -> Result<CheckResult> {
    const CASES: usize = 300;
    let mut t = Tracker::new();
    for case in 0..CASES {
        let total = rng.random_range(2..=20);
        // Coarse scores force ties.
        let scores: Vec<f64> = (0..total).map(|_| rng.random_range(0..5) as f64 * 0.25).collect();
        let anchor = rng.random_range(0..total);
        let n = rng.random_range(1..total);
        let got = select_top_n(&scores, anchor, n)?;
        let mut oracle: Vec<(f64, usize)> = (0..total).filter(|&i| i != anchor).map(|i| (-scores[i], i)).collect();
        oracle.sort_by(|a, b| a.partial_cmp(b).expect("finite scores"));
        let mut expected: Vec<usize> = oracle[..n].iter().map(|&(_, i)| i).collect();
        expected.sort_unstable();
        let mismatch = if got.positives == expected { 0.0 } else { 1.0 };
        t.observe(mismatch, || {
            format!(
                "case {case}: scores={scores:?} anchor={anchor} n={n} got {:?}, expected {expected:?}",
                got.positives
            )
        });
    }
    Ok(t.finish("top_n_selection", CASES, 0.0))
}

fn brute_force_surface(a: &BinaryMask, b: &BinaryMask) -> Vec<f64> {
    let w = a.width();
    let pts = |m: &BinaryMask| -> Vec<(f64, f64)> {
        m.boundary()
            .into_iter()
            .map(|i| ((i / w) as f64, (i % w) as f64))
            .collect()
    };
    let (pa, pb) = (pts(a), pts(b));
    let nearest = |from: &[(f64, f64)], to: &[(f64, f64)]| -> Vec<f64> {
        from.iter()
            .map(|p| {
                to.iter()
                    .map(|q| ((p.0 - q.0).powi(2) + (p.1 - q.1).powi(2)).sqrt())
                    .fold(f64::INFINITY, f64::min)
            })
            .collect()
    };
    let mut d = nearest(&pa, &pb);
    d.extend(nearest(&pb, &pa));
    d
}

fn check_metrics(rng: &mut ChaCha8Rng) -> Result<CheckResult> {
    const CASES: usize = 30;
    let mut t = Tracker::new();
    let mut done = 0;
    while done < CASES {
        let mut mask = || {
            let bits: Vec<bool> = (0..256).map(|_| rng.random_bool(0.3)).collect();
            BinaryMask::new(16, 16, bits).expect("16x16")
        };
        let (a, b) = (mask(), mask());
        if a.is_empty() || b.is_empty() {
            continue;
        }
        let d = brute_force_surface(&a, &b);
        let oracle_asd = d.iter().sum::<f64>() / d.len() as f64;
        let oracle_hd = crate::stats::quantile(&d, 0.95);
        let err = (metrics::asd(&a, &b)? - oracle_asd)
            .abs()
            .max((metrics::hd95(&a, &b)? - oracle_hd).abs());
        let case = done;
        t.observe(err, || format!("case {case}: a={:?} b={:?}", a.bits(), b.bits()));
        done += 1;
    }
    Ok(t.finish("surface_metrics", CASES, 1e-9))
}

/// Run every check with inputs derived from `seed`.
pub fn run(seed: u64, fault: Option<Fault>) -> Result<Vec<CheckResult>> {
    let checks: [fn(&mut ChaCha8Rng, Option<Fault>) -> Result<CheckResult>; 8] = [
        check_contrastive,
        |r, _| check_svd(r),
        |r, _| check_nuclear(r),
        |r, _| check_svt(r),
        |r, _| check_kernel(r),
        |r, _| check_affinity_gradient(r),
        |r, _| check_top_n(r),
        |r, _| check_metrics(r),
    ];
    checks
        .iter()
        .enumerate()
        .map(|(i, check)| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(i as u64);
            check(&mut rng, fault)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn all_checks_pass() {
        for r in run(7, None).unwrap() {
            assert!(r.passed, "{} failed: worst {} > {} ({:?})", r.name, r.worst, r.tolerance, r.detail);
        }
    }

    #[test]
    fn injected_fault_is_caught() {
        let results = run(7, Some(Fault::ContrastiveGradient)).unwrap();
        let c = results.iter().find(|r| r.name == "contrastive_gradient").unwrap();
        assert!(!c.passed);
        assert!(c.detail.as_deref().unwrap().contains("analytic="));
        assert!(results.iter().filter(|r| r.name != "contrastive_gradient").all(|r| r.passed));
    }
}
