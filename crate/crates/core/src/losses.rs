//! Loss terms of the training objective.
//!
//! Every loss returns a [`LossValue`] holding the scalar and the gradients
//! with respect to its differentiable inputs, keyed by input name:
//!
//! | loss | gradient keys |
//! |------|---------------|
//! | [`loss_agg_pl`] | `affinity` (N×N, row-major) |
//! | [`contrastive_loss`], [`loss_agg_rw`] | `q` |
//! | [`loss_supervised`], [`loss_consistency`] | `probs` (pixel-major M×C) |

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::affinity::{AffinityGraph, PredictionSet};
use crate::error::{Error, Result};
use crate::linalg::{self, DenseMatrix};
use crate::tensor::LabelMap;

/// Probability clamp inside logarithms.
pub const PROB_EPS: f64 = 1e-7;
/// Additive smoothing of the soft-Dice ratio.
pub const DICE_SMOOTH: f64 = 1.0;
const UNIT_TOL: f64 = 1e-6;

pub const GRAD_AFFINITY: &str = "affinity";
pub const GRAD_QUERY: &str = "q";
pub const GRAD_PROBS: &str = "probs";

/// Scalar loss with optional named gradients.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct LossValue {
    pub value: f64,
    pub gradients: BTreeMap<String, Vec<f64>>,
}

impl LossValue {
    pub fn zero() -> Self {
        Self::default()
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            value,
            gradients: BTreeMap::new(),
        }
    }

    pub fn with_gradient(mut self, name: &str, grad: Vec<f64>) -> Self {
        self.gradients.insert(name.to_string(), grad);
        self
    }

    pub fn gradient(&self, name: &str) -> Option<&[f64]> {
        self.gradients.get(name).map(Vec::as_slice)
    }

    /// Add `other` into `self`, merging gradients per key.
    pub fn accumulate(&mut self, other: &LossValue) -> Result<()> {
        self.value += other.value;
        for (k, g) in &other.gradients {
            match self.gradients.get_mut(k) {
                Some(acc) => {
                    if acc.len() != g.len() {
                        return Err(Error::Shape(format!(
                            "gradient {k:?} has length {} and {}",
                            acc.len(),
                            g.len()
                        )));
                    }
                    acc.iter_mut().zip(g).for_each(|(a, b)| *a += b);
                }
                None => {
                    self.gradients.insert(k.clone(), g.clone());
                }
            }
        }
        Ok(())
    }

    pub fn scaled(&self, s: f64) -> Self {
        Self {
            value: self.value * s,
            gradients: self
                .gradients
                .iter()
                .map(|(k, g)| (k.clone(), g.iter().map(|v| v * s).collect()))
                .collect(),
        }
    }
}

/// Embedding vector; `unit_norm` embeddings are validated at construction.
#[derive(Debug, Clone, PartialEq)]
pub struct Embedding {
    values: Vec<f64>,
    unit_norm: bool,
}

impl Embedding {
    pub fn new(values: Vec<f64>, unit_norm: bool) -> Result<Self> {
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("embedding".into()));
        }
        if unit_norm {
            let n = l2(&values);
            if (n - 1.0).abs() > UNIT_TOL {
                return Err(Error::Domain(format!("embedding norm is {n}, expected 1")));
            }
        }
        Ok(Self { values, unit_norm })
    }

    /// Unconstrained vector (e.g. a perturbed query in a gradient check).
    pub fn raw(values: Vec<f64>) -> Self {
        Self {
            values,
            unit_norm: false,
        }
    }

    /// L₂-normalize `values`.
    pub fn normalized(values: &[f64]) -> Result<Self> {
        let n = l2(values);
        if !(n > 0.0) || !n.is_finite() {
            return Err(Error::DegenerateNorm);
        }
        Ok(Self {
            values: values.iter().map(|v| v / n).collect(),
            unit_norm: true,
        })
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }

    pub fn is_unit_norm(&self) -> bool {
        self.unit_norm
    }

    pub fn dot(&self, other: &Embedding) -> f64 {
        dot(&self.values, &other.values)
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn l2(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// Hyperparameters of the contrastive and affinity terms.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HyperParams {
    pub tau: f64,
    pub gamma: f64,
    pub theta: f64,
    pub ema_alpha: f64,
    pub n_positives: usize,
    pub bank_capacity: usize,
    /// Carried for completeness; no implemented term consumes it.
    pub lambda_unused: f64,
}

impl Default for HyperParams {
    fn default() -> Self {
        Self {
            tau: 0.2,
            gamma: -1.0,
            theta: 0.25,
            ema_alpha: 0.99,
            n_positives: 4,
            bank_capacity: 512,
            lambda_unused: 4.0,
        }
    }
}

impl HyperParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0) || !self.tau.is_finite() {
            return Err(Error::Config(format!("tau must be positive, got {}", self.tau)));
        }
        if !self.gamma.is_finite() {
            return Err(Error::Config("gamma must be finite".into()));
        }
        if !(self.theta > 0.0 && self.theta < 1.0) {
            return Err(Error::Config(format!("theta must lie in (0, 1), got {}", self.theta)));
        }
        if !(0.0..=1.0).contains(&self.ema_alpha) {
            return Err(Error::Config(format!(
                "ema_alpha must lie in [0, 1], got {}",
                self.ema_alpha
            )));
        }
        if self.n_positives == 0 {
            return Err(Error::Config("n_positives must be at least 1".into()));
        }
        if self.bank_capacity == 0 {
            return Err(Error::Config("bank_capacity must be at least 1".into()));
        }
        Ok(())
    }
}

/// How the affinity pseudo-label loss combines trace and nuclear norm.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum SignMode {
    /// `Σᵢ Aᵢᵢ + γ‖A‖₊` as printed.
    Literal,
    /// `-(1/N) tr(A) + |γ| ‖A‖₊`: maximize agreement, minimize rank.
    TraceMax,
    /// `(|γ| ‖A‖₊ - tr(A)) / N`: both terms averaged over nodes. With
    /// `|γ| = 1` and a unit-diagonal `A` this is non-negative and vanishes
    /// exactly when `A` is symmetric positive semidefinite, so it can no
    /// longer be lowered by pulling the diagonal down.
    #[default]
    PerNode,
}

impl std::str::FromStr for SignMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "literal" => Ok(Self::Literal),
            "trace_max" => Ok(Self::TraceMax),
            "per_node" => Ok(Self::PerNode),
            other => Err(Error::Config(format!(
                "unknown sign mode {other:?} (expected literal|trace_max|per_node)"
            ))),
        }
    }
}

/// Affinity-graph pseudo-label loss; gradient is with respect to `A`.
pub fn loss_agg_pl(graph: &AffinityGraph, gamma: f64, mode: SignMode) -> Result<LossValue> {
    let a = &graph.matrix;
    let n = a.rows();
    if n == 0 {
        return Ok(LossValue::zero());
    }
    let (trace_w, nuc_w) = match mode {
        SignMode::Literal => (1.0, gamma),
        SignMode::TraceMax => (-1.0 / n as f64, gamma.abs()),
        SignMode::PerNode => (-1.0 / n as f64, gamma.abs() / n as f64),
    };
    let tr = linalg::trace(a)?;
    let (nuc, sub) = if nuc_w == 0.0 || a.data().iter().all(|&v| v == 0.0) {
        (0.0, DenseMatrix::zeros(n, n))
    } else {
        let dec = linalg::svd(a)?;
        let ones: Vec<f64> = dec.sigma.iter().map(|&s| if s > 0.0 { 1.0 } else { 0.0 }).collect();
        (dec.sigma.iter().sum(), dec.recompose_with(&ones))
    };
    let mut grad = sub.scale(nuc_w).into_data();
    for i in 0..n {
        grad[i * n + i] += trace_w;
    }
    Ok(LossValue::scalar(trace_w * tr + nuc_w * nuc).with_gradient(GRAD_AFFINITY, grad))
}

fn check_contrastive(q: &Embedding, k_pos: &Embedding, negatives: &[Embedding], tau: f64) -> Result<()> {
    if negatives.is_empty() {
        return Err(Error::Parameter("contrastive loss needs at least one negative".into()));
    }
    if !(tau > 0.0) {
        return Err(Error::Parameter(format!("temperature must be positive, got {tau}")));
    }
    let d = q.dim();
    if k_pos.dim() != d || negatives.iter().any(|n| n.dim() != d) {
        return Err(Error::Shape("embeddings have different dimensions".into()));
    }
    Ok(())
}

/// Softmax over `[k⁺, n₁, …]` logits and the log-partition.
fn contrastive_softmax(q: &Embedding, k_pos: &Embedding, negatives: &[Embedding], tau: f64) -> (Vec<f64>, f64) {
    let logits: Vec<f64> = std::iter::once(k_pos)
        .chain(negatives)
        .map(|z| q.dot(z) / tau)
        .collect();
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let sum: f64 = logits.iter().map(|l| (l - max).exp()).sum();
    let log_z = max + sum.ln();
    let probs = logits.iter().map(|l| (l - log_z).exp()).collect();
    (probs, log_z - logits[0])
}

/// Closed-form `∂L/∂q = -(1/τ)((1 - p_k) k⁺ - Σ pₙ n)`.
fn grad_from_probs(probs: &[f64], k_pos: &Embedding, negatives: &[Embedding], tau: f64) -> Vec<f64> {
    let mut g: Vec<f64> = k_pos.values().iter().map(|k| -(1.0 - probs[0]) * k / tau).collect();
    for (p, n) in probs[1..].iter().zip(negatives) {
        for (gi, ni) in g.iter_mut().zip(n.values()) {
            *gi += p * ni / tau;
        }
    }
    g
}

/// Memory-bank InfoNCE loss for one query.
pub fn contrastive_loss(q: &Embedding, k_pos: &Embedding, negatives: &[Embedding], tau: f64) -> Result<LossValue> {
    check_contrastive(q, k_pos, negatives, tau)?;
    let (probs, value) = contrastive_softmax(q, k_pos, negatives, tau);
    let grad = grad_from_probs(&probs, k_pos, negatives, tau);
    Ok(LossValue::scalar(value).with_gradient(GRAD_QUERY, grad))
}

pub fn contrastive_grad_q(q: &Embedding, k_pos: &Embedding, negatives: &[Embedding], tau: f64) -> Result<Vec<f64>> {
    check_contrastive(q, k_pos, negatives, tau)?;
    let (probs, _) = contrastive_softmax(q, k_pos, negatives, tau);
    Ok(grad_from_probs(&probs, k_pos, negatives, tau))
}

/// Synthesize a hard negative `normalize(a·nᵢ + (1 - a)·nⱼ)`.
pub fn mix_hard_negative(n_i: &Embedding, n_j: &Embedding, a_ii: f64) -> Result<Embedding> {
    if n_i.dim() != n_j.dim() {
        return Err(Error::Shape("mixed negatives have different dimensions".into()));
    }
    if !(0.0..=1.0).contains(&a_ii) {
        return Err(Error::Parameter(format!("mixing weight must lie in [0, 1], got {a_ii}")));
    }
    let mixed: Vec<f64> = n_i
        .values()
        .iter()
        .zip(n_j.values())
        .map(|(x, y)| a_ii * x + (1.0 - a_ii) * y)
        .collect();
    Embedding::normalized(&mixed).map_err(|_| Error::DegenerateMix)
}

/// Contrastive loss against synthesized hard negatives, falling back to the
/// raw bank when the hard set is empty.
pub fn loss_agg_rw(
    q: &Embedding,
    k_pos: &Embedding,
    hard_set: &[Embedding],
    raw_bank: &[Embedding],
    tau: f64,
) -> Result<LossValue> {
    if hard_set.is_empty() {
        log::debug!("empty hard-negative set; using {} raw bank negatives", raw_bank.len());
        return contrastive_loss(q, k_pos, raw_bank, tau);
    }
    contrastive_loss(q, k_pos, hard_set, tau)
}

/// `½·CE + ½·(1 - mean soft Dice)` over per-pixel class probabilities.
pub fn loss_supervised(pred: &PredictionSet, truth: &LabelMap) -> Result<LossValue> {
    let m = pred.count();
    let c = pred.dim();
    if truth.data().len() != m {
        return Err(Error::Shape(format!(
            "prediction has {m} pixels, label map has {}",
            truth.data().len()
        )));
    }
    if let Some(bad) = truth.data().iter().find(|&&l| l as usize >= c) {
        return Err(Error::Data(format!("label {bad} out of range for {c} classes")));
    }
    let p = pred.values();
    let mut grad = vec![0.0; m * c];
    let inv_m = 1.0 / m as f64;

    let mut ce = 0.0;
    for (px, &label) in truth.data().iter().enumerate() {
        let idx = px * c + label as usize;
        let v = p[idx];
        if v > PROB_EPS {
            ce -= v.ln();
            grad[idx] -= 0.5 * inv_m / v;
        } else {
            ce -= PROB_EPS.ln();
        }
    }
    ce *= inv_m;

    let mut dice_sum = 0.0;
    for class in 0..c {
        let mut inter = 0.0;
        let mut psum = 0.0;
        let mut gsum = 0.0;
        for (px, &label) in truth.data().iter().enumerate() {
            let g = if label as usize == class { 1.0 } else { 0.0 };
            let v = p[px * c + class];
            inter += v * g;
            psum += v;
            gsum += g;
        }
        let num = 2.0 * inter + DICE_SMOOTH;
        let den = psum + gsum + DICE_SMOOTH;
        dice_sum += num / den;
        // d(dice)/dp = (2g·den - num) / den²; the loss takes -½ · mean over classes.
        let scale = -0.5 / c as f64 / (den * den);
        for (px, &label) in truth.data().iter().enumerate() {
            let g = if label as usize == class { 1.0 } else { 0.0 };
            grad[px * c + class] += scale * (2.0 * g * den - num);
        }
    }
    let dice_term = 1.0 - dice_sum / c as f64;
    Ok(LossValue::scalar(0.5 * ce + 0.5 * dice_term).with_gradient(GRAD_PROBS, grad))
}

/// Cross entropy of the student against the (constant) teacher distribution.
pub fn loss_consistency(student: &PredictionSet, teacher: &PredictionSet) -> Result<LossValue> {
    if student.count() != teacher.count() || student.dim() != teacher.dim() {
        return Err(Error::Shape(format!(
            "student is {}x{}, teacher is {}x{}",
            student.count(),
            student.dim(),
            teacher.count(),
            teacher.dim()
        )));
    }
    let inv_m = 1.0 / student.count().max(1) as f64;
    let mut value = 0.0;
    let mut grad = vec![0.0; student.values().len()];
    for ((g, &s), &t) in grad.iter_mut().zip(student.values()).zip(teacher.values()) {
        if t == 0.0 {
            continue;
        }
        if s > PROB_EPS {
            value -= t * s.ln();
            *g = -t * inv_m / s;
        } else {
            value -= t * PROB_EPS.ln();
        }
    }
    Ok(LossValue::scalar(value * inv_m).with_gradient(GRAD_PROBS, grad))
}

/// Unweighted sum of the four objective terms.
pub fn loss_total(sup: &LossValue, reg: &LossValue, agg_pl: &LossValue, agg_rw: &LossValue) -> Result<LossValue> {
    let mut total = LossValue::zero();
    for (name, term) in [("sup", sup), ("reg", reg), ("agg_pl", agg_pl), ("agg_rw", agg_rw)] {
        if !term.value.is_finite() {
            return Err(Error::NonFinite(format!("loss term {name}")));
        }
        total.accumulate(term)?;
    }
    Ok(total)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::affinity::{build_graph, KernelDistance};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::f64::consts::LN_2;

    fn unit(v: &[f64]) -> Embedding {
        Embedding::normalized(v).unwrap()
    }

    fn random_unit(rng: &mut ChaCha8Rng, d: usize) -> Embedding {
        let v: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
        unit(&v)
    }

    #[test]
    fn pl_loss_on_identity_and_zero() {
        let g = AffinityGraph::from_matrix(DenseMatrix::identity(5), 1.0).unwrap();
        let l = loss_agg_pl(&g, -1.0, SignMode::TraceMax).unwrap();
        assert!((l.value - 4.0).abs() < 1e-12);
        let z = AffinityGraph::from_matrix(DenseMatrix::zeros(3, 3), 1.0).unwrap();
        assert_eq!(loss_agg_pl(&z, -1.0, SignMode::TraceMax).unwrap().value, 0.0);
        assert_eq!(loss_agg_pl(&z, -1.0, SignMode::Literal).unwrap().value, 0.0);
    }

    #[test]
    fn pl_trace_max_prefers_diagonal_mass() {
        let n = 5;
        let ident = AffinityGraph::from_matrix(DenseMatrix::identity(n), 1.0).unwrap();
        let base = loss_agg_pl(&ident, -1.0, SignMode::TraceMax).unwrap().value;
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..20 {
            let mut perm: Vec<usize> = (0..n).collect();
            use rand::seq::SliceRandom;
            perm.shuffle(&mut rng);
            if perm.iter().enumerate().all(|(i, &p)| i == p) {
                continue;
            }
            let m = DenseMatrix::from_fn(n, n, |i, j| if perm[i] == j { 1.0 } else { 0.0 });
            let g = AffinityGraph::from_matrix(m, 1.0).unwrap();
            assert!(loss_agg_pl(&g, -1.0, SignMode::TraceMax).unwrap().value > base);
        }
    }

    #[test]
    fn per_node_pl_vanishes_on_psd_unit_diagonal() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let n = 6;
        let pts: Vec<Embedding> = (0..n).map(|_| random_unit(&mut rng, 3)).collect();
        let gram = DenseMatrix::from_fn(n, n, |i, j| pts[i].dot(&pts[j]));
        let g = AffinityGraph::from_matrix(gram, 1.0).unwrap();
        assert!(loss_agg_pl(&g, -1.0, SignMode::PerNode).unwrap().value.abs() < 1e-10);
        // A non-identity permutation has the same nuclear norm but less trace.
        let p = DenseMatrix::from_fn(n, n, |i, j| if (i + 1) % n == j { 1.0 } else { 0.0 });
        let g = AffinityGraph::from_matrix(p, 1.0).unwrap();
        let l = loss_agg_pl(&g, -1.0, SignMode::PerNode).unwrap().value;
        assert!((l - 1.0).abs() < 1e-10);
    }

    #[test]
    fn pl_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let a = DenseMatrix::from_fn(4, 4, |_, _| rng.random_range(0.1..1.0));
        for mode in [SignMode::Literal, SignMode::TraceMax, SignMode::PerNode] {
            let g = AffinityGraph::from_matrix(a.clone(), 1.0).unwrap();
            let l = loss_agg_pl(&g, -1.0, mode).unwrap();
            let grad = l.gradient(GRAD_AFFINITY).unwrap();
            let h = 1e-6;
            for k in 0..16 {
                let mut p = a.data().to_vec();
                let mut m = a.data().to_vec();
                p[k] += h;
                m[k] -= h;
                let f = |d: Vec<f64>| {
                    let g = AffinityGraph::from_matrix(DenseMatrix::new(4, 4, d).unwrap(), 1.0).unwrap();
                    loss_agg_pl(&g, -1.0, mode).unwrap().value
                };
                let fd = (f(p) - f(m)) / (2.0 * h);
                assert!((fd - grad[k]).abs() < 1e-7, "{mode:?} {k}: {fd} vs {}", grad[k]);
            }
        }
    }

    #[test]
    fn contrastive_scalar_cases() {
        let q = unit(&[1.0, 0.0]);
        let k = unit(&[0.0, 1.0]);
        let n = unit(&[0.0, -1.0]);
        // qᵀk = qᵀn = 0
        let l = contrastive_loss(&q, &k, std::slice::from_ref(&n), 0.2).unwrap();
        assert!((l.value - LN_2).abs() < 1e-12);

        let l = contrastive_loss(&q, &q, std::slice::from_ref(&k), 0.2).unwrap();
        assert!((l.value - (1.0 + (-5.0f64).exp()).ln()).abs() < 1e-12);
        assert!((l.value - 0.0067153).abs() < 1e-7);

        let negs = vec![q.clone(); 7];
        let l = contrastive_loss(&q, &q, &negs, 0.2).unwrap();
        assert!((l.value - 8f64.ln()).abs() < 1e-12);

        assert!(matches!(contrastive_loss(&q, &k, &[], 0.2), Err(Error::Parameter(_))));
    }

    #[test]
    fn contrastive_gradient_saturates() {
        let q = unit(&[1.0, 0.0, 0.0]);
        let n = unit(&[-1.0, 0.0, 0.0]);
        let g = contrastive_grad_q(&q, &q, std::slice::from_ref(&n), 0.01).unwrap();
        assert!(g.iter().all(|v| v.abs() < 1e-60));
    }

    #[test]
    fn contrastive_gradient_orthogonal_case() {
        // p_k = ½, so ∂L/∂q = -(1/2τ)(k⁺ - n) = -(1/τ)k⁺ when n = -k⁺.
        let q = unit(&[1.0, 0.0]);
        let k = unit(&[0.0, 1.0]);
        let n = unit(&[0.0, -1.0]);
        let g = contrastive_grad_q(&q, &k, std::slice::from_ref(&n), 0.2).unwrap();
        assert!(g[0].abs() < 1e-15 && (g[1] + 5.0).abs() < 1e-12);
    }

    #[test]
    fn contrastive_permutation_invariance_and_monotonicity() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let q = random_unit(&mut rng, 8);
        let k = random_unit(&mut rng, 8);
        let mut negs: Vec<Embedding> = (0..10).map(|_| random_unit(&mut rng, 8)).collect();
        let a = contrastive_loss(&q, &k, &negs, 0.2).unwrap().value;
        negs.reverse();
        negs.swap(1, 6);
        let b = contrastive_loss(&q, &k, &negs, 0.2).unwrap().value;
        assert!((a - b).abs() < 1e-12);

        // Rotate k⁺ toward q: loss strictly decreases as qᵀk⁺ grows.
        let mut last = f64::INFINITY;
        for t in [0.0, 0.25, 0.5, 0.75, 1.0] {
            let v: Vec<f64> = q.values().iter().zip(k.values()).map(|(a, b)| t * a + (1.0 - t) * b).collect();
            let kt = unit(&v);
            let l = contrastive_loss(&q, &kt, &negs, 0.2).unwrap().value;
            assert!(l < last);
            last = l;
        }
    }

    #[test]
    fn mixing_cases() {
        let a = unit(&[1.0, 0.0]);
        let b = unit(&[0.0, 1.0]);
        assert_eq!(mix_hard_negative(&a, &b, 1.0).unwrap().values(), a.values());
        assert_eq!(mix_hard_negative(&a, &b, 0.0).unwrap().values(), b.values());
        let h = mix_hard_negative(&a, &b, 0.5).unwrap();
        assert!((h.values()[0] - 0.707107).abs() < 1e-6 && (h.values()[1] - 0.707107).abs() < 1e-6);
        let neg_a = unit(&[-1.0, 0.0]);
        assert!(matches!(mix_hard_negative(&a, &neg_a, 0.5), Err(Error::DegenerateMix)));
    }

    #[test]
    fn mixing_stays_unit_and_in_cone() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for _ in 0..200 {
            let a = random_unit(&mut rng, 6);
            let b = random_unit(&mut rng, 6);
            let w: f64 = rng.random_range(0.0..=1.0);
            let Ok(h) = mix_hard_negative(&a, &b, w) else { continue };
            assert!((l2(h.values()) - 1.0).abs() < 1e-12);
            // h = α a + β b with α, β ≥ 0.
            let (aa, bb, ab) = (a.dot(&a), b.dot(&b), a.dot(&b));
            let (ha, hb) = (h.dot(&a), h.dot(&b));
            let det = aa * bb - ab * ab;
            if det.abs() > 1e-9 {
                let alpha = (ha * bb - hb * ab) / det;
                let beta = (hb * aa - ha * ab) / det;
                assert!(alpha >= -1e-9 && beta >= -1e-9);
            }
        }
    }

    #[test]
    fn rw_cases() {
        let q = unit(&[1.0, 0.0]);
        let k = unit(&[0.0, 1.0]);
        let l = loss_agg_rw(&q, &k, std::slice::from_ref(&k), &[], 0.2).unwrap();
        assert!((l.value - LN_2).abs() < 1e-12);
        let l = loss_agg_rw(&q, &q, std::slice::from_ref(&k), &[], 0.2).unwrap();
        assert!((l.value - 0.0067153).abs() < 1e-7);
        let fallback = loss_agg_rw(&q, &q, &[], std::slice::from_ref(&k), 0.2).unwrap();
        assert_eq!(fallback, l);
        assert!(loss_agg_rw(&q, &q, &[], &[], 0.2).is_err());
    }

    #[test]
    fn supervised_cases() {
        let truth = LabelMap::new(1, 4, vec![0, 1, 1, 0]).unwrap();
        let perfect = PredictionSet::new(4, 2, vec![1.0, 0.0, 0.0, 1.0, 0.0, 1.0, 1.0, 0.0]).unwrap();
        let l = loss_supervised(&perfect, &truth).unwrap();
        assert!(l.value.abs() < 1e-7);
        let uniform = PredictionSet::new(4, 2, vec![0.5; 8]).unwrap();
        let l = loss_supervised(&uniform, &truth).unwrap();
        // CE = ln 2; Dice per class = (2·1 + 1)/(2 + 2 + 1) = 0.6.
        assert!((l.value - (0.5 * LN_2 + 0.5 * 0.4)).abs() < 1e-12);
        let bad = LabelMap::new(1, 4, vec![0, 2, 1, 0]).unwrap();
        assert!(matches!(loss_supervised(&uniform, &bad), Err(Error::Data(_))));
    }

    #[test]
    fn supervised_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let (m, c) = (9, 3);
        let raw: Vec<f64> = (0..m * c).map(|_| rng.random_range(0.05..1.0)).collect();
        let probs = normalize_rows(&raw, c);
        let truth = LabelMap::new(3, 3, (0..m).map(|_| rng.random_range(0..c as u8)).collect()).unwrap();
        let l = loss_supervised(&PredictionSet::new(m, c, probs.clone()).unwrap(), &truth).unwrap();
        let grad = l.gradient(GRAD_PROBS).unwrap();
        // The loss is defined on the simplex; differentiate along unconstrained
        // coordinates by evaluating the formula directly.
        let f = |p: &[f64]| supervised_formula(p, &truth, c);
        let h = 1e-6;
        for k in 0..m * c {
            let mut a = probs.clone();
            let mut b = probs.clone();
            a[k] += h;
            b[k] -= h;
            let fd = (f(&a) - f(&b)) / (2.0 * h);
            assert!((fd - grad[k]).abs() < 1e-7, "{k}: {fd} vs {}", grad[k]);
        }
    }

    fn normalize_rows(raw: &[f64], c: usize) -> Vec<f64> {
        raw.chunks(c)
            .flat_map(|r| {
                let s: f64 = r.iter().sum();
                r.iter().map(move |v| v / s).collect::<Vec<_>>()
            })
            .collect()
    }

    fn supervised_formula(p: &[f64], truth: &LabelMap, c: usize) -> f64 {
        let m = truth.data().len();
        let ce: f64 = truth
            .data()
            .iter()
            .enumerate()
            .map(|(px, &l)| -p[px * c + l as usize].max(PROB_EPS).ln())
            .sum::<f64>()
            / m as f64;
        let mut dice = 0.0;
        for class in 0..c {
            let (mut i, mut ps, mut gs) = (0.0, 0.0, 0.0);
            for (px, &l) in truth.data().iter().enumerate() {
                let g = (l as usize == class) as u8 as f64;
                i += p[px * c + class] * g;
                ps += p[px * c + class];
                gs += g;
            }
            dice += (2.0 * i + DICE_SMOOTH) / (ps + gs + DICE_SMOOTH);
        }
        0.5 * ce + 0.5 * (1.0 - dice / c as f64)
    }

    #[test]
    fn supervised_matches_scalar_oracle_on_random_map() {
        let mut rng = ChaCha8Rng::seed_from_u64(15);
        let c = 3;
        let probs = normalize_rows(&(0..16 * c).map(|_| rng.random_range(0.01..1.0)).collect::<Vec<_>>(), c);
        let truth = LabelMap::new(4, 4, (0..16).map(|_| rng.random_range(0..c as u8)).collect()).unwrap();
        let l = loss_supervised(&PredictionSet::new(16, c, probs.clone()).unwrap(), &truth).unwrap();
        assert!((l.value - supervised_formula(&probs, &truth, c)).abs() < 1e-12);
    }

    #[test]
    fn consistency_cases() {
        let onehot = PredictionSet::new(2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        assert!(loss_consistency(&onehot, &onehot).unwrap().value.abs() < 1e-7);
        let uniform = PredictionSet::new(3, 2, vec![0.5; 6]).unwrap();
        assert!((loss_consistency(&uniform, &uniform).unwrap().value - LN_2).abs() < 1e-12);

        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let c = 4;
        let s = normalize_rows(&(0..20 * c).map(|_| rng.random_range(0.01..1.0)).collect::<Vec<_>>(), c);
        let t = normalize_rows(&(0..20 * c).map(|_| rng.random_range(0.01..1.0)).collect::<Vec<_>>(), c);
        let mut oracle = 0.0;
        for m in 0..20 {
            for k in 0..c {
                oracle -= t[m * c + k] * s[m * c + k].ln();
            }
        }
        oracle /= 20.0;
        let l = loss_consistency(&PredictionSet::new(20, c, s).unwrap(), &PredictionSet::new(20, c, t).unwrap()).unwrap();
        assert!((l.value - oracle).abs() < 1e-9);
        assert!(loss_consistency(&uniform, &onehot).is_err());
    }

    #[test]
    fn total_is_unweighted_sum() {
        let t = loss_total(
            &LossValue::scalar(1.0),
            &LossValue::scalar(2.0),
            &LossValue::scalar(3.0),
            &LossValue::scalar(4.0),
        )
        .unwrap();
        assert_eq!(t.value, 10.0);
        let z = LossValue::zero();
        assert_eq!(loss_total(&z, &z, &LossValue::scalar(2.5), &z).unwrap().value, 2.5);
        let merged = loss_total(
            &LossValue::scalar(1.0).with_gradient("x", vec![1.0, 2.0]),
            &LossValue::scalar(1.0).with_gradient("x", vec![0.5, 0.5]),
            &LossValue::scalar(0.0).with_gradient("y", vec![3.0]),
            &z,
        )
        .unwrap();
        assert_eq!(merged.gradient("x").unwrap(), &[1.5, 2.5]);
        assert_eq!(merged.gradient("y").unwrap(), &[3.0]);
        assert!(loss_total(&LossValue::scalar(f64::NAN), &z, &z, &z).is_err());
    }

    #[test]
    fn literal_pl_matches_kernel_sum_plus_nuclear() {
        let t = PredictionSet::new(2, 2, vec![0.9, 0.1, 0.2, 0.8]).unwrap();
        let s = PredictionSet::new(2, 2, vec![0.7, 0.3, 0.4, 0.6]).unwrap();
        let g = build_graph(&t, &s, 0.5, KernelDistance::Squared).unwrap();
        let l = loss_agg_pl(&g, -1.0, SignMode::Literal).unwrap();
        let expected = g.diagonal.iter().sum::<f64>() - linalg::nuclear_norm(&g.matrix).unwrap();
        assert!((l.value - expected).abs() < 1e-12);
    }
}
