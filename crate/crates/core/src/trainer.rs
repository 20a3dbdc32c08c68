//! Mean-teacher training loop.
//!
//! Each step draws a labeled and an unlabeled mini-batch. Labeled images
//! receive a weak (geometric) augmentation and drive the supervised loss.
//! Each unlabeled image is seen by the teacher under a weak view and by the
//! student under a strong view of the same geometry. Those predictions feed
//! the consistency loss, the affinity pseudo-label loss over a batch-wide
//! patch graph, and the affinity-reweighted contrastive loss against
//! synthesized hard negatives from the memory bank. The student takes an
//! Adam step, the teacher follows by EMA, and the teacher embeddings of
//! negative patches enter the bank.
//!
//! Arithmetic is `f64`. Persistent state (parameters, moments, bank) is
//! rounded to `f32` after every update, so checkpoints are exact.

use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::affinity::{self, build_graph, graph_backward, median_bandwidth, KernelDistance, PredictionSet};
use crate::codec::{read_file, write_file, Reader, Writer};
use crate::data::{Geometric, Photometric, Sample};
use crate::error::{Error, Result};
use crate::linalg::DenseMatrix;
use crate::losses::{
    self, loss_agg_pl, loss_agg_rw, loss_consistency, loss_supervised, mix_hard_negative, Embedding, HyperParams,
    SignMode, GRAD_AFFINITY, GRAD_PROBS, GRAD_QUERY,
};
use crate::metrics::{self, MetricReport};
use crate::model::{
    ema_update_in_place, pooled_features_backward, Architecture, ForwardTrace, Model, OutputGrads, ParamGroup,
    ParamSet, ENC3, PROJ_DIM,
};
use crate::sampling::{anchor_by_confidence, select_top_n, PatchGrid, PatchLayout, Sampler};
use crate::tensor::{ImageTensor, LabelMap};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"AGCL";
pub const CHECKPOINT_VERSION: u16 = 1;

/// Optimizer, batching and sampling settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainerParams {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub batch_labeled: usize,
    pub batch_unlabeled: usize,
    pub iterations: u64,
    pub eval_interval: u64,
    pub seed: u64,
    pub patch_size: usize,
    pub patch_stride: usize,
    pub sign_mode: SignMode,
    pub sampler: Sampler,
}

impl Default for TrainerParams {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            batch_labeled: 2,
            batch_unlabeled: 2,
            iterations: 500,
            eval_interval: 100,
            seed: 0,
            patch_size: 8,
            patch_stride: 8,
            sign_mode: SignMode::PerNode,
            sampler: Sampler::Entropy,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct KernelParams {
    pub distance: KernelDistance,
    /// Lower bound applied to the median bandwidth. The default keeps
    /// `2σ² ≥ 1`; patch-mean probabilities sit so close together that the
    /// raw median makes the kernel, and its gradient, extremely steep.
    pub min_bandwidth: f64,
}

impl Default for KernelParams {
    fn default() -> Self {
        Self {
            distance: KernelDistance::default(),
            min_bandwidth: std::f64::consts::FRAC_1_SQRT_2,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MixParams {
    /// Number of bank entries closest to the query that mixing draws from.
    pub neighborhood: usize,
}

impl Default for MixParams {
    fn default() -> Self {
        Self { neighborhood: 16 }
    }
}

/// How negatives for the reweighted contrastive term are chosen.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum NegativeSelection {
    /// Low-`Aᵢᵢ` patches select mixed hard negatives.
    #[default]
    Affinity,
    /// As many raw bank entries as the affinity rule would select, drawn at random.
    Random,
}

impl std::str::FromStr for NegativeSelection {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "affinity" => Ok(Self::Affinity),
            "random" => Ok(Self::Random),
            other => Err(Error::Config(format!(
                "unknown negative selection {other:?} (expected affinity|random)"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct RwParams {
    pub selection: NegativeSelection,
    /// Also contrast against the raw bank, not only the mixed hard set.
    pub include_raw: bool,
}

/// Terms of the objective to switch off; all false runs the full objective.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct Ablation {
    pub pl: bool,
    pub rw: bool,
    pub reg: bool,
}

impl Ablation {
    pub fn supervised_only(&self) -> bool {
        self.pl && self.rw && self.reg
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub trainer: TrainerParams,
    pub hyper: HyperParams,
    pub kernel: KernelParams,
    pub mix: MixParams,
    pub rw: RwParams,
    pub ablate: Ablation,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let t = &self.trainer;
        self.hyper.validate()?;
        let bad = |m: String| Err(Error::Config(m));
        if !(t.lr > 0.0 && t.lr.is_finite()) {
            return bad(format!("lr must be positive, got {}", t.lr));
        }
        if !(0.0..1.0).contains(&t.beta1) || !(0.0..1.0).contains(&t.beta2) {
            return bad("Adam betas must lie in [0, 1)".into());
        }
        if !(t.eps > 0.0) {
            return bad("Adam eps must be positive".into());
        }
        if t.iterations == 0 {
            return bad("iterations must be at least 1".into());
        }
        if t.eval_interval == 0 {
            return bad("eval_interval must be at least 1".into());
        }
        if t.batch_labeled == 0 {
            return bad("batch_labeled must be at least 1".into());
        }
        if t.patch_size == 0 || t.patch_stride == 0 {
            return bad("patch size and stride must be positive".into());
        }
        if !(self.kernel.min_bandwidth >= 0.0 && self.kernel.min_bandwidth.is_finite()) {
            return bad(format!(
                "kernel.min_bandwidth must be finite and non-negative, got {}",
                self.kernel.min_bandwidth
            ));
        }
        if self.mix.neighborhood == 0 {
            return bad("mix.neighborhood must be at least 1".into());
        }
        Ok(())
    }
}

/// Fixed-capacity FIFO ring of unit-norm embeddings.
#[derive(Debug, Clone, PartialEq)]
pub struct MemoryBank {
    capacity: usize,
    dim: usize,
    ring: Vec<Embedding>,
    cursor: usize,
}

impl MemoryBank {
    pub fn new(capacity: usize, dim: usize) -> Result<Self> {
        if capacity == 0 {
            return Err(Error::Parameter("bank capacity must be at least 1".into()));
        }
        Ok(Self {
            capacity,
            dim,
            ring: Vec::with_capacity(capacity),
            cursor: 0,
        })
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.ring.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ring.is_empty()
    }

    pub fn cursor(&self) -> usize {
        self.cursor
    }

    /// Stored embeddings in slot order.
    pub fn entries(&self) -> &[Embedding] {
        &self.ring
    }

    /// Insert, evicting the oldest entry once full.
    pub fn push(&mut self, e: Embedding) -> Result<()> {
        if e.dim() != self.dim || !e.is_unit_norm() {
            return Err(Error::Parameter("bank entries must be unit-norm with the bank's dimension".into()));
        }
        if self.ring.len() < self.capacity {
            self.ring.push(e);
        } else {
            self.ring[self.cursor] = e;
        }
        self.cursor = (self.cursor + 1) % self.capacity;
        Ok(())
    }

    /// Indices of the `k` entries with the largest dot product with `q`;
    /// ties go to the lower slot.
    pub fn nearest(&self, q: &Embedding, k: usize) -> Vec<usize> {
        let mut idx: Vec<usize> = (0..self.ring.len()).collect();
        let sims: Vec<f64> = self.ring.iter().map(|n| q.dot(n)).collect();
        idx.sort_by(|&a, &b| sims[b].total_cmp(&sims[a]).then(a.cmp(&b)));
        idx.truncate(k);
        idx
    }
}

/// Everything a run needs to continue bit-exactly.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub arch: Architecture,
    pub student: ParamSet,
    pub teacher: ParamSet,
    pub adam_m: ParamSet,
    pub adam_v: ParamSet,
    pub bank: MemoryBank,
    pub step: u64,
    pub rng: ChaCha8Rng,
}

impl TrainState {
    /// Student initialized from the run seed; the teacher starts as a copy.
    pub fn new(arch: Architecture, config: &TrainConfig) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(config.trainer.seed);
        let mut student = arch.init(&mut rng);
        student.round_to_f32();
        let teacher = student.clone();
        Ok(Self {
            arch,
            adam_m: student.zeros_like(),
            adam_v: student.zeros_like(),
            teacher,
            student,
            bank: MemoryBank::new(config.hyper.bank_capacity, PROJ_DIM)?,
            step: 0,
            rng,
        })
    }
}

/// Per-term losses of one step plus diagnostics.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct StepLosses {
    pub sup: f64,
    pub reg: f64,
    pub pl: f64,
    pub rw: f64,
    pub total: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct StepReport {
    pub step: u64,
    pub losses: StepLosses,
    /// Mean of diag(A) over the batch graph, when one was built.
    pub diag_mean: Option<f64>,
    pub sigma: Option<f64>,
    pub hard_count: usize,
    pub queries: usize,
    pub bank_len: usize,
    /// `(sample id, class, positive patch indices)` per sampled class.
    pub positives: Vec<(usize, usize, Vec<usize>)>,
}

/// Inputs of one step with every augmentation already applied.
pub struct StepInputs {
    pub labeled: Vec<(usize, ImageTensor, LabelMap)>,
    pub unlabeled: Vec<UnlabeledView>,
}

pub struct UnlabeledView {
    pub id: usize,
    pub weak: ImageTensor,
    pub strong: ImageTensor,
}

/// Data-dependent discrete choices of a step. Empty fields are decided
/// (and recorded) on first evaluation; a filled record makes the objective
/// a deterministic, differentiable function of the student parameters.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Decisions {
    pub sigma: Option<f64>,
    pub hard: Option<Vec<usize>>,
    /// Per unlabeled image and class: positive patch indices and negatives.
    pub patches: Option<Vec<Vec<(Vec<usize>, Vec<usize>)>>>,
    /// Per query: `(bank i, bank j, weight)` triples mixed into its hard set.
    pub picks: Option<Vec<Vec<(usize, usize, f64)>>>,
}

/// Objective value and student gradient for one step.
pub struct Evaluation {
    pub losses: StepLosses,
    pub grads: ParamSet,
    pub report: StepReport,
    /// Teacher embeddings of negative patches, to be pushed after the update.
    pub bank_pushes: Vec<Embedding>,
}

fn to_f64_image(img: &ImageTensor) -> Vec<f64> {
    img.to_f64()
}

/// Channel-major `C × M` from pixel-major `M × C`.
fn pixel_to_channel(grad: &[f64], c: usize) -> Vec<f64> {
    let m = grad.len() / c;
    let mut out = vec![0.0; grad.len()];
    for px in 0..m {
        for ch in 0..c {
            out[ch * m + px] = grad[px * c + ch];
        }
    }
    out
}

struct UnlabeledPass {
    teacher: ForwardTrace,
    student: ForwardTrace,
    grad_probs: Vec<f64>,
    grad_bottleneck: Vec<f64>,
}

/// Evaluate the full objective on `inputs` at the given student parameters.
///
/// `rng` is consulted only for choices missing from `decisions`.
pub fn evaluate_objective<R: Rng>(
    model: &Model,
    student: &ParamSet,
    teacher: &ParamSet,
    bank: &MemoryBank,
    inputs: &StepInputs,
    config: &TrainConfig,
    decisions: &mut Decisions,
    rng: &mut R,
) -> Result<Evaluation> {
    let k_out = model.arch.classes;
    let mut grads = student.zeros_like();
    let mut losses = StepLosses::default();
    let mut report = StepReport {
        bank_len: bank.len(),
        ..StepReport::default()
    };
    let mut bank_pushes = Vec::new();

    // Supervised term, averaged over the labeled batch.
    if !inputs.labeled.is_empty() {
        let scale = 1.0 / inputs.labeled.len() as f64;
        for (_, image, mask) in &inputs.labeled {
            let trace = model.forward(student, &to_f64_image(image), image.height(), image.width())?;
            let pred = PredictionSet::from_channel_major(&trace.probs, k_out)?;
            let l = loss_supervised(&pred, mask)?;
            losses.sup += scale * l.value;
            let g: Vec<f64> = pixel_to_channel(l.gradient(GRAD_PROBS).expect("probs gradient"), k_out)
                .into_iter()
                .map(|v| v * scale)
                .collect();
            let gp = model.backward(student, &trace, &OutputGrads { probs: Some(&g), bottleneck: None })?;
            grads.add_assign(&gp)?;
        }
    }

    let ab = config.ablate;
    if ab.supervised_only() || inputs.unlabeled.is_empty() {
        losses.total = losses.sup;
        report.losses = losses.clone();
        return Ok(Evaluation {
            losses,
            grads,
            report,
            bank_pushes,
        });
    }

    let n_unl = inputs.unlabeled.len();
    let batch_scale = 1.0 / n_unl as f64;
    let mut passes = Vec::with_capacity(n_unl);
    for view in &inputs.unlabeled {
        let (h, w) = (view.weak.height(), view.weak.width());
        let teacher_trace = model.forward(teacher, &to_f64_image(&view.weak), h, w)?;
        let student_trace = model.forward(student, &to_f64_image(&view.strong), h, w)?;
        passes.push(UnlabeledPass {
            grad_probs: vec![0.0; student_trace.probs.len()],
            grad_bottleneck: vec![0.0; student_trace.bottleneck().len()],
            teacher: teacher_trace,
            student: student_trace,
        });
    }

    // Consistency.
    if !ab.reg {
        for p in &mut passes {
            let s = PredictionSet::from_channel_major(&p.student.probs, k_out)?;
            let t = PredictionSet::from_channel_major(&p.teacher.probs, k_out)?;
            let l = loss_consistency(&s, &t)?;
            losses.reg += batch_scale * l.value;
            let g = pixel_to_channel(l.gradient(GRAD_PROBS).expect("probs gradient"), k_out);
            p.grad_probs.iter_mut().zip(&g).for_each(|(a, b)| *a += batch_scale * b);
        }
    }

    let (h, w) = (inputs.unlabeled[0].weak.height(), inputs.unlabeled[0].weak.width());
    let layout = PatchLayout::new(h, w, config.trainer.patch_size, config.trainer.patch_stride)?;
    let per_image = layout.len();
    let need_graph = !ab.pl || !ab.rw;
    let mut graph = None;
    if need_graph {
        let t_sets = passes
            .iter()
            .map(|p| PredictionSet::from_patch_means(&p.teacher.probs, k_out, &layout))
            .collect::<Result<Vec<_>>>()?;
        let s_sets = passes
            .iter()
            .map(|p| PredictionSet::from_patch_means(&p.student.probs, k_out, &layout))
            .collect::<Result<Vec<_>>>()?;
        let t_all = PredictionSet::concat(&t_sets)?;
        let s_all = PredictionSet::concat(&s_sets)?;
        let sigma = match decisions.sigma {
            Some(s) => s,
            None => {
                let s = median_bandwidth(&t_all, &s_all)?.max(config.kernel.min_bandwidth);
                decisions.sigma = Some(s);
                s
            }
        };
        let g = build_graph(&t_all, &s_all, sigma, config.kernel.distance)?;
        report.sigma = Some(sigma);
        report.diag_mean = Some(g.diagonal.iter().sum::<f64>() / g.len() as f64);

        if !ab.pl {
            let l = loss_agg_pl(&g, config.hyper.gamma, config.trainer.sign_mode)?;
            losses.pl = l.value;
            let ga = DenseMatrix::new(g.len(), g.len(), l.gradient(GRAD_AFFINITY).expect("affinity gradient").to_vec())?;
            let (_, d_student) = graph_backward(&g, &t_all, &s_all, &ga)?;
            // Patch means → pixels.
            let inv = 1.0 / layout.pixels_per_patch() as f64;
            let plane = h * w;
            for (img, p) in passes.iter_mut().enumerate() {
                for patch in 0..per_image {
                    let row = &d_student[(img * per_image + patch) * k_out..(img * per_image + patch + 1) * k_out];
                    for px in layout.pixel_indices(patch) {
                        for (c, &d) in row.iter().enumerate() {
                            p.grad_probs[c * plane + px] += d * inv;
                        }
                    }
                }
            }
        }
        graph = Some(g);
    }

    if !ab.rw {
        let g = graph.as_ref().expect("graph built when rw is enabled");
        let hard = match &decisions.hard {
            Some(hd) => hd.clone(),
            None => {
                let hd = affinity::hard_negative_mask(g, config.hyper.theta)?;
                decisions.hard = Some(hd.clone());
                hd
            }
        };
        report.hard_count = hard.len();

        if decisions.patches.is_none() {
            let mut all = Vec::with_capacity(n_unl);
            for (view, p) in inputs.unlabeled.iter().zip(&passes) {
                let normalized = view.weak.min_max_normalized();
                let mut per_class = Vec::new();
                for class in 1..k_out {
                    let conf: Vec<f64> = p.teacher.probs[class * h * w..(class + 1) * h * w].to_vec();
                    let conf_img = ImageTensor::from_f64(1, h, w, &conf)?;
                    let attended = crate::sampling::attend(&normalized, &conf_img)?;
                    let grid = PatchGrid::extract(&attended, &layout, class)?;
                    let anchor = anchor_by_confidence(&layout, &conf);
                    let scores = config.trainer.sampler.scores(&grid, &conf, anchor, rng)?;
                    let n = config.hyper.n_positives.min(per_image.saturating_sub(1)).max(1);
                    let s = select_top_n(&scores, anchor, n)?;
                    per_class.push((s.positives, s.negatives));
                }
                all.push(per_class);
            }
            decisions.patches = Some(all);
        }
        let patches = decisions.patches.clone().expect("patch decisions");

        // Queries and keys from positive patches; teacher embeddings of negatives go to the bank.
        struct Query {
            image: usize,
            patch: usize,
            q: Embedding,
            cache: crate::model::ProjectionCache,
            key: Embedding,
        }
        let mut queries = Vec::new();
        for (img, per_class) in patches.iter().enumerate() {
            let p = &passes[img];
            for (class_idx, (pos, neg)) in per_class.iter().enumerate() {
                report.positives.push((inputs.unlabeled[img].id, class_idx + 1, pos.clone()));
                for &patch in pos {
                    let (r, c) = layout.origins[patch];
                    let sf = p.student.pooled_features(r, c, layout.patch_size);
                    let tf = p.teacher.pooled_features(r, c, layout.patch_size);
                    let (q, cache) = match model.project(student, &sf) {
                        Ok(v) => v,
                        Err(Error::DegenerateNorm) => continue,
                        Err(e) => return Err(e),
                    };
                    let key = match model.project(teacher, &tf) {
                        Ok((k, _)) => k,
                        Err(Error::DegenerateNorm) => continue,
                        Err(e) => return Err(e),
                    };
                    queries.push(Query { image: img, patch, q, cache, key });
                }
                for &patch in neg {
                    let (r, c) = layout.origins[patch];
                    let tf = p.teacher.pooled_features(r, c, layout.patch_size);
                    if let Ok((e, _)) = model.project(teacher, &tf) {
                        bank_pushes.push(e);
                    }
                }
            }
        }

        if !bank.is_empty() && !queries.is_empty() {
            if decisions.picks.is_none() {
                let mut picks = Vec::with_capacity(queries.len());
                for q in &queries {
                    picks.push(choose_negatives(q.q.values(), bank, g, &hard, config, rng)?);
                }
                decisions.picks = Some(picks);
            }
            let picks = decisions.picks.as_ref().expect("pick decisions");
            if picks.len() != queries.len() {
                return Err(Error::Usage("frozen decisions do not match the number of queries".into()));
            }
            let scale = 1.0 / queries.len() as f64;
            let raw = bank.entries();
            for (q, pk) in queries.iter().zip(picks) {
                let mut hard_set = Vec::with_capacity(pk.len());
                for &(i, j, a) in pk {
                    match mix_hard_negative(&raw[i], &raw[j], a) {
                        Ok(e) => hard_set.push(e),
                        Err(Error::DegenerateMix) => continue,
                        Err(e) => return Err(e),
                    }
                }
                if config.rw.include_raw && !hard_set.is_empty() {
                    hard_set.extend(raw.iter().cloned());
                }
                let l = loss_agg_rw(&q.q, &q.key, &hard_set, raw, config.hyper.tau)?;
                losses.rw += scale * l.value;
                let gq: Vec<f64> = l.gradient(GRAD_QUERY).expect("query gradient").iter().map(|v| v * scale).collect();
                let gf = model.project_backward(student, &q.cache, &gq, &mut grads);
                debug_assert_eq!(gf.len(), ENC3);
                let (r, c) = layout.origins[q.patch];
                pooled_features_backward(&mut passes[q.image].grad_bottleneck, h, w, r, c, layout.patch_size, &gf);
            }
            report.queries = queries.len();
        }
    }

    for p in &passes {
        let g = model.backward(
            student,
            &p.student,
            &OutputGrads {
                probs: Some(&p.grad_probs),
                bottleneck: Some(&p.grad_bottleneck),
            },
        )?;
        grads.add_assign(&g)?;
    }

    let total = losses::loss_total(
        &losses::LossValue::scalar(losses.sup),
        &losses::LossValue::scalar(losses.reg),
        &losses::LossValue::scalar(losses.pl),
        &losses::LossValue::scalar(losses.rw),
    )?;
    losses.total = total.value;
    report.losses = losses.clone();
    Ok(Evaluation {
        losses,
        grads,
        report,
        bank_pushes,
    })
}

/// Negatives for one query: for every hard patch index, mix two random
/// entries from the query's bank neighbourhood weighted by that patch's
/// `Aᵢᵢ`; or, under random selection, the same number of raw entries.
fn choose_negatives<R: Rng>(
    q: &[f64],
    bank: &MemoryBank,
    graph: &affinity::AffinityGraph,
    hard: &[usize],
    config: &TrainConfig,
    rng: &mut R,
) -> Result<Vec<(usize, usize, f64)>> {
    match config.rw.selection {
        NegativeSelection::Affinity => {
            let q = Embedding::raw(q.to_vec());
            let hood = bank.nearest(&q, config.mix.neighborhood);
            Ok(hard
                .iter()
                .map(|&i| {
                    let a = hood[rng.random_range(0..hood.len())];
                    let b = hood[rng.random_range(0..hood.len())];
                    (a, b, graph.diagonal[i].clamp(0.0, 1.0))
                })
                .collect())
        }
        NegativeSelection::Random => {
            let mut idx: Vec<usize> = (0..bank.len()).collect();
            idx.shuffle(rng);
            idx.truncate(hard.len());
            Ok(idx.into_iter().map(|i| (i, i, 1.0)).collect())
        }
    }
}

/// Draw batches and augmentations for one step.
pub fn draw_inputs<R: Rng>(
    labeled: &[&Sample],
    unlabeled: &[&Sample],
    config: &TrainConfig,
    rng: &mut R,
) -> StepInputs {
    let t = &config.trainer;
    let mut inputs = StepInputs {
        labeled: Vec::with_capacity(t.batch_labeled),
        unlabeled: Vec::new(),
    };
    for _ in 0..t.batch_labeled {
        let s = labeled[rng.random_range(0..labeled.len())];
        let geo = Geometric::draw(rng);
        inputs.labeled.push((s.id, geo.apply_image(&s.image), geo.apply_mask(&s.mask)));
    }
    if config.ablate.supervised_only() || unlabeled.is_empty() {
        return inputs;
    }
    for _ in 0..t.batch_unlabeled {
        let s = unlabeled[rng.random_range(0..unlabeled.len())];
        let geo = Geometric::draw(rng);
        let weak = geo.apply_image(&s.image);
        let photo = Photometric::draw(rng, weak.height(), weak.width());
        let strong = photo.apply(&weak, rng);
        inputs.unlabeled.push(UnlabeledView { id: s.id, weak, strong });
    }
    inputs
}

/// In-place Adam update with bias correction; moments and parameters are
/// rounded to `f32` afterwards.
pub fn adam_update(
    params: &mut ParamSet,
    m: &mut ParamSet,
    v: &mut ParamSet,
    grads: &ParamSet,
    step: u64,
    t: &TrainerParams,
) -> Result<()> {
    params.check_congruent(grads)?;
    let bc1 = 1.0 - t.beta1.powi(step as i32);
    let bc2 = 1.0 - t.beta2.powi(step as i32);
    let gm = m.groups_mut();
    let gv = v.groups_mut();
    let gp = params.groups_mut();
    for (((p, mg), vg), g) in gp.iter_mut().zip(gm).zip(gv).zip(grads.groups()) {
        for i in 0..p.data.len() {
            let gi = g.data[i];
            let mi = t.beta1 * mg.data[i] + (1.0 - t.beta1) * gi;
            let vi = t.beta2 * vg.data[i] + (1.0 - t.beta2) * gi * gi;
            mg.data[i] = mi as f32 as f64;
            vg.data[i] = vi as f32 as f64;
            let update = t.lr * (mi / bc1) / ((vi / bc2).sqrt() + t.eps);
            p.data[i] = (p.data[i] - update) as f32 as f64;
        }
    }
    Ok(())
}

/// Labeled and unlabeled training pools plus a held-out validation set.
pub struct TrainData {
    pub train: Vec<Sample>,
    pub val: Vec<Sample>,
}

impl TrainData {
    pub fn classes(&self) -> usize {
        self.train
            .iter()
            .chain(&self.val)
            .map(|s| s.mask.max_label() as usize)
            .max()
            .unwrap_or(0)
    }
}

/// One optimization step; `state` is advanced only on success.
pub fn train_step(state: &mut TrainState, data: &TrainData, config: &TrainConfig) -> Result<StepReport> {
    let labeled: Vec<&Sample> = data.train.iter().filter(|s| s.labeled).collect();
    let unlabeled: Vec<&Sample> = data.train.iter().filter(|s| !s.labeled).collect();
    if labeled.is_empty() {
        return Err(Error::Data("training set has no labeled samples".into()));
    }
    let step = state.step + 1;
    let mut rng = state.rng.clone();
    let inputs = draw_inputs(&labeled, &unlabeled, config, &mut rng);
    let ids: Vec<usize> = inputs
        .labeled
        .iter()
        .map(|(id, _, _)| *id)
        .chain(inputs.unlabeled.iter().map(|u| u.id))
        .collect();
    let with_context = |e: Error| Error::Step {
        step,
        msg: format!("samples {ids:?}: {e}"),
    };
    let model = Model::new(state.arch);
    let mut decisions = Decisions::default();
    let eval = evaluate_objective(
        &model,
        &state.student,
        &state.teacher,
        &state.bank,
        &inputs,
        config,
        &mut decisions,
        &mut rng,
    )
    .map_err(with_context)?;
    let l = &eval.losses;
    if ![l.sup, l.reg, l.pl, l.rw, l.total].iter().all(|v| v.is_finite()) || !eval.grads.all_finite() {
        return Err(with_context(Error::NonFinite(format!("losses {l:?} or their gradients"))));
    }

    let mut student = state.student.clone();
    let mut m = state.adam_m.clone();
    let mut v = state.adam_v.clone();
    adam_update(&mut student, &mut m, &mut v, &eval.grads, step, &config.trainer).map_err(with_context)?;
    let mut teacher = state.teacher.clone();
    ema_update_in_place(&mut teacher, &student, config.hyper.ema_alpha).map_err(with_context)?;
    teacher.round_to_f32();
    let mut bank = state.bank.clone();
    for e in eval.bank_pushes {
        let rounded: Vec<f64> = e.values().iter().map(|&x| x as f32 as f64).collect();
        bank.push(Embedding::new(rounded, true).map_err(with_context)?).map_err(with_context)?;
    }

    state.student = student;
    state.teacher = teacher;
    state.adam_m = m;
    state.adam_v = v;
    state.bank = bank;
    state.rng = rng;
    state.step = step;
    let mut report = eval.report;
    report.step = step;
    Ok(report)
}

/// Argmax segmentation of one image.
pub fn predict(arch: Architecture, params: &ParamSet, image: &ImageTensor) -> Result<LabelMap> {
    let t = Model::new(arch).forward(params, &image.to_f64(), image.height(), image.width())?;
    LabelMap::new(image.height(), image.width(), t.argmax())
}

/// Argmax predictions of `params` on every sample, scored against the masks.
pub fn evaluate_model(arch: Architecture, params: &ParamSet, samples: &[Sample]) -> Result<MetricReport> {
    let classes = arch.classes - 1;
    let reports = samples
        .iter()
        .map(|s| metrics::evaluate(&predict(arch, params, &s.image)?, &s.mask, classes))
        .collect::<Result<Vec<_>>>()?;
    MetricReport::average(&reports)
}

/// One row of the metrics log.
#[derive(Debug, Clone, PartialEq)]
pub struct LogRow {
    pub step: u64,
    pub losses: StepLosses,
    pub val: MetricReport,
}

pub const LOG_HEADER: &str = "step,loss_sup,loss_reg,loss_pl,loss_rw,loss_total,val_dsc,val_jaccard,val_hd95,val_asd";

impl LogRow {
    pub fn csv(&self) -> String {
        let opt = |v: Option<f64>| v.map(|x| format!("{x}")).unwrap_or_else(|| "nan".into());
        let l = &self.losses;
        format!(
            "{},{},{},{},{},{},{},{},{},{}",
            self.step,
            l.sup,
            l.reg,
            l.pl,
            l.rw,
            l.total,
            self.val.dsc,
            self.val.jaccard,
            opt(self.val.hd95),
            opt(self.val.asd)
        )
    }
}

pub struct TrainOutcome {
    pub state: TrainState,
    pub log: Vec<LogRow>,
    pub steps: Vec<StepReport>,
}

/// Where `train` writes checkpoints and the metrics log.
#[derive(Debug, Clone, Default)]
pub struct RunOutput {
    pub dir: Option<PathBuf>,
}

/// Run `config.trainer.iterations` steps from a fresh state.
pub fn train(config: &TrainConfig, data: &TrainData, out: &RunOutput) -> Result<TrainOutcome> {
    config.validate()?;
    let classes = data.classes();
    if classes == 0 {
        return Err(Error::Data("dataset has no foreground labels".into()));
    }
    let channels = data.train.first().map(|s| s.image.channels()).unwrap_or(1);
    let state = TrainState::new(Architecture::new(channels, classes + 1), config)?;
    train_from(state, config, data, config.trainer.iterations, out)
}

/// Continue `state` for `iterations` more steps.
pub fn train_from(
    mut state: TrainState,
    config: &TrainConfig,
    data: &TrainData,
    iterations: u64,
    out: &RunOutput,
) -> Result<TrainOutcome> {
    config.validate()?;
    if data.val.is_empty() {
        return Err(Error::Data("validation set is empty".into()));
    }
    let mut log = Vec::new();
    let mut steps = Vec::with_capacity(iterations as usize);
    let mut csv = format!("{LOG_HEADER}\n");
    let end = state.step + iterations;
    let interval = config.trainer.eval_interval;
    while state.step < end {
        let report = match train_step(&mut state, data, config) {
            Ok(r) => r,
            Err(e) => {
                if let Some(dir) = &out.dir {
                    save_checkpoint(&state, &dir.join("checkpoint_abort.agcl"))?;
                    write_file(&dir.join("metrics.csv"), csv.as_bytes())?;
                }
                return Err(e);
            }
        };
        log::debug!(
            "step {} total {:.4} sup {:.4} reg {:.4} pl {:.4} rw {:.4}",
            report.step,
            report.losses.total,
            report.losses.sup,
            report.losses.reg,
            report.losses.pl,
            report.losses.rw
        );
        if state.step % interval == 0 || state.step == end {
            let val = evaluate_model(state.arch, &state.student, &data.val)?;
            log::info!("step {} val dsc {:.4}", state.step, val.dsc);
            let row = LogRow {
                step: state.step,
                losses: report.losses.clone(),
                val,
            };
            csv.push_str(&row.csv());
            csv.push('\n');
            log.push(row);
            if let Some(dir) = &out.dir {
                save_checkpoint(&state, &dir.join(format!("checkpoint_{:06}.agcl", state.step)))?;
            }
        }
        steps.push(report);
    }
    if let Some(dir) = &out.dir {
        save_checkpoint(&state, &dir.join("checkpoint_final.agcl"))?;
        write_file(&dir.join("metrics.csv"), csv.as_bytes())?;
    }
    Ok(TrainOutcome { state, log, steps })
}

// ---------------------------------------------------------------------------
// Checkpoints: magic, version, then named groups (u16 name length, name,
// u8 rank, u32 dims, 4-byte payload entries), then a CRC32 of all prior
// bytes. Parameters are stored as f32; integer and RNG state travels as raw
// u32 words in the same 4-byte slots, never passing through a float.

struct RawGroup {
    name: String,
    shape: Vec<usize>,
    words: Vec<u32>,
}

impl RawGroup {
    fn floats(name: String, shape: Vec<usize>, data: &[f64]) -> Self {
        Self {
            name,
            shape,
            words: data.iter().map(|&v| (v as f32).to_bits()).collect(),
        }
    }

    fn words(name: &str, words: Vec<u32>) -> Self {
        Self {
            name: name.into(),
            shape: vec![words.len()],
            words,
        }
    }

    fn to_f64(&self) -> Vec<f64> {
        self.words.iter().map(|&w| f32::from_bits(w) as f64).collect()
    }
}

fn split_u64(v: u64) -> [u32; 2] {
    [v as u32, (v >> 32) as u32]
}

fn join_u64(w: &[u32]) -> u64 {
    w[0] as u64 | ((w[1] as u64) << 32)
}

fn checkpoint_groups(state: &TrainState) -> Vec<RawGroup> {
    let mut groups = vec![
        RawGroup::words(
            "meta/arch",
            vec![state.arch.in_channels as u32, state.arch.classes as u32],
        ),
        RawGroup::words("meta/step", split_u64(state.step).to_vec()),
    ];
    for (prefix, set) in [
        ("student", &state.student),
        ("teacher", &state.teacher),
        ("adam_m", &state.adam_m),
        ("adam_v", &state.adam_v),
    ] {
        for g in set.groups() {
            groups.push(RawGroup::floats(format!("{prefix}/{}", g.name), g.shape.clone(), &g.data));
        }
    }
    let bank = &state.bank;
    groups.push(RawGroup::words(
        "bank/meta",
        vec![bank.capacity() as u32, bank.dim() as u32, bank.cursor() as u32],
    ));
    let flat: Vec<f64> = bank.entries().iter().flat_map(|e| e.values().iter().copied()).collect();
    groups.push(RawGroup::floats("bank/entries".into(), vec![bank.len(), bank.dim()], &flat));

    let mut rng_words: Vec<u32> = state
        .rng
        .get_seed()
        .chunks(4)
        .map(|c| u32::from_le_bytes(c.try_into().expect("4 bytes")))
        .collect();
    rng_words.extend_from_slice(&split_u64(state.rng.get_stream()));
    let pos = state.rng.get_word_pos();
    rng_words.extend((0..4).map(|i| (pos >> (32 * i)) as u32));
    groups.push(RawGroup::words("rng/state", rng_words));
    groups
}

pub fn encode_checkpoint(state: &TrainState) -> Vec<u8> {
    let mut w = Writer::default();
    w.bytes(CHECKPOINT_MAGIC);
    w.u16(CHECKPOINT_VERSION);
    for g in checkpoint_groups(state) {
        w.u16(g.name.len() as u16);
        w.bytes(g.name.as_bytes());
        w.u8(g.shape.len() as u8);
        for &d in &g.shape {
            w.u32(d as u32);
        }
        for &v in &g.words {
            w.u32(v);
        }
    }
    w.finish()
}

fn format_err(offset: usize, msg: String) -> Error {
    Error::Format { offset, msg }
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<TrainState> {
    let mut r = Reader::open(bytes, CHECKPOINT_MAGIC)?;
    let version = r.u16()?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Version {
            expected: CHECKPOINT_VERSION,
            found: version,
        });
    }
    r.check_trailing_crc()?;
    let mut groups: Vec<(usize, RawGroup)> = Vec::new();
    while !r.at_crc() {
        let offset = r.pos;
        let len = r.u16()? as usize;
        let name = std::str::from_utf8(r.take(len)?)
            .map_err(|_| r.format("group name is not UTF-8"))?
            .to_string();
        let rank = r.u8()? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u32()? as usize);
        }
        let count = shape
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .ok_or_else(|| r.format("group dims overflow"))?;
        r.require(count.saturating_mul(4))?;
        let words = (0..count).map(|_| r.u32()).collect::<Result<Vec<_>>>()?;
        groups.push((offset, RawGroup { name, shape, words }));
    }
    let end = r.pos;
    r.finish()?;

    let mut it = groups.into_iter();
    let mut next = |name: &str| -> Result<(usize, RawGroup)> {
        match it.next() {
            Some((off, g)) if g.name == name => Ok((off, g)),
            Some((off, g)) => Err(format_err(off, format!("expected group {name:?}, found {:?}", g.name))),
            None => Err(format_err(end, format!("missing group {name:?}"))),
        }
    };
    let mut words = |name: &str, n: usize| -> Result<Vec<u32>> {
        let (off, g) = next(name)?;
        if g.shape != [n] {
            return Err(format_err(off, format!("group {name} has shape {:?}, expected [{n}]", g.shape)));
        }
        Ok(g.words)
    };

    let arch_w = words("meta/arch", 2)?;
    let arch = Architecture::new(arch_w[0] as usize, arch_w[1] as usize);
    let step = join_u64(&words("meta/step", 2)?);
    drop(words);
    let template = arch.zeros();
    let mut sets = Vec::new();
    for prefix in ["student", "teacher", "adam_m", "adam_v"] {
        let mut gs = Vec::new();
        for t in template.groups() {
            let (off, g) = next(&format!("{prefix}/{}", t.name))?;
            if g.shape != t.shape {
                return Err(format_err(
                    off,
                    format!("group {} has shape {:?}, architecture needs {:?}", g.name, g.shape, t.shape),
                ));
            }
            gs.push(ParamGroup {
                name: t.name.clone(),
                shape: g.shape.clone(),
                data: g.to_f64(),
            });
        }
        sets.push(ParamSet::from_groups(gs)?);
    }

    let (off, meta) = next("bank/meta")?;
    if meta.shape != [3] {
        return Err(format_err(off, "bank/meta must hold 3 words".into()));
    }
    let (capacity, dim, cursor) = (meta.words[0] as usize, meta.words[1] as usize, meta.words[2] as usize);
    let (off, entries) = next("bank/entries")?;
    if entries.shape.len() != 2 || entries.shape[1] != dim || entries.shape[0] > capacity || dim == 0 {
        return Err(format_err(off, "bank entries do not match bank metadata".into()));
    }
    let mut bank = MemoryBank::new(capacity, dim)?;
    for row in entries.to_f64().chunks(dim) {
        bank.ring.push(Embedding::new(row.to_vec(), true)?);
    }
    if cursor >= capacity || (bank.ring.len() < capacity && cursor != bank.ring.len()) {
        return Err(format_err(
            off,
            format!("bank cursor {cursor} inconsistent with {} entries", bank.ring.len()),
        ));
    }
    bank.cursor = cursor;

    let (off, rng_g) = next("rng/state")?;
    if rng_g.shape != [14] {
        return Err(format_err(off, "rng/state must hold 14 words".into()));
    }
    let rw = rng_g.words;
    let mut seed = [0u8; 32];
    for (i, w) in rw[..8].iter().enumerate() {
        seed[4 * i..4 * i + 4].copy_from_slice(&w.to_le_bytes());
    }
    let mut rng = ChaCha8Rng::from_seed(seed);
    rng.set_stream(join_u64(&rw[8..10]));
    let pos = (0..4).fold(0u128, |acc, i| acc | ((rw[10 + i] as u128) << (32 * i)));
    rng.set_word_pos(pos);
    drop(next);
    if let Some((off, g)) = it.next() {
        return Err(format_err(off, format!("unexpected group {:?}", g.name)));
    }

    let mut sets = sets.into_iter();
    Ok(TrainState {
        arch,
        student: sets.next().expect("student"),
        teacher: sets.next().expect("teacher"),
        adam_m: sets.next().expect("adam_m"),
        adam_v: sets.next().expect("adam_v"),
        bank,
        step,
        rng,
    })
}

pub fn save_checkpoint(state: &TrainState, path: &Path) -> Result<()> {
    write_file(path, &encode_checkpoint(state))
}

pub fn load_checkpoint(path: &Path) -> Result<TrainState> {
    decode_checkpoint(&read_file(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn unit(v: &[f64]) -> Embedding {
        Embedding::normalized(v).unwrap()
    }

    #[test]
    fn bank_is_fifo_and_bounded() {
        let mut b = MemoryBank::new(3, 2).unwrap();
        let mut sizes = Vec::new();
        for i in 0..5 {
            b.push(unit(&[1.0, i as f64])).unwrap();
            sizes.push(b.len());
        }
        assert_eq!(sizes, vec![1, 2, 3, 3, 3]);
        // Slots 0 and 1 were overwritten by pushes 3 and 4.
        assert_eq!(b.entries()[0], unit(&[1.0, 3.0]));
        assert_eq!(b.entries()[1], unit(&[1.0, 4.0]));
        assert_eq!(b.entries()[2], unit(&[1.0, 2.0]));
        assert!(b.push(Embedding::raw(vec![2.0, 0.0])).is_err());
    }

    #[test]
    fn nearest_orders_by_similarity() {
        let mut b = MemoryBank::new(4, 2).unwrap();
        for v in [[1.0, 0.0], [0.0, 1.0], [-1.0, 0.0], [1.0, 1.0]] {
            b.push(unit(&v)).unwrap();
        }
        assert_eq!(b.nearest(&unit(&[1.0, 0.1]), 2), vec![0, 3]);
    }

    #[test]
    fn config_validation() {
        let mut c = TrainConfig::default();
        assert!(c.validate().is_ok());
        c.trainer.iterations = 0;
        assert!(matches!(c.validate(), Err(Error::Config(_))));
        let mut c = TrainConfig::default();
        c.trainer.lr = 0.0;
        assert!(c.validate().is_err());
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        let mut p = ParamSet::from_groups(vec![ParamGroup { name: "w".into(), shape: vec![2], data: vec![1.0, -1.0] }]).unwrap();
        let mut m = p.zeros_like();
        let mut v = p.zeros_like();
        let g = ParamSet::from_groups(vec![ParamGroup { name: "w".into(), shape: vec![2], data: vec![0.5, -3.0] }]).unwrap();
        let t = TrainerParams { lr: 0.01, ..TrainerParams::default() };
        adam_update(&mut p, &mut m, &mut v, &g, 1, &t).unwrap();
        // m̂ / √v̂ = sign(g) on the first step.
        assert!((p.get_flat(0) - (1.0f32 - 0.01) as f64).abs() < 1e-6);
        assert!((p.get_flat(1) - (-1.0f32 + 0.01) as f64).abs() < 1e-6);
    }
}
