//! Per-task aggregation experts.
//!
//! An expert holds a score map `S` (`K × d`) and a residual map `R` (`d × d`)
//! per modality. For a class basis `V` (`d × K`) the score embedding of a unit
//! embedding `z` is `V (S z) + R z`; the evidence of a sample is
//! `S_vis z_vis + S_txt z_txt`.
//!
//! Training minimises `λ_int L_int + λ_comp L_comp + L_cont` by plain SGD with
//! hand-derived gradients. Absolute values and hinges use subgradient 0 at
//! their kinks.

use crate::encoder::{augment_views, occlude, FrozenEncoder, PerturbationSpec, RawSample};
use crate::error::{Error, Result};
use crate::hash::Fnv1a;
use crate::linalg::{axpy, dot, norm, sub, sym_eig, Matrix, SeededRng};
use crate::pga::ClassAnchor;
use crate::TaskId;

#[derive(Clone, Debug, PartialEq)]
pub struct TaskExpert {
    pub task_id: TaskId,
    pub s_vis: Matrix<f64>,
    pub r_vis: Matrix<f64>,
    pub s_txt: Matrix<f64>,
    pub r_txt: Matrix<f64>,
}

impl TaskExpert {
    /// `S = 0`, `R = I`: the expert leaves embeddings untouched.
    pub fn identity(task_id: TaskId, d: usize, k: usize) -> Self {
        Self {
            task_id,
            s_vis: Matrix::zeros(k, d),
            r_vis: Matrix::identity(d),
            s_txt: Matrix::zeros(k, d),
            r_txt: Matrix::identity(d),
        }
    }

    pub fn dim(&self) -> usize {
        self.r_vis.rows()
    }

    pub fn k(&self) -> usize {
        self.s_vis.rows()
    }

    pub fn check_shapes(&self) -> Result<()> {
        let (k, d) = self.s_vis.shape();
        let ok = self.s_txt.shape() == (k, d)
            && self.r_vis.shape() == (d, d)
            && self.r_txt.shape() == (d, d);
        if !ok {
            return Err(Error::Dimension("inconsistent expert block shapes".into()));
        }
        Ok(())
    }

    pub fn is_finite(&self) -> bool {
        self.s_vis.is_finite() && self.r_vis.is_finite() && self.s_txt.is_finite() && self.r_txt.is_finite()
    }

    pub fn digest(&self) -> u64 {
        let mut h = Fnv1a::new();
        h.write(&self.task_id.to_le_bytes());
        for m in [&self.s_vis, &self.r_vis, &self.s_txt, &self.r_txt] {
            h.write_f64s(m.as_slice().iter().copied());
        }
        h.finish()
    }

    /// `self += alpha · grad`.
    pub fn apply(&mut self, alpha: f64, grad: &ExpertGradient) {
        self.s_vis.add_scaled(alpha, &grad.s_vis);
        self.r_vis.add_scaled(alpha, &grad.r_vis);
        self.s_txt.add_scaled(alpha, &grad.s_txt);
        self.r_txt.add_scaled(alpha, &grad.r_txt);
    }
}

/// Gradient with the same block layout as [`TaskExpert`].
#[derive(Clone, Debug, PartialEq)]
pub struct ExpertGradient {
    pub s_vis: Matrix<f64>,
    pub r_vis: Matrix<f64>,
    pub s_txt: Matrix<f64>,
    pub r_txt: Matrix<f64>,
}

impl ExpertGradient {
    pub fn zeros(d: usize, k: usize) -> Self {
        Self {
            s_vis: Matrix::zeros(k, d),
            r_vis: Matrix::zeros(d, d),
            s_txt: Matrix::zeros(k, d),
            r_txt: Matrix::zeros(d, d),
        }
    }

    pub fn add_scaled(&mut self, alpha: f64, other: &Self) {
        self.s_vis.add_scaled(alpha, &other.s_vis);
        self.r_vis.add_scaled(alpha, &other.r_vis);
        self.s_txt.add_scaled(alpha, &other.s_txt);
        self.r_txt.add_scaled(alpha, &other.r_txt);
    }

    pub fn blocks(&self) -> [(&'static str, &Matrix<f64>); 4] {
        [
            ("s_vis", &self.s_vis),
            ("r_vis", &self.r_vis),
            ("s_txt", &self.s_txt),
            ("r_txt", &self.r_txt),
        ]
    }

    pub fn max_abs(&self) -> f64 {
        self.blocks().iter().map(|(_, m)| m.max_abs()).fold(0.0, f64::max)
    }
}

/// `basis · (S z) + R z`.
pub fn score_embedding(s: &Matrix<f64>, r: &Matrix<f64>, basis: &Matrix<f64>, z: &[f64]) -> Result<Vec<f64>> {
    if basis.cols() != s.rows() || basis.rows() != r.rows() {
        return Err(Error::Dimension(format!(
            "basis {}x{} incompatible with score map {}x{} and residual {}x{}",
            basis.rows(),
            basis.cols(),
            s.rows(),
            s.cols(),
            r.rows(),
            r.cols()
        )));
    }
    let alpha = s.matvec(z)?;
    let mut out = r.matvec(z)?;
    let from_basis = basis.matvec(&alpha)?;
    axpy(1.0, &from_basis, &mut out);
    Ok(out)
}

/// Visual score embedding with the class's visual basis. Not renormalised.
pub fn visual_embedding(expert: &TaskExpert, anchor: &ClassAnchor<f64>, z_vis: &[f64]) -> Result<Vec<f64>> {
    score_embedding(&expert.s_vis, &expert.r_vis, &anchor.basis_vis, z_vis)
}

/// Textual score embedding with the class's textual basis.
pub fn textual_embedding(expert: &TaskExpert, anchor: &ClassAnchor<f64>, z_txt: &[f64]) -> Result<Vec<f64>> {
    score_embedding(&expert.s_txt, &expert.r_txt, &anchor.basis_txt, z_txt)
}

/// `S_vis z_vis + S_txt z_txt`.
pub fn evidence_score(expert: &TaskExpert, z_vis: &[f64], z_txt: &[f64]) -> Result<Vec<f64>> {
    let mut s = expert.s_vis.matvec(z_vis)?;
    let t = expert.s_txt.matvec(z_txt)?;
    axpy(1.0, &t, &mut s);
    Ok(s)
}

/// `‖max(0, s_occluded − s_clean)‖₁`.
pub fn loss_intervention(s_clean: &[f64], s_occluded: &[f64]) -> f64 {
    s_clean
        .iter()
        .zip(s_occluded)
        .map(|(&c, &o)| (o - c).max(0.0))
        .sum()
}

/// Mean of coordinate `j`, offset from the first view so identical views
/// reproduce their common value exactly.
fn coordinate_mean(views: &[Vec<f64>], j: usize) -> f64 {
    let base = views[0][j];
    base + views.iter().map(|v| v[j] - base).sum::<f64>() / views.len() as f64
}

fn centroid_deviation(views: &[Vec<f64>]) -> f64 {
    if views.is_empty() {
        return 0.0;
    }
    let mut total = 0.0;
    for j in 0..views[0].len() {
        let mean = coordinate_mean(views, j);
        total += views.iter().map(|v| (v[j] - mean).abs()).sum::<f64>();
    }
    total
}

/// `Σ_m ‖s_m^vis − s̄^vis‖₁ + ‖s_m^txt − s̄^txt‖₁`.
pub fn loss_compression(view_scores_vis: &[Vec<f64>], view_scores_txt: &[Vec<f64>]) -> f64 {
    centroid_deviation(view_scores_vis) + centroid_deviation(view_scores_txt)
}

/// `λ_int L_int + λ_comp L_comp + L_cont`.
pub fn loss_total(weights: &LossWeights, l_int: f64, l_comp: f64, l_cont: f64) -> f64 {
    weights.lambda_int * l_int + weights.lambda_comp * l_comp + l_cont
}

#[derive(Clone, Debug)]
pub struct ContrastiveLoss {
    pub loss: f64,
    /// Gradient with respect to each row of `visual`.
    pub grad_visual: Vec<Vec<f64>>,
    /// Gradient with respect to each row of `class_text`.
    pub grad_text: Vec<Vec<f64>>,
}

/// `∂ cos(a, b) / ∂a`.
fn cosine_grad(a: &[f64], b: &[f64]) -> (f64, Vec<f64>, Vec<f64>) {
    let na = norm(a);
    let nb = norm(b);
    let c = dot(a, b) / (na * nb);
    let ga = a
        .iter()
        .zip(b)
        .map(|(&ai, &bi)| bi / (na * nb) - c * ai / (na * na))
        .collect();
    let gb = a
        .iter()
        .zip(b)
        .map(|(&ai, &bi)| ai / (na * nb) - c * bi / (nb * nb))
        .collect();
    (c, ga, gb)
}

/// Mean softmax cross-entropy of `cos(visual_i, class_text_c) / τ` against
/// `labels[i]`, with gradients for both sides.
pub fn loss_contrastive(
    visual: &[Vec<f64>],
    class_text: &[Vec<f64>],
    labels: &[usize],
    tau: f64,
) -> Result<ContrastiveLoss> {
    if class_text.len() < 2 {
        return Err(Error::Degenerate(format!(
            "contrastive loss needs at least 2 candidate classes, got {}",
            class_text.len()
        )));
    }
    if visual.len() != labels.len() || visual.is_empty() {
        return Err(Error::Dimension("one label per visual embedding required".into()));
    }
    if !(tau > 0.0) {
        return Err(Error::Domain("temperature must be positive".into()));
    }
    let n = visual.len() as f64;
    let mut loss = 0.0;
    let mut grad_visual = Vec::with_capacity(visual.len());
    let mut grad_text = vec![vec![0.0; class_text[0].len()]; class_text.len()];
    for (e, &y) in visual.iter().zip(labels) {
        if y >= class_text.len() {
            return Err(Error::Dimension(format!("label index {y} out of range")));
        }
        let parts: Vec<(f64, Vec<f64>, Vec<f64>)> = class_text.iter().map(|t| cosine_grad(e, t)).collect();
        let logits: Vec<f64> = parts.iter().map(|p| p.0 / tau).collect();
        let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + logits.iter().map(|l| (l - max).exp()).sum::<f64>().ln();
        loss += lse - logits[y];
        let mut ge = vec![0.0; e.len()];
        for (c, (_, ga, gb)) in parts.iter().enumerate() {
            let p = (logits[c] - lse).exp();
            let coef = (p - if c == y { 1.0 } else { 0.0 }) / (tau * n);
            axpy(coef, ga, &mut ge);
            axpy(coef, gb, &mut grad_text[c]);
        }
        grad_visual.push(ge);
    }
    Ok(ContrastiveLoss {
        loss: loss / n,
        grad_visual,
        grad_text,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct LossWeights {
    pub lambda_int: f64,
    pub lambda_comp: f64,
    pub tau_cont: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda_int: 0.8,
            lambda_comp: 1.0,
            tau_cont: 0.07,
        }
    }
}

impl LossWeights {
    /// The smaller regulariser weights quoted with the implementation details
    /// (`λ_int = 0.1`, `λ_comp = 0.3`).
    pub fn implementation_preset() -> Self {
        Self {
            lambda_int: 0.1,
            lambda_comp: 0.3,
            tau_cont: 0.07,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lambda_int >= 0.0 && self.lambda_comp >= 0.0) {
            return Err(Error::Config("loss weights must be non-negative".into()));
        }
        if !(self.tau_cont > 0.0) {
            return Err(Error::Config("tau_cont must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum LrSchedule {
    /// `lr_e = lr₀ · ½(1 + cos(π e / E))`.
    #[default]
    Cosine,
    /// `lr₀`, then ×0.1 at 50% and again at 75% of the epochs.
    Step,
}

impl LrSchedule {
    pub fn rate(self, lr_init: f64, epoch: usize, epochs: usize) -> f64 {
        let e = epochs.max(1) as f64;
        match self {
            LrSchedule::Cosine => lr_init * 0.5 * (1.0 + (std::f64::consts::PI * epoch as f64 / e).cos()),
            LrSchedule::Step => {
                let f = epoch as f64 / e;
                if f < 0.5 {
                    lr_init
                } else if f < 0.75 {
                    lr_init * 0.1
                } else {
                    lr_init * 0.01
                }
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr_init: f64,
    pub schedule: LrSchedule,
    pub perturb: PerturbationSpec,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 20,
            batch_size: 64,
            lr_init: 0.05,
            schedule: LrSchedule::Cosine,
            perturb: PerturbationSpec::default(),
        }
    }
}

/// Frozen per-class quantities an expert is trained against.
#[derive(Clone, Debug)]
pub struct ClassTargets {
    pub vis_bases: Vec<Matrix<f64>>,
    pub txt_bases: Vec<Matrix<f64>>,
    /// Fused class text directions `t_c` (unit norm).
    pub text_dirs: Vec<Vec<f64>>,
}

impl ClassTargets {
    pub fn len(&self) -> usize {
        self.text_dirs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.text_dirs.is_empty()
    }
}

/// One training sample after encoding, with its occluded copy and views.
#[derive(Clone, Debug)]
pub struct EncodedSample {
    pub class_index: usize,
    pub z_vis: Vec<f64>,
    pub z_txt: Vec<f64>,
    pub occluded_vis: Vec<f64>,
    pub occluded_txt: Vec<f64>,
    pub views_vis: Vec<Vec<f64>>,
    pub views_txt: Vec<Vec<f64>>,
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossBreakdown {
    pub intervention: f64,
    pub compression: f64,
    pub contrastive: f64,
    pub total: f64,
}

/// Batch-mean losses and, optionally, the gradient of every term.
#[derive(Clone, Debug)]
pub struct BatchEvaluation {
    pub losses: LossBreakdown,
    pub grad_intervention: ExpertGradient,
    pub grad_compression: ExpertGradient,
    pub grad_contrastive: ExpertGradient,
}

impl BatchEvaluation {
    pub fn total_gradient(&self, weights: &LossWeights) -> ExpertGradient {
        let mut g = self.grad_contrastive.clone();
        g.add_scaled(weights.lambda_int, &self.grad_intervention);
        g.add_scaled(weights.lambda_comp, &self.grad_compression);
        g
    }
}

fn signum0(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Adds the compression subgradient of one modality's views into `grad`.
fn compression_grad(s: &Matrix<f64>, views: &[Vec<f64>], scale: f64, grad: &mut Matrix<f64>) -> Result<f64> {
    let scores: Vec<Vec<f64>> = views.iter().map(|v| s.matvec(v)).collect::<Result<_>>()?;
    let k = s.rows();
    let m = views.len() as f64;
    let mut loss = 0.0;
    for j in 0..k {
        let mean = coordinate_mean(&scores, j);
        let signs: Vec<f64> = scores.iter().map(|v| signum0(v[j] - mean)).collect();
        loss += scores.iter().map(|v| (v[j] - mean).abs()).sum::<f64>();
        let mean_sign = signs.iter().sum::<f64>() / m;
        for (view, sg) in views.iter().zip(&signs) {
            let coef = scale * (sg - mean_sign);
            if coef != 0.0 {
                axpy(coef, view, grad.row_mut(j));
            }
        }
    }
    Ok(loss)
}

/// Batch-mean value and gradient of every loss term.
pub fn evaluate_batch(
    expert: &TaskExpert,
    batch: &[EncodedSample],
    targets: &ClassTargets,
    weights: &LossWeights,
) -> Result<BatchEvaluation> {
    if batch.is_empty() {
        return Err(Error::InsufficientData("empty mini-batch".into()));
    }
    expert.check_shapes()?;
    let d = expert.dim();
    let k = expert.k();
    let n = batch.len() as f64;

    let mut g_int = ExpertGradient::zeros(d, k);
    let mut g_comp = ExpertGradient::zeros(d, k);
    let mut g_cont = ExpertGradient::zeros(d, k);
    let mut l_int = 0.0;
    let mut l_comp = 0.0;

    for item in batch {
        // Interventional monotonicity.
        let clean = evidence_score(expert, &item.z_vis, &item.z_txt)?;
        let occl = evidence_score(expert, &item.occluded_vis, &item.occluded_txt)?;
        l_int += loss_intervention(&clean, &occl);
        let dz_vis = sub(&item.occluded_vis, &item.z_vis);
        let dz_txt = sub(&item.occluded_txt, &item.z_txt);
        for j in 0..k {
            if occl[j] - clean[j] > 0.0 {
                axpy(1.0 / n, &dz_vis, g_int.s_vis.row_mut(j));
                axpy(1.0 / n, &dz_txt, g_int.s_txt.row_mut(j));
            }
        }
        // View compression.
        if !item.views_vis.is_empty() {
            l_comp += compression_grad(&expert.s_vis, &item.views_vis, 1.0 / n, &mut g_comp.s_vis)?;
            l_comp += compression_grad(&expert.s_txt, &item.views_txt, 1.0 / n, &mut g_comp.s_txt)?;
        }
    }

    // Contrastive head over the task's classes.
    let mut e_vis = Vec::with_capacity(batch.len());
    let mut labels = Vec::with_capacity(batch.len());
    for item in batch {
        let c = item.class_index;
        if c >= targets.len() {
            return Err(Error::Dimension(format!("class index {c} out of range")));
        }
        e_vis.push(score_embedding(&expert.s_vis, &expert.r_vis, &targets.vis_bases[c], &item.z_vis)?);
        labels.push(c);
    }
    let e_txt: Vec<Vec<f64>> = (0..targets.len())
        .map(|c| score_embedding(&expert.s_txt, &expert.r_txt, &targets.txt_bases[c], &targets.text_dirs[c]))
        .collect::<Result<_>>()?;
    let cont = loss_contrastive(&e_vis, &e_txt, &labels, weights.tau_cont)?;
    for (item, ge) in batch.iter().zip(&cont.grad_visual) {
        let basis = &targets.vis_bases[item.class_index];
        // e = V S z + R z
        let vt_ge = basis.tr_matvec(ge)?;
        g_cont.s_vis.add_outer(1.0, &vt_ge, &item.z_vis);
        g_cont.r_vis.add_outer(1.0, ge, &item.z_vis);
    }
    for (c, gt) in cont.grad_text.iter().enumerate() {
        let vt_gt = targets.txt_bases[c].tr_matvec(gt)?;
        g_cont.s_txt.add_outer(1.0, &vt_gt, &targets.text_dirs[c]);
        g_cont.r_txt.add_outer(1.0, gt, &targets.text_dirs[c]);
    }

    let intervention = l_int / n;
    let compression = l_comp / n;
    let losses = LossBreakdown {
        intervention,
        compression,
        contrastive: cont.loss,
        total: loss_total(weights, intervention, compression, cont.loss),
    };
    Ok(BatchEvaluation {
        losses,
        grad_intervention: g_int,
        grad_compression: g_comp,
        grad_contrastive: g_cont,
    })
}

/// Everything [`train_task_expert`] needs about one task.
pub struct TaskTrainingSet<'a> {
    pub task_id: TaskId,
    pub samples: &'a [RawSample],
    /// Position of each sample's class in `targets`.
    pub class_index: Vec<usize>,
    /// Raw class prompt per class, aligned with `targets`.
    pub prompts: Vec<Vec<f64>>,
    pub targets: ClassTargets,
    pub visual: &'a FrozenEncoder,
    pub textual: &'a FrozenEncoder,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub losses: LossBreakdown,
    pub vib: Option<VibEstimate>,
}

#[derive(Clone, Debug)]
pub struct TrainedExpert {
    pub expert: TaskExpert,
    pub trace: Vec<EpochRecord>,
}

fn encode_pair(set: &TaskTrainingSet<'_>, x: &RawSample, class: usize) -> Result<(Vec<f64>, Vec<f64>)> {
    let z = set.visual.encode_visual(x)?.into_vec();
    let h = set
        .textual
        .encode_textual_fused(&set.prompts[class], Some(x.caption_or_features()))?
        .into_vec();
    Ok((z, h))
}

/// Encodes a sample together with a fresh occlusion and fresh views.
pub fn encode_training_sample(
    set: &TaskTrainingSet<'_>,
    index: usize,
    clean: Option<&(Vec<f64>, Vec<f64>)>,
    spec: &PerturbationSpec,
    rng: &mut SeededRng,
) -> Result<EncodedSample> {
    let x = &set.samples[index];
    let class = set.class_index[index];
    let (z_vis, z_txt) = match clean {
        Some(p) => p.clone(),
        None => encode_pair(set, x, class)?,
    };
    let occluded = occlude(x, spec, rng)?;
    let (occluded_vis, occluded_txt) = encode_pair(set, &occluded, class)?;
    let mut views_vis = Vec::with_capacity(spec.views);
    let mut views_txt = Vec::with_capacity(spec.views);
    for v in augment_views(x, spec, rng)? {
        let (a, b) = encode_pair(set, &v, class)?;
        views_vis.push(a);
        views_txt.push(b);
    }
    Ok(EncodedSample {
        class_index: class,
        z_vis,
        z_txt,
        occluded_vis,
        occluded_txt,
        views_vis,
        views_txt,
    })
}

/// Mini-batch SGD on the total objective starting from the identity expert.
/// Perturbations are redrawn at every step. Deterministic given `rng`.
pub fn train_task_expert(
    set: &TaskTrainingSet<'_>,
    weights: &LossWeights,
    config: &TrainConfig,
    k: usize,
    rng: &SeededRng,
) -> Result<TrainedExpert> {
    weights.validate()?;
    config.perturb.validate()?;
    if set.samples.is_empty() {
        return Err(Error::InsufficientData(format!("task {} has no training samples", set.task_id)));
    }
    if set.class_index.len() != set.samples.len() {
        return Err(Error::Dimension("one class index per sample required".into()));
    }
    if config.batch_size == 0 {
        return Err(Error::Config("batch_size must be positive".into()));
    }
    let d = set.visual.output_dim();
    let mut expert = TaskExpert::identity(set.task_id, d, k);

    let clean: Vec<(Vec<f64>, Vec<f64>)> = set
        .samples
        .iter()
        .zip(&set.class_index)
        .map(|(x, &c)| encode_pair(set, x, c))
        .collect::<Result<_>>()?;

    let mut trace = Vec::with_capacity(config.epochs);
    let mut step = 0usize;
    for epoch in 0..config.epochs {
        let lr = config.schedule.rate(config.lr_init, epoch, config.epochs);
        let mut epoch_rng = rng.fork(epoch as u64);
        let mut order: Vec<usize> = (0..set.samples.len()).collect();
        epoch_rng.shuffle(&mut order);
        let mut sum = LossBreakdown::default();
        let mut batches = 0usize;
        for chunk in order.chunks(config.batch_size) {
            let batch: Vec<EncodedSample> = chunk
                .iter()
                .map(|&i| encode_training_sample(set, i, Some(&clean[i]), &config.perturb, &mut epoch_rng))
                .collect::<Result<_>>()?;
            let eval = evaluate_batch(&expert, &batch, &set.targets, weights)?;
            if !eval.losses.total.is_finite() {
                return Err(Error::Diverged {
                    step,
                    loss: eval.losses.total,
                });
            }
            let grad = eval.total_gradient(weights);
            expert.apply(-lr, &grad);
            if !expert.is_finite() {
                return Err(Error::Diverged {
                    step,
                    loss: f64::NAN,
                });
            }
            sum.intervention += eval.losses.intervention;
            sum.compression += eval.losses.compression;
            sum.contrastive += eval.losses.contrastive;
            sum.total += eval.losses.total;
            batches += 1;
            step += 1;
        }
        let b = batches as f64;
        let losses = LossBreakdown {
            intervention: sum.intervention / b,
            compression: sum.compression / b,
            contrastive: sum.contrastive / b,
            total: sum.total / b,
        };
        let vib = evidence_vib(&expert, &clean, &set.class_index).ok();
        trace.push(EpochRecord {
            epoch,
            lr,
            losses,
            vib,
        });
    }
    Ok(TrainedExpert { expert, trace })
}

fn evidence_vib(expert: &TaskExpert, clean: &[(Vec<f64>, Vec<f64>)], labels: &[usize]) -> Result<VibEstimate> {
    let groups: Vec<(usize, Vec<f64>)> = clean
        .iter()
        .zip(labels)
        .map(|((z, h), &y)| Ok((y, evidence_score(expert, z, h)?)))
        .collect::<Result<_>>()?;
    vib_estimate(&groups)
}

/// Gaussian information proxies on evidence scores.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct VibEstimate {
    /// `½ (log det Σ_total − log det Σ_within)`.
    pub i_zy: f64,
    /// Differential entropy of `N(0, Σ_total)`: `½ log det(2πe Σ_total)`.
    pub i_zx: f64,
    /// Whether a `1e-6` ridge was added because a covariance was singular.
    pub ridged: bool,
}

pub const VIB_RIDGE: f64 = 1e-6;

/// Diagnostic estimate of the two information terms from labelled score
/// samples. Never used as a training signal.
pub fn vib_estimate(samples: &[(usize, Vec<f64>)]) -> Result<VibEstimate> {
    use std::collections::BTreeMap;
    let mut groups: BTreeMap<usize, Vec<&Vec<f64>>> = BTreeMap::new();
    for (y, s) in samples {
        groups.entry(*y).or_default().push(s);
    }
    if groups.len() < 2 || groups.values().any(|g| g.len() < 2) {
        return Err(Error::InsufficientData(
            "VIB estimate needs at least 2 labels with at least 2 samples each".into(),
        ));
    }
    let k = samples[0].1.len();
    if k == 0 || samples.iter().any(|(_, s)| s.len() != k) {
        return Err(Error::Dimension("score samples of mixed length".into()));
    }
    let n = samples.len() as f64;
    let mean = |vs: &[&Vec<f64>]| {
        let mut m = vec![0.0; k];
        for v in vs {
            axpy(1.0 / vs.len() as f64, v, &mut m);
        }
        m
    };
    let all: Vec<&Vec<f64>> = samples.iter().map(|(_, s)| s).collect();
    let m_all = mean(&all);
    let mut total = Matrix::zeros(k, k);
    for s in &all {
        let c = sub(s, &m_all);
        total.add_outer(1.0 / n, &c, &c);
    }
    let mut within = Matrix::zeros(k, k);
    for g in groups.values() {
        let m = mean(g);
        for s in g {
            let c = sub(s, &m);
            within.add_outer(1.0 / n, &c, &c);
        }
    }
    let eig_t = sym_eig(&total)?.values;
    let eig_w = sym_eig(&within)?.values;
    let floor = 1e-12;
    let ridged = eig_t.iter().chain(&eig_w).any(|&v| v <= floor);
    let ridge = if ridged { VIB_RIDGE } else { 0.0 };
    let logdet = |vals: &[f64]| vals.iter().map(|&v| (v.max(0.0) + ridge).ln()).sum::<f64>();
    let ld_t = logdet(&eig_t);
    let ld_w = logdet(&eig_w);
    let two_pi_e = 2.0 * std::f64::consts::PI * std::f64::consts::E;
    Ok(VibEstimate {
        i_zy: 0.5 * (ld_t - ld_w),
        i_zx: 0.5 * (k as f64 * two_pi_e.ln() + ld_t),
        ridged,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pga::AnchorMethod;
    use crate::sphere::UnitVector;

    fn rand_matrix(rng: &mut SeededRng, r: usize, c: usize, s: f64) -> Matrix<f64> {
        Matrix::from_fn(r, c, |_, _| s * rng.gaussian())
    }

    fn unit(rng: &mut SeededRng, d: usize) -> Vec<f64> {
        UnitVector::new(rng.gaussian_vec(d).unwrap()).unwrap().into_vec()
    }

    fn anchor_with_basis(basis: Matrix<f64>) -> ClassAnchor<f64> {
        let d = basis.rows();
        ClassAnchor {
            class_id: 0,
            mu_vis: UnitVector::basis(d, 0),
            basis_vis: basis.clone(),
            eigvals_vis: vec![0.0; basis.cols()],
            mu_txt: UnitVector::basis(d, 0),
            basis_txt: basis,
            eigvals_txt: vec![0.0; 2],
            method: AnchorMethod::Pga,
        }
    }

    #[test]
    fn identity_expert_is_noop() {
        let mut rng = SeededRng::new(1);
        let e = TaskExpert::identity(0, 5, 2);
        let basis = rand_matrix(&mut rng, 5, 2, 1.0);
        let a = anchor_with_basis(basis);
        let z = unit(&mut rng, 5);
        assert_eq!(visual_embedding(&e, &a, &z).unwrap(), z);
        assert_eq!(textual_embedding(&e, &a, &z).unwrap(), z);
    }

    #[test]
    fn single_score_row_is_colinear_with_basis_column() {
        let mut rng = SeededRng::new(2);
        let mut e = TaskExpert::identity(0, 4, 3);
        e.r_vis = Matrix::zeros(4, 4);
        let row = vec![0.5, -1.0, 2.0, 0.25];
        e.s_vis.row_mut(1).copy_from_slice(&row);
        let basis = rand_matrix(&mut rng, 4, 3, 1.0);
        let a = anchor_with_basis(basis.clone());
        let z = unit(&mut rng, 4);
        let out = visual_embedding(&e, &a, &z).unwrap();
        let w = dot(&row, &z);
        for i in 0..4 {
            assert!((out[i] - w * basis[(i, 1)]).abs() < 1e-15);
        }
    }

    #[test]
    fn embedding_matches_explicit_arithmetic() {
        let mut rng = SeededRng::new(3);
        let (d, k) = (6, 3);
        let e = TaskExpert {
            task_id: 0,
            s_vis: rand_matrix(&mut rng, k, d, 1.0),
            r_vis: rand_matrix(&mut rng, d, d, 1.0),
            s_txt: rand_matrix(&mut rng, k, d, 1.0),
            r_txt: rand_matrix(&mut rng, d, d, 1.0),
        };
        let a = anchor_with_basis(rand_matrix(&mut rng, d, k, 1.0));
        let z = unit(&mut rng, d);
        let got = visual_embedding(&e, &a, &z).unwrap();
        for i in 0..d {
            let mut want = 0.0;
            for j in 0..d {
                want += e.r_vis[(i, j)] * z[j];
            }
            for c in 0..k {
                let mut alpha = 0.0;
                for j in 0..d {
                    alpha += e.s_vis[(c, j)] * z[j];
                }
                want += a.basis_vis[(i, c)] * alpha;
            }
            assert!((got[i] - want).abs() < 1e-12);
        }
        let bad = anchor_with_basis(rand_matrix(&mut rng, d, k + 1, 1.0));
        assert!(matches!(visual_embedding(&e, &bad, &z), Err(Error::Dimension(_))));
    }

    #[test]
    fn evidence_cases() {
        let mut rng = SeededRng::new(4);
        let z = unit(&mut rng, 5);
        let e = TaskExpert::identity(0, 5, 2);
        assert_eq!(evidence_score(&e, &z, &z).unwrap(), vec![0.0, 0.0]);
        let mut e2 = e.clone();
        e2.s_vis = rand_matrix(&mut rng, 2, 5, 1.0);
        e2.s_txt = e2.s_vis.clone();
        let s = evidence_score(&e2, &z, &z).unwrap();
        let single = e2.s_vis.matvec(&z).unwrap();
        for (a, b) in s.iter().zip(&single) {
            assert!((a - 2.0 * b).abs() < 1e-15);
        }
    }

    #[test]
    fn intervention_and_compression_hand_values() {
        assert_eq!(loss_intervention(&[1.0, 2.0], &[1.0, 2.0]), 0.0);
        assert_eq!(loss_intervention(&[1.0, 2.0], &[0.0, 3.0]), 1.0);
        assert_eq!(loss_compression(&[vec![0.0], vec![2.0]], &[vec![0.0], vec![0.0]]), 2.0);
        let same = vec![vec![0.3, -1.0]; 3];
        assert_eq!(loss_compression(&same, &same), 0.0);
    }

    #[test]
    fn contrastive_limits() {
        let e = vec![vec![1.0, 0.0, 0.0]];
        let t = vec![vec![1.0, 0.0, 0.0], vec![0.0, 1.0, 0.0], vec![0.0, 0.0, 1.0]];
        let sharp = loss_contrastive(&e, &t, &[0], 1e-3).unwrap();
        assert!(sharp.loss < 1e-12);
        let flat = loss_contrastive(&[vec![0.0, 0.0, 1.0]], &t[..2], &[1], 0.07).unwrap();
        assert!((flat.loss - 2f64.ln()).abs() < 1e-12);
        assert!(matches!(
            loss_contrastive(&e, &t[..1], &[0], 0.07),
            Err(Error::Degenerate(_))
        ));
    }

    #[test]
    fn total_weights() {
        let w = LossWeights::default();
        assert_eq!(loss_total(&w, 1.0, 1.0, 1.0), 2.8);
        let zero = LossWeights {
            lambda_int: 0.0,
            lambda_comp: 0.0,
            ..w
        };
        assert_eq!(loss_total(&zero, 3.0, 5.0, 0.7), 0.7);
    }

    #[test]
    fn schedules() {
        assert_eq!(LrSchedule::Cosine.rate(0.05, 0, 20), 0.05);
        assert!((LrSchedule::Cosine.rate(0.05, 10, 20) - 0.025).abs() < 1e-15);
        assert_eq!(LrSchedule::Step.rate(1.0, 15, 20), 0.01);
    }

    #[test]
    fn vib_proxies() {
        let mut rng = SeededRng::new(5);
        let mut separated = Vec::new();
        for y in 0..3usize {
            for _ in 0..20 {
                let s: Vec<f64> = (0..2).map(|j| (y * 3 + j) as f64 + 0.01 * rng.gaussian()).collect();
                separated.push((y, s));
            }
        }
        let v = vib_estimate(&separated).unwrap();
        let mut shuffled = separated.clone();
        let mut labels: Vec<usize> = shuffled.iter().map(|p| p.0).collect();
        rng.shuffle(&mut labels);
        for (p, y) in shuffled.iter_mut().zip(labels) {
            p.0 = y;
        }
        let s = vib_estimate(&shuffled).unwrap();
        assert!(v.i_zy > s.i_zy + 1.0, "{} vs {}", v.i_zy, s.i_zy);
        assert!(s.i_zy.abs() < 0.5, "{}", s.i_zy);

        let flat: Vec<(usize, Vec<f64>)> = (0..8).map(|i| (i % 2, vec![1.0, 1.0])).collect();
        let f = vib_estimate(&flat).unwrap();
        assert!(f.ridged);
        assert_eq!(f.i_zy, 0.0);
        let floor = 0.5 * 2.0 * ((2.0 * std::f64::consts::PI * std::f64::consts::E).ln() + VIB_RIDGE.ln());
        assert!((f.i_zx - floor).abs() < 1e-12);
        assert!(vib_estimate(&flat[..3]).is_err());
    }
}
