//! Stage-by-stage training, inference and evaluation.
//!
//! Each stage opens one task's training data, builds and freezes the class
//! anchors, trains the task expert, closes the data again and evaluates on the
//! held-out samples of every task seen so far. Nothing from a closed task is
//! ever read again; only class-level statistics (anchors and prompts) and the
//! expert survive the stage.

use std::collections::{BTreeMap, BTreeSet};

use serde::Serialize;

use crate::encoder::{FrozenEncoder, RawSample};
use crate::error::{Error, Result};
use crate::expert::{train_task_expert, ClassTargets, EpochRecord, TaskExpert, TaskTrainingSet};
use crate::io::config::{Config, Variant};
use crate::linalg::{axpy, SeededRng};
use crate::pga::{build_class_anchor, build_class_anchor_pca, AnchorStore, ClassAnchor, MeanMode};
use crate::routing::{
    cosine_route, mixture_scores, argmax_class, expert_text_embeddings, task_costs, task_measure,
    Candidate, DiscreteMeasure, RoutingDistribution,
};
use crate::sphere::UnitVector;
use crate::{ClassId, TaskId};

/// RNG stream labels forked from the run seed.
const ENCODER_STREAM: u64 = 0x0065_6e63;
const EXPERT_STREAM: u64 = 0x0065_7870;

#[derive(Clone, Debug, PartialEq)]
pub struct TaskData {
    pub task_id: TaskId,
    /// Ascending.
    pub classes: Vec<ClassId>,
    pub samples: Vec<RawSample>,
}

/// Ordered tasks with pairwise disjoint class sets.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct TaskStream {
    tasks: Vec<TaskData>,
}

impl TaskStream {
    pub fn new(tasks: Vec<TaskData>) -> Result<Self> {
        let mut owner: BTreeMap<ClassId, TaskId> = BTreeMap::new();
        let mut ids = BTreeSet::new();
        let mut dim = None;
        for t in &tasks {
            if !ids.insert(t.task_id) {
                return Err(Error::Domain(format!("task {} listed twice", t.task_id)));
            }
            let class_set: BTreeSet<ClassId> = t.classes.iter().copied().collect();
            for &c in &t.classes {
                if let Some(prev) = owner.insert(c, t.task_id) {
                    return Err(Error::Domain(format!(
                        "class {c} appears in tasks {prev} and {}",
                        t.task_id
                    )));
                }
            }
            for s in &t.samples {
                if s.task != t.task_id || !class_set.contains(&s.label) {
                    return Err(Error::Domain(format!(
                        "sample with label {} / task {} filed under task {}",
                        s.label, s.task, t.task_id
                    )));
                }
                let d = *dim.get_or_insert(s.dim());
                if s.dim() != d || s.caption.as_ref().is_some_and(|c| c.len() != d) {
                    return Err(Error::Dimension("samples of mixed dimension".into()));
                }
            }
        }
        Ok(Self { tasks })
    }

    /// Groups samples by task id (ascending) in their original order.
    pub fn from_samples(samples: Vec<RawSample>) -> Result<Self> {
        let mut grouped: BTreeMap<TaskId, (BTreeSet<ClassId>, Vec<RawSample>)> = BTreeMap::new();
        for s in samples {
            let e = grouped.entry(s.task).or_default();
            e.0.insert(s.label);
            e.1.push(s);
        }
        Self::new(
            grouped
                .into_iter()
                .map(|(task_id, (classes, samples))| TaskData {
                    task_id,
                    classes: classes.into_iter().collect(),
                    samples,
                })
                .collect(),
        )
    }

    pub fn tasks(&self) -> &[TaskData] {
        &self.tasks
    }

    pub fn task(&self, id: TaskId) -> Option<&TaskData> {
        self.tasks.iter().find(|t| t.task_id == id)
    }

    pub fn task_ids(&self) -> Vec<TaskId> {
        self.tasks.iter().map(|t| t.task_id).collect()
    }

    pub fn len(&self) -> usize {
        self.tasks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tasks.is_empty()
    }

    pub fn samples(&self) -> impl Iterator<Item = &RawSample> {
        self.tasks.iter().flat_map(|t| t.samples.iter())
    }

    pub fn num_samples(&self) -> usize {
        self.tasks.iter().map(|t| t.samples.len()).sum()
    }

    /// `"B{m} Inc{n}"`: `m` classes in the first task, `n` per later task
    /// (`B0` when every task has the same size).
    pub fn descriptor(&self) -> String {
        let sizes: Vec<usize> = self.tasks.iter().map(|t| t.classes.len()).collect();
        match sizes.as_slice() {
            [] => "B0 Inc0".into(),
            [n] => format!("B0 Inc{n}"),
            [first, rest @ ..] if rest.iter().all(|r| r == first) => format!("B0 Inc{first}"),
            [first, second, ..] => format!("B{first} Inc{second}"),
        }
    }
}

/// Stage-wise access to training data. `close_task` ends a stage; a correct
/// driver never opens that task again.
pub trait TrainingSource {
    fn task_ids(&self) -> Vec<TaskId>;
    fn open_task(&mut self, task: TaskId) -> Result<Vec<RawSample>>;
    fn close_task(&mut self, task: TaskId);
}

/// A [`TaskStream`] behind a one-way gate: a closed task refuses every
/// further read.
pub struct StagedSource<'a> {
    stream: &'a TaskStream,
    closed: BTreeSet<TaskId>,
}

impl<'a> StagedSource<'a> {
    pub fn new(stream: &'a TaskStream) -> Self {
        Self {
            stream,
            closed: BTreeSet::new(),
        }
    }
}

impl TrainingSource for StagedSource<'_> {
    fn task_ids(&self) -> Vec<TaskId> {
        self.stream.task_ids()
    }

    fn open_task(&mut self, task: TaskId) -> Result<Vec<RawSample>> {
        if self.closed.contains(&task) {
            return Err(Error::Domain(format!(
                "exemplar-free violation: training data of task {task} requested after its stage"
            )));
        }
        self.stream
            .task(task)
            .map(|t| t.samples.clone())
            .ok_or(Error::UnknownTask(task))
    }

    fn close_task(&mut self, task: TaskId) {
        self.closed.insert(task);
    }
}

/// Everything inference needs, accumulated over the stages.
#[derive(Clone, Debug, PartialEq)]
pub struct ContinualState {
    pub config: Config,
    pub visual: FrozenEncoder,
    pub textual: FrozenEncoder,
    pub anchors: AnchorStore<f64>,
    /// Raw class prompt (mean training caption) per class.
    pub prompts: BTreeMap<ClassId, Vec<f64>>,
    pub experts: BTreeMap<TaskId, TaskExpert>,
    /// Tasks in the order they were learned.
    pub task_order: Vec<TaskId>,
}

impl ContinualState {
    /// Empty state with the run's frozen encoders.
    pub fn new(config: Config, d_in: usize) -> Result<Self> {
        let seed = SeededRng::new(config.seed).fork(ENCODER_STREAM).seed();
        let (visual, textual) = FrozenEncoder::pair(seed, d_in, config.d)?;
        Ok(Self {
            config,
            visual,
            textual,
            anchors: AnchorStore::new(),
            prompts: BTreeMap::new(),
            experts: BTreeMap::new(),
            task_order: Vec::new(),
        })
    }

    pub fn seed(&self) -> u64 {
        self.config.seed
    }

    pub fn expert_digest(&self, task: TaskId) -> Option<u64> {
        self.experts.get(&task).map(TaskExpert::digest)
    }

    /// Prompt-only fused text direction of a class.
    pub fn text_direction(&self, class: ClassId) -> Result<Vec<f64>> {
        let p = self
            .prompts
            .get(&class)
            .ok_or_else(|| Error::Domain(format!("no prompt stored for class {class}")))?;
        Ok(self.textual.encode_textual_fused(p, None)?.into_vec())
    }

    /// FNV-1a of the canonical state encoding.
    pub fn digest(&self) -> u64 {
        crate::io::state::state_digest(self)
    }

    fn check_ready(&self) -> Result<()> {
        if self.task_order.is_empty() {
            return Err(Error::InsufficientData("state holds no trained task".into()));
        }
        for t in &self.task_order {
            if !self.anchors.is_frozen(*t) || !self.experts.contains_key(t) {
                return Err(Error::Domain(format!("task {t} lacks a frozen anchor set or expert")));
            }
        }
        Ok(())
    }
}

/// How per-task routing weights are produced at inference.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RoutingMode {
    /// Boltzmann weights over Sinkhorn costs.
    Transport,
    /// All mass on the task with the lowest Sinkhorn cost.
    Hard,
    /// Equal weights.
    Uniform,
    /// Boltzmann weights over best single-atom cosine costs.
    Cosine,
}

impl RoutingMode {
    pub fn for_variant(v: Variant) -> Self {
        match v {
            Variant::Full | Variant::Pca => RoutingMode::Transport,
            Variant::SimOnly => RoutingMode::Uniform,
            Variant::SingleTask => RoutingMode::Hard,
            Variant::CosineRoute => RoutingMode::Cosine,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Inference {
    pub label: ClassId,
    /// Over the predictor's tasks, in learning order.
    pub routing: RoutingDistribution<f64>,
    /// Over the predictor's classes, ascending class id.
    pub scores: Vec<f64>,
}

/// Inference over a prefix of the learned tasks with cached per-task and
/// per-class quantities.
pub struct Predictor<'a> {
    state: &'a ContinualState,
    tasks: Vec<TaskId>,
    mode: RoutingMode,
    measures: Vec<DiscreteMeasure<f64>>,
    classes: Vec<ClassId>,
    class_task: BTreeMap<ClassId, usize>,
    text_dirs: Vec<Vec<f64>>,
    text_cache: Vec<Vec<Vec<f64>>>,
}

impl<'a> Predictor<'a> {
    /// Predictor over all learned tasks.
    pub fn new(state: &'a ContinualState, mode: RoutingMode) -> Result<Self> {
        Self::for_tasks(state, &state.task_order, mode)
    }

    pub fn for_tasks(state: &'a ContinualState, tasks: &[TaskId], mode: RoutingMode) -> Result<Self> {
        state.check_ready()?;
        if tasks.is_empty() {
            return Err(Error::InsufficientData("predictor needs at least one task".into()));
        }
        let mut measures = Vec::with_capacity(tasks.len());
        let mut classes = Vec::new();
        let mut class_task = BTreeMap::new();
        for (i, &t) in tasks.iter().enumerate() {
            let ids = state.anchors.classes_of(t).ok_or(Error::UnknownTask(t))?;
            let anchors: Vec<&ClassAnchor<f64>> = ids.iter().filter_map(|c| state.anchors.get(*c)).collect();
            measures.push(task_measure(anchors)?);
            for &c in ids {
                classes.push(c);
                class_task.insert(c, i);
            }
        }
        classes.sort_unstable();
        let text_dirs: Vec<Vec<f64>> = classes.iter().map(|&c| state.text_direction(c)).collect::<Result<_>>()?;
        let mut predictor = Self {
            state,
            tasks: tasks.to_vec(),
            mode,
            measures,
            classes,
            class_task,
            text_dirs,
            text_cache: Vec::new(),
        };
        let cache = {
            let candidates = predictor.candidates();
            predictor
                .tasks
                .iter()
                .map(|t| expert_text_embeddings(&state.experts[t], &candidates))
                .collect::<Result<Vec<_>>>()?
        };
        predictor.text_cache = cache;
        Ok(predictor)
    }

    fn candidates(&self) -> Vec<Candidate<'_>> {
        self.classes
            .iter()
            .zip(&self.text_dirs)
            .map(|(&c, t)| Candidate {
                class_id: c,
                anchor: self.state.anchors.get(c).expect("anchor of a listed class"),
                text: t,
            })
            .collect()
    }

    pub fn tasks(&self) -> &[TaskId] {
        &self.tasks
    }

    pub fn classes(&self) -> &[ClassId] {
        &self.classes
    }

    /// Position (in learning order) of the task owning `class`.
    pub fn task_index_of(&self, class: ClassId) -> Option<usize> {
        self.class_task.get(&class).copied()
    }

    pub fn encode(&self, x: &RawSample) -> Result<UnitVector<f64>> {
        self.state.visual.encode_visual(x)
    }

    pub fn route(&self, z: &UnitVector<f64>) -> Result<RoutingDistribution<f64>> {
        let n = self.tasks.len();
        let params = self.state.config.ot_params();
        match self.mode {
            RoutingMode::Uniform => RoutingDistribution::uniform(n),
            RoutingMode::Transport => RoutingDistribution::boltzmann(&task_costs(z, &self.measures, &params)?, params.tau_route),
            RoutingMode::Hard => {
                let costs = task_costs(z, &self.measures, &params)?;
                let mut best = 0;
                for (i, &c) in costs.iter().enumerate() {
                    if c < costs[best] {
                        best = i;
                    }
                }
                RoutingDistribution::one_hot(n, best)
            }
            RoutingMode::Cosine => cosine_route(z, &self.measures, params.tau_route),
        }
    }

    pub fn infer(&self, x: &RawSample) -> Result<Inference> {
        let z = self.encode(x)?;
        let routing = self.route(&z)?;
        let experts: Vec<&TaskExpert> = self.tasks.iter().map(|t| &self.state.experts[t]).collect();
        let candidates = self.candidates();
        let scores = mixture_scores(z.as_slice(), &candidates, &experts, &self.text_cache, &routing)?;
        let (label, _) = argmax_class(&candidates, &scores)?;
        Ok(Inference { label, routing, scores })
    }

    /// `argmax_c cos(g_v(x), t_c)` over the predictor's classes.
    pub fn zero_shot(&self, x: &RawSample) -> Result<ClassId> {
        let z = self.encode(x)?;
        crate::routing::zero_shot_predict(z.as_slice(), &self.candidates())
    }
}

/// `infer` over every learned task with the state's configured variant.
pub fn infer(state: &ContinualState, x: &RawSample) -> Result<Inference> {
    Predictor::new(state, RoutingMode::for_variant(state.config.variant))?.infer(x)
}

/// Zero-shot prediction over every learned class.
pub fn zero_shot_predict(state: &ContinualState, x: &RawSample) -> Result<ClassId> {
    Predictor::new(state, RoutingMode::Uniform)?.zero_shot(x)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct StageMetrics {
    pub stage: usize,
    pub task_id: TaskId,
    /// Accuracy over the test samples of every task seen so far.
    pub accuracy: f64,
    /// Accuracy per seen task, in learning order.
    pub task_accuracy: Vec<f64>,
    /// Fraction of samples whose most probable task is their own.
    pub routing_accuracy: f64,
    pub zero_shot_accuracy: f64,
    pub samples: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MetricsReport {
    pub variant: String,
    pub split: String,
    pub stages: Vec<StageMetrics>,
    /// Mean of the stage accuracies.
    pub average_accuracy: f64,
    /// Accuracy after the final stage.
    pub last_accuracy: f64,
    /// Per task: best earlier accuracy minus final accuracy (0 for the last task).
    pub forgetting: Vec<f64>,
    pub max_forgetting: f64,
    /// Largest drop of the stage accuracy below the first stage's.
    pub max_degradation: f64,
    pub config_digest: String,
}

impl MetricsReport {
    pub fn from_stages(variant: Variant, split: String, stages: Vec<StageMetrics>, config_digest: String) -> Result<Self> {
        if stages.is_empty() {
            return Err(Error::InsufficientData("metrics need at least one stage".into()));
        }
        let acc: Vec<f64> = stages.iter().map(|s| s.accuracy).collect();
        let average_accuracy = acc.iter().sum::<f64>() / acc.len() as f64;
        let last_accuracy = *acc.last().expect("non-empty");
        let last = stages.last().expect("non-empty");
        let forgetting: Vec<f64> = (0..last.task_accuracy.len())
            .map(|t| {
                let best_before = stages[..stages.len() - 1]
                    .iter()
                    .filter_map(|s| s.task_accuracy.get(t).copied())
                    .fold(f64::NEG_INFINITY, f64::max);
                if best_before.is_finite() {
                    best_before - last.task_accuracy[t]
                } else {
                    0.0
                }
            })
            .collect();
        let max_forgetting = forgetting.iter().copied().fold(0.0, f64::max);
        let max_degradation = acc.iter().map(|a| acc[0] - a).fold(0.0, f64::max);
        Ok(Self {
            variant: variant.name().to_string(),
            split,
            stages,
            average_accuracy,
            last_accuracy,
            forgetting,
            max_forgetting,
            max_degradation,
            config_digest,
        })
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("metrics serialise")
    }
}

/// Accuracy of a predictor on the test samples of its tasks.
pub fn evaluate_stage(predictor: &Predictor<'_>, test: &TaskStream, stage: usize) -> Result<StageMetrics> {
    let mut task_hits = vec![(0usize, 0usize); predictor.tasks().len()];
    let mut routed = 0usize;
    let mut zero_shot = 0usize;
    for (i, &t) in predictor.tasks().iter().enumerate() {
        let data = test.task(t).ok_or(Error::UnknownTask(t))?;
        for x in &data.samples {
            let out = predictor.infer(x)?;
            task_hits[i].1 += 1;
            if out.label == x.label {
                task_hits[i].0 += 1;
            }
            if out.routing.argmax() == i {
                routed += 1;
            }
            if predictor.zero_shot(x)? == x.label {
                zero_shot += 1;
            }
        }
    }
    let total: usize = task_hits.iter().map(|h| h.1).sum();
    if total == 0 {
        return Err(Error::InsufficientData("no test samples for the evaluated tasks".into()));
    }
    let correct: usize = task_hits.iter().map(|h| h.0).sum();
    let n = total as f64;
    Ok(StageMetrics {
        stage,
        task_id: *predictor.tasks().last().expect("non-empty"),
        accuracy: correct as f64 / n,
        task_accuracy: task_hits
            .iter()
            .map(|&(c, t)| if t == 0 { 0.0 } else { c as f64 / t as f64 })
            .collect(),
        routing_accuracy: routed as f64 / n,
        zero_shot_accuracy: zero_shot as f64 / n,
        samples: total,
    })
}

/// Recomputes every stage's metrics from a final state, restricting it to the
/// tasks learned up to that stage.
pub fn evaluate_metrics(state: &ContinualState, test: &TaskStream, variant: Variant) -> Result<MetricsReport> {
    let mode = RoutingMode::for_variant(variant);
    let mut stages = Vec::with_capacity(state.task_order.len());
    for b in 0..state.task_order.len() {
        let p = Predictor::for_tasks(state, &state.task_order[..=b], mode)?;
        stages.push(evaluate_stage(&p, test, b)?);
    }
    MetricsReport::from_stages(variant, test.descriptor(), stages, state.config.digest_hex())
}

/// Anchor and expert digests of every task learned so far.
pub type DigestSnapshot = BTreeMap<TaskId, (u64, u64)>;

#[derive(Clone, Debug)]
pub struct TrainingRun {
    pub state: ContinualState,
    pub report: MetricsReport,
    pub traces: BTreeMap<TaskId, Vec<EpochRecord>>,
    /// Snapshot taken at the end of every stage.
    pub digests: Vec<DigestSnapshot>,
}

fn mean_of<'s>(vs: impl Iterator<Item = &'s [f64]>, d: usize) -> Vec<f64> {
    let mut m = vec![0.0; d];
    let mut n = 0usize;
    for v in vs {
        axpy(1.0, v, &mut m);
        n += 1;
    }
    for x in &mut m {
        *x /= n.max(1) as f64;
    }
    m
}

/// Anchors, prompts and expert for one task. Reads nothing but `samples`.
fn learn_task(state: &mut ContinualState, task: TaskId, samples: &[RawSample]) -> Result<Vec<EpochRecord>> {
    if samples.is_empty() {
        return Err(Error::InsufficientData("no training samples".into()));
    }
    let cfg = state.config.clone();
    let d_in = state.visual.input_dim();
    let classes: Vec<ClassId> = samples.iter().map(|s| s.label).collect::<BTreeSet<_>>().into_iter().collect();
    let index_of: BTreeMap<ClassId, usize> = classes.iter().enumerate().map(|(i, &c)| (c, i)).collect();

    let mut prompts = Vec::with_capacity(classes.len());
    for &c in &classes {
        let captions = samples.iter().filter(|s| s.label == c).map(|s| s.caption_or_features());
        prompts.push(mean_of(captions, d_in));
    }

    let method_pca = cfg.variant == Variant::Pca;
    let mut anchors = Vec::with_capacity(classes.len());
    for (ci, &c) in classes.iter().enumerate() {
        let members: Vec<&RawSample> = samples.iter().filter(|s| s.label == c).collect();
        let vis: Vec<UnitVector<f64>> = members.iter().map(|s| state.visual.encode_visual(s)).collect::<Result<_>>()?;
        let txt: Vec<UnitVector<f64>> = members
            .iter()
            .map(|s| state.textual.encode_textual_fused(&prompts[ci], Some(s.caption_or_features())))
            .collect::<Result<_>>()?;
        let anchor = if method_pca {
            build_class_anchor_pca(&vis, &txt, c, cfg.k, MeanMode::Approx)?
        } else {
            build_class_anchor(&vis, &txt, c, cfg.k, MeanMode::Approx)?
        };
        anchors.push(anchor);
    }
    for a in &anchors {
        state.anchors.insert(task, a.clone())?;
    }
    state.anchors.freeze_task(task)?;

    let text_dirs: Vec<Vec<f64>> = prompts
        .iter()
        .map(|p| Ok(state.textual.encode_textual_fused(p, Some(p))?.into_vec()))
        .collect::<Result<_>>()?;
    let targets = ClassTargets {
        vis_bases: anchors.iter().map(|a| a.basis_vis.clone()).collect(),
        txt_bases: anchors.iter().map(|a| a.basis_txt.clone()).collect(),
        text_dirs,
    };
    let set = TaskTrainingSet {
        task_id: task,
        samples,
        class_index: samples.iter().map(|s| index_of[&s.label]).collect(),
        prompts: prompts.clone(),
        targets,
        visual: &state.visual,
        textual: &state.textual,
    };
    let rng = SeededRng::new(cfg.seed).fork(EXPERT_STREAM).fork(u64::from(task));
    let trained = train_task_expert(&set, &cfg.loss_weights(), &cfg.train_config(), cfg.k, &rng)?;

    for (c, p) in classes.iter().zip(prompts) {
        state.prompts.insert(*c, p);
    }
    state.experts.insert(task, trained.expert);
    state.task_order.push(task);
    Ok(trained.trace)
}

fn snapshot(state: &ContinualState) -> Result<DigestSnapshot> {
    state
        .task_order
        .iter()
        .map(|&t| {
            let a = state.anchors.task_digest(t)?;
            let e = state.expert_digest(t).ok_or(Error::UnknownTask(t))?;
            Ok((t, (a, e)))
        })
        .collect()
}

/// Learns every task of `source` in order and evaluates after each stage.
pub fn run_training(source: &mut dyn TrainingSource, test: &TaskStream, config: &Config) -> Result<TrainingRun> {
    config.validate()?;
    let order = source.task_ids();
    let d_in = test
        .samples()
        .next()
        .map(RawSample::dim)
        .ok_or_else(|| Error::InsufficientData("empty test stream".into()))?;
    let mut state = ContinualState::new(config.clone(), d_in)?;
    let mode = RoutingMode::for_variant(config.variant);
    let mut stages = Vec::with_capacity(order.len());
    let mut traces = BTreeMap::new();
    let mut digests = Vec::with_capacity(order.len());
    for (b, &task) in order.iter().enumerate() {
        let trace = {
            let samples = source.open_task(task).map_err(|e| e.in_task(task))?;
            learn_task(&mut state, task, &samples).map_err(|e| e.in_task(task))?
        };
        source.close_task(task);
        traces.insert(task, trace);
        let p = Predictor::for_tasks(&state, &state.task_order, mode).map_err(|e| e.in_task(task))?;
        stages.push(evaluate_stage(&p, test, b).map_err(|e| e.in_task(task))?);
        digests.push(snapshot(&state)?);
    }
    let report = MetricsReport::from_stages(config.variant, test.descriptor(), stages, config.digest_hex())?;
    Ok(TrainingRun {
        state,
        report,
        traces,
        digests,
    })
}

/// Runs each requested variant on the same stream and seed. Variants that
/// differ only at inference share one trained state.
pub fn run_ablation(
    train: &TaskStream,
    test: &TaskStream,
    config: &Config,
    variants: &[Variant],
) -> Result<BTreeMap<Variant, MetricsReport>> {
    let mut out = BTreeMap::new();
    let mut trained: BTreeMap<bool, ContinualState> = BTreeMap::new();
    for &v in variants {
        let pca = v == Variant::Pca;
        if !trained.contains_key(&pca) {
            let cfg = Config {
                variant: if pca { Variant::Pca } else { Variant::Full },
                ..config.clone()
            };
            let run = run_training(&mut StagedSource::new(train), test, &cfg)?;
            trained.insert(pca, run.state);
        }
        out.insert(v, evaluate_metrics(&trained[&pca], test, v)?);
    }
    Ok(out)
}
