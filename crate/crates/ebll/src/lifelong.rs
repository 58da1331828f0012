//! Sequential task training with knowledge-distillation and code-distance
//! preservation terms, plus the baseline strategies it is compared against.
//!
//! Training of task T minimizes, per batch mean:
//!   cross_entropy(new task)
//!   + sum over past tasks t of distillation_loss(output_t, recorded_t)
//!   + sum over past tasks t of alpha_t * 1/2 ||code_t - recorded_code_t||^2
//! where targets and codes were recorded on the new data with the frozen
//! snapshot taken before training started.

use std::collections::BTreeMap;

use crate::autoencoder::{train_autoencoder, AeEpochRecord, AeTrainConfig, FrozenEncoder};
use crate::batch::batch_grads;
use crate::data::{augment, batches, AugmentSpec, Dataset, Sample, SampleId, TaskData, TaskId};
use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId};
use crate::model::{one_hot, ArchSpec, FrozenSnapshot, FrozenStack, TaskModel};
use crate::optim::{Sgd, SgdConfig};
use crate::parallel;
use crate::seeds::{self, tag};
use crate::tensor::{Tensor, PROB_FLOOR};

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    Finetune,
    FeatureExtraction,
    Lwf,
    Ebll,
    EbllSeparateFcs,
    Joint,
}

impl Strategy {
    pub const ALL: [Strategy; 6] = [
        Strategy::Finetune,
        Strategy::FeatureExtraction,
        Strategy::Lwf,
        Strategy::Ebll,
        Strategy::EbllSeparateFcs,
        Strategy::Joint,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Strategy::Finetune => "finetune",
            Strategy::FeatureExtraction => "feature_extraction",
            Strategy::Lwf => "lwf",
            Strategy::Ebll => "ebll",
            Strategy::EbllSeparateFcs => "ebll_separate_fcs",
            Strategy::Joint => "joint",
        }
    }

    pub fn uses_distillation(self) -> bool {
        matches!(self, Strategy::Lwf | Strategy::Ebll | Strategy::EbllSeparateFcs)
    }

    pub fn uses_code_loss(self) -> bool {
        matches!(self, Strategy::Ebll | Strategy::EbllSeparateFcs)
    }

    pub fn trains_autoencoder(self) -> bool {
        self.uses_code_loss()
    }

    pub fn freezes_trunk(self) -> bool {
        matches!(self, Strategy::FeatureExtraction)
    }
}

impl std::str::FromStr for Strategy {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Strategy::ALL
            .iter()
            .copied()
            .find(|st| st.name() == s)
            .ok_or_else(|| {
                Error::Config(format!(
                    "unknown strategy '{s}'; expected one of {:?}",
                    Strategy::ALL.map(|st| st.name())
                ))
            })
    }
}

impl std::fmt::Display for Strategy {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// Per-past-task record: head snapshot, trained encoder (when the strategy
/// uses one), preservation strength, and the targets/codes recorded on the
/// current task's data. Entries are append-only across the task sequence.
#[derive(Debug, Clone)]
pub struct TaskMemoryEntry {
    pub task: TaskId,
    pub class_count: usize,
    pub head_star: FrozenStack,
    pub encoder: Option<crate::autoencoder::Autoencoder>,
    pub alpha: f64,
    pub recorded_targets: BTreeMap<SampleId, Tensor>,
    pub recorded_codes: BTreeMap<SampleId, Tensor>,
}

#[derive(Debug, Clone, Default)]
pub struct TaskMemory {
    entries: Vec<TaskMemoryEntry>,
}

impl TaskMemory {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn entries(&self) -> &[TaskMemoryEntry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn push_entry(&mut self, entry: TaskMemoryEntry) {
        debug_assert!(
            self.entries.iter().all(|e| e.task != entry.task),
            "memory entry for {} already exists",
            entry.task
        );
        self.entries.push(entry);
    }

    pub fn encoder_count(&self) -> usize {
        self.entries.iter().filter(|e| e.encoder.is_some()).count()
    }

    /// Bit-exact checksum over all recorded targets and codes, for the
    /// isolation invariant (recordings never mutate during a training run).
    pub fn recorded_checksum(&self) -> u64 {
        let mut h: u64 = 0x13198a2e03707344;
        for e in &self.entries {
            for (id, t) in &e.recorded_targets {
                h = h.rotate_left(9).wrapping_add(id.0).wrapping_mul(0x100000001b3);
                h = h.wrapping_add(t.bits_checksum());
            }
            for (id, t) in &e.recorded_codes {
                h = h.rotate_left(7).wrapping_add(id.0).wrapping_mul(0x100000001b3);
                h = h.wrapping_add(t.bits_checksum());
            }
        }
        h
    }
}

/// Records targets (and codes, for entries with an encoder) for every
/// augmented sample of the new task's data, computed with the frozen
/// snapshot only. Existing recordings are replaced wholesale; they stay
/// untouched for the duration of the subsequent training run.
pub fn record_memory(
    snapshot: &FrozenSnapshot,
    memory: &mut TaskMemory,
    new_data: &Dataset,
    augment_spec: &AugmentSpec,
) -> Result<()> {
    let augmented = augment(new_data, augment_spec);
    let feats: Vec<Result<(SampleId, Tensor)>> =
        parallel::map_collect(&augmented.samples, |s| {
            Ok((s.id, snapshot.features_value(&s.x)?))
        });
    let mut features = Vec::with_capacity(feats.len());
    for f in feats {
        features.push(f?);
    }

    for entry in &mut memory.entries {
        let task = entry.task;
        let targets: Vec<Result<(SampleId, Tensor)>> = parallel::map_collect(&features, |(id, f)| {
            Ok((*id, snapshot.task_probs_from_features_value(task, f)?))
        });
        entry.recorded_targets.clear();
        for t in targets {
            let (id, p) = t?;
            entry.recorded_targets.insert(id, p);
        }
        entry.recorded_codes.clear();
        if let Some(ae) = &entry.encoder {
            let enc = ae.frozen_encoder();
            let codes: Vec<(SampleId, Tensor)> = parallel::map_collect(&features, |(id, f)| {
                (*id, enc.encode_value(f))
            });
            for (id, c) in codes {
                entry.recorded_codes.insert(id, c);
            }
        }
    }
    Ok(())
}

/// Resolved references to one past task's preservation terms.
struct PastTerm<'m> {
    task: TaskId,
    alpha: f64,
    encoder: Option<FrozenEncoder>,
    targets: &'m BTreeMap<SampleId, Tensor>,
    codes: &'m BTreeMap<SampleId, Tensor>,
}

fn prepare_past_terms(memory: &TaskMemory, need_encoders: bool) -> Result<Vec<PastTerm<'_>>> {
    memory
        .entries
        .iter()
        .map(|e| {
            if need_encoders && e.encoder.is_none() {
                return Err(Error::MissingEncoder(e.task));
            }
            Ok(PastTerm {
                task: e.task,
                alpha: e.alpha,
                encoder: e.encoder.as_ref().map(|ae| ae.frozen_encoder()),
                targets: &e.recorded_targets,
                codes: &e.recorded_codes,
            })
        })
        .collect()
}

/// Per-sample loss values for metrics.
#[derive(Debug, Clone, Copy, Default)]
pub struct SampleLossTerms {
    pub total: f64,
    pub ce: f64,
    pub distill: f64,
    pub code: f64,
}

/// Builds one sample's loss node. Zero-strength code terms are skipped
/// entirely, so a run with all alphas zero records exactly the same
/// operation sequence as the distillation-only loss.
fn sample_loss_node(
    g: &mut Graph,
    model: &TaskModel,
    task: TaskId,
    class_count: usize,
    past: &[PastTerm<'_>],
    theta: f64,
    use_distillation: bool,
    use_code: bool,
    sample: &Sample,
) -> Result<(NodeId, SampleLossTerms)> {
    let x = g.input(sample.x.clone());
    let feat = model.forward_features(g, x)?;
    let probs = model.forward_task_from_features(g, task, feat)?;
    let ce = g.cross_entropy(probs, &one_hot(sample.label, class_count))?;
    let mut terms = vec![ce];
    let mut stats = SampleLossTerms {
        ce: g.value(ce).item(),
        ..Default::default()
    };
    if use_distillation {
        for p in past {
            let current = model.forward_task_from_features(g, p.task, feat)?;
            let recorded = p
                .targets
                .get(&sample.id)
                .ok_or(Error::MemoryIntegrity(sample.id, p.task))?;
            let d = g.distillation_loss(current, recorded, theta)?;
            stats.distill += g.value(d).item();
            terms.push(d);
        }
    }
    if use_code {
        for p in past {
            if p.alpha == 0.0 {
                continue;
            }
            let enc = p
                .encoder
                .as_ref()
                .ok_or(Error::MissingEncoder(p.task))?;
            let code = enc.encode_node(g, feat)?;
            let recorded = p
                .codes
                .get(&sample.id)
                .ok_or(Error::MemoryIntegrity(sample.id, p.task))?;
            let rec_node = g.input(recorded.clone());
            let sq = g.squared_l2_half(code, rec_node)?;
            let weighted = g.scale(sq, p.alpha);
            stats.code += g.value(weighted).item();
            terms.push(weighted);
        }
    }
    let total = g.sum_scalars(terms)?;
    stats.total = g.value(total).item();
    Ok((total, stats))
}

/// Batch-mean training objective with distillation and code terms for every
/// past task in memory. Exposed for direct inspection; the training loop
/// computes the same quantity chunk-wise.
pub fn ebll_batch_loss(
    g: &mut Graph,
    model: &TaskModel,
    memory: &TaskMemory,
    batch: &[&Sample],
    task: TaskId,
    theta: f64,
) -> Result<NodeId> {
    if batch.is_empty() {
        return Err(Error::EmptyDataset("loss batch".into()));
    }
    let class_count = model.class_count(task)?;
    let past = prepare_past_terms(memory, true)?;
    let mut nodes = Vec::with_capacity(batch.len());
    for s in batch {
        let (node, _) = sample_loss_node(g, model, task, class_count, &past, theta, true, true, s)?;
        nodes.push(node);
    }
    let sum = g.sum_scalars(nodes)?;
    Ok(g.scale(sum, 1.0 / batch.len() as f64))
}

// ---------------------------------------------------------------------------
// Evaluation
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct TaskEval {
    pub task: TaskId,
    pub accuracy: f64,
    pub mean_loss: f64,
    /// Accuracy drop relative to the reference measured right after this
    /// task was trained (positive = forgot). `None` if no reference exists.
    pub forgetting: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct EvalRecord {
    pub after_task_index: usize,
    pub per_task: Vec<TaskEval>,
    pub avg_accuracy: f64,
}

/// Per-task accuracy and mean unit-temperature loss over the given test
/// sets, with forgetting deltas against reference accuracies.
pub fn evaluate(
    model: &TaskModel,
    test_sets: &[&Dataset],
    reference_acc: &BTreeMap<TaskId, f64>,
) -> Result<EvalRecord> {
    let mut per_task = Vec::with_capacity(test_sets.len());
    for ds in test_sets {
        if !model.has_head(ds.task) {
            return Err(Error::UnknownTask(ds.task));
        }
        let outcomes: Vec<Result<(bool, f64)>> = parallel::map_collect(&ds.samples, |s| {
            let probs = model.task_probs_value(ds.task, &s.x)?;
            let pred = argmax(probs.data());
            let loss = -probs.data()[s.label].max(PROB_FLOOR).ln();
            Ok((pred == s.label, loss))
        });
        let mut correct = 0usize;
        let mut loss_sum = 0.0;
        for o in outcomes {
            let (ok, loss) = o?;
            correct += usize::from(ok);
            loss_sum += loss;
        }
        let accuracy = correct as f64 / ds.len() as f64;
        per_task.push(TaskEval {
            task: ds.task,
            accuracy,
            mean_loss: loss_sum / ds.len() as f64,
            forgetting: reference_acc.get(&ds.task).map(|r| r - accuracy),
        });
    }
    let avg_accuracy = per_task.iter().map(|t| t.accuracy).sum::<f64>() / per_task.len() as f64;
    Ok(EvalRecord {
        after_task_index: 0,
        per_task,
        avg_accuracy,
    })
}

fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

// ---------------------------------------------------------------------------
// Sequence runner
// ---------------------------------------------------------------------------

/// Hyperparameters of one sequence run (assembled from the run config).
#[derive(Debug, Clone)]
pub struct SequenceSettings {
    pub arch: ArchSpec,
    pub sgd: SgdConfig,
    pub epochs_per_task: usize,
    pub batch_size: usize,
    pub lr_drop_epoch: Option<usize>,
    pub lr_drop_factor: f64,
    pub theta: f64,
    /// Preservation strength per past task; the last value broadcasts.
    pub alphas: Vec<f64>,
    pub ae: AeTrainConfig,
    pub augment: AugmentSpec,
    pub drift_reference_size: usize,
    pub seed: u64,
}

impl SequenceSettings {
    pub fn alpha_for(&self, past_index: usize) -> f64 {
        self.alphas
            .get(past_index)
            .or_else(|| self.alphas.last())
            .copied()
            .unwrap_or(0.0)
    }

    pub fn validate(&self) -> Result<()> {
        self.arch.validate()?;
        self.sgd.validate()?;
        self.ae.validate()?;
        if self.epochs_per_task == 0 {
            return Err(Error::InvalidArgument("epochs_per_task must be at least 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidArgument("batch_size must be at least 1".into()));
        }
        if !(self.theta > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "theta must be positive, got {}",
                self.theta
            )));
        }
        if self.alphas.is_empty() {
            return Err(Error::InvalidArgument("alphas must not be empty".into()));
        }
        if self.alphas.iter().any(|a| *a < 0.0) {
            return Err(Error::InvalidArgument("alphas must be non-negative".into()));
        }
        if self.augment.factor == 0 {
            return Err(Error::InvalidArgument("augment factor must be at least 1".into()));
        }
        Ok(())
    }
}

/// Per-epoch training statistics. `task` is `None` during joint training.
#[derive(Debug, Clone)]
pub struct EpochStats {
    pub task: Option<TaskId>,
    pub task_index: usize,
    pub epoch: usize,
    pub lr: f64,
    pub loss_total: f64,
    pub loss_ce: f64,
    pub loss_distill: f64,
    pub loss_code: f64,
}

#[derive(Debug, Clone)]
pub struct FootprintReport {
    pub task: TaskId,
    pub autoencoder_params: usize,
    pub model_params: usize,
}

impl FootprintReport {
    pub fn ratio(&self) -> f64 {
        self.autoencoder_params as f64 / self.model_params as f64
    }
}

#[derive(Debug)]
pub struct RunResult {
    pub strategy: Strategy,
    pub model: TaskModel,
    pub memory: TaskMemory,
    pub epoch_stats: Vec<EpochStats>,
    pub evals: Vec<EvalRecord>,
    pub ae_curves: Vec<(TaskId, Vec<AeEpochRecord>)>,
    pub reference_acc: BTreeMap<TaskId, f64>,
    pub footprints: Vec<FootprintReport>,
    /// Frozen model state after each completed task, in training order.
    pub snapshots: Vec<(TaskId, FrozenSnapshot)>,
    /// Representation drift of the first task's reference set during each
    /// later task's training: entry 0 is measured before any update of that
    /// task, entry e+1 after epoch e.
    pub drift_traces: Vec<(TaskId, Vec<f64>)>,
}

impl RunResult {
    pub fn final_eval(&self) -> &EvalRecord {
        self.evals.last().expect("at least one evaluation")
    }
}

/// Observation hook into a running sequence (used by tests and diagnostics).
pub trait RunObserver {
    fn epoch_end(&mut self, _task_index: usize, _epoch: usize, _model: &TaskModel) {}
}

/// No-op observer.
impl RunObserver for () {}

/// The separate-heads variant empties the shared operator and moves its
/// widths into every task head.
pub fn effective_arch(base: &ArchSpec, strategy: Strategy) -> ArchSpec {
    if strategy == Strategy::EbllSeparateFcs {
        let mut head_hidden = base.shared_widths.clone();
        head_hidden.extend(base.head_hidden.iter().copied());
        ArchSpec {
            input_dim: base.input_dim,
            feature_widths: base.feature_widths.clone(),
            shared_widths: vec![],
            head_hidden,
        }
    } else {
        base.clone()
    }
}

/// Trains the tasks in order under the given strategy, evaluating on all
/// tasks seen so far after each one. See [`train_task`] for the per-task
/// contract; joint training runs its own interleaved loop.
pub fn run_sequence(
    tasks: &[TaskData],
    strategy: Strategy,
    settings: &SequenceSettings,
    observer: &mut dyn RunObserver,
) -> Result<RunResult> {
    settings.validate()?;
    if tasks.is_empty() {
        return Err(Error::EmptyDataset("task sequence".into()));
    }
    let arch = effective_arch(&settings.arch, strategy);
    let mut model = TaskModel::new(&arch, settings.seed)?;

    if strategy == Strategy::Joint {
        return run_joint(tasks, model, settings, observer);
    }

    let mut memory = TaskMemory::new();
    let mut result = RunResult {
        strategy,
        model: TaskModel::new(&arch, settings.seed)?, // replaced at the end
        memory: TaskMemory::new(),
        epoch_stats: Vec::new(),
        evals: Vec::new(),
        ae_curves: Vec::new(),
        reference_acc: BTreeMap::new(),
        footprints: Vec::new(),
        snapshots: Vec::new(),
        drift_traces: Vec::new(),
    };
    let mut drift_probe: Option<DriftProbe> = None;

    for (index, task_data) in tasks.iter().enumerate() {
        train_task(
            strategy,
            &mut model,
            &mut memory,
            task_data,
            index,
            settings,
            drift_probe.as_ref(),
            &mut result,
            observer,
        )?;

        // evaluate on all tasks seen so far
        let test_sets: Vec<&Dataset> = tasks[..=index].iter().map(|t| &t.test).collect();
        let mut eval = evaluate(&model, &test_sets, &result.reference_acc)?;
        eval.after_task_index = index;
        let current_acc = eval
            .per_task
            .iter_mut()
            .find(|t| t.task == task_data.task)
            .expect("current task evaluated");
        result.reference_acc.insert(task_data.task, current_acc.accuracy);
        current_acc.forgetting = Some(0.0);
        result.evals.push(eval);

        // memory bookkeeping after the task completes
        if strategy.uses_distillation() {
            let snap = model.snapshot();
            let encoder = if strategy.trains_autoencoder() {
                let augmented = augment(&task_data.train, &settings.augment);
                let feats: Vec<Result<(Tensor, usize)>> =
                    parallel::map_collect(&augmented.samples, |s| {
                        Ok((snap.features_value(&s.x)?, s.label))
                    });
                let mut features = Vec::with_capacity(feats.len());
                for f in feats {
                    features.push(f?);
                }
                let frozen_head = snap.frozen_head(task_data.task)?;
                let ae_seed = seeds::derive(settings.seed, &[tag::AE_INIT, index as u64]);
                let (ae, curve) = train_autoencoder(
                    &features,
                    &frozen_head,
                    task_data.class_count,
                    &settings.ae,
                    ae_seed,
                )?;
                result.footprints.push(FootprintReport {
                    task: task_data.task,
                    autoencoder_params: ae.param_count(),
                    model_params: model.param_count(),
                });
                result.ae_curves.push((task_data.task, curve));
                Some(ae)
            } else {
                None
            };
            memory.push_entry(TaskMemoryEntry {
                task: task_data.task,
                class_count: task_data.class_count,
                head_star: snap.heads[&task_data.task].clone(),
                encoder,
                alpha: settings.alpha_for(index),
                recorded_targets: BTreeMap::new(),
                recorded_codes: BTreeMap::new(),
            });
        }

        result.snapshots.push((task_data.task, model.snapshot()));
        if index == 0 {
            drift_probe = Some(DriftProbe::new(&model, &tasks[0], settings.drift_reference_size));
        }
    }

    result.model = model;
    result.memory = memory;
    Ok(result)
}

/// Reference set and frozen extractor for representation-drift tracking:
/// mean squared distance between current and snapshot features of task 1.
struct DriftProbe {
    snapshot: FrozenSnapshot,
    reference: Vec<Tensor>,
}

impl DriftProbe {
    fn new(model: &TaskModel, first_task: &TaskData, size: usize) -> Self {
        let reference = first_task
            .test
            .samples
            .iter()
            .take(size.max(1))
            .map(|s| s.x.clone())
            .collect();
        Self {
            snapshot: model.snapshot(),
            reference,
        }
    }

    fn measure(&self, model: &TaskModel) -> Result<f64> {
        let dists: Vec<Result<f64>> = parallel::map_collect(&self.reference, |x| {
            let now = model.features_value(x)?;
            let then = self.snapshot.features_value(x)?;
            if now.shape() != then.shape() {
                return Err(Error::ShapeMismatch {
                    context: "drift probe feature dimensions".into(),
                    expected: then.shape().to_vec(),
                    got: now.shape().to_vec(),
                });
            }
            Ok(now.squared_distance(&then))
        });
        let mut sum = 0.0;
        for d in dists {
            sum += d?;
        }
        Ok(sum / self.reference.len() as f64)
    }
}

/// Trains one task under the strategy's rules: target/code recording against
/// the pre-training snapshot, trunk freezing for feature extraction, and the
/// per-strategy loss terms. Joint training is rejected here (it needs all
/// datasets at once).
#[allow(clippy::too_many_arguments)]
fn train_task(
    strategy: Strategy,
    model: &mut TaskModel,
    memory: &mut TaskMemory,
    task_data: &TaskData,
    index: usize,
    settings: &SequenceSettings,
    drift_probe: Option<&DriftProbe>,
    result: &mut RunResult,
    observer: &mut dyn RunObserver,
) -> Result<()> {
    if strategy == Strategy::Joint {
        return Err(Error::Contract(
            "joint training requires all task datasets at once".into(),
        ));
    }
    let augmented = augment(&task_data.train, &settings.augment);
    if augmented.is_empty() {
        return Err(Error::EmptyDataset(format!("{} train split", task_data.task)));
    }

    if index > 0 && strategy.uses_distillation() {
        let snap = model.snapshot();
        record_memory(&snap, memory, &task_data.train, &settings.augment)?;
    }

    model.add_head(task_data.task, task_data.class_count, settings.seed)?;
    if strategy.freezes_trunk() && index > 0 {
        model.set_trunk_frozen(true);
    }

    let use_distillation = strategy.uses_distillation() && index > 0;
    let use_code = strategy.uses_code_loss() && index > 0;
    let past = prepare_past_terms(memory, use_code)?;
    let class_count = task_data.class_count;
    let mut sgd = Sgd::new(settings.sgd);
    let mut drift_trace: Vec<f64> = Vec::new();
    if let Some(probe) = drift_probe {
        drift_trace.push(probe.measure(model)?);
    }

    for epoch in 0..settings.epochs_per_task {
        let lr = match settings.lr_drop_epoch {
            Some(drop) if epoch >= drop => settings.sgd.learning_rate * settings.lr_drop_factor,
            _ => settings.sgd.learning_rate,
        };
        sgd.set_learning_rate(lr);

        let mut sums = SampleLossTerms::default();
        let epoch_seed = seeds::derive(settings.seed, &[tag::SHUFFLE, index as u64, epoch as u64]);
        for batch in batches(augmented.len(), settings.batch_size, epoch_seed) {
            model.store_mut().zero_grads();
            let (grads, terms) = {
                let m: &TaskModel = model;
                batch_grads(m.store(), &batch, batch.len(), |g, i| {
                    sample_loss_node(
                        g,
                        m,
                        task_data.task,
                        class_count,
                        &past,
                        settings.theta,
                        use_distillation,
                        use_code,
                        &augmented.samples[i],
                    )
                })?
            };
            grads.apply_to(model.store_mut());
            sgd.step(model.store_mut())?;
            for t in &terms {
                sums.total += t.total;
                sums.ce += t.ce;
                sums.distill += t.distill;
                sums.code += t.code;
            }
        }
        let n = augmented.len() as f64;
        if let Some(probe) = drift_probe {
            drift_trace.push(probe.measure(model)?);
        }
        let stats = EpochStats {
            task: Some(task_data.task),
            task_index: index,
            epoch,
            lr,
            loss_total: sums.total / n,
            loss_ce: sums.ce / n,
            loss_distill: sums.distill / n,
            loss_code: sums.code / n,
        };
        if !stats.loss_total.is_finite() {
            return Err(Error::NonFinite {
                what: "loss",
                name: format!("training of {}", task_data.task),
            });
        }
        result.epoch_stats.push(stats);
        observer.epoch_end(index, epoch, model);
    }
    if !drift_trace.is_empty() {
        result.drift_traces.push((task_data.task, drift_trace));
    }
    Ok(())
}

/// Joint training over all tasks: every epoch interleaves the batches of all
/// tasks in a seeded random order; each batch minimizes its own task's
/// plain classification loss.
fn run_joint(
    tasks: &[TaskData],
    mut model: TaskModel,
    settings: &SequenceSettings,
    observer: &mut dyn RunObserver,
) -> Result<RunResult> {
    let mut result = RunResult {
        strategy: Strategy::Joint,
        model: TaskModel::new(model.arch(), settings.seed)?, // replaced below
        memory: TaskMemory::new(),
        epoch_stats: Vec::new(),
        evals: Vec::new(),
        ae_curves: Vec::new(),
        reference_acc: BTreeMap::new(),
        footprints: Vec::new(),
        snapshots: Vec::new(),
        drift_traces: Vec::new(),
    };
    let augmented: Vec<Dataset> = tasks
        .iter()
        .map(|t| augment(&t.train, &settings.augment))
        .collect();
    for t in tasks {
        model.add_head(t.task, t.class_count, settings.seed)?;
    }

    let mut sgd = Sgd::new(settings.sgd);
    for epoch in 0..settings.epochs_per_task {
        let lr = match settings.lr_drop_epoch {
            Some(drop) if epoch >= drop => settings.sgd.learning_rate * settings.lr_drop_factor,
            _ => settings.sgd.learning_rate,
        };
        sgd.set_learning_rate(lr);

        // per-task batch lists, interleaved in seeded order
        let mut queue: Vec<(usize, Vec<usize>)> = Vec::new();
        for (ti, ds) in augmented.iter().enumerate() {
            let seed = seeds::derive(settings.seed, &[tag::SHUFFLE, ti as u64, epoch as u64]);
            for b in batches(ds.len(), settings.batch_size, seed) {
                queue.push((ti, b));
            }
        }
        {
            use rand::seq::SliceRandom;
            let order_seed = seeds::derive(settings.seed, &[tag::JOINT_ORDER, epoch as u64]);
            queue.shuffle(&mut seeds::rng(order_seed));
        }

        let mut sums = SampleLossTerms::default();
        let mut count = 0usize;
        for (ti, batch) in queue {
            let ds = &augmented[ti];
            let task = ds.task;
            let class_count = ds.class_count;
            model.store_mut().zero_grads();
            let (grads, terms) = {
                let m: &TaskModel = &model;
                batch_grads(m.store(), &batch, batch.len(), |g, i| {
                    sample_loss_node(
                        g,
                        m,
                        task,
                        class_count,
                        &[],
                        settings.theta,
                        false,
                        false,
                        &ds.samples[i],
                    )
                })?
            };
            grads.apply_to(model.store_mut());
            sgd.step(model.store_mut())?;
            for t in &terms {
                sums.total += t.total;
                sums.ce += t.ce;
            }
            count += batch.len();
        }
        let stats = EpochStats {
            task: None,
            task_index: 0,
            epoch,
            lr,
            loss_total: sums.total / count as f64,
            loss_ce: sums.ce / count as f64,
            loss_distill: 0.0,
            loss_code: 0.0,
        };
        if !stats.loss_total.is_finite() {
            return Err(Error::NonFinite {
                what: "loss",
                name: "joint training".into(),
            });
        }
        result.epoch_stats.push(stats);
        observer.epoch_end(0, epoch, &model);
    }

    let test_sets: Vec<&Dataset> = tasks.iter().map(|t| &t.test).collect();
    let mut eval = evaluate(&model, &test_sets, &BTreeMap::new())?;
    eval.after_task_index = tasks.len() - 1;
    for te in &mut eval.per_task {
        result.reference_acc.insert(te.task, te.accuracy);
        te.forgetting = Some(0.0);
    }
    result.evals.push(eval);
    result.snapshots.push((tasks[tasks.len() - 1].task, model.snapshot()));
    result.model = model;
    Ok(result)
}
