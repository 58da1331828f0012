//! Task-model decomposition: a shared feature extractor, an optional shared
//! task operator, and per-task heads, with deep-frozen snapshot support.

use std::collections::BTreeMap;
use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::TaskId;
use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId, ParamId, ParamStore};
use crate::seeds;
use crate::tensor::{affine_forward, relu_forward, softmax_logits_forward, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Identity,
}

/// Layer widths of the model. `feature_widths` form the feature extractor,
/// `shared_widths` the shared task operator (may be empty), and `head_hidden`
/// the per-task hidden widths in front of each head's classification layer.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct ArchSpec {
    pub input_dim: usize,
    pub feature_widths: Vec<usize>,
    #[serde(default)]
    pub shared_widths: Vec<usize>,
    #[serde(default)]
    pub head_hidden: Vec<usize>,
}

impl ArchSpec {
    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 {
            return Err(Error::InvalidArgument("input_dim must be positive".into()));
        }
        if self.feature_widths.is_empty() {
            return Err(Error::InvalidArgument(
                "feature_widths must contain at least one layer".into(),
            ));
        }
        if self.feature_widths.iter().chain(&self.shared_widths).chain(&self.head_hidden).any(|&w| w == 0) {
            return Err(Error::InvalidArgument("layer widths must be positive".into()));
        }
        Ok(())
    }

    pub fn feature_dim(&self) -> usize {
        *self.feature_widths.last().unwrap()
    }

    /// Dimension entering each head.
    pub fn head_input_dim(&self) -> usize {
        *self.shared_widths.last().unwrap_or(&self.feature_dim())
    }
}

#[derive(Debug, Clone)]
struct DenseLayer {
    w: ParamId,
    b: ParamId,
    activation: Activation,
    in_dim: usize,
    out_dim: usize,
}

#[derive(Debug, Clone, Default)]
pub struct LayerStack {
    layers: Vec<DenseLayer>,
}

impl LayerStack {
    fn forward_node(&self, g: &mut Graph, store: &ParamStore, x: NodeId) -> Result<NodeId> {
        let mut h = x;
        for layer in &self.layers {
            h = g.affine(store, h, layer.w, layer.b)?;
            if layer.activation == Activation::Relu {
                h = g.relu(h);
            }
        }
        Ok(h)
    }

    fn forward_value(&self, store: &ParamStore, x: &Tensor) -> Tensor {
        let mut h = x.data().to_vec();
        let mut buf = Vec::new();
        for layer in &self.layers {
            affine_forward(&store.get(layer.w).value, &h, store.get(layer.b).value.data(), &mut buf);
            if layer.activation == Activation::Relu {
                relu_forward(&buf, &mut h);
            } else {
                std::mem::swap(&mut h, &mut buf);
            }
        }
        Tensor::vector(h)
    }

    fn param_ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        self.layers.iter().flat_map(|l| [l.w, l.b])
    }

    fn out_dim(&self, input: usize) -> usize {
        self.layers.last().map(|l| l.out_dim).unwrap_or(input)
    }
}

/// Glorot-uniform initialized dense layer.
fn init_layer(
    store: &mut ParamStore,
    prefix: &str,
    index: usize,
    in_dim: usize,
    out_dim: usize,
    activation: Activation,
    rng: &mut impl Rng,
) -> DenseLayer {
    let limit = (6.0 / (in_dim + out_dim) as f64).sqrt();
    let data: Vec<f64> = (0..in_dim * out_dim)
        .map(|_| rng.gen_range(-limit..=limit))
        .collect();
    let w = store.add(
        format!("{prefix}.{index}.w"),
        Tensor::matrix(out_dim, in_dim, data).unwrap(),
    );
    let b = store.add(format!("{prefix}.{index}.b"), Tensor::zeros(&[out_dim]));
    DenseLayer {
        w,
        b,
        activation,
        in_dim,
        out_dim,
    }
}

fn build_stack(
    store: &mut ParamStore,
    prefix: &str,
    in_dim: usize,
    widths: &[usize],
    last_activation: Activation,
    rng: &mut impl Rng,
) -> LayerStack {
    let mut layers = Vec::with_capacity(widths.len());
    let mut d = in_dim;
    for (i, &w) in widths.iter().enumerate() {
        let act = if i + 1 == widths.len() {
            last_activation
        } else {
            Activation::Relu
        };
        layers.push(init_layer(store, prefix, i, d, w, act, rng));
        d = w;
    }
    LayerStack { layers }
}

/// The shared model: feature extractor, shared task operator (possibly
/// empty), and per-task heads. Heads output logits; task forward applies the
/// unit-temperature softmax.
#[derive(Debug, Clone)]
pub struct TaskModel {
    store: ParamStore,
    feature: LayerStack,
    shared: LayerStack,
    heads: BTreeMap<TaskId, LayerStack>,
    head_class_count: BTreeMap<TaskId, usize>,
    arch: ArchSpec,
}

impl TaskModel {
    pub fn new(arch: &ArchSpec, seed: u64) -> Result<Self> {
        arch.validate()?;
        let mut store = ParamStore::new();
        let mut rng = seeds::rng(seeds::derive(seed, &[seeds::tag::MODEL_INIT]));
        let feature = build_stack(
            &mut store,
            "feature",
            arch.input_dim,
            &arch.feature_widths,
            Activation::Relu,
            &mut rng,
        );
        let shared = build_stack(
            &mut store,
            "shared",
            arch.feature_dim(),
            &arch.shared_widths,
            Activation::Relu,
            &mut rng,
        );
        Ok(Self {
            store,
            feature,
            shared,
            heads: BTreeMap::new(),
            head_class_count: BTreeMap::new(),
            arch: arch.clone(),
        })
    }

    pub fn arch(&self) -> &ArchSpec {
        &self.arch
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    pub fn input_dim(&self) -> usize {
        self.arch.input_dim
    }

    pub fn feature_dim(&self) -> usize {
        self.feature.out_dim(self.arch.input_dim)
    }

    pub fn head_tasks(&self) -> impl Iterator<Item = TaskId> + '_ {
        self.heads.keys().copied()
    }

    pub fn has_head(&self, task: TaskId) -> bool {
        self.heads.contains_key(&task)
    }

    pub fn class_count(&self, task: TaskId) -> Result<usize> {
        self.head_class_count
            .get(&task)
            .copied()
            .ok_or(Error::UnknownTask(task))
    }

    /// Adds a new head for `task`, hidden widths per the architecture spec,
    /// final affine layer sized to `class_count`. Registered trainable.
    pub fn add_head(&mut self, task: TaskId, class_count: usize, rng_seed: u64) -> Result<()> {
        if self.heads.contains_key(&task) {
            return Err(Error::DuplicateTask(task));
        }
        if class_count < 2 {
            return Err(Error::InvalidArgument(format!(
                "head for {task} needs at least 2 classes, got {class_count}"
            )));
        }
        let mut rng = seeds::rng(seeds::derive(rng_seed, &[seeds::tag::HEAD_INIT, task.0 as u64]));
        let mut widths = self.arch.head_hidden.clone();
        widths.push(class_count);
        let in_dim = self.arch.head_input_dim();
        let stack = build_stack(
            &mut self.store,
            &format!("head{}", task.0),
            in_dim,
            &widths,
            Activation::Identity,
            &mut rng,
        );
        self.heads.insert(task, stack);
        self.head_class_count.insert(task, class_count);
        Ok(())
    }

    fn check_input(&self, x: &Tensor) -> Result<()> {
        if x.rank() != 1 || x.len() != self.arch.input_dim {
            return Err(Error::ShapeMismatch {
                context: "model input".into(),
                expected: vec![self.arch.input_dim],
                got: x.shape().to_vec(),
            });
        }
        Ok(())
    }

    /// Recorded forward through the feature extractor.
    pub fn forward_features(&self, g: &mut Graph, x: NodeId) -> Result<NodeId> {
        self.check_input(g.value(x))?;
        self.feature.forward_node(g, &self.store, x)
    }

    /// Recorded forward from features through the shared operator and the
    /// head of `task`, ending in unit-temperature softmax probabilities.
    pub fn forward_task_from_features(
        &self,
        g: &mut Graph,
        task: TaskId,
        features: NodeId,
    ) -> Result<NodeId> {
        let head = self.heads.get(&task).ok_or(Error::UnknownTask(task))?;
        let h = self.shared.forward_node(g, &self.store, features)?;
        let logits = head.forward_node(g, &self.store, h)?;
        g.softmax_temp_logits(logits, 1.0)
    }

    /// Recorded full forward for one task.
    pub fn forward_task(&self, g: &mut Graph, task: TaskId, x: NodeId) -> Result<NodeId> {
        let f = self.forward_features(g, x)?;
        self.forward_task_from_features(g, task, f)
    }

    /// Plain (non-recorded) feature evaluation; bit-identical to the recorded
    /// path since both share the same kernels.
    pub fn features_value(&self, x: &Tensor) -> Result<Tensor> {
        self.check_input(x)?;
        Ok(self.feature.forward_value(&self.store, x))
    }

    pub fn task_probs_value(&self, task: TaskId, x: &Tensor) -> Result<Tensor> {
        let f = self.features_value(x)?;
        self.task_probs_from_features_value(task, &f)
    }

    pub fn task_probs_from_features_value(&self, task: TaskId, features: &Tensor) -> Result<Tensor> {
        let head = self.heads.get(&task).ok_or(Error::UnknownTask(task))?;
        let h = self.shared.forward_value(&self.store, features);
        let logits = head.forward_value(&self.store, &h);
        let mut probs = Vec::new();
        softmax_logits_forward(logits.data(), 1.0, &mut probs);
        Ok(Tensor::vector(probs))
    }

    /// Freeze (or unfreeze) the feature extractor and the shared operator;
    /// heads stay trainable.
    pub fn set_trunk_frozen(&mut self, frozen: bool) {
        let ids: Vec<ParamId> = self
            .feature
            .param_ids()
            .chain(self.shared.param_ids())
            .collect();
        for id in ids {
            self.store.set_frozen(id, frozen);
        }
    }

    pub fn trunk_checksum(&self) -> u64 {
        let mut h: u64 = 0x243f6a8885a308d3;
        for id in self.feature.param_ids().chain(self.shared.param_ids()) {
            h = h
                .rotate_left(13)
                .wrapping_mul(0x100000001b3)
                .wrapping_add(self.store.get(id).value.bits_checksum());
        }
        h
    }

    pub fn param_count(&self) -> usize {
        self.store.scalar_count()
    }

    /// Deep copy with gradients disabled; subsequent training of the model
    /// leaves the snapshot bit-identical.
    pub fn snapshot(&self) -> FrozenSnapshot {
        let freeze_stack = |stack: &LayerStack| FrozenStack {
            layers: stack
                .layers
                .iter()
                .map(|l| FrozenDense {
                    w: Arc::new(self.store.get(l.w).value.clone()),
                    b: Arc::new(self.store.get(l.b).value.clone()),
                    activation: l.activation,
                    in_dim: l.in_dim,
                    out_dim: l.out_dim,
                })
                .collect(),
        };
        FrozenSnapshot {
            input_dim: self.arch.input_dim,
            feature: freeze_stack(&self.feature),
            shared: freeze_stack(&self.shared),
            heads: self
                .heads
                .iter()
                .map(|(t, s)| (*t, freeze_stack(s)))
                .collect(),
        }
    }

    /// Internal: layer shapes and values for checkpointing.
    pub(crate) fn export_arrays(&self) -> Vec<(String, Tensor)> {
        let mut out = Vec::new();
        let mut dump = |prefix: String, stack: &LayerStack| {
            for (i, l) in stack.layers.iter().enumerate() {
                out.push((format!("{prefix}.{i}.w"), self.store.get(l.w).value.clone()));
                out.push((format!("{prefix}.{i}.b"), self.store.get(l.b).value.clone()));
            }
        };
        dump("feature".into(), &self.feature);
        dump("shared".into(), &self.shared);
        for (t, s) in &self.heads {
            dump(format!("head{}", t.0), s);
        }
        out
    }

    /// Internal: overwrite parameter values from checkpoint arrays.
    pub(crate) fn import_arrays(&mut self, arrays: &BTreeMap<String, Tensor>) -> Result<()> {
        let load = |store: &mut ParamStore, prefix: String, stack: &LayerStack| -> Result<()> {
            for (i, l) in stack.layers.iter().enumerate() {
                for (suffix, id) in [("w", l.w), ("b", l.b)] {
                    let name = format!("{prefix}.{i}.{suffix}");
                    let t = arrays.get(&name).ok_or_else(|| {
                        Error::CheckpointTruncated {
                            context: format!("missing array {name}"),
                        }
                    })?;
                    if t.shape() != store.get(id).value.shape() {
                        return Err(Error::ShapeMismatch {
                            context: format!("checkpoint array {name}"),
                            expected: store.get(id).value.shape().to_vec(),
                            got: t.shape().to_vec(),
                        });
                    }
                    store.get_mut(id).value = t.clone();
                }
            }
            Ok(())
        };
        let feature = self.feature.clone();
        let shared = self.shared.clone();
        let heads = self.heads.clone();
        load(&mut self.store, "feature".into(), &feature)?;
        load(&mut self.store, "shared".into(), &shared)?;
        for (t, s) in &heads {
            load(&mut self.store, format!("head{}", t.0), s)?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct FrozenDense {
    w: Arc<Tensor>,
    b: Arc<Tensor>,
    activation: Activation,
    in_dim: usize,
    out_dim: usize,
}

#[derive(Debug, Clone, Default)]
pub struct FrozenStack {
    layers: Vec<FrozenDense>,
}

impl FrozenStack {
    pub fn forward_node(&self, g: &mut Graph, x: NodeId) -> Result<NodeId> {
        let mut h = x;
        for layer in &self.layers {
            h = g.affine_const(h, &layer.w, &layer.b)?;
            if layer.activation == Activation::Relu {
                h = g.relu(h);
            }
        }
        Ok(h)
    }

    pub fn forward_value(&self, x: &Tensor) -> Tensor {
        let mut h = x.data().to_vec();
        let mut buf = Vec::new();
        for layer in &self.layers {
            affine_forward(&layer.w, &h, layer.b.data(), &mut buf);
            if layer.activation == Activation::Relu {
                relu_forward(&buf, &mut h);
            } else {
                std::mem::swap(&mut h, &mut buf);
            }
        }
        Tensor::vector(h)
    }

    pub fn checksum(&self) -> u64 {
        let mut h: u64 = 0x452821e638d01377;
        for l in &self.layers {
            h = h
                .rotate_left(11)
                .wrapping_mul(0x100000001b3)
                .wrapping_add(l.w.bits_checksum())
                .rotate_left(7)
                .wrapping_add(l.b.bits_checksum());
        }
        h
    }

    pub fn in_dim(&self) -> Option<usize> {
        self.layers.first().map(|l| l.in_dim)
    }

    pub fn out_dim(&self) -> Option<usize> {
        self.layers.last().map(|l| l.out_dim)
    }

    pub(crate) fn export_arrays(&self, prefix: &str) -> Vec<(String, Tensor)> {
        let mut out = Vec::new();
        for (i, l) in self.layers.iter().enumerate() {
            out.push((format!("{prefix}.{i}.w"), (*l.w).clone()));
            out.push((format!("{prefix}.{i}.b"), (*l.b).clone()));
        }
        out
    }

    pub(crate) fn from_arrays(
        prefix: &str,
        arrays: &BTreeMap<String, Tensor>,
        last_activation: Activation,
    ) -> Result<Self> {
        let mut layers = Vec::new();
        let mut i = 0;
        loop {
            let wname = format!("{prefix}.{i}.w");
            let bname = format!("{prefix}.{i}.b");
            let (Some(w), Some(b)) = (arrays.get(&wname), arrays.get(&bname)) else {
                break;
            };
            layers.push(FrozenDense {
                w: Arc::new(w.clone()),
                b: Arc::new(b.clone()),
                activation: Activation::Relu,
                in_dim: w.cols(),
                out_dim: w.rows(),
            });
            i += 1;
        }
        if let Some(last) = layers.last_mut() {
            last.activation = last_activation;
        }
        Ok(Self { layers })
    }
}

/// Deep copies of the model components at one instant, with gradients
/// disabled. Immutable and shareable across threads.
#[derive(Debug, Clone)]
pub struct FrozenSnapshot {
    input_dim: usize,
    pub feature: FrozenStack,
    pub shared: FrozenStack,
    pub heads: BTreeMap<TaskId, FrozenStack>,
}

impl FrozenSnapshot {
    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn head_tasks(&self) -> impl Iterator<Item = TaskId> + '_ {
        self.heads.keys().copied()
    }

    pub fn features_node(&self, g: &mut Graph, x: NodeId) -> Result<NodeId> {
        self.feature.forward_node(g, x)
    }

    pub fn features_value(&self, x: &Tensor) -> Result<Tensor> {
        if x.len() != self.input_dim {
            return Err(Error::ShapeMismatch {
                context: "snapshot input".into(),
                expected: vec![self.input_dim],
                got: x.shape().to_vec(),
            });
        }
        Ok(self.feature.forward_value(x))
    }

    pub fn task_probs_value(&self, task: TaskId, x: &Tensor) -> Result<Tensor> {
        let f = self.features_value(x)?;
        self.task_probs_from_features_value(task, &f)
    }

    pub fn task_probs_from_features_value(&self, task: TaskId, features: &Tensor) -> Result<Tensor> {
        let head = self.heads.get(&task).ok_or(Error::UnknownTask(task))?;
        let h = self.shared.forward_value(features);
        let logits = head.forward_value(&h);
        let mut probs = Vec::new();
        softmax_logits_forward(logits.data(), 1.0, &mut probs);
        Ok(Tensor::vector(probs))
    }

    /// The frozen composition of the shared operator and one task head,
    /// used as the classification target during autoencoder training.
    pub fn frozen_head(&self, task: TaskId) -> Result<FrozenHead> {
        let head = self.heads.get(&task).ok_or(Error::UnknownTask(task))?;
        let mut layers = self.shared.layers.clone();
        layers.extend(head.layers.iter().cloned());
        Ok(FrozenHead {
            stack: FrozenStack { layers },
        })
    }

    /// Snapshot of a snapshot: the identical frozen state.
    pub fn snapshot(&self) -> FrozenSnapshot {
        self.clone()
    }

    pub(crate) fn export_arrays(&self) -> Vec<(String, Tensor)> {
        let mut out = self.feature.export_arrays("feature");
        out.extend(self.shared.export_arrays("shared"));
        for (t, s) in &self.heads {
            out.extend(s.export_arrays(&format!("head{}", t.0)));
        }
        out
    }

    pub fn checksum(&self) -> u64 {
        let mut h = self.feature.checksum();
        h = h.rotate_left(19).wrapping_add(self.shared.checksum());
        for (t, s) in &self.heads {
            h = h
                .rotate_left(23)
                .wrapping_add(t.0 as u64)
                .wrapping_mul(0x100000001b3)
                .wrapping_add(s.checksum());
        }
        h
    }
}

/// Frozen `shared ∘ head` operator applied to feature-space vectors, ending
/// in unit-temperature softmax.
#[derive(Debug, Clone)]
pub struct FrozenHead {
    stack: FrozenStack,
}

impl FrozenHead {
    pub fn probs_node(&self, g: &mut Graph, features: NodeId) -> Result<NodeId> {
        let logits = self.stack.forward_node(g, features)?;
        g.softmax_temp_logits(logits, 1.0)
    }

    pub fn probs_value(&self, features: &Tensor) -> Tensor {
        let logits = self.stack.forward_value(features);
        let mut probs = Vec::new();
        softmax_logits_forward(logits.data(), 1.0, &mut probs);
        Tensor::vector(probs)
    }

    pub fn checksum(&self) -> u64 {
        self.stack.checksum()
    }
}

pub fn one_hot(class: usize, class_count: usize) -> Tensor {
    let mut v = vec![0.0; class_count];
    v[class] = 1.0;
    Tensor::vector(v)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_arch() -> ArchSpec {
        ArchSpec {
            input_dim: 4,
            feature_widths: vec![6, 5],
            shared_widths: vec![3],
            head_hidden: vec![],
        }
    }

    #[test]
    fn add_head_output_length_and_determinism() {
        let mut m = TaskModel::new(&small_arch(), 1).unwrap();
        m.add_head(TaskId(0), 10, 7).unwrap();
        let x = Tensor::vector(vec![0.1, -0.2, 0.3, 0.4]);
        let p = m.task_probs_value(TaskId(0), &x).unwrap();
        assert_eq!(p.len(), 10);

        let mut m2 = TaskModel::new(&small_arch(), 1).unwrap();
        m2.add_head(TaskId(0), 10, 7).unwrap();
        assert_eq!(m.store().values_checksum(), m2.store().values_checksum());

        assert!(matches!(
            m.add_head(TaskId(0), 4, 9),
            Err(Error::DuplicateTask(_))
        ));
    }

    #[test]
    fn zero_weight_head_gives_uniform_probabilities() {
        let mut m = TaskModel::new(&small_arch(), 3).unwrap();
        m.add_head(TaskId(0), 5, 3).unwrap();
        // zero out the head weights
        let ids: Vec<ParamId> = m.heads[&TaskId(0)].param_ids().collect();
        for id in ids {
            m.store.get_mut(id).value.fill(0.0);
        }
        let x = Tensor::vector(vec![1.0, 2.0, -0.5, 0.0]);
        let p = m.task_probs_value(TaskId(0), &x).unwrap();
        for v in p.data() {
            assert!((v - 0.2).abs() < 1e-15);
        }
    }

    #[test]
    fn forward_task_is_valid_probability_vector() {
        let mut m = TaskModel::new(&small_arch(), 5).unwrap();
        m.add_head(TaskId(0), 7, 5).unwrap();
        let x = Tensor::vector(vec![0.5, -1.5, 2.0, 0.25]);
        let p = m.task_probs_value(TaskId(0), &x).unwrap();
        let sum: f64 = p.data().iter().sum();
        assert!((sum - 1.0).abs() < 1e-12);
        assert!(p.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
    }

    #[test]
    fn composition_matches_monolithic_forward_bitwise() {
        let mut m = TaskModel::new(&small_arch(), 8).unwrap();
        m.add_head(TaskId(2), 4, 8).unwrap();
        let x = Tensor::vector(vec![0.3, 0.6, -0.9, 1.2]);
        let monolithic = m.task_probs_value(TaskId(2), &x).unwrap();

        // reassemble: features, then shared+head via the graph path
        let mut g = Graph::new();
        let xin = g.input(x.clone());
        let p = m.forward_task(&mut g, TaskId(2), xin).unwrap();
        assert_eq!(g.value(p).bits_checksum(), monolithic.bits_checksum());

        // and via explicit two-stage composition
        let f = m.features_value(&x).unwrap();
        let staged = m.task_probs_from_features_value(TaskId(2), &f).unwrap();
        assert_eq!(staged.bits_checksum(), monolithic.bits_checksum());
    }

    #[test]
    fn unknown_task_is_lookup_error() {
        let m = TaskModel::new(&small_arch(), 1).unwrap();
        let x = Tensor::vector(vec![0.0; 4]);
        assert!(matches!(
            m.task_probs_value(TaskId(9), &x),
            Err(Error::UnknownTask(TaskId(9)))
        ));
    }

    #[test]
    fn snapshot_is_isolated_from_later_training() {
        let mut m = TaskModel::new(&small_arch(), 4).unwrap();
        m.add_head(TaskId(0), 3, 4).unwrap();
        let x = Tensor::vector(vec![0.2, 0.4, 0.6, 0.8]);
        let snap = m.snapshot();
        let before = snap.task_probs_value(TaskId(0), &x).unwrap();
        let model_before = m.task_probs_value(TaskId(0), &x).unwrap();
        // snapshot forward equals the original forward at creation time, 0 ulp
        assert_eq!(before.bits_checksum(), model_before.bits_checksum());

        // perturb the live model
        for (_, p) in m.store.iter_mut() {
            for v in p.value.data_mut() {
                *v += 0.123;
            }
        }
        let after = snap.task_probs_value(TaskId(0), &x).unwrap();
        assert_eq!(before.bits_checksum(), after.bits_checksum());

        // snapshot of snapshot: identical outputs
        let snap2 = snap.snapshot();
        assert_eq!(snap2.checksum(), snap.checksum());
    }

    #[test]
    fn head_init_variance_matches_glorot_over_seeds() {
        // pooled over 10 seeds, the sample variance of head weights should be
        // within 20% of 2 / (fan_in + fan_out)
        let arch = small_arch();
        let fan_in = arch.head_input_dim();
        let fan_out = 6;
        let mut values = Vec::new();
        for seed in 0..10u64 {
            let mut m = TaskModel::new(&arch, 100).unwrap();
            m.add_head(TaskId(0), fan_out, seed).unwrap();
            let head = &m.heads[&TaskId(0)];
            let w = head.layers.last().unwrap().w;
            values.extend_from_slice(m.store.get(w).value.data());
        }
        let n = values.len() as f64;
        let mean: f64 = values.iter().sum::<f64>() / n;
        let var: f64 = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
        let expect = 2.0 / (fan_in + fan_out) as f64;
        assert!(
            (var - expect).abs() <= 0.2 * expect,
            "variance {var} vs expected {expect}"
        );
    }

    #[test]
    fn identity_like_feature_layer_passes_input_through() {
        // zero-weight feature stack with zero bias maps everything to zero
        let mut m = TaskModel::new(&small_arch(), 2).unwrap();
        let ids: Vec<ParamId> = m.feature.param_ids().collect();
        for id in ids {
            m.store.get_mut(id).value.fill(0.0);
        }
        let f = m
            .features_value(&Tensor::vector(vec![1.0, -2.0, 3.0, -4.0]))
            .unwrap();
        assert!(f.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn frozen_trunk_stays_bit_identical_under_steps() {
        use crate::optim::{Sgd, SgdConfig};
        let mut m = TaskModel::new(&small_arch(), 6).unwrap();
        m.add_head(TaskId(0), 3, 6).unwrap();
        m.set_trunk_frozen(true);
        let trunk_before = m.trunk_checksum();

        let mut sgd = Sgd::new(SgdConfig {
            learning_rate: 0.1,
            weight_decay: 0.01,
            momentum: 0.9,
        });
        let x = Tensor::vector(vec![0.9, -0.1, 0.2, 0.5]);
        for _ in 0..3 {
            m.store_mut().zero_grads();
            let mut g = Graph::new();
            let xin = g.input(x.clone());
            let p = m.forward_task(&mut g, TaskId(0), xin).unwrap();
            let t = one_hot(1, 3);
            let loss = g.cross_entropy(p, &t).unwrap();
            g.backward(loss, m.store_mut()).unwrap();
            sgd.step(m.store_mut()).unwrap();
        }
        assert_eq!(m.trunk_checksum(), trunk_before);
    }
}
