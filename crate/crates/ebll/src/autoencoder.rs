//! Per-task undercomplete autoencoders over feature space: a sigmoid code
//! layer and a linear decode layer, trained against both a reconstruction
//! term and the frozen task head's classification loss.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::batch::batch_grads;
use crate::data::batches;
use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId, ParamId, ParamStore};
use crate::model::{one_hot, FrozenHead};
use crate::optim::{AdaDelta, AdaDeltaConfig};
use crate::seeds::{self, tag};
use crate::tensor::{affine_forward, sigmoid_forward, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReconstructionLoss {
    /// Half squared distance per sample (smooth at zero; the default).
    HalfSquared,
    /// Plain l2 norm per sample.
    L2Norm,
}

#[derive(Debug, Clone)]
pub struct Autoencoder {
    store: ParamStore,
    enc_w: ParamId,
    enc_b: ParamId,
    dec_w: ParamId,
    dec_b: ParamId,
    feature_dim: usize,
    code_dim: usize,
}

impl Autoencoder {
    /// Glorot-initialized autoencoder; rejects `code_dim >= feature_dim`
    /// (undercompleteness is enforced at construction).
    pub fn new(feature_dim: usize, code_dim: usize, seed: u64) -> Result<Self> {
        if code_dim == 0 || code_dim >= feature_dim {
            return Err(Error::InvalidArgument(format!(
                "code dimension {code_dim} must be in [1, {}) for an undercomplete \
                 autoencoder over {feature_dim}-dimensional features",
                feature_dim
            )));
        }
        let mut rng = seeds::rng(seeds::derive(seed, &[tag::AE_INIT]));
        let mut store = ParamStore::new();
        let glorot = |rng: &mut rand_chacha::ChaCha8Rng, rows: usize, cols: usize| {
            use rand::Rng;
            let limit = (6.0 / (rows + cols) as f64).sqrt();
            let data: Vec<f64> = (0..rows * cols).map(|_| rng.gen_range(-limit..=limit)).collect();
            Tensor::matrix(rows, cols, data).unwrap()
        };
        let enc_w = store.add("enc.w", glorot(&mut rng, code_dim, feature_dim));
        let enc_b = store.add("enc.b", Tensor::zeros(&[code_dim]));
        let dec_w = store.add("dec.w", glorot(&mut rng, feature_dim, code_dim));
        let dec_b = store.add("dec.b", Tensor::zeros(&[feature_dim]));
        Ok(Self {
            store,
            enc_w,
            enc_b,
            dec_w,
            dec_b,
            feature_dim,
            code_dim,
        })
    }

    pub fn feature_dim(&self) -> usize {
        self.feature_dim
    }

    pub fn code_dim(&self) -> usize {
        self.code_dim
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    #[cfg(test)]
    pub(crate) fn store_mut_for_tests(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    pub fn param_count(&self) -> usize {
        self.store.scalar_count()
    }

    fn check_dim(&self, x: &Tensor) -> Result<()> {
        if x.rank() != 1 || x.len() != self.feature_dim {
            return Err(Error::ShapeMismatch {
                context: "autoencoder input".into(),
                expected: vec![self.feature_dim],
                got: x.shape().to_vec(),
            });
        }
        Ok(())
    }

    /// Recorded (trainable) code map: sigmoid(enc_w * x + enc_b).
    pub fn encode_node(&self, g: &mut Graph, x: NodeId) -> Result<NodeId> {
        self.check_dim(g.value(x))?;
        let h = g.affine(&self.store, x, self.enc_w, self.enc_b)?;
        Ok(g.sigmoid(h))
    }

    /// Recorded (trainable) reconstruction: dec_w * encode(x) + dec_b.
    pub fn reconstruct_node(&self, g: &mut Graph, x: NodeId) -> Result<NodeId> {
        let c = self.encode_node(g, x)?;
        g.affine(&self.store, c, self.dec_w, self.dec_b)
    }

    pub fn encode_value(&self, x: &Tensor) -> Result<Tensor> {
        self.check_dim(x)?;
        let mut buf = Vec::new();
        affine_forward(
            &self.store.get(self.enc_w).value,
            x.data(),
            self.store.get(self.enc_b).value.data(),
            &mut buf,
        );
        let mut code = Vec::new();
        sigmoid_forward(&buf, &mut code);
        Ok(Tensor::vector(code))
    }

    pub fn reconstruct_value(&self, x: &Tensor) -> Result<Tensor> {
        let code = self.encode_value(x)?;
        let mut out = Vec::new();
        affine_forward(
            &self.store.get(self.dec_w).value,
            code.data(),
            self.store.get(self.dec_b).value.data(),
            &mut out,
        );
        Ok(Tensor::vector(out))
    }

    /// Immutable copy of the encoder half, for recording codes and for the
    /// code-distance term during later task training.
    pub fn frozen_encoder(&self) -> FrozenEncoder {
        FrozenEncoder {
            w: Arc::new(self.store.get(self.enc_w).value.clone()),
            b: Arc::new(self.store.get(self.enc_b).value.clone()),
            feature_dim: self.feature_dim,
            code_dim: self.code_dim,
        }
    }

    pub fn values_checksum(&self) -> u64 {
        self.store.values_checksum()
    }

    pub(crate) fn export_arrays(&self, prefix: &str) -> Vec<(String, Tensor)> {
        vec![
            (format!("{prefix}.enc.w"), self.store.get(self.enc_w).value.clone()),
            (format!("{prefix}.enc.b"), self.store.get(self.enc_b).value.clone()),
            (format!("{prefix}.dec.w"), self.store.get(self.dec_w).value.clone()),
            (format!("{prefix}.dec.b"), self.store.get(self.dec_b).value.clone()),
        ]
    }

    pub(crate) fn from_arrays(
        prefix: &str,
        arrays: &std::collections::BTreeMap<String, Tensor>,
    ) -> Result<Self> {
        let get = |suffix: &str| {
            arrays
                .get(&format!("{prefix}.{suffix}"))
                .cloned()
                .ok_or_else(|| Error::CheckpointTruncated {
                    context: format!("missing array {prefix}.{suffix}"),
                })
        };
        let enc_w_t = get("enc.w")?;
        let (code_dim, feature_dim) = (enc_w_t.rows(), enc_w_t.cols());
        let mut ae = Autoencoder::new(feature_dim, code_dim, 0)?;
        ae.store.get_mut(ae.enc_w).value = enc_w_t;
        ae.store.get_mut(ae.enc_b).value = get("enc.b")?;
        ae.store.get_mut(ae.dec_w).value = get("dec.w")?;
        ae.store.get_mut(ae.dec_b).value = get("dec.b")?;
        Ok(ae)
    }
}

/// Frozen encoder weights; gradient flows through the code into its input
/// but never into the encoder itself.
#[derive(Debug, Clone)]
pub struct FrozenEncoder {
    w: Arc<Tensor>,
    b: Arc<Tensor>,
    feature_dim: usize,
    code_dim: usize,
}

impl FrozenEncoder {
    pub fn code_dim(&self) -> usize {
        self.code_dim
    }

    pub fn feature_dim(&self) -> usize {
        self.feature_dim
    }

    pub fn encode_node(&self, g: &mut Graph, x: NodeId) -> Result<NodeId> {
        let h = g.affine_const(x, &self.w, &self.b)?;
        Ok(g.sigmoid(h))
    }

    pub fn encode_value(&self, x: &Tensor) -> Tensor {
        let mut buf = Vec::new();
        affine_forward(&self.w, x.data(), self.b.data(), &mut buf);
        let mut code = Vec::new();
        sigmoid_forward(&buf, &mut code);
        Tensor::vector(code)
    }
}

/// Training settings for one autoencoder.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AeTrainConfig {
    pub code_dim: usize,
    pub lambda: f64,
    #[serde(default = "default_stop_window")]
    pub stop_window: usize,
    #[serde(default = "default_stop_tolerance")]
    pub stop_tolerance: f64,
    #[serde(default = "default_max_epochs")]
    pub max_epochs: usize,
    #[serde(default = "default_ae_batch")]
    pub batch_size: usize,
    #[serde(default)]
    pub adadelta: AdaDeltaConfig,
    #[serde(default = "default_reconstruction")]
    pub reconstruction: ReconstructionLoss,
}

fn default_stop_window() -> usize {
    5
}
fn default_stop_tolerance() -> f64 {
    1e-3
}
fn default_max_epochs() -> usize {
    150
}
fn default_ae_batch() -> usize {
    32
}
fn default_reconstruction() -> ReconstructionLoss {
    ReconstructionLoss::HalfSquared
}

impl AeTrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "autoencoder lambda must be positive, got {}",
                self.lambda
            )));
        }
        if self.stop_window == 0 {
            return Err(Error::InvalidArgument("stop_window must be at least 1".into()));
        }
        if self.max_epochs < self.stop_window {
            return Err(Error::InvalidArgument(format!(
                "max_epochs {} must be at least stop_window {}",
                self.max_epochs, self.stop_window
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidArgument("autoencoder batch_size must be at least 1".into()));
        }
        self.adadelta.validate()
    }
}

/// The three nodes of the per-sample training objective.
pub struct AeObjective {
    pub total: NodeId,
    pub reconstruction: NodeId,
    pub classification: NodeId,
}

/// Per-sample objective: `lambda * reconstruction_term +
/// cross_entropy(frozen_head(reconstruction), label)`. The input feature is
/// detached (a constant); gradient flows only into autoencoder parameters.
pub fn ae_objective(
    g: &mut Graph,
    ae: &Autoencoder,
    feat: &Tensor,
    label: usize,
    class_count: usize,
    frozen_head: &FrozenHead,
    lambda: f64,
    reconstruction: ReconstructionLoss,
) -> Result<AeObjective> {
    let x = g.input(feat.clone());
    let rec = ae.reconstruct_node(g, x)?;
    let recon_term = match reconstruction {
        ReconstructionLoss::HalfSquared => g.squared_l2_half(rec, x)?,
        ReconstructionLoss::L2Norm => {
            let half = g.squared_l2_half(rec, x)?;
            let full = g.scale(half, 2.0);
            g.sqrt(full)?
        }
    };
    let probs = frozen_head.probs_node(g, rec)?;
    let ce = g.cross_entropy(probs, &one_hot(label, class_count))?;
    let weighted = g.scale(recon_term, lambda);
    let total = g.add(weighted, ce)?;
    Ok(AeObjective {
        total,
        reconstruction: recon_term,
        classification: ce,
    })
}

/// One row of the training curve.
#[derive(Debug, Clone, Copy)]
pub struct AeEpochRecord {
    pub epoch: usize,
    pub code_loss: f64,
    pub classification_loss: f64,
}

/// Trains an autoencoder on frozen features with the adaptive stepper.
/// Stops when the windowed mean of the classification component improves by
/// less than `stop_tolerance` relative, or at `max_epochs`.
pub fn train_autoencoder(
    features: &[(Tensor, usize)],
    frozen_head: &FrozenHead,
    class_count: usize,
    cfg: &AeTrainConfig,
    rng_seed: u64,
) -> Result<(Autoencoder, Vec<AeEpochRecord>)> {
    cfg.validate()?;
    if features.is_empty() {
        return Err(Error::EmptyDataset("autoencoder training features".into()));
    }
    let feature_dim = features[0].0.len();
    let mut ae = Autoencoder::new(feature_dim, cfg.code_dim, rng_seed)?;
    let mut stepper = AdaDelta::new(cfg.adadelta);
    let mut curve: Vec<AeEpochRecord> = Vec::new();
    let mut cls_history: Vec<f64> = Vec::new();

    for epoch in 1..=cfg.max_epochs {
        let mut recon_sum = 0.0;
        let mut cls_sum = 0.0;
        let epoch_seed = seeds::derive(rng_seed, &[tag::AE_SHUFFLE, epoch as u64]);
        for batch in batches(features.len(), cfg.batch_size, epoch_seed) {
            ae.store.zero_grads();
            let (grads, terms) = batch_grads(&ae.store, &batch, batch.len(), |g, i| {
                let (feat, label) = &features[i];
                let obj = ae_objective(
                    g,
                    &ae,
                    feat,
                    *label,
                    class_count,
                    frozen_head,
                    cfg.lambda,
                    cfg.reconstruction,
                )?;
                let payload = (g.value(obj.reconstruction).item(), g.value(obj.classification).item());
                Ok((obj.total, payload))
            })?;
            grads.apply_to(&mut ae.store);
            for (r, c) in &terms {
                recon_sum += r;
                cls_sum += c;
            }
            stepper.step(&mut ae.store)?;
        }
        let n = features.len() as f64;
        let record = AeEpochRecord {
            epoch,
            code_loss: recon_sum / n,
            classification_loss: cls_sum / n,
        };
        if !record.code_loss.is_finite() || !record.classification_loss.is_finite() {
            return Err(Error::NonFinite {
                what: "loss",
                name: "autoencoder training".into(),
            });
        }
        curve.push(record);
        cls_history.push(record.classification_loss);

        if should_stop(&cls_history, cfg.stop_window, cfg.stop_tolerance) {
            break;
        }
    }
    Ok((ae, curve))
}

/// Windowed convergence rule on the classification loss: compare the mean of
/// the last `window` epochs against the mean of the `window` before them.
fn should_stop(history: &[f64], window: usize, tolerance: f64) -> bool {
    if history.len() < 2 * window {
        return false;
    }
    let n = history.len();
    let last: f64 = history[n - window..].iter().sum::<f64>() / window as f64;
    let prev: f64 = history[n - 2 * window..n - window].iter().sum::<f64>() / window as f64;
    if prev <= 0.0 {
        return true;
    }
    (prev - last) / prev < tolerance
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::TaskId;
    use crate::model::{ArchSpec, TaskModel};

    fn frozen_head_fixture(feature_dim: usize, classes: usize) -> FrozenHead {
        let arch = ArchSpec {
            input_dim: feature_dim,
            feature_widths: vec![feature_dim],
            shared_widths: vec![6],
            head_hidden: vec![],
        };
        let mut m = TaskModel::new(&arch, 42).unwrap();
        m.add_head(TaskId(0), classes, 42).unwrap();
        m.snapshot().frozen_head(TaskId(0)).unwrap()
    }

    #[test]
    fn undercompleteness_enforced() {
        assert!(Autoencoder::new(8, 8, 1).is_err());
        assert!(Autoencoder::new(8, 9, 1).is_err());
        assert!(Autoencoder::new(8, 0, 1).is_err());
        assert!(Autoencoder::new(8, 2, 1).is_ok());
    }

    #[test]
    fn zero_encoder_outputs_half_everywhere() {
        let mut ae = Autoencoder::new(6, 2, 3).unwrap();
        ae.store.get_mut(ae.enc_w).value.fill(0.0);
        ae.store.get_mut(ae.enc_b).value.fill(0.0);
        let code = ae.encode_value(&Tensor::vector(vec![5.0, -3.0, 0.1, 9.9, -7.2, 0.0])).unwrap();
        assert!(code.data().iter().all(|&v| v == 0.5));
    }

    #[test]
    fn codes_strictly_inside_unit_interval() {
        let ae = Autoencoder::new(10, 3, 9).unwrap();
        let x = Tensor::vector((0..10).map(|i| i as f64 - 5.0).collect());
        let code = ae.encode_value(&x).unwrap();
        assert!(code.data().iter().all(|&v| v > 0.0 && v < 1.0));
    }

    #[test]
    fn encode_matches_manual_composition() {
        let ae = Autoencoder::new(5, 2, 17).unwrap();
        let x = Tensor::vector(vec![0.4, -0.8, 1.2, 0.0, -0.3]);
        let code = ae.encode_value(&x).unwrap();
        // manual affine then sigmoid
        let w = &ae.store.get(ae.enc_w).value;
        let b = &ae.store.get(ae.enc_b).value;
        for r in 0..2 {
            let mut acc = 0.0;
            for c in 0..5 {
                acc += w.data()[r * 5 + c] * x.data()[c];
            }
            acc += b.data()[r];
            let expect = 1.0 / (1.0 + (-acc).exp());
            assert!((code.data()[r] - expect).abs() < 1e-12);
        }
        // graph path agrees bitwise with the plain path
        let mut g = Graph::new();
        let xin = g.input(x.clone());
        let node = ae.encode_node(&mut g, xin).unwrap();
        assert_eq!(g.value(node).bits_checksum(), code.bits_checksum());
    }

    #[test]
    fn reconstruct_has_input_dimension_and_zero_case() {
        let mut ae = Autoencoder::new(7, 3, 4).unwrap();
        for id in [ae.enc_w, ae.enc_b, ae.dec_w, ae.dec_b] {
            ae.store.get_mut(id).value.fill(0.0);
        }
        let x = Tensor::vector(vec![1.0; 7]);
        let rec = ae.reconstruct_value(&x).unwrap();
        assert_eq!(rec.len(), 7);
        // zero weights and biases: decode of any code is zero
        assert!(rec.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn objective_vanishes_reconstruction_for_perfect_autoencoder() {
        let d = 6;
        let head = frozen_head_fixture(d, 3);
        let feat = Tensor::vector(vec![0.3, 0.5, -0.2, 0.8, 0.0, 1.1]);
        let mut ae = Autoencoder::new(d, 2, 5).unwrap();
        // make r the identity on this particular input:
        // encoder zeroed -> code = 0.5; decoder zeroed, bias = feat
        ae.store.get_mut(ae.enc_w).value.fill(0.0);
        ae.store.get_mut(ae.enc_b).value.fill(0.0);
        ae.store.get_mut(ae.dec_w).value.fill(0.0);
        ae.store.get_mut(ae.dec_b).value = feat.clone();

        let mut g = Graph::new();
        let obj = ae_objective(&mut g, &ae, &feat, 1, 3, &head, 0.7, ReconstructionLoss::HalfSquared).unwrap();
        assert_eq!(g.value(obj.reconstruction).item(), 0.0);
        // total equals the frozen-head loss on the raw feature
        let probs = head.probs_value(&feat);
        let expect = -probs.data()[1].ln();
        assert!((g.value(obj.total).item() - expect).abs() < 1e-12);
    }

    #[test]
    fn objective_with_zero_lambda_is_pure_classification() {
        let d = 5;
        let head = frozen_head_fixture(d, 4);
        let ae = Autoencoder::new(d, 2, 6).unwrap();
        let feat = Tensor::vector(vec![0.9, -0.4, 0.2, 0.6, -1.0]);
        let mut g = Graph::new();
        let obj = ae_objective(&mut g, &ae, &feat, 2, 4, &head, 0.0, ReconstructionLoss::HalfSquared).unwrap();
        let rec = ae.reconstruct_value(&feat).unwrap();
        let expect = -head.probs_value(&rec).data()[2].ln();
        assert!((g.value(obj.total).item() - expect).abs() < 1e-12);
    }

    #[test]
    fn stopping_rule_windows() {
        // flat history converges
        let flat = vec![1.0; 10];
        assert!(should_stop(&flat, 5, 1e-3));
        // steadily improving history does not
        let improving: Vec<f64> = (0..10).map(|i| 1.0 / (1.0 + i as f64)).collect();
        assert!(!should_stop(&improving, 5, 1e-3));
        // too short: never
        assert!(!should_stop(&[1.0, 1.0, 1.0], 5, 1e-3));
    }

    #[test]
    fn training_is_deterministic_and_freezes_head() {
        let d = 8;
        let classes = 3;
        let head = frozen_head_fixture(d, classes);
        let head_sum_before = head.checksum();
        let mut rng = seeds::rng(99);
        use rand::Rng;
        let features: Vec<(Tensor, usize)> = (0..30)
            .map(|i| {
                let x: Vec<f64> = (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect();
                (Tensor::vector(x), i % classes)
            })
            .collect();
        let cfg = AeTrainConfig {
            code_dim: 2,
            lambda: 0.1,
            stop_window: 2,
            stop_tolerance: 1e-3,
            max_epochs: 6,
            batch_size: 8,
            adadelta: AdaDeltaConfig::default(),
            reconstruction: ReconstructionLoss::HalfSquared,
        };
        let (ae1, curve1) = train_autoencoder(&features, &head, classes, &cfg, 7).unwrap();
        let (ae2, curve2) = train_autoencoder(&features, &head, classes, &cfg, 7).unwrap();
        assert_eq!(ae1.values_checksum(), ae2.values_checksum());
        assert_eq!(curve1.len(), curve2.len());
        for (a, b) in curve1.iter().zip(&curve2) {
            assert_eq!(a.code_loss.to_bits(), b.code_loss.to_bits());
            assert!(a.code_loss.is_finite() && a.classification_loss.is_finite());
        }
        assert_eq!(head.checksum(), head_sum_before);
    }

    #[test]
    fn empty_feature_set_rejected() {
        let head = frozen_head_fixture(4, 2);
        let cfg = AeTrainConfig {
            code_dim: 2,
            lambda: 0.1,
            stop_window: 2,
            stop_tolerance: 1e-3,
            max_epochs: 4,
            batch_size: 8,
            adadelta: AdaDeltaConfig::default(),
            reconstruction: ReconstructionLoss::HalfSquared,
        };
        assert!(matches!(
            train_autoencoder(&[], &head, 2, &cfg, 1),
            Err(Error::EmptyDataset(_))
        ));
    }
}
