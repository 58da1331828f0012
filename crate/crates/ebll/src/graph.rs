//! Reverse-mode automatic differentiation over an operation tape.
//!
//! A forward pass appends primitive operations to a [`Graph`]; `backward`
//! replays the tape in reverse, visiting each recorded operation exactly
//! once, and accumulates parameter gradients into the [`ParamStore`] the
//! graph was built against. Frozen parameters receive no gradient.

use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::tensor::{
    accumulate_outer, affine_forward, matvec_transposed, relu_forward, rescale_probs_forward,
    sigmoid_forward, softmax_logits_forward, Tensor, PROB_FLOOR,
};

static STORE_UID: AtomicU64 = AtomicU64::new(1);

/// Handle to a parameter inside its owning [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

/// A trainable value with its gradient accumulator and a unique label.
#[derive(Debug, Clone)]
pub struct Parameter {
    pub name: String,
    pub value: Tensor,
    pub grad: Tensor,
    pub frozen: bool,
}

/// Owns the parameters of one model (or autoencoder).
#[derive(Debug, Clone)]
pub struct ParamStore {
    params: Vec<Parameter>,
    uid: u64,
}

impl Default for ParamStore {
    fn default() -> Self {
        Self::new()
    }
}

impl ParamStore {
    pub fn new() -> Self {
        Self {
            params: Vec::new(),
            uid: STORE_UID.fetch_add(1, Ordering::Relaxed),
        }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        let name = name.into();
        debug_assert!(
            self.params.iter().all(|p| p.name != name),
            "duplicate parameter name {name}"
        );
        let grad = Tensor::zeros_like(&value);
        self.params.push(Parameter {
            name,
            value,
            grad,
            frozen: false,
        });
        ParamId(self.params.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Parameter {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter {
        &mut self.params[id.0]
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Parameter)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (ParamId, &mut Parameter)> {
        self.params
            .iter_mut()
            .enumerate()
            .map(|(i, p)| (ParamId(i), p))
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.params {
            p.grad.fill(0.0);
        }
    }

    pub fn set_frozen(&mut self, id: ParamId, frozen: bool) {
        self.params[id.0].frozen = frozen;
    }

    pub fn freeze_all(&mut self) {
        for p in &mut self.params {
            p.frozen = true;
        }
    }

    /// Total number of scalar parameters.
    pub fn scalar_count(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    /// Bit-exact checksum over all parameter values, in declaration order.
    pub fn values_checksum(&self) -> u64 {
        let mut h: u64 = 0x84222325cbf29ce4;
        for p in &self.params {
            h = h
                .rotate_left(17)
                .wrapping_mul(0x100000001b3)
                .wrapping_add(p.value.bits_checksum());
        }
        h
    }

    pub(crate) fn uid(&self) -> u64 {
        self.uid
    }
}

/// Handle to a value node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(usize);

enum Op {
    Input,
    Affine {
        x: NodeId,
        w: ParamId,
        b: ParamId,
    },
    AffineConst {
        x: NodeId,
        w: Arc<Tensor>,
    },
    Sigmoid {
        x: NodeId,
    },
    Relu {
        x: NodeId,
    },
    SoftmaxLogits {
        x: NodeId,
        theta: f64,
    },
    /// Probability-path temperature rescale: out_i = p_i^{1/theta} / sum_j p_j^{1/theta}.
    RescaleProbs {
        p: NodeId,
        theta: f64,
        clamped: Tensor,
        powered: Tensor,
    },
    /// -sum_i weights_i * log(max(p_i, floor)), entries with zero weight skipped.
    NegDotLog {
        p: NodeId,
        weights: Tensor,
    },
    SquaredL2Half {
        a: NodeId,
        b: NodeId,
    },
    Sqrt {
        x: NodeId,
    },
    Add {
        a: NodeId,
        b: NodeId,
    },
    Scale {
        x: NodeId,
        c: f64,
    },
    SumList {
        xs: Vec<NodeId>,
    },
}

struct Node {
    value: Tensor,
    op: Op,
}

/// Ordered record of the primitive operations of one forward pass.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    bound_store: Option<u64>,
}

/// Adjoints of all graph nodes after a backward pass. Input-node entries let
/// callers inspect gradients flowing to non-parameter leaves.
#[derive(Debug)]
pub struct NodeGrads {
    grads: Vec<Option<Tensor>>,
}

impl NodeGrads {
    pub fn get(&self, node: NodeId) -> Option<&Tensor> {
        self.grads.get(node.0).and_then(|g| g.as_ref())
    }
}

/// Parameter-gradient sink detached from the store, so independent backward
/// passes can run concurrently and be merged in a fixed order afterwards.
#[derive(Debug, Clone)]
pub struct GradBuffer {
    grads: Vec<Tensor>,
}

impl GradBuffer {
    pub fn for_store(store: &ParamStore) -> Self {
        Self {
            grads: store
                .params
                .iter()
                .map(|p| Tensor::zeros_like(&p.value))
                .collect(),
        }
    }

    pub fn merge(&mut self, other: &GradBuffer) {
        debug_assert_eq!(self.grads.len(), other.grads.len());
        for (a, b) in self.grads.iter_mut().zip(&other.grads) {
            a.add_assign(b);
        }
    }

    /// Accumulate the buffered gradients into the store's grad tensors.
    pub fn apply_to(&self, store: &mut ParamStore) {
        debug_assert_eq!(self.grads.len(), store.params.len());
        for (p, g) in store.params.iter_mut().zip(&self.grads) {
            p.grad.add_assign(g);
        }
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    /// Clears the tape while keeping its allocation; the store binding is reset.
    pub fn reset(&mut self) {
        self.nodes.clear();
        self.bound_store = None;
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, node: NodeId) -> &Tensor {
        &self.nodes[node.0].value
    }

    fn push(&mut self, value: Tensor, op: Op) -> NodeId {
        self.nodes.push(Node { value, op });
        NodeId(self.nodes.len() - 1)
    }

    pub fn input(&mut self, value: Tensor) -> NodeId {
        self.push(value, Op::Input)
    }

    fn bind_store(&mut self, store: &ParamStore) -> Result<()> {
        match self.bound_store {
            None => {
                self.bound_store = Some(store.uid());
                Ok(())
            }
            Some(uid) if uid == store.uid() => Ok(()),
            Some(_) => Err(Error::Contract(
                "graph already bound to a different parameter store".into(),
            )),
        }
    }

    /// `w * x + b` with trainable parameters.
    pub fn affine(
        &mut self,
        store: &ParamStore,
        x: NodeId,
        w: ParamId,
        b: ParamId,
    ) -> Result<NodeId> {
        self.bind_store(store)?;
        let wt = &store.get(w).value;
        let bt = &store.get(b).value;
        let xv = self.value(x);
        check_affine_shapes(wt, xv, bt)?;
        let mut out = Vec::new();
        affine_forward(wt, xv.data(), bt.data(), &mut out);
        Ok(self.push(Tensor::vector(out), Op::Affine { x, w, b }))
    }

    /// `w * x + b` with constant (frozen) weights; gradient flows to `x` only.
    pub fn affine_const(&mut self, x: NodeId, w: &Arc<Tensor>, b: &Arc<Tensor>) -> Result<NodeId> {
        let xv = self.value(x);
        check_affine_shapes(w, xv, b)?;
        let mut out = Vec::new();
        affine_forward(w, xv.data(), b.data(), &mut out);
        Ok(self.push(
            Tensor::vector(out),
            Op::AffineConst {
                x,
                w: Arc::clone(w),
            },
        ))
    }

    pub fn sigmoid(&mut self, x: NodeId) -> NodeId {
        let mut out = Vec::new();
        sigmoid_forward(self.value(x).data(), &mut out);
        self.push(Tensor::vector(out), Op::Sigmoid { x })
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        let mut out = Vec::new();
        relu_forward(self.value(x).data(), &mut out);
        self.push(Tensor::vector(out), Op::Relu { x })
    }

    /// Softmax of `logits / theta` (the logits path of temperature softmax).
    pub fn softmax_temp_logits(&mut self, x: NodeId, theta: f64) -> Result<NodeId> {
        check_theta(theta)?;
        let mut out = Vec::new();
        softmax_logits_forward(self.value(x).data(), theta, &mut out);
        Ok(self.push(Tensor::vector(out), Op::SoftmaxLogits { x, theta }))
    }

    /// Probability path of temperature softmax: `p_i^{1/theta}` renormalized.
    /// Zero entries are clamped to a small floor before exponentiation.
    pub fn softmax_temp_probs(&mut self, p: NodeId, theta: f64) -> Result<NodeId> {
        check_theta(theta)?;
        let (clamped, powered, out) = rescale_probs_forward(self.value(p).data(), theta);
        Ok(self.push(
            Tensor::vector(out),
            Op::RescaleProbs {
                p,
                theta,
                clamped: Tensor::vector(clamped),
                powered: Tensor::vector(powered),
            },
        ))
    }

    /// Cross-entropy of a probability vector against a one-hot target.
    pub fn cross_entropy(&mut self, p: NodeId, target_onehot: &Tensor) -> Result<NodeId> {
        let pv = self.value(p);
        if pv.shape() != target_onehot.shape() {
            return Err(Error::ShapeMismatch {
                context: "cross_entropy".into(),
                expected: pv.shape().to_vec(),
                got: target_onehot.shape().to_vec(),
            });
        }
        let ones = target_onehot.data().iter().filter(|&&v| v == 1.0).count();
        let zeros = target_onehot.data().iter().filter(|&&v| v == 0.0).count();
        if ones != 1 || ones + zeros != target_onehot.len() {
            return Err(Error::InvalidArgument(
                "cross_entropy target must be one-hot".into(),
            ));
        }
        self.neg_dot_log(p, target_onehot.clone())
    }

    /// Cross-entropy against an arbitrary non-negative weight vector
    /// (soft targets); zero-weight entries contribute nothing.
    pub fn soft_cross_entropy(&mut self, p: NodeId, target: &Tensor) -> Result<NodeId> {
        if self.value(p).shape() != target.shape() {
            return Err(Error::ShapeMismatch {
                context: "soft_cross_entropy".into(),
                expected: self.value(p).shape().to_vec(),
                got: target.shape().to_vec(),
            });
        }
        self.neg_dot_log(p, target.clone())
    }

    fn neg_dot_log(&mut self, p: NodeId, weights: Tensor) -> Result<NodeId> {
        let pv = self.value(p).data();
        let mut loss = 0.0;
        for (&w, &pi) in weights.data().iter().zip(pv) {
            if w == 0.0 {
                continue;
            }
            let pc = if pi <= 0.0 {
                log::warn!("probability entry {pi} clamped to {PROB_FLOOR} inside log loss");
                PROB_FLOOR
            } else {
                pi
            };
            loss -= w * pc.ln();
        }
        Ok(self.push(Tensor::scalar(loss), Op::NegDotLog { p, weights }))
    }

    /// Knowledge-distillation loss: temperature-rescale both probability
    /// vectors, then cross-entropy of the rescaled current output against the
    /// rescaled recorded output. The recorded side is a constant; gradient
    /// flows only through `p_current`.
    pub fn distillation_loss(
        &mut self,
        p_current: NodeId,
        p_recorded: &Tensor,
        theta: f64,
    ) -> Result<NodeId> {
        check_theta(theta)?;
        check_normalized("p_current", self.value(p_current))?;
        check_normalized("p_recorded", p_recorded)?;
        let (_, _, z_star) = rescale_probs_forward(p_recorded.data(), theta);
        let z_hat = self.softmax_temp_probs(p_current, theta)?;
        self.neg_dot_log(z_hat, Tensor::vector(z_star))
    }

    /// Half squared l2 distance between two nodes of identical shape.
    pub fn squared_l2_half(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() != bv.shape() {
            return Err(Error::ShapeMismatch {
                context: "squared_l2_half".into(),
                expected: av.shape().to_vec(),
                got: bv.shape().to_vec(),
            });
        }
        let v = 0.5 * av.squared_distance(bv);
        Ok(self.push(Tensor::scalar(v), Op::SquaredL2Half { a, b }))
    }

    /// Square root of a scalar node.
    pub fn sqrt(&mut self, x: NodeId) -> Result<NodeId> {
        let xv = self.value(x);
        if !xv.is_scalar() {
            return Err(Error::Contract("sqrt expects a scalar node".into()));
        }
        let v = xv.item().sqrt();
        Ok(self.push(Tensor::scalar(v), Op::Sqrt { x }))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() != bv.shape() {
            return Err(Error::ShapeMismatch {
                context: "add".into(),
                expected: av.shape().to_vec(),
                got: bv.shape().to_vec(),
            });
        }
        let mut out = av.clone();
        out.add_assign(bv);
        Ok(self.push(out, Op::Add { a, b }))
    }

    pub fn scale(&mut self, x: NodeId, c: f64) -> NodeId {
        let mut out = self.value(x).clone();
        out.scale_in_place(c);
        self.push(out, Op::Scale { x, c })
    }

    /// Sum of scalar nodes, accumulated in list order.
    pub fn sum_scalars(&mut self, xs: Vec<NodeId>) -> Result<NodeId> {
        if xs.is_empty() {
            return Err(Error::InvalidArgument("sum_scalars of empty list".into()));
        }
        let mut acc = 0.0;
        for &n in &xs {
            let v = self.value(n);
            if !v.is_scalar() {
                return Err(Error::Contract("sum_scalars expects scalar nodes".into()));
            }
            acc += v.item();
        }
        Ok(self.push(Tensor::scalar(acc), Op::SumList { xs }))
    }

    /// Backward pass seeded with adjoint 1 at `loss`.
    pub fn backward(&self, loss: NodeId, store: &mut ParamStore) -> Result<NodeGrads> {
        self.backward_seeded(loss, 1.0, store)
    }

    /// Backward pass seeded with an arbitrary scalar adjoint, accumulating
    /// parameter gradients into the store's own grad tensors.
    pub fn backward_seeded(
        &self,
        loss: NodeId,
        seed: f64,
        store: &mut ParamStore,
    ) -> Result<NodeGrads> {
        let mut buf = GradBuffer::for_store(store);
        let grads = self.backward_buffered(loss, seed, store, &mut buf)?;
        buf.apply_to(store);
        Ok(grads)
    }

    /// Backward pass writing parameter gradients into a detached buffer.
    /// Frozen parameters receive no gradient (their buffer entries stay zero).
    pub fn backward_buffered(
        &self,
        loss: NodeId,
        seed: f64,
        store: &ParamStore,
        buf: &mut GradBuffer,
    ) -> Result<NodeGrads> {
        if !self.value(loss).is_scalar() {
            return Err(Error::Contract(format!(
                "backward requires a scalar loss node, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        if let Some(uid) = self.bound_store {
            if uid != store.uid() {
                return Err(Error::Contract(
                    "backward called with a parameter store the graph was not built against"
                        .into(),
                ));
            }
        }
        let mut adj: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        adj[loss.0] = Some(Tensor::scalar(seed));

        for idx in (0..=loss.0).rev() {
            let Some(g) = adj[idx].take() else {
                continue;
            };
            match &self.nodes[idx].op {
                Op::Input => {}
                Op::Affine { x, w, b } => {
                    let xv = self.nodes[x.0].value.data();
                    let gd = g.data();
                    let mut gx = vec![0.0; xv.len()];
                    matvec_transposed(&store.get(*w).value, gd, &mut gx);
                    accumulate(&mut adj[x.0], &Tensor::vector(gx));
                    if !store.get(*w).frozen {
                        accumulate_outer(&mut buf.grads[w.0], gd, xv);
                    }
                    if !store.get(*b).frozen {
                        buf.grads[b.0].add_scaled(1.0, &g);
                    }
                }
                Op::AffineConst { x, w } => {
                    let xv = self.nodes[x.0].value.data();
                    let mut gx = vec![0.0; xv.len()];
                    matvec_transposed(w, g.data(), &mut gx);
                    accumulate(&mut adj[x.0], &Tensor::vector(gx));
                }
                Op::Sigmoid { x } => {
                    let y = self.nodes[idx].value.data();
                    let gx: Vec<f64> = g
                        .data()
                        .iter()
                        .zip(y)
                        .map(|(gv, yv)| gv * yv * (1.0 - yv))
                        .collect();
                    accumulate(&mut adj[x.0], &Tensor::vector(gx));
                }
                Op::Relu { x } => {
                    let xv = self.nodes[x.0].value.data();
                    let gx: Vec<f64> = g
                        .data()
                        .iter()
                        .zip(xv)
                        .map(|(gv, &v)| if v > 0.0 { *gv } else { 0.0 })
                        .collect();
                    accumulate(&mut adj[x.0], &Tensor::vector(gx));
                }
                Op::SoftmaxLogits { x, theta } => {
                    let p = self.nodes[idx].value.data();
                    let gd = g.data();
                    let dot: f64 = gd.iter().zip(p).map(|(gv, pv)| gv * pv).sum();
                    let gx: Vec<f64> = gd
                        .iter()
                        .zip(p)
                        .map(|(gv, pv)| pv * (gv - dot) / theta)
                        .collect();
                    accumulate(&mut adj[x.0], &Tensor::vector(gx));
                }
                Op::RescaleProbs {
                    p,
                    theta,
                    clamped,
                    powered,
                } => {
                    let out = self.nodes[idx].value.data();
                    let gd = g.data();
                    let sum: f64 = powered.data().iter().sum();
                    let gdot: f64 = gd.iter().zip(out).map(|(gv, ov)| gv * ov).sum();
                    let gx: Vec<f64> = clamped
                        .data()
                        .iter()
                        .zip(powered.data())
                        .zip(gd)
                        .map(|((&pc, &q), &gv)| {
                            // d out_j / d p_j = q_j / (theta * p_j); off-diagonal via gdot.
                            let u = q / (theta * pc);
                            u * (gv - gdot) / sum
                        })
                        .collect();
                    accumulate(&mut adj[p.0], &Tensor::vector(gx));
                }
                Op::NegDotLog { p, weights } => {
                    let pv = self.nodes[p.0].value.data();
                    let gs = g.item();
                    let gx: Vec<f64> = weights
                        .data()
                        .iter()
                        .zip(pv)
                        .map(|(&w, &pi)| {
                            if w == 0.0 {
                                0.0
                            } else {
                                -gs * w / pi.max(PROB_FLOOR)
                            }
                        })
                        .collect();
                    accumulate(&mut adj[p.0], &Tensor::vector(gx));
                }
                Op::SquaredL2Half { a, b } => {
                    let av = self.nodes[a.0].value.data();
                    let bv = self.nodes[b.0].value.data();
                    let gs = g.item();
                    let ga: Vec<f64> = av.iter().zip(bv).map(|(x, y)| gs * (x - y)).collect();
                    let gb: Vec<f64> = ga.iter().map(|v| -v).collect();
                    accumulate(&mut adj[a.0], &Tensor::vector(ga));
                    accumulate(&mut adj[b.0], &Tensor::vector(gb));
                }
                Op::Sqrt { x } => {
                    let y = self.nodes[idx].value.item();
                    let gx = g.item() / (2.0 * y.max(PROB_FLOOR));
                    accumulate(&mut adj[x.0], &Tensor::scalar(gx));
                }
                Op::Add { a, b } => {
                    accumulate(&mut adj[a.0], &g);
                    accumulate(&mut adj[b.0], &g);
                }
                Op::Scale { x, c } => {
                    let mut gx = g.clone();
                    gx.scale_in_place(*c);
                    accumulate(&mut adj[x.0], &gx);
                }
                Op::SumList { xs } => {
                    for &n in xs {
                        accumulate(&mut adj[n.0], &g);
                    }
                }
            }
            adj[idx] = Some(g);
        }
        Ok(NodeGrads { grads: adj })
    }
}

fn accumulate(slot: &mut Option<Tensor>, g: &Tensor) {
    match slot {
        Some(t) => t.add_assign(g),
        None => *slot = Some(g.clone()),
    }
}

fn check_affine_shapes(w: &Tensor, x: &Tensor, b: &Tensor) -> Result<()> {
    if w.rank() != 2 || x.rank() != 1 || b.rank() != 1 || w.cols() != x.len() || w.rows() != b.len()
    {
        return Err(Error::ShapeMismatch {
            context: format!(
                "affine: weight {:?} against input {:?} and bias {:?}",
                w.shape(),
                x.shape(),
                b.shape()
            ),
            expected: vec![w.rows(), w.cols()],
            got: x.shape().to_vec(),
        });
    }
    Ok(())
}

fn check_theta(theta: f64) -> Result<()> {
    if theta > 0.0 && theta.is_finite() {
        Ok(())
    } else {
        Err(Error::InvalidArgument(format!(
            "temperature must be positive and finite, got {theta}"
        )))
    }
}

fn check_normalized(which: &str, p: &Tensor) -> Result<()> {
    let sum: f64 = p.data().iter().sum();
    if (sum - 1.0).abs() <= 1e-9 {
        Ok(())
    } else {
        Err(Error::NotNormalized {
            which: which.to_string(),
            sum,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn glorot_vec(n: usize, seed: u64) -> Vec<f64> {
        let mut s = seed;
        (0..n)
            .map(|_| {
                s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                ((s >> 11) as f64 / (1u64 << 53) as f64) - 0.5
            })
            .collect()
    }

    #[test]
    fn affine_basis_vector_selects_column() {
        let mut store = ParamStore::new();
        let w = store.add("w", Tensor::matrix(2, 2, vec![2.0, 3.0, 4.0, 5.0]).unwrap());
        let b = store.add("b", Tensor::vector(vec![0.0, 0.0]));
        let mut g = Graph::new();
        let x = g.input(Tensor::vector(vec![1.0, 0.0]));
        let y = g.affine(&store, x, w, b).unwrap();
        assert_eq!(g.value(y).data(), &[2.0, 4.0]);
    }

    #[test]
    fn affine_zero_input_passes_bias() {
        let mut store = ParamStore::new();
        let w = store.add("w", Tensor::matrix(2, 2, vec![1.5, -2.0, 0.25, 9.0]).unwrap());
        let b = store.add("b", Tensor::vector(vec![7.0, -1.0]));
        let mut g = Graph::new();
        let x = g.input(Tensor::vector(vec![0.0, 0.0]));
        let y = g.affine(&store, x, w, b).unwrap();
        assert_eq!(g.value(y).data(), &[7.0, -1.0]);
    }

    #[test]
    fn affine_shape_mismatch_names_both_shapes() {
        let mut store = ParamStore::new();
        let w = store.add("w", Tensor::matrix(2, 3, vec![0.0; 6]).unwrap());
        let b = store.add("b", Tensor::vector(vec![0.0; 2]));
        let mut g = Graph::new();
        let x = g.input(Tensor::vector(vec![1.0, 2.0]));
        let err = g.affine(&store, x, w, b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3]") && msg.contains("[2]"), "{msg}");
    }

    #[test]
    fn relu_definition_and_zero_gradient() {
        let mut store = ParamStore::new();
        let mut g = Graph::new();
        let x = g.input(Tensor::vector(vec![-1.0, 0.0, 2.0]));
        let y = g.relu(x);
        assert_eq!(g.value(y).data(), &[0.0, 0.0, 2.0]);

        // all-negative input: zero output, zero input-gradient
        let mut g = Graph::new();
        let x = g.input(Tensor::vector(vec![-3.0, -0.5]));
        let y = g.relu(x);
        let z = g.input(Tensor::vector(vec![0.0, 0.0]));
        let loss = g.squared_l2_half(y, z).unwrap();
        let grads = g.backward(loss, &mut store).unwrap();
        assert_eq!(g.value(y).data(), &[0.0, 0.0]);
        assert_eq!(grads.get(x).unwrap().data(), &[0.0, 0.0]);
    }

    #[test]
    fn sigmoid_gradient_at_zero_is_quarter() {
        let mut store = ParamStore::new();
        let mut g = Graph::new();
        let x = g.input(Tensor::vector(vec![0.0]));
        let y = g.sigmoid(x);
        assert_eq!(g.value(y).data(), &[0.5]);
        let s = g.sum_scalars(vec![y]).unwrap();
        let grads = g.backward(s, &mut store).unwrap();
        let got = grads.get(x).unwrap().data()[0];
        assert!((got - 0.25).abs() < 1e-12);
    }

    #[test]
    fn softmax_uniform_logits() {
        let mut g = Graph::new();
        let x = g.input(Tensor::vector(vec![0.0, 0.0, 0.0]));
        let y = g.softmax_temp_logits(x, 1.0).unwrap();
        for v in g.value(y).data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn softmax_temp_probs_matches_scalar_evaluation() {
        // uniform is a fixed point
        let mut g = Graph::new();
        let p = g.input(Tensor::vector(vec![0.5, 0.5]));
        let z = g.softmax_temp_probs(p, 2.0).unwrap();
        assert!((g.value(z).data()[0] - 0.5).abs() < 1e-15);

        // scalar evaluation: sqrt(0.9) / (sqrt(0.9) + sqrt(0.1))
        let mut g = Graph::new();
        let p = g.input(Tensor::vector(vec![0.9, 0.1]));
        let z = g.softmax_temp_probs(p, 2.0).unwrap();
        let expect = 0.9f64.sqrt() / (0.9f64.sqrt() + 0.1f64.sqrt());
        assert!((g.value(z).data()[0] - expect).abs() < 1e-12);
        assert!((g.value(z).data()[0] - 0.75).abs() < 1e-9);
        assert!((g.value(z).data()[1] - 0.25).abs() < 1e-9);
    }

    #[test]
    fn theta_must_be_positive() {
        let mut g = Graph::new();
        let p = g.input(Tensor::vector(vec![1.0, 0.0]));
        assert!(g.softmax_temp_probs(p, 0.0).is_err());
        assert!(g.softmax_temp_logits(p, -1.0).is_err());
    }

    #[test]
    fn cross_entropy_known_values() {
        let mut g = Graph::new();
        let p = g.input(Tensor::vector(vec![1.0, 0.0, 0.0]));
        let t = Tensor::vector(vec![1.0, 0.0, 0.0]);
        let l = g.cross_entropy(p, &t).unwrap();
        assert_eq!(g.value(l).item(), 0.0);

        let mut g = Graph::new();
        let p = g.input(Tensor::vector(vec![0.5, 0.5]));
        let t = Tensor::vector(vec![0.0, 1.0]);
        let l = g.cross_entropy(p, &t).unwrap();
        assert!((g.value(l).item() - std::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn cross_entropy_rejects_non_onehot() {
        let mut g = Graph::new();
        let p = g.input(Tensor::vector(vec![0.5, 0.5]));
        let t = Tensor::vector(vec![0.5, 0.5]);
        assert!(g.cross_entropy(p, &t).is_err());
    }

    #[test]
    fn distillation_loss_trivial_cases() {
        // matching uniform distributions: entropy of uniform = ln 2
        let mut g = Graph::new();
        let p = g.input(Tensor::vector(vec![0.5, 0.5]));
        let rec = Tensor::vector(vec![0.5, 0.5]);
        let l = g.distillation_loss(p, &rec, 3.7).unwrap();
        assert!((g.value(l).item() - std::f64::consts::LN_2).abs() < 1e-12);

        // theta = 2 hand value for p = p* = [0.9, 0.1]
        let mut g = Graph::new();
        let p = g.input(Tensor::vector(vec![0.9, 0.1]));
        let rec = Tensor::vector(vec![0.9, 0.1]);
        let l = g.distillation_loss(p, &rec, 2.0).unwrap();
        let expect = -(0.75f64 * 0.75f64.ln() + 0.25 * 0.25f64.ln());
        assert!((g.value(l).item() - expect).abs() < 1e-12);
        assert!((g.value(l).item() - 0.562335).abs() < 1e-6);
    }

    #[test]
    fn distillation_rejects_unnormalized() {
        let mut g = Graph::new();
        let p = g.input(Tensor::vector(vec![0.9, 0.3]));
        let rec = Tensor::vector(vec![0.5, 0.5]);
        let err = g.distillation_loss(p, &rec, 2.0).unwrap_err();
        assert!(err.to_string().contains("p_current"), "{err}");

        let mut g = Graph::new();
        let p = g.input(Tensor::vector(vec![0.5, 0.5]));
        let rec = Tensor::vector(vec![0.9, 0.3]);
        let err = g.distillation_loss(p, &rec, 2.0).unwrap_err();
        assert!(err.to_string().contains("p_recorded"), "{err}");
    }

    #[test]
    fn distillation_gradient_does_not_touch_recorded_node() {
        let mut store = ParamStore::new();
        let mut g = Graph::new();
        let p = g.input(Tensor::vector(vec![0.7, 0.3]));
        let rec_node = g.input(Tensor::vector(vec![0.6, 0.4]));
        let rec = g.value(rec_node).clone();
        let l = g.distillation_loss(p, &rec, 2.0).unwrap();
        let grads = g.backward(l, &mut store).unwrap();
        assert!(grads.get(rec_node).is_none());
        assert!(grads.get(p).is_some());
    }

    #[test]
    fn squared_l2_half_examples() {
        let mut g = Graph::new();
        let a = g.input(Tensor::vector(vec![1.0, 0.0]));
        let b = g.input(Tensor::vector(vec![0.0, 0.0]));
        let l = g.squared_l2_half(a, b).unwrap();
        assert_eq!(g.value(l).item(), 0.5);

        let mut g = Graph::new();
        let a = g.input(Tensor::vector(vec![1.0, 2.0, 3.0]));
        let b = g.input(Tensor::vector(vec![1.0, 2.0, 3.0]));
        let l = g.squared_l2_half(a, b).unwrap();
        assert_eq!(g.value(l).item(), 0.0);
    }

    #[test]
    fn backward_of_half_norm_yields_value() {
        // loss = 1/2 ||x||^2 with x a 3-element parameter: grad equals x
        let mut store = ParamStore::new();
        let w = store.add(
            "w",
            Tensor::matrix(3, 3, {
                let mut id = vec![0.0; 9];
                id[0] = 1.0;
                id[4] = 1.0;
                id[8] = 1.0;
                id
            })
            .unwrap(),
        );
        let b = store.add("b", Tensor::vector(glorot_vec(3, 5)));
        let mut g = Graph::new();
        let zero_in = g.input(Tensor::vector(vec![0.0; 3]));
        let x = g.affine(&store, zero_in, w, b).unwrap(); // x = b
        let z = g.input(Tensor::vector(vec![0.0; 3]));
        let loss = g.squared_l2_half(x, z).unwrap();
        g.backward(loss, &mut store).unwrap();
        let bp = store.get(b);
        for (gv, v) in bp.grad.data().iter().zip(bp.value.data()) {
            assert!((gv - v).abs() < 1e-15);
        }
    }

    #[test]
    fn backward_is_linear_over_summed_losses() {
        let build = |g: &mut Graph, store: &ParamStore, w, b| {
            let x = g.input(Tensor::vector(vec![0.3, -0.7]));
            let h = g.affine(store, x, w, b).unwrap();
            let y = g.sigmoid(h);
            let z = g.input(Tensor::vector(vec![0.0, 0.0]));
            g.squared_l2_half(y, z).unwrap()
        };
        let mut store = ParamStore::new();
        let w = store.add("w", Tensor::matrix(2, 2, glorot_vec(4, 11)).unwrap());
        let b = store.add("b", Tensor::vector(glorot_vec(2, 13)));

        // two losses summed in one graph
        let mut g = Graph::new();
        let l1 = build(&mut g, &store, w, b);
        let l2 = build(&mut g, &store, w, b);
        let total = g.sum_scalars(vec![l1, l2]).unwrap();
        store.zero_grads();
        g.backward(total, &mut store).unwrap();
        let combined: Vec<f64> = store.get(w).grad.data().to_vec();

        // individual backwards accumulated
        store.zero_grads();
        let mut g1 = Graph::new();
        let l = build(&mut g1, &store, w, b);
        g1.backward(l, &mut store).unwrap();
        let mut g2 = Graph::new();
        let l = build(&mut g2, &store, w, b);
        g2.backward(l, &mut store).unwrap();
        let separate: Vec<f64> = store.get(w).grad.data().to_vec();

        for (c, s) in combined.iter().zip(&separate) {
            assert!((c - s).abs() < 1e-15, "{c} vs {s}");
        }
    }

    #[test]
    fn backward_on_non_scalar_is_contract_error() {
        let mut store = ParamStore::new();
        let mut g = Graph::new();
        let x = g.input(Tensor::vector(vec![1.0, 2.0]));
        let y = g.relu(x);
        let err = g.backward(y, &mut store).unwrap_err();
        assert!(matches!(err, Error::Contract(_)));
    }

    #[test]
    fn frozen_parameters_receive_no_gradient() {
        let mut store = ParamStore::new();
        let w = store.add("w", Tensor::matrix(2, 2, glorot_vec(4, 3)).unwrap());
        let b = store.add("b", Tensor::vector(glorot_vec(2, 4)));
        store.set_frozen(w, true);
        let mut g = Graph::new();
        let x = g.input(Tensor::vector(vec![1.0, -1.0]));
        let h = g.affine(&store, x, w, b).unwrap();
        let z = g.input(Tensor::vector(vec![0.0, 0.0]));
        let loss = g.squared_l2_half(h, z).unwrap();
        g.backward(loss, &mut store).unwrap();
        assert!(store.get(w).grad.data().iter().all(|&v| v == 0.0));
        assert!(store.get(b).grad.data().iter().any(|&v| v != 0.0));
    }

    #[test]
    fn forward_backward_is_deterministic() {
        let run = || {
            let mut store = ParamStore::new();
            let w = store.add("w", Tensor::matrix(4, 3, glorot_vec(12, 21)).unwrap());
            let b = store.add("b", Tensor::vector(glorot_vec(4, 22)));
            let mut g = Graph::new();
            let x = g.input(Tensor::vector(vec![0.1, -0.2, 0.3]));
            let h = g.affine(&store, x, w, b).unwrap();
            let a = g.relu(h);
            let p = g.softmax_temp_logits(a, 1.0).unwrap();
            let t = Tensor::vector(vec![0.0, 1.0, 0.0, 0.0]);
            let l = g.cross_entropy(p, &t).unwrap();
            g.backward(l, &mut store).unwrap();
            (g.value(l).item().to_bits(), store.get(w).grad.bits_checksum())
        };
        assert_eq!(run(), run());
    }
}
