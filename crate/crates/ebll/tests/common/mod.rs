//! Shared test utilities: the central finite-difference gradient oracle and
//! small config builders.

#![allow(dead_code)]

use ebll::config::RunConfig;
use ebll::graph::{Graph, NodeId, ParamStore};

/// Central finite differences of a scalar-loss builder with respect to every
/// non-frozen parameter element, compared against the recorded backward
/// pass. Returns the maximum relative error
/// `|autodiff - fd| / (|fd| + 1e-8)`.
///
/// The oracle re-evaluates the forward map only; it never touches the
/// adjoint path it checks.
pub fn max_grad_rel_error<F>(store: &mut ParamStore, build: F, step: f64) -> f64
where
    F: Fn(&mut Graph, &ParamStore) -> NodeId,
{
    store.zero_grads();
    let mut g = Graph::new();
    let loss = build(&mut g, store);
    g.backward(loss, store).expect("backward");
    let auto: Vec<(usize, Vec<f64>)> = store
        .iter()
        .filter(|(_, p)| !p.frozen)
        .map(|(id, p)| {
            let _ = id;
            (p.value.len(), p.grad.data().to_vec())
        })
        .collect();

    let eval = |store: &ParamStore| -> f64 {
        let mut g = Graph::new();
        let loss = build(&mut g, store);
        g.value(loss).item()
    };

    let mut max_rel: f64 = 0.0;
    let param_ids: Vec<_> = store
        .iter()
        .filter(|(_, p)| !p.frozen)
        .map(|(id, _)| id)
        .collect();
    for (k, id) in param_ids.iter().enumerate() {
        for i in 0..auto[k].0 {
            let original = store.get(*id).value.data()[i];
            store.get_mut(*id).value.data_mut()[i] = original + step;
            let plus = eval(store);
            store.get_mut(*id).value.data_mut()[i] = original - step;
            let minus = eval(store);
            store.get_mut(*id).value.data_mut()[i] = original;
            let fd = (plus - minus) / (2.0 * step);
            let rel = (auto[k].1[i] - fd).abs() / (fd.abs() + 1e-8);
            max_rel = max_rel.max(rel);
        }
    }
    max_rel
}

/// A fast synthetic configuration for integration tests: small model, few
/// samples, few epochs. Trains in well under a second.
pub fn tiny_config(name: &str, tasks: usize, seed: u64) -> RunConfig {
    let mut cfg = RunConfig::benchmark(name, tasks, seed);
    cfg.model.feature_widths = vec![16, 16];
    cfg.model.shared_widths = vec![8];
    cfg.data.input_dim = 8;
    cfg.data.class_count = 3;
    cfg.data.train_per_class = 30;
    cfg.data.test_per_class = 15;
    cfg.training.epochs_per_task = 6;
    cfg.training.batch_size = 16;
    cfg.optim.lr_drop_epoch = Some(4);
    cfg.augment.factor = 2;
    cfg.autoencoder.code_dim = Some(2);
    cfg.autoencoder.max_epochs = 12;
    cfg.autoencoder.stop_window = 3;
    cfg.analysis.drift_reference_size = 30;
    cfg.analysis.contractiveness_trials = 10;
    cfg.analysis.samples_per_trial = 10;
    cfg
}
