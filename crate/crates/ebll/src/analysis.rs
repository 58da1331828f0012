//! Diagnostic experiments over frozen models: contractiveness of the feature
//! map and the autoencoder, representation drift, and the decomposition of
//! the feature-distance bound into its five measurable terms.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::autoencoder::Autoencoder;
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::model::{FrozenSnapshot, TaskModel};
use crate::parallel;
use crate::seeds::{self, tag};
use crate::tensor::Tensor;

/// Gaussian input regimes for the contractiveness experiment: per-dimension
/// means uniform in the regime's range, one variance per distribution
/// uniform in [0.5, 1.5].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SpreadRegime {
    Near,
    Far,
}

impl SpreadRegime {
    pub fn name(self) -> &'static str {
        match self {
            SpreadRegime::Near => "near",
            SpreadRegime::Far => "far",
        }
    }

    fn mean_range(self) -> f64 {
        match self {
            SpreadRegime::Near => 1.0,
            SpreadRegime::Far => 10.0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct ContractivenessReport {
    pub regime: SpreadRegime,
    pub trials: usize,
    pub mean_mse_samples: f64,
    pub se_samples: f64,
    pub mean_mse_features: f64,
    pub se_features: f64,
    pub mean_mse_reconstructions: f64,
    pub se_reconstructions: f64,
}

/// Cap on cross pairs per trial.
const MAX_PAIRS: usize = 2_500;

/// Per trial: draw two Gaussian input distributions, sample both groups,
/// and measure the mean pairwise MSE between the groups at the sample level,
/// after the frozen feature extractor, and after the autoencoder
/// reconstruction. Means and standard errors are over trials.
pub fn contractiveness_experiment(
    snapshot: &FrozenSnapshot,
    ae: &Autoencoder,
    trials: usize,
    samples_per_trial: usize,
    regime: SpreadRegime,
    seed: u64,
) -> Result<ContractivenessReport> {
    if trials < 2 {
        return Err(Error::InvalidArgument(format!(
            "contractiveness needs at least 2 trials, got {trials}"
        )));
    }
    if samples_per_trial == 0 {
        return Err(Error::InvalidArgument("samples_per_trial must be positive".into()));
    }
    let trial_ids: Vec<u64> = (0..trials as u64).collect();
    let outcomes: Vec<Result<(f64, f64, f64)>> = parallel::map_collect(&trial_ids, |&t| {
        let trial_seed = seeds::derive(seed, &[tag::ANALYSIS_TRIAL, regime.mean_range() as u64, t]);
        let mut rng = seeds::rng(trial_seed);
        let d = snapshot.input_dim();
        let group_a = sample_group(&mut rng, d, samples_per_trial, regime);
        let group_b = sample_group(&mut rng, d, samples_per_trial, regime);
        pairwise_mse_levels(snapshot, ae, &group_a, &group_b)
    });
    let mut per_trial = Vec::with_capacity(trials);
    for o in outcomes {
        per_trial.push(o?);
    }
    let (mean_s, se_s) = mean_and_se(per_trial.iter().map(|t| t.0));
    let (mean_f, se_f) = mean_and_se(per_trial.iter().map(|t| t.1));
    let (mean_r, se_r) = mean_and_se(per_trial.iter().map(|t| t.2));
    Ok(ContractivenessReport {
        regime,
        trials,
        mean_mse_samples: mean_s,
        se_samples: se_s,
        mean_mse_features: mean_f,
        se_features: se_f,
        mean_mse_reconstructions: mean_r,
        se_reconstructions: se_r,
    })
}

fn sample_group(
    rng: &mut rand_chacha::ChaCha8Rng,
    dim: usize,
    count: usize,
    regime: SpreadRegime,
) -> Vec<Tensor> {
    let r = regime.mean_range();
    let mean: Vec<f64> = (0..dim).map(|_| rng.gen_range(-r..=r)).collect();
    let variance: f64 = rng.gen_range(0.5..=1.5);
    let std = variance.sqrt();
    (0..count)
        .map(|_| {
            Tensor::vector(
                mean.iter()
                    .map(|&m| m + std * <StandardNormal as Distribution<f64>>::sample(&StandardNormal, rng))
                    .collect(),
            )
        })
        .collect()
}

/// Mean pairwise MSE between two groups at the sample, feature, and
/// reconstruction levels. MSE of a pair is the mean over dimensions of the
/// squared differences; pairs are enumerated in order and capped.
pub fn pairwise_mse_levels(
    snapshot: &FrozenSnapshot,
    ae: &Autoencoder,
    group_a: &[Tensor],
    group_b: &[Tensor],
) -> Result<(f64, f64, f64)> {
    let feats_a: Vec<Tensor> = group_a
        .iter()
        .map(|x| snapshot.features_value(x))
        .collect::<Result<_>>()?;
    let feats_b: Vec<Tensor> = group_b
        .iter()
        .map(|x| snapshot.features_value(x))
        .collect::<Result<_>>()?;
    let recs_a: Vec<Tensor> = feats_a
        .iter()
        .map(|f| ae.reconstruct_value(f))
        .collect::<Result<_>>()?;
    let recs_b: Vec<Tensor> = feats_b
        .iter()
        .map(|f| ae.reconstruct_value(f))
        .collect::<Result<_>>()?;

    let mut sums = (0.0, 0.0, 0.0);
    let mut pairs = 0usize;
    'outer: for i in 0..group_a.len() {
        for j in 0..group_b.len() {
            sums.0 += mse(&group_a[i], &group_b[j]);
            sums.1 += mse(&feats_a[i], &feats_b[j]);
            sums.2 += mse(&recs_a[i], &recs_b[j]);
            pairs += 1;
            if pairs >= MAX_PAIRS {
                break 'outer;
            }
        }
    }
    let n = pairs as f64;
    Ok((sums.0 / n, sums.1 / n, sums.2 / n))
}

fn mse(a: &Tensor, b: &Tensor) -> f64 {
    a.squared_distance(b) / a.len() as f64
}

fn mean_and_se(values: impl Iterator<Item = f64> + Clone) -> (f64, f64) {
    let n = values.clone().count() as f64;
    let mean = values.clone().sum::<f64>() / n;
    if n < 2.0 {
        return (mean, 0.0);
    }
    let var = values.map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

/// Mean squared l2 distance between the model's current features and the
/// snapshot features over a reference set.
pub fn feature_drift(
    model: &TaskModel,
    snapshot: &FrozenSnapshot,
    reference: &[Tensor],
) -> Result<f64> {
    if reference.is_empty() {
        return Err(Error::EmptyDataset("drift reference set".into()));
    }
    let dists: Vec<Result<f64>> = parallel::map_collect(reference, |x| {
        let now = model.features_value(x)?;
        let then = snapshot.features_value(x)?;
        if now.shape() != then.shape() {
            return Err(Error::ShapeMismatch {
                context: "feature drift".into(),
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
    Ok(sum / reference.len() as f64)
}

/// The five measurable terms bounding the feature distance between the old
/// task's data and the new task's data. Each is a mean l2 norm; the two
/// cross-set terms pair samples by index.
#[derive(Debug, Clone, Copy)]
pub struct BoundTerms {
    /// Mean ||F(x1) - F*(x1)||: drift of the old data's features.
    pub feature_drift_x1: f64,
    /// Mean ||F*(x1) - r(F*(x1))||: autoencoder residual on old features.
    pub ae_residual_x1: f64,
    /// Mean ||r(F*(x1)) - r(F*(x2))||: reconstruction gap across datasets.
    pub recon_gap_x1_x2: f64,
    /// Mean ||r(F*(x2)) - r(F(x2))||: the term the code loss controls.
    pub recon_drift_x2: f64,
    /// Mean ||r(F(x2)) - F(x2)||: autoencoder residual on new features.
    pub ae_residual_x2: f64,
}

impl BoundTerms {
    pub fn named(&self) -> [(&'static str, f64); 5] {
        [
            ("feature_drift_x1", self.feature_drift_x1),
            ("ae_residual_x1", self.ae_residual_x1),
            ("recon_gap_x1_x2", self.recon_gap_x1_x2),
            ("recon_drift_x2", self.recon_drift_x2),
            ("ae_residual_x2", self.ae_residual_x2),
        ]
    }
}

pub fn bound_decomposition(
    model: &TaskModel,
    snapshot: &FrozenSnapshot,
    ae: &Autoencoder,
    x1_set: &Dataset,
    x2_set: &Dataset,
) -> Result<BoundTerms> {
    if x1_set.is_empty() || x2_set.is_empty() {
        return Err(Error::EmptyDataset("bound decomposition inputs".into()));
    }

    let norm = |a: &Tensor, b: &Tensor| a.squared_distance(b).sqrt();

    // per-sample terms on x1
    let x1_terms: Vec<Result<(f64, f64, Tensor)>> =
        parallel::map_collect(&x1_set.samples, |s| {
            let f_now = model.features_value(&s.x)?;
            let f_star = snapshot.features_value(&s.x)?;
            let rec_star = ae.reconstruct_value(&f_star)?;
            Ok((norm(&f_now, &f_star), norm(&f_star, &rec_star), rec_star))
        });
    // per-sample terms on x2
    let x2_terms: Vec<Result<(f64, f64, Tensor)>> =
        parallel::map_collect(&x2_set.samples, |s| {
            let f_now = model.features_value(&s.x)?;
            let f_star = snapshot.features_value(&s.x)?;
            let rec_star = ae.reconstruct_value(&f_star)?;
            let rec_now = ae.reconstruct_value(&f_now)?;
            Ok((norm(&rec_star, &rec_now), norm(&rec_now, &f_now), rec_star))
        });

    let mut drift_x1 = 0.0;
    let mut resid_x1 = 0.0;
    let mut recs_x1 = Vec::with_capacity(x1_set.len());
    for t in x1_terms {
        let (d, r, rec) = t?;
        drift_x1 += d;
        resid_x1 += r;
        recs_x1.push(rec);
    }
    let mut drift_rec_x2 = 0.0;
    let mut resid_x2 = 0.0;
    let mut recs_x2 = Vec::with_capacity(x2_set.len());
    for t in x2_terms {
        let (d, r, rec) = t?;
        drift_rec_x2 += d;
        resid_x2 += r;
        recs_x2.push(rec);
    }

    // cross-set reconstruction gap, paired by index
    let paired = recs_x1.len().min(recs_x2.len());
    let mut gap = 0.0;
    for i in 0..paired {
        gap += norm(&recs_x1[i], &recs_x2[i]);
    }

    Ok(BoundTerms {
        feature_drift_x1: drift_x1 / x1_set.len() as f64,
        ae_residual_x1: resid_x1 / x1_set.len() as f64,
        recon_gap_x1_x2: gap / paired as f64,
        recon_drift_x2: drift_rec_x2 / x2_set.len() as f64,
        ae_residual_x2: resid_x2 / x2_set.len() as f64,
    })
}

/// Mean pairwise sample-level l2 distance between two datasets, paired by
/// index; the comparison line for the cross-set reconstruction gap.
pub fn mean_sample_distance(x1_set: &Dataset, x2_set: &Dataset) -> f64 {
    let paired = x1_set.len().min(x2_set.len());
    let mut sum = 0.0;
    for i in 0..paired {
        sum += x1_set.samples[i]
            .x
            .squared_distance(&x2_set.samples[i].x)
            .sqrt();
    }
    sum / paired as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::TaskId;
    use crate::model::{ArchSpec, TaskModel};

    fn fixture() -> (TaskModel, FrozenSnapshot, Autoencoder) {
        let arch = ArchSpec {
            input_dim: 6,
            feature_widths: vec![8, 8],
            shared_widths: vec![4],
            head_hidden: vec![],
        };
        let mut m = TaskModel::new(&arch, 11).unwrap();
        m.add_head(TaskId(0), 3, 11).unwrap();
        let snap = m.snapshot();
        let ae = Autoencoder::new(8, 2, 13).unwrap();
        (m, snap, ae)
    }

    #[test]
    fn degenerate_identical_groups_have_zero_mse() {
        let (_, snap, ae) = fixture();
        let point = Tensor::vector(vec![0.3; 6]);
        let group: Vec<Tensor> = (0..4).map(|_| point.clone()).collect();
        let (s, f, r) = pairwise_mse_levels(&snap, &ae, &group, &group).unwrap();
        assert_eq!(s, 0.0);
        assert_eq!(f, 0.0);
        assert_eq!(r, 0.0);
    }

    #[test]
    fn experiment_is_deterministic_and_regimes_ordered() {
        let (_, snap, ae) = fixture();
        let near =
            contractiveness_experiment(&snap, &ae, 8, 10, SpreadRegime::Near, 5).unwrap();
        let near2 =
            contractiveness_experiment(&snap, &ae, 8, 10, SpreadRegime::Near, 5).unwrap();
        assert_eq!(near.mean_mse_samples.to_bits(), near2.mean_mse_samples.to_bits());

        let far = contractiveness_experiment(&snap, &ae, 8, 10, SpreadRegime::Far, 5).unwrap();
        assert!(
            far.mean_mse_samples > near.mean_mse_samples,
            "far regime must spread samples more: {} vs {}",
            far.mean_mse_samples,
            near.mean_mse_samples
        );
    }

    #[test]
    fn too_few_trials_rejected() {
        let (_, snap, ae) = fixture();
        assert!(contractiveness_experiment(&snap, &ae, 1, 5, SpreadRegime::Near, 1).is_err());
    }

    #[test]
    fn drift_zero_for_identical_models() {
        let (m, snap, _) = fixture();
        let refs: Vec<Tensor> = (0..5)
            .map(|i| Tensor::vector(vec![i as f64 * 0.1; 6]))
            .collect();
        let d = feature_drift(&m, &snap, &refs).unwrap();
        assert_eq!(d, 0.0);
    }

    #[test]
    fn bound_terms_vanish_when_model_equals_snapshot() {
        let (m, snap, ae) = fixture();
        let mk_ds = |task: u32| {
            let samples: Vec<crate::data::Sample> = (0..6)
                .map(|i| crate::data::Sample {
                    id: crate::data::sample_id(TaskId(task), i, 0),
                    orig_index: i,
                    variant: 0,
                    x: Tensor::vector((0..6).map(|d| (i as f64 - d as f64) * 0.2).collect()),
                    label: (i % 3) as usize,
                })
                .collect();
            Dataset {
                task: TaskId(task),
                class_count: 3,
                input_dim: 6,
                split: crate::data::Split::Test,
                samples,
            }
        };
        let x1 = mk_ds(0);
        let x2 = mk_ds(1);
        let terms = bound_decomposition(&m, &snap, &ae, &x1, &x2).unwrap();
        assert_eq!(terms.feature_drift_x1, 0.0);
        assert_eq!(terms.recon_drift_x2, 0.0);
        assert!(terms.ae_residual_x1 > 0.0);
    }

    #[test]
    fn perfect_autoencoder_zeroes_residual_term() {
        let (m, snap, _) = fixture();
        // identical constant feature for every input of this set
        let x = Tensor::vector(vec![0.25; 6]);
        let feat = snap.features_value(&x).unwrap();
        let mut ae = Autoencoder::new(8, 2, 3).unwrap();
        // zero encoder -> code 0.5; decoder bias set to reproduce this feature
        for (_, p) in ae_store_mut(&mut ae).iter_mut() {
            p.value.fill(0.0);
        }
        let dec_b = ae_store_mut(&mut ae)
            .iter()
            .map(|(id, p)| (id, p.name.clone()))
            .find(|(_, n)| n == "dec.b")
            .map(|(id, _)| id)
            .unwrap();
        ae_store_mut(&mut ae).get_mut(dec_b).value = feat.clone();

        let ds = Dataset {
            task: TaskId(0),
            class_count: 3,
            input_dim: 6,
            split: crate::data::Split::Test,
            samples: vec![crate::data::Sample {
                id: crate::data::sample_id(TaskId(0), 0, 0),
                orig_index: 0,
                variant: 0,
                x: x.clone(),
                label: 0,
            }],
        };
        let terms = bound_decomposition(&m, &snap, &ae, &ds, &ds).unwrap();
        assert!(terms.ae_residual_x1.abs() < 1e-12);
    }

    fn ae_store_mut(ae: &mut Autoencoder) -> &mut crate::graph::ParamStore {
        ae.store_mut_for_tests()
    }
}
