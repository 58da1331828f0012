//! Task generation, augmentation and batching.
//!
//! Every operation here is a pure function of its inputs and declared seeds;
//! augmentation in particular is a fixed enumerated set per sample so that
//! recorded targets and codes stay consistent with what training replays.

#[cfg(feature = "idx")]
pub mod idx;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seeds::{self, tag};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct TaskId(pub u32);

impl std::fmt::Display for TaskId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "task{}", self.0)
    }
}

/// Stable 64-bit identifier of one (possibly augmented) sample, derived from
/// (task, original index, augmentation variant) so that memory lookups
/// survive shuffling.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct SampleId(pub u64);

impl std::fmt::Display for SampleId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{:016x}", self.0)
    }
}

pub fn sample_id(task: TaskId, orig_index: u32, variant: u32) -> SampleId {
    let mut h = seeds::splitmix64(0x5351_4d50_4c45 ^ task.0 as u64);
    h = seeds::splitmix64(h ^ orig_index as u64);
    h = seeds::splitmix64(h ^ ((variant as u64) << 32));
    SampleId(h)
}

#[derive(Debug, Clone)]
pub struct Sample {
    pub id: SampleId,
    pub orig_index: u32,
    pub variant: u32,
    pub x: Tensor,
    pub label: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Test,
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub task: TaskId,
    pub class_count: usize,
    pub input_dim: usize,
    pub split: Split,
    pub samples: Vec<Sample>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }
}

/// Train and test splits of one task.
#[derive(Debug, Clone)]
pub struct TaskData {
    pub task: TaskId,
    pub class_count: usize,
    pub input_dim: usize,
    pub train: Dataset,
    pub test: Dataset,
}

// ---------------------------------------------------------------------------
// Synthetic task sequences
// ---------------------------------------------------------------------------

/// Gaussian-cluster classification task. Tasks after the first interpolate
/// their class means between the previous task's means and a seeded random
/// rotation+shift of them; `relatedness = 1` reproduces the previous means
/// exactly.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticSpec {
    pub input_dim: usize,
    pub class_count: usize,
    pub train_per_class: usize,
    pub test_per_class: usize,
    pub cluster_spread: f64,
    pub relatedness: f64,
    pub rng_seed: u64,
}

const MEAN_SCALE: f64 = 2.0;
const SHIFT_SCALE: f64 = 5.0;

pub fn gen_synthetic_sequence(specs: &[SyntheticSpec]) -> Result<Vec<TaskData>> {
    if specs.is_empty() {
        return Err(Error::InvalidArgument("no synthetic task specs given".into()));
    }
    for (i, s) in specs.iter().enumerate() {
        if s.train_per_class < 1 || s.test_per_class < 1 {
            return Err(Error::InvalidArgument(format!(
                "task {i}: samples_per_class too small to split into train/test \
                 (train={}, test={})",
                s.train_per_class, s.test_per_class
            )));
        }
        if s.input_dim != specs[0].input_dim {
            return Err(Error::InvalidArgument(format!(
                "task {i}: input_dim {} differs from task 0's {}",
                s.input_dim, specs[0].input_dim
            )));
        }
        if !(0.0..=1.0).contains(&s.relatedness) {
            return Err(Error::InvalidArgument(format!(
                "task {i}: relatedness {} outside [0, 1]",
                s.relatedness
            )));
        }
        if s.cluster_spread < 0.0 {
            return Err(Error::InvalidArgument(format!(
                "task {i}: cluster_spread {} negative",
                s.cluster_spread
            )));
        }
        if s.class_count < 2 {
            return Err(Error::InvalidArgument(format!(
                "task {i}: class_count must be at least 2",
                )));
        }
    }

    let d = specs[0].input_dim;
    let mut tasks = Vec::with_capacity(specs.len());
    let mut prev_means: Vec<Vec<f64>> = Vec::new();

    for (i, spec) in specs.iter().enumerate() {
        let means = if i == 0 {
            fresh_means(spec, d)
        } else {
            derived_means(spec, &prev_means, d)
        };
        tasks.push(sample_task(TaskId(i as u32), spec, &means, d));
        prev_means = means;
    }
    Ok(tasks)
}

fn fresh_means(spec: &SyntheticSpec, d: usize) -> Vec<Vec<f64>> {
    let mut rng = seeds::rng(seeds::derive(spec.rng_seed, &[tag::DATA_MEANS]));
    (0..spec.class_count)
        .map(|_| {
            (0..d)
                .map(|_| MEAN_SCALE * <StandardNormal as Distribution<f64>>::sample(&StandardNormal, &mut rng))
                .collect()
        })
        .collect()
}

fn derived_means(spec: &SyntheticSpec, prev: &[Vec<f64>], d: usize) -> Vec<Vec<f64>> {
    if spec.relatedness == 1.0 {
        // exact endpoint: reproduce the base means bit for bit
        let mut means: Vec<Vec<f64>> = prev.to_vec();
        adjust_class_count(spec, &mut means, d);
        return means;
    }
    let seed = seeds::derive(spec.rng_seed, &[tag::DATA_ROTATION]);
    let mut rng = seeds::rng(seed);
    let rot = random_orthogonal(d, &mut rng);
    let shift: Vec<f64> = (0..d)
        .map(|_| SHIFT_SCALE * <StandardNormal as Distribution<f64>>::sample(&StandardNormal, &mut rng))
        .collect();
    let rel = spec.relatedness;
    let mut means: Vec<Vec<f64>> = prev
        .iter()
        .map(|m| {
            let rotated = mat_apply(&rot, m);
            m.iter()
                .zip(&rotated)
                .zip(&shift)
                .map(|((mi, ri), si)| rel * mi + (1.0 - rel) * (ri + si))
                .collect()
        })
        .collect();
    adjust_class_count(spec, &mut means, d);
    means
}

fn adjust_class_count(spec: &SyntheticSpec, means: &mut Vec<Vec<f64>>, d: usize) {
    means.truncate(spec.class_count);
    if means.len() < spec.class_count {
        let mut rng = seeds::rng(seeds::derive(spec.rng_seed, &[tag::DATA_MEANS, 0xfeed]));
        while means.len() < spec.class_count {
            means.push(
                (0..d)
                    .map(|_| MEAN_SCALE * <StandardNormal as Distribution<f64>>::sample(&StandardNormal, &mut rng))
                    .collect(),
            );
        }
    }
}

/// Random orthogonal matrix via Gram-Schmidt on a Gaussian matrix,
/// row-major `d x d`.
fn random_orthogonal(d: usize, rng: &mut impl Rng) -> Vec<f64> {
    let mut rows: Vec<Vec<f64>> = (0..d)
        .map(|_| {
            (0..d)
                .map(|_| <StandardNormal as Distribution<f64>>::sample(&StandardNormal, rng))
                .collect()
        })
        .collect();
    for i in 0..d {
        for j in 0..i {
            let dot: f64 = rows[i].iter().zip(&rows[j]).map(|(a, b)| a * b).sum();
            let rj = rows[j].clone();
            for (a, b) in rows[i].iter_mut().zip(&rj) {
                *a -= dot * b;
            }
        }
        let norm: f64 = rows[i].iter().map(|v| v * v).sum::<f64>().sqrt();
        let norm = if norm < 1e-12 { 1.0 } else { norm };
        for v in rows[i].iter_mut() {
            *v /= norm;
        }
    }
    let mut flat = Vec::with_capacity(d * d);
    for r in rows {
        flat.extend(r);
    }
    flat
}

fn mat_apply(m: &[f64], v: &[f64]) -> Vec<f64> {
    let d = v.len();
    (0..d)
        .map(|r| m[r * d..(r + 1) * d].iter().zip(v).map(|(a, b)| a * b).sum())
        .collect()
}

fn sample_task(task: TaskId, spec: &SyntheticSpec, means: &[Vec<f64>], d: usize) -> TaskData {
    let mut rng = seeds::rng(seeds::derive(
        spec.rng_seed,
        &[tag::DATA_SAMPLES, task.0 as u64],
    ));
    let mut train = Vec::with_capacity(spec.class_count * spec.train_per_class);
    let mut test = Vec::with_capacity(spec.class_count * spec.test_per_class);
    let mut orig_index: u32 = 0;
    for (label, mean) in means.iter().enumerate() {
        for k in 0..(spec.train_per_class + spec.test_per_class) {
            let x: Vec<f64> = mean
                .iter()
                .map(|&m| m + spec.cluster_spread * <StandardNormal as Distribution<f64>>::sample(&StandardNormal, &mut rng))
                .collect();
            let s = Sample {
                id: sample_id(task, orig_index, 0),
                orig_index,
                variant: 0,
                x: Tensor::vector(x),
                label,
            };
            if k < spec.train_per_class {
                train.push(s);
            } else {
                test.push(s);
            }
            orig_index += 1;
        }
    }
    TaskData {
        task,
        class_count: spec.class_count,
        input_dim: d,
        train: Dataset {
            task,
            class_count: spec.class_count,
            input_dim: d,
            split: Split::Train,
            samples: train,
        },
        test: Dataset {
            task,
            class_count: spec.class_count,
            input_dim: d,
            split: Split::Test,
            samples: test,
        },
    }
}

// ---------------------------------------------------------------------------
// Offline augmentation
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AugmentMode {
    /// Additive seeded jitter of fixed magnitude, uniform per coordinate.
    Jitter,
    /// Mirror-flip of contiguous coordinate blocks selected by the variant's
    /// bit pattern.
    MirrorBlocks,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AugmentSpec {
    #[serde(default = "default_factor")]
    pub factor: u32,
    #[serde(default = "default_mode")]
    pub mode: AugmentMode,
    #[serde(default = "default_jitter")]
    pub jitter_magnitude: f64,
    #[serde(default = "default_blocks")]
    pub mirror_blocks: usize,
}

fn default_factor() -> u32 {
    10
}
fn default_mode() -> AugmentMode {
    AugmentMode::Jitter
}
fn default_jitter() -> f64 {
    0.05
}
fn default_blocks() -> usize {
    4
}

impl Default for AugmentSpec {
    fn default() -> Self {
        Self {
            factor: default_factor(),
            mode: default_mode(),
            jitter_magnitude: default_jitter(),
            mirror_blocks: default_blocks(),
        }
    }
}

/// Expands each sample into `factor` deterministic variants; variant 0 is
/// always the identity and keeps the original sample id.
pub fn augment(ds: &Dataset, spec: &AugmentSpec) -> Dataset {
    let mut samples = Vec::with_capacity(ds.samples.len() * spec.factor as usize);
    for s in &ds.samples {
        for v in 0..spec.factor {
            if v == 0 {
                samples.push(s.clone());
                continue;
            }
            let x = match spec.mode {
                AugmentMode::Jitter => jitter_variant(ds.task, s, v, spec.jitter_magnitude),
                AugmentMode::MirrorBlocks => mirror_variant(s, v, spec.mirror_blocks),
            };
            samples.push(Sample {
                id: sample_id(ds.task, s.orig_index, v),
                orig_index: s.orig_index,
                variant: v,
                x,
                label: s.label,
            });
        }
    }
    Dataset {
        task: ds.task,
        class_count: ds.class_count,
        input_dim: ds.input_dim,
        split: ds.split,
        samples,
    }
}

fn jitter_variant(task: TaskId, s: &Sample, variant: u32, magnitude: f64) -> Tensor {
    let seed = seeds::derive(
        tag::AUGMENT,
        &[task.0 as u64, s.orig_index as u64, variant as u64],
    );
    let mut rng = seeds::rng(seed);
    let x: Vec<f64> = s
        .x
        .data()
        .iter()
        .map(|&v| v + rng.gen_range(-magnitude..=magnitude))
        .collect();
    Tensor::vector(x)
}

fn mirror_variant(s: &Sample, variant: u32, blocks: usize) -> Tensor {
    let blocks = blocks.max(1);
    let mut x = s.x.data().to_vec();
    let d = x.len();
    let base = d / blocks;
    let rem = d % blocks;
    let mut start = 0;
    for b in 0..blocks {
        let len = base + usize::from(b < rem);
        if (variant >> (b % 32)) & 1 == 1 {
            x[start..start + len].reverse();
        }
        start += len;
    }
    Tensor::vector(x)
}

// ---------------------------------------------------------------------------
// Batching
// ---------------------------------------------------------------------------

/// Seeded permutation of sample indices, chunked into batches; the last batch
/// may be short. Every sample appears exactly once.
pub fn batches(n_samples: usize, batch_size: usize, epoch_seed: u64) -> Vec<Vec<usize>> {
    assert!(batch_size >= 1, "batch_size must be at least 1");
    let mut idx: Vec<usize> = (0..n_samples).collect();
    idx.shuffle(&mut seeds::rng(epoch_seed));
    idx.chunks(batch_size).map(|c| c.to_vec()).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::BTreeSet;

    fn spec(seed: u64, relatedness: f64) -> SyntheticSpec {
        SyntheticSpec {
            input_dim: 6,
            class_count: 3,
            train_per_class: 8,
            test_per_class: 4,
            cluster_spread: 0.5,
            relatedness,
            rng_seed: seed,
        }
    }

    #[test]
    fn generation_is_deterministic() {
        let specs = vec![spec(3, 1.0), spec(4, 0.5)];
        let a = gen_synthetic_sequence(&specs).unwrap();
        let b = gen_synthetic_sequence(&specs).unwrap();
        for (ta, tb) in a.iter().zip(&b) {
            for (sa, sb) in ta.train.samples.iter().zip(&tb.train.samples) {
                assert_eq!(sa.x.bits_checksum(), sb.x.bits_checksum());
                assert_eq!(sa.id, sb.id);
            }
        }
    }

    #[test]
    fn relatedness_one_reproduces_base_means() {
        // spread 0 makes every sample equal its class mean
        let mut s0 = spec(9, 1.0);
        s0.cluster_spread = 0.0;
        let mut s1 = s0.clone();
        s1.rng_seed = 77;
        s1.relatedness = 1.0;
        let tasks = gen_synthetic_sequence(&[s0, s1]).unwrap();
        let m0: Vec<_> = tasks[0]
            .train
            .samples
            .iter()
            .map(|s| (s.label, s.x.clone()))
            .collect();
        let m1: Vec<_> = tasks[1]
            .train
            .samples
            .iter()
            .map(|s| (s.label, s.x.clone()))
            .collect();
        for ((l0, x0), (l1, x1)) in m0.iter().zip(&m1) {
            assert_eq!(l0, l1);
            assert_eq!(x0.data(), x1.data());
        }
    }

    #[test]
    fn zero_spread_is_separable_by_nearest_mean() {
        let mut s = spec(11, 1.0);
        s.cluster_spread = 1e-12;
        let tasks = gen_synthetic_sequence(&[s]).unwrap();
        let t = &tasks[0];
        // nearest-mean oracle built from train means
        let mut means = vec![vec![0.0; t.input_dim]; t.class_count];
        let mut counts = vec![0usize; t.class_count];
        for s in &t.train.samples {
            for (m, x) in means[s.label].iter_mut().zip(s.x.data()) {
                *m += x;
            }
            counts[s.label] += 1;
        }
        for (m, c) in means.iter_mut().zip(&counts) {
            for v in m.iter_mut() {
                *v /= *c as f64;
            }
        }
        let mut correct = 0;
        for s in &t.test.samples {
            let pred = means
                .iter()
                .enumerate()
                .min_by(|(_, a), (_, b)| {
                    let da: f64 = a.iter().zip(s.x.data()).map(|(m, x)| (m - x).powi(2)).sum();
                    let db: f64 = b.iter().zip(s.x.data()).map(|(m, x)| (m - x).powi(2)).sum();
                    da.partial_cmp(&db).unwrap()
                })
                .unwrap()
                .0;
            if pred == s.label {
                correct += 1;
            }
        }
        assert_eq!(correct, t.test.samples.len());
    }

    #[test]
    fn too_few_samples_per_class_rejected() {
        let mut s = spec(1, 1.0);
        s.train_per_class = 0;
        assert!(gen_synthetic_sequence(&[s]).is_err());
    }

    #[test]
    fn augment_factor_one_is_identity() {
        let tasks = gen_synthetic_sequence(&[spec(5, 1.0)]).unwrap();
        let ds = &tasks[0].train;
        let out = augment(
            ds,
            &AugmentSpec {
                factor: 1,
                ..AugmentSpec::default()
            },
        );
        assert_eq!(out.len(), ds.len());
        for (a, b) in out.samples.iter().zip(&ds.samples) {
            assert_eq!(a.id, b.id);
            assert_eq!(a.x.data(), b.x.data());
        }
    }

    #[test]
    fn augment_counts_and_determinism() {
        let tasks = gen_synthetic_sequence(&[spec(5, 1.0)]).unwrap();
        let ds = &tasks[0].train;
        let spec10 = AugmentSpec::default();
        assert_eq!(spec10.factor, 10);
        let a = augment(ds, &spec10);
        let b = augment(ds, &spec10);
        assert_eq!(a.len(), 10 * ds.len());
        for (x, y) in a.samples.iter().zip(&b.samples) {
            assert_eq!(x.id, y.id);
            assert_eq!(x.x.data(), y.x.data());
        }
        // ids unique
        let ids: BTreeSet<_> = a.samples.iter().map(|s| s.id).collect();
        assert_eq!(ids.len(), a.len());
    }

    #[test]
    fn jitter_variants_average_back_to_original() {
        let tasks = gen_synthetic_sequence(&[spec(6, 1.0)]).unwrap();
        let ds = &tasks[0].train;
        let spec = AugmentSpec {
            factor: 10,
            mode: AugmentMode::Jitter,
            jitter_magnitude: 0.2,
            mirror_blocks: 4,
        };
        let out = augment(ds, &spec);
        let f = spec.factor as usize;
        let bound = 3.0 * spec.jitter_magnitude / (spec.factor as f64).sqrt();
        for (i, orig) in ds.samples.iter().enumerate() {
            let group = &out.samples[i * f..(i + 1) * f];
            for d in 0..ds.input_dim {
                let mean: f64 = group.iter().map(|s| s.x.data()[d]).sum::<f64>() / f as f64;
                assert!(
                    (mean - orig.x.data()[d]).abs() <= bound,
                    "variant mean drifted beyond 3 sigma"
                );
            }
        }
    }

    #[test]
    fn mirror_blocks_variant_is_deterministic_permutation() {
        let tasks = gen_synthetic_sequence(&[spec(8, 1.0)]).unwrap();
        let ds = &tasks[0].train;
        let spec = AugmentSpec {
            factor: 4,
            mode: AugmentMode::MirrorBlocks,
            jitter_magnitude: 0.0,
            mirror_blocks: 3,
        };
        let out = augment(ds, &spec);
        // every variant preserves the multiset of coordinates
        for (i, orig) in ds.samples.iter().enumerate() {
            for v in 0..4 {
                let s = &out.samples[i * 4 + v];
                let mut a = orig.x.data().to_vec();
                let mut b = s.x.data().to_vec();
                a.sort_by(f64::total_cmp);
                b.sort_by(f64::total_cmp);
                assert_eq!(a, b);
            }
        }
    }

    #[test]
    fn batches_partition_the_dataset() {
        let b = batches(103, 16, 42);
        let mut seen: Vec<usize> = b.iter().flatten().cloned().collect();
        seen.sort_unstable();
        assert_eq!(seen, (0..103).collect::<Vec<_>>());
        assert_eq!(b.last().unwrap().len(), 103 % 16);
        // same seed, same order
        assert_eq!(batches(103, 16, 42), batches(103, 16, 42));
        // single batch when batch_size >= n
        assert_eq!(batches(10, 32, 1).len(), 1);
    }
}
