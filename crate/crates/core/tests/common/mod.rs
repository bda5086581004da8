//! Helpers shared by the integration tests.

#![allow(dead_code)]

use muscle::autograd::{Tape, Var};
use muscle::config::{DataSource, RunConfig, Variant};
use muscle::nets::{ConvSpec, EncoderConfig, ParamVector};
use muscle::pipeline::prepare_tasks;
use muscle::preprocess::PoolItem;
use muscle::seed::{derive_seed, keyed_rng};
use muscle::synth::standard_suite_sized;
use muscle::task::TaskData;
use muscle::tensor::Tensor;
use muscle::Result;
use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};

pub mod gradops;

pub const FD_EPS: f64 = 1e-6;

pub fn randn(shape: &[usize], seed: u64) -> Tensor {
    let mut rng = keyed_rng(seed, &[0xfd]);
    let n = shape.iter().product();
    let data = (0..n).map(|_| StandardNormal.sample(&mut rng)).collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

pub fn uniform(n: usize, lo: f64, hi: f64, seed: u64) -> Vec<f64> {
    let mut rng = keyed_rng(seed, &[0xab]);
    (0..n).map(|_| rng.random_range(lo..hi)).collect()
}

/// Reduces any value to a scalar through a fixed random weighting, so
/// every output element contributes a distinct gradient.
pub fn weighted_sum(tape: &mut Tape, v: Var, seed: u64) -> Result<Var> {
    let n = tape.value(v).numel();
    let flat = tape.reshape(v, &[1, n])?;
    let r = tape.constant(randn(&[n, 1], seed ^ 0x5eed));
    let s = tape.matmul(flat, r)?;
    tape.reshape(s, &[1])
}

/// Norm-wise relative error `‖a − b‖ / max(‖a‖, ‖b‖)`.
pub fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let diff = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let scale = a
        .iter()
        .map(|x| x * x)
        .sum::<f64>()
        .sqrt()
        .max(b.iter().map(|x| x * x).sum::<f64>().sqrt());
    if scale == 0.0 {
        diff
    } else {
        diff / scale
    }
}

/// Compares the tape gradient of `f` w.r.t. each leaf with central finite
/// differences over the coordinates in `coords` (all when `None`).
/// Returns the worst relative error across leaves.
pub fn fd_check<F>(leaves: &[Tensor], coords: Option<&[Vec<usize>]>, f: F) -> f64
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let eval = |values: &[Tensor]| -> f64 {
        let mut tape = Tape::new();
        let vars: Vec<Var> = values.iter().map(|t| tape.constant(t.clone())).collect();
        let root = f(&mut tape, &vars).unwrap();
        tape.value(root).item().unwrap()
    };
    let mut tape = Tape::new();
    let vars: Vec<Var> = leaves
        .iter()
        .map(|t| tape.leaf(t.clone().with_requires_grad(true)))
        .collect();
    let root = f(&mut tape, &vars).unwrap();
    tape.backward(root).unwrap();
    let mut worst: f64 = 0.0;
    for (li, leaf) in leaves.iter().enumerate() {
        let analytic = tape.grad(vars[li]).unwrap().to_vec();
        let idx: Vec<usize> = match coords {
            Some(c) => c[li].clone(),
            None => (0..leaf.numel()).collect(),
        };
        let mut a = Vec::with_capacity(idx.len());
        let mut n = Vec::with_capacity(idx.len());
        for &i in &idx {
            let mut plus = leaves.to_vec();
            plus[li].data_mut()[i] += FD_EPS;
            let mut minus = leaves.to_vec();
            minus[li].data_mut()[i] -= FD_EPS;
            n.push((eval(&plus) - eval(&minus)) / (2.0 * FD_EPS));
            a.push(analytic[i]);
        }
        worst = worst.max(rel_err(&a, &n));
    }
    worst
}

/// Small encoder used where full finite-difference sweeps would be slow.
pub fn tiny_encoder() -> EncoderConfig {
    EncoderConfig {
        in_channels: 1,
        input_hw: (8, 8),
        conv_specs: vec![
            ConvSpec {
                out_channels: 3,
                kernel: 3,
                stride: 2,
            },
            ConvSpec {
                out_channels: 4,
                kernel: 3,
                stride: 2,
            },
        ],
        feature_dim: 3,
    }
}

/// Task data for the standard suite prepared at the encoder's input size.
pub fn suite_tasks(enc: &EncoderConfig, suite_seed: u64, n_images: usize) -> Vec<TaskData> {
    let mut cfg = RunConfig::default();
    cfg.encoder = enc.clone();
    cfg.preprocessing.target_hw = enc.input_hw;
    let manifests = standard_suite_sized(suite_seed, n_images).unwrap();
    prepare_tasks(&manifests, &cfg).unwrap()
}

/// Two clusters of noisy images, one darker and one brighter than zero.
/// Each image has its own noise level, which changes the direction of its
/// embedding rather than only its scale, and survives the geometric
/// augmentations and global pooling.
pub fn two_cluster_pool(n: usize, hw: (usize, usize), seed: u64) -> Vec<PoolItem> {
    let (h, w) = hw;
    let mut rng = keyed_rng(seed, &[0xc1]);
    (0..n)
        .map(|i| {
            let bright = i % 2 == 0;
            let level = if bright { 1.0 } else { -1.0 };
            let sigma = rng.random_range(0.2..2.0);
            let noise = randn(&[1, h, w], derive_seed(seed, &[i as u64]));
            let data = noise.data().iter().map(|v| level + sigma * v).collect();
            PoolItem {
                image: Tensor::new(vec![1, h, w], data).unwrap(),
                dataset_id: if bright { "bright" } else { "dark" }.into(),
            }
        })
        .collect()
}

pub fn bits(p: &ParamVector) -> Vec<u64> {
    p.flatten().iter().map(|v| v.to_bits()).collect()
}

/// A complete run configuration small enough to execute in about a second.
pub fn tiny_run_config(out: &std::path::Path, variant: Variant, master_seed: u64) -> RunConfig {
    let enc = tiny_encoder();
    let mut cfg = RunConfig {
        master_seed,
        variant,
        out_dir: out.to_path_buf(),
        data: DataSource::Synthetic {
            suite_seed: 0,
            n_images: 20,
        },
        ..Default::default()
    };
    cfg.preprocessing.target_hw = enc.input_hw;
    cfg.encoder = enc;
    cfg.moco.epochs = 1;
    cfg.moco.batch_size = 4;
    cfg.moco.queue_size = 8;
    cfg.schedule.rounds = 2;
    cfg.schedule.batch_size = 4;
    cfg.finetune.epochs = 2;
    cfg.finetune.batch_size = 4;
    cfg.finetune.bootstrap_trials = 10;
    cfg
}
