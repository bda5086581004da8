//! Momentum-contrastive pre-training over an aggregated image pool.
//!
//! A query encoder (backbone + linear projection) is trained by SGD on the
//! InfoNCE loss between two augmented views of each image, using a FIFO
//! queue of past key embeddings as negatives. The key encoder is an
//! exponential moving average of the query encoder and never receives
//! gradients.

use rand::SeedableRng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Var};
use crate::cl::cosine_lr_with;
use crate::error::{ensure, Error, Result};
use crate::nets::{encoder_forward, kaiming_init, BoundParams, EncoderConfig, ParamVector};
use crate::optim::sgd_step;
use crate::preprocess::{augment_view, AugmentPolicy, PoolItem};
use crate::seed::{derive_seed, keyed_rng, stream, Rng};
use crate::tensor::Tensor;

/// Allowed deviation from unit norm for enqueued keys.
pub const KEY_NORM_TOLERANCE: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MoCoConfig {
    pub epochs: usize,
    pub batch_size: usize,
    /// Peak learning rate of the cosine schedule.
    pub lr: f64,
    #[serde(default)]
    pub lr_min: f64,
    #[serde(default)]
    pub half_cycle: bool,
    pub weight_decay: f64,
    pub momentum: f64,
    pub temperature: f64,
    pub queue_size: usize,
    #[serde(default)]
    pub augment: AugmentPolicy,
    pub seed: u64,
}

impl Default for MoCoConfig {
    fn default() -> Self {
        Self {
            epochs: 5,
            batch_size: 32,
            lr: 0.3,
            lr_min: 0.0,
            half_cycle: false,
            weight_decay: 1e-4,
            momentum: 0.999,
            temperature: 0.07,
            queue_size: 512,
            augment: AugmentPolicy::default(),
            seed: 0,
        }
    }
}

impl MoCoConfig {
    pub fn validate(&self) -> Result<()> {
        ensure!(self.batch_size >= 1, Config, "MoCo batch_size must be positive");
        ensure!(
            (0.0..=1.0).contains(&self.momentum),
            Config,
            "momentum {} outside [0, 1]",
            self.momentum
        );
        ensure!(self.temperature > 0.0, Config, "temperature must be positive");
        ensure!(self.queue_size >= 1, Config, "queue_size must be positive");
        ensure!(
            self.batch_size <= self.queue_size,
            Config,
            "batch_size {} exceeds queue_size {}",
            self.batch_size,
            self.queue_size
        );
        ensure!(self.lr >= self.lr_min && self.lr_min >= 0.0, Config, "need lr ≥ lr_min ≥ 0");
        Ok(())
    }
}

/// Query/key parameters plus the negative queue.
#[derive(Debug, Clone)]
pub struct MoCoState {
    pub query: ParamVector,
    pub key: ParamVector,
    /// `K×feature_dim`, row-major; every row has unit norm.
    queue: Vec<f64>,
    queue_len: usize,
    feature_dim: usize,
    queue_ptr: usize,
    pub momentum: f64,
    pub temperature: f64,
}

fn unit_rows(rows: usize, dim: usize, rng: &mut Rng) -> Vec<f64> {
    let mut q: Vec<f64> = (0..rows * dim)
        .map(|_| StandardNormal.sample(rng))
        .collect();
    for row in q.chunks_mut(dim) {
        let n = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        row.iter_mut().for_each(|v| *v /= n);
    }
    q
}

impl MoCoState {
    /// Kaiming-initialised query encoder + projection, key encoder as an
    /// exact copy, queue of random unit rows.
    pub fn init(enc: &EncoderConfig, cfg: &MoCoConfig) -> Result<Self> {
        cfg.validate()?;
        let backbone = enc.init(&mut keyed_rng(cfg.seed, &[stream::ENCODER_INIT]))?;
        let d = enc.feature_dim;
        let mut proj_rng = keyed_rng(cfg.seed, &[stream::PROJECTION_INIT]);
        let mut proj = ParamVector::new();
        proj.insert("proj.w", kaiming_init(&[d, d], d, &mut proj_rng)?);
        proj.insert("proj.b", Tensor::zeros(&[1, d]));
        let query = backbone.merged(&proj)?;
        let mut qrng = keyed_rng(cfg.seed, &[stream::QUEUE_INIT]);
        Ok(Self {
            key: query.clone(),
            query,
            queue: unit_rows(cfg.queue_size, d, &mut qrng),
            queue_len: cfg.queue_size,
            feature_dim: d,
            queue_ptr: 0,
            momentum: cfg.momentum,
            temperature: cfg.temperature,
        })
    }

    /// Replaces the backbone part of both encoders (e.g. to resume).
    pub fn with_backbone(mut self, backbone: &ParamVector) -> Result<Self> {
        let current = self.query.with_prefix("enc.");
        current.check_template(backbone, "MoCo backbone")?;
        let proj_q = self.query.with_prefix("proj.");
        let proj_k = self.key.with_prefix("proj.");
        self.query = backbone.merged(&proj_q)?;
        self.key = backbone.merged(&proj_k)?;
        Ok(self)
    }

    pub fn queue(&self) -> &[f64] {
        &self.queue
    }

    pub fn queue_rows(&self) -> usize {
        self.queue_len
    }

    pub fn queue_ptr(&self) -> usize {
        self.queue_ptr
    }

    pub fn feature_dim(&self) -> usize {
        self.feature_dim
    }

    /// The query encoder's backbone parameters.
    pub fn backbone(&self) -> ParamVector {
        self.query.with_prefix("enc.")
    }

    /// Writes `keys` at the queue pointer, wrapping around; the oldest
    /// entries are overwritten.
    pub fn enqueue_dequeue(&mut self, keys: &[Vec<f64>]) -> Result<()> {
        ensure!(
            keys.len() <= self.queue_len,
            Contract,
            "batch of {} keys exceeds queue size {}",
            keys.len(),
            self.queue_len
        );
        for k in keys {
            ensure!(
                k.len() == self.feature_dim,
                Dimension,
                "key has {} entries, queue rows {}",
                k.len(),
                self.feature_dim
            );
            let norm = k.iter().map(|v| v * v).sum::<f64>().sqrt();
            ensure!(
                (norm - 1.0).abs() <= KEY_NORM_TOLERANCE,
                Contract,
                "key norm {norm} is not 1"
            );
        }
        for k in keys {
            let d = self.feature_dim;
            self.queue[self.queue_ptr * d..(self.queue_ptr + 1) * d].copy_from_slice(k);
            self.queue_ptr = (self.queue_ptr + 1) % self.queue_len;
        }
        Ok(())
    }
}

/// `θ_k ← m·θ_k + (1 − m)·θ_q`, elementwise.
pub fn momentum_update(key: &mut ParamVector, query: &ParamVector, m: f64) -> Result<()> {
    ensure!((0.0..=1.0).contains(&m), Contract, "momentum {m} outside [0, 1]");
    key.check_template(query, "momentum_update")?;
    for ((_, k), (_, q)) in key.iter_mut().zip(query.iter()) {
        for (kv, qv) in k.data_mut().iter_mut().zip(q.data()) {
            *kv = m * *kv + (1.0 - m) * qv;
        }
    }
    Ok(())
}

/// InfoNCE for one query `1×d` against its positive key and the queue
/// (`K×d`, row-major). Keys and queue are constants: only `q` receives
/// gradient.
pub fn infonce_loss(
    tape: &mut Tape,
    q: Var,
    k_pos: &[f64],
    queue: &[f64],
    temperature: f64,
) -> Result<Var> {
    ensure!(temperature > 0.0, Contract, "temperature must be positive, got {temperature}");
    let d = k_pos.len();
    let qs = tape.value(q).shape();
    if qs != [1, d] {
        return Err(Error::Dimension(format!(
            "query {qs:?} does not match key of length {d}"
        )));
    }
    ensure!(
        d > 0 && queue.len() % d == 0,
        Dimension,
        "queue length {} is not a multiple of {d}",
        queue.len()
    );
    let k = queue.len() / d;
    // d×(K+1): column 0 is the positive key, columns 1.. the negatives.
    let mut m = vec![0.0; d * (k + 1)];
    for j in 0..d {
        m[j * (k + 1)] = k_pos[j];
        for i in 0..k {
            m[j * (k + 1) + 1 + i] = queue[i * d + j];
        }
    }
    let keys = tape.constant(Tensor::new(vec![d, k + 1], m)?);
    let logits = tape.matmul(q, keys)?;
    let logits = tape.scale(logits, 1.0 / temperature)?;
    tape.softmax_cross_entropy(logits, &[0])
}

/// Normalised projection `1×d` of one image through query or key encoder.
fn project(
    tape: &mut Tape,
    enc: &EncoderConfig,
    params: &BoundParams,
    image: &Tensor,
) -> Result<Var> {
    let x = tape.constant(image.clone());
    let out = encoder_forward(tape, enc, params, x)?;
    let z = tape.matmul(out.embedding, params.get("proj.w")?)?;
    let z = tape.add(z, params.get("proj.b")?)?;
    tape.l2_normalize_rows(z)
}

/// Key embedding of one view; runs on its own tape with no tracked leaves.
pub fn key_embedding(enc: &EncoderConfig, key: &ParamVector, image: &Tensor) -> Result<Vec<f64>> {
    let mut tape = Tape::new();
    let bound = key.bind(&mut tape, false);
    let k = project(&mut tape, enc, &bound, image)?;
    Ok(tape.value(k).data().to_vec())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochLoss {
    pub epoch: usize,
    pub mean_loss: f64,
}

#[derive(Debug, Clone)]
pub struct PretrainOutput {
    pub backbone: ParamVector,
    pub loss_trace: Vec<EpochLoss>,
    pub state: MoCoState,
}

pub fn loss_trace_csv(trace: &[EpochLoss]) -> String {
    let mut out = String::from("epoch,mean_loss\n");
    for e in trace {
        out.push_str(&format!("{},{}\n", e.epoch, e.mean_loss));
    }
    out
}

/// One contrastive step on a minibatch; returns the mean InfoNCE loss.
pub fn moco_step(
    state: &mut MoCoState,
    enc: &EncoderConfig,
    images: &[&Tensor],
    policy: &AugmentPolicy,
    lr: f64,
    weight_decay: f64,
    rng_seed: u64,
) -> Result<f64> {
    ensure!(!images.is_empty(), Contract, "empty MoCo batch");
    let mut tape = Tape::new();
    let bound = state.query.bind(&mut tape, true);
    let mut losses = Vec::with_capacity(images.len());
    let mut keys = Vec::with_capacity(images.len());
    for (i, img) in images.iter().enumerate() {
        let mut rng = Rng::seed_from_u64(derive_seed(rng_seed, &[i as u64]));
        let v1 = augment_view(img, policy, &mut rng);
        let v2 = augment_view(img, policy, &mut rng);
        let k = key_embedding(enc, &state.key, &v2)?;
        let q = project(&mut tape, enc, &bound, &v1)?;
        losses.push(infonce_loss(&mut tape, q, &k, &state.queue, state.temperature)?);
        keys.push(k);
    }
    let loss = tape.mean_of(&losses)?;
    let value = tape.value(loss).item()?;
    tape.backward(loss)?;
    let grads = state.query.gradients(&tape, &bound)?;
    sgd_step(&mut state.query, &grads, lr, weight_decay)?;
    let m = state.momentum;
    momentum_update(&mut state.key, &state.query, m)?;
    state.enqueue_dequeue(&keys)?;
    Ok(value)
}

/// Contrastive pre-training from a fresh Kaiming initialisation.
pub fn md_moco_pretrain(
    pool: &[PoolItem],
    enc: &EncoderConfig,
    cfg: &MoCoConfig,
) -> Result<PretrainOutput> {
    let state = MoCoState::init(enc, cfg)?;
    pretrain_from(state, pool, enc, cfg)
}

/// Contrastive pre-training continuing from an existing state.
pub fn pretrain_from(
    mut state: MoCoState,
    pool: &[PoolItem],
    enc: &EncoderConfig,
    cfg: &MoCoConfig,
) -> Result<PretrainOutput> {
    cfg.validate()?;
    ensure!(!pool.is_empty(), Contract, "MoCo pool is empty");
    ensure!(
        cfg.batch_size <= pool.len(),
        Contract,
        "batch_size {} exceeds pool of {}",
        cfg.batch_size,
        pool.len()
    );
    let steps_per_epoch = pool.len().div_ceil(cfg.batch_size);
    let total = (steps_per_epoch * cfg.epochs).max(1);
    let mut trace = Vec::with_capacity(cfg.epochs);
    let mut step = 0usize;
    for epoch in 0..cfg.epochs {
        let order = crate::nets::permutation(
            pool.len(),
            &mut keyed_rng(cfg.seed, &[stream::BATCH_ORDER, epoch as u64]),
        );
        let mut sum = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            let images: Vec<&Tensor> = chunk.iter().map(|&i| &pool[i].image).collect();
            let lr = cosine_lr_with(step, total, cfg.lr_min, cfg.lr, cfg.half_cycle)?;
            let aug_seed = derive_seed(cfg.seed, &[stream::AUGMENT, step as u64]);
            sum += moco_step(&mut state, enc, &images, &cfg.augment, lr, cfg.weight_decay, aug_seed)?;
            step += 1;
        }
        let mean_loss = sum / steps_per_epoch as f64;
        log::info!("moco epoch {epoch}: mean loss {mean_loss:.4}");
        trace.push(EpochLoss { epoch, mean_loss });
    }
    Ok(PretrainOutput {
        backbone: state.backbone(),
        loss_trace: trace,
        state,
    })
}
