//! Shared convolutional encoder, task heads and named parameter sets.
//!
//! The encoder is a stack of `conv → relu` layers followed by global
//! average pooling and a linear projection to the embedding. Heads attach
//! either to the embedding (classification) or to the last pre-pool
//! feature map (segmentation, via a 1×1 convolution upsampled back to the
//! input resolution).

use std::collections::BTreeMap;

use rand::Rng as _;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Var};
use crate::error::{ensure, Error, Result};
use crate::seed::Rng;
use crate::tensor::Tensor;

/// Named tensors, iterated (and flattened) in name order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamVector {
    entries: BTreeMap<String, Tensor>,
}

/// Tape handles for a bound [`ParamVector`], keyed by parameter name.
#[derive(Debug, Clone)]
pub struct BoundParams {
    vars: BTreeMap<String, Var>,
}

impl BoundParams {
    pub fn get(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| Error::Contract(format!("missing parameter `{name}`")))
    }

    /// Binds handles recorded elsewhere under parameter names.
    pub fn from_pairs(pairs: impl IntoIterator<Item = (String, Var)>) -> Self {
        Self {
            vars: pairs.into_iter().collect(),
        }
    }
}

impl ParamVector {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) {
        self.entries.insert(name.into(), t.with_requires_grad(false));
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.entries.get_mut(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor)> {
        self.entries.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    /// Number of named tensors.
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Total scalar count across all tensors.
    pub fn numel(&self) -> usize {
        self.entries.values().map(Tensor::numel).sum()
    }

    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.numel());
        for t in self.entries.values() {
            out.extend_from_slice(t.data());
        }
        out
    }

    /// Rebuilds a parameter set with `template`'s names and shapes.
    pub fn unflatten(values: &[f64], template: &ParamVector) -> Result<ParamVector> {
        ensure!(
            values.len() == template.numel(),
            Dimension,
            "unflatten: {} values for a template of {} scalars",
            values.len(),
            template.numel()
        );
        let mut out = ParamVector::new();
        let mut offset = 0;
        for (name, t) in &template.entries {
            let n = t.numel();
            let data = values[offset..offset + n].to_vec();
            out.insert(name.clone(), Tensor::new(t.shape().to_vec(), data)?);
            offset += n;
        }
        Ok(out)
    }

    pub fn sq_norm(&self) -> f64 {
        self.entries.values().map(Tensor::sq_norm).sum()
    }

    /// Same names with the same shapes.
    pub fn same_template(&self, other: &ParamVector) -> bool {
        self.entries.len() == other.entries.len()
            && self
                .entries
                .iter()
                .zip(&other.entries)
                .all(|((na, ta), (nb, tb))| na == nb && ta.shape() == tb.shape())
    }

    pub fn check_template(&self, other: &ParamVector, what: &str) -> Result<()> {
        if self.same_template(other) {
            Ok(())
        } else {
            Err(Error::Contract(format!(
                "{what}: parameter templates differ ({:?} vs {:?})",
                self.names().collect::<Vec<_>>(),
                other.names().collect::<Vec<_>>()
            )))
        }
    }

    /// Entries whose names start with `prefix`.
    pub fn with_prefix(&self, prefix: &str) -> ParamVector {
        ParamVector {
            entries: self
                .entries
                .iter()
                .filter(|(k, _)| k.starts_with(prefix))
                .map(|(k, v)| (k.clone(), v.clone()))
                .collect(),
        }
    }

    /// Union of two disjoint parameter sets.
    pub fn merged(&self, other: &ParamVector) -> Result<ParamVector> {
        let mut out = self.clone();
        for (k, v) in &other.entries {
            ensure!(
                !out.entries.contains_key(k),
                Contract,
                "merge: duplicate parameter `{k}`"
            );
            out.entries.insert(k.clone(), v.clone());
        }
        Ok(out)
    }

    /// Records every tensor as a leaf on `tape`.
    pub fn bind(&self, tape: &mut Tape, requires_grad: bool) -> BoundParams {
        let vars = self
            .entries
            .iter()
            .map(|(k, t)| (k.clone(), tape.leaf(t.clone().with_requires_grad(requires_grad))))
            .collect();
        BoundParams { vars }
    }

    /// Gradients of a finished backward sweep, in this set's layout.
    pub fn gradients(&self, tape: &Tape, bound: &BoundParams) -> Result<ParamVector> {
        let mut out = ParamVector::new();
        for (name, t) in &self.entries {
            let v = bound.get(name)?;
            let g = tape
                .grad(v)
                .map(<[f64]>::to_vec)
                .unwrap_or_else(|| vec![0.0; t.numel()]);
            out.insert(name.clone(), Tensor::new(t.shape().to_vec(), g)?);
        }
        Ok(out)
    }
}

/// He/Kaiming normal initialisation, fan-in mode.
pub fn kaiming_init(shape: &[usize], fan_in: usize, rng: &mut Rng) -> Result<Tensor> {
    ensure!(fan_in >= 1, Contract, "kaiming_init: fan_in must be positive");
    let std = (2.0 / fan_in as f64).sqrt();
    let normal = Normal::new(0.0, std).expect("finite std");
    let numel = shape.iter().product();
    let data = (0..numel).map(|_| normal.sample(rng)).collect();
    Tensor::new(shape.to_vec(), data)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvSpec {
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EncoderConfig {
    pub in_channels: usize,
    /// Input resolution `(height, width)` the encoder is configured for.
    pub input_hw: (usize, usize),
    pub conv_specs: Vec<ConvSpec>,
    pub feature_dim: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        let conv = |c| ConvSpec {
            out_channels: c,
            kernel: 3,
            stride: 2,
        };
        Self {
            in_channels: 1,
            input_hw: (32, 32),
            conv_specs: vec![conv(8), conv(16), conv(32)],
            feature_dim: 32,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        ensure!(self.feature_dim >= 2, Config, "feature_dim must be at least 2");
        ensure!(self.in_channels >= 1, Config, "in_channels must be positive");
        ensure!(!self.conv_specs.is_empty(), Config, "encoder needs a conv layer");
        self.feature_map_shape().map(|_| ())
    }

    /// Shape `(C, h, w)` of the last pre-pool feature map.
    pub fn feature_map_shape(&self) -> Result<(usize, usize, usize)> {
        let (mut h, mut w) = self.input_hw;
        let mut c = self.in_channels;
        for (i, s) in self.conv_specs.iter().enumerate() {
            ensure!(
                s.kernel >= 1 && s.stride >= 1 && s.out_channels >= 1,
                Config,
                "conv layer {i}: degenerate spec {s:?}"
            );
            let pad = s.kernel / 2;
            ensure!(
                s.kernel <= h + 2 * pad && s.kernel <= w + 2 * pad,
                Config,
                "conv layer {i}: kernel {} exceeds padded input {h}×{w}",
                s.kernel
            );
            h = (h + 2 * pad - s.kernel) / s.stride + 1;
            w = (w + 2 * pad - s.kernel) / s.stride + 1;
            c = s.out_channels;
        }
        Ok((c, h, w))
    }

    pub fn init(&self, rng: &mut Rng) -> Result<ParamVector> {
        self.validate()?;
        let mut p = ParamVector::new();
        let mut c_in = self.in_channels;
        for (i, s) in self.conv_specs.iter().enumerate() {
            let fan_in = c_in * s.kernel * s.kernel;
            p.insert(
                format!("enc.conv{i}.w"),
                kaiming_init(&[s.out_channels, c_in, s.kernel, s.kernel], fan_in, rng)?,
            );
            p.insert(format!("enc.conv{i}.b"), Tensor::zeros(&[s.out_channels]));
            c_in = s.out_channels;
        }
        p.insert(
            "enc.fc.w",
            kaiming_init(&[c_in, self.feature_dim], c_in, rng)?,
        );
        p.insert("enc.fc.b", Tensor::zeros(&[1, self.feature_dim]));
        Ok(p)
    }
}

/// Intermediate and final encoder outputs for one image.
#[derive(Debug, Clone, Copy)]
pub struct EncoderOutput {
    /// Last `C×h×w` feature map before pooling.
    pub feature_map: Var,
    /// `1×feature_dim` embedding.
    pub embedding: Var,
}

pub fn encoder_forward(
    tape: &mut Tape,
    cfg: &EncoderConfig,
    params: &BoundParams,
    image: Var,
) -> Result<EncoderOutput> {
    let shape = tape.value(image).shape().to_vec();
    let expected = [cfg.in_channels, cfg.input_hw.0, cfg.input_hw.1];
    if shape != expected {
        return Err(Error::Dimension(format!(
            "encoder expects image {expected:?}, got {shape:?}"
        )));
    }
    let mut x = image;
    for (i, s) in cfg.conv_specs.iter().enumerate() {
        let w = params.get(&format!("enc.conv{i}.w"))?;
        let b = params.get(&format!("enc.conv{i}.b"))?;
        x = tape.conv2d(x, w, s.stride, s.kernel / 2)?;
        x = tape.add_channel_bias(x, b)?;
        x = tape.relu(x)?;
    }
    let pooled = tape.global_avg_pool(x)?;
    let fc = tape.matmul(pooled, params.get("enc.fc.w")?)?;
    let embedding = tape.add(fc, params.get("enc.fc.b")?)?;
    Ok(EncoderOutput {
        feature_map: x,
        embedding,
    })
}

/// Gradient-free embedding of a single image.
pub fn embed(cfg: &EncoderConfig, params: &ParamVector, image: &Tensor) -> Result<Tensor> {
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape, false);
    let x = tape.constant(image.clone());
    let out = encoder_forward(&mut tape, cfg, &bound, x)?;
    Ok(tape.value(out.embedding).clone())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadKind {
    Classification,
    Segmentation,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct HeadConfig {
    pub kind: HeadKind,
    /// Class count (classification) or label count (segmentation).
    pub num_classes: usize,
}

impl HeadConfig {
    pub fn classification(num_classes: usize) -> Self {
        Self {
            kind: HeadKind::Classification,
            num_classes,
        }
    }

    pub fn segmentation(num_labels: usize) -> Self {
        Self {
            kind: HeadKind::Segmentation,
            num_classes: num_labels,
        }
    }

    pub fn validate(&self) -> Result<()> {
        ensure!(
            self.num_classes >= 2,
            Config,
            "head needs at least 2 classes, got {}",
            self.num_classes
        );
        Ok(())
    }

    pub fn init(&self, enc: &EncoderConfig, rng: &mut Rng) -> Result<ParamVector> {
        self.validate()?;
        let mut p = ParamVector::new();
        match self.kind {
            HeadKind::Classification => {
                let d = enc.feature_dim;
                p.insert("head.w", kaiming_init(&[d, self.num_classes], d, rng)?);
                p.insert("head.b", Tensor::zeros(&[1, self.num_classes]));
            }
            HeadKind::Segmentation => {
                let (c, _, _) = enc.feature_map_shape()?;
                p.insert("head.w", kaiming_init(&[self.num_classes, c, 1, 1], c, rng)?);
                p.insert("head.b", Tensor::zeros(&[self.num_classes]));
            }
        }
        Ok(p)
    }
}

/// Applies a head. Classification returns `1×classes` logits from the
/// embedding; segmentation returns `labels×H×W` logits from the feature
/// map, upsampled to `out_hw`.
pub fn head_forward(
    tape: &mut Tape,
    cfg: &HeadConfig,
    params: &BoundParams,
    features: Var,
    out_hw: (usize, usize),
) -> Result<Var> {
    let rank = tape.value(features).shape().len();
    let w = params.get("head.w")?;
    let b = params.get("head.b")?;
    match cfg.kind {
        HeadKind::Classification => {
            ensure!(
                rank == 2,
                Contract,
                "classification head needs an embedding, got rank-{rank} features"
            );
            let z = tape.matmul(features, w)?;
            tape.add(z, b)
        }
        HeadKind::Segmentation => {
            ensure!(
                rank == 3,
                Contract,
                "segmentation head needs a feature map, got rank-{rank} features"
            );
            let z = tape.conv2d(features, w, 1, 0)?;
            let z = tape.add_channel_bias(z, b)?;
            tape.upsample_nearest(z, out_hw.0, out_hw.1)
        }
    }
}

/// Draws a uniformly random permutation of `0..n` (Fisher–Yates).
pub(crate) fn permutation(n: usize, rng: &mut Rng) -> Vec<usize> {
    let mut p: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        let j = rng.random_range(0..=i);
        p.swap(i, j);
    }
    p
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seed::keyed_rng;

    #[test]
    fn flatten_layout_and_roundtrip() {
        let mut p = ParamVector::new();
        p.insert("b", Tensor::new(vec![3], vec![5.0, 6.0, 7.0]).unwrap());
        p.insert("a", Tensor::new(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let flat = p.flatten();
        assert_eq!(flat, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0]);
        assert_eq!(ParamVector::unflatten(&flat, &p).unwrap(), p);
        assert!(matches!(
            ParamVector::unflatten(&flat[..6], &p),
            Err(Error::Dimension(_))
        ));
        assert_eq!(p.sq_norm(), flat.iter().map(|v| v * v).sum::<f64>());
    }

    #[test]
    fn kaiming_is_seeded() {
        let a = kaiming_init(&[4, 4], 4, &mut keyed_rng(3, &[])).unwrap();
        let b = kaiming_init(&[4, 4], 4, &mut keyed_rng(3, &[])).unwrap();
        assert_eq!(a, b);
        assert!(kaiming_init(&[2], 0, &mut keyed_rng(3, &[])).is_err());
    }

    #[test]
    fn zero_params_give_zero_embedding() {
        let cfg = EncoderConfig::default();
        let p = cfg.init(&mut keyed_rng(0, &[])).unwrap();
        let zeros = ParamVector::unflatten(&vec![0.0; p.numel()], &p).unwrap();
        let img = Tensor::full(&[1, 32, 32], 0.7);
        let e = embed(&cfg, &zeros, &img).unwrap();
        assert_eq!(e.shape(), &[1, 32]);
        assert!(e.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn resolution_mismatch_is_dimension_error() {
        let cfg = EncoderConfig::default();
        let p = cfg.init(&mut keyed_rng(0, &[])).unwrap();
        let img = Tensor::zeros(&[1, 16, 32]);
        assert!(matches!(embed(&cfg, &p, &img), Err(Error::Dimension(_))));
    }

    #[test]
    fn head_output_shapes_and_kind_mismatch() {
        let enc = EncoderConfig::default();
        let mut rng = keyed_rng(1, &[]);
        let bp = enc.init(&mut rng).unwrap();
        let cls = HeadConfig::classification(3);
        let seg = HeadConfig::segmentation(2);
        let hc = cls.init(&enc, &mut rng).unwrap();
        let hs = seg.init(&enc, &mut rng).unwrap();

        let mut tape = Tape::new();
        let b = bp.bind(&mut tape, false);
        let x = tape.constant(Tensor::full(&[1, 32, 32], 0.3));
        let out = encoder_forward(&mut tape, &enc, &b, x).unwrap();
        let bc = hc.bind(&mut tape, false);
        let bs = hs.bind(&mut tape, false);
        let lc = head_forward(&mut tape, &cls, &bc, out.embedding, (32, 32)).unwrap();
        assert_eq!(tape.value(lc).shape(), &[1, 3]);
        let ls = head_forward(&mut tape, &seg, &bs, out.feature_map, (32, 32)).unwrap();
        assert_eq!(tape.value(ls).shape(), &[2, 32, 32]);
        assert!(matches!(
            head_forward(&mut tape, &cls, &bc, out.feature_map, (32, 32)),
            Err(Error::Contract(_))
        ));
        assert!(matches!(
            head_forward(&mut tape, &seg, &bs, out.embedding, (32, 32)),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn permutation_is_bijection() {
        let mut rng = keyed_rng(9, &[]);
        let mut p = permutation(17, &mut rng);
        p.sort_unstable();
        assert_eq!(p, (0..17).collect::<Vec<_>>());
    }
}
