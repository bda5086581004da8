//! Finite-difference checks for every differentiable operation. Each
//! checker builds one random instance from `seed` and returns the worst
//! relative error between tape and numeric gradients.

use muscle::autograd::Var;
use muscle::cl::{l2sp_grad, l2sp_penalty, AnchorSnapshot};
use muscle::moco::infonce_loss;
use muscle::nets::{encoder_forward, head_forward, EncoderConfig, HeadConfig, ParamVector};
use muscle::seed::keyed_rng;
use muscle::tensor::Tensor;

use super::{fd_check, randn, rel_err, tiny_encoder, uniform, weighted_sum};

pub struct OpCheck {
    pub name: &'static str,
    pub tolerance: f64,
    pub run: fn(u64) -> f64,
}

pub const INSTANCES: u64 = 20;

pub fn all() -> Vec<OpCheck> {
    vec![
        OpCheck { name: "matmul", tolerance: 1e-6, run: matmul },
        OpCheck { name: "conv2d", tolerance: 1e-5, run: conv2d },
        OpCheck { name: "add_channel_bias", tolerance: 1e-6, run: add_channel_bias },
        OpCheck { name: "add", tolerance: 1e-6, run: add },
        OpCheck { name: "scale", tolerance: 1e-6, run: scale },
        OpCheck { name: "relu", tolerance: 1e-6, run: relu },
        OpCheck { name: "sum", tolerance: 1e-6, run: sum },
        OpCheck { name: "mean_of", tolerance: 1e-6, run: mean_of },
        OpCheck { name: "reshape", tolerance: 1e-6, run: reshape },
        OpCheck { name: "transpose", tolerance: 1e-6, run: transpose },
        OpCheck { name: "global_avg_pool", tolerance: 1e-6, run: gap },
        OpCheck { name: "l2_normalize_rows", tolerance: 1e-6, run: l2_normalize },
        OpCheck { name: "softmax_cross_entropy", tolerance: 1e-6, run: cross_entropy },
        OpCheck { name: "upsample_nearest", tolerance: 1e-6, run: upsample },
        OpCheck { name: "concat_rows", tolerance: 1e-6, run: concat },
        OpCheck { name: "mlp_3_layer", tolerance: 1e-5, run: mlp },
        OpCheck { name: "encoder_forward", tolerance: 1e-5, run: encoder },
        OpCheck { name: "head_classification", tolerance: 1e-5, run: head_cls },
        OpCheck { name: "head_segmentation", tolerance: 1e-5, run: head_seg },
        OpCheck { name: "infonce_loss", tolerance: 1e-6, run: infonce },
        OpCheck { name: "l2sp_grad", tolerance: 1e-8, run: l2sp },
    ]
}

fn dims(seed: u64, lo: usize, hi: usize, n: usize) -> Vec<usize> {
    uniform(n, lo as f64, hi as f64 + 1.0, seed ^ 0xd1)
        .into_iter()
        .map(|v| v.floor() as usize)
        .collect()
}

fn matmul(seed: u64) -> f64 {
    let (a, b) = if seed == 0 {
        (randn(&[3, 4], 1), randn(&[4, 2], 2))
    } else {
        let d = dims(seed, 1, 5, 3);
        (randn(&[d[0], d[1]], seed), randn(&[d[1], d[2]], seed + 1000))
    };
    fd_check(&[a, b], None, |t, v| {
        let m = t.matmul(v[0], v[1])?;
        weighted_sum(t, m, seed)
    })
}

fn conv2d(seed: u64) -> f64 {
    let d = dims(seed, 1, 3, 3);
    let (c_in, c_out) = (d[0], d[1]);
    let k = if d[2] == 1 { 1 } else { 3 };
    let stride = 1 + (seed as usize % 2);
    let pad = (seed as usize / 2) % 2;
    let hw = 5 + seed as usize % 3;
    let x = randn(&[c_in, hw, hw], seed);
    let w = randn(&[c_out, c_in, k, k], seed + 7);
    fd_check(&[x, w], None, |t, v| {
        let y = t.conv2d(v[0], v[1], stride, pad)?;
        weighted_sum(t, y, seed)
    })
}

fn add_channel_bias(seed: u64) -> f64 {
    let x = randn(&[3, 4, 2], seed);
    let b = randn(&[3], seed + 1);
    fd_check(&[x, b], None, |t, v| {
        let y = t.add_channel_bias(v[0], v[1])?;
        weighted_sum(t, y, seed)
    })
}

fn add(seed: u64) -> f64 {
    let a = randn(&[2, 5], seed);
    let b = randn(&[2, 5], seed + 1);
    fd_check(&[a, b], None, |t, v| {
        let y = t.add(v[0], v[1])?;
        let y = t.add(y, v[0])?;
        weighted_sum(t, y, seed)
    })
}

fn scale(seed: u64) -> f64 {
    let a = randn(&[4, 3], seed);
    let f = uniform(1, -3.0, 3.0, seed)[0];
    fd_check(&[a], None, |t, v| {
        let y = t.scale(v[0], f)?;
        weighted_sum(t, y, seed)
    })
}

fn relu(seed: u64) -> f64 {
    let mut x = randn(&[6, 5], seed);
    for v in x.data_mut() {
        if v.abs() < 1e-3 {
            *v += 1e-2;
        }
    }
    fd_check(&[x], None, |t, v| {
        let y = t.relu(v[0])?;
        weighted_sum(t, y, seed)
    })
}

fn sum(seed: u64) -> f64 {
    let x = randn(&[3, 3], seed);
    fd_check(&[x], None, |t, v| {
        let sq = t.matmul(v[0], v[0])?;
        t.sum(sq)
    })
}

fn mean_of(seed: u64) -> f64 {
    let x = randn(&[1, 4], seed);
    let y = randn(&[4, 1], seed + 1);
    fd_check(&[x, y], None, |t, v| {
        let a = t.matmul(v[0], v[1])?;
        let a = t.reshape(a, &[1])?;
        let b = weighted_sum(t, v[0], seed)?;
        t.mean_of(&[a, b, a])
    })
}

fn reshape(seed: u64) -> f64 {
    let x = randn(&[2, 3, 2], seed);
    let m = randn(&[4, 2], seed + 1);
    fd_check(&[x], None, |t, v| {
        let y = t.reshape(v[0], &[3, 4])?;
        let m = t.constant(m.clone());
        let z = t.matmul(y, m)?;
        weighted_sum(t, z, seed)
    })
}

fn transpose(seed: u64) -> f64 {
    let x = randn(&[3, 4], seed);
    fd_check(&[x], None, |t, v| {
        let y = t.transpose(v[0])?;
        let z = t.matmul(v[0], y)?;
        weighted_sum(t, z, seed)
    })
}

fn gap(seed: u64) -> f64 {
    let x = randn(&[3, 4, 5], seed);
    fd_check(&[x], None, |t, v| {
        let y = t.global_avg_pool(v[0])?;
        weighted_sum(t, y, seed)
    })
}

fn l2_normalize(seed: u64) -> f64 {
    let x = randn(&[3, 6], seed);
    fd_check(&[x], None, |t, v| {
        let y = t.l2_normalize_rows(v[0])?;
        weighted_sum(t, y, seed)
    })
}

fn cross_entropy(seed: u64) -> f64 {
    let logits = randn(&[3, 5], seed);
    let labels: Vec<usize> = dims(seed, 0, 4, 3);
    fd_check(&[logits], None, |t, v| t.softmax_cross_entropy(v[0], &labels))
}

fn upsample(seed: u64) -> f64 {
    let x = randn(&[2, 3, 2], seed);
    let (oh, ow) = (4 + seed as usize % 3, 5 + seed as usize % 2);
    fd_check(&[x], None, |t, v| {
        let y = t.upsample_nearest(v[0], oh, ow)?;
        weighted_sum(t, y, seed)
    })
}

fn concat(seed: u64) -> f64 {
    let a = randn(&[1, 4], seed);
    let b = randn(&[2, 4], seed + 1);
    fd_check(&[a, b], None, |t, v| {
        let y = t.concat_rows(&[v[0], v[1], v[0]])?;
        weighted_sum(t, y, seed)
    })
}

fn mlp(seed: u64) -> f64 {
    let x = randn(&[4, 5], seed);
    let w1 = randn(&[5, 6], seed + 1);
    let b1 = randn(&[1, 6], seed + 2);
    let w2 = randn(&[6, 4], seed + 3);
    let w3 = randn(&[4, 3], seed + 4);
    let labels: Vec<usize> = dims(seed, 0, 2, 4);
    fd_check(&[w1, b1, w2, w3], None, |t, v| {
        let x = t.constant(x.clone());
        let h = t.matmul(x, v[0])?;
        let ones = t.constant(Tensor::full(&[4, 1], 1.0));
        let bias = t.matmul(ones, v[1])?;
        let h = t.add(h, bias)?;
        let h = t.relu(h)?;
        let h = t.matmul(h, v[2])?;
        let h = t.relu(h)?;
        let z = t.matmul(h, v[3])?;
        t.softmax_cross_entropy(z, &labels)
    })
}

/// Parameters as a leaf list plus a binder that rebuilds named handles.
fn as_leaves(p: &ParamVector) -> (Vec<String>, Vec<Tensor>) {
    p.iter().map(|(n, t)| (n.to_string(), t.clone())).unzip()
}

struct Named<'a> {
    names: &'a [String],
    vars: &'a [Var],
}

impl Named<'_> {
    fn bound(&self) -> muscle::nets::BoundParams {
        muscle::nets::BoundParams::from_pairs(
            self.names.iter().cloned().zip(self.vars.iter().copied()),
        )
    }
}

fn encoder_case(enc: &EncoderConfig, seed: u64, coords: Option<usize>) -> f64 {
    let params = enc.init(&mut keyed_rng(seed, &[1])).unwrap();
    let (names, leaves) = as_leaves(&params);
    let (h, w) = enc.input_hw;
    let image = randn(&[enc.in_channels, h, w], seed + 99);
    let picked: Option<Vec<Vec<usize>>> = coords.map(|n| {
        leaves
            .iter()
            .enumerate()
            .map(|(i, t)| {
                uniform(n.min(t.numel()), 0.0, t.numel() as f64, seed + i as u64)
                    .into_iter()
                    .map(|v| v as usize)
                    .collect()
            })
            .collect()
    });
    fd_check(&leaves, picked.as_deref(), |t, v| {
        let bound = Named { names: &names, vars: v }.bound();
        let x = t.constant(image.clone());
        let out = encoder_forward(t, enc, &bound, x)?;
        weighted_sum(t, out.embedding, seed)
    })
}

fn encoder(seed: u64) -> f64 {
    encoder_case(&tiny_encoder(), seed, None)
}

/// End-to-end check through the full-size encoder on sampled coordinates.
pub fn default_encoder(seed: u64) -> f64 {
    encoder_case(&EncoderConfig::default(), seed, Some(6))
}

fn head_case(cfg: HeadConfig, seed: u64) -> f64 {
    let enc = tiny_encoder();
    let backbone = enc.init(&mut keyed_rng(seed, &[1])).unwrap();
    let head = cfg.init(&enc, &mut keyed_rng(seed, &[2])).unwrap();
    let all = backbone.merged(&head).unwrap();
    let (names, leaves) = as_leaves(&all);
    let image = randn(&[1, 8, 8], seed + 5);
    let seg = cfg.kind == muscle::nets::HeadKind::Segmentation;
    let labels: Vec<usize> = dims(seed, 0, cfg.num_classes - 1, if seg { 64 } else { 1 });
    fd_check(&leaves, None, |t, v| {
        let bound = Named { names: &names, vars: v }.bound();
        let x = t.constant(image.clone());
        let out = encoder_forward(t, &enc, &bound, x)?;
        if seg {
            let z = head_forward(t, &cfg, &bound, out.feature_map, (8, 8))?;
            let z = t.reshape(z, &[cfg.num_classes, 64])?;
            let z = t.transpose(z)?;
            t.softmax_cross_entropy(z, &labels)
        } else {
            let z = head_forward(t, &cfg, &bound, out.embedding, (8, 8))?;
            t.softmax_cross_entropy(z, &labels)
        }
    })
}

fn head_cls(seed: u64) -> f64 {
    head_case(HeadConfig::classification(2 + seed as usize % 3), seed)
}

fn head_seg(seed: u64) -> f64 {
    head_case(HeadConfig::segmentation(2 + seed as usize % 2), seed)
}

fn infonce(seed: u64) -> f64 {
    let d = 6;
    let unit = |t: Tensor| {
        let n = t.sq_norm().sqrt();
        t.data().iter().map(|v| v / n).collect::<Vec<f64>>()
    };
    let k_pos = unit(randn(&[d], seed + 1));
    let queue: Vec<f64> = (0..10)
        .flat_map(|i| unit(randn(&[d], seed * 100 + i + 2)))
        .collect();
    let q = randn(&[1, d], seed);
    fd_check(&[q], None, |t, v| {
        let qn = t.l2_normalize_rows(v[0])?;
        infonce_loss(t, qn, &k_pos, &queue, 0.07 + 0.1 * (seed % 3) as f64)
    })
}

fn l2sp(seed: u64) -> f64 {
    let w = randn(&[50], seed).into_data();
    let w0 = randn(&[50], seed + 1).into_data();
    let alpha = uniform(1, 0.0, 1.0, seed)[0];
    let anchor = AnchorSnapshot::new(w0, 0, 0);
    let g = l2sp_grad(&w, &anchor, alpha).unwrap();
    let numeric: Vec<f64> = (0..w.len())
        .map(|i| {
            let mut p = w.clone();
            p[i] += super::FD_EPS;
            let mut m = w.clone();
            m[i] -= super::FD_EPS;
            (l2sp_penalty(&p, &anchor, alpha).unwrap() - l2sp_penalty(&m, &anchor, alpha).unwrap())
                / (2.0 * super::FD_EPS)
        })
        .collect();
    rel_err(&g, &numeric)
}
