//! Statistical and reference-implementation oracles for initialisation,
//! resizing, aggregation and the synthetic generator.

mod common;

use muscle::nets::kaiming_init;
use muscle::preprocess::{aggregate, resize_bilinear, GrayNorm, DEFAULT_GRAY_MEAN, DEFAULT_GRAY_STD};
use muscle::seed::keyed_rng;
use muscle::synth::{gen_dataset, standard_specs, standard_suite, BlobSignal, SynthSpec};
use muscle::tensor::Tensor;

/// Bilinear interpolation with half-pixel centres, written directly from
/// the sampling definition.
fn reference_resize(src: &[f64], h: usize, w: usize, oh: usize, ow: usize) -> Vec<f64> {
    let at = |y: usize, x: usize| src[y * w + x];
    let mut out = Vec::with_capacity(oh * ow);
    for i in 0..oh {
        for j in 0..ow {
            let sy = ((i as f64 + 0.5) * h as f64 / oh as f64 - 0.5).clamp(0.0, (h - 1) as f64);
            let sx = ((j as f64 + 0.5) * w as f64 / ow as f64 - 0.5).clamp(0.0, (w - 1) as f64);
            let (y0, x0) = (sy.floor() as usize, sx.floor() as usize);
            let (y1, x1) = ((y0 + 1).min(h - 1), (x0 + 1).min(w - 1));
            let (fy, fx) = (sy - y0 as f64, sx - x0 as f64);
            let top = at(y0, x0) * (1.0 - fx) + at(y0, x1) * fx;
            let bottom = at(y1, x0) * (1.0 - fx) + at(y1, x1) * fx;
            out.push(top * (1.0 - fy) + bottom * fy);
        }
    }
    out
}

#[test]
fn kaiming_moments() {
    let t = kaiming_init(&[100_000], 2, &mut keyed_rng(5, &[1])).unwrap();
    let n = t.numel() as f64;
    let mean = t.data().iter().sum::<f64>() / n;
    let std = (t.data().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
    assert!(mean.abs() < 0.01, "mean {mean}");
    assert!((std - 1.0).abs() < 0.02, "std {std}");
    let again = kaiming_init(&[100_000], 2, &mut keyed_rng(5, &[1])).unwrap();
    assert_eq!(t, again);
    assert!(kaiming_init(&[3], 0, &mut keyed_rng(5, &[1])).is_err());
}

#[test]
fn ramp_downsize_matches_reference() {
    let ramp: Vec<f64> = (0..16).map(f64::from).collect();
    let img = Tensor::new(vec![1, 4, 4], ramp.clone()).unwrap();
    let out = resize_bilinear(&img, 2, 2).unwrap();
    let expected = reference_resize(&ramp, 4, 4, 2, 2);
    for (a, b) in out.data().iter().zip(&expected) {
        assert!((a - b).abs() < 1e-12);
    }
    assert_eq!(expected, vec![2.5, 4.5, 10.5, 12.5]);
}

#[test]
fn random_resizes_match_reference() {
    for seed in 0..30u64 {
        let (h, w) = (2 + seed as usize % 7, 3 + seed as usize % 5);
        let (oh, ow) = (1 + (seed as usize * 7) % 11, 1 + (seed as usize * 3) % 9);
        let img = common::randn(&[1, h, w], seed);
        let out = resize_bilinear(&img, oh, ow).unwrap();
        let expected = reference_resize(img.data(), h, w, oh, ow);
        for (a, b) in out.data().iter().zip(&expected) {
            assert!((a - b).abs() < 1e-12, "{h}x{w} -> {oh}x{ow}");
        }
    }
}

fn fixed_stats_spec(n: usize) -> SynthSpec {
    SynthSpec {
        dataset_id: "fixed_stats".into(),
        n_images: n,
        resolution: (32, 32),
        gray_mean: DEFAULT_GRAY_MEAN,
        gray_std: DEFAULT_GRAY_STD,
        task: None,
        signal: BlobSignal {
            min_count: 1,
            max_count: 3,
            min_radius: 2.0,
            max_radius: 4.0,
            intensity_offset: 0.5 * DEFAULT_GRAY_STD,
        },
        seed: 17,
    }
}

#[test]
fn pool_normalised_with_fixed_constants_is_centred() {
    let m = gen_dataset(&fixed_stats_spec(60)).unwrap();
    let norm = GrayNorm::Fixed {
        mean: DEFAULT_GRAY_MEAN,
        std: DEFAULT_GRAY_STD,
    };
    let pool = aggregate(&[m.clone(), m], (32, 32), norm, 3).unwrap();
    let n: usize = pool.iter().map(|p| p.image.numel()).sum();
    let mean = pool.iter().flat_map(|p| p.image.data()).sum::<f64>() / n as f64;
    assert!(mean.abs() < 0.1, "pool mean {mean}");
}

#[test]
fn label_balance_and_negative_mean() {
    for spec in standard_specs(0, 400) {
        let mut spec = spec;
        spec.task = Some(muscle::nets::HeadKind::Classification);
        let m = gen_dataset(&spec).unwrap();
        let pos = m.records.iter().filter(|r| r.label == Some(1)).count();
        let frac = pos as f64 / m.records.len() as f64;
        assert!((0.45..=0.55).contains(&frac), "{}: {frac}", spec.dataset_id);

        let neg: Vec<f64> = m
            .records
            .iter()
            .filter(|r| r.label == Some(0))
            .flat_map(|r| r.pixels.data().to_vec())
            .collect();
        let mean = neg.iter().sum::<f64>() / neg.len() as f64;
        let bound = 2.0 * spec.gray_std / (neg.len() as f64).sqrt();
        assert!(
            (mean - spec.gray_mean).abs() <= bound,
            "{}: negative mean {mean} vs {} ± {bound}",
            spec.dataset_id,
            spec.gray_mean
        );
    }
}

#[test]
fn masks_equal_offset_support() {
    // With zero noise every masked pixel sits exactly `offset` above the
    // background and every other pixel sits on it.
    let mut spec = standard_specs(4, 30).remove(2);
    spec.gray_std = 1e-9;
    let m = gen_dataset(&spec).unwrap();
    let base = spec.gray_mean.round();
    let lifted = (spec.gray_mean + spec.signal.intensity_offset).round().min(255.0);
    for r in &m.records {
        let mask = r.mask.as_ref().unwrap();
        for (&p, &k) in r.pixels.data().iter().zip(mask) {
            assert_eq!(p, if k == 1 { lifted } else { base });
        }
        assert_eq!(mask.iter().any(|&k| k == 1), r.label == Some(1));
    }
}

#[test]
fn nearest_centroid_on_mean_intensity_beats_70_percent() {
    let suite = standard_suite(0).unwrap();
    for m in suite.iter().filter(|m| {
        m.task
            .is_some_and(|t| t.kind == muscle::nets::HeadKind::Classification)
    }) {
        let mean_of = |i: usize| {
            let d = m.records[i].pixels.data();
            d.iter().sum::<f64>() / d.len() as f64
        };
        let label = |i: usize| m.records[i].label.unwrap();
        let centroid = |c: usize| {
            let v: Vec<f64> = m.splits.train.iter().filter(|&&i| label(i) == c).map(|&i| mean_of(i)).collect();
            v.iter().sum::<f64>() / v.len() as f64
        };
        let (c0, c1) = (centroid(0), centroid(1));
        let correct = m
            .splits
            .test
            .iter()
            .filter(|&&i| {
                let x = mean_of(i);
                usize::from((x - c1).abs() < (x - c0).abs()) == label(i)
            })
            .count();
        let acc = correct as f64 / m.splits.test.len() as f64;
        assert!(acc > 0.7, "{}: nearest-centroid accuracy {acc}", m.dataset_id);
    }
}

#[test]
fn per_dataset_normalisation_removes_heterogeneity() {
    let suite = standard_suite(0).unwrap();
    let raw: Vec<f64> = suite.iter().map(|m| m.gray_mean).collect();
    let spread = |v: &[f64]| {
        v.iter().cloned().fold(f64::NEG_INFINITY, f64::max) - v.iter().cloned().fold(f64::INFINITY, f64::min)
    };
    assert!(spread(&raw) > 50.0, "raw suite should be heterogeneous");
    let pool = aggregate(&suite, (32, 32), GrayNorm::PerDataset, 9).unwrap();
    let means: Vec<f64> = suite
        .iter()
        .map(|m| {
            let px: Vec<f64> = pool
                .iter()
                .filter(|p| p.dataset_id == m.dataset_id)
                .flat_map(|p| p.image.data().to_vec())
                .collect();
            px.iter().sum::<f64>() / px.len() as f64
        })
        .collect();
    assert!(spread(&means) < 0.2, "normalised means {means:?}");
}
