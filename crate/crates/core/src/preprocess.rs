//! Dataset manifests and the image pipeline that harmonises them:
//! Z-score gray-scale normalisation, bilinear resizing, pooling of several
//! datasets into one training set, and the restricted geometric
//! augmentation used to draw contrastive views.

use std::fs;
use std::path::{Path, PathBuf};

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{ensure, Error, Result};
use crate::nets::HeadConfig;
use crate::seed::{keyed_rng, stream, Rng};
use crate::tensor::Tensor;

/// Default gray-scale statistics of the aggregated pool.
pub const DEFAULT_GRAY_MEAN: f64 = 122.786;
pub const DEFAULT_GRAY_STD: f64 = 18.390;

/// One raw 8-bit gray-scale image with optional annotations.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageRecord {
    /// `1×H×W`, values in `[0, 255]`.
    pub pixels: Tensor,
    pub dataset_id: String,
    pub label: Option<usize>,
    /// Row-major `H×W` per-pixel labels.
    pub mask: Option<Vec<usize>>,
}

impl ImageRecord {
    pub fn height(&self) -> usize {
        self.pixels.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.pixels.shape()[2]
    }

    pub fn validate(&self, n_labels: Option<usize>) -> Result<()> {
        let s = self.pixels.shape();
        ensure!(
            s.len() == 3 && s[0] == 1,
            Dimension,
            "image must be 1×H×W, got {s:?}"
        );
        ensure!(
            self.pixels.data().iter().all(|v| (0.0..=255.0).contains(v)),
            Contract,
            "raw pixels of `{}` outside [0, 255]",
            self.dataset_id
        );
        if let Some(mask) = &self.mask {
            ensure!(
                mask.len() == s[1] * s[2],
                Dimension,
                "mask has {} entries for a {}×{} image",
                mask.len(),
                s[1],
                s[2]
            );
            if let Some(n) = n_labels {
                ensure!(
                    mask.iter().all(|&m| m < n),
                    Contract,
                    "mask label outside 0..{n}"
                );
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Splits {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetManifest {
    pub dataset_id: String,
    pub gray_mean: f64,
    pub gray_std: f64,
    pub task: Option<HeadConfig>,
    pub records: Vec<ImageRecord>,
    pub splits: Splits,
}

impl DatasetManifest {
    pub fn validate(&self) -> Result<()> {
        ensure!(
            self.gray_std > 0.0,
            Contract,
            "`{}`: gray_std must be positive",
            self.dataset_id
        );
        let n = self.records.len();
        let mut seen = vec![false; n];
        for &i in self
            .splits
            .train
            .iter()
            .chain(&self.splits.val)
            .chain(&self.splits.test)
        {
            ensure!(i < n, Contract, "`{}`: split index {i} ≥ {n}", self.dataset_id);
            ensure!(
                !seen[i],
                Contract,
                "`{}`: record {i} appears in two splits",
                self.dataset_id
            );
            seen[i] = true;
        }
        let n_labels = self.task.map(|t| t.num_classes);
        self.records
            .iter()
            .try_for_each(|r| r.validate(n_labels))
    }

    pub fn train_records(&self) -> impl Iterator<Item = &ImageRecord> {
        self.splits.train.iter().map(|&i| &self.records[i])
    }

    /// Reads a manifest; relative PGM paths resolve against its directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let wire: ManifestWire = serde_json::from_str(&text)?;
        let base = path.parent().unwrap_or(Path::new("."));
        wire.into_manifest(base)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string(&ManifestWire::from_manifest(self))?;
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct ManifestWire {
    dataset_id: String,
    gray_mean: f64,
    gray_std: f64,
    task: Option<HeadConfig>,
    records: Vec<RecordWire>,
    splits: Splits,
}

#[derive(Debug, Serialize, Deserialize)]
struct RecordWire {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    height: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    width: Option<usize>,
    /// Inline 8-bit pixels, row-major.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pixels: Option<Vec<u8>>,
    /// Binary PGM (P5) file.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    path: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    label: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    mask: Option<Vec<u8>>,
}

impl ManifestWire {
    fn from_manifest(m: &DatasetManifest) -> Self {
        let records = m
            .records
            .iter()
            .map(|r| RecordWire {
                height: Some(r.height()),
                width: Some(r.width()),
                pixels: Some(
                    r.pixels
                        .data()
                        .iter()
                        .map(|v| v.round().clamp(0.0, 255.0) as u8)
                        .collect(),
                ),
                path: None,
                label: r.label,
                mask: r
                    .mask
                    .as_ref()
                    .map(|m| m.iter().map(|&v| v as u8).collect()),
            })
            .collect();
        Self {
            dataset_id: m.dataset_id.clone(),
            gray_mean: m.gray_mean,
            gray_std: m.gray_std,
            task: m.task,
            records,
            splits: m.splits.clone(),
        }
    }

    fn into_manifest(self, base: &Path) -> Result<DatasetManifest> {
        let mut records = Vec::with_capacity(self.records.len());
        for (i, r) in self.records.into_iter().enumerate() {
            let pixels = match (r.pixels, r.path) {
                (Some(px), None) => {
                    let (h, w) = r.height.zip(r.width).ok_or_else(|| {
                        Error::Config(format!("record {i}: inline pixels need height and width"))
                    })?;
                    Tensor::new(vec![1, h, w], px.into_iter().map(f64::from).collect())?
                }
                (None, Some(p)) => read_pgm(&base.join(p))?,
                _ => {
                    return Err(Error::Config(format!(
                        "record {i}: exactly one of `pixels` or `path` is required"
                    )))
                }
            };
            records.push(ImageRecord {
                pixels,
                dataset_id: self.dataset_id.clone(),
                label: r.label,
                mask: r.mask.map(|m| m.into_iter().map(usize::from).collect()),
            });
        }
        let m = DatasetManifest {
            dataset_id: self.dataset_id,
            gray_mean: self.gray_mean,
            gray_std: self.gray_std,
            task: self.task,
            records,
            splits: self.splits,
        };
        m.validate()?;
        Ok(m)
    }
}

/// Reads an 8-bit binary PGM (`P5`) as a `1×H×W` tensor.
pub fn read_pgm(path: &Path) -> Result<Tensor> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    parse_pgm(&bytes).map_err(|msg| Error::Config(format!("{}: {msg}", path.display())))
}

fn parse_pgm(bytes: &[u8]) -> std::result::Result<Tensor, String> {
    let mut pos = 0;
    let mut token = || -> std::result::Result<String, String> {
        loop {
            while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if pos < bytes.len() && bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
                continue;
            }
            break;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err("truncated header".into());
        }
        Ok(String::from_utf8_lossy(&bytes[start..pos]).into_owned())
    };
    if token()? != "P5" {
        return Err("not a binary PGM (P5)".into());
    }
    let mut num = |what: &str| -> std::result::Result<usize, String> {
        token()?.parse().map_err(|_| format!("bad {what}"))
    };
    let (w, h, maxval) = (num("width")?, num("height")?, num("maxval")?);
    if maxval == 0 || maxval > 255 {
        return Err(format!("unsupported maxval {maxval}; only 8-bit PGM is accepted"));
    }
    let start = pos + 1;
    let data = bytes
        .get(start..start + w * h)
        .ok_or("pixel data truncated")?;
    let scale = 255.0 / maxval as f64;
    Tensor::new(
        vec![1, h, w],
        data.iter().map(|&b| f64::from(b) * scale).collect(),
    )
    .map_err(|e| e.to_string())
}

pub fn write_pgm(path: &Path, img: &Tensor) -> Result<()> {
    let s = img.shape();
    ensure!(s.len() == 3 && s[0] == 1, Dimension, "PGM needs 1×H×W, got {s:?}");
    let mut out = format!("P5\n{} {}\n255\n", s[2], s[1]).into_bytes();
    out.extend(img.data().iter().map(|v| v.round().clamp(0.0, 255.0) as u8));
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// `(pixels − mean) / std`, elementwise.
pub fn zscore_normalize(img: &ImageRecord, mean: f64, std: f64) -> Result<Tensor> {
    zscore(&img.pixels, mean, std)
}

pub fn zscore(pixels: &Tensor, mean: f64, std: f64) -> Result<Tensor> {
    ensure!(std > 0.0, Contract, "z-score std must be positive, got {std}");
    let data = pixels.data().iter().map(|v| (v - mean) / std).collect();
    Tensor::new(pixels.shape().to_vec(), data)
}

/// Source coordinate and blend weight for half-pixel-centre sampling.
fn bilinear_taps(out: usize, size: usize, n_out: usize) -> (usize, usize, f64) {
    let scale = size as f64 / n_out as f64;
    let src = ((out as f64 + 0.5) * scale - 0.5).clamp(0.0, (size - 1) as f64);
    let lo = src.floor() as usize;
    let hi = (lo + 1).min(size - 1);
    (lo, hi, src - lo as f64)
}

/// Bilinear resize of a `C×H×W` image using half-pixel centres.
pub fn resize_bilinear(img: &Tensor, out_h: usize, out_w: usize) -> Result<Tensor> {
    ensure!(
        out_h >= 1 && out_w >= 1,
        Contract,
        "resize target {out_h}×{out_w} has a zero dimension"
    );
    let s = img.shape();
    ensure!(s.len() == 3, Dimension, "resize needs C×H×W, got {s:?}");
    let (c, h, w) = (s[0], s[1], s[2]);
    if (h, w) == (out_h, out_w) {
        return Ok(img.clone());
    }
    let src = img.data();
    let cols: Vec<_> = (0..out_w).map(|x| bilinear_taps(x, w, out_w)).collect();
    let mut out = Vec::with_capacity(c * out_h * out_w);
    for ch in 0..c {
        let plane = &src[ch * h * w..(ch + 1) * h * w];
        for y in 0..out_h {
            let (y0, y1, fy) = bilinear_taps(y, h, out_h);
            for &(x0, x1, fx) in &cols {
                let top = plane[y0 * w + x0] * (1.0 - fx) + plane[y0 * w + x1] * fx;
                let bot = plane[y1 * w + x0] * (1.0 - fx) + plane[y1 * w + x1] * fx;
                out.push(top * (1.0 - fy) + bot * fy);
            }
        }
    }
    Tensor::new(vec![c, out_h, out_w], out)
}

/// Nearest-neighbour resize of an `H×W` label mask.
pub fn resize_mask(mask: &[usize], h: usize, w: usize, out_h: usize, out_w: usize) -> Vec<usize> {
    let pick = |o: usize, size: usize, n: usize| {
        (((o as f64 + 0.5) * size as f64 / n as f64).floor() as usize).min(size - 1)
    };
    let mut out = Vec::with_capacity(out_h * out_w);
    for y in 0..out_h {
        let sy = pick(y, h, out_h);
        for x in 0..out_w {
            out.push(mask[sy * w + pick(x, w, out_w)]);
        }
    }
    out
}

/// Source of the Z-score constants used when pooling datasets.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "mode")]
pub enum GrayNorm {
    /// One `(mean, std)` pair for every dataset.
    Fixed { mean: f64, std: f64 },
    /// Each dataset's own `gray_mean`/`gray_std` from its manifest.
    PerDataset,
}

impl Default for GrayNorm {
    fn default() -> Self {
        GrayNorm::PerDataset
    }
}

impl GrayNorm {
    pub fn stats_for(&self, m: &DatasetManifest) -> (f64, f64) {
        match *self {
            GrayNorm::Fixed { mean, std } => (mean, std),
            GrayNorm::PerDataset => (m.gray_mean, m.gray_std),
        }
    }
}

/// Normalise-then-resize one record.
pub fn prepare_image(
    rec: &ImageRecord,
    mean: f64,
    std: f64,
    target: (usize, usize),
) -> Result<Tensor> {
    let z = zscore_normalize(rec, mean, std)?;
    resize_bilinear(&z, target.0, target.1)
}

#[derive(Debug, Clone, PartialEq)]
pub struct PoolItem {
    pub image: Tensor,
    pub dataset_id: String,
}

/// Normalises and resizes every train-split record of every manifest into
/// one seeded-shuffled pool.
pub fn aggregate(
    manifests: &[DatasetManifest],
    target: (usize, usize),
    norm: GrayNorm,
    seed: u64,
) -> Result<Vec<PoolItem>> {
    ensure!(!manifests.is_empty(), Contract, "aggregate: no manifests");
    let mut pool = Vec::new();
    for m in manifests {
        let (mean, std) = norm.stats_for(m);
        for rec in m.train_records() {
            pool.push(PoolItem {
                image: prepare_image(rec, mean, std, target)?,
                dataset_id: m.dataset_id.clone(),
            });
        }
    }
    ensure!(!pool.is_empty(), Contract, "aggregate: pool is empty");
    let order = crate::nets::permutation(pool.len(), &mut keyed_rng(seed, &[stream::POOL_SHUFFLE]));
    let mut slots: Vec<Option<PoolItem>> = pool.into_iter().map(Some).collect();
    Ok(order.into_iter().map(|i| slots[i].take().unwrap()).collect())
}

/// Geometric view augmentation. Cropping, blurring and intensity jitter
/// are not representable; the wire form rejects any attempt to enable them.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "AugmentSpec", into = "AugmentSpec")]
pub struct AugmentPolicy {
    horizontal_flip: bool,
    flip_prob: f64,
    rotation_deg: f64,
    translate_px: usize,
}

/// Serialized form of [`AugmentPolicy`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AugmentSpec {
    #[serde(default)]
    pub horizontal_flip: bool,
    #[serde(default = "half")]
    pub flip_prob: f64,
    #[serde(default)]
    pub rotation_deg: f64,
    #[serde(default)]
    pub translate_px: usize,
    #[serde(default)]
    pub random_crop: bool,
    #[serde(default)]
    pub gaussian_blur: bool,
    #[serde(default)]
    pub color_jitter: bool,
}

fn half() -> f64 {
    0.5
}

impl TryFrom<AugmentSpec> for AugmentPolicy {
    type Error = Error;

    fn try_from(s: AugmentSpec) -> Result<Self> {
        ensure!(
            !(s.random_crop || s.gaussian_blur || s.color_jitter),
            Contract,
            "random cropping, gaussian blurring and color jitter are disabled for X-ray views"
        );
        ensure!(
            (0.0..=1.0).contains(&s.flip_prob),
            Contract,
            "flip probability {} outside [0, 1]",
            s.flip_prob
        );
        ensure!(
            s.rotation_deg >= 0.0 && s.rotation_deg.is_finite(),
            Contract,
            "rotation magnitude must be finite and non-negative"
        );
        Ok(Self {
            horizontal_flip: s.horizontal_flip,
            flip_prob: s.flip_prob,
            rotation_deg: s.rotation_deg,
            translate_px: s.translate_px,
        })
    }
}

impl From<AugmentPolicy> for AugmentSpec {
    fn from(p: AugmentPolicy) -> Self {
        Self {
            horizontal_flip: p.horizontal_flip,
            flip_prob: p.flip_prob,
            rotation_deg: p.rotation_deg,
            translate_px: p.translate_px,
            random_crop: false,
            gaussian_blur: false,
            color_jitter: false,
        }
    }
}

impl Default for AugmentPolicy {
    /// Flip with p = 0.5, rotation up to 10°, translation up to 2 px.
    fn default() -> Self {
        Self {
            horizontal_flip: true,
            flip_prob: 0.5,
            rotation_deg: 10.0,
            translate_px: 2,
        }
    }
}

impl AugmentPolicy {
    pub fn new(horizontal_flip: bool, rotation_deg: f64, translate_px: usize) -> Result<Self> {
        AugmentSpec {
            horizontal_flip,
            flip_prob: 0.5,
            rotation_deg,
            translate_px,
            random_crop: false,
            gaussian_blur: false,
            color_jitter: false,
        }
        .try_into()
    }

    pub fn identity() -> Self {
        Self {
            horizontal_flip: false,
            flip_prob: 0.5,
            rotation_deg: 0.0,
            translate_px: 0,
        }
    }

    pub fn with_flip_prob(mut self, p: f64) -> Result<Self> {
        ensure!((0.0..=1.0).contains(&p), Contract, "flip probability {p} outside [0, 1]");
        self.flip_prob = p;
        Ok(self)
    }

    pub fn random_crop(&self) -> bool {
        false
    }

    pub fn gaussian_blur(&self) -> bool {
        false
    }

    pub fn color_jitter(&self) -> bool {
        false
    }
}

pub fn hflip(img: &Tensor) -> Tensor {
    let s = img.shape();
    let w = s[s.len() - 1];
    let mut out = img.clone();
    for (dst, src) in out.data_mut().chunks_mut(w).zip(img.data().chunks(w)) {
        dst.iter_mut().zip(src.iter().rev()).for_each(|(d, s)| *d = *s);
    }
    out
}

/// Draws one augmented view of a `C×H×W` image. Pixels mapped from outside
/// the source are filled with zero; rotation resamples nearest-neighbour.
pub fn augment_view(img: &Tensor, policy: &AugmentPolicy, rng: &mut Rng) -> Tensor {
    // Draw order is fixed so views stay reproducible whatever the policy.
    let flip = rng.random::<f64>() < policy.flip_prob && policy.horizontal_flip;
    let angle = (rng.random::<f64>() * 2.0 - 1.0) * policy.rotation_deg.to_radians();
    let t = policy.translate_px as i64;
    let tx = rng.random_range(-t..=t);
    let ty = rng.random_range(-t..=t);

    let base = if flip { hflip(img) } else { img.clone() };
    if angle == 0.0 && tx == 0 && ty == 0 {
        return base;
    }
    let s = base.shape();
    let (c, h, w) = (s[0], s[1], s[2]);
    let (cy, cx) = ((h as f64 - 1.0) / 2.0, (w as f64 - 1.0) / 2.0);
    let (sin, cos) = angle.sin_cos();
    let src = base.data();
    let mut out = vec![0.0; src.len()];
    for y in 0..h {
        for x in 0..w {
            // Undo translation, then rotation about the centre.
            let dy = (y as i64 - ty) as f64 - cy;
            let dx = (x as i64 - tx) as f64 - cx;
            let sy = (cos * dy - sin * dx + cy).round();
            let sx = (sin * dy + cos * dx + cx).round();
            if sy < 0.0 || sx < 0.0 || sy >= h as f64 || sx >= w as f64 {
                continue;
            }
            let (sy, sx) = (sy as usize, sx as usize);
            for ch in 0..c {
                out[(ch * h + y) * w + x] = src[(ch * h + sy) * w + sx];
            }
        }
    }
    Tensor::new(s.to_vec(), out).expect("shape preserved")
}

#[cfg(test)]
mod tests {
    use super::*;

    fn record(data: Vec<f64>, h: usize, w: usize) -> ImageRecord {
        ImageRecord {
            pixels: Tensor::new(vec![1, h, w], data).unwrap(),
            dataset_id: "t".into(),
            label: None,
            mask: None,
        }
    }

    #[test]
    fn zscore_with_default_constants() {
        let r = record(vec![122.786, 141.176], 1, 2);
        let z = zscore_normalize(&r, DEFAULT_GRAY_MEAN, DEFAULT_GRAY_STD).unwrap();
        assert!(z.data()[0].abs() < 1e-12);
        assert!((z.data()[1] - 1.0).abs() < 1e-12);
        let id = zscore_normalize(&r, 0.0, 1.0).unwrap();
        assert_eq!(id.data(), r.pixels.data());
        assert!(matches!(zscore_normalize(&r, 0.0, 0.0), Err(Error::Contract(_))));
    }

    #[test]
    fn resize_identity_and_constant() {
        let img = Tensor::new(vec![1, 3, 5], (0..15).map(f64::from).collect()).unwrap();
        assert_eq!(resize_bilinear(&img, 3, 5).unwrap(), img);
        let c = Tensor::full(&[1, 7, 9], 4.25);
        let r = resize_bilinear(&c, 4, 13).unwrap();
        assert!(r.data().iter().all(|&v| v == 4.25));
        assert!(resize_bilinear(&c, 0, 4).is_err());
    }

    #[test]
    fn forbidden_flags_rejected() {
        let spec = AugmentSpec {
            horizontal_flip: true,
            flip_prob: 0.5,
            rotation_deg: 0.0,
            translate_px: 0,
            random_crop: true,
            gaussian_blur: false,
            color_jitter: false,
        };
        assert!(AugmentPolicy::try_from(spec).is_err());
        let json = r#"{"horizontal_flip":true,"color_jitter":true}"#;
        assert!(serde_json::from_str::<AugmentPolicy>(json).is_err());
        let ok: AugmentPolicy = serde_json::from_str(r#"{"horizontal_flip":true}"#).unwrap();
        assert!(!ok.random_crop() && !ok.gaussian_blur() && !ok.color_jitter());
    }

    #[test]
    fn identity_policy_and_double_flip() {
        let img = Tensor::new(vec![1, 4, 6], (0..24).map(f64::from).collect()).unwrap();
        let mut rng = keyed_rng(1, &[]);
        assert_eq!(augment_view(&img, &AugmentPolicy::identity(), &mut rng), img);
        assert_eq!(hflip(&hflip(&img)), img);
        assert_ne!(hflip(&img), img);
    }

    #[test]
    fn pgm_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.pgm");
        let img = Tensor::new(vec![1, 2, 3], vec![0.0, 1.0, 2.0, 100.0, 200.0, 255.0]).unwrap();
        write_pgm(&p, &img).unwrap();
        assert_eq!(read_pgm(&p).unwrap(), img);
        fs::write(&p, b"P2\n1 1\n255\n0").unwrap();
        assert!(read_pgm(&p).is_err());
    }

    #[test]
    fn manifest_rejects_overlapping_splits() {
        let m = DatasetManifest {
            dataset_id: "d".into(),
            gray_mean: 0.0,
            gray_std: 1.0,
            task: None,
            records: vec![record(vec![0.0], 1, 1), record(vec![1.0], 1, 1)],
            splits: Splits {
                train: vec![0],
                val: vec![],
                test: vec![0],
            },
        };
        assert!(m.validate().is_err());
    }

    #[test]
    fn mask_nearest_resize_preserves_labels() {
        let mask = vec![0, 1, 1, 0];
        let up = resize_mask(&mask, 2, 2, 4, 4);
        assert_eq!(up[0..4], [0, 0, 1, 1]);
        assert_eq!(resize_mask(&up, 4, 4, 2, 2), mask);
    }
}
