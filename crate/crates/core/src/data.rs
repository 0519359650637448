//! Datasets on disk, leave-one-domain-out splits and the synthetic
//! multi-domain generator.
//!
//! Layout: `root/<domain>/images/*.{png,jpg,jpeg}` and
//! `root/<domain>/masks/*.png`, paired by file stem. Masks are 8-bit
//! single-channel label indices.

use std::collections::{BTreeMap, BTreeSet};
use std::f64::consts::PI;
use std::fs;
use std::path::{Path, PathBuf};

use image::imageops::{self, FilterType};
use image::{GrayImage, RgbImage};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::batch::{ImageBatch, LabelBatch};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub stem: String,
    /// `[3, H, W]` in `[0, 1]`.
    pub image: Tensor,
    /// `H * W` label indices.
    pub mask: Vec<u8>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DomainDataset {
    pub name: String,
    pub categories: usize,
    pub size: usize,
    pub samples: Vec<Sample>,
}

impl DomainDataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn mean_intensity(&self) -> f64 {
        let total: f64 = self
            .samples
            .iter()
            .map(|s| s.image.sum() / s.image.numel() as f64)
            .sum();
        total / self.samples.len().max(1) as f64
    }
}

/// A sample addressed by domain position and sample position.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct SampleRef {
    pub domain: usize,
    pub index: usize,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DatasetSplit {
    pub holdout: String,
    pub fold: usize,
    pub train_domains: Vec<String>,
    pub train: Vec<SampleRef>,
    pub validation: Vec<SampleRef>,
    pub test: Vec<SampleRef>,
}

impl DatasetSplit {
    /// Error unless train, validation and test are pairwise disjoint and the
    /// held-out domain appears only in test.
    pub fn check_disjoint(&self, domains: &[DomainDataset]) -> Result<()> {
        let mut seen = BTreeSet::new();
        for r in self.train.iter().chain(&self.validation).chain(&self.test) {
            if !seen.insert(*r) {
                return Err(Error::InvalidArgument(format!(
                    "sample {r:?} appears twice in a split"
                )));
            }
        }
        let held = domains.iter().position(|d| d.name == self.holdout);
        if self
            .train
            .iter()
            .chain(&self.validation)
            .any(|r| Some(r.domain) == held)
        {
            return Err(Error::InvalidArgument(format!(
                "held-out domain {} leaks into training",
                self.holdout
            )));
        }
        if self.test.iter().any(|r| Some(r.domain) != held) {
            return Err(Error::InvalidArgument(
                "test holds a non-held-out domain".into(),
            ));
        }
        Ok(())
    }
}

fn is_image(p: &Path) -> bool {
    matches!(
        p.extension()
            .and_then(|e| e.to_str())
            .map(str::to_ascii_lowercase)
            .as_deref(),
        Some("png" | "jpg" | "jpeg")
    )
}

fn stems(dir: &Path, accept: fn(&Path) -> bool) -> Result<BTreeMap<String, PathBuf>> {
    let mut out = BTreeMap::new();
    for entry in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        if !path.is_file() || !accept(&path) {
            continue;
        }
        let stem = path
            .file_stem()
            .and_then(|s| s.to_str())
            .unwrap_or_default()
            .to_string();
        if let Some(prev) = out.insert(stem, path.clone()) {
            return Err(Error::data(
                path,
                format!("duplicate stem, also {}", prev.display()),
            ));
        }
    }
    Ok(out)
}

fn read_image(path: &Path, size: usize) -> Result<Tensor> {
    let img = image::open(path)
        .map_err(|e| Error::data(path, e.to_string()))?
        .to_rgb8();
    let img = if img.dimensions() == (size as u32, size as u32) {
        img
    } else {
        imageops::resize(&img, size as u32, size as u32, FilterType::Triangle)
    };
    Ok(rgb_to_tensor(&img))
}

fn read_mask(path: &Path, size: usize, categories: usize) -> Result<Vec<u8>> {
    let mask = image::open(path).map_err(|e| Error::data(path, e.to_string()))?;
    if mask.color().channel_count() != 1 {
        return Err(Error::data(path, "mask must be single-channel"));
    }
    let mask = mask.to_luma8();
    if let Some(v) = mask.as_raw().iter().find(|&&v| v as usize >= categories) {
        return Err(Error::data(
            path,
            format!("mask value {v} >= {categories} categories"),
        ));
    }
    let mask = if mask.dimensions() == (size as u32, size as u32) {
        mask
    } else {
        imageops::resize(&mask, size as u32, size as u32, FilterType::Nearest)
    };
    Ok(mask.into_raw())
}

pub fn rgb_to_tensor(img: &RgbImage) -> Tensor {
    let (w, h) = (img.width() as usize, img.height() as usize);
    let raw = img.as_raw();
    Tensor::from_fn(&[3, h, w], |i| {
        let (c, p) = (i / (h * w), i % (h * w));
        raw[p * 3 + c] as f64 / 255.0
    })
}

pub fn tensor_to_rgb(t: &Tensor) -> Result<RgbImage> {
    let s = t.shape();
    if s.len() != 3 || s[0] != 3 {
        return Err(Error::Shape(format!("expected [3, H, W], got {s:?}")));
    }
    let (h, w) = (s[1], s[2]);
    let mut buf = vec![0u8; h * w * 3];
    for (i, v) in t.data().iter().enumerate() {
        let (c, p) = (i / (h * w), i % (h * w));
        buf[p * 3 + c] = (v.clamp(0.0, 1.0) * 255.0).round() as u8;
    }
    Ok(RgbImage::from_raw(w as u32, h as u32, buf).expect("buffer size"))
}

/// Load one domain directory, resizing to `size x size`.
pub fn load_domain(dir: &Path, categories: usize, size: usize) -> Result<DomainDataset> {
    let name = dir
        .file_name()
        .and_then(|n| n.to_str())
        .ok_or_else(|| Error::data(dir, "domain directory has no name"))?
        .to_string();
    let images = stems(&dir.join("images"), is_image)?;
    let masks = stems(&dir.join("masks"), |p| {
        p.extension()
            .and_then(|e| e.to_str())
            .map(str::to_ascii_lowercase)
            .as_deref()
            == Some("png")
    })?;
    if let Some((_, p)) = images.iter().find(|(s, _)| !masks.contains_key(*s)) {
        return Err(Error::data(p, "image has no mask"));
    }
    if let Some((_, p)) = masks.iter().find(|(s, _)| !images.contains_key(*s)) {
        return Err(Error::data(p, "mask has no image"));
    }
    if images.is_empty() {
        return Err(Error::data(dir, "no images"));
    }
    let samples = images
        .iter()
        .map(|(stem, ip)| {
            Ok(Sample {
                stem: stem.clone(),
                image: read_image(ip, size)?,
                mask: read_mask(&masks[stem], size, categories)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(DomainDataset {
        name,
        categories,
        size,
        samples,
    })
}

/// Every domain directory under `root`, sorted by name.
pub fn load_root(root: &Path, categories: usize, size: usize) -> Result<Vec<DomainDataset>> {
    let mut dirs = Vec::new();
    for entry in fs::read_dir(root).map_err(|e| Error::io(root, e))? {
        let path = entry.map_err(|e| Error::io(root, e))?.path();
        if path.join("images").is_dir() {
            dirs.push(path);
        }
    }
    dirs.sort();
    if dirs.is_empty() {
        return Err(Error::data(
            root,
            "no domain directories with an images/ folder",
        ));
    }
    dirs.iter()
        .map(|d| load_domain(d, categories, size))
        .collect()
}

/// Write a domain in the standard layout under `root/<name>`.
pub fn write_domain(domain: &DomainDataset, root: &Path) -> Result<()> {
    let base = root.join(&domain.name);
    for sub in ["images", "masks"] {
        fs::create_dir_all(base.join(sub)).map_err(|e| Error::io(base.join(sub), e))?;
    }
    for s in &domain.samples {
        let ip = base.join("images").join(format!("{}.png", s.stem));
        tensor_to_rgb(&s.image)?
            .save(&ip)
            .map_err(|e| Error::data(&ip, e.to_string()))?;
        let mp = base.join("masks").join(format!("{}.png", s.stem));
        let size = domain.size as u32;
        GrayImage::from_raw(size, size, s.mask.clone())
            .ok_or_else(|| Error::data(&mp, "mask size mismatch"))?
            .save(&mp)
            .map_err(|e| Error::data(&mp, e.to_string()))?;
    }
    Ok(())
}

fn domain_rng(seed: u64, domain: usize, salt: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(salt.wrapping_mul(1_000_003).wrapping_add(domain as u64));
    rng
}

/// Seeded order of a domain's samples, truncated to `cap`.
fn domain_order(len: usize, domain: usize, cap: Option<usize>, seed: u64) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..len).collect();
    idx.shuffle(&mut domain_rng(seed, domain, 1));
    if let Some(c) = cap {
        idx.truncate(c);
    }
    idx
}

fn fold_part(order: &[usize], fold: usize, folds: usize) -> std::ops::Range<usize> {
    let n = order.len();
    fold * n / folds..(fold + 1) * n / folds
}

/// All `(held-out domain, fold)` splits, domain-major. Each domain is
/// shuffled with `seed`, capped, then cut into `folds` contiguous parts.
pub fn make_lodo_splits(
    domains: &[DomainDataset],
    folds: usize,
    cap: Option<usize>,
    seed: u64,
) -> Result<Vec<DatasetSplit>> {
    if domains.len() < 2 {
        return Err(Error::InvalidArgument(format!(
            "leave-one-domain-out needs at least 2 domains, got {}",
            domains.len()
        )));
    }
    if folds < 2 {
        return Err(Error::InvalidArgument(format!(
            "folds must be >= 2, got {folds}"
        )));
    }
    let orders: Vec<Vec<usize>> = domains
        .iter()
        .enumerate()
        .map(|(d, ds)| domain_order(ds.len(), d, cap, seed))
        .collect();
    for (ds, order) in domains.iter().zip(&orders) {
        if order.len() < folds {
            return Err(Error::InvalidArgument(format!(
                "domain {} has {} samples, fewer than {folds} folds",
                ds.name,
                order.len()
            )));
        }
    }
    let refs = |d: usize, range: std::ops::Range<usize>| -> Vec<SampleRef> {
        orders[d][range]
            .iter()
            .map(|&index| SampleRef { domain: d, index })
            .collect()
    };
    let mut splits = Vec::with_capacity(domains.len() * folds);
    for (held, hd) in domains.iter().enumerate() {
        for fold in 0..folds {
            let mut split = DatasetSplit {
                holdout: hd.name.clone(),
                fold,
                train_domains: Vec::new(),
                train: Vec::new(),
                validation: Vec::new(),
                test: refs(held, fold_part(&orders[held], fold, folds)),
            };
            for d in (0..domains.len()).filter(|&d| d != held) {
                let part = fold_part(&orders[d], fold, folds);
                split.train_domains.push(domains[d].name.clone());
                split.train.extend(refs(d, 0..part.start));
                split.train.extend(refs(d, part.end..orders[d].len()));
                split.validation.extend(refs(d, part));
            }
            splits.push(split);
        }
    }
    Ok(splits)
}

/// Fixed protocol on a single domain: the first `train` samples by stem
/// order train, the next `validation` validate, the rest test.
pub fn fixed_split(
    domains: &[DomainDataset],
    domain: &str,
    train: usize,
    validation: usize,
) -> Result<DatasetSplit> {
    let d = domains
        .iter()
        .position(|x| x.name == domain)
        .ok_or_else(|| Error::Unknown {
            kind: "domain",
            name: domain.into(),
            available: domains
                .iter()
                .map(|x| x.name.as_str())
                .collect::<Vec<_>>()
                .join(", "),
        })?;
    let n = domains[d].len();
    if train + validation >= n {
        return Err(Error::InvalidArgument(format!(
            "domain {domain} has {n} samples, cannot hold {train} train + {validation} validation + test"
        )));
    }
    let r =
        |range: std::ops::Range<usize>| range.map(|index| SampleRef { domain: d, index }).collect();
    Ok(DatasetSplit {
        holdout: domain.into(),
        fold: 0,
        train_domains: vec![domain.into()],
        train: r(0..train),
        validation: r(train..train + validation),
        test: r(train + validation..n),
    })
}

/// Shuffle each domain's samples and interleave them round-robin.
pub fn round_robin(refs: &[SampleRef], rng: &mut ChaCha8Rng) -> Vec<SampleRef> {
    let mut by_domain: BTreeMap<usize, Vec<SampleRef>> = BTreeMap::new();
    for r in refs {
        by_domain.entry(r.domain).or_default().push(*r);
    }
    let mut queues: Vec<Vec<SampleRef>> = by_domain.into_values().collect();
    for q in &mut queues {
        q.shuffle(rng);
        q.reverse();
    }
    let mut out = Vec::with_capacity(refs.len());
    while out.len() < refs.len() {
        for q in &mut queues {
            if let Some(r) = q.pop() {
                out.push(r);
            }
        }
    }
    out
}

pub fn resolve<'a>(domains: &'a [DomainDataset], r: SampleRef) -> &'a Sample {
    &domains[r.domain].samples[r.index]
}

/// Stack referenced samples into a batch.
pub fn make_batch(
    domains: &[DomainDataset],
    refs: &[SampleRef],
) -> Result<(ImageBatch, LabelBatch)> {
    let samples: Vec<&Sample> = refs.iter().map(|&r| resolve(domains, r)).collect();
    let images: Vec<&Tensor> = samples.iter().map(|s| &s.image).collect();
    let x = ImageBatch::stack(&images)?;
    let (_, h, w) = x.dims();
    let masks: Vec<&[u8]> = samples.iter().map(|s| s.mask.as_slice()).collect();
    let k = domains[refs[0].domain].categories;
    let y = LabelBatch::stack(&masks, h, w, k)?;
    Ok((x, y))
}

/// Appearance of one synthetic domain.
#[derive(Clone, Debug, PartialEq)]
pub struct SynthDomainSpec {
    pub name: String,
    /// Rotation of colours about the grey axis, radians.
    pub hue_shift: f64,
    /// Gain about mid-grey.
    pub contrast: f64,
    /// Standard deviation of additive per-pixel noise.
    pub noise: f64,
    /// Additive RGB offset.
    pub tint: [f64; 3],
    /// Centre of the output intensity window.
    pub level: f64,
}

/// `n` domains spread in brightness, hue, contrast and noise.
pub fn default_specs(n: usize) -> Result<Vec<SynthDomainSpec>> {
    if !(2..=8).contains(&n) {
        return Err(Error::InvalidArgument(format!(
            "synthetic domains must number 2 to 8, got {n}"
        )));
    }
    Ok((0..n)
        .map(|d| {
            let t = d as f64 - (n as f64 - 1.0) / 2.0;
            SynthDomainSpec {
                name: format!("domain{d}"),
                hue_shift: 2.0 * PI * d as f64 / n as f64,
                contrast: [1.0, 0.6, 1.4, 0.8][d % 4],
                noise: [0.02, 0.08, 0.04, 0.12][(d / 2 + d) % 4],
                tint: [0.04 * t.signum(), 0.0, -0.04 * t.signum()],
                level: 0.5 + t * (0.5 / (n as f64 - 1.0)).min(0.1),
            }
        })
        .collect())
}

/// Vessel-like curves (label 1) on a smooth background (label 0).
struct Structure {
    shade: Vec<f64>,
    mask: Vec<u8>,
}

fn draw_structure(size: usize, rng: &mut ChaCha8Rng) -> Structure {
    let s = size as f64;
    let mut mask = vec![0u8; size * size];
    let curves = rng.gen_range(2..=4);
    let turn = Normal::new(0.0, 0.18).expect("finite");
    for _ in 0..curves {
        let mut x = rng.gen_range(0.1..0.9) * s;
        let mut y = rng.gen_range(0.1..0.9) * s;
        let mut heading = rng.gen_range(0.0..2.0 * PI);
        let radius = rng.gen_range(0.012..0.025) * s;
        let steps = (rng.gen_range(0.5..1.0) * s) as usize;
        for _ in 0..steps {
            stamp(&mut mask, size, x, y, radius.max(0.6));
            heading += turn.sample(rng);
            x += heading.cos();
            y += heading.sin();
            if x < 0.0 || y < 0.0 || x >= s || y >= s {
                break;
            }
        }
    }
    // smooth background shading from a few low-frequency waves
    let waves: Vec<(f64, f64, f64, f64)> = (0..3)
        .map(|_| {
            (
                rng.gen_range(0.5..2.5) * 2.0 * PI / s,
                rng.gen_range(0.5..2.5) * 2.0 * PI / s,
                rng.gen_range(0.0..2.0 * PI),
                rng.gen_range(0.03..0.08),
            )
        })
        .collect();
    let shade = (0..size * size)
        .map(|p| {
            let (py, px) = ((p / size) as f64, (p % size) as f64);
            waves
                .iter()
                .map(|(fx, fy, ph, a)| a * (fx * px + fy * py + ph).sin())
                .sum()
        })
        .collect();
    Structure { shade, mask }
}

fn stamp(mask: &mut [u8], size: usize, cx: f64, cy: f64, r: f64) {
    let lo = |c: f64| (c - r).floor().max(0.0) as usize;
    let hi = |c: f64| ((c + r).ceil() as usize).min(size - 1);
    for y in lo(cy)..=hi(cy) {
        for x in lo(cx)..=hi(cx) {
            let (dx, dy) = (x as f64 + 0.5 - cx, y as f64 + 0.5 - cy);
            if dx * dx + dy * dy <= r * r {
                mask[y * size + x] = 1;
            }
        }
    }
}

/// Rotate an RGB colour about the grey axis.
fn rotate_hue(rgb: [f64; 3], angle: f64) -> [f64; 3] {
    let (c, s) = (angle.cos(), angle.sin());
    let k = (1.0 - c) / 3.0;
    let r3 = 1.0 / 3f64.sqrt();
    let m = [
        [c + k, k - r3 * s, k + r3 * s],
        [k + r3 * s, c + k, k - r3 * s],
        [k - r3 * s, k + r3 * s, c + k],
    ];
    let mut out = [0.0; 3];
    for (o, row) in out.iter_mut().zip(&m) {
        *o = row.iter().zip(&rgb).map(|(a, b)| a * b).sum();
    }
    out
}

const BACKGROUND: [f64; 3] = [0.75, 0.42, 0.28];
const VESSEL: [f64; 3] = [0.45, 0.16, 0.10];
/// Rendered intensities land in `level +- WINDOW / 2`.
const WINDOW: f64 = 0.5;

fn render(st: &Structure, spec: &SynthDomainSpec, size: usize, rng: &mut ChaCha8Rng) -> Tensor {
    let noise = Normal::new(0.0, spec.noise.max(0.0)).expect("finite");
    let bg = rotate_hue(BACKGROUND, spec.hue_shift);
    let fg = rotate_hue(VESSEL, spec.hue_shift);
    let hw = size * size;
    let grey = BACKGROUND.iter().sum::<f64>() / 3.0;
    let lo = spec.level - WINDOW / 2.0;
    let mut data = vec![0.0; 3 * hw];
    for p in 0..hw {
        let base = if st.mask[p] == 1 { fg } else { bg };
        for c in 0..3 {
            let v = base[c] + st.shade[p];
            let v = grey + spec.contrast * (v - grey) + spec.tint[c] + noise.sample(rng);
            data[c * hw + p] = (lo + WINDOW * v.clamp(0.0, 1.0)).clamp(0.0, 1.0);
        }
    }
    Tensor::new(&[3, size, size], data).expect("shape")
}

/// `count` samples per spec. Every domain draws its own vessel structures
/// from one shared distribution and renders them with its own appearance.
pub fn generate_synthetic(
    specs: &[SynthDomainSpec],
    count: usize,
    size: usize,
    seed: u64,
) -> Result<Vec<DomainDataset>> {
    if specs.len() < 2 {
        return Err(Error::InvalidArgument(format!(
            "domain generalization needs at least 2 domains, got {}",
            specs.len()
        )));
    }
    if size < 8 {
        return Err(Error::InvalidArgument(format!(
            "image size {size} is below 8"
        )));
    }
    Ok(specs
        .iter()
        .enumerate()
        .map(|(d, spec)| {
            // each domain draws its own vessel trees from the same distribution
            let mut shapes = domain_rng(seed, d, 2);
            let mut rng = domain_rng(seed, d, 3);
            DomainDataset {
                name: spec.name.clone(),
                categories: 2,
                size,
                samples: (0..count)
                    .map(|i| {
                        let st = draw_structure(size, &mut shapes);
                        Sample {
                            stem: format!("{i:04}"),
                            image: render(&st, spec, size, &mut rng),
                            mask: st.mask,
                        }
                    })
                    .collect(),
            }
        })
        .collect())
}
