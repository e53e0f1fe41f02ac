//! Procedural multi-domain organ-phantom dataset.
//!
//! A scene is a fixed arrangement of simple "organ" shapes on a small canvas;
//! it plays the role of patient anatomy and is shared across all domains.
//! A domain style renders that anatomy with its own per-class intensity
//! bands, texture and global gamma, standing in for the appearance of
//! different imaging modalities. Because the same scene is rendered under
//! every style, every domain has exact ground-truth masks and translation
//! quality is directly measurable.
//!
//! Everything here is a pure function of (seed, config): same inputs, same
//! bytes on disk.

use std::path::{Path, PathBuf};

use ndarray::Array2;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::containerio::{self, ArrayData, IoError, SampleArray};
use crate::rngutil;

#[derive(Debug, thiserror::Error)]
pub enum PhantomError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("class separability violated: {0}")]
    Separability(String),
    #[error(transparent)]
    Io(#[from] IoError),
    #[error("{path}: manifest error: {msg}")]
    Manifest { path: PathBuf, msg: String },
}

/// Organ silhouette primitive.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum ShapeKind {
    /// Rotated ellipse.
    Ellipse,
    /// Rotated superellipse with exponent 4 (rounded box).
    Box,
    /// Ellipse with an off-center elliptical bite removed.
    Crescent,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OrganSpec {
    pub kind: ShapeKind,
    /// Center in pixels (row, col).
    pub center: (f64, f64),
    /// Semi-axes in pixels (radius_row, radius_col).
    pub radii: (f64, f64),
    /// Rotation in radians.
    pub rotation: f64,
    /// Label id in 1..=K; later organs win overlapping pixels.
    pub label: u8,
}

/// Shared anatomy: deterministic in (seed, config).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhantomScene {
    pub organs: Vec<OrganSpec>,
    /// (height, width) in pixels.
    pub canvas: (usize, usize),
    pub seed: u64,
}

/// Distribution the scenes are drawn from.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SceneConfig {
    /// Number of organ classes K (labels 1..=K; 0 is background).
    pub n_classes: usize,
    /// Canvas (height, width).
    pub canvas: (usize, usize),
    /// Organ semi-axis range as a fraction of min(canvas).
    pub radius_frac: (f64, f64),
    /// Organs stay at least this many pixels away from the border.
    pub margin_px: f64,
}

impl Default for SceneConfig {
    fn default() -> Self {
        SceneConfig {
            n_classes: 3,
            canvas: (64, 64),
            radius_frac: (0.11, 0.21),
            margin_px: 2.0,
        }
    }
}

/// Monotone piecewise-linear intensity band for one label class, with nodes
/// at t = 0, 0.5, 1 in normalized [0,1] intensity space.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Band {
    pub lo: f64,
    pub mid: f64,
    pub hi: f64,
}

impl Band {
    pub fn flat(v: f64) -> Self {
        Band {
            lo: v,
            mid: v,
            hi: v,
        }
    }

    #[allow(dead_code)]
    fn eval(&self, t: f64) -> f64 {
        let t = t.clamp(0.0, 1.0);
        if t < 0.5 {
            self.lo + 2.0 * t * (self.mid - self.lo)
        } else {
            self.mid + (2.0 * t - 1.0) * (self.hi - self.mid)
        }
    }
}

/// Low-order polynomial gain field over normalized coordinates u, v in
/// [-1, 1]: gain = 1 + strength * (gx*u + gy*v + gxy*u*v).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BiasField {
    pub gx: f64,
    pub gy: f64,
    pub gxy: f64,
    pub strength: f64,
}

/// Appearance of one imaging domain.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DomainStyle {
    pub domain_id: usize,
    /// One band per class, index 0 = background.
    pub bands: Vec<Band>,
    /// Correlated noise amplitude in normalized intensity units.
    pub noise_amp: f64,
    /// Noise correlation length in pixels.
    pub noise_corr_px: f64,
    /// Off by default; models slow multiplicative gain variation.
    pub bias_field: Option<BiasField>,
    /// Global gamma applied in [0,1] intensity space.
    pub gamma: f64,
    /// Per-sample appearance variation (std of a global band shift), so
    /// style is a property of the image rather than a domain constant.
    pub brightness_jitter: f64,
    /// Per-sample contrast variation (std of log contrast around 0.5).
    pub contrast_jitter: f64,
}

impl DomainStyle {
    /// Benchmark styles: per-domain permutations of evenly spaced intensity
    /// bands, so class ordering inverts across domains and translation is
    /// never a global affine remap.
    pub fn default_styles(n_domains: usize, n_classes: usize) -> Vec<DomainStyle> {
        let k1 = n_classes + 1;
        let centers: Vec<f64> = (0..k1)
            .map(|c| 0.08 + (0.92 - 0.08) * c as f64 / (k1 - 1).max(1) as f64)
            .collect();
        let spacing = if k1 > 1 { centers[1] - centers[0] } else { 0.4 };
        let hw = (0.3 * spacing).min(0.06);
        let params = [(0.035, 1.6, 1.0), (0.055, 2.6, 1.12), (0.045, 1.2, 0.9)];
        (0..n_domains)
            .map(|d| {
                let order = domain_order(d, k1);
                let bands = (0..k1)
                    .map(|c| {
                        let m = centers[order[c]];
                        Band {
                            lo: m - hw,
                            mid: m,
                            hi: m + hw,
                        }
                    })
                    .collect();
                let (amp, corr, gamma) = params[d % params.len()];
                DomainStyle {
                    domain_id: d,
                    bands,
                    noise_amp: amp,
                    noise_corr_px: corr,
                    bias_field: None,
                    gamma,
                    brightness_jitter: 0.03,
                    contrast_jitter: 0.05,
                }
            })
            .collect()
    }
}

/// Per-domain assignment of classes to intensity ranks. Domain 0 is
/// ascending, domain 1 is rotated, domain 2 is reversed; further domains use
/// seeded permutations.
fn domain_order(d: usize, k1: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..k1).collect();
    match d {
        0 => {}
        1 => order.rotate_left(k1.div_ceil(2).min(k1.saturating_sub(1)).max(1)),
        2 => order.reverse(),
        _ => {
            let mut rng = rngutil::rng_from(d as u64, "domain-order");
            for i in (1..k1).rev() {
                let j = rng.gen_range(0..=i);
                order.swap(i, j);
            }
        }
    }
    order
}

/// One rendered (image, mask) pair.
#[derive(Debug, Clone)]
pub struct LabeledSample {
    /// (H, W), values in [-1, 1].
    pub image: Array2<f32>,
    /// (H, W), labels in 0..=K.
    pub mask: Array2<u8>,
    pub domain: usize,
    pub scene_seed: u64,
}

/// Draw a scene from the configured distribution. Same (seed, config) gives
/// a bit-identical scene.
pub fn generate_scene(seed: u64, config: &SceneConfig) -> Result<PhantomScene, PhantomError> {
    if config.n_classes < 1 {
        return Err(PhantomError::Config(format!(
            "n_classes must be >= 1, got {}",
            config.n_classes
        )));
    }
    let (h, w) = config.canvas;
    if h < 32 || w < 32 {
        return Err(PhantomError::Config(format!(
            "canvas must be at least 32x32, got {h}x{w}"
        )));
    }
    let min_dim = h.min(w) as f64;
    let (rlo, rhi) = (
        config.radius_frac.0 * min_dim,
        config.radius_frac.1 * min_dim,
    );
    if rlo <= 0.0 || rhi < rlo {
        return Err(PhantomError::Config(format!(
            "radius_frac range ({}, {}) is empty or non-positive",
            config.radius_frac.0, config.radius_frac.1
        )));
    }
    if 2.0 * (rhi + config.margin_px) >= min_dim {
        return Err(PhantomError::Config(format!(
            "canvas {h}x{w} too small for organs of radius up to {rhi:.1}px"
        )));
    }
    let mut rng = rngutil::rng_from(seed, "scene");
    let kinds = [ShapeKind::Ellipse, ShapeKind::Box, ShapeKind::Crescent];
    let organs = (0..config.n_classes)
        .map(|k| {
            let kind = kinds[rngutil::uniform_usize(&mut rng, kinds.len())];
            let rr = rngutil::uniform(&mut rng, rlo, rhi);
            let rc = rngutil::uniform(&mut rng, rlo, rhi);
            let rmax = rr.max(rc) + config.margin_px;
            let cy = rngutil::uniform(&mut rng, rmax, h as f64 - rmax);
            let cx = rngutil::uniform(&mut rng, rmax, w as f64 - rmax);
            let rotation = rngutil::uniform(&mut rng, 0.0, std::f64::consts::PI);
            OrganSpec {
                kind,
                center: (cy, cx),
                radii: (rr, rc),
                rotation,
                label: (k + 1) as u8,
            }
        })
        .collect();
    Ok(PhantomScene {
        organs,
        canvas: config.canvas,
        seed,
    })
}

fn inside_superellipse(dy: f64, dx: f64, rr: f64, rc: f64, exponent: f64) -> bool {
    let a = (dy / rr).abs().powf(exponent);
    let b = (dx / rc).abs().powf(exponent);
    a + b <= 1.0
}

fn organ_contains(o: &OrganSpec, y: f64, x: f64) -> bool {
    let (cy, cx) = o.center;
    let (s, c) = o.rotation.sin_cos();
    let dy = (y - cy) * c + (x - cx) * s;
    let dx = -(y - cy) * s + (x - cx) * c;
    let (rr, rc) = o.radii;
    match o.kind {
        ShapeKind::Ellipse => inside_superellipse(dy, dx, rr, rc, 2.0),
        ShapeKind::Box => inside_superellipse(dy, dx, rr, rc, 4.0),
        ShapeKind::Crescent => {
            inside_superellipse(dy, dx, rr, rc, 2.0)
                && !inside_superellipse(dy, dx - 0.45 * rc, rr * 0.8, rc * 0.8, 2.0)
        }
    }
}

/// Rasterize the label mask; organs are drawn in order and the last drawn
/// wins contested pixels.
pub fn rasterize(scene: &PhantomScene) -> Array2<u8> {
    let (h, w) = scene.canvas;
    let mut mask = Array2::<u8>::zeros((h, w));
    for organ in &scene.organs {
        let (cy, cx) = organ.center;
        let rmax = organ.radii.0.max(organ.radii.1);
        let y0 = ((cy - rmax).floor().max(0.0)) as usize;
        let y1 = ((cy + rmax).ceil().min(h as f64 - 1.0)) as usize;
        let x0 = ((cx - rmax).floor().max(0.0)) as usize;
        let x1 = ((cx + rmax).ceil().min(w as f64 - 1.0)) as usize;
        for y in y0..=y1 {
            for x in x0..=x1 {
                if organ_contains(organ, y as f64 + 0.5, x as f64 + 0.5) {
                    mask[[y, x]] = organ.label;
                }
            }
        }
    }
    mask
}

/// Smooth unit-variance noise field with the given correlation length.
fn correlated_noise(
    rng: &mut rand_chacha::ChaCha12Rng,
    h: usize,
    w: usize,
    corr_px: f64,
) -> Array2<f64> {
    let mut field = Array2::<f64>::zeros((h, w));
    for v in field.iter_mut() {
        *v = rngutil::normal::<f64>(rng);
    }
    if corr_px > 0.05 {
        let sigma = corr_px;
        let half = (3.0 * sigma).ceil() as isize;
        let kernel: Vec<f64> = (-half..=half)
            .map(|i| (-((i as f64).powi(2)) / (2.0 * sigma * sigma)).exp())
            .collect();
        let ksum: f64 = kernel.iter().sum();
        let kernel: Vec<f64> = kernel.into_iter().map(|k| k / ksum).collect();
        let mut tmp = Array2::<f64>::zeros((h, w));
        for y in 0..h {
            for x in 0..w {
                let mut acc = 0.0;
                for (ki, kv) in kernel.iter().enumerate() {
                    let sx = (x as isize + ki as isize - half).clamp(0, w as isize - 1) as usize;
                    acc += kv * field[[y, sx]];
                }
                tmp[[y, x]] = acc;
            }
        }
        for y in 0..h {
            for x in 0..w {
                let mut acc = 0.0;
                for (ki, kv) in kernel.iter().enumerate() {
                    let sy = (y as isize + ki as isize - half).clamp(0, h as isize - 1) as usize;
                    acc += kv * tmp[[sy, x]];
                }
                field[[y, x]] = acc;
            }
        }
    }
    let n = (h * w) as f64;
    let mean: f64 = field.iter().sum::<f64>() / n;
    let var: f64 = field.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    let scale = if var > 1e-12 { 1.0 / var.sqrt() } else { 0.0 };
    field.mapv_into(|v| (v - mean) * scale)
}

/// Render a scene under one domain style. The mask depends only on the
/// scene; the image also depends on (scene.seed, style.domain_id).
pub fn render(scene: &PhantomScene, style: &DomainStyle) -> Result<LabeledSample, PhantomError> {
    let k_max = scene.organs.iter().map(|o| o.label).max().unwrap_or(0) as usize;
    if style.bands.len() <= k_max {
        return Err(PhantomError::Config(format!(
            "style for domain {} has {} bands but scene uses labels up to {}",
            style.domain_id,
            style.bands.len(),
            k_max
        )));
    }
    let mask = rasterize(scene);
    let (h, w) = scene.canvas;
    let mut rng = rngutil::rng_from(scene.seed, &format!("render-d{}", style.domain_id));
    // Per-sample style: a global brightness shift and contrast scale.
    let jb = rngutil::normal::<f64>(&mut rng) * style.brightness_jitter;
    let jc = (rngutil::normal::<f64>(&mut rng) * style.contrast_jitter).exp();
    let noise = correlated_noise(&mut rng, h, w, style.noise_corr_px);

    let mut image = Array2::<f32>::zeros((h, w));
    for y in 0..h {
        for x in 0..w {
            let class = mask[[y, x]] as usize;
            let base = style.bands[class].mid;
            let mut v = 0.5 + (base - 0.5) * jc + jb;
            v += style.noise_amp * noise[[y, x]];
            if let Some(bf) = &style.bias_field {
                let u = 2.0 * (x as f64 + 0.5) / w as f64 - 1.0;
                let t = 2.0 * (y as f64 + 0.5) / h as f64 - 1.0;
                v *= 1.0 + bf.strength * (bf.gx * u + bf.gy * t + bf.gxy * u * t);
            }
            let v = v.clamp(0.0, 1.0).powf(style.gamma);
            image[[y, x]] = (2.0 * v - 1.0).clamp(-1.0, 1.0) as f32;
        }
    }
    Ok(LabeledSample {
        image,
        mask,
        domain: style.domain_id,
        scene_seed: scene.seed,
    })
}

/// Dataset split names, in canonical order.
pub const SPLITS: [&str; 3] = ["train", "val", "test"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub split: String,
    pub image: String,
    /// Present for source-domain training samples and for all val/test
    /// samples; target-domain training samples expose the image only.
    pub mask: Option<String>,
    pub domain: usize,
    pub scene_seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub version: u32,
    pub n_domains: usize,
    pub n_classes: usize,
    pub source_domain: usize,
    pub canvas: (usize, usize),
    pub seed: u64,
    pub entries: Vec<ManifestEntry>,
}

impl Manifest {
    pub fn entries_in<'a>(&'a self, split: &'a str) -> impl Iterator<Item = &'a ManifestEntry> + 'a {
        self.entries.iter().filter(move |e| e.split == split)
    }

    pub fn save(&self, path: &Path) -> Result<(), PhantomError> {
        let json = serde_json::to_vec_pretty(self).expect("manifest serializes");
        containerio::atomic_write(path, &json)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Manifest, PhantomError> {
        let bytes = std::fs::read(path).map_err(|e| PhantomError::Manifest {
            path: path.to_path_buf(),
            msg: e.to_string(),
        })?;
        serde_json::from_slice(&bytes).map_err(|e| PhantomError::Manifest {
            path: path.to_path_buf(),
            msg: e.to_string(),
        })
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DatasetConfig {
    pub scene: SceneConfig,
    pub styles: Vec<DomainStyle>,
    pub n_scenes: usize,
    /// (train, val, test) fractions; must be positive and sum to 1.
    pub split: (f64, f64, f64),
    pub source_domain: usize,
    /// Minimum separation of per-class mean intensities (on the [-1,1]
    /// image scale) required within each domain.
    pub min_class_separation: f64,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig {
            scene: SceneConfig::default(),
            styles: DomainStyle::default_styles(3, 3),
            n_scenes: 200,
            split: (0.3, 0.2, 0.5),
            source_domain: 0,
            min_class_separation: 0.2,
        }
    }
}

fn split_counts(n: usize, fractions: (f64, f64, f64)) -> Result<[usize; 3], PhantomError> {
    let (a, b, c) = fractions;
    if a <= 0.0 || b <= 0.0 || c <= 0.0 {
        return Err(PhantomError::Config(format!(
            "split fractions must be positive, got ({a}, {b}, {c})"
        )));
    }
    if (a + b + c - 1.0).abs() > 1e-6 {
        return Err(PhantomError::Config(format!(
            "split fractions must sum to 1, got {}",
            a + b + c
        )));
    }
    let n_train = (((n as f64) * a).floor() as usize).max(1);
    let n_val = (((n as f64) * b).floor() as usize).max(1);
    if n_train + n_val >= n {
        return Err(PhantomError::Config(format!(
            "split ({a}, {b}, {c}) leaves no test scenes out of {n}"
        )));
    }
    Ok([n_train, n_val, n - n_train - n_val])
}

/// Generate, render and write the dataset; returns the manifest. Scenes are
/// split before rendering, so a scene never straddles two splits.
pub fn build_dataset(
    cfg: &DatasetConfig,
    seed: u64,
    out_dir: &Path,
) -> Result<Manifest, PhantomError> {
    if cfg.n_scenes < 3 {
        return Err(PhantomError::Config(format!(
            "need at least 3 scenes, got {}",
            cfg.n_scenes
        )));
    }
    if cfg.styles.is_empty() {
        return Err(PhantomError::Config("no domain styles given".into()));
    }
    for (i, s) in cfg.styles.iter().enumerate() {
        if s.domain_id != i {
            return Err(PhantomError::Config(format!(
                "style {i} has domain_id {}; styles must be listed in domain order",
                s.domain_id
            )));
        }
    }
    if cfg.source_domain >= cfg.styles.len() {
        return Err(PhantomError::Config(format!(
            "source domain {} out of range for {} styles",
            cfg.source_domain,
            cfg.styles.len()
        )));
    }
    let counts = split_counts(cfg.n_scenes, cfg.split)?;

    let mut seed_rng = rngutil::rng_from(seed, "scene-seeds");
    let scene_seeds: Vec<u64> = (0..cfg.n_scenes).map(|_| seed_rng.gen::<u64>()).collect();

    for split in SPLITS {
        std::fs::create_dir_all(out_dir.join(split)).map_err(|e| IoError::Io {
            path: out_dir.join(split),
            source: e,
        })?;
    }

    let mut entries = Vec::with_capacity(cfg.n_scenes * cfg.styles.len());
    let mut class_sums: Vec<Vec<(f64, u64)>> =
        vec![vec![(0.0, 0); cfg.scene.n_classes + 1]; cfg.styles.len()];
    let mut offset = 0usize;
    for (si, split) in SPLITS.iter().enumerate() {
        for &scene_seed in &scene_seeds[offset..offset + counts[si]] {
            let scene = generate_scene(scene_seed, &cfg.scene)?;
            for style in &cfg.styles {
                let sample = render(&scene, style)?;
                let stem = format!("s{scene_seed:016x}_d{}", style.domain_id);
                let img_rel = format!("{split}/{stem}.xmd");
                write_image(&out_dir.join(&img_rel), &sample.image)?;
                let with_mask = *split != "train" || style.domain_id == cfg.source_domain;
                let mask_rel = with_mask.then(|| format!("{split}/{stem}_mask.xmd"));
                if let Some(rel) = &mask_rel {
                    write_mask(&out_dir.join(rel), &sample.mask)?;
                }
                if *split == "train" {
                    for (px, &cl) in sample.image.iter().zip(sample.mask.iter()) {
                        let slot = &mut class_sums[style.domain_id][cl as usize];
                        slot.0 += *px as f64;
                        slot.1 += 1;
                    }
                }
                entries.push(ManifestEntry {
                    split: split.to_string(),
                    image: img_rel,
                    mask: mask_rel,
                    domain: style.domain_id,
                    scene_seed,
                });
            }
        }
        offset += counts[si];
    }

    // Translation must be non-degenerate: per-domain class means must stay
    // separated by the configured margin.
    for (d, sums) in class_sums.iter().enumerate() {
        let means: Vec<f64> = sums
            .iter()
            .map(|(s, n)| if *n > 0 { s / *n as f64 } else { f64::NAN })
            .collect();
        for a in 0..means.len() {
            for b in a + 1..means.len() {
                if means[a].is_nan() || means[b].is_nan() {
                    continue;
                }
                let gap = (means[a] - means[b]).abs();
                if gap < cfg.min_class_separation {
                    return Err(PhantomError::Separability(format!(
                        "domain {d}: classes {a} and {b} have mean gap {gap:.3} < {}",
                        cfg.min_class_separation
                    )));
                }
            }
        }
    }

    let manifest = Manifest {
        version: 1,
        n_domains: cfg.styles.len(),
        n_classes: cfg.scene.n_classes,
        source_domain: cfg.source_domain,
        canvas: cfg.scene.canvas,
        seed,
        entries,
    };
    manifest.save(&out_dir.join("manifest.json"))?;
    Ok(manifest)
}

fn write_image(path: &Path, image: &Array2<f32>) -> Result<(), PhantomError> {
    let (h, w) = image.dim();
    containerio::write_sample(
        path,
        &SampleArray {
            height: h as u32,
            width: w as u32,
            channels: 1,
            data: ArrayData::F32(image.iter().copied().collect()),
        },
    )?;
    Ok(())
}

fn write_mask(path: &Path, mask: &Array2<u8>) -> Result<(), PhantomError> {
    let (h, w) = mask.dim();
    containerio::write_sample(
        path,
        &SampleArray {
            height: h as u32,
            width: w as u32,
            channels: 1,
            data: ArrayData::U8(mask.iter().copied().collect()),
        },
    )?;
    Ok(())
}

pub fn read_image(path: &Path) -> Result<Array2<f32>, PhantomError> {
    let arr = containerio::read_sample(path)?;
    let (h, w) = (arr.height as usize, arr.width as usize);
    match arr.data {
        ArrayData::F32(v) => Ok(Array2::from_shape_vec((h, w), v).expect("shape checked")),
        _ => Err(PhantomError::Manifest {
            path: path.to_path_buf(),
            msg: "expected an f32 image".into(),
        }),
    }
}

pub fn read_mask(path: &Path) -> Result<Array2<u8>, PhantomError> {
    let arr = containerio::read_sample(path)?;
    let (h, w) = (arr.height as usize, arr.width as usize);
    match arr.data {
        ArrayData::U8(v) => Ok(Array2::from_shape_vec((h, w), v).expect("shape checked")),
        _ => Err(PhantomError::Manifest {
            path: path.to_path_buf(),
            msg: "expected a u8 mask".into(),
        }),
    }
}

/// A manifest entry loaded into memory.
#[derive(Debug, Clone)]
pub struct LoadedSample {
    pub image: Array2<f32>,
    pub mask: Option<Array2<u8>>,
    pub domain: usize,
    pub scene_seed: u64,
}

pub fn load_entry(root: &Path, entry: &ManifestEntry) -> Result<LoadedSample, PhantomError> {
    let image = read_image(&root.join(&entry.image))?;
    let mask = entry
        .mask
        .as_ref()
        .map(|m| read_mask(&root.join(m)))
        .transpose()?;
    Ok(LoadedSample {
        image,
        mask,
        domain: entry.domain,
        scene_seed: entry.scene_seed,
    })
}
