//! Evaluation protocols: cycle-reconstruction MAE over domain paths,
//! per-organ Dice of the target segmentors, organ-intensity cluster
//! distances between translated and real images, and the ablation harness.
//!
//! Everything here reads a frozen model (or any stub implementing the
//! [`Translates`] / [`Segments`] traits) and the held-out test split;
//! evaluation styles are pinned to z = 0, the prior mean, so reports are
//! deterministic given (checkpoint, split).

use std::collections::BTreeMap;
use std::path::Path;

use ndarray::{Array2, ArrayD, IxDyn};
use serde::{Deserialize, Serialize};

use crate::netblocks::{Model, NetError};
use crate::phantomgen::{self, Manifest, PhantomError};
use crate::tensor::{Graph, Scalar};
use crate::trainer::{self, TrainConfig, TrainError};

#[derive(Debug, thiserror::Error)]
pub enum EvalError {
    #[error("shape error: {0}")]
    Shape(String),
    #[error("unknown domain {0}")]
    UnknownDomain(usize),
    #[error("split '{0}' has no usable samples")]
    EmptySplit(String),
    #[error("invalid path: {0}")]
    BadPath(String),
    #[error(transparent)]
    Net(#[from] NetError),
    #[error(transparent)]
    Phantom(#[from] PhantomError),
    #[error(transparent)]
    Train(#[from] Box<TrainError>),
    #[error("ablation arm '{arm}' has {ok} successful seeds; at least 2 required")]
    TooFewSeeds { arm: String, ok: usize },
}

/// Dice similarity of one class: 2|P∩T| / (|P|+|T|). Both sets empty gives
/// 1.0 by convention; exactly one empty gives 0.0.
pub fn dice(
    pred: &Array2<usize>,
    truth: &Array2<usize>,
    class: usize,
) -> Result<f64, EvalError> {
    if pred.dim() != truth.dim() {
        return Err(EvalError::Shape(format!(
            "mask shapes differ: {:?} vs {:?}",
            pred.dim(),
            truth.dim()
        )));
    }
    let mut p = 0u64;
    let mut t = 0u64;
    let mut both = 0u64;
    for (a, b) in pred.iter().zip(truth.iter()) {
        let ina = *a == class;
        let inb = *b == class;
        p += ina as u64;
        t += inb as u64;
        both += (ina && inb) as u64;
    }
    if p + t == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * both as f64 / (p + t) as f64)
}

/// Infallible wrapper for masks already known to be aligned.
pub fn dice_masks(pred: &Array2<usize>, truth: &Array2<usize>, class: usize) -> f64 {
    dice(pred, truth, class).expect("masks share one canvas")
}

/// Anything that can translate an image into a target domain.
pub trait Translates<F: Scalar> {
    fn translate(&self, image: &ArrayD<F>, target: usize) -> Result<ArrayD<F>, EvalError>;
}

/// Anything that can produce per-pixel class probabilities.
pub trait Segments<F: Scalar> {
    fn probabilities(&self, image: &ArrayD<F>, domain: usize) -> Result<ArrayD<F>, EvalError>;
    fn n_classes(&self) -> usize;
}

/// Style used when generating during evaluation or the CLI.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum StyleChoice {
    /// z = 0, the prior mean: deterministic evaluation style.
    Zero,
    /// z drawn from the prior with this seed.
    Sample(u64),
}

/// Forward-only access to a trained model.
pub struct ModelPipeline<'a, F: Scalar> {
    pub model: &'a Model<F>,
}

impl<'a, F: Scalar> ModelPipeline<'a, F> {
    pub fn new(model: &'a Model<F>) -> Self {
        ModelPipeline { model }
    }

    pub fn translate_with_style(
        &self,
        image: &ArrayD<F>,
        target: usize,
        style: StyleChoice,
    ) -> Result<ArrayD<F>, EvalError> {
        if target >= self.model.arch.n_domains {
            return Err(EvalError::UnknownDomain(target));
        }
        let mut g = Graph::<F>::new();
        let x = g.constant(image.clone());
        let c = self.model.encode_content(&mut g, x, false)?;
        let z = match style {
            StyleChoice::Zero => ArrayD::zeros(IxDyn(&[self.model.arch.style_dim])),
            StyleChoice::Sample(seed) => {
                let mut rng = crate::rngutil::rng_from(seed, "eval-style");
                crate::rngutil::normal_array(&mut rng, &[self.model.arch.style_dim], 1.0)
            }
        };
        let zv = g.constant(z);
        let f = self.model.latent_scale(&mut g, zv, false)?;
        let y = self.model.generate(&mut g, c, f, target, false)?;
        Ok(g.value(y).to_owned())
    }
}

impl<F: Scalar> Translates<F> for ModelPipeline<'_, F> {
    fn translate(&self, image: &ArrayD<F>, target: usize) -> Result<ArrayD<F>, EvalError> {
        self.translate_with_style(image, target, StyleChoice::Zero)
    }
}

impl<F: Scalar> Segments<F> for ModelPipeline<'_, F> {
    fn probabilities(&self, image: &ArrayD<F>, domain: usize) -> Result<ArrayD<F>, EvalError> {
        let mut g = Graph::<F>::new();
        let x = g.constant(image.clone());
        let p = self.model.segment(&mut g, x, domain, false).map_err(|e| match e {
            NetError::UnknownDomain(d) => EvalError::UnknownDomain(d),
            other => EvalError::Net(other),
        })?;
        Ok(g.value(p).to_owned())
    }

    fn n_classes(&self) -> usize {
        self.model.arch.n_classes
    }
}

/// One evaluation sample: image, ground-truth mask, provenance.
pub struct EvalSample<F: Scalar> {
    pub image: ArrayD<F>,
    pub mask: Array2<usize>,
    pub scene_seed: u64,
}

/// A fully labelled evaluation split, grouped by domain.
pub struct EvalSplit<F: Scalar> {
    pub by_domain: BTreeMap<usize, Vec<EvalSample<F>>>,
    pub n_classes: usize,
    pub source_domain: usize,
}

pub fn load_split<F: Scalar>(
    root: &Path,
    manifest: &Manifest,
    split: &str,
) -> Result<EvalSplit<F>, EvalError> {
    let mut by_domain: BTreeMap<usize, Vec<EvalSample<F>>> = BTreeMap::new();
    for entry in manifest.entries_in(split) {
        let s = phantomgen::load_entry(root, entry)?;
        let mask = match s.mask {
            Some(m) => m.mapv(|v| v as usize),
            None => continue,
        };
        let (h, w) = s.image.dim();
        let data: Vec<F> = s.image.iter().map(|&v| F::from_f64(v as f64)).collect();
        by_domain.entry(entry.domain).or_default().push(EvalSample {
            image: ArrayD::from_shape_vec(IxDyn(&[1, h, w]), data).unwrap(),
            mask,
            scene_seed: entry.scene_seed,
        });
    }
    if by_domain.values().all(|v| v.is_empty()) || by_domain.is_empty() {
        return Err(EvalError::EmptySplit(split.to_string()));
    }
    Ok(EvalSplit {
        by_domain,
        n_classes: manifest.n_classes,
        source_domain: manifest.source_domain,
    })
}

/// Mean absolute error between two images on the [-1, 1] scale.
fn mae<F: Scalar>(a: &ArrayD<F>, b: &ArrayD<F>) -> f64 {
    a.iter()
        .zip(b.iter())
        .map(|(x, y)| (x.as_f64() - y.as_f64()).abs())
        .sum::<f64>()
        / a.len() as f64
}

/// Cyclic reconstruction error over one domain path (first == last). Each
/// hop re-encodes the current image and renders it with the z = 0 style.
/// Paths with fewer than two hops are identically zero by definition.
pub fn recon_mae<F: Scalar>(
    translator: &dyn Translates<F>,
    split: &EvalSplit<F>,
    path: &[usize],
) -> Result<(f64, f64), EvalError> {
    if path.len() < 2 {
        return Ok((0.0, 0.0));
    }
    if path.first() != path.last() {
        return Err(EvalError::BadPath(format!(
            "path {path:?} must start and end at the same domain"
        )));
    }
    let start = path[0];
    let samples = split
        .by_domain
        .get(&start)
        .ok_or(EvalError::UnknownDomain(start))?;
    if samples.is_empty() {
        return Err(EvalError::EmptySplit(format!("domain {start}")));
    }
    let mut errors = Vec::with_capacity(samples.len());
    for s in samples {
        let mut x = s.image.clone();
        for &hop in &path[1..] {
            if hop == path[0] && std::ptr::eq(&path[1..][path.len() - 2], &hop) {
                // final hop back to the start domain
            }
            x = translator.translate(&x, hop)?;
        }
        errors.push(mae(&x, &s.image));
    }
    let n = errors.len() as f64;
    let mean = errors.iter().sum::<f64>() / n;
    let var = errors.iter().map(|e| (e - mean).powi(2)).sum::<f64>() / n;
    Ok((mean, var.sqrt()))
}

/// The Table-1-style reconstruction report: one row per path.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ReconReport {
    /// Path (as domain ids) -> (mean, std).
    pub paths: Vec<ReconPath>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ReconPath {
    pub domains: Vec<usize>,
    pub mean: f64,
    pub std: f64,
}

impl ReconReport {
    pub fn one_step_mean(&self) -> f64 {
        let one: Vec<&ReconPath> = self.paths.iter().filter(|p| p.domains.len() == 3).collect();
        one.iter().map(|p| p.mean).sum::<f64>() / one.len().max(1) as f64
    }

    pub fn two_step_mean(&self) -> f64 {
        let two: Vec<&ReconPath> = self.paths.iter().filter(|p| p.domains.len() == 4).collect();
        two.iter().map(|p| p.mean).sum::<f64>() / two.len().max(1) as f64
    }
}

/// Build the canonical path set: src->t->src for every target, and
/// src->t1->t2->src for every ordered pair of distinct targets.
pub fn canonical_paths(source: usize, targets: &[usize]) -> Vec<Vec<usize>> {
    let mut paths = Vec::new();
    for &t in targets {
        paths.push(vec![source, t, source]);
    }
    for &a in targets {
        for &b in targets {
            if a != b {
                paths.push(vec![source, a, b, source]);
            }
        }
    }
    paths
}

pub fn recon_report<F: Scalar>(
    translator: &dyn Translates<F>,
    split: &EvalSplit<F>,
    source: usize,
    targets: &[usize],
) -> Result<ReconReport, EvalError> {
    let mut paths = Vec::new();
    for domains in canonical_paths(source, targets) {
        let (mean, std) = recon_mae(translator, split, &domains)?;
        paths.push(ReconPath { domains, mean, std });
    }
    Ok(ReconReport { paths })
}

/// Per-domain, per-organ Dice of a segmenter on real target images.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DiceReport {
    pub per_domain: BTreeMap<usize, DomainDice>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DomainDice {
    /// Dice of organ class k at index k-1.
    pub per_organ: Vec<f64>,
    /// Unweighted mean over organ classes.
    pub average: f64,
}

impl DiceReport {
    pub fn mean_average(&self) -> f64 {
        if self.per_domain.is_empty() {
            return 0.0;
        }
        self.per_domain.values().map(|d| d.average).sum::<f64>() / self.per_domain.len() as f64
    }
}

pub fn evaluate_segmentation<F: Scalar>(
    segmenter: &dyn Segments<F>,
    split: &EvalSplit<F>,
    target_domains: &[usize],
) -> Result<DiceReport, EvalError> {
    let k = segmenter.n_classes();
    let mut per_domain = BTreeMap::new();
    for &domain in target_domains {
        let samples = split
            .by_domain
            .get(&domain)
            .ok_or(EvalError::UnknownDomain(domain))?;
        if samples.is_empty() {
            return Err(EvalError::EmptySplit(format!("domain {domain}")));
        }
        let mut organ_acc = vec![0.0f64; k];
        for s in samples {
            let probs = segmenter.probabilities(&s.image, domain)?;
            let pred = argmax(&probs);
            for class in 1..=k {
                organ_acc[class - 1] += dice(&pred, &s.mask, class)?;
            }
        }
        let n = samples.len() as f64;
        let per_organ: Vec<f64> = organ_acc.into_iter().map(|a| a / n).collect();
        let average = per_organ.iter().sum::<f64>() / k as f64;
        per_domain.insert(
            domain,
            DomainDice {
                per_organ,
                average,
            },
        );
    }
    Ok(DiceReport { per_domain })
}

/// Per-pixel argmax labels of a (C,H,W) probability array; ties resolve to
/// the lowest class id.
pub fn argmax<F: Scalar>(probs: &ArrayD<F>) -> Array2<usize> {
    let s = probs.shape();
    let (c, h, w) = (s[0], s[1], s[2]);
    let vs = probs.as_slice().unwrap();
    let n = h * w;
    Array2::from_shape_fn((h, w), |(y, x)| {
        let px = y * w + x;
        let mut best = 0usize;
        for k in 1..c {
            if vs[k * n + px] > vs[best * n + px] {
                best = k;
            }
        }
        best
    })
}

/// Organ-intensity feature vector: mean, std, 5th/50th/95th percentile of
/// the pixels under the organ mask. None when the organ has no pixels.
pub fn intensity_features<F: Scalar>(
    image: &ArrayD<F>,
    mask: &Array2<usize>,
    class: usize,
) -> Option<[f64; 5]> {
    let mut vals: Vec<f64> = image
        .iter()
        .zip(mask.iter())
        .filter(|(_, &m)| m == class)
        .map(|(v, _)| v.as_f64())
        .collect();
    if vals.is_empty() {
        return None;
    }
    vals.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = vals.len();
    let mean = vals.iter().sum::<f64>() / n as f64;
    let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64;
    let pct = |p: f64| -> f64 {
        // nearest-rank percentile
        let rank = ((p / 100.0) * n as f64).ceil() as usize;
        vals[rank.clamp(1, n) - 1]
    };
    Some([mean, var.sqrt(), pct(5.0), pct(50.0), pct(95.0)])
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ClusterReport {
    pub per_domain: BTreeMap<usize, ClusterDomain>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ClusterDomain {
    /// Centroid distance per organ class (index k-1); None when the organ
    /// was empty in every image on one side.
    pub per_organ: Vec<Option<f64>>,
    /// Mean over defined organs.
    pub average: f64,
    /// Organ classes skipped because a side had no pixels, with a note.
    pub skipped: Vec<String>,
}

fn centroid(features: &[[f64; 5]]) -> Option<[f64; 5]> {
    if features.is_empty() {
        return None;
    }
    let mut c = [0.0; 5];
    for f in features {
        for (ci, fi) in c.iter_mut().zip(f.iter()) {
            *ci += fi;
        }
    }
    for ci in c.iter_mut() {
        *ci /= features.len() as f64;
    }
    Some(c)
}

fn euclid(a: &[f64; 5], b: &[f64; 5]) -> f64 {
    a.iter()
        .zip(b.iter())
        .map(|(x, y)| (x - y).powi(2))
        .sum::<f64>()
        .sqrt()
}

/// Distance between the organ-intensity centroid of translated source
/// images and the centroid of real target images, per target domain.
pub fn cluster_distance<F: Scalar>(
    translator: &dyn Translates<F>,
    split: &EvalSplit<F>,
    target_domains: &[usize],
) -> Result<ClusterReport, EvalError> {
    let k = split.n_classes;
    let source = split.source_domain;
    let src_samples = split
        .by_domain
        .get(&source)
        .ok_or(EvalError::UnknownDomain(source))?;
    let mut per_domain = BTreeMap::new();
    for &domain in target_domains {
        let real_samples = split
            .by_domain
            .get(&domain)
            .ok_or(EvalError::UnknownDomain(domain))?;
        let mut per_organ = Vec::with_capacity(k);
        let mut skipped = Vec::new();
        let mut translated_feats: Vec<Vec<[f64; 5]>> = vec![Vec::new(); k];
        for s in src_samples {
            let tr = translator.translate(&s.image, domain)?;
            for class in 1..=k {
                if let Some(f) = intensity_features(&tr, &s.mask, class) {
                    translated_feats[class - 1].push(f);
                } else {
                    skipped.push(format!(
                        "organ {class} empty in translated scene {:016x}",
                        s.scene_seed
                    ));
                }
            }
        }
        let mut real_feats: Vec<Vec<[f64; 5]>> = vec![Vec::new(); k];
        for s in real_samples {
            for class in 1..=k {
                if let Some(f) = intensity_features(&s.image, &s.mask, class) {
                    real_feats[class - 1].push(f);
                } else {
                    skipped.push(format!(
                        "organ {class} empty in real scene {:016x}",
                        s.scene_seed
                    ));
                }
            }
        }
        let mut sum = 0.0;
        let mut defined = 0usize;
        for class in 1..=k {
            let d = match (
                centroid(&translated_feats[class - 1]),
                centroid(&real_feats[class - 1]),
            ) {
                (Some(a), Some(b)) => Some(euclid(&a, &b)),
                _ => {
                    skipped.push(format!("organ {class} skipped entirely"));
                    None
                }
            };
            if let Some(v) = d {
                sum += v;
                defined += 1;
            }
            per_organ.push(d);
        }
        per_domain.insert(
            domain,
            ClusterDomain {
                per_organ,
                average: if defined > 0 { sum / defined as f64 } else { 0.0 },
                skipped,
            },
        );
    }
    Ok(ClusterReport { per_domain })
}

/// Which loss is removed in an ablation arm.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum AblationArm {
    Full,
    NoModeSeek,
    NoStructDisc,
}

impl AblationArm {
    pub fn key(&self) -> &'static str {
        match self {
            AblationArm::Full => "full",
            AblationArm::NoModeSeek => "no_mode_seek",
            AblationArm::NoStructDisc => "no_struct_disc",
        }
    }

    pub fn apply(&self, cfg: &TrainConfig) -> TrainConfig {
        let mut out = cfg.clone();
        match self {
            AblationArm::Full => {}
            AblationArm::NoModeSeek => out.weights.ms = 0.0,
            AblationArm::NoStructDisc => {
                out.weights.st = 0.0;
                out.use_struct_disc = false;
            }
        }
        out
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SeedOutcome {
    pub seed: u64,
    pub two_step_mae: Option<f64>,
    pub mean_dice: Option<f64>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ArmReport {
    pub arm: String,
    pub per_seed: Vec<SeedOutcome>,
    pub mean_two_step_mae: f64,
    pub std_two_step_mae: f64,
    pub mean_dice: f64,
    pub std_dice: f64,
    /// Relative change vs the full arm ((arm - full) / full).
    pub rel_mae_change: Option<f64>,
    pub rel_dice_change: Option<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AblationReport {
    pub arms: Vec<ArmReport>,
}

fn mean_std(vals: &[f64]) -> (f64, f64) {
    if vals.is_empty() {
        return (0.0, 0.0);
    }
    let n = vals.len() as f64;
    let mean = vals.iter().sum::<f64>() / n;
    let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Train and evaluate one (arm, seed); used by the ablation harness and the
/// acceptance suite.
pub fn train_and_score<F: Scalar>(
    cfg: &TrainConfig,
    dataset_root: &Path,
    manifest: &Manifest,
    out_dir: &Path,
) -> Result<(f64, f64), EvalError> {
    trainer::train::<F>(cfg, dataset_root, manifest, out_dir, false).map_err(Box::new)?;
    let state = trainer::load_checkpoint::<F>(&out_dir.join("checkpoints").join("final"), cfg)
        .map_err(Box::new)?;
    let split = load_split::<F>(dataset_root, manifest, "test")?;
    let targets = cfg.arch.target_domains(manifest.source_domain);
    let pipeline = ModelPipeline::new(&state.model);
    let recon = recon_report(&pipeline, &split, manifest.source_domain, &targets)?;
    let dice_rep = evaluate_segmentation(&pipeline, &split, &targets)?;
    Ok((recon.two_step_mean(), dice_rep.mean_average()))
}

/// Train every requested arm over every seed and compare against the full
/// model. Per-seed failures are recorded; an arm with fewer than two
/// successful seeds aborts the report.
pub fn run_ablation<F: Scalar>(
    base_cfg: &TrainConfig,
    dataset_root: &Path,
    manifest: &Manifest,
    arms: &[AblationArm],
    seeds: &[u64],
    work_dir: &Path,
) -> Result<AblationReport, EvalError> {
    if seeds.len() < 3 {
        return Err(EvalError::BadPath(format!(
            "ablation needs at least 3 seeds, got {}",
            seeds.len()
        )));
    }
    let mut arm_list: Vec<AblationArm> = Vec::new();
    if !arms.contains(&AblationArm::Full) {
        arm_list.push(AblationArm::Full);
    }
    arm_list.extend_from_slice(arms);

    let mut raw: BTreeMap<&'static str, Vec<SeedOutcome>> = BTreeMap::new();
    for arm in &arm_list {
        let mut outcomes = Vec::new();
        for &seed in seeds {
            let mut cfg = arm.apply(base_cfg);
            cfg.seed = seed;
            let out = work_dir.join(format!("{}_seed{}", arm.key(), seed));
            match train_and_score::<F>(&cfg, dataset_root, manifest, &out) {
                Ok((mae2, dsc)) => outcomes.push(SeedOutcome {
                    seed,
                    two_step_mae: Some(mae2),
                    mean_dice: Some(dsc),
                    error: None,
                }),
                Err(e) => outcomes.push(SeedOutcome {
                    seed,
                    two_step_mae: None,
                    mean_dice: None,
                    error: Some(e.to_string()),
                }),
            }
        }
        let ok = outcomes.iter().filter(|o| o.error.is_none()).count();
        if ok < 2 {
            return Err(EvalError::TooFewSeeds {
                arm: arm.key().to_string(),
                ok,
            });
        }
        raw.insert(arm.key(), outcomes);
    }

    let stats = |outs: &Vec<SeedOutcome>| -> ((f64, f64), (f64, f64)) {
        let maes: Vec<f64> = outs.iter().filter_map(|o| o.two_step_mae).collect();
        let dices: Vec<f64> = outs.iter().filter_map(|o| o.mean_dice).collect();
        (mean_std(&maes), mean_std(&dices))
    };
    let full_stats = stats(&raw["full"]);

    let mut arms_out = Vec::new();
    for (key, outcomes) in raw {
        let ((mmae, smae), (mdice, sdice)) = stats(&outcomes);
        let (rel_mae, rel_dice) = if key == "full" {
            (None, None)
        } else {
            (
                Some((mmae - full_stats.0 .0) / full_stats.0 .0),
                Some((mdice - full_stats.1 .0) / full_stats.1 .0),
            )
        };
        arms_out.push(ArmReport {
            arm: key.to_string(),
            per_seed: outcomes,
            mean_two_step_mae: mmae,
            std_two_step_mae: smae,
            mean_dice: mdice,
            std_dice: sdice,
            rel_mae_change: rel_mae,
            rel_dice_change: rel_dice,
        });
    }
    Ok(AblationReport { arms: arms_out })
}

/// Aligned-text reconstruction table in the style of a reconstruction-error
/// comparison: one column per path.
pub fn recon_table(report: &ReconReport, domain_names: &[String]) -> String {
    let name = |d: usize| {
        domain_names
            .get(d)
            .cloned()
            .unwrap_or_else(|| format!("d{d}"))
    };
    let mut header = String::from("| path ");
    let mut row = String::from("| mae  ");
    for p in &report.paths {
        let label: Vec<String> = p.domains.iter().map(|&d| name(d)).collect();
        header.push_str(&format!("| {} ", label.join("->")));
        row.push_str(&format!("| {:.4}+-{:.4} ", p.mean, p.std));
    }
    header.push('|');
    row.push('|');
    format!("{header}\n{row}\n")
}

/// Aligned-text Dice table: one row per domain, one column per organ.
pub fn dice_table(report: &DiceReport, domain_names: &[String]) -> String {
    let mut out = String::from("| domain | ");
    let k = report
        .per_domain
        .values()
        .next()
        .map(|d| d.per_organ.len())
        .unwrap_or(0);
    for class in 1..=k {
        out.push_str(&format!("organ{class} | "));
    }
    out.push_str("avg |\n");
    for (d, dd) in &report.per_domain {
        let name = domain_names
            .get(*d)
            .cloned()
            .unwrap_or_else(|| format!("d{d}"));
        out.push_str(&format!("| {name} | "));
        for v in &dd.per_organ {
            out.push_str(&format!("{v:.3} | "));
        }
        out.push_str(&format!("{:.3} |\n", dd.average));
    }
    out
}
