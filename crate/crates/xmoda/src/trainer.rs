//! Alternating optimization of the translation stack against the
//! discriminators and segmentors, with a constant-then-linear-decay learning
//! rate, per-iteration metrics, and bit-exact checkpoint resume.
//!
//! Each iteration draws one source sample and one target sample (batch size
//! 1: every loss is a single-sample estimate of its expectation) and runs
//! two phases:
//!
//! * **gen phase** - updates E_c, E_s, L_s and G with the generator-side
//!   terms of the total objective; discriminators and segmentors are bound
//!   as constants, so their parameter gradients are identically zero.
//! * **disc phase** - updates D on the real image and the gen phase's
//!   cached fakes, D_c on the cached content maps, the target's segmentor
//!   on a freshly translated image (new prior draw), and D_s on real and
//!   translated (image, foreground) pairs.
//!
//! All randomness flows from one ChaCha stream owned by the train state;
//! (config, dataset, seed) fully determine the metrics log.

use std::collections::BTreeMap;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use ndarray::{Array2, ArrayD, IxDyn};
use rand::Rng;
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};

use crate::containerio::{self, IoError};
use crate::losses::{self, LossBreakdown, LossWeights};
use crate::netblocks::{self, foreground, ArchConfig, Model, NetError, SoloSegmentor};
use crate::phantomgen::{LoadedSample, Manifest, PhantomError};
use crate::rngutil;
use crate::tensor::{Dtype, Graph, Scalar, Var};

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error("training configuration invalid: {0}")]
    Config(String),
    #[error("loss term '{term}' is not finite at iteration {iteration}")]
    NonFinite { term: &'static str, iteration: u64 },
    #[error(transparent)]
    Net(#[from] NetError),
    #[error(transparent)]
    Loss(#[from] losses::LossError),
    #[error(transparent)]
    Phantom(#[from] PhantomError),
    #[error(transparent)]
    Io(#[from] IoError),
    #[error("checkpoint invalid: {0}")]
    Checkpoint(String),
}

/// Everything the training loop needs to know.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs_total: usize,
    pub epochs_constant_lr: usize,
    pub lr: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub batch_size: usize,
    pub weights: LossWeights,
    pub seed: u64,
    /// Checkpoint every this many iterations (0 = only at the end).
    pub checkpoint_every: usize,
    /// Validation Dice every this many epochs (0 = never).
    pub val_every_epochs: usize,
    /// When false the joint structure discriminator is removed entirely
    /// (the ablation arm); its loss weight is forced to zero.
    pub use_struct_disc: bool,
    pub arch: ArchConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs_total: 100,
            epochs_constant_lr: 50,
            lr: 2e-4,
            adam_beta1: 0.5,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            batch_size: 1,
            weights: LossWeights::default(),
            seed: 0,
            checkpoint_every: 0,
            val_every_epochs: 10,
            use_struct_disc: true,
            arch: ArchConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        if self.epochs_constant_lr > self.epochs_total {
            return Err(TrainError::Config(format!(
                "epochs_constant_lr {} exceeds epochs_total {}",
                self.epochs_constant_lr, self.epochs_total
            )));
        }
        if self.lr <= 0.0 || !self.lr.is_finite() {
            return Err(TrainError::Config(format!("lr must be positive, got {}", self.lr)));
        }
        if self.batch_size < 1 {
            return Err(TrainError::Config("batch_size must be >= 1".into()));
        }
        self.weights.validate().map_err(TrainError::Loss)?;
        Ok(())
    }
}

/// Learning rate at an epoch: constant, then linear decay hitting zero at
/// `epochs_total`.
pub fn lr_at(epoch: usize, cfg: &TrainConfig) -> Result<f64, TrainError> {
    if epoch > cfg.epochs_total {
        return Err(TrainError::Config(format!(
            "epoch {epoch} out of range 0..={}",
            cfg.epochs_total
        )));
    }
    if epoch < cfg.epochs_constant_lr {
        return Ok(cfg.lr);
    }
    let decay_span = (cfg.epochs_total - cfg.epochs_constant_lr) as f64;
    if decay_span == 0.0 {
        return Ok(if epoch == cfg.epochs_total { 0.0 } else { cfg.lr });
    }
    Ok(cfg.lr * (cfg.epochs_total - epoch) as f64 / decay_span)
}

/// Adam moments per parameter tensor, with per-parameter step counts so
/// parameters updated in different phases stay correctly bias-corrected.
pub struct Adam<F: Scalar> {
    m: Vec<ArrayD<F>>,
    v: Vec<ArrayD<F>>,
    t: Vec<u64>,
    beta1: f64,
    beta2: f64,
    eps: f64,
}

impl<F: Scalar> Adam<F> {
    pub fn new(model: &Model<F>, cfg: &TrainConfig) -> Self {
        let m = model
            .store
            .ids()
            .map(|id| ArrayD::zeros(model.store.value(id).raw_dim()))
            .collect::<Vec<_>>();
        let v = m.clone();
        let t = vec![0u64; m.len()];
        Adam {
            m,
            v,
            t,
            beta1: cfg.adam_beta1,
            beta2: cfg.adam_beta2,
            eps: cfg.adam_eps,
        }
    }

    fn step(&mut self, param: &mut ArrayD<F>, pid: usize, grad: &ArrayD<F>, lr: f64) {
        self.t[pid] += 1;
        let t = self.t[pid];
        let b1 = F::from_f64(self.beta1);
        let b2 = F::from_f64(self.beta2);
        let one = F::one();
        let bc1 = F::from_f64(1.0 - self.beta1.powi(t as i32));
        let bc2 = F::from_f64(1.0 - self.beta2.powi(t as i32));
        let lr_f = F::from_f64(lr);
        let eps = F::from_f64(self.eps);
        let m = &mut self.m[pid];
        let v = &mut self.v[pid];
        let ms = m.as_slice_mut().unwrap();
        let vs = v.as_slice_mut().unwrap();
        let gs = grad.as_slice().expect("gradients are standard layout");
        let ps = param.as_slice_mut().unwrap();
        for i in 0..gs.len() {
            let g = gs[i];
            ms[i] = b1 * ms[i] + (one - b1) * g;
            vs[i] = b2 * vs[i] + (one - b2) * g * g;
            let mh = ms[i] / bc1;
            let vh = vs[i] / bc2;
            ps[i] = ps[i] - lr_f * mh / (vh.sqrt() + eps);
        }
    }
}

/// One sampled (source, target) pair.
struct Batch<F: Scalar> {
    x_src: ArrayD<F>,
    mask_src: Array2<usize>,
    x_tgt: ArrayD<F>,
    target: usize,
}

/// Values carried from the gen phase into the disc phase.
struct PhaseCache<F: Scalar> {
    c_src: ArrayD<F>,
    c_tgt: ArrayD<F>,
    fake_encoded: ArrayD<F>,
    fake_prior: ArrayD<F>,
}

/// In-memory training split.
pub struct TrainData<F: Scalar> {
    pub source: Vec<(ArrayD<F>, Array2<usize>)>,
    pub targets: BTreeMap<usize, Vec<ArrayD<F>>>,
    /// (image, mask) pairs of the validation split, per domain.
    pub val: BTreeMap<usize, Vec<(ArrayD<F>, Array2<usize>)>>,
    pub source_domain: usize,
}

fn to_model_image<F: Scalar>(img: &ndarray::Array2<f32>) -> ArrayD<F> {
    let (h, w) = img.dim();
    let data: Vec<F> = img.iter().map(|&v| F::from_f64(v as f64)).collect();
    ArrayD::from_shape_vec(IxDyn(&[1, h, w]), data).unwrap()
}

fn to_label_mask(mask: &ndarray::Array2<u8>) -> Array2<usize> {
    mask.mapv(|v| v as usize)
}

/// Load the train and validation splits referenced by a manifest.
pub fn load_train_data<F: Scalar>(
    root: &Path,
    manifest: &Manifest,
) -> Result<TrainData<F>, TrainError> {
    let mut source = Vec::new();
    let mut targets: BTreeMap<usize, Vec<ArrayD<F>>> = BTreeMap::new();
    for d in 0..manifest.n_domains {
        if d != manifest.source_domain {
            targets.insert(d, Vec::new());
        }
    }
    for entry in manifest.entries_in("train") {
        let s: LoadedSample = crate::phantomgen::load_entry(root, entry)?;
        if entry.domain == manifest.source_domain {
            let mask = s.mask.ok_or_else(|| {
                TrainError::Config(format!(
                    "source-domain training sample {} has no mask",
                    entry.image
                ))
            })?;
            source.push((to_model_image::<F>(&s.image), to_label_mask(&mask)));
        } else {
            targets
                .get_mut(&entry.domain)
                .expect("domain listed in manifest")
                .push(to_model_image::<F>(&s.image));
        }
    }
    if source.is_empty() {
        return Err(TrainError::Config(
            "manifest has no source-domain training samples".into(),
        ));
    }
    for (d, v) in &targets {
        if v.is_empty() {
            return Err(TrainError::Config(format!(
                "manifest has no training samples for target domain {d}"
            )));
        }
    }
    let mut val: BTreeMap<usize, Vec<(ArrayD<F>, Array2<usize>)>> = BTreeMap::new();
    for entry in manifest.entries_in("val") {
        let s = crate::phantomgen::load_entry(root, entry)?;
        if let Some(mask) = s.mask {
            val.entry(entry.domain)
                .or_default()
                .push((to_model_image::<F>(&s.image), to_label_mask(&mask)));
        }
    }
    Ok(TrainData {
        source,
        targets,
        val,
        source_domain: manifest.source_domain,
    })
}

/// Mutable training state; a checkpoint is exactly this plus the config.
pub struct TrainState<F: Scalar> {
    pub model: Model<F>,
    pub opt: Adam<F>,
    pub iteration: u64,
    pub epoch: usize,
    pub rng: ChaCha12Rng,
    /// Last completed iteration's merged term values.
    pub running: BTreeMap<String, f64>,
}

impl<F: Scalar> TrainState<F> {
    pub fn new(cfg: &TrainConfig, source_domain: usize) -> Self {
        let model = Model::new(&cfg.arch, source_domain, cfg.seed, cfg.use_struct_disc);
        let opt = Adam::new(&model, cfg);
        TrainState {
            model,
            opt,
            iteration: 0,
            epoch: 0,
            rng: rngutil::rng_from(cfg.seed, "training"),
            running: BTreeMap::new(),
        }
    }
}

fn normal_vec<F: Scalar>(rng: &mut ChaCha12Rng, n: usize) -> ArrayD<F> {
    rngutil::normal_array(rng, &[n], 1.0)
}

fn finite_or<F: Scalar>(
    g: &Graph<F>,
    v: Var,
    term: &'static str,
    iteration: u64,
) -> Result<f64, TrainError> {
    let val = g.scalar(v).as_f64();
    if !val.is_finite() {
        return Err(TrainError::NonFinite { term, iteration });
    }
    Ok(val)
}

/// Apply accumulated gradients of all trainable bound parameters.
fn apply_updates<F: Scalar>(
    g: &Graph<F>,
    grads: &crate::tensor::GradStore<F>,
    state_model: &mut Model<F>,
    opt: &mut Adam<F>,
    lr: f64,
) {
    for &(pid, var) in g.bound_params() {
        if let Some(grad) = grads.get(var) {
            let param = state_model.store.value_mut(pid);
            opt.step(param, pid.0, grad, lr);
        }
    }
}

/// Generator-phase step: one update to E_c, E_s, L_s, G. Returns the
/// generator-side loss breakdown and the cached activations the disc phase
/// reuses as stale fakes.
fn gen_step<F: Scalar>(
    cfg: &TrainConfig,
    state: &mut TrainState<F>,
    batch: &Batch<F>,
    lr: f64,
) -> Result<(LossBreakdown, PhaseCache<F>), TrainError> {
    const TRAIN: bool = true;
    const FROZEN: bool = false;
    let it = state.iteration;
    let model = &state.model;
    let mut g = Graph::<F>::new();
    let src = model.source_domain;
    let tgt = batch.target;

    let x_i = g.constant(batch.x_src.clone());
    let x_j = g.constant(batch.x_tgt.clone());

    let c_i = model.encode_content(&mut g, x_i, TRAIN)?;
    let c_j = model.encode_content(&mut g, x_j, TRAIN)?;

    let eps_i = {
        let e = normal_vec::<F>(&mut state.rng, cfg.arch.style_dim);
        g.constant(e)
    };
    let eps_j = {
        let e = normal_vec::<F>(&mut state.rng, cfg.arch.style_dim);
        g.constant(e)
    };
    let s_i = model.encode_style(&mut g, x_i, eps_i, TRAIN)?;
    let s_j = model.encode_style(&mut g, x_j, eps_j, TRAIN)?;
    let f_i = model.latent_scale(&mut g, s_i.sample, TRAIN)?;
    let f_j = model.latent_scale(&mut g, s_j.sample, TRAIN)?;

    // Self-reconstruction of both sampled images (the VAE term).
    let xi_hat = model.generate(&mut g, c_i, f_i, src, TRAIN)?;
    let xj_hat = model.generate(&mut g, c_j, f_j, tgt, TRAIN)?;
    let (kl_i, rec_i) = losses::loss_vae(&mut g, x_i, xi_hat, &s_i)?;
    let (kl_j, rec_j) = losses::loss_vae(&mut g, x_j, xj_hat, &s_j)?;
    let vae_kl = g.add(kl_i, kl_j);
    let vae_rec = g.add(rec_i, rec_j);

    // Content adversary, encoder side (D_c frozen).
    let sc_i = model.discriminate_content(&mut g, c_i, FROZEN)?;
    let sc_j = model.discriminate_content(&mut g, c_j, FROZEN)?;
    let (_, adv_c_e) = losses::loss_content_adv(&mut g, sc_i, sc_j);

    // Translations into the target domain: encoded style and prior draws.
    let x_tr_enc = model.generate(&mut g, c_i, f_j, tgt, TRAIN)?;
    let z1 = normal_vec::<F>(&mut state.rng, cfg.arch.style_dim);
    let mut z2 = normal_vec::<F>(&mut state.rng, cfg.arch.style_dim);
    while z1 == z2 {
        z2 = normal_vec::<F>(&mut state.rng, cfg.arch.style_dim);
    }
    let z1_var = g.constant(z1.clone());
    let z2_var = g.constant(z2.clone());
    let f_z1 = model.latent_scale(&mut g, z1_var, TRAIN)?;
    let f_z2 = model.latent_scale(&mut g, z2_var, TRAIN)?;
    let x_tr_z1 = model.generate(&mut g, c_i, f_z1, tgt, TRAIN)?;
    let x_tr_z2 = model.generate(&mut g, c_i, f_z2, tgt, TRAIN)?;

    // Fool the frozen multi-domain discriminator with both fakes.
    let d_fe = model.discriminate(&mut g, x_tr_enc, tgt, FROZEN)?;
    let d_fp = model.discriminate(&mut g, x_tr_z1, tgt, FROZEN)?;
    let gan_g = losses::gan_g_loss(&mut g, d_fe, d_fp);

    // Latent code regression against the prior draw.
    let eps_lr = {
        let e = normal_vec::<F>(&mut state.rng, cfg.arch.style_dim);
        g.constant(e)
    };
    let s_cycle = model.encode_style(&mut g, x_tr_z1, eps_lr, TRAIN)?;
    let latent_reg = losses::loss_latent_reg(&mut g, z1_var, s_cycle.mean)?;

    let mode_seek = losses::loss_mode_seek(&mut g, x_tr_z1, x_tr_z2, &z1, &z2)?;

    // Segmentation consistency through translation (segmentor frozen).
    let p_hat = model.segment(&mut g, x_tr_z1, tgt, FROZEN)?;
    let seg = losses::loss_seg(&mut g, p_hat, &batch.mask_src)?;

    // Structure adversary, generator side, through the frozen D_s.
    let struct_g = if model.disc_joint.is_some() {
        let psi_hat = foreground(&mut g, p_hat);
        let s = model.discriminate_joint(&mut g, x_tr_z1, psi_hat, tgt, FROZEN)?;
        let (_, st_g) = losses::loss_struct(&mut g, s, s);
        // loss_struct's generator side only looks at the fake scores
        st_g
    } else {
        g.constant(ndarray::arr0(F::zero()).into_dyn())
    };

    let w = &cfg.weights;
    let struct_weight = if model.disc_joint.is_some() { w.st } else { 0.0 };
    let mut total = gan_g;
    for (term, weight) in [
        (vae_kl, w.vae),
        (vae_rec, w.vae),
        (adv_c_e, w.c),
        (latent_reg, w.lr),
        (mode_seek, w.ms),
        (struct_g, struct_weight),
        (seg, w.seg),
    ] {
        let scaled = g.scale(term, F::from_f64(weight));
        total = g.add(total, scaled);
    }

    let mut terms = BTreeMap::new();
    for (name, var) in [
        ("gan", gan_g),
        ("vae_kl", vae_kl),
        ("vae_rec", vae_rec),
        ("adv_c", adv_c_e),
        ("latent_reg", latent_reg),
        ("mode_seek", mode_seek),
        ("struct", struct_g),
        ("seg", seg),
    ] {
        terms.insert(name.to_string(), finite_or(&g, var, name, it)?);
    }
    let breakdown = losses::loss_total(&terms, w)?;

    let grads = g.backward(total);
    let cache = PhaseCache {
        c_src: g.value(c_i).to_owned(),
        c_tgt: g.value(c_j).to_owned(),
        fake_encoded: g.value(x_tr_enc).to_owned(),
        fake_prior: g.value(x_tr_z1).to_owned(),
    };
    apply_updates(&g, &grads, &mut state.model, &mut state.opt, lr);
    Ok((breakdown, cache))
}

/// Discriminator/segmentor-phase step: one update to D, D_c, D_s and the
/// sampled target's segmentor. Generator-side parameters stay frozen; the
/// segmentor trains on a freshly translated image with a new prior draw.
fn disc_step<F: Scalar>(
    cfg: &TrainConfig,
    state: &mut TrainState<F>,
    batch: &Batch<F>,
    cache: &PhaseCache<F>,
    lr: f64,
) -> Result<LossBreakdown, TrainError> {
    const TRAIN: bool = true;
    const FROZEN: bool = false;
    let it = state.iteration;
    let model = &state.model;
    let mut g = Graph::<F>::new();
    let tgt = batch.target;

    let x_j = g.constant(batch.x_tgt.clone());

    // Multi-domain discriminator: real target image against the gen
    // phase's cached fakes.
    let d_real = model.discriminate(&mut g, x_j, tgt, TRAIN)?;
    let fe = g.constant(cache.fake_encoded.clone());
    let fp = g.constant(cache.fake_prior.clone());
    let d_fe = model.discriminate(&mut g, fe, tgt, TRAIN)?;
    let d_fp = model.discriminate(&mut g, fp, tgt, TRAIN)?;
    let gan_d = losses::gan_d_loss(&mut g, d_real, d_fe, d_fp);

    // Content discriminator on the cached content maps.
    let ci = g.constant(cache.c_src.clone());
    let cj = g.constant(cache.c_tgt.clone());
    let sc_i = model.discriminate_content(&mut g, ci, TRAIN)?;
    let sc_j = model.discriminate_content(&mut g, cj, TRAIN)?;
    let (adv_c_d, _) = losses::loss_content_adv(&mut g, sc_i, sc_j);

    // Fresh prior-style translation for the segmentor update.
    let x_i = g.constant(batch.x_src.clone());
    let c_fresh = model.encode_content(&mut g, x_i, FROZEN)?;
    let z3 = {
        let z = normal_vec::<F>(&mut state.rng, cfg.arch.style_dim);
        g.constant(z)
    };
    let f_z3 = model.latent_scale(&mut g, z3, FROZEN)?;
    let x_tr = model.generate(&mut g, c_fresh, f_z3, tgt, FROZEN)?;
    let x_tr = g.detach(x_tr);
    let p_hat = model.segment(&mut g, x_tr, tgt, TRAIN)?;
    let seg = losses::loss_seg(&mut g, p_hat, &batch.mask_src)?;

    let (struct_d, struct_g_seg) = if model.disc_joint.is_some() {
        let psi_hat = foreground(&mut g, p_hat);
        // The segmentor's share of the structure objective flows through
        // psi_hat with D_s frozen.
        let s_frozen = model.discriminate_joint(&mut g, x_tr, psi_hat, tgt, FROZEN)?;
        let (_, st_g) = losses::loss_struct(&mut g, s_frozen, s_frozen);
        // D_s updates on detached probability maps from both sides.
        let psi_hat_d = g.detach(psi_hat);
        let p_real = model.segment(&mut g, x_j, tgt, FROZEN)?;
        let psi_real = foreground(&mut g, p_real);
        let psi_real_d = g.detach(psi_real);
        let ds_real = model.discriminate_joint(&mut g, x_j, psi_real_d, tgt, TRAIN)?;
        let ds_fake = model.discriminate_joint(&mut g, x_tr, psi_hat_d, tgt, TRAIN)?;
        let (st_d, _) = losses::loss_struct(&mut g, ds_real, ds_fake);
        (st_d, st_g)
    } else {
        let zero = g.constant(ndarray::arr0(F::zero()).into_dyn());
        (zero, zero)
    };

    let struct_weight = if model.disc_joint.is_some() {
        cfg.weights.st
    } else {
        0.0
    };
    let mut total = gan_d;
    total = g.add(total, adv_c_d);
    total = g.add(total, struct_d);
    total = g.add(total, seg);
    let st_scaled = g.scale(struct_g_seg, F::from_f64(struct_weight));
    total = g.add(total, st_scaled);

    let mut terms = BTreeMap::new();
    for (name, var) in [
        ("d_gan", gan_d),
        ("d_adv_c", adv_c_d),
        ("d_struct", struct_d),
        ("d_seg", seg),
    ] {
        let v = g.scalar(var).as_f64();
        if !v.is_finite() {
            return Err(TrainError::NonFinite {
                term: match name {
                    "d_gan" => "d_gan",
                    "d_adv_c" => "d_adv_c",
                    "d_struct" => "d_struct",
                    _ => "d_seg",
                },
                iteration: it,
            });
        }
        terms.insert(name.to_string(), v);
    }

    let grads = g.backward(total);
    apply_updates(&g, &grads, &mut state.model, &mut state.opt, lr);
    Ok(LossBreakdown {
        total: g.scalar(total).as_f64(),
        terms,
    })
}

/// One metrics record per iteration (JSON lines). `wall_ms` is excluded
/// from the determinism hash.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub iter: u64,
    pub epoch: usize,
    pub lr: f64,
    pub terms: BTreeMap<String, f64>,
    pub wall_ms: f64,
}

impl MetricsRecord {
    /// Canonical form (without wall time) feeding the determinism hash.
    pub fn canonical(&self) -> String {
        let mut clone = self.clone();
        clone.wall_ms = 0.0;
        serde_json::to_string(&clone).expect("metrics serialize")
    }
}

pub struct TrainSummary {
    pub iterations: u64,
    pub final_checkpoint: PathBuf,
    pub metrics_path: PathBuf,
    pub metrics_sha256: String,
    pub wall_s: f64,
}

/// Run (or resume) a full training; writes metrics, checkpoints and the
/// metrics hash under `out_dir`.
pub fn train<F: Scalar>(
    cfg: &TrainConfig,
    dataset_root: &Path,
    manifest: &Manifest,
    out_dir: &Path,
    resume: bool,
) -> Result<TrainSummary, TrainError> {
    cfg.validate()?;
    if cfg.arch.n_domains != manifest.n_domains {
        return Err(TrainError::Config(format!(
            "config expects {} domains but dataset has {}",
            cfg.arch.n_domains, manifest.n_domains
        )));
    }
    if cfg.arch.n_classes != manifest.n_classes {
        return Err(TrainError::Config(format!(
            "config expects {} classes but dataset has {}",
            cfg.arch.n_classes, manifest.n_classes
        )));
    }
    let data: TrainData<F> = load_train_data(dataset_root, manifest)?;
    std::fs::create_dir_all(out_dir).map_err(|e| IoError::Io {
        path: out_dir.to_path_buf(),
        source: e,
    })?;

    let latest_dir = out_dir.join("checkpoints").join("latest");
    let mut state = if resume && latest_dir.join("meta.json").exists() {
        load_checkpoint::<F>(&latest_dir, cfg)?
    } else {
        TrainState::new(cfg, manifest.source_domain)
    };

    let metrics_path = out_dir.join("metrics.jsonl");
    let mut metrics_file = std::fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(&metrics_path)
        .map_err(|e| IoError::Io {
            path: metrics_path.clone(),
            source: e,
        })?;
    let val_path = out_dir.join("val.jsonl");
    let mut val_file = std::fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(&val_path)
        .map_err(|e| IoError::Io {
            path: val_path.clone(),
            source: e,
        })?;

    let started = Instant::now();
    let iters_per_epoch = data.source.len();
    let target_ids: Vec<usize> = data.targets.keys().copied().collect();

    while state.epoch < cfg.epochs_total {
        let lr = lr_at(state.epoch, cfg)?;
        // seed-determined visiting order of the source slices
        let mut order: Vec<usize> = (0..iters_per_epoch).collect();
        for i in (1..order.len()).rev() {
            let j = state.rng.gen_range(0..=i);
            order.swap(i, j);
        }
        for &src_idx in &order {
            let t0 = Instant::now();
            let target = target_ids[state.rng.gen_range(0..target_ids.len())];
            let tgt_pool = &data.targets[&target];
            let tgt_idx = state.rng.gen_range(0..tgt_pool.len());
            let batch = Batch {
                x_src: data.source[src_idx].0.clone(),
                mask_src: data.source[src_idx].1.clone(),
                x_tgt: tgt_pool[tgt_idx].clone(),
                target,
            };
            let (gen_bd, cache) = gen_step(cfg, &mut state, &batch, lr)?;
            let disc_bd = disc_step(cfg, &mut state, &batch, &cache, lr)?;
            state.iteration += 1;

            let mut terms = gen_bd.terms.clone();
            terms.insert("total".to_string(), gen_bd.total);
            for (k, v) in &disc_bd.terms {
                terms.insert(k.clone(), *v);
            }
            state.running = terms.clone();
            let record = MetricsRecord {
                iter: state.iteration,
                epoch: state.epoch,
                lr,
                terms,
                wall_ms: t0.elapsed().as_secs_f64() * 1e3,
            };
            let line = serde_json::to_string(&record).expect("metrics serialize");
            writeln!(metrics_file, "{line}").map_err(|e| IoError::Io {
                path: metrics_path.clone(),
                source: e,
            })?;

            if cfg.checkpoint_every > 0 && state.iteration % cfg.checkpoint_every as u64 == 0 {
                save_checkpoint(&state, cfg, &latest_dir)?;
            }
        }
        state.epoch += 1;

        if cfg.val_every_epochs > 0
            && (state.epoch % cfg.val_every_epochs == 0 || state.epoch == cfg.epochs_total)
            && !data.val.is_empty()
        {
            let dice = validation_dice(&state.model, &data)?;
            let mut rec = BTreeMap::new();
            rec.insert("epoch".to_string(), state.epoch as f64);
            for (d, v) in &dice {
                rec.insert(format!("dice_d{d}"), *v);
            }
            let line = serde_json::to_string(&rec).expect("val serialize");
            writeln!(val_file, "{line}").map_err(|e| IoError::Io {
                path: val_path.clone(),
                source: e,
            })?;
        }
    }

    save_checkpoint(&state, cfg, &latest_dir)?;
    let final_dir = out_dir.join("checkpoints").join("final");
    save_checkpoint(&state, cfg, &final_dir)?;

    drop(metrics_file);
    let metrics_sha256 = metrics_log_hash(&metrics_path)?;
    std::fs::write(
        out_dir.join("metrics.sha256"),
        format!("{metrics_sha256}  metrics.jsonl (wall_ms excluded)\n"),
    )
    .map_err(|e| IoError::Io {
        path: out_dir.join("metrics.sha256"),
        source: e,
    })?;

    Ok(TrainSummary {
        iterations: state.iteration,
        final_checkpoint: final_dir,
        metrics_path,
        metrics_sha256,
        wall_s: started.elapsed().as_secs_f64(),
    })
}

/// Mean foreground Dice of each target segmentor over the validation split.
pub fn validation_dice<F: Scalar>(
    model: &Model<F>,
    data: &TrainData<F>,
) -> Result<BTreeMap<usize, f64>, TrainError> {
    let mut out = BTreeMap::new();
    for (&domain, samples) in &data.val {
        if domain == data.source_domain || !model.segmentors.contains_key(&domain) {
            continue;
        }
        let mut acc = 0.0;
        let mut n = 0usize;
        for (img, mask) in samples {
            let mut g = Graph::<F>::new();
            let x = g.constant(img.clone());
            let p = model.segment(&mut g, x, domain, false)?;
            let pred = argmax_map(&g, p);
            let k = model.arch.n_classes;
            let mut per_organ = 0.0;
            for class in 1..=k {
                per_organ += crate::evalsuite::dice_masks(&pred, mask, class);
            }
            acc += per_organ / k as f64;
            n += 1;
        }
        if n > 0 {
            out.insert(domain, acc / n as f64);
        }
    }
    Ok(out)
}

/// Per-pixel argmax of a (C,H,W) probability map.
pub fn argmax_map<F: Scalar>(g: &Graph<F>, probs: Var) -> Array2<usize> {
    let v = g.value(probs);
    let s = v.shape();
    let (c, h, w) = (s[0], s[1], s[2]);
    let vs = v.as_slice().unwrap();
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

/// Hash of the metrics log with wall-clock times normalized away.
pub fn metrics_log_hash(path: &Path) -> Result<String, TrainError> {
    let text = std::fs::read_to_string(path).map_err(|e| IoError::Io {
        path: path.to_path_buf(),
        source: e,
    })?;
    let mut canon = String::new();
    for line in text.lines() {
        if line.trim().is_empty() {
            continue;
        }
        let rec: MetricsRecord = serde_json::from_str(line).map_err(|e| {
            TrainError::Checkpoint(format!("metrics log line unparseable: {e}"))
        })?;
        canon.push_str(&rec.canonical());
        canon.push('\n');
    }
    Ok(containerio::sha256_hex_bytes(canon.as_bytes()))
}

#[derive(Debug, Serialize, Deserialize)]
struct CheckpointMeta {
    version: u32,
    dtype: Dtype,
    arch: ArchConfig,
    source_domain: usize,
    use_struct_disc: bool,
    iteration: u64,
    epoch: usize,
    weights: LossWeights,
    rng: ChaCha12Rng,
    adam_t: Vec<u64>,
    running: BTreeMap<String, f64>,
}

/// Write a complete checkpoint: one tensor bundle per component, optimizer
/// moments, metadata (including RNG state) and a SHA-256 manifest.
pub fn save_checkpoint<F: Scalar>(
    state: &TrainState<F>,
    cfg: &TrainConfig,
    dir: &Path,
) -> Result<(), TrainError> {
    std::fs::create_dir_all(dir).map_err(|e| IoError::Io {
        path: dir.to_path_buf(),
        source: e,
    })?;
    let store = &state.model.store;
    let mut files: Vec<String> = Vec::new();
    for comp in store.components() {
        let tensors: Vec<(String, ArrayD<F>)> = store
            .ids_of(&comp)
            .into_iter()
            .map(|id| (store.name(id).to_string(), store.value(id).clone()))
            .collect();
        let fname = format!("{comp}.xmt");
        containerio::write_bundle(&dir.join(&fname), &tensors)?;
        files.push(fname);
    }
    let mut opt_tensors: Vec<(String, ArrayD<F>)> = Vec::new();
    for id in store.ids() {
        let full = format!("{}/{}", store.component(id), store.name(id));
        opt_tensors.push((format!("m.{full}"), state.opt.m[id.0].clone()));
        opt_tensors.push((format!("v.{full}"), state.opt.v[id.0].clone()));
    }
    containerio::write_bundle(&dir.join("optim.xmt"), &opt_tensors)?;
    files.push("optim.xmt".to_string());

    let meta = CheckpointMeta {
        version: 1,
        dtype: F::DTYPE,
        arch: state.model.arch.clone(),
        source_domain: state.model.source_domain,
        use_struct_disc: state.model.disc_joint.is_some(),
        iteration: state.iteration,
        epoch: state.epoch,
        weights: cfg.weights,
        rng: state.rng.clone(),
        adam_t: state.opt.t.clone(),
        running: state.running.clone(),
    };
    let meta_json = serde_json::to_vec_pretty(&meta).expect("meta serializes");
    containerio::atomic_write(&dir.join("meta.json"), &meta_json)?;
    files.push("meta.json".to_string());

    let mut manifest = String::new();
    for f in &files {
        let h = containerio::sha256_hex_file(&dir.join(f))?;
        manifest.push_str(&format!("{h}  {f}\n"));
    }
    containerio::atomic_write(&dir.join("manifest.sha256"), manifest.as_bytes())?;
    Ok(())
}

/// Load a checkpoint; every file hash is verified against the manifest
/// before anything is deserialized.
pub fn load_checkpoint<F: Scalar>(dir: &Path, cfg: &TrainConfig) -> Result<TrainState<F>, TrainError> {
    verify_checkpoint_integrity(dir)?;
    let meta_bytes = std::fs::read(dir.join("meta.json")).map_err(|e| IoError::Io {
        path: dir.join("meta.json"),
        source: e,
    })?;
    let meta: CheckpointMeta = serde_json::from_slice(&meta_bytes)
        .map_err(|e| TrainError::Checkpoint(format!("meta.json unparseable: {e}")))?;
    if meta.dtype != F::DTYPE {
        return Err(TrainError::Checkpoint(format!(
            "checkpoint dtype {} does not match configured dtype {}",
            meta.dtype.name(),
            F::DTYPE.name()
        )));
    }
    if meta.arch != cfg.arch {
        return Err(TrainError::Checkpoint(
            "checkpoint architecture differs from configured architecture".into(),
        ));
    }
    let mut state = TrainState::<F>::new(cfg, meta.source_domain);
    if state.model.disc_joint.is_some() != meta.use_struct_disc {
        return Err(TrainError::Checkpoint(
            "checkpoint structure-discriminator setting differs from config".into(),
        ));
    }
    let store = &state.model.store;
    let mut by_name: std::collections::HashMap<String, crate::tensor::ParamId> =
        Default::default();
    for id in store.ids() {
        by_name.insert(format!("{}/{}", store.component(id), store.name(id)), id);
    }
    for comp in state.model.store.components() {
        let tensors = containerio::read_bundle::<F>(&dir.join(format!("{comp}.xmt")))?;
        for (name, value) in tensors {
            let full = format!("{comp}/{name}");
            let id = *by_name.get(&full).ok_or_else(|| {
                TrainError::Checkpoint(format!("unexpected tensor '{full}' in checkpoint"))
            })?;
            if state.model.store.value(id).shape() != value.shape() {
                return Err(TrainError::Checkpoint(format!(
                    "tensor '{full}' has shape {:?}, expected {:?}",
                    value.shape(),
                    state.model.store.value(id).shape()
                )));
            }
            *state.model.store.value_mut(id) = value;
        }
    }
    let opt_tensors = containerio::read_bundle::<F>(&dir.join("optim.xmt"))?;
    for (name, value) in opt_tensors {
        let (kind, full) = name
            .split_once('.')
            .ok_or_else(|| TrainError::Checkpoint(format!("bad optimizer tensor '{name}'")))?;
        let id = *by_name.get(full).ok_or_else(|| {
            TrainError::Checkpoint(format!("optimizer tensor '{full}' matches no parameter"))
        })?;
        match kind {
            "m" => state.opt.m[id.0] = value,
            "v" => state.opt.v[id.0] = value,
            _ => {
                return Err(TrainError::Checkpoint(format!(
                    "unknown optimizer tensor kind '{kind}'"
                )))
            }
        }
    }
    if meta.adam_t.len() != state.opt.t.len() {
        return Err(TrainError::Checkpoint(
            "optimizer step counts do not match parameter count".into(),
        ));
    }
    state.opt.t = meta.adam_t;
    state.iteration = meta.iteration;
    state.epoch = meta.epoch;
    state.rng = meta.rng;
    state.running = meta.running;
    Ok(state)
}

/// Check every file hash recorded in the checkpoint manifest.
pub fn verify_checkpoint_integrity(dir: &Path) -> Result<(), TrainError> {
    let manifest_path = dir.join("manifest.sha256");
    let text = std::fs::read_to_string(&manifest_path).map_err(|e| IoError::Io {
        path: manifest_path.clone(),
        source: e,
    })?;
    for line in text.lines() {
        let Some((hash, name)) = line.split_once("  ") else {
            return Err(TrainError::Checkpoint(format!(
                "manifest line unparseable: '{line}'"
            )));
        };
        let actual = containerio::sha256_hex_file(&dir.join(name))?;
        if actual != hash {
            return Err(TrainError::Io(IoError::Integrity {
                path: dir.join(name),
                msg: "file hash does not match checkpoint manifest".into(),
            }));
        }
    }
    Ok(())
}

/// Supervised source-domain baseline: a lone segmentor trained directly on
/// labelled source images, later applied unchanged to target domains.
pub fn train_baseline_segmentor<F: Scalar>(
    arch: &ArchConfig,
    data: &TrainData<F>,
    epochs: usize,
    lr: f64,
    seed: u64,
) -> Result<SoloSegmentor<F>, TrainError> {
    let mut seg = SoloSegmentor::<F>::new(arch, seed);
    let n_params = seg.store.len();
    let mut m: Vec<ArrayD<F>> = (0..n_params)
        .map(|i| ArrayD::zeros(seg.store.value(crate::tensor::ParamId(i)).raw_dim()))
        .collect();
    let mut v = m.clone();
    let mut t = 0u64;
    let mut rng = rngutil::rng_from(seed, "baseline-train");
    let (b1, b2, eps): (f64, f64, f64) = (0.5, 0.999, 1e-8);
    for _ in 0..epochs {
        let mut order: Vec<usize> = (0..data.source.len()).collect();
        for i in (1..order.len()).rev() {
            let j = rng.gen_range(0..=i);
            order.swap(i, j);
        }
        for idx in order {
            let (img, mask) = &data.source[idx];
            let mut g = Graph::<F>::new();
            let x = g.constant(img.clone());
            let p = seg.forward(&mut g, x, true)?;
            let loss = losses::loss_seg(&mut g, p, mask)?;
            let grads = g.backward(loss);
            t += 1;
            let bc1 = 1.0 - b1.powi(t as i32);
            let bc2 = 1.0 - b2.powi(t as i32);
            for &(pid, var) in g.bound_params() {
                if let Some(grad) = grads.get(var) {
                    let ms = m[pid.0].as_slice_mut().unwrap();
                    let vs = v[pid.0].as_slice_mut().unwrap();
                    let gs = grad.as_slice().unwrap();
                    let ps = seg.store.value_mut(pid).as_slice_mut().unwrap();
                    for i in 0..gs.len() {
                        let gg = gs[i];
                        ms[i] = F::from_f64(b1) * ms[i] + F::from_f64(1.0 - b1) * gg;
                        vs[i] = F::from_f64(b2) * vs[i] + F::from_f64(1.0 - b2) * gg * gg;
                        let mh = ms[i].as_f64() / bc1;
                        let vh = vs[i].as_f64() / bc2;
                        ps[i] = F::from_f64(ps[i].as_f64() - lr * mh / (vh.sqrt() + eps));
                    }
                }
            }
        }
    }
    Ok(seg)
}
