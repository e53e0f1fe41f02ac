//! Learnable components: content encoder, style VAE encoder, latent-scale
//! layer, domain-conditioned generator, the three discriminators and the
//! per-target segmentors.
//!
//! One content encoder, one style encoder, one latent-scale layer, one
//! generator and one of each discriminator serve every domain; the domain
//! enters only through a one-hot code, injected by channel-wise
//! concatenation at the generator input and through bias-center instance
//! normalization ([`bcin`]) everywhere else. Only segmentors are
//! per-domain, so parameter counts grow with the number of domains only
//! through domain-code input widths.

use std::collections::BTreeMap;

use ndarray::{ArrayD, IxDyn};
use serde::{Deserialize, Serialize};

use crate::rngutil;
use crate::tensor::{Graph, ParamId, Scalar, Var};

#[derive(Debug, thiserror::Error)]
pub enum NetError {
    #[error("shape error: {0}")]
    Shape(String),
    #[error("no segmentor for domain {0}")]
    UnknownDomain(usize),
    #[error("numeric error: {0}")]
    Numeric(String),
}

/// Epsilon inside every instance-normalization denominator.
pub const BCIN_EPS: f64 = 1e-5;

/// Architecture hyperparameters. Everything is configurable; the defaults
/// are sized so the full benchmark trains quickly on a small CPU.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArchConfig {
    pub n_domains: usize,
    pub n_classes: usize,
    /// Style code length C_s.
    pub style_dim: usize,
    /// Content feature channels C (content map is H/2 x W/2 x C).
    pub content_ch: usize,
    /// Residual-block width of the generator.
    pub gen_ch: usize,
    /// Number of residual blocks in the generator.
    pub gen_blocks: usize,
    /// First-layer width of the style encoder.
    pub style_enc_ch: usize,
    /// Hidden width of the latent-scale MLP.
    pub ls_hidden: usize,
    /// Total fully connected layers in the latent-scale MLP.
    pub ls_layers: usize,
    /// First-layer width of the PatchGAN discriminators.
    pub disc_ch: usize,
    /// U-Net base width.
    pub unet_base: usize,
    /// U-Net downsampling steps.
    pub unet_depth: usize,
}

impl Default for ArchConfig {
    fn default() -> Self {
        ArchConfig {
            n_domains: 3,
            n_classes: 3,
            style_dim: 8,
            content_ch: 16,
            gen_ch: 16,
            gen_blocks: 5,
            style_enc_ch: 8,
            ls_hidden: 32,
            ls_layers: 5,
            disc_ch: 12,
            unet_base: 8,
            unet_depth: 4,
        }
    }
}

impl ArchConfig {
    /// Total number of modulated generator filters (one latent scale each):
    /// the first convolution of every residual block.
    pub fn latent_scale_len(&self) -> usize {
        self.gen_blocks * self.gen_ch
    }

    pub fn target_domains(&self, source: usize) -> Vec<usize> {
        (0..self.n_domains).filter(|&d| d != source).collect()
    }
}

/// Named parameter tensors, grouped by component for freezing, checkpoint
/// files and optimizer state.
pub struct ParamStore<F: Scalar> {
    entries: Vec<ParamEntry<F>>,
}

struct ParamEntry<F: Scalar> {
    component: String,
    name: String,
    value: ArrayD<F>,
}

impl<F: Scalar> ParamStore<F> {
    fn new() -> Self {
        ParamStore {
            entries: Vec::new(),
        }
    }

    fn alloc(&mut self, component: &str, name: &str, value: ArrayD<F>) -> ParamId {
        self.entries.push(ParamEntry {
            component: component.to_string(),
            name: name.to_string(),
            value,
        });
        ParamId(self.entries.len() - 1)
    }

    pub fn value(&self, id: ParamId) -> &ArrayD<F> {
        &self.entries[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut ArrayD<F> {
        &mut self.entries[id.0].value
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn component(&self, id: ParamId) -> &str {
        &self.entries[id.0].component
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].name
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn ids_of(&self, component: &str) -> Vec<ParamId> {
        (0..self.entries.len())
            .filter(|&i| self.entries[i].component == component)
            .map(ParamId)
            .collect()
    }

    pub fn components(&self) -> Vec<String> {
        let mut seen = std::collections::BTreeSet::new();
        for e in &self.entries {
            seen.insert(e.component.clone());
        }
        seen.into_iter().collect()
    }

    /// Scalar count of one component's parameters.
    pub fn component_param_count(&self, component: &str) -> usize {
        self.entries
            .iter()
            .filter(|e| e.component == component)
            .map(|e| e.value.len())
            .sum()
    }
}

struct Init {
    rng: rand_chacha::ChaCha12Rng,
}

impl Init {
    fn conv<F: Scalar>(
        &mut self,
        ps: &mut ParamStore<F>,
        comp: &str,
        name: &str,
        cout: usize,
        cin: usize,
        k: usize,
    ) -> (ParamId, ParamId) {
        // GAN-standard N(0, 0.02) for convolution weights, zero bias.
        let w = rngutil::normal_array::<F>(&mut self.rng, &[cout, cin, k, k], 0.02);
        let b = ArrayD::zeros(IxDyn(&[cout]));
        (
            ps.alloc(comp, &format!("{name}.w"), w),
            ps.alloc(comp, &format!("{name}.b"), b),
        )
    }

    fn fc<F: Scalar>(
        &mut self,
        ps: &mut ParamStore<F>,
        comp: &str,
        name: &str,
        out: usize,
        inp: usize,
    ) -> (ParamId, ParamId) {
        let std = (2.0 / inp as f64).sqrt();
        let w = rngutil::normal_array::<F>(&mut self.rng, &[out, inp], std);
        let b = ArrayD::zeros(IxDyn(&[out]));
        (
            ps.alloc(comp, &format!("{name}.w"), w),
            ps.alloc(comp, &format!("{name}.b"), b),
        )
    }

    /// Domain-bias map of a BCIN site: zero-initialized so BCIN starts as
    /// plain instance normalization.
    fn bcin<F: Scalar>(
        &mut self,
        ps: &mut ParamStore<F>,
        comp: &str,
        name: &str,
        ch: usize,
        n_domains: usize,
    ) -> (ParamId, ParamId) {
        let w = ArrayD::zeros(IxDyn(&[ch, n_domains]));
        let b = ArrayD::zeros(IxDyn(&[ch]));
        (
            ps.alloc(comp, &format!("{name}.dw"), w),
            ps.alloc(comp, &format!("{name}.db"), b),
        )
    }
}

/// Bias-center instance normalization:
/// `out = instance_norm(x) + tanh(W d + b)` with the bias broadcast per
/// channel. `w`: (C, N), `b`: (C,), `d`: one-hot (N,).
pub fn bcin<F: Scalar>(g: &mut Graph<F>, x: Var, d: Var, w: Var, b: Var) -> Var {
    let normed = g.instance_norm(x, F::from_f64(BCIN_EPS));
    let raw = g.linear(d, w, b);
    let bias = g.tanh(raw);
    g.add_ch(normed, bias)
}

/// Validating wrapper around [`bcin`] for external callers: rejects NaN
/// input up front (constant channels are already handled by the epsilon).
pub fn bcin_checked<F: Scalar>(
    g: &mut Graph<F>,
    x: Var,
    d: Var,
    w: Var,
    b: Var,
) -> Result<Var, NetError> {
    if g.shape(x).len() != 3 {
        return Err(NetError::Shape(format!(
            "bcin expects (C,H,W), got {:?}",
            g.shape(x)
        )));
    }
    if g.shape(x)[1] * g.shape(x)[2] < 2 {
        return Err(NetError::Shape(
            "bcin needs at least 2 spatial elements per channel".into(),
        ));
    }
    if g.value(x).iter().any(|v| !v.is_finite()) {
        return Err(NetError::Numeric("bcin input contains NaN/Inf".into()));
    }
    Ok(bcin(g, x, d, w, b))
}

/// Style code triple produced by the VAE encoder.
#[derive(Debug, Clone, Copy)]
pub struct StyleCode {
    pub mean: Var,
    pub log_var: Var,
    pub sample: Var,
}

struct ConvLayer {
    w: ParamId,
    b: ParamId,
    stride: usize,
    pad: usize,
}

impl ConvLayer {
    fn forward<F: Scalar>(
        &self,
        g: &mut Graph<F>,
        ps: &ParamStore<F>,
        x: Var,
        trainable: bool,
    ) -> Var {
        let w = g.param(self.w, ps.value(self.w), trainable);
        let b = g.param(self.b, ps.value(self.b), trainable);
        g.conv2d(x, w, b, self.stride, self.pad)
    }
}

struct FcLayer {
    w: ParamId,
    b: ParamId,
}

impl FcLayer {
    fn forward<F: Scalar>(
        &self,
        g: &mut Graph<F>,
        ps: &ParamStore<F>,
        x: Var,
        trainable: bool,
    ) -> Var {
        let w = g.param(self.w, ps.value(self.w), trainable);
        let b = g.param(self.b, ps.value(self.b), trainable);
        g.linear(x, w, b)
    }
}

struct BcinLayer {
    dw: ParamId,
    db: ParamId,
}

impl BcinLayer {
    fn forward<F: Scalar>(
        &self,
        g: &mut Graph<F>,
        ps: &ParamStore<F>,
        x: Var,
        d: Var,
        trainable: bool,
    ) -> Var {
        let w = g.param(self.dw, ps.value(self.dw), trainable);
        let b = g.param(self.db, ps.value(self.db), trainable);
        bcin(g, x, d, w, b)
    }
}

/// E_c: fully convolutional, output stride 2, shared across all domains.
pub struct ContentEncoder {
    conv1: ConvLayer,
    conv2: ConvLayer,
    conv3: ConvLayer,
}

impl ContentEncoder {
    fn build<F: Scalar>(ps: &mut ParamStore<F>, init: &mut Init, arch: &ArchConfig) -> Self {
        let mid = (arch.content_ch / 2).max(4);
        let (w1, b1) = init.conv(ps, "e_c", "conv1", mid, 1, 3);
        let (w2, b2) = init.conv(ps, "e_c", "conv2", arch.content_ch, mid, 3);
        let (w3, b3) = init.conv(ps, "e_c", "conv3", arch.content_ch, arch.content_ch, 3);
        ContentEncoder {
            conv1: ConvLayer {
                w: w1,
                b: b1,
                stride: 1,
                pad: 1,
            },
            conv2: ConvLayer {
                w: w2,
                b: b2,
                stride: 2,
                pad: 1,
            },
            conv3: ConvLayer {
                w: w3,
                b: b3,
                stride: 1,
                pad: 1,
            },
        }
    }

    pub fn forward<F: Scalar>(
        &self,
        g: &mut Graph<F>,
        ps: &ParamStore<F>,
        x: Var,
        trainable: bool,
    ) -> Var {
        let eps = F::from_f64(BCIN_EPS);
        let h = self.conv1.forward(g, ps, x, trainable);
        let h = g.instance_norm(h, eps);
        let h = g.relu(h);
        let h = self.conv2.forward(g, ps, h, trainable);
        let h = g.instance_norm(h, eps);
        let h = g.relu(h);
        let h = self.conv3.forward(g, ps, h, trainable);
        let h = g.instance_norm(h, eps);
        g.relu(h)
    }
}

/// E_s: convolution and max-pooling stages, global average pooling, then
/// fully connected heads for mean and log-variance.
pub struct StyleEncoder {
    convs: Vec<ConvLayer>,
    fc: FcLayer,
    fc_mean: FcLayer,
    fc_logvar: FcLayer,
}

impl StyleEncoder {
    fn build<F: Scalar>(ps: &mut ParamStore<F>, init: &mut Init, arch: &ArchConfig) -> Self {
        let e = arch.style_enc_ch;
        let widths = [(1, e), (e, 2 * e), (2 * e, 4 * e)];
        let convs = widths
            .iter()
            .enumerate()
            .map(|(i, &(cin, cout))| {
                let (w, b) = init.conv(ps, "e_s", &format!("conv{}", i + 1), cout, cin, 3);
                ConvLayer {
                    w,
                    b,
                    stride: 1,
                    pad: 1,
                }
            })
            .collect();
        let (fw, fb) = init.fc(ps, "e_s", "fc", 4 * e, 4 * e);
        let (mw, mb) = init.fc(ps, "e_s", "fc_mean", arch.style_dim, 4 * e);
        let (vw, vb) = init.fc(ps, "e_s", "fc_logvar", arch.style_dim, 4 * e);
        StyleEncoder {
            convs,
            fc: FcLayer { w: fw, b: fb },
            fc_mean: FcLayer { w: mw, b: mb },
            fc_logvar: FcLayer { w: vw, b: vb },
        }
    }

    /// `eps` is the externally drawn standard-normal vector used by the
    /// reparameterization, so sampling is deterministic under a fixed RNG.
    pub fn forward<F: Scalar>(
        &self,
        g: &mut Graph<F>,
        ps: &ParamStore<F>,
        x: Var,
        eps: Var,
        trainable: bool,
    ) -> StyleCode {
        let mut h = x;
        for conv in &self.convs {
            h = conv.forward(g, ps, h, trainable);
            h = g.relu(h);
            h = g.max_pool2(h);
        }
        let pooled = g.global_avg_pool(h);
        let feat = self.fc.forward(g, ps, pooled, trainable);
        let feat = g.relu(feat);
        let mean = self.fc_mean.forward(g, ps, feat, trainable);
        let raw_logvar = self.fc_logvar.forward(g, ps, feat, trainable);
        // keep exp(logvar/2) finite under adversarial pressure
        let log_var = g.clamp(raw_logvar, F::from_f64(-10.0), F::from_f64(10.0));
        let half = g.scale(log_var, F::from_f64(0.5));
        let std = g.exp(half);
        let noise = g.mul(std, eps);
        let sample = g.add(mean, noise);
        StyleCode {
            mean,
            log_var,
            sample,
        }
    }

    pub fn n_pool_stages(&self) -> usize {
        self.convs.len()
    }
}

/// L_s: the latent-scale MLP; tanh keeps every output scale in [-1, 1].
pub struct LatentScale {
    layers: Vec<FcLayer>,
}

impl LatentScale {
    fn build<F: Scalar>(ps: &mut ParamStore<F>, init: &mut Init, arch: &ArchConfig) -> Self {
        assert!(arch.ls_layers >= 2, "latent scale needs at least 2 layers");
        let f_total = arch.latent_scale_len();
        let mut layers = Vec::with_capacity(arch.ls_layers);
        let mut cin = arch.style_dim;
        for i in 0..arch.ls_layers {
            let last = i + 1 == arch.ls_layers;
            let cout = if last { f_total } else { arch.ls_hidden };
            let (w, b) = init.fc(ps, "l_s", &format!("fc{}", i + 1), cout, cin);
            layers.push(FcLayer { w, b });
            cin = cout;
        }
        LatentScale { layers }
    }

    pub fn forward<F: Scalar>(
        &self,
        g: &mut Graph<F>,
        ps: &ParamStore<F>,
        s: Var,
        trainable: bool,
    ) -> Var {
        let mut h = s;
        let n = self.layers.len();
        for (i, fc) in self.layers.iter().enumerate() {
            h = fc.forward(g, ps, h, trainable);
            if i + 1 < n {
                h = g.relu(h);
            }
        }
        g.tanh(h)
    }
}

struct ResBlock {
    conv1: ConvLayer,
    bcin1: BcinLayer,
    conv2: ConvLayer,
    bcin2: BcinLayer,
}

/// G: domain code concatenated to the content map, residual blocks whose
/// first-conv outputs are scaled channel-wise by the latent style scales,
/// BCIN domain injection throughout, nearest-neighbor upsampling back to
/// input resolution and a tanh head.
pub struct Generator {
    in_conv: ConvLayer,
    in_bcin: BcinLayer,
    blocks: Vec<ResBlock>,
    up_conv: ConvLayer,
    up_bcin: BcinLayer,
    out_conv: ConvLayer,
    gen_ch: usize,
}

impl Generator {
    fn build<F: Scalar>(ps: &mut ParamStore<F>, init: &mut Init, arch: &ArchConfig) -> Self {
        let gc = arch.gen_ch;
        let (wi, bi) = init.conv(ps, "g", "in", gc, arch.content_ch + arch.n_domains, 3);
        let in_bcin = {
            let (dw, db) = init.bcin(ps, "g", "in_bcin", gc, arch.n_domains);
            BcinLayer { dw, db }
        };
        let blocks = (0..arch.gen_blocks)
            .map(|bi| {
                let (w1, b1) = init.conv(ps, "g", &format!("block{bi}.conv1"), gc, gc, 3);
                let (dw1, db1) =
                    init.bcin(ps, "g", &format!("block{bi}.bcin1"), gc, arch.n_domains);
                let (w2, b2) = init.conv(ps, "g", &format!("block{bi}.conv2"), gc, gc, 3);
                let (dw2, db2) =
                    init.bcin(ps, "g", &format!("block{bi}.bcin2"), gc, arch.n_domains);
                ResBlock {
                    conv1: ConvLayer {
                        w: w1,
                        b: b1,
                        stride: 1,
                        pad: 1,
                    },
                    bcin1: BcinLayer { dw: dw1, db: db1 },
                    conv2: ConvLayer {
                        w: w2,
                        b: b2,
                        stride: 1,
                        pad: 1,
                    },
                    bcin2: BcinLayer { dw: dw2, db: db2 },
                }
            })
            .collect();
        let up_ch = (gc / 2).max(4);
        let (wu, bu) = init.conv(ps, "g", "up", up_ch, gc, 3);
        let up_bcin = {
            let (dw, db) = init.bcin(ps, "g", "up_bcin", up_ch, arch.n_domains);
            BcinLayer { dw, db }
        };
        let (wo, bo) = init.conv(ps, "g", "out", 1, up_ch, 3);
        Generator {
            in_conv: ConvLayer {
                w: wi,
                b: bi,
                stride: 1,
                pad: 1,
            },
            in_bcin,
            blocks,
            up_conv: ConvLayer {
                w: wu,
                b: bu,
                stride: 1,
                pad: 1,
            },
            up_bcin,
            out_conv: ConvLayer {
                w: wo,
                b: bo,
                stride: 1,
                pad: 1,
            },
            gen_ch: gc,
        }
    }

    pub fn forward<F: Scalar>(
        &self,
        g: &mut Graph<F>,
        ps: &ParamStore<F>,
        content: Var,
        f_s: Var,
        d: Var,
        trainable: bool,
    ) -> Var {
        let (hp, wp) = {
            let s = g.shape(content);
            (s[1], s[2])
        };
        let d_map = g.tile_ch(d, hp, wp);
        let x = g.concat_ch(content, d_map);
        let h = self.in_conv.forward(g, ps, x, trainable);
        let h = self.in_bcin.forward(g, ps, h, d, trainable);
        let mut h = g.relu(h);
        for (bi, block) in self.blocks.iter().enumerate() {
            let t = block.conv1.forward(g, ps, h, trainable);
            // latent style scales multiply their block's filter outputs
            let scales = g.slice_vec(f_s, bi * self.gen_ch, self.gen_ch);
            let t = g.mul_ch(t, scales);
            let t = block.bcin1.forward(g, ps, t, d, trainable);
            let t = g.relu(t);
            let t = block.conv2.forward(g, ps, t, trainable);
            let t = block.bcin2.forward(g, ps, t, d, trainable);
            h = g.add(h, t);
        }
        let h = g.upsample_nearest2(h);
        let h = self.up_conv.forward(g, ps, h, trainable);
        let h = self.up_bcin.forward(g, ps, h, d, trainable);
        let h = g.relu(h);
        let h = self.out_conv.forward(g, ps, h, trainable);
        g.tanh(h)
    }
}

/// PatchGAN discriminator; optionally domain-conditioned through BCIN.
/// The output is a sigmoid probability map over patches.
pub struct PatchDisc {
    layers: Vec<(ConvLayer, Option<BcinLayer>)>,
    final_conv: ConvLayer,
}

impl PatchDisc {
    fn build<F: Scalar>(
        ps: &mut ParamStore<F>,
        init: &mut Init,
        comp: &str,
        in_ch: usize,
        base: usize,
        n_domains: Option<usize>,
    ) -> Self {
        let widths = [(in_ch, base), (base, 2 * base), (2 * base, 4 * base)];
        let layers = widths
            .iter()
            .enumerate()
            .map(|(i, &(cin, cout))| {
                let (w, b) = init.conv(ps, comp, &format!("conv{}", i + 1), cout, cin, 4);
                let conv = ConvLayer {
                    w,
                    b,
                    stride: 2,
                    pad: 1,
                };
                let bc = n_domains.map(|nd| {
                    let (dw, db) = init.bcin(ps, comp, &format!("bcin{}", i + 1), cout, nd);
                    BcinLayer { dw, db }
                });
                (conv, bc)
            })
            .collect();
        let (wf, bf) = init.conv(ps, comp, "final", 1, 4 * base, 4);
        PatchDisc {
            layers,
            final_conv: ConvLayer {
                w: wf,
                b: bf,
                stride: 1,
                pad: 1,
            },
        }
    }

    /// `d` must be Some iff the discriminator was built with BCIN.
    pub fn forward<F: Scalar>(
        &self,
        g: &mut Graph<F>,
        ps: &ParamStore<F>,
        x: Var,
        d: Option<Var>,
        trainable: bool,
    ) -> Var {
        let slope = F::from_f64(0.2);
        let mut h = x;
        for (conv, bc) in &self.layers {
            h = conv.forward(g, ps, h, trainable);
            h = match (bc, d) {
                (Some(bc), Some(d)) => bc.forward(g, ps, h, d, trainable),
                (None, _) => g.instance_norm(h, F::from_f64(BCIN_EPS)),
                (Some(_), None) => panic!("domain-conditioned discriminator needs a domain code"),
            };
            h = g.leaky_relu(h, slope);
        }
        let score = self.final_conv.forward(g, ps, h, trainable);
        g.sigmoid(score)
    }
}

/// U-Net segmentor with softmax over K+1 classes.
pub struct UNet {
    enc: Vec<ConvLayer>,
    bottleneck: ConvLayer,
    dec: Vec<ConvLayer>,
    head: ConvLayer,
    depth: usize,
}

impl UNet {
    fn build<F: Scalar>(
        ps: &mut ParamStore<F>,
        init: &mut Init,
        comp: &str,
        arch: &ArchConfig,
    ) -> Self {
        let u = arch.unet_base;
        let depth = arch.unet_depth;
        let mut enc = Vec::with_capacity(depth);
        let mut cin = 1;
        for i in 0..depth {
            let w = u << i;
            let (cw, cb) = init.conv(ps, comp, &format!("enc{i}"), w, cin, 3);
            enc.push(ConvLayer {
                w: cw,
                b: cb,
                stride: 1,
                pad: 1,
            });
            cin = w;
        }
        let wb = u << depth;
        let (bw, bb) = init.conv(ps, comp, "bottleneck", wb, cin, 3);
        let bottleneck = ConvLayer {
            w: bw,
            b: bb,
            stride: 1,
            pad: 1,
        };
        let mut dec = Vec::with_capacity(depth);
        let mut prev = wb;
        for i in (0..depth).rev() {
            let skip = u << i;
            let (dw, db) = init.conv(ps, comp, &format!("dec{i}"), skip, prev + skip, 3);
            dec.push(ConvLayer {
                w: dw,
                b: db,
                stride: 1,
                pad: 1,
            });
            prev = skip;
        }
        let (hw, hb) = init.conv(ps, comp, "head", arch.n_classes + 1, u, 1);
        UNet {
            enc,
            bottleneck,
            dec,
            head: ConvLayer {
                w: hw,
                b: hb,
                stride: 1,
                pad: 0,
            },
            depth,
        }
    }

    /// Returns per-pixel class probabilities (K+1, H, W).
    pub fn forward<F: Scalar>(
        &self,
        g: &mut Graph<F>,
        ps: &ParamStore<F>,
        x: Var,
        trainable: bool,
    ) -> Var {
        let eps = F::from_f64(BCIN_EPS);
        let mut skips = Vec::with_capacity(self.depth);
        let mut h = x;
        for conv in &self.enc {
            let t = conv.forward(g, ps, h, trainable);
            let t = g.instance_norm(t, eps);
            let t = g.relu(t);
            skips.push(t);
            h = g.max_pool2(t);
        }
        let t = self.bottleneck.forward(g, ps, h, trainable);
        let t = g.instance_norm(t, eps);
        h = g.relu(t);
        for (conv, skip) in self.dec.iter().zip(skips.iter().rev()) {
            let up = g.upsample_nearest2(h);
            let cat = g.concat_ch(up, *skip);
            let t = conv.forward(g, ps, cat, trainable);
            let t = g.instance_norm(t, eps);
            h = g.relu(t);
        }
        let logits = self.head.forward(g, ps, h, trainable);
        g.softmax_ch(logits)
    }
}

/// Foreground probability: 1 - background channel (= sum of channels 1..K).
pub fn foreground<F: Scalar>(g: &mut Graph<F>, probs: Var) -> Var {
    let p0 = g.slice_ch(probs, 0, 1);
    g.one_minus(p0)
}

/// Component key of the segmentor for one target domain, used in freeze
/// sets and checkpoint file names.
pub fn segmentor_key(domain: usize) -> String {
    format!("s_{domain}")
}

/// A lone U-Net with its own parameter store; the source-only baseline that
/// the unsupervised pipeline is compared against.
pub struct SoloSegmentor<F: Scalar> {
    pub store: ParamStore<F>,
    pub unet: UNet,
}

impl<F: Scalar> SoloSegmentor<F> {
    pub fn new(arch: &ArchConfig, seed: u64) -> Self {
        let mut store = ParamStore::new();
        let mut init = Init {
            rng: rngutil::rng_from(seed, "baseline-init"),
        };
        let unet = UNet::build(&mut store, &mut init, "s_baseline", arch);
        SoloSegmentor { store, unet }
    }

    pub fn forward(&self, g: &mut Graph<F>, x: Var, trainable: bool) -> Result<Var, NetError> {
        let s = g.shape(x).to_vec();
        let div = 1 << self.unet.depth;
        if s.len() != 3 || s[0] != 1 || s[1] % div != 0 || s[2] % div != 0 {
            return Err(NetError::Shape(format!(
                "segmentor needs (1,H,W) with extents divisible by {div}, got {s:?}"
            )));
        }
        Ok(self.unet.forward(g, &self.store, x, trainable))
    }
}

/// The full component set operating on one parameter store.
pub struct Model<F: Scalar> {
    pub arch: ArchConfig,
    pub source_domain: usize,
    pub store: ParamStore<F>,
    pub content_enc: ContentEncoder,
    pub style_enc: StyleEncoder,
    pub latent_scale: LatentScale,
    pub generator: Generator,
    pub disc: PatchDisc,
    pub disc_content: PatchDisc,
    /// None when the structure discriminator is ablated away.
    pub disc_joint: Option<PatchDisc>,
    pub segmentors: BTreeMap<usize, UNet>,
}

impl<F: Scalar> Model<F> {
    pub fn new(arch: &ArchConfig, source_domain: usize, seed: u64, with_joint_disc: bool) -> Self {
        assert!(source_domain < arch.n_domains);
        let mut ps = ParamStore::new();
        let mut init = Init {
            rng: rngutil::rng_from(seed, "model-init"),
        };
        let content_enc = ContentEncoder::build(&mut ps, &mut init, arch);
        let style_enc = StyleEncoder::build(&mut ps, &mut init, arch);
        let latent_scale = LatentScale::build(&mut ps, &mut init, arch);
        let generator = Generator::build(&mut ps, &mut init, arch);
        let disc = PatchDisc::build(&mut ps, &mut init, "d", 1, arch.disc_ch, Some(arch.n_domains));
        let disc_content = PatchDisc::build(
            &mut ps,
            &mut init,
            "d_c",
            arch.content_ch,
            arch.disc_ch,
            None,
        );
        let disc_joint = with_joint_disc.then(|| {
            PatchDisc::build(
                &mut ps,
                &mut init,
                "d_s",
                2,
                arch.disc_ch,
                Some(arch.n_domains),
            )
        });
        let segmentors = arch
            .target_domains(source_domain)
            .into_iter()
            .map(|dj| {
                let unet = UNet::build(&mut ps, &mut init, &segmentor_key(dj), arch);
                (dj, unet)
            })
            .collect();
        Model {
            arch: arch.clone(),
            source_domain,
            store: ps,
            content_enc,
            style_enc,
            latent_scale,
            generator,
            disc,
            disc_content,
            disc_joint,
            segmentors,
        }
    }

    /// One-hot domain code as a graph constant.
    pub fn domain_code(&self, g: &mut Graph<F>, domain: usize) -> Var {
        assert!(domain < self.arch.n_domains, "domain {domain} out of range");
        let mut v = ArrayD::zeros(IxDyn(&[self.arch.n_domains]));
        v[[domain]] = F::one();
        g.constant(v)
    }

    /// Parameter count of the translation stack (everything except the
    /// per-target segmentors).
    pub fn translation_stack_param_count(&self) -> usize {
        ["e_c", "e_s", "l_s", "g", "d", "d_c", "d_s"]
            .iter()
            .map(|c| self.store.component_param_count(c))
            .sum()
    }

    pub fn encode_content(
        &self,
        g: &mut Graph<F>,
        x: Var,
        trainable: bool,
    ) -> Result<Var, NetError> {
        let s = g.shape(x).to_vec();
        if s.len() != 3 || s[0] != 1 {
            return Err(NetError::Shape(format!("image must be (1,H,W), got {s:?}")));
        }
        if s[1] % 2 != 0 || s[2] % 2 != 0 {
            return Err(NetError::Shape(format!(
                "image extent must be even, got {}x{}",
                s[1], s[2]
            )));
        }
        Ok(self.content_enc.forward(g, &self.store, x, trainable))
    }

    pub fn encode_style(
        &self,
        g: &mut Graph<F>,
        x: Var,
        eps: Var,
        trainable: bool,
    ) -> Result<StyleCode, NetError> {
        let s = g.shape(x).to_vec();
        if s.len() != 3 || s[0] != 1 {
            return Err(NetError::Shape(format!("image must be (1,H,W), got {s:?}")));
        }
        let pools = self.style_enc.n_pool_stages();
        if s[1] % (1 << pools) != 0 || s[2] % (1 << pools) != 0 {
            return Err(NetError::Shape(format!(
                "style encoder needs extents divisible by {}, got {}x{}",
                1 << pools,
                s[1],
                s[2]
            )));
        }
        if g.shape(eps) != [self.arch.style_dim] {
            return Err(NetError::Shape(format!(
                "reparameterization noise must have length {}",
                self.arch.style_dim
            )));
        }
        Ok(self.style_enc.forward(g, &self.store, x, eps, trainable))
    }

    pub fn latent_scale(&self, g: &mut Graph<F>, s: Var, trainable: bool) -> Result<Var, NetError> {
        if g.shape(s) != [self.arch.style_dim] {
            return Err(NetError::Shape(format!(
                "style code must have length {}, got {:?}",
                self.arch.style_dim,
                g.shape(s)
            )));
        }
        Ok(self.latent_scale.forward(g, &self.store, s, trainable))
    }

    pub fn generate(
        &self,
        g: &mut Graph<F>,
        content: Var,
        f_s: Var,
        domain: usize,
        trainable: bool,
    ) -> Result<Var, NetError> {
        let cs = g.shape(content).to_vec();
        if cs.len() != 3 || cs[0] != self.arch.content_ch {
            return Err(NetError::Shape(format!(
                "content map must be ({},H',W'), got {cs:?}",
                self.arch.content_ch
            )));
        }
        if g.shape(f_s) != [self.arch.latent_scale_len()] {
            return Err(NetError::Shape(format!(
                "latent scales must have length {}, got {:?}",
                self.arch.latent_scale_len(),
                g.shape(f_s)
            )));
        }
        let d = self.domain_code(g, domain);
        Ok(self
            .generator
            .forward(g, &self.store, content, f_s, d, trainable))
    }

    pub fn discriminate_content(
        &self,
        g: &mut Graph<F>,
        content: Var,
        trainable: bool,
    ) -> Result<Var, NetError> {
        let cs = g.shape(content).to_vec();
        if cs.len() != 3 || cs[0] != self.arch.content_ch {
            return Err(NetError::Shape(format!(
                "content map must be ({},H',W'), got {cs:?}",
                self.arch.content_ch
            )));
        }
        Ok(self
            .disc_content
            .forward(g, &self.store, content, None, trainable))
    }

    pub fn discriminate(
        &self,
        g: &mut Graph<F>,
        x: Var,
        domain: usize,
        trainable: bool,
    ) -> Result<Var, NetError> {
        let s = g.shape(x).to_vec();
        if s.len() != 3 || s[0] != 1 {
            return Err(NetError::Shape(format!("image must be (1,H,W), got {s:?}")));
        }
        let d = self.domain_code(g, domain);
        Ok(self.disc.forward(g, &self.store, x, Some(d), trainable))
    }

    pub fn discriminate_joint(
        &self,
        g: &mut Graph<F>,
        x: Var,
        psi: Var,
        domain: usize,
        trainable: bool,
    ) -> Result<Var, NetError> {
        let disc = self
            .disc_joint
            .as_ref()
            .expect("structure discriminator is disabled in this model");
        let (xs, ps) = (g.shape(x).to_vec(), g.shape(psi).to_vec());
        if xs.len() != 3 || ps.len() != 3 || xs[1..] != ps[1..] || xs[0] != 1 || ps[0] != 1 {
            return Err(NetError::Shape(format!(
                "image {xs:?} and foreground map {ps:?} must be aligned (1,H,W)"
            )));
        }
        let joint = g.concat_ch(x, psi);
        let d = self.domain_code(g, domain);
        Ok(disc.forward(g, &self.store, joint, Some(d), trainable))
    }

    pub fn segment(
        &self,
        g: &mut Graph<F>,
        x: Var,
        domain: usize,
        trainable: bool,
    ) -> Result<Var, NetError> {
        let unet = self
            .segmentors
            .get(&domain)
            .ok_or(NetError::UnknownDomain(domain))?;
        let s = g.shape(x).to_vec();
        let div = 1 << unet.depth;
        if s.len() != 3 || s[0] != 1 || s[1] % div != 0 || s[2] % div != 0 {
            return Err(NetError::Shape(format!(
                "segmentor needs (1,H,W) with extents divisible by {div}, got {s:?}"
            )));
        }
        Ok(unet.forward(g, &self.store, x, trainable))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::gradcheck;

    fn tiny_arch() -> ArchConfig {
        ArchConfig {
            n_domains: 3,
            n_classes: 3,
            style_dim: 4,
            content_ch: 6,
            gen_ch: 6,
            gen_blocks: 2,
            style_enc_ch: 4,
            ls_hidden: 8,
            ls_layers: 5,
            disc_ch: 6,
            unet_base: 4,
            unet_depth: 2,
        }
    }

    fn image_leaf(g: &mut Graph<f64>, h: usize, w: usize, seed: u64) -> Var {
        let mut rng = rngutil::rng_from(seed, "test-image");
        let arr =
            rngutil::normal_array::<f64>(&mut rng, &[1, h, w], 0.5).mapv(|v| v.clamp(-1.0, 1.0));
        g.leaf(arr)
    }

    #[test]
    fn content_map_shape_follows_contract() {
        let arch = ArchConfig {
            content_ch: 64,
            ..tiny_arch()
        };
        let model = Model::<f64>::new(&arch, 0, 1, true);
        let mut g = Graph::new();
        let x = image_leaf(&mut g, 64, 64, 0);
        let c = model.encode_content(&mut g, x, false).unwrap();
        assert_eq!(g.shape(c), &[64, 32, 32]);
    }

    #[test]
    fn content_encoder_rejects_odd_extent() {
        let model = Model::<f64>::new(&tiny_arch(), 0, 1, true);
        let mut g = Graph::new();
        let x = image_leaf(&mut g, 33, 32, 0);
        assert!(matches!(
            model.encode_content(&mut g, x, false),
            Err(NetError::Shape(_))
        ));
    }

    #[test]
    fn style_code_lengths_match_config() {
        let arch = ArchConfig {
            style_dim: 8,
            ..tiny_arch()
        };
        let model = Model::<f64>::new(&arch, 0, 1, true);
        let mut g = Graph::new();
        let x = image_leaf(&mut g, 32, 32, 1);
        let eps = g.constant(ndarray::ArrayD::zeros(ndarray::IxDyn(&[8])));
        let sc = model.encode_style(&mut g, x, eps, false).unwrap();
        assert_eq!(g.shape(sc.mean), &[8]);
        assert_eq!(g.shape(sc.log_var), &[8]);
        assert_eq!(g.shape(sc.sample), &[8]);
    }

    #[test]
    fn style_sampling_is_deterministic_given_eps() {
        let model = Model::<f64>::new(&tiny_arch(), 0, 1, true);
        let run = || {
            let mut g = Graph::new();
            let x = image_leaf(&mut g, 32, 32, 2);
            let mut rng = rngutil::rng_from(9, "eps");
            let eps_arr = rngutil::normal_array::<f64>(&mut rng, &[4], 1.0);
            let eps = g.constant(eps_arr);
            let sc = model.encode_style(&mut g, x, eps, false).unwrap();
            g.value(sc.sample).to_owned()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn reparameterization_matches_formula() {
        let model = Model::<f64>::new(&tiny_arch(), 0, 1, true);
        let mut g = Graph::new();
        let x = image_leaf(&mut g, 32, 32, 3);
        let mut rng = rngutil::rng_from(10, "eps");
        let eps_arr = rngutil::normal_array::<f64>(&mut rng, &[4], 1.0);
        let eps = g.constant(eps_arr.clone());
        let sc = model.encode_style(&mut g, x, eps, false).unwrap();
        let mean = g.value(sc.mean).to_owned();
        let lv = g.value(sc.log_var).to_owned();
        let sample = g.value(sc.sample).to_owned();
        for i in 0..4 {
            let want = mean[[i]] + (0.5 * lv[[i]]).exp() * eps_arr[[i]];
            assert!((sample[[i]] - want).abs() < 1e-12);
        }
    }

    #[test]
    fn latent_scales_stay_in_unit_interval() {
        let model = Model::<f64>::new(&tiny_arch(), 0, 1, true);
        for seed in 0..30 {
            let mut g = Graph::new();
            let mut rng = rngutil::rng_from(seed, "ls-in");
            let z = g.leaf(rngutil::normal_array::<f64>(&mut rng, &[4], 3.0));
            let f = model.latent_scale(&mut g, z, false).unwrap();
            assert_eq!(g.shape(f), &[model.arch.latent_scale_len()]);
            for &v in g.value(f).iter() {
                assert!((-1.0..=1.0).contains(&v));
            }
        }
    }

    #[test]
    fn latent_scale_rejects_wrong_length() {
        let model = Model::<f64>::new(&tiny_arch(), 0, 1, true);
        let mut g = Graph::new();
        let z = g.leaf(ndarray::ArrayD::zeros(ndarray::IxDyn(&[7])));
        assert!(matches!(
            model.latent_scale(&mut g, z, false),
            Err(NetError::Shape(_))
        ));
    }

    #[test]
    fn bcin_with_zero_bias_map_is_instance_norm() {
        let mut g = Graph::<f64>::new();
        let mut rng = rngutil::rng_from(4, "bcin");
        let x = g.leaf(rngutil::normal_array::<f64>(&mut rng, &[3, 4, 4], 2.0));
        let d = g.constant(ndarray::arr1(&[1.0, 0.0]).into_dyn());
        let w = g.constant(ndarray::ArrayD::zeros(ndarray::IxDyn(&[3, 2])));
        let b = g.constant(ndarray::ArrayD::zeros(ndarray::IxDyn(&[3])));
        let y = bcin_checked(&mut g, x, d, w, b).unwrap();
        let v = g.value(y);
        for c in 0..3 {
            let ch: Vec<f64> = (0..16).map(|i| v.as_slice().unwrap()[c * 16 + i]).collect();
            let mean: f64 = ch.iter().sum::<f64>() / 16.0;
            let var: f64 = ch.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / 16.0;
            assert!(mean.abs() < 1e-10);
            assert!((var - 1.0).abs() < 1e-3);
        }
    }

    #[test]
    fn bcin_domain_codes_shift_by_constant() {
        let mut g = Graph::<f64>::new();
        let mut rng = rngutil::rng_from(5, "bcin2");
        let xa = rngutil::normal_array::<f64>(&mut rng, &[2, 4, 4], 1.0);
        let wv = rngutil::normal_array::<f64>(&mut rng, &[2, 3], 0.7);
        let bv = rngutil::normal_array::<f64>(&mut rng, &[2], 0.3);
        let x = g.leaf(xa);
        let da = g.constant(ndarray::arr1(&[1.0, 0.0, 0.0]).into_dyn());
        let db = g.constant(ndarray::arr1(&[0.0, 0.0, 1.0]).into_dyn());
        let w = g.constant(wv.clone());
        let b = g.constant(bv.clone());
        let ya = bcin(&mut g, x, da, w, b);
        let yb = bcin(&mut g, x, db, w, b);
        let diff = &g.value(ya).to_owned() - &g.value(yb).to_owned();
        for c in 0..2 {
            let expect = (wv[[c, 0]] + bv[[c]]).tanh() - (wv[[c, 2]] + bv[[c]]).tanh();
            for i in 0..16 {
                let got = diff.as_slice().unwrap()[c * 16 + i];
                assert!((got - expect).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn bcin_rejects_nan_input() {
        let mut g = Graph::<f64>::new();
        let mut arr = ndarray::ArrayD::zeros(ndarray::IxDyn(&[1, 2, 2]));
        arr[[0, 0, 0]] = f64::NAN;
        let x = g.leaf(arr);
        let d = g.constant(ndarray::arr1(&[1.0]).into_dyn());
        let w = g.constant(ndarray::ArrayD::zeros(ndarray::IxDyn(&[1, 1])));
        let b = g.constant(ndarray::ArrayD::zeros(ndarray::IxDyn(&[1])));
        assert!(matches!(
            bcin_checked(&mut g, x, d, w, b),
            Err(NetError::Numeric(_))
        ));
    }

    #[test]
    fn bcin_constant_channel_stays_finite() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(ndarray::ArrayD::from_elem(ndarray::IxDyn(&[1, 3, 3]), 4.2));
        let d = g.constant(ndarray::arr1(&[1.0]).into_dyn());
        let w = g.constant(ndarray::ArrayD::zeros(ndarray::IxDyn(&[1, 1])));
        let b = g.constant(ndarray::ArrayD::zeros(ndarray::IxDyn(&[1])));
        let y = bcin_checked(&mut g, x, d, w, b).unwrap();
        assert!(g.value(y).iter().all(|v| v.is_finite()));
    }

    #[test]
    fn generator_output_shape_and_range() {
        let model = Model::<f64>::new(&tiny_arch(), 0, 1, true);
        let mut g = Graph::new();
        let x = image_leaf(&mut g, 32, 32, 6);
        let c = model.encode_content(&mut g, x, false).unwrap();
        let mut rng = rngutil::rng_from(11, "z");
        let z = g.leaf(rngutil::normal_array::<f64>(&mut rng, &[4], 1.0));
        let f = model.latent_scale(&mut g, z, false).unwrap();
        let y = model.generate(&mut g, c, f, 1, false).unwrap();
        assert_eq!(g.shape(y), &[1, 32, 32]);
        for &v in g.value(y).iter() {
            assert!((-1.0..=1.0).contains(&v));
        }
    }

    #[test]
    fn generator_zero_scales_still_finite() {
        let model = Model::<f64>::new(&tiny_arch(), 0, 1, true);
        let mut g = Graph::new();
        let x = image_leaf(&mut g, 32, 32, 7);
        let c = model.encode_content(&mut g, x, false).unwrap();
        let f = g.constant(ndarray::ArrayD::zeros(ndarray::IxDyn(&[model
            .arch
            .latent_scale_len()])));
        let y = model.generate(&mut g, c, f, 2, false).unwrap();
        assert!(g.value(y).iter().all(|v| v.is_finite()));
    }

    #[test]
    fn generator_rejects_wrong_scale_length() {
        let model = Model::<f64>::new(&tiny_arch(), 0, 1, true);
        let mut g = Graph::new();
        let x = image_leaf(&mut g, 32, 32, 8);
        let c = model.encode_content(&mut g, x, false).unwrap();
        let f = g.constant(ndarray::ArrayD::zeros(ndarray::IxDyn(&[5])));
        assert!(matches!(
            model.generate(&mut g, c, f, 1, false),
            Err(NetError::Shape(_))
        ));
    }

    #[test]
    fn discriminators_produce_patch_maps() {
        let model = Model::<f64>::new(&tiny_arch(), 0, 1, true);
        let mut g = Graph::new();
        let x = image_leaf(&mut g, 64, 64, 9);
        let s = model.discriminate(&mut g, x, 1, false).unwrap();
        let shape = g.shape(s).to_vec();
        assert_eq!(shape[0], 1);
        assert!(shape[1] >= 1 && shape[2] >= 1);
        for &v in g.value(s).iter() {
            assert!((0.0..=1.0).contains(&v));
        }
        let c = model.encode_content(&mut g, x, false).unwrap();
        let sc = model.discriminate_content(&mut g, c, false).unwrap();
        assert!(g.shape(sc)[1] >= 1);

        let probs = model.segment(&mut g, x, 1, false).unwrap();
        let psi = foreground(&mut g, probs);
        let sj = model.discriminate_joint(&mut g, x, psi, 1, false).unwrap();
        assert!(g.shape(sj)[1] >= 1);
    }

    #[test]
    fn joint_disc_rejects_misaligned_inputs() {
        let model = Model::<f64>::new(&tiny_arch(), 0, 1, true);
        let mut g = Graph::new();
        let x = image_leaf(&mut g, 64, 64, 10);
        let psi = g.constant(ndarray::ArrayD::zeros(ndarray::IxDyn(&[1, 32, 32])));
        assert!(matches!(
            model.discriminate_joint(&mut g, x, psi, 1, false),
            Err(NetError::Shape(_))
        ));
    }

    #[test]
    fn segment_probabilities_sum_to_one_and_argmax_in_range() {
        let model = Model::<f64>::new(&tiny_arch(), 0, 1, true);
        let mut g = Graph::new();
        let x = image_leaf(&mut g, 32, 32, 11);
        let p = model.segment(&mut g, x, 2, false).unwrap();
        assert_eq!(g.shape(p), &[4, 32, 32]);
        let v = g.value(p);
        let vs = v.as_slice().unwrap();
        let n = 32 * 32;
        for px in 0..n {
            let s: f64 = (0..4).map(|c| vs[c * n + px]).sum();
            assert!((s - 1.0).abs() < 1e-5);
            let am = (0..4)
                .max_by(|&a, &b| vs[a * n + px].partial_cmp(&vs[b * n + px]).unwrap())
                .unwrap();
            assert!(am <= 3);
        }
    }

    #[test]
    fn segment_unknown_domain_is_lookup_error() {
        let model = Model::<f64>::new(&tiny_arch(), 0, 1, true);
        let mut g = Graph::new();
        let x = image_leaf(&mut g, 32, 32, 12);
        // domain 0 is the source: no segmentor exists for it
        assert!(matches!(
            model.segment(&mut g, x, 0, false),
            Err(NetError::UnknownDomain(0))
        ));
    }

    #[test]
    fn foreground_is_one_minus_background() {
        let model = Model::<f64>::new(&tiny_arch(), 0, 1, true);
        let mut g = Graph::new();
        let x = image_leaf(&mut g, 32, 32, 13);
        let p = model.segment(&mut g, x, 1, false).unwrap();
        let psi = foreground(&mut g, p);
        let pv = g.value(p).to_owned();
        let fv = g.value(psi).to_owned();
        let n = 32 * 32;
        for px in 0..n {
            let p0 = pv.as_slice().unwrap()[px];
            let f = fv.as_slice().unwrap()[px];
            assert!((f + p0 - 1.0).abs() < 1e-12);
            assert!((0.0..=1.0).contains(&f));
        }
    }

    #[test]
    fn parameter_growth_with_domain_count_is_tiny() {
        let arch2 = ArchConfig {
            n_domains: 2,
            ..ArchConfig::default()
        };
        let arch3 = ArchConfig {
            n_domains: 3,
            ..ArchConfig::default()
        };
        let m2 = Model::<f32>::new(&arch2, 0, 1, true);
        let m3 = Model::<f32>::new(&arch3, 0, 1, true);
        let p2 = m2.translation_stack_param_count();
        let p3 = m3.translation_stack_param_count();
        assert!(p3 > p2);
        let growth = (p3 - p2) as f64 / p2 as f64;
        assert!(growth < 0.01, "translation stack grew {:.3}%", growth * 100.0);
    }

    #[test]
    fn latent_scale_gradcheck() {
        let arch = tiny_arch();
        let model = Model::<f64>::new(&arch, 0, 42, true);
        let mut rng = rngutil::rng_from(21, "ls-gc");
        let z = rngutil::normal_array::<f64>(&mut rng, &[4], 1.0);
        let rep = gradcheck::check_default(&[z], |g, vars| {
            let f = model.latent_scale.forward(g, &model.store, vars[0], true);
            let sq = g.square(f);
            g.mean_all(sq)
        });
        assert!(rep.max_rel_err < 1e-4, "rel err {}", rep.max_rel_err);
    }

    #[test]
    fn bcin_gradcheck_features_and_bias_map() {
        let mut rng = rngutil::rng_from(22, "bcin-gc");
        let x = rngutil::normal_array::<f64>(&mut rng, &[2, 4, 4], 1.0);
        let w = rngutil::normal_array::<f64>(&mut rng, &[2, 3], 0.5);
        let b = rngutil::normal_array::<f64>(&mut rng, &[2], 0.2);
        let rep = gradcheck::check_default(&[x, w, b], |g, v| {
            let d = g.constant(ndarray::arr1(&[0.0, 1.0, 0.0]).into_dyn());
            let y = bcin(g, v[0], d, v[1], v[2]);
            let sq = g.square(y);
            g.mean_all(sq)
        });
        assert!(rep.max_rel_err < 1e-4, "rel err {}", rep.max_rel_err);
    }

    #[test]
    fn channel_modulation_gradcheck() {
        let mut rng = rngutil::rng_from(23, "mod-gc");
        let x = rngutil::normal_array::<f64>(&mut rng, &[3, 4, 4], 1.0);
        let f = rngutil::normal_array::<f64>(&mut rng, &[3], 0.8);
        let rep = gradcheck::check_default(&[x, f], |g, v| {
            let y = g.mul_ch(v[0], v[1]);
            let t = g.tanh(y);
            g.mean_all(t)
        });
        assert!(rep.max_rel_err < 1e-4, "rel err {}", rep.max_rel_err);
    }
}
