//! Material VAE: a frozen base autoencoder extended to 5-channel PBR
//! images by residual prediction, with distributional and locality
//! regularization.
//!
//! The base VAE ("pretrained" at desk scale on albedo renders) stays
//! frozen. A residual encoder sees the full 5-channel image and emits
//! offsets `(mu_res, logvar_res)` that modulate the base Gaussian:
//! `mu = mu_base + mu_res`, `logvar = logvar_base + logvar_res`. Its final
//! layer starts at zero, so an untrained model reproduces the base latent
//! distribution bit for bit. Ablation variants swap the encoder scheme
//! (direct prediction) or the regularizer (identity loss, deterministic
//! latent).
//!
//! Images live in `[0,1]` at the data layer and `[-1,1]` inside the model;
//! losses are computed in model space and masked by view coverage.

use std::path::Path;

use ndarray::{Array2, Array3, Array4, ArrayD, Axis, IxDyn};
use rand::Rng;
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{Tape, Var};
use crate::config::Config;
use crate::nn::{collect_grads, Adam, Bound, Conv2dLayer, ParamStore};
use crate::rng::stream;
use crate::synthdata::{MultiViewRecord, PbrImage};

#[derive(Debug, Error)]
pub enum VaeError {
    #[error("non-finite loss at step {step}: {loss}")]
    NonFinite { step: usize, loss: f64 },
    #[error("unknown variant {0:?}")]
    UnknownVariant(String),
    #[error("crop ({row}, {col}) size {size} not aligned to the latent grid")]
    CropMisaligned { row: usize, col: usize, size: usize },
    #[error("dataset is empty")]
    EmptyDataset,
    #[error(transparent)]
    Io(#[from] crate::arrayio::ArrayIoError),
    #[error(transparent)]
    Config(#[from] crate::config::ConfigError),
}

/// Encoder scheme / regularizer combination.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Variant {
    /// Base VAE reused as-is; roughness/metallic zero-padded through it.
    Frozen,
    /// Residual prediction + KL-to-base regularizer.
    ResReg,
    /// Residual prediction (mean only) + identity loss, deterministic z.
    ResId,
    /// Direct prediction of the full distribution + KL-to-base.
    DirectReg,
}

impl Variant {
    pub fn parse(s: &str) -> Result<Self, VaeError> {
        match s {
            "frozen" => Ok(Variant::Frozen),
            "res_reg" => Ok(Variant::ResReg),
            "res_id" => Ok(Variant::ResId),
            "direct_reg" => Ok(Variant::DirectReg),
            other => Err(VaeError::UnknownVariant(other.to_string())),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Variant::Frozen => "frozen",
            Variant::ResReg => "res_reg",
            Variant::ResId => "res_id",
            Variant::DirectReg => "direct_reg",
        }
    }

    /// Latent channel multiple consumed by the diffusion stage: the frozen
    /// scheme concatenates two latent codes channel-wise.
    pub fn latent_multiple(&self) -> usize {
        match self {
            Variant::Frozen => 2,
            _ => 1,
        }
    }
}

/// Diagonal Gaussian over a latent grid, parameterized by log-variance.
#[derive(Debug, Clone)]
pub struct LatentDistribution {
    /// `(d, h, w)`
    pub mean: Array3<f64>,
    pub logvar: Array3<f64>,
}

impl LatentDistribution {
    pub fn std(&self) -> Array3<f64> {
        self.logvar.mapv(|lv| (0.5 * lv).exp())
    }

    pub fn sample(&self, rng: &mut ChaCha12Rng) -> Array3<f64> {
        let std = self.std();
        let mut z = self.mean.clone();
        ndarray::Zip::from(&mut z).and(&std).for_each(|zi, &s| {
            *zi += s * normal(rng);
        });
        z
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        let s = self.mean.shape();
        (s[0], s[1], s[2])
    }
}

fn normal(rng: &mut ChaCha12Rng) -> f64 {
    let u1: f64 = rng.gen_range(f64::EPSILON..1.0);
    let u2: f64 = rng.gen_range(0.0..1.0);
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

/// Log-variance clamp applied to network outputs before exponentiation.
pub const LOGVAR_MIN: f64 = -14.0;
pub const LOGVAR_MAX: f64 = 8.0;

/// Convolutional architecture shared by every encoder/decoder here:
/// two stride-2 stages (downsample factor 4).
#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
pub struct VaeArch {
    /// First-stage channel width; later stages use 2x and 4x.
    pub width: usize,
    pub latent_channels: usize,
}

impl VaeArch {
    pub fn from_config(cfg: &Config) -> Result<Self, VaeError> {
        Ok(Self {
            width: cfg.usize("base.width")?,
            latent_channels: cfg.usize("base.latent_channels")?,
        })
    }

    pub const DOWNSAMPLE: usize = 4;
}

/// Conv stack descriptors for one encoder.
fn encoder_layers(prefix: &str) -> Vec<Conv2dLayer> {
    let n = |s: &str| format!("{prefix}.{s}");
    vec![
        Conv2dLayer { name: n("c0"), stride: 1, pad: 1 },
        Conv2dLayer { name: n("c1"), stride: 2, pad: 1 },
        Conv2dLayer { name: n("c2"), stride: 1, pad: 1 },
        Conv2dLayer { name: n("c3"), stride: 2, pad: 1 },
        Conv2dLayer { name: n("c4"), stride: 1, pad: 1 },
        Conv2dLayer { name: n("head"), stride: 1, pad: 0 },
    ]
}

fn decoder_layers(prefix: &str) -> Vec<Conv2dLayer> {
    let n = |s: &str| format!("{prefix}.{s}");
    vec![
        Conv2dLayer { name: n("c0"), stride: 1, pad: 1 },
        Conv2dLayer { name: n("c1"), stride: 1, pad: 1 },
        Conv2dLayer { name: n("c2"), stride: 1, pad: 1 },
        Conv2dLayer { name: n("c3"), stride: 1, pad: 1 },
        Conv2dLayer { name: n("c4"), stride: 1, pad: 1 },
        Conv2dLayer { name: n("head"), stride: 1, pad: 1 },
    ]
}

fn init_encoder(
    store: &mut ParamStore,
    prefix: &str,
    in_channels: usize,
    head_out: usize,
    arch: VaeArch,
    rng: &mut ChaCha12Rng,
    zero_head: bool,
) {
    let w = arch.width;
    let n = |s: &str| format!("{prefix}.{s}");
    Conv2dLayer::init(store, &n("c0"), in_channels, w, 3, 1, 1, rng);
    Conv2dLayer::init(store, &n("c1"), w, 2 * w, 3, 2, 1, rng);
    Conv2dLayer::init(store, &n("c2"), 2 * w, 2 * w, 3, 1, 1, rng);
    Conv2dLayer::init(store, &n("c3"), 2 * w, 4 * w, 3, 2, 1, rng);
    Conv2dLayer::init(store, &n("c4"), 4 * w, 4 * w, 3, 1, 1, rng);
    if zero_head {
        Conv2dLayer::init_zero(store, &n("head"), 4 * w, head_out, 1, 1, 0);
    } else {
        Conv2dLayer::init(store, &n("head"), 4 * w, head_out, 1, 1, 0, rng);
    }
}

fn init_decoder(
    store: &mut ParamStore,
    prefix: &str,
    out_channels: usize,
    arch: VaeArch,
    rng: &mut ChaCha12Rng,
) {
    let w = arch.width;
    let d = arch.latent_channels;
    let n = |s: &str| format!("{prefix}.{s}");
    Conv2dLayer::init(store, &n("c0"), d, 4 * w, 3, 1, 1, rng);
    Conv2dLayer::init(store, &n("c1"), 4 * w, 4 * w, 3, 1, 1, rng);
    Conv2dLayer::init(store, &n("c2"), 4 * w, 2 * w, 3, 1, 1, rng);
    Conv2dLayer::init(store, &n("c3"), 2 * w, 2 * w, 3, 1, 1, rng);
    Conv2dLayer::init(store, &n("c4"), 2 * w, w, 3, 1, 1, rng);
    Conv2dLayer::init(store, &n("head"), w, out_channels, 3, 1, 1, rng);
}

/// Run an encoder stack; returns `(mean, logvar)`, both `(B, d, h, w)`,
/// log-variance clamped.
fn encoder_forward(
    t: &Tape,
    p: &Bound,
    prefix: &str,
    arch: VaeArch,
    x: Var,
    head_out: usize,
) -> (Var, Var) {
    let _ = arch;
    let layers = encoder_layers(prefix);
    let mut h = x;
    for (i, layer) in layers.iter().enumerate() {
        h = layer.forward(t, p, h);
        if i + 1 < layers.len() {
            h = t.silu(h);
        }
    }
    let shape = t.shape(h);
    let d = head_out / 2;
    let mean = t.slice(h, &[(0, shape[0]), (0, d), (0, shape[2]), (0, shape[3])]);
    let logvar_raw = t.slice(h, &[(0, shape[0]), (d, head_out), (0, shape[2]), (0, shape[3])]);
    let logvar = t.clamp(logvar_raw, LOGVAR_MIN, LOGVAR_MAX);
    (mean, logvar)
}

/// Mean-only encoder (the deterministic residual scheme).
fn encoder_forward_mean(t: &Tape, p: &Bound, prefix: &str, arch: VaeArch, x: Var) -> Var {
    let _ = arch;
    let layers = encoder_layers(prefix);
    let mut h = x;
    for (i, layer) in layers.iter().enumerate() {
        h = layer.forward(t, p, h);
        if i + 1 < layers.len() {
            h = t.silu(h);
        }
    }
    h
}

/// Decoder stack: latent `(B, d, h, w)` to image `(B, out, H, W)`.
fn decoder_forward(t: &Tape, p: &Bound, prefix: &str, z: Var) -> Var {
    let layers = decoder_layers(prefix);
    let mut h = z;
    for (i, layer) in layers.iter().enumerate() {
        h = layer.forward(t, p, h);
        if i + 1 < layers.len() {
            h = t.silu(h);
        }
        if i == 1 || i == 3 {
            h = t.upsample_nearest2(h);
        }
    }
    h
}

// ------------------------------------------------------------- base VAE

/// Frozen 3-channel autoencoder standing in for a pretrained image VAE.
#[derive(Debug, Clone)]
pub struct BaseVae {
    pub params: ParamStore,
    pub arch: VaeArch,
}

impl BaseVae {
    pub fn init(arch: VaeArch, seed: u64) -> Self {
        let mut rng = stream(seed, "base.init", 0);
        let mut params = ParamStore::new();
        init_encoder(&mut params, "enc", 3, 2 * arch.latent_channels, arch, &mut rng, false);
        init_decoder(&mut params, "dec", 3, arch, &mut rng);
        Self { params, arch }
    }

    pub fn content_hash(&self) -> String {
        self.params.content_hash()
    }

    /// Encode a 3-channel model-space image `(3, H, W)`.
    pub fn encode(&self, image: &Array3<f64>) -> LatentDistribution {
        let t = Tape::new();
        let p = self.params.bind_frozen(&t);
        let x = t.constant(batchify(image));
        let (mean, logvar) =
            encoder_forward(&t, &p, "enc", self.arch, x, 2 * self.arch.latent_channels);
        LatentDistribution {
            mean: unbatch(&t.value_cloned(mean)),
            logvar: unbatch(&t.value_cloned(logvar)),
        }
    }

    /// Decode a latent `(d, h, w)` to a 3-channel model-space image.
    pub fn decode(&self, z: &Array3<f64>) -> Array3<f64> {
        let t = Tape::new();
        let p = self.params.bind_frozen(&t);
        let zv = t.constant(batchify(z));
        let out = decoder_forward(&t, &p, "dec", zv);
        unbatch(&t.value_cloned(out))
    }

    pub fn save(&self, path: &Path) -> Result<(), VaeError> {
        let mut c = crate::arrayio::Container::new();
        self.params.save_into(&mut c);
        c.insert_i64("arch.width", ndarray::arr0(self.arch.width as i64));
        c.insert_i64(
            "arch.latent_channels",
            ndarray::arr0(self.arch.latent_channels as i64),
        );
        c.write(path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, VaeError> {
        let c = crate::arrayio::Container::read(path)?;
        let params = ParamStore::load_from(path, &c)?;
        let arch = VaeArch {
            width: c.i64(path, "arch.width")?[IxDyn(&[])] as usize,
            latent_channels: c.i64(path, "arch.latent_channels")?[IxDyn(&[])] as usize,
        };
        Ok(Self { params, arch })
    }
}

fn batchify(a: &Array3<f64>) -> ArrayD<f64> {
    a.clone().insert_axis(Axis(0)).into_dyn()
}

fn unbatch(a: &ArrayD<f64>) -> Array3<f64> {
    a.index_axis(Axis(0), 0)
        .to_owned()
        .into_dimensionality()
        .unwrap()
}

// ---------------------------------------------------------- data mapping

/// `[0,1]` image stack to model space `[-1,1]`, `(5, H, W)`.
pub fn pbr_to_model(img: &PbrImage) -> Array3<f64> {
    let (h, w) = (img.height(), img.width());
    let mut out = Array3::<f64>::zeros((5, h, w));
    for row in 0..h {
        for col in 0..w {
            for c in 0..5 {
                out[(c, row, col)] = 2.0 * img.channel(c, row, col) - 1.0;
            }
        }
    }
    out
}

/// Albedo slice of a model-space stack.
pub fn albedo_of(x: &Array3<f64>) -> Array3<f64> {
    x.slice(ndarray::s![0..3, .., ..]).to_owned()
}

/// `[r, m, 0]` stack the frozen scheme feeds through the base encoder.
pub fn rm_padded_of(x: &Array3<f64>) -> Array3<f64> {
    let (h, w) = (x.shape()[1], x.shape()[2]);
    let mut out = Array3::<f64>::zeros((3, h, w));
    out.slice_mut(ndarray::s![0, .., ..]).assign(&x.index_axis(Axis(0), 3));
    out.slice_mut(ndarray::s![1, .., ..]).assign(&x.index_axis(Axis(0), 4));
    // third channel is zero padding in data space, i.e. -1 in model space
    out.slice_mut(ndarray::s![2, .., ..]).fill(-1.0);
    out
}

/// Model-space decode back to a `[0,1]` masked image.
pub fn model_to_pbr(decoded: &Array3<f64>, mask: &Array2<bool>) -> PbrImage {
    let (h, w) = mask.dim();
    let mut img = PbrImage::zeros(h, w);
    for row in 0..h {
        for col in 0..w {
            if !mask[(row, col)] {
                continue;
            }
            img.mask[(row, col)] = true;
            for c in 0..3 {
                img.albedo[(row, col, c)] = (0.5 * (decoded[(c, row, col)] + 1.0)).clamp(0.0, 1.0);
            }
            img.rough[(row, col)] = (0.5 * (decoded[(3, row, col)] + 1.0)).clamp(0.0, 1.0);
            img.metal[(row, col)] = (0.5 * (decoded[(4, row, col)] + 1.0)).clamp(0.0, 1.0);
        }
    }
    img
}

// ------------------------------------------------------------- MatVae

/// The adapted 5-channel VAE (or the frozen scheme, which has no trainable
/// encoder/decoder of its own).
#[derive(Debug, Clone)]
pub struct MatVae {
    pub variant: Variant,
    pub base: BaseVae,
    /// Residual/direct encoder and 5-channel decoder. Empty for Frozen.
    pub params: ParamStore,
    /// Patch discriminator, when the adversarial term is enabled.
    pub disc: Option<ParamStore>,
}

impl MatVae {
    /// Initialize from a frozen base. The residual head starts at zero so
    /// `(mu_full, sigma_full)` equals the base distribution exactly; the
    /// decoder copies the base decoder with two zero extra output rows.
    pub fn init(variant: Variant, base: BaseVae, seed: u64, with_disc: bool) -> Self {
        let arch = base.arch;
        let mut rng = stream(seed, "matvae.init", 0);
        let mut params = ParamStore::new();
        if variant != Variant::Frozen {
            let head_out = match variant {
                Variant::ResId => arch.latent_channels,
                _ => 2 * arch.latent_channels,
            };
            init_encoder(&mut params, "res", 5, head_out, arch, &mut rng, false);
            match variant {
                Variant::ResReg | Variant::ResId => {
                    // trunk copies the base encoder; the 5-channel first conv
                    // reuses the albedo rows; the head restarts at zero
                    copy_encoder_trunk(&mut params, &base.params, arch);
                    zero_head(&mut params, "res", head_out, arch);
                }
                Variant::DirectReg => {
                    // direct prediction keeps the standard head init but
                    // still inherits the trunk for a comparable start
                    copy_encoder_trunk(&mut params, &base.params, arch);
                }
                Variant::Frozen => unreachable!(),
            }
            init_decoder(&mut params, "dec", 5, arch, &mut rng);
            copy_decoder_from_base(&mut params, &base.params);
        }
        let disc = with_disc.then(|| {
            let mut d = ParamStore::new();
            let mut drng = stream(seed, "disc.init", 0);
            let w = arch.width;
            Conv2dLayer::init(&mut d, "d0", 5, w, 3, 2, 1, &mut drng);
            Conv2dLayer::init(&mut d, "d1", w, 2 * w, 3, 2, 1, &mut drng);
            Conv2dLayer::init(&mut d, "d2", 2 * w, 1, 1, 1, 0, &mut drng);
            d
        });
        Self {
            variant,
            base,
            params,
            disc,
        }
    }

    pub fn arch(&self) -> VaeArch {
        self.base.arch
    }

    /// Latent distribution for `x` (model space, `(5, H, W)`). Returns
    /// `(full, base)`; for the Frozen scheme, `full` is the channel
    /// concatenation `[z_rm, z_a]` its decoder consumes and `base` is the
    /// albedo encoding.
    pub fn encode(&self, x: &Array3<f64>) -> (LatentDistribution, LatentDistribution) {
        if self.variant == Variant::Frozen {
            let (z_rm, z_a) = encode_frozen(&self.base, x);
            let full = LatentDistribution {
                mean: ndarray::concatenate(Axis(0), &[z_rm.mean.view(), z_a.mean.view()]).unwrap(),
                logvar: ndarray::concatenate(Axis(0), &[z_rm.logvar.view(), z_a.logvar.view()])
                    .unwrap(),
            };
            return (full, z_a);
        }
        let t = Tape::new();
        let pb = self.base.params.bind_frozen(&t);
        let pm = self.params.bind_frozen(&t);
        let xv = t.constant(batchify(x));
        let av = t.constant(batchify(&albedo_of(x)));
        let out = encode_on_tape(&t, self, &pb, &pm, xv, av);
        (
            LatentDistribution {
                mean: unbatch(&t.value_cloned(out.full_mean)),
                logvar: unbatch(&t.value_cloned(out.full_logvar)),
            },
            LatentDistribution {
                mean: unbatch(&t.value_cloned(out.base_mean)),
                logvar: unbatch(&t.value_cloned(out.base_logvar)),
            },
        )
    }

    /// Decode a latent through the 5-channel decoder (or the frozen
    /// composition for the Frozen scheme, which expects `2d` channels).
    pub fn decode(&self, z: &Array3<f64>) -> Array3<f64> {
        match self.variant {
            Variant::Frozen => {
                let d = self.arch().latent_channels;
                let z_rm = z.slice(ndarray::s![0..d, .., ..]).to_owned();
                let z_a = z.slice(ndarray::s![d..2 * d, .., ..]).to_owned();
                let rm_img = self.base.decode(&z_rm);
                let a_img = self.base.decode(&z_a);
                let (h, w) = (a_img.shape()[1], a_img.shape()[2]);
                let mut out = Array3::<f64>::zeros((5, h, w));
                out.slice_mut(ndarray::s![0..3, .., ..]).assign(&a_img);
                out.slice_mut(ndarray::s![3, .., ..])
                    .assign(&rm_img.index_axis(Axis(0), 0));
                out.slice_mut(ndarray::s![4, .., ..])
                    .assign(&rm_img.index_axis(Axis(0), 1));
                out
            }
            _ => {
                let t = Tape::new();
                let pm = self.params.bind_frozen(&t);
                let zv = t.constant(batchify(z));
                let out = decoder_forward(&t, &pm, "dec", zv);
                unbatch(&t.value_cloned(out))
            }
        }
    }

    pub fn save(&self, path: &Path) -> Result<(), VaeError> {
        let mut c = crate::arrayio::Container::new();
        self.params.save_into(&mut c);
        c.write(path)?;
        Ok(())
    }

    /// Load trained encoder/decoder weights on top of a frozen base.
    pub fn load(path: &Path, variant: Variant, base: BaseVae) -> Result<Self, VaeError> {
        let params = ParamStore::load(path)?;
        Ok(Self {
            variant,
            base,
            params,
            disc: None,
        })
    }
}

/// Zero-padded frozen-scheme encoding: `(q(z_rm | r,m), q(z_a | a))`.
pub fn encode_frozen(base: &BaseVae, x: &Array3<f64>) -> (LatentDistribution, LatentDistribution) {
    let z_rm = base.encode(&rm_padded_of(x));
    let z_a = base.encode(&albedo_of(x));
    (z_rm, z_a)
}

fn copy_param(dst: &mut ParamStore, dst_name: &str, src: &ParamStore, src_name: &str) {
    let v = src.get(src_name).clone();
    *dst.get_mut(dst_name) = v;
}

/// Copy base encoder weights into the residual trunk. The first conv maps
/// its albedo input rows from the base and keeps the fresh init for the
/// two extra material channels.
fn copy_encoder_trunk(params: &mut ParamStore, base: &ParamStore, _arch: VaeArch) {
    let c0 = base.get("enc.c0.w").clone();
    {
        let dst = params.get_mut("res.c0.w");
        let shape = c0.shape().to_vec();
        for o in 0..shape[0] {
            for i in 0..3 {
                for kh in 0..shape[2] {
                    for kw in 0..shape[3] {
                        dst[IxDyn(&[o, i, kh, kw])] = c0[IxDyn(&[o, i, kh, kw])];
                    }
                }
            }
        }
    }
    copy_param(params, "res.c0.b", base, "enc.c0.b");
    for layer in ["c1", "c2", "c3", "c4"] {
        copy_param(params, &format!("res.{layer}.w"), base, &format!("enc.{layer}.w"));
        copy_param(params, &format!("res.{layer}.b"), base, &format!("enc.{layer}.b"));
    }
}

fn zero_head(params: &mut ParamStore, prefix: &str, _head_out: usize, _arch: VaeArch) {
    params.get_mut(&format!("{prefix}.head.w")).fill(0.0);
    params.get_mut(&format!("{prefix}.head.b")).fill(0.0);
}

/// Decoder copies every base layer; the head's first three output rows come
/// from the base and the two new material rows start at zero.
fn copy_decoder_from_base(params: &mut ParamStore, base: &ParamStore) {
    for layer in ["c0", "c1", "c2", "c3", "c4"] {
        copy_param(params, &format!("dec.{layer}.w"), base, &format!("dec.{layer}.w"));
        copy_param(params, &format!("dec.{layer}.b"), base, &format!("dec.{layer}.b"));
    }
    let src_w = base.get("dec.head.w").clone();
    let src_b = base.get("dec.head.b").clone();
    {
        let dst = params.get_mut("dec.head.w");
        dst.fill(0.0);
        let s = src_w.shape().to_vec();
        for o in 0..3 {
            for i in 0..s[1] {
                for kh in 0..s[2] {
                    for kw in 0..s[3] {
                        dst[IxDyn(&[o, i, kh, kw])] = src_w[IxDyn(&[o, i, kh, kw])];
                    }
                }
            }
        }
    }
    {
        let dst = params.get_mut("dec.head.b");
        dst.fill(0.0);
        for o in 0..3 {
            dst[IxDyn(&[o])] = src_b[IxDyn(&[o])];
        }
    }
}

// --------------------------------------------------------- tape forwards

/// Latent vars of one encode pass on a tape.
pub struct EncodeVars {
    pub full_mean: Var,
    pub full_logvar: Var,
    pub base_mean: Var,
    pub base_logvar: Var,
}

/// Encode a batch `(B, 5, H, W)` with albedo `(B, 3, H, W)` on `t`.
pub fn encode_on_tape(
    t: &Tape,
    model: &MatVae,
    base_bound: &Bound,
    mat_bound: &Bound,
    x: Var,
    albedo: Var,
) -> EncodeVars {
    let arch = model.arch();
    let d2 = 2 * arch.latent_channels;
    let (base_mean, base_logvar) = encoder_forward(t, base_bound, "enc", arch, albedo, d2);
    match model.variant {
        Variant::Frozen => EncodeVars {
            full_mean: base_mean,
            full_logvar: base_logvar,
            base_mean,
            base_logvar,
        },
        Variant::ResReg => {
            let (res_mean, res_logvar) = encoder_forward(t, mat_bound, "res", arch, x, d2);
            // sigma_full = sigma_base * sigma_res, i.e. log-variances add
            let full_mean = t.add(base_mean, res_mean);
            let full_logvar = t.clamp(t.add(base_logvar, res_logvar), LOGVAR_MIN, LOGVAR_MAX);
            EncodeVars {
                full_mean,
                full_logvar,
                base_mean,
                base_logvar,
            }
        }
        Variant::ResId => {
            let res_mean = encoder_forward_mean(t, mat_bound, "res", arch, x);
            let full_mean = t.add(base_mean, res_mean);
            EncodeVars {
                full_mean,
                full_logvar: base_logvar,
                base_mean,
                base_logvar,
            }
        }
        Variant::DirectReg => {
            let (full_mean, full_logvar) = encoder_forward(t, mat_bound, "res", arch, x, d2);
            EncodeVars {
                full_mean,
                full_logvar,
                base_mean,
                base_logvar,
            }
        }
    }
}

/// Reparameterized sample `mu + sigma * eta` with a fixed noise tensor.
pub fn sample_on_tape(t: &Tape, enc: &EncodeVars, noise: &ArrayD<f64>, deterministic: bool) -> Var {
    if deterministic {
        return enc.full_mean;
    }
    let eta = t.constant(noise.clone());
    let sigma = t.exp(t.scale(enc.full_logvar, 0.5));
    t.add(enc.full_mean, t.mul(sigma, eta))
}

// ---------------------------------------------------------------- losses

/// Masked mean-squared distance between two `(B, C, H, W)` stacks.
/// `mask` is `(B, 1, H, W)` with 0/1 entries; normalization is by
/// `count(mask) * C`.
pub fn masked_mse(t: &Tape, a: Var, b: Var, mask: &ArrayD<f64>) -> Var {
    let shape = t.shape(a);
    let channels = shape[1];
    let diff = t.sub(a, b);
    let sq = t.mul(diff, diff);
    // broadcast the 1-channel mask across C by concatenation-free trick:
    // mask entries are replicated channel-wise in the constant itself
    let mut mask_c = ArrayD::<f64>::zeros(IxDyn(&shape));
    let m4 = mask.view().into_dimensionality::<ndarray::Ix4>().unwrap();
    {
        let mut out4 = mask_c.view_mut().into_dimensionality::<ndarray::Ix4>().unwrap();
        for b_i in 0..shape[0] {
            for c in 0..channels {
                out4
                    .index_axis_mut(Axis(0), b_i)
                    .index_axis_mut(Axis(0), c)
                    .assign(&m4.index_axis(Axis(0), b_i).index_axis(Axis(0), 0));
            }
        }
    }
    let count: f64 = mask_c.sum();
    let masked = t.mul(sq, t.constant(mask_c));
    let total = t.sum_all(masked);
    t.scale(total, 1.0 / count.max(1.0))
}

/// Square crop on the latent grid, pixel-aligned by the downsample factor.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CropSpec {
    /// Latent-cell coordinates.
    pub row: usize,
    pub col: usize,
    pub size: usize,
}

impl CropSpec {
    /// Sample a crop covering `[area_min, area_max]` of the image area, or
    /// `None` when the crop coin does not fire.
    pub fn sample(
        rng: &mut ChaCha12Rng,
        latent_h: usize,
        latent_w: usize,
        prob: f64,
        area_min: f64,
        area_max: f64,
    ) -> Option<Self> {
        if rng.gen_range(0.0..1.0) >= prob {
            return None;
        }
        let frac: f64 = rng.gen_range(area_min..area_max);
        let side = ((latent_h * latent_w) as f64 * frac).sqrt().round().max(1.0) as usize;
        let side = side.min(latent_h).min(latent_w);
        let row = rng.gen_range(0..=(latent_h - side));
        let col = rng.gen_range(0..=(latent_w - side));
        Some(Self { row, col, size: side })
    }
}

/// Locality loss: decode a latent crop and compare against the matching
/// pixel crop. With `crop = None` this is the plain full-image
/// reconstruction (the identity crop).
pub fn loss_local(
    t: &Tape,
    mat_bound: &Bound,
    x: Var,
    z: Var,
    mask: &ArrayD<f64>,
    crop: Option<CropSpec>,
) -> Result<Var, VaeError> {
    let f = VaeArch::DOWNSAMPLE;
    let xshape = t.shape(x);
    let zshape = t.shape(z);
    match crop {
        None => {
            let recon = decoder_forward(t, mat_bound, "dec", z);
            Ok(masked_mse(t, recon, x, mask))
        }
        Some(c) => {
            if c.row + c.size > zshape[2] || c.col + c.size > zshape[3] || c.size == 0 {
                return Err(VaeError::CropMisaligned {
                    row: c.row,
                    col: c.col,
                    size: c.size,
                });
            }
            let z_crop = t.slice(
                z,
                &[
                    (0, zshape[0]),
                    (0, zshape[1]),
                    (c.row, c.row + c.size),
                    (c.col, c.col + c.size),
                ],
            );
            let (pr, pc, ps) = (c.row * f, c.col * f, c.size * f);
            let x_crop = t.slice(
                x,
                &[(0, xshape[0]), (0, xshape[1]), (pr, pr + ps), (pc, pc + ps)],
            );
            let mask4 = mask.view().into_dimensionality::<ndarray::Ix4>().unwrap();
            let mask_crop = mask4
                .slice(ndarray::s![.., .., pr..pr + ps, pc..pc + ps])
                .to_owned()
                .into_dyn();
            let recon = decoder_forward(t, mat_bound, "dec", z_crop);
            Ok(masked_mse(t, recon, x_crop, &mask_crop))
        }
    }
}

/// Closed-form KL to the standard normal, mean over elements.
pub fn loss_kl(t: &Tape, mean: Var, logvar: Var) -> Var {
    // 0.5 * (mu^2 + exp(lv) - 1 - lv)
    let mu2 = t.mul(mean, mean);
    let var = t.exp(logvar);
    let inner = t.sub(t.add(mu2, var), t.add_scalar(logvar, 1.0));
    t.scale(t.mean_all(inner), 0.5)
}

/// Closed-form KL between two diagonal Gaussians (full against base),
/// mean over elements. Zero exactly when the distributions coincide.
pub fn loss_reg(t: &Tape, full: &EncodeVars) -> Var {
    loss_reg_pair(t, full.full_mean, full.full_logvar, full.base_mean, full.base_logvar)
}

pub fn loss_reg_pair(t: &Tape, mean_f: Var, logvar_f: Var, mean_b: Var, logvar_b: Var) -> Var {
    // 0.5 * [ (lv_b - lv_f) + (exp(lv_f) + (mu_f - mu_b)^2) / exp(lv_b) - 1 ]
    let dlv = t.sub(logvar_b, logvar_f);
    let dm = t.sub(mean_f, mean_b);
    let dm2 = t.mul(dm, dm);
    let num = t.add(t.exp(logvar_f), dm2);
    let ratio = t.div(num, t.exp(logvar_b));
    let inner = t.add_scalar(t.add(dlv, ratio), -1.0);
    t.scale(t.mean_all(inner), 0.5)
}

/// Identity loss: the frozen base decoder applied to the combined mean
/// must reproduce the albedo.
pub fn loss_id(
    t: &Tape,
    base_bound: &Bound,
    enc: &EncodeVars,
    albedo: Var,
    mask: &ArrayD<f64>,
) -> Var {
    let recon = decoder_forward(t, base_bound, "dec", enc.full_mean);
    masked_mse(t, recon, albedo, mask)
}

/// Discriminator forward: `(B, 5, H, W)` to patch logits.
fn disc_forward(t: &Tape, p: &Bound, x: Var) -> Var {
    let d0 = Conv2dLayer { name: "d0".into(), stride: 2, pad: 1 };
    let d1 = Conv2dLayer { name: "d1".into(), stride: 2, pad: 1 };
    let d2 = Conv2dLayer { name: "d2".into(), stride: 1, pad: 0 };
    let h = t.leaky_relu(d0.forward(t, p, x), 0.2);
    let h = t.leaky_relu(d1.forward(t, p, h), 0.2);
    d2.forward(t, p, h)
}

/// Hinge generator loss `-mean D(fake)` with the discriminator frozen.
pub fn loss_disc_gen(t: &Tape, disc: &ParamStore, fake: Var) -> Var {
    let p = disc.bind_frozen(t);
    let logits = disc_forward(t, &p, fake);
    t.neg(t.mean_all(logits))
}

/// Hinge discriminator loss on a (real, detached fake) pair.
pub fn loss_disc_update(t: &Tape, disc_bound: &Bound, real: Var, fake_detached: Var) -> Var {
    let lr = disc_forward(t, disc_bound, real);
    let lf = disc_forward(t, disc_bound, fake_detached);
    let one_minus = t.relu(t.neg(t.add_scalar(lr, -1.0)));
    let one_plus = t.relu(t.add_scalar(lf, 1.0));
    t.add(t.mean_all(one_minus), t.mean_all(one_plus))
}

// -------------------------------------------------------------- training

/// Per-step loss report: raw and weighted values of every term.
#[derive(Debug, Clone, Serialize)]
pub struct LedgerRow {
    pub step: usize,
    pub local_raw: f64,
    pub local_weighted: f64,
    pub kl_raw: f64,
    pub kl_weighted: f64,
    pub reg_raw: f64,
    pub reg_weighted: f64,
    pub id_raw: f64,
    pub id_weighted: f64,
    pub disc_gen_raw: f64,
    pub disc_gen_weighted: f64,
    pub disc_raw: f64,
    pub total: f64,
    pub cropped: bool,
}

pub fn ledger_header() -> &'static str {
    "step,local_raw,local_weighted,kl_raw,kl_weighted,reg_raw,reg_weighted,id_raw,id_weighted,disc_gen_raw,disc_gen_weighted,disc_raw,total,cropped"
}

impl LedgerRow {
    pub fn to_csv(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{},{},{},{},{},{}",
            self.step,
            self.local_raw,
            self.local_weighted,
            self.kl_raw,
            self.kl_weighted,
            self.reg_raw,
            self.reg_weighted,
            self.id_raw,
            self.id_weighted,
            self.disc_gen_raw,
            self.disc_gen_weighted,
            self.disc_raw,
            self.total,
            self.cropped
        )
    }
}

/// Loss weights and schedule knobs read once from config.
#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    pub disc_lr: f64,
    pub lambda_local: f64,
    pub lambda_kl: f64,
    pub lambda_disc: f64,
    pub lambda_reg: f64,
    pub lambda_id: f64,
    pub crop_prob: f64,
    pub crop_area_min: f64,
    pub crop_area_max: f64,
    pub with_disc: bool,
    pub ckpt_every: usize,
    pub error_map_every: usize,
}

impl TrainConfig {
    pub fn from_config(cfg: &Config) -> Result<Self, VaeError> {
        Ok(Self {
            steps: cfg.usize("vae.steps")?,
            batch: cfg.usize("vae.batch")?,
            lr: cfg.f64("vae.lr")?,
            disc_lr: cfg.f64("vae.disc_lr")?,
            lambda_local: cfg.f64("vae.lambda_local")?,
            lambda_kl: cfg.f64("vae.lambda_kl")?,
            lambda_disc: cfg.f64("vae.lambda_disc")?,
            lambda_reg: cfg.f64("vae.lambda_reg")?,
            lambda_id: cfg.f64("vae.lambda_id")?,
            crop_prob: cfg.f64("vae.crop_prob")?,
            crop_area_min: cfg.f64("vae.crop_area_min")?,
            crop_area_max: cfg.f64("vae.crop_area_max")?,
            with_disc: cfg.bool("vae.disc")?,
            ckpt_every: cfg.usize("vae.ckpt_every")?,
            error_map_every: cfg.usize("vae.error_map_every")?,
        })
    }
}

/// Flattened training set: one entry per (record, view).
pub struct ViewSet {
    /// Model-space stacks `(5, H, W)`.
    pub images: Vec<Array3<f64>>,
    pub masks: Vec<Array2<bool>>,
}

impl ViewSet {
    pub fn from_records(records: &[MultiViewRecord]) -> Self {
        let mut images = Vec::new();
        let mut masks = Vec::new();
        for rec in records {
            for (_, img) in &rec.views {
                images.push(pbr_to_model(img));
                masks.push(img.mask.clone());
            }
        }
        Self { images, masks }
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }
}

fn stack_batch(items: &[&Array3<f64>]) -> ArrayD<f64> {
    let s = items[0].shape();
    let mut out = Array4::<f64>::zeros((items.len(), s[0], s[1], s[2]));
    for (i, item) in items.iter().enumerate() {
        out.index_axis_mut(Axis(0), i).assign(item);
    }
    out.into_dyn()
}

fn mask_batch(items: &[&Array2<bool>]) -> ArrayD<f64> {
    let (h, w) = items[0].dim();
    let mut out = Array4::<f64>::zeros((items.len(), 1, h, w));
    for (i, m) in items.iter().enumerate() {
        let mut slot = out.index_axis_mut(Axis(0), i);
        for r in 0..h {
            for c in 0..w {
                if m[(r, c)] {
                    slot[(0, r, c)] = 1.0;
                }
            }
        }
    }
    out.into_dyn()
}

/// Pretrain the base VAE on albedo views: reconstruction + unit-normal KL.
pub fn pretrain_base(
    records: &[MultiViewRecord],
    cfg: &Config,
    seed: u64,
    mut on_step: impl FnMut(usize, f64),
) -> Result<BaseVae, VaeError> {
    let arch = VaeArch::from_config(cfg)?;
    let steps = cfg.usize("base.steps")?;
    let batch_size = cfg.usize("base.batch")?;
    let lr = cfg.f64("base.lr")?;
    let lambda_kl = cfg.f64("base.lambda_kl")?;

    let views = ViewSet::from_records(records);
    if views.is_empty() {
        return Err(VaeError::EmptyDataset);
    }
    let albedos: Vec<Array3<f64>> = views.images.iter().map(albedo_of).collect();

    let base = BaseVae::init(arch, seed);
    let mut params = base.params;
    let mut opt = Adam::new(lr);
    let mut batch_rng = stream(seed, "base.batch", 0);
    let mut noise_rng = stream(seed, "base.noise", 0);

    for step in 0..steps {
        let idx: Vec<usize> = (0..batch_size)
            .map(|_| batch_rng.gen_range(0..albedos.len()))
            .collect();
        let xb: Vec<&Array3<f64>> = idx.iter().map(|&i| &albedos[i]).collect();
        let mb: Vec<&Array2<bool>> = idx.iter().map(|&i| &views.masks[i]).collect();
        let x = stack_batch(&xb);
        let mask = mask_batch(&mb);
        let noise = ArrayD::from_shape_fn(
            IxDyn(&[
                batch_size,
                arch.latent_channels,
                x.shape()[2] / VaeArch::DOWNSAMPLE,
                x.shape()[3] / VaeArch::DOWNSAMPLE,
            ]),
            |_| normal(&mut noise_rng),
        );

        let t = Tape::new();
        let bound = params.bind(&t);
        let xv = t.constant(x);
        let (mean, logvar) = encoder_forward(&t, &bound, "enc", arch, xv, 2 * arch.latent_channels);
        let eta = t.constant(noise);
        let sigma = t.exp(t.scale(logvar, 0.5));
        let z = t.add(mean, t.mul(sigma, eta));
        let recon = decoder_forward(&t, &bound, "dec", z);
        let rec_loss = masked_mse(&t, recon, xv, &mask);
        let kl = loss_kl(&t, mean, logvar);
        let total = t.add(rec_loss, t.scale(kl, lambda_kl));
        let loss_val = t.scalar(total);
        if !loss_val.is_finite() {
            return Err(VaeError::NonFinite {
                step,
                loss: loss_val,
            });
        }
        let grads = t.backward(total);
        let g = collect_grads(&bound, &params, &grads);
        opt.step(&mut params, &g);
        on_step(step, loss_val);
    }
    Ok(BaseVae { params, arch })
}

/// Outputs of one training step, for ledgers and tests.
pub struct StepOutcome {
    pub row: LedgerRow,
}

/// Train a MatVAE variant. `on_row` receives every ledger row;
/// `error_map_hook` fires at the configured cadence with (step, model).
pub fn train_matvae(
    variant: Variant,
    base: &BaseVae,
    records: &[MultiViewRecord],
    tc: &TrainConfig,
    seed: u64,
    mut on_row: impl FnMut(&LedgerRow),
    mut checkpoint_hook: impl FnMut(usize, &MatVae),
) -> Result<MatVae, VaeError> {
    let views = ViewSet::from_records(records);
    if views.is_empty() {
        return Err(VaeError::EmptyDataset);
    }
    let mut model = MatVae::init(variant, base.clone(), seed, tc.with_disc);
    if variant == Variant::Frozen {
        return Ok(model); // nothing to train
    }
    let arch = model.arch();
    let (h, w) = {
        let s = views.images[0].shape();
        (s[1], s[2])
    };
    let (lh, lw) = (h / VaeArch::DOWNSAMPLE, w / VaeArch::DOWNSAMPLE);

    // the frozen base encoding of each view is a constant; compute once
    let base_lat: Vec<LatentDistribution> = views
        .images
        .iter()
        .map(|x| base.encode(&albedo_of(x)))
        .collect();

    let mut opt = Adam::new(tc.lr);
    let mut disc_opt = Adam::new(tc.disc_lr);
    let mut batch_rng = stream(seed, "vae.batch", 0);
    let mut crop_rng = stream(seed, "vae.crop", 0);
    let mut noise_rng = stream(seed, "vae.noise", 0);

    for step in 0..tc.steps {
        let idx: Vec<usize> = (0..tc.batch)
            .map(|_| batch_rng.gen_range(0..views.len()))
            .collect();
        let xb: Vec<&Array3<f64>> = idx.iter().map(|&i| &views.images[i]).collect();
        let mb: Vec<&Array2<bool>> = idx.iter().map(|&i| &views.masks[i]).collect();
        let x_arr = stack_batch(&xb);
        let mask = mask_batch(&mb);
        let crop = CropSpec::sample(
            &mut crop_rng,
            lh,
            lw,
            tc.crop_prob,
            tc.crop_area_min,
            tc.crop_area_max,
        );
        let noise = ArrayD::from_shape_fn(
            IxDyn(&[tc.batch, arch.latent_channels, lh, lw]),
            |_| normal(&mut noise_rng),
        );

        let outcome = matvae_step(
            &mut model, &base_lat, &idx, &x_arr, &mask, crop, &noise, tc, step, &mut opt,
            &mut disc_opt,
        )?;
        on_row(&outcome.row);
        if tc.ckpt_every > 0 && (step + 1) % tc.ckpt_every == 0 {
            checkpoint_hook(step + 1, &model);
        }
    }
    Ok(model)
}

/// One optimization step: VAE update then (optionally) discriminator
/// update on the detached fake.
#[allow(clippy::too_many_arguments)]
fn matvae_step(
    model: &mut MatVae,
    base_lat: &[LatentDistribution],
    idx: &[usize],
    x_arr: &ArrayD<f64>,
    mask: &ArrayD<f64>,
    crop: Option<CropSpec>,
    noise: &ArrayD<f64>,
    tc: &TrainConfig,
    step: usize,
    opt: &mut Adam,
    disc_opt: &mut Adam,
) -> Result<StepOutcome, VaeError> {
    let arch = model.arch();
    let deterministic_latent = model.variant == Variant::ResId;

    let t = Tape::new();
    let mat_bound = model.params.bind(&t);
    let base_bound = model.base.params.bind_frozen(&t);

    // precomputed frozen base distribution for this batch
    let (bs, d, lh, lw) = (idx.len(), arch.latent_channels, noise.shape()[2], noise.shape()[3]);
    let mut bmean = Array4::<f64>::zeros((bs, d, lh, lw));
    let mut blogvar = Array4::<f64>::zeros((bs, d, lh, lw));
    for (slot, &i) in idx.iter().enumerate() {
        bmean.index_axis_mut(Axis(0), slot).assign(&base_lat[i].mean);
        blogvar.index_axis_mut(Axis(0), slot).assign(&base_lat[i].logvar);
    }
    let base_mean = t.constant(bmean.into_dyn());
    let base_logvar = t.constant(blogvar.into_dyn());

    let x = t.constant(x_arr.clone());
    let enc = {
        let d2 = 2 * arch.latent_channels;
        match model.variant {
            Variant::ResReg => {
                let (res_mean, res_logvar) = encoder_forward(&t, &mat_bound, "res", arch, x, d2);
                let full_mean = t.add(base_mean, res_mean);
                let full_logvar =
                    t.clamp(t.add(base_logvar, res_logvar), LOGVAR_MIN, LOGVAR_MAX);
                EncodeVars {
                    full_mean,
                    full_logvar,
                    base_mean,
                    base_logvar,
                }
            }
            Variant::ResId => {
                let res_mean = encoder_forward_mean(&t, &mat_bound, "res", arch, x);
                let full_mean = t.add(base_mean, res_mean);
                EncodeVars {
                    full_mean,
                    full_logvar: base_logvar,
                    base_mean,
                    base_logvar,
                }
            }
            Variant::DirectReg => {
                let (full_mean, full_logvar) = encoder_forward(&t, &mat_bound, "res", arch, x, d2);
                EncodeVars {
                    full_mean,
                    full_logvar,
                    base_mean,
                    base_logvar,
                }
            }
            Variant::Frozen => unreachable!("frozen variant skips training"),
        }
    };
    let z = sample_on_tape(&t, &enc, noise, deterministic_latent);

    let l_local = loss_local(&t, &mat_bound, x, z, mask, crop)?;
    let l_kl = match model.variant {
        // deterministic latent: the sigma term of the KL is dropped and only
        // the mean contributes
        Variant::ResId => {
            let mu2 = t.mul(enc.full_mean, enc.full_mean);
            t.scale(t.mean_all(mu2), 0.5)
        }
        _ => loss_kl(&t, enc.full_mean, enc.full_logvar),
    };
    let (l_reg, l_id) = match model.variant {
        Variant::ResId => {
            let albedo = slice_albedo(&t, x);
            (t.constant_scalar(0.0), loss_id(&t, &base_bound, &enc, albedo, mask))
        }
        _ => (loss_reg(&t, &enc), t.constant_scalar(0.0)),
    };

    // full-image decode is shared by the adversarial term
    let fake_full = decoder_forward(&t, &mat_bound, "dec", z);
    let l_gen = if tc.with_disc {
        loss_disc_gen(&t, model.disc.as_ref().expect("disc enabled"), fake_full)
    } else {
        t.constant_scalar(0.0)
    };

    let mut total = t.scale(l_local, tc.lambda_local);
    total = t.add(total, t.scale(l_kl, tc.lambda_kl));
    total = t.add(total, t.scale(l_reg, tc.lambda_reg));
    total = t.add(total, t.scale(l_id, tc.lambda_id));
    total = t.add(total, t.scale(l_gen, if tc.with_disc { tc.lambda_disc } else { 0.0 }));

    let total_val = t.scalar(total);
    if !total_val.is_finite() {
        return Err(VaeError::NonFinite {
            step,
            loss: total_val,
        });
    }
    let grads = t.backward(total);
    let g = collect_grads(&mat_bound, &model.params, &grads);
    let fake_value = t.value_cloned(fake_full);
    let row = LedgerRow {
        step,
        local_raw: t.scalar(l_local),
        local_weighted: t.scalar(l_local) * tc.lambda_local,
        kl_raw: t.scalar(l_kl),
        kl_weighted: t.scalar(l_kl) * tc.lambda_kl,
        reg_raw: t.scalar(l_reg),
        reg_weighted: t.scalar(l_reg) * tc.lambda_reg,
        id_raw: t.scalar(l_id),
        id_weighted: t.scalar(l_id) * tc.lambda_id,
        disc_gen_raw: t.scalar(l_gen),
        disc_gen_weighted: t.scalar(l_gen) * if tc.with_disc { tc.lambda_disc } else { 0.0 },
        disc_raw: 0.0,
        total: total_val,
        cropped: crop.is_some(),
    };
    drop(t);
    opt.step(&mut model.params, &g);

    // discriminator update on the detached fake
    let mut row = row;
    if tc.with_disc {
        let disc = model.disc.as_mut().expect("disc enabled");
        let t2 = Tape::new();
        let disc_bound = disc.bind(&t2);
        let real = t2.constant(x_arr.clone());
        let fake = t2.constant(fake_value);
        let l_disc = loss_disc_update(&t2, &disc_bound, real, fake);
        let disc_val = t2.scalar(l_disc);
        if !disc_val.is_finite() {
            return Err(VaeError::NonFinite {
                step,
                loss: disc_val,
            });
        }
        let grads2 = t2.backward(l_disc);
        let g2 = collect_grads(&disc_bound, disc, &grads2);
        drop(t2);
        disc_opt.step(disc, &g2);
        row.disc_raw = disc_val;
    }

    Ok(StepOutcome { row })
}

fn slice_albedo(t: &Tape, x: Var) -> Var {
    let s = t.shape(x);
    t.slice(x, &[(0, s[0]), (0, 3), (0, s[2]), (0, s[3])])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::gradcheck;
    use crate::config::Config;
    use crate::geometry::ring_rig;
    use crate::synthdata::{generate_dataset, Dataset};

    fn tiny_arch() -> VaeArch {
        VaeArch {
            width: 4,
            latent_channels: 2,
        }
    }

    fn tiny_records() -> Vec<MultiViewRecord> {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = Config::default_desk();
        cfg.set("data.image_size", 16);
        cfg.set("data.texture_size", 32);
        cfg.set("data.ring_views", 2);
        cfg.set("data.ring_elevations", 1);
        cfg.set("data.num_styles", 2);
        cfg.set("data.meshes", "sphere");
        cfg.set("data.seeds_per_combo", 1);
        generate_dataset(&cfg, dir.path(), 5).unwrap();
        Dataset::open(dir.path()).unwrap().load_all().unwrap()
    }

    fn random_image(h: usize, w: usize, seed: u64) -> (Array3<f64>, Array2<bool>) {
        let mut rng = stream(seed, "test.image", 0);
        let img = Array3::from_shape_fn((5, h, w), |_| rng.gen_range(-1.0..1.0));
        let mask = Array2::from_elem((h, w), true);
        (img, mask)
    }

    #[test]
    fn zero_init_reproduces_base_distribution_exactly() {
        let base = BaseVae::init(tiny_arch(), 3);
        let model = MatVae::init(Variant::ResReg, base, 4, false);
        let (img, _) = random_image(16, 16, 1);
        let (full, base_dist) = model.encode(&img);
        assert_eq!(full.mean, base_dist.mean);
        assert_eq!(full.logvar, base_dist.logvar);

        // and the regularizer is exactly zero
        let t = Tape::new();
        let mf = t.leaf(full.mean.clone().into_dyn());
        let lf = t.constant(full.logvar.clone().into_dyn());
        let mb = t.constant(base_dist.mean.clone().into_dyn());
        let lb = t.constant(base_dist.logvar.clone().into_dyn());
        let reg = loss_reg_pair(&t, mf, lf, mb, lb);
        assert_eq!(t.scalar(reg), 0.0);
    }

    #[test]
    fn residual_formula_is_additive_multiplicative() {
        // mu_base 0.5, sigma_base 1, mu_res 0.1, sigma_res 2 -> (0.6, 2.0)
        let t = Tape::new();
        let mb = t.constant(ndarray::arr1(&[0.5]).into_dyn());
        let lb = t.constant(ndarray::arr1(&[0.0]).into_dyn()); // sigma 1
        let mr = t.constant(ndarray::arr1(&[0.1]).into_dyn());
        let lr = t.constant(ndarray::arr1(&[2.0f64.ln() * 2.0]).into_dyn()); // sigma 2
        let mf = t.add(mb, mr);
        let lf = t.add(lb, lr);
        assert!((t.scalar(mf) - 0.6).abs() < 1e-15);
        let sigma = (0.5 * t.scalar(lf)).exp();
        assert!((sigma - 2.0).abs() < 1e-12);
    }

    #[test]
    fn kl_unit_cases() {
        let t = Tape::new();
        // N(0,1) vs N(0,1): zero
        let m = t.constant(ndarray::Array1::<f64>::zeros(8).into_dyn());
        let lv = t.constant(ndarray::Array1::<f64>::zeros(8).into_dyn());
        assert_eq!(t.scalar(loss_kl(&t, m, lv)), 0.0);
        // mean 1, sigma 1: 0.5 per element
        let m1 = t.constant(ndarray::Array1::<f64>::ones(8).into_dyn());
        let lv1 = t.constant(ndarray::Array1::<f64>::zeros(8).into_dyn());
        assert!((t.scalar(loss_kl(&t, m1, lv1)) - 0.5).abs() < 1e-15);
    }

    #[test]
    fn kl_matches_monte_carlo() {
        let mut rng = stream(0, "test.klmc", 0);
        for case in 0..3 {
            let n = 16;
            let mean: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.5..1.5)).collect();
            let logvar: Vec<f64> = (0..n).map(|_| rng.gen_range(-2.0..1.0)).collect();
            // closed form
            let t = Tape::new();
            let m = t.constant(ndarray::Array1::from(mean.clone()).into_dyn());
            let lv = t.constant(ndarray::Array1::from(logvar.clone()).into_dyn());
            let analytic = t.scalar(loss_kl(&t, m, lv));
            // Monte-Carlo estimate of E_q[log q - log p] / n
            let samples = 200_000;
            let mut acc = 0.0;
            for _ in 0..samples {
                for i in 0..n {
                    let s = (0.5 * logvar[i]).exp();
                    let z = mean[i] + s * normal(&mut rng);
                    let logq = -0.5 * ((z - mean[i]) / s).powi(2) - s.ln();
                    let logp = -0.5 * z * z;
                    acc += logq - logp;
                }
            }
            let mc = acc / (samples as f64 * n as f64);
            let rel = (analytic - mc).abs() / analytic.abs().max(1e-3);
            assert!(rel < 0.01, "case {case}: analytic {analytic} vs mc {mc}");
        }
    }

    #[test]
    fn reg_matches_monte_carlo() {
        let mut rng = stream(1, "test.regmc", 0);
        let n = 16;
        let mf: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let lf: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.5..0.5)).collect();
        let mb: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let lb: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.5..0.5)).collect();
        let t = Tape::new();
        let mfv = t.constant(ndarray::Array1::from(mf.clone()).into_dyn());
        let lfv = t.constant(ndarray::Array1::from(lf.clone()).into_dyn());
        let mbv = t.constant(ndarray::Array1::from(mb.clone()).into_dyn());
        let lbv = t.constant(ndarray::Array1::from(lb.clone()).into_dyn());
        let analytic = t.scalar(loss_reg_pair(&t, mfv, lfv, mbv, lbv));

        let samples = 400_000;
        let mut acc = 0.0;
        for _ in 0..samples {
            for i in 0..n {
                let sf = (0.5 * lf[i]).exp();
                let sb = (0.5 * lb[i]).exp();
                let z = mf[i] + sf * normal(&mut rng);
                let logq = -0.5 * ((z - mf[i]) / sf).powi(2) - sf.ln();
                let logp = -0.5 * ((z - mb[i]) / sb).powi(2) - sb.ln();
                acc += logq - logp;
            }
        }
        let mc = acc / (samples as f64 * n as f64);
        let rel = (analytic - mc).abs() / analytic.abs().max(1e-3);
        assert!(rel < 0.01, "analytic {analytic} vs mc {mc}");
    }

    #[test]
    fn full_crop_equals_plain_reconstruction() {
        let base = BaseVae::init(tiny_arch(), 7);
        let model = MatVae::init(Variant::ResReg, base, 8, false);
        let (img, mask) = random_image(16, 16, 3);
        let x_arr = stack_batch(&[&img]);
        let mask_arr = mask_batch(&[&mask]);

        let run = |crop: Option<CropSpec>| -> f64 {
            let t = Tape::new();
            let pb = model.base.params.bind_frozen(&t);
            let pm = model.params.bind_frozen(&t);
            let x = t.constant(x_arr.clone());
            let a = t.constant(stack_batch(&[&albedo_of(&img)]));
            let enc = encode_on_tape(&t, &model, &pb, &pm, x, a);
            let z = enc.full_mean; // deterministic for comparability
            let l = loss_local(&t, &pm, x, z, &mask_arr, crop).unwrap();
            t.scalar(l)
        };
        let full = run(None);
        let identity_crop = run(Some(CropSpec { row: 0, col: 0, size: 4 }));
        assert!((full - identity_crop).abs() < 1e-12);
    }

    #[test]
    fn crop_out_of_range_errors() {
        let base = BaseVae::init(tiny_arch(), 7);
        let model = MatVae::init(Variant::ResReg, base, 8, false);
        let (img, mask) = random_image(16, 16, 4);
        let t = Tape::new();
        let pm = model.params.bind_frozen(&t);
        let x = t.constant(stack_batch(&[&img]));
        let z = t.constant(ArrayD::zeros(IxDyn(&[1, 2, 4, 4])));
        let mask_arr = mask_batch(&[&mask]);
        let _ = &model;
        let bad = loss_local(
            &t,
            &pm,
            x,
            z,
            &mask_arr,
            Some(CropSpec { row: 3, col: 0, size: 3 }),
        );
        assert!(matches!(bad, Err(VaeError::CropMisaligned { .. })));
    }

    #[test]
    fn crop_sampler_respects_area_range() {
        let mut rng = stream(9, "test.crop", 0);
        let mut fired = 0;
        for _ in 0..500 {
            if let Some(c) = CropSpec::sample(&mut rng, 8, 8, 0.5, 0.05, 0.5) {
                fired += 1;
                let frac = (c.size * c.size) as f64 / 64.0;
                // rounding of sqrt(area) moves the realized fraction a bit
                assert!(frac >= 0.01 && frac <= 0.6, "fraction {frac}");
                assert!(c.row + c.size <= 8 && c.col + c.size <= 8);
            }
        }
        assert!((fired as f64 / 500.0 - 0.5).abs() < 0.1);
    }

    #[test]
    fn frozen_scheme_encodes_rm_as_black_when_zero() {
        let base = BaseVae::init(tiny_arch(), 11);
        let (mut img, _) = random_image(16, 16, 5);
        // r = m = 0 in data space: model space channels 3,4 = -1
        img.slice_mut(ndarray::s![3, .., ..]).fill(-1.0);
        img.slice_mut(ndarray::s![4, .., ..]).fill(-1.0);
        let (z_rm, z_a) = encode_frozen(&base, &img);
        // equals encoding an all-black ([-1,-1,-1]) image
        let black = Array3::from_elem((3, 16, 16), -1.0);
        let z_black = base.encode(&black);
        assert_eq!(z_rm.mean, z_black.mean);
        // albedo branch is the plain albedo encoding
        let z_a2 = base.encode(&albedo_of(&img));
        assert_eq!(z_a.mean, z_a2.mean);
    }

    #[test]
    fn loss_gradients_match_finite_differences() {
        // gradient of the combined matvae loss wrt random encoder/decoder
        // parameter slices
        let base = BaseVae::init(tiny_arch(), 13);
        let model = MatVae::init(Variant::ResReg, base, 14, false);
        let (img, mask) = random_image(16, 16, 6);
        let x_arr = stack_batch(&[&img]);
        let mask_arr = mask_batch(&[&mask]);
        let noise = {
            let mut nr = stream(3, "test.noise", 0);
            ArrayD::from_shape_fn(IxDyn(&[1, 2, 4, 4]), |_| normal(&mut nr))
        };

        let eval = |params: &ParamStore, want_grads: bool| -> (f64, Option<Vec<Option<ArrayD<f64>>>>) {
            let t = Tape::new();
            let pb = model.base.params.bind_frozen(&t);
            let pm = params.bind(&t);
            let x = t.constant(x_arr.clone());
            let a = t.constant(stack_batch(&[&albedo_of(&img)]));
            let enc = encode_on_tape(&t, &model, &pb, &pm, x, a);
            let z = sample_on_tape(&t, &enc, &noise, false);
            let l_local = loss_local(&t, &pm, x, z, &mask_arr, Some(CropSpec { row: 1, col: 1, size: 2 })).unwrap();
            let l_kl = loss_kl(&t, enc.full_mean, enc.full_logvar);
            let l_reg = loss_reg(&t, &enc);
            let mut total = t.scale(l_local, 3.0);
            total = t.add(total, t.scale(l_kl, 1e-3));
            total = t.add(total, t.scale(l_reg, 1e-2));
            let v = t.scalar(total);
            if want_grads {
                let grads = t.backward(total);
                let g = collect_grads(&pm, params, &grads);
                (v, Some(g))
            } else {
                (v, None)
            }
        };

        let params = model.params.clone();
        let (_, grads) = eval(&params, true);
        let grads = grads.unwrap();
        let names: Vec<&str> = params.names().collect();
        let mut rng = stream(15, "test.pick", 0);
        let mut checked = 0;
        for _ in 0..6 {
            let pi = rng.gen_range(0..names.len());
            let name = names[pi];
            let n = params.get(name).len();
            let flat = rng.gen_range(0..n);
            let analytic = match &grads[pi] {
                Some(g) => g.as_slice().unwrap()[flat],
                None => continue,
            };
            let x0 = params.get(name).as_slice().unwrap()[flat];
            let h = 1e-5 * x0.abs().max(1.0);
            let numeric = gradcheck::central(
                |v| {
                    let mut p2 = params.clone();
                    p2.get_mut(name).as_slice_mut().unwrap()[flat] = v;
                    eval(&p2, false).0
                },
                x0,
                h,
            );
            let rel = gradcheck::relative_error(analytic, numeric);
            assert!(
                rel <= 1e-3,
                "{name}[{flat}]: analytic {analytic}, numeric {numeric}, rel {rel}"
            );
            checked += 1;
        }
        assert!(checked >= 4);
    }

    #[test]
    fn base_pretrain_learns_constant_dataset() {
        // constant 0.35-grey albedo: reconstruction must become accurate
        let records = constant_records(0.35, 12);
        let mut cfg = Config::default_desk();
        cfg.set("base.width", 6);
        cfg.set("base.latent_channels", 2);
        cfg.set("base.steps", 400);
        cfg.set("base.batch", 4);
        cfg.set("base.lr", 2e-3);
        cfg.set("base.lambda_kl", 1e-4);
        let base = pretrain_base(&records, &cfg, 3, |_, _| {}).unwrap();
        // reconstruction RMSE in data space over covered pixels
        let x = pbr_to_model(&records[0].views[0].1);
        let albedo = albedo_of(&x);
        let dist = base.encode(&albedo);
        let recon = base.decode(&dist.mean);
        let mask = &records[0].views[0].1.mask;
        let mut se = 0.0;
        let mut count = 0usize;
        for r in 0..mask.nrows() {
            for c in 0..mask.ncols() {
                if mask[(r, c)] {
                    for ch in 0..3 {
                        let d = 0.5 * (recon[(ch, r, c)] - albedo[(ch, r, c)]);
                        se += d * d;
                        count += 1;
                    }
                }
            }
        }
        let rmse = (se / count as f64).sqrt();
        assert!(rmse <= 0.02, "base recon rmse {rmse}");
    }

    fn constant_records(grey: f64, size: usize) -> Vec<MultiViewRecord> {
        use crate::geometry::{rasterize, sphere};
        let mesh = sphere(0.9, 12, 6);
        let mut rig = ring_rig(4, 1, 1.0, size);
        for v in rig.iter_mut() {
            rasterize(&mesh, v);
        }
        let style = MaterialStyle::new(0, 0).unwrap();
        let views: Vec<_> = rig
            .into_iter()
            .map(|cam| {
                let mask = cam.buffers().mask.clone();
                let (h, w) = mask.dim();
                let mut img = PbrImage::zeros(h, w);
                for r in 0..h {
                    for c in 0..w {
                        if mask[(r, c)] {
                            img.mask[(r, c)] = true;
                            for ch in 0..3 {
                                img.albedo[(r, c, ch)] = grey;
                            }
                            img.rough[(r, c)] = 1.0;
                        }
                    }
                }
                (cam, img)
            })
            .collect();
        vec![MultiViewRecord {
            mesh_id: "sphere".into(),
            style,
            seed: 0,
            views,
            texture: crate::baking::UvTexture::zeros(16),
        }]
    }

    use crate::synthdata::MaterialStyle;

    #[test]
    fn frozen_base_hash_survives_matvae_training() {
        let records = tiny_records();
        let mut cfg = Config::default_desk();
        cfg.set("base.width", 4);
        cfg.set("base.latent_channels", 2);
        cfg.set("base.steps", 30);
        cfg.set("base.batch", 2);
        cfg.set("base.lr", 1e-3);
        let base = pretrain_base(&records, &cfg, 1, |_, _| {}).unwrap();
        let hash_before = base.content_hash();

        let tc = TrainConfig {
            steps: 20,
            batch: 2,
            lr: 1e-3,
            disc_lr: 1e-3,
            lambda_local: 3.0,
            lambda_kl: 1e-6,
            lambda_disc: 0.02,
            lambda_reg: 3e-9,
            lambda_id: 1.0,
            crop_prob: 0.5,
            crop_area_min: 0.05,
            crop_area_max: 0.5,
            with_disc: true,
            ckpt_every: 0,
            error_map_every: 0,
        };
        let model = train_matvae(Variant::ResReg, &base, &records, &tc, 2, |_| {}, |_, _| {}).unwrap();
        assert_eq!(model.base.content_hash(), hash_before);

        // step-0 reconstruction on albedo equals the base reconstruction
        let x = pbr_to_model(&records[0].views[0].1);
        let fresh = MatVae::init(Variant::ResReg, base.clone(), 2, false);
        let (full, _) = fresh.encode(&x);
        let five = fresh.decode(&full.mean);
        let three = base.decode(&base.encode(&albedo_of(&x)).mean);
        for c in 0..3 {
            let a = five.index_axis(Axis(0), c);
            let b = three.index_axis(Axis(0), c);
            for (x1, x2) in a.iter().zip(b.iter()) {
                assert!((x1 - x2).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn disc_toggle_keeps_other_step0_terms_bit_identical() {
        let records = tiny_records();
        let mut cfg = Config::default_desk();
        cfg.set("base.width", 4);
        cfg.set("base.latent_channels", 2);
        cfg.set("base.steps", 10);
        cfg.set("base.batch", 2);
        cfg.set("base.lr", 1e-3);
        let base = pretrain_base(&records, &cfg, 1, |_, _| {}).unwrap();

        let mut tc = TrainConfig {
            steps: 1,
            batch: 2,
            lr: 1e-3,
            disc_lr: 1e-3,
            lambda_local: 3.0,
            lambda_kl: 1e-6,
            lambda_disc: 0.02,
            lambda_reg: 3e-9,
            lambda_id: 1.0,
            crop_prob: 0.5,
            crop_area_min: 0.05,
            crop_area_max: 0.5,
            with_disc: false,
            ckpt_every: 0,
            error_map_every: 0,
        };
        let mut rows_off = Vec::new();
        train_matvae(Variant::ResReg, &base, &records, &tc, 7, |r| rows_off.push(r.clone()), |_, _| {}).unwrap();
        tc.with_disc = true;
        let mut rows_on = Vec::new();
        train_matvae(Variant::ResReg, &base, &records, &tc, 7, |r| rows_on.push(r.clone()), |_, _| {}).unwrap();

        let (off, on) = (&rows_off[0], &rows_on[0]);
        assert_eq!(off.local_raw.to_bits(), on.local_raw.to_bits());
        assert_eq!(off.kl_raw.to_bits(), on.kl_raw.to_bits());
        assert_eq!(off.reg_raw.to_bits(), on.reg_raw.to_bits());
        assert_eq!(off.disc_gen_raw, 0.0);
        assert_ne!(on.disc_gen_raw, 0.0);
        assert!(on.disc_raw.is_finite());
    }

    #[test]
    fn res_id_reduces_to_base_reconstruction_at_init() {
        let base = BaseVae::init(tiny_arch(), 21);
        let model = MatVae::init(Variant::ResId, base, 22, false);
        let (img, mask) = random_image(16, 16, 9);
        let t = Tape::new();
        let pb = model.base.params.bind_frozen(&t);
        let pm = model.params.bind_frozen(&t);
        let x = t.constant(stack_batch(&[&img]));
        let a = t.constant(stack_batch(&[&albedo_of(&img)]));
        let enc = encode_on_tape(&t, &model, &pb, &pm, x, a);
        let mask_arr = mask_batch(&[&mask]);
        let l = loss_id(&t, &pb, &enc, a, &mask_arr);

        // zero-init: mu_full == mu_base, so this equals the base VAE's own
        // albedo reconstruction error
        let dist = model.base.encode(&albedo_of(&img));
        let recon = model.base.decode(&dist.mean);
        let mut se = 0.0;
        let mut n = 0usize;
        let albedo = albedo_of(&img);
        for r in 0..16 {
            for c in 0..16 {
                for ch in 0..3 {
                    let d = recon[(ch, r, c)] - albedo[(ch, r, c)];
                    se += d * d;
                    n += 1;
                }
            }
        }
        assert!((t.scalar(l) - se / n as f64).abs() < 1e-10);
    }
}
