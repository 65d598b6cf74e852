//! Multi-view velocity model: latent tokens from all views attend densely,
//! with an optional correspondence-aware branch restricted to geometric
//! correspondents, trained by conditional flow matching on a linear
//! noise-to-data path and sampled with an Euler integrator under
//! classifier-free guidance.

use std::path::Path;

use ndarray::{Array2, Array3, ArrayD, Axis, IxDyn};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{Tape, Var};
use crate::geometry::{build_correspondence, downsample_view, CameraView};
use crate::matvae::{pbr_to_model, MatVae, VaeArch};
use crate::nn::{
    collect_grads, Adam, Bound, EmbeddingLayer, LayerNormLayer, LinearLayer, ParamStore,
};
use crate::rng::stream;
use crate::synthdata::MultiViewRecord;

#[derive(Debug, Error)]
pub enum DiffusionError {
    #[error("time {0} outside [0,1]")]
    TimeOutOfRange(f64),
    #[error("sampler needs at least one step")]
    NoSteps,
    #[error("non-finite loss at step {step}: {loss}")]
    NonFinite { step: usize, loss: f64 },
    #[error("no training records")]
    EmptyDataset,
    #[error("correspondence index built for {expected} tokens, batch has {got}")]
    IndexMismatch { expected: usize, got: usize },
    #[error(transparent)]
    Io(#[from] crate::arrayio::ArrayIoError),
    #[error("model config at {0} is missing or malformed")]
    BadSidecar(String),
}

/// Latent grids plus conditioning for one multi-view set.
#[derive(Debug, Clone)]
pub struct MultiViewLatent {
    /// Per view `(d, h, w)`.
    pub latents: Vec<Array3<f64>>,
    pub view_ids: Vec<usize>,
    pub style_id: usize,
    /// Per view `(geo_channels, h, w)`: normal, position, coverage.
    pub geometry: Vec<Array3<f64>>,
}

/// Correspondence sets per token at the latent resolution. Token `t` of
/// view `i` at cell `(r, c)` is `i*h*w + r*w + c`; its neighbor list holds
/// the K x K windows around its correspondent in every other view where
/// the surface point is visible.
#[derive(Debug, Clone)]
pub struct CaaIndex {
    pub neighbors: Vec<Vec<usize>>,
    pub n_views: usize,
    pub grid: (usize, usize),
}

impl CaaIndex {
    /// Build from rasterized latent-resolution views.
    ///
    /// `eps_z` is a lower bound on the depth tolerance; the effective
    /// tolerance grows to three quarters of a cell's world footprint, since
    /// a coarse cell's stored depth is the minimum over the pixels it
    /// covers and oblique surfaces vary by up to the footprint within it.
    pub fn build(views: &[&CameraView], eps_z: f64, window: usize) -> Self {
        let n = views.len();
        let (h, w) = (views[0].height, views[0].width);
        let cell_world = 2.0 * views[0].ortho_scale / h.max(w) as f64;
        let eff_eps = eps_z.max(0.75 * cell_world);
        let hw = h * w;
        let mut neighbors = vec![Vec::new(); n * hw];
        let owned: Vec<CameraView> = views.iter().map(|v| (*v).clone()).collect();
        for i in 0..n {
            for j in 0..n {
                if i == j {
                    continue;
                }
                let map = build_correspondence(&owned, i, j, eff_eps, window)
                    .expect("latent views are rasterized");
                for r in 0..h {
                    for c in 0..w {
                        if !map.valid[(r, c)] {
                            continue;
                        }
                        let token = i * hw + r * w + c;
                        for (tr, tc) in map.window_of(r, c) {
                            neighbors[token].push(j * hw + tr * w + tc);
                        }
                    }
                }
            }
        }
        Self {
            neighbors,
            n_views: n,
            grid: (h, w),
        }
    }

    pub fn tokens(&self) -> usize {
        self.neighbors.len()
    }

    /// Largest correspondence set; bounded by `(N-1) * K^2`.
    pub fn max_count(&self) -> usize {
        self.neighbors.iter().map(|n| n.len()).max().unwrap_or(0)
    }

    /// Reorder for a permutation of the views (new position -> old index).
    pub fn permuted(&self, order: &[usize]) -> Self {
        let (h, w) = self.grid;
        let hw = h * w;
        let mut old_to_new = vec![0usize; self.n_views];
        for (new_pos, &old) in order.iter().enumerate() {
            old_to_new[old] = new_pos;
        }
        let mut neighbors = vec![Vec::new(); self.neighbors.len()];
        for (new_pos, &old) in order.iter().enumerate() {
            for p in 0..hw {
                neighbors[new_pos * hw + p] = self.neighbors[old * hw + p]
                    .iter()
                    .map(|&tok| {
                        let (ov, op) = (tok / hw, tok % hw);
                        old_to_new[ov] * hw + op
                    })
                    .collect();
            }
        }
        Self {
            neighbors,
            n_views: self.n_views,
            grid: self.grid,
        }
    }
}

/// Geometry conditioning channels: normal (3) + position (3) + coverage.
pub const GEO_CHANNELS: usize = 7;

/// Downsampled conditioning stack for one view.
pub fn geometry_conditioning(latent_view: &CameraView) -> Array3<f64> {
    let buf = latent_view.buffers();
    let (h, w) = (latent_view.height, latent_view.width);
    let mut geo = Array3::<f64>::zeros((GEO_CHANNELS, h, w));
    for r in 0..h {
        for c in 0..w {
            for ch in 0..3 {
                geo[(ch, r, c)] = buf.normal[(r, c, ch)];
                geo[(3 + ch, r, c)] = buf.position[(r, c, ch)];
            }
            geo[(6, r, c)] = if buf.mask[(r, c)] { 1.0 } else { 0.0 };
        }
    }
    geo
}

// ------------------------------------------------------------------ model

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ModelConfig {
    pub width: usize,
    pub blocks: usize,
    pub heads: usize,
    /// Latent channels entering/leaving the model (doubled for the frozen
    /// scheme's concatenated codes).
    pub latent_channels: usize,
    pub num_styles: usize,
    pub grid_h: usize,
    pub grid_w: usize,
    /// Correspondence-aware branch enabled at all?
    pub caa: bool,
    /// Blocks carrying the branch; empty means every block.
    pub caa_blocks: Vec<usize>,
    /// Channel-wise affine that standardizes latents for the flow.
    pub latent_mean: Vec<f64>,
    pub latent_std: Vec<f64>,
}

impl ModelConfig {
    pub fn block_has_caa(&self, i: usize) -> bool {
        self.caa && (self.caa_blocks.is_empty() || self.caa_blocks.contains(&i))
    }

    pub fn token_in(&self) -> usize {
        self.latent_channels + GEO_CHANNELS
    }
}

/// The velocity transformer.
#[derive(Debug, Clone)]
pub struct VelocityModel {
    pub cfg: ModelConfig,
    pub params: ParamStore,
}

const T_EMBED_DIM: usize = 32;

fn sinusoidal_t(t: f64) -> Array2<f64> {
    let mut out = Array2::<f64>::zeros((1, T_EMBED_DIM));
    for k in 0..T_EMBED_DIM / 2 {
        let freq = (10_000f64).powf(-(k as f64) / (T_EMBED_DIM / 2) as f64);
        out[(0, 2 * k)] = (t * freq * 1000.0).sin();
        out[(0, 2 * k + 1)] = (t * freq * 1000.0).cos();
    }
    out
}

fn pos_emb_init(rows: usize, dim: usize, rng: &mut ChaCha12Rng) -> ArrayD<f64> {
    ArrayD::from_shape_fn(IxDyn(&[rows, dim]), |_| {
        let u1: f64 = rng.gen_range(f64::EPSILON..1.0);
        let u2: f64 = rng.gen_range(0.0..1.0);
        0.02 * (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
    })
}

impl VelocityModel {
    pub fn init(cfg: ModelConfig, seed: u64) -> Self {
        let mut rng = stream(seed, "diffusion.init", 0);
        let mut p = ParamStore::new();
        let w = cfg.width;
        LinearLayer::init(&mut p, "in_proj", cfg.token_in(), w, &mut rng);
        p.insert("pos_emb", pos_emb_init(cfg.grid_h * cfg.grid_w, w, &mut rng));
        LinearLayer::init(&mut p, "t_mlp1", T_EMBED_DIM, w, &mut rng);
        LinearLayer::init(&mut p, "t_mlp2", w, w, &mut rng);
        EmbeddingLayer::init(&mut p, "style_emb", cfg.num_styles + 1, w, &mut rng);
        for b in 0..cfg.blocks {
            let n = |s: &str| format!("blk{b}.{s}");
            LayerNormLayer::init(&mut p, &n("ln1"), w);
            LinearLayer::init(&mut p, &n("qkv"), w, 3 * w, &mut rng);
            LinearLayer::init(&mut p, &n("proj"), w, w, &mut rng);
            LayerNormLayer::init(&mut p, &n("ln2"), w);
            LinearLayer::init(&mut p, &n("mlp1"), w, 2 * w, &mut rng);
            LinearLayer::init(&mut p, &n("mlp2"), 2 * w, w, &mut rng);
            if cfg.block_has_caa(b) {
                LayerNormLayer::init(&mut p, &n("caa_ln"), w);
                LinearLayer::init(&mut p, &n("caa_q"), w, w, &mut rng);
                LinearLayer::init(&mut p, &n("caa_k"), w, w, &mut rng);
                LinearLayer::init(&mut p, &n("caa_v"), w, w, &mut rng);
                // zero output projection: the branch is a no-op until trained
                LinearLayer::init_zero(&mut p, &n("caa_o"), w, w);
            }
        }
        LayerNormLayer::init(&mut p, "final_ln", w);
        LinearLayer::init_zero(&mut p, "head", w, cfg.latent_channels);
        Self { cfg, params: p }
    }

    /// Forward on a tape. `tokens` is `(N*h*w, latent+geo)`; `style` of
    /// `None` selects the null embedding used for guidance.
    pub fn forward(
        &self,
        t: &Tape,
        p: &Bound,
        tokens: Var,
        time: f64,
        style: Option<usize>,
        n_views: usize,
        caa: Option<&CaaIndex>,
    ) -> Result<Var, DiffusionError> {
        let cfg = &self.cfg;
        let w = cfg.width;
        let hw = cfg.grid_h * cfg.grid_w;
        let total = n_views * hw;
        if let Some(index) = caa {
            if index.tokens() != total {
                return Err(DiffusionError::IndexMismatch {
                    expected: index.tokens(),
                    got: total,
                });
            }
        }

        let in_proj = LinearLayer {
            name: "in_proj".into(),
        };
        let mut x = in_proj.forward(t, p, tokens);
        // shared spatial embedding per view keeps view order irrelevant
        let pos_idx: Vec<usize> = (0..total).map(|i| i % hw).collect();
        let pos = t.index_select(p.var("pos_emb"), &pos_idx);
        x = t.add(x, pos);

        // conditioning: timestep MLP + style row, broadcast over tokens
        let t_feat = t.constant(sinusoidal_t(time).into_dyn());
        let t1 = LinearLayer {
            name: "t_mlp1".into(),
        };
        let t2 = LinearLayer {
            name: "t_mlp2".into(),
        };
        let temb = t2.forward(t, p, t.silu(t1.forward(t, p, t_feat)));
        let style_row = style.unwrap_or(cfg.num_styles);
        let semb = t.index_select(p.var("style_emb.w"), &[style_row]);
        let cond = t.add(temb, semb);
        let cond_rows = t.broadcast_rows(cond, total);
        x = t.add(x, cond_rows);

        let dh = w / cfg.heads;
        for b in 0..cfg.blocks {
            let n = |s: &str| format!("blk{b}.{s}");
            let ln1 = LayerNormLayer {
                name: n("ln1"),
                eps: 1e-5,
            };
            let normed = ln1.forward(t, p, x);
            let qkv = LinearLayer { name: n("qkv") }.forward(t, p, normed);
            let mut heads_out = Vec::with_capacity(cfg.heads);
            for hd in 0..cfg.heads {
                let q = t.slice(qkv, &[(0, total), (hd * dh, (hd + 1) * dh)]);
                let k = t.slice(qkv, &[(0, total), (w + hd * dh, w + (hd + 1) * dh)]);
                let v = t.slice(
                    qkv,
                    &[(0, total), (2 * w + hd * dh, 2 * w + (hd + 1) * dh)],
                );
                let scores = t.scale(
                    t.matmul(q, t.permute(k, &[1, 0])),
                    1.0 / (dh as f64).sqrt(),
                );
                let probs = t.softmax(scores, None);
                heads_out.push(t.matmul(probs, v));
            }
            let merged = t.concat(&heads_out, 1);
            let attn = LinearLayer { name: n("proj") }.forward(t, p, merged);
            x = t.add(x, attn);

            if cfg.block_has_caa(b) {
                if let Some(index) = caa {
                    let ln = LayerNormLayer {
                        name: n("caa_ln"),
                        eps: 1e-5,
                    };
                    let cn = ln.forward(t, p, x);
                    let q = LinearLayer { name: n("caa_q") }.forward(t, p, cn);
                    let k = LinearLayer { name: n("caa_k") }.forward(t, p, cn);
                    let v = LinearLayer { name: n("caa_v") }.forward(t, p, cn);
                    let gathered = t.gather_attend(q, k, v, &index.neighbors);
                    let o = LinearLayer { name: n("caa_o") }.forward(t, p, gathered);
                    x = t.add(x, o);
                }
            }

            let ln2 = LayerNormLayer {
                name: n("ln2"),
                eps: 1e-5,
            };
            let n2 = ln2.forward(t, p, x);
            let m1 = LinearLayer { name: n("mlp1") }.forward(t, p, n2);
            let m2 = LinearLayer { name: n("mlp2") }.forward(t, p, t.silu(m1));
            x = t.add(x, m2);
        }
        let fln = LayerNormLayer {
            name: "final_ln".into(),
            eps: 1e-5,
        };
        let out = LinearLayer {
            name: "head".into(),
        }
        .forward(t, p, fln.forward(t, p, x));
        Ok(out)
    }

    /// Plain-value forward for inference.
    pub fn velocity(
        &self,
        tokens: &Array2<f64>,
        time: f64,
        style: Option<usize>,
        n_views: usize,
        caa: Option<&CaaIndex>,
    ) -> Result<Array2<f64>, DiffusionError> {
        let t = Tape::new();
        let p = self.params.bind_frozen(&t);
        let tok = t.constant(tokens.clone().into_dyn());
        let out = self.forward(&t, &p, tok, time, style, n_views, caa)?;
        Ok(t.value_cloned(out).into_dimensionality().unwrap())
    }

    pub fn save(&self, dir: &Path) -> Result<(), DiffusionError> {
        std::fs::create_dir_all(dir).map_err(|e| DiffusionError::BadSidecar(e.to_string()))?;
        let mut c = crate::arrayio::Container::new();
        self.params.save_into(&mut c);
        c.write(&dir.join("model.bin"))?;
        let json = serde_json::to_string_pretty(&self.cfg).expect("config serializes");
        std::fs::write(dir.join("model.json"), json)
            .map_err(|e| DiffusionError::BadSidecar(e.to_string()))?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self, DiffusionError> {
        let sidecar = dir.join("model.json");
        let text = std::fs::read_to_string(&sidecar)
            .map_err(|_| DiffusionError::BadSidecar(sidecar.display().to_string()))?;
        let cfg: ModelConfig = serde_json::from_str(&text)
            .map_err(|_| DiffusionError::BadSidecar(sidecar.display().to_string()))?;
        let params = ParamStore::load(&dir.join("model.bin"))?;
        Ok(Self { cfg, params })
    }
}

// ------------------------------------------------------------- cfm loss

/// Interpolant `(1-t) Z + t eps` and target velocity `eps - Z`.
pub fn flow_point(
    z: &Array2<f64>,
    eps: &Array2<f64>,
    t: f64,
) -> Result<(Array2<f64>, Array2<f64>), DiffusionError> {
    if !(0.0..=1.0).contains(&t) {
        return Err(DiffusionError::TimeOutOfRange(t));
    }
    let zt = z * (1.0 - t) + eps * t;
    let ut = eps - z;
    Ok((zt, ut))
}

/// Mean squared error between predicted and target velocity.
pub fn cfm_loss(t: &Tape, predicted: Var, target: &Array2<f64>) -> Var {
    let tv = t.constant(target.clone().into_dyn());
    let diff = t.sub(predicted, tv);
    t.mean_all(t.mul(diff, diff))
}

// ------------------------------------------------------------- training

/// Per-view training tensors at the latent resolution.
#[derive(Debug, Clone)]
pub struct DiffusionViewData {
    pub mean: Array3<f64>,
    pub logvar: Array3<f64>,
    pub geo: Array3<f64>,
    pub latent_cam: CameraView,
}

#[derive(Debug, Clone)]
pub struct DiffusionRecordData {
    pub style_id: usize,
    pub views: Vec<DiffusionViewData>,
}

/// Encode every dataset view with the chosen VAE variant and downsample
/// its geometry to the latent grid.
pub fn prepare_records(model: &MatVae, records: &[MultiViewRecord]) -> Vec<DiffusionRecordData> {
    let f = VaeArch::DOWNSAMPLE;
    records
        .iter()
        .map(|rec| {
            let views = rec
                .views
                .iter()
                .map(|(cam, img)| {
                    let x = pbr_to_model(img);
                    // the Frozen scheme yields the channel-concatenated pair
                    let (full, _) = model.encode(&x);
                    let (mean, logvar) = (full.mean, full.logvar);
                    let latent_cam = downsample_view(cam, f);
                    let geo = geometry_conditioning(&latent_cam);
                    DiffusionViewData {
                        mean,
                        logvar,
                        geo,
                        latent_cam,
                    }
                })
                .collect();
            DiffusionRecordData {
                style_id: rec.style.style_id,
                views,
            }
        })
        .collect()
}

/// Channel-wise mean/std of the latent means across a prepared dataset.
pub fn latent_stats(records: &[DiffusionRecordData]) -> (Vec<f64>, Vec<f64>) {
    let d = records[0].views[0].mean.shape()[0];
    let mut sum = vec![0.0f64; d];
    let mut sq = vec![0.0f64; d];
    let mut count = 0usize;
    for rec in records {
        for v in &rec.views {
            for c in 0..d {
                for val in v.mean.index_axis(Axis(0), c).iter() {
                    sum[c] += val;
                    sq[c] += val * val;
                }
            }
            count += v.mean.len() / d;
        }
    }
    let mean: Vec<f64> = sum.iter().map(|s| s / count as f64).collect();
    let std: Vec<f64> = sq
        .iter()
        .zip(mean.iter())
        .map(|(s, m)| ((s / count as f64 - m * m).max(1e-8)).sqrt())
        .collect();
    (mean, std)
}

/// Tokens `(N*h*w, d+geo)` for a set of views: standardized latent then
/// geometry channels.
pub fn to_tokens(
    latents: &[Array3<f64>],
    geos: &[&Array3<f64>],
    mean: &[f64],
    std: &[f64],
) -> Array2<f64> {
    let d = latents[0].shape()[0];
    let (h, w) = (latents[0].shape()[1], latents[0].shape()[2]);
    let hw = h * w;
    let n = latents.len();
    let mut out = Array2::<f64>::zeros((n * hw, d + GEO_CHANNELS));
    for (vi, (z, geo)) in latents.iter().zip(geos.iter()).enumerate() {
        for r in 0..h {
            for c in 0..w {
                let row = vi * hw + r * w + c;
                for ch in 0..d {
                    out[(row, ch)] = (z[(ch, r, c)] - mean[ch]) / std[ch];
                }
                for ch in 0..GEO_CHANNELS {
                    out[(row, d + ch)] = geo[(ch, r, c)];
                }
            }
        }
    }
    out
}

/// Latent tokens only (no geometry), same layout.
pub fn latents_to_token_grid(latents: &[Array3<f64>], mean: &[f64], std: &[f64]) -> Array2<f64> {
    let d = latents[0].shape()[0];
    let (h, w) = (latents[0].shape()[1], latents[0].shape()[2]);
    let hw = h * w;
    let mut out = Array2::<f64>::zeros((latents.len() * hw, d));
    for (vi, z) in latents.iter().enumerate() {
        for r in 0..h {
            for c in 0..w {
                let row = vi * hw + r * w + c;
                for ch in 0..d {
                    out[(row, ch)] = (z[(ch, r, c)] - mean[ch]) / std[ch];
                }
            }
        }
    }
    out
}

/// Back from token grid to per-view latent grids, undoing standardization.
pub fn tokens_to_latents(
    tokens: &Array2<f64>,
    n_views: usize,
    grid: (usize, usize),
    mean: &[f64],
    std: &[f64],
) -> Vec<Array3<f64>> {
    let (h, w) = grid;
    let hw = h * w;
    let d = tokens.ncols();
    (0..n_views)
        .map(|vi| {
            let mut z = Array3::<f64>::zeros((d, h, w));
            for r in 0..h {
                for c in 0..w {
                    let row = vi * hw + r * w + c;
                    for ch in 0..d {
                        z[(ch, r, c)] = tokens[(row, ch)] * std[ch] + mean[ch];
                    }
                }
            }
            z
        })
        .collect()
}

#[derive(Debug, Clone)]
pub struct DiffusionTrainConfig {
    pub steps: usize,
    pub batch: usize,
    pub views_per_iter: usize,
    pub lr: f64,
    pub width: usize,
    pub blocks: usize,
    pub heads: usize,
    pub caa: bool,
    pub caa_blocks: Vec<usize>,
    pub cond_dropout: f64,
    pub eps_z: f64,
    pub window: usize,
    pub ckpt_every: usize,
}

impl DiffusionTrainConfig {
    pub fn from_config(cfg: &crate::config::Config) -> Result<Self, crate::config::ConfigError> {
        let caa_blocks = match cfg.get("diffusion.caa_blocks") {
            Some("") | None => Vec::new(),
            Some(_) => cfg.usize_list("diffusion.caa_blocks")?,
        };
        Ok(Self {
            steps: cfg.usize("diffusion.steps")?,
            batch: cfg.usize("diffusion.batch")?,
            views_per_iter: cfg.usize("diffusion.views_per_iter")?,
            lr: cfg.f64("diffusion.lr")?,
            width: cfg.usize("diffusion.width")?,
            blocks: cfg.usize("diffusion.blocks")?,
            heads: cfg.usize("diffusion.heads")?,
            caa: cfg.bool("diffusion.caa")?,
            caa_blocks,
            cond_dropout: cfg.f64("diffusion.cond_dropout")?,
            eps_z: cfg.f64("geometry.eps_z")?,
            window: cfg.usize("geometry.window")?,
            ckpt_every: cfg.usize("diffusion.ckpt_every")?,
        })
    }
}

/// Train the velocity model on prepared records.
pub fn train_diffusion(
    records: &[DiffusionRecordData],
    num_styles: usize,
    tc: &DiffusionTrainConfig,
    seed: u64,
    mut on_step: impl FnMut(usize, f64),
    mut checkpoint_hook: impl FnMut(usize, &VelocityModel),
) -> Result<VelocityModel, DiffusionError> {
    if records.is_empty() {
        return Err(DiffusionError::EmptyDataset);
    }
    let d = records[0].views[0].mean.shape()[0];
    let (h, w) = (
        records[0].views[0].mean.shape()[1],
        records[0].views[0].mean.shape()[2],
    );
    let (lat_mean, lat_std) = latent_stats(records);
    let cfg = ModelConfig {
        width: tc.width,
        blocks: tc.blocks,
        heads: tc.heads,
        latent_channels: d,
        num_styles,
        grid_h: h,
        grid_w: w,
        caa: tc.caa,
        caa_blocks: tc.caa_blocks.clone(),
        latent_mean: lat_mean.clone(),
        latent_std: lat_std.clone(),
    };
    let mut model = VelocityModel::init(cfg, seed);
    let mut opt = Adam::new(tc.lr);
    let mut batch_rng = stream(seed, "diffusion.batch", 0);
    let mut view_rng = stream(seed, "diffusion.views", 0);
    let mut z_rng = stream(seed, "diffusion.z", 0);
    let mut t_rng = stream(seed, "diffusion.t", 0);
    let mut eps_rng = stream(seed, "diffusion.eps", 0);
    let mut drop_rng = stream(seed, "diffusion.dropout", 0);

    for step in 0..tc.steps {
        let t = Tape::new();
        let bound = model.params.bind(&t);
        let mut loss_sum: Option<Var> = None;
        for _ in 0..tc.batch {
            let rec = &records[batch_rng.gen_range(0..records.len())];
            let n_avail = rec.views.len();
            let take = tc.views_per_iter.min(n_avail);
            let mut order: Vec<usize> = (0..n_avail).collect();
            order.shuffle(&mut view_rng);
            let subset: Vec<usize> = order[..take].to_vec();

            // reparameterized latent sample per view
            let latents: Vec<Array3<f64>> = subset
                .iter()
                .map(|&vi| {
                    let v = &rec.views[vi];
                    let mut z = v.mean.clone();
                    ndarray::Zip::from(&mut z).and(&v.logvar).for_each(|zi, &lv| {
                        *zi += (0.5 * lv).exp() * normal(&mut z_rng);
                    });
                    z
                })
                .collect();
            let geos: Vec<&Array3<f64>> = subset.iter().map(|&vi| &rec.views[vi].geo).collect();
            let z_tok = latents_to_token_grid(&latents, &lat_mean, &lat_std);
            let geo_tok = to_tokens(&latents, &geos, &lat_mean, &lat_std);

            let time: f64 = t_rng.gen_range(0.0..1.0);
            let eps = Array2::<f64>::from_shape_fn(z_tok.raw_dim(), |_| normal(&mut eps_rng));
            let (zt, ut) = flow_point(&z_tok, &eps, time)?;
            // model input swaps the latent part for the noisy interpolant
            let mut tokens = geo_tok;
            for row in 0..tokens.nrows() {
                for ch in 0..d {
                    tokens[(row, ch)] = zt[(row, ch)];
                }
            }

            let caa_index = if tc.caa {
                let views: Vec<&CameraView> =
                    subset.iter().map(|&vi| &rec.views[vi].latent_cam).collect();
                Some(CaaIndex::build(&views, tc.eps_z, tc.window))
            } else {
                None
            };
            let style = if drop_rng.gen_range(0.0..1.0) < tc.cond_dropout {
                None
            } else {
                Some(rec.style_id)
            };

            let tok_var = t.constant(tokens.into_dyn());
            let pred = model.forward(&t, &bound, tok_var, time, style, take, caa_index.as_ref())?;
            let l = cfm_loss(&t, pred, &ut);
            loss_sum = Some(match loss_sum {
                Some(acc) => t.add(acc, l),
                None => l,
            });
        }
        let total = t.scale(loss_sum.expect("batch nonempty"), 1.0 / tc.batch as f64);
        let loss_val = t.scalar(total);
        if !loss_val.is_finite() {
            return Err(DiffusionError::NonFinite {
                step,
                loss: loss_val,
            });
        }
        let grads = t.backward(total);
        let g = collect_grads(&bound, &model.params, &grads);
        drop(t);
        opt.step(&mut model.params, &g);
        on_step(step, loss_val);
        if tc.ckpt_every > 0 && (step + 1) % tc.ckpt_every == 0 {
            checkpoint_hook(step + 1, &model);
        }
    }
    Ok(model)
}

fn normal(rng: &mut ChaCha12Rng) -> f64 {
    let u1: f64 = rng.gen_range(f64::EPSILON..1.0);
    let u2: f64 = rng.gen_range(0.0..1.0);
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

// -------------------------------------------------------------- sampling

/// Euler integration of `dZ/dt = v(Z, t)` from `t = 1` down to `t = 0` in
/// equal steps, with classifier-free guidance. `velocity(z, t, style)`
/// returns the conditional estimate for `Some(style)` and the
/// unconditional one for `None`. At `cfg_scale = 1` the unconditional
/// branch is never evaluated and the guidance arithmetic is exactly the
/// conditional velocity.
pub fn euler_sample<F>(
    mut velocity: F,
    z1: Array2<f64>,
    style: usize,
    steps: usize,
    cfg_scale: f64,
) -> Result<Array2<f64>, DiffusionError>
where
    F: FnMut(&Array2<f64>, f64, Option<usize>) -> Result<Array2<f64>, DiffusionError>,
{
    if steps < 1 {
        return Err(DiffusionError::NoSteps);
    }
    let dt = 1.0 / steps as f64;
    let mut z = z1;
    for k in 0..steps {
        let t = 1.0 - k as f64 * dt;
        let v = if cfg_scale == 1.0 {
            velocity(&z, t, Some(style))?
        } else {
            let cond = velocity(&z, t, Some(style))?;
            let uncond = velocity(&z, t, None)?;
            &uncond + &((&cond - &uncond) * cfg_scale)
        };
        z = &z - &(&v * dt);
    }
    Ok(z)
}

/// Draw latent samples for a rig: integrate the learned velocity field and
/// return unnormalized per-view latent grids.
#[allow(clippy::too_many_arguments)]
pub fn sample(
    model: &VelocityModel,
    latent_views: &[&CameraView],
    style: usize,
    steps: usize,
    cfg_scale: f64,
    seed: u64,
    eps_z: f64,
    window: usize,
) -> Result<MultiViewLatent, DiffusionError> {
    let cfg = &model.cfg;
    let n = latent_views.len();
    let hw = cfg.grid_h * cfg.grid_w;
    let d = cfg.latent_channels;
    let caa_index = cfg.caa.then(|| CaaIndex::build(latent_views, eps_z, window));
    let geos: Vec<Array3<f64>> = latent_views
        .iter()
        .map(|v| geometry_conditioning(v))
        .collect();

    let mut rng = stream(seed, "sample.noise", 0);
    let z1 = Array2::<f64>::from_shape_fn((n * hw, d), |_| normal(&mut rng));

    let velocity = |z: &Array2<f64>, t: f64, style: Option<usize>| {
        // stitch the latent part with geometry conditioning per token
        let mut tokens = Array2::<f64>::zeros((n * hw, d + GEO_CHANNELS));
        for (vi, geo) in geos.iter().enumerate() {
            for r in 0..cfg.grid_h {
                for c in 0..cfg.grid_w {
                    let row = vi * hw + r * cfg.grid_w + c;
                    for ch in 0..d {
                        tokens[(row, ch)] = z[(row, ch)];
                    }
                    for ch in 0..GEO_CHANNELS {
                        tokens[(row, d + ch)] = geo[(ch, r, c)];
                    }
                }
            }
        }
        model.velocity(&tokens, t, style, n, caa_index.as_ref())
    };
    let z0 = euler_sample(velocity, z1, style, steps, cfg_scale)?;
    let latents = tokens_to_latents(
        &z0,
        n,
        (cfg.grid_h, cfg.grid_w),
        &cfg.latent_mean,
        &cfg.latent_std,
    );
    Ok(MultiViewLatent {
        latents,
        view_ids: (0..n).collect(),
        style_id: style,
        geometry: geos,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{canonical_rig, rasterize, sphere};

    fn toy_cfg(caa: bool, grid: usize, d: usize) -> ModelConfig {
        ModelConfig {
            width: 16,
            blocks: 2,
            heads: 2,
            latent_channels: d,
            num_styles: 3,
            grid_h: grid,
            grid_w: grid,
            caa,
            caa_blocks: Vec::new(),
            latent_mean: vec![0.0; d],
            latent_std: vec![1.0; d],
        }
    }

    fn toy_tokens(n_views: usize, grid: usize, d: usize, seed: u64) -> Array2<f64> {
        let mut rng = stream(seed, "test.tokens", 0);
        Array2::from_shape_fn((n_views * grid * grid, d + GEO_CHANNELS), |_| {
            rng.gen_range(-1.0..1.0)
        })
    }

    fn toy_index(n_views: usize, grid: usize, seed: u64) -> CaaIndex {
        // random sparse cross-view sets, never self-view
        let mut rng = stream(seed, "test.caaidx", 0);
        let hw = grid * grid;
        let neighbors = (0..n_views * hw)
            .map(|tok| {
                let view = tok / hw;
                let count = rng.gen_range(0..4);
                (0..count)
                    .map(|_| {
                        let mut other = rng.gen_range(0..n_views - 1);
                        if other >= view {
                            other += 1;
                        }
                        other * hw + rng.gen_range(0..hw)
                    })
                    .collect()
            })
            .collect();
        CaaIndex {
            neighbors,
            n_views,
            grid: (grid, grid),
        }
    }

    #[test]
    fn flow_point_endpoints_are_exact() {
        let z = Array2::from_shape_fn((6, 4), |(i, j)| (i * 4 + j) as f64 * 0.1);
        let eps = Array2::from_shape_fn((6, 4), |(i, j)| 1.0 - (i + j) as f64 * 0.05);
        let (z0, u0) = flow_point(&z, &eps, 0.0).unwrap();
        assert_eq!(z0, z);
        let (z1, _) = flow_point(&z, &eps, 1.0).unwrap();
        assert_eq!(z1, eps);
        assert_eq!(u0, &eps - &z);
        assert!(flow_point(&z, &eps, 1.5).is_err());
    }

    #[test]
    fn cfm_loss_zero_for_oracle_prediction() {
        let z = Array2::from_shape_fn((8, 3), |(i, j)| (i + j) as f64 * 0.2 - 1.0);
        let eps = Array2::from_shape_fn((8, 3), |(i, j)| (i as f64 - j as f64) * 0.3);
        let (_, ut) = flow_point(&z, &eps, 0.4).unwrap();
        let t = Tape::new();
        let pred = t.constant(ut.clone().into_dyn());
        assert_eq!(t.scalar(cfm_loss(&t, pred, &ut)), 0.0);
    }

    /// Reference forward with every attention as an explicit per-token loop.
    fn naive_forward(
        model: &VelocityModel,
        tokens: &Array2<f64>,
        time: f64,
        style: Option<usize>,
        _n_views: usize,
        caa: Option<&CaaIndex>,
    ) -> Array2<f64> {
        let cfg = &model.cfg;
        let p = &model.params;
        let total = tokens.nrows();
        let w = cfg.width;
        let hw = cfg.grid_h * cfg.grid_w;
        let linear = |name: &str, x: &Array2<f64>| -> Array2<f64> {
            let wm = p.get(&format!("{name}.w"));
            let wm = wm.view().into_dimensionality::<ndarray::Ix2>().unwrap();
            let b = p.get(&format!("{name}.b"));
            let mut out = x.dot(&wm);
            for mut row in out.rows_mut() {
                for (j, v) in row.iter_mut().enumerate() {
                    *v += b[IxDyn(&[j])];
                }
            }
            out
        };
        let layernorm = |name: &str, x: &Array2<f64>| -> Array2<f64> {
            let g = p.get(&format!("{name}.g"));
            let b = p.get(&format!("{name}.b"));
            let mut out = x.clone();
            for mut row in out.rows_mut() {
                let mean = row.sum() / row.len() as f64;
                let var =
                    row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / row.len() as f64;
                let rstd = 1.0 / (var + 1e-5).sqrt();
                for (j, v) in row.iter_mut().enumerate() {
                    *v = (*v - mean) * rstd * g[IxDyn(&[j])] + b[IxDyn(&[j])];
                }
            }
            out
        };
        let silu = |x: &Array2<f64>| x.mapv(|v| v / (1.0 + (-v).exp()));

        let mut x = linear("in_proj", tokens);
        let pos = p.get("pos_emb");
        for row in 0..total {
            for j in 0..w {
                x[(row, j)] += pos[IxDyn(&[row % hw, j])];
            }
        }
        let t_feat = sinusoidal_t(time);
        let temb = linear("t_mlp2", &silu(&linear("t_mlp1", &t_feat)));
        let semb = p.get("style_emb.w");
        let srow = style.unwrap_or(cfg.num_styles);
        for row in 0..total {
            for j in 0..w {
                x[(row, j)] += temb[(0, j)] + semb[IxDyn(&[srow, j])];
            }
        }
        let dh = w / cfg.heads;
        for b in 0..cfg.blocks {
            let n = |s: &str| format!("blk{b}.{s}");
            let normed = layernorm(&n("ln1"), &x);
            let qkv = linear(&n("qkv"), &normed);
            let mut merged = Array2::<f64>::zeros((total, w));
            for hd in 0..cfg.heads {
                for ti in 0..total {
                    let mut scores = vec![0.0f64; total];
                    for (tj, slot) in scores.iter_mut().enumerate() {
                        let mut s = 0.0;
                        for k in 0..dh {
                            s += qkv[(ti, hd * dh + k)] * qkv[(tj, w + hd * dh + k)];
                        }
                        *slot = s / (dh as f64).sqrt();
                    }
                    let m = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    let mut sum = 0.0;
                    for s in scores.iter_mut() {
                        *s = (*s - m).exp();
                        sum += *s;
                    }
                    for (tj, s) in scores.iter().enumerate() {
                        let pij = s / sum;
                        for k in 0..dh {
                            merged[(ti, hd * dh + k)] += pij * qkv[(tj, 2 * w + hd * dh + k)];
                        }
                    }
                }
            }
            let attn = linear(&n("proj"), &merged);
            x = &x + &attn;

            if cfg.block_has_caa(b) {
                if let Some(index) = caa {
                    let cn = layernorm(&n("caa_ln"), &x);
                    let q = linear(&n("caa_q"), &cn);
                    let k = linear(&n("caa_k"), &cn);
                    let v = linear(&n("caa_v"), &cn);
                    let mut gathered = Array2::<f64>::zeros((total, w));
                    for ti in 0..total {
                        let cand = &index.neighbors[ti];
                        if cand.is_empty() {
                            continue;
                        }
                        let mut scores: Vec<f64> = cand
                            .iter()
                            .map(|&cj| {
                                (0..w).map(|kk| q[(ti, kk)] * k[(cj, kk)]).sum::<f64>()
                                    / (w as f64).sqrt()
                            })
                            .collect();
                        let m = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                        let mut sum = 0.0;
                        for s in scores.iter_mut() {
                            *s = (*s - m).exp();
                            sum += *s;
                        }
                        for (s, &cj) in scores.iter().zip(cand.iter()) {
                            let pij = s / sum;
                            for kk in 0..w {
                                gathered[(ti, kk)] += pij * v[(cj, kk)];
                            }
                        }
                    }
                    let o = linear(&n("caa_o"), &gathered);
                    x = &x + &o;
                }
            }
            let n2 = layernorm(&n("ln2"), &x);
            let m2 = linear(&n("mlp2"), &silu(&linear(&n("mlp1"), &n2)));
            x = &x + &m2;
        }
        let fln = layernorm("final_ln", &x);
        linear("head", &fln)
    }

    #[test]
    fn dense_attention_matches_naive_reference() {
        let cfg = toy_cfg(false, 3, 2);
        let model = VelocityModel::init(cfg, 5);
        let tokens = toy_tokens(2, 3, 2, 1);
        let out = model.velocity(&tokens, 0.3, Some(1), 2, None).unwrap();
        let naive = naive_forward(&model, &tokens, 0.3, Some(1), 2, None);
        let max_err = (&out - &naive).iter().fold(0.0f64, |a, &x| a.max(x.abs()));
        assert!(max_err < 1e-5, "dense forward mismatch {max_err}");
    }

    #[test]
    fn caa_matches_bruteforce_on_toy_instances() {
        let mut worst = 0.0f64;
        for inst in 0..10u64 {
            let n_views = 2 + (inst as usize % 2);
            let grid = 3 + (inst as usize % 2);
            let cfg = toy_cfg(true, grid, 2);
            let mut model = VelocityModel::init(cfg, 100 + inst);
            // non-zero caa output so the branch actually contributes
            let mut rng = stream(inst, "test.caaw", 0);
            for b in 0..model.cfg.blocks {
                let name = format!("blk{b}.caa_o.w");
                let w = model.params.get_mut(&name);
                w.mapv_inplace(|_| rng.gen_range(-0.3..0.3));
            }
            let tokens = toy_tokens(n_views, grid, 2, inst);
            let index = toy_index(n_views, grid, inst);
            let out = model
                .velocity(&tokens, 0.5, Some(0), n_views, Some(&index))
                .unwrap();
            let naive = naive_forward(&model, &tokens, 0.5, Some(0), n_views, Some(&index));
            let max_err = (&out - &naive).iter().fold(0.0f64, |a, &x| a.max(x.abs()));
            worst = worst.max(max_err);
        }
        assert!(worst < 1e-5, "caa mismatch {worst}");
    }

    #[test]
    fn zero_init_caa_changes_nothing() {
        let grid = 3;
        let cfg_on = toy_cfg(true, grid, 2);
        let mut cfg_off = cfg_on.clone();
        cfg_off.caa = false;
        let model_on = VelocityModel::init(cfg_on, 9);
        let model_off = VelocityModel::init(cfg_off, 9);
        let tokens = toy_tokens(2, grid, 2, 2);
        let index = toy_index(2, grid, 3);
        let a = model_on
            .velocity(&tokens, 0.7, Some(2), 2, Some(&index))
            .unwrap();
        let b = model_off.velocity(&tokens, 0.7, Some(2), 2, None).unwrap();
        let max_err = (&a - &b).iter().fold(0.0f64, |acc, &x| acc.max(x.abs()));
        assert_eq!(max_err, 0.0, "zero-init branch must be a numeric no-op");
    }

    #[test]
    fn view_permutation_permutes_outputs() {
        let grid = 3;
        let cfg = toy_cfg(true, grid, 2);
        let mut model = VelocityModel::init(cfg, 11);
        let mut rng = stream(4, "test.caaw2", 0);
        for b in 0..model.cfg.blocks {
            let name = format!("blk{b}.caa_o.w");
            model
                .params
                .get_mut(&name)
                .mapv_inplace(|_| rng.gen_range(-0.2..0.2));
        }
        let hw = grid * grid;
        let tokens = toy_tokens(3, grid, 2, 7);
        let index = toy_index(3, grid, 8);
        let out = model
            .velocity(&tokens, 0.2, Some(0), 3, Some(&index))
            .unwrap();

        let order = [2usize, 0, 1];
        let mut tokens_p = tokens.clone();
        for (new_v, &old_v) in order.iter().enumerate() {
            for pix in 0..hw {
                for ch in 0..tokens.ncols() {
                    tokens_p[(new_v * hw + pix, ch)] = tokens[(old_v * hw + pix, ch)];
                }
            }
        }
        let index_p = index.permuted(&order);
        let out_p = model
            .velocity(&tokens_p, 0.2, Some(0), 3, Some(&index_p))
            .unwrap();
        for (new_v, &old_v) in order.iter().enumerate() {
            for pix in 0..hw {
                for ch in 0..out.ncols() {
                    let a = out_p[(new_v * hw + pix, ch)];
                    let b = out[(old_v * hw + pix, ch)];
                    assert!((a - b).abs() < 1e-10, "permutation equivariance violated");
                }
            }
        }
    }

    #[test]
    fn single_view_reduces_to_self_attention() {
        let cfg = toy_cfg(false, 4, 2);
        let model = VelocityModel::init(cfg, 13);
        let tokens = toy_tokens(1, 4, 2, 9);
        let out = model.velocity(&tokens, 0.9, None, 1, None).unwrap();
        let naive = naive_forward(&model, &tokens, 0.9, None, 1, None);
        let max_err = (&out - &naive).iter().fold(0.0f64, |a, &x| a.max(x.abs()));
        assert!(max_err < 1e-5);
    }

    #[test]
    fn cfm_gradient_matches_finite_differences() {
        use crate::autodiff::gradcheck;
        let cfg = toy_cfg(true, 3, 2);
        let mut model = VelocityModel::init(cfg, 17);
        {
            // zero-init output layers block upstream gradients; perturb them
            let mut wrng = stream(55, "test.headw", 0);
            for name in ["head.w", "head.b", "blk0.caa_o.w", "blk1.caa_o.w"] {
                model
                    .params
                    .get_mut(name)
                    .mapv_inplace(|_| wrng.gen_range(-0.2..0.2));
            }
        }
        let tokens = toy_tokens(2, 3, 2, 11);
        let index = toy_index(2, 3, 12);
        let z = Array2::from_shape_fn((tokens.nrows(), 2), |(i, j)| ((i * 3 + j) as f64 * 0.37).sin());
        let eps =
            Array2::from_shape_fn((tokens.nrows(), 2), |(i, j)| ((i + 2 * j) as f64 * 0.21).cos());
        let (zt, ut) = flow_point(&z, &eps, 0.6).unwrap();
        let mut with_noise = tokens.clone();
        for row in 0..tokens.nrows() {
            for ch in 0..2 {
                with_noise[(row, ch)] = zt[(row, ch)];
            }
        }

        let eval = |params: &ParamStore, want: bool| -> (f64, Option<Vec<Option<ArrayD<f64>>>>) {
            let m = VelocityModel {
                cfg: model.cfg.clone(),
                params: params.clone(),
            };
            let t = Tape::new();
            let bound = params.bind(&t);
            let tok = t.constant(with_noise.clone().into_dyn());
            let pred = m
                .forward(&t, &bound, tok, 0.6, Some(1), 2, Some(&index))
                .unwrap();
            let loss = cfm_loss(&t, pred, &ut);
            let v = t.scalar(loss);
            if want {
                let grads = t.backward(loss);
                (v, Some(collect_grads(&bound, params, &grads)))
            } else {
                (v, None)
            }
        };
        let params = model.params.clone();
        let (_, grads) = eval(&params, true);
        let grads = grads.unwrap();
        let names: Vec<&str> = params.names().collect();
        let mut rng = stream(19, "test.pick2", 0);
        let mut checked = 0;
        for _ in 0..10 {
            let pi = rng.gen_range(0..names.len());
            let name = names[pi];
            let Some(g) = &grads[pi] else { continue };
            let len = params.get(name).len();
            let flat = rng.gen_range(0..len);
            let analytic = g.as_slice().unwrap()[flat];
            if analytic == 0.0 {
                continue; // params with no gradient path at this input
            }
            let x0 = params.get(name).as_slice().unwrap()[flat];
            let numeric = gradcheck::central(
                |v| {
                    let mut p2 = params.clone();
                    p2.get_mut(name).as_slice_mut().unwrap()[flat] = v;
                    eval(&p2, false).0
                },
                x0,
                1e-5 * x0.abs().max(1.0),
            );
            let rel = gradcheck::relative_error(analytic, numeric);
            assert!(rel <= 1e-3, "{name}[{flat}]: rel {rel}");
            checked += 1;
        }
        assert!(checked >= 4, "too few checked: {checked}");
    }

    #[test]
    fn analytic_linear_field_recovers_target_in_one_step() {
        let z_true = Array2::from_shape_fn((12, 3), |(i, j)| (i as f64 - j as f64) * 0.1);
        let mut rng = stream(23, "test.euler", 0);
        let eps = Array2::from_shape_fn((12, 3), |_| normal(&mut rng));
        // with the data point known, the path's velocity is (z_t - z) / t
        let field = |z: &Array2<f64>, t: f64, _style: Option<usize>| Ok((z - &z_true) / t);
        let z0 = euler_sample(field, eps.clone(), 0, 1, 1.0).unwrap();
        let max_err = (&z0 - &z_true).iter().fold(0.0f64, |a, &x| a.max(x.abs()));
        assert!(max_err < 1e-12, "one Euler step must land exactly: {max_err}");

        // the path is linear, so any step count lands on the target
        let z0b = euler_sample(field, eps, 0, 7, 1.0).unwrap();
        let max_err_b = (&z0b - &z_true).iter().fold(0.0f64, |a, &x| a.max(x.abs()));
        assert!(max_err_b < 1e-10);
    }

    #[test]
    fn cfg_scale_one_skips_unconditional_branch() {
        let mut uncond_calls = 0usize;
        let field = |z: &Array2<f64>, _t: f64, style: Option<usize>| {
            if style.is_none() {
                uncond_calls += 1;
            }
            Ok(z.clone())
        };
        let z1 = Array2::<f64>::ones((4, 2));
        euler_sample(field, z1.clone(), 0, 5, 1.0).unwrap();
        assert_eq!(uncond_calls, 0);

        let mut uncond_calls2 = 0usize;
        let field2 = |z: &Array2<f64>, _t: f64, style: Option<usize>| {
            if style.is_none() {
                uncond_calls2 += 1;
            }
            Ok(z.clone())
        };
        euler_sample(field2, z1, 0, 5, 4.0).unwrap();
        assert_eq!(uncond_calls2, 5);
    }

    #[test]
    fn sampler_rejects_zero_steps() {
        let field = |z: &Array2<f64>, _t: f64, _s: Option<usize>| Ok(z.clone());
        assert!(matches!(
            euler_sample(field, Array2::<f64>::zeros((2, 2)), 0, 0, 1.0),
            Err(DiffusionError::NoSteps)
        ));
    }

    #[test]
    fn caa_index_respects_bounds_and_no_self_view() {
        let mesh = sphere(0.9, 24, 12);
        let mut rig = canonical_rig(1.0, 32);
        for v in rig.iter_mut() {
            rasterize(&mesh, v);
        }
        let latent: Vec<CameraView> = rig.iter().map(|v| downsample_view(v, 4)).collect();
        let refs: Vec<&CameraView> = latent.iter().collect();
        let index = CaaIndex::build(&refs, 1e-2, 3);
        let hw = 8 * 8;
        assert_eq!(index.tokens(), 6 * hw);
        assert!(index.max_count() <= 5 * 9);
        for (tok, neigh) in index.neighbors.iter().enumerate() {
            let view = tok / hw;
            for &nb in neigh {
                assert_ne!(nb / hw, view, "self-view correspondence");
                assert!(nb < 6 * hw);
            }
        }
        // a sphere seen from six sides has plenty of cross-view overlap
        let nonempty = index.neighbors.iter().filter(|n| !n.is_empty()).count();
        assert!(nonempty > hw);
    }

    #[test]
    fn training_smoke_loss_decreases_and_sampling_is_reproducible() {
        // tiny latent dataset bypassing the VAE: two "styles" with distinct
        // constant latents
        let grid = 4;
        let d = 2;
        let mesh = sphere(0.9, 16, 8);
        let mut rig = canonical_rig(1.0, grid * 4);
        for v in rig.iter_mut() {
            rasterize(&mesh, v);
        }
        let latent_cams: Vec<CameraView> = rig.iter().map(|v| downsample_view(v, 4)).collect();
        let records: Vec<DiffusionRecordData> = (0..2)
            .map(|style| DiffusionRecordData {
                style_id: style,
                views: latent_cams
                    .iter()
                    .map(|cam| DiffusionViewData {
                        mean: Array3::from_elem(
                            (d, grid, grid),
                            if style == 0 { -0.8 } else { 0.8 },
                        ),
                        logvar: Array3::from_elem((d, grid, grid), -6.0),
                        geo: geometry_conditioning(cam),
                        latent_cam: cam.clone(),
                    })
                    .collect(),
            })
            .collect();
        let tc = DiffusionTrainConfig {
            steps: 60,
            batch: 1,
            views_per_iter: 2,
            lr: 3e-3,
            width: 16,
            blocks: 1,
            heads: 2,
            caa: true,
            caa_blocks: Vec::new(),
            cond_dropout: 0.1,
            eps_z: 1e-2,
            window: 3,
            ckpt_every: 0,
        };
        let mut losses = Vec::new();
        let model =
            train_diffusion(&records, 2, &tc, 31, |_, l| losses.push(l), |_, _| {}).unwrap();
        let head = losses[..12].iter().sum::<f64>() / 12.0;
        let tail = losses[losses.len() - 12..].iter().sum::<f64>() / 12.0;
        assert!(tail < head, "loss should decrease: head {head}, tail {tail}");

        let refs: Vec<&CameraView> = latent_cams.iter().take(2).collect();
        let a = sample(&model, &refs, 0, 8, 4.0, 77, 1e-2, 3).unwrap();
        let b = sample(&model, &refs, 0, 8, 4.0, 77, 1e-2, 3).unwrap();
        for (x, y) in a.latents.iter().zip(b.latents.iter()) {
            assert_eq!(x, y, "sampling must be reproducible for a fixed seed");
        }
        let c = sample(&model, &refs, 0, 8, 4.0, 78, 1e-2, 3).unwrap();
        assert_ne!(a.latents[0], c.latents[0]);
    }

    #[test]
    fn model_save_load_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = toy_cfg(true, 3, 2);
        let model = VelocityModel::init(cfg, 41);
        model.save(dir.path()).unwrap();
        let back = VelocityModel::load(dir.path()).unwrap();
        assert_eq!(back.cfg, model.cfg);
        assert_eq!(back.params.content_hash(), model.params.content_hash());
    }
}
