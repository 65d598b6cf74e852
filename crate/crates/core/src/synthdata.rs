//! Procedural PBR dataset: styles, textures, multi-view renders, storage.
//!
//! Albedo patterns get per-record color jitter for diversity; roughness and
//! metallic take piecewise-constant values fixed per style, so the material
//! channels of a generated sample can be scored sharply against ground
//! truth. Everything is a pure function of `(config, seed)`.

use std::path::{Path, PathBuf};

use ndarray::{Array2, Array3};
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::arrayio::{ArrayIoError, Container};
use crate::baking::UvTexture;
use crate::config::Config;
use crate::geometry::{by_name, rasterize, ring_rig, CameraView, Mesh};
use crate::rng::stream;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("unknown style id {0}")]
    UnknownStyle(usize),
    #[error("unknown mesh name {0:?}")]
    UnknownMesh(String),
    #[error("mesh has no UV atlas")]
    MissingUv,
    #[error("texture resolution {0} too small (minimum 16)")]
    Resolution(usize),
    #[error(transparent)]
    Io(#[from] ArrayIoError),
    #[error("manifest error at {path}: {reason}")]
    Manifest { path: PathBuf, reason: String },
    #[error(transparent)]
    Config(#[from] crate::config::ConfigError),
}

/// Five-channel material image for one view.
#[derive(Debug, Clone)]
pub struct PbrImage {
    /// `(H, W, 3)` in `[0,1]`.
    pub albedo: Array3<f64>,
    /// `(H, W)` in `[0,1]`.
    pub rough: Array2<f64>,
    pub metal: Array2<f64>,
    pub mask: Array2<bool>,
}

impl PbrImage {
    pub fn height(&self) -> usize {
        self.mask.nrows()
    }

    pub fn width(&self) -> usize {
        self.mask.ncols()
    }

    /// Fetch channel `c` (0-2 albedo, 3 rough, 4 metal) at a pixel.
    pub fn channel(&self, c: usize, row: usize, col: usize) -> f64 {
        match c {
            0 | 1 | 2 => self.albedo[(row, col, c)],
            3 => self.rough[(row, col)],
            4 => self.metal[(row, col)],
            _ => panic!("channel {c} out of range"),
        }
    }

    /// All channels in range and zero outside the mask.
    pub fn validate(&self) -> bool {
        let (h, w) = self.mask.dim();
        for row in 0..h {
            for col in 0..w {
                for c in 0..5 {
                    let v = self.channel(c, row, col);
                    if !(0.0..=1.0).contains(&v) {
                        return false;
                    }
                    if !self.mask[(row, col)] && v != 0.0 {
                        return false;
                    }
                }
            }
        }
        true
    }

    pub fn zeros(h: usize, w: usize) -> Self {
        Self {
            albedo: Array3::zeros((h, w, 3)),
            rough: Array2::zeros((h, w)),
            metal: Array2::zeros((h, w)),
            mask: Array2::from_elem((h, w), false),
        }
    }
}

/// Pattern family of a style.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Pattern {
    Uniform,
    StripesU,
    StripesV,
    Checker,
    Noise,
}

/// One procedural material program.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MaterialStyle {
    pub style_id: usize,
    pub pattern: Pattern,
    /// Cells per unit UV for stripes; half-cells for checker.
    pub frequency: usize,
    pub color_a: [f64; 3],
    pub color_b: [f64; 3],
    pub rough_a: f64,
    pub rough_b: f64,
    pub metal_a: f64,
    pub metal_b: f64,
    pub noise_seed: u64,
}

/// Number of built-in styles.
pub const NUM_STYLES: usize = 8;

impl MaterialStyle {
    /// Instantiate style `style_id` with per-record color jitter drawn from
    /// `seed`. Material values (roughness/metallic) are fixed per style so
    /// they are predictable from the style alone.
    pub fn new(style_id: usize, seed: u64) -> Result<Self, DataError> {
        if style_id >= NUM_STYLES {
            return Err(DataError::UnknownStyle(style_id));
        }
        let mut rng = stream(seed, "style.jitter", style_id as u64);
        let mut jitter = |base: [f64; 3]| -> [f64; 3] {
            let mut out = base;
            for v in out.iter_mut() {
                *v = (*v + rng.gen_range(-0.08..0.08)).clamp(0.05, 0.95);
            }
            out
        };
        let (pattern, frequency, ca, cb, ra, rb, ma, mb) = match style_id {
            0 => (Pattern::Uniform, 1, [0.5, 0.5, 0.5], [0.5, 0.5, 0.5], 1.0, 1.0, 0.0, 0.0),
            1 => (Pattern::StripesU, 6, [0.8, 0.25, 0.2], [0.9, 0.85, 0.3], 0.2, 0.9, 0.0, 1.0),
            2 => (Pattern::Checker, 4, [0.15, 0.3, 0.8], [0.9, 0.9, 0.9], 0.3, 0.7, 1.0, 0.0),
            3 => (Pattern::StripesV, 8, [0.2, 0.7, 0.3], [0.1, 0.2, 0.15], 0.15, 0.6, 0.8, 0.1),
            4 => (Pattern::Noise, 4, [0.7, 0.5, 0.3], [0.3, 0.2, 0.15], 0.25, 0.85, 0.0, 0.9),
            5 => (Pattern::Checker, 2, [0.85, 0.7, 0.2], [0.25, 0.1, 0.4], 0.5, 0.1, 0.9, 0.2),
            6 => (Pattern::StripesV, 5, [0.6, 0.6, 0.9], [0.95, 0.4, 0.1], 0.35, 0.75, 0.05, 0.95),
            7 => (Pattern::Noise, 7, [0.4, 0.8, 0.8], [0.15, 0.25, 0.5], 0.7, 0.2, 0.3, 1.0),
            _ => unreachable!(),
        };
        Ok(Self {
            style_id,
            pattern,
            frequency,
            color_a: jitter(ca),
            color_b: jitter(cb),
            rough_a: ra,
            rough_b: rb,
            metal_a: ma,
            metal_b: mb,
            noise_seed: crate::rng::derive_seed(seed, "style.noise", style_id as u64),
        })
    }

    /// Pattern selector in `{0, 1}` at a UV position.
    fn select(&self, u: f64, v: f64, noise: Option<&ValueNoise>) -> bool {
        match self.pattern {
            Pattern::Uniform => false,
            Pattern::StripesU => ((u * self.frequency as f64).floor() as i64) % 2 != 0,
            Pattern::StripesV => ((v * self.frequency as f64).floor() as i64) % 2 != 0,
            Pattern::Checker => {
                let n = 2 * self.frequency;
                let cu = (u * n as f64).floor() as i64;
                let cv = (v * n as f64).floor() as i64;
                (cu + cv) % 2 != 0
            }
            Pattern::Noise => noise.expect("noise table required").at(u, v) > 0.5,
        }
    }
}

/// Tileable 2-D value noise on an `n x n` lattice.
struct ValueNoise {
    n: usize,
    values: Vec<f64>,
}

impl ValueNoise {
    fn new(n: usize, seed: u64) -> Self {
        let mut rng = stream(seed, "value-noise", 0);
        let values = (0..n * n).map(|_| rng.gen_range(0.0..1.0)).collect();
        Self { n, values }
    }

    fn at(&self, u: f64, v: f64) -> f64 {
        let n = self.n as f64;
        let x = (u.rem_euclid(1.0)) * n;
        let y = (v.rem_euclid(1.0)) * n;
        let x0 = x.floor() as usize % self.n;
        let y0 = y.floor() as usize % self.n;
        let x1 = (x0 + 1) % self.n;
        let y1 = (y0 + 1) % self.n;
        let fx = x - x.floor();
        let fy = y - y.floor();
        // smoothstep fade
        let fx = fx * fx * (3.0 - 2.0 * fx);
        let fy = fy * fy * (3.0 - 2.0 * fy);
        let g = |i: usize, j: usize| self.values[j * self.n + i];
        let a = g(x0, y0) * (1.0 - fx) + g(x1, y0) * fx;
        let b = g(x0, y1) * (1.0 - fx) + g(x1, y1) * fx;
        a * (1.0 - fy) + b * fy
    }
}

/// Ground-truth texture for a style over the UV domain.
pub fn make_texture(style: &MaterialStyle, mesh: &Mesh, resolution: usize) -> Result<UvTexture, DataError> {
    if resolution < 16 {
        return Err(DataError::Resolution(resolution));
    }
    if !mesh.has_uv() {
        return Err(DataError::MissingUv);
    }
    let noise = match style.pattern {
        Pattern::Noise => Some(ValueNoise::new(style.frequency, style.noise_seed)),
        _ => None,
    };
    let mut data = Array3::<f64>::zeros((5, resolution, resolution));
    for row in 0..resolution {
        let v = (row as f64 + 0.5) / resolution as f64;
        for col in 0..resolution {
            let u = (col as f64 + 0.5) / resolution as f64;
            let b = style.select(u, v, noise.as_ref());
            let (color, rough, metal) = if b {
                (style.color_b, style.rough_b, style.metal_b)
            } else {
                (style.color_a, style.rough_a, style.metal_a)
            };
            for c in 0..3 {
                data[(c, row, col)] = color[c];
            }
            data[(3, row, col)] = rough;
            data[(4, row, col)] = metal;
        }
    }
    Ok(UvTexture {
        resolution,
        data,
        coverage: Array2::from_elem((resolution, resolution), true),
        provenance: Array2::from_elem((resolution, resolution), -1),
    })
}

/// One dataset record: a mesh, its style, all rendered views, ground truth.
#[derive(Debug, Clone)]
pub struct MultiViewRecord {
    pub mesh_id: String,
    pub style: MaterialStyle,
    pub seed: u64,
    pub views: Vec<(CameraView, PbrImage)>,
    pub texture: UvTexture,
}

/// Render the texture onto every (rasterized) view of the rig.
pub fn render_record(
    mesh_id: &str,
    mesh: &Mesh,
    style: &MaterialStyle,
    seed: u64,
    texture: &UvTexture,
    rig: &[CameraView],
) -> Result<MultiViewRecord, DataError> {
    if !mesh.has_uv() {
        return Err(DataError::MissingUv);
    }
    let mut views = Vec::with_capacity(rig.len());
    for cam in rig {
        let mut cam = cam.clone();
        if cam.buffers.is_none() {
            rasterize(mesh, &mut cam);
        }
        let img = shade_view(&cam, texture);
        views.push((cam, img));
    }
    Ok(MultiViewRecord {
        mesh_id: mesh_id.to_string(),
        style: style.clone(),
        seed,
        views,
        texture: texture.clone(),
    })
}

/// Sample the texture at the view's rasterized UVs (bilinear).
fn shade_view(cam: &CameraView, texture: &UvTexture) -> PbrImage {
    let buf = cam.buffers();
    let (h, w) = (cam.height, cam.width);
    let mut img = PbrImage::zeros(h, w);
    for row in 0..h {
        for col in 0..w {
            if !buf.mask[(row, col)] {
                continue;
            }
            img.mask[(row, col)] = true;
            let u = buf.uv[(row, col, 0)];
            let v = buf.uv[(row, col, 1)];
            let texel = texture.sample_bilinear(u, v);
            for c in 0..3 {
                img.albedo[(row, col, c)] = texel[c].clamp(0.0, 1.0);
            }
            img.rough[(row, col)] = texel[3].clamp(0.0, 1.0);
            img.metal[(row, col)] = texel[4].clamp(0.0, 1.0);
        }
    }
    img
}

// ----------------------------------------------------------------- storage

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RecordEntry {
    pub id: usize,
    pub mesh: String,
    pub style_id: usize,
    pub seed: u64,
    pub path: String,
    pub sha256: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub version: u32,
    pub seed: u64,
    pub image_size: usize,
    pub texture_size: usize,
    pub ring_views: usize,
    pub ring_elevations: usize,
    pub ortho_scale: f64,
    pub num_styles: usize,
    pub meshes: Vec<String>,
    pub seeds_per_combo: usize,
    pub records: Vec<RecordEntry>,
}

/// Generate the dataset described by `cfg` under `root`.
pub fn generate_dataset(cfg: &Config, root: &Path, master_seed: u64) -> Result<DatasetManifest, DataError> {
    let image_size = cfg.usize("data.image_size")?;
    let texture_size = cfg.usize("data.texture_size")?;
    let ring_views = cfg.usize("data.ring_views")?;
    let ring_elevations = cfg.usize("data.ring_elevations")?;
    let ortho_scale = cfg.f64("data.ortho_scale")?;
    let num_styles = cfg.usize("data.num_styles")?.min(NUM_STYLES);
    let seeds_per_combo = cfg.usize("data.seeds_per_combo")?;
    let mesh_names: Vec<String> = cfg
        .str("data.meshes")?
        .split(',')
        .map(|s| s.trim().to_string())
        .filter(|s| !s.is_empty())
        .collect();

    std::fs::create_dir_all(root.join("records")).map_err(|e| DataError::Manifest {
        path: root.to_path_buf(),
        reason: e.to_string(),
    })?;

    let mut meshes = Vec::new();
    for name in &mesh_names {
        let mesh = by_name(name).ok_or_else(|| DataError::UnknownMesh(name.clone()))?;
        meshes.push((name.clone(), mesh));
    }

    // rasterize the rig once per mesh and reuse across styles/seeds
    let rig = ring_rig(ring_views, ring_elevations, ortho_scale, image_size);
    let mut rigs_per_mesh = Vec::new();
    for (_, mesh) in &meshes {
        let mut views = rig.clone();
        for v in views.iter_mut() {
            rasterize(mesh, v);
        }
        rigs_per_mesh.push(views);
    }

    let mut records = Vec::new();
    let mut id = 0usize;
    for style_id in 0..num_styles {
        for (mi, (mesh_name, mesh)) in meshes.iter().enumerate() {
            for _ in 0..seeds_per_combo {
                let rec_seed = crate::rng::derive_seed(master_seed, "data.record", id as u64);
                let style = MaterialStyle::new(style_id, rec_seed)?;
                let texture = make_texture(&style, mesh, texture_size)?;
                let record = render_record(
                    mesh_name,
                    mesh,
                    &style,
                    rec_seed,
                    &texture,
                    &rigs_per_mesh[mi],
                )?;
                let rel = format!("records/rec_{id:05}.bin");
                let path = root.join(&rel);
                write_record(&record, &path)?;
                let sha = crate::arrayio::file_sha256(&path).map_err(|e| DataError::Manifest {
                    path: path.clone(),
                    reason: e.to_string(),
                })?;
                records.push(RecordEntry {
                    id,
                    mesh: mesh_name.clone(),
                    style_id,
                    seed: rec_seed,
                    path: rel,
                    sha256: sha,
                });
                id += 1;
            }
        }
    }

    let manifest = DatasetManifest {
        version: 1,
        seed: master_seed,
        image_size,
        texture_size,
        ring_views,
        ring_elevations,
        ortho_scale,
        num_styles,
        meshes: mesh_names,
        seeds_per_combo,
        records,
    };
    let manifest_path = root.join("manifest.json");
    let json = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    std::fs::write(&manifest_path, json).map_err(|e| DataError::Manifest {
        path: manifest_path,
        reason: e.to_string(),
    })?;
    Ok(manifest)
}

fn write_record(record: &MultiViewRecord, path: &Path) -> Result<(), DataError> {
    let mut c = Container::new();
    c.insert_i64("style.id", ndarray::arr0(record.style.style_id as i64));
    c.insert_i64("style.seed", ndarray::arr0(record.seed as i64));
    c.insert_f64("texture.data", record.texture.data.clone());
    for (vi, (cam, img)) in record.views.iter().enumerate() {
        let p = format!("view{vi:02}");
        let buf = cam.buffers();
        let mut rot = Array2::<f64>::zeros((3, 3));
        for r in 0..3 {
            for cc in 0..3 {
                rot[(r, cc)] = cam.rotation[(r, cc)];
            }
        }
        c.insert_f64(&format!("{p}.cam_r"), rot);
        c.insert_f64(
            &format!("{p}.cam_t"),
            ndarray::arr1(&[cam.translation.x, cam.translation.y, cam.translation.z]),
        );
        c.insert_f64(&format!("{p}.cam_s"), ndarray::arr0(cam.ortho_scale));
        c.insert_f64(&format!("{p}.albedo"), img.albedo.clone());
        c.insert_f64(&format!("{p}.rough"), img.rough.clone());
        c.insert_f64(&format!("{p}.metal"), img.metal.clone());
        c.insert_u8(
            &format!("{p}.mask"),
            img.mask.mapv(|m| if m { 1u8 } else { 0 }),
        );
        c.insert_f64(&format!("{p}.depth"), buf.depth.clone());
        c.insert_f64(&format!("{p}.normal"), buf.normal.clone());
        c.insert_f64(&format!("{p}.position"), buf.position.clone());
        c.insert_f64(&format!("{p}.uv"), buf.uv.clone());
        c.insert_i64(&format!("{p}.face"), buf.face.clone());
    }
    c.write(path)?;
    Ok(())
}

/// Dataset reader over a generated root directory.
#[derive(Debug)]
pub struct Dataset {
    pub root: PathBuf,
    pub manifest: DatasetManifest,
}

impl Dataset {
    pub fn open(root: &Path) -> Result<Self, DataError> {
        let manifest_path = root.join("manifest.json");
        let text = std::fs::read_to_string(&manifest_path).map_err(|e| DataError::Manifest {
            path: manifest_path.clone(),
            reason: e.to_string(),
        })?;
        let manifest: DatasetManifest =
            serde_json::from_str(&text).map_err(|e| DataError::Manifest {
                path: manifest_path.clone(),
                reason: e.to_string(),
            })?;
        if manifest.version != 1 {
            return Err(DataError::Manifest {
                path: manifest_path,
                reason: format!("unsupported dataset version {}", manifest.version),
            });
        }
        Ok(Self {
            root: root.to_path_buf(),
            manifest,
        })
    }

    pub fn len(&self) -> usize {
        self.manifest.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.manifest.records.is_empty()
    }

    /// Load one record, verifying its checksum.
    pub fn record(&self, id: usize) -> Result<MultiViewRecord, DataError> {
        let entry = &self.manifest.records[id];
        let path = self.root.join(&entry.path);
        let c = Container::read(&path)?;
        let style_id = c.i64(&path, "style.id")?[ndarray::IxDyn(&[])] as usize;
        let seed = c.i64(&path, "style.seed")?[ndarray::IxDyn(&[])] as u64;
        let style = MaterialStyle::new(style_id, seed)?;
        let tex_data = c.f64(&path, "texture.data")?.clone();
        let resolution = tex_data.shape()[1];
        let texture = UvTexture {
            resolution,
            data: tex_data.into_dimensionality().unwrap(),
            coverage: Array2::from_elem((resolution, resolution), true),
            provenance: Array2::from_elem((resolution, resolution), -1),
        };

        let mut views = Vec::new();
        for vi in 0..self.manifest.ring_views {
            let p = format!("view{vi:02}");
            let rot = c.f64(&path, &format!("{p}.cam_r"))?;
            let t = c.f64(&path, &format!("{p}.cam_t"))?;
            let s = c.f64(&path, &format!("{p}.cam_s"))?[ndarray::IxDyn(&[])];
            let mut rotation = nalgebra::Matrix3::zeros();
            for r in 0..3 {
                for cc in 0..3 {
                    rotation[(r, cc)] = rot[ndarray::IxDyn(&[r, cc])];
                }
            }
            let translation = nalgebra::Vector3::new(
                t[ndarray::IxDyn(&[0])],
                t[ndarray::IxDyn(&[1])],
                t[ndarray::IxDyn(&[2])],
            );
            let albedo: Array3<f64> = c
                .f64(&path, &format!("{p}.albedo"))?
                .clone()
                .into_dimensionality()
                .unwrap();
            let (h, w) = (albedo.shape()[0], albedo.shape()[1]);
            let mut cam = CameraView::new(rotation, translation, s, w, h);
            let mask_u8: Array2<u8> = c
                .u8(&path, &format!("{p}.mask"))?
                .clone()
                .into_dimensionality()
                .unwrap();
            let img = PbrImage {
                albedo,
                rough: c
                    .f64(&path, &format!("{p}.rough"))?
                    .clone()
                    .into_dimensionality()
                    .unwrap(),
                metal: c
                    .f64(&path, &format!("{p}.metal"))?
                    .clone()
                    .into_dimensionality()
                    .unwrap(),
                mask: mask_u8.mapv(|m| m != 0),
            };
            cam.buffers = Some(crate::geometry::ViewBuffers {
                depth: c
                    .f64(&path, &format!("{p}.depth"))?
                    .clone()
                    .into_dimensionality()
                    .unwrap(),
                normal: c
                    .f64(&path, &format!("{p}.normal"))?
                    .clone()
                    .into_dimensionality()
                    .unwrap(),
                position: c
                    .f64(&path, &format!("{p}.position"))?
                    .clone()
                    .into_dimensionality()
                    .unwrap(),
                uv: c
                    .f64(&path, &format!("{p}.uv"))?
                    .clone()
                    .into_dimensionality()
                    .unwrap(),
                mask: img.mask.clone(),
                face: c
                    .i64(&path, &format!("{p}.face"))?
                    .clone()
                    .into_dimensionality()
                    .unwrap(),
            });
            views.push((cam, img));
        }
        Ok(MultiViewRecord {
            mesh_id: entry.mesh.clone(),
            style,
            seed,
            views,
            texture,
        })
    }

    pub fn load_all(&self) -> Result<Vec<MultiViewRecord>, DataError> {
        (0..self.len()).map(|i| self.record(i)).collect()
    }
}
