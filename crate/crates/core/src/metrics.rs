//! Evaluation metrics: correspondence PSNR, masked material RMSE,
//! latent-distribution shift, and patch-locality error maps.

use ndarray::Array2;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::baking::UvTexture;
use crate::geometry::CorrespondenceMap;
use crate::matvae::{LatentDistribution, MatVae, VaeArch};
use crate::synthdata::PbrImage;

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("no valid correspondence pairs (M = 0)")]
    NoCorrespondences,
    #[error("masks share no covered pixels")]
    DisjointMasks,
    #[error("population too small ({0} < 2)")]
    PopulationTooSmall(usize),
    #[error("need at least two views, got {0}")]
    TooFewViews(usize),
}

/// Which channels a metric runs over.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ChannelSet {
    All,
    Albedo,
    Rough,
    Metal,
}

impl ChannelSet {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "all" => Some(Self::All),
            "albedo" => Some(Self::Albedo),
            "rough" => Some(Self::Rough),
            "metal" => Some(Self::Metal),
            _ => None,
        }
    }

    pub fn channels(&self) -> &'static [usize] {
        match self {
            Self::All => &[0, 1, 2, 3, 4],
            Self::Albedo => &[0, 1, 2],
            Self::Rough => &[3],
            Self::Metal => &[4],
        }
    }
}

/// PSNR cap used when the correspondence MSE is exactly zero.
pub const C_PSNR_CAP_DB: f64 = 99.0;

/// Correspondence PSNR over every ordered view pair.
///
/// The squared error accumulates over all maps in the order given, source
/// pixels in row-major order, then channels; the MSE divides by
/// `pairs * channels`, so a uniform 0.1 offset between two fully
/// corresponding views scores exactly 20 dB.
pub fn c_psnr(
    views: &[PbrImage],
    maps: &[CorrespondenceMap],
    set: ChannelSet,
) -> Result<f64, MetricsError> {
    if views.len() < 2 {
        return Err(MetricsError::TooFewViews(views.len()));
    }
    let channels = set.channels();
    let mut acc = 0.0f64;
    let mut pairs = 0usize;
    for map in maps {
        let src = &views[map.source_view];
        let tgt = &views[map.target_view];
        let (h, w) = (src.height(), src.width());
        for row in 0..h {
            for col in 0..w {
                let Some((tr, tc)) = map.target_of(row, col) else {
                    continue;
                };
                pairs += 1;
                for &c in channels {
                    let d = src.channel(c, row, col) - tgt.channel(c, tr, tc);
                    acc += d * d;
                }
            }
        }
    }
    if pairs == 0 {
        return Err(MetricsError::NoCorrespondences);
    }
    let mse = acc / (pairs * channels.len()) as f64;
    if mse == 0.0 {
        return Ok(C_PSNR_CAP_DB);
    }
    Ok(10.0 * (1.0 / mse).log10())
}

/// Masked roughness / metallic RMSE between matching view lists.
pub fn material_rmse_views(
    generated: &[PbrImage],
    reference: &[PbrImage],
) -> Result<(f64, f64), MetricsError> {
    let mut se_rough = 0.0;
    let mut se_metal = 0.0;
    let mut n = 0usize;
    for (g, r) in generated.iter().zip(reference.iter()) {
        let (h, w) = (g.height(), g.width());
        for row in 0..h {
            for col in 0..w {
                if g.mask[(row, col)] && r.mask[(row, col)] {
                    let dr = g.rough[(row, col)] - r.rough[(row, col)];
                    let dm = g.metal[(row, col)] - r.metal[(row, col)];
                    se_rough += dr * dr;
                    se_metal += dm * dm;
                    n += 1;
                }
            }
        }
    }
    if n == 0 {
        return Err(MetricsError::DisjointMasks);
    }
    Ok(((se_rough / n as f64).sqrt(), (se_metal / n as f64).sqrt()))
}

/// Masked roughness / metallic RMSE between textures (covered texels).
pub fn material_rmse_texture(
    generated: &UvTexture,
    reference: &UvTexture,
) -> Result<(f64, f64), MetricsError> {
    let res = generated.resolution;
    let mut se_rough = 0.0;
    let mut se_metal = 0.0;
    let mut n = 0usize;
    for row in 0..res {
        for col in 0..res {
            if generated.coverage[(row, col)] && reference.coverage[(row, col)] {
                let dr = generated.data[(3, row, col)] - reference.data[(3, row, col)];
                let dm = generated.data[(4, row, col)] - reference.data[(4, row, col)];
                se_rough += dr * dr;
                se_metal += dm * dm;
                n += 1;
            }
        }
    }
    if n == 0 {
        return Err(MetricsError::DisjointMasks);
    }
    Ok(((se_rough / n as f64).sqrt(), (se_metal / n as f64).sqrt()))
}

/// Symmetric KL between per-element Gaussian moment fits of two latent
/// populations, averaged over the grid. Zero when the populations carry
/// identical distributions.
pub fn latent_shift(
    population: &[LatentDistribution],
    base_population: &[LatentDistribution],
) -> Result<f64, MetricsError> {
    if population.len() < 2 {
        return Err(MetricsError::PopulationTooSmall(population.len()));
    }
    if base_population.len() < 2 {
        return Err(MetricsError::PopulationTooSmall(base_population.len()));
    }
    let fit = |pop: &[LatentDistribution]| -> (ndarray::Array3<f64>, ndarray::Array3<f64>) {
        let mut mean = ndarray::Array3::<f64>::zeros(pop[0].mean.raw_dim());
        let mut second = ndarray::Array3::<f64>::zeros(pop[0].mean.raw_dim());
        for d in pop {
            mean += &d.mean;
            // E[z^2] per member = sigma^2 + mu^2
            second += &(&d.logvar.mapv(f64::exp) + &(&d.mean * &d.mean));
        }
        let k = pop.len() as f64;
        mean /= k;
        second /= k;
        let var = &second - &(&mean * &mean);
        (mean, var.mapv(|v| v.max(1e-12)))
    };
    let (m1, v1) = fit(population);
    let (m2, v2) = fit(base_population);
    let mut acc = 0.0;
    let n = m1.len();
    for i in 0..n {
        let (m1i, v1i) = (m1.as_slice().unwrap()[i], v1.as_slice().unwrap()[i]);
        let (m2i, v2i) = (m2.as_slice().unwrap()[i], v2.as_slice().unwrap()[i]);
        let dm2 = (m1i - m2i) * (m1i - m2i);
        acc += 0.5 * (v1i / v2i + v2i / v1i - 2.0) + 0.5 * dm2 * (1.0 / v1i + 1.0 / v2i);
    }
    Ok(acc / n as f64)
}

/// One image's contribution to the latent-shift diagnostic: the material
/// latent (the code the diffusion stage must model) and the base albedo
/// encoding it is compared against. For the frozen scheme the material
/// side is the zero-padded roughness/metallic branch, which is where its
/// domain gap lives.
pub struct LatentShiftSide {
    pub material: LatentDistribution,
    pub base: LatentDistribution,
}

impl LatentShiftSide {
    pub fn of(model: &MatVae, x: &ndarray::Array3<f64>) -> Self {
        match model.variant {
            crate::matvae::Variant::Frozen => {
                let (z_rm, z_a) = crate::matvae::encode_frozen(&model.base, x);
                Self {
                    material: z_rm,
                    base: z_a,
                }
            }
            _ => {
                let (full, base) = model.encode(x);
                Self {
                    material: full,
                    base,
                }
            }
        }
    }
}

/// Per-channel-group locality error maps over a grid of latent crops.
#[derive(Debug, Clone)]
pub struct LocalityMaps {
    /// Per-pixel squared decode error of the covering crop.
    pub albedo: Array2<f64>,
    pub rough: Array2<f64>,
    pub metal: Array2<f64>,
    /// Mean squared error over all crops and channels.
    pub mean: f64,
}

/// Decode each latent tile of `x` in isolation and compare against the
/// matching pixel tile. Uses the mean latent so reports are deterministic.
pub fn locality_error_map(
    model: &MatVae,
    x: &ndarray::Array3<f64>,
    mask: &Array2<bool>,
    crop_size: usize,
) -> LocalityMaps {
    let f = VaeArch::DOWNSAMPLE;
    let (h, w) = (x.shape()[1], x.shape()[2]);
    let (lh, lw) = (h / f, w / f);
    let cs = crop_size.clamp(1, lh.min(lw));
    let (full, _) = model.encode(x);

    let mut albedo = Array2::<f64>::zeros((h, w));
    let mut rough = Array2::<f64>::zeros((h, w));
    let mut metal = Array2::<f64>::zeros((h, w));
    let mut total = 0.0;
    let mut count = 0usize;

    let mut r0 = 0;
    while r0 < lh {
        let rs = cs.min(lh - r0);
        let mut c0 = 0;
        while c0 < lw {
            let csz = cs.min(lw - c0);
            let z_tile = full
                .mean
                .slice(ndarray::s![.., r0..r0 + rs, c0..c0 + csz])
                .to_owned();
            let decoded = model.decode(&z_tile);
            for dr in 0..rs * f {
                for dc in 0..csz * f {
                    let (pr, pc) = (r0 * f + dr, c0 * f + dc);
                    if !mask[(pr, pc)] {
                        continue;
                    }
                    let mut ae = 0.0;
                    for ch in 0..3 {
                        let d = decoded[(ch, dr, dc)] - x[(ch, pr, pc)];
                        ae += d * d;
                        total += d * d;
                        count += 1;
                    }
                    albedo[(pr, pc)] = ae / 3.0;
                    let drr = decoded[(3, dr, dc)] - x[(3, pr, pc)];
                    rough[(pr, pc)] = drr * drr;
                    total += drr * drr;
                    let dmm = decoded[(4, dr, dc)] - x[(4, pr, pc)];
                    metal[(pr, pc)] = dmm * dmm;
                    total += dmm * dmm;
                    count += 2;
                }
            }
            c0 += csz;
        }
        r0 += rs;
    }
    LocalityMaps {
        albedo,
        rough,
        metal,
        mean: if count > 0 { total / count as f64 } else { 0.0 },
    }
}

/// Mean locality error over a set of model-space images.
pub fn mean_locality_error(
    model: &MatVae,
    images: &[(ndarray::Array3<f64>, Array2<bool>)],
    crop_size: usize,
) -> f64 {
    let mut acc = 0.0;
    for (x, mask) in images {
        acc += locality_error_map(model, x, mask, crop_size).mean;
    }
    acc / images.len().max(1) as f64
}

// ----------------------------------------------------------------- report

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RecordEval {
    pub record: String,
    pub c_psnr_db: f64,
    pub rough_rmse: f64,
    pub metal_rmse: f64,
}

/// Evaluation summary; JSON- and CSV-serializable. Embedding-space fields
/// stay reserved for a future plug-in and are never populated here.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalReport {
    pub config_hash: String,
    pub per_record: Vec<RecordEval>,
    pub c_psnr_db: f64,
    pub rough_rmse: f64,
    pub metal_rmse: f64,
    pub latent_shift: f64,
    pub locality_error: f64,
    pub fid_clip: Option<f64>,
    pub kid: Option<f64>,
    pub clip_similarity: Option<f64>,
}

impl EvalReport {
    /// Assemble from per-record rows; aggregates are their means.
    pub fn from_records(
        config_hash: &str,
        per_record: Vec<RecordEval>,
        latent_shift: f64,
        locality_error: f64,
    ) -> Self {
        let n = per_record.len().max(1) as f64;
        let c_psnr_db = per_record.iter().map(|r| r.c_psnr_db).sum::<f64>() / n;
        let rough_rmse = per_record.iter().map(|r| r.rough_rmse).sum::<f64>() / n;
        let metal_rmse = per_record.iter().map(|r| r.metal_rmse).sum::<f64>() / n;
        Self {
            config_hash: config_hash.to_string(),
            per_record,
            c_psnr_db,
            rough_rmse,
            metal_rmse,
            latent_shift,
            locality_error,
            fid_clip: None,
            kid: None,
            clip_similarity: None,
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn from_json(text: &str) -> Option<Self> {
        serde_json::from_str(text).ok()
    }

    pub fn is_finite(&self) -> bool {
        self.c_psnr_db.is_finite()
            && self.rough_rmse.is_finite()
            && self.metal_rmse.is_finite()
            && self.latent_shift.is_finite()
            && self.locality_error.is_finite()
    }

    pub fn csv_header() -> &'static str {
        "record,c_psnr_db,rough_rmse,metal_rmse"
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from(Self::csv_header());
        out.push('\n');
        for r in &self.per_record {
            out.push_str(&format!(
                "{},{},{},{}\n",
                r.record, r.c_psnr_db, r.rough_rmse, r.metal_rmse
            ));
        }
        out.push_str(&format!(
            "aggregate,{},{},{}\n",
            self.c_psnr_db, self.rough_rmse, self.metal_rmse
        ));
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{build_correspondence, look_at, rasterize, sphere, CameraView};
    use nalgebra::Vector3;
    use ndarray::Array3;

    /// Two identical flat views with full mutual correspondence.
    fn flat_pair(size: usize) -> (Vec<CameraView>, Vec<CorrespondenceMap>) {
        let mesh = crate::geometry::cube(0.7);
        let mut cam = look_at(
            Vector3::new(0.0, 0.0, -2.0),
            Vector3::zeros(),
            Vector3::y(),
            1.0,
            size,
            size,
        );
        rasterize(&mesh, &mut cam);
        let views = vec![cam.clone(), cam];
        let maps = vec![
            build_correspondence(&views, 0, 1, 1e-2, 3).unwrap(),
            build_correspondence(&views, 1, 0, 1e-2, 3).unwrap(),
        ];
        (views, maps)
    }

    fn constant_image(cam: &CameraView, value: f64) -> PbrImage {
        let mask = cam.buffers().mask.clone();
        let (h, w) = mask.dim();
        let mut img = PbrImage::zeros(h, w);
        for r in 0..h {
            for c in 0..w {
                if mask[(r, c)] {
                    img.mask[(r, c)] = true;
                    for ch in 0..3 {
                        img.albedo[(r, c, ch)] = value;
                    }
                    img.rough[(r, c)] = value;
                    img.metal[(r, c)] = value;
                }
            }
        }
        img
    }

    #[test]
    fn identical_views_hit_the_cap() {
        let (views, maps) = flat_pair(32);
        let imgs = vec![constant_image(&views[0], 0.4), constant_image(&views[1], 0.4)];
        let db = c_psnr(&imgs, &maps, ChannelSet::All).unwrap();
        assert_eq!(db, C_PSNR_CAP_DB);
    }

    #[test]
    fn uniform_offset_gives_twenty_db() {
        let (views, maps) = flat_pair(32);
        let imgs = vec![constant_image(&views[0], 0.4), constant_image(&views[1], 0.5)];
        let db = c_psnr(&imgs, &maps, ChannelSet::All).unwrap();
        assert!((db - 20.0).abs() < 1e-9, "got {db}");
    }

    #[test]
    fn matches_triple_loop_reference_exactly() {
        let mesh = sphere(0.9, 24, 12);
        let mut rig = crate::geometry::canonical_rig(1.0, 32);
        for v in rig.iter_mut() {
            rasterize(&mesh, v);
        }
        let mut maps = Vec::new();
        for i in 0..rig.len() {
            for j in 0..rig.len() {
                if i != j {
                    maps.push(build_correspondence(&rig, i, j, 1e-2, 3).unwrap());
                }
            }
        }
        let mut rng = crate::rng::stream(3, "test.cpsnr", 0);
        use rand::Rng;
        let imgs: Vec<PbrImage> = rig
            .iter()
            .map(|cam| {
                let mask = cam.buffers().mask.clone();
                let (h, w) = mask.dim();
                let mut img = PbrImage::zeros(h, w);
                for r in 0..h {
                    for c in 0..w {
                        if mask[(r, c)] {
                            img.mask[(r, c)] = true;
                            for ch in 0..3 {
                                img.albedo[(r, c, ch)] = rng.gen_range(0.0..1.0);
                            }
                            img.rough[(r, c)] = rng.gen_range(0.0..1.0);
                            img.metal[(r, c)] = rng.gen_range(0.0..1.0);
                        }
                    }
                }
                img
            })
            .collect();

        let ours = c_psnr(&imgs, &maps, ChannelSet::All).unwrap();

        // independent triple loop in the same (map, row, col, channel) order
        let mut acc = 0.0f64;
        let mut m = 0usize;
        for map in &maps {
            for row in 0..32 {
                for col in 0..32 {
                    if !map.valid[(row, col)] {
                        continue;
                    }
                    let tr = map.target_pixel[(row, col, 0)] as usize;
                    let tc = map.target_pixel[(row, col, 1)] as usize;
                    m += 1;
                    for ch in 0..5 {
                        let d = imgs[map.source_view].channel(ch, row, col)
                            - imgs[map.target_view].channel(ch, tr, tc);
                        acc += d * d;
                    }
                }
            }
        }
        let mse = acc / (m * 5) as f64;
        let reference = 10.0 * (1.0 / mse).log10();
        assert_eq!(ours.to_bits(), reference.to_bits());
    }

    #[test]
    fn no_pairs_is_an_error() {
        let (views, _) = flat_pair(16);
        let imgs = vec![constant_image(&views[0], 0.4), constant_image(&views[1], 0.4)];
        assert!(matches!(
            c_psnr(&imgs, &[], ChannelSet::All),
            Err(MetricsError::NoCorrespondences)
        ));
    }

    #[test]
    fn rmse_basic_cases() {
        let (views, _) = flat_pair(16);
        let a = constant_image(&views[0], 0.2);
        let b = constant_image(&views[0], 0.5);
        let (r, m) = material_rmse_views(&[a.clone()], &[a.clone()]).unwrap();
        assert_eq!((r, m), (0.0, 0.0));
        let (r, m) = material_rmse_views(&[b], &[a]).unwrap();
        assert!((r - 0.3).abs() < 1e-12);
        assert!((m - 0.3).abs() < 1e-12);
    }

    #[test]
    fn rmse_symmetry_and_triangle() {
        let (views, _) = flat_pair(16);
        let a = constant_image(&views[0], 0.1);
        let b = constant_image(&views[0], 0.5);
        let c = constant_image(&views[0], 0.9);
        let d = |x: &PbrImage, y: &PbrImage| material_rmse_views(&[x.clone()], &[y.clone()]).unwrap().0;
        assert_eq!(d(&a, &b), d(&b, &a));
        assert!(d(&a, &c) <= d(&a, &b) + d(&b, &c) + 1e-12);
    }

    #[test]
    fn disjoint_masks_error() {
        let mut a = PbrImage::zeros(4, 4);
        let mut b = PbrImage::zeros(4, 4);
        a.mask[(0, 0)] = true;
        b.mask[(3, 3)] = true;
        assert!(matches!(
            material_rmse_views(&[a], &[b]),
            Err(MetricsError::DisjointMasks)
        ));
    }

    #[test]
    fn latent_shift_zero_for_identical_population() {
        let mut rng = crate::rng::stream(8, "test.shift", 0);
        use rand::Rng;
        let pop: Vec<LatentDistribution> = (0..4)
            .map(|_| LatentDistribution {
                mean: Array3::from_shape_fn((2, 3, 3), |_| rng.gen_range(-1.0..1.0)),
                logvar: Array3::from_shape_fn((2, 3, 3), |_| rng.gen_range(-1.0..0.0)),
            })
            .collect();
        let s = latent_shift(&pop, &pop.clone()).unwrap();
        assert!(s.abs() < 1e-12);

        // a clearly shifted population scores higher
        let shifted: Vec<LatentDistribution> = pop
            .iter()
            .map(|d| LatentDistribution {
                mean: d.mean.mapv(|m| m + 3.0),
                logvar: d.logvar.clone(),
            })
            .collect();
        let s2 = latent_shift(&shifted, &pop).unwrap();
        assert!(s2 > 1.0);

        assert!(matches!(
            latent_shift(&pop[..1], &pop),
            Err(MetricsError::PopulationTooSmall(1))
        ));
    }

    #[test]
    fn report_aggregates_are_means() {
        let rows = vec![
            RecordEval {
                record: "a".into(),
                c_psnr_db: 20.0,
                rough_rmse: 0.1,
                metal_rmse: 0.2,
            },
            RecordEval {
                record: "b".into(),
                c_psnr_db: 30.0,
                rough_rmse: 0.3,
                metal_rmse: 0.4,
            },
        ];
        let report = EvalReport::from_records("h", rows, 0.5, 0.01);
        assert!((report.c_psnr_db - 25.0).abs() < 1e-12);
        assert!((report.rough_rmse - 0.2).abs() < 1e-12);
        assert!((report.metal_rmse - 0.3).abs() < 1e-12);
        let json = report.to_json();
        let back = EvalReport::from_json(&json).unwrap();
        assert_eq!(back.per_record.len(), 2);
        assert!(back.fid_clip.is_none());
    }
}
