//! Staged experiment pipeline with content-addressed caching.
//!
//! Every stage lives in `<root>/<stage>-<hash>/` where the hash covers the
//! stage's own config keys, its seed, and its parents' hashes. Re-running
//! with an identical configuration is a no-op; editing, say, the guidance
//! scale invalidates sampling and everything after it but no training
//! stage.

use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{anyhow, bail, Result};
use serde::{Deserialize, Serialize};

use matlat_core::baking::{self, BakeOptions};
use matlat_core::config::Config;
use matlat_core::geometry::{
    build_correspondence, by_name, canonical_rig, downsample_view, rasterize, CameraView,
};
use matlat_core::matvae::{
    self, pbr_to_model, BaseVae, MatVae, TrainConfig, VaeArch, Variant,
};
use matlat_core::metrics::{
    self, ChannelSet, EvalReport, LatentShiftSide, RecordEval,
};
use matlat_core::mvdiffusion::{
    self, DiffusionTrainConfig, VelocityModel,
};
use matlat_core::preview;
use matlat_core::rng::derive_seed;
use matlat_core::synthdata::{self, Dataset, MaterialStyle, MultiViewRecord, PbrImage};

use crate::manifest::{DirLock, RunManifest, STATUS_COMPLETE};

/// Directories of one complete pipeline run.
#[derive(Debug, Clone)]
pub struct PipelineDirs {
    pub data: PathBuf,
    pub base: PathBuf,
    pub vae: PathBuf,
    pub diffusion: PathBuf,
    pub sample: PathBuf,
    pub bake: PathBuf,
    pub eval: PathBuf,
}

fn stage_dir(root: &Path, stage: &str, hash: &str) -> PathBuf {
    root.join(format!("{stage}-{hash}"))
}

fn parent_hash(dir: &Path) -> Result<String> {
    let m = RunManifest::read(dir)?;
    Ok(m.config_hash)
}

/// Generic stage wrapper: cache check, lock, run, manifest.
fn run_stage<F>(
    root: &Path,
    stage: &str,
    hash: &str,
    cfg: &Config,
    parents: Vec<String>,
    seed: u64,
    body: F,
) -> Result<PathBuf>
where
    F: FnOnce(&Path, &mut RunManifest) -> Result<()>,
{
    let dir = stage_dir(root, stage, hash);
    if RunManifest::verify_complete(&dir) {
        return Ok(dir);
    }
    let _lock = DirLock::acquire(&dir)?;
    // a concurrent process may have completed it while we waited
    if RunManifest::verify_complete(&dir) {
        return Ok(dir);
    }
    let mut manifest = RunManifest::new(stage, hash, &cfg.to_text(), parents, seed);
    let outcome = body(&dir, &mut manifest);
    match outcome {
        Ok(()) => {
            manifest.status = STATUS_COMPLETE.to_string();
            manifest.write(&dir)?;
            Ok(dir)
        }
        Err(e) => {
            manifest.status = format!("failed: {e}");
            let _ = manifest.write(&dir);
            Err(e.context(format!("stage {stage} failed")))
        }
    }
}

// ------------------------------------------------------------------ data

pub fn stage_data(cfg: &Config, root: &Path, master_seed: u64) -> Result<PathBuf> {
    let seed = derive_seed(master_seed, "stage.data", 0);
    let hash = cfg.scoped_hash(&["data.", "geometry."], &[("seed", &seed.to_string())]);
    run_stage(root, "data", &hash, cfg, vec![], seed, |dir, manifest| {
        let m = synthdata::generate_dataset(cfg, &dir.join("dataset"), seed)?;
        manifest.extra = serde_json::json!({ "records": m.records.len() });
        manifest.add_artifact(dir, "dataset/manifest.json")?;
        Ok(())
    })
}

fn load_records(data_dir: &Path) -> Result<Vec<MultiViewRecord>> {
    // accept either a data stage dir or a bare dataset root
    let root = if data_dir.join("dataset/manifest.json").exists() {
        data_dir.join("dataset")
    } else {
        data_dir.to_path_buf()
    };
    let ds = Dataset::open(&root)?;
    Ok(ds.load_all()?)
}

// ------------------------------------------------------------------ base

pub fn stage_base(cfg: &Config, root: &Path, master_seed: u64, data_dir: &Path) -> Result<PathBuf> {
    let seed = derive_seed(master_seed, "stage.base", 0);
    let data_hash = parent_hash(data_dir)?;
    let hash = cfg.scoped_hash(&["base."], &[("seed", &seed.to_string()), ("data", &data_hash)]);
    let parent = vec![format!("data-{data_hash}")];
    run_stage(root, "base", &hash, cfg, parent, seed, |dir, manifest| {
        let records = load_records(data_dir)?;
        let mut ledger = String::from("step,loss\n");
        let base = matvae::pretrain_base(&records, cfg, seed, |step, loss| {
            ledger.push_str(&format!("{step},{loss}\n"));
        })?;
        base.save(&dir.join("base.bin"))?;
        std::fs::write(dir.join("ledger.csv"), ledger)?;
        manifest.extra = serde_json::json!({
            "param_hash": base.content_hash(),
            "latent_channels": base.arch.latent_channels,
        });
        manifest.add_artifact(dir, "base.bin")?;
        Ok(())
    })
}

// ------------------------------------------------------------------- vae

pub fn stage_vae(
    cfg: &Config,
    root: &Path,
    master_seed: u64,
    data_dir: &Path,
    base_dir: &Path,
) -> Result<PathBuf> {
    let variant = Variant::parse(cfg.str("vae.variant")?)?;
    let seed = derive_seed(master_seed, "stage.vae", 0);
    let base_hash = parent_hash(base_dir)?;
    let hash = cfg.scoped_hash(
        &["vae."],
        &[("seed", &seed.to_string()), ("base", &base_hash)],
    );
    let parents = vec![format!("base-{base_hash}")];
    run_stage(root, "vae", &hash, cfg, parents, seed, |dir, manifest| {
        let base = BaseVae::load(&base_dir.join("base.bin"))?;
        let base_hash_before = base.content_hash();
        let records = load_records(data_dir)?;
        let tc = TrainConfig::from_config(cfg)?;

        let mut ledger = String::from(matvae::ledger_header().to_string());
        ledger.push('\n');
        let error_map_every = tc.error_map_every;
        let probe = records
            .first()
            .map(|r| (pbr_to_model(&r.views[0].1), r.views[0].1.mask.clone()));
        let maps_dir = dir.join("error_maps");
        let model = matvae::train_matvae(
            variant,
            &base,
            &records,
            &tc,
            seed,
            |row| {
                ledger.push_str(&row.to_csv());
                ledger.push('\n');
            },
            |step, model| {
                if error_map_every > 0 && step % error_map_every == 0 {
                    if let Some((x, mask)) = &probe {
                        let maps = metrics::locality_error_map(model, x, mask, 4);
                        let _ = std::fs::create_dir_all(&maps_dir);
                        let _ = preview::save_error_map(
                            &maps.albedo,
                            &maps_dir.join(format!("step{step:06}_albedo.png")),
                        );
                        let _ = preview::save_error_map(
                            &maps.rough,
                            &maps_dir.join(format!("step{step:06}_rough.png")),
                        );
                        let _ = preview::save_error_map(
                            &maps.metal,
                            &maps_dir.join(format!("step{step:06}_metal.png")),
                        );
                    }
                    // checkpoint for resume/inspection
                    let _ = model.save(&dir.join(format!("ckpt_{step:06}.bin")));
                }
            },
        )?;
        if base.content_hash() != base_hash_before {
            bail!("frozen base parameters changed during training");
        }
        model.save(&dir.join("mat.bin"))?;
        std::fs::write(dir.join("ledger.csv"), ledger)?;
        manifest.extra = serde_json::json!({
            "variant": variant.name(),
            "latent_channels": base.arch.latent_channels * variant.latent_multiple(),
            "base_param_hash": base_hash_before,
        });
        manifest.add_artifact(dir, "mat.bin")?;
        Ok(())
    })
}

fn load_matvae(cfg: &Config, base_dir: &Path, vae_dir: &Path) -> Result<MatVae> {
    let base = BaseVae::load(&base_dir.join("base.bin"))?;
    let m = RunManifest::read(vae_dir)?;
    let variant = Variant::parse(
        m.extra
            .get("variant")
            .and_then(|v| v.as_str())
            .ok_or_else(|| anyhow!("vae manifest lacks variant"))?,
    )?;
    let _ = cfg;
    if variant == Variant::Frozen {
        Ok(MatVae::init(variant, base, 0, false))
    } else {
        Ok(MatVae::load(&vae_dir.join("mat.bin"), variant, base)?)
    }
}

// -------------------------------------------------------------- diffusion

pub fn stage_diffusion(
    cfg: &Config,
    root: &Path,
    master_seed: u64,
    data_dir: &Path,
    base_dir: &Path,
    vae_dir: &Path,
) -> Result<PathBuf> {
    let seed = derive_seed(master_seed, "stage.diffusion", 0);
    let vae_hash = parent_hash(vae_dir)?;
    let hash = cfg.scoped_hash(
        &["diffusion.", "geometry."],
        &[("seed", &seed.to_string()), ("vae", &vae_hash)],
    );
    let parents = vec![format!("vae-{vae_hash}")];
    run_stage(root, "diffusion", &hash, cfg, parents, seed, |dir, manifest| {
        let model = load_matvae(cfg, base_dir, vae_dir)?;
        let records = load_records(data_dir)?;
        let num_styles = cfg.usize("data.num_styles")?;
        let prepared = mvdiffusion::prepare_records(&model, &records);
        let tc = DiffusionTrainConfig::from_config(cfg)?;
        let mut ledger = String::from("step,loss\n");
        let vmodel = mvdiffusion::train_diffusion(
            &prepared,
            num_styles,
            &tc,
            seed,
            |step, loss| {
                ledger.push_str(&format!("{step},{loss}\n"));
            },
            |step, m| {
                let _ = m.save(&dir.join(format!("ckpt_{step:06}")));
            },
        )?;
        vmodel.save(dir)?;
        std::fs::write(dir.join("ledger.csv"), ledger)?;
        manifest.extra = serde_json::json!({
            "caa": tc.caa,
            "steps": tc.steps,
            "latent_channels": vmodel.cfg.latent_channels,
        });
        manifest.add_artifact(dir, "model.bin")?;
        manifest.add_artifact(dir, "model.json")?;
        Ok(())
    })
}

// ---------------------------------------------------------------- sample

/// One generated multi-view sample on the canonical rig.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GeneratedEntry {
    pub path: String,
    pub mesh: String,
    pub style_id: usize,
    pub sample_index: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GeneratedIndex {
    pub image_size: usize,
    pub entries: Vec<GeneratedEntry>,
    /// Seconds of sampling time per record, for the report's Time column.
    pub seconds_per_record: f64,
}

pub fn stage_sample(
    cfg: &Config,
    root: &Path,
    master_seed: u64,
    base_dir: &Path,
    vae_dir: &Path,
    diffusion_dir: &Path,
) -> Result<PathBuf> {
    let seed = derive_seed(master_seed, "stage.sample", 0);
    let diff_hash = parent_hash(diffusion_dir)?;
    let hash = cfg.scoped_hash(
        &["sample."],
        &[("seed", &seed.to_string()), ("diffusion", &diff_hash)],
    );
    let parents = vec![format!("diffusion-{diff_hash}")];
    run_stage(root, "sample", &hash, cfg, parents, seed, |dir, manifest| {
        let vae = load_matvae(cfg, base_dir, vae_dir)?;
        let vmodel = VelocityModel::load(diffusion_dir)?;
        let image_size = cfg.usize("data.image_size")?;
        let ortho = cfg.f64("data.ortho_scale")?;
        let steps = cfg.usize("sample.steps")?;
        let cfg_scale = cfg.f64("sample.cfg_scale")?;
        let per_style = cfg.usize("sample.per_style")?;
        let num_styles = cfg.usize("data.num_styles")?.min(synthdata::NUM_STYLES);
        let eps_z = cfg.f64("geometry.eps_z")?;
        let window = cfg.usize("geometry.window")?;
        let mesh_names: Vec<String> = cfg
            .str("data.meshes")?
            .split(',')
            .map(|s| s.trim().to_string())
            .filter(|s| !s.is_empty())
            .collect();

        std::fs::create_dir_all(dir.join("generated"))?;
        let mut entries = Vec::new();
        let started = Instant::now();
        let mut produced = 0usize;
        for mesh_name in &mesh_names {
            let mesh =
                by_name(mesh_name).ok_or_else(|| anyhow!("unknown mesh {mesh_name:?}"))?;
            let mut rig = canonical_rig(ortho, image_size);
            for v in rig.iter_mut() {
                rasterize(&mesh, v);
            }
            let latent_views: Vec<CameraView> = rig
                .iter()
                .map(|v| downsample_view(v, VaeArch::DOWNSAMPLE))
                .collect();
            let latent_refs: Vec<&CameraView> = latent_views.iter().collect();
            for style_id in 0..num_styles {
                for k in 0..per_style {
                    let rec_seed =
                        derive_seed(seed, "sample.record", (produced + k) as u64 * 131 + style_id as u64);
                    let mv = mvdiffusion::sample(
                        &vmodel,
                        &latent_refs,
                        style_id,
                        steps,
                        cfg_scale,
                        rec_seed,
                        eps_z,
                        window,
                    )?;
                    // decode each view and mask by pixel-resolution coverage
                    let mut c = matlat_core::arrayio::Container::new();
                    c.insert_i64("meta.style", ndarray::arr0(style_id as i64));
                    c.insert_i64("meta.sample", ndarray::arr0(k as i64));
                    for (vi, z) in mv.latents.iter().enumerate() {
                        let decoded = vae.decode(z);
                        let mask = rig[vi].buffers().mask.clone();
                        let img = matvae::model_to_pbr(&decoded, &mask);
                        let p = format!("view{vi:02}");
                        c.insert_f64(&format!("{p}.albedo"), img.albedo.clone());
                        c.insert_f64(&format!("{p}.rough"), img.rough.clone());
                        c.insert_f64(&format!("{p}.metal"), img.metal.clone());
                        c.insert_u8(
                            &format!("{p}.mask"),
                            img.mask.mapv(|m| if m { 1u8 } else { 0 }),
                        );
                        if vi == 0 {
                            let _ = preview::save_pbr(
                                &img,
                                &dir.join("previews"),
                                &format!("{mesh_name}_s{style_id:02}_k{k}"),
                            );
                        }
                    }
                    let rel = format!("generated/gen_{mesh_name}_s{style_id:02}_k{k}.bin");
                    c.write(&dir.join(&rel))?;
                    entries.push(GeneratedEntry {
                        path: rel,
                        mesh: mesh_name.clone(),
                        style_id,
                        sample_index: k,
                        seed: rec_seed,
                    });
                    produced += 1;
                }
            }
        }
        let seconds_per_record = started.elapsed().as_secs_f64() / produced.max(1) as f64;
        let index = GeneratedIndex {
            image_size,
            entries,
            seconds_per_record,
        };
        std::fs::write(
            dir.join("gen_index.json"),
            serde_json::to_string_pretty(&index)?,
        )?;
        manifest.extra = serde_json::json!({ "records": produced });
        manifest.add_artifact(dir, "gen_index.json")?;
        Ok(())
    })
}

/// Load the generated views of one entry.
pub fn load_generated(
    sample_dir: &Path,
    entry: &GeneratedEntry,
    rig: &[CameraView],
) -> Result<Vec<PbrImage>> {
    let path = sample_dir.join(&entry.path);
    let c = matlat_core::arrayio::Container::read(&path)?;
    let mut views = Vec::new();
    for vi in 0..rig.len() {
        let p = format!("view{vi:02}");
        let albedo: ndarray::Array3<f64> = c
            .f64(&path, &format!("{p}.albedo"))?
            .clone()
            .into_dimensionality()
            .unwrap();
        let mask_u8: ndarray::Array2<u8> = c
            .u8(&path, &format!("{p}.mask"))?
            .clone()
            .into_dimensionality()
            .unwrap();
        views.push(PbrImage {
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
        });
    }
    Ok(views)
}

// ------------------------------------------------------------------ bake

pub fn stage_bake(cfg: &Config, root: &Path, sample_dir: &Path) -> Result<PathBuf> {
    let sample_hash = parent_hash(sample_dir)?;
    let hash = cfg.scoped_hash(&["bake."], &[("sample", &sample_hash)]);
    let parents = vec![format!("sample-{sample_hash}")];
    run_stage(root, "bake", &hash, cfg, parents, 0, |dir, manifest| {
        let index: GeneratedIndex =
            serde_json::from_str(&std::fs::read_to_string(sample_dir.join("gen_index.json"))?)?;
        let ortho = cfg.f64("data.ortho_scale")?;
        let texture_size = cfg.usize("bake.texture_size")?;
        let opts = BakeOptions {
            eps_z: cfg.f64("geometry.eps_z")?,
            cos_power: cfg.f64("bake.cos_power")?,
        };
        let dilate_steps = cfg.usize("bake.dilate")?;
        std::fs::create_dir_all(dir.join("textures"))?;
        let mut baked = 0usize;
        for entry in &index.entries {
            let mesh = by_name(&entry.mesh).ok_or_else(|| anyhow!("unknown mesh"))?;
            let mut rig = canonical_rig(ortho, index.image_size);
            for v in rig.iter_mut() {
                rasterize(&mesh, v);
            }
            let images = load_generated(sample_dir, entry, &rig)?;
            let views: Vec<(CameraView, PbrImage)> =
                rig.into_iter().zip(images.into_iter()).collect();
            let texture = baking::bake(&views, &mesh, texture_size, opts, dilate_steps)?;
            let stem = format!("{}_s{:02}_k{}", entry.mesh, entry.style_id, entry.sample_index);
            let mut c = matlat_core::arrayio::Container::new();
            c.insert_f64("texture.data", texture.data.clone());
            c.insert_u8(
                "texture.coverage",
                texture.coverage.mapv(|m| if m { 1u8 } else { 0 }),
            );
            c.insert_i64("texture.provenance", texture.provenance.clone());
            c.write(&dir.join(format!("textures/{stem}.bin")))?;
            let _ = preview::save_texture(&texture, &dir.join("previews"), &stem);
            // shaded qualitative preview from the first canonical view
            let mut cam_rig = canonical_rig(ortho, index.image_size);
            rasterize(&mesh, &mut cam_rig[0]);
            let shaded = preview::render_shaded(&texture, &cam_rig[0]);
            let _ = preview::save_rgb(&shaded, &dir.join(format!("previews/{stem}_shaded.png")));
            baked += 1;
        }
        manifest.extra = serde_json::json!({ "textures": baked });
        Ok(())
    })
}

// ------------------------------------------------------------------ eval

pub fn stage_eval(
    cfg: &Config,
    root: &Path,
    data_dir: &Path,
    base_dir: &Path,
    vae_dir: &Path,
    sample_dir: &Path,
) -> Result<PathBuf> {
    let sample_hash = parent_hash(sample_dir)?;
    let hash = cfg.scoped_hash(&["eval."], &[("sample", &sample_hash)]);
    let parents = vec![format!("sample-{sample_hash}")];
    run_stage(root, "eval", &hash, cfg, parents, 0, |dir, manifest| {
        let report = evaluate(cfg, data_dir, base_dir, vae_dir, sample_dir, &hash)?;
        std::fs::write(dir.join("report.json"), report.to_json())?;
        std::fs::write(dir.join("report.csv"), report.to_csv())?;
        manifest.add_artifact(dir, "report.json")?;
        Ok(())
    })
}

/// Compute the evaluation report for a sample directory.
pub fn evaluate(
    cfg: &Config,
    data_dir: &Path,
    base_dir: &Path,
    vae_dir: &Path,
    sample_dir: &Path,
    config_hash: &str,
) -> Result<EvalReport> {
    let index: GeneratedIndex =
        serde_json::from_str(&std::fs::read_to_string(sample_dir.join("gen_index.json"))?)?;
    let ortho = cfg.f64("data.ortho_scale")?;
    let eps_z = cfg.f64("geometry.eps_z")?;
    let window = cfg.usize("geometry.window")?;
    let channel_set = ChannelSet::parse(cfg.str("eval.channel_set")?)
        .ok_or_else(|| anyhow!("bad eval.channel_set"))?;
    let texture_size = cfg.usize("data.texture_size")?;

    let vae = load_matvae(cfg, base_dir, vae_dir)?;

    let mut per_record = Vec::new();
    let mut rig_cache: std::collections::BTreeMap<String, Vec<CameraView>> = Default::default();
    for entry in &index.entries {
        let rig = match rig_cache.get(&entry.mesh) {
            Some(r) => r.clone(),
            None => {
                let mesh = by_name(&entry.mesh).ok_or_else(|| anyhow!("unknown mesh"))?;
                let mut rig = canonical_rig(ortho, index.image_size);
                for v in rig.iter_mut() {
                    rasterize(&mesh, v);
                }
                rig_cache.insert(entry.mesh.clone(), rig.clone());
                rig
            }
        };
        let views = load_generated(sample_dir, entry, &rig)?;
        let mut maps = Vec::new();
        for i in 0..rig.len() {
            for j in 0..rig.len() {
                if i != j {
                    maps.push(build_correspondence(&rig, i, j, eps_z, window)?);
                }
            }
        }
        let c_psnr = metrics::c_psnr(&views, &maps, channel_set)?;

        // reference renders: material channels are fixed per style
        let mesh = by_name(&entry.mesh).unwrap();
        let style = MaterialStyle::new(entry.style_id, entry.seed)?;
        let texture = synthdata::make_texture(&style, &mesh, texture_size)?;
        let reference =
            synthdata::render_record(&entry.mesh, &mesh, &style, entry.seed, &texture, &rig)?;
        let ref_views: Vec<PbrImage> = reference.views.into_iter().map(|(_, img)| img).collect();
        let (rough_rmse, metal_rmse) = metrics::material_rmse_views(&views, &ref_views)?;
        per_record.push(RecordEval {
            record: format!("{}_s{:02}_k{}", entry.mesh, entry.style_id, entry.sample_index),
            c_psnr_db: c_psnr,
            rough_rmse,
            metal_rmse,
        });
    }

    // model-level diagnostics over a dataset slice
    let records = load_records(data_dir)?;
    let probe: Vec<&MultiViewRecord> = records.iter().take(8).collect();
    let (shift, locality) = model_diagnostics(&vae, &probe, cfg)?;

    Ok(EvalReport::from_records(
        config_hash,
        per_record,
        shift,
        locality,
    ))
}

/// Latent shift of the material latents against the albedo base
/// population, and the mean patch-decode error.
fn model_diagnostics(
    vae: &MatVae,
    records: &[&MultiViewRecord],
    cfg: &Config,
) -> Result<(f64, f64)> {
    let crop = cfg.usize("eval.locality_crop")?;
    let mut material_pop = Vec::new();
    let mut base_pop = Vec::new();
    let mut images = Vec::new();
    for rec in records {
        for (_, img) in rec.views.iter().take(2) {
            let x = pbr_to_model(img);
            let side = LatentShiftSide::of(vae, &x);
            material_pop.push(side.material);
            base_pop.push(side.base);
            images.push((x, img.mask.clone()));
        }
    }
    let shift = metrics::latent_shift(&material_pop, &base_pop)?;
    let locality = metrics::mean_locality_error(vae, &images, crop);
    Ok((shift, locality))
}

// ------------------------------------------------------------- pipeline

/// The whole chain for the configured variant.
pub fn run_pipeline(cfg: &Config, root: &Path, master_seed: u64) -> Result<PipelineDirs> {
    let data = stage_data(cfg, root, master_seed)?;
    let base = stage_base(cfg, root, master_seed, &data)?;
    let vae = stage_vae(cfg, root, master_seed, &data, &base)?;
    let diffusion = stage_diffusion(cfg, root, master_seed, &data, &base, &vae)?;
    let sample = stage_sample(cfg, root, master_seed, &base, &vae, &diffusion)?;
    let bake = stage_bake(cfg, root, &sample)?;
    let eval = stage_eval(cfg, root, &data, &base, &vae, &sample)?;
    Ok(PipelineDirs {
        data,
        base,
        vae,
        diffusion,
        sample,
        bake,
        eval,
    })
}
