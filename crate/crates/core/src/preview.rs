//! PNG previews: per-channel images, error maps, and a single-point-light
//! shaded render for qualitative inspection. Plumbing only; evaluation
//! never reads these.

use std::path::Path;

use image::{GrayImage, RgbImage};
use ndarray::{Array2, Array3};

use crate::baking::UvTexture;
use crate::geometry::CameraView;
use crate::synthdata::PbrImage;

fn to_u8(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

pub fn save_grey(map: &Array2<f64>, path: &Path) -> std::io::Result<()> {
    let (h, w) = map.dim();
    let mut img = GrayImage::new(w as u32, h as u32);
    for r in 0..h {
        for c in 0..w {
            img.put_pixel(c as u32, r as u32, image::Luma([to_u8(map[(r, c)])]));
        }
    }
    img.save(path).map_err(std::io::Error::other)
}

/// `(H, W, 3)` array in `[0,1]` to PNG.
pub fn save_rgb(map: &Array3<f64>, path: &Path) -> std::io::Result<()> {
    let (h, w, _) = map.dim();
    let mut img = RgbImage::new(w as u32, h as u32);
    for r in 0..h {
        for c in 0..w {
            img.put_pixel(
                c as u32,
                r as u32,
                image::Rgb([
                    to_u8(map[(r, c, 0)]),
                    to_u8(map[(r, c, 1)]),
                    to_u8(map[(r, c, 2)]),
                ]),
            );
        }
    }
    img.save(path).map_err(std::io::Error::other)
}

/// Normalized grey rendering of an error map (max maps to white).
pub fn save_error_map(map: &Array2<f64>, path: &Path) -> std::io::Result<()> {
    let peak = map.iter().cloned().fold(0.0f64, f64::max).max(1e-12);
    save_grey(&map.mapv(|v| v / peak), path)
}

/// Albedo / roughness / metallic PNGs for one view image.
pub fn save_pbr(img: &PbrImage, dir: &Path, stem: &str) -> std::io::Result<()> {
    std::fs::create_dir_all(dir)?;
    save_rgb(&img.albedo, &dir.join(format!("{stem}_albedo.png")))?;
    save_grey(&img.rough, &dir.join(format!("{stem}_rough.png")))?;
    save_grey(&img.metal, &dir.join(format!("{stem}_metal.png")))?;
    Ok(())
}

/// Albedo / roughness / metallic PNGs for a texture.
pub fn save_texture(tex: &UvTexture, dir: &Path, stem: &str) -> std::io::Result<()> {
    std::fs::create_dir_all(dir)?;
    let res = tex.resolution;
    let mut albedo = Array3::<f64>::zeros((res, res, 3));
    for r in 0..res {
        for c in 0..res {
            for ch in 0..3 {
                albedo[(r, c, ch)] = tex.data[(ch, r, c)];
            }
        }
    }
    save_rgb(&albedo, &dir.join(format!("{stem}_albedo.png")))?;
    save_grey(
        &tex.data.index_axis(ndarray::Axis(0), 3).to_owned(),
        &dir.join(format!("{stem}_rough.png")),
    )?;
    save_grey(
        &tex.data.index_axis(ndarray::Axis(0), 4).to_owned(),
        &dir.join(format!("{stem}_metal.png")),
    )?;
    Ok(())
}

/// Shade the textured mesh under one point light with a compact
/// Cook-Torrance-style specular term. Returns `(H, W, 3)` in `[0,1]`.
pub fn render_shaded(texture: &UvTexture, cam: &CameraView) -> Array3<f64> {
    let buf = cam.buffers();
    let (h, w) = (cam.height, cam.width);
    let mut out = Array3::<f64>::zeros((h, w, 3));
    let light_pos = nalgebra::Vector3::new(1.5, 2.0, -2.5);
    let view_dir = -cam.forward();
    for r in 0..h {
        for c in 0..w {
            if !buf.mask[(r, c)] {
                continue;
            }
            let p = nalgebra::Vector3::new(
                buf.position[(r, c, 0)],
                buf.position[(r, c, 1)],
                buf.position[(r, c, 2)],
            );
            let mut n = nalgebra::Vector3::new(
                buf.normal[(r, c, 0)],
                buf.normal[(r, c, 1)],
                buf.normal[(r, c, 2)],
            );
            // two-sided shading for open meshes
            if n.dot(&view_dir) < 0.0 {
                n = -n;
            }
            let texel = texture.sample_bilinear(buf.uv[(r, c, 0)], buf.uv[(r, c, 1)]);
            let albedo = [texel[0], texel[1], texel[2]];
            let rough = texel[3].clamp(0.04, 1.0);
            let metal = texel[4];

            let l = (light_pos - p).normalize();
            let hvec = (l + view_dir).normalize();
            let ndl = n.dot(&l).max(0.0);
            let ndh = n.dot(&hvec).max(0.0);
            let a2 = (rough * rough).powi(2);
            let denom = ndh * ndh * (a2 - 1.0) + 1.0;
            let d_ggx = a2 / (std::f64::consts::PI * denom * denom).max(1e-9);
            let spec = d_ggx * 0.25;
            let ambient = 0.12;
            for ch in 0..3 {
                let f0 = 0.04 * (1.0 - metal) + albedo[ch] * metal;
                let diffuse = albedo[ch] * (1.0 - metal);
                let v = ambient * albedo[ch] + ndl * (diffuse + spec * f0);
                out[(r, c, ch)] = v.clamp(0.0, 1.0);
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{look_at, rasterize, sphere};
    use crate::synthdata::{make_texture, MaterialStyle};
    use nalgebra::Vector3;

    #[test]
    fn previews_write_pngs() {
        let dir = tempfile::tempdir().unwrap();
        let mesh = sphere(0.9, 16, 8);
        let style = MaterialStyle::new(2, 3).unwrap();
        let tex = make_texture(&style, &mesh, 32).unwrap();
        save_texture(&tex, dir.path(), "tex").unwrap();
        assert!(dir.path().join("tex_albedo.png").exists());
        assert!(dir.path().join("tex_rough.png").exists());
        assert!(dir.path().join("tex_metal.png").exists());

        let mut cam = look_at(
            Vector3::new(0.0, 0.0, -2.0),
            Vector3::zeros(),
            Vector3::y(),
            1.0,
            48,
            48,
        );
        rasterize(&mesh, &mut cam);
        let shaded = render_shaded(&tex, &cam);
        assert!(shaded.iter().all(|v| (0.0..=1.0).contains(v)));
        assert!(shaded.iter().any(|&v| v > 0.05));
        save_rgb(&shaded, &dir.path().join("shaded.png")).unwrap();
        assert!(dir.path().join("shaded.png").exists());
    }
}
