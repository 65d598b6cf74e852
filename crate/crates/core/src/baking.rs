//! UV texture baking: unprojection of multi-view images into the atlas,
//! visibility-weighted blending, gutter dilation, and occlusion inpainting.

use ndarray::{Array2, Array3};
use thiserror::Error;

use crate::geometry::{CameraView, Mesh};
use crate::synthdata::PbrImage;

#[derive(Debug, Error)]
pub enum BakeError {
    #[error("mesh has no UV atlas")]
    MissingUv,
    #[error("no views to bake")]
    NoViews,
    #[error("view {0} has no rasterized buffers")]
    ViewNotRasterized(usize),
}

/// Five-channel texture over the UV grid.
#[derive(Debug, Clone)]
pub struct UvTexture {
    pub resolution: usize,
    /// `(5, res, res)`: albedo rgb, roughness, metallic, all in `[0,1]`.
    pub data: Array3<f64>,
    /// Texels written by at least one view (or filled later).
    pub coverage: Array2<bool>,
    /// Winning view per texel, -1 where none.
    pub provenance: Array2<i64>,
}

impl UvTexture {
    pub fn zeros(resolution: usize) -> Self {
        Self {
            resolution,
            data: Array3::zeros((5, resolution, resolution)),
            coverage: Array2::from_elem((resolution, resolution), false),
            provenance: Array2::from_elem((resolution, resolution), -1),
        }
    }

    /// Bilinear sample at UV `(u, v)`; texel centers sit at
    /// `(i + 0.5) / res` and the border clamps.
    pub fn sample_bilinear(&self, u: f64, v: f64) -> [f64; 5] {
        let res = self.resolution;
        let x = (u * res as f64 - 0.5).clamp(0.0, (res - 1) as f64);
        let y = (v * res as f64 - 0.5).clamp(0.0, (res - 1) as f64);
        let x0 = x.floor() as usize;
        let y0 = y.floor() as usize;
        let x1 = (x0 + 1).min(res - 1);
        let y1 = (y0 + 1).min(res - 1);
        let fx = x - x0 as f64;
        let fy = y - y0 as f64;
        let mut out = [0.0; 5];
        for (c, slot) in out.iter_mut().enumerate() {
            let a = self.data[(c, y0, x0)] * (1.0 - fx) + self.data[(c, y0, x1)] * fx;
            let b = self.data[(c, y1, x0)] * (1.0 - fx) + self.data[(c, y1, x1)] * fx;
            *slot = a * (1.0 - fy) + b * fy;
        }
        out
    }

    pub fn covered_count(&self) -> usize {
        self.coverage.iter().filter(|&&c| c).count()
    }
}

/// Knobs for [`unproject`].
#[derive(Debug, Clone, Copy)]
pub struct BakeOptions {
    /// Depth agreement tolerance for the per-view visibility test.
    pub eps_z: f64,
    /// Foreshortening exponent on the view-space cosine.
    pub cos_power: f64,
}

impl Default for BakeOptions {
    fn default() -> Self {
        Self {
            eps_z: 1e-2,
            cos_power: 4.0,
        }
    }
}

/// Texels inside the mesh's UV atlas, plus interpolated surface geometry.
struct UvChart {
    atlas: Array2<bool>,
    position: Array3<f64>,
    normal: Array3<f64>,
}

/// Rasterize the mesh's UV triangles onto the texel grid.
fn rasterize_uv(mesh: &Mesh, resolution: usize) -> UvChart {
    let res = resolution;
    let mut atlas = Array2::<bool>::from_elem((res, res), false);
    let mut position = Array3::<f64>::zeros((res, res, 3));
    let mut normal = Array3::<f64>::zeros((res, res, 3));

    for (fi, corners) in mesh.uv.iter().enumerate() {
        // texel coordinates of the UV triangle
        let pts: Vec<[f64; 2]> = corners
            .iter()
            .map(|c| [c[0] * res as f64, c[1] * res as f64])
            .collect();
        let orient = |a: [f64; 2], b: [f64; 2], px: f64, py: f64| -> f64 {
            (b[0] - a[0]) * (py - a[1]) - (b[1] - a[1]) * (px - a[0])
        };
        let mut p = [pts[0], pts[1], pts[2]];
        let mut order = [0usize, 1, 2];
        let mut area = orient(p[0], p[1], p[2][0], p[2][1]);
        if area < 0.0 {
            p.swap(1, 2);
            order.swap(1, 2);
            area = -area;
        }
        if area == 0.0 {
            continue;
        }
        let min_x = p.iter().map(|v| v[0]).fold(f64::INFINITY, f64::min);
        let max_x = p.iter().map(|v| v[0]).fold(f64::NEG_INFINITY, f64::max);
        let min_y = p.iter().map(|v| v[1]).fold(f64::INFINITY, f64::min);
        let max_y = p.iter().map(|v| v[1]).fold(f64::NEG_INFINITY, f64::max);
        let x0 = (min_x - 0.5).floor().max(0.0) as usize;
        let x1 = ((max_x - 0.5).ceil() as isize).min(res as isize - 1);
        let y0 = (min_y - 0.5).floor().max(0.0) as usize;
        let y1 = ((max_y - 0.5).ceil() as isize).min(res as isize - 1);
        if x1 < 0 || y1 < 0 {
            continue;
        }
        let face = mesh.faces[fi];
        for iy in y0..=(y1 as usize) {
            let py = iy as f64 + 0.5;
            for ix in x0..=(x1 as usize) {
                let px = ix as f64 + 0.5;
                let w0 = orient(p[1], p[2], px, py);
                let w1 = orient(p[2], p[0], px, py);
                let w2 = orient(p[0], p[1], px, py);
                // inclusive boundaries: duplicated seam texels just write twice
                if w0 < 0.0 || w1 < 0.0 || w2 < 0.0 {
                    continue;
                }
                let bary = [w0 / area, w1 / area, w2 / area];
                atlas[(iy, ix)] = true;
                let mut pos = nalgebra::Vector3::zeros();
                let mut nrm = nalgebra::Vector3::zeros();
                for k in 0..3 {
                    let vi = face[order[k]];
                    pos += mesh.vertices[vi] * bary[k];
                    nrm += mesh.normals[vi] * bary[k];
                }
                if nrm.norm() > 1e-12 {
                    nrm /= nrm.norm();
                }
                for c in 0..3 {
                    position[(iy, ix, c)] = pos[c];
                    normal[(iy, ix, c)] = nrm[c];
                }
            }
        }
    }
    UvChart {
        atlas,
        position,
        normal,
    }
}

/// Texels of the mesh atlas at a given resolution.
pub fn atlas_mask(mesh: &Mesh, resolution: usize) -> Result<Array2<bool>, BakeError> {
    if !mesh.has_uv() {
        return Err(BakeError::MissingUv);
    }
    Ok(rasterize_uv(mesh, resolution).atlas)
}

/// Mask-aware bilinear sample of one view image. Returns the blended
/// 5-channel color and the mask weight actually gathered.
fn sample_view(img: &PbrImage, px: f64, py: f64) -> ([f64; 5], f64) {
    let (h, w) = (img.height(), img.width());
    let x = (px - 0.5).clamp(0.0, (w - 1) as f64);
    let y = (py - 0.5).clamp(0.0, (h - 1) as f64);
    let x0 = x.floor() as usize;
    let y0 = y.floor() as usize;
    let x1 = (x0 + 1).min(w - 1);
    let y1 = (y0 + 1).min(h - 1);
    let fx = x - x0 as f64;
    let fy = y - y0 as f64;
    let taps = [
        (y0, x0, (1.0 - fx) * (1.0 - fy)),
        (y0, x1, fx * (1.0 - fy)),
        (y1, x0, (1.0 - fx) * fy),
        (y1, x1, fx * fy),
    ];
    let mut total = 0.0;
    let mut out = [0.0; 5];
    for (r, ccol, wt) in taps {
        if !img.mask[(r, ccol)] {
            continue;
        }
        total += wt;
        for (c, slot) in out.iter_mut().enumerate() {
            *slot += wt * img.channel(c, r, ccol);
        }
    }
    if total > 1e-9 {
        for slot in out.iter_mut() {
            *slot /= total;
        }
    }
    (out, total)
}

/// Gather every view's visible contribution per atlas texel and blend with
/// foreshortening weights. Texels no view sees stay uncovered.
pub fn unproject(
    views: &[(CameraView, PbrImage)],
    mesh: &Mesh,
    resolution: usize,
    opts: BakeOptions,
) -> Result<UvTexture, BakeError> {
    if views.is_empty() {
        return Err(BakeError::NoViews);
    }
    if !mesh.has_uv() {
        return Err(BakeError::MissingUv);
    }
    for (i, (cam, _)) in views.iter().enumerate() {
        if cam.buffers.is_none() {
            return Err(BakeError::ViewNotRasterized(i));
        }
    }
    let chart = rasterize_uv(mesh, resolution);
    let mut tex = UvTexture::zeros(resolution);

    for iy in 0..resolution {
        for ix in 0..resolution {
            if !chart.atlas[(iy, ix)] {
                continue;
            }
            let pos = nalgebra::Vector3::new(
                chart.position[(iy, ix, 0)],
                chart.position[(iy, ix, 1)],
                chart.position[(iy, ix, 2)],
            );
            let nrm = nalgebra::Vector3::new(
                chart.normal[(iy, ix, 0)],
                chart.normal[(iy, ix, 1)],
                chart.normal[(iy, ix, 2)],
            );
            let mut acc = [0.0f64; 5];
            let mut total_w = 0.0;
            let mut best_w = 0.0;
            let mut best_view = -1i64;
            for (vi, (cam, img)) in views.iter().enumerate() {
                let (pix, depth) = cam.project(&pos);
                let Some((pr, pc)) = cam.nearest_pixel(pix) else {
                    continue;
                };
                let buf = cam.buffers();
                let vis = buf.mask[(pr, pc)] && (depth - buf.depth[(pr, pc)]).abs() <= opts.eps_z;
                if !vis {
                    continue;
                }
                // foreshortening: |cos| because surfaces are two-sided;
                // occluded texels were already rejected by the depth test
                let cos = nrm.dot(&cam.forward()).abs();
                if cos <= 1e-9 {
                    continue;
                }
                let (color, mask_w) = sample_view(img, pix[0], pix[1]);
                if mask_w < 1e-6 {
                    continue;
                }
                let w = cos.powf(opts.cos_power);
                for c in 0..5 {
                    acc[c] += w * color[c];
                }
                total_w += w;
                if w > best_w {
                    best_w = w;
                    best_view = vi as i64;
                }
            }
            if total_w > 0.0 {
                for c in 0..5 {
                    tex.data[(c, iy, ix)] = (acc[c] / total_w).clamp(0.0, 1.0);
                }
                tex.coverage[(iy, ix)] = true;
                tex.provenance[(iy, ix)] = best_view;
            }
        }
    }
    Ok(tex)
}

/// Extend covered texels outward by `steps` so seams do not bleed when the
/// texture is later sampled bilinearly. New texels keep provenance -1.
pub fn dilate(texture: &UvTexture, steps: usize) -> UvTexture {
    let mut out = texture.clone();
    let res = texture.resolution;
    for _ in 0..steps {
        let snapshot = out.clone();
        for iy in 0..res {
            for ix in 0..res {
                if snapshot.coverage[(iy, ix)] {
                    continue;
                }
                let mut acc = [0.0; 5];
                let mut n = 0usize;
                let mut visit = |r: isize, c: isize| {
                    if r >= 0 && c >= 0 && (r as usize) < res && (c as usize) < res {
                        let (r, c) = (r as usize, c as usize);
                        if snapshot.coverage[(r, c)] {
                            for (ch, slot) in acc.iter_mut().enumerate() {
                                *slot += snapshot.data[(ch, r, c)];
                            }
                            n += 1;
                        }
                    }
                };
                visit(iy as isize - 1, ix as isize);
                visit(iy as isize + 1, ix as isize);
                visit(iy as isize, ix as isize - 1);
                visit(iy as isize, ix as isize + 1);
                if n > 0 {
                    for (ch, slot) in acc.iter().enumerate() {
                        out.data[(ch, iy, ix)] = slot / n as f64;
                    }
                    out.coverage[(iy, ix)] = true;
                }
            }
        }
    }
    out
}

/// Fill every uncovered atlas texel by synchronous diffusion from covered
/// neighbors. Idempotent once everything is covered.
pub fn inpaint(texture: &UvTexture, atlas: &Array2<bool>) -> UvTexture {
    let res = texture.resolution;
    let mut out = texture.clone();
    loop {
        let mut remaining = 0usize;
        let snapshot = out.clone();
        let mut progressed = false;
        for iy in 0..res {
            for ix in 0..res {
                if !atlas[(iy, ix)] || snapshot.coverage[(iy, ix)] {
                    continue;
                }
                let mut acc = [0.0; 5];
                let mut n = 0usize;
                let mut visit = |r: isize, c: isize| {
                    if r >= 0 && c >= 0 && (r as usize) < res && (c as usize) < res {
                        let (r, c) = (r as usize, c as usize);
                        if snapshot.coverage[(r, c)] {
                            for (ch, slot) in acc.iter_mut().enumerate() {
                                *slot += snapshot.data[(ch, r, c)];
                            }
                            n += 1;
                        }
                    }
                };
                visit(iy as isize - 1, ix as isize);
                visit(iy as isize + 1, ix as isize);
                visit(iy as isize, ix as isize - 1);
                visit(iy as isize, ix as isize + 1);
                if n > 0 {
                    for (ch, slot) in acc.iter().enumerate() {
                        out.data[(ch, iy, ix)] = slot / n as f64;
                    }
                    out.coverage[(iy, ix)] = true;
                    progressed = true;
                } else {
                    remaining += 1;
                }
            }
        }
        if remaining == 0 {
            break;
        }
        if !progressed {
            // isolated atlas islands with no covered texel anywhere: fill
            // with the global mean so nothing stays non-finite
            let mut mean = [0.0; 5];
            let covered = out.covered_count().max(1);
            for iy in 0..res {
                for ix in 0..res {
                    if out.coverage[(iy, ix)] {
                        for (ch, slot) in mean.iter_mut().enumerate() {
                            *slot += out.data[(ch, iy, ix)];
                        }
                    }
                }
            }
            for slot in mean.iter_mut() {
                *slot /= covered as f64;
            }
            for iy in 0..res {
                for ix in 0..res {
                    if atlas[(iy, ix)] && !out.coverage[(iy, ix)] {
                        for (ch, slot) in mean.iter().enumerate() {
                            out.data[(ch, iy, ix)] = *slot;
                        }
                        out.coverage[(iy, ix)] = true;
                    }
                }
            }
            break;
        }
    }
    out
}

/// Full bake: unproject, dilate the gutter, inpaint the rest of the atlas.
pub fn bake(
    views: &[(CameraView, PbrImage)],
    mesh: &Mesh,
    resolution: usize,
    opts: BakeOptions,
    dilate_steps: usize,
) -> Result<UvTexture, BakeError> {
    let pre = unproject(views, mesh, resolution, opts)?;
    let atlas = atlas_mask(mesh, resolution)?;
    let grown = dilate(&pre, dilate_steps);
    Ok(inpaint(&grown, &atlas))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{canonical_rig, rasterize, sphere};
    use crate::synthdata::{make_texture, render_record, MaterialStyle};
    use nalgebra::Vector3;

    fn quad_mesh() -> Mesh {
        // front-facing quad spanning [-1,1]^2 with full UV chart
        let mut mesh = Mesh {
            vertices: vec![
                Vector3::new(-1.0, -1.0, 0.0),
                Vector3::new(1.0, -1.0, 0.0),
                Vector3::new(1.0, 1.0, 0.0),
                Vector3::new(-1.0, 1.0, 0.0),
            ],
            faces: vec![[0, 1, 2], [0, 2, 3]],
            uv: vec![
                [[0.0, 1.0], [1.0, 1.0], [1.0, 0.0]],
                [[0.0, 1.0], [1.0, 0.0], [0.0, 0.0]],
            ],
            normals: vec![Vector3::new(0.0, 0.0, -1.0); 4],
        };
        mesh.compute_vertex_normals();
        mesh
    }

    #[test]
    fn single_front_view_of_quad_round_trips() {
        let mesh = quad_mesh();
        let tex = smooth_texture(64);
        let style = MaterialStyle::new(0, 9).unwrap();
        let mut cam = crate::geometry::look_at(
            Vector3::new(0.0, 0.0, -2.0),
            Vector3::zeros(),
            Vector3::y(),
            1.0,
            128,
            128,
        );
        rasterize(&mesh, &mut cam);
        let rec = render_record("quad", &mesh, &style, 9, &tex, &[cam]).unwrap();
        let baked = unproject(&rec.views, &mesh, 64, BakeOptions::default()).unwrap();
        let mut se = 0.0;
        let mut n = 0usize;
        for iy in 0..64 {
            for ix in 0..64 {
                if !baked.coverage[(iy, ix)] {
                    continue;
                }
                for c in 0..5 {
                    let d = baked.data[(c, iy, ix)] - tex.data[(c, iy, ix)];
                    se += d * d;
                    n += 1;
                }
            }
        }
        let rmse = (se / n as f64).sqrt();
        assert!(baked.covered_count() > 60 * 60);
        assert!(rmse <= 0.02, "round-trip rmse {rmse}");
    }

    #[test]
    fn back_texels_uncovered_after_single_front_view() {
        let mesh = sphere(0.9, 24, 12);
        let style = MaterialStyle::new(0, 1).unwrap();
        let tex = make_texture(&style, &mesh, 64).unwrap();
        let mut cam = crate::geometry::look_at(
            Vector3::new(0.0, 0.0, -2.0),
            Vector3::zeros(),
            Vector3::y(),
            1.0,
            96,
            96,
        );
        rasterize(&mesh, &mut cam);
        let rec = render_record("sphere", &mesh, &style, 1, &tex, &[cam]).unwrap();
        let baked = unproject(&rec.views, &mesh, 64, BakeOptions::default()).unwrap();
        // the sphere chart's back hemisphere for a -z camera is u in (0, 0.5)
        let mut back_covered = 0usize;
        let mut back_total = 0usize;
        let atlas = atlas_mask(&mesh, 64).unwrap();
        for iy in 16..48 {
            for ix in 12..20 {
                if atlas[(iy, ix)] {
                    back_total += 1;
                    if baked.coverage[(iy, ix)] {
                        back_covered += 1;
                    }
                }
            }
        }
        assert!(back_total > 100);
        assert!(
            (back_covered as f64) < 0.2 * back_total as f64,
            "back texels should stay uncovered: {back_covered}/{back_total}"
        );
    }

    #[test]
    fn inpaint_is_idempotent_on_full_coverage() {
        let mut tex = UvTexture::zeros(16);
        tex.coverage.fill(true);
        tex.data.fill(0.25);
        let atlas = Array2::from_elem((16, 16), true);
        let out = inpaint(&tex, &atlas);
        assert_eq!(out.data, tex.data);
    }

    #[test]
    fn single_hole_fills_with_surrounding_constant() {
        let mut tex = UvTexture::zeros(8);
        tex.coverage.fill(true);
        tex.data.fill(0.7);
        tex.coverage[(4, 4)] = false;
        for c in 0..5 {
            tex.data[(c, 4, 4)] = 0.0;
        }
        let atlas = Array2::from_elem((8, 8), true);
        let out = inpaint(&tex, &atlas);
        for c in 0..5 {
            assert!((out.data[(c, 4, 4)] - 0.7).abs() < 1e-12);
        }
    }

    #[test]
    fn six_view_sphere_bake_covers_atlas() {
        let mesh = sphere(0.9, 24, 12);
        let style = MaterialStyle::new(1, 4).unwrap();
        let tex = make_texture(&style, &mesh, 96).unwrap();
        let mut rig = canonical_rig(1.0, 96);
        for v in rig.iter_mut() {
            rasterize(&mesh, v);
        }
        let rec = render_record("sphere", &mesh, &style, 4, &tex, &rig).unwrap();

        let pre = unproject(&rec.views, &mesh, 96, BakeOptions::default()).unwrap();
        let atlas = atlas_mask(&mesh, 96).unwrap();
        let atlas_count = atlas.iter().filter(|&&a| a).count();
        let pre_cov = pre
            .coverage
            .iter()
            .zip(atlas.iter())
            .filter(|(&c, &a)| c && a)
            .count();
        assert!(
            pre_cov as f64 >= 0.95 * atlas_count as f64,
            "pre-inpaint coverage {pre_cov}/{atlas_count}"
        );

        let full = inpaint(&dilate(&pre, 4), &atlas);
        for iy in 0..96 {
            for ix in 0..96 {
                if atlas[(iy, ix)] {
                    assert!(full.coverage[(iy, ix)]);
                    for c in 0..5 {
                        assert!(full.data[(c, iy, ix)].is_finite());
                    }
                }
            }
        }
    }

    fn smooth_texture(res: usize) -> UvTexture {
        let mut tex = UvTexture::zeros(res);
        for r in 0..res {
            let v = (r as f64 + 0.5) / res as f64;
            for c in 0..res {
                let u = (c as f64 + 0.5) / res as f64;
                for ch in 0..5 {
                    let phase = ch as f64 * 0.7;
                    let val = 0.5
                        + 0.22 * (2.0 * std::f64::consts::PI * (u + 0.5 * v) + phase).sin()
                        + 0.15 * (2.0 * std::f64::consts::PI * (2.0 * v - u) - phase).cos();
                    tex.data[(ch, r, c)] = val.clamp(0.0, 1.0);
                }
            }
        }
        tex.coverage.fill(true);
        tex
    }

    #[test]
    fn multiview_bake_reproduces_ground_truth() {
        let mesh = sphere(0.9, 32, 16);
        let tex = smooth_texture(128);
        let mut rig = canonical_rig(1.0, 128);
        for v in rig.iter_mut() {
            rasterize(&mesh, v);
        }
        let style = MaterialStyle::new(0, 13).unwrap();
        let rec = render_record("sphere", &mesh, &style, 13, &tex, &rig).unwrap();
        let baked = unproject(&rec.views, &mesh, 128, BakeOptions::default()).unwrap();
        let atlas = atlas_mask(&mesh, 128).unwrap();
        let mut se = 0.0;
        let mut n = 0usize;
        for iy in 0..128 {
            for ix in 0..128 {
                if baked.coverage[(iy, ix)] && atlas[(iy, ix)] {
                    for c in 0..5 {
                        let d = baked.data[(c, iy, ix)] - tex.data[(c, iy, ix)];
                        se += d * d;
                        n += 1;
                    }
                }
            }
        }
        let rmse = (se / n as f64).sqrt();
        assert!(rmse <= 0.02, "bake rmse {rmse}");
    }

    #[test]
    fn errors_on_missing_inputs() {
        let mesh = quad_mesh();
        assert!(matches!(
            unproject(&[], &mesh, 32, BakeOptions::default()),
            Err(BakeError::NoViews)
        ));
        let cam = crate::geometry::look_at(
            Vector3::new(0.0, 0.0, -2.0),
            Vector3::zeros(),
            Vector3::y(),
            1.0,
            32,
            32,
        );
        let img = PbrImage::zeros(32, 32);
        assert!(matches!(
            unproject(&[(cam, img)], &mesh, 32, BakeOptions::default()),
            Err(BakeError::ViewNotRasterized(0))
        ));
    }
}
