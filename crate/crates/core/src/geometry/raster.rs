//! Deterministic z-buffered triangle rasterization.
//!
//! Screen space is x right, y down, pixel centers at half-integers.
//! Triangles are wound to positive signed area before the fill; boundary
//! pixels (edge function exactly zero) follow the top-left rule, so two
//! triangles sharing an edge never both claim a pixel. Back faces are kept:
//! thin and open meshes stay visible from both sides.

use ndarray::{Array2, Array3};

use super::camera::{CameraView, ViewBuffers};
use super::mesh::Mesh;

#[derive(Clone, Copy)]
struct ScreenVertex {
    x: f64,
    y: f64,
    z: f64,
}

fn orient(a: &ScreenVertex, b: &ScreenVertex, px: f64, py: f64) -> f64 {
    (b.x - a.x) * (py - a.y) - (b.y - a.y) * (px - a.x)
}

/// Top-left rule for an edge `a -> b` of a positively wound triangle.
fn edge_inclusive(a: &ScreenVertex, b: &ScreenVertex) -> bool {
    let dx = b.x - a.x;
    let dy = b.y - a.y;
    (dy == 0.0 && dx > 0.0) || dy < 0.0
}

/// Rasterize `mesh` into `view`, filling its geometry buffers.
///
/// Zero-area triangles are skipped. Output is a pure function of the
/// inputs: faces are visited in index order and the depth test is strict,
/// so exact depth ties keep the earlier face.
pub fn rasterize(mesh: &Mesh, view: &mut CameraView) {
    let (h, w) = (view.height, view.width);
    let mut depth = Array2::<f64>::from_elem((h, w), f64::INFINITY);
    let mut normal = Array3::<f64>::zeros((h, w, 3));
    let mut position = Array3::<f64>::zeros((h, w, 3));
    let mut uv = Array3::<f64>::zeros((h, w, 2));
    let mut mask = Array2::<bool>::from_elem((h, w), false);
    let mut face_buf = Array2::<i64>::from_elem((h, w), -1);

    let has_uv = mesh.has_uv();
    for (fi, face) in mesh.faces.iter().enumerate() {
        let mut sv = [ScreenVertex { x: 0.0, y: 0.0, z: 0.0 }; 3];
        for (k, &vi) in face.iter().enumerate() {
            let ([px, py], z) = view.project(&mesh.vertices[vi]);
            sv[k] = ScreenVertex { x: px, y: py, z };
        }
        // wind to positive area; remember the swap to permute attributes
        let mut order = [0usize, 1, 2];
        let mut area = orient(&sv[0], &sv[1], sv[2].x, sv[2].y);
        if area < 0.0 {
            sv.swap(1, 2);
            order.swap(1, 2);
            area = -area;
        }
        if area == 0.0 {
            continue;
        }

        let min_x = sv.iter().map(|v| v.x).fold(f64::INFINITY, f64::min);
        let max_x = sv.iter().map(|v| v.x).fold(f64::NEG_INFINITY, f64::max);
        let min_y = sv.iter().map(|v| v.y).fold(f64::INFINITY, f64::min);
        let max_y = sv.iter().map(|v| v.y).fold(f64::NEG_INFINITY, f64::max);
        let x0 = (min_x - 0.5).floor().max(0.0) as usize;
        let x1 = ((max_x - 0.5).ceil() as isize).min(w as isize - 1).max(-1);
        let y0 = (min_y - 0.5).floor().max(0.0) as usize;
        let y1 = ((max_y - 0.5).ceil() as isize).min(h as isize - 1).max(-1);
        if x1 < 0 || y1 < 0 {
            continue;
        }

        let incl = [
            edge_inclusive(&sv[1], &sv[2]),
            edge_inclusive(&sv[2], &sv[0]),
            edge_inclusive(&sv[0], &sv[1]),
        ];
        for iy in y0..=(y1 as usize) {
            let py = iy as f64 + 0.5;
            for ix in x0..=(x1 as usize) {
                let px = ix as f64 + 0.5;
                // w_k is the edge opposite vertex k
                let w0 = orient(&sv[1], &sv[2], px, py);
                let w1 = orient(&sv[2], &sv[0], px, py);
                let w2 = orient(&sv[0], &sv[1], px, py);
                let pass = (w0 > 0.0 || (w0 == 0.0 && incl[0]))
                    && (w1 > 0.0 || (w1 == 0.0 && incl[1]))
                    && (w2 > 0.0 || (w2 == 0.0 && incl[2]));
                if !pass {
                    continue;
                }
                let b0 = w0 / area;
                let b1 = w1 / area;
                let b2 = w2 / area;
                let z = b0 * sv[0].z + b1 * sv[1].z + b2 * sv[2].z;
                if z >= depth[(iy, ix)] {
                    continue;
                }
                depth[(iy, ix)] = z;
                mask[(iy, ix)] = true;
                face_buf[(iy, ix)] = fi as i64;

                // interpolate attributes in the swapped order
                let bary = [b0, b1, b2];
                let mut p = nalgebra::Vector3::zeros();
                let mut n = nalgebra::Vector3::zeros();
                for k in 0..3 {
                    let vi = face[order[k]];
                    p += mesh.vertices[vi] * bary[k];
                    n += mesh.normals[vi] * bary[k];
                }
                let n = if n.norm() > 1e-12 {
                    n / n.norm()
                } else {
                    n
                };
                for c in 0..3 {
                    position[(iy, ix, c)] = p[c];
                    normal[(iy, ix, c)] = n[c];
                }
                if has_uv {
                    let fuv = &mesh.uv[fi];
                    for c in 0..2 {
                        uv[(iy, ix, c)] = bary[0] * fuv[order[0]][c]
                            + bary[1] * fuv[order[1]][c]
                            + bary[2] * fuv[order[2]][c];
                    }
                }
            }
        }
    }

    view.buffers = Some(ViewBuffers {
        depth,
        normal,
        position,
        uv,
        mask,
        face: face_buf,
    });
}
