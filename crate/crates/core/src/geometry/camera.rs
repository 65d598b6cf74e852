//! Orthographic cameras and view rigs.
//!
//! Camera frame: x right, y up, z forward (the view direction). A world
//! point `p` maps to camera coordinates `q = R p + t`; the image plane is
//! spanned by `(q.x, q.y)` and `q.z` is depth. Pixel `(i, j)` covers the
//! half-open square `[j, j+1) x [i, i+1)` in continuous pixel coordinates,
//! so centers sit at half-integers.

use nalgebra::{Matrix3, Vector3};
use ndarray::{Array2, Array3};

/// Orthographic camera plus, once rasterized, its geometry buffers.
#[derive(Debug, Clone)]
pub struct CameraView {
    /// World-to-camera rotation.
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
    /// Half-extent of the visible image plane in world units.
    pub ortho_scale: f64,
    pub width: usize,
    pub height: usize,
    pub buffers: Option<ViewBuffers>,
}

/// Per-pixel geometry written by the rasterizer.
#[derive(Debug, Clone)]
pub struct ViewBuffers {
    /// Camera-space depth, `+inf` where empty.
    pub depth: Array2<f64>,
    /// World-space unit normals, zero where empty. `(H, W, 3)`
    pub normal: Array3<f64>,
    /// World-space positions, zero where empty. `(H, W, 3)`
    pub position: Array3<f64>,
    /// Interpolated UVs, zero where empty. `(H, W, 2)`
    pub uv: Array3<f64>,
    /// True exactly where depth is finite.
    pub mask: Array2<bool>,
    /// Winning face index, -1 where empty.
    pub face: Array2<i64>,
}

impl CameraView {
    pub fn new(
        rotation: Matrix3<f64>,
        translation: Vector3<f64>,
        ortho_scale: f64,
        width: usize,
        height: usize,
    ) -> Self {
        debug_assert!(ortho_scale > 0.0);
        Self {
            rotation,
            translation,
            ortho_scale,
            width,
            height,
            buffers: None,
        }
    }

    /// Rotation orthonormality defect `max |R^T R - I|`.
    pub fn rotation_defect(&self) -> f64 {
        let m = self.rotation.transpose() * self.rotation - Matrix3::identity();
        m.iter().fold(0.0f64, |a, &x| a.max(x.abs()))
    }

    /// Project a world point to continuous pixel coordinates and depth.
    ///
    /// Depth is the camera-frame z; negative depth means the point is
    /// behind the camera but it still projects.
    pub fn project(&self, p: &Vector3<f64>) -> ([f64; 2], f64) {
        let q = self.rotation * p + self.translation;
        let s2 = 2.0 * self.ortho_scale;
        let px = self.width as f64 * (0.5 + q.x / s2);
        let py = self.height as f64 * (0.5 - q.y / s2);
        ([px, py], q.z)
    }

    /// Inverse of [`project`](Self::project) for a known depth.
    pub fn unproject(&self, pixel: [f64; 2], depth: f64) -> Vector3<f64> {
        let s2 = 2.0 * self.ortho_scale;
        let qx = (pixel[0] / self.width as f64 - 0.5) * s2;
        let qy = (0.5 - pixel[1] / self.height as f64) * s2;
        let q = Vector3::new(qx, qy, depth);
        self.rotation.transpose() * (q - self.translation)
    }

    /// World-space direction the camera looks along.
    pub fn forward(&self) -> Vector3<f64> {
        self.rotation.transpose() * Vector3::new(0.0, 0.0, 1.0)
    }

    /// Nearest pixel of a continuous coordinate under the half-open pixel
    /// convention: the containing cell is the nearest center, with exact
    /// boundaries rounding half-up (toward the higher index).
    pub fn nearest_pixel(&self, pixel: [f64; 2]) -> Option<(usize, usize)> {
        let x = pixel[0].floor();
        let y = pixel[1].floor();
        if x < 0.0 || y < 0.0 || x >= self.width as f64 || y >= self.height as f64 {
            return None;
        }
        Some((y as usize, x as usize))
    }

    pub fn buffers(&self) -> &ViewBuffers {
        self.buffers
            .as_ref()
            .expect("view has not been rasterized")
    }
}

/// Camera at `eye` looking at `target`.
pub fn look_at(
    eye: Vector3<f64>,
    target: Vector3<f64>,
    up_hint: Vector3<f64>,
    ortho_scale: f64,
    width: usize,
    height: usize,
) -> CameraView {
    let forward = (target - eye).normalize();
    let mut right = up_hint.cross(&forward);
    if right.norm() < 1e-9 {
        // forward parallel to the hint; pick another axis
        let alt = if forward.x.abs() < 0.9 {
            Vector3::x()
        } else {
            Vector3::y()
        };
        right = alt.cross(&forward);
    }
    let right = right.normalize();
    let up = forward.cross(&right);
    let rotation = Matrix3::from_rows(&[
        right.transpose(),
        up.transpose(),
        forward.transpose(),
    ]);
    let translation = -(rotation * eye);
    CameraView::new(rotation, translation, ortho_scale, width, height)
}

/// The six axis-aligned views (front, back, left, right, top, bottom) at
/// distance 2 from the origin.
pub fn canonical_rig(ortho_scale: f64, size: usize) -> Vec<CameraView> {
    let dist = 2.0;
    let dirs = [
        (Vector3::new(0.0, 0.0, -dist), Vector3::y()),
        (Vector3::new(0.0, 0.0, dist), Vector3::y()),
        (Vector3::new(-dist, 0.0, 0.0), Vector3::y()),
        (Vector3::new(dist, 0.0, 0.0), Vector3::y()),
        (Vector3::new(0.0, dist, 0.0), Vector3::z()),
        (Vector3::new(0.0, -dist, 0.0), -Vector3::z()),
    ];
    dirs.iter()
        .map(|(eye, up)| look_at(*eye, Vector3::zeros(), *up, ortho_scale, size, size))
        .collect()
}

/// Training rig: `views` cameras spread over `elevations` rings at
/// distance 2.
pub fn ring_rig(views: usize, elevations: usize, ortho_scale: f64, size: usize) -> Vec<CameraView> {
    let dist = 2.0;
    let elevations = elevations.max(1);
    let per_ring = views / elevations;
    let mut out = Vec::with_capacity(views);
    let mut k = 0usize;
    for e in 0..elevations {
        let el = if elevations == 1 {
            0.35
        } else {
            -0.35 + 1.05 * e as f64 / (elevations - 1) as f64
        };
        let count = if e + 1 == elevations {
            views - per_ring * (elevations - 1)
        } else {
            per_ring
        };
        for i in 0..count {
            // stagger rings so azimuths do not repeat
            let az = 2.0 * std::f64::consts::PI * (i as f64 + 0.37 * e as f64) / count as f64;
            let eye = Vector3::new(
                dist * el.cos() * az.cos(),
                dist * el.sin(),
                dist * el.cos() * az.sin(),
            );
            out.push(look_at(
                eye,
                Vector3::zeros(),
                Vector3::y(),
                ortho_scale,
                size,
                size,
            ));
            k += 1;
        }
    }
    debug_assert_eq!(k, views);
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn camera_frame_origin_projects_to_image_center() {
        // place the camera so the camera-frame origin is the world origin
        let view = look_at(
            Vector3::new(0.0, 0.0, -2.0),
            Vector3::zeros(),
            Vector3::y(),
            1.0,
            64,
            64,
        );
        // camera-frame origin: q = 0 → world point p with R p + t = 0
        let p = view.rotation.transpose() * -view.translation;
        let ([px, py], depth) = view.project(&p);
        assert!((px - 32.0).abs() < 1e-12);
        assert!((py - 32.0).abs() < 1e-12);
        assert!(depth.abs() < 1e-12);
    }

    #[test]
    fn project_unproject_roundtrip() {
        let view = look_at(
            Vector3::new(1.3, 0.8, -1.5),
            Vector3::zeros(),
            Vector3::y(),
            1.2,
            96,
            64,
        );
        let p = Vector3::new(0.21, -0.43, 0.55);
        let (pix, depth) = view.project(&p);
        let back = view.unproject(pix, depth);
        assert!((back - p).norm() < 1e-12);
    }

    #[test]
    fn rigs_are_orthonormal_and_look_at_origin() {
        let mut views = canonical_rig(1.0, 32);
        views.extend(ring_rig(10, 2, 1.0, 32));
        for v in &views {
            assert!(v.rotation_defect() < 1e-12);
            let ([px, py], depth) = v.project(&Vector3::zeros());
            assert!((px - 16.0).abs() < 1e-9);
            assert!((py - 16.0).abs() < 1e-9);
            assert!((depth - 2.0).abs() < 1e-9);
        }
    }

    #[test]
    fn canonical_rig_has_opposing_pairs() {
        let rig = canonical_rig(1.0, 16);
        assert_eq!(rig.len(), 6);
        let f0 = rig[0].forward();
        let f1 = rig[1].forward();
        assert!((f0 + f1).norm() < 1e-12);
    }

    #[test]
    fn nearest_pixel_half_open() {
        let view = CameraView::new(Matrix3::identity(), Vector3::zeros(), 1.0, 8, 8);
        assert_eq!(view.nearest_pixel([3.2, 4.9]), Some((4, 3)));
        // an exact boundary belongs to the higher cell
        assert_eq!(view.nearest_pixel([3.0, 4.0]), Some((4, 3)));
        assert_eq!(view.nearest_pixel([8.0, 1.0]), None);
        assert_eq!(view.nearest_pixel([-0.1, 1.0]), None);
    }
}
