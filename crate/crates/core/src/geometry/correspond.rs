//! Cross-view pixel correspondences.
//!
//! For an ordered view pair `(i, j)`, each covered source pixel's surface
//! point is projected into the target view and discretized to the nearest
//! pixel. The correspondence is valid when the projected depth agrees with
//! the target depth buffer within `eps_z`, i.e. the point is actually
//! visible there and not occluded.

use ndarray::{Array2, Array3};
use thiserror::Error;

use super::camera::CameraView;

#[derive(Debug, Error)]
pub enum CorrespondError {
    #[error("view {index} has no rasterized buffers")]
    MissingBuffers { index: usize },
    #[error("window size {k} must be odd and >= 1")]
    BadWindow { k: usize },
}

/// Discrete pixel correspondence for one ordered view pair.
#[derive(Debug, Clone)]
pub struct CorrespondenceMap {
    pub source_view: usize,
    pub target_view: usize,
    /// `(H, W, 2)` target (row, col), -1 where invalid or uncovered.
    pub target_pixel: Array3<i64>,
    /// Valid means: source covered, target in bounds, and depth-consistent.
    pub valid: Array2<bool>,
    pub window_size: usize,
    /// Target image extents, for window clipping.
    pub target_height: usize,
    pub target_width: usize,
}

impl CorrespondenceMap {
    /// Number of valid source pixels.
    pub fn valid_count(&self) -> usize {
        self.valid.iter().filter(|&&v| v).count()
    }

    /// Target pixel for a valid source pixel.
    pub fn target_of(&self, row: usize, col: usize) -> Option<(usize, usize)> {
        if self.valid[(row, col)] {
            Some((
                self.target_pixel[(row, col, 0)] as usize,
                self.target_pixel[(row, col, 1)] as usize,
            ))
        } else {
            None
        }
    }

    /// The K x K window centered on the target pixel, clipped to bounds.
    pub fn window_of(&self, row: usize, col: usize) -> Vec<(usize, usize)> {
        let Some((tr, tc)) = self.target_of(row, col) else {
            return Vec::new();
        };
        let r = (self.window_size / 2) as isize;
        let mut out = Vec::with_capacity(self.window_size * self.window_size);
        for dr in -r..=r {
            for dc in -r..=r {
                let rr = tr as isize + dr;
                let cc = tc as isize + dc;
                if rr >= 0
                    && cc >= 0
                    && (rr as usize) < self.target_height
                    && (cc as usize) < self.target_width
                {
                    out.push((rr as usize, cc as usize));
                }
            }
        }
        out
    }
}

/// Build the correspondence map from view `i` (source) into view `j`.
///
/// Both views must be rasterized. `eps_z` is the depth-agreement tolerance
/// in world units; `k` is the odd window edge used downstream by
/// restricted attention.
pub fn build_correspondence(
    views: &[CameraView],
    source: usize,
    target: usize,
    eps_z: f64,
    k: usize,
) -> Result<CorrespondenceMap, CorrespondError> {
    if k % 2 == 0 || k == 0 {
        return Err(CorrespondError::BadWindow { k });
    }
    let src = &views[source];
    let tgt = &views[target];
    let src_buf = src
        .buffers
        .as_ref()
        .ok_or(CorrespondError::MissingBuffers { index: source })?;
    let tgt_buf = tgt
        .buffers
        .as_ref()
        .ok_or(CorrespondError::MissingBuffers { index: target })?;

    let (h, w) = (src.height, src.width);
    let mut target_pixel = Array3::<i64>::from_elem((h, w, 2), -1);
    let mut valid = Array2::<bool>::from_elem((h, w), false);

    for row in 0..h {
        for col in 0..w {
            if !src_buf.mask[(row, col)] {
                continue;
            }
            let p = nalgebra::Vector3::new(
                src_buf.position[(row, col, 0)],
                src_buf.position[(row, col, 1)],
                src_buf.position[(row, col, 2)],
            );
            let (pix, depth) = tgt.project(&p);
            let Some((tr, tc)) = tgt.nearest_pixel(pix) else {
                continue;
            };
            let tdepth = tgt_buf.depth[(tr, tc)];
            if !tdepth.is_finite() || (depth - tdepth).abs() > eps_z {
                continue;
            }
            target_pixel[(row, col, 0)] = tr as i64;
            target_pixel[(row, col, 1)] = tc as i64;
            valid[(row, col)] = true;
        }
    }

    Ok(CorrespondenceMap {
        source_view: source,
        target_view: target,
        target_pixel,
        valid,
        window_size: k,
        target_height: tgt.height,
        target_width: tgt.width,
    })
}

/// Reduce a rasterized view by an integer factor, keeping per block the
/// sample with the nearest depth. Used to rebuild correspondences at the
/// latent resolution.
pub fn downsample_view(view: &CameraView, factor: usize) -> CameraView {
    let buf = view.buffers();
    let (h, w) = (view.height / factor, view.width / factor);
    let mut out = CameraView::new(
        view.rotation,
        view.translation,
        view.ortho_scale,
        w,
        h,
    );
    let mut depth = Array2::<f64>::from_elem((h, w), f64::INFINITY);
    let mut normal = Array3::<f64>::zeros((h, w, 3));
    let mut position = Array3::<f64>::zeros((h, w, 3));
    let mut uv = Array3::<f64>::zeros((h, w, 2));
    let mut mask = Array2::<bool>::from_elem((h, w), false);
    let mut face = Array2::<i64>::from_elem((h, w), -1);
    for row in 0..h {
        for col in 0..w {
            let mut best: Option<(usize, usize)> = None;
            let mut best_depth = f64::INFINITY;
            for dr in 0..factor {
                for dc in 0..factor {
                    let (sr, sc) = (row * factor + dr, col * factor + dc);
                    if buf.mask[(sr, sc)] && buf.depth[(sr, sc)] < best_depth {
                        best_depth = buf.depth[(sr, sc)];
                        best = Some((sr, sc));
                    }
                }
            }
            if let Some((sr, sc)) = best {
                depth[(row, col)] = buf.depth[(sr, sc)];
                mask[(row, col)] = true;
                face[(row, col)] = buf.face[(sr, sc)];
                for c in 0..3 {
                    normal[(row, col, c)] = buf.normal[(sr, sc, c)];
                    position[(row, col, c)] = buf.position[(sr, sc, c)];
                }
                for c in 0..2 {
                    uv[(row, col, c)] = buf.uv[(sr, sc, c)];
                }
            }
        }
    }
    out.buffers = Some(super::camera::ViewBuffers {
        depth,
        normal,
        position,
        uv,
        mask,
        face,
    });
    out
}
