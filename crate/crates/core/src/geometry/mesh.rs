//! Triangle meshes with per-face-vertex UVs, plus parametric generators.
//!
//! Generated meshes fit inside the unit ball so any view direction with
//! `ortho_scale = 1` frames them fully. UV atlases are seam-free in the
//! sense that no face's UV triangle wraps across the chart boundary.

use nalgebra::Vector3;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum GeometryError {
    #[error("face {face} references vertex {index}, but the mesh has {count} vertices")]
    FaceIndex {
        face: usize,
        index: usize,
        count: usize,
    },
    #[error("vertex {index} normal has length {len}, expected 1")]
    NormalLength { index: usize, len: f64 },
    #[error("face {face} UV {uv:?} outside [0,1]^2")]
    UvRange { face: usize, uv: [f64; 2] },
    #[error("mesh bounding box exceeds [-1,1]^3 (extent {extent})")]
    Bounds { extent: f64 },
    #[error("mesh has no UV coordinates")]
    MissingUv,
    #[error("obj parse error at line {line}: {reason}")]
    ObjParse { line: usize, reason: String },
}

/// Triangle mesh in object space, bounded to `[-1,1]^3`.
#[derive(Debug, Clone)]
pub struct Mesh {
    pub vertices: Vec<Vector3<f64>>,
    pub faces: Vec<[usize; 3]>,
    /// UVs per face corner, `[0,1]^2`.
    pub uv: Vec<[[f64; 2]; 3]>,
    /// Unit normals per vertex.
    pub normals: Vec<Vector3<f64>>,
}

impl Mesh {
    pub fn validate(&self) -> Result<(), GeometryError> {
        let count = self.vertices.len();
        for (fi, f) in self.faces.iter().enumerate() {
            for &i in f {
                if i >= count {
                    return Err(GeometryError::FaceIndex {
                        face: fi,
                        index: i,
                        count,
                    });
                }
            }
        }
        for (i, n) in self.normals.iter().enumerate() {
            let len = n.norm();
            if (len - 1.0).abs() > 1e-6 {
                return Err(GeometryError::NormalLength { index: i, len });
            }
        }
        for (fi, corners) in self.uv.iter().enumerate() {
            for uv in corners {
                if !(0.0..=1.0).contains(&uv[0]) || !(0.0..=1.0).contains(&uv[1]) {
                    return Err(GeometryError::UvRange { face: fi, uv: *uv });
                }
            }
        }
        let extent = self
            .vertices
            .iter()
            .flat_map(|v| [v.x.abs(), v.y.abs(), v.z.abs()])
            .fold(0.0f64, f64::max);
        if extent > 1.0 + 1e-9 {
            return Err(GeometryError::Bounds { extent });
        }
        Ok(())
    }

    pub fn has_uv(&self) -> bool {
        !self.uv.is_empty()
    }

    /// Area-weighted vertex normals from face geometry.
    pub fn compute_vertex_normals(&mut self) {
        let mut acc = vec![Vector3::zeros(); self.vertices.len()];
        for f in &self.faces {
            let [a, b, c] = *f;
            let n = (self.vertices[b] - self.vertices[a])
                .cross(&(self.vertices[c] - self.vertices[a]));
            acc[a] += n;
            acc[b] += n;
            acc[c] += n;
        }
        self.normals = acc
            .into_iter()
            .map(|n| {
                let len = n.norm();
                if len > 1e-12 {
                    n / len
                } else {
                    Vector3::new(0.0, 0.0, 1.0)
                }
            })
            .collect();
    }
}

/// UV sphere. `radius` should stay below 1.
pub fn sphere(radius: f64, segments: usize, rings: usize) -> Mesh {
    let mut vertices = Vec::new();
    let mut normals = Vec::new();
    // grid of (rings+1) x (segments+1) vertices; the seam column is
    // duplicated so faces never wrap in UV
    for r in 0..=rings {
        let theta = std::f64::consts::PI * r as f64 / rings as f64;
        for s in 0..=segments {
            let phi = 2.0 * std::f64::consts::PI * s as f64 / segments as f64;
            let n = Vector3::new(
                theta.sin() * phi.cos(),
                theta.cos(),
                theta.sin() * phi.sin(),
            );
            vertices.push(n * radius);
            normals.push(if r == 0 {
                Vector3::new(0.0, 1.0, 0.0)
            } else if r == rings {
                Vector3::new(0.0, -1.0, 0.0)
            } else {
                n
            });
        }
    }
    let cols = segments + 1;
    let mut faces = Vec::new();
    let mut uv = Vec::new();
    let uv_at = |r: usize, s: usize| -> [f64; 2] {
        [s as f64 / segments as f64, r as f64 / rings as f64]
    };
    for r in 0..rings {
        for s in 0..segments {
            let i00 = r * cols + s;
            let i01 = r * cols + s + 1;
            let i10 = (r + 1) * cols + s;
            let i11 = (r + 1) * cols + s + 1;
            if r > 0 {
                faces.push([i00, i10, i01]);
                uv.push([uv_at(r, s), uv_at(r + 1, s), uv_at(r, s + 1)]);
            }
            if r + 1 < rings {
                faces.push([i01, i10, i11]);
                uv.push([uv_at(r, s + 1), uv_at(r + 1, s), uv_at(r + 1, s + 1)]);
            }
        }
    }
    let mesh = Mesh {
        vertices,
        faces,
        uv,
        normals,
    };
    debug_assert!(mesh.validate().is_ok());
    mesh
}

/// Axis-aligned cube with `half` half-extent and a 3x2 face atlas.
pub fn cube(half: f64) -> Mesh {
    let mut vertices = Vec::new();
    let mut normals = Vec::new();
    let mut faces = Vec::new();
    let mut uv = Vec::new();
    // (normal, tangent u, tangent v) per face
    let sides: [(Vector3<f64>, Vector3<f64>, Vector3<f64>); 6] = [
        (Vector3::x(), Vector3::z(), Vector3::y()),
        (-Vector3::x(), -Vector3::z(), Vector3::y()),
        (Vector3::y(), Vector3::x(), Vector3::z()),
        (-Vector3::y(), Vector3::x(), -Vector3::z()),
        (Vector3::z(), -Vector3::x(), Vector3::y()),
        (-Vector3::z(), Vector3::x(), Vector3::y()),
    ];
    // atlas: 3 columns x 2 rows, with a small inset so face borders do not bleed
    for (k, (n, tu, tv)) in sides.iter().enumerate() {
        let base = vertices.len();
        let col = (k % 3) as f64;
        let row = (k / 3) as f64;
        let inset = 0.01;
        let cell = |du: f64, dv: f64| -> [f64; 2] {
            [
                (col + inset + du * (1.0 - 2.0 * inset)) / 3.0,
                (row + inset + dv * (1.0 - 2.0 * inset)) / 2.0,
            ]
        };
        for (du, dv) in [(0.0, 0.0), (1.0, 0.0), (1.0, 1.0), (0.0, 1.0)] {
            let p = n * half + tu * half * (2.0 * du - 1.0) + tv * half * (2.0 * dv - 1.0);
            vertices.push(p);
            normals.push(*n);
        }
        faces.push([base, base + 1, base + 2]);
        uv.push([cell(0.0, 0.0), cell(1.0, 0.0), cell(1.0, 1.0)]);
        faces.push([base, base + 2, base + 3]);
        uv.push([cell(0.0, 0.0), cell(1.0, 1.0), cell(0.0, 1.0)]);
    }
    let mesh = Mesh {
        vertices,
        faces,
        uv,
        normals,
    };
    debug_assert!(mesh.validate().is_ok());
    mesh
}

/// Torus around the y axis. `major + minor` should stay below 1.
pub fn torus(major: f64, minor: f64, segments: usize, rings: usize) -> Mesh {
    let mut vertices = Vec::new();
    let mut normals = Vec::new();
    for s in 0..=segments {
        let phi = 2.0 * std::f64::consts::PI * s as f64 / segments as f64;
        let center = Vector3::new(phi.cos() * major, 0.0, phi.sin() * major);
        for r in 0..=rings {
            let theta = 2.0 * std::f64::consts::PI * r as f64 / rings as f64;
            let n = Vector3::new(
                phi.cos() * theta.cos(),
                theta.sin(),
                phi.sin() * theta.cos(),
            );
            vertices.push(center + n * minor);
            normals.push(n);
        }
    }
    let cols = rings + 1;
    let mut faces = Vec::new();
    let mut uv = Vec::new();
    let uv_at = |s: usize, r: usize| -> [f64; 2] {
        [s as f64 / segments as f64, r as f64 / rings as f64]
    };
    for s in 0..segments {
        for r in 0..rings {
            let i00 = s * cols + r;
            let i01 = s * cols + r + 1;
            let i10 = (s + 1) * cols + r;
            let i11 = (s + 1) * cols + r + 1;
            faces.push([i00, i10, i01]);
            uv.push([uv_at(s, r), uv_at(s + 1, r), uv_at(s, r + 1)]);
            faces.push([i01, i10, i11]);
            uv.push([uv_at(s, r + 1), uv_at(s + 1, r), uv_at(s + 1, r + 1)]);
        }
    }
    let mesh = Mesh {
        vertices,
        faces,
        uv,
        normals,
    };
    debug_assert!(mesh.validate().is_ok());
    mesh
}

/// Capsule along the y axis: cylinder of `half_height` with hemisphere caps.
pub fn capsule(radius: f64, half_height: f64, segments: usize, rings: usize) -> Mesh {
    // parameterized like a sphere stretched at the equator; v runs pole to
    // pole with the cylinder occupying the middle band
    let rings = rings.max(4) & !1; // even
    let mut vertices = Vec::new();
    let mut normals = Vec::new();
    let total_arc = std::f64::consts::PI * radius + 2.0 * half_height;
    for r in 0..=rings {
        let f = r as f64 / rings as f64;
        // map f through the composite profile: top cap, cylinder, bottom cap
        let cap_arc = 0.5 * std::f64::consts::PI * radius;
        let s_len = f * total_arc;
        let (y, ring_rad, ny, nr) = if s_len <= cap_arc {
            let a = s_len / radius; // 0..pi/2 from top pole
            (
                half_height + radius * a.cos(),
                radius * a.sin(),
                a.cos(),
                a.sin(),
            )
        } else if s_len <= cap_arc + 2.0 * half_height {
            let h = s_len - cap_arc;
            (half_height - h, radius, 0.0, 1.0)
        } else {
            let a = (s_len - cap_arc - 2.0 * half_height) / radius;
            (
                -half_height - radius * a.sin(),
                radius * a.cos(),
                -a.sin(),
                a.cos(),
            )
        };
        for s in 0..=segments {
            let phi = 2.0 * std::f64::consts::PI * s as f64 / segments as f64;
            vertices.push(Vector3::new(ring_rad * phi.cos(), y, ring_rad * phi.sin()));
            let n = Vector3::new(nr * phi.cos(), ny, nr * phi.sin());
            let len = n.norm();
            normals.push(if len > 1e-12 {
                n / len
            } else {
                Vector3::new(0.0, if y > 0.0 { 1.0 } else { -1.0 }, 0.0)
            });
        }
    }
    let cols = segments + 1;
    let mut faces = Vec::new();
    let mut uv = Vec::new();
    let uv_at = |r: usize, s: usize| -> [f64; 2] {
        [s as f64 / segments as f64, r as f64 / rings as f64]
    };
    for r in 0..rings {
        for s in 0..segments {
            let i00 = r * cols + s;
            let i01 = r * cols + s + 1;
            let i10 = (r + 1) * cols + s;
            let i11 = (r + 1) * cols + s + 1;
            if r > 0 {
                faces.push([i00, i10, i01]);
                uv.push([uv_at(r, s), uv_at(r + 1, s), uv_at(r, s + 1)]);
            }
            if r + 1 < rings {
                faces.push([i01, i10, i11]);
                uv.push([uv_at(r, s + 1), uv_at(r + 1, s), uv_at(r + 1, s + 1)]);
            }
        }
    }
    let mesh = Mesh {
        vertices,
        faces,
        uv,
        normals,
    };
    debug_assert!(mesh.validate().is_ok());
    mesh
}

/// Construct one of the built-in shapes by name with desk-scale tessellation.
pub fn by_name(name: &str) -> Option<Mesh> {
    match name {
        "sphere" => Some(sphere(0.9, 24, 12)),
        "cube" => Some(cube(0.7)),
        "torus" => Some(torus(0.62, 0.28, 24, 12)),
        "capsule" => Some(capsule(0.45, 0.42, 20, 12)),
        _ => None,
    }
}
