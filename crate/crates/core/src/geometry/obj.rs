//! Minimal OBJ import/export: `v`, `vn`, `vt`, `f` records.
//!
//! Faces may use `v`, `v/vt`, `v//vn`, or `v/vt/vn` references; polygons
//! are fan-triangulated. Missing normals are computed from the geometry;
//! missing UVs leave the mesh without an atlas.

use std::path::Path;

use nalgebra::Vector3;

use super::mesh::{GeometryError, Mesh};

pub fn load_obj(path: &Path) -> Result<Mesh, GeometryError> {
    let text = std::fs::read_to_string(path).map_err(|e| GeometryError::ObjParse {
        line: 0,
        reason: format!("cannot read {}: {e}", path.display()),
    })?;
    parse_obj(&text)
}

pub fn parse_obj(text: &str) -> Result<Mesh, GeometryError> {
    let mut positions: Vec<Vector3<f64>> = Vec::new();
    let mut normals_in: Vec<Vector3<f64>> = Vec::new();
    let mut uvs_in: Vec<[f64; 2]> = Vec::new();
    // corner = (position idx, uv idx, normal idx)
    let mut corners: Vec<Vec<(usize, Option<usize>, Option<usize>)>> = Vec::new();

    for (ln, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let mut it = line.split_whitespace();
        let tag = it.next().unwrap();
        let parse_err = |reason: &str| GeometryError::ObjParse {
            line: ln + 1,
            reason: reason.to_string(),
        };
        match tag {
            "v" | "vn" => {
                let mut xyz = [0.0f64; 3];
                for slot in xyz.iter_mut() {
                    *slot = it
                        .next()
                        .ok_or_else(|| parse_err("expected 3 coordinates"))?
                        .parse()
                        .map_err(|_| parse_err("bad float"))?;
                }
                let v = Vector3::new(xyz[0], xyz[1], xyz[2]);
                if tag == "v" {
                    positions.push(v);
                } else {
                    normals_in.push(v);
                }
            }
            "vt" => {
                let u: f64 = it
                    .next()
                    .ok_or_else(|| parse_err("expected uv"))?
                    .parse()
                    .map_err(|_| parse_err("bad float"))?;
                let v: f64 = it
                    .next()
                    .ok_or_else(|| parse_err("expected uv"))?
                    .parse()
                    .map_err(|_| parse_err("bad float"))?;
                uvs_in.push([u, v]);
            }
            "f" => {
                let mut face = Vec::new();
                for part in it {
                    let mut comps = part.split('/');
                    let vi: isize = comps
                        .next()
                        .ok_or_else(|| parse_err("empty face corner"))?
                        .parse()
                        .map_err(|_| parse_err("bad vertex index"))?;
                    let ti = match comps.next() {
                        Some("") | None => None,
                        Some(s) => Some(s.parse::<isize>().map_err(|_| parse_err("bad uv index"))?),
                    };
                    let ni = match comps.next() {
                        Some("") | None => None,
                        Some(s) => {
                            Some(s.parse::<isize>().map_err(|_| parse_err("bad normal index"))?)
                        }
                    };
                    let fix = |i: isize, n: usize| -> Result<usize, GeometryError> {
                        let idx = if i < 0 { n as isize + i } else { i - 1 };
                        if idx < 0 || idx as usize >= n {
                            Err(parse_err("face index out of range"))
                        } else {
                            Ok(idx as usize)
                        }
                    };
                    face.push((
                        fix(vi, positions.len())?,
                        ti.map(|i| fix(i, uvs_in.len())).transpose()?,
                        ni.map(|i| fix(i, normals_in.len())).transpose()?,
                    ));
                }
                if face.len() < 3 {
                    return Err(parse_err("face with fewer than 3 corners"));
                }
                corners.push(face);
            }
            _ => {} // o, g, s, mtllib, usemtl ignored
        }
    }

    let mut faces = Vec::new();
    let mut uv = Vec::new();
    let all_have_uv = !corners.is_empty()
        && corners
            .iter()
            .all(|face| face.iter().all(|&(_, t, _)| t.is_some()));
    let any_normals = corners
        .iter()
        .any(|face| face.iter().any(|&(_, _, n)| n.is_some()));

    // accumulate per-vertex normals from explicit corner normals
    let mut normal_acc = vec![Vector3::zeros(); positions.len()];
    for face in &corners {
        for tri in 1..face.len() - 1 {
            let idx = [face[0], face[tri], face[tri + 1]];
            faces.push([idx[0].0, idx[1].0, idx[2].0]);
            if all_have_uv {
                let clamp01 = |x: f64| x.clamp(0.0, 1.0);
                uv.push([
                    [clamp01(uvs_in[idx[0].1.unwrap()][0]), clamp01(uvs_in[idx[0].1.unwrap()][1])],
                    [clamp01(uvs_in[idx[1].1.unwrap()][0]), clamp01(uvs_in[idx[1].1.unwrap()][1])],
                    [clamp01(uvs_in[idx[2].1.unwrap()][0]), clamp01(uvs_in[idx[2].1.unwrap()][1])],
                ]);
            }
            for (pi, _, ni) in idx {
                if let Some(n) = ni {
                    normal_acc[pi] += normals_in[n];
                }
            }
        }
    }

    let mut mesh = Mesh {
        vertices: positions,
        faces,
        uv,
        normals: Vec::new(),
    };
    if any_normals && normal_acc.iter().any(|n| n.norm() > 1e-12) {
        mesh.normals = normal_acc
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
    } else {
        mesh.compute_vertex_normals();
    }
    Ok(mesh)
}

pub fn save_obj(mesh: &Mesh, path: &Path) -> std::io::Result<()> {
    use std::io::Write;
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    for v in &mesh.vertices {
        writeln!(out, "v {} {} {}", v.x, v.y, v.z)?;
    }
    for n in &mesh.normals {
        writeln!(out, "vn {} {} {}", n.x, n.y, n.z)?;
    }
    for corners in &mesh.uv {
        for c in corners {
            writeln!(out, "vt {} {}", c[0], c[1])?;
        }
    }
    for (fi, f) in mesh.faces.iter().enumerate() {
        let t = 3 * fi;
        writeln!(
            out,
            "f {}/{}/{} {}/{}/{} {}/{}/{}",
            f[0] + 1,
            t + 1,
            f[0] + 1,
            f[1] + 1,
            t + 2,
            f[1] + 1,
            f[2] + 1,
            t + 3,
            f[2] + 1,
        )?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::mesh::cube;

    #[test]
    fn parse_triangle_with_full_indices() {
        let text = "\
v 0 0 0
v 1 0 0
v 0 1 0
vt 0 0
vt 1 0
vt 0 1
vn 0 0 1
f 1/1/1 2/2/1 3/3/1
";
        let mesh = parse_obj(text).unwrap();
        assert_eq!(mesh.vertices.len(), 3);
        assert_eq!(mesh.faces.len(), 1);
        assert_eq!(mesh.uv.len(), 1);
        mesh.validate().unwrap();
    }

    #[test]
    fn quads_are_fan_triangulated() {
        let text = "\
v 0 0 0
v 1 0 0
v 1 1 0
v 0 1 0
f 1 2 3 4
";
        let mesh = parse_obj(text).unwrap();
        assert_eq!(mesh.faces.len(), 2);
        assert!(!mesh.has_uv());
        // normals synthesized
        assert_eq!(mesh.normals.len(), 4);
    }

    #[test]
    fn bad_index_has_line_number() {
        let err = parse_obj("v 0 0 0\nf 1 2 3\n").unwrap_err();
        assert!(err.to_string().contains("line 2"));
    }

    #[test]
    fn save_load_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("cube.obj");
        let mesh = cube(0.7);
        save_obj(&mesh, &path).unwrap();
        let back = load_obj(&path).unwrap();
        assert_eq!(back.vertices.len(), mesh.vertices.len());
        assert_eq!(back.faces.len(), mesh.faces.len());
        back.validate().unwrap();
        for (a, b) in mesh.vertices.iter().zip(back.vertices.iter()) {
            assert!((a - b).norm() < 1e-12);
        }
    }
}
