//! Indexed triangle meshes and binary PLY I/O.

use std::collections::HashMap;
use std::fs::File;
use std::io::{self, BufReader, BufWriter, Read, Write};
use std::path::Path;

use thiserror::Error;

use crate::geometry::Vec3;
use crate::scalar::Scalar;

#[derive(Debug, Error)]
pub enum MeshIoError {
    #[error("io error: {0}")]
    Io(#[from] io::Error),
    #[error("ply parse error at byte {offset}: {message}")]
    Parse { offset: u64, message: String },
    #[error("ply {element} block truncated at byte {offset}: expected {expected} elements, got {got}")]
    Truncated {
        element: &'static str,
        expected: usize,
        got: usize,
        offset: u64,
    },
}

/// Indexed triangle set with vertex positions in meters.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct TriangleMesh<T> {
    pub vertices: Vec<Vec3<T>>,
    pub triangles: Vec<[u32; 3]>,
    pub normals: Option<Vec<Vec3<T>>>,
}

impl<T: Scalar> TriangleMesh<T> {
    pub fn is_empty(&self) -> bool {
        self.triangles.is_empty()
    }

    pub fn triangle_vertices(&self, t: usize) -> [Vec3<T>; 3] {
        let [a, b, c] = self.triangles[t];
        [
            self.vertices[a as usize],
            self.vertices[b as usize],
            self.vertices[c as usize],
        ]
    }

    pub fn triangle_area(&self, t: usize) -> T {
        let [a, b, c] = self.triangle_vertices(t);
        (b - a).cross(c - a).norm() * T::lit(0.5)
    }

    pub fn total_area(&self) -> T {
        (0..self.triangles.len())
            .map(|t| self.triangle_area(t))
            .sum()
    }

    /// Undirected edge -> incident triangle count.
    pub fn edge_counts(&self) -> HashMap<(u32, u32), u32> {
        let mut counts = HashMap::new();
        for tri in &self.triangles {
            for e in 0..3 {
                let a = tri[e];
                let b = tri[(e + 1) % 3];
                let key = (a.min(b), a.max(b));
                *counts.entry(key).or_insert(0) += 1;
            }
        }
        counts
    }

    /// True when every edge is shared by exactly two triangles.
    pub fn is_closed(&self) -> bool {
        !self.is_empty() && self.edge_counts().values().all(|&c| c == 2)
    }

    /// V - E + F (2 for a closed surface of genus 0).
    pub fn euler_characteristic(&self) -> i64 {
        let v = self.vertices.len() as i64;
        let e = self.edge_counts().len() as i64;
        let f = self.triangles.len() as i64;
        v - e + f
    }
}

/// Writes a binary little-endian PLY: float32 positions, int32 triangle
/// indices.
pub fn write_ply<T: Scalar>(mesh: &TriangleMesh<T>, path: &Path) -> Result<(), MeshIoError> {
    let mut w = BufWriter::new(File::create(path)?);
    write!(
        w,
        "ply\nformat binary_little_endian 1.0\nelement vertex {}\nproperty float x\nproperty float y\nproperty float z\nelement face {}\nproperty list uchar int vertex_indices\nend_header\n",
        mesh.vertices.len(),
        mesh.triangles.len()
    )?;
    for v in &mesh.vertices {
        for c in [v.x, v.y, v.z] {
            w.write_all(&(c.as_f64() as f32).to_le_bytes())?;
        }
    }
    for t in &mesh.triangles {
        w.write_all(&[3u8])?;
        for &i in t {
            w.write_all(&(i as i32).to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Reads the PLY subset produced by [`write_ply`].
pub fn read_ply<T: Scalar>(path: &Path) -> Result<TriangleMesh<T>, MeshIoError> {
    let mut r = BufReader::new(File::open(path)?);
    let mut header = Vec::new();
    // Read the header byte-wise up to the end_header line.
    let mut line = Vec::new();
    let mut offset = 0u64;
    let mut n_vertices: Option<usize> = None;
    let mut n_faces: Option<usize> = None;
    let mut saw_end = false;
    let mut current_element: Option<String> = None;
    while !saw_end {
        line.clear();
        loop {
            let mut byte = [0u8; 1];
            if r.read(&mut byte)? == 0 {
                return Err(MeshIoError::Parse {
                    offset,
                    message: "unexpected end of file inside header".to_string(),
                });
            }
            offset += 1;
            if byte[0] == b'\n' {
                break;
            }
            line.push(byte[0]);
            if line.len() > 512 {
                return Err(MeshIoError::Parse {
                    offset,
                    message: "header line too long".to_string(),
                });
            }
        }
        let text = String::from_utf8_lossy(&line).trim().to_string();
        header.push(text.clone());
        if header.len() == 1 && text != "ply" {
            return Err(MeshIoError::Parse {
                offset,
                message: "missing ply magic".to_string(),
            });
        }
        if text.starts_with("format") && !text.contains("binary_little_endian") {
            return Err(MeshIoError::Parse {
                offset,
                message: format!("unsupported format: {text}"),
            });
        }
        if let Some(rest) = text.strip_prefix("element ") {
            let mut it = rest.split_whitespace();
            let name = it.next().unwrap_or("");
            let count: usize = it.next().and_then(|c| c.parse().ok()).ok_or_else(|| {
                MeshIoError::Parse {
                    offset,
                    message: format!("bad element line: {text}"),
                }
            })?;
            current_element = Some(name.to_string());
            match name {
                "vertex" => n_vertices = Some(count),
                "face" => n_faces = Some(count),
                other => {
                    return Err(MeshIoError::Parse {
                        offset,
                        message: format!("unsupported element: {other}"),
                    })
                }
            }
        }
        if text.starts_with("property") {
            // Only the exact layout written by write_ply is supported.
            let ok = match current_element.as_deref() {
                Some("vertex") => {
                    text == "property float x"
                        || text == "property float y"
                        || text == "property float z"
                }
                Some("face") => text == "property list uchar int vertex_indices",
                _ => false,
            };
            if !ok {
                return Err(MeshIoError::Parse {
                    offset,
                    message: format!("unsupported property: {text}"),
                });
            }
        }
        if text == "end_header" {
            saw_end = true;
        }
    }
    let n_vertices = n_vertices.ok_or(MeshIoError::Parse {
        offset,
        message: "missing vertex element".to_string(),
    })?;
    let n_faces = n_faces.ok_or(MeshIoError::Parse {
        offset,
        message: "missing face element".to_string(),
    })?;

    let mut vertices = Vec::with_capacity(n_vertices);
    let mut buf = [0u8; 12];
    for i in 0..n_vertices {
        if let Err(e) = r.read_exact(&mut buf) {
            if e.kind() == io::ErrorKind::UnexpectedEof {
                return Err(MeshIoError::Truncated {
                    element: "vertex",
                    expected: n_vertices,
                    got: i,
                    offset,
                });
            }
            return Err(e.into());
        }
        offset += 12;
        let x = f32::from_le_bytes(buf[0..4].try_into().unwrap());
        let y = f32::from_le_bytes(buf[4..8].try_into().unwrap());
        let z = f32::from_le_bytes(buf[8..12].try_into().unwrap());
        vertices.push(Vec3::from_f64(x as f64, y as f64, z as f64));
    }
    let mut triangles = Vec::with_capacity(n_faces);
    for i in 0..n_faces {
        let mut count = [0u8; 1];
        let mut idx = [0u8; 12];
        let res = r
            .read_exact(&mut count)
            .and_then(|_| r.read_exact(&mut idx));
        if let Err(e) = res {
            if e.kind() == io::ErrorKind::UnexpectedEof {
                return Err(MeshIoError::Truncated {
                    element: "face",
                    expected: n_faces,
                    got: i,
                    offset,
                });
            }
            return Err(e.into());
        }
        offset += 13;
        if count[0] != 3 {
            return Err(MeshIoError::Parse {
                offset,
                message: format!("face {i} has {} vertices, only triangles supported", count[0]),
            });
        }
        let mut tri = [0u32; 3];
        for (k, t) in tri.iter_mut().enumerate() {
            let v = i32::from_le_bytes(idx[k * 4..(k + 1) * 4].try_into().unwrap());
            if v < 0 || v as usize >= n_vertices {
                return Err(MeshIoError::Parse {
                    offset,
                    message: format!("face {i} references vertex {v} of {n_vertices}"),
                });
            }
            *t = v as u32;
        }
        triangles.push(tri);
    }
    Ok(TriangleMesh {
        vertices,
        triangles,
        normals: None,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn two_triangle_mesh() -> TriangleMesh<f64> {
        TriangleMesh {
            vertices: vec![
                Vec3::from_f64(0.0, 0.0, 0.0),
                Vec3::from_f64(1.0, 0.0, 0.0),
                Vec3::from_f64(0.0, 1.0, 0.0),
                Vec3::from_f64(1.0, 1.0, 0.25),
            ],
            triangles: vec![[0, 1, 2], [1, 3, 2]],
            normals: None,
        }
    }

    #[test]
    fn ply_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("mesh.ply");
        let mesh = two_triangle_mesh();
        write_ply(&mesh, &path).unwrap();
        let back: TriangleMesh<f64> = read_ply(&path).unwrap();
        assert_eq!(back.triangles, mesh.triangles);
        for (a, b) in back.vertices.iter().zip(mesh.vertices.iter()) {
            assert!((*a - *b).norm() < 1e-6);
        }
    }

    #[test]
    fn empty_mesh_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("empty.ply");
        let mesh = TriangleMesh::<f64>::default();
        write_ply(&mesh, &path).unwrap();
        let back: TriangleMesh<f64> = read_ply(&path).unwrap();
        assert!(back.is_empty());
        assert!(back.vertices.is_empty());
    }

    #[test]
    fn truncated_vertex_block_names_counts() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("mesh.ply");
        write_ply(&two_triangle_mesh(), &path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        // Cut inside the second vertex record.
        let header_end = bytes.windows(11).position(|w| w == b"end_header\n").unwrap() + 11;
        std::fs::write(&path, &bytes[..header_end + 15]).unwrap();
        let err = read_ply::<f64>(&path).unwrap_err();
        match err {
            MeshIoError::Truncated {
                element,
                expected,
                got,
                ..
            } => {
                assert_eq!(element, "vertex");
                assert_eq!(expected, 4);
                assert_eq!(got, 1);
            }
            other => panic!("unexpected error {other}"),
        }
    }

    #[test]
    fn closed_and_euler_on_tetrahedron() {
        let mesh = TriangleMesh::<f64> {
            vertices: vec![
                Vec3::from_f64(0.0, 0.0, 0.0),
                Vec3::from_f64(1.0, 0.0, 0.0),
                Vec3::from_f64(0.0, 1.0, 0.0),
                Vec3::from_f64(0.0, 0.0, 1.0),
            ],
            triangles: vec![[0, 2, 1], [0, 1, 3], [0, 3, 2], [1, 2, 3]],
            normals: None,
        };
        assert!(mesh.is_closed());
        assert_eq!(mesh.euler_characteristic(), 2);
        let open = two_triangle_mesh();
        assert!(!open.is_closed());
    }
}
