//! Triangle meshes and PLY I/O.
//!
//! Vertex positions are interpreted as millimetres in the object frame. Models
//! are assumed to have their origin on the symmetry axis (true for the BOP
//! releases of LineMOD and T-LESS).

use std::fs::File;
use std::io::{BufReader, Read, Write};
use std::path::Path;

use ply_rs::parser::Parser;
use ply_rs::ply::{DefaultElement, Property};

use crate::error::{Error, Result};
use crate::geometry::{NormalizationBox, Vec3};

#[derive(Debug, Clone, PartialEq)]
pub struct Mesh {
    vertices: Vec<Vec3>,
    triangles: Vec<[u32; 3]>,
    diameter: f64,
}

impl Mesh {
    pub fn new(vertices: Vec<Vec3>, triangles: Vec<[u32; 3]>) -> Result<Self> {
        if vertices.is_empty() {
            return Err(Error::Input("mesh has no vertices".into()));
        }
        let n = vertices.len() as u32;
        if let Some(t) = triangles.iter().find(|t| t.iter().any(|&i| i >= n)) {
            return Err(Error::Input(format!(
                "triangle {t:?} references a vertex out of range (n = {n})"
            )));
        }
        let diameter = brute_force_diameter(&vertices);
        if !(diameter > 0.0) {
            return Err(Error::Input("mesh diameter is zero".into()));
        }
        Ok(Self {
            vertices,
            triangles,
            diameter,
        })
    }

    /// Axis-aligned box of size `sx × sy × sz` centered on the origin.
    pub fn cuboid(sx: f64, sy: f64, sz: f64) -> Self {
        let (hx, hy, hz) = (sx / 2.0, sy / 2.0, sz / 2.0);
        let vertices = vec![
            Vec3::new(-hx, -hy, -hz),
            Vec3::new(hx, -hy, -hz),
            Vec3::new(hx, hy, -hz),
            Vec3::new(-hx, hy, -hz),
            Vec3::new(-hx, -hy, hz),
            Vec3::new(hx, -hy, hz),
            Vec3::new(hx, hy, hz),
            Vec3::new(-hx, hy, hz),
        ];
        let triangles = vec![
            [0, 2, 1],
            [0, 3, 2],
            [4, 5, 6],
            [4, 6, 7],
            [0, 1, 5],
            [0, 5, 4],
            [3, 7, 6],
            [3, 6, 2],
            [0, 4, 7],
            [0, 7, 3],
            [1, 2, 6],
            [1, 6, 5],
        ];
        Self::new(vertices, triangles).expect("cuboid dimensions must be positive")
    }

    pub fn cube(side: f64) -> Self {
        Self::cuboid(side, side, side)
    }

    pub fn vertices(&self) -> &[Vec3] {
        &self.vertices
    }

    pub fn triangles(&self) -> &[[u32; 3]] {
        &self.triangles
    }

    /// Maximum pairwise vertex distance.
    pub fn diameter(&self) -> f64 {
        self.diameter
    }

    /// Default normalization bounds: the bounding box made symmetric about the
    /// origin.
    pub fn normalization_box(&self) -> Result<NormalizationBox> {
        NormalizationBox::centered_on_origin(self.vertices.iter())
    }

    pub fn load_ply(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let file = File::open(path)
            .map_err(|e| Error::Input(format!("cannot open mesh {}: {e}", path.display())))?;
        Self::read_ply(&mut BufReader::new(file))
    }

    pub fn read_ply(reader: &mut impl Read) -> Result<Self> {
        let parser = Parser::<DefaultElement>::new();
        let ply = parser
            .read_ply(reader)
            .map_err(|e| Error::Format(format!("PLY parse error: {e}")))?;

        let vertex_elems = ply
            .payload
            .get("vertex")
            .ok_or_else(|| Error::Format("PLY has no vertex element".into()))?;
        let mut vertices = Vec::with_capacity(vertex_elems.len());
        for v in vertex_elems {
            let coord = |name: &str| -> Result<f64> {
                v.get(name)
                    .and_then(scalar_as_f64)
                    .ok_or_else(|| Error::Format(format!("vertex lacks scalar `{name}`")))
            };
            vertices.push(Vec3::new(coord("x")?, coord("y")?, coord("z")?));
        }

        let mut triangles = Vec::new();
        if let Some(faces) = ply.payload.get("face") {
            for f in faces {
                let idx = f
                    .get("vertex_indices")
                    .or_else(|| f.get("vertex_index"))
                    .and_then(list_as_u32)
                    .ok_or_else(|| Error::Format("face lacks a vertex index list".into()))?;
                // fan triangulation of polygons
                for i in 1..idx.len().saturating_sub(1) {
                    triangles.push([idx[0], idx[i], idx[i + 1]]);
                }
            }
        }
        Self::new(vertices, triangles)
    }

    /// Writes `x y z` doubles and `uchar`/`uint` face lists, ASCII or binary
    /// little-endian.
    pub fn write_ply(&self, out: &mut impl Write, binary: bool) -> Result<()> {
        let format = if binary {
            "binary_little_endian"
        } else {
            "ascii"
        };
        write!(
            out,
            "ply\nformat {format} 1.0\nelement vertex {}\nproperty double x\nproperty double y\nproperty double z\nelement face {}\nproperty list uchar uint vertex_indices\nend_header\n",
            self.vertices.len(),
            self.triangles.len()
        )?;
        if binary {
            for v in &self.vertices {
                for c in [v.x, v.y, v.z] {
                    out.write_all(&c.to_le_bytes())?;
                }
            }
            for t in &self.triangles {
                out.write_all(&[3u8])?;
                for i in t {
                    out.write_all(&i.to_le_bytes())?;
                }
            }
        } else {
            for v in &self.vertices {
                writeln!(out, "{:?} {:?} {:?}", v.x, v.y, v.z)?;
            }
            for t in &self.triangles {
                writeln!(out, "3 {} {} {}", t[0], t[1], t[2])?;
            }
        }
        Ok(())
    }

    pub fn save_ply(&self, path: impl AsRef<Path>, binary: bool) -> Result<()> {
        let mut f = std::io::BufWriter::new(File::create(path)?);
        self.write_ply(&mut f, binary)?;
        f.flush()?;
        Ok(())
    }
}

/// O(n²) maximum pairwise distance.
pub fn brute_force_diameter(vertices: &[Vec3]) -> f64 {
    let mut best = 0.0f64;
    for (i, a) in vertices.iter().enumerate() {
        for b in &vertices[i + 1..] {
            best = best.max((a - b).norm_squared());
        }
    }
    best.sqrt()
}

fn scalar_as_f64(p: &Property) -> Option<f64> {
    Some(match *p {
        Property::Char(v) => v as f64,
        Property::UChar(v) => v as f64,
        Property::Short(v) => v as f64,
        Property::UShort(v) => v as f64,
        Property::Int(v) => v as f64,
        Property::UInt(v) => v as f64,
        Property::Float(v) => v as f64,
        Property::Double(v) => v,
        _ => return None,
    })
}

fn list_as_u32(p: &Property) -> Option<Vec<u32>> {
    fn conv<T: Copy + TryInto<u32>>(v: &[T]) -> Option<Vec<u32>> {
        v.iter().map(|&x| x.try_into().ok()).collect()
    }
    match p {
        Property::ListChar(v) => conv(v),
        Property::ListUChar(v) => conv(v),
        Property::ListShort(v) => conv(v),
        Property::ListUShort(v) => conv(v),
        Property::ListInt(v) => conv(v),
        Property::ListUInt(v) => Some(v.clone()),
        _ => None,
    }
}
