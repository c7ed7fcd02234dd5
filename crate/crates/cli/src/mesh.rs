//! Minimal OBJ reading and per-vertex colored PLY/OBJ writing.

use std::fmt::Write as _;
use std::path::Path;

use crate::error::{CliError, CliResult};

/// Lattice cells spanned by the bounding-box diagonal unless overridden.
pub const DEFAULT_CELLS_PER_DIAGONAL: f64 = 4.0;

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Mesh {
    pub vertices: Vec<[f64; 3]>,
    /// Zero-based vertex indices, polygons kept as given.
    pub faces: Vec<Vec<usize>>,
}

impl Mesh {
    /// Parses `v` and `f` records; other records are ignored. Face entries may
    /// be `i`, `i/t`, `i//n` or `i/t/n`, with negative indices counting back.
    pub fn parse_obj(text: &str) -> CliResult<Self> {
        let mut mesh = Mesh::default();
        for (lineno, line) in text.lines().enumerate() {
            let bad = |what: &str| CliError::usage(format!("obj line {}: {what}", lineno + 1));
            let mut it = line.split_whitespace();
            match it.next() {
                Some("v") => {
                    let c: Vec<f64> = it
                        .take(3)
                        .map(|s| s.parse::<f64>().map_err(|_| bad("bad vertex coordinate")))
                        .collect::<CliResult<_>>()?;
                    if c.len() != 3 || c.iter().any(|v| !v.is_finite()) {
                        return Err(bad("vertex needs three finite coordinates"));
                    }
                    mesh.vertices.push([c[0], c[1], c[2]]);
                }
                Some("f") => {
                    let n = mesh.vertices.len() as i64;
                    let face = it
                        .map(|tok| {
                            let idx: i64 = tok
                                .split('/')
                                .next()
                                .unwrap_or("")
                                .parse()
                                .map_err(|_| bad("bad face index"))?;
                            let zero = if idx < 0 { n + idx } else { idx - 1 };
                            if idx == 0 || zero < 0 || zero >= n {
                                return Err(bad("face index out of range"));
                            }
                            Ok(zero as usize)
                        })
                        .collect::<CliResult<Vec<_>>>()?;
                    if face.len() < 3 {
                        return Err(bad("face needs at least three vertices"));
                    }
                    mesh.faces.push(face);
                }
                _ => {}
            }
        }
        if mesh.vertices.is_empty() {
            return Err(CliError::usage("obj file has no vertices"));
        }
        Ok(mesh)
    }

    pub fn load_obj(path: &Path) -> CliResult<Self> {
        let text =
            std::fs::read_to_string(path).map_err(|e| CliError::from(e).context(path.display()))?;
        Self::parse_obj(&text).map_err(|e| e.context(path.display()))
    }

    pub fn bounds(&self) -> ([f64; 3], [f64; 3]) {
        let mut lo = [f64::INFINITY; 3];
        let mut hi = [f64::NEG_INFINITY; 3];
        for v in &self.vertices {
            for k in 0..3 {
                lo[k] = lo[k].min(v[k]);
                hi[k] = hi[k].max(v[k]);
            }
        }
        (lo, hi)
    }

    /// Lattice units per model unit that make the bounding-box diagonal span
    /// `cells` lattice cells. A degenerate box maps with scale 1.
    pub fn lattice_scale(&self, cells: f64) -> f64 {
        let (lo, hi) = self.bounds();
        let diag = (0..3).map(|k| (hi[k] - lo[k]).powi(2)).sum::<f64>().sqrt();
        if diag > 0.0 {
            cells / diag
        } else {
            1.0
        }
    }

    /// Vertex positions in lattice units, measured from the box minimum.
    pub fn lattice_positions(&self, scale: f64) -> Vec<f64> {
        let (lo, _) = self.bounds();
        self.vertices
            .iter()
            .flat_map(|v| (0..3).map(move |k| (v[k] - lo[k]) * scale))
            .collect()
    }

    /// ASCII PLY with `uchar` per-vertex colors.
    pub fn to_ply(&self, colors: &[[f32; 3]]) -> String {
        let mut s = String::new();
        let _ = write!(
            s,
            "ply\nformat ascii 1.0\nelement vertex {}\nproperty float x\nproperty float y\nproperty float z\n\
             property uchar red\nproperty uchar green\nproperty uchar blue\nelement face {}\n\
             property list uchar int vertex_indices\nend_header\n",
            self.vertices.len(),
            self.faces.len()
        );
        for (v, c) in self.vertices.iter().zip(colors) {
            let [r, g, b] = c.map(crate::imageio::to_u8);
            let _ = writeln!(s, "{} {} {} {r} {g} {b}", v[0], v[1], v[2]);
        }
        for f in &self.faces {
            let _ = write!(s, "{}", f.len());
            for i in f {
                let _ = write!(s, " {i}");
            }
            s.push('\n');
        }
        s
    }

    /// OBJ with the common `v x y z r g b` color extension, colors in `[0, 1]`.
    pub fn to_colored_obj(&self, colors: &[[f32; 3]]) -> String {
        let mut s = String::new();
        for (v, c) in self.vertices.iter().zip(colors) {
            let [r, g, b] = c.map(|x| x.clamp(0.0, 1.0));
            let _ = writeln!(s, "v {} {} {} {r} {g} {b}", v[0], v[1], v[2]);
        }
        for f in &self.faces {
            s.push('f');
            for i in f {
                let _ = write!(s, " {}", i + 1);
            }
            s.push('\n');
        }
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const CUBE_CORNER: &str =
        "# tri\nv 0 0 0\nv 2 0 0\nvt 0 0\nv 0 2 0\nv 0 0 1\nf 1/1 2/1 3/1\nf -1//1 -2//1 -3//1\n";

    #[test]
    fn parses_index_forms() {
        let m = Mesh::parse_obj(CUBE_CORNER).unwrap();
        assert_eq!(m.vertices.len(), 4);
        assert_eq!(m.faces, vec![vec![0, 1, 2], vec![3, 2, 1]]);
        assert!(Mesh::parse_obj("v 0 0\n").is_err());
        assert!(Mesh::parse_obj("v 0 0 0\nf 1 2 3\n").is_err());
        assert!(Mesh::parse_obj("f 1 2 3\n").is_err());
    }

    #[test]
    fn scale_maps_diagonal_to_cells() {
        let m = Mesh::parse_obj(CUBE_CORNER).unwrap();
        let s = m.lattice_scale(DEFAULT_CELLS_PER_DIAGONAL);
        assert!((s * 3.0 - 4.0).abs() < 1e-12);
        let p = m.lattice_positions(s);
        assert_eq!(&p[3..6], &[2.0 * s, 0.0, 0.0]);
    }

    #[test]
    fn writers_emit_one_color_per_vertex() {
        let m = Mesh::parse_obj(CUBE_CORNER).unwrap();
        let colors = vec![[0.0, 0.5, 1.0], [2.0, -1.0, 0.25], [0.0; 3], [1.0; 3]];
        let ply = m.to_ply(&colors);
        assert!(ply.contains("element vertex 4\n"));
        assert!(ply.contains("\n2 0 0 255 0 64\n"));
        assert!(ply.ends_with("3 3 2 1\n"));
        let obj = m.to_colored_obj(&colors);
        assert!(obj.contains("v 2 0 0 1 0 0.25\n"));
        assert!(obj.ends_with("f 4 3 2\n"));
        let reparsed = Mesh::parse_obj(&obj).unwrap();
        assert_eq!(reparsed, m);
    }
}
