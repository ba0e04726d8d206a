//! File formats: sheaf descriptions (TOML) and trajectories (CSV).
//!
//! Sheaf file schema:
//!
//! ```toml
//! vertex_count = 2
//! vertex_stalk_dims = [2, 2]
//! # optional, one row-major matrix per vertex; identity when omitted
//! # vertex_grams = [[1.0, 0.0, 0.0, 1.0], [1.0, 0.0, 0.0, 1.0]]
//!
//! [[edges]]
//! tail = 0
//! head = 1
//! dim = 2
//! head_map = [1.0, 0.0, 0.0, 1.0]   # row-major, dim × dim F(head)
//! tail_map = [1.0, 0.0, 0.0, 1.0]   # row-major, dim × dim F(tail)
//! # gram = [...]                     # optional, row-major dim × dim
//! ```
//!
//! Vertex and edge order in the file defines the cochain block order.
//!
//! Trajectory CSV: optional `#` comment lines, a header `time,x0,x1,…`, then one
//! row per sample. Derivatives, when present, go to a companion file with the
//! same layout. Floats are written in shortest round-trip form.

use std::io::{BufRead, Write};
use std::path::{Path, PathBuf};

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::cochain::Cochain0;
use crate::dynamics::Trajectory;
use crate::error::{Error, Result};
use crate::graph::DirectedGraph;
use crate::sheaf::{EdgeStalk, Sheaf};
use crate::Real;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EdgeRecord {
    pub tail: usize,
    pub head: usize,
    pub dim: usize,
    pub head_map: Vec<f64>,
    pub tail_map: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gram: Option<Vec<f64>>,
}

/// Plain-data mirror of the sheaf file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SheafFile {
    pub vertex_count: usize,
    pub vertex_stalk_dims: Vec<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub vertex_grams: Option<Vec<Vec<f64>>>,
    #[serde(default)]
    pub edges: Vec<EdgeRecord>,
}

fn matrix<T: Real>(what: &str, rows: usize, cols: usize, data: &[f64]) -> Result<DMatrix<T>> {
    if data.len() != rows * cols {
        return Err(Error::Structure(format!(
            "{what}: expected {rows}×{cols} = {} entries, found {}",
            rows * cols,
            data.len()
        )));
    }
    Ok(DMatrix::from_row_iterator(rows, cols, data.iter().map(|&v| T::lit(v))))
}

fn row_major<T: Real>(m: &DMatrix<T>) -> Vec<f64> {
    let mut out = Vec::with_capacity(m.len());
    for i in 0..m.nrows() {
        for j in 0..m.ncols() {
            out.push(m[(i, j)].as_f64());
        }
    }
    out
}

fn is_identity<T: Real>(m: &DMatrix<T>) -> bool {
    m.is_square() && *m == DMatrix::identity(m.nrows(), m.ncols())
}

impl SheafFile {
    pub fn parse(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Parse(format!("sheaf file: {e}")))
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Parse(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    pub fn to_sheaf<T: Real>(&self) -> Result<Sheaf<T>> {
        let graph = DirectedGraph::new(self.vertex_count, self.edges.iter().map(|e| (e.tail, e.head)))?;
        let dims = &self.vertex_stalk_dims;
        if dims.len() != self.vertex_count {
            return Err(Error::Structure(format!(
                "{} vertex stalk dims for {} vertices",
                dims.len(),
                self.vertex_count
            )));
        }
        let stalks = self
            .edges
            .iter()
            .enumerate()
            .map(|(i, e)| {
                let head = matrix(&format!("edge {i} head_map"), e.dim, dims[e.head], &e.head_map)?;
                let tail = matrix(&format!("edge {i} tail_map"), e.dim, dims[e.tail], &e.tail_map)?;
                let stalk = EdgeStalk::new(head, tail);
                Ok(match &e.gram {
                    Some(g) => stalk.with_gram(matrix(&format!("edge {i} gram"), e.dim, e.dim, g)?),
                    None => stalk,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let grams = match &self.vertex_grams {
            Some(gs) => {
                if gs.len() != dims.len() {
                    return Err(Error::Structure(format!(
                        "{} vertex Grams for {} vertices",
                        gs.len(),
                        dims.len()
                    )));
                }
                gs.iter()
                    .zip(dims)
                    .enumerate()
                    .map(|(v, (g, &d))| matrix(&format!("vertex {v} gram"), d, d, g))
                    .collect::<Result<Vec<_>>>()?
            }
            None => dims.iter().map(|&d| DMatrix::identity(d, d)).collect(),
        };
        Sheaf::with_vertex_grams(graph, dims.clone(), stalks, grams)
    }

    /// Identity Grams are left implicit.
    pub fn from_sheaf<T: Real>(sheaf: &Sheaf<T>) -> Self {
        let grams = sheaf.vertex_grams();
        let vertex_grams = if grams.iter().all(is_identity) {
            None
        } else {
            Some(grams.iter().map(row_major).collect())
        };
        let edges = sheaf
            .graph()
            .edges()
            .iter()
            .zip(sheaf.edge_stalks())
            .map(|(e, s)| EdgeRecord {
                tail: e.tail,
                head: e.head,
                dim: s.dim(),
                head_map: row_major(&s.head_map),
                tail_map: row_major(&s.tail_map),
                gram: if is_identity(&s.gram) {
                    None
                } else {
                    Some(row_major(&s.gram))
                },
            })
            .collect();
        Self {
            vertex_count: sheaf.graph().vertex_count(),
            vertex_stalk_dims: sheaf.vertex_dims().to_vec(),
            vertex_grams,
            edges,
        }
    }
}

/// Writes `time,x0,…` rows; `comments` become leading `# ` lines.
pub fn write_series_csv<T: Real, W: Write>(
    out: &mut W,
    times: &[T],
    rows: &[Cochain0<T>],
    comments: &[String],
) -> Result<()> {
    for c in comments {
        writeln!(out, "# {c}")?;
    }
    let width = rows.first().map_or(0, |r| r.len());
    write!(out, "time")?;
    for i in 0..width {
        write!(out, ",x{i}")?;
    }
    writeln!(out)?;
    for (t, row) in times.iter().zip(rows) {
        write!(out, "{}", t.as_f64())?;
        for v in row.iter() {
            write!(out, ",{}", v.as_f64())?;
        }
        writeln!(out)?;
    }
    Ok(())
}

/// Parses a series written by [`write_series_csv`]; returns times and rows.
pub fn read_series_csv<T: Real, R: BufRead>(input: R) -> Result<(Vec<T>, Vec<Cochain0<T>>)> {
    let mut times = Vec::new();
    let mut rows = Vec::new();
    let mut width = None;
    for (lineno, line) in input.lines().enumerate() {
        let line = line?;
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        if width.is_none() {
            let cols: Vec<&str> = line.split(',').collect();
            if cols.first() != Some(&"time") {
                return Err(Error::Parse(format!(
                    "line {}: expected header starting with 'time'",
                    lineno + 1
                )));
            }
            width = Some(cols.len() - 1);
            continue;
        }
        let vals = line
            .split(',')
            .map(|s| {
                s.trim()
                    .parse::<f64>()
                    .map_err(|e| Error::Parse(format!("line {}: {e} in '{s}'", lineno + 1)))
            })
            .collect::<Result<Vec<f64>>>()?;
        if vals.len() != width.unwrap() + 1 {
            return Err(Error::Parse(format!(
                "line {}: {} columns, header has {}",
                lineno + 1,
                vals.len(),
                width.unwrap() + 1
            )));
        }
        times.push(T::lit(vals[0]));
        rows.push(Cochain0::from_vec(vals[1..].iter().map(|&v| T::lit(v)).collect()));
    }
    if width.is_none() {
        return Err(Error::Parse("missing header".into()));
    }
    Ok((times, rows))
}

/// Companion path holding derivatives: `run.csv` → `run.deriv.csv`.
pub fn derivative_path(path: &Path) -> PathBuf {
    let stem = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    path.with_file_name(format!("{stem}.deriv.csv"))
}

/// Writes the trajectory and, when present, its derivative companion.
pub fn write_trajectory<T: Real>(path: &Path, traj: &Trajectory<T>, comments: &[String]) -> Result<()> {
    let mut buf = Vec::new();
    write_series_csv(&mut buf, &traj.times, &traj.states, comments)?;
    std::fs::write(path, buf)?;
    if let Some(d) = &traj.derivs {
        let mut buf = Vec::new();
        write_series_csv(&mut buf, &traj.times, d, comments)?;
        std::fs::write(derivative_path(path), buf)?;
    }
    Ok(())
}

/// Reads a trajectory; derivatives are loaded when the companion file exists.
pub fn read_trajectory<T: Real>(path: &Path) -> Result<Trajectory<T>> {
    let file = std::fs::File::open(path)?;
    let (times, states) = read_series_csv(std::io::BufReader::new(file))?;
    let dpath = derivative_path(path);
    let derivs = if dpath.exists() {
        let (dt, d) = read_series_csv::<T, _>(std::io::BufReader::new(std::fs::File::open(&dpath)?))?;
        if dt != times || d.len() != states.len() {
            return Err(Error::Parse(format!(
                "{} does not match the sample times of {}",
                dpath.display(),
                path.display()
            )));
        }
        Some(d)
    } else {
        None
    };
    Ok(Trajectory { times, states, derivs })
}

#[cfg(test)]
mod tests {
    use super::*;

    const TWO_VERTEX: &str = r#"
vertex_count = 2
vertex_stalk_dims = [2, 1]

[[edges]]
tail = 0
head = 1
dim = 1
head_map = [2.0]
tail_map = [0.1, -0.30000000000000004]
gram = [3.5]
"#;

    #[test]
    fn parse_and_build() {
        let f = SheafFile::parse(TWO_VERTEX).unwrap();
        let s = f.to_sheaf::<f64>().unwrap();
        assert_eq!(s.d0(), 3);
        assert_eq!(s.edge_stalks()[0].tail_map[(0, 1)], -0.30000000000000004);
    }

    #[test]
    fn round_trip_is_exact() {
        let f = SheafFile::parse(TWO_VERTEX).unwrap();
        let s = f.to_sheaf::<f64>().unwrap();
        let text = SheafFile::from_sheaf(&s).to_toml().unwrap();
        let g = SheafFile::parse(&text).unwrap();
        assert_eq!(f, g);
        assert_eq!(g.to_sheaf::<f64>().unwrap(), s);
    }

    #[test]
    fn rejects_unknown_keys_and_bad_shapes() {
        assert!(SheafFile::parse("vertex_count = 1\nvertex_stalk_dims = [1]\ncolour = 3\n").is_err());
        let bad = TWO_VERTEX.replace("head_map = [2.0]", "head_map = [2.0, 1.0]");
        assert!(SheafFile::parse(&bad).unwrap().to_sheaf::<f64>().is_err());
    }

    #[test]
    fn csv_round_trip() {
        let times = vec![0.0, 0.01, 0.02];
        let rows = vec![
            Cochain0::from_slice(&[0.1, 1e-300]),
            Cochain0::from_slice(&[-0.0, 1.0 / 3.0]),
            Cochain0::from_slice(&[f64::MAX, -2.5]),
        ];
        let mut buf = Vec::new();
        write_series_csv(&mut buf, &times, &rows, &["config_hash = abc".into()]).unwrap();
        let (t, r) = read_series_csv::<f64, _>(buf.as_slice()).unwrap();
        assert_eq!(t, times);
        assert_eq!(r, rows);
        assert!(read_series_csv::<f64, _>("time,x0\n0.0,1.0,2.0\n".as_bytes()).is_err());
    }

    #[test]
    fn derivative_companion_name() {
        assert_eq!(
            derivative_path(Path::new("out/traj_003.csv")),
            Path::new("out/traj_003.deriv.csv")
        );
    }
}
