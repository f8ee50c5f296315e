//! Pair files, dataset manifests and error-map export.
//!
//! Pair file layout (little endian): magic `EGPR`, u32 version, u32 point
//! counts of both sweeps, then f32 blocks for the first sweep, second sweep
//! and flow (3 values per row), u8 labels of both sweeps, u16 object ids of
//! both sweeps, and the ego transform as 12 f32 (`[R | t]` row by row).

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use super::ScenePair;
use crate::error::{Error, Result};
use crate::geometry::{Point, RigidTransform};
use crate::metrics::point_errors;

pub const PAIR_MAGIC: &[u8; 4] = b"EGPR";
pub const PAIR_VERSION: u32 = 1;

fn put_points(buf: &mut Vec<u8>, pts: &[Point]) {
    for v in pts.iter().flatten() {
        buf.extend_from_slice(&(*v as f32).to_le_bytes());
    }
}

pub fn save_pair(path: &Path, pair: &ScenePair) -> Result<()> {
    let (np, nq) = (pair.p.len(), pair.q.len());
    let mut buf = Vec::with_capacity(16 + (np * 2 + nq) * 12 + (np + nq) * 3 + 48);
    buf.extend_from_slice(PAIR_MAGIC);
    buf.extend_from_slice(&PAIR_VERSION.to_le_bytes());
    buf.extend_from_slice(&(np as u32).to_le_bytes());
    buf.extend_from_slice(&(nq as u32).to_le_bytes());
    put_points(&mut buf, &pair.p);
    put_points(&mut buf, &pair.q);
    put_points(&mut buf, &pair.flow);
    buf.extend(pair.labels_p.iter().chain(&pair.labels_q).map(|&b| u8::from(b)));
    for id in pair.ids_p.iter().chain(&pair.ids_q) {
        buf.extend_from_slice(&id.to_le_bytes());
    }
    for v in pair.ego.to_rows() {
        buf.extend_from_slice(&(v as f32).to_le_bytes());
    }
    let mut f = BufWriter::new(File::create(path)?);
    f.write_all(&buf)?;
    f.flush()?;
    Ok(())
}

struct Cursor<'a> {
    data: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl Cursor<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8]> {
        if self.pos + n > self.data.len() {
            return Err(Error::Format {
                path: self.path.to_path_buf(),
                msg: format!("truncated at byte {}", self.data.len()),
            });
        }
        let s = &self.data[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn f32s(&mut self, n: usize) -> Result<Vec<f64>> {
        Ok(self
            .take(n * 4)?
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
            .collect())
    }

    fn points(&mut self, n: usize) -> Result<Vec<Point>> {
        Ok(self.f32s(n * 3)?.chunks_exact(3).map(|c| [c[0], c[1], c[2]]).collect())
    }
}

pub fn load_pair(path: &Path) -> Result<ScenePair> {
    let mut data = Vec::new();
    File::open(path)?.read_to_end(&mut data)?;
    let bad = |msg: String| Error::Format {
        path: path.to_path_buf(),
        msg,
    };
    let mut c = Cursor { data: &data, pos: 0, path };
    if c.take(4)? != PAIR_MAGIC {
        return Err(bad("not a pair file (bad magic)".into()));
    }
    let version = c.u32()?;
    if version != PAIR_VERSION {
        return Err(bad(format!("unsupported version {version}")));
    }
    let np = c.u32()? as usize;
    let nq = c.u32()? as usize;
    let p = c.points(np)?;
    let q = c.points(nq)?;
    let flow = c.points(np)?;
    let labels: Vec<bool> = c.take(np + nq)?.iter().map(|&b| b != 0).collect();
    let ids: Vec<u16> = c
        .take((np + nq) * 2)?
        .chunks_exact(2)
        .map(|b| u16::from_le_bytes([b[0], b[1]]))
        .collect();
    let rows: [f64; 12] = c.f32s(12)?.try_into().expect("12 values");
    if c.pos != data.len() {
        return Err(bad(format!("{} trailing bytes", data.len() - c.pos)));
    }
    Ok(ScenePair {
        p,
        q,
        flow,
        ego: RigidTransform::from_rows(&rows),
        labels_p: labels[..np].to_vec(),
        labels_q: labels[np..].to_vec(),
        ids_p: ids[..np].to_vec(),
        ids_q: ids[np..].to_vec(),
    })
}

/// Newline-separated pair paths relative to the manifest's directory.
pub fn write_manifest(path: &Path, entries: &[String]) -> Result<()> {
    let mut f = BufWriter::new(File::create(path)?);
    for e in entries {
        writeln!(f, "{e}")?;
    }
    f.flush()?;
    Ok(())
}

/// Resolved pair paths listed in a manifest; blank lines are skipped.
pub fn read_manifest(path: &Path) -> Result<Vec<PathBuf>> {
    let base = path.parent().unwrap_or(Path::new("."));
    let f = BufReader::new(File::open(path)?);
    let mut out = Vec::new();
    for line in f.lines() {
        let line = line?;
        let line = line.trim();
        if !line.is_empty() {
            out.push(base.join(line));
        }
    }
    if out.is_empty() {
        return Err(Error::Dataset(format!("{} lists no pairs", path.display())));
    }
    Ok(out)
}

/// Writes an ASCII PLY with a per-vertex `epe` property and a CSV
/// companion next to it (same stem, `.csv`).
pub fn export_error_map(points: &[Point], pred: &[Point], gt: &[Point], path: &Path) -> Result<()> {
    if points.len() != pred.len() || pred.len() != gt.len() {
        return Err(Error::LengthMismatch {
            what: "error map rows",
            a: points.len(),
            b: pred.len().min(gt.len()),
        });
    }
    let epe: Vec<f64> = pred.iter().zip(gt).map(|(p, g)| point_errors(p, g).0).collect();
    let mut f = BufWriter::new(File::create(path)?);
    writeln!(f, "ply")?;
    writeln!(f, "format ascii 1.0")?;
    writeln!(f, "element vertex {}", points.len())?;
    for name in ["x", "y", "z", "epe"] {
        writeln!(f, "property float {name}")?;
    }
    writeln!(f, "end_header")?;
    for (p, e) in points.iter().zip(&epe) {
        writeln!(f, "{} {} {} {}", p[0] as f32, p[1] as f32, p[2] as f32, *e as f32)?;
    }
    f.flush()?;

    let mut w = csv::Writer::from_path(path.with_extension("csv"))?;
    w.write_record(["x", "y", "z", "flow_x", "flow_y", "flow_z", "gt_x", "gt_y", "gt_z", "epe"])?;
    for i in 0..points.len() {
        let mut rec: Vec<String> = Vec::with_capacity(10);
        for v in points[i].iter().chain(&pred[i]).chain(&gt[i]) {
            rec.push(v.to_string());
        }
        rec.push(epe[i].to_string());
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}
