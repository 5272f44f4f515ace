//! Atomic file output and CSV formatting of point sets.

use std::fmt::Write as _;
use std::fs;
use std::io::Write as _;
use std::path::Path;

use crate::error::{Result, VdtError};
use crate::points::Points;
use crate::scalar::Scalar;

/// Writes `bytes` to a sibling temporary file and renames it over `path`, so
/// readers never observe a partially written file.
pub fn atomic_write(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(d) if !d.as_os_str().is_empty() => d,
        _ => Path::new("."),
    };
    let name = path
        .file_name()
        .ok_or_else(|| VdtError::Input(format!("{} is not a file path", path.display())))?;
    let tmp = dir.join(format!(".{}.tmp{}", name.to_string_lossy(), std::process::id()));
    let result = (|| {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
        fs::rename(&tmp, path)
    })();
    if let Err(e) = result {
        let _ = fs::remove_file(&tmp);
        return Err(VdtError::io(path, e));
    }
    Ok(())
}

/// Round-trip exact decimal rendering (17 significant digits).
pub fn fmt_real<T: Scalar>(v: T) -> String {
    format!("{:.16e}", v.as_f64())
}

fn coord_header(dim: usize) -> String {
    (0..dim).map(|k| format!("x{k}")).collect::<Vec<_>>().join(",")
}

/// CSV with header `x0,x1[,label]`, one row per point.
pub fn points_csv<T: Scalar>(points: &Points<T>, labels: Option<&[usize]>) -> String {
    let mut out = coord_header(points.dim());
    if labels.is_some() {
        out.push_str(",label");
    }
    out.push('\n');
    for (i, row) in points.rows().enumerate() {
        let coords: Vec<String> = row.iter().map(|&v| fmt_real(v)).collect();
        out.push_str(&coords.join(","));
        if let Some(ls) = labels {
            let _ = write!(out, ",{}", ls[i]);
        }
        out.push('\n');
    }
    out
}

/// CSV with header `i,h,x0,x1` from trajectories stored as `[i][h][coord]`.
pub fn trajectories_csv<T: Scalar>(traj: &[T], n: usize, steps: usize, dim: usize) -> String {
    let mut out = format!("i,h,{}\n", coord_header(dim));
    for i in 0..n {
        for h in 0..steps {
            let at = (i * steps + h) * dim;
            let coords: Vec<String> = traj[at..at + dim].iter().map(|&v| fmt_real(v)).collect();
            let _ = writeln!(out, "{i},{h},{}", coords.join(","));
        }
    }
    out
}

pub fn write_points_csv<T: Scalar>(path: &Path, points: &Points<T>, labels: Option<&[usize]>) -> Result<()> {
    atomic_write(path, points_csv(points, labels).as_bytes())
}
