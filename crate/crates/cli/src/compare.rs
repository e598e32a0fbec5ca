//! Column-wise numeric differences between like-named CSV files.

use std::fs;
use std::path::Path;

use anyhow::{bail, Context, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct ColumnDelta {
    pub file: String,
    pub column: String,
    pub max_abs_delta: f64,
}

fn read(path: &Path) -> Result<(csv::StringRecord, Vec<csv::StringRecord>)> {
    let mut r =
        csv::Reader::from_path(path).with_context(|| format!("reading {}", path.display()))?;
    let headers = r.headers()?.clone();
    let rows = r.records().collect::<csv::Result<Vec<_>>>()?;
    Ok((headers, rows))
}

fn delta(a: &str, b: &str) -> f64 {
    match (a.trim().parse::<f64>(), b.trim().parse::<f64>()) {
        (Ok(x), Ok(y)) if x == y || (x.is_nan() && y.is_nan()) => 0.0,
        (Ok(x), Ok(y)) => (x - y).abs(),
        _ if a == b => 0.0,
        _ => f64::INFINITY,
    }
}

/// Maximum absolute difference per column for every CSV file present in
/// both directories. Different headers or row counts are an error.
pub fn compare_dirs(a: &Path, b: &Path) -> Result<Vec<ColumnDelta>> {
    let mut names: Vec<String> = fs::read_dir(a)
        .with_context(|| format!("reading {}", a.display()))?
        .filter_map(|e| e.ok())
        .map(|e| e.file_name().to_string_lossy().into_owned())
        .filter(|n| n.ends_with(".csv") && b.join(n).is_file())
        .collect();
    names.sort();
    if names.is_empty() {
        bail!(
            "no like-named CSV files in {} and {}",
            a.display(),
            b.display()
        );
    }
    let mut out = Vec::new();
    for name in names {
        let (ha, ra) = read(&a.join(&name))?;
        let (hb, rb) = read(&b.join(&name))?;
        if ha != hb {
            bail!("shape mismatch in {name}: columns {ha:?} vs {hb:?}");
        }
        if ra.len() != rb.len() {
            bail!(
                "shape mismatch in {name}: {} vs {} rows",
                ra.len(),
                rb.len()
            );
        }
        for (j, column) in ha.iter().enumerate() {
            let max_abs_delta = ra
                .iter()
                .zip(&rb)
                .map(|(x, y)| delta(x.get(j).unwrap_or(""), y.get(j).unwrap_or("")))
                .fold(0.0, f64::max);
            out.push(ColumnDelta {
                file: name.clone(),
                column: column.to_string(),
                max_abs_delta,
            });
        }
    }
    Ok(out)
}
