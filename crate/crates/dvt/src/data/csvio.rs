//! CSV feature tables: header row, numeric feature columns, one label
//! column whose empty cells mark unsupervised rows.

use std::io::Write;
use std::path::Path;

use super::Dataset;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Write `ds` with header `x0,...,x{D-1},label`. Labels are written only for
/// supervised rows — the file records exactly what training may see — using
/// the class index in decimal. Floats use Rust's shortest round-trip
/// formatting, so loading the file back reproduces every bit.
pub fn write_csv(ds: &Dataset, path: &Path) -> Result<()> {
    let mut out = String::new();
    for d in 0..ds.dim() {
        out.push_str(&format!("x{},", d));
    }
    out.push_str("label\n");
    for i in 0..ds.len() {
        for v in ds.x.row(i) {
            out.push_str(&format!("{},", v));
        }
        if ds.sup_mask[i] {
            out.push_str(&ds.labels[i].expect("mask implies label").to_string());
        }
        out.push('\n');
    }
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty());
    if let Some(dir) = dir {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(out.as_bytes()).map_err(|e| Error::io(path, e))
}

/// Load a rectangular CSV with a header row. All columns except
/// `label_column` are parsed as 64-bit floats in file order; the label cell
/// is matched against `class_names` (index = class), with an empty cell
/// meaning unsupervised. Errors carry the 1-based file line.
pub fn load_csv_features(
    path: &Path,
    label_column: &str,
    class_names: &[String],
    domain_id: &str,
) -> Result<Dataset> {
    if class_names.is_empty() {
        return Err(Error::Config("load_csv_features: class_names is empty".into()));
    }
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(false)
        .from_path(path)
        .map_err(|e| Error::Data(format!("{}: {}", path.display(), e)))?;
    let headers = reader
        .headers()
        .map_err(|e| Error::Data(format!("{}: {}", path.display(), e)))?
        .clone();
    let label_idx = headers
        .iter()
        .position(|h| h == label_column)
        .ok_or_else(|| {
            Error::Data(format!(
                "{}: no column '{}' in header {:?}",
                path.display(),
                label_column,
                headers.iter().collect::<Vec<_>>()
            ))
        })?;
    let dim = headers.len() - 1;
    if dim == 0 {
        return Err(Error::Data(format!("{}: no feature columns", path.display())));
    }

    let mut data = Vec::new();
    let mut labels = Vec::new();
    let mut sup_mask = Vec::new();
    for record in reader.records() {
        let record = record.map_err(|e| {
            let line = e
                .position()
                .map(|p| p.line().to_string())
                .unwrap_or_else(|| "?".into());
            Error::Data(format!("{}: line {}: {}", path.display(), line, e))
        })?;
        let line = record.position().map(|p| p.line()).unwrap_or(0);
        for (col, cell) in record.iter().enumerate() {
            if col == label_idx {
                if cell.is_empty() {
                    labels.push(None);
                    sup_mask.push(false);
                } else {
                    let class = class_names.iter().position(|c| c == cell).ok_or_else(|| {
                        Error::Data(format!(
                            "{}: line {}: unknown class '{}' (known: {:?})",
                            path.display(),
                            line,
                            cell,
                            class_names
                        ))
                    })?;
                    labels.push(Some(class));
                    sup_mask.push(true);
                }
            } else {
                let v: f64 = cell.trim().parse().map_err(|_| {
                    Error::Data(format!(
                        "{}: line {}: column '{}': not a number: '{}'",
                        path.display(),
                        line,
                        &headers[col],
                        cell
                    ))
                })?;
                data.push(v);
            }
        }
    }
    let n = labels.len();
    let ds = Dataset {
        domain_id: domain_id.to_string(),
        x: Tensor::new(vec![n, dim], data)?,
        labels,
        sup_mask,
        class_count: class_names.len(),
    };
    ds.validate()?;
    Ok(ds)
}

/// Class names "0".."{K-1}", the writer's encoding.
pub fn index_class_names(k: usize) -> Vec<String> {
    (0..k).map(|c| c.to_string()).collect()
}
