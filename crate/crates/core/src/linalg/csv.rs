use std::fs;
use std::io;
use std::path::Path;

use super::{LinalgError, Matrix};

/// One row per line, entries in 17-significant-digit scientific notation.
pub fn matrix_to_csv(m: &Matrix) -> String {
    let mut out = String::new();
    for i in 0..m.rows() {
        let line: Vec<String> = m.row(i).iter().map(|v| format!("{v:.16e}")).collect();
        out.push_str(&line.join(","));
        out.push('\n');
    }
    out
}

pub fn matrix_from_csv(text: &str) -> Result<Matrix, LinalgError> {
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for (idx, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let row = line
            .split(',')
            .map(|cell| {
                cell.trim().parse::<f64>().map_err(|e| LinalgError::Csv {
                    line: idx + 1,
                    reason: format!("{cell:?}: {e}"),
                })
            })
            .collect::<Result<Vec<_>, _>>()?;
        if let Some(first) = rows.first() {
            if first.len() != row.len() {
                return Err(LinalgError::Csv {
                    line: idx + 1,
                    reason: format!("expected {} values, found {}", first.len(), row.len()),
                });
            }
        }
        rows.push(row);
    }
    if rows.is_empty() {
        return Err(LinalgError::Csv {
            line: 0,
            reason: "no rows".into(),
        });
    }
    Matrix::from_rows(&rows)
}

pub fn write_matrix_csv(path: &Path, m: &Matrix) -> io::Result<()> {
    fs::write(path, matrix_to_csv(m))
}

pub fn read_matrix_csv(path: &Path) -> io::Result<Result<Matrix, LinalgError>> {
    Ok(matrix_from_csv(&fs::read_to_string(path)?))
}
