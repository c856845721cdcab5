//! CSV matrices with an `x0,..,x{d-1}` header.

use std::path::Path;

use thiserror::Error;

use crate::ndgrad::Tensor;

#[derive(Debug, Error)]
pub enum IoError {
    #[error("{path}: {source}")]
    Fs {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}:{line}: {msg}")]
    Parse { path: String, line: usize, msg: String },
}

pub type Result<T> = std::result::Result<T, IoError>;

pub fn read_to_string(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|source| IoError::Fs {
        path: path.display().to_string(),
        source,
    })
}

pub fn write(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|source| IoError::Fs {
            path: dir.display().to_string(),
            source,
        })?;
    }
    std::fs::write(path, contents).map_err(|source| IoError::Fs {
        path: path.display().to_string(),
        source,
    })
}

/// Numeric CSV with a header row. Returns the header and the rows.
pub fn parse_csv(text: &str, path: &str) -> Result<(Vec<String>, Tensor<f64>)> {
    let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
    let (_, header) = lines.next().ok_or_else(|| IoError::Parse {
        path: path.into(),
        line: 1,
        msg: "empty file".into(),
    })?;
    let header: Vec<String> = header.split(',').map(|s| s.trim().to_string()).collect();
    let d = header.len();
    let mut data = Vec::new();
    let mut rows = 0;
    for (i, line) in lines {
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != d {
            return Err(IoError::Parse {
                path: path.into(),
                line: i + 1,
                msg: format!("expected {d} fields, found {}", fields.len()),
            });
        }
        for f in fields {
            let v: f64 = f.trim().parse().map_err(|_| IoError::Parse {
                path: path.into(),
                line: i + 1,
                msg: format!("not a number: `{}`", f.trim()),
            })?;
            data.push(v);
        }
        rows += 1;
    }
    let t = Tensor::from_rows(rows, d, data).map_err(|e| IoError::Parse {
        path: path.into(),
        line: 0,
        msg: e.to_string(),
    })?;
    Ok((header, t))
}

pub fn read_csv(path: &Path) -> Result<(Vec<String>, Tensor<f64>)> {
    parse_csv(&read_to_string(path)?, &path.display().to_string())
}

pub fn matrix_csv(x: &Tensor<f64>) -> String {
    let d = x.cols();
    let mut out = (0..d).map(|j| format!("x{j}")).collect::<Vec<_>>().join(",");
    out.push('\n');
    for i in 0..x.rows() {
        let row: Vec<String> = x.row(i).iter().map(|v| format!("{v:e}")).collect();
        out.push_str(&row.join(","));
        out.push('\n');
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_is_exact() {
        let x = Tensor::from_fn(3, 2, |i, j| (i as f64 + 0.1) / (j as f64 + 3.0));
        let (h, y) = parse_csv(&matrix_csv(&x), "mem").unwrap();
        assert_eq!(h, vec!["x0", "x1"]);
        assert_eq!(x, y);
    }

    #[test]
    fn reports_bad_fields() {
        assert!(matches!(parse_csv("a,b\n1,2\n3\n", "m"), Err(IoError::Parse { line: 3, .. })));
        assert!(matches!(parse_csv("a\nzz\n", "m"), Err(IoError::Parse { line: 2, .. })));
    }
}
