//! Row-major nested-array encoding of dense matrices for the JSON file formats.

use nalgebra::DMatrix;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};

pub fn to_rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    m.row_iter().map(|r| r.iter().copied().collect()).collect()
}

/// Builds a matrix from nested rows, checking the expected shape when given.
pub fn from_rows(name: &str, rows: &[Vec<f64>], expected: Option<(usize, usize)>) -> Result<DMatrix<f64>> {
    let nrows = rows.len();
    let ncols = match expected {
        Some((_, c)) => c,
        None => rows.first().map_or(0, Vec::len),
    };
    if let Some(shape) = expected {
        if nrows != shape.0 {
            return Err(Error::dim(name, shape, (nrows, rows.first().map_or(0, Vec::len))));
        }
    }
    for (i, row) in rows.iter().enumerate() {
        if row.len() != ncols {
            return Err(Error::Dimension {
                matrix: name.to_string(),
                expected: format!("{ncols} columns"),
                actual: format!("{} columns in row {i}", row.len()),
            });
        }
        if let Some(j) = row.iter().position(|v| !v.is_finite()) {
            return Err(Error::Parse(format!("{name}[{i}][{j}] is not finite")));
        }
    }
    Ok(DMatrix::from_fn(nrows, ncols, |i, j| rows[i][j]))
}

/// `#[serde(with = "matrix_io::rows")]` adapter.
pub mod rows {
    use super::*;

    pub fn serialize<S: Serializer>(m: &DMatrix<f64>, s: S) -> std::result::Result<S::Ok, S::Error> {
        to_rows(m).serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> std::result::Result<DMatrix<f64>, D::Error> {
        let rows = Vec::<Vec<f64>>::deserialize(d)?;
        from_rows("matrix", &rows, None).map_err(serde::de::Error::custom)
    }
}
