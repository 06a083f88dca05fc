//! Row-major JSON encoding for dense matrices: `{"rows", "cols", "data"}`.

use nalgebra::DMatrix;
use serde::{de::Error as _, Deserialize, Deserializer, Serialize, Serializer};

#[derive(Serialize, Deserialize)]
struct RowMajor {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

pub fn serialize<S: Serializer>(m: &DMatrix<f64>, s: S) -> Result<S::Ok, S::Error> {
    let data = m.transpose().as_slice().to_vec();
    RowMajor {
        rows: m.nrows(),
        cols: m.ncols(),
        data,
    }
    .serialize(s)
}

pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<DMatrix<f64>, D::Error> {
    let repr = RowMajor::deserialize(d)?;
    if repr.rows * repr.cols != repr.data.len() {
        return Err(D::Error::custom(format!(
            "matrix data has {} entries, expected {} x {}",
            repr.data.len(),
            repr.rows,
            repr.cols
        )));
    }
    Ok(DMatrix::from_row_slice(repr.rows, repr.cols, &repr.data))
}
