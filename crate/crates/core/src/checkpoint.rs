//! Parameter checkpoints as a JSON key → matrix map.
//!
//! Every block is stored column-major with its shape. Floats are written
//! with round-trip precision, so a saved and reloaded model is bit-identical.

use std::collections::BTreeMap;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ssm::{Dims, MambaParams};

const FORMAT: &str = "mamba-icl-checkpoint";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    pub rows: usize,
    pub cols: usize,
    /// Column-major entries.
    pub data: Vec<f64>,
}

impl Tensor {
    fn from_matrix(m: &DMatrix<f64>) -> Self {
        Self { rows: m.nrows(), cols: m.ncols(), data: m.as_slice().to_vec() }
    }

    fn from_vector(v: &DVector<f64>) -> Self {
        Self { rows: v.len(), cols: 1, data: v.as_slice().to_vec() }
    }

    fn scalar(x: f64) -> Self {
        Self { rows: 1, cols: 1, data: vec![x] }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub version: u32,
    pub dims: Dims,
    pub seed: u64,
    pub tensors: BTreeMap<String, Tensor>,
}

impl Checkpoint {
    pub fn from_params(params: &MambaParams, seed: u64) -> Self {
        let mut tensors = BTreeMap::new();
        tensors.insert("w_b".into(), Tensor::from_matrix(&params.w_b));
        tensors.insert("w_c".into(), Tensor::from_matrix(&params.w_c));
        tensors.insert("b_b".into(), Tensor::from_vector(&params.b_b));
        tensors.insert("b_c".into(), Tensor::from_vector(&params.b_c));
        tensors.insert("w_delta".into(), Tensor::from_vector(&params.w_delta));
        tensors.insert("b_delta".into(), Tensor::scalar(params.b_delta));
        tensors.insert("a_diag".into(), Tensor::from_vector(&params.a_diag));
        Self { format: FORMAT.into(), version: 1, dims: params.dims, seed, tensors }
    }

    fn take(&self, key: &str, rows: usize, cols: usize) -> Result<&[f64]> {
        let t = self.tensors.get(key).ok_or_else(|| Error::Checkpoint(format!("missing tensor '{key}'")))?;
        if t.rows != rows || t.cols != cols || t.data.len() != rows * cols {
            return Err(Error::Checkpoint(format!(
                "tensor '{key}' is {}x{} with {} entries, expected {rows}x{cols}",
                t.rows,
                t.cols,
                t.data.len()
            )));
        }
        Ok(&t.data)
    }

    pub fn to_params(&self) -> Result<MambaParams> {
        if self.format != FORMAT {
            return Err(Error::Checkpoint(format!("unknown format '{}'", self.format)));
        }
        let Dims { d_h, .. } = self.dims;
        let t = self.dims.token();
        let params = MambaParams {
            w_b: DMatrix::from_column_slice(d_h, t, self.take("w_b", d_h, t)?),
            w_c: DMatrix::from_column_slice(d_h, t, self.take("w_c", d_h, t)?),
            b_b: DVector::from_column_slice(self.take("b_b", d_h, 1)?),
            b_c: DVector::from_column_slice(self.take("b_c", d_h, 1)?),
            w_delta: DVector::from_column_slice(self.take("w_delta", t, 1)?),
            b_delta: self.take("b_delta", 1, 1)?[0],
            a_diag: DVector::from_column_slice(self.take("a_diag", d_h, 1)?),
            dims: self.dims,
        };
        params.check_dims()?;
        Ok(params)
    }
}

pub fn save(path: &Path, params: &MambaParams, seed: u64) -> Result<()> {
    let json = serde_json::to_string_pretty(&Checkpoint::from_params(params, seed))?;
    std::fs::write(path, json)?;
    Ok(())
}

/// Loads parameters and the seed they were trained with.
pub fn load(path: &Path) -> Result<(MambaParams, u64)> {
    let text = std::fs::read_to_string(path)?;
    let ckpt: Checkpoint = serde_json::from_str(&text)?;
    Ok((ckpt.to_params()?, ckpt.seed))
}
