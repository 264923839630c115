use std::fs;
use std::path::Path;

use numcore::{Real, Tensor};

use crate::error::{Error, Result};

pub const VMSB_MAGIC: &[u8; 4] = b"VMSB";

/// Row-major sentence embeddings.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingMatrix {
    rows: usize,
    dim: usize,
    data: Vec<f32>,
    pub ids: Option<Vec<String>>,
}

impl EmbeddingMatrix {
    pub fn new(rows: usize, dim: usize, data: Vec<f32>) -> Result<Self> {
        if rows == 0 || dim == 0 {
            return Err(Error::Contract(format!("empty embedding matrix {rows}×{dim}")));
        }
        if data.len() != rows * dim {
            return Err(Error::Format(format!(
                "{} values for a {rows}×{dim} matrix",
                data.len()
            )));
        }
        if let Some(i) = data.iter().position(|x| !x.is_finite()) {
            return Err(Error::Degenerate(format!("non-finite value in row {}", i / dim)));
        }
        Ok(EmbeddingMatrix {
            rows,
            dim,
            data,
            ids: None,
        })
    }

    pub fn from_rows(rows: &[Vec<f32>]) -> Result<Self> {
        let dim = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != dim) {
            return Err(Error::Format("ragged embedding rows".into()));
        }
        Self::new(rows.len(), dim, rows.concat())
    }

    pub fn from_tensor<F: Real>(t: &Tensor<F>) -> Result<Self> {
        if t.ndim() != 2 {
            return Err(Error::Format(format!("expected a matrix, got shape {:?}", t.shape())));
        }
        let data = t.data().iter().map(|x| x.as_f64() as f32).collect();
        Self::new(t.shape()[0], t.shape()[1], data)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn row_f64(&self, i: usize) -> Vec<f64> {
        self.row(i).iter().map(|&x| x as f64).collect()
    }

    /// Same rows with every value scaled by `c`.
    pub fn scaled(&self, c: f32) -> Self {
        EmbeddingMatrix {
            data: self.data.iter().map(|x| x * c).collect(),
            ..self.clone()
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(12 + self.data.len() * 4);
        out.extend_from_slice(VMSB_MAGIC);
        out.extend_from_slice(&(self.rows as u32).to_le_bytes());
        out.extend_from_slice(&(self.dim as u32).to_le_bytes());
        for x in &self.data {
            out.extend_from_slice(&x.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 12 || &bytes[..4] != VMSB_MAGIC {
            return Err(Error::Format("not a VMSB embedding file (bad magic)".into()));
        }
        let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().expect("4 bytes")) as usize;
        let (rows, dim) = (u32_at(4), u32_at(8));
        if bytes.len() - 12 != rows * dim * 4 {
            return Err(Error::Format(format!(
                "VMSB header says {rows}×{dim} but holds {} bytes of data",
                bytes.len() - 12
            )));
        }
        let data = bytes[12..]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        Self::new(rows, dim, data)
    }

    /// Writes the matrix, plus a `.ids` sidecar with one row label per line
    /// when labels are present.
    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path.display().to_string(), e))?;
        if let Some(ids) = &self.ids {
            let side = path.with_extension("ids");
            let mut text = ids.join("\n");
            text.push('\n');
            fs::write(&side, text).map_err(|e| Error::io(side.display().to_string(), e))?;
        }
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path.display().to_string(), e))?;
        let mut m = Self::from_bytes(&bytes)?;
        let side = path.with_extension("ids");
        if side.exists() {
            let text = fs::read_to_string(&side).map_err(|e| Error::io(side.display().to_string(), e))?;
            let ids: Vec<String> = text.lines().map(str::to_string).collect();
            if ids.len() != m.rows {
                return Err(Error::Format(format!(
                    "{} has {} ids for {} rows",
                    side.display(),
                    ids.len(),
                    m.rows
                )));
            }
            m.ids = Some(ids);
        }
        Ok(m)
    }
}
