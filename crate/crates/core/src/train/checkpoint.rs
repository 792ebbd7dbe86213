//! Flat binary checkpoint.
//!
//! ```text
//! magic     8 bytes  "LGDCKPT\0"
//! version   u32 LE
//! header    u64 LE length, then UTF-8 JSON (model kind, configs, sizes)
//! count     u64 LE number of tensors
//! tensor*   u64 rows, u64 cols, rows·cols f64 LE in row-major order
//! ```
//!
//! Tensors are the parameters in [`NodeClassifier::parameters`] order,
//! followed for the disentangled model by each layer's per-channel mean
//! (1×Δ) and covariance (Δ×Δ).

use std::path::Path;

use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{AnyModel, Gaussian, GcnConfig, GcnModel, LgdModel, ModelConfig, NodeClassifier};
use crate::Matrix;

const MAGIC: &[u8; 8] = b"LGDCKPT\0";
const VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Header {
    kind: String,
    input_dim: usize,
    num_classes: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    lgd: Option<ModelConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    gcn: Option<GcnConfig>,
}

fn tensors(model: &AnyModel) -> Vec<Matrix> {
    let mut out: Vec<Matrix> = model.parameters().into_iter().map(|(_, m)| m.clone()).collect();
    if let AnyModel::Lgd(m) = model {
        for layer in &m.stats {
            for g in &layer.components {
                out.push(g.mean().clone().insert_axis(ndarray::Axis(0)));
                out.push(g.cov().clone());
            }
        }
    }
    out
}

pub fn encode_checkpoint(model: &AnyModel) -> Vec<u8> {
    let header = Header {
        kind: model.kind().into(),
        input_dim: model.input_dim(),
        num_classes: model.num_classes(),
        lgd: model.as_lgd().map(|m| m.config.clone()),
        gcn: match model {
            AnyModel::Gcn(m) => Some(m.config.clone()),
            AnyModel::Lgd(_) => None,
        },
    };
    let json = serde_json::to_vec(&header).expect("header serializes");
    let ts = tensors(model);
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    out.extend_from_slice(&(ts.len() as u64).to_le_bytes());
    for t in &ts {
        out.extend_from_slice(&(t.nrows() as u64).to_le_bytes());
        out.extend_from_slice(&(t.ncols() as u64).to_le_bytes());
        for v in t.iter() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let Some(end) = end else {
            return Err(Error::Validation(format!("checkpoint truncated at byte {}", self.pos)));
        };
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn tensor(&mut self) -> Result<Matrix> {
        let rows = self.u64()? as usize;
        let cols = self.u64()? as usize;
        let len = rows
            .checked_mul(cols)
            .and_then(|n| n.checked_mul(8))
            .ok_or_else(|| Error::Validation("tensor size overflows".into()))?;
        let bytes = self.take(len)?;
        let data = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        Ok(Array2::from_shape_vec((rows, cols), data).expect("length checked"))
    }
}

pub fn decode_checkpoint(buf: &[u8]) -> Result<AnyModel> {
    let mut r = Reader { buf, pos: 0 };
    if r.take(8)? != MAGIC {
        return Err(Error::Validation("not a checkpoint file (bad magic)".into()));
    }
    let version = u32::from_le_bytes(r.take(4)?.try_into().expect("4 bytes"));
    if version != VERSION {
        return Err(Error::Validation(format!("unsupported checkpoint version {version}")));
    }
    let len = r.u64()? as usize;
    let header: Header = serde_json::from_slice(r.take(len)?)
        .map_err(|e| Error::Validation(format!("checkpoint header: {e}")))?;
    let count = r.u64()? as usize;
    let mut ts = Vec::with_capacity(count.min(1 << 16));
    for _ in 0..count {
        ts.push(r.tensor()?);
    }
    if r.pos != buf.len() {
        return Err(Error::Validation("trailing bytes after checkpoint tensors".into()));
    }
    let mut model = match (header.kind.as_str(), header.lgd, header.gcn) {
        ("lgd", Some(cfg), _) => AnyModel::Lgd(LgdModel::new(cfg, header.input_dim, header.num_classes, 0)?),
        ("gcn", _, Some(cfg)) => AnyModel::Gcn(GcnModel::new(cfg, header.input_dim, header.num_classes, 0)?),
        (kind, _, _) => return Err(Error::Validation(format!("unknown or incomplete model kind `{kind}`"))),
    };
    let expected = tensors(&model);
    if expected.len() != ts.len() {
        return Err(Error::Validation(format!(
            "checkpoint holds {} tensors, model needs {}",
            ts.len(),
            expected.len()
        )));
    }
    for (i, (e, t)) in expected.iter().zip(&ts).enumerate() {
        if e.dim() != t.dim() {
            return Err(Error::Validation(format!(
                "tensor {i} has shape {:?}, expected {:?}",
                t.dim(),
                e.dim()
            )));
        }
    }
    let mut it = ts.into_iter();
    for p in model.parameters_mut() {
        *p = it.next().expect("count checked");
    }
    if let AnyModel::Lgd(m) = &mut model {
        for layer in &mut m.stats {
            for g in &mut layer.components {
                let mean: Array1<f64> = it.next().expect("count checked").row(0).to_owned();
                let cov = it.next().expect("count checked");
                *g = Gaussian::new(mean, cov)?;
            }
        }
    }
    Ok(model)
}

pub fn save_checkpoint(model: &AnyModel, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, encode_checkpoint(model)).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<AnyModel> {
    let path = path.as_ref();
    let buf = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&buf)
}
