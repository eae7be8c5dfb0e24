//! Binary checkpoint container.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic    8 bytes  "CYTKCKPT"
//! format   u32
//! version  u32      parameter layout version
//! config   u64 len + UTF-8 JSON of the model config
//! meta     u64 len + UTF-8 free-form text (e.g. the training config)
//! count    u32      number of tensors
//! tensor   u32 name len + name, u32 ndim, u64 dims.., f64 values..
//! ```

use std::io::{Read, Write};
use std::path::Path;

use ndarray::{Array1, Array2};

use super::{Linear, ModelConfig, ModelParams};
use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"CYTKCKPT";
const FORMAT: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub params: ModelParams,
    pub meta: String,
}

pub fn write_checkpoint<W: Write>(mut w: W, params: &ModelParams, meta: &str) -> std::io::Result<()> {
    w.write_all(MAGIC)?;
    w.write_all(&FORMAT.to_le_bytes())?;
    w.write_all(&params.version.to_le_bytes())?;
    let config = serde_json::to_string(&params.config).expect("config serialises");
    for text in [config.as_str(), meta] {
        w.write_all(&(text.len() as u64).to_le_bytes())?;
        w.write_all(text.as_bytes())?;
    }
    let layers = params.layers();
    w.write_all(&((layers.len() * 2) as u32).to_le_bytes())?;
    for (name, layer) in layers {
        let tensors: [(String, Vec<usize>, &[f64]); 2] = [
            (
                format!("{name}.weight"),
                layer.weight.shape().to_vec(),
                layer.weight.as_slice().expect("standard layout"),
            ),
            (
                format!("{name}.bias"),
                layer.bias.shape().to_vec(),
                layer.bias.as_slice().expect("standard layout"),
            ),
        ];
        for (tname, shape, data) in tensors {
            w.write_all(&(tname.len() as u32).to_le_bytes())?;
            w.write_all(tname.as_bytes())?;
            w.write_all(&(shape.len() as u32).to_le_bytes())?;
            for d in &shape {
                w.write_all(&(*d as u64).to_le_bytes())?;
            }
            let mut buf = Vec::with_capacity(data.len() * 8);
            for v in data {
                buf.extend_from_slice(&v.to_le_bytes());
            }
            w.write_all(&buf)?;
        }
    }
    w.flush()
}

struct Reader<R> {
    inner: R,
}

impl<R: Read> Reader<R> {
    fn bytes(&mut self, n: usize) -> Result<Vec<u8>> {
        let mut buf = vec![0; n];
        self.inner
            .read_exact(&mut buf)
            .map_err(|e| Error::Checkpoint(format!("truncated: {e}")))?;
        Ok(buf)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.bytes(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.bytes(8)?.try_into().unwrap()))
    }

    fn string(&mut self, len: usize) -> Result<String> {
        String::from_utf8(self.bytes(len)?).map_err(|_| Error::Checkpoint("invalid UTF-8".into()))
    }
}

pub fn read_checkpoint<R: Read>(r: R) -> Result<Checkpoint> {
    let mut r = Reader { inner: r };
    if r.bytes(8)? != MAGIC {
        return Err(Error::Checkpoint("bad magic".into()));
    }
    let format = r.u32()?;
    if format != FORMAT {
        return Err(Error::Checkpoint(format!("unsupported format {format}")));
    }
    let version = r.u32()?;
    if version != super::PARAMS_VERSION {
        return Err(Error::Checkpoint(format!("unsupported parameter version {version}")));
    }
    let len = r.u64()? as usize;
    let config: ModelConfig = serde_json::from_str(&r.string(len)?)
        .map_err(|e| Error::Checkpoint(format!("config: {e}")))?;
    let len = r.u64()? as usize;
    let meta = r.string(len)?;

    let mut params = ModelParams::init(&config)?;
    let count = r.u32()? as usize;
    let mut loaded = std::collections::HashMap::new();
    for _ in 0..count {
        let len = r.u32()? as usize;
        let name = r.string(len)?;
        let ndim = r.u32()? as usize;
        let shape = (0..ndim).map(|_| r.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let n: usize = shape.iter().product();
        let raw = r.bytes(n * 8)?;
        let values: Vec<f64> = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
        loaded.insert(name, (shape, values));
    }
    for (name, layer) in params.layers_mut() {
        let Linear { weight, bias } = layer;
        let (wshape, wvals) = loaded
            .remove(&format!("{name}.weight"))
            .ok_or_else(|| Error::Checkpoint(format!("missing {name}.weight")))?;
        let (bshape, bvals) = loaded
            .remove(&format!("{name}.bias"))
            .ok_or_else(|| Error::Checkpoint(format!("missing {name}.bias")))?;
        if wshape != weight.shape() || bshape != bias.shape() {
            return Err(Error::Checkpoint(format!("{name}: shape does not match config")));
        }
        *weight = Array2::from_shape_vec((wshape[0], wshape[1]), wvals).expect("checked shape");
        *bias = Array1::from_vec(bvals);
    }
    if let Some(extra) = loaded.keys().next() {
        return Err(Error::Checkpoint(format!("unexpected tensor {extra}")));
    }
    Ok(Checkpoint { params, meta })
}

pub fn save_checkpoint(path: &Path, params: &ModelParams, meta: &str) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    write_checkpoint(std::io::BufWriter::new(file), params, meta).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    read_checkpoint(std::io::BufReader::new(file))
}
