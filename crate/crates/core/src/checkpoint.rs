//! FDM1 checkpoint format.
//!
//! ```text
//! magic    b"FDM1"
//! version  u16 LE
//! count    u32 LE                 number of layers
//! layer*   name_len u32 LE, name (UTF-8), rank u32 LE,
//!          extents u32 LE * rank, payload f32 LE * product(extents)
//! ```
//!
//! Version 1 stores the transposed-convolution decoder topology.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::params::ModelParams;
use crate::scalar::Real;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"FDM1";
pub const VERSION: u16 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

impl Layer {
    pub fn from_tensor<T: Real>(name: &str, t: &Tensor<T>) -> Layer {
        Layer { name: name.to_string(), shape: t.shape().to_vec(), data: t.data().iter().map(|v| v.f64() as f32).collect() }
    }

    pub fn to_tensor<T: Real>(&self) -> Result<Tensor<T>> {
        Tensor::new(self.shape.clone(), self.data.iter().map(|&v| T::lit(v as f64)).collect())
    }
}

pub fn encode(layers: &[Layer]) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&to_u32(layers.len(), "layer count")?.to_le_bytes());
    for layer in layers {
        let name = layer.name.as_bytes();
        out.extend_from_slice(&to_u32(name.len(), "name length")?.to_le_bytes());
        out.extend_from_slice(name);
        out.extend_from_slice(&to_u32(layer.shape.len(), "rank")?.to_le_bytes());
        for &d in &layer.shape {
            out.extend_from_slice(&to_u32(d, "extent")?.to_le_bytes());
        }
        if layer.shape.iter().product::<usize>() != layer.data.len() {
            return Err(Error::shape("checkpoint", format!("layer {} payload does not match shape", layer.name)));
        }
        for v in &layer.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

fn to_u32(v: usize, what: &str) -> Result<u32> {
    u32::try_from(v).map_err(|_| Error::Usage(format!("{what} {v} exceeds u32")))
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(self.err("unexpected end of file"));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn err(&self, detail: &str) -> Error {
        Error::Format { path: self.path.to_path_buf(), detail: format!("{detail} at byte {}", self.pos) }
    }
}

pub fn decode(bytes: &[u8], path: &Path) -> Result<Vec<Layer>> {
    let mut r = Reader { bytes, pos: 0, path };
    if r.take(4)? != MAGIC {
        return Err(r.err("bad magic"));
    }
    let version = u16::from_le_bytes(r.take(2)?.try_into().unwrap());
    if version != VERSION {
        return Err(r.err(&format!("unsupported version {version}")));
    }
    let count = r.u32()? as usize;
    let mut layers = Vec::with_capacity(count.min(1024));
    for _ in 0..count {
        let name_len = r.u32()? as usize;
        let name = std::str::from_utf8(r.take(name_len)?).map_err(|_| r.err("layer name is not UTF-8"))?.to_string();
        let rank = r.u32()? as usize;
        let mut shape = Vec::with_capacity(rank.min(16));
        for _ in 0..rank {
            shape.push(r.u32()? as usize);
        }
        let n: usize = shape.iter().product();
        let payload = r.take(n.checked_mul(4).ok_or_else(|| r.err("payload too large"))?)?;
        let data = payload.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
        layers.push(Layer { name, shape, data });
    }
    if r.pos != bytes.len() {
        return Err(r.err("trailing bytes"));
    }
    Ok(layers)
}

pub fn write_layers(path: &Path, layers: &[Layer]) -> Result<()> {
    let bytes = encode(layers)?;
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, bytes)?;
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn read_layers(path: &Path) -> Result<Vec<Layer>> {
    let bytes = fs::read(path)?;
    decode(&bytes, path)
}

pub fn params_to_layers<T: Real>(prefix: &str, params: &ModelParams<T>) -> Vec<Layer> {
    params.entries().iter().map(|(n, t)| Layer::from_tensor(&format!("{prefix}{n}"), t)).collect()
}

/// Rebuilds parameters with the layout of `template` from prefixed layers.
pub fn params_from_layers<T: Real>(
    prefix: &str,
    layers: &[Layer],
    template: &ModelParams<T>,
    path: &Path,
) -> Result<ModelParams<T>> {
    let mut entries = Vec::with_capacity(template.len());
    for (name, t) in template.entries() {
        let full = format!("{prefix}{name}");
        let layer = layers.iter().find(|l| l.name == full).ok_or_else(|| Error::Format {
            path: path.to_path_buf(),
            detail: format!("missing layer {full}"),
        })?;
        if layer.shape != t.shape() {
            return Err(Error::Format {
                path: path.to_path_buf(),
                detail: format!("layer {full} has shape {:?}, expected {:?}", layer.shape, t.shape()),
            });
        }
        entries.push((name.clone(), layer.to_tensor::<T>()?.with_requires_grad(t.requires_grad())));
    }
    Ok(ModelParams::new(entries))
}

pub fn save_params<T: Real>(path: &Path, params: &ModelParams<T>) -> Result<()> {
    write_layers(path, &params_to_layers("", params))
}

pub fn load_params<T: Real>(path: &Path, template: &ModelParams<T>) -> Result<ModelParams<T>> {
    let layers = read_layers(path)?;
    params_from_layers("", &layers, template, path)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn header_layout_is_exact() {
        let layers = vec![Layer { name: "ab".into(), shape: vec![1, 2], data: vec![1.0, -2.5] }];
        let bytes = encode(&layers).unwrap();
        let mut expected = b"FDM1".to_vec();
        expected.extend_from_slice(&[1, 0]);
        expected.extend_from_slice(&[1, 0, 0, 0]);
        expected.extend_from_slice(&[2, 0, 0, 0, b'a', b'b']);
        expected.extend_from_slice(&[2, 0, 0, 0, 1, 0, 0, 0, 2, 0, 0, 0]);
        expected.extend_from_slice(&1.0f32.to_le_bytes());
        expected.extend_from_slice(&(-2.5f32).to_le_bytes());
        assert_eq!(bytes, expected);
        assert_eq!(decode(&bytes, Path::new("x")).unwrap(), layers);
    }

    #[test]
    fn rejects_corrupt_input() {
        let p = Path::new("bad.fdm");
        assert!(matches!(decode(b"FDM2\x01\x00", p), Err(Error::Format { .. })));
        let mut bytes = encode(&[Layer { name: "a".into(), shape: vec![2], data: vec![1.0, 2.0] }]).unwrap();
        bytes.pop();
        assert!(matches!(decode(&bytes, p), Err(Error::Format { .. })));
    }
}
