//! Model files.
//!
//! ```text
//! FPCNN1\n
//! fingerprint <p, feature layout, channel spec>\n
//! adam_step <t>\n
//! tensors <count>\n
//! \n
//! count x { name_len u32, name utf8, ndim u32, dims u64 x ndim, data f64 x prod(dims) }
//! ```
//!
//! All binary fields are little-endian. Tensors are the eight parameters,
//! their Adam moments (`adam.m.*`, `adam.v.*`) and, when present, the
//! intensity window as `norm = [lo, hi]`.

use std::collections::BTreeMap;
use std::path::Path;

use super::{AdamState, CnnModel, ModelSpec, Tensor, PARAM_NAMES};
use crate::error::{Error, Result};
use crate::patches::NormStats;

pub const MODEL_MAGIC: &str = "FPCNN1";

pub fn model_bytes(model: &CnnModel) -> Vec<u8> {
    let mut named: Vec<(String, &Tensor)> = Vec::new();
    for (name, t) in PARAM_NAMES.iter().zip(&model.params) {
        named.push((name.to_string(), t));
    }
    for (name, t) in PARAM_NAMES.iter().zip(&model.adam.m) {
        named.push((format!("adam.m.{name}"), t));
    }
    for (name, t) in PARAM_NAMES.iter().zip(&model.adam.v) {
        named.push((format!("adam.v.{name}"), t));
    }
    let norm = model
        .norm
        .map(|n| Tensor::new(vec![2], vec![n.lo, n.hi]).expect("two values"));
    if let Some(n) = &norm {
        named.push(("norm".to_string(), n));
    }

    let mut out = format!(
        "{MODEL_MAGIC}\nfingerprint {}\nadam_step {}\ntensors {}\n\n",
        model.fingerprint(),
        model.adam.step,
        named.len()
    )
    .into_bytes();
    for (name, t) in named {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.shape.len() as u32).to_le_bytes());
        for d in &t.shape {
            out.extend_from_slice(&(*d as u64).to_le_bytes());
        }
        for v in &t.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

pub fn save_model(model: &CnnModel, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, model_bytes(model)).map_err(|e| Error::io(path, e))
}

/// Loads a model and checks its fingerprint against `expected`.
pub fn load_model_expecting(path: impl AsRef<Path>, expected: &ModelSpec) -> Result<CnnModel> {
    let model = load_model(path)?;
    if model.spec != *expected {
        return Err(Error::FingerprintMismatch {
            expected: expected.fingerprint(),
            found: model.fingerprint(),
        });
    }
    Ok(model)
}

pub fn load_model(path: impl AsRef<Path>) -> Result<CnnModel> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut cur = Cursor {
        bytes: &bytes,
        at: 0,
        path,
    };
    if cur.line()? != MODEL_MAGIC {
        return Err(Error::BadVersion(path.to_path_buf()));
    }
    let fp = cur.keyed_line("fingerprint")?;
    let spec = parse_fingerprint(&fp).ok_or_else(|| Error::header(path, format!("bad fingerprint `{fp}`")))?;
    spec.validate()?;
    let step: u64 = cur
        .keyed_line("adam_step")?
        .parse()
        .map_err(|_| Error::header(path, "bad adam_step"))?;
    let count: usize = cur
        .keyed_line("tensors")?
        .parse()
        .map_err(|_| Error::header(path, "bad tensor count"))?;
    if !cur.line()?.is_empty() {
        return Err(Error::header(path, "missing blank line after header"));
    }

    let mut tensors = BTreeMap::new();
    for _ in 0..count {
        let name_len = cur.u32()? as usize;
        let name = String::from_utf8(cur.take(name_len)?.to_vec())
            .map_err(|_| Error::header(path, "tensor name is not utf-8"))?;
        let ndim = cur.u32()? as usize;
        let shape: Vec<usize> = (0..ndim)
            .map(|_| cur.u64().map(|d| d as usize))
            .collect::<Result<_>>()?;
        let n: usize = shape.iter().product();
        let data = cur
            .take(n.checked_mul(8).ok_or_else(|| Error::header(path, "tensor too large"))?)?
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        tensors.insert(name, Tensor::new(shape, data)?);
    }
    if cur.at != bytes.len() {
        return Err(Error::header(path, "trailing bytes after tensors"));
    }

    let shapes = spec.param_shapes();
    let mut fetch = |name: String, shape: &Vec<usize>| -> Result<Tensor> {
        let t = tensors
            .remove(&name)
            .ok_or_else(|| Error::header(path, format!("missing tensor `{name}`")))?;
        if &t.shape != shape {
            return Err(Error::ShapeMismatch(format!(
                "tensor `{name}` has shape {:?}, fingerprint implies {shape:?}",
                t.shape
            )));
        }
        Ok(t)
    };
    let mut params = Vec::new();
    let mut m = Vec::new();
    let mut v = Vec::new();
    for (name, shape) in PARAM_NAMES.iter().zip(&shapes) {
        params.push(fetch(name.to_string(), shape)?);
        m.push(fetch(format!("adam.m.{name}"), shape)?);
        v.push(fetch(format!("adam.v.{name}"), shape)?);
    }
    let norm = match tensors.remove("norm") {
        Some(t) if t.shape == [2] => Some(NormStats::new(t.data[0], t.data[1])?),
        Some(_) => return Err(Error::header(path, "bad norm tensor")),
        None => None,
    };
    if let Some(extra) = tensors.keys().next() {
        return Err(Error::header(path, format!("unexpected tensor `{extra}`")));
    }
    Ok(CnnModel {
        spec,
        params,
        adam: AdamState { step, m, v },
        norm,
    })
}

fn parse_fingerprint(fp: &str) -> Option<ModelSpec> {
    let mut fields = BTreeMap::new();
    for part in fp.split_whitespace() {
        let (k, v) = part.split_once('=')?;
        fields.insert(k, v);
    }
    if fields.len() != 5 || fields.get("features")? != &"dx,dy,dist" {
        return None;
    }
    let channels: Vec<usize> = fields
        .get("channels")?
        .split(',')
        .map(|c| c.parse().ok())
        .collect::<Option<_>>()?;
    if channels.len() != 3 || channels[0] != 1 {
        return None;
    }
    Some(ModelSpec {
        patch_size: fields.get("p")?.parse().ok()?,
        channels: [channels[1], channels[2]],
        hidden: fields.get("hidden")?.parse().ok()?,
        position_features: match *fields.get("position")? {
            "on" => true,
            "off" => false,
            _ => return None,
        },
    })
}

struct Cursor<'a> {
    bytes: &'a [u8],
    at: usize,
    path: &'a Path,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.bytes.len() - self.at < n {
            return Err(Error::header(self.path, "truncated model file"));
        }
        let s = &self.bytes[self.at..self.at + n];
        self.at += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn line(&mut self) -> Result<String> {
        let rest = &self.bytes[self.at..];
        let end = rest
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| Error::header(self.path, "unterminated header line"))?;
        let line = std::str::from_utf8(&rest[..end])
            .map_err(|_| Error::header(self.path, "header is not utf-8"))?
            .to_string();
        self.at += end + 1;
        Ok(line)
    }

    fn keyed_line(&mut self, key: &str) -> Result<String> {
        let line = self.line()?;
        line.strip_prefix(key)
            .and_then(|r| r.strip_prefix(' '))
            .map(str::to_string)
            .ok_or_else(|| Error::header(self.path, format!("expected `{key}`, got `{line}`")))
    }
}
