//! Binary checkpoint container.
//!
//! Layout (little-endian):
//!
//! ```text
//! magic      8 bytes  "SGNCKPT\0"
//! version    u32
//! fingerprint u32 length + UTF-8
//! metadata   u64 length + UTF-8 JSON
//! count      u32
//! count x { name: u32 length + UTF-8, rows: u32, cols: u32, rows*cols f64 }
//! ```

use std::io::{Read, Write};
use std::path::Path;

use super::params::{Adam, ParamStore};
use super::tensor::Tensor;
use crate::error::{Result, SgnError};

pub const MAGIC: &[u8; 8] = b"SGNCKPT\0";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub fingerprint: String,
    pub metadata: serde_json::Value,
    pub tensors: Vec<(String, Tensor)>,
}

impl Checkpoint {
    pub fn tensor(&self, name: &str) -> Option<&Tensor> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn write_to(&self, w: &mut impl Write) -> Result<()> {
        w.write_all(MAGIC)?;
        w.write_all(&VERSION.to_le_bytes())?;
        write_str32(w, &self.fingerprint)?;
        let meta = serde_json::to_vec(&self.metadata).map_err(|e| SgnError::Checkpoint(e.to_string()))?;
        w.write_all(&(meta.len() as u64).to_le_bytes())?;
        w.write_all(&meta)?;
        w.write_all(&(self.tensors.len() as u32).to_le_bytes())?;
        for (name, t) in &self.tensors {
            write_str32(w, name)?;
            w.write_all(&(t.rows as u32).to_le_bytes())?;
            w.write_all(&(t.cols as u32).to_le_bytes())?;
            for v in &t.data {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn read_from(r: &mut impl Read) -> Result<Self> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(SgnError::Checkpoint("bad magic".into()));
        }
        let version = read_u32(r)?;
        if version != VERSION {
            return Err(SgnError::Checkpoint(format!("unsupported version {version}")));
        }
        let fingerprint = read_str32(r)?;
        let mut len8 = [0u8; 8];
        r.read_exact(&mut len8)?;
        let mut meta = vec![0u8; u64::from_le_bytes(len8) as usize];
        r.read_exact(&mut meta)?;
        let metadata = serde_json::from_slice(&meta).map_err(|e| SgnError::Checkpoint(e.to_string()))?;
        let count = read_u32(r)? as usize;
        let mut tensors = Vec::with_capacity(count);
        for _ in 0..count {
            let name = read_str32(r)?;
            let rows = read_u32(r)? as usize;
            let cols = read_u32(r)? as usize;
            let mut data = Vec::with_capacity(rows * cols);
            let mut buf = [0u8; 8];
            for _ in 0..rows * cols {
                r.read_exact(&mut buf)?;
                data.push(f64::from_le_bytes(buf));
            }
            tensors.push((name, Tensor::from_vec(rows, cols, data)));
        }
        Ok(Self { fingerprint, metadata, tensors })
    }

    /// Parameters under `param/`, Adam moments under `adam.m/` and
    /// `adam.v/`; the optimizer's scalars go into `metadata.adam`.
    pub fn capture(fingerprint: &str, mut metadata: serde_json::Value, store: &ParamStore, adam: &Adam) -> Self {
        let mut tensors = Vec::new();
        for (id, p) in store.iter() {
            tensors.push((format!("param/{}", p.name), p.value.clone()));
            if let Some((m, v)) = adam.moments(id) {
                tensors.push((format!("adam.m/{}", p.name), m.clone()));
                tensors.push((format!("adam.v/{}", p.name), v.clone()));
            }
        }
        if let serde_json::Value::Object(map) = &mut metadata {
            map.insert(
                "adam".into(),
                serde_json::json!({"lr": adam.lr, "beta1": adam.beta1, "beta2": adam.beta2, "eps": adam.eps, "clip_norm": adam.clip_norm, "step": adam.step}),
            );
        }
        Self { fingerprint: fingerprint.to_string(), metadata, tensors }
    }

    /// Inverse of [`Checkpoint::capture`]; the store must already hold
    /// every parameter with the right shape.
    pub fn restore(&self, store: &mut ParamStore, adam: &mut Adam) -> Result<()> {
        let ids: Vec<_> = store.ids().collect();
        for id in ids {
            let name = store.name(id).to_string();
            let value = self.tensor(&format!("param/{name}")).ok_or_else(|| SgnError::Checkpoint(format!("missing parameter {name}")))?;
            if value.shape() != store.value(id).shape() {
                return Err(SgnError::Checkpoint(format!("shape mismatch for {name}")));
            }
            *store.value_mut(id) = value.clone();
            if let (Some(m), Some(v)) = (self.tensor(&format!("adam.m/{name}")), self.tensor(&format!("adam.v/{name}"))) {
                adam.set_moments(id, m.clone(), v.clone());
            }
        }
        let params = self.tensors.iter().filter(|(n, _)| n.starts_with("param/")).count();
        if params != store.len() {
            return Err(SgnError::Checkpoint(format!("checkpoint holds {params} parameters, model has {}", store.len())));
        }
        if let Some(a) = self.metadata.get("adam") {
            let f = |k: &str| a.get(k).and_then(|v| v.as_f64()).ok_or_else(|| SgnError::Checkpoint(format!("adam.{k} missing")));
            adam.lr = f("lr")?;
            adam.beta1 = f("beta1")?;
            adam.beta2 = f("beta2")?;
            adam.eps = f("eps")?;
            adam.clip_norm = a.get("clip_norm").and_then(|v| v.as_f64());
            adam.step = a.get("step").and_then(|v| v.as_u64()).ok_or_else(|| SgnError::Checkpoint("adam.step missing".into()))?;
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("tmp");
        {
            let mut f = std::io::BufWriter::new(std::fs::File::create(&tmp)?);
            self.write_to(&mut f)?;
            f.flush()?;
        }
        std::fs::rename(tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut f = std::io::BufReader::new(std::fs::File::open(path)?);
        Self::read_from(&mut f)
    }
}

fn write_str32(w: &mut impl Write, s: &str) -> Result<()> {
    w.write_all(&(s.len() as u32).to_le_bytes())?;
    w.write_all(s.as_bytes())?;
    Ok(())
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_str32(r: &mut impl Read) -> Result<String> {
    let len = read_u32(r)? as usize;
    let mut b = vec![0u8; len];
    r.read_exact(&mut b)?;
    String::from_utf8(b).map_err(|e| SgnError::Checkpoint(e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trips_bit_exactly() {
        let ck = Checkpoint {
            fingerprint: "abc123".into(),
            metadata: serde_json::json!({"step": 7, "lr": 0.001}),
            tensors: vec![
                ("a.weight".into(), Tensor::from_vec(2, 2, vec![0.1, -1e-300, f64::MAX, 1.0 / 3.0])),
                ("b".into(), Tensor::zeros(0, 3)),
            ],
        };
        let mut buf = Vec::new();
        ck.write_to(&mut buf).unwrap();
        let back = Checkpoint::read_from(&mut buf.as_slice()).unwrap();
        assert_eq!(back, ck);
        buf[0] = b'X';
        assert!(Checkpoint::read_from(&mut buf.as_slice()).is_err());
    }
}
