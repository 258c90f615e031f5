use std::collections::HashMap;
use std::io::{Read, Write};
use std::path::Path;

use super::tape::{Tape, Var};
use super::tensor::{Real, Tensor};
use crate::error::{Error, Result};

const CHECKPOINT_MAGIC: &[u8; 4] = b"TFCK";
const CHECKPOINT_VERSION: u32 = 1;

/// Ordered collection of named trainable arrays.
#[derive(Clone, Debug)]
pub struct Params<F> {
    names: Vec<String>,
    values: Vec<Tensor<F>>,
    index: HashMap<String, usize>,
}

impl<F: Real> Default for Params<F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: Real> Params<F> {
    pub fn new() -> Self {
        Self {
            names: Vec::new(),
            values: Vec::new(),
            index: HashMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor<F>) {
        let name = name.into();
        match self.index.get(&name) {
            Some(&i) => self.values[i] = value,
            None => {
                self.index.insert(name.clone(), self.values.len());
                self.names.push(name);
                self.values.push(value);
            }
        }
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<F>> {
        self.index.get(name).map(|&i| &self.values[i])
    }

    pub fn position(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn values(&self) -> &[Tensor<F>] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [Tensor<F>] {
        &mut self.values
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<F>)> {
        self.names.iter().map(String::as_str).zip(&self.values)
    }

    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(Tensor::numel).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(Tensor::is_finite)
    }

    /// Record every array on `tape`, as trainable leaves or as constants.
    pub fn bind(&self, tape: &mut Tape<F>, trainable: bool) -> BoundParams {
        let vars = self
            .values
            .iter()
            .map(|v| {
                if trainable {
                    tape.param(v.clone())
                } else {
                    tape.constant(v.clone())
                }
            })
            .collect();
        BoundParams {
            vars,
            index: self.index.clone(),
        }
    }

    pub fn cast<G: Real>(&self) -> Params<G> {
        Params {
            names: self.names.clone(),
            values: self.values.iter().map(Tensor::cast).collect(),
            index: self.index.clone(),
        }
    }

    /// Serialize as a flat list of named arrays with shape headers and
    /// little-endian `f32` payloads.
    pub fn write_to(&self, w: &mut impl Write) -> std::io::Result<()> {
        w.write_all(CHECKPOINT_MAGIC)?;
        w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
        w.write_all(&(self.values.len() as u32).to_le_bytes())?;
        for (name, value) in self.iter() {
            w.write_all(&(name.len() as u32).to_le_bytes())?;
            w.write_all(name.as_bytes())?;
            w.write_all(&(value.shape().len() as u32).to_le_bytes())?;
            for &d in value.shape() {
                w.write_all(&(d as u32).to_le_bytes())?;
            }
            for v in value.data() {
                let f = v.to_f32().unwrap_or(f32::NAN);
                w.write_all(&f.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn read_from(r: &mut impl Read) -> Result<Self> {
        let bad = |detail: String| Error::Format {
            what: "checkpoint",
            detail,
        };
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic).map_err(|e| bad(e.to_string()))?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(bad(format!("bad magic {magic:?}")));
        }
        let version = read_u32(r).map_err(|e| bad(e.to_string()))?;
        if version != CHECKPOINT_VERSION {
            return Err(bad(format!("unsupported version {version}")));
        }
        let count = read_u32(r).map_err(|e| bad(e.to_string()))?;
        let mut params = Params::new();
        for _ in 0..count {
            let name_len = read_u32(r).map_err(|e| bad(e.to_string()))? as usize;
            let mut name = vec![0u8; name_len];
            r.read_exact(&mut name).map_err(|e| bad(e.to_string()))?;
            let name = String::from_utf8(name).map_err(|e| bad(e.to_string()))?;
            let ndim = read_u32(r).map_err(|e| bad(e.to_string()))? as usize;
            let shape = (0..ndim)
                .map(|_| read_u32(r).map(|d| d as usize))
                .collect::<std::io::Result<Vec<_>>>()
                .map_err(|e| bad(e.to_string()))?;
            let numel: usize = shape.iter().product();
            let mut buf = vec![0u8; numel * 4];
            r.read_exact(&mut buf).map_err(|e| bad(e.to_string()))?;
            let data = buf
                .chunks_exact(4)
                .map(|c| F::lit(f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64))
                .collect();
            params.insert(name, Tensor::from_vec(&shape, data)?);
        }
        Ok(params)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = std::io::BufWriter::new(file);
        self.write_to(&mut w).map_err(|e| Error::io(path, e))?;
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        Self::read_from(&mut std::io::BufReader::new(file))
    }
}

fn read_u32(r: &mut impl Read) -> std::io::Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

/// Tape handles for a bound [`Params`], addressable by name.
#[derive(Clone, Debug)]
pub struct BoundParams {
    vars: Vec<Var>,
    index: HashMap<String, usize>,
}

impl BoundParams {
    pub fn var(&self, name: &str) -> Var {
        match self.index.get(name) {
            Some(&i) => self.vars[i],
            None => panic!("parameter `{name}` is not bound"),
        }
    }

    pub fn try_var(&self, name: &str) -> Option<Var> {
        self.index.get(name).map(|&i| self.vars[i])
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn checkpoint_round_trip_is_bit_exact_for_f32() {
        let mut p = Params::<f32>::new();
        p.insert("a.w", Tensor::from_vec(&[2, 3], vec![1.5, -2.25, 3e-7, 0.0, -0.0, 1e30]).unwrap());
        p.insert("b", Tensor::from_vec(&[4], vec![0.1, 0.2, 0.3, f32::MIN_POSITIVE]).unwrap());
        let mut buf = Vec::new();
        p.write_to(&mut buf).unwrap();
        let q = Params::<f32>::read_from(&mut buf.as_slice()).unwrap();
        assert_eq!(q.names(), p.names());
        for (a, b) in p.values().iter().zip(q.values()) {
            assert_eq!(a.shape(), b.shape());
            let ab: Vec<u32> = a.data().iter().map(|v| v.to_bits()).collect();
            let bb: Vec<u32> = b.data().iter().map(|v| v.to_bits()).collect();
            assert_eq!(ab, bb);
        }
    }

    #[test]
    fn truncated_checkpoint_is_rejected() {
        let mut p = Params::<f32>::new();
        p.insert("w", Tensor::zeros(&[3, 3]));
        let mut buf = Vec::new();
        p.write_to(&mut buf).unwrap();
        buf.truncate(buf.len() - 5);
        assert!(Params::<f32>::read_from(&mut buf.as_slice()).is_err());
    }
}
