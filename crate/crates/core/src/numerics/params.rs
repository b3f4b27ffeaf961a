use std::collections::HashMap;
use std::io::{Read, Write};
use std::path::Path;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::tensor::Tensor;
use crate::error::{Result, VqdError};

const MAGIC: &[u8; 4] = b"VQD1";
const VERSION: u32 = 1;

/// Named trainable tensors plus their gradient buffers.
///
/// Iteration order is insertion order, so two stores built by the same code
/// path serialise identically.
#[derive(Clone, Debug)]
pub struct ParameterStore {
    names: Vec<String>,
    values: Vec<Tensor>,
    grads: Vec<Tensor>,
    index: HashMap<String, usize>,
    rng_seed: u64,
}

/// Handle to a parameter; cheaper than looking names up in hot loops.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

impl ParameterStore {
    pub fn new(rng_seed: u64) -> Self {
        Self {
            names: Vec::new(),
            values: Vec::new(),
            grads: Vec::new(),
            index: HashMap::new(),
            rng_seed,
        }
    }

    pub fn rng_seed(&self) -> u64 {
        self.rng_seed
    }

    pub fn insert(&mut self, name: &str, value: Tensor) -> ParamId {
        assert!(!self.index.contains_key(name), "duplicate parameter {name}");
        let id = self.values.len();
        self.index.insert(name.to_string(), id);
        self.names.push(name.to_string());
        self.grads.push(Tensor::zeros(value.shape()));
        self.values.push(value);
        ParamId(id)
    }

    /// Inserts a tensor drawn from `N(0, std^2)`.
    pub fn insert_normal(&mut self, name: &str, shape: &[usize], std: f64, rng: &mut ChaCha8Rng) -> ParamId {
        let normal = Normal::new(0.0, std).expect("finite std");
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| normal.sample(rng)).collect();
        self.insert(name, Tensor::new(shape.to_vec(), data).expect("shape"))
    }

    /// Uniform Glorot-style init for a `fan_in x fan_out` weight.
    pub fn insert_glorot(&mut self, name: &str, fan_in: usize, fan_out: usize, rng: &mut ChaCha8Rng) -> ParamId {
        let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let data = (0..fan_in * fan_out).map(|_| rng.random_range(-limit..limit)).collect();
        self.insert(name, Tensor::matrix(fan_in, fan_out, data).expect("shape"))
    }

    pub fn id(&self, name: &str) -> Result<ParamId> {
        self.index
            .get(name)
            .map(|&i| ParamId(i))
            .ok_or_else(|| VqdError::UnknownParameter(name.to_string()))
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(Tensor::len).sum()
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.values[id.0]
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.values[id.0]
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        Ok(self.value(self.id(name)?))
    }

    pub fn grad(&self, id: ParamId) -> &Tensor {
        &self.grads[id.0]
    }

    pub(crate) fn grad_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.grads[id.0]
    }

    pub fn zero_grads(&mut self) {
        for g in &mut self.grads {
            g.data_mut().fill(0.0);
        }
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(self.values.iter())
    }

    /// Binary checkpoint: magic, version, then one record per parameter
    /// (`u32` name length, name bytes, `u32` rank, `u64` extents,
    /// little-endian `f64` payload). Records run to end of file.
    pub fn write_checkpoint<W: Write>(&self, mut w: W) -> Result<()> {
        w.write_all(MAGIC)?;
        w.write_all(&VERSION.to_le_bytes())?;
        for (name, value) in self.iter() {
            w.write_all(&(name.len() as u32).to_le_bytes())?;
            w.write_all(name.as_bytes())?;
            w.write_all(&(value.shape().len() as u32).to_le_bytes())?;
            for &e in value.shape() {
                w.write_all(&(e as u64).to_le_bytes())?;
            }
            for v in value.data() {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut buf = Vec::new();
        self.write_checkpoint(&mut buf)?;
        std::fs::write(path, buf)?;
        Ok(())
    }

    /// Reads every record of a checkpoint into `(name, tensor)` pairs.
    pub fn read_checkpoint<R: Read>(mut r: R) -> Result<Vec<(String, Tensor)>> {
        let mut bytes = Vec::new();
        r.read_to_end(&mut bytes)?;
        let mut cur = Cursor { bytes: &bytes, pos: 0 };
        if cur.take(4)? != MAGIC {
            return Err(VqdError::Checkpoint("bad magic".into()));
        }
        let version = cur.u32()?;
        if version != VERSION {
            return Err(VqdError::Checkpoint(format!("unsupported version {version}")));
        }
        let mut out = Vec::new();
        while cur.pos < bytes.len() {
            let name_len = cur.u32()? as usize;
            let name = String::from_utf8(cur.take(name_len)?.to_vec())
                .map_err(|_| VqdError::Checkpoint("name is not utf-8".into()))?;
            let rank = cur.u32()? as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(cur.u64()? as usize);
            }
            let n: usize = shape.iter().product();
            let mut data = Vec::with_capacity(n);
            for _ in 0..n {
                data.push(f64::from_le_bytes(cur.take(8)?.try_into().unwrap()));
            }
            out.push((name, Tensor::new(shape, data)?));
        }
        Ok(out)
    }

    /// Overwrites this store's values from a checkpoint. Every parameter must
    /// be present with a matching shape.
    pub fn load_values(&mut self, path: &Path) -> Result<()> {
        let file = std::fs::File::open(path)?;
        let records = Self::read_checkpoint(std::io::BufReader::new(file))?;
        self.assign(records)
    }

    pub fn assign(&mut self, records: Vec<(String, Tensor)>) -> Result<()> {
        if records.len() != self.len() {
            return Err(VqdError::Checkpoint(format!(
                "checkpoint has {} parameters, model expects {}",
                records.len(),
                self.len()
            )));
        }
        for (name, t) in records {
            let id = self.id(&name)?;
            if t.shape() != self.values[id.0].shape() {
                return Err(VqdError::Checkpoint(format!(
                    "{name}: shape {:?} != {:?}",
                    t.shape(),
                    self.values[id.0].shape()
                )));
            }
            self.values[id.0] = t;
        }
        Ok(())
    }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(VqdError::Checkpoint("truncated".into()));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn checkpoint_layout_is_stable() {
        let mut store = ParameterStore::new(0);
        store.insert("a", Tensor::vector(vec![1.0, -2.0]));
        let mut buf = Vec::new();
        store.write_checkpoint(&mut buf).unwrap();
        let mut expected = b"VQD1".to_vec();
        expected.extend(1u32.to_le_bytes());
        expected.extend(1u32.to_le_bytes());
        expected.push(b'a');
        expected.extend(1u32.to_le_bytes());
        expected.extend(2u64.to_le_bytes());
        expected.extend(1.0f64.to_le_bytes());
        expected.extend((-2.0f64).to_le_bytes());
        assert_eq!(buf, expected);
    }

    #[test]
    fn checkpoint_roundtrip() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut store = ParameterStore::new(3);
        store.insert_normal("w", &[3, 4], 1.0, &mut rng);
        store.insert_glorot("v", 4, 2, &mut rng);
        let mut buf = Vec::new();
        store.write_checkpoint(&mut buf).unwrap();
        let mut other = store.clone();
        other.value_mut(ParamId(0)).data_mut().fill(0.0);
        other.assign(ParameterStore::read_checkpoint(buf.as_slice()).unwrap()).unwrap();
        assert_eq!(other.get("w").unwrap(), store.get("w").unwrap());
    }

    #[test]
    fn rejects_garbage() {
        assert!(ParameterStore::read_checkpoint(&b"NOPE"[..]).is_err());
        let mut buf = b"VQD1".to_vec();
        buf.extend(1u32.to_le_bytes());
        buf.extend(5u32.to_le_bytes());
        assert!(ParameterStore::read_checkpoint(buf.as_slice()).is_err());
    }

    #[test]
    fn order_is_insertion_order() {
        let mut s = ParameterStore::new(1);
        for name in ["z", "a", "m"] {
            s.insert(name, Tensor::scalar(0.0));
        }
        let names: Vec<_> = s.iter().map(|(n, _)| n.to_string()).collect();
        assert_eq!(names, ["z", "a", "m"]);
    }
}
