use std::collections::HashMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use rand::Rng;

use super::Tensor;
use crate::error::{Error, Result};

pub const CHECKPOINT_MANIFEST: &str = "manifest.txt";
pub const CHECKPOINT_BLOB: &str = "params.bin";

/// Named parameters in insertion order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) {
        let name = name.into();
        match self.index.get(&name) {
            Some(&i) => self.tensors[i] = t,
            None => {
                self.index.insert(name.clone(), self.names.len());
                self.names.push(name);
                self.tensors.push(t);
            }
        }
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.index.get(name).map(|&i| &self.tensors[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.index.get(name).map(|&i| &mut self.tensors[i])
    }

    pub fn contains(&self, name: &str) -> bool {
        self.index.contains_key(name)
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn num_values(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    /// Uniform `±1/sqrt(fan_in)` weights.
    pub fn init_uniform(&mut self, name: &str, shape: &[usize], fan_in: usize, rng: &mut impl Rng) {
        let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
        let t = Tensor::from_fn(shape, |_| rng.gen_range(-bound..=bound));
        self.insert(name, t);
    }

    /// Writes `manifest.txt` (one `name shape offset count` row per
    /// parameter, shape as `d0xd1x…`) and `params.bin` (raw little-endian
    /// `f64` values, offsets in values) into `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut manifest = String::new();
        let mut blob = Vec::with_capacity(self.num_values() * 8);
        let mut offset = 0;
        for (name, t) in self.iter() {
            let shape = if t.shape().is_empty() {
                "scalar".to_string()
            } else {
                t.shape().iter().map(|d| d.to_string()).collect::<Vec<_>>().join("x")
            };
            manifest.push_str(&format!("{name} {shape} {offset} {}\n", t.numel()));
            for v in t.data() {
                blob.extend_from_slice(&v.to_le_bytes());
            }
            offset += t.numel();
        }
        let mpath = dir.join(CHECKPOINT_MANIFEST);
        fs::write(&mpath, manifest).map_err(|e| Error::io(&mpath, e))?;
        let bpath = dir.join(CHECKPOINT_BLOB);
        let mut f = fs::File::create(&bpath).map_err(|e| Error::io(&bpath, e))?;
        f.write_all(&blob).map_err(|e| Error::io(&bpath, e))?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let mpath = dir.join(CHECKPOINT_MANIFEST);
        let manifest = fs::read_to_string(&mpath).map_err(|e| Error::io(&mpath, e))?;
        let bpath = dir.join(CHECKPOINT_BLOB);
        let blob = fs::read(&bpath).map_err(|e| Error::io(&bpath, e))?;
        let mut store = Self::new();
        for (lineno, line) in manifest.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let parse_err = |msg: &str| Error::Parse {
                path: mpath.clone(),
                line: lineno + 1,
                msg: msg.to_string(),
            };
            let fields: Vec<&str> = line.split_whitespace().collect();
            let [name, shape, offset, count] = fields[..] else {
                return Err(parse_err("expected `name shape offset count`"));
            };
            let shape: Vec<usize> = if shape == "scalar" {
                Vec::new()
            } else {
                shape
                    .split('x')
                    .map(str::parse)
                    .collect::<std::result::Result<_, _>>()
                    .map_err(|_| parse_err("bad shape"))?
            };
            let offset: usize = offset.parse().map_err(|_| parse_err("bad offset"))?;
            let count: usize = count.parse().map_err(|_| parse_err("bad count"))?;
            let bytes = blob
                .get(offset * 8..(offset + count) * 8)
                .ok_or_else(|| Error::Format {
                    path: bpath.clone(),
                    offset: (offset * 8) as u64,
                    msg: format!("parameter `{name}` runs past end of blob"),
                })?;
            let data = bytes
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
                .collect();
            store.insert(name, Tensor::new(&shape, data).map_err(|e| parse_err(&e.to_string()))?);
        }
        Ok(store)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn checkpoint_round_trip_is_bit_exact() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let mut store = ParamStore::new();
        store.init_uniform("a.w", &[3, 4], 4, &mut rng);
        store.insert("a.b", Tensor::zeros(&[3]));
        store.insert("s", Tensor::scalar(-0.0));
        let dir = tempfile::tempdir().unwrap();
        store.save(dir.path()).unwrap();
        let back = ParamStore::load(dir.path()).unwrap();
        assert_eq!(back.names(), store.names());
        for ((_, a), (_, b)) in store.iter().zip(back.iter()) {
            assert_eq!(a.shape(), b.shape());
            let bits = |t: &Tensor| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
            assert_eq!(bits(a), bits(b));
        }
    }

    #[test]
    fn truncated_blob_is_reported() {
        let mut store = ParamStore::new();
        store.insert("w", Tensor::zeros(&[4]));
        let dir = tempfile::tempdir().unwrap();
        store.save(dir.path()).unwrap();
        fs::write(dir.path().join(CHECKPOINT_BLOB), [0u8; 12]).unwrap();
        assert!(matches!(ParamStore::load(dir.path()), Err(Error::Format { .. })));
    }
}
