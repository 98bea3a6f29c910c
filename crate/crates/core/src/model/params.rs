//! Named trainable variables and non-trainable buffers.

use std::collections::BTreeMap;
use std::sync::Mutex;

use candle_core::{DType, Device, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};

/// Master weights are `f32`; buffers hold batch-norm running statistics.
#[derive(Debug)]
pub struct ParamStore {
    params: BTreeMap<String, Var>,
    buffers: Mutex<BTreeMap<String, Tensor>>,
}

impl Clone for ParamStore {
    fn clone(&self) -> Self {
        let params = self
            .params
            .iter()
            .map(|(k, v)| {
                let copy = Var::from_tensor(&v.as_tensor().copy().expect("cpu copy")).expect("float tensor");
                (k.clone(), copy)
            })
            .collect();
        Self {
            params,
            buffers: Mutex::new(self.buffers()),
        }
    }
}

impl ParamStore {
    pub fn get(&self, name: &str) -> Result<&Var> {
        self.params
            .get(name)
            .ok_or_else(|| Error::InvalidArgument(format!("no parameter named `{name}`")))
    }

    pub fn params(&self) -> &BTreeMap<String, Var> {
        &self.params
    }

    pub fn buffer(&self, name: &str) -> Result<Tensor> {
        self.buffers
            .lock()
            .expect("buffer lock")
            .get(name)
            .cloned()
            .ok_or_else(|| Error::InvalidArgument(format!("no buffer named `{name}`")))
    }

    pub fn set_buffer(&self, name: &str, value: Tensor) {
        self.buffers.lock().expect("buffer lock").insert(name.to_string(), value);
    }

    pub fn buffers(&self) -> BTreeMap<String, Tensor> {
        self.buffers.lock().expect("buffer lock").clone()
    }

    pub fn num_params(&self) -> usize {
        self.params.values().map(|v| v.elem_count()).sum()
    }

    /// Overwrites parameters and buffers present in `tensors`; returns the
    /// names that matched. Shapes must agree.
    pub fn load_from(&self, tensors: &BTreeMap<String, Tensor>) -> Result<Vec<String>> {
        let mut loaded = Vec::new();
        for (name, t) in tensors {
            if let Some(var) = self.params.get(name) {
                if var.dims() != t.dims() {
                    return Err(Error::shape(format!("{name} {:?}", var.dims()), format!("{:?}", t.dims())));
                }
                var.set(&t.to_dtype(DType::F32)?)?;
                loaded.push(name.clone());
            } else {
                let mut buffers = self.buffers.lock().expect("buffer lock");
                if let Some(b) = buffers.get_mut(name) {
                    if b.dims() != t.dims() {
                        return Err(Error::shape(format!("{name} {:?}", b.dims()), format!("{:?}", t.dims())));
                    }
                    *b = t.to_dtype(DType::F32)?;
                    loaded.push(name.clone());
                }
            }
        }
        Ok(loaded)
    }

    /// All parameters and buffers under their names.
    pub fn tensors(&self) -> BTreeMap<String, Tensor> {
        let mut out: BTreeMap<String, Tensor> = self
            .params
            .iter()
            .map(|(k, v)| (k.clone(), v.as_tensor().clone()))
            .collect();
        out.extend(self.buffers());
        out
    }
}

/// Registers parameters with deterministic initialisation.
pub struct Builder {
    params: BTreeMap<String, Var>,
    buffers: BTreeMap<String, Tensor>,
    rng: ChaCha8Rng,
    prefix: Vec<String>,
}

impl Builder {
    pub fn new(seed: u64) -> Self {
        Self {
            params: BTreeMap::new(),
            buffers: BTreeMap::new(),
            rng: ChaCha8Rng::seed_from_u64(seed),
            prefix: Vec::new(),
        }
    }

    pub fn push(&mut self, scope: impl Into<String>) {
        self.prefix.push(scope.into());
    }

    pub fn pop(&mut self) {
        self.prefix.pop();
    }

    pub fn path(&self, name: &str) -> String {
        let mut parts = self.prefix.clone();
        parts.push(name.to_string());
        parts.join(".")
    }

    fn insert(&mut self, name: &str, t: Tensor) -> Result<String> {
        let path = self.path(name);
        if self.params.contains_key(&path) {
            return Err(Error::InvalidArgument(format!("duplicate parameter `{path}`")));
        }
        self.params.insert(path.clone(), Var::from_tensor(&t)?);
        Ok(path)
    }

    /// He-normal initialisation with the given fan-in.
    pub fn kaiming(&mut self, name: &str, dims: &[usize], fan_in: usize) -> Result<String> {
        let std = (2.0 / fan_in as f64).sqrt();
        let normal = Normal::new(0.0, std).expect("positive std");
        let n: usize = dims.iter().product();
        let data: Vec<f32> = (0..n).map(|_| normal.sample(&mut self.rng) as f32).collect();
        self.insert(name, Tensor::from_vec(data, dims, &Device::Cpu)?)
    }

    pub fn constant(&mut self, name: &str, dims: &[usize], value: f32) -> Result<String> {
        let t = Tensor::full(value, dims, &Device::Cpu)?;
        self.insert(name, t)
    }

    pub fn buffer(&mut self, name: &str, dims: &[usize], value: f32) -> Result<String> {
        let path = self.path(name);
        self.buffers.insert(path.clone(), Tensor::full(value, dims, &Device::Cpu)?);
        Ok(path)
    }

    pub fn finish(self) -> ParamStore {
        ParamStore {
            params: self.params,
            buffers: Mutex::new(self.buffers),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn kaiming_is_seeded() {
        let mut a = Builder::new(3);
        let mut b = Builder::new(3);
        a.kaiming("w", &[4, 4], 4).unwrap();
        b.kaiming("w", &[4, 4], 4).unwrap();
        let (a, b) = (a.finish(), b.finish());
        let va: Vec<f32> = a.get("w").unwrap().flatten_all().unwrap().to_vec1().unwrap();
        let vb: Vec<f32> = b.get("w").unwrap().flatten_all().unwrap().to_vec1().unwrap();
        assert_eq!(va, vb);
    }

    #[test]
    fn scoped_names_and_duplicates() {
        let mut b = Builder::new(0);
        b.push("enc");
        b.push("0");
        assert_eq!(b.constant("bias", &[2], 0.0).unwrap(), "enc.0.bias");
        assert!(b.constant("bias", &[2], 0.0).is_err());
        b.pop();
        assert_eq!(b.path("x"), "enc.x");
    }

    #[test]
    fn clone_is_deep() {
        let mut b = Builder::new(0);
        b.constant("w", &[2], 1.0).unwrap();
        let store = b.finish();
        let copy = store.clone();
        store.get("w").unwrap().set(&Tensor::new(&[5f32, 5.0], &Device::Cpu).unwrap()).unwrap();
        let v: Vec<f32> = copy.get("w").unwrap().to_vec1().unwrap();
        assert_eq!(v, vec![1.0, 1.0]);
    }

    #[test]
    fn load_checks_shapes() {
        let mut b = Builder::new(0);
        b.constant("w", &[2], 1.0).unwrap();
        b.buffer("m", &[2], 0.0).unwrap();
        let store = b.finish();
        let mut t = BTreeMap::new();
        t.insert("m".to_string(), Tensor::new(&[3f32, 4.0], &Device::Cpu).unwrap());
        t.insert("other".to_string(), Tensor::new(&[3f32], &Device::Cpu).unwrap());
        assert_eq!(store.load_from(&t).unwrap(), vec!["m".to_string()]);
        t.insert("w".to_string(), Tensor::new(&[3f32], &Device::Cpu).unwrap());
        assert!(store.load_from(&t).is_err());
    }
}
