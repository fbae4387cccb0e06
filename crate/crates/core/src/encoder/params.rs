use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use candle_core::{DType, Device, Tensor, Var};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};

/// Named trainable tensors. Ordered by name so iteration, initialization and
/// serialization are reproducible.
#[derive(Debug)]
pub struct ParamStore {
    vars: BTreeMap<String, Var>,
    dtype: DType,
    device: Device,
}

impl ParamStore {
    pub fn new(dtype: DType) -> Self {
        Self {
            vars: BTreeMap::new(),
            dtype,
            device: Device::Cpu,
        }
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    fn insert(&mut self, name: &str, data: Vec<f64>, shape: &[usize]) -> Result<Tensor> {
        let t = Tensor::from_vec(data, shape, &self.device)?.to_dtype(self.dtype)?;
        let var = Var::from_tensor(&t)?;
        let tensor = var.as_tensor().clone();
        self.vars.insert(name.to_string(), var);
        Ok(tensor)
    }

    pub fn normal(
        &mut self,
        name: &str,
        shape: &[usize],
        std: f64,
        rng: &mut ChaCha8Rng,
    ) -> Result<Tensor> {
        let n = shape.iter().product();
        let data = (0..n)
            .map(|_| rng.sample::<f64, _>(StandardNormal) * std)
            .collect();
        self.insert(name, data, shape)
    }

    pub fn uniform(
        &mut self,
        name: &str,
        shape: &[usize],
        bound: f64,
        rng: &mut ChaCha8Rng,
    ) -> Result<Tensor> {
        let n = shape.iter().product();
        let data = (0..n).map(|_| rng.gen_range(-bound..bound)).collect();
        self.insert(name, data, shape)
    }

    pub fn constant(&mut self, name: &str, shape: &[usize], value: f64) -> Result<Tensor> {
        let n = shape.iter().product();
        self.insert(name, vec![value; n], shape)
    }

    pub fn get(&self, name: &str) -> Result<Tensor> {
        self.vars
            .get(name)
            .map(|v| v.as_tensor().clone())
            .ok_or_else(|| Error::Config(format!("missing parameter {name}")))
    }

    pub fn var(&self, name: &str) -> Option<&Var> {
        self.vars.get(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.vars.keys().map(String::as_str)
    }

    pub fn all_vars(&self) -> Vec<Var> {
        self.vars.values().cloned().collect()
    }

    pub fn num_parameters(&self) -> usize {
        self.vars.values().map(|v| v.elem_count()).sum()
    }

    /// Independent copy: updates to one store never reach the other.
    pub fn deep_clone(&self) -> Result<Self> {
        let mut vars = BTreeMap::new();
        for (name, var) in &self.vars {
            vars.insert(name.clone(), Var::from_tensor(&var.as_tensor().copy()?)?);
        }
        Ok(Self {
            vars,
            dtype: self.dtype,
            device: self.device.clone(),
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let tensors: HashMap<String, Tensor> = self
            .vars
            .iter()
            .map(|(k, v)| (k.clone(), v.as_tensor().clone()))
            .collect();
        candle_core::safetensors::save(&tensors, path)?;
        Ok(())
    }

    /// Overwrites parameters with tensors from a safetensors file.
    /// `rename` maps file names to store names (returning `None` skips the
    /// tensor). Returns the store names that received no tensor.
    pub fn load_from(
        &self,
        path: &Path,
        rename: impl Fn(&str) -> Option<String>,
    ) -> Result<Vec<String>> {
        let loaded = candle_core::safetensors::load(path, &self.device)?;
        let mut filled = std::collections::HashSet::new();
        for (name, tensor) in loaded {
            let Some(target) = rename(&name) else { continue };
            if let Some(var) = self.vars.get(&target) {
                if var.shape() != tensor.shape() {
                    return Err(Error::Config(format!(
                        "{name}: checkpoint shape {:?} does not match {:?}",
                        tensor.shape(),
                        var.shape()
                    )));
                }
                var.set(&tensor.to_dtype(self.dtype)?)?;
                filled.insert(target);
            }
        }
        Ok(self
            .vars
            .keys()
            .filter(|k| !filled.contains(*k))
            .cloned()
            .collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn seeded_init_is_reproducible() {
        let make = || {
            let mut rng = ChaCha8Rng::seed_from_u64(7);
            let mut s = ParamStore::new(DType::F64);
            s.normal("w", &[3, 4], 0.02, &mut rng).unwrap();
            s.get("w").unwrap().flatten_all().unwrap().to_vec1::<f64>().unwrap()
        };
        assert_eq!(make(), make());
    }

    #[test]
    fn deep_clone_is_independent() {
        let mut s = ParamStore::new(DType::F64);
        s.constant("b", &[2], 1.0).unwrap();
        let c = s.deep_clone().unwrap();
        s.var("b")
            .unwrap()
            .set(&Tensor::new(&[5.0f64, 5.0], &Device::Cpu).unwrap())
            .unwrap();
        assert_eq!(c.get("b").unwrap().to_vec1::<f64>().unwrap(), vec![1.0, 1.0]);
    }

    #[test]
    fn save_load_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut s = ParamStore::new(DType::F32);
        s.normal("a.weight", &[2, 2], 1.0, &mut rng).unwrap();
        let path = dir.path().join("p.safetensors");
        s.save(&path).unwrap();
        let mut t = ParamStore::new(DType::F32);
        t.constant("a.weight", &[2, 2], 0.0).unwrap();
        t.constant("extra", &[1], 0.0).unwrap();
        let missing = t.load_from(&path, |n| Some(n.to_string())).unwrap();
        assert_eq!(missing, vec!["extra".to_string()]);
        assert_eq!(
            t.get("a.weight").unwrap().to_vec2::<f32>().unwrap(),
            s.get("a.weight").unwrap().to_vec2::<f32>().unwrap()
        );
    }
}
