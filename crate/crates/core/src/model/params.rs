use std::collections::{BTreeMap, BTreeSet};

use candle_core::{DType, Device, Shape, Tensor, Var};
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy)]
pub enum Init {
    Zeros,
    Ones,
    Normal(f64),
}

/// Named trainable tensors.
///
/// Each parameter draws its initial values from its own ChaCha stream keyed
/// by `(seed, name)`, so initialization does not depend on creation order.
/// Parameters already present (e.g. loaded from a checkpoint) are reused.
#[derive(Debug, Clone)]
pub struct ParamStore {
    vars: BTreeMap<String, Var>,
    touched: BTreeSet<String>,
    seed: u64,
    dtype: DType,
    device: Device,
}

fn name_stream(name: &str) -> u64 {
    // FNV-1a
    let mut h: u64 = 0xcbf29ce484222325;
    for b in name.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

impl ParamStore {
    pub fn new(seed: u64, dtype: DType, device: &Device) -> Self {
        Self { vars: BTreeMap::new(), touched: BTreeSet::new(), seed, dtype, device: device.clone() }
    }

    pub fn from_tensors(tensors: BTreeMap<String, Tensor>, dtype: DType, device: &Device) -> Result<Self> {
        let mut vars = BTreeMap::new();
        for (name, t) in tensors {
            vars.insert(name, Var::from_tensor(&t.to_dtype(dtype)?.to_device(device)?)?);
        }
        Ok(Self { vars, touched: BTreeSet::new(), seed: 0, dtype, device: device.clone() })
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    pub fn get_or_init<S: Into<Shape>>(&mut self, name: &str, shape: S, init: Init) -> Result<Tensor> {
        let shape = shape.into();
        self.touched.insert(name.to_string());
        if let Some(v) = self.vars.get(name) {
            if v.shape() != &shape {
                return Err(Error::ShapeMismatch(format!(
                    "parameter {name}: stored {:?}, expected {:?}",
                    v.dims(),
                    shape.dims()
                )));
            }
            return Ok(v.as_tensor().clone());
        }
        let n = shape.elem_count();
        let values: Vec<f64> = match init {
            Init::Zeros => vec![0.0; n],
            Init::Ones => vec![1.0; n],
            Init::Normal(std) => {
                let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
                rng.set_stream(name_stream(name));
                (0..n).map(|_| std * Distribution::<f64>::sample(&StandardNormal, &mut rng)).collect::<Vec<f64>>()
            }
        };
        let t = Tensor::from_vec(values, shape, &self.device)?.to_dtype(self.dtype)?;
        let var = Var::from_tensor(&t)?;
        let out = var.as_tensor().clone();
        self.vars.insert(name.to_string(), var);
        Ok(out)
    }

    pub fn vars(&self) -> &BTreeMap<String, Var> {
        &self.vars
    }

    pub fn num_params(&self) -> usize {
        self.vars.values().map(|v| v.elem_count()).sum()
    }

    /// Fails if the store holds parameters no module asked for.
    pub fn ensure_all_used(&self) -> Result<()> {
        if let Some(name) = self.vars.keys().find(|k| !self.touched.contains(*k)) {
            return Err(Error::Malformed { what: "parameter set".into(), reason: format!("unexpected parameter {name}") });
        }
        Ok(())
    }
}

/// Hierarchical name builder, `a.b.c`.
#[derive(Debug, Clone)]
pub struct Path(String);

impl Path {
    pub fn root(name: &str) -> Self {
        Path(name.to_string())
    }

    pub fn sub(&self, name: impl std::fmt::Display) -> Path {
        if self.0.is_empty() {
            Path(name.to_string())
        } else {
            Path(format!("{}.{name}", self.0))
        }
    }

    pub fn name(&self, leaf: &str) -> String {
        self.sub(leaf).0
    }
}
