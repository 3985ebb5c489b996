//! Parameter registry: ordered, named variables with deterministic initialization.
//!
//! Every layer registers its tensors here under a dotted path
//! (e.g. `rgb_encoder.layer1.0.conv1.weight`). The registry is the single
//! source of truth for checkpointing, freeze-group selection and parameter
//! counting. Initial values are drawn from a seeded ChaCha stream in
//! registration order, so a given seed always produces the same model.

use std::cell::RefCell;
use std::collections::HashMap;
use std::rc::Rc;

use candle_core::{DType, Device, Tensor, Var};
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// Initialization scheme for a trainable tensor.
#[derive(Debug, Clone, Copy)]
pub enum Init {
    /// Normal with std = sqrt(2 / fan_in): the documented scheme for
    /// convolution and linear weights.
    ScaledNormal { fan_in: usize },
    /// Constant fill (biases 0, norm scales 1, norm shifts 0).
    Const(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamKind {
    Trainable,
    /// Non-trained state such as batch-norm running statistics. Saved in
    /// checkpoints, never touched by the optimizer.
    Buffer,
}

struct StoreInner {
    device: Device,
    dtype: DType,
    names: Vec<String>,
    vars: Vec<Var>,
    kinds: Vec<ParamKind>,
    index: HashMap<String, usize>,
    rng: ChaCha8Rng,
}

impl StoreInner {
    fn sample_normal(&mut self, n: usize, std: f64) -> Vec<f64> {
        // Box-Muller on the ChaCha stream; consumption order is the
        // registration order, which is deterministic.
        let mut out = Vec::with_capacity(n);
        while out.len() < n {
            let u1 = (self.rng.next_u64() >> 11) as f64 / (1u64 << 53) as f64;
            let u2 = (self.rng.next_u64() >> 11) as f64 / (1u64 << 53) as f64;
            let r = (-2.0 * (1.0 - u1).max(f64::MIN_POSITIVE).ln()).sqrt();
            let theta = 2.0 * std::f64::consts::PI * u2;
            out.push(r * theta.cos() * std);
            if out.len() < n {
                out.push(r * theta.sin() * std);
            }
        }
        out
    }
}

/// Shared parameter store plus a dotted-path prefix.
#[derive(Clone)]
pub struct ParamStore {
    inner: Rc<RefCell<StoreInner>>,
    prefix: String,
}

impl ParamStore {
    pub fn new(device: Device, dtype: DType, seed: u64) -> Self {
        let inner = StoreInner {
            device,
            dtype,
            names: Vec::new(),
            vars: Vec::new(),
            kinds: Vec::new(),
            index: HashMap::new(),
            rng: ChaCha8Rng::seed_from_u64(seed),
        };
        ParamStore {
            inner: Rc::new(RefCell::new(inner)),
            prefix: String::new(),
        }
    }

    /// Sub-scope: `store.sub("fusion").sub("stage1")` prefixes names with
    /// `fusion.stage1.`.
    pub fn sub(&self, name: &str) -> Self {
        let prefix = if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{}", self.prefix, name)
        };
        ParamStore {
            inner: Rc::clone(&self.inner),
            prefix,
        }
    }

    pub fn device(&self) -> Device {
        self.inner.borrow().device.clone()
    }

    pub fn dtype(&self) -> DType {
        self.inner.borrow().dtype
    }

    fn full_name(&self, name: &str) -> String {
        if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{}", self.prefix, name)
        }
    }

    fn register(&self, name: &str, values: Vec<f64>, shape: &[usize], kind: ParamKind) -> Result<Var> {
        let full = self.full_name(name);
        let mut inner = self.inner.borrow_mut();
        if inner.index.contains_key(&full) {
            return Err(Error::Config(format!("duplicate parameter name '{full}'")));
        }
        let t = Tensor::from_vec(values, shape, &inner.device)?.to_dtype(inner.dtype)?;
        let var = Var::from_tensor(&t)?;
        let idx = inner.names.len();
        inner.names.push(full.clone());
        inner.vars.push(var.clone());
        inner.kinds.push(kind);
        inner.index.insert(full, idx);
        Ok(var)
    }

    pub fn trainable(&self, name: &str, shape: &[usize], init: Init) -> Result<Var> {
        let n: usize = shape.iter().product();
        let values = match init {
            Init::ScaledNormal { fan_in } => {
                let std = (2.0 / fan_in.max(1) as f64).sqrt();
                self.inner.borrow_mut().sample_normal(n, std)
            }
            Init::Const(c) => vec![c; n],
        };
        self.register(name, values, shape, ParamKind::Trainable)
    }

    pub fn buffer(&self, name: &str, shape: &[usize], value: f64) -> Result<Var> {
        let n: usize = shape.iter().product();
        self.register(name, vec![value; n], shape, ParamKind::Buffer)
    }

    pub fn get(&self, full_name: &str) -> Option<Var> {
        let inner = self.inner.borrow();
        inner.index.get(full_name).map(|&i| inner.vars[i].clone())
    }

    /// All entries in registration order.
    pub fn named(&self) -> Vec<(String, Var, ParamKind)> {
        let inner = self.inner.borrow();
        inner
            .names
            .iter()
            .cloned()
            .zip(inner.vars.iter().cloned())
            .zip(inner.kinds.iter().copied())
            .map(|((n, v), k)| (n, v, k))
            .collect()
    }

    pub fn trainables(&self) -> Vec<(String, Var)> {
        self.named()
            .into_iter()
            .filter(|(_, _, k)| *k == ParamKind::Trainable)
            .map(|(n, v, _)| (n, v))
            .collect()
    }

    /// Number of scalar elements across trainable tensors.
    pub fn trainable_count(&self) -> usize {
        self.trainables()
            .iter()
            .map(|(_, v)| v.as_tensor().elem_count())
            .sum()
    }

    /// Copy current values of every entry whose name matches `filter`.
    pub fn snapshot<F: Fn(&str) -> bool>(&self, filter: F) -> Result<Vec<(String, Tensor)>> {
        let mut out = Vec::new();
        for (name, var, kind) in self.named() {
            if kind == ParamKind::Trainable && filter(&name) {
                out.push((name, var.as_tensor().copy()?));
            }
        }
        Ok(out)
    }

    /// Overwrite values from a name -> tensor map. With `strict`, every map
    /// entry must match a registered name; otherwise unknown names are
    /// ignored. Shapes must always match.
    pub fn load_values(&self, values: &HashMap<String, Tensor>, strict: bool) -> Result<usize> {
        let inner = self.inner.borrow();
        let mut applied = 0;
        for (name, tensor) in values {
            match inner.index.get(name) {
                Some(&i) => {
                    let var = &inner.vars[i];
                    if var.as_tensor().dims() != tensor.dims() {
                        return Err(Error::Checkpoint(format!(
                            "shape mismatch for '{name}': stored {:?}, expected {:?}",
                            tensor.dims(),
                            var.as_tensor().dims()
                        )));
                    }
                    var.set(&tensor.to_dtype(inner.dtype)?)?;
                    applied += 1;
                }
                None if strict => {
                    return Err(Error::Checkpoint(format!("unknown parameter '{name}'")));
                }
                None => {}
            }
        }
        Ok(applied)
    }
}
