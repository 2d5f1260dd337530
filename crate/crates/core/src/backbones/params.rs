use std::cell::RefCell;
use std::collections::HashMap;

use candle_core::{DType, Device, Shape, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::{ModelError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Role {
    /// Learnable parameter.
    Param,
    /// Running statistic; never touched by an optimizer.
    Buffer,
}

#[derive(Debug, Clone)]
pub struct Entry {
    pub name: String,
    pub var: Var,
    pub role: Role,
    pub trainable: bool,
}

impl Entry {
    pub fn numel(&self) -> usize {
        self.var.as_tensor().elem_count()
    }
}

/// Every named tensor of a model, in construction order.
///
/// All tensors live in `Var`s so loading and buffer updates can write in
/// place. Layers see trainable parameters through the `Var` (tracked by
/// autograd) and everything else through a detached view of the same
/// storage, so frozen tensors never enter the backward graph.
#[derive(Debug, Default)]
pub struct ParamStore {
    entries: Vec<Entry>,
    index: HashMap<String, usize>,
    aliases: HashMap<String, String>,
}

impl ParamStore {
    pub fn entries(&self) -> &[Entry] {
        &self.entries
    }

    pub fn get(&self, name: &str) -> Option<&Entry> {
        self.index.get(name).map(|&i| &self.entries[i])
    }

    pub fn trainable_vars(&self) -> Vec<(String, Var)> {
        self.entries
            .iter()
            .filter(|e| e.trainable)
            .map(|e| (e.name.clone(), e.var.clone()))
            .collect()
    }

    /// Resolves an alias (a second upstream name for a shared tensor).
    pub fn canonical<'a>(&'a self, name: &'a str) -> &'a str {
        self.aliases.get(name).map(String::as_str).unwrap_or(name)
    }

    pub fn add_alias(&mut self, alias: String, canonical: String) {
        self.aliases.insert(alias, canonical);
    }

    fn insert(&mut self, entry: Entry) -> Result<()> {
        if self.index.contains_key(&entry.name) {
            return Err(ModelError::Internal(format!("tensor {} registered twice", entry.name)));
        }
        self.index.insert(entry.name.clone(), self.entries.len());
        self.entries.push(entry);
        Ok(())
    }

    /// Copies `value` into the named tensor, checking its shape.
    pub fn assign(&self, name: &str, value: &Tensor) -> Result<()> {
        let entry = self
            .get(name)
            .ok_or_else(|| ModelError::Internal(format!("no tensor named {name}")))?;
        let want = entry.var.as_tensor().dims().to_vec();
        if value.dims() != want.as_slice() {
            return Err(ModelError::ShapeMismatch {
                what: name.to_owned(),
                expected: want,
                actual: value.dims().to_vec(),
            });
        }
        let value = value.to_dtype(DType::F32)?.contiguous()?;
        entry.var.set(&value)?;
        Ok(())
    }

    /// Named snapshot of every tensor (deep copies).
    pub fn snapshot(&self) -> Result<Vec<(String, Tensor)>> {
        self.entries
            .iter()
            .map(|e| Ok((e.name.clone(), e.var.as_tensor().copy()?)))
            .collect()
    }
}

/// Initializers. Values come from a ChaCha stream keyed by the tensor name,
/// so a tensor's initial value does not depend on construction order.
#[derive(Debug, Clone, Copy)]
pub enum Init {
    Zeros,
    Ones,
    Normal(f64),
    /// Normal truncated at two standard deviations.
    TruncNormal(f64),
    /// He normal with fan-out, the usual conv init.
    KaimingFanOut,
}

impl Init {
    fn values(self, shape: &Shape, rng: &mut ChaCha8Rng) -> Vec<f32> {
        let n = shape.elem_count();
        match self {
            Init::Zeros => vec![0.0; n],
            Init::Ones => vec![1.0; n],
            Init::Normal(std) => {
                let d = Normal::new(0.0, std).unwrap();
                (0..n).map(|_| d.sample(rng) as f32).collect()
            }
            Init::TruncNormal(std) => {
                let d = Normal::new(0.0, 1.0).unwrap();
                (0..n)
                    .map(|_| loop {
                        let z: f64 = d.sample(rng);
                        if z.abs() <= 2.0 {
                            break (z * std) as f32;
                        }
                    })
                    .collect()
            }
            Init::KaimingFanOut => {
                let dims = shape.dims();
                let fan_out = dims[0] * dims[2..].iter().product::<usize>();
                Init::Normal((2.0 / fan_out.max(1) as f64).sqrt()).values(shape, rng)
            }
        }
    }
}

fn name_stream(seed: u64, name: &str) -> ChaCha8Rng {
    // FNV-1a over the name selects the stream
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in name.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(h);
    rng
}

/// Hands out named tensors under a dotted prefix.
pub struct Builder<'a> {
    store: &'a RefCell<ParamStore>,
    prefix: String,
    trainable: &'a dyn Fn(&str) -> bool,
    seed: u64,
    device: &'a Device,
}

impl<'a> Builder<'a> {
    pub fn new(
        store: &'a RefCell<ParamStore>,
        trainable: &'a dyn Fn(&str) -> bool,
        seed: u64,
        device: &'a Device,
    ) -> Self {
        Self {
            store,
            prefix: String::new(),
            trainable,
            seed,
            device,
        }
    }

    /// Child builder for `<prefix>.<name>`.
    pub fn pp(&self, name: impl std::fmt::Display) -> Builder<'a> {
        let prefix = if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{name}", self.prefix)
        };
        Builder { prefix, ..*self }
    }

    pub fn full_name(&self, name: &str) -> String {
        if self.prefix.is_empty() {
            name.to_owned()
        } else {
            format!("{}.{name}", self.prefix)
        }
    }

    fn create(&self, name: &str, shape: Shape, init: Init, role: Role) -> Result<Var> {
        let full = self.full_name(name);
        let values = init.values(&shape, &mut name_stream(self.seed, &full));
        let var = Var::from_tensor(&Tensor::from_vec(values, shape, self.device)?)?;
        let trainable = role == Role::Param && (self.trainable)(&full);
        self.store.borrow_mut().insert(Entry {
            name: full,
            var: var.clone(),
            role,
            trainable,
        })?;
        Ok(var)
    }

    /// A learnable tensor. Returned tracked when trainable, detached otherwise.
    pub fn param<S: Into<Shape>>(&self, name: &str, shape: S, init: Init) -> Result<Tensor> {
        let var = self.create(name, shape.into(), init, Role::Param)?;
        let full = self.full_name(name);
        let trainable = self.store.borrow().get(&full).map(|e| e.trainable).unwrap_or(false);
        Ok(if trainable {
            var.as_tensor().clone()
        } else {
            var.as_tensor().detach()
        })
    }

    pub fn buffer<S: Into<Shape>>(&self, name: &str, shape: S, init: Init) -> Result<Var> {
        self.create(name, shape.into(), init, Role::Buffer)
    }

    /// Whether tensors created under this prefix would be trainable.
    pub fn is_trainable(&self, name: &str) -> bool {
        (self.trainable)(&self.full_name(name))
    }

    pub fn alias(&self, alias: &str, canonical: &str) {
        self.store.borrow_mut().add_alias(alias.to_owned(), canonical.to_owned());
    }

    pub fn device(&self) -> &Device {
        self.device
    }
}
