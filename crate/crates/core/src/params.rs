//! Named parameter storage shared by the student, the teacher and the optimizer.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::rng::Rng64;
use crate::tensor::{Real, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

/// Coarse grouping used for freezing and for weight-decay decisions.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ParamGroup {
    Audio,
    Video,
    Fusion,
    Encoder,
    Decoder,
}

impl ParamGroup {
    /// Parameters that belong to the pretrained encoder stack.
    pub fn is_encoder_side(self) -> bool {
        !matches!(self, ParamGroup::Decoder)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamStore<T> {
    names: Vec<String>,
    groups: Vec<ParamGroup>,
    tensors: Vec<Tensor<T>>,
    index: HashMap<String, usize>,
}

impl<T: Real> Default for ParamStore<T> {
    fn default() -> Self {
        ParamStore { names: Vec::new(), groups: Vec::new(), tensors: Vec::new(), index: HashMap::new() }
    }
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, group: ParamGroup, t: Tensor<T>) -> ParamId {
        let name = name.into();
        assert!(!self.index.contains_key(&name), "duplicate parameter {name}");
        let id = self.tensors.len();
        self.index.insert(name.clone(), id);
        self.names.push(name);
        self.groups.push(group);
        self.tensors.push(t);
        ParamId(id)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.tensors[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn group(&self, id: ParamId) -> ParamGroup {
        self.groups[id.0]
    }

    pub fn id_of(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).map(|&i| ParamId(i))
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.tensors.len()).map(ParamId)
    }

    pub fn tensors(&self) -> &[Tensor<T>] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor<T>] {
        &mut self.tensors
    }

    pub fn numel(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    /// Same names, order and shapes.
    pub fn same_structure(&self, other: &Self) -> bool {
        self.names == other.names
            && self.tensors.iter().zip(&other.tensors).all(|(a, b)| a.shape() == b.shape())
    }

    pub fn ensure_same_structure(&self, other: &Self) -> Result<()> {
        if self.same_structure(other) {
            Ok(())
        } else {
            Err(Error::Contract("parameter trees differ in structure".into()))
        }
    }

    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        ParamStore {
            names: self.names.clone(),
            groups: self.groups.clone(),
            tensors: self.tensors.iter().map(Tensor::cast).collect(),
            index: self.index.clone(),
        }
    }

    /// A zero-filled store with identical structure (optimizer moments).
    pub fn zeros_like(&self) -> Self {
        ParamStore {
            names: self.names.clone(),
            groups: self.groups.clone(),
            tensors: self.tensors.iter().map(|t| Tensor::zeros(t.shape())).collect(),
            index: self.index.clone(),
        }
    }

    /// Copy every parameter whose name and shape match in `src`; returns the count.
    pub fn load_matching(&mut self, src: &Self) -> Result<usize> {
        let mut n = 0;
        for (i, name) in self.names.iter().enumerate() {
            if let Some(j) = src.index.get(name) {
                let s = &src.tensors[*j];
                if s.shape() != self.tensors[i].shape() {
                    return Err(Error::dim(format!(
                        "parameter {name}: checkpoint shape {:?} vs model {:?}",
                        s.shape(),
                        self.tensors[i].shape()
                    )));
                }
                self.tensors[i] = s.clone();
                n += 1;
            }
        }
        Ok(n)
    }

    pub fn is_finite(&self) -> bool {
        self.tensors.iter().all(Tensor::is_finite)
    }
}

/// Registers parameters under a name prefix with seeded initialization.
pub struct ParamBuilder<'s, T> {
    pub store: &'s mut ParamStore<T>,
    pub rng: &'s mut Rng64,
    prefix: String,
    group: ParamGroup,
}

impl<'s, T: Real> ParamBuilder<'s, T> {
    pub fn new(store: &'s mut ParamStore<T>, rng: &'s mut Rng64, group: ParamGroup) -> Self {
        ParamBuilder { store, rng, prefix: String::new(), group }
    }

    /// Run `f` with an extended name prefix.
    pub fn scoped<R>(&mut self, name: &str, f: impl FnOnce(&mut ParamBuilder<'_, T>) -> R) -> R {
        let prefix = if self.prefix.is_empty() { name.to_string() } else { format!("{}.{name}", self.prefix) };
        let mut inner = ParamBuilder { store: self.store, rng: self.rng, prefix, group: self.group };
        f(&mut inner)
    }

    pub fn with_group<R>(&mut self, group: ParamGroup, f: impl FnOnce(&mut ParamBuilder<'_, T>) -> R) -> R {
        let mut inner = ParamBuilder { store: self.store, rng: self.rng, prefix: self.prefix.clone(), group };
        f(&mut inner)
    }

    fn full_name(&self, name: &str) -> String {
        if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{name}", self.prefix)
        }
    }

    pub fn normal(&mut self, name: &str, shape: &[usize], std: f64) -> ParamId {
        let t = Tensor::randn(shape, std, self.rng);
        self.store.add(self.full_name(name), self.group, t)
    }

    pub fn constant(&mut self, name: &str, shape: &[usize], v: f64) -> ParamId {
        self.store.add(self.full_name(name), self.group, Tensor::full(shape, T::lit(v)))
    }

    /// `[len, dim]` table started at the sine/cosine position code, so nearby
    /// positions begin with similar rows.
    pub fn sinusoid(&mut self, name: &str, len: usize, dim: usize) -> ParamId {
        let t = Tensor::from_fn(&[len, dim], |i| {
            let (p, j) = ((i / dim) as f64, i % dim);
            let freq = 10_000f64.powf(-((j / 2 * 2) as f64) / dim as f64);
            T::lit(if j % 2 == 0 { (p * freq).sin() } else { (p * freq).cos() })
        });
        self.store.add(self.full_name(name), self.group, t)
    }
}
