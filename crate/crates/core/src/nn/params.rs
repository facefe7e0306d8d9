use rand::Rng;

use crate::autodiff::{Graph, Var};
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamEntry<T> {
    pub name: String,
    pub value: Tensor<T>,
    /// `false` for non-trainable state such as batch-norm running statistics.
    pub trainable: bool,
}

/// Ordered, named storage for every tensor a model owns.
#[derive(Clone, Debug, Default)]
pub struct ParamStore<T> {
    entries: Vec<ParamEntry<T>>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            entries: Vec::new(),
        }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<T>, trainable: bool) -> ParamId {
        self.entries.push(ParamEntry {
            name: name.into(),
            value,
            trainable,
        });
        ParamId(self.entries.len() - 1)
    }

    /// Uniform init in `[-bound, bound]`.
    pub fn add_uniform(
        &mut self,
        name: impl Into<String>,
        shape: &[usize],
        bound: f64,
        rng: &mut impl Rng,
    ) -> ParamId {
        let n = shape.iter().product();
        let data = (0..n)
            .map(|_| T::from_f64(rng.gen_range(-bound..=bound)))
            .collect();
        self.add(name, Tensor::new(shape, data).expect("shape"), true)
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.entries[id.0].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.entries[id.0].value
    }

    pub fn entries(&self) -> &[ParamEntry<T>] {
        &self.entries
    }

    pub fn entries_mut(&mut self) -> &mut [ParamEntry<T>] {
        &mut self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Number of trainable scalars.
    pub fn trainable_count(&self) -> usize {
        self.entries
            .iter()
            .filter(|e| e.trainable)
            .map(|e| e.value.numel())
            .sum()
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.entries.iter().position(|e| e.name == name).map(ParamId)
    }

    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        ParamStore {
            entries: self
                .entries
                .iter()
                .map(|e| ParamEntry {
                    name: e.name.clone(),
                    value: e.value.cast(),
                    trainable: e.trainable,
                })
                .collect(),
        }
    }
}

/// Graph handles for the trainable entries of a [`ParamStore`].
#[derive(Clone, Debug)]
pub struct Bindings {
    vars: Vec<Option<Var>>,
}

impl Bindings {
    pub fn var(&self, id: ParamId) -> Option<Var> {
        self.vars[id.0]
    }

    /// Collect `(param, grad)` pairs after a backward pass.
    pub fn grads<'a, T: Scalar>(
        &'a self,
        graph: &'a Graph<T>,
    ) -> impl Iterator<Item = (ParamId, Option<&'a Tensor<T>>)> + 'a {
        self.vars
            .iter()
            .enumerate()
            .filter_map(move |(i, v)| v.map(|v| (ParamId(i), graph.grad(v))))
    }
}

/// Everything a layer needs during one forward pass.
pub struct Ctx<'a, T: Scalar> {
    pub graph: &'a mut Graph<T>,
    pub store: &'a mut ParamStore<T>,
    pub training: bool,
    bindings: Bindings,
}

impl<'a, T: Scalar> Ctx<'a, T> {
    /// Bind every trainable entry of `store` as a leaf of `graph`.
    pub fn new(
        graph: &'a mut Graph<T>,
        store: &'a mut ParamStore<T>,
        training: bool,
        requires_grad: bool,
    ) -> Self {
        let vars = store
            .entries
            .iter()
            .map(|e| {
                e.trainable
                    .then(|| graph.leaf(e.value.clone(), requires_grad))
            })
            .collect();
        Self {
            graph,
            store,
            training,
            bindings: Bindings { vars },
        }
    }

    pub fn var(&self, id: ParamId) -> Var {
        self.bindings
            .var(id)
            .expect("parameter is not trainable and has no graph binding")
    }

    pub fn into_bindings(self) -> Bindings {
        self.bindings
    }

    pub fn bindings(&self) -> &Bindings {
        &self.bindings
    }
}
