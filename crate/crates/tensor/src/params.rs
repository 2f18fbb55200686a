use crate::graph::{Gradients, Graph, Var};
use crate::rng;
use crate::tensor::Tensor;
use crate::TensorError;

/// Index of a parameter inside a [`ParamLayout`] / [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(pub usize);

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Init {
    Zeros,
    Ones,
    /// Uniform in `[-bound, bound)`.
    Uniform(f64),
    Normal(f64),
}

#[derive(Clone, Debug)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub init: Init,
    /// Buffers (e.g. running statistics) are stored but never optimized.
    pub trainable: bool,
}

impl ParamSpec {
    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }
}

/// Names, shapes and initializers of a model's parameters, without storage.
///
/// Building a layout is cheap even for very large models, so structural
/// quantities such as parameter counts never need the weights allocated.
#[derive(Clone, Debug, Default)]
pub struct ParamLayout {
    specs: Vec<ParamSpec>,
}

impl ParamLayout {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(
        &mut self,
        name: impl Into<String>,
        shape: impl Into<Vec<usize>>,
        init: Init,
    ) -> ParamId {
        self.push(name.into(), shape.into(), init, true)
    }

    pub fn add_buffer(
        &mut self,
        name: impl Into<String>,
        shape: impl Into<Vec<usize>>,
        init: Init,
    ) -> ParamId {
        self.push(name.into(), shape.into(), init, false)
    }

    fn push(&mut self, name: String, shape: Vec<usize>, init: Init, trainable: bool) -> ParamId {
        debug_assert!(
            self.specs.iter().all(|s| s.name != name),
            "duplicate parameter {name}"
        );
        self.specs.push(ParamSpec {
            name,
            shape,
            init,
            trainable,
        });
        ParamId(self.specs.len() - 1)
    }

    pub fn specs(&self) -> &[ParamSpec] {
        &self.specs
    }

    /// Number of trainable scalars.
    pub fn count(&self) -> usize {
        self.specs
            .iter()
            .filter(|s| s.trainable)
            .map(ParamSpec::numel)
            .sum()
    }

    /// Allocate and initialize. Each tensor draws from a stream derived from
    /// `seed` and its own name, so inits do not shift when parameters are
    /// added elsewhere.
    pub fn materialize(&self, seed: u64) -> ParamStore {
        let values = self
            .specs
            .iter()
            .map(|spec| {
                let mut rng = rng::stream(seed, &spec.name, 0);
                match spec.init {
                    Init::Zeros => Tensor::zeros(spec.shape.clone()),
                    Init::Ones => Tensor::full(spec.shape.clone(), 1.0),
                    Init::Uniform(bound) => Tensor::uniform(spec.shape.clone(), bound, &mut rng),
                    Init::Normal(std) => {
                        Tensor::randn(spec.shape.clone(), &mut rng).map(|v| v * std)
                    }
                }
            })
            .collect();
        ParamStore {
            specs: self.specs.clone(),
            values,
        }
    }
}

/// Named tensor storage for a model's parameters and buffers.
#[derive(Clone, Debug)]
pub struct ParamStore {
    specs: Vec<ParamSpec>,
    values: Vec<Tensor>,
}

impl ParamStore {
    /// Rebuild a store from loaded tensors, checking names and shapes against
    /// the layout.
    pub fn from_tensors(
        layout: &ParamLayout,
        mut tensors: Vec<(String, Tensor)>,
    ) -> Result<Self, TensorError> {
        let mut values = Vec::with_capacity(layout.specs.len());
        for spec in &layout.specs {
            let pos = tensors
                .iter()
                .position(|(name, _)| *name == spec.name)
                .ok_or_else(|| TensorError::UnknownParam(spec.name.clone()))?;
            let (_, t) = tensors.swap_remove(pos);
            if t.shape() != spec.shape.as_slice() {
                return Err(TensorError::Shape {
                    expected: spec.shape.clone(),
                    actual: t.shape().to_vec(),
                });
            }
            values.push(t);
        }
        Ok(Self {
            specs: layout.specs.clone(),
            values,
        })
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.values[id.0]
    }

    pub fn set(&mut self, id: ParamId, value: Tensor) {
        assert_eq!(
            value.shape(),
            self.values[id.0].shape(),
            "set: shape of {}",
            self.specs[id.0].name
        );
        self.values[id.0] = value;
    }

    pub fn spec(&self, id: ParamId) -> &ParamSpec {
        &self.specs[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.specs.iter().position(|s| s.name == name).map(ParamId)
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        (0..self.values.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&ParamSpec, &Tensor)> {
        self.specs.iter().zip(&self.values)
    }

    /// Number of trainable scalars.
    pub fn count(&self) -> usize {
        self.specs
            .iter()
            .filter(|s| s.trainable)
            .map(ParamSpec::numel)
            .sum()
    }

    /// Place every tensor on the graph. Trainable parameters become
    /// gradient-carrying leaves when `trainable` is set; buffers never do.
    pub fn bind(&self, g: &mut Graph, trainable: bool) -> Binding {
        let vars = self
            .specs
            .iter()
            .zip(&self.values)
            .map(|(spec, value)| g.leaf(value.clone(), trainable && spec.trainable))
            .collect();
        Binding { vars }
    }
}

/// Graph handles of a bound [`ParamStore`].
#[derive(Clone, Debug)]
pub struct Binding {
    vars: Vec<Var>,
}

impl Binding {
    /// Handles in store order, e.g. leaves created by a gradient checker.
    pub fn from_vars(vars: Vec<Var>) -> Self {
        Self { vars }
    }

    pub fn var(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }

    /// Gradient per parameter, `None` for buffers and unused parameters.
    pub fn grads(&self, grads: &Gradients) -> Vec<Option<Tensor>> {
        self.vars.iter().map(|&v| grads.get(v).cloned()).collect()
    }
}
