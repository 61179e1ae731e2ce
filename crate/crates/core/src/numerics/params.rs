use rand::Rng;
use rand_distr::{Distribution, Normal};
use sha2::{Digest, Sha256};

use super::{Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Init {
    Normal { std: f64 },
    Zeros,
    Ones,
}

/// Role of a parameter. Only `Weight` receives decoupled weight decay.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamKind {
    Weight,
    Bias,
    NormGain,
    NormBias,
    Token,
}

impl ParamKind {
    pub fn decays(self) -> bool {
        matches!(self, ParamKind::Weight)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamDef {
    pub name: String,
    pub shape: Vec<usize>,
    pub init: Init,
    pub kind: ParamKind,
}

impl ParamDef {
    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }
}

/// Ordered list of parameter declarations; a model is built against one.
#[derive(Clone, Debug, Default)]
pub struct ParamRegistry {
    defs: Vec<ParamDef>,
}

impl ParamRegistry {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn declare(&mut self, name: impl Into<String>, shape: &[usize], init: Init, kind: ParamKind) -> ParamId {
        let name = name.into();
        assert!(self.defs.iter().all(|d| d.name != name), "duplicate parameter {name}");
        self.defs.push(ParamDef { name, shape: shape.to_vec(), init, kind });
        ParamId(self.defs.len() - 1)
    }

    pub fn defs(&self) -> &[ParamDef] {
        &self.defs
    }

    pub fn def(&self, id: ParamId) -> &ParamDef {
        &self.defs[id.0]
    }

    pub fn len(&self) -> usize {
        self.defs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.defs.is_empty()
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.defs.iter().position(|d| d.name == name).map(ParamId)
    }

    /// Total number of scalars, optionally restricted to a name prefix.
    pub fn count(&self, prefix: &str) -> usize {
        self.defs.iter().filter(|d| d.name.starts_with(prefix)).map(ParamDef::numel).sum()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Param<F: Scalar> {
    pub value: Tensor<F>,
    pub grad: Option<Tensor<F>>,
    pub requires_grad: bool,
}

/// Parameter values (and accumulated gradients) for one registry.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamStore<F: Scalar = f32> {
    names: Vec<String>,
    params: Vec<Param<F>>,
}

impl<F: Scalar> ParamStore<F> {
    /// All-zero values, for filling from storage.
    pub fn zeros(registry: &ParamRegistry) -> Self {
        let params = registry
            .defs()
            .iter()
            .map(|def| Param { value: Tensor::zeros(&def.shape), grad: None, requires_grad: true })
            .collect();
        ParamStore { names: registry.defs().iter().map(|d| d.name.clone()).collect(), params }
    }

    /// Draws initial values in declaration order from `rng`.
    pub fn init<R: Rng + ?Sized>(registry: &ParamRegistry, rng: &mut R) -> Self {
        let params = registry
            .defs()
            .iter()
            .map(|def| {
                let value = match def.init {
                    Init::Zeros => Tensor::zeros(&def.shape),
                    Init::Ones => Tensor::ones(&def.shape),
                    Init::Normal { std } => {
                        let normal = Normal::new(0.0, std).expect("valid std");
                        Tensor::from_fn(&def.shape, |_| F::lit(normal.sample(rng)))
                    }
                };
                Param { value, grad: None, requires_grad: true }
            })
            .collect();
        ParamStore { names: registry.defs().iter().map(|d| d.name.clone()).collect(), params }
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn get(&self, id: ParamId) -> &Param<F> {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Param<F> {
        &mut self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor<F> {
        &self.params[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor<F> {
        &mut self.params[id.0].value
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn numel(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    pub fn set_requires_grad(&mut self, flag: bool) {
        for p in &mut self.params {
            p.requires_grad = flag;
        }
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.params {
            p.grad = None;
        }
    }

    /// Adds `grad` into the stored gradient of `id`.
    pub fn accumulate_grad(&mut self, id: ParamId, grad: &Tensor<F>) {
        let p = &mut self.params[id.0];
        assert_eq!(p.value.shape(), grad.shape(), "gradient shape for {}", self.names[id.0]);
        match &mut p.grad {
            Some(g) => {
                for (a, b) in g.data_mut().iter_mut().zip(grad.data()) {
                    *a = *a + *b;
                }
            }
            None => p.grad = Some(grad.clone()),
        }
    }

    pub fn cast<G: Scalar>(&self) -> ParamStore<G> {
        ParamStore {
            names: self.names.clone(),
            params: self
                .params
                .iter()
                .map(|p| Param {
                    value: p.value.cast(),
                    grad: p.grad.as_ref().map(Tensor::cast),
                    requires_grad: p.requires_grad,
                })
                .collect(),
        }
    }

    /// SHA-256 over names, shapes and value bytes; used for frozen-weight checks.
    pub fn digest(&self) -> [u8; 32] {
        let mut h = Sha256::new();
        for (name, p) in self.names.iter().zip(&self.params) {
            h.update(name.as_bytes());
            for d in p.value.shape() {
                h.update((*d as u64).to_le_bytes());
            }
            for x in p.value.data() {
                h.update(x.as_f64().to_le_bytes());
            }
        }
        h.finalize().into()
    }
}
