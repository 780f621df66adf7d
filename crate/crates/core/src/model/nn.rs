//! Named parameters and the convolutional building blocks shared by the
//! backbone, encoders and decoder.

use std::collections::BTreeMap;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::autodiff::{Tape, Var};
use crate::error::{invalid, shape_err, Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Init {
    /// `N(0, 2 / fan_in)`.
    HeNormal { fan_in: usize },
    Const(f64),
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub init: Init,
}

/// Trainable tensors keyed by name. Iteration order is the name order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    tensors: BTreeMap<String, Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Draws every parameter of `specs` from `rng` in spec order.
    pub fn init<R: Rng>(specs: &[ParamSpec], rng: &mut R) -> Self {
        let mut store = Self::new();
        for spec in specs {
            let t = match spec.init {
                Init::HeNormal { fan_in } => {
                    let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("positive std");
                    Tensor::from_fn(&spec.shape, |_| normal.sample(rng))
                }
                Init::Const(v) => Tensor::full(&spec.shape, v),
            };
            store.tensors.insert(spec.name.clone(), t);
        }
        store
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) {
        self.tensors.insert(name.into(), value);
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.tensors.get(name).ok_or_else(|| missing(name))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        self.tensors.get_mut(name).ok_or_else(|| missing(name))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.tensors.iter()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.values().map(Tensor::len).sum()
    }

    /// Same names with every tensor replaced by zeros.
    pub fn zeros_like(&self) -> Self {
        Self {
            tensors: self.tensors.iter().map(|(k, v)| (k.clone(), Tensor::zeros(v.shape()))).collect(),
        }
    }

    /// Checks that the store holds exactly the parameters of `specs`.
    pub fn validate(&self, specs: &[ParamSpec]) -> Result<()> {
        if self.tensors.len() != specs.len() {
            return Err(invalid!("expected {} parameters, found {}", specs.len(), self.tensors.len()));
        }
        for spec in specs {
            let t = self.get(&spec.name)?;
            if t.shape() != spec.shape.as_slice() {
                return Err(shape_err!("parameter `{}` is {:?}, expected {:?}", spec.name, t.shape(), spec.shape));
            }
            if !t.is_finite() {
                return Err(Error::NonFinite(spec.name.clone()));
            }
        }
        Ok(())
    }

    /// Records every tensor as a trainable leaf on `tape`.
    pub fn bind<'t>(&self, tape: &'t Tape) -> Bound<'t> {
        self.bind_with(tape, true)
    }

    /// Records every tensor as a constant; for inference.
    pub fn bind_frozen<'t>(&self, tape: &'t Tape) -> Bound<'t> {
        self.bind_with(tape, false)
    }

    fn bind_with<'t>(&self, tape: &'t Tape, trainable: bool) -> Bound<'t> {
        let vars = self
            .tensors
            .iter()
            .map(|(k, v)| {
                let var = if trainable { tape.param(v.clone()) } else { tape.constant(v.clone()) };
                (k.clone(), var)
            })
            .collect();
        Bound { vars }
    }
}

fn missing(name: &str) -> Error {
    invalid!("no parameter named `{name}`")
}

/// Parameters recorded on one tape.
pub struct Bound<'t> {
    vars: BTreeMap<String, Var<'t>>,
}

impl<'t> Bound<'t> {
    pub fn get(&self, name: &str) -> Result<Var<'t>> {
        self.vars.get(name).copied().ok_or_else(|| missing(name))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Var<'t>)> {
        self.vars.iter()
    }
}

/// "Same"-padded convolution with bias.
#[derive(Clone, Debug)]
pub struct Conv {
    weight: String,
    bias: String,
    pub k: usize,
    pub c_in: usize,
    pub c_out: usize,
}

impl Conv {
    pub fn new(specs: &mut Vec<ParamSpec>, name: &str, k: usize, c_in: usize, c_out: usize) -> Self {
        let weight = format!("{name}.weight");
        let bias = format!("{name}.bias");
        specs.push(ParamSpec {
            name: weight.clone(),
            shape: vec![k, k, c_in, c_out],
            init: Init::HeNormal { fan_in: k * k * c_in },
        });
        specs.push(ParamSpec {
            name: bias.clone(),
            shape: vec![c_out],
            init: Init::Const(0.0),
        });
        Self { weight, bias, k, c_in, c_out }
    }

    pub fn forward<'t>(&self, p: &Bound<'t>, x: Var<'t>) -> Result<Var<'t>> {
        x.conv2d(p.get(&self.weight)?)?.add_bias(p.get(&self.bias)?)
    }
}

/// `relu(conv(relu(conv(x))) + shortcut(x))`; the shortcut is the identity
/// when channel counts agree and a 1×1 convolution otherwise.
#[derive(Clone, Debug)]
pub struct ResBlock {
    conv1: Conv,
    conv2: Conv,
    shortcut: Option<Conv>,
}

impl ResBlock {
    pub fn new(specs: &mut Vec<ParamSpec>, name: &str, c_in: usize, c_out: usize) -> Self {
        let conv1 = Conv::new(specs, &format!("{name}.conv1"), 3, c_in, c_out);
        let conv2 = Conv::new(specs, &format!("{name}.conv2"), 3, c_out, c_out);
        let shortcut = (c_in != c_out).then(|| Conv::new(specs, &format!("{name}.shortcut"), 1, c_in, c_out));
        Self { conv1, conv2, shortcut }
    }

    pub fn forward<'t>(&self, p: &Bound<'t>, x: Var<'t>) -> Result<Var<'t>> {
        let h = self.conv1.forward(p, x)?.relu()?;
        let h = self.conv2.forward(p, h)?;
        let skip = match &self.shortcut {
            Some(conv) => conv.forward(p, x)?,
            None => x,
        };
        h.add(skip)?.relu()
    }
}

/// `conv(relu(conv(x)))`.
#[derive(Clone, Debug)]
pub struct Head {
    conv1: Conv,
    conv2: Conv,
}

impl Head {
    pub fn new(specs: &mut Vec<ParamSpec>, name: &str, c_in: usize, hidden: usize, c_out: usize) -> Self {
        Self {
            conv1: Conv::new(specs, &format!("{name}.conv1"), 3, c_in, hidden),
            conv2: Conv::new(specs, &format!("{name}.conv2"), 3, hidden, c_out),
        }
    }

    pub fn forward<'t>(&self, p: &Bound<'t>, x: Var<'t>) -> Result<Var<'t>> {
        let h = self.conv1.forward(p, x)?.relu()?;
        self.conv2.forward(p, h)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::testutil::{rand_tensor, rng};

    #[test]
    fn init_follows_specs_and_is_seeded() {
        let mut specs = Vec::new();
        Conv::new(&mut specs, "a", 3, 2, 5);
        ResBlock::new(&mut specs, "r", 5, 7);
        let s1 = ParamStore::init(&specs, &mut rng(3));
        let s2 = ParamStore::init(&specs, &mut rng(3));
        assert_eq!(s1, s2);
        s1.validate(&specs).unwrap();
        assert_eq!(s1.get("a.weight").unwrap().shape(), &[3, 3, 2, 5]);
        assert!(s1.get("a.bias").unwrap().data().iter().all(|&v| v == 0.0));
        assert!(s1.get("r.shortcut.weight").is_ok());
        let w = s1.get("a.weight").unwrap();
        let var = w.sum_squares() / w.len() as f64;
        assert!(var > 0.02 && var < 0.3, "{var}");
    }

    #[test]
    fn validate_rejects_wrong_shape() {
        let mut specs = Vec::new();
        Conv::new(&mut specs, "a", 1, 1, 1);
        let mut s = ParamStore::init(&specs, &mut rng(0));
        s.insert("a.bias", Tensor::zeros(&[2]));
        assert!(s.validate(&specs).is_err());
    }

    #[test]
    fn identity_resblock_with_zero_weights_is_relu() {
        let mut specs = Vec::new();
        let block = ResBlock::new(&mut specs, "r", 3, 3);
        let store = ParamStore::init(&specs, &mut rng(0)).zeros_like();
        let tape = Tape::new();
        let p = store.bind(&tape);
        let x = rand_tensor(&mut rng(1), &[4, 4, 3]);
        let y = block.forward(&p, tape.constant(x.clone())).unwrap();
        assert_eq!(*y.value(), x.map(|v| v.max(0.0)));
    }
}
