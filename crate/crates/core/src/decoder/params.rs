use std::collections::HashMap;

use rand::Rng;

use super::{DecoderConfig, DecoderError};
use crate::numerics::{Real, Tape, Tensor, Var};

/// Named trainable tensors, in a fixed registration order.
#[derive(Clone, Debug, PartialEq)]
pub struct DecoderParams<T: Real = f32> {
    names: Vec<String>,
    tensors: Vec<Tensor<T>>,
    index: HashMap<String, usize>,
}

/// `(name, shape, init)` for every parameter of a config.
pub(crate) enum Init {
    Ones,
    Zeros,
    Const(f64),
    Normal(f64),
}

fn attention_specs(prefix: &str, c: usize, out: &mut Vec<(String, Vec<usize>, Init)>) {
    let xavier = (1.0 / c as f64).sqrt();
    for w in ["wq", "wk", "wv", "wo"] {
        out.push((format!("{prefix}.{w}"), vec![c, c], Init::Normal(xavier)));
    }
    // no key bias: softmax is invariant to it, so it would never train
    for b in ["bq", "bv", "bo"] {
        out.push((format!("{prefix}.{b}"), vec![c], Init::Zeros));
    }
}

fn norm_specs(prefix: &str, c: usize, out: &mut Vec<(String, Vec<usize>, Init)>) {
    out.push((format!("{prefix}.gain"), vec![c], Init::Ones));
    out.push((format!("{prefix}.bias"), vec![c], Init::Zeros));
}

fn mlp_specs(prefix: &str, c: usize, hidden: usize, out: &mut Vec<(String, Vec<usize>, Init)>) {
    out.push((format!("{prefix}.w1"), vec![c, hidden], Init::Normal((2.0 / (c + hidden) as f64).sqrt())));
    out.push((format!("{prefix}.b1"), vec![hidden], Init::Zeros));
    out.push((format!("{prefix}.w2"), vec![hidden, c], Init::Normal((2.0 / (c + hidden) as f64).sqrt())));
    out.push((format!("{prefix}.b2"), vec![c], Init::Zeros));
}

pub(crate) fn param_specs(cfg: &DecoderConfig) -> Vec<(String, Vec<usize>, Init)> {
    let c = cfg.channels;
    let hidden = c * cfg.mlp_ratio;
    let mut specs = Vec::new();
    for l in 0..cfg.ca_blocks {
        norm_specs(&format!("ca.{l}.ln1"), c, &mut specs);
        attention_specs(&format!("ca.{l}.sa"), c, &mut specs);
        norm_specs(&format!("ca.{l}.ln2"), c, &mut specs);
        attention_specs(&format!("ca.{l}.ca"), c, &mut specs);
        norm_specs(&format!("ca.{l}.ln3"), c, &mut specs);
        mlp_specs(&format!("ca.{l}.mlp"), c, hidden, &mut specs);
    }
    for l in 0..cfg.wsa_blocks {
        norm_specs(&format!("wsa.{l}.ln1"), c, &mut specs);
        attention_specs(&format!("wsa.{l}.attn"), c, &mut specs);
        norm_specs(&format!("wsa.{l}.ln2"), c, &mut specs);
        mlp_specs(&format!("wsa.{l}.mlp"), c, hidden, &mut specs);
    }
    specs.push(("head.w".into(), vec![c, 1], Init::Normal(0.02)));
    specs.push(("head.b".into(), vec![1], Init::Const(f64::from(cfg.head_bias_init))));
    specs.push(("z0".into(), vec![cfg.exemplar_tokens(), c], Init::Normal(0.02)));
    specs
}

impl<T: Real> DecoderParams<T> {
    pub fn init<R: Rng + ?Sized>(cfg: &DecoderConfig, rng: &mut R) -> Self {
        let mut names = Vec::new();
        let mut tensors = Vec::new();
        for (name, shape, init) in param_specs(cfg) {
            let t = match init {
                Init::Ones => Tensor::ones(&shape),
                Init::Zeros => Tensor::zeros(&shape),
                Init::Const(v) => Tensor::full(&shape, T::of(v)),
                Init::Normal(std) => Tensor::randn(&shape, std, rng),
            };
            names.push(name);
            tensors.push(t);
        }
        Self::from_named(names.into_iter().zip(tensors).collect())
    }

    pub fn from_named(entries: Vec<(String, Tensor<T>)>) -> Self {
        let (names, tensors): (Vec<_>, Vec<_>) = entries.into_iter().unzip();
        let index = names.iter().enumerate().map(|(i, n)| (n.clone(), i)).collect();
        Self { names, tensors, index }
    }

    /// Checks names and shapes against a config.
    pub fn check(&self, cfg: &DecoderConfig) -> Result<(), DecoderError> {
        let specs = param_specs(cfg);
        if specs.len() != self.names.len() {
            return Err(DecoderError::Config(format!(
                "expected {} parameters, found {}",
                specs.len(),
                self.names.len()
            )));
        }
        for (name, shape, _) in specs {
            let t = self
                .get(&name)
                .ok_or_else(|| DecoderError::Config(format!("missing parameter {name}")))?;
            if t.shape() != shape.as_slice() {
                return Err(DecoderError::Config(format!(
                    "parameter {name} has shape {:?}, expected {shape:?}",
                    t.shape()
                )));
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor<T>] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor<T>] {
        &mut self.tensors
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.index.get(name).map(|&i| &self.tensors[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.index.get(name).map(|&i| &mut self.tensors[i])
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn numel(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    pub fn cast<U: Real>(&self) -> DecoderParams<U> {
        DecoderParams {
            names: self.names.clone(),
            tensors: self.tensors.iter().map(Tensor::cast).collect(),
            index: self.index.clone(),
        }
    }

    pub fn all_finite(&self) -> bool {
        self.tensors.iter().all(Tensor::is_finite)
    }

    /// Registers every parameter as a differentiable leaf.
    pub fn bind<'p>(&'p self, tape: &mut Tape<T>) -> Bound<'p> {
        let vars = self.tensors.iter().map(|t| tape.param(t.clone())).collect();
        Bound { index: &self.index, vars }
    }

    /// Registers every parameter as a constant (inference).
    pub fn bind_frozen<'p>(&'p self, tape: &mut Tape<T>) -> Bound<'p> {
        let vars = self.tensors.iter().map(|t| tape.constant(t.clone())).collect();
        Bound { index: &self.index, vars }
    }
}

/// Parameters placed on a tape.
pub struct Bound<'p> {
    index: &'p HashMap<String, usize>,
    vars: Vec<Var>,
}

impl<'p> Bound<'p> {
    /// Wraps leaves already on a tape, in `params` order.
    pub fn from_vars<T: Real>(params: &'p DecoderParams<T>, vars: Vec<Var>) -> Self {
        assert_eq!(vars.len(), params.len(), "one var per parameter");
        Self { index: &params.index, vars }
    }

    pub fn var(&self, name: &str) -> Result<Var, DecoderError> {
        self.index
            .get(name)
            .map(|&i| self.vars[i])
            .ok_or_else(|| DecoderError::Config(format!("unknown parameter {name}")))
    }

    /// Vars in registration order.
    pub fn vars(&self) -> &[Var] {
        &self.vars
    }
}
