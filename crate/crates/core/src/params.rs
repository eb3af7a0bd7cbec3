//! The meta-parameter set Φ = {θ, ω, φ, ψ} as named tensors.
//!
//! Names are dotted paths whose first segment is the group, so the
//! decomposition into groups is a property of the name alone:
//!
//! | name                    | shape           |
//! |-------------------------|-----------------|
//! | `theta.enc.{l}.w` / `.b`| `[in, out]` / `[1, out]` |
//! | `theta.head.w` / `.b`   | `[feat, 1]` / `[1, 1]`   |
//! | `omega.enc.{l}`         | `[out, out]`    |
//! | `omega.lr.{fast name}`  | shape of that fast weight |
//! | `phi.{net}.{k}.w` / `.b`| loss-network layers |
//! | `psi.enc.{l}.w` / `.b`  | `[out, 2 out]` / `[1, 2 out]` |
//! | `psi.{net}.{k}.w` / `.b`| loss-network FiLM generators |

use std::collections::BTreeMap;
use std::fmt;

use npbml_ad::{Precision, Tape, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ParamGroup {
    Theta,
    Omega,
    Phi,
    Psi,
}

impl ParamGroup {
    pub const ALL: [ParamGroup; 4] = [ParamGroup::Theta, ParamGroup::Omega, ParamGroup::Phi, ParamGroup::Psi];

    pub fn of(name: &str) -> Option<ParamGroup> {
        match name.split('.').next()? {
            "theta" => Some(ParamGroup::Theta),
            "omega" => Some(ParamGroup::Omega),
            "phi" => Some(ParamGroup::Phi),
            "psi" => Some(ParamGroup::Psi),
            _ => None,
        }
    }
}

impl fmt::Display for ParamGroup {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            ParamGroup::Theta => "theta",
            ParamGroup::Omega => "omega",
            ParamGroup::Phi => "phi",
            ParamGroup::Psi => "psi",
        };
        f.write_str(s)
    }
}

pub mod names {
    pub const HEAD_W: &str = "theta.head.w";
    pub const HEAD_B: &str = "theta.head.b";

    pub fn layer_w(l: usize) -> String {
        format!("theta.enc.{l}.w")
    }

    pub fn layer_b(l: usize) -> String {
        format!("theta.enc.{l}.b")
    }

    pub fn warp(l: usize) -> String {
        format!("omega.enc.{l}")
    }

    /// Per-coordinate learning-rate multipliers for one fast weight.
    pub fn lr(fast: &str) -> String {
        format!("omega.lr.{fast}")
    }

    pub fn film_enc_w(l: usize) -> String {
        format!("psi.enc.{l}.w")
    }

    pub fn film_enc_b(l: usize) -> String {
        format!("psi.enc.{l}.b")
    }

    pub fn loss_w(net: &str, k: usize) -> String {
        format!("phi.{net}.{k}.w")
    }

    pub fn loss_b(net: &str, k: usize) -> String {
        format!("phi.{net}.{k}.b")
    }

    pub fn loss_film_w(net: &str, k: usize) -> String {
        format!("psi.{net}.{k}.w")
    }

    pub fn loss_film_b(net: &str, k: usize) -> String {
        format!("psi.{net}.{k}.b")
    }
}

/// Which meta-learned components are switched on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Variant {
    /// Warp layers ω (implicit preconditioning).
    pub warp: bool,
    /// Inductive support-set loss network.
    pub support_loss: bool,
    /// Transductive query-set loss network.
    pub query_loss: bool,
    /// Weight-statistics regularizer network.
    pub regularizer: bool,
    /// FiLM generators ψ in the encoder and in every active loss network.
    pub film: bool,
    /// Per-coordinate learning-rate multipliers (diagonal preconditioner).
    pub metasgd: bool,
}

impl Variant {
    /// Plain MAML: only the initialization is meta-learned.
    pub fn maml() -> Self {
        Self::default()
    }

    pub fn metasgd() -> Self {
        Self {
            metasgd: true,
            ..Self::default()
        }
    }

    pub fn full() -> Self {
        Self {
            warp: true,
            support_loss: true,
            query_loss: true,
            regularizer: true,
            film: true,
            metasgd: false,
        }
    }

    pub fn learned_loss(&self) -> bool {
        self.support_loss || self.query_loss || self.regularizer
    }
}

/// Named meta-parameters.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct MetaParams {
    tensors: BTreeMap<String, Tensor>,
}

impl MetaParams {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) {
        let name = name.into();
        debug_assert!(ParamGroup::of(&name).is_some(), "ungrouped parameter {name}");
        self.tensors.insert(name, value);
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.tensors.get(name).ok_or_else(|| Error::MissingParam(name.to_string()))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        self.tensors.get_mut(name).ok_or_else(|| Error::MissingParam(name.to_string()))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.tensors.contains_key(name)
    }

    pub fn remove(&mut self, name: &str) -> Option<Tensor> {
        self.tensors.remove(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.tensors.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor)> {
        self.tensors.iter_mut()
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

    pub fn numel(&self) -> usize {
        self.tensors.values().map(Tensor::numel).sum()
    }

    pub fn group(&self, group: ParamGroup) -> impl Iterator<Item = (&String, &Tensor)> {
        self.tensors.iter().filter(move |(n, _)| ParamGroup::of(n) == Some(group))
    }

    pub fn to_precision(&self, precision: Precision) -> Self {
        Self {
            tensors: self
                .tensors
                .iter()
                .map(|(k, v)| (k.clone(), v.to_precision(precision)))
                .collect(),
        }
    }

    pub fn into_map(self) -> BTreeMap<String, Tensor> {
        self.tensors
    }

    pub fn from_map(tensors: BTreeMap<String, Tensor>) -> Result<Self> {
        if let Some(bad) = tensors.keys().find(|k| ParamGroup::of(k).is_none()) {
            return Err(Error::Checkpoint(format!("parameter `{bad}` belongs to no group")));
        }
        Ok(Self { tensors })
    }

    /// Largest absolute elementwise difference over the shared names.
    pub fn max_abs_diff(&self, other: &MetaParams) -> f64 {
        self.tensors
            .iter()
            .filter_map(|(k, v)| other.tensors.get(k).map(|o| v.max_abs_diff(o)))
            .fold(0.0, f64::max)
    }

    /// Records every parameter on `tape`: leaves for the names `trainable`
    /// accepts, constants for the rest.
    pub fn bind(&self, tape: &Tape, trainable: impl Fn(&str) -> bool) -> BoundParams {
        BoundParams {
            vars: self
                .tensors
                .iter()
                .map(|(k, v)| {
                    let var = if trainable(k) { tape.leaf(v.clone()) } else { Var::constant(v.clone()) };
                    (k.clone(), var)
                })
                .collect(),
        }
    }

    /// All parameters as constants.
    pub fn constants(&self) -> BoundParams {
        BoundParams {
            vars: self.tensors.iter().map(|(k, v)| (k.clone(), Var::constant(v.clone()))).collect(),
        }
    }
}

/// Meta-parameters attached to one tape.
#[derive(Debug, Clone)]
pub struct BoundParams {
    vars: BTreeMap<String, Var>,
}

impl BoundParams {
    pub fn get(&self, name: &str) -> Result<&Var> {
        self.vars.get(name).ok_or_else(|| Error::MissingParam(name.to_string()))
    }

    pub fn maybe(&self, name: &str) -> Option<&Var> {
        self.vars.get(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.vars.contains_key(name)
    }

    /// Names and variables of the parameters recorded as leaves.
    pub fn leaves(&self) -> Vec<(&str, &Var)> {
        self.vars
            .iter()
            .filter(|(_, v)| v.is_recorded())
            .map(|(k, v)| (k.as_str(), v))
            .collect()
    }

    pub fn precision(&self) -> Precision {
        self.vars.values().next().map(Var::precision).unwrap_or_default()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn groups_follow_the_name_prefix() {
        assert_eq!(ParamGroup::of(&names::layer_w(3)), Some(ParamGroup::Theta));
        assert_eq!(ParamGroup::of(names::HEAD_B), Some(ParamGroup::Theta));
        assert_eq!(ParamGroup::of(&names::warp(0)), Some(ParamGroup::Omega));
        assert_eq!(ParamGroup::of(&names::lr(names::HEAD_W)), Some(ParamGroup::Omega));
        assert_eq!(ParamGroup::of(&names::loss_w("support", 1)), Some(ParamGroup::Phi));
        assert_eq!(ParamGroup::of(&names::film_enc_b(2)), Some(ParamGroup::Psi));
        assert_eq!(ParamGroup::of(&names::loss_film_w("reg", 0)), Some(ParamGroup::Psi));
        assert_eq!(ParamGroup::of("gamma.x"), None);
    }

    #[test]
    fn binding_respects_trainable_mask() {
        let mut p = MetaParams::new();
        p.insert(names::layer_w(0), Tensor::zeros(&[2, 2], Precision::Double));
        p.insert(names::layer_w(1), Tensor::zeros(&[2, 2], Precision::Double));
        let tape = Tape::new();
        let b = p.bind(&tape, |n| n != names::layer_w(0));
        assert!(!b.get(&names::layer_w(0)).unwrap().is_recorded());
        assert!(b.get(&names::layer_w(1)).unwrap().is_recorded());
        assert_eq!(b.leaves().len(), 1);
        assert!(matches!(b.get("theta.nope"), Err(Error::MissingParam(_))));
    }
}
