//! Named parameter storage and binding of parameters onto a [`Graph`].

use std::collections::HashMap;

use indexmap::IndexMap;
use rand::Rng;

use super::graph::{Grads, Graph, Var};
use super::norm::BatchStats;
use super::spectral::SpectralState;
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// New power-iteration vectors by weight name.
pub type SpectralUpdates = Vec<(String, Vec<f64>)>;
/// Batch statistics by norm-layer name.
pub type BnUpdates = Vec<(String, BatchStats)>;

/// Momentum applied to the previous running statistic on each batch-norm update.
pub const BN_MOMENTUM: f64 = 0.9;

#[derive(Clone, Debug, PartialEq)]
pub struct Parameter {
    pub value: Tensor,
    /// False for buffers such as running statistics.
    pub trainable: bool,
    /// Present when the weight is spectrally normalized on use.
    pub spectral: Option<SpectralState>,
}

impl Parameter {
    pub fn spectral_normalized(&self) -> bool {
        self.spectral.is_some()
    }
}

/// Ordered map from unique names to parameters.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamSet {
    items: IndexMap<String, Parameter>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, param: Parameter) -> Result<()> {
        let name = name.into();
        if self.items.contains_key(&name) {
            return Err(Error::invalid(format!("duplicate parameter name {name}")));
        }
        self.items.insert(name, param);
        Ok(())
    }

    pub fn add_weight(&mut self, name: impl Into<String>, value: Tensor) -> Result<()> {
        self.insert(
            name,
            Parameter {
                value,
                trainable: true,
                spectral: None,
            },
        )
    }

    pub fn add_spectral_weight<R: Rng + ?Sized>(
        &mut self,
        name: impl Into<String>,
        value: Tensor,
        rng: &mut R,
    ) -> Result<()> {
        let spectral = Some(SpectralState::new(value.shape(), rng));
        self.insert(
            name,
            Parameter {
                value,
                trainable: true,
                spectral,
            },
        )
    }

    pub fn add_buffer(&mut self, name: impl Into<String>, value: Tensor) -> Result<()> {
        self.insert(
            name,
            Parameter {
                value,
                trainable: false,
                spectral: None,
            },
        )
    }

    pub fn get(&self, name: &str) -> Option<&Parameter> {
        self.items.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Parameter> {
        self.items.get_mut(name)
    }

    pub fn value(&self, name: &str) -> Result<&Tensor> {
        self.items
            .get(name)
            .map(|p| &p.value)
            .ok_or_else(|| Error::invalid(format!("unknown parameter {name}")))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Parameter)> {
        self.items.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Parameter)> {
        self.items.iter_mut()
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    /// Number of trainable scalars.
    pub fn num_trainable(&self) -> usize {
        self.items
            .values()
            .filter(|p| p.trainable)
            .map(|p| p.value.len())
            .sum()
    }

    /// Subset of parameters whose names start with `prefix`.
    pub fn names_with_prefix<'a>(
        &'a self,
        prefix: &'a str,
    ) -> impl Iterator<Item = &'a String> + 'a {
        self.items.keys().filter(move |k| k.starts_with(prefix))
    }

    /// Persists power-iteration vectors produced by a forward pass.
    pub fn apply_spectral_updates(&mut self, updates: Vec<(String, Vec<f64>)>) {
        for (name, u) in updates {
            if let Some(SpectralState { u: slot }) =
                self.items.get_mut(&name).and_then(|p| p.spectral.as_mut())
            {
                *slot = u;
            }
        }
    }

    /// Folds batch statistics into `<prefix>.running_mean` / `<prefix>.running_var`.
    pub fn apply_bn_updates(&mut self, updates: Vec<(String, BatchStats)>) {
        for (prefix, stats) in updates {
            for (suffix, batch) in [("running_mean", &stats.mean), ("running_var", &stats.var)] {
                if let Some(p) = self.items.get_mut(&format!("{prefix}.{suffix}")) {
                    for (r, b) in p.value.data_mut().iter_mut().zip(batch) {
                        *r = BN_MOMENTUM * *r + (1.0 - BN_MOMENTUM) * b;
                    }
                }
            }
        }
    }
}

/// Train mode uses batch statistics and records updates; eval mode uses the stored ones.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Lazily places parameters of one [`ParamSet`] onto a graph.
pub struct Binder<'a> {
    params: &'a ParamSet,
    track: bool,
    vars: HashMap<String, Var>,
    spectral_updates: Vec<(String, Vec<f64>)>,
    bn_updates: Vec<(String, BatchStats)>,
}

impl<'a> Binder<'a> {
    /// With `track` set, trainable parameters become gradient-tracked leaves.
    pub fn new(params: &'a ParamSet, track: bool) -> Self {
        Self {
            params,
            track,
            vars: HashMap::new(),
            spectral_updates: Vec::new(),
            bn_updates: Vec::new(),
        }
    }

    pub fn params(&self) -> &'a ParamSet {
        self.params
    }

    pub fn var(&mut self, g: &mut Graph, name: &str) -> Result<Var> {
        if let Some(&v) = self.vars.get(name) {
            return Ok(v);
        }
        let p = self
            .params
            .get(name)
            .ok_or_else(|| Error::invalid(format!("unknown parameter {name}")))?;
        let v = g.leaf(p.value.clone(), self.track && p.trainable);
        self.vars.insert(name.to_string(), v);
        Ok(v)
    }

    /// The weight as used in the forward pass: spectrally normalized when flagged.
    pub fn weight(&mut self, g: &mut Graph, name: &str) -> Result<Var> {
        let raw = self.var(g, name)?;
        match self.params.get(name).and_then(|p| p.spectral.as_ref()) {
            Some(state) => {
                let (w, u_next) = g.spectral_normalize(raw, &state.u);
                self.spectral_updates.push((name.to_string(), u_next));
                Ok(w)
            }
            None => Ok(raw),
        }
    }

    pub fn buffer(&self, name: &str) -> Result<&'a Tensor> {
        self.params.value(name)
    }

    pub fn record_bn(&mut self, prefix: &str, stats: BatchStats) {
        self.bn_updates.push((prefix.to_string(), stats));
    }

    /// Gradients of every bound trainable parameter, in binding-independent name order.
    pub fn grads(&self, grads: &Grads) -> Vec<(String, Tensor)> {
        let mut out: Vec<(String, Tensor)> = self
            .params
            .iter()
            .filter_map(|(name, _)| {
                let v = self.vars.get(name)?;
                grads.get(*v).map(|t| (name.clone(), t.clone()))
            })
            .collect();
        out.sort_by(|a, b| a.0.cmp(&b.0));
        out
    }

    /// Hands back the side effects of train-mode forwards so the caller can commit them.
    pub fn into_updates(self) -> (SpectralUpdates, BnUpdates) {
        (self.spectral_updates, self.bn_updates)
    }
}
