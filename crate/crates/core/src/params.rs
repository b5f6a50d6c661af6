//! Named parameter storage and the forward-pass session that binds stored
//! parameters onto a tape.

use crate::error::{shape_err, Result};
use crate::tensor::{BnMode, Gradients, Real, RunningStats, Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamKind {
    /// Updated by the optimizer.
    Trainable,
    /// Persistent state such as batch-norm running statistics.
    Buffer,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamEntry<T> {
    pub name: String,
    pub value: Tensor<T>,
    pub kind: ParamKind,
}

/// Ordered collection of named tensors. Insertion order is the
/// serialization order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore<T> {
    entries: Vec<ParamEntry<T>>,
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        Self { entries: Vec::new() }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<T>, kind: ParamKind) -> ParamId {
        let name = name.into();
        debug_assert!(self.find(&name).is_none(), "duplicate parameter {name}");
        self.entries.push(ParamEntry { name, value, kind });
        ParamId(self.entries.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entry(&self, id: ParamId) -> &ParamEntry<T> {
        &self.entries[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor<T> {
        &self.entries[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.entries[id.0].value
    }

    pub fn entries(&self) -> &[ParamEntry<T>] {
        &self.entries
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.entries.iter().position(|e| e.name == name).map(ParamId)
    }

    /// Trainable ids whose names start with `prefix`.
    pub fn trainable_with_prefix<'a>(&'a self, prefix: &'a str) -> impl Iterator<Item = ParamId> + 'a {
        self.ids().filter(move |&id| {
            let e = self.entry(id);
            e.kind == ParamKind::Trainable && e.name.starts_with(prefix)
        })
    }

    pub fn trainable_scalars(&self) -> usize {
        self.entries
            .iter()
            .filter(|e| e.kind == ParamKind::Trainable)
            .map(|e| e.value.len())
            .sum()
    }

    /// Replaces a value, keeping its shape.
    pub fn set(&mut self, id: ParamId, value: Tensor<T>) -> Result<()> {
        let e = &mut self.entries[id.0];
        if e.value.shape() != value.shape() {
            return Err(shape_err!(
                "parameter {} has shape {:?}, got {:?}",
                e.name,
                e.value.shape(),
                value.shape()
            ));
        }
        e.value = value;
        Ok(())
    }

    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        ParamStore {
            entries: self
                .entries
                .iter()
                .map(|e| ParamEntry {
                    name: e.name.clone(),
                    value: e.value.cast(),
                    kind: e.kind,
                })
                .collect(),
        }
    }
}

/// Whether batch norm uses batch statistics.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Parameters of one conv + batch-norm layer.
#[derive(Clone, Copy, Debug)]
pub struct BnIds {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
}

/// One forward pass: a tape plus lazily bound parameter leaves.
///
/// The store is only read; batch-norm running statistics computed in
/// [`Mode::Train`] are collected and applied afterwards with
/// [`Graph::commit_running_stats`].
pub struct Graph<'s, T> {
    pub tape: Tape<T>,
    store: &'s ParamStore<T>,
    bound: Vec<Option<Var>>,
    mode: Mode,
    track_grads: bool,
    stat_updates: Vec<(BnIds, RunningStats<T>)>,
}

impl<'s, T: Real> Graph<'s, T> {
    pub fn new(store: &'s ParamStore<T>, mode: Mode, track_grads: bool) -> Self {
        Self {
            tape: Tape::new(),
            store,
            bound: vec![None; store.len()],
            mode,
            track_grads,
            stat_updates: Vec::new(),
        }
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.bound[id.0] {
            return v;
        }
        let e = self.store.entry(id);
        let v = self
            .tape
            .leaf(e.value.clone(), self.track_grads && e.kind == ParamKind::Trainable);
        self.bound[id.0] = Some(v);
        v
    }

    /// Uses an existing tape value in place of a stored parameter. Must be
    /// called before the parameter is first bound.
    pub fn bind(&mut self, id: ParamId, var: Var) {
        debug_assert!(self.bound[id.0].is_none(), "parameter bound twice");
        self.bound[id.0] = Some(var);
    }

    pub fn input(&mut self, value: Tensor<T>) -> Var {
        self.tape.constant(value)
    }

    pub fn batch_norm(&mut self, x: Var, ids: BnIds) -> Result<Var> {
        let gamma = self.param(ids.gamma);
        let beta = self.param(ids.beta);
        let mut stats = RunningStats {
            mean: self.store.value(ids.running_mean).data().to_vec(),
            var: self.store.value(ids.running_var).data().to_vec(),
        };
        match self.mode {
            Mode::Train => {
                let y = self.tape.batch_norm(x, gamma, beta, BnMode::Train(&mut stats))?;
                self.stat_updates.push((ids, stats));
                Ok(y)
            }
            Mode::Eval => self.tape.batch_norm(x, gamma, beta, BnMode::Eval(&stats)),
        }
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        self.tape.value(v)
    }

    /// Backward from `root`; returns gradients of every bound trainable
    /// parameter that received one.
    pub fn param_grads(&self, root: Var) -> Result<Vec<(ParamId, Tensor<T>)>> {
        let mut grads: Gradients<T> = self.tape.backward(root)?;
        Ok(self
            .bound
            .iter()
            .enumerate()
            .filter_map(|(i, v)| v.and_then(|v| grads.take(v)).map(|g| (ParamId(i), g)))
            .collect())
    }

    /// Running-statistic updates gathered during a training-mode pass.
    pub fn take_running_stats(&mut self) -> Vec<(BnIds, RunningStats<T>)> {
        std::mem::take(&mut self.stat_updates)
    }

    pub fn commit_running_stats(updates: Vec<(BnIds, RunningStats<T>)>, store: &mut ParamStore<T>) {
        for (ids, stats) in updates {
            let n = stats.mean.len();
            store.value_mut(ids.running_mean).data_mut().copy_from_slice(&stats.mean[..n]);
            store.value_mut(ids.running_var).data_mut().copy_from_slice(&stats.var[..n]);
        }
    }
}
