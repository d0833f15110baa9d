//! Named parameter storage shared by the backbone and its adapters.

use crate::autodiff::{Gradients, Tape, Tensor, Var};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub name: String,
    pub value: Tensor,
    pub trainable: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    params: Vec<Param>,
}

impl ParamStore {
    pub fn add(&mut self, name: impl Into<String>, value: Tensor, trainable: bool) -> ParamId {
        let name = name.into();
        debug_assert!(self.find(&name).is_none(), "duplicate parameter {name}");
        self.params.push(Param { name, value, trainable });
        ParamId(self.params.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Param {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Param {
        &mut self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].value
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn trainable_ids(&self) -> Vec<ParamId> {
        self.iter().filter(|(_, p)| p.trainable).map(|(id, _)| id).collect()
    }

    /// Removes `ids` and returns the new id of every old id (`None` if removed).
    pub(crate) fn remove(&mut self, ids: &[ParamId]) -> Vec<Option<ParamId>> {
        let mut map = Vec::with_capacity(self.params.len());
        let mut kept = Vec::with_capacity(self.params.len());
        for (i, p) in std::mem::take(&mut self.params).into_iter().enumerate() {
            if ids.contains(&ParamId(i)) {
                map.push(None);
            } else {
                map.push(Some(ParamId(kept.len())));
                kept.push(p);
            }
        }
        self.params = kept;
        map
    }

    /// Scalar counts of (trainable, frozen) entries.
    pub fn counts(&self) -> (usize, usize) {
        self.params.iter().fold((0, 0), |(t, f), p| {
            if p.trainable {
                (t + p.value.len(), f)
            } else {
                (t, f + p.value.len())
            }
        })
    }

    /// Places every parameter on the tape. Only trainable ones track
    /// gradients, and only when `track_grads` is set.
    pub fn bind(&self, tape: &mut Tape, track_grads: bool) -> BoundParams {
        BoundParams {
            vars: self
                .params
                .iter()
                .map(|p| tape.leaf(p.value.clone(), track_grads && p.trainable))
                .collect(),
        }
    }

    /// Binds frozen parameters as constants and trainable ones to `vars`,
    /// given in [`ParamStore::trainable_ids`] order.
    pub fn bind_trainable(&self, tape: &mut Tape, vars: &[Var]) -> Result<BoundParams> {
        let ids = self.trainable_ids();
        if ids.len() != vars.len() {
            return Err(Error::LengthMismatch(ids.len(), vars.len()));
        }
        let mut bound: Vec<Option<Var>> = vec![None; self.params.len()];
        for (id, &v) in ids.iter().zip(vars) {
            bound[id.0] = Some(v);
        }
        let vars = self
            .params
            .iter()
            .zip(bound)
            .map(|(p, v)| v.unwrap_or_else(|| tape.constant(p.value.clone())))
            .collect();
        Ok(BoundParams { vars })
    }
}

/// Tape handles for a [`ParamStore`], indexed by [`ParamId`].
#[derive(Clone, Debug)]
pub struct BoundParams {
    vars: Vec<Var>,
}

impl BoundParams {
    pub fn var(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }

    /// Gradients for every trainable parameter, in store order.
    pub fn collect_grads(&self, store: &ParamStore, grads: &mut Gradients) -> Vec<(ParamId, Tensor)> {
        store
            .trainable_ids()
            .into_iter()
            .filter_map(|id| grads.take(self.vars[id.0]).map(|g| (id, g)))
            .collect()
    }
}
