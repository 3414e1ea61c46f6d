use std::collections::HashMap;

use ndarray::{ArrayD, IxDyn};
use rand_chacha::ChaCha8Rng;

use crate::init::Init;
use crate::Element;

/// Stable identifier of a parameter within one [`ParamStore`].
#[derive(Clone, Copy, PartialEq, Eq, Hash, Debug, PartialOrd, Ord)]
pub struct ParamId(pub usize);

pub struct ParamEntry<E: Element> {
    pub name: String,
    pub value: ArrayD<E>,
    pub trainable: bool,
}

/// Owns every named parameter of a model. Iteration order is insertion order,
/// which fixes the optimizer update order and the checkpoint layout.
pub struct ParamStore<E: Element> {
    entries: Vec<ParamEntry<E>>,
    index: HashMap<String, ParamId>,
}

impl<E: Element> Default for ParamStore<E> {
    fn default() -> Self {
        Self::new()
    }
}

impl<E: Element> ParamStore<E> {
    pub fn new() -> Self {
        ParamStore {
            entries: Vec::new(),
            index: HashMap::new(),
        }
    }

    pub fn add(&mut self, name: impl Into<String>, value: ArrayD<E>) -> ParamId {
        let name = name.into();
        assert!(
            !self.index.contains_key(&name),
            "duplicate parameter name {name}"
        );
        let id = ParamId(self.entries.len());
        self.index.insert(name.clone(), id);
        self.entries.push(ParamEntry {
            name,
            value,
            trainable: true,
        });
        id
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied()
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].name
    }

    pub fn value(&self, id: ParamId) -> &ArrayD<E> {
        &self.entries[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut ArrayD<E> {
        &mut self.entries[id.0].value
    }

    pub fn trainable(&self, id: ParamId) -> bool {
        self.entries[id.0].trainable
    }

    pub fn set_trainable(&mut self, id: ParamId, trainable: bool) {
        self.entries[id.0].trainable = trainable;
    }

    /// Marks every parameter whose name starts with `prefix`.
    pub fn set_trainable_prefix(&mut self, prefix: &str, trainable: bool) {
        for e in &mut self.entries {
            if e.name.starts_with(prefix) {
                e.trainable = trainable;
            }
        }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn num_elements(&self) -> usize {
        self.entries.iter().map(|e| e.value.len()).sum()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &ParamEntry<E>)> {
        self.entries
            .iter()
            .enumerate()
            .map(|(i, e)| (ParamId(i), e))
    }

    /// Copies values from every `src_prefix`-named parameter into the
    /// parameter with the same suffix under `dst_prefix`. Panics if a
    /// destination is missing or shaped differently.
    pub fn copy_prefix(&mut self, src_prefix: &str, dst_prefix: &str) {
        let pairs: Vec<(usize, usize)> = self
            .entries
            .iter()
            .enumerate()
            .filter_map(|(i, e)| {
                e.name.strip_prefix(src_prefix).map(|suffix| {
                    let dst_name = format!("{dst_prefix}{suffix}");
                    let dst = self
                        .index
                        .get(&dst_name)
                        .unwrap_or_else(|| panic!("copy_prefix: missing destination {dst_name}"));
                    (i, dst.0)
                })
            })
            .collect();
        for (src, dst) in pairs {
            assert_eq!(
                self.entries[src].value.shape(),
                self.entries[dst].value.shape(),
                "copy_prefix: shape mismatch {} -> {}",
                self.entries[src].name,
                self.entries[dst].name
            );
            let v = self.entries[src].value.clone();
            self.entries[dst].value = v;
        }
    }
}

/// Scoped constructor handed to layer builders: hierarchical names plus the
/// init RNG.
pub struct Builder<'a, E: Element> {
    pub store: &'a mut ParamStore<E>,
    pub rng: &'a mut ChaCha8Rng,
    prefix: String,
}

impl<'a, E: Element> Builder<'a, E> {
    pub fn new(store: &'a mut ParamStore<E>, rng: &'a mut ChaCha8Rng) -> Self {
        Builder {
            store,
            rng,
            prefix: String::new(),
        }
    }

    pub fn scope(&mut self, name: &str) -> Builder<'_, E> {
        let prefix = if self.prefix.is_empty() {
            format!("{name}.")
        } else {
            format!("{}{name}.", self.prefix)
        };
        Builder {
            store: self.store,
            rng: self.rng,
            prefix,
        }
    }

    pub fn path(&self, name: &str) -> String {
        format!("{}{name}", self.prefix)
    }

    pub fn param(&mut self, name: &str, shape: &[usize], init: Init) -> ParamId {
        let value = init.build::<E>(IxDyn(shape), self.rng);
        self.store.add(self.path(name), value)
    }
}
