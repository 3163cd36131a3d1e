//! Named parameter storage and its binding onto a tape.

use std::cell::RefCell;
use std::collections::{BTreeMap, HashMap};

use crate::tape::{Grads, Tape, Tensor, Var};

/// Rounds every entry to the nearest `f32`, the storage precision of all
/// trainable state.
pub fn round_to_f32(t: &mut Tensor) {
    t.mapv_inplace(|v| v as f32 as f64);
}

/// Ordered map from parameter name to array.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamSet {
    entries: BTreeMap<String, Tensor>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, mut value: Tensor) {
        round_to_f32(&mut value);
        self.entries.insert(name.into(), value);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.entries.get_mut(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor)> {
        self.entries.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn remove(&mut self, name: &str) -> Option<Tensor> {
        self.entries.remove(name)
    }

    /// Total number of scalars.
    pub fn numel(&self) -> usize {
        self.entries.values().map(|t| t.len()).sum()
    }

    /// Copies every entry under `from` to the same name under `to`.
    pub fn copy_prefix(&mut self, from: &str, to: &str) {
        let copies: Vec<(String, Tensor)> = self
            .entries
            .iter()
            .filter_map(|(k, v)| {
                k.strip_prefix(from)
                    .map(|rest| (format!("{to}{rest}"), v.clone()))
            })
            .collect();
        self.entries.extend(copies);
    }

    /// True when every entry is finite.
    pub fn all_finite(&self) -> bool {
        self.entries
            .values()
            .all(|t| t.iter().all(|v| v.is_finite()))
    }

    /// First non-finite entry name, if any.
    pub fn first_non_finite(&self) -> Option<&str> {
        self.entries
            .iter()
            .find(|(_, t)| t.iter().any(|v| !v.is_finite()))
            .map(|(k, _)| k.as_str())
    }
}

/// Which bound parameters receive gradients.
#[derive(Clone, Debug)]
pub enum Trainable {
    All,
    None,
    /// Names starting with any of these prefixes.
    Prefixes(Vec<String>),
}

impl Trainable {
    pub fn allows(&self, name: &str) -> bool {
        match self {
            Trainable::All => true,
            Trainable::None => false,
            Trainable::Prefixes(ps) => ps.iter().any(|p| name.starts_with(p.as_str())),
        }
    }
}

/// Lazily places parameters of a [`ParamSet`] onto a tape.
pub struct Binding<'t, 'p> {
    tape: &'t Tape,
    params: &'p ParamSet,
    trainable: Trainable,
    bound: RefCell<HashMap<String, Var<'t>>>,
}

impl<'t, 'p> Binding<'t, 'p> {
    pub fn new(tape: &'t Tape, params: &'p ParamSet, trainable: Trainable) -> Self {
        Self {
            tape,
            params,
            trainable,
            bound: RefCell::new(HashMap::new()),
        }
    }

    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn params(&self) -> &'p ParamSet {
        self.params
    }

    /// Tape variable for `name`; panics when the parameter does not exist,
    /// which indicates a model/parameter-set mismatch.
    pub fn get(&self, name: &str) -> Var<'t> {
        if let Some(v) = self.bound.borrow().get(name) {
            return *v;
        }
        let value = self
            .params
            .get(name)
            .unwrap_or_else(|| panic!("parameter `{name}` is not in the parameter set"))
            .clone();
        let var = if self.trainable.allows(name) {
            self.tape.var(value)
        } else {
            self.tape.constant(value)
        };
        self.bound.borrow_mut().insert(name.to_string(), var);
        var
    }

    /// Gradients for every trainable parameter that was bound; parameters
    /// bound but unreached get zeros.
    pub fn gradients(&self, grads: &Grads) -> BTreeMap<String, Tensor> {
        self.bound
            .borrow()
            .iter()
            .filter(|(_, v)| v.requires_grad())
            .map(|(k, v)| (k.clone(), grads.get_or_zeros(*v)))
            .collect()
    }
}
