//! Named parameter tensors grouped by role.
//!
//! Every parameter carries exactly one [`GroupTag`]. The tag decides which
//! training phase may move it: the backbone in phase one, one expert group at a
//! time in phase two, and the gates in phase three.

use std::collections::{BTreeMap, HashMap};
use std::fmt;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ParamId(pub usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum GroupTag {
    Backbone,
    Expert { domain: usize, replica: usize, layer: usize },
    Gate { layer: usize },
}

impl GroupTag {
    pub fn is_backbone(&self) -> bool {
        matches!(self, GroupTag::Backbone)
    }

    pub fn is_expert(&self) -> bool {
        matches!(self, GroupTag::Expert { .. })
    }

    pub fn is_gate(&self) -> bool {
        matches!(self, GroupTag::Gate { .. })
    }

    /// True for any layer of expert `(domain, replica)`.
    pub fn is_expert_of(&self, domain: usize, replica: usize) -> bool {
        matches!(self, GroupTag::Expert { domain: d, replica: k, .. } if *d == domain && *k == replica)
    }
}

impl fmt::Display for GroupTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            GroupTag::Backbone => write!(f, "backbone"),
            GroupTag::Expert { domain, replica, layer } => {
                write!(f, "expert(d={domain},k={replica},layer={layer})")
            }
            GroupTag::Gate { layer } => write!(f, "gate(layer={layer})"),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub name: String,
    pub tag: GroupTag,
    pub trainable: bool,
    pub value: Tensor,
}

/// One row of [`ParamStore::groups`].
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ParamListing {
    pub name: String,
    pub tag: GroupTag,
    pub trainable: bool,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    params: Vec<Param>,
    index: HashMap<String, ParamId>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers a parameter. New parameters start trainable.
    pub fn add(&mut self, name: impl Into<String>, tag: GroupTag, value: Tensor) -> Result<ParamId> {
        let name = name.into();
        if !value.is_finite() {
            return Err(Error::NonFinite { what: format!("initial value of {name}") });
        }
        if self.index.contains_key(&name) {
            return Err(Error::Invalid(format!("duplicate parameter name {name}")));
        }
        let id = ParamId(self.params.len());
        self.index.insert(name.clone(), id);
        self.params.push(Param { name, tag, trainable: true, value });
        Ok(id)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Param {
        &self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.params[id.0].value
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied()
    }

    pub fn by_name(&self, name: &str) -> Option<&Param> {
        self.id(name).map(|id| self.get(id))
    }

    pub fn is_trainable(&self, id: ParamId) -> bool {
        self.params[id.0].trainable
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    /// Marks exactly the parameters whose tag satisfies `select` as trainable.
    pub fn set_trainable(&mut self, select: impl Fn(&GroupTag) -> bool) {
        for p in &mut self.params {
            p.trainable = select(&p.tag);
        }
    }

    pub fn set_trainable_id(&mut self, id: ParamId, trainable: bool) {
        self.params[id.0].trainable = trainable;
    }

    pub fn trainable_count(&self) -> usize {
        self.params.iter().filter(|p| p.trainable).count()
    }

    /// Total number of scalar values.
    pub fn scalar_count(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }

    pub fn groups(&self) -> Vec<ParamListing> {
        self.params
            .iter()
            .map(|p| ParamListing { name: p.name.clone(), tag: p.tag, trainable: p.trainable })
            .collect()
    }

    /// Distinct tags in first-registration order.
    pub fn tags(&self) -> Vec<GroupTag> {
        let mut seen = Vec::new();
        for p in &self.params {
            if !seen.contains(&p.tag) {
                seen.push(p.tag);
            }
        }
        seen
    }

    /// SHA-256 over the names and little-endian value bytes of every parameter
    /// in each group, keyed by the group's display label.
    pub fn group_checksums(&self) -> BTreeMap<String, String> {
        let mut hashers: BTreeMap<String, Sha256> = BTreeMap::new();
        for p in &self.params {
            let h = hashers.entry(p.tag.to_string()).or_default();
            h.update(p.name.as_bytes());
            h.update(p.value.to_le_bytes());
        }
        hashers.into_iter().map(|(k, h)| (k, hex(&h.finalize()))).collect()
    }

    /// Copies values of parameters matching `select`.
    pub fn snapshot(&self, select: impl Fn(&Param) -> bool) -> Vec<(ParamId, Tensor)> {
        self.iter().filter(|(_, p)| select(p)).map(|(id, p)| (id, p.value.clone())).collect()
    }

    pub fn restore(&mut self, snapshot: &[(ParamId, Tensor)]) {
        for (id, t) in snapshot {
            self.params[id.0].value = t.clone();
        }
    }
}

pub(crate) fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}
