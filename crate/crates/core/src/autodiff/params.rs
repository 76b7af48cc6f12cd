//! Named parameter storage with group-level freezing.

use std::collections::{BTreeMap, HashMap};
use std::fmt;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Parameter groups of the staged model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Group {
    /// Source embeddings and the bidirectional encoder.
    Encoder,
    /// Target embeddings, attention, decoder cell and output layer.
    Decoder,
    /// Monolingual reference network additions.
    MRef,
    /// Bilingual reference network additions, including its anchors.
    BRef,
    /// Fitted LCC anchors for the monolingual network and their score network.
    Anchors,
}

impl Group {
    pub const ALL: [Group; 5] = [
        Group::Encoder,
        Group::Decoder,
        Group::MRef,
        Group::BRef,
        Group::Anchors,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Group::Encoder => "encoder",
            Group::Decoder => "decoder",
            Group::MRef => "m-ref",
            Group::BRef => "b-ref",
            Group::Anchors => "anchors",
        }
    }
}

impl fmt::Display for Group {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Index of a parameter inside a [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, PartialEq)]
struct Entry {
    name: String,
    group: Group,
    value: Tensor,
}

/// Named tensors, each owned by exactly one [`Group`]. Freezing is per group.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    entries: Vec<Entry>,
    index: HashMap<String, usize>,
    frozen: Vec<Group>,
}

impl PartialEq for ParamStore {
    fn eq(&self, other: &Self) -> bool {
        self.entries == other.entries
    }
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, group: Group, value: Tensor) -> Result<ParamId> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(Error::DuplicateParam(name));
        }
        let id = self.entries.len();
        self.index.insert(name.clone(), id);
        self.entries.push(Entry { name, group, value });
        Ok(ParamId(id))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn id(&self, name: &str) -> Result<ParamId> {
        self.index
            .get(name)
            .map(|&i| ParamId(i))
            .ok_or_else(|| Error::UnknownParam(name.to_string()))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.index.contains_key(name)
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        Ok(self.tensor(self.id(name)?))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        let id = self.id(name)?;
        Ok(self.tensor_mut(id))
    }

    pub fn tensor(&self, id: ParamId) -> &Tensor {
        &self.entries[id.0].value
    }

    pub fn tensor_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.entries[id.0].value
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].name
    }

    pub fn group(&self, id: ParamId) -> Group {
        self.entries[id.0].group
    }

    /// Replaces a parameter value, keeping its shape.
    pub fn set(&mut self, name: &str, value: Tensor) -> Result<()> {
        let slot = self.get_mut(name)?;
        if slot.shape() != value.shape() {
            return Err(Error::shape(
                "set",
                format!("`{name}` is {:?}, got {:?}", slot.shape(), value.shape()),
            ));
        }
        *slot = value;
        Ok(())
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, Group, &Tensor)> + '_ {
        self.entries
            .iter()
            .enumerate()
            .map(|(i, e)| (ParamId(i), e.name.as_str(), e.group, &e.value))
    }

    pub fn group_ids(&self, group: Group) -> impl Iterator<Item = ParamId> + '_ {
        self.iter().filter(move |p| p.2 == group).map(|p| p.0)
    }

    pub fn has_group(&self, group: Group) -> bool {
        self.entries.iter().any(|e| e.group == group)
    }

    pub fn freeze(&mut self, group: Group) {
        if !self.frozen.contains(&group) {
            self.frozen.push(group);
        }
    }

    pub fn unfreeze(&mut self, group: Group) {
        self.frozen.retain(|&g| g != group);
    }

    /// Freezes every group except `trainable`.
    pub fn train_only(&mut self, trainable: &[Group]) {
        self.frozen = Group::ALL
            .iter()
            .copied()
            .filter(|g| !trainable.contains(g))
            .collect();
    }

    pub fn unfreeze_all(&mut self) {
        self.frozen.clear();
    }

    pub fn is_frozen(&self, group: Group) -> bool {
        self.frozen.contains(&group)
    }

    pub fn is_trainable(&self, id: ParamId) -> bool {
        !self.is_frozen(self.group(id))
    }

    pub fn count(&self, group: Group) -> usize {
        self.entries
            .iter()
            .filter(|e| e.group == group)
            .map(|e| e.value.len())
            .sum()
    }

    pub fn total_count(&self) -> usize {
        self.entries.iter().map(|e| e.value.len()).sum()
    }

    /// SHA-256 over names, shapes and little-endian values of one group.
    pub fn group_hash(&self, group: Group) -> String {
        let mut h = Sha256::new();
        for e in self.entries.iter().filter(|e| e.group == group) {
            h.update(e.name.as_bytes());
            h.update([0u8]);
            for &d in e.value.shape() {
                h.update((d as u64).to_le_bytes());
            }
            for &v in e.value.data() {
                h.update(v.to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }

    /// Hashes of every group, keyed by group.
    pub fn group_hashes(&self) -> BTreeMap<Group, String> {
        Group::ALL.iter().map(|&g| (g, self.group_hash(g))).collect()
    }

    /// Removes all parameters of a group.
    pub fn remove_group(&mut self, group: Group) {
        self.entries.retain(|e| e.group != group);
        self.index = self
            .entries
            .iter()
            .enumerate()
            .map(|(i, e)| (e.name.clone(), i))
            .collect();
    }
}

/// Gradients for trainable parameters. Frozen parameters never appear.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct GradRecord {
    grads: BTreeMap<ParamId, Tensor>,
}

impl GradRecord {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, id: ParamId, grad: Tensor) {
        self.grads.insert(id, grad);
    }

    pub fn get(&self, id: ParamId) -> Option<&Tensor> {
        self.grads.get(&id)
    }

    /// Gradient by parameter name; errors if the parameter received none.
    pub fn by_name<'a>(&'a self, params: &ParamStore, name: &str) -> Result<&'a Tensor> {
        let id = params.id(name)?;
        self.grads
            .get(&id)
            .ok_or_else(|| Error::NotInGraph(name.to_string()))
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Tensor)> + '_ {
        self.grads.iter().map(|(&k, v)| (k, v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (ParamId, &mut Tensor)> + '_ {
        self.grads.iter_mut().map(|(&k, v)| (k, v))
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }

    pub fn global_norm(&self) -> f64 {
        self.grads.values().map(Tensor::sq_norm).sum::<f64>().sqrt()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn names_are_unique() {
        let mut p = ParamStore::new();
        p.insert("w", Group::Encoder, Tensor::zeros(&[2])).unwrap();
        assert!(matches!(
            p.insert("w", Group::Decoder, Tensor::zeros(&[2])),
            Err(Error::DuplicateParam(_))
        ));
    }

    #[test]
    fn group_hash_tracks_values() {
        let mut p = ParamStore::new();
        p.insert("a", Group::Encoder, Tensor::vector(vec![1.0, 2.0])).unwrap();
        p.insert("b", Group::Decoder, Tensor::vector(vec![3.0])).unwrap();
        let enc = p.group_hash(Group::Encoder);
        p.get_mut("b").unwrap().data_mut()[0] = 4.0;
        assert_eq!(enc, p.group_hash(Group::Encoder));
        p.get_mut("a").unwrap().data_mut()[0] = 0.5;
        assert_ne!(enc, p.group_hash(Group::Encoder));
    }

    #[test]
    fn counts_per_group() {
        let mut p = ParamStore::new();
        p.insert("m", Group::MRef, Tensor::zeros(&[3, 4])).unwrap();
        assert_eq!(p.count(Group::MRef), 12);
        assert_eq!(p.count(Group::BRef), 0);
        assert_eq!(p.total_count(), 12);
    }

    #[test]
    fn remove_group_reindexes() {
        let mut p = ParamStore::new();
        p.insert("a", Group::MRef, Tensor::zeros(&[1])).unwrap();
        p.insert("b", Group::Decoder, Tensor::zeros(&[2])).unwrap();
        p.remove_group(Group::MRef);
        assert_eq!(p.len(), 1);
        assert_eq!(p.get("b").unwrap().len(), 2);
        assert!(p.get("a").is_err());
    }
}
