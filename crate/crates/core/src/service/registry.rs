use std::collections::{BTreeMap, HashMap};

use super::{ServiceDescription, ServiceError};
use crate::message::Address;

/// What a node knows about the services of itself and its descendants.
///
/// Entries under one name are kept in provider-address order; selection
/// walks them round-robin.
#[derive(Debug, Default, Clone)]
pub struct ServiceRegistry {
    entries: BTreeMap<String, Vec<ServiceDescription>>,
    rr_cursor: HashMap<String, usize>,
}

impl ServiceRegistry {
    pub fn new() -> Self {
        Self::default()
    }

    /// Inserts or replaces by (name, provider).
    pub fn upsert(&mut self, desc: ServiceDescription) {
        let list = self.entries.entry(desc.name.clone()).or_default();
        match list.binary_search_by_key(&desc.provider, |d| d.provider) {
            Ok(i) => list[i] = desc,
            Err(i) => list.insert(i, desc),
        }
    }

    /// Replaces the whole content. Round-robin positions survive for names
    /// that are still present.
    pub fn replace_all(&mut self, descs: impl IntoIterator<Item = ServiceDescription>) {
        self.entries.clear();
        for d in descs {
            self.upsert(d);
        }
        let entries = &self.entries;
        self.rr_cursor.retain(|name, cursor| match entries.get(name) {
            Some(list) => {
                *cursor %= list.len();
                true
            }
            None => false,
        });
    }

    /// Drops every description whose provider is in `gone`.
    pub fn remove_providers(&mut self, gone: &[Address]) {
        let all: Vec<ServiceDescription> = self
            .all()
            .into_iter()
            .filter(|d| !gone.contains(&d.provider))
            .collect();
        self.replace_all(all);
    }

    /// Exact, case-sensitive lookup; every provider of `name`.
    pub fn match_service(&self, name: &str) -> Vec<ServiceDescription> {
        self.entries.get(name).cloned().unwrap_or_default()
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    /// Picks the next provider of `name` round-robin.
    pub fn select_provider(&mut self, name: &str) -> Result<ServiceDescription, ServiceError> {
        let list = self
            .entries
            .get(name)
            .filter(|l| !l.is_empty())
            .ok_or_else(|| ServiceError::NoProvider(name.to_string()))?;
        let cursor = self.rr_cursor.entry(name.to_string()).or_insert(0);
        let chosen = list[*cursor % list.len()].clone();
        *cursor = (*cursor + 1) % list.len();
        Ok(chosen)
    }

    pub fn all(&self) -> Vec<ServiceDescription> {
        self.entries.values().flatten().cloned().collect()
    }

    pub fn len(&self) -> usize {
        self.entries.values().map(Vec::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}
