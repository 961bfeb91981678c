use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type CategoryId = usize;

/// Bijection between contiguous ids and category names.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<String>", into = "Vec<String>")]
pub struct CategoryRegistry {
    names: Vec<String>,
    index: BTreeMap<String, CategoryId>,
}

impl CategoryRegistry {
    pub fn new<S: Into<String>>(names: impl IntoIterator<Item = S>) -> Result<Self> {
        let names: Vec<String> = names.into_iter().map(Into::into).collect();
        let mut index = BTreeMap::new();
        for (i, n) in names.iter().enumerate() {
            if n.trim().is_empty() {
                return Err(Error::Config("category names must be non-empty".into()));
            }
            if index.insert(n.clone(), i).is_some() {
                return Err(Error::Config(format!("duplicate category name {n:?}")));
            }
        }
        Ok(CategoryRegistry { names, index })
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn name(&self, id: CategoryId) -> Option<&str> {
        self.names.get(id).map(String::as_str)
    }

    pub fn id(&self, name: &str) -> Option<CategoryId> {
        self.index.get(name).copied()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }
}

impl TryFrom<Vec<String>> for CategoryRegistry {
    type Error = Error;
    fn try_from(v: Vec<String>) -> Result<Self> {
        CategoryRegistry::new(v)
    }
}

impl From<CategoryRegistry> for Vec<String> {
    fn from(r: CategoryRegistry) -> Self {
        r.names
    }
}
