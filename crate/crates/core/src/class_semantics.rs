//! Class identities, their name embeddings, and the cosine-derived semantic
//! similarity between class names.
//!
//! Embeddings are read from disk. When exporting them from a language
//! model, prompting with `"An image of a {name}"` gives the model the
//! context that the name is a noun; this crate does not check how the
//! vectors were produced.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::fs;
use std::path::Path;

use ndarray::Array2;
use serde::de::{MapAccess, Visitor};
use serde::{Deserialize, Deserializer, Serialize};

use crate::error::{Error, Result};

/// Conventional name of the background class.
pub const BACKGROUND: &str = "bkg";

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ClassEntry {
    pub index: usize,
    pub name: String,
    pub is_background: bool,
}

/// Ordered set of semantic classes. Index 0 is always the background.
///
/// Serializes as the list of names in index order.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<String>", into = "Vec<String>")]
pub struct ClassRegistry {
    entries: Vec<ClassEntry>,
    lookup: HashMap<String, usize>,
}

impl ClassRegistry {
    /// Builds a registry from names in index order; the first name is the
    /// background class.
    pub fn new<S: Into<String>>(names: impl IntoIterator<Item = S>) -> Result<Self> {
        let mut entries = Vec::new();
        let mut lookup = HashMap::new();
        for (index, name) in names.into_iter().enumerate() {
            let name = name.into();
            if name.trim().is_empty() {
                return Err(Error::Invalid(format!("class {index} has an empty name")));
            }
            if lookup.insert(name.clone(), index).is_some() {
                return Err(Error::DuplicateClass(name));
            }
            entries.push(ClassEntry {
                index,
                name,
                is_background: index == 0,
            });
        }
        if entries.is_empty() {
            return Err(Error::Invalid("registry needs a background class".into()));
        }
        Ok(Self { entries, lookup })
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[ClassEntry] {
        &self.entries
    }

    pub fn background(&self) -> &str {
        &self.entries[0].name
    }

    pub fn name(&self, index: usize) -> Option<&str> {
        self.entries.get(index).map(|e| e.name.as_str())
    }

    pub fn index_of(&self, name: &str) -> Result<usize> {
        self.lookup
            .get(name)
            .copied()
            .ok_or_else(|| Error::UnknownClass(name.to_string()))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.lookup.contains_key(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|e| e.name.as_str())
    }

    pub fn foreground(&self) -> impl Iterator<Item = &str> {
        self.names().skip(1)
    }
}

impl TryFrom<Vec<String>> for ClassRegistry {
    type Error = Error;

    fn try_from(names: Vec<String>) -> Result<Self> {
        Self::new(names)
    }
}

impl From<ClassRegistry> for Vec<String> {
    fn from(r: ClassRegistry) -> Self {
        r.entries.into_iter().map(|e| e.name).collect()
    }
}

/// Class-name embeddings of a common dimension, all with nonzero norm.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingTable {
    dimension: usize,
    vectors: BTreeMap<String, Vec<f64>>,
}

impl EmbeddingTable {
    /// Validates the entries; `background` must be among them.
    pub fn new(entries: Vec<(String, Vec<f64>)>, background: &str) -> Result<Self> {
        let dimension = match entries.first() {
            Some((_, v)) => v.len(),
            None => return Err(Error::Invalid("embedding table is empty".into())),
        };
        if dimension == 0 {
            return Err(Error::DimensionMismatch {
                name: entries[0].0.clone(),
                expected: 1,
                found: 0,
            });
        }
        let mut vectors = BTreeMap::new();
        for (name, v) in entries {
            if v.len() != dimension {
                return Err(Error::DimensionMismatch {
                    name,
                    expected: dimension,
                    found: v.len(),
                });
            }
            if v.iter().any(|x| !x.is_finite()) {
                return Err(Error::NonFinite(format!("embedding for `{name}`")));
            }
            if norm(&v) <= 0.0 {
                return Err(Error::ZeroNorm(name));
            }
            if vectors.contains_key(&name) {
                return Err(Error::DuplicateClass(name));
            }
            vectors.insert(name, v);
        }
        if !vectors.contains_key(background) {
            return Err(Error::UnknownClass(format!(
                "{background} (background embedding is required)"
            )));
        }
        Ok(Self { dimension, vectors })
    }

    pub fn dimension(&self) -> usize {
        self.dimension
    }

    pub fn len(&self) -> usize {
        self.vectors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vectors.is_empty()
    }

    pub fn get(&self, name: &str) -> Result<&[f64]> {
        self.vectors
            .get(name)
            .map(Vec::as_slice)
            .ok_or_else(|| Error::UnknownClass(name.to_string()))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &[f64])> {
        self.vectors.iter().map(|(k, v)| (k.as_str(), v.as_slice()))
    }

    /// Writes the table in the same JSON object format that
    /// [`load_embeddings`] reads.
    pub fn save(&self, path: &Path) -> Result<()> {
        let text =
            serde_json::to_string_pretty(&self.vectors).map_err(|e| Error::parse(path, e))?;
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }
}

/// Reads a JSON object mapping class names to equal-length real arrays.
/// The background class is expected under [`BACKGROUND`].
pub fn load_embeddings(path: &Path) -> Result<EmbeddingTable> {
    load_embeddings_with_background(path, BACKGROUND)
}

pub fn load_embeddings_with_background(path: &Path, background: &str) -> Result<EmbeddingTable> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let entries: OrderedEntries = serde_json::from_str(&text).map_err(|e| Error::parse(path, e))?;
    EmbeddingTable::new(entries.0, background)
}

/// JSON object read as a list so that repeated keys are detected rather
/// than silently overwritten.
struct OrderedEntries(Vec<(String, Vec<f64>)>);

impl<'de> Deserialize<'de> for OrderedEntries {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> std::result::Result<Self, D::Error> {
        struct EntriesVisitor;

        impl<'de> Visitor<'de> for EntriesVisitor {
            type Value = OrderedEntries;

            fn expecting(&self, f: &mut fmt::Formatter) -> fmt::Result {
                f.write_str("an object mapping class names to arrays of numbers")
            }

            fn visit_map<A: MapAccess<'de>>(
                self,
                mut map: A,
            ) -> std::result::Result<Self::Value, A::Error> {
                let mut out = Vec::new();
                while let Some((k, v)) = map.next_entry::<String, Vec<f64>>()? {
                    out.push((k, v));
                }
                Ok(OrderedEntries(out))
            }
        }

        deserializer.deserialize_map(EntriesVisitor)
    }
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    (dot / (norm(a) * norm(b))).clamp(-1.0, 1.0)
}

/// `-(1 - cos(ω(a), ω(b)))`, in `[-2, 0]`.
pub fn semantic_similarity(a: &str, b: &str, table: &EmbeddingTable) -> Result<f64> {
    let va = table.get(a)?;
    let vb = table.get(b)?;
    if a == b {
        return Ok(0.0);
    }
    Ok(-(1.0 - cosine(va, vb)))
}

/// All pairwise similarities between registry classes, indexed by registry
/// index.
#[derive(Clone, Debug, PartialEq)]
pub struct SimilarityMatrix {
    registry: ClassRegistry,
    values: Array2<f64>,
}

impl SimilarityMatrix {
    pub fn registry(&self) -> &ClassRegistry {
        &self.registry
    }

    pub fn values(&self) -> &Array2<f64> {
        &self.values
    }

    pub fn get(&self, a: usize, b: usize) -> f64 {
        self.values[[a, b]]
    }

    pub fn by_name(&self, a: &str, b: &str) -> Result<f64> {
        Ok(self.values[[self.registry.index_of(a)?, self.registry.index_of(b)?]])
    }
}

pub fn similarity_matrix(
    registry: &ClassRegistry,
    table: &EmbeddingTable,
) -> Result<SimilarityMatrix> {
    let vectors = registry
        .names()
        .map(|n| table.get(n))
        .collect::<Result<Vec<_>>>()?;
    let n = registry.len();
    let mut values = Array2::zeros((n, n));
    for i in 0..n {
        for j in (i + 1)..n {
            let s = -(1.0 - cosine(vectors[i], vectors[j]));
            values[[i, j]] = s;
            values[[j, i]] = s;
        }
    }
    Ok(SimilarityMatrix {
        registry: registry.clone(),
        values,
    })
}
