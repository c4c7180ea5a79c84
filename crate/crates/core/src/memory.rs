//! Replay memory of past-class images: an episodic bank drawn from earlier
//! training data and an external bank ingested from a manifest.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fs;
use std::path::{Path, PathBuf};

use ndarray::Array3;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::class_semantics::ClassRegistry;
use crate::error::{Error, Result};
use crate::pnm;
use crate::protocol::Sample;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MemorySource {
    Episodic,
    External,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MemoryEntry {
    pub image: Array3<f32>,
    /// Image-level labels over previously learned classes.
    pub labels: BTreeSet<String>,
    pub source: MemorySource,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MemoryBank {
    capacity: usize,
    entries: Vec<MemoryEntry>,
}

impl MemoryBank {
    pub fn new(capacity: usize, entries: Vec<MemoryEntry>) -> Result<Self> {
        if entries.len() > capacity {
            return Err(Error::Invalid(format!(
                "{} memory entries exceed capacity {capacity}",
                entries.len()
            )));
        }
        if entries.iter().any(|e| e.labels.is_empty()) {
            return Err(Error::Invalid(
                "memory entries need at least one label".into(),
            ));
        }
        Ok(Self { capacity, entries })
    }

    pub fn empty() -> Self {
        Self {
            capacity: 0,
            entries: Vec::new(),
        }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn entries(&self) -> &[MemoryEntry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Number of entries carrying each label.
    pub fn label_counts(&self) -> BTreeMap<String, usize> {
        let mut counts = BTreeMap::new();
        for e in &self.entries {
            for l in &e.labels {
                *counts.entry(l.clone()).or_default() += 1;
            }
        }
        counts
    }

    /// Writes every image as PPM under `dir`, a `class<TAB>path` manifest
    /// (first label per row) and a JSON sidecar with the full label sets.
    pub fn export(&self, dir: &Path) -> Result<PathBuf> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut manifest = String::new();
        let mut sidecar = BTreeMap::new();
        for (i, e) in self.entries.iter().enumerate() {
            let file = format!("mem_{i:05}.ppm");
            pnm::write_ppm(&dir.join(&file), &pnm::from_unit(&e.image))?;
            let first = e.labels.iter().next().expect("labels are nonempty");
            manifest.push_str(&format!("{first}\t{file}\n"));
            sidecar.insert(file, e.labels.iter().cloned().collect::<Vec<_>>());
        }
        let manifest_path = dir.join("memory.tsv");
        fs::write(&manifest_path, manifest).map_err(|e| Error::io(&manifest_path, e))?;
        let labels_path = dir.join("memory_labels.json");
        let text =
            serde_json::to_string_pretty(&sidecar).map_err(|e| Error::parse(&labels_path, e))?;
        fs::write(&labels_path, text).map_err(|e| Error::io(&labels_path, e))?;
        Ok(manifest_path)
    }
}

/// Splits `capacity` across `classes` as evenly as possible; the first
/// classes receive the remainder.
pub fn balanced_quotas(capacity: usize, classes: usize) -> Vec<usize> {
    if classes == 0 {
        return Vec::new();
    }
    let (q, r) = (capacity / classes, capacity % classes);
    (0..classes).map(|i| q + usize::from(i < r)).collect()
}

/// Class-balanced uniform sampling of past samples. `old_classes` lists
/// the previously learned foreground classes in channel order. A sample is
/// drawn for at most one class; its stored labels are every old class
/// visible in its mask.
pub fn populate_episodic(
    past: &[Sample],
    registry: &ClassRegistry,
    old_classes: &[String],
    capacity: usize,
    seed: u64,
) -> Result<MemoryBank> {
    if past.is_empty() {
        return Err(Error::Invalid("no past samples to remember".into()));
    }
    if capacity == 0 {
        return Err(Error::Invalid("memory capacity must be positive".into()));
    }
    let old_idx = old_classes
        .iter()
        .map(|n| registry.index_of(n))
        .collect::<Result<Vec<_>>>()?;
    let present: Vec<BTreeSet<usize>> = past.iter().map(Sample::present_classes).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut taken = HashSet::new();
    let mut entries = Vec::new();
    for (quota, &class) in balanced_quotas(capacity, old_idx.len())
        .into_iter()
        .zip(&old_idx)
    {
        let pool: Vec<usize> = (0..past.len())
            .filter(|i| !taken.contains(i) && present[*i].contains(&class))
            .collect();
        let n = quota.min(pool.len());
        for j in rand::seq::index::sample(&mut rng, pool.len(), n) {
            let i = pool[j];
            taken.insert(i);
            let labels = old_idx
                .iter()
                .filter(|c| present[i].contains(c))
                .map(|&c| registry.name(c).expect("index from registry").to_string())
                .collect();
            entries.push(MemoryEntry {
                image: past[i].image.clone(),
                labels,
                source: MemorySource::Episodic,
            });
        }
    }
    MemoryBank::new(capacity, entries)
}

/// Reads `class_name<TAB>image_path` rows; relative paths resolve against
/// the manifest's directory. Each row becomes one single-label entry.
pub fn ingest_external(manifest: &Path, registry: &ClassRegistry) -> Result<MemoryBank> {
    let text = fs::read_to_string(manifest).map_err(|e| Error::io(manifest, e))?;
    let root = manifest.parent().unwrap_or(Path::new("."));
    let mut entries = Vec::new();
    for (line_no, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let (class, path) = line.split_once('\t').ok_or_else(|| {
            Error::parse(
                manifest,
                format!("line {}: expected class<TAB>path", line_no + 1),
            )
        })?;
        registry.index_of(class)?;
        if class == registry.background() {
            return Err(Error::Invalid(format!(
                "line {}: background cannot be remembered",
                line_no + 1
            )));
        }
        let image = pnm::to_unit(&pnm::read_ppm(&root.join(path.trim()))?);
        entries.push(MemoryEntry {
            image,
            labels: BTreeSet::from([class.to_string()]),
            source: MemorySource::External,
        });
    }
    MemoryBank::new(entries.len(), entries)
}

/// One training item: either a current-step sample or a memory entry.
#[derive(Clone, Copy, Debug)]
pub enum BatchItem<'a> {
    Current(&'a Sample),
    Memory(&'a MemoryEntry),
}

impl BatchItem<'_> {
    pub fn image(&self) -> &Array3<f32> {
        match self {
            BatchItem::Current(s) => &s.image,
            BatchItem::Memory(m) => &m.image,
        }
    }

    pub fn is_memory(&self) -> bool {
        matches!(self, BatchItem::Memory(_))
    }
}

/// Keeps the first `B - ⌊ratio·B⌋` items of `current` and fills the rest of
/// the batch with distinct entries drawn uniformly from `bank`.
/// Consumes no randomness when no memory slot is requested.
pub fn mix_batch<'a, R: Rng>(
    current: &[BatchItem<'a>],
    bank: &'a MemoryBank,
    ratio: f64,
    rng: &mut R,
) -> Result<Vec<BatchItem<'a>>> {
    if !(0.0..=1.0).contains(&ratio) {
        return Err(Error::Invalid(format!(
            "memory ratio must lie in [0, 1], got {ratio}"
        )));
    }
    let slots = memory_slots(current.len(), ratio);
    if slots == 0 {
        return Ok(current.to_vec());
    }
    if bank.is_empty() {
        return Err(Error::Invalid(
            "memory mixing requested with an empty bank".into(),
        ));
    }
    if bank.len() < slots {
        return Err(Error::Infeasible(format!(
            "{slots} memory slots but only {} entries",
            bank.len()
        )));
    }
    let mut out = current[..current.len() - slots].to_vec();
    out.extend(
        rand::seq::index::sample(rng, bank.len(), slots)
            .into_iter()
            .map(|i| BatchItem::Memory(&bank.entries[i])),
    );
    Ok(out)
}

/// `⌊ratio · batch⌋`.
pub fn memory_slots(batch: usize, ratio: f64) -> usize {
    (ratio * batch as f64).floor() as usize
}
