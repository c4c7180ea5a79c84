//! Incremental task schedules, per-step dataset filtering, image-level weak
//! labels and few-shot subsets.

use std::collections::{BTreeSet, HashSet};
use std::fmt;

use ndarray::{Array2, Array3};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::class_semantics::ClassRegistry;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ProtocolMode {
    /// Step images contain a current class and may contain any other class.
    Overlap,
    /// Step images contain a current class and never a future one.
    Disjoint,
}

impl fmt::Display for ProtocolMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ProtocolMode::Overlap => f.write_str("overlap"),
            ProtocolMode::Disjoint => f.write_str("disjoint"),
        }
    }
}

/// How foreground classes are ordered before being split into tasks.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
#[derive(Default)]
pub enum ClassOrdering {
    #[default]
    Registry,
    Explicit(Vec<String>),
    Seeded(u64),
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskSchedule {
    background: String,
    base: Vec<String>,
    increments: Vec<Vec<String>>,
    mode: ProtocolMode,
    shots: Option<usize>,
    ordering_seed: Option<u64>,
}

impl TaskSchedule {
    pub fn new(
        registry: &ClassRegistry,
        base: Vec<String>,
        increments: Vec<Vec<String>>,
        mode: ProtocolMode,
    ) -> Result<Self> {
        let mut seen = HashSet::new();
        for name in base.iter().chain(increments.iter().flatten()) {
            registry.index_of(name)?;
            if name == registry.background() {
                return Err(Error::Invalid(
                    "the background class cannot be scheduled".into(),
                ));
            }
            if !seen.insert(name.as_str()) {
                return Err(Error::DuplicateClass(name.clone()));
            }
        }
        if base.is_empty() {
            return Err(Error::Invalid(
                "the base task needs at least one class".into(),
            ));
        }
        if increments.iter().any(Vec::is_empty) {
            return Err(Error::Invalid("increments must be nonempty".into()));
        }
        if seen.len() + 1 != registry.len() {
            return Err(Error::Invalid(format!(
                "schedule covers {} of {} foreground classes",
                seen.len(),
                registry.len() - 1
            )));
        }
        Ok(Self {
            background: registry.background().to_string(),
            base,
            increments,
            mode,
            shots: None,
            ordering_seed: None,
        })
    }

    pub fn with_shots(mut self, shots: Option<usize>) -> Self {
        self.shots = shots;
        self
    }

    pub fn mode(&self) -> ProtocolMode {
        self.mode
    }

    pub fn shots(&self) -> Option<usize> {
        self.shots
    }

    pub fn ordering_seed(&self) -> Option<u64> {
        self.ordering_seed
    }

    pub fn base(&self) -> &[String] {
        &self.base
    }

    pub fn increments(&self) -> &[Vec<String>] {
        &self.increments
    }

    pub fn num_tasks(&self) -> usize {
        self.increments.len() + 1
    }

    /// The `N_b-N_t` name of the split, e.g. `15-5`.
    pub fn label(&self) -> String {
        let per_step = self.increments.first().map_or(0, Vec::len);
        format!("{}-{}", self.base.len(), per_step)
    }

    fn check_step(&self, step: usize) -> Result<()> {
        if step >= self.num_tasks() {
            return Err(Error::Invalid(format!(
                "step {step} outside a schedule of {} tasks",
                self.num_tasks()
            )));
        }
        Ok(())
    }

    /// Classes learned at `step` (the base classes at step 0).
    pub fn step_classes(&self, step: usize) -> Result<&[String]> {
        self.check_step(step)?;
        Ok(if step == 0 {
            &self.base
        } else {
            &self.increments[step - 1]
        })
    }

    /// Model channels after `step`: background, base, then increments in order.
    pub fn channels(&self, step: usize) -> Result<Vec<String>> {
        self.check_step(step)?;
        let mut out = vec![self.background.clone()];
        out.extend(self.base.iter().cloned());
        for inc in &self.increments[..step] {
            out.extend(inc.iter().cloned());
        }
        Ok(out)
    }

    /// Classes scheduled strictly after `step`.
    pub fn future_classes(&self, step: usize) -> Result<Vec<String>> {
        self.check_step(step)?;
        Ok(self.increments[step..].iter().flatten().cloned().collect())
    }

    /// Every class added by increments up to and including `step`.
    pub fn incremental_classes(&self, step: usize) -> Result<Vec<String>> {
        self.check_step(step)?;
        Ok(self.increments[..step].iter().flatten().cloned().collect())
    }
}

/// Splits the (possibly permuted) foreground classes into a base task of
/// `n_base` classes followed by increments of `n_per_step` classes.
pub fn build_schedule(
    registry: &ClassRegistry,
    n_base: usize,
    n_per_step: usize,
    mode: ProtocolMode,
    ordering: &ClassOrdering,
) -> Result<TaskSchedule> {
    let order = class_order(registry, ordering)?;
    let n = order.len();
    if n_base == 0 || n_per_step == 0 {
        return Err(Error::Invalid(
            "class counts per task must be positive".into(),
        ));
    }
    if n_base >= n {
        return Err(Error::Invalid(format!(
            "{n_base} base classes leave nothing to learn among {n} classes"
        )));
    }
    if !(n - n_base).is_multiple_of(n_per_step) {
        return Err(Error::Invalid(format!(
            "{} remaining classes do not split into steps of {n_per_step}",
            n - n_base
        )));
    }
    let base = order[..n_base].to_vec();
    let increments = order[n_base..]
        .chunks(n_per_step)
        .map(<[String]>::to_vec)
        .collect();
    let mut schedule = TaskSchedule::new(registry, base, increments, mode)?;
    if let ClassOrdering::Seeded(seed) = ordering {
        schedule.ordering_seed = Some(*seed);
    }
    Ok(schedule)
}

fn class_order(registry: &ClassRegistry, ordering: &ClassOrdering) -> Result<Vec<String>> {
    let mut fg: Vec<String> = registry.foreground().map(str::to_string).collect();
    match ordering {
        ClassOrdering::Registry => {}
        ClassOrdering::Seeded(seed) => fg.shuffle(&mut ChaCha8Rng::seed_from_u64(*seed)),
        ClassOrdering::Explicit(order) => {
            let want: BTreeSet<&str> = fg.iter().map(String::as_str).collect();
            let got: BTreeSet<&str> = order.iter().map(String::as_str).collect();
            if want != got || order.len() != fg.len() {
                return Err(Error::Invalid(
                    "explicit ordering must be a permutation of the foreground classes".into(),
                ));
            }
            fg = order.clone();
        }
    }
    Ok(fg)
}

/// A consecutive block of the class ordering becomes the new classes of a
/// single-step few-shot task; the remaining classes form the base.
pub fn fold_schedule(
    registry: &ClassRegistry,
    ordering: &ClassOrdering,
    n_folds: usize,
    fold: usize,
    mode: ProtocolMode,
    shots: usize,
) -> Result<TaskSchedule> {
    let order = class_order(registry, ordering)?;
    if n_folds < 2 || fold >= n_folds || order.len() % n_folds != 0 {
        return Err(Error::Invalid(format!(
            "cannot take fold {fold} of {n_folds} from {} classes",
            order.len()
        )));
    }
    let size = order.len() / n_folds;
    let new = order[fold * size..(fold + 1) * size].to_vec();
    let base = order
        .iter()
        .enumerate()
        .filter(|(i, _)| *i / size != fold)
        .map(|(_, n)| n.clone())
        .collect();
    Ok(TaskSchedule::new(registry, base, vec![new], mode)?.with_shots(Some(shots)))
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    /// `height × width × channels`, values in `[0, 1]`.
    pub image: Array3<f32>,
    /// Registry class index per pixel.
    pub dense_mask: Array2<usize>,
    /// Image-level labels of the current step.
    pub weak_labels: BTreeSet<String>,
}

impl Sample {
    pub fn new(image: Array3<f32>, dense_mask: Array2<usize>) -> Self {
        Self {
            image,
            dense_mask,
            weak_labels: BTreeSet::new(),
        }
    }

    /// Registry indices with at least one pixel in the mask.
    pub fn present_classes(&self) -> BTreeSet<usize> {
        present_in(&self.dense_mask)
    }
}

fn present_in(mask: &Array2<usize>) -> BTreeSet<usize> {
    mask.iter().copied().collect()
}

fn indices(registry: &ClassRegistry, names: &[String]) -> Result<HashSet<usize>> {
    names.iter().map(|n| registry.index_of(n)).collect()
}

/// Positions in `dataset` of the samples kept at `step`.
pub fn filter_indices(
    dataset: &[Sample],
    schedule: &TaskSchedule,
    registry: &ClassRegistry,
    step: usize,
) -> Result<Vec<usize>> {
    let current = indices(registry, schedule.step_classes(step)?)?;
    let future = indices(registry, &schedule.future_classes(step)?)?;
    // the base step follows overlap semantics in both modes
    let disjoint = step > 0 && schedule.mode() == ProtocolMode::Disjoint;
    Ok(dataset
        .iter()
        .enumerate()
        .filter(|(_, s)| {
            let present = s.present_classes();
            present.iter().any(|c| current.contains(c))
                && !(disjoint && present.iter().any(|c| future.contains(c)))
        })
        .map(|(i, _)| i)
        .collect())
}

/// Samples usable at `step` under the schedule's protocol. The base step
/// keeps samples with a base-class pixel in either mode; later steps keep
/// samples with a current-class pixel, and disjoint mode also drops those
/// showing any future class.
pub fn filter_step(
    dataset: &[Sample],
    schedule: &TaskSchedule,
    registry: &ClassRegistry,
    step: usize,
) -> Result<Vec<Sample>> {
    Ok(filter_indices(dataset, schedule, registry, step)?
        .into_iter()
        .map(|i| dataset[i].clone())
        .collect())
}

/// Current-step classes visible in `dense_mask`; earlier and later classes
/// are discarded.
pub fn weak_labels(
    dense_mask: &Array2<usize>,
    schedule: &TaskSchedule,
    registry: &ClassRegistry,
    step: usize,
) -> Result<BTreeSet<String>> {
    if step == 0 {
        return Err(Error::Invalid(
            "the base step is trained from dense masks".into(),
        ));
    }
    let present = present_in(dense_mask);
    let mut out = BTreeSet::new();
    for name in schedule.step_classes(step)? {
        if present.contains(&registry.index_of(name)?) {
            out.insert(name.clone());
        }
    }
    Ok(out)
}

/// Filters the dataset for `step` and attaches weak labels to each sample.
pub fn prepare_step(
    dataset: &[Sample],
    schedule: &TaskSchedule,
    registry: &ClassRegistry,
    step: usize,
) -> Result<Vec<Sample>> {
    let mut kept = filter_step(dataset, schedule, registry, step)?;
    if step > 0 {
        for s in &mut kept {
            s.weak_labels = weak_labels(&s.dense_mask, schedule, registry, step)?;
        }
    }
    Ok(kept)
}

/// Draws `k` samples per current class, uniformly without replacement from
/// the samples kept at `step` that show the class. Classes are served in
/// schedule order and a drawn sample leaves every other class's pool.
pub fn few_shot_sample(
    dataset: &[Sample],
    schedule: &TaskSchedule,
    registry: &ClassRegistry,
    step: usize,
    k: usize,
    seed: u64,
) -> Result<Vec<Sample>> {
    if k == 0 {
        return Err(Error::Invalid("shots must be positive".into()));
    }
    let eligible = filter_indices(dataset, schedule, registry, step)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut taken = HashSet::new();
    let mut out = Vec::new();
    for name in schedule.step_classes(step)? {
        let class = registry.index_of(name)?;
        let pool: Vec<usize> = eligible
            .iter()
            .copied()
            .filter(|i| !taken.contains(i) && dataset[*i].present_classes().contains(&class))
            .collect();
        if pool.len() < k {
            return Err(Error::Infeasible(format!(
                "class `{name}` has {} eligible samples, {k} requested",
                pool.len()
            )));
        }
        for j in rand::seq::index::sample(&mut rng, pool.len(), k) {
            taken.insert(pool[j]);
            out.push(dataset[pool[j]].clone());
        }
    }
    Ok(out)
}
