//! One experiment end to end: base training, incremental steps with
//! optional memory, and evaluation, all driven by an [`ExperimentConfig`].

use crate::class_semantics::{similarity_matrix, ClassRegistry, SimilarityMatrix};
use crate::config::{ExperimentConfig, MemoryKind};
use crate::engine::{base_train, incremental_step, EpochTrace, SegModel, StepState};
use crate::error::{Error, Result};
use crate::evalkit::{evaluate, MetricsReport};
use crate::memory::{ingest_external, populate_episodic, MemoryBank};
use crate::protocol::{prepare_step, Sample, TaskSchedule};

#[derive(Debug)]
pub struct Pipeline {
    pub config: ExperimentConfig,
    pub schedule: TaskSchedule,
    pub similarity: SimilarityMatrix,
    hash: String,
}

impl Pipeline {
    pub fn new(config: ExperimentConfig) -> Result<Self> {
        config.validate()?;
        let schedule = config.schedule()?;
        let similarity = similarity_matrix(&config.registry, &config.embeddings()?)?;
        let hash = config.hash();
        Ok(Self {
            config,
            schedule,
            similarity,
            hash,
        })
    }

    pub fn registry(&self) -> &ClassRegistry {
        &self.config.registry
    }

    pub fn config_hash(&self) -> &str {
        &self.hash
    }

    /// Trains a fresh model on the base-step samples of `train`.
    pub fn train_base(&self, train: &[Sample]) -> Result<(SegModel, Vec<f64>)> {
        let data = prepare_step(train, &self.schedule, self.registry(), 0)?;
        let cfg = &self.config.engine.base;
        let mut model = SegModel::new(
            self.config.engine.arch.clone(),
            self.schedule.channels(0)?,
            cfg.seed,
        )?;
        let trace = base_train(&mut model, &data, self.registry(), cfg)?;
        Ok((model, trace))
    }

    /// Samples seen before `step`, with each mask reduced to what was
    /// annotated at the time: full masks for the base step, only the
    /// image-level classes for later steps.
    pub fn past_samples(&self, train: &[Sample], step: usize) -> Result<Vec<Sample>> {
        let registry = self.registry();
        let mut past = prepare_step(train, &self.schedule, registry, 0)?;
        for s in 1..step {
            for mut sample in prepare_step(train, &self.schedule, registry, s)? {
                let keep = sample
                    .weak_labels
                    .iter()
                    .map(|n| registry.index_of(n))
                    .collect::<Result<Vec<_>>>()?;
                sample
                    .dense_mask
                    .mapv_inplace(|k| if keep.contains(&k) { k } else { 0 });
                past.push(sample);
            }
        }
        Ok(past)
    }

    /// The memory bank used at `step`, if the config asks for one.
    pub fn memory_for(&self, train: &[Sample], step: usize) -> Result<Option<MemoryBank>> {
        let mem = &self.config.memory;
        match mem.kind {
            MemoryKind::None => Ok(None),
            MemoryKind::Episodic => {
                let old = self.schedule.channels(step.saturating_sub(1))?;
                let past = self.past_samples(train, step)?;
                let seed = self
                    .config
                    .engine
                    .incremental
                    .seed
                    .wrapping_add(step as u64);
                populate_episodic(&past, self.registry(), &old[1..], mem.capacity, seed).map(Some)
            }
            MemoryKind::External => {
                let manifest = mem
                    .manifest
                    .as_deref()
                    .ok_or_else(|| Error::Invalid("external memory needs a manifest".into()))?;
                ingest_external(manifest, self.registry()).map(Some)
            }
        }
    }

    /// Runs incremental `step` on top of `previous`.
    pub fn train_step(
        &self,
        previous: &SegModel,
        step: usize,
        train: &[Sample],
        memory: Option<&MemoryBank>,
    ) -> Result<(SegModel, Vec<EpochTrace>)> {
        let expected = self.schedule.channels(step.saturating_sub(1))?;
        if previous.classes() != expected.as_slice() {
            return Err(Error::Invalid(format!(
                "step {step} expects a model over {expected:?}, got {:?}",
                previous.classes()
            )));
        }
        let data = prepare_step(train, &self.schedule, self.registry(), step)?;
        let mut state = StepState::new(
            previous,
            self.schedule.step_classes(step)?,
            step,
            self.config.loss.clone(),
            self.config.engine.incremental.clone(),
        )?;
        let ratio = self.config.memory.ratio;
        let trace = incremental_step(
            &mut state,
            &data,
            memory.map(|m| (m, ratio)),
            &self.similarity,
        )?;
        Ok((state.model, trace))
    }

    pub fn evaluate(
        &self,
        model: &SegModel,
        data: &[Sample],
        step: usize,
    ) -> Result<MetricsReport> {
        evaluate(
            model,
            data,
            self.registry(),
            self.schedule.base(),
            step,
            &self.hash,
        )
    }
}
