use std::sync::Arc;

use ndarray::{s, Array2, Array3, ArrayView2};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::model::{
    extend_head, images_to_act, snapshot, EncoderCache, FrozenModel, LocalizerCache, SegModel,
};
use super::nn::Act;
use crate::class_semantics::{ClassRegistry, SimilarityMatrix};
use crate::error::{Error, Result};
use crate::memory::{mix_batch, BatchItem, MemoryBank};
use crate::objectives::{
    cls_loss_grad, fuse_supervision, image_scores, image_scores_backward, kde_loss_grad,
    kdl_loss_grad, pixel_softmax, rasp_loss_grad, seg_active, seg_loss_grad, smooth_pseudo_labels,
    total_loss, ChannelPartition, LossComponents, LossConfig,
};
use crate::protocol::Sample;
use crate::simprior::{argmax_label_map, similarity_maps};
use crate::tensor::ScoreTensor;

/// Optimizer and schedule settings of one training run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    /// Encoder learning rate.
    pub lr: f32,
    /// Multiplier on `lr` for the head and the localizer.
    pub head_lr_scale: f32,
    pub momentum: f32,
    pub epochs: usize,
    /// Batch size; smaller datasets train full-batch.
    pub batch: usize,
    pub seed: u64,
    /// Whether the segmentation loss also updates the encoder.
    pub seg_updates_encoder: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 0.01,
            head_lr_scale: 1.0,
            momentum: 0.9,
            epochs: 40,
            batch: 24,
            seed: 0,
            seg_updates_encoder: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let heads_lr = self.lr * self.head_lr_scale;
        if !(self.lr > 0.0 && heads_lr > 0.0 && heads_lr.is_finite())
            || !(0.0..1.0).contains(&self.momentum)
        {
            return Err(Error::Invalid(
                "learning rate must be > 0 and momentum in [0, 1)".into(),
            ));
        }
        if self.epochs == 0 || self.batch == 0 {
            return Err(Error::Invalid(
                "epochs and batch size must be positive".into(),
            ));
        }
        Ok(())
    }
}

fn to_scores(view: ArrayView2<'_, f32>, h: usize, w: usize) -> Result<ScoreTensor> {
    let c = view.ncols();
    let values = Array3::from_shape_vec((h, w, c), view.iter().map(|&v| f64::from(v)).collect())
        .map_err(|e| Error::Shape(e.to_string()))?;
    ScoreTensor::new(values).map_err(|_| Error::Diverged("non-finite network output".into()))
}

fn add_rows(dst: &mut Array2<f32>, b: usize, grad: &Array3<f64>, scale: f64) {
    let (h, w, c) = grad.dim();
    let mut rows = dst.slice_mut(s![b * h * w..(b + 1) * h * w, ..]);
    for ((r, col, k), &g) in grad.indexed_iter() {
        rows[[r * w + col, k]] += (g * scale) as f32;
    }
    debug_assert_eq!(rows.ncols(), c);
}

/// Mask classes mapped onto model channels at encoder resolution, sampled
/// at cell centres. Classes the model does not know count as background.
pub fn downsample_targets(
    mask: &Array2<usize>,
    registry: &ClassRegistry,
    classes: &[String],
    out: (usize, usize),
) -> Result<Array2<usize>> {
    let mut lookup = vec![0usize; registry.len()];
    for (ch, name) in classes.iter().enumerate() {
        lookup[registry.index_of(name)?] = ch;
    }
    let (mh, mw) = mask.dim();
    let (sy, sx) = (mh / out.0.max(1), mw / out.1.max(1));
    let mut grid = Array2::zeros(out);
    for ((r, c), v) in grid.indexed_iter_mut() {
        let k = mask[[(r * sy + sy / 2).min(mh - 1), (c * sx + sx / 2).min(mw - 1)]];
        *v = *lookup
            .get(k)
            .ok_or_else(|| Error::UnknownClass(format!("mask index {k}")))?;
    }
    Ok(grid)
}

/// Fully supervised training with per-pixel BCE against one-hot masks.
/// Returns the mean training loss of every epoch.
pub fn base_train(
    model: &mut SegModel,
    data: &[Sample],
    registry: &ClassRegistry,
    cfg: &TrainConfig,
) -> Result<Vec<f64>> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::Invalid(
            "base training needs samples with dense masks".into(),
        ));
    }
    for s in data {
        let (h, w, _) = s.image.dim();
        if s.dense_mask.dim() != (h, w) {
            return Err(Error::Shape(format!(
                "mask {:?} for image {:?}",
                s.dense_mask.dim(),
                (h, w)
            )));
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let batch = cfg.batch.min(data.len());
    let channels = model.num_classes();
    let mut trace = Vec::with_capacity(cfg.epochs);
    model.reset_optimizer();
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        let mut batches = 0;
        for chunk in order.chunks(batch) {
            model.zero_grad();
            let x = images_to_act(chunk.iter().map(|&i| &data[i].image))?;
            let (e, enc_cache) = model.encode(&x);
            let (p, head_cache) = model.head.forward(&e);
            let mut dp = Array2::zeros(p.data.raw_dim());
            let mut loss = 0.0;
            let scale = 1.0 / chunk.len() as f64;
            for (b, &i) in chunk.iter().enumerate() {
                let labels =
                    downsample_targets(&data[i].dense_mask, registry, model.classes(), (p.h, p.w))?;
                let target = ScoreTensor::from_fn(p.h, p.w, channels, |(r, c, k)| {
                    f64::from(labels[[r, c]] == k)
                })?;
                let (l, g) = seg_loss_grad(&to_scores(p.image(b), p.h, p.w)?, &target)?;
                loss += l * scale;
                add_rows(&mut dp, b, &g, scale);
            }
            if !loss.is_finite() {
                return Err(Error::Diverged(format!(
                    "base training loss {loss} at epoch {}",
                    epoch + 1
                )));
            }
            let de = model
                .head
                .backward(&head_cache, &dp, true)
                .expect("input grad");
            model.encoder_backward(&enc_cache, de);
            model.sgd_step_split(cfg.lr, cfg.lr * cfg.head_lr_scale, cfg.momentum);
            epoch_loss += loss;
            batches += 1;
        }
        trace.push(epoch_loss / batches as f64);
    }
    model.zero_grad();
    Ok(trace)
}

/// Loss components recorded for one epoch (numbered from 1).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochTrace {
    pub epoch: usize,
    pub cls: f64,
    pub kdl: f64,
    pub kde: f64,
    /// `None` while the segmentation loss is still warming up.
    pub seg: Option<f64>,
    /// `None` when the semantic prior path is disabled.
    pub rasp: Option<f64>,
    pub seg_active: bool,
    pub total: f64,
}

/// Training state of one incremental step.
#[derive(Debug)]
pub struct StepState {
    pub step: usize,
    snapshot: FrozenModel,
    pub model: SegModel,
    pub loss: LossConfig,
    pub train: TrainConfig,
    /// Epochs completed so far.
    pub epoch: usize,
    /// Runs the semantic-prior branch; disabling it gives the plain
    /// weakly supervised pipeline.
    pub rasp_path: bool,
}

impl StepState {
    /// Freezes `previous` as the teacher and extends a copy of it with the
    /// classes of this step.
    pub fn new(
        previous: &SegModel,
        new_classes: &[String],
        step: usize,
        loss: LossConfig,
        train: TrainConfig,
    ) -> Result<Self> {
        if step == 0 {
            return Err(Error::Invalid("incremental steps start at 1".into()));
        }
        loss.validate()?;
        train.validate()?;
        let snapshot = snapshot(previous);
        let init_seed = train.seed ^ (step as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15);
        let model = extend_head(previous, new_classes, init_seed)?;
        Ok(Self {
            step,
            snapshot,
            model,
            loss,
            train,
            epoch: 0,
            rasp_path: true,
        })
    }

    pub fn snapshot(&self) -> &FrozenModel {
        &self.snapshot
    }

    pub fn partition(&self) -> ChannelPartition {
        let previous = self.snapshot.classes().len();
        ChannelPartition {
            previous,
            current: self.model.num_classes() - previous,
        }
    }
}

/// Network outputs of one batch, per item, as `height × width × channels`.
#[derive(Clone, Debug)]
pub struct BatchForward {
    /// Localizer logits over all current channels.
    pub z: Vec<ScoreTensor>,
    /// Main-head logits.
    pub p_hat: Vec<ScoreTensor>,
    /// Previous model's sigmoid scores.
    pub y_old: Vec<ScoreTensor>,
    pub features: Vec<Array3<f64>>,
    pub features_old: Vec<Array3<f64>>,
}

struct BatchCaches {
    x_e: Act,
    enc: EncoderCache,
    loc: LocalizerCache,
    head: super::nn::ConvCache,
    z: Act,
    p: Act,
}

fn act_features(a: &Act, b: usize) -> Array3<f64> {
    let c = a.channels();
    Array3::from_shape_vec(
        (a.h, a.w, c),
        a.image(b).iter().map(|&v| f64::from(v)).collect(),
    )
    .expect("sizes agree")
}

fn run_forward(state: &StepState, x: &Act) -> Result<(BatchForward, BatchCaches)> {
    let (e_old, y_old) = state.snapshot.forward(x);
    let (e, enc) = state.model.encode(x);
    let (z, loc) = state.model.localizer.forward(&e);
    let (p, head) = state.model.head.forward(&e);
    let mut out = BatchForward {
        z: Vec::with_capacity(x.n),
        p_hat: Vec::with_capacity(x.n),
        y_old: Vec::with_capacity(x.n),
        features: Vec::with_capacity(x.n),
        features_old: Vec::with_capacity(x.n),
    };
    for b in 0..x.n {
        out.z.push(to_scores(z.image(b), z.h, z.w)?);
        out.p_hat.push(to_scores(p.image(b), p.h, p.w)?);
        out.y_old.push(to_scores(y_old.image(b), y_old.h, y_old.w)?);
        out.features.push(act_features(&e, b));
        out.features_old.push(act_features(&e_old, b));
    }
    Ok((
        out,
        BatchCaches {
            x_e: e,
            enc,
            loc,
            head,
            z,
            p,
        },
    ))
}

/// Forward pass of the teacher and the current model on `items`, without
/// touching any parameter.
pub fn forward_batch(state: &StepState, items: &[BatchItem<'_>]) -> Result<BatchForward> {
    let x = images_to_act(items.iter().map(|i| i.image()))?;
    run_forward(state, &x).map(|(f, _)| f)
}

/// Gradients of the batch losses with respect to the localizer logits,
/// the main-head logits and the encoder features, per item.
struct BatchGrads {
    dz: Vec<Array3<f64>>,
    dp: Vec<Option<Array3<f64>>>,
    de: Vec<Option<Array3<f64>>>,
}

/// Image-level targets of an item over the channels it is classified on.
fn cls_targets(
    item: &BatchItem<'_>,
    classes: &[String],
    partition: ChannelPartition,
) -> (Vec<usize>, Vec<f64>) {
    match item {
        BatchItem::Current(s) => {
            let channels: Vec<usize> = (partition.previous..partition.total()).collect();
            let labels = channels
                .iter()
                .map(|&k| f64::from(s.weak_labels.contains(&classes[k])))
                .collect();
            (channels, labels)
        }
        BatchItem::Memory(m) => {
            let channels: Vec<usize> = (1..partition.total()).collect();
            let labels = channels
                .iter()
                .map(|&k| f64::from(k < partition.previous && m.labels.contains(&classes[k])))
                .collect();
            (channels, labels)
        }
    }
}

fn batch_objective(
    state: &StepState,
    items: &[BatchItem<'_>],
    fwd: &BatchForward,
    sim: &SimilarityMatrix,
    epoch: usize,
) -> Result<(LossComponents, BatchGrads)> {
    let cfg = &state.loss;
    let partition = state.partition();
    let classes = state.model.classes();
    let old_classes: Arc<[String]> = state.snapshot.classes().into();
    let active = seg_active(cfg, epoch);
    let n_items = items.len() as f64;
    let n_cur = items.iter().filter(|i| !i.is_memory()).count() as f64;

    let mut comps = LossComponents::default();
    let mut grads = BatchGrads {
        dz: Vec::with_capacity(items.len()),
        dp: Vec::with_capacity(items.len()),
        de: Vec::with_capacity(items.len()),
    };
    let mut rasp_items = 0usize;
    let mut rasp_sum = 0.0;
    let mut rasp_grads: Vec<Option<(Vec<usize>, Array3<f64>)>> = Vec::with_capacity(items.len());

    for (b, item) in items.iter().enumerate() {
        let z = &fwd.z[b];
        let (channels, labels) = cls_targets(item, classes, partition);
        let scores = image_scores(z, cfg)?;
        let picked: Vec<f64> = channels.iter().map(|&k| scores[k]).collect();
        let (l, g) = cls_loss_grad(&picked, &labels)?;
        comps.cls += l / n_items;
        let mut d_scores = vec![0.0; scores.len()];
        for (&k, gk) in channels.iter().zip(&g) {
            d_scores[k] = gk / n_items;
        }
        let mut dz = image_scores_backward(z, cfg, &d_scores)?;

        if item.is_memory() {
            grads.dz.push(dz);
            grads.dp.push(None);
            grads.de.push(None);
            rasp_grads.push(None);
            continue;
        }
        let BatchItem::Current(sample) = item else {
            unreachable!()
        };

        let old_ch: Vec<usize> = (0..partition.previous).collect();
        let (l, g) = kdl_loss_grad(&z.select_channels(&old_ch)?, &fwd.y_old[b])?;
        comps.kdl += l / n_cur;
        dz.slice_mut(s![.., .., ..partition.previous])
            .scaled_add(1.0 / n_cur, &g);

        let (l, g) = kde_loss_grad(&fwd.features[b], &fwd.features_old[b], cfg.kde_squared)?;
        comps.kde += l / n_cur;
        grads.de.push(Some(g / n_cur));

        if state.rasp_path {
            let present: Vec<usize> = (partition.previous..partition.total())
                .filter(|&k| sample.weak_labels.contains(&classes[k]))
                .collect();
            if present.is_empty() {
                rasp_grads.push(None);
            } else {
                let names: Vec<&str> = present.iter().map(|&k| classes[k].as_str()).collect();
                let label_map = argmax_label_map(&fwd.y_old[b], old_classes.clone())?;
                let stack = similarity_maps(&label_map, &names, sim, cfg.tau)?;
                let (l, g) = rasp_loss_grad(&z.select_channels(&present)?, &stack)?;
                rasp_sum += l;
                rasp_items += 1;
                rasp_grads.push(Some((present, g)));
            }
        } else {
            rasp_grads.push(None);
        }

        if active {
            let m = ScoreTensor::new(pixel_softmax(z))?;
            let q = smooth_pseudo_labels(&m, cfg.alpha)?;
            let fused = fuse_supervision(&q, &fwd.y_old[b], partition)?;
            let (l, g) = seg_loss_grad(&fwd.p_hat[b], &fused)?;
            comps.seg += l / n_cur;
            grads.dp.push(Some(g / n_cur));
        } else {
            grads.dp.push(None);
        }
        grads.dz.push(dz);
    }

    if rasp_items > 0 {
        comps.rasp = rasp_sum / rasp_items as f64;
        if cfg.lambda_rasp != 0.0 {
            let scale = cfg.lambda_rasp / rasp_items as f64;
            for (dz, rg) in grads.dz.iter_mut().zip(&rasp_grads) {
                if let Some((present, g)) = rg {
                    for (j, &k) in present.iter().enumerate() {
                        dz.slice_mut(s![.., .., k])
                            .scaled_add(scale, &g.slice(s![.., .., j]));
                    }
                }
            }
        }
    }
    Ok((comps, grads))
}

/// Loss components of one batch at `epoch` (0-based), from a forward pass
/// already computed with [`forward_batch`].
pub fn batch_losses(
    state: &StepState,
    items: &[BatchItem<'_>],
    fwd: &BatchForward,
    sim: &SimilarityMatrix,
    epoch: usize,
) -> Result<LossComponents> {
    batch_objective(state, items, fwd, sim, epoch).map(|(c, _)| c)
}

/// Runs forward and backward on one batch, leaving the parameter gradients
/// of the current model in place.
fn accumulate_grads(
    state: &mut StepState,
    items: &[BatchItem<'_>],
    sim: &SimilarityMatrix,
    epoch: usize,
) -> Result<LossComponents> {
    let x = images_to_act(items.iter().map(|i| i.image()))?;
    let (fwd, caches) = run_forward(state, &x)?;
    let (comps, grads) = batch_objective(state, items, &fwd, sim, epoch)?;
    if !comps.is_finite() {
        return Err(Error::Diverged(format!(
            "step {} epoch {}: non-finite losses {comps:?}",
            state.step,
            epoch + 1
        )));
    }

    let model = &mut state.model;
    model.zero_grad();
    let mut dz = Array2::zeros(caches.z.data.raw_dim());
    let mut de = Array2::zeros(caches.x_e.data.raw_dim());
    let mut dp = Array2::zeros(caches.p.data.raw_dim());
    let mut any_seg = false;
    for b in 0..items.len() {
        add_rows(&mut dz, b, &grads.dz[b], 1.0);
        if let Some(g) = &grads.de[b] {
            add_rows(&mut de, b, g, 1.0);
        }
        if let Some(g) = &grads.dp[b] {
            add_rows(&mut dp, b, g, 1.0);
            any_seg = true;
        }
    }
    de += &model.localizer.backward(&caches.loc, &dz);
    if any_seg {
        let through = state.train.seg_updates_encoder;
        if let Some(d) = model.head.backward(&caches.head, &dp, through) {
            de += &d;
        }
    }
    model.encoder_backward(&caches.enc, de);
    Ok(comps)
}

fn train_batch(
    state: &mut StepState,
    items: &[BatchItem<'_>],
    sim: &SimilarityMatrix,
    epoch: usize,
) -> Result<LossComponents> {
    let comps = accumulate_grads(state, items, sim, epoch)?;
    let t = &state.train;
    state
        .model
        .sgd_step_split(t.lr, t.lr * t.head_lr_scale, t.momentum);
    state.model.zero_grad();
    Ok(comps)
}

/// Trains the current model of `state` on the step's weakly labelled
/// samples for the configured number of epochs. When `memory` is given,
/// that fraction of every batch is drawn from the bank.
pub fn incremental_step(
    state: &mut StepState,
    data: &[Sample],
    memory: Option<(&MemoryBank, f64)>,
    sim: &SimilarityMatrix,
) -> Result<Vec<EpochTrace>> {
    if data.is_empty() {
        return Err(Error::Invalid("incremental step without samples".into()));
    }
    if let Some((_, ratio)) = memory {
        if !(0.0..1.0).contains(&ratio) {
            return Err(Error::Invalid(format!(
                "memory ratio must lie in [0, 1), got {ratio}"
            )));
        }
    }
    let empty = MemoryBank::empty();
    let (bank, ratio) = memory.unwrap_or((&empty, 0.0));
    let mut rng = ChaCha8Rng::seed_from_u64(state.train.seed.wrapping_add(state.step as u64));
    let mut order: Vec<usize> = (0..data.len()).collect();
    let batch = state.train.batch.min(data.len());
    state.model.reset_optimizer();
    let mut trace = Vec::with_capacity(state.train.epochs);

    for _ in 0..state.train.epochs {
        let epoch = state.epoch;
        order.shuffle(&mut rng);
        let mut sums = LossComponents::default();
        let mut batches = 0usize;
        let mut pos = 0;
        while pos < order.len() {
            let end = (pos + batch).min(order.len());
            let current: Vec<BatchItem<'_>> = order[pos..end]
                .iter()
                .map(|&i| BatchItem::Current(&data[i]))
                .collect();
            let items = mix_batch(&current, bank, ratio, &mut rng)?;
            let kept = items.iter().filter(|i| !i.is_memory()).count();
            pos += kept.max(1);
            let c = train_batch(state, &items, sim, epoch)?;
            sums.cls += c.cls;
            sums.kdl += c.kdl;
            sums.kde += c.kde;
            sums.seg += c.seg;
            sums.rasp += c.rasp;
            batches += 1;
        }
        let n = batches as f64;
        let mean = LossComponents {
            cls: sums.cls / n,
            kdl: sums.kdl / n,
            kde: sums.kde / n,
            seg: sums.seg / n,
            rasp: sums.rasp / n,
        };
        let active = seg_active(&state.loss, epoch);
        let total =
            total_loss(&mean, &state.loss, epoch).map_err(|e| Error::Diverged(e.to_string()))?;
        trace.push(EpochTrace {
            epoch: epoch + 1,
            cls: mean.cls,
            kdl: mean.kdl,
            kde: mean.kde,
            seg: active.then_some(mean.seg),
            rasp: state.rasp_path.then_some(mean.rasp),
            seg_active: active,
            total,
        });
        state.epoch += 1;
    }
    Ok(trace)
}
