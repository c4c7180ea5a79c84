use std::collections::HashSet;
use std::sync::Arc;

use ndarray::{Array2, Array3};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::nn::{
    leaky_relu, leaky_relu_backward, Act, Conv2d, ConvCache, GroupNorm, NormCache, Param,
};
use crate::error::{Error, Result};
use crate::tensor::argmax;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvSpec {
    pub out: usize,
    pub kernel: usize,
    pub stride: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ArchConfig {
    pub input_channels: usize,
    /// Encoder convolutions, each followed by a rectifier.
    pub encoder: Vec<ConvSpec>,
    pub localizer_hidden: usize,
    pub localizer_kernel: usize,
    pub norm_groups: usize,
    pub leaky_slope: f32,
    /// Std of the weights of head channels added for new classes.
    pub new_channel_std: f32,
}

impl Default for ArchConfig {
    fn default() -> Self {
        Self {
            input_channels: 3,
            encoder: vec![
                ConvSpec {
                    out: 8,
                    kernel: 3,
                    stride: 2,
                },
                ConvSpec {
                    out: 16,
                    kernel: 3,
                    stride: 2,
                },
                ConvSpec {
                    out: 16,
                    kernel: 3,
                    stride: 1,
                },
                ConvSpec {
                    out: 32,
                    kernel: 1,
                    stride: 1,
                },
            ],
            localizer_hidden: 16,
            localizer_kernel: 3,
            norm_groups: 1,
            leaky_slope: 0.01,
            new_channel_std: 1e-3,
        }
    }
}

impl ArchConfig {
    pub fn validate(&self) -> Result<()> {
        if self.encoder.is_empty() || self.input_channels == 0 {
            return Err(Error::Invalid("encoder needs at least one layer".into()));
        }
        if self
            .encoder
            .iter()
            .any(|c| c.out == 0 || c.kernel % 2 == 0 || c.stride == 0)
        {
            return Err(Error::Invalid(
                "encoder layers need odd kernels and positive sizes".into(),
            ));
        }
        if self.localizer_hidden == 0 || self.localizer_kernel.is_multiple_of(2) {
            return Err(Error::Invalid(
                "localizer needs an odd kernel and hidden channels".into(),
            ));
        }
        if self.norm_groups == 0 || !self.localizer_hidden.is_multiple_of(self.norm_groups) {
            return Err(Error::Invalid(
                "norm groups must divide the localizer width".into(),
            ));
        }
        Ok(())
    }

    pub fn feature_dim(&self) -> usize {
        self.encoder.last().map_or(0, |c| c.out)
    }

    /// Total downsampling factor of the encoder.
    pub fn output_stride(&self) -> usize {
        self.encoder.iter().map(|c| c.stride).product()
    }
}

/// Auxiliary classification head trained from image-level labels; its
/// dense scores provide pseudo-labels for new classes.
#[derive(Clone, Debug, PartialEq)]
pub struct Localizer {
    pub conv1: Conv2d,
    pub norm1: GroupNorm,
    pub conv2: Conv2d,
    pub norm2: GroupNorm,
    pub conv3: Conv2d,
    slope: f32,
}

pub struct LocalizerCache {
    c1: ConvCache,
    n1: NormCache,
    a1: Array2<f32>,
    c2: ConvCache,
    n2: NormCache,
    a2: Array2<f32>,
    c3: ConvCache,
}

impl Localizer {
    fn new(arch: &ArchConfig, classes: usize, rng: &mut ChaCha8Rng) -> Self {
        let (d, h, k) = (
            arch.feature_dim(),
            arch.localizer_hidden,
            arch.localizer_kernel,
        );
        Self {
            conv1: Conv2d::new(d, h, k, 1, rng),
            norm1: GroupNorm::new(h, arch.norm_groups),
            conv2: Conv2d::new(h, h, k, 1, rng),
            norm2: GroupNorm::new(h, arch.norm_groups),
            conv3: Conv2d::with_std(h, classes, 1, 1, (1.0 / h as f32).sqrt(), rng),
            slope: arch.leaky_slope,
        }
    }

    pub fn forward(&self, e: &Act) -> (Act, LocalizerCache) {
        let (x, c1) = self.conv1.forward(e);
        let (mut x, n1) = self.norm1.forward(&x);
        leaky_relu(&mut x.data, self.slope);
        let a1 = x.data.clone();
        let (x, c2) = self.conv2.forward(&x);
        let (mut x, n2) = self.norm2.forward(&x);
        leaky_relu(&mut x.data, self.slope);
        let a2 = x.data.clone();
        let (z, c3) = self.conv3.forward(&x);
        (
            z,
            LocalizerCache {
                c1,
                n1,
                a1,
                c2,
                n2,
                a2,
                c3,
            },
        )
    }

    /// Returns the gradient with respect to the encoder features.
    pub fn backward(&mut self, cache: &LocalizerCache, dz: &Array2<f32>) -> Array2<f32> {
        let mut d = self
            .conv3
            .backward(&cache.c3, dz, true)
            .expect("input grad");
        leaky_relu_backward(&mut d, &cache.a2, self.slope);
        let d = self.norm2.backward(&cache.n2, &d);
        let mut d = self
            .conv2
            .backward(&cache.c2, &d, true)
            .expect("input grad");
        leaky_relu_backward(&mut d, &cache.a1, self.slope);
        let d = self.norm1.backward(&cache.n1, &d);
        self.conv1
            .backward(&cache.c1, &d, true)
            .expect("input grad")
    }

    fn params_mut(&mut self) -> Vec<(&'static str, &mut Param)> {
        vec![
            ("localizer.conv1.weight", &mut self.conv1.weight),
            ("localizer.conv1.bias", &mut self.conv1.bias),
            ("localizer.norm1.gamma", &mut self.norm1.gamma),
            ("localizer.norm1.beta", &mut self.norm1.beta),
            ("localizer.conv2.weight", &mut self.conv2.weight),
            ("localizer.conv2.bias", &mut self.conv2.bias),
            ("localizer.norm2.gamma", &mut self.norm2.gamma),
            ("localizer.norm2.beta", &mut self.norm2.beta),
            ("localizer.conv3.weight", &mut self.conv3.weight),
            ("localizer.conv3.bias", &mut self.conv3.bias),
        ]
    }
}

/// Shared encoder, main segmentation head and localizer head. Channel `k`
/// of both heads scores `classes[k]`; channel 0 is the background.
#[derive(Clone, Debug, PartialEq)]
pub struct SegModel {
    pub arch: ArchConfig,
    pub encoder: Vec<Conv2d>,
    pub head: Conv2d,
    pub localizer: Localizer,
    classes: Vec<String>,
}

pub struct EncoderCache {
    convs: Vec<ConvCache>,
    outputs: Vec<Array2<f32>>,
}

impl SegModel {
    pub fn new(arch: ArchConfig, classes: Vec<String>, seed: u64) -> Result<Self> {
        arch.validate()?;
        check_unique(&classes)?;
        if classes.is_empty() {
            return Err(Error::Invalid(
                "model needs at least the background class".into(),
            ));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut encoder = Vec::with_capacity(arch.encoder.len());
        let mut cin = arch.input_channels;
        for spec in &arch.encoder {
            encoder.push(Conv2d::new(
                cin,
                spec.out,
                spec.kernel,
                spec.stride,
                &mut rng,
            ));
            cin = spec.out;
        }
        let d = arch.feature_dim();
        let head = Conv2d::with_std(d, classes.len(), 1, 1, (1.0 / d as f32).sqrt(), &mut rng);
        let localizer = Localizer::new(&arch, classes.len(), &mut rng);
        Ok(Self {
            arch,
            encoder,
            head,
            localizer,
            classes,
        })
    }

    pub fn classes(&self) -> &[String] {
        &self.classes
    }

    pub fn num_classes(&self) -> usize {
        self.classes.len()
    }

    pub fn encode(&self, x: &Act) -> (Act, EncoderCache) {
        let mut convs = Vec::with_capacity(self.encoder.len());
        let mut outputs = Vec::with_capacity(self.encoder.len());
        let mut cur = x.clone();
        for conv in &self.encoder {
            let (mut y, cache) = conv.forward(&cur);
            y.data.mapv_inplace(|v| v.max(0.0));
            convs.push(cache);
            outputs.push(y.data.clone());
            cur = y;
        }
        (cur, EncoderCache { convs, outputs })
    }

    pub fn encode_infer(&self, x: &Act) -> Act {
        let mut cur = self.encoder[0].infer(x);
        cur.data.mapv_inplace(|v| v.max(0.0));
        for conv in &self.encoder[1..] {
            cur = conv.infer(&cur);
            cur.data.mapv_inplace(|v| v.max(0.0));
        }
        cur
    }

    pub fn encoder_backward(&mut self, cache: &EncoderCache, de: Array2<f32>) {
        let mut d = de;
        for i in (0..self.encoder.len()).rev() {
            d.zip_mut_with(&cache.outputs[i], |g, &o| {
                if o <= 0.0 {
                    *g = 0.0
                }
            });
            match self.encoder[i].backward(&cache.convs[i], &d, i > 0) {
                Some(next) => d = next,
                None => break,
            }
        }
    }

    /// Main-head logits from images.
    pub fn infer_logits(&self, x: &Act) -> Act {
        self.head.infer(&self.encode_infer(x))
    }

    /// Channel argmax of the main head per image, at encoder resolution.
    pub fn predict(&self, x: &Act) -> Vec<Array2<usize>> {
        let logits = self.infer_logits(x);
        (0..logits.n)
            .map(|b| {
                let img = logits.image(b);
                let labels: Vec<usize> = img
                    .rows()
                    .into_iter()
                    .map(|r| argmax(r.iter().map(|&v| f64::from(v))))
                    .collect();
                Array2::from_shape_vec((logits.h, logits.w), labels).expect("pixel count")
            })
            .collect()
    }

    pub fn params_mut(&mut self) -> Vec<(String, &mut Param)> {
        let mut out = Vec::new();
        for (i, conv) in self.encoder.iter_mut().enumerate() {
            out.push((format!("encoder.{i}.weight"), &mut conv.weight));
            out.push((format!("encoder.{i}.bias"), &mut conv.bias));
        }
        out.push(("head.weight".into(), &mut self.head.weight));
        out.push(("head.bias".into(), &mut self.head.bias));
        for (name, p) in self.localizer.params_mut() {
            out.push((name.to_string(), p));
        }
        out
    }

    pub fn zero_grad(&mut self) {
        for (_, p) in self.params_mut() {
            p.zero_grad();
        }
    }

    /// Clears momentum buffers, as when a fresh optimizer starts.
    pub fn reset_optimizer(&mut self) {
        for (_, p) in self.params_mut() {
            p.velocity.fill(0.0);
        }
    }

    pub fn sgd_step(&mut self, lr: f32, momentum: f32) {
        self.sgd_step_split(lr, lr, momentum);
    }

    /// SGD with one learning rate for the encoder and another for the
    /// head and localizer.
    pub fn sgd_step_split(&mut self, encoder_lr: f32, heads_lr: f32, momentum: f32) {
        for (name, p) in self.params_mut() {
            let lr = if name.starts_with("encoder.") {
                encoder_lr
            } else {
                heads_lr
            };
            p.sgd_step(lr, momentum);
        }
    }

    pub(crate) fn replace_classes(&mut self, classes: Vec<String>) {
        self.classes = classes;
    }

    /// Fresh localizer over the current channels, seeded.
    pub fn reset_localizer(&mut self, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        self.localizer = Localizer::new(&self.arch, self.classes.len(), &mut rng);
    }
}

fn check_unique(classes: &[String]) -> Result<()> {
    let mut seen = HashSet::new();
    for c in classes {
        if !seen.insert(c.as_str()) {
            return Err(Error::DuplicateClass(c.clone()));
        }
    }
    Ok(())
}

/// Immutable copy of a model used as the previous-step teacher.
#[derive(Clone, Debug)]
pub struct FrozenModel {
    inner: Arc<SegModel>,
}

impl FrozenModel {
    pub fn classes(&self) -> &[String] {
        self.inner.classes()
    }

    pub fn model(&self) -> &SegModel {
        &self.inner
    }

    /// Features and sigmoid scores of the main head.
    pub fn forward(&self, x: &Act) -> (Act, Act) {
        let e = self.inner.encode_infer(x);
        let mut y = self.inner.head.infer(&e);
        y.data.mapv_inplace(|v| 1.0 / (1.0 + (-v).exp()));
        (e, y)
    }

    pub fn snapshot(&self) -> FrozenModel {
        self.clone()
    }
}

/// Deep, inference-only copy of `model`.
pub fn snapshot(model: &SegModel) -> FrozenModel {
    let mut copy = model.clone();
    copy.zero_grad();
    copy.reset_optimizer();
    FrozenModel {
        inner: Arc::new(copy),
    }
}

/// Appends head channels for `new_classes` with small seeded random
/// weights and zero bias, keeps existing channels untouched, and gives the
/// model a fresh localizer over all channels.
pub fn extend_head(model: &SegModel, new_classes: &[String], seed: u64) -> Result<SegModel> {
    if new_classes.is_empty() {
        return Err(Error::Invalid(
            "extend_head needs at least one new class".into(),
        ));
    }
    let mut classes = model.classes.clone();
    classes.extend(new_classes.iter().cloned());
    check_unique(&classes)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0f32, model.arch.new_channel_std)
        .map_err(|e| Error::Invalid(e.to_string()))?;
    let d = model.head.in_channels;
    let (old_c, add) = (model.num_classes(), new_classes.len());
    let mut weight = Array2::zeros((d, old_c + add));
    weight
        .slice_mut(ndarray::s![.., ..old_c])
        .assign(&model.head.weight.value);
    for v in weight.slice_mut(ndarray::s![.., old_c..]).iter_mut() {
        *v = normal.sample(&mut rng);
    }
    let mut bias = Array2::zeros((1, old_c + add));
    bias.slice_mut(ndarray::s![.., ..old_c])
        .assign(&model.head.bias.value);

    let mut out = model.clone();
    out.head.out_channels = old_c + add;
    out.head.weight = Param::new(weight);
    out.head.bias = Param::new(bias);
    out.replace_classes(classes);
    out.localizer = Localizer::new(&out.arch, old_c + add, &mut rng);
    out.zero_grad();
    out.reset_optimizer();
    Ok(out)
}

/// Stacks `height × width × channels` images into one batch, centring
/// values around zero.
pub fn images_to_act<'a>(images: impl IntoIterator<Item = &'a Array3<f32>>) -> Result<Act> {
    let mut rows: Vec<f32> = Vec::new();
    let mut dims = None;
    let mut n = 0;
    for img in images {
        let d = img.dim();
        if *dims.get_or_insert(d) != d {
            return Err(Error::Shape(format!(
                "image {:?} vs {:?}",
                d,
                dims.unwrap()
            )));
        }
        rows.extend(img.iter().map(|v| v - 0.5));
        n += 1;
    }
    let (h, w, c) = dims.ok_or_else(|| Error::Shape("empty image batch".into()))?;
    Ok(Act {
        n,
        h,
        w,
        data: Array2::from_shape_vec((n * h * w, c), rows).expect("sizes agree"),
    })
}
