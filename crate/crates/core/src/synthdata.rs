//! Deterministic synthetic segmentation data with a class taxonomy whose
//! semantic structure mirrors its visual structure.
//!
//! The default taxonomy has four shape families (ellipse, rectangle,
//! triangle, cross) with a small solid and a large striped member each.
//! Members of a family share geometry and colour, and their embeddings are
//! close (cosine 0.9). Families are far apart (cosine 0.1), and the cross
//! family is orthogonal to every other family.

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use ndarray::{Array2, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::class_semantics::{ClassRegistry, EmbeddingTable, BACKGROUND};
use crate::error::{Error, Result};
use crate::pnm;
use crate::protocol::Sample;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Geometry {
    Ellipse,
    Rectangle,
    Triangle,
    Cross,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Texture {
    Solid,
    Striped,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ShapeClassSpec {
    pub name: String,
    pub geometry: Geometry,
    /// Inclusive range of the bounding-box side length, in pixels.
    pub size_range: (usize, usize),
    pub texture: Texture,
    pub color: [f32; 3],
    pub embedding: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Taxonomy {
    pub registry: ClassRegistry,
    pub embeddings: EmbeddingTable,
    /// Foreground classes, in registry order starting at index 1.
    pub classes: Vec<ShapeClassSpec>,
}

impl Taxonomy {
    pub fn spec(&self, class_index: usize) -> &ShapeClassSpec {
        &self.classes[class_index - 1]
    }
}

const FAMILIES: [(Geometry, &str, [f32; 3]); 4] = [
    (Geometry::Ellipse, "ellipse", [0.85, 0.22, 0.2]),
    (Geometry::Rectangle, "rectangle", [0.2, 0.72, 0.25]),
    (Geometry::Triangle, "triangle", [0.22, 0.32, 0.88]),
    (Geometry::Cross, "cross", [0.9, 0.8, 0.15]),
];

/// Index of the family with no semantic link to the others.
const ISOLATED_FAMILY: usize = 3;

/// Eight shape classes plus background. Registry order lists the four
/// small members first, then the four large ones, so that the first four
/// classes form a natural base task whose members each have a relative
/// among the later classes.
pub fn default_taxonomy() -> (ClassRegistry, EmbeddingTable) {
    let t = default_shape_taxonomy();
    (t.registry, t.embeddings)
}

pub fn default_shape_taxonomy() -> Taxonomy {
    let families = FAMILIES.len();
    // shared axis, one axis per family, one per member, one for background
    let dim = 1 + families + 2 * families + 1;
    let mut classes = Vec::new();
    for (member, (texture, size_range, suffix)) in [
        (Texture::Solid, (18, 24), "small"),
        (Texture::Striped, (28, 34), "large"),
    ]
    .into_iter()
    .enumerate()
    {
        for (f, &(geometry, family, color)) in FAMILIES.iter().enumerate() {
            // cos within a family = shared² + family² = 0.9,
            // across families = shared² = 0.1 (0 for the isolated family)
            let (shared, fam) = if f == ISOLATED_FAMILY {
                (0.0, 0.9f64.sqrt())
            } else {
                (0.1f64.sqrt(), 0.8f64.sqrt())
            };
            let mut v = vec![0.0; dim];
            v[0] = shared;
            v[1 + f] = fam;
            v[1 + families + 2 * f + member] = 0.1f64.sqrt();
            classes.push(ShapeClassSpec {
                name: format!("{family}_{suffix}"),
                geometry,
                size_range,
                texture,
                color,
                embedding: v,
            });
        }
    }
    let mut bkg = vec![0.0; dim];
    bkg[dim - 1] = 1.0;
    let registry = ClassRegistry::new(
        std::iter::once(BACKGROUND.to_string()).chain(classes.iter().map(|c| c.name.clone())),
    )
    .expect("static taxonomy is valid");
    let mut entries = vec![(BACKGROUND.to_string(), bkg)];
    entries.extend(
        classes
            .iter()
            .map(|c| (c.name.clone(), c.embedding.clone())),
    );
    let embeddings = EmbeddingTable::new(entries, BACKGROUND).expect("static embeddings are valid");
    Taxonomy {
        registry,
        embeddings,
        classes,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GenConfig {
    pub n: usize,
    pub height: usize,
    pub width: usize,
    /// Inclusive range of objects per image.
    pub objects: (usize, usize),
    pub seed: u64,
    /// Restricts object classes to these names when set.
    pub class_pool: Option<Vec<String>>,
    pub noise_std: f32,
}

impl Default for GenConfig {
    fn default() -> Self {
        Self {
            n: 600,
            height: 64,
            width: 64,
            objects: (1, 3),
            seed: 0,
            class_pool: None,
            noise_std: 0.06,
        }
    }
}

/// An object placed in an image: its class and analytic region.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlacedShape {
    pub class: usize,
    pub geometry: Geometry,
    /// Top-left corner and size of the bounding box.
    pub top: usize,
    pub left: usize,
    pub height: usize,
    pub width: usize,
}

impl PlacedShape {
    /// Exact membership test for the pixel whose centre is at
    /// `(row + 0.5, col + 0.5)`.
    pub fn contains(&self, row: usize, col: usize) -> bool {
        let ry = self.height as f64 / 2.0;
        let rx = self.width as f64 / 2.0;
        let dy = row as f64 + 0.5 - (self.top as f64 + ry);
        let dx = col as f64 + 0.5 - (self.left as f64 + rx);
        if dy.abs() > ry || dx.abs() > rx {
            return false;
        }
        match self.geometry {
            Geometry::Rectangle => true,
            Geometry::Ellipse => (dy / ry).powi(2) + (dx / rx).powi(2) <= 1.0,
            // apex at the top centre, base along the bottom edge
            Geometry::Triangle => dx.abs() <= rx * (dy + ry) / (2.0 * ry),
            Geometry::Cross => dy.abs() <= ry / 3.0 || dx.abs() <= rx / 3.0,
        }
    }

    fn overlaps_box(&self, other: &PlacedShape) -> bool {
        self.top < other.top + other.height
            && other.top < self.top + self.height
            && self.left < other.left + other.width
            && other.left < self.left + self.width
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GeneratedSample {
    pub sample: Sample,
    pub shapes: Vec<PlacedShape>,
}

impl GeneratedSample {
    pub fn present_names(&self, registry: &ClassRegistry) -> BTreeSet<String> {
        self.sample
            .present_classes()
            .into_iter()
            .filter(|&c| c != 0)
            .map(|c| {
                registry
                    .name(c)
                    .expect("mask indices come from the registry")
                    .to_string()
            })
            .collect()
    }
}

const PLACEMENT_TRIES: usize = 64;
const LAYOUT_TRIES: usize = 64;

/// Renders `cfg.n` samples. Sample `i` depends only on `(taxonomy, cfg, i)`.
pub fn generate_dataset(taxonomy: &Taxonomy, cfg: &GenConfig) -> Result<Vec<GeneratedSample>> {
    if cfg.n == 0 {
        return Err(Error::Invalid("dataset size must be positive".into()));
    }
    let (lo, hi) = cfg.objects;
    if lo == 0 || lo > hi {
        return Err(Error::Invalid(format!(
            "bad object count range {lo}..={hi}"
        )));
    }
    let pool: Vec<usize> = match &cfg.class_pool {
        Some(names) => names
            .iter()
            .map(|n| taxonomy.registry.index_of(n))
            .collect::<Result<_>>()?,
        None => (1..taxonomy.registry.len()).collect(),
    };
    if pool.is_empty() || pool.contains(&0) {
        return Err(Error::Invalid(
            "class pool must list foreground classes".into(),
        ));
    }
    for &c in &pool {
        let (_, max) = taxonomy.spec(c).size_range;
        if max > cfg.height || max > cfg.width {
            return Err(Error::Infeasible(format!(
                "class `{}` can be {max} px, image is {}x{}",
                taxonomy.spec(c).name,
                cfg.height,
                cfg.width
            )));
        }
    }
    (0..cfg.n)
        .map(|i| generate_one(taxonomy, cfg, &pool, i))
        .collect()
}

pub fn samples(generated: Vec<GeneratedSample>) -> Vec<Sample> {
    generated.into_iter().map(|g| g.sample).collect()
}

fn generate_one(
    taxonomy: &Taxonomy,
    cfg: &GenConfig,
    pool: &[usize],
    index: usize,
) -> Result<GeneratedSample> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(index as u64);
    let shapes = layout(taxonomy, cfg, pool, &mut rng)
        .ok_or_else(|| Error::Infeasible(format!("could not place objects in sample {index}")))?;
    let (h, w) = (cfg.height, cfg.width);
    let noise =
        Normal::new(0.0f32, cfg.noise_std.max(0.0)).map_err(|e| Error::Invalid(e.to_string()))?;

    let level: f32 = rng.random_range(0.3..0.7);
    let tint: [f32; 3] = std::array::from_fn(|_| rng.random_range(-0.05..0.05));
    let mut image = Array3::from_shape_fn((h, w, 3), |(_, _, k)| level + tint[k]);
    let mut mask = Array2::zeros((h, w));
    for shape in &shapes {
        let spec = taxonomy.spec(shape.class);
        let brightness: f32 = rng.random_range(0.85..1.1);
        let phase = rng.random_range(0..4usize);
        for r in shape.top..shape.top + shape.height {
            for c in shape.left..shape.left + shape.width {
                if !shape.contains(r, c) {
                    continue;
                }
                mask[[r, c]] = shape.class;
                let stripe = spec.texture == Texture::Striped && (r + c + phase) % 4 < 2;
                let shade = if stripe { 0.55 } else { 1.0 } * brightness;
                for k in 0..3 {
                    image[[r, c, k]] = spec.color[k] * shade;
                }
            }
        }
    }
    image.mapv_inplace(|v| (v + noise.sample(&mut rng)).clamp(0.0, 1.0));
    Ok(GeneratedSample {
        sample: Sample::new(image, mask),
        shapes,
    })
}

fn layout(
    taxonomy: &Taxonomy,
    cfg: &GenConfig,
    pool: &[usize],
    rng: &mut ChaCha8Rng,
) -> Option<Vec<PlacedShape>> {
    for _ in 0..LAYOUT_TRIES {
        let count = rng.random_range(cfg.objects.0..=cfg.objects.1);
        let mut placed: Vec<PlacedShape> = Vec::with_capacity(count);
        'objects: for _ in 0..count {
            let class = pool[rng.random_range(0..pool.len())];
            let spec = taxonomy.spec(class);
            let (lo, hi) = spec.size_range;
            let height = rng.random_range(lo..=hi);
            let width = rng.random_range(lo..=hi);
            for _ in 0..PLACEMENT_TRIES {
                let candidate = PlacedShape {
                    class,
                    geometry: spec.geometry,
                    top: rng.random_range(0..=cfg.height - height),
                    left: rng.random_range(0..=cfg.width - width),
                    height,
                    width,
                };
                if placed.iter().all(|p| !p.overlaps_box(&candidate)) {
                    placed.push(candidate);
                    continue 'objects;
                }
            }
            break;
        }
        if placed.len() == count {
            return Some(placed);
        }
    }
    None
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub image: String,
    pub mask: String,
    pub classes: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub registry: ClassRegistry,
    pub height: usize,
    pub width: usize,
    pub samples: Vec<ManifestEntry>,
}

/// Writes `images/NNNNN.ppm`, `masks/NNNNN.pgm` (class index per pixel) and
/// `manifest.json` under `dir`.
pub fn export_dataset(
    dir: &Path,
    registry: &ClassRegistry,
    data: &[GeneratedSample],
) -> Result<PathBuf> {
    for sub in ["images", "masks"] {
        let p = dir.join(sub);
        fs::create_dir_all(&p).map_err(|e| Error::io(&p, e))?;
    }
    let mut entries = Vec::with_capacity(data.len());
    for (i, g) in data.iter().enumerate() {
        let image = format!("images/{i:05}.ppm");
        let mask = format!("masks/{i:05}.pgm");
        pnm::write_ppm(&dir.join(&image), &pnm::from_unit(&g.sample.image))?;
        let gray = g.sample.dense_mask.mapv(|c| c as u8);
        pnm::write_pgm(&dir.join(&mask), &gray)?;
        entries.push(ManifestEntry {
            image,
            mask,
            classes: g.present_names(registry).into_iter().collect(),
        });
    }
    let (height, width) = data.first().map_or((0, 0), |g| g.sample.dense_mask.dim());
    let manifest = DatasetManifest {
        registry: registry.clone(),
        height,
        width,
        samples: entries,
    };
    let path = dir.join("manifest.json");
    let text = serde_json::to_string_pretty(&manifest).map_err(|e| Error::parse(&path, e))?;
    fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    Ok(path)
}

/// Reads a dataset written by [`export_dataset`].
pub fn load_dataset(dir: &Path) -> Result<(ClassRegistry, Vec<Sample>)> {
    let path = dir.join("manifest.json");
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let manifest: DatasetManifest =
        serde_json::from_str(&text).map_err(|e| Error::parse(&path, e))?;
    let mut out = Vec::with_capacity(manifest.samples.len());
    for entry in &manifest.samples {
        let image = pnm::to_unit(&pnm::read_ppm(&dir.join(&entry.image))?);
        let mask = pnm::read_pgm(&dir.join(&entry.mask))?.mapv(usize::from);
        if let Some(&bad) = mask.iter().find(|&&c| c >= manifest.registry.len()) {
            return Err(Error::parse(
                dir.join(&entry.mask),
                format!("class index {bad} not in registry"),
            ));
        }
        out.push(Sample::new(image, mask));
    }
    Ok((manifest.registry, out))
}
