//! Dense semantic similarity maps built from the previous model's
//! predictions and the image-level labels of the current image.

use std::path::{Path, PathBuf};
use std::sync::Arc;

use ndarray::{Array2, Axis};

use crate::class_semantics::SimilarityMatrix;
use crate::error::{Error, Result};
use crate::pnm;
use crate::tensor::{argmax, ScoreTensor};

/// Per-pixel class indices into an ordered list of class names.
#[derive(Clone, Debug, PartialEq)]
pub struct LabelMap {
    grid: Array2<usize>,
    classes: Arc<[String]>,
}

impl LabelMap {
    pub fn new(grid: Array2<usize>, classes: Arc<[String]>) -> Result<Self> {
        if let Some(&bad) = grid.iter().find(|&&c| c >= classes.len()) {
            return Err(Error::Invalid(format!(
                "label {bad} outside {} known classes",
                classes.len()
            )));
        }
        Ok(Self { grid, classes })
    }

    pub fn grid(&self) -> &Array2<usize> {
        &self.grid
    }

    pub fn classes(&self) -> &[String] {
        &self.classes
    }

    pub fn dim(&self) -> (usize, usize) {
        self.grid.dim()
    }
}

/// Most probable previous class per pixel; ties go to the lowest channel.
/// `classes` names the channels of `old_scores` in order.
pub fn argmax_label_map(old_scores: &ScoreTensor, classes: Arc<[String]>) -> Result<LabelMap> {
    if old_scores.classes() != classes.len() {
        return Err(Error::Shape(format!(
            "{} score channels for {} class names",
            old_scores.classes(),
            classes.len()
        )));
    }
    if old_scores.pixels() == 0 {
        return Err(Error::Shape("empty score tensor".into()));
    }
    let grid = old_scores
        .values()
        .map_axis(Axis(2), |px| argmax(px.iter().copied()));
    LabelMap::new(grid, classes)
}

/// One positive map per new class present in the image.
#[derive(Clone, Debug, PartialEq)]
pub struct SimilarityStack {
    maps: Vec<Array2<f64>>,
    classes: Vec<String>,
    tau: f64,
}

impl SimilarityStack {
    pub fn maps(&self) -> &[Array2<f64>] {
        &self.maps
    }

    pub fn classes(&self) -> &[String] {
        &self.classes
    }

    pub fn tau(&self) -> f64 {
        self.tau
    }

    pub fn dim(&self) -> (usize, usize) {
        self.maps[0].dim()
    }

    /// Writes one min-max scaled PGM per class as `<dir>/sim_<class>.pgm`.
    /// A constant map is written as all zeros.
    pub fn export_pgm(&self, dir: &Path) -> Result<Vec<PathBuf>> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut written = Vec::new();
        for (name, map) in self.classes.iter().zip(&self.maps) {
            let lo = map.iter().copied().fold(f64::INFINITY, f64::min);
            let hi = map.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let span = hi - lo;
            let gray = map.mapv(|v| {
                if span > 0.0 {
                    ((v - lo) / span * 255.0).round() as u8
                } else {
                    0
                }
            });
            let path = dir.join(format!("sim_{name}.pgm"));
            pnm::write_pgm(&path, &gray)?;
            written.push(path);
        }
        Ok(written)
    }
}

/// For each new class `c` and pixel `i`:
/// `s^c_i = exp((S(y*_i, c) - S(bkg, c)) / tau)`.
pub fn similarity_maps<S: AsRef<str>>(
    label_map: &LabelMap,
    new_labels: &[S],
    sim: &SimilarityMatrix,
    tau: f64,
) -> Result<SimilarityStack> {
    if !(tau > 0.0) || !tau.is_finite() {
        return Err(Error::Invalid(format!("tau must be positive, got {tau}")));
    }
    if new_labels.is_empty() {
        return Err(Error::Invalid(
            "no image-level labels for similarity maps".into(),
        ));
    }
    let registry = sim.registry();
    let bkg = 0;
    let old_indices = label_map
        .classes()
        .iter()
        .map(|n| registry.index_of(n))
        .collect::<Result<Vec<_>>>()?;

    let mut maps = Vec::with_capacity(new_labels.len());
    let mut classes = Vec::with_capacity(new_labels.len());
    for label in new_labels {
        let label = label.as_ref();
        let c = registry.index_of(label)?;
        let den = sim.get(bkg, c);
        let ratio: Vec<f64> = old_indices
            .iter()
            .map(|&k| {
                if k == bkg {
                    1.0
                } else {
                    ((sim.get(k, c) - den) / tau).exp()
                }
            })
            .collect();
        maps.push(label_map.grid().mapv(|y| ratio[y]));
        classes.push(label.to_string());
    }
    Ok(SimilarityStack { maps, classes, tau })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::class_semantics::{similarity_matrix, ClassRegistry, EmbeddingTable, BACKGROUND};
    use ndarray::{array, Array3};

    fn names(v: &[&str]) -> Arc<[String]> {
        v.iter().map(|s| s.to_string()).collect::<Vec<_>>().into()
    }

    /// bkg, cow, car, sheep with hand-picked directions.
    fn setup() -> SimilarityMatrix {
        let reg = ClassRegistry::new(["bkg", "cow", "car", "sheep"]).unwrap();
        let t = EmbeddingTable::new(
            vec![
                ("bkg".into(), vec![1.0, 0.0, 0.0]),
                ("cow".into(), vec![0.0, 1.0, 0.2]),
                ("car".into(), vec![0.3, 0.0, 1.0]),
                ("sheep".into(), vec![0.0, 1.0, 0.4]),
            ],
            BACKGROUND,
        )
        .unwrap();
        similarity_matrix(&reg, &t).unwrap()
    }

    #[test]
    fn argmax_examples() {
        let single = ScoreTensor::new(Array3::from_elem((2, 3, 1), 0.3)).unwrap();
        let lm = argmax_label_map(&single, names(&["bkg"])).unwrap();
        assert!(lm.grid().iter().all(|&v| v == 0));

        let strict =
            ScoreTensor::new(Array3::from_shape_vec((1, 1, 3), vec![0.2, 0.7, 0.1]).unwrap())
                .unwrap();
        let lm = argmax_label_map(&strict, names(&["bkg", "a", "b"])).unwrap();
        assert_eq!(lm.grid()[[0, 0]], 1);

        let tie =
            ScoreTensor::new(Array3::from_shape_vec((1, 1, 2), vec![0.5, 0.5]).unwrap()).unwrap();
        assert_eq!(
            argmax_label_map(&tie, names(&["bkg", "a"])).unwrap().grid()[[0, 0]],
            0
        );

        assert!(argmax_label_map(&tie, names(&["bkg"])).is_err());
        assert!(
            argmax_label_map(&ScoreTensor::zeros(0, 2, 2).unwrap(), names(&["bkg", "a"])).is_err()
        );
    }

    #[test]
    fn background_pixels_are_exactly_one() {
        let sim = setup();
        let lm = LabelMap::new(array![[0, 1], [2, 0]], names(&["bkg", "cow", "car"])).unwrap();
        let s = similarity_maps(&lm, &["sheep"], &sim, 5.0).unwrap();
        assert_eq!(s.maps()[0][[0, 0]], 1.0);
        assert_eq!(s.maps()[0][[1, 1]], 1.0);
        // cow is closer to sheep than bkg is, car is not much closer
        assert!(s.maps()[0][[0, 1]] > 1.0);
        assert_eq!(s.classes(), &["sheep".to_string()]);
    }

    #[test]
    fn scalar_exponential_example() {
        // S(y*, c) = -0.2 and S(bkg, c) = -1.0 with tau = 5
        let expected = ((-0.2f64 - -1.0) / 5.0).exp();
        assert!((expected - 1.17351).abs() < 1e-5);
        let reg = ClassRegistry::new(["bkg", "old", "new"]).unwrap();
        // unit vectors with cos(old,new)=0.8, cos(bkg,new)=0, cos(bkg,old)=0
        let t = EmbeddingTable::new(
            vec![
                ("bkg".into(), vec![0.0, 0.0, 1.0]),
                ("old".into(), vec![1.0, 0.0, 0.0]),
                ("new".into(), vec![0.8, 0.6, 0.0]),
            ],
            BACKGROUND,
        )
        .unwrap();
        let sim = similarity_matrix(&reg, &t).unwrap();
        let lm = LabelMap::new(array![[1]], names(&["bkg", "old"])).unwrap();
        let s = similarity_maps(&lm, &["new"], &sim, 5.0).unwrap();
        assert!((s.maps()[0][[0, 0]] - expected).abs() < 1e-12);
    }

    #[test]
    fn errors() {
        let sim = setup();
        let lm = LabelMap::new(array![[0]], names(&["bkg"])).unwrap();
        assert!(similarity_maps(&lm, &["sheep"], &sim, 0.0).is_err());
        assert!(similarity_maps(&lm, &["sheep"], &sim, -1.0).is_err());
        assert!(similarity_maps::<&str>(&lm, &[], &sim, 5.0).is_err());
        assert!(matches!(
            similarity_maps(&lm, &["yak"], &sim, 5.0),
            Err(Error::UnknownClass(_))
        ));
        assert!(LabelMap::new(array![[3]], names(&["bkg"])).is_err());
    }

    #[test]
    fn export_writes_scaled_pgms() {
        let sim = setup();
        let lm = LabelMap::new(array![[0, 1], [2, 1]], names(&["bkg", "cow", "car"])).unwrap();
        let s = similarity_maps(&lm, &["sheep", "cow"], &sim, 5.0).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let paths = s.export_pgm(dir.path()).unwrap();
        assert_eq!(paths.len(), 2);
        let img = pnm::read_pgm(&paths[0]).unwrap();
        assert_eq!(img.dim(), (2, 2));
        assert_eq!(*img.iter().max().unwrap(), 255);
        assert_eq!(*img.iter().min().unwrap(), 0);
    }
}
