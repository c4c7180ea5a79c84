use std::collections::BTreeSet;

use rasp_core::class_semantics::semantic_similarity;
use rasp_core::synthdata::{
    default_shape_taxonomy, export_dataset, generate_dataset, load_dataset, samples, GenConfig,
};

#[test]
fn every_class_meets_the_coverage_bound() {
    let tax = default_shape_taxonomy();
    let cfg = GenConfig {
        seed: 100,
        ..GenConfig::default()
    };
    let data = generate_dataset(&tax, &cfg).unwrap();
    let classes = tax.registry.len() - 1;
    let bound = cfg.n / (3 * classes);
    for c in 1..=classes {
        let count = data
            .iter()
            .filter(|s| s.sample.dense_mask.iter().any(|&k| k == c))
            .count();
        assert!(count >= bound, "class {c}: {count} < {bound}");
    }
}

#[test]
fn family_structure_of_similarities() {
    let tax = default_shape_taxonomy();
    let e = &tax.embeddings;
    let s = |a: &str, b: &str| semantic_similarity(a, b, e).unwrap();
    assert!((s("ellipse_small", "ellipse_large") + 0.1).abs() < 1e-9);
    assert!((s("ellipse_small", "triangle_large") + 0.9).abs() < 1e-9);
    assert!((s("bkg", "rectangle_small") + 1.0).abs() < 1e-9);
    // the isolated family shares nothing with the others
    assert!((s("cross_small", "ellipse_large") + 1.0).abs() < 1e-9);
}

#[test]
fn exported_dataset_reloads_identically() {
    let tax = default_shape_taxonomy();
    let data = generate_dataset(
        &tax,
        &GenConfig {
            n: 12,
            seed: 3,
            ..GenConfig::default()
        },
    )
    .unwrap();
    let dir = tempfile::tempdir().unwrap();
    export_dataset(dir.path(), &tax.registry, &data).unwrap();
    let (registry, loaded) = load_dataset(dir.path()).unwrap();
    assert_eq!(registry, tax.registry);
    let original = samples(data);
    assert_eq!(loaded.len(), original.len());
    for (a, b) in loaded.iter().zip(&original) {
        assert_eq!(a.dense_mask, b.dense_mask);
        let present: BTreeSet<usize> = a.dense_mask.iter().copied().collect();
        assert_eq!(present, b.present_classes());
        // 8-bit pixmaps quantize the image
        assert!(a
            .image
            .iter()
            .zip(b.image.iter())
            .all(|(x, y)| (x - y.clamp(0.0, 1.0)).abs() <= 0.5 / 255.0 + 1e-6));
    }
}
