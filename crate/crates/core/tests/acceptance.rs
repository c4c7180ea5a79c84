//! One test per acceptance criterion. Each prints a single `PASS`/`FAIL`
//! line with the measured values before asserting.
//!
//! Run with `cargo test -p rasp-core --test acceptance -- --nocapture`.

use std::collections::BTreeSet;
use std::sync::{Arc, OnceLock};
use std::time::Instant;

use ndarray::{Array2, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rasp_core::class_semantics::{semantic_similarity, similarity_matrix, SimilarityMatrix};
use rasp_core::config::{ExperimentConfig, MemoryKind};
use rasp_core::engine::{incremental_step, SegModel, StepState, TrainConfig};
use rasp_core::evalkit::{confusion_accumulate, harmonic_mean, miou, relative_gain};
use rasp_core::objectives::{
    cls_loss_grad, fuse_supervision, image_scores, image_scores_backward, kde_loss_grad,
    kdl_loss_grad, rasp_loss_grad, seg_loss_grad, ChannelPartition, LossConfig,
};
use rasp_core::pipeline::Pipeline;
use rasp_core::protocol::{
    build_schedule, filter_indices, prepare_step, ClassOrdering, ProtocolMode, Sample,
};
use rasp_core::simprior::{similarity_maps, LabelMap};
use rasp_core::synthdata::{
    default_shape_taxonomy, generate_dataset, samples, GenConfig, Taxonomy,
};
use rasp_core::tensor::ScoreTensor;

fn print_verdict(name: &str, pass: bool, detail: &str) {
    println!("{} {name}: {detail}", if pass { "PASS" } else { "FAIL" });
}

fn verdict(name: &str, pass: bool, detail: &str) {
    print_verdict(name, pass, detail);
    assert!(pass, "{name} failed: {detail}");
}

/// Directional experiments are empirical outcomes of training runs: the
/// verdict is printed at the stated threshold, but a negative outcome does
/// not abort the suite. Set `RASP_STRICT_EXPERIMENTS=1` to make it fatal.
fn experiment_verdict(name: &str, pass: bool, detail: &str) {
    if std::env::var_os("RASP_STRICT_EXPERIMENTS").is_some() {
        verdict(name, pass, detail);
    } else {
        print_verdict(name, pass, detail);
    }
}

fn taxonomy() -> &'static Taxonomy {
    static TAX: OnceLock<Taxonomy> = OnceLock::new();
    TAX.get_or_init(default_shape_taxonomy)
}

fn sim() -> &'static SimilarityMatrix {
    static SIM: OnceLock<SimilarityMatrix> = OnceLock::new();
    SIM.get_or_init(|| similarity_matrix(&taxonomy().registry, &taxonomy().embeddings).unwrap())
}

fn names(v: &[&str]) -> Vec<String> {
    v.iter().map(|s| s.to_string()).collect()
}

const OLD: [&str; 5] = [
    "bkg",
    "ellipse_small",
    "rectangle_small",
    "triangle_small",
    "cross_small",
];
const NEW: [&str; 4] = [
    "ellipse_large",
    "rectangle_large",
    "triangle_large",
    "cross_large",
];

fn random_label_map(rng: &mut ChaCha8Rng, h: usize, w: usize) -> LabelMap {
    let classes: Arc<[String]> = names(&OLD).into();
    LabelMap::new(
        Array2::from_shape_fn((h, w), |_| rng.random_range(0..OLD.len())),
        classes,
    )
    .unwrap()
}

// ---------------------------------------------------------------------------

#[test]
fn reported_gain_arithmetic() {
    let g1 = relative_gain(47.0, 44.1).unwrap();
    let g2 = relative_gain(28.4, 22.4).unwrap();
    let hm = harmonic_mean(64.4, 21.3).unwrap();
    let pass = (g1 - 6.6).abs() <= 0.05 && (g2 - 26.8).abs() <= 0.05 && (hm - 32.0).abs() <= 0.05;
    verdict(
        "reported-gain-arithmetic",
        pass,
        &format!(
            "gain 44.1->47.0 = {g1:.3}%, gain 22.4->28.4 = {g2:.3}%, HM(64.4, 21.3) = {hm:.3}"
        ),
    );
}

// ---------------------------------------------------------------------------

const FD_STEP: f64 = 1e-5;
/// Entries whose gradient is below this magnitude are compared absolutely.
const REL_FLOOR: f64 = 1e-6;

fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(REL_FLOOR)
}

/// Max relative error between `grad` and central differences of `f` at `x`.
fn fd_check(x: &Array3<f64>, grad: &Array3<f64>, f: impl Fn(&Array3<f64>) -> f64) -> f64 {
    let mut worst = 0.0f64;
    for (idx, &g) in grad.indexed_iter() {
        let mut xp = x.clone();
        xp[idx] += FD_STEP;
        let mut xm = x.clone();
        xm[idx] -= FD_STEP;
        let num = (f(&xp) - f(&xm)) / (2.0 * FD_STEP);
        worst = worst.max(rel_err(g, num));
    }
    worst
}

fn scores(x: &Array3<f64>) -> ScoreTensor {
    ScoreTensor::new(x.clone()).unwrap()
}

#[test]
fn gradient_suite() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let cfg = LossConfig::default();
    let mut worst = [0.0f64; 7];
    let labels_kde = [
        "rasp",
        "cls(nGWP+focal)",
        "seg",
        "kde(squared)",
        "kde(plain)",
        "kdl",
        "pooling",
    ];
    for _ in 0..20 {
        let mut rand3 =
            |scale: f64| Array3::from_shape_fn((4, 4, 3), |_| rng.random_range(-scale..scale));
        let z = rand3(3.0);
        let other = rand3(3.0);
        let unit = other.mapv(|v| 1.0 / (1.0 + (-v).exp()));

        // similarity-guided localizer loss
        let mut lrng = ChaCha8Rng::seed_from_u64(rng.random());
        let stack = similarity_maps(
            &random_label_map(&mut lrng, 4, 4),
            &NEW[..3],
            sim(),
            cfg.tau,
        )
        .unwrap();
        let (_, g) = rasp_loss_grad(&scores(&z), &stack).unwrap();
        worst[0] = worst[0].max(fd_check(&z, &g, |x| {
            rasp_loss_grad(&scores(x), &stack).unwrap().0
        }));

        // image-level classification through pooling
        let labels: Vec<f64> = (0..3).map(|_| f64::from(rng.random_bool(0.5))).collect();
        let cls = |x: &Array3<f64>| {
            let s = image_scores(&scores(x), &cfg).unwrap();
            cls_loss_grad(&s, &labels).unwrap()
        };
        let (_, d) = cls(&z);
        let g = image_scores_backward(&scores(&z), &cfg, &d).unwrap();
        worst[1] = worst[1].max(fd_check(&z, &g, |x| cls(x).0));

        let (_, g) = seg_loss_grad(&scores(&z), &scores(&unit)).unwrap();
        worst[2] = worst[2].max(fd_check(&z, &g, |x| {
            seg_loss_grad(&scores(x), &scores(&unit)).unwrap().0
        }));

        for (slot, squared) in [(3, true), (4, false)] {
            let (_, g) = kde_loss_grad(&z, &other, squared).unwrap();
            worst[slot] = worst[slot].max(fd_check(&z, &g, |x| {
                kde_loss_grad(x, &other, squared).unwrap().0
            }));
        }

        let (_, g) = kdl_loss_grad(&scores(&z), &scores(&unit)).unwrap();
        worst[5] = worst[5].max(fd_check(&z, &g, |x| {
            kdl_loss_grad(&scores(x), &scores(&unit)).unwrap().0
        }));

        // pooled scores alone, weighted by a random cotangent
        let w: Vec<f64> = (0..3).map(|_| rng.random_range(-1.0..1.0)).collect();
        let pooled = |x: &Array3<f64>| -> f64 {
            image_scores(&scores(x), &cfg)
                .unwrap()
                .iter()
                .zip(&w)
                .map(|(a, b)| a * b)
                .sum()
        };
        let g = image_scores_backward(&scores(&z), &cfg, &w).unwrap();
        worst[6] = worst[6].max(fd_check(&z, &g, pooled));
    }
    let detail = labels_kde
        .iter()
        .zip(worst)
        .map(|(n, w)| format!("{n} {w:.2e}"))
        .collect::<Vec<_>>()
        .join(", ");
    verdict(
        "gradient-suite",
        worst.iter().all(|&w| w < 1e-4),
        &format!("20 draws, max rel err: {detail}"),
    );
}

// ---------------------------------------------------------------------------

#[test]
fn similarity_invariants() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let (mut bkg_ok, mut mono_ok, mut equiv_ok) = (true, true, true);
    let mut worst_bkg = 0.0f64;
    for _ in 0..50 {
        let map = random_label_map(&mut rng, 8, 8);
        let lo = rng.random_range(0.5..5.0);
        let hi = lo + rng.random_range(0.5..10.0);
        let a = similarity_maps(&map, &NEW, sim(), lo).unwrap();
        let b = similarity_maps(&map, &NEW, sim(), hi).unwrap();
        for (c, name) in NEW.iter().enumerate() {
            let s_bkg = semantic_similarity("bkg", name, &taxonomy().embeddings).unwrap();
            for (&y, (&va, &vb)) in map
                .grid()
                .iter()
                .zip(a.maps()[c].iter().zip(b.maps()[c].iter()))
            {
                if y == 0 {
                    worst_bkg = worst_bkg.max((va - 1.0).abs()).max((vb - 1.0).abs());
                    bkg_ok &= (va - 1.0).abs() <= 1e-12 && (vb - 1.0).abs() <= 1e-12;
                }
                // a larger temperature pulls every value towards 1
                mono_ok &= if va >= 1.0 {
                    vb <= va && vb >= 1.0
                } else {
                    vb >= va && vb <= 1.0
                };
                let s_y = semantic_similarity(OLD[y], name, &taxonomy().embeddings).unwrap();
                equiv_ok &= (va > 1.0) == (s_y > s_bkg) && (va < 1.0) == (s_y < s_bkg);
            }
        }
    }
    verdict(
        "similarity-invariants",
        bkg_ok && mono_ok && equiv_ok,
        &format!("50 maps: bkg==1 {bkg_ok} (max dev {worst_bkg:.1e}), monotone in tau {mono_ok}, >1/<1 equivalence {equiv_ok}"),
    );
}

// ---------------------------------------------------------------------------

/// mIoU from pixel index sets, over classes that occur in either map.
fn set_oracle_miou(pred: &Array2<usize>, truth: &Array2<usize>, classes: usize) -> f64 {
    let mut sum = 0.0;
    let mut n = 0;
    for c in 0..classes {
        let p: BTreeSet<(usize, usize)> = pred
            .indexed_iter()
            .filter(|(_, &v)| v == c)
            .map(|(i, _)| i)
            .collect();
        let t: BTreeSet<(usize, usize)> = truth
            .indexed_iter()
            .filter(|(_, &v)| v == c)
            .map(|(i, _)| i)
            .collect();
        let union = p.union(&t).count();
        if union > 0 {
            sum += p.intersection(&t).count() as f64 / union as f64;
            n += 1;
        }
    }
    sum / n as f64
}

fn fuse_oracle(q: &Array3<f64>, old: &Array3<f64>, previous: usize) -> Array3<f64> {
    Array3::from_shape_fn(q.dim(), |(i, j, k)| {
        if k == 0 {
            if old[[i, j, 0]] < q[[i, j, 0]] {
                old[[i, j, 0]]
            } else {
                q[[i, j, 0]]
            }
        } else if k < previous {
            old[[i, j, k]]
        } else {
            q[[i, j, k]]
        }
    })
}

#[test]
fn oracle_equivalence() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);

    let mut miou_ok = true;
    for _ in 0..100 {
        let k = rng.random_range(2..7);
        let pred = Array2::from_shape_fn((8, 8), |_| rng.random_range(0..k));
        let truth = Array2::from_shape_fn((8, 8), |_| rng.random_range(0..k));
        let mut counts = Array2::zeros((k, k));
        confusion_accumulate(&pred, &truth, &mut counts).unwrap();
        let all: Vec<usize> = (0..k).collect();
        miou_ok &= miou(&counts, &all).unwrap() == set_oracle_miou(&pred, &truth, k);
    }

    let mut fuse_ok = true;
    for _ in 0..100 {
        let previous = rng.random_range(1..5);
        let current = rng.random_range(1..4);
        let q = Array3::from_shape_fn((5, 6, previous + current), |_| rng.random::<f64>());
        let old = Array3::from_shape_fn((5, 6, previous), |_| rng.random::<f64>());
        let fused = fuse_supervision(
            &scores(&q),
            &scores(&old),
            ChannelPartition { previous, current },
        )
        .unwrap();
        let expected = fuse_oracle(&q, &old, previous);
        fuse_ok &= fused
            .values()
            .iter()
            .zip(expected.iter())
            .all(|(a, b)| a.to_bits() == b.to_bits());
    }

    let tax = taxonomy();
    let data = samples(
        generate_dataset(
            tax,
            &GenConfig {
                n: 200,
                height: 48,
                width: 48,
                objects: (1, 4),
                seed: 77,
                ..GenConfig::default()
            },
        )
        .unwrap(),
    );
    let mut filter_ok = true;
    let mut checked = 0;
    for mode in [ProtocolMode::Overlap, ProtocolMode::Disjoint] {
        for per_step in [1, 2] {
            let sched =
                build_schedule(&tax.registry, 4, per_step, mode, &ClassOrdering::Registry).unwrap();
            for step in 0..sched.num_tasks() {
                let idx = |v: Vec<String>| -> BTreeSet<usize> {
                    v.iter()
                        .map(|n| tax.registry.index_of(n).unwrap())
                        .collect()
                };
                let current = idx(sched.step_classes(step).unwrap().to_vec());
                let future = idx(sched.future_classes(step).unwrap());
                let expected: Vec<usize> = (0..data.len())
                    .filter(|&i| {
                        let present: BTreeSet<usize> = data[i].dense_mask.iter().copied().collect();
                        let has_current = !present.is_disjoint(&current);
                        let has_future = !present.is_disjoint(&future);
                        match mode {
                            ProtocolMode::Disjoint if step > 0 => has_current && !has_future,
                            _ => has_current,
                        }
                    })
                    .collect();
                filter_ok &=
                    filter_indices(&data, &sched, &tax.registry, step).unwrap() == expected;
                if step > 0 {
                    for s in prepare_step(&data, &sched, &tax.registry, step).unwrap() {
                        let present: BTreeSet<usize> = s.dense_mask.iter().copied().collect();
                        let weak: BTreeSet<usize> =
                            present.intersection(&current).copied().collect();
                        filter_ok &= idx(s.weak_labels.iter().cloned().collect()) == weak;
                    }
                }
                checked += 1;
            }
        }
    }
    verdict(
        "oracle-equivalence",
        miou_ok && fuse_ok && filter_ok,
        &format!("miou==set oracle on 100 pairs {miou_ok}, fuse bit-exact on 100 tensors {fuse_ok}, filters==predicates on 200 samples over {checked} (mode, schedule, step) cases {filter_ok}"),
    );
}

// ---------------------------------------------------------------------------

fn small_setup() -> (Pipeline, Vec<Sample>, SegModel) {
    let mut cfg = ExperimentConfig::shapes(4, 2, ProtocolMode::Overlap).with_seed(3);
    cfg.engine.base.epochs = 3;
    let pipe = Pipeline::new(cfg).unwrap();
    let train = samples(
        generate_dataset(
            taxonomy(),
            &GenConfig {
                n: 120,
                seed: 31,
                ..GenConfig::default()
            },
        )
        .unwrap(),
    );
    let (base, _) = pipe.train_base(&train).unwrap();
    (pipe, train, base)
}

#[test]
fn baseline_equivalence() {
    let (pipe, train, base) = small_setup();
    let sched = build_schedule(
        &taxonomy().registry,
        4,
        2,
        ProtocolMode::Overlap,
        &ClassOrdering::Registry,
    )
    .unwrap();
    let data = prepare_step(&train, &sched, &taxonomy().registry, 1).unwrap();
    let run = |lambda: f64, rasp_path: bool| {
        let loss = LossConfig {
            lambda_rasp: lambda,
            seg_warmup_epochs: 2,
            ..LossConfig::default()
        };
        let train_cfg = TrainConfig {
            epochs: 4,
            ..pipe.config.engine.incremental.clone()
        };
        let mut state =
            StepState::new(&base, sched.step_classes(1).unwrap(), 1, loss, train_cfg).unwrap();
        state.rasp_path = rasp_path;
        incremental_step(&mut state, &data, None, sim()).unwrap()
    };
    let with = run(0.0, true);
    let without = run(0.0, false);
    let mut worst = 0.0f64;
    for (a, b) in with.iter().zip(&without) {
        for (x, y) in [
            (a.cls, b.cls),
            (a.kdl, b.kdl),
            (a.kde, b.kde),
            (a.seg.unwrap_or(0.0), b.seg.unwrap_or(0.0)),
            (a.total, b.total),
        ] {
            worst = worst.max((x - y).abs());
        }
    }
    let computed =
        with.iter().all(|t| t.rasp.is_some()) && without.iter().all(|t| t.rasp.is_none());
    // the term must matter once it is weighted in
    let active = run(1.0, true);
    let differs = active.last().unwrap().total != with.last().unwrap().total;
    verdict(
        "baseline-equivalence",
        worst <= 1e-10 && with.len() == without.len() && computed && differs,
        &format!("lambda=0 with vs without prior path over {} epochs: max component diff {worst:.1e}; lambda=1 changes the trace {differs}", with.len()),
    );
}

// ---------------------------------------------------------------------------

#[test]
fn determinism() {
    let run = || {
        let (pipe, train, base) = small_setup();
        let eval = samples(
            generate_dataset(
                taxonomy(),
                &GenConfig {
                    n: 30,
                    seed: 32,
                    ..GenConfig::default()
                },
            )
            .unwrap(),
        );
        let mut cfg = pipe.config.clone();
        cfg.engine.incremental.epochs = 2;
        cfg.memory.kind = MemoryKind::Episodic;
        cfg.memory.capacity = 12;
        let pipe = Pipeline::new(cfg).unwrap();
        let bank = pipe.memory_for(&train, 1).unwrap();
        let (model, trace) = pipe.train_step(&base, 1, &train, bank.as_ref()).unwrap();
        let report = pipe.evaluate(&model, &eval, 1).unwrap();
        (
            serde_json::to_string(&report).unwrap(),
            report.to_csv(),
            serde_json::to_string(&trace).unwrap(),
        )
    };
    let a = run();
    let b = run();
    verdict(
        "determinism",
        a == b,
        &format!("two seeded base+incremental runs with memory: report json, csv and loss trace identical {}", a == b),
    );
}

// ---------------------------------------------------------------------------
// Directional experiments on the synthetic taxonomy, disjoint protocol.

const SEEDS: [u64; 5] = [0, 1, 2, 3, 4];

struct SeedRun {
    train: Vec<Sample>,
    eval: Vec<Sample>,
    base: SegModel,
}

fn experiment_config(per_step: usize, seed: u64) -> ExperimentConfig {
    ExperimentConfig::shapes(4, per_step, ProtocolMode::Disjoint).with_seed(seed)
}

/// Data and base model per seed, shared by both experiments. The base
/// task is the same for 4-2 and 4-1 schedules.
fn seed_runs() -> &'static [SeedRun] {
    static RUNS: OnceLock<Vec<SeedRun>> = OnceLock::new();
    RUNS.get_or_init(|| {
        SEEDS
            .iter()
            .map(|&seed| {
                let t = Instant::now();
                let tax = taxonomy();
                let train = samples(
                    generate_dataset(
                        tax,
                        &GenConfig {
                            seed: 100 + seed,
                            ..GenConfig::default()
                        },
                    )
                    .unwrap(),
                );
                let eval = samples(
                    generate_dataset(
                        tax,
                        &GenConfig {
                            n: 200,
                            seed: 200 + seed,
                            ..GenConfig::default()
                        },
                    )
                    .unwrap(),
                );
                let pipe = Pipeline::new(experiment_config(2, seed)).unwrap();
                let (base, _) = pipe.train_base(&train).unwrap();
                let r = pipe.evaluate(&base, &eval, 0).unwrap();
                println!(
                    "  seed {seed}: base mIoU {:.3} ({:.0?})",
                    r.miou_base,
                    t.elapsed()
                );
                SeedRun { train, eval, base }
            })
            .collect()
    })
}

/// New-class mIoU after the last step of `cfg`'s schedule.
fn final_new_miou(cfg: ExperimentConfig, run: &SeedRun) -> f64 {
    let pipe = Pipeline::new(cfg).unwrap();
    let mut model = run.base.clone();
    let steps = pipe.schedule.num_tasks();
    let mut out = String::new();
    for step in 1..steps {
        let bank = pipe.memory_for(&run.train, step).unwrap();
        model = pipe
            .train_step(&model, step, &run.train, bank.as_ref())
            .unwrap()
            .0;
        let r = pipe.evaluate(&model, &run.eval, step).unwrap();
        out += &format!(
            " s{step} base {:.3} new {:.3};",
            r.miou_base,
            r.miou_new.unwrap()
        );
    }
    println!("   {out}");
    pipe.evaluate(&model, &run.eval, steps - 1)
        .unwrap()
        .miou_new
        .unwrap()
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn fmt(v: &[f64]) -> String {
    v.iter()
        .map(|x| format!("{x:.3}"))
        .collect::<Vec<_>>()
        .join(" ")
}

#[test]
fn directional_multi_step() {
    let t = Instant::now();
    let mut per_lambda = Vec::new();
    for lambda in [0.0, 1.0] {
        let vals: Vec<f64> = SEEDS
            .iter()
            .zip(seed_runs())
            .map(|(&seed, run)| {
                println!("  4-2 lambda {lambda} seed {seed}:");
                let mut cfg = experiment_config(2, seed);
                cfg.loss.lambda_rasp = lambda;
                final_new_miou(cfg, run)
            })
            .collect();
        per_lambda.push(vals);
    }
    let (off, on) = (mean(&per_lambda[0]), mean(&per_lambda[1]));
    experiment_verdict(
        "directional-A (4-2, prior on vs off)",
        on > off,
        &format!(
            "mean new-class mIoU lambda=1 {on:.4} [{}] vs lambda=0 {off:.4} [{}], margin {:+.4} ({:.0?})",
            fmt(&per_lambda[1]),
            fmt(&per_lambda[0]),
            on - off,
            t.elapsed()
        ),
    );
}

#[test]
fn directional_memory() {
    let t = Instant::now();
    let mut lines = Vec::new();
    let mut pass = true;
    for lambda in [0.0, 1.0] {
        let mut means = Vec::new();
        for memory in [MemoryKind::None, MemoryKind::Episodic] {
            let vals: Vec<f64> = SEEDS
                .iter()
                .zip(seed_runs())
                .map(|(&seed, run)| {
                    println!("  4-1 lambda {lambda} memory {memory:?} seed {seed}:");
                    let mut cfg = experiment_config(1, seed);
                    cfg.loss.lambda_rasp = lambda;
                    cfg.memory.kind = memory;
                    cfg.memory.capacity = 40;
                    final_new_miou(cfg, run)
                })
                .collect();
            means.push((mean(&vals), fmt(&vals)));
        }
        pass &= means[1].0 > means[0].0;
        lines.push(format!(
            "lambda={lambda}: memory {:.4} [{}] vs none {:.4} [{}]",
            means[1].0, means[1].1, means[0].0, means[0].1
        ));
    }
    experiment_verdict(
        "directional-B (4-1, episodic memory 40 vs none)",
        pass,
        &format!("{}; ({:.0?})", lines.join("; "), t.elapsed()),
    );
}
