//! End-to-end acceptance checks. Criteria run in order inside one test so
//! that the timed ones do not share the core with anything else. Every
//! criterion prints one `PASS`/`FAIL` line.
//!
//! Criteria 5 and 6 are directional experimental findings rather than
//! correctness properties. Their verdicts are printed and written to
//! `target/acceptance_report.txt`; only their time budgets are asserted.

mod common;

use std::fmt::Write as _;
use std::io::Write as _;
use std::time::{Duration, Instant};

use rand::Rng;
use vqd_core::diagnostics::EpochRecord;
use vqd_core::gradsuite::{run_suite, SuiteOptions};
use vqd_core::matching::{hungarian, CostMatrix};
use vqd_core::model::{overall_loss, Detector, DetectorConfig, LossWeights};
use vqd_core::numerics::{Graph, Tensor};
use vqd_core::scenes::{ap40, generate_dataset, save_dataset, Scene, SceneConfig};
use vqd_core::train::{train, OptimizerConfig, RunDir, TrainConfig, TrainingMode};

const GRID: usize = 8;
const EPOCHS: usize = 40;
const TRAIN_SCENES: usize = 500;
const VAL_SCENES: usize = 200;
const SEEDS: u64 = 5;
const FIG3_SEEDS: u64 = 3;
const RUN_BUDGET: Duration = Duration::from_secs(15 * 60);
const TABLE_BUDGET: Duration = Duration::from_secs(90 * 60);

/// Writes straight to stdout so the lines survive the test harness's output
/// capture and appear in a plain `cargo test` log.
fn emit(line: &str) {
    let mut out = std::io::stdout().lock();
    let _ = writeln!(out, "{line}");
    let _ = out.flush();
}

struct Verdict {
    id: usize,
    passed: bool,
    detail: String,
    gating: bool,
}

fn detector_config() -> DetectorConfig {
    DetectorConfig { grid_size: GRID, width: 32, queries_per_group: 8, layers: 3, heads: 2, ..DetectorConfig::default() }
}

fn scene_config() -> SceneConfig {
    SceneConfig { grid_size: GRID, ..SceneConfig::default() }
}

fn gradient_suite() -> Verdict {
    let start = Instant::now();
    let results = run_suite(&SuiteOptions::default()).expect("suite runs");
    let elapsed = start.elapsed();
    let failed: Vec<_> = results.iter().filter(|r| !r.passed()).map(|r| r.name).collect();
    let worst = results.iter().map(|r| r.max_rel_error / r.tolerance).fold(0.0, f64::max);
    Verdict {
        id: 1,
        passed: failed.is_empty() && elapsed < Duration::from_secs(120),
        detail: format!("{} checks, worst error/tolerance {worst:.3}, {:.1}s (limit 120s), failed {failed:?}", results.len(), elapsed.as_secs_f64()),
        gating: true,
    }
}

fn oracles() -> Verdict {
    let mut r = common::rng(2024);
    let mut hungarian_bad = 0;
    for _ in 0..1000 {
        let (n, m) = (r.random_range(1..=7), r.random_range(1..=7));
        let cost = CostMatrix::new(n, m, (0..n * m).map(|_| r.random_range(-5.0..10.0)).collect());
        if (hungarian(&cost).total_cost - common::brute_force_assignment(&cost)).abs() > 1e-9 {
            hungarian_bad += 1;
        }
    }
    let mut worst_iou = 0.0f64;
    for _ in 0..200 {
        let a = common::random_box(&mut r);
        let b = common::nearby_box(&mut r, &a);
        let mc = common::monte_carlo_iou3d(&a, &b, 1_000_000, &mut r);
        worst_iou = worst_iou.max((vqd_core::geometry::iou3d(&a, &b) - mc).abs());
    }
    let (dets, gts) = common::four_detection_case();
    let ap = ap40(&dets, &gts, 0.5).unwrap();
    Verdict {
        id: 2,
        passed: hungarian_bad == 0 && worst_iou <= 5e-3 && ap == common::FOUR_DETECTION_AP,
        detail: format!(
            "hungarian mismatches {hungarian_bad}/1000, iou3d max |err| {worst_iou:.2e} (limit 5e-3), ap40 {ap} vs {}",
            common::FOUR_DETECTION_AP
        ),
        gating: true,
    }
}

fn mask_invariants() -> Verdict {
    let mut bad = Vec::new();
    for seed in 0..100 {
        let rep = common::mask_report(1000 + seed);
        if rep.leakage != 0.0 || rep.cross_group != 0.0 || rep.pattern_violations != 0 || rep.row_sum_error > 1e-12 {
            bad.push(seed);
        }
    }
    Verdict { id: 3, passed: bad.is_empty(), detail: format!("100 configurations, violating seeds {bad:?}"), gating: true }
}

fn inference_parity(scenes: &[Scene]) -> Verdict {
    let base = detector_config();
    let (_, reference) = Detector::new(base.clone(), 5).unwrap();
    let mut r = common::rng(5);
    let weights: Vec<(String, Tensor)> = reference
        .iter()
        .map(|(name, t)| {
            let data = t.data().iter().map(|v| v + r.random_range(-0.05..0.05)).collect();
            (name.to_string(), Tensor::new(t.shape().to_vec(), data).unwrap())
        })
        .collect();
    let outputs: Vec<Vec<_>> = TrainingMode::ALL
        .iter()
        .map(|m| {
            let mut cfg = base.clone();
            m.apply(&mut cfg);
            let (det, mut store) = Detector::new(cfg, 5).unwrap();
            store.assign(weights.clone()).unwrap();
            scenes.iter().map(|s| det.predict(&store, s).unwrap()).collect()
        })
        .collect();
    let same = outputs.iter().all(|o| o == &outputs[0]);
    Verdict { id: 4, passed: same, detail: format!("{} scenes x 4 modes, bit-identical: {same}", scenes.len()), gating: true }
}

fn unit_values() -> Verdict {
    let mut g = Graph::new();
    let kl = |g: &mut Graph, mu: f64, lv: f64| {
        let m = g.constant(Tensor::scalar(mu));
        let l = g.constant(Tensor::scalar(lv));
        let v = g.gaussian_kl(m, l).unwrap();
        g.scalar(v)
    };
    let values = [
        ("gaussian_kl(0,0)", kl(&mut g, 0.0, 0.0), 0.0),
        ("gaussian_kl(1,0)", kl(&mut g, 1.0, 0.0), 0.5),
        ("smooth_l1(0.5)", vqd_core::numerics::graph::smooth_l1_scalar(0.5), 0.125),
        ("smooth_l1(2)", vqd_core::numerics::graph::smooth_l1_scalar(2.0), 1.5),
        ("overall_loss(2,1,4)", overall_loss(2.0, 1.0, 4.0, &LossWeights::default()), 5.0),
    ];
    let bad: Vec<_> = values.iter().filter(|(_, got, want)| (got - want).abs() > 1e-12).map(|v| v.0).collect();
    Verdict { id: 7, passed: bad.is_empty(), detail: format!("{} values, off by more than 1e-12: {bad:?}", values.len()), gating: true }
}

fn reproducibility() -> Verdict {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = TrainConfig {
        detector: DetectorConfig { grid_size: 6, width: 8, queries_per_group: 4, layers: 2, heads: 2, ..DetectorConfig::default() },
        optimizer: OptimizerConfig { epochs: 3, batch_size: 4, ..OptimizerConfig::default() },
        seed: 3,
        eval_iou: 0.5,
    };
    let scenes = SceneConfig { grid_size: 6, ..SceneConfig::default() };
    let run = |name: &str| {
        let tr = generate_dataset(&scenes, 24, 0);
        let va = generate_dataset(&scenes, 8, 1 << 32);
        let data = tmp.path().join(format!("{name}.jsonl"));
        save_dataset(&tr, &data).unwrap();
        let dir = RunDir::create(&tmp.path().join(name)).unwrap();
        train(&cfg, &tr, &va, Some((&dir, "seed = 3\n")), |_| {}).unwrap();
        [std::fs::read(data).unwrap(), std::fs::read(dir.metrics()).unwrap(), std::fs::read(dir.checkpoint()).unwrap()]
    };
    let (a, b) = (run("a"), run("b"));
    let same = a == b;
    Verdict { id: 8, passed: same, detail: format!("dataset, metrics.csv and checkpoint byte-identical: {same}"), gating: true }
}

struct RunResult {
    mode: TrainingMode,
    seed: u64,
    final_record: EpochRecord,
    elapsed: Duration,
}

fn training_runs(train_set: &[Scene], val_set: &[Scene]) -> Vec<RunResult> {
    let mut out = Vec::new();
    for seed in 0..SEEDS {
        for mode in TrainingMode::ALL {
            let mut detector = detector_config();
            mode.apply(&mut detector);
            let cfg = TrainConfig { detector, optimizer: OptimizerConfig { epochs: EPOCHS, ..OptimizerConfig::default() }, seed, eval_iou: 0.5 };
            let start = Instant::now();
            let outcome = train(&cfg, train_set, val_set, None, |_| {}).expect("training run");
            let elapsed = start.elapsed();
            let final_record = outcome.records.last().cloned().expect("at least one epoch");
            emit(&format!(
                "  run {mode} seed {seed}: neg_entropy {:.4} mass {:.4} val AP40 {:.4} ({:.0}s)",
                final_record.neg_entropy,
                final_record.noisy_learnable_mass,
                final_record.val_ap40,
                elapsed.as_secs_f64()
            ));
            out.push(RunResult { mode, seed, final_record, elapsed });
        }
    }
    out
}

fn find(runs: &[RunResult], mode: TrainingMode, seed: u64) -> &RunResult {
    runs.iter().find(|r| r.mode == mode && r.seed == seed).expect("run present")
}

fn entropy_trend(runs: &[RunResult]) -> Verdict {
    let mut pairs = 0;
    let mut detail = String::new();
    for seed in 0..FIG3_SEEDS {
        let ae = &find(runs, TrainingMode::FldDn, seed).final_record;
        let vqd = &find(runs, TrainingMode::FldVdn, seed).final_record;
        let ok = ae.neg_entropy > vqd.neg_entropy && ae.noisy_learnable_mass < vqd.noisy_learnable_mass;
        pairs += usize::from(ok);
        let _ = write!(
            detail,
            "seed {seed}: AE ({:.4}, {:.4}) VQD ({:.4}, {:.4}) {}; ",
            ae.neg_entropy,
            ae.noisy_learnable_mass,
            vqd.neg_entropy,
            vqd.noisy_learnable_mass,
            if ok { "ok" } else { "reversed" }
        );
    }
    let slowest = runs.iter().filter(|r| r.seed < FIG3_SEEDS).map(|r| r.elapsed).max().unwrap_or_default();
    let _ = write!(detail, "{pairs}/{FIG3_SEEDS} pairs, slowest run {:.0}s (limit 900s)", slowest.as_secs_f64());
    Verdict { id: 5, passed: pairs == FIG3_SEEDS as usize && slowest <= RUN_BUDGET, detail, gating: false }
}

fn ablation_order(runs: &[RunResult]) -> Verdict {
    let means: Vec<f64> = TrainingMode::ALL
        .iter()
        .map(|&m| (0..SEEDS).map(|s| find(runs, m, s).final_record.val_ap40).sum::<f64>() / SEEDS as f64)
        .collect();
    let inversions = means.windows(2).filter(|w| w[0] > w[1]).count();
    let total: Duration = runs.iter().map(|r| r.elapsed).sum();
    let passed = means[0] < means[3] && inversions <= 1 && total <= TABLE_BUDGET;
    Verdict {
        id: 6,
        passed,
        detail: format!(
            "mean AP40 baseline {:.4} fld {:.4} fld+dn {:.4} fld+vdn {:.4}, {inversions} adjacent inversions, total {:.1} min (limit 90)",
            means[0],
            means[1],
            means[2],
            means[3],
            total.as_secs_f64() / 60.0
        ),
        gating: false,
    }
}

#[test]
fn acceptance() {
    let mut verdicts = vec![gradient_suite(), oracles(), mask_invariants()];
    let val_set = generate_dataset(&scene_config(), VAL_SCENES, 1 << 32);
    verdicts.push(inference_parity(&val_set[..50]));
    verdicts.push(unit_values());
    verdicts.push(reproducibility());

    let train_set = generate_dataset(&scene_config(), TRAIN_SCENES, 0);
    let runs = training_runs(&train_set, &val_set);
    verdicts.push(entropy_trend(&runs));
    verdicts.push(ablation_order(&runs));
    verdicts.sort_by_key(|v| v.id);

    let mut report = String::new();
    for v in &verdicts {
        let _ = writeln!(report, "criterion {}: {} | {}", v.id, if v.passed { "PASS" } else { "FAIL" }, v.detail);
    }
    emit(report.trim_end());
    let path = std::path::Path::new(env!("CARGO_MANIFEST_DIR")).join("../../target/acceptance_report.txt");
    std::fs::write(path, &report).unwrap();

    let total: Duration = runs.iter().map(|r| r.elapsed).sum();
    let slowest = runs.iter().map(|r| r.elapsed).max().unwrap_or_default();
    assert!(slowest <= RUN_BUDGET && total <= TABLE_BUDGET, "training budget exceeded");
    let failed: Vec<_> = verdicts.iter().filter(|v| v.gating && !v.passed).map(|v| v.id).collect();
    assert!(failed.is_empty(), "failed criteria {failed:?}");
}
