//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! nonzero if any criterion fails.

#[path = "../../core/tests/common/mod.rs"]
mod common;

use std::panic::{self, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::{Duration, Instant};

use avgzsl_core::ablation::{ablate, format_table, AblationRow};
use avgzsl_core::data::{load_dataset, Dataset};
use avgzsl_core::eval::{eval_classification, gzsl_retrieval_eval, harmonic_mean, write_embeddings, EvalReport, ModalityCondition};
use avgzsl_core::gradcheck::{run_grad_check, GRAD_CHECK_TOL};
use avgzsl_core::losses::{mse_distance, total_loss, triplet_hinge, LossConfig, LossTerm, TuplePair};
use avgzsl_core::model::{init_params, load_checkpoint, save_checkpoint, ArchitectureSpec, ModelParams};
use avgzsl_core::train::{train, TrainConfig, TrainLog};
use proptest::collection::vec;
use proptest::prelude::*;
use proptest::test_runner::{Config, TestRunner};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const SEEDS: [u64; 5] = [1, 2, 3, 7, 11];
const CHANCE_MULTIPLE: f64 = 3.0;
const ROBUSTNESS_SLACK: f64 = 2.0;

type Outcome = Result<String, String>;

fn check(cond: bool, msg: impl Into<String>) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg.into())
    }
}

fn run_criterion(name: &str, f: impl FnOnce() -> Outcome) -> bool {
    let start = Instant::now();
    let result = match panic::catch_unwind(AssertUnwindSafe(f)) {
        Ok(r) => r,
        Err(e) => Err(e
            .downcast_ref::<String>()
            .cloned()
            .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
            .unwrap_or_else(|| "panicked".to_string())),
    };
    let secs = start.elapsed().as_secs_f64();
    match &result {
        Ok(detail) => println!("PASS  {name}: {detail} ({secs:.1}s)"),
        Err(detail) => println!("FAIL  {name}: {detail} ({secs:.1}s)"),
    }
    result.is_ok()
}

fn metric_arithmetic() -> Outcome {
    let cls = harmonic_mean(46.04, 33.80);
    let ret = harmonic_mean(72.25, 6.91);
    check((cls - 38.98).abs() <= 0.01, format!("classification HM {cls:.4}"))?;
    check((ret - 12.61).abs() <= 0.01, format!("retrieval HM {ret:.4}"))?;
    Ok(format!("HM(46.04,33.80)={cls:.4} HM(72.25,6.91)={ret:.4}"))
}

fn gradient_suite() -> Outcome {
    let start = Instant::now();
    let rows = run_grad_check(1, 10, 8).map_err(|e| e.to_string())?;
    let elapsed = start.elapsed();
    check(rows.len() == 8, format!("{} configurations", rows.len()))?;
    let worst = rows.iter().map(|r| r.max_rel_err).fold(0.0, f64::max);
    for r in &rows {
        check(r.max_rel_err < GRAD_CHECK_TOL, format!("{} max_rel_err={:e}", r.label, r.max_rel_err))?;
    }
    check(elapsed < Duration::from_secs(120), format!("took {elapsed:?}"))?;
    Ok(format!("8 configs x 10 batches x 8 pairs, max_rel_err={worst:.2e} < 1e-4"))
}

fn runner() -> TestRunner {
    TestRunner::new(Config {
        cases: 1000,
        failure_persistence: None,
        ..Config::default()
    })
}

fn err<T: std::fmt::Debug>(name: &str) -> impl Fn(proptest::test_runner::TestError<T>) -> String + '_ {
    move |e| format!("{name}: {e}")
}

fn loss_invariants() -> Outcome {
    // Dyadic inputs make the equality checks exact statements.
    runner()
        .run(&(0u32..8192, 0u32..8192, 0u32..4096), |(dp, dn, m)| {
            let (dp, dn, m) = (dp as f64 / 1024.0, dn as f64 / 1024.0, m as f64 / 1024.0);
            let h = triplet_hinge(dp, dn, m);
            prop_assert!(h >= 0.0);
            prop_assert_eq!(h == 0.0, dn >= dp + m);
            prop_assert_eq!(triplet_hinge(dp, dp, m), m);
            Ok(())
        })
        .map_err(err("hinge zero/margin"))?;
    runner()
        .run(&(0.0f64..5.0, 0.0f64..5.0, 0.0f64..3.0, 0.0f64..2.0), |(dp, dn, m, step)| {
            prop_assert!(triplet_hinge(dp + step, dn, m) >= triplet_hinge(dp, dn, m));
            prop_assert!(triplet_hinge(dp, dn + step, m) <= triplet_hinge(dp, dn, m));
            Ok(())
        })
        .map_err(err("hinge monotonicity"))?;
    runner()
        .run(&(vec(-10.0f64..10.0, 1..40), any::<u64>()), |(u, seed)| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let v: Vec<f64> = u.iter().map(|_| rng.random_range(-10.0..10.0)).collect();
            prop_assert_eq!(mse_distance(&u, &v).unwrap(), mse_distance(&v, &u).unwrap());
            prop_assert_eq!(mse_distance(&u, &u).unwrap(), 0.0);
            Ok(())
        })
        .map_err(err("mse symmetry/identity"))?;
    runner()
        .run(&(any::<u64>(), 0u8..128, 1usize..5, 0.0f64..2.0), |(seed, mask, pairs, margin)| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let p = init_params(common::arch(), seed).unwrap();
            let owned: Vec<common::Owned> = (0..2 * pairs)
                .map(|i| {
                    let mut v = |n: usize| -> Vec<f64> { (0..n).map(|_| rng.random_range(-1.0..1.0)).collect() };
                    (v(5), v(4), v(3), (i % 2) as u32)
                })
                .collect();
            let batch: Vec<TuplePair<'_>> = owned
                .chunks(2)
                .map(|c| TuplePair::new(common::view(&c[0]), common::view(&c[1])).unwrap())
                .collect();
            let mut cfg = LossConfig {
                margin,
                ..LossConfig::all_off()
            };
            for (i, t) in LossTerm::ALL.into_iter().enumerate() {
                cfg.set(t, mask & (1 << i) != 0);
            }
            let (total, r) = total_loss(&batch, &p, &cfg).unwrap();
            prop_assert_eq!(r.l_cmd, r.l_rec + r.l_cta + r.l_ctv);
            prop_assert_eq!(r.l_ct, r.l_tv + r.l_vt + r.l_ta + r.l_at);
            prop_assert_eq!(r.total, r.l_cmd + r.l_ct);
            prop_assert_eq!(total, r.total);
            Ok(())
        })
        .map_err(err("report sums"))?;
    Ok("hinge zero/margin, hinge monotonicity, mse symmetry/identity, report sums: 1000 cases each".to_string())
}

fn oracle_equivalence() -> Outcome {
    let n = common::check_average_precision_exhaustive(8);
    common::check_retrieve_against_sort(50, 100);
    let gap = common::total_loss_loop_gap(50);
    check(gap < 1e-12, format!("total_loss vs per-pair loop gap {gap:e}"))?;
    Ok(format!(
        "AP on all {n} sequences of length <= 8; 50 galleries of <= 100 records; loss gap {gap:.1e} < 1e-12"
    ))
}

struct SeedRun {
    seed: u64,
    ckpt: PathBuf,
    params: ModelParams,
    log: TrainLog,
    reports: Vec<EvalReport>,
}

impl SeedRun {
    fn report(&self, cond: ModalityCondition) -> &EvalReport {
        self.reports.iter().find(|r| r.condition == cond).unwrap()
    }
}

fn avgzsl(args: &[&str]) -> Result<String, String> {
    let o = Command::new(env!("CARGO_BIN_EXE_avgzsl"))
        .args(args)
        .env("AVGZSL_LOG", "quiet")
        .output()
        .map_err(|e| e.to_string())?;
    if !o.status.success() {
        return Err(format!("avgzsl {args:?}: {}", String::from_utf8_lossy(&o.stderr).trim()));
    }
    Ok(String::from_utf8_lossy(&o.stdout).trim_end().to_string())
}

fn arch_for(d: &Dataset) -> ArchitectureSpec {
    let dims = d.dims();
    ArchitectureSpec::for_features(dims.audio, dims.video, dims.text)
}

/// Generates the synthetic dataset through the binary, trains one model per
/// seed and evaluates each under all three modality conditions, both
/// in-process and through `eval-cls`.
fn e2e_runs(dir: &Path) -> Result<(Dataset, Vec<SeedRun>), String> {
    let stem = dir.join("toy");
    let stem_s = stem.to_str().unwrap();
    avgzsl(&[
        "gen-data", "--seen", "8", "--unseen", "4", "--per-class", "50", "--sigma", "0.1", "--seed", "7", "--out", stem_s,
    ])?;
    let data = load_dataset(&stem).map_err(|e| e.to_string())?;
    let mut runs = Vec::new();
    for seed in SEEDS {
        let cfg = TrainConfig {
            seed,
            ..TrainConfig::default()
        };
        let (params, log) = train(&data, arch_for(&data), &cfg).map_err(|e| e.to_string())?;
        let ckpt = dir.join(format!("seed{seed}.avzc"));
        save_checkpoint(&params, &ckpt).map_err(|e| e.to_string())?;
        let mut reports = Vec::new();
        for cond in ModalityCondition::ALL {
            let r = eval_classification(&params, &data.manifest, &data.splits.test, cond).map_err(|e| e.to_string())?;
            let line = avgzsl(&[
                "eval-cls", "--ckpt", ckpt.to_str().unwrap(), "--data", stem_s, "--modality", cond.name(),
            ])?;
            check(line == r.summary_line(), format!("seed {seed} {cond}: cli {line:?} vs {:?}", r.summary_line()))?;
            reports.push(r);
        }
        runs.push(SeedRun {
            seed,
            ckpt,
            params,
            log,
            reports,
        });
    }
    Ok((data, runs))
}

fn end_to_end(runs: &[SeedRun]) -> Outcome {
    let chance = 100.0 / 12.0;
    let mut passed = 0;
    let mut parts = Vec::new();
    for r in runs {
        let b = r.report(ModalityCondition::Both);
        check(b.per_class.len() == 12, format!("seed {}: {} classes evaluated", r.seed, b.per_class.len()))?;
        let ok = b.unseen >= CHANCE_MULTIPLE * chance && b.hm > 0.0;
        passed += ok as usize;
        parts.push(format!("seed{}:U={:.2},HM={:.2}{}", r.seed, b.unseen, b.hm, if ok { "" } else { "(miss)" }));
    }
    let detail = format!("{passed}/5 seeds with U >= 25.00 and HM > 0 [{}]", parts.join(" "));
    check(passed >= 4, detail.clone())?;
    Ok(detail)
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    v[v.len() / 2]
}

fn modality_robustness(runs: &[SeedRun]) -> Outcome {
    let hm = |c: ModalityCondition| runs.iter().map(|r| r.report(c).hm).collect::<Vec<_>>();
    let both = median(hm(ModalityCondition::Both));
    let audio = median(hm(ModalityCondition::AudioOnly));
    let video = median(hm(ModalityCondition::VideoOnly));
    let best_per_seed = median(
        runs.iter()
            .map(|r| r.report(ModalityCondition::AudioOnly).hm.max(r.report(ModalityCondition::VideoOnly).hm))
            .collect(),
    );
    let detail = format!(
        "median HM both={both:.2} audio={audio:.2} video={video:.2} best-single-per-seed={best_per_seed:.2}"
    );
    check(both >= best_per_seed - ROBUSTNESS_SLACK, detail.clone())?;
    check(both >= audio.max(video) - ROBUSTNESS_SLACK, detail.clone())?;
    Ok(detail)
}

fn embeddings_text(p: &ModelParams, d: &Dataset) -> Vec<u8> {
    let mut out = Vec::new();
    write_embeddings(p, &d.splits.test, &d.manifest, &mut out).unwrap();
    out
}

fn determinism(data: &Dataset, first: &SeedRun) -> Outcome {
    let cfg = TrainConfig {
        seed: first.seed,
        ..TrainConfig::default()
    };
    let (params, log) = train(data, arch_for(data), &cfg).map_err(|e| e.to_string())?;
    check(params.bit_eq(&first.params), "retrained checkpoint differs")?;
    check(log == first.log && log.to_text() == first.log.to_text(), "retrained log differs")?;

    let loaded = load_checkpoint(&first.ckpt).map_err(|e| e.to_string())?;
    check(loaded.bit_eq(&first.params), "checkpoint round trip changed parameters")?;
    let mut compared = 0;
    for cond in ModalityCondition::ALL {
        let a = eval_classification(&loaded, &data.manifest, &data.splits.test, cond).unwrap();
        check(&a == first.report(cond), format!("{cond} classification differs after reload"))?;
        let r0 = gzsl_retrieval_eval(&first.params, &data.manifest, &data.splits.test, cond).unwrap();
        let r1 = gzsl_retrieval_eval(&loaded, &data.manifest, &data.splits.test, cond).unwrap();
        check(r0 == r1, format!("{cond} retrieval differs after reload"))?;
        compared += 2;
    }
    check(embeddings_text(&loaded, data) == embeddings_text(&first.params, data), "embeddings differ after reload")?;
    Ok(format!(
        "seed {} retrain: {} log lines and params bit-identical; reload: {compared} eval reports and embeddings identical",
        first.seed,
        log.to_text().lines().count()
    ))
}

fn ablation_harness(data: &Dataset, first: &SeedRun) -> Outcome {
    let base = TrainConfig {
        seed: first.seed,
        ..TrainConfig::default()
    };
    let results = ablate(data, arch_for(data), &base, ModalityCondition::Both, false).map_err(|e| e.to_string())?;
    let rows: Vec<AblationRow> = results.iter().map(|r| r.row).collect();
    check(rows == AblationRow::grid(), format!("rows {rows:?}"))?;
    let full = results.last().unwrap();
    check(full.params.bit_eq(&first.params), "full row params differ from standalone run")?;
    check(&full.report == first.report(ModalityCondition::Both), "full row report differs from standalone run")?;
    let table = format_table(&results);
    for line in table.lines() {
        println!("      {line}");
    }
    let mut order: Vec<(String, f64)> = results.iter().map(|r| (r.row.label(), r.report.hm)).collect();
    order.sort_by(|a, b| b.1.total_cmp(&a.1));
    let order: Vec<String> = order.into_iter().map(|(l, _)| l).collect();
    Ok(format!("8 rows, full row bit-identical to standalone; HM order {}", order.join(" > ")))
}

fn main() {
    let mut results = Vec::new();
    results.push(run_criterion("metric arithmetic", metric_arithmetic));
    results.push(run_criterion("gradient suite", gradient_suite));
    results.push(run_criterion("loss invariants", loss_invariants));
    results.push(run_criterion("oracle equivalence", oracle_equivalence));

    let dir = tempfile::tempdir().expect("tempdir");
    let start = Instant::now();
    let e2e = panic::catch_unwind(AssertUnwindSafe(|| e2e_runs(dir.path())))
        .unwrap_or_else(|_| Err("training panicked".to_string()));
    let train_secs = start.elapsed().as_secs_f64();
    match &e2e {
        Ok(_) => println!("      trained and evaluated {} seeds in {train_secs:.1}s", SEEDS.len()),
        Err(e) => println!("      end-to-end setup failed: {e}"),
    }
    let setup_err = |e: &String| -> Outcome { Err(format!("setup failed: {e}")) };
    match &e2e {
        Ok((data, runs)) => {
            results.push(run_criterion("end-to-end synthetic GZSL", || end_to_end(runs)));
            results.push(run_criterion("modality robustness", || modality_robustness(runs)));
            results.push(run_criterion("determinism and persistence", || determinism(data, &runs[0])));
            results.push(run_criterion("ablation harness", || ablation_harness(data, &runs[0])));
        }
        Err(e) => {
            for name in ["end-to-end synthetic GZSL", "modality robustness", "determinism and persistence", "ablation harness"] {
                results.push(run_criterion(name, || setup_err(e)));
            }
        }
    }

    let passed = results.iter().filter(|&&ok| ok).count();
    println!("acceptance: {passed}/{} criteria passed", results.len());
    if passed != results.len() {
        std::process::exit(1);
    }
}
