//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any criterion fails.
//!
//! Run alone with `cargo test --release -p exitcascade-cli --test acceptance`.

#[path = "../../core/tests/common/mod.rs"]
mod common;

use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

use common::{brute_force_ap, epsilon_high_precision, finite_difference_mismatches, hand_cost, reference_order, Instance};
use exitcascade::dataset::{generate_synthetic, LabelSpec, SyntheticConfig};
use exitcascade::engine::{infer, CostModel, EngineConfig, ExitTrace};
use exitcascade::eval::{
    average_precision, compare_fixed_vs_adaptive, exit_matrix, fixed_budget_curve, mean_average_precision, sweep_beta,
};
use exitcascade::model::{gradients, LossSpec, Objective};
use exitcascade::trainer::{epsilon_schedule, pseudo_labels, train_classifiers, PreparedSet};
use exitcascade::{
    sample_order, CascadeModel, ClipMode, ModelDims, PolicyKind, PooledState, PoolingKind, Settings, VideoFeatures,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Check = Result<String, String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn c1_sampler() -> Check {
    let start = Instant::now();
    let hand: [(usize, &[usize]); 4] = [
        (1, &[1]),
        (3, &[2, 1, 3]),
        (5, &[3, 1, 5, 2, 4]),
        (10, &[5, 1, 10, 3, 7, 2, 4, 6, 8, 9]),
    ];
    for (n, want) in hand {
        let got = sample_order(n, PolicyKind::CoarseToFine).map_err(|e| e.to_string())?;
        ensure(got.as_slice() == want, || format!("N={n}: {:?} != {want:?}", got.as_slice()))?;
    }
    for n in 1..=256 {
        let got = sample_order(n, PolicyKind::CoarseToFine).map_err(|e| e.to_string())?.into_vec();
        let mut sorted = got.clone();
        sorted.sort_unstable();
        ensure(sorted == (1..=n).collect::<Vec<_>>(), || format!("N={n}: not a permutation"))?;
        if n >= 3 {
            ensure(got[..3] == [n.div_ceil(2), 1, n], || format!("N={n}: prefix {:?}", &got[..3]))?;
        }
        ensure(got == reference_order(n), || format!("N={n}: differs from reference"))?;
    }
    let took = start.elapsed();
    ensure(took < Duration::from_secs(1), || format!("took {took:?}"))?;
    Ok(format!("N in 1..=256 checked in {took:?}"))
}

fn c2_gradients() -> Check {
    let start = Instant::now();
    let mut entries = 0;
    for seed in 0..20 {
        let inst = Instance::random(seed);
        let batch = inst.batch();
        for objective in [Objective::Classification, Objective::Gating { beta: inst.beta }] {
            let spec = LossSpec { objective, variant: inst.variant };
            let (_, grads) = gradients(&inst.model, &batch, spec).map_err(|e| e.to_string())?;
            let flat = grads.to_flat();
            entries += flat.len();
            let bad = finite_difference_mismatches(&inst.model, &batch, spec, &flat, 1e-5, 1e-4, 1e-8);
            if let Some(m) = bad.first() {
                return Err(format!(
                    "seed {seed} {objective:?}: {} mismatches, first at {}: {} vs {}",
                    bad.len(),
                    m.index,
                    m.analytic,
                    m.numeric
                ));
            }
        }
    }
    let took = start.elapsed();
    ensure(took < Duration::from_secs(30), || format!("took {took:?}"))?;
    Ok(format!("{entries} gradient entries on 20 instances in {took:?}"))
}

fn c3_epsilon() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut worst: f64 = 0.0;
    for _ in 0..2000 {
        let beta = 10f64.powf(rng.random_range(-12.0..2.0));
        let t = rng.random_range(1..=64);
        let want = epsilon_high_precision(beta, t);
        let got = epsilon_schedule(beta, t);
        let rel = (got - want).abs() / want;
        worst = worst.max(rel);
        ensure(rel <= 1e-12, || format!("beta={beta} t={t}: {got} vs {want}"))?;
    }
    for _ in 0..100_000 {
        let loss = 10f64.powf(rng.random_range(-8.0..1.0));
        let beta = 10f64.powf(rng.random_range(-8.0..0.0));
        let t = rng.random_range(1..=16);
        let bigger = beta * 10f64.powf(rng.random_range(0.0..3.0));
        let at = |b: f64| pseudo_labels(&vec![loss; t + 1], b);
        let (small, large) = (at(beta), at(bigger));
        ensure(!small[t - 1].label || large[t - 1].label, || {
            format!("beta monotonicity: loss={loss} t={t} {beta} -> {bigger}")
        })?;
        ensure(!small[t - 1].label || small[t].label, || {
            format!("t monotonicity: loss={loss} beta={beta} t={t}")
        })?;
    }
    Ok(format!("worst relative error {worst:.2e}; 1e5 monotonicity triples"))
}

fn c4_cost() -> Check {
    let dims = ModelDims { features: 64, hidden: 256, categories: 10 };
    let mut m = CascadeModel::new(dims, 10, PoolingKind::Max, ClipMode::Pooled, 1).map_err(|e| e.to_string())?;
    let rows: Vec<Vec<f64>> = (0..30).map(|i| (0..64).map(|j| ((i * 64 + j) as f64).sin()).collect()).collect();
    let v = VideoFeatures::from_rows("v", &rows, LabelSpec::Single(0)).map_err(|e| e.to_string())?;
    let force = |m: &mut CascadeModel, at: Option<usize>| {
        for t in 1..=10 {
            let g = m.gate_mut(t);
            g.merge.weight_mut().iter_mut().for_each(|w| *w = 0.0);
            g.merge.bias_mut()[0] = if Some(t) == at { 40.0 } else { -40.0 };
        }
    };
    let with = EngineConfig {
        cost: CostModel { backbone_flops_per_frame: 4.12e9, include_head_gate_cost: true },
        ..EngineConfig::default()
    };
    let mut seen = Vec::new();
    for e in [1usize, 5, 10] {
        force(&mut m, Some(e));
        let tr = infer(&m, &v, &with).map_err(|e| e.to_string())?;
        let want = hand_cost(e as u64, 4_120_000_000, 64, 256, 10);
        ensure(tr.exit_timestep == e && tr.flops == want as f64, || {
            format!("exit {e}: got {} at t={}, want {want}", tr.flops, tr.exit_timestep)
        })?;
        seen.push(want);
    }
    force(&mut m, None);
    let without = EngineConfig {
        cost: CostModel { backbone_flops_per_frame: 4.12e9, include_head_gate_cost: false },
        ..EngineConfig::default()
    };
    let tr = infer(&m, &v, &without).map_err(|e| e.to_string())?;
    ensure(tr.flops == 41.2e9, || format!("no-exit cost {}", tr.flops))?;
    Ok(format!("{seen:?} and 41.2e9 without head/gate costs"))
}

/// Results shared by the benchmark criteria.
struct Benchmark {
    stage1_time: Duration,
    no_exit: f64,
    setup_error: Option<String>,
    c5: Check,
    c6: Check,
    c7: Check,
    c8: Check,
}

const SWEEP: [f64; 5] = [1e-6, 1e-5, 1e-4, 1e-3, 1e-2];
const OPERATING_BETA: f64 = 1e-3;

fn benchmark() -> Benchmark {
    let fail = |msg: String| Benchmark {
        stage1_time: Duration::ZERO,
        no_exit: f64::NAN,
        setup_error: Some(msg.clone()),
        c5: Err(msg.clone()),
        c6: Err(msg.clone()),
        c7: Err(msg.clone()),
        c8: Err(msg),
    };
    let mut settings = Settings {
        data: SyntheticConfig::default(),
        sweep_betas: SWEEP.to_vec(),
        ..Settings::default()
    };
    settings.train.learning_rate = 3e-3;
    let ds = match generate_synthetic(&settings.data) {
        Ok(d) => d,
        Err(e) => return fail(e.to_string()),
    };
    let (train, test) = (&ds.train, &ds.test);
    if train.len() != 5000 || test.len() != 1000 {
        return fail(format!("split is {}/{}", train.len(), test.len()));
    }
    let set = match PreparedSet::new(train, &settings.train) {
        Ok(s) => s,
        Err(e) => return fail(e.to_string()),
    };
    let start = Instant::now();
    let stage1 = match train_classifiers(&set, &settings.train) {
        Ok((m, _)) => m,
        Err(e) => return fail(e.to_string()),
    };
    let stage1_time = start.elapsed();
    let t = settings.train.timesteps;
    let no_exit = match fixed_budget_curve(&stage1, test, &settings, &[t]) {
        Ok(p) => p[0].metric.value,
        Err(e) => return fail(e.to_string()),
    };
    let points = match sweep_beta(&stage1, &set, test, &settings, &SWEEP) {
        Ok(p) => p,
        Err(e) => return fail(e.to_string()),
    };
    for p in &points {
        println!(
            "  beta {:e}: accuracy {:.4}, mean frames {:.3}, mean GFLOPs {:.2}",
            p.beta,
            p.report.metric.value,
            p.report.mean_exit_timestep,
            p.report.mean_flops / 1e9
        );
    }

    let stage1_ok = stage1_time < Duration::from_secs(600) && no_exit >= 0.90;
    let op = points.iter().find(|p| p.beta == OPERATING_BETA).expect("operating beta is swept");
    let c5 = (|| {
        ensure(stage1_ok, || format!("no-exit accuracy {no_exit:.4} after {stage1_time:?}"))?;
        let drop = no_exit - op.report.metric.value;
        let frames = op.report.mean_exit_timestep;
        ensure(drop <= 0.02 && frames <= 0.6 * t as f64, || {
            format!("beta {OPERATING_BETA:e}: accuracy drop {drop:.4}, mean frames {frames:.3}")
        })?;
        Ok(format!(
            "no-exit {no_exit:.4} in {:.1}s; beta {OPERATING_BETA:e}: {:.4} at {frames:.2} frames",
            stage1_time.as_secs_f64(),
            op.report.metric.value
        ))
    })();

    let c6 = (|| {
        let pairs: Vec<(f64, &CascadeModel)> = points.iter().map(|p| (p.beta, &p.model)).collect();
        let rows = compare_fixed_vs_adaptive(&pairs, test, &settings).map_err(|e| e.to_string())?;
        for r in &rows {
            ensure((r.adaptive_frames - r.fixed_frames).abs() <= 0.5, || {
                format!("beta {:e}: frames {} vs {}", r.beta, r.adaptive_frames, r.fixed_frames)
            })?;
            ensure(r.adaptive_metric >= r.fixed_metric, || {
                format!("beta {:e}: adaptive {} < fixed {}", r.beta, r.adaptive_metric, r.fixed_metric)
            })?;
        }
        let lowest = rows
            .iter()
            .min_by(|a, b| a.adaptive_frames.total_cmp(&b.adaptive_frames))
            .expect("non-empty sweep");
        let win = lowest.adaptive_metric - lowest.fixed_metric;
        ensure(win >= 0.02, || format!("lowest budget k={} wins by only {win:.4}", lowest.fixed_budget))?;
        Ok(format!("{} points; lowest budget k={} wins by {:.4}", rows.len(), lowest.fixed_budget, win))
    })();

    let c7 = (|| {
        let em = exit_matrix(&op.model, test, &settings).map_err(|e| e.to_string())?;
        let mut checked = 0;
        for exit in 2..=t {
            if em.cohort_sizes[exit - 1] < 30 {
                continue;
            }
            let (prev, cur) = (em.get(exit, exit - 1).unwrap_or(f64::NAN), em.get(exit, exit).unwrap_or(f64::NAN));
            ensure(prev <= cur - 0.05, || {
                format!("exit {exit} (n={}): classifier {} {prev:.4} vs {cur:.4}", em.cohort_sizes[exit - 1], exit - 1)
            })?;
            checked += 1;
        }
        ensure(checked > 0, || "no cohort at t >= 2 with 30 members".into())?;
        Ok(format!("{checked} cohorts checked at beta {OPERATING_BETA:e}"))
    })();

    let c8 = (|| {
        let first = &points[0].report;
        let last = &points[points.len() - 1].report;
        let ratio = last.mean_flops / first.mean_flops;
        ensure(ratio <= 0.75, || format!("FLOPs ratio {ratio:.4}"))?;
        for w in points.windows(2) {
            for (step, (a, b)) in w[0].positive_rate.iter().zip(&w[1].positive_rate).enumerate() {
                ensure(a <= b, || {
                    format!("positive rate at t={} drops from {a} to {b} ({:e} -> {:e})", step + 1, w[0].beta, w[1].beta)
                })?;
            }
        }
        Ok(format!("FLOPs ratio {ratio:.4}; positive rates monotone at every timestep"))
    })();

    Benchmark { stage1_time, no_exit, setup_error: None, c5, c6, c7, c8 }
}

const SMALL_CONFIG: &str = "\
data.videos = 240
data.test_videos = 60
data.frames = 12
data.dim = 16
model.timesteps = 6
model.hidden = 32
train.learning_rate = 3e-3
train.stage1_epochs = 3
train.stage1_decay_epochs = 2
train.stage2_epochs = 2
train.stage2_decay_epochs = 1
train.beta = 1e-3
";

fn cli(args: &[&str]) -> Result<(), String> {
    let out = Command::new(env!("CARGO_BIN_EXE_exitcascade"))
        .args(args)
        .output()
        .map_err(|e| e.to_string())?;
    ensure(out.status.success(), || {
        format!("`{}` failed: {}", args.join(" "), String::from_utf8_lossy(&out.stderr))
    })
}

fn run_pipeline(root: &Path) -> Result<(), String> {
    let p = |s: &str| root.join(s).to_string_lossy().into_owned();
    std::fs::write(root.join("run.cfg"), SMALL_CONFIG).map_err(|e| e.to_string())?;
    cli(&["gen", "-c", &p("run.cfg"), "-o", &p("data")])?;
    cli(&["train", "-c", &p("run.cfg"), "--train", &p("data/train.tsv"), "-o", &p("run")])?;
    cli(&[
        "eval",
        "-c",
        &p("run.cfg"),
        "--checkpoint",
        &p("run/model.ckpt"),
        "--data",
        &p("data/test.tsv"),
        "-o",
        &p("eval"),
    ])
}

fn c9_determinism() -> Check {
    let a = tempfile::tempdir().map_err(|e| e.to_string())?;
    let b = tempfile::tempdir().map_err(|e| e.to_string())?;
    run_pipeline(a.path())?;
    run_pipeline(b.path())?;
    let files = [
        "run/stage1.ckpt",
        "run/model.ckpt",
        "run/train_log.csv",
        "eval/report.csv",
        "eval/report.json",
        "eval/traces.jsonl",
        "eval/histogram.csv",
    ];
    for f in files {
        let x = std::fs::read(a.path().join(f)).map_err(|e| format!("{f}: {e}"))?;
        let y = std::fs::read(b.path().join(f)).map_err(|e| format!("{f}: {e}"))?;
        ensure(x == y, || format!("{f} differs between runs"))?;
    }
    Ok(format!("{} artifacts bit-identical across two runs", files.len()))
}

fn c10_metrics() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    for case in 0..1000 {
        let n = rng.random_range(1..=20);
        let c = rng.random_range(1..=5);
        // Coarse scores force ties in about half the cases.
        let coarse = rng.random_bool(0.5);
        let traces: Vec<ExitTrace> = (0..n)
            .map(|i| {
                let prediction: Vec<f64> = (0..c)
                    .map(|_| {
                        let s: f64 = rng.random();
                        if coarse { (s * 4.0).floor() / 4.0 } else { s }
                    })
                    .collect();
                let mut on: Vec<usize> = (0..c).filter(|_| rng.random_bool(0.4)).collect();
                if on.is_empty() {
                    on.push(i % c);
                }
                ExitTrace {
                    video_id: format!("v{i}"),
                    exit_timestep: 1,
                    gate_scores: vec![],
                    prediction,
                    label: LabelSpec::multi(on).expect("non-empty"),
                    correct: false,
                    flops: 0.0,
                    frame_indices_used: vec![1],
                }
            })
            .collect();
        let mut aps = Vec::new();
        for k in 0..c {
            let scores: Vec<f64> = traces.iter().map(|t| t.prediction[k]).collect();
            let pos: Vec<bool> = traces.iter().map(|t| t.label.contains(k)).collect();
            let (got, want) = (average_precision(&scores, &pos), brute_force_ap(&scores, &pos));
            match (got, want) {
                (Some(a), Some(b)) => ensure((a - b).abs() <= 1e-12, || format!("case {case} label {k}: {a} vs {b}"))?,
                (a, b) => ensure(a == b, || format!("case {case} label {k}: {a:?} vs {b:?}"))?,
            }
            aps.extend(want);
        }
        let m = mean_average_precision(&traces).map_err(|e| e.to_string())?;
        let want = aps.iter().sum::<f64>() / aps.len() as f64;
        ensure((m.map - want).abs() <= 1e-12, || format!("case {case}: mAP {} vs {want}", m.map))?;
    }

    for case in 0..1000 {
        let d = rng.random_range(1..=8);
        let n = rng.random_range(1..=200);
        let rows: Vec<Vec<f64>> = (0..n).map(|_| (0..d).map(|_| rng.random_range(-1e3..1e3)).collect()).collect();
        let fold = |rs: &[&Vec<f64>], kind| {
            let mut s = PooledState::init(rs[0], kind).expect("non-empty frame");
            for r in &rs[1..] {
                s.absorb(r).expect("matching dims");
            }
            s.into_value()
        };
        let mut order: Vec<&Vec<f64>> = rows.iter().collect();
        let forward = fold(&order, PoolingKind::Max);
        for i in (1..order.len()).rev() {
            order.swap(i, rng.random_range(0..=i));
        }
        ensure(forward == fold(&order, PoolingKind::Max), || format!("case {case}: max pooling depends on order"))?;
        let running = fold(&rows.iter().collect::<Vec<_>>(), PoolingKind::Mean);
        for j in 0..d {
            let mean = rows.iter().map(|r| r[j]).sum::<f64>() / n as f64;
            ensure((running[j] - mean).abs() <= 1e-9, || format!("case {case}: mean {} vs {mean}", running[j]))?;
        }
    }
    Ok("1000 mAP instances, 1000 pooling cases each for max and mean".into())
}

fn main() {
    // `cargo test -- --list` style probes pass flags; nothing to list here.
    if std::env::args().any(|a| a == "--list") {
        return;
    }
    let mut results: Vec<(&str, Check)> = vec![
        ("1 sampler", c1_sampler()),
        ("2 gradients", c2_gradients()),
        ("3 epsilon and pseudo-labels", c3_epsilon()),
        ("4 cost model", c4_cost()),
    ];
    let bench_start = Instant::now();
    let b = benchmark();
    if let Some(e) = &b.setup_error {
        println!("  benchmark setup failed: {e}");
    } else {
        println!(
            "  benchmark: stage 1 in {:.1}s, no-exit accuracy {:.4}, total {:.1}s",
            b.stage1_time.as_secs_f64(),
            b.no_exit,
            bench_start.elapsed().as_secs_f64()
        );
    }
    results.push(("5 synthetic benchmark", b.c5));
    results.push(("6 adaptive vs fixed", b.c6));
    results.push(("7 exit matrix", b.c7));
    results.push(("8 beta monotonicity", b.c8));
    results.push(("9 determinism", c9_determinism()));
    results.push(("10 metric oracles", c10_metrics()));

    let mut failed = 0;
    for (name, r) in &results {
        match r {
            Ok(detail) => println!("PASS {name}: {detail}"),
            Err(why) => {
                failed += 1;
                println!("FAIL {name}: {why}");
            }
        }
    }
    println!("{} of {} criteria passed", results.len() - failed, results.len());
    if failed > 0 {
        std::process::exit(1);
    }
}
