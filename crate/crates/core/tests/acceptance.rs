//! End-to-end acceptance checks. Each criterion prints one PASS/FAIL line.

use std::io::Write;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::sync::Arc;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use distrack_core::environment::{
    generate_synthetic_video, omega, reward_from_iou, CropConfig, SyntheticSpec, Video,
};
use distrack_core::evaluation::{ao, precision_auc, sr, success_auc};
use distrack_core::frame::Frame;
use distrack_core::geometry::{apply_action, infer_action, iou, Action, BoundingBox, MIN_SIDE};
use distrack_core::learning::{
    actor_critic_loss, build_sequences, check_student_gradients, curriculum_update, distill_loss, replay_deltas,
    train, validation_ao, CurriculumState, EpisodeRecord, OptimizerConfig, ReturnsMode, StepRecord, TrainConfig,
    UpdateKind, DEFAULT_TAU,
};
use distrack_core::student::{forward, Architecture, HiddenSchedule, ModelConfig, ModelParameters};
use distrack_core::teachers::{run_teacher, OracleNoiseTeacher, Teacher, TrajectoryTrace};
use distrack_core::tracking::{trasfust, trast, Evaluator, STUDENT_CONTROLLER};
use distrack_core::transferset::{
    chunk_all, filter_trajectories, stats, CHUNKS_PER_TRAJECTORY, CHUNK_LEN,
};

fn report(line: &str) {
    let mut out = std::io::stdout().lock();
    let _ = writeln!(out, "{line}");
    let _ = out.flush();
}

fn within(start: Instant, limit: Duration, what: &str) {
    let took = start.elapsed();
    assert!(took < limit, "{what} took {took:?}, limit {limit:?}");
}

fn synthetic(seed: u64, id: &str) -> Video {
    generate_synthetic_video(&SyntheticSpec::default(), seed, id).unwrap()
}

// 1
fn geometry_round_trip() {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut pairs = 0;
    while pairs < 10_000 {
        let prev = BoundingBox::new(
            rng.random_range(-50.0..150.0),
            rng.random_range(-50.0..150.0),
            rng.random_range(2.0..80.0),
            rng.random_range(2.0..80.0),
        );
        let a = Action::new(
            rng.random_range(-1.0..=1.0),
            rng.random_range(-1.0..=1.0),
            rng.random_range(-1.0..=1.0),
            rng.random_range(-1.0..=1.0),
        );
        // Actions that would shrink a side below the floor are outside the image of φ.
        if prev.w * (1.0 + a.dw) <= MIN_SIDE || prev.h * (1.0 + a.dh) <= MIN_SIDE {
            continue;
        }
        let back = infer_action(&apply_action(&a, &prev), &prev);
        for (x, y) in back.to_array().iter().zip(a.to_array()) {
            assert!((x - y).abs() < 1e-9, "{a:?} -> {back:?}");
        }
        pairs += 1;
    }
    let raster = |a: [i64; 4], b: [i64; 4]| {
        let inside = |r: [i64; 4], x: i64, y: i64| x >= r[0] && x < r[0] + r[2] && y >= r[1] && y < r[1] + r[3];
        let (mut inter, mut union) = (0u32, 0u32);
        for y in 0..100 {
            for x in 0..100 {
                let (p, q) = (inside(a, x, y), inside(b, x, y));
                inter += u32::from(p && q);
                union += u32::from(p || q);
            }
        }
        f64::from(inter) / f64::from(union)
    };
    for _ in 0..200 {
        let mut r = || {
            let x = rng.random_range(0..90);
            let y = rng.random_range(0..90);
            [x, y, rng.random_range(1..=100 - x), rng.random_range(1..=100 - y)]
        };
        let (a, b) = (r(), r());
        let f = |v: [i64; 4]| BoundingBox::new(v[0] as f64, v[1] as f64, v[2] as f64, v[3] as f64);
        let v = iou(&f(a), &f(b)).unwrap();
        assert!((v - raster(a, b)).abs() < 1e-3, "{a:?} {b:?}");
    }
    within(start, Duration::from_secs(5), "geometry");
}

// 2
fn reward_quantizer() {
    let start = Instant::now();
    for i in 0..=1000u32 {
        let z = f64::from(i) / 1000.0;
        // Floor to the 0.05 digit in integer thousandths, then map [0, 1] to [-1, 1].
        let floored = (i / 50) * 50;
        let expected = f64::from(2 * floored) / 1000.0 - 1.0;
        let got = omega(z).unwrap();
        assert!((got - expected).abs() < 1e-12, "omega({z}) = {got}, expected {expected}");
        let r = reward_from_iou(z);
        if i < 500 {
            assert_eq!(r, -1.0, "reward at {z}");
        } else {
            assert!((r - expected).abs() < 1e-12);
        }
    }
    within(start, Duration::from_secs(1), "quantizer");
}

// 3
fn gradient_correctness() {
    let start = Instant::now();
    let checks = check_student_gradients(&ModelConfig::default(), 2024, 80).unwrap();
    assert_eq!(checks.len(), 4);
    for c in &checks {
        assert!(c.report.max_rel_error < 1e-4, "{} loss: {:?}", c.loss, c.report);
        assert!(c.report.checked >= 60, "{} loss checked only {}", c.loss, c.report.checked);
    }
    within(start, Duration::from_secs(60), "grad check");
}

fn step(reward: f64, value: f64) -> StepRecord {
    StepRecord {
        mu: Action::ZERO,
        executed: Action::ZERO,
        sample: [0.0; 4],
        sigma: [1.0; 4],
        log_density: 0.0,
        reward,
        value,
        teacher_action: Action::ZERO,
        teacher_reward: 0.0,
        mask: 0,
        gt_action: Action::ZERO,
    }
}

// 4
fn loss_hand_cases() {
    let mut s = step(0.0, 0.0);
    s.teacher_action = Action::new(0.1, -0.1, 0.2, 0.0);
    s.mask = 1;
    let d = distill_loss(&EpisodeRecord {
        steps: vec![s],
        ..Default::default()
    });
    assert!((d - 0.4).abs() < 1e-12, "distill {d}");

    let mut s = step(0.4, 0.1);
    s.log_density = -1.2;
    let open = EpisodeRecord {
        steps: vec![s.clone()],
        bootstrap: 0.2,
        terminated: false,
    };
    let (pi, _) = actor_critic_loss(&open, 1.0, ReturnsMode::Forward).unwrap();
    assert!((pi - 0.6).abs() < 1e-12, "policy {pi}");

    let done = EpisodeRecord {
        steps: vec![s],
        bootstrap: 0.0,
        terminated: true,
    };
    let (_, v) = actor_critic_loss(&done, 1.0, ReturnsMode::Forward).unwrap();
    assert!((v - 0.045).abs() < 1e-12, "value {v}");
}

// 5
fn curriculum_trace() {
    let head = [false, true, false, false, false, false, true, true, false, false];
    let head_terminals = [5, 6, 6, 6, 6, 6, 6, 7, 7, 7];
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let script: Vec<(f64, f64)> = (0..100)
        .map(|i| {
            let teacher = 0.5 * f64::from(rng.random_range(0..20u32));
            let win = if i < head.len() { head[i] } else { rng.random_bool(0.3) };
            match (win, rng.random_range(0..3)) {
                (true, 0) => (teacher, teacher),
                (true, _) => (teacher + 0.25, teacher),
                (false, _) => (teacher - 0.25, teacher),
            }
        })
        .collect();

    let max = 31;
    let mut state = CurriculumState::new(5, max);
    let (mut c, mut e, mut t) = (0u32, 0u32, 5usize);
    let mut advances = 0;
    for (i, &(s, tr)) in script.iter().enumerate() {
        let advanced = curriculum_update(&mut state, s, tr, DEFAULT_TAU);
        e += 1;
        c += u32::from(s >= tr);
        let expect_advance = 4 * c >= e;
        if expect_advance {
            t = (t + 1).min(max);
            c = 0;
            e = 0;
            advances += 1;
        }
        assert_eq!(advanced, expect_advance, "episode {i}");
        assert_eq!((state.successes, state.episodes, state.terminal), (c, e, t), "episode {i}");
        if i < head_terminals.len() {
            assert_eq!(state.terminal, head_terminals[i], "hand trace at episode {i}");
        }
    }
    assert!(advances > 5);
}

// 6
fn transferset_filtering() {
    let frame = Arc::new(Frame::filled(16, 16, [0, 0, 0]).unwrap());
    let g = BoundingBox::new(0.0, 0.0, 10.0, 10.0);
    let video = |id: &str| Video::new(id, vec![frame.clone(); 4], vec![g; 4]).unwrap();
    let videos = vec![video("v1"), video("v2"), video("v3")];
    // Horizontal shift giving the wanted IoU against the 10x10 ground truth.
    let at = |v: f64| BoundingBox::new(10.0 * (1.0 - v) / (1.0 + v), 0.0, 10.0, 10.0);
    let corpus: [(&str, &str, [f64; 3]); 6] = [
        ("t1", "v1", [0.95, 0.92, 0.91]),
        ("t2", "v1", [0.85, 0.75, 0.95]),
        ("t1", "v2", [0.55, 0.65, 0.60]),
        ("t2", "v2", [0.81, 0.83, 0.99]),
        ("t1", "v3", [0.40, 0.90, 0.90]),
        ("t2", "v3", [0.62, 0.66, 0.70]),
    ];
    let traces: Vec<TrajectoryTrace> = corpus
        .iter()
        .map(|(t, v, ious)| {
            let mut boxes = vec![g];
            boxes.extend(ious.iter().map(|&x| at(x)));
            TrajectoryTrace::new(*t, *v, boxes)
        })
        .collect();
    // Kept corpus rows per beta, worked out by hand from each row's minimum.
    let kept_rows: [(f64, &[usize]); 5] = [
        (0.5, &[0, 1, 2, 3, 5]),
        (0.6, &[0, 1, 3, 5]),
        (0.7, &[0, 1, 3]),
        (0.8, &[0, 3]),
        (0.9, &[0]),
    ];
    let mut previous: Option<Vec<(String, String)>> = None;
    for (beta, rows) in kept_rows {
        let kept = filter_trajectories(&traces, &videos, beta).unwrap();
        let ids: Vec<(String, String)> = kept
            .iter()
            .map(|k| (k.trace.teacher_id().to_string(), k.trace.video_id().to_string()))
            .collect();
        let mut expected: Vec<(String, String)> =
            rows.iter().map(|&r| (corpus[r].0.to_string(), corpus[r].1.to_string())).collect();
        expected.sort_by(|a, b| (&a.1, &a.0).cmp(&(&b.1, &b.0)));
        assert_eq!(ids, expected, "beta {beta}");
        for teacher in ["t1", "t2"] {
            let mine: Vec<f64> = rows
                .iter()
                .filter(|&&r| corpus[r].0 == teacher)
                .flat_map(|&r| corpus[r].2)
                .collect();
            let row = stats(teacher, beta, &kept, &[]);
            assert_eq!(row.num_traj, mine.len() / 3, "beta {beta} {teacher}");
            let hand = if mine.is_empty() { 0.0 } else { mine.iter().sum::<f64>() / mine.len() as f64 };
            assert!((row.ao - hand).abs() < 1e-9, "beta {beta} {teacher}: {} vs {hand}", row.ao);
        }
        if let Some(prev) = &previous {
            assert!(ids.iter().all(|x| prev.contains(x)), "not nested at beta {beta}");
        }
        previous = Some(ids);
    }
}

fn oracle_trio() -> Vec<OracleNoiseTeacher> {
    [0.5, 0.7, 0.9]
        .iter()
        .enumerate()
        .map(|(i, &target)| OracleNoiseTeacher::calibrated(format!("o{i}"), target, 40 + i as u64).unwrap())
        .collect()
}

// 7
fn oracle_fusion_dominance() {
    let start = Instant::now();
    let arch = Architecture::new(ModelConfig::default()).unwrap();
    let params = ModelParameters::init(&arch, 1);
    let teachers = oracle_trio();
    let pool: Vec<&dyn Teacher> = teachers.iter().map(|t| t as &dyn Teacher).collect();
    let crop = CropConfig::default();
    for i in 0..20 {
        let v = synthetic(7000 + i, &format!("f{i}"));
        let run = trasfust(&v, &params, &crop, &pool, Evaluator::Oracle).unwrap();
        assert!(run.is_complete(&v));
        let individual: Vec<Vec<f64>> = teachers
            .iter()
            .map(|t| {
                let trace = run_teacher(t, &v).unwrap();
                (1..v.len()).map(|k| iou(&trace.boxes()[k], &v.ground_truth()[k]).unwrap()).collect()
            })
            .collect();
        let fused = run.ious(&v);
        for (k, f) in fused.iter().enumerate() {
            let best = individual.iter().map(|s| s[k]).fold(f64::NEG_INFINITY, f64::max);
            assert_eq!(*f, best, "video {i} frame {}", k + 1);
        }
        let fused_ao = ao(&fused).unwrap();
        for s in &individual {
            assert!(fused_ao >= ao(s).unwrap(), "video {i}");
        }
    }
    within(start, Duration::from_secs(120), "fusion");
}

// 8
fn trast_selection_rule() {
    let arch = Architecture::new(ModelConfig::default()).unwrap();
    let params = ModelParameters::init(&arch, 9);
    let crop = CropConfig::default();
    let teacher = OracleNoiseTeacher::calibrated("o", 0.7, 3).unwrap();
    let mut picks = [0usize; 2];
    for i in 0..10 {
        let v = synthetic(8000 + i, &format!("s{i}"));
        let run = trast(&v, &params, &crop, &teacher, Evaluator::Oracle).unwrap();
        assert!(run.is_complete(&v));
        let trace = run_teacher(&teacher, &v).unwrap();
        // Replays the student independently along the chosen boxes.
        let mut sched = HiddenSchedule::new(arch.hidden_size());
        let mut hidden = sched.reset_hidden();
        let mut b = v.ground_truth()[0];
        for f in &run.frames {
            let t = f.t;
            let g = v.ground_truth()[t];
            let state =
                distrack_core::environment::make_state(v.frame(t - 1), v.frame(t), &b, &crop).unwrap();
            let input = sched.input_for(t, hidden);
            let (out, next) = forward(&params, &state, &input).unwrap();
            sched.record(t, &next);
            hidden = next;
            let student = apply_action(&out.action, &b);
            let teacher_box = trace.boxes()[t];
            let (is, it) = (iou(&student, &g).unwrap(), iou(&teacher_box, &g).unwrap());
            let (expected, by_student) = if is >= it { (student, true) } else { (teacher_box, false) };
            assert_eq!(f.bbox, expected, "video {i} frame {t}");
            assert_eq!(f.controller == STUDENT_CONTROLLER, by_student, "video {i} frame {t}");
            picks[usize::from(by_student)] += 1;
            b = expected;
        }
    }
    assert!(picks[0] > 0 && picks[1] > 0, "both branches exercised: {picks:?}");
}

// 9
fn training_smoke_test() {
    let start = Instant::now();
    let train_videos: Vec<Video> = (0..50).map(|i| synthetic(i, &format!("t{i:02}"))).collect();
    let validation: Vec<Video> = (0..5).map(|i| synthetic(500 + i, &format!("v{i}"))).collect();
    let held_out: Vec<Video> = (0..10).map(|i| synthetic(1000 + i, &format!("h{i}"))).collect();
    let teacher = OracleNoiseTeacher::calibrated("oracle90", 0.9, 7).unwrap();
    let traces: Vec<TrajectoryTrace> = train_videos.iter().map(|v| run_teacher(&teacher, v).unwrap()).collect();
    let kept = filter_trajectories(&traces, &train_videos, 0.5).unwrap();
    let chunks = chunk_all(&kept, CHUNK_LEN, CHUNKS_PER_TRAJECTORY, 1).unwrap();
    let sequences = build_sequences(&kept, &chunks);
    let arch = Architecture::new(ModelConfig::default()).unwrap();
    let init = ModelParameters::init(&arch, 3);
    let crop = CropConfig::default();
    let config = TrainConfig {
        max_updates: 50_000,
        validate_every: 5_000,
        patience: 5,
        seed: 11,
        ..TrainConfig::default()
    };
    let before = validation_ao(&init, &held_out, &crop);
    let outcome = train(&init, &sequences, &validation, crop, &config).unwrap();
    assert!(outcome.updates <= 50_000);
    let student = &outcome.best_params;
    let tras_ao = validation_ao(student, &held_out, &crop);
    let trast_ao = held_out
        .iter()
        .map(|v| {
            let run = trast(v, student, &crop, &teacher, Evaluator::ValueHead).unwrap();
            ao(&run.ious(v)).unwrap()
        })
        .sum::<f64>()
        / held_out.len() as f64;
    report(&format!(
        "    untrained AO {before:.4}, TRAS AO {tras_ao:.4}, TRAST AO {trast_ao:.4}, {} updates in {:.0?}",
        outcome.updates,
        start.elapsed()
    ));
    assert!(tras_ao - before >= 0.2, "AO gain {:.4}", tras_ao - before);
    assert!(trast_ao >= tras_ao, "TRAST {trast_ao:.4} < TRAS {tras_ao:.4}");
    within(start, Duration::from_secs(30 * 60), "training");
}

// 10
fn metrics_brute_force() {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    // Thresholds parsed from their decimal spelling.
    let overlap_grid: Vec<f64> = (0..=100).map(|i| format!("{}.{:02}", i / 100, i % 100).parse().unwrap()).collect();
    for _ in 0..1000 {
        let n = rng.random_range(1..200);
        let ious: Vec<f64> = (0..n)
            .map(|_| {
                if rng.random_bool(0.3) {
                    overlap_grid[rng.random_range(0..=100)]
                } else {
                    rng.random_range(0.0..=1.0)
                }
            })
            .collect();
        let errs: Vec<f64> = (0..n)
            .map(|_| {
                if rng.random_bool(0.3) {
                    f64::from(rng.random_range(0..60u32))
                } else {
                    rng.random_range(0.0..70.0)
                }
            })
            .collect();
        let mut total = 0.0;
        for x in &ious {
            total += x;
        }
        let brute_ao = total / n as f64;
        let rate = |thr: f64| {
            let mut hits = 0;
            for x in &ious {
                if *x >= thr {
                    hits += 1;
                }
            }
            hits as f64 / n as f64
        };
        let mut ss = 0.0;
        for thr in &overlap_grid {
            ss += rate(*thr);
        }
        ss /= 101.0;
        let mut ps = 0.0;
        for px in 0..=50 {
            let mut hits = 0;
            for e in &errs {
                if *e <= px as f64 {
                    hits += 1;
                }
            }
            ps += hits as f64 / n as f64;
        }
        ps /= 51.0;
        assert!((ao(&ious).unwrap() - brute_ao).abs() < 1e-12);
        assert!((sr(&ious, 0.5).unwrap() - rate(0.5)).abs() < 1e-12);
        assert!((sr(&ious, 0.75).unwrap() - rate(0.75)).abs() < 1e-12);
        assert!((success_auc(&ious).unwrap() - ss).abs() < 1e-12);
        assert!((precision_auc(&errs).unwrap() - ps).abs() < 1e-12);
    }
}

// 11
fn concurrency_soundness() {
    let videos: Vec<Video> = (0..6).map(|i| synthetic(300 + i, &format!("c{i}"))).collect();
    let teacher = OracleNoiseTeacher::calibrated("oracle90", 0.9, 2).unwrap();
    let traces: Vec<TrajectoryTrace> = videos.iter().map(|v| run_teacher(&teacher, v).unwrap()).collect();
    let kept = filter_trajectories(&traces, &videos, 0.5).unwrap();
    let sequences = build_sequences(&kept, &chunk_all(&kept, CHUNK_LEN, 2, 4).unwrap());
    let arch = Architecture::new(ModelConfig::default()).unwrap();
    let init = ModelParameters::init(&arch, 8);
    let config = TrainConfig {
        workers: 8,
        max_updates: 240,
        record_deltas: true,
        seed: 3,
        optimizer: OptimizerConfig {
            lr: 1e-3,
            ..OptimizerConfig::default()
        },
        ..TrainConfig::default()
    };
    let outcome = train(&init, &sequences, &[], CropConfig::default(), &config).unwrap();
    assert_eq!(outcome.updates, 240);
    let deltas = outcome.deltas.as_ref().unwrap();
    assert_eq!(deltas.len(), 240);
    let replayed = replay_deltas(init.values(), deltas);
    let fin = outcome.final_params.values();
    assert!(
        replayed.iter().zip(fin).all(|(a, b)| a.to_bits() == b.to_bits()),
        "replay differs from the final parameters"
    );
    assert_ne!(fin, init.values());
    let updates: Vec<u64> = outcome.log.iter().map(|e| e.update).collect();
    assert_eq!(updates, (1..=240).collect::<Vec<_>>());
    let workers: std::collections::BTreeSet<usize> = outcome.log.iter().map(|e| e.worker).collect();
    assert!(workers.len() > 1, "only {workers:?} sent updates");
    assert!(outcome.log.iter().any(|e| e.kind == UpdateKind::Distill));
    assert!(outcome.log.iter().any(|e| e.kind == UpdateKind::Autonomous));
}

#[test]
fn acceptance() {
    let criteria: [(&str, fn()); 11] = [
        ("1 geometry round trip", geometry_round_trip),
        ("2 reward quantizer", reward_quantizer),
        ("3 gradient correctness", gradient_correctness),
        ("4 loss hand-cases", loss_hand_cases),
        ("5 curriculum scheduler", curriculum_trace),
        ("6 transfer-set filtering", transferset_filtering),
        ("7 oracle-fusion dominance", oracle_fusion_dominance),
        ("8 TRAST selection rule", trast_selection_rule),
        ("9 training smoke test", training_smoke_test),
        ("10 metrics brute force", metrics_brute_force),
        ("11 concurrency soundness", concurrency_soundness),
    ];
    report("");
    let mut failed = Vec::new();
    for (name, check) in criteria {
        let start = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(check));
        let secs = start.elapsed().as_secs_f64();
        match outcome {
            Ok(()) => report(&format!("PASS  {name} ({secs:.1}s)")),
            Err(e) => {
                let msg = e
                    .downcast_ref::<String>()
                    .cloned()
                    .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                    .unwrap_or_default();
                report(&format!("FAIL  {name} ({secs:.1}s): {msg}"));
                failed.push(name);
            }
        }
    }
    assert!(failed.is_empty(), "failed: {failed:?}");
}
