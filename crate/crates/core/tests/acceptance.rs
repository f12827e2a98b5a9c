//! Acceptance suite: one PASS/FAIL line per criterion, nonzero exit on any failure.

mod common;

use std::fs;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::process::{Command, ExitCode};
use std::time::Instant;

use serde::Deserialize;

use bdistil::config::RunConfig;
use bdistil::data::{accuracy, gen_cube, gen_ellipsoid, model_logits, split, train_teacher};
use bdistil::distill::{ensemble_predict, run, Ensemble, RunHistory};
use bdistil::eval::{anytime_curve, baseline_resched, margin_measure, models_curve, verify_bound, BoundStatus};
use bdistil::findwl::{barrier_loss, IplusMask};
use bdistil::game::{md_update, recompute_from_history, weak_learning_check, CheckOutcome, WeightState};
use bdistil::learner::{expand_class, mlp_spec, ClassSpec, ConnectionKind};
use bdistil::oracle::constructed_run;
use bdistil::rng::RngStream;
use bdistil::train::SgdConfig;
use bdistil::Mat;

const SHIPPED_CONFIG: &str = include_str!("../configs/ellipsoid.json");
const GOLDEN: &str = include_str!("golden/ellipsoid_seed7.json");

type Outcome = Result<String, String>;
type Check<'a> = Box<dyn Fn() -> Outcome + 'a>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn random_mat(rng: &mut RngStream, rows: usize, cols: usize, lo: f64, hi: f64) -> Mat {
    Mat::from_vec(rows, cols, (0..rows * cols).map(|_| rng.uniform_in(lo, hi)).collect()).unwrap()
}

/// Random `(N, L, [(l_t, η_t)])` with `N ≤ 16`, `L ≤ 4`, `T ≤ 64`.
fn random_history(rng: &mut RngStream) -> (usize, usize, Vec<(Mat, f64)>) {
    let n = 1 + rng.below(16) as usize;
    let labels = 1 + rng.below(4) as usize;
    let t = 1 + rng.below(64) as usize;
    let rounds = (0..t)
        .map(|_| (random_mat(rng, n, labels, -3.0, 3.0), rng.uniform_in(0.01, 1.0)))
        .collect();
    (n, labels, rounds)
}

/// Residuals `f_t − g` of every member, in order.
fn member_residuals(ens: &Ensemble, x: &Mat, g: &Mat) -> Vec<Mat> {
    ens.member_logits(x, ens.len())
        .unwrap()
        .iter()
        .map(|f| f.sub(g).unwrap())
        .collect()
}

/// A completed distillation run on training data.
struct RealRun {
    x: Mat,
    g: Mat,
    ensemble: Ensemble,
    history: RunHistory,
}

fn small_real_run() -> RealRun {
    let (ds, _) = gen_ellipsoid(21, 600, 32).unwrap();
    let (train, _) = split(&ds, 0.8, 21).unwrap();
    let recipe = SgdConfig {
        epochs: 20,
        ..SgdConfig::recipe()
    };
    let teacher = train_teacher(&train, &[32, 32, 2], &recipe, 21).unwrap();
    let g = model_logits(&teacher, &train.x).unwrap();
    let mut cfg = RunConfig::from_json(SHIPPED_CONFIG).unwrap();
    cfg.sgd.epochs = 10;
    cfg.seed = 21;
    let dcfg = cfg.distill_config(32, 2).unwrap();
    let (ensemble, history) = run(&dcfg, &train.x, &g).unwrap();
    RealRun {
        x: train.x,
        g,
        ensemble,
        history,
    }
}

fn criterion_1(real: &RealRun) -> Outcome {
    let mut rng = RngStream::new(1);
    let mut checked = 0;
    let mut worst: f64 = 0.0;
    let mut check = |state: &WeightState, what: &str| -> Result<(), String> {
        let entries_ok = state
            .kplus
            .as_slice()
            .iter()
            .chain(state.kminus.as_slice())
            .all(|v| (0.0..=1.0).contains(v));
        ensure(entries_ok, || format!("{what}: entry outside [0, 1]"))?;
        let mut mass = state.kplus.col_sums();
        for (m, k) in mass.iter_mut().zip(state.kminus.col_sums()) {
            *m += k;
        }
        for m in mass {
            worst = worst.max((m - 1.0).abs());
        }
        checked += 1;
        ensure(worst <= 1e-9, || format!("{what}: column mass off by {worst:e}"))
    };
    for h in 0..50 {
        let (n, labels, rounds) = random_history(&mut rng);
        let mut state = WeightState::init_uniform(n, labels).unwrap();
        for (l, eta) in &rounds {
            state = md_update(&state, l, *eta).unwrap().0;
            check(&state, &format!("random history {h}"))?;
        }
    }
    let mut runs: Vec<(String, Mat, Mat, Ensemble)> = [8, 32, 128]
        .into_iter()
        .map(|t| {
            let r = constructed_run(100, 2, t, 1.0, 5).unwrap();
            (format!("constructed T={t}"), r.x, r.teacher_logits, r.ensemble)
        })
        .collect();
    runs.push((
        "ellipsoid run".into(),
        real.x.clone(),
        real.g.clone(),
        real.ensemble.clone(),
    ));
    for (name, x, g, ens) in &runs {
        let mut state = WeightState::init_uniform(g.rows(), g.cols()).unwrap();
        for (t, l) in member_residuals(ens, x, g).iter().enumerate() {
            state = md_update(&state, l, ens.meta.eta).unwrap().0;
            check(&state, &format!("{name} round {}", t + 1))?;
        }
    }
    let recorded = real.history.rounds.iter().map(|r| r.mass_error).fold(0.0, f64::max);
    ensure(recorded <= 1e-9, || format!("recorded mass error {recorded:e}"))?;
    Ok(format!("{checked} states, worst column-sum error {worst:.1e}"))
}

fn criterion_2() -> Outcome {
    let mut rng = RngStream::new(2);
    let mut worst: f64 = 0.0;
    for _ in 0..50 {
        let (n, labels, rounds) = random_history(&mut rng);
        let start = WeightState::init_uniform(n, labels).unwrap();
        let mut state = start.clone();
        for (l, eta) in &rounds {
            state = md_update(&state, l, *eta).unwrap().0;
        }
        let residuals: Vec<Mat> = rounds.iter().map(|(l, _)| l.clone()).collect();
        let etas: Vec<f64> = rounds.iter().map(|(_, e)| *e).collect();
        let closed = recompute_from_history(&start, &residuals, &etas).unwrap();
        for (a, b) in closed
            .kplus
            .as_slice()
            .iter()
            .zip(state.kplus.as_slice())
            .chain(closed.kminus.as_slice().iter().zip(state.kminus.as_slice()))
        {
            worst = worst.max((a - b).abs());
        }
    }
    ensure(worst <= 1e-9, || format!("max elementwise difference {worst:e}"))?;
    Ok(format!("50 histories, max elementwise difference {worst:.1e}"))
}

fn criterion_3(real: &RealRun) -> Outcome {
    let mut rng = RngStream::new(3);
    let mut checks = 0;
    let mut tightest = f64::INFINITY;
    let mut check = |ln_z: f64, eta: f64, gamma: f64, g_inf: f64, what: &str| -> Result<(), String> {
        let rhs = -eta * gamma + eta * eta * g_inf * g_inf;
        tightest = tightest.min(rhs - ln_z);
        checks += 1;
        ensure(ln_z <= rhs + 1e-12, || format!("{what}: ln z = {ln_z} > {rhs}"))
    };
    for h in 0..50 {
        let (n, labels, rounds) = random_history(&mut rng);
        let mut state = WeightState::init_uniform(n, labels).unwrap();
        let g_inf = rounds.iter().map(|(l, _)| l.max_abs()).fold(0.0, f64::max);
        for (t, (l, eta)) in rounds.iter().enumerate() {
            let eta = eta / g_inf;
            let (next, rec) = md_update(&state, l, eta).unwrap();
            for j in 0..labels {
                check(
                    rec.z[j].ln(),
                    eta,
                    rec.edge_gamma[j],
                    g_inf,
                    &format!("history {h} round {t}"),
                )?;
            }
            state = next;
        }
    }
    let mut runs: Vec<(String, RunHistory, f64)> = [8, 32, 128]
        .into_iter()
        .map(|t| {
            let r = constructed_run(100, 2, t, 1.0, 5).unwrap();
            (format!("constructed T={t}"), r.history, 1.0)
        })
        .collect();
    let real_g_inf = member_residuals(&real.ensemble, &real.x, &real.g)
        .iter()
        .map(Mat::max_abs)
        .fold(0.0, f64::max);
    runs.push(("ellipsoid run".into(), real.history.clone(), real_g_inf));
    let mut applicable = 0;
    for (name, hist, g_inf) in &runs {
        if hist.rounds.iter().any(|r| r.eta * g_inf > 1.0) {
            continue;
        }
        applicable += 1;
        for r in &hist.rounds {
            for j in 0..r.z.len() {
                check(
                    r.z[j].ln(),
                    r.eta,
                    r.edge_gamma[j],
                    *g_inf,
                    &format!("{name} round {}", r.round),
                )?;
            }
        }
    }
    ensure(applicable == runs.len(), || {
        format!("only {applicable} of {} runs have eta * G <= 1", runs.len())
    })?;
    Ok(format!("{checks} (round, label) pairs, smallest slack {tightest:.2e}"))
}

fn criterion_4() -> Outcome {
    let (failures, worst) = common::network_failures();
    ensure(failures.is_empty(), || failures.join("; "))?;
    Ok(format!(
        "16 configurations x {} coordinates, worst relative error {worst:.1e}",
        common::COORDS
    ))
}

fn criterion_5() -> Outcome {
    let quoted_bounds = [(8, 0.8137), (32, 0.4069), (128, 0.2035)];
    let mut errors = Vec::new();
    let mut parts = Vec::new();
    for (t, quoted) in quoted_bounds {
        let bound = (200f64.ln() / t as f64).sqrt();
        ensure((bound - quoted).abs() < 2e-4, || {
            format!("bound {bound} differs from {quoted}")
        })?;
        let r = constructed_run(100, 2, t, 1.0, 5).unwrap();
        let f = ensemble_predict(&r.ensemble, &r.x, t).unwrap();
        let err = f.sub(&r.teacher_logits).unwrap().max_abs();
        ensure(err <= bound, || format!("T={t}: error {err} > bound {bound}"))?;
        let rows = r.history.rows();
        let report = verify_bound(&rows, &r.ensemble, &r.x, &r.teacher_logits, 1.0).unwrap();
        ensure(report.status == BoundStatus::Pass, || {
            format!("T={t}: verify reported {:?}", report.status)
        })?;
        errors.push(err);
        parts.push(format!("T={t} {err:.4}<={bound:.4}"));
    }
    let ratio = errors[2] / errors[1];
    ensure(ratio <= 0.60, || format!("error ratio T=128/T=32 is {ratio:.3}"))?;
    Ok(format!("{}, ratio {ratio:.3}", parts.join(", ")))
}

fn criterion_6() -> Outcome {
    let mut rng = RngStream::new(6);
    let (mut passes, mut fails) = (0, 0);
    for k in 0..1000 {
        let n = 1 + rng.below(12) as usize;
        let labels = 1 + rng.below(4) as usize;
        let mut state = WeightState::init_uniform(n, labels).unwrap();
        for _ in 0..1 + rng.below(4) {
            let l = random_mat(&mut rng, n, labels, -2.0, 2.0);
            state = md_update(&state, &l, rng.uniform_in(0.05, 1.0)).unwrap().0;
        }
        let l = random_mat(&mut rng, n, labels, -1.0, 1.0);
        let tol = rng.uniform_in(-0.02, 0.02);
        let min_edge = (0..labels)
            .map(|j| {
                (0..n)
                    .map(|i| (state.kplus.get(i, j) - state.kminus.get(i, j)) * l.get(i, j))
                    .sum::<f64>()
            })
            .fold(f64::INFINITY, f64::min);
        let outcome = weak_learning_check(&state, &l, tol).unwrap();
        ensure(outcome != CheckOutcome::Degenerate, || {
            format!("pair {k}: unexpected degenerate state")
        })?;
        let pass = outcome == CheckOutcome::Pass;
        ensure(pass == (min_edge > tol), || {
            format!("pair {k}: check says {outcome:?} but min edge {min_edge} vs tol {tol}")
        })?;
        if pass {
            passes += 1;
        } else {
            fails += 1;
        }
    }
    ensure(passes > 0 && fails > 0, || {
        format!("one-sided sample: {passes} pass, {fails} fail")
    })?;
    Ok(format!("1000 pairs ({passes} pass, {fails} fail)"))
}

#[derive(Deserialize)]
struct Golden {
    seed: u64,
    n: usize,
    teacher_spec: Vec<usize>,
    train_accuracy: f64,
    test_accuracy: f64,
    margin_epsilon: f64,
    margin_mu_train: f64,
    margin_mu_test: f64,
}

fn criterion_7() -> Outcome {
    let golden: Golden = serde_json::from_str(GOLDEN).unwrap();
    let (ds, _) = gen_ellipsoid(golden.seed, golden.n, 32).unwrap();
    let (train, test) = split(&ds, 0.8, golden.seed).unwrap();
    let teacher = train_teacher(&train, &golden.teacher_spec, &SgdConfig::recipe(), golden.seed).unwrap();
    let g_train = model_logits(&teacher, &train.x).unwrap();
    let g_test = model_logits(&teacher, &test.x).unwrap();
    let observed = [
        (
            "train accuracy",
            accuracy(&g_train, &train.labels),
            golden.train_accuracy,
        ),
        ("test accuracy", accuracy(&g_test, &test.labels), golden.test_accuracy),
        (
            "train margin mu",
            margin_measure(&g_train, golden.margin_epsilon).unwrap(),
            golden.margin_mu_train,
        ),
        (
            "test margin mu",
            margin_measure(&g_test, golden.margin_epsilon).unwrap(),
            golden.margin_mu_test,
        ),
    ];
    for (what, got, want) in observed {
        ensure((got - want).abs() <= 1e-12, || {
            format!("seed-{} teacher {what} {got} != golden {want}", golden.seed)
        })?;
    }
    ensure(golden.train_accuracy >= 0.95, || {
        format!("teacher train accuracy {}", golden.train_accuracy)
    })?;

    let cfg = RunConfig::from_json(SHIPPED_CONFIG).unwrap();
    let seeds = [1u64, 2, 3, 4, 5];
    let (mut bd_final, mut rs_final, mut bd_first) = (0.0, 0.0, 0.0);
    let mut per_seed = Vec::new();
    for seed in seeds {
        let (ds, _) = gen_ellipsoid(seed, 10_000, 32).unwrap();
        let (train, test) = split(&ds, 0.8, seed).unwrap();
        let teacher = train_teacher(&train, &[32, 64, 64, 2], &SgdConfig::recipe(), seed).unwrap();
        let g = model_logits(&teacher, &train.x).unwrap();
        let mut run_cfg = cfg.clone();
        run_cfg.seed = seed;
        let dcfg = run_cfg.distill_config(32, 2).unwrap();
        let (ens, _) = run(&dcfg, &train.x, &g).unwrap();
        ensure(ens.len() == dcfg.rounds, || {
            format!("seed {seed}: only {} members", ens.len())
        })?;
        let curve = anytime_curve(&ens, &test.x, &test.labels, teacher.flops()).unwrap();
        let specs: Vec<ClassSpec> = ens.members.iter().map(|m| m.class.clone()).collect();
        let models = baseline_resched(&specs, &train.x, &g, &run_cfg.findwl(), seed).unwrap();
        let resched = models_curve(&models, &test.x, &test.labels, teacher.flops()).unwrap();
        let (first, last, rs) = (
            curve[0].accuracy,
            curve[curve.len() - 1].accuracy,
            resched[resched.len() - 1].accuracy,
        );
        per_seed.push(format!("{seed}:{last:.4}/{rs:.4}"));
        bd_final += last / seeds.len() as f64;
        bd_first += first / seeds.len() as f64;
        rs_final += rs / seeds.len() as f64;
    }
    ensure(bd_final >= rs_final - 0.005, || {
        format!(
            "mean final accuracy {bd_final:.4} < RESCHED {rs_final:.4} - 0.005 [{}]",
            per_seed.join(" ")
        )
    })?;
    ensure(bd_final >= bd_first - 0.01, || {
        format!("mean accuracy k=5 {bd_final:.4} < k=1 {bd_first:.4} - 0.01")
    })?;
    Ok(format!(
        "teacher train acc {:.4}; mean final {bd_final:.4} vs RESCHED {rs_final:.4}; k=1 {bd_first:.4} [seed:bdistil/resched {}]",
        golden.train_accuracy,
        per_seed.join(" ")
    ))
}

fn criterion_8(real: &RealRun) -> Outcome {
    let shipped = RunConfig::from_json(SHIPPED_CONFIG).unwrap();
    let defaults = RunConfig::default();
    let (_, cube) = gen_cube(0, 10, 32, 4, 16).unwrap();
    let mut worst: f64 = 0.0;
    let mut classes = 0;
    for (name, cfg, labels) in [
        ("shipped", &shipped, 2),
        ("default ellipsoid", &defaults, 2),
        ("default cube", &defaults, cube.classes),
    ] {
        let mut widths = vec![32];
        widths.extend(&cfg.base_hidden);
        widths.push(labels);
        let base = mlp_spec(&widths).unwrap();
        let first = bdistil::learner::LearnerParams::zeros(&expand_class(&base, ConnectionKind::None, 0, &[]).unwrap())
            .unwrap();
        for kind in common::KINDS {
            let class = expand_class(&base, kind, 1, std::slice::from_ref(&first)).unwrap();
            let layers: u64 = class
                .layers
                .iter()
                .map(|l| 2 * (l.in_dim * l.out_dim) as u64 + l.out_dim as u64)
                .sum();
            let overhead = class.flops() - layers;
            let expected = match kind {
                ConnectionKind::ResidualAdd | ConnectionKind::Delta => class.connection.width as u64,
                _ => 0,
            };
            ensure(overhead == expected, || {
                format!("{name} {kind:?}: overhead {overhead} != {expected}")
            })?;
            let frac = overhead as f64 / class.flops() as f64;
            worst = worst.max(frac);
            classes += 1;
            ensure(frac < 0.01, || {
                format!("{name} {kind:?}: connection is {:.3}% of member FLOPs", 100.0 * frac)
            })?;
        }
    }
    let ens = &real.ensemble;
    let member_sum: u64 = ens.members.iter().map(|m| m.flops()).sum();
    ensure(member_sum == ens.prefix_flops(ens.len()), || {
        format!("member sum {member_sum} != ensemble {}", ens.prefix_flops(ens.len()))
    })?;
    let recount: u64 = ens
        .members
        .iter()
        .map(|m| {
            m.class
                .layers
                .iter()
                .map(|l| 2 * (l.in_dim * l.out_dim) as u64 + l.out_dim as u64)
                .sum::<u64>()
                + if m.class.connection.is_active() {
                    m.class.connection.width as u64
                } else {
                    0
                }
        })
        .sum();
    ensure(recount == member_sum, || {
        format!("independent recount {recount} != {member_sum}")
    })?;
    Ok(format!(
        "{classes} classes, worst overhead {:.3}%; ensemble FLOPs {member_sum}",
        100.0 * worst
    ))
}

fn bdistil(args: &[&str], cwd: &Path) -> Result<i32, String> {
    let out = Command::new(env!("CARGO_BIN_EXE_bdistil"))
        .args(args)
        .current_dir(cwd)
        .output()
        .map_err(|e| e.to_string())?;
    Ok(out.status.code().unwrap_or(-1))
}

fn pipeline(dir: &Path) -> Result<Vec<(String, Vec<u8>)>, String> {
    fs::write(dir.join("run.json"), SHIPPED_CONFIG).map_err(|e| e.to_string())?;
    let steps: [&[&str]; 7] = [
        &[
            "gen-data",
            "--dataset",
            "ellipsoid",
            "--n",
            "500",
            "--seed",
            "9",
            "--out",
            "d",
        ],
        &[
            "train-teacher",
            "--data",
            "d",
            "--spec",
            "32,64,64,2",
            "--out",
            "t.json",
            "--seed",
            "9",
            "--epochs",
            "10",
        ],
        &[
            "distill",
            "--data",
            "d",
            "--teacher",
            "t.json",
            "--config",
            "run.json",
            "--out",
            "e.json",
            "--history",
            "h.csv",
            "--seed",
            "9",
        ],
        &[
            "eval",
            "--ensemble",
            "e.json",
            "--data",
            "d",
            "--teacher",
            "t.json",
            "--mode",
            "anytime",
            "--out",
            "c.csv",
        ],
        &[
            "eval",
            "--ensemble",
            "e.json",
            "--data",
            "d",
            "--teacher",
            "t.json",
            "--mode",
            "early-exit",
            "--threshold",
            "0.9",
            "--out",
            "x.csv",
        ],
        &[
            "eval",
            "--ensemble",
            "e.json",
            "--data",
            "d",
            "--teacher",
            "t.json",
            "--mode",
            "resched",
            "--config",
            "run.json",
            "--seed",
            "9",
            "--out",
            "r.csv",
        ],
        &[
            "verify",
            "--history",
            "h.csv",
            "--ensemble",
            "e.json",
            "--data",
            "d",
            "--g-inf",
            "50",
            "--out",
            "b.json",
        ],
    ];
    for step in steps {
        let code = bdistil(step, dir)?;
        ensure(code == 0 || (step[0] == "verify" && code != 3 && code != 2), || {
            format!("`{}` exited {code}", step[0])
        })?;
    }
    let mut files = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(p) = stack.pop() {
        for entry in fs::read_dir(&p).map_err(|e| e.to_string())? {
            let path = entry.map_err(|e| e.to_string())?.path();
            if path.is_dir() {
                stack.push(path);
            } else {
                let rel = path.strip_prefix(dir).unwrap().display().to_string();
                files.push((rel, fs::read(&path).map_err(|e| e.to_string())?));
            }
        }
    }
    files.sort();
    Ok(files)
}

fn criterion_9() -> Outcome {
    let a = tempfile::tempdir().map_err(|e| e.to_string())?;
    let b = tempfile::tempdir().map_err(|e| e.to_string())?;
    let first = pipeline(a.path())?;
    let second = pipeline(b.path())?;
    let names = |f: &[(String, Vec<u8>)]| f.iter().map(|(n, _)| n.clone()).collect::<Vec<_>>();
    ensure(names(&first) == names(&second), || "different artifact sets".into())?;
    for ((name, x), (_, y)) in first.iter().zip(&second) {
        ensure(x == y, || format!("{name} differs between runs"))?;
    }
    Ok(format!(
        "{} artifacts byte-identical: {}",
        first.len(),
        names(&first).join(" ")
    ))
}

fn criterion_10() -> Outcome {
    let one = |l: f64, plus: bool, bound: f64| {
        let mask = IplusMask::from_bits(1, 1, vec![plus]).unwrap();
        barrier_loss(&Mat::filled(1, 1, l), &mask, bound, 1.0).unwrap()
    };
    let cases = [
        (-1.0, true, 1.0, -(0.5f64.ln())),
        (1.0, true, 1.0, -(1.5f64.ln())),
        (1.0, false, 1.0, -(0.5f64.ln())),
        (-1.0, false, 1.0, -(1.5f64.ln())),
        (-3.0, true, 3.0, std::f64::consts::LN_2),
        (3.0, true, 3.0, -0.4054651081081644),
    ];
    for (l, plus, bound, want) in cases {
        let got = one(l, plus, bound);
        ensure((got.loss - want).abs() <= 1e-12, || {
            format!("l={l} I+={plus}: {} != {want}", got.loss)
        })?;
        ensure(got.clamp_count == 0, || format!("l={l}: unexpected clamp"))?;
    }
    let edge = 2.0 * 1.5 * (1.0 - 1e-6);
    for (l, clamps) in [(edge, 1), (-edge, 1), (3.0, 1), (-7.0, 1), (edge * (1.0 - 1e-9), 0)] {
        let v = one(l, l > 0.0, 1.5).clamp_count + one(l, l < 0.0, 1.5).clamp_count;
        ensure(v == 2 * clamps, || {
            format!("l={l}: clamp count {v}, expected {}", 2 * clamps)
        })?;
        ensure(one(l, l < 0.0, 1.5).loss.is_finite(), || {
            format!("l={l}: non-finite loss")
        })?;
    }
    let mask = IplusMask::from_bits(2, 2, vec![true, false, true, false]).unwrap();
    let l = Mat::from_vec(2, 2, vec![-3.0, 3.0, 0.1, 5.0]).unwrap();
    let count = barrier_loss(&l, &mask, 1.5, 1.0).unwrap().clamp_count;
    ensure(count == 3, || format!("matrix clamp count {count}, expected 3"))?;
    Ok("6 hand-computed values within 1e-12; clamp counting at the 2B(1-1e-6) edge".into())
}

fn main() -> ExitCode {
    let started = Instant::now();
    let real = catch_unwind(small_real_run);
    let real = real.ok();
    let real = real.as_ref();
    let needs_real = move |f: fn(&RealRun) -> Outcome| -> Check<'_> {
        Box::new(move || match real {
            Some(r) => f(r),
            None => Err("the shared distillation run failed".into()),
        })
    };
    let criteria: Vec<(usize, &str, Check<'_>)> = vec![
        (1, "weight-state invariants", needs_real(criterion_1)),
        (2, "closed-form equivalence", Box::new(criterion_2)),
        (3, "per-round normalizer inequality", needs_real(criterion_3)),
        (4, "gradient correctness", Box::new(criterion_4)),
        (5, "constructed-oracle convergence bound", Box::new(criterion_5)),
        (6, "edge/check consistency", Box::new(criterion_6)),
        (7, "ellipsoid end-to-end ordering", Box::new(criterion_7)),
        (8, "connection overhead", needs_real(criterion_8)),
        (9, "pipeline determinism", Box::new(criterion_9)),
        (10, "barrier sanity", Box::new(criterion_10)),
    ];
    let mut failed = 0;
    for (id, name, f) in &criteria {
        let t0 = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|e| {
            let msg = e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panic".into());
            Err(format!("panicked: {msg}"))
        });
        let secs = t0.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!("criterion {id:>2} PASS {name} ({secs:.1}s): {detail}"),
            Err(why) => {
                failed += 1;
                println!("criterion {id:>2} FAIL {name} ({secs:.1}s): {why}");
            }
        }
    }
    println!(
        "acceptance: {} passed, {failed} failed in {:.1}s",
        criteria.len() - failed,
        started.elapsed().as_secs_f64()
    );
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
