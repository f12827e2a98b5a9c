//! End to end on the ellipsoid problem: teacher, progressive distillation
//! with the shipped configuration, and the independently trained baseline
//! at the same budgets.
//!
//! `cargo run --release --example ellipsoid_distill -- [seed]`

use std::time::Instant;

use bdistil::config::RunConfig;
use bdistil::data::{accuracy, gen_ellipsoid, model_logits, split, train_teacher};
use bdistil::distill::run;
use bdistil::eval::{anytime_curve, baseline_resched, models_curve, summarize_early_exit};
use bdistil::train::SgdConfig;

const CONFIG: &str = include_str!("../configs/ellipsoid.json");

fn main() -> bdistil::Result<()> {
    let seed: u64 = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(7);
    let start = Instant::now();

    let (ds, _) = gen_ellipsoid(seed, 10_000, 32)?;
    let (train, test) = split(&ds, 0.8, seed)?;
    let teacher = train_teacher(&train, &[32, 64, 64, 2], &SgdConfig::recipe(), seed)?;
    let g = model_logits(&teacher, &train.x)?;
    println!(
        "teacher: train acc {:.4}, test acc {:.4} ({:.1}s)",
        accuracy(&g, &train.labels),
        accuracy(&model_logits(&teacher, &test.x)?, &test.labels),
        start.elapsed().as_secs_f64()
    );

    let mut cfg = RunConfig::from_json(CONFIG)?;
    cfg.seed = seed;
    let (ens, history) = run(&cfg.distill_config(32, 2)?, &train.x, &g)?;
    for r in &history.rounds {
        println!(
            "round {} class {} {:?} edge {:?} clamps {} max|l| {:.3}",
            r.round, r.class_r, r.outcome, r.edge_gamma, r.clamp_count, r.max_abs_residual
        );
    }
    let curve = anytime_curve(&ens, &test.x, &test.labels, teacher.flops())?;
    println!("ensemble ({:.1}s)", start.elapsed().as_secs_f64());
    for p in &curve {
        println!(
            "  k={} flops={:.4} acc={:.4}",
            p.prefix_k, p.cum_flops_fraction, p.accuracy
        );
    }

    for threshold in [0.9, 0.99] {
        let (_, s) = summarize_early_exit(&ens, &test.x, &test.labels, threshold, teacher.flops())?;
        println!(
            "early exit at {threshold}: {:.3} members, {:.4} of teacher FLOPs, acc {:.4} (full {:.4})",
            s.mean_members_evaluated, s.mean_flops_fraction, s.accuracy, s.full_accuracy
        );
    }

    let specs: Vec<_> = ens.members.iter().map(|m| m.class.clone()).collect();
    let models = baseline_resched(&specs, &train.x, &g, &cfg.findwl(), seed)?;
    let resched = models_curve(&models, &test.x, &test.labels, teacher.flops())?;
    println!("resched ({:.1}s)", start.elapsed().as_secs_f64());
    for p in &resched {
        println!(
            "  k={} flops={:.4} acc={:.4}",
            p.prefix_k, p.cum_flops_fraction, p.accuracy
        );
    }
    Ok(())
}
