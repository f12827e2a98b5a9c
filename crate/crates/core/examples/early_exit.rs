//! Early-exit inference: stop adding members once the prefix average is
//! confident enough, and compare cost and accuracy across thresholds.

use bdistil::config::RunConfig;
use bdistil::data::{gen_ellipsoid, model_logits, split, train_teacher};
use bdistil::distill::run;
use bdistil::eval::summarize_early_exit;
use bdistil::train::SgdConfig;

fn main() -> bdistil::Result<()> {
    let (ds, _) = gen_ellipsoid(4, 3000, 32)?;
    let (train, test) = split(&ds, 0.8, 4)?;
    let recipe = SgdConfig {
        epochs: 60,
        ..SgdConfig::recipe()
    };
    let teacher = train_teacher(&train, &[32, 64, 64, 2], &recipe, 4)?;
    let g = model_logits(&teacher, &train.x)?;
    let mut cfg = RunConfig::from_json(include_str!("../configs/ellipsoid.json"))?;
    cfg.sgd.epochs = 40;
    cfg.seed = 4;
    let (ens, _) = run(&cfg.distill_config(32, 2)?, &train.x, &g)?;
    println!("{} members", ens.len());
    println!(
        "{:>9} {:>8} {:>9} {:>8} {:>8}",
        "threshold", "members", "flops", "acc", "full"
    );
    for threshold in [0.6, 0.8, 0.9, 0.99, 1.0] {
        let (_, s) = summarize_early_exit(&ens, &test.x, &test.labels, threshold, teacher.flops())?;
        println!(
            "{threshold:>9} {:>8.3} {:>9.4} {:>8.4} {:>8.4}",
            s.mean_members_evaluated, s.mean_flops_fraction, s.accuracy, s.full_accuracy
        );
    }
    Ok(())
}
