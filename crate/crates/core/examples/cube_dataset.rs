//! The multi-class cube problem: points labelled by their nearest class
//! vertex, distilled with the default configuration.

use bdistil::config::RunConfig;
use bdistil::data::{accuracy, gen_cube, model_logits, split, train_teacher};
use bdistil::distill::run;
use bdistil::eval::{anytime_curve, margin_measure};
use bdistil::train::SgdConfig;

fn main() -> bdistil::Result<()> {
    let (ds, meta) = gen_cube(5, 2000, 8, 4, 16)?;
    let counts: Vec<usize> = (0..meta.classes)
        .map(|c| ds.labels.iter().filter(|&&y| y == c).count())
        .collect();
    println!("{} points in {} classes, counts {counts:?}", ds.len(), meta.classes);
    let (train, test) = split(&ds, 0.8, 5)?;
    let recipe = SgdConfig {
        epochs: 60,
        ..SgdConfig::recipe()
    };
    let teacher = train_teacher(&train, &[8, 64, 64, 4], &recipe, 5)?;
    let g = model_logits(&teacher, &train.x)?;
    println!(
        "teacher: train acc {:.4}, test acc {:.4}, margin below 0.5 for {:.3} of rows",
        accuracy(&g, &train.labels),
        accuracy(&model_logits(&teacher, &test.x)?, &test.labels),
        margin_measure(&g, 0.5)?
    );
    let mut cfg = RunConfig {
        rounds: 4,
        loss_mode: bdistil::findwl::LossMode::SquaredError,
        eta: 0.02,
        barrier_gamma: 0.03,
        barrier_decay: 1.0 / 3.0,
        max_search: 4,
        seed: 5,
        ..RunConfig::default()
    };
    cfg.sgd.lr = 0.001;
    cfg.sgd.epochs = 40;
    let (ens, history) = run(&cfg.distill_config(8, 4)?, &train.x, &g)?;
    println!("{} members, {} escalation(s)", ens.len(), history.escalations.len());
    for p in anytime_curve(&ens, &test.x, &test.labels, teacher.flops())? {
        println!(
            "  k={} flops={:.4} acc={:.4}",
            p.prefix_k, p.cum_flops_fraction, p.accuracy
        );
    }
    Ok(())
}
