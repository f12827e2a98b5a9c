//! Two search rounds by hand: the first on uniform weights (every candidate
//! has zero edge, so the lowest-loss one is kept), then a weight update with
//! its residual and a second search that must clear the weak-learning check.

use bdistil::data::{gen_ellipsoid, model_logits, train_teacher};
use bdistil::findwl::{find_weak_learner, FindWlConfig, LossMode, SearchInput};
use bdistil::game::{md_update, WeightState};
use bdistil::learner::{mlp_spec, ActivationCache, ClassSpec};
use bdistil::rng::RngStream;
use bdistil::train::SgdConfig;

fn main() -> bdistil::Result<()> {
    let (ds, _) = gen_ellipsoid(1, 1000, 8)?;
    let recipe = SgdConfig {
        epochs: 40,
        ..SgdConfig::recipe()
    };
    let teacher = train_teacher(&ds, &[8, 32, 2], &recipe, 1)?;
    let g = model_logits(&teacher, &ds.x)?;

    let class = ClassSpec::plain(mlp_spec(&[8, 8, 2])?)?;
    let cache = ActivationCache::new();
    let input = SearchInput {
        x: &ds.x,
        teacher_logits: &g,
        cache: &cache,
    };
    let cfg = FindWlConfig {
        loss_mode: LossMode::SquaredError,
        barrier_gamma: 0.03,
        barrier_decay: 1.0 / 3.0,
        max_search: 4,
        sgd: SgdConfig {
            lr: 0.001,
            epochs: 60,
            ..SgdConfig::recipe()
        },
        ..FindWlConfig::default()
    };

    let mut state = WeightState::init_uniform(g.rows(), 2)?;
    for round in 1..=2 {
        let Some(c) = find_weak_learner(&state, &class, input, &cfg, 0.0, &RngStream::new(round))? else {
            println!("round {round}: no restart cleared the check");
            break;
        };
        println!(
            "round {round}: restart {} {:?}, edge {:?}, loss {:.4}, clamps {}, barrier weight {:.4}",
            c.restart, c.outcome, c.edge_gamma, c.loss, c.clamp_count, c.barrier_gamma
        );
        state = md_update(&state, &c.logits.sub(&g)?, 0.02)?.0;
    }
    Ok(())
}
